//! Bipartite matching between ground-truth objects and query predictions.

use serde::{Deserialize, Serialize};

use super::boxes;
use super::types::{DetectionSet, GroundTruthSet, MatchResult};
use crate::error::{Error, Result};

/// Weights of the matching cost and the regression loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub l1: f64,
    pub giou: f64,
    /// Cross-entropy weight of the "no object" class.
    pub no_object: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l1: 5.0,
            giou: 2.0,
            no_object: 0.1,
        }
    }
}

/// `cost[j][i]` for ground truth `j` against query `i`.
pub fn matching_cost(pred: &DetectionSet, gt: &GroundTruthSet, w: &LossWeights) -> Vec<Vec<f64>> {
    gt.objects
        .iter()
        .map(|obj| {
            let c = GroundTruthSet::class_index(obj);
            (0..pred.num_queries())
                .map(|i| {
                    -(pred.class_scores[i][c] as f64)
                        + w.l1 * boxes::l1(obj.bbox, pred.boxes[i])
                        + w.giou * (1.0 - boxes::giou(obj.bbox, pred.boxes[i]))
                })
                .collect()
        })
        .collect()
}

/// Minimum-cost assignment of every row to a distinct column (`rows <= cols`).
///
/// Shortest augmenting path with row/column potentials, O(rows^2 * cols).
/// Columns are scanned in increasing order with strict comparisons, so among
/// equal-cost alternatives the lower column index wins.
pub fn linear_assignment(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = cost.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let m = cost[0].len();
    if cost.iter().any(|r| r.len() != m) {
        return Err(Error::InvalidInput("ragged cost matrix".into()));
    }
    if n > m {
        return Err(Error::InvalidInput(format!(
            "cannot assign {n} rows to {m} columns"
        )));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::Numerical("non-finite matching cost".into()));
    }

    // 1-based arrays; column 0 is the virtual source.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut row_of = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];

    for row in 1..=n {
        row_of[0] = row;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![usize::MAX; n];
    for j in 1..=m {
        if row_of[j] != 0 {
            assignment[row_of[j] - 1] = j - 1;
        }
    }
    Ok(assignment)
}

/// Optimal one-to-one matching of ground-truth objects to queries.
pub fn hungarian_match(
    pred: &DetectionSet,
    gt: &GroundTruthSet,
    weights: &LossWeights,
) -> Result<MatchResult> {
    if gt.len() > pred.num_queries() {
        return Err(Error::InvalidInput(format!(
            "{} ground-truth objects exceed {} queries",
            gt.len(),
            pred.num_queries()
        )));
    }
    let cost = matching_cost(pred, gt, weights);
    let assignment = linear_assignment(&cost)?;
    Ok(MatchResult {
        pairs: assignment.into_iter().enumerate().collect(),
    })
}

/// Total cost of an assignment, summed in ground-truth order.
pub fn assignment_cost(cost: &[Vec<f64>], assignment: &[usize]) -> f64 {
    assignment
        .iter()
        .enumerate()
        .map(|(j, &i)| cost[j][i])
        .sum()
}
