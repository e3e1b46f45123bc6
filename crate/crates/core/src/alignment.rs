//! Adversarial token alignment through a gradient reversal layer.
//!
//! Three per-token losses are provided: a binary domain cross-entropy, the
//! same term reweighted by `1 + W` from the cross-attention map, and a
//! 2K-way cross-entropy against CCAM-derived soft domain embeddings. All
//! losses take tokens that have already passed through
//! [`GradientReversal::apply`] and reduce by the mean over tokens.

use std::str::FromStr;

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor, D};
use candle_nn::{Linear, Module};
use serde::{Deserialize, Serialize};

use crate::cam::{compute_cam, compute_ccam, spatial_weights, CategoryCam, SpatialWeights};
use crate::detr::{DetectorOutput, TokenSequence};
use crate::error::{Error, Result};
use crate::nn::{leaky_relu, linear, ParamStore};

/// Probabilities are clipped to `[EPS, 1 - EPS]` before taking logs.
pub const EPS: f64 = 1e-7;

const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DomainLabel {
    Source,
    Target,
}

impl DomainLabel {
    /// 1 for source, 0 for target.
    pub fn value(self) -> u8 {
        match self {
            DomainLabel::Source => 1,
            DomainLabel::Target => 0,
        }
    }
}

struct Reverse(f64);

impl CustomOp1 for Reverse {
    fn name(&self) -> &'static str {
        "gradient-reversal"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (o1, o2) = match layout.contiguous_offsets() {
            Some(o) => o,
            None => candle_core::bail!("gradient reversal expects a contiguous input"),
        };
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(v[o1..o2].to_vec()),
            CpuStorage::F64(v) => CpuStorage::F64(v[o1..o2].to_vec()),
            _ => candle_core::bail!("gradient reversal supports f32 and f64 only"),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.affine(-self.0, 0.0)?))
    }
}

/// Identity in the forward pass; multiplies the incoming gradient by
/// `-scale` in the backward pass.
#[derive(Clone, Copy, Debug)]
pub struct GradientReversal {
    pub scale: f64,
}

impl Default for GradientReversal {
    fn default() -> Self {
        Self { scale: 1.0 }
    }
}

impl GradientReversal {
    pub fn new(scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Config(format!("gradient reversal scale must be positive, got {scale}")));
        }
        Ok(Self { scale })
    }

    pub fn apply(&self, xs: &Tensor) -> Result<Tensor> {
        Ok(xs.contiguous()?.apply_op1(Reverse(self.scale))?)
    }

    pub fn apply_tokens(&self, tokens: &TokenSequence) -> Result<TokenSequence> {
        Ok(TokenSequence {
            tokens: self.apply(&tokens.tokens)?,
            ..tokens.clone()
        })
    }
}

/// Three-layer feed-forward network with leaky ReLU between layers.
#[derive(Clone, Debug)]
struct Ffn {
    layers: [Linear; 3],
}

impl Ffn {
    fn new(store: &ParamStore, name: &str, input: usize, width: usize, output: usize) -> Result<Self> {
        Ok(Self {
            layers: [
                linear(store, &format!("{name}.0"), input, width)?,
                linear(store, &format!("{name}.1"), width, width)?,
                linear(store, &format!("{name}.2"), width, output)?,
            ],
        })
    }

    fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        let h = leaky_relu(&self.layers[0].forward(xs)?, LEAKY_SLOPE)?;
        let h = leaky_relu(&self.layers[1].forward(&h)?, LEAKY_SLOPE)?;
        Ok(self.layers[2].forward(&h)?)
    }
}

/// Maps each token to the probability that it comes from the source domain.
#[derive(Clone, Debug)]
pub struct BinaryDiscriminator {
    ffn: Ffn,
}

impl BinaryDiscriminator {
    pub fn new(store: &ParamStore, name: &str, hidden_dim: usize, width: usize) -> Result<Self> {
        Ok(Self {
            ffn: Ffn::new(store, name, hidden_dim, width, 1)?,
        })
    }

    /// `tokens`: `[B, N, D]` -> probabilities `[B, N]`.
    pub fn forward(&self, tokens: &Tensor) -> Result<Tensor> {
        let logits = self.ffn.forward(tokens)?.squeeze(D::Minus1)?;
        Ok(candle_nn::ops::sigmoid(&logits)?)
    }
}

/// Maps each token to a distribution over `2K` domain-category slots.
#[derive(Clone, Debug)]
pub struct MultiClassDiscriminator {
    ffn: Ffn,
    num_classes: usize,
}

impl MultiClassDiscriminator {
    pub fn new(
        store: &ParamStore,
        name: &str,
        hidden_dim: usize,
        width: usize,
        num_classes: usize,
    ) -> Result<Self> {
        Ok(Self {
            ffn: Ffn::new(store, name, hidden_dim, width, 2 * num_classes)?,
            num_classes,
        })
    }

    /// `K`, including the no-object class.
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Raw logits `[B, N, 2K]`.
    pub fn logits(&self, tokens: &Tensor) -> Result<Tensor> {
        self.ffn.forward(tokens)
    }

    /// Softmax probabilities `[B, N, 2K]`.
    pub fn forward(&self, tokens: &Tensor) -> Result<Tensor> {
        Ok(candle_nn::ops::softmax(&self.logits(tokens)?, D::Minus1)?)
    }
}

/// Per-token binary cross-entropy `[B, N]` for discriminator outputs `probs`.
pub fn binary_token_ce(probs: &Tensor, label: DomainLabel) -> Result<Tensor> {
    let p = probs.clamp(EPS, 1.0 - EPS)?;
    let ce = match label {
        DomainLabel::Source => p.log()?.neg()?,
        DomainLabel::Target => p.affine(-1.0, 1.0)?.log()?.neg()?,
    };
    Ok(ce)
}

/// Per-token soft cross-entropy `-sum_k d[k] log p[k]`, `[B, N]`.
pub fn soft_token_ce(probs: &Tensor, embeddings: &Tensor) -> Result<Tensor> {
    if probs.dims() != embeddings.dims() {
        return Err(Error::InvalidInput(format!(
            "discriminator output {:?} does not match domain embeddings {:?}",
            probs.dims(),
            embeddings.dims()
        )));
    }
    let logp = probs.clamp(EPS, 1.0)?.log()?;
    Ok((embeddings * logp)?.sum(D::Minus1)?.neg()?)
}

/// `[B, N]` tensor of `1 + W` from one [`SpatialWeights`] per image.
pub fn spatial_factor(weights: &[SpatialWeights], shape: (usize, usize), like: &Tensor) -> Result<Tensor> {
    let (b, n) = shape;
    if weights.len() != b {
        return Err(Error::InvalidInput(format!(
            "{} spatial weight maps for a batch of {b}",
            weights.len()
        )));
    }
    let mut data = Vec::with_capacity(b * n);
    for w in weights {
        if w.weights.len() != n {
            return Err(Error::InvalidInput(format!(
                "{} spatial weights for {n} tokens",
                w.weights.len()
            )));
        }
        data.extend(w.weights.iter().map(|v| 1.0 + v));
    }
    Ok(Tensor::from_vec(data, (b, n), like.device())?.to_dtype(like.dtype())?)
}

fn token_shape(tokens: &Tensor) -> Result<(usize, usize)> {
    let (b, n, _) = tokens.dims3()?;
    Ok((b, n))
}

/// Mean over tokens of the binary domain cross-entropy.
pub fn vanilla_ta_loss(tokens: &Tensor, label: DomainLabel, disc: &BinaryDiscriminator) -> Result<Tensor> {
    Ok(binary_token_ce(&disc.forward(tokens)?, label)?.mean_all()?)
}

/// Mean over tokens of `(1 + W[i])` times the binary domain cross-entropy.
pub fn spatial_ta_loss(
    tokens: &Tensor,
    label: DomainLabel,
    disc: &BinaryDiscriminator,
    weights: &[SpatialWeights],
) -> Result<Tensor> {
    let factor = spatial_factor(weights, token_shape(tokens)?, tokens)?;
    let ce = binary_token_ce(&disc.forward(tokens)?, label)?;
    Ok((ce * factor)?.mean_all()?)
}

/// Per-token category knowledge `s`: softmax over the K classes of each
/// CCAM row. Returned row-major `N_k x K`.
pub fn domain_knowledge(ccam: &CategoryCam) -> Vec<f64> {
    let k = ccam.num_classes;
    let mut out = Vec::with_capacity(ccam.ccam.len());
    for row in ccam.ccam.chunks(k) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / z));
    }
    out
}

/// `[0; s]` for source, `[s; 0]` for target.
pub fn build_domain_embedding(s: &[f64], label: DomainLabel) -> Vec<f64> {
    let zeros = vec![0.0; s.len()];
    match label {
        DomainLabel::Source => [zeros.as_slice(), s].concat(),
        DomainLabel::Target => [s, zeros.as_slice()].concat(),
    }
}

/// `[B, N, 2K]` embeddings from per-image knowledge rows (`N x K` each).
pub fn embedding_tensor(
    knowledge: &[Vec<f64>],
    label: DomainLabel,
    num_tokens: usize,
    num_classes: usize,
    like: &Tensor,
) -> Result<Tensor> {
    let b = knowledge.len();
    let mut data = Vec::with_capacity(b * num_tokens * 2 * num_classes);
    for s in knowledge {
        if s.len() != num_tokens * num_classes {
            return Err(Error::InvalidInput(format!(
                "domain knowledge of length {} for {num_tokens} tokens x {num_classes} classes",
                s.len()
            )));
        }
        for row in s.chunks(num_classes) {
            data.extend(build_domain_embedding(row, label));
        }
    }
    Ok(Tensor::from_vec(data, (b, num_tokens, 2 * num_classes), like.device())?.to_dtype(like.dtype())?)
}

/// Mean over tokens of the soft cross-entropy against `embeddings` `[B, N, 2K]`.
pub fn semantic_ta_loss(tokens: &Tensor, embeddings: &Tensor, disc: &MultiClassDiscriminator) -> Result<Tensor> {
    Ok(soft_token_ce(&disc.forward(tokens)?, embeddings)?.mean_all()?)
}

/// Mean over tokens of `(1 + W[i])` times the soft cross-entropy.
pub fn ssta_loss(
    tokens: &Tensor,
    weights: &[SpatialWeights],
    embeddings: &Tensor,
    disc: &MultiClassDiscriminator,
) -> Result<Tensor> {
    let factor = spatial_factor(weights, token_shape(tokens)?, tokens)?;
    let ce = soft_token_ce(&disc.forward(tokens)?, embeddings)?;
    Ok((ce * factor)?.mean_all()?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignmentMode {
    Ta,
    Spata,
    Semta,
    Ssta,
}

impl AlignmentMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AlignmentMode::Ta => "ta",
            AlignmentMode::Spata => "spata",
            AlignmentMode::Semta => "semta",
            AlignmentMode::Ssta => "ssta",
        }
    }

    pub fn uses_spatial(self) -> bool {
        matches!(self, AlignmentMode::Spata | AlignmentMode::Ssta)
    }

    pub fn uses_semantic(self) -> bool {
        matches!(self, AlignmentMode::Semta | AlignmentMode::Ssta)
    }
}

impl FromStr for AlignmentMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ta" => Ok(AlignmentMode::Ta),
            "spata" => Ok(AlignmentMode::Spata),
            "semta" => Ok(AlignmentMode::Semta),
            "ssta" => Ok(AlignmentMode::Ssta),
            other => Err(Error::Config(format!(
                "unknown alignment mode '{other}' (expected ta, spata, semta or ssta)"
            ))),
        }
    }
}

/// Host-side, gradient-free guidance derived from the decoder's attention:
/// one spatial weight map and one `N_k x K` knowledge matrix per image.
#[derive(Clone, Debug)]
pub struct CamGuidance {
    pub weights: Vec<SpatialWeights>,
    pub knowledge: Vec<Vec<f64>>,
}

impl CamGuidance {
    pub fn from_output(out: &DetectorOutput) -> Result<Self> {
        let sets = out.detection_sets()?;
        let mut weights = Vec::with_capacity(sets.len());
        let mut knowledge = Vec::with_capacity(sets.len());
        for (trace, set) in out.traces.iter().zip(&sets) {
            let cam = compute_cam(trace)?;
            weights.push(spatial_weights(&cam));
            knowledge.push(domain_knowledge(&compute_ccam(&cam, set)?));
        }
        Ok(Self { weights, knowledge })
    }

    /// `W = 0` and uniform `s` for every token.
    pub fn neutral(batch: usize, num_tokens: usize, num_classes: usize) -> Self {
        Self {
            weights: vec![SpatialWeights::zeros(num_tokens); batch],
            knowledge: vec![vec![1.0 / num_classes as f64; num_tokens * num_classes]; batch],
        }
    }
}

#[derive(Clone, Debug)]
enum Discriminator {
    Binary(BinaryDiscriminator),
    MultiClass(MultiClassDiscriminator),
}

/// Alignment losses at the two token taps.
pub struct AlignmentLoss {
    /// Loss on CNN tokens.
    pub cnn: Tensor,
    /// Loss on encoder tokens.
    pub enc: Tensor,
}

/// Gradient reversal plus one discriminator per tap, of the kind the mode needs.
pub struct Aligner {
    mode: AlignmentMode,
    grl: GradientReversal,
    num_classes: usize,
    cnn: Discriminator,
    enc: Discriminator,
}

impl Aligner {
    pub fn new(
        store: &ParamStore,
        mode: AlignmentMode,
        hidden_dim: usize,
        num_classes: usize,
        width: usize,
        grl: GradientReversal,
    ) -> Result<Self> {
        let make = |name: &str| -> Result<Discriminator> {
            Ok(if mode.uses_semantic() {
                Discriminator::MultiClass(MultiClassDiscriminator::new(store, name, hidden_dim, width, num_classes)?)
            } else {
                Discriminator::Binary(BinaryDiscriminator::new(store, name, hidden_dim, width)?)
            })
        };
        Ok(Self {
            mode,
            grl,
            num_classes,
            cnn: make("disc.cnn")?,
            enc: make("disc.enc")?,
        })
    }

    pub fn mode(&self) -> AlignmentMode {
        self.mode
    }

    fn tap_loss(
        &self,
        disc: &Discriminator,
        tokens: &TokenSequence,
        guidance: &CamGuidance,
        label: DomainLabel,
    ) -> Result<Tensor> {
        let z = self.grl.apply(&tokens.tokens)?;
        match (self.mode, disc) {
            (AlignmentMode::Ta, Discriminator::Binary(d)) => vanilla_ta_loss(&z, label, d),
            (AlignmentMode::Spata, Discriminator::Binary(d)) => spatial_ta_loss(&z, label, d, &guidance.weights),
            (AlignmentMode::Semta, Discriminator::MultiClass(d)) => {
                let emb = embedding_tensor(&guidance.knowledge, label, tokens.len(), self.num_classes, &z)?;
                semantic_ta_loss(&z, &emb, d)
            }
            (AlignmentMode::Ssta, Discriminator::MultiClass(d)) => {
                let emb = embedding_tensor(&guidance.knowledge, label, tokens.len(), self.num_classes, &z)?;
                ssta_loss(&z, &guidance.weights, &emb, d)
            }
            _ => unreachable!("discriminator kind is fixed by the mode at construction"),
        }
    }

    /// `L_da^c` and `L_da^e` for one domain's batch. The same guidance is
    /// applied at both taps since they share one grid.
    pub fn objective(
        &self,
        cnn_tokens: &TokenSequence,
        enc_tokens: &TokenSequence,
        guidance: &CamGuidance,
        label: DomainLabel,
    ) -> Result<AlignmentLoss> {
        if cnn_tokens.grid_shape != enc_tokens.grid_shape {
            return Err(Error::InvalidInput("CNN and encoder token grids differ".into()));
        }
        Ok(AlignmentLoss {
            cnn: self.tap_loss(&self.cnn, cnn_tokens, guidance, label)?,
            enc: self.tap_loss(&self.enc, enc_tokens, guidance, label)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detr::Tap;
    use candle_core::{DType, Device, Var};
    use rand::{Rng, SeedableRng};

    fn scalar(t: &Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn seq(tokens: Tensor, grid: (usize, usize)) -> TokenSequence {
        let d = tokens.dim(2).unwrap();
        TokenSequence {
            pos: Tensor::zeros((grid.0 * grid.1, d), DType::F64, &Device::Cpu).unwrap(),
            tokens,
            grid_shape: grid,
            tap: Tap::Cnn,
        }
    }

    #[test]
    fn grl_forward_is_identity() {
        let x = randn(&[2, 5, 3], 0);
        let y = GradientReversal::default().apply(&x).unwrap();
        assert_eq!(x.to_vec3::<f64>().unwrap(), y.to_vec3::<f64>().unwrap());
        let s = seq(x.clone(), (1, 5));
        let r = GradientReversal::new(0.5).unwrap().apply_tokens(&s).unwrap();
        assert_eq!(r.tokens.to_vec3::<f64>().unwrap(), x.to_vec3::<f64>().unwrap());
    }

    #[test]
    fn grl_negates_gradient() {
        let x = Var::from_tensor(&randn(&[1, 4, 3], 1)).unwrap();
        let plain = x.as_tensor().sqr().unwrap().sum_all().unwrap();
        let g_plain = plain.backward().unwrap().get(x.as_tensor()).unwrap().clone();
        for scale in [1.0, 0.5] {
            let z = GradientReversal::new(scale).unwrap().apply(x.as_tensor()).unwrap();
            let rev = z.sqr().unwrap().sum_all().unwrap();
            let g_rev = rev.backward().unwrap().get(x.as_tensor()).unwrap().clone();
            let expect = (g_plain.clone() * -scale).unwrap();
            assert_eq!(g_rev.to_vec3::<f64>().unwrap(), expect.to_vec3::<f64>().unwrap());
        }
    }

    #[test]
    fn grl_matches_finite_differences() {
        let store = ParamStore::new(3, DType::F64);
        let disc = BinaryDiscriminator::new(&store, "d", 2, 8).unwrap();
        let x0 = randn(&[1, 2, 2], 2);
        let f = |x: &Tensor| scalar(&vanilla_ta_loss(x, DomainLabel::Source, &disc).unwrap());
        let scale = 0.5;
        let x = Var::from_tensor(&x0).unwrap();
        let z = GradientReversal::new(scale).unwrap().apply(x.as_tensor()).unwrap();
        let loss = vanilla_ta_loss(&z, DomainLabel::Source, &disc).unwrap();
        let grads = loss.backward().unwrap();
        let g: Vec<f64> = grads.get(x.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let base: Vec<f64> = x0.flatten_all().unwrap().to_vec1().unwrap();
        let h = 1e-6;
        for i in 0..base.len() {
            let mut p = base.clone();
            let mut m = base.clone();
            p[i] += h;
            m[i] -= h;
            let tp = Tensor::from_vec(p, (1, 2, 2), &Device::Cpu).unwrap();
            let tm = Tensor::from_vec(m, (1, 2, 2), &Device::Cpu).unwrap();
            let fd = -scale * (f(&tp) - f(&tm)) / (2.0 * h);
            let rel = (g[i] - fd).abs() / fd.abs().max(1e-12);
            assert!(rel < 1e-4, "component {i}: analytic {} vs fd {fd}", g[i]);
        }
    }

    #[test]
    fn binary_ce_reference_values() {
        let ones = Tensor::ones((1, 3), DType::F64, &Device::Cpu).unwrap();
        let ce = binary_token_ce(&ones, DomainLabel::Source).unwrap();
        assert!(scalar(&ce.mean_all().unwrap()) < 1e-6);
        let half = (ones * 0.5).unwrap();
        let ce = binary_token_ce(&half, DomainLabel::Target).unwrap();
        assert!((scalar(&ce.mean_all().unwrap()) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn vanilla_matches_hand_rolled() {
        let store = ParamStore::new(5, DType::F64);
        let disc = BinaryDiscriminator::new(&store, "d", 3, 16).unwrap();
        let x = randn(&[1, 4, 3], 6);
        let probs: Vec<f64> = disc.forward(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        for label in [DomainLabel::Source, DomainLabel::Target] {
            let d = label.value() as f64;
            let manual: f64 = probs
                .iter()
                .map(|&p| -(d * p.ln() + (1.0 - d) * (1.0 - p).ln()))
                .sum::<f64>()
                / 4.0;
            let loss = scalar(&vanilla_ta_loss(&x, label, &disc).unwrap());
            assert!((loss - manual).abs() < 1e-12);
            assert!(loss >= 0.0);
        }
    }

    #[test]
    fn spatial_reductions_and_hand_case() {
        let store = ParamStore::new(7, DType::F64);
        let disc = BinaryDiscriminator::new(&store, "d", 3, 16).unwrap();
        let x = randn(&[1, 3, 3], 8);
        let label = DomainLabel::Target;
        let vanilla = scalar(&vanilla_ta_loss(&x, label, &disc).unwrap());
        let zero = scalar(&spatial_ta_loss(&x, label, &disc, &[SpatialWeights::zeros(3)]).unwrap());
        assert!((zero - vanilla).abs() < 1e-6);
        let ones = SpatialWeights { weights: vec![1.0; 3], threshold: 0.0 };
        let two = scalar(&spatial_ta_loss(&x, label, &disc, &[ones]).unwrap());
        assert!((two - 2.0 * vanilla).abs() < 1e-12);
        let w = SpatialWeights { weights: vec![0.0, 0.0, 0.6], threshold: 0.0 };
        let probs: Vec<f64> = disc.forward(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let manual = (probs
            .iter()
            .zip([1.0, 1.0, 1.6])
            .map(|(&p, f)| -f * (1.0 - p).ln())
            .sum::<f64>())
            / 3.0;
        let got = scalar(&spatial_ta_loss(&x, label, &disc, &[w]).unwrap());
        assert!((got - manual).abs() < 1e-12);
    }

    #[test]
    fn spatial_length_mismatch_rejected() {
        let store = ParamStore::new(7, DType::F64);
        let disc = BinaryDiscriminator::new(&store, "d", 3, 4).unwrap();
        let x = randn(&[1, 3, 3], 8);
        let r = spatial_ta_loss(&x, DomainLabel::Source, &disc, &[SpatialWeights::zeros(4)]);
        assert!(matches!(r, Err(Error::InvalidInput(_))));
    }

    fn ccam_with_row(row: Vec<f64>) -> CategoryCam {
        CategoryCam {
            num_classes: row.len(),
            per_class_counts: vec![0; row.len()],
            ccam: row,
        }
    }

    #[test]
    fn domain_knowledge_softmax() {
        let s = domain_knowledge(&ccam_with_row(vec![0.0; 4]));
        assert!(s.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let s = domain_knowledge(&ccam_with_row(vec![10.0, 0.0, 0.0, 0.0]));
        assert!(s[0] > 0.9998);
        let row = [0.2, 0.5, 0.1, 0.0];
        let s = domain_knowledge(&ccam_with_row(row.to_vec()));
        let z: f64 = row.iter().map(|v: &f64| v.exp()).sum();
        for (a, r) in s.iter().zip(row) {
            assert!((a - r.exp() / z).abs() < 1e-15);
        }
    }

    #[test]
    fn embedding_layout() {
        let s = [0.25; 4];
        assert_eq!(
            build_domain_embedding(&s, DomainLabel::Source),
            vec![0.0, 0.0, 0.0, 0.0, 0.25, 0.25, 0.25, 0.25]
        );
        assert_eq!(
            build_domain_embedding(&s, DomainLabel::Target),
            vec![0.25, 0.25, 0.25, 0.25, 0.0, 0.0, 0.0, 0.0]
        );
        assert_eq!(build_domain_embedding(&[1.0], DomainLabel::Source), vec![0.0, 1.0]);
    }

    #[test]
    fn semantic_matches_manual_and_k1_binary() {
        let store = ParamStore::new(9, DType::F64);
        let disc = MultiClassDiscriminator::new(&store, "m", 3, 16, 4).unwrap();
        let x = randn(&[1, 1, 3], 10);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let raw: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..1.0)).collect();
        let z: f64 = raw.iter().sum();
        let s: Vec<f64> = raw.iter().map(|v| v / z).collect();
        let emb = embedding_tensor(std::slice::from_ref(&s), DomainLabel::Target, 1, 4, &x).unwrap();
        let probs: Vec<f64> = disc.forward(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let emb_v = build_domain_embedding(&s, DomainLabel::Target);
        let manual: f64 = -emb_v.iter().zip(&probs).map(|(d, p)| d * p.ln()).sum::<f64>();
        let got = scalar(&semantic_ta_loss(&x, &emb, &disc).unwrap());
        assert!((got - manual).abs() < 1e-12);

        // K = 1: a 2-logit discriminator against label "source"
        let disc1 = MultiClassDiscriminator::new(&store, "m1", 3, 16, 1).unwrap();
        let x = randn(&[1, 5, 3], 12);
        let emb = embedding_tensor(&[vec![1.0; 5]], DomainLabel::Source, 5, 1, &x).unwrap();
        let sem = scalar(&semantic_ta_loss(&x, &emb, &disc1).unwrap());
        let logits = disc1.logits(&x).unwrap();
        let diff = (logits.narrow(2, 1, 1).unwrap() - logits.narrow(2, 0, 1).unwrap()).unwrap();
        let p_source = candle_nn::ops::sigmoid(&diff.squeeze(2).unwrap()).unwrap();
        let bce = scalar(&binary_token_ce(&p_source, DomainLabel::Source).unwrap().mean_all().unwrap());
        assert!((sem - bce).abs() < 1e-6);
    }

    #[test]
    fn semantic_dimension_mismatch_rejected() {
        let store = ParamStore::new(9, DType::F64);
        let disc = MultiClassDiscriminator::new(&store, "m", 3, 4, 4).unwrap();
        let x = randn(&[1, 2, 3], 10);
        let emb = Tensor::zeros((1, 2, 6), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(semantic_ta_loss(&x, &emb, &disc), Err(Error::InvalidInput(_))));
        assert!(matches!(
            embedding_tensor(&[vec![0.5; 3]], DomainLabel::Source, 2, 4, &x),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn ssta_reductions_and_hand_case() {
        let store = ParamStore::new(13, DType::F64);
        let disc = MultiClassDiscriminator::new(&store, "m", 3, 16, 4).unwrap();
        let x = randn(&[1, 3, 3], 14);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(15);
        let ccam = CategoryCam {
            num_classes: 4,
            per_class_counts: vec![1; 4],
            ccam: (0..12).map(|_| rng.gen_range(0.0..0.5)).collect(),
        };
        let s = domain_knowledge(&ccam);
        let emb = embedding_tensor(std::slice::from_ref(&s), DomainLabel::Source, 3, 4, &x).unwrap();
        let sem = scalar(&semantic_ta_loss(&x, &emb, &disc).unwrap());
        let at_zero = scalar(&ssta_loss(&x, &[SpatialWeights::zeros(3)], &emb, &disc).unwrap());
        assert!((sem - at_zero).abs() < 1e-6);

        let w = SpatialWeights { weights: vec![0.0, 0.0, 0.6], threshold: 0.0 };
        let got = scalar(&ssta_loss(&x, &[w], &emb, &disc).unwrap());
        assert!(got >= sem);
        let probs: Vec<f64> = disc.forward(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let mut manual = 0.0;
        for (i, f) in [1.0, 1.0, 1.6].iter().enumerate() {
            let e = build_domain_embedding(&s[i * 4..(i + 1) * 4], DomainLabel::Source);
            let ce: f64 = -e.iter().zip(&probs[i * 8..(i + 1) * 8]).map(|(d, p)| d * p.ln()).sum::<f64>();
            manual += f * ce;
        }
        assert!((got - manual / 3.0).abs() < 1e-12);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("ssta".parse::<AlignmentMode>().unwrap(), AlignmentMode::Ssta);
        assert!(matches!("fancy".parse::<AlignmentMode>(), Err(Error::Config(_))));
        for m in [AlignmentMode::Ta, AlignmentMode::Spata, AlignmentMode::Semta, AlignmentMode::Ssta] {
            assert_eq!(m.as_str().parse::<AlignmentMode>().unwrap(), m);
        }
    }

    #[test]
    fn objective_dispatch() {
        let x_c = seq(randn(&[2, 4, 6], 20), (2, 2));
        let x_e = seq(randn(&[2, 4, 6], 21), (2, 2));
        let neutral = CamGuidance::neutral(2, 4, 4);
        let store = ParamStore::new(22, DType::F64);
        let ta = Aligner::new(&store, AlignmentMode::Ta, 6, 4, 8, GradientReversal::default()).unwrap();
        let out = ta.objective(&x_c, &x_e, &neutral, DomainLabel::Source).unwrap();
        let Discriminator::Binary(dc) = &ta.cnn else { panic!() };
        let Discriminator::Binary(de) = &ta.enc else { panic!() };
        let want_c = scalar(&vanilla_ta_loss(&x_c.tokens, DomainLabel::Source, dc).unwrap());
        let want_e = scalar(&vanilla_ta_loss(&x_e.tokens, DomainLabel::Source, de).unwrap());
        assert_eq!(scalar(&out.cnn), want_c);
        assert_eq!(scalar(&out.enc), want_e);

        // ssta with W = 0 and uniform s equals semta with uniform targets
        let s1 = ParamStore::new(23, DType::F64);
        let s2 = ParamStore::new(23, DType::F64);
        let ssta = Aligner::new(&s1, AlignmentMode::Ssta, 6, 4, 8, GradientReversal::default()).unwrap();
        let semta = Aligner::new(&s2, AlignmentMode::Semta, 6, 4, 8, GradientReversal::default()).unwrap();
        let a = ssta.objective(&x_c, &x_e, &neutral, DomainLabel::Target).unwrap();
        let b = semta.objective(&x_c, &x_e, &neutral, DomainLabel::Target).unwrap();
        assert!((scalar(&a.cnn) - scalar(&b.cnn)).abs() < 1e-12);
        assert!((scalar(&a.enc) - scalar(&b.enc)).abs() < 1e-12);
    }

    #[test]
    fn adversarial_step_confuses_frozen_discriminator() {
        // 2-D tokens; the discriminator is held fixed and only the tokens move.
        let store = ParamStore::new(30, DType::F64);
        let disc = BinaryDiscriminator::new(&store, "d", 2, 16).unwrap();
        let x = Var::from_tensor(&randn(&[1, 8, 2], 31)).unwrap();
        let grl = GradientReversal::default();
        let before = scalar(&vanilla_ta_loss(x.as_tensor(), DomainLabel::Source, &disc).unwrap());
        let loss = vanilla_ta_loss(&grl.apply(x.as_tensor()).unwrap(), DomainLabel::Source, &disc).unwrap();
        let g = loss.backward().unwrap().get(x.as_tensor()).unwrap().clone();
        x.set(&(x.as_tensor() - (g * 0.1).unwrap()).unwrap()).unwrap();
        let after = scalar(&vanilla_ta_loss(x.as_tensor(), DomainLabel::Source, &disc).unwrap());
        assert!(after > before, "{after} <= {before}");
    }

    #[test]
    fn losses_finite_at_saturation() {
        let p = Tensor::new(&[[0.0f64, 1.0]], &Device::Cpu).unwrap();
        for label in [DomainLabel::Source, DomainLabel::Target] {
            let ce: Vec<f64> = binary_token_ce(&p, label).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            assert!(ce.iter().all(|v| v.is_finite() && *v >= 0.0));
        }
        let probs = Tensor::new(&[[[1.0f64, 0.0]]], &Device::Cpu).unwrap();
        let emb = Tensor::new(&[[[0.0f64, 1.0]]], &Device::Cpu).unwrap();
        let ce = scalar(&soft_token_ce(&probs, &emb).unwrap().sum_all().unwrap());
        assert!(ce.is_finite() && ce > 0.0);
    }

    #[test]
    fn disjoint_embedding_supports() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(40);
        for _ in 0..50 {
            let k = rng.gen_range(1..6);
            let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..1.0)).collect();
            let z: f64 = raw.iter().sum();
            let s: Vec<f64> = raw.iter().map(|v| v / z).collect();
            let src = build_domain_embedding(&s, DomainLabel::Source);
            let tgt = build_domain_embedding(&s, DomainLabel::Target);
            let dot: f64 = src.iter().zip(&tgt).map(|(a, b)| a * b).sum();
            assert_eq!(dot, 0.0);
            assert!((src.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!((tgt.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    proptest::proptest! {
        #[test]
        fn alignment_losses_nonnegative_and_ordered(
            seed in 0u64..1000,
            n in 1usize..10,
            k in 1usize..5,
            w in proptest::collection::vec(0f64..1.0, 10),
            source in proptest::bool::ANY,
        ) {
            let label = if source { DomainLabel::Source } else { DomainLabel::Target };
            let store = ParamStore::new(seed, DType::F64);
            let bin = BinaryDiscriminator::new(&store, "b", 3, 8).unwrap();
            let multi = MultiClassDiscriminator::new(&store, "m", 3, 8, k).unwrap();
            let x = (randn(&[1, n, 3], seed) * 4.0).unwrap();
            let weights = vec![SpatialWeights { weights: w[..n].to_vec(), threshold: 0.0 }];
            let vanilla = scalar(&vanilla_ta_loss(&x, label, &bin).unwrap());
            let spatial = scalar(&spatial_ta_loss(&x, label, &bin, &weights).unwrap());
            proptest::prop_assert!(vanilla.is_finite() && vanilla >= 0.0);
            proptest::prop_assert!(spatial >= vanilla - 1e-12);

            let knowledge = vec![vec![1.0 / k as f64; n * k]];
            let emb = embedding_tensor(&knowledge, label, n, k, &x).unwrap();
            let sem = scalar(&semantic_ta_loss(&x, &emb, &multi).unwrap());
            let both = scalar(&ssta_loss(&x, &weights, &emb, &multi).unwrap());
            proptest::prop_assert!(sem.is_finite() && sem >= 0.0);
            proptest::prop_assert!(both >= sem - 1e-12);
        }

        #[test]
        fn embeddings_split_by_domain(logits in proptest::collection::vec(-20f64..20.0, 1..9)) {
            let ccam = CategoryCam {
                num_classes: logits.len(),
                per_class_counts: vec![1; logits.len()],
                ccam: logits.clone(),
            };
            let s = domain_knowledge(&ccam);
            let k = s.len();
            let src = build_domain_embedding(&s, DomainLabel::Source);
            let tgt = build_domain_embedding(&s, DomainLabel::Target);
            proptest::prop_assert!(src[..k].iter().all(|v| *v == 0.0));
            proptest::prop_assert!(tgt[k..].iter().all(|v| *v == 0.0));
            proptest::prop_assert!((src.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            proptest::prop_assert_eq!(&src[k..], &tgt[..k]);
        }
    }
}
