//! Training loop, checkpoints and CAM export.
//!
//! Each step draws a labeled source batch and, once warmup is over and the
//! mode aligns, an equally sized unlabeled target batch. The objective is
//! `L_det + lambda * (L_da^c + L_da^e)` where the alignment terms average the
//! source-side and target-side losses.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alignment::{Aligner, AlignmentMode, CamGuidance, DomainLabel, GradientReversal};
use crate::cam::{compute_cam, write_grid_file};
use crate::data::{read_ppm, read_split, split_dir, Split};
use crate::detr::{batch_detection_loss, Detector, GroundTruthSet, ImageTensor, LossWeights, ModelConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::nn::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    SourceOnly,
    Ta,
    Spata,
    Semta,
    Ssta,
}

impl TrainMode {
    pub fn alignment(self) -> Option<AlignmentMode> {
        match self {
            TrainMode::SourceOnly => None,
            TrainMode::Ta => Some(AlignmentMode::Ta),
            TrainMode::Spata => Some(AlignmentMode::Spata),
            TrainMode::Semta => Some(AlignmentMode::Semta),
            TrainMode::Ssta => Some(AlignmentMode::Ssta),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self.alignment() {
            None => "source_only",
            Some(m) => m.as_str(),
        }
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "source_only" {
            return Ok(TrainMode::SourceOnly);
        }
        Ok(match s.parse::<AlignmentMode>() {
            Ok(AlignmentMode::Ta) => TrainMode::Ta,
            Ok(AlignmentMode::Spata) => TrainMode::Spata,
            Ok(AlignmentMode::Semta) => TrainMode::Semta,
            Ok(AlignmentMode::Ssta) => TrainMode::Ssta,
            Err(_) => {
                return Err(Error::Config(format!(
                    "unknown mode '{s}' (expected source_only, ta, spata, semta or ssta)"
                )))
            }
        })
    }
}

/// Training hyperparameters. Serialized as one flat JSON object that also
/// carries the model keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// Weight of the alignment terms.
    pub lambda: f64,
    pub lr: f64,
    /// Multiplier applied to `lr` from epoch `lr_decay_epoch` on.
    pub lr_decay: f64,
    pub lr_decay_epoch: usize,
    pub epochs: usize,
    /// Leading epochs trained on source detection loss only.
    pub warmup_epochs: usize,
    /// Source images per step; the target batch has the same size.
    pub batch_size: usize,
    pub seed: u64,
    /// Hidden width of the domain discriminators.
    pub disc_width: usize,
    pub grl_scale: f64,
    pub loss_l1: f64,
    pub loss_giou: f64,
    pub loss_no_object: f64,
    #[serde(flatten)]
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            mode: TrainMode::SourceOnly,
            lambda: 1.0,
            lr: 1e-4,
            lr_decay: 0.1,
            lr_decay_epoch: 40,
            epochs: 50,
            warmup_epochs: 5,
            batch_size: 4,
            seed: 0,
            disc_width: 256,
            grl_scale: 1.0,
            loss_l1: w.l1,
            loss_giou: w.giou,
            loss_no_object: w.no_object,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.disc_width == 0 {
            return Err(Error::Config("disc_width must be positive".into()));
        }
        self.model.validate()
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            l1: self.loss_l1,
            giou: self.loss_giou,
            no_object: self.loss_no_object,
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_decay_epoch {
            self.lr * self.lr_decay
        } else {
            self.lr
        }
    }

    /// Parses a flat JSON object; keys not listed in the defaults are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        let obj = value
            .as_object()
            .ok_or_else(|| Error::Config("config must be a JSON object".into()))?;
        let known = serde_json::to_value(TrainConfig::default())?;
        let known = known.as_object().expect("config serializes to an object");
        if let Some(k) = obj.keys().find(|k| !known.contains_key(*k)) {
            return Err(Error::Config(format!("unknown config key '{k}'")));
        }
        let cfg: TrainConfig =
            serde_json::from_value(value).map_err(|e| Error::Config(format!("bad config value: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Per-epoch means over steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_det: f64,
    pub l_da_c: f64,
    pub l_da_e: f64,
    pub total: f64,
}

pub const METRICS_HEADER: &str = "epoch,l_det,l_da_c,l_da_e,total";

pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for m in history {
        let _ = writeln!(s, "{},{},{},{},{}", m.epoch, m.l_det, m.l_da_c, m.l_da_e, m.total);
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: TrainMode,
    pub seed: u64,
    pub lambda: f64,
    pub epochs: Vec<EpochMetrics>,
    pub source_val: Option<EvalReport>,
    pub target_val: Option<EvalReport>,
}

/// The four splits a training run reads.
#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub source_train: Split,
    pub target_train: Split,
    pub source_val: Split,
    pub target_val: Split,
}

impl TrainData {
    pub fn load(root: &Path) -> Result<Self> {
        Ok(Self {
            source_train: read_split(&split_dir(root, "source", "train"))?,
            target_train: read_split(&split_dir(root, "target", "train"))?,
            source_val: read_split(&split_dir(root, "source", "val"))?,
            target_val: read_split(&split_dir(root, "target", "val"))?,
        })
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn check_finite(value: f64, term: &str, epoch: usize, step: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "{term} is {value} at epoch {epoch}, step {step}"
        )))
    }
}

fn batch_images(split: &Split, idx: &[usize]) -> Result<Tensor> {
    let refs: Vec<&ImageTensor> = idx.iter().map(|&i| &split.images[i]).collect();
    ImageTensor::batch(&refs, DType::F32, &Device::Cpu)
}

/// Seed offsets that keep the detector, discriminators and the two batch
/// orders on independent streams.
const DISC_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

pub struct TrainOutcome {
    pub detector: Detector,
    pub history: Vec<EpochMetrics>,
}

/// Trains a detector per `config` on in-memory splits.
pub fn train_on(config: &TrainConfig, data: &TrainData) -> Result<TrainOutcome> {
    config.validate()?;
    let n_src = data.source_train.len();
    if n_src == 0 {
        return Err(Error::InvalidInput("source train split is empty".into()));
    }
    let alignment = config.mode.alignment();
    if alignment.is_some() && config.epochs > config.warmup_epochs && data.target_train.is_empty() {
        return Err(Error::InvalidInput("target train split is empty".into()));
    }
    let detector = Detector::new(config.model.clone(), config.seed, DType::F32)?;
    let disc_store = ParamStore::new(config.seed ^ DISC_STREAM, DType::F32);
    let aligner = match alignment {
        Some(mode) => Some(Aligner::new(
            &disc_store,
            mode,
            config.model.hidden_dim,
            config.model.num_classes(),
            config.disc_width,
            GradientReversal::new(config.grl_scale)?,
        )?),
        None => None,
    };
    let mut vars = detector.store().vars();
    vars.extend(disc_store.vars());
    let mut opt = AdamW::new(
        vars,
        ParamsAdamW {
            lr: config.lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let weights = config.loss_weights();
    let gts: Vec<GroundTruthSet> = data.source_train.records.iter().map(|r| r.ground_truth()).collect();

    let mut src_rng = ChaCha8Rng::seed_from_u64(config.seed);
    src_rng.set_stream(1);
    let mut tgt_rng = ChaCha8Rng::seed_from_u64(config.seed);
    tgt_rng.set_stream(2);
    let mut src_order: Vec<usize> = (0..n_src).collect();
    let mut tgt_order: Vec<usize> = (0..data.target_train.len()).collect();

    let b = config.batch_size;
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        opt.set_learning_rate(config.lr_at(epoch));
        src_order.shuffle(&mut src_rng);
        let align_now = aligner.as_ref().filter(|_| epoch >= config.warmup_epochs);
        if align_now.is_some() {
            tgt_order.shuffle(&mut tgt_rng);
        }
        let (mut sum_det, mut sum_c, mut sum_e, mut sum_total) = (0.0, 0.0, 0.0, 0.0);
        let mut steps = 0usize;
        for (step, chunk) in src_order.chunks(b).enumerate() {
            let out_s = detector.forward(&batch_images(&data.source_train, chunk)?)?;
            let batch_gts: Vec<&GroundTruthSet> = chunk.iter().map(|&i| &gts[i]).collect();
            let det = batch_detection_loss(&out_s, &batch_gts, &weights)?;
            let l_det = scalar(&det.total)?;
            check_finite(l_det, "L_det", epoch, step)?;
            let (total, l_c, l_e) = match align_now {
                None => (det.total, 0.0, 0.0),
                Some(aligner) => {
                    let t_idx: Vec<usize> = (0..chunk.len())
                        .map(|j| tgt_order[(step * b + j) % tgt_order.len()])
                        .collect();
                    let out_t = detector.forward(&batch_images(&data.target_train, &t_idx)?)?;
                    let (guide_s, guide_t) = guidance(aligner.mode(), &out_s, &out_t, config.model.num_classes())?;
                    let src = aligner.objective(&out_s.cnn_tokens, &out_s.enc_tokens, &guide_s, DomainLabel::Source)?;
                    let tgt = aligner.objective(&out_t.cnn_tokens, &out_t.enc_tokens, &guide_t, DomainLabel::Target)?;
                    let da_c = ((src.cnn + tgt.cnn)? * 0.5)?;
                    let da_e = ((src.enc + tgt.enc)? * 0.5)?;
                    let (l_c, l_e) = (scalar(&da_c)?, scalar(&da_e)?);
                    check_finite(l_c, "L_da^c", epoch, step)?;
                    check_finite(l_e, "L_da^e", epoch, step)?;
                    let total = (det.total + ((da_c + da_e)? * config.lambda)?)?;
                    (total, l_c, l_e)
                }
            };
            let l_total = scalar(&total)?;
            check_finite(l_total, "total loss", epoch, step)?;
            opt.backward_step(&total)?;
            sum_det += l_det;
            sum_c += l_c;
            sum_e += l_e;
            sum_total += l_total;
            steps += 1;
        }
        let n = steps as f64;
        let m = EpochMetrics {
            epoch,
            l_det: sum_det / n,
            l_da_c: sum_c / n,
            l_da_e: sum_e / n,
            total: sum_total / n,
        };
        log::info!(
            "epoch {epoch} lr {:.1e} l_det {:.4} l_da_c {:.4} l_da_e {:.4} total {:.4}",
            config.lr_at(epoch),
            m.l_det,
            m.l_da_c,
            m.l_da_e,
            m.total
        );
        history.push(m);
    }
    Ok(TrainOutcome { detector, history })
}

fn guidance(
    mode: AlignmentMode,
    out_s: &crate::detr::DetectorOutput,
    out_t: &crate::detr::DetectorOutput,
    num_classes: usize,
) -> Result<(CamGuidance, CamGuidance)> {
    if mode.uses_spatial() || mode.uses_semantic() {
        Ok((CamGuidance::from_output(out_s)?, CamGuidance::from_output(out_t)?))
    } else {
        let n = out_s.cnn_tokens.len();
        Ok((
            CamGuidance::neutral(out_s.batch_size(), n, num_classes),
            CamGuidance::neutral(out_t.batch_size(), n, num_classes),
        ))
    }
}

/// Trains, evaluates on both validation splits, and when `out_dir` is given
/// writes `metrics.csv`, `report.json` and the checkpoint there.
pub fn train(config: &TrainConfig, data: &TrainData, out_dir: Option<&Path>) -> Result<(Detector, MetricsReport)> {
    let outcome = train_on(config, data)?;
    let source_val = (!data.source_val.is_empty())
        .then(|| evaluate(&outcome.detector, &data.source_val))
        .transpose()?;
    let target_val = (!data.target_val.is_empty())
        .then(|| evaluate(&outcome.detector, &data.target_val))
        .transpose()?;
    let report = MetricsReport {
        mode: config.mode,
        seed: config.seed,
        lambda: config.lambda,
        epochs: outcome.history,
        source_val,
        target_val,
    };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("metrics.csv");
        fs::write(&csv, metrics_csv(&report.epochs)).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join("report.json");
        fs::write(&json, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&json, e))?;
        let meta = CheckpointMeta::new(&outcome.detector, Some(config.clone()), config.seed, config.epochs);
        save_checkpoint(&outcome.detector, &dir.join("checkpoint.safetensors"), &meta)?;
    }
    Ok((outcome.detector, report))
}

/// JSON sidecar stored next to the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub seed: u64,
    pub epoch: usize,
    pub shape_digest: String,
}

impl CheckpointMeta {
    pub fn new(detector: &Detector, train: Option<TrainConfig>, seed: u64, epoch: usize) -> Self {
        Self {
            model: detector.config().clone(),
            train,
            seed,
            epoch,
            shape_digest: shape_digest(detector.store()),
        }
    }
}

/// SHA-256 over sorted `name:shape` lines of every parameter.
pub fn shape_digest(store: &ParamStore) -> String {
    let mut h = Sha256::new();
    for (name, var) in store.named_vars() {
        h.update(format!("{name}:{:?}\n", var.as_tensor().dims()).as_bytes());
    }
    format!("{:x}", h.finalize())
}

pub fn sidecar_path(weights: &Path) -> PathBuf {
    weights.with_extension("json")
}

pub fn save_checkpoint(detector: &Detector, path: &Path, meta: &CheckpointMeta) -> Result<()> {
    detector
        .store()
        .varmap()
        .save(path)
        .map_err(|e| Error::Load(format!("cannot write {}: {e}", path.display())))?;
    let side = sidecar_path(path);
    fs::write(&side, serde_json::to_string_pretty(meta)?).map_err(|e| Error::io(&side, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Detector, CheckpointMeta)> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: CheckpointMeta =
        serde_json::from_str(&text).map_err(|e| Error::Load(format!("bad sidecar {}: {e}", side.display())))?;
    let detector = Detector::new(meta.model.clone(), meta.seed, DType::F32)
        .map_err(|e| Error::Load(format!("sidecar model config rejected: {e}")))?;
    let digest = shape_digest(detector.store());
    if digest != meta.shape_digest {
        return Err(Error::Load(format!(
            "model shape digest {digest} does not match checkpoint digest {}",
            meta.shape_digest
        )));
    }
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found")));
    }
    let mut varmap = detector.store().varmap().clone();
    varmap
        .load(path)
        .map_err(|e| Error::Load(format!("cannot load {}: {e}", path.display())))?;
    Ok((detector, meta))
}

/// Summary of one query in an exported CAM.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuerySummary {
    pub query: usize,
    /// Argmax class, 1-based; `None` for "no object".
    pub category: Option<usize>,
    pub score: f32,
    pub bbox: [f32; 4],
    /// Token index with the largest CAM mass.
    pub peak_token: usize,
    pub mass: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CamExport {
    pub grid_shape: (usize, usize),
    pub averaged: Vec<f64>,
    pub threshold: f64,
    pub support: Vec<u8>,
    pub queries: Vec<QuerySummary>,
}

pub fn mask_path(out: &Path) -> PathBuf {
    PathBuf::from(format!("{}.mask", out.display()))
}

pub fn queries_path(out: &Path) -> PathBuf {
    PathBuf::from(format!("{}.queries.json", out.display()))
}

/// CAM of one image under `detector`.
pub fn image_cam(detector: &Detector, image: &ImageTensor) -> Result<CamExport> {
    let x = ImageTensor::batch(&[image], detector.dtype(), &Device::Cpu)?;
    let out = detector.forward(&x)?;
    let cam = compute_cam(&out.traces[0])?;
    let weights = crate::cam::spatial_weights(&cam);
    let set = &out.detection_sets()?[0];
    let no_object = set.no_object_class();
    let queries = set
        .predicted_classes()
        .into_iter()
        .enumerate()
        .map(|(q, c)| {
            let row = cam.query_row(q);
            let peak = row
                .iter()
                .enumerate()
                .fold(0, |best, (i, v)| if *v > row[best] { i } else { best });
            QuerySummary {
                query: q,
                category: (c != no_object).then_some(c + 1),
                score: set.class_scores[q][c],
                bbox: set.boxes[q],
                peak_token: peak,
                mass: row.iter().sum(),
            }
        })
        .collect();
    Ok(CamExport {
        grid_shape: cam.grid_shape,
        threshold: weights.threshold,
        support: cam.averaged.iter().map(|&v| u8::from(v >= weights.threshold)).collect(),
        averaged: cam.averaged,
        queries,
    })
}

/// Writes the averaged CAM grid to `out`, the `W > 0` support mask to
/// `<out>.mask` and per-query summaries to `<out>.queries.json`.
pub fn export_cam(checkpoint: &Path, image: &Path, out: &Path) -> Result<CamExport> {
    let (detector, _) = load_checkpoint(checkpoint)?;
    let img = read_ppm(image)?;
    let export = image_cam(&detector, &img)?;
    write_grid_file(out, &export.averaged, export.grid_shape)?;
    let mask: Vec<f64> = export.support.iter().map(|&v| v as f64).collect();
    write_grid_file(&mask_path(out), &mask, export.grid_shape)?;
    let q = queries_path(out);
    fs::write(&q, serde_json::to_string_pretty(&export.queries)?).map_err(|e| Error::io(&q, e))?;
    Ok(export)
}
