//! Optimisation on an auxiliary labelled anomaly set, checkpoints, and the
//! zero-shot inference entry point.

use std::io::Write as _;
use std::path::Path;

use log::{debug, info};
use ndarray::{s, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::imageio::{ImageTensor, Mask};
use crate::losses::{alignment_stream, classification_loss, resize_mask, segmentation_loss, total_loss, LossConfig, LossParts};
use crate::model::{Detector, DetectorGrads, ForwardPass, ModelConfig};
use crate::optim::{clip_global_norm, Adam, AdamConfig};
use crate::par;
use crate::prompt::prefix_gradient;
use crate::scoring::AnomalyResult;
use crate::spatial::AggregatedFeatureSet;
use crate::util::seeded_rng;

pub const CHECKPOINT_MAGIC: &str = "focusad-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    #[default]
    Constant,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Working resolution; must equal the backbone input size.
    pub image_size: usize,
    pub seed: u64,
    /// Stop after this many optimiser steps; 0 means no cap.
    pub max_steps: usize,
    pub shuffle: bool,
    pub adam: AdamConfig,
    pub grad_clip: Option<f64>,
    pub lr_schedule: LrSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 8,
            epochs: 2,
            image_size: 518,
            seed: 0,
            max_steps: 0,
            shuffle: true,
            adam: AdamConfig::default(),
            grad_clip: None,
            lr_schedule: LrSchedule::Constant,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning rate must be positive"));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.image_size == 0 {
            return Err(Error::config("batch size, epochs and image size must be positive"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::config("gradient clip must be positive"));
            }
        }
        Ok(())
    }

    /// Optimiser steps a run over `n` samples will take.
    pub fn total_steps(&self, n: usize) -> usize {
        let full = n.div_ceil(self.batch_size) * self.epochs;
        if self.max_steps > 0 {
            full.min(self.max_steps)
        } else {
            full
        }
    }

    fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let t = step as f64 / total.max(1) as f64;
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// One labelled auxiliary image.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub image: ImageTensor,
    pub label: bool,
    pub mask: Mask,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub parts: LossParts,
    pub total: f64,
}

impl StepRecord {
    /// `step L_cls L_seg L_pal L`.
    pub fn log_line(&self) -> String {
        format!(
            "{} {:.8} {:.8} {:.8} {:.8}",
            self.step, self.parts.cls, self.parts.seg, self.parts.pal, self.total
        )
    }
}

/// Writes a plain-text loss log with a header line.
pub fn write_loss_log(path: &Path, records: &[StepRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from("# step L_cls L_seg L_pal L\n");
    for r in records {
        text.push_str(&r.log_line());
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub backbone_id: String,
    pub backbone_checksum: String,
    pub dataset_id: String,
    pub detector: Detector,
    pub train: TrainConfig,
    pub loss: LossConfig,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let body = serde_json::to_string(self).map_err(|e| Error::data(format!("cannot serialise checkpoint: {e}")))?;
        Ok(format!("{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}\n{body}\n").into_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let text = std::str::from_utf8(bytes).map_err(|_| Error::data("checkpoint is not UTF-8"))?;
        let (header, body) = text.split_once('\n').ok_or_else(|| Error::data("checkpoint has no header"))?;
        let version = header
            .strip_prefix(CHECKPOINT_MAGIC)
            .and_then(|v| v.trim().strip_prefix('v'))
            .and_then(|v| v.parse::<u32>().ok())
            .ok_or_else(|| Error::data(format!("not a checkpoint file (header `{header}`)")))?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::data(format!("unsupported checkpoint version {version}")));
        }
        let ckpt: Checkpoint =
            serde_json::from_str(body).map_err(|e| Error::data(format!("malformed checkpoint body: {e}")))?;
        if ckpt.format_version != version {
            return Err(Error::data("checkpoint header and body versions disagree"));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Refuses a backbone whose weights differ from the training backbone.
    pub fn verify_backbone(&self, backbone: &dyn Backbone) -> Result<()> {
        let found = backbone.weight_checksum();
        if found != self.backbone_checksum || backbone.spec().backbone_id != self.backbone_id {
            return Err(Error::Checksum {
                expected: format!("{} ({})", self.backbone_id, short(&self.backbone_checksum)),
                found: format!("{} ({})", backbone.spec().backbone_id, short(&found)),
            });
        }
        Ok(())
    }
}

fn short(s: &str) -> &str {
    &s[..s.len().min(12)]
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepRecord>,
}

struct PreparedSample {
    features: AggregatedFeatureSet,
    label: bool,
    grid_mask: Array1<f64>,
}

/// Fits the adapter and prompt prefix; the backbone stays frozen.
pub fn train(
    backbone: &dyn Backbone,
    samples: &[TrainingSample],
    model: &ModelConfig,
    config: &TrainConfig,
    loss: &LossConfig,
    dataset_id: &str,
) -> Result<TrainOutcome> {
    config.validate()?;
    loss.validate()?;
    model.validate()?;
    let spec = backbone.spec();
    if config.image_size != spec.input_size {
        return Err(Error::config(format!(
            "image size {} does not match backbone input size {}",
            config.image_size, spec.input_size
        )));
    }
    if samples.is_empty() {
        return Err(Error::data("training set is empty"));
    }
    if !samples.iter().any(|s| s.label || s.mask.positive_count() > 0) {
        return Err(Error::data("training set has no anomalous image"));
    }
    let checksum_before = backbone.weight_checksum();
    let mut detector = Detector::init(backbone, model.clone(), config.seed)?;
    let grid = spec.grid_side;
    let prepared = par::try_map_slice(samples, |s| -> Result<PreparedSample> {
        let grid_mask = resize_mask(&s.mask, grid, grid);
        Ok(PreparedSample {
            features: detector.features(backbone, &s.image)?,
            label: s.label || grid_mask.sum() > 0.0,
            grid_mask: grid_mask.into_shape_with_order(grid * grid).expect("grid mask"),
        })
    })?;

    let learn_prompts = model.switches.learnable_prompts;
    let mut shapes: Vec<(usize, usize)> = detector
        .adapter
        .as_ref()
        .map(|a| a.tensors().iter().map(|t| t.dim()).collect())
        .unwrap_or_default();
    if learn_prompts {
        shapes.push(detector.prompts.prefix.dim());
    }
    let mut optimizer = Adam::new(config.adam, &shapes);
    let total_steps = config.total_steps(samples.len());
    info!(
        "training {} trainable values for {total_steps} steps on {} samples",
        detector.num_trainable(),
        samples.len()
    );

    let mut rng = seeded_rng(config.seed ^ 0xda7a_0d3e);
    let mut log = Vec::with_capacity(total_steps);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    'epochs: for _ in 0..config.epochs {
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        for batch in order.chunks(config.batch_size) {
            if log.len() >= total_steps {
                break 'epochs;
            }
            let batch: Vec<&PreparedSample> = batch.iter().map(|&i| &prepared[i]).collect();
            let (record, grads) = batch_gradients(backbone, &detector, &batch, loss, log.len() + 1)?;
            if shapes.is_empty() {
                log.push(record);
                continue;
            }
            let mut grad_list: Vec<Array2<f64>> = grads
                .adapter
                .map(|a| vec![a.w_q, a.w_k, a.w_v, a.w_o])
                .unwrap_or_default();
            if learn_prompts {
                grad_list.push(prefix_gradient(
                    &detector.prompts,
                    backbone,
                    &grads.anchor_normal,
                    &grads.anchor_abnormal,
                )?);
            }
            if grad_list.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(Error::numeric(format!("non-finite gradient at step {}", record.step)));
            }
            if let Some(max) = config.grad_clip {
                let mut refs: Vec<&mut Array2<f64>> = grad_list.iter_mut().collect();
                clip_global_norm(&mut refs, max);
            }
            let lr = config.lr_at(log.len(), total_steps);
            let mut params: Vec<&mut Array2<f64>> = Vec::with_capacity(shapes.len());
            if let Some(a) = detector.adapter.as_mut() {
                params.extend(a.tensors_mut());
            }
            if learn_prompts {
                params.push(&mut detector.prompts.prefix);
            }
            let grad_refs: Vec<&Array2<f64>> = grad_list.iter().collect();
            optimizer.update(lr, &mut params, &grad_refs);
            debug!("step {}", record.log_line());
            log.push(record);
        }
    }
    if backbone.weight_checksum() != checksum_before {
        return Err(Error::numeric("backbone weights changed during training"));
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            format_version: CHECKPOINT_VERSION,
            backbone_id: spec.backbone_id.clone(),
            backbone_checksum: checksum_before,
            dataset_id: dataset_id.to_string(),
            detector,
            train: config.clone(),
            loss: *loss,
        },
        log,
    })
}

/// Loss and gradients of one mini-batch. Classification and segmentation
/// terms are averaged over images; the alignment term pools the patches of
/// every anomalous image in the batch.
fn batch_gradients(
    backbone: &dyn Backbone,
    detector: &Detector,
    batch: &[&PreparedSample],
    loss: &LossConfig,
    step: usize,
) -> Result<(StepRecord, DetectorGrads)> {
    let anchors = detector.anchors(backbone)?;
    let passes: Vec<ForwardPass> = par::try_map_slice(batch, |s| detector.forward(backbone, &s.features, &anchors))?;
    let b = batch.len() as f64;
    let mut parts = LossParts::default();
    let mut grad_probs = Vec::with_capacity(batch.len());
    for (sample, pass) in batch.iter().zip(&passes) {
        let (cls, d_cls) = classification_loss(pass.image_score(), sample.label, loss);
        let probs = pass.probs.slice(s![1..]);
        let (seg, d_seg) = segmentation_loss(
            probs.insert_axis(Axis(0)),
            sample.grid_mask.view().insert_axis(Axis(0)),
            loss,
        )?;
        parts.cls += cls / b;
        parts.seg += seg / b;
        let mut g = Array1::zeros(pass.probs.len());
        g[0] = d_cls / b;
        g.slice_mut(s![1..]).assign(&(d_seg.row(0).to_owned() * (loss.lambda1 / b)));
        grad_probs.push(g);
    }

    let num_streams = passes[0].streams.len();
    let mut grad_z: Vec<Vec<Option<Array2<f64>>>> = vec![vec![None; num_streams]; batch.len()];
    let anomalous: Vec<usize> = (0..batch.len()).filter(|&i| batch[i].grid_mask.sum() > 0.0).collect();
    if anomalous.is_empty() || loss.lambda2 == 0.0 {
        if anomalous.is_empty() {
            debug!("step {step}: batch has no anomalous patches; alignment term skipped");
        }
    } else {
        let scale = loss.lambda2 / num_streams as f64;
        for stream in 0..num_streams {
            let mut normal_rows = Vec::new();
            let mut abnormal_rows = Vec::new();
            for &i in &anomalous {
                for (p, &m) in batch[i].grid_mask.iter().enumerate() {
                    if m > 0.5 {
                        abnormal_rows.push((i, p + 1));
                    } else {
                        normal_rows.push((i, p + 1));
                    }
                }
            }
            let gather = |rows: &[(usize, usize)]| {
                let t = passes[0].streams[stream].z.ncols();
                let mut out = Array2::zeros((rows.len(), t));
                for (mut dst, &(i, r)) in out.rows_mut().into_iter().zip(rows) {
                    dst.assign(&passes[i].streams[stream].z.row(r));
                }
                out
            };
            let normal = gather(&normal_rows);
            let abnormal = gather(&abnormal_rows);
            let Some(result) = alignment_stream(normal.view(), abnormal.view()) else {
                continue;
            };
            parts.pal += result.value / num_streams as f64;
            if result.value == 0.0 {
                continue;
            }
            for (rows, grads) in [(&normal_rows, &result.grad_normal), (&abnormal_rows, &result.grad_abnormal)] {
                for (&(i, r), g) in rows.iter().zip(grads.rows()) {
                    let slot = grad_z[i][stream].get_or_insert_with(|| Array2::zeros(passes[i].streams[stream].z.raw_dim()));
                    slot.row_mut(r).scaled_add(scale, &g);
                }
            }
        }
    }

    let jobs: Vec<usize> = (0..batch.len()).collect();
    let per_sample = par::try_map_slice(&jobs, |&i| detector.backward(backbone, &passes[i], &anchors, &grad_probs[i], &grad_z[i]))?;
    let mut iter = per_sample.into_iter();
    let mut grads = iter.next().expect("non-empty batch");
    for g in iter {
        grads.accumulate(&g);
    }
    let total = total_loss(parts, loss);
    if !total.is_finite() {
        return Err(Error::numeric(format!("non-finite loss at step {step}")));
    }
    Ok((StepRecord { step, parts, total }, grads))
}

/// Scores one image with a trained checkpoint after checking that the
/// loaded backbone is the one it was trained against.
pub fn zero_shot_infer(backbone: &dyn Backbone, checkpoint: &Checkpoint, image: &ImageTensor) -> Result<AnomalyResult> {
    checkpoint.verify_backbone(backbone)?;
    checkpoint.detector.infer(backbone, image)
}
