//! Per-category evaluation and the on-disk metrics report.
//!
//! Image metrics rank one score per test image. Pixel AUROC pools every
//! pixel of every test image of a category into a single ranking; the
//! overlap metric integrates to a configurable false positive rate.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::dataset::{Sample, Split};
use crate::error::{Error, Result};
use crate::fewshot::{build_banks, fewshot_infer, select_shots, BankSource, FusedResult, FusionConfig};
use crate::imageio::{ImageTensor, Mask};
use crate::metrics::{aupro, auroc, average_precision};
use crate::par;
use crate::scoring::AnomalyResult;
use crate::synthetic::SyntheticSample;
use crate::trainer::Checkpoint;

pub const REPORT_FORMAT: &str = "focusad-report";
pub const REPORT_VERSION: u32 = 1;
pub const PIXEL_PROTOCOL: &str = "pixels pooled per category";

/// What the metrics consume from one test image.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub image_score: f64,
    pub pixel_map: Array2<f64>,
}

impl From<AnomalyResult> for Prediction {
    fn from(r: AnomalyResult) -> Self {
        Self {
            image_score: r.image_score,
            pixel_map: r.pixel_map,
        }
    }
}

impl From<FusedResult> for Prediction {
    fn from(r: FusedResult) -> Self {
        Self {
            image_score: r.image_score,
            pixel_map: r.pixel_map,
        }
    }
}

/// The four metrics, in percent.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub i_auroc: f64,
    pub i_ap: f64,
    pub p_auroc: f64,
    pub p_pro: f64,
}

impl MetricRow {
    fn values(&self) -> [f64; 4] {
        [self.i_auroc, self.i_ap, self.p_auroc, self.p_pro]
    }

    fn from_values(v: [f64; 4]) -> Self {
        Self {
            i_auroc: v[0],
            i_ap: v[1],
            p_auroc: v[2],
            p_pro: v[3],
        }
    }

    /// Elementwise arithmetic mean.
    pub fn mean(rows: &[MetricRow]) -> MetricRow {
        let n = rows.len().max(1) as f64;
        Self::from_values(std::array::from_fn(|k| rows.iter().map(|r| r.values()[k]).sum::<f64>() / n))
    }

    /// Elementwise sample standard deviation (`n − 1`); zero for one row.
    pub fn std(rows: &[MetricRow]) -> MetricRow {
        if rows.len() < 2 {
            return MetricRow::default();
        }
        let mean = Self::mean(rows).values();
        let n = rows.len() as f64;
        Self::from_values(std::array::from_fn(|k| {
            (rows.iter().map(|r| (r.values()[k] - mean[k]).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub category: String,
    pub samples: usize,
    pub metrics: MetricRow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    ZeroShot,
    FewShot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub format: String,
    pub version: u32,
    pub mode: EvalMode,
    pub config_hash: String,
    pub aupro_fpr_limit: f64,
    pub pixel_protocol: String,
    pub shots: usize,
    pub shot_seeds: Vec<u64>,
    pub categories: Vec<CategoryMetrics>,
    pub mean: MetricRow,
    /// Spread of the category mean over shot seeds (few-shot only).
    pub std: Option<MetricRow>,
    /// Category mean of each shot seed, in seed order (few-shot only).
    pub per_seed: Vec<MetricRow>,
}

impl MetricsReport {
    pub fn zero_shot(config_hash: &str, aupro_fpr_limit: f64, categories: Vec<CategoryMetrics>) -> Self {
        let mean = MetricRow::mean(&categories.iter().map(|c| c.metrics).collect::<Vec<_>>());
        Self {
            format: REPORT_FORMAT.into(),
            version: REPORT_VERSION,
            mode: EvalMode::ZeroShot,
            config_hash: config_hash.into(),
            aupro_fpr_limit,
            pixel_protocol: PIXEL_PROTOCOL.into(),
            shots: 0,
            shot_seeds: Vec::new(),
            categories,
            mean,
            std: None,
            per_seed: Vec::new(),
        }
    }

    /// Combines one category list per shot seed. Category rows are averaged
    /// over seeds; `std` is taken over the per-seed category means.
    pub fn few_shot(
        config_hash: &str,
        aupro_fpr_limit: f64,
        shots: usize,
        seeds: &[u64],
        runs: Vec<Vec<CategoryMetrics>>,
    ) -> Result<Self> {
        if runs.is_empty() || runs.len() != seeds.len() {
            return Err(Error::config("one evaluation run per shot seed is required"));
        }
        let per_seed: Vec<MetricRow> = runs
            .iter()
            .map(|run| MetricRow::mean(&run.iter().map(|c| c.metrics).collect::<Vec<_>>()))
            .collect();
        let categories: Vec<CategoryMetrics> = runs[0]
            .iter()
            .enumerate()
            .map(|(idx, first)| CategoryMetrics {
                category: first.category.clone(),
                samples: first.samples,
                metrics: MetricRow::mean(&runs.iter().map(|run| run[idx].metrics).collect::<Vec<_>>()),
            })
            .collect();
        let mean = MetricRow::mean(&categories.iter().map(|c| c.metrics).collect::<Vec<_>>());
        Ok(Self {
            format: REPORT_FORMAT.into(),
            version: REPORT_VERSION,
            mode: EvalMode::FewShot,
            config_hash: config_hash.into(),
            aupro_fpr_limit,
            pixel_protocol: PIXEL_PROTOCOL.into(),
            shots,
            shot_seeds: seeds.to_vec(),
            categories,
            mean,
            std: Some(MetricRow::std(&per_seed)),
            per_seed,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::data(format!("cannot serialise report: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: Self = serde_json::from_str(text).map_err(|e| Error::data(format!("malformed report: {e}")))?;
        if report.format != REPORT_FORMAT || report.version != REPORT_VERSION {
            return Err(Error::data(format!(
                "unsupported report format {} v{}",
                report.format, report.version
            )));
        }
        Ok(report)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Plain-text table for terminals.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<16} {:>8} {:>8} {:>8} {:>8}\n",
            "category", "I-AUROC", "I-AP", "P-AUROC", "P-PRO"
        );
        let row = |name: &str, m: &MetricRow| {
            format!(
                "{:<16} {:>8.2} {:>8.2} {:>8.2} {:>8.2}\n",
                name, m.i_auroc, m.i_ap, m.p_auroc, m.p_pro
            )
        };
        for c in &self.categories {
            out += &row(&c.category, &c.metrics);
        }
        out += &row("mean", &self.mean);
        if let Some(std) = &self.std {
            out += &row("std (seeds)", std);
        }
        out
    }
}

/// Metrics of one category. `masks` must match the map sizes.
pub fn category_metrics(
    category: &str,
    predictions: &[Prediction],
    labels: &[bool],
    masks: &[Array2<bool>],
    aupro_fpr_limit: f64,
) -> Result<CategoryMetrics> {
    if predictions.len() != labels.len() || predictions.len() != masks.len() {
        return Err(Error::config(format!(
            "{category}: {} predictions, {} labels, {} masks",
            predictions.len(),
            labels.len(),
            masks.len()
        )));
    }
    let scores: Vec<f64> = predictions.iter().map(|p| p.image_score).collect();
    let mut pixel_scores = Vec::new();
    let mut pixel_labels = Vec::new();
    for (p, m) in predictions.iter().zip(masks) {
        if p.pixel_map.dim() != m.dim() {
            return Err(Error::config(format!(
                "{category}: map {:?} and mask {:?} differ in shape",
                p.pixel_map.dim(),
                m.dim()
            )));
        }
        pixel_scores.extend(p.pixel_map.iter().copied());
        pixel_labels.extend(m.iter().copied());
    }
    let maps: Vec<Array2<f64>> = predictions.iter().map(|p| p.pixel_map.clone()).collect();
    let tag = |e: Error| match e {
        Error::UndefinedMetric(msg) => Error::UndefinedMetric(format!("{category}: {msg}")),
        other => other,
    };
    Ok(CategoryMetrics {
        category: category.into(),
        samples: predictions.len(),
        metrics: MetricRow {
            i_auroc: 100.0 * auroc(&scores, labels).map_err(tag)?,
            i_ap: 100.0 * average_precision(&scores, labels).map_err(tag)?,
            p_auroc: 100.0 * auroc(&pixel_scores, &pixel_labels).map_err(tag)?,
            p_pro: 100.0 * aupro(&maps, masks, aupro_fpr_limit).map_err(tag)?,
        },
    })
}

/// Random access to labelled evaluation images.
pub trait EvalSource: Sync {
    fn len(&self) -> usize;
    fn category(&self, i: usize) -> &str;
    fn label(&self, i: usize) -> bool;
    /// Whether the item is scored.
    fn is_test(&self, i: usize) -> bool;
    /// Whether the item may be drawn as a normal shot.
    fn is_shot_candidate(&self, i: usize) -> bool;
    /// Image at `size × size` and mask at `mask_size × mask_size`.
    fn load(&self, i: usize, size: usize, mask_size: usize) -> Result<(ImageTensor, Mask)>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl EvalSource for [Sample] {
    fn len(&self) -> usize {
        <[Sample]>::len(self)
    }

    fn category(&self, i: usize) -> &str {
        &self[i].category
    }

    fn label(&self, i: usize) -> bool {
        self[i].label
    }

    fn is_test(&self, i: usize) -> bool {
        self[i].split == Split::Test
    }

    /// Train-split normals when the category has any, test normals otherwise.
    fn is_shot_candidate(&self, i: usize) -> bool {
        let s = &self[i];
        if s.label {
            return false;
        }
        let has_train = self.iter().any(|o| o.category == s.category && o.split == Split::Train && !o.label);
        if has_train {
            s.split == Split::Train
        } else {
            true
        }
    }

    fn load(&self, i: usize, size: usize, mask_size: usize) -> Result<(ImageTensor, Mask)> {
        self[i].load(size, mask_size)
    }
}

impl EvalSource for [SyntheticSample] {
    fn len(&self) -> usize {
        <[SyntheticSample]>::len(self)
    }

    fn category(&self, _: usize) -> &str {
        "synthetic"
    }

    fn label(&self, i: usize) -> bool {
        self[i].is_anomalous()
    }

    fn is_test(&self, _: usize) -> bool {
        true
    }

    fn is_shot_candidate(&self, i: usize) -> bool {
        !self[i].is_anomalous()
    }

    fn load(&self, i: usize, size: usize, mask_size: usize) -> Result<(ImageTensor, Mask)> {
        Ok((self[i].image.resized(size), self[i].mask.resized_nearest(mask_size)))
    }
}

fn category_order(source: &(impl EvalSource + ?Sized)) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for i in 0..source.len() {
        let c = source.category(i);
        if !out.iter().any(|o| o == c) {
            out.push(c.to_string());
        }
    }
    out
}

fn score_category(
    source: &(impl EvalSource + ?Sized),
    category: &str,
    size: usize,
    mask_size: usize,
    fpr_limit: f64,
    predict: impl Fn(&ImageTensor) -> Result<Prediction> + Sync,
) -> Result<Option<CategoryMetrics>> {
    let idx: Vec<usize> = (0..source.len())
        .filter(|&i| source.category(i) == category && source.is_test(i))
        .collect();
    if idx.is_empty() {
        return Ok(None);
    }
    let results = par::try_map_slice(&idx, |&i| -> Result<(Prediction, Array2<bool>)> {
        let (image, mask) = source.load(i, size, mask_size)?;
        Ok((predict(&image)?, mask.data))
    })?;
    let labels: Vec<bool> = idx.iter().map(|&i| source.label(i)).collect();
    let (preds, masks): (Vec<Prediction>, Vec<Array2<bool>>) = results.into_iter().unzip();
    category_metrics(category, &preds, &labels, &masks, fpr_limit).map(Some)
}

/// Zero-shot evaluation of every category with test samples.
pub fn evaluate_zero_shot(
    backbone: &dyn Backbone,
    checkpoint: &Checkpoint,
    source: &(impl EvalSource + ?Sized),
    aupro_fpr_limit: f64,
    config_hash: &str,
) -> Result<MetricsReport> {
    checkpoint.verify_backbone(backbone)?;
    let detector = &checkpoint.detector;
    let size = backbone.spec().input_size;
    let mask_size = detector.output_size(backbone);
    let anchors = detector.anchors(backbone)?;
    let mut categories = Vec::new();
    for category in category_order(source) {
        let row = score_category(source, &category, size, mask_size, aupro_fpr_limit, |img| {
            let feats = detector.features(backbone, img)?;
            Ok(detector.score(backbone, &feats, &anchors)?.into())
        })?;
        categories.extend(row);
    }
    if categories.is_empty() {
        return Err(Error::data("no test samples to evaluate"));
    }
    Ok(MetricsReport::zero_shot(config_hash, aupro_fpr_limit, categories))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FewShotPlan {
    pub shots: usize,
    pub seeds: Vec<u64>,
    pub fusion: FusionConfig,
    pub source: BankSource,
}

/// Few-shot evaluation: per seed and category, draw `shots` normal images,
/// build banks and score the test images with fused scores. `shots == 0`
/// falls back to zero-shot evaluation.
pub fn evaluate_few_shot(
    backbone: &dyn Backbone,
    checkpoint: &Checkpoint,
    source: &(impl EvalSource + ?Sized),
    plan: &FewShotPlan,
    aupro_fpr_limit: f64,
    config_hash: &str,
) -> Result<MetricsReport> {
    if plan.shots == 0 {
        return evaluate_zero_shot(backbone, checkpoint, source, aupro_fpr_limit, config_hash);
    }
    if plan.seeds.is_empty() {
        return Err(Error::config("few-shot evaluation needs at least one shot seed"));
    }
    plan.fusion.validate()?;
    checkpoint.verify_backbone(backbone)?;
    let detector = &checkpoint.detector;
    let size = backbone.spec().input_size;
    let mask_size = detector.output_size(backbone);
    let mut runs = Vec::with_capacity(plan.seeds.len());
    for &seed in &plan.seeds {
        let mut categories = Vec::new();
        for category in category_order(source) {
            let pool: Vec<usize> = (0..source.len())
                .filter(|&i| source.category(i) == category && source.is_shot_candidate(i))
                .collect();
            let picks = select_shots(pool.len(), plan.shots, seed)
                .map_err(|e| Error::config(format!("{category}: {e}")))?;
            let shots: Vec<ImageTensor> = picks
                .iter()
                .map(|&p| source.load(pool[p], size, mask_size).map(|(img, _)| img))
                .collect::<Result<_>>()?;
            let banks = build_banks(detector, backbone, &shots, &category, plan.source)?;
            let row = score_category(source, &category, size, mask_size, aupro_fpr_limit, |img| {
                Ok(fewshot_infer(detector, backbone, &banks, &plan.fusion, img)?.into())
            })?;
            categories.extend(row);
        }
        if categories.is_empty() {
            return Err(Error::data("no test samples to evaluate"));
        }
        runs.push(categories);
    }
    MetricsReport::few_shot(config_hash, aupro_fpr_limit, plan.shots, &plan.seeds, runs)
}
