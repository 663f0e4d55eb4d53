//! Few-shot extension: memory banks of normal patch features, nearest
//! neighbour distance maps and fusion with the zero-shot scores.

use std::path::Path;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::adapter::adapt;
use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::imageio::ImageTensor;
use crate::model::Detector;
use crate::par;
use crate::scoring::{normalize_rows, render_map, AnomalyResult};
use crate::spatial::{AggregatedFeatureSet, StreamKey};
use crate::util::{seeded_rng, WeightHasher};

const BANKS_MAGIC: &str = "focusad-banks";
const BANKS_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { alpha: 0.1, beta: 0.1 }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha.is_finite() && self.beta.is_finite()) {
            return Err(Error::config(format!(
                "fusion weights must be finite and non-negative (alpha {}, beta {})",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

/// Which features a bank stores.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BankSource {
    /// Aggregated backbone features before the adapter.
    #[default]
    Aggregated,
    /// Adapter outputs (ablation).
    Adapted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryBanks {
    pub category: String,
    pub shots: usize,
    pub source: BankSource,
    pub backbone_id: String,
    /// One matrix of `shots · N` rows per stream.
    pub banks: Vec<(StreamKey, Array2<f64>)>,
}

impl MemoryBanks {
    pub fn len(&self) -> usize {
        self.banks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.banks.is_empty()
    }

    pub fn get(&self, key: StreamKey) -> Option<&Array2<f64>> {
        self.banks.iter().find(|(k, _)| *k == key).map(|(_, m)| m)
    }

    pub fn validate(&self, patches_per_image: usize) -> Result<()> {
        if self.shots == 0 {
            return Err(Error::config("memory banks need at least one shot"));
        }
        for (key, rows) in &self.banks {
            if rows.nrows() != self.shots * patches_per_image {
                return Err(Error::data(format!(
                    "bank {key:?} holds {} rows, expected {}",
                    rows.nrows(),
                    self.shots * patches_per_image
                )));
            }
            if !rows.iter().all(|v| v.is_finite()) {
                return Err(Error::numeric(format!("bank {key:?} contains non-finite values")));
            }
        }
        Ok(())
    }

    /// SHA-256 over keys and stored rows.
    pub fn checksum(&self) -> String {
        let mut h = WeightHasher::default();
        h.tag(&self.category).tag(&self.shots.to_string());
        for (key, rows) in &self.banks {
            h.tag(&format!("{}:{}", key.block, key.r)).floats(rows.iter());
        }
        h.finish()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let body = serde_json::to_string(self).map_err(|e| Error::data(format!("cannot serialise banks: {e}")))?;
        Ok(format!("{BANKS_MAGIC} v{BANKS_VERSION}\n{body}\n").into_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let text = std::str::from_utf8(bytes).map_err(|_| Error::data("bank file is not UTF-8"))?;
        let (header, body) = text.split_once('\n').ok_or_else(|| Error::data("bank file has no header"))?;
        if header.trim() != format!("{BANKS_MAGIC} v{BANKS_VERSION}") {
            return Err(Error::data(format!("not a bank file (header `{header}`)")));
        }
        serde_json::from_str(body).map_err(|e| Error::data(format!("malformed bank file: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Patch rows of every stream in the representation a bank of `source` stores.
pub fn bank_features(detector: &Detector, features: &AggregatedFeatureSet, source: BankSource) -> Result<Vec<(StreamKey, Array2<f64>)>> {
    par::try_map_slice(&features.entries, |(key, c)| -> Result<(StreamKey, Array2<f64>)> {
        let rows = match (source, &detector.adapter) {
            (BankSource::Adapted, Some(p)) => adapt(c.view(), p)?,
            _ => c.clone(),
        };
        Ok((*key, rows.slice(s![1.., ..]).to_owned()))
    })
}

/// Stores the patch features of `shots` normal images of one category.
pub fn build_banks(
    detector: &Detector,
    backbone: &dyn Backbone,
    shots: &[ImageTensor],
    category: &str,
    source: BankSource,
) -> Result<MemoryBanks> {
    if shots.is_empty() {
        return Err(Error::config(format!("no normal shots given for category `{category}`")));
    }
    let per_image = par::try_map_slice(shots, |img| -> Result<Vec<(StreamKey, Array2<f64>)>> {
        let feats = detector.features(backbone, img)?;
        bank_features(detector, &feats, source)
    })?;
    let keys: Vec<StreamKey> = per_image[0].iter().map(|(k, _)| *k).collect();
    let banks = keys
        .iter()
        .enumerate()
        .map(|(idx, &key)| {
            let views: Vec<ArrayView2<f64>> = per_image.iter().map(|streams| streams[idx].1.view()).collect();
            let rows = concatenate(Axis(0), &views).expect("equal widths within a stream");
            (key, rows)
        })
        .collect();
    let banks = MemoryBanks {
        category: category.to_string(),
        shots: shots.len(),
        source,
        backbone_id: backbone.spec().backbone_id.clone(),
        banks,
    };
    banks.validate(backbone.spec().num_patches())?;
    Ok(banks)
}

/// Nearest stored row for one query row: bank index and `(1 − cos) / 2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

/// Exhaustive cosine nearest-neighbour search. Ties resolve to the lowest
/// bank index; zero rows have cosine 0 to everything.
pub fn nearest_neighbors(queries: ArrayView2<f64>, bank: ArrayView2<f64>) -> Result<Vec<Neighbor>> {
    if queries.ncols() != bank.ncols() {
        return Err(Error::config(format!(
            "query width {} != bank width {}",
            queries.ncols(),
            bank.ncols()
        )));
    }
    if bank.nrows() == 0 {
        return Err(Error::config("empty memory bank"));
    }
    let (q, _) = normalize_rows(queries);
    let (b, _) = normalize_rows(bank);
    let sims = q.dot(&b.t());
    Ok(sims
        .rows()
        .into_iter()
        .map(|row| {
            let (index, best) = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (j, &c)| if c > acc.1 { (j, c) } else { acc });
            Neighbor {
                index,
                distance: ((1.0 - best) / 2.0).clamp(0.0, 1.0),
            }
        })
        .collect())
}

/// Per-patch distance to the banks, averaged over streams and laid out on
/// the patch grid.
pub fn patch_distance_scores(query: &[(StreamKey, Array2<f64>)], banks: &MemoryBanks, grid_side: usize) -> Result<Array2<f64>> {
    if query.len() != banks.len() {
        return Err(Error::config(format!(
            "query has {} streams, banks have {}",
            query.len(),
            banks.len()
        )));
    }
    let per_stream = par::try_map_slice(query, |(key, rows)| -> Result<Vec<f64>> {
        let bank = banks
            .get(*key)
            .ok_or_else(|| Error::config(format!("no memory bank for stream {key:?}")))?;
        Ok(nearest_neighbors(rows.view(), bank.view())?.iter().map(|n| n.distance).collect())
    })?;
    let n = grid_side * grid_side;
    if per_stream.iter().any(|d| d.len() != n) {
        return Err(Error::config(format!("query rows do not form a {grid_side}×{grid_side} grid")));
    }
    let streams = per_stream.len() as f64;
    Ok(Array2::from_shape_fn((grid_side, grid_side), |(y, x)| {
        per_stream.iter().map(|d| d[y * grid_side + x]).sum::<f64>() / streams
    }))
}

/// Fused few-shot output. Scores are not probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedResult {
    pub image_score: f64,
    pub score_grid: Array2<f64>,
    pub pixel_map: Array2<f64>,
}

/// `S_img = max A + α·p_CLS`, `S_map = A + β·P̃`, rendered like the
/// zero-shot map. No normalisation between the two terms.
pub fn fuse_scores(
    distances: ArrayView2<f64>,
    zero_shot: &AnomalyResult,
    fusion: &FusionConfig,
    smooth_sigma: f64,
    output_size: usize,
) -> Result<FusedResult> {
    if distances.dim() != zero_shot.patch_probs.dim() {
        return Err(Error::config(format!(
            "distance grid {:?} and probability grid {:?} differ",
            distances.dim(),
            zero_shot.patch_probs.dim()
        )));
    }
    let max_a = distances.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let score_grid = &distances + &(&zero_shot.patch_probs * fusion.beta);
    let pixel_map = render_map(score_grid.view(), smooth_sigma, output_size);
    Ok(FusedResult {
        image_score: max_a + fusion.alpha * zero_shot.image_score,
        score_grid,
        pixel_map,
    })
}

/// Few-shot inference on one image.
pub fn fewshot_infer(
    detector: &Detector,
    backbone: &dyn Backbone,
    banks: &MemoryBanks,
    fusion: &FusionConfig,
    image: &ImageTensor,
) -> Result<FusedResult> {
    if banks.backbone_id != backbone.spec().backbone_id {
        return Err(Error::config(format!(
            "banks were built with backbone `{}`, not `{}`",
            banks.backbone_id,
            backbone.spec().backbone_id
        )));
    }
    let feats = detector.features(backbone, image)?;
    let anchors = detector.anchors(backbone)?;
    let zero_shot = detector.score(backbone, &feats, &anchors)?;
    let query = bank_features(detector, &feats, banks.source)?;
    let distances = patch_distance_scores(&query, banks, backbone.spec().grid_side)?;
    fuse_scores(
        distances.view(),
        &zero_shot,
        fusion,
        detector.config.score.smooth_sigma,
        detector.output_size(backbone),
    )
}

/// Seeded choice of `k` distinct indices out of `n`, in ascending order.
pub fn select_shots(n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 || k > n {
        return Err(Error::config(format!("cannot draw {k} shots from {n} normal images")));
    }
    let mut picked = sample(&mut seeded_rng(seed ^ 0x5407_5e1e), n, k).into_vec();
    picked.sort_unstable();
    Ok(picked)
}
