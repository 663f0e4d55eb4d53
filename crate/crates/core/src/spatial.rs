//! Multi-scale Gaussian-weighted neighbourhood averaging of patch tokens.
//!
//! Each patch is replaced by a Gaussian-weighted mean of the patches in an
//! `r × r` window centred on it. Windows are clipped at the grid border and
//! the weights renormalised over the valid cells, so constant fields stay
//! constant everywhere. The class token is carried through untouched.

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::backbone::BlockTokens;
use crate::error::{Error, Result};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    /// Odd window side.
    pub r: usize,
    /// Gaussian standard deviation in patch units.
    pub sigma: f64,
}

impl WindowSpec {
    pub fn new(r: usize, sigma: f64) -> Result<Self> {
        let w = Self { r, sigma };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.r == 0 || self.r % 2 == 0 {
            return Err(Error::config(format!("window size {} must be odd and >= 1", self.r)));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::config(format!("window sigma {} must be positive", self.sigma)));
        }
        Ok(())
    }
}

/// A single neighbour weight: grid position `(i, j)` and its normalised weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeighborWeight {
    pub i: usize,
    pub j: usize,
    pub weight: f64,
}

/// Normalised Gaussian weights of the clipped `r × r` window around `(h, w)`.
pub fn window_weights(center: (usize, usize), spec: WindowSpec, grid_side: usize) -> Vec<NeighborWeight> {
    let (h, w) = center;
    debug_assert!(h < grid_side && w < grid_side);
    let half = (spec.r / 2) as isize;
    let denom = 2.0 * spec.sigma * spec.sigma;
    let mut out = Vec::with_capacity(spec.r * spec.r);
    for di in -half..=half {
        for dj in -half..=half {
            let (i, j) = (h as isize + di, w as isize + dj);
            if i < 0 || j < 0 || i >= grid_side as isize || j >= grid_side as isize {
                continue;
            }
            let d2 = (di * di + dj * dj) as f64;
            out.push(NeighborWeight {
                i: i as usize,
                j: j as usize,
                weight: (-d2 / denom).exp(),
            });
        }
    }
    let total: f64 = out.iter().map(|n| n.weight).sum();
    for n in &mut out {
        n.weight /= total;
    }
    out
}

/// Aggregates the patch rows of one block; returns `[cls; aggregated patches]`.
pub fn aggregate_block(block: &BlockTokens, spec: WindowSpec) -> Result<Array2<f64>> {
    spec.validate()?;
    let n = block.patches.nrows();
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n {
        return Err(Error::config(format!("{n} patch tokens do not form a square grid")));
    }
    if spec.r == 1 {
        return Ok(block.stacked());
    }
    let d = block.patches.ncols();
    let mut out = Array2::zeros((n + 1, d));
    out.row_mut(0).assign(&block.cls);
    for h in 0..side {
        for w in 0..side {
            let mut row = out.row_mut(1 + h * side + w);
            for nb in window_weights((h, w), spec, side) {
                row.scaled_add(nb.weight, &block.patches.row(nb.i * side + nb.j));
            }
        }
    }
    Ok(out)
}

/// Key of one feature stream: 1-based block id and window size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StreamKey {
    pub block: usize,
    pub r: usize,
}

/// The multi-scale set `{c^{ℓr}}`, ordered block-major then by window size.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedFeatureSet {
    pub entries: Vec<(StreamKey, Array2<f64>)>,
}

impl AggregatedFeatureSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: StreamKey) -> Option<&Array2<f64>> {
        self.entries.iter().find(|(k, _)| *k == key).map(|(_, m)| m)
    }

    pub fn keys(&self) -> impl Iterator<Item = StreamKey> + '_ {
        self.entries.iter().map(|(k, _)| *k)
    }

    /// Patch rows (excluding the class token) of every stream.
    pub fn patch_rows(&self) -> impl Iterator<Item = (StreamKey, ndarray::ArrayView2<'_, f64>)> {
        self.entries.iter().map(|(k, m)| (*k, m.slice(s![1.., ..])))
    }
}

/// Builds `c^{ℓr}` for every selected block and window size.
///
/// `blocks` selects which of the four blocks participate (1-based ids);
/// the full set is `{1, 2, 3, 4}`.
pub fn build_multiscale_set(
    blocks: &[BlockTokens],
    block_ids: &[usize],
    scales: &[usize],
    sigma: f64,
) -> Result<AggregatedFeatureSet> {
    if scales.is_empty() || block_ids.is_empty() {
        return Err(Error::config("block and scale sets must be non-empty"));
    }
    let mut jobs = Vec::with_capacity(block_ids.len() * scales.len());
    for &id in block_ids {
        let block = blocks
            .iter()
            .find(|b| b.block_id == id)
            .ok_or_else(|| Error::config(format!("block {id} not available")))?;
        for &r in scales {
            jobs.push((block, WindowSpec::new(r, sigma)?));
        }
    }
    let entries = par::try_map_slice(&jobs, |(block, spec)| {
        aggregate_block(block, *spec).map(|m| (StreamKey { block: block.block_id, r: spec.r }, m))
    })?;
    Ok(AggregatedFeatureSet { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;

    fn block_from(patches: Array2<f64>) -> BlockTokens {
        let d = patches.ncols();
        BlockTokens {
            block_id: 1,
            cls: Array1::from_elem(d, 7.0),
            patches,
        }
    }

    #[test]
    fn singleton_window() {
        let w = window_weights((3, 3), WindowSpec::new(1, 1.0).unwrap(), 8);
        assert_eq!(w, vec![NeighborWeight { i: 3, j: 3, weight: 1.0 }]);
    }

    #[test]
    fn interior_three_by_three_weights() {
        // exp(-d²/2) ∈ {1, e^-0.5, e^-1}; sum = 1 + 4e^-0.5 + 4e^-1 ≈ 4.8976
        let w = window_weights((4, 4), WindowSpec::new(3, 1.0).unwrap(), 8);
        assert_eq!(w.len(), 9);
        let at = |i, j| w.iter().find(|n| n.i == i && n.j == j).unwrap().weight;
        assert!((at(4, 4) - 0.2042).abs() < 1e-4);
        assert!((at(3, 4) - 0.1238).abs() < 1e-4);
        assert!((at(5, 5) - 0.0751).abs() < 1e-4);
    }

    #[test]
    fn corner_window_is_clipped_and_renormalised() {
        let w = window_weights((0, 0), WindowSpec::new(5, 1.0).unwrap(), 8);
        assert_eq!(w.len(), 9);
        let s: f64 = w.iter().map(|n| n.weight).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_windows_are_rejected() {
        assert!(WindowSpec::new(2, 1.0).is_err());
        assert!(WindowSpec::new(0, 1.0).is_err());
        assert!(WindowSpec::new(3, 0.0).is_err());
    }

    #[test]
    fn point_source_spreads_to_neighbours() {
        let mut p = Array2::zeros((25, 2));
        p[[12, 0]] = 1.0;
        let out = aggregate_block(&block_from(p), WindowSpec::new(3, 1.0).unwrap()).unwrap();
        for idx in [7, 11, 13, 17] {
            assert!((out[[1 + idx, 0]] - 0.1238).abs() < 1e-4);
        }
        assert_eq!(out[[0, 0]], 7.0);
    }

    #[test]
    fn twelve_streams_and_identity_at_r1() {
        let blocks: Vec<BlockTokens> = (1..=4)
            .map(|id| BlockTokens {
                block_id: id,
                cls: Array1::zeros(3),
                patches: Array2::from_shape_fn((16, 3), |(i, j)| (i * 3 + j + id) as f64),
            })
            .collect();
        let set = build_multiscale_set(&blocks, &[1, 2, 3, 4], &[1, 3, 5], 1.0).unwrap();
        assert_eq!(set.len(), 12);
        for b in &blocks {
            assert_eq!(set.get(StreamKey { block: b.block_id, r: 1 }).unwrap(), &b.stacked());
        }
        assert!(set.entries.iter().all(|(_, m)| m.dim() == (17, 3)));
    }

    #[test]
    fn zero_blocks_give_zero_set() {
        let blocks: Vec<BlockTokens> = (1..=4)
            .map(|id| BlockTokens {
                block_id: id,
                cls: Array1::zeros(4),
                patches: Array2::zeros((9, 4)),
            })
            .collect();
        let set = build_multiscale_set(&blocks, &[1, 2, 3, 4], &[1, 3, 5], 1.0).unwrap();
        assert!(set.entries.iter().all(|(_, m)| m.iter().all(|&v| v == 0.0)));
    }
}
