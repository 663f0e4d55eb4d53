//! Text-visual alignment scores, two-state anomaly probabilities and
//! full-resolution score maps.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spatial::StreamKey;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreConfig {
    /// Temperature τ applied to every cosine similarity.
    pub tau: f64,
    /// Gaussian smoothing std in output pixels; 0 disables smoothing.
    pub smooth_sigma: f64,
    /// Side of the rendered pixel map; 0 means "backbone input size".
    pub output_size: usize,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            smooth_sigma: 4.0,
            output_size: 0,
        }
    }
}

impl ScoreConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config(format!("temperature {} must be positive", self.tau)));
        }
        if !(self.smooth_sigma >= 0.0 && self.smooth_sigma.is_finite()) {
            return Err(Error::config(format!("smoothing sigma {} must be >= 0", self.smooth_sigma)));
        }
        Ok(())
    }
}

/// Row-normalises `z`; zero rows stay zero. Returns unit rows and norms.
pub fn normalize_rows(z: ArrayView2<f64>) -> (Array2<f64>, Array1<f64>) {
    let mut unit = z.to_owned();
    let mut norms = Array1::zeros(z.nrows());
    for (mut row, n) in unit.rows_mut().into_iter().zip(norms.iter_mut()) {
        *n = row.dot(&row).sqrt();
        if *n > 0.0 {
            row /= *n;
        }
    }
    (unit, norms)
}

/// Scores of one stream for every token.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamScores {
    pub normal: Array1<f64>,
    pub abnormal: Array1<f64>,
}

/// `S = cos(z_i, ·) / τ` for both anchors. Zero rows score cosine 0.
pub fn token_similarities(
    z: ArrayView2<f64>,
    t_normal: ArrayView1<f64>,
    t_abnormal: ArrayView1<f64>,
    tau: f64,
) -> StreamScores {
    let (unit, _) = normalize_rows(z);
    StreamScores {
        normal: unit.dot(&t_normal) / tau,
        abnormal: unit.dot(&t_abnormal) / tau,
    }
}

/// Per-stream scores together with their sums over streams.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTensors {
    pub streams: Vec<(StreamKey, StreamScores)>,
    pub total_normal: Array1<f64>,
    pub total_abnormal: Array1<f64>,
}

impl ScoreTensors {
    pub fn from_streams(streams: Vec<(StreamKey, StreamScores)>) -> Result<Self> {
        let first = streams
            .first()
            .ok_or_else(|| Error::config("at least one score stream is required"))?;
        let n = first.1.normal.len();
        let mut total_normal = Array1::zeros(n);
        let mut total_abnormal = Array1::zeros(n);
        for (_, s) in &streams {
            if s.normal.len() != n || s.abnormal.len() != n {
                return Err(Error::config("score streams disagree on token count"));
            }
            total_normal += &s.normal;
            total_abnormal += &s.abnormal;
        }
        Ok(Self {
            streams,
            total_normal,
            total_abnormal,
        })
    }
}

/// `1 / (1 + e^{-x})` without overflow.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `p_i = e^{S_ia} / (e^{S_ia} + e^{S_in})` over summed stream scores.
pub fn anomaly_probabilities(scores: &ScoreTensors) -> Array1<f64> {
    (&scores.total_abnormal - &scores.total_normal).mapv(sigmoid)
}

/// Image score, patch-grid probabilities and the rendered pixel map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyResult {
    pub image_score: f64,
    pub patch_probs: Array2<f64>,
    pub pixel_map: Array2<f64>,
}

impl AnomalyResult {
    /// Checks the `[0, 1]` range of every value.
    pub fn check(&self) -> Result<()> {
        let in_range = |v: &f64| (0.0..=1.0).contains(v);
        if !in_range(&self.image_score) || !self.patch_probs.iter().all(in_range) || !self.pixel_map.iter().all(in_range) {
            return Err(Error::numeric("anomaly result has values outside [0, 1]"));
        }
        Ok(())
    }
}

/// Bilinear resize with aligned corners.
pub fn bilinear_upsample(grid: ArrayView2<f64>, size: usize) -> Array2<f64> {
    let (h, w) = grid.dim();
    let coord = |o: usize, n: usize| -> (usize, usize, f64) {
        if n == 1 || size == 1 {
            return (0, 0, 0.0);
        }
        let x = o as f64 * (n - 1) as f64 / (size - 1) as f64;
        let lo = (x.floor() as usize).min(n - 1);
        let hi = (lo + 1).min(n - 1);
        (lo, hi, x - lo as f64)
    };
    let rows: Vec<_> = (0..size).map(|y| coord(y, h)).collect();
    let cols: Vec<_> = (0..size).map(|x| coord(x, w)).collect();
    Array2::from_shape_fn((size, size), |(y, x)| {
        let (y0, y1, fy) = rows[y];
        let (x0, x1, fx) = cols[x];
        let top = grid[[y0, x0]] * (1.0 - fx) + grid[[y0, x1]] * fx;
        let bottom = grid[[y1, x0]] * (1.0 - fx) + grid[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma + 0.5).floor() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Symmetric ("reflect") boundary index, valid for any offset.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Separable Gaussian blur with symmetric borders.
pub fn gaussian_blur(map: ArrayView2<f64>, sigma: f64) -> Array2<f64> {
    if sigma <= 0.0 {
        return map.to_owned();
    }
    let k = gaussian_kernel(sigma);
    let radius = (k.len() / 2) as isize;
    let (h, w) = map.dim();
    let horizontal: Array2<f64> = Array2::from_shape_fn((h, w), |(y, x)| {
        k.iter()
            .enumerate()
            .map(|(t, kv)| kv * map[[y, reflect(x as isize + t as isize - radius, w)]])
            .sum::<f64>()
    });
    Array2::from_shape_fn((h, w), |(y, x)| {
        k.iter()
            .enumerate()
            .map(|(t, kv)| kv * horizontal[[reflect(y as isize + t as isize - radius, h), x]])
            .sum::<f64>()
    })
}

/// Upsamples a patch grid to `output_size` and smooths it. Linear in the grid.
pub fn render_map(grid: ArrayView2<f64>, sigma: f64, output_size: usize) -> Array2<f64> {
    gaussian_blur(bilinear_upsample(grid, output_size).view(), sigma)
}

/// [`render_map`] for probability grids, clipped to `[0, 1]` against round-off.
pub fn render_score_map(patch_probs: ArrayView2<f64>, config: &ScoreConfig, output_size: usize) -> Array2<f64> {
    render_map(patch_probs, config.smooth_sigma, output_size).mapv(|v| v.clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn similarities_against_aligned_anchor() {
        let t_a = array![1.0, 0.0, 0.0];
        let t_n = array![0.0, 1.0, 0.0];
        let z = array![[1.0, 0.0, 0.0], [5.0, 0.0, 0.0], [0.0, 0.0, 0.0]];
        let s = token_similarities(z.view(), t_n.view(), t_a.view(), 0.07);
        assert!((s.abnormal[0] - 14.2857).abs() < 1e-3);
        assert_eq!(s.normal[0], 0.0);
        assert_eq!(s.abnormal[0], s.abnormal[1]);
        assert_eq!((s.abnormal[2], s.normal[2]), (0.0, 0.0));
    }

    #[test]
    fn identical_anchors_tie() {
        let t = array![0.6, 0.8];
        let z = array![[0.3, -2.0]];
        let s = token_similarities(z.view(), t.view(), t.view(), 0.07);
        assert_eq!(s.abnormal, s.normal);
    }

    #[test]
    fn probability_from_log_odds() {
        let key = StreamKey { block: 1, r: 1 };
        let scores = ScoreTensors::from_streams(vec![(
            key,
            StreamScores {
                normal: array![0.0, 2.0],
                abnormal: array![3f64.ln(), 2.0],
            },
        )])
        .unwrap();
        let p = anomaly_probabilities(&scores);
        assert!((p[0] - 0.75).abs() < 1e-12);
        assert_eq!(p[1], 0.5);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(1000.0), 1.0);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn constant_grid_renders_constant() {
        let grid = Array2::from_elem((8, 8), 0.3);
        let map = render_score_map(grid.view(), &ScoreConfig::default(), 32);
        assert!(map.iter().all(|v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn aligned_corner_upsampling() {
        let grid = array![[0.0, 1.0], [0.0, 1.0]];
        let cfg = ScoreConfig {
            smooth_sigma: 0.0,
            ..Default::default()
        };
        let map = render_score_map(grid.view(), &cfg, 4);
        for row in map.rows() {
            let expected = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
            for (v, e) in row.iter().zip(expected) {
                assert!((v - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reflect_handles_wide_kernels() {
        assert_eq!(reflect(-1, 4), 0);
        assert_eq!(reflect(4, 4), 3);
        assert_eq!(reflect(-5, 4), 3);
        assert_eq!(reflect(9, 4), 1);
    }

    #[test]
    fn blur_preserves_mass_and_bounds() {
        let mut m = Array2::zeros((16, 16));
        m[[8, 8]] = 1.0;
        let b = gaussian_blur(m.view(), 2.0);
        assert!((b.sum() - 1.0).abs() < 1e-9);
        assert!(b.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn config_validation() {
        assert!(ScoreConfig { tau: 0.0, ..Default::default() }.validate().is_err());
        assert!(ScoreConfig { smooth_sigma: -1.0, ..Default::default() }.validate().is_err());
    }
}
