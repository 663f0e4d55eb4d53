//! Brute-force oracles and fixtures shared by the integration tests and the
//! acceptance gate.

#![allow(dead_code)]

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

/// Double-loop Gaussian window aggregation over a `side × side` grid,
/// clipped at the border and renormalised.
pub fn naive_aggregate(patches: &Array2<f64>, side: usize, r: usize, sigma: f64) -> Array2<f64> {
    let half = (r / 2) as i64;
    let mut out = Array2::zeros(patches.raw_dim());
    for h in 0..side as i64 {
        for w in 0..side as i64 {
            let mut total = 0.0;
            let mut acc = Array1::<f64>::zeros(patches.ncols());
            for i in h - half..=h + half {
                for j in w - half..=w + half {
                    if i < 0 || j < 0 || i >= side as i64 || j >= side as i64 {
                        continue;
                    }
                    let d2 = ((i - h).pow(2) + (j - w).pow(2)) as f64;
                    let wt = (-d2 / (2.0 * sigma * sigma)).exp();
                    total += wt;
                    acc.scaled_add(wt, &patches.row((i * side as i64 + j) as usize));
                }
            }
            out.row_mut((h * side as i64 + w) as usize).assign(&(acc / total));
        }
    }
    out
}

/// AUROC by counting concordant pairs; ties count half.
pub fn auroc_pairs(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// 8-connected regions by flood fill.
fn flood_regions(mask: &Array2<bool>) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = mask.dim();
    let mut seen = Array2::from_elem((h, w), false);
    let mut regions = Vec::new();
    for i in 0..h {
        for j in 0..w {
            if !mask[[i, j]] || seen[[i, j]] {
                continue;
            }
            let mut stack = vec![(i, j)];
            seen[[i, j]] = true;
            let mut region = Vec::new();
            while let Some((a, b)) = stack.pop() {
                region.push((a, b));
                for da in -1i64..=1 {
                    for db in -1i64..=1 {
                        let (x, y) = (a as i64 + da, b as i64 + db);
                        if x < 0 || y < 0 || x >= h as i64 || y >= w as i64 {
                            continue;
                        }
                        let (x, y) = (x as usize, y as usize);
                        if mask[[x, y]] && !seen[[x, y]] {
                            seen[[x, y]] = true;
                            stack.push((x, y));
                        }
                    }
                }
            }
            regions.push(region);
        }
    }
    regions
}

/// AUPRO by direct evaluation at every threshold in `thresholds`
/// (descending), normalised by `limit`.
pub fn aupro_dense(maps: &[Array2<f64>], masks: &[Array2<bool>], limit: f64, thresholds: &[f64]) -> f64 {
    let regions: Vec<(usize, Vec<(usize, usize)>)> = masks
        .iter()
        .enumerate()
        .flat_map(|(k, m)| flood_regions(m).into_iter().map(move |r| (k, r)))
        .collect();
    let negatives: usize = masks.iter().map(|m| m.iter().filter(|&&v| !v).count()).sum();
    let mut curve = vec![(0.0, 0.0)];
    for &t in thresholds {
        let fp: usize = maps
            .iter()
            .zip(masks)
            .map(|(map, m)| map.iter().zip(m).filter(|(&s, &v)| !v && s >= t).count())
            .sum();
        let pro: f64 = regions
            .iter()
            .map(|(k, r)| r.iter().filter(|&&(i, j)| maps[*k][[i, j]] >= t).count() as f64 / r.len() as f64)
            .sum::<f64>()
            / regions.len() as f64;
        curve.push((fp as f64 / negatives as f64, pro));
    }
    let mut area = 0.0;
    for pair in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (pair[0], pair[1]);
        if x0 >= limit {
            break;
        }
        if x1 <= limit {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
            area += (limit - x0) * (y0 + y) / 2.0;
        }
    }
    area / limit
}

/// Descending grid `n/n, (n-1)/n, ..., 0`. Values `j/m` with `m` dividing
/// `n` land exactly on grid points.
pub fn unit_grid(n: usize) -> Vec<f64> {
    (0..=n).rev().map(|k| k as f64 / n as f64).collect()
}

/// Index of the most cosine-similar bank row (lowest index on ties) and
/// `(1 − cos) / 2`, by exhaustive search.
pub fn knn_exhaustive(queries: &Array2<f64>, bank: &Array2<f64>) -> Vec<(usize, f64)> {
    let cos = |a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>| {
        let (na, nb) = (a.dot(&a).sqrt(), b.dot(&b).sqrt());
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            a.dot(&b) / (na * nb)
        }
    };
    queries
        .rows()
        .into_iter()
        .map(|q| {
            let mut best = (0, f64::NEG_INFINITY);
            for (i, b) in bank.rows().into_iter().enumerate() {
                let c = cos(q, b);
                if c > best.1 {
                    best = (i, c);
                }
            }
            (best.0, ((1.0 - best.1) / 2.0).clamp(0.0, 1.0))
        })
        .collect()
}

/// Central finite differences of `f` at `x`.
pub fn numeric_gradient(x: &Array2<f64>, step: f64, mut f: impl FnMut(&Array2<f64>) -> f64) -> Array2<f64> {
    let mut grad = Array2::zeros(x.raw_dim());
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let (i, j) = (idx / x.ncols(), idx % x.ncols());
        let orig = probe[[i, j]];
        probe[[i, j]] = orig + step;
        let up = f(&probe);
        probe[[i, j]] = orig - step;
        let down = f(&probe);
        probe[[i, j]] = orig;
        grad[[i, j]] = (up - down) / (2.0 * step);
    }
    grad
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, 0 when both vanish.
pub fn relative_error(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let norm = |m: &Array2<f64>| m.iter().map(|v| v * v).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&(a - b)) / scale
    }
}

pub fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a - b).iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Mask with `blobs` random filled squares of side 1..=max_side.
pub fn random_mask(rng: &mut ChaCha8Rng, side: usize, blobs: usize, max_side: usize) -> Array2<bool> {
    let mut mask = Array2::from_elem((side, side), false);
    for _ in 0..blobs {
        let s = rng.random_range(1..=max_side.min(side));
        let (i0, j0) = (rng.random_range(0..=side - s), rng.random_range(0..=side - s));
        for i in i0..i0 + s {
            for j in j0..j0 + s {
                mask[[i, j]] = true;
            }
        }
    }
    mask
}
