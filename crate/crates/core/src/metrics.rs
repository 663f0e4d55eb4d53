//! Ranking and segmentation metrics: AUROC, average precision and the
//! area under the per-region-overlap curve.

use std::cmp::Ordering;

use ndarray::Array2;

use crate::error::{Error, Result};

fn check_lengths(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::config(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::numeric("NaN score"));
    }
    Ok(())
}

/// Area under the ROC curve via the rank statistic; ties count half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("AUROC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of mid-ranks of positives over tie groups.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        let positives = order[i..=j].iter().filter(|&&k| labels[k]).count();
        rank_sum += mid * positives as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Average precision: mean precision at each positive when samples are
/// ranked by descending score. Ties are broken by ascending input index.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return Err(Error::UndefinedMetric("average precision needs positives".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(total / pos as f64)
}

/// 8-connected component labelling. Returns per-pixel labels (0 for
/// background, 1.. for regions) and the region count.
pub fn connected_components(mask: &Array2<bool>) -> (Array2<u32>, usize) {
    let (h, w) = mask.dim();
    let mut labels = Array2::<u32>::zeros((h, w));
    let mut next = 0u32;
    let mut stack = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask[[y, x]] || labels[[y, x]] != 0 {
                continue;
            }
            next += 1;
            labels[[y, x]] = next;
            stack.push((y, x));
            while let Some((cy, cx)) = stack.pop() {
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let (ny, nx) = (cy as isize + dy, cx as isize + dx);
                        if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                            continue;
                        }
                        let (ny, nx) = (ny as usize, nx as usize);
                        if mask[[ny, nx]] && labels[[ny, nx]] == 0 {
                            labels[[ny, nx]] = next;
                            stack.push((ny, nx));
                        }
                    }
                }
            }
        }
    }
    (labels, next as usize)
}

/// Area under the per-region-overlap curve up to `fpr_limit`, normalised by
/// `fpr_limit`.
///
/// Thresholds sweep every distinct score. At each threshold the overlap is
/// the mean, over connected ground-truth regions of all images, of the
/// fraction of region pixels at or above the threshold; the false positive
/// rate is taken over all background pixels. The piecewise-linear curve
/// through these points is integrated from 0 to `fpr_limit`.
pub fn aupro(maps: &[Array2<f64>], masks: &[Array2<bool>], fpr_limit: f64) -> Result<f64> {
    let curve = pro_curve(maps, masks)?;
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(Error::config(format!("FPR limit {fpr_limit} must lie in (0, 1]")));
    }
    Ok(integrate_to(&curve, fpr_limit) / fpr_limit)
}

/// `(fpr, pro)` points of the overlap curve, starting at `(0, 0)`.
pub fn pro_curve(maps: &[Array2<f64>], masks: &[Array2<bool>]) -> Result<Vec<(f64, f64)>> {
    if maps.len() != masks.len() {
        return Err(Error::config("maps and masks differ in count"));
    }
    // (score, region id or usize::MAX for background)
    let mut pixels: Vec<(f64, usize)> = Vec::new();
    let mut region_sizes: Vec<usize> = Vec::new();
    let mut negatives = 0usize;
    for (map, mask) in maps.iter().zip(masks) {
        if map.dim() != mask.dim() {
            return Err(Error::config(format!(
                "map {:?} and mask {:?} differ in shape",
                map.dim(),
                mask.dim()
            )));
        }
        let (labels, count) = connected_components(mask);
        let offset = region_sizes.len();
        region_sizes.extend(std::iter::repeat_n(0, count));
        for (&score, &label) in map.iter().zip(labels.iter()) {
            if score.is_nan() {
                return Err(Error::numeric("NaN in score map"));
            }
            if label == 0 {
                negatives += 1;
                pixels.push((score, usize::MAX));
            } else {
                let r = offset + label as usize - 1;
                region_sizes[r] += 1;
                pixels.push((score, r));
            }
        }
    }
    if region_sizes.is_empty() {
        return Err(Error::UndefinedMetric("AUPRO needs at least one anomalous region".into()));
    }
    pixels.sort_by(|a, b| b.0.total_cmp(&a.0));
    let regions = region_sizes.len() as f64;
    let mut hits = vec![0usize; region_sizes.len()];
    let mut overlap_sum = 0.0;
    let mut false_pos = 0usize;
    let mut curve = vec![(0.0, 0.0)];
    let mut i = 0;
    while i < pixels.len() {
        let score = pixels[i].0;
        while i < pixels.len() && pixels[i].0.total_cmp(&score) == Ordering::Equal {
            match pixels[i].1 {
                usize::MAX => false_pos += 1,
                r => {
                    hits[r] += 1;
                    overlap_sum += 1.0 / region_sizes[r] as f64;
                }
            }
            i += 1;
        }
        let fpr = if negatives == 0 { 0.0 } else { false_pos as f64 / negatives as f64 };
        curve.push((fpr, overlap_sum / regions));
    }
    Ok(curve)
}

/// Trapezoidal area under a monotone-in-x polyline from 0 to `limit`,
/// interpolating linearly at the limit.
pub fn integrate_to(curve: &[(f64, f64)], limit: f64) -> f64 {
    let mut area = 0.0;
    for pair in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (pair[0], pair[1]);
        if x0 >= limit {
            break;
        }
        if x1 <= limit {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y_lim = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
            area += (limit - x0) * (y0 + y_lim) / 2.0;
        }
    }
    // a curve that stops short of the limit stays flat at its last value
    if let Some(&(x_last, y_last)) = curve.last() {
        if x_last < limit {
            area += (limit - x_last) * y_last;
        }
    }
    area
}
