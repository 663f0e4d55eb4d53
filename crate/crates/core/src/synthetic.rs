//! Seeded synthetic inspection corpus: striped, noisy square textures that
//! share one stripe pattern per corpus, with
//! optional blob or scratch defects and their pixel masks. Defects always
//! darken the surface (stains, dark scratches).

use std::path::Path;

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{ImageTensor, Mask};
use crate::trainer::TrainingSample;
use crate::util::seeded_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DefectKind {
    None,
    Blob,
    Scratch,
}

#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub name: String,
    pub image: ImageTensor,
    pub mask: Mask,
    pub kind: DefectKind,
}

impl SyntheticSample {
    pub fn is_anomalous(&self) -> bool {
        self.kind != DefectKind::None
    }

    pub fn to_training(&self) -> TrainingSample {
        TrainingSample {
            image: self.image.clone(),
            label: self.is_anomalous(),
            mask: self.mask.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub count: usize,
    /// Fraction of images that carry a defect; defects alternate blob/scratch.
    pub anomaly_fraction: f64,
    pub size: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            count: 64,
            anomaly_fraction: 0.5,
            size: 32,
            seed: 0,
        }
    }
}

pub fn generate(config: &SyntheticConfig) -> Vec<SyntheticSample> {
    let mut rng = seeded_rng(config.seed ^ 0x5917_7e71c);
    let anomalous = (config.count as f64 * config.anomaly_fraction).round() as usize;
    let texture = Texture {
        angle: rng.random_range(0.0..std::f64::consts::PI),
        freq: rng.random_range(0.5..1.1),
    };
    (0..config.count)
        .map(|idx| {
            let kind = if idx < anomalous {
                if idx % 2 == 0 {
                    DefectKind::Blob
                } else {
                    DefectKind::Scratch
                }
            } else {
                DefectKind::None
            };
            let (image, mask) = render(&mut rng, &texture, config.size, kind);
            let prefix = match kind {
                DefectKind::None => "good",
                DefectKind::Blob => "blob",
                DefectKind::Scratch => "scratch",
            };
            SyntheticSample {
                name: format!("{prefix}_{idx:03}"),
                image,
                mask,
                kind,
            }
        })
        .collect()
}

/// Stripe pattern shared by every image of a corpus, like one product type.
struct Texture {
    angle: f64,
    freq: f64,
}

fn render(rng: &mut impl Rng, texture: &Texture, size: usize, kind: DefectKind) -> (ImageTensor, Mask) {
    let grey: f64 = rng.random_range(0.45..0.55);
    let base: [f64; 3] = std::array::from_fn(|_| grey + rng.random_range(-0.03..0.03));
    let angle = texture.angle + rng.random_range(-0.05..0.05);
    let freq = texture.freq * rng.random_range(0.95..1.05);
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let amp: f64 = rng.random_range(0.04..0.08);
    let (ca, sa) = (angle.cos(), angle.sin());
    let mut data = Array3::zeros((3, size, size));
    for y in 0..size {
        for x in 0..size {
            let stripe = amp * (freq * (x as f64 * ca + y as f64 * sa) + phase).sin();
            for (c, b) in base.iter().enumerate() {
                data[[c, y, x]] = b + stripe + rng.random_range(-0.02..0.02);
            }
        }
    }
    let mut mask = Mask::zeros(size, size);
    let s = size as f64;
    match kind {
        DefectKind::None => {}
        DefectKind::Blob => {
            let radius: f64 = rng.random_range(s * 0.07..s * 0.13);
            let cy: f64 = rng.random_range(radius + 1.0..s - radius - 1.0);
            let cx: f64 = rng.random_range(radius + 1.0..s - radius - 1.0);
            let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.6..1.0));
            for y in 0..size {
                for x in 0..size {
                    let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                    if d2 <= radius * radius {
                        mask.data[[y, x]] = true;
                        for c in 0..3 {
                            data[[c, y, x]] -= 0.35 * tint[c];
                        }
                    }
                }
            }
        }
        DefectKind::Scratch => {
            let len: f64 = rng.random_range(s * 0.35..s * 0.6);
            let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let (dy, dx) = (theta.sin(), theta.cos());
            let cy: f64 = rng.random_range(s * 0.3..s * 0.7);
            let cx: f64 = rng.random_range(s * 0.3..s * 0.7);
            let steps = (len * 2.0) as usize;
            for t in 0..=steps {
                let u = t as f64 / steps as f64 - 0.5;
                let (py, px) = (cy + u * len * dy, cx + u * len * dx);
                for (oy, ox) in [(0.0, 0.0), (0.5, 0.0), (0.0, 0.5)] {
                    let (y, x) = ((py + oy).floor(), (px + ox).floor());
                    if y >= 0.0 && x >= 0.0 && (y as usize) < size && (x as usize) < size {
                        let (y, x) = (y as usize, x as usize);
                        if !mask.data[[y, x]] {
                            mask.data[[y, x]] = true;
                            for c in 0..3 {
                                data[[c, y, x]] -= 0.4;
                            }
                        }
                    }
                }
            }
        }
    }
    data.mapv_inplace(|v: f64| v.clamp(0.0, 1.0));
    (ImageTensor { data }, mask)
}

/// Writes samples in the flat layout:
/// `root/<category>/{normal,anomaly}/<name>.png` plus `root/<category>/mask/<name>.png`.
pub fn write_flat_layout(root: &Path, category: &str, samples: &[SyntheticSample]) -> Result<()> {
    let dir = root.join(category);
    for sub in ["normal", "anomaly", "mask"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    for s in samples {
        let sub = if s.is_anomalous() { "anomaly" } else { "normal" };
        let path = dir.join(sub).join(format!("{}.png", s.name));
        s.image
            .to_rgb8()
            .save(&path)
            .map_err(|e| Error::data(format!("cannot write {}: {e}", path.display())))?;
        if s.is_anomalous() {
            let mpath = dir.join("mask").join(format!("{}.png", s.name));
            s.mask
                .to_luma8()
                .save(&mpath)
                .map_err(|e| Error::data(format!("cannot write {}: {e}", mpath.display())))?;
        }
    }
    Ok(())
}
