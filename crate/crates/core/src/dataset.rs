//! Dataset discovery for the supported directory layouts.
//!
//! * `mvtec`: `<root>/<category>/train/good/*`, `<root>/<category>/test/<defect>/*`
//!   with masks at `<root>/<category>/ground_truth/<defect>/<stem>_mask.png`.
//!   `test/good` holds the normal test images.
//! * `visa-csv`: `<root>/split_csv/1cls.csv` with columns
//!   `object,split,label,image,mask`; paths are relative to `<root>` and
//!   `label` is `normal` or `anomaly`.
//! * `flat-synthetic`: `<root>/<category>/{normal,anomaly}/*.png` with masks
//!   at `<root>/<category>/mask/<name>.png`. Every image is a test sample.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{ImageTensor, Mask};
use crate::par;

const IMAGE_EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "bmp", "tif"];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    #[default]
    Mvtec,
    VisaCsv,
    FlatSynthetic,
}

impl FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mvtec" => Ok(Layout::Mvtec),
            "visa-csv" => Ok(Layout::VisaCsv),
            "flat-synthetic" => Ok(Layout::FlatSynthetic),
            other => Err(Error::config(format!(
                "unknown dataset layout `{other}` (expected mvtec, visa-csv or flat-synthetic)"
            ))),
        }
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Layout::Mvtec => "mvtec",
            Layout::VisaCsv => "visa-csv",
            Layout::FlatSynthetic => "flat-synthetic",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub image: PathBuf,
    pub category: String,
    pub split: Split,
    pub label: bool,
    pub mask: Option<PathBuf>,
}

impl Sample {
    /// Image at `size × size` and its mask at `mask_size × mask_size`
    /// (all-background for normal samples).
    pub fn load(&self, size: usize, mask_size: usize) -> Result<(ImageTensor, Mask)> {
        let image = ImageTensor::load(&self.image)?;
        let mask = match &self.mask {
            Some(path) => {
                let m = Mask::load(path)?;
                if (m.height(), m.width()) != (image.height(), image.width()) {
                    return Err(Error::data(format!(
                        "mask {} is {}×{} but image {} is {}×{}",
                        path.display(),
                        m.width(),
                        m.height(),
                        self.image.display(),
                        image.width(),
                        image.height()
                    )));
                }
                m.resized_nearest(mask_size)
            }
            None => Mask::zeros(mask_size, mask_size),
        };
        Ok((image.resized(size), mask))
    }
}

/// Lists every sample under `root`, sorted by category then path, with masks
/// checked for presence and size.
pub fn load_dataset(root: &Path, layout: Layout) -> Result<Vec<Sample>> {
    if !root.is_dir() {
        return Err(Error::config(format!("dataset root {} is not a directory", root.display())));
    }
    let mut samples = match layout {
        Layout::Mvtec => load_mvtec(root)?,
        Layout::VisaCsv => load_visa(root)?,
        Layout::FlatSynthetic => load_flat(root)?,
    };
    samples.sort_by(|a, b| a.category.cmp(&b.category).then_with(|| a.image.cmp(&b.image)));
    let checks = par::map_slice(&samples, validate_sample);
    checks.into_iter().collect::<Result<Vec<()>>>()?;
    Ok(samples)
}

/// Distinct categories in sample order.
pub fn categories(samples: &[Sample]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for s in samples {
        if out.last() != Some(&s.category) && !out.contains(&s.category) {
            out.push(s.category.clone());
        }
    }
    out
}

fn validate_sample(s: &Sample) -> Result<()> {
    if !s.image.is_file() {
        return Err(Error::data(format!("image {} does not exist", s.image.display())));
    }
    match (&s.mask, s.label) {
        (None, true) if s.split == Split::Test => Err(Error::data(format!(
            "anomalous sample {} has no mask",
            s.image.display()
        ))),
        (Some(mask), _) => {
            if !mask.is_file() {
                return Err(Error::data(format!(
                    "mask {} for {} does not exist",
                    mask.display(),
                    s.image.display()
                )));
            }
            let dims = |p: &Path| {
                image::image_dimensions(p).map_err(|e| Error::data(format!("cannot read {}: {e}", p.display())))
            };
            let (mi, ii) = (dims(mask)?, dims(&s.image)?);
            if mi != ii {
                return Err(Error::data(format!(
                    "mask {} is {}×{} but image {} is {}×{}",
                    mask.display(),
                    mi.0,
                    mi.1,
                    s.image.display(),
                    ii.0,
                    ii.1
                )));
            }
            Ok(())
        }
        _ => Ok(()),
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    out.sort();
    Ok(out)
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(sorted_entries(dir)?
        .into_iter()
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect())
}

fn subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(sorted_entries(dir)?.into_iter().filter(|p| p.is_dir()).collect())
}

fn dir_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn load_mvtec(root: &Path) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for cat_dir in subdirs(root)? {
        let category = dir_name(&cat_dir);
        let train_good = cat_dir.join("train").join("good");
        if train_good.is_dir() {
            for image in image_files(&train_good)? {
                out.push(Sample {
                    image,
                    category: category.clone(),
                    split: Split::Train,
                    label: false,
                    mask: None,
                });
            }
        }
        let test = cat_dir.join("test");
        if !test.is_dir() {
            continue;
        }
        for defect_dir in subdirs(&test)? {
            let defect = dir_name(&defect_dir);
            let anomalous = defect != "good";
            for image in image_files(&defect_dir)? {
                let mask = anomalous.then(|| {
                    let stem = image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                    cat_dir.join("ground_truth").join(&defect).join(format!("{stem}_mask.png"))
                });
                out.push(Sample {
                    image,
                    category: category.clone(),
                    split: Split::Test,
                    label: anomalous,
                    mask,
                });
            }
        }
    }
    if out.is_empty() {
        return Err(Error::data(format!("no mvtec-style categories under {}", root.display())));
    }
    Ok(out)
}

#[derive(Debug, Deserialize)]
struct VisaRow {
    object: String,
    split: String,
    label: String,
    image: String,
    #[serde(default)]
    mask: String,
}

fn load_visa(root: &Path) -> Result<Vec<Sample>> {
    let csv_path = root.join("split_csv").join("1cls.csv");
    let mut reader = csv::Reader::from_path(&csv_path)
        .map_err(|e| Error::data(format!("cannot open {}: {e}", csv_path.display())))?;
    let mut out = Vec::new();
    for (line, row) in reader.deserialize::<VisaRow>().enumerate() {
        let row = row.map_err(|e| Error::data(format!("{} row {}: {e}", csv_path.display(), line + 2)))?;
        let split = match row.split.as_str() {
            "train" => Split::Train,
            "test" => Split::Test,
            other => {
                return Err(Error::data(format!(
                    "{} row {}: unknown split `{other}`",
                    csv_path.display(),
                    line + 2
                )))
            }
        };
        let label = match row.label.as_str() {
            "normal" => false,
            "anomaly" => true,
            other => {
                return Err(Error::data(format!(
                    "{} row {}: unknown label `{other}`",
                    csv_path.display(),
                    line + 2
                )))
            }
        };
        let mask = (!row.mask.trim().is_empty()).then(|| root.join(row.mask.trim()));
        out.push(Sample {
            image: root.join(row.image.trim()),
            category: row.object,
            split,
            label,
            mask,
        });
    }
    if out.is_empty() {
        return Err(Error::data(format!("{} lists no samples", csv_path.display())));
    }
    Ok(out)
}

fn load_flat(root: &Path) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for cat_dir in subdirs(root)? {
        let category = dir_name(&cat_dir);
        for (sub, anomalous) in [("normal", false), ("anomaly", true)] {
            let dir = cat_dir.join(sub);
            if !dir.is_dir() {
                continue;
            }
            for image in image_files(&dir)? {
                let mask = anomalous.then(|| {
                    let stem = image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                    cat_dir.join("mask").join(format!("{stem}.png"))
                });
                out.push(Sample {
                    image,
                    category: category.clone(),
                    split: Split::Test,
                    label: anomalous,
                    mask,
                });
            }
        }
    }
    if out.is_empty() {
        return Err(Error::data(format!("no flat-layout categories under {}", root.display())));
    }
    Ok(out)
}
