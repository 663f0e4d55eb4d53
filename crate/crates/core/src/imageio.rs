//! RGB raster and binary mask containers plus PNG loading.

use std::path::Path;

use image::imageops::FilterType;
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// Channel-first RGB raster with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    /// Shape `(3, height, width)`.
    pub data: Array3<f64>,
}

impl ImageTensor {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if data.shape()[0] != 3 {
            return Err(Error::config(format!(
                "image must have 3 channels, got {}",
                data.shape()[0]
            )));
        }
        Ok(Self { data })
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::data(format!("cannot read image {}: {e}", path.display())))?;
        Ok(Self::from_dynamic(&img))
    }

    pub fn from_dynamic(img: &image::DynamicImage) -> Self {
        let rgb = img.to_rgb32f();
        let (w, h) = rgb.dimensions();
        let mut data = Array3::zeros((3, h as usize, w as usize));
        for (x, y, px) in rgb.enumerate_pixels() {
            for c in 0..3 {
                data[[c, y as usize, x as usize]] = f64::from(px[c]).clamp(0.0, 1.0);
            }
        }
        Self { data }
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let (h, w) = (self.height(), self.width());
        image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let v = |c: usize| (self.data[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
            image::Rgb([v(0), v(1), v(2)])
        })
    }

    /// Bilinear resize to a square `size × size` raster. Returns a clone
    /// when the image already has that size.
    pub fn resized(&self, size: usize) -> Self {
        if self.height() == size && self.width() == size {
            return self.clone();
        }
        let (h, w) = (self.height(), self.width());
        let mut buf = image::Rgb32FImage::new(w as u32, h as u32);
        for (x, y, px) in buf.enumerate_pixels_mut() {
            for c in 0..3 {
                px[c] = self.data[[c, y as usize, x as usize]] as f32;
            }
        }
        let out = image::imageops::resize(&buf, size as u32, size as u32, FilterType::Triangle);
        Self::from_dynamic(&image::DynamicImage::ImageRgb32F(out))
    }
}

/// Binary ground-truth mask; `true` marks anomalous pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub data: Array2<bool>,
}

impl Mask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            data: Array2::from_elem((height, width), false),
        }
    }

    pub fn height(&self) -> usize {
        self.data.nrows()
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    pub fn positive_count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::data(format!("cannot read mask {}: {e}", path.display())))?
            .to_luma8();
        let (w, h) = img.dimensions();
        let data = Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
            img.get_pixel(x as u32, y as u32)[0] > 127
        });
        Ok(Self { data })
    }

    pub fn to_luma8(&self) -> image::GrayImage {
        image::GrayImage::from_fn(self.width() as u32, self.height() as u32, |x, y| {
            image::Luma([if self.data[[y as usize, x as usize]] { 255 } else { 0 }])
        })
    }

    /// Nearest-neighbour resize to `size × size`.
    pub fn resized_nearest(&self, size: usize) -> Self {
        if self.height() == size && self.width() == size {
            return self.clone();
        }
        let (h, w) = (self.height(), self.width());
        let data = Array2::from_shape_fn((size, size), |(y, x)| {
            let sy = ((y as f64 + 0.5) * h as f64 / size as f64).floor() as usize;
            let sx = ((x as f64 + 0.5) * w as f64 / size as f64).floor() as usize;
            self.data[[sy.min(h - 1), sx.min(w - 1)]]
        });
        Self { data }
    }
}

/// 8-bit grayscale rendering of a score map: `0 ↦ 0`, `max_value ↦ 255`,
/// clipped outside.
pub fn heatmap_image(map: &Array2<f64>, max_value: f64) -> image::GrayImage {
    let (h, w) = map.dim();
    image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = (map[[y as usize, x as usize]] / max_value).clamp(0.0, 1.0);
        image::Luma([(v * 255.0).round() as u8])
    })
}

const NPY_MAGIC: &[u8] = b"\x93NUMPY\x01\x00";

/// Writes a little-endian `float64` array in NumPy `.npy` format (v1.0).
pub fn write_npy(path: &Path, map: &Array2<f64>) -> Result<()> {
    let (h, w) = map.dim();
    let mut header = format!("{{'descr': '<f8', 'fortran_order': False, 'shape': ({h}, {w}), }}");
    // magic + version + u16 length + header + '\n' must be a multiple of 64
    let unpadded = NPY_MAGIC.len() + 2 + header.len() + 1;
    header.push_str(&" ".repeat(unpadded.next_multiple_of(64) - unpadded));
    header.push('\n');
    let mut bytes = Vec::with_capacity(NPY_MAGIC.len() + 2 + header.len() + 8 * h * w);
    bytes.extend_from_slice(NPY_MAGIC);
    bytes.extend_from_slice(&(header.len() as u16).to_le_bytes());
    bytes.extend_from_slice(header.as_bytes());
    for v in map.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a 2-D `float64` C-order `.npy` file as written by [`write_npy`].
pub fn read_npy(path: &Path) -> Result<Array2<f64>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = || Error::data(format!("{} is not a 2-D float64 .npy file", path.display()));
    if bytes.len() < 10 || &bytes[..8] != NPY_MAGIC {
        return Err(bad());
    }
    let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let header = std::str::from_utf8(bytes.get(10..10 + hlen).ok_or_else(bad)?).map_err(|_| bad())?;
    if !header.contains("'descr': '<f8'") || !header.contains("'fortran_order': False") {
        return Err(bad());
    }
    let shape = header
        .split("'shape': (")
        .nth(1)
        .and_then(|s| s.split(')').next())
        .ok_or_else(bad)?;
    let dims: Vec<usize> = shape
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    let [h, w] = dims[..] else { return Err(bad()) };
    let data = &bytes[10 + hlen..];
    if data.len() != 8 * h * w {
        return Err(bad());
    }
    let values = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Array2::from_shape_vec((h, w), values).map_err(|_| bad())
}
