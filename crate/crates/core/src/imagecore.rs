//! Image and mask values, blend compositions and the total-variation
//! regularizer.
//!
//! Rasters are stored channel-major (`[C, H, W]`, row-major inside each
//! channel). Every plane carries a [`ValueRange`] tag that is checked on
//! ingest and when network outputs are converted back into planes; values
//! are never silently clamped.
//!
//! PNG interchange is 8-bit. Images map byte `b` to `b / 127.5 - 1` and back
//! with `round((v + 1) · 127.5)`; masks map `b` to `b / 255`. Both mappings
//! reproduce the original bytes exactly on a load/save round trip.

use std::path::Path;

use crate::error::{contract, Error, Result};
use crate::tensor::Tensor;

/// Declared value domain of a plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueRange {
    /// Images, `[-1, 1]`.
    SignedUnit,
    /// Masks and saliency, `[0, 1]`.
    Unit,
}

impl ValueRange {
    pub fn bounds(self) -> (f64, f64) {
        match self {
            ValueRange::SignedUnit => (-1.0, 1.0),
            ValueRange::Unit => (0.0, 1.0),
        }
    }

    /// Width of the interval.
    pub fn span(self) -> f64 {
        let (lo, hi) = self.bounds();
        hi - lo
    }
}

/// Tolerance for range checks on network outputs.
const RANGE_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane {
    data: Vec<f64>,
    channels: usize,
    height: usize,
    width: usize,
    range: ValueRange,
}

impl ImagePlane {
    pub fn new(data: Vec<f64>, channels: usize, height: usize, width: usize, range: ValueRange) -> Result<Self> {
        contract!(
            data.len() == channels * height * width,
            "plane data has {} values, expected {channels}x{height}x{width}",
            data.len()
        );
        let p = ImagePlane { data, channels, height, width, range };
        p.validate()?;
        Ok(p)
    }

    pub fn filled(value: f64, channels: usize, height: usize, width: usize, range: ValueRange) -> Result<Self> {
        Self::new(vec![value; channels * height * width], channels, height, width, range)
    }

    pub fn from_tensor(t: &Tensor, range: ValueRange) -> Result<Self> {
        contract!(t.dims() == 3, "expected a [C, H, W] tensor, got {:?}", t.shape());
        let s = t.shape();
        Self::new(t.to_vec(), s[0], s[1], s[2], range)
    }

    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.range.bounds();
        for (i, &v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Contract(format!("non-finite value {v} at index {i}")));
            }
            if v < lo - RANGE_SLACK || v > hi + RANGE_SLACK {
                return Err(Error::Contract(format!(
                    "value {v} at index {i} outside declared range [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }

    /// Constant tensor view for graph construction.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.data.clone(), &[self.channels, self.height, self.width])
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    /// Checks the spatial size against a U-Net of the given depth.
    pub fn check_divisible(&self, depth: usize) -> Result<()> {
        let stride = 1usize << depth;
        if self.height < 8 || self.width < 8 || self.height % stride != 0 || self.width % stride != 0 {
            return Err(Error::Config(format!(
                "resolution {}x{} must be at least 8 and divisible by 2^{depth} = {stride}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// Single channel mask broadcast to three channels for display.
    pub fn to_rgb_display(&self) -> ImagePlane {
        match (self.channels, self.range) {
            (3, ValueRange::SignedUnit) => self.clone(),
            (1, r) => {
                let (lo, _) = r.bounds();
                let span = r.span();
                let plane: Vec<f64> = self.data.iter().map(|v| (v - lo) / span * 2.0 - 1.0).collect();
                let mut data = Vec::with_capacity(3 * plane.len());
                for _ in 0..3 {
                    data.extend_from_slice(&plane);
                }
                ImagePlane { data, channels: 3, height: self.height, width: self.width, range: ValueRange::SignedUnit }
            }
            _ => self.clone(),
        }
    }

    /// Decodes an 8-bit PNG. Images read as RGB, masks as luma.
    pub fn load_png(path: &Path, range: ValueRange) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        match range {
            ValueRange::SignedUnit => {
                let rgb = img.to_rgb8();
                let mut data = vec![0.0; 3 * h * w];
                for (i, px) in rgb.pixels().enumerate() {
                    for c in 0..3 {
                        data[c * h * w + i] = byte_to_signed(px[c]);
                    }
                }
                Self::new(data, 3, h, w, range)
            }
            ValueRange::Unit => {
                let l = img.to_luma8();
                let data = l.pixels().map(|p| p[0] as f64 / 255.0).collect();
                Self::new(data, 1, h, w, range)
            }
        }
    }

    /// Quantized bytes in interleaved HWC order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let (h, w) = (self.height, self.width);
        let mut out = Vec::with_capacity(self.channels * h * w);
        for i in 0..h * w {
            for c in 0..self.channels {
                let v = self.data[c * h * w + i];
                out.push(match self.range {
                    ValueRange::SignedUnit => signed_to_byte(v),
                    ValueRange::Unit => (v * 255.0).round().clamp(0.0, 255.0) as u8,
                });
            }
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let (w, h) = (self.width as u32, self.height as u32);
        let res = match self.channels {
            3 => image::RgbImage::from_raw(w, h, bytes).map(|i| i.save(path)),
            1 => image::GrayImage::from_raw(w, h, bytes).map(|i| i.save(path)),
            c => return Err(Error::Contract(format!("cannot encode {c}-channel plane as PNG"))),
        };
        match res {
            Some(Ok(())) => Ok(()),
            Some(Err(e)) => Err(Error::Data(format!("{}: {e}", path.display()))),
            None => Err(Error::Contract("raster buffer size mismatch".into())),
        }
    }

    /// Horizontal strip of equally sized panels (masks shown as gray).
    pub fn hstack(panels: &[ImagePlane]) -> Result<ImagePlane> {
        contract!(!panels.is_empty(), "empty panel list");
        let rgb: Vec<ImagePlane> = panels.iter().map(|p| p.to_rgb_display()).collect();
        let (h, w) = (rgb[0].height, rgb[0].width);
        contract!(rgb.iter().all(|p| p.height == h && p.width == w), "panel sizes differ");
        let n = rgb.len();
        let mut data = vec![0.0; 3 * h * w * n];
        for (k, p) in rgb.iter().enumerate() {
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        data[(c * h + y) * w * n + k * w + x] = p.data[(c * h + y) * w + x];
                    }
                }
            }
        }
        ImagePlane::new(data, 3, h, w * n, ValueRange::SignedUnit)
    }

    /// Rec. 601 luma of an RGB image (or the single channel of a mask).
    pub fn luma(&self) -> Vec<f64> {
        let n = self.height * self.width;
        if self.channels == 1 {
            return self.data.clone();
        }
        (0..n)
            .map(|i| 0.299 * self.data[i] + 0.587 * self.data[n + i] + 0.114 * self.data[2 * n + i])
            .collect()
    }
}

pub fn byte_to_signed(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}

pub fn signed_to_byte(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Blend weights for composition: one mask, or two whose sum stays ≤ 1.
#[derive(Debug, Clone, PartialEq)]
pub enum FusionMask {
    Single(ImagePlane),
    Dual(ImagePlane, ImagePlane),
}

impl FusionMask {
    pub fn single(m: ImagePlane) -> Result<Self> {
        check_mask_plane(&m)?;
        Ok(FusionMask::Single(m))
    }

    pub fn dual(m1: ImagePlane, m2: ImagePlane) -> Result<Self> {
        check_mask_plane(&m1)?;
        check_mask_plane(&m2)?;
        contract!(m1.shape() == m2.shape(), "mask shapes differ");
        for (i, (a, b)) in m1.data.iter().zip(&m2.data).enumerate() {
            contract!(a + b <= 1.0 + RANGE_SLACK, "m1 + m2 = {} > 1 at pixel {i}", a + b);
        }
        Ok(FusionMask::Dual(m1, m2))
    }
}

fn check_mask_plane(m: &ImagePlane) -> Result<()> {
    contract!(m.channels == 1, "masks have one channel, got {}", m.channels);
    contract!(m.range == ValueRange::Unit, "mask must be tagged as unit range");
    Ok(())
}

fn check_same_size(a: &ImagePlane, b: &ImagePlane, what: &str) -> Result<()> {
    contract!(
        a.height == b.height && a.width == b.width && a.channels == b.channels,
        "{what}: shape {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
    Ok(())
}

/// `b_s ⊗ m + b_d ⊗ (1 − m)` on graph tensors; `m` is `[1, H, W]`.
pub fn blend_two(b_s: &Tensor, b_d: &Tensor, m: &Tensor) -> Tensor {
    let c = b_s.shape()[0];
    let mc = m.repeat0(c);
    b_s.mul(&mc).add(&b_d.mul(&mc.rsub_scalar(1.0)))
}

/// `b_a ⊗ m1 + e ⊗ m2 + t_a ⊗ (1 − m1 − m2)` on graph tensors.
pub fn blend_three(b_a: &Tensor, e: &Tensor, t_a: &Tensor, m1: &Tensor, m2: &Tensor) -> Tensor {
    let c = b_a.shape()[0];
    let m1c = m1.repeat0(c);
    let m2c = m2.repeat0(c);
    let rest = m1c.add(&m2c).rsub_scalar(1.0);
    b_a.mul(&m1c).add(&e.mul(&m2c)).add(&t_a.mul(&rest))
}

/// Two-way blend of stream outputs.
pub fn compose_two(b_s: &ImagePlane, b_d: &ImagePlane, m: &FusionMask) -> Result<ImagePlane> {
    let FusionMask::Single(m) = m else {
        return Err(Error::Contract("compose_two needs a single mask".into()));
    };
    check_same_size(b_s, b_d, "compose_two")?;
    contract!(m.height == b_s.height && m.width == b_s.width, "mask size mismatch");
    let plane = b_s.height * b_s.width;
    let data = (0..b_s.data.len())
        .map(|i| {
            let w = m.data[i % plane];
            b_s.data[i] * w + b_d.data[i] * (1.0 - w)
        })
        .collect();
    ImagePlane::new(data, b_s.channels, b_s.height, b_s.width, b_s.range)
}

/// Three-way blend of appearance output, exemplar and distortion image.
pub fn compose_three(b_a: &ImagePlane, e: &ImagePlane, t_a: &ImagePlane, m: &FusionMask) -> Result<ImagePlane> {
    let FusionMask::Dual(m1, m2) = m else {
        return Err(Error::Contract("compose_three needs a dual mask".into()));
    };
    check_same_size(b_a, e, "compose_three")?;
    check_same_size(b_a, t_a, "compose_three")?;
    contract!(m1.height == b_a.height && m1.width == b_a.width, "mask size mismatch");
    let plane = b_a.height * b_a.width;
    let mut data = Vec::with_capacity(b_a.data.len());
    for i in 0..b_a.data.len() {
        let (w1, w2) = (m1.data[i % plane], m2.data[i % plane]);
        contract!(w1 + w2 <= 1.0 + RANGE_SLACK, "m1 + m2 = {} > 1", w1 + w2);
        data.push(b_a.data[i] * w1 + e.data[i] * w2 + t_a.data[i] * (1.0 - w1 - w2));
    }
    ImagePlane::new(data, b_a.channels, b_a.height, b_a.width, b_a.range)
}

/// Which neighbor differences the TV regularizer sums.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TvMode {
    /// Horizontal neighbors only: `Σ (m[i,j−1] − m[i,j])² + (m[i,j+1] − m[i,j])²`.
    #[default]
    Literal,
    /// Adds the vertical analogue.
    Isotropic,
}

/// Total variation of a `[1, H, W]` (or `[H, W]`) mask tensor. Neighbors
/// outside the mask are skipped, so every interior difference is counted
/// once from each side.
pub fn tv_loss(m: &Tensor, mode: TvMode) -> Tensor {
    let m = match m.dims() {
        2 => m.reshape(&[1, m.shape()[0], m.shape()[1]]),
        3 => m.clone(),
        _ => panic!("tv_loss expects a [1, H, W] mask, got {:?}", m.shape()),
    };
    let (h, w) = (m.shape()[1], m.shape()[2]);
    let mut total = Tensor::scalar(0.0);
    if w > 1 {
        let d = m.narrow(2, 1, w - 1).sub(&m.narrow(2, 0, w - 1));
        total = total.add(&d.sqr().sum().scale(2.0));
    }
    if mode == TvMode::Isotropic && h > 1 {
        let d = m.narrow(1, 1, h - 1).sub(&m.narrow(1, 0, h - 1));
        total = total.add(&d.sqr().sum().scale(2.0));
    }
    total
}
