//! Saliency-based sampling layer.
//!
//! A small convolutional net predicts a saliency map at a coarse grid
//! resolution. The map turns into a warp grid by a saliency-weighted
//! Gaussian average of source coordinates:
//!
//! ```text
//! u(p) = Σ_q s(q) k(p, q) x(q) / Σ_q s(q) k(p, q)
//! v(p) = Σ_q s(q) k(p, q) y(q) / Σ_q s(q) k(p, q)
//! ```
//!
//! so that salient regions attract sampling positions and are magnified in
//! the warped output. Every step is differentiable, so the saliency net
//! trains end to end with the generator that consumes the warped image.
//!
//! The kernel is an isotropic Gaussian over normalized coordinates. Any
//! per-output renormalization of the kernel (e.g. by its in-bounds mass)
//! cancels in the ratio above and is therefore implicit.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::imagecore::{ImagePlane, ValueRange};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

/// Denominators below this are reported as degenerate.
const MIN_DENOMINATOR: f64 = 1e-12;
/// Allowed overshoot of grid coordinates past [-1, 1].
pub const GRID_SLACK: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Number of 3×3 conv blocks in the saliency net.
    pub depth: usize,
    /// Width of every block.
    pub channels: usize,
    /// Input resolution divided by grid resolution (power of two).
    pub downsample: usize,
    /// Gaussian bandwidth in normalized coordinates (image half-extent = 1).
    pub kernel_sigma: f64,
    /// Start from a zero head, i.e. a uniform saliency map.
    pub zero_init_head: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { depth: 4, channels: 16, downsample: 8, kernel_sigma: 0.3, zero_init_head: true }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kernel_sigma > 0.0 && self.kernel_sigma.is_finite()) {
            return Err(Error::Config(format!("sampler.kernel_sigma must be > 0, got {}", self.kernel_sigma)));
        }
        if !self.downsample.is_power_of_two() {
            return Err(Error::Config(format!("sampler.downsample must be a power of two, got {}", self.downsample)));
        }
        if self.strided_blocks() > self.depth {
            return Err(Error::Config(format!(
                "sampler.depth {} cannot reach downsample {}",
                self.depth, self.downsample
            )));
        }
        if self.channels == 0 {
            return Err(Error::Config("sampler.channels must be positive".into()));
        }
        Ok(())
    }

    fn strided_blocks(&self) -> usize {
        self.downsample.trailing_zeros() as usize
    }

    /// Coarse grid size for an input of `h × w`.
    pub fn grid_resolution(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let f = self.downsample;
        if h % f != 0 || w % f != 0 || h / f < 2 || w / f < 2 {
            return Err(Error::Config(format!("input {h}x{w} incompatible with sampler downsample {f}")));
        }
        Ok((h / f, w / f))
    }
}

/// Normalized saliency, `[1, h, w]`, positive and summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    values: Vec<f64>,
    height: usize,
    width: usize,
}

impl SaliencyMap {
    /// Normalizes arbitrary positive weights.
    pub fn from_weights(weights: Vec<f64>, height: usize, width: usize) -> Result<Self> {
        contract!(weights.len() == height * width, "saliency size mismatch");
        contract!(weights.iter().all(|v| *v > 0.0 && v.is_finite()), "saliency weights must be positive");
        let total: f64 = weights.iter().sum();
        let values = weights.iter().map(|v| v / total).collect();
        Ok(SaliencyMap { values, height, width })
    }

    pub fn uniform(height: usize, width: usize) -> Self {
        let n = height * width;
        SaliencyMap { values: vec![1.0 / n as f64; n], height, width }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.values.clone(), &[1, self.height, self.width])
    }
}

/// Source coordinates per output pixel, `[2, h, w]` (horizontal first).
#[derive(Debug, Clone, PartialEq)]
pub struct WarpGrid {
    coords: Vec<f64>,
    height: usize,
    width: usize,
}

impl WarpGrid {
    pub fn new(coords: Vec<f64>, height: usize, width: usize) -> Result<Self> {
        contract!(coords.len() == 2 * height * width, "grid size mismatch");
        for &c in &coords {
            contract!(c.is_finite(), "non-finite grid coordinate");
            contract!(c.abs() <= 1.0 + GRID_SLACK, "grid coordinate {c} outside [-1-ε, 1+ε]");
        }
        Ok(WarpGrid { coords, height, width })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        contract!(t.dims() == 3 && t.shape()[0] == 2, "grid tensor must be [2, h, w]");
        WarpGrid::new(t.to_vec(), t.shape()[1], t.shape()[2])
    }

    pub fn identity(height: usize, width: usize) -> Self {
        WarpGrid { coords: identity_coords(height, width), height, width }
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn u(&self, i: usize, j: usize) -> f64 {
        self.coords[i * self.width + j]
    }

    pub fn v(&self, i: usize, j: usize) -> f64 {
        self.coords[self.height * self.width + i * self.width + j]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.coords.clone(), &[2, self.height, self.width])
    }

    /// Area magnification `1 / |det J|` of each cell, where `J` is the
    /// Jacobian of the output→source map in normalized units. Identity
    /// grids give 1; values above 1 mean the source region is enlarged.
    pub fn cell_magnification(&self) -> Vec<f64> {
        let (h, w) = (self.height, self.width);
        let dx = 2.0 / (w - 1) as f64;
        let dy = 2.0 / (h - 1) as f64;
        let mut out = Vec::with_capacity((h - 1) * (w - 1));
        for i in 0..h - 1 {
            for j in 0..w - 1 {
                let du_dx = (self.u(i, j + 1) - self.u(i, j)) / dx;
                let du_dy = (self.u(i + 1, j) - self.u(i, j)) / dy;
                let dv_dx = (self.v(i, j + 1) - self.v(i, j)) / dx;
                let dv_dy = (self.v(i + 1, j) - self.v(i, j)) / dy;
                let det = du_dx * dv_dy - du_dy * dv_dx;
                out.push(1.0 / det.abs().max(1e-12));
            }
        }
        out
    }

    /// Mean magnification over cells whose centers fall in the central
    /// quarter of the image (the middle half along each axis).
    pub fn central_magnification(&self) -> f64 {
        let (h, w) = (self.height, self.width);
        let mag = self.cell_magnification();
        let (mut s, mut n) = (0.0, 0);
        for i in 0..h - 1 {
            for j in 0..w - 1 {
                let cy = -1.0 + 2.0 * (i as f64 + 0.5) / (h - 1) as f64;
                let cx = -1.0 + 2.0 * (j as f64 + 0.5) / (w - 1) as f64;
                if cy.abs() <= 0.5 && cx.abs() <= 0.5 {
                    s += mag[i * (w - 1) + j];
                    n += 1;
                }
            }
        }
        s / n.max(1) as f64
    }

    /// Count of adjacent pairs where a coordinate decreases along its own
    /// axis (u along rows, v along columns).
    pub fn foldover_count(&self) -> usize {
        let (h, w) = (self.height, self.width);
        let mut n = 0;
        for i in 0..h {
            for j in 0..w {
                if j + 1 < w && self.u(i, j + 1) < self.u(i, j) {
                    n += 1;
                }
                if i + 1 < h && self.v(i + 1, j) < self.v(i, j) {
                    n += 1;
                }
            }
        }
        n
    }
}

/// Normalized coordinate of index `i` among `n` samples (-1 … 1).
pub fn grid_coord(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (n - 1) as f64
    }
}

fn identity_coords(h: usize, w: usize) -> Vec<f64> {
    let mut c = vec![0.0; 2 * h * w];
    for i in 0..h {
        for j in 0..w {
            c[i * w + j] = grid_coord(j, w);
            c[h * w + i * w + j] = grid_coord(i, h);
        }
    }
    c
}

/// Gaussian affinities between all pairs of grid points, `[n, n]`.
fn kernel_matrix(h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let n = h * w;
    let pts: Vec<(f64, f64)> = (0..n).map(|p| (grid_coord(p % w, w), grid_coord(p / w, h))).collect();
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut k = vec![0.0; n * n];
    for (a, &(xa, ya)) in pts.iter().enumerate() {
        for (b, &(xb, yb)) in pts.iter().enumerate() {
            k[a * n + b] = (-((xa - xb).powi(2) + (ya - yb).powi(2)) * inv).exp();
        }
    }
    k
}

/// Differentiable saliency → grid transform on graph tensors.
/// `s` is `[1, h, w]`; returns `[2, h, w]`.
pub fn saliency_to_grid_t(s: &Tensor, sigma: f64) -> Result<Tensor> {
    contract!(s.dims() == 3 && s.shape()[0] == 1, "saliency must be [1, h, w], got {:?}", s.shape());
    let (h, w) = (s.shape()[1], s.shape()[2]);
    let n = h * w;
    let k = Tensor::new(kernel_matrix(h, w, sigma), &[n, n]);
    let coords = identity_coords(h, w);
    let xs = Tensor::new(coords[..n].to_vec(), &[n, 1]);
    let ys = Tensor::new(coords[n..].to_vec(), &[n, 1]);
    let s_col = s.reshape(&[n, 1]);
    let stacked = Tensor::cat(&[s_col.clone(), s_col.mul(&xs), s_col.mul(&ys)], 1);
    let sums = k.matmul(&stacked);
    let den = sums.narrow(1, 0, 1);
    let min_den = den.data().iter().cloned().fold(f64::INFINITY, f64::min);
    if !(min_den >= MIN_DENOMINATOR) {
        return Err(Error::Degenerate(format!("saliency kernel denominator {min_den:e} below {MIN_DENOMINATOR:e}")));
    }
    let u = sums.narrow(1, 1, 1).div(&den);
    let v = sums.narrow(1, 2, 1).div(&den);
    Ok(Tensor::cat(&[u, v], 1).t().reshape(&[2, h, w]))
}

/// Plain-value version of [`saliency_to_grid_t`].
pub fn saliency_to_grid(s: &SaliencyMap, cfg: &SamplerConfig) -> Result<WarpGrid> {
    cfg.validate()?;
    let g = saliency_to_grid_t(&s.to_tensor(), cfg.kernel_sigma)?;
    WarpGrid::from_tensor(&g)
}

/// Linear interpolation matrix `[out, inp]` with corner-aligned samples.
fn interp_matrix(out: usize, inp: usize) -> Vec<f64> {
    let mut a = vec![0.0; out * inp];
    for i in 0..out {
        if inp == 1 || out == 1 {
            a[i * inp] = 1.0;
            continue;
        }
        let pos = i as f64 * (inp - 1) as f64 / (out - 1) as f64;
        let i0 = (pos.floor() as usize).min(inp - 2);
        let f = pos - i0 as f64;
        a[i * inp + i0] += 1.0 - f;
        a[i * inp + i0 + 1] += f;
    }
    a
}

/// Bilinear, corner-aligned resize of `[C, h, w]` to `[C, out_h, out_w]`.
pub fn upsample_bilinear(t: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    if (h, w) == (out_h, out_w) {
        return t.clone();
    }
    let ah = Tensor::new(interp_matrix(out_h, h), &[out_h, h]);
    let awt = Tensor::new(interp_matrix(out_w, w), &[out_w, w]).t();
    let planes: Vec<Tensor> = (0..c)
        .map(|ch| {
            let p = t.narrow(0, ch, 1).reshape(&[h, w]);
            ah.matmul(&p).matmul(&awt).reshape(&[1, out_h, out_w])
        })
        .collect();
    Tensor::cat(&planes, 0)
}

/// Resamples `x: [C, H, W]` at `grid`, upsampling a coarser grid to the
/// input resolution first. Out-of-range coordinates clamp to the border.
pub fn warp_t(x: &Tensor, grid: &Tensor) -> Tensor {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let full = upsample_bilinear(grid, h, w);
    x.grid_sample(&full)
}

pub fn warp(x: &ImagePlane, g: &WarpGrid) -> Result<ImagePlane> {
    ImagePlane::from_tensor(&warp_t(&x.to_tensor(), &g.to_tensor()), x.range())
}

/// Intermediates of one sampler pass.
pub struct SamplerOutput {
    pub saliency: Tensor,
    pub grid: Tensor,
    pub warped: Tensor,
}

/// The saliency predictor plus its grid construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencySampler {
    pub config: SamplerConfig,
    pub in_channels: usize,
    pub params: ParamStore,
}

impl SaliencySampler {
    pub fn new<R: Rng>(config: SamplerConfig, in_channels: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut cin = in_channels;
        for b in 0..config.depth {
            let fan_in = (cin * 9) as f64;
            params.insert_normal(format!("block{b}.weight"), &[config.channels, cin, 3, 3], (2.0 / fan_in).sqrt(), rng);
            params.insert_zeros(format!("block{b}.bias"), &[config.channels]);
            cin = config.channels;
        }
        if config.zero_init_head {
            params.insert_zeros("head.weight", &[1, cin, 1, 1]);
        } else {
            params.insert_normal("head.weight", &[1, cin, 1, 1], (1.0 / cin as f64).sqrt(), rng);
        }
        params.insert_zeros("head.bias", &[1]);
        Ok(SaliencySampler { config, in_channels, params })
    }

    /// Saliency logits → spatial softmax, `[1, h, w]`.
    pub fn saliency_t(&self, p: &Bound, x: &Tensor) -> Result<Tensor> {
        contract!(
            x.dims() == 3 && x.shape()[0] == self.in_channels,
            "sampler expects {} input channels, got {:?}",
            self.in_channels,
            x.shape()
        );
        let (gh, gw) = self.config.grid_resolution(x.shape()[1], x.shape()[2])?;
        let strided = self.config.strided_blocks();
        let mut hcur = x.clone();
        for b in 0..self.config.depth {
            let stride = if b < strided { 2 } else { 1 };
            hcur = hcur
                .conv2d(p.get(&format!("block{b}.weight")), Some(p.get(&format!("block{b}.bias"))), stride, 1)
                .leaky_relu(0.2);
        }
        let logits = hcur.conv2d(p.get("head.weight"), Some(p.get("head.bias")), 1, 0);
        debug_assert_eq!(logits.shape(), &[1, gh, gw]);
        Ok(logits.reshape(&[gh * gw]).softmax(0).reshape(&[1, gh, gw]))
    }

    /// Full pass: saliency, grid, and the warped input.
    pub fn forward(&self, p: &Bound, x: &Tensor) -> Result<SamplerOutput> {
        let saliency = self.saliency_t(p, x)?;
        let grid = saliency_to_grid_t(&saliency, self.config.kernel_sigma)?;
        let warped = warp_t(x, &grid);
        Ok(SamplerOutput { saliency, grid, warped })
    }

    pub fn predict_saliency(&self, x: &ImagePlane) -> Result<SaliencyMap> {
        contract!(x.range() == ValueRange::SignedUnit, "sampler input must be a signed-unit image");
        let s = self.saliency_t(&self.params.bind(false), &x.to_tensor())?;
        Ok(SaliencyMap { values: s.to_vec(), height: s.shape()[1], width: s.shape()[2] })
    }
}

/// Checkerboard with `cells` squares per side, warped by `g` and laid over
/// `base` at 50% opacity.
pub fn checkerboard_overlay(base: &ImagePlane, g: &WarpGrid, cells: usize) -> Result<ImagePlane> {
    let (h, w) = (base.height(), base.width());
    let mut board = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let v = if ((y * cells / h) + (x * cells / w)) % 2 == 0 { 1.0 } else { -1.0 };
            for c in 0..3 {
                board[(c * h + y) * w + x] = v;
            }
        }
    }
    let board = ImagePlane::new(board, 3, h, w, ValueRange::SignedUnit)?;
    let warped = warp(&board, g)?;
    let base = base.to_rgb_display();
    let data = base.data().iter().zip(warped.data()).map(|(a, b)| 0.5 * a + 0.5 * b).collect();
    ImagePlane::new(data, 3, h, w, ValueRange::SignedUnit)
}
