//! Fused layers with hand-written backward passes.

use super::ops::split_axis;
use super::Tensor;

/// Pixel offsets whose fractional part is within this distance of an
/// integer are sampled exactly at that integer.
const SNAP: f64 = 1e-9;

impl Tensor {
    /// Per-channel normalization of `[C, H, W]` over the spatial extent,
    /// without affine parameters.
    pub fn instance_norm(&self, eps: f64) -> Tensor {
        assert_eq!(self.dims(), 3);
        let c = self.shape()[0];
        let plane = self.shape()[1] * self.shape()[2];
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let xs = &x[ch * plane..(ch + 1) * plane];
            let mean = xs.iter().sum::<f64>() / plane as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / plane as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[ch] = is;
            for (o, v) in out[ch * plane..(ch + 1) * plane].iter_mut().zip(xs) {
                *o = (v - mean) * is;
            }
        }
        let y = out.clone();
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; g.len()];
                let n = plane as f64;
                for ch in 0..c {
                    let r = ch * plane..(ch + 1) * plane;
                    let (gs, ys) = (&g[r.clone()], &y[r.clone()]);
                    let mg = gs.iter().sum::<f64>() / n;
                    let mgy = gs.iter().zip(ys).map(|(a, b)| a * b).sum::<f64>() / n;
                    for ((o, &gi), &yi) in gx[r].iter_mut().zip(gs).zip(ys) {
                        *o = inv_std[ch] * (gi - mg - yi * mgy);
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Tensor {
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let mx = (0..len).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..len {
                    let e = (x[at(k)] - mx).exp();
                    out[at(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    out[at(k)] /= z;
                }
            }
        }
        let y = out.clone();
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| g[at(k)] * y[at(k)]).sum();
                        for k in 0..len {
                            gx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Log-softmax along `axis`.
    pub fn log_softmax(&self, axis: usize) -> Tensor {
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let mx = (0..len).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + (0..len).map(|k| (x[at(k)] - mx).exp()).sum::<f64>().ln();
                for k in 0..len {
                    out[at(k)] = x[at(k)] - lse;
                }
            }
        }
        let y = out.clone();
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let gs: f64 = (0..len).map(|k| g[at(k)]).sum();
                        for k in 0..len {
                            gx[at(k)] = g[at(k)] - y[at(k)].exp() * gs;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Bilinear resampling of `x: [C, H, W]` at `grid: [2, Ho, Wo]`.
    ///
    /// `grid[0]` is the horizontal and `grid[1]` the vertical source
    /// coordinate, both normalized so that -1 and 1 hit the centers of the
    /// first and last pixel. Coordinates outside that range are clamped to
    /// the border, where the gradient with respect to the grid is zero.
    pub fn grid_sample(&self, grid: &Tensor) -> Tensor {
        assert_eq!(self.dims(), 3, "grid_sample input must be [C, H, W]");
        assert!(grid.dims() == 3 && grid.shape()[0] == 2, "grid must be [2, Ho, Wo]");
        let (c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (ho, wo) = (grid.shape()[1], grid.shape()[2]);
        let npix = ho * wo;
        let gd = grid.data();
        let sx = (w - 1) as f64 / 2.0;
        let sy = (h - 1) as f64 / 2.0;

        // Per output pixel: corner indices, fractional weights, and whether
        // each axis was clamped.
        let mut taps = Vec::with_capacity(npix);
        for p in 0..npix {
            let (ix, fx, cx) = locate(gd[p], sx, w);
            let (iy, fy, cy) = locate(gd[npix + p], sy, h);
            taps.push(Tap { ix, iy, fx, fy, clamped_x: cx, clamped_y: cy });
        }
        let x = self.data();
        let mut out = vec![0.0; c * npix];
        for ch in 0..c {
            let plane = &x[ch * h * w..(ch + 1) * h * w];
            for (p, t) in taps.iter().enumerate() {
                out[ch * npix + p] = t.sample(plane, w, h);
            }
        }
        let (xc, gc) = (self.clone(), grid.clone());
        Tensor::from_op(
            out,
            vec![c, ho, wo],
            vec![self.clone(), grid.clone()],
            Box::new(move |g| {
                let gx = xc.requires_grad().then(|| {
                    let mut gx = vec![0.0; c * h * w];
                    for ch in 0..c {
                        let plane = &mut gx[ch * h * w..(ch + 1) * h * w];
                        for (p, t) in taps.iter().enumerate() {
                            t.scatter(plane, w, h, g[ch * npix + p]);
                        }
                    }
                    gx
                });
                let gg = gc.requires_grad().then(|| {
                    let x = xc.data();
                    let mut gg = vec![0.0; 2 * npix];
                    for ch in 0..c {
                        let plane = &x[ch * h * w..(ch + 1) * h * w];
                        for (p, t) in taps.iter().enumerate() {
                            let (dx, dy) = t.coord_grad(plane, w, h);
                            let gp = g[ch * npix + p];
                            gg[p] += gp * dx * sx;
                            gg[npix + p] += gp * dy * sy;
                        }
                    }
                    gg
                });
                vec![gx, gg]
            }),
        )
    }
}

struct Tap {
    ix: usize,
    iy: usize,
    fx: f64,
    fy: f64,
    clamped_x: bool,
    clamped_y: bool,
}

/// Maps a normalized coordinate to (lower index, fraction, clamped).
fn locate(coord: f64, half_extent: f64, n: usize) -> (usize, f64, bool) {
    if n == 1 {
        return (0, 0.0, true);
    }
    let max = (n - 1) as f64;
    let mut pos = (coord + 1.0) * half_extent;
    let clamped = !(0.0..=max).contains(&pos);
    pos = pos.clamp(0.0, max);
    let nearest = pos.round();
    if (pos - nearest).abs() < SNAP {
        pos = nearest;
    }
    let i0 = (pos.floor() as usize).min(n - 2);
    (i0, pos - i0 as f64, clamped)
}

impl Tap {
    fn corners(&self, w: usize, h: usize) -> (usize, usize) {
        let x1 = (self.ix + 1).min(w - 1);
        let y1 = (self.iy + 1).min(h - 1);
        (x1, y1)
    }

    fn sample(&self, plane: &[f64], w: usize, h: usize) -> f64 {
        let (x1, y1) = self.corners(w, h);
        let (x0, y0) = (self.ix, self.iy);
        let v00 = plane[y0 * w + x0];
        let v01 = plane[y0 * w + x1];
        let v10 = plane[y1 * w + x0];
        let v11 = plane[y1 * w + x1];
        let (fx, fy) = (self.fx, self.fy);
        // Exact corners keep identity grids bitwise exact.
        let top = if fx == 0.0 { v00 } else if fx == 1.0 { v01 } else { v00 * (1.0 - fx) + v01 * fx };
        let bot = if fx == 0.0 { v10 } else if fx == 1.0 { v11 } else { v10 * (1.0 - fx) + v11 * fx };
        if fy == 0.0 {
            top
        } else if fy == 1.0 {
            bot
        } else {
            top * (1.0 - fy) + bot * fy
        }
    }

    fn scatter(&self, plane: &mut [f64], w: usize, h: usize, g: f64) {
        let (x1, y1) = self.corners(w, h);
        let (x0, y0) = (self.ix, self.iy);
        let (fx, fy) = (self.fx, self.fy);
        plane[y0 * w + x0] += g * (1.0 - fx) * (1.0 - fy);
        plane[y0 * w + x1] += g * fx * (1.0 - fy);
        plane[y1 * w + x0] += g * (1.0 - fx) * fy;
        plane[y1 * w + x1] += g * fx * fy;
    }

    /// Derivative of the sample w.r.t. pixel-space (x, y).
    fn coord_grad(&self, plane: &[f64], w: usize, h: usize) -> (f64, f64) {
        let (x1, y1) = self.corners(w, h);
        let (x0, y0) = (self.ix, self.iy);
        let v00 = plane[y0 * w + x0];
        let v01 = plane[y0 * w + x1];
        let v10 = plane[y1 * w + x0];
        let v11 = plane[y1 * w + x1];
        let (fx, fy) = (self.fx, self.fy);
        let dx = if self.clamped_x { 0.0 } else { (1.0 - fy) * (v01 - v00) + fy * (v11 - v10) };
        let dy = if self.clamped_y { 0.0 } else { (1.0 - fx) * (v10 - v00) + fx * (v11 - v01) };
        (dx, dy)
    }
}
