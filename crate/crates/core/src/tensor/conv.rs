//! 2-D convolution, transposed convolution and max pooling on `[C, H, W]`
//! tensors, lowered to GEMM through im2col.

use super::ops::gemm;
use super::Tensor;

/// Spatial arithmetic of a square-kernel convolution with zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    /// `floor((n + 2p - k) / s) + 1`
    pub fn out_extent(n: usize, kernel: usize, stride: usize, pad: usize) -> usize {
        assert!(n + 2 * pad >= kernel, "kernel {kernel} larger than padded input {n}+2*{pad}");
        (n + 2 * pad - kernel) / stride + 1
    }

    pub fn out_height(&self) -> usize {
        Self::out_extent(self.height, self.kernel, self.stride, self.pad)
    }

    pub fn out_width(&self) -> usize {
        Self::out_extent(self.width, self.kernel, self.stride, self.pad)
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// Unfolds `x: [C, H, W]` into `[C*k*k, Ho*Wo]`.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let (ho, wo) = (self.out_height(), self.out_width());
        let (h, w, k, s) = (self.height, self.width, self.kernel, self.stride);
        let p = self.pad as isize;
        let mut cols = vec![0.0; self.col_rows() * ho * wo];
        for c in 0..self.channels {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * s + ki) as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let drow = &mut dst[oy * wo..(oy + 1) * wo];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * s + kj) as isize - p;
                            if ix >= 0 && ix < w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`ConvGeometry::im2col`]: scatters-adds columns back into
    /// a `[C, H, W]` buffer.
    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let (ho, wo) = (self.out_height(), self.out_width());
        let (h, w, k, s) = (self.height, self.width, self.kernel, self.stride);
        let p = self.pad as isize;
        let mut x = vec![0.0; self.channels * h * w];
        for c in 0..self.channels {
            let plane = &mut x[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * s + ki) as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let drow = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..wo {
                            let ix = (ox * s + kj) as isize - p;
                            if ix >= 0 && ix < w as isize {
                                drow[ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

fn add_bias(out: &mut [f64], bias: &[f64], plane: usize) {
    for (o, &b) in bias.iter().enumerate() {
        out[o * plane..(o + 1) * plane].iter_mut().for_each(|v| *v += b);
    }
}

fn bias_grad(g: &[f64], channels: usize, plane: usize) -> Vec<f64> {
    (0..channels).map(|o| g[o * plane..(o + 1) * plane].iter().sum()).collect()
}

impl Tensor {
    /// Cross-correlation of `x: [C, H, W]` with `weight: [O, C, k, k]`.
    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
        assert_eq!(self.dims(), 3, "conv2d input must be [C, H, W], got {:?}", self.shape());
        let ws = weight.shape();
        assert_eq!(ws.len(), 4);
        assert_eq!(ws[2], ws[3], "square kernels only");
        assert_eq!(ws[1], self.shape()[0], "conv2d channel mismatch: weight {ws:?}, input {:?}", self.shape());
        let geo = ConvGeometry {
            channels: self.shape()[0],
            height: self.shape()[1],
            width: self.shape()[2],
            kernel: ws[2],
            stride,
            pad,
        };
        let out_ch = ws[0];
        let (ho, wo) = (geo.out_height(), geo.out_width());
        let (rows, ncols) = (geo.col_rows(), geo.col_cols());
        let cols = geo.im2col(self.data());
        let mut out = vec![0.0; out_ch * ncols];
        gemm(out_ch, rows, ncols, weight.data(), (rows, 1), &cols, (ncols, 1), &mut out, false);
        if let Some(b) = bias {
            assert_eq!(b.numel(), out_ch);
            add_bias(&mut out, b.data(), ncols);
        }
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        let (x, w, has_bias) = (self.clone(), weight.clone(), bias.is_some());
        let cols_keep = w.requires_grad().then_some(cols);
        Tensor::from_op(
            out,
            vec![out_ch, ho, wo],
            parents,
            Box::new(move |g| {
                let gx = x.requires_grad().then(|| {
                    // dcols = W^T G
                    let mut gcols = vec![0.0; rows * ncols];
                    gemm(rows, out_ch, ncols, w.data(), (1, rows), g, (ncols, 1), &mut gcols, false);
                    geo.col2im(&gcols)
                });
                let gw = cols_keep.as_ref().map(|cols| {
                    // dW = G cols^T
                    let mut gw = vec![0.0; out_ch * rows];
                    gemm(out_ch, ncols, rows, g, (ncols, 1), cols, (1, ncols), &mut gw, false);
                    gw
                });
                let mut res = vec![gx, gw];
                if has_bias {
                    res.push(Some(bias_grad(g, out_ch, ncols)));
                }
                res
            }),
        )
    }

    /// Transposed convolution of `x: [C, H, W]` with `weight: [C, O, k, k]`;
    /// the adjoint of `conv2d` with the same stride and padding. Output
    /// extent is `(n - 1)·s - 2p + k`.
    pub fn conv_transpose2d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        pad: usize,
    ) -> Tensor {
        assert_eq!(self.dims(), 3);
        let ws = weight.shape();
        assert_eq!(ws.len(), 4);
        assert_eq!(ws[0], self.shape()[0], "conv_transpose2d channel mismatch");
        let (cin, h, w_in) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (out_ch, k) = (ws[1], ws[2]);
        let hout = (h - 1) * stride + k - 2 * pad;
        let wout = (w_in - 1) * stride + k - 2 * pad;
        // Geometry of the forward conv that maps output-sized images back to
        // the input size.
        let geo = ConvGeometry { channels: out_ch, height: hout, width: wout, kernel: k, stride, pad };
        assert_eq!((geo.out_height(), geo.out_width()), (h, w_in), "inconsistent transposed-conv geometry");
        let rows = out_ch * k * k;
        let ncols = h * w_in;
        // cols = W_r^T x, W_r: [C, O*k*k]
        let mut cols = vec![0.0; rows * ncols];
        gemm(rows, cin, ncols, weight.data(), (1, rows), self.data(), (ncols, 1), &mut cols, false);
        let mut out = geo.col2im(&cols);
        drop(cols);
        if let Some(b) = bias {
            assert_eq!(b.numel(), out_ch);
            add_bias(&mut out, b.data(), hout * wout);
        }
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        let (x, wt, has_bias) = (self.clone(), weight.clone(), bias.is_some());
        Tensor::from_op(
            out,
            vec![out_ch, hout, wout],
            parents,
            Box::new(move |g| {
                let gcols = geo.im2col(g);
                let gx = x.requires_grad().then(|| {
                    let mut gx = vec![0.0; cin * ncols];
                    gemm(cin, rows, ncols, wt.data(), (rows, 1), &gcols, (ncols, 1), &mut gx, false);
                    gx
                });
                let gw = wt.requires_grad().then(|| {
                    // dW_r = x gcols^T : [C, O*k*k]
                    let mut gw = vec![0.0; cin * rows];
                    gemm(cin, ncols, rows, x.data(), (ncols, 1), &gcols, (1, ncols), &mut gw, false);
                    gw
                });
                let mut res = vec![gx, gw];
                if has_bias {
                    res.push(Some(bias_grad(g, out_ch, hout * wout)));
                }
                res
            }),
        )
    }

    /// Non-overlapping `size × size` max pooling (floor on odd extents).
    pub fn max_pool2d(&self, size: usize) -> Tensor {
        assert_eq!(self.dims(), 3);
        let (c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (ho, wo) = (h / size, w / size);
        let x = self.data();
        let mut out = vec![0.0; c * ho * wo];
        let mut arg = vec![0usize; c * ho * wo];
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut bi = 0;
                    for dy in 0..size {
                        for dx in 0..size {
                            let idx = ch * h * w + (oy * size + dy) * w + ox * size + dx;
                            if x[idx] > best {
                                best = x[idx];
                                bi = idx;
                            }
                        }
                    }
                    let o = (ch * ho + oy) * wo + ox;
                    out[o] = best;
                    arg[o] = bi;
                }
            }
        }
        let n = self.numel();
        Tensor::from_op(
            out,
            vec![c, ho, wo],
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; n];
                for (o, &i) in arg.iter().enumerate() {
                    gx[i] += g[o];
                }
                vec![Some(gx)]
            }),
        )
    }
}
