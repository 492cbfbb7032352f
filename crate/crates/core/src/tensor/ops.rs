//! Elementwise, broadcasting, reduction and shape operations.

use super::{numel, Tensor};

/// Splits `shape` around `axis` into (outer, len, inner) extents.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(axis < shape.len(), "axis {axis} out of range for {shape:?}");
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    (0..n)
        .map(|i| {
            let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
            let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
            match (da, db) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => panic!("shapes {a:?} and {b:?} do not broadcast"),
            }
        })
        .collect()
}

/// Strides of `shape` laid out inside `out` (zero on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let n = out.len();
    let mut strides = vec![0; n];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + n - shape.len();
        strides[oi] = if shape[i] == 1 && out[oi] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Offsets into `a` and `b` for every element of the broadcast output.
fn broadcast_offsets(a: &[usize], b: &[usize], out: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let sa = broadcast_strides(a, out);
    let sb = broadcast_strides(b, out);
    let total = numel(out);
    let mut oa = Vec::with_capacity(total);
    let mut ob = Vec::with_capacity(total);
    let mut idx = vec![0usize; out.len()];
    let (mut pa, mut pb) = (0usize, 0usize);
    for _ in 0..total {
        oa.push(pa);
        ob.push(pb);
        for d in (0..out.len()).rev() {
            idx[d] += 1;
            pa += sa[d];
            pb += sb[d];
            if idx[d] < out[d] {
                break;
            }
            pa -= sa[d] * out[d];
            pb -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
    (oa, ob)
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
            BinOp::Mul => a * b,
            BinOp::Div => a / b,
        }
    }

    /// (d/da, d/db) scaled by upstream gradient g.
    fn grads(self, a: f64, b: f64, g: f64) -> (f64, f64) {
        match self {
            BinOp::Add => (g, g),
            BinOp::Sub => (g, -g),
            BinOp::Mul => (g * b, g * a),
            BinOp::Div => (g / b, -g * a / (b * b)),
        }
    }
}

fn binary(a: &Tensor, b: &Tensor, op: BinOp) -> Tensor {
    if a.shape() == b.shape() {
        let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(&x, &y)| op.apply(x, y)).collect();
        let (ac, bc) = (a.clone(), b.clone());
        return Tensor::from_op(
            data,
            a.shape().to_vec(),
            vec![a.clone(), b.clone()],
            Box::new(move |g| {
                let n = g.len();
                let mut ga = ac.requires_grad().then(|| vec![0.0; n]);
                let mut gb = bc.requires_grad().then(|| vec![0.0; n]);
                for i in 0..n {
                    let (da, db) = op.grads(ac.data()[i], bc.data()[i], g[i]);
                    if let Some(ga) = ga.as_mut() {
                        ga[i] = da;
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[i] = db;
                    }
                }
                vec![ga, gb]
            }),
        );
    }
    let out = broadcast_shape(a.shape(), b.shape());
    let (oa, ob) = broadcast_offsets(a.shape(), b.shape(), &out);
    let data: Vec<f64> = oa
        .iter()
        .zip(&ob)
        .map(|(&i, &j)| op.apply(a.data()[i], b.data()[j]))
        .collect();
    let (ac, bc) = (a.clone(), b.clone());
    Tensor::from_op(
        data,
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            let mut ga = ac.requires_grad().then(|| vec![0.0; ac.numel()]);
            let mut gb = bc.requires_grad().then(|| vec![0.0; bc.numel()]);
            for (k, &gk) in g.iter().enumerate() {
                let (i, j) = (oa[k], ob[k]);
                let (da, db) = op.grads(ac.data()[i], bc.data()[j], gk);
                if let Some(ga) = ga.as_mut() {
                    ga[i] += da;
                }
                if let Some(gb) = gb.as_mut() {
                    gb[j] += db;
                }
            }
            vec![ga, gb]
        }),
    )
}

/// Elementwise op given value function and derivative as a function of
/// (input, output).
fn unary(x: &Tensor, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Tensor {
    let data: Vec<f64> = x.data().iter().map(|&v| f(v)).collect();
    let xc = x.clone();
    let out = data.clone();
    Tensor::from_op(
        data,
        x.shape().to_vec(),
        vec![x.clone()],
        Box::new(move |g| {
            let gx = g
                .iter()
                .zip(xc.data())
                .zip(&out)
                .map(|((&gi, &xi), &yi)| gi * df(xi, yi))
                .collect();
            vec![Some(gx)]
        }),
    )
}

fn softplus(v: f64) -> f64 {
    if v > 0.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Tensor {
        binary(self, other, BinOp::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        binary(self, other, BinOp::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        binary(self, other, BinOp::Mul)
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        binary(self, other, BinOp::Div)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        unary(self, move |v| v + c, |_, _| 1.0)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        unary(self, move |v| v * c, move |_, _| c)
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    /// `c - self`
    pub fn rsub_scalar(&self, c: f64) -> Tensor {
        unary(self, move |v| c - v, |_, _| -1.0)
    }

    pub fn exp(&self) -> Tensor {
        unary(self, f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Tensor {
        unary(self, f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqr(&self) -> Tensor {
        unary(self, |v| v * v, |x, _| 2.0 * x)
    }

    pub fn sqrt(&self) -> Tensor {
        unary(self, f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn abs(&self) -> Tensor {
        unary(self, f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn tanh(&self) -> Tensor {
        unary(self, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&self) -> Tensor {
        unary(self, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn relu(&self) -> Tensor {
        unary(self, |v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        unary(
            self,
            move |v| if v > 0.0 { v } else { slope * v },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    /// `ln(1 + e^x)`, stable for large |x|.
    pub fn softplus(&self) -> Tensor {
        unary(self, softplus, |x, _| sigmoid(x))
    }

    pub fn sum(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(
            vec![s],
            vec![],
            vec![self.clone()],
            Box::new(move |g| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over `axis`, keeping it with extent 1.
    pub fn sum_axis(&self, axis: usize) -> Tensor {
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let row = &x[(o * len + k) * inner..(o * len + k + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = 1;
        Tensor::from_op(
            out,
            shape,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for k in 0..len {
                        gx[(o * len + k) * inner..(o * len + k + 1) * inner]
                            .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    pub fn mean_axis(&self, axis: usize) -> Tensor {
        let n = self.shape()[axis] as f64;
        self.sum_axis(axis).scale(1.0 / n)
    }

    /// Max over `axis` (kept with extent 1). Ties route the gradient to the
    /// first maximal entry.
    pub fn max_axis(&self, axis: usize) -> Tensor {
        self.extreme_axis(axis, |a, b| a > b)
    }

    pub fn min_axis(&self, axis: usize) -> Tensor {
        self.extreme_axis(axis, |a, b| a < b)
    }

    fn extreme_axis(&self, axis: usize, better: fn(f64, f64) -> bool) -> Tensor {
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut out = vec![0.0; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = x[o * len * inner + i];
                let mut bi = 0;
                for k in 1..len {
                    let v = x[(o * len + k) * inner + i];
                    if better(v, best) {
                        best = v;
                        bi = k;
                    }
                }
                out[o * inner + i] = best;
                arg[o * inner + i] = bi;
            }
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = 1;
        Tensor::from_op(
            out,
            shape,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        gx[(o * len + arg[o * inner + i]) * inner + i] += g[o * inner + i];
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(
            numel(shape),
            self.numel(),
            "cannot reshape {:?} into {:?}",
            self.shape(),
            shape
        );
        Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            Box::new(|g| vec![Some(g.to_vec())]),
        )
    }

    /// Transpose of a 2-D tensor.
    pub fn t(&self) -> Tensor {
        assert_eq!(self.dims(), 2, "t() needs a matrix");
        let (m, n) = (self.shape()[0], self.shape()[1]);
        let x = self.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x[i * n + j];
            }
        }
        Tensor::from_op(
            out,
            vec![n, m],
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        gx[i * n + j] = g[j * m + i];
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Concatenation along `axis`. All other extents must agree.
    pub fn cat(parts: &[Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty());
        let base = parts[0].shape().to_vec();
        for p in parts {
            assert_eq!(p.dims(), base.len());
            for (d, (&a, &b)) in p.shape().iter().zip(&base).enumerate() {
                assert!(d == axis || a == b, "cat: shape {:?} vs {:?}", p.shape(), base);
            }
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                out.extend_from_slice(&p.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Tensor::from_op(
            out,
            shape,
            parts.to_vec(),
            Box::new(move |g| {
                let mut grads: Vec<Vec<f64>> =
                    lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (gp, &l) in grads.iter_mut().zip(&lens) {
                        gp.extend_from_slice(&g[off..off + l * inner]);
                        off += l * inner;
                    }
                }
                grads.into_iter().map(Some).collect()
            }),
        )
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let (outer, full, inner) = split_axis(self.shape(), axis);
        assert!(start + len <= full, "narrow out of range");
        let x = self.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&x[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Tensor::from_op(
            out,
            shape,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    gx[(o * full + start) * inner..(o * full + start + len) * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Repeats a `[1, ...]` tensor `n` times along axis 0.
    pub fn repeat0(&self, n: usize) -> Tensor {
        assert_eq!(self.shape()[0], 1, "repeat0 needs leading extent 1");
        let parts: Vec<Tensor> = (0..n).map(|_| self.clone()).collect();
        Tensor::cat(&parts, 0)
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert!(self.dims() == 2 && other.dims() == 2, "matmul needs matrices");
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let (k2, n) = (other.shape()[0], other.shape()[1]);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(), (k, 1), other.data(), (n, 1), &mut out, false);
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(
            out,
            vec![m, n],
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                // dA = G B^T, dB = A^T G
                let ga = a.requires_grad().then(|| {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g, (n, 1), b.data(), (1, n), &mut ga, false);
                    ga
                });
                let gb = b.requires_grad().then(|| {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, a.data(), (1, k), g, (n, 1), &mut gb, false);
                    gb
                });
                vec![ga, gb]
            }),
        )
    }
}

/// `c (+)= a · b` with `a: [m, k]`, `b: [k, n]`, row-major `c`. Strides are
/// (row, col) in elements, so transposed operands need no copy.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths cover the strided extents of all three operands;
    // matrixmultiply only reads/writes inside those extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
