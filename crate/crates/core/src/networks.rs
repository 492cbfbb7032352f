//! U-Net generators and PatchGAN discriminators.
//!
//! Layouts follow the usual pix2pix conventions: 4×4 stride-2 convolutions
//! down, 4×4 stride-2 transposed convolutions up with skip concatenation,
//! instance normalization everywhere except the outermost and innermost
//! layers, LeakyReLU(0.2) in the encoder and ReLU in the decoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::params::{standard_normal, Bound, ParamStore};
use crate::tensor::{ConvGeometry, Tensor};

const INIT_STD: f64 = 0.02;
const NORM_EPS: f64 = 1e-5;
const SN_WARMUP: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalActivation {
    /// Images in (-1, 1); three channels.
    Tanh,
    /// One mask in (0, 1).
    Sigmoid,
    /// Three channels on the probability simplex; the first two are the
    /// masks of a dual blend, so their sum never exceeds one.
    Simplex,
}

impl FinalActivation {
    pub fn out_channels(self) -> usize {
        match self {
            FinalActivation::Tanh | FinalActivation::Simplex => 3,
            FinalActivation::Sigmoid => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub depth: usize,
    pub base_width: usize,
    pub final_activation: FinalActivation,
}

impl UNetSpec {
    pub fn new(in_channels: usize, depth: usize, base_width: usize, final_activation: FinalActivation) -> Self {
        UNetSpec { in_channels, out_channels: final_activation.out_channels(), depth, base_width, final_activation }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_width == 0 || self.in_channels == 0 {
            return Err(Error::Config("U-Net depth, width and input channels must be positive".into()));
        }
        if self.out_channels != self.final_activation.out_channels() {
            return Err(Error::Config(format!(
                "U-Net with {:?} output needs {} channels, spec has {}",
                self.final_activation,
                self.final_activation.out_channels(),
                self.out_channels
            )));
        }
        Ok(())
    }

    /// Feature width at encoder level `k` (1-based), capped at 8× base.
    fn width(&self, k: usize) -> usize {
        self.base_width * (1usize << (k - 1)).min(8)
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        contract!(x.dims() == 3, "U-Net input must be [C, H, W], got {:?}", x.shape());
        contract!(
            x.shape()[0] == self.in_channels,
            "U-Net expects {} input channels, got {}",
            self.in_channels,
            x.shape()[0]
        );
        let stride = 1usize << self.depth;
        let (h, w) = (x.shape()[1], x.shape()[2]);
        if h % stride != 0 || w % stride != 0 {
            return Err(Error::Config(format!(
                "input {h}x{w} is not divisible by 2^{} = {stride}",
                self.depth
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UNet {
    pub spec: UNetSpec,
    pub params: ParamStore,
}

impl UNet {
    pub fn new<R: Rng>(spec: UNetSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut p = ParamStore::new();
        let mut cin = spec.in_channels;
        for k in 1..=spec.depth {
            let cout = spec.width(k);
            p.insert_normal(format!("enc{k}.weight"), &[cout, cin, 4, 4], INIT_STD, rng);
            p.insert_zeros(format!("enc{k}.bias"), &[cout]);
            cin = cout;
        }
        for k in (1..=spec.depth).rev() {
            let cin = if k == spec.depth { spec.width(k) } else { 2 * spec.width(k) };
            let cout = if k == 1 { spec.out_channels } else { spec.width(k - 1) };
            p.insert_normal(format!("dec{k}.weight"), &[cin, cout, 4, 4], INIT_STD, rng);
            p.insert_zeros(format!("dec{k}.bias"), &[cout]);
        }
        Ok(UNet { spec, params: p })
    }

    pub fn bind(&self, trainable: bool) -> Bound {
        self.params.bind(trainable)
    }

    pub fn forward(&self, p: &Bound, x: &Tensor) -> Result<Tensor> {
        self.spec.check_input(x)?;
        let depth = self.spec.depth;
        let mut skips = Vec::with_capacity(depth);
        let mut h = x.clone();
        for k in 1..=depth {
            if k > 1 {
                h = h.leaky_relu(0.2);
            }
            h = h.conv2d(p.get(&format!("enc{k}.weight")), Some(p.get(&format!("enc{k}.bias"))), 2, 1);
            if k > 1 && k < depth {
                h = h.instance_norm(NORM_EPS);
            }
            skips.push(h.clone());
        }
        let mut d = skips.pop().expect("depth >= 1");
        for k in (1..=depth).rev() {
            let y = d.relu().conv_transpose2d(
                p.get(&format!("dec{k}.weight")),
                Some(p.get(&format!("dec{k}.bias"))),
                2,
                1,
            );
            if k > 1 {
                let skip = skips.pop().expect("one skip per level");
                d = Tensor::cat(&[y.instance_norm(NORM_EPS), skip], 0);
            } else {
                d = y;
            }
        }
        Ok(match self.spec.final_activation {
            FinalActivation::Tanh => d.tanh(),
            FinalActivation::Sigmoid => d.sigmoid(),
            FinalActivation::Simplex => d.softmax(0),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchDiscSpec {
    /// Condition channels plus image channels.
    pub in_channels: usize,
    /// Number of stride-2 layers.
    pub n_layers: usize,
    pub base_width: usize,
    pub spectral_norm: bool,
    /// Number of classes of the auxiliary label head, if any.
    pub aux_classes: Option<usize>,
}

impl PatchDiscSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.base_width == 0 || self.in_channels == 0 {
            return Err(Error::Config("discriminator layers, width and channels must be positive".into()));
        }
        if let Some(c) = self.aux_classes {
            if c != 4 {
                return Err(Error::Config(format!("auxiliary head must have 4 classes, got {c}")));
            }
        }
        Ok(())
    }

    fn width(&self, n: usize) -> usize {
        self.base_width * (1usize << n).min(8)
    }

    /// Side length of the score map for a square input of side `n`:
    /// `n_layers` applications of `⌊(n + 2 − 4)/2⌋ + 1`, then two of
    /// `⌊(n + 2 − 4)/1⌋ + 1` (each shrinks the map by one).
    pub fn score_size(&self, n: usize) -> usize {
        let mut s = n;
        for _ in 0..self.n_layers {
            s = ConvGeometry::out_extent(s, 4, 2, 1);
        }
        for _ in 0..2 {
            s = ConvGeometry::out_extent(s, 4, 1, 1);
        }
        s
    }
}

/// Scores and optional class logits of one discriminator call.
pub struct DiscOutput {
    pub scores: Tensor,
    pub logits: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchDisc {
    pub spec: PatchDiscSpec,
    pub params: ParamStore,
}

fn conv_names(spec: &PatchDiscSpec) -> Vec<String> {
    (0..=spec.n_layers + 1).map(|i| format!("conv{i}")).collect()
}

impl PatchDisc {
    pub fn new<R: Rng>(spec: PatchDiscSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut p = ParamStore::new();
        let mut cin = spec.in_channels;
        for (i, name) in conv_names(&spec).iter().enumerate() {
            let cout = if i == spec.n_layers + 1 { 1 } else { spec.width(i) };
            p.insert_normal(format!("{name}.weight"), &[cout, cin, 4, 4], INIT_STD, rng);
            p.insert_zeros(format!("{name}.bias"), &[cout]);
            if spec.spectral_norm {
                let mut u: Vec<f64> = (0..cout).map(|_| standard_normal(rng)).collect();
                normalize(&mut u);
                p.insert(format!("{name}.sn_u"), &[cout], u, false);
            }
            cin = cout;
        }
        if let Some(classes) = spec.aux_classes {
            let feat = spec.width(spec.n_layers);
            p.insert_normal("aux.weight", &[classes, feat], INIT_STD, rng);
            p.insert_zeros("aux.bias", &[classes]);
        }
        let mut d = PatchDisc { spec, params: p };
        // Warm start the power iteration so σ is usable from the first step.
        d.refresh_spectral(SN_WARMUP);
        Ok(d)
    }

    pub fn bind(&self, trainable: bool) -> Bound {
        self.params.bind(trainable)
    }

    /// Weight of conv `name`, divided by its spectral-norm estimate when
    /// enabled. The estimate `σ = uᵀ W v` uses the stored `u` and
    /// `v = Wᵀu / ‖Wᵀu‖`; gradients flow through `σ`.
    fn weight(&self, p: &Bound, name: &str) -> Tensor {
        let w = p.get(&format!("{name}.weight"));
        if !self.spec.spectral_norm {
            return w.clone();
        }
        let u = p.get(&format!("{name}.sn_u"));
        let (rows, cols) = matrix_dims(w.shape());
        let mut v = vec![0.0; cols];
        mat_t_vec(w.data(), rows, cols, u.data(), &mut v);
        normalize(&mut v);
        let wm = w.reshape(&[rows, cols]);
        let wv = wm.matmul(&Tensor::new(v, &[cols, 1]));
        let sigma = wv.mul(&u.reshape(&[rows, 1])).sum();
        w.div(&sigma)
    }

    pub fn forward(&self, p: &Bound, condition: &Tensor, image: &Tensor) -> Result<DiscOutput> {
        contract!(
            condition.dims() == 3 && image.dims() == 3 && condition.shape()[1..] == image.shape()[1..],
            "condition {:?} and image {:?} differ in spatial size",
            condition.shape(),
            image.shape()
        );
        contract!(
            condition.shape()[0] + image.shape()[0] == self.spec.in_channels,
            "discriminator expects {} channels, got {} + {}",
            self.spec.in_channels,
            condition.shape()[0],
            image.shape()[0]
        );
        self.trunk(p, Tensor::cat(&[condition.clone(), image.clone()], 0))
    }

    /// Unconditional call on an image alone, for discriminators built with
    /// `in_channels` equal to the image channels.
    pub fn forward_image(&self, p: &Bound, image: &Tensor) -> Result<DiscOutput> {
        contract!(
            image.dims() == 3 && image.shape()[0] == self.spec.in_channels,
            "discriminator expects {} channels, got {:?}",
            self.spec.in_channels,
            image.shape()
        );
        self.trunk(p, image.clone())
    }

    fn trunk(&self, p: &Bound, input: Tensor) -> Result<DiscOutput> {
        let n = self.spec.n_layers;
        let mut h = input;
        let mut features = None;
        for (i, name) in conv_names(&self.spec).iter().enumerate() {
            let stride = if i < n { 2 } else { 1 };
            h = h.conv2d(&self.weight(p, name), Some(p.get(&format!("{name}.bias"))), stride, 1);
            if i == n + 1 {
                break;
            }
            if i > 0 && !self.spec.spectral_norm {
                h = h.instance_norm(NORM_EPS);
            }
            h = h.leaky_relu(0.2);
            if i == n {
                features = Some(h.clone());
            }
        }
        let logits = match (self.spec.aux_classes, features) {
            (Some(classes), Some(f)) => {
                let c = f.shape()[0];
                let pooled = f.reshape(&[c, f.numel() / c]).mean_axis(1);
                let z = p.get("aux.weight").matmul(&pooled).reshape(&[classes]).add(p.get("aux.bias"));
                Some(z)
            }
            _ => None,
        };
        Ok(DiscOutput { scores: h, logits })
    }

    /// Advances the power iteration of every normalized weight.
    pub fn refresh_spectral(&mut self, iterations: usize) {
        if !self.spec.spectral_norm {
            return;
        }
        for name in conv_names(&self.spec) {
            let w = self.params.get(&format!("{name}.weight")).expect("weight").clone();
            let (rows, cols) = matrix_dims(&w.shape);
            let u_entry = self.params.get_mut(&format!("{name}.sn_u")).expect("sn_u");
            power_iterate(&w.data, rows, cols, &mut u_entry.data, iterations);
        }
    }

    /// Current σ estimate for conv `name` (testing and diagnostics).
    pub fn spectral_estimate(&self, name: &str) -> Option<f64> {
        let w = self.params.get(&format!("{name}.weight"))?;
        let u = self.params.get(&format!("{name}.sn_u"))?;
        let (rows, cols) = matrix_dims(&w.shape);
        let mut v = vec![0.0; cols];
        mat_t_vec(&w.data, rows, cols, &u.data, &mut v);
        normalize(&mut v);
        let mut wv = vec![0.0; rows];
        mat_vec(&w.data, rows, cols, &v, &mut wv);
        Some(wv.iter().zip(&u.data).map(|(a, b)| a * b).sum())
    }

    pub fn conv_layer_names(&self) -> Vec<String> {
        conv_names(&self.spec)
    }
}

fn matrix_dims(shape: &[usize]) -> (usize, usize) {
    (shape[0], shape[1..].iter().product())
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= n);
}

fn mat_vec(w: &[f64], rows: usize, cols: usize, v: &[f64], out: &mut [f64]) {
    for r in 0..rows {
        out[r] = w[r * cols..(r + 1) * cols].iter().zip(v).map(|(a, b)| a * b).sum();
    }
}

fn mat_t_vec(w: &[f64], rows: usize, cols: usize, u: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|x| *x = 0.0);
    for r in 0..rows {
        let ur = u[r];
        for (o, a) in out.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
            *o += a * ur;
        }
    }
}

/// `u ← W Wᵀ u / ‖·‖`, `iterations` times.
pub(crate) fn power_iterate(w: &[f64], rows: usize, cols: usize, u: &mut [f64], iterations: usize) {
    let mut v = vec![0.0; cols];
    for _ in 0..iterations {
        mat_t_vec(w, rows, cols, u, &mut v);
        normalize(&mut v);
        mat_vec(w, rows, cols, &v, u);
        normalize(u);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check, spread_indices};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_input(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new((0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect(), &[c, h, w])
    }

    #[test]
    fn unet_shapes_and_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = UNet::new(UNetSpec::new(3, 4, 8, FinalActivation::Tanh), &mut rng).unwrap();
        let y = net.forward(&net.bind(false), &rand_input(3, 64, 64, 2)).unwrap();
        assert_eq!(y.shape(), &[3, 64, 64]);
        assert!(y.data().iter().all(|v| v.abs() < 1.0));

        let net = UNet::new(UNetSpec::new(9, 3, 8, FinalActivation::Simplex), &mut rng).unwrap();
        let y = net.forward(&net.bind(false), &rand_input(9, 32, 32, 3)).unwrap();
        let plane = 32 * 32;
        for i in 0..plane {
            let (a, b, c) = (y.data()[i], y.data()[plane + i], y.data()[2 * plane + i]);
            assert!(a >= 0.0 && b >= 0.0 && c >= 0.0);
            assert!((a + b + c - 1.0).abs() < 1e-12);
        }

        let net = UNet::new(UNetSpec::new(6, 3, 8, FinalActivation::Sigmoid), &mut rng).unwrap();
        let y = net.forward(&net.bind(false), &rand_input(6, 16, 16, 4).scale(1e3)).unwrap();
        assert_eq!(y.shape(), &[1, 16, 16]);
        assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn unet_rejects_indivisible_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = UNet::new(UNetSpec::new(3, 4, 4, FinalActivation::Tanh), &mut rng).unwrap();
        let err = net.forward(&net.bind(false), &rand_input(3, 40, 40, 2)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let bad = UNetSpec { out_channels: 2, ..UNetSpec::new(3, 2, 4, FinalActivation::Tanh) };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn unet_is_deterministic() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            UNet::new(UNetSpec::new(3, 3, 4, FinalActivation::Tanh), &mut rng).unwrap()
        };
        let x = rand_input(3, 16, 16, 1);
        let (a, b) = (build(), build());
        assert_eq!(a.forward(&a.bind(false), &x).unwrap().data(), b.forward(&b.bind(false), &x).unwrap().data());
    }

    #[test]
    fn unet_parameter_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut net = UNet::new(UNetSpec::new(3, 2, 4, FinalActivation::Tanh), &mut rng).unwrap();
        // Larger weights so that activations are not all in the linear regime.
        let names: Vec<String> = net.params.iter().map(|(k, _)| k.clone()).collect();
        for n in &names {
            for v in &mut net.params.get_mut(n).unwrap().data {
                *v = *v * 10.0 + 0.01;
            }
        }
        let x = rand_input(3, 16, 16, 11);
        let target = rand_input(3, 16, 16, 12);
        // 50 coordinates spread over all parameter arrays.
        let mut worst = 0.0f64;
        let mut probed = 0;
        for (i, name) in names.iter().enumerate() {
            let e = net.params.get(name).unwrap().clone();
            let count = if i + 1 == names.len() { 50 - probed } else { 50 / names.len() };
            probed += count;
            let probe = spread_indices(e.data.len(), count, i as u64);
            let f = |t: &[Tensor]| {
                let p = net.params.bind(false).replace(name, t[0].clone());
                net.forward(&p, &x).unwrap().sub(&target).sqr().mean()
            };
            let r = check(f, &[(e.data.clone(), e.shape.clone())], 0, &probe, 1e-6);
            worst = worst.max(r.relative_error());
        }
        assert!(worst < 1e-3, "worst relative error {worst}");
    }

    fn disc(spectral: bool, aux: bool) -> PatchDisc {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let spec = PatchDiscSpec {
            in_channels: 6,
            n_layers: 3,
            base_width: 8,
            spectral_norm: spectral,
            aux_classes: aux.then_some(4),
        };
        PatchDisc::new(spec, &mut rng).unwrap()
    }

    #[test]
    fn disc_score_map_size_follows_layer_arithmetic() {
        let d = disc(false, false);
        let out = d.forward(&d.bind(false), &rand_input(3, 64, 64, 1), &rand_input(3, 64, 64, 2)).unwrap();
        // 64 → 32 → 16 → 8 (stride 2), then 8 → 7 → 6 (stride 1, k=4, p=1).
        assert_eq!(d.spec.score_size(64), 6);
        assert_eq!(out.scores.shape(), &[1, 6, 6]);
        assert!(out.logits.is_none());

        let d = disc(true, true);
        let out = d.forward(&d.bind(false), &rand_input(3, 32, 32, 1), &rand_input(3, 32, 32, 2)).unwrap();
        assert_eq!(out.scores.shape(), &[1, 2, 2]);
        assert_eq!(out.logits.unwrap().shape(), &[4]);
    }

    #[test]
    fn disc_rejects_size_mismatch() {
        let d = disc(false, false);
        let r = d.forward(&d.bind(false), &rand_input(3, 64, 64, 1), &rand_input(3, 32, 32, 2));
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    /// Top singular value by many rounds of power iteration on WᵀW.
    fn top_singular(w: &[f64], rows: usize, cols: usize) -> f64 {
        let mut u = vec![1.0; rows];
        power_iterate(w, rows, cols, &mut u, 500);
        let mut v = vec![0.0; cols];
        mat_t_vec(w, rows, cols, &u, &mut v);
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn spectral_normalized_weights_have_unit_norm() {
        let mut d = disc(true, false);
        d.refresh_spectral(5);
        let b = d.bind(false);
        for name in d.conv_layer_names() {
            let w = d.weight(&b, &name);
            let (rows, cols) = matrix_dims(w.shape());
            let s = top_singular(w.data(), rows, cols);
            assert!((0.95..=1.05).contains(&s), "{name}: top singular value {s}");
        }
    }

    #[test]
    fn spectral_weight_gradients() {
        let d = disc(true, true);
        let c = rand_input(3, 32, 32, 5);
        let x = rand_input(3, 32, 32, 6);
        let name = "conv1.weight";
        let e = d.params.get(name).unwrap().clone();
        let f = |t: &[Tensor]| {
            let p = d.params.bind(false).replace(name, t[0].clone());
            let o = d.forward(&p, &c, &x).unwrap();
            o.scores.tanh().mean().add(&o.logits.unwrap().sqr().sum())
        };
        let probe = spread_indices(e.data.len(), 30, 1);
        let r = check(f, &[(e.data.clone(), e.shape.clone())], 0, &probe, 1e-6);
        assert!(r.relative_error() < 1e-4, "{}", r.relative_error());
    }
}
