//! Frozen convolutional feature network with named layer taps.

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{contract, Error, Result};
use crate::params::{standard_normal, Bound, ParamStore};
use crate::tensor::Tensor;

/// Environment variable naming the directory that holds `vgg19.ckpt`.
pub const CACHE_ENV: &str = "DRAFTNET_CACHE";
pub const PRETRAINED_FILE: &str = "vgg19.ckpt";

/// VGG19 convolutions up to conv4_2 (the deepest tap any loss reads).
const VGG19: &[(&str, usize)] = &[
    ("conv1_1", 64),
    ("conv1_2", 64),
    ("pool", 0),
    ("conv2_1", 128),
    ("conv2_2", 128),
    ("pool", 0),
    ("conv3_1", 256),
    ("conv3_2", 256),
    ("conv3_3", 256),
    ("conv3_4", 256),
    ("pool", 0),
    ("conv4_1", 512),
    ("conv4_2", 512),
];

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum ExtractorMode {
    /// ImageNet weights from `$DRAFTNET_CACHE/vgg19.ckpt`.
    Pretrained,
    /// He-initialized weights drawn from `seed`; hermetic.
    FixedRandom { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorConfig {
    pub mode: ExtractorMode,
    /// Channel widths are the VGG19 widths divided by this.
    pub width_divisor: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig { mode: ExtractorMode::FixedRandom { seed: 19 }, width_divisor: 8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Stage {
    Conv { name: String, kernel: usize, relu: bool },
    Pool,
}

#[derive(Debug, Clone)]
pub struct PerceptualExtractor {
    stages: Vec<Stage>,
    params: ParamStore,
    bound: std::rc::Rc<Bound>,
    imagenet_input: bool,
    perceptual_taps: Vec<String>,
}

impl PerceptualExtractor {
    pub fn from_config(cfg: &ExtractorConfig) -> Result<Self> {
        match cfg.mode {
            ExtractorMode::FixedRandom { seed } => Self::vgg19_random(cfg.width_divisor, seed),
            ExtractorMode::Pretrained => {
                if cfg.width_divisor != 1 {
                    return Err(Error::Config("pretrained extractor requires width_divisor = 1".into()));
                }
                let dir = std::env::var_os(CACHE_ENV).ok_or_else(|| {
                    Error::Config(format!("pretrained extractor needs ${CACHE_ENV} pointing at {PRETRAINED_FILE}"))
                })?;
                Self::vgg19_pretrained(&PathBuf::from(dir).join(PRETRAINED_FILE))
            }
        }
    }

    pub fn vgg19_random(width_divisor: usize, seed: u64) -> Result<Self> {
        if width_divisor == 0 || 64 % width_divisor != 0 {
            return Err(Error::Config(format!("width_divisor {width_divisor} must divide 64")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut stages = Vec::new();
        let mut cin = 3;
        for &(name, width) in VGG19 {
            if name == "pool" {
                stages.push(Stage::Pool);
                continue;
            }
            let cout = width / width_divisor;
            he_conv(&mut params, name, cout, cin, 3, &mut rng);
            stages.push(Stage::Conv { name: name.into(), kernel: 3, relu: true });
            cin = cout;
        }
        Ok(Self::assemble(stages, params, false, vgg_perceptual_taps()))
    }

    /// Loads full-width VGG19 weights stored as `conv{b}_{i}.weight/.bias`.
    pub fn vgg19_pretrained(path: &std::path::Path) -> Result<Self> {
        let archive = checkpoint::load(path)?;
        let mut params = ParamStore::new();
        let mut stages = Vec::new();
        let mut cin = 3;
        for &(name, width) in VGG19 {
            if name == "pool" {
                stages.push(Stage::Pool);
                continue;
            }
            for (suffix, shape) in [("weight", vec![width, cin, 3, 3]), ("bias", vec![width])] {
                let key = format!("{name}.{suffix}");
                let e = archive
                    .tensors
                    .get(&key)
                    .ok_or_else(|| Error::Config(format!("{}: missing `{key}`", path.display())))?;
                if e.shape != shape {
                    return Err(Error::Config(format!("{}: `{key}` has shape {:?}", path.display(), e.shape)));
                }
                params.insert(key, &shape, e.data.clone(), false);
            }
            stages.push(Stage::Conv { name: name.into(), kernel: 3, relu: true });
            cin = width;
        }
        Ok(Self::assemble(stages, params, true, vgg_perceptual_taps()))
    }

    /// One convolution named `conv1`, optionally followed by ReLU. A 1×1
    /// kernel gives per-pixel features; no ReLU gives a linear map.
    pub fn single_layer(in_channels: usize, out_channels: usize, kernel: usize, relu: bool, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        he_conv(&mut params, "conv1", out_channels, in_channels, kernel, &mut rng);
        let stages = vec![Stage::Conv { name: "conv1".into(), kernel, relu }];
        Self::assemble(stages, params, false, vec!["conv1".into()])
    }

    fn assemble(stages: Vec<Stage>, params: ParamStore, imagenet_input: bool, taps: Vec<String>) -> Self {
        let bound = std::rc::Rc::new(params.bind(false));
        PerceptualExtractor { stages, params, bound, imagenet_input, perceptual_taps: taps }
    }

    pub fn perceptual_taps(&self) -> &[String] {
        &self.perceptual_taps
    }

    pub fn has_layer(&self, name: &str) -> bool {
        self.stages.iter().any(|s| matches!(s, Stage::Conv { name: n, .. } if n == name))
    }

    pub fn digest(&self) -> String {
        self.params.digest()
    }

    /// Post-activation features of image `x` ([3, H, W], values in [-1, 1])
    /// at each requested layer, in request order.
    pub fn features(&self, x: &Tensor, taps: &[&str]) -> Result<Vec<Tensor>> {
        contract!(x.dims() == 3, "extractor input must be [C, H, W], got {:?}", x.shape());
        for t in taps {
            contract!(self.has_layer(t), "extractor has no layer `{t}`");
        }
        let mut out: Vec<Option<Tensor>> = vec![None; taps.len()];
        let mut remaining = taps.len();
        let mut h = if self.imagenet_input { imagenet_normalize(x) } else { x.clone() };
        for stage in &self.stages {
            if remaining == 0 {
                break;
            }
            match stage {
                Stage::Pool => {
                    contract!(
                        h.shape()[1] % 2 == 0 && h.shape()[2] % 2 == 0,
                        "feature map {:?} cannot be pooled",
                        h.shape()
                    );
                    h = h.max_pool2d(2);
                }
                Stage::Conv { name, kernel, relu } => {
                    let w = self.bound.get(&format!("{name}.weight"));
                    let b = self.bound.get(&format!("{name}.bias"));
                    h = h.conv2d(w, Some(b), 1, kernel / 2);
                    if *relu {
                        h = h.relu();
                    }
                    for (slot, t) in out.iter_mut().zip(taps) {
                        if t == name && slot.is_none() {
                            *slot = Some(h.clone());
                            remaining -= 1;
                        }
                    }
                }
            }
        }
        Ok(out.into_iter().map(|t| t.expect("every tap visited")).collect())
    }
}

fn vgg_perceptual_taps() -> Vec<String> {
    ["conv1_2", "conv2_2", "conv3_2", "conv4_2"].map(String::from).to_vec()
}

fn he_conv(p: &mut ParamStore, name: &str, cout: usize, cin: usize, k: usize, rng: &mut ChaCha8Rng) {
    let std = (2.0 / (cin * k * k) as f64).sqrt();
    let data = (0..cout * cin * k * k).map(|_| std * standard_normal(rng)).collect();
    p.insert(format!("{name}.weight"), &[cout, cin, k, k], data, false);
    p.insert(format!("{name}.bias"), &[cout], vec![0.0; cout], false);
}

/// Maps [-1, 1] images to ImageNet-normalized [0, 1] inputs.
fn imagenet_normalize(x: &Tensor) -> Tensor {
    let c = x.shape()[0];
    let mean: Vec<f64> = (0..c).map(|i| IMAGENET_MEAN[i % 3]).collect();
    let std: Vec<f64> = (0..c).map(|i| IMAGENET_STD[i % 3]).collect();
    x.add_scalar(1.0)
        .scale(0.5)
        .sub(&Tensor::new(mean, &[c, 1, 1]))
        .div(&Tensor::new(std, &[c, 1, 1]))
}
