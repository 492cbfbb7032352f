//! Scalar objectives and their weighted combinations.
//!
//! Generator-side totals are built as an [`Objective`]: a list of named,
//! weighted terms that sums to a graph scalar and reports each unweighted
//! component. Discriminator terms are optimized separately by the
//! pipelines, which alternate discriminator and generator updates.

pub mod contextual;
pub mod extractor;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use contextual::{contextual_features, contextual_loss, ContextualConfig};
pub use extractor::{ExtractorConfig, ExtractorMode, PerceptualExtractor};

use crate::error::{contract, Error, Result};
use crate::tensor::Tensor;

/// `mean(max(0, 1 − real)) + mean(max(0, 1 + fake))`.
pub fn hinge_disc(real: &Tensor, fake: &Tensor) -> Tensor {
    real.rsub_scalar(1.0).relu().mean().add(&fake.add_scalar(1.0).relu().mean())
}

/// `−mean(fake)`.
pub fn hinge_gen(fake: &Tensor) -> Tensor {
    fake.mean().neg()
}

/// Sigmoid cross-entropy discriminator loss on logits:
/// `mean(−log σ(real)) + mean(−log(1 − σ(fake)))`.
pub fn bce_disc(real: &Tensor, fake: &Tensor) -> Tensor {
    real.neg().softplus().mean().add(&fake.softplus().mean())
}

/// Non-saturating generator counterpart of [`bce_disc`].
pub fn bce_gen(fake: &Tensor) -> Tensor {
    fake.neg().softplus().mean()
}

pub fn l1(x: &Tensor, y: &Tensor) -> Tensor {
    x.sub(y).abs().mean()
}

/// Mean over the extractor's perceptual taps of the mean absolute feature
/// difference.
pub fn perceptual_loss(x: &Tensor, y: &Tensor, extractor: &PerceptualExtractor) -> Result<Tensor> {
    contract!(x.shape() == y.shape(), "perceptual inputs differ: {:?} vs {:?}", x.shape(), y.shape());
    let taps: Vec<&str> = extractor.perceptual_taps().iter().map(String::as_str).collect();
    let fx = extractor.features(x, &taps)?;
    let fy = extractor.features(y, &taps)?;
    let n = taps.len() as f64;
    let total = fx.iter().zip(&fy).map(|(a, b)| l1(a, b)).reduce(|a, b| a.add(&b)).expect("at least one tap");
    Ok(total.scale(1.0 / n))
}

/// `−log softmax(logits)[label]` for a 4-way head.
pub fn label_ce(logits: &Tensor, label: usize) -> Result<Tensor> {
    contract!(logits.shape() == [4], "label logits must have shape [4], got {:?}", logits.shape());
    contract!(label < 4, "label index {label} out of range 0..4");
    Ok(logits.log_softmax(0).narrow(0, label, 1).sum().neg())
}

/// Cross-entropy of the label head on a real draft plus on a generated one.
pub fn label_loss(logits_real: &Tensor, logits_generated: &Tensor, label: usize) -> Result<Tensor> {
    Ok(label_ce(logits_real, label)?.add(&label_ce(logits_generated, label)?))
}

/// Loss weights. Field names describe the role of each weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// L1 to the real image in both draft-to-real streams.
    pub stream_l1: f64,
    /// Perceptual loss in both draft-to-real streams.
    pub stream_perceptual: f64,
    /// TV of the draft-to-real fusion mask.
    pub fusion_tv: f64,
    /// L1 to the real draft in the appearance network.
    pub appearance_l1: f64,
    pub appearance_perceptual: f64,
    /// Generator-side label cross-entropy in the appearance network.
    pub label: f64,
    /// TV of the first and second real-to-draft fusion masks.
    pub mask1_tv: f64,
    pub mask2_tv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            stream_l1: 50.0,
            stream_perceptual: 5.0,
            fusion_tv: 1.0,
            appearance_l1: 50.0,
            appearance_perceptual: 5.0,
            label: 1.0,
            mask1_tv: 1.0,
            mask2_tv: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("stream_l1", self.stream_l1),
            ("stream_perceptual", self.stream_perceptual),
            ("fusion_tv", self.fusion_tv),
            ("appearance_l1", self.appearance_l1),
            ("appearance_perceptual", self.appearance_perceptual),
            ("label", self.label),
            ("mask1_tv", self.mask1_tv),
            ("mask2_tv", self.mask2_tv),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("weights.{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Named weighted terms of one optimizer's objective.
#[derive(Debug, Clone, Default)]
pub struct Objective {
    terms: Vec<(String, f64, Tensor)>,
}

impl Objective {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: &str, weight: f64, term: Tensor) -> Self {
        self.push(name, weight, term);
        self
    }

    pub fn push(&mut self, name: &str, weight: f64, term: Tensor) {
        debug_assert_eq!(term.numel(), 1, "objective terms are scalars");
        self.terms.push((name.to_string(), weight, term));
    }

    /// Unweighted component values.
    pub fn components(&self) -> BTreeMap<String, f64> {
        self.terms.iter().map(|(n, _, t)| (n.clone(), t.item())).collect()
    }

    /// Weighted sum, or a divergence error naming the first non-finite
    /// component.
    pub fn total(&self, step: u64) -> Result<Tensor> {
        for (name, _, t) in &self.terms {
            let v = t.item();
            if !v.is_finite() {
                return Err(Error::Divergence { step, component: name.clone(), value: v });
            }
        }
        let total = self
            .terms
            .iter()
            .filter(|(_, w, _)| *w != 0.0)
            .map(|(_, w, t)| if *w == 1.0 { t.clone() } else { t.scale(*w) })
            .reduce(|a, b| a.add(&b))
            .unwrap_or_else(|| Tensor::scalar(0.0));
        Ok(total)
    }
}

/// Generator side of one draft-to-real stream: adversarial + L1 + perceptual.
pub struct StreamTerms {
    pub adv: Tensor,
    pub l1: Tensor,
    pub perceptual: Tensor,
}

pub fn total_d2r_detail(t: StreamTerms, w: &LossWeights) -> Objective {
    stream_objective(t, w)
}

pub fn total_d2r_shape(t: StreamTerms, w: &LossWeights) -> Objective {
    stream_objective(t, w)
}

fn stream_objective(t: StreamTerms, w: &LossWeights) -> Objective {
    Objective::new()
        .with("adv", 1.0, t.adv)
        .with("l1", w.stream_l1, t.l1)
        .with("per", w.stream_perceptual, t.perceptual)
}

/// Contextual terms at the detail and shape layers plus mask TV.
pub fn total_d2r_fusion(cx_detail: Tensor, cx_shape: Tensor, tv: Tensor, w: &LossWeights) -> Objective {
    Objective::new().with("cx_detail", 1.0, cx_detail).with("cx_shape", 1.0, cx_shape).with("tv", w.fusion_tv, tv)
}

/// Generator side of the appearance network.
pub struct AppearanceTerms {
    /// Against the real/fake discriminator.
    pub adv: Tensor,
    /// Against the exemplar-matching discriminator, when present.
    pub adv_exemplar: Option<Tensor>,
    pub l1: Tensor,
    pub perceptual: Tensor,
    pub label: Option<Tensor>,
}

pub fn total_r2d_appearance(t: AppearanceTerms, w: &LossWeights) -> Objective {
    let mut o = Objective::new().with("g_adv", 1.0, t.adv);
    if let Some(a) = t.adv_exemplar {
        o.push("dm_adv", 1.0, a);
    }
    o.push("l1", w.appearance_l1, t.l1);
    o.push("per", w.appearance_perceptual, t.perceptual);
    if let Some(l) = t.label {
        o.push("label", w.label, l);
    }
    o
}

pub fn total_r2d_fusion(cx_detail: Tensor, cx_shape: Tensor, tv_m1: Tensor, tv_m2: Tensor, w: &LossWeights) -> Objective {
    Objective::new()
        .with("cx_detail", 1.0, cx_detail)
        .with("cx_shape", 1.0, cx_shape)
        .with("tv_m1", w.mask1_tv, tv_m1)
        .with("tv_m2", w.mask2_tv, tv_m2)
}
