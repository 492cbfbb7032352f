//! Contextual loss: set-to-set feature matching that ignores where in the
//! image each feature sits.
//!
//! For generated features `x_i` and target features `y_j` (both centered by
//! the target mean and L2-normalized per position):
//!
//! ```text
//! d_ij  = 1 − cos(x_i, y_j)
//! d̃_ij  = d_ij / (min_k d_ik + ε)
//! w_ij  = exp((1 − d̃_ij) / h)
//! CX_ij = w_ij / Σ_k w_ik
//! loss  = −log( mean_j max_i CX_ij )
//! ```

use serde::{Deserialize, Serialize};

use super::extractor::PerceptualExtractor;
use crate::error::{contract, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContextualConfig {
    /// Bandwidth of the affinity kernel.
    pub h: f64,
    pub eps: f64,
    /// Extractor layer matched for texture detail.
    pub detail_layer: String,
    /// Extractor layer matched for overall shape.
    pub shape_layer: String,
}

impl Default for ContextualConfig {
    fn default() -> Self {
        ContextualConfig { h: 0.5, eps: 1e-5, detail_layer: "conv3_2".into(), shape_layer: "conv4_2".into() }
    }
}

/// Feature columns whose centered norm is below this are treated as
/// carrying no direction.
const DEGENERATE_NORM: f64 = 1e-8;

/// Contextual loss between feature maps `[C, H, W]` (or any `[C, ...]`).
pub fn contextual_features(x: &Tensor, y: &Tensor, cfg: &ContextualConfig) -> Result<Tensor> {
    contract!(
        x.shape()[0] == y.shape()[0],
        "feature channel counts differ: {:?} vs {:?}",
        x.shape(),
        y.shape()
    );
    contract!(cfg.h > 0.0 && cfg.eps > 0.0, "contextual bandwidth and epsilon must be positive");
    let c = x.shape()[0];
    let fx = x.reshape(&[c, x.numel() / c]);
    let fy = y.reshape(&[c, y.numel() / c]);
    let mu = fy.mean_axis(1);
    let xc = fx.sub(&mu);
    let yc = fy.sub(&mu);
    let x_norm = xc.sqr().sum_axis(0).sqrt();
    let y_norm = yc.sqr().sum_axis(0).sqrt();
    let degenerate = |n: &Tensor| n.data().iter().all(|v| *v < DEGENERATE_NORM);
    if degenerate(&y_norm) || degenerate(&x_norm) {
        return Err(Error::Degenerate("contextual loss on constant features".into()));
    }
    // A zero column (feature equal to the target mean) gets norm 1 so it
    // stays zero instead of dividing by zero; its cosine to everything is 0.
    let safe = |n: Tensor| {
        let mask: Vec<f64> = n.data().iter().map(|v| if *v < DEGENERATE_NORM { 1.0 } else { 0.0 }).collect();
        let shape = n.shape().to_vec();
        n.add(&Tensor::new(mask, &shape))
    };
    let xn = xc.div(&safe(x_norm));
    let yn = yc.div(&safe(y_norm));
    let dist = xn.t().matmul(&yn).rsub_scalar(1.0);
    let rel = dist.div(&dist.min_axis(1).add_scalar(cfg.eps));
    let w = rel.rsub_scalar(1.0).scale(1.0 / cfg.h).exp();
    let cx = w.div(&w.sum_axis(1));
    Ok(cx.max_axis(0).mean().ln().neg())
}

/// Contextual loss of images `x` and `y` at extractor layer `layer`.
pub fn contextual_loss(
    x: &Tensor,
    y: &Tensor,
    layer: &str,
    extractor: &PerceptualExtractor,
    cfg: &ContextualConfig,
) -> Result<Tensor> {
    let fx = extractor.features(x, &[layer])?.pop().expect("one tap");
    let fy = extractor.features(y, &[layer])?.pop().expect("one tap");
    contextual_features(&fx, &fy, cfg)
}
