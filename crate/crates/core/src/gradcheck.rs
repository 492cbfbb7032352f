//! Central finite-difference checks of analytic gradients.

use crate::tensor::Tensor;

/// Gradient norms below this are indistinguishable from zero with step
/// 1e-6 on O(1) losses.
const ZERO_GRAD: f64 = 1e-9;

/// Result of a gradient comparison over a set of probed coordinates.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheck {
    /// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)` over the probed coordinates. When both
    /// gradients are below the resolution of central differences (norm
    /// under 1e-9, i.e. a structurally zero gradient) the absolute
    /// difference is returned instead.
    pub fn relative_error(&self) -> f64 {
        let diff: f64 = self.analytic.iter().zip(&self.numeric).map(|(a, n)| (a - n) * (a - n)).sum();
        let na: f64 = self.analytic.iter().map(|a| a * a).sum();
        let nn: f64 = self.numeric.iter().map(|n| n * n).sum();
        let denom = na.sqrt().max(nn.sqrt());
        if denom < ZERO_GRAD {
            diff.sqrt()
        } else {
            diff.sqrt() / denom
        }
    }

    /// Largest per-coordinate error relative to `max(|a|, |n|, floor)`.
    pub fn max_elementwise_error(&self, floor: f64) -> f64 {
        self.analytic
            .iter()
            .zip(&self.numeric)
            .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
            .fold(0.0, f64::max)
    }
}

/// Compares the gradient of `f` w.r.t. `inputs[which]` with central
/// differences of step `h` at coordinates `probe`.
///
/// `f` must rebuild the graph from the tensors it is given; it is called
/// once with leaf parameters and `2·probe.len()` times with constants.
pub fn check<F>(f: F, inputs: &[(Vec<f64>, Vec<usize>)], which: usize, probe: &[usize], h: f64) -> GradCheck
where
    F: Fn(&[Tensor]) -> Tensor,
{
    let leaves: Vec<Tensor> = inputs
        .iter()
        .enumerate()
        .map(|(i, (d, s))| if i == which { Tensor::param(d.clone(), s) } else { Tensor::new(d.clone(), s) })
        .collect();
    let out = f(&leaves);
    let grads = out.backward();
    let full = grads.get_or_zeros(&leaves[which]);
    let analytic = probe.iter().map(|&i| full[i]).collect();

    let eval = |idx: usize, delta: f64| -> f64 {
        let ts: Vec<Tensor> = inputs
            .iter()
            .enumerate()
            .map(|(i, (d, s))| {
                let mut d = d.clone();
                if i == which {
                    d[idx] += delta;
                }
                Tensor::new(d, s)
            })
            .collect();
        f(&ts).item()
    };
    let numeric = probe.iter().map(|&i| (eval(i, h) - eval(i, -h)) / (2.0 * h)).collect();
    GradCheck { analytic, numeric }
}

/// `count` distinct coordinates spread deterministically over `0..len`.
pub fn spread_indices(len: usize, count: usize, seed: u64) -> Vec<usize> {
    use rand::seq::index::sample;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, len, count.min(len)).into_vec();
    idx.sort_unstable();
    idx
}
