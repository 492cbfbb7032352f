//! Evaluation: SSIM, L1 to ground truth and, on synthetic data, how well the
//! learned sampler recovers the true warp.
//!
//! SSIM is the standard windowed form on luma: an 11×11 Gaussian window
//! with σ = 1.5, `K1 = 0.01`, `K2 = 0.03`, and the mean over all fully
//! covered windows. Both images are first mapped from their declared value
//! range onto `[0, 1]` (so `L = 1`), which makes the score independent of
//! how the range is encoded.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::Task;
use crate::data::synth::mask_iou;
use crate::data::{load_dataset, read_truth, select_exemplar, split, ClassPartition, PairedSample};
use crate::error::{contract, Error, Result};
use crate::imagecore::ImagePlane;
use crate::sampler::warp;
use crate::train::{AnyModel, Manifest, CHECKPOINT_FILE, MANIFEST_FILE};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

pub const REPORT_FILE: &str = "report.json";
pub const PER_SAMPLE_FILE: &str = "per_sample.csv";

/// Exemplars for real-to-draft evaluation are drawn with this seed.
const EXEMPLAR_SEED: u64 = 0;

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `h × w` plane with the window.
fn filter(x: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for j in 0..ow {
            rows[y * ow + j] = (0..k).map(|t| g[t] * x[y * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..k).map(|t| g[t] * rows[(i + t) * ow + j]).sum();
        }
    }
    out
}

/// SSIM of two single-channel `h × w` planes whose values live in
/// `[lo, lo + span]`.
pub fn ssim_plane(x: &[f64], y: &[f64], h: usize, w: usize, lo: f64, span: f64) -> Result<f64> {
    contract!(x.len() == h * w && y.len() == h * w, "ssim planes must both be {h}x{w}");
    contract!(h >= SSIM_WINDOW && w >= SSIM_WINDOW, "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}");
    contract!(span > 0.0, "ssim dynamic range must be positive");
    let unit = |v: &[f64]| v.iter().map(|a| (a - lo) / span).collect::<Vec<_>>();
    let (x, y) = (&unit(x)[..], &unit(y)[..]);
    let g = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mx = filter(x, h, w, &g);
    let my = filter(y, h, w, &g);
    let sxx = filter(&prod(x, x), h, w, &g);
    let syy = filter(&prod(y, y), h, w, &g);
    let sxy = filter(&prod(x, y), h, w, &g);
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (a, b) = (mx[i], my[i]);
        let vx = sxx[i] - a * a;
        let vy = syy[i] - b * b;
        let cov = sxy[i] - a * b;
        total += ((2.0 * a * b + c1) * (2.0 * cov + c2)) / ((a * a + b * b + c1) * (vx + vy + c2));
    }
    Ok(total / mx.len() as f64)
}

/// SSIM on luma, with the dynamic range of the declared value range.
pub fn ssim(x: &ImagePlane, y: &ImagePlane) -> Result<f64> {
    contract!(x.shape() == y.shape(), "ssim shapes differ: {:?} vs {:?}", x.shape(), y.shape());
    contract!(x.range() == y.range(), "ssim value ranges differ");
    let (lo, _) = x.range().bounds();
    ssim_plane(&x.luma(), &y.luma(), x.height(), x.width(), lo, x.range().span())
}

pub fn l1_distance(x: &ImagePlane, y: &ImagePlane) -> Result<f64> {
    contract!(x.shape() == y.shape(), "l1 shapes differ: {:?} vs {:?}", x.shape(), y.shape());
    Ok(x.data().iter().zip(y.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.data().len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub ssim: f64,
    pub l1: f64,
    /// IoU of the learned warp of the source garment mask with the target
    /// garment mask; synthetic data only.
    pub warp_iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub channel: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub count: usize,
    pub ssim: f64,
    pub l1: f64,
    /// Mean over samples that carry a ground-truth warp.
    pub warp_iou: Option<f64>,
    pub ssim_params: SsimParams,
    /// Parameter digest of the evaluated model.
    pub param_digest: String,
    pub manifest: Option<String>,
    pub samples: Vec<SampleMetrics>,
}

impl MetricReport {
    pub fn from_samples(samples: Vec<SampleMetrics>, param_digest: String) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Data("evaluation set is empty".into()));
        }
        for s in &samples {
            let bad = [("ssim", s.ssim), ("l1", s.l1), ("warp_iou", s.warp_iou.unwrap_or(0.0))]
                .into_iter()
                .find(|(_, v)| !v.is_finite());
            if let Some((name, v)) = bad {
                return Err(Error::Divergence { step: 0, component: format!("{name} of sample {}", s.id), value: v });
            }
        }
        let n = samples.len() as f64;
        let ious: Vec<f64> = samples.iter().filter_map(|s| s.warp_iou).collect();
        Ok(MetricReport {
            count: samples.len(),
            ssim: samples.iter().map(|s| s.ssim).sum::<f64>() / n,
            l1: samples.iter().map(|s| s.l1).sum::<f64>() / n,
            warp_iou: (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64),
            ssim_params: SsimParams {
                window: SSIM_WINDOW,
                sigma: SSIM_SIGMA,
                k1: SSIM_K1,
                k2: SSIM_K2,
                channel: "luma".into(),
            },
            param_digest,
            manifest: None,
            samples,
        })
    }

    /// `id,ssim,l1,warp_iou` with an empty last field when there is no
    /// ground-truth warp.
    pub fn per_sample_csv(&self) -> String {
        let mut out = String::from("id,ssim,l1,warp_iou\n");
        for s in &self.samples {
            let iou = s.warp_iou.map(|v| format!("{v:e}")).unwrap_or_default();
            writeln!(out, "{},{:e},{:e},{iou}", s.id, s.ssim, s.l1).expect("string write");
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = serde_json::to_string_pretty(self).expect("report serializes");
        let p = dir.join(REPORT_FILE);
        fs::write(&p, json).map_err(|e| Error::io(&p, e))?;
        let p = dir.join(PER_SAMPLE_FILE);
        fs::write(&p, self.per_sample_csv()).map_err(|e| Error::io(&p, e))
    }
}

/// Metrics of `model` on `test`. Real-to-draft exemplars come from `pool`
/// (same class, never the sample itself). With `truth_root`, stored
/// synthetic warps add the warp-recovery IoU.
pub fn evaluate_model(
    model: &AnyModel,
    test: &[PairedSample],
    pool: &[PairedSample],
    truth_root: Option<&Path>,
) -> Result<MetricReport> {
    let partition = ClassPartition::new(pool);
    let mut out = Vec::with_capacity(test.len());
    for (i, s) in test.iter().enumerate() {
        let truth = match truth_root {
            Some(root) => read_truth(root, &s.id)?,
            None => None,
        };
        let (pred, target, iou) = match model {
            AnyModel::D2r(m) => {
                let o = m.infer(&s.draft)?;
                // The learned grid resamples the draft toward the real
                // garment's layout, as the stored draft-to-real warp does.
                let iou = match (&truth, o.grid_d.as_ref().or(o.grid_s.as_ref())) {
                    (Some(t), Some(g)) => Some(mask_iou(&warp(&t.draft_mask, g)?, &t.real_mask)),
                    _ => None,
                };
                (o.c, &s.real, iou)
            }
            AnyModel::R2d(m) => {
                let mut rng = ChaCha8Rng::seed_from_u64(EXEMPLAR_SEED);
                rng.set_stream(i as u64);
                let e = match pool.iter().position(|p| p.id == s.id) {
                    Some(own) => select_exemplar(&partition, s.class_id, Some(own), &mut rng)?,
                    None => select_exemplar(&partition, s.class_id, None, &mut rng)?,
                };
                let o = m.infer(&s.real, &pool[e].draft)?;
                let iou = match &truth {
                    Some(t) => Some(mask_iou(&warp(&t.real_mask, &o.grid)?, &t.draft_mask)),
                    None => None,
                };
                (o.c, &s.draft, iou)
            }
        };
        out.push(SampleMetrics { id: s.id.clone(), ssim: ssim(&pred, target)?, l1: l1_distance(&pred, target)?, warp_iou: iou });
    }
    MetricReport::from_samples(out, model.digest())
}

/// Evaluates the checkpoint in `run_dir` on the test split of the dataset
/// at `data_root` and writes `report.json` and `per_sample.csv` to `out_dir`.
pub fn evaluate(run_dir: &Path, data_root: &Path, out_dir: &Path) -> Result<MetricReport> {
    let manifest_path = run_dir.join(MANIFEST_FILE);
    let manifest = Manifest::load(&manifest_path)?;
    let model = AnyModel::from_archive(&checkpoint::load(&run_dir.join(CHECKPOINT_FILE))?)?;
    if model.task() != manifest.config.task {
        return Err(Error::Version("checkpoint and manifest disagree on the task".into()));
    }
    let all = load_dataset(data_root)?;
    let (train, test) = match manifest.config.data.train_count {
        Some(n) => split(&all, n)?,
        None => (all.clone(), all),
    };
    let pool = if model.task() == Task::R2d && train.is_empty() { &test } else { &train };
    let mut report = evaluate_model(&model, &test, pool, Some(data_root))?;
    report.manifest = Some(manifest_path.display().to_string());
    report.write(out_dir)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagecore::ValueRange;
    use proptest::prelude::*;
    use rand::Rng;

    fn noise(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Direct summation over every window position, with the raw values
    /// and `L = range` instead of normalizing first.
    fn oracle(x: &[f64], y: &[f64], h: usize, w: usize, range: f64) -> f64 {
        let g = gaussian_window();
        let k = SSIM_WINDOW;
        let (c1, c2) = ((SSIM_K1 * range).powi(2), (SSIM_K2 * range).powi(2));
        let mut total = 0.0;
        let mut count = 0;
        for i in 0..=h - k {
            for j in 0..=w - k {
                let (mut mx, mut my) = (0.0, 0.0);
                for a in 0..k {
                    for b in 0..k {
                        let wt = g[a] * g[b];
                        mx += wt * x[(i + a) * w + j + b];
                        my += wt * y[(i + a) * w + j + b];
                    }
                }
                let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                for a in 0..k {
                    for b in 0..k {
                        let wt = g[a] * g[b];
                        let dx = x[(i + a) * w + j + b] - mx;
                        let dy = y[(i + a) * w + j + b] - my;
                        vx += wt * dx * dx;
                        vy += wt * dy * dy;
                        cov += wt * dx * dy;
                    }
                }
                total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn matches_direct_summation() {
        for seed in 0..5 {
            // The oracle works on [0, 2]; normalization onto [0, 1] with
            // L = 1 must agree with it.
            let shift = |v: Vec<f64>| v.into_iter().map(|a| a + 1.0).collect::<Vec<_>>();
            let (x, y) = (shift(noise(seed, 256)), shift(noise(seed + 100, 256)));
            let got = ssim_plane(&x, &y, 16, 16, 0.0, 2.0).unwrap();
            let want = oracle(&x, &y, 16, 16, 2.0);
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn identical_images_score_exactly_one() {
        let x = ImagePlane::new(noise(1, 3 * 400), 3, 20, 20, ValueRange::SignedUnit).unwrap();
        assert_eq!(ssim(&x, &x).unwrap(), 1.0);
        let inv = ImagePlane::new(x.data().iter().map(|v| -v).collect(), 3, 20, 20, ValueRange::SignedUnit).unwrap();
        assert!(ssim(&x, &inv).unwrap() < 1.0);
    }

    #[test]
    fn small_images_are_rejected() {
        let x = ImagePlane::filled(0.0, 3, 8, 8, ValueRange::SignedUnit).unwrap();
        assert!(matches!(ssim(&x, &x), Err(Error::Contract(_))));
    }

    #[test]
    fn empty_report_is_an_error() {
        assert!(matches!(MetricReport::from_samples(vec![], String::new()), Err(Error::Data(_))));
        let nan = SampleMetrics { id: "a".into(), ssim: f64::NAN, l1: 0.0, warp_iou: None };
        assert!(matches!(MetricReport::from_samples(vec![nan], String::new()), Err(Error::Divergence { .. })));
    }

    #[test]
    fn aggregate_is_the_mean() {
        let s = |id: &str, v: f64, iou| SampleMetrics { id: id.into(), ssim: v, l1: 1.0 - v, warp_iou: iou };
        let r = MetricReport::from_samples(vec![s("a", 0.2, Some(0.5)), s("b", 0.6, None)], "d".into()).unwrap();
        assert!((r.ssim - 0.4).abs() < 1e-15 && (r.l1 - 0.6).abs() < 1e-15);
        assert_eq!((r.count, r.warp_iou), (2, Some(0.5)));
        assert_eq!(r.per_sample_csv().lines().nth(2).unwrap(), "b,6e-1,4e-1,");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn symmetric(seed in 0u64..1000) {
            let (x, y) = (noise(seed, 196), noise(seed + 1, 196));
            let a = ssim_plane(&x, &y, 14, 14, -1.0, 2.0).unwrap();
            let b = ssim_plane(&y, &x, 14, 14, -1.0, 2.0).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
            prop_assert!((-1.0..=1.0).contains(&a));
        }

        #[test]
        fn invariant_to_shared_affine_rescale(seed in 0u64..1000, scale in 0.1f64..10.0, shift in -5.0f64..5.0) {
            let (x, y) = (noise(seed, 196), noise(seed + 1, 196));
            let base = ssim_plane(&x, &y, 14, 14, -1.0, 2.0).unwrap();
            let f = |v: &Vec<f64>| v.iter().map(|a| a * scale + shift).collect::<Vec<_>>();
            let moved = ssim_plane(&f(&x), &f(&y), 14, 14, shift - scale, 2.0 * scale).unwrap();
            prop_assert!((base - moved).abs() < 1e-9, "{} vs {}", base, moved);
        }
    }
}
