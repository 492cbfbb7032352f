//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p draftnet-core --test acceptance`. Criteria 6 and
//! 8 train several desk-scale models and take a few minutes in total.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use draftnet::config::{ModelConfig, RunConfig, Task};
use draftnet::d2r::Stage as D2RStage;
use draftnet::data::{select_exemplar, split, synth_dataset, ClassPartition, SynthConfig};
use draftnet::eval::{evaluate_model, l1_distance, ssim, ssim_plane, SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW};
use draftnet::gradcheck::{check, spread_indices};
use draftnet::imagecore::{compose_three, compose_two, tv_loss, FusionMask, ImagePlane, TvMode, ValueRange};
use draftnet::losses::contextual::{contextual_loss, ContextualConfig};
use draftnet::losses::extractor::PerceptualExtractor;
use draftnet::losses::{hinge_disc, hinge_gen, l1, label_loss, perceptual_loss};
use draftnet::networks::{FinalActivation, UNet, UNetSpec};
use draftnet::r2d::Stage as R2DStage;
use draftnet::sampler::{grid_coord, saliency_to_grid, saliency_to_grid_t, SaliencyMap, SaliencySampler, SamplerConfig};
use draftnet::tensor::Tensor;
use draftnet::train::{run_training, AnyModel, Manifest, Trainer, LOSSES_FILE, MANIFEST_FILE};
use draftnet::{D2RModel, D2RVariant, PairedSample, R2DModel, R2DVariant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Outcome of one criterion: pass flag and a one-line measurement summary.
type Outcome = (bool, String);

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("1 gradient integrity", gradient_integrity),
        ("2 loss identities", loss_identities),
        ("3 composition algebra", composition_algebra),
        ("4 sampler semantics", sampler_semantics),
        ("5 d2r overfit smoke", overfit_smoke),
        ("6 two-stream benefit", two_stream_benefit),
        ("7 conditioning asymmetry", conditioning_asymmetry),
        ("8 r2d label supervision", label_supervision),
        ("9 ssim oracle", ssim_oracle),
        ("10 reproducibility", reproducibility),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.split(' ').next() == Some(f.as_str())) {
            continue;
        }
        let t = Instant::now();
        let (ok, detail) = run();
        failed += usize::from(!ok);
        println!(
            "criterion {name}: {} ({detail}) [{:.1}s]",
            if ok { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}

fn rand_vec(n: usize, lo: f64, hi: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn plane(c: usize, h: usize, w: usize, range: ValueRange, seed: u64) -> ImagePlane {
    let (lo, hi) = range.bounds();
    ImagePlane::new(rand_vec(c * h * w, lo, hi, seed), c, h, w, range).unwrap()
}

fn synth(count: usize, resolution: usize, seed: u64) -> Vec<PairedSample> {
    let cfg = SynthConfig { count, resolution, seed, ..SynthConfig::default() };
    synth_dataset(&cfg).unwrap().into_iter().map(|p| p.sample).collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

// 1. Relative error of analytic against central-difference gradients.

const GRAD_TOL: f64 = 1e-3;

fn gradient_integrity() -> Outcome {
    let t = Instant::now();
    let mut worst = Vec::new();

    // Saliency sampler end to end on a 16x16 image: every parameter array
    // and the input image.
    let cfg = SamplerConfig { zero_init_head: false, channels: 4, depth: 2, downsample: 4, kernel_sigma: 0.3 };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let sampler = SaliencySampler::new(cfg, 3, &mut rng).unwrap();
    let x = rand_vec(3 * 16 * 16, -1.0, 1.0, 2);
    let mut e = 0.0f64;
    for name in sampler.params.iter().map(|(k, _)| k.clone()).collect::<Vec<_>>() {
        let p = sampler.params.get(&name).unwrap();
        let xt = Tensor::new(x.clone(), &[3, 16, 16]);
        let f = |t: &[Tensor]| sampler.forward(&sampler.params.bind(false).replace(&name, t[0].clone()), &xt).unwrap().warped.mean();
        let probe = spread_indices(p.data.len(), 8, 3);
        e = e.max(check(f, &[(p.data.clone(), p.shape.clone())], 0, &probe, 1e-6).relative_error());
    }
    let f = |t: &[Tensor]| sampler.forward(&sampler.params.bind(false), &t[0]).unwrap().warped.sqr().mean();
    let probe = spread_indices(x.len(), 32, 4);
    e = e.max(check(f, &[(x.clone(), vec![3, 16, 16])], 0, &probe, 1e-6).relative_error());
    worst.push(("sampler", e));

    // Total variation on an 8x8 mask, both neighbor conventions.
    let m = rand_vec(64, 0.0, 1.0, 5);
    let mut e = 0.0f64;
    for mode in [TvMode::Literal, TvMode::Isotropic] {
        let f = |t: &[Tensor]| tv_loss(&t[0], mode);
        e = e.max(check(f, &[(m.clone(), vec![1, 8, 8])], 0, &(0..64).collect::<Vec<_>>(), 1e-6).relative_error());
    }
    worst.push(("tv", e));

    // Contextual loss through a one-layer random extractor at 8x8.
    let ext = PerceptualExtractor::single_layer(3, 6, 3, true, 6);
    let ccfg = ContextualConfig::default();
    let (a, b) = (rand_vec(192, -1.0, 1.0, 7), rand_vec(192, -1.0, 1.0, 8));
    let f = |t: &[Tensor]| contextual_loss(&t[0], &t[1], "conv1", &ext, &ccfg).unwrap();
    let probe: Vec<usize> = (0..192).step_by(3).collect();
    worst.push((
        "contextual",
        check(f, &[(a, vec![3, 8, 8]), (b, vec![3, 8, 8])], 0, &probe, 1e-6).relative_error(),
    ));

    // Two-level U-Net, every parameter array, with weights scaled up so the
    // nonlinearities are exercised.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut net = UNet::new(UNetSpec::new(3, 2, 4, FinalActivation::Tanh), &mut rng).unwrap();
    let names: Vec<String> = net.params.iter().map(|(k, _)| k.clone()).collect();
    for n in &names {
        for v in &mut net.params.get_mut(n).unwrap().data {
            *v = *v * 10.0 + 0.01;
        }
    }
    let xi = Tensor::new(rand_vec(3 * 16 * 16, -1.0, 1.0, 10), &[3, 16, 16]);
    let target = Tensor::new(rand_vec(3 * 16 * 16, -1.0, 1.0, 11), &[3, 16, 16]);
    let mut e = 0.0f64;
    for (i, name) in names.iter().enumerate() {
        let p = net.params.get(name).unwrap().clone();
        let probe = spread_indices(p.data.len(), 6, i as u64);
        let f = |t: &[Tensor]| net.forward(&net.params.bind(false).replace(name, t[0].clone()), &xi).unwrap().sub(&target).sqr().mean();
        e = e.max(check(f, &[(p.data.clone(), p.shape.clone())], 0, &probe, 1e-6).relative_error());
    }
    worst.push(("unet", e));

    let elapsed = t.elapsed();
    let ok = worst.iter().all(|(_, e)| *e < GRAD_TOL) && elapsed < Duration::from_secs(300);
    let detail = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    (ok, format!("max rel err {detail}; tol {GRAD_TOL:.0e}"))
}

// 2. Closed-form loss values.

fn loss_identities() -> Outcome {
    let map = |v: f64| Tensor::full(v, &[1, 4, 4]);
    let mut errs = Vec::new();
    errs.push(("hinge_disc(1,-1)", hinge_disc(&map(1.0), &map(-1.0)).item()));
    errs.push(("hinge_disc(0,0)-2", hinge_disc(&map(0.0), &map(0.0)).item() - 2.0));
    let c = Tensor::new(rand_vec(16, -3.0, 3.0, 20), &[1, 4, 4]);
    errs.push(("hinge_gen(c)+mean c", hinge_gen(&c).item() + c.mean().item()));
    errs.push(("tv(const)", tv_loss(&Tensor::full(0.37, &[1, 8, 8]), TvMode::Literal).item()));
    errs.push(("tv_iso(const)", tv_loss(&Tensor::full(0.37, &[1, 8, 8]), TvMode::Isotropic).item()));
    let u = Tensor::zeros(&[4]);
    let worst_label = (0..4).map(|k| (label_loss(&u, &u, k).unwrap().item() - 2.0 * 4f64.ln()).abs()).fold(0.0, f64::max);
    errs.push(("label(uniform)-2log4", worst_label));
    let ext = PerceptualExtractor::vgg19_random(8, 19).unwrap();
    let x = Tensor::new(rand_vec(3 * 32 * 32, -1.0, 1.0, 21), &[3, 32, 32]);
    errs.push(("perceptual(x,x)", perceptual_loss(&x, &x, &ext).unwrap().item()));
    let worst = errs.iter().map(|(_, e)| e.abs()).fold(0.0, f64::max);
    let bad: Vec<_> = errs.iter().filter(|(_, e)| e.abs() >= 1e-6).map(|(n, e)| format!("{n}={e:.2e}")).collect();
    (bad.is_empty(), format!("{} identities, max |err| {worst:.1e}; tol 1e-6{}", errs.len(), if bad.is_empty() { String::new() } else { format!("; off: {}", bad.join(" ")) }))
}

// 3. Blending identities, bounds and the dual-mask simplex.

fn composition_algebra() -> Outcome {
    let sr = ValueRange::SignedUnit;
    let mask = |v: f64| ImagePlane::filled(v, 1, 8, 8, ValueRange::Unit).unwrap();
    let (a, b, c) = (plane(3, 8, 8, sr, 30), plane(3, 8, 8, sr, 31), plane(3, 8, 8, sr, 32));
    let identities = compose_two(&a, &b, &FusionMask::single(mask(1.0)).unwrap()).unwrap() == a
        && compose_two(&a, &b, &FusionMask::single(mask(0.0)).unwrap()).unwrap() == b
        && compose_three(&a, &b, &c, &FusionMask::dual(mask(1.0), mask(0.0)).unwrap()).unwrap() == a
        && compose_three(&a, &b, &c, &FusionMask::dual(mask(0.0), mask(1.0)).unwrap()).unwrap() == b
        && compose_three(&a, &b, &c, &FusionMask::dual(mask(0.0), mask(0.0)).unwrap()).unwrap() == c;

    let mut bound_violations = 0;
    for i in 0..1000u64 {
        let (a, b, c) = (plane(3, 8, 8, sr, 3 * i), plane(3, 8, 8, sr, 3 * i + 1), plane(3, 8, 8, sr, 3 * i + 2));
        let m = plane(1, 8, 8, ValueRange::Unit, 5000 + i);
        let two = compose_two(&a, &b, &FusionMask::single(m.clone()).unwrap()).unwrap();
        // A dual mask on the simplex from two uniform draws.
        let n = plane(1, 8, 8, ValueRange::Unit, 9000 + i);
        let m1: Vec<f64> = m.data().iter().zip(n.data()).map(|(p, q)| p * q).collect();
        let m2: Vec<f64> = m.data().iter().zip(n.data()).map(|(p, q)| p * (1.0 - q)).collect();
        let dual = FusionMask::dual(
            ImagePlane::new(m1, 1, 8, 8, ValueRange::Unit).unwrap(),
            ImagePlane::new(m2, 1, 8, 8, ValueRange::Unit).unwrap(),
        )
        .unwrap();
        let three = compose_three(&a, &b, &c, &dual).unwrap();
        for k in 0..3 * 64 {
            let (x, y, z) = (a.data()[k], b.data()[k], c.data()[k]);
            let o2 = two.data()[k];
            let o3 = three.data()[k];
            if o2 < x.min(y) - 1e-12 || o2 > x.max(y) + 1e-12 || o3 < x.min(y).min(z) - 1e-12 || o3 > x.max(y).max(z) + 1e-12 {
                bound_violations += 1;
            }
        }
    }

    // Masks predicted by a simplex-headed fusion network on random inputs.
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let net = UNet::new(UNetSpec::new(9, 2, 4, FinalActivation::Simplex), &mut rng).unwrap();
    let mut simplex_violations = 0;
    let mut rejected = 0;
    for i in 0..1000u64 {
        let x = Tensor::new(rand_vec(9 * 8 * 8, -3.0, 3.0, 20_000 + i), &[9, 8, 8]);
        let out = net.forward(&net.bind(false), &x).unwrap();
        let d = out.data();
        for p in 0..64 {
            let (m1, m2) = (d[p], d[64 + p]);
            if m1 < 0.0 || m2 < 0.0 || m1 + m2 > 1.0 + 1e-12 {
                simplex_violations += 1;
            }
        }
        let m1 = ImagePlane::new(d[..64].to_vec(), 1, 8, 8, ValueRange::Unit).unwrap();
        let m2 = ImagePlane::new(d[64..128].to_vec(), 1, 8, 8, ValueRange::Unit).unwrap();
        rejected += usize::from(FusionMask::dual(m1, m2).is_err());
    }
    let ok = identities && bound_violations == 0 && simplex_violations == 0 && rejected == 0;
    (
        ok,
        format!(
            "identities exact: {identities}; bound violations {bound_violations}/1000 instances; simplex violations {simplex_violations}, rejected masks {rejected}/1000"
        ),
    )
}

// 4. Saliency-to-grid semantics.

/// Direct evaluation of the saliency-weighted average of grid positions.
fn grid_oracle(s: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let mut out = vec![0.0; 2 * h * w];
    for i in 0..h {
        for j in 0..w {
            let (px, py) = (grid_coord(j, w), grid_coord(i, h));
            let (mut nu, mut nv, mut den) = (0.0, 0.0, 0.0);
            for a in 0..h {
                for b in 0..w {
                    let (qx, qy) = (grid_coord(b, w), grid_coord(a, h));
                    let k = s[a * w + b] * (-((px - qx).powi(2) + (py - qy).powi(2)) / (2.0 * sigma * sigma)).exp();
                    nu += k * qx;
                    nv += k * qy;
                    den += k;
                }
            }
            out[i * w + j] = nu / den;
            out[h * w + i * w + j] = nv / den;
        }
    }
    out
}

fn sampler_semantics() -> Outcome {
    let cfg = SamplerConfig::default();
    let (h, w) = (8, 8);
    let g = saliency_to_grid(&SaliencyMap::uniform(h, w), &cfg).unwrap();
    let oracle = grid_oracle(&vec![1.0 / 64.0; 64], h, w, cfg.kernel_sigma);
    let oracle_err = g.coords().iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let mut scale_exact = true;
    for seed in 0..50 {
        let s = Tensor::new(rand_vec(36, 0.01, 1.0, 40 + seed), &[1, 6, 6]);
        let g1 = saliency_to_grid_t(&s, cfg.kernel_sigma).unwrap();
        let g2 = saliency_to_grid_t(&s.scale(2.0), cfg.kernel_sigma).unwrap();
        scale_exact &= g1.data() == g2.data();
    }

    let mut s = vec![1e-9; 81];
    s[40] = 1.0;
    let delta = saliency_to_grid(&SaliencyMap::from_weights(s, 9, 9).unwrap(), &cfg).unwrap();
    let uniform = saliency_to_grid(&SaliencyMap::uniform(9, 9), &cfg).unwrap();
    let spread = |g: &draftnet::WarpGrid| g.coords().iter().map(|c| c.abs()).sum::<f64>() / g.coords().len() as f64;
    let pull = spread(&delta) < spread(&uniform) && delta.central_magnification() > uniform.central_magnification();

    let ok = oracle_err < 1e-5 && scale_exact && pull;
    (
        ok,
        format!(
            "uniform oracle max err {oracle_err:.1e} (tol 1e-5); s->2s bitwise equal: {scale_exact}; delta pulls toward center: {pull} (mean |coord| {:.3} vs {:.3})",
            spread(&delta),
            spread(&uniform)
        ),
    )
}

// 5. A single pair is memorized by the stream generators.

fn overfit_smoke() -> Outcome {
    let t = Instant::now();
    let pair = synth(1, 64, 7).remove(0);
    let mut model = D2RModel::new(ModelConfig::default(), D2RVariant::Full, 0).unwrap();
    let b_d_l1 = |m: &D2RModel| {
        let o = m.infer(&pair.draft).unwrap();
        l1(&o.b_d.unwrap().to_tensor(), &pair.real.to_tensor()).item()
    };
    let before = b_d_l1(&model);
    for _ in 0..200 {
        model.train_step(D2RStage::Streams, &pair).unwrap();
    }
    let after = b_d_l1(&model);
    let drop = 1.0 - after / before;
    let ok = drop >= 0.5 && t.elapsed() < Duration::from_secs(600);
    (ok, format!("L1(B_d, r) {before:.4} -> {after:.4} after 200 steps, drop {:.1}% (need >= 50%)", 100.0 * drop))
}

// 6. Full D2R against the detail-only single stream at equal budget.

const C6_STREAM: u64 = 300;
const C6_FUSION: u64 = 100;

fn train_to_end(cfg: RunConfig, train: Vec<PairedSample>) -> AnyModel {
    let mut t = Trainer::new(cfg, train).unwrap();
    while t.step().unwrap().is_some() {}
    t.model
}

fn two_stream_benefit() -> Outcome {
    let data = synth(64, 64, 11);
    let (train, test) = split(&data, 48).unwrap();
    let (mut l1s, mut ssims) = ([Vec::new(), Vec::new()], [Vec::new(), Vec::new()]);
    let mut streams = Vec::new();
    for seed in 0..3 {
        for (k, variant) in ["full", "no_shape"].into_iter().enumerate() {
            let mut cfg = RunConfig { task: Task::D2r, variant: variant.into(), seed, ..RunConfig::default() };
            // no_shape has no fusion stage, so it spends the whole budget on its stream.
            cfg.schedule.stream_steps = if variant == "full" { C6_STREAM } else { C6_STREAM + C6_FUSION };
            cfg.schedule.fusion_steps = C6_FUSION;
            let model = train_to_end(cfg, train.clone());
            let r = evaluate_model(&model, &test, &train, None).unwrap();
            l1s[k].push(r.l1);
            ssims[k].push(r.ssim);
            if let AnyModel::D2r(m) = &model {
                if k == 0 {
                    streams.push(stream_diagnostics(m, &test));
                }
            }
        }
    }
    let (fl, nl) = (median(l1s[0].clone()), median(l1s[1].clone()));
    let (fs, ns) = (median(ssims[0].clone()), median(ssims[1].clone()));
    let ok = fl < nl && fs > ns;
    (
        ok,
        format!(
            "median test L1 full {fl:.4} vs no_shape {nl:.4}; median SSIM full {fs:.4} vs no_shape {ns:.4}; per seed L1 {:?} vs {:?}; full per seed (L1 B_d, L1 B_s, mean mask on B_s) {:?}",
            round(&l1s[0]),
            round(&l1s[1]),
            streams.iter().map(|t: &[f64; 3]| round(t)).collect::<Vec<_>>()
        ),
    )
}

/// Mean test L1 of each stream output and the mean fusion mask weight on
/// the shape stream.
fn stream_diagnostics(m: &D2RModel, test: &[PairedSample]) -> [f64; 3] {
    let mut acc = [0.0; 3];
    for s in test {
        let o = m.infer(&s.draft).unwrap();
        acc[0] += l1_distance(o.b_d.as_ref().unwrap(), &s.real).unwrap();
        acc[1] += l1_distance(o.b_s.as_ref().unwrap(), &s.real).unwrap();
        let mask = o.m.unwrap();
        acc[2] += mask.data().iter().sum::<f64>() / mask.data().len() as f64;
    }
    acc.map(|v| v / test.len() as f64)
}

fn round(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| (x * 1e4).round() / 1e4).collect()
}

// 7. Which tensor each discriminator is conditioned on.

fn conditioning_asymmetry() -> Outcome {
    let pair = synth(1, 32, 3).remove(0);
    let cfg = ModelConfig { generator_depth: 3, ..ModelConfig::default() };
    let mut checked = 0;
    let mut bad = Vec::new();
    for variant in D2RVariant::ALL {
        let mut m = D2RModel::new(cfg.clone(), variant, 0).unwrap();
        m.enable_trace();
        for st in m.stages() {
            m.train_step(st, &pair).unwrap();
        }
        for r in m.trace() {
            checked += 1;
            let ok = match r.disc.as_str() {
                // Raw draft, never the distortion image or anything computed from it.
                "D_d" => r.condition_is_input && r.condition_tag == Some("d") && !r.condition_depends_on_warp,
                // Computed from the distortion image, never the raw draft.
                "D_s" | "D_r" => !r.condition_is_input && r.condition_depends_on_warp,
                _ => false,
            };
            if !ok {
                bad.push(format!("{}:{}", variant.name(), r.disc));
            }
        }
    }
    let ok = checked > 0 && bad.is_empty();
    (ok, format!("{checked} discriminator conditions traced over all d2r variants; violations {bad:?}"))
}

// 8. Auxiliary label head on held-out drafts and on generated drafts.

const C8_STEPS: u64 = 2000;

fn r2d_config() -> ModelConfig {
    ModelConfig { generator_depth: 3, ..ModelConfig::default() }
}

/// Accuracy of `model`'s label head on held-out drafts and on the drafts it
/// generates from held-out real images, with exemplars from the train pool.
fn label_accuracies(model: &R2DModel, test: &[PairedSample], pool: &[PairedSample]) -> (f64, f64) {
    let partition = ClassPartition::new(pool);
    let (mut on_drafts, mut on_generated) = (0, 0);
    for (i, s) in test.iter().enumerate() {
        let truth = s.label.encode();
        on_drafts += usize::from(model.classify(&s.draft).unwrap() == truth);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        rng.set_stream(i as u64);
        let e = select_exemplar(&partition, s.class_id, None, &mut rng).unwrap();
        let o = model.infer(&s.real, &pool[e].draft).unwrap();
        on_generated += usize::from(model.classify(&o.b_a).unwrap() == truth);
    }
    let n = test.len() as f64;
    (on_drafts as f64 / n, on_generated as f64 / n)
}

fn label_supervision() -> Outcome {
    let data = synth(64, 32, 13);
    let (train, test) = split(&data, 32).unwrap();
    let mut held_out = Vec::new();
    let mut generated = [Vec::new(), Vec::new()];
    for seed in 0..3 {
        for (k, variant) in [R2DVariant::Full, R2DVariant::NoLabel].into_iter().enumerate() {
            let mut cfg = RunConfig { task: Task::R2d, variant: variant.name().into(), seed, model: r2d_config(), ..RunConfig::default() };
            cfg.schedule.stream_steps = C8_STEPS;
            cfg.schedule.fusion_steps = 0;
            let AnyModel::R2d(model) = train_to_end(cfg, train.clone()) else { unreachable!() };
            assert!(model.stages().contains(&R2DStage::Appearance));
            let (d, g) = label_accuracies(&model, &test, &train);
            if k == 0 {
                held_out.push(d);
            }
            generated[k].push(g);
        }
    }
    let acc = median(held_out.clone());
    let (gf, gn) = (median(generated[0].clone()), median(generated[1].clone()));
    let ok = acc > 0.9 && gn < gf;
    (
        ok,
        format!(
            "held-out draft accuracy median {:.1}% (need > 90%, per seed {:?}); on generated drafts full {:.1}% vs no_label {:.1}% (per seed {:?} vs {:?})",
            100.0 * acc,
            round(&held_out),
            100.0 * gf,
            100.0 * gn,
            round(&generated[0]),
            round(&generated[1])
        ),
    )
}

// 9. SSIM against direct summation over every window.

fn ssim_direct(x: &[f64], y: &[f64], h: usize, w: usize) -> f64 {
    let k = SSIM_WINDOW;
    let c = (k / 2) as f64;
    let mut g = vec![0.0; k * k];
    for a in 0..k {
        for b in 0..k {
            g[a * k + b] = (-((a as f64 - c).powi(2) + (b as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        }
    }
    let total: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= total);
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let mut sum = 0.0;
    let mut count = 0;
    for i in 0..=h - k {
        for j in 0..=w - k {
            let (mut mx, mut my) = (0.0, 0.0);
            for a in 0..k {
                for b in 0..k {
                    let p = (i + a) * w + j + b;
                    mx += g[a * k + b] * x[p];
                    my += g[a * k + b] * y[p];
                }
            }
            let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
            for a in 0..k {
                for b in 0..k {
                    let p = (i + a) * w + j + b;
                    vx += g[a * k + b] * (x[p] - mx).powi(2);
                    vy += g[a * k + b] * (y[p] - my).powi(2);
                    cov += g[a * k + b] * (x[p] - mx) * (y[p] - my);
                }
            }
            sum += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    sum / count as f64
}

fn ssim_oracle() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let x = rand_vec(256, 0.0, 1.0, 100 + seed);
        let y: Vec<f64> = x.iter().zip(rand_vec(256, -0.3, 0.3, 200 + seed)).map(|(a, n)| (a + n).clamp(0.0, 1.0)).collect();
        let got = ssim_plane(&x, &y, 16, 16, 0.0, 1.0).unwrap();
        worst = worst.max((got - ssim_direct(&x, &y, 16, 16)).abs());
    }
    let mut exact = true;
    for seed in 0..20 {
        let x = plane(3, 16, 16, ValueRange::SignedUnit, 300 + seed);
        exact &= ssim(&x, &x).unwrap() == 1.0;
    }
    (worst < 1e-6 && exact, format!("max |impl - direct| {worst:.1e} over 20 random 16x16 pairs (tol 1e-6); ssim(x,x) == 1 exactly: {exact}"))
}

// 10. Rerunning from a manifest reproduces the run bit for bit.

fn reproducibility() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(8, 32, 17);
    let mut cfg = RunConfig { output_dir: dir.path().join("first"), model: r2d_config(), ..RunConfig::default() };
    cfg.variant = "two_steps_plus".into();
    cfg.schedule.stream_steps = 15;
    cfg.schedule.refine_steps = 10;
    cfg.schedule.fusion_steps = 10;
    let first = run_training(&cfg, data.clone(), "synthetic", false).unwrap();
    let manifest = Manifest::load(&first.run_dir.join(MANIFEST_FILE)).unwrap();
    let mut again = manifest.config.clone();
    again.output_dir = dir.path().join("second");
    let second = run_training(&again, data, &manifest.dataset_digest, false).unwrap();
    let log = |d: &std::path::Path| std::fs::read(d.join(LOSSES_FILE)).unwrap();
    let same_digest = first.param_digest == second.param_digest && manifest.param_digest == first.param_digest;
    let same_log = log(&first.run_dir) == log(&second.run_dir);
    (
        same_digest && same_log && manifest.deterministic,
        format!("{} steps; parameter digests equal: {same_digest}; loss CSVs byte-identical: {same_log}", first.steps),
    )
}
