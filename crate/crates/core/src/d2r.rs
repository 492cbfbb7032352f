//! Draft-to-real translation: two structure-aware streams and a mask
//! fusion network.
//!
//! The detail stream `B_d = g_d(S_d(d))` is judged by `D_d` conditioned on
//! the raw draft, which rewards keeping the draft's texture. The shape
//! stream `B_s = g_s(S_s(d))` is judged by `D_s` conditioned on its own
//! distortion image `t_s`, which rewards outlines that follow the warp. The
//! fusion network then predicts `m` and returns `C = B_s ⊗ m + B_d ⊗ (1 − m)`.
//!
//! Streams train jointly with independent optimizers; fusion trains after,
//! with both streams frozen.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Archive;
use crate::config::ModelConfig;
use crate::data::PairedSample;
use crate::error::{contract, Error, Result};
use crate::imagecore::{blend_two, tv_loss, ImagePlane, ValueRange};
use crate::losses::{
    contextual_loss, hinge_disc, hinge_gen, l1, perceptual_loss, total_d2r_detail, total_d2r_fusion,
    total_d2r_shape, Objective, PerceptualExtractor, StreamTerms,
};
use crate::networks::{FinalActivation, PatchDisc, PatchDiscSpec, UNet, UNetSpec};
use crate::params::{Adam, ParamStore};
use crate::pipeline::{
    apply, finite, plane, provenance, Condition, Critic, ProvenanceRecord, Report, StoreReader, StoreWriter,
    Stream, StreamPass,
};
use crate::sampler::{SaliencySampler, WarpGrid};
use crate::tensor::Tensor;

/// Ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum D2RVariant {
    Full,
    /// One stream trained against both `D_d` and `D_s`.
    DoubleD,
    /// Detail stream only.
    NoShape,
    /// Shape stream only.
    NoDetail,
    /// Detail stream, then a refinement net on `(t_d, B_d)` judged with a
    /// distortion-conditioned discriminator.
    TwoSteps,
    /// Two steps, with the refinement output fused against `B_d`.
    TwoStepsPlus,
}

impl D2RVariant {
    pub const ALL: [D2RVariant; 6] = [
        D2RVariant::Full,
        D2RVariant::DoubleD,
        D2RVariant::NoShape,
        D2RVariant::NoDetail,
        D2RVariant::TwoSteps,
        D2RVariant::TwoStepsPlus,
    ];

    pub fn name(self) -> &'static str {
        match self {
            D2RVariant::Full => "full",
            D2RVariant::DoubleD => "double_d",
            D2RVariant::NoShape => "no_shape",
            D2RVariant::NoDetail => "no_detail",
            D2RVariant::TwoSteps => "two_steps",
            D2RVariant::TwoStepsPlus => "two_steps_plus",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            let names: Vec<_> = Self::ALL.iter().map(|v| v.name()).collect();
            Error::Config(format!("variant: unknown d2r variant `{s}` (expected one of {})", names.join(", ")))
        })
    }

    fn has_detail(self) -> bool {
        self != D2RVariant::NoDetail
    }

    fn has_shape(self) -> bool {
        matches!(self, D2RVariant::Full | D2RVariant::NoDetail)
    }

    fn has_refiner(self) -> bool {
        matches!(self, D2RVariant::TwoSteps | D2RVariant::TwoStepsPlus)
    }

    fn has_fusion(self) -> bool {
        matches!(self, D2RVariant::Full | D2RVariant::TwoStepsPlus)
    }
}

/// Training stages, in schedule order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Streams,
    Refine,
    Fusion,
}

/// Second step of the two-step variants.
#[derive(Debug, Clone)]
pub struct Refiner {
    pub gen: UNet,
    pub opt: Adam,
    pub critic: Critic,
}

#[derive(Debug, Clone)]
pub struct Fusion {
    pub net: UNet,
    pub opt: Adam,
}

/// All networks and optimizer state of one draft-to-real run.
#[derive(Debug, Clone)]
pub struct D2RModel {
    pub config: ModelConfig,
    pub variant: D2RVariant,
    /// Detail stream, or the single stream of `double_d`.
    pub detail: Option<Stream>,
    pub shape: Option<Stream>,
    /// Discriminators of the detail and shape streams.
    pub detail_critics: Vec<Critic>,
    pub shape_critics: Vec<Critic>,
    pub refiner: Option<Refiner>,
    pub fusion: Option<Fusion>,
    /// Optimizer steps taken per stage.
    pub steps: [u64; 3],
    extractor: PerceptualExtractor,
    trace: Option<Vec<ProvenanceRecord>>,
}

/// Intermediates of one inference pass. Panels a variant does not have
/// are `None`.
#[derive(Debug, Clone)]
pub struct D2ROutput {
    pub t_d: Option<ImagePlane>,
    pub b_d: Option<ImagePlane>,
    pub t_s: Option<ImagePlane>,
    pub b_s: Option<ImagePlane>,
    /// Refinement output of the two-step variants.
    pub refined: Option<ImagePlane>,
    pub m: Option<ImagePlane>,
    pub c: ImagePlane,
    pub grid_d: Option<WarpGrid>,
    pub grid_s: Option<WarpGrid>,
}

impl D2ROutput {
    /// `[d | t_d | B_d | t_s | B_s | m | C]`. The two-step variants show
    /// the refinement output in the `B_s` slot; missing panels are gray.
    pub fn strip(&self, d: &ImagePlane) -> Result<ImagePlane> {
        let blank = ImagePlane::filled(0.0, 3, d.height(), d.width(), ValueRange::SignedUnit)?;
        let pick = |p: &Option<ImagePlane>| p.clone().unwrap_or_else(|| blank.clone());
        let second = self.b_s.as_ref().or(self.refined.as_ref()).cloned();
        ImagePlane::hstack(&[
            d.clone(),
            pick(&self.t_d),
            pick(&self.b_d),
            pick(&self.t_s),
            pick(&second),
            pick(&self.m),
            self.c.clone(),
        ])
    }
}

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl D2RModel {
    pub fn new(config: ModelConfig, variant: D2RVariant, seed: u64) -> Result<Self> {
        config.validate()?;
        let extractor = PerceptualExtractor::from_config(&config.extractor)?;
        let adam = config.adam;
        let gen_spec = |inputs| UNetSpec::new(inputs, config.generator_depth, config.generator_width, FinalActivation::Tanh);
        let disc = |rng: &mut ChaCha8Rng| {
            PatchDisc::new(
                PatchDiscSpec {
                    in_channels: 6,
                    n_layers: config.disc_layers,
                    base_width: config.disc_width,
                    spectral_norm: config.spectral_norm,
                    aux_classes: None,
                },
                rng,
            )
        };
        // Each network draws from its own rng stream, so adding or removing
        // a network in one variant leaves the others' initialization alone.
        let stream = |name: &str, k: u64| -> Result<Stream> {
            let sampler = SaliencySampler::new(config.sampler.clone(), 3, &mut seeded(seed, k))?;
            let gen = UNet::new(gen_spec(3), &mut seeded(seed, k + 1))?;
            Ok(Stream::new(name, sampler, gen, adam))
        };
        let mut detail = None;
        let mut detail_critics = Vec::new();
        if variant.has_detail() {
            detail = Some(stream("g_d", 1)?);
            detail_critics.push(Critic::new("D_d", disc(&mut seeded(seed, 3))?, adam, Condition::Raw));
            if variant == D2RVariant::DoubleD {
                detail_critics.push(Critic::new("D_s", disc(&mut seeded(seed, 6))?, adam, Condition::Warped));
            }
        }
        let mut shape = None;
        let mut shape_critics = Vec::new();
        if variant.has_shape() {
            shape = Some(stream("g_s", 4)?);
            shape_critics.push(Critic::new("D_s", disc(&mut seeded(seed, 6))?, adam, Condition::Warped));
        }
        let refiner = if variant.has_refiner() {
            Some(Refiner {
                gen: UNet::new(gen_spec(6), &mut seeded(seed, 7))?,
                opt: Adam::new(adam),
                critic: Critic::new("D_r", disc(&mut seeded(seed, 8))?, adam, Condition::Warped),
            })
        } else {
            None
        };
        let fusion = if variant.has_fusion() {
            let spec = UNetSpec::new(6, config.fusion_depth, config.fusion_width, FinalActivation::Sigmoid);
            Some(Fusion { net: UNet::new(spec, &mut seeded(seed, 9))?, opt: Adam::new(adam) })
        } else {
            None
        };
        Ok(D2RModel {
            config,
            variant,
            detail,
            shape,
            detail_critics,
            shape_critics,
            refiner,
            fusion,
            steps: [0; 3],
            extractor,
            trace: None,
        })
    }

    /// Stages this variant trains, in order.
    pub fn stages(&self) -> Vec<Stage> {
        let mut s = vec![Stage::Streams];
        if self.refiner.is_some() {
            s.push(Stage::Refine);
        }
        if self.fusion.is_some() {
            s.push(Stage::Fusion);
        }
        s
    }

    /// Starts recording discriminator-condition provenance.
    pub fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn trace(&self) -> &[ProvenanceRecord] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn train_step(&mut self, stage: Stage, sample: &PairedSample) -> Result<Report> {
        match stage {
            Stage::Streams => self.train_step_streams(sample),
            Stage::Refine => self.train_step_refine(sample),
            Stage::Fusion => self.train_step_fusion(sample),
        }
    }

    fn check_sample(&self, sample: &PairedSample) -> Result<(Tensor, Tensor)> {
        let d = &sample.draft;
        contract!(
            d.shape() == sample.real.shape() && d.channels() == 3,
            "sample {}: draft {:?} and real {:?} must be matching RGB images",
            sample.id,
            d.shape(),
            sample.real.shape()
        );
        contract!(d.height() == d.width(), "sample {}: images must be square", sample.id);
        self.config.check_resolution(d.height())?;
        Ok((d.to_tensor().tagged("d"), sample.real.to_tensor()))
    }

    /// One alternating discriminator/generator update of every stream.
    pub fn train_step_streams(&mut self, sample: &PairedSample) -> Result<Report> {
        let (d, r) = self.check_sample(sample)?;
        let step = self.steps[0];
        let mut report = Report::new();
        let w = self.config.weights;
        if let Some(stream) = self.detail.as_mut() {
            let (terms, pass) =
                stream_update(stream, &mut self.detail_critics, &d, &r, "t_d", &self.extractor, step, &mut self.trace, &mut report)?;
            finish_stream(stream, &pass, total_d2r_detail(terms, &w), step, &mut report)?;
        }
        if let Some(stream) = self.shape.as_mut() {
            let (terms, pass) =
                stream_update(stream, &mut self.shape_critics, &d, &r, "t_s", &self.extractor, step, &mut self.trace, &mut report)?;
            finish_stream(stream, &pass, total_d2r_shape(terms, &w), step, &mut report)?;
        }
        self.steps[0] += 1;
        Ok(report)
    }

    /// One update of the refinement net on the frozen detail stream.
    pub fn train_step_refine(&mut self, sample: &PairedSample) -> Result<Report> {
        let (d, r) = self.check_sample(sample)?;
        let step = self.steps[1];
        let detail = self.detail.as_ref().expect("refining variants have a detail stream");
        let ref_pass = detail.pass(&d, None, "t_d", false)?;
        let (t_d, b_d) = (ref_pass.warped.detach(), ref_pass.output.detach());
        let refiner = self.refiner.as_mut().ok_or_else(|| Error::Contract(format!("variant {} has no refinement stage", self.variant.name())))?;
        let pg = refiner.gen.bind(true);
        let out = refiner.gen.forward(&pg, &Tensor::cat(&[t_d.clone(), b_d.clone()], 0))?;
        let mut report = Report::new();

        // The refinement discriminator also learns to reject the first
        // step's output.
        let critic = &mut refiner.critic;
        let pd = critic.net.bind(true);
        let real = critic.net.forward(&pd, &t_d, &r)?.scores;
        let fake = critic.net.forward(&pd, &t_d, &out.detach())?.scores;
        let first = critic.net.forward(&pd, &t_d, &b_d)?.scores;
        let loss = hinge_disc(&real, &fake).add(&first.add_scalar(1.0).relu().mean());
        report.insert("D_r.hinge".into(), finite(step, "D_r.hinge", &loss)?);
        critic.apply(&pd, &loss.backward());
        if let Some(tr) = self.trace.as_mut() {
            tr.push(provenance(step, "D_r", &t_d, &d, &ref_pass.warped));
        }

        let pd = critic.net.bind(false);
        let adv = hinge_gen(&critic.net.forward(&pd, &t_d, &out)?.scores);
        let w = self.config.weights;
        let terms = StreamTerms { adv, l1: l1(&out, &r), perceptual: perceptual_loss(&out, &r, &self.extractor)? };
        let obj = total_d2r_detail(terms, &w);
        for (k, v) in obj.components() {
            report.insert(format!("g_r.{k}"), v);
        }
        let total = obj.total(step)?;
        apply(&mut refiner.gen.params, &mut refiner.opt, &pg, &total.backward());
        self.steps[1] += 1;
        Ok(report)
    }

    /// Outputs of the frozen upstream networks that the fusion net blends:
    /// `(first, second)` with `C = second ⊗ m + first ⊗ (1 − m)`.
    fn fusion_inputs(&self, d: &Tensor) -> Result<(Tensor, Tensor)> {
        let detail = self.detail.as_ref().expect("fusing variants have a detail stream");
        let pd = detail.pass(d, None, "t_d", false)?;
        let second = match (&self.shape, &self.refiner) {
            (Some(s), _) => s.pass(d, None, "t_s", false)?.output,
            (None, Some(rf)) => rf.gen.forward(&rf.gen.bind(false), &Tensor::cat(&[pd.warped.clone(), pd.output.clone()], 0))?,
            (None, None) => unreachable!("fusion needs two inputs"),
        };
        Ok((pd.output, second))
    }

    /// One fusion update with everything upstream frozen.
    pub fn train_step_fusion(&mut self, sample: &PairedSample) -> Result<Report> {
        let (d, r) = self.check_sample(sample)?;
        let (b_d, b_s) = self.fusion_inputs(&d)?;
        self.train_fusion_on(&b_d, &b_s, &r)
    }

    /// Fusion update on given stream outputs (probes feed forced inputs).
    pub fn train_fusion_on(&mut self, b_d: &Tensor, b_s: &Tensor, r: &Tensor) -> Result<Report> {
        let step = self.steps[2];
        let fusion = self
            .fusion
            .as_mut()
            .ok_or_else(|| Error::Contract(format!("variant {} has no fusion stage", self.variant.name())))?;
        contract!(b_d.shape() == r.shape() && b_s.shape() == r.shape(), "fusion inputs must match the target shape");
        let pf = fusion.net.bind(true);
        let m = fusion.net.forward(&pf, &Tensor::cat(&[b_d.detach(), b_s.detach()], 0))?;
        let c = blend_two(&b_s.detach(), &b_d.detach(), &m);
        let cx = &self.config.contextual;
        let cx_detail = contextual_loss(&c, r, &cx.detail_layer, &self.extractor, cx)?;
        let cx_shape = contextual_loss(&c, r, &cx.shape_layer, &self.extractor, cx)?;
        let tv = tv_loss(&m, self.config.tv_mode);
        let obj = total_d2r_fusion(cx_detail, cx_shape, tv, &self.config.weights);
        let report = obj.components();
        let total = obj.total(step)?;
        apply(&mut fusion.net.params, &mut fusion.opt, &pf, &total.backward());
        self.steps[2] += 1;
        Ok(report)
    }

    /// Forward pass with every intermediate; parameters are untouched.
    pub fn infer(&self, d: &ImagePlane) -> Result<D2ROutput> {
        contract!(d.channels() == 3 && d.range() == ValueRange::SignedUnit, "draft must be a signed-unit RGB image");
        contract!(d.height() == d.width(), "draft must be square");
        self.config.check_resolution(d.height())?;
        let x = d.to_tensor().tagged("d");
        let img = |t: &Tensor| plane(t, ValueRange::SignedUnit);
        let mut out = D2ROutput { t_d: None, b_d: None, t_s: None, b_s: None, refined: None, m: None, c: d.clone(), grid_d: None, grid_s: None };
        let mut det = None;
        if let Some(s) = &self.detail {
            let p = s.pass(&x, None, "t_d", false)?;
            out.t_d = Some(img(&p.warped)?);
            out.b_d = Some(img(&p.output)?);
            out.grid_d = Some(WarpGrid::from_tensor(&p.grid)?);
            det = Some(p);
        }
        let mut second = None;
        if let Some(s) = &self.shape {
            let p = s.pass(&x, None, "t_s", false)?;
            out.t_s = Some(img(&p.warped)?);
            out.b_s = Some(img(&p.output)?);
            out.grid_s = Some(WarpGrid::from_tensor(&p.grid)?);
            second = Some(p.output);
        }
        if let (Some(rf), Some(p)) = (&self.refiner, &det) {
            let y = rf.gen.forward(&rf.gen.bind(false), &Tensor::cat(&[p.warped.clone(), p.output.clone()], 0))?;
            out.refined = Some(img(&y)?);
            second = Some(y);
        }
        let first = det.as_ref().map(|p| p.output.clone());
        out.c = match (&self.fusion, first, second) {
            (Some(f), Some(a), Some(b)) => {
                let m = f.net.forward(&f.net.bind(false), &Tensor::cat(&[a.clone(), b.clone()], 0))?;
                out.m = Some(plane(&m, ValueRange::Unit)?);
                img(&blend_two(&b, &a, &m))?
            }
            (None, _, Some(b)) => img(&b)?,
            (None, Some(a), None) => img(&a)?,
            _ => unreachable!("every variant produces an output"),
        };
        Ok(out)
    }

    /// Digest over every network's parameters.
    pub fn digest(&self) -> String {
        self.collect().store.extract_prefixed("net").digest()
    }

    /// Digest of the stream networks alone (fusion freezes them).
    pub fn stream_digest(&self) -> String {
        let mut all = ParamStore::new();
        for s in self.detail.iter().chain(&self.shape) {
            all.extend_prefixed(&s.name, &s.sampler.params);
            all.extend_prefixed(&format!("{}.gen", s.name), &s.gen.params);
        }
        all.digest()
    }

    fn collect(&self) -> StoreWriter {
        let mut w = StoreWriter::default();
        for s in self.detail.iter().chain(&self.shape) {
            w.stream(s);
        }
        for c in self.detail_critics.iter().chain(&self.shape_critics) {
            // `D_s` under double_d lives with the detail stream; names are
            // unique within a variant either way.
            w.critic(c);
        }
        if let Some(rf) = &self.refiner {
            w.params("g_r", &rf.gen.params);
            w.adam("g_r", &rf.opt);
            w.critic(&rf.critic);
        }
        if let Some(f) = &self.fusion {
            w.params("G_f", &f.net.params);
            w.adam("G_f", &f.opt);
        }
        w
    }

    pub fn to_archive(&self) -> Archive {
        let w = self.collect();
        let meta = serde_json::json!({
            "task": "d2r",
            "variant": self.variant,
            "model": self.config,
            "steps": self.steps,
            "adam_steps": w.adam_steps,
        });
        Archive { meta, tensors: w.store }
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let meta = &archive.meta;
        if meta.get("task").and_then(|t| t.as_str()) != Some("d2r") {
            return Err(Error::Version("checkpoint is not a d2r model".into()));
        }
        let field = |k: &str| meta.get(k).cloned().ok_or_else(|| Error::Version(format!("checkpoint meta lacks `{k}`")));
        let bad = |k: &str, e: serde_json::Error| Error::Version(format!("checkpoint meta `{k}`: {e}"));
        let variant: D2RVariant = serde_json::from_value(field("variant")?).map_err(|e| bad("variant", e))?;
        let config: ModelConfig = serde_json::from_value(field("model")?).map_err(|e| bad("model", e))?;
        let steps: [u64; 3] = serde_json::from_value(field("steps")?).map_err(|e| bad("steps", e))?;
        let adam_steps = serde_json::from_value(field("adam_steps")?).map_err(|e| bad("adam_steps", e))?;
        let mut model = D2RModel::new(config, variant, 0)?;
        let r = StoreReader { store: &archive.tensors, adam_steps };
        for s in model.detail.iter_mut().chain(model.shape.iter_mut()) {
            r.stream(s)?;
        }
        for c in model.detail_critics.iter_mut().chain(model.shape_critics.iter_mut()) {
            r.critic(c)?;
        }
        if let Some(rf) = model.refiner.as_mut() {
            r.params("g_r", &mut rf.gen.params)?;
            r.adam("g_r", &mut rf.opt);
            r.critic(&mut rf.critic)?;
        }
        if let Some(f) = model.fusion.as_mut() {
            r.params("G_f", &mut f.net.params)?;
            r.adam("G_f", &mut f.opt);
        }
        let expected = model.collect().store.len();
        if expected != archive.tensors.len() {
            return Err(Error::Version(format!(
                "checkpoint holds {} arrays, variant {} expects {expected}",
                archive.tensors.len(),
                variant.name()
            )));
        }
        model.steps = steps;
        Ok(model)
    }
}

/// Discriminator updates for one stream, then the generator-side terms.
#[allow(clippy::too_many_arguments)]
fn stream_update(
    stream: &Stream,
    critics: &mut [Critic],
    d: &Tensor,
    r: &Tensor,
    tag: &'static str,
    extractor: &PerceptualExtractor,
    step: u64,
    trace: &mut Option<Vec<ProvenanceRecord>>,
    report: &mut Report,
) -> Result<(StreamTerms, StreamPass)> {
    let pass = stream.pass(d, None, tag, true)?;
    let fake = pass.output.detach();
    for critic in critics.iter_mut() {
        // The warped condition stays on the graph so provenance can be read
        // off it; the sampler gradients this produces are never applied.
        let cond = match critic.condition {
            Condition::Raw => d.clone(),
            Condition::Warped => pass.warped.clone(),
        };
        let pd = critic.net.bind(true);
        let real = critic.net.forward(&pd, &cond, r)?.scores;
        let fake = critic.net.forward(&pd, &cond, &fake)?.scores;
        let loss = hinge_disc(&real, &fake);
        let key = format!("{}.hinge", critic.name);
        report.insert(key.clone(), finite(step, &key, &loss)?);
        critic.apply(&pd, &loss.backward());
        if let Some(tr) = trace.as_mut() {
            tr.push(provenance(step, &critic.name, &cond, d, &pass.warped));
        }
    }
    // Generator side: discriminators are constants here, and the warped
    // condition keeps its graph so the sampler also learns from it.
    let mut adv: Option<Tensor> = None;
    for critic in critics.iter() {
        let cond = match critic.condition {
            Condition::Raw => d.clone(),
            Condition::Warped => pass.warped.clone(),
        };
        let pd = critic.net.bind(false);
        let g = hinge_gen(&critic.net.forward(&pd, &cond, &pass.output)?.scores);
        if let Some(tr) = trace.as_mut() {
            tr.push(provenance(step, &critic.name, &cond, d, &pass.warped));
        }
        adv = Some(match adv {
            Some(a) => a.add(&g),
            None => g,
        });
    }
    let terms = StreamTerms {
        adv: adv.expect("every stream has a discriminator"),
        l1: l1(&pass.output, r),
        perceptual: perceptual_loss(&pass.output, r, extractor)?,
    };
    Ok((terms, pass))
}

fn finish_stream(stream: &mut Stream, pass: &StreamPass, obj: Objective, step: u64, report: &mut Report) -> Result<()> {
    for (k, v) in obj.components() {
        report.insert(format!("{}.{k}", stream.name), v);
    }
    let total = obj.total(step)?;
    report.insert(format!("{}.total", stream.name), total.item());
    stream.apply(pass, &total.backward());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_pair, SynthConfig};

    fn small_config() -> ModelConfig {
        ModelConfig { generator_depth: 3, generator_width: 8, disc_width: 8, ..Default::default() }
    }

    fn pair(seed: u64, n: usize) -> PairedSample {
        let cfg = SynthConfig { resolution: n, ..Default::default() };
        synth_pair(&cfg, "000000", &mut seeded(seed, 0)).unwrap().sample
    }

    #[test]
    fn variant_names_round_trip() {
        for v in D2RVariant::ALL {
            assert_eq!(D2RVariant::parse(v.name()).unwrap(), v);
        }
        assert!(D2RVariant::parse("triple_d").unwrap_err().to_string().contains("triple_d"));
    }

    #[test]
    fn zero_reconstruction_weights_leave_pure_hinge() {
        let mut cfg = small_config();
        cfg.weights.stream_l1 = 0.0;
        cfg.weights.stream_perceptual = 0.0;
        let mut m = D2RModel::new(cfg, D2RVariant::Full, 1).unwrap();
        let rep = m.train_step_streams(&pair(1, 32)).unwrap();
        for s in ["g_d", "g_s"] {
            assert_eq!(rep[&format!("{s}.total")], rep[&format!("{s}.adv")], "{rep:?}");
            assert!(rep[&format!("{s}.l1")] > 0.0);
        }
    }

    #[test]
    fn identical_seeds_give_identical_runs() {
        let sample = pair(2, 32);
        let run = || {
            let mut m = D2RModel::new(small_config(), D2RVariant::Full, 7).unwrap();
            let reps: Vec<Report> = (0..3).map(|_| m.train_step_streams(&sample).unwrap()).collect();
            (reps, m.digest())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn fusion_report_schema() {
        let mut m = D2RModel::new(small_config(), D2RVariant::Full, 3).unwrap();
        let rep = m.train_step_fusion(&pair(3, 32)).unwrap();
        let keys: Vec<&str> = rep.keys().map(String::as_str).collect();
        assert_eq!(keys, ["cx_detail", "cx_shape", "tv"]);
    }

    #[test]
    fn fusion_leaves_streams_untouched() {
        let mut m = D2RModel::new(small_config(), D2RVariant::Full, 4).unwrap();
        let sample = pair(4, 32);
        m.train_step_streams(&sample).unwrap();
        let before = m.stream_digest();
        let all = m.digest();
        for _ in 0..3 {
            m.train_step_fusion(&sample).unwrap();
        }
        assert_eq!(m.stream_digest(), before);
        assert_ne!(m.digest(), all);
    }

    #[test]
    fn forced_equal_inputs_make_contextual_terms_mask_independent() {
        let mut m = D2RModel::new(small_config(), D2RVariant::Full, 5).unwrap();
        let r = pair(5, 32).real.to_tensor();
        let first = m.train_fusion_on(&r, &r, &r).unwrap();
        let mut last = first.clone();
        for _ in 0..20 {
            last = m.train_fusion_on(&r, &r, &r).unwrap();
        }
        assert!((first["cx_detail"] - last["cx_detail"]).abs() < 1e-9);
        assert!((first["cx_shape"] - last["cx_shape"]).abs() < 1e-9);
        assert!(last["tv"] < first["tv"], "{first:?} -> {last:?}");
    }

    #[test]
    fn large_tv_weight_flattens_the_mask() {
        let mut cfg = small_config();
        cfg.weights.fusion_tv = 1000.0;
        cfg.adam.lr = 1e-2;
        let mut m = D2RModel::new(cfg, D2RVariant::Full, 6).unwrap();
        let a = pair(6, 32);
        let (d, r) = (a.draft.to_tensor(), a.real.to_tensor());
        let mut tv = f64::INFINITY;
        for _ in 0..150 {
            tv = m.train_fusion_on(&d, &r, &r).unwrap()["tv"];
        }
        assert!(tv < 1e-3, "tv = {tv}");
    }

    #[test]
    fn single_stream_variants_return_their_stream() {
        let d = pair(7, 32).draft;
        let m = D2RModel::new(small_config(), D2RVariant::NoShape, 8).unwrap();
        let out = m.infer(&d).unwrap();
        assert_eq!(Some(&out.c), out.b_d.as_ref());
        assert!(out.m.is_none() && out.b_s.is_none());
        let m = D2RModel::new(small_config(), D2RVariant::NoDetail, 8).unwrap();
        let out = m.infer(&d).unwrap();
        assert_eq!(Some(&out.c), out.b_s.as_ref());
    }

    #[test]
    fn fused_output_lies_between_streams() {
        let m = D2RModel::new(small_config(), D2RVariant::Full, 9).unwrap();
        for k in 0..3 {
            let out = m.infer(&pair(20 + k, 32).draft).unwrap();
            let (bd, bs) = (out.b_d.unwrap(), out.b_s.unwrap());
            for ((c, a), b) in out.c.data().iter().zip(bd.data()).zip(bs.data()) {
                assert!(*c >= a.min(*b) - 1e-12 && *c <= a.max(*b) + 1e-12);
            }
        }
    }

    #[test]
    fn discriminators_see_their_own_condition() {
        for variant in [D2RVariant::Full, D2RVariant::DoubleD, D2RVariant::TwoSteps] {
            let mut m = D2RModel::new(small_config(), variant, 10).unwrap();
            m.enable_trace();
            let s = pair(10, 32);
            for stage in m.stages() {
                m.train_step(stage, &s).unwrap();
            }
            assert!(!m.trace().is_empty());
            for rec in m.trace() {
                match rec.disc.as_str() {
                    "D_d" => assert!(rec.condition_is_input && !rec.condition_depends_on_warp && rec.condition_tag == Some("d")),
                    "D_s" | "D_r" => assert!(!rec.condition_is_input && rec.condition_depends_on_warp),
                    other => panic!("unexpected discriminator {other}"),
                }
            }
        }
    }

    #[test]
    fn checkpoint_resume_matches_uninterrupted_training() {
        let sample = pair(11, 32);
        let mut a = D2RModel::new(small_config(), D2RVariant::TwoStepsPlus, 12).unwrap();
        for stage in a.stages() {
            a.train_step(stage, &sample).unwrap();
        }
        let mut b = D2RModel::from_archive(&a.to_archive()).unwrap();
        assert_eq!(a.digest(), b.digest());
        for stage in a.stages() {
            assert_eq!(a.train_step(stage, &sample).unwrap(), b.train_step(stage, &sample).unwrap());
        }
        assert_eq!(a.digest(), b.digest());
        assert_eq!(a.infer(&sample.draft).unwrap().c, b.infer(&sample.draft).unwrap().c);
    }

    #[test]
    fn checkpoint_of_another_variant_is_rejected() {
        let a = D2RModel::new(small_config(), D2RVariant::NoShape, 1).unwrap().to_archive();
        let mut arch = a.clone();
        arch.meta["variant"] = serde_json::json!("full");
        assert!(matches!(D2RModel::from_archive(&arch), Err(Error::Version(_))));
        let mut arch = a;
        arch.meta["task"] = serde_json::json!("r2d");
        assert!(matches!(D2RModel::from_archive(&arch), Err(Error::Version(_))));
    }

    #[test]
    fn indivisible_resolution_is_a_config_error() {
        let m = D2RModel::new(small_config(), D2RVariant::Full, 1).unwrap();
        let d = ImagePlane::filled(0.0, 3, 36, 36, ValueRange::SignedUnit).unwrap();
        assert!(matches!(m.infer(&d), Err(Error::Config(_))));
    }

    #[test]
    fn strip_has_seven_panels() {
        let m = D2RModel::new(small_config(), D2RVariant::TwoSteps, 1).unwrap();
        let d = pair(1, 32).draft;
        let strip = m.infer(&d).unwrap().strip(&d).unwrap();
        assert_eq!(strip.shape(), [3, 32, 7 * 32]);
    }
}
