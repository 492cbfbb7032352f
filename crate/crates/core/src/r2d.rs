//! Real-to-draft translation guided by an exemplar draft of the same class.
//!
//! The appearance network `B_a = g_a(S_a(r), e)` sees the warped real image
//! `t_a` and an exemplar `e` whose figure it should keep. Three
//! discriminators shape it:
//!
//! - `D_tf` (hinge) judges the output conditioned on `r ‖ e`,
//! - `D_m` (cross-entropy) judges whether output and exemplar match,
//! - `D_label` classifies the garment label from the image alone.
//!
//! A fusion net then blends `B_a`, `e` and `t_a` with two masks whose sum
//! never exceeds one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Archive;
use crate::config::ModelConfig;
use crate::data::PairedSample;
use crate::error::{contract, Error, Result};
use crate::imagecore::{blend_three, tv_loss, ImagePlane, ValueRange};
use crate::losses::{
    bce_disc, bce_gen, contextual_loss, hinge_disc, hinge_gen, l1, label_ce, label_loss, perceptual_loss,
    total_r2d_appearance, total_r2d_fusion, AppearanceTerms, PerceptualExtractor,
};
use crate::networks::{FinalActivation, PatchDisc, PatchDiscSpec, UNet, UNetSpec};
use crate::params::Adam;
use crate::pipeline::{
    apply, finite, plane, provenance, Condition, Critic, ProvenanceRecord, Report, StoreReader, StoreWriter,
    Stream,
};
use crate::sampler::{SaliencySampler, WarpGrid};
use crate::tensor::Tensor;

pub const LABEL_CLASSES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum R2DVariant {
    Full,
    /// No fusion net; `C = B_a`.
    NoFusion,
    /// No matching discriminator.
    NoDm,
    /// No generator-side label term.
    NoLabel,
}

impl R2DVariant {
    pub const ALL: [R2DVariant; 4] = [R2DVariant::Full, R2DVariant::NoFusion, R2DVariant::NoDm, R2DVariant::NoLabel];

    pub fn name(self) -> &'static str {
        match self {
            R2DVariant::Full => "full",
            R2DVariant::NoFusion => "no_fusion",
            R2DVariant::NoDm => "no_dm",
            R2DVariant::NoLabel => "no_label",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            let names: Vec<_> = Self::ALL.iter().map(|v| v.name()).collect();
            Error::Config(format!("variant: unknown r2d variant `{s}` (expected one of {})", names.join(", ")))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Appearance,
    Fusion,
}

#[derive(Debug, Clone)]
pub struct R2DModel {
    pub config: ModelConfig,
    pub variant: R2DVariant,
    pub appearance: Stream,
    /// Real/fake discriminator conditioned on `r ‖ e`.
    pub d_tf: Critic,
    pub d_m: Option<Critic>,
    /// Image-only discriminator whose auxiliary head predicts the label.
    pub d_label: Critic,
    pub fusion: Option<(UNet, Adam)>,
    /// Optimizer steps taken per stage.
    pub steps: [u64; 2],
    extractor: PerceptualExtractor,
    trace: Option<Vec<ProvenanceRecord>>,
}

#[derive(Debug, Clone)]
pub struct R2DOutput {
    pub t_a: ImagePlane,
    pub b_a: ImagePlane,
    pub m1: Option<ImagePlane>,
    pub m2: Option<ImagePlane>,
    pub c: ImagePlane,
    pub grid: WarpGrid,
}

impl R2DOutput {
    /// `[r | e | t_a | B_a | m1 | m2 | C]`; missing masks are gray.
    pub fn strip(&self, r: &ImagePlane, e: &ImagePlane) -> Result<ImagePlane> {
        let blank = ImagePlane::filled(0.0, 3, r.height(), r.width(), ValueRange::SignedUnit)?;
        let pick = |p: &Option<ImagePlane>| p.clone().unwrap_or_else(|| blank.clone());
        ImagePlane::hstack(&[
            r.clone(),
            e.clone(),
            self.t_a.clone(),
            self.b_a.clone(),
            pick(&self.m1),
            pick(&self.m2),
            self.c.clone(),
        ])
    }
}

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl R2DModel {
    pub fn new(config: ModelConfig, variant: R2DVariant, seed: u64) -> Result<Self> {
        config.validate()?;
        let extractor = PerceptualExtractor::from_config(&config.extractor)?;
        let adam = config.adam;
        let disc = |in_channels, spectral_norm, aux_classes, k| {
            PatchDisc::new(
                PatchDiscSpec { in_channels, n_layers: config.disc_layers, base_width: config.disc_width, spectral_norm, aux_classes },
                &mut seeded(seed, k),
            )
        };
        let sampler = SaliencySampler::new(config.sampler.clone(), 3, &mut seeded(seed, 1))?;
        let gen = UNet::new(
            UNetSpec::new(6, config.generator_depth, config.generator_width, FinalActivation::Tanh),
            &mut seeded(seed, 2),
        )?;
        let appearance = Stream::new("g_a", sampler, gen, adam);
        let d_tf = Critic::new("D_tf", disc(9, config.spectral_norm, None, 3)?, adam, Condition::Raw);
        let d_m = match variant {
            R2DVariant::NoDm => None,
            _ => Some(Critic::new("D_m", disc(6, false, None, 4)?, adam, Condition::Raw)),
        };
        let d_label = Critic::new("D_label", disc(3, false, Some(LABEL_CLASSES), 5)?, adam, Condition::Raw);
        let fusion = match variant {
            R2DVariant::NoFusion => None,
            _ => {
                let spec = UNetSpec::new(9, config.fusion_depth, config.fusion_width, FinalActivation::Simplex);
                Some((UNet::new(spec, &mut seeded(seed, 6))?, Adam::new(adam)))
            }
        };
        Ok(R2DModel { config, variant, appearance, d_tf, d_m, d_label, fusion, steps: [0; 2], extractor, trace: None })
    }

    pub fn stages(&self) -> Vec<Stage> {
        if self.fusion.is_some() {
            vec![Stage::Appearance, Stage::Fusion]
        } else {
            vec![Stage::Appearance]
        }
    }

    pub fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn trace(&self) -> &[ProvenanceRecord] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn train_step(&mut self, stage: Stage, sample: &PairedSample, exemplar: &ImagePlane) -> Result<Report> {
        match stage {
            Stage::Appearance => self.train_step_appearance(sample, exemplar),
            Stage::Fusion => self.train_step_fusion(sample, exemplar),
        }
    }

    fn check(&self, sample: &PairedSample, e: &ImagePlane) -> Result<(Tensor, Tensor, Tensor)> {
        let r = &sample.real;
        contract!(
            r.shape() == sample.draft.shape() && r.shape() == e.shape() && r.channels() == 3,
            "sample {}: real {:?}, draft {:?} and exemplar {:?} must be matching RGB images",
            sample.id,
            r.shape(),
            sample.draft.shape(),
            e.shape()
        );
        contract!(r.height() == r.width(), "sample {}: images must be square", sample.id);
        self.config.check_resolution(r.height())?;
        Ok((r.to_tensor().tagged("r"), sample.draft.to_tensor(), e.to_tensor().tagged("e")))
    }

    /// One alternating update of the three discriminators and the
    /// appearance network.
    pub fn train_step_appearance(&mut self, sample: &PairedSample, exemplar: &ImagePlane) -> Result<Report> {
        let (r, d, e) = self.check(sample, exemplar)?;
        let label = sample.label.encode();
        let step = self.steps[0];
        let pass = self.appearance.pass(&r, Some(&e), "t_a", true)?;
        let fake = pass.output.detach();
        let re = Tensor::cat(&[r.clone(), e.clone()], 0);
        let mut report = Report::new();

        let c = &mut self.d_tf;
        let pd = c.net.bind(true);
        let loss = hinge_disc(&c.net.forward(&pd, &re, &d)?.scores, &c.net.forward(&pd, &re, &fake)?.scores);
        report.insert("d_tf".into(), finite(step, "d_tf", &loss)?);
        c.apply(&pd, &loss.backward());

        if let Some(c) = self.d_m.as_mut() {
            let pd = c.net.bind(true);
            let loss = bce_disc(&c.net.forward(&pd, &e, &d)?.scores, &c.net.forward(&pd, &e, &fake)?.scores);
            report.insert("d_m".into(), finite(step, "d_m", &loss)?);
            c.apply(&pd, &loss.backward());
            if let Some(tr) = self.trace.as_mut() {
                tr.push(provenance(step, "D_m", &e, &r, &pass.warped));
            }
        }

        // The label head learns from real drafts and generated ones alike.
        let c = &mut self.d_label;
        let pd = c.net.bind(true);
        let logits = |x: &Tensor| -> Result<Tensor> { Ok(c.net.forward_image(&pd, x)?.logits.expect("label head")) };
        let loss = label_loss(&logits(&d)?, &logits(&fake)?, label)?;
        report.insert("d_label".into(), finite(step, "d_label", &loss)?);
        c.apply(&pd, &loss.backward());

        let out = &pass.output;
        let pd = self.d_tf.net.bind(false);
        let adv = hinge_gen(&self.d_tf.net.forward(&pd, &re, out)?.scores);
        let adv_exemplar = match &self.d_m {
            Some(c) => {
                let pd = c.net.bind(false);
                if let Some(tr) = self.trace.as_mut() {
                    tr.push(provenance(step, "D_m", &e, &r, &pass.warped));
                }
                Some(bce_gen(&c.net.forward(&pd, &e, out)?.scores))
            }
            None => None,
        };
        let label_term = match self.variant {
            R2DVariant::NoLabel => None,
            _ => {
                let pd = self.d_label.net.bind(false);
                Some(label_ce(&self.d_label.net.forward_image(&pd, out)?.logits.expect("label head"), label)?)
            }
        };
        let terms = AppearanceTerms {
            adv,
            adv_exemplar,
            l1: l1(out, &d),
            perceptual: perceptual_loss(out, &d, &self.extractor)?,
            label: label_term,
        };
        let obj = total_r2d_appearance(terms, &self.config.weights);
        report.extend(obj.components());
        let total = obj.total(step)?;
        self.appearance.apply(&pass, &total.backward());
        self.steps[0] += 1;
        Ok(report)
    }

    /// One fusion update with the appearance network frozen.
    pub fn train_step_fusion(&mut self, sample: &PairedSample, exemplar: &ImagePlane) -> Result<Report> {
        let (r, d, e) = self.check(sample, exemplar)?;
        let pass = self.appearance.pass(&r, Some(&e), "t_a", false)?;
        self.train_fusion_on(&pass.output, &e, &pass.warped, &d)
    }

    /// Fusion update on given inputs; the loss compares the blend with `d`.
    pub fn train_fusion_on(&mut self, b_a: &Tensor, e: &Tensor, t_a: &Tensor, d: &Tensor) -> Result<Report> {
        let step = self.steps[1];
        let (net, opt) = self
            .fusion
            .as_mut()
            .ok_or_else(|| Error::Contract(format!("variant {} has no fusion stage", self.variant.name())))?;
        let pf = net.bind(true);
        let (b_a, e, t_a) = (b_a.detach(), e.detach(), t_a.detach());
        let (m1, m2) = masks(&net.forward(&pf, &Tensor::cat(&[b_a.clone(), e.clone(), t_a.clone()], 0))?);
        let c = blend_three(&b_a, &e, &t_a, &m1, &m2);
        let cx = &self.config.contextual;
        let obj = total_r2d_fusion(
            contextual_loss(&c, d, &cx.detail_layer, &self.extractor, cx)?,
            contextual_loss(&c, d, &cx.shape_layer, &self.extractor, cx)?,
            tv_loss(&m1, self.config.tv_mode),
            tv_loss(&m2, self.config.tv_mode),
            &self.config.weights,
        );
        let report = obj.components();
        let total = obj.total(step)?;
        apply(&mut net.params, opt, &pf, &total.backward());
        self.steps[1] += 1;
        Ok(report)
    }

    /// Forward pass with every intermediate; parameters are untouched.
    pub fn infer(&self, r: &ImagePlane, e: &ImagePlane) -> Result<R2DOutput> {
        contract!(r.channels() == 3 && r.range() == ValueRange::SignedUnit, "real image must be signed-unit RGB");
        contract!(e.shape() == r.shape() && e.range() == ValueRange::SignedUnit, "exemplar must match the real image");
        contract!(r.height() == r.width(), "images must be square");
        self.config.check_resolution(r.height())?;
        let (rt, et) = (r.to_tensor(), e.to_tensor());
        let p = self.appearance.pass(&rt, Some(&et), "t_a", false)?;
        let img = |t: &Tensor| plane(t, ValueRange::SignedUnit);
        let (mut m1p, mut m2p) = (None, None);
        let c = match &self.fusion {
            Some((net, _)) => {
                let s = net.forward(&net.bind(false), &Tensor::cat(&[p.output.clone(), et.clone(), p.warped.clone()], 0))?;
                let (m1, m2) = masks(&s);
                m1p = Some(plane(&m1, ValueRange::Unit)?);
                m2p = Some(plane(&m2, ValueRange::Unit)?);
                img(&blend_three(&p.output, &et, &p.warped, &m1, &m2))?
            }
            None => img(&p.output)?,
        };
        Ok(R2DOutput {
            t_a: img(&p.warped)?,
            b_a: img(&p.output)?,
            m1: m1p,
            m2: m2p,
            c,
            grid: WarpGrid::from_tensor(&p.grid)?,
        })
    }

    /// Label predicted by the auxiliary head (encoded `sleeve·2 + bottom`).
    pub fn classify(&self, image: &ImagePlane) -> Result<usize> {
        let out = self.d_label.net.forward_image(&self.d_label.net.bind(false), &image.to_tensor())?;
        let z = out.logits.expect("label head");
        Ok(z.data().iter().enumerate().fold(0, |best, (i, v)| if *v > z.data()[best] { i } else { best }))
    }

    pub fn digest(&self) -> String {
        self.collect().store.extract_prefixed("net").digest()
    }

    pub fn appearance_digest(&self) -> String {
        self.appearance.digest()
    }

    fn collect(&self) -> StoreWriter {
        let mut w = StoreWriter::default();
        w.stream(&self.appearance);
        w.critic(&self.d_tf);
        if let Some(c) = &self.d_m {
            w.critic(c);
        }
        w.critic(&self.d_label);
        if let Some((net, opt)) = &self.fusion {
            w.params("G_f", &net.params);
            w.adam("G_f", opt);
        }
        w
    }

    pub fn to_archive(&self) -> Archive {
        let w = self.collect();
        let meta = serde_json::json!({
            "task": "r2d",
            "variant": self.variant,
            "model": self.config,
            "steps": self.steps,
            "adam_steps": w.adam_steps,
        });
        Archive { meta, tensors: w.store }
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let meta = &archive.meta;
        if meta.get("task").and_then(|t| t.as_str()) != Some("r2d") {
            return Err(Error::Version("checkpoint is not an r2d model".into()));
        }
        let field = |k: &str| meta.get(k).cloned().ok_or_else(|| Error::Version(format!("checkpoint meta lacks `{k}`")));
        let bad = |k: &str, e: serde_json::Error| Error::Version(format!("checkpoint meta `{k}`: {e}"));
        let variant: R2DVariant = serde_json::from_value(field("variant")?).map_err(|e| bad("variant", e))?;
        let config: ModelConfig = serde_json::from_value(field("model")?).map_err(|e| bad("model", e))?;
        let steps: [u64; 2] = serde_json::from_value(field("steps")?).map_err(|e| bad("steps", e))?;
        let adam_steps = serde_json::from_value(field("adam_steps")?).map_err(|e| bad("adam_steps", e))?;
        let mut model = R2DModel::new(config, variant, 0)?;
        let r = StoreReader { store: &archive.tensors, adam_steps };
        r.stream(&mut model.appearance)?;
        r.critic(&mut model.d_tf)?;
        if let Some(c) = model.d_m.as_mut() {
            r.critic(c)?;
        }
        r.critic(&mut model.d_label)?;
        if let Some((net, opt)) = model.fusion.as_mut() {
            r.params("G_f", &mut net.params)?;
            r.adam("G_f", opt);
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

/// First two simplex channels as the dual masks.
fn masks(s: &Tensor) -> (Tensor, Tensor) {
    (s.narrow(0, 0, 1), s.narrow(0, 1, 1))
}
