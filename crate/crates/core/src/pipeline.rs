//! Pieces shared by both translation directions: discriminators with their
//! optimizers, update helpers, provenance records and checkpoint plumbing.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::{PatchDisc, UNet};
use crate::params::{Adam, AdamConfig, Bound, ParamStore};
use crate::sampler::SaliencySampler;
use crate::tensor::{Grads, Tensor};

/// Unweighted loss components of one training step, keyed by name.
pub type Report = BTreeMap<String, f64>;

/// What a conditional discriminator sees next to the image it judges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    /// The untouched input image.
    Raw,
    /// The sampler's distortion image.
    Warped,
}

/// A discriminator, its optimizer, and its conditioning rule.
#[derive(Debug, Clone)]
pub struct Critic {
    pub name: String,
    pub net: PatchDisc,
    pub opt: Adam,
    pub condition: Condition,
}

impl Critic {
    pub fn new(name: &str, net: PatchDisc, adam: AdamConfig, condition: Condition) -> Self {
        Critic { name: name.to_string(), net, opt: Adam::new(adam), condition }
    }

    /// Applies gradients from a discriminator pass and advances the spectral
    /// power iteration by one step.
    pub(crate) fn apply(&mut self, bound: &Bound, grads: &Grads) {
        apply(&mut self.net.params, &mut self.opt, bound, grads);
        self.net.refresh_spectral(1);
    }
}

/// Which image a discriminator call was conditioned on. Collected when
/// tracing is on, so tests can assert the conditioning rules on the graph
/// that was actually built.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ProvenanceRecord {
    pub step: u64,
    pub disc: String,
    pub condition_tag: Option<&'static str>,
    /// The condition is the raw input tensor itself.
    pub condition_is_input: bool,
    /// The condition was computed from this stream's distortion image.
    pub condition_depends_on_warp: bool,
}

pub(crate) fn provenance(step: u64, disc: &str, cond: &Tensor, input: &Tensor, warp: &Tensor) -> ProvenanceRecord {
    ProvenanceRecord {
        step,
        disc: disc.to_string(),
        condition_tag: cond.tag(),
        condition_is_input: cond.id() == input.id(),
        condition_depends_on_warp: cond.id() == warp.id() || cond.depends_on(warp),
    }
}

pub(crate) fn apply(store: &mut ParamStore, opt: &mut Adam, bound: &Bound, grads: &Grads) {
    opt.update(store, &bound.gradients(grads));
}

/// Rejects a non-finite discriminator loss.
pub(crate) fn finite(step: u64, component: &str, t: &Tensor) -> Result<f64> {
    let v = t.item();
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Divergence { step, component: component.to_string(), value: v })
    }
}

/// Sampler plus generator: `B = g(S(x))`.
#[derive(Debug, Clone)]
pub struct Stream {
    pub name: String,
    pub sampler: SaliencySampler,
    pub gen: UNet,
    pub opt_sampler: Adam,
    pub opt_gen: Adam,
}

/// Graph tensors of one stream pass.
pub(crate) struct StreamPass {
    pub sampler: Bound,
    pub gen: Bound,
    pub grid: Tensor,
    pub warped: Tensor,
    pub output: Tensor,
}

impl Stream {
    pub fn new(name: &str, sampler: SaliencySampler, gen: UNet, adam: AdamConfig) -> Self {
        Stream { name: name.to_string(), sampler, gen, opt_sampler: Adam::new(adam), opt_gen: Adam::new(adam) }
    }

    pub(crate) fn pass(&self, x: &Tensor, extra: Option<&Tensor>, tag: &'static str, trainable: bool) -> Result<StreamPass> {
        let ps = self.sampler.params.bind(trainable);
        let pg = self.gen.bind(trainable);
        let s = self.sampler.forward(&ps, x)?;
        let warped = s.warped.tagged(tag);
        let input = match extra {
            Some(e) => Tensor::cat(&[warped.clone(), e.clone()], 0),
            None => warped.clone(),
        };
        let output = self.gen.forward(&pg, &input)?;
        Ok(StreamPass { sampler: ps, gen: pg, grid: s.grid, warped, output })
    }

    pub(crate) fn apply(&mut self, pass: &StreamPass, grads: &Grads) {
        apply(&mut self.sampler.params, &mut self.opt_sampler, &pass.sampler, grads);
        apply(&mut self.gen.params, &mut self.opt_gen, &pass.gen, grads);
    }

    pub fn digest(&self) -> String {
        let mut all = ParamStore::new();
        all.extend_prefixed("sampler", &self.sampler.params);
        all.extend_prefixed("gen", &self.gen.params);
        all.digest()
    }
}

/// Flattens named parameter stores and optimizer states into one archive
/// store, and reads them back.
#[derive(Debug, Default)]
pub(crate) struct StoreWriter {
    pub store: ParamStore,
    pub adam_steps: BTreeMap<String, u64>,
}

impl StoreWriter {
    pub fn params(&mut self, name: &str, p: &ParamStore) {
        self.store.extend_prefixed(&format!("net/{name}"), p);
    }

    pub fn adam(&mut self, name: &str, a: &Adam) {
        self.store.extend_prefixed(&format!("opt/{name}/m"), &a.m);
        self.store.extend_prefixed(&format!("opt/{name}/v"), &a.v);
        self.adam_steps.insert(name.to_string(), a.step);
    }

    pub fn stream(&mut self, s: &Stream) {
        self.params(&format!("{}.sampler", s.name), &s.sampler.params);
        self.params(&format!("{}.gen", s.name), &s.gen.params);
        self.adam(&format!("{}.sampler", s.name), &s.opt_sampler);
        self.adam(&format!("{}.gen", s.name), &s.opt_gen);
    }

    pub fn critic(&mut self, c: &Critic) {
        self.params(&c.name, &c.net.params);
        self.adam(&c.name, &c.opt);
    }
}

pub(crate) struct StoreReader<'a> {
    pub store: &'a ParamStore,
    pub adam_steps: BTreeMap<String, u64>,
}

impl StoreReader<'_> {
    pub fn params(&self, name: &str, p: &mut ParamStore) -> Result<()> {
        p.load_from(&self.store.extract_prefixed(&format!("net/{name}")))
            .map_err(|e| Error::Version(format!("checkpoint network `{name}`: {e}")))
    }

    pub fn adam(&self, name: &str, a: &mut Adam) {
        a.m = self.store.extract_prefixed(&format!("opt/{name}/m"));
        a.v = self.store.extract_prefixed(&format!("opt/{name}/v"));
        a.step = self.adam_steps.get(name).copied().unwrap_or(0);
    }

    pub fn stream(&self, s: &mut Stream) -> Result<()> {
        self.params(&format!("{}.sampler", s.name), &mut s.sampler.params)?;
        self.params(&format!("{}.gen", s.name), &mut s.gen.params)?;
        self.adam(&format!("{}.sampler", s.name), &mut s.opt_sampler);
        self.adam(&format!("{}.gen", s.name), &mut s.opt_gen);
        Ok(())
    }

    pub fn critic(&self, c: &mut Critic) -> Result<()> {
        self.params(&c.name, &mut c.net.params)?;
        self.adam(&c.name, &mut c.opt);
        Ok(())
    }
}

/// Image-shaped graph tensor to a plane, clamping the float slack of the
/// final activations.
pub(crate) fn plane(t: &Tensor, range: crate::imagecore::ValueRange) -> Result<crate::imagecore::ImagePlane> {
    let (lo, hi) = range.bounds();
    let data: Vec<f64> = t.data().iter().map(|v| v.clamp(lo, hi)).collect();
    let s = t.shape();
    crate::imagecore::ImagePlane::new(data, s[0], s[1], s[2], range)
}
