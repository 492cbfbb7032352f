//! Training driver: schedule, run directory, loss log, manifest and
//! resumable checkpoints.
//!
//! A run directory holds
//!
//! - `manifest.json`: the full config, seeds, dataset digest and digests of
//!   the extractor and final parameters,
//! - `losses.csv`: `step,stage,component,value`, one row per reported
//!   component,
//! - `checkpoint.dft`: every parameter and optimizer moment plus the global
//!   step, rewritten atomically.
//!
//! Sample and exemplar choices at global step `k` come from an rng keyed by
//! `(seed, k)`, so a resumed run draws exactly what an uninterrupted one
//! would.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Archive};
use crate::config::{RunConfig, Task};
use crate::d2r::{self, D2RModel, D2RVariant};
use crate::data::{select_exemplar, ClassPartition, PairedSample};
use crate::error::{Error, Result};
use crate::losses::PerceptualExtractor;
use crate::pipeline::Report;
use crate::r2d::{self, R2DModel, R2DVariant};

pub const CHECKPOINT_FILE: &str = "checkpoint.dft";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOSSES_FILE: &str = "losses.csv";
pub const DIVERGENCE_FILE: &str = "divergence.json";

/// Rng stream reserved for per-step sample draws.
const SAMPLE_STREAM: u64 = 1 << 32;

#[derive(Debug, Clone)]
pub enum AnyModel {
    D2r(D2RModel),
    R2d(R2DModel),
}

impl AnyModel {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        Ok(match cfg.task {
            Task::D2r => AnyModel::D2r(D2RModel::new(cfg.model.clone(), D2RVariant::parse(&cfg.variant)?, cfg.seed)?),
            Task::R2d => AnyModel::R2d(R2DModel::new(cfg.model.clone(), R2DVariant::parse(&cfg.variant)?, cfg.seed)?),
        })
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        match a.meta.get("task").and_then(|t| t.as_str()) {
            Some("d2r") => Ok(AnyModel::D2r(D2RModel::from_archive(a)?)),
            Some("r2d") => Ok(AnyModel::R2d(R2DModel::from_archive(a)?)),
            other => Err(Error::Version(format!("checkpoint task {other:?} is neither d2r nor r2d"))),
        }
    }

    pub fn to_archive(&self) -> Archive {
        match self {
            AnyModel::D2r(m) => m.to_archive(),
            AnyModel::R2d(m) => m.to_archive(),
        }
    }

    pub fn digest(&self) -> String {
        match self {
            AnyModel::D2r(m) => m.digest(),
            AnyModel::R2d(m) => m.digest(),
        }
    }

    pub fn task(&self) -> Task {
        match self {
            AnyModel::D2r(_) => Task::D2r,
            AnyModel::R2d(_) => Task::R2d,
        }
    }
}

/// Stage names with their step budgets, in order.
fn plan(model: &AnyModel, cfg: &RunConfig) -> Vec<(&'static str, u64)> {
    let s = &cfg.schedule;
    match model {
        AnyModel::D2r(m) => m
            .stages()
            .into_iter()
            .map(|st| match st {
                d2r::Stage::Streams => ("streams", s.stream_steps),
                d2r::Stage::Refine => ("refine", s.refine_steps),
                d2r::Stage::Fusion => ("fusion", s.fusion_steps),
            })
            .collect(),
        AnyModel::R2d(m) => m
            .stages()
            .into_iter()
            .map(|st| match st {
                r2d::Stage::Appearance => ("appearance", s.stream_steps),
                r2d::Stage::Fusion => ("fusion", s.fusion_steps),
            })
            .collect(),
    }
}

/// One logged training step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub stage: &'static str,
    pub sample_id: String,
    pub report: Report,
}

pub struct Trainer {
    pub config: RunConfig,
    pub model: AnyModel,
    train: Vec<PairedSample>,
    partition: ClassPartition,
    pub global_step: u64,
    stages: Vec<(&'static str, u64)>,
}

impl Trainer {
    pub fn new(config: RunConfig, train: Vec<PairedSample>) -> Result<Self> {
        config.validate()?;
        let model = AnyModel::new(&config)?;
        Self::with_model(config, train, model, 0)
    }

    /// Continues from an archive written by [`Trainer::archive`].
    pub fn resume(config: RunConfig, train: Vec<PairedSample>, archive: &Archive) -> Result<Self> {
        config.validate()?;
        let model = AnyModel::from_archive(archive)?;
        if model.task() != config.task {
            return Err(Error::Version("checkpoint task differs from the config".into()));
        }
        let fresh = AnyModel::new(&config)?.to_archive();
        if fresh.meta.get("model") != archive.meta.get("model") || fresh.meta.get("variant") != archive.meta.get("variant") {
            return Err(Error::Version("checkpoint model settings differ from the config".into()));
        }
        let step = archive
            .meta
            .get("global_step")
            .and_then(|s| s.as_u64())
            .ok_or_else(|| Error::Version("checkpoint lacks `global_step`".into()))?;
        Self::with_model(config, train, model, step)
    }

    fn with_model(config: RunConfig, train: Vec<PairedSample>, model: AnyModel, global_step: u64) -> Result<Self> {
        let stages = plan(&model, &config);
        let total: u64 = stages.iter().map(|s| s.1).sum();
        if total > 0 && train.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        if global_step > total {
            return Err(Error::Version(format!("checkpoint at step {global_step} is past the schedule end {total}")));
        }
        let partition = ClassPartition::new(&train);
        Ok(Trainer { config, model, train, partition, global_step, stages })
    }

    pub fn total_steps(&self) -> u64 {
        self.stages.iter().map(|s| s.1).sum()
    }

    pub fn is_done(&self) -> bool {
        self.global_step >= self.total_steps()
    }

    /// Model parameters, optimizer state and the global step.
    pub fn archive(&self) -> Archive {
        let mut a = self.model.to_archive();
        a.meta["global_step"] = self.global_step.into();
        a
    }

    fn stage_at(&self, step: u64) -> (usize, &'static str) {
        let mut start = 0;
        for (i, (name, n)) in self.stages.iter().enumerate() {
            if step < start + n {
                return (i, name);
            }
            start += n;
        }
        unreachable!("step {step} past schedule end")
    }

    /// Runs the next scheduled step, or returns `None` once the schedule is
    /// complete.
    pub fn step(&mut self) -> Result<Option<StepLog>> {
        if self.is_done() {
            return Ok(None);
        }
        let step = self.global_step;
        let (stage_idx, stage) = self.stage_at(step);
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(SAMPLE_STREAM + step);
        let k = rng.gen_range(0..self.train.len());
        let sample = &self.train[k];
        let report = match &mut self.model {
            AnyModel::D2r(m) => {
                let st = m.stages()[stage_idx];
                m.train_step(st, sample)?
            }
            AnyModel::R2d(m) => {
                let e = select_exemplar(&self.partition, sample.class_id, Some(k), &mut rng)?;
                let st = m.stages()[stage_idx];
                m.train_step(st, sample, &self.train[e].draft)?
            }
        };
        self.global_step += 1;
        Ok(Some(StepLog { step, stage, sample_id: sample.id.clone(), report }))
    }
}

/// Reproducibility record written next to every run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: RunConfig,
    pub seed: u64,
    pub dataset_digest: String,
    pub train_ids: usize,
    pub extractor_digest: String,
    /// Training is single threaded and bitwise reproducible.
    pub deterministic: bool,
    pub steps_completed: u64,
    pub param_digest: String,
    pub version: String,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Outcome of [`run_training`].
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub steps: u64,
    pub param_digest: String,
    pub resumed_from: Option<u64>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Drops log rows at or after `step`, so a resumed run rewrites them.
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        let keep = i == 0 || line.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s < step);
        if keep {
            out.push_str(line);
            out.push('\n');
        }
    }
    write_atomic(path, out.as_bytes())
}

/// Trains `cfg` on `train` inside `cfg.output_dir`. With `resume`, an
/// existing checkpoint there is continued instead of starting over.
pub fn run_training(cfg: &RunConfig, train: Vec<PairedSample>, dataset_digest: &str, resume: bool) -> Result<RunSummary> {
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let ckpt = dir.join(CHECKPOINT_FILE);
    let log_path = dir.join(LOSSES_FILE);
    let n_train = train.len();
    let (mut trainer, resumed_from) = if resume && ckpt.exists() {
        let t = Trainer::resume(cfg.clone(), train, &checkpoint::load(&ckpt)?)?;
        let s = t.global_step;
        log::info!("resuming {} at step {s}", dir.display());
        (t, Some(s))
    } else {
        (Trainer::new(cfg.clone(), train)?, None)
    };
    match resumed_from {
        Some(s) if log_path.exists() => truncate_log(&log_path, s)?,
        _ => write_atomic(&log_path, b"step,stage,component,value\n")?,
    }
    let extractor_digest = PerceptualExtractor::from_config(&cfg.model.extractor)?.digest();
    let manifest = |t: &Trainer| Manifest {
        config: cfg.clone(),
        seed: cfg.seed,
        dataset_digest: dataset_digest.to_string(),
        train_ids: n_train,
        extractor_digest: extractor_digest.clone(),
        deterministic: true,
        steps_completed: t.global_step,
        param_digest: t.model.digest(),
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    let save = |t: &Trainer| -> Result<()> {
        let a = t.archive();
        checkpoint::save(&ckpt, &a.meta, &a.tensors)?;
        let m = serde_json::to_string_pretty(&manifest(t)).expect("manifest serializes");
        write_atomic(&dir.join(MANIFEST_FILE), m.as_bytes())
    };
    save(&trainer)?;
    let mut log = fs::OpenOptions::new().append(true).open(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let every = cfg.schedule.checkpoint_every;
    loop {
        let entry = match trainer.step() {
            Ok(Some(e)) => e,
            Ok(None) => break,
            Err(err) => {
                if let Error::Divergence { step, component, value } = &err {
                    let dump = serde_json::json!({
                        "global_step": trainer.global_step,
                        "stage_step": step,
                        "component": component,
                        "value": value.to_string(),
                    });
                    write_atomic(&dir.join(DIVERGENCE_FILE), dump.to_string().as_bytes())?;
                }
                return Err(err);
            }
        };
        let mut rows = String::new();
        for (k, v) in &entry.report {
            rows.push_str(&format!("{},{},{k},{v:e}\n", entry.step, entry.stage));
        }
        log.write_all(rows.as_bytes()).map_err(|e| Error::io(&log_path, e))?;
        if every > 0 && trainer.global_step % every == 0 {
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            save(&trainer)?;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    save(&trainer)?;
    Ok(RunSummary { run_dir: dir, steps: trainer.global_step, param_digest: trainer.model.digest(), resumed_from })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SynthConfig};

    fn setup(dir: &Path, task: Task, variant: &str) -> (RunConfig, Vec<PairedSample>) {
        let mut cfg = RunConfig { task, variant: variant.into(), seed: 3, output_dir: dir.to_path_buf(), ..Default::default() };
        cfg.model.generator_depth = 3;
        cfg.model.generator_width = 8;
        cfg.model.disc_width = 8;
        cfg.schedule.stream_steps = 3;
        cfg.schedule.refine_steps = 2;
        cfg.schedule.fusion_steps = 2;
        let synth = SynthConfig { resolution: 32, count: 6, ..Default::default() };
        let data = synth_dataset(&synth).unwrap().into_iter().map(|p| p.sample).collect();
        (cfg, data)
    }

    #[test]
    fn zero_steps_write_initial_checkpoint_and_empty_log() {
        let tmp = tempfile::tempdir().unwrap();
        let (mut cfg, data) = setup(tmp.path(), Task::D2r, "full");
        cfg.schedule = crate::config::Schedule { stream_steps: 0, refine_steps: 0, fusion_steps: 0, checkpoint_every: 0 };
        let s = run_training(&cfg, data, "x", false).unwrap();
        assert_eq!(s.steps, 0);
        let log = fs::read_to_string(tmp.path().join(LOSSES_FILE)).unwrap();
        assert_eq!(log, "step,stage,component,value\n");
        let a = checkpoint::load(&tmp.path().join(CHECKPOINT_FILE)).unwrap();
        assert_eq!(AnyModel::from_archive(&a).unwrap().digest(), AnyModel::new(&cfg).unwrap().digest());
    }

    #[test]
    fn interrupted_run_resumes_to_the_same_result() {
        for (task, variant) in [(Task::D2r, "two_steps_plus"), (Task::R2d, "full")] {
            let a = tempfile::tempdir().unwrap();
            let b = tempfile::tempdir().unwrap();
            let (cfg_a, data) = setup(a.path(), task, variant);
            let whole = run_training(&cfg_a, data.clone(), "x", false).unwrap();

            let (mut cfg_b, _) = setup(b.path(), task, variant);
            cfg_b.schedule.checkpoint_every = 1;
            // Stop part way by running a shorter schedule, then restore the
            // real one and resume from its checkpoint.
            let mut t = Trainer::new(cfg_b.clone(), data.clone()).unwrap();
            for _ in 0..4 {
                t.step().unwrap();
            }
            let arch = t.archive();
            checkpoint::save(&b.path().join(CHECKPOINT_FILE), &arch.meta, &arch.tensors).unwrap();
            let resumed = run_training(&cfg_b, data, "x", true).unwrap();
            assert_eq!(resumed.resumed_from, Some(4));
            assert_eq!(resumed.param_digest, whole.param_digest, "{task:?}");
        }
    }

    #[test]
    fn repeated_runs_match_bit_for_bit() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let (cfg_a, data) = setup(a.path(), Task::R2d, "full");
        let (cfg_b, _) = setup(b.path(), Task::R2d, "full");
        let ra = run_training(&cfg_a, data.clone(), "x", false).unwrap();
        let rb = run_training(&cfg_b, data, "x", false).unwrap();
        assert_eq!(ra.param_digest, rb.param_digest);
        let read = |d: &Path| fs::read(d.join(LOSSES_FILE)).unwrap();
        assert_eq!(read(a.path()), read(b.path()));
        let ma = Manifest::load(&a.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(ma.steps_completed, 5);
        assert_eq!(ma.param_digest, ra.param_digest);
    }

    #[test]
    fn mismatched_checkpoint_is_a_version_error() {
        let tmp = tempfile::tempdir().unwrap();
        let (cfg, data) = setup(tmp.path(), Task::D2r, "full");
        let t = Trainer::new(cfg.clone(), data.clone()).unwrap();
        let mut other = cfg;
        other.model.generator_width = 4;
        assert!(matches!(Trainer::resume(other, data, &t.archive()), Err(Error::Version(_))));
    }
}
