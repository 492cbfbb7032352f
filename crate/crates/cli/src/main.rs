//! `draftnet`: synthesize data, train, run inference and evaluate.
//!
//! Everything is driven by one TOML config; `--set key=value` overrides
//! single keys. Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric
//! divergence.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use draftnet::checkpoint;
use draftnet::data::{dataset_digest, load_dataset, split, synth_dataset, write_dataset, write_truth};
use draftnet::sampler::checkerboard_overlay;
use draftnet::train::{CHECKPOINT_FILE, MANIFEST_FILE};
use draftnet::{AnyModel, Error, ImagePlane, Manifest, Result, RunConfig, ValueRange};

#[derive(Parser)]
#[command(name = "draftnet", version, about = "Design draft and real garment translation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// TOML run config; defaults apply to missing keys.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set schedule.stream_steps=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            cfg.set(o)?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Print the default config as TOML.
    InitConfig,
    /// Generate a synthetic paired dataset at `data.path`.
    SynthData {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train into `output_dir`, writing a checkpoint, manifest and loss log.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Rerun the config recorded in a manifest (overrides still apply).
        #[arg(long, conflicts_with = "config")]
        manifest: Option<PathBuf>,
        /// Continue from the checkpoint in `output_dir` if there is one.
        #[arg(long)]
        resume: bool,
    },
    /// Translate images with a trained checkpoint.
    Infer {
        /// Checkpoint file, or a run directory containing one.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Drafts for d2r, real images for r2d.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Exemplar draft (r2d only).
        #[arg(long)]
        exemplar: Option<PathBuf>,
        #[arg(long, default_value = "infer_out")]
        out: PathBuf,
        /// Also write the learned sampling grids as checkerboard overlays.
        #[arg(long)]
        grid: bool,
    },
    /// Evaluate a run on the test split of its dataset.
    Eval {
        /// Run directory with `checkpoint.dft` and `manifest.json`.
        #[arg(long)]
        run: PathBuf,
        /// Dataset root; defaults to the one in the run's manifest.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Report directory; defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Version(_) => 2,
        Error::Data(_) | Error::Io { .. } | Error::Contract(_) => 3,
        Error::Divergence { .. } | Error::Degenerate(_) => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::InitConfig => {
            print!("{}", RunConfig::default().to_toml());
            Ok(())
        }
        Command::SynthData { cfg } => synth_data(&cfg.load()?),
        Command::Train { cfg, manifest, resume } => {
            let (config, expected_digest) = match manifest {
                Some(p) => {
                    let m = Manifest::load(&p)?;
                    let mut c = m.config;
                    for o in &cfg.overrides {
                        c.set(o)?;
                    }
                    (c, Some(m.dataset_digest))
                }
                None => (cfg.load()?, None),
            };
            train(&config, expected_digest.as_deref(), resume)
        }
        Command::Infer { checkpoint, inputs, exemplar, out, grid } => infer(&checkpoint, &inputs, exemplar.as_deref(), &out, grid),
        Command::Eval { run, data, out } => {
            let data = match data {
                Some(d) => d,
                None => Manifest::load(&run.join(MANIFEST_FILE))?.config.data.path,
            };
            let report = draftnet::evaluate(&run, &data, out.as_deref().unwrap_or(&run))?;
            println!(
                "{} samples: ssim {:.4}, l1 {:.4}{}",
                report.count,
                report.ssim,
                report.l1,
                report.warp_iou.map(|v| format!(", warp_iou {v:.4}")).unwrap_or_default()
            );
            Ok(())
        }
    }
}

fn synth_data(cfg: &RunConfig) -> Result<()> {
    let root = &cfg.data.path;
    if root.join("labels.json").exists() {
        return Err(Error::Data(format!("{} already holds a dataset; refusing to overwrite it", root.display())));
    }
    let pairs = synth_dataset(&cfg.data.synth)?;
    let samples: Vec<_> = pairs.iter().map(|p| p.sample.clone()).collect();
    write_dataset(root, &samples)?;
    for p in &pairs {
        write_truth(root, p)?;
    }
    log::info!("wrote {} synthetic pairs to {}", pairs.len(), root.display());
    println!("{}", dataset_digest(root)?);
    Ok(())
}

fn train(cfg: &RunConfig, expected_digest: Option<&str>, resume: bool) -> Result<()> {
    let root = &cfg.data.path;
    if !root.join("draft").is_dir() {
        return Err(Error::Data(format!("no dataset at {}; run `draftnet synth-data` first", root.display())));
    }
    let digest = dataset_digest(root)?;
    if let Some(want) = expected_digest {
        if want != digest {
            return Err(Error::Data(format!("dataset at {} does not match the manifest digest", root.display())));
        }
    }
    let all = load_dataset(root)?;
    let train = match cfg.data.train_count {
        Some(n) => split(&all, n)?.0,
        None => all,
    };
    let summary = draftnet::run_training(cfg, train, &digest, resume)?;
    println!("{} steps, params {}", summary.steps, summary.param_digest);
    Ok(())
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into())
}

fn infer(ckpt: &Path, inputs: &[PathBuf], exemplar: Option<&Path>, out: &Path, grid: bool) -> Result<()> {
    let path = if ckpt.is_dir() { ckpt.join(CHECKPOINT_FILE) } else { ckpt.to_path_buf() };
    let model = AnyModel::from_archive(&checkpoint::load(&path)?)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let e = match (&model, exemplar) {
        (AnyModel::R2d(_), None) => return Err(Error::Config("r2d inference needs --exemplar".into())),
        (AnyModel::D2r(_), Some(_)) => return Err(Error::Config("--exemplar only applies to r2d checkpoints".into())),
        (_, Some(p)) => Some(ImagePlane::load_png(p, ValueRange::SignedUnit)?),
        _ => None,
    };
    for input in inputs {
        let x = ImagePlane::load_png(input, ValueRange::SignedUnit)?;
        let name = stem(input);
        match &model {
            AnyModel::D2r(m) => {
                let o = m.infer(&x)?;
                o.strip(&x)?.save_png(&out.join(format!("{name}_strip.png")))?;
                o.c.save_png(&out.join(format!("{name}_C.png")))?;
                if grid {
                    for (tag, g) in [("d", &o.grid_d), ("s", &o.grid_s)] {
                        if let Some(g) = g {
                            checkerboard_overlay(&x, g, 8)?.save_png(&out.join(format!("{name}_grid_{tag}.png")))?;
                        }
                    }
                }
            }
            AnyModel::R2d(m) => {
                let e = e.as_ref().expect("checked above");
                let o = m.infer(&x, e)?;
                o.strip(&x, e)?.save_png(&out.join(format!("{name}_strip.png")))?;
                o.c.save_png(&out.join(format!("{name}_C.png")))?;
                if grid {
                    checkerboard_overlay(&x, &o.grid, 8)?.save_png(&out.join(format!("{name}_grid_a.png")))?;
                }
            }
        }
        log::info!("translated {}", input.display());
    }
    Ok(())
}
