//! Command implementations behind the `iois` binary.
//!
//! Every command is a function of its config file, overrides and input
//! files: rerunning one reproduces its CSV outputs byte for byte, whatever
//! `--workers` is set to.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use iois::checkpoint;
use iois::classifier::ClassifierModel;
use iois::config::{RunConfig, RunMode};
use iois::datagen::{
    load_dataset, make_imbalanced_mixture, save_dataset, split_dataset, LabeledDataset, Provenance,
};
use iois::diffusion::{pretrain_dm, sample, Guidance, GuidanceConfig};
use iois::iois_loop::{
    allocations_csv, report_csv, run_training, test_metrics_csv, Generator, TEST_METRICS_HEADER,
};
use iois::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "iois", version, about = "Online imbalanced sampling with a guided diffusion model")]
pub struct Cli {
    /// Worker threads for sampling and batched gradients (outputs do not depend on it).
    #[arg(long, global = true, value_name = "N")]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the imbalanced Gaussian mixture described by `[data]`.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Output dataset file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the denoiser on the training split of a dataset (labels unused).
    PretrainDm {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Output directory for `denoiser.ckpt` and `dm_loss.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the training loop in one mode and write reports and checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Denoiser checkpoint; not needed for `ce_baseline`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        mode: Option<String>,
        /// Output directory; defaults to `run.output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Collect `test_metrics.csv` from run directories into one table.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw samples from a denoiser, optionally guided towards one class.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Classifier checkpoint used for guidance.
        #[arg(long)]
        classifier: Option<PathBuf>,
        /// Target class (requires `--classifier`).
        #[arg(long, default_value_t = 0)]
        class: usize,
        /// Guidance scale; defaults to `guidance.scale`.
        #[arg(long)]
        scale: Option<f64>,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML config file; missing sections and keys keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one value, e.g. `--set guidance.scale=2` (repeatable).
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Master seed; overrides `run.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let mut cfg = cfg.with_overrides(&self.overrides)?;
        if let Some(s) = self.seed {
            cfg.run.seed = s;
        }
        Ok(cfg)
    }
}

/// Process exit code for an error: 2 for numeric failures, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_numeric() {
        2
    } else {
        1
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.workers {
        Some(0) => Err(Error::Config("--workers must be at least 1".into())),
        Some(n) => with_workers(n, || dispatch(cli.command))?,
        None => dispatch(cli.command),
    }
}

#[cfg(feature = "parallel")]
fn with_workers<T: Send>(n: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {n} workers: {e}")))?;
    Ok(pool.install(f))
}

#[cfg(not(feature = "parallel"))]
fn with_workers<T: Send>(n: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if n > 1 {
        log::warn!("built without the `parallel` feature; running on one thread");
    }
    Ok(f())
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData { common, out } => gen_data(&common.load()?, &out),
        Command::PretrainDm { common, data, out } => pretrain(&common.load()?, &data, &out),
        Command::Train {
            common,
            data,
            checkpoint,
            mode,
            out,
        } => {
            let mut cfg = common.load()?;
            if let Some(m) = mode {
                cfg.run.mode = RunMode::parse(&m).ok_or_else(|| {
                    Error::Config(format!(
                        "unknown mode `{m}` (expected one of ce_baseline, offline, ois_uniform, ois_aas)"
                    ))
                })?;
            }
            let out = out.or_else(|| cfg.run.output_dir.clone()).ok_or_else(|| {
                Error::Config("no output directory: pass --out or set run.output_dir".into())
            })?;
            train(&cfg, &data, checkpoint.as_deref(), &out)
        }
        Command::Report { runs, out } => {
            let table = report(&runs)?;
            match out {
                Some(p) => write(&p, &table),
                None => {
                    print!("{table}");
                    Ok(())
                }
            }
        }
        Command::Sample {
            common,
            checkpoint,
            classifier,
            class,
            scale,
            n,
            out,
        } => {
            let cfg = common.load()?;
            let req = SampleRequest {
                checkpoint: &checkpoint,
                classifier: classifier.as_deref(),
                class,
                scale,
                n,
            };
            save_dataset(&draw(&cfg, &req)?, &out)
        }
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = make_imbalanced_mixture(&cfg.data.mixture(), cfg.run.seed)?;
    save_dataset(&ds, out)?;
    log::info!("wrote {} samples {:?} to {}", ds.len(), ds.class_counts(), out.display());
    Ok(())
}

/// Stratified split of a real dataset, seeded by the run seed so that
/// `pretrain-dm` and `train` see the same training rows.
fn load_split(cfg: &RunConfig, data: &Path) -> Result<(LabeledDataset, LabeledDataset, LabeledDataset)> {
    let ds = load_dataset(data)?;
    if ds.count_of(Provenance::Synthetic) > 0 {
        return Err(Error::Validation(format!(
            "{} contains synthetic rows; expected real data",
            data.display()
        )));
    }
    split_dataset(&ds, cfg.data.split(), cfg.run.seed)
}

pub fn pretrain(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let (train, _, _) = load_split(cfg, data)?;
    let sched = cfg.diffusion.schedule()?;
    let trained = pretrain_dm(train.features(), &sched, &cfg.denoiser, cfg.run.seed)?;
    create_dir(out)?;
    checkpoint::save_denoiser(&out.join("denoiser.ckpt"), &trained.model, &sched)?;
    let mut trace = String::from("epoch,loss\n");
    for (i, l) in trained.loss_trace.iter().enumerate() {
        let _ = writeln!(trace, "{},{l:.6}", i + 1);
    }
    write(&out.join("dm_loss.csv"), &trace)?;
    write(&out.join("config.toml"), &cfg.to_toml_string())?;
    if let (Some(first), Some(last)) = (trained.loss_trace.first(), trained.loss_trace.last()) {
        log::info!("denoiser loss {first:.4} -> {last:.4}");
    }
    Ok(())
}

pub fn train(cfg: &RunConfig, data: &Path, ckpt: Option<&Path>, out: &Path) -> Result<()> {
    let (train, val, test) = load_split(cfg, data)?;
    let denoiser = match (cfg.run.mode.needs_denoiser(), ckpt) {
        (false, _) => None,
        (true, Some(p)) => Some(checkpoint::load_denoiser(p, Some(train.dim()))?),
        (true, None) => {
            return Err(Error::Config(format!(
                "mode {} needs --checkpoint",
                cfg.run.mode
            )))
        }
    };
    let generator = denoiser.as_ref().map(|(model, schedule)| Generator { model, schedule });
    let outcome = run_training(cfg, &train, &val, &test, generator)?;
    let c = train.classes();

    create_dir(out)?;
    write(&out.join("config.toml"), &cfg.to_toml_string())?;
    write(&out.join("report.csv"), &report_csv(&outcome.reports, c))?;
    write(&out.join("allocations.csv"), &allocations_csv(&outcome, c))?;
    write(&out.join("test_metrics.csv"), &test_metrics_csv(&outcome))?;
    checkpoint::save_classifier(&out.join("classifier_best.ckpt"), &outcome.best_model)?;
    checkpoint::save_classifier(&out.join("classifier_last.ckpt"), &outcome.last_model)?;
    for (epoch, batch) in &outcome.synthetic_batches {
        save_dataset(batch, &out.join(format!("synthetic_epoch{epoch}.csv")))?;
    }
    let mut timing = String::new();
    for r in &outcome.reports {
        let _ = writeln!(timing, "epoch {} {:.3}s", r.epoch, r.wall_seconds);
    }
    write(&out.join("timing.txt"), &timing)?;
    log::info!(
        "{} seed {}: best epoch {}, test macro-F1 {:.4}, MCC {:.4}",
        outcome.mode,
        outcome.seed,
        outcome.best_epoch,
        outcome.test.macro_f1,
        outcome.test.mcc
    );
    Ok(())
}

struct RunRow {
    mode: String,
    seed: String,
    values: [f64; 3],
}

fn read_metrics(dir: &Path) -> std::result::Result<RunRow, String> {
    let path = dir.join("test_metrics.csv");
    let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut lines = text.lines();
    if lines.next() != Some(TEST_METRICS_HEADER) {
        return Err(format!("{}: unexpected header", path.display()));
    }
    let fields: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    let [mode, seed, _, f1, bacc, mcc] = fields[..] else {
        return Err(format!("{}: expected 6 fields", path.display()));
    };
    let num = |s: &str| {
        s.parse::<f64>()
            .map_err(|_| format!("{}: bad number `{s}`", path.display()))
    };
    Ok(RunRow {
        mode: mode.to_string(),
        seed: seed.to_string(),
        values: [num(f1)?, num(bacc)?, num(mcc)?],
    })
}

/// One row per run, then a `mean` row per mode in order of first appearance.
/// Run directories without a readable `test_metrics.csv` are skipped with a
/// warning.
pub fn report(runs: &[PathBuf]) -> Result<String> {
    let mut rows = Vec::new();
    for dir in runs {
        match read_metrics(dir) {
            Ok(r) => rows.push(r),
            Err(msg) => log::warn!("skipping {}: {msg}", dir.display()),
        }
    }
    if rows.is_empty() {
        return Err(Error::Validation("no completed runs to report".into()));
    }
    let mut out = String::from("mode,seed,macro_f1,balanced_accuracy,mcc\n");
    let line = |out: &mut String, mode: &str, seed: &str, v: [f64; 3]| {
        let _ = writeln!(out, "{mode},{seed},{:.6},{:.6},{:.6}", v[0], v[1], v[2]);
    };
    for r in &rows {
        line(&mut out, &r.mode, &r.seed, r.values);
    }
    let mut modes: Vec<&str> = Vec::new();
    for r in &rows {
        if !modes.contains(&r.mode.as_str()) {
            modes.push(&r.mode);
        }
    }
    for mode in modes {
        let group: Vec<&RunRow> = rows.iter().filter(|r| r.mode == mode).collect();
        let mut mean = [0.0; 3];
        for r in &group {
            for (m, v) in mean.iter_mut().zip(r.values) {
                *m += v / group.len() as f64;
            }
        }
        line(&mut out, mode, "mean", mean);
    }
    Ok(out)
}

pub struct SampleRequest<'a> {
    pub checkpoint: &'a Path,
    pub classifier: Option<&'a Path>,
    pub class: usize,
    pub scale: Option<f64>,
    pub n: usize,
}

/// Samples in the dataset format, labelled with the target class.
pub fn draw(cfg: &RunConfig, req: &SampleRequest<'_>) -> Result<LabeledDataset> {
    let (model, sched) = checkpoint::load_denoiser(req.checkpoint, None)?;
    let gcfg = GuidanceConfig {
        scale: req.scale.unwrap_or(cfg.guidance.scale),
        ..cfg.guidance
    };
    gcfg.validate()?;
    let labels = vec![req.class; req.n];
    let (x, classes) = match req.classifier {
        Some(p) => {
            let clf: ClassifierModel = checkpoint::load_classifier(p)?;
            if clf.dim() != iois::diffusion::NoisePredictor::data_dim(&model) {
                return Err(Error::Config(
                    "classifier and denoiser disagree on the data dimension".into(),
                ));
            }
            let guidance = Guidance {
                classifier: &clf,
                labels: &labels,
                config: &gcfg,
            };
            let x = sample(&model, &sched, req.n, Some(guidance), cfg.run.seed)?;
            (x, iois::classifier::LabelPredictor::classes(&clf))
        }
        None => {
            if req.class != 0 {
                return Err(Error::Config("--class needs --classifier".into()));
            }
            (sample(&model, &sched, req.n, None, cfg.run.seed)?, 1)
        }
    };
    LabeledDataset::uniform_provenance(x, labels, classes, Provenance::Synthetic)
}
