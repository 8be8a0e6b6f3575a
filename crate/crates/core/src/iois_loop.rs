//! The iterative training loop: update the classifier, measure per-class
//! accuracy on the real training data, decide the synthetic budget per
//! class, synthesize with classifier guidance, and train the next epoch on
//! the real data plus the fresh synthetic batch.

use std::fmt::Write as _;
use std::time::Instant;

use crate::aas::{self, AllocationPlan};
use crate::classifier::{per_class_accuracy, predict_all, train_epoch, ClassifierModel};
use crate::config::{RunConfig, RunMode};
use crate::datagen::{LabeledDataset, Provenance};
use crate::diffusion::{sample, DenoiserModel, Guidance, GuidanceConfig, NoisePredictor, NoiseSchedule};
use crate::error::{Error, Result};
use crate::metrics::MetricSummary;
use crate::numeric::Sgd;
use crate::rng::{derive_seed, tag};

/// What happened in one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    /// Rows the classifier was trained on this epoch (real + synthetic).
    pub train_size: usize,
    /// Per-class accuracy on the real training samples after the update.
    pub class_accuracy: Vec<f64>,
    /// Synthetic budget chosen after this epoch, for modes that synthesize.
    pub allocation: Option<AllocationPlan>,
    pub val: MetricSummary,
    pub wall_seconds: f64,
}

/// Everything a finished run produces.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub mode: RunMode,
    pub seed: u64,
    pub budget: usize,
    pub reports: Vec<EpochReport>,
    pub best_epoch: usize,
    pub best_model: ClassifierModel,
    pub last_model: ClassifierModel,
    pub test: MetricSummary,
    /// Allocation of the one-off batch in offline mode.
    pub offline_allocation: Option<AllocationPlan>,
    /// `(epoch, batch)` for every synthetic batch, when requested.
    pub synthetic_batches: Vec<(usize, LabeledDataset)>,
}

/// Frozen generator used for synthesis.
#[derive(Clone, Copy)]
pub struct Generator<'a> {
    pub model: &'a DenoiserModel,
    pub schedule: &'a NoiseSchedule,
}

/// Run `k_i` guided chains for each class `i`; the rows are labelled with
/// their guidance class and flagged synthetic.
pub fn synthesize_batch(
    plan: &AllocationPlan,
    generator: Generator<'_>,
    classifier: &ClassifierModel,
    gcfg: &GuidanceConfig,
    epoch: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    let labels = plan.labels();
    let classes = plan.classes();
    let dim = generator.model.data_dim();
    if labels.is_empty() {
        return Ok(LabeledDataset::empty(dim, classes));
    }
    let guidance = Guidance {
        classifier,
        labels: &labels,
        config: gcfg,
    };
    let chain_seed = derive_seed(seed, &[tag::SYNTHESIS, epoch as u64]);
    let x = sample(
        generator.model,
        generator.schedule,
        labels.len(),
        Some(guidance),
        chain_seed,
    )?;
    LabeledDataset::uniform_provenance(x, labels, classes, Provenance::Synthetic)
}

/// Epoch with the highest validation Macro-F1; the earliest epoch wins ties.
pub fn select_best_epoch(reports: &[EpochReport]) -> Option<usize> {
    let mut best: Option<&EpochReport> = None;
    for r in reports {
        if best.is_none_or(|b| r.val.macro_f1 > b.val.macro_f1) {
            best = Some(r);
        }
    }
    best.map(|r| r.epoch)
}

fn evaluate(model: &ClassifierModel, ds: &LabeledDataset) -> Result<MetricSummary> {
    let predicted = predict_all(model, ds.features())?;
    MetricSummary::evaluate(ds.labels(), &predicted, ds.classes())
}

/// Train a classifier in the configured mode and evaluate the model with the
/// best validation Macro-F1 on `test`.
pub fn run_training(
    cfg: &RunConfig,
    real_train: &LabeledDataset,
    val: &LabeledDataset,
    test: &LabeledDataset,
    generator: Option<Generator<'_>>,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let mode = cfg.run.mode;
    let seed = cfg.run.seed;
    let settings = &cfg.classifier;
    if real_train.is_empty() {
        return Err(Error::Validation("the real training set is empty".into()));
    }
    if real_train.count_of(Provenance::Synthetic) > 0 {
        return Err(Error::Validation("the real training set contains synthetic rows".into()));
    }
    let (dim, classes) = (real_train.dim(), real_train.classes());
    for (name, ds) in [("validation", val), ("test", test)] {
        if ds.classes() != classes || (!ds.is_empty() && ds.dim() != dim) {
            return Err(Error::Config(format!(
                "{name} set shape does not match the training set"
            )));
        }
    }
    let generator = match (mode.needs_denoiser(), generator) {
        (false, _) => None,
        (true, None) => {
            return Err(Error::Config(format!("mode {mode} needs a pretrained denoiser")))
        }
        (true, Some(g)) => {
            if g.model.data_dim() != dim {
                return Err(Error::Config(format!(
                    "denoiser produces {}-dimensional samples, data has {dim} dimensions",
                    g.model.data_dim()
                )));
            }
            Some(g)
        }
    };
    let budget = cfg.run.budget(real_train.len());
    let epochs = settings.epochs;
    let lr = settings.schedule();

    let mut model =
        ClassifierModel::new(dim, classes, &settings.hidden, settings.activation, seed)?;
    let mut opt = Sgd::new(model.net(), settings.momentum);
    let mut synthetic = LabeledDataset::empty(dim, classes);
    let mut batches = Vec::new();
    let mut offline_allocation = None;

    if let (RunMode::Offline, Some(g)) = (mode, generator) {
        let plan = aas::uniform(classes, budget);
        synthetic = synthesize_batch(&plan, g, &model, &cfg.guidance, 0, seed)?;
        if cfg.run.dump_synthetic {
            batches.push((0, synthetic.clone()));
        }
        offline_allocation = Some(plan);
    }

    let mut reports = Vec::with_capacity(epochs);
    let mut best: Option<(f64, usize, ClassifierModel)> = None;
    for epoch in 1..=epochs {
        let started = Instant::now();
        let trainset = real_train.concat(&synthetic)?;
        let rate = lr.rate(epoch - 1, epochs);
        let train_loss = train_epoch(&mut model, &trainset, &mut opt, rate, settings, seed, epoch)?;
        let acc = per_class_accuracy(&model, real_train)?;

        let allocation = match mode {
            RunMode::CeBaseline | RunMode::Offline => None,
            _ if epoch <= cfg.run.warmup_epochs => None,
            RunMode::OisUniform => Some(aas::uniform(classes, budget)),
            RunMode::OisAas => Some(aas::allocate(&acc, budget)),
        };
        if let (Some(plan), Some(g)) = (&allocation, generator) {
            // The batch feeds the next epoch; after the last one there is none.
            if epoch < epochs {
                synthetic = synthesize_batch(plan, g, &model, &cfg.guidance, epoch, seed)?;
                if cfg.run.dump_synthetic {
                    batches.push((epoch, synthetic.clone()));
                }
            }
        }

        let val_metrics = evaluate(&model, val)?;
        if best
            .as_ref()
            .is_none_or(|(f1, _, _)| val_metrics.macro_f1 > *f1)
        {
            best = Some((val_metrics.macro_f1, epoch, model.clone()));
        }
        reports.push(EpochReport {
            epoch,
            train_loss,
            train_size: trainset.len(),
            class_accuracy: acc.values().to_vec(),
            allocation,
            val: val_metrics,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
        log::debug!(
            "{mode} seed {seed} epoch {epoch}: loss {train_loss:.4}, val macro-F1 {:.4}",
            val_metrics.macro_f1
        );
    }

    let (best_epoch, best_model) = match best {
        Some((_, e, m)) => (e, m),
        None => (0, model.clone()),
    };
    let test_metrics = evaluate(&best_model, test)?;
    Ok(RunOutcome {
        mode,
        seed,
        budget,
        reports,
        best_epoch,
        best_model,
        last_model: model,
        test: test_metrics,
        offline_allocation,
        synthetic_batches: batches,
    })
}

fn fmt6(x: f64) -> String {
    format!("{x:.6}")
}

/// `report.csv`: one row per epoch. Wall-clock time is left out so reruns
/// produce identical bytes.
pub fn report_csv(reports: &[EpochReport], classes: usize) -> String {
    let mut out = String::from("epoch,train_loss,train_size");
    for i in 0..classes {
        let _ = write!(out, ",acc_{i}");
    }
    for i in 0..classes {
        let _ = write!(out, ",k_{i}");
    }
    out.push_str(",val_macro_f1,val_balanced_accuracy,val_mcc\n");
    for r in reports {
        let _ = write!(out, "{},{},{}", r.epoch, fmt6(r.train_loss), r.train_size);
        for a in &r.class_accuracy {
            let _ = write!(out, ",{}", fmt6(*a));
        }
        for i in 0..classes {
            match &r.allocation {
                Some(p) => {
                    let _ = write!(out, ",{}", p.counts[i]);
                }
                None => out.push(','),
            }
        }
        let _ = writeln!(
            out,
            ",{},{},{}",
            fmt6(r.val.macro_f1),
            fmt6(r.val.balanced_accuracy),
            fmt6(r.val.mcc)
        );
    }
    out
}

/// `allocations.csv`: `epoch, acc_*, k_*` for every epoch that allocated a
/// synthetic budget. The offline batch is listed as epoch 0.
pub fn allocations_csv(outcome: &RunOutcome, classes: usize) -> String {
    let mut out = String::from("epoch");
    for i in 0..classes {
        let _ = write!(out, ",acc_{i}");
    }
    for i in 0..classes {
        let _ = write!(out, ",k_{i}");
    }
    out.push('\n');
    if let Some(plan) = &outcome.offline_allocation {
        out.push('0');
        for _ in 0..classes {
            out.push(',');
        }
        for k in &plan.counts {
            let _ = write!(out, ",{k}");
        }
        out.push('\n');
    }
    for r in &outcome.reports {
        if let Some(plan) = &r.allocation {
            let _ = write!(out, "{}", r.epoch);
            for a in &r.class_accuracy {
                let _ = write!(out, ",{}", fmt6(*a));
            }
            for k in &plan.counts {
                let _ = write!(out, ",{k}");
            }
            out.push('\n');
        }
    }
    out
}

pub const TEST_METRICS_HEADER: &str = "mode,seed,best_epoch,macro_f1,balanced_accuracy,mcc";

/// `test_metrics.csv`: the chosen model on the test set.
pub fn test_metrics_csv(outcome: &RunOutcome) -> String {
    format!(
        "{TEST_METRICS_HEADER}\n{},{},{},{},{},{}\n",
        outcome.mode,
        outcome.seed,
        outcome.best_epoch,
        fmt6(outcome.test.macro_f1),
        fmt6(outcome.test.balanced_accuracy),
        fmt6(outcome.test.mcc)
    )
}
