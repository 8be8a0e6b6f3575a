use iois::aas;
use iois::classifier::{ClassAccuracyVector, ClassifierModel};
use iois::config::{RunConfig, RunMode};
use iois::datagen::{make_imbalanced_mixture, split_dataset, LabeledDataset, MixtureSpec, Provenance};
use iois::diffusion::{pretrain_dm, DenoiserModel, DenoiserSettings, GuidanceConfig, NoiseSchedule};
use iois::iois_loop::{
    allocations_csv, report_csv, run_training, select_best_epoch, synthesize_batch,
    test_metrics_csv, Generator,
};
use iois::numeric::Activation;
use iois::Error;

struct Fixture {
    cfg: RunConfig,
    train: LabeledDataset,
    val: LabeledDataset,
    test: LabeledDataset,
    model: DenoiserModel,
    sched: NoiseSchedule,
}

impl Fixture {
    fn new(classes: usize) -> Self {
        let spec = MixtureSpec {
            means: (0..classes).map(|i| vec![i as f64, (i % 2) as f64]).collect(),
            stds: vec![0.6; classes],
            n_max: 80,
            imbalance_ratio: 4.0,
            class_counts: None,
        };
        let ds = make_imbalanced_mixture(&spec, 3).unwrap();
        let (train, val, test) = split_dataset(&ds, Default::default(), 3).unwrap();
        let mut cfg = RunConfig::default();
        cfg.data.means = spec.means.clone();
        cfg.data.stds = spec.stds.clone();
        cfg.data.class_counts = vec![];
        cfg.data.n_max = 80;
        cfg.data.imbalance_ratio = 4.0;
        cfg.diffusion.steps = 50;
        cfg.classifier.epochs = 6;
        cfg.classifier.hidden = vec![16];
        cfg.run.seed = 11;
        let sched = cfg.diffusion.schedule().unwrap();
        let settings = DenoiserSettings {
            hidden: vec![32, 32],
            epochs: 5,
            ..Default::default()
        };
        let model = pretrain_dm(train.features(), &sched, &settings, 1).unwrap().model;
        Self {
            cfg,
            train,
            val,
            test,
            model,
            sched,
        }
    }

    fn run(&self, cfg: &RunConfig) -> iois::Result<iois::iois_loop::RunOutcome> {
        let g = Generator {
            model: &self.model,
            schedule: &self.sched,
        };
        run_training(cfg, &self.train, &self.val, &self.test, Some(g))
    }
}

#[test]
fn empty_budget_reduces_to_the_baseline() {
    let f = Fixture::new(3);
    let mut cfg = f.cfg.clone();
    cfg.run.synthetic_budget = Some(0);
    cfg.run.mode = RunMode::CeBaseline;
    let base = f.run(&cfg).unwrap();
    cfg.run.mode = RunMode::OisAas;
    let aas = f.run(&cfg).unwrap();
    assert_eq!(report_csv(&base.reports, 3), {
        // Same numbers; only the allocation columns differ (all-zero plans).
        let mut stripped = aas.reports.clone();
        stripped.iter_mut().for_each(|r| r.allocation = None);
        report_csv(&stripped, 3)
    });
    assert_eq!(base.best_model, aas.best_model);
    assert_eq!(base.test, aas.test);
    assert!(aas.reports.iter().all(|r| r.allocation.as_ref().unwrap().counts == vec![0, 0, 0]));
}

#[test]
fn uniform_mode_allocates_equal_shares() {
    let f = Fixture::new(4);
    let mut cfg = f.cfg.clone();
    cfg.run.mode = RunMode::OisUniform;
    cfg.run.synthetic_budget = Some(100);
    let out = f.run(&cfg).unwrap();
    for r in &out.reports {
        assert_eq!(r.allocation.as_ref().unwrap().counts, vec![25; 4]);
    }
    // Epoch 1 trains on real data only; afterwards real + K exactly.
    assert_eq!(out.reports[0].train_size, f.train.len());
    for r in &out.reports[1..] {
        assert_eq!(r.train_size, f.train.len() + 100);
    }
}

#[test]
fn synthetic_batches_are_replaced_not_accumulated() {
    let f = Fixture::new(3);
    let mut cfg = f.cfg.clone();
    cfg.run.mode = RunMode::OisAas;
    cfg.run.dump_synthetic = true;
    let out = f.run(&cfg).unwrap();
    let k = cfg.run.budget(f.train.len());
    assert!(k > 0);
    let epochs: Vec<usize> = out.synthetic_batches.iter().map(|(e, _)| *e).collect();
    assert_eq!(epochs, (1..cfg.classifier.epochs).collect::<Vec<_>>());
    for (_, batch) in &out.synthetic_batches {
        assert_eq!(batch.len(), k);
        assert_eq!(batch.count_of(Provenance::Synthetic), k);
    }
    for w in out.synthetic_batches.windows(2) {
        assert_ne!(w[0].1.features(), w[1].1.features());
    }
    for r in &out.reports[1..] {
        assert_eq!(r.train_size, f.train.len() + k);
    }
    let sums: Vec<usize> = out
        .reports
        .iter()
        .map(|r| r.allocation.as_ref().unwrap().counts.iter().sum())
        .collect();
    assert!(sums.iter().all(|&s| s == k));
}

#[test]
fn offline_mode_synthesizes_once() {
    let f = Fixture::new(3);
    let mut cfg = f.cfg.clone();
    cfg.run.mode = RunMode::Offline;
    cfg.run.dump_synthetic = true;
    let out = f.run(&cfg).unwrap();
    let k = cfg.run.budget(f.train.len());
    assert_eq!(out.synthetic_batches.len(), 1);
    assert_eq!(out.synthetic_batches[0].0, 0);
    assert!(out.reports.iter().all(|r| r.train_size == f.train.len() + k));
    assert!(out.reports.iter().all(|r| r.allocation.is_none()));
    let csv = allocations_csv(&out, 3);
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.lines().nth(1).unwrap().starts_with("0,"));
}

#[test]
fn runs_are_reproducible() {
    let f = Fixture::new(3);
    let mut cfg = f.cfg.clone();
    cfg.run.mode = RunMode::OisAas;
    let a = f.run(&cfg).unwrap();
    let b = f.run(&cfg).unwrap();
    assert_eq!(report_csv(&a.reports, 3), report_csv(&b.reports, 3));
    assert_eq!(allocations_csv(&a, 3), allocations_csv(&b, 3));
    assert_eq!(test_metrics_csv(&a), test_metrics_csv(&b));
    assert_eq!(a.best_epoch, select_best_epoch(&a.reports).unwrap());
    cfg.run.seed += 1;
    assert_ne!(report_csv(&f.run(&cfg).unwrap().reports, 3), report_csv(&a.reports, 3));
}

#[test]
fn metrics_stay_in_range() {
    let f = Fixture::new(3);
    let out = f.run(&f.cfg).unwrap();
    for r in &out.reports {
        for v in [r.val.macro_f1, r.val.balanced_accuracy] {
            assert!((0.0..=1.0).contains(&v));
        }
        assert!((-1.0..=1.0).contains(&r.val.mcc));
        assert!(r.class_accuracy.iter().all(|a| (0.0..=1.0).contains(a)));
    }
}

#[test]
fn constant_accuracy_allocates_like_uniform() {
    for c in 1..7 {
        for k in [0, 1, 7, 98, 100, 1001] {
            for a in [0.0, 0.37, 1.0] {
                let acc = ClassAccuracyVector::new(vec![a; c]).unwrap();
                assert_eq!(aas::allocate(&acc, k).counts, aas::uniform(c, k).counts);
            }
        }
    }
}

#[test]
fn batch_labels_follow_the_plan() {
    let f = Fixture::new(2);
    let classifier = ClassifierModel::new(2, 2, &[8], Activation::Relu, 0).unwrap();
    let g = Generator {
        model: &f.model,
        schedule: &f.sched,
    };
    let gcfg = GuidanceConfig::default();
    let plan = aas::AllocationPlan {
        counts: vec![2, 1],
        total: 3,
        fractions: vec![0.5, 0.5],
    };
    let batch = synthesize_batch(&plan, g, &classifier, &gcfg, 4, 9).unwrap();
    assert_eq!(batch.labels(), &[0, 0, 1]);
    assert_eq!(batch.count_of(Provenance::Synthetic), 3);
    assert_eq!(batch, synthesize_batch(&plan, g, &classifier, &gcfg, 4, 9).unwrap());
    assert_ne!(batch, synthesize_batch(&plan, g, &classifier, &gcfg, 5, 9).unwrap());
    let empty = aas::uniform(2, 0);
    assert!(synthesize_batch(&empty, g, &classifier, &gcfg, 4, 9).unwrap().is_empty());
}

#[test]
fn denoiser_is_required_and_checked() {
    let f = Fixture::new(3);
    let mut cfg = f.cfg.clone();
    cfg.run.mode = RunMode::OisUniform;
    assert!(matches!(
        run_training(&cfg, &f.train, &f.val, &f.test, None),
        Err(Error::Config(_))
    ));
    let wrong = DenoiserModel::new(3, &DenoiserSettings::default(), 0).unwrap();
    let g = Generator {
        model: &wrong,
        schedule: &f.sched,
    };
    assert!(matches!(
        run_training(&cfg, &f.train, &f.val, &f.test, Some(g)),
        Err(Error::Config(_))
    ));
    cfg.run.mode = RunMode::CeBaseline;
    assert!(run_training(&cfg, &f.train, &f.val, &f.test, None).is_ok());
}
