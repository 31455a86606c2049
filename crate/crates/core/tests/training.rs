//! End-to-end training checks on synthetic seven-segment digits.

use xfer_core::checkpoint::Checkpoint;
use xfer_core::data::{make_splits, shift_domain, synth_digits, DomainShift, LabeledDataset};
use xfer_core::disc::Fusion;
use xfer_core::eval::evaluate;
use xfer_core::nn::NetworkSpec;
use xfer_core::trainer::{adapt_joint, adapt_unsupervised, pretrain_source, run_baseline, Baseline, TrainConfig, TransferData};

const SIDE: usize = 16;

fn spec() -> NetworkSpec {
    NetworkSpec::compact(SIDE, 8, 32, 5)
}

fn cfg() -> TrainConfig {
    TrainConfig {
        disc_hidden: vec![32, 32],
        batch_source: 32,
        batch_unlabeled: 32,
        pretrain_steps: 200,
        adapt_steps: 30,
        support_per_class: 20,
        ..TrainConfig::default()
    }
}

fn source() -> LabeledDataset {
    synth_digits(40, &[0, 1, 2, 3, 4], SIDE, 1).unwrap()
}

fn target_pool() -> LabeledDataset {
    shift_domain(&synth_digits(30, &[5, 6, 7, 8, 9], SIDE, 2).unwrap(), DomainShift::default())
}

#[test]
fn pretraining_fits_source() {
    let src = source();
    let held_out = synth_digits(20, &[0, 1, 2, 3, 4], SIDE, 99).unwrap();
    let trained = pretrain_source(&src, &spec(), &cfg(), Some(&held_out)).unwrap();
    assert!(trained.record.final_accuracy().unwrap() >= 0.95, "{:?}", trained.record.final_accuracy());
    assert!(evaluate(&trained.net, &src, None).unwrap().accuracy >= 0.95);
}

#[test]
fn pretraining_is_reproducible() {
    let c = TrainConfig { pretrain_steps: 20, ..cfg() };
    let a = pretrain_source(&source(), &spec(), &c, None).unwrap();
    let b = pretrain_source(&source(), &spec(), &c, None).unwrap();
    assert_eq!(a.record.to_csv(), b.record.to_csv());
    assert_eq!(Checkpoint::from_network(&a.net, "", 0).to_bytes(), Checkpoint::from_network(&b.net, "", 0).to_bytes());
}

#[test]
fn zero_weights_reduce_to_fine_tuning() {
    let src = source();
    let pre = pretrain_source(&src, &spec(), &TrainConfig { pretrain_steps: 40, ..cfg() }, None).unwrap();
    let split = make_splits(&target_pool(), 2, 7).unwrap();
    let test = target_pool();
    let data = TransferData {
        source: &src,
        labeled: &split.labeled,
        unlabeled: &split.unlabeled,
        test: Some(&test),
    };
    let c = TrainConfig { alpha: 0.0, beta: 0.0, eval_every: 10, ..cfg() };
    let joint = adapt_joint(&pre.net, &src.classes, data, &c).unwrap();
    let ft = run_baseline(Baseline::FineTune, &pre.net, &src.classes, data, &c).unwrap();
    assert_eq!(joint.record.to_csv(), ft.record.to_csv());
    assert_eq!(split.labeled.len(), 10);
}

#[test]
fn joint_adaptation_keeps_source_frozen_and_logs_every_term() {
    let src = source();
    let pre = pretrain_source(&src, &spec(), &TrainConfig { pretrain_steps: 40, ..cfg() }, None).unwrap();
    let before = Checkpoint::from_network(&pre.net, "", 0).to_bytes();
    let split = make_splits(&target_pool(), 3, 1).unwrap();
    let data = TransferData {
        source: &src,
        labeled: &split.labeled,
        unlabeled: &split.unlabeled,
        test: None,
    };
    let c = TrainConfig { fusion: Fusion::Concat, ..cfg() };
    let out = adapt_joint(&pre.net, &src.classes, data, &c).unwrap();
    assert_eq!(Checkpoint::from_network(&pre.net, "", 0).to_bytes(), before);
    let first = out.record.steps[0].losses;
    for v in [first.sup, first.dt_d, first.dt_e, first.st_src, first.st_sup, first.st_unsup] {
        assert!(v.is_finite() && v > 0.0, "{first:?}");
    }
    let want = first.sup + 0.1 * first.dt_e + 0.1 * (first.st_src + first.st_sup + first.st_unsup);
    assert!((first.total - want).abs() <= 1e-5 * want.abs().max(1.0));
}

#[test]
fn discriminator_loss_stays_in_band() {
    let src = source();
    let pre = pretrain_source(&src, &spec(), &TrainConfig { pretrain_steps: 40, ..cfg() }, None).unwrap();
    let split = make_splits(&target_pool(), 2, 0).unwrap();
    let data = TransferData {
        source: &src,
        labeled: &split.labeled,
        unlabeled: &split.unlabeled,
        test: None,
    };
    let out = adapt_joint(&pre.net, &src.classes, data, &TrainConfig { adapt_steps: 200, ..cfg() }).unwrap();
    let d: Vec<f64> = out.record.steps.iter().map(|s| s.losses.dt_d).collect();
    let upper = 4.0 * 2f64.ln() + 1.0;
    for w in d.windows(20) {
        let m = w.iter().sum::<f64>() / 20.0;
        assert!(m > 0.0 && m < upper, "moving average {m}");
    }
}

#[test]
fn target_only_beats_chance() {
    let src = source();
    let pre = pretrain_source(&src, &spec(), &TrainConfig { pretrain_steps: 10, ..cfg() }, None).unwrap();
    let pool = target_pool();
    let split = make_splits(&pool, 5, 3).unwrap();
    let test = shift_domain(&synth_digits(20, &[5, 6, 7, 8, 9], SIDE, 50).unwrap(), DomainShift::default());
    let data = TransferData {
        source: &src,
        labeled: &split.labeled,
        unlabeled: &split.unlabeled,
        test: Some(&test),
    };
    let r = run_baseline(Baseline::TargetOnly, &pre.net, &src.classes, data, &TrainConfig { adapt_steps: 150, ..cfg() }).unwrap();
    assert!(r.record.final_accuracy().unwrap() > 0.2, "{:?}", r.record.final_accuracy());
}

#[test]
fn fine_tune_starts_below_target_only() {
    let src = synth_digits(40, &[0, 1, 2, 3, 4], SIDE, 1).unwrap();
    let pre = pretrain_source(&src, &spec(), &cfg(), None).unwrap();
    // source-like target: same rendering and classes, fresh samples
    let pool = synth_digits(20, &[0, 1, 2, 3, 4], SIDE, 4).unwrap();
    let split = make_splits(&pool, 5, 3).unwrap();
    let data = TransferData {
        source: &src,
        labeled: &split.labeled,
        unlabeled: &split.unlabeled,
        test: None,
    };
    let c = TrainConfig { adapt_steps: 1, ..cfg() };
    let ft = run_baseline(Baseline::FineTune, &pre.net, &src.classes, data, &c).unwrap();
    let scratch = run_baseline(Baseline::TargetOnly, &pre.net, &src.classes, data, &c).unwrap();
    assert!(ft.record.steps[0].losses.sup <= scratch.record.steps[0].losses.sup);
}

#[test]
fn unsupervised_adaptation_without_weight_is_inert() {
    let src = source();
    let c = TrainConfig { pretrain_steps: 30, ..cfg() };
    let pre = pretrain_source(&src, &spec(), &c, None).unwrap();
    let tgt = shift_domain(&synth_digits(20, &[0, 1, 2, 3, 4], SIDE, 8).unwrap(), DomainShift::default());
    let out = adapt_unsupervised(&pre.net, &src, &tgt.without_labels(), Some(&tgt), &TrainConfig { alpha: 0.0, adapt_steps: 5, ..c.clone() }).unwrap();
    for (a, b) in pre.net.parameters().iter().zip(out.net.parameters()) {
        assert_eq!(a.to_vec(), b.to_vec());
    }
    for gamma in [0.1, 1.0] {
        let out = adapt_unsupervised(&pre.net, &src, &tgt.without_labels(), Some(&tgt), &TrainConfig { gamma, adapt_steps: 5, ..c.clone() }).unwrap();
        assert_eq!(out.record.steps.len(), 5);
        assert!(out.record.final_accuracy().is_some());
        assert_ne!(pre.net.body_parameters()[0].to_vec(), out.net.body_parameters()[0].to_vec());
        assert_eq!(pre.net.head_parameters()[0].to_vec(), out.net.head_parameters()[0].to_vec());
    }
}
