//! Source pretraining, joint adaptation, supervised baselines and
//! unsupervised adaptation.
//!
//! Adaptation alternates one discriminator step and one encoder step per
//! iteration. Source activations always come from a frozen copy of the
//! pretrained network; target activations come from the live target
//! network. Labeled and unlabeled target batches get separate forward
//! passes, so with both transfer weights at zero the encoder update is
//! exactly plain fine-tuning.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::data::{LabeledDataset, Sampler, UnlabeledDataset};
use crate::disc::{Activation, Discriminator, DiscriminatorSpec, Fusion, DIGITS_HEAD};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalResult};
use crate::losses::{domain_loss_d, domain_loss_e, prototypes, semantic_total, supervised_ce, total_objective, LossReport, SemanticConfig};
use crate::nn::{HeadInit, Mode, Network, NetworkSpec};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{no_grad, scale, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub tau_st: f64,
    pub tau_tt: f64,
    pub gamma: f64,
    pub fusion: Fusion,
    /// Overrides the network's default discriminator taps.
    pub taps: Option<Vec<String>>,
    pub disc_hidden: Vec<usize>,
    pub lr: f64,
    pub clip_norm: Option<f64>,
    pub batch_source: usize,
    /// `None` uses the whole labeled target set every step.
    pub batch_labeled: Option<usize>,
    pub batch_unlabeled: usize,
    pub pretrain_steps: usize,
    pub adapt_steps: usize,
    /// Evaluate every this many steps (0: only after the last step).
    pub eval_every: usize,
    pub seed: u64,
    /// Source examples per class averaged into the source prototypes.
    pub support_per_class: usize,
    pub stop_grad_prototypes: bool,
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.1,
            beta: 0.1,
            tau_st: 2.0,
            tau_tt: 1.0,
            gamma: 0.1,
            fusion: Fusion::Sum,
            taps: None,
            disc_hidden: DIGITS_HEAD.to_vec(),
            lr: 1e-3,
            clip_norm: None,
            batch_source: 128,
            batch_labeled: None,
            batch_unlabeled: 128,
            pretrain_steps: 2000,
            adapt_steps: 2000,
            eval_every: 0,
            seed: 0,
            support_per_class: 1000,
            stop_grad_prototypes: false,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return bad(format!("alpha and beta must be non-negative, got {} and {}", self.alpha, self.beta));
        }
        if !(self.tau_st > 0.0 && self.tau_tt > 0.0) {
            return bad(format!("temperatures must be positive, got {} and {}", self.tau_st, self.tau_tt));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        if !(self.lr > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if self.batch_source == 0 || self.batch_unlabeled == 0 || self.batch_labeled == Some(0) || self.support_per_class == 0 {
            return bad("batch sizes must be positive".into());
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            clip_norm: self.clip_norm,
            ..AdamConfig::default()
        }
    }

    fn semantic(&self) -> SemanticConfig {
        SemanticConfig {
            tau_st: self.tau_st,
            tau_tt: self.tau_tt,
            stop_grad_prototypes: self.stop_grad_prototypes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub losses: LossReport,
    pub eval_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub seed: u64,
    pub steps: Vec<StepLog>,
    pub final_eval: Option<EvalResult>,
    pub wall_clock: Duration,
}

pub const CSV_HEADER: &str = "step,loss_sup,loss_dt_d,loss_dt_e,loss_st_src,loss_st_sup,loss_st_unsup,loss_total,eval_acc";

impl TrainRecord {
    fn new(seed: u64) -> Self {
        TrainRecord {
            seed,
            steps: Vec::new(),
            final_eval: None,
            wall_clock: Duration::ZERO,
        }
    }

    /// Metrics table; `eval_acc` is empty on steps without evaluation.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for s in &self.steps {
            let l = &s.losses;
            let _ = write!(out, "{},{},{},{},{},{},{},{},", s.step, l.sup, l.dt_d, l.dt_e, l.st_src, l.st_sup, l.st_unsup, l.total);
            if let Some(a) = s.eval_acc {
                let _ = write!(out, "{a}");
            }
            out.push('\n');
        }
        out
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.final_eval.as_ref().map(|e| e.accuracy)
    }
}

pub struct Trained {
    pub net: Network,
    pub record: TrainRecord,
}

pub struct JointOutcome {
    pub net: Network,
    pub discriminator: Discriminator,
    pub record: TrainRecord,
}

/// Data for one transfer run.
#[derive(Clone, Copy)]
pub struct TransferData<'a> {
    pub source: &'a LabeledDataset,
    pub labeled: &'a LabeledDataset,
    pub unlabeled: &'a UnlabeledDataset,
    pub test: Option<&'a LabeledDataset>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    /// Supervised training on the labeled target set from scratch.
    TargetOnly,
    /// Supervised training on the labeled target set from the source model.
    FineTune,
}

mod stream {
    pub const HEAD: u64 = 1;
    pub const DISC: u64 = 2;
    pub const SOURCE: u64 = 3;
    pub const LABELED: u64 = 4;
    pub const UNLABELED: u64 = 5;
    pub const SUPPORT: u64 = 6;
}

fn sub_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

fn check_geometry(spec: &NetworkSpec, name: &str, h: usize, w: usize) -> Result<()> {
    if spec.input[1..] != [h, w] {
        return Err(Error::Data(format!("{name} images are {h}×{w} but the network expects {:?}", &spec.input[1..])));
    }
    Ok(())
}

fn item(t: &Tensor<f32>) -> f64 {
    t.item() as f64
}

fn finite_or_diverged(net: &Network, step: usize, what: &'static str, value: f64) -> Result<()> {
    if value.is_finite() {
        return Ok(());
    }
    Err(Error::Diverged {
        step,
        what,
        value,
        last_good: Some(Box::new(Checkpoint::from_network(net, "", step.saturating_sub(1) as u64))),
    })
}

fn should_eval(cfg: &TrainConfig, step: usize, last: usize) -> bool {
    step == last || (cfg.eval_every > 0 && step % cfg.eval_every == 0)
}

fn maybe_eval(net: &Network, test: Option<&LabeledDataset>, record: &mut TrainRecord, eval_now: bool) -> Result<Option<f64>> {
    match test {
        Some(ds) if eval_now => {
            let r = evaluate(net, ds, None)?;
            let acc = r.accuracy;
            record.final_eval = Some(r);
            Ok(Some(acc))
        }
        _ => Ok(None),
    }
}

struct LabeledBatches {
    all: Vec<usize>,
    sampler: Option<Sampler>,
}

impl LabeledBatches {
    fn new(n: usize, batch: Option<usize>, seed: u64) -> Self {
        LabeledBatches {
            all: (0..n).collect(),
            sampler: batch.map(|b| Sampler::new(n, b, sub_seed(seed, stream::LABELED))),
        }
    }

    fn next(&mut self) -> Vec<usize> {
        match &mut self.sampler {
            Some(s) => s.next_batch(),
            None => self.all.clone(),
        }
    }
}

fn supervised_loop(net: &Network, ds: &LabeledDataset, mut batches: LabeledBatches, steps: usize, cfg: &TrainConfig, test: Option<&LabeledDataset>) -> Result<TrainRecord> {
    let start = Instant::now();
    let mut record = TrainRecord::new(cfg.seed);
    let mut opt = Adam::new(net.parameters(), cfg.adam())?;
    for step in 1..=steps {
        let idx = batches.next();
        let logits = net.logits(&ds.batch(&idx), Mode::Train)?;
        let loss = supervised_ce(&logits, &ds.batch_labels(&idx))?;
        let value = item(&loss);
        finite_or_diverged(net, step, "loss_sup", value)?;
        opt.zero_grad();
        loss.backward()?;
        opt.step();
        let eval_acc = maybe_eval(net, test, &mut record, should_eval(cfg, step, steps))?;
        record.steps.push(StepLog {
            step,
            losses: LossReport {
                sup: value,
                total: value,
                ..LossReport::default()
            },
            eval_acc,
        });
    }
    record.wall_clock = start.elapsed();
    Ok(record)
}

/// Supervised training of a fresh network on the source set.
/// `final_eval` holds the accuracy on `test`, or on the training set when
/// no test set is given.
pub fn pretrain_source(source: &LabeledDataset, spec: &NetworkSpec, cfg: &TrainConfig, test: Option<&LabeledDataset>) -> Result<Trained> {
    cfg.validate()?;
    let spec = spec.clone().with_classes(source.num_classes());
    check_geometry(&spec, &source.name, source.height, source.width)?;
    let net = Network::build(&spec, cfg.seed)?;
    let batches = LabeledBatches {
        all: Vec::new(),
        sampler: Some(Sampler::new(source.len(), cfg.batch_source, sub_seed(cfg.seed, stream::SOURCE))),
    };
    let mut record = supervised_loop(&net, source, batches, cfg.pretrain_steps, cfg, test)?;
    if test.is_none() {
        record.final_eval = Some(evaluate(&net, source, None)?);
    }
    Ok(Trained { net, record })
}

fn head_init(source: &Network, labeled: &LabeledDataset, source_classes: &[usize], seed: u64) -> HeadInit {
    if source.spec().num_classes() == Some(labeled.num_classes()) && source_classes == labeled.classes.as_slice() {
        HeadInit::Copy
    } else {
        HeadInit::Reinit {
            classes: labeled.num_classes(),
            seed: sub_seed(seed, stream::HEAD),
        }
    }
}

/// Supervised baseline on the labeled target set.
pub fn run_baseline(kind: Baseline, source: &Network, source_classes: &[usize], data: TransferData<'_>, cfg: &TrainConfig) -> Result<Trained> {
    cfg.validate()?;
    let ds = data.labeled;
    check_geometry(source.spec(), &ds.name, ds.height, ds.width)?;
    let net = match kind {
        Baseline::FineTune => source.clone_into_target(head_init(source, ds, source_classes, cfg.seed))?,
        Baseline::TargetOnly => Network::build(&source.spec().clone().with_classes(ds.num_classes()), sub_seed(cfg.seed, stream::HEAD))?,
    };
    let batches = LabeledBatches::new(ds.len(), cfg.batch_labeled, cfg.seed);
    let record = supervised_loop(&net, ds, batches, cfg.adapt_steps, cfg, data.test)?;
    Ok(Trained { net, record })
}

/// Class means of frozen-network embeddings over up to `per_class`
/// seeded examples of each source class.
pub fn source_prototypes(frozen: &Network, source: &LabeledDataset, per_class: usize, seed: u64) -> Result<Tensor<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, stream::SUPPORT));
    let mut idx = Vec::new();
    for c in 0..source.num_classes() {
        let mut members: Vec<usize> = (0..source.len()).filter(|&i| source.labels[i] == c).collect();
        members.shuffle(&mut rng);
        members.truncate(per_class);
        idx.extend(members);
    }
    no_grad(|| {
        let mut rows = Vec::new();
        let mut width = 0;
        for chunk in idx.chunks(256) {
            let e = frozen.forward(&source.batch(chunk), Mode::Eval)?.embedding;
            width = e.shape()[1];
            rows.extend(e.to_vec());
        }
        let emb = Tensor::new(&[idx.len(), width], rows)?;
        prototypes(&emb, &source.batch_labels(&idx), source.num_classes())
    })
}

fn discriminator_for(net: &NetworkSpec, cfg: &TrainConfig) -> Result<(NetworkSpec, Discriminator)> {
    let mut spec = net.clone();
    if let Some(taps) = &cfg.taps {
        spec.taps = taps.clone();
    }
    spec.shapes()?;
    let dspec = DiscriminatorSpec {
        tap_widths: spec.tap_widths()?,
        hidden: cfg.disc_hidden.clone(),
        gamma: cfg.gamma,
        fusion: cfg.fusion,
        activation: Activation::Relu,
    };
    Ok((spec, Discriminator::build(&dspec, sub_seed(cfg.seed, stream::DISC))?))
}

/// Rebuilds `net` with a different tap list, sharing its parameters.
fn retap(net: &Network, spec: &NetworkSpec) -> Result<Network> {
    let tapped = Network::build(spec, 0)?;
    let values: Vec<(String, Vec<usize>, Vec<f32>)> = net.named_tensors().into_iter().map(|(n, t)| (n, t.shape().to_vec(), t.to_vec())).collect();
    tapped.load_values(&values)?;
    Ok(tapped)
}

fn disc_step(disc: &Discriminator, opt: &mut Adam, src_taps: &[Tensor<f32>], tgt_taps: &[Tensor<f32>]) -> Result<f64> {
    let loss = domain_loss_d(&disc.forward(src_taps)?, &disc.forward(tgt_taps)?)?;
    opt.zero_grad();
    loss.backward()?;
    opt.step();
    Ok(item(&loss))
}

/// Joint adaptation: supervised loss on the labeled target set, plus `α`
/// times the encoder's adversarial loss and `β` times the semantic
/// transfer loss. `source` is not modified.
pub fn adapt_joint(source: &Network, source_classes: &[usize], data: TransferData<'_>, cfg: &TrainConfig) -> Result<JointOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    for (name, h, w) in [
        (&data.source.name, data.source.height, data.source.width),
        (&data.labeled.name, data.labeled.height, data.labeled.width),
        (&data.unlabeled.name, data.unlabeled.height, data.unlabeled.width),
    ] {
        check_geometry(source.spec(), name, h, w)?;
    }
    let (tap_spec, disc) = discriminator_for(source.spec(), cfg)?;
    let frozen = retap(source, &tap_spec)?.frozen();
    let target = retap(&source.clone_into_target(head_init(source, data.labeled, source_classes, cfg.seed))?, &tap_spec.clone().with_classes(data.labeled.num_classes()))?;

    let adversarial = cfg.alpha > 0.0;
    let semantic = cfg.beta > 0.0;
    let src_support = if semantic { Some(source_prototypes(&frozen, data.source, cfg.support_per_class, cfg.seed)?) } else { None };
    let mut disc_opt = Adam::new(disc.parameters(), cfg.adam())?;
    let mut enc_opt = Adam::new(target.parameters(), cfg.adam())?;
    let mut src_sampler = Sampler::new(data.source.len(), cfg.batch_source, sub_seed(cfg.seed, stream::SOURCE));
    let mut unl_sampler = Sampler::new(data.unlabeled.len(), cfg.batch_unlabeled, sub_seed(cfg.seed, stream::UNLABELED));
    let mut labeled = LabeledBatches::new(data.labeled.len(), cfg.batch_labeled, cfg.seed);
    let classes = data.labeled.num_classes();
    let mut record = TrainRecord::new(cfg.seed);

    for step in 1..=cfg.adapt_steps {
        let mut report = LossReport::default();
        let lab_idx = labeled.next();
        let lab_labels = data.labeled.batch_labels(&lab_idx);
        let xu = (adversarial || semantic).then(|| data.unlabeled.batch::<f32>(&unl_sampler.next_batch()));

        let mut src_taps = Vec::new();
        if let (true, Some(xu)) = (adversarial, &xu) {
            let xs = data.source.batch::<f32>(&src_sampler.next_batch());
            src_taps = no_grad(|| frozen.forward(&xs, Mode::Eval).map(|o| o.taps))?;
            let tgt_taps = no_grad(|| target.forward(xu, Mode::Train).map(|o| o.taps))?;
            report.dt_d = disc_step(&disc, &mut disc_opt, &src_taps, &tgt_taps)?;
            finite_or_diverged(&target, step, "loss_dt_d", report.dt_d)?;
        }

        let lab = target.forward(&data.labeled.batch(&lab_idx), Mode::Train)?;
        let sup = supervised_ce(&lab.logits, &lab_labels)?;
        let unl = match &xu {
            Some(xu) => Some(target.forward(xu, Mode::Train)?),
            None => None,
        };
        let zero = Tensor::scalar(0.0f32);
        let dt_e = match &unl {
            Some(u) if adversarial => domain_loss_e(&disc.forward(&src_taps)?, &disc.forward(&u.taps)?)?,
            _ => zero.clone(),
        };
        let st = match (&unl, &src_support) {
            (Some(u), Some(support)) if semantic => {
                let terms = semantic_total(support, &lab.embedding, &lab_labels, &u.embedding, classes, cfg.semantic())?;
                report.st_src = item(&terms.src);
                report.st_sup = item(&terms.sup);
                report.st_unsup = item(&terms.unsup);
                terms.total
            }
            _ => zero.clone(),
        };
        let total = total_objective(&sup, &dt_e, &st, cfg.alpha, cfg.beta)?;
        report.sup = item(&sup);
        report.dt_e = item(&dt_e);
        report.total = item(&total);
        finite_or_diverged(&target, step, "loss_total", report.total)?;
        enc_opt.zero_grad();
        total.backward()?;
        enc_opt.step();

        let eval_acc = maybe_eval(&target, data.test, &mut record, should_eval(cfg, step, cfg.adapt_steps))?;
        record.steps.push(StepLog { step, losses: report, eval_acc });
    }
    record.wall_clock = start.elapsed();
    Ok(JointOutcome {
        net: target,
        discriminator: disc,
        record,
    })
}

/// Unsupervised adaptation with a shared label space: the target encoder
/// starts from the source network and is trained only against the
/// discriminator, scaled by `α`. The classifier layer stays fixed at the
/// source weights.
pub fn adapt_unsupervised(source: &Network, source_data: &LabeledDataset, unlabeled: &UnlabeledDataset, test: Option<&LabeledDataset>, cfg: &TrainConfig) -> Result<JointOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    check_geometry(source.spec(), &source_data.name, source_data.height, source_data.width)?;
    check_geometry(source.spec(), &unlabeled.name, unlabeled.height, unlabeled.width)?;
    if let Some(t) = test {
        if t.classes != source_data.classes {
            return Err(Error::Data(format!("label spaces differ: source {:?}, target {:?}", source_data.classes, t.classes)));
        }
    }
    let (tap_spec, disc) = discriminator_for(source.spec(), cfg)?;
    let frozen = retap(source, &tap_spec)?.frozen();
    let target = retap(source, &tap_spec)?;
    let mut disc_opt = Adam::new(disc.parameters(), cfg.adam())?;
    let mut enc_opt = Adam::new(target.body_parameters(), cfg.adam())?;
    let mut src_sampler = Sampler::new(source_data.len(), cfg.batch_source, sub_seed(cfg.seed, stream::SOURCE));
    let mut unl_sampler = Sampler::new(unlabeled.len(), cfg.batch_unlabeled, sub_seed(cfg.seed, stream::UNLABELED));
    let mut record = TrainRecord::new(cfg.seed);

    for step in 1..=cfg.adapt_steps {
        let xs = source_data.batch::<f32>(&src_sampler.next_batch());
        let xu = unlabeled.batch::<f32>(&unl_sampler.next_batch());
        let src_taps = no_grad(|| frozen.forward(&xs, Mode::Eval).map(|o| o.taps))?;
        let tgt_taps = no_grad(|| target.forward(&xu, Mode::Train).map(|o| o.taps))?;
        let dt_d = disc_step(&disc, &mut disc_opt, &src_taps, &tgt_taps)?;
        finite_or_diverged(&target, step, "loss_dt_d", dt_d)?;

        let out = target.forward(&xu, Mode::Train)?;
        let dt_e = domain_loss_e(&disc.forward(&src_taps)?, &disc.forward(&out.taps)?)?;
        let total = scale(&dt_e, cfg.alpha);
        let report = LossReport {
            dt_d,
            dt_e: item(&dt_e),
            total: item(&total),
            ..LossReport::default()
        };
        finite_or_diverged(&target, step, "loss_total", report.total)?;
        for p in target.parameters() {
            p.zero_grad();
        }
        total.backward()?;
        enc_opt.step();

        let eval_acc = maybe_eval(&target, test, &mut record, should_eval(cfg, step, cfg.adapt_steps))?;
        record.steps.push(StepLog { step, losses: report, eval_acc });
    }
    record.wall_clock = start.elapsed();
    Ok(JointOutcome {
        net: target,
        discriminator: disc,
        record,
    })
}
