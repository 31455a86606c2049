use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use xfer_core::checkpoint::Checkpoint;
use xfer_core::checks::{self, CaseReport};
use xfer_core::data::make_splits;
use xfer_core::eval::{aggregate, evaluate, Aggregate, EvalResult};
use xfer_core::nn::{Network, NetworkSpec};
use xfer_core::trainer::{adapt_joint, adapt_unsupervised, pretrain_source, run_baseline, Baseline, TrainConfig, TrainRecord, TransferData};

use crate::config::{Config, Method, Task};
use crate::error::{io, CliError, CliResult};
use crate::inputs::{self, TaskData};

pub const CONFIG_ECHO: &str = "config.txt";
pub const SEEDS_MANIFEST: &str = "seeds.txt";
pub const PRETRAIN_METRICS: &str = "pretrain_metrics.csv";
pub const RESULTS: &str = "results.csv";
pub const AGGREGATE: &str = "aggregate.csv";
pub const TIMING: &str = "timing.csv";
pub const UDA_RESULTS: &str = "uda.csv";
pub const UDA_AGGREGATE: &str = "uda_aggregate.csv";
pub const LAST_GOOD: &str = "last_good.ckpt";

fn write(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(io(path))
}

fn prepare(cfg: &Config) -> CliResult<()> {
    fs::create_dir_all(&cfg.out_dir).map_err(io(&cfg.out_dir))?;
    write(&cfg.out_dir.join(CONFIG_ECHO), &cfg.echo())
}

fn source_spec(cfg: &Config) -> CliResult<NetworkSpec> {
    let mut spec = NetworkSpec::by_name(cfg.network(), inputs::source_class_count(cfg.task))?;
    if let Some(taps) = &cfg.train.taps {
        spec.taps = taps.clone();
    }
    spec.shapes()?;
    Ok(spec)
}

/// Saves the last good network of a diverged run next to the outputs.
fn keep_last_good(dir: &Path, err: xfer_core::Error) -> CliError {
    if let xfer_core::Error::Diverged { last_good: Some(ck), .. } = &err {
        let _ = ck.save(&dir.join(LAST_GOOD));
    }
    err.into()
}

fn load_source(cfg: &Config, spec: &NetworkSpec) -> CliResult<(Network, Checkpoint)> {
    let path = cfg.source_ckpt();
    if !path.is_file() {
        return Err(CliError::MissingPath(path));
    }
    let ck = Checkpoint::load(&path)?;
    let net = Network::build(spec, 0)?;
    ck.apply_to(&net)?;
    Ok((net, ck))
}

pub struct PretrainSummary {
    pub checkpoint: PathBuf,
    pub train_accuracy: f64,
    pub record: TrainRecord,
}

pub fn pretrain(cfg: &Config) -> CliResult<PretrainSummary> {
    let spec = source_spec(cfg)?;
    let data = inputs::load(cfg, &spec)?;
    prepare(cfg)?;
    let trained = pretrain_source(&data.source, &spec, &cfg.train, None).map_err(|e| keep_last_good(&cfg.out_dir, e))?;
    let path = cfg.source_ckpt();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io(dir))?;
    }
    Checkpoint::from_network(&trained.net, &cfg.echo(), trained.record.steps.len() as u64).save(&path)?;
    write(&cfg.out_dir.join(PRETRAIN_METRICS), &trained.record.to_csv())?;
    write(&cfg.out_dir.join(SEEDS_MANIFEST), &format!("pretrain,{}\n", cfg.train.seed))?;
    Ok(PretrainSummary {
        checkpoint: path,
        train_accuracy: trained.record.final_accuracy().unwrap_or(f64::NAN),
        record: trained.record,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub method: Method,
    pub k: usize,
    pub seed: u64,
    pub labeled: usize,
    pub accuracy: f64,
    pub wall_clock: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub method: Method,
    pub k: usize,
    pub stats: Aggregate,
}

pub struct TransferSummary {
    pub runs: Vec<RunResult>,
    pub aggregate: Vec<AggregateRow>,
}

pub fn run_dir(cfg: &Config, method: Method, k: usize, seed: u64) -> PathBuf {
    cfg.out_dir.join("runs").join(format!("{}_k{k}_s{seed}", method.name()))
}

fn method_config(base: &TrainConfig, method: Method, seed: u64) -> TrainConfig {
    let mut c = TrainConfig { seed, ..base.clone() };
    if method == Method::FineTuneAdv {
        c.beta = 0.0;
    }
    c
}

fn transfer_one(cfg: &Config, ck: &Checkpoint, spec: &NetworkSpec, data: &TaskData, (method, k, seed): (Method, usize, u64)) -> CliResult<RunResult> {
    let source = Network::build(spec, 0)?;
    ck.apply_to(&source)?;
    let split = make_splits(&data.target_pool, k, seed)?;
    let td = TransferData {
        source: &data.source,
        labeled: &split.labeled,
        unlabeled: &split.unlabeled,
        test: Some(&data.test),
    };
    let tc = method_config(&cfg.train, method, seed);
    let dir = run_dir(cfg, method, k, seed);
    fs::create_dir_all(&dir).map_err(io(&dir))?;
    let classes = data.source_classes();
    let (net, record) = match method {
        Method::TargetOnly => run_baseline(Baseline::TargetOnly, &source, classes, td, &tc).map(|t| (t.net, t.record)),
        Method::FineTune => run_baseline(Baseline::FineTune, &source, classes, td, &tc).map(|t| (t.net, t.record)),
        Method::FineTuneAdv | Method::Full => adapt_joint(&source, classes, td, &tc).map(|o| (o.net, o.record)),
    }
    .map_err(|e| keep_last_good(&dir, e))?;
    write(&dir.join("metrics.csv"), &record.to_csv())?;
    Checkpoint::from_network(&net, &cfg.echo(), record.steps.len() as u64).save(&dir.join("target.ckpt"))?;
    Ok(RunResult {
        method,
        k,
        seed,
        labeled: split.labeled.len(),
        accuracy: record.final_accuracy().unwrap_or(f64::NAN),
        wall_clock: record.wall_clock.as_secs_f64(),
    })
}

/// Runs `jobs` on `threads` workers; results come back in job order.
fn run_parallel<J: Sync, R: Send>(jobs: &[J], threads: usize, f: impl Fn(&J) -> CliResult<R> + Sync) -> CliResult<Vec<R>> {
    if threads <= 1 {
        return jobs.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<CliResult<R>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads.min(jobs.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(job) = jobs.get(i) else { break };
                let r = f(job);
                slots.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots.into_inner().unwrap().into_iter().map(|r| r.expect("every job ran")).collect()
}

pub fn transfer(cfg: &Config) -> CliResult<TransferSummary> {
    let spec = source_spec(cfg)?;
    if cfg.task != Task::Transfer {
        return Err(CliError::Config("transfer needs task=transfer".into()));
    }
    let data = inputs::load(cfg, &spec)?;
    let (_, ck) = load_source(cfg, &spec)?;
    prepare(cfg)?;
    let mut jobs = Vec::new();
    for &method in &cfg.methods {
        for &k in &cfg.ks {
            for &seed in cfg.seeds() {
                jobs.push((method, k, seed));
            }
        }
    }
    let mut manifest = format!("pretrain,{}\n", cfg.train.seed);
    for (m, k, s) in &jobs {
        let _ = writeln!(manifest, "{}_k{k},{s}", m.name());
    }
    write(&cfg.out_dir.join(SEEDS_MANIFEST), &manifest)?;

    let runs = run_parallel(&jobs, cfg.threads, |&job| transfer_one(cfg, &ck, &spec, &data, job))?;

    let mut results = String::from("method,k,seed,labeled,accuracy\n");
    let mut timing = String::from("method,k,seed,wall_clock_s\n");
    for r in &runs {
        let _ = writeln!(results, "{},{},{},{},{}", r.method.name(), r.k, r.seed, r.labeled, r.accuracy);
        let _ = writeln!(timing, "{},{},{},{:.3}", r.method.name(), r.k, r.seed, r.wall_clock);
    }
    write(&cfg.out_dir.join(RESULTS), &results)?;
    write(&cfg.out_dir.join(TIMING), &timing)?;

    let mut rows = Vec::new();
    let mut table = String::from("method,k,mean,stderr,n\n");
    for &method in &cfg.methods {
        for &k in &cfg.ks {
            let accs: Vec<f64> = runs.iter().filter(|r| r.method == method && r.k == k).map(|r| r.accuracy).collect();
            let stats = if accs.len() >= 2 {
                aggregate(&accs)?
            } else {
                Aggregate {
                    mean: accs.first().copied().unwrap_or(f64::NAN),
                    stderr: f64::NAN,
                    n: accs.len(),
                }
            };
            let _ = writeln!(table, "{},{k},{},{},{}", method.name(), stats.mean, stats.stderr, stats.n);
            rows.push(AggregateRow { method, k, stats });
        }
    }
    write(&cfg.out_dir.join(AGGREGATE), &table)?;
    Ok(TransferSummary { runs, aggregate: rows })
}

#[derive(Debug, Clone, PartialEq)]
pub struct UdaRun {
    pub seed: u64,
    pub source_only: f64,
    pub adapted: f64,
}

pub struct UdaSummary {
    pub runs: Vec<UdaRun>,
    pub source_only: Option<Aggregate>,
    pub adapted: Option<Aggregate>,
}

pub fn uda(cfg: &Config) -> CliResult<UdaSummary> {
    if cfg.task != Task::Uda {
        return Err(CliError::Config("uda needs task=uda".into()));
    }
    let spec = source_spec(cfg)?;
    let data = inputs::load(cfg, &spec)?;
    let (source, ck) = load_source(cfg, &spec)?;
    prepare(cfg)?;
    let source_only = evaluate(&source, &data.test, None)?.accuracy;
    let unlabeled = data.target_pool.without_labels();
    let seeds = cfg.seeds().to_vec();
    let mut manifest = format!("pretrain,{}\n", cfg.train.seed);
    for s in &seeds {
        let _ = writeln!(manifest, "uda,{s}");
    }
    write(&cfg.out_dir.join(SEEDS_MANIFEST), &manifest)?;

    let runs = run_parallel(&seeds, cfg.threads, |&seed| {
        let net = Network::build(&spec, 0)?;
        ck.apply_to(&net)?;
        let dir = cfg.out_dir.join("runs").join(format!("uda_s{seed}"));
        fs::create_dir_all(&dir).map_err(io(&dir))?;
        let tc = TrainConfig { seed, ..cfg.train.clone() };
        let out = adapt_unsupervised(&net, &data.source, &unlabeled, Some(&data.test), &tc).map_err(|e| keep_last_good(&dir, e))?;
        write(&dir.join("metrics.csv"), &out.record.to_csv())?;
        Checkpoint::from_network(&out.net, &cfg.echo(), out.record.steps.len() as u64).save(&dir.join("target.ckpt"))?;
        Ok(UdaRun {
            seed,
            source_only,
            adapted: out.record.final_accuracy().unwrap_or(f64::NAN),
        })
    })?;

    let mut table = String::from("seed,gamma,source_only,adapted\n");
    for r in &runs {
        let _ = writeln!(table, "{},{},{},{}", r.seed, cfg.train.gamma, r.source_only, r.adapted);
    }
    write(&cfg.out_dir.join(UDA_RESULTS), &table)?;
    let col = |f: fn(&UdaRun) -> f64| aggregate(&runs.iter().map(f).collect::<Vec<_>>()).ok();
    let (so, ad) = (col(|r| r.source_only), col(|r| r.adapted));
    let mut agg = String::from("column,mean,stderr,n\n");
    for (name, a) in [("source_only", so), ("adapted", ad)] {
        if let Some(a) = a {
            let _ = writeln!(agg, "{name},{},{},{}", a.mean, a.stderr, a.n);
        }
    }
    write(&cfg.out_dir.join(UDA_AGGREGATE), &agg)?;
    Ok(UdaSummary {
        runs,
        source_only: so,
        adapted: ad,
    })
}

/// Accuracy of a stored network on the task's target test set.
pub fn eval(cfg: &Config, checkpoint: &Path) -> CliResult<EvalResult> {
    if !checkpoint.is_file() {
        return Err(CliError::MissingPath(checkpoint.to_path_buf()));
    }
    let spec = source_spec(cfg)?;
    let data = inputs::load(cfg, &spec)?;
    let ck = Checkpoint::load(checkpoint)?;
    let net: Network = Network::build(&spec, 0)?;
    ck.apply_to(&net)?;
    Ok(evaluate(&net, &data.test, None)?)
}

/// Runs every registered gradient check (plus the faulty fixture when
/// asked); fails when any case exceeds the tolerance.
pub fn gradcheck(include_faulty: bool, seed: u64) -> CliResult<(Vec<CaseReport>, usize)> {
    let mut cases = checks::registry();
    if include_faulty {
        cases.push(checks::faulty_fixture());
    }
    let reports = cases.iter().map(|c| c.run(seed)).collect::<xfer_core::Result<Vec<_>>>()?;
    let failed = reports.iter().filter(|r| !r.passed()).count();
    Ok((reports, failed))
}

pub fn format_gradcheck(reports: &[CaseReport]) -> String {
    let mut out = format!("{:<24} {:>9} {:>8} {:>8} {:>12}  status\n", "case", "instances", "checked", "excluded", "max_rel_err");
    for r in reports {
        let _ = writeln!(
            out,
            "{:<24} {:>9} {:>8} {:>8} {:>12.3e}  {}",
            r.name,
            r.instances,
            r.checked,
            r.excluded,
            r.max_rel_error,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    out
}
