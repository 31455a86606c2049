//! Flat `key=value` experiment configuration.
//!
//! Files hold one assignment per line; `#` starts a comment. Command-line
//! flags `--key value` are applied after the file and override it. The
//! resolved configuration is written back out in the same format.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use xfer_core::disc::{Fusion, DIGITS_HEAD, LENET_HEAD};
use xfer_core::trainer::TrainConfig;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    /// Disjoint-label few-shot transfer (digits 0-4 to digits 5-9).
    Transfer,
    /// Shared-label unsupervised adaptation.
    Uda,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dataset {
    Synth,
    Idx,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Method {
    TargetOnly,
    FineTune,
    /// Fine-tuning plus the adversarial term only.
    FineTuneAdv,
    Full,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::TargetOnly, Method::FineTune, Method::FineTuneAdv, Method::Full];

    pub fn name(self) -> &'static str {
        match self {
            Method::TargetOnly => "target_only",
            Method::FineTune => "fine_tune",
            Method::FineTuneAdv => "fine_tune_adv",
            Method::Full => "full",
        }
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Method::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| format!("unknown method `{s}`"))
    }
}

/// Every accepted key with its help text.
pub const KEYS: &[(&str, &str)] = &[
    ("experiment", "run name"),
    ("out_dir", "output directory"),
    ("task", "transfer | uda"),
    ("dataset", "synth | idx"),
    ("data_dir", "directory holding the IDX files"),
    ("network", "digits32 | lenet28 | compactN | auto"),
    ("source_ckpt", "source checkpoint path (default <out_dir>/source.ckpt)"),
    ("seeds", "comma-separated run seeds (default 0..9 for transfer, 0..4 for uda)"),
    ("ks", "comma-separated shots per class"),
    ("methods", "comma-separated: target_only, fine_tune, fine_tune_adv, full"),
    ("source_limit", "source training images kept (0: all)"),
    ("synth_per_class", "synthetic images per class in each training pool"),
    ("synth_test_per_class", "synthetic test images per class"),
    ("threads", "worker threads for independent runs"),
    ("alpha", "weight of the adversarial term"),
    ("beta", "weight of the semantic term"),
    ("tau_st", "source-target temperature"),
    ("tau_tt", "within-target temperature"),
    ("gamma", "discriminator decay factor in (0, 1]"),
    ("fusion", "sum | concat"),
    ("taps", "comma-separated tap layers | default"),
    ("disc_hidden", "comma-separated discriminator head widths | auto"),
    ("lr", "Adam learning rate"),
    ("clip_norm", "gradient norm cap | none"),
    ("batch_source", "source batch size"),
    ("batch_labeled", "labeled target batch size | all"),
    ("batch_unlabeled", "unlabeled target batch size"),
    ("pretrain_steps", "source pretraining steps"),
    ("adapt_steps", "adaptation steps"),
    ("eval_every", "evaluation interval in steps (0: final step only)"),
    ("seed", "pretraining seed"),
    ("support_per_class", "source examples per class averaged into prototypes"),
    ("stop_grad_prototypes", "true | false"),
    ("deterministic", "true | false"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub experiment: String,
    pub out_dir: PathBuf,
    pub task: Task,
    pub dataset: Dataset,
    pub data_dir: Option<PathBuf>,
    network: Option<String>,
    source_ckpt: Option<PathBuf>,
    seeds: Option<Vec<u64>>,
    pub ks: Vec<usize>,
    pub methods: Vec<Method>,
    pub source_limit: usize,
    pub synth_per_class: usize,
    pub synth_test_per_class: usize,
    pub threads: usize,
    disc_hidden: Option<Vec<usize>>,
    pub train: TrainConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            experiment: "xfer".into(),
            out_dir: PathBuf::from("runs"),
            task: Task::Transfer,
            dataset: Dataset::Synth,
            data_dir: None,
            network: None,
            source_ckpt: None,
            seeds: None,
            ks: vec![2, 3, 4, 5],
            methods: Method::ALL.to_vec(),
            source_limit: 10_000,
            synth_per_class: 200,
            synth_test_per_class: 100,
            threads: 1,
            disc_hidden: None,
            train: TrainConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> CliResult<T> {
    value.parse().map_err(|_| CliError::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> CliResult<Vec<T>> {
    let items: Vec<T> = value.split(',').map(|v| parse(key, v.trim())).collect::<CliResult<_>>()?;
    if items.is_empty() {
        return Err(CliError::Config(format!("`{key}` needs at least one value")));
    }
    Ok(items)
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn auto(value: &str) -> bool {
    matches!(value, "auto" | "default" | "")
}

impl Config {
    pub fn from_file(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Config::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Applies `key=value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> CliResult<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| CliError::Config(format!("line {}: expected key=value, got `{line}`", n + 1)))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        let t = &mut self.train;
        match key {
            "experiment" => self.experiment = value.to_string(),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "task" => {
                self.task = match value {
                    "transfer" => Task::Transfer,
                    "uda" => Task::Uda,
                    _ => return Err(CliError::Config(format!("invalid value `{value}` for `task`"))),
                }
            }
            "dataset" => {
                self.dataset = match value {
                    "synth" => Dataset::Synth,
                    "idx" => Dataset::Idx,
                    _ => return Err(CliError::Config(format!("invalid value `{value}` for `dataset`"))),
                }
            }
            "data_dir" => self.data_dir = (!value.is_empty()).then(|| PathBuf::from(value)),
            "network" => self.network = (!auto(value)).then(|| value.to_string()),
            "source_ckpt" => self.source_ckpt = (!auto(value)).then(|| PathBuf::from(value)),
            "seeds" => self.seeds = if auto(value) { None } else { Some(parse_list(key, value)?) },
            "ks" => self.ks = parse_list(key, value)?,
            "methods" => self.methods = value.split(',').map(|m| m.trim().parse().map_err(CliError::Config)).collect::<CliResult<_>>()?,
            "source_limit" => self.source_limit = parse(key, value)?,
            "synth_per_class" => self.synth_per_class = parse(key, value)?,
            "synth_test_per_class" => self.synth_test_per_class = parse(key, value)?,
            "threads" => self.threads = parse(key, value)?,
            "alpha" => t.alpha = parse(key, value)?,
            "beta" => t.beta = parse(key, value)?,
            "tau_st" => t.tau_st = parse(key, value)?,
            "tau_tt" => t.tau_tt = parse(key, value)?,
            "gamma" => t.gamma = parse(key, value)?,
            "fusion" => {
                t.fusion = match value {
                    "sum" => Fusion::Sum,
                    "concat" => Fusion::Concat,
                    _ => return Err(CliError::Config(format!("invalid value `{value}` for `fusion`"))),
                }
            }
            "taps" => t.taps = if auto(value) { None } else { Some(value.split(',').map(|s| s.trim().to_string()).collect()) },
            "disc_hidden" => {
                self.disc_hidden = if auto(value) { None } else { Some(parse_list(key, value)?) };
                if let Some(h) = &self.disc_hidden {
                    self.train.disc_hidden = h.clone();
                }
            }
            "lr" => t.lr = parse(key, value)?,
            "clip_norm" => t.clip_norm = if value == "none" { None } else { Some(parse(key, value)?) },
            "batch_source" => t.batch_source = parse(key, value)?,
            "batch_labeled" => t.batch_labeled = if value == "all" { None } else { Some(parse(key, value)?) },
            "batch_unlabeled" => t.batch_unlabeled = parse(key, value)?,
            "pretrain_steps" => t.pretrain_steps = parse(key, value)?,
            "adapt_steps" => t.adapt_steps = parse(key, value)?,
            "eval_every" => t.eval_every = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "support_per_class" => t.support_per_class = parse(key, value)?,
            "stop_grad_prototypes" => t.stop_grad_prototypes = parse(key, value)?,
            "deterministic" => t.deterministic = parse(key, value)?,
            _ => return Err(CliError::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Fills task-dependent defaults and checks the result.
    pub fn resolve(mut self) -> CliResult<Self> {
        if self.network.is_none() {
            self.network = Some(
                match self.task {
                    Task::Transfer => "digits32",
                    Task::Uda => "lenet28",
                }
                .into(),
            );
        }
        if self.disc_hidden.is_none() {
            self.disc_hidden = Some(match self.network.as_deref() {
                Some("lenet28") => LENET_HEAD.to_vec(),
                _ => DIGITS_HEAD.to_vec(),
            });
        }
        self.train.disc_hidden = self.disc_hidden.clone().unwrap_or_default();
        if self.seeds.is_none() {
            self.seeds = Some(match self.task {
                Task::Transfer => (0..10).collect(),
                Task::Uda => (0..5).collect(),
            });
        }
        if self.source_ckpt.is_none() {
            self.source_ckpt = Some(self.out_dir.join("source.ckpt"));
        }
        if self.threads == 0 {
            return Err(CliError::Config("threads must be at least 1".into()));
        }
        if self.ks.contains(&0) {
            return Err(CliError::Config("ks must be positive".into()));
        }
        if self.dataset == Dataset::Idx && self.data_dir.is_none() {
            return Err(CliError::Config("dataset=idx needs data_dir".into()));
        }
        self.train.validate()?;
        Ok(self)
    }

    pub fn network(&self) -> &str {
        self.network.as_deref().unwrap_or("digits32")
    }

    pub fn seeds(&self) -> &[u64] {
        self.seeds.as_deref().unwrap_or(&[])
    }

    pub fn source_ckpt(&self) -> PathBuf {
        self.source_ckpt.clone().unwrap_or_else(|| self.out_dir.join("source.ckpt"))
    }

    /// The configuration as `key=value` text that [`Config::apply_text`]
    /// reads back to an equal value.
    pub fn echo(&self) -> String {
        let t = &self.train;
        let opt = |v: &Option<String>| v.clone().unwrap_or_else(|| "auto".into());
        let mut lines = vec![
            ("experiment", self.experiment.clone()),
            ("out_dir", self.out_dir.display().to_string()),
            (
                "task",
                match self.task {
                    Task::Transfer => "transfer",
                    Task::Uda => "uda",
                }
                .into(),
            ),
            (
                "dataset",
                match self.dataset {
                    Dataset::Synth => "synth",
                    Dataset::Idx => "idx",
                }
                .into(),
            ),
            ("data_dir", self.data_dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default()),
            ("network", opt(&self.network)),
            ("source_ckpt", opt(&self.source_ckpt.as_ref().map(|p| p.display().to_string()))),
            ("seeds", self.seeds.as_ref().map_or("auto".into(), |s| join(s))),
            ("ks", join(&self.ks)),
            ("methods", self.methods.iter().map(|m| m.name()).collect::<Vec<_>>().join(",")),
            ("source_limit", self.source_limit.to_string()),
            ("synth_per_class", self.synth_per_class.to_string()),
            ("synth_test_per_class", self.synth_test_per_class.to_string()),
            ("threads", self.threads.to_string()),
            ("alpha", t.alpha.to_string()),
            ("beta", t.beta.to_string()),
            ("tau_st", t.tau_st.to_string()),
            ("tau_tt", t.tau_tt.to_string()),
            ("gamma", t.gamma.to_string()),
            (
                "fusion",
                match t.fusion {
                    Fusion::Sum => "sum",
                    Fusion::Concat => "concat",
                }
                .into(),
            ),
            ("taps", t.taps.as_ref().map_or("default".into(), |v| v.join(","))),
            ("disc_hidden", self.disc_hidden.as_ref().map_or("auto".into(), |v| join(v))),
            ("lr", t.lr.to_string()),
            ("clip_norm", t.clip_norm.map_or("none".into(), |v| v.to_string())),
            ("batch_source", t.batch_source.to_string()),
            ("batch_labeled", t.batch_labeled.map_or("all".into(), |v| v.to_string())),
            ("batch_unlabeled", t.batch_unlabeled.to_string()),
            ("pretrain_steps", t.pretrain_steps.to_string()),
            ("adapt_steps", t.adapt_steps.to_string()),
            ("eval_every", t.eval_every.to_string()),
            ("seed", t.seed.to_string()),
            ("support_per_class", t.support_per_class.to_string()),
            ("stop_grad_prototypes", t.stop_grad_prototypes.to_string()),
            ("deterministic", t.deterministic.to_string()),
        ];
        debug_assert_eq!(lines.len(), KEYS.len());
        let mut out = String::new();
        for (k, v) in lines.drain(..) {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_and_overrides() {
        let mut c = Config::default();
        c.apply_text("# header\nalpha = 0.5  # trailing\n\nks=2,5\n").unwrap();
        c.set("alpha", "0.25").unwrap();
        assert_eq!(c.train.alpha, 0.25);
        assert_eq!(c.ks, vec![2, 5]);
    }

    #[test]
    fn unknown_and_malformed_rejected() {
        let mut c = Config::default();
        assert!(matches!(c.set("alhpa", "1"), Err(CliError::Config(_))));
        assert!(c.set("alpha", "x").is_err());
        assert!(c.apply_text("alpha 0.1").is_err());
        assert!(c.set("methods", "full,nope").is_err());
        assert!(Config { train: TrainConfig { gamma: 0.0, ..TrainConfig::default() }, ..Config::default() }.resolve().is_err());
    }

    #[test]
    fn echo_round_trips() {
        let mut c = Config::default();
        c.apply_text("task=uda\nfusion=concat\nclip_norm=5\nbatch_labeled=8\ntaps=flat,fc1_relu\nseeds=3,4").unwrap();
        let c = c.resolve().unwrap();
        let mut back = Config::default();
        back.apply_text(&c.echo()).unwrap();
        assert_eq!(back, c);
        assert!(c.echo().contains("gamma=0.1\n"));
    }

    #[test]
    fn task_defaults() {
        let t = Config::default().resolve().unwrap();
        assert_eq!((t.network(), t.seeds().len()), ("digits32", 10));
        assert_eq!(t.train.disc_hidden, DIGITS_HEAD.to_vec());
        let u = Config { task: Task::Uda, ..Config::default() }.resolve().unwrap();
        assert_eq!((u.network(), u.seeds().len()), ("lenet28", 5));
        assert_eq!(u.train.disc_hidden, LENET_HEAD.to_vec());
    }
}
