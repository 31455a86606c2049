//! Dataset assembly for each task from IDX files or synthetic digits.

use std::path::{Path, PathBuf};

use xfer_core::data::{load_labeled, shift_domain, synth_digits, DomainShift, LabeledDataset};
use xfer_core::nn::NetworkSpec;

use crate::config::{Config, Dataset, Task};
use crate::error::{CliError, CliResult};

pub const MNIST_TRAIN: (&str, &str) = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte");
pub const MNIST_TEST: (&str, &str) = ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte");
/// Grayscale 32×32 digits with labels 0-9.
pub const SVHN_TRAIN: (&str, &str) = ("svhn-train-images-idx3-ubyte", "svhn-train-labels-idx1-ubyte");

pub const SOURCE_DIGITS: [usize; 5] = [0, 1, 2, 3, 4];
pub const TARGET_DIGITS: [usize; 5] = [5, 6, 7, 8, 9];
pub const ALL_DIGITS: [usize; 10] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9];

/// Source set, target training pool and target test set, all at the
/// network's input geometry.
pub struct TaskData {
    pub source: LabeledDataset,
    pub target_pool: LabeledDataset,
    pub test: LabeledDataset,
}

impl TaskData {
    pub fn source_classes(&self) -> &[usize] {
        &self.source.classes
    }
}

fn classes(task: Task) -> (&'static [usize], &'static [usize]) {
    match task {
        Task::Transfer => (&SOURCE_DIGITS, &TARGET_DIGITS),
        Task::Uda => (&ALL_DIGITS, &ALL_DIGITS),
    }
}

pub fn source_class_count(task: Task) -> usize {
    classes(task).0.len()
}

/// Paths of every file the configured dataset needs.
pub fn required_files(cfg: &Config) -> Vec<PathBuf> {
    match (&cfg.dataset, &cfg.data_dir) {
        (Dataset::Idx, Some(dir)) => [SVHN_TRAIN, MNIST_TRAIN, MNIST_TEST].iter().flat_map(|(i, l)| [dir.join(i), dir.join(l)]).collect(),
        _ => Vec::new(),
    }
}

/// Fails with [`CliError::MissingPath`] naming the first absent input.
pub fn check_files(cfg: &Config) -> CliResult<()> {
    if let Some(dir) = cfg.data_dir.as_ref().filter(|_| cfg.dataset == Dataset::Idx) {
        if !dir.is_dir() {
            return Err(CliError::MissingPath(dir.clone()));
        }
    }
    match required_files(cfg).into_iter().find(|p| !p.is_file()) {
        Some(p) => Err(CliError::MissingPath(p)),
        None => Ok(()),
    }
}

fn load_pair(name: &str, dir: &Path, files: (&str, &str)) -> CliResult<LabeledDataset> {
    Ok(load_labeled(name, &dir.join(files.0), &dir.join(files.1))?)
}

pub fn load(cfg: &Config, spec: &NetworkSpec) -> CliResult<TaskData> {
    let (src_classes, tgt_classes) = classes(cfg.task);
    let (h, w) = (spec.input[1], spec.input[2]);
    let seed = cfg.train.seed;
    let limit = |ds: LabeledDataset| if cfg.source_limit == 0 { ds } else { ds.subsample(cfg.source_limit, seed) };
    match cfg.dataset {
        Dataset::Synth => {
            if h != w {
                return Err(CliError::Config(format!("synthetic digits are square, network `{}` expects {h}×{w}", spec.name)));
            }
            let shift = DomainShift::default();
            Ok(TaskData {
                source: limit(synth_digits(cfg.synth_per_class, src_classes, h, seed.wrapping_add(1))?),
                target_pool: shift_domain(&synth_digits(cfg.synth_per_class, tgt_classes, h, seed.wrapping_add(2))?, shift),
                test: shift_domain(&synth_digits(cfg.synth_test_per_class, tgt_classes, h, seed.wrapping_add(3))?, shift),
            })
        }
        Dataset::Idx => {
            check_files(cfg)?;
            let dir = cfg.data_dir.as_deref().ok_or_else(|| CliError::Config("dataset=idx needs data_dir".into()))?;
            let svhn = load_pair("svhn-train", dir, SVHN_TRAIN)?.filter_classes(src_classes)?;
            let train = load_pair("mnist-train", dir, MNIST_TRAIN)?.filter_classes(tgt_classes)?;
            let test = load_pair("mnist-test", dir, MNIST_TEST)?.filter_classes(tgt_classes)?;
            Ok(TaskData {
                source: limit(svhn).resized(h, w),
                target_pool: train.resized(h, w),
                test: test.resized(h, w),
            })
        }
    }
}
