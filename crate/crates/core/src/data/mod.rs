//! Datasets, the labeled/unlabeled split protocol, normalization and batching.

pub mod idx;
mod synth;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use idx::{IdxArray, IdxError};
pub use synth::{shift_domain, synth_digits, DomainShift};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Grayscale images with integer labels `0..classes.len()`.
///
/// `classes[l]` is the original class id behind label `l`, so filtering
/// {5..9} gives `classes == [5, 6, 7, 8, 9]` and labels `0..5`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub images: Vec<u8>,
    pub labels: Vec<usize>,
    pub classes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledDataset {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub images: Vec<u8>,
}

impl LabeledDataset {
    pub fn new(name: impl Into<String>, height: usize, width: usize, images: Vec<u8>, labels: Vec<usize>, classes: Vec<usize>) -> Result<Self> {
        let name = name.into();
        if labels.is_empty() {
            return Err(Error::Data(format!("{name}: empty dataset")));
        }
        if images.len() != labels.len() * height * width {
            return Err(Error::Data(format!(
                "{name}: {} pixels for {} images of {height}×{width}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes.len()) {
            return Err(Error::Data(format!("{name}: label {bad} outside {} classes", classes.len())));
        }
        Ok(LabeledDataset {
            name,
            height,
            width,
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.images[i * self.pixels()..(i + 1) * self.pixels()]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Examples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        LabeledDataset {
            name: self.name.clone(),
            height: self.height,
            width: self.width,
            images: indices.iter().flat_map(|&i| self.image(i).iter().copied()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes.clone(),
        }
    }

    /// Keeps examples whose original class is in `keep` and renumbers the
    /// labels in ascending order of original class.
    pub fn filter_classes(&self, keep: &[usize]) -> Result<Self> {
        let mut keep: Vec<usize> = keep.to_vec();
        keep.sort_unstable();
        keep.dedup();
        if keep.is_empty() {
            return Err(Error::Data("class filter is empty".into()));
        }
        let remap: Vec<Option<usize>> = self.classes.iter().map(|c| keep.iter().position(|k| k == c)).collect();
        let indices: Vec<usize> = (0..self.len()).filter(|&i| remap[self.labels[i]].is_some()).collect();
        if indices.is_empty() {
            return Err(Error::Data(format!("{}: no examples of classes {keep:?}", self.name)));
        }
        let mut out = self.subset(&indices);
        out.labels = indices.iter().map(|&i| remap[self.labels[i]].unwrap()).collect();
        out.classes = keep;
        Ok(out)
    }

    /// Seeded uniform subsample of `n` examples, kept in original order.
    pub fn subsample(&self, n: usize, seed: u64) -> Self {
        if n >= self.len() {
            return self.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = rand::seq::index::sample(&mut rng, self.len(), n).into_vec();
        idx.sort_unstable();
        self.subset(&idx)
    }

    pub fn resized(&self, height: usize, width: usize) -> Self {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        LabeledDataset {
            images: resize_all(&self.images, self.height, self.width, height, width),
            height,
            width,
            ..self.clone()
        }
    }

    pub fn without_labels(&self) -> UnlabeledDataset {
        UnlabeledDataset {
            name: self.name.clone(),
            height: self.height,
            width: self.width,
            images: self.images.clone(),
        }
    }

    /// Normalized `[n, 1, h, w]` tensor of the examples at `indices`.
    pub fn batch<T: Element>(&self, indices: &[usize]) -> Tensor<T> {
        gather(&self.images, self.height, self.width, indices)
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }
}

impl UnlabeledDataset {
    pub fn len(&self) -> usize {
        self.images.len() / (self.height * self.width).max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn batch<T: Element>(&self, indices: &[usize]) -> Tensor<T> {
        gather(&self.images, self.height, self.width, indices)
    }
}

fn gather<T: Element>(images: &[u8], h: usize, w: usize, indices: &[usize]) -> Tensor<T> {
    let p = h * w;
    let mut bytes = Vec::with_capacity(indices.len() * p);
    for &i in indices {
        bytes.extend_from_slice(&images[i * p..(i + 1) * p]);
    }
    normalize(&bytes, indices.len(), h, w)
}

/// Maps bytes to `[-1, 1]` via `(x / 255 - 0.5) / 0.5`, shaped `[n, 1, h, w]`.
pub fn normalize<T: Element>(pixels: &[u8], n: usize, h: usize, w: usize) -> Tensor<T> {
    let data = pixels.iter().map(|&v| T::c((v as f64 / 255.0 - 0.5) / 0.5)).collect();
    Tensor::new(&[n, 1, h, w], data).expect("pixel count matches shape")
}

/// Bilinear resampling with half-pixel centers, rounded and clamped to bytes.
pub fn resize_bilinear(src: &[u8], h: usize, w: usize, oh: usize, ow: usize) -> Vec<u8> {
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for x in 0..ow {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            let p = |yy: usize, xx: usize| src[yy * w + xx] as f64;
            let top = p(y0, x0) * (1.0 - tx) + p(y0, x1) * tx;
            let bot = p(y1, x0) * (1.0 - tx) + p(y1, x1) * tx;
            out.push((top * (1.0 - ty) + bot * ty).round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

fn resize_all(images: &[u8], h: usize, w: usize, oh: usize, ow: usize) -> Vec<u8> {
    images.chunks_exact(h * w).flat_map(|img| resize_bilinear(img, h, w, oh, ow)).collect()
}

/// Loads an image/label IDX pair. Labels must lie in `0..=max_label`; the
/// class set is taken as `0..=max(label)`.
pub fn load_labeled(name: &str, images: &Path, labels: &Path) -> Result<LabeledDataset> {
    let img = idx::read_file(images, 3)?;
    let lab = idx::read_file(labels, 1)?;
    if img.dims[0] != lab.dims[0] {
        return Err(IdxError::CountMismatch {
            images: img.dims[0],
            labels: lab.dims[0],
        }
        .into());
    }
    let labels: Vec<usize> = lab.data.iter().map(|&l| l as usize).collect();
    let k = labels.iter().max().map_or(0, |m| m + 1);
    LabeledDataset::new(name, img.dims[1], img.dims[2], img.data, labels, (0..k).collect())
}

pub fn load_unlabeled(name: &str, images: &Path) -> Result<UnlabeledDataset> {
    let img = idx::read_file(images, 3)?;
    if img.dims[0] == 0 {
        return Err(Error::Data(format!("{name}: empty dataset")));
    }
    Ok(UnlabeledDataset {
        name: name.into(),
        height: img.dims[1],
        width: img.dims[2],
        images: img.data,
    })
}

pub fn save_labeled(ds: &LabeledDataset, images: &Path, labels: &Path) -> Result<()> {
    idx::write_file(
        images,
        &IdxArray {
            dims: vec![ds.len(), ds.height, ds.width],
            data: ds.images.clone(),
        },
    )?;
    idx::write_file(
        labels,
        &IdxArray {
            dims: vec![ds.len()],
            data: ds.labels.iter().map(|&l| ds.classes[l] as u8).collect(),
        },
    )
}

/// A k-shot labeled set and the unlabeled remainder of a target pool.
#[derive(Debug, Clone)]
pub struct Split {
    pub labeled: LabeledDataset,
    pub unlabeled: UnlabeledDataset,
    pub labeled_indices: Vec<usize>,
    pub unlabeled_indices: Vec<usize>,
    pub k: usize,
    pub seed: u64,
}

/// Draws `k` examples per class uniformly at random (seeded) as the labeled
/// set; everything else, labels dropped, is the unlabeled set.
pub fn make_splits(pool: &LabeledDataset, k: usize, seed: u64) -> Result<Split> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![false; pool.len()];
    let mut labeled_indices = Vec::with_capacity(k * pool.num_classes());
    for c in 0..pool.num_classes() {
        let mut members: Vec<usize> = (0..pool.len()).filter(|&i| pool.labels[i] == c).collect();
        if members.len() < k {
            return Err(Error::Data(format!(
                "{}: class {} has {} examples, fewer than k={k}",
                pool.name,
                pool.classes[c],
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        let mut picked = members[..k].to_vec();
        picked.sort_unstable();
        for &i in &picked {
            chosen[i] = true;
        }
        labeled_indices.extend(picked);
    }
    let unlabeled_indices: Vec<usize> = (0..pool.len()).filter(|&i| !chosen[i]).collect();
    Ok(Split {
        labeled: pool.subset(&labeled_indices),
        unlabeled: pool.subset(&unlabeled_indices).without_labels(),
        labeled_indices,
        unlabeled_indices,
        k,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Order {
    Shuffle,
    Sequential,
}

fn permutation(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    idx.shuffle(&mut rng);
    idx
}

/// Index batches of one epoch; the final batch may be short.
pub fn epoch_batches(n: usize, batch: usize, seed: u64, epoch: u64, order: Order) -> Vec<Vec<usize>> {
    assert!(batch >= 1, "batch size must be positive");
    let idx = match order {
        Order::Shuffle => permutation(n, seed, epoch),
        Order::Sequential => (0..n).collect(),
    };
    idx.chunks(batch).map(<[usize]>::to_vec).collect()
}

/// Endless stream of full batches over `0..n`, reshuffled every epoch.
/// Batches straddle epoch boundaries; the batch size is capped at `n`.
#[derive(Debug, Clone)]
pub struct Sampler {
    n: usize,
    batch: usize,
    seed: u64,
    epoch: u64,
    perm: Vec<usize>,
    pos: usize,
}

impl Sampler {
    pub fn new(n: usize, batch: usize, seed: u64) -> Self {
        assert!(n >= 1 && batch >= 1, "sampler needs data and a positive batch size");
        Sampler {
            n,
            batch: batch.min(n),
            seed,
            epoch: 0,
            perm: permutation(n, seed, 0),
            pos: 0,
        }
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            if self.pos == self.n {
                self.epoch += 1;
                self.perm = permutation(self.n, self.seed, self.epoch);
                self.pos = 0;
            }
            let take = (self.batch - out.len()).min(self.n - self.pos);
            out.extend_from_slice(&self.perm[self.pos..self.pos + take]);
            self.pos += take;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool() -> LabeledDataset {
        let labels: Vec<usize> = (0..40).map(|i| i % 10).collect();
        LabeledDataset::new("t", 2, 2, (0..160).map(|v| v as u8).collect(), labels, (0..10).collect()).unwrap()
    }

    #[test]
    fn filter_remaps_ascending() {
        let f = pool().filter_classes(&[9, 5, 7]).unwrap();
        assert_eq!(f.classes, vec![5, 7, 9]);
        assert_eq!(f.len(), 12);
        assert_eq!(&f.labels[..3], &[0, 1, 2]);
        assert_eq!(f.image(0), pool().image(5));
        assert!(pool().filter_classes(&[]).is_err());
        let all = pool().filter_classes(&(0..10).collect::<Vec<_>>()).unwrap();
        assert_eq!(all, pool());
    }

    #[test]
    fn splits_partition_pool() {
        let p = pool().filter_classes(&[5, 6, 7, 8, 9]).unwrap();
        let s = make_splits(&p, 2, 3).unwrap();
        assert_eq!(s.labeled.len(), 10);
        assert_eq!(s.labeled.class_counts(), vec![2; 5]);
        assert_eq!(s.labeled.len() + s.unlabeled.len(), p.len());
        let mut all: Vec<usize> = s.labeled_indices.iter().chain(&s.unlabeled_indices).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..p.len()).collect::<Vec<_>>());
        assert!(make_splits(&p, 5, 0).is_err());
    }

    #[test]
    fn normalize_endpoints() {
        let t = normalize::<f32>(&[0, 255, 128], 1, 1, 3);
        let v = t.to_vec();
        assert_eq!(v[0], -1.0);
        assert_eq!(v[1], 1.0);
        assert!((v[2] as f64 - (128.0 / 255.0 - 0.5) / 0.5).abs() <= 1e-7);
        assert_eq!(t.shape(), &[1, 1, 1, 3]);
    }

    #[test]
    fn epoch_batches_sizes() {
        let b = epoch_batches(10, 3, 1, 0, Order::Shuffle);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 3, 3, 1]);
        let mut flat: Vec<usize> = b.concat();
        flat.sort_unstable();
        assert_eq!(flat, (0..10).collect::<Vec<_>>());
        assert_eq!(epoch_batches(5, 2, 1, 0, Order::Sequential).concat(), vec![0, 1, 2, 3, 4]);
        assert_eq!(epoch_batches(10, 3, 1, 4, Order::Shuffle), epoch_batches(10, 3, 1, 4, Order::Shuffle));
        assert_ne!(epoch_batches(50, 50, 1, 0, Order::Shuffle), epoch_batches(50, 50, 1, 1, Order::Shuffle));
    }

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = Sampler::new(7, 3, 2);
        let drawn: Vec<usize> = (0..7).flat_map(|_| s.next_batch()).collect();
        for e in 0..3 {
            let mut ep = drawn[e * 7..(e + 1) * 7].to_vec();
            ep.sort_unstable();
            assert_eq!(ep, (0..7).collect::<Vec<_>>());
        }
        assert_eq!(Sampler::new(2, 5, 0).next_batch().len(), 2);
    }

    #[test]
    fn resize_constant_and_identity() {
        let flat = vec![77u8; 28 * 28];
        assert!(resize_bilinear(&flat, 28, 28, 32, 32).iter().all(|&v| v == 77));
        let img: Vec<u8> = (0..16).map(|v| (v * 13) as u8).collect();
        assert_eq!(resize_bilinear(&img, 4, 4, 4, 4), img);
        // 2×2 → 1×1 averages the four pixels
        assert_eq!(resize_bilinear(&[0, 100, 100, 200], 2, 2, 1, 1), vec![100]);
    }

    #[test]
    fn idx_pair_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (i, l) = (dir.path().join("img"), dir.path().join("lab"));
        save_labeled(&pool(), &i, &l).unwrap();
        assert_eq!(load_labeled("t", &i, &l).unwrap(), pool());
        idx::write_file(&l, &IdxArray { dims: vec![3], data: vec![0, 1, 2] }).unwrap();
        assert!(matches!(load_labeled("t", &i, &l), Err(Error::Idx(IdxError::CountMismatch { images: 40, labels: 3 }))));
    }
}
