//! Synthetic labelled data, stochastic two-view augmentation, batching and
//! the dataset file format.

use std::path::Path;

use crate::error::{MixcoError, Result};
use crate::numerics::{SeededRng, Tensor};
use crate::textio::{push_f64s, write_file, LineReader};

const DATASET_MAGIC: &str = "MIXCO-DATASET";
const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    class_count: usize,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        let (n, _) = features.expect_matrix("Dataset::new")?;
        if labels.len() != n {
            return Err(MixcoError::Dimension {
                op: "Dataset::new",
                left: features.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        if class_count < 2 || n < class_count {
            return Err(MixcoError::config(format!(
                "dataset needs N >= classes >= 2, got N={n}, classes={class_count}"
            )));
        }
        if let Some(l) = labels.iter().find(|l| **l >= class_count) {
            return Err(MixcoError::config(format!(
                "label {l} out of range for {class_count} classes"
            )));
        }
        if !features.is_finite() {
            return Err(MixcoError::domain("dataset features contain non-finite values"));
        }
        Ok(Dataset {
            features,
            labels,
            class_count,
        })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Features only; what pretraining is allowed to see.
    pub fn unlabeled(&self) -> UnlabeledView<'_> {
        UnlabeledView {
            features: &self.features,
        }
    }

    /// Rows at `indices`, keeping the class count. May leave classes empty.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        }
    }

    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Dataset> {
        Dataset::new(self.features.clone(), labels, self.class_count)
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_count];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

/// Label-free view of a dataset.
#[derive(Debug, Clone, Copy)]
pub struct UnlabeledView<'a> {
    features: &'a Tensor,
}

impl<'a> UnlabeledView<'a> {
    pub fn new(features: &'a Tensor) -> Self {
        UnlabeledView { features }
    }

    pub fn features(&self) -> &'a Tensor {
        self.features
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterSpec {
    pub class_count: usize,
    pub per_class: usize,
    pub dim: usize,
    /// Side of the hypercube `[0, center_spread]^dim` holding the centers.
    pub center_spread: f64,
    pub within_sigma: f64,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        ClusterSpec {
            class_count: 10,
            per_class: 500,
            dim: 20,
            center_spread: 1.0,
            within_sigma: 0.5,
        }
    }
}

/// Isotropic Gaussian blobs, one per class, stored class by class.
pub fn generate_gaussian_clusters(spec: &ClusterSpec, rng: &mut SeededRng) -> Result<Dataset> {
    if spec.class_count < 2 || spec.per_class == 0 || spec.dim == 0 {
        return Err(MixcoError::config(format!(
            "need at least 2 classes and positive per_class and dim, got {spec:?}"
        )));
    }
    if !(spec.within_sigma > 0.0) || !(spec.center_spread >= 0.0) {
        return Err(MixcoError::config(format!(
            "within_sigma must be positive and center_spread nonnegative, got {spec:?}"
        )));
    }
    let centers: Vec<Vec<f64>> = (0..spec.class_count)
        .map(|_| (0..spec.dim).map(|_| spec.center_spread * rng.uniform()).collect())
        .collect();
    let n = spec.class_count * spec.per_class;
    let mut data = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    for (class, center) in centers.iter().enumerate() {
        for _ in 0..spec.per_class {
            data.extend(center.iter().map(|c| c + spec.within_sigma * rng.normal()));
            labels.push(class);
        }
    }
    Dataset::new(Tensor::matrix(n, spec.dim, data)?, labels, spec.class_count)
}

/// Strengths of the three vector corruptions applied by [`two_views`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub noise_sigma: f64,
    /// Fraction of coordinates zeroed per row, rounded to a whole count.
    pub mask_fraction: f64,
    /// Per-row multiplicative factor drawn from `[lo, hi]`.
    pub scale_jitter: (f64, f64),
}

impl AugmentConfig {
    pub const IDENTITY: AugmentConfig = AugmentConfig {
        noise_sigma: 0.0,
        mask_fraction: 0.0,
        scale_jitter: (1.0, 1.0),
    };

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_jitter;
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(MixcoError::config(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        if !(0.0..1.0).contains(&self.mask_fraction) {
            return Err(MixcoError::config(format!(
                "mask_fraction must be in [0, 1), got {}",
                self.mask_fraction
            )));
        }
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(MixcoError::config(format!(
                "scale jitter needs 0 < lo <= hi, got [{lo}, {hi}]"
            )));
        }
        Ok(())
    }

    fn masked_count(&self, dim: usize) -> usize {
        (self.mask_fraction * dim as f64).round() as usize
    }
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            noise_sigma: 0.1,
            mask_fraction: 0.2,
            scale_jitter: (0.8, 1.2),
        }
    }
}

fn augment(x: &Tensor, cfg: &AugmentConfig, rng: &mut SeededRng) -> Tensor {
    let mut out = x.clone();
    let dim = x.cols();
    let masked = cfg.masked_count(dim);
    let (lo, hi) = cfg.scale_jitter;
    let mut coords: Vec<usize> = (0..dim).collect();
    for i in 0..x.rows() {
        let row = out.row_mut(i);
        if lo != hi || lo != 1.0 {
            let s = rng.uniform_range(lo, hi);
            row.iter_mut().for_each(|v| *v *= s);
        }
        if cfg.noise_sigma > 0.0 {
            for v in row.iter_mut() {
                *v += cfg.noise_sigma * rng.normal();
            }
        }
        // Partial Fisher-Yates: the first `masked` slots become a uniform subset.
        for j in 0..masked {
            let pick = j + rng.below((dim - j) as u64) as usize;
            coords.swap(j, pick);
            row[coords[j]] = 0.0;
        }
    }
    out
}

/// Two independently augmented copies of `x`; row `i` of each view derives
/// from row `i` of the input. Transform order per row: scale, noise, mask.
pub fn two_views(x: &Tensor, cfg: &AugmentConfig, rng: &mut SeededRng) -> Result<(Tensor, Tensor)> {
    cfg.validate()?;
    x.expect_matrix("two_views")?;
    let q = augment(x, cfg, rng);
    let k = augment(x, cfg, rng);
    Ok((q, k))
}

/// A fresh permutation split into `⌊n/batch⌋` full batches; the remainder is
/// dropped so every batch has the same even size.
pub fn epoch_batches(n: usize, batch: usize, rng: &mut SeededRng) -> Result<Vec<Vec<usize>>> {
    if batch == 0 || batch % 2 != 0 {
        return Err(MixcoError::config(format!(
            "batch size must be positive and even, got {batch}"
        )));
    }
    if batch > n {
        return Err(MixcoError::config(format!(
            "batch size {batch} exceeds dataset size {n}"
        )));
    }
    let perm = rng.permutation(n);
    Ok(perm.chunks_exact(batch).map(<[usize]>::to_vec).collect())
}

/// Stratified split: each class contributes `round(test_fraction · count)`
/// samples to the test side, chosen uniformly at random, and at least one
/// sample stays on the training side.
pub fn train_test_split(
    dataset: &Dataset,
    test_fraction: f64,
    rng: &mut SeededRng,
) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(MixcoError::config(format!(
            "test_fraction must be in (0, 1), got {test_fraction}"
        )));
    }
    let mut by_class = vec![Vec::new(); dataset.class_count];
    for (i, &l) in dataset.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for mut members in by_class {
        rng.shuffle(&mut members);
        let n_test = ((test_fraction * members.len() as f64).round() as usize)
            .min(members.len().saturating_sub(1));
        test.extend_from_slice(&members[..n_test]);
        train.extend_from_slice(&members[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((dataset.subset(&train), dataset.subset(&test)))
}

/// Writes a dataset:
///
/// ```text
/// MIXCO-DATASET 1
/// samples <N>
/// dim <D>
/// classes <class_count>
/// <N lines of D features>
/// labels
/// <N lines, one label each>
/// ```
pub fn save_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    let mut out = format!(
        "{DATASET_MAGIC} {DATASET_VERSION}\nsamples {}\ndim {}\nclasses {}\n",
        dataset.len(),
        dataset.dim(),
        dataset.class_count
    );
    for row in dataset.features.row_iter() {
        push_f64s(&mut out, row);
    }
    out.push_str("labels\n");
    for l in &dataset.labels {
        out.push_str(&l.to_string());
        out.push('\n');
    }
    write_file(path, &out)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut r = LineReader::open(path)?;
    let version: u32 = r.keyed_parse(DATASET_MAGIC)?;
    if version != DATASET_VERSION {
        return Err(r.error(format!("unsupported dataset version {version}")));
    }
    let n: usize = r.keyed_parse("samples")?;
    let d: usize = r.keyed_parse("dim")?;
    let classes: usize = r.keyed_parse("classes")?;
    let mut data = Vec::with_capacity(n.saturating_mul(d).min(1 << 24));
    for _ in 0..n {
        data.extend(r.f64_line(d)?);
    }
    r.keyed("labels")?;
    let mut labels = Vec::with_capacity(n.min(1 << 24));
    for _ in 0..n {
        let line = r.next_line()?.trim().to_string();
        let l = line
            .parse()
            .map_err(|_| r.error(format!("bad label `{line}`")))?;
        labels.push(l);
    }
    if !r.at_end() {
        r.next_line()?;
        return Err(r.error("trailing data after labels"));
    }
    let features = Tensor::matrix(n, d, data)?;
    Dataset::new(features, labels, classes).map_err(|e| r.error(e.to_string()))
}
