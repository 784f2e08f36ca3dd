//! Label distributions, free embeddings and batch plans.

use nalgebra::DMatrix;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Column-norm tolerance for embeddings after an optimizer step.
pub const EMBEDDING_NORM_TOL: f64 = 1e-9;

/// Samples per class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelDistribution {
    counts: Vec<usize>,
}

impl LabelDistribution {
    pub fn new(counts: Vec<usize>) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::Domain("label distribution needs at least one class".into()));
        }
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::Domain(format!("class {c} has zero samples")));
        }
        Ok(Self { counts })
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn class_count(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Class label of every sample; classes appear in contiguous runs.
    pub fn labels(&self) -> Vec<usize> {
        self.counts
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| std::iter::repeat_n(c, n))
            .collect()
    }
}

/// STEP imbalance: the first `k/2` classes get `n_maj` samples, the rest
/// `n_maj / ratio` (floored).
pub fn step_imbalance(k: usize, n_maj: usize, ratio: usize) -> Result<LabelDistribution> {
    if k < 2 || !k.is_multiple_of(2) {
        return Err(Error::Domain(format!("STEP imbalance needs an even k >= 2, got {k}")));
    }
    if ratio < 1 {
        return Err(Error::Domain("imbalance ratio must be >= 1".into()));
    }
    if !n_maj.is_multiple_of(ratio) {
        log::warn!("n_maj = {n_maj} not divisible by R = {ratio}; minority count floored to {}", n_maj / ratio);
    }
    let n_min = n_maj / ratio;
    if n_min == 0 {
        return Err(Error::Domain(format!(
            "minority count n_maj / R = {n_maj} / {ratio} rounds to zero"
        )));
    }
    let counts = (0..k).map(|c| if c < k / 2 { n_maj } else { n_min }).collect();
    LabelDistribution::new(counts)
}

/// Free unit-norm embeddings with labels; columns are samples.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    vectors: DMatrix<f64>,
    labels: Vec<usize>,
    class_count: usize,
}

impl EmbeddingSet {
    pub fn new(vectors: DMatrix<f64>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if vectors.ncols() != labels.len() {
            return Err(Error::Mismatch(format!(
                "{} embedding columns but {} labels",
                vectors.ncols(),
                labels.len()
            )));
        }
        if vectors.nrows() == 0 {
            return Err(Error::Dimension("embedding dimension must be at least 1".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::Domain(format!("label {bad} out of range for k = {class_count}")));
        }
        let set = Self {
            vectors,
            labels,
            class_count,
        };
        let drift = set.max_norm_drift();
        if !(drift <= EMBEDDING_NORM_TOL) {
            return Err(Error::Domain(format!("embedding norm drift {drift:e} exceeds {EMBEDDING_NORM_TOL:e}")));
        }
        Ok(set)
    }

    pub fn dim(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn len(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn vectors(&self) -> &DMatrix<f64> {
        &self.vectors
    }

    pub(crate) fn vectors_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.vectors
    }

    pub fn column(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.vectors.as_slice()[i * d..(i + 1) * d]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// `max_i | ||h_i|| - 1 |`.
    pub fn max_norm_drift(&self) -> f64 {
        self.vectors
            .column_iter()
            .map(|c| (c.norm() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// I.i.d. Gaussian columns normalized onto the unit sphere.
pub fn init_embeddings(dist: &LabelDistribution, d: usize, seed: u64) -> Result<EmbeddingSet> {
    if d < 1 {
        return Err(Error::Dimension("embedding dimension must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dist.total();
    let mut vectors = DMatrix::from_fn(d, n, |_, _| StandardNormal.sample(&mut rng));
    for mut col in vectors.column_iter_mut() {
        let norm = col.norm();
        col /= norm;
    }
    EmbeddingSet::new(vectors, dist.labels(), dist.class_count())
}

/// One batch: sample indices plus the per-class prototype multiplicity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    sample_indices: Vec<usize>,
    n_w: usize,
    class_counts: Vec<usize>,
}

impl BatchPlan {
    pub fn new(sample_indices: Vec<usize>, labels: &[usize], class_count: usize, n_w: usize) -> Result<Self> {
        let mut seen = vec![false; labels.len()];
        let mut class_counts = vec![0; class_count];
        for &i in &sample_indices {
            if i >= labels.len() {
                return Err(Error::Domain(format!("sample index {i} out of range")));
            }
            if seen[i] {
                return Err(Error::Domain(format!("sample index {i} repeated in batch")));
            }
            seen[i] = true;
            let y = labels[i];
            if y >= class_count {
                return Err(Error::Domain(format!("label {y} out of range for k = {class_count}")));
            }
            class_counts[y] += 1;
        }
        Ok(Self {
            sample_indices,
            n_w,
            class_counts,
        })
    }

    /// Every sample of `embeddings`, in order.
    pub fn full(embeddings: &EmbeddingSet, n_w: usize) -> Self {
        Self::new(
            (0..embeddings.len()).collect(),
            embeddings.labels(),
            embeddings.class_count(),
            n_w,
        )
        .expect("full batch is always valid")
    }

    pub fn sample_indices(&self) -> &[usize] {
        &self.sample_indices
    }

    pub fn len(&self) -> usize {
        self.sample_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_indices.is_empty()
    }

    pub fn n_w(&self) -> usize {
        self.n_w
    }

    pub fn with_n_w(&self, n_w: usize) -> Self {
        Self { n_w, ..self.clone() }
    }

    /// `n_{B,c}` for every class.
    pub fn class_counts(&self) -> &[usize] {
        &self.class_counts
    }
}

/// One epoch of batches: a seeded random partition of `0..N` into chunks of
/// `batch_size` (the last may be short). With `bind_classes`, each batch
/// missing a class gets one randomly drawn sample of that class appended.
pub fn sample_batches(
    dist: &LabelDistribution,
    batch_size: usize,
    n_w: usize,
    seed: u64,
    bind_classes: bool,
) -> Result<Vec<BatchPlan>> {
    let n_total = dist.total();
    let k = dist.class_count();
    if batch_size == 0 || batch_size > n_total {
        return Err(Error::Config(format!(
            "batch size {batch_size} must be in 1..={n_total}"
        )));
    }
    if bind_classes && batch_size < k {
        return Err(Error::Config(format!(
            "batch binding needs batch size >= k ({batch_size} < {k})"
        )));
    }
    let labels = dist.labels();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n_total).collect();
    order.shuffle(&mut rng);

    let by_class: Vec<Vec<usize>> = if bind_classes {
        let mut v = vec![Vec::new(); k];
        for (i, &y) in labels.iter().enumerate() {
            v[y].push(i);
        }
        v
    } else {
        Vec::new()
    };

    order
        .chunks(batch_size)
        .map(|chunk| {
            let mut indices = chunk.to_vec();
            if bind_classes {
                let mut present = vec![false; k];
                for &i in &indices {
                    present[labels[i]] = true;
                }
                for c in 0..k {
                    if !present[c] {
                        // class c is absent, so every member is outside the batch
                        let pick = *by_class[c].choose(&mut rng).expect("classes are nonempty");
                        indices.push(pick);
                    }
                }
            }
            BatchPlan::new(indices, &labels, k, n_w)
        })
        .collect()
}
