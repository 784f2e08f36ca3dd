//! Geometry and alignment diagnostics for an embedding snapshot.

use nalgebra::DMatrix;

use crate::data::EmbeddingSet;
use crate::error::{Error, Result};
use crate::geometry::{convergence_delta, gram, GramMatrix, PrototypeSet};

/// Per-class averages of the embeddings, `d x k`. Not renormalized.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMeans {
    matrix: DMatrix<f64>,
}

impl ClassMeans {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn norms(&self) -> Vec<f64> {
        self.matrix.column_iter().map(|c| c.norm()).collect()
    }

    /// `M^T M`. With `normalize`, each mean is scaled to unit length first
    /// (zero means are left at zero).
    pub fn gram(&self, normalize: bool) -> GramMatrix {
        if !normalize {
            return gram(&self.matrix);
        }
        let mut m = self.matrix.clone();
        for mut col in m.column_iter_mut() {
            let n = col.norm();
            if n > 0.0 {
                col /= n;
            }
        }
        gram(&m)
    }
}

pub fn class_means(embeddings: &EmbeddingSet) -> Result<ClassMeans> {
    let k = embeddings.class_count();
    let d = embeddings.dim();
    let counts = embeddings.class_counts();
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::EmptyClass(c));
    }
    let mut matrix = DMatrix::zeros(d, k);
    for (i, &y) in embeddings.labels().iter().enumerate() {
        for (r, v) in embeddings.column(i).iter().enumerate() {
            matrix[(r, y)] += v;
        }
    }
    for (c, &n) in counts.iter().enumerate() {
        matrix.column_mut(c).unscale_mut(n as f64);
    }
    Ok(ClassMeans { matrix })
}

/// Distance between the class-mean Gram and a reference geometry.
pub fn geometry_delta(embeddings: &EmbeddingSet, reference: &GramMatrix) -> Result<f64> {
    geometry_delta_with(embeddings, reference, false)
}

pub fn geometry_delta_with(embeddings: &EmbeddingSet, reference: &GramMatrix, normalize_means: bool) -> Result<f64> {
    let g_m = class_means(embeddings)?.gram(normalize_means);
    convergence_delta(&g_m, reference)
}

/// Mean of `w_{y_i} . h_i`.
pub fn alignment(embeddings: &EmbeddingSet, prototypes: &PrototypeSet) -> Result<f64> {
    if prototypes.class_count() != embeddings.class_count() || prototypes.dim() != embeddings.dim() {
        return Err(Error::Mismatch(format!(
            "prototypes are {}x{}, embeddings need {}x{}",
            prototypes.dim(),
            prototypes.class_count(),
            embeddings.dim(),
            embeddings.class_count()
        )));
    }
    if embeddings.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = embeddings
        .labels()
        .iter()
        .enumerate()
        .map(|(i, &y)| crate::par::dot(embeddings.column(i), prototypes.column(y)))
        .sum();
    Ok(total / embeddings.len() as f64)
}

/// Mean distance of each embedding to its class mean.
pub fn within_class_spread(embeddings: &EmbeddingSet) -> Result<f64> {
    let means = class_means(embeddings)?;
    if embeddings.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = embeddings
        .labels()
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            embeddings
                .column(i)
                .iter()
                .zip(means.matrix.column(y).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Ok(total / embeddings.len() as f64)
}

/// One row of the training history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub loss: f64,
    pub delta: f64,
    pub alignment: f64,
    pub spread: f64,
    pub min_mean_norm: f64,
    pub max_mean_norm: f64,
}

pub fn metrics(
    epoch: usize,
    loss: f64,
    embeddings: &EmbeddingSet,
    prototypes: &PrototypeSet,
    reference: &GramMatrix,
    normalize_means: bool,
) -> Result<MetricsRecord> {
    let means = class_means(embeddings)?;
    let norms = means.norms();
    Ok(MetricsRecord {
        epoch,
        loss,
        delta: convergence_delta(&means.gram(normalize_means), reference)?,
        alignment: alignment(embeddings, prototypes)?,
        spread: within_class_spread(embeddings)?,
        min_mean_norm: norms.iter().copied().fold(f64::INFINITY, f64::min),
        max_mean_norm: norms.iter().copied().fold(0.0, f64::max),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{init_embeddings, step_imbalance, LabelDistribution};
    use crate::geometry::{etf_gram, make_etf, make_minority_angle, random_orthogonal};
    use proptest::prelude::*;

    fn at_prototypes(p: &PrototypeSet, labels: &[usize]) -> EmbeddingSet {
        let d = p.dim();
        let mut v = DMatrix::zeros(d, labels.len());
        for (i, &y) in labels.iter().enumerate() {
            v.set_column(i, &p.vectors().column(y));
        }
        EmbeddingSet::new(v, labels.to_vec(), p.class_count()).unwrap()
    }

    #[test]
    fn means_examples() {
        let e = EmbeddingSet::new(DMatrix::from_column_slice(2, 2, &[0.6, 0.8, 0.6, 0.8]), vec![0, 0], 1).unwrap();
        let m = class_means(&e).unwrap();
        assert_eq!(m.matrix().column(0).as_slice(), &[0.6, 0.8]);

        let e = EmbeddingSet::new(DMatrix::from_column_slice(2, 2, &[1.0, 0.0, -1.0, 0.0]), vec![0, 0], 1).unwrap();
        assert_eq!(class_means(&e).unwrap().norms(), vec![0.0]);

        let e = EmbeddingSet::new(DMatrix::from_column_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]), vec![0, 0], 1).unwrap();
        let m = class_means(&e).unwrap();
        assert_eq!(m.matrix().column(0).as_slice(), &[0.5, 0.5]);
        assert!((m.norms()[0] - 2f64.sqrt() / 2.0).abs() < 1e-15);
    }

    #[test]
    fn means_reject_empty_class() {
        let e = EmbeddingSet::new(DMatrix::from_column_slice(2, 1, &[1.0, 0.0]), vec![0], 2).unwrap();
        assert!(matches!(class_means(&e), Err(Error::EmptyClass(1))));
    }

    #[test]
    fn delta_zero_at_prototypes() {
        let labels = [0, 0, 1, 2, 3, 3];
        let p = make_etf(4, 8, 1).unwrap();
        let e = at_prototypes(&p, &labels);
        assert!(geometry_delta(&e, &etf_gram(4)).unwrap() < 1e-12);

        let q = make_minority_angle(4, &[2, 3], -0.9, -0.1, 8, 2).unwrap();
        let e = at_prototypes(&q, &labels);
        assert!(geometry_delta(&e, &q.gram()).unwrap() < 1e-12);
    }

    #[test]
    fn delta_at_random_init_is_large() {
        // Monte-Carlo floor over 20 seeds
        let dist = LabelDistribution::new(vec![25; 4]).unwrap();
        let min = (0..20)
            .map(|s| geometry_delta(&init_embeddings(&dist, 8, s).unwrap(), &etf_gram(4)).unwrap())
            .fold(f64::INFINITY, f64::min);
        assert!(min > 0.3, "min delta {min}");
    }

    #[test]
    fn delta_degenerate_when_means_vanish() {
        let e = EmbeddingSet::new(
            DMatrix::from_column_slice(1, 4, &[1.0, -1.0, 1.0, -1.0]),
            vec![0, 0, 1, 1],
            2,
        )
        .unwrap();
        assert!(matches!(geometry_delta(&e, &etf_gram(2)), Err(Error::Degenerate(_))));
    }

    #[test]
    fn alignment_examples() {
        let p = make_etf(3, 3, 0).unwrap();
        let labels = [0, 1, 2, 2];
        let e = at_prototypes(&p, &labels);
        assert!((alignment(&e, &p).unwrap() - 1.0).abs() < 1e-12);
        let neg = EmbeddingSet::new(-e.vectors(), labels.to_vec(), 3).unwrap();
        assert!((alignment(&neg, &p).unwrap() + 1.0).abs() < 1e-12);

        // orthogonal: embed the ETF in the first 2 coordinates of R^3
        let mut w = DMatrix::zeros(3, 3);
        w.rows_mut(0, 2).copy_from(make_etf(3, 2, 0).unwrap().vectors());
        let p2 = PrototypeSet::new(w).unwrap();
        let ortho = EmbeddingSet::new(DMatrix::from_fn(3, 4, |r, _| if r == 2 { 1.0 } else { 0.0 }), labels.to_vec(), 3).unwrap();
        assert!(alignment(&ortho, &p2).unwrap().abs() < 1e-15);
    }

    #[test]
    fn spread_vanishes_only_under_collapse() {
        let p = make_etf(2, 2, 3).unwrap();
        let e = at_prototypes(&p, &[0, 0, 1, 1]);
        assert!(within_class_spread(&e).unwrap() < 1e-15);
        let dist = step_imbalance(2, 10, 2).unwrap();
        assert!(within_class_spread(&init_embeddings(&dist, 3, 0).unwrap()).unwrap() > 0.1);
    }

    proptest! {
        #[test]
        fn delta_is_rotation_invariant(seed in any::<u64>()) {
            let dist = LabelDistribution::new(vec![5, 3, 4]).unwrap();
            let e = init_embeddings(&dist, 5, seed).unwrap();
            let q = random_orthogonal(5, seed ^ 7);
            let r = EmbeddingSet::new(&q * e.vectors(), e.labels().to_vec(), 3).unwrap();
            let g = etf_gram(3);
            prop_assert!((geometry_delta(&e, &g).unwrap() - geometry_delta(&r, &g).unwrap()).abs() < 1e-10);
        }

        #[test]
        fn alignment_one_iff_at_prototypes(seed in any::<u64>(), eps in 1e-4f64..0.5) {
            let p = make_etf(3, 4, seed).unwrap();
            let e = at_prototypes(&p, &[0, 1, 2, 1]);
            prop_assert!((alignment(&e, &p).unwrap() - 1.0).abs() < 1e-9);
            let mut v = e.vectors().clone();
            v[(0, 1)] += eps;
            let n = v.column(1).norm();
            v.column_mut(1).unscale_mut(n);
            let moved = EmbeddingSet::new(v, e.labels().to_vec(), 3).unwrap();
            prop_assert!(alignment(&moved, &p).unwrap() < 1.0 - 1e-12);
        }
    }
}
