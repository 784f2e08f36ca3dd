//! Prototype geometries.
//!
//! A prototype set is `k` fixed unit vectors in `R^d`, one per class. Its
//! geometry is the `k x k` Gram matrix `W^T W`. Generators here build a
//! prototype set from a target Gram; the frame orientation inside `R^d` is
//! drawn from a seeded random rotation, since only the Gram is meaningful.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Column-norm tolerance for prototype vectors.
pub const UNIT_NORM_TOL: f64 = 1e-12;
/// Acceptance tolerance for PSD, rank and diagonal checks on a target Gram.
pub const GRAM_TOL: f64 = 1e-8;
/// Looser invariant check used on Gram matrices built from data.
pub const PSD_INVARIANT_TOL: f64 = 1e-10;
const SYMMETRY_TOL: f64 = 1e-12;

/// `k` unit-norm prototype vectors stored as the columns of a `d x k` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    vectors: DMatrix<f64>,
}

impl PrototypeSet {
    pub fn new(vectors: DMatrix<f64>) -> Result<Self> {
        let (d, k) = vectors.shape();
        if d < 1 {
            return Err(Error::Dimension("prototype dimension must be at least 1".into()));
        }
        if k < 2 {
            return Err(Error::Dimension(format!("need at least 2 prototypes, got {k}")));
        }
        for (c, col) in vectors.column_iter().enumerate() {
            let norm = col.norm();
            if !norm.is_finite() || (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::Domain(format!(
                    "prototype {c} has norm {norm}, expected 1"
                )));
            }
        }
        Ok(Self { vectors })
    }

    pub fn dim(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn class_count(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn vectors(&self) -> &DMatrix<f64> {
        &self.vectors
    }

    /// Prototype `c` as a contiguous slice of length `d`.
    pub fn column(&self, c: usize) -> &[f64] {
        let d = self.dim();
        &self.vectors.as_slice()[c * d..(c + 1) * d]
    }

    pub fn gram(&self) -> GramMatrix {
        gram(&self.vectors)
    }
}

/// Symmetric `k x k` matrix of pairwise inner products.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    entries: DMatrix<f64>,
}

impl GramMatrix {
    /// Wrap a square matrix, checking symmetry.
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        let (r, c) = entries.shape();
        if r != c || r == 0 {
            return Err(Error::Mismatch(format!("Gram matrix must be square, got {r}x{c}")));
        }
        for i in 0..r {
            for j in 0..i {
                let (a, b) = (entries[(i, j)], entries[(j, i)]);
                if !a.is_finite() || !b.is_finite() {
                    return Err(Error::NonFinite(format!("Gram entry ({i},{j})")));
                }
                if (a - b).abs() > SYMMETRY_TOL {
                    return Err(Error::Domain(format!(
                        "Gram matrix not symmetric at ({i},{j}): {a} vs {b}"
                    )));
                }
            }
        }
        Ok(Self { entries })
    }

    pub fn size(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[(i, j)]
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.entries.norm()
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = SymmetricEigen::new(self.entries.clone())
            .eigenvalues
            .iter()
            .copied()
            .collect();
        ev.sort_by(|a, b| a.total_cmp(b));
        ev
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues()[0]
    }

    pub fn is_psd(&self, tol: f64) -> bool {
        self.min_eigenvalue() >= -tol
    }
}

/// Which target geometry to realize, with its kind-specific parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum GeometrySpec {
    Etf,
    GramTarget(GramMatrix),
    MinorityAngle {
        minority: Vec<usize>,
        cos_min_min: f64,
        cos_rest: f64,
    },
    MajorityCollapse {
        majority: Vec<usize>,
    },
}

impl GeometrySpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            GeometrySpec::Etf => "etf",
            GeometrySpec::GramTarget(_) => "gram_target",
            GeometrySpec::MinorityAngle { .. } => "minority_angle",
            GeometrySpec::MajorityCollapse { .. } => "majority_collapse",
        }
    }

    /// Parameter-range checks that do not need an eigen-decomposition.
    pub fn validate(&self, k: usize) -> Result<()> {
        match self {
            GeometrySpec::Etf => Ok(()),
            GeometrySpec::GramTarget(g) => {
                if g.size() != k {
                    return Err(Error::Config(format!(
                        "gram target is {0}x{0} but k = {k}",
                        g.size()
                    )));
                }
                Ok(())
            }
            GeometrySpec::MinorityAngle {
                minority,
                cos_min_min,
                cos_rest,
            } => {
                check_index_set(minority, k, "minority")?;
                for (name, v) in [("cos_min_min", *cos_min_min), ("cos_rest", *cos_rest)] {
                    if !(-1.0..=1.0).contains(&v) {
                        return Err(Error::Config(format!("{name} = {v} outside [-1, 1]")));
                    }
                }
                if minority.len() >= 2 && cos_min_min >= cos_rest {
                    return Err(Error::Config(format!(
                        "cos_min_min ({cos_min_min}) must be below cos_rest ({cos_rest})"
                    )));
                }
                Ok(())
            }
            GeometrySpec::MajorityCollapse { majority } => {
                check_index_set(majority, k, "majority")?;
                if majority.len() < 2 {
                    return Err(Error::Config(
                        "majority collapse needs at least 2 majority classes".into(),
                    ));
                }
                Ok(())
            }
        }
    }

    pub fn build(&self, k: usize, d: usize, seed: u64) -> Result<PrototypeSet> {
        self.validate(k)?;
        match self {
            GeometrySpec::Etf => make_etf(k, d, seed),
            GeometrySpec::GramTarget(g) => make_from_gram(g, d, seed),
            GeometrySpec::MinorityAngle {
                minority,
                cos_min_min,
                cos_rest,
            } => make_minority_angle(k, minority, *cos_min_min, *cos_rest, d, seed),
            GeometrySpec::MajorityCollapse { majority } => make_majority_collapse(k, majority, d, seed),
        }
    }
}

fn check_index_set(set: &[usize], k: usize, name: &str) -> Result<()> {
    let mut seen = vec![false; k];
    for &c in set {
        if c >= k {
            return Err(Error::Config(format!("{name} index {c} out of range for k = {k}")));
        }
        if seen[c] {
            return Err(Error::Config(format!("{name} index {c} repeated")));
        }
        seen[c] = true;
    }
    Ok(())
}

/// Inner products of the columns of `vectors`.
pub fn gram(vectors: &DMatrix<f64>) -> GramMatrix {
    let k = vectors.ncols();
    let mut entries = DMatrix::zeros(k, k);
    for i in 0..k {
        for j in i..k {
            let v = vectors.column(i).dot(&vectors.column(j));
            entries[(i, j)] = v;
            entries[(j, i)] = v;
        }
    }
    GramMatrix { entries }
}

/// Frobenius distance between the Frobenius-normalized inputs.
pub fn convergence_delta(g_m: &GramMatrix, g_star: &GramMatrix) -> Result<f64> {
    if g_m.size() != g_star.size() {
        return Err(Error::Mismatch(format!(
            "Gram sizes differ: {} vs {}",
            g_m.size(),
            g_star.size()
        )));
    }
    let (na, nb) = (g_m.frobenius_norm(), g_star.frobenius_norm());
    if na < 1e-15 || nb < 1e-15 {
        return Err(Error::Degenerate("Gram matrix with vanishing Frobenius norm".into()));
    }
    Ok((g_m.entries() / na - g_star.entries() / nb).norm())
}

/// Analytic simplex ETF Gram: 1 on the diagonal, `-1/(k-1)` elsewhere.
pub fn etf_gram(k: usize) -> GramMatrix {
    let off = -1.0 / (k as f64 - 1.0);
    let entries = DMatrix::from_fn(k, k, |i, j| if i == j { 1.0 } else { off });
    GramMatrix { entries }
}

/// Simplex equiangular tight frame of `k` vectors in `R^d`.
pub fn make_etf(k: usize, d: usize, seed: u64) -> Result<PrototypeSet> {
    if k < 2 {
        return Err(Error::Dimension(format!("ETF needs k >= 2, got {k}")));
    }
    if d + 1 < k {
        return Err(Error::Dimension(format!(
            "ETF of {k} vectors needs d >= {}, got d = {d}",
            k - 1
        )));
    }
    make_from_gram(&etf_gram(k), d, seed)
}

/// Realize a unit-diagonal PSD Gram matrix as unit vectors in `R^d`.
pub fn make_from_gram(target: &GramMatrix, d: usize, seed: u64) -> Result<PrototypeSet> {
    let k = target.size();
    if d < 1 {
        return Err(Error::Dimension("embedding dimension must be at least 1".into()));
    }
    for i in 0..k {
        let v = target.get(i, i);
        if (v - 1.0).abs() > GRAM_TOL {
            return Err(Error::Diagonal { index: i, value: v });
        }
    }
    let eig = SymmetricEigen::new(target.entries().clone());
    let min_eigenvalue = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min_eigenvalue < -GRAM_TOL {
        return Err(Error::NotPsd { min_eigenvalue });
    }
    let kept: Vec<usize> = (0..k).filter(|&r| eig.eigenvalues[r] > GRAM_TOL).collect();
    let rank = kept.len();
    if rank > d {
        return Err(Error::Rank { rank, dim: d });
    }

    // Coordinates in an r-dimensional basis: row r is sqrt(lambda_r) v_r^T.
    let mut coords = DMatrix::zeros(rank, k);
    for (row, &r) in kept.iter().enumerate() {
        let s = eig.eigenvalues[r].sqrt();
        for c in 0..k {
            coords[(row, c)] = s * eig.eigenvectors[(c, r)];
        }
    }

    let rotation = random_orthogonal(d, seed);
    let mut vectors = rotation.columns(0, rank) * coords;
    for mut col in vectors.column_iter_mut() {
        let n = col.norm();
        col /= n;
    }
    PrototypeSet::new(vectors)
}

/// Two-level pattern: `cos_min_min` between minority pairs, `cos_rest` for
/// every other distinct pair.
pub fn minority_angle_gram(k: usize, minority: &[usize], cos_min_min: f64, cos_rest: f64) -> GramMatrix {
    let mut is_min = vec![false; k];
    for &c in minority {
        is_min[c] = true;
    }
    let entries = DMatrix::from_fn(k, k, |i, j| {
        if i == j {
            1.0
        } else if is_min[i] && is_min[j] {
            cos_min_min
        } else {
            cos_rest
        }
    });
    GramMatrix { entries }
}

pub fn make_minority_angle(
    k: usize,
    minority: &[usize],
    cos_min_min: f64,
    cos_rest: f64,
    d: usize,
    seed: u64,
) -> Result<PrototypeSet> {
    GeometrySpec::MinorityAngle {
        minority: minority.to_vec(),
        cos_min_min,
        cos_rest,
    }
    .validate(k)?;
    make_from_gram(&minority_angle_gram(k, minority, cos_min_min, cos_rest), d, seed)
}

/// All `majority` classes share one prototype; that shared direction and
/// the remaining classes form an ETF of `k - |majority| + 1` directions.
pub fn make_majority_collapse(k: usize, majority: &[usize], d: usize, seed: u64) -> Result<PrototypeSet> {
    GeometrySpec::MajorityCollapse {
        majority: majority.to_vec(),
    }
    .validate(k)?;
    let k_eff = k - majority.len() + 1;
    let directions = if k_eff == 1 {
        if d < 1 {
            return Err(Error::Dimension("embedding dimension must be at least 1".into()));
        }
        random_orthogonal(d, seed).columns(0, 1).into_owned()
    } else {
        if d + 1 < k_eff {
            return Err(Error::Dimension(format!(
                "collapsed geometry has {k_eff} directions and needs d >= {}, got d = {d}",
                k_eff - 1
            )));
        }
        make_etf(k_eff, d, seed)?.vectors
    };

    let mut is_major = vec![false; k];
    for &c in majority {
        is_major[c] = true;
    }
    let mut vectors = DMatrix::zeros(d, k);
    let mut next = 1;
    for (c, &major) in is_major.iter().enumerate() {
        let src = if major {
            0
        } else {
            next += 1;
            next - 1
        };
        vectors.set_column(c, &directions.column(src));
    }
    PrototypeSet::new(vectors)
}

/// Haar-distributed `d x d` orthogonal matrix from a seeded Gaussian QR.
pub fn random_orthogonal(d: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = DMatrix::from_fn(d, d, |_, _| StandardNormal.sample(&mut rng));
    let qr = a.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            let mut col = q.column_mut(j);
            col.neg_mut();
        }
    }
    q
}
