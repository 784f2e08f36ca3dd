//! Supervised-contrastive losses over free embeddings.
//!
//! Three objectives share one evaluation scheme:
//!
//! * [`scl_loss`]: vanilla supervised-contrastive loss on a batch.
//! * [`scl_augmented_loss`]: the same loss on the batch augmented with `n_w`
//!   copies of every class prototype. The copies are never materialized;
//!   identical terms are folded into multiplicity weights, so the work is
//!   `n(n-1)/2 + nk` embedding inner products for any `n_w`.
//! * [`limit_loss`]: the large-`n_w` form, a fixed-classifier cross-entropy
//!   on normalized embeddings plus an alignment term.
//!
//! Every inner product is divided by the temperature. Each loss is written
//! as a function of the scaled similarities `s_il = h_i . h_l / tau` and
//! `t_ic = h_i . w_c / tau`; an anchor records `dL/ds` and `dL/dt`
//! coefficients, and the gradient column for sample `a` is
//! `(sum_b (C_ab + C_ba) h_b + sum_c P_ac w_c) / tau`.
//!
//! Gradients are ambient (not projected onto the sphere).

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{BatchPlan, EmbeddingSet};
use crate::error::{Error, Result};
use crate::geometry::PrototypeSet;
use crate::par::{self, dot, pairwise_sum};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    /// Vanilla supervised-contrastive loss, no prototypes.
    Scl,
    /// Supervised-contrastive loss with `n_w` prototype copies per class.
    SclProto,
    /// Large-`n_w` limit: fixed-classifier cross-entropy plus alignment.
    Limit,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Scl => "scl",
            LossKind::SclProto => "scl_proto",
            LossKind::Limit => "limit",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "scl" => Ok(LossKind::Scl),
            "scl_proto" => Ok(LossKind::SclProto),
            "limit" => Ok(LossKind::Limit),
            other => Err(Error::Parse(format!("unknown loss kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParams {
    temperature: f64,
}

impl LossParams {
    pub fn new(temperature: f64) -> Result<Self> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::Domain(format!("temperature must be positive, got {temperature}")));
        }
        Ok(Self { temperature })
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }
}

impl Default for LossParams {
    fn default() -> Self {
        Self { temperature: 0.1 }
    }
}

/// Loss value, ambient gradient (`d x N`, zero outside the batch) and the
/// number of embedding inner products evaluated.
#[derive(Debug, Clone)]
pub struct LossReport {
    pub value: f64,
    pub grad: DMatrix<f64>,
    pub inner_product_count: u64,
}

/// Dispatch on `kind`. `prototypes` is ignored by [`LossKind::Scl`].
pub fn evaluate(
    kind: LossKind,
    embeddings: &EmbeddingSet,
    prototypes: &PrototypeSet,
    plan: &BatchPlan,
    params: &LossParams,
) -> Result<LossReport> {
    match kind {
        LossKind::Scl => scl_loss(embeddings, plan, params),
        LossKind::SclProto => scl_augmented_loss(embeddings, prototypes, plan, params),
        LossKind::Limit => limit_loss(embeddings, prototypes, plan, params),
    }
}

/// Per-anchor output: value plus `dL/ds` (length n) and `dL/dt` (length k or 0).
struct AnchorTerm {
    value: f64,
    ss: Vec<f64>,
    sp: Vec<f64>,
}

impl AnchorTerm {
    fn skipped(n: usize, k: usize) -> Self {
        Self {
            value: 0.0,
            ss: vec![0.0; n],
            sp: vec![0.0; k],
        }
    }
}

/// `(max, sum w * exp(x - max))` over weighted logits; zero weights are ignored.
fn weighted_lse_parts(terms: impl Iterator<Item = (f64, f64)> + Clone) -> (f64, f64) {
    let m = terms
        .clone()
        .filter(|&(w, _)| w > 0.0)
        .map(|(_, x)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    let s = terms.filter(|&(w, _)| w > 0.0).map(|(w, x)| w * (x - m).exp()).sum();
    (m, s)
}

/// Scaled sample-sample similarities, `n x n` row-major (diagonal unused).
fn sample_sims(emb: &EmbeddingSet, idx: &[usize], inv_tau: f64) -> Vec<f64> {
    let n = idx.len();
    let upper = par::map_range(n, |i| {
        let hi = emb.column(idx[i]);
        ((i + 1)..n)
            .map(|j| dot(hi, emb.column(idx[j])) * inv_tau)
            .collect::<Vec<f64>>()
    });
    let mut s = vec![0.0; n * n];
    for (i, row) in upper.iter().enumerate() {
        for (off, &v) in row.iter().enumerate() {
            let j = i + 1 + off;
            s[i * n + j] = v;
            s[j * n + i] = v;
        }
    }
    s
}

/// Scaled sample-prototype similarities, `n x k` row-major.
fn proto_sims(emb: &EmbeddingSet, idx: &[usize], protos: &PrototypeSet, inv_tau: f64) -> Vec<f64> {
    let k = protos.class_count();
    par::map_range(idx.len(), |i| {
        let hi = emb.column(idx[i]);
        (0..k).map(|c| dot(hi, protos.column(c)) * inv_tau).collect::<Vec<f64>>()
    })
    .concat()
}

/// Scatter anchor coefficients into the `d x N` gradient.
fn assemble_grad(
    emb: &EmbeddingSet,
    idx: &[usize],
    ss: &[f64],
    sp: Option<(&[f64], &PrototypeSet)>,
    inv_tau: f64,
) -> DMatrix<f64> {
    let n = idx.len();
    let d = emb.dim();
    let cols = par::map_range(n, |a| {
        let mut g = vec![0.0; d];
        if !ss.is_empty() {
            for b in 0..n {
                if b == a {
                    continue;
                }
                let coef = ss[a * n + b] + ss[b * n + a];
                if coef != 0.0 {
                    for (gi, hi) in g.iter_mut().zip(emb.column(idx[b])) {
                        *gi += coef * hi;
                    }
                }
            }
        }
        if let Some((sp, protos)) = sp {
            let k = protos.class_count();
            for c in 0..k {
                let coef = sp[a * k + c];
                if coef != 0.0 {
                    for (gi, wi) in g.iter_mut().zip(protos.column(c)) {
                        *gi += coef * wi;
                    }
                }
            }
        }
        g.iter_mut().for_each(|v| *v *= inv_tau);
        g
    });
    let mut grad = DMatrix::zeros(d, emb.len());
    for (a, col) in cols.into_iter().enumerate() {
        grad.column_mut(idx[a]).copy_from_slice(&col);
    }
    grad
}

fn batch_labels(emb: &EmbeddingSet, plan: &BatchPlan) -> Result<Vec<usize>> {
    let labels = emb.labels();
    if plan.class_counts().len() != emb.class_count() {
        return Err(Error::Mismatch(format!(
            "batch plan has {} classes, embeddings have {}",
            plan.class_counts().len(),
            emb.class_count()
        )));
    }
    plan.sample_indices()
        .iter()
        .map(|&i| {
            labels
                .get(i)
                .copied()
                .ok_or_else(|| Error::Mismatch(format!("batch index {i} out of range")))
        })
        .collect()
}

fn check_prototypes(emb: &EmbeddingSet, protos: &PrototypeSet) -> Result<()> {
    if protos.dim() != emb.dim() {
        return Err(Error::Mismatch(format!(
            "prototype dim {} != embedding dim {}",
            protos.dim(),
            emb.dim()
        )));
    }
    if protos.class_count() != emb.class_count() {
        return Err(Error::Mismatch(format!(
            "{} prototypes for {} classes",
            protos.class_count(),
            emb.class_count()
        )));
    }
    Ok(())
}

fn pairs(n: usize) -> u64 {
    (n as u64) * (n as u64).saturating_sub(1) / 2
}

/// Vanilla supervised-contrastive loss. Anchors that are alone in their
/// class within the batch are skipped as anchors but still act as negatives.
pub fn scl_loss(embeddings: &EmbeddingSet, plan: &BatchPlan, params: &LossParams) -> Result<LossReport> {
    if plan.n_w() != 0 {
        return Err(Error::Domain(format!(
            "vanilla loss expects n_w = 0, plan has n_w = {}",
            plan.n_w()
        )));
    }
    let idx = plan.sample_indices();
    let n = idx.len();
    if n < 2 {
        return Err(Error::EmptyAnchor);
    }
    let y = batch_labels(embeddings, plan)?;
    let counts = plan.class_counts();
    if !y.iter().any(|&c| counts[c] >= 2) {
        return Err(Error::EmptyAnchor);
    }
    let inv_tau = 1.0 / params.temperature();
    let s = sample_sims(embeddings, idx, inv_tau);

    let anchors = par::map_range(n, |i| {
        let positives = counts[y[i]] - 1;
        if positives == 0 {
            return AnchorTerm::skipped(n, 0);
        }
        let row = &s[i * n..(i + 1) * n];
        let (m, sum) = weighted_lse_parts((0..n).map(|l| (if l == i { 0.0 } else { 1.0 }, row[l])));
        let lse = m + sum.ln();
        let inv_p = 1.0 / positives as f64;
        let mut pos_sum = 0.0;
        let mut ss = vec![0.0; n];
        for l in 0..n {
            if l == i {
                continue;
            }
            let mut c = (row[l] - m).exp() / sum;
            if y[l] == y[i] {
                pos_sum += row[l];
                c -= inv_p;
            }
            ss[l] = c;
        }
        AnchorTerm {
            value: lse - inv_p * pos_sum,
            ss,
            sp: Vec::new(),
        }
    });

    let values: Vec<f64> = anchors.iter().map(|a| a.value).collect();
    let ss: Vec<f64> = anchors.into_iter().flat_map(|a| a.ss).collect();
    Ok(LossReport {
        value: pairwise_sum(&values),
        grad: assemble_grad(embeddings, idx, &ss, None, inv_tau),
        inner_product_count: pairs(n),
    })
}

/// Supervised-contrastive loss on the batch plus `n_w` copies of every
/// prototype, evaluated through multiplicity weights.
///
/// Sample anchor `i` has `n_{B,y_i} + n_w - 1` positives. A copy of
/// prototype `c` has `n_{B,c} + n_w - 1` positives and its `n_w` copies
/// contribute identically, so each class anchor term is scaled by `n_w`.
/// Prototypes are fixed; only embedding gradients are returned.
pub fn scl_augmented_loss(
    embeddings: &EmbeddingSet,
    prototypes: &PrototypeSet,
    plan: &BatchPlan,
    params: &LossParams,
) -> Result<LossReport> {
    check_prototypes(embeddings, prototypes)?;
    let n_w = plan.n_w();
    if n_w == 0 {
        return Err(Error::Domain("prototype-augmented loss needs n_w >= 1".into()));
    }
    let idx = plan.sample_indices();
    let n = idx.len();
    let k = prototypes.class_count();
    let y = batch_labels(embeddings, plan)?;
    let counts = plan.class_counts();
    let inv_tau = 1.0 / params.temperature();
    let nw = n_w as f64;

    let s = sample_sims(embeddings, idx, inv_tau);
    let t = proto_sims(embeddings, idx, prototypes, inv_tau);
    // prototype-prototype similarities are constants of the geometry
    let ww = prototypes.gram().entries() * inv_tau;

    let sample_terms = par::map_range(n, |i| {
        let positives = (counts[y[i]] + n_w - 1) as f64;
        let srow = &s[i * n..(i + 1) * n];
        let trow = &t[i * k..(i + 1) * k];
        let terms = (0..n)
            .map(|l| (if l == i { 0.0 } else { 1.0 }, srow[l]))
            .chain(trow.iter().map(|&x| (nw, x)));
        let (m, sum) = weighted_lse_parts(terms);
        let lse = m + sum.ln();
        let inv_p = 1.0 / positives;

        let mut pos_sum = nw * trow[y[i]];
        let mut ss = vec![0.0; n];
        for l in 0..n {
            if l == i {
                continue;
            }
            let mut c = (srow[l] - m).exp() / sum;
            if y[l] == y[i] {
                pos_sum += srow[l];
                c -= inv_p;
            }
            ss[l] = c;
        }
        let sp = (0..k)
            .map(|c| {
                let mut v = nw * (trow[c] - m).exp() / sum;
                if c == y[i] {
                    v -= nw * inv_p;
                }
                v
            })
            .collect();
        AnchorTerm {
            value: lse - inv_p * pos_sum,
            ss,
            sp,
        }
    });

    // class anchors: (value, dL/dt column for this class)
    let class_terms = par::map_range(k, |chat| {
        let positives = counts[chat] + n_w - 1;
        if positives == 0 {
            return (0.0, vec![0.0; n]);
        }
        let inv_p = 1.0 / positives as f64;
        let self_sim = ww[(chat, chat)];
        let terms = (0..n)
            .map(|l| (1.0, t[l * k + chat]))
            .chain((0..k).filter(|&c| c != chat).map(|c| (nw, ww[(chat, c)])))
            .chain(std::iter::once((nw - 1.0, self_sim)));
        let (m, sum) = weighted_lse_parts(terms);
        let lse = m + sum.ln();
        let mut pos_sum = (nw - 1.0) * self_sim;
        let col = (0..n)
            .map(|l| {
                let x = t[l * k + chat];
                let mut c = (x - m).exp() / sum;
                if y[l] == chat {
                    pos_sum += x;
                    c -= inv_p;
                }
                nw * c
            })
            .collect::<Vec<f64>>();
        (nw * (lse - inv_p * pos_sum), col)
    });

    let mut values: Vec<f64> = sample_terms.iter().map(|a| a.value).collect();
    values.extend(class_terms.iter().map(|(v, _)| *v));

    let mut ss = Vec::with_capacity(n * n);
    let mut sp = Vec::with_capacity(n * k);
    for a in sample_terms {
        ss.extend(a.ss);
        sp.extend(a.sp);
    }
    for (chat, (_, col)) in class_terms.iter().enumerate() {
        for (l, v) in col.iter().enumerate() {
            sp[l * k + chat] += v;
        }
    }

    Ok(LossReport {
        value: pairwise_sum(&values),
        grad: assemble_grad(embeddings, idx, &ss, Some((&sp, prototypes)), inv_tau),
        inner_product_count: pairs(n) + (n as u64) * (k as u64),
    })
}

/// Cross-entropy against fixed prototypes plus an alignment term:
/// `sum_i [ lse_c(w_c . h_i / tau) - 2 w_{y_i} . h_i / tau ]`.
pub fn limit_loss(
    embeddings: &EmbeddingSet,
    prototypes: &PrototypeSet,
    plan: &BatchPlan,
    params: &LossParams,
) -> Result<LossReport> {
    check_prototypes(embeddings, prototypes)?;
    let idx = plan.sample_indices();
    let n = idx.len();
    let k = prototypes.class_count();
    let y = batch_labels(embeddings, plan)?;
    let inv_tau = 1.0 / params.temperature();
    let t = proto_sims(embeddings, idx, prototypes, inv_tau);

    let terms = par::map_range(n, |i| {
        let row = &t[i * k..(i + 1) * k];
        let (m, sum) = weighted_lse_parts(row.iter().map(|&x| (1.0, x)));
        let sp: Vec<f64> = (0..k)
            .map(|c| (row[c] - m).exp() / sum - if c == y[i] { 2.0 } else { 0.0 })
            .collect();
        AnchorTerm {
            value: m + sum.ln() - 2.0 * row[y[i]],
            ss: Vec::new(),
            sp,
        }
    });
    let values: Vec<f64> = terms.iter().map(|a| a.value).collect();
    let sp: Vec<f64> = terms.into_iter().flat_map(|a| a.sp).collect();
    Ok(LossReport {
        value: pairwise_sum(&values),
        grad: assemble_grad(embeddings, idx, &[], Some((&sp, prototypes)), inv_tau),
        inner_product_count: (n as u64) * (k as u64),
    })
}

/// Maximum relative error `|a - f| / max(1, |a|, |f|)` between the analytic
/// gradient and central finite differences on a seeded coordinate subset
/// (at least 20 coordinates, or all of them when fewer exist).
pub fn grad_check(
    kind: LossKind,
    embeddings: &EmbeddingSet,
    prototypes: &PrototypeSet,
    plan: &BatchPlan,
    params: &LossParams,
    eps: f64,
    seed: u64,
) -> Result<f64> {
    grad_check_inner(kind, embeddings, prototypes, plan, params, eps, seed, false)
}

/// [`grad_check`] against a deliberately perturbed analytic gradient.
/// Negative control for the checker itself.
#[doc(hidden)]
pub fn grad_check_corrupted(
    kind: LossKind,
    embeddings: &EmbeddingSet,
    prototypes: &PrototypeSet,
    plan: &BatchPlan,
    params: &LossParams,
    eps: f64,
    seed: u64,
) -> Result<f64> {
    grad_check_inner(kind, embeddings, prototypes, plan, params, eps, seed, true)
}

#[allow(clippy::too_many_arguments)]
fn grad_check_inner(
    kind: LossKind,
    embeddings: &EmbeddingSet,
    prototypes: &PrototypeSet,
    plan: &BatchPlan,
    params: &LossParams,
    eps: f64,
    seed: u64,
    corrupt: bool,
) -> Result<f64> {
    const MIN_COORDS: usize = 20;
    if !(1e-8..=1e-4).contains(&eps) {
        return Err(Error::Domain(format!("finite-difference step {eps:e} outside [1e-8, 1e-4]")));
    }
    let mut grad = evaluate(kind, embeddings, prototypes, plan, params)?.grad;
    if corrupt {
        grad.iter_mut().for_each(|g| *g = 1.5 * *g + 0.1);
    }
    let d = embeddings.dim();
    let coords: Vec<(usize, usize)> = plan
        .sample_indices()
        .iter()
        .flat_map(|&col| (0..d).map(move |row| (row, col)))
        .collect();
    let chosen: Vec<(usize, usize)> = if coords.len() <= MIN_COORDS {
        coords
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sample(&mut rng, coords.len(), MIN_COORDS.max(coords.len() / 4).min(coords.len()))
            .into_iter()
            .map(|i| coords[i])
            .collect()
    };

    let errors = par::map_slice(&chosen, |&(row, col)| -> Result<f64> {
        let shifted = |delta: f64| -> Result<f64> {
            let mut e = embeddings.clone();
            e.vectors_mut()[(row, col)] += delta;
            Ok(evaluate(kind, &e, prototypes, plan, params)?.value)
        };
        let fd = (shifted(eps)? - shifted(-eps)?) / (2.0 * eps);
        let a = grad[(row, col)];
        Ok((a - fd).abs() / 1f64.max(a.abs()).max(fd.abs()))
    });
    errors
        .into_iter()
        .try_fold(0.0f64, |acc, e| e.map(|e| acc.max(e)))
}

/// Relative Frobenius gap between the augmented-loss and limit-loss
/// gradients at each `n_w` of an increasing sweep.
pub fn limit_gap(
    embeddings: &EmbeddingSet,
    prototypes: &PrototypeSet,
    plan: &BatchPlan,
    params: &LossParams,
    sweep: &[usize],
) -> Result<Vec<(usize, f64)>> {
    if sweep.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Domain("n_w sweep must be strictly increasing".into()));
    }
    let limit = limit_loss(embeddings, prototypes, plan, params)?.grad;
    let norm = limit.norm();
    if norm < 1e-15 {
        return Err(Error::Degenerate("limit-loss gradient vanishes".into()));
    }
    sweep
        .iter()
        .map(|&n_w| {
            let aug = scl_augmented_loss(embeddings, prototypes, &plan.with_n_w(n_w), params)?.grad;
            Ok((n_w, (aug - &limit).norm() / norm))
        })
        .collect()
}
