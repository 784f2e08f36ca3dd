//! Projected gradient descent on the unit sphere.

use nalgebra::DMatrix;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::analysis::{metrics, MetricsRecord};
use crate::config::RunConfig;
use crate::data::{init_embeddings, sample_batches, step_imbalance, BatchPlan, EmbeddingSet, LabelDistribution, EMBEDDING_NORM_TOL};
use crate::error::{Error, Result};
use crate::geometry::{GramMatrix, PrototypeSet};
use crate::loss::{evaluate, LossKind, LossParams};
use crate::par;

/// Learning rate with step annealing.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    base_lr: f64,
    anneal_epochs: Vec<usize>,
    anneal_factor: f64,
    epochs: usize,
}

impl Schedule {
    pub fn new(base_lr: f64, anneal_epochs: Vec<usize>, anneal_factor: f64, epochs: usize) -> Result<Self> {
        if !(base_lr > 0.0 && base_lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {base_lr}")));
        }
        if !(anneal_factor > 0.0 && anneal_factor <= 1.0) {
            return Err(Error::Config(format!("anneal factor must be in (0, 1], got {anneal_factor}")));
        }
        if anneal_epochs.windows(2).any(|w| w[0] >= w[1]) || anneal_epochs.last().is_some_and(|&e| e >= epochs) {
            return Err(Error::Config("anneal epochs must be strictly increasing and below epochs".into()));
        }
        Ok(Self {
            base_lr,
            anneal_epochs,
            anneal_factor,
            epochs,
        })
    }

    pub fn epochs(&self) -> usize {
        self.epochs
    }

    /// `base_lr * factor^(number of anneal epochs <= epoch)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.anneal_epochs.iter().filter(|&&e| e <= epoch).count();
        self.base_lr * self.anneal_factor.powi(passed as i32)
    }
}

fn check_finite(grad: &DMatrix<f64>) -> Result<()> {
    if let Some(pos) = grad.iter().position(|g| !g.is_finite()) {
        let (r, c) = (pos % grad.nrows(), pos / grad.nrows());
        return Err(Error::NonFinite(format!("gradient entry ({r}, {c}) is {}", grad[(r, c)])));
    }
    Ok(())
}

/// Riemannian step: project each gradient column onto the tangent space at
/// `h_i`, step, and retract by renormalizing. Columns whose tangent gradient
/// is below `1e-15` are left unchanged.
pub fn project_and_step(embeddings: &mut EmbeddingSet, grad: &DMatrix<f64>, lr: f64) -> Result<()> {
    if grad.shape() != embeddings.vectors().shape() {
        return Err(Error::Mismatch("gradient shape differs from embeddings".into()));
    }
    check_finite(grad)?;
    let vectors = embeddings.vectors_mut();
    for (mut h, g) in vectors.column_iter_mut().zip(grad.column_iter()) {
        let tangent = g - &h * h.dot(&g);
        if tangent.norm() < 1e-15 {
            continue;
        }
        h.axpy(-lr, &tangent, 1.0);
        let n = h.norm();
        h /= n;
    }
    Ok(())
}

/// Heavy-ball variant: the velocity is re-projected onto the current
/// tangent space before each step. Only `columns` are touched.
fn momentum_step(
    embeddings: &mut EmbeddingSet,
    grad: &DMatrix<f64>,
    velocity: &mut DMatrix<f64>,
    lr: f64,
    momentum: f64,
    columns: &[usize],
) -> Result<()> {
    check_finite(grad)?;
    let vectors = embeddings.vectors_mut();
    for &i in columns {
        let h = vectors.column(i).clone_owned();
        let g = grad.column(i);
        let v_old = velocity.column(i).clone_owned();
        let v = (&v_old - &h * h.dot(&v_old)) * momentum + (g - &h * h.dot(&g));
        if v.norm() < 1e-15 {
            continue;
        }
        let stepped = &h - &v * lr;
        vectors.set_column(i, &(&stepped / stepped.norm()));
        velocity.set_column(i, &v);
    }
    Ok(())
}

/// Everything a run needs, resolved from a config.
#[derive(Debug, Clone)]
pub struct Setup {
    pub config: RunConfig,
    pub distribution: LabelDistribution,
    pub prototypes: PrototypeSet,
    pub reference: GramMatrix,
    pub embeddings: EmbeddingSet,
    pub schedule: Schedule,
    pub params: LossParams,
}

impl Setup {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let distribution = step_imbalance(config.k, config.n_maj, config.ratio)?;
        let prototypes = config.geometry.build(config.k, config.d, config.seed_geometry)?;
        let reference = prototypes.gram();
        let embeddings = init_embeddings(&distribution, config.d, config.seed_init)?;
        let schedule = Schedule::new(config.lr, config.anneal_epochs.clone(), config.anneal_factor, config.epochs)?;
        let params = LossParams::new(config.tau)?;
        Ok(Self {
            config: config.clone(),
            distribution,
            prototypes,
            reference,
            embeddings,
            schedule,
            params,
        })
    }
}

/// Embeddings plus per-epoch history. Record 0 describes the initialization.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub embeddings: EmbeddingSet,
    pub prototypes: PrototypeSet,
    pub reference: GramMatrix,
    pub epoch: usize,
    pub history: Vec<MetricsRecord>,
}

/// A run that stopped early; `history` holds every completed epoch.
#[derive(Debug)]
pub struct RunAbort {
    pub history: Vec<MetricsRecord>,
    pub error: Error,
}

impl std::fmt::Display for RunAbort {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "run aborted after {} records: {}", self.history.len(), self.error)
    }
}

impl std::error::Error for RunAbort {}

fn batch_n_w(config: &RunConfig) -> usize {
    match config.loss {
        LossKind::SclProto => config.n_w,
        _ => 0,
    }
}

/// Mean loss over the batches that have anchors; batches without any
/// positive pair (possible for vanilla SCL on small batches) are skipped.
fn batch_loss(setup: &Setup, embeddings: &EmbeddingSet, plan: &BatchPlan) -> Result<Option<(f64, DMatrix<f64>)>> {
    match evaluate(setup.config.loss, embeddings, &setup.prototypes, plan, &setup.params) {
        Ok(r) => {
            if !r.value.is_finite() {
                return Err(Error::NonFinite(format!("loss value {}", r.value)));
            }
            Ok(Some((r.value, r.grad)))
        }
        Err(Error::EmptyAnchor) => Ok(None),
        Err(e) => Err(e),
    }
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        f64::NAN
    } else {
        par::pairwise_sum(values) / values.len() as f64
    }
}

/// Run the configured optimization from a prepared setup.
pub fn train(setup: Setup) -> std::result::Result<TrainState, RunAbort> {
    let mut history = Vec::with_capacity(setup.config.epochs + 1);
    match train_inner(&setup, &mut history) {
        Ok(embeddings) => Ok(TrainState {
            embeddings,
            prototypes: setup.prototypes,
            reference: setup.reference,
            epoch: setup.config.epochs,
            history,
        }),
        Err(error) => Err(RunAbort { history, error }),
    }
}

fn train_inner(setup: &Setup, history: &mut Vec<MetricsRecord>) -> Result<EmbeddingSet> {
    let cfg = &setup.config;
    let n_w = batch_n_w(cfg);
    let mut embeddings = setup.embeddings.clone();
    let mut seeds = ChaCha8Rng::seed_from_u64(cfg.seed_batch);
    let mut velocity = (cfg.momentum > 0.0).then(|| DMatrix::zeros(cfg.d, embeddings.len()));

    let record = |epoch: usize, loss: f64, e: &EmbeddingSet| {
        metrics(epoch, loss, e, &setup.prototypes, &setup.reference, cfg.normalize_means)
    };

    // epoch 0: loss over one epoch of batches at the initialization
    let init_batches = sample_batches(&setup.distribution, cfg.batch_size, n_w, seeds.next_u64(), cfg.bind_classes)?;
    let init_losses: Vec<f64> = init_batches
        .iter()
        .map(|b| batch_loss(setup, &embeddings, b))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .map(|(v, _)| v)
        .collect();
    history.push(record(0, mean(&init_losses), &embeddings)?);

    for epoch in 1..=cfg.epochs {
        let lr = setup.schedule.lr_at(epoch);
        let batches = sample_batches(&setup.distribution, cfg.batch_size, n_w, seeds.next_u64(), cfg.bind_classes)?;
        let mut losses = Vec::with_capacity(batches.len());
        for plan in &batches {
            let Some((value, grad)) = batch_loss(setup, &embeddings, plan)? else {
                continue;
            };
            losses.push(value);
            match velocity.as_mut() {
                Some(v) => momentum_step(&mut embeddings, &grad, v, lr, cfg.momentum, plan.sample_indices())?,
                None => project_and_step(&mut embeddings, &grad, lr)?,
            }
        }
        let drift = embeddings.max_norm_drift();
        if !(drift < EMBEDDING_NORM_TOL) {
            return Err(Error::NonFinite(format!("embedding norm drift {drift:e} at epoch {epoch}")));
        }
        history.push(record(epoch, mean(&losses), &embeddings)?);
    }
    Ok(embeddings)
}

/// Prepare and train. Setup failures come back as an abort with an empty history.
pub fn run(config: &RunConfig) -> std::result::Result<TrainState, RunAbort> {
    let setup = Setup::new(config).map_err(|error| RunAbort {
        history: Vec::new(),
        error,
    })?;
    train(setup)
}

/// Independent runs evaluated in parallel; results keep input order.
pub fn run_many(configs: &[RunConfig]) -> Vec<std::result::Result<TrainState, RunAbort>> {
    par::map_slice(configs, run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LabelDistribution;
    use crate::geometry::GeometrySpec;

    fn single(h: &[f64]) -> EmbeddingSet {
        EmbeddingSet::new(DMatrix::from_column_slice(h.len(), 1, h), vec![0], 1).unwrap()
    }

    #[test]
    fn radial_gradient_is_ignored() {
        let mut e = single(&[0.6, 0.8]);
        project_and_step(&mut e, &DMatrix::from_column_slice(2, 1, &[1.2, 1.6]), 0.5).unwrap();
        assert_eq!(e.column(0), &[0.6, 0.8]);
    }

    #[test]
    fn hand_computed_step() {
        let mut e = single(&[1.0, 0.0]);
        project_and_step(&mut e, &DMatrix::from_column_slice(2, 1, &[0.0, 1.0]), 1.0).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((e.column(0)[0] - s).abs() < 1e-15 && (e.column(0)[1] + s).abs() < 1e-15);
    }

    #[test]
    fn step_preserves_norm() {
        let dist = LabelDistribution::new(vec![10, 10]).unwrap();
        let mut e = init_embeddings(&dist, 5, 3).unwrap();
        let g = DMatrix::from_fn(5, 20, |r, c| ((r * 7 + c * 3) % 11) as f64 - 5.0);
        project_and_step(&mut e, &g, 0.7).unwrap();
        assert!(e.max_norm_drift() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut e = single(&[1.0, 0.0]);
        let r = project_and_step(&mut e, &DMatrix::from_column_slice(2, 1, &[f64::NAN, 0.0]), 1.0);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn schedule_annealing() {
        let s = Schedule::new(0.1, vec![200, 300], 0.1, 350).unwrap();
        assert_eq!(s.lr_at(1), 0.1);
        assert_eq!(s.lr_at(199), 0.1);
        assert_eq!(s.lr_at(200), 0.1 * 0.1f64.powi(1));
        assert_eq!(s.lr_at(349), 0.1 * 0.1f64.powi(2));
        assert!(Schedule::new(0.1, vec![300, 200], 0.1, 350).is_err());
        assert!(Schedule::new(0.1, vec![350], 0.1, 350).is_err());
    }

    fn small_config() -> RunConfig {
        RunConfig {
            n_maj: 20,
            ratio: 4,
            batch_size: 10,
            epochs: 5,
            ..RunConfig::default()
        }
    }

    #[test]
    fn zero_epochs_records_initialization_only() {
        let cfg = RunConfig { epochs: 0, ..small_config() };
        let state = run(&cfg).unwrap();
        assert_eq!(state.history.len(), 1);
        assert_eq!(state.history[0].epoch, 0);
        assert!(state.history[0].loss.is_finite());
    }

    #[test]
    fn runs_are_deterministic() {
        for (loss, n_w) in [(LossKind::Scl, 0), (LossKind::SclProto, 4), (LossKind::Limit, 0)] {
            let cfg = RunConfig {
                loss,
                n_w,
                momentum: 0.5,
                ..small_config()
            };
            let a = run(&cfg).unwrap();
            let b = run(&cfg).unwrap();
            assert_eq!(a.history, b.history);
            assert_eq!(a.embeddings.vectors().as_slice(), b.embeddings.vectors().as_slice());
        }
    }

    #[test]
    fn norms_hold_at_every_epoch() {
        let cfg = RunConfig {
            loss: LossKind::SclProto,
            n_w: 2,
            lr: 2.0,
            ..small_config()
        };
        let state = run(&cfg).unwrap();
        assert!(state.embeddings.max_norm_drift() < 1e-9);
        assert_eq!(state.history.len(), 6);
    }

    #[test]
    fn setup_errors_surface_as_abort() {
        let cfg = RunConfig {
            geometry: GeometrySpec::MinorityAngle {
                minority: vec![2, 3],
                cos_min_min: -0.9,
                cos_rest: -1.0 / 3.0,
            },
            ..small_config()
        };
        let abort = run(&cfg).unwrap_err();
        assert!(abort.history.is_empty());
        assert!(matches!(abort.error, Error::NotPsd { .. }));
    }

    #[test]
    fn loss_trends_down_and_norms_hold() {
        let cfg = RunConfig {
            loss: LossKind::Limit,
            epochs: 200,
            ..RunConfig::default()
        };
        let h = run(&cfg).unwrap().history;
        let tenth = h.len() / 10;
        let avg = |r: &[MetricsRecord]| r.iter().map(|m| m.loss).sum::<f64>() / r.len() as f64;
        assert!(avg(&h[h.len() - tenth..]) < avg(&h[..tenth]));
        assert!(h.iter().all(|m| m.min_mean_norm <= m.max_mean_norm && m.max_mean_norm <= 1.0 + 1e-12));
    }

    #[test]
    fn lr_schedule_applies_each_epoch() {
        let s = Schedule::new(0.1, vec![200, 300], 0.1, 350).unwrap();
        for e in 0..350 {
            let expected = 0.1 * 0.1f64.powi([200, 300].iter().filter(|&&a| a <= e).count() as i32);
            assert_eq!(s.lr_at(e), expected);
        }
    }

    #[test]
    fn balanced_limit_run_reaches_etf() {
        let cfg = RunConfig {
            k: 4,
            d: 8,
            n_maj: 20,
            ratio: 1,
            batch_size: 16,
            loss: LossKind::Limit,
            lr: 0.5,
            anneal_epochs: vec![300, 400],
            epochs: 500,
            ..RunConfig::default()
        };
        let state = run(&cfg).unwrap();
        let last = state.history.last().unwrap();
        assert!(last.delta < 1e-3, "delta {}", last.delta);
    }
}
