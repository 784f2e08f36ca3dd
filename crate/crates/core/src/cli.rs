//! Command-line front end. Every command returns a process exit code:
//! 0 success, 1 check failed or I/O error, 2 invalid configuration,
//! 3 numerical abort.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::analysis::{alignment, class_means, geometry_delta_with, within_class_spread};
use crate::config::RunConfig;
use crate::data::{init_embeddings, BatchPlan, LabelDistribution};
use crate::error::Error;
use crate::geometry::{GeometrySpec, PrototypeSet};
use crate::io;
use crate::loss::{grad_check, grad_check_corrupted, limit_gap, LossKind, LossParams};
use crate::optim::{self, Setup};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub const GRADCHECK_THRESHOLD: f64 = 1e-4;
pub const LIMITGAP_THRESHOLD: f64 = 1e-2;

#[derive(Debug, Parser)]
#[command(name = "protogeom", version, about = "Prototype-driven feature geometry experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config file (key = value lines).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Base seed; overrides every seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train embeddings and write metrics, Gram and embedding files.
    Run(Common),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Build a prototype geometry and write prototypes.csv and gram.csv.
    Geometry(GeometryArgs),
    /// Gradient gap between the augmented and limit losses over an n_w sweep.
    Limitgap(Common),
    /// Recompute metrics from a saved embeddings.csv.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "limit")]
    pub loss: String,
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    #[arg(long, default_value_t = 5)]
    pub d: usize,
    #[arg(long, alias = "nw", default_value_t = 3)]
    pub n_w: usize,
    #[arg(long, default_value_t = 0.1)]
    pub tau: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub eps: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Perturb the analytic gradient (negative control).
    #[arg(long, hide = true)]
    pub corrupt: bool,
}

#[derive(Debug, Args)]
pub struct GeometryArgs {
    #[command(flatten)]
    pub common: Common,
    /// etf | minority_angle | majority_collapse | gram_target
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    /// Comma-separated minority class indices.
    #[arg(long)]
    pub minority: Option<String>,
    /// Comma-separated majority class indices.
    #[arg(long)]
    pub majority: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub cos_min_min: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub cos_rest: Option<f64>,
    /// Target Gram CSV for gram_target.
    #[arg(long)]
    pub gram: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub common: Common,
    /// Embeddings file; defaults to <out>/embeddings.csv.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
}

fn error_exit(err: &Error) -> i32 {
    match err {
        Error::NonFinite(_) => EXIT_NUMERIC,
        Error::Io(_) => EXIT_FAIL,
        _ => EXIT_CONFIG,
    }
}

fn load_config(common: &Common) -> Result<RunConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    if let Some(out) = &common.out {
        cfg.out = Some(out.clone());
    }
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out.clone().unwrap_or_else(|| PathBuf::from("out"))
}

fn ensure_dir(path: &Path) -> Result<(), Error> {
    fs::create_dir_all(path)?;
    Ok(())
}

pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match cli.command {
        Command::Run(c) => cmd_run(&c),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::Geometry(a) => cmd_geometry(&a),
        Command::Limitgap(c) => cmd_limitgap(&c),
        Command::Analyze(a) => cmd_analyze(&a),
    }
}

pub fn cmd_run(common: &Common) -> i32 {
    let cfg = match load_config(common) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return error_exit(&e);
        }
    };
    let setup = match Setup::new(&cfg) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return error_exit(&e);
        }
    };
    let dir = out_dir(&cfg);
    if let Err(e) = ensure_dir(&dir).and_then(|_| Ok(fs::write(dir.join("config.resolved"), cfg.to_echo())?)) {
        eprintln!("error: {e}");
        return EXIT_FAIL;
    }

    let state = match optim::train(setup) {
        Ok(s) => s,
        Err(abort) => {
            eprintln!("error: {abort}");
            if let Err(e) = io::write_metrics_csv(&dir.join("metrics.csv"), &abort.history) {
                eprintln!("error: could not write partial metrics: {e}");
            }
            return EXIT_NUMERIC.max(error_exit(&abort.error));
        }
    };

    let write = || -> Result<(), Error> {
        io::write_metrics_csv(&dir.join("metrics.csv"), &state.history)?;
        let g_m = class_means(&state.embeddings)?.gram(cfg.normalize_means);
        io::write_gram_csv(&dir.join("final_gram.csv"), &g_m)?;
        io::write_pgm(&dir.join("final_gram.pgm"), &g_m)?;
        io::write_embeddings_csv(&dir.join("embeddings.csv"), &state.embeddings)?;
        fs::write(dir.join("prototypes.csv"), io::prototypes_to_csv(&state.prototypes))?;
        Ok(())
    };
    if let Err(e) = write() {
        eprintln!("error: {e}");
        return EXIT_FAIL;
    }
    if let Some(last) = state.history.last() {
        println!(
            "epoch {} loss {} delta {} alignment {}",
            last.epoch,
            io::fmt_sig9(last.loss),
            io::fmt_sig9(last.delta),
            io::fmt_sig9(last.alignment)
        );
    }
    EXIT_OK
}

/// Random unit prototypes; any `(k, d)` is allowed.
fn random_prototypes(k: usize, d: usize, seed: u64) -> Result<PrototypeSet, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = DMatrix::from_fn(d, k, |_, _| StandardNormal.sample(&mut rng));
    for mut c in w.column_iter_mut() {
        let n = c.norm();
        c /= n;
    }
    PrototypeSet::new(w)
}

/// Round-robin labels over `k` classes, so every class with index `< n` is present.
fn round_robin(n: usize, k: usize) -> Result<LabelDistribution, Error> {
    if n < k {
        return Err(Error::Config(format!("need n >= k, got n = {n}, k = {k}")));
    }
    LabelDistribution::new((0..k).map(|c| n / k + usize::from(c < n % k)).collect())
}

pub fn cmd_gradcheck(a: &GradcheckArgs) -> i32 {
    let result = (|| -> Result<f64, Error> {
        let kind: LossKind = a.loss.parse().map_err(|e: Error| Error::Config(e.to_string()))?;
        let dist = round_robin(a.n, a.k)?;
        let emb = init_embeddings(&dist, a.d, a.seed)?;
        let protos = random_prototypes(a.k, a.d, a.seed.wrapping_add(1))?;
        let n_w = if kind == LossKind::SclProto { a.n_w.max(1) } else { 0 };
        let plan = BatchPlan::full(&emb, n_w);
        let params = LossParams::new(a.tau)?;
        let check = if a.corrupt { grad_check_corrupted } else { grad_check };
        check(kind, &emb, &protos, &plan, &params, a.eps, a.seed)
    })();
    match result {
        Ok(err) => {
            println!("max_rel_error={err:.3e}");
            if err < GRADCHECK_THRESHOLD {
                EXIT_OK
            } else {
                EXIT_FAIL
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            error_exit(&e)
        }
    }
}

fn parse_index_list(s: &str) -> Result<Vec<usize>, Error> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| {
            let t = t.trim();
            if let Some((lo, hi)) = t.split_once("..") {
                let lo: usize = lo.parse().map_err(|_| Error::Config(format!("bad range {t:?}")))?;
                let hi: usize = hi.parse().map_err(|_| Error::Config(format!("bad range {t:?}")))?;
                Ok((lo..=hi).collect::<Vec<_>>())
            } else {
                t.parse().map(|v| vec![v]).map_err(|_| Error::Config(format!("bad index {t:?}")))
            }
        })
        .collect::<Result<Vec<_>, _>>()
        .map(|v| v.concat())
}

fn geometry_from_args(a: &GeometryArgs) -> Result<(RunConfig, PathBuf), Error> {
    let mut cfg = load_config(&a.common)?;
    if let Some(k) = a.k {
        cfg.k = k;
    }
    if let Some(d) = a.d {
        cfg.d = d;
    }
    if let Some(kind) = &a.kind {
        cfg.geometry = match kind.as_str() {
            "etf" => GeometrySpec::Etf,
            "minority_angle" => GeometrySpec::MinorityAngle {
                minority: parse_index_list(a.minority.as_deref().unwrap_or(""))?,
                cos_min_min: a
                    .cos_min_min
                    .ok_or_else(|| Error::Config("--cos-min-min is required".into()))?,
                cos_rest: a.cos_rest.ok_or_else(|| Error::Config("--cos-rest is required".into()))?,
            },
            "majority_collapse" => GeometrySpec::MajorityCollapse {
                majority: parse_index_list(
                    a.majority
                        .as_deref()
                        .ok_or_else(|| Error::Config("--majority is required".into()))?,
                )?,
            },
            "gram_target" => {
                let path = a.gram.as_ref().ok_or_else(|| Error::Config("--gram is required".into()))?;
                GeometrySpec::GramTarget(io::read_gram_csv(path).map_err(|e| Error::Config(e.to_string()))?)
            }
            other => return Err(Error::Config(format!("unknown geometry kind {other:?}"))),
        };
    }
    let dir = out_dir(&cfg);
    Ok((cfg, dir))
}

pub fn cmd_geometry(a: &GeometryArgs) -> i32 {
    let (cfg, dir) = match geometry_from_args(a) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return error_exit(&e);
        }
    };
    // only k, d and the geometry are used here
    let protos = match cfg.geometry.build(cfg.k, cfg.d, cfg.seed_geometry) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return error_exit(&e);
        }
    };
    let write = || -> Result<(), Error> {
        ensure_dir(&dir)?;
        fs::write(dir.join("prototypes.csv"), io::prototypes_to_csv(&protos))?;
        io::write_gram_csv(&dir.join("gram.csv"), &protos.gram())?;
        Ok(())
    };
    match write() {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAIL
        }
    }
}

pub fn cmd_limitgap(common: &Common) -> i32 {
    let cfg = match load_config(common) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return error_exit(&e);
        }
    };
    let result = (|| -> Result<Vec<(usize, f64)>, Error> {
        let dist = round_robin(cfg.batch_size, cfg.k)?;
        let emb = init_embeddings(&dist, cfg.d, cfg.seed_init)?;
        let protos = cfg.geometry.build(cfg.k, cfg.d, cfg.seed_geometry)?;
        let params = LossParams::new(cfg.tau)?;
        limit_gap(&emb, &protos, &BatchPlan::full(&emb, 0), &params, &cfg.limitgap_sweep)
    })();
    let gaps = match result {
        Ok(g) => g,
        Err(e) => {
            eprintln!("error: {e}");
            return error_exit(&e);
        }
    };
    let mut text = String::from("n_w,gap\n");
    for (n_w, gap) in &gaps {
        text.push_str(&format!("{n_w},{}\n", io::fmt_sig9(*gap)));
        println!("n_w={n_w} gap={gap:.6e}");
    }
    let dir = out_dir(&cfg);
    if let Err(e) = ensure_dir(&dir).and_then(|_| Ok(fs::write(dir.join("limitgap.csv"), text)?)) {
        eprintln!("error: {e}");
        return EXIT_FAIL;
    }
    match gaps.last() {
        Some(&(_, gap)) if gap < LIMITGAP_THRESHOLD => EXIT_OK,
        _ => EXIT_FAIL,
    }
}

pub fn cmd_analyze(a: &AnalyzeArgs) -> i32 {
    let cfg = match load_config(&a.common) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return error_exit(&e);
        }
    };
    let dir = out_dir(&cfg);
    let path = a.embeddings.clone().unwrap_or_else(|| dir.join("embeddings.csv"));
    let result = (|| -> Result<String, Error> {
        let emb = io::read_embeddings_csv(&path)?;
        if emb.dim() != cfg.d || emb.class_count() != cfg.k {
            return Err(Error::Config(format!(
                "embeddings are d = {}, k = {} but the config says d = {}, k = {}",
                emb.dim(),
                emb.class_count(),
                cfg.d,
                cfg.k
            )));
        }
        let protos = cfg.geometry.build(cfg.k, cfg.d, cfg.seed_geometry)?;
        let delta = geometry_delta_with(&emb, &protos.gram(), cfg.normalize_means)?;
        let align = alignment(&emb, &protos)?;
        let spread = within_class_spread(&emb)?;
        Ok(format!(
            "delta,alignment,spread\n{},{},{}\n",
            io::fmt_sig9(delta),
            io::fmt_sig9(align),
            io::fmt_sig9(spread)
        ))
    })();
    match result {
        Ok(text) => {
            print!("{text}");
            if let Err(e) = ensure_dir(&dir).and_then(|_| Ok(fs::write(dir.join("analysis.csv"), &text)?)) {
                eprintln!("error: {e}");
                return EXIT_FAIL;
            }
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            error_exit(&e)
        }
    }
}
