//! Experiment configuration: flat `key = value` text, one entry per line,
//! `#` starts a comment. Geometry parameters use dotted keys.
//!
//! ```text
//! k = 4
//! d = 8
//! loss = scl_proto
//! n_w = 8
//! geometry.kind = minority_angle
//! geometry.minority = 2,3
//! geometry.cos_min_min = -0.9
//! geometry.cos_rest = -0.1
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geometry::GeometrySpec;
use crate::io::read_gram_csv;
use crate::loss::LossKind;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub k: usize,
    pub d: usize,
    pub n_maj: usize,
    pub ratio: usize,
    pub batch_size: usize,
    pub n_w: usize,
    pub loss: LossKind,
    pub geometry: GeometrySpec,
    /// Source path of a `gram_target` geometry, echoed verbatim.
    pub gram_file: Option<PathBuf>,
    pub tau: f64,
    pub lr: f64,
    pub anneal_epochs: Vec<usize>,
    pub anneal_factor: f64,
    pub epochs: usize,
    pub momentum: f64,
    pub seed_geometry: u64,
    pub seed_init: u64,
    pub seed_batch: u64,
    pub bind_classes: bool,
    pub normalize_means: bool,
    pub limitgap_sweep: Vec<usize>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            k: 4,
            d: 8,
            n_maj: 50,
            ratio: 10,
            batch_size: 16,
            n_w: 0,
            loss: LossKind::Limit,
            geometry: GeometrySpec::Etf,
            gram_file: None,
            tau: 0.1,
            lr: 0.1,
            anneal_epochs: Vec::new(),
            anneal_factor: 0.1,
            epochs: 300,
            momentum: 0.0,
            seed_geometry: 0,
            seed_init: 1,
            seed_batch: 2,
            bind_classes: false,
            normalize_means: false,
            limitgap_sweep: vec![10, 100, 1000, 10_000],
            out: None,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse {key} = {value:?}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_value(key, v.trim())).collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("cannot parse {key} = {value:?} as a flag"))),
    }
}

fn join(list: &[usize]) -> String {
    list.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

/// Split config text into an ordered key/value map.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
        let key = key.trim().to_string();
        if map.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key {key}", lineno + 1)));
        }
    }
    Ok(map)
}

impl RunConfig {
    /// Parse config text. Relative `geometry.gram_file` paths resolve
    /// against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut pairs = parse_pairs(text)?;
        let mut cfg = RunConfig::default();

        let base_seed: Option<u64> = pairs.remove("seed").map(|v| parse_value("seed", &v)).transpose()?;
        if let Some(s) = base_seed {
            cfg.set_seed(s);
        }

        let kind = pairs.remove("geometry.kind").unwrap_or_else(|| "etf".to_string());
        let minority = pairs.remove("geometry.minority");
        let majority = pairs.remove("geometry.majority");
        let cos_min_min = pairs.remove("geometry.cos_min_min");
        let cos_rest = pairs.remove("geometry.cos_rest");
        let gram_file = pairs.remove("geometry.gram_file");

        for (key, value) in &pairs {
            let v = value.as_str();
            match key.as_str() {
                "k" => cfg.k = parse_value(key, v)?,
                "d" => cfg.d = parse_value(key, v)?,
                "n_maj" => cfg.n_maj = parse_value(key, v)?,
                "ratio" => cfg.ratio = parse_value(key, v)?,
                "batch_size" => cfg.batch_size = parse_value(key, v)?,
                "n_w" => cfg.n_w = parse_value(key, v)?,
                "loss" => cfg.loss = v.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
                "tau" => cfg.tau = parse_value(key, v)?,
                "lr" => cfg.lr = parse_value(key, v)?,
                "anneal_epochs" => cfg.anneal_epochs = parse_list(key, v)?,
                "anneal_factor" => cfg.anneal_factor = parse_value(key, v)?,
                "epochs" => cfg.epochs = parse_value(key, v)?,
                "momentum" => cfg.momentum = parse_value(key, v)?,
                "seed.geometry" => cfg.seed_geometry = parse_value(key, v)?,
                "seed.init" => cfg.seed_init = parse_value(key, v)?,
                "seed.batch" => cfg.seed_batch = parse_value(key, v)?,
                "bind_classes" => cfg.bind_classes = parse_bool(key, v)?,
                "normalize_means" => cfg.normalize_means = parse_bool(key, v)?,
                "limitgap.n_w" => cfg.limitgap_sweep = parse_list(key, v)?,
                "out" => cfg.out = Some(PathBuf::from(v)),
                other => return Err(Error::Config(format!("unknown key {other:?}"))),
            }
        }

        let f64_of = |key: &str, v: &Option<String>| -> Result<f64> {
            match v {
                Some(v) => parse_value(key, v),
                None => Err(Error::Config(format!("{key} is required for geometry.kind = {kind}"))),
            }
        };
        cfg.geometry = match kind.as_str() {
            "etf" => GeometrySpec::Etf,
            "minority_angle" => GeometrySpec::MinorityAngle {
                minority: parse_list("geometry.minority", minority.as_deref().unwrap_or(""))?,
                cos_min_min: f64_of("geometry.cos_min_min", &cos_min_min)?,
                cos_rest: f64_of("geometry.cos_rest", &cos_rest)?,
            },
            "majority_collapse" => GeometrySpec::MajorityCollapse {
                majority: parse_list(
                    "geometry.majority",
                    majority
                        .as_deref()
                        .ok_or_else(|| Error::Config("geometry.majority is required".into()))?,
                )?,
            },
            "gram_target" => {
                let path = gram_file.ok_or_else(|| Error::Config("geometry.gram_file is required".into()))?;
                let path = base_dir.join(path);
                let gram = read_gram_csv(&path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                cfg.gram_file = Some(path);
                GeometrySpec::GramTarget(gram)
            }
            other => return Err(Error::Config(format!("unknown geometry.kind {other:?}"))),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::parse(&text, base)
    }

    /// Derive all three seeds from one base value.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed_geometry = seed;
        self.seed_init = seed.wrapping_add(1);
        self.seed_batch = seed.wrapping_add(2);
    }

    pub fn total_samples(&self) -> usize {
        if self.ratio == 0 {
            return 0;
        }
        (self.k / 2) * (self.n_maj + self.n_maj / self.ratio)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.k < 2 || !self.k.is_multiple_of(2) {
            return fail(format!("k must be even and >= 2, got {}", self.k));
        }
        if self.d < 1 {
            return fail("d must be >= 1".into());
        }
        if self.ratio < 1 || self.n_maj / self.ratio < 1 {
            return fail(format!("n_maj / ratio = {} / {} leaves empty minority classes", self.n_maj, self.ratio));
        }
        let n_total = self.total_samples();
        if self.batch_size < 2 || self.batch_size > n_total {
            return fail(format!("batch_size {} must be in 2..={n_total}", self.batch_size));
        }
        if self.bind_classes && self.batch_size < self.k {
            return fail(format!("bind_classes needs batch_size >= k = {}", self.k));
        }
        match self.loss {
            LossKind::Scl if self.n_w != 0 => return fail(format!("loss = scl requires n_w = 0, got {}", self.n_w)),
            LossKind::SclProto if self.n_w < 1 => return fail("loss = scl_proto requires n_w >= 1".into()),
            _ => {}
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return fail(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.anneal_factor > 0.0 && self.anneal_factor <= 1.0) {
            return fail(format!("anneal_factor must be in (0, 1], got {}", self.anneal_factor));
        }
        if self.anneal_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return fail("anneal_epochs must be strictly increasing".into());
        }
        if self.anneal_epochs.last().is_some_and(|&e| e >= self.epochs) {
            return fail("anneal_epochs must all be below epochs".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.limitgap_sweep.is_empty() || self.limitgap_sweep.contains(&0) {
            return fail("limitgap.n_w must be a nonempty list of positive values".into());
        }
        if self.limitgap_sweep.windows(2).any(|w| w[0] >= w[1]) {
            return fail("limitgap.n_w must be strictly increasing".into());
        }
        self.geometry.validate(self.k)
    }

    /// Fully resolved configuration text; parsing it reproduces `self`.
    pub fn to_echo(&self) -> String {
        let mut s = String::from("# resolved configuration\n");
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("k", self.k.to_string());
        kv("d", self.d.to_string());
        kv("n_maj", self.n_maj.to_string());
        kv("ratio", self.ratio.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("n_w", self.n_w.to_string());
        kv("loss", self.loss.to_string());
        kv("tau", format!("{:?}", self.tau));
        kv("lr", format!("{:?}", self.lr));
        kv("anneal_epochs", join(&self.anneal_epochs));
        kv("anneal_factor", format!("{:?}", self.anneal_factor));
        kv("epochs", self.epochs.to_string());
        kv("momentum", format!("{:?}", self.momentum));
        kv("seed.geometry", self.seed_geometry.to_string());
        kv("seed.init", self.seed_init.to_string());
        kv("seed.batch", self.seed_batch.to_string());
        kv("bind_classes", self.bind_classes.to_string());
        kv("normalize_means", self.normalize_means.to_string());
        kv("limitgap.n_w", join(&self.limitgap_sweep));
        if let Some(out) = &self.out {
            kv("out", out.display().to_string());
        }
        kv("geometry.kind", self.geometry.kind_name().to_string());
        match &self.geometry {
            GeometrySpec::Etf => {}
            GeometrySpec::GramTarget(_) => {
                if let Some(p) = &self.gram_file {
                    kv("geometry.gram_file", p.display().to_string());
                }
            }
            GeometrySpec::MinorityAngle {
                minority,
                cos_min_min,
                cos_rest,
            } => {
                kv("geometry.minority", join(minority));
                kv("geometry.cos_min_min", format!("{cos_min_min:?}"));
                kv("geometry.cos_rest", format!("{cos_rest:?}"));
            }
            GeometrySpec::MajorityCollapse { majority } => kv("geometry.majority", join(majority)),
        }
        s
    }
}
