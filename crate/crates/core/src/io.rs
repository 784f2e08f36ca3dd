//! Plain-text and raster output formats.
//!
//! * Gram CSV: `k` rows of `k` comma-separated decimals, no header.
//! * Embeddings CSV: `d,N,k` header, then `label,x_1,...,x_d` per sample.
//! * Metrics CSV: `epoch,loss,delta,alignment,spread` header, one row per epoch.
//! * Heatmap: binary PGM (`P5`), 32x32 pixel cells, `[-1, 1]` mapped to `[0, 255]`.
//!
//! Decimals carry 9 significant digits.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;

use crate::analysis::MetricsRecord;
use crate::data::EmbeddingSet;
use crate::error::{Error, Result};
use crate::geometry::{GramMatrix, PrototypeSet};

pub const METRICS_HEADER: &str = "epoch,loss,delta,alignment,spread";
pub const HEATMAP_CELL: usize = 32;

/// Decimal rendering with 9 significant digits.
pub fn fmt_sig9(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x.is_nan() { "NaN".into() } else if x == 0.0 { "0".into() } else { format!("{x}") };
    }
    // exponent after rounding to 9 digits, so 0.9999999999 renders as 1.00000000
    let sci = format!("{x:.8e}");
    let exponent: i32 = sci[sci.find('e').unwrap() + 1..].parse().unwrap();
    if !(-12..=15).contains(&exponent) {
        return sci;
    }
    let decimals = (8 - exponent).max(0) as usize;
    format!("{x:.decimals$}")
}

fn join_row(values: impl Iterator<Item = f64>) -> String {
    values.map(fmt_sig9).collect::<Vec<_>>().join(",")
}

pub fn gram_to_csv(g: &GramMatrix) -> String {
    let k = g.size();
    let mut s = String::new();
    for i in 0..k {
        s.push_str(&join_row((0..k).map(|j| g.get(i, j))));
        s.push('\n');
    }
    s
}

pub fn write_gram_csv(path: &Path, g: &GramMatrix) -> Result<()> {
    fs::write(path, gram_to_csv(g))?;
    Ok(())
}

fn parse_f64(tok: &str, line: usize) -> Result<f64> {
    tok.trim()
        .parse()
        .map_err(|_| Error::Parse(format!("line {line}: bad number {tok:?}")))
}

pub fn parse_gram_csv(text: &str) -> Result<GramMatrix> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| l.split(',').map(|t| parse_f64(t, i + 1)).collect())
        .collect::<Result<_>>()?;
    let k = rows.len();
    if k == 0 || rows.iter().any(|r| r.len() != k) {
        return Err(Error::Parse(format!("Gram CSV must be square, got {k} rows")));
    }
    GramMatrix::new(DMatrix::from_fn(k, k, |i, j| rows[i][j]))
}

pub fn read_gram_csv(path: &Path) -> Result<GramMatrix> {
    parse_gram_csv(&fs::read_to_string(path)?)
}

/// One line per prototype, `d` comma-separated coordinates.
pub fn prototypes_to_csv(p: &PrototypeSet) -> String {
    (0..p.class_count())
        .map(|c| join_row(p.column(c).iter().copied()) + "\n")
        .collect()
}

pub fn embeddings_to_csv(e: &EmbeddingSet) -> String {
    let mut s = format!("{},{},{}\n", e.dim(), e.len(), e.class_count());
    for (i, &y) in e.labels().iter().enumerate() {
        s.push_str(&y.to_string());
        for &v in e.column(i) {
            s.push(',');
            s.push_str(&fmt_sig9(v));
        }
        s.push('\n');
    }
    s
}

pub fn write_embeddings_csv(path: &Path, e: &EmbeddingSet) -> Result<()> {
    fs::write(path, embeddings_to_csv(e))?;
    Ok(())
}

/// Columns are renormalized after parsing, since 9-digit rounding leaves
/// norm errors near the embedding tolerance.
pub fn parse_embeddings_csv(text: &str) -> Result<EmbeddingSet> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| Error::Parse("empty embeddings file".into()))?;
    let dims: Vec<usize> = header
        .split(',')
        .map(|t| t.trim().parse().map_err(|_| Error::Parse(format!("bad header {header:?}"))))
        .collect::<Result<_>>()?;
    let [d, n, k] = dims[..] else {
        return Err(Error::Parse(format!("header must be d,N,k, got {header:?}")));
    };
    let mut vectors = DMatrix::zeros(d, n);
    let mut labels = Vec::with_capacity(n);
    for (col, (lineno, line)) in lines.enumerate() {
        if col >= n {
            return Err(Error::Parse(format!("more than {n} sample rows")));
        }
        let mut toks = line.split(',');
        let label = toks
            .next()
            .and_then(|t| t.trim().parse::<usize>().ok())
            .ok_or_else(|| Error::Parse(format!("line {}: bad label", lineno + 1)))?;
        labels.push(label);
        let coords: Vec<f64> = toks.map(|t| parse_f64(t, lineno + 1)).collect::<Result<_>>()?;
        if coords.len() != d {
            return Err(Error::Parse(format!("line {}: expected {d} coordinates", lineno + 1)));
        }
        let norm = coords.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) {
            return Err(Error::Parse(format!("line {}: zero vector", lineno + 1)));
        }
        for (r, v) in coords.iter().enumerate() {
            vectors[(r, col)] = v / norm;
        }
    }
    if labels.len() != n {
        return Err(Error::Parse(format!("expected {n} sample rows, got {}", labels.len())));
    }
    EmbeddingSet::new(vectors, labels, k)
}

pub fn read_embeddings_csv(path: &Path) -> Result<EmbeddingSet> {
    parse_embeddings_csv(&fs::read_to_string(path)?)
}

pub fn metrics_to_csv(history: &[MetricsRecord]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in history {
        s.push_str(&format!(
            "{},{}\n",
            r.epoch,
            join_row([r.loss, r.delta, r.alignment, r.spread].into_iter())
        ));
    }
    s
}

pub fn write_metrics_csv(path: &Path, history: &[MetricsRecord]) -> Result<()> {
    fs::write(path, metrics_to_csv(history))?;
    Ok(())
}

/// Grayscale raster of a Gram matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeatmapImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl HeatmapImage {
    pub fn render(g: &GramMatrix) -> Self {
        let k = g.size();
        let side = k * HEATMAP_CELL;
        let mut pixels = vec![0u8; side * side];
        for y in 0..side {
            for x in 0..side {
                pixels[y * side + x] = gray(g.get(y / HEATMAP_CELL, x / HEATMAP_CELL));
            }
        }
        Self {
            width: side,
            height: side,
            pixels,
        }
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}

fn gray(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 0.5 * 255.0).round() as u8
}

pub fn write_pgm(path: &Path, g: &GramMatrix) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&HeatmapImage::render(g).to_pgm())?;
    Ok(())
}
