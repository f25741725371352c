//! Analyses over trained models: per-dimension geometry census of the Möbius
//! heads, attention sparsity, Möbius flow export, and a CSV reader that
//! recovers emitted numbers bit-exactly.
//!
//! Floats are written with Rust's shortest round-trip formatting, so parsing
//! an emitted file gives back the same bits.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::attention::HeadKind;
use crate::complex::ExtendedComplex as C;
use crate::error::{Error, Result};
use crate::geometry::{
    characteristic_constant, classify, classify_tau, flow_trajectory, normalize_det, squared_trace,
    stereographic_project, GeometryClass, MobiusParams,
};
use crate::model::Model;
use crate::tensor::Tensor;

/// Default cut-off below which an attention weight counts as "zero".
pub const SPARSITY_THRESHOLD: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct CensusRow {
    pub layer: usize,
    pub head: usize,
    pub dim: usize,
    pub class: GeometryClass,
    pub tau: C,
    /// Characteristic constant; `1` for maps with a single fixed point.
    pub k: C,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeometryCensus {
    pub tol: f64,
    pub rows: Vec<CensusRow>,
}

pub const CENSUS_HEADER: &str = "layer,head,dim,class,tau_re,tau_im,k_mag,k_arg";

/// Classifies every per-dimension map of every Möbius head in `model`.
pub fn geometry_census(model: &Model, tol: f64) -> Result<GeometryCensus> {
    let heads = model.mobius_heads()?;
    if heads.is_empty() {
        return Err(Error::NoMobiusLayers);
    }
    let mut rows = Vec::new();
    for (layer, head, params) in heads {
        for (dim, m) in params.maps()?.iter().enumerate() {
            rows.push(census_row(layer, head, dim, m, tol)?);
        }
    }
    Ok(GeometryCensus { tol, rows })
}

pub fn census_row(layer: usize, head: usize, dim: usize, m: &MobiusParams, tol: f64) -> Result<CensusRow> {
    let tau = squared_trace(&normalize_det(m)?);
    let class = classify(m, tol)?;
    let k = match class {
        GeometryClass::Identity | GeometryClass::Parabolic => C::real(1.0)?,
        _ => characteristic_constant(m).or_else(|_| C::real(1.0))?,
    };
    Ok(CensusRow { layer, head, dim, class, tau, k })
}

impl GeometryCensus {
    pub fn csv(&self) -> String {
        let mut s = format!("# census_tol={}\n{CENSUS_HEADER}\n", self.tol);
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.layer,
                r.head,
                r.dim,
                r.class,
                r.tau.re(),
                r.tau.im(),
                r.k.abs(),
                r.k.arg()
            );
        }
        s
    }

    /// Counts per (layer, class).
    pub fn counts(&self) -> BTreeMap<(usize, GeometryClass), usize> {
        let mut out = BTreeMap::new();
        for r in &self.rows {
            *out.entry((r.layer, r.class)).or_insert(0) += 1;
        }
        out
    }

    pub fn table(&self) -> String {
        let counts = self.counts();
        let mut layers: Vec<usize> = self.rows.iter().map(|r| r.layer).collect();
        layers.dedup();
        let mut s = String::from("layer");
        for c in GeometryClass::ALL {
            let _ = write!(s, ",{c}");
        }
        s.push('\n');
        for l in layers {
            let _ = write!(s, "{l}");
            for c in GeometryClass::ALL {
                let _ = write!(s, ",{}", counts.get(&(l, c)).unwrap_or(&0));
            }
            s.push('\n');
        }
        s
    }

    pub fn distinct_classes(&self) -> usize {
        let mut v: Vec<_> = self.rows.iter().map(|r| r.class).collect();
        v.sort();
        v.dedup();
        v.len()
    }

    /// Re-derives each class from its stored τ. `Identity` needs the full
    /// matrix, so it is accepted wherever τ alone says `Parabolic`.
    pub fn consistent(&self) -> bool {
        self.rows.iter().all(|r| {
            let from_tau = classify_tau(r.tau, self.tol);
            from_tau == r.class || (r.class == GeometryClass::Identity && from_tau == GeometryClass::Parabolic)
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparsityRow {
    pub layer: usize,
    pub head: usize,
    pub kind: HeadKind,
    pub zero_frac: f64,
    /// Mean entropy (nats) of the attention rows.
    pub entropy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub layer: usize,
    pub head: usize,
    pub kind: HeadKind,
    /// Attention matrix of the first sequence in the batch, `[n, n]`.
    pub weights: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparsityReport {
    pub threshold: f64,
    pub batch: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub rows: Vec<SparsityRow>,
    pub heatmaps: Vec<Heatmap>,
}

pub const SPARSITY_HEADER: &str = "layer,head,kind,zero_frac,entropy";

/// Runs a capturing forward pass over `ids` (`batch × n`) and summarizes
/// every head's post-softmax weights. `seed` only labels the report header.
pub fn sparsity(model: &Model, ids: &[usize], batch: usize, n: usize, threshold: f64, seed: u64) -> Result<SparsityReport> {
    let (_, captured) = model.forward_capture(ids, batch, n)?;
    let mut rows = Vec::new();
    let mut heatmaps = Vec::new();
    for cap in captured {
        let w = cap.weights.data();
        let zero = w.iter().filter(|&&x| x < threshold).count() as f64 / w.len() as f64;
        let k = cap.weights.last_dim();
        let ents: Vec<f64> = w
            .chunks(k)
            .map(|r| -r.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>())
            .collect();
        let entropy = ents.iter().sum::<f64>() / ents.len() as f64;
        rows.push(SparsityRow { layer: cap.layer, head: cap.head, kind: cap.kind, zero_frac: zero, entropy });
        heatmaps.push(Heatmap {
            layer: cap.layer,
            head: cap.head,
            kind: cap.kind,
            weights: Tensor::new(&[n, k], w[..n * k].to_vec())?,
        });
    }
    Ok(SparsityReport { threshold, batch, seq_len: n, seed, rows, heatmaps })
}

impl SparsityReport {
    pub fn csv(&self) -> String {
        let mut s = format!(
            "# threshold={} eval_batch={} seq_len={} seed={}\n{SPARSITY_HEADER}\n",
            self.threshold, self.batch, self.seq_len, self.seed
        );
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.layer, r.head, r.kind.name(), r.zero_frac, r.entropy);
        }
        s
    }

    /// Mean zero fraction over heads of `kind`, restricted to layers that
    /// contain at least one Möbius head so both kinds are compared like for
    /// like. `None` if there are no such heads.
    pub fn mean_zero_frac(&self, kind: HeadKind) -> Option<f64> {
        let mobius_layers: Vec<usize> =
            self.rows.iter().filter(|r| r.kind == HeadKind::Mobius).map(|r| r.layer).collect();
        let sel: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.kind == kind && mobius_layers.contains(&r.layer))
            .map(|r| r.zero_frac)
            .collect();
        (!sel.is_empty()).then(|| sel.iter().sum::<f64>() / sel.len() as f64)
    }
}

impl Heatmap {
    pub fn file_name(&self) -> String {
        format!("attn_l{}_h{}_{}.csv", self.layer, self.head, self.kind.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowRow {
    pub step: usize,
    pub z: C,
    pub sphere: [f64; 3],
}

pub const FLOW_HEADER: &str = "step,re,im,sx,sy,sw";

pub fn flow(m: &MobiusParams, z0: C, steps: usize) -> Result<Vec<FlowRow>> {
    Ok(flow_trajectory(m, z0, steps)?
        .into_iter()
        .enumerate()
        .map(|(step, z)| FlowRow { step, z, sphere: stereographic_project(z) })
        .collect())
}

/// `∞` is written as `inf,inf` in the planar columns.
pub fn flow_csv(rows: &[FlowRow]) -> String {
    let mut s = format!("{FLOW_HEADER}\n");
    for r in rows {
        let (re, im) = if r.z.is_infinity() { (f64::INFINITY, f64::INFINITY) } else { (r.z.re(), r.z.im()) };
        let [x, y, w] = r.sphere;
        let _ = writeln!(s, "{},{re},{im},{x},{y},{w}", r.step);
    }
    s
}

/// Row-major matrix, one row per line, no header.
pub fn matrix_csv(t: &Tensor) -> String {
    let cols = t.last_dim();
    let mut s = String::new();
    for row in t.data().chunks(cols) {
        let line: Vec<String> = row.iter().map(|x| x.to_string()).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}

/// A parsed CSV file: leading `#` lines, the header (if requested) and the
/// remaining cells as strings.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvTable {
    pub comments: Vec<String>,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

pub fn read_csv(text: &str, has_header: bool) -> Result<CsvTable> {
    let mut comments = Vec::new();
    let mut lines = text.lines().filter(|l| !l.trim().is_empty()).peekable();
    while let Some(l) = lines.next_if(|l| l.starts_with('#')) {
        comments.push(l.trim_start_matches('#').trim().to_string());
    }
    let split = |l: &str| l.split(',').map(|c| c.trim().to_string()).collect::<Vec<_>>();
    let header = if has_header { lines.next().map(split).unwrap_or_default() } else { Vec::new() };
    let rows: Vec<Vec<String>> = lines.map(split).collect();
    let width = if has_header { header.len() } else { rows.first().map_or(0, Vec::len) };
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != width) {
        return Err(Error::Parse(format!("row {} has {} cells, expected {width}", i + 1, r.len())));
    }
    Ok(CsvTable { comments, header, rows })
}

impl CsvTable {
    pub fn column(&self, name: &str) -> Result<usize> {
        self.header.iter().position(|h| h == name).ok_or_else(|| Error::Parse(format!("no column '{name}'")))
    }

    pub fn f64s(&self, name: &str) -> Result<Vec<f64>> {
        let c = self.column(name)?;
        self.rows.iter().map(|r| parse_f64(&r[c])).collect()
    }
}

fn parse_f64(s: &str) -> Result<f64> {
    s.parse().map_err(|_| Error::Parse(format!("not a number: '{s}'")))
}

/// Reads a matrix written by [`matrix_csv`].
pub fn read_matrix(text: &str) -> Result<Tensor> {
    let t = read_csv(text, false)?;
    let cols = t.rows.first().map_or(0, Vec::len);
    let data = t.rows.iter().flatten().map(|c| parse_f64(c)).collect::<Result<Vec<_>>>()?;
    Tensor::new(&[t.rows.len(), cols], data)
}
