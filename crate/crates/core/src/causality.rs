//! Granger-causality graph over KPIs.
//!
//! For an ordered pair `(x, y)` the restricted model regresses `y_t` on an
//! intercept and `y_{t-1..t-p}`; the unrestricted model adds
//! `x_{t-1..t-p}`. An F-test on the two residual sums of squares decides
//! whether `x` helps predict `y`, and the unrestricted R² becomes the edge
//! weight.
//!
//! Both regressions are solved through their normal equations. The Gram
//! matrices are assembled from lagged dot products; the terms that only
//! involve one series are computed once per KPI and reused for every pair.

use crate::error::{Error, Result};
use crate::telemetry::Series;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor};
use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

const RIDGE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrangerConfig {
    pub lag: usize,
    pub alpha: f64,
}

impl Default for GrangerConfig {
    fn default() -> Self {
        Self { lag: 5, alpha: 0.01 }
    }
}

impl GrangerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lag == 0 {
            return Err(Error::Parameter("Granger lag order must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Parameter(format!(
                "significance level must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        Ok(())
    }

    /// Shortest series on which a test can run.
    pub fn min_length(&self) -> usize {
        3 * self.lag + 2
    }
}

/// Full outcome of one pairwise test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrangerOutcome {
    pub rss_restricted: f64,
    pub rss_unrestricted: f64,
    pub f_statistic: f64,
    pub p_value: f64,
    /// Unrestricted R², clamped to [0, 1]; `None` when `y` has no variance.
    pub r_squared: Option<f64>,
    pub rejected: bool,
}

impl GrangerOutcome {
    pub fn weight(&self) -> Option<f64> {
        if self.rejected {
            self.r_squared
        } else {
            None
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Lag window `v_{t-k}` for `t` in `p..len`.
fn lagged(v: &[f64], p: usize, k: usize) -> &[f64] {
    &v[p - k..v.len() - k]
}

/// Per-series sums that every pair involving the series reuses.
struct SeriesTerms {
    /// `sum_t v_{t-k}` for k in 0..=p.
    sums: Vec<f64>,
    /// `sum_t v_{t-j} v_{t-k}` for j, k in 0..=p, row-major.
    products: Vec<f64>,
    /// Centred sum of squares of the target window.
    tss: f64,
    rss_restricted: Option<f64>,
}

impl SeriesTerms {
    fn new(v: &[f64], p: usize) -> Self {
        let w = p + 1;
        let sums: Vec<f64> = (0..w).map(|k| lagged(v, p, k).iter().sum()).collect();
        let mut products = vec![0.0; w * w];
        for j in 0..w {
            for k in 0..=j {
                let s = dot(lagged(v, p, j), lagged(v, p, k));
                products[j * w + k] = s;
                products[k * w + j] = s;
            }
        }
        let target = lagged(v, p, 0);
        let mean = sums[0] / target.len() as f64;
        let tss = target.iter().map(|t| (t - mean) * (t - mean)).sum();
        let mut terms = Self { sums, products, tss, rss_restricted: None };
        terms.rss_restricted = terms.restricted_rss(p, target.len());
        terms
    }

    fn product(&self, p: usize, j: usize, k: usize) -> f64 {
        self.products[j * (p + 1) + k]
    }

    fn restricted_rss(&self, p: usize, rows: usize) -> Option<f64> {
        let k = p + 1;
        let mut gram = vec![0.0; k * k];
        let mut rhs = vec![0.0; k];
        gram[0] = rows as f64;
        rhs[0] = self.sums[0];
        for a in 1..=p {
            gram[a] = self.sums[a];
            gram[a * k] = self.sums[a];
            rhs[a] = self.product(p, a, 0);
            for b in 1..=p {
                gram[a * k + b] = self.product(p, a, b);
            }
        }
        rss_from_normal_equations(&gram, &rhs, self.product(p, 0, 0))
    }
}

/// Solves `(G + ridge I) beta = r` by Cholesky; `None` if not positive
/// definite.
fn cholesky_solve(gram: &[f64], rhs: &[f64]) -> Option<Vec<f64>> {
    let k = rhs.len();
    let mut l = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..=i {
            let mut s = gram[i * k + j] + if i == j { RIDGE } else { 0.0 };
            for m in 0..j {
                s -= l[i * k + m] * l[j * k + m];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return None;
                }
                l[i * k + i] = s.sqrt();
            } else {
                l[i * k + j] = s / l[j * k + j];
            }
        }
    }
    let mut z = vec![0.0; k];
    for i in 0..k {
        let s: f64 = (0..i).map(|m| l[i * k + m] * z[m]).sum();
        z[i] = (rhs[i] - s) / l[i * k + i];
    }
    let mut beta = vec![0.0; k];
    for i in (0..k).rev() {
        let s: f64 = (i + 1..k).map(|m| l[m * k + i] * beta[m]).sum();
        beta[i] = (z[i] - s) / l[i * k + i];
    }
    Some(beta)
}

/// Residual sum of squares `y'y - 2 b'X'y + b'X'Xb` for the ridge solution.
fn rss_from_normal_equations(gram: &[f64], rhs: &[f64], yy: f64) -> Option<f64> {
    let beta = cholesky_solve(gram, rhs)?;
    let k = rhs.len();
    let mut quad = 0.0;
    for i in 0..k {
        let row: f64 = (0..k).map(|j| gram[i * k + j] * beta[j]).sum();
        quad += beta[i] * row;
    }
    let cross: f64 = beta.iter().zip(rhs).map(|(b, r)| b * r).sum();
    let rss = yy - 2.0 * cross + quad;
    rss.is_finite().then_some(rss.max(0.0))
}

fn test_with_terms(
    x: &[f64],
    y: &[f64],
    tx: &SeriesTerms,
    ty: &SeriesTerms,
    cfg: &GrangerConfig,
) -> Result<GrangerOutcome> {
    let p = cfg.lag;
    let rows = y.len() - p;
    let k = 2 * p + 1;
    let mut gram = vec![0.0; k * k];
    let mut rhs = vec![0.0; k];
    gram[0] = rows as f64;
    rhs[0] = ty.sums[0];
    for a in 1..=p {
        gram[a] = ty.sums[a];
        gram[a * k] = ty.sums[a];
        gram[p + a] = tx.sums[a];
        gram[(p + a) * k] = tx.sums[a];
        rhs[a] = ty.product(p, a, 0);
        rhs[p + a] = dot(lagged(x, p, a), lagged(y, p, 0));
        for b in 1..=p {
            gram[a * k + b] = ty.product(p, a, b);
            gram[(p + a) * k + (p + b)] = tx.product(p, a, b);
            let c = dot(lagged(x, p, a), lagged(y, p, b));
            gram[(p + a) * k + b] = c;
            gram[b * k + (p + a)] = c;
        }
    }
    let rss_r = ty
        .rss_restricted
        .ok_or_else(|| Error::Numeric("restricted design matrix is singular".into()))?;
    let rss_u = rss_from_normal_equations(&gram, &rhs, ty.product(p, 0, 0))
        .ok_or_else(|| Error::Numeric("unrestricted design matrix is singular".into()))?
        .min(rss_r);
    Ok(f_test(rss_r, rss_u, ty.tss, rows, cfg))
}

fn f_test(rss_r: f64, rss_u: f64, tss: f64, rows: usize, cfg: &GrangerConfig) -> GrangerOutcome {
    let p = cfg.lag as f64;
    let dof = (rows - 2 * cfg.lag - 1) as f64;
    // A target without variance carries nothing to explain.
    let flat = !(tss > 1e-12 * rows as f64);
    let (f_statistic, p_value) = if flat || rss_r <= rss_u {
        (0.0, 1.0)
    } else if rss_u <= 0.0 {
        (f64::INFINITY, 0.0)
    } else {
        let f = ((rss_r - rss_u) / p) / (rss_u / dof);
        let dist = FisherSnedecor::new(p, dof).expect("positive degrees of freedom");
        (f, dist.sf(f))
    };
    let r_squared = (!flat).then(|| (1.0 - rss_u / tss).clamp(0.0, 1.0));
    GrangerOutcome {
        rss_restricted: rss_r,
        rss_unrestricted: rss_u,
        f_statistic,
        p_value,
        r_squared,
        rejected: !flat && p_value < cfg.alpha,
    }
}

fn check_pair(x: &[f64], y: &[f64], cfg: &GrangerConfig) -> Result<()> {
    cfg.validate()?;
    if x.len() != y.len() {
        return Err(Error::Precondition(format!(
            "series lengths differ: {} and {}",
            x.len(),
            y.len()
        )));
    }
    if y.len() < cfg.min_length() {
        return Err(Error::Precondition(format!(
            "series of length {} is too short for lag {} (need more than {})",
            y.len(),
            cfg.lag,
            3 * cfg.lag + 1
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("series contains non-finite values".into()));
    }
    Ok(())
}

/// Tests whether `x` Granger-causes `y`, returning all test statistics.
pub fn granger_outcome(x: &[f64], y: &[f64], cfg: &GrangerConfig) -> Result<GrangerOutcome> {
    check_pair(x, y, cfg)?;
    let tx = SeriesTerms::new(x, cfg.lag);
    let ty = SeriesTerms::new(y, cfg.lag);
    test_with_terms(x, y, &tx, &ty, cfg)
}

/// Edge weight `x -> y` if the test rejects the null, else `None`.
pub fn granger_test(x: &[f64], y: &[f64], cfg: &GrangerConfig) -> Result<Option<f64>> {
    Ok(granger_outcome(x, y, cfg)?.weight())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub weight: f64,
}

/// Directed graph over KPI indices. Edges are kept sorted by `(from, to)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CausalityGraph {
    nodes: BTreeSet<usize>,
    edges: BTreeMap<(usize, usize), f64>,
}

impl CausalityGraph {
    pub fn with_nodes(nodes: impl IntoIterator<Item = usize>) -> Self {
        Self { nodes: nodes.into_iter().collect(), edges: BTreeMap::new() }
    }

    pub fn add_edge(&mut self, from: usize, to: usize, weight: f64) -> Result<()> {
        if from == to {
            return Err(Error::Schema(format!("self-edge on node {from}")));
        }
        if !self.nodes.contains(&from) || !self.nodes.contains(&to) {
            return Err(Error::Schema(format!("edge {from}->{to} touches an unknown node")));
        }
        if !(0.0..=1.0).contains(&weight) {
            return Err(Error::Range(format!("edge weight {weight} outside [0, 1]")));
        }
        if self.edges.insert((from, to), weight).is_some() {
            return Err(Error::Schema(format!("duplicate edge {from}->{to}")));
        }
        Ok(())
    }

    pub fn nodes(&self) -> impl Iterator<Item = usize> + '_ {
        self.nodes.iter().copied()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn contains_node(&self, node: usize) -> bool {
        self.nodes.contains(&node)
    }

    pub fn edges(&self) -> impl Iterator<Item = Edge> + '_ {
        self.edges.iter().map(|(&(from, to), &weight)| Edge { from, to, weight })
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn weight(&self, from: usize, to: usize) -> Option<f64> {
        self.edges.get(&(from, to)).copied()
    }
}

/// A pair whose test could not be computed while building the baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct SkippedPair {
    pub from: usize,
    pub to: usize,
    pub reason: String,
}

/// Tests every ordered KPI pair of `train` and keeps the rejections.
pub fn build_baseline_graph(train: &Series, cfg: &GrangerConfig) -> Result<(CausalityGraph, Vec<SkippedPair>)> {
    cfg.validate()?;
    if train.len() < cfg.min_length() {
        return Err(Error::Precondition(format!(
            "training series has {} snapshots, lag {} needs more than {}",
            train.len(),
            cfg.lag,
            3 * cfg.lag + 1
        )));
    }
    let n = train.width();
    let columns: Vec<Vec<f64>> = (0..n).map(|i| train.column(i)).collect();
    if let Some(i) = columns.iter().position(|c| c.iter().any(|v| !v.is_finite())) {
        return Err(Error::Numeric(format!("KPI column {i} contains non-finite values")));
    }
    let terms: Vec<SeriesTerms> = columns.par_iter().map(|c| SeriesTerms::new(c, cfg.lag)).collect();
    let results: Vec<Vec<(usize, usize, Result<GrangerOutcome>)>> = (0..n)
        .into_par_iter()
        .map(|to| {
            (0..n)
                .filter(|&from| from != to)
                .map(|from| {
                    let r = test_with_terms(&columns[from], &columns[to], &terms[from], &terms[to], cfg);
                    (from, to, r)
                })
                .collect()
        })
        .collect();

    let mut graph = CausalityGraph::with_nodes(0..n);
    let mut skipped = Vec::new();
    for (from, to, r) in results.into_iter().flatten() {
        match r {
            Ok(outcome) => {
                if let Some(w) = outcome.weight() {
                    graph.add_edge(from, to, w)?;
                }
            }
            Err(e) => skipped.push(SkippedPair { from, to, reason: e.to_string() }),
        }
    }
    Ok((graph, skipped))
}

/// Subgraph induced by `anomalous`.
pub fn prune_graph(baseline: &CausalityGraph, anomalous: &BTreeSet<usize>) -> Result<CausalityGraph> {
    if let Some(bad) = anomalous.iter().find(|i| !baseline.contains_node(**i)) {
        return Err(Error::Schema(format!("KPI index {bad} is not in the baseline graph")));
    }
    let edges = baseline
        .edges
        .iter()
        .filter(|((f, t), _)| anomalous.contains(f) && anomalous.contains(t))
        .map(|(k, w)| (*k, *w))
        .collect();
    Ok(CausalityGraph { nodes: anomalous.clone(), edges })
}

/// Writes a baseline graph covering nodes `0..n`, tagged with the catalog
/// hash.
pub fn write_graph(graph: &CausalityGraph, catalog_hash: &str, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let n = graph.node_count();
    if !graph.nodes().eq(0..n) {
        return Err(Error::Contract("only graphs over the full KPI range 0..n can be written".into()));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut body = format!("# catalog={catalog_hash} nodes={n}\nfrom_index,to_index,weight\n");
    for e in graph.edges() {
        body.push_str(&format!("{},{},{}\n", e.from, e.to, e.weight));
    }
    out.write_all(body.as_bytes()).and_then(|_| out.flush()).map_err(|e| Error::io(path, e))
}

/// Reads a graph written by [`write_graph`]. When `expected_hash` is given
/// the stored hash must match it.
pub fn read_graph(path: impl AsRef<Path>, expected_hash: Option<&str>) -> Result<(CausalityGraph, String)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let mut next = |what: &str| -> Result<(usize, String)> {
        match lines.next() {
            Some((i, Ok(l))) => Ok((i + 1, l)),
            Some((_, Err(e))) => Err(Error::io(path, e)),
            None => Err(Error::Parse { line: 0, message: format!("missing {what}") }),
        }
    };
    let (_, meta) = next("graph metadata line")?;
    let parse_meta = || -> Option<(String, usize)> {
        let rest = meta.strip_prefix("# ")?;
        let mut hash = None;
        let mut nodes = None;
        for field in rest.split_whitespace() {
            match field.split_once('=')? {
                ("catalog", h) => hash = Some(h.to_string()),
                ("nodes", n) => nodes = n.parse().ok(),
                _ => return None,
            }
        }
        Some((hash?, nodes?))
    };
    let (hash, n) = parse_meta().ok_or_else(|| Error::Parse {
        line: 1,
        message: format!("expected '# catalog=<hash> nodes=<count>', got {meta:?}"),
    })?;
    if let Some(expected) = expected_hash {
        if expected != hash {
            return Err(Error::Compatibility(format!(
                "graph was built for catalog {hash}, expected {expected}"
            )));
        }
    }
    let (_, header) = next("column header")?;
    if header.trim() != "from_index,to_index,weight" {
        return Err(Error::Parse { line: 2, message: format!("unexpected header {header:?}") });
    }
    let mut graph = CausalityGraph::with_nodes(0..n);
    while let Ok((line, text)) = next("edge") {
        if text.trim().is_empty() {
            continue;
        }
        let bad = |m: String| Error::Parse { line, message: m };
        let fields: Vec<&str> = text.split(',').collect();
        if fields.len() != 3 {
            return Err(bad(format!("expected 3 fields, got {}", fields.len())));
        }
        let from: usize = fields[0].trim().parse().map_err(|_| bad(format!("bad index {:?}", fields[0])))?;
        let to: usize = fields[1].trim().parse().map_err(|_| bad(format!("bad index {:?}", fields[1])))?;
        let w: f64 = fields[2].trim().parse().map_err(|_| bad(format!("bad weight {:?}", fields[2])))?;
        graph.add_edge(from, to, w).map_err(|e| bad(e.to_string()))?;
    }
    Ok((graph, hash))
}
