//! KPI data model, trace CSV I/O and z-score normalization.
//!
//! A trace file looks like
//!
//! ```text
//! timestamp,cpu.user.pct@m0,cpu.user.pct@s0
//! 0,12.5,7.25
//! 1,13,7.5
//! ```
//!
//! Timestamps are integer minutes and must strictly increase. Missing values
//! are not supported.

use crate::error::{Error, Result};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

/// Standard deviations below this are replaced by it when normalizing.
pub const STD_FLOOR: f64 = 1e-6;

/// A `<metric, node>` pair.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Kpi {
    metric: String,
    node: String,
}

fn check_name(what: &str, name: &str) -> Result<()> {
    if name.is_empty() {
        return Err(Error::Schema(format!("{what} name is empty")));
    }
    if name.contains(['@', ',', '\n', '\r']) {
        return Err(Error::Schema(format!(
            "{what} name {name:?} contains a reserved character"
        )));
    }
    Ok(())
}

impl Kpi {
    pub fn new(metric: impl Into<String>, node: impl Into<String>) -> Result<Self> {
        let metric = metric.into();
        let node = node.into();
        check_name("metric", &metric)?;
        check_name("node", &node)?;
        Ok(Self { metric, node })
    }

    pub fn metric(&self) -> &str {
        &self.metric
    }

    pub fn node(&self) -> &str {
        &self.node
    }
}

impl fmt::Display for Kpi {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.metric, self.node)
    }
}

impl FromStr for Kpi {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (metric, node) = s
            .split_once('@')
            .ok_or_else(|| Error::Schema(format!("column {s:?} is not of the form metric@node")))?;
        Kpi::new(metric, node)
    }
}

/// Ordered, duplicate-free set of KPIs; positions are the KPI indices used
/// everywhere else.
#[derive(Debug, Clone)]
pub struct KpiCatalog {
    kpis: Vec<Kpi>,
    index: HashMap<Kpi, usize>,
}

impl PartialEq for KpiCatalog {
    fn eq(&self, other: &Self) -> bool {
        self.kpis == other.kpis
    }
}

impl Eq for KpiCatalog {}

impl KpiCatalog {
    pub fn new(kpis: Vec<Kpi>) -> Result<Self> {
        if kpis.is_empty() {
            return Err(Error::Schema("catalog must contain at least one KPI".into()));
        }
        let mut index = HashMap::with_capacity(kpis.len());
        for (i, kpi) in kpis.iter().enumerate() {
            if index.insert(kpi.clone(), i).is_some() {
                return Err(Error::Schema(format!("duplicate KPI {kpi}")));
            }
        }
        Ok(Self { kpis, index })
    }

    pub fn len(&self) -> usize {
        self.kpis.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kpis.is_empty()
    }

    pub fn kpis(&self) -> &[Kpi] {
        &self.kpis
    }

    pub fn get(&self, i: usize) -> Option<&Kpi> {
        self.kpis.get(i)
    }

    pub fn position(&self, kpi: &Kpi) -> Option<usize> {
        self.index.get(kpi).copied()
    }

    /// Distinct node ids in order of first appearance.
    pub fn nodes(&self) -> Vec<&str> {
        let mut seen = std::collections::HashSet::new();
        self.kpis
            .iter()
            .map(|k| k.node())
            .filter(|n| seen.insert(*n))
            .collect()
    }

    /// Indices of all KPIs observed on `node`.
    pub fn indices_of_node(&self, node: &str) -> Vec<usize> {
        self.kpis
            .iter()
            .enumerate()
            .filter(|(_, k)| k.node() == node)
            .map(|(i, _)| i)
            .collect()
    }

    /// Short content hash used to check that artifacts agree on the catalog.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        for kpi in &self.kpis {
            hasher.update(kpi.to_string().as_bytes());
            hasher.update(b",");
        }
        let digest = hasher.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    fn header(&self) -> String {
        let mut line = String::from("timestamp");
        for kpi in &self.kpis {
            line.push(',');
            line.push_str(&kpi.to_string());
        }
        line
    }
}

impl Serialize for KpiCatalog {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_seq(self.kpis.iter().map(|k| k.to_string()))
    }
}

impl<'de> Deserialize<'de> for KpiCatalog {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let names = Vec::<String>::deserialize(deserializer)?;
        let kpis = names
            .iter()
            .map(|n| n.parse::<Kpi>())
            .collect::<Result<Vec<_>>>()
            .map_err(serde::de::Error::custom)?;
        KpiCatalog::new(kpis).map_err(serde::de::Error::custom)
    }
}

/// KPI values observed at one minute.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub timestamp: u64,
    pub values: Vec<f64>,
}

impl Snapshot {
    pub fn new(timestamp: u64, values: Vec<f64>) -> Self {
        Self { timestamp, values }
    }
}

/// A catalog plus snapshots with strictly increasing timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    catalog: Arc<KpiCatalog>,
    snapshots: Vec<Snapshot>,
}

impl Series {
    pub fn new(catalog: Arc<KpiCatalog>, snapshots: Vec<Snapshot>) -> Result<Self> {
        let n = catalog.len();
        for (i, s) in snapshots.iter().enumerate() {
            if s.values.len() != n {
                return Err(Error::Schema(format!(
                    "snapshot at t={} has {} values, catalog has {n} KPIs",
                    s.timestamp,
                    s.values.len()
                )));
            }
            if let Some(j) = s.values.iter().position(|v| !v.is_finite()) {
                return Err(Error::InvalidValue(format!(
                    "non-finite value for {} at t={}",
                    catalog.kpis[j], s.timestamp
                )));
            }
            if i > 0 && snapshots[i - 1].timestamp >= s.timestamp {
                return Err(Error::Ordering { line: i + 2, timestamp: s.timestamp });
            }
        }
        Ok(Self { catalog, snapshots })
    }

    pub fn empty(catalog: Arc<KpiCatalog>) -> Self {
        Self { catalog, snapshots: Vec::new() }
    }

    pub fn catalog(&self) -> &KpiCatalog {
        &self.catalog
    }

    pub fn shared_catalog(&self) -> Arc<KpiCatalog> {
        Arc::clone(&self.catalog)
    }

    pub fn snapshots(&self) -> &[Snapshot] {
        &self.snapshots
    }

    pub fn into_snapshots(self) -> Vec<Snapshot> {
        self.snapshots
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn width(&self) -> usize {
        self.catalog.len()
    }

    pub fn first_timestamp(&self) -> Option<u64> {
        self.snapshots.first().map(|s| s.timestamp)
    }

    pub fn last_timestamp(&self) -> Option<u64> {
        self.snapshots.last().map(|s| s.timestamp)
    }

    /// Values of KPI `i` over time.
    pub fn column(&self, i: usize) -> Vec<f64> {
        self.snapshots.iter().map(|s| s.values[i]).collect()
    }

    /// Snapshots whose timestamp lies in `[from, to)`.
    pub fn window(&self, from: u64, to: u64) -> Series {
        let snapshots = self
            .snapshots
            .iter()
            .filter(|s| s.timestamp >= from && s.timestamp < to)
            .cloned()
            .collect();
        Series { catalog: Arc::clone(&self.catalog), snapshots }
    }
}

/// Reads a trace; with `catalog`, the header must match it exactly.
pub fn read_series<R: BufRead>(reader: R, catalog: Option<&KpiCatalog>) -> Result<Series> {
    let mut lines = reader.lines().enumerate();
    let header = match lines.next() {
        Some((_, line)) => line.map_err(|e| Error::Parse { line: 1, message: e.to_string() })?,
        None => return Err(Error::Parse { line: 1, message: "missing header".into() }),
    };
    let mut columns = header.trim_end_matches('\r').split(',');
    if columns.next() != Some("timestamp") {
        return Err(Error::Parse {
            line: 1,
            message: "header must start with `timestamp`".into(),
        });
    }
    let kpis = columns
        .map(|c| c.parse::<Kpi>())
        .collect::<Result<Vec<_>>>()?;
    let parsed = KpiCatalog::new(kpis)?;
    let catalog = match catalog {
        Some(expected) if *expected != parsed => {
            return Err(Error::Schema(format!(
                "trace header does not match the expected catalog ({} vs {} KPIs, hash {} vs {})",
                parsed.len(),
                expected.len(),
                parsed.hash(),
                expected.hash()
            )))
        }
        _ => parsed,
    };
    let n = catalog.len();

    let mut snapshots = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::Parse { line: lineno, message: e.to_string() })?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let ts_field = fields.next().unwrap_or_default();
        let timestamp: u64 = ts_field.parse().map_err(|_| Error::Parse {
            line: lineno,
            message: format!("invalid timestamp {ts_field:?}"),
        })?;
        let mut values = Vec::with_capacity(n);
        for field in fields {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                line: lineno,
                message: format!("invalid value {field:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("non-finite value {field:?}"),
                });
            }
            values.push(v);
        }
        if values.len() != n {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected {n} values, found {}", values.len()),
            });
        }
        if let Some(prev) = snapshots.last().map(|s: &Snapshot| s.timestamp) {
            if timestamp <= prev {
                return Err(Error::Ordering { line: lineno, timestamp });
            }
        }
        snapshots.push(Snapshot { timestamp, values });
    }
    if snapshots.is_empty() {
        return Err(Error::NoSnapshots);
    }
    Ok(Series { catalog: Arc::new(catalog), snapshots })
}

/// Loads a trace CSV. The catalog is taken from the header unless one is
/// supplied, in which case the header must match it exactly.
pub fn load_series(path: impl AsRef<Path>, catalog: Option<&KpiCatalog>) -> Result<Series> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_series(BufReader::new(file), catalog)
}

pub fn write_series_to<W: Write>(series: &Series, mut out: W) -> std::io::Result<()> {
    writeln!(out, "{}", series.catalog.header())?;
    let mut line = String::new();
    for s in &series.snapshots {
        line.clear();
        line.push_str(&s.timestamp.to_string());
        for v in &s.values {
            line.push(',');
            // `Display` for f64 is the shortest representation that parses
            // back to the same bits.
            line.push_str(&v.to_string());
        }
        line.push('\n');
        out.write_all(line.as_bytes())?;
    }
    out.flush()
}

pub fn write_series(series: &Series, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    for s in &series.snapshots {
        if s.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue(format!(
                "snapshot at t={} holds a non-finite value",
                s.timestamp
            )));
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_series_to(series, BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

/// Per-KPI mean and floored sample standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    fn check_width(&self, width: usize) -> Result<()> {
        if width != self.len() {
            return Err(Error::Schema(format!(
                "normalizer fitted on {} KPIs, got {width}",
                self.len()
            )));
        }
        Ok(())
    }

    pub fn normalize_values(&self, values: &[f64]) -> Result<Vec<f64>> {
        self.check_width(values.len())?;
        Ok(values
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect())
    }

    pub fn denormalize_values(&self, values: &[f64]) -> Result<Vec<f64>> {
        self.check_width(values.len())?;
        Ok(values
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| v * s + m)
            .collect())
    }
}

pub fn fit_normalizer(train: &Series) -> Result<NormStats> {
    if train.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "normalizer needs at least 2 snapshots, got {}",
            train.len()
        )));
    }
    let n = train.width();
    let count = train.len() as f64;
    let mut mean = vec![0.0; n];
    for s in train.snapshots() {
        for (m, v) in mean.iter_mut().zip(&s.values) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; n];
    for s in train.snapshots() {
        for ((acc, v), m) in var.iter_mut().zip(&s.values).zip(&mean) {
            *acc += (v - m) * (v - m);
        }
    }
    let std = var
        .into_iter()
        .map(|v| (v / (count - 1.0)).sqrt().max(STD_FLOOR))
        .collect();
    Ok(NormStats { mean, std })
}

pub fn normalize(series: &Series, stats: &NormStats) -> Result<Series> {
    stats.check_width(series.width())?;
    let snapshots = series
        .snapshots()
        .iter()
        .map(|s| {
            Ok(Snapshot { timestamp: s.timestamp, values: stats.normalize_values(&s.values)? })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Series { catalog: series.shared_catalog(), snapshots })
}

pub fn denormalize(series: &Series, stats: &NormStats) -> Result<Series> {
    stats.check_width(series.width())?;
    let snapshots = series
        .snapshots()
        .iter()
        .map(|s| {
            Ok(Snapshot { timestamp: s.timestamp, values: stats.denormalize_values(&s.values)? })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Series { catalog: series.shared_catalog(), snapshots })
}

/// Splits into snapshots strictly before `boundary` and the rest. Either part
/// may be empty; callers needing data check `is_empty`.
pub fn split_train(series: &Series, boundary: u64) -> Result<(Series, Series)> {
    let (first, last) = match (series.first_timestamp(), series.last_timestamp()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(Error::Range("cannot split an empty series".into())),
    };
    if boundary < first || boundary > last {
        return Err(Error::Range(format!(
            "boundary {boundary} outside series range [{first}, {last}]"
        )));
    }
    let cut = series.snapshots.partition_point(|s| s.timestamp < boundary);
    let (a, b) = series.snapshots.split_at(cut);
    Ok((
        Series { catalog: series.shared_catalog(), snapshots: a.to_vec() },
        Series { catalog: series.shared_catalog(), snapshots: b.to_vec() },
    ))
}
