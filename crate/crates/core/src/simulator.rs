//! Synthetic multi-node telemetry with injectable faults.
//!
//! A cluster is a list of master/slave node pairs. A seasonal request rate
//! is split across the pairs and each node turns its share into resource
//! KPIs with AR(1) noise. Some KPIs depend on others with a lag (load
//! follows CPU one minute later), so the causality graph built from the
//! trace has real structure to find.
//!
//! Faults escalate an intensity from the injection minute on and perturb
//! the KPIs of both nodes of the target pair. The trace ends at the crash,
//! the first minute at which the intensity exhausts the fault's capacity.
//!
//! Timestamps are minutes; minute 0 is Monday 00:00.

use crate::error::{Error, Result};
use crate::telemetry::{Kpi, KpiCatalog, Series, Snapshot};
use crate::training::seeded_rng;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

pub const MINUTES_PER_DAY: u64 = 1440;
pub const MINUTES_PER_WEEK: u64 = 7 * MINUTES_PER_DAY;
/// Peak request rate on workdays and at weekends.
pub const WEEKDAY_PEAK: f64 = 40.0;
pub const WEEKEND_PEAK: f64 = 26.0;
pub const MEMORY_TOTAL_MB: f64 = 8192.0;
/// Shortest inject-to-crash horizon used at desk scale.
pub const MIN_DESK_HORIZON: u64 = 40;

pub const DESK_METRICS: [&str; 12] = [
    "cpu.user.pct",
    "cpu.system.pct",
    "cpu.idle.pct",
    "cpu.total.pct",
    "load.1",
    "load.5",
    "memory.used.pct",
    "memory.free",
    "network.in.packets",
    "network.in.dropped",
    "network.out.dropped",
    "socket.tcp.established",
];

/// Per-node metric count of the full-scale preset (1,720 KPIs over 20
/// nodes).
const FULL_SCALE_METRICS: usize = 86;

/// The twelve desk metrics followed by generic `aux.NN` ones, 86 in total.
pub fn full_scale_metrics() -> Vec<String> {
    let mut metrics: Vec<String> = DESK_METRICS.iter().map(|m| m.to_string()).collect();
    metrics.extend((metrics.len()..FULL_SCALE_METRICS).map(|i| format!("aux.{i:02}")));
    metrics
}

/// Default mean number of benign traffic bursts per simulated day.
pub const DEFAULT_BURSTS_PER_DAY: f64 = 12.0;

/// Default mean number of replication-link hiccups per simulated day.
pub const DEFAULT_HICCUPS_PER_DAY: f64 = 24.0;

const STREAM_WORKLOAD: u64 = 11;
const STREAM_BURSTS: u64 = 13;
const STREAM_CLUSTER: u64 = 14;
const STREAM_ESCALATION: u64 = 15;
const STREAM_SHARES: u64 = 16;
const STREAM_HICCUPS: u64 = 17;
const STREAM_NODE_BASE: u64 = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pairs: Vec<(String, String)>,
    metrics: Vec<String>,
    /// Fixes per-pair traffic shares and per-KPI gains of generic metrics.
    seed: u64,
    /// Mean number of benign traffic bursts per simulated day. A burst hits
    /// one master and, through replication, its slave.
    bursts_per_day: f64,
    /// Mean number of short replication-link hiccups per simulated day:
    /// dropped packets and reconnects on both nodes of a pair.
    hiccups_per_day: f64,
}

impl ClusterSpec {
    pub fn new(pairs: Vec<(String, String)>, metrics: Vec<String>, seed: u64) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Parameter("cluster needs at least one node pair".into()));
        }
        if metrics.len() < 2 {
            return Err(Error::Parameter("cluster needs at least two metrics per node".into()));
        }
        let mut ids = BTreeSet::new();
        for (m, s) in &pairs {
            for id in [m, s] {
                Kpi::new("probe", id.as_str())?;
                if !ids.insert(id.as_str()) {
                    return Err(Error::Parameter(format!("node id {id} is used twice")));
                }
            }
        }
        let distinct: BTreeSet<&String> = metrics.iter().collect();
        if distinct.len() != metrics.len() {
            return Err(Error::Parameter("metric names must be unique".into()));
        }
        for m in &metrics {
            Kpi::new(m.as_str(), "probe")?;
        }
        Ok(Self { pairs, metrics, seed, bursts_per_day: DEFAULT_BURSTS_PER_DAY, hiccups_per_day: DEFAULT_HICCUPS_PER_DAY })
    }

    /// `m0/s0 .. m{n-1}/s{n-1}` with the twelve desk metrics.
    pub fn with_pairs(pairs: usize, seed: u64) -> Result<Self> {
        let pairs = (0..pairs).map(|i| (format!("m{i}"), format!("s{i}"))).collect();
        Self::new(pairs, DESK_METRICS.iter().map(|m| m.to_string()).collect(), seed)
    }

    /// Four pairs, twelve metrics: 96 KPIs.
    pub fn desk_scale(seed: u64) -> Self {
        Self::with_pairs(4, seed).expect("valid preset")
    }

    /// Ten pairs with 86 metrics per node: the twelve desk metrics plus
    /// generic workload-driven ones.
    pub fn full_scale(seed: u64) -> Self {
        let pairs = (0..10).map(|i| (format!("m{i}"), format!("s{i}"))).collect();
        Self::new(pairs, full_scale_metrics(), seed).expect("valid preset")
    }

    pub fn with_bursts_per_day(mut self, rate: f64) -> Result<Self> {
        if !(rate >= 0.0 && rate.is_finite()) {
            return Err(Error::Parameter(format!("burst rate must be non-negative, got {rate}")));
        }
        self.bursts_per_day = rate;
        Ok(self)
    }

    pub fn with_hiccups_per_day(mut self, rate: f64) -> Result<Self> {
        if !(rate >= 0.0 && rate.is_finite()) {
            return Err(Error::Parameter(format!("hiccup rate must be non-negative, got {rate}")));
        }
        self.hiccups_per_day = rate;
        Ok(self)
    }

    pub fn hiccups_per_day(&self) -> f64 {
        self.hiccups_per_day
    }

    pub fn pairs(&self) -> &[(String, String)] {
        &self.pairs
    }

    pub fn metrics(&self) -> &[String] {
        &self.metrics
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn bursts_per_day(&self) -> f64 {
        self.bursts_per_day
    }

    /// Node ids in catalog order: `m0, s0, m1, s1, ...`.
    pub fn nodes(&self) -> Vec<&str> {
        self.pairs.iter().flat_map(|(m, s)| [m.as_str(), s.as_str()]).collect()
    }

    /// Node-major catalog of `metric@node` KPIs.
    pub fn catalog(&self) -> KpiCatalog {
        let kpis = self
            .nodes()
            .into_iter()
            .flat_map(|n| self.metrics.iter().map(move |m| Kpi::new(m.as_str(), n).expect("validated")))
            .collect();
        KpiCatalog::new(kpis).expect("ids are unique")
    }

    pub fn kpi_count(&self) -> usize {
        2 * self.pairs.len() * self.metrics.len()
    }
}

fn circular_hour_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).abs() % 24.0;
    d.min(24.0 - d)
}

const PEAK_WIDTH_HOURS: f64 = 2.5;

fn daily_shape(hour: f64) -> f64 {
    let bump = |peak: f64| {
        let d = circular_hour_distance(hour, peak);
        (-d * d / (2.0 * PEAK_WIDTH_HOURS * PEAK_WIDTH_HOURS)).exp()
    };
    bump(9.0) + bump(19.0)
}

/// Noise-free request rate at absolute minute `minute`.
pub fn workload_mean(minute: u64) -> f64 {
    let day = minute / MINUTES_PER_DAY;
    let peak = if day % 7 >= 5 { WEEKEND_PEAK } else { WEEKDAY_PEAK };
    let hour = (minute % MINUTES_PER_DAY) as f64 / 60.0;
    (peak * daily_shape(hour) / daily_shape(9.0)).min(peak)
}

/// Requests per second for `minutes` minutes starting at `start_minute`.
pub fn workload_window(start_minute: u64, minutes: usize, seed: u64) -> Vec<f64> {
    let mut rng = seeded_rng(seed, STREAM_WORKLOAD);
    (0..minutes as u64)
        .map(|k| {
            let m = start_minute + k;
            let peak = if (m / MINUTES_PER_DAY) % 7 >= 5 { WEEKEND_PEAK } else { WEEKDAY_PEAK };
            let z: f64 = rng.sample(StandardNormal);
            (workload_mean(m) + 1.5 * z).clamp(0.0, peak)
        })
        .collect()
}

/// Workload from Monday 00:00.
pub fn gen_workload(minutes: usize, seed: u64) -> Vec<f64> {
    workload_window(0, minutes, seed)
}

/// First-order autoregressive noise with stationary standard deviation
/// `sigma`.
struct Ar1 {
    phi: f64,
    innovation: f64,
    state: f64,
}

impl Ar1 {
    fn new(phi: f64, sigma: f64, rng: &mut impl Rng) -> Self {
        let z: f64 = rng.sample(StandardNormal);
        Self { phi, innovation: sigma * (1.0 - phi * phi).sqrt(), state: sigma * z }
    }

    fn step(&mut self, rng: &mut impl Rng) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        self.state = self.phi * self.state + self.innovation * z;
        self.state
    }
}

/// Quantities of one node at one minute; metric names map onto them.
#[derive(Debug, Clone, Copy, Default)]
struct NodeReading {
    cpu_user: f64,
    cpu_system: f64,
    cpu_idle: f64,
    cpu_total: f64,
    load1: f64,
    load5: f64,
    mem_used_pct: f64,
    mem_free: f64,
    in_packets: f64,
    in_dropped: f64,
    out_dropped: f64,
    sockets: f64,
}

impl NodeReading {
    fn get(&self, metric: &str) -> Option<f64> {
        Some(match metric {
            "cpu.user.pct" => self.cpu_user,
            "cpu.system.pct" => self.cpu_system,
            "cpu.idle.pct" => self.cpu_idle,
            "cpu.total.pct" => self.cpu_total,
            "load.1" => self.load1,
            "load.5" => self.load5,
            "memory.used.pct" => self.mem_used_pct,
            "memory.free" => self.mem_free,
            "network.in.packets" => self.in_packets,
            "network.in.dropped" => self.in_dropped,
            "network.out.dropped" => self.out_dropped,
            "socket.tcp.established" => self.sockets,
            _ => return None,
        })
    }
}

struct NodeModel {
    noise: [Ar1; 12],
    /// Generic metrics: (level, gain, noise).
    generic: Vec<(f64, f64, Ar1)>,
    load1: f64,
    load5: f64,
    prev_total: f64,
}

impl NodeModel {
    /// `u0` is the load at the first minute; lagged quantities start at
    /// their steady state for it.
    fn new(generic_gains: &[(f64, f64, f64)], u0: f64, rng: &mut impl Rng) -> Self {
        let sig = [1.0, 0.5, 0.3, 0.3, 0.04, 0.02, 1.0, 25.0, 15.0, 0.3, 0.3, 2.0];
        let phi = [0.7, 0.7, 0.5, 0.5, 0.5, 0.5, 0.95, 0.5, 0.6, 0.4, 0.4, 0.7];
        let noise = std::array::from_fn(|i| Ar1::new(phi[i], sig[i], rng));
        let generic = generic_gains
            .iter()
            .map(|&(level, gain, sigma)| (level, gain, Ar1::new(0.7, sigma, rng)))
            .collect();
        let prev_total = (6.0 + 6.5 * u0).min(100.0);
        let load = prev_total / 25.0;
        Self { noise, generic, load1: load, load5: load, prev_total }
    }

    /// `u` is the node's request rate, `hiccup` extra dropped packets per
    /// minute from a replication-link hiccup.
    fn step(&mut self, u: f64, hiccup: f64, rng: &mut impl Rng) -> (NodeReading, Vec<f64>) {
        let mut e = [0.0; 12];
        for (slot, n) in e.iter_mut().zip(self.noise.iter_mut()) {
            *slot = n.step(rng);
        }
        let cpu_user = (4.0 + 5.0 * u + e[0]).clamp(0.0, 100.0);
        let cpu_system = (2.0 + 1.5 * u + e[1]).clamp(0.0, 100.0);
        let cpu_total = (cpu_user + cpu_system + e[3]).clamp(0.0, 100.0);
        let cpu_idle = (100.0 - cpu_total + e[2]).clamp(0.0, 100.0);
        // load reacts to the previous minute's CPU
        self.load1 = 0.6 * self.load1 + 0.4 * self.prev_total / 25.0;
        let load1 = (self.load1 + e[4]).max(0.0);
        self.load5 = 0.85 * self.load5 + 0.15 * load1;
        let load5 = (self.load5 + e[5]).max(0.0);
        self.prev_total = cpu_total;
        let mem_used_pct = (30.0 + 1.2 * u + e[6]).clamp(0.0, 100.0);
        let mem_free = (MEMORY_TOTAL_MB * (1.0 - mem_used_pct / 100.0) + e[7]).max(0.0);
        let in_packets = (20.0 + 150.0 * u + e[8]).max(0.0);
        let in_dropped = (0.5 + 0.002 * in_packets + hiccup + e[9]).max(0.0);
        let out_dropped = (0.4 + 0.0015 * in_packets + 0.8 * hiccup + e[10]).max(0.0);
        let sockets = (15.0 + 4.0 * u + 0.5 * hiccup + e[11]).max(0.0);
        let generic = self
            .generic
            .iter_mut()
            .map(|(level, gain, n)| (*level + *gain * u + n.step(rng)).max(0.0))
            .collect();
        (
            NodeReading {
                cpu_user,
                cpu_system,
                cpu_idle,
                cpu_total,
                load1,
                load5,
                mem_used_pct,
                mem_free,
                in_packets,
                in_dropped,
                out_dropped,
                sockets,
            },
            generic,
        )
    }
}

/// Normal telemetry for a workload that starts at `start_minute`.
pub fn telemetry_window(spec: &ClusterSpec, start_minute: u64, workload: &[f64], seed: u64) -> Result<Series> {
    if workload.is_empty() {
        return Err(Error::Precondition("workload is empty".into()));
    }
    if let Some(w) = workload.iter().find(|w| !w.is_finite() || **w < 0.0) {
        return Err(Error::InvalidValue(format!("workload value {w}")));
    }
    let nodes = spec.nodes();
    let n_pairs = spec.pairs.len() as f64;
    let mut cluster_rng = seeded_rng(spec.seed, STREAM_CLUSTER);
    let pair_factor: Vec<f64> = spec.pairs.iter().map(|_| cluster_rng.random_range(0.85..1.15)).collect();
    let generic_names: Vec<&String> = spec
        .metrics
        .iter()
        .filter(|m| NodeReading::default().get(m).is_none())
        .collect();
    let generic_params: Vec<Vec<(f64, f64, f64)>> = nodes
        .iter()
        .map(|_| {
            generic_names
                .iter()
                .map(|_| {
                    (
                        cluster_rng.random_range(5.0..50.0),
                        cluster_rng.random_range(0.5..5.0),
                        cluster_rng.random_range(0.5..2.0),
                    )
                })
                .collect()
        })
        .collect();

    // benign bursts: traffic spikes on a master, partly replicated to its slave
    let len = workload.len();
    let mut boost = vec![vec![1.0; len]; nodes.len()];
    let mut burst_rng = seeded_rng(seed, STREAM_BURSTS);
    let rate = spec.bursts_per_day / MINUTES_PER_DAY as f64;
    for t in 0..len {
        if rate > 0.0 && burst_rng.random_bool(rate.min(1.0)) {
            let pair = burst_rng.random_range(0..spec.pairs.len());
            let duration = burst_rng.random_range(4..=20);
            let factor: f64 = burst_rng.random_range(1.4..2.2);
            let end = (t + duration).min(len);
            for b in &mut boost[2 * pair][t..end] {
                *b *= factor;
            }
            for b in &mut boost[2 * pair + 1][t..end] {
                *b *= 1.0 + 0.7 * (factor - 1.0);
            }
        }
    }

    let mut hiccup = vec![vec![0.0; len]; nodes.len()];
    let mut hiccup_rng = seeded_rng(seed, STREAM_HICCUPS);
    let rate = spec.hiccups_per_day / MINUTES_PER_DAY as f64;
    for t in 0..len {
        if rate > 0.0 && hiccup_rng.random_bool(rate.min(1.0)) {
            let pair = hiccup_rng.random_range(0..spec.pairs.len());
            let duration = hiccup_rng.random_range(2..=8);
            let size: f64 = hiccup_rng.random_range(2.0..6.0);
            let end = (t + duration).min(len);
            for ni in [2 * pair, 2 * pair + 1] {
                for h in &mut hiccup[ni][t..end] {
                    *h += size;
                }
            }
        }
    }

    // each shard's slice of the traffic drifts slowly around its mean
    let mut share_rng = seeded_rng(seed, STREAM_SHARES);
    let drift: Vec<Vec<f64>> = (0..spec.pairs.len())
        .map(|_| {
            let mut ar = Ar1::new(0.995, 0.2, &mut share_rng);
            (0..len).map(|_| ar.step(&mut share_rng).exp()).collect()
        })
        .collect();

    let mut rows: Vec<Vec<f64>> = vec![Vec::with_capacity(spec.kpi_count()); len];
    for (ni, _) in nodes.iter().enumerate() {
        let pair = ni / 2;
        let role_share = if ni % 2 == 0 { 0.6 } else { 0.4 };
        let share = pair_factor[pair] * role_share / n_pairs;
        let boost: Vec<f64> = boost[ni].iter().zip(&drift[pair]).map(|(b, d)| b * d).collect();
        let mut rng = seeded_rng(seed, STREAM_NODE_BASE + ni as u64);
        let mut model = NodeModel::new(&generic_params[ni], workload[0] * share * boost[0], &mut rng);
        for t in 0..len {
            let u = workload[t] * share * boost[t];
            let (reading, generic) = model.step(u, hiccup[ni][t], &mut rng);
            let mut g = generic.into_iter();
            for m in &spec.metrics {
                let v = match reading.get(m) {
                    Some(v) => v,
                    None => g.next().expect("one generic value per unknown metric"),
                };
                rows[t].push(v);
            }
        }
    }
    let snapshots = rows
        .into_iter()
        .enumerate()
        .map(|(t, values)| Snapshot::new(start_minute + t as u64, values))
        .collect();
    Series::new(Arc::new(spec.catalog()), snapshots)
}

/// Normal telemetry starting Monday 00:00.
pub fn gen_normal_telemetry(spec: &ClusterSpec, workload: &[f64], seed: u64) -> Result<Series> {
    telemetry_window(spec, 0, workload, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FaultKind {
    MemoryLeak,
    PacketLoss,
    CpuHog,
}

impl FaultKind {
    pub const ALL: [FaultKind; 3] = [FaultKind::MemoryLeak, FaultKind::PacketLoss, FaultKind::CpuHog];

    /// Intensity at which the target crashes: MB leaked, percent of packets
    /// dropped, percent of CPU stolen.
    pub fn default_capacity(self) -> f64 {
        match self {
            FaultKind::MemoryLeak => MEMORY_TOTAL_MB / 2.0,
            FaultKind::PacketLoss => 50.0,
            FaultKind::CpuHog => 80.0,
        }
    }

    /// Minutes from trace start to injection in the reference experiments.
    pub fn start_to_inject(self) -> u64 {
        match self {
            FaultKind::MemoryLeak => 51,
            FaultKind::PacketLoss => 16,
            FaultKind::CpuHog => 19,
        }
    }

    /// Inject-to-crash minutes observed in the reference experiments.
    pub fn reference_horizon(self, pattern: Pattern) -> u64 {
        use FaultKind::*;
        use Pattern::*;
        match (self, pattern) {
            (MemoryLeak, Linear) => 187,
            (MemoryLeak, Exponential) => 34,
            (MemoryLeak, Random) => 40,
            (PacketLoss, Linear) => 73,
            (PacketLoss, Exponential) => 14,
            (PacketLoss, Random) => 75,
            (CpuHog, Linear) => 97,
            (CpuHog, Exponential) => 15,
            (CpuHog, Random) => 41,
        }
    }

    pub fn short_name(self) -> &'static str {
        match self {
            FaultKind::MemoryLeak => "MemL",
            FaultKind::PacketLoss => "PacL",
            FaultKind::CpuHog => "CPUH",
        }
    }
}

impl fmt::Display for FaultKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FaultKind::MemoryLeak => "MemoryLeak",
            FaultKind::PacketLoss => "PacketLoss",
            FaultKind::CpuHog => "CpuHog",
        })
    }
}

impl FromStr for FaultKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace(['_', '-', ' '], "").as_str() {
            "memoryleak" | "meml" => Ok(FaultKind::MemoryLeak),
            "packetloss" | "pacl" => Ok(FaultKind::PacketLoss),
            "cpuhog" | "cpuh" => Ok(FaultKind::CpuHog),
            _ => Err(Error::Parameter(format!("unknown fault kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Pattern {
    Linear,
    Exponential,
    Random,
}

impl Pattern {
    pub const ALL: [Pattern; 3] = [Pattern::Linear, Pattern::Exponential, Pattern::Random];

    pub fn short_name(self) -> &'static str {
        match self {
            Pattern::Linear => "Lin",
            Pattern::Exponential => "Exp",
            Pattern::Random => "Rnd",
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pattern::Linear => "Linear",
            Pattern::Exponential => "Exponential",
            Pattern::Random => "Random",
        })
    }
}

impl FromStr for Pattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "linear" | "lin" => Ok(Pattern::Linear),
            "exponential" | "exp" => Ok(Pattern::Exponential),
            "random" | "rnd" => Ok(Pattern::Random),
            _ => Err(Error::Parameter(format!("unknown escalation pattern {s:?}"))),
        }
    }
}

/// Intensities for `k = 0..len` minutes after injection.
pub fn escalation_path(pattern: Pattern, base: f64, len: usize, seed: u64) -> Vec<f64> {
    match pattern {
        Pattern::Linear => (0..len).map(|k| k as f64 * base).collect(),
        Pattern::Exponential => (0..len).map(|k| base * ((k as f64).exp2() - 1.0)).collect(),
        Pattern::Random => {
            let mut rng = seeded_rng(seed, STREAM_ESCALATION);
            let mut steps = 0u64;
            let mut path = Vec::with_capacity(len);
            for k in 0..len {
                if k > 0 && rng.random_bool(0.5) {
                    steps += 1;
                }
                path.push(base * steps as f64);
            }
            path
        }
    }
}

/// Intensity `k` minutes after injection.
pub fn escalation(pattern: Pattern, base: f64, k: u64, seed: u64) -> f64 {
    escalation_path(pattern, base, k as usize + 1, seed)[k as usize]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub kind: FaultKind,
    pub pattern: Pattern,
    /// Index into the cluster's pair list.
    pub pair: usize,
    /// Injection timestamp.
    pub start: u64,
    pub base: f64,
    pub capacity: f64,
    /// Drives the random escalation pattern.
    pub seed: u64,
}

impl FaultSpec {
    /// A fault whose base increment makes it crash `horizon` minutes after
    /// injection. For the random pattern the crash comes at the last
    /// successful step within the horizon, which may be slightly earlier.
    pub fn with_horizon(kind: FaultKind, pattern: Pattern, pair: usize, start: u64, horizon: u64, seed: u64) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::Parameter("fault horizon must be at least one minute".into()));
        }
        let capacity = kind.default_capacity();
        let base = match pattern {
            Pattern::Linear => capacity / horizon as f64,
            Pattern::Exponential => capacity / ((horizon as f64).exp2() - 1.0),
            Pattern::Random => {
                let steps = escalation_path(Pattern::Random, 1.0, horizon as usize + 1, seed)[horizon as usize];
                capacity / steps.max(1.0)
            }
        };
        let spec = Self { kind, pattern, pair, start, base, capacity, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base > 0.0 && self.base.is_finite()) {
            return Err(Error::Parameter(format!("base increment must be positive, got {}", self.base)));
        }
        if !(self.capacity > 0.0 && self.capacity.is_finite()) {
            return Err(Error::Parameter(format!("capacity must be positive, got {}", self.capacity)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub injection: u64,
    pub crash: u64,
    pub node_a: String,
    pub node_b: String,
    pub kind: FaultKind,
    pub pattern: Pattern,
}

impl GroundTruth {
    pub fn horizon(&self) -> u64 {
        self.crash - self.injection
    }

    pub fn targets(&self) -> [&str; 2] {
        [&self.node_a, &self.node_b]
    }
}

fn crash_level(capacity: f64) -> f64 {
    capacity * (1.0 - 1e-9)
}

/// Applies `fault` to a normal trace of `spec`'s cluster. The result ends
/// just before the crash.
pub fn inject_fault(normal: &Series, spec: &ClusterSpec, fault: &FaultSpec) -> Result<(Series, GroundTruth)> {
    fault.validate()?;
    if normal.catalog() != &spec.catalog() {
        return Err(Error::Schema("trace catalog does not match the cluster".into()));
    }
    let (node_a, node_b) = spec
        .pairs
        .get(fault.pair)
        .cloned()
        .ok_or_else(|| Error::Precondition(format!("cluster has no pair {}", fault.pair)))?;
    let (first, last) = match (normal.first_timestamp(), normal.last_timestamp()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(Error::NoSnapshots),
    };
    if fault.start < first || fault.start > last {
        return Err(Error::Precondition(format!(
            "injection at {} lies outside the trace [{first}, {last}]",
            fault.start
        )));
    }
    let metric_col = |m: &str| spec.metrics.iter().position(|x| x == m);
    let touched: &[&str] = match fault.kind {
        FaultKind::MemoryLeak => &["memory.used.pct", "memory.free", "cpu.system.pct"],
        FaultKind::PacketLoss => &["network.in.dropped", "network.out.dropped", "network.in.packets", "socket.tcp.established"],
        FaultKind::CpuHog => &["cpu.user.pct", "cpu.total.pct", "cpu.idle.pct", "load.1"],
    };
    if touched.iter().all(|m| metric_col(m).is_none()) {
        return Err(Error::Precondition(format!("cluster has none of the metrics a {} affects", fault.kind)));
    }

    let span = (last - fault.start) as usize + 1;
    let path = escalation_path(fault.pattern, fault.base, span, fault.seed);
    let limit = crash_level(fault.capacity);
    let crash_k = path.iter().position(|&i| i >= limit).ok_or(Error::NoCrash {
        capacity: fault.capacity,
        minutes: span as u64 - 1,
    })?;
    let crash = fault.start + crash_k as u64;
    if crash_k == 0 {
        return Err(Error::Precondition("fault crashes at the injection minute".into()));
    }

    let width = spec.metrics.len();
    let node_offsets: Vec<usize> = spec
        .nodes()
        .iter()
        .enumerate()
        .filter(|(_, n)| **n == node_a || **n == node_b)
        .map(|(i, _)| i * width)
        .collect();
    let col = |m: &str| metric_col(m);
    let mut load_lag = vec![0.0; node_offsets.len()];
    let mut prev_intensity = 0.0;

    let mut snapshots = Vec::new();
    for snap in normal.snapshots() {
        if snap.timestamp >= crash {
            break;
        }
        if snap.timestamp < fault.start {
            snapshots.push(snap.clone());
            continue;
        }
        let k = (snap.timestamp - fault.start) as usize;
        let intensity = path[k];
        let r = intensity / fault.capacity;
        let mut values = snap.values.clone();
        for (slot, &off) in node_offsets.iter().enumerate() {
            let v = &mut values[off..off + width];
            let packets = col("network.in.packets").map(|c| v[c]).unwrap_or(1000.0);
            let mut add = |m: &str, delta: f64, lo: f64, hi: f64| {
                if let Some(c) = col(m) {
                    v[c] = (v[c] + delta).clamp(lo, hi);
                }
            };
            match fault.kind {
                FaultKind::MemoryLeak => {
                    add("memory.used.pct", 100.0 * intensity / MEMORY_TOTAL_MB, 0.0, 100.0);
                    add("memory.free", -intensity, 0.0, f64::INFINITY);
                    add("cpu.system.pct", 6.0 * r, 0.0, 100.0);
                }
                FaultKind::PacketLoss => {
                    let frac = intensity / 100.0;
                    add("network.in.dropped", frac * packets, 0.0, f64::INFINITY);
                    add("network.out.dropped", 0.8 * frac * packets, 0.0, f64::INFINITY);
                    add("network.in.packets", -frac * packets, 0.0, f64::INFINITY);
                    add("socket.tcp.established", 30.0 * r, 0.0, f64::INFINITY);
                }
                FaultKind::CpuHog => {
                    add("cpu.user.pct", intensity, 0.0, 100.0);
                    add("cpu.total.pct", intensity, 0.0, 100.0);
                    add("cpu.idle.pct", -intensity, 0.0, 100.0);
                    // load picks the extra CPU up a minute later
                    load_lag[slot] = 0.6 * load_lag[slot] + 0.4 * prev_intensity / 25.0;
                    add("load.1", load_lag[slot], 0.0, f64::INFINITY);
                }
            }
        }
        prev_intensity = intensity;
        snapshots.push(Snapshot::new(snap.timestamp, values));
    }
    let series = Series::new(normal.shared_catalog(), snapshots)?;
    let truth = GroundTruth { injection: fault.start, crash, node_a, node_b, kind: fault.kind, pattern: fault.pattern };
    Ok((series, truth))
}

/// One experiment of the fault matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultScenario {
    pub kind: FaultKind,
    pub pattern: Pattern,
    pub start_to_inject: u64,
    pub horizon: u64,
}

impl FaultScenario {
    /// Identifier like `MemL-Lin`.
    pub fn id(&self) -> String {
        format!("{}-{}", self.kind.short_name(), self.pattern.short_name())
    }
}

/// All nine kind/pattern combinations with reference timings, horizons
/// raised to at least `min_horizon` minutes.
pub fn fault_matrix(min_horizon: u64) -> Vec<FaultScenario> {
    FaultKind::ALL
        .iter()
        .flat_map(|&kind| {
            Pattern::ALL.iter().map(move |&pattern| FaultScenario {
                kind,
                pattern,
                start_to_inject: kind.start_to_inject(),
                horizon: kind.reference_horizon(pattern).max(min_horizon),
            })
        })
        .collect()
}

/// Generates a normal trace starting at `trace_start` long enough for the
/// scenario and injects the fault into pair `pair`.
pub fn failing_trace(
    spec: &ClusterSpec,
    scenario: &FaultScenario,
    pair: usize,
    trace_start: u64,
    seed: u64,
) -> Result<(Series, GroundTruth)> {
    let injection = trace_start + scenario.start_to_inject;
    let fault = FaultSpec::with_horizon(scenario.kind, scenario.pattern, pair, injection, scenario.horizon, seed)?;
    let minutes = (scenario.start_to_inject + scenario.horizon + 1) as usize;
    let workload = workload_window(trace_start, minutes, seed);
    let normal = telemetry_window(spec, trace_start, &workload, seed)?;
    inject_fault(&normal, spec, &fault)
}

const MANIFEST_HEADER: &str = "injection_ts,crash_ts,node_a,node_b,kind,pattern";

pub fn write_manifest(truths: &[GroundTruth], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut body = format!("{MANIFEST_HEADER}\n");
    for t in truths {
        body.push_str(&format!("{},{},{},{},{},{}\n", t.injection, t.crash, t.node_a, t.node_b, t.kind, t.pattern));
    }
    out.write_all(body.as_bytes()).and_then(|_| out.flush()).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<GroundTruth>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut truths = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let lineno = i + 1;
        if i == 0 {
            if line.trim() != MANIFEST_HEADER {
                return Err(Error::Parse { line: 1, message: format!("expected header {MANIFEST_HEADER:?}") });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let bad = |m: String| Error::Parse { line: lineno, message: m };
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 6 {
            return Err(bad(format!("expected 6 fields, got {}", f.len())));
        }
        let injection: u64 = f[0].parse().map_err(|_| bad(format!("bad timestamp {:?}", f[0])))?;
        let crash: u64 = f[1].parse().map_err(|_| bad(format!("bad timestamp {:?}", f[1])))?;
        if crash <= injection {
            return Err(bad("crash must come after injection".into()));
        }
        truths.push(GroundTruth {
            injection,
            crash,
            node_a: f[2].to_string(),
            node_b: f[3].to_string(),
            kind: f[4].parse().map_err(|e: Error| bad(e.to_string()))?,
            pattern: f[5].parse().map_err(|e: Error| bad(e.to_string()))?,
        });
    }
    Ok(truths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::causality::{granger_test, GrangerConfig};

    fn kpi_column(series: &Series, spec: &ClusterSpec, metric: &str, node: &str) -> Vec<f64> {
        let idx = series.catalog().position(&Kpi::new(metric, node).unwrap()).unwrap();
        let _ = spec;
        series.column(idx)
    }

    #[test]
    fn spec_validation() {
        let pairs = vec![("a".to_string(), "b".to_string())];
        let metrics = vec!["x".to_string(), "y".to_string()];
        assert!(ClusterSpec::new(vec![], metrics.clone(), 0).is_err());
        assert!(ClusterSpec::new(pairs.clone(), vec!["x".into()], 0).is_err());
        assert!(ClusterSpec::new(vec![("a".into(), "a".into())], metrics.clone(), 0).is_err());
        assert!(ClusterSpec::new(pairs.clone(), vec!["x".into(), "x".into()], 0).is_err());
        assert!(ClusterSpec::new(pairs, metrics, 0).is_ok());
        assert_eq!(ClusterSpec::desk_scale(0).kpi_count(), 96);
        assert_eq!(ClusterSpec::full_scale(0).kpi_count(), 1720);
        assert_eq!(ClusterSpec::desk_scale(0).nodes()[..3], ["m0", "s0", "m1"]);
    }

    #[test]
    fn workload_respects_bounds_and_peaks() {
        let w = gen_workload(MINUTES_PER_WEEK as usize * 2, 5);
        for (m, v) in w.iter().enumerate() {
            let weekend = (m as u64 / MINUTES_PER_DAY) % 7 >= 5;
            assert!(*v >= 0.0);
            assert!(*v <= if weekend { WEEKEND_PEAK } else { WEEKDAY_PEAK });
        }
        for day in 0..5u64 {
            let at = |h: u64| workload_mean(day * MINUTES_PER_DAY + h * 60);
            assert!(at(3) < at(9));
            assert!(at(3) < at(19));
        }
        assert_eq!(gen_workload(500, 9), gen_workload(500, 9));
        assert_ne!(gen_workload(500, 9), gen_workload(500, 10));
    }

    #[test]
    fn two_week_trace_has_expected_shape() {
        let spec = ClusterSpec::desk_scale(1);
        let minutes = 2 * MINUTES_PER_WEEK as usize;
        let s = gen_normal_telemetry(&spec, &gen_workload(minutes, 1), 1).unwrap();
        assert_eq!(s.width(), 96);
        assert_eq!(s.len(), 20_160);
        for (i, kpi) in s.catalog().kpis().iter().enumerate() {
            let col = s.column(i);
            assert!(col.iter().all(|v| v.is_finite() && *v >= 0.0));
            if kpi.metric().ends_with(".pct") {
                assert!(col.iter().all(|v| *v <= 100.0));
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = ClusterSpec::desk_scale(3);
        let w = gen_workload(300, 3);
        let a = gen_normal_telemetry(&spec, &w, 3).unwrap();
        let b = gen_normal_telemetry(&spec, &w, 3).unwrap();
        assert_eq!(a.snapshots(), b.snapshots());
    }

    #[test]
    fn cpu_drives_load_with_a_lag() {
        let spec = ClusterSpec::desk_scale(0);
        let cfg = GrangerConfig::default();
        let mut detected = 0;
        let trials = 10;
        for seed in 0..trials {
            let w = workload_window(seed * 997, 1500, seed);
            let s = telemetry_window(&spec, seed * 997, &w, seed).unwrap();
            let cpu = kpi_column(&s, &spec, "cpu.total.pct", "m1");
            let load = kpi_column(&s, &spec, "load.1", "m1");
            if granger_test(&cpu, &load, &cfg).unwrap().is_some() {
                detected += 1;
            }
        }
        assert!(detected as f64 >= 0.9 * trials as f64, "{detected}/{trials}");
    }

    #[test]
    fn escalation_shapes() {
        assert_eq!(escalation(Pattern::Linear, 2.0, 5, 0), 10.0);
        assert_eq!(escalation(Pattern::Exponential, 3.0, 4, 0), 45.0);
        for k in 0..30 {
            assert_eq!(escalation(Pattern::Random, 1.0, k, 4), escalation_path(Pattern::Random, 1.0, 30, 4)[k as usize]);
            assert!(escalation(Pattern::Exponential, 1.5, k, 0) >= escalation(Pattern::Linear, 1.5, k, 0) - 1e-12 || k == 0);
        }
        let path = escalation_path(Pattern::Random, 1.0, 100, 8);
        assert!(path.windows(2).all(|w| w[1] - w[0] == 0.0 || w[1] - w[0] == 1.0));
    }

    #[test]
    fn random_escalation_mean() {
        let n = 10_000;
        let mean: f64 = (0..n).map(|s| escalation(Pattern::Random, 2.0, 10, s)).sum::<f64>() / n as f64;
        assert!((mean - 10.0).abs() < 0.02 * 10.0, "{mean}");
    }

    #[test]
    fn exponential_crashes_no_later_than_linear() {
        for base in [0.5, 1.0, 3.0] {
            let cap = 100.0;
            let first = |p| escalation_path(p, base, 1000, 0).iter().position(|&i| i >= crash_level(cap)).unwrap();
            assert!(first(Pattern::Exponential) <= first(Pattern::Linear));
        }
    }

    fn short_trace(spec: &ClusterSpec, minutes: usize, seed: u64) -> Series {
        telemetry_window(spec, 600, &workload_window(600, minutes, seed), seed).unwrap()
    }

    #[test]
    fn reference_horizon_is_reproduced() {
        let spec = ClusterSpec::desk_scale(0);
        let s = short_trace(&spec, 51 + 187 + 5, 2);
        let fault = FaultSpec::with_horizon(FaultKind::MemoryLeak, Pattern::Linear, 1, 651, 187, 0).unwrap();
        let (trace, truth) = inject_fault(&s, &spec, &fault).unwrap();
        assert_eq!(truth.horizon(), 187);
        assert_eq!(truth.injection, 651);
        assert_eq!(trace.last_timestamp(), Some(truth.crash - 1));
        assert_eq!((truth.node_a.as_str(), truth.node_b.as_str()), ("m1", "s1"));
        for pattern in [Pattern::Exponential, Pattern::Linear] {
            let f = FaultSpec::with_horizon(FaultKind::CpuHog, pattern, 0, 620, 41, 7).unwrap();
            assert_eq!(inject_fault(&s, &spec, &f).unwrap().1.horizon(), 41);
        }
        let f = FaultSpec::with_horizon(FaultKind::PacketLoss, Pattern::Random, 0, 620, 75, 7).unwrap();
        let h = inject_fault(&s, &spec, &f).unwrap().1.horizon();
        assert!((70..=75).contains(&h), "{h}");
    }

    #[test]
    fn pre_injection_segment_is_untouched_and_other_nodes_too() {
        let spec = ClusterSpec::desk_scale(0);
        let s = short_trace(&spec, 300, 4);
        let fault = FaultSpec::with_horizon(FaultKind::CpuHog, Pattern::Linear, 2, 700, 100, 0).unwrap();
        let (trace, truth) = inject_fault(&s, &spec, &fault).unwrap();
        assert_eq!(trace.snapshots()[..100], s.snapshots()[..100]);
        let targets: BTreeSet<usize> = s
            .catalog()
            .indices_of_node(&truth.node_a)
            .into_iter()
            .chain(s.catalog().indices_of_node(&truth.node_b))
            .collect();
        for (a, b) in trace.snapshots().iter().zip(s.snapshots()) {
            for i in (0..96).filter(|i| !targets.contains(i)) {
                assert_eq!(a.values[i], b.values[i]);
            }
        }
    }

    #[test]
    fn injected_kpis_shift_strongly() {
        let spec = ClusterSpec::desk_scale(0);
        let s = short_trace(&spec, 400, 6);
        let checks = [
            (FaultKind::MemoryLeak, "memory.used.pct", 1.0),
            (FaultKind::PacketLoss, "network.in.dropped", 1.0),
            (FaultKind::CpuHog, "cpu.user.pct", 1.0),
            (FaultKind::CpuHog, "cpu.idle.pct", -1.0),
        ];
        for (kind, metric, sign) in checks {
            let fault = FaultSpec::with_horizon(kind, Pattern::Linear, 0, 700, 80, 0).unwrap();
            let (trace, truth) = inject_fault(&s, &spec, &fault).unwrap();
            for node in truth.targets() {
                let col = kpi_column(&trace, &spec, metric, node);
                let pre = &col[..100];
                let post = &col[100..];
                let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
                let sd = (pre.iter().map(|v| (v - mean(pre)).powi(2)).sum::<f64>() / 99.0).sqrt();
                assert!(sign * (mean(post) - mean(pre)) > 3.0 * sd, "{kind} {metric} on {node}");
            }
        }
    }

    #[test]
    fn linear_crash_is_monotone_in_base() {
        let spec = ClusterSpec::desk_scale(0);
        let s = short_trace(&spec, 400, 1);
        let mut last = u64::MAX;
        for base in [0.5, 1.0, 2.0, 4.0] {
            let f = FaultSpec { kind: FaultKind::CpuHog, pattern: Pattern::Linear, pair: 0, start: 650, base, capacity: 80.0, seed: 0 };
            let crash = inject_fault(&s, &spec, &f).unwrap().1.crash;
            assert!(crash <= last);
            last = crash;
        }
    }

    #[test]
    fn fault_errors() {
        let spec = ClusterSpec::desk_scale(0);
        let s = short_trace(&spec, 100, 1);
        let slow = FaultSpec::with_horizon(FaultKind::CpuHog, Pattern::Linear, 0, 650, 500, 0).unwrap();
        assert!(matches!(inject_fault(&s, &spec, &slow), Err(Error::NoCrash { .. })));
        let outside = FaultSpec::with_horizon(FaultKind::CpuHog, Pattern::Linear, 0, 10, 50, 0).unwrap();
        assert!(matches!(inject_fault(&s, &spec, &outside), Err(Error::Precondition(_))));
        let bad_pair = FaultSpec::with_horizon(FaultKind::CpuHog, Pattern::Linear, 9, 650, 20, 0).unwrap();
        assert!(matches!(inject_fault(&s, &spec, &bad_pair), Err(Error::Precondition(_))));
        assert!(FaultSpec { base: 0.0, ..slow }.validate().is_err());
    }

    #[test]
    fn fault_matrix_is_clamped() {
        let m = fault_matrix(MIN_DESK_HORIZON);
        assert_eq!(m.len(), 9);
        assert!(m.iter().all(|s| s.horizon >= 40));
        let meml_lin = m.iter().find(|s| s.id() == "MemL-Lin").unwrap();
        assert_eq!((meml_lin.start_to_inject, meml_lin.horizon), (51, 187));
        let pacl_exp = m.iter().find(|s| s.id() == "PacL-Exp").unwrap();
        assert_eq!(pacl_exp.horizon, 40);
    }

    #[test]
    fn failing_trace_ends_before_crash() {
        let spec = ClusterSpec::desk_scale(2);
        let sc = fault_matrix(MIN_DESK_HORIZON)[0];
        let (trace, truth) = failing_trace(&spec, &sc, 3, 30_000, 5).unwrap();
        assert_eq!(trace.first_timestamp(), Some(30_000));
        assert_eq!(truth.injection, 30_051);
        assert_eq!(truth.crash, 30_051 + 187);
        assert_eq!(trace.len() as u64, 51 + 187);
        assert_eq!(truth.node_a, "m3");
    }

    #[test]
    fn manifest_round_trip() {
        let truths = vec![
            GroundTruth { injection: 10, crash: 50, node_a: "m0".into(), node_b: "s0".into(), kind: FaultKind::CpuHog, pattern: Pattern::Random },
            GroundTruth { injection: 5, crash: 6, node_a: "m1".into(), node_b: "s1".into(), kind: FaultKind::MemoryLeak, pattern: Pattern::Exponential },
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.csv");
        write_manifest(&truths, &p).unwrap();
        assert_eq!(read_manifest(&p).unwrap(), truths);
        std::fs::write(&p, "injection_ts,crash_ts,node_a,node_b,kind,pattern\n9,3,a,b,CpuHog,Linear\n").unwrap();
        assert!(read_manifest(&p).is_err());
    }
}
