//! Experiment configuration: a small INI dialect with `[section]` headers,
//! `key = value` lines and `#` / `;` comments.
//!
//! Every key has a default, so an empty file is a valid configuration.
//! Unknown sections or keys are rejected rather than ignored, since a typo
//! would otherwise silently fall back to the default.

use crate::CliError;
use failcast::causality::GrangerConfig;
use failcast::pipeline::{BundleConfig, Mode};
use failcast::ranker::PageRankConfig;
use failcast::rbm::EnergyForm;
use failcast::simulator::{
    fault_matrix, full_scale_metrics, ClusterSpec, FaultKind, FaultScenario, FaultSpec, Pattern, DESK_METRICS,
    MINUTES_PER_DAY, MIN_DESK_HORIZON,
};
use failcast::TrainConfig;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

/// Smallest number of snapshots either training part may hold.
const MIN_PART_SNAPSHOTS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricSet {
    /// Twelve metrics per node.
    Desk,
    /// 86 metrics per node.
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterConfig {
    pub metrics: MetricSet,
    pub pairs: usize,
    pub bursts_per_day: f64,
    pub hiccups_per_day: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    /// Length of the normal training trace.
    pub train_days: f64,
    /// Share of the training trace, taken from its end, that calibrates the
    /// energy threshold and trains the one-class SVM.
    pub calibration_fraction: f64,
    /// Length of the held-out normal trace used for false-alarm rates.
    pub heldout_minutes: u64,
    pub min_horizon: u64,
    pub replications: usize,
    pub kinds: Vec<FaultKind>,
    pub patterns: Vec<Pattern>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub cluster: ClusterConfig,
    pub simulation: SimulationConfig,
    /// Model hyperparameters. Its seeds are overwritten from `seed`.
    pub model: BundleConfig,
    pub modes: Vec<Mode>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            cluster: ClusterConfig {
                metrics: MetricSet::Desk,
                pairs: 4,
                bursts_per_day: failcast::simulator::DEFAULT_BURSTS_PER_DAY,
                hiccups_per_day: failcast::simulator::DEFAULT_HICCUPS_PER_DAY,
            },
            simulation: SimulationConfig {
                train_days: 14.0,
                calibration_fraction: 0.3,
                heldout_minutes: MINUTES_PER_DAY,
                min_horizon: MIN_DESK_HORIZON,
                replications: 5,
                kinds: FaultKind::ALL.to_vec(),
                patterns: Pattern::ALL.to_vec(),
            },
            model: BundleConfig::default(),
            modes: vec![Mode::E, Mode::A, Mode::Ensemble, Mode::Loud(3), Mode::Loud(4), Mode::Loud(5)],
        }
    }
}

/// Mixes a stream label into the master seed so that every stage draws
/// from an unrelated sequence.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    splitmix(master ^ splitmix(stream))
}

pub const STREAM_CLUSTER: u64 = 1;
pub const STREAM_TRAIN_TRACE: u64 = 2;
pub const STREAM_HELDOUT_TRACE: u64 = 3;
pub const STREAM_MODEL: u64 = 4;
pub const STREAM_FAULTS: u64 = 1000;

fn usage(field: &str, message: impl Into<String>) -> CliError {
    CliError::Config { field: field.to_string(), message: message.into() }
}

fn parse_mode_token(token: &str) -> Option<Mode> {
    match token.trim().to_ascii_lowercase().as_str() {
        "e" | "prevent_e" => Some(Mode::E),
        "a" | "prevent_a" => Some(Mode::A),
        "ensemble" => Some(Mode::Ensemble),
        t => t
            .strip_prefix("loud")
            .map(|n| n.trim_start_matches(['_', 'n', ':']))
            .and_then(|n| n.parse().ok())
            .filter(|n| *n >= 1)
            .map(Mode::Loud),
    }
}

fn mode_token(mode: Mode) -> String {
    match mode {
        Mode::E => "e".into(),
        Mode::A => "a".into(),
        Mode::Ensemble => "ensemble".into(),
        Mode::Loud(n) => format!("loud{n}"),
    }
}

fn energy_token(form: EnergyForm) -> &'static str {
    match form {
        EnergyForm::Gaussian => "gaussian",
        EnergyForm::Binary => "binary",
    }
}

/// Raw `section.key -> (value, line)` entries.
fn parse_ini(text: &str) -> Result<BTreeMap<String, (String, usize)>, CliError> {
    let mut entries = BTreeMap::new();
    let mut section: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = match raw.find(['#', ';']) {
            Some(p) => &raw[..p],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| usage(&format!("line {lineno}"), "unterminated section header"))?;
            section = Some(name.trim().to_ascii_lowercase());
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| usage(&format!("line {lineno}"), "expected `key = value`"))?;
        let section = section
            .as_deref()
            .ok_or_else(|| usage(&format!("line {lineno}"), "key outside of any section"))?;
        let path = format!("{section}.{}", key.trim().to_ascii_lowercase());
        if entries.insert(path.clone(), (value.trim().to_string(), lineno)).is_some() {
            return Err(usage(&path, format!("set twice (line {lineno})")));
        }
    }
    Ok(entries)
}

struct Fields {
    entries: BTreeMap<String, (String, usize)>,
}

impl Fields {
    fn take(&mut self, path: &str) -> Option<String> {
        self.entries.remove(path).map(|(v, _)| v)
    }

    fn parsed<T: std::str::FromStr>(&mut self, path: &str, target: &mut T) -> Result<(), CliError> {
        if let Some(v) = self.take(path) {
            *target = v.parse().map_err(|_| usage(path, format!("cannot parse {v:?}")))?;
        }
        Ok(())
    }

    /// `auto` / `none` map to `None`.
    fn optional<T: std::str::FromStr>(&mut self, path: &str, target: &mut Option<T>) -> Result<(), CliError> {
        if let Some(v) = self.take(path) {
            *target = match v.to_ascii_lowercase().as_str() {
                "auto" | "none" => None,
                _ => Some(v.parse().map_err(|_| usage(path, format!("cannot parse {v:?}")))?),
            };
        }
        Ok(())
    }

    fn list<T>(&mut self, path: &str, target: &mut Vec<T>, parse: impl Fn(&str) -> Option<T>) -> Result<(), CliError> {
        if let Some(v) = self.take(path) {
            *target = v
                .split(',')
                .map(str::trim)
                .filter(|t| !t.is_empty())
                .map(|t| parse(t).ok_or_else(|| usage(path, format!("unknown entry {t:?}"))))
                .collect::<Result<_, _>>()?;
        }
        Ok(())
    }

    fn train(&mut self, section: &str, cfg: &mut TrainConfig) -> Result<(), CliError> {
        self.parsed(&format!("{section}.epochs"), &mut cfg.epochs)?;
        self.parsed(&format!("{section}.learning_rate"), &mut cfg.learning_rate)?;
        self.parsed(&format!("{section}.batch_size"), &mut cfg.batch_size)?;
        self.parsed(&format!("{section}.patience"), &mut cfg.patience)
    }
}

impl ExperimentConfig {
    pub fn from_ini(text: &str) -> Result<Self, CliError> {
        let mut f = Fields { entries: parse_ini(text)? };
        let mut c = ExperimentConfig::default();

        f.parsed("run.seed", &mut c.seed)?;
        f.list("run.modes", &mut c.modes, parse_mode_token)?;

        if let Some(v) = f.take("cluster.metrics") {
            c.cluster.metrics = match v.to_ascii_lowercase().as_str() {
                "desk" => MetricSet::Desk,
                "full" => MetricSet::Full,
                _ => return Err(usage("cluster.metrics", format!("expected desk or full, got {v:?}"))),
            };
        }
        f.parsed("cluster.pairs", &mut c.cluster.pairs)?;
        f.parsed("cluster.bursts_per_day", &mut c.cluster.bursts_per_day)?;
        f.parsed("cluster.hiccups_per_day", &mut c.cluster.hiccups_per_day)?;

        let s = &mut c.simulation;
        f.parsed("simulation.train_days", &mut s.train_days)?;
        f.parsed("simulation.calibration_fraction", &mut s.calibration_fraction)?;
        f.parsed("simulation.heldout_minutes", &mut s.heldout_minutes)?;
        f.parsed("simulation.min_horizon", &mut s.min_horizon)?;
        f.parsed("simulation.replications", &mut s.replications)?;
        f.list("simulation.kinds", &mut s.kinds, |t| t.parse().ok())?;
        f.list("simulation.patterns", &mut s.patterns, |t| t.parse().ok())?;

        let m = &mut c.model;
        f.train("autoencoder", &mut m.autoencoder)?;
        f.optional("autoencoder.input_clip", &mut m.ae_input_clip)?;
        f.train("rbm", &mut m.rbm)?;
        f.optional("rbm.hidden", &mut m.rbm_hidden)?;
        if let Some(v) = f.take("rbm.energy") {
            m.rbm_energy = match v.to_ascii_lowercase().as_str() {
                "gaussian" => EnergyForm::Gaussian,
                "binary" => EnergyForm::Binary,
                _ => return Err(usage("rbm.energy", format!("expected gaussian or binary, got {v:?}"))),
            };
        }
        f.parsed("ocsvm.nu", &mut m.nu)?;
        f.optional("ocsvm.gamma", &mut m.gamma)?;
        f.parsed("granger.lag", &mut m.granger.lag)?;
        f.parsed("granger.alpha", &mut m.granger.alpha)?;
        f.parsed("pagerank.damping", &mut m.pagerank.damping)?;
        f.parsed("pagerank.tolerance", &mut m.pagerank.tolerance)?;
        f.parsed("pagerank.max_iter", &mut m.pagerank.max_iter)?;

        if let Some((path, (_, line))) = f.entries.into_iter().next() {
            return Err(usage(&path, format!("unknown setting (line {line})")));
        }
        c.validate()?;
        Ok(c)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, CliError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::stage(format!("reading config {}", path.display()), failcast::Error::io(path, e)))?;
        Self::from_ini(&text)
    }

    /// Checks every setting against the preconditions of the stage that
    /// consumes it.
    pub fn validate(&self) -> Result<(), CliError> {
        let finite_nonneg = |path: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(usage(path, format!("must be a non-negative number, got {v}")))
            }
        };
        if self.cluster.pairs == 0 {
            return Err(usage("cluster.pairs", "need at least one pair"));
        }
        finite_nonneg("cluster.bursts_per_day", self.cluster.bursts_per_day)?;
        finite_nonneg("cluster.hiccups_per_day", self.cluster.hiccups_per_day)?;

        let s = &self.simulation;
        if !(s.calibration_fraction > 0.0 && s.calibration_fraction < 1.0) {
            return Err(usage("simulation.calibration_fraction", format!("must lie in (0, 1), got {}", s.calibration_fraction)));
        }
        if !(s.train_days > 0.0 && s.train_days.is_finite()) {
            return Err(usage("simulation.train_days", format!("must be positive, got {}", s.train_days)));
        }
        let minutes = self.train_minutes();
        let (fit, cal) = self.split_sizes(minutes);
        if fit < MIN_PART_SNAPSHOTS || cal < MIN_PART_SNAPSHOTS {
            return Err(usage(
                "simulation.train_days",
                format!("{minutes} training minutes split into {fit} + {cal}; both parts need {MIN_PART_SNAPSHOTS}"),
            ));
        }
        if minutes < self.model.granger.min_length() {
            return Err(usage("simulation.train_days", "too short for the Granger lag order"));
        }
        if s.heldout_minutes == 0 {
            return Err(usage("simulation.heldout_minutes", "must be at least 1"));
        }
        if s.replications == 0 {
            return Err(usage("simulation.replications", "must be at least 1"));
        }
        if s.kinds.is_empty() {
            return Err(usage("simulation.kinds", "list is empty"));
        }
        if s.patterns.is_empty() {
            return Err(usage("simulation.patterns", "list is empty"));
        }
        for scenario in self.scenarios() {
            FaultSpec::with_horizon(scenario.kind, scenario.pattern, 0, scenario.start_to_inject, scenario.horizon, 0)
                .map_err(|e| usage("simulation.min_horizon", format!("{}: {e}", scenario.id())))?;
        }

        let m = &self.model;
        for (section, t, min_epochs) in [("autoencoder", &m.autoencoder, 1), ("rbm", &m.rbm, 0)] {
            if t.epochs < min_epochs {
                return Err(usage(&format!("{section}.epochs"), format!("must be at least {min_epochs}")));
            }
            if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
                return Err(usage(&format!("{section}.learning_rate"), "must be positive"));
            }
            if t.batch_size == 0 {
                return Err(usage(&format!("{section}.batch_size"), "must be at least 1"));
            }
        }
        if let Some(clip) = m.ae_input_clip {
            if !(clip > 0.0 && clip.is_finite()) {
                return Err(usage("autoencoder.input_clip", "must be positive or none"));
            }
        }
        if m.rbm_hidden == Some(0) {
            return Err(usage("rbm.hidden", "must be at least 1 or auto"));
        }
        if !(m.nu > 0.0 && m.nu <= 1.0) {
            return Err(usage("ocsvm.nu", format!("must lie in (0, 1], got {}", m.nu)));
        }
        if let Some(g) = m.gamma {
            if !(g > 0.0 && g.is_finite()) {
                return Err(usage("ocsvm.gamma", "must be positive or auto"));
            }
        }
        m.granger.validate().map_err(|e| usage("granger", e.to_string()))?;
        m.pagerank.validate().map_err(|e| usage("pagerank", e.to_string()))?;

        if self.modes.is_empty() {
            return Err(usage("run.modes", "list is empty"));
        }
        Ok(())
    }

    pub fn train_minutes(&self) -> usize {
        (self.simulation.train_days * MINUTES_PER_DAY as f64).round() as usize
    }

    /// Snapshot counts of the fitting and calibration parts.
    pub fn split_sizes(&self, snapshots: usize) -> (usize, usize) {
        let fit = ((1.0 - self.simulation.calibration_fraction) * snapshots as f64).round() as usize;
        let fit = fit.min(snapshots);
        (fit, snapshots - fit)
    }

    pub fn cluster_spec(&self) -> Result<ClusterSpec, CliError> {
        let seed = derive_seed(self.seed, STREAM_CLUSTER);
        let pairs = (0..self.cluster.pairs).map(|i| (format!("m{i}"), format!("s{i}"))).collect();
        let metrics = match self.cluster.metrics {
            MetricSet::Desk => DESK_METRICS.iter().map(|m| m.to_string()).collect(),
            MetricSet::Full => full_scale_metrics(),
        };
        ClusterSpec::new(pairs, metrics, seed)
            .and_then(|s| s.with_bursts_per_day(self.cluster.bursts_per_day))
            .and_then(|s| s.with_hiccups_per_day(self.cluster.hiccups_per_day))
            .map_err(|e| usage("cluster", e.to_string()))
    }

    /// Selected kind x pattern scenarios in matrix order.
    pub fn scenarios(&self) -> Vec<FaultScenario> {
        fault_matrix(self.simulation.min_horizon)
            .into_iter()
            .filter(|s| self.simulation.kinds.contains(&s.kind) && self.simulation.patterns.contains(&s.pattern))
            .collect()
    }

    /// Model hyperparameters with seeds derived from the master seed.
    pub fn bundle_config(&self) -> BundleConfig {
        self.model.clone().with_seed(derive_seed(self.seed, STREAM_MODEL))
    }

    /// Canonical text form; parsing it gives back an equal configuration.
    pub fn to_ini(&self) -> String {
        let mut out = String::new();
        let opt = |v: Option<String>, none: &str| v.unwrap_or_else(|| none.to_string());
        let join = |items: Vec<String>| items.join(", ");
        let c = &self.cluster;
        let s = &self.simulation;
        let m = &self.model;
        let _ = writeln!(out, "[run]\nseed = {}\nmodes = {}\n", self.seed, join(self.modes.iter().map(|&x| mode_token(x)).collect()));
        let metrics = match c.metrics {
            MetricSet::Desk => "desk",
            MetricSet::Full => "full",
        };
        let _ = writeln!(
            out,
            "[cluster]\nmetrics = {metrics}\npairs = {}\nbursts_per_day = {}\nhiccups_per_day = {}\n",
            c.pairs, c.bursts_per_day, c.hiccups_per_day
        );
        let _ = writeln!(
            out,
            "[simulation]\ntrain_days = {}\ncalibration_fraction = {}\nheldout_minutes = {}\nmin_horizon = {}\nreplications = {}\nkinds = {}\npatterns = {}\n",
            s.train_days,
            s.calibration_fraction,
            s.heldout_minutes,
            s.min_horizon,
            s.replications,
            join(s.kinds.iter().map(|k| k.short_name().to_string()).collect()),
            join(s.patterns.iter().map(|p| p.short_name().to_string()).collect()),
        );
        let train = |out: &mut String, name: &str, t: &TrainConfig| {
            let _ = writeln!(
                out,
                "[{name}]\nepochs = {}\nlearning_rate = {}\nbatch_size = {}\npatience = {}",
                t.epochs, t.learning_rate, t.batch_size, t.patience
            );
        };
        train(&mut out, "autoencoder", &m.autoencoder);
        let _ = writeln!(out, "input_clip = {}\n", opt(m.ae_input_clip.map(|v| v.to_string()), "none"));
        train(&mut out, "rbm", &m.rbm);
        let _ = writeln!(
            out,
            "hidden = {}\nenergy = {}\n",
            opt(m.rbm_hidden.map(|v| v.to_string()), "auto"),
            energy_token(m.rbm_energy)
        );
        let _ = writeln!(out, "[ocsvm]\nnu = {}\ngamma = {}\n", m.nu, opt(m.gamma.map(|v| v.to_string()), "auto"));
        let GrangerConfig { lag, alpha } = m.granger;
        let _ = writeln!(out, "[granger]\nlag = {lag}\nalpha = {alpha}\n");
        let PageRankConfig { damping, tolerance, max_iter } = m.pagerank;
        let _ = write!(out, "[pagerank]\ndamping = {damping}\ntolerance = {tolerance}\nmax_iter = {max_iter}\n");
        out
    }

    /// Hash of every setting that influences the trained bundle.
    pub fn training_fingerprint(&self) -> String {
        let mut probe = self.clone();
        probe.modes = Vec::new();
        probe.simulation.heldout_minutes = 0;
        probe.simulation.min_horizon = 0;
        probe.simulation.replications = 0;
        probe.simulation.kinds = Vec::new();
        probe.simulation.patterns = Vec::new();
        let digest = Sha256::digest(probe.to_ini().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
