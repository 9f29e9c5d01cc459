//! Per-minute verdicts from the trained models.
//!
//! A [`PipelineBundle`] holds everything learned from normal data. The step
//! functions take raw (unnormalized) snapshots:
//!
//! * Prevent_E decides the state from the RBM free energy;
//! * Prevent_A feeds the autoencoder's anomaly set to the one-class SVM;
//! * Loud skips state classification and alerts when the same node pair
//!   stays in the top three for N consecutive minutes;
//! * the ensemble is anomalous whenever either Prevent variant is.
//!
//! All of them rank suspects from the autoencoder's anomaly set.

use crate::autoencoder::{train_autoencoder_clipped, AutoencoderModel, DEFAULT_INPUT_CLIP};
use crate::causality::{build_baseline_graph, read_graph, write_graph, CausalityGraph, GrangerConfig};
use crate::error::{Error, Result};
use crate::ocsvm::{default_gamma, train_ocsvm, BinaryAnomalyVector, OcsvmClass, OcsvmModel, DEFAULT_NU, HAMMING_GAMMA};
use crate::persist::{self, FORMAT_VERSION};
use crate::ranker::{rank_anomalies, NodeRanking, NodeScore, PageRankConfig};
use crate::rbm::{calibrate_threshold, train_rbm_with_hidden, EnergyForm, RbmModel};
use crate::telemetry::{fit_normalizer, normalize, split_train, KpiCatalog, NormStats, Series, Snapshot};
use crate::training::TrainConfig;
use crate::State;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Source {
    PreventE,
    PreventA,
    Ensemble,
    Loud(usize),
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::PreventE => f.write_str("prevent_e"),
            Source::PreventA => f.write_str("prevent_a"),
            Source::Ensemble => f.write_str("ensemble"),
            Source::Loud(n) => write!(f, "loud_n{n}"),
        }
    }
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prevent_e" => Ok(Source::PreventE),
            "prevent_a" => Ok(Source::PreventA),
            "ensemble" => Ok(Source::Ensemble),
            _ => s
                .strip_prefix("loud_n")
                .and_then(|n| n.parse().ok())
                .filter(|n| *n >= 1)
                .map(Source::Loud)
                .ok_or_else(|| Error::Schema(format!("unknown verdict source {s:?}"))),
        }
    }
}

/// Which predictor [`run_pipeline`] runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    E,
    A,
    Ensemble,
    Loud(usize),
}

impl Mode {
    pub fn source(self) -> Source {
        match self {
            Mode::E => Source::PreventE,
            Mode::A => Source::PreventA,
            Mode::Ensemble => Source::Ensemble,
            Mode::Loud(n) => Source::Loud(n),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub timestamp: u64,
    pub source: Source,
    pub state: State,
    /// Empty whenever the state is normal.
    pub ranking: NodeRanking,
}

impl Verdict {
    pub fn normal(timestamp: u64, source: Source) -> Self {
        Self { timestamp, source, state: State::Normal, ranking: NodeRanking::empty() }
    }

    pub fn anomalous(timestamp: u64, source: Source, ranking: NodeRanking) -> Self {
        Self { timestamp, source, state: State::Anomalous, ranking }
    }
}

/// Hyperparameters for [`train_bundle`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleConfig {
    pub autoencoder: TrainConfig,
    /// Bound on normalized autoencoder inputs; `None` disables it.
    pub ae_input_clip: Option<f64>,
    pub rbm: TrainConfig,
    pub rbm_energy: EnergyForm,
    /// Hidden units of the RBM; `None` uses one per KPI.
    pub rbm_hidden: Option<usize>,
    pub nu: f64,
    /// RBF width; `None` uses `1 / number of KPIs`.
    pub gamma: Option<f64>,
    pub granger: GrangerConfig,
    pub pagerank: PageRankConfig,
    pub seed: u64,
}

impl Default for BundleConfig {
    fn default() -> Self {
        Self {
            autoencoder: TrainConfig::default(),
            ae_input_clip: Some(DEFAULT_INPUT_CLIP),
            rbm: TrainConfig::default(),
            rbm_energy: EnergyForm::Gaussian,
            rbm_hidden: None,
            nu: DEFAULT_NU,
            gamma: Some(HAMMING_GAMMA),
            granger: GrangerConfig::default(),
            pagerank: PageRankConfig::default(),
            seed: 0,
        }
    }
}

impl BundleConfig {
    /// Copies `seed` into every seeded stage, offset per stage.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.autoencoder.seed = seed;
        self.rbm.seed = seed.wrapping_add(1);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BundleMeta {
    format_version: u32,
    catalog: KpiCatalog,
    catalog_hash: String,
    pagerank: PageRankConfig,
    granger: GrangerConfig,
    seed: u64,
    skipped_pairs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineBundle {
    catalog: Arc<KpiCatalog>,
    norm: NormStats,
    autoencoder: AutoencoderModel,
    rbm: RbmModel,
    ocsvm: OcsvmModel,
    baseline: CausalityGraph,
    pagerank: PageRankConfig,
    granger: GrangerConfig,
    seed: u64,
    skipped_pairs: usize,
}

const META_FILE: &str = "bundle.json";
const NORM_FILE: &str = "norm.json";
const AE_FILE: &str = "autoencoder.json";
const RBM_FILE: &str = "rbm.json";
const OCSVM_FILE: &str = "ocsvm.json";
const GRAPH_FILE: &str = "baseline.graph";

/// Trains every component from normal data. Part 1 (before `boundary`)
/// fits the normalizer, the autoencoder and the RBM; part 2 calibrates the
/// RBM and provides the benign anomaly sets for the one-class SVM; the
/// causality baseline uses the whole series.
pub fn train_bundle(normal: &Series, boundary: u64, cfg: &BundleConfig) -> Result<PipelineBundle> {
    cfg.granger.validate()?;
    cfg.pagerank.validate()?;
    let (part1, part2) = split_train(normal, boundary)?;
    if part1.is_empty() || part2.is_empty() {
        return Err(Error::InsufficientData(format!(
            "boundary {boundary} leaves {} snapshots before and {} after it",
            part1.len(),
            part2.len()
        )));
    }
    let norm = fit_normalizer(&part1)?;
    let n1 = normalize(&part1, &norm)?;
    let n2 = normalize(&part2, &norm)?;
    let full = normalize(normal, &norm)?;

    let autoencoder = train_autoencoder_clipped(&n1, &cfg.autoencoder, cfg.ae_input_clip)?;
    let rbm = train_rbm_with_hidden(&n1, cfg.rbm_hidden.unwrap_or(n1.width()), &cfg.rbm)?.with_energy_form(cfg.rbm_energy);
    let rbm = calibrate_threshold(&rbm, &n2)?;

    let width = normal.width();
    let vectors = n2
        .snapshots()
        .par_iter()
        .map(|s| BinaryAnomalyVector::from_indices(width, &autoencoder.anomalous_kpis(&s.values)?))
        .collect::<Result<Vec<_>>>()?;
    let ocsvm = train_ocsvm(&vectors, cfg.nu, cfg.gamma.unwrap_or_else(|| default_gamma(width)), cfg.seed)?;

    let (baseline, skipped) = build_baseline_graph(&full, &cfg.granger)?;
    Ok(PipelineBundle {
        catalog: normal.shared_catalog(),
        norm,
        autoencoder,
        rbm,
        ocsvm,
        baseline,
        pagerank: cfg.pagerank,
        granger: cfg.granger,
        seed: cfg.seed,
        skipped_pairs: skipped.len(),
    })
}

/// What the models say about one snapshot, before any mode-specific logic.
#[derive(Debug, Clone, PartialEq)]
pub struct Assessment {
    pub timestamp: u64,
    pub energy_state: State,
    pub ocsvm_class: OcsvmClass,
    pub anomalous_kpis: BTreeSet<usize>,
    /// Ranking of the anomaly set, computed whether or not any state
    /// classifier fires.
    pub ranking: NodeRanking,
}

impl PipelineBundle {
    pub fn catalog(&self) -> &KpiCatalog {
        &self.catalog
    }

    pub fn norm(&self) -> &NormStats {
        &self.norm
    }

    pub fn autoencoder(&self) -> &AutoencoderModel {
        &self.autoencoder
    }

    pub fn rbm(&self) -> &RbmModel {
        &self.rbm
    }

    pub fn ocsvm(&self) -> &OcsvmModel {
        &self.ocsvm
    }

    pub fn baseline(&self) -> &CausalityGraph {
        &self.baseline
    }

    pub fn pagerank_config(&self) -> &PageRankConfig {
        &self.pagerank
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Ordered pairs whose Granger test failed numerically during training.
    pub fn skipped_pairs(&self) -> usize {
        self.skipped_pairs
    }

    fn check_catalog(&self, series: &Series) -> Result<()> {
        if series.catalog() != self.catalog.as_ref() {
            return Err(Error::Schema(format!(
                "series catalog {} does not match bundle catalog {}",
                series.catalog().hash(),
                self.catalog.hash()
            )));
        }
        Ok(())
    }

    fn normalized(&self, snapshot: &Snapshot) -> Result<Vec<f64>> {
        if snapshot.values.len() != self.catalog.len() {
            return Err(Error::Schema(format!(
                "snapshot at {} has {} values, catalog has {} KPIs",
                snapshot.timestamp,
                snapshot.values.len(),
                self.catalog.len()
            )));
        }
        self.norm.normalize_values(&snapshot.values)
    }

    fn rank(&self, anomalous: &BTreeSet<usize>) -> Result<NodeRanking> {
        rank_anomalies(&self.baseline, anomalous, &self.catalog, &self.pagerank)
    }

    pub fn assess(&self, snapshot: &Snapshot) -> Result<Assessment> {
        let v = self.normalized(snapshot)?;
        let energy_state = self.rbm.classify_state(&v)?;
        let kpis = self.autoencoder.anomalous_kpis(&v)?;
        let vector = BinaryAnomalyVector::from_indices(self.catalog.len(), &kpis)?;
        let ocsvm_class = self.ocsvm.classify(&vector)?;
        let anomalous_kpis: BTreeSet<usize> = kpis.into_iter().collect();
        let ranking = self.rank(&anomalous_kpis)?;
        Ok(Assessment { timestamp: snapshot.timestamp, energy_state, ocsvm_class, anomalous_kpis, ranking })
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let hash = self.catalog.hash();
        let meta = BundleMeta {
            format_version: FORMAT_VERSION,
            catalog: self.catalog.as_ref().clone(),
            catalog_hash: hash.clone(),
            pagerank: self.pagerank,
            granger: self.granger,
            seed: self.seed,
            skipped_pairs: self.skipped_pairs,
        };
        persist::write_json(&meta, &dir.join(META_FILE))?;
        persist::write_json(&self.norm, &dir.join(NORM_FILE))?;
        self.autoencoder.save(dir.join(AE_FILE))?;
        self.rbm.save(dir.join(RBM_FILE))?;
        self.ocsvm.save(dir.join(OCSVM_FILE))?;
        write_graph(&self.baseline, &hash, dir.join(GRAPH_FILE))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta: BundleMeta = persist::read_json(&dir.join(META_FILE))?;
        persist::check_version(meta.format_version, "bundle")?;
        let hash = meta.catalog.hash();
        if hash != meta.catalog_hash {
            return Err(Error::Compatibility(format!(
                "bundle catalog hashes to {hash} but records {}",
                meta.catalog_hash
            )));
        }
        let n = meta.catalog.len();
        let norm: NormStats = persist::read_json(&dir.join(NORM_FILE))?;
        let autoencoder = AutoencoderModel::load(dir.join(AE_FILE))?;
        let rbm = RbmModel::load(dir.join(RBM_FILE))?;
        let ocsvm = OcsvmModel::load(dir.join(OCSVM_FILE))?;
        let (baseline, _) = read_graph(dir.join(GRAPH_FILE), Some(&hash))?;
        let widths = [
            ("normalizer", norm.len()),
            ("autoencoder", autoencoder.width()),
            ("RBM", rbm.visible()),
            ("one-class SVM", ocsvm.width()),
            ("baseline graph", baseline.node_count()),
        ];
        for (what, w) in widths {
            if w != n {
                return Err(Error::Compatibility(format!("{what} covers {w} KPIs, catalog has {n}")));
            }
        }
        Ok(Self {
            catalog: Arc::new(meta.catalog),
            norm,
            autoencoder,
            rbm,
            ocsvm,
            baseline,
            pagerank: meta.pagerank,
            granger: meta.granger,
            seed: meta.seed,
            skipped_pairs: meta.skipped_pairs,
        })
    }
}

pub fn prevent_e_step(bundle: &PipelineBundle, snapshot: &Snapshot) -> Result<Verdict> {
    let v = bundle.normalized(snapshot)?;
    if bundle.rbm.classify_state(&v)?.is_anomalous() {
        let kpis: BTreeSet<usize> = bundle.autoencoder.anomalous_kpis(&v)?.into_iter().collect();
        Ok(Verdict::anomalous(snapshot.timestamp, Source::PreventE, bundle.rank(&kpis)?))
    } else {
        Ok(Verdict::normal(snapshot.timestamp, Source::PreventE))
    }
}

pub fn prevent_a_step(bundle: &PipelineBundle, snapshot: &Snapshot) -> Result<Verdict> {
    let v = bundle.normalized(snapshot)?;
    let kpis = bundle.autoencoder.anomalous_kpis(&v)?;
    let vector = BinaryAnomalyVector::from_indices(bundle.catalog.len(), &kpis)?;
    if bundle.ocsvm.classify(&vector)? == OcsvmClass::FailureProne {
        let kpis: BTreeSet<usize> = kpis.into_iter().collect();
        Ok(Verdict::anomalous(snapshot.timestamp, Source::PreventA, bundle.rank(&kpis)?))
    } else {
        Ok(Verdict::normal(snapshot.timestamp, Source::PreventA))
    }
}

/// Consecutive-minute counts per unordered node pair.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoudState {
    streaks: BTreeMap<(String, String), usize>,
}

impl LoudState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn streak(&self, a: &str, b: &str) -> usize {
        let key = if a <= b { (a.to_string(), b.to_string()) } else { (b.to_string(), a.to_string()) };
        self.streaks.get(&key).copied().unwrap_or(0)
    }

    /// Extends the streaks of pairs present in `ranking`, drops the others,
    /// and reports whether any pair has lasted `n` minutes.
    pub fn advance(&self, ranking: &NodeRanking, n: usize) -> (LoudState, bool) {
        let nodes: Vec<&str> = ranking.nodes().collect();
        let mut next = BTreeMap::new();
        for i in 0..nodes.len() {
            for j in i + 1..nodes.len() {
                let (a, b) = if nodes[i] <= nodes[j] { (nodes[i], nodes[j]) } else { (nodes[j], nodes[i]) };
                let key = (a.to_string(), b.to_string());
                let run = self.streaks.get(&key).copied().unwrap_or(0) + 1;
                next.insert(key, run);
            }
        }
        let alert = next.values().any(|&r| r >= n);
        (LoudState { streaks: next }, alert)
    }
}

fn loud_verdict(timestamp: u64, ranking: &NodeRanking, state: &LoudState, n: usize) -> Result<(Verdict, LoudState)> {
    if n == 0 {
        return Err(Error::Parameter("Loud persistence N must be at least 1".into()));
    }
    let (next, alert) = state.advance(ranking, n);
    let verdict = if alert {
        Verdict::anomalous(timestamp, Source::Loud(n), ranking.clone())
    } else {
        Verdict::normal(timestamp, Source::Loud(n))
    };
    Ok((verdict, next))
}

pub fn loud_step(bundle: &PipelineBundle, snapshot: &Snapshot, state: &LoudState, n: usize) -> Result<(Verdict, LoudState)> {
    let v = bundle.normalized(snapshot)?;
    let kpis: BTreeSet<usize> = bundle.autoencoder.anomalous_kpis(&v)?.into_iter().collect();
    loud_verdict(snapshot.timestamp, &bundle.rank(&kpis)?, state, n)
}

pub fn ensemble_step(e: &Verdict, a: &Verdict) -> Result<Verdict> {
    if e.timestamp != a.timestamp {
        return Err(Error::Schema(format!(
            "cannot combine verdicts for {} and {}",
            e.timestamp, a.timestamp
        )));
    }
    Ok(if e.state.is_anomalous() || a.state.is_anomalous() {
        Verdict::anomalous(e.timestamp, Source::Ensemble, e.ranking.merge(&a.ranking))
    } else {
        Verdict::normal(e.timestamp, Source::Ensemble)
    })
}

/// Assesses every snapshot once; the per-mode verdicts are derived from
/// the assessments.
pub fn assess_series(bundle: &PipelineBundle, series: &Series) -> Result<Vec<Assessment>> {
    bundle.check_catalog(series)?;
    series.snapshots().par_iter().map(|s| bundle.assess(s)).collect()
}

pub fn verdicts_from_assessments(assessments: &[Assessment], mode: Mode) -> Result<Vec<Verdict>> {
    let e = |a: &Assessment| {
        if a.energy_state.is_anomalous() {
            Verdict::anomalous(a.timestamp, Source::PreventE, a.ranking.clone())
        } else {
            Verdict::normal(a.timestamp, Source::PreventE)
        }
    };
    let p = |a: &Assessment| {
        if a.ocsvm_class == OcsvmClass::FailureProne {
            Verdict::anomalous(a.timestamp, Source::PreventA, a.ranking.clone())
        } else {
            Verdict::normal(a.timestamp, Source::PreventA)
        }
    };
    match mode {
        Mode::E => Ok(assessments.iter().map(e).collect()),
        Mode::A => Ok(assessments.iter().map(p).collect()),
        Mode::Ensemble => assessments.iter().map(|a| ensemble_step(&e(a), &p(a))).collect(),
        Mode::Loud(n) => {
            let mut state = LoudState::new();
            let mut out = Vec::with_capacity(assessments.len());
            for a in assessments {
                let (v, next) = loud_verdict(a.timestamp, &a.ranking, &state, n)?;
                state = next;
                out.push(v);
            }
            Ok(out)
        }
    }
}

/// One verdict per snapshot, in order.
pub fn run_pipeline(bundle: &PipelineBundle, series: &Series, mode: Mode) -> Result<Vec<Verdict>> {
    if let Mode::Loud(0) = mode {
        return Err(Error::Parameter("Loud persistence N must be at least 1".into()));
    }
    verdicts_from_assessments(&assess_series(bundle, series)?, mode)
}

const VERDICT_HEADER: &str = "timestamp,source,state,node1,count1,node2,count2,node3,count3";

pub fn write_verdicts_to<W: Write>(verdicts: &[Verdict], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{VERDICT_HEADER}")?;
    for v in verdicts {
        write!(out, "{},{},{}", v.timestamp, v.source, v.state)?;
        for i in 0..3 {
            match v.ranking.entries().get(i) {
                Some(e) => write!(out, ",{},{}", e.node, e.count)?,
                None => write!(out, ",,")?,
            }
        }
        writeln!(out)?;
    }
    out.flush()
}

pub fn write_verdicts(verdicts: &[Verdict], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_verdicts_to(verdicts, BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

/// Reads a verdict file. Centralities are not stored, so rankings come
/// back with zero centrality in the order written.
pub fn read_verdicts(path: impl AsRef<Path>) -> Result<Vec<Verdict>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let lineno = i + 1;
        if i == 0 {
            if line.trim() != VERDICT_HEADER {
                return Err(Error::Parse { line: 1, message: format!("expected header {VERDICT_HEADER:?}") });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let bad = |m: String| Error::Parse { line: lineno, message: m };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(bad(format!("expected 9 fields, got {}", f.len())));
        }
        let timestamp: u64 = f[0].parse().map_err(|_| bad(format!("bad timestamp {:?}", f[0])))?;
        if let Some(prev) = out.last().map(|v: &Verdict| v.timestamp) {
            if timestamp <= prev {
                return Err(Error::Ordering { line: lineno, timestamp });
            }
        }
        let source: Source = f[1].parse().map_err(|e: Error| bad(e.to_string()))?;
        let state = match f[2] {
            "Normal" => State::Normal,
            "Anomalous" => State::Anomalous,
            other => return Err(bad(format!("unknown state {other:?}"))),
        };
        let mut entries = Vec::new();
        for r in 0..3 {
            let (node, count) = (f[3 + 2 * r], f[4 + 2 * r]);
            match (node.is_empty(), count.is_empty()) {
                (true, true) => {}
                (false, false) => entries.push(NodeScore {
                    node: node.to_string(),
                    count: count.parse().map_err(|_| bad(format!("bad count {count:?}")))?,
                    centrality: 0.0,
                }),
                _ => return Err(bad("node and count must both be present or both empty".into())),
            }
        }
        if state == State::Normal && !entries.is_empty() {
            return Err(bad("normal verdict with a ranking".into()));
        }
        let ranking = NodeRanking::from_ordered(entries).map_err(|e| bad(e.to_string()))?;
        out.push(Verdict { timestamp, source, state, ranking });
    }
    Ok(out)
}
