use crate::config::{derive_seed, ExperimentConfig, STREAM_FAULTS, STREAM_HELDOUT_TRACE, STREAM_TRAIN_TRACE};
use crate::{CliError, Context};
use failcast::eval::{evaluate, median_report, write_class_trace, write_metrics, MetricsReport};
use failcast::pipeline::{
    assess_series, read_verdicts, run_pipeline, train_bundle, verdicts_from_assessments, write_verdicts, Mode,
    PipelineBundle, Verdict,
};
use failcast::simulator::{
    failing_trace, read_manifest, telemetry_window, workload_window, write_manifest, FaultScenario, GroundTruth,
};
use failcast::telemetry::{load_series, write_series, Series};
use rayon::prelude::*;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Gap between consecutive generated traces, in minutes.
const TRACE_GAP: u64 = 60;
/// Offset between the starts of successive failing traces. Not a divisor
/// of a day, so replications see different times of day.
const FAULT_STRIDE: u64 = 397;

const FINGERPRINT_FILE: &str = "fingerprint.txt";
const TRAIN_LOG: &str = "train.log";

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::stage(format!("writing {}", path.display()), failcast::Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaultPlacement {
    pub scenario: FaultScenario,
    pub pair: usize,
    pub replication: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannedTrace {
    pub name: String,
    pub start: u64,
    pub seed: u64,
    /// `None` for normal traces.
    pub fault: Option<FaultPlacement>,
    /// Length of a normal trace; failing traces derive theirs from the
    /// scenario.
    pub minutes: usize,
}

impl PlannedTrace {
    pub fn file_name(&self) -> String {
        format!("{}.csv", self.name)
    }

    pub fn manifest_name(&self) -> Option<String> {
        self.fault.as_ref().map(|_| format!("{}.manifest.csv", self.name))
    }
}

/// Every trace an experiment needs: the training trace, a held-out normal
/// trace, then `replications` failing traces per scenario.
pub fn simulation_plan(cfg: &ExperimentConfig) -> Vec<PlannedTrace> {
    let train = cfg.train_minutes();
    let heldout = cfg.simulation.heldout_minutes;
    let mut plan = vec![
        PlannedTrace {
            name: "normal".into(),
            start: 0,
            seed: derive_seed(cfg.seed, STREAM_TRAIN_TRACE),
            fault: None,
            minutes: train,
        },
        PlannedTrace {
            name: "heldout".into(),
            start: train as u64 + TRACE_GAP,
            seed: derive_seed(cfg.seed, STREAM_HELDOUT_TRACE),
            fault: None,
            minutes: heldout as usize,
        },
    ];
    let base = train as u64 + TRACE_GAP + heldout + TRACE_GAP;
    let reps = cfg.simulation.replications;
    for (i, scenario) in cfg.scenarios().into_iter().enumerate() {
        for r in 0..reps {
            let idx = (i * reps + r) as u64;
            plan.push(PlannedTrace {
                name: format!("{}_r{r}", scenario.id()),
                start: base + idx * FAULT_STRIDE,
                seed: derive_seed(cfg.seed, STREAM_FAULTS + idx),
                minutes: (scenario.start_to_inject + scenario.horizon + 1) as usize,
                fault: Some(FaultPlacement { scenario, pair: (i + r) % cfg.cluster.pairs, replication: r }),
            });
        }
    }
    plan
}

pub fn describe_plan(cfg: &ExperimentConfig, plan: &[PlannedTrace]) -> String {
    let mut out = String::new();
    let kpis = 2 * cfg.cluster.pairs
        * match cfg.cluster.metrics {
            crate::config::MetricSet::Desk => failcast::simulator::DESK_METRICS.len(),
            crate::config::MetricSet::Full => failcast::simulator::full_scale_metrics().len(),
        };
    let _ = writeln!(out, "seed {}: {} pairs, {kpis} KPIs, {} traces", cfg.seed, cfg.cluster.pairs, plan.len());
    for t in plan {
        match &t.fault {
            None => {
                let _ = writeln!(out, "  {:<14} start {:>6}  {:>6} min  normal", t.name, t.start, t.minutes);
            }
            Some(f) => {
                let _ = writeln!(
                    out,
                    "  {:<14} start {:>6}  {:>6} min  pair {}  inject +{}  horizon {}",
                    t.name, t.start, t.minutes, f.pair, f.scenario.start_to_inject, f.scenario.horizon
                );
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct SimulatedTrace {
    pub plan: PlannedTrace,
    pub series: Series,
    pub truth: Option<GroundTruth>,
    pub path: PathBuf,
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct SimulationOutput {
    pub plan: Vec<PlannedTrace>,
    pub description: String,
    /// Empty on a dry run.
    pub traces: Vec<SimulatedTrace>,
}

fn generate(cfg: &ExperimentConfig, t: &PlannedTrace) -> Result<(Series, Option<GroundTruth>), CliError> {
    let spec = cfg.cluster_spec()?;
    match &t.fault {
        None => {
            let workload = workload_window(t.start, t.minutes, t.seed);
            let series = telemetry_window(&spec, t.start, &workload, t.seed).context(|| format!("simulating {}", t.name))?;
            Ok((series, None))
        }
        Some(f) => {
            let (series, truth) = failing_trace(&spec, &f.scenario, f.pair, t.start, t.seed)
                .context(|| format!("simulating {}", t.name))?;
            Ok((series, Some(truth)))
        }
    }
}

/// Writes the normal, held-out and failing traces (plus one manifest per
/// failing trace) into `out_dir`.
pub fn cmd_simulate(cfg: &ExperimentConfig, out_dir: &Path, dry_run: bool) -> Result<SimulationOutput, CliError> {
    cfg.validate()?;
    let plan = simulation_plan(cfg);
    let description = describe_plan(cfg, &plan);
    if dry_run {
        return Ok(SimulationOutput { plan, description, traces: Vec::new() });
    }
    create_dir(out_dir)?;
    let traces = plan
        .par_iter()
        .map(|t| {
            let (series, truth) = generate(cfg, t)?;
            let path = out_dir.join(t.file_name());
            write_series(&series, &path).context(|| format!("writing {}", path.display()))?;
            let manifest = match (&truth, t.manifest_name()) {
                (Some(g), Some(name)) => {
                    let p = out_dir.join(name);
                    write_manifest(std::slice::from_ref(g), &p).context(|| format!("writing {}", p.display()))?;
                    Some(p)
                }
                _ => None,
            };
            Ok(SimulatedTrace { plan: t.clone(), series, truth, path, manifest })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    Ok(SimulationOutput { plan, description, traces })
}

fn training_log(cfg: &ExperimentConfig, series: &Series, boundary: u64, bundle: &PipelineBundle) -> String {
    let mut log = String::new();
    let (fit, cal) = cfg.split_sizes(series.len());
    let _ = writeln!(log, "seed = {}", cfg.seed);
    let _ = writeln!(log, "model seed = {}", bundle.seed());
    let _ = writeln!(log, "catalog = {} KPIs, hash {}", bundle.catalog().len(), bundle.catalog().hash());
    let _ = writeln!(log, "snapshots = {} (fit {fit}, calibration {cal}, boundary {boundary})", series.len());
    for (epoch, loss) in bundle.autoencoder().training_losses().iter().enumerate() {
        let _ = writeln!(log, "autoencoder epoch {epoch} loss = {loss:.8}");
    }
    for (epoch, err) in bundle.rbm().reconstruction_errors().iter().enumerate() {
        let _ = writeln!(log, "rbm epoch {} reconstruction = {err:.8}", epoch + 1);
    }
    if let Some(c) = bundle.rbm().calibration() {
        let _ = writeln!(log, "rbm free energy mean = {:.6}, std = {:.6}, threshold = {:.6}", c.mean, c.std, c.threshold);
    }
    let svm = bundle.ocsvm();
    let _ = writeln!(
        log,
        "ocsvm support vectors = {}, rho = {:.8}, gamma = {}",
        svm.support_vectors().len(),
        svm.rho(),
        svm.gamma()
    );
    let _ = writeln!(
        log,
        "granger edges = {}, skipped pairs = {}",
        bundle.baseline().edge_count(),
        bundle.skipped_pairs()
    );
    log
}

/// Trains on an in-memory normal trace and writes the bundle, its training
/// log and the configuration fingerprint into `out_dir`.
fn train_series(cfg: &ExperimentConfig, series: &Series, out_dir: &Path) -> Result<PipelineBundle, CliError> {
    let (fit, _) = cfg.split_sizes(series.len());
    let boundary = series
        .snapshots()
        .get(fit)
        .map(|s| s.timestamp)
        .ok_or_else(|| CliError::stage("splitting the training trace", failcast::Error::InsufficientData(format!(
            "{} snapshots leave nothing for calibration",
            series.len()
        ))))?;
    let bundle = train_bundle(series, boundary, &cfg.bundle_config()).context(|| "training the bundle".into())?;
    bundle.save(out_dir).context(|| format!("saving the bundle to {}", out_dir.display()))?;
    write_text(&out_dir.join(TRAIN_LOG), &training_log(cfg, series, boundary, &bundle))?;
    write_text(&out_dir.join(FINGERPRINT_FILE), &format!("{}\n", cfg.training_fingerprint()))?;
    Ok(bundle)
}

/// Trains every model on the normal trace at `trace` and stores the bundle
/// in `out_dir`.
pub fn cmd_train(cfg: &ExperimentConfig, trace: &Path, out_dir: &Path) -> Result<PipelineBundle, CliError> {
    cfg.validate()?;
    let series = load_series(trace, None).context(|| format!("loading {}", trace.display()))?;
    create_dir(out_dir)?;
    train_series(cfg, &series, out_dir)
}

/// `loud` needs `loud_n`; the others reject it.
pub fn parse_mode(mode: &str, loud_n: Option<usize>) -> Result<Mode, CliError> {
    let mode = match (mode.trim().to_ascii_lowercase().as_str(), loud_n) {
        ("e", None) => Mode::E,
        ("a", None) => Mode::A,
        ("ensemble", None) => Mode::Ensemble,
        ("loud", Some(n)) if n >= 1 => Mode::Loud(n),
        ("loud", Some(_)) => return Err(CliError::Usage("--loud-n must be at least 1".into())),
        ("loud", None) => return Err(CliError::Usage("mode loud requires --loud-n".into())),
        ("e" | "a" | "ensemble", Some(_)) => {
            return Err(CliError::Usage("--loud-n only applies to mode loud".into()));
        }
        (other, _) => {
            return Err(CliError::Usage(format!("unknown mode {other:?}; expected e, a, ensemble or loud")));
        }
    };
    Ok(mode)
}

fn check_compatible(bundle: &PipelineBundle, series: &Series, trace: &Path) -> Result<(), CliError> {
    let (want, got) = (bundle.catalog().hash(), series.catalog().hash());
    if want != got {
        return Err(CliError::stage(
            format!("predicting on {}", trace.display()),
            failcast::Error::Compatibility(format!("trace catalog hash {got} differs from the bundle's {want}")),
        ));
    }
    Ok(())
}

/// Runs one predictor over a trace and writes its verdict stream. Returns
/// the number of verdicts.
pub fn cmd_predict(bundle_dir: &Path, trace: &Path, mode: Mode, out: &Path) -> Result<usize, CliError> {
    let bundle = PipelineBundle::load(bundle_dir).context(|| format!("loading bundle {}", bundle_dir.display()))?;
    let series = load_series(trace, None).context(|| format!("loading {}", trace.display()))?;
    check_compatible(&bundle, &series, trace)?;
    let verdicts = run_pipeline(&bundle, &series, mode).context(|| format!("predicting on {}", trace.display()))?;
    write_verdicts(&verdicts, out).context(|| format!("writing {}", out.display()))?;
    Ok(verdicts.len())
}

fn class_trace_path(out: &Path, verdict_file: &Path) -> PathBuf {
    let stem = verdict_file.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "verdicts".into());
    out.with_file_name(format!("{stem}.classes.csv"))
}

/// Scores verdict files against their ground truth and writes one metrics
/// row; several files are reduced to their field-wise median.
///
/// Manifest rows are matched to verdict files in order. A single row
/// applies to every file; no manifest means the traces were normal and only
/// the false-alarm rate is reported. A per-timestamp class trace is written
/// next to `out` for each verdict file.
pub fn cmd_evaluate(
    verdict_files: &[PathBuf],
    manifests: &[PathBuf],
    experiment: Option<&str>,
    out: &Path,
) -> Result<MetricsReport, CliError> {
    if verdict_files.is_empty() {
        return Err(CliError::Usage("no verdict files given".into()));
    }
    let mut truths = Vec::new();
    for m in manifests {
        truths.extend(read_manifest(m).context(|| format!("reading manifest {}", m.display()))?);
    }
    let truth_for = |i: usize| -> Result<Option<&GroundTruth>, CliError> {
        match truths.len() {
            0 => Ok(None),
            1 => Ok(truths.first()),
            n if n == verdict_files.len() => Ok(truths.get(i)),
            n => Err(CliError::stage(
                "pairing manifests with verdict files",
                failcast::Error::Contract(format!("{n} manifest rows for {} verdict files", verdict_files.len())),
            )),
        }
    };
    let mut reports = Vec::with_capacity(verdict_files.len());
    let mut source = None;
    for (i, path) in verdict_files.iter().enumerate() {
        let verdicts = read_verdicts(path).context(|| format!("reading {}", path.display()))?;
        let this = verdicts.first().map(|v| v.source);
        if verdicts.iter().any(|v| Some(v.source) != this) || (source.is_some() && this.is_some() && source != this) {
            return Err(CliError::stage(
                format!("reading {}", path.display()),
                failcast::Error::Contract("verdicts from different predictors cannot be aggregated".into()),
            ));
        }
        source = source.or(this);
        let truth = truth_for(i)?;
        let name = experiment.map(str::to_string).unwrap_or_else(|| match truth {
            Some(t) => format!("{}-{}", t.kind.short_name(), t.pattern.short_name()),
            None => "normal".into(),
        });
        let label = this.map(|s| s.to_string()).unwrap_or_else(|| "unknown".into());
        let (report, classes) = evaluate(&name, &label, &verdicts, truth).context(|| format!("evaluating {}", path.display()))?;
        let trace_path = class_trace_path(out, path);
        write_class_trace(&classes, &trace_path).context(|| format!("writing {}", trace_path.display()))?;
        reports.push(report);
    }
    let report = if reports.len() == 1 {
        reports.pop().expect("one report")
    } else {
        median_report(&reports).context(|| "aggregating replications".into())?
    };
    write_metrics(std::slice::from_ref(&report), out).context(|| format!("writing {}", out.display()))?;
    Ok(report)
}

/// Everything the experiment runner produced for one trace.
#[derive(Debug, Clone)]
pub struct TraceRun {
    pub name: String,
    pub scenario: Option<FaultScenario>,
    pub truth: Option<GroundTruth>,
    /// One verdict stream per configured mode, in configuration order.
    pub verdicts: Vec<(Mode, Vec<Verdict>)>,
    pub reports: Vec<MetricsReport>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    /// True when training was skipped because a matching bundle existed.
    pub resumed: bool,
    pub runs: Vec<TraceRun>,
    /// The rows of `metrics.csv`.
    pub metrics: Vec<MetricsReport>,
    pub summary: String,
}

fn far_summary(cfg: &ExperimentConfig, heldout: &TraceRun) -> String {
    let mut out = String::from("false alarm rate on held-out normal data\n");
    let far = |mode: Mode| {
        heldout
            .verdicts
            .iter()
            .position(|(m, _)| *m == mode)
            .and_then(|i| heldout.reports[i].far_pct)
    };
    for (mode, _) in &heldout.verdicts {
        let value = far(*mode).map(|v| format!("{v:.2}%")).unwrap_or_else(|| "NA".into());
        let _ = writeln!(out, "  {:<10} {value:>8}", mode.source().to_string());
    }
    let mut loud: Vec<(usize, f64)> = cfg
        .modes
        .iter()
        .filter_map(|m| match m {
            Mode::Loud(n) => far(*m).map(|f| (*n, f)),
            _ => None,
        })
        .collect();
    loud.sort_by_key(|(n, _)| *n);
    if loud.len() > 1 {
        let monotone = loud.windows(2).all(|w| w[1].1 <= w[0].1);
        let _ = writeln!(out, "loud FAR non-increasing in N: {}", if monotone { "yes" } else { "no" });
    }
    if let Some(&(n, loud_far)) = loud.first() {
        for mode in [Mode::E, Mode::A] {
            if let Some(f) = far(mode) {
                let rel = if f < loud_far { "below" } else { "not below" };
                let _ = writeln!(out, "{} FAR {rel} loud_n{n}", mode.source());
            }
        }
    }
    out
}

/// Simulates, trains, predicts with every configured mode and evaluates,
/// writing all artifacts under `out_dir`:
///
/// ```text
/// config.ini  metrics.csv  runs.csv  summary.txt
/// traces/     bundle/      verdicts/  classes/
/// ```
///
/// With `resume`, a bundle left in `bundle/` by an earlier run with the same
/// training settings is loaded instead of retrained.
pub fn cmd_experiment(cfg: &ExperimentConfig, out_dir: &Path, resume: bool) -> Result<ExperimentOutcome, CliError> {
    cfg.validate()?;
    create_dir(out_dir)?;
    write_text(&out_dir.join("config.ini"), &cfg.to_ini())?;

    let sim = cmd_simulate(cfg, &out_dir.join("traces"), false)?;
    let (normal, evaluated) = sim.traces.split_first().expect("plan starts with the training trace");

    let bundle_dir = out_dir.join("bundle");
    let fingerprint = std::fs::read_to_string(bundle_dir.join(FINGERPRINT_FILE)).ok();
    let reusable = resume && fingerprint.as_deref().map(str::trim) == Some(cfg.training_fingerprint().as_str());
    let bundle = if reusable {
        PipelineBundle::load(&bundle_dir).context(|| format!("loading bundle {}", bundle_dir.display()))?
    } else {
        create_dir(&bundle_dir)?;
        train_series(cfg, &normal.series, &bundle_dir)?
    };

    let verdict_dir = out_dir.join("verdicts");
    let class_dir = out_dir.join("classes");
    create_dir(&verdict_dir)?;
    create_dir(&class_dir)?;

    let runs = evaluated
        .iter()
        .map(|t| {
            let assessments = assess_series(&bundle, &t.series).context(|| format!("assessing {}", t.plan.name))?;
            let experiment = t.plan.fault.as_ref().map(|f| f.scenario.id()).unwrap_or_else(|| "normal".into());
            let mut verdicts = Vec::with_capacity(cfg.modes.len());
            let mut reports = Vec::with_capacity(cfg.modes.len());
            for &mode in &cfg.modes {
                let v = verdicts_from_assessments(&assessments, mode).context(|| format!("predicting on {}", t.plan.name))?;
                let source = mode.source().to_string();
                let file = format!("{}.{source}.csv", t.plan.name);
                let vpath = verdict_dir.join(&file);
                write_verdicts(&v, &vpath).context(|| format!("writing {}", vpath.display()))?;
                let (report, classes) = evaluate(&experiment, &source, &v, t.truth.as_ref())
                    .context(|| format!("evaluating {}", t.plan.name))?;
                let cpath = class_dir.join(&file);
                write_class_trace(&classes, &cpath).context(|| format!("writing {}", cpath.display()))?;
                verdicts.push((mode, v));
                reports.push(report);
            }
            Ok(TraceRun {
                name: t.plan.name.clone(),
                scenario: t.plan.fault.as_ref().map(|f| f.scenario),
                truth: t.truth.clone(),
                verdicts,
                reports,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;

    // per-trace rows, named after the trace
    let per_run: Vec<MetricsReport> = runs
        .iter()
        .flat_map(|r| r.reports.iter().map(|m| MetricsReport { experiment: r.name.clone(), ..m.clone() }))
        .collect();
    let runs_path = out_dir.join("runs.csv");
    write_metrics(&per_run, &runs_path).context(|| format!("writing {}", runs_path.display()))?;

    // medians per experiment and mode, held-out normal rows first
    let mut metrics = Vec::new();
    let mut experiments: Vec<Option<FaultScenario>> = vec![None];
    experiments.extend(cfg.scenarios().into_iter().map(Some));
    for scenario in experiments {
        let group: Vec<&TraceRun> = runs.iter().filter(|r| r.scenario == scenario).collect();
        for (i, _) in cfg.modes.iter().enumerate() {
            let reports: Vec<MetricsReport> = group.iter().map(|r| r.reports[i].clone()).collect();
            metrics.push(median_report(&reports).context(|| "aggregating replications".into())?);
        }
    }
    let metrics_path = out_dir.join("metrics.csv");
    write_metrics(&metrics, &metrics_path).context(|| format!("writing {}", metrics_path.display()))?;

    let heldout = runs.iter().find(|r| r.scenario.is_none()).expect("plan has a held-out trace");
    let summary = far_summary(cfg, heldout);
    write_text(&out_dir.join("summary.txt"), &summary)?;
    Ok(ExperimentOutcome { resumed: reusable, runs, metrics, summary })
}
