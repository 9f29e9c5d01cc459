//! Scoring verdict streams against ground truth.

use crate::error::{Error, Result};
use crate::pipeline::Verdict;
use crate::simulator::GroundTruth;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VerdictClass {
    TPFull,
    TPPartial,
    FalseAlarm,
    FalseNegative,
    TrueNegative,
}

impl VerdictClass {
    pub fn is_true_positive(self) -> bool {
        matches!(self, VerdictClass::TPFull | VerdictClass::TPPartial)
    }
}

impl fmt::Display for VerdictClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VerdictClass::TPFull => "TPFull",
            VerdictClass::TPPartial => "TPPartial",
            VerdictClass::FalseAlarm => "FalseAlarm",
            VerdictClass::FalseNegative => "FalseNegative",
            VerdictClass::TrueNegative => "TrueNegative",
        })
    }
}

impl FromStr for VerdictClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "TPFull" => VerdictClass::TPFull,
            "TPPartial" => VerdictClass::TPPartial,
            "FalseAlarm" => VerdictClass::FalseAlarm,
            "FalseNegative" => VerdictClass::FalseNegative,
            "TrueNegative" => VerdictClass::TrueNegative,
            _ => return Err(Error::Schema(format!("unknown verdict class {s:?}"))),
        })
    }
}

fn check_order(verdicts: &[Verdict]) -> Result<()> {
    for (i, w) in verdicts.windows(2).enumerate() {
        if w[1].timestamp <= w[0].timestamp {
            return Err(Error::Ordering { line: i + 2, timestamp: w[1].timestamp });
        }
    }
    Ok(())
}

/// Classes for a trace with an injected fault.
pub fn classify_verdicts(verdicts: &[Verdict], truth: &GroundTruth) -> Result<Vec<VerdictClass>> {
    if truth.crash <= truth.injection || truth.node_a.is_empty() || truth.node_b.is_empty() {
        return Err(Error::Contract("ground truth must name two nodes and crash after injection".into()));
    }
    check_order(verdicts)?;
    Ok(verdicts
        .iter()
        .map(|v| {
            let anomalous = v.state.is_anomalous();
            if v.timestamp < truth.injection {
                return if anomalous { VerdictClass::FalseAlarm } else { VerdictClass::TrueNegative };
            }
            if !anomalous {
                return VerdictClass::FalseNegative;
            }
            let hits = truth.targets().iter().filter(|n| v.ranking.contains(n)).count();
            match hits {
                2 => VerdictClass::TPFull,
                1 => VerdictClass::TPPartial,
                _ => VerdictClass::FalseAlarm,
            }
        })
        .collect())
}

/// Classes for a trace without faults.
pub fn classify_normal(verdicts: &[Verdict]) -> Result<Vec<VerdictClass>> {
    check_order(verdicts)?;
    Ok(verdicts
        .iter()
        .map(|v| if v.state.is_anomalous() { VerdictClass::FalseAlarm } else { VerdictClass::TrueNegative })
        .collect())
}

/// Percentage of false alarms among the given non-failing classes.
pub fn false_alarm_rate(classes: &[VerdictClass]) -> Result<f64> {
    let fa = classes.iter().filter(|c| **c == VerdictClass::FalseAlarm).count();
    let tn = classes.iter().filter(|c| **c == VerdictClass::TrueNegative).count();
    if fa + tn == 0 {
        return Err(Error::UndefinedMetric("false alarm rate over an empty non-failing region".into()));
    }
    Ok(100.0 * fa as f64 / (fa + tn) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Earliness {
    pub first_tp: u64,
    pub reaction: u64,
    pub earliness: u64,
    pub tpr: f64,
}

/// Reaction, earliness and TPR, or `None` when no true positive exists.
/// `timestamps[i]` is the timestamp of `classes[i]`.
pub fn earliness_metrics(timestamps: &[u64], classes: &[VerdictClass], truth: &GroundTruth) -> Result<Option<Earliness>> {
    if timestamps.len() != classes.len() {
        return Err(Error::Contract("one timestamp per class required".into()));
    }
    let first = timestamps
        .iter()
        .zip(classes)
        .find(|(t, c)| **t >= truth.injection && **t < truth.crash && c.is_true_positive());
    let Some((&first_tp, _)) = first else {
        return Ok(None);
    };
    let window: Vec<&VerdictClass> = timestamps
        .iter()
        .zip(classes)
        .filter(|(t, _)| **t >= first_tp && **t < truth.crash)
        .map(|(_, c)| c)
        .collect();
    let tp = window.iter().filter(|c| c.is_true_positive()).count();
    Ok(Some(Earliness {
        first_tp,
        reaction: first_tp - truth.injection,
        earliness: truth.crash - first_tp,
        tpr: 100.0 * tp as f64 / window.len() as f64,
    }))
}

/// One line of the metrics summary. Absent values are not applicable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub experiment: String,
    pub source: String,
    pub far_pct: Option<f64>,
    pub injection_min: Option<f64>,
    pub reaction_min: Option<f64>,
    pub earliness_min: Option<f64>,
    pub tpr_pct: Option<f64>,
}

/// Per-timestamp classes of one evaluated trace.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClassTrace {
    pub entries: Vec<(u64, VerdictClass)>,
}

/// Classifies a verdict stream and computes its metrics. Without ground
/// truth the whole stream counts as non-failing.
pub fn evaluate(
    experiment: &str,
    source: &str,
    verdicts: &[Verdict],
    truth: Option<&GroundTruth>,
) -> Result<(MetricsReport, ClassTrace)> {
    let classes = match truth {
        Some(t) => classify_verdicts(verdicts, t)?,
        None => classify_normal(verdicts)?,
    };
    let timestamps: Vec<u64> = verdicts.iter().map(|v| v.timestamp).collect();
    let non_failing: Vec<VerdictClass> = timestamps
        .iter()
        .zip(&classes)
        .filter(|(t, _)| truth.is_none_or(|g| **t < g.injection))
        .map(|(_, c)| *c)
        .collect();
    let far_pct = false_alarm_rate(&non_failing).ok();
    let mut report = MetricsReport {
        experiment: experiment.to_string(),
        source: source.to_string(),
        far_pct,
        injection_min: None,
        reaction_min: None,
        earliness_min: None,
        tpr_pct: None,
    };
    if let Some(t) = truth {
        report.injection_min = Some(t.horizon() as f64);
        if let Some(e) = earliness_metrics(&timestamps, &classes, t)? {
            report.reaction_min = Some(e.reaction as f64);
            report.earliness_min = Some(e.earliness as f64);
            report.tpr_pct = Some(e.tpr);
        }
    }
    let trace = ClassTrace { entries: timestamps.into_iter().zip(classes).collect() };
    Ok((report, trace))
}

fn median(mut values: Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 { values[n / 2] } else { 0.5 * (values[n / 2 - 1] + values[n / 2]) })
}

/// Field-wise median over replications, ignoring absent values. The
/// experiment and source are taken from the first report.
pub fn median_report(reports: &[MetricsReport]) -> Result<MetricsReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::UndefinedMetric("median over no reports".into()))?;
    let field = |f: fn(&MetricsReport) -> Option<f64>| median(reports.iter().filter_map(f).collect());
    Ok(MetricsReport {
        experiment: first.experiment.clone(),
        source: first.source.clone(),
        far_pct: field(|r| r.far_pct),
        injection_min: field(|r| r.injection_min),
        reaction_min: field(|r| r.reaction_min),
        earliness_min: field(|r| r.earliness_min),
        tpr_pct: field(|r| r.tpr_pct),
    })
}

const METRICS_HEADER: &str = "experiment,source,far_pct,injection_min,reaction_min,earliness_min,tpr_pct";
const TRACE_HEADER: &str = "timestamp,class";

fn fmt_field(v: Option<f64>) -> String {
    match v {
        // four decimals are plenty for percentages and keep files stable
        Some(x) => format!("{}", (x * 1e4).round() / 1e4),
        None => "NA".to_string(),
    }
}

fn parse_field(s: &str, line: usize) -> Result<Option<f64>> {
    if s == "NA" {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| Error::Parse { line, message: format!("bad metric value {s:?}") })
}

fn write_text(path: &Path, body: &str) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    out.write_all(body.as_bytes()).and_then(|_| out.flush()).map_err(|e| Error::io(path, e))
}

pub fn write_metrics(reports: &[MetricsReport], path: impl AsRef<Path>) -> Result<()> {
    let mut body = format!("{METRICS_HEADER}\n");
    for r in reports {
        if r.experiment.contains(',') || r.source.contains(',') {
            return Err(Error::InvalidValue("experiment and source names must not contain commas".into()));
        }
        body.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.experiment,
            r.source,
            fmt_field(r.far_pct),
            fmt_field(r.injection_min),
            fmt_field(r.reaction_min),
            fmt_field(r.earliness_min),
            fmt_field(r.tpr_pct)
        ));
    }
    write_text(path.as_ref(), &body)
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsReport>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if i == 0 {
            if line.trim() != METRICS_HEADER {
                return Err(Error::Parse { line: 1, message: format!("expected header {METRICS_HEADER:?}") });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(Error::Parse { line: i + 1, message: format!("expected 7 fields, got {}", f.len()) });
        }
        out.push(MetricsReport {
            experiment: f[0].to_string(),
            source: f[1].to_string(),
            far_pct: parse_field(f[2], i + 1)?,
            injection_min: parse_field(f[3], i + 1)?,
            reaction_min: parse_field(f[4], i + 1)?,
            earliness_min: parse_field(f[5], i + 1)?,
            tpr_pct: parse_field(f[6], i + 1)?,
        });
    }
    Ok(out)
}

pub fn write_class_trace(trace: &ClassTrace, path: impl AsRef<Path>) -> Result<()> {
    let mut body = format!("{TRACE_HEADER}\n");
    for (t, c) in &trace.entries {
        body.push_str(&format!("{t},{c}\n"));
    }
    write_text(path.as_ref(), &body)
}

pub fn read_class_trace(path: impl AsRef<Path>) -> Result<ClassTrace> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if i == 0 {
            if line.trim() != TRACE_HEADER {
                return Err(Error::Parse { line: 1, message: format!("expected header {TRACE_HEADER:?}") });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let bad = |m: String| Error::Parse { line: i + 1, message: m };
        let (t, c) = line.split_once(',').ok_or_else(|| bad("expected 2 fields".into()))?;
        let t: u64 = t.parse().map_err(|_| bad(format!("bad timestamp {t:?}")))?;
        entries.push((t, c.parse().map_err(|e: Error| bad(e.to_string()))?));
    }
    Ok(ClassTrace { entries })
}

/// Writes the one-line summary and the classification trace of a report.
pub fn report(metrics: &MetricsReport, trace: &ClassTrace, metrics_path: impl AsRef<Path>, trace_path: impl AsRef<Path>) -> Result<()> {
    write_metrics(std::slice::from_ref(metrics), metrics_path)?;
    write_class_trace(trace, trace_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::Source;
    use crate::ranker::{NodeRanking, NodeScore};
    use crate::simulator::{FaultKind, Pattern};
    use proptest::prelude::*;

    fn truth(injection: u64, crash: u64) -> GroundTruth {
        GroundTruth {
            injection,
            crash,
            node_a: "m1".into(),
            node_b: "s1".into(),
            kind: FaultKind::CpuHog,
            pattern: Pattern::Random,
        }
    }

    fn ranked(t: u64, nodes: &[&str]) -> Verdict {
        let entries = nodes
            .iter()
            .enumerate()
            .map(|(i, n)| NodeScore { node: n.to_string(), count: 10 - i, centrality: 0.0 })
            .collect();
        Verdict::anomalous(t, Source::PreventA, NodeRanking::from_scores(entries).unwrap())
    }

    #[test]
    fn classification_rules() {
        let g = truth(10, 20);
        let v = vec![
            Verdict::normal(5, Source::PreventA),
            ranked(6, &["m1"]),
            Verdict::normal(10, Source::PreventA),
            ranked(11, &["m1", "m0", "s1"]),
            ranked(12, &["s1", "m2"]),
            ranked(13, &["m0", "m2"]),
            Verdict::anomalous(14, Source::PreventA, NodeRanking::empty()),
        ];
        use VerdictClass::*;
        assert_eq!(
            classify_verdicts(&v, &g).unwrap(),
            vec![TrueNegative, FalseAlarm, FalseNegative, TPFull, TPPartial, FalseAlarm, FalseAlarm]
        );
        let bad = vec![Verdict::normal(5, Source::PreventA), Verdict::normal(5, Source::PreventA)];
        assert!(matches!(classify_verdicts(&bad, &g), Err(Error::Ordering { .. })));
        assert!(matches!(classify_verdicts(&v, &truth(10, 10)), Err(Error::Contract(_))));
    }

    #[test]
    fn far_arithmetic() {
        use VerdictClass::*;
        assert_eq!(false_alarm_rate(&[TrueNegative; 10]).unwrap(), 0.0);
        let mut c = vec![TrueNegative; 8];
        c.extend([FalseAlarm, FalseAlarm]);
        assert_eq!(false_alarm_rate(&c).unwrap(), 20.0);
        assert!(matches!(false_alarm_rate(&[]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn reaction_and_earliness_from_reference_row() {
        // horizon 41, first TP 14 minutes in, every later minute TP
        let g = truth(100, 141);
        let v: Vec<Verdict> = (100..141)
            .map(|t| if t < 114 { Verdict::normal(t, Source::PreventE) } else { ranked(t, &["m1"]) })
            .collect();
        let (r, _) = evaluate("CPUH-Rnd", "prevent_e", &v, Some(&g)).unwrap();
        assert_eq!(r.injection_min, Some(41.0));
        assert_eq!(r.reaction_min, Some(14.0));
        assert_eq!(r.earliness_min, Some(27.0));
        assert_eq!(r.tpr_pct, Some(100.0));
        assert_eq!(r.far_pct, None);
    }

    #[test]
    fn no_true_positive_is_not_applicable() {
        let g = truth(3, 8);
        let v: Vec<Verdict> = (0..8).map(|t| Verdict::normal(t, Source::PreventE)).collect();
        let (r, _) = evaluate("x", "prevent_e", &v, Some(&g)).unwrap();
        assert_eq!((r.reaction_min, r.earliness_min, r.tpr_pct), (None, None, None));
        assert_eq!(r.far_pct, Some(0.0));
    }

    #[test]
    fn first_tp_at_injection() {
        let g = truth(3, 8);
        let v: Vec<Verdict> = (0..8).map(|t| if t >= 3 { ranked(t, &["m1", "s1"]) } else { Verdict::normal(t, Source::PreventE) }).collect();
        let (r, trace) = evaluate("x", "prevent_e", &v, Some(&g)).unwrap();
        assert_eq!(r.reaction_min, Some(0.0));
        assert_eq!(r.earliness_min, Some(5.0));
        assert_eq!(trace.entries.len(), 8);
    }

    #[test]
    fn median_ignores_missing() {
        let mk = |far, tpr| MetricsReport {
            experiment: "e".into(),
            source: "s".into(),
            far_pct: far,
            injection_min: Some(40.0),
            reaction_min: None,
            earliness_min: None,
            tpr_pct: tpr,
        };
        let m = median_report(&[mk(Some(1.0), None), mk(Some(5.0), Some(60.0)), mk(Some(3.0), Some(80.0)), mk(None, None)]).unwrap();
        assert_eq!(m.far_pct, Some(3.0));
        assert_eq!(m.tpr_pct, Some(70.0));
        assert_eq!(m.reaction_min, None);
        assert!(median_report(&[]).is_err());
    }

    #[test]
    fn report_files_round_trip() {
        let r = MetricsReport {
            experiment: "MemL-Lin".into(),
            source: "ensemble".into(),
            far_pct: Some(12.5),
            injection_min: Some(187.0),
            reaction_min: Some(20.0),
            earliness_min: Some(167.0),
            tpr_pct: Some(96.4286),
        };
        let trace = ClassTrace { entries: vec![(1, VerdictClass::TrueNegative), (2, VerdictClass::TPPartial)] };
        let dir = tempfile::tempdir().unwrap();
        let (mp, tp) = (dir.path().join("m.csv"), dir.path().join("t.csv"));
        report(&r, &trace, &mp, &tp).unwrap();
        assert_eq!(read_metrics(&mp).unwrap(), vec![r]);
        assert_eq!(read_class_trace(&tp).unwrap(), trace);
        let text = std::fs::read_to_string(&mp).unwrap();
        assert_eq!(text.lines().nth(1).unwrap().split(',').count(), 7);

        write_class_trace(&ClassTrace::default(), &tp).unwrap();
        assert_eq!(std::fs::read_to_string(&tp).unwrap(), "timestamp,class\n");
    }

    proptest! {
        #[test]
        fn identities_hold(states in proptest::collection::vec(0u8..4, 1..80), injection_at in 0usize..40) {
            let n = states.len() as u64;
            let injection = (injection_at as u64).min(n - 1);
            let g = truth(injection, n);
            let v: Vec<Verdict> = states
                .iter()
                .enumerate()
                .map(|(t, s)| match s {
                    0 => Verdict::normal(t as u64, Source::Ensemble),
                    1 => ranked(t as u64, &["m1", "s1"]),
                    2 => ranked(t as u64, &["s1"]),
                    _ => ranked(t as u64, &["m9"]),
                })
                .collect();
            let (r, trace) = evaluate("p", "ensemble", &v, Some(&g)).unwrap();
            prop_assert_eq!(trace.entries.len(), v.len());
            if let (Some(re), Some(ea)) = (r.reaction_min, r.earliness_min) {
                prop_assert_eq!(re + ea, r.injection_min.unwrap());
                let tpr = r.tpr_pct.unwrap();
                prop_assert!((0.0..=100.0).contains(&tpr));
            }
            if let Some(far) = r.far_pct {
                prop_assert!((0.0..=100.0).contains(&far));
            }
        }
    }
}
