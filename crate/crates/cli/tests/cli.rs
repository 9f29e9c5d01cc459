use failcast::pipeline::PipelineBundle;
use failcast::telemetry::load_series;
use failcast_cli::commands::simulation_plan;
use failcast_cli::ExperimentConfig;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

const SMALL: &str = "\
[run]
seed = 4

[cluster]
pairs = 2

[simulation]
train_days = 1
heldout_minutes = 120
replications = 2
kinds = CPUH
patterns = Lin

[autoencoder]
epochs = 2

[rbm]
epochs = 2
";

fn failcast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_failcast")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A small config simulated and trained once, shared by the tests below.
struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn config(&self) -> PathBuf {
        self.dir.path().join("small.ini")
    }
    fn traces(&self) -> PathBuf {
        self.dir.path().join("traces")
    }
    fn bundle(&self) -> PathBuf {
        self.dir.path().join("bundle")
    }
    fn out(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

fn fixture() -> &'static Fixture {
    static CELL: OnceLock<Fixture> = OnceLock::new();
    CELL.get_or_init(|| {
        let f = Fixture { dir: tempfile::tempdir().unwrap() };
        std::fs::write(f.config(), SMALL).unwrap();
        let sim = failcast(&["simulate", "--config", s(&f.config()), "--out", s(&f.traces())]);
        assert!(sim.status.success(), "{}", stderr(&sim));
        let normal = f.traces().join("normal.csv");
        let train = failcast(&["train", "--config", s(&f.config()), "--trace", s(&normal), "--out", s(&f.bundle())]);
        assert!(train.status.success(), "{}", stderr(&train));
        f
    })
}

fn list(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    names
}

#[test]
fn simulate_writes_traces_and_manifests() {
    let f = fixture();
    assert_eq!(
        list(&f.traces()),
        [
            "CPUH-Lin_r0.csv",
            "CPUH-Lin_r0.manifest.csv",
            "CPUH-Lin_r1.csv",
            "CPUH-Lin_r1.manifest.csv",
            "heldout.csv",
            "normal.csv"
        ]
    );
    let manifest = std::fs::read_to_string(f.traces().join("CPUH-Lin_r1.manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 2);
    assert!(manifest.lines().nth(1).unwrap().ends_with(",m1,s1,CpuHog,Linear"), "{manifest}");
}

#[test]
fn full_matrix_plan_cycles_target_pairs() {
    let mut cfg = ExperimentConfig::default();
    cfg.simulation.replications = 10;
    let plan = simulation_plan(&cfg);
    let failing: Vec<_> = plan.iter().filter_map(|t| t.fault.as_ref()).collect();
    assert_eq!(failing.len(), 90);
    assert_eq!(plan.len() - failing.len(), 2);
    for scenario in cfg.scenarios() {
        let pairs: Vec<usize> = failing.iter().filter(|f| f.scenario == scenario).map(|f| f.pair).collect();
        assert_eq!(pairs.len(), 10);
        assert!(pairs.windows(2).all(|w| w[1] == (w[0] + 1) % 4), "{pairs:?}");
    }
    let names: std::collections::BTreeSet<_> = plan.iter().map(|t| t.name.clone()).collect();
    assert_eq!(names.len(), plan.len());
}

#[test]
fn dry_run_prints_the_plan_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never");
    let o = failcast(&["simulate", "--seed", "3", "--out", s(&out), "--dry-run"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("seed 3: 4 pairs, 96 KPIs, 47 traces"), "{text}");
    assert!(text.contains("MemL-Lin_r4"));
    assert!(!out.exists());

    let o = failcast(&["experiment", "--out", s(&out), "--dry-run"]);
    assert!(o.status.success());
    assert!(!out.exists());
}

#[test]
fn training_log_echoes_the_seed_and_bundle_matches_traces() {
    let f = fixture();
    let log = std::fs::read_to_string(f.bundle().join("train.log")).unwrap();
    assert!(log.starts_with("seed = 4\n"), "{log}");
    assert!(log.contains("autoencoder epoch 2 loss"));
    assert!(log.contains("rbm epoch 2 reconstruction"));

    let bundle = PipelineBundle::load(f.bundle()).unwrap();
    let trace = load_series(f.traces().join("heldout.csv"), None).unwrap();
    assert_eq!(bundle.catalog().hash(), trace.catalog().hash());
    assert!(log.contains(&bundle.catalog().hash()));
}

#[test]
fn predict_writes_one_verdict_per_snapshot() {
    let f = fixture();
    let trace = f.traces().join("CPUH-Lin_r0.csv");
    let bundle = f.bundle();
    let rows = std::fs::read_to_string(&trace).unwrap().lines().count() - 1;
    for (mode, n) in [("e", None), ("a", None), ("ensemble", None), ("loud", Some("4"))] {
        let out = f.out(&format!("predict_{mode}.csv"));
        let mut args = vec!["predict", "--bundle", s(&bundle), "--trace", s(&trace), "--mode", mode, "--out", s(&out)];
        if let Some(n) = n {
            args.extend(["--loud-n", n]);
        }
        let o = failcast(&args);
        assert!(o.status.success(), "{mode}: {}", stderr(&o));
        let written = std::fs::read_to_string(&out).unwrap();
        assert_eq!(written.lines().count() - 1, rows, "{mode}");
    }
}

#[test]
fn mode_errors_are_usage_errors() {
    let f = fixture();
    let trace = f.traces().join("heldout.csv");
    let out = f.out("unused.csv");
    let bundle = f.bundle();
    let base = ["predict", "--bundle", s(&bundle), "--trace", s(&trace), "--out", s(&out)];
    for extra in [&["--mode", "loud"][..], &["--mode", "z"], &["--mode", "e", "--loud-n", "3"], &["--mode", "loud", "--loud-n", "0"]] {
        let args: Vec<&str> = base.iter().copied().chain(extra.iter().copied()).collect();
        let o = failcast(&args);
        assert_eq!(o.status.code(), Some(2), "{extra:?}: {}", stderr(&o));
    }
    assert!(!out.exists());
}

#[test]
fn trace_from_another_cluster_is_incompatible() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    // a three-pair cluster yields a different catalog
    let cfg = dir.path().join("three.ini");
    std::fs::write(&cfg, "[cluster]\npairs = 3\n[simulation]\ntrain_days = 0.05\ncalibration_fraction = 0.5\nheldout_minutes = 30\nreplications = 1\nkinds = CPUH\npatterns = Lin\n").unwrap();
    let o = failcast(&["simulate", "--config", s(&cfg), "--out", s(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = failcast(&[
        "predict",
        "--bundle",
        s(&f.bundle()),
        "--trace",
        s(&dir.path().join("heldout.csv")),
        "--mode",
        "e",
        "--out",
        s(&dir.path().join("v.csv")),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("incompatible"), "{}", stderr(&o));
}

#[test]
fn missing_inputs_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = failcast(&["train", "--trace", s(&dir.path().join("absent.csv")), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("absent.csv"));
    let o = failcast(&["simulate", "--config", s(&dir.path().join("absent.ini")), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn config_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.ini");
    std::fs::write(&cfg, "[autoencoder]\nepochs = 0\n").unwrap();
    let o = failcast(&["simulate", "--config", s(&cfg), "--out", s(dir.path()), "--dry-run"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("autoencoder.epochs"), "{}", stderr(&o));
}

#[test]
fn evaluate_with_and_without_ground_truth() {
    let f = fixture();
    let mut verdicts = Vec::new();
    for r in 0..2 {
        let v = f.out(&format!("eval_r{r}.csv"));
        let trace = f.traces().join(format!("CPUH-Lin_r{r}.csv"));
        let o = failcast(&["predict", "--bundle", s(&f.bundle()), "--trace", s(&trace), "--mode", "a", "--out", s(&v)]);
        assert!(o.status.success());
        verdicts.push(v);
    }
    let manifests: Vec<PathBuf> = (0..2).map(|r| f.traces().join(format!("CPUH-Lin_r{r}.manifest.csv"))).collect();

    // one file: a Table-IV-style row plus a class trace
    let single = f.out("single_metrics.csv");
    let o = failcast(&["evaluate", "--verdicts", s(&verdicts[0]), "--manifest", s(&manifests[0]), "--out", s(&single)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = failcast::eval::read_metrics(&single).unwrap();
    assert_eq!((rows[0].experiment.as_str(), rows[0].source.as_str()), ("CPUH-Lin", "prevent_a"));
    assert!(rows[0].injection_min.is_some());
    assert!(f.out("eval_r0.classes.csv").exists());

    // two files: field-wise median of the two rows
    let both = f.out("median_metrics.csv");
    let o = failcast(&[
        "evaluate",
        "--verdicts",
        s(&verdicts[0]),
        s(&verdicts[1]),
        "--manifest",
        s(&manifests[0]),
        s(&manifests[1]),
        "--out",
        s(&both),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let per_file: Vec<_> = (0..2)
        .map(|i| {
            let p = f.out(&format!("one_{i}.csv"));
            failcast(&["evaluate", "--verdicts", s(&verdicts[i]), "--manifest", s(&manifests[i]), "--out", s(&p)]);
            failcast::eval::read_metrics(&p).unwrap().remove(0)
        })
        .collect();
    let median = failcast::eval::read_metrics(&both).unwrap().remove(0);
    let expected = failcast::eval::median_report(&per_file).unwrap();
    assert_eq!(median.injection_min, expected.injection_min);
    assert_eq!(median.far_pct, expected.far_pct);

    // no manifest: the trace is treated as normal
    let normal = f.out("normal_metrics.csv");
    let o = failcast(&["evaluate", "--verdicts", s(&verdicts[0]), "--out", s(&normal)]);
    assert!(o.status.success());
    let row = failcast::eval::read_metrics(&normal).unwrap().remove(0);
    assert_eq!(row.experiment, "normal");
    assert!(row.far_pct.is_some() && row.injection_min.is_none() && row.tpr_pct.is_none());
}

#[test]
fn experiment_resumes_from_a_matching_bundle() {
    let f = fixture();
    let out = f.out("experiment");
    let first = failcast(&["experiment", "--config", s(&f.config()), "--out", s(&out), "--resume"]);
    assert!(first.status.success(), "{}", stderr(&first));
    assert!(!stdout(&first).contains("reused"));
    assert!(stdout(&first).contains("loud FAR non-increasing in N"));
    let metrics = std::fs::read(out.join("metrics.csv")).unwrap();

    let second = failcast(&["experiment", "--config", s(&f.config()), "--out", s(&out), "--resume"]);
    assert!(second.status.success());
    assert!(stdout(&second).contains("reused"));
    assert_eq!(std::fs::read(out.join("metrics.csv")).unwrap(), metrics);

    // a different seed changes the training settings, so no reuse
    let third = failcast(&["experiment", "--config", s(&f.config()), "--seed", "5", "--out", s(&out), "--resume"]);
    assert!(third.status.success());
    assert!(!stdout(&third).contains("reused"));

    let text = String::from_utf8(metrics).unwrap();
    let header = text.lines().next().unwrap();
    assert_eq!(header, "experiment,source,far_pct,injection_min,reaction_min,earliness_min,tpr_pct");
    // held-out rows first, one per mode, then one per scenario and mode
    assert_eq!(text.lines().count(), 1 + 6 + 6);
    assert!(text.lines().nth(1).unwrap().starts_with("normal,prevent_e,"));
}

#[test]
fn thread_cap_must_be_positive() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_failcast"))
        .args(["simulate", "--out", s(dir.path()), "--dry-run"])
        .env("PREVENT_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    let o = Command::new(env!("CARGO_BIN_EXE_failcast"))
        .args(["simulate", "--out", s(dir.path()), "--dry-run"])
        .env("PREVENT_THREADS", "1")
        .output()
        .unwrap();
    assert!(o.status.success());
}
