use std::fs;
use std::path::Path;
use std::process::ExitCode;

use dflora::cli::main_with_args;
use dflora::orchestrator::RunSummary;
use dflora::subspace::projection_std;
use dflora::tensors;

fn dflora(args: &[&str]) -> ExitCode {
    main_with_args(std::iter::once("dflora").chain(args.iter().copied()))
}

const SMALL: [&str; 4] = ["method=f_lora", "pop=3", "subspace.d=40", "run.budget=360"];

fn run_small(out: &Path, extra: &[&str]) -> ExitCode {
    let mut args = vec!["run", "--quiet", "-o", out.to_str().unwrap(), "--run-id", "r"];
    args.extend(SMALL);
    args.extend(extra);
    dflora(&args)
}

#[test]
fn run_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run_small(dir.path(), &[]), ExitCode::SUCCESS);
    let out = dir.path().join("r");
    for f in ["config.json", "trace.jsonl", "summary.json", "tensors.bin"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let summary: RunSummary = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let trace = fs::read_to_string(out.join("trace.jsonl")).unwrap();
    assert_eq!(trace.lines().count(), summary.generations);
    assert!(summary.consumed <= 360);
    let t = tensors::load(&out.join("tensors.bin")).unwrap();
    assert!(t.iter().any(|t| t.name == "delta.layer.0.Q.B"));

    // The written config reproduces the run.
    let again = dir.path().join("again");
    let code = dflora(&["run", "--quiet", "-c", out.join("config.json").to_str().unwrap(), "-o", again.to_str().unwrap(), "--run-id", "r"]);
    assert_eq!(code, ExitCode::SUCCESS);
    assert_eq!(fs::read(out.join("trace.jsonl")).unwrap(), fs::read(again.join("r/trace.jsonl")).unwrap());
}

#[test]
fn invalid_input_exits_1_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    for bad in [&["run.budget=10"][..], &["no.such.key=1"], &["subspace.init=\"XYZ\""], &["run.patience=0"]] {
        assert_eq!(run_small(dir.path(), bad), ExitCode::from(1), "{bad:?}");
    }
    assert_eq!(dflora(&["run", "-c", dir.path().join("missing.json").to_str().unwrap()]), ExitCode::from(1));
    assert_eq!(dflora(&["frobnicate"]), ExitCode::from(1));
    assert_eq!(dflora(&["sweep", "--axis", "r", "--values", "2,zero"]), ExitCode::from(1));
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    assert_eq!(dflora(&["--help"]), ExitCode::SUCCESS);
}

#[test]
fn runtime_failure_exits_2_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = format!(
        r#"task.corpus={{"path":"{}","schema":"single_sentence","num_classes":2,"pattern":["text","it","was","<mask>","."],"verbalizer":{{"0":"bad","1":"great"}}}}"#,
        dir.path().display()
    );
    let code = run_small(dir.path(), &["task.source=\"corpus\"", &corpus]);
    assert_eq!(code, ExitCode::from(2));
    assert!(!dir.path().join("r").exists());
}

#[test]
fn stats_matches_the_projection_scale_used_by_runs() {
    let dir = tempfile::tempdir().unwrap();
    let stats_dir = dir.path().join("stats");
    let mut args = vec!["stats", "-o", stats_dir.to_str().unwrap()];
    args.extend(SMALL);
    assert_eq!(dflora(&args), ExitCode::SUCCESS);
    assert_eq!(run_small(dir.path(), &[]), ExitCode::SUCCESS);
    let summary: RunSummary =
        serde_json::from_str(&fs::read_to_string(dir.path().join("r/summary.json")).unwrap()).unwrap();
    let tsv = fs::read_to_string(stats_dir.join("stats.tsv")).unwrap();
    let rows: Vec<Vec<f64>> = tsv
        .lines()
        .skip(1)
        .map(|l| l.split('\t').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 4);
    for (l, row) in rows.iter().enumerate() {
        assert_eq!(row[0], l as f64);
        assert_eq!(row[1], summary.sigma_hat[l]);
        assert_eq!(row[2], projection_std(1.0, row[1], 40, 1.0).unwrap());
        assert_eq!(row[2], summary.projection_std[l]);
    }
}

#[test]
fn sweep_and_bench_write_summaries() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let mut args = vec!["sweep", "--axis", "init", "--values", "RIL,RI", "-o", out, "--run-id", "s"];
    args.extend(SMALL);
    assert_eq!(dflora(&args), ExitCode::SUCCESS);
    let tsv = fs::read_to_string(dir.path().join("s/summary.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 3);
    assert!(dir.path().join("s/value-RI/summary.json").is_file());

    let code = dflora(&["bench", "--optimizer", "fwa", "--objective", "rastrigin", "--evals", "2000", "--seeds", "2", "-o", out, "--run-id", "b"]);
    assert_eq!(code, ExitCode::SUCCESS);
    let b = dir.path().join("b");
    assert!(b.join("trace-seed1.tsv").is_file());
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(b.join("summary.json")).unwrap()).unwrap();
    assert!(summary["median_best"].as_f64().unwrap().is_finite());
}
