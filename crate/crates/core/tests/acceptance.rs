//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::time::Instant;

use dflora::config::{ExperimentConfig, Prepared};
use dflora::optim::cma::symmetric_eigen;
use dflora::optim::bench::minimize_with;
use dflora::optim::{minimize, random_search, Benchmark, BenchmarkObjective, MinimizeOptions, Optimizer, OptimizerKind};
use dflora::orchestrator::{run, Method, RunConfig, RunReport, Seeds, Trainer};
use dflora::seeds::derive_seed;
use dflora::subspace::{InitMode, LayerSubspace, ProjectionTensor};
use dflora::tensors;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn experiment(method: Method, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.optimizer.method = method;
    cfg.optimizer.population = match method {
        Method::CLora => 20,
        Method::FLora => 5,
    };
    cfg.run.seeds = Seeds {
        model: 7,
        data: seed,
        optimizer: seed,
    };
    cfg
}

struct Done {
    report: RunReport,
    secs: f64,
    model_checksum_before: String,
    model_checksum_after: String,
    projections_match: bool,
}

fn execute(prepared: &Prepared, rc: &RunConfig) -> Done {
    let before = prepared.model.checksum();
    let started = Instant::now();
    let report = run(rc, &prepared.model, prepared.data(), |_| {}).expect("run succeeds");
    let secs = started.elapsed().as_secs_f64();
    let after = prepared.model.checksum();
    // Rebuild the projections from scratch and compare their bytes.
    let fresh = Trainer::new(rc, &prepared.model, prepared.data()).expect("trainer");
    let digest = |s: &[LayerSubspace]| tensors::checksum(&s.iter().flat_map(|l| l.tensors()).collect::<Vec<_>>());
    let projections_match = digest(fresh.subspaces()) == digest(&report.subspaces);
    Done {
        report,
        secs,
        model_checksum_before: before,
        model_checksum_after: after,
        projections_match,
    }
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn criteria_1_2() -> (Outcome, Outcome) {
    let started = Instant::now();
    let sphere = BenchmarkObjective::new(Benchmark::Sphere, 10).unwrap();
    let rastrigin = BenchmarkObjective::new(Benchmark::Rastrigin, 10).unwrap();
    let mut worst_sym: f64 = 0.0;
    let mut min_eig = f64::INFINITY;
    let mut min_sigma = f64::INFINITY;
    let mut tells = 0usize;
    let mut cma_final = Vec::new();
    for &s in &SEEDS {
        let m = minimize_with(OptimizerKind::Cma, &sphere, 5000, s, &MinimizeOptions::default(), |opt| {
            if let Optimizer::Cma(state) = opt {
                let n = state.dim();
                let c = state.covariance();
                for i in 0..n {
                    for j in 0..n {
                        worst_sym = worst_sym.max((c[i * n + j] - c[j * n + i]).abs());
                    }
                }
                let (values, _) = symmetric_eigen(c, n).expect("eigen");
                min_eig = min_eig.min(values[0]);
                min_sigma = min_sigma.min(state.sigma());
                tells += 1;
            }
        })
        .unwrap();
        cma_final.push(m.best_fitness);
    }
    let fwa_sphere: Vec<f64> = SEEDS
        .iter()
        .map(|&s| minimize(OptimizerKind::Fwa, &sphere, 5000, s).unwrap().best_fitness)
        .collect();
    let mut wins = 0;
    for &s in &SEEDS {
        let f = minimize(OptimizerKind::Fwa, &rastrigin, 6000, s).unwrap().best_fitness;
        let r = random_search(&rastrigin, 6000, derive_seed(s, 0xba5e));
        wins += (f < r) as usize;
    }
    let secs = started.elapsed().as_secs_f64();
    let c1 = outcome(
        median(&cma_final) < 1e-8 && median(&fwa_sphere) < 1e-3 && wins >= 4 && secs < 30.0,
        format!(
            "CMA sphere median {:.2e}; FWA sphere median {:.2e}; FWA beats random on Rastrigin {wins}/5; {secs:.2}s",
            median(&cma_final),
            median(&fwa_sphere)
        ),
    );
    let c2 = outcome(
        worst_sym < 1e-12 && min_eig > 0.0 && min_sigma > 0.0,
        format!("{tells} tells: max asymmetry {worst_sym:.1e}, min eigenvalue {min_eig:.2e}, min sigma {min_sigma:.2e}"),
    );
    (c1, c2)
}

fn criterion_3() -> Outcome {
    let cfg = experiment(Method::CLora, 0);
    let prepared = cfg.prepare().unwrap();
    let rc = cfg.run_config();
    let logits = prepared.model.forward(&[], &prepared.train.tokens).unwrap();
    let frozen = prepared.task.score(&logits, &prepared.train.labels).unwrap().loss;
    let mut trainer = Trainer::new(&rc, &prepared.model, prepared.data()).unwrap();
    let zero = vec![0.0; rc.search_dim()];
    let losses: Vec<f64> = (0..prepared.model.num_layers())
        .map(|l| trainer.evaluate_candidate(l, &zero).unwrap())
        .collect();
    let identical = losses.iter().all(|l| l.to_bits() == frozen.to_bits());
    outcome(
        identical && prepared.train.len() == 32,
        format!("frozen loss {frozen:.17}; zero-vector loss per layer {losses:?} on {} instances", prepared.train.len()),
    )
}

fn criterion_4() -> Outcome {
    let started = Instant::now();
    let (rows, d) = (256, 400);
    let sample_std = |t: &ProjectionTensor| {
        let e = t.entries();
        let mean = e.iter().sum::<f64>() / e.len() as f64;
        (e.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / e.len() as f64).sqrt()
    };
    let base = ProjectionTensor::from_hidden_std(rows, d, 2.0, 1.0, 1.0, 11).unwrap();
    let doubled = ProjectionTensor::from_hidden_std(rows, d, 4.0, 1.0, 1.0, 12).unwrap();
    let (s1, s2) = (sample_std(&base), sample_std(&doubled));
    let secs = started.elapsed().as_secs_f64();
    outcome(
        (s1 / 0.1 - 1.0).abs() < 0.02 && (s2 / s1 / 2.0 - 1.0).abs() < 0.02 && rows * d >= 100_000 && secs < 5.0,
        format!("{} entries: std {s1:.5} (target 0.1); doubled sigma_hat gives ratio {:.4}; {secs:.2}s", rows * d, s2 / s1),
    )
}

fn criterion_5() -> Outcome {
    let cfg = experiment(Method::CLora, 0);
    let prepared = cfg.prepare().unwrap();
    let mut rc = cfg.run_config();
    rc.patience = rc.budget;
    let done = execute(&prepared, &rc);
    let s = &done.report.summary;
    let sum: usize = s.ledger.iter().sum();
    let share = rc.budget / prepared.model.num_layers();
    let balanced = s.ledger.iter().all(|&c| c.abs_diff(share) <= rc.population);
    let monotone = done.report.records.windows(2).all(|w| w[0].consumed < w[1].consumed);
    outcome(
        s.consumed == 6000 && sum == s.consumed && balanced && !s.stopped_early && monotone,
        format!("consumed {} of 6000, ledger {:?} (sum {sum}), {:.1}s", s.consumed, s.ledger, done.secs),
    )
}

struct MethodRuns {
    dev: Vec<f64>,
    done: Vec<Done>,
}

fn criterion_6(gates: &mut Vec<String>) -> (Outcome, MethodRuns, MethodRuns, bool) {
    let mut gates_ok = true;
    let mut by_method = Vec::new();
    let mut lines = Vec::new();
    for method in [Method::CLora, Method::FLora] {
        let mut ok = 0;
        let mut runs = MethodRuns {
            dev: Vec::new(),
            done: Vec::new(),
        };
        let mut cells = Vec::new();
        for &s in &SEEDS {
            let cfg = experiment(method, s);
            let synth = dflora::orchestrator::synth_task(
                s,
                &cfg.task.synthetic,
                &cfg.model.model_config(3, cfg.run.seeds.model),
            )
            .unwrap();
            let gate = synth.probe.train_accuracy >= 0.95 && synth.baseline.accuracy <= 0.60;
            gates_ok &= gate;
            if method == Method::CLora {
                gates.push(format!(
                    "seed {s}: probe {:.3}, zero-delta {:.3}",
                    synth.probe.train_accuracy, synth.baseline.accuracy
                ));
            }
            let prepared = cfg.prepare().unwrap();
            let rc = cfg.run_config();
            assert_eq!((rc.budget, rc.d, rc.r), (6000, 500, 2));
            let done = execute(&prepared, &rc);
            let s6 = &done.report.summary;
            let pass = s6.train.accuracy >= 0.9 && s6.dev.accuracy >= 0.8 && done.secs < 600.0;
            ok += pass as usize;
            cells.push(format!(
                "{:.2}/{:.2}{}",
                s6.train.accuracy,
                s6.dev.accuracy,
                if pass { "" } else { "*" }
            ));
            runs.dev.push(s6.dev.accuracy);
            runs.done.push(done);
        }
        let slowest = runs.done.iter().map(|d| d.secs).fold(0.0, f64::max);
        lines.push(format!("{method} {ok}/5 [{}] slowest {slowest:.0}s", cells.join(" ")));
        by_method.push((ok, runs));
    }
    let (f_ok, f_runs) = by_method.pop().unwrap();
    let (c_ok, c_runs) = by_method.pop().unwrap();
    let o = outcome(
        gates_ok && c_ok >= 4 && f_ok >= 4,
        format!("train/dev per seed: {}", lines.join("; ")),
    );
    (o, c_runs, f_runs, gates_ok)
}

fn criterion_7() -> Outcome {
    let mut means = Vec::new();
    let mut dims_ok = true;
    for r in [2usize, 4, 8, 16] {
        let mut dev = Vec::new();
        for &s in &SEEDS {
            let mut cfg = experiment(Method::FLora, s);
            cfg.subspace.r = r;
            let prepared = cfg.prepare().unwrap();
            let rc = cfg.run_config();
            let trainer = Trainer::new(&rc, &prepared.model, prepared.data()).unwrap();
            dims_ok &= rc.search_dim() == 4 * rc.d && trainer.subspaces().iter().all(|l| l.search_dim() == 4 * rc.d);
            dev.push(run(&rc, &prepared.model, prepared.data(), |_| {}).unwrap().summary.dev.accuracy);
        }
        means.push((r, dev.iter().sum::<f64>() / dev.len() as f64));
    }
    let best = means.iter().map(|m| m.1).fold(0.0, f64::max);
    let r2 = means[0].1;
    outcome(
        dims_ok && best - r2 <= 0.02,
        format!(
            "F-LoRA mean dev accuracy over 5 seeds: {}; search dim 4d for every r: {dims_ok}",
            means.iter().map(|(r, a)| format!("r={r} {a:.4}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn criterion_8(ril: &MethodRuns) -> Outcome {
    let mut wins = 0;
    let mut cells = Vec::new();
    for (i, &s) in SEEDS.iter().enumerate() {
        let mut cfg = experiment(Method::CLora, s);
        cfg.subspace.init = InitMode::Ri;
        let prepared = cfg.prepare().unwrap();
        let ri = run(&cfg.run_config(), &prepared.model, prepared.data(), |_| {}).unwrap().summary.dev.accuracy;
        wins += (ril.dev[i] >= ri) as usize;
        cells.push(format!("{:.3} vs {ri:.3}", ril.dev[i]));
    }
    outcome(wins >= 3, format!("C-LoRA dev RIL vs RI per seed [{}]; RIL >= RI in {wins}/5", cells.join(", ")))
}

fn criterion_9() -> Outcome {
    let cfg = experiment(Method::FLora, 3);
    let dir = tempfile::tempdir().unwrap();
    let traces: Vec<Vec<u8>> = ["a", "b"]
        .iter()
        .map(|name| {
            let out = dir.path().join(name);
            let report = dflora::cli::execute_run(&cfg, true).unwrap();
            dflora::cli::write_run(&out, &cfg, &report).unwrap();
            std::fs::read(out.join("trace.jsonl")).unwrap()
        })
        .collect();
    let same = traces[0] == traces[1];
    outcome(same && !traces[0].is_empty(), format!("two runs wrote {} trace bytes, identical: {same}", traces[0].len()))
}

fn criterion_10(c: &MethodRuns, f: &MethodRuns) -> Outcome {
    let all: Vec<&Done> = c.done.iter().chain(&f.done).collect();
    let weights = all.iter().all(|d| d.model_checksum_before == d.model_checksum_after);
    let projections = all.iter().all(|d| d.projections_match);
    outcome(
        weights && projections,
        format!(
            "{} runs: backbone checksums unchanged {weights}, projections byte-identical {projections}",
            all.len()
        ),
    )
}

fn main() {
    let started = Instant::now();
    let mut results: Vec<(u32, Outcome)> = Vec::new();
    let (c1, c2) = criteria_1_2();
    results.push((1, c1));
    results.push((2, c2));
    results.push((3, criterion_3()));
    results.push((4, criterion_4()));
    results.push((5, criterion_5()));
    let mut gates = Vec::new();
    let (c6, c_runs, f_runs, _) = criterion_6(&mut gates);
    results.push((6, c6));
    results.push((7, criterion_7()));
    results.push((8, criterion_8(&c_runs)));
    results.push((9, criterion_9()));
    results.push((10, criterion_10(&c_runs, &f_runs)));
    results.sort_by_key(|r| r.0);

    println!("task gates: {}", gates.join("; "));
    let mut failed = 0;
    for (n, o) in &results {
        println!("criterion {n:>2}: {} - {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += (!o.pass) as usize;
    }
    println!("acceptance: {} passed, {failed} failed, {:.0}s", results.len() - failed, started.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
