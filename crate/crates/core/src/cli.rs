//! `dflora` command line: `run`, `sweep`, `bench` and `stats`.
//!
//! Exit codes: 0 success, 1 invalid input, 2 failure while running.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::optim::{minimize, random_search, Benchmark, BenchmarkObjective, OptimizerKind};
use crate::orchestrator::{run, RunReport};
use crate::seeds::derive_seed;
use crate::subspace::{projection_std, InitMode};
use crate::tensors;

#[derive(Debug, Parser)]
#[command(name = "dflora", version, about = "Derivative-free low-rank adaptation of a frozen encoder")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct ConfigArgs {
    /// JSON experiment config; defaults apply when omitted.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// `key=value` overrides, e.g. `method=f_lora pop=5 subspace.d=100`.
    #[arg(value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one search and write config.json, trace.jsonl, summary.json and tensors.bin.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(short, long, default_value = "runs")]
        out: PathBuf,
        /// Output subdirectory; derived from the config when omitted.
        #[arg(long)]
        run_id: Option<String>,
        #[arg(short, long)]
        quiet: bool,
    },
    /// One run per value of a single axis, with summary.tsv.
    Sweep {
        #[arg(long, value_enum)]
        axis: Axis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(short, long, default_value = "runs")]
        out: PathBuf,
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Optimizer benchmark against a uniform random-search baseline.
    Bench {
        #[arg(long, default_value = "cma")]
        optimizer: OptimizerKind,
        #[arg(long, default_value = "sphere")]
        objective: Benchmark,
        #[arg(long, default_value_t = 10)]
        dim: usize,
        #[arg(long, default_value_t = 5000)]
        evals: usize,
        /// Number of seeds, starting at 0.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(short, long, default_value = "runs")]
        out: PathBuf,
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Per-layer hidden-state spread and the projection scale derived from it.
    Stats {
        #[command(flatten)]
        config: ConfigArgs,
        /// Also write stats.tsv here.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    D,
    R,
    Init,
}

impl Axis {
    fn key(self) -> &'static str {
        match self {
            Axis::D => "subspace.d",
            Axis::R => "subspace.r",
            Axis::Init => "subspace.init",
        }
    }

    fn check(self, value: &str) -> Result<()> {
        let ok = match self {
            Axis::D | Axis::R => value.parse::<usize>().is_ok_and(|v| v > 0),
            Axis::Init => value.parse::<InitMode>().is_ok(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("'{value}' is not a valid {} value", self.key())))
        }
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Run {
            config,
            out,
            run_id,
            quiet,
        } => {
            let cfg = ExperimentConfig::load(config.config.as_deref(), &config.overrides)?;
            let id = run_id.unwrap_or_else(|| default_run_id(&cfg));
            let dir = out.join(&id);
            let report = execute_run(&cfg, quiet)?;
            write_run(&dir, &cfg, &report)?;
            let s = &report.summary;
            eprintln!(
                "{id}: train acc {:.4}, dev acc {:.4}{}, {} evaluations -> {}",
                s.train.accuracy,
                s.dev.accuracy,
                s.test.as_ref().map(|t| format!(", test acc {:.4}", t.accuracy)).unwrap_or_default(),
                s.consumed,
                dir.display()
            );
            Ok(())
        }
        Command::Sweep {
            axis,
            values,
            config,
            out,
            run_id,
        } => {
            for v in &values {
                axis.check(v)?;
            }
            let configs = values
                .iter()
                .map(|v| {
                    let mut over = config.overrides.clone();
                    over.push(format!("{}={}", axis.key(), json_scalar(axis, v)));
                    ExperimentConfig::load(config.config.as_deref(), &over)
                })
                .collect::<Result<Vec<_>>>()?;
            let dir = out.join(run_id.unwrap_or_else(|| format!("sweep-{}", axis.key().trim_start_matches("subspace."))));
            let mut tsv = String::from("value\tstatus\ttrain_accuracy\tdev_accuracy\ttest_accuracy\tconsumed\n");
            let mut failures = 0;
            for (v, cfg) in values.iter().zip(&configs) {
                eprintln!("sweep {}={v}", axis.key());
                match execute_run(cfg, true).and_then(|r| write_run(&dir.join(format!("value-{v}")), cfg, &r).map(|_| r)) {
                    Ok(r) => {
                        let s = &r.summary;
                        let test = s.test.as_ref().map_or("NA".to_string(), |t| t.accuracy.to_string());
                        writeln!(
                            tsv,
                            "{v}\tok\t{}\t{}\t{test}\t{}",
                            s.train.accuracy, s.dev.accuracy, s.consumed
                        )
                        .expect("string write");
                    }
                    Err(e) => {
                        failures += 1;
                        eprintln!("  failed: {e}");
                        writeln!(tsv, "{v}\terror\tNA\tNA\tNA\t0").expect("string write");
                    }
                }
            }
            fs::create_dir_all(&dir)?;
            fs::write(dir.join("summary.tsv"), tsv)?;
            if failures > 0 {
                return Err(Error::Runtime(format!("{failures} of {} sweep runs failed", values.len())));
            }
            Ok(())
        }
        Command::Bench {
            optimizer,
            objective,
            dim,
            evals,
            seeds,
            out,
            run_id,
        } => {
            let obj = BenchmarkObjective::new(objective, dim)?;
            if evals == 0 || seeds == 0 {
                return Err(Error::invalid("bench needs positive evals and seeds"));
            }
            let results = (0..seeds)
                .map(|s| minimize(optimizer, &obj, evals, s).map(|m| (s, m)))
                .collect::<Result<Vec<_>>>()?;
            let dir = out.join(run_id.unwrap_or_else(|| {
                format!("bench-{}-{}-{dim}", format!("{optimizer:?}").to_lowercase(), format!("{objective:?}").to_lowercase())
            }));
            fs::create_dir_all(&dir)?;
            let mut tsv = String::from("seed\tbest_fitness\trandom_search\tbeats_random\tevaluations\n");
            let mut finals = Vec::new();
            let mut wins = 0;
            for (s, m) in &results {
                let mut trace = Vec::new();
                m.write_trace(&mut trace)?;
                fs::write(dir.join(format!("trace-seed{s}.tsv")), trace)?;
                let baseline = random_search(&obj, evals, derive_seed(*s, 0xba5e));
                let beats = m.best_fitness < baseline;
                wins += beats as usize;
                finals.push(m.best_fitness);
                writeln!(tsv, "{s}\t{:e}\t{:e}\t{beats}\t{}", m.best_fitness, baseline, m.evaluations).expect("string write");
            }
            fs::write(dir.join("summary.tsv"), tsv)?;
            let summary = BenchSummary {
                optimizer,
                objective,
                dim,
                evals,
                seeds,
                median_best: median(&finals),
                wins_over_random: wins,
            };
            fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
            eprintln!(
                "median best {:e}; beats random search in {wins}/{seeds} seeds -> {}",
                summary.median_best,
                dir.display()
            );
            Ok(())
        }
        Command::Stats { config, out } => {
            let cfg = ExperimentConfig::load(config.config.as_deref(), &config.overrides)?;
            let prepared = cfg.prepare()?;
            let stats = prepared.model.collect_hidden_stats(&prepared.train.tokens)?;
            let s = &cfg.subspace;
            let mut tsv = String::from("layer\tsigma_hat\tsigma_m\n");
            for (l, &sh) in stats.per_layer_std.iter().enumerate() {
                let sm = projection_std(s.alpha, sh, s.d, s.sigma_z)?;
                writeln!(tsv, "{l}\t{sh}\t{sm}").expect("string write");
            }
            print!("{tsv}");
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                fs::write(dir.join("stats.tsv"), &tsv)?;
            }
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct BenchSummary {
    optimizer: OptimizerKind,
    objective: Benchmark,
    dim: usize,
    evals: usize,
    seeds: u64,
    median_best: f64,
    wins_over_random: usize,
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn json_scalar(axis: Axis, v: &str) -> String {
    match axis {
        Axis::Init => format!("\"{v}\""),
        _ => v.to_string(),
    }
}

pub fn default_run_id(cfg: &ExperimentConfig) -> String {
    format!(
        "{}-d{}-r{}-{}-s{}",
        cfg.optimizer.method, cfg.subspace.d, cfg.subspace.r, cfg.subspace.init, cfg.run.seeds.optimizer
    )
}

pub fn execute_run(cfg: &ExperimentConfig, quiet: bool) -> Result<RunReport> {
    let prepared = cfg.prepare()?;
    run(&cfg.run_config(), &prepared.model, prepared.data(), |r| {
        if !quiet && r.step % 20 == 0 {
            eprintln!(
                "step {:>4} layer {} loss {:.4} dev acc {:.4} used {}",
                r.step, r.layer, r.train_loss, r.dev_accuracy, r.consumed
            );
        }
    })
}

/// Writes the four run files; the directory only appears once everything is ready.
pub fn write_run(dir: &Path, cfg: &ExperimentConfig, report: &RunReport) -> Result<()> {
    let config = serde_json::to_string_pretty(cfg)?;
    let trace = report.trace_jsonl()?;
    let summary = serde_json::to_string_pretty(&report.summary)?;
    let tensors = report.tensors()?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.json"), config)?;
    fs::write(dir.join("trace.jsonl"), trace)?;
    fs::write(dir.join("summary.json"), summary)?;
    tensors::save(&dir.join("tensors.bin"), &tensors)?;
    Ok(())
}
