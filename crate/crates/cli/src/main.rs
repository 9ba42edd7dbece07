//! `fedais`: runs strategy x seed experiment grids, probes, and config checks.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::Parser;
use serde::Serialize;

use fedais::config::{load_config, ExperimentConfig};
use fedais::metrics::export_csv;
use fedais::orchestrator::{run_training, RunOutput, Strategy};
use fedais::probe::{random_instance, run_probe, ProbeSettings, RANDOM_INSTANCE_DIMS};

const RANDOM_PROBE_GRAPHS: u64 = 5;

#[derive(Debug, Parser)]
#[command(name = "fedais", version, about = "Federated GCN training simulator")]
struct Cli {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory for run CSVs and the summary.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated strategies; overrides the config.
    #[arg(long, value_delimiter = ',')]
    strategies: Option<Vec<Strategy>>,
    /// Comma-separated seeds; overrides the config.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Print variance and bound diagnostics instead of training.
    #[arg(long, conflicts_with = "validate")]
    probe: bool,
    /// Check the config and exit.
    #[arg(long)]
    validate: bool,
}

#[derive(Debug, Serialize)]
struct Stat {
    mean: f64,
    std: f64,
}

impl Stat {
    /// Mean and sample standard deviation.
    fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Debug, Serialize)]
struct StrategySummary {
    seeds: Vec<u64>,
    rounds: Stat,
    final_test_acc: Stat,
    best_test_acc: Stat,
    final_macro_f1: Stat,
    final_test_loss: Stat,
    cum_comm_bytes: Stat,
    cum_comp_ops: Stat,
    sim_time: Stat,
}

#[derive(Debug, Serialize)]
struct Summary {
    strategies: BTreeMap<String, StrategySummary>,
    failed: Vec<String>,
}

fn summarize(runs: &[(u64, RunOutput)]) -> StrategySummary {
    let last = |f: &dyn Fn(&fedais::orchestrator::RoundRecord) -> f64| -> Stat {
        Stat::of(&runs.iter().map(|(_, r)| f(r.records.last().expect("round 0 record"))).collect::<Vec<_>>())
    };
    StrategySummary {
        seeds: runs.iter().map(|(s, _)| *s).collect(),
        rounds: last(&|r| r.round as f64),
        final_test_acc: last(&|r| r.test_acc),
        best_test_acc: Stat::of(
            &runs
                .iter()
                .map(|(_, r)| r.records.iter().map(|x| x.test_acc).fold(0.0, f64::max))
                .collect::<Vec<_>>(),
        ),
        final_macro_f1: last(&|r| r.macro_f1),
        final_test_loss: last(&|r| r.test_loss),
        cum_comm_bytes: last(&|r| r.cum_comm_bytes as f64),
        cum_comp_ops: last(&|r| r.cum_comp_ops as f64),
        sim_time: last(&|r| r.sim_time),
    }
}

fn print_warnings(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

fn cmd_validate(cfg: &ExperimentConfig) -> Result<ExitCode> {
    println!(
        "config ok: {} strategies x {} seeds, {} rounds",
        cfg.strategies.len(),
        cfg.seeds.len(),
        cfg.training.rounds
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_probe(cfg: &ExperimentConfig) -> Result<ExitCode> {
    let seed = cfg.seeds[0];
    let settings = ProbeSettings {
        eta: cfg.training.adam.lr,
        delay: cfg.training.delay,
        seed,
        ..ProbeSettings::default()
    };
    let (g, p) = cfg.build(seed).context("building the configured dataset")?;
    if g.num_nodes() > 200 {
        log::warn!("probe computes exact gradients; {} nodes may be slow", g.num_nodes());
    }
    let mut all_hold = true;
    let summary = run_probe(
        &format!("configured dataset (seed {seed})"),
        &g,
        &p,
        &cfg.training.dims(&g),
        &settings,
    )?;
    println!("{summary}");
    all_hold &= summary.bounds_hold();
    println!("random bounded-degree graphs (n = 80, max degree 8, L = 2)");
    println!("  {:>5} {:>10} {:>16} {:>16}", "graph", "lambda", "output m/b", "gradient m/b");
    for i in 0..RANDOM_PROBE_GRAPHS {
        let (g, p) = random_instance(i)?;
        let s = run_probe(&format!("random {i}"), &g, &p, &RANDOM_INSTANCE_DIMS, &ProbeSettings { seed: i, ..settings.clone() })?;
        println!(
            "  {:>5} {:>10.4} {:>16.4} {:>16.4}",
            i,
            s.lambda_hat,
            s.output_bound.max_ratio(),
            s.gradient_bound.max_ratio()
        );
        all_hold &= s.bounds_hold();
    }
    println!("bounds hold: {}", if all_hold { "yes" } else { "no" });
    Ok(if all_hold { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn cmd_run(cfg: &ExperimentConfig, out: &Path) -> Result<ExitCode> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut done: BTreeMap<Strategy, Vec<(u64, RunOutput)>> = BTreeMap::new();
    let mut failed = Vec::new();
    for &seed in &cfg.seeds {
        let (g, p) = cfg.build(seed).with_context(|| format!("building the dataset for seed {seed}"))?;
        for &strategy in &cfg.strategies {
            log::info!("running {strategy} seed {seed}");
            match run_training(&cfg.run_config(strategy, seed), &g, &p) {
                Ok(run) => {
                    let path = out.join(format!("{strategy}_seed{seed}.csv"));
                    export_csv(&run.metrics(seed), &path)?;
                    done.entry(strategy).or_default().push((seed, run));
                }
                Err(e) => {
                    eprintln!("error: {strategy} seed {seed}: {e}");
                    failed.push(format!("{strategy}_seed{seed}"));
                }
            }
        }
    }
    let summary = Summary {
        strategies: done.iter().map(|(s, runs)| (s.to_string(), summarize(runs))).collect(),
        failed,
    };
    let path = out.join("summary.json");
    std::fs::write(&path, serde_json::to_string_pretty(&summary)? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    for (name, s) in &summary.strategies {
        println!(
            "{name:<10} acc {:.4} ± {:.4}  f1 {:.4} ± {:.4}  bytes {:.0}",
            s.final_test_acc.mean, s.final_test_acc.std, s.final_macro_f1.mean, s.final_macro_f1.std, s.cum_comm_bytes.mean
        );
    }
    Ok(if summary.failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn run(cli: Cli) -> Result<ExitCode> {
    let (mut cfg, warnings) = load_config(&cli.config)?;
    print_warnings(&warnings);
    if let Some(s) = cli.strategies {
        cfg.strategies = s;
    }
    if let Some(s) = cli.seeds {
        cfg.seeds = s;
    }
    cfg.validate()?;
    if cli.validate {
        return cmd_validate(&cfg);
    }
    if cli.probe {
        return cmd_probe(&cfg);
    }
    let Some(out) = cli.out else {
        bail!("--out is required unless --validate or --probe is given");
    };
    cmd_run(&cfg, &out)
}

/// Context chain joined with `: `, skipping causes whose text the message
/// already carries.
fn error_message(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !msg.contains(&text) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&text);
        }
    }
    msg
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", error_message(&e));
            ExitCode::from(2)
        }
    }
}
