use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use dpsparse::accountant::{calibrate_sigma, PrivacyLedger};
use dpsparse::engine::batches_per_epoch;
use dpsparse::harness::{run_experiment_full, sweep, write_csv, write_run, SweepSpec};
use dpsparse::persist::decode_mask_raw;
use dpsparse::{Error, GroupingKind, Result, Strategy, TrainConfig};

/// Differentially private sparse fine-tuning experiments.
#[derive(Parser)]
#[command(name = "dpsparse", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one config (all of its seeds) and write report, CSV and masks.
    Run(RunArgs),
    /// Expand a sweep file into runs and write one CSV row per run and seed.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Smallest noise multiplier meeting an (epsilon, delta) budget.
    Calibrate {
        #[arg(long)]
        epsilon: f64,
        #[arg(long, default_value_t = 1e-5)]
        delta: f64,
        #[arg(long)]
        sample_rate: f64,
        /// Training epochs of ceil(1/q) steps each.
        #[arg(long, conflicts_with = "steps")]
        epochs: Option<u64>,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Print the header and per-layer density of a mask file.
    InspectMask { path: PathBuf },
}

#[derive(Args)]
struct RunArgs {
    /// JSON or TOML run config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long, conflicts_with = "sigma")]
    epsilon: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    sparsity: Option<f64>,
    /// singleton, row or random-<block size>
    #[arg(long)]
    grouping: Option<String>,
    /// Replaces the seed list with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

impl RunArgs {
    fn config(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        if let Some(s) = &self.strategy {
            cfg.strategy = Strategy::parse(s)?;
        }
        if let Some(e) = self.epsilon {
            cfg.epsilon = Some(e);
            cfg.sigma = None;
        }
        if let Some(s) = self.sigma {
            cfg.sigma = Some(s);
            cfg.epsilon = None;
        }
        if let Some(d) = self.delta {
            cfg.delta = d;
        }
        if let Some(s) = self.sparsity {
            cfg.sparsity = s;
        }
        if let Some(g) = &self.grouping {
            cfg.grouping = GroupingKind::parse(g)?;
        }
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn execute(cli: Cli) -> Result<serde_json::Value> {
    match cli.command {
        Command::Run(args) => {
            let cfg = args.config()?;
            let (report, outcomes) = run_experiment_full(&cfg)?;
            write_run(&args.out_dir, &report, &outcomes)?;
            Ok(json!({
                "strategy": cfg.strategy.label(),
                "accuracy_mean": report.accuracy_mean,
                "accuracy_std": report.accuracy_std,
                "epsilon": report.epsilon,
                "not_dp": report.not_dp,
                "out_dir": args.out_dir,
            }))
        }
        Command::Sweep { config, out_dir } => {
            let spec = SweepSpec::load(&config)?;
            let configs = spec.expand();
            let (rows, entries) = sweep(&configs);
            std::fs::create_dir_all(&out_dir)?;
            write_csv(std::fs::File::create(out_dir.join("sweep.csv"))?, &rows)?;
            let reports: Vec<serde_json::Value> = entries
                .iter()
                .map(|e| match &e.outcome {
                    Ok(r) => serde_json::to_value(r),
                    Err(err) => Ok(json!({ "config": e.config, "error": err })),
                })
                .collect::<std::result::Result<_, _>>()?;
            std::fs::write(out_dir.join("reports.json"), serde_json::to_string_pretty(&reports)?)?;
            let failed = rows.iter().filter(|r| r.error.is_some()).count();
            Ok(json!({ "runs": configs.len(), "rows": rows.len(), "failed_rows": failed, "out_dir": out_dir }))
        }
        Command::Calibrate {
            epsilon,
            delta,
            sample_rate,
            epochs,
            steps,
        } => {
            let steps = match (epochs, steps) {
                (_, Some(s)) => s,
                (Some(e), None) => {
                    if !(sample_rate > 0.0 && sample_rate <= 1.0) {
                        return Err(Error::Usage(format!("sample rate must lie in (0, 1], got {sample_rate}")));
                    }
                    e * batches_per_epoch(sample_rate) as u64
                }
                (None, None) => return Err(Error::Usage("give --epochs or --steps".into())),
            };
            let sigma = calibrate_sigma(sample_rate, steps, epsilon, delta)?;
            let mut ledger = PrivacyLedger::new(delta)?;
            ledger.record(sample_rate, sigma, steps)?;
            Ok(json!({ "sigma": sigma, "steps": steps, "epsilon": ledger.epsilon()?, "delta": delta }))
        }
        Command::InspectMask { path } => {
            let (header, bits) = decode_mask_raw(&std::fs::read(&path)?)?;
            let layers: Vec<_> = header
                .segments
                .iter()
                .zip(&bits)
                .map(|(s, b)| {
                    let on = b.iter().filter(|&&x| x).count();
                    json!({ "name": s.name, "bits": b.len(), "selected": on,
                            "density": if b.is_empty() { 0.0 } else { on as f64 / b.len() as f64 } })
                })
                .collect();
            Ok(json!({ "header": header, "layers": layers }))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rec = Error::Usage(e.to_string().trim().to_string()).record();
            eprintln!("{}", json!({ "error": rec }));
            return ExitCode::from(2);
        }
    };
    match execute(cli) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("json value"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": e.record() }));
            ExitCode::from(if matches!(e, Error::Usage(_)) { 2 } else { 1 })
        }
    }
}
