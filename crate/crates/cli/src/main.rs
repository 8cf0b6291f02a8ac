use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use mixfunn::harness::{
    data_size_sweep, energy_scan, evaluate_model, find_minima, load_checkpoint, loss_vs_energy, oracle_export,
    param_count_sweep, prune_experiment, run_experiment, write_loss_vs_energy, ExperimentConfig, ProblemId,
};
use mixfunn::prune::{extract_expression, render, verify_expression};
use mixfunn::funn::Model;

#[derive(Parser)]
#[command(name = "mixfunn", version, about = "Train and analyze mixed-function physics-informed networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML). Without it, --problem picks a preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Preset used when no config file is given.
    #[arg(long, global = true, default_value = "damped_oscillator")]
    problem: String,
    /// Run a single seed.
    #[arg(long, global = true, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Comma-separated seeds.
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Output directory; defaults to the config's.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// `key.path=value`, applied over the config. Repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed and write metrics, histories and checkpoints.
    Train,
    /// Train on growing [0, T_max] and score on the fixed test interval.
    SweepDataSize,
    /// Burgers errors across variants and parameter counts.
    SweepParams,
    /// Prune a trained model at each ratio, fine-tune, and extract.
    SweepPrune {
        /// Start from this checkpoint instead of training.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Fresh well model per candidate sqrt(E).
    ScanEnergy,
    /// Loss of one well model across the energy grid.
    LossVsEnergy {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Print the symbolic form of a pruned mixed model.
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 4)]
        digits: usize,
    },
    /// Train, test and residual errors of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write the problem's reference solution as CSV.
    OracleExport,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::SweepDataSize => "sweep-data-size",
            Command::SweepParams => "sweep-params",
            Command::SweepPrune { .. } => "sweep-prune",
            Command::ScanEnergy => "scan-energy",
            Command::LossVsEnergy { .. } => "loss-vs-energy",
            Command::Extract { .. } => "extract",
            Command::Eval { .. } => "eval",
            Command::OracleExport => "oracle-export",
        }
    }
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(path) => ExperimentConfig::load(path, &c.overrides).with_context(|| format!("loading {}", path.display()))?,
        None => ExperimentConfig::from_toml_str(&format!("problem = {:?}", c.problem), &c.overrides)?,
    };
    if let Some(s) = c.seed {
        cfg.seeds = vec![s];
    }
    if let Some(s) = &c.seeds {
        cfg.seeds = s.clone();
    }
    if let Some(o) = &c.out {
        cfg.output = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn best_trained(cfg: &ExperimentConfig, dir: &Path) -> Result<Model> {
    let outcome = run_experiment(cfg, Some(dir))?;
    match outcome.best_model() {
        Some(m) => Ok(m.clone()),
        None => bail!("every seed failed; nothing to continue from"),
    }
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    let out = cfg.output.clone();
    match &cli.command {
        Command::Train => {
            let o = run_experiment(&cfg, Some(&out))?;
            for r in &o.rows {
                let status = if r.failed { "failed" } else { "ok" };
                println!(
                    "{}  params {}  train {:.3e}  test {:.3e}  residual {:.3e}  best epoch {}  {status}",
                    r.run_id, r.params, r.train_error, r.test_error, r.residual_error, r.best_epoch
                );
            }
            if let Some(b) = o.best {
                println!("best: {}", o.rows[b].run_id);
            }
        }
        Command::SweepDataSize => {
            for r in data_size_sweep(&cfg, Some(&out))? {
                println!("T_max {}  mean {:.3e}  min {:.3e}  max {:.3e}", r.t_max, r.mean_test, r.min_test, r.max_test);
            }
        }
        Command::SweepParams => {
            for r in param_count_sweep(&cfg, Some(&out))? {
                println!("{} {}  train {:.3e}  test {:.3e}", r.variant, r.params, r.train_mean, r.test_mean);
            }
        }
        Command::SweepPrune { checkpoint } => {
            let base = match checkpoint {
                Some(p) => load_checkpoint(p)?,
                None => best_trained(&cfg, &out.join("base"))?,
            };
            let names = base.spec.inputs.clone();
            for r in prune_experiment(&cfg, &base, Some(&out))? {
                let rep = &r.report;
                print!("ratio {:.4}  removed {}  effective {}", rep.ratio, rep.removed, rep.effective);
                if let Some(e) = rep.residual_error {
                    print!("  residual {e:.3e}");
                }
                match &r.expression {
                    Some(x) => println!("  u = {}", render(x, &names, 4)),
                    None => println!(),
                }
            }
        }
        Command::ScanEnergy => {
            let (_, minima) = energy_scan(&cfg, &cfg.sweep.energies.values(), Some(&out))?;
            for m in minima {
                println!("minimum near sqrt(E) = {:.4} (grid {:.4})", m.refined, m.sqrt_e);
            }
        }
        Command::LossVsEnergy { checkpoint } => {
            if cfg.problem != ProblemId::QuantumWell {
                bail!("loss-vs-energy needs the quantum_well problem");
            }
            let model = match checkpoint {
                Some(p) => load_checkpoint(p)?,
                None => best_trained(&cfg, &out.join("model"))?,
            };
            let grid = cfg.sweep.energies.values();
            let rows = loss_vs_energy(&cfg, &model, &grid, cfg.eval.points)?;
            let (xs, ys): (Vec<f64>, Vec<f64>) = rows.iter().copied().unzip();
            let minima = find_minima(&xs, &ys, cfg.sweep.minima_prominence);
            write_loss_vs_energy(&rows, &minima, &cfg.hash(), &out)?;
            for m in minima {
                println!("minimum near sqrt(E) = {:.4}", m.refined);
            }
        }
        Command::Extract { checkpoint, digits } => {
            let model = load_checkpoint(checkpoint)?;
            let expr = extract_expression(&model)?;
            let (prob, _) = cfg.problem_def()?;
            let dev = verify_expression(&expr, &model, &prob.domain, 1000, model.meta.seed)?;
            let text = render(&expr, &model.spec.inputs, *digits);
            println!("u = {text}");
            println!("max deviation over 1000 points: {dev:.3e}");
            fs::create_dir_all(&out)?;
            fs::write(out.join("expression.txt"), format!("u = {text}\n"))?;
        }
        Command::Eval { checkpoint } => {
            let model = load_checkpoint(checkpoint)?;
            let e = evaluate_model(&cfg, &model)?;
            println!("train {:.6e}  test {:.6e}  residual {:.6e}", e.train_error, e.test_error, e.residual_error);
            fs::create_dir_all(&out)?;
            let row = format!(
                "config_hash,checkpoint,train_error,test_error,residual_error\n{},{},{},{},{}\n",
                cfg.hash(),
                checkpoint.display(),
                e.train_error,
                e.test_error,
                e.residual_error
            );
            fs::write(out.join("eval.csv"), row)?;
        }
        Command::OracleExport => {
            let path = oracle_export(&cfg, &out)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

/// Appends one JSON object per line to `<out>/errors.jsonl` and mirrors it
/// on stderr.
fn log_error(cli: &Cli, err: &anyhow::Error) {
    let ts = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64());
    let record = json!({
        "level": "error",
        "command": cli.command.name(),
        "message": err.to_string(),
        "causes": err.chain().skip(1).map(|c| c.to_string()).collect::<Vec<_>>(),
        "timestamp": ts,
    });
    let line = record.to_string();
    eprintln!("{line}");
    let dir = cli.common.out.clone().unwrap_or_else(|| PathBuf::from("."));
    let written = fs::create_dir_all(&dir).and_then(|_| {
        let mut f = OpenOptions::new().create(true).append(true).open(dir.join("errors.jsonl"))?;
        writeln!(f, "{line}")
    });
    if let Err(e) = written {
        eprintln!("{}", json!({"level": "error", "message": format!("cannot write error log: {e}")}));
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log_error(&cli, &e);
            ExitCode::FAILURE
        }
    }
}
