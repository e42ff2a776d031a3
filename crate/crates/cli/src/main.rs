use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedsim::aggregation::{robust_mean_filter, AggregationInput, AggregatorKind, CronusConfig, DEFAULT_MWU_ITERS};
use fedsim::attacks::{craft_for_protocol, AttackKind, ThreatSpec, UpdatesOnly, DEFAULT_PAF_MAGNITUDE};
use fedsim::experiments::{
    emit_results, gen_synthetic, parse_real_csv, report_json, run_experiment, write_dataset_csv, write_real_csv,
    DatasetConfig, ExperimentConfig, ExperimentError,
};
use fedsim::numerics::Matrix;
use fedsim::rng::rng_from_seed;

#[derive(Parser)]
#[command(name = "fedsim", version, about = "Byzantine-robust federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the benign protocol and the configured attack sweep.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Master seed; beats FEDSIM_SEED, which beats the config file.
        #[arg(long, env = "FEDSIM_SEED")]
        seed: Option<u64>,
        /// Sweep only this attack.
        #[arg(long)]
        attack: Option<String>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Aggregate a CSV of update vectors, one party per row.
    Aggregate {
        #[arg(long)]
        rule: String,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        epsilon: f64,
        /// Optional CSV with one data size per party.
        #[arg(long)]
        sizes: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_MWU_ITERS)]
        mwu_iters: usize,
        #[arg(long, env = "FEDSIM_SEED", default_value_t = 0)]
        seed: u64,
    },
    /// Craft malicious updates from a CSV of benign ones.
    Craft {
        #[arg(long)]
        attack: String,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        malicious: usize,
        #[arg(long, default_value_t = DEFAULT_PAF_MAGNITUDE)]
        magnitude: f64,
    },
    /// Write the configured synthetic dataset as CSV files.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, env = "FEDSIM_SEED")]
        seed: Option<u64>,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Config(_) | ExperimentError::Toml(_) => Failure::Config(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    ExperimentConfig::load(path).map_err(|e| Failure::Config(e.to_string()))
}

fn read_matrix(path: &Path) -> Result<Matrix, Failure> {
    let f = File::open(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    parse_real_csv(f, None).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn parse_attack(name: &str) -> Result<AttackKind, Failure> {
    AttackKind::parse(name).ok_or_else(|| Failure::Config(format!("unknown attack {name:?}")))
}

fn execute(cmd: Command) -> Result<(), Failure> {
    let stdout = io::stdout();
    match cmd {
        Command::Run {
            config,
            seed,
            attack,
            output_dir,
            workers,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.master_seed = s;
            }
            if let Some(a) = attack {
                cfg.attack_sweep = vec![parse_attack(&a)?];
            }
            if let Some(d) = output_dir {
                cfg.output_dir = d;
            }
            if let Some(w) = workers {
                cfg.workers = w;
            }
            cfg.validate()?;
            let outcome = run_experiment(&cfg)?;
            emit_results(&outcome, &cfg.output_dir)?;
            stdout.lock().write_all(report_json(&outcome.report)?.as_bytes()).map_err(runtime)?;
        }
        Command::Aggregate {
            rule,
            input,
            epsilon,
            sizes,
            mwu_iters,
            seed,
        } => {
            let rule = AggregatorKind::parse(&rule).ok_or_else(|| Failure::Config(format!("unknown rule {rule:?}")))?;
            let m = read_matrix(&input)?;
            let updates: Vec<Vec<f64>> = m.iter_rows().map(<[f64]>::to_vec).collect();
            let out = if rule == AggregatorKind::Cronus {
                if !(0.0..0.5).contains(&epsilon) {
                    return Err(Failure::Config(format!("epsilon {epsilon} outside [0, 0.5)")));
                }
                let points: Vec<&[f64]> = m.iter_rows().collect();
                robust_mean_filter(&points, epsilon, &CronusConfig::default(), &mut rng_from_seed(seed)).0
            } else {
                let sizes: Option<Vec<usize>> = match sizes {
                    Some(p) => Some(
                        read_matrix(&p)?
                            .as_slice()
                            .iter()
                            .map(|&x| if x >= 0.0 && x.fract() == 0.0 { Ok(x as usize) } else { Err(runtime(format!("bad data size {x}"))) })
                            .collect::<Result<_, _>>()?,
                    ),
                    None => None,
                };
                let input = AggregationInput::new(&updates, sizes.as_deref(), epsilon).map_err(runtime)?;
                rule.aggregate(&input, mwu_iters).map_err(runtime)?
            };
            let row = Matrix::from_vec(1, out.len(), out).expect("one row");
            write_real_csv(stdout.lock(), &row).map_err(runtime)?;
        }
        Command::Craft {
            attack,
            input,
            malicious,
            magnitude,
        } => {
            let attack = parse_attack(&attack)?;
            let benign = read_matrix(&input)?;
            let updates: Vec<Vec<f64>> = benign.iter_rows().map(<[f64]>::to_vec).collect();
            let threat = ThreatSpec {
                total_parties: updates.len() + malicious,
                malicious_count: malicious,
                attack,
                paf_magnitude: magnitude,
                ..ThreatSpec::benign()
            };
            let crafted = craft_for_protocol(&threat, &updates, &UpdatesOnly).map_err(runtime)?;
            let rows: Vec<Vec<f64>> = crafted.updates;
            if !rows.is_empty() {
                let m = Matrix::from_rows(&rows).map_err(runtime)?;
                write_real_csv(stdout.lock(), &m).map_err(runtime)?;
            }
        }
        Command::Gen { config, out, seed } => {
            let cfg = load_config(&config)?;
            let DatasetConfig::Synthetic(s) = &cfg.dataset else {
                return Err(Failure::Config("gen needs a synthetic dataset section".into()));
            };
            let data = gen_synthetic(s, seed.unwrap_or(cfg.master_seed));
            write_dataset_csv(&data, &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
