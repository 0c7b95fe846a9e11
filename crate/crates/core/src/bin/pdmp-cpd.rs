use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use pdmp_changepoint::baselines::{Direction, KalmanDetector, KalmanRule, MaConfig, MaDetector};
use pdmp_changepoint::bench::{format_table, run_benchmark, write_outputs, BenchConfig, Style};
use pdmp_changepoint::config::Config;
use pdmp_changepoint::dp::{backward_solve, bound_constants, build_belief_grids, theorem_bounds, BeliefQuantization};
use pdmp_changepoint::io;
use pdmp_changepoint::kernel::Decision;
use pdmp_changepoint::model::{simulate_trajectory, observe};
use pdmp_changepoint::policy::{evaluate_runs, summarize, Detector, QuantizedPolicy};
use pdmp_changepoint::quantize::{distortion, quantize_state_chain, StateQuantization};
use pdmp_changepoint::rng::{run_rng, stage, stream_rng};
use pdmp_changepoint::{Error, Result};

const STATES_FILE: &str = "states.bin";
const BELIEFS_FILE: &str = "beliefs.bin";
const SOLUTION_FILE: &str = "solution.bin";

#[derive(Parser)]
#[command(name = "pdmp-cpd", version, about = "Change-point detection for one-jump PDMPs by quantized optimal stopping")]
struct Cli {
    /// TOML configuration.
    #[arg(long, global = true, default_value = "pdmp.toml")]
    config: PathBuf,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate trajectories and observation streams.
    Simulate {
        #[arg(long, default_value_t = 1)]
        runs: usize,
    },
    /// Train the state grids and the belief grids.
    Quantize,
    /// Solve the dynamic program on trained grids.
    Solve {
        /// Directory holding the trained grids (default: --out).
        #[arg(long)]
        grids: Option<PathBuf>,
        /// Cost file; defaults to the `[costs]` section of --config.
        #[arg(long)]
        costs: Option<PathBuf>,
    },
    /// Run the solved strategy on one observation stream.
    RunPolicy {
        #[arg(long)]
        grids: Option<PathBuf>,
        #[arg(long)]
        solution: Option<PathBuf>,
        #[arg(long)]
        obs: PathBuf,
    },
    /// Monte Carlo evaluation of the solved strategy.
    Evaluate {
        #[arg(long)]
        grids: Option<PathBuf>,
        #[arg(long)]
        solution: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        runs: usize,
    },
    /// Run a comparison detector on one observation stream.
    Baseline {
        #[arg(value_enum)]
        kind: BaselineKind,
        #[arg(long)]
        obs: PathBuf,
        /// Moving-average window.
        #[arg(long, default_value_t = 3)]
        window: usize,
        /// Moving-average level, or posterior level for `kalman`.
        #[arg(long)]
        threshold: Option<f64>,
        /// Use the cost-calibrated rule for `kalman`.
        #[arg(long)]
        calibrated: bool,
    },
    /// Run the configured sweep.
    Bench {
        /// Grid cache directory (default: <out>/cache).
        #[arg(long)]
        cache: Option<PathBuf>,
        /// Fail if a grid would need training.
        #[arg(long)]
        no_train: bool,
    },
    /// Print the error-bound coefficients, and the bounds themselves when
    /// trained grids are available.
    Bounds {
        #[arg(long)]
        grids: Option<PathBuf>,
        /// Samples per step for the state distortion estimate.
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineKind {
    Ma,
    Kalman,
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut c = Config::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        c.reseed(seed);
    }
    Ok(c)
}

fn load_grids(dir: &Path) -> Result<(StateQuantization, BeliefQuantization)> {
    let missing = |f: &str| Error::MissingArtifact(format!("{} (run `quantize` first)", dir.join(f).display()));
    let sq = io::decode_state_quantization(&io::read_container(&dir.join(STATES_FILE)).map_err(|_| missing(STATES_FILE))?)?;
    let bq = io::decode_belief_quantization(&io::read_container(&dir.join(BELIEFS_FILE)).map_err(|_| missing(BELIEFS_FILE))?)?;
    Ok((sq, bq))
}

fn describe(d: Decision) -> String {
    match d {
        Decision::Stop { time, mode } => format!("stop at n={time}, mode {mode}"),
        Decision::NoStop => "no stop".into(),
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(t).build_global().map_err(|e| Error::Config(e.to_string()))?;
    }
    let config = load_config(&cli)?;
    let model = config.model()?;
    let out = &cli.out;
    match &cli.command {
        Command::Simulate { runs } => {
            std::fs::create_dir_all(out)?;
            let mut w = csv::Writer::from_path(out.join("simulations.csv"))?;
            w.write_record(["run", "n", "t", "mode", "x", "y", "jump_time"])?;
            for i in 0..*runs {
                let mut rng = run_rng(config.bench.seed, i as u64);
                let tr = simulate_trajectory(&model, &mut rng);
                let obs = observe(&tr, &model, &mut rng);
                for (n, (s, y)) in tr.observation_states(&model).iter().zip(&obs.values).enumerate() {
                    let t = n as f64 * model.delta;
                    w.write_record([i.to_string(), n.to_string(), t.to_string(), s.mode.to_string(), s.x().to_string(), y.to_string(), tr.jump_time.to_string()])?;
                }
            }
            w.flush()?;
            println!("wrote {}", out.join("simulations.csv").display());
        }
        Command::Quantize => {
            std::fs::create_dir_all(out)?;
            info!("training state grids");
            let sq = quantize_state_chain(&model, &config.quantization)?;
            io::write_container(&out.join(STATES_FILE), &io::encode_state_quantization(&sq))?;
            io::write_grids_csv(&out.join("grids.csv"), &sq)?;
            io::write_transitions_csv(&out.join("transitions.csv"), &sq.transitions)?;
            info!("training belief grids");
            let bq = build_belief_grids(&model, &sq, &config.belief)?;
            io::write_container(&out.join(BELIEFS_FILE), &io::encode_belief_quantization(&bq))?;
            println!(
                "{} state grids ({} points at n={}), {} belief grids; {} degenerate filter updates",
                sq.grids.len(),
                sq.grids.last().map_or(0, |g| g.len()),
                model.horizon,
                bq.grids.len(),
                bq.degenerate_updates
            );
        }
        Command::Solve { grids, costs } => {
            let (sq, bq) = load_grids(grids.as_deref().unwrap_or(out))?;
            let costs = match costs {
                Some(p) => {
                    let c: pdmp_changepoint::config::CostConfig = toml::from_str(&std::fs::read_to_string(p)?)?;
                    c.build(&model)?
                }
                None => config.costs()?,
            };
            let solution = backward_solve(&bq, &sq.grids, &costs)?;
            std::fs::create_dir_all(out)?;
            io::write_container(&out.join(SOLUTION_FILE), &io::encode_solution(&solution, &bq)?)?;
            io::write_solution_csv(&out.join("solution.csv"), &solution, &bq)?;
            println!("v̂'_0 = {}", solution.values[0][0]);
        }
        Command::RunPolicy { grids, solution, obs } => {
            let (sq, bq) = load_grids(grids.as_deref().unwrap_or(out))?;
            let file = io::decode_solution(&io::read_container(solution.as_deref().unwrap_or(&out.join(SOLUTION_FILE)))?)?;
            let policy = QuantizedPolicy::new(&model, &sq, &bq, &file.solution)?;
            let obs = io::read_observations_csv(obs)?;
            let det = policy.detect(&obs.values)?;
            println!("{}; {} degenerate updates", describe(det.decision), det.degenerate);
        }
        Command::Evaluate { grids, solution, runs } => {
            let (sq, bq) = load_grids(grids.as_deref().unwrap_or(out))?;
            let file = io::decode_solution(&io::read_container(solution.as_deref().unwrap_or(&out.join(SOLUTION_FILE)))?)?;
            let costs = match &file.solution.costs {
                Some(c) => c.clone(),
                None => config.costs()?,
            };
            let policy = QuantizedPolicy::new(&model, &sq, &bq, &file.solution)?;
            let s = summarize(&evaluate_runs(&model, &[&policy], &costs, *runs, config.bench.seed)?[0]);
            let mut w = csv::Writer::from_writer(std::io::stdout());
            w.serialize(s)?;
            w.flush()?;
        }
        Command::Baseline { kind, obs, window, threshold, calibrated } => {
            let obs = io::read_observations_csv(obs)?;
            let det: Box<dyn Detector> = match kind {
                BaselineKind::Ma => {
                    Box::new(MaDetector { model: &model, config: MaConfig { window: *window, threshold: threshold.unwrap_or(2.0), direction: Direction::Above } })
                }
                BaselineKind::Kalman => {
                    let rule = if *calibrated || threshold.is_none() {
                        KalmanRule::Calibrated { costs: config.costs()? }
                    } else {
                        KalmanRule::Fixed { threshold: threshold.unwrap() }
                    };
                    Box::new(KalmanDetector { model: &model, rule })
                }
            };
            println!("{}: {}", det.name(), describe(det.detect(&obs.values)?.decision));
        }
        Command::Bench { cache, no_train } => {
            let bc = BenchConfig { config: config.clone(), cache_dir: Some(cache.clone().unwrap_or_else(|| out.join("cache"))), no_train: *no_train };
            let table = run_benchmark(&bc)?;
            write_outputs(out, &bc, &table)?;
            print!("{}", format_table(&table, Style::Markdown)?);
        }
        Command::Bounds { grids, samples } => {
            let costs = config.costs()?;
            let bc = bound_constants(&model, &costs)?;
            println!("[Φ] = {}  B̄ = {}  f̄ = {}  f̲ = {}  B_f = {}  L_f = {}", bc.phi_lip, bc.b_bar, bc.f_upper, bc.f_lower, bc.b_f, bc.l_f);
            println!("n,a_n,b_n,state_mae,belief_l1");
            let dists = match grids {
                Some(dir) => {
                    let (sq, bq) = load_grids(dir)?;
                    let state: Vec<f64> = sq
                        .grids
                        .iter()
                        .map(|g| Ok(distortion(&model, g, *samples, &mut stream_rng(config.quantization.seed, stage::DISTORTION, g.n as u64))?.1))
                        .collect::<Result<_>>()?;
                    Some((state, bq.belief_l1.clone()))
                }
                None => None,
            };
            for n in 0..=model.horizon {
                let a = bc.a.get(n).map_or(String::new(), |v| format!("{v:e}"));
                let (e, l) = match &dists {
                    Some((s, b)) => (s[n].to_string(), b.get(n).map_or(String::new(), |v| v.to_string())),
                    None => (String::new(), String::new()),
                };
                println!("{n},{a},{:e},{e},{l}", bc.b[n]);
            }
            if let Some((s, b)) = &dists {
                let (first, second) = theorem_bounds(&bc, s, b);
                println!("first discretization bound: {first:e}");
                println!("second discretization bound: {second:e}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
