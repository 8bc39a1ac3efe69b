use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use steer_cli::report::{build_report, collect_runs};
use steer_cli::stages::{self, Context, RlInputs, ScalarOptions};
use steer_cli::{CliError, PipelineConfig};
use steer_core::dataset::Channel;
use steer_core::rl::{EpochMetrics, InitMode, RlObserver};

#[derive(Parser, Debug)]
#[command(name = "steer", version, about = "Learn to steer a car from pixels, demonstrations and labels")]
struct Cli {
    /// Pipeline configuration (JSON); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed; repeat to replicate `rl-train` runs.
    #[arg(long = "seed", global = true)]
    seeds: Vec<u64>,
    /// Override the track (bundled name or JSON path).
    #[arg(long, global = true)]
    track: Option<String>,
    /// Override the observation size as HEIGHTxWIDTH.
    #[arg(long, global = true, value_parser = parse_frame)]
    frame: Option<(usize, usize)>,
    #[command(subcommand)]
    command: Command,
}

fn parse_frame(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once('x').ok_or("expected HEIGHTxWIDTH")?;
    let h = h.parse().map_err(|e| format!("height: {e}"))?;
    let w = w.parse().map_err(|e| format!("width: {e}"))?;
    Ok((h, w))
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ChannelArg {
    Reward,
    Safety,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum InitArg {
    Random,
    Il,
    IlPolicyEval,
}

#[derive(Args, Debug)]
struct Iterations {
    /// Override the training iteration cap.
    #[arg(long)]
    iterations: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Record oracle demonstrations.
    DemoRecord {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        ticks: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Record instructor labels for the reward or safety channel.
    LabelRecord {
        #[arg(long, value_enum)]
        channel: ChannelArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        ticks: Option<usize>,
    },
    /// Train the imitation policy.
    TrainPolicy {
        #[arg(long)]
        demos: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        iterations: Iterations,
    },
    /// Train a reward network on reward labels.
    TrainReward {
        #[arg(long)]
        labels: PathBuf,
        /// Imitation policy whose trunk initializes the network.
        #[arg(long)]
        policy: Option<PathBuf>,
        /// Keep only this fraction of the training split.
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        iterations: Iterations,
    },
    /// Train the safety network; the policy becomes the safe fallback.
    TrainSafety {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        iterations: Iterations,
    },
    /// Double DQN on the learned reward; one subdirectory per seed.
    RlTrain {
        #[arg(long)]
        reward: Option<PathBuf>,
        /// Reward net that scores avg_reward (defaults to --reward).
        #[arg(long)]
        metric_reward: Option<PathBuf>,
        #[arg(long)]
        safety: Option<PathBuf>,
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long, value_enum)]
        init: Option<InitArg>,
        /// Enable or disable the safety gate.
        #[arg(long)]
        safety_enabled: Option<bool>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        epoch_frames: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
    /// Average reward of a policy or greedy Q network.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        reward: PathBuf,
        #[arg(long)]
        ticks: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Figure-data tables from rl-train runs.
    Report {
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the session service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        /// Directory of console assets served at `/`.
        #[arg(long = "static")]
        static_dir: Option<PathBuf>,
        /// Where exported session datasets are written.
        #[arg(long, default_value = "exports")]
        exports: PathBuf,
        /// Stream the records of this metrics file to spectators.
        #[arg(long)]
        watch: Option<PathBuf>,
    },
}

struct Progress;

impl RlObserver for Progress {
    fn on_epoch(&mut self, m: &EpochMetrics) {
        eprintln!(
            "epoch {:>3}  reward {:+.3}  q {:+.3}  accidents {:>3}  takeover {:.3}  {} ms",
            m.epoch, m.avg_reward, m.avg_action_value, m.accidents, m.takeover_fraction, m.wall_ms
        );
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, CliError> {
    let mut config = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(t) = &cli.track {
        config.track = t.clone();
    }
    if let Some((h, w)) = cli.frame {
        config.env.render.height = h;
        config.env.render.width = w;
    }
    if !cli.seeds.is_empty() {
        config.seeds = cli.seeds.clone();
    }
    Ok(config)
}

fn apply_iterations(cfg: &mut steer_core::train::TrainConfig, it: &Iterations) {
    if let Some(n) = it.iterations {
        cfg.max_iterations = n;
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<(), CliError> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut config = load_config(&cli)?;
    let seed = config.primary_seed();
    match &cli.command {
        Command::DemoRecord { out, ticks, noise } => {
            if let Some(t) = ticks {
                config.demo.ticks = *t;
            }
            if let Some(n) = noise {
                config.demo.noise_rate = *n;
            }
            print_json(&stages::demo_record(&Context::new(config)?, seed, out)?)
        }
        Command::LabelRecord { channel, out, ticks } => {
            let channel = match channel {
                ChannelArg::Reward => Channel::Reward,
                ChannelArg::Safety => Channel::Safety,
            };
            if let Some(t) = ticks {
                match channel {
                    Channel::Reward => config.reward_labels.ticks = *t,
                    Channel::Safety => config.safety_labels.ticks = *t,
                }
            }
            print_json(&stages::label_record(&Context::new(config)?, channel, seed, out)?)
        }
        Command::TrainPolicy { demos, out, iterations } => {
            apply_iterations(&mut config.imitation, iterations);
            print_json(&stages::train_policy(&Context::new(config)?, demos, seed, out)?)
        }
        Command::TrainReward {
            labels,
            policy,
            fraction,
            out,
            iterations,
        } => {
            apply_iterations(&mut config.reward.train, iterations);
            let opts = ScalarOptions {
                policy: policy.as_deref(),
                fraction: *fraction,
            };
            print_json(&stages::train_reward(&Context::new(config)?, labels, &opts, seed, out)?)
        }
        Command::TrainSafety {
            labels,
            policy,
            out,
            iterations,
        } => {
            apply_iterations(&mut config.safety.train, iterations);
            print_json(&stages::train_safety(&Context::new(config)?, labels, policy, seed, out)?)
        }
        Command::RlTrain {
            reward,
            metric_reward,
            safety,
            policy,
            init,
            safety_enabled,
            epochs,
            epoch_frames,
            out,
            quiet,
        } => {
            if let Some(i) = init {
                config.rl.init_mode = match i {
                    InitArg::Random => InitMode::Random,
                    InitArg::Il => InitMode::Il,
                    InitArg::IlPolicyEval => InitMode::IlPolicyEval,
                };
            }
            if let Some(s) = safety_enabled {
                config.rl.safety_enabled = *s;
            }
            if let Some(f) = epoch_frames {
                config.rl.epoch_frames = *f;
            }
            if let Some(e) = epochs {
                config.rl.total_frames = e * config.rl.epoch_frames;
            }
            let seeds = if config.seeds.is_empty() { vec![0] } else { config.seeds.clone() };
            let ctx = Context::new(config)?;
            let inputs = RlInputs {
                reward: reward.as_deref(),
                metric_reward: metric_reward.as_deref(),
                safety: safety.as_deref(),
                policy: policy.as_deref(),
            };
            let mut aborted = Vec::new();
            for s in seeds {
                if !quiet {
                    eprintln!("seed {s}");
                }
                let run = if *quiet {
                    stages::rl_train(&ctx, &inputs, s, out, &mut ())?
                } else {
                    stages::rl_train(&ctx, &inputs, s, out, &mut Progress)?
                };
                println!("{}", run.dir.display());
                if let Some(reason) = run.aborted {
                    aborted.push(format!("seed {s}: {reason}"));
                }
            }
            if aborted.is_empty() {
                Ok(())
            } else {
                Err(CliError::Runtime(format!("training aborted ({})", aborted.join("; "))))
            }
        }
        Command::Evaluate {
            model,
            reward,
            ticks,
            out,
        } => {
            let ticks = ticks.unwrap_or(config.evaluate_ticks);
            let eval = stages::evaluate(&Context::new(config)?, model, reward, ticks, out.as_deref())?;
            println!("{}", eval.average_reward);
            Ok(())
        }
        Command::Report { runs, out } => {
            if runs.is_empty() {
                return Err(CliError::Usage("report needs at least one run directory".into()));
            }
            let collected = collect_runs(runs)?;
            let report = build_report(&collected)?;
            report.write(out)?;
            println!("{} runs, {} epochs", collected.len(), report.reward.row_keys.len());
            Ok(())
        }
        Command::Serve {
            addr,
            static_dir,
            exports,
            watch,
        } => {
            let service = steer_service::ServiceConfig {
                env: config.env.clone(),
                static_dir: static_dir.clone(),
                export_dir: exports.clone(),
                watch: watch.clone(),
                ..steer_service::ServiceConfig::default()
            };
            let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::io("starting runtime", e))?;
            runtime.block_on(async {
                let listener = tokio::net::TcpListener::bind(addr)
                    .await
                    .map_err(|e| CliError::io(format!("binding {addr}"), e))?;
                eprintln!("listening on http://{}", listener.local_addr().map_err(|e| CliError::io("address", e))?);
                steer_service::serve(listener, service)
                    .await
                    .map_err(|e| CliError::io("serving", e))
            })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
