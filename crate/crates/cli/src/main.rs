use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use fgrm_cli::config::ExperimentConfig;
use fgrm_cli::dataset::SplitName;
use fgrm_cli::run;
use fgrm_core::tuner::RewardMode;

#[derive(Parser)]
#[command(name = "fgrm", version, about = "Evidential segmentation calibration experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Reward {
    Id,
    Ood,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Defaults mirroring the reference hyperparameters.
    Default,
    /// Toy-scale settings tuned for the ID reward.
    Toy,
    /// Toy-scale settings tuned for the OOD reward.
    ToyOod,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the dataset and pretrain the evidential model.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Tune a checkpoint against a calibration reward.
    Tune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "id")]
        reward: Reward,
    },
    /// Evaluate a checkpoint and write reports, tables and uncertainty maps.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
        /// Also evaluate corrupted copies and report PR / BR.
        #[arg(long)]
        ood: bool,
        /// Output directory (default: under the config's output_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep the KL strength across Fisher weighting modes.
    Ablation {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "beta=0.01,0.1,1.0")]
        sweep: String,
        #[arg(long, default_value = "finegrained,uniform")]
        modes: String,
        /// Concurrent runs (default: available cores).
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Print a complete config file.
    InitConfig {
        #[arg(long, value_enum, default_value = "toy")]
        preset: Preset,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "runs/toy")]
        output_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Pretrain { config } => run::cmd_pretrain(&config),
        Command::Tune {
            config,
            checkpoint,
            reward,
        } => {
            let reward = match reward {
                Reward::Id => RewardMode::Id,
                Reward::Ood => RewardMode::Ood,
            };
            run::cmd_tune(&config, &checkpoint, reward)
        }
        Command::Eval {
            config,
            checkpoint,
            split,
            ood,
            out,
        } => run::cmd_eval(&config, &checkpoint, split, ood, out),
        Command::Ablation {
            config,
            checkpoint,
            sweep,
            modes,
            workers,
        } => {
            let workers = workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            run::cmd_ablation(&config, &checkpoint, &sweep, &modes, workers)
        }
        Command::InitConfig {
            preset,
            seed,
            output_dir,
        } => {
            let mut cfg = match preset {
                Preset::Default => ExperimentConfig {
                    seed,
                    ..ExperimentConfig::default()
                },
                Preset::Toy => ExperimentConfig::toy(seed),
                Preset::ToyOod => {
                    let mut c = ExperimentConfig::toy(seed);
                    c.tuner = ExperimentConfig::toy_ood_tuner(seed);
                    c
                }
            };
            cfg.propagate_seed();
            cfg.output_dir = output_dir;
            println!("{}", cfg.to_json());
            return ExitCode::SUCCESS;
        }
    };
    match result {
        Ok(path) => {
            println!("{}", path.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
