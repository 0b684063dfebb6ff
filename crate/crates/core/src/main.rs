use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use flowpaint::cli::{self, Context};
use flowpaint::config::RunConfig;
use flowpaint::{Error, Result};

/// Flow-matching inpainting with attention matting and GRPO fine-tuning.
#[derive(Parser, Debug)]
#[command(name = "flowpaint", version)]
struct Cli {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed for every random stream.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Run serially for bitwise-reproducible outputs.
    #[arg(long, global = true, default_value_t = false)]
    single_thread: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl Switch {
    fn on(self) -> bool {
        matches!(self, Switch::On)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene dataset into --out.
    GenData {
        /// Number of scenes.
        #[arg(long, default_value_t = 512)]
        count: usize,
        /// Image side (32 or 64); defaults to the config's generator size.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Flow-matching pretraining; writes loss.csv and ckpt/ under --out.
    Pretrain {
        /// Training dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Continue from --out/ckpt if present.
        #[arg(long, default_value_t = false)]
        resume: bool,
    },
    /// GRPO fine-tuning; writes metrics.csv and ckpt/ under --out.
    TrainGrpo {
        /// Training dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Pretrained checkpoint directory.
        #[arg(long)]
        ckpt: PathBuf,
        /// Continue from --out/ckpt if present.
        #[arg(long, default_value_t = false)]
        resume: bool,
    },
    /// Inpaint one dataset sample.
    Sample {
        /// Checkpoint directory.
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Sample index in the manifest.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Spatial matting in attention.
        #[arg(long, value_enum, default_value_t = Switch::Off)]
        matting: Switch,
        /// Use the stochastic sampler and dump the trajectory.
        #[arg(long, default_value_t = false)]
        sde: bool,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        /// Checkpoint directory.
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Spatial matting in attention.
        #[arg(long, value_enum, default_value_t = Switch::Off)]
        matting: Switch,
        /// Method label and output file stem.
        #[arg(long, default_value = "eval")]
        method: String,
    },
    /// Four-way {matting} x {GRPO} ablation table.
    Ablate {
        /// Pretrained checkpoint directory.
        #[arg(long)]
        pretrained_ckpt: PathBuf,
        /// GRPO checkpoint directory.
        #[arg(long)]
        grpo_ckpt: PathBuf,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
    },
}

fn threads(single: bool) -> usize {
    if single {
        return 1;
    }
    std::env::var("REPAINT_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(0)
}

fn run(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let ctx = Context::new(config, cli.seed, cli.out.clone())?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads(cli.single_thread))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?
        .install(|| match cli.command {
            Command::GenData { count, size } => {
                let manifest = cli::gen_data(&ctx, count, size)?;
                log::info!("wrote {}", manifest.display());
                Ok(())
            }
            Command::Pretrain { data, resume } => {
                let losses = cli::pretrain_cmd(&ctx, &data, resume)?;
                if let Some(l) = losses.last() {
                    log::info!("final loss {l:.5}");
                }
                Ok(())
            }
            Command::TrainGrpo { data, ckpt, resume } => {
                cli::train_grpo_cmd(&ctx, &data, &ckpt, resume).map(|_| ())
            }
            Command::Sample {
                ckpt,
                data,
                index,
                matting,
                sde,
            } => cli::sample_cmd(&ctx, &ckpt, &data, index, matting.on(), sde).map(|_| ()),
            Command::Eval {
                ckpt,
                data,
                matting,
                method,
            } => {
                let r = cli::eval_cmd(&ctx, &ckpt, &data, matting.on(), &method)?;
                println!(
                    "{}: psnr_mask {:.3} {} {:.4} ocr_pass {:.4}",
                    r.method,
                    r.mean_psnr_mask,
                    r.global_score_label,
                    r.mean_global_score,
                    r.mean_ocr_pass
                );
                Ok(())
            }
            Command::Ablate {
                pretrained_ckpt,
                grpo_ckpt,
                data,
            } => {
                let t = cli::ablate_cmd(&ctx, &pretrained_ckpt, &grpo_ckpt, &data)?;
                print!("{}", t.to_csv());
                Ok(())
            }
        })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
