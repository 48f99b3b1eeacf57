use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dilseg::cli::{
    cmd_eval, cmd_fov_table, cmd_stitch_check, cmd_synth, cmd_train, format_fov_table, Overrides, RunConfig,
};
use dilseg::tensor::parallel;
use dilseg::Error;

#[derive(Parser)]
#[command(name = "dilseg", version, about = "Miniature dilated residual segmentation networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic train/val corpora from the [synth] section.
    Synth(RunArgs),
    /// Train a network and write checkpoint/ and train_log.jsonl.
    Train(RunArgs),
    /// Evaluate a checkpoint on whole images from a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long = "stitch-ratio", default_value_t = 1)]
        stitch_ratio: usize,
    },
    /// Print classifier field-of-view sizes.
    FovTable {
        /// Feature strides, e.g. 8,16 for 1/8 and 1/16 resolution.
        #[arg(long, value_delimiter = ',')]
        resolutions: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        kernels: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        dilations: Vec<usize>,
    },
    /// Verify shift-and-stitch against network surgery on random networks.
    StitchCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long = "stitch-ratio")]
    stitch_ratio: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long = "loss.threshold")]
    threshold: Option<f64>,
    #[arg(long = "loss.min-keep")]
    min_keep: Option<usize>,
}

impl RunArgs {
    fn load(&self) -> dilseg::Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        Overrides {
            seed: self.seed,
            out_dir: self.out.clone(),
            stitch_ratio: self.stitch_ratio,
            steps: self.steps,
            threshold: self.threshold,
            min_keep: self.min_keep,
        }
        .apply(&mut cfg);
        Ok(cfg)
    }
}

fn run(command: Command) -> dilseg::Result<()> {
    match command {
        Command::Synth(args) => {
            let out = cmd_synth(&args.load()?)?;
            println!("train_manifest={}", out.train_manifest.display());
            println!("val_manifest={}", out.val_manifest.display());
        }
        Command::Train(args) => {
            let out = cmd_train(&args.load()?)?;
            println!("checkpoint={}", out.checkpoint_dir.display());
            println!("log={}", out.log_path.display());
            println!("train_mean_iou={:.4}", out.final_train.mean_iou);
            if let Some(v) = out.final_val {
                println!("val_mean_iou={:.4}", v.mean_iou);
            }
        }
        Command::Eval {
            checkpoint,
            manifest,
            stitch_ratio,
        } => print!("{}", cmd_eval(&checkpoint, &manifest, stitch_ratio)?.to_text()),
        Command::FovTable {
            resolutions,
            kernels,
            dilations,
        } => print!("{}", format_fov_table(&cmd_fov_table(&resolutions, &kernels, &dilations)?)),
        Command::StitchCheck { seed, instances } => print!("{}", cmd_stitch_check(seed, instances)?.to_text()),
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::Parse { .. } => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    parallel::init_from_env();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
