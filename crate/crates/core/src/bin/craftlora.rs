use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use craftlora::adapters::AdapterKind;
use craftlora::config::RunConfig;
use craftlora::pipeline::{self, SampleOptions};
use craftlora::Result;

#[derive(Parser)]
#[command(name = "craftlora", version, about = "Content/style-disentangled LoRA toolkit on a toy diffusion denoiser")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// JSON config; falls back to $CRAFTLORA_CONFIG, then built-in defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Worker threads (0 = all cores). Never changes results.
    #[arg(long, global = true, value_name = "N", default_value_t = 0)]
    threads: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Content,
    Style,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Host {
    /// The backbone the adapters were trained on.
    Trained,
    /// The unprojected base model saved next to the trunk checkpoint.
    Plain,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the contrastive pair dataset.
    GenPairs {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the base denoiser (unless given) and the rank-limited trunk.
    TrainTrunk {
        #[arg(long)]
        data: PathBuf,
        /// Existing base denoiser checkpoint.
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a content or style adapter from one reference image.
    TrainLora {
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample one image with asymmetric guidance.
    Sample {
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        content_adapter: Option<PathBuf>,
        #[arg(long)]
        style_adapter: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        gamma_c: Option<f64>,
        #[arg(long)]
        gamma_s: Option<f64>,
        /// Unconditional pass also uses the adapted weights.
        #[arg(long)]
        symmetric_cfg: bool,
        #[arg(long, value_enum, default_value = "trained")]
        host: Host,
        /// Per-step diagnostics as TSV.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Sample a prompt grid and score S_c, S_s, S_x.
    Eval {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        content_adapter: Option<PathBuf>,
        #[arg(long)]
        style_adapter: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize a checkpoint.
    Inspect { checkpoint: PathBuf },
}

fn load_config(global: &Global) -> Result<RunConfig> {
    let mut cfg = RunConfig::resolve(global.config.as_deref())?;
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    if cli.global.threads > 0 {
        craftlora::set_threads(cli.global.threads)?;
    }
    if let Command::Inspect { checkpoint } = &cli.command {
        print!("{}", pipeline::cmd_inspect(checkpoint)?);
        return Ok(());
    }
    let cfg = load_config(&cli.global)?;
    match cli.command {
        Command::GenPairs { out } => {
            let pairs = pipeline::cmd_gen_pairs(&cfg, &out)?;
            println!("wrote {} pairs to {}", pairs.len(), out.display());
        }
        Command::TrainTrunk { data, base, out } => {
            print!("{}", pipeline::cmd_train_trunk(&cfg, &data, base.as_deref(), &out)?);
        }
        Command::TrainLora { kind, reference, prompt, backbone, out } => {
            let kind = match kind {
                Kind::Content => AdapterKind::Content,
                Kind::Style => AdapterKind::Style,
            };
            print!("{}", pipeline::cmd_train_lora(&cfg, kind, &reference, &prompt, &backbone, &out)?);
        }
        Command::Sample {
            prompt,
            backbone,
            content_adapter,
            style_adapter,
            out,
            gamma_c,
            gamma_s,
            symmetric_cfg,
            host,
            trace,
        } => {
            let backbone = match host {
                Host::Trained => backbone,
                Host::Plain => pipeline::plain_path(&backbone),
            };
            let opts = SampleOptions { gamma_c, gamma_s, symmetric_cfg, foreign_host: host == Host::Plain, trace };
            pipeline::cmd_sample(
                &cfg,
                &prompt,
                &backbone,
                content_adapter.as_deref(),
                style_adapter.as_deref(),
                cfg.seed,
                &out,
                &opts,
            )?;
            println!("wrote {}", out.display());
        }
        Command::Eval { grid, backbone, content_adapter, style_adapter, out } => {
            let report =
                pipeline::cmd_eval(&cfg, &grid, &backbone, content_adapter.as_deref(), style_adapter.as_deref(), &out)?;
            println!("S_c {:.6}  S_s {:.6}  S_x {:.6}", report.s_c, report.s_s, report.s_x);
        }
        Command::Inspect { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
