use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mmlab_cli::config::{preset, RunConfig};
use mmlab_cli::{commands, CliError};

/// Desk-scale multimodal MoE transformer lab.
#[derive(Parser)]
#[command(name = "mmlab", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; overrides --preset when both are given.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Embedded preset name (desk-tiny, full-2b).
    #[arg(long)]
    preset: Option<String>,
    /// Output directory (also via MMLAB_OUT_DIR; flag wins).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Root seed override.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the staged training loop and write metrics + checkpoint.
    Train(Common),
    /// Train every sweep grid point and emit records + scaling fits.
    Sweep(Common),
    /// Dump per-layer modality-block attention masses from a checkpoint.
    AttnDump {
        #[command(flatten)]
        common: Common,
        /// Checkpoint base path (expects <base>.json and <base>.bin).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Optional image fixture base path (header + f32 blob); defaults to
        /// the first held-out sample.
        #[arg(long)]
        image: Option<PathBuf>,
    },
    /// Serialize the packed-sequence layout for one image size.
    PackDebug {
        #[command(flatten)]
        common: Common,
        /// Image height in pixels (defaults to the config's image size).
        #[arg(long)]
        height: Option<usize>,
        /// Image width in pixels.
        #[arg(long)]
        width: Option<usize>,
    },
}

fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match (&common.config, &common.preset) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Config(format!("reading {}: {e}", path.display()))
            })?;
            RunConfig::from_toml(&text)?
        }
        (None, Some(name)) => preset(name)?,
        (None, None) => {
            return Err(CliError::Config(
                "either --config or --preset is required".into(),
            ))
        }
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn resolve_out_dir(common: &Common, cfg: &RunConfig, command: &str) -> PathBuf {
    if let Some(out) = &common.out {
        return out.clone();
    }
    if let Ok(env) = std::env::var("MMLAB_OUT_DIR") {
        if !env.is_empty() {
            return PathBuf::from(env);
        }
    }
    cfg.out_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(command))
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Train(common) => {
            let cfg = load_config(&common)?;
            let out = resolve_out_dir(&common, &cfg, "train");
            commands::cmd_train(&cfg, &out)?;
        }
        Cmd::Sweep(common) => {
            let cfg = load_config(&common)?;
            let out = resolve_out_dir(&common, &cfg, "sweep");
            commands::cmd_sweep(&cfg, &out)?;
        }
        Cmd::AttnDump { common, checkpoint, image } => {
            let cfg = load_config(&common)?;
            let out = resolve_out_dir(&common, &cfg, "attn-dump");
            commands::cmd_attn_dump(&cfg, &checkpoint, image.as_deref(), &out)?;
        }
        Cmd::PackDebug { common, height, width } => {
            let cfg = load_config(&common)?;
            let out = resolve_out_dir(&common, &cfg, "pack-debug");
            let h = height.unwrap_or(cfg.data.grid.image_size);
            let w = width.unwrap_or(cfg.data.grid.image_size);
            commands::cmd_pack_debug(&cfg, h, w, &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            // bad flags are a configuration problem
            eprint!("{e}");
            return ExitCode::from(1);
        }
        Err(e) => {
            // --help / --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
