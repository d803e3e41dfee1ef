//! `mssg`: command-line front end for the gland segmentation pipeline.
//!
//! Exit codes: 0 success, 1 a stage failed, 2 bad input, 3 bad config.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::LazyLock;

use clap::{Parser, Subcommand};
use log::info;

use mssg_core::config::{Preset, RunConfig};
use mssg_core::pipeline::{
    eval_stage, predict_stage, run_ablation, run_pipeline, spm_stage, train_stage, write_snapshot,
};
use mssg_core::synth::generate_dataset;
use mssg_core::Error;

static KEY_HELP: LazyLock<String> = LazyLock::new(|| {
    format!(
        "Config keys (key, default, meaning):\n{}\nThe desk preset overrides:\n{}",
        RunConfig::help_table(Preset::Reference),
        desk_overrides()
    )
});

fn desk_overrides() -> String {
    let (reference, desk) = (Preset::Reference.config(), Preset::Desk.config());
    mssg_core::config::KEYS
        .iter()
        .filter_map(|(key, _)| {
            let v = desk.get(key)?;
            (reference.get(key)? != v).then(|| format!("  {key} = {v}\n"))
        })
        .collect()
}

#[derive(Debug, Parser)]
#[command(name = "mssg", version, about = "Unsupervised gland segmentation")]
#[command(after_help = KEY_HELP.as_str())]
struct Cli {
    /// Directory every relative path is resolved against.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,

    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Flat key=value config file, applied on top of the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Base settings: `reference` or `desk`.
    #[arg(long, global = true, default_value = "reference")]
    preset: String,

    /// Override one key (`--set msg.epochs=5`); wins over the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset (images/, gt/, gt3/, manifest.json).
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Defaults to data.train_count.
        #[arg(long)]
        count: Option<usize>,
        /// Defaults to data.train_seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Mine a proposal map and JSON sidecar per image.
    Spm {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the segmentation network on images and their proposals.
    Train {
        /// Directory of training images; patches are cut from them.
        #[arg(long)]
        patches: PathBuf,
        #[arg(long)]
        proposals: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write label maps (labels/) and gland masks (masks/) for images.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predicted masks against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Synthesize (if data.synth), mine, train, predict and evaluate.
    Pipeline,
    /// Train the four loss variants over ablate.seeds and compare.
    Ablate,
    /// Print the effective configuration.
    ShowConfig,
}

fn exit_code(err: &Error) -> u8 {
    match err.root() {
        Error::Config(_) => 3,
        Error::MissingFile(_)
        | Error::UnsupportedFormat { .. }
        | Error::CorruptData { .. }
        | Error::DimensionMismatch { .. }
        | Error::InvalidLabel { .. }
        | Error::InvalidArgument(_) => 2,
        _ => 1,
    }
}

fn resolve(workdir: &Path, p: &Path) -> PathBuf {
    workdir.join(p)
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = Preset::parse(&cli.preset)?.config();
    if let Some(path) = &cli.config {
        cfg.apply_file(&resolve(&cli.workdir, path))
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    for o in &cli.overrides {
        cfg.apply_override(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = load_config(cli)?;
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(Error::Config("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Error::Config(format!("--jobs: {e}")))?;
    }
    let wd = &cli.workdir;
    let at = |p: &PathBuf| resolve(wd, p);
    match &cli.command {
        Command::Synth { out, count, seed } => {
            let out = at(out);
            let n = count.unwrap_or(cfg.data.train_count);
            let manifest =
                generate_dataset(&out, n, &cfg.synth, seed.unwrap_or(cfg.data.train_seed))?;
            write_snapshot(&out, &cfg)?;
            info!("wrote {} images to {}", manifest.items.len(), out.display());
        }
        Command::Spm { input, out } => {
            let mined = spm_stage(&at(input), &at(out), &cfg)?;
            info!("mined {} proposals", mined.len());
        }
        Command::Train {
            patches,
            proposals,
            out,
        } => {
            let outcome = train_stage(&at(patches), &at(proposals), &at(out), &cfg)?;
            if let Some(last) = outcome.log.last() {
                info!("final epoch loss {:.5}", last.loss_total);
            }
        }
        Command::Predict { model, input, out } => {
            let preds = predict_stage(&at(model), &at(input), &at(out), &cfg)?;
            info!("predicted {} images", preds.len());
        }
        Command::Eval { pred, gt, out, csv } => {
            let csv = csv.as_ref().map(at);
            let report = eval_stage(&at(pred), &at(gt), &at(out), csv.as_deref(), &cfg)?;
            info!(
                "{} images: F1 {:.4}, DICE {:.4}, mIOU {:.4}",
                report.count, report.mean_f1, report.mean_dice, report.mean_miou
            );
        }
        Command::Pipeline => {
            run_pipeline(wd, &cfg)?;
        }
        Command::Ablate => {
            let table = run_ablation(wd, &cfg)?;
            for r in &table.rows {
                info!("{:<4} mIOU {:.4} delta {:+.4}", r.variant, r.miou, r.delta);
            }
        }
        Command::ShowConfig => print!("{}", cfg.to_text()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
