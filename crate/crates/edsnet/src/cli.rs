//! Command-line interface: train, eval, summarize, bench, gen-synth.
//!
//! Every subcommand validates its full input set before touching the
//! filesystem, so a failed invocation leaves no partial outputs behind.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::bench::{report_csv, run_bench};
use crate::config::{MixerKind, RunConfig};
use crate::dataio::{
    gen_synthetic, load_dataset, load_params, read_archive, save_params, split_folds,
    LoadedVideo, SyntheticSpec,
};
use crate::error::{EdsError, Result};
use crate::summarize::{make_summary, SummaryOutput};
use crate::train::{cross_validate, evaluate, train, write_history_csv};

#[derive(Parser, Debug)]
#[command(name = "edsnet", version, about = "Anchor-based video summarization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train on a dataset manifest and write params, history, and config.
    Train {
        /// Run configuration (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Dataset manifest (JSON).
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory for params.bin, history.csv, config.json.
        #[arg(long)]
        out: PathBuf,
        /// Hold out this fold (train on the rest).
        #[arg(long)]
        fold: Option<usize>,
        /// Fold count used with --fold.
        #[arg(long, default_value_t = 5)]
        folds: usize,
    },
    /// Score saved parameters on a dataset, or cross-validate from scratch.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Saved parameters; omit with --cross-validate.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Train and test across folds instead of loading parameters.
        #[arg(long, conflicts_with = "params")]
        cross_validate: bool,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        /// Report destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize one feature archive with saved parameters.
    Summarize {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        params: PathBuf,
        /// Frame features (.edsf archive).
        #[arg(long)]
        features: PathBuf,
        /// Video id echoed into the output; file stem when omitted.
        #[arg(long)]
        id: Option<String>,
        /// Summary destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time mixer forward passes and fit scaling slopes.
    Bench {
        /// Comma-separated mixers.
        #[arg(long, value_delimiter = ',', default_value = "softmax,fourier,nystrom,dwt")]
        mixers: Vec<String>,
        /// Comma-separated power-of-two sequence lengths.
        #[arg(long, value_delimiter = ',', default_value = "256,512,1024,2048,4096,8192")]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 5)]
        trials: usize,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic dataset with planted keyshots.
    GenSynth {
        /// Generator spec (JSON); defaults when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Output directory for archives and manifest.json.
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses process arguments and runs the chosen subcommand.
pub fn run() -> Result<()> {
    dispatch(Cli::parse())
}

pub fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            manifest,
            out,
            fold,
            folds,
        } => cmd_train(&config, &manifest, &out, fold, folds),
        Command::Eval {
            config,
            manifest,
            params,
            cross_validate,
            folds,
            out,
        } => cmd_eval(&config, &manifest, params.as_deref(), cross_validate, folds, out.as_deref()),
        Command::Summarize {
            config,
            params,
            features,
            id,
            out,
        } => cmd_summarize(&config, &params, &features, id, out.as_deref()),
        Command::Bench {
            mixers,
            lengths,
            dim,
            trials,
            out,
        } => cmd_bench(&mixers, &lengths, dim, trials, out.as_deref()),
        Command::GenSynth { spec, out } => cmd_gen_synth(spec.as_deref(), &out),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| EdsError::io_at("read", path, e))
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let cfg = RunConfig::from_json(&read_text(path)?)?;
    cfg.validate()?;
    Ok(cfg)
}

fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| EdsError::io_at("write", p, e)),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn cmd_train(
    config: &Path,
    manifest: &Path,
    out: &Path,
    fold: Option<usize>,
    folds: usize,
) -> Result<()> {
    let cfg = load_config(config)?;
    let ds = load_dataset(manifest)?;
    let videos: Vec<&LoadedVideo> = match fold {
        None => ds.videos.iter().collect(),
        Some(k) => {
            let parts = split_folds(ds.videos.len(), folds, cfg.seed)?;
            if k >= parts.len() {
                return Err(EdsError::invalid(format!(
                    "fold {k} out of range for {folds} folds"
                )));
            }
            let mut held = vec![false; ds.videos.len()];
            for &i in &parts[k] {
                held[i] = true;
            }
            ds.videos
                .iter()
                .enumerate()
                .filter(|(i, _)| !held[*i])
                .map(|(_, v)| v)
                .collect()
        }
    };
    let (params, history) = train(&videos, &cfg)?;
    fs::create_dir_all(out).map_err(|e| EdsError::io_at("create", out, e))?;
    save_params(&params, &cfg, &out.join("params.bin"))?;
    write_history_csv(&out.join("history.csv"), &history)?;
    let cfg_path = out.join("config.json");
    fs::write(&cfg_path, cfg.to_json()).map_err(|e| EdsError::io_at("write", &cfg_path, e))?;
    let final_loss = history.last().map(|h| h.loss_total).unwrap_or(f32::NAN);
    println!(
        "trained {} epochs on {} videos (final loss {final_loss}); wrote {}",
        cfg.epochs,
        videos.len(),
        out.display()
    );
    Ok(())
}

fn cmd_eval(
    config: &Path,
    manifest: &Path,
    params: Option<&Path>,
    cross: bool,
    folds: usize,
    out: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let ds = load_dataset(manifest)?;
    let text = if cross {
        serde_json::to_string_pretty(&cross_validate(&ds, &cfg, folds)?)?
    } else {
        let path = params.ok_or_else(|| {
            EdsError::invalid("eval needs --params or --cross-validate")
        })?;
        let params = load_params(&cfg, path)?;
        let videos: Vec<&LoadedVideo> = ds.videos.iter().collect();
        serde_json::to_string_pretty(&evaluate(&videos, &cfg, &params, ds.f1_mode)?)?
    };
    write_output(out, &text)
}

fn cmd_summarize(
    config: &Path,
    params: &Path,
    features: &Path,
    id: Option<String>,
    out: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let params = load_params(&cfg, params)?;
    let video = read_archive(features)?;
    let id = id.unwrap_or_else(|| {
        features
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "video".to_string())
    });
    let summary = make_summary(&video, &cfg, &params)?;
    let text = serde_json::to_string_pretty(&SummaryOutput::new(id, &summary))?;
    write_output(out, &text)
}

fn parse_mixers(names: &[String]) -> Result<Vec<MixerKind>> {
    if names.is_empty() {
        return Err(EdsError::invalid("bench needs at least one mixer"));
    }
    names
        .iter()
        .map(|s| {
            MixerKind::ALL
                .into_iter()
                .find(|m| m.name() == s.trim())
                .ok_or_else(|| EdsError::invalid(format!("unknown mixer {s:?}")))
        })
        .collect()
}

fn cmd_bench(
    mixers: &[String],
    lengths: &[usize],
    dim: usize,
    trials: usize,
    out: Option<&Path>,
) -> Result<()> {
    let mixers = parse_mixers(mixers)?;
    if trials < 5 {
        return Err(EdsError::invalid("bench needs at least 5 trials"));
    }
    // The sequence-axis FFT fast path wants power-of-two lengths; anything
    // else would time the fallback and distort the slopes.
    if let Some(n) = lengths.iter().find(|n| !n.is_power_of_two()) {
        return Err(EdsError::invalid(format!(
            "bench length {n} is not a power of two"
        )));
    }
    let report = run_bench(&mixers, lengths, dim, trials)?;
    let csv = report_csv(&report);
    match out {
        Some(p) => {
            fs::write(p, &csv).map_err(|e| EdsError::io_at("write", p, e))?;
            for (mixer, slope) in &report.slopes {
                println!("slope {} {:.4}", mixer.name(), slope);
            }
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_gen_synth(spec: Option<&Path>, out: &Path) -> Result<()> {
    let spec = match spec {
        Some(p) => serde_json::from_str(&read_text(p)?)?,
        None => SyntheticSpec::default(),
    };
    let manifest = gen_synthetic(&spec, out)?;
    println!("{}", manifest.display());
    Ok(())
}
