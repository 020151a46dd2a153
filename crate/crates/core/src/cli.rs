//! Command-line front end. Exit codes: 0 success, 1 usage or configuration
//! error, 2 runtime failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{pit_score, si_sdr_db, SourcePair};
use crate::params::ParamRegistry;
use crate::profiler::{count_model_params, profile, sweep, sweep_csv, sweep_table};
use crate::separator::{ModelConfig, SeparatorModel};
use crate::toy::{generate_noisy_toy_mixture, generate_toy_mixture};
use crate::train::{evaluate, mixture_si_sdr, train_toy, write_history, EpochRecord, TrainHooks};
use crate::wav::{read_wav, read_wav_at, write_wav, WavFormat};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const SIDECAR_FILE: &str = "model.cfg";
pub const HISTORY_FILE: &str = "history.csv";

#[derive(Debug, Parser)]
#[command(name = "groupcomm", version, about = "Group-communication speech separation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print parameter and MAC counts.
    Profile(ProfileArgs),
    /// Train on synthetic toy mixtures.
    Train(TrainArgs),
    /// Separate a mono WAV into one file per speaker.
    Separate(SeparateArgs),
    /// Report permutation-invariant SI-SDR.
    Evaluate(EvaluateArgs),
    /// Write a toy mixture and its two sources as WAV files.
    Toy(ToyArgs),
}

#[derive(Debug, Args)]
struct ProfileArgs {
    /// The twelve reference configurations, baseline first.
    #[arg(long, conflicts_with = "config")]
    table2: bool,
    /// Run-config file whose model section is profiled.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(short = 'K', long)]
    groups: Option<usize>,
    #[arg(short = 'M', long)]
    group_size: Option<usize>,
    #[arg(short = 'N', long)]
    filters: Option<usize>,
    #[arg(long)]
    hidden_in: Option<usize>,
    #[arg(long)]
    hidden_out: Option<usize>,
    #[arg(short = 'L', long)]
    depth: Option<usize>,
    /// Input duration for MAC counting.
    #[arg(long, default_value_t = 4.0)]
    seconds: f64,
    /// Also write the table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Run-config file; the built-in overfit preset when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for the checkpoint, config sidecar and history.
    #[arg(long)]
    out: PathBuf,
    /// Suppress per-epoch progress lines.
    #[arg(long)]
    quiet: bool,
}

#[derive(Debug, Args)]
struct SeparateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Config sidecar; defaults to `model.cfg` next to the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    input: PathBuf,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Write 16-bit PCM instead of 32-bit float.
    #[arg(long)]
    pcm16: bool,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Reference sources, one per speaker.
    #[arg(long, num_args = 1.., required = true)]
    refs: Vec<PathBuf>,
    /// Precomputed estimates, one per speaker.
    #[arg(long, num_args = 1.., conflicts_with_all = ["checkpoint", "mixture"])]
    estimates: Vec<PathBuf>,
    #[arg(long, requires = "mixture")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, requires = "checkpoint")]
    mixture: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ToyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    seconds: f64,
    #[arg(long, default_value_t = 16_000)]
    sample_rate: u32,
    /// Add white noise at this SNR (dB).
    #[arg(long)]
    noise_snr: Option<f64>,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                err.write_all(text.as_bytes())
            } else {
                out.write_all(text.as_bytes())
            };
            return code;
        }
    };
    let result = match cli.command {
        Command::Profile(a) => cmd_profile(&a, out),
        Command::Train(a) => cmd_train(&a, out),
        Command::Separate(a) => cmd_separate(&a, out),
        Command::Evaluate(a) => cmd_evaluate(&a, out),
        Command::Toy(a) => cmd_toy(&a, out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

fn io_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn cmd_profile(a: &ProfileArgs, out: &mut dyn Write) -> Result<()> {
    if !(a.seconds.is_finite() && a.seconds > 0.0) {
        return Err(Error::config("seconds", "must be positive"));
    }
    let configs = if a.table2 {
        ModelConfig::table2()
    } else {
        let mut cfg = match &a.config {
            Some(p) => RunConfig::load(p)?.model,
            None => ModelConfig::baseline(),
        };
        let overrides = [
            (a.groups, &mut cfg.groups),
            (a.group_size, &mut cfg.group_size),
            (a.filters, &mut cfg.filters),
            (a.hidden_in, &mut cfg.hidden_in),
            (a.hidden_out, &mut cfg.hidden_out),
            (a.depth, &mut cfg.depth),
        ];
        for (v, slot) in overrides {
            if let Some(v) = v {
                *slot = v;
            }
        }
        cfg.validate()?;
        let baseline = ModelConfig {
            sample_rate: cfg.sample_rate,
            window: cfg.window,
            stride: cfg.stride,
            speakers: cfg.speakers,
            ..ModelConfig::baseline()
        };
        if cfg == baseline {
            vec![cfg]
        } else {
            vec![baseline, cfg]
        }
    };
    let rows = sweep(&configs, a.seconds)?;
    write!(out, "{}", sweep_table(&rows)).map_err(io_err)?;
    if !a.table2 {
        let report = profile(&configs[configs.len() - 1], a.seconds)?;
        writeln!(out, "\nbreakdown ({} s):", a.seconds).map_err(io_err)?;
        for e in &report.breakdown {
            writeln!(out, "  {:<11} {:>10} params {:>14} MACs", e.name, e.params, e.macs).map_err(io_err)?;
        }
    }
    if let Some(path) = &a.csv {
        std::fs::write(path, sweep_csv(&rows)).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::overfit_preset(),
    };
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    writeln!(
        out,
        "training {} parameters on {} toy items ({} validation)",
        count_model_params(&cfg.model)?,
        cfg.data.train_items,
        cfg.data.valid_items
    )
    .map_err(io_err)?;

    let quiet = a.quiet;
    let mut progress = |r: &EpochRecord| {
        if !quiet {
            let _ = writeln!(
                out,
                "epoch {:>3}  lr {:.6}  train_loss {:>8.3}  valid_sisdr {:>7.3}",
                r.epoch, r.lr, r.train_loss, r.valid_sisdr
            );
        }
    };
    let run = train_toy(
        &cfg,
        TrainHooks {
            aux_loss: None,
            on_epoch: Some(&mut progress),
        },
    )?;
    let outcome = &run.outcome;
    outcome.best.save(&a.out.join(CHECKPOINT_FILE))?;
    cfg.save(&a.out.join(SIDECAR_FILE))?;
    write_history(&a.out.join(HISTORY_FILE), &outcome.history)?;

    let before = mixture_si_sdr(&run.train_set)?;
    let (_, after) = evaluate(&run.model, &run.train_set)?;
    writeln!(
        out,
        "best epoch {}  train PIT SI-SDR {:.2} dB (mixture {:.2} dB, gain {:.2} dB)",
        outcome.best_epoch,
        after,
        before,
        after - before
    )
    .map_err(io_err)?;
    Ok(())
}

fn sidecar_for(checkpoint: &Path, explicit: Option<&PathBuf>) -> PathBuf {
    explicit
        .cloned()
        .unwrap_or_else(|| checkpoint.with_file_name(SIDECAR_FILE))
}

fn load_model(checkpoint: &Path, config: Option<&PathBuf>) -> Result<SeparatorModel> {
    let cfg = RunConfig::load(&sidecar_for(checkpoint, config))?;
    let params = ParamRegistry::load(checkpoint)?;
    SeparatorModel::from_registry(&cfg.model, &params)
}

fn cmd_separate(a: &SeparateArgs, out: &mut dyn Write) -> Result<()> {
    let model = load_model(&a.checkpoint, a.config.as_ref())?;
    let sr = model.config().sample_rate;
    let mixture = read_wav_at(&a.input, sr)?;
    let estimates = model.separate(&mixture)?;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let format = if a.pcm16 { WavFormat::Pcm16 } else { WavFormat::Float32 };
    for (i, est) in estimates.iter().enumerate() {
        let path = a.out_dir.join(format!("est{}.wav", i + 1));
        write_wav(&path, est, sr, format)?;
        writeln!(out, "{}", path.display()).map_err(io_err)?;
    }
    Ok(())
}

fn cmd_evaluate(a: &EvaluateArgs, out: &mut dyn Write) -> Result<()> {
    let (first, sr) = read_wav(&a.refs[0])?;
    let mut refs = vec![first];
    for p in &a.refs[1..] {
        refs.push(read_wav_at(p, sr)?);
    }
    let estimates = if !a.estimates.is_empty() {
        a.estimates
            .iter()
            .map(|p| read_wav_at(p, sr))
            .collect::<Result<Vec<_>>>()?
    } else {
        let (Some(ck), Some(mix)) = (&a.checkpoint, &a.mixture) else {
            return Err(Error::config(
                "estimates",
                "give --estimates or --checkpoint with --mixture",
            ));
        };
        let model = load_model(ck, a.config.as_ref())?;
        if model.config().sample_rate != sr {
            return Err(Error::Wav(format!(
                "references are {sr} Hz but the model expects {} Hz",
                model.config().sample_rate
            )));
        }
        model.separate(&read_wav_at(mix, sr)?)?
    };
    let score = pit_score(&SourcePair::new(estimates, refs)?, si_sdr_db)?;
    for (r, (&e, s)) in score.permutation.iter().zip(&score.per_source).enumerate() {
        writeln!(out, "source {}  estimate {}  SI-SDR {:.3} dB", r + 1, e + 1, s).map_err(io_err)?;
    }
    writeln!(out, "mean SI-SDR {:.3} dB", score.mean).map_err(io_err)?;
    Ok(())
}

fn cmd_toy(a: &ToyArgs, out: &mut dyn Write) -> Result<()> {
    let item = match a.noise_snr {
        Some(snr) => generate_noisy_toy_mixture(a.seed, a.seconds, a.sample_rate, snr)?,
        None => generate_toy_mixture(a.seed, a.seconds, a.sample_rate)?,
    };
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let files = [
        ("mix.wav", &item.mixture),
        ("s1.wav", &item.sources[0]),
        ("s2.wav", &item.sources[1]),
    ];
    for (name, data) in files {
        let path = a.out_dir.join(name);
        write_wav(&path, data, a.sample_rate, WavFormat::Float32)?;
        writeln!(out, "{}", path.display()).map_err(io_err)?;
    }
    Ok(())
}
