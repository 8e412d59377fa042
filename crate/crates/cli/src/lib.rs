//! Command surface of the `spectrum` binary.
//!
//! [`run`] parses an argument vector, executes one subcommand and reports
//! the exit code together with every file it wrote. Exit code 2 means the
//! command line itself was rejected, 1 means the pipeline failed.

use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use spectrum_core::data_io::{
    self, generate_synthetic, group_writers, load_checkpoint, load_dataset, load_labeled_features, preprocess_dataset,
    save_checkpoint, save_dataset, LabeledFeatures, Split, SyntheticConfig,
};
use spectrum_core::network::{forward, forward_many, gate_statistics, ModelConfig, ModelParams};
use spectrum_core::signal::{channel_index, preprocess, ChannelSet, FeatureSequence, PreprocessConfig, CHANNEL_NAMES};
use spectrum_core::spectral::{stft_spectrogram, write_spectrogram_csv, write_spectrogram_pgm};
use spectrum_core::training::{train, write_log_csv, TrainConfig, TrainSet, WriterData};
use spectrum_core::verification::{
    embed_writers, mdv_decide, run_protocol_embedded, score_query, write_scores_csv, EerReport, FreqDistance, Protocol,
    ProtocolOptions,
};

/// Parameter count of the reference configuration reported alongside
/// `bench`, for orientation only.
pub const REFERENCE_PARAM_COUNT: f64 = 1.36e6;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CommandOutcome {
    pub exit_code: i32,
    pub artifacts: Vec<PathBuf>,
}

#[derive(Parser, Debug)]
#[command(name = "spectrum", version, about = "Temporal-frequency online handwriting verification")]
struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic multi-writer dataset.
    GenSynth {
        #[arg(long, default_value_t = 30)]
        writers: usize,
        /// Writers marked as training data; the rest are test writers.
        /// Defaults to two thirds.
        #[arg(long)]
        train_writers: Option<usize>,
        #[arg(long, default_value_t = 10)]
        genuine: usize,
        #[arg(long, default_value_t = 10)]
        skilled: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON file with further generator settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert raw traces into standardized time-function features.
    Preprocess {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 120.0)]
        hz: f64,
        /// 15 or 14 channels.
        #[arg(long, default_value_t = 15)]
        channels: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on the training writers of a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// JSON run configuration (`model`, `train`, `preprocess`).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Loss log; defaults to the checkpoint path with a `.loss.csv` suffix.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test writers.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// e.g. 4v1-skilled, 1v1-random, or `all`.
        #[arg(long, default_value = "4v1-skilled")]
        protocol: String,
        /// Report JSON; defaults next to the checkpoint.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Score CSV; defaults next to the checkpoint.
        #[arg(long)]
        scores: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = FreqArg::Squared)]
        freq_distance: FreqArg,
        /// Preprocessing rate for raw inputs.
        #[arg(long, default_value_t = 120.0)]
        hz: f64,
    },
    /// Spectrogram of one channel of one sample.
    Spectrogram {
        #[arg(long = "in")]
        input: PathBuf,
        /// Zero-based sample index in the file.
        #[arg(long, default_value_t = 0)]
        sample: usize,
        #[arg(long, default_value = "p")]
        channel: String,
        #[arg(long, default_value_t = 64)]
        window: usize,
        #[arg(long, default_value_t = 16)]
        hop: usize,
        #[arg(long, default_value_t = 120.0)]
        hz: f64,
        /// `.pgm` image, or `.csv` for the raw magnitudes.
        #[arg(long)]
        out: PathBuf,
    },
    /// Accept or reject one query against a set of templates.
    Verify {
        #[arg(long)]
        templates: PathBuf,
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        threshold: f64,
        #[arg(long, value_enum, default_value_t = FreqArg::Squared)]
        freq_distance: FreqArg,
        #[arg(long, default_value_t = 120.0)]
        hz: f64,
    },
    /// Inference timing and parameter count.
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Samples to time.
        #[arg(long, default_value_t = 50)]
        limit: usize,
        #[arg(long, default_value_t = 120.0)]
        hz: f64,
    },
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum FreqArg {
    Squared,
    Euclidean,
}

impl From<FreqArg> for FreqDistance {
    fn from(f: FreqArg) -> Self {
        match f {
            FreqArg::Squared => FreqDistance::Squared,
            FreqArg::Euclidean => FreqDistance::Euclidean,
        }
    }
}

/// Contents of the `train --config` file. Every key is optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub preprocess: PreprocessConfig,
}

/// Runs with the process's stdout and stderr.
pub fn run<I, S>(argv: I) -> CommandOutcome
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let (mut out, mut err) = (std::io::stdout(), std::io::stderr());
    run_with_output(argv, &mut out, &mut err)
}

pub fn run_with_output<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> CommandOutcome
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let target: &mut dyn Write = if e.use_stderr() { err } else { out };
            let _ = write!(target, "{}", e.render());
            return CommandOutcome {
                exit_code: code,
                artifacts: Vec::new(),
            };
        }
    };
    let mut artifacts = Vec::new();
    // The pool may run the command on another thread, so output is
    // buffered there and copied out afterwards.
    let mut buf = Vec::new();
    let result = with_threads(cli.threads, || dispatch(cli.command, &mut buf, &mut artifacts));
    let _ = out.write_all(&buf);
    match result {
        Ok(()) => CommandOutcome {
            exit_code: 0,
            artifacts,
        },
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            CommandOutcome {
                exit_code: 1,
                artifacts,
            }
        }
    }
}

fn with_threads<R: Send>(threads: Option<usize>, f: impl FnOnce() -> Result<R> + Send) -> Result<R> {
    match threads {
        None => f(),
        Some(0) => bail!("--threads must be at least 1"),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .context("building the worker pool")?
            .install(f),
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write, artifacts: &mut Vec<PathBuf>) -> Result<()> {
    match cmd {
        Command::GenSynth {
            writers,
            train_writers,
            genuine,
            skilled,
            seed,
            config,
            out: path,
        } => {
            let mut cfg: SyntheticConfig = match config {
                Some(p) => read_json(&p)?,
                None => SyntheticConfig::default(),
            };
            cfg.writers = writers;
            cfg.train_writers = train_writers.unwrap_or(writers * 2 / 3);
            cfg.genuine_per_writer = genuine;
            cfg.skilled_per_writer = skilled;
            let ds = generate_synthetic::<f64>(&cfg, seed)?;
            save_dataset(&ds, &path).with_context(|| format!("writing {}", path.display()))?;
            writeln!(
                out,
                "wrote {} samples from {} writers ({} train, {} test) to {}",
                ds.samples.len(),
                writers,
                cfg.train_writers,
                writers - cfg.train_writers,
                path.display()
            )?;
            artifacts.push(path);
        }
        Command::Preprocess {
            input,
            hz,
            channels,
            out: path,
        } => {
            let cfg = PreprocessConfig {
                target_hz: hz,
                channels: channel_set(channels)?,
            };
            let ds = load_dataset::<f64>(&input).with_context(|| format!("reading {}", input.display()))?;
            let feats = preprocess_dataset(&ds, &cfg)?;
            let mut buf = Vec::new();
            data_io::write_features(&feats, hz, &mut buf)?;
            write_file(&path, &buf)?;
            writeln!(out, "preprocessed {} samples to {}", feats.len(), path.display())?;
            artifacts.push(path);
        }
        Command::Train {
            data,
            config,
            seed,
            out: path,
            log,
        } => cmd_train(&data, config.as_deref(), seed, &path, log, out, artifacts)?,
        Command::Eval {
            data,
            ckpt,
            protocol,
            report,
            scores,
            seed,
            freq_distance,
            hz,
        } => {
            let opts = ProtocolOptions {
                freq_distance: freq_distance.into(),
                seed,
                ..ProtocolOptions::default()
            };
            cmd_eval(&data, &ckpt, &protocol, report, scores, &opts, hz, out, artifacts)?
        }
        Command::Spectrogram {
            input,
            sample,
            channel,
            window,
            hop,
            hz,
            out: path,
        } => {
            let ch = channel_index(&channel)
                .with_context(|| format!("unknown channel {channel:?}; choose one of {}", CHANNEL_NAMES.join(", ")))?;
            let ds = load_dataset::<f64>(&input).with_context(|| format!("reading {}", input.display()))?;
            let trace = ds
                .samples
                .get(sample)
                .with_context(|| format!("sample {sample} out of range ({} samples)", ds.samples.len()))?;
            let cfg = PreprocessConfig {
                target_hz: hz,
                ..PreprocessConfig::default()
            };
            let (f, _) = preprocess(trace, &cfg)?;
            let spec = stft_spectrogram(&f.values.column(ch), window, hop)?;
            let mut buf = Vec::new();
            if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
                write_spectrogram_csv(&spec, &mut buf)?;
            } else {
                write_spectrogram_pgm(&spec, &mut buf)?;
            }
            write_file(&path, &buf)?;
            writeln!(
                out,
                "spectrogram of {channel} for sample {sample} ({}): {} frames x {} bins -> {}",
                trace.writer_id,
                spec.rows(),
                spec.cols(),
                path.display()
            )?;
            artifacts.push(path);
        }
        Command::Verify {
            templates,
            query,
            ckpt,
            threshold,
            freq_distance,
            hz,
        } => {
            let params = load_model(&ckpt)?;
            let cfg = preprocess_for(&params, hz);
            let t = load_labeled_features::<f64>(&templates, &cfg).with_context(|| format!("reading {}", templates.display()))?;
            let q = load_labeled_features::<f64>(&query, &cfg).with_context(|| format!("reading {}", query.display()))?;
            let Some(q) = q.first() else { bail!("query file {} is empty", query.display()) };
            if t.is_empty() {
                bail!("template file {} is empty", templates.display());
            }
            let t_feats: Vec<FeatureSequence<f64>> = t.iter().map(|s| s.features.clone()).collect();
            let t_emb: Vec<_> = forward_many(&t_feats, &params)?.into_iter().map(|(e, _)| e).collect();
            let q_emb = forward(&q.features, &params)?;
            let scores = score_query(&t_emb, &q_emb, freq_distance.into())?;
            let accept = mdv_decide(&scores, threshold);
            writeln!(
                out,
                "{} statistic {:.6} threshold {threshold} (s_T min {:.6} avg {:.6}, s_F min {:.6} avg {:.6})",
                if accept { "accept" } else { "reject" },
                scores.mdv_statistic(),
                scores.t_min,
                scores.t_avg,
                scores.f_min,
                scores.f_avg
            )?;
        }
        Command::Bench { ckpt, data, limit, hz } => {
            let params = load_model(&ckpt)?;
            let cfg = preprocess_for(&params, hz);
            let feats = load_labeled_features::<f64>(&data, &cfg).with_context(|| format!("reading {}", data.display()))?;
            let sample: Vec<FeatureSequence<f64>> = feats.into_iter().take(limit.max(1)).map(|s| s.features).collect();
            if sample.is_empty() {
                bail!("no samples in {}", data.display());
            }
            let t0 = Instant::now();
            forward_many(&sample, &params)?;
            let ms = t0.elapsed().as_secs_f64() * 1e3 / sample.len() as f64;
            let default_count = ModelParams::<f64>::init(ModelConfig::default(), 0)?.param_count();
            writeln!(out, "inference {ms:.3} ms/sample over {} samples", sample.len())?;
            writeln!(out, "parameters {} (checkpoint, d={})", params.param_count(), params.config().width)?;
            writeln!(
                out,
                "parameters {default_count} at the default configuration (d=64, 3 scales, 2 blocks); reference figure {:.2}M",
                REFERENCE_PARAM_COUNT / 1e6
            )?;
        }
    }
    Ok(())
}

fn channel_set(n: usize) -> Result<ChannelSet> {
    match n {
        15 => Ok(ChannelSet::Fifteen),
        14 => Ok(ChannelSet::Fourteen),
        _ => bail!("--channels must be 14 or 15, got {n}"),
    }
}

fn preprocess_for(params: &ModelParams<f64>, hz: f64) -> PreprocessConfig {
    PreprocessConfig {
        target_hz: hz,
        channels: if params.config().input_channels == 14 {
            ChannelSet::Fourteen
        } else {
            ChannelSet::Fifteen
        },
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    serde_json::from_reader(BufReader::new(f)).with_context(|| format!("parsing {}", path.display()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn load_model(path: &Path) -> Result<ModelParams<f64>> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Writers of `split`, or every writer when the file carries no split
/// labels at all.
fn writers_for(samples: &[LabeledFeatures<f64>], split: Split) -> Vec<WriterData<f64>> {
    if samples.iter().all(|s| s.split.is_none()) {
        group_writers(samples, None)
    } else {
        group_writers(samples, Some(split))
    }
}

fn cmd_train(
    data: &Path,
    config: Option<&Path>,
    seed: u64,
    path: &Path,
    log: Option<PathBuf>,
    out: &mut dyn Write,
    artifacts: &mut Vec<PathBuf>,
) -> Result<()> {
    let cfg: RunConfig = match config {
        Some(p) => read_json(p)?,
        None => RunConfig::default(),
    };
    cfg.model.validate()?;
    cfg.train.validate()?;
    let samples = load_labeled_features::<f64>(data, &cfg.preprocess).with_context(|| format!("reading {}", data.display()))?;
    let set = TrainSet {
        writers: writers_for(&samples, Split::Train),
    };
    let channels = samples.first().map(|s| s.features.channels()).unwrap_or(0);
    if channels != cfg.model.input_channels {
        bail!(
            "data has {channels} channels but the model expects {}",
            cfg.model.input_channels
        );
    }
    let log_path = log.unwrap_or_else(|| with_suffix(path, ".loss.csv"));
    let mut epoch_lines = Vec::new();
    let outcome = train(&set, cfg.model.clone(), &cfg.train, seed, |report, params| {
        save_checkpoint(params, path)?;
        epoch_lines.push(format!(
            "epoch {}/{}: mean loss {:.6} over {} steps",
            report.epoch + 1,
            cfg.train.epochs,
            report.mean_loss,
            report.steps
        ));
        log::info!("{}", epoch_lines.last().expect("just pushed"));
        Ok(())
    })?;
    save_checkpoint(&outcome.params, path)?;
    let mut csv = Vec::new();
    write_log_csv(&outcome.history, &mut csv)?;
    write_file(&log_path, &csv)?;
    for l in &epoch_lines {
        writeln!(out, "{l}")?;
    }
    writeln!(
        out,
        "trained on {} writers, {} steps; checkpoint {} log {}",
        set.writers.len(),
        outcome.history.len(),
        path.display(),
        log_path.display()
    )?;
    artifacts.push(path.to_path_buf());
    artifacts.push(log_path);
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    reports: &'a [EerReport],
    gate_statistic: f64,
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    data: &Path,
    ckpt: &Path,
    protocol: &str,
    report: Option<PathBuf>,
    scores: Option<PathBuf>,
    opts: &ProtocolOptions,
    hz: f64,
    out: &mut dyn Write,
    artifacts: &mut Vec<PathBuf>,
) -> Result<()> {
    let protocols: Vec<Protocol> = if protocol == "all" {
        Protocol::all()
    } else {
        vec![protocol.parse()?]
    };
    let params = load_model(ckpt)?;
    let samples =
        load_labeled_features::<f64>(data, &preprocess_for(&params, hz)).with_context(|| format!("reading {}", data.display()))?;
    let test = writers_for(&samples, Split::Test);
    if test.is_empty() {
        bail!("no test writers in {}", data.display());
    }
    let embedded = embed_writers(&test, &params)?;
    let all_features: Vec<FeatureSequence<f64>> = test.iter().flat_map(|w| w.genuine.iter().chain(&w.skilled).cloned()).collect();
    let gate = gate_statistics(&params, &all_features)?;

    let mut reports = Vec::new();
    let mut score_files = Vec::new();
    for &p in &protocols {
        let (r, trials) = run_protocol_embedded(&embedded, p, opts)?;
        writeln!(
            out,
            "{p}: EER_g {:.2} EER_l {:.2} (temporal only: EER_g {:.2} EER_l {:.2}; {} genuine / {} forgery trials)",
            r.eer_global, r.eer_local, r.temporal_eer_global, r.temporal_eer_local, r.genuine_trials, r.forgery_trials
        )?;
        let mut csv = Vec::new();
        write_scores_csv(&trials, &mut csv)?;
        let path = match (&scores, protocols.len()) {
            (Some(s), 1) => s.clone(),
            (Some(s), _) => with_suffix(s, &format!(".{p}.csv")),
            (None, _) => with_suffix(ckpt, &format!(".{p}.scores.csv")),
        };
        score_files.push((path, csv));
        reports.push(r);
    }
    writeln!(out, "gate statistic {gate:.4} (above 0.5 leans temporal)")?;
    let json = serde_json::to_vec_pretty(&EvalOutput {
        reports: &reports,
        gate_statistic: gate,
    })?;
    let report_path = report.unwrap_or_else(|| with_suffix(ckpt, ".eval.json"));
    write_file(&report_path, &json)?;
    artifacts.push(report_path);
    for (path, csv) in score_files {
        write_file(&path, &csv)?;
        artifacts.push(path);
    }
    Ok(())
}
