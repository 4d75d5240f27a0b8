//! Command-line front end.
//!
//! Every subcommand accepts `--config FILE` with `key=value` lines whose
//! keys are the long flag names without dashes; flags given on the command
//! line win. Exit codes: 0 success, 1 usage, 2 data or format, 3 divergence.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{Mode, ModelConfig};
use crate::corpus::{self, CorpusConfig, Utterance};
use crate::encoder::{encode, LatentCode};
use crate::error::Error;
use crate::kv::{self, KvMap};
use crate::objective::{Split, LOG_HEADER};
use crate::params::Model;
use crate::synthesis::{self, SynthesisConfig};
use crate::training::{self, train_from, TrainConfig, TrainState};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

/// Bad flag or config value.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Parser, Debug)]
#[command(name = "vaeloop", version, about = "Latent-conditioned shifting-buffer sequence model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus and write it as a VLD1 dataset file.
    GenData(GenDataArgs),
    /// Train a model; writes a VLCK checkpoint, OUT.best and a CSV log.
    Train(TrainArgs),
    /// Print loss rows (epoch,lambda,rec_error,kl_term,total,split) per split.
    Eval(EvalArgs),
    /// Print the posterior mean of one utterance, one value per line.
    Encode(EncodeArgs),
    /// Generate a sequence and write it as a VLSQ file.
    Synthesize(SynthesizeArgs),
    /// Encode two utterances and synthesize along the line between their codes.
    Interpolate(InterpolateArgs),
    /// Export one channel of a VLSQ file as t,value CSV.
    ExportTraj(ExportTrajArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Output dataset (magic VLD1).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long = "d-x")]
    d_x: Option<usize>,
    /// Standard deviation of per-frame Gaussian noise.
    #[arg(long)]
    noise: Option<f64>,
    /// key=value file supplying any of the flags above.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset (VLD1); split 50 test, then 90/10 train/validation.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint to write (magic VLCK) after every epoch.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training log CSV; defaults to OUT.csv.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Continue from this checkpoint instead of starting fresh.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Fraction of epochs over which the KL weight ramps from 0 to 1.
    #[arg(long = "anneal-frac")]
    anneal_frac: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Seed of the dataset split.
    #[arg(long = "split-seed")]
    split_seed: Option<u64>,
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    /// Scale of the input noise in semi-teacher-forcing.
    #[arg(long = "stf-noise")]
    stf_noise: Option<f64>,
    #[arg(long = "clip-norm")]
    clip_norm: Option<f64>,
    /// vae-loop, baseline-no-z or baseline-labeled.
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long = "n-speakers")]
    n_speakers: Option<usize>,
    #[arg(long = "d-z")]
    d_z: Option<usize>,
    #[arg(long = "d-buf")]
    d_buf: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long = "d-p")]
    d_p: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long = "att-components")]
    att_components: Option<usize>,
    /// Comma-separated channel counts of the encoder convolutions.
    #[arg(long = "enc-widths")]
    enc_widths: Option<String>,
    #[arg(long = "enc-hidden")]
    enc_hidden: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// train, validation, test or all.
    #[arg(long)]
    split: Option<String>,
    #[arg(long = "split-seed")]
    split_seed: Option<u64>,
    /// Seed of the evaluation noise.
    #[arg(long)]
    seed: Option<u64>,
    /// Input noise scale; defaults to the checkpoint's training value.
    #[arg(long = "stf-noise")]
    stf_noise: Option<f64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EncodeArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Utterance: a VLSQ file, or DATASET#INDEX.
    #[arg(long)]
    input: Option<String>,
    /// Write the code here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthesizeArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Comma-separated phoneme ids, or @FILE holding them.
    #[arg(long)]
    phonemes: Option<String>,
    /// Prior scale; 0 always uses z = 0.
    #[arg(long)]
    sigma: Option<f64>,
    /// @FILE with one latent value per line; overrides sampling.
    #[arg(long)]
    z: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "max-frames")]
    max_frames: Option<usize>,
    #[arg(long)]
    speaker: Option<usize>,
    /// Output sequence (magic VLSQ).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also export one channel as t,value CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    channel: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InterpolateArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// First utterance: VLSQ file or DATASET#INDEX.
    #[arg(long)]
    from: Option<String>,
    /// Second utterance: VLSQ file or DATASET#INDEX.
    #[arg(long)]
    to: Option<String>,
    #[arg(long)]
    phonemes: Option<String>,
    /// Comma-separated interpolation weights in [0, 1].
    #[arg(long)]
    alphas: Option<String>,
    /// Outputs are PREFIX_<i>.vlsq, one per alpha.
    #[arg(long = "out-prefix")]
    out_prefix: Option<PathBuf>,
    #[arg(long)]
    channel: Option<usize>,
    #[arg(long = "max-frames")]
    max_frames: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExportTrajArgs {
    /// Sequence file (magic VLSQ).
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    channel: Option<usize>,
    /// CSV destination; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Flag values with a config-file fallback.
struct Resolver {
    file: KvMap,
}

impl Resolver {
    fn new(config: Option<&Path>, allowed: &[&str]) -> anyhow::Result<Self> {
        let file = match config {
            None => KvMap::new(),
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                KvMap::parse(&text).map_err(|e| usage(format!("config {}: {e}", p.display())))?
            }
        };
        file.reject_unknown(allowed)
            .map_err(|e| usage(format!("config: {e}")))?;
        Ok(Self { file })
    }

    fn opt<T: FromStr>(&self, flag: Option<T>, key: &str) -> anyhow::Result<Option<T>> {
        if flag.is_some() {
            return Ok(flag);
        }
        self.file
            .get(key)
            .map_err(|_| usage(format!("config: bad value for --{key}")))
    }

    fn or<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> anyhow::Result<T> {
        Ok(self.opt(flag, key)?.unwrap_or(default))
    }

    fn req<T: FromStr>(&self, flag: Option<T>, key: &str) -> anyhow::Result<T> {
        self.opt(flag, key)?.ok_or_else(|| usage(format!("missing required --{key}")))
    }
}

fn check<T>(ok: bool, flag: &str, value: T) -> anyhow::Result<()>
where
    T: std::fmt::Display,
{
    if ok {
        Ok(())
    } else {
        Err(usage(format!("invalid value {value} for --{flag}")))
    }
}

fn gen_data(a: GenDataArgs) -> anyhow::Result<()> {
    let r = Resolver::new(a.config.as_deref(), &["out", "count", "seed", "vocab", "d-x", "noise"])?;
    let d = CorpusConfig::default();
    let cfg = CorpusConfig {
        count: r.or(a.count, "count", d.count)?,
        seed: r.or(a.seed, "seed", d.seed)?,
        vocab: r.or(a.vocab, "vocab", d.vocab)?,
        d_x: r.or(a.d_x, "d-x", d.d_x)?,
        noise: r.or(a.noise, "noise", d.noise)?,
        ..d
    };
    let out: PathBuf = r.req(a.out, "out")?;
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let corpus = corpus::generate_corpus(&cfg)?;
    corpus::save_dataset(&out, &corpus)?;
    eprintln!("wrote {} utterances to {}", corpus.len(), out.display());
    Ok(())
}

const TRAIN_KEYS: &[&str] = &[
    "data", "out", "log", "resume", "epochs", "anneal-frac", "lr", "seed", "split-seed", "batch-size", "stf-noise",
    "clip-norm", "mode", "n-speakers", "d-z", "d-buf", "k", "d-p", "hidden", "att-components", "enc-widths",
    "enc-hidden", "dropout",
];

/// Flags resolved and checked before any data is read; `vocab` and `d_x`
/// are filled in from the dataset afterwards.
fn train_config(a: &TrainArgs, r: &Resolver) -> anyhow::Result<TrainConfig> {
    let d = TrainConfig::default();
    let dm = ModelConfig::default();
    let enc_widths = match r.opt(a.enc_widths.clone(), "enc-widths")? {
        Some(s) => kv::parse_list(&s).map_err(|_| usage(format!("invalid value {s} for --enc-widths")))?,
        None => dm.enc_widths.clone(),
    };
    let model = ModelConfig {
        mode: r.or(a.mode, "mode", dm.mode)?,
        n_speakers: r.or(a.n_speakers, "n-speakers", 0)?,
        d_z: r.or(a.d_z, "d-z", dm.d_z)?,
        d_buf: r.or(a.d_buf, "d-buf", dm.d_buf)?,
        k: r.or(a.k, "k", dm.k)?,
        d_p: r.or(a.d_p, "d-p", dm.d_p)?,
        hidden: r.or(a.hidden, "hidden", dm.hidden)?,
        att_components: r.or(a.att_components, "att-components", dm.att_components)?,
        enc_hidden: r.or(a.enc_hidden, "enc-hidden", dm.enc_hidden)?,
        dropout: r.or(a.dropout, "dropout", dm.dropout)?,
        enc_widths,
        ..dm
    };
    let model = ModelConfig {
        n_speakers: match (model.mode, model.n_speakers) {
            (Mode::BaselineLabeled, 0) => 4,
            (Mode::BaselineLabeled, n) => n,
            _ => 1,
        },
        ..model
    };
    let cfg = TrainConfig {
        model,
        learning_rate: r.or(a.lr, "lr", d.learning_rate)?,
        total_epochs: r.or(a.epochs, "epochs", d.total_epochs)?,
        anneal_fraction: r.or(a.anneal_frac, "anneal-frac", d.anneal_fraction)?,
        batch_size: r.or(a.batch_size, "batch-size", d.batch_size)?,
        seed: r.or(a.seed, "seed", d.seed)?,
        stf_noise_scale: r.or(a.stf_noise, "stf-noise", d.stf_noise_scale)?,
        clip_norm: r.or(a.clip_norm, "clip-norm", d.clip_norm)?,
    };
    check(cfg.learning_rate > 0.0 && cfg.learning_rate.is_finite(), "lr", cfg.learning_rate)?;
    check(cfg.total_epochs >= 1, "epochs", cfg.total_epochs)?;
    check((0.0..=1.0).contains(&cfg.anneal_fraction), "anneal-frac", cfg.anneal_fraction)?;
    check(cfg.batch_size >= 1, "batch-size", cfg.batch_size)?;
    check(cfg.stf_noise_scale >= 0.0 && cfg.stf_noise_scale.is_finite(), "stf-noise", cfg.stf_noise_scale)?;
    check(cfg.clip_norm > 0.0, "clip-norm", cfg.clip_norm)?;
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let r = Resolver::new(a.config.as_deref(), TRAIN_KEYS)?;
    let data: PathBuf = r.req(a.data.clone(), "data")?;
    let out: PathBuf = r.req(a.out.clone(), "out")?;
    let log_path = r.opt(a.log.clone(), "log")?.unwrap_or_else(|| with_suffix(&out, ".csv"));
    let split_seed = r.or(a.split_seed, "split-seed", 0)?;
    let resume: Option<PathBuf> = r.opt(a.resume.clone(), "resume")?;

    // checked even when resuming so that bad flags never pass silently
    let mut cfg = train_config(&a, &r)?;

    let corpus = corpus::load_dataset(&data)?;
    let parts = corpus::split(&corpus, split_seed)?;
    let state = match resume {
        Some(p) => load_checkpoint(&p)?,
        None => {
            let vocab = corpus.iter().flat_map(|u| u.phonemes.iter()).max().map_or(1, |&m| m as usize + 1);
            cfg.model.vocab = vocab.max(cfg.model.vocab);
            cfg.model.d_x = corpus[0].frames.cols();
            TrainState::new(cfg)?
        }
    };
    if state.finished() {
        eprintln!("all {} epochs already run", state.config.total_epochs);
        return Ok(());
    }
    let fresh = state.epoch == 0;
    let mut log = if fresh {
        let mut f = fs::File::create(&log_path)?;
        writeln!(f, "{LOG_HEADER}")?;
        f
    } else {
        fs::OpenOptions::new().append(true).create(true).open(&log_path)?
    };
    let best_path = with_suffix(&out, ".best");
    let outcome = train_from(state, &parts.train, &parts.validation, |st, report| {
        save_checkpoint(&out, st)?;
        if report.improved {
            save_checkpoint(&best_path, st)?;
        }
        let epoch = st.epoch - 1;
        report.train.write_csv_row(&mut log, epoch, Split::Train)?;
        if let Some(v) = &report.validation {
            v.write_csv_row(&mut log, epoch, Split::Validation)?;
        }
        eprintln!(
            "epoch {}/{}: train {:.5} validation {}",
            st.epoch,
            st.config.total_epochs,
            report.train.total,
            report.validation.map_or("-".to_string(), |v| format!("{:.5}", v.total))
        );
        Ok(())
    });
    match outcome {
        Ok(_) => Ok(()),
        Err(e @ Error::Diverged { .. }) => {
            eprintln!("last good checkpoint kept at {}", out.display());
            Err(e.into())
        }
        Err(e) => Err(e.into()),
    }
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let r = Resolver::new(a.config.as_deref(), &["checkpoint", "data", "split", "split-seed", "seed", "stf-noise"])?;
    let ckpt: PathBuf = r.req(a.checkpoint, "checkpoint")?;
    let data: PathBuf = r.req(a.data, "data")?;
    let which: String = r.or(a.split, "split", "test".to_string())?;
    let split_seed = r.or(a.split_seed, "split-seed", 0)?;
    let seed = r.or(a.seed, "seed", 0)?;
    let state = load_checkpoint(&ckpt)?;
    let noise = r.or(a.stf_noise, "stf-noise", state.config.stf_noise_scale)?;
    check(noise >= 0.0 && noise.is_finite(), "stf-noise", noise)?;
    let corpus = corpus::load_dataset(&data)?;
    let parts = corpus::split(&corpus, split_seed)?;
    let splits: Vec<(Split, &[Utterance])> = match which.as_str() {
        "train" => vec![(Split::Train, &parts.train)],
        "validation" => vec![(Split::Validation, &parts.validation)],
        "test" => vec![(Split::Test, &parts.test)],
        "all" => vec![
            (Split::Train, &parts.train),
            (Split::Validation, &parts.validation),
            (Split::Test, &parts.test),
        ],
        other => return Err(usage(format!("invalid value {other} for --split"))),
    };
    let mut out = std::io::stdout().lock();
    writeln!(out, "{LOG_HEADER}")?;
    for (split, data) in splits {
        let b = training::evaluate(&state.model, data, noise, state.config.batch_size, seed)?;
        b.write_csv_row(&mut out, state.epoch, split)?;
    }
    Ok(())
}

/// A VLSQ path, or `DATASET#INDEX` naming one utterance of a dataset.
fn load_utterance_frames(spec: &str) -> anyhow::Result<crate::numerics::Tensor> {
    if let Some((path, idx)) = spec.rsplit_once('#') {
        let i: usize = idx.parse().map_err(|_| usage(format!("bad utterance index in {spec}")))?;
        let corpus = corpus::load_dataset(Path::new(path))?;
        let n = corpus.len();
        let u = corpus
            .into_iter()
            .nth(i)
            .ok_or_else(|| usage(format!("utterance {i} out of range; dataset has {n}")))?;
        return Ok(u.frames);
    }
    Ok(synthesis::load_sequence(Path::new(spec))?)
}

fn parse_phonemes(spec: &str) -> anyhow::Result<Vec<u16>> {
    let text = match spec.strip_prefix('@') {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading {p}"))?,
        None => spec.to_string(),
    };
    let ids: Vec<u16> = text
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| usage(format!("bad phoneme id {s:?}"))))
        .collect::<anyhow::Result<_>>()?;
    if ids.is_empty() {
        return Err(usage("--phonemes is empty"));
    }
    Ok(ids)
}

fn read_latent(spec: &str) -> anyhow::Result<LatentCode> {
    let path = spec
        .strip_prefix('@')
        .ok_or_else(|| usage("--z expects @FILE"))?;
    let text = fs::read_to_string(path).with_context(|| format!("reading {path}"))?;
    let vals: Vec<f64> = text
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| Error::format(0, format!("bad latent value {s:?} in {path}"))))
        .collect::<Result<_, Error>>()?;
    Ok(LatentCode::new(vals)?)
}

fn render_latent(z: &LatentCode) -> String {
    z.z.data().iter().map(|v| format!("{v}\n")).collect()
}

fn encode_cmd(a: EncodeArgs) -> anyhow::Result<()> {
    let r = Resolver::new(a.config.as_deref(), &["checkpoint", "input", "out"])?;
    let ckpt: PathBuf = r.req(a.checkpoint, "checkpoint")?;
    let input: String = r.req(a.input, "input")?;
    let out: Option<PathBuf> = r.opt(a.out, "out")?;
    let model = load_checkpoint(&ckpt)?.model;
    let frames = load_utterance_frames(&input)?;
    let post = encode(&model, &frames)?;
    let text = render_latent(&LatentCode { z: post.mu });
    match out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn synthesize_cmd(a: SynthesizeArgs) -> anyhow::Result<()> {
    let r = Resolver::new(
        a.config.as_deref(),
        &["checkpoint", "phonemes", "sigma", "z", "seed", "max-frames", "speaker", "out", "csv", "channel"],
    )?;
    let ckpt: PathBuf = r.req(a.checkpoint, "checkpoint")?;
    let phonemes = parse_phonemes(&r.req::<String>(a.phonemes, "phonemes")?)?;
    let out: PathBuf = r.req(a.out, "out")?;
    let d = SynthesisConfig::for_phonemes(phonemes.len());
    let cfg = SynthesisConfig {
        sigma: r.or(a.sigma, "sigma", 0.0)?,
        seed: r.or(a.seed, "seed", 0)?,
        max_frames: r.or(a.max_frames, "max-frames", d.max_frames)?,
        speaker: r.or(a.speaker, "speaker", 0)?,
        ..d
    };
    check(cfg.sigma >= 0.0 && cfg.sigma.is_finite(), "sigma", cfg.sigma)?;
    check(cfg.max_frames >= 1, "max-frames", cfg.max_frames)?;
    let model = load_checkpoint(&ckpt)?.model;
    let z = match r.opt::<String>(a.z, "z")? {
        Some(spec) => read_latent(&spec)?,
        None => synthesis::sample_prior(model.config.d_z, cfg.sigma, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?,
    };
    let seq = synthesis::synthesize(&model, &phonemes, &z, &cfg)?;
    synthesis::save_sequence(&out, &seq.frames)?;
    if let Some(csv) = r.opt::<PathBuf>(a.csv, "csv")? {
        let channel = r.or(a.channel, "channel", corpus::PITCH_CHANNEL)?;
        let rows = synthesis::trajectory_export(&seq.frames, channel).map_err(|e| usage(e.to_string()))?;
        let mut f = fs::File::create(csv)?;
        synthesis::write_trajectory_csv(&mut f, &rows)?;
    }
    eprintln!(
        "wrote {} frames to {}{}",
        seq.frames.rows(),
        out.display(),
        if seq.terminated { "" } else { " (frame limit reached)" }
    );
    Ok(())
}

fn interpolate_cmd(a: InterpolateArgs) -> anyhow::Result<()> {
    let r = Resolver::new(
        a.config.as_deref(),
        &["checkpoint", "from", "to", "phonemes", "alphas", "out-prefix", "channel", "max-frames"],
    )?;
    let ckpt: PathBuf = r.req(a.checkpoint, "checkpoint")?;
    let from: String = r.req(a.from, "from")?;
    let to: String = r.req(a.to, "to")?;
    let phonemes = parse_phonemes(&r.req::<String>(a.phonemes, "phonemes")?)?;
    let alphas_s = r.or(a.alphas, "alphas", "0,0.5,1".to_string())?;
    let alphas: Vec<f64> = kv::parse_list(&alphas_s).map_err(|_| usage(format!("invalid value {alphas_s} for --alphas")))?;
    for &al in &alphas {
        check((0.0..=1.0).contains(&al), "alphas", al)?;
    }
    let prefix: PathBuf = r.req(a.out_prefix, "out-prefix")?;
    let channel = r.or(a.channel, "channel", corpus::PITCH_CHANNEL)?;
    let d = SynthesisConfig::for_phonemes(phonemes.len());
    let cfg = SynthesisConfig {
        max_frames: r.or(a.max_frames, "max-frames", d.max_frames)?,
        ..d
    };
    let model: Model = load_checkpoint(&ckpt)?.model;
    check(channel < model.config.d_x, "channel", channel)?;
    let z1 = LatentCode {
        z: encode(&model, &load_utterance_frames(&from)?)?.mu,
    };
    let z2 = LatentCode {
        z: encode(&model, &load_utterance_frames(&to)?)?.mu,
    };
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "alpha,frames,mean_channel,file")?;
    for (i, &alpha) in alphas.iter().enumerate() {
        let z = synthesis::interpolate_z(&z1, &z2, alpha)?;
        let seq = synthesis::synthesize(&model, &phonemes, &z, &cfg)?;
        let path = with_suffix(&prefix, &format!("_{i}.vlsq"));
        synthesis::save_sequence(&path, &seq.frames)?;
        let rows = synthesis::trajectory_export(&seq.frames, channel)?;
        let mean = rows.iter().map(|(_, v)| v).sum::<f64>() / rows.len() as f64;
        writeln!(stdout, "{alpha},{},{mean},{}", rows.len(), path.display())?;
    }
    Ok(())
}

fn export_traj(a: ExportTrajArgs) -> anyhow::Result<()> {
    let r = Resolver::new(a.config.as_deref(), &["input", "channel", "out"])?;
    let input: PathBuf = r.req(a.input, "input")?;
    let channel = r.or(a.channel, "channel", corpus::PITCH_CHANNEL)?;
    let seq = synthesis::load_sequence(&input)?;
    let rows = synthesis::trajectory_export(&seq, channel).map_err(|e| usage(e.to_string()))?;
    match r.opt::<PathBuf>(a.out, "out")? {
        Some(p) => synthesis::write_trajectory_csv(&mut fs::File::create(p)?, &rows)?,
        None => synthesis::write_trajectory_csv(&mut std::io::stdout().lock(), &rows)?,
    }
    Ok(())
}

/// Exit code for a failed command.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<UsageError>().is_some() {
        return EXIT_USAGE;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Diverged { .. } | Error::NonFinite(_)) => EXIT_DIVERGED,
        Some(Error::InvalidArgument(_)) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Encode(a) => encode_cmd(a),
        Command::Synthesize(a) => synthesize_cmd(a),
        Command::Interpolate(a) => interpolate_cmd(a),
        Command::ExportTraj(a) => export_traj(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

