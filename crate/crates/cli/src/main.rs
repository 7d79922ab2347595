//! `ltts`: train, synthesize, edit and clone with the latent-tts pipeline.
//!
//! Checkpoints live under `--root` (or `$LTTS_CKPT_ROOT`). The run
//! configuration is resolved once per invocation: `--config` if given,
//! otherwise `<root>/run.json` if present, otherwise the `--preset`.
//! `gen-data` writes the resolved configuration to `<root>/run.json`.
//!
//! Exit codes: 0 ok, 1 other failure, 2 configuration error, 3 missing
//! prerequisite stage, 4 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use latent_tts::aligner::Alignment;
use latent_tts::data::{MelSpectrogram, PhonemeSequence};
use latent_tts::diffusion::{synthesize, SamplerKind, SamplerOptions};
use latent_tts::error::Error;
use latent_tts::inverse::{edit, zero_shot, EditOptions, EditSpec, GuidanceConfig};
use latent_tts::pipeline::{export_audio_features, EvalOptions, Loaded, Pipeline, RunConfig, Stage};
use latent_tts::tensor::{load_array2, save_array2};

#[derive(Parser, Debug)]
#[command(name = "ltts", version, about = "Latent diffusion TTS on synthetic spectrogram corpora")]
struct Cli {
    /// Checkpoint root directory.
    #[arg(long, env = "LTTS_CKPT_ROOT", default_value = "runs/default", global = true)]
    root: PathBuf,
    /// Run configuration (JSON). Defaults to `<root>/run.json`, then the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in configuration used when no file is found.
    #[arg(long, value_enum, default_value_t = Preset::Desk, global = true)]
    preset: Preset,
    /// Seed for the preset configuration.
    #[arg(long, default_value_t = 0, global = true)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    /// Desk-scale models on the default 500-utterance corpus.
    Desk,
    /// Tiny models, a few steps per stage; for trying the commands.
    Smoke,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Sampler {
    Em,
    Ode,
}

impl From<Sampler> for SamplerKind {
    fn from(s: Sampler) -> Self {
        match s {
            Sampler::Em => SamplerKind::Em,
            Sampler::Ode => SamplerKind::Ode,
        }
    }
}

#[derive(clap::Args, Debug)]
struct SampleArgs {
    /// Reverse-time integration steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, value_enum, default_value_t = Sampler::Em)]
    sampler: Sampler,
    /// Seed for the sampler noise.
    #[arg(long, default_value_t = 0)]
    sample_seed: u64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus.
    GenData,
    /// Train the minimal-CTC aligner.
    TrainAligner,
    /// Forced-align a spectrogram against its phonemes.
    Align {
        #[arg(long)]
        mel: PathBuf,
        /// Phoneme ids, e.g. "0 3 1".
        #[arg(long)]
        text: String,
    },
    /// Train the VAE on forced alignments.
    TrainVae,
    /// Adversarial fine-tuning of the decoder.
    TrainGan,
    /// Train the latent score model (autoencoder frozen).
    TrainDiffusion,
    /// Sample speech for a phoneme sequence.
    Synthesize {
        #[arg(long)]
        text: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        sample: SampleArgs,
    },
    /// Replace phonemes `[a, b)` of an utterance.
    Edit {
        #[arg(long)]
        mel: PathBuf,
        #[arg(long)]
        text: String,
        /// Phoneme index range `a:b` to replace.
        #[arg(long)]
        span: String,
        /// Replacement phoneme ids; empty deletes the span.
        #[arg(long, default_value = "")]
        replacement: String,
        #[arg(long)]
        out: PathBuf,
        /// Guidance strength.
        #[arg(long, default_value_t = 1.0)]
        xi0: f64,
        #[command(flatten)]
        sample: SampleArgs,
    },
    /// Speak new text in the voice of a reference utterance.
    Clone {
        #[arg(long)]
        ref_mel: PathBuf,
        #[arg(long)]
        ref_text: String,
        #[arg(long)]
        text: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        xi0: f64,
        #[command(flatten)]
        sample: SampleArgs,
    },
    /// Compute the metrics report for a trained run.
    Evaluate {
        #[arg(long)]
        utterances: Option<usize>,
        #[arg(long, default_value_t = 200)]
        synth_samples: usize,
        #[arg(long, default_value_t = 10)]
        edit_trials: usize,
        #[arg(long, default_value_t = 100)]
        synth_steps: usize,
        #[arg(long, default_value_t = 300)]
        edit_steps: usize,
    },
    /// Convert a binary spectrogram to `.npy` plus a PNG heatmap.
    Export {
        #[arg(long)]
        mel: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn resolve_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let stored = cli.root.join("run.json");
    let cfg = if let Some(path) = &cli.config {
        RunConfig::load(path)?
    } else if stored.exists() {
        RunConfig::load(&stored)?
    } else {
        match cli.preset {
            Preset::Desk => RunConfig::desk(cli.seed),
            Preset::Smoke => RunConfig::smoke(cli.seed),
        }
    };
    Ok(cfg)
}

fn read_mel(path: &Path, hop: f64) -> anyhow::Result<MelSpectrogram> {
    let values = load_array2(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(MelSpectrogram::new(values, hop)?)
}

fn parse_span(span: &str) -> anyhow::Result<(usize, usize)> {
    let (a, b) = span
        .split_once(':')
        .ok_or_else(|| Error::Config(format!("span {span:?} is not a:b")))?;
    let a: usize = a.trim().parse().map_err(|_| Error::Config(format!("bad span start {a:?}")))?;
    let b: usize = b.trim().parse().map_err(|_| Error::Config(format!("bad span end {b:?}")))?;
    if b < a {
        bail!(Error::Config(format!("span end {b} before start {a}")));
    }
    Ok((a, b))
}

fn parse_text(text: &str, vocab: usize) -> anyhow::Result<PhonemeSequence> {
    Ok(PhonemeSequence::parse(text, vocab).with_context(|| format!("phonemes {text:?}"))?)
}

fn sampler_options(args: &SampleArgs, default_steps: usize) -> SamplerOptions {
    SamplerOptions {
        steps: args.steps.unwrap_or(default_steps),
        kind: args.sampler.into(),
        ..Default::default()
    }
}

/// Writes the spectrogram and a sidecar recording what produced it.
fn write_output(
    out: &Path,
    mel: &MelSpectrogram,
    alignment: &Alignment,
    loaded: &Loaded,
    seed: u64,
    extra: serde_json::Value,
) -> anyhow::Result<()> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    save_array2(out, &mel.values)?;
    let hashes: serde_json::Map<String, serde_json::Value> = loaded
        .checkpoints
        .iter()
        .map(|(s, c)| (s.name().to_string(), json!(c.meta.config_hash)))
        .collect();
    let sidecar = json!({
        "frames": mel.frames(),
        "bins": mel.bins(),
        "frame_hop_s": mel.frame_hop_s,
        "durations": alignment.durations,
        "seed": seed,
        "config_hashes": hashes,
        "details": extra,
    });
    std::fs::write(out.with_extension("json"), serde_json::to_string_pretty(&sidecar)?)?;
    println!("{}", serde_json::to_string(&json!({"out": out, "frames": mel.frames(), "durations": alignment.durations}))?);
    Ok(())
}

fn train(pipeline: &Pipeline, stage: Stage) -> anyhow::Result<()> {
    let ck = pipeline.run_stage(stage)?;
    println!(
        "{}",
        json!({"stage": stage.name(), "dir": ck.dir, "seed": ck.meta.seed, "config_hash": ck.meta.config_hash})
    );
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let config = resolve_config(&cli)?;
    let pipeline = Pipeline::new(config, cli.root.clone())?;
    let vocab = pipeline.config.data.vocab_size;
    let hop = pipeline.config.data.frame_hop_s;
    match &cli.command {
        Command::GenData => {
            std::fs::create_dir_all(&cli.root)?;
            pipeline.config.save(&cli.root.join("run.json"))?;
            train(&pipeline, Stage::Data)?;
        }
        Command::TrainAligner => train(&pipeline, Stage::Aligner)?,
        Command::TrainVae => train(&pipeline, Stage::Vae)?,
        Command::TrainGan => train(&pipeline, Stage::Gan)?,
        Command::TrainDiffusion => train(&pipeline, Stage::Diffusion)?,
        Command::Align { mel, text } => {
            let (_, data) = pipeline.load_corpus()?;
            let (aligner, _) = pipeline.load_aligner(&data)?;
            let a = aligner.align(&read_mel(mel, hop)?, &parse_text(text, vocab)?)?;
            println!("{}", json!({"spikes": a.spikes, "durations": a.durations}));
        }
        Command::Synthesize { text, out, sample } => {
            let loaded = pipeline.load_all()?;
            let w = parse_text(text, vocab)?;
            let opts = sampler_options(sample, 100);
            let mut rng = ChaCha8Rng::seed_from_u64(sample.sample_seed);
            let s = synthesize(&loaded.score, loaded.decoder(), &w, None, &opts, hop, &mut rng)?;
            let extra = json!({"verb": "synthesize", "phonemes": w.ids, "steps": opts.steps});
            write_output(out, &s.mel, &s.alignment, &loaded, sample.sample_seed, extra)?;
        }
        Command::Edit {
            mel,
            text,
            span,
            replacement,
            out,
            xi0,
            sample,
        } => {
            let loaded = pipeline.load_all()?;
            let y = read_mel(mel, hop)?;
            let w = parse_text(text, vocab)?;
            let (a, b) = parse_span(span)?;
            if b > w.len() {
                bail!(Error::Config(format!("span {a}:{b} exceeds {} phonemes", w.len())));
            }
            let replacement = if replacement.trim().is_empty() {
                Vec::new()
            } else {
                parse_text(replacement, vocab)?.ids
            };
            let spec = EditSpec {
                m_a: a,
                m_b: b - a,
                m_c: w.len() - b,
                replacement,
            };
            let opts = EditOptions {
                sampler: sampler_options(sample, 300),
                guidance: GuidanceConfig {
                    xi0: *xi0,
                    ..Default::default()
                },
            };
            let mut rng = ChaCha8Rng::seed_from_u64(sample.sample_seed);
            let r = edit(&loaded.models(), &y, &w, &spec, &opts, &mut rng)?;
            let extra = json!({"verb": "edit", "phonemes": r.phonemes, "span": [a, b], "xi0": xi0, "steps": opts.sampler.steps});
            write_output(out, &r.mel, &r.alignment, &loaded, sample.sample_seed, extra)?;
        }
        Command::Clone {
            ref_mel,
            ref_text,
            text,
            out,
            xi0,
            sample,
        } => {
            let loaded = pipeline.load_all()?;
            let y = read_mel(ref_mel, hop)?;
            let opts = EditOptions {
                sampler: sampler_options(sample, 300),
                guidance: GuidanceConfig {
                    xi0: *xi0,
                    ..Default::default()
                },
            };
            let mut rng = ChaCha8Rng::seed_from_u64(sample.sample_seed);
            let r = zero_shot(
                &loaded.models(),
                &y,
                &parse_text(ref_text, vocab)?,
                &parse_text(text, vocab)?,
                &opts,
                &mut rng,
            )?;
            let extra = json!({"verb": "clone", "prompt_frames": r.prompt_frames, "xi0": xi0, "steps": opts.sampler.steps});
            write_output(out, &r.mel, &r.alignment, &loaded, sample.sample_seed, extra)?;
        }
        Command::Evaluate {
            utterances,
            synth_samples,
            edit_trials,
            synth_steps,
            edit_steps,
        } => {
            let opts = EvalOptions {
                utterances: *utterances,
                synth_samples: *synth_samples,
                synth_steps: *synth_steps,
                edit_trials: *edit_trials,
                edit_steps: *edit_steps,
                seed: cli.seed,
            };
            let (_, path) = pipeline.evaluate(&opts)?;
            println!("{}", json!({"report": path}));
        }
        Command::Export { mel, out_dir } => {
            let e = export_audio_features(mel, out_dir)?;
            println!("{}", serde_json::to_string(&e)?);
        }
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    e.chain()
        .find_map(|c| c.downcast_ref::<Error>())
        .map(|e| e.exit_code() as u8)
        .unwrap_or(1)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
