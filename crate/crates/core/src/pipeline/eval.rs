use std::collections::BTreeMap;
use std::path::PathBuf;

use ndarray::{Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{append_jsonl, now_unix_ms, Stage};
use super::run::{align_corpus, Loaded, Pipeline};
use crate::adversarial::AdvModel;
use crate::aligner::{spike_accuracy, AlignerModel, Alignment};
use crate::autoencoder::{LatentCode, VaeModel};
use crate::data::{MelSpectrogram, PhonemeSequence, SynthCorpus, TemplateTable};
use crate::diffusion::{synthesize, LatentDecoder, SamplerKind, SamplerOptions, ScoreModel};
use crate::error::{Error, Result};
use crate::inverse::{edit, EditOptions, EditSpec, Models};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Corpus items used for alignment and reconstruction; `None` uses all.
    pub utterances: Option<usize>,
    pub synth_samples: usize,
    pub synth_steps: usize,
    pub edit_trials: usize,
    pub edit_steps: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            utterances: None,
            synth_samples: 200,
            synth_steps: 100,
            edit_trials: 10,
            edit_steps: 300,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignmentMetrics {
    pub utterances: usize,
    /// Spikes within one frame of the reference.
    pub within_one_frame: f64,
    pub exact: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconstructionMetrics {
    pub utterances: usize,
    /// Mean `|y - decode(mu)|` over all cells.
    pub vae_mean_abs: f64,
    /// Same through the refiner, when present.
    pub refined_mean_abs: Option<f64>,
    pub corpus_dynamic_range: f64,
    /// `vae_mean_abs / corpus_dynamic_range`.
    pub vae_relative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DurationMetrics {
    pub samples: usize,
    pub corpus_means: Vec<Option<f64>>,
    pub synthesized_means: Vec<Option<f64>>,
    /// Largest `|synthesized - corpus|` over phonemes seen in both.
    pub max_abs_mean_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateMetrics {
    pub samples: usize,
    pub median: f64,
    pub mean: f64,
    pub min: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditMetrics {
    pub trials: usize,
    /// Alignment-aware mean `|edited - reconstruction|` for identity edits.
    pub identity_mean_abs: f64,
    /// `identity_mean_abs / corpus_dynamic_range`.
    pub identity_relative: f64,
    /// Median of `|x0 - o| / sigma` over every kept cell.
    pub median_kept_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdversarialMetrics {
    pub mean_residual_norm: f64,
    pub discriminator_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub unix_ms: u128,
    pub seed: u64,
    pub options: EvalOptions,
    /// `config_hash` of every checkpoint evaluated.
    pub config_hashes: BTreeMap<Stage, String>,
    pub alignment: AlignmentMetrics,
    pub reconstruction: ReconstructionMetrics,
    pub durations: DurationMetrics,
    pub template_correlation: TemplateMetrics,
    pub edit: EditMetrics,
    pub adversarial: Option<AdversarialMetrics>,
}

impl MetricsReport {
    /// Strict parse: unknown or missing fields are errors.
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Max minus min over every cell of every item.
pub fn corpus_dynamic_range(corpus: &SynthCorpus) -> f64 {
    let (lo, hi) = corpus
        .items
        .iter()
        .flat_map(|it| it.mel.values.iter())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    hi - lo
}

pub fn alignment_metrics(aligner: &AlignerModel, corpus: &SynthCorpus) -> Result<AlignmentMetrics> {
    let pred = align_corpus(aligner, corpus)?;
    let truth: Vec<Alignment> = corpus.items.iter().map(|it| it.true_alignment.clone()).collect();
    Ok(AlignmentMetrics {
        utterances: pred.len(),
        within_one_frame: spike_accuracy(&pred, &truth, 1),
        exact: spike_accuracy(&pred, &truth, 0),
    })
}

/// Mean `|y - decoder(mu)|` over all cells, with `mu` from the VAE encoder.
pub fn reconstruction_mean_abs(
    vae: &VaeModel,
    decoder: &dyn LatentDecoder,
    data: &[(&MelSpectrogram, &Alignment)],
) -> Result<f64> {
    let mut total = 0.0;
    let mut cells = 0usize;
    for (mel, a) in data {
        let p = vae.encode(mel, a)?;
        let y = decoder.decode_latent(&LatentCode { z0: p.mu }, a, mel.frames())?;
        total += (&mel.values - &y.values).mapv(f64::abs).sum();
        cells += mel.values.len();
    }
    Ok(total / cells.max(1) as f64)
}

/// Per-phoneme mean duration over a set of `(phonemes, alignment)` pairs.
pub fn mean_durations(vocab_size: usize, items: &[(&[usize], &Alignment)]) -> Vec<Option<f64>> {
    let mut sum = vec![0.0; vocab_size];
    let mut count = vec![0usize; vocab_size];
    for (ids, a) in items {
        for (id, d) in ids.iter().zip(&a.durations) {
            sum[*id] += *d as f64;
            count[*id] += 1;
        }
    }
    sum.iter()
        .zip(&count)
        .map(|(s, c)| (*c > 0).then(|| s / *c as f64))
        .collect()
}

pub fn max_abs_mean_diff(a: &[Option<f64>], b: &[Option<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .filter_map(|(x, y)| Some((x.as_ref()? - y.as_ref()?).abs()))
        .fold(0.0, f64::max)
}

fn pearson(x: ArrayView1<'_, f64>, y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let mx = x.sum() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// Mean over frames of the Pearson correlation between each frame and the
/// template of the phoneme its segment belongs to, for one speaker.
pub fn template_correlation(
    mel: &MelSpectrogram,
    alignment: &Alignment,
    phonemes: &[usize],
    templates: &TemplateTable,
    speaker: usize,
) -> Result<f64> {
    if phonemes.len() != alignment.len() {
        return Err(Error::Shape(format!(
            "{} phonemes for {} segments",
            phonemes.len(),
            alignment.len()
        )));
    }
    if alignment.total_frames() > mel.frames() {
        return Err(Error::AlignmentExceedsFrames {
            last_spike: alignment.total_frames(),
            frames: mel.frames(),
        });
    }
    let mut total = 0.0;
    let mut frame = 0;
    for (id, d) in phonemes.iter().zip(&alignment.durations) {
        let tpl = templates.get(speaker, *id);
        for _ in 0..*d {
            total += pearson(mel.values.row(frame), tpl);
            frame += 1;
        }
    }
    Ok(total / frame.max(1) as f64)
}

/// Mean `|reference - edited|` with each reference segment compared to the
/// same phoneme's edited segment, resampled by nearest index.
pub fn warped_mean_abs(
    edited: &Array2<f64>,
    edited_alignment: &Alignment,
    reference: &Array2<f64>,
    reference_alignment: &Alignment,
) -> Result<f64> {
    if edited_alignment.len() != reference_alignment.len() || edited.ncols() != reference.ncols() {
        return Err(Error::Shape("edited and reference layouts differ".into()));
    }
    let mut total = 0.0;
    let mut cells = 0usize;
    let (mut se, mut sr) = (0usize, 0usize);
    for (de, dr) in edited_alignment.durations.iter().zip(&reference_alignment.durations) {
        for j in 0..*dr {
            let e = edited.row(se + j * de / dr);
            let r = reference.row(sr + j);
            total += e.iter().zip(r.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>();
            cells += r.len();
        }
        se += de;
        sr += dr;
    }
    Ok(total / cells.max(1) as f64)
}

/// Identity edit: the middle third of `w` is regenerated with the same text.
pub fn identity_spec(m: usize) -> Result<EditSpec> {
    if m == 0 {
        return Err(Error::NothingToGenerate);
    }
    let m_b = (m / 3).max(1);
    let m_a = (m - m_b) / 2;
    Ok(EditSpec {
        m_a,
        m_b,
        m_c: m - m_a - m_b,
        replacement: Vec::new(),
    })
}

pub struct EditTrial {
    pub identity_mean_abs: f64,
    pub kept_residuals: Vec<f64>,
}

/// Runs one identity edit of `(mel, w)` and compares it to the VAE
/// reconstruction of the source.
pub fn identity_edit_trial(
    models: &Models<'_>,
    mel: &MelSpectrogram,
    w: &PhonemeSequence,
    opts: &EditOptions,
    rng: &mut ChaCha8Rng,
) -> Result<EditTrial> {
    let mut spec = identity_spec(w.len())?;
    spec.replacement = w.ids[spec.m_a..spec.m_a + spec.m_b].to_vec();
    let out = edit(models, mel, w, &spec, opts, rng)?;
    let p = models.vae.encode(mel, &out.source_alignment)?;
    let recon = models
        .decoder
        .decode_latent(&LatentCode { z0: p.mu }, &out.source_alignment, mel.frames())?;
    Ok(EditTrial {
        identity_mean_abs: warped_mean_abs(&out.mel.values, &out.alignment, &recon.values, &out.source_alignment)?,
        kept_residuals: out.kept_residuals()?.iter().copied().collect(),
    })
}

fn adversarial_metrics(gan: &AdvModel, data: &[(&MelSpectrogram, &Alignment)], seed: u64) -> Result<AdversarialMetrics> {
    let mut norm = 0.0;
    for (mel, a) in data {
        norm += gan.residual_norm(mel, a)?;
    }
    Ok(AdversarialMetrics {
        mean_residual_norm: norm / data.len().max(1) as f64,
        discriminator_accuracy: gan.discriminator_accuracy(data, seed)?,
    })
}

/// Text-only samples for the first `n` corpus texts (cycling).
pub fn synthesize_corpus_texts(
    score: &ScoreModel,
    decoder: &dyn LatentDecoder,
    corpus: &SynthCorpus,
    n: usize,
    opts: &SamplerOptions,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(PhonemeSequence, crate::diffusion::Synthesis)>> {
    if corpus.items.is_empty() {
        return Err(Error::Config("empty corpus".into()));
    }
    (0..n)
        .map(|i| {
            let w = corpus.items[i % corpus.items.len()].phonemes.clone();
            let s = synthesize(score, decoder, &w, None, opts, corpus.config.frame_hop_s, rng)?;
            Ok((w, s))
        })
        .collect()
}

/// Computes every metric family for a loaded run.
pub fn evaluate(loaded: &Loaded, opts: &EvalOptions) -> Result<MetricsReport> {
    let corpus = &loaded.corpus;
    let subset = SynthCorpus {
        items: corpus.items[..opts.utterances.unwrap_or(corpus.items.len()).min(corpus.items.len())].to_vec(),
        ..corpus.clone()
    };
    let range = corpus_dynamic_range(corpus);
    let alignment = alignment_metrics(&loaded.aligner, &subset)?;
    let alignments = align_corpus(&loaded.aligner, &subset)?;
    let data = super::run::pairs(&subset, &alignments);
    let vae_mean_abs = reconstruction_mean_abs(&loaded.vae, &loaded.vae, &data)?;
    let refined_mean_abs = match &loaded.gan {
        Some(g) => Some(reconstruction_mean_abs(&loaded.vae, g, &data)?),
        None => None,
    };
    let reconstruction = ReconstructionMetrics {
        utterances: data.len(),
        vae_mean_abs,
        refined_mean_abs,
        corpus_dynamic_range: range,
        vae_relative: vae_mean_abs / range,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let sampler = SamplerOptions {
        steps: opts.synth_steps,
        kind: SamplerKind::Em,
        ..Default::default()
    };
    let samples = synthesize_corpus_texts(&loaded.score, loaded.decoder(), corpus, opts.synth_samples, &sampler, &mut rng)?;
    let synth_pairs: Vec<(&[usize], &Alignment)> = samples.iter().map(|(w, s)| (w.ids.as_slice(), &s.alignment)).collect();
    let synthesized_means = mean_durations(corpus.config.vocab_size, &synth_pairs);
    let corpus_means = corpus.mean_durations();
    let durations = DurationMetrics {
        samples: samples.len(),
        max_abs_mean_diff: max_abs_mean_diff(&corpus_means, &synthesized_means),
        corpus_means,
        synthesized_means,
    };
    let mut corr = Vec::with_capacity(samples.len());
    for (w, s) in &samples {
        let best = (0..corpus.templates.num_speakers)
            .map(|spk| template_correlation(&s.mel, &s.alignment, &w.ids, &corpus.templates, spk))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max);
        corr.push(best);
    }
    let template_correlation = TemplateMetrics {
        samples: corr.len(),
        median: median(&corr),
        mean: corr.iter().sum::<f64>() / corr.len().max(1) as f64,
        min: corr.iter().copied().fold(f64::INFINITY, f64::min),
    };

    let edit_opts = EditOptions {
        sampler: SamplerOptions {
            steps: opts.edit_steps,
            ..Default::default()
        },
        ..Default::default()
    };
    let models = loaded.models();
    let mut abs = Vec::new();
    let mut kept = Vec::new();
    for it in corpus.items.iter().take(opts.edit_trials) {
        let trial = identity_edit_trial(&models, &it.mel, &it.phonemes, &edit_opts, &mut rng)?;
        abs.push(trial.identity_mean_abs);
        kept.extend(trial.kept_residuals);
    }
    let identity_mean_abs = abs.iter().sum::<f64>() / abs.len().max(1) as f64;
    let edit = EditMetrics {
        trials: abs.len(),
        identity_mean_abs,
        identity_relative: identity_mean_abs / range,
        median_kept_residual: median(&kept),
    };
    let adversarial = match &loaded.gan {
        Some(g) => Some(adversarial_metrics(g, &data, opts.seed)?),
        None => None,
    };
    Ok(MetricsReport {
        unix_ms: now_unix_ms(),
        seed: opts.seed,
        options: *opts,
        config_hashes: loaded
            .checkpoints
            .iter()
            .map(|(s, c)| (*s, c.meta.config_hash.clone()))
            .collect(),
        alignment,
        reconstruction,
        durations,
        template_correlation,
        edit,
        adversarial,
    })
}

impl Pipeline {
    /// Evaluates the run, writes `reports/eval-{unix_ms}.json` and appends
    /// the report to `metrics.jsonl`.
    pub fn evaluate(&self, opts: &EvalOptions) -> Result<(MetricsReport, PathBuf)> {
        let loaded = self.load_all()?;
        let report = evaluate(&loaded, opts)?;
        let dir = self.root.join("reports");
        std::fs::create_dir_all(&dir)?;
        let path = dir.join(format!("eval-{}.json", report.unix_ms));
        std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
        append_jsonl(
            &self.metrics_log(),
            &serde_json::json!({"event": "evaluate", "report": &report}),
        )?;
        Ok((report, path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_corpus, SynthCorpusConfig};

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn ground_truth_frames_correlate_perfectly_with_templates() {
        let corpus = gen_corpus(&SynthCorpusConfig {
            num_utterances: 3,
            noise_std: 0.0,
            num_speakers: 2,
            ..Default::default()
        })
        .unwrap();
        for it in &corpus.items {
            let own = template_correlation(&it.mel, &it.true_alignment, &it.phonemes.ids, &corpus.templates, it.speaker).unwrap();
            let other = template_correlation(&it.mel, &it.true_alignment, &it.phonemes.ids, &corpus.templates, 1 - it.speaker).unwrap();
            assert!((own - 1.0).abs() < 1e-12, "{own}");
            assert!(other < own);
        }
    }

    #[test]
    fn warped_comparison_is_zero_for_a_stretched_copy() {
        // Reference segments of 2 and 3 frames, edited copy stretched to 4 and 6.
        let reference = ndarray::array![[1.0], [1.0], [5.0], [5.0], [5.0]];
        let edited = ndarray::array![[1.0], [1.0], [1.0], [1.0], [5.0], [5.0], [5.0], [5.0], [5.0], [5.0]];
        let ra = Alignment::from_durations(&[2, 3]).unwrap();
        let ea = Alignment::from_durations(&[4, 6]).unwrap();
        assert_eq!(warped_mean_abs(&edited, &ea, &reference, &ra).unwrap(), 0.0);
        let shifted = edited.mapv(|v| v + 0.5);
        assert!((warped_mean_abs(&shifted, &ea, &reference, &ra).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn identity_spec_covers_sequence() {
        for m in 1..12 {
            let s = identity_spec(m).unwrap();
            assert_eq!(s.m_a + s.m_b + s.m_c, m);
            assert!(s.m_b >= 1);
        }
        assert!(identity_spec(0).is_err());
    }

    #[test]
    fn mean_duration_diff_ignores_unseen_phonemes() {
        let a = [Some(2.0), None, Some(4.0)];
        let b = [Some(2.5), Some(9.0), Some(3.0)];
        assert_eq!(max_abs_mean_diff(&a, &b), 1.0);
    }
}
