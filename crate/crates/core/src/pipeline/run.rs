use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checkpoint::{append_jsonl, now_unix_ms, restore_store, write_checkpoint, Checkpoint, DirLock, Stage};
use super::config::{AlignerStage, DiffusionStage, RunConfig, VaeStage};
use crate::adversarial::{AdvMetrics, AdvModel, AdvTrainConfig, AdvTrainer};
use crate::aligner::{train_aligner, AlignerModel, Alignment};
use crate::autoencoder::{train_vae, VaeConfig, VaeModel};
use crate::data::{gen_corpus, load_corpus, save_corpus, MelSpectrogram, SynthCorpus};
use crate::diffusion::{train_diffusion, DiffusionExample, LatentDecoder, ScoreModel};
use crate::error::{Error, Result};
use crate::inverse::Models;

/// Snapshot stored with the adversarial checkpoint: the autoencoder shape it
/// was built on plus its own training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GanSnapshot {
    pub vae: VaeConfig,
    pub gan: AdvTrainConfig,
}

/// Record appended to `metrics.jsonl` when a stage finishes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEvent {
    pub event: String,
    pub stage: Stage,
    pub unix_ms: u128,
    pub seed: u64,
    pub config_hash: String,
    pub steps: usize,
    pub final_loss: Option<f64>,
}

/// Every trained model of a run, loaded and cross-checked.
pub struct Loaded {
    pub corpus: SynthCorpus,
    pub aligner: AlignerModel,
    pub vae: VaeModel,
    pub gan: Option<AdvModel>,
    pub score: ScoreModel,
    pub checkpoints: BTreeMap<Stage, Checkpoint>,
}

impl Loaded {
    /// Decodes through the refiner when the adversarial stage has run.
    pub fn decoder(&self) -> &dyn LatentDecoder {
        match &self.gan {
            Some(g) => g,
            None => &self.vae,
        }
    }

    pub fn models(&self) -> Models<'_> {
        Models {
            aligner: &self.aligner,
            vae: &self.vae,
            score: &self.score,
            decoder: self.decoder(),
        }
    }
}

/// A run: one configuration bound to one checkpoint root.
pub struct Pipeline {
    pub config: RunConfig,
    pub root: PathBuf,
}

fn losses_csv(losses: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(s, "{i},{l:?}");
    }
    s
}

impl Pipeline {
    pub fn new(config: RunConfig, root: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            root: root.into(),
        })
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.root.join(stage.name())
    }

    pub fn metrics_log(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }

    fn open(&self, stage: Stage) -> Result<Checkpoint> {
        Checkpoint::open(&self.stage_dir(stage), stage)
    }

    /// Fails with the first missing prerequisite of `stage`.
    pub fn check_prerequisites(&self, stage: Stage) -> Result<()> {
        for p in stage.prerequisites() {
            self.open(*p)?;
        }
        Ok(())
    }

    /// Trains `stage` from its upstream checkpoints and writes its own.
    pub fn run_stage(&self, stage: Stage) -> Result<Checkpoint> {
        self.check_prerequisites(stage)?;
        let _lock = DirLock::acquire(&self.root)?;
        let (ck, steps, final_loss) = match stage {
            Stage::Data => (self.run_data()?, 0, None),
            Stage::Aligner => self.run_aligner()?,
            Stage::Vae => self.run_vae()?,
            Stage::Gan => self.run_gan()?,
            Stage::Diffusion => self.run_diffusion()?,
        };
        append_jsonl(
            &self.metrics_log(),
            &StageEvent {
                event: "stage".into(),
                stage,
                unix_ms: now_unix_ms(),
                seed: ck.meta.seed,
                config_hash: ck.meta.config_hash.clone(),
                steps,
                final_loss,
            },
        )?;
        Ok(ck)
    }

    /// All five stages in order.
    pub fn run_all(&self) -> Result<Vec<Checkpoint>> {
        Stage::ALL.into_iter().map(|s| self.run_stage(s)).collect()
    }

    fn run_data(&self) -> Result<Checkpoint> {
        let corpus = gen_corpus(&self.config.data)?;
        let dir = self.stage_dir(Stage::Data);
        let ck = write_checkpoint(
            &dir,
            Stage::Data,
            &self.config.data,
            &[],
            "",
            &corpus.fingerprint(),
            self.config.data.seed,
            BTreeMap::new(),
        )?;
        save_corpus(&corpus, &dir.join("corpus"))?;
        Ok(ck)
    }

    fn finish(
        &self,
        stage: Stage,
        config: &impl Serialize,
        stores: &[(&str, &crate::nn::ParamStore)],
        metrics: String,
        fingerprint: &str,
        seed: u64,
        upstream: &[&Checkpoint],
    ) -> Result<Checkpoint> {
        let upstream = upstream
            .iter()
            .map(|c| (c.meta.stage, c.meta.weights_sha256.clone()))
            .collect();
        write_checkpoint(&self.stage_dir(stage), stage, config, stores, &metrics, fingerprint, seed, upstream)
    }

    fn run_aligner(&self) -> Result<(Checkpoint, usize, Option<f64>)> {
        let (corpus, data_ck) = self.load_corpus()?;
        let stage = &self.config.aligner;
        let (model, report) = train_aligner(&corpus, stage.model.clone(), &stage.train)?;
        let ck = self.finish(
            Stage::Aligner,
            stage,
            &[("aligner", &model.params)],
            losses_csv(&report.losses),
            &data_ck.meta.corpus_fingerprint,
            stage.train.seed,
            &[&data_ck],
        )?;
        Ok((ck, report.losses.len(), report.losses.last().copied()))
    }

    fn run_vae(&self) -> Result<(Checkpoint, usize, Option<f64>)> {
        let (corpus, data_ck) = self.load_corpus()?;
        let (aligner, al_ck) = self.load_aligner(&data_ck)?;
        let alignments = align_corpus(&aligner, &corpus)?;
        let data = pairs(&corpus, &alignments);
        let stage = &self.config.vae;
        let (model, report) = train_vae(&data, stage.model.clone(), &stage.train)?;
        let ck = self.finish(
            Stage::Vae,
            stage,
            &[("vae", &model.params)],
            losses_csv(&report.losses),
            &data_ck.meta.corpus_fingerprint,
            stage.train.seed,
            &[&data_ck, &al_ck],
        )?;
        Ok((ck, report.losses.len(), report.losses.last().copied()))
    }

    fn run_gan(&self) -> Result<(Checkpoint, usize, Option<f64>)> {
        let (corpus, data_ck) = self.load_corpus()?;
        let (aligner, al_ck) = self.load_aligner(&data_ck)?;
        let (vae, vae_ck) = self.load_vae(&data_ck, &al_ck)?;
        let alignments = align_corpus(&aligner, &corpus)?;
        let data = pairs(&corpus, &alignments);
        let snapshot = GanSnapshot {
            vae: vae.config.clone(),
            gan: self.config.gan.clone(),
        };
        let model = AdvModel::new(vae, snapshot.gan.seed)?;
        let mut trainer = AdvTrainer::new(model, snapshot.gan.clone())?;
        let rows = trainer.train(&data)?;
        let model = trainer.into_model();
        let mut csv = Vec::new();
        AdvMetrics::write_csv(&rows, &mut csv)?;
        let csv = String::from_utf8(csv).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let ck = self.finish(
            Stage::Gan,
            &snapshot,
            &[("vae", &model.vae.params), ("adv", &model.params)],
            csv,
            &data_ck.meta.corpus_fingerprint,
            snapshot.gan.seed,
            &[&data_ck, &al_ck, &vae_ck],
        )?;
        let last = rows.last().map(|r| r.l_d + r.l_g);
        Ok((ck, rows.len(), last))
    }

    fn run_diffusion(&self) -> Result<(Checkpoint, usize, Option<f64>)> {
        let (corpus, data_ck) = self.load_corpus()?;
        let (aligner, al_ck) = self.load_aligner(&data_ck)?;
        let (vae, vae_ck) = self.load_vae(&data_ck, &al_ck)?;
        let frozen = vae.params.fingerprint("")?;
        let alignments = align_corpus(&aligner, &corpus)?;
        let mut stage = self.config.diffusion.clone();
        if stage.refit_codec {
            let all: Vec<usize> = alignments.iter().flat_map(|a| a.durations.iter().copied()).collect();
            stage.model.codec = stage.model.codec.refit_c1(&all)?;
        }
        let examples = diffusion_examples(&vae, &corpus, &alignments)?;
        let (model, report) = train_diffusion(&examples, stage.model.clone(), &stage.train)?;
        if vae.params.fingerprint("")? != frozen {
            return Err(Error::Checkpoint("autoencoder weights changed during diffusion training".into()));
        }
        let ck = self.finish(
            Stage::Diffusion,
            &stage,
            &[("score", &model.params)],
            losses_csv(&report.losses),
            &data_ck.meta.corpus_fingerprint,
            stage.train.seed,
            &[&data_ck, &al_ck, &vae_ck],
        )?;
        Ok((ck, report.losses.len(), report.losses.last().copied()))
    }

    pub fn load_corpus(&self) -> Result<(SynthCorpus, Checkpoint)> {
        let ck = self.open(Stage::Data)?;
        let corpus = load_corpus(&ck.dir.join("corpus"))?;
        ck.require_corpus(&corpus.fingerprint())?;
        Ok((corpus, ck))
    }

    pub fn load_aligner(&self, data: &Checkpoint) -> Result<(AlignerModel, Checkpoint)> {
        let ck = self.open(Stage::Aligner)?;
        ck.require_corpus(&data.meta.corpus_fingerprint)?;
        let stage: AlignerStage = ck.config()?;
        let model = AlignerModel::new(stage.model, stage.train.seed)?;
        restore_store(&ck.weights()?, "aligner", &model.params)?;
        Ok((model, ck))
    }

    pub fn load_vae(&self, data: &Checkpoint, aligner: &Checkpoint) -> Result<(VaeModel, Checkpoint)> {
        let ck = self.open(Stage::Vae)?;
        ck.require_corpus(&data.meta.corpus_fingerprint)?;
        ck.require_upstream(aligner)?;
        let stage: VaeStage = ck.config()?;
        let model = VaeModel::new(stage.model, stage.train.seed)?;
        restore_store(&ck.weights()?, "vae", &model.params)?;
        Ok((model, ck))
    }

    /// `None` when the adversarial stage has not run.
    pub fn load_gan(&self, data: &Checkpoint, vae: &Checkpoint) -> Result<Option<(AdvModel, Checkpoint)>> {
        let ck = match self.open(Stage::Gan) {
            Ok(ck) => ck,
            Err(Error::MissingPrerequisite(_)) => return Ok(None),
            Err(e) => return Err(e),
        };
        ck.require_corpus(&data.meta.corpus_fingerprint)?;
        ck.require_upstream(vae)?;
        let snap: GanSnapshot = ck.config()?;
        let records = ck.weights()?;
        let base = VaeModel::new(snap.vae, 0)?;
        restore_store(&records, "vae", &base.params)?;
        let model = AdvModel::new(base, snap.gan.seed)?;
        restore_store(&records, "adv", &model.params)?;
        model.warm_up()?;
        Ok(Some((model, ck)))
    }

    pub fn load_score(&self, data: &Checkpoint, vae: &Checkpoint) -> Result<(ScoreModel, Checkpoint)> {
        let ck = self.open(Stage::Diffusion)?;
        ck.require_corpus(&data.meta.corpus_fingerprint)?;
        ck.require_upstream(vae)?;
        let stage: DiffusionStage = ck.config()?;
        let model = ScoreModel::new(stage.model, stage.train.seed)?;
        restore_store(&ck.weights()?, "score", &model.params)?;
        Ok((model, ck))
    }

    /// Loads every stage needed for generation. The adversarial stage is optional.
    pub fn load_all(&self) -> Result<Loaded> {
        self.check_prerequisites(Stage::Diffusion)?;
        let (corpus, data_ck) = self.load_corpus()?;
        let (aligner, al_ck) = self.load_aligner(&data_ck)?;
        let (vae, vae_ck) = self.load_vae(&data_ck, &al_ck)?;
        let gan = self.load_gan(&data_ck, &vae_ck)?;
        let (score, score_ck) = self.load_score(&data_ck, &vae_ck)?;
        let mut checkpoints = BTreeMap::new();
        let gan = gan.map(|(g, ck)| {
            checkpoints.insert(Stage::Gan, ck);
            g
        });
        checkpoints.insert(Stage::Data, data_ck);
        checkpoints.insert(Stage::Aligner, al_ck);
        checkpoints.insert(Stage::Vae, vae_ck);
        checkpoints.insert(Stage::Diffusion, score_ck);
        Ok(Loaded {
            corpus,
            aligner,
            vae,
            gan,
            score,
            checkpoints,
        })
    }
}

/// Forced alignment of every corpus item.
pub fn align_corpus(aligner: &AlignerModel, corpus: &SynthCorpus) -> Result<Vec<Alignment>> {
    corpus
        .items
        .iter()
        .map(|it| aligner.align(&it.mel, &it.phonemes))
        .collect()
}

pub fn pairs<'a>(corpus: &'a SynthCorpus, alignments: &'a [Alignment]) -> Vec<(&'a MelSpectrogram, &'a Alignment)> {
    corpus.items.iter().zip(alignments).map(|(it, a)| (&it.mel, a)).collect()
}

pub fn diffusion_examples(vae: &VaeModel, corpus: &SynthCorpus, alignments: &[Alignment]) -> Result<Vec<DiffusionExample>> {
    corpus
        .items
        .iter()
        .zip(alignments)
        .map(|(it, a)| DiffusionExample::from_vae(vae, &it.mel, &it.phonemes.ids, a, it.speaker))
        .collect()
}

/// Last column of each `metrics.csv` row: the loss for single-loss stages,
/// the ELBO term for the adversarial stage.
pub fn read_losses(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.rsplit(',')
                .next()
                .and_then(|v| v.parse::<f64>().ok())
                .ok_or_else(|| Error::Checkpoint(format!("bad metrics row {l:?}")))
        })
        .collect()
}
