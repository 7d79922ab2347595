//! Run configuration, stage checkpoints, evaluation and export.
//!
//! Stages form a fixed DAG, `data -> aligner -> vae -> {gan, diffusion}`.
//! Each stage reads its upstream checkpoints and writes only its own
//! directory under the checkpoint root, so retraining a stage never touches
//! upstream artifacts; downstream checkpoints record the hashes they were
//! built on and refuse to load once those change.

mod checkpoint;
mod config;
mod eval;
mod export;
mod run;

pub use checkpoint::{
    append_jsonl, read_jsonl, read_records, restore_store, write_checkpoint, write_records, Checkpoint, CheckpointMeta,
    DirLock, Stage,
};
pub use config::{config_hash, AlignerStage, DiffusionStage, RunConfig, VaeStage};
pub use eval::{
    alignment_metrics, corpus_dynamic_range, evaluate, identity_edit_trial, identity_spec, max_abs_mean_diff,
    mean_durations, median, reconstruction_mean_abs, synthesize_corpus_texts, template_correlation, warped_mean_abs,
    AdversarialMetrics, AlignmentMetrics, DurationMetrics, EditMetrics, EditTrial, EvalOptions, MetricsReport,
    ReconstructionMetrics, TemplateMetrics,
};
pub use export::{export_audio_features, heatmap, import_npy, read_npy, write_npy, ExportedFeatures};
pub use run::{align_corpus, diffusion_examples, pairs, read_losses, GanSnapshot, Loaded, Pipeline, StageEvent};
