//! End-to-end stages driven by a [`RunConfig`]: data generation,
//! pretraining and evaluation.

use std::path::Path;

use crate::config::RunConfig;
use crate::corpus::{build_vocab, generate, GeneratedData};
use crate::dataset::Dataset;
use crate::encoders::Model;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalContext, EvalReport};
use crate::objectives::AlignKind;
use crate::rng::derived;
use crate::tensor::ParamStore;
use crate::trainer::{pretrain, ArtifactKind, Checkpoint, PretrainOptions, PretrainOutcome, TrainData, TrainSetup};

/// Synthetic graph, corpora and evaluation mentions for the configured
/// generator and seed.
pub fn generate_data(cfg: &RunConfig) -> Result<GeneratedData> {
    generate(&cfg.data.generator, &mut derived(cfg.seed, "data"))
}

/// Vocabulary, encoded corpus and a validated model for `data`.
pub fn prepare(cfg: &RunConfig, data: &Dataset) -> Result<(TrainData, TrainSetup)> {
    let vocab = build_vocab(&data.train, &data.kg, cfg.data.min_freq)?;
    let classifier = cfg.objective.align == AlignKind::Classification;
    let model = Model::new(cfg.model.clone(), vocab.len(), data.kg.num_relations(), classifier)?;
    let setup = TrainSetup::new(model, cfg.objective.clone(), cfg.trainer.clone())?;
    let train = TrainData::new(data.kg.clone(), vocab, data.train.clone(), cfg.model.max_len)?;
    Ok((train, setup))
}

/// Pretrains into `out_dir`, recording the configuration in every
/// checkpoint.
pub fn run_pretrain(
    cfg: &RunConfig,
    data: &Dataset,
    out_dir: &Path,
    resume: bool,
    stop_after: Option<usize>,
) -> Result<PretrainOutcome> {
    let (train, setup) = prepare(cfg, data)?;
    let opts = PretrainOptions {
        out_dir: out_dir.to_path_buf(),
        seed: cfg.seed,
        resume,
        stop_after,
        config: serde_json::to_value(cfg)?,
        config_hash: cfg.hash(),
    };
    pretrain(&setup, &train, &opts)
}

/// Freshly initialized parameters packaged like a trained checkpoint, for
/// random-init baselines.
pub fn untrained_checkpoint(cfg: &RunConfig, data: &Dataset) -> Result<Checkpoint> {
    let (train, setup) = prepare(cfg, data)?;
    let params: ParamStore = setup.model.init_params(&mut derived(cfg.seed, "init"));
    Ok(Checkpoint {
        kind: ArtifactKind::Full,
        step: 0,
        model: setup.model,
        config: serde_json::to_value(cfg)?,
        config_hash: cfg.hash(),
        vocab: train.vocab,
        params,
        optimizer: None,
        rng: None,
    })
}

/// All evaluation metrics for `ckpt` on `data`. The checkpoint's own
/// vocabulary and model settings take precedence over `cfg`.
pub fn evaluate_checkpoint(
    cfg: &RunConfig,
    ckpt: &Checkpoint,
    checkpoint_id: &str,
    data: &Dataset,
) -> Result<EvalReport> {
    if data.kg.num_relations() != ckpt.model.num_relations && ckpt.kind == ArtifactKind::Full {
        return Err(Error::Checkpoint(format!(
            "checkpoint was trained on {} relations but the graph has {}",
            ckpt.model.num_relations,
            data.kg.num_relations()
        )));
    }
    let ctx = EvalContext {
        model: &ckpt.model,
        params: &ckpt.params,
        vocab: &ckpt.vocab,
        data,
        has_graph: ckpt.kind == ArtifactKind::Full,
        neighbor_cap: cfg.trainer.neighbor_cap,
        select_ratio: cfg.objective.select_ratio,
    };
    let records = evaluate(&ctx, &cfg.eval, cfg.seed)?;
    Ok(EvalReport {
        config_hash: ckpt.config_hash.clone(),
        checkpoint_id: checkpoint_id.to_string(),
        seed: cfg.seed,
        records,
    })
}
