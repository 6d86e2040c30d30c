//! Batch assembly, the optimizer and schedule, the pretraining loop,
//! checkpoints and the LM-only export.

mod batch;
mod checkpoint;
mod optim;

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::balanced_sample_indices;
use crate::encoders::{pool_entity, Model};
use crate::error::{Error, Result};
use crate::objectives::{
    classification_align_loss, infonce_align_loss, mlm_loss, ms_align_loss, AlignKind, ObjectiveConfig,
};
use crate::rng::{derived, RngState, SeededRng};
use crate::tensor::{Binder, Matrix, ParamStore, Tape, Var};

pub use batch::{anchorable_concepts, assemble_batch, Anchor, EncodedExample, TrainData, TrainingBatch, TrainingItem};
pub use checkpoint::{checkpoint_id, export_lm, sha256_hex, ArtifactKind, Checkpoint, FORMAT_VERSION, MAGIC};
pub use optim::{decays, group_lr, lr_at, AdamHyper, AdamW};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const FINAL_CHECKPOINT: &str = "model.ckpt";
pub const DIAGNOSTICS_FILE: &str = "nonfinite.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    /// Passes over the balanced sample; caps `steps` when non-zero.
    pub epochs: usize,
    pub lr_lm: f64,
    pub lr_other: f64,
    pub weight_decay: f64,
    pub neighbor_cap: usize,
    pub per_concept_cap: usize,
    /// Steps between resumable checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            steps: 2000,
            epochs: 0,
            lr_lm: 2e-3,
            lr_other: 2e-3,
            weight_decay: 0.01,
            neighbor_cap: 3,
            per_concept_cap: 10,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.steps == 0 {
            return bad("steps must be at least 1");
        }
        if !(self.lr_lm > 0.0 && self.lr_other > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative");
        }
        if self.neighbor_cap == 0 || self.per_concept_cap == 0 {
            return bad("neighbor_cap and per_concept_cap must be at least 1");
        }
        Ok(())
    }

    /// Optimizer steps for a balanced sample of `pool_len` sentences.
    pub fn total_steps(&self, pool_len: usize) -> usize {
        if self.epochs == 0 {
            return self.steps;
        }
        let per_epoch = pool_len.div_ceil(self.batch_size).max(1);
        self.steps.min(self.epochs * per_epoch)
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            weight_decay: self.weight_decay,
            ..AdamHyper::default()
        }
    }
}

/// Model, objective and trainer settings checked for mutual consistency.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSetup {
    pub model: Model,
    pub objective: ObjectiveConfig,
    pub train: TrainConfig,
}

impl TrainSetup {
    pub fn new(model: Model, objective: ObjectiveConfig, train: TrainConfig) -> Result<Self> {
        objective.validate()?;
        train.validate()?;
        if objective.mlm_weight == 0.0 && !objective.aligns() {
            return Err(Error::Config("both loss terms are disabled".into()));
        }
        if objective.align == AlignKind::Classification {
            if !model.classifier {
                return Err(Error::Config("classification alignment needs the classifier head".into()));
            }
            if train.batch_size < 2 {
                return Err(Error::Config("classification alignment needs batch_size ≥ 2".into()));
            }
        }
        Ok(Self {
            model,
            objective,
            train,
        })
    }
}

/// Parameters, optimizer moments, step counter and the batch sampler's
/// random stream: everything a resumed run needs.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub params: ParamStore,
    pub optimizer: AdamW,
    pub step: usize,
    pub rng: SeededRng,
}

impl ModelState {
    pub fn init(model: &Model, seed: u64) -> Self {
        Self {
            params: model.init_params(&mut derived(seed, "init")),
            optimizer: AdamW::new(),
            step: 0,
            rng: derived(seed, "batches"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss_mlm: f64,
    pub loss_align: f64,
    pub loss: f64,
    pub lr_lm: f64,
    pub lr_other: f64,
    /// In-batch rate at which an entity's nearest graph embedding is its
    /// own; absent when the alignment term is off.
    pub xmodal_top1: Option<f64>,
}

/// Loss terms of one forward pass over a batch.
pub struct Forward<'t> {
    pub mlm: Option<Var<'t>>,
    pub align: Option<Var<'t>>,
    pub total: Option<Var<'t>>,
    pub entity: Option<Var<'t>>,
    pub graph: Option<Var<'t>>,
}

/// Records the full training objective for `batch` on the binder's tape.
/// Entity vectors are pooled from the corrupted sequences.
pub fn forward<'t>(setup: &TrainSetup, b: &Binder<'t>, batch: &TrainingBatch) -> Result<Forward<'t>> {
    let model = &setup.model;
    let obj = &setup.objective;
    let seqs: Vec<&[usize]> = batch.items.iter().map(|i| i.ids.as_slice()).collect();
    let packed = model.encode_packed(b, &seqs)?;

    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (i, item) in batch.items.iter().enumerate() {
        for (pos, l) in item.labels.iter().enumerate() {
            if let Some(l) = l {
                rows.push(packed.row(i, pos));
                labels.push(*l);
            }
        }
    }
    let mlm = if rows.is_empty() {
        None
    } else {
        mlm_loss(model.mlm_logits(b, packed.h, &rows), &labels)?
    };

    let (mut align, mut entity, mut graph) = (None, None, None);
    if obj.aligns() {
        let spans: Vec<(usize, usize)> = batch
            .items
            .iter()
            .enumerate()
            .map(|(i, it)| (packed.row(i, it.span.0), packed.row(i, it.span.1)))
            .collect();
        let e = pool_entity(model, b, packed.h, &spans, model.config.pooling)?;
        let graphs: Vec<_> = batch.items.iter().map(|i| i.graph.clone()).collect();
        let g = model.graph_reps(b, &graphs)?.reps;
        align = Some(match obj.align {
            AlignKind::Infonce => infonce_align_loss(e, g, obj.tau, obj.negatives)?,
            AlignKind::Ms => ms_align_loss(b, e, g, obj.ms_alpha, obj.ms_beta, obj.ms_epsilon)?,
            AlignKind::Classification => {
                let partners = batch
                    .partners
                    .as_ref()
                    .ok_or_else(|| Error::InvalidInput("batch carries no negative partners".into()))?;
                classification_align_loss(b, e, g, partners)?
            }
            AlignKind::None => unreachable!("aligns() excludes None"),
        });
        entity = Some(e);
        graph = Some(g);
    }

    let mut total: Option<Var<'t>> = None;
    for (term, w) in [(mlm, obj.mlm_weight), (align, obj.align_weight)] {
        if let Some(t) = term.filter(|_| w != 0.0) {
            let t = if w == 1.0 { t } else { t.scale(w) };
            total = Some(match total {
                Some(acc) => acc.add(t),
                None => t,
            });
        }
    }
    Ok(Forward {
        mlm,
        align,
        total,
        entity,
        graph,
    })
}

/// Scalar training loss of `batch` under `params`, without updating.
pub fn batch_loss(setup: &TrainSetup, params: &ParamStore, batch: &TrainingBatch) -> Result<f64> {
    let tape = Tape::new();
    let b = Binder::new(&tape, params);
    Ok(forward(setup, &b, batch)?.total.map_or(0.0, |t| t.item()))
}

/// Fraction of rows whose most cosine-similar graph row is their own.
pub fn top1_match_rate(e: &Matrix, g: &Matrix) -> f64 {
    let unit = |m: &Matrix| {
        let mut m = m.clone();
        for mut r in m.rows_mut() {
            let n = r.dot(&r).sqrt();
            if n > 0.0 {
                r /= n;
            }
        }
        m
    };
    let sim = unit(e).dot(&unit(g).t());
    let hits = sim
        .rows()
        .into_iter()
        .enumerate()
        .filter(|(i, r)| {
            let best = r
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (j, &s)| if s > acc.1 { (j, s) } else { acc });
            best.0 == *i
        })
        .count();
    hits as f64 / sim.nrows().max(1) as f64
}

/// One AdamW step on `batch`. Learning rates follow the cosine schedule
/// over `total_steps`.
pub fn train_step(
    setup: &TrainSetup,
    state: &mut ModelState,
    batch: &TrainingBatch,
    total_steps: usize,
) -> Result<StepMetrics> {
    let step = state.step;
    let lr_lm = lr_at(step, total_steps, setup.train.lr_lm);
    let lr_other = lr_at(step, total_steps, setup.train.lr_other);
    let non_finite = |message: String| Error::NonFinite { step: step + 1, message };

    let (metrics, grads) = {
        let tape = Tape::new();
        let b = Binder::new(&tape, &state.params);
        let f = forward(setup, &b, batch)?;
        let total = f
            .total
            .ok_or_else(|| Error::InvalidInput("batch produced no loss term".into()))?;
        let loss_mlm = f.mlm.map_or(0.0, |v| v.item());
        let loss_align = f.align.map_or(0.0, |v| v.item());
        let loss = total.item();
        if !(loss.is_finite() && loss_mlm.is_finite() && loss_align.is_finite()) {
            return Err(non_finite(format!(
                "loss {loss} (mlm {loss_mlm}, align {loss_align})"
            )));
        }
        let xmodal_top1 = match (f.entity, f.graph) {
            (Some(e), Some(g)) => Some(top1_match_rate(&e.value(), &g.value())),
            _ => None,
        };
        let grads = b.collect(&tape.backward(total));
        if let Some((name, _)) = grads.iter().find(|(_, g)| !g.iter().all(|x| x.is_finite())) {
            return Err(non_finite(format!("gradient of `{name}` is not finite")));
        }
        let metrics = StepMetrics {
            step: step + 1,
            loss_mlm,
            loss_align,
            loss,
            lr_lm,
            lr_other,
            xmodal_top1,
        };
        (metrics, grads)
    };

    let hyper = setup.train.adam();
    state
        .optimizer
        .step(&mut state.params, &grads, &hyper, |n| group_lr(n, lr_lm, lr_other));
    if !state.params.all_finite() {
        return Err(non_finite("parameters became non-finite after the update".into()));
    }
    state.step += 1;
    Ok(metrics)
}

/// Sentences eligible for batches: the concept-balanced sample restricted
/// to sentences with at least one usable anchor.
pub fn training_pool(setup: &TrainSetup, data: &TrainData, seed: u64) -> Vec<usize> {
    let needs_edges = setup.model.config.pathway.needs_edges();
    let mut rng = derived(seed, "balance");
    balanced_sample_indices(&data.sentences, setup.train.per_concept_cap, &mut rng)
        .into_iter()
        .filter(|&s| data.anchors(s, needs_edges).next().is_some())
        .collect()
}

#[derive(Debug, Clone)]
pub struct PretrainOptions {
    pub out_dir: PathBuf,
    pub seed: u64,
    /// Continue from `last.ckpt` in `out_dir` when it exists.
    pub resume: bool,
    /// Stop once this many steps have completed, leaving a resumable
    /// checkpoint behind.
    pub stop_after: Option<usize>,
    pub config: serde_json::Value,
    pub config_hash: String,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    /// Final checkpoint, or the resumable one when stopped early.
    pub checkpoint: PathBuf,
    pub metrics_log: PathBuf,
    pub total_steps: usize,
    pub completed: usize,
    pub finished: bool,
    /// Records produced by this invocation.
    pub metrics: Vec<StepMetrics>,
}

fn check_data(setup: &TrainSetup, data: &TrainData) -> Result<()> {
    if data.vocab.len() != setup.model.vocab_size {
        return Err(Error::Config(format!(
            "model expects {} tokens but the vocabulary has {}",
            setup.model.vocab_size,
            data.vocab.len()
        )));
    }
    if data.kg.num_relations() != setup.model.num_relations {
        return Err(Error::Config(format!(
            "model expects {} relations but the graph has {}",
            setup.model.num_relations,
            data.kg.num_relations()
        )));
    }
    Ok(())
}

fn snapshot(setup: &TrainSetup, data: &TrainData, state: &ModelState, opts: &PretrainOptions) -> Checkpoint {
    Checkpoint {
        kind: ArtifactKind::Full,
        step: state.step,
        model: setup.model.clone(),
        config: opts.config.clone(),
        config_hash: opts.config_hash.clone(),
        vocab: data.vocab.clone(),
        params: state.params.clone(),
        optimizer: Some(state.optimizer.clone()),
        rng: Some(RngState::capture(&state.rng)),
    }
}

fn restore(setup: &TrainSetup, ckpt: Checkpoint) -> Result<ModelState> {
    if ckpt.kind != ArtifactKind::Full {
        return Err(Error::Checkpoint("cannot resume from an LM-only export".into()));
    }
    if ckpt.model != setup.model {
        return Err(Error::Checkpoint("checkpoint model does not match the configuration".into()));
    }
    let rng = ckpt
        .rng
        .as_ref()
        .and_then(RngState::restore)
        .ok_or_else(|| Error::Checkpoint("checkpoint has no usable sampler state".into()))?;
    Ok(ModelState {
        params: ckpt.params,
        optimizer: ckpt.optimizer.unwrap_or_default(),
        step: ckpt.step,
        rng,
    })
}

/// Keeps the log records up to `step`, dropping those of steps that the
/// resumed checkpoint never saw.
fn truncate_log(path: &Path, step: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let reader = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let mut kept = String::new();
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let m: StepMetrics = serde_json::from_str(&line)?;
        if m.step <= step {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

/// Runs the pretraining loop, writing `metrics.jsonl`, periodic
/// `last.ckpt` snapshots and a final `model.ckpt` under `opts.out_dir`.
pub fn pretrain(setup: &TrainSetup, data: &TrainData, opts: &PretrainOptions) -> Result<PretrainOutcome> {
    check_data(setup, data)?;
    let out = &opts.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let pool = training_pool(setup, data, opts.seed);
    let total_steps = setup.train.total_steps(pool.len());
    let last = out.join(LAST_CHECKPOINT);
    let log_path = out.join(METRICS_FILE);

    let mut state = if opts.resume && last.exists() {
        let s = restore(setup, Checkpoint::load(&last)?)?;
        truncate_log(&log_path, s.step)?;
        log::info!("resuming from step {}", s.step);
        s
    } else {
        fs::write(&log_path, "").map_err(|e| Error::io(&log_path, e))?;
        ModelState::init(&setup.model, opts.seed)
    };
    let mut log_file = OpenOptions::new()
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;

    let stop = opts.stop_after.unwrap_or(total_steps).min(total_steps);
    let mut produced = Vec::new();
    while state.step < stop {
        let batch = assemble_batch(data, &pool, setup, &mut state.rng)?;
        let m = match train_step(setup, &mut state, &batch, total_steps) {
            Ok(m) => m,
            Err(Error::NonFinite { step, message }) => {
                let diag = out.join(DIAGNOSTICS_FILE);
                let report = serde_json::json!({
                    "step": step,
                    "message": message,
                    "last_metrics": produced.last(),
                    "concepts": batch.concepts().iter().map(|&c| data.kg.id(c)).collect::<Vec<_>>(),
                });
                fs::write(&diag, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&diag, e))?;
                return Err(Error::NonFinite {
                    step,
                    message: format!("{message}; diagnostics in {}", diag.display()),
                });
            }
            Err(e) => return Err(e),
        };
        writeln!(log_file, "{}", serde_json::to_string(&m)?).map_err(|e| Error::io(&log_path, e))?;
        if m.step % 100 == 0 {
            log::info!(
                "step {}/{}: loss {:.4} (mlm {:.4}, align {:.4})",
                m.step,
                total_steps,
                m.loss,
                m.loss_mlm,
                m.loss_align
            );
        }
        produced.push(m);
        let every = setup.train.checkpoint_every;
        if every > 0 && state.step % every == 0 && state.step < total_steps {
            snapshot(setup, data, &state, opts).save(&last)?;
        }
    }

    let finished = state.step >= total_steps;
    let checkpoint = if finished {
        out.join(FINAL_CHECKPOINT)
    } else {
        last.clone()
    };
    snapshot(setup, data, &state, opts).save(&checkpoint)?;
    Ok(PretrainOutcome {
        checkpoint,
        metrics_log: log_path,
        total_steps,
        completed: state.step,
        finished,
        metrics: produced,
    })
}

/// Reads a metrics log back.
pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let reader = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
