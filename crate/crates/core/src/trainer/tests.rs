use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use super::*;
use crate::corpus::{build_vocab, generate, AnnotatedSentence, GeneratorSpec, Mention};
use crate::dataset::Dataset;
use crate::encoders::{is_lm_param, lm_encode, ModelConfig, Pathway};
use crate::kg::{KnowledgeGraph, NodeIx};
use crate::rng::seeded;

fn small_data(concepts: usize, seed: u64) -> (Dataset, TrainData) {
    let spec = GeneratorSpec {
        concepts,
        ..GeneratorSpec::default()
    };
    let ds = Dataset::from_generated(&generate(&spec, &mut seeded(seed)).unwrap()).unwrap();
    let vocab = build_vocab(&ds.train, &ds.kg, 1).unwrap();
    let data = TrainData::new(ds.kg.clone(), vocab, ds.train.clone(), 64).unwrap();
    (ds, data)
}

fn setup_for(data: &TrainData, model: ModelConfig, objective: ObjectiveConfig, train: TrainConfig) -> TrainSetup {
    let classifier = objective.align == AlignKind::Classification;
    let m = Model::new(model, data.vocab.len(), data.kg.num_relations(), classifier).unwrap();
    TrainSetup::new(m, objective, train).unwrap()
}

fn narrow() -> ModelConfig {
    ModelConfig {
        d: 16,
        lm_layers: 1,
        gnn_layers: 1,
        ..ModelConfig::default()
    }
}

fn train_cfg(batch_size: usize, steps: usize) -> TrainConfig {
    TrainConfig {
        batch_size,
        steps,
        ..TrainConfig::default()
    }
}

fn opts(dir: &Path, seed: u64) -> PretrainOptions {
    PretrainOptions {
        out_dir: dir.to_path_buf(),
        seed,
        resume: false,
        stop_after: None,
        config: serde_json::json!({"test": true}),
        config_hash: "0123456789abcdef".into(),
    }
}

// Schedule and optimizer.

#[test]
fn lr_endpoints_and_midpoint() {
    assert_eq!(lr_at(0, 100, 1e-3), 1e-3);
    assert!(lr_at(100, 100, 1e-3).abs() < 1e-18);
    // ½(1 + cos(π/2)) = ½.
    assert!((lr_at(50, 100, 1e-3) - 0.5e-3).abs() < 1e-15);
    assert!((lr_at(25, 100, 2.0) - (1.0 + 0.5f64.sqrt())).abs() < 1e-12);
}

#[test]
fn lr_past_end_is_zero() {
    assert_eq!(lr_at(101, 100, 1e-3), 0.0);
    assert_eq!(lr_at(5, 0, 1e-3), 0.0);
}

proptest! {
    #[test]
    fn lr_monotone_non_increasing(total in 1usize..5000, peak in 1e-6f64..1.0) {
        let mut prev = f64::INFINITY;
        let stride = (total / 200).max(1);
        for s in (0..=total).step_by(stride).chain(std::iter::once(total)) {
            let lr = lr_at(s, total, peak);
            prop_assert!(lr <= prev);
            prop_assert!(lr >= 0.0);
            prev = lr;
        }
    }
}

#[test]
fn decay_skips_biases_and_norms() {
    assert!(decays("lm.tok_emb"));
    assert!(decays("lm.layer0.wq"));
    assert!(decays("gnn.l0.w"));
    assert!(!decays("lm.layer0.bq"));
    assert!(!decays("lm.layer0.ln1.b"));
    assert!(!decays("lm.layer0.ln1.g"));
    assert!(!decays("gnn.l0.b"));
}

#[test]
fn adamw_matches_hand_computation() {
    let hyper = AdamHyper::default();
    let mut params = ParamStore::new();
    params.insert("w", ndarray::array![[1.0, -2.0]]);
    params.insert("b", ndarray::array![[0.5]]);
    let mut opt = AdamW::new();
    let lr = 0.1;

    let g1: BTreeMap<String, Matrix> = [
        ("w".to_string(), ndarray::array![[0.5, -0.1]]),
        ("b".to_string(), ndarray::array![[2.0]]),
    ]
    .into();
    opt.step(&mut params, &g1, &hyper, |_| lr);
    // First step: bias-corrected moments are g and g², so each entry moves
    // by lr · g/(|g| + eps) after the decoupled decay.
    let w = params.get("w").unwrap();
    assert!((w[[0, 0]] - (1.0 * 0.999 - 0.1 * 0.5 / (0.5 + 1e-8))).abs() < 1e-15);
    assert!((w[[0, 1]] - (-2.0 * 0.999 + 0.1 * 0.1 / (0.1 + 1e-8))).abs() < 1e-15);
    assert!((params.get("b").unwrap()[[0, 0]] - (0.5 - 0.1 * 2.0 / (2.0 + 1e-8))).abs() < 1e-15);

    let before = params.get("w").unwrap()[[0, 0]];
    let g2: BTreeMap<String, Matrix> = [("w".to_string(), ndarray::array![[-0.25, 0.0]])].into();
    opt.step(&mut params, &g2, &hyper, |_| lr);
    let m = 0.9 * (0.1 * 0.5) + 0.1 * -0.25;
    let v = 0.999 * (0.001 * 0.25) + 0.001 * 0.0625;
    let m_hat = m / (1.0 - 0.81);
    let v_hat = v / (1.0 - 0.999f64 * 0.999);
    let expected = before * 0.999 - lr * m_hat / (v_hat.sqrt() + 1e-8);
    assert!((params.get("w").unwrap()[[0, 0]] - expected).abs() < 1e-14);
    // `b` had no gradient on the second step and keeps its count.
    assert_eq!(opt.counts["b"], 1);
    assert_eq!(opt.counts["w"], 2);
}

#[test]
fn parameter_groups_partition_all_params() {
    let (_, data) = small_data(20, 3);
    for (pathway, align) in [
        (Pathway::Gat, AlignKind::Infonce),
        (Pathway::Distmult, AlignKind::Classification),
        (Pathway::Linearized, AlignKind::Ms),
    ] {
        let objective = ObjectiveConfig {
            align,
            ..ObjectiveConfig::default()
        };
        let setup = setup_for(&data, ModelConfig { pathway, ..narrow() }, objective, train_cfg(4, 10));
        let params = setup.model.init_params(&mut seeded(0));
        let lm: BTreeSet<&String> = params.names().filter(|n| group_lr(n, 1.0, 2.0) == 1.0).collect();
        let other: BTreeSet<&String> = params.names().filter(|n| group_lr(n, 1.0, 2.0) == 2.0).collect();
        assert!(lm.is_disjoint(&other));
        assert_eq!(lm.len() + other.len(), params.len());
        assert!(!lm.is_empty());
        if pathway != Pathway::Linearized || align == AlignKind::Classification {
            assert!(!other.is_empty(), "{pathway:?}");
        }
    }
}

// Batch assembly.

/// `n` concepts in a ring, one single-mention sentence each.
fn ring_data(n: usize) -> TrainData {
    let mut triples = String::new();
    let mut syn = String::new();
    for i in 0..n {
        triples.push_str(&format!("{{\"head\":\"C{i}\",\"rel\":\"r\",\"tail\":\"C{}\"}}\n", (i + 1) % n));
        syn.push_str(&format!("{{\"id\":\"C{i}\",\"names\":[\"thing{i}\"]}}\n"));
    }
    let kg = KnowledgeGraph::load(triples.as_bytes(), syn.as_bytes(), None::<&[u8]>).unwrap();
    let sentences: Vec<AnnotatedSentence> = (0..n)
        .map(|i| AnnotatedSentence {
            tokens: vec!["see".into(), format!("thing{i}"), "here".into()],
            mentions: vec![Mention(1, 2, format!("C{i}"))],
        })
        .collect();
    let vocab = build_vocab(&sentences, &kg, 1).unwrap();
    TrainData::new(kg, vocab, sentences, 16).unwrap()
}

#[test]
fn exact_corpus_fills_one_batch() {
    let data = ring_data(8);
    let setup = setup_for(&data, narrow(), ObjectiveConfig::default(), train_cfg(8, 10));
    let pool: Vec<usize> = (0..8).collect();
    let batch = assemble_batch(&data, &pool, &setup, &mut seeded(1)).unwrap();
    let mut sentences: Vec<usize> = batch.items.iter().map(|i| i.sentence).collect();
    sentences.sort_unstable();
    assert_eq!(sentences, pool);
    let concepts: BTreeSet<NodeIx> = batch.concepts().into_iter().collect();
    assert_eq!(concepts.len(), 8);
}

#[test]
fn too_few_concepts_is_config_error() {
    let data = ring_data(7);
    let setup = setup_for(&data, narrow(), ObjectiveConfig::default(), train_cfg(8, 10));
    let pool: Vec<usize> = (0..7).collect();
    let err = assemble_batch(&data, &pool, &setup, &mut seeded(1)).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn batches_reproducible_from_seed() {
    let (_, data) = small_data(60, 2);
    let setup = setup_for(&data, narrow(), ObjectiveConfig::default(), train_cfg(16, 10));
    let pool = training_pool(&setup, &data, 0);
    let draw = |seed| {
        let mut rng = seeded(seed);
        (0..3)
            .map(|_| {
                let b = assemble_batch(&data, &pool, &setup, &mut rng).unwrap();
                b.items.iter().map(|i| (i.sentence, i.concept, i.ids.clone())).collect::<Vec<_>>()
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(draw(5), draw(5));
    assert_ne!(draw(5), draw(6));
}

#[test]
fn batch_items_are_well_formed() {
    let (_, data) = small_data(60, 2);
    let objective = ObjectiveConfig {
        align: AlignKind::Classification,
        ..ObjectiveConfig::default()
    };
    let setup = setup_for(&data, narrow(), objective, train_cfg(16, 10));
    let pool = training_pool(&setup, &data, 0);
    let batch = assemble_batch(&data, &pool, &setup, &mut seeded(3)).unwrap();
    assert_eq!(batch.len(), 16);
    let partners = batch.partners.as_ref().unwrap();
    assert_eq!(partners.len(), 16);
    for (i, item) in batch.items.iter().enumerate() {
        assert_ne!(partners[i], i);
        assert_eq!(item.ids.len(), data.encoded[item.sentence].ids.len());
        assert_eq!(item.labels.len(), item.ids.len());
        assert!(item.span.0 >= 1 && item.span.0 < item.span.1 && item.span.1 < item.ids.len());
        assert!(data.encoded[item.sentence]
            .anchors
            .iter()
            .any(|a| (a.start, a.end, a.concept) == (item.span.0, item.span.1, item.concept)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn anchor_concepts_pairwise_distinct(seed in 0u64..1000, b in 2usize..40) {
        let (_, data) = small_data(40, seed % 4);
        let setup = setup_for(&data, narrow(), ObjectiveConfig::default(), train_cfg(b, 10));
        let pool = training_pool(&setup, &data, seed);
        let batch = assemble_batch(&data, &pool, &setup, &mut seeded(seed)).unwrap();
        let concepts = batch.concepts();
        let distinct: BTreeSet<_> = concepts.iter().collect();
        prop_assert_eq!(distinct.len(), b);
    }
}

#[test]
fn pool_respects_epoch_cap() {
    let t = TrainConfig {
        batch_size: 32,
        steps: 1000,
        epochs: 2,
        ..TrainConfig::default()
    };
    assert_eq!(t.total_steps(100), 8);
    assert_eq!(TrainConfig { epochs: 0, ..t.clone() }.total_steps(100), 1000);
    assert_eq!(TrainConfig { epochs: 500, ..t }.total_steps(100), 1000);
}

// Training steps.

#[test]
fn zero_align_weight_leaves_graph_params() {
    let (_, data) = small_data(40, 1);
    let objective = ObjectiveConfig {
        align_weight: 0.0,
        ..ObjectiveConfig::default()
    };
    let setup = setup_for(&data, narrow(), objective, train_cfg(8, 10));
    let pool = training_pool(&setup, &data, 0);
    let mut state = ModelState::init(&setup.model, 0);
    let before = state.params.clone();
    for _ in 0..3 {
        let batch = assemble_batch(&data, &pool, &setup, &mut state.rng).unwrap();
        train_step(&setup, &mut state, &batch, 10).unwrap();
    }
    let mut lm_changed = false;
    for (name, p) in before.iter() {
        let after = state.params.get(name).unwrap();
        if is_lm_param(name) {
            lm_changed |= after != p;
        } else {
            assert_eq!(after, p, "{name} moved");
        }
    }
    assert!(lm_changed);
}

#[test]
fn same_seed_same_metric_stream() {
    let (_, data) = small_data(40, 1);
    let setup = setup_for(&data, narrow(), ObjectiveConfig::default(), train_cfg(8, 6));
    let run = || {
        let pool = training_pool(&setup, &data, 7);
        let mut state = ModelState::init(&setup.model, 7);
        (0..6)
            .map(|_| {
                let batch = assemble_batch(&data, &pool, &setup, &mut state.rng).unwrap();
                train_step(&setup, &mut state, &batch, 6).unwrap()
            })
            .collect::<Vec<_>>()
    };
    let a = run();
    assert_eq!(a, run());
    assert_eq!(a.iter().map(|m| m.step).collect::<Vec<_>>(), (1..=6).collect::<Vec<_>>());
    assert!(a.iter().all(|m| m.xmodal_top1.is_some()));
}

#[test]
fn frozen_batch_loss_descends() {
    let (_, data) = small_data(200, 1);
    let setup = setup_for(&data, ModelConfig::default(), ObjectiveConfig::default(), TrainConfig::default());
    let pool = training_pool(&setup, &data, 0);
    let mut state = ModelState::init(&setup.model, 0);
    let batch = assemble_batch(&data, &pool, &setup, &mut state.rng).unwrap();
    let mut losses: Vec<f64> = (0..50)
        .map(|_| train_step(&setup, &mut state, &batch, 50).unwrap().loss)
        .collect();
    losses.push(batch_loss(&setup, &state.params, &batch).unwrap());
    let drops = losses.windows(2).filter(|w| w[1] < w[0]).count();
    assert!(drops >= 45, "only {drops}/50 steps reduced the loss");
}

#[test]
fn non_finite_params_are_reported() {
    let (_, data) = small_data(40, 1);
    let setup = setup_for(&data, narrow(), ObjectiveConfig::default(), train_cfg(8, 10));
    let pool = training_pool(&setup, &data, 0);
    let mut state = ModelState::init(&setup.model, 0);
    state.params.get_mut("lm.tok_emb").unwrap()[[5, 0]] = f64::NAN;
    let mut batch = assemble_batch(&data, &pool, &setup, &mut state.rng).unwrap();
    batch.items[0].ids[1] = 5;
    match train_step(&setup, &mut state, &batch, 10) {
        Err(Error::NonFinite { step, .. }) => assert_eq!(step, 1),
        other => panic!("expected a numerical failure, got {other:?}"),
    }
}

#[test]
fn setup_rejects_inconsistent_objectives() {
    let (_, data) = small_data(20, 1);
    let m = Model::new(narrow(), data.vocab.len(), data.kg.num_relations(), false).unwrap();
    let off = ObjectiveConfig {
        mlm_weight: 0.0,
        align: AlignKind::None,
        ..ObjectiveConfig::default()
    };
    assert!(TrainSetup::new(m.clone(), off, train_cfg(4, 1)).is_err());
    let cls = ObjectiveConfig {
        align: AlignKind::Classification,
        ..ObjectiveConfig::default()
    };
    assert!(TrainSetup::new(m, cls, train_cfg(4, 1)).is_err());
}

// Pretraining loop and checkpoints.

#[test]
fn overfit_smoke_run() {
    let (_, data) = small_data(200, 1);
    let setup = setup_for(
        &data,
        ModelConfig::default(),
        ObjectiveConfig::default(),
        TrainConfig {
            steps: 500,
            checkpoint_every: 200,
            ..TrainConfig::default()
        },
    );
    let dir = tempfile::tempdir().unwrap();
    let out = pretrain(&setup, &data, &opts(dir.path(), 0)).unwrap();
    assert!(out.finished);
    assert_eq!(out.completed, 500);
    assert_eq!(out.checkpoint, dir.path().join(FINAL_CHECKPOINT));
    let ckpt = Checkpoint::load(&out.checkpoint).unwrap();
    assert_eq!(ckpt.step, 500);
    assert!(ckpt.params.all_finite());
    assert!(dir.path().join(LAST_CHECKPOINT).exists());

    let log = read_metrics(&out.metrics_log).unwrap();
    assert_eq!(log, out.metrics);
    assert_eq!(log.len(), 500);
    let mean = |s: &[StepMetrics]| s.iter().map(|m| m.loss_align).sum::<f64>() / s.len() as f64;
    let (first, last) = (mean(&log[..50]), mean(&log[450..]));
    assert!(last < first, "align loss {first} -> {last}");
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let (_, data) = small_data(40, 1);
    let setup = setup_for(
        &data,
        narrow(),
        ObjectiveConfig::default(),
        TrainConfig {
            batch_size: 8,
            steps: 30,
            checkpoint_every: 10,
            ..TrainConfig::default()
        },
    );
    let full_dir = tempfile::tempdir().unwrap();
    let full = pretrain(&setup, &data, &opts(full_dir.path(), 4)).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let first = pretrain(
        &setup,
        &data,
        &PretrainOptions {
            stop_after: Some(17),
            ..opts(dir.path(), 4)
        },
    )
    .unwrap();
    assert!(!first.finished);
    assert_eq!(first.completed, 17);
    let resumed = pretrain(
        &setup,
        &data,
        &PretrainOptions {
            resume: true,
            ..opts(dir.path(), 4)
        },
    )
    .unwrap();
    assert!(resumed.finished);
    assert_eq!(read_metrics(&resumed.metrics_log).unwrap(), full.metrics);
    let a = Checkpoint::load(&full.checkpoint).unwrap();
    let b = Checkpoint::load(&resumed.checkpoint).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.optimizer, b.optimizer);
}

#[test]
fn resume_from_periodic_snapshot_truncates_log() {
    let (_, data) = small_data(40, 1);
    let setup = setup_for(
        &data,
        narrow(),
        ObjectiveConfig::default(),
        TrainConfig {
            batch_size: 8,
            steps: 25,
            checkpoint_every: 10,
            ..TrainConfig::default()
        },
    );
    let full_dir = tempfile::tempdir().unwrap();
    let full = pretrain(&setup, &data, &opts(full_dir.path(), 2)).unwrap();

    // A crash after step 23 leaves a log that ran ahead of the step-20
    // snapshot.
    let dir = tempfile::tempdir().unwrap();
    let scratch = tempfile::tempdir().unwrap();
    for (d, stop) in [(dir.path(), 23), (scratch.path(), 20)] {
        let o = PretrainOptions {
            stop_after: Some(stop),
            ..opts(d, 2)
        };
        pretrain(&setup, &data, &o).unwrap();
    }
    fs::copy(scratch.path().join(LAST_CHECKPOINT), dir.path().join(LAST_CHECKPOINT)).unwrap();
    assert_eq!(read_metrics(&dir.path().join(METRICS_FILE)).unwrap().len(), 23);
    let resumed = pretrain(
        &setup,
        &data,
        &PretrainOptions {
            resume: true,
            ..opts(dir.path(), 2)
        },
    )
    .unwrap();
    assert_eq!(resumed.metrics.first().unwrap().step, 21);
    assert_eq!(read_metrics(&resumed.metrics_log).unwrap(), full.metrics);
}

#[test]
fn overflowing_update_writes_diagnostics() {
    let (_, data) = small_data(40, 1);
    let setup = setup_for(
        &data,
        narrow(),
        ObjectiveConfig::default(),
        TrainConfig {
            batch_size: 8,
            steps: 20,
            lr_lm: 1e308,
            ..TrainConfig::default()
        },
    );
    let dir = tempfile::tempdir().unwrap();
    let err = pretrain(&setup, &data, &opts(dir.path(), 0)).unwrap_err();
    assert!(matches!(err, Error::NonFinite { .. }), "{err}");
    let diag: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join(DIAGNOSTICS_FILE)).unwrap()).unwrap();
    assert!(diag["step"].as_u64().unwrap() >= 1);
    assert_eq!(diag["concepts"].as_array().unwrap().len(), 8);
}

fn trained_checkpoint(pathway: Pathway) -> (TrainData, Checkpoint) {
    let (_, data) = small_data(40, 1);
    let setup = setup_for(&data, ModelConfig { pathway, ..narrow() }, ObjectiveConfig::default(), train_cfg(8, 3));
    let dir = tempfile::tempdir().unwrap();
    let out = pretrain(&setup, &data, &opts(dir.path(), 0)).unwrap();
    (data, Checkpoint::load(&out.checkpoint).unwrap())
}

#[test]
fn checkpoint_roundtrip_is_exact() {
    let (_, ckpt) = trained_checkpoint(Pathway::Gat);
    let back = Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap();
    assert_eq!(back.params, ckpt.params);
    assert_eq!(back.optimizer, ckpt.optimizer);
    assert_eq!(back.rng, ckpt.rng);
    assert_eq!(back.model, ckpt.model);
    assert_eq!(back.vocab, ckpt.vocab);
    assert_eq!(back.step, 3);
    let mut a = ckpt.rng.as_ref().unwrap().restore().unwrap();
    let mut b = back.rng.as_ref().unwrap().restore().unwrap();
    use rand::RngCore;
    assert_eq!(a.next_u64(), b.next_u64());
}

#[test]
fn corrupt_checkpoint_is_integrity_error() {
    let (_, ckpt) = trained_checkpoint(Pathway::Gat);
    let mut bytes = ckpt.to_bytes().unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x01;
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Integrity(_))));
    assert!(matches!(Checkpoint::from_bytes(b"hello"), Err(Error::Integrity(_))));
    let n = bytes.len();
    assert!(matches!(Checkpoint::from_bytes(&bytes[..n - 1]), Err(Error::Integrity(_))));
}

#[test]
fn unknown_version_is_checkpoint_error() {
    use sha2::{Digest, Sha256};
    let (_, ckpt) = trained_checkpoint(Pathway::Gat);
    let bytes = ckpt.to_bytes().unwrap();
    let mut body = bytes[..bytes.len() - 32].to_vec();
    body[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    let digest = Sha256::digest(&body);
    body.extend_from_slice(&digest);
    assert!(matches!(Checkpoint::from_bytes(&body), Err(Error::Checkpoint(_))));
}

#[test]
fn export_keeps_only_text_encoder() {
    for pathway in [Pathway::Gat, Pathway::Distmult] {
        let (data, ckpt) = trained_checkpoint(pathway);
        let dir = tempfile::tempdir().unwrap();
        let full_path = dir.path().join("full.ckpt");
        let lm_path = dir.path().join("lm.ckpt");
        ckpt.save(&full_path).unwrap();
        let lm = export_lm(&full_path, &lm_path).unwrap();
        assert_eq!(lm.kind, ArtifactKind::Lm);
        assert!(lm.optimizer.is_none() && lm.rng.is_none());
        assert!(lm.params.names().all(|n| is_lm_param(n)));
        assert!(lm.params.names().all(|n| !n.contains("gnn") && !n.contains("rel") && !n.contains("cls")));
        assert!(ckpt.params.names().any(|n| !is_lm_param(n)));
        let reloaded = Checkpoint::load(&lm_path).unwrap();
        for ex in data.encoded.iter().take(5) {
            let mask = vec![true; ex.ids.len()];
            let a = lm_encode(&ckpt.model, &ckpt.params, &ex.ids, &mask).unwrap();
            let b = lm_encode(&reloaded.model, &reloaded.params, &ex.ids, &mask).unwrap();
            assert_eq!(a, b);
        }
        let size = |p: &Path| fs::metadata(p).unwrap().len();
        assert!(size(&lm_path) < size(&full_path));
    }
}

#[test]
fn resume_rejects_lm_export_and_mismatched_model() {
    let (data, ckpt) = trained_checkpoint(Pathway::Gat);
    let setup = setup_for(&data, narrow(), ObjectiveConfig::default(), train_cfg(8, 3));
    assert!(matches!(restore(&setup, ckpt.export_lm()), Err(Error::Checkpoint(_))));
    let other = setup_for(&data, ModelConfig { d: 8, ..narrow() }, ObjectiveConfig::default(), train_cfg(8, 3));
    assert!(matches!(restore(&other, ckpt), Err(Error::Checkpoint(_))));
}
