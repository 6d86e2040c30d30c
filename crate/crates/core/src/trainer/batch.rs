//! Aligned (sentence, subgraph) batches.

use std::collections::BTreeSet;

use rand::Rng;

use super::TrainSetup;
use crate::corpus::{encode, AnnotatedSentence, TokenId, Vocabulary};
use crate::encoders::{sample_graph_inputs, GraphInput};
use crate::error::{Error, Result};
use crate::kg::{KnowledgeGraph, NodeIx};
use crate::objectives::{apply_mlm_mask, sample_negative_partners, AlignKind};
use crate::rng::SeededRng;

/// Encoded mention that can serve as an alignment anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Anchor {
    pub start: usize,
    pub end: usize,
    pub concept: NodeIx,
}

#[derive(Debug, Clone)]
pub struct EncodedExample {
    pub ids: Vec<TokenId>,
    pub anchors: Vec<Anchor>,
}

/// Graph, vocabulary and encoded training sentences.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub kg: KnowledgeGraph,
    pub vocab: Vocabulary,
    pub sentences: Vec<AnnotatedSentence>,
    pub encoded: Vec<EncodedExample>,
}

impl TrainData {
    /// Encodes every sentence at `max_len`. Mentions lost to truncation are
    /// dropped; mentions of unknown concepts are an error.
    pub fn new(kg: KnowledgeGraph, vocab: Vocabulary, sentences: Vec<AnnotatedSentence>, max_len: usize) -> Result<Self> {
        if max_len < 3 {
            return Err(Error::Config("max_len must be at least 3".into()));
        }
        let encoded = sentences
            .iter()
            .map(|s| {
                let enc = encode(s, &vocab, max_len);
                let anchors = enc
                    .mentions
                    .iter()
                    .map(|m| {
                        Ok(Anchor {
                            start: m.start,
                            end: m.end,
                            concept: kg.node(&m.concept)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(EncodedExample { ids: enc.ids, anchors })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            kg,
            vocab,
            sentences,
            encoded,
        })
    }

    /// Anchors of sentence `s` usable under the configured pathway.
    pub fn anchors(&self, s: usize, needs_edges: bool) -> impl Iterator<Item = &Anchor> + '_ {
        self.encoded[s]
            .anchors
            .iter()
            .filter(move |a| !needs_edges || self.kg.indegree(a.concept) > 0)
    }
}

#[derive(Debug, Clone)]
pub struct TrainingItem {
    pub sentence: usize,
    pub ids: Vec<TokenId>,
    pub labels: Vec<Option<TokenId>>,
    pub span: (usize, usize),
    pub concept: NodeIx,
    pub graph: GraphInput,
}

#[derive(Debug, Clone)]
pub struct TrainingBatch {
    pub items: Vec<TrainingItem>,
    /// Negative partner per item for the classification objective.
    pub partners: Option<Vec<usize>>,
}

impl TrainingBatch {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn concepts(&self) -> Vec<NodeIx> {
        self.items.iter().map(|i| i.concept).collect()
    }
}

/// Distinct concepts that some sentence of `pool` can anchor.
pub fn anchorable_concepts(data: &TrainData, pool: &[usize], needs_edges: bool) -> BTreeSet<NodeIx> {
    pool.iter()
        .flat_map(|&s| data.anchors(s, needs_edges).map(|a| a.concept))
        .collect()
}

/// Draws `batch_size` sentences from `pool` without replacement, one
/// uniformly chosen anchor each, rejecting sentences whose anchor concept
/// is already in the batch.
pub fn assemble_batch(data: &TrainData, pool: &[usize], setup: &TrainSetup, rng: &mut SeededRng) -> Result<TrainingBatch> {
    let b = setup.train.batch_size;
    let model = &setup.model;
    let needs_edges = model.config.pathway.needs_edges();
    let distinct = anchorable_concepts(data, pool, needs_edges).len();
    if distinct < b {
        return Err(Error::Config(format!(
            "batch size {b} exceeds the {distinct} distinct anchorable concepts"
        )));
    }

    let mut remaining: Vec<usize> = pool.to_vec();
    let mut rejected = Vec::new();
    let mut used = BTreeSet::new();
    let mut picks: Vec<(usize, Anchor)> = Vec::with_capacity(b);
    while picks.len() < b && !remaining.is_empty() {
        let s = remaining.swap_remove(rng.gen_range(0..remaining.len()));
        let anchors: Vec<&Anchor> = data.anchors(s, needs_edges).collect();
        if anchors.is_empty() {
            continue;
        }
        let a = *anchors[rng.gen_range(0..anchors.len())];
        if used.insert(a.concept) {
            picks.push((s, a));
        } else {
            rejected.push(s);
        }
    }
    // Every sentence was drawn once; finish from the rejected ones, now
    // restricted to their unused concepts. Reached only when collisions
    // exhausted the pool.
    while picks.len() < b {
        let s = rejected.swap_remove(rng.gen_range(0..rejected.len()));
        let fresh: Vec<&Anchor> = data
            .anchors(s, needs_edges)
            .filter(|a| !used.contains(&a.concept))
            .collect();
        if fresh.is_empty() {
            continue;
        }
        let a = *fresh[rng.gen_range(0..fresh.len())];
        used.insert(a.concept);
        picks.push((s, a));
    }

    let mut items = Vec::with_capacity(b);
    for (s, a) in picks {
        let masked = apply_mlm_mask(&data.encoded[s].ids, model.vocab_size, rng, setup.objective.select_ratio);
        let sg = data.kg.local_subgraph(a.concept, setup.train.neighbor_cap, rng)?;
        let graph = sample_graph_inputs(&data.kg, &data.vocab, &sg, model.config.pathway, model.config.max_len, rng)?;
        items.push(TrainingItem {
            sentence: s,
            ids: masked.ids,
            labels: masked.labels,
            span: (a.start, a.end),
            concept: a.concept,
            graph,
        });
    }
    let partners = (setup.objective.align == AlignKind::Classification).then(|| sample_negative_partners(b, rng));
    Ok(TrainingBatch { items, partners })
}
