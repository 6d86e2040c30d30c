//! Zero-shot entity linking, cross-modal retrieval, masked-token accuracy
//! and report emission.

mod report;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{encode, AnnotatedSentence, EvalMention, TokenId, Vocabulary};
use crate::dataset::Dataset;
use crate::encoders::{embed_names, pool_entity, sample_graph_inputs, Model};
use crate::error::{Error, Result};
use crate::kg::{KnowledgeGraph, NodeIx};
use crate::objectives::apply_mlm_mask;
use crate::rng::{derived, SeededRng};
use crate::tensor::{Binder, Matrix, ParamStore, Tape};

pub use report::{EvalReport, MetricRecord};

const CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Cutoffs reported for entity-linking accuracy.
    pub ks: Vec<usize>,
    /// Cutoffs reported for cross-modal recall.
    pub recall_ks: Vec<usize>,
    /// Sentences sampled per corpus for masked-token accuracy.
    pub mta_sentences: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ks: vec![1, 5],
            recall_ks: vec![1],
            mta_sentences: 500,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ks.contains(&0) || self.recall_ks.contains(&0) {
            return Err(Error::Config("evaluation cutoffs must be at least 1".into()));
        }
        if self.mta_sentences == 0 {
            return Err(Error::Config("eval.mta_sentences must be at least 1".into()));
        }
        Ok(())
    }
}

/// Unit-normalized name embeddings, one row per (concept, name) pair in
/// graph order.
#[derive(Debug, Clone)]
pub struct DictionaryIndex {
    pub concepts: Vec<NodeIx>,
    pub names: Vec<String>,
    pub embeddings: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub mention: String,
    pub gold: String,
    /// Concept ids, best first, one entry per concept.
    pub candidates: Vec<String>,
}

/// Scales every non-zero row to unit length.
pub fn normalize_rows(m: &mut Matrix) {
    for mut r in m.rows_mut() {
        let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            r.mapv_inplace(|x| x / n);
        }
    }
}

/// Left-to-right dot product; the fixed summation order keeps scores
/// reproducible across call sites.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Unit embeddings of token sequences. Each distinct sequence is encoded
/// once, so repeated names get bit-identical rows and tie exactly.
fn embed_texts(model: &Model, params: &ParamStore, texts: &[Vec<TokenId>]) -> Result<Matrix> {
    let mut slot: BTreeMap<&[TokenId], usize> = BTreeMap::new();
    let mut unique: Vec<Vec<TokenId>> = Vec::new();
    let rows: Vec<usize> = texts
        .iter()
        .map(|t| {
            *slot.entry(t.as_slice()).or_insert_with(|| {
                unique.push(t.clone());
                unique.len() - 1
            })
        })
        .collect();
    let mut m = embed_names(model, params, &unique)?;
    normalize_rows(&mut m);
    Ok(m.select(ndarray::Axis(0), &rows))
}

/// Encodes every synonym as `[CLS] name [SEP]`, mean-pools the body and
/// normalizes. Names without tokens are skipped.
pub fn embed_dictionary(model: &Model, params: &ParamStore, kg: &KnowledgeGraph, vocab: &Vocabulary) -> Result<DictionaryIndex> {
    let mut concepts = Vec::new();
    let mut names = Vec::new();
    let mut ids = Vec::new();
    for v in 0..kg.num_nodes() {
        for name in kg.synonyms(v) {
            let t = vocab.encode_text(name);
            if t.is_empty() {
                log::warn!("skipping empty name of concept `{}`", kg.id(v));
                continue;
            }
            concepts.push(v);
            names.push(name.clone());
            ids.push(t);
        }
    }
    if ids.is_empty() {
        return Err(Error::InvalidInput("dictionary has no encodable names".into()));
    }
    let embeddings = embed_texts(model, params, &ids)?;
    Ok(DictionaryIndex {
        concepts,
        names,
        embeddings,
    })
}

/// Top-`k` concepts for each unit query row, scored by the best cosine over
/// the concept's names. Equal scores keep the order in which concepts first
/// appear in the index.
pub fn rank_concepts(index: &DictionaryIndex, queries: &Matrix, k: usize) -> Vec<Vec<NodeIx>> {
    let mut order: Vec<NodeIx> = Vec::new();
    let mut slot: BTreeMap<NodeIx, usize> = BTreeMap::new();
    for &c in &index.concepts {
        slot.entry(c).or_insert_with(|| {
            order.push(c);
            order.len() - 1
        });
    }
    let rows: Vec<&[f64]> = index
        .embeddings
        .rows()
        .into_iter()
        .map(|r| r.to_slice().expect("standard layout"))
        .collect();
    queries
        .rows()
        .into_iter()
        .map(|q| {
            let q = q.to_slice().expect("standard layout");
            let mut best = vec![f64::NEG_INFINITY; order.len()];
            for (row, &c) in rows.iter().zip(&index.concepts) {
                let s = dot(row, q);
                let b = &mut best[slot[&c]];
                if s > *b {
                    *b = s;
                }
            }
            let mut ranked: Vec<usize> = (0..order.len()).collect();
            ranked.sort_by(|&a, &b| best[b].total_cmp(&best[a]));
            ranked.into_iter().take(k).map(|i| order[i]).collect()
        })
        .collect()
}

/// Embeds each mention like a dictionary name and retrieves the top-`k`
/// concepts.
pub fn link_mentions(
    model: &Model,
    params: &ParamStore,
    index: &DictionaryIndex,
    kg: &KnowledgeGraph,
    mentions: &[EvalMention],
    vocab: &Vocabulary,
    k: usize,
) -> Result<Vec<RankingResult>> {
    if k == 0 {
        return Err(Error::InvalidInput("k must be at least 1".into()));
    }
    let ids: Vec<Vec<TokenId>> = mentions
        .iter()
        .map(|m| {
            let t = vocab.encode_text(&m.mention);
            if t.is_empty() {
                Err(Error::InvalidInput(format!("mention `{}` has no tokens", m.mention)))
            } else {
                Ok(t)
            }
        })
        .collect::<Result<_>>()?;
    if ids.is_empty() {
        return Ok(Vec::new());
    }
    let queries = embed_texts(model, params, &ids)?;
    Ok(rank_concepts(index, &queries, k)
        .into_iter()
        .zip(mentions)
        .map(|(ranked, m)| RankingResult {
            mention: m.mention.clone(),
            gold: m.gold.clone(),
            candidates: ranked.into_iter().map(|c| kg.id(c).to_string()).collect(),
        })
        .collect())
}

/// Fraction of results whose gold concept is among the first `k`
/// candidates.
pub fn accuracy_at_k(results: &[RankingResult], k: usize) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::InvalidInput("no ranking results".into()));
    }
    if k == 0 {
        return Err(Error::InvalidInput("k must be at least 1".into()));
    }
    let hits = results
        .iter()
        .filter(|r| r.candidates.iter().take(k).any(|c| *c == r.gold))
        .count();
    Ok(hits as f64 / results.len() as f64)
}

/// One in-context mention of a concept.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Probe {
    pub concept: NodeIx,
    pub ids: Vec<TokenId>,
    /// Span over `ids`, already past `[CLS]`.
    pub span: (usize, usize),
}

/// One probe per concept mentioned in `sentences`, chosen uniformly among
/// that concept's surviving mentions. Ordered by concept.
pub fn sample_probes(
    kg: &KnowledgeGraph,
    vocab: &Vocabulary,
    sentences: &[AnnotatedSentence],
    max_len: usize,
    rng: &mut SeededRng,
) -> Result<Vec<Probe>> {
    let mut by_concept: BTreeMap<NodeIx, Vec<Probe>> = BTreeMap::new();
    for s in sentences {
        let enc = encode(s, vocab, max_len);
        for m in &enc.mentions {
            let c = kg.node(&m.concept)?;
            by_concept.entry(c).or_default().push(Probe {
                concept: c,
                ids: enc.ids.clone(),
                span: (m.start, m.end),
            });
        }
    }
    Ok(by_concept
        .into_values()
        .map(|mut v| {
            let i = rng.gen_range(0..v.len());
            v.swap_remove(i)
        })
        .collect())
}

/// Rank of row `i`'s own column among row `i`'s scores: strictly better
/// columns count, as do equal ones with a lower index.
fn own_rank(sim: &Matrix, i: usize) -> usize {
    let own = sim[[i, i]];
    sim.row(i)
        .iter()
        .enumerate()
        .filter(|&(j, &s)| j != i && (s > own || (s == own && j < i)))
        .count()
}

/// Fraction of entity rows whose own graph row is within the top `k` by
/// cosine similarity.
pub fn recall_at_k(e: &Matrix, g: &Matrix, k: usize) -> Result<f64> {
    if e.dim() != g.dim() || e.nrows() == 0 {
        return Err(Error::InvalidInput("entity and graph embeddings must be equally sized and non-empty".into()));
    }
    if k == 0 {
        return Err(Error::InvalidInput("k must be at least 1".into()));
    }
    let (mut e, mut g) = (e.clone(), g.clone());
    normalize_rows(&mut e);
    normalize_rows(&mut g);
    let sim = e.dot(&g.t());
    let hits = (0..sim.nrows()).filter(|&i| own_rank(&sim, i) < k).count();
    Ok(hits as f64 / sim.nrows() as f64)
}

/// Entity embeddings of the probes (uncorrupted context) and graph
/// embeddings of their concepts. Probes a translation pathway cannot
/// represent are skipped.
pub fn probe_embeddings(
    model: &Model,
    params: &ParamStore,
    kg: &KnowledgeGraph,
    vocab: &Vocabulary,
    probes: &[Probe],
    neighbor_cap: usize,
    rng: &mut SeededRng,
) -> Result<(Matrix, Matrix)> {
    let pathway = model.config.pathway;
    let usable: Vec<&Probe> = probes
        .iter()
        .filter(|p| {
            let ok = !pathway.needs_edges() || kg.indegree(p.concept) > 0;
            if !ok {
                log::warn!("skipping isolated concept `{}`", kg.id(p.concept));
            }
            ok
        })
        .collect();
    if usable.is_empty() {
        return Err(Error::InvalidInput("no probes to embed".into()));
    }
    let d = model.d();
    let mut e = Matrix::zeros((usable.len(), d));
    let mut g = Matrix::zeros((usable.len(), d));
    for (c, chunk) in usable.chunks(CHUNK).enumerate() {
        let mut graphs = Vec::with_capacity(chunk.len());
        for p in chunk {
            let sg = kg.local_subgraph(p.concept, neighbor_cap, rng)?;
            graphs.push(sample_graph_inputs(kg, vocab, &sg, pathway, model.config.max_len, rng)?);
        }
        let tape = Tape::new();
        let b = Binder::new(&tape, params);
        let seqs: Vec<&[TokenId]> = chunk.iter().map(|p| p.ids.as_slice()).collect();
        let packed = model.encode_packed(&b, &seqs)?;
        let spans: Vec<(usize, usize)> = chunk
            .iter()
            .enumerate()
            .map(|(i, p)| (packed.row(i, p.span.0), packed.row(i, p.span.1)))
            .collect();
        let ev = pool_entity(model, &b, packed.h, &spans, model.config.pooling)?.value();
        let gv = model.graph_reps(&b, &graphs)?.reps.value();
        let start = c * CHUNK;
        e.slice_mut(ndarray::s![start..start + chunk.len(), ..]).assign(&*ev);
        g.slice_mut(ndarray::s![start..start + chunk.len(), ..]).assign(&*gv);
    }
    Ok((e, g))
}

/// Recall@k of matching graph embeddings among all probed concepts.
#[allow(clippy::too_many_arguments)]
pub fn cross_modal_recall(
    model: &Model,
    params: &ParamStore,
    kg: &KnowledgeGraph,
    vocab: &Vocabulary,
    probes: &[Probe],
    k: usize,
    neighbor_cap: usize,
    rng: &mut SeededRng,
) -> Result<f64> {
    let (e, g) = probe_embeddings(model, params, kg, vocab, probes, neighbor_cap, rng)?;
    recall_at_k(&e, &g, k)
}

/// Fraction of corrupted positions whose most likely token is the
/// original one.
pub fn masked_token_accuracy(
    model: &Model,
    params: &ParamStore,
    sentences: &[Vec<TokenId>],
    select_ratio: f64,
    rng: &mut SeededRng,
) -> Result<f64> {
    if sentences.is_empty() {
        return Err(Error::InvalidInput("no sentences to evaluate".into()));
    }
    let masked: Vec<_> = sentences
        .iter()
        .map(|s| apply_mlm_mask(s, model.vocab_size, rng, select_ratio))
        .collect();
    let (mut hits, mut total) = (0usize, 0usize);
    for chunk in masked.chunks(CHUNK) {
        let tape = Tape::new();
        let b = Binder::new(&tape, params);
        let seqs: Vec<&[TokenId]> = chunk.iter().map(|m| m.ids.as_slice()).collect();
        let packed = model.encode_packed(&b, &seqs)?;
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (i, m) in chunk.iter().enumerate() {
            for (pos, t) in m.selected() {
                rows.push(packed.row(i, pos));
                labels.push(t);
            }
        }
        if rows.is_empty() {
            continue;
        }
        let logits = model.mlm_logits(&b, packed.h, &rows).value();
        for (r, &label) in logits.rows().into_iter().zip(&labels) {
            let argmax = r
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (j, &x)| if x > acc.1 { (j, x) } else { acc })
                .0;
            hits += usize::from(argmax == label);
        }
        total += labels.len();
    }
    if total == 0 {
        return Err(Error::InvalidInput("no positions were selected for masking".into()));
    }
    Ok(hits as f64 / total as f64)
}

/// Inputs shared by every metric of one evaluation run.
pub struct EvalContext<'a> {
    pub model: &'a Model,
    pub params: &'a ParamStore,
    pub vocab: &'a Vocabulary,
    pub data: &'a Dataset,
    /// Whether `params` still holds the graph encoder; LM-only exports skip
    /// cross-modal retrieval.
    pub has_graph: bool,
    pub neighbor_cap: usize,
    pub select_ratio: f64,
}

fn record(metric: &str, value: f64, k: Option<usize>, split: &str) -> MetricRecord {
    MetricRecord {
        metric: metric.into(),
        value,
        k,
        split: split.into(),
    }
}

fn encode_sample(
    sentences: &[AnnotatedSentence],
    vocab: &Vocabulary,
    max_len: usize,
    cap: usize,
    rng: &mut SeededRng,
) -> Vec<Vec<TokenId>> {
    let mut picked = if sentences.len() > cap {
        rand::seq::index::sample(rng, sentences.len(), cap).into_vec()
    } else {
        (0..sentences.len()).collect()
    };
    picked.sort_unstable();
    picked.into_iter().map(|i| encode(&sentences[i], vocab, max_len).ids).collect()
}

/// Zero-shot entity linking on the evaluation mentions, cross-modal recall
/// on training and held-out probes, and masked-token accuracy on both
/// corpora. Splits with no data are skipped.
pub fn evaluate(ctx: &EvalContext<'_>, cfg: &EvalConfig, seed: u64) -> Result<Vec<MetricRecord>> {
    let EvalContext { model, params, vocab, data, .. } = *ctx;
    let kg = &data.kg;
    let max_len = model.config.max_len;
    let mut out = Vec::new();

    if data.eval_mentions.is_empty() {
        log::warn!("no evaluation mentions; skipping entity linking");
    } else {
        let index = embed_dictionary(model, params, kg, vocab)?;
        let k_max = cfg.ks.iter().copied().max().unwrap_or(1);
        let ranked = link_mentions(model, params, &index, kg, &data.eval_mentions, vocab, k_max)?;
        for &k in &cfg.ks {
            out.push(record("el_acc", accuracy_at_k(&ranked, k)?, Some(k), "heldout"));
        }
    }

    if ctx.has_graph {
        for (split, sentences) in [("train", &data.train), ("heldout", &data.heldout)] {
            if sentences.is_empty() {
                continue;
            }
            let mut rng = derived(seed, &format!("probes.{split}"));
            let probes = sample_probes(kg, vocab, sentences, max_len, &mut rng)?;
            let (e, g) = probe_embeddings(model, params, kg, vocab, &probes, ctx.neighbor_cap, &mut rng)?;
            for &k in &cfg.recall_ks {
                out.push(record("cross_modal_recall", recall_at_k(&e, &g, k)?, Some(k), split));
            }
        }
    }

    for (split, sentences) in [("train", &data.train), ("heldout", &data.heldout)] {
        if sentences.is_empty() {
            continue;
        }
        let mut rng = derived(seed, &format!("mta.{split}"));
        let sample = encode_sample(sentences, vocab, max_len, cfg.mta_sentences, &mut rng);
        let acc = masked_token_accuracy(model, params, &sample, ctx.select_ratio, &mut rng)?;
        out.push(record("masked_token_accuracy", acc, None, split));
    }
    Ok(out)
}
