//! The on-disk data bundle: graph, training corpus, held-out corpus and
//! evaluation mentions.

use std::path::Path;

use crate::corpus::{load_corpus, load_corpus_file, load_eval_mentions, load_eval_mentions_file};
use crate::corpus::{AnnotatedSentence, EvalMention, GeneratedData};
use crate::error::Result;
use crate::kg::KnowledgeGraph;

#[derive(Debug, Clone)]
pub struct Dataset {
    pub kg: KnowledgeGraph,
    pub train: Vec<AnnotatedSentence>,
    /// Sentences not used for training; one in-context mention per concept
    /// is probed by cross-modal retrieval.
    pub heldout: Vec<AnnotatedSentence>,
    pub eval_mentions: Vec<EvalMention>,
}

impl Dataset {
    /// Reads the files written by the generator. The held-out corpus and
    /// eval mentions are optional.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let kg = KnowledgeGraph::load_dir(dir)?;
        let train = load_corpus_file(&dir.join("corpus.jsonl"))?;
        let heldout_path = dir.join("heldout_corpus.jsonl");
        let heldout = if heldout_path.exists() {
            load_corpus_file(&heldout_path)?
        } else {
            Vec::new()
        };
        let eval_path = dir.join("eval_mentions.jsonl");
        let eval_mentions = if eval_path.exists() {
            load_eval_mentions_file(&eval_path)?
        } else {
            Vec::new()
        };
        Ok(Self {
            kg,
            train,
            heldout,
            eval_mentions,
        })
    }

    /// Parses generator output held in memory.
    pub fn from_generated(g: &GeneratedData) -> Result<Self> {
        Ok(Self {
            kg: KnowledgeGraph::load(g.triples.as_bytes(), g.synonyms.as_bytes(), Some(g.relations.as_bytes()))?,
            train: load_corpus(g.corpus.as_bytes())?,
            heldout: load_corpus(g.heldout_corpus.as_bytes())?,
            eval_mentions: load_eval_mentions(g.eval_mentions.as_bytes())?,
        })
    }
}
