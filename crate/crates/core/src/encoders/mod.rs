//! Text encoder, entity pooling and the graph-side representation pathways.
//!
//! All forward passes record onto a [`Tape`](crate::tensor::Tape) through a
//! [`Binder`], so the same code serves training and inference. Parameter
//! names are prefixed by component: `lm.` for the language model (the only
//! part kept by the LM export), `pool.`, `gnn.`, `rel.` and `cls.` for the
//! rest.

mod graph;
mod pooling;
mod text;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{truncated_normal, Matrix, ParamStore};

pub use graph::{
    gnn_forward, graph_rep, node_init, sample_graph_inputs, GnnOutput, GraphInput, GraphOutput,
};
pub use pooling::pool_entity;
pub use text::{embed_names, lm_encode, Packed};

pub const LM_PREFIX: &str = "lm.";
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormPlacement {
    Pre,
    Post,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingMode {
    Mean,
    Weighted,
    Gat,
    Transformer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pathway {
    Gat,
    Graphsage,
    Linearized,
    Distmult,
    Transe,
    Textual,
}

impl Pathway {
    pub const ALL: [Pathway; 6] = [
        Pathway::Gat,
        Pathway::Graphsage,
        Pathway::Linearized,
        Pathway::Distmult,
        Pathway::Transe,
        Pathway::Textual,
    ];

    /// Translation pathways have nothing to translate from an isolated node.
    pub fn needs_edges(self) -> bool {
        matches!(self, Pathway::Distmult | Pathway::Transe)
    }

    pub fn is_gnn(self) -> bool {
        matches!(self, Pathway::Gat | Pathway::Graphsage)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d: usize,
    pub lm_layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub ffn_mult: usize,
    pub norm: NormPlacement,
    pub tie_mlm_head: bool,
    pub pooling: PoolingMode,
    pub pathway: Pathway,
    pub gnn_layers: usize,
    pub gnn_heads: usize,
    /// Cuts the gradient path from the alignment loss into the LM through
    /// the node-name encodings.
    pub freeze_node_init: bool,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            lm_layers: 2,
            heads: 2,
            max_len: 64,
            ffn_mult: 4,
            norm: NormPlacement::Pre,
            tie_mlm_head: true,
            pooling: PoolingMode::Mean,
            pathway: Pathway::Gat,
            gnn_layers: 3,
            gnn_heads: 2,
            freeze_node_init: false,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.lm_layers == 0 || self.ffn_mult == 0 {
            return bad("d, lm_layers and ffn_mult must be positive".into());
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return bad(format!("d = {} is not divisible by heads = {}", self.d, self.heads));
        }
        if self.pathway.is_gnn() || self.pooling == PoolingMode::Gat {
            if self.gnn_heads == 0 || self.d % self.gnn_heads != 0 {
                return bad(format!(
                    "d = {} is not divisible by gnn_heads = {}",
                    self.d, self.gnn_heads
                ));
            }
        }
        if self.pathway.is_gnn() && self.gnn_layers == 0 {
            return bad("a GNN pathway needs at least one layer".into());
        }
        if self.max_len < 3 {
            return bad("max_len must be at least 3".into());
        }
        if !(self.init_std > 0.0) {
            return bad("init_std must be positive".into());
        }
        Ok(())
    }
}

/// Architecture plus the data-dependent sizes needed to lay out parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab_size: usize,
    pub num_relations: usize,
    /// Adds the pair-classification head used by that alignment objective.
    pub classifier: bool,
}

pub fn is_lm_param(name: &str) -> bool {
    name.starts_with(LM_PREFIX)
}

fn block_params(store: &mut ParamStore, prefix: &str, d: usize, ffn: usize, std: f64, rng: &mut SeededRng) {
    for w in ["wq", "wk", "wv", "wo"] {
        store.insert(format!("{prefix}.{w}"), truncated_normal(d, d, std, rng));
    }
    for b in ["bq", "bk", "bv", "bo", "b2", "ln1.b", "ln2.b"] {
        store.insert(format!("{prefix}.{b}"), Matrix::zeros((1, d)));
    }
    store.insert(format!("{prefix}.ln1.g"), Matrix::ones((1, d)));
    store.insert(format!("{prefix}.ln2.g"), Matrix::ones((1, d)));
    store.insert(format!("{prefix}.w1"), truncated_normal(d, ffn, std, rng));
    store.insert(format!("{prefix}.b1"), Matrix::zeros((1, ffn)));
    store.insert(format!("{prefix}.w2"), truncated_normal(ffn, d, std, rng));
}

fn gat_params(store: &mut ParamStore, prefix: &str, d: usize, std: f64, rng: &mut SeededRng) {
    for w in ["w_src", "w_dst", "w_self"] {
        store.insert(format!("{prefix}.{w}"), truncated_normal(d, d, std, rng));
    }
    store.insert(format!("{prefix}.att"), truncated_normal(1, d, std, rng));
}

impl Model {
    pub fn new(config: ModelConfig, vocab_size: usize, num_relations: usize, classifier: bool) -> Result<Self> {
        config.validate()?;
        if vocab_size <= crate::corpus::Vocabulary::NUM_SPECIALS {
            return Err(Error::Config("vocabulary has no regular words".into()));
        }
        Ok(Self {
            config,
            vocab_size,
            num_relations,
            classifier,
        })
    }

    pub fn d(&self) -> usize {
        self.config.d
    }

    /// Fresh parameters: truncated normal for matrices, zeros for biases,
    /// ones for layer-norm gains.
    pub fn init_params(&self, rng: &mut SeededRng) -> ParamStore {
        let c = &self.config;
        let (d, std) = (c.d, c.init_std);
        let ffn = d * c.ffn_mult;
        let mut s = ParamStore::new();
        s.insert("lm.tok_emb", truncated_normal(self.vocab_size, d, std, rng));
        s.insert("lm.pos_emb", truncated_normal(c.max_len, d, std, rng));
        s.insert("lm.emb_ln.g", Matrix::ones((1, d)));
        s.insert("lm.emb_ln.b", Matrix::zeros((1, d)));
        for l in 0..c.lm_layers {
            block_params(&mut s, &format!("lm.layer{l}"), d, ffn, std, rng);
        }
        if c.norm == NormPlacement::Pre {
            s.insert("lm.final_ln.g", Matrix::ones((1, d)));
            s.insert("lm.final_ln.b", Matrix::zeros((1, d)));
        }
        s.insert("lm.mlm.w", truncated_normal(d, d, std, rng));
        s.insert("lm.mlm.b", Matrix::zeros((1, d)));
        s.insert("lm.mlm.ln.g", Matrix::ones((1, d)));
        s.insert("lm.mlm.ln.b", Matrix::zeros((1, d)));
        s.insert("lm.mlm.bias", Matrix::zeros((1, self.vocab_size)));
        if !c.tie_mlm_head {
            s.insert("lm.mlm.out", truncated_normal(d, self.vocab_size, std, rng));
        }

        match c.pooling {
            PoolingMode::Mean => {}
            PoolingMode::Weighted => s.insert("pool.w", truncated_normal(d, 1, std, rng)),
            PoolingMode::Gat => gat_params(&mut s, "pool.gat", d, std, rng),
            PoolingMode::Transformer => block_params(&mut s, "pool.tf", d, ffn, std, rng),
        }

        match c.pathway {
            Pathway::Gat => {
                for l in 0..c.gnn_layers {
                    gat_params(&mut s, &format!("gnn.layer{l}"), d, std, rng);
                }
            }
            Pathway::Graphsage => {
                for l in 0..c.gnn_layers {
                    s.insert(format!("gnn.layer{l}.w_nbr"), truncated_normal(d, d, std, rng));
                    s.insert(format!("gnn.layer{l}.w_self"), truncated_normal(d, d, std, rng));
                }
            }
            Pathway::Distmult => {
                // Multiplicative relations start near identity so the
                // translated names are not scaled towards zero.
                let noise = truncated_normal(self.num_relations.max(1), d, std, rng);
                s.insert("rel.emb", noise.mapv(|x| 1.0 + x));
            }
            Pathway::Transe => {
                s.insert("rel.emb", truncated_normal(self.num_relations.max(1), d, std, rng));
            }
            Pathway::Linearized | Pathway::Textual => {}
        }

        if self.classifier {
            s.insert("cls.w", truncated_normal(2 * d, 1, std, rng));
            s.insert("cls.b", Matrix::zeros((1, 1)));
        }
        s
    }
}
