//! Graph-side concept representations.

use ndarray::Array1;

use super::{Model, Pathway, LEAKY_SLOPE};
use crate::corpus::{TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::kg::{KnowledgeGraph, NodeIx, RelIx, Subgraph};
use crate::rng::SeededRng;
use crate::tensor::{Binder, Matrix, ParamStore, Tape, Var};

/// Everything random about one subgraph's encoding, drawn up front so the
/// forward pass is a pure function of parameters and inputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphInput {
    pub center: NodeIx,
    pub center_name: Vec<TokenId>,
    /// Sampled name of each distinct neighbor, in first-appearance order.
    pub neighbor_names: Vec<Vec<TokenId>>,
    /// `(neighbor slot, relation)` per edge, in subgraph order.
    pub edges: Vec<(usize, RelIx)>,
    /// Token ids of the linearized subgraph; empty unless the pathway reads it.
    pub linearized: Vec<TokenId>,
}

fn name_ids(vocab: &Vocabulary, name: &str) -> Result<Vec<TokenId>> {
    let ids = vocab.encode_text(name);
    if ids.is_empty() {
        return Err(Error::InvalidInput(format!("name `{name}` has no tokens")));
    }
    Ok(ids)
}

/// `[CLS] s_v [SEP]` followed by as many whole `s_u r s_v [SEP]` segments
/// as fit in `max_len`.
fn encode_linearization(
    kg: &KnowledgeGraph,
    vocab: &Vocabulary,
    sg: &Subgraph,
    max_len: usize,
    rng: &mut SeededRng,
) -> Result<Vec<TokenId>> {
    let lin = kg.linearization(sg, rng)?;
    let mut ids = vec![Vocabulary::CLS];
    let center = vocab.encode_text(&lin.center_name);
    ids.extend(center.iter().take(max_len - 2));
    ids.push(Vocabulary::SEP);
    for (u, r, v) in &lin.edges {
        let mut seg = vocab.encode_text(u);
        seg.extend(vocab.encode_text(r));
        seg.extend(vocab.encode_text(v));
        seg.push(Vocabulary::SEP);
        if ids.len() + seg.len() > max_len {
            break;
        }
        ids.extend(seg);
    }
    Ok(ids)
}

pub fn sample_graph_inputs(
    kg: &KnowledgeGraph,
    vocab: &Vocabulary,
    sg: &Subgraph,
    pathway: Pathway,
    max_len: usize,
    rng: &mut SeededRng,
) -> Result<GraphInput> {
    if pathway.needs_edges() && sg.edges.is_empty() {
        return Err(Error::InvalidInput(format!(
            "concept `{}` has no incoming edges to translate",
            kg.id(sg.center)
        )));
    }
    if pathway == Pathway::Linearized {
        return Ok(GraphInput {
            center: sg.center,
            center_name: Vec::new(),
            neighbor_names: Vec::new(),
            edges: Vec::new(),
            linearized: encode_linearization(kg, vocab, sg, max_len, rng)?,
        });
    }
    let center_name = name_ids(vocab, kg.sample_synonym(sg.center, rng)?)?;
    let neighbors = sg.neighbors();
    let neighbor_names = neighbors
        .iter()
        .map(|&u| name_ids(vocab, kg.sample_synonym(u, rng)?))
        .collect::<Result<Vec<_>>>()?;
    let edges = sg
        .edges
        .iter()
        .map(|e| {
            let slot = neighbors.iter().position(|&u| u == e.head).expect("head is a neighbor");
            (slot, e.rel)
        })
        .collect();
    Ok(GraphInput {
        center: sg.center,
        center_name,
        neighbor_names,
        edges,
        linearized: Vec::new(),
    })
}

/// Graph representations for a batch, plus per-layer attention weights
/// when the pathway is attention-based.
#[derive(Debug)]
pub struct GraphOutput<'t> {
    pub reps: Var<'t>,
    pub attention: Vec<Matrix>,
}

#[derive(Debug)]
pub struct GnnOutput<'t> {
    pub centers: Var<'t>,
    /// Per layer, `edges × heads` weights; columns sum to one per center.
    pub attention: Vec<Matrix>,
}

fn head_blocks(d: usize, heads: usize) -> Matrix {
    let w = d / heads;
    Matrix::from_shape_fn((d, heads), |(c, h)| if c / w == h { 1.0 } else { 0.0 })
}

/// Attention-weighted messages from `src` rows into `dst` rows along the
/// given edges: `e = aᵀ LeakyReLU(W_src x_u + W_dst x_v)`, softmax over the
/// edges entering each destination, per head. Destinations without edges
/// receive zeros.
pub(crate) fn gat_attend<'t>(
    b: &Binder<'t>,
    prefix: &str,
    src: Var<'t>,
    dst: Var<'t>,
    edge_src: &[usize],
    edge_dst: &[usize],
    heads: usize,
) -> (Var<'t>, Option<Var<'t>>) {
    let (n_dst, d) = dst.shape();
    if edge_src.is_empty() {
        return (b.constant(Matrix::zeros((n_dst, d))), None);
    }
    let p = |n: &str| b.param(&format!("{prefix}.{n}"));
    let blk = b.constant(head_blocks(d, heads));
    let s = src.matmul(p("w_src")).gather_rows(edge_src);
    let t = dst.matmul(p("w_dst")).gather_rows(edge_dst);
    let alpha = s
        .add(t)
        .leaky_relu(LEAKY_SLOPE)
        .mul_row(p("att"))
        .matmul(blk)
        .segment_softmax(edge_dst);
    let agg = s.mul(alpha.matmul(blk.t())).scatter_add_rows(edge_dst, n_dst);
    (agg, Some(alpha))
}

/// Star-graph message passing. `edge_src` indexes rows of `neighbors`,
/// `edge_dst` rows of `centers`. Neighbors only take the self-update.
pub fn gnn_forward<'t>(
    model: &Model,
    b: &Binder<'t>,
    centers: Var<'t>,
    neighbors: Option<Var<'t>>,
    edge_src: &[usize],
    edge_dst: &[usize],
) -> Result<GnnOutput<'t>> {
    let c = &model.config;
    if edge_src.len() != edge_dst.len() {
        return Err(Error::InvalidInput("edge endpoint lists differ in length".into()));
    }
    let n_nbr = neighbors.map_or(0, |n| n.shape().0);
    if let Some(&u) = edge_src.iter().find(|&&u| u >= n_nbr) {
        return Err(Error::InvalidInput(format!("edge source {u} has no init vector")));
    }
    let n_ctr = centers.shape().0;
    if let Some(&v) = edge_dst.iter().find(|&&v| v >= n_ctr) {
        return Err(Error::InvalidInput(format!("edge target {v} has no init vector")));
    }
    let mut deg = vec![0.0; n_ctr];
    for &v in edge_dst {
        deg[v] += 1.0;
    }
    let inv_deg = Matrix::from_shape_fn((n_ctr, 1), |(v, _)| if deg[v] > 0.0 { 1.0 / deg[v] } else { 0.0 });

    let (mut ctr, mut nbr) = (centers, neighbors);
    let mut attention = Vec::new();
    for l in 0..c.gnn_layers {
        let prefix = format!("gnn.layer{l}");
        let w_self = b.param(&format!("{prefix}.w_self"));
        let agg = match (c.pathway, nbr) {
            (_, None) => None,
            (Pathway::Gat, Some(n)) => {
                let (agg, alpha) = gat_attend(b, &prefix, n, ctr, edge_src, edge_dst, c.gnn_heads);
                if let Some(a) = alpha {
                    attention.push((*a.value()).clone());
                }
                Some(agg)
            }
            (Pathway::Graphsage, Some(n)) if !edge_src.is_empty() => Some(
                n.matmul(b.param(&format!("{prefix}.w_nbr")))
                    .gather_rows(edge_src)
                    .scatter_add_rows(edge_dst, n_ctr)
                    .mul_col(b.constant(inv_deg.clone())),
            ),
            (Pathway::Graphsage, Some(_)) => None,
            (p, _) => {
                return Err(Error::Config(format!("{p:?} is not a message-passing pathway")));
            }
        };
        let own = ctr.matmul(w_self);
        ctr = match agg {
            Some(a) => a.add(own),
            None => own,
        }
        .leaky_relu(LEAKY_SLOPE);
        nbr = nbr.map(|n| n.matmul(w_self).leaky_relu(LEAKY_SLOPE));
    }
    Ok(GnnOutput {
        centers: ctr,
        attention,
    })
}

impl Model {
    fn node_states<'t>(&self, b: &Binder<'t>, names: &[&[TokenId]]) -> Result<Var<'t>> {
        let init = self.encode_names(b, names)?;
        Ok(if self.config.freeze_node_init {
            init.detach()
        } else {
            init
        })
    }

    /// One graph representation per input, following the configured pathway.
    pub fn graph_reps<'t>(&self, b: &Binder<'t>, items: &[GraphInput]) -> Result<GraphOutput<'t>> {
        if items.is_empty() {
            return Err(Error::InvalidInput("no graph inputs".into()));
        }
        let n = items.len();
        match self.config.pathway {
            Pathway::Gat | Pathway::Graphsage => {
                let mut names: Vec<&[TokenId]> = items.iter().map(|g| g.center_name.as_slice()).collect();
                let (mut src, mut dst) = (Vec::new(), Vec::new());
                for (i, g) in items.iter().enumerate() {
                    let offset = names.len() - n;
                    names.extend(g.neighbor_names.iter().map(|s| s.as_slice()));
                    for &(slot, _) in &g.edges {
                        src.push(offset + slot);
                        dst.push(i);
                    }
                }
                let init = self.node_states(b, &names)?;
                let centers = init.gather_rows(&(0..n).collect::<Vec<_>>());
                let neighbors = (names.len() > n).then(|| init.gather_rows(&(n..names.len()).collect::<Vec<_>>()));
                let out = gnn_forward(self, b, centers, neighbors, &src, &dst)?;
                Ok(GraphOutput {
                    reps: out.centers,
                    attention: out.attention,
                })
            }
            Pathway::Linearized => {
                let seqs: Vec<&[TokenId]> = items.iter().map(|g| g.linearized.as_slice()).collect();
                let packed = self.encode_packed(b, &seqs)?;
                let cls: Vec<usize> = packed.segments.iter().map(|s| s.start).collect();
                Ok(GraphOutput {
                    reps: packed.h.gather_rows(&cls),
                    attention: Vec::new(),
                })
            }
            Pathway::Distmult | Pathway::Transe => {
                let mut names: Vec<&[TokenId]> = Vec::new();
                let (mut src, mut rels, mut groups) = (Vec::new(), Vec::new(), Vec::new());
                for g in items {
                    if g.edges.is_empty() {
                        return Err(Error::InvalidInput("translation needs at least one edge".into()));
                    }
                    let offset = names.len();
                    names.extend(g.neighbor_names.iter().map(|s| s.as_slice()));
                    let first = src.len();
                    for &(slot, r) in &g.edges {
                        src.push(offset + slot);
                        rels.push(r);
                    }
                    groups.push((first..src.len()).collect::<Vec<_>>());
                }
                if let Some(&r) = rels.iter().find(|&&r| r >= self.num_relations) {
                    return Err(Error::InvalidInput(format!("relation {r} has no parameters")));
                }
                let heads = self.node_states(b, &names)?.gather_rows(&src);
                let r = b.param("rel.emb").gather_rows(&rels);
                let translated = if self.config.pathway == Pathway::Distmult {
                    heads.mul(r)
                } else {
                    heads.add(r)
                };
                Ok(GraphOutput {
                    reps: translated.group_mean(&groups),
                    attention: Vec::new(),
                })
            }
            Pathway::Textual => {
                let names: Vec<&[TokenId]> = items.iter().map(|g| g.center_name.as_slice()).collect();
                Ok(GraphOutput {
                    reps: self.node_states(b, &names)?,
                    attention: Vec::new(),
                })
            }
        }
    }
}

fn row0(m: &Matrix) -> Array1<f64> {
    m.row(0).to_owned()
}

/// `LM(s_u)`: mean of body states of a sampled synonym's encoding.
pub fn node_init(
    model: &Model,
    params: &ParamStore,
    kg: &KnowledgeGraph,
    vocab: &Vocabulary,
    u: NodeIx,
    rng: &mut SeededRng,
) -> Result<Array1<f64>> {
    let ids = name_ids(vocab, kg.sample_synonym(u, rng)?)?;
    let tape = Tape::new();
    let b = Binder::new(&tape, params);
    let v = model.encode_names(&b, &[&ids])?.value();
    Ok(row0(&v))
}

/// Inference-time graph representation of one subgraph under the model's
/// pathway.
pub fn graph_rep(
    model: &Model,
    params: &ParamStore,
    kg: &KnowledgeGraph,
    vocab: &Vocabulary,
    sg: &Subgraph,
    rng: &mut SeededRng,
) -> Result<Array1<f64>> {
    let input = sample_graph_inputs(kg, vocab, sg, model.config.pathway, model.config.max_len, rng)?;
    let tape = Tape::new();
    let b = Binder::new(&tape, params);
    let v = model.graph_reps(&b, &[input])?.reps.value();
    Ok(row0(&v))
}
