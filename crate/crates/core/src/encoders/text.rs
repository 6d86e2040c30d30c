//! Transformer text encoder over packed sequences and its MLM head.

use super::{Model, NormPlacement};
use crate::corpus::{TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::tensor::{Binder, Matrix, ParamStore, Segment, Tape, Var};

/// Several sequences stacked row-wise; `h` has one row per token.
#[derive(Debug)]
pub struct Packed<'t> {
    pub h: Var<'t>,
    pub segments: Vec<Segment>,
}

impl Packed<'_> {
    /// Absolute row of position `pos` in sequence `seq`.
    pub fn row(&self, seq: usize, pos: usize) -> usize {
        self.segments[seq].start + pos
    }
}

/// One transformer block. Shared by the LM layers and transformer pooling.
pub(crate) fn block<'t>(
    b: &Binder<'t>,
    prefix: &str,
    x: Var<'t>,
    segments: &[Segment],
    valid: &[bool],
    heads: usize,
    norm: NormPlacement,
) -> Var<'t> {
    let p = |n: &str| b.param(&format!("{prefix}.{n}"));
    let attn = |a: Var<'t>| {
        let q = a.matmul(p("wq")).add_row(p("bq"));
        let k = a.matmul(p("wk")).add_row(p("bk"));
        let v = a.matmul(p("wv")).add_row(p("bv"));
        Var::attention(q, k, v, segments, valid, heads)
            .matmul(p("wo"))
            .add_row(p("bo"))
    };
    let ffn = |a: Var<'t>| {
        a.matmul(p("w1"))
            .add_row(p("b1"))
            .gelu()
            .matmul(p("w2"))
            .add_row(p("b2"))
    };
    match norm {
        NormPlacement::Pre => {
            let x = x.add(attn(x.layer_norm(p("ln1.g"), p("ln1.b"))));
            x.add(ffn(x.layer_norm(p("ln2.g"), p("ln2.b"))))
        }
        NormPlacement::Post => {
            let x = x.add(attn(x)).layer_norm(p("ln1.g"), p("ln1.b"));
            x.add(ffn(x)).layer_norm(p("ln2.g"), p("ln2.b"))
        }
    }
}

impl Model {
    fn check_ids(&self, ids: &[TokenId]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::InvalidInput("empty token sequence".into()));
        }
        if ids.len() > self.config.max_len {
            return Err(Error::InvalidInput(format!(
                "sequence of {} tokens exceeds max_len {}",
                ids.len(),
                self.config.max_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::InvalidInput(format!(
                "token id {bad} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        Ok(())
    }

    fn forward_rows<'t>(
        &self,
        b: &Binder<'t>,
        ids: &[TokenId],
        positions: &[usize],
        segments: &[Segment],
        valid: &[bool],
    ) -> Var<'t> {
        let c = &self.config;
        let mut x = b
            .param("lm.tok_emb")
            .gather_rows(ids)
            .add(b.param("lm.pos_emb").gather_rows(positions))
            .layer_norm(b.param("lm.emb_ln.g"), b.param("lm.emb_ln.b"));
        for l in 0..c.lm_layers {
            x = block(b, &format!("lm.layer{l}"), x, segments, valid, c.heads, c.norm);
        }
        if c.norm == NormPlacement::Pre {
            x = x.layer_norm(b.param("lm.final_ln.g"), b.param("lm.final_ln.b"));
        }
        x
    }

    /// Encodes full sequences (already wrapped in `[CLS] .. [SEP]`) packed
    /// into one matrix. Attention never crosses sequence boundaries.
    pub fn encode_packed<'t>(&self, b: &Binder<'t>, seqs: &[&[TokenId]]) -> Result<Packed<'t>> {
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::with_capacity(seqs.len());
        for s in seqs {
            self.check_ids(s)?;
            segments.push(Segment {
                start: ids.len(),
                len: s.len(),
            });
            ids.extend_from_slice(s);
            positions.extend(0..s.len());
        }
        if ids.is_empty() {
            return Err(Error::InvalidInput("nothing to encode".into()));
        }
        let valid = vec![true; ids.len()];
        let h = self.forward_rows(b, &ids, &positions, &segments, &valid);
        Ok(Packed { h, segments })
    }

    /// Mean of body-token states for each `[CLS] name [SEP]` encoding; one
    /// output row per name. Bodies longer than `max_len - 2` are truncated.
    pub fn encode_names<'t>(&self, b: &Binder<'t>, names: &[&[TokenId]]) -> Result<Var<'t>> {
        let body_cap = self.config.max_len - 2;
        let wrapped: Vec<Vec<TokenId>> = names
            .iter()
            .map(|n| {
                if n.is_empty() {
                    return Err(Error::InvalidInput("empty name".into()));
                }
                let mut s = Vec::with_capacity(n.len().min(body_cap) + 2);
                s.push(Vocabulary::CLS);
                s.extend_from_slice(&n[..n.len().min(body_cap)]);
                s.push(Vocabulary::SEP);
                Ok(s)
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&[TokenId]> = wrapped.iter().map(|s| s.as_slice()).collect();
        let packed = self.encode_packed(b, &refs)?;
        let groups: Vec<Vec<usize>> = packed
            .segments
            .iter()
            .map(|s| (s.start + 1..s.start + s.len - 1).collect())
            .collect();
        Ok(packed.h.group_mean(&groups))
    }

    /// MLM logits at the given rows of `h`.
    pub fn mlm_logits<'t>(&self, b: &Binder<'t>, h: Var<'t>, rows: &[usize]) -> Var<'t> {
        let t = h
            .gather_rows(rows)
            .matmul(b.param("lm.mlm.w"))
            .add_row(b.param("lm.mlm.b"))
            .gelu()
            .layer_norm(b.param("lm.mlm.ln.g"), b.param("lm.mlm.ln.b"));
        let out = if self.config.tie_mlm_head {
            t.matmul(b.param("lm.tok_emb").t())
        } else {
            t.matmul(b.param("lm.mlm.out"))
        };
        out.add_row(b.param("lm.mlm.bias"))
    }
}

/// Contextual embeddings of one sequence. Positions with `mask[i] == false`
/// are excluded as attention keys; their rows are computed but meaningless.
pub fn lm_encode(model: &Model, params: &ParamStore, ids: &[TokenId], mask: &[bool]) -> Result<Matrix> {
    model.check_ids(ids)?;
    if mask.len() != ids.len() {
        return Err(Error::InvalidInput(format!(
            "mask length {} does not match {} ids",
            mask.len(),
            ids.len()
        )));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::InvalidInput("attention mask excludes every position".into()));
    }
    let tape = Tape::new();
    let b = Binder::new(&tape, params);
    let positions: Vec<usize> = (0..ids.len()).collect();
    let segs = [Segment {
        start: 0,
        len: ids.len(),
    }];
    let h = model.forward_rows(&b, ids, &positions, &segs, mask);
    let out = (*h.value()).clone();
    Ok(out)
}

/// Mean-pooled `[CLS] name [SEP]` embeddings, one row per name, computed in
/// fixed-size chunks so memory stays bounded for large dictionaries.
pub fn embed_names(model: &Model, params: &ParamStore, names: &[Vec<TokenId>]) -> Result<Matrix> {
    const CHUNK: usize = 256;
    let mut out = Matrix::zeros((names.len(), model.d()));
    for (c, chunk) in names.chunks(CHUNK).enumerate() {
        let tape = Tape::new();
        let b = Binder::new(&tape, params);
        let refs: Vec<&[TokenId]> = chunk.iter().map(|n| n.as_slice()).collect();
        let v = model.encode_names(&b, &refs)?.value();
        let start = c * CHUNK;
        out.slice_mut(ndarray::s![start..start + chunk.len(), ..]).assign(&*v);
    }
    Ok(out)
}
