//! Token-to-entity aggregation over mention spans.

use super::graph::gat_attend;
use super::text::block;
use super::{Model, PoolingMode, LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::tensor::{Binder, Segment, Var};

/// One entity vector per span. Spans are `[start, end)` row ranges of `h`.
pub fn pool_entity<'t>(
    model: &Model,
    b: &Binder<'t>,
    h: Var<'t>,
    spans: &[(usize, usize)],
    mode: PoolingMode,
) -> Result<Var<'t>> {
    if spans.is_empty() {
        return Err(Error::InvalidInput("no spans to pool".into()));
    }
    let rows_total = h.shape().0;
    for &(s, e) in spans {
        if s >= e {
            return Err(Error::InvalidInput(format!("empty span [{s}, {e})")));
        }
        if e > rows_total {
            return Err(Error::InvalidInput(format!(
                "span [{s}, {e}) exceeds {rows_total} rows"
            )));
        }
    }
    let groups: Vec<Vec<usize>> = spans.iter().map(|&(s, e)| (s..e).collect()).collect();
    if mode == PoolingMode::Mean {
        return Ok(h.group_mean(&groups));
    }

    let flat: Vec<usize> = groups.iter().flatten().copied().collect();
    let seg_of: Vec<usize> = groups
        .iter()
        .enumerate()
        .flat_map(|(i, g)| std::iter::repeat(i).take(g.len()))
        .collect();
    let tokens = h.gather_rows(&flat);
    let n = spans.len();
    let local: Vec<Vec<usize>> = {
        let mut at = 0;
        groups
            .iter()
            .map(|g| {
                let r = (at..at + g.len()).collect();
                at += g.len();
                r
            })
            .collect()
    };

    Ok(match mode {
        PoolingMode::Mean => unreachable!(),
        PoolingMode::Weighted => {
            let weights = tokens.matmul(b.param("pool.w")).segment_softmax(&seg_of);
            tokens.mul_col(weights).scatter_add_rows(&seg_of, n)
        }
        PoolingMode::Gat => {
            // Star graph from the span tokens onto a virtual entity node
            // that starts at the span mean.
            let virt = tokens.group_mean(&local);
            let src: Vec<usize> = (0..flat.len()).collect();
            let (agg, _) = gat_attend(b, "pool.gat", tokens, virt, &src, &seg_of, model.config.gnn_heads);
            agg.add(virt.matmul(b.param("pool.gat.w_self")))
                .leaky_relu(LEAKY_SLOPE)
        }
        PoolingMode::Transformer => {
            let segments: Vec<Segment> = local
                .iter()
                .map(|g| Segment {
                    start: g[0],
                    len: g.len(),
                })
                .collect();
            let valid = vec![true; flat.len()];
            let c = &model.config;
            block(b, "pool.tf", tokens, &segments, &valid, c.heads, c.norm).group_mean(&local)
        }
    })
}
