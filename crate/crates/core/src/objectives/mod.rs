//! Masked-token corruption, the MLM loss and the cross-modal alignment
//! losses.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::tensor::{Binder, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignKind {
    Infonce,
    Ms,
    Classification,
    None,
}

/// Which similarities fill the InfoNCE denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegativesMode {
    /// `Σ_j exp(cos(e_i, g_j) / τ)`: standard in-batch negatives.
    Cross,
    /// `Σ_j exp(cos(e_j, g_j) / τ)`: matched pairs only.
    Paired,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub align: AlignKind,
    pub negatives: NegativesMode,
    pub tau: f64,
    pub mlm_weight: f64,
    pub align_weight: f64,
    pub select_ratio: f64,
    pub ms_alpha: f64,
    pub ms_beta: f64,
    pub ms_epsilon: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            align: AlignKind::Infonce,
            negatives: NegativesMode::Cross,
            tau: 0.07,
            mlm_weight: 1.0,
            align_weight: 1.0,
            select_ratio: 0.15,
            ms_alpha: 2.0,
            ms_beta: 50.0,
            ms_epsilon: 0.5,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(0.0..=1.0).contains(&self.select_ratio) {
            return bad(format!("select_ratio {} outside [0, 1]", self.select_ratio));
        }
        if self.mlm_weight < 0.0 || self.align_weight < 0.0 {
            return bad("loss weights must be non-negative".into());
        }
        if !(self.ms_alpha > 0.0 && self.ms_beta > 0.0) {
            return bad("ms_alpha and ms_beta must be positive".into());
        }
        Ok(())
    }

    /// Whether the alignment term takes part in the loss at all.
    pub fn aligns(&self) -> bool {
        self.align != AlignKind::None && self.align_weight != 0.0
    }
}

/// Corrupted ids plus labels at the selected positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedText {
    pub ids: Vec<TokenId>,
    pub labels: Vec<Option<TokenId>>,
}

impl MaskedText {
    pub fn selected(&self) -> impl Iterator<Item = (usize, TokenId)> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.map(|t| (i, t)))
    }

    pub fn num_selected(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }
}

/// How a selected position was corrupted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Replacement {
    Mask,
    Keep,
    Random,
}

/// Selects each non-special position with probability `select_ratio`, then
/// replaces it by `[MASK]` (80%), keeps it (10%) or swaps in a uniformly
/// drawn non-special token (10%).
pub fn apply_mlm_mask<R: Rng>(ids: &[TokenId], vocab_size: usize, rng: &mut R, select_ratio: f64) -> MaskedText {
    apply_mlm_mask_traced(ids, vocab_size, rng, select_ratio).0
}

/// [`apply_mlm_mask`] that also reports the replacement drawn per selected
/// position.
pub fn apply_mlm_mask_traced<R: Rng>(
    ids: &[TokenId],
    vocab_size: usize,
    rng: &mut R,
    select_ratio: f64,
) -> (MaskedText, Vec<Replacement>) {
    let mut out = ids.to_vec();
    let mut labels = vec![None; ids.len()];
    let mut trace = Vec::new();
    for (i, &t) in ids.iter().enumerate() {
        if Vocabulary::is_special(t) || !rng.gen_bool(select_ratio) {
            continue;
        }
        labels[i] = Some(t);
        let u: f64 = rng.gen();
        let kind = if u < 0.8 {
            out[i] = Vocabulary::MASK;
            Replacement::Mask
        } else if u < 0.9 {
            Replacement::Keep
        } else {
            out[i] = rng.gen_range(Vocabulary::NUM_SPECIALS..vocab_size);
            Replacement::Random
        };
        trace.push(kind);
    }
    (MaskedText { ids: out, labels }, trace)
}

/// Mean negative log-likelihood over the labeled rows of `logits`. `None`
/// when there is nothing to predict, so callers can treat the term as zero.
pub fn mlm_loss<'t>(logits: Var<'t>, labels: &[TokenId]) -> Result<Option<Var<'t>>> {
    let (rows, vocab) = logits.shape();
    if rows != labels.len() {
        return Err(Error::InvalidInput(format!("{rows} logit rows for {} labels", labels.len())));
    }
    if labels.is_empty() {
        return Ok(None);
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= vocab) {
        return Err(Error::InvalidInput(format!("label {bad} outside vocabulary of {vocab}")));
    }
    Ok(Some(logits.cross_entropy(labels)))
}

fn check_pair(e: Var<'_>, g: Var<'_>) -> Result<usize> {
    let (be, de) = e.shape();
    let (bg, dg) = g.shape();
    if be != bg || de != dg {
        return Err(Error::InvalidInput(format!(
            "entity ({be}×{de}) and graph ({bg}×{dg}) embeddings differ in shape"
        )));
    }
    if be == 0 {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    for (name, m) in [("entity", e.value()), ("graph", g.value())] {
        if let Some(r) = m.rows().into_iter().position(|r| r.dot(&r) == 0.0) {
            return Err(Error::InvalidInput(format!("{name} row {r} has zero norm")));
        }
    }
    Ok(be)
}

/// `B × B` cosine similarities between entity and graph rows.
pub fn cosine_matrix<'t>(e: Var<'t>, g: Var<'t>) -> Var<'t> {
    e.row_normalize().matmul(g.row_normalize().t())
}

pub fn infonce_align_loss<'t>(e: Var<'t>, g: Var<'t>, tau: f64, mode: NegativesMode) -> Result<Var<'t>> {
    if !(tau > 0.0) {
        return Err(Error::InvalidInput(format!("temperature must be positive, got {tau}")));
    }
    let n = check_pair(e, g)?;
    let labels: Vec<usize> = (0..n).collect();
    let logits = cosine_matrix(e, g).scale(1.0 / tau);
    Ok(match mode {
        NegativesMode::Cross => logits.cross_entropy(&labels),
        NegativesMode::Paired => {
            // Every row holds the matched-pair scores; row i is labeled i.
            let diag: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
            logits.pick(&diag).gather_rows(&vec![0; n]).cross_entropy(&labels)
        }
    })
}

/// Multi-similarity loss with the paired graph embedding as the only
/// positive and the other in-batch graph embeddings as negatives.
/// Pairs are mined on similarity values: a negative is kept when it is
/// within `epsilon` of the hardest positive, a positive when it is within
/// `epsilon` of the hardest negative (always, if there are no negatives).
pub fn ms_align_loss<'t>(b: &Binder<'t>, e: Var<'t>, g: Var<'t>, alpha: f64, beta: f64, epsilon: f64) -> Result<Var<'t>> {
    let n = check_pair(e, g)?;
    let sim = cosine_matrix(e, g);
    let s = sim.value();
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for i in 0..n {
        let sp = s[[i, i]];
        let hardest_neg = (0..n).filter(|&j| j != i).map(|j| s[[i, j]]).fold(f64::NEG_INFINITY, f64::max);
        if n == 1 || sp < hardest_neg + epsilon {
            pos.push((i, i));
        }
        for j in (0..n).filter(|&j| j != i) {
            if s[[i, j]] > sp - epsilon {
                neg.push((i, j));
            }
        }
    }
    // (1/k) ln(1 + Σ exp(k (sign·s − ε·sign))) summed per anchor.
    let term = |coords: &[(usize, usize)], k: f64, sign: f64| -> Var<'t> {
        let rows: Vec<usize> = coords.iter().map(|&(i, _)| i).collect();
        sim.pick(coords)
            .add_scalar(-epsilon)
            .scale(sign * k)
            .exp()
            .t()
            .scatter_add_rows(&rows, n)
            .add_scalar(1.0)
            .ln()
            .scale(1.0 / k)
    };
    let mut total: Option<Var<'t>> = None;
    for (coords, k, sign) in [(&pos, alpha, -1.0), (&neg, beta, 1.0)] {
        if !coords.is_empty() {
            let t = term(coords, k, sign);
            total = Some(match total {
                Some(acc) => acc.add(t),
                None => t,
            });
        }
    }
    Ok(match total {
        Some(t) => t.mean(),
        None => b.constant(crate::tensor::Matrix::zeros((1, 1))),
    })
}

/// Uniform `j ≠ i` partner for every anchor `i`.
pub fn sample_negative_partners<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    (0..n)
        .map(|i| {
            let j = rng.gen_range(0..n - 1);
            if j >= i {
                j + 1
            } else {
                j
            }
        })
        .collect()
}

/// Binary cross-entropy of a linear classifier over `[e_i ∥ g_j]`: the `B`
/// matched pairs are positives, `(i, partners[i])` the negatives.
pub fn classification_align_loss<'t>(b: &Binder<'t>, e: Var<'t>, g: Var<'t>, partners: &[usize]) -> Result<Var<'t>> {
    let n = check_pair(e, g)?;
    if n < 2 {
        return Err(Error::InvalidInput("classification alignment needs a batch of at least 2".into()));
    }
    if partners.len() != n || partners.iter().enumerate().any(|(i, &j)| j == i || j >= n) {
        return Err(Error::InvalidInput("negative partners must be other in-batch items".into()));
    }
    let rows: Vec<usize> = (0..n).chain(0..n).collect();
    let cols: Vec<usize> = (0..n).chain(partners.iter().copied()).collect();
    let pairs = Var::concat_cols(&[e.gather_rows(&rows), g.gather_rows(&cols)]);
    let logits = pairs.matmul(b.param("cls.w")).add_row(b.param("cls.b"));
    let labels: Vec<f64> = (0..2 * n).map(|i| if i < n { 1.0 } else { 0.0 }).collect();
    Ok(logits.bce_with_logits(&labels))
}

/// `l_mlm + align_weight · l_align`.
pub fn total_loss(l_mlm: f64, l_align: f64, align_weight: f64) -> f64 {
    l_mlm + align_weight * l_align
}
