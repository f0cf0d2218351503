//! Prediction heads over segment and token features.
//!
//! Relation heads come in two stages: a bilinear coarse scorer over all
//! ordered segment pairs, and a refinement stage that encodes the currently
//! positive pair features and re-scores every pair against that context
//! through cross-attention. The same bilinear weights also serve the
//! nearest-pair distance task during pre-training, and the refinement stack
//! serves the direction-exception task, which is what lets both heads start
//! fine-tuning pre-trained.

use crate::error::Result;
use crate::model::{transformer_block, BoundParams, ModelConfig};
use crate::nn::{Graph, NodeId, Real, Tensor};

/// Son-indexed father probabilities: `probs[i][j]` is the probability that
/// segment `j` is the father of segment `i`. The diagonal is ignored at
/// decode time.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationMatrix<T> {
    pub probs: Tensor<T>,
}

impl<T: Real> RelationMatrix<T> {
    pub fn new(probs: Tensor<T>) -> Self {
        debug_assert_eq!(probs.rows(), probs.cols());
        RelationMatrix { probs }
    }

    pub fn n(&self) -> usize {
        self.probs.rows()
    }

    pub fn get(&self, son: usize, father: usize) -> T {
        self.probs.data()[son * self.n() + father]
    }
}

/// Bilinear pair scores over all ordered pairs: `[n, n]` logits.
pub fn crp_logits_all<T: Real>(
    g: &mut Graph<T>,
    bound: &BoundParams,
    segments: NodeId,
) -> Result<NodeId> {
    let scores = g.bilinear_form(segments, bound.id("crp.w"), segments)?;
    g.add_scalar_node(scores, bound.id("crp.b"))
}

/// Bilinear scores for selected `(i, j)` pairs: `[P, 1]` logits.
pub fn crp_logits_pairs<T: Real>(
    g: &mut Graph<T>,
    bound: &BoundParams,
    segments: NodeId,
    pairs: &[(usize, usize)],
) -> Result<NodeId> {
    let (is, js): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
    let xi = g.gather_rows(segments, &is)?;
    let xj = g.gather_rows(segments, &js)?;
    let xw = g.matmul(xi, bound.id("crp.w"))?;
    let prod = g.mul(xw, xj)?;
    let sums = g.row_sum(prod);
    g.add_scalar_node(sums, bound.id("crp.b"))
}

/// Linear map of concatenated `(B_i, B_j)` for selected pairs: `[P, d_r]`.
pub fn pair_features_pairs<T: Real>(
    g: &mut Graph<T>,
    bound: &BoundParams,
    segments: NodeId,
    pairs: &[(usize, usize)],
) -> Result<NodeId> {
    let (is, js): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
    let xi = g.gather_rows(segments, &is)?;
    let xj = g.gather_rows(segments, &js)?;
    let cat = g.concat_cols(xi, xj)?;
    g.affine(cat, bound.id("pair.w"), bound.id("pair.b"))
}

/// Pair features for every ordered pair, row-major: pair `(i, j)` lands at
/// row `i * n + j`. Shape `[n*n, d_r]`.
pub fn pair_features_all<T: Real>(
    g: &mut Graph<T>,
    bound: &BoundParams,
    segments: NodeId,
) -> Result<NodeId> {
    let n = g.value(segments).rows();
    let mut pairs = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            pairs.push((i, j));
        }
    }
    pair_features_pairs(g, bound, segments, &pairs)
}

/// Refinement head: one encoder layer self-attends over the positive pair
/// features; a decoder layer without self-attention cross-attends the query
/// features against that memory; a final linear produces one logit per
/// query. Shape `[Q, 1]`.
pub fn rfe_logits<T: Real>(
    g: &mut Graph<T>,
    bound: &BoundParams,
    cfg: &ModelConfig,
    positive: NodeId,
    queries: NodeId,
) -> Result<NodeId> {
    let enc = transformer_block(
        g,
        bound,
        "rfe.enc",
        positive,
        None,
        cfg.rfe_heads,
        cfg.ln_eps,
        None,
    )?;
    let memory = g.layer_norm(
        enc,
        bound.id("rfe.enc.final_ln.g"),
        bound.id("rfe.enc.final_ln.b"),
        cfg.ln_eps,
    )?;
    let dec = transformer_block(
        g,
        bound,
        "rfe.dec",
        queries,
        Some(memory),
        cfg.rfe_heads,
        cfg.ln_eps,
        None,
    )?;
    let dec = g.layer_norm(
        dec,
        bound.id("rfe.dec.final_ln.g"),
        bound.id("rfe.dec.final_ln.b"),
        cfg.ln_eps,
    )?;
    g.affine(dec, bound.id("rfe.fc.w"), bound.id("rfe.fc.b"))
}

/// Positive-pair selection for refinement: off-diagonal pairs whose coarse
/// probability exceeds 1/2, highest first, capped; falls back to the single
/// best pair when none clears the threshold.
pub fn select_positive_pairs<T: Real>(
    r0: &RelationMatrix<T>,
    cap: usize,
) -> Vec<(usize, usize)> {
    let n = r0.n();
    let half = T::from_f64(0.5);
    let mut scored: Vec<(T, (usize, usize))> = Vec::new();
    let mut best: Option<(T, (usize, usize))> = None;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let p = r0.get(i, j);
            if best.map_or(true, |(bp, _)| p > bp) {
                best = Some((p, (i, j)));
            }
            if p > half {
                scored.push((p, (i, j)));
            }
        }
    }
    if scored.is_empty() {
        return best.map(|(_, ij)| vec![ij]).unwrap_or_default();
    }
    // Highest probability first; ties broken by pair order for determinism.
    scored.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.1.cmp(&b.1))
    });
    scored.truncate(cap);
    scored.into_iter().map(|(_, ij)| ij).collect()
}

/// Output of the refinement stage.
pub struct Refined {
    /// `[n, n]` logits node.
    pub r1_logits: NodeId,
    pub positive_pairs: Vec<(usize, usize)>,
}

/// Computes refined relation logits from segment features and the coarse
/// relation matrix. Documents with fewer than two segments skip refinement
/// and reuse the coarse logits.
pub fn refine_relations<T: Real>(
    g: &mut Graph<T>,
    bound: &BoundParams,
    cfg: &ModelConfig,
    segments: NodeId,
    r0_logits: NodeId,
    r0: &RelationMatrix<T>,
) -> Result<Refined> {
    let n = r0.n();
    if n < 2 {
        return Ok(Refined {
            r1_logits: r0_logits,
            positive_pairs: Vec::new(),
        });
    }
    let positive_pairs = select_positive_pairs(r0, cfg.positive_cap);
    let all = pair_features_all(g, bound, segments)?;
    let rows: Vec<usize> = positive_pairs.iter().map(|&(i, j)| i * n + j).collect();
    let positive = g.gather_rows(all, &rows)?;
    let logits = rfe_logits(g, bound, cfg, positive, all)?;
    let r1_logits = g.reshape(logits, vec![n, n])?;
    Ok(Refined {
        r1_logits,
        positive_pairs,
    })
}

/// 9-way direction logits for selected pairs: `[P, 9]`.
pub fn direction_logits<T: Real>(
    g: &mut Graph<T>,
    bound: &BoundParams,
    segments: NodeId,
    pairs: &[(usize, usize)],
) -> Result<NodeId> {
    let (is, js): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
    let xi = g.gather_rows(segments, &is)?;
    let xj = g.gather_rows(segments, &js)?;
    let cat = g.concat_cols(xi, xj)?;
    g.affine(cat, bound.id("dir.w"), bound.id("dir.b"))
}

/// 5-way collinearity logits for segment triplets: `[K, 5]`. The triplet
/// feature is the sum of the three segment features; summation order is
/// canonicalized by index so permuted triplets produce identical floats.
pub fn cit_logits<T: Real>(
    g: &mut Graph<T>,
    bound: &BoundParams,
    segments: NodeId,
    triplets: &[(usize, usize, usize)],
) -> Result<NodeId> {
    let mut a = Vec::with_capacity(triplets.len());
    let mut b = Vec::with_capacity(triplets.len());
    let mut c = Vec::with_capacity(triplets.len());
    for &(i, j, k) in triplets {
        let mut idx = [i, j, k];
        idx.sort_unstable();
        a.push(idx[0]);
        b.push(idx[1]);
        c.push(idx[2]);
    }
    let xa = g.gather_rows(segments, &a)?;
    let xb = g.gather_rows(segments, &b)?;
    let xc = g.gather_rows(segments, &c)?;
    let sum = g.add(xa, xb)?;
    let sum = g.add(sum, xc)?;
    g.affine(sum, bound.id("cit.w"), bound.id("cit.b"))
}

/// Per-token BIO tag logits: `[T, 7]` through a small MLP.
pub fn ser_logits<T: Real>(
    g: &mut Graph<T>,
    bound: &BoundParams,
    tokens: NodeId,
) -> Result<NodeId> {
    let h = g.affine(tokens, bound.id("ser.w1"), bound.id("ser.b1"))?;
    let h = g.gelu(h);
    g.affine(h, bound.id("ser.w2"), bound.id("ser.b2"))
}

/// Vocabulary logits at masked token positions: `[M, V]`.
pub fn mvlm_logits<T: Real>(
    g: &mut Graph<T>,
    bound: &BoundParams,
    tokens: NodeId,
    positions: &[usize],
) -> Result<NodeId> {
    let masked = g.gather_rows(tokens, positions)?;
    g.affine(masked, bound.id("mvlm.w"), bound.id("mvlm.b"))
}
