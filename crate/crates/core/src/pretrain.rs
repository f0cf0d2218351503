//! Self-supervised geometric pre-training: label generation for the three
//! geometric tasks plus masked-token modeling, their losses, and the
//! training loop.
//!
//! Labels are derived from the exact geometry oracle, never from model
//! state, and are reproducible from (document, seed, config).

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Document, MASK_ID, UNK_ID};
use crate::encoder::{encode_document, TokenizedDoc};
use crate::error::{Error, Result};
use crate::geometry::{collinearity, direction, nearest_in_direction, BBox, Direction};
use crate::heads;
use crate::model::{BoundParams, ModelConfig};
use crate::nn::{linear_decay, AdamConfig, Graph, ParameterStore, Real};
use crate::rng;

/// Sampling counts and rates for label generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    /// Anchors sampled per document for pair direction/distance labels.
    pub ddm_anchors: usize,
    /// Partners sampled per anchor.
    pub ddm_partners: usize,
    /// Total pairs sampled for direction-exception detection.
    pub dde_pairs: usize,
    /// Target share of the dominant direction inside the positive set.
    pub dde_positive_ratio: f64,
    /// Minimum dominant-direction share among sampled pairs; below this the
    /// task is skipped for the document.
    pub dde_dominance_threshold: f64,
    /// Triplets sampled per document for collinearity labels.
    pub cit_triplets: usize,
    /// Token masking rate and the mask/random/keep split.
    pub mask_rate: f64,
    pub mask_token_rate: f64,
    pub mask_random_rate: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            ddm_anchors: 16,
            ddm_partners: 32,
            dde_pairs: 40,
            dde_positive_ratio: 0.7,
            dde_dominance_threshold: 0.6,
            cit_triplets: 16,
            mask_rate: 0.15,
            mask_token_rate: 0.8,
            mask_random_rate: 0.1,
        }
    }
}

/// Which pre-training tasks are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskToggles {
    pub ddm: bool,
    pub dde: bool,
    pub cit: bool,
    pub mvlm: bool,
}

impl Default for TaskToggles {
    fn default() -> Self {
        TaskToggles {
            ddm: true,
            dde: true,
            cit: true,
            mvlm: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DdmPair {
    pub i: usize,
    pub j: usize,
    /// Direction class index, 0..=8.
    pub direction: u8,
    /// True iff `j` is the nearest segment to `i` in that direction.
    pub nearest: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DdeSample {
    pub pair: (usize, usize),
    /// True iff the pair follows the dominant direction.
    pub label: bool,
}

/// Masked-token recipe for one document.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MvlmMask {
    pub positions: Vec<usize>,
    /// Original vocabulary ids at those positions (the labels).
    pub originals: Vec<u32>,
    /// Ids actually fed to the encoder (mask token, random, or unchanged).
    pub replacements: Vec<u32>,
}

impl MvlmMask {
    pub fn apply(&self, token_ids: &mut [usize]) {
        for (&pos, &rep) in self.positions.iter().zip(&self.replacements) {
            token_ids[pos] = rep as usize;
        }
    }
}

/// All self-supervision labels for one document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeoLabelSet {
    pub doc_id: String,
    pub n_segments: usize,
    /// Row-major direction class of every ordered pair.
    pub direction_matrix: Vec<u8>,
    /// Row-major flag: `j` is nearest to `i` in their direction.
    pub nearest_mask: Vec<bool>,
    pub ddm_pairs: Vec<DdmPair>,
    pub dde_positive: Vec<(usize, usize)>,
    pub dde_samples: Vec<DdeSample>,
    /// Dominant direction of the positive set, when the task ran.
    pub dde_dominant: Option<u8>,
    /// Triplet with its collinearity class index.
    pub cit_triplets: Vec<(usize, usize, usize, u8)>,
    pub mvlm: MvlmMask,
}

/// Pairwise direction matrix plus nearest-in-direction flags.
pub fn geometry_index(boxes: &[BBox]) -> (Vec<u8>, Vec<bool>) {
    let n = boxes.len();
    let mut dirs = vec![Direction::Overlap.index() as u8; n * n];
    let mut nearest = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                dirs[i * n + j] = direction(&boxes[i], &boxes[j]).index() as u8;
            }
        }
        for (_, j) in nearest_in_direction(i, boxes) {
            nearest[i * n + j] = true;
        }
    }
    (dirs, nearest)
}

/// Direction/distance pair sampling: up to `ddm_anchors` anchors, each with
/// up to `ddm_partners` distinct partners. Documents with fewer than two
/// segments yield an empty set.
pub fn sample_ddm(
    boxes: &[BBox],
    dirs: &[u8],
    nearest: &[bool],
    cfg: &SamplingConfig,
    rng: &mut impl Rng,
) -> Vec<DdmPair> {
    let n = boxes.len();
    if n < 2 {
        return Vec::new();
    }
    let mut anchors: Vec<usize> = (0..n).collect();
    anchors.shuffle(rng);
    anchors.truncate(cfg.ddm_anchors);
    let mut out = Vec::new();
    for &i in &anchors {
        let mut partners: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        partners.shuffle(rng);
        partners.truncate(cfg.ddm_partners);
        for &j in &partners {
            out.push(DdmPair {
                i,
                j,
                direction: dirs[i * n + j],
                nearest: nearest[i * n + j],
            });
        }
    }
    out
}

/// Direction-exception sets: sample `dde_pairs` distinct ordered pairs,
/// find the dominant direction among them, build a positive set whose
/// dominant-direction share is at least the threshold (targeting
/// `dde_positive_ratio`), and label the remaining sample set by agreement
/// with the dominant direction. Returns empty sets when the document is too
/// small or the sampled pairs cannot fill a valid positive set.
pub fn build_dde(
    n: usize,
    dirs: &[u8],
    cfg: &SamplingConfig,
    rng: &mut impl Rng,
) -> (Vec<(usize, usize)>, Vec<DdeSample>, Option<u8>) {
    let empty = (Vec::new(), Vec::new(), None);
    if n < 2 || n * (n - 1) < cfg.dde_pairs {
        return empty;
    }
    let mut all: Vec<(usize, usize)> = Vec::with_capacity(n * (n - 1));
    for i in 0..n {
        for j in 0..n {
            if i != j {
                all.push((i, j));
            }
        }
    }
    all.shuffle(rng);
    all.truncate(cfg.dde_pairs);

    let mut hist = [0usize; 9];
    for &(i, j) in &all {
        hist[dirs[i * n + j] as usize] += 1;
    }
    let dominant = (0..9).max_by_key(|&d| (hist[d], 8 - d)).unwrap() as u8;
    let positive_size = cfg.dde_pairs / 2;
    let needed = (cfg.dde_dominance_threshold * positive_size as f64).ceil() as usize;
    if hist[dominant as usize] < needed {
        return empty;
    }

    let target_dominant = (((positive_size as f64) * cfg.dde_positive_ratio).round() as usize)
        .min(hist[dominant as usize]);
    let mut positive = Vec::with_capacity(positive_size);
    let mut rest = Vec::new();
    let mut dom_in_pos = 0usize;
    let mut mixed_in_pos = 0usize;
    for &(i, j) in &all {
        let is_dom = dirs[i * n + j] == dominant;
        if is_dom && dom_in_pos < target_dominant {
            positive.push((i, j));
            dom_in_pos += 1;
        } else if !is_dom && mixed_in_pos + target_dominant < positive_size {
            positive.push((i, j));
            mixed_in_pos += 1;
        } else {
            rest.push((i, j));
        }
    }
    // Too few off-dominant pairs: top the positive set up with dominant ones.
    let mut samples_src = Vec::new();
    for pair in rest {
        if positive.len() < positive_size && dirs[pair.0 * n + pair.1] == dominant {
            positive.push(pair);
        } else {
            samples_src.push(pair);
        }
    }
    let samples: Vec<DdeSample> = samples_src
        .into_iter()
        .map(|(i, j)| DdeSample {
            pair: (i, j),
            label: dirs[i * n + j] == dominant,
        })
        .collect();
    debug_assert_eq!(positive.len(), positive_size);
    debug_assert!(
        positive
            .iter()
            .filter(|&&(i, j)| dirs[i * n + j] == dominant)
            .count() as f64
            >= 0.6 * positive.len() as f64
    );
    (positive, samples, Some(dominant))
}

const COLLINEAR_ENUM_CAP: usize = 10_000;

/// All (capped) collinear triplets, found as triangles of the per-class
/// pair graphs.
pub fn collinear_triplets(boxes: &[BBox]) -> Vec<(usize, usize, usize, u8)> {
    let n = boxes.len();
    let mut out = Vec::new();
    if n < 3 {
        return out;
    }
    let words = n.div_ceil(64);
    // Adjacency bitsets per collinearity class (axis pairs of directions).
    let mut adj = vec![vec![0u64; n * words]; 4];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = direction(&boxes[i], &boxes[j]);
            if let Some(class) = crate::geometry::CollinearClass::of_direction(d) {
                let c = class.index();
                adj[c][i * words + j / 64] |= 1 << (j % 64);
                adj[c][j * words + i / 64] |= 1 << (i % 64);
            }
        }
    }
    for (c, adj_c) in adj.iter().enumerate() {
        'class: for i in 0..n {
            for j in (i + 1)..n {
                if adj_c[i * words + j / 64] & (1 << (j % 64)) == 0 {
                    continue;
                }
                for w in (j / 64)..words {
                    let mut bits = adj_c[i * words + w] & adj_c[j * words + w];
                    if w == j / 64 {
                        // Keep only k > j.
                        let keep_above = !(((1u64 << (j % 64)) - 1) | (1u64 << (j % 64)));
                        bits &= keep_above;
                    }
                    while bits != 0 {
                        let k = w * 64 + bits.trailing_zeros() as usize;
                        bits &= bits - 1;
                        debug_assert_eq!(
                            collinearity(&boxes[i], &boxes[j], &boxes[k]).index(),
                            c
                        );
                        out.push((i, j, k, c as u8));
                        if out.len() >= COLLINEAR_ENUM_CAP {
                            break 'class;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Collinearity triplet sampling, class-balanced when possible: half the
/// slots draw from precomputed collinear triplets, the rest are random.
pub fn sample_cit(
    boxes: &[BBox],
    cfg: &SamplingConfig,
    rng: &mut impl Rng,
) -> Vec<(usize, usize, usize, u8)> {
    let n = boxes.len();
    if n < 3 {
        return Vec::new();
    }
    let collinear = collinear_triplets(boxes);
    let mut out = Vec::with_capacity(cfg.cit_triplets);
    let balanced_slots = cfg.cit_triplets / 2;
    if !collinear.is_empty() {
        for _ in 0..balanced_slots {
            out.push(*collinear.choose(rng).expect("non-empty"));
        }
    }
    while out.len() < cfg.cit_triplets {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        let (i, j, k) = (idx[0], idx[1], idx[2]);
        let class = collinearity(&boxes[i], &boxes[j], &boxes[k]).index() as u8;
        out.push((i, j, k, class));
    }
    out
}

/// The 15% / 80-10-10 masking recipe over the token stream. Unknown-token
/// positions are left alone.
pub fn mask_tokens(
    token_ids: &[usize],
    vocab_size: usize,
    cfg: &SamplingConfig,
    rng: &mut impl Rng,
) -> MvlmMask {
    let mut mask = MvlmMask::default();
    for (pos, &tok) in token_ids.iter().enumerate() {
        if tok == UNK_ID as usize {
            continue;
        }
        if rng.gen::<f64>() >= cfg.mask_rate {
            continue;
        }
        let roll = rng.gen::<f64>();
        let replacement = if roll < cfg.mask_token_rate {
            MASK_ID
        } else if roll < cfg.mask_token_rate + cfg.mask_random_rate && vocab_size > 4 {
            rng.gen_range(4..vocab_size) as u32
        } else {
            tok as u32
        };
        mask.positions.push(pos);
        mask.originals.push(tok as u32);
        mask.replacements.push(replacement);
    }
    mask
}

/// Generates the full label set for a document from its own seeded stream.
pub fn generate_labels(
    doc: &Document,
    tok: &TokenizedDoc,
    sampling: &SamplingConfig,
    vocab_size: usize,
    seed: u64,
    doc_salt: u64,
) -> GeoLabelSet {
    let boxes: Vec<BBox> = doc.segments[..tok.n_segments]
        .iter()
        .map(|s| s.bbox)
        .collect();
    let (dirs, nearest) = geometry_index(&boxes);
    let mut stream = rng::derive(seed, "labels", doc_salt);
    let ddm_pairs = sample_ddm(&boxes, &dirs, &nearest, sampling, &mut stream);
    let (dde_positive, dde_samples, dde_dominant) =
        build_dde(boxes.len(), &dirs, sampling, &mut stream);
    let cit_triplets = sample_cit(&boxes, sampling, &mut stream);
    let mvlm = mask_tokens(&tok.token_ids, vocab_size, sampling, &mut stream);
    GeoLabelSet {
        doc_id: doc.id.clone(),
        n_segments: boxes.len(),
        direction_matrix: dirs,
        nearest_mask: nearest,
        ddm_pairs,
        dde_positive,
        dde_samples,
        dde_dominant,
        cit_triplets,
        mvlm,
    }
}

/// Per-task loss values of one step or epoch. Absent tasks stay zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainLosses {
    pub mvlm: f64,
    pub ddm_direction: f64,
    pub ddm_distance: f64,
    pub dde: f64,
    pub cit: f64,
    pub total: f64,
}

impl PretrainLosses {
    pub fn ddm(&self) -> f64 {
        self.ddm_direction + self.ddm_distance
    }

    fn accumulate(&mut self, other: &PretrainLosses) {
        self.mvlm += other.mvlm;
        self.ddm_direction += other.ddm_direction;
        self.ddm_distance += other.ddm_distance;
        self.dde += other.dde;
        self.cit += other.cit;
        self.total += other.total;
    }

    fn scaled(&self, s: f64) -> PretrainLosses {
        PretrainLosses {
            mvlm: self.mvlm * s,
            ddm_direction: self.ddm_direction * s,
            ddm_distance: self.ddm_distance * s,
            dde: self.dde * s,
            cit: self.cit * s,
            total: self.total * s,
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.mvlm,
            self.ddm_direction,
            self.ddm_distance,
            self.dde,
            self.cit,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub tasks: TaskToggles,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        PretrainOptions {
            epochs: 3,
            lr: 3e-4,
            weight_decay: 0.01,
            tasks: TaskToggles::default(),
        }
    }
}

/// Builds the combined pre-training loss for one document inside `graph`.
/// Returns `None` when every active task is empty for this document.
pub fn pretrain_loss<T: Real>(
    g: &mut Graph<T>,
    bound: &BoundParams,
    cfg: &ModelConfig,
    tasks: &TaskToggles,
    tok: &TokenizedDoc,
    labels: &GeoLabelSet,
) -> Result<Option<(crate::nn::NodeId, PretrainLosses)>> {
    debug_assert!(labels
        .ddm_pairs
        .iter()
        .all(|p| labels.direction_matrix[p.i * labels.n_segments + p.j] == p.direction));

    let mut masked_tok = tok.clone();
    if tasks.mvlm {
        labels.mvlm.apply(&mut masked_tok.token_ids);
    }
    let enc = encode_document(g, bound, cfg, &masked_tok)?;

    let mut report = PretrainLosses::default();
    let mut total: Option<crate::nn::NodeId> = None;
    let add_term =
        |g: &mut Graph<T>, total: &mut Option<crate::nn::NodeId>, node: crate::nn::NodeId| -> Result<f64> {
            let v = g.value(node).item().to_f64();
            *total = Some(match *total {
                None => node,
                Some(acc) => g.add(acc, node)?,
            });
            Ok(v)
        };

    if tasks.mvlm && !labels.mvlm.positions.is_empty() {
        let logits = heads::mvlm_logits(g, bound, enc.tokens, &labels.mvlm.positions)?;
        let targets: Vec<usize> = labels.mvlm.originals.iter().map(|&t| t as usize).collect();
        let loss = g.cross_entropy_logits(logits, &targets)?;
        report.mvlm = add_term(g, &mut total, loss)?;
    }

    if tasks.ddm && !labels.ddm_pairs.is_empty() {
        let pairs: Vec<(usize, usize)> = labels.ddm_pairs.iter().map(|p| (p.i, p.j)).collect();
        let dir_targets: Vec<usize> = labels
            .ddm_pairs
            .iter()
            .map(|p| p.direction as usize)
            .collect();
        let dir = heads::direction_logits(g, bound, enc.segments, &pairs)?;
        let dir_loss = g.cross_entropy_logits(dir, &dir_targets)?;
        report.ddm_direction = add_term(g, &mut total, dir_loss)?;

        let near_targets: Vec<T> = labels
            .ddm_pairs
            .iter()
            .map(|p| if p.nearest { T::ONE } else { T::ZERO })
            .collect();
        let crp = heads::crp_logits_pairs(g, bound, enc.segments, &pairs)?;
        let near_loss = g.bce_with_logits(crp, &near_targets)?;
        report.ddm_distance = add_term(g, &mut total, near_loss)?;
    }

    if tasks.dde && !labels.dde_samples.is_empty() && !labels.dde_positive.is_empty() {
        let pos = heads::pair_features_pairs(g, bound, enc.segments, &labels.dde_positive)?;
        let sample_pairs: Vec<(usize, usize)> =
            labels.dde_samples.iter().map(|s| s.pair).collect();
        let queries = heads::pair_features_pairs(g, bound, enc.segments, &sample_pairs)?;
        let logits = heads::rfe_logits(g, bound, cfg, pos, queries)?;
        let targets: Vec<T> = labels
            .dde_samples
            .iter()
            .map(|s| if s.label { T::ONE } else { T::ZERO })
            .collect();
        let loss = g.bce_with_logits(logits, &targets)?;
        report.dde = add_term(g, &mut total, loss)?;
    }

    if tasks.cit && !labels.cit_triplets.is_empty() {
        let triplets: Vec<(usize, usize, usize)> = labels
            .cit_triplets
            .iter()
            .map(|&(i, j, k, _)| (i, j, k))
            .collect();
        let targets: Vec<usize> = labels
            .cit_triplets
            .iter()
            .map(|&(_, _, _, c)| c as usize)
            .collect();
        let logits = heads::cit_logits(g, bound, enc.segments, &triplets)?;
        let loss = g.cross_entropy_logits(logits, &targets)?;
        report.cit = add_term(g, &mut total, loss)?;
    }

    let Some(total) = total else {
        return Ok(None);
    };
    report.total = g.value(total).item().to_f64();
    Ok(Some((total, report)))
}

/// One epoch-averaged loss record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub losses: PretrainLosses,
}

/// Minimizes the combined objective with Adam and a linear learning-rate
/// decay over all steps. One optimizer step per document.
pub fn pretrain_loop(
    store: &mut ParameterStore<f32>,
    cfg: &ModelConfig,
    opts: &PretrainOptions,
    docs: &[(TokenizedDoc, GeoLabelSet)],
) -> Result<Vec<EpochLog>> {
    let adam = AdamConfig {
        weight_decay: opts.weight_decay,
        ..AdamConfig::default()
    };
    let total_steps = (opts.epochs * docs.len()) as u64;
    let mut logs = Vec::with_capacity(opts.epochs);
    let mut step = 0u64;
    for epoch in 0..opts.epochs {
        let mut sum = PretrainLosses::default();
        let mut counted = 0usize;
        for (tok, labels) in docs {
            let mut g: Graph<f32> = Graph::new();
            let bound = BoundParams::bind(&mut g, store, true);
            let Some((loss, report)) =
                pretrain_loss(&mut g, &bound, cfg, &opts.tasks, tok, labels)?
            else {
                continue;
            };
            if !report.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite pre-training loss on document `{}` at step {step}: {report:?}",
                    labels.doc_id
                )));
            }
            let mut grads = g.backward(loss)?;
            store.clear_grads();
            bound.apply_grads(&mut grads, store)?;
            let lr = linear_decay(opts.lr, step, total_steps);
            store.adam_step(lr, &adam)?;
            step += 1;
            sum.accumulate(&report);
            counted += 1;
        }
        let losses = if counted > 0 {
            sum.scaled(1.0 / counted as f64)
        } else {
            PretrainLosses::default()
        };
        logs.push(EpochLog { epoch, losses });
    }
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, GeneratorSpec, Vocabulary};
    use crate::encoder::tokenize_document;
    use crate::model::init_params;

    fn tiny_model(vocab: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab,
            hidden: 16,
            layers: 1,
            heads: 2,
            feed_forward: 32,
            rel_dim: 16,
            rfe_heads: 2,
            rfe_feed_forward: 16,
            max_tokens: 128,
            max_segments: 64,
            coord_buckets: 100,
            positive_cap: 16,
            ln_eps: 1e-5,
        }
    }

    fn boxes_grid(cols: usize, rows: usize) -> Vec<BBox> {
        let mut out = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                let x = 10.0 + 100.0 * c as f64;
                let y = 10.0 + 40.0 * r as f64;
                out.push(BBox::new(x, y, x + 60.0, y + 14.0).unwrap());
            }
        }
        out
    }

    /// Square spacing keeps grid diagonals on exact 45-degree sectors.
    fn square_grid(cols: usize, rows: usize) -> Vec<BBox> {
        let mut out = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                let x = 10.0 + 100.0 * c as f64;
                let y = 10.0 + 100.0 * r as f64;
                out.push(BBox::new(x, y, x + 20.0, y + 20.0).unwrap());
            }
        }
        out
    }

    #[test]
    fn ddm_labels_agree_with_oracle() {
        let boxes = boxes_grid(4, 4);
        let (dirs, nearest) = geometry_index(&boxes);
        let cfg = SamplingConfig::default();
        let mut stream = rng::derive(1, "t", 0);
        let pairs = sample_ddm(&boxes, &dirs, &nearest, &cfg, &mut stream);
        assert!(!pairs.is_empty());
        assert!(pairs.len() <= cfg.ddm_anchors * cfg.ddm_partners);
        for p in &pairs {
            assert_eq!(
                p.direction as usize,
                direction(&boxes[p.i], &boxes[p.j]).index()
            );
            let map = nearest_in_direction(p.i, &boxes);
            let d = direction(&boxes[p.i], &boxes[p.j]);
            let expect = map.get(&d) == Some(&p.j);
            assert_eq!(p.nearest, expect);
        }
    }

    #[test]
    fn ddm_tiny_documents() {
        let cfg = SamplingConfig::default();
        let mut stream = rng::derive(1, "t", 1);
        let one = boxes_grid(1, 1);
        let (d1, n1) = geometry_index(&one);
        assert!(sample_ddm(&one, &d1, &n1, &cfg, &mut stream).is_empty());

        let two = boxes_grid(2, 1);
        let (d2, n2) = geometry_index(&two);
        let pairs = sample_ddm(&two, &d2, &n2, &cfg, &mut stream);
        assert_eq!(pairs.len(), 2); // both anchors, one partner each
    }

    #[test]
    fn direction_coverage_over_synthetic_corpus() {
        let spec = GeneratorSpec {
            docs: 20,
            ..GeneratorSpec::default()
        };
        let docs = generate_synthetic_corpus(&spec, 11).unwrap();
        let cfg = SamplingConfig::default();
        let mut seen = [false; 9];
        for (salt, doc) in docs.iter().enumerate() {
            let boxes = doc.boxes();
            let (dirs, nearest) = geometry_index(&boxes);
            let mut stream = rng::derive(5, "cov", salt as u64);
            for p in sample_ddm(&boxes, &dirs, &nearest, &cfg, &mut stream) {
                seen[p.direction as usize] = true;
            }
        }
        let covered = seen.iter().filter(|&&s| s).count();
        assert!(covered >= 8, "covered {covered} of 9 directions");
    }

    #[test]
    fn dde_dominant_labels_and_balance() {
        // A wide horizontal strip: most pairs are Left/Right.
        let boxes = boxes_grid(12, 1);
        let (dirs, _) = geometry_index(&boxes);
        let cfg = SamplingConfig::default();
        let mut stream = rng::derive(2, "dde", 0);
        let (positive, samples, dominant) = build_dde(boxes.len(), &dirs, &cfg, &mut stream);
        let dominant = dominant.expect("dominant direction");
        assert_eq!(positive.len(), 20);
        assert_eq!(samples.len(), 20);
        let n = boxes.len();
        let dom_share = positive
            .iter()
            .filter(|&&(i, j)| dirs[i * n + j] == dominant)
            .count() as f64
            / positive.len() as f64;
        assert!(dom_share >= 0.6, "dominant share {dom_share}");
        for s in &samples {
            let expect = dirs[s.pair.0 * n + s.pair.1] == dominant;
            assert_eq!(s.label, expect);
        }
    }

    #[test]
    fn dde_skips_small_or_undominated_documents() {
        let cfg = SamplingConfig::default();
        let mut stream = rng::derive(2, "dde", 1);
        // 3 segments: 6 ordered pairs < 40 candidates.
        let boxes = boxes_grid(3, 1);
        let (dirs, _) = geometry_index(&boxes);
        let (p, s, d) = build_dde(boxes.len(), &dirs, &cfg, &mut stream);
        assert!(p.is_empty() && s.is_empty() && d.is_none());

        // A square grid spreads pairs over all eight compass directions, so
        // no direction can fill 60% of the positive set.
        let boxes = square_grid(5, 5);
        let (dirs, _) = geometry_index(&boxes);
        let (p, s, d) = build_dde(boxes.len(), &dirs, &cfg, &mut stream);
        assert!(p.is_empty() && s.is_empty() && d.is_none());
    }

    #[test]
    fn cit_sampling_balances_and_matches_oracle() {
        let boxes = boxes_grid(4, 4);
        let cfg = SamplingConfig::default();
        let mut stream = rng::derive(3, "cit", 0);
        let triplets = sample_cit(&boxes, &cfg, &mut stream);
        assert_eq!(triplets.len(), cfg.cit_triplets);
        let mut collinear_count = 0usize;
        for &(i, j, k, c) in &triplets {
            assert_eq!(
                collinearity(&boxes[i], &boxes[j], &boxes[k]).index(),
                c as usize
            );
            if c != crate::geometry::CollinearClass::None.index() as u8 {
                collinear_count += 1;
            }
        }
        assert!(collinear_count >= cfg.cit_triplets / 2);
        assert!(sample_cit(&boxes_grid(2, 1), &cfg, &mut stream).is_empty());
    }

    #[test]
    fn collinear_enumeration_finds_rows_columns_diagonals() {
        let boxes = square_grid(3, 3);
        let found = collinear_triplets(&boxes);
        // 3 rows + 3 columns + 2 diagonals of the 3x3 grid.
        assert_eq!(found.len(), 8);
        let mut by_class = [0usize; 5];
        for &(_, _, _, c) in &found {
            by_class[c as usize] += 1;
        }
        assert_eq!(by_class, [3, 3, 1, 1, 0]);
    }

    #[test]
    fn vertical_stack_is_vertical() {
        let mut boxes = Vec::new();
        for r in 0..3 {
            // Left-aligned stack.
            boxes.push(BBox::new(50.0, 20.0 + 60.0 * r as f64, 160.0, 40.0 + 60.0 * r as f64).unwrap());
        }
        assert_eq!(
            collinearity(&boxes[0], &boxes[1], &boxes[2]),
            crate::geometry::CollinearClass::Vertical
        );
        let found = collinear_triplets(&boxes);
        assert_eq!(found.len(), 1);
        assert_eq!(found[0].3, crate::geometry::CollinearClass::Vertical.index() as u8);
    }

    #[test]
    fn masking_recipe_statistics() {
        let cfg = SamplingConfig::default();
        let tokens: Vec<usize> = (0..200_000).map(|i| 4 + (i % 40)).collect();
        let mut stream = rng::derive(4, "mask", 0);
        let mask = mask_tokens(&tokens, 64, &cfg, &mut stream);
        let rate = mask.positions.len() as f64 / tokens.len() as f64;
        assert!((rate - 0.15).abs() < 0.01, "mask rate {rate}");
        let masked = mask.replacements.iter().filter(|&&r| r == MASK_ID).count() as f64
            / mask.positions.len() as f64;
        assert!((masked - 0.8).abs() < 0.01, "mask-token share {masked}");
        let unchanged = mask
            .replacements
            .iter()
            .zip(&mask.originals)
            .filter(|(r, o)| r == o)
            .count() as f64
            / mask.positions.len() as f64;
        // Keep-unchanged plus the rare random draw that hits the original.
        assert!((unchanged - 0.1).abs() < 0.015, "unchanged share {unchanged}");
        assert!(mask_tokens(&[], 64, &cfg, &mut stream).positions.is_empty());
    }

    #[test]
    fn closed_form_losses_at_uniform_init() {
        let spec = GeneratorSpec {
            docs: 1,
            columns: 2,
            rows_per_column: 5,
            ..GeneratorSpec::default()
        };
        let docs = generate_synthetic_corpus(&spec, 21).unwrap();
        let vocab = Vocabulary::build(docs.iter());
        let cfg = tiny_model(vocab.len());
        let store = init_params::<f64>(&cfg, 1).unwrap();
        let tok = tokenize_document(&docs[0], &vocab, &cfg);
        let labels = generate_labels(&docs[0], &tok, &SamplingConfig::default(), vocab.len(), 9, 0);
        let mut g: Graph<f64> = Graph::new();
        let bound = BoundParams::bind(&mut g, &store, false);
        let (_, report) = pretrain_loss(&mut g, &bound, &cfg, &TaskToggles::default(), &tok, &labels)
            .unwrap()
            .expect("tasks present");
        assert!((report.ddm_direction - (9.0f64).ln()).abs() < 0.05);
        assert!((report.ddm_distance - (2.0f64).ln()).abs() < 0.05);
        assert!((report.cit - (5.0f64).ln()).abs() < 0.05);
        if report.dde > 0.0 {
            assert!((report.dde - (2.0f64).ln()).abs() < 0.05);
        }
        assert!((report.mvlm - (vocab.len() as f64).ln()).abs() < 0.05);
        // Additivity of the combined objective.
        let sum = report.mvlm + report.ddm() + report.dde + report.cit;
        assert!((report.total - sum).abs() < 1e-9);
    }

    #[test]
    fn disabled_tasks_contribute_zero() {
        let spec = GeneratorSpec {
            docs: 1,
            ..GeneratorSpec::default()
        };
        let docs = generate_synthetic_corpus(&spec, 22).unwrap();
        let vocab = Vocabulary::build(docs.iter());
        let cfg = tiny_model(vocab.len());
        let store = init_params::<f64>(&cfg, 2).unwrap();
        let tok = tokenize_document(&docs[0], &vocab, &cfg);
        let labels = generate_labels(&docs[0], &tok, &SamplingConfig::default(), vocab.len(), 9, 0);
        let tasks = TaskToggles {
            ddm: false,
            dde: false,
            cit: true,
            mvlm: false,
        };
        let mut g: Graph<f64> = Graph::new();
        let bound = BoundParams::bind(&mut g, &store, false);
        let (_, report) = pretrain_loss(&mut g, &bound, &cfg, &tasks, &tok, &labels)
            .unwrap()
            .expect("cit active");
        assert_eq!(report.mvlm, 0.0);
        assert_eq!(report.ddm_direction, 0.0);
        assert_eq!(report.ddm_distance, 0.0);
        assert_eq!(report.dde, 0.0);
        assert!((report.total - report.cit).abs() < 1e-12);
    }

    #[test]
    fn pretrain_smoke_runs_and_losses_finite() {
        let spec = GeneratorSpec {
            docs: 6,
            columns: 1,
            rows_per_column: 3,
            ..GeneratorSpec::default()
        };
        let docs = generate_synthetic_corpus(&spec, 23).unwrap();
        let vocab = Vocabulary::build(docs.iter());
        let cfg = tiny_model(vocab.len());
        let mut store = init_params::<f32>(&cfg, 3).unwrap();
        let sampling = SamplingConfig::default();
        let prepared: Vec<(TokenizedDoc, GeoLabelSet)> = docs
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let tok = tokenize_document(d, &vocab, &cfg);
                let labels = generate_labels(d, &tok, &sampling, vocab.len(), 7, i as u64);
                (tok, labels)
            })
            .collect();
        let opts = PretrainOptions {
            epochs: 1,
            lr: 1e-3,
            ..PretrainOptions::default()
        };
        let logs = pretrain_loop(&mut store, &cfg, &opts, &prepared).unwrap();
        assert_eq!(logs.len(), 1);
        assert!(logs[0].losses.is_finite());
        assert!(logs[0].losses.total > 0.0);
    }
}
