//! Fine-tuning for entity tagging and link extraction, plus inference-time
//! decoding, the rule-based geometric filter, evaluation, probing, and the
//! few-shot harness.

mod fewshot;
mod infer;
mod metrics;
mod probe;

pub use fewshot::{
    few_shot_harness, finetune_and_score, reinit_heads, score_model, FewShotPoint,
};
pub use infer::{
    decode_rsf, default_constraint_delta, geometric_constraint_filter, DecodedRelations,
};
pub use metrics::{
    decode_spans, evaluate, f1_from, GoldDoc, MetricsReport, PrF1, ProbeStats, ReportMeta,
};
pub use probe::{direction_probe, extract_segment_features, ProbeOptions};

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::encoder::{encode_document, TokenizedDoc};
use crate::error::{Error, Result};
use crate::heads::{self, RelationMatrix};
use crate::model::{BoundParams, ModelConfig};
use crate::nn::{linear_decay, AdamConfig, Graph, NodeId, ParameterStore, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneOptions {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// When false, the refinement head is absent: no refined-matrix loss and
    /// decoding reads the coarse matrix.
    pub use_rfe: bool,
    /// Weight of the father-probability variance penalty; 0 disables it.
    pub variance_weight: f64,
}

impl Default for FinetuneOptions {
    fn default() -> Self {
        FinetuneOptions {
            epochs: 30,
            lr: 1e-3,
            weight_decay: 0.01,
            use_rfe: true,
            variance_weight: 1.0,
        }
    }
}

/// Loss components of one step or epoch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FinetuneLosses {
    pub ser: f64,
    pub re_coarse: f64,
    pub re_refined: f64,
    pub variance: f64,
    pub total: f64,
}

impl FinetuneLosses {
    pub fn is_finite(&self) -> bool {
        [self.ser, self.re_coarse, self.re_refined, self.variance, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    fn accumulate(&mut self, o: &FinetuneLosses) {
        self.ser += o.ser;
        self.re_coarse += o.re_coarse;
        self.re_refined += o.re_refined;
        self.variance += o.variance;
        self.total += o.total;
    }

    fn scaled(&self, s: f64) -> FinetuneLosses {
        FinetuneLosses {
            ser: self.ser * s,
            re_coarse: self.re_coarse * s,
            re_refined: self.re_refined * s,
            variance: self.variance * s,
            total: self.total * s,
        }
    }
}

/// Gold link matrix over the kept segments, as off-diagonal BCE targets in
/// row-major pair order.
fn gold_targets<T: Real>(doc: &Document, n: usize) -> (Vec<usize>, Vec<T>) {
    let mut rows = Vec::with_capacity(n * n - n);
    let mut targets = Vec::with_capacity(n * n - n);
    for son in 0..n {
        for father in 0..n {
            if son == father {
                continue;
            }
            rows.push(son * n + father);
            let linked = doc.links.contains(&(father, son));
            targets.push(if linked { T::ONE } else { T::ZERO });
        }
    }
    (rows, targets)
}

/// Sons with more than one gold father, restricted to kept segments.
pub fn multi_father_sons(doc: &Document, n: usize) -> Vec<(usize, Vec<usize>)> {
    let mut out = Vec::new();
    for (son, fathers) in doc.fathers().iter().enumerate().take(n) {
        let kept: Vec<usize> = fathers.iter().copied().filter(|&f| f < n).collect();
        if kept.len() > 1 {
            out.push((son, kept));
        }
    }
    out
}

/// Builds the combined fine-tuning loss for one document: tag cross-entropy,
/// binary cross-entropy on both relation matrices against gold links, and
/// the variance penalty tying the refined father probabilities of gold
/// multi-father sons together.
pub fn finetune_loss<T: Real>(
    g: &mut Graph<T>,
    bound: &BoundParams,
    cfg: &ModelConfig,
    opts: &FinetuneOptions,
    doc: &Document,
    tok: &TokenizedDoc,
) -> Result<(NodeId, FinetuneLosses)> {
    let enc = encode_document(g, bound, cfg, tok)?;
    let n = enc.n_segments;
    let mut report = FinetuneLosses::default();

    let tags = heads::ser_logits(g, bound, enc.tokens)?;
    let mut total = g.cross_entropy_logits(tags, &tok.tags)?;
    report.ser = g.value(total).item().to_f64();

    if n >= 2 {
        let (pair_rows, targets) = gold_targets::<T>(doc, n);
        let r0_logits = heads::crp_logits_all(g, bound, enc.segments)?;
        let r0_flat = g.reshape(r0_logits, vec![n * n, 1])?;
        let r0_off = g.gather_rows(r0_flat, &pair_rows)?;
        let re0 = g.bce_with_logits(r0_off, &targets)?;
        report.re_coarse = g.value(re0).item().to_f64();
        total = g.add(total, re0)?;

        if opts.use_rfe {
            let r0_probs = {
                let probs = g.value(r0_logits).map(|v| T::ONE / (T::ONE + (-v).exp()));
                RelationMatrix::new(probs)
            };
            let refined = heads::refine_relations(g, bound, cfg, enc.segments, r0_logits, &r0_probs)?;
            let r1_flat = g.reshape(refined.r1_logits, vec![n * n, 1])?;
            let r1_off = g.gather_rows(r1_flat, &pair_rows)?;
            let re1 = g.bce_with_logits(r1_off, &targets)?;
            report.re_refined = g.value(re1).item().to_f64();
            total = g.add(total, re1)?;

            if opts.variance_weight > 0.0 {
                let sons = multi_father_sons(doc, n);
                if !sons.is_empty() {
                    let r1_probs = g.sigmoid(r1_flat);
                    let mut var_sum: Option<NodeId> = None;
                    for (son, fathers) in &sons {
                        let rows: Vec<usize> = fathers.iter().map(|f| son * n + f).collect();
                        let probs = g.gather_rows(r1_probs, &rows)?;
                        let v = g.variance(probs);
                        var_sum = Some(match var_sum {
                            None => v,
                            Some(acc) => g.add(acc, v)?,
                        });
                    }
                    let var = var_sum.expect("non-empty sons");
                    report.variance = g.value(var).item().to_f64();
                    let weighted = g.scale(var, T::from_f64(opts.variance_weight));
                    total = g.add(total, weighted)?;
                }
            }
        }
    }

    report.total = g.value(total).item().to_f64();
    Ok((total, report))
}

/// One epoch-averaged loss record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneEpochLog {
    pub epoch: usize,
    pub losses: FinetuneLosses,
}

/// Fine-tunes with Adam and linear decay; one optimizer step per document.
pub fn finetune_loop(
    store: &mut ParameterStore<f32>,
    cfg: &ModelConfig,
    opts: &FinetuneOptions,
    docs: &[(Document, TokenizedDoc)],
) -> Result<Vec<FinetuneEpochLog>> {
    let adam = AdamConfig {
        weight_decay: opts.weight_decay,
        ..AdamConfig::default()
    };
    let total_steps = (opts.epochs * docs.len()) as u64;
    let mut logs = Vec::with_capacity(opts.epochs);
    let mut step = 0u64;
    for epoch in 0..opts.epochs {
        let mut sum = FinetuneLosses::default();
        for (doc, tok) in docs {
            let mut g: Graph<f32> = Graph::new();
            let bound = BoundParams::bind(&mut g, store, true);
            let (loss, report) = finetune_loss(&mut g, &bound, cfg, opts, doc, tok)?;
            if !report.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite fine-tuning loss on document `{}` at step {step}: {report:?}",
                    doc.id
                )));
            }
            let mut grads = g.backward(loss)?;
            store.clear_grads();
            bound.apply_grads(&mut grads, store)?;
            let lr = linear_decay(opts.lr, step, total_steps);
            store.adam_step(lr, &adam)?;
            step += 1;
            sum.accumulate(&report);
        }
        let losses = sum.scaled(1.0 / docs.len().max(1) as f64);
        logs.push(FinetuneEpochLog { epoch, losses });
    }
    Ok(logs)
}

/// Model outputs for one document at inference time.
#[derive(Debug, Clone)]
pub struct DocPrediction {
    pub doc_id: String,
    pub n_segments: usize,
    /// Predicted tag per token.
    pub tags: Vec<usize>,
    /// The matrix decoding reads: refined when the refinement head is
    /// in use, coarse otherwise.
    pub relations: RelationMatrix<f32>,
}

/// Forward-only pass producing tags and the relation matrix.
pub fn predict_document(
    store: &ParameterStore<f32>,
    cfg: &ModelConfig,
    opts: &FinetuneOptions,
    doc: &Document,
    tok: &TokenizedDoc,
) -> Result<DocPrediction> {
    let mut g: Graph<f32> = Graph::new();
    let bound = BoundParams::bind(&mut g, store, false);
    let enc = encode_document(&mut g, &bound, cfg, tok)?;
    let n = enc.n_segments;

    let tag_logits = heads::ser_logits(&mut g, &bound, enc.tokens)?;
    let tags: Vec<usize> = (0..tok.len())
        .map(|t| {
            let row = g.value(tag_logits).row(t);
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
                .map(|(i, _)| i)
                .unwrap_or(0)
        })
        .collect();

    let relations = if n == 0 {
        RelationMatrix::new(Tensor::zeros(vec![0, 0]))
    } else {
        let r0_logits = heads::crp_logits_all(&mut g, &bound, enc.segments)?;
        let r0_probs = RelationMatrix::new(
            g.value(r0_logits).map(|v| 1.0 / (1.0 + (-v).exp())),
        );
        if opts.use_rfe && n >= 2 {
            let refined =
                heads::refine_relations(&mut g, &bound, cfg, enc.segments, r0_logits, &r0_probs)?;
            let probs = g.sigmoid(refined.r1_logits);
            RelationMatrix::new(g.value(probs).clone())
        } else {
            r0_probs
        }
    };

    Ok(DocPrediction {
        doc_id: doc.id.clone(),
        n_segments: n,
        tags,
        relations,
    })
}

/// Convenience: gold view of a document for evaluation.
pub fn gold_doc(doc: &Document, tok: &TokenizedDoc) -> GoldDoc {
    let links: BTreeSet<(usize, usize)> = doc
        .links
        .iter()
        .copied()
        .filter(|&(f, s)| f < tok.n_segments && s < tok.n_segments)
        .collect();
    GoldDoc {
        doc_id: doc.id.clone(),
        links,
        tags: tok.tags.clone(),
    }
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

    #[test]
    fn variance_term_examples() {
        // Equal probabilities: zero variance. Direct check of the graph op
        // used in the loss.
        let mut g: Graph<f64> = Graph::new();
        let equal = g.input(Tensor::new(vec![2], vec![0.8, 0.8]).unwrap());
        let v = g.variance(equal);
        assert_eq!(g.value(v).item(), 0.0);
        let spread = g.input(Tensor::new(vec![2], vec![0.9, 0.5]).unwrap());
        let v = g.variance(spread);
        assert!((g.value(v).item() - 0.04).abs() < 1e-12);
    }

    #[test]
    fn single_father_sons_are_excluded_from_variance() {
        let spec = GeneratorSpec {
            docs: 1,
            columns: 1,
            rows_per_column: 4,
            multi_father_rate: 0.0,
            multi_son_rate: 0.0,
            header_rate: 0.0,
            other_rate: 0.0,
            ..GeneratorSpec::default()
        };
        let docs = generate_synthetic_corpus(&spec, 31).unwrap();
        assert!(multi_father_sons(&docs[0], docs[0].segments.len()).is_empty());

        let multi = GeneratorSpec {
            multi_father_rate: 1.0,
            ..spec
        };
        let docs = generate_synthetic_corpus(&multi, 31).unwrap();
        assert!(!multi_father_sons(&docs[0], docs[0].segments.len()).is_empty());
    }

    #[test]
    fn finetune_loss_components_present_and_additive() {
        let spec = GeneratorSpec {
            docs: 1,
            columns: 2,
            rows_per_column: 3,
            multi_father_rate: 0.5,
            ..GeneratorSpec::default()
        };
        let docs = generate_synthetic_corpus(&spec, 32).unwrap();
        let vocab = Vocabulary::build(docs.iter());
        let cfg = tiny_model(vocab.len());
        let store = init_params::<f64>(&cfg, 4).unwrap();
        let tok = tokenize_document(&docs[0], &vocab, &cfg);
        let opts = FinetuneOptions::default();
        let mut g: Graph<f64> = Graph::new();
        let bound = BoundParams::bind(&mut g, &store, false);
        let (_, report) = finetune_loss(&mut g, &bound, &cfg, &opts, &docs[0], &tok).unwrap();
        assert!(report.ser > 0.0);
        assert!(report.re_coarse > 0.0);
        assert!(report.re_refined > 0.0);
        let sum = report.ser
            + report.re_coarse
            + report.re_refined
            + opts.variance_weight * report.variance;
        assert!((report.total - sum).abs() < 1e-9);

        // Without the refinement head both its loss and the variance term
        // vanish.
        let bare = FinetuneOptions {
            use_rfe: false,
            ..opts
        };
        let mut g2: Graph<f64> = Graph::new();
        let bound2 = BoundParams::bind(&mut g2, &store, false);
        let (_, report2) = finetune_loss(&mut g2, &bound2, &cfg, &bare, &docs[0], &tok).unwrap();
        assert_eq!(report2.re_refined, 0.0);
        assert_eq!(report2.variance, 0.0);
    }

    #[test]
    fn finetune_smoke_and_prediction_shapes() {
        let spec = GeneratorSpec {
            docs: 3,
            columns: 1,
            rows_per_column: 3,
            ..GeneratorSpec::default()
        };
        let docs = generate_synthetic_corpus(&spec, 33).unwrap();
        let vocab = Vocabulary::build(docs.iter());
        let cfg = tiny_model(vocab.len());
        let mut store = init_params::<f32>(&cfg, 5).unwrap();
        let prepared: Vec<(Document, TokenizedDoc)> = docs
            .iter()
            .map(|d| (d.clone(), tokenize_document(d, &vocab, &cfg)))
            .collect();
        let opts = FinetuneOptions {
            epochs: 2,
            lr: 1e-3,
            ..FinetuneOptions::default()
        };
        let logs = finetune_loop(&mut store, &cfg, &opts, &prepared).unwrap();
        assert_eq!(logs.len(), 2);
        assert!(logs[1].losses.is_finite());

        let (doc, tok) = &prepared[0];
        let pred = predict_document(&store, &cfg, &opts, doc, tok).unwrap();
        assert_eq!(pred.tags.len(), tok.len());
        assert_eq!(pred.relations.n(), tok.n_segments);
        assert!(pred.relations.probs.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }
}
