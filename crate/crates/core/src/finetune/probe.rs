//! Linear direction probe over a frozen encoder.
//!
//! Measures how much pair-direction information the encoder retains: a
//! fresh linear classifier is trained on concatenated segment-feature pairs
//! against oracle direction labels, then scored on held-out documents by
//! accuracy, cross-entropy, and mean prediction entropy.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::encoder::{encode_document, TokenizedDoc};
use crate::error::{Error, Result};
use crate::geometry::direction;
use crate::model::{BoundParams, ModelConfig, DIRECTION_CLASSES};
use crate::nn::{AdamConfig, Graph, ParameterStore, Tensor};
use crate::rng;

use super::metrics::ProbeStats;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeOptions {
    pub pairs_per_doc: usize,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions {
            pairs_per_doc: 24,
            epochs: 60,
            lr: 0.05,
        }
    }
}

/// Frozen forward pass: per-document segment features as host tensors.
/// Documents are independent, so extraction runs data-parallel.
pub fn extract_segment_features(
    store: &ParameterStore<f32>,
    cfg: &ModelConfig,
    docs: &[(Document, TokenizedDoc)],
) -> Result<Vec<Tensor<f32>>> {
    docs.par_iter()
        .map(|(_, tok)| {
            let mut g: Graph<f32> = Graph::new();
            let bound = BoundParams::bind(&mut g, store, false);
            let enc = encode_document(&mut g, &bound, cfg, tok)?;
            Ok(g.value(enc.segments).clone())
        })
        .collect()
}

fn build_pair_set(
    docs: &[(Document, TokenizedDoc)],
    features: &[Tensor<f32>],
    pairs_per_doc: usize,
    seed: u64,
    tag: &str,
) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (idx, ((doc, tok), feats)) in docs.iter().zip(features).enumerate() {
        let n = tok.n_segments;
        if n < 2 {
            continue;
        }
        let mut stream = rng::derive(seed, tag, idx as u64);
        let mut pairs: Vec<(usize, usize)> = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    pairs.push((i, j));
                }
            }
        }
        pairs.shuffle(&mut stream);
        pairs.truncate(pairs_per_doc);
        for (i, j) in pairs {
            let mut row = Vec::with_capacity(2 * feats.cols());
            row.extend(feats.row(i).iter().map(|&v| f64::from(v)));
            row.extend(feats.row(j).iter().map(|&v| f64::from(v)));
            xs.push(row);
            ys.push(direction(&doc.segments[i].bbox, &doc.segments[j].bbox).index());
        }
    }
    (xs, ys)
}

/// Trains the probe on `train` and reports statistics on `test`. Encoder
/// parameters are read-only throughout; only the probe classifier learns.
pub fn direction_probe(
    store: &ParameterStore<f32>,
    cfg: &ModelConfig,
    train: &[(Document, TokenizedDoc)],
    test: &[(Document, TokenizedDoc)],
    opts: &ProbeOptions,
    seed: u64,
) -> Result<ProbeStats> {
    let train_feats = extract_segment_features(store, cfg, train)?;
    let test_feats = extract_segment_features(store, cfg, test)?;
    let (train_x, train_y) = build_pair_set(train, &train_feats, opts.pairs_per_doc, seed, "probe-train");
    let (test_x, test_y) = build_pair_set(test, &test_feats, opts.pairs_per_doc, seed, "probe-test");
    if train_x.is_empty() || test_x.is_empty() {
        return Err(Error::Evaluation(
            "probe needs documents with at least two segments".into(),
        ));
    }

    let x_train = Tensor::from_rows(&train_x)?;
    let x_test = Tensor::from_rows(&test_x)?;
    let dim = x_train.cols();

    let mut probe: ParameterStore<f64> = ParameterStore::new();
    probe.insert("w", Tensor::zeros(vec![dim, DIRECTION_CLASSES]))?;
    probe.insert("b", Tensor::zeros(vec![DIRECTION_CLASSES]))?;
    let adam = AdamConfig {
        weight_decay: 0.0,
        ..AdamConfig::default()
    };
    for _ in 0..opts.epochs {
        let mut g: Graph<f64> = Graph::new();
        let x = g.input(x_train.clone());
        let w = g.param(probe.get("w").unwrap().clone());
        let b = g.param(probe.get("b").unwrap().clone());
        let logits = g.affine(x, w, b)?;
        let loss = g.cross_entropy_logits(logits, &train_y)?;
        let mut grads = g.backward(loss)?;
        probe.clear_grads();
        if let Some(gw) = grads.take(w) {
            probe.accumulate_grad("w", gw)?;
        }
        if let Some(gb) = grads.take(b) {
            probe.accumulate_grad("b", gb)?;
        }
        probe.adam_step(opts.lr, &adam)?;
    }

    let mut g: Graph<f64> = Graph::new();
    let x = g.input(x_test);
    let w = g.input(probe.get("w").unwrap().clone());
    let b = g.input(probe.get("b").unwrap().clone());
    let logits = g.affine(x, w, b)?;
    let probs = g.softmax_rows(logits);
    let pv = g.value(probs);
    let rows = pv.rows();
    let mut correct = 0usize;
    let mut entropy = 0.0f64;
    let mut xent = 0.0f64;
    for r in 0..rows {
        let row = pv.row(r);
        let mut argmax = 0usize;
        for (k, &p) in row.iter().enumerate() {
            if p > row[argmax] {
                argmax = k;
            }
            if p > 0.0 {
                entropy -= p * p.ln();
            }
        }
        xent -= row[test_y[r]].max(1e-300).ln();
        if argmax == test_y[r] {
            correct += 1;
        }
    }
    Ok(ProbeStats {
        entropy: entropy / rows as f64,
        cross_entropy: xent / rows as f64,
        accuracy: correct as f64 / rows as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, GeneratorSpec, Vocabulary};
    use crate::encoder::tokenize_document;
    use crate::model::init_params;

    #[test]
    fn uniform_prediction_entropy_bound() {
        // A fresh probe on an uninformative encoder cannot exceed the
        // uniform entropy ceiling.
        let ceiling = (DIRECTION_CLASSES as f64).ln();
        assert!((ceiling - 2.1972).abs() < 1e-3);
    }

    #[test]
    fn probe_runs_on_random_encoder() {
        let spec = GeneratorSpec {
            docs: 6,
            columns: 2,
            rows_per_column: 3,
            ..GeneratorSpec::default()
        };
        let docs = generate_synthetic_corpus(&spec, 41).unwrap();
        let vocab = Vocabulary::build(docs.iter());
        let cfg = ModelConfig {
            vocab_size: vocab.len(),
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
        };
        let store = init_params::<f32>(&cfg, 6).unwrap();
        let prepared: Vec<(Document, TokenizedDoc)> = docs
            .iter()
            .map(|d| (d.clone(), tokenize_document(d, &vocab, &cfg)))
            .collect();
        let opts = ProbeOptions {
            pairs_per_doc: 10,
            epochs: 5,
            lr: 0.05,
        };
        let stats = direction_probe(&store, &cfg, &prepared[..4], &prepared[4..], &opts, 3).unwrap();
        assert!(stats.accuracy >= 0.0 && stats.accuracy <= 1.0);
        assert!(stats.entropy <= (DIRECTION_CLASSES as f64).ln() + 1e-9);
        assert!(stats.cross_entropy.is_finite());
    }
}
