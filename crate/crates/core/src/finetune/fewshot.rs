//! Few-shot fine-tuning harness: subsample k training documents, fine-tune,
//! evaluate, over a grid of shot counts and seeds, contrasting pre-trained
//! relation heads against freshly initialized ones on the same backbone.

use serde::{Deserialize, Serialize};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::corpus::Document;
use crate::encoder::TokenizedDoc;
use crate::error::{Error, Result};
use crate::model::{init_params, ModelConfig};
use crate::nn::ParameterStore;
use crate::rng;

use super::{
    decode_rsf, evaluate, finetune_loop, gold_doc, predict_document, FinetuneOptions,
    MetricsReport,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FewShotPoint {
    pub shots: usize,
    pub seed: u64,
    pub pretrained_heads: bool,
    pub re_f1: f64,
    pub ser_f1: f64,
}

/// Replaces the relation-head parameters with a fresh initialization,
/// keeping the backbone.
pub fn reinit_heads(
    store: &ParameterStore<f32>,
    cfg: &ModelConfig,
    seed: u64,
) -> Result<ParameterStore<f32>> {
    let fresh = init_params::<f32>(cfg, seed)?;
    let mut out = store.clone();
    for name in cfg.head_parameter_names() {
        out.set(&name, fresh.get(&name).expect("declared head param").clone())?;
    }
    Ok(out)
}

/// Fine-tunes a copy of `store` on `train` and scores it on `test` with
/// plain thresholded decoding.
pub fn finetune_and_score(
    store: &ParameterStore<f32>,
    cfg: &ModelConfig,
    opts: &FinetuneOptions,
    train: &[(Document, TokenizedDoc)],
    test: &[(Document, TokenizedDoc)],
    rsf_tau: Option<f64>,
) -> Result<MetricsReport> {
    let mut tuned = store.clone();
    finetune_loop(&mut tuned, cfg, opts, train)?;
    score_model(&tuned, cfg, opts, test, rsf_tau)
}

/// Evaluation of an already fine-tuned model.
pub fn score_model(
    store: &ParameterStore<f32>,
    cfg: &ModelConfig,
    opts: &FinetuneOptions,
    test: &[(Document, TokenizedDoc)],
    rsf_tau: Option<f64>,
) -> Result<MetricsReport> {
    let mut predictions = Vec::with_capacity(test.len());
    let mut gold = Vec::with_capacity(test.len());
    for (doc, tok) in test {
        let pred = predict_document(store, cfg, opts, doc, tok)?;
        let decoded = match rsf_tau {
            Some(tau) => decode_rsf(&pred.relations, tau, true),
            None => decode_rsf(&pred.relations, 0.0, false),
        };
        predictions.push((pred.doc_id.clone(), decoded, pred.tags));
        gold.push(gold_doc(doc, tok));
    }
    evaluate(&predictions, &gold)
}

/// Runs the shot-count x seed grid. Every point fine-tunes both head
/// variants from the same backbone and scores them on the fixed test set.
pub fn few_shot_harness(
    pretrained: &ParameterStore<f32>,
    cfg: &ModelConfig,
    opts: &FinetuneOptions,
    train: &[(Document, TokenizedDoc)],
    test: &[(Document, TokenizedDoc)],
    shots: &[usize],
    seeds: &[u64],
) -> Result<Vec<FewShotPoint>> {
    let mut points = Vec::new();
    for &shot in shots {
        if shot == 0 || shot > train.len() {
            return Err(Error::Evaluation(format!(
                "shot count {shot} outside 1..={}",
                train.len()
            )));
        }
        for &seed in seeds {
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut rng::derive(seed, "fewshot-subsample", shot as u64));
            let subset: Vec<(Document, TokenizedDoc)> = order[..shot]
                .iter()
                .map(|&i| train[i].clone())
                .collect();

            for pretrained_heads in [true, false] {
                let base = if pretrained_heads {
                    pretrained.clone()
                } else {
                    let reinit_seed: u64 = rng::derive(seed, "reinit", shot as u64).gen();
                    reinit_heads(pretrained, cfg, reinit_seed)?
                };
                let report = finetune_and_score(&base, cfg, opts, &subset, test, None)?;
                points.push(FewShotPoint {
                    shots: shot,
                    seed,
                    pretrained_heads,
                    re_f1: report.re.f1,
                    ser_f1: report.ser.f1,
                });
            }
        }
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, GeneratorSpec, Vocabulary};
    use crate::encoder::tokenize_document;

    fn setup() -> (ModelConfig, ParameterStore<f32>, Vec<(Document, TokenizedDoc)>) {
        let spec = GeneratorSpec {
            docs: 5,
            columns: 1,
            rows_per_column: 3,
            ..GeneratorSpec::default()
        };
        let docs = generate_synthetic_corpus(&spec, 51).unwrap();
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
        let store = init_params::<f32>(&cfg, 8).unwrap();
        let prepared: Vec<(Document, TokenizedDoc)> = docs
            .iter()
            .map(|d| (d.clone(), tokenize_document(d, &vocab, &cfg)))
            .collect();
        (cfg, store, prepared)
    }

    #[test]
    fn shot_count_must_fit_corpus() {
        let (cfg, store, prepared) = setup();
        let opts = FinetuneOptions {
            epochs: 1,
            ..FinetuneOptions::default()
        };
        let err = few_shot_harness(&store, &cfg, &opts, &prepared[..3], &prepared[3..], &[9], &[1]);
        assert!(err.is_err());
    }

    #[test]
    fn one_shot_grid_completes() {
        let (cfg, store, prepared) = setup();
        let opts = FinetuneOptions {
            epochs: 1,
            ..FinetuneOptions::default()
        };
        let points =
            few_shot_harness(&store, &cfg, &opts, &prepared[..3], &prepared[3..], &[1, 3], &[1])
                .unwrap();
        // 2 shot counts x 1 seed x 2 variants.
        assert_eq!(points.len(), 4);
        assert!(points.iter().all(|p| p.re_f1.is_finite()));
        // shots = full train size reduces to standard fine-tuning.
        assert!(points.iter().any(|p| p.shots == 3));
    }

    #[test]
    fn reinit_heads_changes_heads_only() {
        let (cfg, store, _) = setup();
        let fresh = reinit_heads(&store, &cfg, 99).unwrap();
        assert_eq!(
            fresh.get("enc.0.attn.wq").unwrap(),
            store.get("enc.0.attn.wq").unwrap()
        );
        assert_ne!(
            fresh.get("pair.w").unwrap(),
            store.get("pair.w").unwrap()
        );
    }
}
