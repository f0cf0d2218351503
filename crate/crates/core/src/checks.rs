//! Gradient-verification registry: every primitive, every composite layer,
//! and every head, each compared against central finite differences in f64.

use rand::Rng;

use crate::encoder::{encode_document, tokenize_document, TokenizedDoc};
use crate::error::Result;
use crate::heads;
use crate::model::{init_params, transformer_block, BoundParams, ModelConfig};
use crate::nn::{grad_check, Graph, NodeId, ParameterStore, Tensor, DEFAULT_EPS};
use crate::rng;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
}

fn randn(shape: Vec<usize>, salt: u64) -> Tensor<f64> {
    let mut stream = rng::derive(1234, "check", salt);
    let len = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| stream.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn check_cfg() -> ModelConfig {
    ModelConfig {
        vocab_size: 12,
        hidden: 8,
        layers: 2,
        heads: 2,
        feed_forward: 12,
        rel_dim: 8,
        rfe_heads: 2,
        rfe_feed_forward: 8,
        max_tokens: 24,
        max_segments: 8,
        coord_buckets: 20,
        positive_cap: 6,
        ln_eps: 1e-5,
    }
}

/// Store with every zero-initialized head randomized, so head checks
/// exercise non-trivial gradients.
fn randomized_store(cfg: &ModelConfig) -> ParameterStore<f64> {
    let mut store = init_params::<f64>(cfg, 777).unwrap();
    let names: Vec<String> = store.names().map(String::from).collect();
    for (salt, name) in names.iter().enumerate() {
        let current = store.get(name).unwrap();
        if current.data().iter().all(|&v| v == 0.0) {
            let shape = current.shape().to_vec();
            let fresh = randn(shape, 5000 + salt as u64).map(|v| v * 0.3);
            store.set(name, fresh).unwrap();
        }
    }
    store
}

/// Parameter subset (by name prefix) with deterministic order.
fn subset(store: &ParameterStore<f64>, prefixes: &[&str]) -> Vec<(String, Tensor<f64>)> {
    store
        .iter()
        .filter(|(name, _)| prefixes.iter().any(|p| name.starts_with(p)))
        .map(|(name, t)| (name.to_string(), t.clone()))
        .collect()
}

/// Runs a check where the inputs are `extras` followed by a named parameter
/// subset; the closure receives the graph, bound subset, and extra ids.
fn named_check<F>(
    results: &mut Vec<CheckResult>,
    name: &str,
    params: Vec<(String, Tensor<f64>)>,
    extras: Vec<Tensor<f64>>,
    build: F,
) -> Result<()>
where
    F: Fn(&mut Graph<f64>, &BoundParams, &[NodeId]) -> Result<NodeId>,
{
    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    let n_extras = extras.len();
    let mut inputs = extras;
    inputs.extend(params.into_iter().map(|(_, t)| t));
    let err = grad_check(
        |g, ids| {
            let bound = BoundParams::from_pairs(
                names
                    .iter()
                    .cloned()
                    .zip(ids[n_extras..].iter().copied()),
            );
            build(g, &bound, &ids[..n_extras])
        },
        &inputs,
        DEFAULT_EPS,
    )?;
    results.push(CheckResult {
        name: name.to_string(),
        max_rel_err: err,
    });
    Ok(())
}

fn demo_tokens(cfg: &ModelConfig) -> TokenizedDoc {
    use crate::corpus::{Document, EntityLabel, TextSegment, Vocabulary, Word};
    use crate::geometry::BBox;
    use std::collections::BTreeSet;
    let word = |t: &str, x: f64, y: f64| Word {
        text: t.into(),
        bbox: BBox::new(x, y, x + 18.0, y + 10.0).unwrap(),
    };
    let segs = vec![
        TextSegment::from_words(
            0,
            EntityLabel::Question,
            vec![word("ref", 10.0, 10.0), word("code", 30.0, 10.0)],
        )
        .unwrap(),
        TextSegment::from_words(1, EntityLabel::Answer, vec![word("42", 80.0, 10.0)]).unwrap(),
        TextSegment::from_words(2, EntityLabel::Header, vec![word("batch", 10.0, 40.0)]).unwrap(),
    ];
    let doc = Document::new("check".into(), segs, BTreeSet::new()).unwrap();
    let vocab = Vocabulary::build([&doc]);
    tokenize_document(&doc, &vocab, cfg)
}

/// Runs the full registry; each entry reports its max relative error.
pub fn run_all() -> Result<Vec<CheckResult>> {
    let cfg = check_cfg();
    let store = randomized_store(&cfg);
    let mut out = Vec::new();
    let r = &mut out;

    // Primitives.
    named_check(r, "add", vec![], vec![randn(vec![3, 4], 1), randn(vec![3, 4], 2)], |g, _, x| {
        let s = g.add(x[0], x[1])?;
        let s = g.sigmoid(s);
        Ok(g.sum(s))
    })?;
    named_check(r, "mul", vec![], vec![randn(vec![3, 4], 3), randn(vec![3, 4], 4)], |g, _, x| {
        let s = g.mul(x[0], x[1])?;
        Ok(g.sum(s))
    })?;
    named_check(r, "scale-offset", vec![], vec![randn(vec![5], 5)], |g, _, x| {
        let s = g.scale(x[0], -1.7);
        let s = g.tanh_node(s);
        Ok(g.mean(s))
    })?;
    named_check(r, "matmul", vec![], vec![randn(vec![3, 4], 6), randn(vec![4, 2], 7)], |g, _, x| {
        let s = g.matmul(x[0], x[1])?;
        let s = g.gelu(s);
        Ok(g.sum(s))
    })?;
    named_check(r, "transpose", vec![], vec![randn(vec![3, 4], 8)], |g, _, x| {
        let t = g.transpose(x[0])?;
        let s = g.sigmoid(t);
        Ok(g.sum(s))
    })?;
    named_check(
        r,
        "concat-slice-gather",
        vec![],
        vec![randn(vec![4, 3], 9), randn(vec![4, 2], 10)],
        |g, _, x| {
            let cat = g.concat_cols(x[0], x[1])?;
            let sl = g.slice_cols(cat, 1, 3)?;
            let gathered = g.gather_rows(sl, &[0, 2, 2, 3])?;
            let s = g.tanh_node(gathered);
            Ok(g.sum(s))
        },
    )?;
    named_check(r, "softmax-rows", vec![], vec![randn(vec![4, 5], 11)], |g, _, x| {
        let p = g.softmax_rows(x[0]);
        let w = g.input(randn(vec![4, 5], 12));
        let s = g.mul(p, w)?;
        Ok(g.sum(s))
    })?;
    named_check(r, "sigmoid", vec![], vec![randn(vec![6], 13)], |g, _, x| {
        let s = g.sigmoid(x[0]);
        Ok(g.sum(s))
    })?;
    named_check(r, "tanh", vec![], vec![randn(vec![6], 14)], |g, _, x| {
        let s = g.tanh_node(x[0]);
        Ok(g.sum(s))
    })?;
    named_check(r, "gelu", vec![], vec![randn(vec![6], 15)], |g, _, x| {
        let s = g.gelu(x[0]);
        Ok(g.sum(s))
    })?;
    named_check(
        r,
        "layer-norm",
        vec![],
        vec![randn(vec![4, 6], 16), randn(vec![6], 17), randn(vec![6], 18)],
        |g, _, x| {
            let y = g.layer_norm(x[0], x[1], x[2], 1e-5)?;
            let w = g.input(randn(vec![4, 6], 19));
            let s = g.mul(y, w)?;
            Ok(g.sum(s))
        },
    )?;
    named_check(r, "row-sum-mean", vec![], vec![randn(vec![4, 3], 20)], |g, _, x| {
        let rs = g.row_sum(x[0]);
        let s = g.sigmoid(rs);
        Ok(g.mean(s))
    })?;
    named_check(r, "cross-entropy", vec![], vec![randn(vec![5, 7], 21)], |g, _, x| {
        g.cross_entropy_logits(x[0], &[0, 3, 6, 2, 2])
    })?;
    named_check(r, "bce-with-logits", vec![], vec![randn(vec![8], 22)], |g, _, x| {
        g.bce_with_logits(x[0], &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0])
    })?;
    named_check(r, "variance", vec![], vec![randn(vec![5], 23)], |g, _, x| {
        Ok(g.variance(x[0]))
    })?;
    named_check(
        r,
        "affine",
        vec![],
        vec![randn(vec![3, 4], 24), randn(vec![4, 5], 25), randn(vec![5], 26)],
        |g, _, x| {
            let y = g.affine(x[0], x[1], x[2])?;
            let s = g.sigmoid(y);
            Ok(g.sum(s))
        },
    )?;
    named_check(
        r,
        "bilinear-form",
        vec![],
        vec![randn(vec![3, 4], 27), randn(vec![4, 4], 28), randn(vec![3, 4], 29)],
        |g, _, x| {
            let y = g.bilinear_form(x[0], x[1], x[2])?;
            let s = g.sigmoid(y);
            Ok(g.sum(s))
        },
    )?;

    // Attention and transformer blocks.
    named_check(
        r,
        "multi-head-attention",
        subset(&store, &["enc.0.attn."]),
        vec![randn(vec![5, 8], 30)],
        |g, bound, x| {
            let w = bound.attention("enc.0.attn");
            let y = g.multi_head_attention(x[0], x[0], &w, 2, None)?;
            let s = g.sigmoid(y);
            Ok(g.sum(s))
        },
    )?;
    named_check(
        r,
        "encoder-block",
        subset(&store, &["enc.0."]),
        vec![randn(vec![5, 8], 31)],
        |g, bound, x| {
            let y = transformer_block(g, bound, "enc.0", x[0], None, 2, 1e-5, None)?;
            let s = g.sigmoid(y);
            Ok(g.sum(s))
        },
    )?;
    {
        let cfg = cfg.clone();
        let tok = demo_tokens(&cfg);
        named_check(
            r,
            "full-encoder",
            subset(&store, &["emb.", "enc."]),
            vec![],
            move |g, bound, _| {
                let enc = encode_document(g, bound, &cfg, &tok)?;
                let s = g.sigmoid(enc.segments);
                Ok(g.sum(s))
            },
        )?;
    }

    // Heads.
    named_check(
        r,
        "head-crp",
        subset(&store, &["crp."]),
        vec![randn(vec![4, 8], 33)],
        |g, bound, x| {
            let logits = heads::crp_logits_all(g, bound, x[0])?;
            g.bce_with_logits(
                logits,
                &(0..16).map(|i| f64::from(i % 2 == 0)).collect::<Vec<_>>(),
            )
        },
    )?;
    named_check(
        r,
        "head-crp-pairs",
        subset(&store, &["crp."]),
        vec![randn(vec![4, 8], 34)],
        |g, bound, x| {
            let logits =
                heads::crp_logits_pairs(g, bound, x[0], &[(0, 1), (2, 3), (3, 0)])?;
            g.bce_with_logits(logits, &[1.0, 0.0, 1.0])
        },
    )?;
    named_check(
        r,
        "head-pair-features",
        subset(&store, &["pair."]),
        vec![randn(vec![4, 8], 35)],
        |g, bound, x| {
            let f = heads::pair_features_pairs(g, bound, x[0], &[(0, 1), (1, 2)])?;
            let s = g.tanh_node(f);
            Ok(g.sum(s))
        },
    )?;
    {
        let cfg = cfg.clone();
        named_check(
            r,
            "head-rfe-block",
            subset(&store, &["rfe."]),
            vec![randn(vec![3, 8], 36), randn(vec![5, 8], 37)],
            move |g, bound, x| {
                let logits = heads::rfe_logits(g, bound, &cfg, x[0], x[1])?;
                g.bce_with_logits(logits, &[1.0, 0.0, 1.0, 1.0, 0.0])
            },
        )?;
    }
    named_check(
        r,
        "head-direction",
        subset(&store, &["dir."]),
        vec![randn(vec![4, 8], 38)],
        |g, bound, x| {
            let logits = heads::direction_logits(g, bound, x[0], &[(0, 1), (2, 3)])?;
            g.cross_entropy_logits(logits, &[0, 7])
        },
    )?;
    named_check(
        r,
        "head-collinearity",
        subset(&store, &["cit."]),
        vec![randn(vec![5, 8], 39)],
        |g, bound, x| {
            let logits = heads::cit_logits(g, bound, x[0], &[(0, 1, 2), (2, 3, 4)])?;
            g.cross_entropy_logits(logits, &[1, 4])
        },
    )?;
    named_check(
        r,
        "head-tagger",
        subset(&store, &["ser."]),
        vec![randn(vec![5, 8], 40)],
        |g, bound, x| {
            let logits = heads::ser_logits(g, bound, x[0])?;
            g.cross_entropy_logits(logits, &[0, 2, 4, 6, 6])
        },
    )?;
    named_check(
        r,
        "head-masked-token",
        subset(&store, &["mvlm."]),
        vec![randn(vec![5, 8], 41)],
        |g, bound, x| {
            let logits = heads::mvlm_logits(g, bound, x[0], &[1, 3])?;
            g.cross_entropy_logits(logits, &[2, 9])
        },
    )?;

    Ok(out)
}
