//! Model hyperparameters, parameter initialization, and graph binding.
//!
//! Parameter names are stable and flat (`enc.0.attn.wq`, `crp.w`, ...), so
//! checkpoints written during pre-training load directly into fine-tuning:
//! the coarse-relation bilinear weights trained on nearest-pair distance
//! labels are byte-identical to the ones fine-tuning starts from.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AttentionWeights, Gradients, Graph, NodeId, ParameterStore, Real, Tensor};
use crate::rng;

/// Number of BIO tags: {B,I} x {header, question, answer} plus O.
pub const TAG_COUNT: usize = 7;
/// Direction classes (8 compass sectors plus overlap).
pub const DIRECTION_CLASSES: usize = 9;
/// Collinearity classes.
pub const COLLINEAR_CLASSES: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub feed_forward: usize,
    /// Relation (pair) feature width for the refinement head.
    pub rel_dim: usize,
    pub rfe_heads: usize,
    pub rfe_feed_forward: usize,
    pub max_tokens: usize,
    pub max_segments: usize,
    /// Coordinates are bucketized onto a 0..=coord_buckets grid.
    pub coord_buckets: usize,
    /// Cap on the positive set fed to the refinement head.
    pub positive_cap: usize,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 64,
            hidden: 256,
            layers: 4,
            heads: 4,
            feed_forward: 1024,
            rel_dim: 256,
            rfe_heads: 2,
            rfe_feed_forward: 256,
            max_tokens: 512,
            max_segments: 256,
            coord_buckets: 1000,
            positive_cap: 128,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden {} must be divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.rel_dim == 0 || self.rfe_heads == 0 || self.rel_dim % self.rfe_heads != 0 {
            return Err(Error::Config(format!(
                "rel_dim {} must be divisible by rfe_heads {}",
                self.rel_dim, self.rfe_heads
            )));
        }
        if self.vocab_size < 4 {
            return Err(Error::Config("vocab must include the reserved tokens".into()));
        }
        Ok(())
    }

    /// Expected shape of every named parameter.
    pub fn parameter_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let d = self.hidden;
        let dr = self.rel_dim;
        let mut shapes = BTreeMap::new();
        let mut put = |name: String, shape: Vec<usize>| {
            shapes.insert(name, shape);
        };

        put("emb.token".into(), vec![self.vocab_size, d]);
        put("emb.pos".into(), vec![self.max_tokens, d]);
        put("emb.rank".into(), vec![self.max_segments, d]);
        put("emb.bie".into(), vec![3, d]);
        for axis in ["x1", "y1", "x2", "y2", "w", "h"] {
            put(format!("emb.box.{axis}"), vec![self.coord_buckets + 1, d]);
        }

        let mut block = |prefix: String, dim: usize, ff: usize| {
            put(format!("{prefix}.ln1.g"), vec![dim]);
            put(format!("{prefix}.ln1.b"), vec![dim]);
            for w in ["wq", "wk", "wv", "wo"] {
                put(format!("{prefix}.attn.{w}"), vec![dim, dim]);
            }
            for b in ["bq", "bk", "bv", "bo"] {
                put(format!("{prefix}.attn.{b}"), vec![dim]);
            }
            put(format!("{prefix}.ln2.g"), vec![dim]);
            put(format!("{prefix}.ln2.b"), vec![dim]);
            put(format!("{prefix}.ffn.w1"), vec![dim, ff]);
            put(format!("{prefix}.ffn.b1"), vec![ff]);
            put(format!("{prefix}.ffn.w2"), vec![ff, dim]);
            put(format!("{prefix}.ffn.b2"), vec![dim]);
        };
        for l in 0..self.layers {
            block(format!("enc.{l}"), d, self.feed_forward);
        }
        block("rfe.enc".into(), dr, self.rfe_feed_forward);
        block("rfe.dec".into(), dr, self.rfe_feed_forward);

        put("enc.final_ln.g".into(), vec![d]);
        put("enc.final_ln.b".into(), vec![d]);
        put("rfe.enc.final_ln.g".into(), vec![dr]);
        put("rfe.enc.final_ln.b".into(), vec![dr]);
        put("rfe.dec.final_ln.g".into(), vec![dr]);
        put("rfe.dec.final_ln.b".into(), vec![dr]);
        put("rfe.fc.w".into(), vec![dr, 1]);
        put("rfe.fc.b".into(), vec![1]);

        put("crp.w".into(), vec![d, d]);
        put("crp.b".into(), vec![1]);
        put("pair.w".into(), vec![2 * d, dr]);
        put("pair.b".into(), vec![dr]);
        put("dir.w".into(), vec![2 * d, DIRECTION_CLASSES]);
        put("dir.b".into(), vec![DIRECTION_CLASSES]);
        put("cit.w".into(), vec![d, COLLINEAR_CLASSES]);
        put("cit.b".into(), vec![COLLINEAR_CLASSES]);
        put("ser.w1".into(), vec![d, d]);
        put("ser.b1".into(), vec![d]);
        put("ser.w2".into(), vec![d, TAG_COUNT]);
        put("ser.b2".into(), vec![TAG_COUNT]);
        put("mvlm.w".into(), vec![d, self.vocab_size]);
        put("mvlm.b".into(), vec![self.vocab_size]);

        shapes
    }

    /// Names of the relation-head parameters that transfer between
    /// pre-training and fine-tuning.
    pub fn head_parameter_names(&self) -> Vec<String> {
        self.parameter_shapes()
            .keys()
            .filter(|n| {
                n.starts_with("crp.")
                    || n.starts_with("pair.")
                    || n.starts_with("rfe.")
                    || n.starts_with("dir.")
                    || n.starts_with("cit.")
            })
            .cloned()
            .collect()
    }
}

/// Final classifier layers start at zero so an untrained model predicts the
/// uniform distribution; everything else gets Glorot-style uniform noise.
fn is_zero_init(name: &str) -> bool {
    matches!(
        name,
        "crp.w"
            | "crp.b"
            | "dir.w"
            | "dir.b"
            | "cit.w"
            | "cit.b"
            | "ser.w2"
            | "ser.b2"
            | "mvlm.w"
            | "mvlm.b"
            | "rfe.fc.w"
            | "rfe.fc.b"
    )
}

pub fn init_params<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<ParameterStore<T>> {
    cfg.validate()?;
    let mut store = ParameterStore::new();
    let mut stream = rng::derive(seed, "init", 0);
    for (name, shape) in cfg.parameter_shapes() {
        let tensor = if is_zero_init(&name) {
            Tensor::zeros(shape)
        } else if name.ends_with(".g") {
            // Layer-norm scale.
            Tensor::full(shape, T::ONE)
        } else if shape.len() == 1 {
            // Biases and layer-norm shifts.
            Tensor::zeros(shape)
        } else if name.starts_with("emb.") {
            let len: usize = shape.iter().product();
            let data: Vec<T> = (0..len)
                .map(|_| T::from_f64(stream.gen_range(-0.05..0.05)))
                .collect();
            Tensor::new(shape, data)?
        } else {
            // 2D linear weights: Glorot uniform.
            let bound = (6.0 / (shape[0] + shape[shape.len() - 1]) as f64).sqrt();
            let len: usize = shape.iter().product();
            let data: Vec<T> = (0..len)
                .map(|_| T::from_f64(stream.gen_range(-bound..bound)))
                .collect();
            Tensor::new(shape, data)?
        };
        store.insert(&name, tensor)?;
    }
    Ok(store)
}

/// Builds a store from loaded checkpoint arrays, validating every shape
/// against the model spec.
pub fn store_from_arrays<T: Real>(
    cfg: &ModelConfig,
    arrays: BTreeMap<String, Tensor<T>>,
) -> Result<ParameterStore<T>> {
    let shapes = cfg.parameter_shapes();
    let mut store = ParameterStore::new();
    for (name, shape) in &shapes {
        let tensor = arrays
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing array `{name}`")))?;
        if tensor.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "array `{name}` has shape {:?}, expected {:?}",
                tensor.shape(),
                shape
            )));
        }
        store.insert(name, tensor.clone())?;
    }
    for name in arrays.keys() {
        if !shapes.contains_key(name) {
            return Err(Error::Checkpoint(format!("unexpected array `{name}`")));
        }
    }
    Ok(store)
}

/// Parameters mounted into one graph, keyed by name.
pub struct BoundParams {
    ids: BTreeMap<String, NodeId>,
}

impl BoundParams {
    /// Binds an explicit name -> node mapping; used by the gradient-check
    /// harness to mount a subset of parameters.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, NodeId)>) -> BoundParams {
        BoundParams {
            ids: pairs.into_iter().collect(),
        }
    }

    /// Mounts every parameter as a graph leaf; `trainable` decides whether
    /// gradients are tracked (false for pure inference).
    pub fn bind<T: Real>(
        graph: &mut Graph<T>,
        store: &ParameterStore<T>,
        trainable: bool,
    ) -> BoundParams {
        let mut ids = BTreeMap::new();
        for (name, tensor) in store.iter() {
            let id = if trainable {
                graph.param(tensor.clone())
            } else {
                graph.input(tensor.clone())
            };
            ids.insert(name.to_string(), id);
        }
        BoundParams { ids }
    }

    pub fn id(&self, name: &str) -> NodeId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter `{name}`"))
    }

    pub fn attention(&self, prefix: &str) -> AttentionWeights {
        AttentionWeights {
            wq: self.id(&format!("{prefix}.wq")),
            bq: self.id(&format!("{prefix}.bq")),
            wk: self.id(&format!("{prefix}.wk")),
            bk: self.id(&format!("{prefix}.bk")),
            wv: self.id(&format!("{prefix}.wv")),
            bv: self.id(&format!("{prefix}.bv")),
            wo: self.id(&format!("{prefix}.wo")),
            bo: self.id(&format!("{prefix}.bo")),
        }
    }

    /// Moves gradients from a finished backward pass into the store.
    pub fn apply_grads<T: Real>(
        &self,
        grads: &mut Gradients<T>,
        store: &mut ParameterStore<T>,
    ) -> Result<()> {
        for (name, &id) in &self.ids {
            if let Some(g) = grads.take(id) {
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }
}

/// One pre-norm transformer block: attention then feed-forward, both with
/// residual connections.
pub fn transformer_block<T: Real>(
    g: &mut Graph<T>,
    bound: &BoundParams,
    prefix: &str,
    x: NodeId,
    memory: Option<NodeId>,
    heads: usize,
    ln_eps: f64,
    mask: Option<NodeId>,
) -> Result<NodeId> {
    let ln1g = bound.id(&format!("{prefix}.ln1.g"));
    let ln1b = bound.id(&format!("{prefix}.ln1.b"));
    let normed = g.layer_norm(x, ln1g, ln1b, ln_eps)?;
    let attn_w = bound.attention(&format!("{prefix}.attn"));
    let kv = memory.unwrap_or(normed);
    let attn = g.multi_head_attention(normed, kv, &attn_w, heads, mask)?;
    let x = g.add(x, attn)?;

    let ln2g = bound.id(&format!("{prefix}.ln2.g"));
    let ln2b = bound.id(&format!("{prefix}.ln2.b"));
    let normed = g.layer_norm(x, ln2g, ln2b, ln_eps)?;
    let w1 = bound.id(&format!("{prefix}.ffn.w1"));
    let b1 = bound.id(&format!("{prefix}.ffn.b1"));
    let w2 = bound.id(&format!("{prefix}.ffn.w2"));
    let b2 = bound.id(&format!("{prefix}.ffn.b2"));
    let h = g.affine(normed, w1, b1)?;
    let h = g.gelu(h);
    let h = g.affine(h, w2, b2)?;
    g.add(x, h)
}
