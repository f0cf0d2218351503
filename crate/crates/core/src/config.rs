//! Experiment configuration: a sectioned key = value file (TOML) covering
//! the model, corpus generation, task toggles, optimizer settings, decoding,
//! probing, and the few-shot schedule. Every output artifact embeds the
//! hash of the resolved configuration, so mixed-config artifacts are
//! detected instead of silently combined.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::GeneratorSpec;
use crate::error::{Error, Result};
use crate::finetune::{FinetuneOptions, ProbeOptions};
use crate::model::ModelConfig;
use crate::pretrain::{PretrainOptions, SamplingConfig, TaskToggles};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    /// 0 means "use the corpus vocabulary size".
    pub vocab_size: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub feed_forward: usize,
    pub rel_dim: usize,
    pub rfe_heads: usize,
    pub rfe_feed_forward: usize,
    pub max_tokens: usize,
    pub max_segments: usize,
    pub coord_buckets: usize,
    pub positive_cap: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            vocab_size: 0,
            hidden: m.hidden,
            layers: m.layers,
            heads: m.heads,
            feed_forward: m.feed_forward,
            rel_dim: m.rel_dim,
            rfe_heads: m.rfe_heads,
            rfe_feed_forward: m.rfe_feed_forward,
            max_tokens: m.max_tokens,
            max_segments: m.max_segments,
            coord_buckets: m.coord_buckets,
            positive_cap: m.positive_cap,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSection {
    pub pretrain_docs: usize,
    pub finetune_docs: usize,
    pub test_docs: usize,
    pub columns: usize,
    pub rows_per_column: usize,
    pub page_width: f64,
    pub page_height: f64,
    pub jitter: f64,
    pub value_below_rate: f64,
    pub multi_father_rate: f64,
    pub multi_son_rate: f64,
    pub header_rate: f64,
    pub other_rate: f64,
    pub min_words: usize,
    pub max_words: usize,
    /// Probability of line re-segmentation on the pre-training split.
    pub resegment_prob: f64,
    /// Optional directories of FUNSD-style annotation files; when set they
    /// replace the synthetic fine-tune/test splits.
    pub funsd_train_dir: String,
    pub funsd_test_dir: String,
    /// Flip stored linking pairs to (father, son) for corpora using the
    /// reverse orientation.
    pub funsd_flip_links: bool,
}

impl Default for CorpusSection {
    fn default() -> Self {
        let g = GeneratorSpec::default();
        CorpusSection {
            pretrain_docs: 500,
            finetune_docs: 100,
            test_docs: 50,
            columns: g.columns,
            rows_per_column: g.rows_per_column,
            page_width: g.page_width,
            page_height: g.page_height,
            jitter: g.jitter,
            value_below_rate: g.value_below_rate,
            multi_father_rate: g.multi_father_rate,
            multi_son_rate: g.multi_son_rate,
            header_rate: g.header_rate,
            other_rate: g.other_rate,
            min_words: g.min_words,
            max_words: g.max_words,
            resegment_prob: 0.9,
            funsd_train_dir: String::new(),
            funsd_test_dir: String::new(),
            funsd_flip_links: false,
        }
    }
}

impl CorpusSection {
    pub fn generator_spec(&self, docs: usize) -> GeneratorSpec {
        GeneratorSpec {
            docs,
            columns: self.columns,
            rows_per_column: self.rows_per_column,
            page_width: self.page_width,
            page_height: self.page_height,
            jitter: self.jitter,
            value_below_rate: self.value_below_rate,
            multi_father_rate: self.multi_father_rate,
            multi_son_rate: self.multi_son_rate,
            header_rate: self.header_rate,
            other_rate: self.other_rate,
            min_words: self.min_words,
            max_words: self.max_words,
            ..GeneratorSpec::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainSection {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub ddm: bool,
    pub dde: bool,
    pub cit: bool,
    pub mvlm: bool,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let p = PretrainOptions::default();
        PretrainSection {
            epochs: p.epochs,
            lr: p.lr,
            weight_decay: p.weight_decay,
            ddm: true,
            dde: true,
            cit: true,
            mvlm: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneSection {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub use_rfe: bool,
    pub variance_loss: bool,
    pub variance_weight: f64,
    /// pretrained | random-heads | scratch
    pub init: String,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        let f = FinetuneOptions::default();
        FinetuneSection {
            epochs: f.epochs,
            lr: f.lr,
            weight_decay: f.weight_decay,
            use_rfe: f.use_rfe,
            variance_loss: true,
            variance_weight: f.variance_weight,
            init: "pretrained".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferSection {
    pub rsf: bool,
    pub tau: f64,
    pub constraint_filter: bool,
    /// 0 means "three median segment heights".
    pub constraint_delta: f64,
}

impl Default for InferSection {
    fn default() -> Self {
        InferSection {
            rsf: true,
            tau: 1e-3,
            constraint_filter: false,
            constraint_delta: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeSection {
    pub pairs_per_doc: usize,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for ProbeSection {
    fn default() -> Self {
        let p = ProbeOptions::default();
        ProbeSection {
            pairs_per_doc: p.pairs_per_doc,
            epochs: p.epochs,
            lr: p.lr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FewShotSection {
    pub shots: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for FewShotSection {
    fn default() -> Self {
        FewShotSection {
            shots: vec![1, 5, 10, 20],
            seeds: vec![1, 2, 3],
        }
    }
}

/// The full experiment configuration.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub corpus: CorpusSection,
    pub sampling: SamplingConfig,
    pub pretrain: PretrainSection,
    pub finetune: FinetuneSection,
    pub infer: InferSection,
    pub probe: ProbeSection,
    pub fewshot: FewShotSection,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("serializable config")
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(
            self.finetune.init.as_str(),
            "pretrained" | "random-heads" | "scratch"
        ) {
            return Err(Error::Config(format!(
                "finetune.init must be pretrained | random-heads | scratch, got `{}`",
                self.finetune.init
            )));
        }
        self.model_config(16.max(self.model.vocab_size)).validate()
    }

    /// Hash of the resolved configuration; embedded in every artifact.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_toml().as_bytes());
        let digest = hasher.finalize();
        let mut out = String::with_capacity(16);
        for b in &digest[..8] {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            vocab_size: if m.vocab_size == 0 {
                vocab_size
            } else {
                m.vocab_size
            },
            hidden: m.hidden,
            layers: m.layers,
            heads: m.heads,
            feed_forward: m.feed_forward,
            rel_dim: m.rel_dim,
            rfe_heads: m.rfe_heads,
            rfe_feed_forward: m.rfe_feed_forward,
            max_tokens: m.max_tokens,
            max_segments: m.max_segments,
            coord_buckets: m.coord_buckets,
            positive_cap: m.positive_cap,
            ln_eps: 1e-5,
        }
    }

    pub fn sampling_config(&self) -> SamplingConfig {
        self.sampling.clone()
    }

    pub fn pretrain_options(&self) -> PretrainOptions {
        PretrainOptions {
            epochs: self.pretrain.epochs,
            lr: self.pretrain.lr,
            weight_decay: self.pretrain.weight_decay,
            tasks: TaskToggles {
                ddm: self.pretrain.ddm,
                dde: self.pretrain.dde,
                cit: self.pretrain.cit,
                mvlm: self.pretrain.mvlm,
            },
        }
    }

    pub fn finetune_options(&self) -> FinetuneOptions {
        FinetuneOptions {
            epochs: self.finetune.epochs,
            lr: self.finetune.lr,
            weight_decay: self.finetune.weight_decay,
            use_rfe: self.finetune.use_rfe,
            variance_weight: if self.finetune.variance_loss {
                self.finetune.variance_weight
            } else {
                0.0
            },
        }
    }

    pub fn probe_options(&self) -> ProbeOptions {
        ProbeOptions {
            pairs_per_doc: self.probe.pairs_per_doc,
            epochs: self.probe.epochs,
            lr: self.probe.lr,
        }
    }

    pub fn funsd_train_dir(&self) -> Option<PathBuf> {
        if self.corpus.funsd_train_dir.is_empty() {
            None
        } else {
            Some(PathBuf::from(&self.corpus.funsd_train_dir))
        }
    }

    pub fn funsd_test_dir(&self) -> Option<PathBuf> {
        if self.corpus.funsd_test_dir.is_empty() {
            None
        } else {
            Some(PathBuf::from(&self.corpus.funsd_test_dir))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_hash_stability() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml();
        let parsed: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, parsed);
        assert_eq!(cfg.hash(), parsed.hash());
        assert_eq!(cfg.hash().len(), 16);

        let mut other = cfg.clone();
        other.seed = 99;
        assert_ne!(cfg.hash(), other.hash());
    }

    #[test]
    fn partial_files_use_defaults() {
        let cfg: ExperimentConfig = toml::from_str(
            r#"
            seed = 7
            [model]
            hidden = 32
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.model.hidden, 32);
        assert_eq!(cfg.model.layers, ModelSection::default().layers);
    }

    #[test]
    fn bad_init_mode_rejected() {
        let cfg: ExperimentConfig = toml::from_str(
            r#"
            [finetune]
            init = "warm"
            "#,
        )
        .unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn toggles_map_through() {
        let cfg: ExperimentConfig = toml::from_str(
            r#"
            [pretrain]
            ddm = false
            cit = false
            [finetune]
            variance_loss = false
            "#,
        )
        .unwrap();
        let opts = cfg.pretrain_options();
        assert!(!opts.tasks.ddm && opts.tasks.dde && !opts.tasks.cit && opts.tasks.mvlm);
        assert_eq!(cfg.finetune_options().variance_weight, 0.0);
    }
}
