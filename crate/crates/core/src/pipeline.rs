//! Experiment pipeline: versioned artifacts, stage resumption, and the
//! stage implementations behind the command-line driver.
//!
//! Every artifact embeds (config hash, seed, format version). A completed
//! stage is skipped on rerun; a config-hash mismatch on an existing
//! artifact is refused instead of overwritten (use force to rebuild).

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::ExperimentConfig;
use crate::corpus::{
    apply_segmentation, generate_synthetic_corpus, parse_funsd_json, serialize_funsd_json,
    Document, Vocabulary,
};
use crate::encoder::{tokenize_document, TokenizedDoc};
use crate::error::{Error, Result};
use crate::finetune::{
    decode_rsf, default_constraint_delta, direction_probe, evaluate, few_shot_harness,
    finetune_loop, geometric_constraint_filter, gold_doc, predict_document, reinit_heads,
    score_model, FinetuneOptions, MetricsReport, ReportMeta,
};
use crate::model::{init_params, store_from_arrays, ModelConfig};
use crate::nn::{checkpoint, ParameterStore};
use crate::pretrain::{generate_labels, pretrain_loop, GeoLabelSet, TaskToggles};
use crate::rng;

pub const FORMAT_VERSION: u32 = 1;

/// What a stage did when invoked.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StageOutcome {
    Ran(String),
    Skipped(String),
}

impl StageOutcome {
    pub fn message(&self) -> &str {
        match self {
            StageOutcome::Ran(m) | StageOutcome::Skipped(m) => m,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct ArtifactMeta {
    config_hash: String,
    seed: u64,
    format_version: u32,
}

pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub force: bool,
    hash: String,
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig, out: PathBuf, force: bool) -> Pipeline {
        let hash = cfg.hash();
        Pipeline {
            cfg,
            out,
            force,
            hash,
        }
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    fn meta(&self) -> ArtifactMeta {
        ArtifactMeta {
            config_hash: self.hash.clone(),
            seed: self.cfg.seed,
            format_version: FORMAT_VERSION,
        }
    }

    fn meta_json(&self) -> Value {
        json!({
            "config_hash": self.hash,
            "seed": self.cfg.seed,
            "format_version": FORMAT_VERSION,
        })
    }

    fn split_seed(&self, tag: &str) -> u64 {
        rng::derive(self.cfg.seed, tag, 0).gen()
    }

    // ---- artifact bookkeeping ----

    fn corpus_dir(&self, split: &str) -> PathBuf {
        self.out.join("corpus").join(split)
    }

    fn vocab_path(&self) -> PathBuf {
        self.out.join("vocab.json")
    }

    fn labels_dir(&self) -> PathBuf {
        self.out.join("labels")
    }

    fn checkpoint_path(&self, kind: &str) -> PathBuf {
        self.out.join("checkpoints").join(format!("{kind}.geol"))
    }

    fn metrics_path(&self, name: &str) -> PathBuf {
        self.out.join("metrics").join(format!("{name}.txt"))
    }

    fn curves_path(&self, name: &str) -> PathBuf {
        self.out.join("curves").join(format!("{name}.csv"))
    }

    /// Stage guard: Ok(Some(outcome)) when the stage can be skipped;
    /// errors on a config-hash mismatch without force.
    fn guard(&self, marker: &Path, stage: &str) -> Result<Option<StageOutcome>> {
        if !marker.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(marker)?;
        let found: ArtifactMeta = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("corrupt marker {}: {e}", marker.display())))?;
        if found == self.meta() {
            if self.force {
                return Ok(None);
            }
            return Ok(Some(StageOutcome::Skipped(format!(
                "{stage}: up to date ({})",
                marker.display()
            ))));
        }
        if self.force {
            return Ok(None);
        }
        Err(Error::HashMismatch {
            artifact: marker.display().to_string(),
            expected: self.meta().config_hash,
            found: found.config_hash,
        })
    }

    fn write_marker(&self, marker: &Path) -> Result<()> {
        if let Some(parent) = marker.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(marker, serde_json::to_string_pretty(&self.meta())?)?;
        Ok(())
    }

    fn require(&self, path: &Path, producer: &str) -> Result<()> {
        if path.exists() {
            Ok(())
        } else {
            Err(Error::MissingArtifact {
                artifact: path.display().to_string(),
                producer: producer.to_string(),
            })
        }
    }

    // ---- corpus ----

    fn write_split(&self, split: &str, docs: &[Document], generated: bool) -> Result<()> {
        let dir = self.corpus_dir(split);
        if dir.exists() {
            std::fs::remove_dir_all(&dir)?;
        }
        std::fs::create_dir_all(&dir)?;
        for (idx, doc) in docs.iter().enumerate() {
            let mut meta = self.meta_json();
            meta["id"] = json!(doc.id);
            if generated {
                meta["generator_spec"] =
                    serde_json::to_value(self.cfg.corpus.generator_spec(docs.len()))?;
            }
            let text = serialize_funsd_json(doc, Some(&meta))?;
            std::fs::write(dir.join(format!("{idx:05}.json")), text)?;
        }
        Ok(())
    }

    fn load_funsd_dir(&self, dir: &Path) -> Result<(Vec<Document>, Vec<String>)> {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        let mut docs = Vec::new();
        let mut warnings = Vec::new();
        for path in files {
            let text = std::fs::read_to_string(&path)?;
            let stem = path
                .file_stem()
                .map(|s| s.to_string_lossy().to_string())
                .unwrap_or_default();
            let loaded = parse_funsd_json(&stem, &text, self.cfg.corpus.funsd_flip_links)?;
            warnings.extend(
                loaded
                    .warnings
                    .iter()
                    .map(|w| format!("{}: {w}", path.display())),
            );
            docs.push(loaded.document);
        }
        Ok((docs, warnings))
    }

    pub fn gen_corpus(&self) -> Result<StageOutcome> {
        let marker = self.out.join("corpus").join("meta.json");
        if let Some(done) = self.guard(&marker, "gen-corpus")? {
            return Ok(done);
        }

        let c = &self.cfg.corpus;
        let pretrain = generate_synthetic_corpus(
            &c.generator_spec(c.pretrain_docs),
            self.split_seed("corpus-pretrain"),
        )?;
        let pretrain =
            apply_segmentation(&pretrain, c.resegment_prob, self.split_seed("resegment"))?;

        let mut warnings = Vec::new();
        let (finetune, test) = match (self.cfg.funsd_train_dir(), self.cfg.funsd_test_dir()) {
            (Some(train_dir), Some(test_dir)) => {
                let (train, mut w1) = self.load_funsd_dir(&train_dir)?;
                let (test, mut w2) = self.load_funsd_dir(&test_dir)?;
                warnings.append(&mut w1);
                warnings.append(&mut w2);
                (train, test)
            }
            _ => {
                let finetune = generate_synthetic_corpus(
                    &c.generator_spec(c.finetune_docs),
                    self.split_seed("corpus-finetune"),
                )?;
                let test = generate_synthetic_corpus(
                    &c.generator_spec(c.test_docs),
                    self.split_seed("corpus-test"),
                )?;
                (finetune, test)
            }
        };

        let vocab = Vocabulary::build(pretrain.iter().chain(&finetune).chain(&test));
        self.write_split("pretrain", &pretrain, true)?;
        self.write_split("finetune", &finetune, self.cfg.funsd_train_dir().is_none())?;
        self.write_split("test", &test, self.cfg.funsd_test_dir().is_none())?;
        vocab.save(&self.vocab_path())?;
        if !warnings.is_empty() {
            std::fs::write(self.out.join("corpus").join("warnings.txt"), warnings.join("\n"))?;
        }
        self.write_marker(&marker)?;
        Ok(StageOutcome::Ran(format!(
            "gen-corpus: {} pretrain / {} finetune / {} test documents, vocabulary {} ({} warnings)",
            pretrain.len(),
            finetune.len(),
            test.len(),
            vocab.len(),
            warnings.len()
        )))
    }

    pub fn load_split(&self, split: &str) -> Result<Vec<Document>> {
        let dir = self.corpus_dir(split);
        self.require(&dir, "gen-corpus")?;
        let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        let mut docs = Vec::with_capacity(files.len());
        for path in files {
            let text = std::fs::read_to_string(&path)?;
            let stem = path
                .file_stem()
                .map(|s| s.to_string_lossy().to_string())
                .unwrap_or_default();
            let mut loaded = parse_funsd_json(&stem, &text, false)?;
            if let Some(meta) = &loaded.meta {
                if let Some(id) = meta.get("id").and_then(Value::as_str) {
                    loaded.document.id = id.to_string();
                }
            }
            docs.push(loaded.document);
        }
        Ok(docs)
    }

    pub fn load_vocab(&self) -> Result<Vocabulary> {
        self.require(&self.vocab_path(), "gen-corpus")?;
        Vocabulary::load(&self.vocab_path())
    }

    /// Resolved model configuration for the stored vocabulary.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let vocab = self.load_vocab()?;
        let cfg = self.cfg.model_config(vocab.len());
        cfg.validate()?;
        Ok(cfg)
    }

    // ---- labels ----

    pub fn prepare_labels(&self) -> Result<StageOutcome> {
        let marker = self.labels_dir().join("meta.json");
        if let Some(done) = self.guard(&marker, "prepare-labels")? {
            return Ok(done);
        }
        let docs = self.load_split("pretrain")?;
        let vocab = self.load_vocab()?;
        let model = self.cfg.model_config(vocab.len());
        let dir = self.labels_dir();
        std::fs::create_dir_all(&dir)?;
        let sampling = self.cfg.sampling_config();
        let label_seed = self.split_seed("labels");
        // Per-document streams keyed by index: parallel-safe and identical
        // for any worker count.
        let all: Vec<GeoLabelSet> = docs
            .par_iter()
            .enumerate()
            .map(|(idx, doc)| {
                let tok = tokenize_document(doc, &vocab, &model);
                generate_labels(doc, &tok, &sampling, vocab.len(), label_seed, idx as u64)
            })
            .collect();
        for (idx, (doc, labels)) in docs.iter().zip(&all).enumerate() {
            let wrapped = json!({
                "meta": self.meta_json(),
                "doc_id": doc.id,
                "labels": serde_json::to_value(labels)?,
            });
            std::fs::write(
                dir.join(format!("{idx:05}.json")),
                serde_json::to_string(&wrapped)?,
            )?;
        }
        self.write_marker(&marker)?;
        Ok(StageOutcome::Ran(format!(
            "prepare-labels: {} label sets",
            all.len()
        )))
    }

    pub fn load_labels(&self, docs: &[Document]) -> Result<Vec<GeoLabelSet>> {
        let dir = self.labels_dir();
        self.require(&dir.join("meta.json"), "prepare-labels")?;
        let mut out = Vec::with_capacity(docs.len());
        for (idx, doc) in docs.iter().enumerate() {
            let path = dir.join(format!("{idx:05}.json"));
            self.require(&path, "prepare-labels")?;
            let text = std::fs::read_to_string(&path)?;
            let wrapped: Value = serde_json::from_str(&text)?;
            let stored_id = wrapped
                .get("doc_id")
                .and_then(Value::as_str)
                .unwrap_or_default();
            if stored_id != doc.id {
                return Err(Error::Evaluation(format!(
                    "label cache `{}` belongs to `{stored_id}`, expected `{}`",
                    path.display(),
                    doc.id
                )));
            }
            let labels: GeoLabelSet =
                serde_json::from_value(wrapped.get("labels").cloned().unwrap_or_default())?;
            out.push(labels);
        }
        Ok(out)
    }

    // ---- training ----

    fn tokenized_split(
        &self,
        split: &str,
        vocab: &Vocabulary,
        model: &ModelConfig,
    ) -> Result<Vec<(Document, TokenizedDoc)>> {
        Ok(self
            .load_split(split)?
            .into_iter()
            .map(|doc| {
                let tok = tokenize_document(&doc, vocab, model);
                (doc, tok)
            })
            .collect())
    }

    fn save_checkpoint(
        &self,
        kind: &str,
        model: &ModelConfig,
        store: &ParameterStore<f32>,
    ) -> Result<()> {
        let mut manifest = self.meta_json();
        manifest["kind"] = json!(kind);
        manifest["model"] = serde_json::to_value(model)?;
        checkpoint::save(&self.checkpoint_path(kind), &manifest, store)
    }

    pub fn load_checkpoint(&self, kind: &str) -> Result<(ModelConfig, ParameterStore<f32>)> {
        let path = self.checkpoint_path(kind);
        let producer = if kind == "pretrained" { "pretrain" } else { "finetune" };
        self.require(&path, producer)?;
        let (manifest, arrays) = checkpoint::load::<f32>(&path)?;
        let found = manifest
            .get("config_hash")
            .and_then(Value::as_str)
            .unwrap_or_default();
        if found != self.hash {
            return Err(Error::HashMismatch {
                artifact: path.display().to_string(),
                expected: self.hash.clone(),
                found: found.to_string(),
            });
        }
        let model: ModelConfig =
            serde_json::from_value(manifest.get("model").cloned().unwrap_or_default())
                .map_err(|e| Error::Checkpoint(format!("bad model manifest: {e}")))?;
        let store = store_from_arrays(&model, arrays)?;
        Ok((model, store))
    }

    fn write_csv(&self, name: &str, header: &str, rows: &[String]) -> Result<()> {
        let path = self.curves_path(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut text = String::from(header);
        text.push('\n');
        for row in rows {
            text.push_str(row);
            text.push('\n');
        }
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn pretrain(&self) -> Result<StageOutcome> {
        let path = self.checkpoint_path("pretrained");
        if path.exists() && !self.force {
            if self.load_checkpoint("pretrained").is_ok() {
                return Ok(StageOutcome::Skipped(format!(
                    "pretrain: checkpoint up to date ({})",
                    path.display()
                )));
            }
        }
        let docs = self.load_split("pretrain")?;
        let vocab = self.load_vocab()?;
        let model = self.cfg.model_config(vocab.len());
        model.validate()?;
        let labels = self.load_labels(&docs)?;
        let prepared: Vec<(TokenizedDoc, GeoLabelSet)> = docs
            .iter()
            .zip(labels)
            .map(|(doc, l)| (tokenize_document(doc, &vocab, &model), l))
            .collect();
        let mut store = init_params::<f32>(&model, self.split_seed("init"))?;
        let opts = self.cfg.pretrain_options();
        let logs = pretrain_loop(&mut store, &model, &opts, &prepared)?;
        let rows: Vec<String> = logs
            .iter()
            .map(|l| {
                format!(
                    "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                    l.epoch,
                    l.losses.mvlm,
                    l.losses.ddm_direction,
                    l.losses.ddm_distance,
                    l.losses.dde,
                    l.losses.cit,
                    l.losses.total
                )
            })
            .collect();
        self.write_csv(
            "pretrain_loss",
            "epoch,mvlm,ddm_direction,ddm_distance,dde,cit,total",
            &rows,
        )?;
        self.save_checkpoint("pretrained", &model, &store)?;
        let last = logs.last().map(|l| l.losses.total).unwrap_or(0.0);
        Ok(StageOutcome::Ran(format!(
            "pretrain: {} epochs over {} documents, final loss {last:.4}",
            opts.epochs,
            prepared.len()
        )))
    }

    /// Initial parameters for fine-tuning under the given init mode.
    fn finetune_init(&self, init: &str, model: &ModelConfig) -> Result<ParameterStore<f32>> {
        match init {
            "pretrained" => Ok(self.load_checkpoint("pretrained")?.1),
            "random-heads" => {
                let (_, store) = self.load_checkpoint("pretrained")?;
                reinit_heads(&store, model, self.split_seed("reinit-heads"))
            }
            "scratch" => Ok(init_params::<f32>(model, self.split_seed("init"))?),
            other => Err(Error::Config(format!("unknown init mode `{other}`"))),
        }
    }

    pub fn finetune(&self, init_override: Option<&str>) -> Result<StageOutcome> {
        let init = init_override.unwrap_or(&self.cfg.finetune.init).to_string();
        let kind = format!("finetuned-{init}");
        let path = self.checkpoint_path(&kind);
        if path.exists() && !self.force && self.load_checkpoint(&kind).is_ok() {
            return Ok(StageOutcome::Skipped(format!(
                "finetune: checkpoint up to date ({})",
                path.display()
            )));
        }
        let vocab = self.load_vocab()?;
        let model = self.cfg.model_config(vocab.len());
        let prepared = self.tokenized_split("finetune", &vocab, &model)?;
        let mut store = self.finetune_init(&init, &model)?;
        let opts = self.cfg.finetune_options();
        let logs = finetune_loop(&mut store, &model, &opts, &prepared)?;
        let rows: Vec<String> = logs
            .iter()
            .map(|l| {
                format!(
                    "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                    l.epoch,
                    l.losses.ser,
                    l.losses.re_coarse,
                    l.losses.re_refined,
                    l.losses.variance,
                    l.losses.total
                )
            })
            .collect();
        self.write_csv(
            &format!("finetune_loss-{init}"),
            "epoch,ser,re_coarse,re_refined,variance,total",
            &rows,
        )?;
        self.save_checkpoint(&kind, &model, &store)?;
        Ok(StageOutcome::Ran(format!(
            "finetune ({init}): {} epochs over {} documents",
            opts.epochs,
            prepared.len()
        )))
    }

    pub fn evaluate_stage(&self, init_override: Option<&str>) -> Result<StageOutcome> {
        let init = init_override.unwrap_or(&self.cfg.finetune.init).to_string();
        let name = format!("eval-{init}");
        let path = self.metrics_path(&name);
        if path.exists() && !self.force {
            return Ok(StageOutcome::Skipped(format!(
                "evaluate: metrics up to date ({})",
                path.display()
            )));
        }
        let (model, store) = self.load_checkpoint(&format!("finetuned-{init}"))?;
        let vocab = self.load_vocab()?;
        let prepared = self.tokenized_split("test", &vocab, &model)?;
        let opts = self.cfg.finetune_options();
        let infer = &self.cfg.infer;
        // Per-document forward passes are independent; collect preserves
        // document order.
        let decoded: Vec<Result<_>> = prepared
            .par_iter()
            .map(|(doc, tok)| {
                let pred = predict_document(&store, &model, &opts, doc, tok)?;
                let mut decoded = decode_rsf(&pred.relations, infer.tau, infer.rsf);
                if infer.constraint_filter {
                    let boxes: Vec<_> = doc.segments[..tok.n_segments]
                        .iter()
                        .map(|s| s.bbox)
                        .collect();
                    let delta = if infer.constraint_delta > 0.0 {
                        infer.constraint_delta
                    } else {
                        default_constraint_delta(&boxes)
                    };
                    decoded = geometric_constraint_filter(&decoded, &boxes, delta);
                }
                Ok((pred.doc_id.clone(), decoded, pred.tags))
            })
            .collect();
        let mut predictions = Vec::with_capacity(prepared.len());
        let mut gold = Vec::with_capacity(prepared.len());
        for (result, (doc, tok)) in decoded.into_iter().zip(&prepared) {
            predictions.push(result?);
            gold.push(gold_doc(doc, tok));
        }
        let mut report = evaluate(&predictions, &gold)?;
        report.meta = ReportMeta {
            config_hash: self.hash.clone(),
            seed: self.cfg.seed,
            format_version: FORMAT_VERSION,
        };
        self.write_metrics(&name, &report)?;
        Ok(StageOutcome::Ran(format!(
            "evaluate ({init}): RE F1 {:.4}, tag F1 {:.4} -> {}",
            report.re.f1,
            report.ser.f1,
            path.display()
        )))
    }

    fn write_metrics(&self, name: &str, report: &MetricsReport) -> Result<()> {
        let path = self.metrics_path(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, report.to_text())?;
        Ok(())
    }

    pub fn probe(&self) -> Result<StageOutcome> {
        let done = self.metrics_path("probe-pretrained").exists()
            && self.metrics_path("probe-random").exists();
        if done && !self.force {
            return Ok(StageOutcome::Skipped("probe: metrics up to date".into()));
        }
        let (model, pretrained) = self.load_checkpoint("pretrained")?;
        let vocab = self.load_vocab()?;
        let train = self.tokenized_split("finetune", &vocab, &model)?;
        let test = self.tokenized_split("test", &vocab, &model)?;
        let opts = self.cfg.probe_options();
        let seed = self.split_seed("probe");
        let random = init_params::<f32>(&model, self.split_seed("probe-random-encoder"))?;

        let mut outcomes = Vec::new();
        for (tag, store) in [("pretrained", &pretrained), ("random", &random)] {
            let stats = direction_probe(store, &model, &train, &test, &opts, seed)?;
            let report = MetricsReport {
                probe: Some(stats),
                meta: ReportMeta {
                    config_hash: self.hash.clone(),
                    seed: self.cfg.seed,
                    format_version: FORMAT_VERSION,
                },
                ..MetricsReport::default()
            };
            self.write_metrics(&format!("probe-{tag}"), &report)?;
            outcomes.push(format!("{tag}: acc {:.4}", stats.accuracy));
        }
        Ok(StageOutcome::Ran(format!("probe: {}", outcomes.join(", "))))
    }

    pub fn grad_check_stage(&self) -> Result<StageOutcome> {
        let results = crate::checks::run_all()?;
        let mut lines: Vec<String> = results
            .iter()
            .map(|c| format!("{} = {:.3e}", c.name, c.max_rel_err))
            .collect();
        let max = results.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
        lines.push(format!("max = {max:.3e}"));
        let path = self.metrics_path("grad-check");
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, lines.join("\n"))?;
        if max >= 1e-4 {
            return Err(Error::Numeric(format!(
                "gradient check failed: max relative error {max:.3e}"
            )));
        }
        Ok(StageOutcome::Ran(format!(
            "grad-check: {} checks, max relative error {max:.3e}",
            results.len()
        )))
    }

    // ---- ablation grids ----

    fn pretrain_with_tasks(
        &self,
        model: &ModelConfig,
        prepared: &[(TokenizedDoc, GeoLabelSet)],
        tasks: TaskToggles,
    ) -> Result<ParameterStore<f32>> {
        let mut store = init_params::<f32>(model, self.split_seed("init"))?;
        let mut opts = self.cfg.pretrain_options();
        opts.tasks = tasks;
        pretrain_loop(&mut store, model, &opts, prepared)?;
        Ok(store)
    }

    pub fn ablate(&self, grids: &[&str]) -> Result<StageOutcome> {
        let vocab = self.load_vocab()?;
        let model = self.cfg.model_config(vocab.len());
        let pre_docs = self.load_split("pretrain")?;
        let labels = self.load_labels(&pre_docs)?;
        let prepared_pre: Vec<(TokenizedDoc, GeoLabelSet)> = pre_docs
            .iter()
            .zip(labels)
            .map(|(d, l)| (tokenize_document(d, &vocab, &model), l))
            .collect();
        let train = self.tokenized_split("finetune", &vocab, &model)?;
        let test = self.tokenized_split("test", &vocab, &model)?;
        let ft = self.cfg.finetune_options();
        let mut summary = Vec::new();

        if grids.contains(&"tasks") {
            let mut rows = Vec::new();
            for mask in 0..8u8 {
                let tasks = TaskToggles {
                    ddm: mask & 1 != 0,
                    dde: mask & 2 != 0,
                    cit: mask & 4 != 0,
                    mvlm: true,
                };
                let store = self.pretrain_with_tasks(&model, &prepared_pre, tasks)?;
                let mut tuned = store.clone();
                finetune_loop(&mut tuned, &model, &ft, &train)?;
                let report = score_model(&tuned, &model, &ft, &test, None)?;
                rows.push(format!(
                    "{},{},{},{},{:.6},{:.6}",
                    mask, tasks.ddm as u8, tasks.dde as u8, tasks.cit as u8,
                    report.ser.f1, report.re.f1
                ));
                summary.push(format!(
                    "tasks #{mask} (ddm={} dde={} cit={}): SER {:.4} RE {:.4}",
                    tasks.ddm as u8, tasks.dde as u8, tasks.cit as u8,
                    report.ser.f1, report.re.f1
                ));
            }
            self.write_csv("ablate_tasks", "combo,ddm,dde,cit,ser_f1,re_f1", &rows)?;
        }

        if grids.contains(&"heads") {
            let (_, pretrained) = self.load_checkpoint("pretrained")?;
            let fresh = init_params::<f32>(&model, self.split_seed("ablate-heads"))?;
            let mut rows = Vec::new();
            for (crp_pt, rfe_mode) in [
                (false, "absent"),
                (true, "absent"),
                (false, "random"),
                (true, "random"),
                (false, "pretrained"),
                (true, "pretrained"),
            ] {
                let mut store = pretrained.clone();
                if !crp_pt {
                    for name in ["crp.w", "crp.b"] {
                        store.set(name, fresh.get(name).unwrap().clone())?;
                    }
                }
                if rfe_mode != "pretrained" {
                    for name in model.head_parameter_names() {
                        if name.starts_with("rfe.") || name.starts_with("pair.") {
                            store.set(&name, fresh.get(&name).unwrap().clone())?;
                        }
                    }
                }
                let opts = FinetuneOptions {
                    use_rfe: rfe_mode != "absent",
                    ..ft
                };
                let mut tuned = store.clone();
                finetune_loop(&mut tuned, &model, &opts, &train)?;
                let report = score_model(&tuned, &model, &opts, &test, None)?;
                rows.push(format!(
                    "{},{},{:.6}",
                    if crp_pt { "pretrained" } else { "random" },
                    rfe_mode,
                    report.re.f1
                ));
                summary.push(format!(
                    "heads crp={} rfe={}: RE {:.4}",
                    if crp_pt { "pt" } else { "rand" },
                    rfe_mode,
                    report.re.f1
                ));
            }
            self.write_csv("ablate_heads", "crp,rfe,re_f1", &rows)?;
        }

        if grids.contains(&"rsf") {
            let (_, pretrained) = self.load_checkpoint("pretrained")?;
            let mut rows = Vec::new();
            for variance in [false, true] {
                let opts = FinetuneOptions {
                    variance_weight: if variance { self.cfg.finetune.variance_weight } else { 0.0 },
                    ..ft
                };
                let mut tuned = pretrained.clone();
                finetune_loop(&mut tuned, &model, &opts, &train)?;
                for rsf in [false, true] {
                    let tau = if rsf { Some(self.cfg.infer.tau) } else { None };
                    let report = score_model(&tuned, &model, &opts, &test, tau)?;
                    rows.push(format!(
                        "{},{},{:.6},{:.6},{:.6}",
                        rsf as u8, variance as u8,
                        report.re.precision, report.re.recall, report.re.f1
                    ));
                    summary.push(format!(
                        "rsf={} variance={}: P {:.4} R {:.4} F1 {:.4}",
                        rsf as u8, variance as u8,
                        report.re.precision, report.re.recall, report.re.f1
                    ));
                }
            }
            self.write_csv(
                "ablate_rsf",
                "rsf,variance_loss,precision,recall,f1",
                &rows,
            )?;
        }

        if grids.contains(&"fewshot") {
            let (_, pretrained) = self.load_checkpoint("pretrained")?;
            let points = few_shot_harness(
                &pretrained,
                &model,
                &ft,
                &train,
                &test,
                &self.cfg.fewshot.shots,
                &self.cfg.fewshot.seeds,
            )?;
            let rows: Vec<String> = points
                .iter()
                .map(|p| {
                    format!(
                        "{},{},{},{:.6},{:.6}",
                        p.shots, p.seed, p.pretrained_heads as u8, p.re_f1, p.ser_f1
                    )
                })
                .collect();
            self.write_csv("fewshot", "shots,seed,pretrained_heads,re_f1,ser_f1", &rows)?;
            summary.push(format!("fewshot: {} grid points", points.len()));
        }

        let path = self.out.join("ablate.txt");
        std::fs::write(&path, summary.join("\n"))?;
        Ok(StageOutcome::Ran(format!(
            "ablate: wrote {} summary lines to {}",
            summary.len(),
            path.display()
        )))
    }

    // ---- report ----

    pub fn report(&self) -> Result<StageOutcome> {
        let metrics_dir = self.out.join("metrics");
        self.require(&metrics_dir, "evaluate")?;
        let mut files: Vec<PathBuf> = std::fs::read_dir(&metrics_dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "txt"))
            .collect();
        files.sort();
        let mut hashes = BTreeSet::new();
        let mut lines = Vec::new();
        let mut csv_rows = Vec::new();
        for path in &files {
            let name = path
                .file_stem()
                .map(|s| s.to_string_lossy().to_string())
                .unwrap_or_default();
            if name == "grad-check" {
                continue;
            }
            let report = MetricsReport::parse_text(&std::fs::read_to_string(path)?)?;
            if !report.meta.config_hash.is_empty() {
                hashes.insert(report.meta.config_hash.clone());
            }
            lines.push(format!(
                "{name}: RE P/R/F1 {:.4}/{:.4}/{:.4}  tags F1 {:.4}{}",
                report.re.precision,
                report.re.recall,
                report.re.f1,
                report.ser.f1,
                report
                    .probe
                    .map(|p| format!(
                        "  probe acc {:.4} entropy {:.4} xent {:.4}",
                        p.accuracy, p.entropy, p.cross_entropy
                    ))
                    .unwrap_or_default()
            ));
            csv_rows.push(format!(
                "{name},{:.6},{:.6},{:.6},{:.6}",
                report.re.precision, report.re.recall, report.re.f1, report.ser.f1
            ));
        }
        if hashes.len() > 1 {
            return Err(Error::Config(format!(
                "refusing to mix metrics from different configurations: {hashes:?}"
            )));
        }
        if let Some(h) = hashes.first() {
            if *h != self.hash {
                return Err(Error::HashMismatch {
                    artifact: metrics_dir.display().to_string(),
                    expected: self.hash.clone(),
                    found: h.clone(),
                });
            }
        }
        let mut text = format!(
            "experiment report\nconfig hash: {}\nseed: {}\nformat version: {}\n\n",
            self.hash, self.cfg.seed, FORMAT_VERSION
        );
        text.push_str(&lines.join("\n"));
        text.push('\n');
        std::fs::write(self.out.join("report.txt"), &text)?;
        self.write_csv_at(
            &self.out.join("report.csv"),
            "run,re_precision,re_recall,re_f1,ser_f1",
            &csv_rows,
        )?;
        Ok(StageOutcome::Ran(format!(
            "report: {} metric files -> {}",
            lines.len(),
            self.out.join("report.txt").display()
        )))
    }

    fn write_csv_at(&self, path: &Path, header: &str, rows: &[String]) -> Result<()> {
        let mut text = String::from(header);
        text.push('\n');
        for row in rows {
            text.push_str(row);
            text.push('\n');
        }
        std::fs::write(path, text)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = 11;
        cfg.model.hidden = 16;
        cfg.model.layers = 1;
        cfg.model.heads = 2;
        cfg.model.feed_forward = 32;
        cfg.model.rel_dim = 16;
        cfg.model.rfe_feed_forward = 16;
        cfg.model.max_tokens = 128;
        cfg.model.max_segments = 64;
        cfg.corpus.pretrain_docs = 4;
        cfg.corpus.finetune_docs = 3;
        cfg.corpus.test_docs = 2;
        cfg.corpus.columns = 1;
        cfg.corpus.rows_per_column = 3;
        cfg.pretrain.epochs = 1;
        cfg.finetune.epochs = 1;
        cfg.probe.epochs = 2;
        cfg.probe.pairs_per_doc = 6;
        cfg.fewshot.shots = vec![1];
        cfg.fewshot.seeds = vec![1];
        cfg
    }

    #[test]
    fn corpus_stage_skips_when_up_to_date_and_refuses_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline::new(tiny_config(), dir.path().to_path_buf(), false);
        let first = p.gen_corpus().unwrap();
        assert!(matches!(first, StageOutcome::Ran(_)));
        let second = p.gen_corpus().unwrap();
        assert!(matches!(second, StageOutcome::Skipped(_)));

        // Different config, same output directory: refusal.
        let mut other_cfg = tiny_config();
        other_cfg.seed = 12;
        let other = Pipeline::new(other_cfg.clone(), dir.path().to_path_buf(), false);
        assert!(matches!(
            other.gen_corpus(),
            Err(Error::HashMismatch { .. })
        ));
        // Force rebuilds.
        let forced = Pipeline::new(other_cfg, dir.path().to_path_buf(), true);
        assert!(matches!(forced.gen_corpus().unwrap(), StageOutcome::Ran(_)));
    }

    #[test]
    fn missing_artifacts_name_their_producer() {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline::new(tiny_config(), dir.path().to_path_buf(), false);
        let err = p.prepare_labels().unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("gen-corpus"), "{msg}");
        let err = p.pretrain().unwrap_err();
        assert!(err.to_string().contains("gen-corpus"));
    }

    #[test]
    fn corpus_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline::new(tiny_config(), dir.path().to_path_buf(), false);
        p.gen_corpus().unwrap();
        let docs = p.load_split("pretrain").unwrap();
        assert_eq!(docs.len(), 4);
        for d in &docs {
            d.validate().unwrap();
        }
        let vocab = p.load_vocab().unwrap();
        assert!(vocab.len() > 4);
    }

    #[test]
    fn full_tiny_pipeline_produces_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline::new(tiny_config(), dir.path().to_path_buf(), false);
        p.gen_corpus().unwrap();
        p.prepare_labels().unwrap();
        p.pretrain().unwrap();
        p.finetune(None).unwrap();
        let outcome = p.evaluate_stage(None).unwrap();
        assert!(matches!(outcome, StageOutcome::Ran(_)));
        let text =
            std::fs::read_to_string(p.metrics_path("eval-pretrained")).unwrap();
        assert!(text.contains("re.f1 = "));
        assert!(text.contains("meta.config_hash = "));
        let report = p.report().unwrap();
        assert!(matches!(report, StageOutcome::Ran(_)));
        // Rerunning completed stages is a no-op.
        assert!(matches!(p.pretrain().unwrap(), StageOutcome::Skipped(_)));
        assert!(matches!(p.finetune(None).unwrap(), StageOutcome::Skipped(_)));
    }
}
