//! Link and entity metrics, and the serialized report format.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::corpus::EntityLabel;
use crate::encoder::tag_components;
use crate::error::{Error, Result};

use super::infer::DecodedRelations;

/// Harmonic mean, 0 when both inputs are 0.
pub fn f1_from(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PrF1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl PrF1 {
    pub fn from_counts(tp: usize, fp: usize, r#fn: usize) -> PrF1 {
        let precision = if tp + fp == 0 {
            0.0
        } else {
            tp as f64 / (tp + fp) as f64
        };
        let recall = if tp + r#fn == 0 {
            0.0
        } else {
            tp as f64 / (tp + r#fn) as f64
        };
        PrF1 {
            precision,
            recall,
            f1: f1_from(precision, recall),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ProbeStats {
    /// Mean prediction entropy on held-out pairs.
    pub entropy: f64,
    pub cross_entropy: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub config_hash: String,
    pub seed: u64,
    pub format_version: u32,
}

/// Evaluation output: micro link metrics, entity-level tag metrics, optional
/// probe statistics, run metadata.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub re: PrF1,
    pub ser: PrF1,
    pub probe: Option<ProbeStats>,
    pub meta: ReportMeta,
}

impl MetricsReport {
    /// Flat `key = value` rendering with stable keys and fixed precision.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut push = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        push("meta.config_hash", self.meta.config_hash.clone());
        push("meta.format_version", self.meta.format_version.to_string());
        push("meta.seed", self.meta.seed.to_string());
        push("re.precision", format!("{:.6}", self.re.precision));
        push("re.recall", format!("{:.6}", self.re.recall));
        push("re.f1", format!("{:.6}", self.re.f1));
        push("ser.precision", format!("{:.6}", self.ser.precision));
        push("ser.recall", format!("{:.6}", self.ser.recall));
        push("ser.f1", format!("{:.6}", self.ser.f1));
        if let Some(p) = &self.probe {
            push("probe.entropy", format!("{:.6}", p.entropy));
            push("probe.xent", format!("{:.6}", p.cross_entropy));
            push("probe.acc", format!("{:.6}", p.accuracy));
        }
        out
    }

    pub fn parse_text(text: &str) -> Result<MetricsReport> {
        let mut report = MetricsReport::default();
        let mut probe = ProbeStats::default();
        let mut has_probe = false;
        for line in text.lines() {
            let Some((key, value)) = line.split_once(" = ") else {
                continue;
            };
            let fval = || -> Result<f64> {
                value.trim().parse::<f64>().map_err(|e| Error::Parse {
                    field: key.to_string(),
                    reason: e.to_string(),
                })
            };
            match key.trim() {
                "meta.config_hash" => report.meta.config_hash = value.trim().to_string(),
                "meta.format_version" => {
                    report.meta.format_version =
                        value.trim().parse().map_err(|_| Error::Parse {
                            field: key.to_string(),
                            reason: "bad integer".into(),
                        })?
                }
                "meta.seed" => {
                    report.meta.seed = value.trim().parse().map_err(|_| Error::Parse {
                        field: key.to_string(),
                        reason: "bad integer".into(),
                    })?
                }
                "re.precision" => report.re.precision = fval()?,
                "re.recall" => report.re.recall = fval()?,
                "re.f1" => report.re.f1 = fval()?,
                "ser.precision" => report.ser.precision = fval()?,
                "ser.recall" => report.ser.recall = fval()?,
                "ser.f1" => report.ser.f1 = fval()?,
                "probe.entropy" => {
                    probe.entropy = fval()?;
                    has_probe = true;
                }
                "probe.xent" => {
                    probe.cross_entropy = fval()?;
                    has_probe = true;
                }
                "probe.acc" => {
                    probe.accuracy = fval()?;
                    has_probe = true;
                }
                _ => {}
            }
        }
        if has_probe {
            report.probe = Some(probe);
        }
        Ok(report)
    }
}

/// Gold view of a document for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct GoldDoc {
    pub doc_id: String,
    pub links: BTreeSet<(usize, usize)>,
    pub tags: Vec<usize>,
}

/// Decodes a BIO tag sequence into typed spans `(start, end_exclusive,
/// label)`. A begin tag or a class change starts a new span; `O` closes.
pub fn decode_spans(tags: &[usize]) -> Vec<(usize, usize, EntityLabel)> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, EntityLabel)> = None;
    for (i, &tag) in tags.iter().enumerate() {
        match tag_components(tag) {
            None => {
                if let Some((start, label)) = open.take() {
                    spans.push((start, i, label));
                }
            }
            Some((label, begins)) => {
                let continues = matches!(open, Some((_, l)) if l == label && !begins);
                if !continues {
                    if let Some((start, l)) = open.take() {
                        spans.push((start, i, l));
                    }
                    open = Some((i, label));
                }
            }
        }
    }
    if let Some((start, label)) = open {
        spans.push((start, tags.len(), label));
    }
    spans
}

/// Micro precision/recall/F1 over link sets and entity-level exact-match
/// spans. Predictions and gold must be aligned by document id.
pub fn evaluate(
    predictions: &[(String, DecodedRelations, Vec<usize>)],
    gold: &[GoldDoc],
) -> Result<MetricsReport> {
    if predictions.len() != gold.len() {
        return Err(Error::Evaluation(format!(
            "{} predictions for {} gold documents",
            predictions.len(),
            gold.len()
        )));
    }
    let mut re_tp = 0usize;
    let mut re_fp = 0usize;
    let mut re_fn = 0usize;
    let mut ser_tp = 0usize;
    let mut ser_fp = 0usize;
    let mut ser_fn = 0usize;
    for ((pred_id, decoded, tags), g) in predictions.iter().zip(gold) {
        if *pred_id != g.doc_id {
            return Err(Error::Evaluation(format!(
                "document id mismatch: `{pred_id}` vs `{}`",
                g.doc_id
            )));
        }
        re_tp += decoded.links.intersection(&g.links).count();
        re_fp += decoded.links.difference(&g.links).count();
        re_fn += g.links.difference(&decoded.links).count();

        let pred_spans: BTreeSet<_> = decode_spans(tags).into_iter().collect();
        let gold_spans: BTreeSet<_> = decode_spans(&g.tags).into_iter().collect();
        ser_tp += pred_spans.intersection(&gold_spans).count();
        ser_fp += pred_spans.difference(&gold_spans).count();
        ser_fn += gold_spans.difference(&pred_spans).count();
    }
    Ok(MetricsReport {
        re: PrF1::from_counts(re_tp, re_fp, re_fn),
        ser: PrF1::from_counts(ser_tp, ser_fp, ser_fn),
        probe: None,
        meta: ReportMeta::default(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn harmonic_mean_table_row() {
        // Percent-scale inputs from a published precision/recall pair.
        let f1 = f1_from(88.94, 89.96);
        assert!((f1 - 89.45).abs() < 0.01, "f1 {f1}");
        assert_eq!(f1_from(0.0, 0.0), 0.0);
    }

    fn gold(id: &str, links: &[(usize, usize)], tags: Vec<usize>) -> GoldDoc {
        GoldDoc {
            doc_id: id.into(),
            links: links.iter().copied().collect(),
            tags,
        }
    }

    #[test]
    fn perfect_predictions_score_one() {
        let tags = vec![2, 3, 4, 6];
        let g = gold("a", &[(0, 1)], tags.clone());
        let pred = (
            "a".to_string(),
            DecodedRelations {
                links: [(0usize, 1usize)].into_iter().collect(),
            },
            tags,
        );
        let m = evaluate(&[pred], &[g]).unwrap();
        assert_eq!(m.re.precision, 1.0);
        assert_eq!(m.re.recall, 1.0);
        assert_eq!(m.re.f1, 1.0);
        assert_eq!(m.ser.f1, 1.0);
    }

    #[test]
    fn empty_predictions_use_zero_precision_convention() {
        let g = gold("a", &[(0, 1)], vec![2, 4]);
        let pred = ("a".to_string(), DecodedRelations::default(), vec![6, 6]);
        let m = evaluate(&[pred], &[g]).unwrap();
        assert_eq!(m.re.precision, 0.0);
        assert_eq!(m.re.recall, 0.0);
        assert_eq!(m.re.f1, 0.0);
    }

    #[test]
    fn mismatched_ids_error() {
        let g = gold("a", &[], vec![6]);
        let pred = ("b".to_string(), DecodedRelations::default(), vec![6]);
        assert!(evaluate(&[pred], &[g]).is_err());
    }

    #[test]
    fn span_decoding_rules() {
        use EntityLabel::*;
        // B-question I-question | B-answer | O | I-answer (stray start)
        let tags = vec![2, 3, 4, 6, 5];
        let spans = decode_spans(&tags);
        assert_eq!(
            spans,
            vec![(0, 2, Question), (2, 3, Answer), (4, 5, Answer)]
        );
        // Class change without O: B-q I-q I-a starts a new answer span.
        let tags = vec![2, 3, 5];
        let spans = decode_spans(&tags);
        assert_eq!(spans, vec![(0, 2, Question), (2, 3, Answer)]);
    }

    #[test]
    fn report_text_round_trip() {
        let report = MetricsReport {
            re: PrF1 {
                precision: 0.8894,
                recall: 0.8996,
                f1: f1_from(0.8894, 0.8996),
            },
            ser: PrF1 {
                precision: 1.0,
                recall: 0.5,
                f1: f1_from(1.0, 0.5),
            },
            probe: Some(ProbeStats {
                entropy: 0.7633,
                cross_entropy: 0.5884,
                accuracy: 0.8223,
            }),
            meta: ReportMeta {
                config_hash: "deadbeef".into(),
                seed: 7,
                format_version: 1,
            },
        };
        let text = report.to_text();
        assert!(text.contains("re.f1 = "));
        assert!(text.contains("probe.acc = 0.822300"));
        let parsed = MetricsReport::parse_text(&text).unwrap();
        assert_eq!(parsed.meta.config_hash, "deadbeef");
        assert!((parsed.re.f1 - report.re.f1).abs() < 1e-6);
        assert!((parsed.probe.unwrap().entropy - 0.7633).abs() < 1e-9);
    }
}
