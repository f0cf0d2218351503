//! FUNSD-style annotation files.
//!
//! Schema: a top-level object with `"form"`: a list of records
//! `{"id", "text", "box": [x1,y1,x2,y2], "label", "words": [{"text","box"}],
//! "linking": [[father, son], ...]}`. An optional `"meta"` object carries
//! provenance (document id, seed, generator spec, config hash).
//!
//! Parsing normalizes record ids to list positions, hulls word boxes into
//! segment boxes, drops empty words/segments, and fixes link orientation as
//! `[father, son]` (flippable for loaders that stored the reverse).

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Document, EntityLabel, TextSegment, Word, MAX_SEGMENTS};
use crate::error::{Error, Result};
use crate::geometry::BBox;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawWord {
    text: String,
    #[serde(rename = "box")]
    bbox: [f64; 4],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawRecord {
    id: i64,
    #[serde(default)]
    text: String,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    label: String,
    words: Vec<RawWord>,
    #[serde(default)]
    linking: Vec<[i64; 2]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawFunsd {
    form: Vec<RawRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<Value>,
}

/// A parsed document plus non-fatal ingestion warnings (truncation, dropped
/// empty segments).
#[derive(Debug, Clone)]
pub struct LoadedDocument {
    pub document: Document,
    pub meta: Option<Value>,
    pub warnings: Vec<String>,
}

fn parse_box(field: &str, b: [f64; 4]) -> Result<BBox> {
    BBox::new(b[0], b[1], b[2], b[3]).map_err(|e| Error::Parse {
        field: field.to_string(),
        reason: e.to_string(),
    })
}

/// Parses FUNSD-style JSON text. `doc_id` names the document (usually the
/// file stem). `flip_links` swaps the stored pair orientation for corpora
/// whose linking lists are `[son, father]`.
pub fn parse_funsd_json(doc_id: &str, text: &str, flip_links: bool) -> Result<LoadedDocument> {
    let raw: RawFunsd = serde_json::from_str(text).map_err(|e| Error::Parse {
        field: "form".to_string(),
        reason: e.to_string(),
    })?;
    let mut warnings = Vec::new();

    // First pass: validate records, drop empty words, drop empty segments.
    let mut kept: Vec<(i64, TextSegment)> = Vec::new();
    for (pos, rec) in raw.form.iter().enumerate() {
        let label = EntityLabel::parse(&rec.label).ok_or_else(|| Error::Parse {
            field: format!("form[{pos}].label"),
            reason: format!("unknown label `{}`", rec.label),
        })?;
        let mut words = Vec::new();
        for (wpos, w) in rec.words.iter().enumerate() {
            if w.text.trim().is_empty() {
                continue;
            }
            words.push(Word {
                text: w.text.clone(),
                bbox: parse_box(&format!("form[{pos}].words[{wpos}].box"), w.bbox)?,
            });
        }
        if words.is_empty() {
            // Validate the segment box anyway so malformed records fail
            // loudly rather than disappearing.
            parse_box(&format!("form[{pos}].box"), rec.bbox)?;
            warnings.push(format!("form[{pos}]: dropped segment without words"));
            continue;
        }
        let seg = TextSegment::from_words(kept.len(), label, words)
            .map_err(|e| Error::Parse {
                field: format!("form[{pos}].words"),
                reason: e.to_string(),
            })?;
        kept.push((rec.id, seg));
    }

    if kept.len() > MAX_SEGMENTS {
        warnings.push(format!(
            "document has {} segments; keeping the first {MAX_SEGMENTS} in reading order",
            kept.len()
        ));
        kept.truncate(MAX_SEGMENTS);
    }

    let index_of: BTreeMap<i64, usize> = kept
        .iter()
        .enumerate()
        .map(|(idx, (funsd_id, _))| (*funsd_id, idx))
        .collect();

    // Second pass: remap links onto positional ids.
    let mut links = BTreeSet::new();
    for (pos, rec) in raw.form.iter().enumerate() {
        for (lpos, pair) in rec.linking.iter().enumerate() {
            let [mut father, mut son] = *pair;
            if flip_links {
                std::mem::swap(&mut father, &mut son);
            }
            if father == son {
                return Err(Error::Parse {
                    field: format!("form[{pos}].linking[{lpos}]"),
                    reason: format!("self-link on id {father}"),
                });
            }
            match (index_of.get(&father), index_of.get(&son)) {
                (Some(&f), Some(&s)) => {
                    links.insert((f, s));
                }
                _ => {
                    // Links into truncated or dropped segments vanish with
                    // the segment.
                    warnings.push(format!(
                        "form[{pos}].linking[{lpos}]: dropped link to missing segment"
                    ));
                }
            }
        }
    }

    let segments: Vec<TextSegment> = kept.into_iter().map(|(_, seg)| seg).collect();
    let document = Document::new(doc_id.to_string(), segments, links)?;
    Ok(LoadedDocument {
        document,
        meta: raw.meta,
        warnings,
    })
}

/// Serializes a document back into the FUNSD schema (plus optional meta).
/// Links are attached to the son-side `linking` of their father record,
/// matching the FUNSD convention of listing a pair once on the father.
pub fn serialize_funsd_json(doc: &Document, meta: Option<&Value>) -> Result<String> {
    let mut linking_of: BTreeMap<usize, Vec<[i64; 2]>> = BTreeMap::new();
    for &(father, son) in &doc.links {
        linking_of
            .entry(father)
            .or_default()
            .push([father as i64, son as i64]);
    }
    let form: Vec<RawRecord> = doc
        .segments
        .iter()
        .map(|seg| RawRecord {
            id: seg.id as i64,
            text: seg.text.clone(),
            bbox: [seg.bbox.x1(), seg.bbox.y1(), seg.bbox.x2(), seg.bbox.y2()],
            label: seg.label.as_str().to_string(),
            words: seg
                .words
                .iter()
                .map(|w| RawWord {
                    text: w.text.clone(),
                    bbox: [w.bbox.x1(), w.bbox.y1(), w.bbox.x2(), w.bbox.y2()],
                })
                .collect(),
            linking: linking_of.remove(&seg.id).unwrap_or_default(),
        })
        .collect();
    let raw = RawFunsd {
        form,
        meta: meta.cloned(),
    };
    Ok(serde_json::to_string_pretty(&raw)?)
}

/// Loads one FUNSD-style annotation file; the file stem becomes the document
/// id unless the meta block carries one.
pub fn load_funsd(path: &Path) -> Result<LoadedDocument> {
    let text = std::fs::read_to_string(path)?;
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "document".to_string());
    let mut loaded = parse_funsd_json(&stem, &text, false)?;
    if let Some(meta) = &loaded.meta {
        if let Some(id) = meta.get("id").and_then(|v| v.as_str()) {
            loaded.document.id = id.to_string();
        }
    }
    Ok(loaded)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"{
      "form": [
        {"id": 7, "text": "Fax Number:", "box": [10, 10, 90, 24], "label": "question",
         "words": [{"text": "Fax", "box": [10, 10, 35, 24]},
                    {"text": "Number:", "box": [40, 10, 90, 24]}],
         "linking": [[7, 9]]},
        {"id": 9, "text": "212-450-4785", "box": [100, 10, 190, 24], "label": "answer",
         "words": [{"text": "212-450-4785", "box": [100, 10, 190, 24]}],
         "linking": []}
      ]
    }"#;

    #[test]
    fn parses_links_as_father_son() {
        let loaded = parse_funsd_json("doc", SAMPLE, false).unwrap();
        let doc = &loaded.document;
        assert_eq!(doc.segments.len(), 2);
        assert!(doc.links.contains(&(0, 1)));
        assert_eq!(doc.segments[0].label, EntityLabel::Question);
        assert_eq!(doc.segments[0].words.len(), 2);
    }

    #[test]
    fn flip_links_swaps_orientation() {
        let loaded = parse_funsd_json("doc", SAMPLE, true).unwrap();
        assert!(loaded.document.links.contains(&(1, 0)));
    }

    #[test]
    fn empty_form_is_empty_document() {
        let loaded = parse_funsd_json("doc", r#"{"form": []}"#, false).unwrap();
        assert_eq!(loaded.document.segments.len(), 0);
        assert!(loaded.document.links.is_empty());
    }

    #[test]
    fn malformed_box_names_the_field() {
        let bad = r#"{"form": [
            {"id": 0, "text": "x", "box": [10, 10, 5, 24], "label": "question",
             "words": [{"text": "x", "box": [10, 10, 5, 24]}], "linking": []}
        ]}"#;
        let err = parse_funsd_json("doc", bad, false).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("form[0].words[0].box"), "got: {msg}");
    }

    #[test]
    fn unknown_label_names_the_field() {
        let bad = r#"{"form": [
            {"id": 0, "text": "x", "box": [0, 0, 5, 5], "label": "price",
             "words": [{"text": "x", "box": [0, 0, 5, 5]}], "linking": []}
        ]}"#;
        let err = parse_funsd_json("doc", bad, false).unwrap_err();
        assert!(err.to_string().contains("form[0].label"));
    }

    #[test]
    fn round_trip_is_idempotent() {
        let first = parse_funsd_json("doc", SAMPLE, false).unwrap();
        let serialized = serialize_funsd_json(&first.document, None).unwrap();
        let second = parse_funsd_json("doc", &serialized, false).unwrap();
        assert_eq!(first.document, second.document);
    }
}
