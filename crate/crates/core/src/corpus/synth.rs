//! Synthetic form-like documents with ground-truth links.
//!
//! Pages are laid out as columns of key/value cells with optional group
//! headers, jittered positions, and occasional noise segments. Link truth
//! follows geometry: a value sits right of or below its key, group members
//! sit below their header. Key and value texts are drawn from overlapping
//! token pools, so surface text alone cannot tell which key a value belongs
//! to; the layout has to carry that information.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Document, EntityLabel, TextSegment, Word};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub docs: usize,
    pub columns: usize,
    /// Key/value rows per column (headers and multi-row groups included).
    pub rows_per_column: usize,
    pub page_width: f64,
    pub page_height: f64,
    /// Uniform positional jitter in pixels, applied per cell.
    pub jitter: f64,
    /// Probability that a value sits below its key instead of to the right.
    pub value_below_rate: f64,
    /// Probability that a row becomes a two-key shared value (a son with
    /// two fathers).
    pub multi_father_rate: f64,
    /// Probability that a key gets a stack of two or three values (a father
    /// with several sons).
    pub multi_son_rate: f64,
    /// Probability that a row starts a header group spanning the rows below.
    pub header_rate: f64,
    /// Probability of dropping an unlinked noise segment into a row slot.
    pub other_rate: f64,
    pub key_tokens: Vec<String>,
    pub value_tokens: Vec<String>,
    pub min_words: usize,
    pub max_words: usize,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        let shared: Vec<String> = [
            "code", "ref", "total", "date", "alpha", "beta", "gamma", "delta", "unit", "batch",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let mut key_tokens = shared.clone();
        key_tokens.extend(["name", "status", "count", "origin", "owner", "phase"].map(String::from));
        let mut value_tokens = shared;
        value_tokens.extend(
            ["10", "20", "42", "77", "ok", "none", "open", "closed", "high", "low"].map(String::from),
        );
        GeneratorSpec {
            docs: 10,
            columns: 2,
            rows_per_column: 5,
            page_width: 1000.0,
            page_height: 1000.0,
            jitter: 3.0,
            value_below_rate: 0.3,
            multi_father_rate: 0.15,
            multi_son_rate: 0.15,
            header_rate: 0.2,
            other_rate: 0.1,
            key_tokens,
            value_tokens,
            min_words: 1,
            max_words: 2,
        }
    }
}

const MARGIN: f64 = 40.0;
const CHAR_W: f64 = 7.0;
const WORD_GAP: f64 = 4.0;
const LINE_H: f64 = 14.0;

struct Builder<'a> {
    spec: &'a GeneratorSpec,
    segments: Vec<TextSegment>,
    links: BTreeSet<(usize, usize)>,
}

impl<'a> Builder<'a> {
    fn words_at(&self, texts: &[&str], x: f64, y: f64) -> Vec<Word> {
        let mut words = Vec::with_capacity(texts.len());
        let mut cx = x;
        for t in texts {
            let w = CHAR_W * t.len() as f64;
            words.push(Word {
                text: t.to_string(),
                bbox: BBox::new(cx, y, cx + w, y + LINE_H).expect("generator box"),
            });
            cx += w + WORD_GAP;
        }
        words
    }

    fn push(&mut self, label: EntityLabel, texts: &[&str], x: f64, y: f64) -> Result<usize> {
        let id = self.segments.len();
        let words = self.words_at(texts, x, y);
        let seg = TextSegment::from_words(id, label, words)?;
        if seg.bbox.x2() > self.spec.page_width || seg.bbox.y2() > self.spec.page_height {
            return Err(Error::Generation(format!(
                "segment at ({x:.0}, {y:.0}) overflows the {}x{} page",
                self.spec.page_width, self.spec.page_height
            )));
        }
        self.segments.push(seg);
        Ok(id)
    }

    fn link(&mut self, father: usize, son: usize) {
        self.links.insert((father, son));
    }
}

fn pick_words<'s>(pool: &'s [String], n: usize, rng: &mut impl Rng) -> Vec<&'s str> {
    (0..n)
        .map(|_| pool.choose(rng).expect("non-empty pool").as_str())
        .collect()
}

fn jitter(spec: &GeneratorSpec, rng: &mut impl Rng) -> f64 {
    if spec.jitter == 0.0 {
        0.0
    } else {
        rng.gen_range(-spec.jitter..=spec.jitter)
    }
}

/// Generates one document from a dedicated RNG stream.
fn generate_document(spec: &GeneratorSpec, doc_id: String, rng: &mut impl Rng) -> Result<Document> {
    if spec.columns == 0 || spec.rows_per_column == 0 {
        return Err(Error::Generation("columns and rows must be positive".into()));
    }
    if spec.min_words == 0 || spec.min_words > spec.max_words {
        return Err(Error::Generation("bad words-per-segment range".into()));
    }
    if spec.key_tokens.is_empty() || spec.value_tokens.is_empty() {
        return Err(Error::Generation("empty token pool".into()));
    }
    let col_w = (spec.page_width - 2.0 * MARGIN) / spec.columns as f64;
    // Each row needs space for a key plus a possible stacked value below it.
    let row_h = (spec.page_height - 2.0 * MARGIN) / spec.rows_per_column as f64;
    if row_h < 3.5 * LINE_H + 2.0 * spec.jitter || col_w < 24.0 * CHAR_W {
        return Err(Error::Generation(format!(
            "page {}x{} too small for {} columns x {} rows",
            spec.page_width, spec.page_height, spec.columns, spec.rows_per_column
        )));
    }

    let mut b = Builder {
        spec,
        segments: Vec::new(),
        links: BTreeSet::new(),
    };

    for col in 0..spec.columns {
        let col_x = MARGIN + col as f64 * col_w;
        let mut header: Option<(usize, usize)> = None; // (segment id, rows left)
        for row in 0..spec.rows_per_column {
            let row_y = MARGIN + row as f64 * row_h;
            let x = col_x + jitter(spec, rng);
            let y = row_y + jitter(spec, rng);
            let n_words = rng.gen_range(spec.min_words..=spec.max_words);

            if rng.gen::<f64>() < spec.other_rate {
                let texts = pick_words(&spec.value_tokens, n_words, rng);
                b.push(EntityLabel::Other, &texts, x, y)?;
                continue;
            }

            if rng.gen::<f64>() < spec.header_rate {
                let texts = pick_words(&spec.key_tokens, n_words, rng);
                let id = b.push(EntityLabel::Header, &texts, x, y)?;
                let span = rng.gen_range(1..=3usize);
                header = Some((id, span));
                continue;
            }

            if rng.gen::<f64>() < spec.multi_father_rate {
                // Table-style cell: a column key above and a row key to the
                // left of one shared value, so both links follow the same
                // below/right-of adjacency as ordinary pairs.
                let left_texts = pick_words(&spec.key_tokens, 1, rng);
                let k_left =
                    b.push(EntityLabel::Question, &left_texts, x, y + LINE_H + 6.0)?;
                let vx = b.segments[k_left].bbox.x2() + 2.0 * CHAR_W;
                let above_texts = pick_words(&spec.key_tokens, 1, rng);
                let k_above = b.push(EntityLabel::Question, &above_texts, vx, y)?;
                let v_texts = pick_words(&spec.value_tokens, 1, rng);
                let v = b.push(EntityLabel::Answer, &v_texts, vx, y + LINE_H + 6.0)?;
                b.link(k_above, v);
                b.link(k_left, v);
                if let Some((h, left)) = header.take() {
                    b.link(h, k_left);
                    if left > 1 {
                        header = Some((h, left - 1));
                    }
                }
                continue;
            }

            // Plain key plus one or more values.
            let k_texts = pick_words(&spec.key_tokens, n_words, rng);
            let key = b.push(EntityLabel::Question, &k_texts, x, y)?;
            let sons = if rng.gen::<f64>() < spec.multi_son_rate {
                rng.gen_range(2..=3usize)
            } else {
                1
            };
            if sons > 1 || rng.gen::<f64>() < spec.value_below_rate {
                // Values stacked below the key.
                let vx = x + 2.0 * CHAR_W;
                for s in 0..sons {
                    let vy = y + (s + 1) as f64 * (LINE_H + 4.0);
                    let v_texts = pick_words(&spec.value_tokens, 1, rng);
                    let v = b.push(EntityLabel::Answer, &v_texts, vx, vy)?;
                    b.link(key, v);
                }
            } else {
                let v_texts = pick_words(&spec.value_tokens, n_words, rng);
                let kx2 = b.segments[key].bbox.x2();
                let v = b.push(EntityLabel::Answer, &v_texts, kx2 + 2.0 * CHAR_W, y)?;
                b.link(key, v);
            }
            if let Some((h, left)) = header.take() {
                b.link(h, key);
                if left > 1 {
                    header = Some((h, left - 1));
                }
            }
        }
    }

    Document::new(doc_id, b.segments, b.links)
}

/// Generates `spec.docs` documents deterministically from `seed`. Equal
/// seeds and specs produce identical corpora.
pub fn generate_synthetic_corpus(spec: &GeneratorSpec, seed: u64) -> Result<Vec<Document>> {
    (0..spec.docs)
        .map(|idx| {
            let mut stream = rng::derive(seed, "synth", idx as u64);
            generate_document(spec, format!("synth-{seed:08x}-{idx:04}"), &mut stream)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pair_layout() {
        let spec = GeneratorSpec {
            docs: 1,
            columns: 1,
            rows_per_column: 1,
            header_rate: 0.0,
            multi_father_rate: 0.0,
            multi_son_rate: 0.0,
            other_rate: 0.0,
            ..GeneratorSpec::default()
        };
        let docs = generate_synthetic_corpus(&spec, 1).unwrap();
        assert_eq!(docs[0].segments.len(), 2);
        assert_eq!(docs[0].links.len(), 1);
    }

    #[test]
    fn multi_father_rate_one_gives_every_son_two_fathers() {
        let spec = GeneratorSpec {
            docs: 3,
            columns: 2,
            rows_per_column: 4,
            header_rate: 0.0,
            multi_father_rate: 1.0,
            multi_son_rate: 0.0,
            other_rate: 0.0,
            ..GeneratorSpec::default()
        };
        let docs = generate_synthetic_corpus(&spec, 2).unwrap();
        for doc in &docs {
            let fathers = doc.fathers();
            for (son, fs) in fathers.iter().enumerate() {
                if doc.segments[son].label == EntityLabel::Answer {
                    assert!(fs.len() >= 2, "son {son} has fathers {fs:?}");
                }
            }
        }
    }

    #[test]
    fn deterministic_regeneration() {
        let spec = GeneratorSpec {
            docs: 4,
            ..GeneratorSpec::default()
        };
        let a = generate_synthetic_corpus(&spec, 42).unwrap();
        let b = generate_synthetic_corpus(&spec, 42).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_corpus(&spec, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn documents_satisfy_invariants() {
        let spec = GeneratorSpec {
            docs: 6,
            ..GeneratorSpec::default()
        };
        for doc in generate_synthetic_corpus(&spec, 7).unwrap() {
            doc.validate().unwrap();
            assert!(!doc.links.is_empty());
        }
    }

    #[test]
    fn infeasible_layout_errors() {
        let spec = GeneratorSpec {
            docs: 1,
            columns: 12,
            rows_per_column: 40,
            page_width: 300.0,
            page_height: 300.0,
            ..GeneratorSpec::default()
        };
        assert!(generate_synthetic_corpus(&spec, 1).is_err());
    }
}
