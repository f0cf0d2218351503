//! Poisson line re-segmentation.
//!
//! Line-level OCR boxes make most segment pairs point straight up or down,
//! which starves direction-based pre-training of label variety. Splitting
//! lines into shorter word runs restores the balance. A line of `N_w` words
//! splits with probability `1 - 1/(N_w - 0.5)` into a Poisson-distributed
//! number of contiguous, near-equal word runs.

use std::collections::BTreeSet;

use rand::Rng;

use super::{Document, TextSegment};
use crate::error::Result;
use crate::rng;

/// Knuth inversion sampler; fine for the small rates used here.
fn sample_poisson(lambda: f64, rng: &mut impl Rng) -> usize {
    let limit = (-lambda).exp();
    let mut k = 0usize;
    let mut p = 1.0f64;
    loop {
        p *= rng.gen::<f64>();
        if p <= limit {
            return k;
        }
        k += 1;
    }
}

/// Result of splitting one line; `took_split_branch` records the coin flip
/// even when the Poisson draw came out as a single run, so empirical branch
/// rates can be measured directly.
#[derive(Debug, Clone)]
pub struct LineSplit {
    pub segments: Vec<TextSegment>,
    pub took_split_branch: bool,
}

/// Splits one line into contiguous word runs. Returns the line unchanged
/// when it has fewer than 2 words or the split coin fails. The concatenation
/// of the output words always equals the input words in order.
pub fn poisson_line_segmentation(line: &TextSegment, rng: &mut impl Rng) -> Vec<TextSegment> {
    poisson_line_segmentation_traced(line, rng).segments
}

/// Same as [`poisson_line_segmentation`] but reports the branch decision.
pub fn poisson_line_segmentation_traced(line: &TextSegment, rng: &mut impl Rng) -> LineSplit {
    let unchanged = |split| LineSplit {
        segments: vec![line.clone()],
        took_split_branch: split,
    };
    let n_words = line.words.len();
    if n_words < 2 {
        return unchanged(false);
    }
    let p_split = 1.0 - 1.0 / (n_words as f64 - 0.5);
    if rng.gen::<f64>() > p_split {
        return unchanged(false);
    }
    let lambda = (n_words as f64 / 3.0).min(7.0);
    let n_segments = sample_poisson(lambda, rng).clamp(1, n_words);

    // Contiguous near-equal partition: the first (n_words % n_segments)
    // runs take one extra word.
    let base = n_words / n_segments;
    let extra = n_words % n_segments;
    let mut out = Vec::with_capacity(n_segments);
    let mut cursor = 0usize;
    for i in 0..n_segments {
        let len = base + usize::from(i < extra);
        let words = line.words[cursor..cursor + len].to_vec();
        cursor += len;
        out.push(
            TextSegment::from_words(line.id, line.label, words)
                .expect("non-empty word run from a valid line"),
        );
    }
    debug_assert_eq!(cursor, n_words);
    LineSplit {
        segments: out,
        took_split_branch: true,
    }
}

/// Re-segments every line of a document, reassigning positional ids. Links
/// follow each endpoint to the first child of its original segment.
pub fn resegment_document(doc: &Document, rng: &mut impl Rng) -> Result<Document> {
    let mut segments = Vec::new();
    let mut first_child = vec![0usize; doc.segments.len()];
    for seg in &doc.segments {
        first_child[seg.id] = segments.len();
        for mut child in poisson_line_segmentation(seg, rng) {
            child.id = segments.len();
            child.token_ids.clear();
            segments.push(child);
        }
    }
    let links: BTreeSet<(usize, usize)> = doc
        .links
        .iter()
        .map(|&(f, s)| (first_child[f], first_child[s]))
        .filter(|(f, s)| f != s)
        .collect();
    Document::new(doc.id.clone(), segments, links)
}

/// Applies [`resegment_document`] to each document independently with the
/// given probability, using a per-document stream derived from `seed`.
pub fn apply_segmentation(docs: &[Document], prob: f64, seed: u64) -> Result<Vec<Document>> {
    let mut out = Vec::with_capacity(docs.len());
    for (idx, doc) in docs.iter().enumerate() {
        let mut stream = rng::derive(seed, "resegment", idx as u64);
        if stream.gen::<f64>() < prob {
            out.push(resegment_document(doc, &mut stream)?);
        } else {
            out.push(doc.clone());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{EntityLabel, Word};
    use crate::geometry::BBox;
    use std::collections::BTreeSet;

    fn line(n_words: usize) -> TextSegment {
        let words: Vec<Word> = (0..n_words)
            .map(|i| Word {
                text: format!("w{i}"),
                bbox: BBox::new(10.0 * i as f64 + 1.0, 5.0, 10.0 * i as f64 + 9.0, 15.0).unwrap(),
            })
            .collect();
        TextSegment::from_words(0, EntityLabel::Other, words).unwrap()
    }

    #[test]
    fn single_word_line_is_unchanged() {
        let l = line(1);
        let mut rng = rng::derive(1, "t", 0);
        let out = poisson_line_segmentation(&l, &mut rng);
        assert_eq!(out, vec![l]);
    }

    #[test]
    fn split_probability_formula() {
        // N_w = 10 gives p = 1 - 1/9.5.
        assert!((1.0f64 - 1.0 / 9.5 - 0.894_736_842).abs() < 1e-6);
        // The lambda cap engages at N_w = 30.
        assert_eq!((30.0f64 / 3.0).min(7.0), 7.0);
    }

    #[test]
    fn concatenation_identity_and_hulls() {
        let l = line(17);
        for salt in 0..50 {
            let mut rng = rng::derive(9, "concat", salt);
            let out = poisson_line_segmentation(&l, &mut rng);
            let rejoined: Vec<&str> = out
                .iter()
                .flat_map(|s| s.words.iter().map(|w| w.text.as_str()))
                .collect();
            let original: Vec<&str> = l.words.iter().map(|w| w.text.as_str()).collect();
            assert_eq!(rejoined, original);
            for seg in &out {
                let hull = BBox::hull(seg.words.iter().map(|w| &w.bbox)).unwrap();
                assert_eq!(seg.bbox, hull);
            }
        }
    }

    #[test]
    fn empirical_branch_rate_matches_formula() {
        let l = line(10);
        let trials = 20_000;
        let mut branch = 0usize;
        let mut multi = 0usize;
        for salt in 0..trials {
            let mut rng = rng::derive(3, "rate", salt as u64);
            let split = poisson_line_segmentation_traced(&l, &mut rng);
            branch += usize::from(split.took_split_branch);
            multi += usize::from(split.segments.len() > 1);
        }
        let p = 1.0 - 1.0 / 9.5;
        let sigma = (p * (1.0 - p) / trials as f64).sqrt();
        let observed = branch as f64 / trials as f64;
        assert!(
            (observed - p).abs() < 3.0 * sigma + 1e-9,
            "observed {observed}, expected {p}"
        );

        // Observable multi-segment outputs are rarer: the Poisson draw can
        // come out as a single run even on the split branch.
        let lambda = 10.0f64 / 3.0;
        let p_single = (-lambda).exp() * (1.0 + lambda);
        let expected_multi = p * (1.0 - p_single);
        let sigma_multi = (expected_multi * (1.0 - expected_multi) / trials as f64).sqrt();
        let observed_multi = multi as f64 / trials as f64;
        assert!(
            (observed_multi - expected_multi).abs() < 3.0 * sigma_multi + 1e-9,
            "observed {observed_multi}, expected {expected_multi}"
        );
    }

    #[test]
    fn apply_segmentation_prob_zero_is_identity() {
        let seg = line(8);
        let doc = Document::new("d".into(), vec![seg], BTreeSet::new()).unwrap();
        let out = apply_segmentation(&[doc.clone()], 0.0, 5).unwrap();
        assert_eq!(out, vec![doc]);
    }

    #[test]
    fn apply_segmentation_single_word_lines_unchanged_at_prob_one() {
        let mut seg = line(1);
        seg.id = 0;
        let doc = Document::new("d".into(), vec![seg], BTreeSet::new()).unwrap();
        let out = apply_segmentation(&[doc.clone()], 1.0, 5).unwrap();
        assert_eq!(out, vec![doc]);
    }

    #[test]
    fn document_resegmentation_rate_matches_probability() {
        // A document with many long lines is visibly changed whenever the
        // per-document coin selects it (the chance that every line comes
        // back unchanged is ~1e-5), so the changed fraction estimates the
        // gate probability directly.
        let mut segments = Vec::new();
        for i in 0..8 {
            let words: Vec<Word> = (0..10)
                .map(|w| Word {
                    text: format!("t{w}"),
                    bbox: BBox::new(
                        1.0 + 20.0 * w as f64,
                        1.0 + 20.0 * i as f64,
                        18.0 + 20.0 * w as f64,
                        15.0 + 20.0 * i as f64,
                    )
                    .unwrap(),
                })
                .collect();
            segments.push(TextSegment::from_words(i, EntityLabel::Other, words).unwrap());
        }
        let doc = Document::new("mc".into(), segments, BTreeSet::new()).unwrap();
        let docs: Vec<Document> = vec![doc; 20_000];
        let out = apply_segmentation(&docs, 0.9, 99).unwrap();
        let changed = out
            .iter()
            .zip(&docs)
            .filter(|(after, before)| after != before)
            .count();
        let rate = changed as f64 / docs.len() as f64;
        assert!((rate - 0.9).abs() < 0.01, "changed fraction {rate}");
    }

    #[test]
    fn links_follow_first_children() {
        let key = line(1);
        let mut value = line(6);
        value.id = 1;
        let value = TextSegment::from_words(
            1,
            EntityLabel::Answer,
            value
                .words
                .iter()
                .map(|w| Word {
                    text: w.text.clone(),
                    bbox: w.bbox.translate(0.0, 30.0).unwrap(),
                })
                .collect(),
        )
        .unwrap();
        let mut links = BTreeSet::new();
        links.insert((0, 1));
        let doc = Document::new("d".into(), vec![key, value], links).unwrap();
        for salt in 0..20 {
            let mut rng = rng::derive(11, "links", salt);
            let out = resegment_document(&doc, &mut rng).unwrap();
            assert!(out.links.contains(&(0, 1)));
            out.validate().unwrap();
        }
    }
}
