//! Document data model, FUNSD-format ingestion, synthetic form generation,
//! and the Poisson line re-segmentation pre-processor.

mod funsd;
mod segmentation;
mod synth;

pub use funsd::{load_funsd, parse_funsd_json, serialize_funsd_json, LoadedDocument};
pub use segmentation::{
    apply_segmentation, poisson_line_segmentation, poisson_line_segmentation_traced,
    resegment_document, LineSplit,
};
pub use synth::{generate_synthetic_corpus, GeneratorSpec};

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Hard cap on segments per document; extra segments are dropped in reading
/// order at ingestion time.
pub const MAX_SEGMENTS: usize = 256;

/// Entity class of a text segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityLabel {
    Header,
    Question,
    Answer,
    Other,
}

impl EntityLabel {
    pub const ALL: [EntityLabel; 4] = [
        EntityLabel::Header,
        EntityLabel::Question,
        EntityLabel::Answer,
        EntityLabel::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EntityLabel::Header => "header",
            EntityLabel::Question => "question",
            EntityLabel::Answer => "answer",
            EntityLabel::Other => "other",
        }
    }

    pub fn parse(s: &str) -> Option<EntityLabel> {
        match s {
            "header" => Some(EntityLabel::Header),
            "question" => Some(EntityLabel::Question),
            "answer" => Some(EntityLabel::Answer),
            "other" => Some(EntityLabel::Other),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Word {
    pub text: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

/// A contiguous run of words with one bounding box; the node unit for all
/// geometric relations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextSegment {
    pub id: usize,
    pub text: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub label: EntityLabel,
    pub words: Vec<Word>,
    /// Vocabulary ids, one per word. Empty until [`Document::tokenize`].
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub token_ids: Vec<u32>,
}

impl TextSegment {
    pub fn from_words(id: usize, label: EntityLabel, words: Vec<Word>) -> Result<TextSegment> {
        let bbox = BBox::hull(words.iter().map(|w| &w.bbox))
            .ok_or_else(|| Error::Document(format!("segment {id} has no words")))?;
        let text = words
            .iter()
            .map(|w| w.text.as_str())
            .collect::<Vec<_>>()
            .join(" ");
        Ok(TextSegment {
            id,
            text,
            bbox,
            label,
            words,
            token_ids: Vec::new(),
        })
    }
}

/// A document: segments plus directed father -> son links between them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub segments: Vec<TextSegment>,
    /// Ordered pairs (father segment id, son segment id).
    pub links: BTreeSet<(usize, usize)>,
}

impl Document {
    pub fn new(id: String, segments: Vec<TextSegment>, links: BTreeSet<(usize, usize)>) -> Result<Document> {
        let doc = Document { id, segments, links };
        doc.validate()?;
        Ok(doc)
    }

    /// Checks the structural invariants: ids are positional, links reference
    /// existing segments, no self-links, segment count within the cap, and
    /// every segment box contains its word boxes.
    pub fn validate(&self) -> Result<()> {
        if self.segments.len() > MAX_SEGMENTS {
            return Err(Error::Document(format!(
                "document {} has {} segments (cap {MAX_SEGMENTS})",
                self.id,
                self.segments.len()
            )));
        }
        for (idx, seg) in self.segments.iter().enumerate() {
            if seg.id != idx {
                return Err(Error::Document(format!(
                    "document {}: segment id {} at position {idx}",
                    self.id, seg.id
                )));
            }
            if !seg.token_ids.is_empty() && seg.token_ids.len() != seg.words.len() {
                return Err(Error::Document(format!(
                    "document {}: segment {idx} has {} token ids for {} words",
                    self.id,
                    seg.token_ids.len(),
                    seg.words.len()
                )));
            }
            for w in &seg.words {
                if w.text.is_empty() {
                    return Err(Error::Document(format!(
                        "document {}: empty word in segment {idx}",
                        self.id
                    )));
                }
                let eps = 1e-6;
                if w.bbox.x1() < seg.bbox.x1() - eps
                    || w.bbox.y1() < seg.bbox.y1() - eps
                    || w.bbox.x2() > seg.bbox.x2() + eps
                    || w.bbox.y2() > seg.bbox.y2() + eps
                {
                    return Err(Error::Document(format!(
                        "document {}: word box escapes segment {idx}",
                        self.id
                    )));
                }
            }
        }
        for &(father, son) in &self.links {
            if father == son {
                return Err(Error::Document(format!(
                    "document {}: self-link on segment {father}",
                    self.id
                )));
            }
            if father >= self.segments.len() || son >= self.segments.len() {
                return Err(Error::Document(format!(
                    "document {}: link ({father}, {son}) out of range",
                    self.id
                )));
            }
        }
        Ok(())
    }

    pub fn boxes(&self) -> Vec<BBox> {
        self.segments.iter().map(|s| s.bbox).collect()
    }

    /// Page extent used to normalize coordinates: the document hull, so
    /// bucketization is independent of unknown source image sizes.
    pub fn extent(&self) -> (f64, f64) {
        let mut w: f64 = 1.0;
        let mut h: f64 = 1.0;
        for s in &self.segments {
            w = w.max(s.bbox.x2());
            h = h.max(s.bbox.y2());
        }
        (w, h)
    }

    /// Assigns one vocabulary id per word in every segment.
    pub fn tokenize(&mut self, vocab: &Vocabulary) {
        for seg in &mut self.segments {
            seg.token_ids = seg.words.iter().map(|w| vocab.id(&w.text)).collect();
        }
    }

    pub fn token_count(&self) -> usize {
        self.segments.iter().map(|s| s.words.len()).sum()
    }

    /// Gold fathers of each segment, indexed by son id.
    pub fn fathers(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.segments.len()];
        for &(father, son) in &self.links {
            out[son].push(father);
        }
        out
    }
}

pub const PAD_ID: u32 = 0;
pub const MASK_ID: u32 = 1;
pub const UNK_ID: u32 = 2;
pub const CLS_ID: u32 = 3;
const RESERVED: [&str; 4] = ["[PAD]", "[MASK]", "[UNK]", "[CLS]"];

/// Word-level vocabulary with reserved ids for [PAD], [MASK], [UNK], [CLS].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

impl Vocabulary {
    /// Builds from the distinct word strings of a corpus, sorted for
    /// determinism.
    pub fn build<'a>(docs: impl IntoIterator<Item = &'a Document>) -> Vocabulary {
        let mut set = BTreeSet::new();
        for doc in docs {
            for seg in &doc.segments {
                for w in &seg.words {
                    set.insert(w.text.clone());
                }
            }
        }
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(set);
        Vocabulary { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    /// True when only the reserved tokens are present.
    pub fn is_empty(&self) -> bool {
        self.tokens.len() == RESERVED.len()
    }

    pub fn id(&self, token: &str) -> u32 {
        // Linear layout is fine at desk scale; keep a sorted view for lookup.
        match self.tokens[RESERVED.len()..].binary_search_by(|t| t.as_str().cmp(token)) {
            Ok(pos) => (pos + RESERVED.len()) as u32,
            Err(_) => UNK_ID,
        }
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Vocabulary> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn word(text: &str, x: f64) -> Word {
        Word {
            text: text.to_string(),
            bbox: BBox::new(x, 0.0, x + 10.0, 10.0).unwrap(),
        }
    }

    #[test]
    fn segment_hulls_word_boxes() {
        let seg = TextSegment::from_words(
            0,
            EntityLabel::Question,
            vec![word("total", 0.0), word("due", 20.0)],
        )
        .unwrap();
        assert_eq!(seg.bbox, BBox::new(0.0, 0.0, 30.0, 10.0).unwrap());
        assert_eq!(seg.text, "total due");
    }

    #[test]
    fn document_invariants() {
        let seg0 = TextSegment::from_words(0, EntityLabel::Question, vec![word("a", 0.0)]).unwrap();
        let seg1 =
            TextSegment::from_words(1, EntityLabel::Answer, vec![word("b", 50.0)]).unwrap();
        let mut links = BTreeSet::new();
        links.insert((0, 1));
        let doc = Document::new("d".into(), vec![seg0.clone(), seg1.clone()], links).unwrap();
        assert_eq!(doc.fathers()[1], vec![0]);

        let mut bad = BTreeSet::new();
        bad.insert((0, 0));
        assert!(Document::new("d".into(), vec![seg0.clone(), seg1.clone()], bad).is_err());

        let mut dangling = BTreeSet::new();
        dangling.insert((0, 9));
        assert!(Document::new("d".into(), vec![seg0, seg1], dangling).is_err());
    }

    #[test]
    fn vocabulary_reserved_and_lookup() {
        let seg =
            TextSegment::from_words(0, EntityLabel::Other, vec![word("beta", 0.0), word("alpha", 20.0)])
                .unwrap();
        let doc = Document::new("d".into(), vec![seg], BTreeSet::new()).unwrap();
        let vocab = Vocabulary::build([&doc]);
        assert_eq!(vocab.token(PAD_ID), Some("[PAD]"));
        assert_eq!(vocab.token(MASK_ID), Some("[MASK]"));
        assert_eq!(vocab.id("alpha"), 4);
        assert_eq!(vocab.id("beta"), 5);
        assert_eq!(vocab.id("missing"), UNK_ID);
        assert_eq!(vocab.len(), 6);
    }
}
