//! Text-layout encoder: 5-part token embeddings and the transformer stack
//! producing per-token features and per-segment features.
//!
//! Each token embedding is the sum of: token id, 1D position, segment rank,
//! begin/inside/end position within its segment, and six bucketized box
//! coordinates (x1, y1, x2, y2, w, h) of the segment box. A segment's
//! feature is the encoded feature of its first token.

use crate::corpus::{Document, EntityLabel, Vocabulary};
use crate::error::Result;
use crate::model::{transformer_block, BoundParams, ModelConfig};
use crate::nn::{Graph, NodeId, Real, Tensor};

/// Token-level view of a document, ready for embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedDoc {
    pub token_ids: Vec<usize>,
    pub pos_ids: Vec<usize>,
    pub rank_ids: Vec<usize>,
    pub bie_ids: Vec<usize>,
    /// x1, y1, x2, y2, w, h bucket ids per token.
    pub box_ids: [Vec<usize>; 6],
    /// First-token index of each kept segment.
    pub first_token: Vec<usize>,
    /// Segment index of each token.
    pub token_segment: Vec<usize>,
    /// Gold BIO tag per token.
    pub tags: Vec<usize>,
    /// Number of segments kept (tokens past `max_tokens` drop whole
    /// segments).
    pub n_segments: usize,
    pub truncated: bool,
}

impl TokenizedDoc {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// BIO tag of a token: `B-`/`I-` per entity class, `O` for `other`.
pub fn tag_of(label: EntityLabel, first_word: bool) -> usize {
    match (label, first_word) {
        (EntityLabel::Header, true) => 0,
        (EntityLabel::Header, false) => 1,
        (EntityLabel::Question, true) => 2,
        (EntityLabel::Question, false) => 3,
        (EntityLabel::Answer, true) => 4,
        (EntityLabel::Answer, false) => 5,
        (EntityLabel::Other, _) => 6,
    }
}

pub fn tag_name(tag: usize) -> &'static str {
    ["B-header", "I-header", "B-question", "I-question", "B-answer", "I-answer", "O"][tag]
}

/// Entity class and begin-flag of a tag; `None` for `O`.
pub fn tag_components(tag: usize) -> Option<(EntityLabel, bool)> {
    match tag {
        0 => Some((EntityLabel::Header, true)),
        1 => Some((EntityLabel::Header, false)),
        2 => Some((EntityLabel::Question, true)),
        3 => Some((EntityLabel::Question, false)),
        4 => Some((EntityLabel::Answer, true)),
        5 => Some((EntityLabel::Answer, false)),
        _ => None,
    }
}

fn bucket(v: f64, extent: f64, buckets: usize) -> usize {
    let b = (v / extent * buckets as f64).round();
    (b.max(0.0) as usize).min(buckets)
}

/// Flattens a document into per-token id streams. Token overflow truncates
/// at a segment boundary and flags the result.
pub fn tokenize_document(doc: &Document, vocab: &Vocabulary, cfg: &ModelConfig) -> TokenizedDoc {
    let (ext_x, ext_y) = doc.extent();
    let mut out = TokenizedDoc {
        token_ids: Vec::new(),
        pos_ids: Vec::new(),
        rank_ids: Vec::new(),
        bie_ids: Vec::new(),
        box_ids: Default::default(),
        first_token: Vec::new(),
        token_segment: Vec::new(),
        tags: Vec::new(),
        n_segments: 0,
        truncated: false,
    };
    for (seg_idx, seg) in doc.segments.iter().enumerate() {
        if out.token_ids.len() + seg.words.len() > cfg.max_tokens
            || seg_idx >= cfg.max_segments
        {
            out.truncated = true;
            break;
        }
        out.first_token.push(out.token_ids.len());
        let b = seg.bbox;
        let ids = [
            bucket(b.x1(), ext_x, cfg.coord_buckets),
            bucket(b.y1(), ext_y, cfg.coord_buckets),
            bucket(b.x2(), ext_x, cfg.coord_buckets),
            bucket(b.y2(), ext_y, cfg.coord_buckets),
            bucket(b.width(), ext_x, cfg.coord_buckets),
            bucket(b.height(), ext_y, cfg.coord_buckets),
        ];
        let n_words = seg.words.len();
        for (w_idx, word) in seg.words.iter().enumerate() {
            let token = if seg.token_ids.len() == n_words {
                seg.token_ids[w_idx] as usize
            } else {
                vocab.id(&word.text) as usize
            };
            out.token_ids.push(token.min(cfg.vocab_size - 1));
            out.pos_ids.push(out.pos_ids.len());
            out.rank_ids.push(seg_idx.min(cfg.max_segments - 1));
            out.bie_ids.push(if w_idx == 0 {
                0
            } else if w_idx + 1 == n_words {
                2
            } else {
                1
            });
            for (axis, &id) in ids.iter().enumerate() {
                out.box_ids[axis].push(id);
            }
            out.token_segment.push(seg_idx);
            out.tags.push(tag_of(seg.label, w_idx == 0));
        }
        out.n_segments += 1;
    }
    out
}

/// Sum of the five embedding families for each token.
pub fn embed<T: Real>(
    g: &mut Graph<T>,
    bound: &BoundParams,
    tok: &TokenizedDoc,
) -> Result<NodeId> {
    let token = g.embedding_lookup(bound.id("emb.token"), &tok.token_ids)?;
    let pos = g.embedding_lookup(bound.id("emb.pos"), &tok.pos_ids)?;
    let rank = g.embedding_lookup(bound.id("emb.rank"), &tok.rank_ids)?;
    let bie = g.embedding_lookup(bound.id("emb.bie"), &tok.bie_ids)?;
    let mut acc = g.add(token, pos)?;
    acc = g.add(acc, rank)?;
    acc = g.add(acc, bie)?;
    for (axis, name) in ["x1", "y1", "x2", "y2", "w", "h"].iter().enumerate() {
        let e = g.embedding_lookup(bound.id(&format!("emb.box.{name}")), &tok.box_ids[axis])?;
        acc = g.add(acc, e)?;
    }
    Ok(acc)
}

/// Encoded views of one document inside a live graph.
pub struct EncodedDocument {
    /// `[T, d]` token features.
    pub tokens: NodeId,
    /// `[n, d]` segment features (first-token rows).
    pub segments: NodeId,
    pub n_segments: usize,
    pub n_tokens: usize,
}

/// Runs the pre-norm transformer stack over embedded tokens. `pad_from`
/// masks keys at positions `>= pad_from` out of every attention row, so
/// padding never influences real tokens.
pub fn encode_tokens<T: Real>(
    g: &mut Graph<T>,
    bound: &BoundParams,
    cfg: &ModelConfig,
    embedded: NodeId,
    pad_from: Option<usize>,
) -> Result<NodeId> {
    let t = g.value(embedded).rows();
    let mask = match pad_from {
        Some(p) if p < t => {
            let mut m = Tensor::zeros(vec![t, t]);
            for i in 0..t {
                for j in p..t {
                    m.data_mut()[i * t + j] = T::from_f64(-1e9);
                }
            }
            Some(g.input(m))
        }
        _ => None,
    };
    let mut x = embedded;
    for l in 0..cfg.layers {
        x = transformer_block(
            g,
            bound,
            &format!("enc.{l}"),
            x,
            None,
            cfg.heads,
            cfg.ln_eps,
            mask,
        )?;
    }
    let gam = bound.id("enc.final_ln.g");
    let bet = bound.id("enc.final_ln.b");
    g.layer_norm(x, gam, bet, cfg.ln_eps)
}

/// Embeds and encodes a tokenized document, gathering segment features.
pub fn encode_document<T: Real>(
    g: &mut Graph<T>,
    bound: &BoundParams,
    cfg: &ModelConfig,
    tok: &TokenizedDoc,
) -> Result<EncodedDocument> {
    let embedded = embed(g, bound, tok)?;
    let tokens = encode_tokens(g, bound, cfg, embedded, None)?;
    let segments = g.gather_rows(tokens, &tok.first_token)?;
    Ok(EncodedDocument {
        tokens,
        segments,
        n_segments: tok.n_segments,
        n_tokens: tok.len(),
    })
}
