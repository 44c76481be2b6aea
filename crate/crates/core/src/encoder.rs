//! Marked token sequences and the span encoder.

use std::collections::BTreeMap;

use ndarray::Axis;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, ParamId, ParamStore, Tape, Var};
use crate::corpus::{Bag, Mention};
use crate::error::{Error, Result};
use crate::filters::InformativeContext;
use crate::kg::EntityId;
use crate::nn::{init_normal, TransformerBlock};

pub const ENTITY_OPEN: &str = "<e>";
pub const ENTITY_CLOSE: &str = "</e>";
pub const CONTEXT_OPEN: &str = "<c>";
pub const CONTEXT_CLOSE: &str = "</c>";
const MARKERS: [&str; 4] = [ENTITY_OPEN, ENTITY_CLOSE, CONTEXT_OPEN, CONTEXT_CLOSE];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub vocab_hash_buckets: usize,
    pub max_positions: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { embed_dim: 64, num_layers: 3, num_heads: 4, vocab_hash_buckets: 50021, max_positions: 512 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.num_heads == 0 || self.max_positions == 0 {
            return Err(Error::Config("encoder sizes must be positive".into()));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.vocab_hash_buckets <= MARKERS.len() {
            return Err(Error::Config("vocab_hash_buckets too small".into()));
        }
        Ok(())
    }
}

/// Inner token range `[start, end)` of one marked mention, markers excluded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkedSpan {
    pub entity: EntityId,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkedSequence {
    pub tokens: Vec<String>,
    pub spans: Vec<MarkedSpan>,
    pub context_span: Option<(usize, usize)>,
}

impl MarkedSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Spans grouped by entity, in entity order.
    pub fn spans_by_entity(&self) -> BTreeMap<&EntityId, Vec<&MarkedSpan>> {
        let mut out: BTreeMap<&EntityId, Vec<&MarkedSpan>> = BTreeMap::new();
        for s in &self.spans {
            out.entry(&s.entity).or_default().push(s);
        }
        out
    }
}

pub fn is_marker(token: &str) -> bool {
    MARKERS.contains(&token)
}

pub fn strip_markers(tokens: &[String]) -> Vec<String> {
    tokens.iter().filter(|t| !is_marker(t)).cloned().collect()
}

/// Wrap one sentence's mentions in entity markers, appending to `out`.
fn mark_sentence(
    sentence: &[String],
    mentions: &[&Mention],
    out: &mut Vec<String>,
    spans: &mut Vec<MarkedSpan>,
) -> std::result::Result<(), String> {
    let mut ms: Vec<&Mention> = mentions.to_vec();
    ms.sort_by(|a, b| {
        a.token_start.cmp(&b.token_start).then(b.token_end.cmp(&a.token_end)).then(a.entity.cmp(&b.entity))
    });
    ms.dedup_by(|a, b| a == b);

    let mut open: Vec<&Mention> = Vec::new();
    for m in &ms {
        while open.last().is_some_and(|top| top.token_end <= m.token_start) {
            open.pop();
        }
        if let Some(top) = open.last() {
            if m.token_end > top.token_end {
                return Err(format!(
                    "mentions of {} [{}, {}) and {} [{}, {}) overlap without nesting",
                    top.entity, top.token_start, top.token_end, m.entity, m.token_start, m.token_end
                ));
            }
        }
        open.push(m);
    }

    let mut stack: Vec<(&Mention, usize)> = Vec::new();
    let mut next = 0;
    for i in 0..=sentence.len() {
        while let Some((m, inner)) = stack.last() {
            if m.token_end != i {
                break;
            }
            spans.push(MarkedSpan { entity: m.entity.clone(), start: *inner, end: out.len() });
            out.push(ENTITY_CLOSE.into());
            stack.pop();
        }
        if i == sentence.len() {
            break;
        }
        while next < ms.len() && ms[next].token_start == i {
            out.push(ENTITY_OPEN.into());
            stack.push((ms[next], out.len()));
            next += 1;
        }
        out.push(sentence[i].clone());
    }
    Ok(())
}

/// Insert entity and context markers into I* for one path.
pub fn mark_sequence(ictx: &InformativeContext, bag: &Bag, max_positions: usize) -> Result<MarkedSequence> {
    let where_ = || format!("bag {} path {}", bag.bag_id, ictx.path_id);
    let path = bag.path(&ictx.path_id).ok_or_else(|| Error::validation(where_(), "path not in bag"))?;

    let mut tokens = Vec::new();
    let mut spans = Vec::new();
    let mut context_span = None;
    if !ictx.context_tokens.is_empty() {
        tokens.push(CONTEXT_OPEN.to_string());
        tokens.extend(ictx.context_tokens.iter().cloned());
        context_span = Some((1, tokens.len()));
        tokens.push(CONTEXT_CLOSE.to_string());
    }
    for s in &ictx.selected {
        let doc = path.doc(s.role);
        let sentence = doc
            .sentences
            .get(s.sentence_index)
            .ok_or_else(|| Error::validation(where_(), format!("no sentence {}", s.sentence_index)))?;
        let mentions: Vec<&Mention> = doc.mentions_in(s.sentence_index).collect();
        mark_sentence(sentence, &mentions, &mut tokens, &mut spans).map_err(|m| Error::validation(where_(), m))?;
    }
    if tokens.len() > max_positions {
        return Err(Error::validation(
            where_(),
            format!("marked sequence has {} tokens, limit is {max_positions}", tokens.len()),
        ));
    }
    Ok(MarkedSequence { tokens, spans, context_span })
}

/// Bucket index for a token; markers own the first buckets.
pub fn token_bucket(token: &str, buckets: usize) -> usize {
    if let Some(i) = MARKERS.iter().position(|m| *m == token) {
        return i;
    }
    let mut h: u64 = 0xcbf29ce484222325;
    for b in token.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    MARKERS.len() + (h % (buckets - MARKERS.len()) as u64) as usize
}

/// Anything that maps a token sequence to one `d`-vector per token on a tape.
pub trait SequenceEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn max_positions(&self) -> usize;
    fn forward(&self, tape: &mut Tape, tokens: &[String]) -> Result<Var>;
}

/// Hashed token embedding plus learned positions, then pre-norm self-attention blocks.
#[derive(Debug, Clone)]
pub struct TransformerEncoder {
    pub config: EncoderConfig,
    pub token_table: ParamId,
    pub position_table: ParamId,
    pub blocks: Vec<TransformerBlock>,
}

impl TransformerEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let token_table = store.add("encoder.tokens", init_normal(rng, (config.vocab_hash_buckets, d), 0.1));
        let position_table = store.add("encoder.positions", init_normal(rng, (config.max_positions, d), 0.1));
        let blocks = (0..config.num_layers)
            .map(|l| TransformerBlock::new(store, rng, &format!("encoder.layer{l}"), d, config.num_heads))
            .collect();
        Ok(TransformerEncoder { config, token_table, position_table, blocks })
    }

    /// Forward pass that also reports every attention matrix.
    pub fn forward_with_attention(&self, t: &mut Tape, tokens: &[String], probs: &mut Vec<Var>) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::validation("encoder", "empty input"));
        }
        if tokens.len() > self.config.max_positions {
            return Err(Error::validation(
                "encoder",
                format!("{} tokens exceed max_positions {}", tokens.len(), self.config.max_positions),
            ));
        }
        let ids: Vec<usize> = tokens.iter().map(|tok| token_bucket(tok, self.config.vocab_hash_buckets)).collect();
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let te = t.embed(self.token_table, &ids);
        let pe = t.embed(self.position_table, &positions);
        let mut x = t.add(te, pe);
        for b in &self.blocks {
            x = b.forward(t, x, None, Some(probs));
        }
        Ok(x)
    }
}

impl SequenceEncoder for TransformerEncoder {
    fn dim(&self) -> usize {
        self.config.embed_dim
    }

    fn max_positions(&self) -> usize {
        self.config.max_positions
    }

    fn forward(&self, t: &mut Tape, tokens: &[String]) -> Result<Var> {
        self.forward_with_attention(t, tokens, &mut Vec::new())
    }
}

/// Per-path encoder output: token vectors and one pooled row per mentioned entity.
#[derive(Debug, Clone)]
pub struct EncodedPath {
    pub tokens: Var,
    pub entities: Vec<EntityId>,
    /// `entities.len() × d`, empty (`None`) when the sequence has no spans.
    pub entity_rows: Option<Var>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanEmbedding {
    pub entity: EntityId,
    pub vector: Vec<f64>,
}

/// Encode a marked sequence and mean-pool each entity: first over a span's tokens,
/// then over the entity's mentions.
pub fn encode(encoder: &dyn SequenceEncoder, t: &mut Tape, seq: &MarkedSequence) -> Result<EncodedPath> {
    let tokens = encoder.forward(t, &seq.tokens)?;
    let by_entity = seq.spans_by_entity();
    if by_entity.is_empty() {
        return Ok(EncodedPath { tokens, entities: Vec::new(), entity_rows: None });
    }
    let mut span_groups = Vec::new();
    let mut entity_groups = Vec::new();
    let mut entities = Vec::new();
    for (e, spans) in by_entity {
        let first = span_groups.len();
        for s in spans {
            let g: Vec<usize> = if s.end > s.start { (s.start..s.end).collect() } else { vec![s.start] };
            span_groups.push(g);
        }
        entity_groups.push((first..span_groups.len()).collect());
        entities.push(e.clone());
    }
    let per_span = t.mean_groups(tokens, span_groups);
    let rows = t.mean_groups(per_span, entity_groups);
    Ok(EncodedPath { tokens, entities, entity_rows: Some(rows) })
}

/// Read pooled rows off the tape as plain vectors.
pub fn span_embeddings(t: &Tape, path: &EncodedPath) -> Vec<SpanEmbedding> {
    let Some(rows) = path.entity_rows else { return Vec::new() };
    path.entities
        .iter()
        .zip(t.value(rows).axis_iter(Axis(0)))
        .map(|(e, r)| SpanEmbedding { entity: e.clone(), vector: r.to_vec() })
        .collect()
}

/// Mean of all token vectors, `1×d`.
pub fn mean_token_row(t: &mut Tape, tokens: Var) -> Var {
    let n = t.value(tokens).nrows();
    t.mean_groups(tokens, vec![(0..n).collect()])
}

/// Row-major copy of a tape value, for callers outside the tape.
pub fn to_rows(m: &Mat) -> Vec<Vec<f64>> {
    m.axis_iter(Axis(0)).map(|r| r.to_vec()).collect()
}
