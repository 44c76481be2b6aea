//! Extractive explanations: the exact informative context a prediction was made from,
//! with entity and context spans tagged by role.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::classifier::BagScores;
use crate::corpus::{Bag, DocRole, Mention};
use crate::error::{Error, Result};
use crate::filters::InformativeContext;
use crate::kg::EntityId;
use crate::model::digest_informative;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Source,
    Target,
    Bridge,
    Context,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Source => "source",
            Role::Target => "target",
            Role::Bridge => "bridge",
            Role::Context => "context",
        }
    }
}

/// Token range `[start, end)` within its sentence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaggedSpan {
    pub role: Role,
    pub entity: EntityId,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainedSentence {
    pub path_id: String,
    pub doc_id: String,
    pub doc_role: DocRole,
    pub sentence_index: usize,
    pub tokens: Vec<String>,
    pub spans: Vec<TaggedSpan>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub bag_id: String,
    pub source: EntityId,
    pub target: EntityId,
    /// Empty means NA.
    pub predicted: Vec<String>,
    pub context_block: Vec<String>,
    pub sentences: Vec<ExplainedSentence>,
}

fn role_of(bag: &Bag, e: &EntityId) -> Role {
    if *e == bag.source {
        Role::Source
    } else if *e == bag.target {
        Role::Target
    } else {
        Role::Bridge
    }
}

/// Build the explanation. `scores` must have been computed from exactly `informative`.
pub fn explain(bag: &Bag, informative: &[InformativeContext], scores: &BagScores) -> Result<Explanation> {
    let digest = digest_informative(informative);
    if digest != scores.input_digest || scores.bag_id != bag.bag_id {
        return Err(Error::Provenance(format!(
            "scores for bag {} were not computed from this informative context",
            bag.bag_id
        )));
    }
    let mut sentences = Vec::new();
    for ictx in informative {
        let path = bag
            .path(&ictx.path_id)
            .ok_or_else(|| Error::Provenance(format!("path {} is not in bag {}", ictx.path_id, bag.bag_id)))?;
        for s in &ictx.selected {
            let doc = path.doc(s.role);
            let tokens = doc
                .sentences
                .get(s.sentence_index)
                .ok_or_else(|| Error::Provenance(format!("doc {} has no sentence {}", doc.doc_id, s.sentence_index)))?
                .clone();
            let mut mentions: Vec<&Mention> = doc.mentions_in(s.sentence_index).collect();
            mentions.sort_by(|a, b| {
                a.token_start.cmp(&b.token_start).then(b.token_end.cmp(&a.token_end)).then(a.entity.cmp(&b.entity))
            });
            mentions.dedup();
            let spans = mentions
                .into_iter()
                .map(|m| TaggedSpan {
                    role: role_of(bag, &m.entity),
                    entity: m.entity.clone(),
                    start: m.token_start,
                    end: m.token_end,
                })
                .collect();
            sentences.push(ExplainedSentence {
                path_id: ictx.path_id.clone(),
                doc_id: doc.doc_id.clone(),
                doc_role: s.role,
                sentence_index: s.sentence_index,
                tokens,
                spans,
            });
        }
    }
    Ok(Explanation {
        bag_id: bag.bag_id.clone(),
        source: bag.source.clone(),
        target: bag.target.clone(),
        predicted: scores.predicted.iter().cloned().collect(),
        context_block: informative.first().map(|i| i.context_tokens.clone()).unwrap_or_default(),
        sentences,
    })
}

/// Tokens with `[role: …]` brackets around spans; spans nest outer-first.
fn render_tagged(tokens: &[String], spans: &[TaggedSpan]) -> String {
    let mut out: Vec<String> = Vec::new();
    let mut open: Vec<usize> = Vec::new();
    let mut next = 0;
    for i in 0..=tokens.len() {
        while open.last().is_some_and(|&k| spans[k].end == i) {
            open.pop();
            if let Some(last) = out.last_mut() {
                last.push(']');
            }
        }
        if i == tokens.len() {
            break;
        }
        let mut prefix = String::new();
        while next < spans.len() && spans[next].start == i {
            write!(prefix, "[{}: ", spans[next].role.as_str()).expect("string write");
            open.push(next);
            next += 1;
        }
        out.push(prefix + &tokens[i]);
    }
    out.join(" ")
}

impl Explanation {
    pub fn is_na(&self) -> bool {
        self.predicted.is_empty()
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let prediction = if self.is_na() { "NA".to_string() } else { self.predicted.join(", ") };
        writeln!(s, "# Bag {}", self.bag_id).unwrap();
        writeln!(s).unwrap();
        writeln!(s, "- source: `{}`", self.source).unwrap();
        writeln!(s, "- target: `{}`", self.target).unwrap();
        writeln!(s, "- prediction: {prediction}").unwrap();
        if !self.context_block.is_empty() {
            writeln!(s).unwrap();
            writeln!(s, "## Context").unwrap();
            writeln!(s).unwrap();
            writeln!(s, "[context: {}]", self.context_block.join(" | ")).unwrap();
        }
        let mut current: Option<&str> = None;
        for sent in &self.sentences {
            if current != Some(sent.path_id.as_str()) {
                writeln!(s).unwrap();
                writeln!(s, "## Path {}", sent.path_id).unwrap();
                writeln!(s).unwrap();
                current = Some(&sent.path_id);
            }
            writeln!(
                s,
                "- {} {} #{}: {}",
                sent.doc_role.as_str(),
                sent.doc_id,
                sent.sentence_index,
                render_tagged(&sent.tokens, &sent.spans)
            )
            .unwrap();
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Every token the explanation shows: context block then sentence tokens.
    pub fn tokens(&self) -> Vec<String> {
        self.context_block.iter().chain(self.sentences.iter().flat_map(|s| &s.tokens)).cloned().collect()
    }
}
