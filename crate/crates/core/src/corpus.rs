//! Documents, text paths and bags, plus JSONL ingestion.
//!
//! One bag per line of `corpus.jsonl`; relation labels one per line in `relations.txt`,
//! line order defining the class index. NA is the empty gold set.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::EntityId;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mention {
    pub entity: EntityId,
    pub sentence_index: usize,
    pub token_start: usize,
    /// Exclusive.
    pub token_end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub sentences: Vec<Vec<String>>,
    pub mentions: Vec<Mention>,
}

impl Document {
    pub fn entities(&self) -> BTreeSet<&EntityId> {
        self.mentions.iter().map(|m| &m.entity).collect()
    }

    pub fn mentions_in(&self, sentence_index: usize) -> impl Iterator<Item = &Mention> {
        self.mentions.iter().filter(move |m| m.sentence_index == sentence_index)
    }

    pub fn count_mentions(&self, e: &EntityId) -> usize {
        self.mentions.iter().filter(|m| &m.entity == e).count()
    }

    pub fn num_tokens(&self) -> usize {
        self.sentences.iter().map(Vec::len).sum()
    }

    pub fn validate(&self) -> Result<()> {
        for m in &self.mentions {
            let ok = m.token_end > m.token_start
                && self.sentences.get(m.sentence_index).is_some_and(|s| m.token_end <= s.len());
            if !ok {
                return Err(Error::validation(
                    format!("doc {}", self.doc_id),
                    format!(
                        "mention of {} at sentence {} tokens [{}, {}) is out of range",
                        m.entity, m.sentence_index, m.token_start, m.token_end
                    ),
                ));
            }
        }
        Ok(())
    }
}

/// Which document of a path a sentence comes from. Orders source before target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DocRole {
    Source,
    Target,
}

impl DocRole {
    pub fn as_str(self) -> &'static str {
        match self {
            DocRole::Source => "source",
            DocRole::Target => "target",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextPath {
    pub path_id: String,
    pub source_doc: Document,
    pub target_doc: Document,
    /// Entities mentioned in either document, minus the bag's source and target.
    #[serde(skip)]
    pub mentioned_entities: BTreeSet<EntityId>,
}

impl TextPath {
    pub fn doc(&self, role: DocRole) -> &Document {
        match role {
            DocRole::Source => &self.source_doc,
            DocRole::Target => &self.target_doc,
        }
    }

    pub fn docs(&self) -> [(DocRole, &Document); 2] {
        [(DocRole::Source, &self.source_doc), (DocRole::Target, &self.target_doc)]
    }

    pub fn sentence(&self, role: DocRole, index: usize) -> Option<&[String]> {
        self.doc(role).sentences.get(index).map(Vec::as_slice)
    }
}

pub fn derive_mentioned_entities(
    source_doc: &Document,
    target_doc: &Document,
    source: &EntityId,
    target: &EntityId,
) -> BTreeSet<EntityId> {
    source_doc
        .entities()
        .into_iter()
        .chain(target_doc.entities())
        .filter(|e| *e != source && *e != target)
        .cloned()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bag {
    pub bag_id: String,
    pub source: EntityId,
    pub target: EntityId,
    pub gold_relations: BTreeSet<String>,
    pub paths: Vec<TextPath>,
}

impl Bag {
    pub fn is_na(&self) -> bool {
        self.gold_relations.is_empty()
    }

    pub fn path(&self, path_id: &str) -> Option<&TextPath> {
        self.paths.iter().find(|p| p.path_id == path_id)
    }

    /// Fill derived fields and check every bag invariant.
    pub fn finalize(&mut self, vocab: &RelationVocabulary) -> Result<()> {
        let ctx = || format!("bag {}", self.bag_id);
        if self.paths.is_empty() {
            return Err(Error::validation(ctx(), "bag has no text paths"));
        }
        if self.source == self.target {
            return Err(Error::validation(ctx(), "source and target entities are equal"));
        }
        for label in &self.gold_relations {
            if vocab.index_of(label).is_none() {
                return Err(Error::Vocabulary { bag_id: self.bag_id.clone(), label: label.clone() });
            }
        }
        for path in &mut self.paths {
            path.source_doc.validate().and_then(|_| path.target_doc.validate()).map_err(|e| match e {
                Error::Validation { context, message } => {
                    Error::validation(format!("bag {} path {} {}", self.bag_id, path.path_id, context), message)
                }
                other => other,
            })?;
            if path.source_doc.count_mentions(&self.source) == 0 {
                return Err(Error::validation(
                    format!("bag {} path {}", self.bag_id, path.path_id),
                    format!("source doc {} never mentions {}", path.source_doc.doc_id, self.source),
                ));
            }
            if path.target_doc.count_mentions(&self.target) == 0 {
                return Err(Error::validation(
                    format!("bag {} path {}", self.bag_id, path.path_id),
                    format!("target doc {} never mentions {}", path.target_doc.doc_id, self.target),
                ));
            }
            path.mentioned_entities =
                derive_mentioned_entities(&path.source_doc, &path.target_doc, &self.source, &self.target);
        }
        Ok(())
    }

    /// All entities of the bag: source, target, then bridges sorted by id.
    pub fn all_entities(&self) -> Vec<EntityId> {
        let bridges: BTreeSet<&EntityId> = self.paths.iter().flat_map(|p| p.mentioned_entities.iter()).collect();
        let mut out = vec![self.source.clone(), self.target.clone()];
        out.extend(bridges.into_iter().cloned());
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct RelationVocabulary {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl TryFrom<Vec<String>> for RelationVocabulary {
    type Error = Error;

    fn try_from(labels: Vec<String>) -> Result<Self> {
        Self::new(labels)
    }
}

impl From<RelationVocabulary> for Vec<String> {
    fn from(v: RelationVocabulary) -> Self {
        v.labels
    }
}

impl RelationVocabulary {
    pub fn new(labels: Vec<String>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, l) in labels.iter().enumerate() {
            if l.eq_ignore_ascii_case("NA") {
                return Err(Error::validation("relation vocabulary", "NA must not be a declared label"));
            }
            if index.insert(l.clone(), i).is_some() {
                return Err(Error::validation("relation vocabulary", format!("duplicate label {l:?}")));
            }
        }
        Ok(RelationVocabulary { labels, index })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn label(&self, i: usize) -> &str {
        &self.labels[i]
    }

    /// Indicator vector of `labels` over the vocabulary.
    pub fn indicator(&self, labels: &BTreeSet<String>) -> Vec<bool> {
        let mut v = vec![false; self.len()];
        for l in labels {
            if let Some(i) = self.index_of(l) {
                v[i] = true;
            }
        }
        v
    }

    pub fn to_text(&self) -> String {
        self.labels.iter().map(|l| format!("{l}\n")).collect()
    }
}

pub fn load_corpus(corpus_path: &Path, vocab_path: &Path) -> Result<(Vec<Bag>, RelationVocabulary)> {
    let vocab = RelationVocabulary::load(vocab_path)?;
    let bags = load_bags(corpus_path, &vocab)?;
    Ok((bags, vocab))
}

pub fn load_bags(corpus_path: &Path, vocab: &RelationVocabulary) -> Result<Vec<Bag>> {
    let text = fs::read_to_string(corpus_path).map_err(|e| Error::io(corpus_path, e))?;
    parse_bags(&text, vocab).map_err(|e| match e {
        Error::Json(je) => Error::Parse { file: corpus_path.to_path_buf(), line: je.line(), message: je.to_string() },
        other => other,
    })
}

pub fn parse_bags(jsonl: &str, vocab: &RelationVocabulary) -> Result<Vec<Bag>> {
    let mut bags = Vec::new();
    let mut docs: BTreeMap<String, Document> = BTreeMap::new();
    for (lineno, line) in jsonl.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut bag: Bag = serde_json::from_str(line).map_err(|e| Error::Parse {
            file: "<corpus>".into(),
            line: lineno + 1,
            message: e.to_string(),
        })?;
        bag.finalize(vocab)?;
        for path in &bag.paths {
            for (_, doc) in path.docs() {
                match docs.get(&doc.doc_id) {
                    Some(prev) if prev != doc => {
                        return Err(Error::validation(
                            format!("bag {}", bag.bag_id),
                            format!("doc_id {} reused with different content", doc.doc_id),
                        ))
                    }
                    Some(_) => {}
                    None => {
                        docs.insert(doc.doc_id.clone(), doc.clone());
                    }
                }
            }
        }
        bags.push(bag);
    }
    Ok(bags)
}

pub fn to_jsonl(bags: &[Bag]) -> Result<String> {
    let mut out = String::new();
    for b in bags {
        out.push_str(&serde_json::to_string(b)?);
        out.push('\n');
    }
    Ok(out)
}

/// Every distinct document of a bag list, keyed by id.
pub fn collect_documents(bags: &[Bag]) -> BTreeMap<String, Document> {
    let mut docs = BTreeMap::new();
    for b in bags {
        for p in &b.paths {
            for (_, d) in p.docs() {
                docs.entry(d.doc_id.clone()).or_insert_with(|| d.clone());
            }
        }
    }
    docs
}
