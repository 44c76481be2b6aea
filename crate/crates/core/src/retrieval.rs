//! Open-setting evidence paths: candidate (source doc, target doc) pairs ranked by entity
//! count, shared entities and TF-IDF similarity.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{derive_mentioned_entities, Bag, Document, TextPath};
use crate::error::{Error, Result};
use crate::kg::EntityId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreWeights {
    pub entity_count: f64,
    pub shared_entities: f64,
    pub tfidf: f64,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        ScoreWeights { entity_count: 1.0, shared_entities: 1.0, tfidf: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub top_k: usize,
    pub weights: ScoreWeights,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig { top_k: 16, weights: ScoreWeights::default() }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::Config("retrieval top_k must be at least 1".into()));
        }
        let w = self.weights;
        if [w.entity_count, w.shared_entities, w.tfidf].iter().any(|x| x.is_nan() || *x < 0.0) {
            return Err(Error::Config("retrieval weights must be non-negative".into()));
        }
        Ok(())
    }
}

pub type SparseVector = BTreeMap<String, f64>;

/// Documents by id with L2-normalized TF·IDF vectors over lowercased tokens.
#[derive(Debug, Clone, Default)]
pub struct DocumentIndex {
    pub docs: BTreeMap<String, Document>,
    pub idf: BTreeMap<String, f64>,
    pub vectors: BTreeMap<String, SparseVector>,
    /// Entity → ids of documents that mention it.
    pub postings: BTreeMap<EntityId, BTreeSet<String>>,
}

pub fn build_index(docs: impl IntoIterator<Item = Document>) -> DocumentIndex {
    let mut index = DocumentIndex::default();
    for d in docs {
        index.docs.entry(d.doc_id.clone()).or_insert(d);
    }
    let n = index.docs.len() as f64;
    let mut tfs = BTreeMap::new();
    let mut df: BTreeMap<String, usize> = BTreeMap::new();
    for (id, d) in &index.docs {
        let mut tf: SparseVector = BTreeMap::new();
        for tok in d.sentences.iter().flatten() {
            *tf.entry(tok.to_lowercase()).or_insert(0.0) += 1.0;
        }
        for t in tf.keys() {
            *df.entry(t.clone()).or_default() += 1;
        }
        tfs.insert(id.clone(), tf);
        for e in d.entities() {
            index.postings.entry(e.clone()).or_default().insert(id.clone());
        }
    }
    index.idf = df.into_iter().map(|(t, c)| (t, (n / c as f64).ln())).collect();
    for (id, tf) in tfs {
        let mut v: SparseVector = tf
            .into_iter()
            .map(|(t, c)| {
                let w = c * index.idf[&t];
                (t, w)
            })
            .collect();
        let norm = v.values().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.values_mut().for_each(|x| *x /= norm);
        }
        v.retain(|_, x| *x != 0.0);
        index.vectors.insert(id, v);
    }
    index
}

impl DocumentIndex {
    /// Cosine of the normalized vectors; 0 when either is zero.
    pub fn similarity(&self, a: &str, b: &str) -> f64 {
        let (Some(va), Some(vb)) = (self.vectors.get(a), self.vectors.get(b)) else { return 0.0 };
        let (small, large) = if va.len() <= vb.len() { (va, vb) } else { (vb, va) };
        small.iter().filter_map(|(t, x)| large.get(t).map(|y| x * y)).fold(0.0, |acc, v| acc + v)
    }

    pub fn docs_mentioning(&self, e: &EntityId) -> impl Iterator<Item = &Document> {
        self.postings.get(e).into_iter().flatten().map(|id| &self.docs[id])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathScore {
    pub source_doc: String,
    pub target_doc: String,
    pub entity_count: usize,
    pub shared_entities: usize,
    pub tfidf_sim: f64,
    pub combined: f64,
}

fn min_max(xs: &[f64]) -> Vec<f64> {
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    xs.iter().map(|x| if hi > lo { (x - lo) / (hi - lo) } else { 0.0 }).collect()
}

/// Every candidate pair, scored and sorted (combined descending, then ids).
pub fn rank_paths(
    index: &DocumentIndex,
    source: &EntityId,
    target: &EntityId,
    cfg: &RetrievalConfig,
) -> Vec<PathScore> {
    let mut cands = Vec::new();
    for sd in index.docs_mentioning(source) {
        let s_ents = sd.entities();
        for td in index.docs_mentioning(target) {
            if sd.doc_id == td.doc_id {
                continue;
            }
            let shared = s_ents.intersection(&td.entities()).count();
            if shared == 0 {
                continue;
            }
            cands.push(PathScore {
                source_doc: sd.doc_id.clone(),
                target_doc: td.doc_id.clone(),
                entity_count: sd.count_mentions(source) + td.count_mentions(target),
                shared_entities: shared,
                tfidf_sim: index.similarity(&sd.doc_id, &td.doc_id),
                combined: 0.0,
            });
        }
    }
    let w = cfg.weights;
    let count = min_max(&cands.iter().map(|c| c.entity_count as f64).collect::<Vec<_>>());
    let shared = min_max(&cands.iter().map(|c| c.shared_entities as f64).collect::<Vec<_>>());
    let sim = min_max(&cands.iter().map(|c| c.tfidf_sim).collect::<Vec<_>>());
    for (i, c) in cands.iter_mut().enumerate() {
        c.combined = w.entity_count * count[i] + w.shared_entities * shared[i] + w.tfidf * sim[i];
    }
    cands.sort_by(|a, b| {
        b.combined
            .total_cmp(&a.combined)
            .then_with(|| a.source_doc.cmp(&b.source_doc))
            .then_with(|| a.target_doc.cmp(&b.target_doc))
    });
    cands
}

pub fn retrieve_paths(
    index: &DocumentIndex,
    source: &EntityId,
    target: &EntityId,
    cfg: &RetrievalConfig,
) -> Vec<PathScore> {
    let mut ranked = rank_paths(index, source, target, cfg);
    if ranked.is_empty() {
        log::warn!("no candidate document pair links {source} and {target}");
    }
    ranked.truncate(cfg.top_k);
    ranked
}

/// Replace a bag's paths with retrieved ones. `None` when nothing links the pair.
pub fn open_bag(bag: &Bag, index: &DocumentIndex, cfg: &RetrievalConfig) -> Option<Bag> {
    let found = retrieve_paths(index, &bag.source, &bag.target, cfg);
    if found.is_empty() {
        return None;
    }
    let paths = found
        .iter()
        .map(|p| {
            let (s, t) = (index.docs[&p.source_doc].clone(), index.docs[&p.target_doc].clone());
            TextPath {
                path_id: format!("{}:{}", p.source_doc, p.target_doc),
                mentioned_entities: derive_mentioned_entities(&s, &t, &bag.source, &bag.target),
                source_doc: s,
                target_doc: t,
            }
        })
        .collect();
    Some(Bag { paths, ..bag.clone() })
}
