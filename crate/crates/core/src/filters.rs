//! Entity-based sentence filter followed by the relevance-based filter.
//!
//! Per text path, every bridge entity gets `score = λ·S1 + η·S2 + κ·S3`; a sentence's
//! importance is the sum of the scores of the bridges it mentions, and the top K
//! sentences form the candidate set. The relevance filter then ranks candidates by their
//! best term-frequency cosine against sentences that mention the target entity and packs
//! them, after the context tokens, into the encoder's token budget.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::context::Context;
use crate::corpus::{Bag, DocRole, TextPath};
use crate::error::{Error, Result};
use crate::kg::EntityId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub lambda: f64,
    pub eta: f64,
    pub kappa: f64,
    pub top_k: usize,
    /// Cap on sentences kept by the relevance filter; `None` lets the token budget decide.
    pub relevance_keep: Option<usize>,
    pub token_budget: usize,
    /// Θ1 requires the source *and* the target in the sentence instead of either.
    pub theta1_requires_both: bool,
    pub entity_filter: bool,
    pub relevance_filter: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            lambda: 0.1,
            eta: 0.01,
            kappa: 0.001,
            top_k: 16,
            relevance_keep: None,
            token_budget: 512,
            theta1_requires_both: false,
            entity_filter: true,
            relevance_filter: true,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || self.eta < 0.0 || self.kappa < 0.0 {
            return Err(Error::Config("filter weights must be non-negative".into()));
        }
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        if self.token_budget < 16 {
            return Err(Error::Config("token_budget must be at least 16".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MentionScore {
    pub entity: EntityId,
    pub s1: u32,
    pub s2: u32,
    pub s3: u32,
    pub total: f64,
}

/// Bridge-entity scores of one text path.
pub type PathScores = BTreeMap<EntityId, MentionScore>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceCandidate {
    pub role: DocRole,
    pub sentence_index: usize,
    pub importance: f64,
}

/// Top-K sentences of one path, importance descending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub path_id: String,
    pub sentences: Vec<SentenceCandidate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedSentence {
    pub role: DocRole,
    pub sentence_index: usize,
    pub importance: f64,
    pub relevance: f64,
}

/// I* for one text path: the exact token data handed to the encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InformativeContext {
    pub path_id: String,
    pub context_tokens: Vec<String>,
    /// Document order: source doc first, then by sentence index.
    pub selected: Vec<SelectedSentence>,
    pub flattened_tokens: Vec<String>,
}

/// Entities mentioned in each sentence of a document.
fn sentence_entities(path: &TextPath, role: DocRole) -> Vec<BTreeSet<&EntityId>> {
    let doc = path.doc(role);
    let mut out = vec![BTreeSet::new(); doc.sentences.len()];
    for m in &doc.mentions {
        out[m.sentence_index].insert(&m.entity);
    }
    out
}

fn path_sentence_entities(path: &TextPath) -> Vec<BTreeSet<&EntityId>> {
    let mut all = sentence_entities(path, DocRole::Source);
    all.extend(sentence_entities(path, DocRole::Target));
    all
}

pub fn score_mentions(bag: &Bag, cfg: &FilterConfig) -> Vec<PathScores> {
    let mut path_count: HashMap<&EntityId, u32> = HashMap::new();
    for p in &bag.paths {
        for e in &p.mentioned_entities {
            *path_count.entry(e).or_default() += 1;
        }
    }

    bag.paths
        .iter()
        .map(|path| {
            let sentences = path_sentence_entities(path);
            let theta1 = |e: &EntityId| {
                sentences.iter().any(|s| {
                    s.contains(e) && {
                        let (hs, ho) = (s.contains(&bag.source), s.contains(&bag.target));
                        if cfg.theta1_requires_both {
                            hs && ho
                        } else {
                            hs || ho
                        }
                    }
                })
            };
            let direct: BTreeMap<&EntityId, bool> = path.mentioned_entities.iter().map(|e| (e, theta1(e))).collect();

            path.mentioned_entities
                .iter()
                .map(|em| {
                    let s1 = u32::from(direct[em]);
                    let s2 = path
                        .mentioned_entities
                        .iter()
                        .filter(|eo| *eo != em && direct[eo])
                        .filter(|eo| sentences.iter().any(|s| s.contains(eo) && s.contains(em)))
                        .count() as u32;
                    let s3 = path_count.get(em).copied().unwrap_or(0);
                    let total = cfg.lambda * f64::from(s1) + cfg.eta * f64::from(s2) + cfg.kappa * f64::from(s3);
                    (em.clone(), MentionScore { entity: em.clone(), s1, s2, s3, total })
                })
                .collect()
        })
        .collect()
}

fn importance_order(a: &SentenceCandidate, b: &SentenceCandidate) -> Ordering {
    b.importance.total_cmp(&a.importance).then(a.role.cmp(&b.role)).then(a.sentence_index.cmp(&b.sentence_index))
}

/// Imp^s for every sentence of a path, in document order.
pub fn sentence_importances(
    bag: &Bag,
    path_index: usize,
    scores: &PathScores,
    cfg: &FilterConfig,
) -> Vec<SentenceCandidate> {
    let path = &bag.paths[path_index];
    let mut out = Vec::new();
    for (role, doc) in path.docs() {
        let ents = sentence_entities(path, role);
        for (idx, _) in doc.sentences.iter().enumerate() {
            let importance = if cfg.entity_filter {
                ents[idx].iter().filter_map(|e| scores.get(*e)).fold(0.0, |acc, s| acc + s.total)
            } else {
                0.0
            };
            out.push(SentenceCandidate { role, sentence_index: idx, importance });
        }
    }
    out
}

/// Per-path candidate sets; `scores` must come from [`score_mentions`] on the same bag.
pub fn rank_sentences(bag: &Bag, scores: &[PathScores], cfg: &FilterConfig) -> Vec<CandidateSet> {
    bag.paths
        .iter()
        .enumerate()
        .map(|(i, path)| {
            let mut all = sentence_importances(bag, i, &scores[i], cfg);
            all.sort_by(importance_order);
            all.truncate(cfg.top_k);
            CandidateSet { path_id: path.path_id.clone(), sentences: all }
        })
        .collect()
}

pub fn term_frequencies(tokens: &[String]) -> BTreeMap<String, f64> {
    let mut tf = BTreeMap::new();
    for t in tokens {
        *tf.entry(t.to_lowercase()).or_insert(0.0) += 1.0;
    }
    tf
}

pub fn cosine(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> f64 {
    let dot = a.iter().filter_map(|(k, x)| b.get(k).map(|y| x * y)).fold(0.0, |acc, v| acc + v);
    let na = a.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Tokens a sentence occupies once its mentions are wrapped in markers.
pub fn marked_cost(path: &TextPath, role: DocRole, idx: usize) -> usize {
    let doc = path.doc(role);
    doc.sentences[idx].len() + 2 * doc.mentions_in(idx).count()
}

pub fn context_cost(tokens: &[String]) -> usize {
    if tokens.is_empty() {
        0
    } else {
        tokens.len() + 2
    }
}

pub fn relevance_filter(
    cands: &CandidateSet,
    context: &Context,
    bag: &Bag,
    cfg: &FilterConfig,
) -> Result<InformativeContext> {
    let path = bag
        .path(&cands.path_id)
        .ok_or_else(|| Error::validation(format!("bag {}", bag.bag_id), format!("unknown path {}", cands.path_id)))?;
    let mut context_tokens = context.tokens();
    let mut used = context_cost(&context_tokens);
    if used > cfg.token_budget {
        return Err(Error::validation(
            format!("bag {} path {}", bag.bag_id, path.path_id),
            format!("context needs {used} tokens, budget is {}", cfg.token_budget),
        ));
    }

    let target_vectors: Vec<BTreeMap<String, f64>> = path
        .docs()
        .into_iter()
        .flat_map(|(_, doc)| {
            doc.sentences
                .iter()
                .enumerate()
                .filter(|(i, _)| doc.mentions_in(*i).any(|m| m.entity == bag.target))
                .map(|(_, s)| term_frequencies(s))
        })
        .collect();

    let mut scored: Vec<SelectedSentence> = cands
        .sentences
        .iter()
        .map(|c| {
            let relevance = if cfg.relevance_filter {
                let tf = term_frequencies(path.sentence(c.role, c.sentence_index).unwrap_or(&[]));
                target_vectors.iter().map(|t| cosine(&tf, t)).fold(0.0, f64::max)
            } else {
                0.0
            };
            SelectedSentence { role: c.role, sentence_index: c.sentence_index, importance: c.importance, relevance }
        })
        .collect();

    if cfg.relevance_filter {
        scored.sort_by(|a, b| {
            b.relevance
                .total_cmp(&a.relevance)
                .then(b.importance.total_cmp(&a.importance))
                .then(a.role.cmp(&b.role))
                .then(a.sentence_index.cmp(&b.sentence_index))
        });
    } else {
        scored.sort_by_key(|s| (s.role, s.sentence_index));
    }

    let cap = cfg.relevance_keep.unwrap_or(usize::MAX);
    let mut selected = Vec::new();
    for s in scored {
        if selected.len() >= cap {
            break;
        }
        let cost = marked_cost(path, s.role, s.sentence_index);
        if used + cost <= cfg.token_budget {
            used += cost;
            selected.push(s);
        }
    }
    selected.sort_by_key(|s| (s.role, s.sentence_index));

    let mut flattened_tokens = std::mem::take(&mut context_tokens);
    let context_tokens = flattened_tokens.clone();
    for s in &selected {
        flattened_tokens.extend(path.sentence(s.role, s.sentence_index).unwrap_or(&[]).iter().cloned());
    }
    Ok(InformativeContext { path_id: path.path_id.clone(), context_tokens, selected, flattened_tokens })
}

/// Both filters for every path of a bag.
pub fn filter_bag(bag: &Bag, context: &Context, cfg: &FilterConfig) -> Result<Vec<InformativeContext>> {
    let scores = score_mentions(bag, cfg);
    rank_sentences(bag, &scores, cfg).iter().map(|c| relevance_filter(c, context, bag, cfg)).collect()
}

/// CSV dump of mention scores, then a blank line, then the ranked sentence table.
pub fn write_filter_report<W: Write>(
    out: W,
    bag: &Bag,
    scores: &[PathScores],
    cands: &[CandidateSet],
    ictx: &[InformativeContext],
) -> Result<()> {
    let mut out = out;
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(["path_id", "entity", "s1", "s2", "s3", "total"])?;
        for (path, ps) in bag.paths.iter().zip(scores) {
            for s in ps.values() {
                w.write_record([
                    path.path_id.as_str(),
                    s.entity.as_str(),
                    &s.s1.to_string(),
                    &s.s2.to_string(),
                    &s.s3.to_string(),
                    &s.total.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
    }
    writeln!(out).map_err(|e| Error::io("<csv>", e))?;
    let mut w = csv::Writer::from_writer(&mut out);
    w.write_record(["path_id", "rank", "role", "sentence_index", "importance", "relevance", "kept"])?;
    for (c, ic) in cands.iter().zip(ictx) {
        for (rank, s) in c.sentences.iter().enumerate() {
            let kept = ic.selected.iter().find(|k| k.role == s.role && k.sentence_index == s.sentence_index);
            w.write_record([
                c.path_id.as_str(),
                &(rank + 1).to_string(),
                s.role.as_str(),
                &s.sentence_index.to_string(),
                &s.importance.to_string(),
                &kept.map(|k| k.relevance.to_string()).unwrap_or_default(),
                if kept.is_some() { "1" } else { "0" },
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}
