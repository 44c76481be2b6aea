//! Domain-knowledge context for an entity pair: entity types (EC), the label-rendered
//! connecting KG path (CC), or both (ECC).

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{Edge, EntityId, KnowledgeGraph};

pub const DEFAULT_MAX_HOPS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextMode {
    None,
    Ec,
    Cc,
    Ecc,
}

impl ContextMode {
    pub fn uses_types(self) -> bool {
        matches!(self, ContextMode::Ec | ContextMode::Ecc)
    }

    pub fn uses_path(self) -> bool {
        matches!(self, ContextMode::Cc | ContextMode::Ecc)
    }

    pub const ALL: [ContextMode; 4] = [ContextMode::None, ContextMode::Ec, ContextMode::Cc, ContextMode::Ecc];
}

impl fmt::Display for ContextMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ContextMode::None => "none",
            ContextMode::Ec => "ec",
            ContextMode::Cc => "cc",
            ContextMode::Ecc => "ecc",
        })
    }
}

impl FromStr for ContextMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(ContextMode::None),
            "ec" => Ok(ContextMode::Ec),
            "cc" => Ok(ContextMode::Cc),
            "ecc" => Ok(ContextMode::Ecc),
            other => Err(Error::Config(format!("unknown context mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContextConfig {
    pub max_hops: usize,
    pub mode: ContextMode,
}

impl Default for ContextConfig {
    fn default() -> Self {
        ContextConfig { max_hops: DEFAULT_MAX_HOPS, mode: ContextMode::Ecc }
    }
}

impl ContextConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_hops == 0 {
            return Err(Error::Config("max_hops must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Context {
    pub pair: (EntityId, EntityId),
    pub ec_tokens: Vec<String>,
    pub cc_tokens: Vec<String>,
    pub mode: ContextMode,
}

impl Context {
    pub fn empty(source: &EntityId, target: &EntityId, mode: ContextMode) -> Self {
        Context { pair: (source.clone(), target.clone()), ec_tokens: Vec::new(), cc_tokens: Vec::new(), mode }
    }

    /// EC tokens followed by CC tokens.
    pub fn tokens(&self) -> Vec<String> {
        self.ec_tokens.iter().chain(&self.cc_tokens).cloned().collect()
    }

    pub fn is_empty(&self) -> bool {
        self.ec_tokens.is_empty() && self.cc_tokens.is_empty()
    }
}

/// Shortest path of at most `max_hops` edges from `source` to `target`.
///
/// Ties between equally short paths go to the lexicographically smallest sequence of
/// `(property, entity)` hops. `source == target` gives the empty path.
pub fn explore_path(g: &KnowledgeGraph, source: &EntityId, target: &EntityId, max_hops: usize) -> Option<Vec<Edge>> {
    if source == target {
        return Some(Vec::new());
    }
    // Hop distance to `target`, discovered backwards along predecessor edges.
    let mut dist: HashMap<&EntityId, usize> = HashMap::new();
    dist.insert(target, 0);
    let mut queue = VecDeque::from([target]);
    while let Some(node) = queue.pop_front() {
        let d = dist[node];
        if d == max_hops {
            continue;
        }
        for (_, pred) in g.predecessors(node) {
            if !dist.contains_key(pred) {
                dist.insert(pred, d + 1);
                if pred == source {
                    queue.clear();
                    break;
                }
                queue.push_back(pred);
            }
        }
    }
    let mut remaining = *dist.get(source)?;

    // Neighbor lists are sorted, so the first hop that stays on a shortest path is the
    // lexicographically smallest one.
    let mut path = Vec::with_capacity(remaining);
    let mut cur = source;
    while remaining > 0 {
        let (p, v) = g.neighbors(cur).iter().find(|(_, v)| dist.get(v) == Some(&(remaining - 1)))?;
        path.push((p.clone(), v.clone()));
        cur = v;
        remaining -= 1;
    }
    Some(path)
}

/// Types of source and target, source first; untyped entities are skipped.
pub fn explore_entity_type(g: &KnowledgeGraph, source: &EntityId, target: &EntityId) -> Vec<String> {
    [source, target].into_iter().filter_map(|e| g.get_entity_type(e).map(String::from)).collect()
}

/// `[label(p1), label(v1), ..., label(pk)]`: intermediate entities only, not the endpoints.
pub fn render_path(g: &KnowledgeGraph, path: &[Edge]) -> Vec<String> {
    let mut out = Vec::with_capacity(path.len() * 2);
    for (i, (p, v)) in path.iter().enumerate() {
        out.push(g.property_label(p).unwrap_or(p.as_str()).to_string());
        if i + 1 < path.len() {
            out.push(g.entity_label(v).unwrap_or(v.as_str()).to_string());
        }
    }
    out
}

pub fn context_generation(g: &KnowledgeGraph, source: &EntityId, target: &EntityId, cfg: &ContextConfig) -> Context {
    let mut ctx = Context::empty(source, target, cfg.mode);
    if !g.contains_entity(source) || !g.contains_entity(target) {
        return ctx;
    }
    if cfg.mode.uses_types() {
        ctx.ec_tokens = explore_entity_type(g, source, target);
    }
    if cfg.mode.uses_path() {
        if let Some(path) = explore_path(g, source, target, cfg.max_hops) {
            ctx.cc_tokens = render_path(g, &path);
        }
    }
    ctx
}

#[derive(Debug, Clone)]
struct CachedPair {
    ec: Vec<String>,
    cc: Vec<String>,
}

/// Caching front end over [`context_generation`], keyed by `(source, target, max_hops)`.
/// Safe to share between worker threads.
pub struct ContextGenerator<'g> {
    graph: &'g KnowledgeGraph,
    cache: Mutex<HashMap<(EntityId, EntityId, usize), CachedPair>>,
    unknown_entities: AtomicUsize,
}

impl<'g> ContextGenerator<'g> {
    pub fn new(graph: &'g KnowledgeGraph) -> Self {
        ContextGenerator { graph, cache: Mutex::new(HashMap::new()), unknown_entities: AtomicUsize::new(0) }
    }

    pub fn graph(&self) -> &KnowledgeGraph {
        self.graph
    }

    pub fn generate(&self, source: &EntityId, target: &EntityId, cfg: &ContextConfig) -> Context {
        let mut ctx = Context::empty(source, target, cfg.mode);
        if cfg.mode == ContextMode::None {
            return ctx;
        }
        if !self.graph.contains_entity(source) || !self.graph.contains_entity(target) {
            self.unknown_entities.fetch_add(1, Ordering::Relaxed);
            return ctx;
        }
        let key = (source.clone(), target.clone(), cfg.max_hops);
        let cached = self.cache.lock().unwrap().get(&key).cloned();
        let pair = match cached {
            Some(p) => p,
            None => {
                let full = context_generation(
                    self.graph,
                    source,
                    target,
                    &ContextConfig { max_hops: cfg.max_hops, mode: ContextMode::Ecc },
                );
                let p = CachedPair { ec: full.ec_tokens, cc: full.cc_tokens };
                self.cache.lock().unwrap().insert(key, p.clone());
                p
            }
        };
        if cfg.mode.uses_types() {
            ctx.ec_tokens = pair.ec;
        }
        if cfg.mode.uses_path() {
            ctx.cc_tokens = pair.cc;
        }
        ctx
    }

    /// Number of requests that named an entity absent from the graph.
    pub fn unknown_entity_count(&self) -> usize {
        self.unknown_entities.load(Ordering::Relaxed)
    }

    pub fn cache_len(&self) -> usize {
        self.cache.lock().unwrap().len()
    }
}
