//! Wikidata-style knowledge graph store.
//!
//! Three TSV inputs: `triples.tsv` (`subject<TAB>property<TAB>object`), `labels.tsv`
//! (`id<TAB>label`, entities and properties alike) and `types.tsv` (`entity<TAB>type`).
//! Blank lines and `#` comments are skipped in all three.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntityId(pub String);

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PropertyId(pub String);

impl EntityId {
    pub fn new(id: impl Into<String>) -> Self {
        EntityId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl PropertyId {
    pub fn new(id: impl Into<String>) -> Self {
        PropertyId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Display for PropertyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for EntityId {
    fn from(s: &str) -> Self {
        EntityId(s.to_string())
    }
}

impl From<&str> for PropertyId {
    fn from(s: &str) -> Self {
        PropertyId(s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub subject: EntityId,
    pub property: PropertyId,
    pub object: EntityId,
}

impl Triple {
    pub fn new(subject: impl Into<String>, property: impl Into<String>, object: impl Into<String>) -> Self {
        Triple {
            subject: EntityId(subject.into()),
            property: PropertyId(property.into()),
            object: EntityId(object.into()),
        }
    }
}

pub type Edge = (PropertyId, EntityId);

/// Immutable after construction; share freely across threads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeGraph {
    triples: BTreeSet<Triple>,
    undirected: bool,
    out_adjacency: BTreeMap<EntityId, Vec<Edge>>,
    /// Predecessor lists for directed graphs; empty when `undirected`.
    in_adjacency: BTreeMap<EntityId, Vec<Edge>>,
    entity_labels: BTreeMap<EntityId, String>,
    property_labels: BTreeMap<PropertyId, String>,
    entity_types: BTreeMap<EntityId, String>,
}

#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    /// Materialize a reverse edge (same property id) for every triple.
    pub undirected: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions { undirected: true }
    }
}

/// Load the graph with default options (undirected traversal).
pub fn load_kg(triples_path: &Path, labels_path: &Path, types_path: &Path) -> Result<KnowledgeGraph> {
    load_kg_with(triples_path, labels_path, types_path, LoadOptions::default())
}

pub fn load_kg_with(
    triples_path: &Path,
    labels_path: &Path,
    types_path: &Path,
    opts: LoadOptions,
) -> Result<KnowledgeGraph> {
    let triples = read_tsv(triples_path, 3)?
        .into_iter()
        .map(|f| Triple::new(f[0].clone(), f[1].clone(), f[2].clone()))
        .collect::<Vec<_>>();
    let labels = read_tsv(labels_path, 2)?.into_iter().map(|f| (f[0].clone(), f[1].clone())).collect::<Vec<_>>();
    let types =
        read_tsv(types_path, 2)?.into_iter().map(|f| (EntityId(f[0].clone()), f[1].clone())).collect::<Vec<_>>();
    KnowledgeGraph::from_parts(triples, labels, types, opts)
}

/// Load `triples.tsv`, `labels.tsv` and `types.tsv` from one directory.
pub fn load_kg_dir(dir: &Path, opts: LoadOptions) -> Result<KnowledgeGraph> {
    load_kg_with(&dir.join("triples.tsv"), &dir.join("labels.tsv"), &dir.join("types.tsv"), opts)
}

fn read_tsv(path: &Path, arity: usize) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let parse_err = |message: String| Error::Parse { file: PathBuf::from(path), line: i + 1, message };
        if fields.len() != arity {
            return Err(parse_err(format!("expected {arity} tab-separated fields, found {}", fields.len())));
        }
        if let Some(pos) = fields.iter().position(|f| f.trim().is_empty()) {
            return Err(parse_err(format!("field {} is empty", pos + 1)));
        }
        rows.push(fields.iter().map(|f| f.trim().to_string()).collect());
    }
    Ok(rows)
}

impl KnowledgeGraph {
    /// Build a graph from in-memory parts. Every id used by a triple must carry a label.
    pub fn from_parts(
        triples: impl IntoIterator<Item = Triple>,
        labels: impl IntoIterator<Item = (String, String)>,
        types: impl IntoIterator<Item = (EntityId, String)>,
        opts: LoadOptions,
    ) -> Result<Self> {
        let triples: BTreeSet<Triple> = triples.into_iter().collect();
        let labels: BTreeMap<String, String> = labels.into_iter().collect();

        let used_props: BTreeSet<&str> = triples.iter().map(|t| t.property.as_str()).collect();
        let used_entities: BTreeSet<&str> =
            triples.iter().flat_map(|t| [t.subject.as_str(), t.object.as_str()]).collect();
        let mut offenders = BTreeSet::new();
        for t in &triples {
            for id in [t.subject.as_str(), t.property.as_str(), t.object.as_str()] {
                if !labels.contains_key(id) {
                    offenders.insert(id.to_string());
                }
            }
        }
        if !offenders.is_empty() {
            return Err(Error::Integrity { offenders: offenders.into_iter().collect() });
        }

        let mut entity_labels = BTreeMap::new();
        let mut property_labels = BTreeMap::new();
        for (id, label) in labels {
            if used_props.contains(id.as_str()) {
                property_labels.insert(PropertyId(id.clone()), label.clone());
            }
            // Ids used only as properties are not entities; anything else (including
            // isolated ids) is treated as an entity.
            if used_entities.contains(id.as_str()) || !used_props.contains(id.as_str()) {
                entity_labels.insert(EntityId(id), label);
            }
        }

        let mut out_adjacency: BTreeMap<EntityId, Vec<Edge>> = BTreeMap::new();
        let mut in_adjacency: BTreeMap<EntityId, Vec<Edge>> = BTreeMap::new();
        for t in &triples {
            out_adjacency.entry(t.subject.clone()).or_default().push((t.property.clone(), t.object.clone()));
            let reverse = (t.property.clone(), t.subject.clone());
            if opts.undirected {
                out_adjacency.entry(t.object.clone()).or_default().push(reverse);
            } else {
                in_adjacency.entry(t.object.clone()).or_default().push(reverse);
            }
        }
        for list in out_adjacency.values_mut().chain(in_adjacency.values_mut()) {
            list.sort();
        }

        Ok(KnowledgeGraph {
            triples,
            undirected: opts.undirected,
            out_adjacency,
            in_adjacency,
            entity_labels,
            property_labels,
            entity_types: types.into_iter().collect(),
        })
    }

    pub fn empty() -> Self {
        Self::from_parts([], [], [], LoadOptions::default()).expect("empty graph is valid")
    }

    pub fn triples(&self) -> &BTreeSet<Triple> {
        &self.triples
    }

    pub fn is_undirected(&self) -> bool {
        self.undirected
    }

    pub fn num_entities(&self) -> usize {
        self.entity_labels.len()
    }

    /// Sorted `(property, neighbor)` list; empty for unknown or sink entities.
    pub fn neighbors(&self, e: &EntityId) -> &[Edge] {
        self.out_adjacency.get(e).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Edges that can reach `e` in one traversal step, as `(property, predecessor)`.
    pub fn predecessors(&self, e: &EntityId) -> &[Edge] {
        let map = if self.undirected { &self.out_adjacency } else { &self.in_adjacency };
        map.get(e).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn adjacency(&self) -> &BTreeMap<EntityId, Vec<Edge>> {
        &self.out_adjacency
    }

    pub fn get_entity_type(&self, e: &EntityId) -> Option<&str> {
        self.entity_types.get(e).map(String::as_str)
    }

    pub fn contains_entity(&self, e: &EntityId) -> bool {
        self.entity_labels.contains_key(e)
    }

    pub fn entity_label(&self, e: &EntityId) -> Option<&str> {
        self.entity_labels.get(e).map(String::as_str)
    }

    pub fn property_label(&self, p: &PropertyId) -> Option<&str> {
        self.property_labels.get(p).map(String::as_str)
    }

    pub fn entity_labels(&self) -> &BTreeMap<EntityId, String> {
        &self.entity_labels
    }

    pub fn property_labels(&self) -> &BTreeMap<PropertyId, String> {
        &self.property_labels
    }

    pub fn entity_types(&self) -> &BTreeMap<EntityId, String> {
        &self.entity_types
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Write the graph back out as the three TSV files.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut triples = String::new();
        for t in &self.triples {
            triples.push_str(&format!("{}\t{}\t{}\n", t.subject, t.property, t.object));
        }
        let mut labels = String::new();
        let mut all: BTreeMap<&str, &str> = BTreeMap::new();
        for (k, v) in &self.entity_labels {
            all.insert(k.as_str(), v);
        }
        for (k, v) in &self.property_labels {
            all.insert(k.as_str(), v);
        }
        for (k, v) in all {
            labels.push_str(&format!("{k}\t{v}\n"));
        }
        let mut types = String::new();
        for (k, v) in &self.entity_types {
            types.push_str(&format!("{k}\t{v}\n"));
        }
        for (name, body) in [("triples.tsv", triples), ("labels.tsv", labels), ("types.tsv", types)] {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}
