//! Random graphs, bags and document pools.

use std::collections::BTreeSet;

use rand::seq::IndexedRandom;
use rand::Rng;
use xdocre::corpus::{Bag, Document, Mention, RelationVocabulary, TextPath};
use xdocre::kg::{EntityId, Triple};

pub const WORDS: [&str; 24] = [
    "alpha", "beta", "gamma", "delta", "echo", "fox", "golf", "hotel", "india", "juliet", "kilo", "lima", "mike",
    "nova", "oscar", "papa", "quebec", "romeo", "sierra", "tango", "umbra", "victor", "whisky", "yankee",
];

pub fn random_triples(rng: &mut impl Rng, nodes: usize, edges: usize, properties: usize) -> Vec<Triple> {
    (0..edges)
        .map(|_| Triple {
            subject: EntityId(format!("Q{}", rng.random_range(0..nodes))),
            property: xdocre::kg::PropertyId(format!("P{}", rng.random_range(0..properties))),
            object: EntityId(format!("Q{}", rng.random_range(0..nodes))),
        })
        .collect()
}

/// A sentence of random words where each token may instead be a one-token entity mention.
fn sentence(rng: &mut impl Rng, pool: &[EntityId], mention_rate: f64, index: usize) -> (Vec<String>, Vec<Mention>) {
    let len = rng.random_range(3..=10);
    let mut tokens = Vec::with_capacity(len);
    let mut mentions = Vec::new();
    for i in 0..len {
        if rng.random_bool(mention_rate) {
            let e = pool.choose(rng).unwrap().clone();
            tokens.push(format!("name{}", e.as_str()));
            mentions.push(Mention { entity: e, sentence_index: index, token_start: i, token_end: i + 1 });
        } else {
            tokens.push(WORDS.choose(rng).unwrap().to_string());
        }
    }
    (tokens, mentions)
}

/// Random document that mentions `anchor` at least once.
pub fn document(rng: &mut impl Rng, id: String, sentences: usize, pool: &[EntityId], anchor: &EntityId) -> Document {
    let mut doc = Document { doc_id: id, sentences: Vec::new(), mentions: Vec::new() };
    for i in 0..sentences {
        let (t, m) = sentence(rng, pool, 0.25, i);
        doc.sentences.push(t);
        doc.mentions.extend(m);
    }
    if doc.count_mentions(anchor) == 0 {
        let s = rng.random_range(0..sentences);
        let pos = rng.random_range(0..doc.sentences[s].len());
        doc.mentions.retain(|m| !(m.sentence_index == s && m.token_start == pos));
        doc.sentences[s][pos] = format!("name{}", anchor.as_str());
        doc.mentions.push(Mention { entity: anchor.clone(), sentence_index: s, token_start: pos, token_end: pos + 1 });
    }
    doc.mentions.sort_by_key(|m| (m.sentence_index, m.token_start));
    doc
}

pub fn vocab() -> RelationVocabulary {
    RelationVocabulary::new(vec!["R1".into(), "R2".into(), "R3".into()]).unwrap()
}

/// Random finalized bag with at most `max_sentences` sentences over all documents.
pub fn random_bag(rng: &mut impl Rng, id: usize, max_sentences: usize) -> Bag {
    let source = EntityId::new("S");
    let target = EntityId::new("T");
    let bridges: Vec<EntityId> = (0..rng.random_range(1..=8)).map(|i| EntityId(format!("B{i}"))).collect();
    let mut pool = bridges.clone();
    pool.extend([source.clone(), target.clone()]);
    let num_paths = rng.random_range(1..=4);
    let per_doc = (max_sentences / (2 * num_paths)).max(1);
    let paths = (0..num_paths)
        .map(|p| {
            let (ns, nt) = (rng.random_range(1..=per_doc), rng.random_range(1..=per_doc));
            TextPath {
                path_id: format!("b{id}-p{p}"),
                source_doc: document(rng, format!("b{id}-d{}", 2 * p), ns, &pool, &source),
                target_doc: document(rng, format!("b{id}-d{}", 2 * p + 1), nt, &pool, &target),
                mentioned_entities: BTreeSet::new(),
            }
        })
        .collect();
    let labels = ["R1", "R2", "R3"];
    let gold = labels.iter().filter(|_| rng.random_bool(0.3)).map(|s| s.to_string()).collect();
    let mut bag = Bag { bag_id: format!("b{id}"), source, target, gold_relations: gold, paths };
    bag.finalize(&vocab()).unwrap();
    bag
}
