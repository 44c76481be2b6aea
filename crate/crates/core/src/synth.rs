//! Synthetic corpus and knowledge graph with planted relation signals.
//!
//! Each positive bag carries one relation. It can surface in the text, as cue words
//! between an endpoint and a bridge entity, and in the graph, as a two-hop path
//! `source -[hint property of r]-> intermediate -[link]-> target`. NA bags get neutral
//! cues and a neutral path or none. Distractor sentences mention decoy entities and
//! may carry cue words of random relations.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{derive_mentioned_entities, to_jsonl, Bag, Document, Mention, RelationVocabulary, TextPath};
use crate::error::{Error, Result};
use crate::kg::{EntityId, KnowledgeGraph, LoadOptions, PropertyId, Triple};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_bags: usize,
    pub num_relations: usize,
    /// Share of bags labelled NA.
    pub na_fraction: f64,
    pub dev_fraction: f64,
    pub min_paths: usize,
    pub max_paths: usize,
    /// Probability that a positive path carries its relation's cue words.
    pub text_signal: f64,
    /// Probability that a positive bag gets its relation's hint path in the graph.
    pub context_signal: f64,
    /// Probability that an NA bag gets a neutral path in the graph.
    pub na_path_rate: f64,
    pub distractors_per_doc: usize,
    /// Probability that a distractor sentence carries a random relation's cue word.
    pub misleading_cue_rate: f64,
    /// Put distractors before the informative sentences instead of at random positions.
    pub distractors_first: bool,
    pub filler_vocab: usize,
    pub min_sentence_len: usize,
    pub max_sentence_len: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_bags: 50,
            num_relations: 5,
            na_fraction: 0.2,
            dev_fraction: 0.0,
            min_paths: 1,
            max_paths: 3,
            text_signal: 1.0,
            context_signal: 1.0,
            na_path_rate: 0.5,
            distractors_per_doc: 1,
            misleading_cue_rate: 0.0,
            distractors_first: false,
            filler_vocab: 200,
            min_sentence_len: 5,
            max_sentence_len: 9,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")))
            }
        };
        prob("na_fraction", self.na_fraction)?;
        prob("dev_fraction", self.dev_fraction)?;
        prob("text_signal", self.text_signal)?;
        prob("context_signal", self.context_signal)?;
        prob("na_path_rate", self.na_path_rate)?;
        prob("misleading_cue_rate", self.misleading_cue_rate)?;
        if self.num_bags == 0 {
            return Err(Error::Config("num_bags must be at least 1".into()));
        }
        if self.num_relations == 0 && self.na_fraction < 1.0 {
            return Err(Error::Config("positive bags need at least one relation".into()));
        }
        if self.min_paths == 0 || self.max_paths < self.min_paths {
            return Err(Error::Config("need 1 <= min_paths <= max_paths".into()));
        }
        if self.min_sentence_len < 3 || self.max_sentence_len < self.min_sentence_len {
            return Err(Error::Config("need 3 <= min_sentence_len <= max_sentence_len".into()));
        }
        if self.filler_vocab < 10 {
            return Err(Error::Config("filler_vocab must be at least 10".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestBag {
    pub bag_id: String,
    pub split: Split,
    pub gold_relations: Vec<String>,
    pub paths: usize,
    pub text_signal_paths: usize,
    pub context_path: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config: SynthConfig,
    pub relations: Vec<String>,
    /// Cue words of each relation, aligned with `relations`: (source-doc cue, target-doc cue).
    pub cues: Vec<[String; 2]>,
    pub positive_bags: usize,
    pub na_bags: usize,
    pub train_bags: usize,
    pub dev_bags: usize,
    pub bags: Vec<ManifestBag>,
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub relations: RelationVocabulary,
    pub train: Vec<Bag>,
    pub dev: Vec<Bag>,
    pub graph: KnowledgeGraph,
    pub manifest: Manifest,
}

impl SynthCorpus {
    /// `train.jsonl`, `dev.jsonl`, `relations.txt`, the graph TSVs and `manifest.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = [
            ("train.jsonl", to_jsonl(&self.train)?),
            ("dev.jsonl", to_jsonl(&self.dev)?),
            ("relations.txt", self.relations.to_text()),
            ("manifest.json", serde_json::to_string_pretty(&self.manifest)? + "\n"),
        ];
        for (name, body) in files {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        self.graph.write_dir(dir)
    }

    pub fn all_bags(&self) -> impl Iterator<Item = &Bag> {
        self.train.iter().chain(&self.dev)
    }
}

const ONSETS: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
const TYPES: [&str; 5] = ["Person", "ORG", "GeoPoliticalEntity", "Location", "Work"];

/// Draws pronounceable words that never repeat.
struct Words {
    used: BTreeSet<String>,
}

impl Words {
    fn fresh<R: Rng>(&mut self, rng: &mut R, syllables: usize) -> String {
        loop {
            let w: String = (0..syllables)
                .map(|_| {
                    let onset = ONSETS.choose(rng).unwrap();
                    let vowel = VOWELS.choose(rng).unwrap();
                    format!("{onset}{vowel}")
                })
                .collect();
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }

    fn name<R: Rng>(&mut self, rng: &mut R) -> String {
        let syllables = rng.random_range(2..=3);
        let w = self.fresh(rng, syllables);
        let mut c = w.chars();
        let first = c.next().expect("non-empty").to_ascii_uppercase();
        std::iter::once(first).chain(c).collect()
    }
}

struct Entities {
    next: u64,
    labels: BTreeMap<EntityId, Vec<String>>,
}

impl Entities {
    fn fresh<R: Rng>(&mut self, rng: &mut R, words: &mut Words) -> EntityId {
        let id = EntityId(format!("Q{}", 1_000_000 + self.next));
        self.next += 1;
        let n = if rng.random_bool(0.3) { 2 } else { 1 };
        let tokens = (0..n).map(|_| words.name(rng)).collect();
        self.labels.insert(id.clone(), tokens);
        id
    }

    fn tokens(&self, e: &EntityId) -> &[String] {
        &self.labels[e]
    }
}

/// A sentence under construction: tokens plus mentions in sentence coordinates.
struct Draft {
    tokens: Vec<String>,
    mentions: Vec<(EntityId, usize, usize)>,
}

struct Lexicon {
    filler: Vec<String>,
    cues: Vec<[String; 2]>,
    neutral: Vec<String>,
}

impl Lexicon {
    fn filler<R: Rng>(&self, rng: &mut R) -> String {
        self.filler.choose(rng).unwrap().clone()
    }
}

/// Filler sentence of random length with `items` placed in order at random slots.
fn sentence<R: Rng>(rng: &mut R, cfg: &SynthConfig, lex: &Lexicon, ents: &Entities, items: &[Item]) -> Draft {
    let len = rng.random_range(cfg.min_sentence_len..=cfg.max_sentence_len).max(items.len() + 1);
    let mut slots: Vec<usize> = (0..len).collect();
    slots.shuffle(rng);
    let mut slots: Vec<usize> = slots[..items.len()].to_vec();
    slots.sort_unstable();
    let mut draft = Draft { tokens: Vec::new(), mentions: Vec::new() };
    let mut k = 0;
    for pos in 0..len {
        if k < items.len() && slots[k] == pos {
            match &items[k] {
                Item::Word(w) => draft.tokens.push(w.clone()),
                Item::Entity(e) => {
                    let start = draft.tokens.len();
                    draft.tokens.extend(ents.tokens(e).iter().cloned());
                    draft.mentions.push((e.clone(), start, draft.tokens.len()));
                }
            }
            k += 1;
        } else {
            draft.tokens.push(lex.filler(rng));
        }
    }
    draft
}

enum Item {
    Word(String),
    Entity(EntityId),
}

fn document(
    doc_id: String,
    mut informative: Vec<Draft>,
    distractors: Vec<Draft>,
    first: bool,
    rng: &mut impl Rng,
) -> Document {
    let mut all: Vec<Draft> = if first {
        distractors.into_iter().chain(informative).collect()
    } else {
        let mut all = distractors;
        for d in informative.drain(..) {
            let at = rng.random_range(0..=all.len());
            all.insert(at, d);
        }
        all
    };
    let mut sentences = Vec::new();
    let mut mentions = Vec::new();
    for (i, d) in all.drain(..).enumerate() {
        for (e, s, t) in d.mentions {
            mentions.push(Mention { entity: e, sentence_index: i, token_start: s, token_end: t });
        }
        sentences.push(d.tokens);
    }
    Document { doc_id, sentences, mentions }
}

pub fn synthesize_corpus(cfg: &SynthConfig, seed: u64) -> Result<SynthCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut words = Words { used: BTreeSet::new() };
    let lex = Lexicon {
        filler: (0..cfg.filler_vocab).map(|_| words.fresh(&mut rng, 2)).collect(),
        cues: (0..cfg.num_relations).map(|_| [words.fresh(&mut rng, 3), words.fresh(&mut rng, 3)]).collect(),
        neutral: (0..4).map(|_| words.fresh(&mut rng, 3)).collect(),
    };
    let relation_ids: Vec<String> = (0..cfg.num_relations).map(|r| format!("P{}", 1001 + r)).collect();
    let relations = RelationVocabulary::new(relation_ids.clone())?;

    let mut labels: BTreeMap<String, String> = BTreeMap::new();
    let hint_props: Vec<PropertyId> = (0..cfg.num_relations).map(|r| PropertyId(format!("P{}", 2001 + r))).collect();
    for p in &hint_props {
        labels.insert(p.0.clone(), words.fresh(&mut rng, 2));
    }
    let link = PropertyId("P3001".into());
    let neutral_prop = PropertyId("P3002".into());
    let decoy_prop = PropertyId("P3003".into());
    labels.insert(link.0.clone(), "linked to".into());
    labels.insert(neutral_prop.0.clone(), "associated with".into());
    labels.insert(decoy_prop.0.clone(), "mentioned in".into());

    let mut ents = Entities { next: 0, labels: BTreeMap::new() };
    let mut triples = Vec::new();
    let mut types = Vec::new();
    let mut doc_counter = 0usize;
    let mut train = Vec::new();
    let mut dev = Vec::new();
    let mut manifest_bags = Vec::new();

    let num_na = (cfg.num_bags as f64 * cfg.na_fraction).round() as usize;
    let mut is_na: Vec<bool> = (0..cfg.num_bags).map(|i| i < num_na).collect();
    is_na.shuffle(&mut rng);
    let num_dev = (cfg.num_bags as f64 * cfg.dev_fraction).round() as usize;
    let mut is_dev: Vec<bool> = (0..cfg.num_bags).map(|i| i < num_dev).collect();
    is_dev.shuffle(&mut rng);
    let mut positive_counter = 0usize;

    for b in 0..cfg.num_bags {
        let relation = if is_na[b] {
            None
        } else {
            // Cycle through relations so each appears, then shuffle the assignment by seed.
            let r = (positive_counter + rng.random_range(0..cfg.num_relations)) % cfg.num_relations;
            positive_counter += 1;
            Some(r)
        };
        let source = ents.fresh(&mut rng, &mut words);
        let target = ents.fresh(&mut rng, &mut words);
        types.push((source.clone(), TYPES.choose(&mut rng).unwrap().to_string()));
        types.push((target.clone(), TYPES.choose(&mut rng).unwrap().to_string()));

        let planted_path = match relation {
            Some(r) if rng.random_bool(cfg.context_signal) => Some(hint_props[r].clone()),
            Some(_) => rng.random_bool(cfg.na_path_rate).then(|| neutral_prop.clone()),
            None => rng.random_bool(cfg.na_path_rate).then(|| neutral_prop.clone()),
        };
        if let Some(p) = &planted_path {
            let mid = ents.fresh(&mut rng, &mut words);
            triples.push(Triple { subject: source.clone(), property: p.clone(), object: mid.clone() });
            triples.push(Triple { subject: mid, property: link.clone(), object: target.clone() });
        }
        if rng.random_bool(0.5) {
            let decoy = ents.fresh(&mut rng, &mut words);
            triples.push(Triple { subject: source.clone(), property: decoy_prop.clone(), object: decoy });
        }

        let bridges: Vec<EntityId> = (0..2).map(|_| ents.fresh(&mut rng, &mut words)).collect();
        let num_paths = rng.random_range(cfg.min_paths..=cfg.max_paths);
        let mut paths = Vec::with_capacity(num_paths);
        let mut text_paths = 0;
        for p in 0..num_paths {
            let bridge = bridges.choose(&mut rng).unwrap().clone();
            let planted = relation.filter(|_| rng.random_bool(cfg.text_signal));
            let [cue_src, cue_tgt] = match planted {
                Some(r) => {
                    text_paths += 1;
                    lex.cues[r].clone()
                }
                None => [lex.neutral.choose(&mut rng).unwrap().clone(), lex.neutral.choose(&mut rng).unwrap().clone()],
            };
            let src_info = vec![sentence(
                &mut rng,
                cfg,
                &lex,
                &ents,
                &[Item::Entity(source.clone()), Item::Word(cue_src), Item::Entity(bridge.clone())],
            )];
            let tgt_info = vec![sentence(
                &mut rng,
                cfg,
                &lex,
                &ents,
                &[Item::Entity(bridge.clone()), Item::Word(cue_tgt), Item::Entity(target.clone())],
            )];
            let distract = |rng: &mut ChaCha8Rng, ents: &mut Entities, words: &mut Words| -> Vec<Draft> {
                (0..cfg.distractors_per_doc)
                    .map(|_| {
                        let decoy = ents.fresh(rng, words);
                        let mut items = vec![Item::Entity(decoy)];
                        if cfg.num_relations > 0 && rng.random_bool(cfg.misleading_cue_rate) {
                            let r = rng.random_range(0..cfg.num_relations);
                            items.push(Item::Word(lex.cues[r][rng.random_range(0..2)].clone()));
                        }
                        sentence(rng, cfg, &lex, ents, &items)
                    })
                    .collect()
            };
            let src_distract = distract(&mut rng, &mut ents, &mut words);
            let tgt_distract = distract(&mut rng, &mut ents, &mut words);
            let source_doc =
                document(format!("D{doc_counter}"), src_info, src_distract, cfg.distractors_first, &mut rng);
            let target_doc =
                document(format!("D{}", doc_counter + 1), tgt_info, tgt_distract, cfg.distractors_first, &mut rng);
            doc_counter += 2;
            let mentioned = derive_mentioned_entities(&source_doc, &target_doc, &source, &target);
            paths.push(TextPath {
                path_id: format!("B{b}-p{p}"),
                source_doc,
                target_doc,
                mentioned_entities: mentioned,
            });
        }

        let gold: BTreeSet<String> = relation.map(|r| relation_ids[r].clone()).into_iter().collect();
        let split = if is_dev[b] { Split::Dev } else { Split::Train };
        manifest_bags.push(ManifestBag {
            bag_id: format!("B{b}"),
            split,
            gold_relations: gold.iter().cloned().collect(),
            paths: num_paths,
            text_signal_paths: text_paths,
            context_path: matches!(&planted_path, Some(p) if *p != neutral_prop),
        });
        let mut bag = Bag { bag_id: format!("B{b}"), source, target, gold_relations: gold, paths };
        bag.finalize(&relations)?;
        match split {
            Split::Train => train.push(bag),
            Split::Dev => dev.push(bag),
        }
    }

    for (id, toks) in &ents.labels {
        labels.insert(id.0.clone(), toks.join(" "));
    }
    let graph = KnowledgeGraph::from_parts(triples, labels, types, LoadOptions::default())?;
    let manifest = Manifest {
        seed,
        config: cfg.clone(),
        relations: relation_ids,
        cues: lex.cues.clone(),
        positive_bags: cfg.num_bags - num_na,
        na_bags: num_na,
        train_bags: train.len(),
        dev_bags: dev.len(),
        bags: manifest_bags,
    };
    Ok(SynthCorpus { relations, train, dev, graph, manifest })
}
