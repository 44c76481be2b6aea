//! The full pipeline: context, filters and marking per bag, then encoder, reasoner and
//! classifier on a tape.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Mat, ParamStore, Tape, Var};
use crate::classifier::{loss_on_tape, score_bag, BagScores, Classifier, ClassifierConfig};
use crate::context::{Context, ContextConfig, ContextGenerator};
use crate::corpus::{Bag, RelationVocabulary};
use crate::encoder::{encode, mark_sequence, mean_token_row, EncoderConfig, MarkedSequence, TransformerEncoder};
use crate::error::{Error, Result};
use crate::filters::{rank_sentences, relevance_filter, score_mentions, FilterConfig, InformativeContext};
use crate::kg::EntityId;
use crate::reasoner::{select_entities, Reasoner, ReasonerConfig, RelationMatrix};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub context: ContextConfig,
    pub filter: FilterConfig,
    pub encoder: EncoderConfig,
    pub reasoner: ReasonerConfig,
    pub classifier: ClassifierConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.context.validate()?;
        self.filter.validate()?;
        self.encoder.validate()?;
        self.reasoner.validate(self.encoder.embed_dim)?;
        if self.encoder.max_positions < self.filter.token_budget {
            return Err(Error::Config(format!(
                "max_positions {} is below token_budget {}",
                self.encoder.max_positions, self.filter.token_budget
            )));
        }
        Ok(())
    }
}

/// Everything about a bag that does not depend on parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedBag {
    pub bag_id: String,
    pub source: EntityId,
    pub target: EntityId,
    pub gold_relations: BTreeSet<String>,
    pub gold: Vec<bool>,
    pub context: Context,
    pub informative: Vec<InformativeContext>,
    pub sequences: Vec<MarkedSequence>,
    /// Matrix entities: source, target, then bridges.
    pub entities: Vec<EntityId>,
    /// `members[path][entity]`
    pub members: Vec<Vec<bool>>,
    pub digest: String,
}

/// SHA-256 over the serialized informative contexts.
pub fn digest_informative(informative: &[InformativeContext]) -> String {
    let bytes = serde_json::to_vec(informative).expect("serializable");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn prepare_bag(
    bag: &Bag,
    contexts: &ContextGenerator,
    cfg: &PipelineConfig,
    vocab: &RelationVocabulary,
) -> Result<PreparedBag> {
    let context = contexts.generate(&bag.source, &bag.target, &cfg.context);
    let scores = score_mentions(bag, &cfg.filter);
    let informative = rank_sentences(bag, &scores, &cfg.filter)
        .iter()
        .map(|c| relevance_filter(c, &context, bag, &cfg.filter))
        .collect::<Result<Vec<_>>>()?;
    let sequences = informative
        .iter()
        .map(|ictx| mark_sequence(ictx, bag, cfg.encoder.max_positions))
        .collect::<Result<Vec<_>>>()?;

    let mut priority: BTreeMap<EntityId, f64> = BTreeMap::new();
    for seq in &sequences {
        for span in &seq.spans {
            priority.entry(span.entity.clone()).or_insert(0.0);
        }
    }
    for path_scores in &scores {
        for (e, s) in path_scores {
            if let Some(p) = priority.get_mut(e) {
                *p = p.max(s.total);
            }
        }
    }
    let dropped = priority.len().saturating_sub(cfg.reasoner.max_entities);
    if dropped > 0 {
        log::debug!("bag {}: {dropped} bridge entities over the cap", bag.bag_id);
    }
    let entities = select_entities(&bag.source, &bag.target, &priority, cfg.reasoner.max_entities);
    let members = bag
        .paths
        .iter()
        .map(|p| entities.iter().enumerate().map(|(i, e)| i < 2 || p.mentioned_entities.contains(e)).collect())
        .collect();

    Ok(PreparedBag {
        bag_id: bag.bag_id.clone(),
        source: bag.source.clone(),
        target: bag.target.clone(),
        gold_relations: bag.gold_relations.clone(),
        gold: vocab.indicator(&bag.gold_relations),
        digest: digest_informative(&informative),
        context,
        informative,
        sequences,
        entities,
        members,
    })
}

/// Tape handles produced by one forward pass.
pub struct BagForward {
    /// `|E| × d` bag-level entity embeddings.
    pub entities: Var,
    /// Relation matrix before attention, `|E|² × d`.
    pub cells: Var,
    /// After the attention stack.
    pub reasoned: Var,
    /// `paths × |R|`
    pub scores: Var,
    /// `1 × |R|`
    pub pooled: Var,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: PipelineConfig,
    pub relations: RelationVocabulary,
    pub store: ParamStore,
    pub encoder: TransformerEncoder,
    pub reasoner: Reasoner,
    pub classifier: Classifier,
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: PipelineConfig,
    pub relations: RelationVocabulary,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!("checkpoint version {} is not supported", ck.version)));
        }
        Ok(ck)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

impl Model {
    pub fn new(config: PipelineConfig, relations: RelationVocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        if relations.is_empty() {
            return Err(Error::Config("relation vocabulary is empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.encoder.embed_dim;
        let encoder = TransformerEncoder::new(&mut store, &mut rng, config.encoder)?;
        let reasoner = Reasoner::new(&mut store, &mut rng, d, config.reasoner)?;
        let classifier = Classifier::new(&mut store, &mut rng, d, relations.len());
        Ok(Model { config, relations, store, encoder, reasoner, classifier })
    }

    pub fn prepare(&self, bag: &Bag, contexts: &ContextGenerator) -> Result<PreparedBag> {
        prepare_bag(bag, contexts, &self.config, &self.relations)
    }

    pub fn forward(&self, t: &mut Tape, bag: &PreparedBag) -> Result<BagForward> {
        if bag.sequences.is_empty() {
            return Err(Error::validation(format!("bag {}", bag.bag_id), "no paths"));
        }
        let index: BTreeMap<&EntityId, usize> = bag.entities.iter().enumerate().map(|(i, e)| (e, i)).collect();
        let mut parts = Vec::new();
        let mut offset = 0;
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); bag.entities.len()];
        let mut fallbacks: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
        for seq in &bag.sequences {
            let enc = encode(&self.encoder, t, seq)?;
            if let Some(rows) = enc.entity_rows {
                for (k, e) in enc.entities.iter().enumerate() {
                    if let Some(&i) = index.get(e) {
                        groups[i].push(offset + k);
                    }
                }
                offset += enc.entities.len();
                parts.push(rows);
            }
            for (slot, endpoint) in [&bag.source, &bag.target].into_iter().enumerate() {
                if !enc.entities.contains(endpoint) {
                    parts.push(mean_token_row(t, enc.tokens));
                    fallbacks[slot].push(offset);
                    offset += 1;
                }
            }
        }
        for (slot, fb) in fallbacks.into_iter().enumerate() {
            if groups[slot].is_empty() {
                groups[slot] = fb;
            }
        }
        let pool = if parts.len() == 1 { parts[0] } else { t.concat_rows(&parts) };
        let entities = t.mean_groups(pool, groups);
        let cells = self.reasoner.relation_cells(t, entities);
        let out = self.reasoner.reason(t, cells, &bag.members);
        let scores = self.classifier.forward(t, out.per_path);
        let pooled = t.col_max(scores);
        Ok(BagForward { entities, cells, reasoned: out.cells, scores, pooled })
    }

    /// Scalar bag loss on the tape.
    pub fn loss(&self, t: &mut Tape, bag: &PreparedBag) -> Result<(Var, BagForward)> {
        let f = self.forward(t, bag)?;
        let c = self.config.classifier;
        let l = loss_on_tape(t, f.pooled, &bag.gold, c.theta, c.loss);
        Ok((l, f))
    }

    pub fn score(&self, bag: &PreparedBag) -> Result<BagScores> {
        let mut t = Tape::new(&self.store);
        let f = self.forward(&mut t, bag)?;
        let per_path = crate::encoder::to_rows(t.value(f.scores));
        if per_path.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!("non-finite scores for bag {}", bag.bag_id)));
        }
        Ok(score_bag(&bag.bag_id, per_path, self.config.classifier.theta, &self.relations, bag.digest.clone()))
    }

    /// Input relation matrix of a bag.
    pub fn relation_matrix(&self, bag: &PreparedBag) -> Result<RelationMatrix> {
        let mut t = Tape::new(&self.store);
        let f = self.forward(&mut t, bag)?;
        Ok(RelationMatrix { entities: bag.entities.clone(), cells: t.value(f.cells).clone() })
    }

    fn tensors(&self, prefix: &str) -> Vec<Tensor> {
        self.store
            .ids()
            .filter(|id| self.store.name(*id).starts_with(prefix))
            .map(|id| {
                let m = self.store.get(id);
                Tensor {
                    name: self.store.name(id).to_string(),
                    shape: [m.nrows(), m.ncols()],
                    data: m.iter().copied().collect(),
                }
            })
            .collect()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            relations: self.relations.clone(),
            tensors: self.tensors(""),
        }
    }

    /// Encoder parameters only.
    pub fn encoder_checkpoint(&self) -> Checkpoint {
        Checkpoint { tensors: self.tensors("encoder."), ..self.checkpoint() }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut model = Model::new(ck.config.clone(), ck.relations.clone(), 0)?;
        let loaded = model.load_tensors(&ck.tensors)?;
        if loaded != model.store.len() {
            return Err(Error::Config(format!("checkpoint has {loaded} of {} parameter tensors", model.store.len())));
        }
        Ok(model)
    }

    /// Overwrite encoder parameters from a checkpoint built with the same encoder config.
    pub fn load_encoder(&mut self, ck: &Checkpoint) -> Result<()> {
        if ck.config.encoder != self.config.encoder {
            return Err(Error::Config("encoder checkpoint was built with a different encoder config".into()));
        }
        let enc: Vec<Tensor> = ck.tensors.iter().filter(|t| t.name.starts_with("encoder.")).cloned().collect();
        self.load_tensors(&enc)?;
        Ok(())
    }

    fn load_tensors(&mut self, tensors: &[Tensor]) -> Result<usize> {
        for t in tensors {
            let id = self
                .store
                .id_of(&t.name)
                .ok_or_else(|| Error::Config(format!("unknown parameter {} in checkpoint", t.name)))?;
            let want = self.store.get(id).dim();
            if (t.shape[0], t.shape[1]) != want || t.data.len() != want.0 * want.1 {
                return Err(Error::Config(format!(
                    "parameter {} has shape {:?}, model expects {:?}",
                    t.name, t.shape, want
                )));
            }
            *self.store.get_mut(id) = Mat::from_shape_vec(want, t.data.clone()).expect("shape checked");
        }
        Ok(tensors.len())
    }
}
