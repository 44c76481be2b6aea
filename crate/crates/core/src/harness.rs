//! Run configuration, end-to-end train/evaluate, reports and ablation sweeps.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{BagScores, ClassifierConfig};
use crate::context::{ContextConfig, ContextGenerator, ContextMode};
use crate::corpus::{Bag, RelationVocabulary};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::filters::FilterConfig;
use crate::kg::KnowledgeGraph;
use crate::metrics::{compute_auc, confusion, per_relation};
use crate::model::{Model, PipelineConfig, PreparedBag};
use crate::reasoner::ReasonerConfig;
use crate::retrieval::{build_index, open_bag, RetrievalConfig};
use crate::train::{score_all, train, EpochLog, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    #[default]
    Closed,
    Open,
}

/// Every tunable of a run. Loaded from TOML; any key can be overridden as `section.key=value`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub setting: Setting,
    /// Documents to retrieve evidence from in the open setting.
    pub retrieval_corpus: Option<PathBuf>,
    pub context: ContextConfig,
    pub filter: FilterConfig,
    pub encoder: EncoderConfig,
    pub reasoner: ReasonerConfig,
    pub classifier: ClassifierConfig,
    pub train: TrainConfig,
    pub retrieval: RetrievalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            context: self.context,
            filter: self.filter.clone(),
            encoder: self.encoder,
            reasoner: self.reasoner,
            classifier: self.classifier,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline().validate()?;
        self.train.validate()?;
        self.retrieval.validate()?;
        if self.setting == Setting::Open && self.retrieval_corpus.is_none() {
            return Err(Error::Config("the open setting needs retrieval_corpus".into()));
        }
        Ok(())
    }

    /// Set one dotted key, e.g. `encoder.embed_dim=32` or `train.optimizer.lr=0.001`.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let (key, raw) = (key.trim(), raw.trim());
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let parts: Vec<&str> = key.split('.').collect();
        let (last, parents) = parts.split_last().expect("split yields one part");
        let mut node = &mut root;
        for p in parents {
            node = node
                .get_mut(*p)
                .filter(|n| n.is_table())
                .ok_or_else(|| Error::Config(format!("unknown config section {p:?} in {key:?}")))?;
        }
        let table = node.as_table_mut().expect("checked table");
        let optional = key == "retrieval_corpus" || key == "filter.relevance_keep";
        if !table.contains_key(*last) && !optional {
            return Err(Error::Config(format!("unknown config key {key:?}")));
        }
        table.insert(last.to_string(), value);
        *self = root.try_into().map_err(|e: toml::de::Error| Error::Config(format!("{key}: {e}")))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    /// Absent when the gold labels contain only one class.
    pub auc: Option<f64>,
    pub per_relation_f1: BTreeMap<String, RelationMetrics>,
    pub bags: usize,
    pub positive_bags: usize,
    pub na_bags: usize,
    /// Share of bags whose predicted set equals the gold set.
    pub exact_match: f64,
}

/// Metrics over aligned gold sets and scores.
pub fn report(gold: &[BTreeSet<String>], scores: &[BagScores], vocab: &RelationVocabulary) -> Result<MetricsReport> {
    let predicted: Vec<BTreeSet<String>> = scores.iter().map(|s| s.predicted.clone()).collect();
    let c = confusion(&predicted, gold)?;
    let mut instances = Vec::new();
    for (s, g) in scores.iter().zip(gold) {
        for (r, label) in vocab.labels().iter().enumerate() {
            let score = s.pooled.get(r).copied().unwrap_or(f64::NEG_INFINITY);
            instances.push((score, g.contains(label)));
        }
    }
    let auc = match compute_auc(&instances) {
        Ok(a) => Some(a),
        Err(e) => {
            log::warn!("AUC undefined: {e}");
            None
        }
    };
    let per_relation_f1 = per_relation(&predicted, gold, vocab.labels())?
        .into_iter()
        .map(|(l, c)| {
            let m = RelationMetrics { precision: c.precision(), recall: c.recall(), f1: c.f1(), support: c.tp + c.fn_ };
            (l, m)
        })
        .collect();
    let exact = predicted.iter().zip(gold).filter(|(p, g)| p == g).count();
    let positive_bags = gold.iter().filter(|g| !g.is_empty()).count();
    Ok(MetricsReport {
        f1: c.f1(),
        precision: c.precision(),
        recall: c.recall(),
        auc,
        per_relation_f1,
        bags: gold.len(),
        positive_bags,
        na_bags: gold.len() - positive_bags,
        exact_match: if gold.is_empty() { 0.0 } else { exact as f64 / gold.len() as f64 },
    })
}

pub fn prepare_all(model: &Model, bags: &[Bag], graph: &KnowledgeGraph) -> Result<Vec<PreparedBag>> {
    let contexts = ContextGenerator::new(graph);
    let out = bags.par_iter().map(|b| model.prepare(b, &contexts)).collect::<Result<Vec<_>>>()?;
    if contexts.unknown_entity_count() > 0 {
        log::warn!("{} entity pairs had an endpoint missing from the graph", contexts.unknown_entity_count());
    }
    Ok(out)
}

/// Scores for a pair nobody links: no paths, nothing predicted.
fn unlinked_scores(bag: &Bag, relations: usize) -> BagScores {
    BagScores {
        bag_id: bag.bag_id.clone(),
        per_path: Vec::new(),
        pooled: vec![f64::NEG_INFINITY; relations],
        predicted: BTreeSet::new(),
        input_digest: String::new(),
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub scores: Vec<BagScores>,
    /// Bags as scored; in the open setting they carry retrieved paths (`None` if unlinked).
    pub prepared: Vec<Option<PreparedBag>>,
}

pub fn evaluate(model: &Model, bags: &[Bag], graph: &KnowledgeGraph) -> Result<Evaluation> {
    let prepared = prepare_all(model, bags, graph)?;
    let scores = score_all(model, &prepared)?;
    let gold: Vec<BTreeSet<String>> = bags.iter().map(|b| b.gold_relations.clone()).collect();
    Ok(Evaluation {
        report: report(&gold, &scores, &model.relations)?,
        scores,
        prepared: prepared.into_iter().map(Some).collect(),
    })
}

/// Open setting: each bag's paths are replaced by ones retrieved from `pool`.
pub fn evaluate_open(
    model: &Model,
    bags: &[Bag],
    pool: &[Bag],
    graph: &KnowledgeGraph,
    cfg: &RetrievalConfig,
) -> Result<Evaluation> {
    let index = build_index(crate::corpus::collect_documents(pool).into_values());
    let contexts = ContextGenerator::new(graph);
    let results: Vec<(BagScores, Option<PreparedBag>)> = bags
        .par_iter()
        .map(|b| match open_bag(b, &index, cfg) {
            None => Ok((unlinked_scores(b, model.relations.len()), None)),
            Some(ob) => {
                let p = model.prepare(&ob, &contexts)?;
                Ok((model.score(&p)?, Some(p)))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let gold: Vec<BTreeSet<String>> = bags.iter().map(|b| b.gold_relations.clone()).collect();
    let (scores, prepared): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    Ok(Evaluation { report: report(&gold, &scores, &model.relations)?, scores, prepared })
}

/// One row per bag: id, gold and predicted labels (`;`-joined, empty for NA), best score.
pub fn write_predictions_csv<W: Write>(
    out: W,
    bags: &[Bag],
    scores: &[BagScores],
    vocab: &RelationVocabulary,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["bag_id", "gold", "predicted", "top_relation", "top_score"])?;
    for (b, s) in bags.iter().zip(scores) {
        let join = |set: &BTreeSet<String>| set.iter().cloned().collect::<Vec<_>>().join(";");
        let top = s.pooled.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)));
        let (label, score) =
            top.map_or((String::new(), String::new()), |(r, v)| (vocab.label(r).to_string(), format!("{v}")));
        w.write_record([b.bag_id.clone(), join(&b.gold_relations), join(&s.predicted), label, score])?;
    }
    w.flush().map_err(|e| Error::io("predictions", e))
}

pub struct RunOutcome {
    pub model: Model,
    pub logs: Vec<EpochLog>,
    pub evaluation: Evaluation,
}

/// Fresh model, trained on `train_bags`, evaluated on `eval_bags`.
pub fn train_and_evaluate(
    cfg: &RunConfig,
    train_bags: &[Bag],
    eval_bags: &[Bag],
    vocab: &RelationVocabulary,
    graph: &KnowledgeGraph,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<RunOutcome> {
    cfg.validate()?;
    let mut model = Model::new(cfg.pipeline(), vocab.clone(), cfg.train.seed)?;
    let prepared = prepare_all(&model, train_bags, graph)?;
    let logs = train(&mut model, &prepared, &cfg.train, on_epoch)?;
    let evaluation = evaluate(&model, eval_bags, graph)?;
    Ok(RunOutcome { model, logs, evaluation })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sweep {
    Filters,
    Hops,
    Modes,
}

impl std::str::FromStr for Sweep {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "filters" => Ok(Sweep::Filters),
            "hops" => Ok(Sweep::Hops),
            "modes" => Ok(Sweep::Modes),
            other => Err(Error::Config(format!("unknown sweep {other:?}; use filters, hops or modes"))),
        }
    }
}

/// Labelled configurations a sweep visits.
pub fn sweep_cells(base: &RunConfig, sweep: Sweep) -> Vec<(String, RunConfig)> {
    let with = |f: &dyn Fn(&mut RunConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match sweep {
        Sweep::Filters => {
            [("both", true, true), ("no-relevance", true, false), ("no-entity", false, true), ("neither", false, false)]
                .into_iter()
                .map(|(label, entity, relevance)| {
                    (
                        label.to_string(),
                        with(&|c| {
                            c.filter.entity_filter = entity;
                            c.filter.relevance_filter = relevance;
                        }),
                    )
                })
                .collect()
        }
        Sweep::Hops => (1..=7).map(|h| (format!("hops={h}"), with(&|c| c.context.max_hops = h))).collect(),
        Sweep::Modes => ContextMode::ALL.into_iter().map(|m| (m.to_string(), with(&|c| c.context.mode = m))).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub sweep: Sweep,
    pub cell: String,
    pub f1: f64,
    pub auc: Option<f64>,
    pub exact_match: f64,
    pub final_loss: f64,
}

pub fn run_ablation(
    base: &RunConfig,
    sweep: Sweep,
    train_bags: &[Bag],
    eval_bags: &[Bag],
    vocab: &RelationVocabulary,
    graph: &KnowledgeGraph,
) -> Result<Vec<AblationRow>> {
    sweep_cells(base, sweep)
        .into_iter()
        .map(|(cell, cfg)| {
            log::info!("ablation cell {cell}");
            let run = train_and_evaluate(&cfg, train_bags, eval_bags, vocab, graph, |_| {})?;
            let r = run.evaluation.report;
            Ok(AblationRow {
                sweep,
                cell,
                f1: r.f1,
                auc: r.auc,
                exact_match: r.exact_match,
                final_loss: run.logs.last().map_or(f64::NAN, |l| l.loss),
            })
        })
        .collect()
}

pub fn write_ablation_csv<W: Write>(out: W, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["sweep", "cell", "f1", "auc", "exact_match", "final_loss"])?;
    for r in rows {
        let sweep = serde_json::to_value(r.sweep)?.as_str().unwrap_or_default().to_string();
        let auc = r.auc.map(|a| a.to_string()).unwrap_or_default();
        w.write_record([
            sweep,
            r.cell.clone(),
            r.f1.to_string(),
            auc,
            r.exact_match.to_string(),
            r.final_loss.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("ablation", e))
}
