//! Criteria that train models on synthetic corpora.

use std::collections::BTreeMap;

use xdocre::context::{ContextGenerator, ContextMode};
use xdocre::explain::explain;
use xdocre::harness::{evaluate, train_and_evaluate, RunConfig};
use xdocre::synth::{synthesize_corpus, SynthConfig};
use xdocre::train::moving_average;

use crate::Verdict;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

/// Small model used wherever many runs are needed.
fn desk_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.encoder.embed_dim = 32;
    c.encoder.num_layers = 2;
    c.encoder.vocab_hash_buckets = 4099;
    c.train.epochs = 20;
    c
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

fn fmt(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ")
}

pub fn overfit() -> Verdict {
    let corpus = synthesize_corpus(&SynthConfig::default(), 7).unwrap();
    let mut cfg = RunConfig::default();
    cfg.context.mode = ContextMode::Ecc;
    cfg.train.epochs = 60;
    let run = train_and_evaluate(&cfg, &corpus.train, &corpus.train, &corpus.relations, &corpus.graph, |_| {}).unwrap();
    let losses: Vec<f64> = run.logs.iter().map(|l| l.loss).collect();
    let avg = moving_average(&losses, 5);
    let rises: Vec<usize> = avg.windows(2).enumerate().filter(|(_, w)| w[1] > w[0]).map(|(i, _)| i + 5).collect();
    let f1 = run.evaluation.report.f1;
    Verdict::check(
        corpus.train.len() == 50 && f1 >= 0.95 && rises.is_empty(),
        format!(
            "{} bags, {} epochs: train F1 {f1:.3}, loss {:.3} -> {:.5}, moving-average rises at epochs {rises:?}",
            corpus.train.len(),
            losses.len(),
            losses[0],
            losses[losses.len() - 1]
        ),
    )
}

/// Relations recoverable only from graph context: no cue words in any text path.
pub fn context_ablation() -> Verdict {
    let synth =
        SynthConfig { num_bags: 200, dev_fraction: 0.3, text_signal: 0.0, context_signal: 1.0, ..Default::default() };
    let mut gaps = Vec::new();
    let mut with = Vec::new();
    let mut without = Vec::new();
    for seed in SEEDS {
        let corpus = synthesize_corpus(&synth, seed).unwrap();
        let mut accuracy = BTreeMap::new();
        for mode in [ContextMode::Ecc, ContextMode::None] {
            let mut cfg = desk_config();
            cfg.context.mode = mode;
            cfg.train.seed = seed;
            let run =
                train_and_evaluate(&cfg, &corpus.train, &corpus.dev, &corpus.relations, &corpus.graph, |_| {}).unwrap();
            accuracy.insert(mode.to_string(), run.evaluation.report.exact_match);
        }
        with.push(accuracy["ecc"]);
        without.push(accuracy["none"]);
        gaps.push(accuracy["ecc"] - accuracy["none"]);
    }
    let gap = median(gaps.clone());
    Verdict::check(
        gap >= 0.10,
        format!(
            "held-out accuracy ecc [{}] vs none [{}]; median gap {:.1} points",
            fmt(&with),
            fmt(&without),
            100.0 * gap
        ),
    )
}

/// Distractor sentences, some carrying other relations' cue words, ahead of the evidence.
pub fn filter_ablation() -> Verdict {
    let synth = SynthConfig {
        num_bags: 200,
        dev_fraction: 0.3,
        distractors_per_doc: 4,
        misleading_cue_rate: 0.5,
        distractors_first: true,
        ..Default::default()
    };
    let mut both = Vec::new();
    let mut neither = Vec::new();
    for seed in SEEDS {
        let corpus = synthesize_corpus(&synth, seed).unwrap();
        for (on, out) in [(true, &mut both), (false, &mut neither)] {
            let mut cfg = desk_config();
            cfg.context.mode = ContextMode::None;
            cfg.filter.token_budget = 48;
            cfg.encoder.max_positions = 48;
            cfg.filter.entity_filter = on;
            cfg.filter.relevance_filter = on;
            cfg.train.seed = seed;
            let run =
                train_and_evaluate(&cfg, &corpus.train, &corpus.dev, &corpus.relations, &corpus.graph, |_| {}).unwrap();
            out.push(run.evaluation.report.f1);
        }
    }
    let (m_both, m_neither) = (median(both.clone()), median(neither.clone()));
    Verdict::check(
        m_both > m_neither,
        format!(
            "held-out F1 both filters [{}] median {m_both:.3}; neither [{}] median {m_neither:.3}",
            fmt(&both),
            fmt(&neither)
        ),
    )
}

fn multiset(tokens: impl IntoIterator<Item = String>) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for t in tokens {
        *m.entry(t).or_insert(0) += 1;
    }
    m
}

pub fn explanations() -> Verdict {
    let corpus = synthesize_corpus(&SynthConfig { num_bags: 60, dev_fraction: 0.5, ..Default::default() }, 7).unwrap();
    let mut cfg = desk_config();
    cfg.train.epochs = 5;
    let run = train_and_evaluate(&cfg, &corpus.train, &corpus.dev, &corpus.relations, &corpus.graph, |_| {}).unwrap();
    let render = || -> Vec<String> {
        let contexts = ContextGenerator::new(&corpus.graph);
        corpus
            .dev
            .iter()
            .map(|bag| {
                let prepared = run.model.prepare(bag, &contexts).unwrap();
                let scores = run.model.score(&prepared).unwrap();
                let ex = explain(bag, &prepared.informative, &scores).unwrap();
                ex.to_json().unwrap() + &ex.to_markdown()
            })
            .collect()
    };
    let contexts = ContextGenerator::new(&corpus.graph);
    let mut sentences = 0;
    for bag in &corpus.dev {
        let prepared = run.model.prepare(bag, &contexts).unwrap();
        let scores = run.model.score(&prepared).unwrap();
        let ex = explain(bag, &prepared.informative, &scores).unwrap();
        let shown = multiset(ex.tokens());
        let source = multiset(prepared.informative.iter().flat_map(|i| i.flattened_tokens.iter().cloned()));
        if let Some((t, n)) = shown.iter().find(|(t, n)| source.get(*t).copied().unwrap_or(0) < **n) {
            return Verdict::check(false, format!("bag {}: token {t:?} shown {n} times, more than in I*", bag.bag_id));
        }
        let mut seen: BTreeMap<(String, String, usize), usize> = BTreeMap::new();
        for s in &ex.sentences {
            *seen.entry((s.path_id.clone(), s.doc_role.as_str().to_string(), s.sentence_index)).or_insert(0) += 1;
        }
        let expected: BTreeMap<(String, String, usize), usize> = prepared
            .informative
            .iter()
            .flat_map(|i| {
                i.selected.iter().map(move |s| ((i.path_id.clone(), s.role.as_str().to_string(), s.sentence_index), 1))
            })
            .collect();
        if seen != expected {
            return Verdict::check(false, format!("bag {}: explained sentences differ from I*", bag.bag_id));
        }
        sentences += ex.sentences.len();
    }
    let stable = render() == render();
    Verdict::check(
        stable,
        format!(
            "{} dev bags, {sentences} sentences each shown once, tokens within I*; rerun identical: {stable}",
            corpus.dev.len()
        ),
    )
}

pub fn determinism() -> Verdict {
    let corpus = synthesize_corpus(&SynthConfig { dev_fraction: 0.2, ..Default::default() }, 7).unwrap();
    let mut cfg = RunConfig::default();
    cfg.train.seed = 7;
    cfg.train.epochs = 10;
    let once = || {
        let run =
            train_and_evaluate(&cfg, &corpus.train, &corpus.dev, &corpus.relations, &corpus.graph, |_| {}).unwrap();
        let metrics = serde_json::to_string(&run.evaluation.report).unwrap();
        (metrics, run.model.checkpoint())
    };
    let (m1, c1) = once();
    let (m2, c2) = once();
    let mut worst: f64 = 0.0;
    let mut same_layout = c1.tensors.len() == c2.tensors.len();
    for (a, b) in c1.tensors.iter().zip(&c2.tensors) {
        same_layout &= a.name == b.name && a.shape == b.shape;
        for (x, y) in a.data.iter().zip(&b.data) {
            worst = worst.max((x - y).abs());
        }
    }
    // Evaluating the reloaded checkpoint must reproduce the metrics too.
    let reloaded = xdocre::model::Model::from_checkpoint(&c1).unwrap();
    let m3 = serde_json::to_string(&evaluate(&reloaded, &corpus.dev, &corpus.graph).unwrap().report).unwrap();
    Verdict::check(
        m1 == m2 && m1 == m3 && same_layout && worst <= 1e-6,
        format!(
            "metrics identical: {}; reloaded checkpoint agrees: {}; max parameter gap {worst:.1e}",
            m1 == m2,
            m1 == m3
        ),
    )
}
