//! Criteria checked against slow, independent recomputations.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xdocre::context::explore_path;
use xdocre::corpus::{Bag, DocRole, Document};
use xdocre::filters::{rank_sentences, score_mentions, FilterConfig};
use xdocre::kg::{EntityId, KnowledgeGraph, LoadOptions, Triple};
use xdocre::metrics::{compute_auc, compute_f1};
use xdocre::retrieval::{build_index, rank_paths, retrieve_paths, RetrievalConfig, ScoreWeights};

use crate::fixtures::{document, random_bag, random_triples};
use crate::Verdict;

type Hop = (String, String);

/// Lexicographically smallest among the shortest simple paths, found by enumerating every
/// simple node sequence of each length in turn.
fn slow_path(triples: &[Triple], undirected: bool, s: &str, t: &str, max_hops: usize) -> Option<Vec<Hop>> {
    if s == t {
        return Some(Vec::new());
    }
    // Cheapest property for each ordered node pair.
    let mut best: BTreeMap<(String, String), String> = BTreeMap::new();
    let mut add = |u: &str, p: &str, v: &str| {
        let slot = best.entry((u.to_string(), v.to_string())).or_insert_with(|| p.to_string());
        if p < slot.as_str() {
            *slot = p.to_string();
        }
    };
    for tr in triples {
        add(tr.subject.as_str(), tr.property.as_str(), tr.object.as_str());
        if undirected {
            add(tr.object.as_str(), tr.property.as_str(), tr.subject.as_str());
        }
    }
    let mut out: BTreeMap<String, Vec<(String, String)>> = BTreeMap::new();
    for ((u, v), p) in &best {
        out.entry(u.clone()).or_default().push((p.clone(), v.clone()));
    }

    fn walk(
        out: &BTreeMap<String, Vec<Hop>>,
        at: &str,
        target: &str,
        left: usize,
        seen: &mut Vec<String>,
        hops: &mut Vec<Hop>,
        found: &mut Option<Vec<Hop>>,
    ) {
        if left == 0 {
            if at == target && found.as_ref().is_none_or(|f| *hops < *f) {
                *found = Some(hops.clone());
            }
            return;
        }
        for (p, v) in out.get(at).into_iter().flatten() {
            if seen.contains(v) {
                continue;
            }
            seen.push(v.clone());
            hops.push((p.clone(), v.clone()));
            walk(out, v, target, left - 1, seen, hops, found);
            hops.pop();
            seen.pop();
        }
    }

    for len in 1..=max_hops {
        let mut found = None;
        walk(&out, s, t, len, &mut vec![s.to_string()], &mut Vec::new(), &mut found);
        if found.is_some() {
            return found;
        }
    }
    None
}

pub fn path_search() -> Verdict {
    let mut queries = 0;
    let mut found = 0;
    for seed in 0..500u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nodes = rng.random_range(2..=50);
        let edges = rng.random_range(0..=200);
        let triples = random_triples(&mut rng, nodes, edges, 4);
        let mut labels: Vec<(String, String)> = (0..nodes).map(|i| (format!("Q{i}"), format!("node {i}"))).collect();
        labels.extend((0..4).map(|p| (format!("P{p}"), format!("prop {p}"))));
        let undirected = seed % 2 == 0;
        let g = KnowledgeGraph::from_parts(triples.clone(), labels, Vec::new(), LoadOptions { undirected }).unwrap();
        for _ in 0..4 {
            let s = format!("Q{}", rng.random_range(0..nodes));
            let t = format!("Q{}", rng.random_range(0..nodes));
            let hops = rng.random_range(1..=5);
            let got = explore_path(&g, &EntityId::new(&s), &EntityId::new(&t), hops)
                .map(|p| p.into_iter().map(|(p, v)| (p.0, v.0)).collect::<Vec<_>>());
            let want = slow_path(&triples, undirected, &s, &t, hops);
            queries += 1;
            found += usize::from(want.is_some());
            if got != want {
                return Verdict::check(
                    false,
                    format!("graph seed {seed}, {s}->{t} within {hops}: got {got:?}, oracle {want:?}"),
                );
            }
        }
    }
    Verdict::check(true, format!("{queries} queries agree ({found} with a path)"))
}

fn sentence_entities(doc: &Document, index: usize) -> Vec<&EntityId> {
    doc.mentions.iter().filter(|m| m.sentence_index == index).map(|m| &m.entity).collect()
}

pub fn filters() -> Verdict {
    let mut checked_scores = 0;
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(10_000 + seed);
        let bag: Bag = random_bag(&mut rng, seed as usize, 100);
        let cfg = FilterConfig {
            top_k: rng.random_range(1..=20),
            theta1_requires_both: rng.random_bool(0.3),
            ..Default::default()
        };
        let scores = score_mentions(&bag, &cfg);
        let ranked = rank_sentences(&bag, &scores, &cfg);
        let bridge = |e: &EntityId| *e != bag.source && *e != bag.target;

        for (pi, path) in bag.paths.iter().enumerate() {
            // Every sentence of the path as (role, index, entities).
            let mut sents = Vec::new();
            for (role, doc) in [(DocRole::Source, &path.source_doc), (DocRole::Target, &path.target_doc)] {
                for i in 0..doc.sentences.len() {
                    sents.push((role, i, sentence_entities(doc, i)));
                }
            }
            let mut bridges: Vec<&EntityId> =
                sents.iter().flat_map(|s| s.2.iter().copied()).filter(|e| bridge(e)).collect();
            bridges.sort();
            bridges.dedup();
            let direct = |e: &EntityId| {
                sents.iter().any(|(_, _, ents)| {
                    let (hs, ho) = (ents.contains(&&bag.source), ents.contains(&&bag.target));
                    ents.contains(&e) && if cfg.theta1_requires_both { hs && ho } else { hs || ho }
                })
            };
            let mut totals: BTreeMap<&EntityId, f64> = BTreeMap::new();
            for &em in &bridges {
                let s1 = u32::from(direct(em));
                let s2 = bridges
                    .iter()
                    .filter(|&&eo| eo != em && direct(eo))
                    .filter(|&&eo| sents.iter().any(|(_, _, ents)| ents.contains(&eo) && ents.contains(&em)))
                    .count() as u32;
                let s3 = bag
                    .paths
                    .iter()
                    .filter(|p| p.source_doc.count_mentions(em) + p.target_doc.count_mentions(em) > 0)
                    .count() as u32;
                let total = cfg.lambda * f64::from(s1) + cfg.eta * f64::from(s2) + cfg.kappa * f64::from(s3);
                let Some(got) = scores[pi].get(em) else {
                    return Verdict::check(false, format!("bag seed {seed}: no score for {em}"));
                };
                if (got.s1, got.s2, got.s3) != (s1, s2, s3) || (got.total - total).abs() > 1e-12 {
                    return Verdict::check(
                        false,
                        format!("bag seed {seed} entity {em}: got {got:?}, oracle ({s1},{s2},{s3},{total})"),
                    );
                }
                totals.insert(em, total);
                checked_scores += 1;
            }
            if scores[pi].len() != bridges.len() {
                return Verdict::check(false, format!("bag seed {seed}: scored entities differ from bridges"));
            }

            // Importance: sum over the distinct bridges of each sentence, then a stable sort.
            let mut imp: Vec<(DocRole, usize, f64)> = sents
                .iter()
                .map(|(role, i, ents)| {
                    let mut distinct: Vec<&EntityId> = ents.iter().copied().filter(|e| bridge(e)).collect();
                    distinct.sort();
                    distinct.dedup();
                    let mut sum = 0.0;
                    for e in distinct {
                        sum += totals[e];
                    }
                    (*role, *i, sum)
                })
                .collect();
            imp.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap());
            imp.truncate(cfg.top_k);
            let got: Vec<(DocRole, usize, f64)> =
                ranked[pi].sentences.iter().map(|c| (c.role, c.sentence_index, c.importance)).collect();
            if got != imp {
                return Verdict::check(
                    false,
                    format!("bag seed {seed} path {}: top-K {got:?} vs oracle {imp:?}", path.path_id),
                );
            }
        }
    }
    Verdict::check(true, format!("200 bags, {checked_scores} mention scores and every top-K list agree"))
}

fn slow_f1(pred: &[BTreeSet<String>], gold: &[BTreeSet<String>], labels: &[&str]) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
    for (p, g) in pred.iter().zip(gold) {
        for l in labels {
            match (p.iter().any(|x| x == l), g.iter().any(|x| x == l)) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fn_ += 1.0,
                (false, false) => {}
            }
        }
    }
    let precision: f64 = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let recall: f64 = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Precision and recall recounted from scratch at every distinct threshold.
fn slow_auc(xs: &[(f64, bool)]) -> f64 {
    let positives = xs.iter().filter(|x| x.1).count() as f64;
    let mut thresholds: Vec<f64> = xs.iter().map(|x| x.0).collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let (mut area, mut prev_recall) = (0.0, 0.0);
    for t in thresholds {
        let kept: Vec<&(f64, bool)> = xs.iter().filter(|x| x.0 >= t).collect();
        let tp = kept.iter().filter(|x| x.1).count() as f64;
        let recall = tp / positives;
        area += (recall - prev_recall) * (tp / kept.len() as f64);
        prev_recall = recall;
    }
    area
}

pub fn metrics() -> Verdict {
    let set = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<BTreeSet<String>>();
    // Hand-counted: TP 3, FP 1, FN 2.
    let pred = [set(&["a"]), set(&["b"]), set(&["c", "a"]), set(&[])];
    let gold = [set(&["a"]), set(&["b", "c"]), set(&["c"]), set(&["b"])];
    let hand = compute_f1(&pred, &gold).unwrap();
    if (hand - 2.0 * 0.45 / 1.35).abs() > 1e-12 {
        return Verdict::check(false, format!("hand-counted fixture gives {hand}"));
    }

    let labels = ["a", "b", "c", "d"];
    let mut worst_f1: f64 = 0.0;
    let mut worst_auc: f64 = 0.0;
    for seed in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(20_000 + seed);
        let n = rng.random_range(1..=40);
        let draw = |rng: &mut ChaCha8Rng| -> BTreeSet<String> {
            labels.iter().filter(|_| rng.random_bool(0.3)).map(|s| s.to_string()).collect()
        };
        let pred: Vec<_> = (0..n).map(|_| draw(&mut rng)).collect();
        let gold: Vec<_> = (0..n).map(|_| draw(&mut rng)).collect();
        worst_f1 = worst_f1.max((compute_f1(&pred, &gold).unwrap() - slow_f1(&pred, &gold, &labels)).abs());

        let m = rng.random_range(2..=100);
        let coarse = rng.random_bool(0.5);
        let mut xs: Vec<(f64, bool)> = (0..m)
            .map(|_| {
                let s = if coarse { f64::from(rng.random_range(0..5u8)) } else { rng.random::<f64>() };
                (s, rng.random_bool(0.4))
            })
            .collect();
        xs[0].1 = true;
        xs[1].1 = false;
        worst_auc = worst_auc.max((compute_auc(&xs).unwrap() - slow_auc(&xs)).abs());
    }
    let separated = compute_auc(&[(0.9, true), (0.8, true), (0.1, false), (0.05, false)]).unwrap();
    let tied = compute_auc(&[(0.5, true), (0.5, false), (0.5, false), (0.5, false)]).unwrap();
    let passed = worst_f1 <= 1e-12 && worst_auc <= 1e-9 && separated == 1.0 && (tied - 0.25).abs() < 1e-12;
    Verdict::check(
        passed,
        format!("hand fixture F1 {hand:.6}; max F1 gap {worst_f1:.1e}, max AUC gap {worst_auc:.1e} over 1000 fixtures; separated {separated}, all-tied {tied}"),
    )
}

struct SlowScore {
    pair: (String, String),
    count: f64,
    shared: f64,
    sim: f64,
}

/// Dense TF-IDF and every qualifying document pair, scored from scratch.
fn slow_ranking(docs: &[Document], s: &EntityId, t: &EntityId, w: ScoreWeights) -> Vec<((String, String), f64, f64)> {
    let vocab: BTreeSet<String> =
        docs.iter().flat_map(|d| d.sentences.iter().flatten()).map(|x| x.to_lowercase()).collect();
    let vocab: Vec<String> = vocab.into_iter().collect();
    let tf: Vec<Vec<f64>> = docs
        .iter()
        .map(|d| {
            let toks: Vec<String> = d.sentences.iter().flatten().map(|x| x.to_lowercase()).collect();
            vocab.iter().map(|v| toks.iter().filter(|x| *x == v).count() as f64).collect()
        })
        .collect();
    let n = docs.len() as f64;
    let idf: Vec<f64> =
        (0..vocab.len()).map(|j| (n / tf.iter().filter(|row| row[j] > 0.0).count() as f64).ln()).collect();
    let vecs: Vec<Vec<f64>> = tf
        .iter()
        .map(|row| {
            let v: Vec<f64> = row.iter().zip(&idf).map(|(a, b)| a * b).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| if norm > 0.0 { x / norm } else { 0.0 }).collect()
        })
        .collect();
    let ents = |d: &Document| d.mentions.iter().map(|m| m.entity.clone()).collect::<BTreeSet<_>>();
    let mut cands = Vec::new();
    for (i, a) in docs.iter().enumerate() {
        for (j, b) in docs.iter().enumerate() {
            if i == j || a.count_mentions(s) == 0 || b.count_mentions(t) == 0 {
                continue;
            }
            let shared = ents(a).intersection(&ents(b)).count();
            if shared == 0 {
                continue;
            }
            cands.push(SlowScore {
                pair: (a.doc_id.clone(), b.doc_id.clone()),
                count: (a.count_mentions(s) + b.count_mentions(t)) as f64,
                shared: shared as f64,
                sim: vecs[i].iter().zip(&vecs[j]).map(|(x, y)| x * y).sum(),
            });
        }
    }
    let norm = |f: &dyn Fn(&SlowScore) -> f64| -> Vec<f64> {
        let vals: Vec<f64> = cands.iter().map(f).collect();
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        vals.iter().map(|v| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 }).collect()
    };
    let (c, sh, si) = (norm(&|x| x.count), norm(&|x| x.shared), norm(&|x| x.sim));
    let mut out: Vec<((String, String), f64, f64)> = cands
        .iter()
        .enumerate()
        .map(|(k, x)| (x.pair.clone(), w.entity_count * c[k] + w.shared_entities * sh[k] + w.tfidf * si[k], x.sim))
        .collect();
    out.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    out
}

pub fn retrieval() -> Verdict {
    let mut total_pairs = 0;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(30_000 + seed);
        let s = EntityId::new("S");
        let t = EntityId::new("T");
        let mut pool: Vec<EntityId> = (0..6).map(|i| EntityId(format!("E{i}"))).collect();
        pool.extend([s.clone(), t.clone()]);
        let docs: Vec<Document> = (0..20)
            .map(|i| {
                let anchor = pool.choose(&mut rng).unwrap().clone();
                let n = rng.random_range(1..=4);
                document(&mut rng, format!("doc{i:02}"), n, &pool, &anchor)
            })
            .collect();
        let weights = ScoreWeights {
            entity_count: rng.random_range(0.0..2.0),
            shared_entities: rng.random_range(0.0..2.0),
            tfidf: rng.random_range(0.0..2.0),
        };
        let index = build_index(docs.clone());
        let cfg = RetrievalConfig { top_k: rng.random_range(1..=16), weights };
        let got = rank_paths(&index, &s, &t, &cfg);
        let want = slow_ranking(&docs, &s, &t, weights);
        if got.len() != want.len() {
            return Verdict::check(false, format!("seed {seed}: {} candidates, oracle {}", got.len(), want.len()));
        }
        // Same pairs with the same scores, and position by position the same combined value,
        // so the orders can differ only inside groups tied to within 1e-9.
        let oracle: BTreeMap<&(String, String), (f64, f64)> = want.iter().map(|(p, c, s)| (p, (*c, *s))).collect();
        for (i, g) in got.iter().enumerate() {
            let Some(&(combined, sim)) = oracle.get(&(g.source_doc.clone(), g.target_doc.clone())) else {
                return Verdict::check(false, format!("seed {seed}: {g:?} is not an oracle candidate"));
            };
            if (g.combined - combined).abs() > 1e-9 || (g.tfidf_sim - sim).abs() > 1e-9 {
                return Verdict::check(
                    false,
                    format!("seed {seed}: {g:?} vs oracle combined {combined}, similarity {sim}"),
                );
            }
            let (pair, at_rank, _) = &want[i];
            if (g.combined - at_rank).abs() > 1e-9 {
                return Verdict::check(false, format!("seed {seed}: rank {i} holds {g:?}, oracle puts {pair:?} there"));
            }
        }
        let top = retrieve_paths(&index, &s, &t, &cfg);
        if top.len() != got.len().min(cfg.top_k) || top[..] != got[..top.len()] {
            return Verdict::check(false, format!("seed {seed}: top-{} is not a prefix of the ranking", cfg.top_k));
        }
        total_pairs += got.len();
    }
    Verdict::check(true, format!("50 corpora, {total_pairs} ranked pairs agree; every top-k is a prefix"))
}
