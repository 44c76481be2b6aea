//! Fixed fixtures with known answers.

use std::collections::BTreeMap;
use std::process::Command;

use xdocre::autograd::{Gradients, Tape};
use xdocre::classifier::{bag_loss, LossVariant};
use xdocre::context::ContextGenerator;
use xdocre::corpus::{parse_bags, RelationVocabulary};
use xdocre::kg::{KnowledgeGraph, LoadOptions, Triple};
use xdocre::model::{Model, PipelineConfig, PreparedBag};

use crate::Verdict;

const CHAIN: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures/context_chain");

pub fn context_chain() -> Verdict {
    let out = Command::new(env!("CARGO_BIN_EXE_xdocre"))
        .args(["context", "--kg", CHAIN, "--source", "Q6196505", "--target", "Q1140152", "--mode", "cc", "--hops", "5"])
        .output()
        .expect("run the CLI");
    let want = concat!(
        r#"["instance of","Human","model item","Douglas Adams","country of citizenship","#,
        r#""United Kingdom","replaces","United Kingdom of Great Britain and Ireland","followed by"]"#,
        "\n"
    );
    let got = String::from_utf8_lossy(&out.stdout);
    Verdict::check(
        out.status.success() && got == want,
        if got == want { "9 tokens, byte-exact".to_string() } else { format!("got {got:?}") },
    )
}

pub fn loss_analytic() -> Verdict {
    let got = bag_loss(&[0.0, 0.0], &[true, false], 0.0, LossVariant::Threshold);
    let want = 2.0 * std::f64::consts::LN_2;
    Verdict::check((got - want).abs() <= 1e-9, format!("loss {got:.12}, expected {want:.12}"))
}

const TOY_BAG: &str = r#"{"bag_id":"toy","source":"S","target":"T","gold_relations":["R2"],"paths":[
 {"path_id":"toy-p0",
  "source_doc":{"doc_id":"d0","sentences":[["sam","met","bob","downtown"],["rain","fell"]],
   "mentions":[{"entity":"S","sentence_index":0,"token_start":0,"token_end":1},{"entity":"B","sentence_index":0,"token_start":2,"token_end":3}]},
  "target_doc":{"doc_id":"d1","sentences":[["bob","hired","tia","later"]],
   "mentions":[{"entity":"B","sentence_index":0,"token_start":0,"token_end":1},{"entity":"T","sentence_index":0,"token_start":2,"token_end":3}]}},
 {"path_id":"toy-p1",
  "source_doc":{"doc_id":"d2","sentences":[["the","elder","sam","wrote"]],
   "mentions":[{"entity":"S","sentence_index":0,"token_start":1,"token_end":3}]},
  "target_doc":{"doc_id":"d3","sentences":[["tia","thanked","bob","twice"]],
   "mentions":[{"entity":"T","sentence_index":0,"token_start":0,"token_end":1},{"entity":"B","sentence_index":0,"token_start":2,"token_end":3}]}}]}"#;

/// Relative error floor: differences below it are compared absolutely.
const FLOOR: f64 = 1e-6;
const STEP: f64 = 1e-4;

fn loss_value(model: &Model, bag: &PreparedBag) -> f64 {
    let mut t = Tape::new(&model.store);
    let (l, _) = model.loss(&mut t, bag).unwrap();
    t.value(l)[[0, 0]]
}

/// Worst relative error per parameter group, and how many entries had a nonzero gradient.
fn check_variant(variant: LossVariant) -> BTreeMap<String, (f64, usize)> {
    let vocab = RelationVocabulary::new(vec!["R1".into(), "R2".into(), "R3".into()]).unwrap();
    let bag = parse_bags(&TOY_BAG.replace('\n', ""), &vocab).unwrap().remove(0);
    let labels =
        [("S", "Sam"), ("T", "Tia"), ("B", "Bob"), ("P1", "employs")].map(|(a, b)| (a.to_string(), b.to_string()));
    let g = KnowledgeGraph::from_parts([Triple::new("S", "P1", "B")], labels, [], LoadOptions::default()).unwrap();

    let mut cfg = PipelineConfig::default();
    cfg.encoder.embed_dim = 8;
    cfg.encoder.num_layers = 1;
    cfg.encoder.num_heads = 2;
    cfg.encoder.vocab_hash_buckets = 64;
    cfg.encoder.max_positions = 64;
    cfg.filter.token_budget = 64;
    cfg.reasoner.num_layers = 1;
    cfg.reasoner.num_heads = 2;
    cfg.classifier.loss = variant;
    let mut model = Model::new(cfg, vocab, 11).unwrap();
    let prepared = model.prepare(&bag, &ContextGenerator::new(&g)).unwrap();
    assert_eq!(prepared.entities.len(), 3);

    let mut grads = Gradients::new(model.store.len());
    {
        let mut t = Tape::new(&model.store);
        let (l, _) = model.loss(&mut t, &prepared).unwrap();
        t.backward(l, &mut grads);
    }
    let mut report: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let name = model.store.name(id).to_string();
        let group = name.split('.').take(2).collect::<Vec<_>>().join(".");
        let shape = model.store.get(id).dim();
        let analytic = grads.dense_for(id, shape);
        let entry = report.entry(group).or_insert((0.0, 0));
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let orig = model.store.get(id)[[r, c]];
                model.store.get_mut(id)[[r, c]] = orig + STEP;
                let up = loss_value(&model, &prepared);
                model.store.get_mut(id)[[r, c]] = orig - STEP;
                let down = loss_value(&model, &prepared);
                model.store.get_mut(id)[[r, c]] = orig;
                let numeric = (up - down) / (2.0 * STEP);
                let a = analytic[[r, c]];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
                entry.0 = entry.0.max(rel);
                entry.1 += usize::from(a.abs() > 1e-9);
            }
        }
    }
    report
}

pub fn gradient_check() -> Verdict {
    let mut passed = true;
    let mut parts = Vec::new();
    for variant in [LossVariant::Threshold, LossVariant::Literal] {
        let report = check_variant(variant);
        let worst = report.values().map(|v| v.0).fold(0.0, f64::max);
        let dead: Vec<&String> = report.iter().filter(|(_, v)| v.1 == 0).map(|(k, _)| k).collect();
        passed &= worst <= 1e-3 && dead.is_empty();
        let (worst_group, _) = report.iter().max_by(|a, b| a.1 .0.total_cmp(&b.1 .0)).unwrap();
        parts.push(format!(
            "{variant:?}: max rel err {worst:.2e} ({worst_group}) over {} groups{}",
            report.len(),
            if dead.is_empty() { String::new() } else { format!(", zero gradient in {dead:?}") }
        ));
    }
    Verdict::check(passed, format!("{}; step {STEP}, floor {FLOOR}", parts.join("; ")))
}
