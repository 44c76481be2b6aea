//! Micro-F1 over predicted label sets and precision-recall AUC.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn add_sets(&mut self, predicted: &BTreeSet<String>, gold: &BTreeSet<String>) {
        self.tp += predicted.intersection(gold).count();
        self.fp += predicted.difference(gold).count();
        self.fn_ += gold.difference(predicted).count();
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn check_aligned(predicted: usize, gold: usize) -> Result<()> {
    if predicted != gold {
        return Err(Error::Metric(format!("{predicted} predictions for {gold} gold bags")));
    }
    Ok(())
}

pub fn confusion(predicted: &[BTreeSet<String>], gold: &[BTreeSet<String>]) -> Result<Confusion> {
    check_aligned(predicted.len(), gold.len())?;
    let mut c = Confusion::default();
    for (p, g) in predicted.iter().zip(gold) {
        c.add_sets(p, g);
    }
    Ok(c)
}

/// Micro-F1 over positive relation decisions; an empty set is NA.
pub fn compute_f1(predicted: &[BTreeSet<String>], gold: &[BTreeSet<String>]) -> Result<f64> {
    Ok(confusion(predicted, gold)?.f1())
}

pub fn per_relation(
    predicted: &[BTreeSet<String>],
    gold: &[BTreeSet<String>],
    labels: &[String],
) -> Result<BTreeMap<String, Confusion>> {
    check_aligned(predicted.len(), gold.len())?;
    let mut out: BTreeMap<String, Confusion> = labels.iter().map(|l| (l.clone(), Confusion::default())).collect();
    for (p, g) in predicted.iter().zip(gold) {
        for (label, c) in out.iter_mut() {
            match (p.contains(label), g.contains(label)) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => {}
            }
        }
    }
    Ok(out)
}

/// Area under the precision-recall curve: a descending sweep over score groups (ties
/// form one step), summing precision × recall gain.
pub fn compute_auc(instances: &[(f64, bool)]) -> Result<f64> {
    let positives = instances.iter().filter(|(_, y)| *y).count();
    if positives == 0 || positives == instances.len() {
        return Err(Error::Metric("AUC needs at least one positive and one negative instance".into()));
    }
    if instances.iter().any(|(s, _)| s.is_nan()) {
        return Err(Error::Metric("NaN score".into()));
    }
    let mut sorted = instances.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut seen) = (0usize, 0usize);
    let (mut area, mut prev_recall) = (0.0, 0.0);
    let mut i = 0;
    while i < sorted.len() {
        let score = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == score {
            tp += usize::from(sorted[i].1);
            seen += 1;
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        area += (recall - prev_recall) * (tp as f64 / seen as f64);
        prev_recall = recall;
    }
    Ok(area)
}
