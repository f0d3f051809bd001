//! Ranking metrics over `(score, label)` pairs, computed from integer
//! counts over descending unique thresholds.

use crate::error::{Error, Result};

/// Positive/negative counts per unique score, highest score first.
fn tie_groups(scores: &[f64], labels: &[bool]) -> Result<(Vec<(u64, u64)>, u64, u64)> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::param("scores", format!("score {i} is NaN")));
    }
    let pos = labels.iter().filter(|l| **l).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "need both classes, got {pos} positive and {neg} negative"
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|a, b| scores[*b].total_cmp(&scores[*a]));
    let mut groups: Vec<(u64, u64)> = Vec::new();
    let mut last: Option<f64> = None;
    for i in idx {
        if last != Some(scores[i]) {
            groups.push((0, 0));
            last = Some(scores[i]);
        }
        let g = groups.last_mut().expect("pushed");
        if labels[i] {
            g.0 += 1;
        } else {
            g.1 += 1;
        }
    }
    Ok((groups, pos, neg))
}

/// Area under the ROC curve: the probability that a random positive
/// outscores a random negative, ties counting one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (groups, pos, neg) = tie_groups(scores, labels)?;
    // Twice the Mann–Whitney U statistic, exact in integers.
    let mut neg_above = 0u64;
    let mut twice_u = 0u64;
    for (p, n) in groups.into_iter().rev() {
        twice_u += p * (2 * neg_above + n);
        neg_above += n;
    }
    Ok(twice_u as f64 / (2 * pos * neg) as f64)
}

/// Best F1 over thresholds at the observed scores (predict positive when
/// `score >= threshold`).
pub fn f1_max(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (groups, pos, _) = tie_groups(scores, labels)?;
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut best = 0f64;
    for (p, n) in groups {
        tp += p;
        fp += n;
        best = best.max(f1(tp, fp, pos));
    }
    Ok(best)
}

/// `2·TP / (2·TP + FP + FN)`.
pub fn f1(tp: u64, fp: u64, pos: u64) -> f64 {
    let denom = 2 * tp + fp + (pos - tp);
    if denom == 0 {
        0.0
    } else {
        (2 * tp) as f64 / denom as f64
    }
}

/// Step-interpolated average precision: `Σ (R_i − R_{i−1})·P_i` over
/// descending unique thresholds.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (groups, pos, _) = tie_groups(scores, labels)?;
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut ap = 0f64;
    for (p, n) in groups {
        tp += p;
        fp += n;
        if p > 0 {
            ap += ap_term(p, tp, fp, pos);
        }
    }
    Ok(ap)
}

/// One summand of [`average_precision`]: recall gain times precision.
pub fn ap_term(gained: u64, tp: u64, fp: u64, pos: u64) -> f64 {
    (gained as f64 / pos as f64) * (tp as f64 / (tp + fp) as f64)
}
