//! Binary ranking metrics over scored labels.
//!
//! Ties are always handled as blocks: every item sharing a score is admitted
//! at the same threshold. ROC-AUC is the Mann-Whitney statistic with average
//! ranks, which equals the trapezoidal area under the tie-grouped ROC curve.
//! PR-AUC is average precision evaluated at the end of every tie block.

use std::cmp::Ordering;

use serde::Serialize;

use crate::error::{Mc3Error, Result};

/// Score of one sample together with its binary label.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ScoredLabel {
    pub score: f64,
    pub label: bool,
}

impl ScoredLabel {
    pub fn new(score: f64, label: bool) -> Self {
        ScoredLabel { score, label }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
}

fn count_labels(scored: &[ScoredLabel]) -> Result<(usize, usize)> {
    let mut pos = 0;
    for s in scored {
        if !s.score.is_finite() {
            return Err(Mc3Error::NonFinite("score".into()));
        }
        pos += s.label as usize;
    }
    Ok((pos, scored.len() - pos))
}

/// (positives, negatives) per tie block, highest score first.
fn descending_blocks(scored: &[ScoredLabel]) -> Vec<(f64, usize, usize)> {
    let mut sorted: Vec<&ScoredLabel> = scored.iter().collect();
    sorted.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal));
    let mut blocks: Vec<(f64, usize, usize)> = Vec::new();
    for s in sorted {
        match blocks.last_mut() {
            Some((t, p, n)) if *t == s.score => {
                if s.label {
                    *p += 1
                } else {
                    *n += 1
                }
            }
            _ => blocks.push((s.score, s.label as usize, (!s.label) as usize)),
        }
    }
    blocks
}

/// Area under the ROC curve. Needs at least one positive and one negative.
pub fn roc_auc(scored: &[ScoredLabel]) -> Result<f64> {
    let (pos, neg) = count_labels(scored)?;
    if pos == 0 || neg == 0 {
        return Err(Mc3Error::DegenerateLabels(format!(
            "ROC-AUC needs both classes, got {pos} positive and {neg} negative"
        )));
    }
    // Walk blocks from the lowest score: each positive beats every negative
    // already seen and ties half of the negatives in its own block.
    let mut below_neg = 0usize;
    let mut wins = 0.0;
    for (_, p, n) in descending_blocks(scored).into_iter().rev() {
        wins += p as f64 * (below_neg as f64 + 0.5 * n as f64);
        below_neg += n;
    }
    Ok(wins / (pos as f64 * neg as f64))
}

/// Average precision. Needs at least one positive.
pub fn pr_auc(scored: &[ScoredLabel]) -> Result<f64> {
    let (pos, _) = count_labels(scored)?;
    if pos == 0 {
        return Err(Mc3Error::DegenerateLabels("PR-AUC needs at least one positive".into()));
    }
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut ap = 0.0;
    for (_, p, n) in descending_blocks(scored) {
        tp += p;
        seen += p + n;
        if p > 0 {
            ap += p as f64 * tp as f64 / seen as f64;
        }
    }
    Ok(ap / pos as f64)
}

/// ROC curve points, one per tie block, starting at the origin.
pub fn roc_curve(scored: &[ScoredLabel]) -> Result<Vec<RocPoint>> {
    let (pos, neg) = count_labels(scored)?;
    if pos == 0 || neg == 0 {
        return Err(Mc3Error::DegenerateLabels("ROC curve needs both classes".into()));
    }
    let mut out = vec![RocPoint {
        threshold: f64::INFINITY,
        tpr: 0.0,
        fpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    for (t, p, n) in descending_blocks(scored) {
        tp += p;
        fp += n;
        out.push(RocPoint {
            threshold: t,
            tpr: tp as f64 / pos as f64,
            fpr: fp as f64 / neg as f64,
        });
    }
    Ok(out)
}

/// Precision-recall points, one per tie block.
pub fn pr_curve(scored: &[ScoredLabel]) -> Result<Vec<PrPoint>> {
    let (pos, _) = count_labels(scored)?;
    if pos == 0 {
        return Err(Mc3Error::DegenerateLabels("PR curve needs at least one positive".into()));
    }
    let (mut tp, mut seen) = (0usize, 0usize);
    Ok(descending_blocks(scored)
        .into_iter()
        .map(|(t, p, n)| {
            tp += p;
            seen += p + n;
            PrPoint {
                threshold: t,
                recall: tp as f64 / pos as f64,
                precision: tp as f64 / seen as f64,
            }
        })
        .collect())
}
