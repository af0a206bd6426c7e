use crate::error::{Error, Result};

/// Label decision for a probability: positive iff `score >= 0.5`.
pub fn decide(score: f64) -> u8 {
    u8::from(score >= 0.5)
}

fn class_counts(labels: &[u8]) -> Result<(usize, usize)> {
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::MetricUndefined(format!("label {bad} is not binary")));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    Ok((pos, labels.len() - pos))
}

fn check_lengths(labels: &[u8], n: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::dim(format!("{} labels for {n} predictions", labels.len())));
    }
    Ok(())
}

fn both_classes(labels: &[u8]) -> Result<(usize, usize)> {
    let (pos, neg) = class_counts(labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::MetricUndefined(format!("need both classes, got {pos} positive and {neg} negative")));
    }
    Ok((pos, neg))
}

/// `(TPR + TNR) / 2` for hard 0/1 predictions.
pub fn balanced_accuracy(labels: &[u8], predictions: &[u8]) -> Result<f64> {
    check_lengths(labels, predictions.len())?;
    let (pos, neg) = both_classes(labels)?;
    let mut tp = 0;
    let mut tn = 0;
    for (&y, &p) in labels.iter().zip(predictions) {
        match (y, p) {
            (1, 1) => tp += 1,
            (0, 0) => tn += 1,
            _ => {}
        }
    }
    Ok((tp as f64 / pos as f64 + tn as f64 / neg as f64) / 2.0)
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Computed from mid-ranks.
pub fn roc_auc(labels: &[u8], scores: &[f64]) -> Result<f64> {
    check_lengths(labels, scores.len())?;
    let (pos, neg) = both_classes(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64 * mid;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

/// Average precision: mean over positives of the precision of the
/// descending-score prefix ending at that positive. Equal scores keep their
/// input order, so callers pass items sorted by id.
pub fn pr_auc(labels: &[u8], scores: &[f64]) -> Result<f64> {
    check_lengths(labels, scores.len())?;
    let (pos, _) = class_counts(labels)?;
    if pos == 0 {
        return Err(Error::MetricUndefined("average precision needs a positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0;
    let mut total = 0.0;
    for (k, &i) in order.iter().enumerate() {
        if labels[i] == 1 {
            hits += 1;
            total += hits as f64 / (k + 1) as f64;
        }
    }
    Ok(total / pos as f64)
}
