//! Binary classification metrics.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("no samples")]
    Empty,
    #[error("AUROC is undefined: {positives} positive and {negatives} negative labels")]
    SingleClass { positives: usize, negatives: usize },
    #[error("label {0} is not 0 or 1")]
    BadLabel(u8),
    #[error("score at index {0} is NaN")]
    NaN(usize),
}

fn check(scores: &[f64], labels: &[u8]) -> Result<(), MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(MetricError::BadLabel(bad));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(MetricError::NaN(i));
    }
    Ok(())
}

/// Area under the ROC curve via the Mann-Whitney rank-sum statistic, with
/// tied scores sharing their average rank.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64, MetricError> {
    check(scores, labels)?;
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricError::SingleClass { positives, negatives });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        // total_cmp keeps -0.0 and 0.0 apart; treat them as tied
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j share their mean
        let avg = (i + 1 + j) as f64 / 2.0;
        let pos_in_run = order[i..j].iter().filter(|&&k| labels[k] == 1).count();
        rank_sum += avg * pos_in_run as f64;
        i = j;
    }
    let p = positives as f64;
    let u = rank_sum - p * (p + 1.0) / 2.0;
    Ok(u / (p * negatives as f64))
}

/// Fraction of samples where `score >= threshold` agrees with the label.
pub fn accuracy(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64, MetricError> {
    check(scores, labels)?;
    if scores.is_empty() {
        return Err(MetricError::Empty);
    }
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(s, l)| (**s >= threshold) == (**l == 1))
        .count();
    Ok(correct as f64 / scores.len() as f64)
}
