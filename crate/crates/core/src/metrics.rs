//! Ranking and calibration metrics.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Mean binary cross-entropy. Probabilities must lie strictly inside (0, 1).
pub fn bce_loss(p: &[f64], y: &[u8]) -> Result<f64> {
    if p.len() != y.len() {
        return Err(Error::dim("bce_loss", format!("{} predictions, {} labels", p.len(), y.len())));
    }
    if p.is_empty() {
        return Err(Error::invalid("bce_loss of an empty set"));
    }
    let mut total = 0.0;
    for (&pi, &yi) in p.iter().zip(y) {
        if !(pi > 0.0 && pi < 1.0) {
            return Err(Error::invalid(format!("probability {pi} outside (0, 1)")));
        }
        total -= if yi == 1 { pi.ln() } else { (1.0 - pi).ln() };
    }
    Ok(total / p.len() as f64)
}

/// ROC AUC via the rank-sum statistic with midranks for ties.
///
/// Fails when either class is absent.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dim("auc", format!("{} scores, {} labels", scores.len(), labels.len())));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid("auc needs both a positive and a negative"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mid = (i + j) as f64 / 2.0 + 1.0;
        let pos = order[i..=j].iter().filter(|&&k| labels[k] == 1).count();
        rank_sum_pos += mid * pos as f64;
        i = j + 1;
    }
    let (np, nn) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn))
}

/// Impression-weighted mean of per-user AUC over users with both classes.
pub fn gauc(users: &[u32], scores: &[f64], labels: &[u8]) -> Result<f64> {
    if users.len() != scores.len() || scores.len() != labels.len() {
        return Err(Error::dim("gauc", "users, scores and labels differ in length"));
    }
    let mut by_user: BTreeMap<u32, (Vec<f64>, Vec<u8>)> = BTreeMap::new();
    for ((&u, &s), &l) in users.iter().zip(scores).zip(labels) {
        let e = by_user.entry(u).or_default();
        e.0.push(s);
        e.1.push(l);
    }
    // running weighted mean, exact when a single user contributes
    let (mut mean, mut weight) = (0.0, 0.0);
    for (s, l) in by_user.values() {
        if let Ok(a) = auc(s, l) {
            weight += s.len() as f64;
            mean += (a - mean) * (s.len() as f64 / weight);
        }
    }
    if weight > 0.0 {
        Ok(mean)
    } else {
        Err(Error::invalid("gauc: no user has both classes"))
    }
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
