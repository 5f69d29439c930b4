//! Ranking metrics: binary AUROC (Mann–Whitney, ties count one half), macro
//! one-vs-rest AUROC, and the two-sample KS statistic.

use crate::error::{Error, Result};

fn check_binary(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::Contract("binary labels must be 0 or 1".into()));
    }
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "need both classes, got {} positives and {} negatives",
            pos, neg
        )));
    }
    Ok((pos, neg))
}

/// Indices sorted by score, grouped into runs of equal scores.
fn tie_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in idx {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Probability that a random positive outranks a random negative.
pub fn auroc_binary(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check_binary(scores, labels)?;
    // sum over positives of (#negatives below + half #negatives tied)
    let mut below = 0usize;
    let mut wins = 0.0f64;
    for g in tie_groups(scores) {
        let p = g.iter().filter(|&&i| labels[i] == 1).count();
        let n = g.len() - p;
        wins += p as f64 * (below as f64 + 0.5 * n as f64);
        below += n;
    }
    Ok(wins / (pos as f64 * neg as f64))
}

/// Unweighted mean of one-vs-rest AUROCs over classes present in `labels`.
///
/// `scores[i][c]` is sample `i`'s score for class `c`.
pub fn auroc_macro(scores: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} score rows but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let classes = scores.first().map(|r| r.len()).unwrap_or(0);
    if scores.iter().any(|r| r.len() != classes) {
        return Err(Error::Contract("ragged score matrix".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Bounds {
            what: "class label",
            index: bad,
            len: classes,
        });
    }
    let mut present = vec![0usize; classes];
    labels.iter().for_each(|&l| present[l] += 1);
    let mut total = 0.0;
    let mut used = 0;
    for c in 0..classes {
        if present[c] == 0 || present[c] == labels.len() {
            continue;
        }
        let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        let y: Vec<u8> = labels.iter().map(|&l| (l == c) as u8).collect();
        total += auroc_binary(&s, &y)?;
        used += 1;
    }
    if used == 0 {
        return Err(Error::UndefinedMetric(
            "macro AUROC needs at least two classes present".into(),
        ));
    }
    Ok(total / used as f64)
}

/// `max_t |F_pos(t) - F_neg(t)|` over all score thresholds.
pub fn ks_score(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check_binary(scores, labels)?;
    let mut cp = 0usize;
    let mut cn = 0usize;
    let mut best = 0.0f64;
    for g in tie_groups(scores) {
        let p = g.iter().filter(|&&i| labels[i] == 1).count();
        cp += p;
        cn += g.len() - p;
        let gap = (cp as f64 / pos as f64 - cn as f64 / neg as f64).abs();
        best = best.max(gap);
    }
    Ok(best)
}
