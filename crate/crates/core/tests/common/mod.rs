//! Brute-force reference implementations shared by integration tests and the
//! acceptance runner.

#![allow(dead_code)]

use rand::Rng;

/// Probability that a random positive outscores a random negative, ties
/// counting one half, by enumerating every pair.
pub fn pairwise_auroc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] == 0 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Average precision computed per positive by counting, without sorting.
/// Items rank by descending score, then ascending index.
pub fn exhaustive_ap(scores: &[f64], labels: &[u8]) -> f64 {
    let ahead = |j: usize, i: usize| scores[j] > scores[i] || (scores[j] == scores[i] && j <= i);
    let mut sum = 0.0;
    let mut positives = 0usize;
    for i in 0..scores.len() {
        if labels[i] == 0 {
            continue;
        }
        positives += 1;
        let rank = (0..scores.len()).filter(|&j| ahead(j, i)).count();
        let hits = (0..scores.len())
            .filter(|&j| labels[j] != 0 && ahead(j, i))
            .count();
        sum += hits as f64 / rank as f64;
    }
    sum / positives as f64
}

/// Per-item agreement statistics for `k` classes.
pub struct ItemCounts {
    pub accuracy: f64,
    pub kappa: f64,
    /// `(precision, recall, f1)` with 0 for an undefined ratio.
    pub per_class: Vec<(f64, f64, f64)>,
    pub macro_f1: f64,
}

pub fn item_counts(truth: &[u8], pred: &[u8], k: usize) -> ItemCounts {
    let n = truth.len() as f64;
    let agree = truth.iter().zip(pred).filter(|(t, p)| t == p).count() as f64;
    let mut p_e = 0.0;
    let mut per_class = Vec::new();
    for c in 0..k as u8 {
        let in_truth = truth.iter().filter(|&&t| t == c).count() as f64;
        let in_pred = pred.iter().filter(|&&p| p == c).count() as f64;
        let hits = truth
            .iter()
            .zip(pred)
            .filter(|(&t, &p)| t == c && p == c)
            .count() as f64;
        p_e += (in_truth / n) * (in_pred / n);
        let precision = if in_pred > 0.0 { hits / in_pred } else { 0.0 };
        let recall = if in_truth > 0.0 { hits / in_truth } else { 0.0 };
        let f1 = if hits > 0.0 {
            2.0 * hits / (in_truth + in_pred)
        } else {
            0.0
        };
        per_class.push((precision, recall, f1));
    }
    let p_o = agree / n;
    ItemCounts {
        accuracy: p_o,
        kappa: (p_o - p_e) / (1.0 - p_e),
        macro_f1: per_class.iter().map(|c| c.2).sum::<f64>() / k as f64,
        per_class,
    }
}

/// Scores with deliberate ties (drawn from a coarse grid half the time) and
/// at least one label of each kind.
pub fn random_scored<R: Rng>(rng: &mut R, max_len: usize) -> (Vec<f64>, Vec<u8>) {
    let n = rng.gen_range(2..=max_len);
    let coarse = rng.gen_bool(0.5);
    let rate = rng.gen_range(0.05..0.6);
    let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_bool(rate) as u8).collect();
    labels[0] = 1;
    labels[1] = 0;
    let scores = labels
        .iter()
        .map(|&l| {
            let s: f64 = rng.gen::<f64>() + 0.3 * l as f64;
            if coarse {
                (s * 8.0).round() / 8.0
            } else {
                s
            }
        })
        .collect();
    (scores, labels)
}

/// A random labelling over `k` classes where the prediction copies the truth
/// with probability `skill`.
pub fn random_labelling<R: Rng>(rng: &mut R, k: usize, max_len: usize) -> (Vec<u8>, Vec<u8>) {
    let n = rng.gen_range(1..=max_len);
    let skill = rng.gen_range(0.0..1.0);
    let truth: Vec<u8> = (0..n).map(|_| rng.gen_range(0..k as u8)).collect();
    let pred = truth
        .iter()
        .map(|&t| {
            if rng.gen_bool(skill) {
                t
            } else {
                rng.gen_range(0..k as u8)
            }
        })
        .collect();
    (truth, pred)
}
