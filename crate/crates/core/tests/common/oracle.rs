//! Brute-force reference metrics, written independently of the library.

use rand::Rng;

pub struct Instance {
    pub probs: Vec<f64>,
    pub k: usize,
    pub labels: Vec<usize>,
    pub subjects: Vec<u32>,
}

/// Random classifier output with frequent score ties.
pub fn random_instance(rng: &mut impl Rng, max_n: usize, max_k: usize) -> Instance {
    let k = rng.random_range(2..=max_k);
    let n = rng.random_range(2..=max_n);
    let mut probs = Vec::with_capacity(n * k);
    for _ in 0..n {
        let w: Vec<f64> = (0..k).map(|_| rng.random_range(0..5) as f64 + 0.5).collect();
        let z: f64 = w.iter().sum();
        probs.extend(w.iter().map(|x| x / z));
    }
    let labels = (0..n).map(|_| rng.random_range(0..k)).collect();
    let subjects = (0..n).map(|_| rng.random_range(1..=4)).collect();
    Instance { probs, k, labels, subjects }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for c in 1..row.len() {
        if row[c] > row[best] {
            best = c;
        }
    }
    best
}

pub fn accuracy(probs: &[f64], k: usize, labels: &[usize]) -> f64 {
    let mut hits = 0;
    for (i, &y) in labels.iter().enumerate() {
        if argmax(&probs[i * k..(i + 1) * k]) == y {
            hits += 1;
        }
    }
    hits as f64 / labels.len() as f64
}

pub fn macro_f1(probs: &[f64], k: usize, labels: &[usize]) -> f64 {
    let pred: Vec<usize> = (0..labels.len()).map(|i| argmax(&probs[i * k..(i + 1) * k])).collect();
    let mut sum = 0.0;
    for c in 0..k {
        let tp = (0..labels.len()).filter(|&i| pred[i] == c && labels[i] == c).count() as f64;
        let predicted = pred.iter().filter(|&&p| p == c).count() as f64;
        let actual = labels.iter().filter(|&&y| y == c).count() as f64;
        if tp > 0.0 {
            let p = tp / predicted;
            let r = tp / actual;
            sum += 2.0 * p * r / (p + r);
        }
    }
    sum / k as f64
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn pairwise_auroc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if positive[i] && !positive[j] {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    (pairs > 0.0).then(|| wins / pairs)
}

pub fn macro_auroc(probs: &[f64], k: usize, labels: &[usize]) -> Option<f64> {
    let n = labels.len();
    let per: Vec<f64> = (0..k)
        .filter_map(|c| {
            let scores: Vec<f64> = (0..n).map(|i| probs[i * k + c]).collect();
            let pos: Vec<bool> = labels.iter().map(|&y| y == c).collect();
            pairwise_auroc(&scores, &pos)
        })
        .collect();
    (!per.is_empty()).then(|| per.iter().sum::<f64>() / per.len() as f64)
}

pub fn davies_bouldin(x: &[f64], dim: usize, labels: &[usize]) -> f64 {
    let mut clusters: Vec<usize> = labels.to_vec();
    clusters.sort();
    clusters.dedup();
    let dist = |a: &[f64], b: &[f64]| -> f64 {
        let mut s = 0.0;
        for d in 0..dim {
            s += (a[d] - b[d]).powi(2);
        }
        s.sqrt()
    };
    let mut cents = Vec::new();
    let mut spread = Vec::new();
    for &c in &clusters {
        let rows: Vec<&[f64]> = (0..labels.len())
            .filter(|&i| labels[i] == c)
            .map(|i| &x[i * dim..(i + 1) * dim])
            .collect();
        let cent: Vec<f64> = (0..dim)
            .map(|d| rows.iter().map(|r| r[d]).sum::<f64>() / rows.len() as f64)
            .collect();
        spread.push(rows.iter().map(|r| dist(r, &cent)).sum::<f64>() / rows.len() as f64);
        cents.push(cent);
    }
    let m = clusters.len();
    let mut db = 0.0;
    for i in 0..m {
        let mut r = 0.0f64;
        for j in 0..m {
            if i != j {
                r = r.max((spread[i] + spread[j]) / dist(&cents[i], &cents[j]));
            }
        }
        db += r;
    }
    db / m as f64
}
