//! Classification metrics, cluster separability and feature export.
//!
//! Everything is computed in `f64`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::named_rng;
use crate::tensor::{Scalar, Tensor};

/// Class probabilities with true labels and subject ids.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    probs: Vec<f64>,
    classes: usize,
    labels: Vec<usize>,
    subjects: Vec<u32>,
}

impl PredictionSet {
    /// `probs` is row-major `N × classes`; rows must sum to 1 within 1e-6.
    pub fn new(probs: Vec<f64>, classes: usize, labels: Vec<usize>, subjects: Vec<u32>) -> Result<Self> {
        let n = labels.len();
        if classes == 0 || probs.len() != n * classes {
            return Err(Error::dim(
                "PredictionSet",
                format!("{} probabilities for {n} samples × {classes} classes", probs.len()),
            ));
        }
        if subjects.len() != n {
            return Err(Error::dim("PredictionSet", format!("{} subject ids for {n} samples", subjects.len())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid("labels", format!("label {l} >= {classes} classes")));
        }
        for (i, row) in probs.chunks(classes).enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 || row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::invalid("probabilities", format!("row {i} sums to {s}")));
            }
        }
        Ok(PredictionSet {
            probs,
            classes,
            labels,
            subjects,
        })
    }

    /// From a `[N, K]` probability tensor of any precision.
    pub fn from_tensor<T: Scalar>(probs: &Tensor<T>, labels: Vec<usize>, subjects: Vec<u32>) -> Result<Self> {
        let &[_, k] = probs.shape() else {
            return Err(Error::dim("PredictionSet", format!("probabilities must be [N, K], got {:?}", probs.shape())));
        };
        Self::new(probs.data().iter().map(|x| x.as_f64()).collect(), k, labels, subjects)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn subjects(&self) -> &[u32] {
        &self.subjects
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.classes..(i + 1) * self.classes]
    }

    /// Argmax per sample, ties to the lowest class index.
    pub fn predictions(&self) -> Vec<usize> {
        (0..self.len()).map(|i| argmax(self.row(i))).collect()
    }

    /// Samples whose index passes `keep`.
    pub fn filter(&self, keep: impl Fn(usize) -> bool) -> Self {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(i)).collect();
        PredictionSet {
            probs: idx.iter().flat_map(|&i| self.row(i).iter().copied()).collect(),
            classes: self.classes,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            subjects: idx.iter().map(|&i| self.subjects[i]).collect(),
        }
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Fraction of samples whose argmax is the true label (0 for an empty set).
pub fn accuracy(preds: &PredictionSet) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    let hits = preds
        .predictions()
        .iter()
        .zip(preds.labels())
        .filter(|(p, y)| p == y)
        .count();
    hits as f64 / preds.len() as f64
}

/// Unweighted mean of per-class F1 over all classes. A class that never
/// occurs in either predictions or truth scores 0.
pub fn macro_f1(preds: &PredictionSet) -> f64 {
    let k = preds.classes();
    let mut tp = vec![0usize; k];
    let mut fp = vec![0usize; k];
    let mut fn_ = vec![0usize; k];
    for (p, &y) in preds.predictions().into_iter().zip(preds.labels()) {
        if p == y {
            tp[y] += 1;
        } else {
            fp[p] += 1;
            fn_[y] += 1;
        }
    }
    let total: f64 = (0..k)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fn_[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum();
    total / k as f64
}

/// Mann–Whitney AUROC of `scores` for `positive` vs the rest, with midranks.
/// `None` if either side is empty.
pub fn binary_auroc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n1 = positive.iter().filter(|&&p| p).count();
    let n0 = positive.len() - n1;
    if n1 == 0 || n0 == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let midrank = (i + j + 2) as f64 / 2.0;
        rank_sum += midrank * order[i..=j].iter().filter(|&&o| positive[o]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n1 * (n1 + 1)) as f64 / 2.0;
    Some(u / (n1 as f64 * n0 as f64))
}

/// Macro one-vs-rest AUROC over classes having both positive and negative
/// samples; the others are skipped with a warning.
pub fn macro_auroc(preds: &PredictionSet) -> Result<f64> {
    let mut sum = 0.0;
    let mut used = 0;
    for c in 0..preds.classes() {
        let scores: Vec<f64> = (0..preds.len()).map(|i| preds.row(i)[c]).collect();
        let positive: Vec<bool> = preds.labels().iter().map(|&y| y == c).collect();
        match binary_auroc(&scores, &positive) {
            Some(a) => {
                sum += a;
                used += 1;
            }
            None => log::warn!("AUROC: class {c} has no positive or no negative samples, skipped"),
        }
    }
    if used == 0 {
        return Err(Error::UndefinedMetric("AUROC: every class is degenerate".into()));
    }
    Ok(sum / used as f64)
}

/// Davies–Bouldin index of `features` (row-major `N × dim`) grouped by
/// `labels`, averaged over the non-empty clusters.
pub fn davies_bouldin(features: &[f64], dim: usize, labels: &[usize]) -> Result<f64> {
    if dim == 0 || features.len() != labels.len() * dim {
        return Err(Error::dim(
            "davies_bouldin",
            format!("{} values for {} samples of width {dim}", features.len(), labels.len()),
        ));
    }
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        members.entry(l).or_default().push(i);
    }
    if members.len() < 2 {
        return Err(Error::UndefinedMetric(format!(
            "Davies–Bouldin needs 2 non-empty clusters, got {}",
            members.len()
        )));
    }
    let row = |i: usize| &features[i * dim..(i + 1) * dim];
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let ids: Vec<usize> = members.keys().copied().collect();
    let mut centroids = Vec::with_capacity(ids.len());
    let mut scatter = Vec::with_capacity(ids.len());
    for idx in members.values() {
        let mut c = vec![0.0; dim];
        for &i in idx {
            for (cj, x) in c.iter_mut().zip(row(i)) {
                *cj += x;
            }
        }
        c.iter_mut().for_each(|v| *v /= idx.len() as f64);
        let s = idx.iter().map(|&i| dist(row(i), &c)).sum::<f64>() / idx.len() as f64;
        centroids.push(c);
        scatter.push(s);
    }
    let m = ids.len();
    let mut total = 0.0;
    for i in 0..m {
        let mut worst = f64::NEG_INFINITY;
        for j in 0..m {
            if i == j {
                continue;
            }
            let d = dist(&centroids[i], &centroids[j]);
            if d == 0.0 {
                return Err(Error::CoincidentCentroids(ids[i.min(j)], ids[i.max(j)]));
            }
            worst = worst.max((scatter[i] + scatter[j]) / d);
        }
        total += worst;
    }
    Ok(total / m as f64)
}

/// Metrics of one subject's windows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectMetrics {
    pub subject_id: u32,
    pub windows: usize,
    pub accuracy: f64,
    pub f1: f64,
    pub auroc: Option<f64>,
}

/// Per-subject metrics and their unweighted means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `"test"` or `"train"`.
    pub split: String,
    pub variant: Option<String>,
    pub fold: Option<usize>,
    pub subjects: Vec<SubjectMetrics>,
    pub accuracy: f64,
    pub f1: f64,
    /// Mean over subjects with a defined AUROC.
    pub auroc: Option<f64>,
    /// Davies–Bouldin index of the pooled pattern features.
    pub dbi: Option<f64>,
}

/// Computes each metric within every subject, then averages over subjects.
pub fn aggregate_per_subject(preds: &PredictionSet) -> Result<EvalReport> {
    if preds.is_empty() {
        return Err(Error::UndefinedMetric("no samples to evaluate".into()));
    }
    let mut ids: Vec<u32> = preds.subjects().to_vec();
    ids.sort_unstable();
    ids.dedup();
    let mut rows = Vec::with_capacity(ids.len());
    for &s in &ids {
        let sub = preds.filter(|i| preds.subjects()[i] == s);
        let distinct = {
            let mut l = sub.labels().to_vec();
            l.sort_unstable();
            l.dedup();
            l.len()
        };
        let auroc = if distinct < 2 {
            log::warn!("subject {s}: fewer than 2 pattern classes, AUROC skipped");
            None
        } else {
            Some(macro_auroc(&sub)?)
        };
        rows.push(SubjectMetrics {
            subject_id: s,
            windows: sub.len(),
            accuracy: accuracy(&sub),
            f1: macro_f1(&sub),
            auroc,
        });
    }
    let n = rows.len() as f64;
    let aurocs: Vec<f64> = rows.iter().filter_map(|r| r.auroc).collect();
    Ok(EvalReport {
        split: "test".into(),
        variant: None,
        fold: None,
        accuracy: rows.iter().map(|r| r.accuracy).sum::<f64>() / n,
        f1: rows.iter().map(|r| r.f1).sum::<f64>() / n,
        auroc: (!aurocs.is_empty()).then(|| aurocs.iter().sum::<f64>() / aurocs.len() as f64),
        dbi: None,
        subjects: rows,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl EvalReport {
    /// One row per subject followed by a `mean` row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["split", "subject_id", "windows", "accuracy", "f1", "auroc", "dbi"])?;
        for r in &self.subjects {
            w.write_record([
                self.split.clone(),
                r.subject_id.to_string(),
                r.windows.to_string(),
                r.accuracy.to_string(),
                r.f1.to_string(),
                opt(r.auroc),
                String::new(),
            ])?;
        }
        w.write_record([
            self.split.clone(),
            "mean".into(),
            self.subjects.iter().map(|r| r.windows).sum::<usize>().to_string(),
            self.accuracy.to_string(),
            self.f1.to_string(),
            opt(self.auroc),
            opt(self.dbi),
        ])?;
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// A principal-component projection.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    /// Row-major `N × dims`.
    pub coords: Vec<f64>,
    pub dims: usize,
    /// Unit principal directions; all zeros when the data has lower rank.
    pub components: Vec<Vec<f64>>,
    /// Sample variance along each direction.
    pub explained_variance: Vec<f64>,
}

const PCA_TOL: f64 = 1e-7;
const PCA_MAX_ITER: usize = 1000;

/// Projects mean-centred `features` (`N × f`) onto their top `dims` principal
/// directions, found by power iteration with deflation. Each direction's
/// largest-magnitude coordinate is made positive.
pub fn pca_project(features: &[f64], f: usize, dims: usize) -> Result<Projection> {
    if f == 0 || !features.len().is_multiple_of(f) {
        return Err(Error::dim("pca_project", format!("{} values with width {f}", features.len())));
    }
    let n = features.len() / f;
    if n < 3 {
        return Err(Error::invalid("features", format!("{n} samples, PCA needs at least 3")));
    }
    if dims == 0 || dims > f {
        return Err(Error::invalid("dims", format!("{dims} not in 1..={f}")));
    }
    let mut mean = vec![0.0; f];
    for row in features.chunks(f) {
        mean.iter_mut().zip(row).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let xc: Vec<f64> = features
        .chunks(f)
        .flat_map(|row| row.iter().zip(&mean).map(|(x, m)| x - m).collect::<Vec<_>>())
        .collect();
    let total_var: f64 = xc.iter().map(|x| x * x).sum::<f64>() / (n - 1) as f64;

    // C v = Xcᵀ (Xc v) / (n − 1)
    let cov_mul = |v: &[f64]| -> Vec<f64> {
        let xv: Vec<f64> = xc.chunks(f).map(|r| r.iter().zip(v).map(|(a, b)| a * b).sum()).collect();
        let mut out = vec![0.0; f];
        for (r, s) in xc.chunks(f).zip(&xv) {
            out.iter_mut().zip(r).for_each(|(o, a)| *o += a * s);
        }
        out.iter_mut().for_each(|o| *o /= (n - 1) as f64);
        out
    };
    let orthogonalize = |v: &mut [f64], basis: &[Vec<f64>]| {
        for b in basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
    };
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();

    let mut rng = named_rng(0, "pca.init");
    let mut components: Vec<Vec<f64>> = Vec::with_capacity(dims);
    let mut variances = Vec::with_capacity(dims);
    let floor = 1e-12 * total_var.max(f64::MIN_POSITIVE);
    for k in 0..dims {
        let found: Vec<Vec<f64>> = components.iter().filter(|c| norm(c) > 0.0).cloned().collect();
        let mut v: Vec<f64> = (0..f).map(|_| rng.random_range(-1.0..1.0)).collect();
        orthogonalize(&mut v, &found);
        let nv = norm(&v);
        v.iter_mut().for_each(|x| *x /= nv);
        let mut degenerate = false;
        for _ in 0..PCA_MAX_ITER {
            let mut w = cov_mul(&v);
            orthogonalize(&mut w, &found);
            let lambda = norm(&w);
            if lambda <= floor {
                degenerate = true;
                break;
            }
            w.iter_mut().for_each(|x| *x /= lambda);
            let delta = w.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            v = w;
            if delta < PCA_TOL {
                break;
            }
        }
        if degenerate {
            log::warn!("PCA: data has rank {k} < {dims}, filling component {k} with zeros");
            components.push(vec![0.0; f]);
            variances.push(0.0);
            continue;
        }
        let big = v
            .iter()
            .enumerate()
            .fold(0, |b, (i, x)| if x.abs() > v[b].abs() { i } else { b });
        if v[big] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        let cv = cov_mul(&v);
        variances.push(v.iter().zip(&cv).map(|(a, b)| a * b).sum::<f64>().max(0.0));
        components.push(v);
    }
    let mut coords = Vec::with_capacity(n * dims);
    for r in xc.chunks(f) {
        for c in &components {
            coords.push(r.iter().zip(c).map(|(a, b)| a * b).sum());
        }
    }
    Ok(Projection {
        coords,
        dims,
        components,
        explained_variance: variances,
    })
}

/// Writes `subject_id, gesture_id, {prefix}0..` rows.
pub fn write_feature_csv(
    path: &Path,
    subjects: &[u32],
    gestures: &[u32],
    values: &[f64],
    width: usize,
    prefix: &str,
) -> Result<()> {
    if values.len() != subjects.len() * width || gestures.len() != subjects.len() {
        return Err(Error::dim(
            "write_feature_csv",
            format!("{} rows of width {width} vs {} values", subjects.len(), values.len()),
        ));
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["subject_id".to_string(), "gesture_id".to_string()];
    header.extend((0..width).map(|j| format!("{prefix}{j}")));
    w.write_record(&header)?;
    for (i, row) in values.chunks(width).enumerate() {
        let mut rec = vec![subjects[i].to_string(), gestures[i].to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
