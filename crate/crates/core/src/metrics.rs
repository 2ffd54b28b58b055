//! ROC/AUC, confusion matrices, stratified k-fold splits, fold aggregation,
//! PCA projection and silhouette scores.

use std::fmt;
use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::SeededRng;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("undefined metric: {0}")]
    Undefined(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Items scoring `>= threshold` are called positive. The first point
    /// uses `+inf`.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// Threshold sweep over the distinct scores, highest first.
///
/// The trapezoid area is accumulated exactly in integer units of
/// `1 / (2 P N)`, which equals the Mann-Whitney count with ties worth one
/// half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<RocCurve, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::Data(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(MetricsError::Data("NaN score".into()));
    }
    let p = labels.iter().filter(|&&l| l).count() as u128;
    let n = labels.len() as u128 - p;
    if p == 0 || n == 0 {
        return Err(MetricsError::Undefined("ROC needs both positive and negative items".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp, mut twice_area) = (0u128, 0u128, 0u128);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        twice_area += (fp - fp0) * (tp + tp0);
        points.push(RocPoint {
            threshold: s,
            fpr: fp as f64 / n as f64,
            tpr: tp as f64 / p as f64,
        });
    }
    let denom = 2 * p * n;
    // Evaluate from whichever side is >= 1/2 so that 1 - AUC is exact under
    // label reversal.
    let auc = if 2 * twice_area >= denom {
        twice_area as f64 / denom as f64
    } else {
        1.0 - (denom - twice_area) as f64 / denom as f64
    };
    Ok(RocCurve { points, auc })
}

/// One curve per class: class `c` probability against "truth is c".
pub fn one_vs_rest(probs: &[Vec<f32>], truth: &[usize], n_classes: usize) -> Result<Vec<RocCurve>, MetricsError> {
    (0..n_classes)
        .map(|c| {
            let scores: Vec<f64> = probs.iter().map(|p| p[c] as f64).collect();
            let labels: Vec<bool> = truth.iter().map(|&t| t == c).collect();
            roc_auc(&scores, &labels).map_err(|e| match e {
                MetricsError::Undefined(m) => MetricsError::Undefined(format!("class {c}: {m}")),
                other => other,
            })
        })
        .collect()
}

pub fn roc_csv(curve: &RocCurve) -> String {
    let mut out = String::from("threshold,fpr,tpr\n");
    for p in &curve.points {
        let _ = writeln!(out, "{},{},{}", p.threshold, p.fpr, p.tpr);
    }
    out
}

/// Rows are truth, columns prediction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: Vec<String>) -> Self {
        let n = classes.len();
        Self {
            classes,
            counts: vec![vec![0; n]; n],
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> Result<f64, MetricsError> {
        let total = self.total();
        if total == 0 {
            return Err(MetricsError::Undefined("accuracy of an empty confusion matrix".into()));
        }
        let trace: u64 = (0..self.classes.len()).map(|i| self.counts[i][i]).sum();
        Ok(trace as f64 / total as f64)
    }

    /// Share of class `c` items predicted as `c`; `None` if the class is absent.
    pub fn recall(&self, c: usize) -> Option<f64> {
        let row: u64 = self.counts[c].iter().sum();
        (row > 0).then(|| self.counts[c][c] as f64 / row as f64)
    }

    pub fn precision(&self, c: usize) -> Option<f64> {
        let col: u64 = self.counts.iter().map(|r| r[c]).sum();
        (col > 0).then(|| self.counts[c][c] as f64 / col as f64)
    }

    /// Each row divided by its total (zero rows stay zero).
    pub fn row_shares(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|r| {
                let t: u64 = r.iter().sum();
                r.iter().map(|&v| if t == 0 { 0.0 } else { v as f64 / t as f64 }).collect()
            })
            .collect()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<(), MetricsError> {
        if self.classes != other.classes {
            return Err(MetricsError::Data("cannot merge confusion matrices over different classes".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }
}

pub fn confusion(preds: &[usize], truth: &[usize], classes: &[String]) -> Result<ConfusionMatrix, MetricsError> {
    if preds.len() != truth.len() {
        return Err(MetricsError::Data(format!(
            "{} predictions but {} truth labels",
            preds.len(),
            truth.len()
        )));
    }
    let mut m = ConfusionMatrix::zeros(classes.to_vec());
    for (&p, &t) in preds.iter().zip(truth) {
        if p >= classes.len() || t >= classes.len() {
            return Err(MetricsError::Data(format!(
                "class index {} outside {} classes",
                p.max(t),
                classes.len()
            )));
        }
        m.counts[t][p] += 1;
    }
    Ok(m)
}

/// Same as [`confusion`] with class names instead of indices.
pub fn confusion_by_name(preds: &[&str], truth: &[&str], classes: &[String]) -> Result<ConfusionMatrix, MetricsError> {
    let index = |name: &str| {
        classes
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| MetricsError::Data(format!("unknown class label `{name}`")))
    };
    let p = preds.iter().map(|s| index(s)).collect::<Result<Vec<_>, _>>()?;
    let t = truth.iter().map(|s| index(s)).collect::<Result<Vec<_>, _>>()?;
    confusion(&p, &t, classes)
}

/// Fold index per sample, in input order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CvSplit {
    pub k: usize,
    pub ids: Vec<String>,
    pub folds: Vec<usize>,
}

impl CvSplit {
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.folds.len()).filter(|&i| self.folds[i] == fold).collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.folds.len()).filter(|&i| self.folds[i] != fold).collect()
    }
}

/// Stratified split: within each class (in index order) members are
/// shuffled by a per-class stream and dealt round-robin, continuing the
/// dealing position from the previous class.
pub fn kfold(ids: &[String], labels: &[usize], k: usize, seed: u64) -> Result<CvSplit, MetricsError> {
    if ids.len() != labels.len() {
        return Err(MetricsError::Data(format!("{} ids but {} labels", ids.len(), labels.len())));
    }
    if k < 2 {
        return Err(MetricsError::Config(format!("k must be at least 2, got {k}")));
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mut folds = vec![0; ids.len()];
    let mut next = 0;
    for &c in &classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if members.len() < k {
            return Err(MetricsError::Config(format!(
                "class {c} has {} samples, fewer than k = {k}",
                members.len()
            )));
        }
        members.shuffle(&mut SeededRng::derive(seed, &[c as u64]));
        for i in members {
            folds[i] = next % k;
            next += 1;
        }
    }
    Ok(CvSplit {
        k,
        ids: ids.to_vec(),
        folds,
    })
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvAggregate {
    pub mean: f64,
    pub std: f64,
}

impl fmt::Display for CvAggregate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3} ± {:.3}", self.mean, self.std)
    }
}

pub fn aggregate_cv(values: &[f64]) -> Result<CvAggregate, MetricsError> {
    if values.len() < 2 {
        return Err(MetricsError::Config(format!("need at least 2 folds, got {}", values.len())));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(CvAggregate { mean, std: var.sqrt() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaProjection {
    pub mean: Vec<f64>,
    /// Unit principal axes, largest variance first.
    pub axes: Vec<Vec<f64>>,
    /// Sample-covariance eigenvalues of the kept axes.
    pub explained_variance: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
    pub coords: Vec<Vec<f64>>,
}

impl PcaProjection {
    pub fn reconstruct(&self, coords: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (c, axis) in coords.iter().zip(&self.axes) {
            for (o, a) in out.iter_mut().zip(axis) {
                *o += c * a;
            }
        }
        out
    }
}

/// Sample covariance (`n - 1` denominator) of row vectors.
pub fn covariance(vectors: &[Vec<f64>]) -> (Vec<f64>, DMatrix<f64>) {
    let n = vectors.len();
    let d = vectors[0].len();
    let mut mean = vec![0.0; d];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, d, |i, j| vectors[i][j] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    (mean, cov)
}

/// Projects onto the top `dims` eigenvectors of the sample covariance. Each
/// axis is signed so its first nonzero component is positive.
pub fn pca_project(vectors: &[Vec<f64>], dims: usize) -> Result<PcaProjection, MetricsError> {
    let d = vectors.first().map_or(0, Vec::len);
    if vectors.len() < dims + 1 {
        return Err(MetricsError::Config(format!(
            "PCA to {dims} dimensions needs at least {} vectors, got {}",
            dims + 1,
            vectors.len()
        )));
    }
    if dims == 0 || dims > d {
        return Err(MetricsError::Config(format!("cannot project {d}-D vectors to {dims} dimensions")));
    }
    if let Some(v) = vectors.iter().find(|v| v.len() != d) {
        return Err(MetricsError::Data(format!("vector of length {} among length {d}", v.len())));
    }
    if vectors.iter().flatten().any(|x| !x.is_finite()) {
        return Err(MetricsError::Data("non-finite component".into()));
    }
    let (mean, cov) = covariance(vectors);
    let total: f64 = cov.diagonal().iter().sum();
    let scale = vectors.iter().flatten().map(|x| x * x).sum::<f64>() / vectors.len() as f64;
    if !(total > 1e-12 * scale.max(f64::MIN_POSITIVE)) {
        return Err(MetricsError::Degenerate("all vectors are identical (zero variance)".into()));
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut axes = Vec::with_capacity(dims);
    let mut explained = Vec::with_capacity(dims);
    for &i in &order[..dims] {
        let mut axis: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
        let norm = axis.iter().map(|x| x * x).sum::<f64>().sqrt();
        axis.iter_mut().for_each(|x| *x /= norm);
        if let Some(&first) = axis.iter().find(|x| x.abs() > 1e-12) {
            if first < 0.0 {
                axis.iter_mut().for_each(|x| *x = -*x);
            }
        }
        axes.push(axis);
        explained.push(eig.eigenvalues[i].max(0.0));
    }
    let coords = vectors
        .iter()
        .map(|v| {
            axes.iter()
                .map(|a| a.iter().zip(v).zip(&mean).map(|((a, x), m)| a * (x - m)).sum())
                .collect()
        })
        .collect();
    Ok(PcaProjection {
        mean,
        axes,
        explained_variance_ratio: explained.iter().map(|e| e / total).collect(),
        explained_variance: explained,
        coords,
    })
}

/// Mean silhouette over all points (Euclidean). Points in singleton
/// clusters contribute 0.
pub fn silhouette_score(points: &[Vec<f64>], labels: &[usize]) -> Result<f64, MetricsError> {
    if points.len() != labels.len() {
        return Err(MetricsError::Data("points and labels differ in length".into()));
    }
    let mut clusters: Vec<usize> = labels.to_vec();
    clusters.sort_unstable();
    clusters.dedup();
    if clusters.len() < 2 {
        return Err(MetricsError::Undefined("silhouette needs at least 2 clusters".into()));
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let mut sums = vec![(0.0f64, 0usize); clusters.len()];
        for (j, q) in points.iter().enumerate() {
            if i == j {
                continue;
            }
            let c = clusters.binary_search(&labels[j]).expect("label listed");
            sums[c].0 += dist(p, q);
            sums[c].1 += 1;
        }
        let own = clusters.binary_search(&labels[i]).expect("label listed");
        if sums[own].1 == 0 {
            continue;
        }
        let a = sums[own].0 / sums[own].1 as f64;
        let b = sums
            .iter()
            .enumerate()
            .filter(|&(c, s)| c != own && s.1 > 0)
            .map(|(_, s)| s.0 / s.1 as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / points.len() as f64)
}

pub fn pca_csv(ids: &[String], coords: &[Vec<f64>], labels: &[String]) -> String {
    let mut out = String::from("id,pc1,pc2,label\n");
    for ((id, c), l) in ids.iter().zip(coords).zip(labels) {
        let _ = writeln!(out, "{id},{},{},{l}", c[0], c.get(1).copied().unwrap_or(0.0));
    }
    out
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// Scatter plot of 2-D points, coloured by label (sorted label order).
pub fn scatter_svg(coords: &[Vec<f64>], labels: &[String], title: &str) -> String {
    let (w, h, pad) = (640.0, 480.0, 40.0);
    let xs = coords.iter().map(|c| c[0]);
    let ys = coords.iter().map(|c| c.get(1).copied().unwrap_or(0.0));
    let (x0, x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (y0, y1) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let sx = if x1 > x0 { (w - 2.0 * pad) / (x1 - x0) } else { 0.0 };
    let sy = if y1 > y0 { (h - 2.0 * pad) / (y1 - y0) } else { 0.0 };
    let mut names: Vec<&String> = labels.iter().collect();
    names.sort();
    names.dedup();
    let colour = |l: &String| PALETTE[names.binary_search(&l).expect("label listed") % PALETTE.len()];
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{pad}\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\">{}</text>\n",
        xml_escape(title)
    );
    for (c, l) in coords.iter().zip(labels) {
        let x = pad + (c[0] - x0) * sx;
        let y = h - pad - (c.get(1).copied().unwrap_or(0.0) - y0) * sy;
        let _ = writeln!(
            svg,
            "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"3\" fill=\"{}\" fill-opacity=\"0.7\"/>",
            colour(l)
        );
    }
    for (i, name) in names.iter().enumerate() {
        let y = 44.0 + 16.0 * i as f64;
        let _ = writeln!(
            svg,
            "<rect x=\"{}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{}\"/><text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\">{}</text>",
            w - 150.0,
            y - 9.0,
            PALETTE[i % PALETTE.len()],
            w - 134.0,
            y,
            xml_escape(name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}
