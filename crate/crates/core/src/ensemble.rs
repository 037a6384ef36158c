//! Random-forest regression and its supporting cast: CART trees, a linear
//! baseline, feature importances, recursive feature elimination with a
//! time/error trade-off score, and a Parzen-estimator hyperparameter tuner.
//!
//! Design matrices are slices of rows (`&[Vec<f64>]`), all of equal length.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FitError {
    #[error("empty training data")]
    Empty,
    #[error("design matrix has {rows} rows but target has {targets}")]
    Length { rows: usize, targets: usize },
    #[error("row {row} has {got} features, expected {expected}")]
    Ragged { row: usize, got: usize, expected: usize },
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("invalid hyperparameter: {0}")]
    HyperParams(String),
    #[error("singular design matrix")]
    Singular,
    #[error("{0}")]
    Invalid(String),
}

/// Features considered at each split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaxFeatures {
    Count(usize),
    Sqrt,
    Log2,
    All,
}

impl MaxFeatures {
    pub fn resolve(self, n_features: usize) -> usize {
        let k = match self {
            MaxFeatures::Count(k) => k,
            MaxFeatures::Sqrt => (n_features as f64).sqrt() as usize,
            MaxFeatures::Log2 => (n_features as f64).log2() as usize,
            MaxFeatures::All => n_features,
        };
        k.clamp(1, n_features.max(1))
    }
}

impl fmt::Display for MaxFeatures {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaxFeatures::Count(k) => write!(f, "{k}"),
            MaxFeatures::Sqrt => f.write_str("sqrt"),
            MaxFeatures::Log2 => f.write_str("log2"),
            MaxFeatures::All => f.write_str("all"),
        }
    }
}

impl FromStr for MaxFeatures {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sqrt" => Ok(MaxFeatures::Sqrt),
            "log2" => Ok(MaxFeatures::Log2),
            "all" => Ok(MaxFeatures::All),
            _ => s
                .parse()
                .map(MaxFeatures::Count)
                .map_err(|_| format!("invalid max_features `{s}` (expected an integer, sqrt, log2 or all)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HyperParams {
    pub n_estimators: usize,
    pub max_features: MaxFeatures,
    pub min_samples_split: usize,
    pub min_samples_leaf: usize,
    /// `None` grows until the other stopping rules apply.
    pub max_depth: Option<usize>,
    pub bootstrap: bool,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            n_estimators: 100,
            max_features: MaxFeatures::All,
            min_samples_split: 2,
            min_samples_leaf: 1,
            max_depth: None,
            bootstrap: true,
        }
    }
}

/// Inclusive tuning ranges.
pub const N_ESTIMATORS_RANGE: (usize, usize) = (10, 1000);
pub const MAX_FEATURES_RANGE: (usize, usize) = (1, 10);
pub const MIN_SAMPLES_SPLIT_RANGE: (usize, usize) = (2, 32);
pub const MIN_SAMPLES_LEAF_RANGE: (usize, usize) = (1, 32);
pub const MAX_DEPTH_RANGE: (usize, usize) = (10, 100);

impl HyperParams {
    /// Basic sanity; see [`in_tuning_space`](Self::in_tuning_space) for the
    /// tuner's stricter ranges.
    pub fn validate(&self) -> Result<(), FitError> {
        let bad = |m: String| Err(FitError::HyperParams(m));
        if self.n_estimators == 0 {
            return bad("n_estimators must be at least 1".into());
        }
        if self.min_samples_split < 2 {
            return bad(format!(
                "min_samples_split must be at least 2, got {}",
                self.min_samples_split
            ));
        }
        if self.min_samples_leaf == 0 {
            return bad("min_samples_leaf must be at least 1".into());
        }
        if self.max_features == MaxFeatures::Count(0) {
            return bad("max_features must be at least 1".into());
        }
        if self.max_depth == Some(0) {
            return bad("max_depth must be at least 1".into());
        }
        Ok(())
    }

    pub fn in_tuning_space(&self) -> bool {
        let within = |v: usize, (lo, hi): (usize, usize)| (lo..=hi).contains(&v);
        within(self.n_estimators, N_ESTIMATORS_RANGE)
            && match self.max_features {
                MaxFeatures::Count(k) => within(k, MAX_FEATURES_RANGE),
                MaxFeatures::Sqrt | MaxFeatures::Log2 => true,
                MaxFeatures::All => false,
            }
            && within(self.min_samples_split, MIN_SAMPLES_SPLIT_RANGE)
            && within(self.min_samples_leaf, MIN_SAMPLES_LEAF_RANGE)
            && self.max_depth.is_some_and(|d| within(d, MAX_DEPTH_RANGE))
    }
}

fn check_data(x: &[Vec<f64>], y: &[f64]) -> Result<usize, FitError> {
    if x.is_empty() {
        return Err(FitError::Empty);
    }
    if x.len() != y.len() {
        return Err(FitError::Length {
            rows: x.len(),
            targets: y.len(),
        });
    }
    let d = x[0].len();
    for (r, row) in x.iter().enumerate() {
        if row.len() != d {
            return Err(FitError::Ragged {
                row: r,
                got: row.len(),
                expected: d,
            });
        }
        if let Some(c) = row.iter().position(|v| !v.is_finite()) {
            return Err(FitError::NonFinite { row: r, col: c });
        }
    }
    if let Some(r) = y.iter().position(|v| !v.is_finite()) {
        return Err(FitError::NonFinite { row: r, col: d });
    }
    Ok(d)
}

fn check_width(x: &[Vec<f64>], expected: usize) -> Result<(), FitError> {
    match x.iter().position(|r| r.len() != expected) {
        Some(row) => Err(FitError::Ragged {
            row,
            got: x[row].len(),
            expected,
        }),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

/// A CART regression tree. Samples with `x[feature] <= threshold` go left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
    /// Unnormalized impurity decrease per feature.
    #[serde(skip)]
    pub importance: Vec<f64>,
}

impl Tree {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if row[feature] <= threshold { left } else { right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

struct Grower<'a> {
    x: &'a [Vec<f64>],
    y: &'a [f64],
    hp: &'a HyperParams,
    mtry: usize,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
    importance: Vec<f64>,
    scratch: Vec<(f64, f64)>,
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    gain: f64,
}

impl Grower<'_> {
    fn grow(&mut self, idx: &mut [usize], depth: usize) -> usize {
        let id = self.nodes.len();
        let n = idx.len();
        let sum: f64 = idx.iter().map(|&i| self.y[i]).sum();
        let mean = sum / n as f64;
        self.nodes.push(Node::Leaf { value: mean });

        let pure = idx.iter().all(|&i| self.y[i] == self.y[idx[0]]);
        let depth_ok = self.hp.max_depth.is_none_or(|d| depth < d);
        if pure || n < self.hp.min_samples_split || n < 2 * self.hp.min_samples_leaf || !depth_ok {
            return id;
        }
        let Some(best) = self.best_split(idx, sum) else {
            return id;
        };
        self.importance[best.feature] += best.gain;
        let mut mid = 0;
        for k in 0..n {
            if self.x[idx[k]][best.feature] <= best.threshold {
                idx.swap(k, mid);
                mid += 1;
            }
        }
        let (l, r) = idx.split_at_mut(mid);
        let left = self.grow(l, depth + 1);
        let right = self.grow(r, depth + 1);
        self.nodes[id] = Node::Split {
            feature: best.feature,
            threshold: best.threshold,
            left,
            right,
        };
        id
    }

    /// Visit features in a random order until `mtry` non-constant ones have
    /// been examined; keep the best variance reduction. Ties keep the lowest
    /// feature index, then the lowest threshold.
    fn best_split(&mut self, idx: &[usize], total: f64) -> Option<BestSplit> {
        let d = self.x[0].len();
        let n = idx.len();
        let leaf = self.hp.min_samples_leaf;
        let parent = total * total / n as f64;
        let mut order: Vec<usize> = (0..d).collect();
        order.shuffle(&mut self.rng);
        let mut best: Option<BestSplit> = None;
        let mut visited = 0;
        for f in order {
            if visited >= self.mtry {
                break;
            }
            self.scratch.clear();
            self.scratch.extend(idx.iter().map(|&i| (self.x[i][f], self.y[i])));
            self.scratch.sort_by(|a, b| a.0.total_cmp(&b.0));
            if self.scratch[0].0 == self.scratch[n - 1].0 {
                continue;
            }
            visited += 1;
            let mut left_sum = 0.0;
            for k in 0..n - 1 {
                left_sum += self.scratch[k].1;
                let nl = k + 1;
                if self.scratch[k].0 == self.scratch[k + 1].0 || nl < leaf || n - nl < leaf {
                    continue;
                }
                let right_sum = total - left_sum;
                let gain = left_sum * left_sum / nl as f64 + right_sum * right_sum / (n - nl) as f64 - parent;
                let threshold = 0.5 * (self.scratch[k].0 + self.scratch[k + 1].0);
                // the midpoint can round onto the upper value; keep the split exact
                let threshold = if threshold < self.scratch[k + 1].0 {
                    threshold
                } else {
                    self.scratch[k].0
                };
                let better = match &best {
                    None => gain > 0.0,
                    Some(b) => gain > b.gain || (gain == b.gain && (f, threshold) < (b.feature, b.threshold)),
                };
                if better {
                    best = Some(BestSplit {
                        feature: f,
                        threshold,
                        gain,
                    });
                }
            }
        }
        best
    }
}

fn grow_tree(x: &[Vec<f64>], y: &[f64], rows: &mut [usize], hp: &HyperParams, rng: ChaCha8Rng) -> Tree {
    let d = x[0].len();
    let mut g = Grower {
        x,
        y,
        hp,
        mtry: hp.max_features.resolve(d),
        rng,
        nodes: Vec::new(),
        importance: vec![0.0; d],
        scratch: Vec::with_capacity(rows.len()),
    };
    g.grow(rows, 0);
    Tree {
        nodes: g.nodes,
        importance: g.importance,
    }
}

/// Single CART regression tree on all rows.
pub fn fit_tree(x: &[Vec<f64>], y: &[f64], hp: &HyperParams, seed: u64) -> Result<Tree, FitError> {
    check_data(x, y)?;
    hp.validate()?;
    let mut rows: Vec<usize> = (0..x.len()).collect();
    Ok(grow_tree(x, y, &mut rows, hp, seed::rng(seed, 0x7ee)))
}

pub const MODEL_VERSION: u32 = 1;

/// Trained forest. Serialized with exact (round-trip) float thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub version: u32,
    pub hyperparams: HyperParams,
    pub feature_names: Vec<String>,
    pub trees: Vec<Tree>,
    /// Impurity-decrease shares, normalized per tree then averaged.
    pub importances: Vec<f64>,
}

pub fn fit_forest(
    x: &[Vec<f64>],
    y: &[f64],
    feature_names: &[String],
    hp: &HyperParams,
    seed: u64,
) -> Result<ForestModel, FitError> {
    let d = check_data(x, y)?;
    hp.validate()?;
    if feature_names.len() != d {
        return Err(FitError::Invalid(format!(
            "{} feature names for {d} columns",
            feature_names.len()
        )));
    }
    let n = x.len();
    let trees: Vec<Tree> = (0..hp.n_estimators)
        .into_par_iter()
        .map(|t| {
            let mut rng = seed::rng(seed, t as u64);
            let mut rows: Vec<usize> = if hp.bootstrap {
                (0..n).map(|_| rng.random_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            grow_tree(x, y, &mut rows, hp, rng)
        })
        .collect();
    let mut importances = vec![0.0; d];
    let mut contributing = 0usize;
    for t in &trees {
        let total: f64 = t.importance.iter().sum();
        if total > 0.0 {
            contributing += 1;
            for (a, v) in importances.iter_mut().zip(&t.importance) {
                *a += v / total;
            }
        }
    }
    if contributing > 0 {
        importances.iter_mut().for_each(|v| *v /= contributing as f64);
    }
    Ok(ForestModel {
        version: MODEL_VERSION,
        hyperparams: *hp,
        feature_names: feature_names.to_vec(),
        trees,
        importances,
    })
}

impl ForestModel {
    pub fn predict(&self, x: &[Vec<f64>]) -> Result<Vec<f64>, FitError> {
        check_width(x, self.feature_names.len())?;
        Ok(x.par_iter().map(|row| self.predict_row(row)).collect())
    }

    pub fn predict_row(&self, row: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict_row(row)).sum::<f64>() / self.trees.len() as f64
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, FitError> {
        let model: Self = serde_json::from_str(text).map_err(|e| FitError::Invalid(format!("model file: {e}")))?;
        if model.version != MODEL_VERSION {
            return Err(FitError::Invalid(format!(
                "model version {} is not supported (expected {MODEL_VERSION})",
                model.version
            )));
        }
        Ok(model)
    }
}

pub fn rmse(pred: &[f64], y: &[f64]) -> f64 {
    assert_eq!(pred.len(), y.len(), "rmse length mismatch");
    let sse: f64 = pred.iter().zip(y).map(|(p, t)| (p - t).powi(2)).sum();
    (sse / y.len() as f64).sqrt()
}

/// Ordinary least squares with an intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
}

pub const RIDGE_JITTER: f64 = 1e-8;

/// Least squares via the normal equations on standardized columns with a
/// `1e-8` ridge jitter, mapped back to the original units.
pub fn fit_linear(x: &[Vec<f64>], y: &[f64]) -> Result<LinearModel, FitError> {
    let d = check_data(x, y)?;
    let scaler = Standardizer::fit(x);
    let z = scaler.transform(x);
    let ym = y.iter().sum::<f64>() / y.len() as f64;
    let mut a = vec![0.0; d * d];
    let mut b = vec![0.0; d];
    for (row, &t) in z.iter().zip(y) {
        for i in 0..d {
            b[i] += row[i] * (t - ym);
            for j in 0..d {
                a[i * d + j] += row[i] * row[j];
            }
        }
    }
    let mut jittered = a.clone();
    for i in 0..d {
        jittered[i * d + i] += RIDGE_JITTER;
    }
    let mut w = if d == 0 {
        Vec::new()
    } else {
        linalg::cholesky_solve(&jittered, &b, d).ok_or(FitError::Singular)?
    };
    // Two steps of iterative refinement against the unjittered system remove
    // the jitter's bias when the design is well conditioned.
    for _ in 0..2.min(d) {
        let resid: Vec<f64> = (0..d)
            .map(|i| b[i] - (0..d).map(|j| a[i * d + j] * w[j]).sum::<f64>())
            .collect();
        let Some(dw) = linalg::cholesky_solve(&jittered, &resid, d) else {
            break;
        };
        w.iter_mut().zip(dw).for_each(|(w, d)| *w += d);
    }
    let coefficients: Vec<f64> = w.iter().zip(&scaler.std).map(|(w, s)| w / s).collect();
    let intercept = ym - coefficients.iter().zip(&scaler.mean).map(|(c, m)| c * m).sum::<f64>();
    Ok(LinearModel {
        intercept,
        coefficients,
    })
}

impl LinearModel {
    pub fn predict(&self, x: &[Vec<f64>]) -> Result<Vec<f64>, FitError> {
        check_width(x, self.coefficients.len())?;
        Ok(x.iter()
            .map(|r| self.intercept + r.iter().zip(&self.coefficients).map(|(a, b)| a * b).sum::<f64>())
            .collect())
    }
}

/// Per-column `(x - mean) / std` with a `1e-12` floor on `std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &[Vec<f64>]) -> Self {
        let d = x.first().map_or(0, Vec::len);
        let n = x.len() as f64;
        let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let std = (0..d)
            .map(|j| {
                let v = x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
                v.sqrt().max(1e-12)
            })
            .collect();
        Self { mean, std }
    }

    pub fn transform(&self, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        x.iter()
            .map(|r| {
                r.iter()
                    .zip(&self.mean)
                    .zip(&self.std)
                    .map(|((v, m), s)| (v - m) / s)
                    .collect()
            })
            .collect()
    }

    pub fn inverse(&self, z: &[Vec<f64>]) -> Vec<Vec<f64>> {
        z.iter()
            .map(|r| {
                r.iter()
                    .zip(&self.mean)
                    .zip(&self.std)
                    .map(|((v, m), s)| v * s + m)
                    .collect()
            })
            .collect()
    }
}

pub fn standardize(x: &[Vec<f64>]) -> (Vec<Vec<f64>>, Standardizer) {
    let s = Standardizer::fit(x);
    (s.transform(x), s)
}

/// Unit vector at `tag`'s position in `vocabulary`.
pub fn one_hot(tag: &str, vocabulary: &[&str]) -> Result<Vec<f64>, FitError> {
    let pos = vocabulary
        .iter()
        .position(|v| *v == tag)
        .ok_or_else(|| FitError::Invalid(format!("unknown tag `{tag}` (expected one of {vocabulary:?})")))?;
    Ok((0..vocabulary.len())
        .map(|i| if i == pos { 1.0 } else { 0.0 })
        .collect())
}

/// Mean of min-max-normalized RMSE and time; a constant column normalizes
/// to 0.
pub fn tradeoff_score(rmse: &[f64], time: &[f64]) -> Result<Vec<f64>, FitError> {
    if rmse.len() != time.len() {
        return Err(FitError::Length {
            rows: rmse.len(),
            targets: time.len(),
        });
    }
    if rmse.len() < 2 {
        return Err(FitError::Invalid("trade-off score needs at least 2 rows".into()));
    }
    fn normalized(v: &[f64]) -> Vec<f64> {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        v.iter()
            .map(|x| if hi > lo { (x - lo) / (hi - lo) } else { 0.0 })
            .collect()
    }
    Ok(normalized(rmse)
        .into_iter()
        .zip(normalized(time))
        .map(|(a, b)| (a + b) / 2.0)
        .collect())
}

/// Cost of computing features, where features in one group share their
/// group's cost (charged once if any member is selected).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureCost {
    /// feature -> group
    pub group_of: BTreeMap<String, String>,
    /// group -> seconds
    pub group_seconds: BTreeMap<String, f64>,
}

impl FeatureCost {
    pub fn time_of<'a>(&self, features: impl IntoIterator<Item = &'a str>) -> Result<f64, FitError> {
        let mut groups = std::collections::BTreeSet::new();
        for f in features {
            let g = self
                .group_of
                .get(f)
                .ok_or_else(|| FitError::Invalid(format!("no timing for feature `{f}`")))?;
            groups.insert(g.as_str());
        }
        groups
            .into_iter()
            .map(|g| {
                self.group_seconds
                    .get(g)
                    .copied()
                    .ok_or_else(|| FitError::Invalid(format!("no timing for group `{g}`")))
            })
            .sum()
    }
}

/// One recursive-feature-elimination step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RfeStep {
    pub k: usize,
    pub features: Vec<String>,
    pub rmse: f64,
    pub time_seconds: f64,
    pub score: f64,
}

/// Train/validation views used by [`rfe`].
pub struct RfeData<'a> {
    pub x_train: &'a [Vec<f64>],
    pub y_train: &'a [f64],
    pub x_val: &'a [Vec<f64>],
    pub y_val: &'a [f64],
    pub names: &'a [String],
}

fn select(x: &[Vec<f64>], cols: &[usize]) -> Vec<Vec<f64>> {
    x.iter().map(|r| cols.iter().map(|&c| r[c]).collect()).collect()
}

/// Start from all features; fit, record validation RMSE and cost, drop the
/// lowest-importance feature (ties: the later column) and repeat down to
/// one feature. Scores are filled in once all steps are known.
pub fn rfe(data: &RfeData<'_>, hp: &HyperParams, seed: u64, cost: &FeatureCost) -> Result<Vec<RfeStep>, FitError> {
    let d = check_data(data.x_train, data.y_train)?;
    check_width(data.x_val, d)?;
    let mut cols: Vec<usize> = (0..d).collect();
    let mut steps = Vec::with_capacity(d);
    while !cols.is_empty() {
        let names: Vec<String> = cols.iter().map(|&c| data.names[c].clone()).collect();
        let model = fit_forest(&select(data.x_train, &cols), data.y_train, &names, hp, seed)?;
        let pred = model.predict(&select(data.x_val, &cols))?;
        let time_seconds = cost.time_of(names.iter().map(String::as_str))?;
        steps.push(RfeStep {
            k: cols.len(),
            features: names,
            rmse: rmse(&pred, data.y_val),
            time_seconds,
            score: 0.0,
        });
        if cols.len() == 1 {
            break;
        }
        let mut drop = 0;
        for (i, &imp) in model.importances.iter().enumerate() {
            if imp <= model.importances[drop] {
                drop = i;
            }
        }
        cols.remove(drop);
    }
    if steps.len() >= 2 {
        let r: Vec<f64> = steps.iter().map(|s| s.rmse).collect();
        let t: Vec<f64> = steps.iter().map(|s| s.time_seconds).collect();
        for (s, v) in steps.iter_mut().zip(tradeoff_score(&r, &t)?) {
            s.score = v;
        }
    }
    Ok(steps)
}

/// One tuning dimension.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Dim {
    Int { lo: i64, hi: i64 },
    Float { lo: f64, hi: f64 },
    Categorical { choices: usize },
}

impl Dim {
    fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Dim::Int { lo, hi } => rng.random_range(lo..=hi) as f64,
            Dim::Float { lo, hi } => rng.random_range(lo..=hi),
            Dim::Categorical { choices } => rng.random_range(0..choices) as f64,
        }
    }

    fn bounds(&self) -> (f64, f64) {
        match *self {
            Dim::Int { lo, hi } => (lo as f64 - 0.5, hi as f64 + 0.5),
            Dim::Float { lo, hi } => (lo, hi),
            Dim::Categorical { choices } => (0.0, choices as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub params: Vec<f64>,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TpeResult {
    pub best: Trial,
    pub trials: Vec<Trial>,
}

pub const TPE_WARMUP: usize = 20;
pub const TPE_GAMMA: f64 = 0.25;
pub const TPE_CANDIDATES: usize = 24;

/// Log density of one dimension's Parzen estimator over `points`, including
/// a uniform prior component so the density is positive everywhere.
fn log_density(dim: &Dim, points: &[f64], x: f64) -> f64 {
    let count = points.len() as f64;
    match *dim {
        Dim::Categorical { choices } => {
            let hits = points.iter().filter(|&&p| p == x).count() as f64;
            ((hits + 1.0) / (count + choices as f64)).ln()
        }
        _ => {
            let (lo, hi) = dim.bounds();
            let range = hi - lo;
            let bw = range / count.max(1.0).sqrt();
            let kernel: f64 = points
                .iter()
                .map(|&p| (-0.5 * ((x - p) / bw).powi(2)).exp() / (bw * (2.0 * std::f64::consts::PI).sqrt()))
                .sum();
            ((kernel + 1.0 / range) / (count + 1.0)).ln()
        }
    }
}

fn sample_good<R: Rng + ?Sized>(dim: &Dim, points: &[f64], rng: &mut R) -> f64 {
    match *dim {
        Dim::Categorical { choices } => {
            // smoothed frequencies
            let mut weights = vec![1.0; choices];
            for &p in points {
                weights[p as usize] += 1.0;
            }
            let total: f64 = weights.iter().sum();
            let mut u = rng.random_range(0.0..total);
            for (c, w) in weights.iter().enumerate() {
                if u < *w {
                    return c as f64;
                }
                u -= w;
            }
            (choices - 1) as f64
        }
        _ => {
            let (lo, hi) = dim.bounds();
            let bw = (hi - lo) / (points.len() as f64).sqrt();
            let center = points[rng.random_range(0..points.len())];
            let z: f64 = StandardNormal.sample(rng);
            let v = center + bw * z;
            match *dim {
                Dim::Int { lo, hi } => v.round().clamp(lo as f64, hi as f64),
                Dim::Float { lo, hi } => v.clamp(lo, hi),
                Dim::Categorical { .. } => unreachable!(),
            }
        }
    }
}

/// Minimize `objective` over `space`. The first [`TPE_WARMUP`] trials are
/// uniform random; afterwards each trial splits history at the `γ` quantile
/// and picks, among [`TPE_CANDIDATES`] draws from the good density, the one
/// with the highest good/bad density ratio. `random_only` disables the model
/// and samples uniformly throughout.
pub fn tpe_optimize(
    space: &[Dim],
    objective: impl FnMut(&[f64]) -> f64,
    n_trials: usize,
    seed: u64,
    random_only: bool,
) -> Result<TpeResult, FitError> {
    tpe_optimize_enqueued(space, objective, n_trials, seed, random_only, &[])
}

/// [`tpe_optimize`] whose first trials evaluate the `enqueued` points (in
/// order) instead of uniform draws; they count towards the warm-up.
pub fn tpe_optimize_enqueued(
    space: &[Dim],
    mut objective: impl FnMut(&[f64]) -> f64,
    n_trials: usize,
    seed: u64,
    random_only: bool,
    enqueued: &[Vec<f64>],
) -> Result<TpeResult, FitError> {
    if n_trials < TPE_WARMUP {
        return Err(FitError::Invalid(format!(
            "at least {TPE_WARMUP} trials are required, got {n_trials}"
        )));
    }
    if enqueued.len() > TPE_WARMUP || enqueued.iter().any(|p| p.len() != space.len()) {
        return Err(FitError::Invalid(format!(
            "enqueued points must number at most {TPE_WARMUP} and have {} coordinates",
            space.len()
        )));
    }
    let mut rng = seed::rng(seed, 0x79e);
    let mut trials: Vec<Trial> = Vec::with_capacity(n_trials);
    for t in 0..n_trials {
        let params: Vec<f64> = if let Some(p) = enqueued.get(t) {
            p.clone()
        } else if t < TPE_WARMUP || random_only {
            space.iter().map(|d| d.sample_uniform(&mut rng)).collect()
        } else {
            let mut order: Vec<usize> = (0..trials.len()).collect();
            order.sort_by(|&a, &b| trials[a].objective.total_cmp(&trials[b].objective).then(a.cmp(&b)));
            let n_good = ((TPE_GAMMA * trials.len() as f64).ceil() as usize).max(1);
            let (good, bad) = order.split_at(n_good);
            let column = |set: &[usize], j: usize| -> Vec<f64> { set.iter().map(|&i| trials[i].params[j]).collect() };
            let good_cols: Vec<Vec<f64>> = (0..space.len()).map(|j| column(good, j)).collect();
            let bad_cols: Vec<Vec<f64>> = (0..space.len()).map(|j| column(bad, j)).collect();
            let mut best: Option<(f64, Vec<f64>)> = None;
            for _ in 0..TPE_CANDIDATES {
                let cand: Vec<f64> = space
                    .iter()
                    .zip(&good_cols)
                    .map(|(d, g)| sample_good(d, g, &mut rng))
                    .collect();
                let ratio: f64 = space
                    .iter()
                    .enumerate()
                    .map(|(j, d)| log_density(d, &good_cols[j], cand[j]) - log_density(d, &bad_cols[j], cand[j]))
                    .sum();
                if best.as_ref().is_none_or(|(r, _)| ratio > *r) {
                    best = Some((ratio, cand));
                }
            }
            best.expect("at least one candidate").1
        };
        let value = objective(&params);
        let value = if value.is_finite() { value } else { f64::INFINITY };
        trials.push(Trial {
            params,
            objective: value,
        });
    }
    let best = trials
        .iter()
        .min_by(|a, b| a.objective.total_cmp(&b.objective))
        .cloned()
        .expect("n_trials >= 20");
    Ok(TpeResult { best, trials })
}

/// Max-features choices in tuning order: `1..=10`, then `sqrt`, `log2`.
const MAX_FEATURE_CHOICES: usize = 12;

/// The hyperparameter tuning space.
pub fn hyperparam_space() -> Vec<Dim> {
    let int = |(lo, hi): (usize, usize)| Dim::Int {
        lo: lo as i64,
        hi: hi as i64,
    };
    vec![
        int(N_ESTIMATORS_RANGE),
        Dim::Categorical {
            choices: MAX_FEATURE_CHOICES,
        },
        int(MIN_SAMPLES_SPLIT_RANGE),
        int(MIN_SAMPLES_LEAF_RANGE),
        int(MAX_DEPTH_RANGE),
        Dim::Categorical { choices: 2 },
    ]
}

/// Inverse of [`decode_hyperparams`] for settings inside the tuning space.
pub fn encode_hyperparams(hp: &HyperParams) -> Option<Vec<f64>> {
    if !hp.in_tuning_space() {
        return None;
    }
    let mf = match hp.max_features {
        MaxFeatures::Count(k) => (k - 1) as f64,
        MaxFeatures::Sqrt => 10.0,
        MaxFeatures::Log2 => 11.0,
        MaxFeatures::All => return None,
    };
    Some(vec![
        hp.n_estimators as f64,
        mf,
        hp.min_samples_split as f64,
        hp.min_samples_leaf as f64,
        hp.max_depth? as f64,
        f64::from(u8::from(hp.bootstrap)),
    ])
}

/// The defaults moved into the tuning space: at most 10 features per split
/// and depth at most 100.
pub fn default_in_tuning_space() -> HyperParams {
    HyperParams {
        max_features: MaxFeatures::Count(MAX_FEATURES_RANGE.1),
        max_depth: Some(MAX_DEPTH_RANGE.1),
        ..HyperParams::default()
    }
}

pub fn decode_hyperparams(v: &[f64]) -> HyperParams {
    let mf = v[1] as usize;
    HyperParams {
        n_estimators: v[0] as usize,
        max_features: match mf {
            0..=9 => MaxFeatures::Count(mf + 1),
            10 => MaxFeatures::Sqrt,
            _ => MaxFeatures::Log2,
        },
        min_samples_split: v[2] as usize,
        min_samples_leaf: v[3] as usize,
        max_depth: Some(v[4] as usize),
        bootstrap: v[5] != 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(d: usize) -> Vec<String> {
        (0..d).map(|i| format!("f{i}")).collect()
    }

    #[test]
    fn single_tree_memorizes() {
        let x: Vec<Vec<f64>> = (0..50).map(|i| vec![(i * 7 % 50) as f64, (i % 3) as f64]).collect();
        let y: Vec<f64> = (0..50).map(|i| ((i * 31) % 17) as f64).collect();
        let hp = HyperParams {
            n_estimators: 1,
            bootstrap: false,
            ..HyperParams::default()
        };
        let m = fit_forest(&x, &y, &names(2), &hp, 0).unwrap();
        assert_eq!(rmse(&m.predict(&x).unwrap(), &y), 0.0);
    }

    #[test]
    fn constant_target() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let m = fit_forest(&x, &[4.5; 10], &names(1), &HyperParams::default(), 1).unwrap();
        assert!(m.predict(&x).unwrap().iter().all(|&p| p == 4.5));
        assert!(m.importances.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rmse_hand() {
        assert!((rmse(&[3.0, 4.0], &[0.0, 0.0]) - 12.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn linear_exact() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, (i * i) as f64 * 1e3]).collect();
        let y: Vec<f64> = x.iter().map(|r| 2.0 + 0.5 * r[0] - 3e-3 * r[1]).collect();
        let m = fit_linear(&x, &y).unwrap();
        assert!(rmse(&m.predict(&x).unwrap(), &y) < 1e-8);
    }

    #[test]
    fn tradeoff_anchors() {
        let s = tradeoff_score(&[2.0, 1.0, 1.0], &[1.0, 3.0, 1.0]).unwrap();
        assert_eq!(s, vec![0.5, 0.5, 0.0]);
        let c = tradeoff_score(&[1.0, 1.0], &[2.0, 2.0]).unwrap();
        assert_eq!(c, vec![0.0, 0.0]);
    }

    #[test]
    fn one_hot_tags() {
        let v = ["cifar10", "cifar100", "imagenet16"];
        assert_eq!(one_hot("cifar10", &v).unwrap(), vec![1.0, 0.0, 0.0]);
        assert!(one_hot("mnist", &v).is_err());
    }

    #[test]
    fn max_features_parse() {
        assert_eq!("sqrt".parse::<MaxFeatures>().unwrap(), MaxFeatures::Sqrt);
        assert_eq!("8".parse::<MaxFeatures>().unwrap(), MaxFeatures::Count(8));
        assert_eq!(MaxFeatures::Log2.resolve(26), 4);
        assert_eq!(MaxFeatures::Count(30).resolve(6), 6);
    }

    #[test]
    fn model_json_round_trip() {
        let x: Vec<Vec<f64>> = (0..30).map(|i| vec![(i as f64 * 0.37).sin(), i as f64 / 7.0]).collect();
        let y: Vec<f64> = x.iter().map(|r| r[0] * 3.0 + r[1]).collect();
        let hp = HyperParams {
            n_estimators: 5,
            ..HyperParams::default()
        };
        let m = fit_forest(&x, &y, &names(2), &hp, 3).unwrap();
        let back = ForestModel::from_json(&m.to_json()).unwrap();
        assert_eq!(back.predict(&x).unwrap(), m.predict(&x).unwrap());
        assert_eq!(back.to_json(), m.to_json());
    }

    #[test]
    fn tpe_requires_warmup() {
        assert!(tpe_optimize(&[Dim::Float { lo: 0.0, hi: 1.0 }], |v| v[0], 19, 0, false).is_err());
    }

    #[test]
    fn decoded_hyperparams_in_range() {
        let mut rng = seed::rng(0, 0);
        for _ in 0..200 {
            let v: Vec<f64> = hyperparam_space().iter().map(|d| d.sample_uniform(&mut rng)).collect();
            let hp = decode_hyperparams(&v);
            assert!(hp.in_tuning_space());
            assert_eq!(encode_hyperparams(&hp), Some(v));
        }
        assert_eq!(encode_hyperparams(&HyperParams::default()), None);
        let d = default_in_tuning_space();
        assert_eq!(decode_hyperparams(&encode_hyperparams(&d).unwrap()), d);
    }

    #[test]
    fn enqueued_points_run_first() {
        let space = [Dim::Float { lo: 0.0, hi: 1.0 }];
        let r = tpe_optimize_enqueued(&space, |v| v[0], 25, 1, false, &[vec![0.25]]).unwrap();
        assert_eq!(r.trials[0].params, vec![0.25]);
        assert!(tpe_optimize_enqueued(&space, |v| v[0], 25, 1, false, &[vec![0.1, 0.2]]).is_err());
    }
}
