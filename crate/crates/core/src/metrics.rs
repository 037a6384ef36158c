//! Rank correlations and accuracy-stratified data splits.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("inputs have different lengths ({0} vs {1})")]
    Length(usize, usize),
    #[error("need at least {need} values, got {got}")]
    TooShort { need: usize, got: usize },
    #[error("correlation undefined: {0}")]
    Undefined(&'static str),
    #[error("non-finite input value")]
    NonFinite,
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<(), MetricError> {
    if x.len() != y.len() {
        return Err(MetricError::Length(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(MetricError::TooShort { need: 2, got: x.len() });
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(MetricError::NonFinite);
    }
    Ok(())
}

/// 1-based ranks, ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && x[idx[j]] == x[idx[i]] {
            j += 1;
        }
        // positions i..j hold ranks i+1..=j
        let avg = (i + 1 + j) as f64 / 2.0;
        for &k in &idx[i..j] {
            ranks[k] = avg;
        }
        i = j;
    }
    ranks
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, MetricError> {
    check_pair(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricError::Undefined("zero variance"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's rho: Pearson correlation of average ranks.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<f64, MetricError> {
    check_pair(x, y)?;
    pearson(&average_ranks(x), &average_ranks(y)).map_err(|_| MetricError::Undefined("zero rank variance"))
}

fn tau_b(n0: f64, ties_x: f64, ties_y: f64, numerator: f64) -> Result<f64, MetricError> {
    let denom = ((n0 - ties_x) * (n0 - ties_y)).sqrt();
    if denom == 0.0 {
        return Err(MetricError::Undefined("all pairs tied"));
    }
    Ok((numerator / denom).clamp(-1.0, 1.0))
}

/// Kendall's tau-b by explicit pair enumeration; the reference for
/// [`kendall_tau`].
pub fn kendall_tau_brute(x: &[f64], y: &[f64]) -> Result<f64, MetricError> {
    check_pair(x, y)?;
    let n = x.len();
    let (mut c, mut d, mut tx, mut ty) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let sx = (x[i] - x[j]).signum() as i64 * (x[i] != x[j]) as i64;
            let sy = (y[i] - y[j]).signum() as i64 * (y[i] != y[j]) as i64;
            match (sx, sy) {
                (0, 0) => {}
                (0, _) => tx += 1,
                (_, 0) => ty += 1,
                _ if sx == sy => c += 1,
                _ => d += 1,
            }
        }
    }
    let total = (c + d) as f64;
    let denom = ((total + tx as f64) * (total + ty as f64)).sqrt();
    if denom == 0.0 {
        return Err(MetricError::Undefined("all pairs tied"));
    }
    Ok(((c - d) as f64 / denom).clamp(-1.0, 1.0))
}

/// Count adjacent-order inversions while merge-sorting `v` in place.
fn merge_count(v: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = merge_count(&mut v[..mid], &mut buf[..mid]) + merge_count(&mut v[mid..], &mut buf[mid..]);
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf[k] = v[j];
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    k += mid - i;
    buf[k..k + n - j].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    swaps
}

fn tied_pairs(sorted: impl Iterator<Item = impl PartialEq>) -> u64 {
    let mut total = 0u64;
    let mut run = 0u64;
    let mut prev = None;
    for v in sorted {
        if prev.as_ref() == Some(&v) {
            run += 1;
        } else {
            total += run * (run + 1) / 2;
            run = 0;
        }
        prev = Some(v);
    }
    total + run * (run + 1) / 2
}

/// Kendall's tau-b in `O(n log n)` (Knight's merge-count algorithm).
pub fn kendall_tau(x: &[f64], y: &[f64]) -> Result<f64, MetricError> {
    check_pair(x, y)?;
    let n = x.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(y[a].total_cmp(&y[b])));
    let ties_x = tied_pairs(idx.iter().map(|&i| x[i]));
    let ties_xy = tied_pairs(idx.iter().map(|&i| (x[i], y[i])));
    let mut ys: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
    let mut buf = vec![0.0; n];
    let swaps = merge_count(&mut ys, &mut buf);
    let ties_y = tied_pairs(ys.iter().copied());
    let n0 = (n * (n - 1) / 2) as f64;
    let numerator = n0 - ties_x as f64 - ties_y as f64 + ties_xy as f64 - 2.0 * swaps as f64;
    tau_b(n0, ties_x as f64, ties_y as f64, numerator)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

/// How rows are assigned to train/val/test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    /// Equal-width accuracy bins, proportional assignment per bin.
    Stratified,
    /// One shuffled pool.
    Random,
}

impl std::str::FromStr for SplitMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "stratified" => Ok(SplitMode::Stratified),
            "random" => Ok(SplitMode::Random),
            _ => Err(format!("unknown split mode `{s}` (expected stratified or random)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub tags: Vec<SplitTag>,
    pub bins: Vec<usize>,
}

impl SplitAssignment {
    pub fn indices(&self, tag: SplitTag) -> Vec<usize> {
        self.tags
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == tag)
            .map(|(i, _)| i)
            .collect()
    }
}

pub const DEFAULT_FRACTIONS: [f64; 3] = [0.70, 0.15, 0.15];
pub const DEFAULT_BINS: usize = 5;

fn assign(rows: &mut [usize], fractions: [f64; 3], rng: &mut impl rand::Rng, tags: &mut [SplitTag]) {
    rows.shuffle(rng);
    let m = rows.len() as f64;
    let n_train = (fractions[0] * m).round() as usize;
    let n_val = ((fractions[1] * m).round() as usize).min(rows.len() - n_train.min(rows.len()));
    for (k, &r) in rows.iter().enumerate() {
        tags[r] = if k < n_train {
            SplitTag::Train
        } else if k < n_train + n_val {
            SplitTag::Val
        } else {
            SplitTag::Test
        };
    }
}

fn check_fractions(fractions: [f64; 3]) -> Result<(), MetricError> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(MetricError::Undefined("split fractions must be in [0, 1] and sum to 1"));
    }
    Ok(())
}

/// Equal-width bins over `[min y, max y]`; each bin is shuffled and split
/// proportionally. Constant `y` degenerates to a single bin.
pub fn stratified_split(
    y: &[f64],
    bins: usize,
    fractions: [f64; 3],
    seed: u64,
) -> Result<SplitAssignment, MetricError> {
    check_fractions(fractions)?;
    let bins = bins.max(1);
    if y.len() < bins * 3 {
        return Err(MetricError::TooShort {
            need: bins * 3,
            got: y.len(),
        });
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(MetricError::NonFinite);
    }
    let lo = y.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let bin_of: Vec<usize> = if hi > lo {
        y.iter()
            .map(|&v| (((v - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1))
            .collect()
    } else {
        vec![0; y.len()]
    };
    let mut rng = seed::rng(seed, 0x5b11);
    let mut tags = vec![SplitTag::Train; y.len()];
    for b in 0..bins {
        let mut rows: Vec<usize> = (0..y.len()).filter(|&i| bin_of[i] == b).collect();
        if !rows.is_empty() {
            assign(&mut rows, fractions, &mut rng, &mut tags);
        }
    }
    Ok(SplitAssignment { tags, bins: bin_of })
}

/// Plain shuffled split ignoring the target.
pub fn random_split(n: usize, fractions: [f64; 3], seed: u64) -> Result<SplitAssignment, MetricError> {
    check_fractions(fractions)?;
    if n < 3 {
        return Err(MetricError::TooShort { need: 3, got: n });
    }
    let mut rng = seed::rng(seed, 0x5b11);
    let mut tags = vec![SplitTag::Train; n];
    let mut rows: Vec<usize> = (0..n).collect();
    assign(&mut rows, fractions, &mut rng, &mut tags);
    Ok(SplitAssignment { tags, bins: vec![0; n] })
}

pub fn split(y: &[f64], mode: SplitMode, seed: u64) -> Result<SplitAssignment, MetricError> {
    match mode {
        SplitMode::Stratified => stratified_split(y, DEFAULT_BINS, DEFAULT_FRACTIONS, seed),
        SplitMode::Random => random_split(y.len(), DEFAULT_FRACTIONS, seed),
    }
}

/// One cell of a correlation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub proxy_id: String,
    pub search_space: String,
    pub dataset: String,
    pub kendall_abs: f64,
    pub spearman_abs: f64,
    pub n: usize,
}

/// Absolute Kendall and Spearman correlations of each column against
/// `target`, per `(search_space, dataset)` group (`groups[i]` labels row
/// `i`). Groups with fewer than 2 rows are omitted; a correlation that is
/// undefined within a group (a constant column) is reported as 0.
pub fn correlation_report(
    groups: &[(String, String)],
    columns: &[(String, Vec<f64>)],
    target: &[f64],
) -> Vec<CorrelationRow> {
    let mut keys: Vec<&(String, String)> = groups.iter().collect();
    keys.sort();
    keys.dedup();
    let mut out = Vec::new();
    for (proxy_id, values) in columns {
        for key in &keys {
            let rows: Vec<usize> = (0..groups.len()).filter(|&i| &groups[i] == *key).collect();
            if rows.len() < 2 {
                log::warn!("group {}/{} has {} row(s); omitted", key.0, key.1, rows.len());
                continue;
            }
            let x: Vec<f64> = rows.iter().map(|&i| values[i]).collect();
            let y: Vec<f64> = rows.iter().map(|&i| target[i]).collect();
            let abs_or_zero = |r: Result<f64, MetricError>| match r {
                Ok(v) => v.abs(),
                Err(e) => {
                    log::warn!("{proxy_id} on {}/{}: {e}; reported as 0", key.0, key.1);
                    0.0
                }
            };
            out.push(CorrelationRow {
                proxy_id: proxy_id.clone(),
                search_space: key.0.clone(),
                dataset: key.1.clone(),
                kendall_abs: abs_or_zero(kendall_tau(&x, &y)),
                spearman_abs: abs_or_zero(spearman_rho(&x, &y)),
                n: rows.len(),
            });
        }
    }
    out
}

pub const REPORT_HEADER: [&str; 6] = [
    "proxy_id",
    "search_space",
    "dataset",
    "kendall_abs",
    "spearman_abs",
    "n",
];

pub fn report_csv(rows: &[CorrelationRow]) -> String {
    let mut s = REPORT_HEADER.join(",");
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.proxy_id, r.search_space, r.dataset, r.kendall_abs, r.spearman_abs, r.n
        ));
    }
    s
}

pub fn report_text(rows: &[CorrelationRow]) -> String {
    let mut s = format!(
        "{:<18} {:<6} {:<11} {:>8} {:>8} {:>6}\n",
        "proxy", "space", "dataset", "|tau|", "|rho|", "n"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<18} {:<6} {:<11} {:>8.4} {:>8.4} {:>6}\n",
            r.proxy_id, r.search_space, r.dataset, r.kendall_abs, r.spearman_abs, r.n
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_absorbs_sign() {
        let groups: Vec<(String, String)> = (0..8)
            .map(|i| (if i < 4 { "sss" } else { "tss" }.to_string(), "cifar10".to_string()))
            .collect();
        let target: Vec<f64> = (0..8).map(|i| (i * i) as f64).collect();
        let neg: Vec<f64> = target.iter().map(|v| -v).collect();
        let rows = correlation_report(&groups, &[("id".into(), target.clone()), ("neg".into(), neg)], &target);
        assert_eq!(rows.len(), 4);
        assert!(rows
            .iter()
            .all(|r| r.kendall_abs == 1.0 && r.spearman_abs == 1.0 && r.n == 4));
        assert!(report_csv(&rows).starts_with("proxy_id,search_space,dataset,kendall_abs,spearman_abs,n\n"));
    }

    #[test]
    fn kendall_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(kendall_tau(&x, &x).unwrap(), 1.0);
        assert_eq!(kendall_tau(&x, &[4.0, 3.0, 2.0, 1.0]).unwrap(), -1.0);
        let t = kendall_tau(&x, &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((t - 4.0 / 6.0).abs() < 1e-15);
        assert!(matches!(
            kendall_tau(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(MetricError::Undefined(_))
        ));
    }

    #[test]
    fn kendall_ties_match_brute() {
        let x = [1.0, 1.0, 2.0, 2.0, 3.0, 0.5];
        let y = [2.0, 1.0, 2.0, 2.0, 0.0, 0.0];
        let a = kendall_tau(&x, &y).unwrap();
        let b = kendall_tau_brute(&x, &y).unwrap();
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn spearman_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let r = spearman_rho(&x, &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((r - 0.8).abs() < 1e-15);
        let m: Vec<f64> = x.iter().map(|v: &f64| v.exp()).collect();
        assert!((spearman_rho(&x, &m).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn average_ranks_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn split_fractions_per_bin() {
        let y: Vec<f64> = (0..1000).map(|i| i as f64 / 10.0).collect();
        let s = stratified_split(&y, 5, DEFAULT_FRACTIONS, 3).unwrap();
        for b in 0..5 {
            let rows: Vec<usize> = (0..y.len()).filter(|&i| s.bins[i] == b).collect();
            let train = rows.iter().filter(|&&i| s.tags[i] == SplitTag::Train).count();
            let frac = train as f64 / rows.len() as f64;
            assert!((0.68..=0.72).contains(&frac), "bin {b}: {frac}");
        }
        assert_eq!(s, stratified_split(&y, 5, DEFAULT_FRACTIONS, 3).unwrap());
    }

    #[test]
    fn constant_target_single_bin() {
        let s = stratified_split(&[5.0; 20], 5, DEFAULT_FRACTIONS, 0).unwrap();
        assert!(s.bins.iter().all(|&b| b == 0));
        assert_eq!(s.indices(SplitTag::Train).len(), 14);
        assert_eq!(s.indices(SplitTag::Val).len(), 3);
        assert_eq!(s.indices(SplitTag::Test).len(), 3);
    }

    #[test]
    fn too_few_rows() {
        assert!(stratified_split(&[1.0; 14], 5, DEFAULT_FRACTIONS, 0).is_err());
    }
}
