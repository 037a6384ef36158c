//! End-to-end flows: score networks into a table, then train, eliminate
//! features, tune, evaluate and report.
//!
//! Every flow is deterministic given its seeds. Wall-clock timings are the
//! only machine-dependent outputs and live in a separate sidecar file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Read;
use std::path::Path;
use std::time::Instant;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{instantiate, sample_spec, ArchSpec, Network, SearchSpace, SpecError, DEFAULT_BATCH};
use crate::config::{self, ConfigError};
use crate::dsl::{self, FormulaRegistry, RegistryError};
use crate::ensemble::{
    self, decode_hyperparams, fit_forest, hyperparam_space, rmse, FeatureCost, FitError, ForestModel, HyperParams,
    RfeData, RfeStep, Trial,
};
use crate::metrics::{self, CorrelationRow, MetricError, SplitAssignment, SplitMode, SplitTag};
use crate::probe::{
    gaussian_batch, run_for_stats, ProbeConfig, ProbeError, Stat, DEFAULT_NOISE_SIGMA, DEFAULT_PERTURB_EPS,
};
use crate::proxy::{self, AzComponents, ProxyError, TenasParts};
use crate::seed;
use crate::table::{self, num_classes, ScoreRow, ScoreTable, TableError, DATASETS, FEATURES, FORMULAS};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    /// Process exit code: 2 for usage errors, 3 for data and I/O errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Usage(_) => 2,
            PipelineError::Data(_) | PipelineError::Io { .. } => 3,
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

macro_rules! data_error {
    ($($t:ty),*) => {$(
        impl From<$t> for PipelineError {
            fn from(e: $t) -> Self {
                PipelineError::Data(e.to_string())
            }
        }
    )*};
}
data_error!(
    dsl::EvalError,
    ProxyError,
    ProbeError,
    FitError,
    MetricError,
    TableError,
    RegistryError,
    SpecError,
    ConfigError,
    serde_json::Error
);

/// Probe settings shared by every scored network.
#[derive(Debug, Clone)]
pub struct ScoreContext {
    pub registry: FormulaRegistry,
    pub noise_sigma: f64,
    pub perturb_eps: f64,
    pub batch: usize,
}

impl Default for ScoreContext {
    fn default() -> Self {
        Self {
            registry: FormulaRegistry::builtin(),
            noise_sigma: DEFAULT_NOISE_SIGMA,
            perturb_eps: DEFAULT_PERTURB_EPS,
            batch: DEFAULT_BATCH,
        }
    }
}

/// Computation group of a feature. Members of one group share their cost:
/// all formula proxies and gradnorm come from one probe record, and the four
/// AZ-NAS scores from one forward/backward sweep.
pub fn feature_group(feature: &str) -> &'static str {
    match feature {
        "cifar10" | "cifar100" | "imagenet16" => "dataset",
        "gradnorm" | "eznas" => "probe",
        f if FORMULAS.contains(&f) => "probe",
        "aznas" | "az_expressivity" | "az_progressivity" | "az_trainability" => "aznas",
        "synflow" => "synflow",
        "naswot" => "naswot",
        "tenas" => "tenas",
        "zennas" => "zennas",
        "zico" => "zico",
        "params" => "params",
        "flops" => "flops",
        other => panic!("unknown feature `{other}`"),
    }
}

/// Scores of one network over a feature subset.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkScores {
    /// Feature values; `tenas` holds the standalone score and `aznas` 0
    /// until population aggregation replaces them.
    pub values: BTreeMap<&'static str, f64>,
    pub tenas: Option<TenasParts>,
    pub az: Option<AzComponents>,
    /// Seconds per computation group.
    pub group_seconds: BTreeMap<&'static str, f64>,
    /// Seconds attributable to the feature alone (its own evaluation,
    /// excluding shared capture).
    pub feature_seconds: BTreeMap<&'static str, f64>,
}

fn canonical(feature: &str) -> Option<&'static str> {
    FEATURES.iter().copied().find(|f| *f == feature)
}

/// Compute `features` for `network`, tagging it with `dataset`.
pub fn score_network(
    network: &Network,
    dataset: &str,
    features: &[&str],
    ctx: &ScoreContext,
    seed_base: u64,
) -> Result<NetworkScores, PipelineError> {
    let wanted: Vec<&'static str> = features
        .iter()
        .map(|f| canonical(f).ok_or_else(|| PipelineError::Usage(format!("unknown feature `{f}`"))))
        .collect::<Result<_, _>>()?;
    let has = |f: &str| wanted.contains(&f);
    let mut out = NetworkScores {
        values: BTreeMap::new(),
        tenas: None,
        az: None,
        group_seconds: BTreeMap::new(),
        feature_seconds: BTreeMap::new(),
    };
    let batch = gaussian_batch(network, ctx.batch, seed::derive(seed_base, 0xba));

    let onehot = ensemble::one_hot(dataset, &DATASETS)?;
    for (tag, v) in DATASETS.iter().zip(onehot) {
        if has(tag) {
            out.values.insert(canonical(tag).expect("dataset feature"), v);
            out.feature_seconds
                .insert(canonical(tag).expect("dataset feature"), 0.0);
        }
    }
    if DATASETS.iter().any(|d| has(d)) {
        out.group_seconds.insert("dataset", 0.0);
    }

    // probe group
    let probe_features: Vec<&'static str> = wanted.iter().copied().filter(|f| feature_group(f) == "probe").collect();
    if !probe_features.is_empty() {
        let start = Instant::now();
        let mut exprs = Vec::new();
        let mut stats: Vec<Stat> = Vec::new();
        for &f in &probe_features {
            if f == "gradnorm" {
                stats.push("pass_grad".parse().expect("identifier"));
            } else {
                let e = ctx.registry.get(f)?;
                stats.extend(e.stats());
                exprs.push((f, e));
            }
        }
        stats.sort();
        stats.dedup();
        let cfg = ProbeConfig {
            noise_sigma: ctx.noise_sigma,
            perturb_eps: ctx.perturb_eps,
            label_seed: seed::derive(seed_base, 0x1a),
        };
        let record = run_for_stats(network, &batch, &cfg, &stats)?;
        for f in probe_features {
            let t = Instant::now();
            let v = if f == "gradnorm" {
                proxy::sanitize(proxy::gradnorm(&record)?)
            } else {
                let (_, e) = exprs.iter().find(|(id, _)| *id == f).expect("registered above");
                dsl::eval_formula(e, &record)?
            };
            out.feature_seconds.insert(f, t.elapsed().as_secs_f64());
            out.values.insert(f, v);
        }
        out.group_seconds.insert("probe", start.elapsed().as_secs_f64());
    }

    // AZ-NAS group
    let az_features: Vec<&'static str> = wanted.iter().copied().filter(|f| feature_group(f) == "aznas").collect();
    if !az_features.is_empty() {
        let start = Instant::now();
        let c = proxy::aznas_components(network, &batch, seed::derive(seed_base, 0xa2))?;
        for f in az_features {
            let v = match f {
                "az_expressivity" => c.expressivity,
                "az_progressivity" => c.progressivity,
                "az_trainability" => c.trainability,
                _ => 0.0,
            };
            out.values.insert(f, proxy::sanitize(v));
            out.feature_seconds.insert(f, 0.0);
        }
        out.az = Some(c);
        out.group_seconds.insert("aznas", start.elapsed().as_secs_f64());
    }

    let mut solo =
        |f: &'static str, compute: &mut dyn FnMut() -> Result<f64, ProxyError>| -> Result<(), PipelineError> {
            if has(f) {
                let start = Instant::now();
                let v = proxy::sanitize(compute()?);
                let secs = start.elapsed().as_secs_f64();
                out.values.insert(f, v);
                out.feature_seconds.insert(f, secs);
                out.group_seconds.insert(feature_group(f), secs);
            }
            Ok(())
        };
    solo("synflow", &mut || proxy::synflow(network))?;
    solo("naswot", &mut || proxy::naswot(network, &batch))?;
    let mut tenas = None;
    solo("tenas", &mut || {
        let parts = proxy::tenas_parts(network, seed::derive(seed_base, 0x7e))?;
        tenas = Some(parts);
        Ok(parts.standalone())
    })?;
    solo("zennas", &mut || {
        proxy::zen_score(network, ctx.batch, seed::derive(seed_base, 0x2e), proxy::ZEN_EPS)
    })?;
    solo("zico", &mut || {
        proxy::zico(network, 2, ctx.batch, seed::derive(seed_base, 0x21))
    })?;
    solo("params", &mut || Ok(proxy::params(network)))?;
    solo("flops", &mut || proxy::flops(network))?;
    out.tenas = tenas;
    Ok(out)
}

/// Per-dataset intercept of the surrogate accuracy. Together with the weights
/// below it keeps both spaces inside [0, 100] with little clamping.
const SURROGATE_INTERCEPT: [(&str, f64); 3] = [("cifar10", -58.0), ("cifar100", -67.0), ("imagenet16", -76.0)];
/// Weight of `ln(params)`.
const SURROGATE_PARAMS: f64 = 12.0;
/// Weight of the effective depth.
const SURROGATE_DEPTH: f64 = 4.0;
/// Weight of the FLOPs penalty `ln(1 + flops / 1e6)`.
const SURROGATE_FLOPS: f64 = 8.0;
/// Standard deviation of the target noise.
pub const SURROGATE_NOISE: f64 = 2.0;

/// Synthetic ground truth standing in for trained accuracies:
/// `clamp(b_d + a·ln(params) + b·depth − c·ln(1 + flops/1e6) + N(0, 2²), 0, 100)`.
pub fn surrogate_accuracy(network: &Network, dataset: &str, noise_seed: u64) -> Result<f64, PipelineError> {
    let intercept = SURROGATE_INTERCEPT
        .iter()
        .find(|(d, _)| *d == dataset)
        .map(|(_, v)| *v)
        .ok_or_else(|| PipelineError::Usage(format!("unknown dataset `{dataset}`")))?;
    let params = proxy::params(network);
    let flops = proxy::flops(network)?;
    let mut rng = seed::rng(noise_seed, 0xacc);
    let noise: f64 = StandardNormal.sample(&mut rng);
    let acc = intercept + SURROGATE_PARAMS * params.ln() + SURROGATE_DEPTH * network.spec.effective_depth() as f64
        - SURROGATE_FLOPS * (1.0 + flops / 1e6).ln()
        + SURROGATE_NOISE * noise;
    Ok(acc.clamp(0.0, 100.0))
}

/// Timing of one feature, summed over all networks of a collection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTiming {
    pub feature: String,
    pub group: String,
    pub group_seconds: f64,
    pub feature_seconds: f64,
}

pub fn write_timings(timings: &[FeatureTiming]) -> String {
    let mut s = String::from("feature,group,group_seconds,feature_seconds\n");
    for t in timings {
        let _ = writeln!(s, "{},{},{},{}", t.feature, t.group, t.group_seconds, t.feature_seconds);
    }
    s
}

pub fn read_timings(reader: impl Read) -> Result<Vec<FeatureTiming>, PipelineError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        out.push(rec.map_err(|e| PipelineError::Data(format!("timings: {e}")))?);
    }
    Ok(out)
}

/// Group costs for RFE from a timing sidecar; fails if a feature is missing.
pub fn feature_cost(timings: &[FeatureTiming], features: &[String]) -> Result<FeatureCost, PipelineError> {
    let mut cost = FeatureCost::default();
    for t in timings {
        cost.group_of.insert(t.feature.clone(), t.group.clone());
        cost.group_seconds.insert(t.group.clone(), t.group_seconds);
    }
    let missing: Vec<&String> = features.iter().filter(|f| !cost.group_of.contains_key(*f)).collect();
    if !missing.is_empty() {
        return Err(PipelineError::Data(format!("timing file has no entry for {missing:?}")));
    }
    Ok(cost)
}

/// Result of scoring a population.
#[derive(Debug, Clone)]
pub struct Collected {
    pub table: ScoreTable,
    pub timings: Vec<FeatureTiming>,
}

/// Settings of [`collect`].
#[derive(Debug, Clone)]
pub struct CollectConfig {
    pub space: SearchSpace,
    pub n: usize,
    pub seed: u64,
    pub workers: usize,
    /// Externally supplied accuracies keyed by `(spec, dataset)`; rows not
    /// found fall back to the surrogate.
    pub targets: Option<BTreeMap<(String, String), f64>>,
}

/// Per-row seeds: spec sampling, weight init, probing and target noise.
fn row_seed(space: SearchSpace, seed_base: u64, i: usize) -> u64 {
    let stream = match space {
        SearchSpace::Tss => 0x7500_0000,
        SearchSpace::Sss => 0x5500_0000,
    };
    seed::derive(seed_base, stream + i as u64)
}

/// Row `i`'s dataset tag: round-robin over the three datasets.
pub fn dataset_of(i: usize) -> &'static str {
    DATASETS[i % DATASETS.len()]
}

/// Sample `n` networks from one space, score all 26 features and attach
/// targets. Population-level scores (`tenas` rank-sum, `aznas` rank
/// aggregate) are computed over the collected networks.
pub fn collect(cfg: &CollectConfig, ctx: &ScoreContext) -> Result<Collected, PipelineError> {
    if cfg.n == 0 {
        return Err(PipelineError::Usage("n must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .map_err(|e| PipelineError::Usage(format!("worker pool: {e}")))?;
    let features: Vec<&str> = FEATURES.to_vec();
    let scored: Vec<(ScoreRow, NetworkScores)> = pool.install(|| {
        (0..cfg.n)
            .into_par_iter()
            .map(|i| {
                let s = row_seed(cfg.space, cfg.seed, i);
                let dataset = dataset_of(i);
                let spec =
                    sample_spec(cfg.space.as_str(), s)?.with_num_classes(num_classes(dataset).expect("known tag"));
                let network = instantiate(&spec, seed::derive(s, 1));
                let scores = score_network(&network, dataset, &features, ctx, seed::derive(s, 2))?;
                let spec_text = spec.to_string();
                let accuracy = match cfg
                    .targets
                    .as_ref()
                    .and_then(|t| t.get(&(spec_text.clone(), dataset.to_string())))
                {
                    Some(&a) => a,
                    None => surrogate_accuracy(&network, dataset, seed::derive(s, 3))?,
                };
                let mut row = ScoreRow {
                    net_id: format!("{}-{i:05}", cfg.space.as_str()),
                    spec: spec_text,
                    search_space: cfg.space.as_str().to_string(),
                    dataset: dataset.to_string(),
                    features: [0.0; 26],
                    accuracy,
                };
                for (f, v) in &scores.values {
                    row.set(f, *v);
                }
                Ok((row, scores))
            })
            .collect::<Result<Vec<_>, PipelineError>>()
    })?;

    let start = Instant::now();
    let mut rows: Vec<ScoreRow> = scored.iter().map(|(r, _)| r.clone()).collect();
    if rows.len() >= 2 {
        let tenas: Vec<TenasParts> = scored.iter().map(|(_, s)| s.tenas.expect("tenas scored")).collect();
        for (row, v) in rows.iter_mut().zip(proxy::tenas_population(&tenas)) {
            row.set("tenas", v);
        }
        let az: Vec<AzComponents> = scored.iter().map(|(_, s)| s.az.expect("aznas scored")).collect();
        for (row, v) in rows.iter_mut().zip(proxy::aznas_aggregate(&az)?) {
            row.set("aznas", v);
        }
    }
    let aggregate_seconds = start.elapsed().as_secs_f64();

    let mut group_total: BTreeMap<&str, f64> = BTreeMap::new();
    let mut feature_total: BTreeMap<&str, f64> = BTreeMap::new();
    for (_, s) in &scored {
        for (g, v) in &s.group_seconds {
            *group_total.entry(g).or_default() += v;
        }
        for (f, v) in &s.feature_seconds {
            *feature_total.entry(f).or_default() += v;
        }
    }
    *group_total.entry("aznas").or_default() += aggregate_seconds / 2.0;
    *group_total.entry("tenas").or_default() += aggregate_seconds / 2.0;
    let timings = FEATURES
        .iter()
        .map(|f| {
            let g = feature_group(f);
            FeatureTiming {
                feature: f.to_string(),
                group: g.to_string(),
                group_seconds: group_total.get(g).copied().unwrap_or(0.0),
                feature_seconds: feature_total.get(f).copied().unwrap_or(0.0),
            }
        })
        .collect();
    Ok(Collected {
        table: ScoreTable { rows },
        timings,
    })
}

/// One row for a single spec. Without a population, `tenas` is the
/// standalone `R − ln κ` and `aznas` is 0.
pub fn score_spec(
    spec_text: &str,
    dataset: &str,
    init_seed: u64,
    ctx: &ScoreContext,
) -> Result<ScoreRow, PipelineError> {
    let classes = num_classes(dataset).ok_or_else(|| PipelineError::Usage(format!("unknown dataset `{dataset}`")))?;
    let spec: ArchSpec = spec_text
        .parse()
        .map_err(|e: SpecError| PipelineError::Usage(e.to_string()))?;
    let spec = spec.with_num_classes(classes);
    let network = instantiate(&spec, init_seed);
    let scores = score_network(&network, dataset, &FEATURES, ctx, seed::derive(init_seed, 2))?;
    let mut row = ScoreRow {
        net_id: format!("{}-single", spec.space().as_str()),
        spec: spec.to_string(),
        search_space: spec.space().as_str().to_string(),
        dataset: dataset.to_string(),
        features: [0.0; 26],
        accuracy: surrogate_accuracy(&network, dataset, seed::derive(init_seed, 3))?,
    };
    for (f, v) in &scores.values {
        row.set(f, *v);
    }
    Ok(row)
}

/// Named feature presets.
pub fn preset(name: &str) -> Option<Vec<String>> {
    let list: Vec<&str> = match name {
        "all" => FEATURES.to_vec(),
        "greenfactory" => FEATURES.iter().copied().filter(|f| *f != "synflow").collect(),
        "fast" => vec!["gm_e", "gm_f", "gm_j", "gradnorm", "eznas", "cifar10"],
        _ => return None,
    };
    Some(list.into_iter().map(str::to_string).collect())
}

/// A preset name or a comma-separated explicit list.
pub fn resolve_features(spec: &str) -> Result<Vec<String>, PipelineError> {
    if let Some(p) = preset(spec) {
        return Ok(p);
    }
    let list: Vec<String> = spec
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    if list.is_empty() {
        return Err(PipelineError::Usage("empty feature list".into()));
    }
    let missing: Vec<&String> = list.iter().filter(|f| table::feature_index(f).is_none()).collect();
    if !missing.is_empty() {
        return Err(PipelineError::Usage(format!(
            "features not in the table header: {missing:?}"
        )));
    }
    Ok(list)
}

/// A trained model with the split it was trained on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedModel {
    pub forest: ForestModel,
    pub split_mode: SplitMode,
    pub split_seed: u64,
    pub forest_seed: u64,
}

impl SavedModel {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let m: SavedModel = serde_json::from_str(text)?;
        if m.forest.version != ensemble::MODEL_VERSION {
            return Err(PipelineError::Data(format!(
                "unsupported model version {}",
                m.forest.version
            )));
        }
        Ok(m)
    }
}

/// RMSE of one `(search_space, dataset)` slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmseRow {
    pub search_space: String,
    pub dataset: String,
    pub rmse: f64,
    pub n: usize,
}

fn group_key(row: &ScoreRow) -> (String, String) {
    (row.search_space.clone(), row.dataset.clone())
}

pub fn rmse_by_group(table: &ScoreTable, rows: &[usize], pred: &[f64]) -> Vec<RmseRow> {
    let mut groups: BTreeMap<(String, String), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (&r, &p) in rows.iter().zip(pred) {
        let e = groups.entry(group_key(&table.rows[r])).or_default();
        e.0.push(p);
        e.1.push(table.rows[r].accuracy);
    }
    let mut out: Vec<RmseRow> = groups
        .into_iter()
        .map(|((s, d), (p, y))| RmseRow {
            search_space: s,
            dataset: d,
            rmse: rmse(&p, &y),
            n: y.len(),
        })
        .collect();
    if !rows.is_empty() {
        let y = table.targets(rows);
        out.push(RmseRow {
            search_space: "all".into(),
            dataset: "all".into(),
            rmse: rmse(pred, &y),
            n: y.len(),
        });
    }
    out
}

pub fn rmse_csv(rows: &[RmseRow]) -> String {
    let mut s = String::from("search_space,dataset,rmse,n\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.search_space, r.dataset, r.rmse, r.n);
    }
    s
}

pub fn split_table(table: &ScoreTable, mode: SplitMode, seed: u64) -> Result<SplitAssignment, PipelineError> {
    Ok(metrics::split(&table.all_targets(), mode, seed)?)
}

/// Settings of [`train`].
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub features: Vec<String>,
    pub hyperparams: HyperParams,
    pub split_mode: SplitMode,
    pub split_seed: u64,
    pub forest_seed: u64,
}

pub struct TrainOutput {
    pub model: SavedModel,
    pub test_rmse: Vec<RmseRow>,
}

pub fn train(table: &ScoreTable, cfg: &TrainConfig) -> Result<TrainOutput, PipelineError> {
    let cols = ScoreTable::resolve(&cfg.features).map_err(|e| PipelineError::Usage(e.to_string()))?;
    let split = split_table(table, cfg.split_mode, cfg.split_seed)?;
    let train_rows = split.indices(SplitTag::Train);
    let forest = fit_forest(
        &table.matrix(&cols, &train_rows),
        &table.targets(&train_rows),
        &cfg.features,
        &cfg.hyperparams,
        cfg.forest_seed,
    )?;
    let test_rows = split.indices(SplitTag::Test);
    let pred = forest.predict(&table.matrix(&cols, &test_rows))?;
    Ok(TrainOutput {
        test_rmse: rmse_by_group(table, &test_rows, &pred),
        model: SavedModel {
            forest,
            split_mode: cfg.split_mode,
            split_seed: cfg.split_seed,
            forest_seed: cfg.forest_seed,
        },
    })
}

/// Evaluation of a saved model on one slice of a table.
pub struct EvalOutput {
    pub correlations: Vec<CorrelationRow>,
    pub rmse: Vec<RmseRow>,
}

/// Correlations of every table proxy and of the ensemble's predictions
/// with the target on `slice` of the split described by `mode`/the model's
/// split seed; RMSE per group.
pub fn evaluate(
    model: &SavedModel,
    table: &ScoreTable,
    mode: SplitMode,
    slice: SplitTag,
) -> Result<EvalOutput, PipelineError> {
    let cols = ScoreTable::resolve(&model.forest.feature_names)
        .map_err(|e| PipelineError::Data(format!("model/table feature mismatch: {e}")))?;
    let split = split_table(table, mode, model.split_seed)?;
    let rows = split.indices(slice);
    let pred = model.forest.predict(&table.matrix(&cols, &rows))?;
    let groups: Vec<(String, String)> = rows.iter().map(|&r| group_key(&table.rows[r])).collect();
    let target = table.targets(&rows);
    let mut columns: Vec<(String, Vec<f64>)> = proxy_columns()
        .into_iter()
        .map(|f| {
            let c = table::feature_index(f).expect("proxy column");
            (f.to_string(), rows.iter().map(|&r| table.rows[r].features[c]).collect())
        })
        .collect();
    columns.push(("ensemble".to_string(), pred.clone()));
    Ok(EvalOutput {
        correlations: metrics::correlation_report(&groups, &columns, &target),
        rmse: rmse_by_group(table, &rows, &pred),
    })
}

/// Columns compared against the ensemble: the 21 proxies plus params and
/// FLOPs (dataset indicators carry no ranking information).
pub fn proxy_columns() -> Vec<&'static str> {
    FEATURES.iter().copied().filter(|f| !DATASETS.contains(f)).collect()
}

/// Correlation report of the table's proxy columns on a slice.
pub fn report(
    table: &ScoreTable,
    slice: Option<(SplitMode, u64, SplitTag)>,
) -> Result<Vec<CorrelationRow>, PipelineError> {
    let rows: Vec<usize> = match slice {
        Some((mode, seed, tag)) => split_table(table, mode, seed)?.indices(tag),
        None => (0..table.len()).collect(),
    };
    let groups: Vec<(String, String)> = rows.iter().map(|&r| group_key(&table.rows[r])).collect();
    let target = table.targets(&rows);
    let columns: Vec<(String, Vec<f64>)> = proxy_columns()
        .into_iter()
        .map(|f| {
            let c = table::feature_index(f).expect("proxy column");
            (f.to_string(), rows.iter().map(|&r| table.rows[r].features[c]).collect())
        })
        .collect();
    Ok(metrics::correlation_report(&groups, &columns, &target))
}

/// Validation-slice data of a table for model selection.
pub struct Holdout {
    pub x_train: Vec<Vec<f64>>,
    pub y_train: Vec<f64>,
    pub x_val: Vec<Vec<f64>>,
    pub y_val: Vec<f64>,
}

pub fn holdout(
    table: &ScoreTable,
    features: &[String],
    mode: SplitMode,
    split_seed: u64,
) -> Result<Holdout, PipelineError> {
    let cols = ScoreTable::resolve(features).map_err(|e| PipelineError::Usage(e.to_string()))?;
    let split = split_table(table, mode, split_seed)?;
    let tr = split.indices(SplitTag::Train);
    let va = split.indices(SplitTag::Val);
    Ok(Holdout {
        x_train: table.matrix(&cols, &tr),
        y_train: table.targets(&tr),
        x_val: table.matrix(&cols, &va),
        y_val: table.targets(&va),
    })
}

/// Recursive feature elimination over `features` on the validation slice.
pub fn rfe(
    table: &ScoreTable,
    timings: &[FeatureTiming],
    features: &[String],
    hp: &HyperParams,
    split_mode: SplitMode,
    seed: u64,
) -> Result<Vec<RfeStep>, PipelineError> {
    let cost = feature_cost(timings, features)?;
    let h = holdout(table, features, split_mode, seed)?;
    Ok(ensemble::rfe(
        &RfeData {
            x_train: &h.x_train,
            y_train: &h.y_train,
            x_val: &h.x_val,
            y_val: &h.y_val,
            names: features,
        },
        hp,
        seed,
        &cost,
    )?)
}

pub fn rfe_csv(steps: &[RfeStep]) -> String {
    let mut s = String::from("k,rmse,time,score\n");
    for st in steps {
        let _ = writeln!(s, "{},{},{},{}", st.k, st.rmse, st.time_seconds, st.score);
    }
    s
}

/// Selected-feature matrix: one row per step, one 0/1 column per feature.
pub fn rfe_heatmap_csv(steps: &[RfeStep], features: &[String]) -> String {
    let mut s = format!("k,{}\n", features.join(","));
    for st in steps {
        let flags: Vec<&str> = features
            .iter()
            .map(|f| if st.features.contains(f) { "1" } else { "0" })
            .collect();
        let _ = writeln!(s, "{},{}", st.k, flags.join(","));
    }
    s
}

/// Recompute trade-off scores from a CSV with `rmse` and `time` columns
/// (any other columns are carried through untouched).
pub fn rescore_csv(reader: impl Read) -> Result<String, PipelineError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers().map_err(|e| PipelineError::Data(e.to_string()))?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim().eq_ignore_ascii_case(name))
            .ok_or_else(|| PipelineError::Data(format!("missing column `{name}`")))
    };
    let (ri, ti) = (find("rmse")?, find("time")?);
    let k = headers.iter().position(|h| h.trim().eq_ignore_ascii_case("k"));
    let mut keys = Vec::new();
    let (mut r, mut t) = (Vec::new(), Vec::new());
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| PipelineError::Data(e.to_string()))?;
        let num = |j: usize| -> Result<f64, PipelineError> {
            rec[j]
                .trim()
                .parse()
                .map_err(|_| PipelineError::Data(format!("row {}: `{}` is not a number", i + 1, &rec[j])))
        };
        r.push(num(ri)?);
        t.push(num(ti)?);
        keys.push(k.map_or_else(|| (i + 1).to_string(), |k| rec[k].trim().to_string()));
    }
    let scores = ensemble::tradeoff_score(&r, &t)?;
    let mut s = String::from("k,rmse,time,score\n");
    for i in 0..r.len() {
        let _ = writeln!(s, "{},{},{},{}", keys[i], r[i], t[i], scores[i]);
    }
    Ok(s)
}

/// Result of hyperparameter tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tuned {
    pub hyperparams: HyperParams,
    pub validation_rmse: f64,
    pub features: Vec<String>,
    pub split_seed: u64,
    pub random_search: bool,
    pub trials: Vec<TrialRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub hyperparams: HyperParams,
    pub objective: f64,
}

/// Tune forest hyperparameters on the validation slice.
pub fn tune(
    table: &ScoreTable,
    features: &[String],
    trials: usize,
    split_mode: SplitMode,
    seed: u64,
    random_search: bool,
) -> Result<Tuned, PipelineError> {
    if trials < ensemble::TPE_WARMUP {
        return Err(PipelineError::Usage(format!(
            "at least {} trials are required, got {trials}",
            ensemble::TPE_WARMUP
        )));
    }
    let h = holdout(table, features, split_mode, seed)?;
    let objective = |v: &[f64]| -> f64 {
        let hp = decode_hyperparams(v);
        match fit_forest(&h.x_train, &h.y_train, features, &hp, seed).and_then(|m| m.predict(&h.x_val)) {
            Ok(p) => rmse(&p, &h.y_val),
            Err(_) => f64::INFINITY,
        }
    };
    // Like an enqueued trial: the in-range defaults are always evaluated, so
    // tuning never ends worse than them on the validation slice.
    let start = ensemble::encode_hyperparams(&ensemble::default_in_tuning_space()).expect("in range");
    let result =
        ensemble::tpe_optimize_enqueued(&hyperparam_space(), objective, trials, seed, random_search, &[start])?;
    let record = |i: usize, t: &Trial| TrialRecord {
        trial: i,
        hyperparams: decode_hyperparams(&t.params),
        objective: t.objective,
    };
    Ok(Tuned {
        hyperparams: decode_hyperparams(&result.best.params),
        validation_rmse: result.best.objective,
        features: features.to_vec(),
        split_seed: seed,
        random_search,
        trials: result.trials.iter().enumerate().map(|(i, t)| record(i, t)).collect(),
    })
}

pub fn trial_log_csv(trials: &[TrialRecord]) -> String {
    let mut s = String::from(
        "trial,n_estimators,max_features,min_samples_split,min_samples_leaf,max_depth,bootstrap,objective\n",
    );
    for t in trials {
        let hp = &t.hyperparams;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            t.trial,
            hp.n_estimators,
            hp.max_features,
            hp.min_samples_split,
            hp.min_samples_leaf,
            hp.max_depth.map_or("none".to_string(), |d| d.to_string()),
            hp.bootstrap,
            t.objective
        );
    }
    s
}

/// Hyperparameters from `key = value` text (keys as in [`HyperParams`]);
/// missing keys keep their defaults.
pub fn hyperparams_from_config(text: &str) -> Result<HyperParams, PipelineError> {
    let map = config::parse_map(text)?;
    apply_hyperparams(HyperParams::default(), &map)
}

pub fn apply_hyperparams(mut hp: HyperParams, map: &BTreeMap<String, String>) -> Result<HyperParams, PipelineError> {
    fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, PipelineError> {
        v.parse()
            .map_err(|_| PipelineError::Usage(format!("invalid value `{v}` for `{key}`")))
    }
    for (k, v) in map {
        match k.as_str() {
            "n_estimators" => hp.n_estimators = num(k, v)?,
            "max_features" => hp.max_features = v.parse().map_err(PipelineError::Usage)?,
            "min_samples_split" => hp.min_samples_split = num(k, v)?,
            "min_samples_leaf" => hp.min_samples_leaf = num(k, v)?,
            "max_depth" => hp.max_depth = if v == "none" { None } else { Some(num(k, v)?) },
            "bootstrap" => hp.bootstrap = num(k, v)?,
            _ => {}
        }
    }
    hp.validate()?;
    Ok(hp)
}

/// Write `contents` to `path` atomically (temporary sibling + rename).
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), PipelineError> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    std::fs::write(&tmp, contents).map_err(|e| PipelineError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| PipelineError::io(path, e))
}

pub fn read_file(path: &Path) -> Result<String, PipelineError> {
    std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))
}

pub fn read_table(path: &Path) -> Result<ScoreTable, PipelineError> {
    let text = read_file(path)?;
    Ok(ScoreTable::read(text.as_bytes())?)
}

/// Externally computed targets from a CSV with columns `spec,dataset,accuracy`.
pub fn read_targets(reader: impl Read) -> Result<BTreeMap<(String, String), f64>, PipelineError> {
    #[derive(Deserialize)]
    struct Row {
        spec: String,
        dataset: String,
        accuracy: f64,
    }
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = BTreeMap::new();
    for rec in rdr.deserialize() {
        let r: Row = rec.map_err(|e| PipelineError::Data(format!("targets: {e}")))?;
        out.insert((r.spec, r.dataset), r.accuracy);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_have_expected_sizes() {
        assert_eq!(preset("fast").unwrap().len(), 6);
        assert_eq!(preset("greenfactory").unwrap().len(), 25);
        assert!(!preset("greenfactory").unwrap().contains(&"synflow".to_string()));
        assert_eq!(preset("all").unwrap().len(), 26);
    }

    #[test]
    fn explicit_list_validated() {
        assert_eq!(resolve_features("gm_a, params").unwrap(), vec!["gm_a", "params"]);
        let err = resolve_features("gm_a,bogus,nope").unwrap_err();
        assert!(err.to_string().contains("bogus") && err.to_string().contains("nope"));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn every_feature_has_a_group() {
        for f in FEATURES {
            feature_group(f);
        }
        assert_eq!(feature_group("gm_c"), "probe");
        assert_eq!(feature_group("az_trainability"), "aznas");
    }

    #[test]
    fn score_row_is_deterministic() {
        let ctx = ScoreContext::default();
        let a = score_spec("tss|skip,skip,skip,skip,skip,skip", "cifar10", 4, &ctx).unwrap();
        let b = score_spec("tss|skip,skip,skip,skip,skip,skip", "cifar10", 4, &ctx).unwrap();
        assert_eq!(a, b);
        assert!(a.features.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn hyperparams_config_overrides() {
        let hp = hyperparams_from_config("n_estimators = 968\nmax_features = 8\nmax_depth = 38\nbootstrap = false\n")
            .unwrap();
        assert_eq!(hp.n_estimators, 968);
        assert_eq!(hp.max_features, ensemble::MaxFeatures::Count(8));
        assert_eq!(hp.max_depth, Some(38));
        assert!(!hp.bootstrap);
    }

    #[test]
    fn rescore_reproduces_self_consistent_scores() {
        let csv = "k,rmse,time\n1,2.0,1.0\n2,1.0,3.0\n3,1.0,1.0\n";
        let out = rescore_csv(csv.as_bytes()).unwrap();
        assert_eq!(out, "k,rmse,time,score\n1,2,1,0.5\n2,1,3,0.5\n3,1,1,0\n");
    }
}
