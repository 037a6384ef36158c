//! Acceptance suite: every criterion at its pinned tolerance, one pass/fail
//! line each. Runs as a plain binary (`harness = false`) so the lines are
//! printed even when every criterion passes.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use greenfactory::arch::{instantiate, sample_spec, SearchSpace};
use greenfactory::dsl::{self, eval_formula, pretty_print, FormulaRegistry, DEFAULT_REGISTRY};
use greenfactory::ensemble::{
    self, fit_forest, fit_tree, rmse, tpe_optimize, tradeoff_score, Dim, FeatureCost, HyperParams, MaxFeatures,
    RfeData, TPE_WARMUP,
};
use greenfactory::metrics::{kendall_tau, kendall_tau_brute, pearson, spearman_rho, SplitMode, SplitTag};
use greenfactory::pipeline::{self as pl, CollectConfig, SavedModel, ScoreContext, TrainConfig};
use greenfactory::probe::{gaussian_batch, run_probes, DEFAULT_NOISE_SIGMA, DEFAULT_PERTURB_EPS};
use greenfactory::table::{ScoreTable, FORMULAS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Outcome of one criterion: pass flag and a one-line summary.
struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------------------
// 1. trade-off score on a reference elimination table

/// `(k, rmse, time, reference score)` rows of a reference elimination run.
const REFERENCE_RFE: [(usize, f64, f64, f64); 26] = [
    (1, 13.411, 1.429, 0.500),
    (2, 5.022, 1.399, 0.169),
    (3, 2.571, 2.363, 0.088),
    (4, 2.009, 2.361, 0.066),
    (5, 1.477, 3.286, 0.059),
    (6, 1.282, 3.589, 0.056),
    (7, 1.314, 7.637, 0.122),
    (8, 1.011, 8.089, 0.117),
    (9, 0.954, 8.044, 0.114),
    (10, 0.928, 8.916, 0.127),
    (11, 0.820, 9.173, 0.127),
    (12, 0.810, 18.075, 0.267),
    (13, 0.785, 23.509, 0.352),
    (14, 0.813, 24.243, 0.365),
    (15, 0.776, 28.264, 0.427),
    (16, 0.756, 28.143, 0.425),
    (17, 0.775, 27.332, 0.412),
    (18, 0.749, 29.893, 0.452),
    (19, 0.755, 30.180, 0.457),
    (20, 0.767, 30.195, 0.458),
    (21, 0.761, 30.472, 0.462),
    (22, 0.766, 32.230, 0.490),
    (23, 0.761, 31.618, 0.480),
    (24, 0.794, 29.494, 0.447),
    (25, 0.734, 32.059, 0.486),
    (26, 0.768, 32.956, 0.501),
];

fn tradeoff_reproduction() -> Outcome {
    let start = Instant::now();
    let r: Vec<f64> = REFERENCE_RFE.iter().map(|row| row.1).collect();
    let t: Vec<f64> = REFERENCE_RFE.iter().map(|row| row.2).collect();
    let scores = tradeoff_score(&r, &t).expect("26 rows");
    let worst = REFERENCE_RFE
        .iter()
        .zip(&scores)
        .map(|(row, s)| (s - row.3).abs())
        .fold(0.0, f64::max);
    let anchors = [(1, 0.500), (2, 0.169), (6, 0.056), (26, 0.501)]
        .iter()
        .all(|&(k, want)| (scores[k - 1] - want).abs() <= 0.001);
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= 0.001 && anchors && secs < 1.0,
        format!("26 rows, max |score - reference| = {worst:.2e} (tol 1e-3), anchors ok = {anchors}, {secs:.3}s"),
    )
}

// ---------------------------------------------------------------------------
// 2. formula programs

fn dsl_fidelity() -> Outcome {
    let start = Instant::now();
    let reg = match FormulaRegistry::parse(DEFAULT_REGISTRY) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("registry does not parse: {e}")),
    };
    let mut problems = Vec::new();
    for id in FORMULAS {
        match reg.get(id) {
            Ok(expr) => {
                if dsl::parse(&pretty_print(expr)).as_ref() != Ok(expr) {
                    problems.push(format!("{id} does not round-trip"));
                }
            }
            Err(e) => problems.push(e.to_string()),
        }
    }
    let mut evaluated = 0;
    for i in 0..100u64 {
        let space = if i % 2 == 0 { "tss" } else { "sss" };
        let spec = sample_spec(space, 0xf022 + i).expect("known space");
        let net = instantiate(&spec, i);
        let batch = gaussian_batch(&net, 8, i);
        let record = match run_probes(&net, &batch, DEFAULT_NOISE_SIGMA, DEFAULT_PERTURB_EPS, i) {
            Ok(r) => r,
            Err(e) => {
                problems.push(format!("probe of {spec}: {e}"));
                continue;
            }
        };
        for id in FORMULAS {
            let Ok(expr) = reg.get(id) else { continue };
            match eval_formula(expr, &record) {
                Ok(v) if v.is_finite() => evaluated += 1,
                Ok(v) => problems.push(format!("{id} on {spec}: {v}")),
                Err(e) => problems.push(format!("{id} on {spec}: {e}")),
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        problems.is_empty() && secs < 120.0,
        format!(
            "10 programs parse and round-trip, {evaluated}/1000 evaluations finite on 100 networks, {secs:.1}s{}",
            if problems.is_empty() {
                String::new()
            } else {
                format!("; problems: {problems:?}")
            }
        ),
    )
}

// ---------------------------------------------------------------------------
// 3. gradients

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let cases = common::grad_cases();
    let mut worst = (0.0f64, "");
    for (i, case) in cases.iter().enumerate() {
        let e = common::worst_grad_error(case, 100, 0xacc3 + i as u64);
        if e > worst.0 {
            worst = (e, case.name);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst.0 < 1e-4 && secs < 60.0,
        format!(
            "{} primitives x 100 points, worst relative error {:.2e} ({}), {secs:.1}s",
            cases.len(),
            worst.0,
            worst.1
        ),
    )
}

// ---------------------------------------------------------------------------
// 4. rank metrics

/// Average ranks by sorting, written independently of the library.
fn oracle_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn oracle_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn rank_metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x7a0);
    let (mut worst_tau, mut worst_rho) = (0.0f64, 0.0f64);
    let mut disagreements = 0;
    for _ in 0..1000 {
        let n = rng.random_range(2..80);
        let levels = rng.random_range(2..8);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64).collect();
        match (kendall_tau(&x, &y), kendall_tau_brute(&x, &y)) {
            (Ok(a), Ok(b)) => worst_tau = worst_tau.max((a - b).abs()),
            (Err(_), Err(_)) => {}
            _ => disagreements += 1,
        }
        let (rx, ry) = (oracle_ranks(&x), oracle_ranks(&y));
        let want = oracle_pearson(&rx, &ry);
        match spearman_rho(&x, &y) {
            Ok(v) if want.is_finite() => worst_rho = worst_rho.max((v - want).abs()),
            Err(_) if !want.is_finite() => {}
            _ => disagreements += 1,
        }
    }
    let a = [1.0, 2.0, 3.0, 4.0];
    let b = [1.0, 3.0, 2.0, 4.0];
    let tau = kendall_tau(&a, &b).unwrap();
    let rho = spearman_rho(&a, &b).unwrap();
    let worked = tau == 2.0 / 3.0 && rho == 0.8 && pearson(&a, &b).is_ok();
    outcome(
        worst_tau <= 1e-12 && worst_rho <= 1e-12 && disagreements == 0 && worked,
        format!(
            "1000 tied vectors: max |tau - brute| = {worst_tau:.1e}, max |rho - rank-pearson| = {worst_rho:.1e}, \
             {disagreements} definedness mismatches; worked example tau = {tau}, rho = {rho}"
        ),
    )
}

// ---------------------------------------------------------------------------
// 5. forest sanity

fn uniform_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(0.0..1.0)).collect())
        .collect()
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn names(d: usize) -> Vec<String> {
    (0..d).map(|i| format!("x{i}")).collect()
}

fn forest_sanity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xf05);
    // memorization
    let x = uniform_rows(200, 5, &mut rng);
    let y: Vec<f64> = (0..200).map(|_| rng.random_range(0.0..100.0)).collect();
    let hp = HyperParams {
        n_estimators: 1,
        bootstrap: false,
        max_depth: None,
        min_samples_leaf: 1,
        min_samples_split: 2,
        max_features: MaxFeatures::All,
    };
    let tree = fit_tree(&x, &y, &hp, 0).expect("fit");
    let train_rmse = rmse(&x.iter().map(|r| tree.predict_row(r)).collect::<Vec<_>>(), &y);

    // planted signal
    let mut planted = 0;
    for seed in 0..30u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = uniform_rows(300, 20, &mut rng);
        let y: Vec<f64> = x.iter().map(|r| 3.0 * r[0] + 0.5 * normal(&mut rng)).collect();
        let hp = HyperParams {
            n_estimators: 50,
            ..HyperParams::default()
        };
        let model = fit_forest(&x, &y, &names(20), &hp, seed).expect("fit");
        let top = (0..20)
            .max_by(|&a, &b| model.importances[a].total_cmp(&model.importances[b]))
            .unwrap();
        planted += usize::from(top == 0);
    }

    // bounded predictions, including far outside the training box
    let mut rng = ChaCha8Rng::seed_from_u64(0xb0d);
    let x = uniform_rows(150, 4, &mut rng);
    let y: Vec<f64> = x.iter().map(|r| 10.0 * r[0] - 4.0 * r[1] * r[2] + r[3]).collect();
    let (lo, hi) = y
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let model = fit_forest(&x, &y, &names(4), &HyperParams::default(), 1).expect("fit");
    let probes: Vec<Vec<f64>> = (0..2000)
        .map(|_| (0..4).map(|_| rng.random_range(-1e3..1e3)).collect())
        .collect();
    let outside = model
        .predict(&probes)
        .unwrap()
        .iter()
        .chain(&model.predict(&x).unwrap())
        .filter(|&&p| p < lo || p > hi)
        .count();
    outcome(
        train_rmse == 0.0 && planted >= 28 && outside == 0,
        format!("single-tree train RMSE {train_rmse}, planted feature ranked first in {planted}/30 seeds (need 28), {outside} predictions outside the target range"),
    )
}

// ---------------------------------------------------------------------------
// 6. ensemble beats every single proxy

/// The 600-per-space benchmark, collected on first use.
fn benchmark() -> Result<&'static (ScoreTable, f64), String> {
    static TABLE: OnceLock<Result<(ScoreTable, f64), String>> = OnceLock::new();
    TABLE
        .get_or_init(|| {
            let start = Instant::now();
            let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
            let ctx = ScoreContext::default();
            let mut table = ScoreTable::default();
            for space in [SearchSpace::Tss, SearchSpace::Sss] {
                let cfg = CollectConfig {
                    space,
                    n: 600,
                    seed: 7,
                    workers,
                    targets: None,
                };
                let c = pl::collect(&cfg, &ctx).map_err(|e| format!("collect {}: {e}", space.as_str()))?;
                table.rows.extend(c.table.rows);
            }
            Ok((table, start.elapsed().as_secs_f64()))
        })
        .as_ref()
        .map_err(Clone::clone)
}

fn pipeline_ordering() -> Outcome {
    let start = Instant::now();
    let (table, collect_secs) = match benchmark() {
        Ok((t, secs)) => (t, *secs),
        Err(e) => return outcome(false, e.clone()),
    };
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    let features = pl::preset("all").expect("preset");
    let mut passing_seeds = 0;
    let mut wins_per_seed = Vec::new();
    for seed in 0..30u64 {
        let cfg = TrainConfig {
            features: features.clone(),
            hyperparams: HyperParams::default(),
            split_mode: SplitMode::Stratified,
            split_seed: seed,
            forest_seed: seed,
        };
        let trained = match pl::train(table, &cfg) {
            Ok(t) => t,
            Err(e) => return outcome(false, format!("train seed {seed}: {e}")),
        };
        let eval = match pl::evaluate(&trained.model, table, SplitMode::Stratified, SplitTag::Test) {
            Ok(e) => e,
            Err(e) => return outcome(false, format!("eval seed {seed}: {e}")),
        };
        let mut best_proxy: BTreeMap<(String, String), f64> = BTreeMap::new();
        let mut ensemble_tau: BTreeMap<(String, String), f64> = BTreeMap::new();
        for row in &eval.correlations {
            let key = (row.search_space.clone(), row.dataset.clone());
            if row.proxy_id == "ensemble" {
                ensemble_tau.insert(key, row.kendall_abs);
            } else {
                let e = best_proxy.entry(key).or_insert(0.0);
                *e = e.max(row.kendall_abs);
            }
        }
        let wins = ensemble_tau
            .iter()
            .filter(|(k, &t)| best_proxy.get(*k).is_some_and(|&b| t > b))
            .count();
        wins_per_seed.push(wins);
        passing_seeds += usize::from(wins >= 4 && ensemble_tau.len() == 6);
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        passing_seeds >= 24,
        format!(
            "{passing_seeds}/30 seeds with >= 4/6 group wins (need 24); wins per seed {wins_per_seed:?}; \
             1200 networks collected in {collect_secs:.0}s on {workers} worker(s), {secs:.0}s total"
        ),
    )
}

// ---------------------------------------------------------------------------
// 7. recursive feature elimination

fn rfe_behaviour() -> Outcome {
    let d = 23;
    let names = names(d);
    let hp = HyperParams {
        n_estimators: 50,
        ..HyperParams::default()
    };
    let cost = FeatureCost {
        group_of: names.iter().map(|n| (n.clone(), n.clone())).collect(),
        group_seconds: names.iter().map(|n| (n.clone(), 1.0)).collect(),
    };
    let mut kept_enough = 0;
    let mut exact = true;
    for seed in 0..30u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0x4fe0 + seed);
        // informative columns at seeded positions
        let mut cols: Vec<usize> = (0..d).collect();
        for i in (1..d).rev() {
            cols.swap(i, rng.random_range(0..=i));
        }
        let informative = [cols[0], cols[1], cols[2]];
        let mut sample = |n: usize| {
            let x = uniform_rows(n, d, &mut rng);
            let y: Vec<f64> = x
                .iter()
                .map(|r| {
                    3.0 * r[informative[0]] + 2.0 * r[informative[1]] + 1.5 * r[informative[2]] + 0.1 * normal(&mut rng)
                })
                .collect();
            (x, y)
        };
        let (x_train, y_train) = sample(300);
        let (x_val, y_val) = sample(100);
        let data = RfeData {
            x_train: &x_train,
            y_train: &y_train,
            x_val: &x_val,
            y_val: &y_val,
            names: &names,
        };
        let steps = ensemble::rfe(&data, &hp, seed, &cost).expect("rfe");
        let at6 = steps.iter().find(|s| s.k == 6).expect("k = 6 step");
        let survivors = informative
            .iter()
            .filter(|&&c| at6.features.contains(&names[c]))
            .count();
        kept_enough += usize::from(survivors >= 2);
        let full = fit_forest(&x_train, &y_train, &names, &hp, seed).expect("fit");
        let direct = rmse(&full.predict(&x_val).unwrap(), &y_val);
        exact &= steps[0].k == d && steps[0].rmse == direct;
    }
    outcome(
        kept_enough >= 27 && exact,
        format!("k = 6 keeps >= 2 of 3 informative features in {kept_enough}/30 seeds (need 27); k = max RMSE equals direct fit in every seed: {exact}"),
    )
}

// ---------------------------------------------------------------------------
// 8. tuner

fn tuner() -> Outcome {
    let space = [Dim::Float { lo: 0.0, hi: 10.0 }];
    let mut located = 0;
    let mut always_beats = true;
    for seed in 0..30u64 {
        let result = tpe_optimize(&space, |v| (v[0] - 3.0).powi(2), 200, seed, false).expect("tpe");
        let warmup_best = result.trials[..TPE_WARMUP]
            .iter()
            .map(|t| t.objective)
            .fold(f64::INFINITY, f64::min);
        always_beats &= result.best.objective < warmup_best;
        located += usize::from((result.best.params[0] - 3.0).abs() <= 0.3);
    }
    outcome(
        always_beats && located >= 28,
        format!("best beats the 20-trial warm-up in every seed: {always_beats}; optimum within 0.3 in {located}/30 seeds (need 28)"),
    )
}

// ---------------------------------------------------------------------------
// 9. determinism of the commands

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_greenfactory"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn pipeline_run(dir: &Path) -> Result<(), String> {
    let p = |f: &str| dir.join(f).to_string_lossy().into_owned();
    run_cli(&[
        "collect",
        "--space",
        "tss",
        "--n",
        "40",
        "--seed",
        "11",
        "--workers",
        "2",
        "--out",
        &p("scores.csv"),
    ])?;
    run_cli(&[
        "train",
        "--table",
        &p("scores.csv"),
        "--seed",
        "5",
        "--out",
        &p("model.json"),
    ])?;
    run_cli(&[
        "eval",
        "--model",
        &p("model.json"),
        "--table",
        &p("scores.csv"),
        "--out",
        &p("eval.csv"),
    ])
}

fn determinism() -> Outcome {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        if let Err(e) = pipeline_run(d.path()) {
            return outcome(false, e);
        }
    }
    // The timing sidecar holds wall-clock measurements and is excluded.
    let files = [
        "scores.csv",
        "model.json",
        "model.rmse.csv",
        "eval.csv",
        "eval.rmse.csv",
    ];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| std::fs::read(dirs[0].path().join(f)).ok() != std::fs::read(dirs[1].path().join(f)).ok())
        .collect();
    let loads = std::fs::read_to_string(dirs[0].path().join("model.json"))
        .ok()
        .is_some_and(|t| SavedModel::from_json(&t).is_ok());
    outcome(
        differing.is_empty() && loads,
        format!(
            "collect/train/eval twice: {} of {} artifacts byte-identical{}",
            files.len() - differing.len(),
            files.len(),
            if differing.is_empty() {
                String::new()
            } else {
                format!(", differing: {differing:?}")
            }
        ),
    )
}

// ---------------------------------------------------------------------------
// 10. fast preset economy

fn fast_economy() -> Outcome {
    let ctx = ScoreContext::default();
    let fast = pl::preset("fast").unwrap();
    let full = pl::preset("greenfactory").unwrap();
    let fast: Vec<&str> = fast.iter().map(String::as_str).collect();
    let full: Vec<&str> = full.iter().map(String::as_str).collect();
    let (mut t_fast, mut t_full) = (0.0, 0.0);
    for i in 0..100u64 {
        let space = if i % 2 == 0 { "tss" } else { "sss" };
        let net = instantiate(&sample_spec(space, 0xfa57 + i).unwrap(), i);
        let t = Instant::now();
        if let Err(e) = pl::score_network(&net, "cifar10", &fast, &ctx, i) {
            return outcome(false, format!("fast scoring: {e}"));
        }
        t_fast += t.elapsed().as_secs_f64();
        let t = Instant::now();
        if let Err(e) = pl::score_network(&net, "cifar10", &full, &ctx, i) {
            return outcome(false, format!("full scoring: {e}"));
        }
        t_full += t.elapsed().as_secs_f64();
    }
    let ratio = t_fast / t_full;
    outcome(
        ratio <= 0.25,
        format!(
            "100 networks: fast {t_fast:.2}s vs 25-feature {t_full:.2}s, ratio {:.1}% (limit 25%)",
            100.0 * ratio
        ),
    )
}

// ---------------------------------------------------------------------------
// supplementary: forest against the linear baseline on the same benchmark

fn forest_vs_linear() -> Outcome {
    let table = match benchmark() {
        Ok((t, _)) => t,
        Err(e) => return outcome(false, e.clone()),
    };
    let features = pl::preset("all").expect("preset");
    let mut wins = 0;
    let (mut rf_sum, mut lin_sum) = (0.0, 0.0);
    for seed in 0..30u64 {
        let h = match pl::holdout(table, &features, SplitMode::Stratified, seed) {
            Ok(h) => h,
            Err(e) => return outcome(false, e.to_string()),
        };
        let forest = fit_forest(&h.x_train, &h.y_train, &features, &HyperParams::default(), seed).expect("fit");
        let linear = ensemble::fit_linear(&h.x_train, &h.y_train).expect("fit");
        let rf = rmse(&forest.predict(&h.x_val).unwrap(), &h.y_val);
        let lin = rmse(&linear.predict(&h.x_val).unwrap(), &h.y_val);
        rf_sum += rf;
        lin_sum += lin;
        wins += usize::from(rf < lin);
    }
    outcome(
        wins >= 27,
        format!(
            "forest validation RMSE below the linear baseline in {wins}/30 seeds (mean {:.3} vs {:.3})",
            rf_sum / 30.0,
            lin_sum / 30.0
        ),
    )
}

fn main() {
    type Criterion = (&'static str, fn() -> Outcome);
    let criteria: [Criterion; 10] = [
        ("trade-off score reproduction", tradeoff_reproduction),
        ("formula DSL fidelity", dsl_fidelity),
        ("gradient correctness", gradient_correctness),
        ("rank-metric oracles", rank_metric_oracles),
        ("forest sanity", forest_sanity),
        ("ensemble ordering over single proxies", pipeline_ordering),
        ("recursive feature elimination", rfe_behaviour),
        ("tuner", tuner),
        ("command determinism", determinism),
        ("fast-preset economy", fast_economy),
    ];
    // `cargo test -- <filter>` selects criteria by number or name.
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let number = (i + 1).to_string();
        if !filters.is_empty() && !filters.iter().any(|f| *f == number || name.contains(f.as_str())) {
            continue;
        }
        let o = run();
        println!(
            "{} criterion {number} ({name}): {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        failed += usize::from(!o.pass);
    }
    // Not one of the ten criteria; reuses the criterion-6 benchmark.
    if filters.is_empty() || filters.iter().any(|f| f == "supplementary") {
        let o = forest_vs_linear();
        println!(
            "{} supplementary (forest vs linear baseline): {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        failed += usize::from(!o.pass);
    }
    if failed > 0 {
        println!("{failed} criterion/criteria failed");
        std::process::exit(1);
    }
}
