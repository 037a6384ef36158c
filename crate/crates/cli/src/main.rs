//! `greenfactory` command-line interface.
//!
//! Settings resolve as: command-line flag, then `--config` file entry, then
//! built-in default. Output files are written atomically.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use greenfactory::arch::SearchSpace;
use greenfactory::config;
use greenfactory::dsl::FormulaRegistry;
use greenfactory::ensemble::HyperParams;
use greenfactory::metrics::{report_csv, report_text, SplitMode, SplitTag};
use greenfactory::pipeline::{self as pl, PipelineError, SavedModel, ScoreContext, Tuned};
use greenfactory::probe::{DEFAULT_NOISE_SIGMA, DEFAULT_PERTURB_EPS};
use greenfactory::table::ScoreTable;

#[derive(Parser, Debug)]
#[command(
    name = "greenfactory",
    version,
    about = "Zero-cost proxy ensembles for training-free accuracy prediction"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Base seed for every random choice.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for network scoring and forest fitting.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Formula registry file replacing the built-in one.
    #[arg(long, global = true)]
    registry: Option<PathBuf>,
    /// Output path of the command's main artifact.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// `key = value` settings file (flags take precedence).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample networks, score all features and write a score table.
    Collect(CollectArgs),
    /// Score one architecture and print a table row.
    Score(ScoreArgs),
    /// Fit the ensemble on the training slice of a table.
    Train(TrainArgs),
    /// Recursive feature elimination with the error/time trade-off.
    Rfe(RfeArgs),
    /// Tune forest hyperparameters on the validation slice.
    Tune(TuneArgs),
    /// Correlation and RMSE report of a trained model.
    Eval(EvalArgs),
    /// Correlation report of the proxy columns of a table.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct CollectArgs {
    /// Search space: tss or sss.
    #[arg(long)]
    space: Option<String>,
    /// Number of networks.
    #[arg(long)]
    n: Option<usize>,
    /// CSV of externally computed `spec,dataset,accuracy` targets.
    #[arg(long)]
    target_csv: Option<PathBuf>,
    /// Timing sidecar path (default: `<out stem>.timings.csv`).
    #[arg(long)]
    timings: Option<PathBuf>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    perturb_eps: Option<f64>,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    /// Architecture, e.g. `tss|skip,conv3x3,none,conv1x1,avgpool3x3,skip`.
    spec: String,
    /// Dataset tag: cifar10, cifar100 or imagenet16.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    perturb_eps: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    table: Option<PathBuf>,
    /// Preset (all, greenfactory, fast) or comma-separated feature list.
    #[arg(long)]
    features: Option<String>,
    /// Hyperparameters: tuned JSON, model JSON or `key = value` file.
    #[arg(long)]
    hp: Option<PathBuf>,
    /// Split mode: stratified or random.
    #[arg(long)]
    split: Option<String>,
}

#[derive(Args, Debug)]
struct RfeArgs {
    #[arg(long)]
    table: Option<PathBuf>,
    /// Timing sidecar written by `collect`.
    #[arg(long)]
    timings: Option<PathBuf>,
    #[arg(long)]
    features: Option<String>,
    #[arg(long)]
    hp: Option<PathBuf>,
    #[arg(long)]
    split: Option<String>,
    /// Recompute trade-off scores of an existing `k,rmse,time` CSV instead.
    #[arg(long)]
    rescore: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TuneArgs {
    #[arg(long)]
    table: Option<PathBuf>,
    #[arg(long)]
    features: Option<String>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    split: Option<String>,
    /// Sample every trial uniformly (no density model).
    #[arg(long)]
    random_search: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    table: Option<PathBuf>,
    /// Sampling mode of the evaluated split (default: the model's).
    #[arg(long)]
    mode: Option<String>,
    /// Slice to evaluate: train, val or test.
    #[arg(long)]
    slice: Option<String>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long)]
    table: Option<PathBuf>,
    /// Restrict to one slice (train, val, test) of the split given by --split.
    #[arg(long)]
    slice: Option<String>,
    #[arg(long)]
    split: Option<String>,
    /// Output format: text or csv.
    #[arg(long)]
    format: Option<String>,
}

/// Config-file settings with typed lookup.
struct Settings {
    file: BTreeMap<String, String>,
}

impl Settings {
    fn load(path: Option<&Path>) -> Result<Self, PipelineError> {
        let file = match path {
            Some(p) => config::parse_map(&pl::read_file(p)?)
                .map_err(|e| PipelineError::Usage(format!("{}: {e}", p.display())))?,
            None => BTreeMap::new(),
        };
        Ok(Self { file })
    }

    /// Flag value, else config entry `key`, else `default`.
    fn get<T: std::str::FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T, PipelineError> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.file.get(key) {
            Some(text) => text
                .parse()
                .map_err(|_| PipelineError::Usage(format!("config: invalid value `{text}` for `{key}`"))),
            None => Ok(default),
        }
    }

    fn path(&self, flag: Option<PathBuf>, key: &str) -> Option<PathBuf> {
        flag.or_else(|| self.file.get(key).map(PathBuf::from))
    }

    fn require_path(&self, flag: Option<PathBuf>, key: &str) -> Result<PathBuf, PipelineError> {
        self.path(flag, key)
            .ok_or_else(|| PipelineError::Usage(format!("missing --{}", key.replace('_', "-"))))
    }
}

fn parse_with<T>(text: &str, what: &str, f: impl Fn(&str) -> Result<T, String>) -> Result<T, PipelineError> {
    f(text).map_err(|e| PipelineError::Usage(format!("{what}: {e}")))
}

fn split_tag(text: &str) -> Result<SplitTag, String> {
    match text {
        "train" => Ok(SplitTag::Train),
        "val" => Ok(SplitTag::Val),
        "test" => Ok(SplitTag::Test),
        _ => Err(format!("unknown slice `{text}` (expected train, val or test)")),
    }
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn context(g: &Global, s: &Settings, noise: Option<f64>, eps: Option<f64>) -> Result<ScoreContext, PipelineError> {
    let registry = match s.path(g.registry.clone(), "registry") {
        Some(p) => FormulaRegistry::parse(&pl::read_file(&p)?)
            .map_err(|e| PipelineError::Usage(format!("{}: {e}", p.display())))?,
        None => FormulaRegistry::builtin(),
    };
    Ok(ScoreContext {
        registry,
        noise_sigma: s.get(noise, "noise_sigma", DEFAULT_NOISE_SIGMA)?,
        perturb_eps: s.get(eps, "perturb_eps", DEFAULT_PERTURB_EPS)?,
        ..ScoreContext::default()
    })
}

/// Hyperparameters from `--hp` (tuned JSON, saved model or `key = value`),
/// then config-file keys, then defaults.
fn hyperparams(flag: Option<PathBuf>, s: &Settings) -> Result<HyperParams, PipelineError> {
    let base = match s.path(flag, "hp") {
        Some(p) => {
            let text = pl::read_file(&p)?;
            if let Ok(t) = serde_json::from_str::<Tuned>(&text) {
                t.hyperparams
            } else if let Ok(m) = serde_json::from_str::<SavedModel>(&text) {
                m.forest.hyperparams
            } else if let Ok(hp) = serde_json::from_str::<HyperParams>(&text) {
                hp
            } else {
                pl::hyperparams_from_config(&text).map_err(|e| PipelineError::Usage(format!("{}: {e}", p.display())))?
            }
        }
        None => HyperParams::default(),
    };
    pl::apply_hyperparams(base, &s.file).map_err(|e| PipelineError::Usage(e.to_string()))
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let g = &cli.global;
    let s = Settings::load(g.config.as_deref())?;
    let seed: u64 = s.get(g.seed, "seed", 0)?;
    let default_workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    let workers: usize = s.get(g.workers, "workers", default_workers)?;
    // Forest fitting uses the global pool; collect builds its own.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build_global();
    let out = |default: &str| s.path(g.out.clone(), "out").unwrap_or_else(|| PathBuf::from(default));

    match cli.command {
        Command::Collect(a) => {
            let space: SearchSpace = s
                .get(a.space, "space", "tss".to_string())?
                .parse()
                .map_err(|e| PipelineError::Usage(format!("{e}")))?;
            let n = s.get(a.n, "n", 100)?;
            let targets = match s.path(a.target_csv, "target_csv") {
                Some(p) => Some(pl::read_targets(pl::read_file(&p)?.as_bytes())?),
                None => None,
            };
            let ctx = context(g, &s, a.noise_sigma, a.perturb_eps)?;
            let path = out("scores.csv");
            let timings = s
                .path(a.timings, "timings")
                .unwrap_or_else(|| sidecar(&path, "timings.csv"));
            let c = pl::collect(
                &pl::CollectConfig {
                    space,
                    n,
                    seed,
                    workers,
                    targets,
                },
                &ctx,
            )?;
            pl::write_atomic(&path, c.table.to_csv_string().as_bytes())?;
            pl::write_atomic(&timings, pl::write_timings(&c.timings).as_bytes())?;
            log::info!(
                "wrote {} rows to {} and timings to {}",
                c.table.len(),
                path.display(),
                timings.display()
            );
        }
        Command::Score(a) => {
            let ctx = context(g, &s, a.noise_sigma, a.perturb_eps)?;
            let dataset = s.get(a.dataset, "dataset", "cifar10".to_string())?;
            let row = pl::score_spec(&a.spec, &dataset, seed, &ctx)?;
            let text = ScoreTable { rows: vec![row] }.to_csv_string();
            match &g.out {
                Some(p) => pl::write_atomic(p, text.as_bytes())?,
                None => print!("{text}"),
            }
        }
        Command::Train(a) => {
            let table = pl::read_table(&s.require_path(a.table, "table")?)?;
            let features = pl::resolve_features(&s.get(a.features, "features", "greenfactory".to_string())?)?;
            let split_mode = parse_with(&s.get(a.split, "split", "stratified".to_string())?, "split", str::parse)?;
            let cfg = pl::TrainConfig {
                features,
                hyperparams: hyperparams(a.hp, &s)?,
                split_mode,
                split_seed: seed,
                forest_seed: seed,
            };
            let result = pl::train(&table, &cfg)?;
            let path = out("model.json");
            pl::write_atomic(&path, result.model.to_json().as_bytes())?;
            let report = pl::rmse_csv(&result.test_rmse);
            pl::write_atomic(&sidecar(&path, "rmse.csv"), report.as_bytes())?;
            print!("{report}");
        }
        Command::Rfe(a) => {
            if let Some(p) = a.rescore {
                let text = pl::rescore_csv(pl::read_file(&p)?.as_bytes())?;
                match &g.out {
                    Some(o) => pl::write_atomic(o, text.as_bytes())?,
                    None => print!("{text}"),
                }
                return Ok(());
            }
            let table = pl::read_table(&s.require_path(a.table, "table")?)?;
            let timings = pl::read_timings(pl::read_file(&s.require_path(a.timings, "timings")?)?.as_bytes())?;
            let features = pl::resolve_features(&s.get(a.features, "features", "all".to_string())?)?;
            let split_mode: SplitMode =
                parse_with(&s.get(a.split, "split", "stratified".to_string())?, "split", str::parse)?;
            let steps = pl::rfe(&table, &timings, &features, &hyperparams(a.hp, &s)?, split_mode, seed)?;
            let path = out("rfe.csv");
            let text = pl::rfe_csv(&steps);
            pl::write_atomic(&path, text.as_bytes())?;
            pl::write_atomic(
                &sidecar(&path, "heatmap.csv"),
                pl::rfe_heatmap_csv(&steps, &features).as_bytes(),
            )?;
            print!("{text}");
        }
        Command::Tune(a) => {
            let table = pl::read_table(&s.require_path(a.table, "table")?)?;
            let features = pl::resolve_features(&s.get(a.features, "features", "greenfactory".to_string())?)?;
            let trials = s.get(a.trials, "trials", 1000)?;
            let split_mode: SplitMode =
                parse_with(&s.get(a.split, "split", "stratified".to_string())?, "split", str::parse)?;
            let random_search = a.random_search || s.get(None, "random_search", false)?;
            let tuned = pl::tune(&table, &features, trials, split_mode, seed, random_search)?;
            let path = out("tuned.json");
            let json = serde_json::to_string_pretty(&tuned).expect("tuned result serializes");
            pl::write_atomic(&path, json.as_bytes())?;
            pl::write_atomic(
                &sidecar(&path, "trials.csv"),
                pl::trial_log_csv(&tuned.trials).as_bytes(),
            )?;
            println!("best validation rmse {}", tuned.validation_rmse);
        }
        Command::Eval(a) => {
            let model = SavedModel::from_json(&pl::read_file(&s.require_path(a.model, "model")?)?)?;
            let table = pl::read_table(&s.require_path(a.table, "table")?)?;
            let mode = match a.mode.or_else(|| s.file.get("mode").cloned()) {
                Some(m) => parse_with(&m, "mode", str::parse)?,
                None => model.split_mode,
            };
            let slice = parse_with(&s.get(a.slice, "slice", "test".to_string())?, "slice", split_tag)?;
            let result = pl::evaluate(&model, &table, mode, slice)?;
            let path = out("eval.csv");
            pl::write_atomic(&path, report_csv(&result.correlations).as_bytes())?;
            let rmse = pl::rmse_csv(&result.rmse);
            pl::write_atomic(&sidecar(&path, "rmse.csv"), rmse.as_bytes())?;
            print!("{}\n{rmse}", report_text(&result.correlations));
        }
        Command::Report(a) => {
            let table = pl::read_table(&s.require_path(a.table, "table")?)?;
            let slice = match a.slice.or_else(|| s.file.get("slice").cloned()) {
                Some(tag) => {
                    let tag = parse_with(&tag, "slice", split_tag)?;
                    let mode = parse_with(&s.get(a.split, "split", "stratified".to_string())?, "split", str::parse)?;
                    Some((mode, seed, tag))
                }
                None => None,
            };
            let rows = pl::report(&table, slice)?;
            let text = match s.get(a.format, "format", "text".to_string())?.as_str() {
                "text" => report_text(&rows),
                "csv" => report_csv(&rows),
                other => return Err(PipelineError::Usage(format!("unknown format `{other}`"))),
            };
            match &g.out {
                Some(p) => pl::write_atomic(p, text.as_bytes())?,
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
