//! Clean, noise, perturbation and random-sibling passes over one mini-batch,
//! capturing the per-layer statistics consumed by proxy formulas.
//!
//! Every pass runs forward, takes cross-entropy against seeded uniform random
//! labels and runs backward. For each parameterized layer (conv or linear) a
//! pass records the layer input and output (`fwd_*`), the loss gradients with
//! respect to them (`bwd_*`), the weight gradient (`grad`) and the weight
//! itself (`wt`). The random pass only keeps `grad` and `wt` of a sibling
//! network initialized with a different seed.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::arch::{instantiate, Network};
use crate::autograd::{GradError, Tape};
use crate::seed;
use crate::tensor::{ShapeError, Tensor};

pub const DEFAULT_NOISE_SIGMA: f64 = 1.0;
pub const DEFAULT_PERTURB_EPS: f64 = 0.01;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("invalid probe setting: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Pass {
    Clean,
    Noise,
    Perturbation,
    Random,
}

impl Pass {
    pub const ALL: [Pass; 4] = [Pass::Clean, Pass::Noise, Pass::Perturbation, Pass::Random];

    fn prefix(self) -> &'static str {
        match self {
            Pass::Clean => "pass",
            Pass::Noise => "pass_noise",
            Pass::Perturbation => "pass_perturbation",
            Pass::Random => "random",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Quantity {
    FwdInput,
    FwdOutput,
    BwdInput,
    BwdOutput,
    Grad,
    Wt,
}

impl Quantity {
    pub const ALL: [Quantity; 6] = [
        Quantity::FwdInput,
        Quantity::FwdOutput,
        Quantity::BwdInput,
        Quantity::BwdOutput,
        Quantity::Grad,
        Quantity::Wt,
    ];

    fn suffix(self) -> &'static str {
        match self {
            Quantity::FwdInput => "fwd_input",
            Quantity::FwdOutput => "fwd_output",
            Quantity::BwdInput => "bwd_input",
            Quantity::BwdOutput => "bwd_output",
            Quantity::Grad => "grad",
            Quantity::Wt => "wt",
        }
    }
}

/// One of the twenty statistic identifiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Stat {
    pub pass: Pass,
    pub quantity: Quantity,
}

impl Stat {
    pub const COUNT: usize = 20;

    /// All identifiers in a fixed order.
    pub fn all() -> impl Iterator<Item = Stat> {
        Pass::ALL.into_iter().flat_map(|pass| {
            Quantity::ALL
                .into_iter()
                .map(move |quantity| Stat { pass, quantity })
                .filter(|s| s.pass != Pass::Random || matches!(s.quantity, Quantity::Grad | Quantity::Wt))
        })
    }

    fn index(self) -> usize {
        let q = self.quantity as usize;
        match self.pass {
            Pass::Random => 18 + (q - Quantity::Grad as usize),
            p => p as usize * 6 + q,
        }
    }
}

impl fmt::Display for Stat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_{}", self.pass.prefix(), self.quantity.suffix())
    }
}

impl FromStr for Stat {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        Stat::all().find(|st| st.to_string() == s).ok_or(())
    }
}

/// Captured statistics of one parameterized layer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerStats {
    pub name: String,
    stats: [Option<Tensor>; Stat::COUNT],
}

impl LayerStats {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            stats: Default::default(),
        }
    }

    pub fn get(&self, stat: Stat) -> Option<&Tensor> {
        self.stats[stat.index()].as_ref()
    }

    pub fn set(&mut self, stat: Stat, value: Tensor) {
        self.stats[stat.index()] = Some(value);
    }
}

/// Per-layer statistics of one network, in forward order.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRecord {
    pub layers: Vec<LayerStats>,
    pub seed: u64,
    pub noise_sigma: f64,
    pub perturb_eps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub noise_sigma: f64,
    pub perturb_eps: f64,
    pub label_seed: u64,
}

impl ProbeConfig {
    pub fn new(label_seed: u64) -> Self {
        Self {
            noise_sigma: DEFAULT_NOISE_SIGMA,
            perturb_eps: DEFAULT_PERTURB_EPS,
            label_seed,
        }
    }
}

/// Seeded Gaussian batch for `network`.
pub fn gaussian_batch(network: &Network, batch: usize, seed: u64) -> Tensor {
    let mut rng = seed::rng(seed, 0xba7c);
    Tensor::randn(&network.input_shape(batch), 1.0, &mut rng)
}

pub fn random_labels(batch: usize, classes: usize, seed: u64) -> Vec<usize> {
    let mut rng = seed::rng(seed, 0x1abe1);
    (0..batch).map(|_| rng.random_range(0..classes)).collect()
}

/// The seed used for the random-sibling network.
pub fn sibling_seed(network: &Network) -> u64 {
    seed::derive(network.init_seed, 0x51b1)
}

fn pass_input(pass: Pass, batch: &Tensor, cfg: &ProbeConfig) -> Tensor {
    match pass {
        Pass::Clean | Pass::Random => batch.clone(),
        Pass::Noise => {
            let mut rng = seed::rng(cfg.label_seed, 0x0015e);
            batch.map(|x| {
                let z: f64 = StandardNormal.sample(&mut rng);
                x + cfg.noise_sigma * z
            })
        }
        Pass::Perturbation => {
            let mut rng = seed::rng(cfg.label_seed, 0xbe27);
            batch.map(|x| {
                let z: f64 = StandardNormal.sample(&mut rng);
                x + cfg.perturb_eps * if z >= 0.0 { 1.0 } else { -1.0 }
            })
        }
    }
}

fn capture_pass(
    network: &Network,
    pass: Pass,
    batch: &Tensor,
    labels: &[usize],
    cfg: &ProbeConfig,
    wanted: &[Quantity],
    layers: &mut [LayerStats],
) -> Result<(), ProbeError> {
    let input = pass_input(pass, batch, cfg);
    let mut tape = Tape::new();
    let wants = |q: Quantity| wanted.contains(&q);
    let trace = if wants(Quantity::Grad) {
        network.forward(&mut tape, &input)?
    } else {
        network.forward_frozen(&mut tape, &input)?
    };
    let needs_backward = wants(Quantity::Grad) || wants(Quantity::BwdInput) || wants(Quantity::BwdOutput);
    let grads = if needs_backward {
        let loss = tape.cross_entropy(trace.logits, labels)?;
        Some(tape.backward(loss)?)
    } else {
        None
    };
    for ((stats, lt), layer) in layers.iter_mut().zip(&trace.layers).zip(&network.layers) {
        let mut put = |q: Quantity, t: Tensor| stats.set(Stat { pass, quantity: q }, t);
        let (inp, out) = (tape.value(lt.input), tape.value(lt.output));
        if wants(Quantity::FwdInput) {
            put(Quantity::FwdInput, inp.clone());
        }
        if wants(Quantity::FwdOutput) {
            put(Quantity::FwdOutput, out.clone());
        }
        if let Some(g) = &grads {
            if wants(Quantity::BwdInput) {
                put(Quantity::BwdInput, g.get_or_zeros(lt.input, inp.shape()));
            }
            if wants(Quantity::BwdOutput) {
                put(Quantity::BwdOutput, g.get_or_zeros(lt.output, out.shape()));
            }
            if wants(Quantity::Grad) {
                put(Quantity::Grad, g.get_or_zeros(lt.weight, layer.weight.shape()));
            }
        }
        if wants(Quantity::Wt) {
            put(Quantity::Wt, layer.weight.clone());
        }
    }
    Ok(())
}

fn pass_quantities(pass: Pass) -> Vec<Quantity> {
    match pass {
        Pass::Random => vec![Quantity::Grad, Quantity::Wt],
        _ => Quantity::ALL.to_vec(),
    }
}

/// Run the selected passes and capture their statistics.
pub fn run_passes(
    network: &Network,
    batch: &Tensor,
    cfg: &ProbeConfig,
    passes: &[Pass],
) -> Result<ProbeRecord, ProbeError> {
    let plan: Vec<(Pass, Vec<Quantity>)> = passes.iter().map(|&p| (p, pass_quantities(p))).collect();
    capture(network, batch, cfg, &plan)
}

fn capture(
    network: &Network,
    batch: &Tensor,
    cfg: &ProbeConfig,
    plan: &[(Pass, Vec<Quantity>)],
) -> Result<ProbeRecord, ProbeError> {
    if !(cfg.noise_sigma >= 0.0 && cfg.perturb_eps >= 0.0) {
        return Err(ProbeError::Config(format!(
            "noise_sigma {} and perturb_eps {} must be non-negative",
            cfg.noise_sigma, cfg.perturb_eps
        )));
    }
    let labels = random_labels(batch.shape()[0], network.spec.num_classes(), cfg.label_seed);
    let mut layers: Vec<LayerStats> = network.layers.iter().map(|l| LayerStats::new(&l.name)).collect();
    let mut sibling = None;
    for (pass, wanted) in plan {
        if *pass == Pass::Random {
            let needs_pass = wanted.iter().any(|&q| q != Quantity::Wt);
            let sib = sibling.get_or_insert_with(|| instantiate(&network.spec, sibling_seed(network)));
            if needs_pass {
                capture_pass(sib, *pass, batch, &labels, cfg, wanted, &mut layers)?;
            } else {
                put_weights(&mut layers, sib, *pass);
            }
        } else if wanted.iter().any(|&q| q != Quantity::Wt) {
            capture_pass(network, *pass, batch, &labels, cfg, wanted, &mut layers)?;
        } else {
            put_weights(&mut layers, network, *pass);
        }
    }
    Ok(ProbeRecord {
        layers,
        seed: cfg.label_seed,
        noise_sigma: cfg.noise_sigma,
        perturb_eps: cfg.perturb_eps,
    })
}

fn put_weights(layers: &mut [LayerStats], source: &Network, pass: Pass) {
    for (stats, layer) in layers.iter_mut().zip(&source.layers) {
        stats.set(
            Stat {
                pass,
                quantity: Quantity::Wt,
            },
            layer.weight.clone(),
        );
    }
}

/// Capture only what `stats` needs. A pass runs when one of its non-weight
/// statistics is requested, and then records only the requested quantities;
/// weight-only requests are served straight from the network (or the
/// sibling's initialization). Backward is skipped when no gradient is
/// requested, and weight gradients are skipped when `grad` is not.
/// Every captured statistic is identical to the one [`run_probes`] records.
pub fn run_for_stats(
    network: &Network,
    batch: &Tensor,
    cfg: &ProbeConfig,
    stats: &[Stat],
) -> Result<ProbeRecord, ProbeError> {
    let mut plan: Vec<(Pass, Vec<Quantity>)> = Vec::new();
    for pass in Pass::ALL {
        let mut wanted: Vec<Quantity> = stats.iter().filter(|s| s.pass == pass).map(|s| s.quantity).collect();
        wanted.sort();
        wanted.dedup();
        if !wanted.is_empty() {
            plan.push((pass, wanted));
        }
    }
    capture(network, batch, cfg, &plan)
}

/// All four passes.
pub fn run_probes(
    network: &Network,
    batch: &Tensor,
    noise_sigma: f64,
    perturb_eps: f64,
    label_seed: u64,
) -> Result<ProbeRecord, ProbeError> {
    let cfg = ProbeConfig {
        noise_sigma,
        perturb_eps,
        label_seed,
    };
    run_passes(network, batch, &cfg, &Pass::ALL)
}

/// Mean wall-clock seconds and relative standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timing {
    pub mean_seconds: f64,
    pub rel_std: f64,
}

impl Timing {
    pub fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean_seconds: mean,
            rel_std: if mean > 0.0 { var.sqrt() / mean } else { 0.0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptureCost {
    pub per_pass: Vec<(Pass, Timing)>,
    pub all_passes: Timing,
}

/// Time each pass alone and all four together over `reps` repetitions.
pub fn capture_cost(network: &Network, reps: usize) -> Result<CaptureCost, ProbeError> {
    if reps == 0 {
        return Err(ProbeError::Config("reps must be at least 1".into()));
    }
    let batch = gaussian_batch(network, crate::arch::DEFAULT_BATCH, 0);
    let cfg = ProbeConfig::new(0);
    let time = |passes: &[Pass]| -> Result<Timing, ProbeError> {
        let mut samples = Vec::with_capacity(reps);
        for _ in 0..reps {
            let start = Instant::now();
            std::hint::black_box(run_passes(network, &batch, &cfg, passes)?);
            samples.push(start.elapsed().as_secs_f64());
        }
        Ok(Timing::from_samples(&samples))
    };
    let mut per_pass = Vec::new();
    for pass in Pass::ALL {
        per_pass.push((pass, time(&[pass])?));
    }
    Ok(CaptureCost {
        per_pass,
        all_passes: time(&Pass::ALL)?,
    })
}
