//! Literature zero-cost proxies.
//!
//! Every proxy maps an initialized network (plus seeded random inputs, or a
//! captured [`ProbeRecord`]) to one scalar. Raw results that are not finite
//! are replaced by [`SENTINEL`] so that failed scores rank strictly below
//! every genuine one.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{count_flops, count_params, Network, DEFAULT_BATCH};
use crate::autograd::{GradError, Tape, Var};
use crate::dsl::{self, EvalError, FormulaRegistry, RegistryError};
use crate::linalg;
use crate::metrics::average_ranks;
use crate::probe::{gaussian_batch, random_labels, Pass, ProbeRecord, Quantity, Stat};
use crate::seed;
use crate::tensor::{ShapeError, Tensor};

/// Replacement for non-finite raw proxy values.
pub const SENTINEL: f64 = -1e9;

/// Samples in the neural tangent kernel batch.
pub const NTK_SAMPLES: usize = 8;
/// Random inputs used to count linear regions.
pub const REGION_SAMPLES: usize = 32;
/// Gaussian draws averaged by the Zen score.
pub const ZEN_DRAWS: usize = 8;
pub const ZEN_EPS: f64 = 0.01;
/// Power-iteration steps for block Jacobian spectral norms.
pub const POWER_STEPS: usize = 20;

#[derive(Debug, Error)]
pub enum ProxyError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("configuration: {0}")]
    Config(String),
    #[error("precondition: {0}")]
    Precondition(String),
}

impl From<RegistryError> for ProxyError {
    fn from(e: RegistryError) -> Self {
        ProxyError::Config(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyScore {
    pub proxy_id: String,
    pub value: f64,
    pub cost_seconds: f64,
}

pub fn sanitize(value: f64) -> f64 {
    if value.is_finite() {
        value
    } else {
        SENTINEL
    }
}

/// Run `f`, sanitize its value and record wall-clock cost.
pub fn timed(proxy_id: &str, f: impl FnOnce() -> Result<f64, ProxyError>) -> Result<ProxyScore, ProxyError> {
    let start = Instant::now();
    let value = f()?;
    Ok(ProxyScore {
        proxy_id: proxy_id.to_string(),
        value: sanitize(value),
        cost_seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn params(network: &Network) -> f64 {
    count_params(network) as f64
}

pub fn flops(network: &Network) -> Result<f64, ProxyError> {
    Ok(count_flops(network, &network.input_shape(1))? as f64)
}

/// Per-sample binary activation codes: every relu unit, active or not.
fn activation_codes(tape: &Tape, relus: &[Var], batch: usize) -> Vec<Vec<bool>> {
    let mut codes = vec![Vec::new(); batch];
    for &r in relus {
        let t = tape.value(r);
        let per = t.numel() / batch;
        for (s, code) in codes.iter_mut().enumerate() {
            code.extend(t.data()[s * per..(s + 1) * per].iter().map(|&v| v > 0.0));
        }
    }
    codes
}

/// `log|det K|` with `K_ij = N_A - hamming(c_i, c_j)`; `-inf` when singular.
pub fn naswot_from_codes(codes: &[Vec<bool>]) -> f64 {
    let n = codes.len();
    let len = codes.first().map_or(0, Vec::len);
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let hamming = codes[i].iter().zip(&codes[j]).filter(|(a, b)| a != b).count();
            k[i * n + j] = (len - hamming) as f64;
        }
    }
    linalg::log_abs_det(&k, n)
}

/// Activation-pattern kernel score on one mini-batch.
pub fn naswot(network: &Network, batch: &Tensor) -> Result<f64, ProxyError> {
    let n = batch.shape()[0];
    if n < 2 {
        return Err(ProxyError::Precondition(format!(
            "naswot needs a batch of at least 2, got {n}"
        )));
    }
    let mut tape = Tape::new();
    let trace = network.forward(&mut tape, batch)?;
    Ok(naswot_from_codes(&activation_codes(&tape, &trace.relus, n)))
}

/// `Σ |θ · ∂R/∂θ|` where `R` is the summed output of `forward` evaluated
/// on `|θ|`. The caller's tensors are never modified.
pub fn synflow_with(
    weights: &[Tensor],
    forward: impl FnOnce(&mut Tape, &[Var]) -> Result<Var, ProxyError>,
) -> Result<f64, ProxyError> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = weights.iter().map(|w| tape.param(w.map(f64::abs))).collect();
    let out = forward(&mut tape, &vars)?;
    let r = tape.sum(out);
    let grads = tape.backward(r)?;
    let mut score = 0.0;
    for &v in &vars {
        if let Some(g) = grads.get(v) {
            score += tape
                .value(v)
                .data()
                .iter()
                .zip(g.data())
                .map(|(t, g)| (t * g).abs())
                .sum::<f64>();
        }
    }
    Ok(score)
}

/// Data-free synaptic saliency on an all-ones input of batch 1.
///
/// Absolute weights are substituted on the tape only, so the network's own
/// tensors stay bit-identical.
pub fn synflow(network: &Network) -> Result<f64, ProxyError> {
    let input = Tensor::ones(&network.input_shape(1));
    let mut tape = Tape::new();
    let trace = network.forward_with(&mut tape, &input, |w| w.map(f64::abs))?;
    let r = tape.sum(trace.logits);
    let grads = tape.backward(r)?;
    let mut score = 0.0;
    for lt in &trace.layers {
        for v in [lt.weight, lt.bias] {
            if let Some(g) = grads.get(v) {
                score += tape
                    .value(v)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(t, g)| (t * g).abs())
                    .sum::<f64>();
            }
        }
    }
    Ok(score)
}

/// Sum over layers of the Euclidean norm of the clean-pass weight gradient.
pub fn gradnorm(record: &ProbeRecord) -> Result<f64, ProxyError> {
    let stat = Stat {
        pass: Pass::Clean,
        quantity: Quantity::Grad,
    };
    let mut total = 0.0;
    for (i, layer) in record.layers.iter().enumerate() {
        let g = layer.get(stat).ok_or_else(|| EvalError::MissingStat {
            stat: stat.to_string(),
            layer: i,
            name: layer.name.clone(),
        })?;
        total += g.l2_norm();
    }
    Ok(total)
}

/// `log` of the mean Frobenius distance between `features(x)` and
/// `features(x + eps·δ)` over [`ZEN_DRAWS`] Gaussian draws.
pub fn zen_score_with(
    input_shape: &[usize],
    seed: u64,
    eps: f64,
    features: impl Fn(&Tensor) -> Result<Tensor, ProxyError>,
) -> Result<f64, ProxyError> {
    let mut rng = seed::rng(seed, 0x2e2);
    let mut total = 0.0;
    for _ in 0..ZEN_DRAWS {
        let x = Tensor::randn(input_shape, 1.0, &mut rng);
        let delta = Tensor::randn(input_shape, 1.0, &mut rng);
        let xp = x.zip_map(&delta, "zen", |a, d| a + eps * d)?;
        let fa = features(&x)?;
        let fb = features(&xp)?;
        total += fa.zip_map(&fb, "zen", |a, b| a - b)?.l2_norm();
    }
    Ok((total / ZEN_DRAWS as f64).ln())
}

/// Zen score on the pre-head feature map.
pub fn zen_score(network: &Network, batch: usize, seed: u64, eps: f64) -> Result<f64, ProxyError> {
    zen_score_with(&network.input_shape(batch), seed, eps, |x| Ok(network.features(x)?))
}

fn weight_grads(network: &Network, batch: &Tensor, labels: &[usize]) -> Result<Vec<Tensor>, ProxyError> {
    let mut tape = Tape::new();
    let trace = network.forward(&mut tape, batch)?;
    let loss = tape.cross_entropy(trace.logits, labels)?;
    let grads = tape.backward(loss)?;
    Ok(trace
        .layers
        .iter()
        .zip(&network.layers)
        .map(|(lt, l)| grads.get_or_zeros(lt.weight, l.weight.shape()))
        .collect())
}

/// `Σ_layers log Σ_θ |mean g_θ| / (std g_θ + 1e-12)` from per-batch weight
/// gradients (`grads[batch][layer]`). Layers whose sum is exactly zero are
/// skipped, as their log is undefined.
pub fn zico_from_grads(grads: &[Vec<Tensor>]) -> Result<f64, ProxyError> {
    let b = grads.len();
    if b < 2 {
        return Err(ProxyError::Precondition(format!(
            "zico needs at least 2 batches, got {b}"
        )));
    }
    let layers = grads[0].len();
    let mut score = 0.0;
    for l in 0..layers {
        let n = grads[0][l].numel();
        let mut sum = 0.0;
        for p in 0..n {
            let vals: Vec<f64> = grads.iter().map(|g| g[l].data()[p]).collect();
            let mean = vals.iter().sum::<f64>() / b as f64;
            let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / b as f64).sqrt();
            sum += mean.abs() / (std + 1e-12);
        }
        if sum > 0.0 {
            score += sum.ln();
        }
    }
    Ok(score)
}

/// Gradient signal-to-noise score over `batches` seeded Gaussian batches.
pub fn zico(network: &Network, batches: usize, batch_size: usize, seed: u64) -> Result<f64, ProxyError> {
    if batches < 2 {
        return Err(ProxyError::Precondition(format!(
            "zico needs at least 2 batches, got {batches}"
        )));
    }
    let classes = network.spec.num_classes();
    let grads = (0..batches as u64)
        .map(|i| {
            let s = seed::derive(seed, 0x21c0 + i);
            let x = gaussian_batch(network, batch_size, s);
            weight_grads(network, &x, &random_labels(batch_size, classes, s))
        })
        .collect::<Result<Vec<_>, _>>()?;
    zico_from_grads(&grads)
}

/// The two ingredients of the TE-NAS score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TenasParts {
    /// Condition number of the neural tangent kernel.
    pub kappa: f64,
    /// Distinct relu activation patterns.
    pub regions: f64,
}

impl TenasParts {
    /// Standalone score `R - ln κ`.
    pub fn standalone(&self) -> f64 {
        self.regions - self.kappa.ln()
    }
}

/// Empirical NTK over the samples of `batch`; output scalarized as the sum
/// of logits, gradients over all weights and biases.
pub fn ntk(network: &Network, batch: &Tensor) -> Result<(Vec<f64>, usize), ProxyError> {
    let n = batch.shape()[0];
    let per = batch.numel() / n;
    let mut jac: Vec<Vec<f64>> = Vec::with_capacity(n);
    for s in 0..n {
        let mut shape = batch.shape().to_vec();
        shape[0] = 1;
        let x = Tensor::new(shape, batch.data()[s * per..(s + 1) * per].to_vec())?;
        let mut tape = Tape::new();
        let trace = network.forward(&mut tape, &x)?;
        let out = tape.sum(trace.logits);
        let grads = tape.backward(out)?;
        let mut row = Vec::new();
        for lt in &trace.layers {
            for v in [lt.weight, lt.bias] {
                row.extend_from_slice(grads.get_or_zeros(v, tape.value(v).shape()).data());
            }
        }
        jac.push(row);
    }
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let d: f64 = jac[i].iter().zip(&jac[j]).map(|(a, b)| a * b).sum();
            k[i * n + j] = d;
            k[j * n + i] = d;
        }
    }
    Ok((k, n))
}

/// `λ_max / λ_min` of a symmetric PSD matrix; infinite when singular.
pub fn condition_number(k: &[f64], n: usize) -> f64 {
    let eig = linalg::symmetric_eigenvalues(k, n);
    let (lo, hi) = (eig[0], eig[n - 1]);
    if lo.is_nan() || lo <= 0.0 {
        return f64::INFINITY;
    }
    hi / lo
}

/// Number of distinct relu activation patterns over `samples` inputs.
pub fn linear_regions(network: &Network, samples: usize, seed: u64) -> Result<usize, ProxyError> {
    let x = gaussian_batch(network, samples, seed::derive(seed, 0x4e9));
    let mut tape = Tape::new();
    let trace = network.forward(&mut tape, &x)?;
    let mut codes = activation_codes(&tape, &trace.relus, samples);
    codes.sort();
    codes.dedup();
    Ok(codes.len())
}

pub fn tenas_parts(network: &Network, seed: u64) -> Result<TenasParts, ProxyError> {
    let batch = gaussian_batch(network, NTK_SAMPLES, seed::derive(seed, 0x7e4));
    let (k, n) = ntk(network, &batch)?;
    let kappa = if k.iter().all(|v| v.is_finite()) {
        condition_number(&k, n)
    } else {
        f64::NAN
    };
    Ok(TenasParts {
        kappa,
        regions: linear_regions(network, REGION_SAMPLES, seed)? as f64,
    })
}

/// Population TE-NAS score: `rank(-κ) + rank(R)` with average ranks.
/// Non-finite κ ranks as the worst conditioning.
pub fn tenas_population(parts: &[TenasParts]) -> Vec<f64> {
    let neg_kappa: Vec<f64> = parts
        .iter()
        .map(|p| {
            if p.kappa.is_finite() {
                -p.kappa
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let regions: Vec<f64> = parts.iter().map(|p| p.regions).collect();
    average_ranks(&neg_kappa)
        .into_iter()
        .zip(average_ranks(&regions))
        .map(|(a, b)| a + b)
        .collect()
}

/// The four AZ-NAS component scores of one network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AzComponents {
    pub expressivity: f64,
    pub progressivity: f64,
    pub trainability: f64,
    pub flops: f64,
}

impl AzComponents {
    pub fn as_array(&self) -> [f64; 4] {
        [self.expressivity, self.progressivity, self.trainability, self.flops]
    }
}

/// Entropy of the normalized eigenvalue spectrum of the channel covariance
/// of a `(N, C, H, W)` feature map, treating every spatial position of every
/// sample as one observation.
pub fn isotropy_entropy(features: &Tensor) -> f64 {
    let shape = features.shape();
    let (n, c) = (shape[0], shape[1]);
    let hw: usize = shape[2..].iter().product();
    let samples = (n * hw) as f64;
    let data = features.data();
    let at = |s: usize, ch: usize, p: usize| data[(s * c + ch) * hw + p];
    let mut mean = vec![0.0; c];
    for (ch, m) in mean.iter_mut().enumerate() {
        *m = (0..n)
            .flat_map(|s| (0..hw).map(move |p| (s, p)))
            .map(|(s, p)| at(s, ch, p))
            .sum::<f64>()
            / samples;
    }
    let mut cov = vec![0.0; c * c];
    for s in 0..n {
        for p in 0..hw {
            for i in 0..c {
                let di = at(s, i, p) - mean[i];
                for j in i..c {
                    cov[i * c + j] += di * (at(s, j, p) - mean[j]);
                }
            }
        }
    }
    for i in 0..c {
        for j in i..c {
            let v = cov[i * c + j] / samples;
            cov[i * c + j] = v;
            cov[j * c + i] = v;
        }
    }
    spectrum_entropy(&linalg::symmetric_eigenvalues(&cov, c))
}

/// `-Σ p ln p` over eigenvalues normalized to sum to one (negatives from
/// round-off are clamped to zero). Zero for an all-zero spectrum.
pub fn spectrum_entropy(eigenvalues: &[f64]) -> f64 {
    let total: f64 = eigenvalues.iter().map(|v| v.max(0.0)).sum();
    if total.is_nan() || total <= 0.0 {
        return 0.0;
    }
    eigenvalues
        .iter()
        .map(|v| v.max(0.0) / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum()
}

/// Uniform `±1` vector.
pub fn rademacher<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<f64> {
    (0..len)
        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect()
}

/// Spectral norm of `J̃ = (1/N) Vᵀ G` where `V` (`N x d_out`) holds the
/// Rademacher probes and `G` (`N x d_in`) the resulting input gradients.
/// The product is never formed; power iteration uses its factors.
pub fn factored_spectral_norm<R: Rng + ?Sized>(
    v: &[f64],
    g: &[f64],
    n: usize,
    d_out: usize,
    d_in: usize,
    steps: usize,
    rng: &mut R,
) -> f64 {
    let scale = 1.0 / n as f64;
    // x (d_in) -> G x (n) -> Vᵀ (G x) (d_out)
    let apply = |x: &[f64]| {
        let gx: Vec<f64> = (0..n)
            .map(|s| g[s * d_in..(s + 1) * d_in].iter().zip(x).map(|(a, b)| a * b).sum())
            .collect();
        let mut out = vec![0.0; d_out];
        for s in 0..n {
            for (o, &vv) in out.iter_mut().zip(&v[s * d_out..(s + 1) * d_out]) {
                *o += vv * gx[s] * scale;
            }
        }
        out
    };
    let apply_t = |y: &[f64]| {
        let vy: Vec<f64> = (0..n)
            .map(|s| v[s * d_out..(s + 1) * d_out].iter().zip(y).map(|(a, b)| a * b).sum())
            .collect();
        let mut out = vec![0.0; d_in];
        for s in 0..n {
            for (o, &gg) in out.iter_mut().zip(&g[s * d_in..(s + 1) * d_in]) {
                *o += gg * vy[s] * scale;
            }
        }
        out
    };
    linalg::spectral_norm(d_in, apply, apply_t, steps, rng)
}

/// Expressivity, progressivity, trainability and FLOPs on a Gaussian batch.
pub fn aznas_components(network: &Network, batch: &Tensor, seed: u64) -> Result<AzComponents, ProxyError> {
    let mut tape = Tape::new();
    let trace = network.forward(&mut tape, batch)?;
    let per_block: Vec<f64> = trace
        .blocks
        .iter()
        .map(|&(_, out)| isotropy_entropy(tape.value(out)))
        .collect();
    let expressivity = per_block.iter().sum();
    let progressivity = if per_block.len() < 2 {
        log::warn!("progressivity undefined for a single block; using 0");
        0.0
    } else {
        per_block.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min)
    };

    let n = batch.shape()[0];
    let mut rng = seed::rng(seed, 0xa2a5);
    let mut trainability = 0.0;
    for &(inp, out) in &trace.blocks {
        let out_shape = tape.value(out).shape().to_vec();
        let in_shape = tape.value(inp).shape().to_vec();
        let d_out = out_shape.iter().product::<usize>() / n;
        let d_in = in_shape.iter().product::<usize>() / n;
        let v = rademacher(n * d_out, &mut rng);
        let sigma = if tape.requires_grad(out) {
            let mut t = tape.clone();
            let probe = t.constant(Tensor::new(out_shape, v.clone())?);
            let prod = t.mul(out, probe)?;
            let s = t.sum(prod);
            let grads = t.backward(s)?;
            let g = grads.get_or_zeros(inp, &in_shape);
            factored_spectral_norm(&v, g.data(), n, d_out, d_in, POWER_STEPS, &mut rng)
        } else {
            0.0
        };
        trainability -= sigma.ln().abs();
    }
    Ok(AzComponents {
        expressivity,
        progressivity,
        trainability,
        flops: flops(network)?,
    })
}

/// `Σ_p ln(rank_p / n)` over the columns of `scores` (one row per network),
/// ascending average ranks so the best network on every column scores 0.
pub fn rank_aggregate<const K: usize>(scores: &[[f64; K]]) -> Result<Vec<f64>, ProxyError> {
    let n = scores.len();
    if n < 2 {
        return Err(ProxyError::Precondition(format!(
            "rank aggregation needs a population of at least 2, got {n}"
        )));
    }
    let mut out = vec![0.0; n];
    for p in 0..K {
        let col: Vec<f64> = scores.iter().map(|s| sanitize(s[p])).collect();
        for (o, r) in out.iter_mut().zip(average_ranks(&col)) {
            *o += (r / n as f64).ln();
        }
    }
    Ok(out)
}

pub fn aznas_aggregate(population: &[AzComponents]) -> Result<Vec<f64>, ProxyError> {
    let rows: Vec<[f64; 4]> = population.iter().map(AzComponents::as_array).collect();
    rank_aggregate(&rows)
}

/// Evaluate the program registered as `eznas`.
pub fn eznas(record: &ProbeRecord, registry: &FormulaRegistry) -> Result<f64, ProxyError> {
    let program = registry.get("eznas")?;
    Ok(dsl::eval_formula(program, record)?)
}

/// The standard probing batch for a network.
pub fn default_batch(network: &Network, seed: u64) -> Tensor {
    gaussian_batch(network, DEFAULT_BATCH, seed)
}
