//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use greenfactory::{GradError, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type GradFn = Box<dyn Fn(&mut Tape, Var) -> Result<Var, GradError>>;

/// One differentiable primitive under test: a scalar-valued function of a
/// single parameter tensor built around the primitive, and a sampler of
/// evaluation points inside the primitive's smooth domain.
pub struct GradCase {
    pub name: &'static str,
    pub build: fn(&mut ChaCha8Rng) -> (GradFn, Tensor),
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from 0 so kinks at the origin are never straddled by
/// the finite-difference stencil.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    uniform(shape, 0.05, 2.0, rng).map(|v| if rng_sign(v) { v } else { -v })
}

fn rng_sign(v: f64) -> bool {
    // deterministic pseudo-sign from the value's bits
    (v.to_bits() >> 7) & 1 == 0
}

/// `Σ wᵢ·yᵢ` with fixed random weights, so every output element matters.
fn weighted_sum(t: &mut Tape, y: Var, seed: u64) -> Result<Var, GradError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = t.value(y).shape().to_vec();
    let w = t.constant(uniform(&shape, -1.0, 1.0, &mut rng));
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

macro_rules! case {
    ($name:expr, |$rng:ident| $body:block) => {
        GradCase {
            name: $name,
            build: |$rng: &mut ChaCha8Rng| $body,
        }
    };
}

/// Every differentiable primitive of the tape, with each operand position
/// of binary primitives checked separately.
pub fn grad_cases() -> Vec<GradCase> {
    vec![
        case!("matmul_lhs", |rng| {
            let b = uniform(&[4, 2], -1.0, 1.0, rng);
            let f: GradFn = Box::new(move |t, x| {
                let c = t.constant(b.clone());
                let y = t.matmul(x, c)?;
                weighted_sum(t, y, 1)
            });
            (f, uniform(&[3, 4], -1.0, 1.0, rng))
        }),
        case!("matmul_rhs", |rng| {
            let a = uniform(&[3, 4], -1.0, 1.0, rng);
            let f: GradFn = Box::new(move |t, x| {
                let c = t.constant(a.clone());
                let y = t.matmul(c, x)?;
                weighted_sum(t, y, 2)
            });
            (f, uniform(&[4, 2], -1.0, 1.0, rng))
        }),
        case!("linear_input", |rng| {
            let w = uniform(&[3, 4], -1.0, 1.0, rng);
            let b = uniform(&[3], -1.0, 1.0, rng);
            let f: GradFn = Box::new(move |t, x| {
                let (w, b) = (t.constant(w.clone()), t.constant(b.clone()));
                let y = t.linear(x, w, Some(b))?;
                weighted_sum(t, y, 3)
            });
            (f, uniform(&[2, 4], -1.0, 1.0, rng))
        }),
        case!("linear_weight", |rng| {
            let x = uniform(&[2, 4], -1.0, 1.0, rng);
            let f: GradFn = Box::new(move |t, w| {
                let x = t.constant(x.clone());
                let y = t.linear(x, w, None)?;
                weighted_sum(t, y, 4)
            });
            (f, uniform(&[3, 4], -1.0, 1.0, rng))
        }),
        case!("linear_bias", |rng| {
            let x = uniform(&[2, 4], -1.0, 1.0, rng);
            let w = uniform(&[3, 4], -1.0, 1.0, rng);
            let f: GradFn = Box::new(move |t, b| {
                let (x, w) = (t.constant(x.clone()), t.constant(w.clone()));
                let y = t.linear(x, w, Some(b))?;
                weighted_sum(t, y, 5)
            });
            (f, uniform(&[3], -1.0, 1.0, rng))
        }),
        case!("conv2d_input", |rng| {
            let w = uniform(&[2, 2, 3, 3], -1.0, 1.0, rng);
            let f: GradFn = Box::new(move |t, x| {
                let w = t.constant(w.clone());
                let y = t.conv2d(x, w, None)?;
                weighted_sum(t, y, 6)
            });
            (f, uniform(&[1, 2, 4, 4], -1.0, 1.0, rng))
        }),
        case!("conv2d_weight", |rng| {
            let x = uniform(&[2, 2, 4, 4], -1.0, 1.0, rng);
            let f: GradFn = Box::new(move |t, w| {
                let x = t.constant(x.clone());
                let y = t.conv2d(x, w, None)?;
                weighted_sum(t, y, 7)
            });
            (f, uniform(&[3, 2, 3, 3], -1.0, 1.0, rng))
        }),
        case!("conv2d_1x1_bias", |rng| {
            let x = uniform(&[2, 2, 3, 3], -1.0, 1.0, rng);
            let w = uniform(&[3, 2, 1, 1], -1.0, 1.0, rng);
            let f: GradFn = Box::new(move |t, b| {
                let (x, w) = (t.constant(x.clone()), t.constant(w.clone()));
                let y = t.conv2d(x, w, Some(b))?;
                weighted_sum(t, y, 8)
            });
            (f, uniform(&[3], -1.0, 1.0, rng))
        }),
        case!("relu", |rng| {
            let f: GradFn = Box::new(|t, x| {
                let y = t.relu(x);
                weighted_sum(t, y, 9)
            });
            (f, away_from_zero(&[2, 5], rng))
        }),
        case!("sigmoid", |rng| {
            let f: GradFn = Box::new(|t, x| {
                let y = t.sigmoid(x);
                weighted_sum(t, y, 10)
            });
            (f, uniform(&[2, 5], -3.0, 3.0, rng))
        }),
        case!("softmax", |rng| {
            let f: GradFn = Box::new(|t, x| {
                let y = t.softmax(x);
                weighted_sum(t, y, 11)
            });
            (f, uniform(&[3, 4], -2.0, 2.0, rng))
        }),
        case!("invert", |rng| {
            let f: GradFn = Box::new(|t, x| {
                let y = t.invert(x);
                weighted_sum(t, y, 12)
            });
            (f, uniform(&[6], 0.5, 2.0, rng))
        }),
        case!("abs", |rng| {
            let f: GradFn = Box::new(|t, x| {
                let y = t.abs(x);
                weighted_sum(t, y, 13)
            });
            (f, away_from_zero(&[6], rng))
        }),
        case!("log", |rng| {
            let f: GradFn = Box::new(|t, x| {
                let y = t.log(x);
                weighted_sum(t, y, 14)
            });
            (f, uniform(&[6], 0.5, 3.0, rng))
        }),
        case!("square", |rng| {
            let f: GradFn = Box::new(|t, x| {
                let y = t.square(x);
                weighted_sum(t, y, 15)
            });
            (f, uniform(&[6], -2.0, 2.0, rng))
        }),
        case!("scale", |rng| {
            let k = rng.random_range(-3.0..3.0);
            let f: GradFn = Box::new(move |t, x| {
                let y = t.scale(x, k);
                weighted_sum(t, y, 16)
            });
            (f, uniform(&[6], -2.0, 2.0, rng))
        }),
        case!("add", |rng| {
            let c = uniform(&[2, 3], -1.0, 1.0, rng);
            let f: GradFn = Box::new(move |t, x| {
                let c = t.constant(c.clone());
                let y = t.add(c, x)?;
                weighted_sum(t, y, 17)
            });
            (f, uniform(&[2, 3], -1.0, 1.0, rng))
        }),
        case!("sub_lhs", |rng| {
            let c = uniform(&[2, 3], -1.0, 1.0, rng);
            let f: GradFn = Box::new(move |t, x| {
                let c = t.constant(c.clone());
                let y = t.sub(x, c)?;
                weighted_sum(t, y, 18)
            });
            (f, uniform(&[2, 3], -1.0, 1.0, rng))
        }),
        case!("sub_rhs", |rng| {
            let c = uniform(&[2, 3], -1.0, 1.0, rng);
            let f: GradFn = Box::new(move |t, x| {
                let c = t.constant(c.clone());
                let y = t.sub(c, x)?;
                weighted_sum(t, y, 19)
            });
            (f, uniform(&[2, 3], -1.0, 1.0, rng))
        }),
        case!("mul", |rng| {
            let c = uniform(&[2, 3], -1.0, 1.0, rng);
            let f: GradFn = Box::new(move |t, x| {
                let c = t.constant(c.clone());
                let y = t.mul(c, x)?;
                weighted_sum(t, y, 20)
            });
            (f, uniform(&[2, 3], -1.0, 1.0, rng))
        }),
        case!("mul_self", |rng| {
            let f: GradFn = Box::new(|t, x| {
                let y = t.mul(x, x)?;
                weighted_sum(t, y, 21)
            });
            (f, uniform(&[2, 3], -1.0, 1.0, rng))
        }),
        case!("minimum", |rng| {
            let x = away_from_zero(&[8], rng);
            let c = x.map(|v| v + if rng_sign(v * 3.0) { 0.5 } else { -0.5 });
            let f: GradFn = Box::new(move |t, x| {
                let c = t.constant(c.clone());
                let y = t.minimum(x, c)?;
                weighted_sum(t, y, 22)
            });
            (f, x)
        }),
        case!("maximum", |rng| {
            let x = away_from_zero(&[8], rng);
            let c = x.map(|v| v + if rng_sign(v * 5.0) { 0.5 } else { -0.5 });
            let f: GradFn = Box::new(move |t, x| {
                let c = t.constant(c.clone());
                let y = t.maximum(c, x)?;
                weighted_sum(t, y, 23)
            });
            (f, x)
        }),
        case!("sum", |rng| {
            let f: GradFn = Box::new(|t, x| {
                let s = t.square(x);
                Ok(t.sum(s))
            });
            (f, uniform(&[2, 3], -1.0, 1.0, rng))
        }),
        case!("mean", |rng| {
            let f: GradFn = Box::new(|t, x| {
                let s = t.square(x);
                Ok(t.mean(s))
            });
            (f, uniform(&[2, 3], -1.0, 1.0, rng))
        }),
        case!("transpose", |rng| {
            let f: GradFn = Box::new(|t, x| {
                let y = t.transpose(x)?;
                weighted_sum(t, y, 24)
            });
            (f, uniform(&[2, 5], -1.0, 1.0, rng))
        }),
        case!("reshape", |rng| {
            let f: GradFn = Box::new(|t, x| {
                let y = t.reshape(x, &[5, 2])?;
                weighted_sum(t, y, 25)
            });
            (f, uniform(&[2, 5], -1.0, 1.0, rng))
        }),
        case!("l1_norm", |rng| {
            let f: GradFn = Box::new(|t, x| Ok(t.l1_norm(x)));
            (f, away_from_zero(&[7], rng))
        }),
        case!("frobenius_norm", |rng| {
            let f: GradFn = Box::new(|t, x| Ok(t.frobenius_norm(x)));
            (f, uniform(&[2, 4], 0.1, 1.0, rng))
        }),
        case!("cross_entropy", |rng| {
            let labels: Vec<usize> = (0..3).map(|_| rng.random_range(0..4)).collect();
            let f: GradFn = Box::new(move |t, x| Ok(t.cross_entropy(x, &labels)?));
            (f, uniform(&[3, 4], -2.0, 2.0, rng))
        }),
        case!("avg_pool2", |rng| {
            let f: GradFn = Box::new(|t, x| {
                let y = t.avg_pool2(x)?;
                weighted_sum(t, y, 26)
            });
            (f, uniform(&[1, 2, 4, 4], -1.0, 1.0, rng))
        }),
        case!("avg_pool3", |rng| {
            let f: GradFn = Box::new(|t, x| {
                let y = t.avg_pool3(x)?;
                weighted_sum(t, y, 27)
            });
            (f, uniform(&[1, 2, 4, 4], -1.0, 1.0, rng))
        }),
        case!("global_avg_pool", |rng| {
            let f: GradFn = Box::new(|t, x| {
                let y = t.global_avg_pool(x)?;
                weighted_sum(t, y, 28)
            });
            (f, uniform(&[2, 3, 3, 3], -1.0, 1.0, rng))
        }),
    ]
}

/// Worst relative finite-difference error of `case` over `points` seeded
/// evaluation points.
pub fn worst_grad_error(case: &GradCase, points: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let (f, x) = (case.build)(&mut rng);
        let err = greenfactory::gradient_check(&f, &x, 1e-5).unwrap_or_else(|e| panic!("{}: {e}", case.name));
        worst = worst.max(err);
    }
    worst
}
