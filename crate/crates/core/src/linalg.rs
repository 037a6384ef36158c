//! Small dense linear algebra on row-major `f64` slices.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Eigenvalues of a symmetric `n x n` matrix by cyclic Jacobi rotations,
/// sorted ascending.
pub fn symmetric_eigenvalues(a: &[f64], n: usize) -> Vec<f64> {
    assert_eq!(a.len(), n * n);
    let mut m = a.to_vec();
    let scale = m.iter().map(|v| v * v).sum::<f64>().sqrt();
    if scale == 0.0 {
        return vec![0.0; n];
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    eig.sort_by(f64::total_cmp);
    eig
}

/// `ln |det A|` by LU with partial pivoting; `-inf` for a singular matrix.
/// Pivots below `n * eps * max|A|` count as zero.
pub fn log_abs_det(a: &[f64], n: usize) -> f64 {
    assert_eq!(a.len(), n * n);
    let mut m = a.to_vec();
    let amax = m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if amax == 0.0 || !amax.is_finite() {
        return if amax == 0.0 { f64::NEG_INFINITY } else { f64::NAN };
    }
    let tol = n as f64 * f64::EPSILON * amax;
    let mut logdet = 0.0;
    for col in 0..n {
        let (piv, pval) = (col..n)
            .map(|r| (r, m[r * n + col].abs()))
            .fold((col, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if pval <= tol {
            return f64::NEG_INFINITY;
        }
        if piv != col {
            for k in 0..n {
                m.swap(col * n + k, piv * n + k);
            }
        }
        let d = m[col * n + col];
        logdet += d.abs().ln();
        for r in col + 1..n {
            let f = m[r * n + col] / d;
            if f != 0.0 {
                for k in col..n {
                    m[r * n + k] -= f * m[col * n + k];
                }
            }
        }
    }
    logdet
}

/// `A · Aᵀ` for a row-major `rows x cols` matrix.
pub fn gram(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut g = vec![0.0; rows * rows];
    crate::tensor::gemm(rows, cols, rows, a, false, a, true, &mut g, false);
    g
}

/// Solve the symmetric positive-definite system `A x = b` by Cholesky.
/// Returns `None` if `A` is not numerically positive definite.
pub fn cholesky_solve(a: &[f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[i * n + k] * y[k]).sum();
        y[i] = (b[i] - s) / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[k * n + i] * x[k]).sum();
        x[i] = (y[i] - s) / l[i * n + i];
    }
    Some(x)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Remove from `w` its components along the orthonormal `basis` (applied
/// twice for numerical orthogonality), returning the residual norm.
fn orthogonalize(w: &mut [f64], basis: &[Vec<f64>]) -> f64 {
    for _ in 0..2 {
        for q in basis {
            let c = dot(q, w);
            w.iter_mut().zip(q).for_each(|(x, qi)| *x -= c * qi);
        }
    }
    dot(w, w).sqrt()
}

/// Largest singular value of a linear map given by its action (`apply`) and
/// its adjoint (`apply_t`), from `steps` rounds of the power iteration on
/// `AᵀA`. Instead of keeping only the last iterate, the estimate is the top
/// Ritz value of the Krylov space the iterates span (Golub-Kahan-Lanczos
/// bidiagonalization with full reorthogonalization): the same `steps`
/// products with `A` and `Aᵀ`, but the result no longer stalls when the two
/// leading singular values are close.
pub fn spectral_norm<R: Rng + ?Sized>(
    dim_in: usize,
    apply: impl Fn(&[f64]) -> Vec<f64>,
    apply_t: impl Fn(&[f64]) -> Vec<f64>,
    steps: usize,
    rng: &mut R,
) -> f64 {
    const BREAKDOWN: f64 = 1e-300;
    let mut v: Vec<f64> = (0..dim_in).map(|_| StandardNormal.sample(rng)).collect();
    let norm = dot(&v, &v).sqrt();
    if norm == 0.0 || steps == 0 {
        return 0.0;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    let mut vs: Vec<Vec<f64>> = Vec::with_capacity(steps);
    let mut us: Vec<Vec<f64>> = Vec::with_capacity(steps);
    let (mut alphas, mut betas) = (Vec::with_capacity(steps), Vec::with_capacity(steps));
    let mut u = apply(&v);
    let mut alpha = dot(&u, &u).sqrt();
    vs.push(v);
    while alpha > BREAKDOWN {
        u.iter_mut().for_each(|x| *x /= alpha);
        alphas.push(alpha);
        us.push(u);
        if alphas.len() == steps {
            break;
        }
        // next right vector: Aᵀu - α v, orthogonal to all previous ones
        let mut w = apply_t(us.last().expect("pushed"));
        let beta = orthogonalize(&mut w, &vs);
        if beta <= BREAKDOWN {
            break;
        }
        w.iter_mut().for_each(|x| *x /= beta);
        betas.push(beta);
        u = apply(&w);
        vs.push(w);
        alpha = orthogonalize(&mut u, &us);
    }
    if betas.len() == alphas.len() {
        // A maps the last right vector to zero: a final zero diagonal entry.
        alphas.push(0.0);
    }
    let k = alphas.len();
    if k == 0 {
        return 0.0;
    }
    // σ_max of the upper-bidiagonal B (diagonal α, superdiagonal β) via the
    // eigenvalues of the tridiagonal BᵀB.
    let mut btb = vec![0.0; k * k];
    for i in 0..k {
        let above = if i > 0 { betas[i - 1] } else { 0.0 };
        btb[i * k + i] = alphas[i] * alphas[i] + above * above;
        if i + 1 < k {
            btb[i * k + i + 1] = alphas[i] * betas[i];
            btb[(i + 1) * k + i] = alphas[i] * betas[i];
        }
    }
    symmetric_eigenvalues(&btb, k)[k - 1].max(0.0).sqrt()
}

/// Spectral norm of a dense row-major `rows x cols` matrix.
pub fn matrix_spectral_norm<R: Rng + ?Sized>(a: &[f64], rows: usize, cols: usize, steps: usize, rng: &mut R) -> f64 {
    spectral_norm(
        cols,
        |v| {
            (0..rows)
                .map(|i| (0..cols).map(|j| a[i * cols + j] * v[j]).sum())
                .collect()
        },
        |u| {
            (0..cols)
                .map(|j| (0..rows).map(|i| a[i * cols + j] * u[i]).sum())
                .collect()
        },
        steps,
        rng,
    )
}
