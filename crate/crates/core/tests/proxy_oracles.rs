//! Proxy numerics checked against dense linear-algebra oracles and
//! independent recomputations.

use greenfactory::arch::{instantiate, sample_spec, ArchSpec, SizeSpec};
use greenfactory::linalg::matrix_spectral_norm;
use greenfactory::probe::gaussian_batch;
use greenfactory::proxy::{self, condition_number, naswot, ntk, zen_score, zico_from_grads};
use greenfactory::Tensor;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect()
}

#[test]
fn power_iteration_matches_svd() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5ed);
    for trial in 0..20 {
        let a = gaussian_matrix(32, 32, &mut rng);
        let oracle = DMatrix::from_row_slice(32, 32, &a).singular_values().max();
        let got = matrix_spectral_norm(&a, 32, 32, 20, &mut rng);
        let rel = (got - oracle).abs() / oracle;
        assert!(
            rel < 1e-4,
            "trial {trial}: power iteration {got} vs svd {oracle} (rel {rel:e})"
        );
    }
}

#[test]
fn low_rank_maps_terminate_early() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x1a2);
    let (u, v) = (gaussian_matrix(1, 9, &mut rng), gaussian_matrix(1, 7, &mut rng));
    let outer: Vec<f64> = u.iter().flat_map(|a| v.iter().map(move |b| a * b)).collect();
    let norm = |x: &[f64]| x.iter().map(|t| t * t).sum::<f64>().sqrt();
    let got = matrix_spectral_norm(&outer, 9, 7, 20, &mut rng);
    let want = norm(&u) * norm(&v);
    assert!((got - want).abs() / want < 1e-12, "{got} vs {want}");
    assert_eq!(matrix_spectral_norm(&[0.0; 12], 3, 4, 20, &mut rng), 0.0);
}

#[test]
fn factored_norm_matches_dense_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xfac);
    let (n, d_out, d_in) = (6, 5, 7);
    let v: Vec<f64> = proxy::rademacher(n * d_out, &mut rng);
    let g = gaussian_matrix(n, d_in, &mut rng);
    // J = (1/n) Vᵀ G, formed explicitly for the oracle
    let vm = DMatrix::from_row_slice(n, d_out, &v);
    let gm = DMatrix::from_row_slice(n, d_in, &g);
    let j = vm.transpose() * gm / n as f64;
    let oracle = j.singular_values().max();
    let got = proxy::factored_spectral_norm(&v, &g, n, d_out, d_in, 200, &mut rng);
    assert!((got - oracle).abs() / oracle < 1e-6, "{got} vs {oracle}");
}

#[test]
fn ntk_condition_number_matches_eigen_oracle() {
    for seed in 0..6u64 {
        let space = if seed % 2 == 0 { "tss" } else { "sss" };
        let net = instantiate(&sample_spec(space, 40 + seed).unwrap(), seed);
        let batch = gaussian_batch(&net, 6, seed);
        let (k, n) = ntk(&net, &batch).unwrap();
        let eig = DMatrix::from_row_slice(n, n, &k).symmetric_eigen().eigenvalues;
        assert!(eig.min() >= -1e-8 * eig.max().abs().max(1.0), "NTK not PSD: {eig}");
        let kappa = condition_number(&k, n);
        if eig.min() > 0.0 {
            let oracle = eig.max() / eig.min();
            assert!(
                (kappa - oracle).abs() / oracle < 1e-6,
                "seed {seed}: {kappa} vs {oracle}"
            );
        } else {
            assert!(kappa.is_infinite());
        }
    }
}

#[test]
fn naswot_ignores_sample_order() {
    let net = instantiate(&sample_spec("sss", 3).unwrap(), 3);
    let batch = gaussian_batch(&net, 8, 9);
    let per = batch.numel() / 8;
    let order = [3, 0, 7, 5, 1, 6, 2, 4];
    let data: Vec<f64> = order
        .iter()
        .flat_map(|&s| batch.data()[s * per..(s + 1) * per].to_vec())
        .collect();
    let permuted = Tensor::new(batch.shape().to_vec(), data).unwrap();
    let a = naswot(&net, &batch).unwrap();
    let b = naswot(&net, &permuted).unwrap();
    assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "{a} vs {b}");
}

#[test]
fn zen_score_grows_with_width() {
    let mut not_smaller = 0;
    for seed in 0..50u64 {
        let ArchSpec::Sss(spec) = sample_spec("sss", 0x2e0 + seed).unwrap() else {
            unreachable!()
        };
        let wide = SizeSpec::new(spec.stage_widths.map(|w| 2 * w));
        let narrow_score = zen_score(&instantiate(&ArchSpec::Sss(spec), seed), 8, seed, 0.01).unwrap();
        let wide_score = zen_score(&instantiate(&ArchSpec::Sss(wide), seed), 8, seed, 0.01).unwrap();
        not_smaller += usize::from(wide_score >= narrow_score);
    }
    assert!(
        not_smaller >= 45,
        "doubling widths kept the score in only {not_smaller}/50 seeds"
    );
}

#[test]
fn zico_matches_two_batch_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x21c);
    let shapes = [[3usize, 4], [2, 5]];
    let mut batch = |_: usize| -> Vec<Tensor> {
        shapes
            .iter()
            .map(|s| {
                Tensor::new(
                    s.to_vec(),
                    (0..s[0] * s[1]).map(|_| rng.random_range(-1.0..1.0)).collect(),
                )
                .unwrap()
            })
            .collect()
    };
    let grads = vec![batch(0), batch(1)];
    // With two batches, mean = (a+b)/2 and the population std = |a-b|/2.
    let oracle: f64 = (0..shapes.len())
        .map(|l| {
            let (a, b) = (grads[0][l].data(), grads[1][l].data());
            a.iter()
                .zip(b)
                .map(|(x, y)| ((x + y) / 2.0).abs() / ((x - y).abs() / 2.0 + 1e-12))
                .sum::<f64>()
                .ln()
        })
        .sum();
    let got = zico_from_grads(&grads).unwrap();
    assert!((got - oracle).abs() < 1e-10, "{got} vs {oracle}");
}
