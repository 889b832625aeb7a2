mod common;

use common::covariance_eigenvalues;
use pdsm_core::numcore::rng_derive;
use pdsm_core::reduce::pca_fit;
use proptest::prelude::*;

fn random_rows(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng_derive(seed, 0);
    let scales: Vec<f64> = (0..d).map(|_| rng.uniform(0.1, 3.0)).collect();
    (0..n)
        .map(|_| scales.iter().map(|s| s * rng.normal() + 1.0).collect())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matches_explicit_covariance(n in 3usize..30, d in 1usize..12, m in 1usize..12, seed in any::<u64>()) {
        let rows = random_rows(n, d, seed);
        let pca = pca_fit(&rows, m).unwrap();
        prop_assert_eq!(pca.n_components(), m.min(n - 1).min(d));
        let reference = covariance_eigenvalues(&rows);
        for (a, b) in pca.explained_variances().iter().zip(&reference) {
            prop_assert!((a - b.max(0.0)).abs() < 1e-9 * (1.0 + b.abs()));
        }
        let c = pca.components();
        let ctc = c.transpose().matmul(c).unwrap();
        for i in 0..ctc.rows() {
            for j in 0..ctc.cols() {
                let target = if i == j { 1.0 } else { 0.0 };
                prop_assert!((ctc.get(i, j) - target).abs() < 1e-9);
            }
        }
        for (j, var) in pca.explained_variances().iter().enumerate() {
            let z: Vec<f64> = rows.iter().map(|r| pca.transform(r).unwrap()[j]).collect();
            let mean = z.iter().sum::<f64>() / n as f64;
            let v = z.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            prop_assert!((v - var).abs() < 1e-9 * (1.0 + var));
        }
    }
}

#[test]
fn full_rank_round_trip_in_512_dimensions() {
    let rows = random_rows(520, 512, 42);
    let pca = pca_fit(&rows, 512).unwrap();
    assert_eq!(pca.n_components(), 512);
    for r in rows.iter().take(20) {
        let back = pca.inverse_transform(&pca.transform(r).unwrap()).unwrap();
        let err = back.iter().zip(r).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-5, "reconstruction error {err}");
    }
}

#[test]
fn line_in_high_dimension_has_one_component() {
    let mut rng = rng_derive(1, 0);
    let dir: Vec<f64> = (0..512).map(|_| rng.normal()).collect();
    let rows: Vec<Vec<f64>> = (0..40)
        .map(|i| dir.iter().map(|d| d * i as f64 / 10.0).collect())
        .collect();
    let pca = pca_fit(&rows, 32).unwrap();
    let v = pca.explained_variances();
    assert!(v[0] > 0.0);
    assert!(v[1..].iter().all(|&x| x < 1e-9), "{:?}", &v[..4]);
}
