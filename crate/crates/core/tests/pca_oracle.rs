#[path = "support/jacobi.rs"]
mod jacobi;

use jacobi::jacobi;
use milpath_core::embed::{covariance, fit_pca_2d};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_data(seed: u64, n: usize, d: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mix: Vec<f64> = (0..d * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let scales: Vec<f64> = (0..d).map(|k| 3.0 / (k as f64 + 1.0)).collect();
    (0..n)
        .map(|_| {
            let z: Vec<f64> = (0..d).map(|k| scales[k] * rng.gen_range(-1.0..1.0)).collect();
            (0..d).map(|i| (0..d).map(|k| mix[i * d + k] * z[k]).sum::<f64>() + 5.0).collect()
        })
        .collect()
}

#[test]
fn axes_match_dense_eigensolver_up_to_sign() {
    let mut worst = 0.0f64;
    for seed in 0..50 {
        let data = random_data(seed, 300, 5);
        let pca = fit_pca_2d(&data).unwrap();
        let (_, cov) = covariance(&data).unwrap();
        let oracle = jacobi(&cov, 5);
        for k in 0..2 {
            let axis = &pca.axes[k];
            let want = &oracle[k].1;
            let sign = if axis.iter().zip(want).map(|(a, b)| a * b).sum::<f64>() < 0.0 { -1.0 } else { 1.0 };
            let err = axis.iter().zip(want).map(|(a, b)| (a - sign * b).abs()).fold(0.0, f64::max);
            worst = worst.max(err);
            assert!(err <= 1e-6, "seed {seed} axis {k}: {err}");
            assert!((pca.variances[k] - oracle[k].0).abs() <= 1e-6 * oracle[0].0);
        }
        let n0: f64 = pca.axes[0].iter().map(|x| x * x).sum::<f64>().sqrt();
        let n1: f64 = pca.axes[1].iter().map(|x| x * x).sum::<f64>().sqrt();
        let d01: f64 = pca.axes[0].iter().zip(&pca.axes[1]).map(|(a, b)| a * b).sum();
        assert!((n0 - 1.0).abs() <= 1e-6 && (n1 - 1.0).abs() <= 1e-6 && d01.abs() <= 1e-6);
        assert!(pca.variances[0] >= pca.variances[1] && pca.variances[1] >= 0.0);
        for axis in &pca.axes {
            let k = (0..5).max_by(|&a, &b| axis[a].abs().total_cmp(&axis[b].abs())).unwrap();
            assert!(axis[k] > 0.0);
        }
    }
    println!("worst axis deviation {worst:.3e}");
}
