mod common;

use common::{random_frozen, spec_with};
use keyscope::analysis::{
    aug_linearity_report, fit_linear_map, pca_coordinates, ridge_fit, Augmentation,
    PairedEmbeddings,
};
use keyscope::audio::synth_clip;
use keyscope::keyeval::Key;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn refs(v: &[Vec<f64>]) -> Vec<&Vec<f64>> {
    v.iter().collect()
}

fn gaussian_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..d).map(|_| StandardNormal.sample(&mut *rng)).collect())
        .collect()
}

/// Plain gradient descent on ½‖XW + b − Y‖² + ½λ‖W‖², no linear algebra library.
fn gd_ridge(x: &[Vec<f64>], y: &[Vec<f64>], lambda: f64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let (n, d, k) = (x.len(), x[0].len(), y[0].len());
    let mut w = vec![vec![0.0; k]; d];
    let mut b = vec![0.0; k];
    let trace: f64 = x.iter().flatten().map(|v| v * v).sum();
    let lr = 1.0 / (trace + n as f64 + lambda);
    for _ in 0..40_000 {
        let mut gw = vec![vec![0.0; k]; d];
        let mut gb = vec![0.0; k];
        for (xi, yi) in x.iter().zip(y) {
            for j in 0..k {
                let pred: f64 = (0..d).map(|i| xi[i] * w[i][j]).sum::<f64>() + b[j];
                let r = pred - yi[j];
                gb[j] += r;
                for i in 0..d {
                    gw[i][j] += r * xi[i];
                }
            }
        }
        for i in 0..d {
            for j in 0..k {
                w[i][j] -= lr * (gw[i][j] + lambda * w[i][j]);
            }
        }
        for j in 0..k {
            b[j] -= lr * gb[j];
        }
    }
    (w, b)
}

#[test]
fn ridge_matches_gradient_descent() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = gaussian_rows(30, 4, &mut rng);
    let y = gaussian_rows(30, 4, &mut rng);
    for lambda in [0.0, 0.5, 5.0] {
        let (map, used) = ridge_fit(&refs(&x), &refs(&y), Some(lambda)).unwrap();
        assert_eq!(used, lambda);
        let (w, b) = gd_ridge(&x, &y, lambda);
        for i in 0..4 {
            for j in 0..4 {
                assert!((map.weight[(i, j)] - w[i][j]).abs() < 1e-4, "λ={lambda} W[{i},{j}]");
            }
        }
        for j in 0..4 {
            assert!((map.bias[j] - b[j]).abs() < 1e-4, "λ={lambda} b[{j}]");
        }
    }
}

#[test]
fn recovers_a_planted_affine_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let d = 6;
    let a: Vec<Vec<f64>> = gaussian_rows(d, d, &mut rng);
    let shift: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x = gaussian_rows(400, d, &mut rng);
    let y: Vec<Vec<f64>> = x
        .iter()
        .map(|xi| {
            (0..d)
                .map(|j| {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    (0..d).map(|i| xi[i] * a[i][j]).sum::<f64>() + shift[j] + 0.01 * noise
                })
                .collect()
        })
        .collect();
    let pairs = PairedEmbeddings::new(x, y, None).unwrap();
    let (map, report) = fit_linear_map(&pairs, Some(1e-6), 1).unwrap();
    for i in 0..d {
        for j in 0..d {
            assert!((map.weight[(i, j)] - a[i][j]).abs() < 5e-3);
        }
    }
    assert!(report.test_mse < 2e-4, "{}", report.test_mse);
    assert!(report.train_mse < report.identity_train_mse);
    assert_eq!(report.n_train + report.n_test, 400);
}

#[test]
fn identity_pairs_fit_to_near_zero_residual() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = gaussian_rows(50, 5, &mut rng);
    let pairs = PairedEmbeddings::new(x.clone(), x, None).unwrap();
    let (_, r) = fit_linear_map(&pairs, None, 0).unwrap();
    assert!(r.identity_train_mse == 0.0 && r.train_mse < 1e-4);
}

#[test]
fn report_has_a_row_per_augmentation() {
    let enc = random_frozen(1, 4);
    let clips: Vec<_> = (0..12)
        .map(|i| synth_clip(&spec_with(Key::from_class_index(i * 2).unwrap(), 2.0, i as u64)).unwrap())
        .collect();
    let augs: Vec<Augmentation> = ["pitch:+2", "gain:-6", "lowpass:2000"]
        .iter()
        .map(|s| Augmentation::parse(s).unwrap())
        .collect();
    let rows = aug_linearity_report(&clips, &enc, &augs, 30_000, None, 0).unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0].augmentation, augs[0].name());
    assert!(rows.iter().all(|r| r.n_train + r.n_test == 12));
}

#[test]
fn pca_lists_clean_and_augmented_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = gaussian_rows(20, 8, &mut rng);
    let y = gaussian_rows(20, 8, &mut rng);
    let coords = pca_coordinates(&PairedEmbeddings::new(x, y, None).unwrap()).unwrap();
    assert_eq!(coords.len(), 40);
    assert_eq!(coords.iter().filter(|c| c.3).count(), 20);
    // centred projections: coordinates average to zero
    let m1: f64 = coords.iter().map(|c| c.1).sum::<f64>() / 40.0;
    assert!(m1.abs() < 1e-9);
}
