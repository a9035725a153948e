mod common;

use common::brute_ntxent;
use keyscope::contrastive::{ntxent_loss, ContrastiveBatch};
use keyscope::tensor::{Graph, ParamStore, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn views(n: usize, d: usize, rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut draw = || (0..d).map(|_| StandardNormal.sample(&mut *rng)).collect::<Vec<f64>>();
    let a = (0..n).map(|_| draw()).collect();
    let b = (0..n).map(|_| draw()).collect();
    (a, b)
}

fn loss(a: &[Vec<f64>], b: &[Vec<f64>], tau: f64) -> f64 {
    ntxent_loss(&ContrastiveBatch::from_views(a, b).unwrap(), tau).unwrap()
}

#[test]
fn single_pair_has_zero_loss() {
    let a = vec![vec![1.0, 2.0, -0.5]];
    let b = vec![vec![-3.0, 0.1, 4.0]];
    assert!(loss(&a, &b, 0.1).abs() < 1e-12);
}

#[test]
fn identical_embeddings_give_ln3() {
    let v = vec![0.3, -1.2, 2.0];
    let a = vec![v.clone(), v.clone()];
    let b = vec![v.clone(), v];
    for tau in [0.05, 0.1, 1.0] {
        assert!((loss(&a, &b, tau) - 3f64.ln()).abs() < 1e-6);
    }
}

#[test]
fn matches_brute_force_for_small_batches() {
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..=4usize);
        let d = rng.random_range(2..9usize);
        let tau = rng.random_range(0.05..2.0);
        let (a, b) = views(n, d, &mut rng);
        let got = loss(&a, &b, tau);
        let want = brute_ntxent(&a, &b, tau);
        assert!((got - want).abs() < 1e-6, "seed {seed}: {got} vs {want}");
    }
}

#[test]
fn graph_loss_agrees_with_reference() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(2..=6usize);
        let (a, b) = views(n, 5, &mut rng);
        let rows: Vec<f64> = a.iter().zip(&b).flat_map(|(x, y)| x.iter().chain(y)).copied().collect();
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store, false);
        let z = g.input(Tensor::new(vec![2 * n, 5], rows).unwrap());
        let l = g.ntxent(z, 0.1).unwrap();
        let got = g.value(l).item();
        assert!((got - loss(&a, &b, 0.1)).abs() < 1e-9);
    }
}

#[test]
fn rejects_bad_inputs() {
    let a = vec![vec![1.0, 0.0]];
    assert!(ntxent_loss(&ContrastiveBatch::from_views(&a, &a).unwrap(), 0.0).is_err());
    assert!(ContrastiveBatch::from_views(&a, &[vec![0.0, 0.0]]).is_err());
    assert!(ContrastiveBatch::new(vec![vec![1.0]; 3]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn invariant_to_positive_scaling(seed: u64, n in 1usize..6, s in proptest::collection::vec(0.01f64..100.0, 12)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = views(n, 4, &mut rng);
        let scale = |v: &[Vec<f64>], off: usize| -> Vec<Vec<f64>> {
            v.iter().enumerate().map(|(i, r)| r.iter().map(|x| x * s[i + off]).collect()).collect()
        };
        let base = loss(&a, &b, 0.1);
        prop_assert!((base - loss(&scale(&a, 0), &scale(&b, 6), 0.1)).abs() < 1e-6);
    }

    #[test]
    fn invariant_to_pair_permutation(seed: u64, n in 2usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = views(n, 4, &mut rng);
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let pa: Vec<_> = order.iter().map(|&i| a[i].clone()).collect();
        let pb: Vec<_> = order.iter().map(|&i| b[i].clone()).collect();
        prop_assert!((loss(&a, &b, 0.1) - loss(&pa, &pb, 0.1)).abs() < 1e-6);
        // swapping the two views is also a relabelling of anchors
        prop_assert!((loss(&a, &b, 0.1) - loss(&b, &a, 0.1)).abs() < 1e-6);
    }
}
