//! Loss values against an independent f64 recomputation, stability, stop
//! gradients, and the pair loss matrix.

use hvp_core::exec;
use hvp_core::objectives::*;
use hvp_core::rng;
use hvp_core::tensor::{Graph, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn rand_tensor(r: &mut impl Rng, m: usize, d: usize, scale: f32) -> Tensor {
    let data = (0..m * d).map(|_| scale * (r.random::<f32>() * 2.0 - 1.0)).collect();
    Tensor::new(vec![m, d], data).unwrap()
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let d = t.shape()[1];
    t.data().chunks(d).map(|r| r.iter().map(|&v| v as f64).collect()).collect()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-8);
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (n(a) * n(b))
}

fn simsiam_oracle(pk: &Tensor, zl: &Tensor, pl: &Tensor, zk: &Tensor) -> Vec<f64> {
    let (pk, zl, pl, zk) = (rows(pk), rows(zl), rows(pl), rows(zk));
    (0..pk.len())
        .map(|i| 0.5 * (-cos(&pk[i], &zl[i]) - cos(&pl[i], &zk[i])))
        .collect()
}

fn lse(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn simclr_oracle(zk: &Tensor, zl: &Tensor, tau: f64, variant: SimclrVariant) -> Vec<f64> {
    let (a, b) = (rows(zk), rows(zl));
    let m = a.len();
    match variant {
        SimclrVariant::CrossView => {
            let dir = |x: &[Vec<f64>], y: &[Vec<f64>], i: usize| {
                let neg: Vec<f64> = (0..m).filter(|&j| j != i).map(|j| cos(&x[i], &y[j]) / tau).collect();
                -cos(&x[i], &y[i]) / tau + lse(&neg)
            };
            (0..m).map(|i| 0.5 * (dir(&a, &b, i) + dir(&b, &a, i))).collect()
        }
        SimclrVariant::NtXent => {
            let all: Vec<Vec<f64>> = a.iter().chain(&b).cloned().collect();
            let row = |r: usize| {
                let pos = (r + m) % (2 * m);
                let others: Vec<f64> = (0..2 * m).filter(|&j| j != r).map(|j| cos(&all[r], &all[j]) / tau).collect();
                -cos(&all[r], &all[pos]) / tau + lse(&others)
            };
            (0..m).map(|i| 0.5 * (row(i) + row(i + m))).collect()
        }
    }
}

fn eval_simclr(zk: &Tensor, zl: &Tensor, tau: f32, variant: SimclrVariant) -> Vec<f32> {
    let mut g = Graph::no_grad();
    let a = g.input(zk.clone());
    let b = g.input(zl.clone());
    let out = simclr_pair_loss(&mut g, a, b, tau, variant).unwrap();
    g.value(out).to_vec()
}

fn assert_close(got: &[f32], want: &[f64], tol: f64) {
    assert_eq!(got.len(), want.len());
    for (g, w) in got.iter().zip(want) {
        assert!((*g as f64 - w).abs() <= tol * (1.0 + w.abs()), "{g} vs {w}");
    }
}

fn views(seed: u64, n: usize, m: usize, d: usize, predictor: bool) -> (Vec<Tensor>, Vec<Tensor>) {
    let mut r = rng::stream(seed, &[]);
    let z = (0..n).map(|_| rand_tensor(&mut r, m, d, 1.0)).collect();
    let p = if predictor {
        (0..n).map(|_| rand_tensor(&mut r, m, d, 1.0)).collect()
    } else {
        Vec::new()
    };
    (z, p)
}

#[test]
fn simsiam_matrix_matches_brute_force() {
    for seed in 0..5 {
        let (z, p) = views(seed, 4, 6, 8, true);
        let emb = ViewEmbeddings::new(z.clone(), Some(p.clone())).unwrap();
        let mut r = rng::stream(seed, &[1]);
        let mat = pairwise_loss_matrix(&emb, &Objective::simsiam(), 128, &mut r).unwrap();
        assert_eq!(mat.num_pairs(), 6);
        for (j, &(k, l)) in mat.pairs().iter().enumerate() {
            let want = simsiam_oracle(&p[k], &z[l], &p[l], &z[k]);
            let got: Vec<f32> = (0..6).map(|i| mat.get(i, j)).collect();
            assert_close(&got, &want, 1e-5);
        }
    }
}

#[test]
fn simclr_matrix_matches_brute_force() {
    for variant in [SimclrVariant::CrossView, SimclrVariant::NtXent] {
        for seed in 0..3 {
            let (z, _) = views(seed, 5, 7, 6, false);
            let emb = ViewEmbeddings::new(z.clone(), None).unwrap();
            let obj = Objective::simclr(0.1, variant);
            let mut r = rng::stream(seed, &[2]);
            let mat = pairwise_loss_matrix(&emb, &obj, 128, &mut r).unwrap();
            assert_eq!(mat.num_pairs(), 10);
            for (j, &(k, l)) in mat.pairs().iter().enumerate() {
                let want = simclr_oracle(&z[k], &z[l], 0.1, variant);
                let got: Vec<f32> = (0..7).map(|i| mat.get(i, j)).collect();
                assert_close(&got, &want, 1e-4);
            }
        }
    }
}

#[test]
fn two_views_give_the_direct_loss() {
    let (z, p) = views(3, 2, 5, 4, true);
    let emb = ViewEmbeddings::new(z.clone(), Some(p.clone())).unwrap();
    let mat = pairwise_loss_matrix(&emb, &Objective::simsiam(), 1, &mut rng::stream(0, &[])).unwrap();
    assert_eq!(mat.pairs(), &[(0, 1)]);
    let mut g = Graph::no_grad();
    let v: Vec<_> = [&p[0], &z[1], &p[1], &z[0]].iter().map(|t| g.input((*t).clone())).collect();
    let direct = simsiam_pair_loss(&mut g, v[0], v[1], v[2], v[3]).unwrap();
    assert_eq!(g.value(direct), mat.row(0).iter().chain((1..5).flat_map(|i| mat.row(i))).cloned().collect::<Vec<_>>().as_slice());
}

#[test]
fn pair_cap_subsamples_and_matches_oracle() {
    let n = 20;
    let (z, p) = views(4, n, 3, 4, true);
    let emb = ViewEmbeddings::new(z.clone(), Some(p.clone())).unwrap();
    let a = pairwise_loss_matrix(&emb, &Objective::simsiam(), 16, &mut rng::stream(9, &[])).unwrap();
    let b = pairwise_loss_matrix(&emb, &Objective::simsiam(), 16, &mut rng::stream(9, &[])).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.num_pairs(), 16);
    for (j, &(k, l)) in a.pairs().iter().enumerate() {
        let want = simsiam_oracle(&p[k], &z[l], &p[l], &z[k]);
        assert_close(&(0..3).map(|i| a.get(i, j)).collect::<Vec<_>>(), &want, 1e-5);
    }
    assert!(pairwise_loss_matrix(&emb, &Objective::simsiam(), 0, &mut rng::stream(9, &[])).is_err());
}

#[test]
fn matrix_is_independent_of_parallelism() {
    let (z, p) = views(5, 6, 9, 8, true);
    let emb = ViewEmbeddings::new(z, Some(p)).unwrap();
    let run = || pairwise_loss_matrix(&emb, &Objective::simsiam(), 128, &mut rng::stream(1, &[])).unwrap();
    let par = run();
    exec::set_parallel(false);
    let seq = run();
    exec::set_parallel(true);
    assert_eq!(par, seq);
}

#[test]
fn simclr_is_stable_for_large_norms_and_small_tau() {
    let mut r = rng::stream(6, &[]);
    for variant in [SimclrVariant::CrossView, SimclrVariant::NtXent] {
        let a = rand_tensor(&mut r, 8, 16, 1e3);
        let b = rand_tensor(&mut r, 8, 16, 1e3);
        let out = eval_simclr(&a, &b, 0.05, variant);
        assert!(out.iter().all(|v| v.is_finite()), "{out:?}");
        assert_close(&out, &simclr_oracle(&a, &b, 0.05, variant), 1e-4);
    }
}

#[test]
fn simclr_is_scale_invariant() {
    let mut r = rng::stream(7, &[]);
    let a = rand_tensor(&mut r, 6, 5, 1.0);
    let b = rand_tensor(&mut r, 6, 5, 1.0);
    let scaled = |t: &Tensor, c: f32| Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * c).collect()).unwrap();
    let base = eval_simclr(&a, &b, 0.2, SimclrVariant::CrossView);
    let big = eval_simclr(&scaled(&a, 37.0), &scaled(&b, 37.0), 0.2, SimclrVariant::CrossView);
    for (x, y) in base.iter().zip(&big) {
        assert!((x - y).abs() < 1e-4);
    }
}

#[test]
fn stop_gradient_blocks_target_branches() {
    let mut r = rng::stream(8, &[]);
    for _ in 0..10 {
        let mut params: Vec<Tensor> = (0..4).map(|_| rand_tensor(&mut r, 4, 6, 1.0).requiring_grad()).collect();
        let mut g = Graph::new();
        let v: Vec<_> = params.iter().enumerate().map(|(i, p)| g.param(i, p)).collect();
        let per = simsiam_pair_loss(&mut g, v[0], v[1], v[2], v[3]).unwrap();
        let loss = g.mean(per);
        g.backward(loss, &mut params).unwrap();
        // order: p_k, z_l, p_l, z_k
        for i in [1, 3] {
            assert!(params[i].grad().unwrap().iter().all(|&x| x == 0.0));
        }
        for i in [0, 2] {
            assert!(params[i].grad().unwrap().iter().any(|&x| x != 0.0));
        }
    }
}

fn finite_tensor(m: usize, d: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-50.0f32..50.0, m * d).prop_map(move |v| Tensor::new(vec![m, d], v).unwrap())
}

proptest! {
    #[test]
    fn simsiam_in_range_and_symmetric(
        pk in finite_tensor(3, 4), zl in finite_tensor(3, 4),
        pl in finite_tensor(3, 4), zk in finite_tensor(3, 4),
    ) {
        let mut g = Graph::no_grad();
        let v: Vec<_> = [&pk, &zl, &pl, &zk].iter().map(|t| g.input((*t).clone())).collect();
        let kl = simsiam_pair_loss(&mut g, v[0], v[1], v[2], v[3]).unwrap();
        let lk = simsiam_pair_loss(&mut g, v[2], v[3], v[0], v[1]).unwrap();
        prop_assert_eq!(g.value(kl), g.value(lk));
        for &x in g.value(kl) {
            prop_assert!((-1.0 - 1e-6..=1.0 + 1e-6).contains(&x));
        }
    }

    #[test]
    fn simclr_symmetric_and_finite(a in finite_tensor(4, 3), b in finite_tensor(4, 3), nt in any::<bool>()) {
        let variant = if nt { SimclrVariant::NtXent } else { SimclrVariant::CrossView };
        let kl = eval_simclr(&a, &b, 0.1, variant);
        let lk = eval_simclr(&b, &a, 0.1, variant);
        prop_assert!(kl.iter().all(|v| v.is_finite()));
        for (x, y) in kl.iter().zip(&lk) {
            prop_assert!((x - y).abs() <= 1e-5 * (1.0 + x.abs()));
        }
    }
}
