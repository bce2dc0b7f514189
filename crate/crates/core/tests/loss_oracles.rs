mod support;

use crlbench::objectives::{
    barlow_twins, cross_entropy, distill_kld, distill_mse, distill_sim, moco_loss, nt_xent, NegativeQueue,
};
use crlbench::tensor::Mat;
use rand::Rng;
use support::*;

const H: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
const INSTANCES: u64 = 20;

fn queue_from(rng: &mut impl Rng, k: usize, p: usize) -> (NegativeQueue, Vec<Vec<f64>>) {
    let mut queue = NegativeQueue::new(k, p).unwrap();
    let raw = random_mat(rng, k, p);
    queue.push_rows(&raw).unwrap();
    let entries = queue.entries().map(<[f64]>::to_vec).collect();
    (queue, entries)
}

#[test]
fn nt_xent_matches_brute_force_and_finite_differences() {
    for i in 0..INSTANCES {
        let mut r = rng(100 + i);
        let (b, p) = (r.random_range(1..5), r.random_range(2..6));
        let tau = r.random_range(0.2..1.5);
        let za = random_mat(&mut r, b, p);
        let zb = random_mat(&mut r, b, p);
        let out = nt_xent(&za, &zb, tau).unwrap();
        assert!((out.value - oracle_nt_xent(&za, &zb, tau)).abs() < 1e-10);
        let swapped = nt_xent(&zb, &za, tau).unwrap().value;
        assert!((out.value - swapped).abs() < 1e-12);

        let ga = numeric_grad(&za, H, |x| oracle_nt_xent(x, &zb, tau));
        let gb = numeric_grad(&zb, H, |x| oracle_nt_xent(&za, x, tau));
        assert!(
            rel_err(&out.grad_a, &ga) <= GRAD_TOL,
            "instance {i}: {}",
            rel_err(&out.grad_a, &ga)
        );
        assert!(
            rel_err(&out.grad_b, &gb) <= GRAD_TOL,
            "instance {i}: {}",
            rel_err(&out.grad_b, &gb)
        );
    }
}

#[test]
fn moco_matches_brute_force_and_finite_differences() {
    for i in 0..INSTANCES {
        let mut r = rng(200 + i);
        let (b, p, k) = (r.random_range(1..5), r.random_range(2..6), r.random_range(1..8));
        let tau = r.random_range(0.1..1.0);
        let q = random_mat(&mut r, b, p);
        let kp = random_mat(&mut r, b, p);
        let (queue, negatives) = queue_from(&mut r, k, p);
        let out = moco_loss(&q, &kp, &queue, tau).unwrap();
        assert!((out.value - oracle_moco(&q, &kp, &negatives, tau)).abs() < 1e-10);
        assert!(out.grad_b.as_slice().iter().all(|&v| v == 0.0));
        let gq = numeric_grad(&q, H, |x| oracle_moco(x, &kp, &negatives, tau));
        assert!(
            rel_err(&out.grad_a, &gq) <= GRAD_TOL,
            "instance {i}: {}",
            rel_err(&out.grad_a, &gq)
        );
    }
}

#[test]
fn barlow_matches_brute_force_and_finite_differences() {
    for i in 0..INSTANCES {
        let mut r = rng(300 + i);
        let (b, p) = (r.random_range(3..7), r.random_range(2..5));
        let lambda = r.random_range(0.0..0.5);
        let za = random_mat(&mut r, b, p);
        let zb = random_mat(&mut r, b, p);
        let out = barlow_twins(&za, &zb, lambda).unwrap();
        assert_eq!(out.guarded_dims, 0);
        assert!((out.value - oracle_barlow(&za, &zb, lambda)).abs() < 1e-9);
        let ga = numeric_grad(&za, H, |x| oracle_barlow(x, &zb, lambda));
        let gb = numeric_grad(&zb, H, |x| oracle_barlow(&za, x, lambda));
        assert!(
            rel_err(&out.grad_a, &ga) <= GRAD_TOL,
            "instance {i}: {}",
            rel_err(&out.grad_a, &ga)
        );
        assert!(
            rel_err(&out.grad_b, &gb) <= GRAD_TOL,
            "instance {i}: {}",
            rel_err(&out.grad_b, &gb)
        );
    }
}

#[test]
fn cross_entropy_matches_brute_force_and_finite_differences() {
    for i in 0..INSTANCES {
        let mut r = rng(400 + i);
        let (b, k) = (r.random_range(1..6), r.random_range(2..7));
        let mut logits = random_mat(&mut r, b, k);
        logits.scale(3.0);
        let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..k)).collect();
        let out = cross_entropy(&logits, &labels).unwrap();
        assert!((out.value - oracle_cross_entropy(&logits, &labels)).abs() < 1e-10);
        let g = numeric_grad(&logits, H, |x| oracle_cross_entropy(x, &labels));
        assert!(
            rel_err(&out.grad, &g) <= GRAD_TOL,
            "instance {i}: {}",
            rel_err(&out.grad, &g)
        );
    }
}

#[test]
fn distillation_losses_match_brute_force_and_finite_differences() {
    for i in 0..INSTANCES {
        let mut r = rng(500 + i);
        let (b, d) = (r.random_range(1..5), r.random_range(2..6));
        let s = random_mat(&mut r, b, d);
        let t = random_mat(&mut r, b, d);

        let mse = distill_mse(&s, &t).unwrap();
        assert!((mse.value - oracle_mse(&s, &t)).abs() < 1e-12);
        let g = numeric_grad(&s, H, |x| oracle_mse(x, &t));
        assert!(rel_err(&mse.grad_a, &g) <= GRAD_TOL);

        let tau = r.random_range(0.2..1.0);
        let sim = distill_sim(&s, &t, tau).unwrap();
        assert!((sim.value - oracle_nt_xent(&s, &t, tau)).abs() < 1e-10);
        assert!(sim.grad_b.as_slice().iter().all(|&v| v == 0.0));
        let g = numeric_grad(&s, H, |x| oracle_nt_xent(x, &t, tau));
        assert!(rel_err(&sim.grad_a, &g) <= GRAD_TOL);

        let kt = r.random_range(0.5..4.0);
        let kld = distill_kld(&s, &t, kt).unwrap();
        assert!((kld.value - oracle_kld(&s, &t, kt)).abs() < 1e-10);
        assert!(kld.grad_b.as_slice().iter().all(|&v| v == 0.0));
        let g = numeric_grad(&s, H, |x| oracle_kld(x, &t, kt));
        assert!(
            rel_err(&kld.grad_a, &g) <= GRAD_TOL,
            "instance {i}: {}",
            rel_err(&kld.grad_a, &g)
        );
    }
}

#[test]
fn permuting_pairs_leaves_contrastive_losses_unchanged() {
    let mut r = rng(9);
    let za = random_mat(&mut r, 4, 3);
    let zb = random_mat(&mut r, 4, 3);
    let perm = [2, 0, 3, 1];
    let pa = Mat::from_rows(&perm.iter().map(|&i| za.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
    let pb = Mat::from_rows(&perm.iter().map(|&i| zb.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
    let base = nt_xent(&za, &zb, 0.5).unwrap().value;
    assert!((nt_xent(&pa, &pb, 0.5).unwrap().value - base).abs() < 1e-12);
    let base = barlow_twins(&za, &zb, 0.01).unwrap().value;
    assert!((barlow_twins(&pa, &pb, 0.01).unwrap().value - base).abs() < 1e-12);
}
