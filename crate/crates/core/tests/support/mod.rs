//! Independent reference implementations used by the integration tests.
//!
//! Everything here is written from the defining formulas with plain loops and
//! shares no code with the library beyond its data types.

#![allow(dead_code, clippy::needless_range_loop)]

use crlbench::augment::AugmentConfig;
use crlbench::continual::{ModelSpec, RegimeMode, TrainingRegime};
use crlbench::dataspec::{Dataset, SyntheticSpec};
use crlbench::evaluation::AccuracyMatrix;
use crlbench::objectives::{SslMethod, BARLOW_EPS};
use crlbench::tensor::Mat;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_mat(rng: &mut impl Rng, rows: usize, cols: usize) -> Mat {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Mat::from_vec(rows, cols, data).unwrap()
}

// ---------------------------------------------------------------------------
// Metrics

pub fn oracle_avg(rows: &[Vec<f64>], t: usize) -> f64 {
    let mut s = 0.0;
    for j in 0..t {
        s += rows[t - 1][j];
    }
    s / t as f64
}

pub fn oracle_forgetting(rows: &[Vec<f64>]) -> f64 {
    let t_final = rows.len();
    if t_final < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for j in 0..t_final - 1 {
        let mut best = f64::NEG_INFINITY;
        for tau in 0..t_final {
            if j <= tau {
                let d = rows[tau][j] - rows[t_final - 1][j];
                if d > best {
                    best = d;
                }
            }
        }
        total += best;
    }
    total / (t_final - 1) as f64
}

pub fn random_rows(rng: &mut impl Rng, t: usize) -> Vec<Vec<f64>> {
    (1..=t)
        .map(|i| (0..i).map(|_| rng.random_range(0.0..=1.0)).collect())
        .collect()
}

pub fn matrix(rows: &[Vec<f64>]) -> AccuracyMatrix {
    AccuracyMatrix::from_rows(rows.to_vec()).unwrap()
}

// ---------------------------------------------------------------------------
// Losses

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    d / (na * nb)
}

pub fn oracle_nt_xent(za: &Mat, zb: &Mat, tau: f64) -> f64 {
    let b = za.rows();
    let rows: Vec<&[f64]> = (0..b).map(|i| za.row(i)).chain((0..b).map(|i| zb.row(i))).collect();
    let n = 2 * b;
    let mut total = 0.0;
    for i in 0..n {
        let pos = if i < b { i + b } else { i - b };
        let num = (cos(rows[i], rows[pos]) / tau).exp();
        let mut den = 0.0;
        for k in 0..n {
            if k != i {
                den += (cos(rows[i], rows[k]) / tau).exp();
            }
        }
        total += -(num / den).ln();
    }
    total / n as f64
}

pub fn oracle_moco(q: &Mat, k: &Mat, negatives: &[Vec<f64>], tau: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..q.rows() {
        let num = (cos(q.row(i), k.row(i)) / tau).exp();
        let mut den = num;
        for n in negatives {
            den += (cos(q.row(i), n) / tau).exp();
        }
        total += -(num / den).ln();
    }
    total / q.rows() as f64
}

fn standardized(z: &Mat) -> Vec<Vec<f64>> {
    let (b, p) = z.shape();
    let mut cols = vec![vec![0.0; b]; p];
    for j in 0..p {
        let mean: f64 = (0..b).map(|i| z.get(i, j)).sum::<f64>() / b as f64;
        let var: f64 = (0..b).map(|i| (z.get(i, j) - mean).powi(2)).sum::<f64>() / b as f64;
        for i in 0..b {
            cols[j][i] = (z.get(i, j) - mean) / (var + BARLOW_EPS).sqrt();
        }
    }
    cols
}

pub fn oracle_barlow(za: &Mat, zb: &Mat, lambda: f64) -> f64 {
    let (b, p) = za.shape();
    let a = standardized(za);
    let c = standardized(zb);
    let mut total = 0.0;
    for i in 0..p {
        for j in 0..p {
            let mut cij = 0.0;
            for r in 0..b {
                cij += a[i][r] * c[j][r];
            }
            cij /= b as f64;
            total += if i == j {
                (1.0 - cij).powi(2)
            } else {
                lambda * cij * cij
            };
        }
    }
    total
}

pub fn oracle_cross_entropy(logits: &Mat, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let den: f64 = logits.row(i).iter().map(|v| v.exp()).sum();
        total += -(logits.get(i, y).exp() / den).ln();
    }
    total / labels.len() as f64
}

pub fn oracle_mse(s: &Mat, t: &Mat) -> f64 {
    let n = s.as_slice().len() as f64;
    s.as_slice()
        .iter()
        .zip(t.as_slice())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / n
}

pub fn oracle_kld(s: &Mat, t: &Mat, tau: f64) -> f64 {
    let soft = |row: &[f64]| {
        let e: Vec<f64> = row.iter().map(|v| (v / tau).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|v| v / z).collect::<Vec<_>>()
    };
    let mut total = 0.0;
    for i in 0..s.rows() {
        let (ps, pt) = (soft(s.row(i)), soft(t.row(i)));
        for j in 0..ps.len() {
            total += pt[j] * (pt[j] / ps[j]).ln();
        }
    }
    tau * tau * total / s.rows() as f64
}

/// Central finite differences of `f` at `x`.
pub fn numeric_grad(x: &Mat, h: f64, f: impl Fn(&Mat) -> f64) -> Mat {
    let mut g = Mat::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        for j in 0..x.cols() {
            let mut xp = x.clone();
            xp.set(i, j, x.get(i, j) + h);
            let mut xm = x.clone();
            xm.set(i, j, x.get(i, j) - h);
            g.set(i, j, (f(&xp) - f(&xm)) / (2.0 * h));
        }
    }
    g
}

/// `||a - b|| / max(||a||, ||b||, 1e-8)` in the Euclidean norm.
pub fn rel_err(a: &Mat, b: &Mat) -> f64 {
    let n = |m: &Mat| m.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff: f64 = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    diff / n(a).max(n(b)).max(1e-8)
}

// ---------------------------------------------------------------------------
// Shared experiment setup

/// The corpus used for the trend experiments: 10 classes, 40 train and 40
/// test clips per class, 32 bins x 64 frames, noise std 3.
pub fn desk_spec() -> SyntheticSpec {
    SyntheticSpec {
        num_classes: 10,
        train_per_class: 40,
        test_per_class: 40,
        freq_bins: 32,
        frames: 64,
        noise_sigma: 3.0,
        seed: 7,
    }
}

pub fn desk_dataset() -> Dataset {
    desk_spec().generate().unwrap()
}

pub const DESK_SEGMENT: usize = 32;

pub fn desk_regime(mode: RegimeMode) -> TrainingRegime {
    TrainingRegime::new(mode, SslMethod::Simclr, AugmentConfig::defaults_for(32, DESK_SEGMENT))
}

/// A few-second setup for structural checks.
pub fn tiny_dataset(seed: u64) -> Dataset {
    SyntheticSpec {
        num_classes: 6,
        train_per_class: 6,
        test_per_class: 3,
        freq_bins: 16,
        frames: 32,
        noise_sigma: 0.5,
        seed,
    }
    .generate()
    .unwrap()
}

pub fn tiny_regime(mode: RegimeMode, method: SslMethod) -> TrainingRegime {
    let mut r = TrainingRegime::new(mode, method, AugmentConfig::defaults_for(16, 16));
    r.epochs_per_task = 2;
    r.batch_size = 6;
    r.ssl.moco_queue = 32;
    r.model = ModelSpec {
        channels: vec![8, 16],
        kernel: 3,
        proj_hidden: None,
        proj_dim: 8,
    };
    r
}
