//! Training losses and their analytic gradients.
//!
//! Every loss takes `f64` matrices with one sample per row and returns the
//! scalar value together with the gradient for each differentiable argument.
//! Arguments that act as fixed targets (the momentum keys, queue entries and
//! distillation teachers) get an all-zero gradient: that is the stop-gradient
//! contract, made explicit so callers and tests can check it.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::tensor::{dot, norm, Mat};
use crate::{Error, Result};

const NORM_GUARD: f64 = 1e-12;
/// Added to per-dimension variance before standardizing in Barlow Twins.
pub const BARLOW_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SslMethod {
    Simclr,
    Moco,
    Barlow,
}

impl SslMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            SslMethod::Simclr => "simclr",
            SslMethod::Moco => "moco",
            SslMethod::Barlow => "barlow",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SslConfig {
    pub method: SslMethod,
    /// Defaults to 0.5 for SimCLR and 0.07 for MoCo.
    #[serde(default)]
    pub temperature: Option<f64>,
    #[serde(default = "default_barlow_lambda")]
    pub barlow_lambda: f64,
    #[serde(default = "default_moco_queue")]
    pub moco_queue: usize,
    #[serde(default = "default_moco_momentum")]
    pub moco_momentum: f64,
}

fn default_barlow_lambda() -> f64 {
    5e-3
}
fn default_moco_queue() -> usize {
    1024
}
fn default_moco_momentum() -> f64 {
    0.99
}

impl SslConfig {
    pub fn new(method: SslMethod) -> Self {
        SslConfig {
            method,
            temperature: None,
            barlow_lambda: default_barlow_lambda(),
            moco_queue: default_moco_queue(),
            moco_momentum: default_moco_momentum(),
        }
    }

    pub fn temperature(&self) -> f64 {
        self.temperature.unwrap_or(match self.method {
            SslMethod::Moco => 0.07,
            _ => 0.5,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature() > 0.0) {
            return Err(Error::Config("objective.temperature must be > 0".into()));
        }
        if !(self.barlow_lambda >= 0.0) {
            return Err(Error::Config("objective.barlow_lambda must be >= 0".into()));
        }
        if self.moco_queue < 1 {
            return Err(Error::Config("objective.moco_queue must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.moco_momentum) {
            return Err(Error::Config("objective.moco_momentum must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// `L = alpha * L_sup + beta * L_ssl`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointLossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl JointLossWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let w = JointLossWeights { alpha, beta };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config("joint.alpha and joint.beta must be >= 0".into()));
        }
        if self.alpha == 0.0 && self.beta == 0.0 {
            return Err(Error::Config("joint.alpha and joint.beta cannot both be 0".into()));
        }
        Ok(())
    }
}

impl Default for JointLossWeights {
    fn default() -> Self {
        JointLossWeights { alpha: 1.0, beta: 1.0 }
    }
}

pub fn joint_loss(sup: f64, ssl: f64, w: &JointLossWeights) -> f64 {
    w.alpha * sup + w.beta * ssl
}

/// Value and gradient of a single-argument loss.
#[derive(Clone, Debug)]
pub struct Loss {
    pub value: f64,
    pub grad: Mat,
}

/// Value and gradients of a two-argument loss. `grad_b` is all zeros when the
/// second argument is a stop-gradient target.
#[derive(Clone, Debug)]
pub struct PairLoss {
    pub value: f64,
    pub grad_a: Mat,
    pub grad_b: Mat,
    /// Dimensions whose variance hit the numeric guard (Barlow Twins only).
    pub guarded_dims: usize,
}

fn same_shape(a: &Mat, b: &Mat, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Usage(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Unit-normalized rows and the original norms.
fn normalize_rows(z: &Mat, what: &str) -> Result<(Mat, Vec<f64>)> {
    let mut u = z.clone();
    let mut norms = Vec::with_capacity(z.rows());
    for i in 0..z.rows() {
        let n = norm(z.row(i));
        if !(n > NORM_GUARD) {
            return Err(Error::Numeric(format!("{what}: row {i} has zero norm")));
        }
        u.row_mut(i).iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    Ok((u, norms))
}

/// Maps a gradient w.r.t. unit rows `u` back to the raw rows `z = n * u`.
fn unnormalize_grad(u: &Mat, norms: &[f64], gu: &Mat) -> Mat {
    let mut gz = gu.clone();
    for i in 0..u.rows() {
        let ui = u.row(i);
        let proj = dot(ui, gu.row(i));
        for (g, &uv) in gz.row_mut(i).iter_mut().zip(ui) {
            *g = (*g - proj * uv) / norms[i];
        }
    }
    gz
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// NT-Xent over the `2B` stacked views: each row's positive is its partner in
/// the other view, every other row is a negative. Averaged over all `2B`
/// anchors.
pub fn nt_xent(z_a: &Mat, z_b: &Mat, tau: f64) -> Result<PairLoss> {
    same_shape(z_a, z_b, "nt_xent")?;
    if z_a.rows() == 0 {
        return Err(Error::Usage("nt_xent needs at least one pair".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be > 0, got {tau}")));
    }
    let b = z_a.rows();
    let n = 2 * b;
    let z = Mat::vstack(z_a, z_b)?;
    let (u, norms) = normalize_rows(&z, "nt_xent")?;

    let mut sim = Mat::zeros(n, n);
    for i in 0..n {
        for k in i..n {
            let s = dot(u.row(i), u.row(k)) / tau;
            sim.set(i, k, s);
            sim.set(k, i, s);
        }
    }
    // g[i][k] = dL / dS_ik
    let mut g = Mat::zeros(n, n);
    let mut total = 0.0;
    let inv = 1.0 / n as f64;
    for i in 0..n {
        let pos = (i + b) % n;
        let row = sim.row(i);
        let others = (0..n).filter(|&k| k != i).map(|k| row[k]);
        let lse = log_sum_exp(others);
        total += lse - row[pos];
        for k in (0..n).filter(|&k| k != i) {
            let p = (row[k] - lse).exp();
            let target = if k == pos { 1.0 } else { 0.0 };
            g.set(i, k, inv * (p - target));
        }
    }
    let mut gu = Mat::zeros(n, u.cols());
    for i in 0..n {
        for k in 0..n {
            let w = (g.get(i, k) + g.get(k, i)) / tau;
            if w != 0.0 {
                for (d, &uv) in gu.row_mut(i).iter_mut().zip(u.row(k)) {
                    *d += w * uv;
                }
            }
        }
    }
    let gz = unnormalize_grad(&u, &norms, &gu);
    let (grad_a, grad_b) = gz.split_rows(b);
    Ok(PairLoss {
        value: (total * inv).max(0.0),
        grad_a,
        grad_b,
        guarded_dims: 0,
    })
}

/// FIFO of unit-norm key vectors.
#[derive(Clone, Debug)]
pub struct NegativeQueue {
    capacity: usize,
    dim: usize,
    entries: VecDeque<Vec<f64>>,
}

impl NegativeQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::Config("queue capacity and dimension must be >= 1".into()));
        }
        Ok(NegativeQueue {
            capacity,
            dim,
            entries: VecDeque::with_capacity(capacity),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> impl Iterator<Item = &[f64]> {
        self.entries.iter().map(Vec::as_slice)
    }

    /// Normalizes and appends `key`, evicting the oldest entry when full.
    pub fn push(&mut self, key: &[f64]) -> Result<()> {
        if key.len() != self.dim {
            return Err(Error::Usage(format!("queue holds dim {}, got {}", self.dim, key.len())));
        }
        let n = norm(key);
        if !(n > NORM_GUARD) {
            return Err(Error::Numeric("cannot enqueue a zero-norm key".into()));
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(key.iter().map(|v| v / n).collect());
        Ok(())
    }

    pub fn push_rows(&mut self, keys: &Mat) -> Result<()> {
        (0..keys.rows()).try_for_each(|i| self.push(keys.row(i)))
    }
}

/// InfoNCE with one positive key per query and the queue as negatives.
/// Only `q` receives gradient.
pub fn moco_loss(q: &Mat, k_pos: &Mat, queue: &NegativeQueue, tau: f64) -> Result<PairLoss> {
    same_shape(q, k_pos, "moco_loss")?;
    if queue.is_empty() {
        return Err(Error::Usage("moco_loss needs a non-empty negative queue".into()));
    }
    if queue.dim() != q.cols() {
        return Err(Error::Usage(format!(
            "queue dim {} does not match embedding dim {}",
            queue.dim(),
            q.cols()
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be > 0, got {tau}")));
    }
    let b = q.rows();
    if b == 0 {
        return Err(Error::Usage("moco_loss needs at least one query".into()));
    }
    let (uq, qnorms) = normalize_rows(q, "moco_loss query")?;
    let (uk, _) = normalize_rows(k_pos, "moco_loss key")?;
    let negatives: Vec<&[f64]> = queue.entries().collect();
    let mut gu = Mat::zeros(b, q.cols());
    let mut total = 0.0;
    let inv = 1.0 / b as f64;
    for i in 0..b {
        let qi = uq.row(i);
        let mut logits = Vec::with_capacity(1 + negatives.len());
        logits.push(dot(qi, uk.row(i)) / tau);
        logits.extend(negatives.iter().map(|n| dot(qi, n) / tau));
        let lse = log_sum_exp(logits.iter().copied());
        total += lse - logits[0];
        let grow = gu.row_mut(i);
        let p0 = (logits[0] - lse).exp();
        for (g, &kv) in grow.iter_mut().zip(uk.row(i)) {
            *g += inv * (p0 - 1.0) * kv / tau;
        }
        for (n, &l) in negatives.iter().zip(&logits[1..]) {
            let p = (l - lse).exp();
            for (g, &nv) in grow.iter_mut().zip(n.iter()) {
                *g += inv * p * nv / tau;
            }
        }
    }
    Ok(PairLoss {
        value: (total * inv).max(0.0),
        grad_a: unnormalize_grad(&uq, &qnorms, &gu),
        grad_b: Mat::zeros(b, q.cols()),
        guarded_dims: 0,
    })
}

/// Per-column standardization `(x - mean) / sqrt(var + eps)` with population variance.
struct Standardized {
    values: Mat,
    inv_std: Vec<f64>,
    guarded: usize,
}

fn standardize(z: &Mat) -> Standardized {
    let (b, p) = z.shape();
    let mut values = z.clone();
    let mut inv_std = vec![0.0; p];
    let mut guarded = 0;
    for j in 0..p {
        let mean = (0..b).map(|i| z.get(i, j)).sum::<f64>() / b as f64;
        let var = (0..b).map(|i| (z.get(i, j) - mean).powi(2)).sum::<f64>() / b as f64;
        if var < BARLOW_EPS {
            guarded += 1;
        }
        let s = 1.0 / (var + BARLOW_EPS).sqrt();
        inv_std[j] = s;
        for i in 0..b {
            values.set(i, j, (z.get(i, j) - mean) * s);
        }
    }
    Standardized {
        values,
        inv_std,
        guarded,
    }
}

fn standardize_backward(st: &Standardized, g: &Mat) -> Mat {
    let (b, p) = g.shape();
    let mut out = Mat::zeros(b, p);
    for j in 0..p {
        let mean_g = (0..b).map(|i| g.get(i, j)).sum::<f64>() / b as f64;
        let mean_ga = (0..b).map(|i| g.get(i, j) * st.values.get(i, j)).sum::<f64>() / b as f64;
        for i in 0..b {
            let v = st.inv_std[j] * (g.get(i, j) - mean_g - st.values.get(i, j) * mean_ga);
            out.set(i, j, v);
        }
    }
    out
}

/// `sum_i (1 - C_ii)^2 + lambda * sum_{i != j} C_ij^2` where `C` is the
/// cross-correlation of the batch-standardized views.
pub fn barlow_twins(z_a: &Mat, z_b: &Mat, lambda: f64) -> Result<PairLoss> {
    same_shape(z_a, z_b, "barlow_twins")?;
    let (b, p) = z_a.shape();
    if b < 2 {
        return Err(Error::Usage("barlow_twins needs a batch of at least 2".into()));
    }
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("barlow lambda must be >= 0, got {lambda}")));
    }
    let sa = standardize(z_a);
    let sb = standardize(z_b);
    let mut c = Mat::zeros(p, p);
    for i in 0..p {
        for j in 0..p {
            let v = (0..b).map(|r| sa.values.get(r, i) * sb.values.get(r, j)).sum::<f64>() / b as f64;
            c.set(i, j, v);
        }
    }
    let mut value = 0.0;
    let mut gc = Mat::zeros(p, p);
    for i in 0..p {
        for j in 0..p {
            let cij = c.get(i, j);
            if i == j {
                value += (1.0 - cij).powi(2);
                gc.set(i, j, -2.0 * (1.0 - cij));
            } else {
                value += lambda * cij * cij;
                gc.set(i, j, 2.0 * lambda * cij);
            }
        }
    }
    // dA = B Gc^T / b, dB = A Gc / b
    let mut ga = Mat::zeros(b, p);
    let mut gb = Mat::zeros(b, p);
    for r in 0..b {
        for i in 0..p {
            let mut acc_a = 0.0;
            let mut acc_b = 0.0;
            for j in 0..p {
                acc_a += gc.get(i, j) * sb.values.get(r, j);
                acc_b += sa.values.get(r, j) * gc.get(j, i);
            }
            ga.set(r, i, acc_a / b as f64);
            gb.set(r, i, acc_b / b as f64);
        }
    }
    Ok(PairLoss {
        value,
        grad_a: standardize_backward(&sa, &ga),
        grad_b: standardize_backward(&sb, &gb),
        guarded_dims: sa.guarded + sb.guarded,
    })
}

/// Mean negative log-softmax of the true class.
pub fn cross_entropy(logits: &Mat, labels: &[usize]) -> Result<Loss> {
    let (b, k) = logits.shape();
    if labels.len() != b {
        return Err(Error::Usage(format!("{} labels for {b} rows", labels.len())));
    }
    if b == 0 {
        return Err(Error::Usage("cross_entropy on an empty batch".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Usage(format!("label {bad} out of range for {k} outputs")));
    }
    let mut grad = Mat::zeros(b, k);
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let lse = log_sum_exp(row.iter().copied());
        total += lse - row[y];
        for (j, g) in grad.row_mut(i).iter_mut().enumerate() {
            let p = (row[j] - lse).exp();
            *g = (p - if j == y { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    Ok(Loss {
        value: total / b as f64,
        grad,
    })
}

/// Mean squared difference over all entries; the teacher is a fixed target.
pub fn distill_mse(student: &Mat, teacher: &Mat) -> Result<PairLoss> {
    same_shape(student, teacher, "distill_mse")?;
    let count = (student.rows() * student.cols()).max(1) as f64;
    let mut grad = Mat::zeros(student.rows(), student.cols());
    let mut value = 0.0;
    for ((g, &s), &t) in grad
        .as_mut_slice()
        .iter_mut()
        .zip(student.as_slice())
        .zip(teacher.as_slice())
    {
        let d = s - t;
        value += d * d;
        *g = 2.0 * d / count;
    }
    Ok(PairLoss {
        value: value / count,
        grad_a: grad,
        grad_b: Mat::zeros(teacher.rows(), teacher.cols()),
        guarded_dims: 0,
    })
}

/// NT-Xent where sample `i`'s positive pair is (student_i, teacher_i); the
/// teacher rows take part as anchors and negatives but receive no gradient.
pub fn distill_sim(student: &Mat, teacher: &Mat, tau: f64) -> Result<PairLoss> {
    let mut out = nt_xent(student, teacher, tau)?;
    out.grad_b = Mat::zeros(teacher.rows(), teacher.cols());
    Ok(out)
}

fn softmax_rows(logits: &Mat, tau: f64) -> Mat {
    let mut p = logits.clone();
    for i in 0..p.rows() {
        let row = p.row_mut(i);
        row.iter_mut().for_each(|v| *v /= tau);
        let lse = log_sum_exp(row.iter().copied());
        row.iter_mut().for_each(|v| *v = (*v - lse).exp());
    }
    p
}

/// `tau^2 * mean_b KL(softmax(teacher / tau) || softmax(student / tau))`.
pub fn distill_kld(student_logits: &Mat, teacher_logits: &Mat, tau: f64) -> Result<PairLoss> {
    same_shape(student_logits, teacher_logits, "distill_kld")?;
    if !(tau > 0.0) {
        return Err(Error::Config(format!(
            "distillation temperature must be > 0, got {tau}"
        )));
    }
    let (b, k) = student_logits.shape();
    if b == 0 {
        return Err(Error::Usage("distill_kld on an empty batch".into()));
    }
    let ps = softmax_rows(student_logits, tau);
    let pt = softmax_rows(teacher_logits, tau);
    let mut value = 0.0;
    let mut grad = Mat::zeros(b, k);
    for i in 0..b {
        for j in 0..k {
            let (t, s) = (pt.get(i, j), ps.get(i, j));
            if t > 0.0 {
                value += t * (t.ln() - s.max(f64::MIN_POSITIVE).ln());
            }
            grad.set(i, j, tau * (s - t) / b as f64);
        }
    }
    Ok(PairLoss {
        value: (tau * tau * value / b as f64).max(0.0),
        grad_a: grad,
        grad_b: Mat::zeros(b, k),
        guarded_dims: 0,
    })
}
