//! Encoder, heads, parameter snapshots and the optimizer step.
//!
//! The encoder is a stack of temporal convolution blocks
//! (`conv1d -> batch norm -> relu -> max pool`) over a `(bins, frames)`
//! spectrogram, with frequency bins as input channels, finished by global
//! average pooling over time. Parameters live in one flat `f32` vector so
//! snapshots, EMA updates and optimizer steps are plain slice operations.
//! Batch-norm running statistics live in a second flat vector ("buffers").
//!
//! Backward passes are hand written. Per-sample work is spread over the rayon
//! pool, but every reduction across samples happens in a fixed order so
//! results do not depend on the thread count.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataspec::Spectrogram;
use crate::{Error, Result};

const BN_EPS: f32 = 1e-5;
const BN_MOMENTUM: f32 = 0.1;
/// Samples per chunk when reducing weight gradients.
const GRAD_CHUNK: usize = 8;

/// Activations of shape `(n, channels, len)`, sample-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub n: usize,
    pub channels: usize,
    pub len: usize,
    pub data: Vec<f32>,
}

impl Batch {
    pub fn zeros(n: usize, channels: usize, len: usize) -> Self {
        Batch {
            n,
            channels,
            len,
            data: vec![0.0; n * channels * len],
        }
    }

    /// Stacks spectrograms; frequency bins become channels.
    pub fn from_spectrograms<'a, I>(specs: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a Spectrogram>,
    {
        let mut iter = specs.into_iter().peekable();
        let first = iter
            .peek()
            .ok_or_else(|| Error::Usage("cannot build an empty batch".into()))?;
        let (channels, len) = (first.bins(), first.frames());
        let mut data = Vec::new();
        let mut n = 0;
        for s in iter {
            if (s.bins(), s.frames()) != (channels, len) {
                return Err(Error::Usage(format!(
                    "batch mixes shapes {channels}x{len} and {}x{}",
                    s.bins(),
                    s.frames()
                )));
            }
            data.extend_from_slice(s.as_slice());
            n += 1;
        }
        Ok(Batch { n, channels, len, data })
    }
}

/// Row-major `(rows, dim)` matrix of network outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl Embeddings {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn select(&self, rows: &[usize]) -> Embeddings {
        let mut data = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Embeddings {
            rows: rows.len(),
            dim: self.dim,
            data,
        }
    }
}

// ---------------------------------------------------------------------------
// Architecture

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderArch {
    /// Frequency bins of the input (= input channels).
    pub in_bins: usize,
    /// Output channels of each conv block; the last one is the representation size.
    pub channels: Vec<usize>,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
}

fn default_kernel() -> usize {
    3
}

impl EncoderArch {
    pub fn new(in_bins: usize, channels: Vec<usize>) -> Self {
        EncoderArch {
            in_bins,
            channels,
            kernel: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_bins == 0 || self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config(format!("invalid encoder architecture {self:?}")));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::Config(format!("kernel size must be odd, got {}", self.kernel)));
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        *self.channels.last().unwrap_or(&0)
    }

    /// Shortest input that survives every pooling stage.
    pub fn min_frames(&self) -> usize {
        1 << (self.channels.len() - 1)
    }

    pub fn descriptor(&self) -> String {
        let ch: Vec<String> = self.channels.iter().map(usize::to_string).collect();
        format!(
            "conv1d(in={};ch={};k={})-bn-relu-maxpool2-gap",
            self.in_bins,
            ch.join(","),
            self.kernel
        )
    }

    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.descriptor().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }
}

#[derive(Clone, Debug)]
enum Layer {
    Conv {
        cin: usize,
        cout: usize,
        w: usize,
        b: usize,
    },
    Norm {
        ch: usize,
        gamma: usize,
        beta: usize,
        mean: usize,
        var: usize,
    },
    Relu,
    MaxPool,
    GlobalAvg,
}

fn build_layers(arch: &EncoderArch) -> (Vec<Layer>, usize, usize) {
    let mut layers = Vec::new();
    let mut p = 0;
    let mut buf = 0;
    let mut cin = arch.in_bins;
    let last = arch.channels.len() - 1;
    for (i, &cout) in arch.channels.iter().enumerate() {
        let w = p;
        p += cout * cin * arch.kernel;
        let b = p;
        p += cout;
        layers.push(Layer::Conv { cin, cout, w, b });
        layers.push(Layer::Norm {
            ch: cout,
            gamma: p,
            beta: p + cout,
            mean: buf,
            var: buf + cout,
        });
        p += 2 * cout;
        buf += 2 * cout;
        layers.push(Layer::Relu);
        if i < last {
            layers.push(Layer::MaxPool);
        }
        cin = cout;
    }
    layers.push(Layer::GlobalAvg);
    (layers, p, buf)
}

// ---------------------------------------------------------------------------
// Encoder

#[derive(Clone, Debug)]
pub struct Encoder {
    arch: EncoderArch,
    layers: Vec<Layer>,
    params: Vec<f32>,
    buffers: Vec<f32>,
}

/// Saved activations for one training-mode forward pass.
pub struct EncoderTape {
    steps: Vec<Step>,
    n: usize,
}

enum Step {
    Conv {
        input: Batch,
    },
    Norm {
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        len: usize,
    },
    Relu {
        output: Vec<f32>,
    },
    MaxPool {
        argmax: Vec<u32>,
        in_len: usize,
    },
    GlobalAvg {
        len: usize,
    },
}

impl Encoder {
    /// He-initialized conv weights, unit batch-norm scale.
    pub fn new(arch: &EncoderArch, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        let (layers, n_params, n_buffers) = build_layers(arch);
        let mut params = vec![0.0f32; n_params];
        let mut buffers = vec![0.0f32; n_buffers];
        for layer in &layers {
            match *layer {
                Layer::Conv { cin, cout, w, .. } => {
                    let std = (2.0 / (cin * arch.kernel) as f64).sqrt();
                    let normal = Normal::new(0.0, std).expect("positive std");
                    for v in &mut params[w..w + cout * cin * arch.kernel] {
                        *v = normal.sample(rng) as f32;
                    }
                }
                Layer::Norm { ch, gamma, var, .. } => {
                    params[gamma..gamma + ch].fill(1.0);
                    buffers[var..var + ch].fill(1.0);
                }
                _ => {}
            }
        }
        Ok(Encoder {
            arch: arch.clone(),
            layers,
            params,
            buffers,
        })
    }

    pub fn arch(&self) -> &EncoderArch {
        &self.arch
    }

    pub fn output_dim(&self) -> usize {
        self.arch.output_dim()
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[f32] {
        &self.buffers
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Digest of parameters and buffers, for freeze checks.
    pub fn checksum(&self) -> u64 {
        checksum(&[&self.params, &self.buffers])
    }

    fn check_input(&self, batch: &Batch) -> Result<()> {
        if batch.channels != self.arch.in_bins {
            return Err(Error::Usage(format!(
                "encoder expects {} frequency bins, batch has {}",
                self.arch.in_bins, batch.channels
            )));
        }
        if batch.len < self.arch.min_frames() {
            return Err(Error::Usage(format!(
                "encoder needs at least {} frames, batch has {}",
                self.arch.min_frames(),
                batch.len
            )));
        }
        if batch.n == 0 {
            return Err(Error::Usage("empty batch".into()));
        }
        Ok(())
    }

    /// Inference-mode forward pass (batch norm uses running statistics).
    pub fn forward(&self, batch: &Batch) -> Result<Embeddings> {
        self.check_input(batch)?;
        let k = self.arch.kernel;
        let mut x = batch.clone();
        for layer in &self.layers {
            x = match *layer {
                Layer::Conv { cout, w, b, .. } => {
                    conv_forward(&x, &self.params[w..b], &self.params[b..b + cout], cout, k)
                }
                Layer::Norm {
                    ch,
                    gamma,
                    beta,
                    mean,
                    var,
                } => {
                    let scale: Vec<f32> = (0..ch)
                        .map(|c| self.params[gamma + c] / (self.buffers[var + c] + BN_EPS).sqrt())
                        .collect();
                    let shift: Vec<f32> = (0..ch)
                        .map(|c| self.params[beta + c] - self.buffers[mean + c] * scale[c])
                        .collect();
                    let len = x.len;
                    for (i, v) in x.data.iter_mut().enumerate() {
                        let c = (i / len) % ch;
                        *v = *v * scale[c] + shift[c];
                    }
                    x
                }
                Layer::Relu => {
                    x.data.iter_mut().for_each(|v| *v = v.max(0.0));
                    x
                }
                Layer::MaxPool => maxpool_forward(&x).0,
                Layer::GlobalAvg => global_avg(&x),
            };
        }
        Ok(Embeddings {
            rows: batch.n,
            dim: self.output_dim(),
            data: x.data,
        })
    }

    /// Training-mode forward pass: batch statistics are used for
    /// normalization and running statistics are updated.
    pub fn forward_train(&mut self, batch: &Batch) -> Result<(Embeddings, EncoderTape)> {
        self.check_input(batch)?;
        let k = self.arch.kernel;
        let mut steps = Vec::with_capacity(self.layers.len());
        let mut x = batch.clone();
        for layer in &self.layers {
            x = match *layer {
                Layer::Conv { cout, w, b, .. } => {
                    let y = conv_forward(&x, &self.params[w..b], &self.params[b..b + cout], cout, k);
                    steps.push(Step::Conv { input: x });
                    y
                }
                Layer::Norm {
                    ch,
                    gamma,
                    beta,
                    mean,
                    var,
                } => {
                    let (y, xhat, inv_std, batch_mean, batch_var) =
                        norm_forward_train(&x, &self.params[gamma..gamma + ch], &self.params[beta..beta + ch]);
                    let count = (x.n * x.len) as f32;
                    let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                    for c in 0..ch {
                        let rm = &mut self.buffers[mean + c];
                        *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * batch_mean[c];
                        let rv = &mut self.buffers[var + c];
                        *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * batch_var[c] * unbias;
                    }
                    steps.push(Step::Norm {
                        xhat,
                        inv_std,
                        len: x.len,
                    });
                    y
                }
                Layer::Relu => {
                    x.data.iter_mut().for_each(|v| *v = v.max(0.0));
                    steps.push(Step::Relu { output: x.data.clone() });
                    x
                }
                Layer::MaxPool => {
                    let in_len = x.len;
                    let (y, argmax) = maxpool_forward(&x);
                    steps.push(Step::MaxPool { argmax, in_len });
                    y
                }
                Layer::GlobalAvg => {
                    steps.push(Step::GlobalAvg { len: x.len });
                    global_avg(&x)
                }
            };
        }
        Ok((
            Embeddings {
                rows: batch.n,
                dim: self.output_dim(),
                data: x.data,
            },
            EncoderTape { steps, n: batch.n },
        ))
    }

    /// Accumulates `d loss / d params` into `grads` given the gradient of the
    /// loss with respect to the taped forward pass's output.
    pub fn backward(&self, tape: &EncoderTape, grad_out: &[f32], grads: &mut [f32]) -> Result<()> {
        let d = self.output_dim();
        if grad_out.len() != tape.n * d || grads.len() != self.params.len() {
            return Err(Error::Usage("gradient shape does not match encoder".into()));
        }
        let k = self.arch.kernel;
        let mut g = Batch {
            n: tape.n,
            channels: d,
            len: 1,
            data: grad_out.to_vec(),
        };
        for (layer, step) in self.layers.iter().zip(&tape.steps).rev() {
            g = match (layer, step) {
                (Layer::GlobalAvg, Step::GlobalAvg { len }) => {
                    let scale = 1.0 / *len as f32;
                    let mut out = Batch::zeros(g.n, g.channels, *len);
                    for (dst, &src) in out.data.chunks_mut(*len).zip(&g.data) {
                        dst.fill(src * scale);
                    }
                    out
                }
                (Layer::MaxPool, Step::MaxPool { argmax, in_len }) => {
                    let mut out = Batch::zeros(g.n, g.channels, *in_len);
                    for (row, (gsrc, idx)) in g.data.chunks(g.len).zip(argmax.chunks(g.len)).enumerate() {
                        let base = row * in_len;
                        for (&gv, &j) in gsrc.iter().zip(idx) {
                            out.data[base + j as usize] += gv;
                        }
                    }
                    out
                }
                (Layer::Relu, Step::Relu { output }) => {
                    for (gv, &o) in g.data.iter_mut().zip(output) {
                        if o <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    g
                }
                (Layer::Norm { ch, gamma, beta, .. }, Step::Norm { xhat, inv_std, len }) => {
                    let (gx, dgamma, dbeta) =
                        norm_backward(&g, xhat, inv_std, &self.params[*gamma..*gamma + *ch], *len);
                    for c in 0..*ch {
                        grads[*gamma + c] += dgamma[c];
                        grads[*beta + c] += dbeta[c];
                    }
                    gx
                }
                (Layer::Conv { cin, cout, w, b }, Step::Conv { input }) => {
                    // The first conv sits at offset 0; its input gradient is never used.
                    let need_input = *w != 0;
                    let (gx, gw, gb) = conv_backward(input, &g, &self.params[*w..*b], *cin, *cout, k, need_input);
                    for (a, v) in grads[*w..*b].iter_mut().zip(&gw) {
                        *a += v;
                    }
                    for (a, v) in grads[*b..*b + *cout].iter_mut().zip(&gb) {
                        *a += v;
                    }
                    gx
                }
                _ => unreachable!("tape does not match layer list"),
            };
        }
        Ok(())
    }

    pub fn snapshot(&self, task_tag: u64) -> EncoderState {
        let mut values = self.params.clone();
        values.extend_from_slice(&self.buffers);
        EncoderState {
            task_tag,
            arch_hash: self.arch.hash(),
            values,
        }
    }

    pub fn restore(arch: &EncoderArch, state: &EncoderState) -> Result<Self> {
        arch.validate()?;
        if state.arch_hash != arch.hash() {
            return Err(Error::Integrity(format!(
                "snapshot for task {} has architecture hash {:016x}, expected {:016x}",
                state.task_tag,
                state.arch_hash,
                arch.hash()
            )));
        }
        let (layers, n_params, n_buffers) = build_layers(arch);
        if state.values.len() != n_params + n_buffers {
            return Err(Error::Integrity(format!(
                "snapshot holds {} values, architecture needs {}",
                state.values.len(),
                n_params + n_buffers
            )));
        }
        Ok(Encoder {
            arch: arch.clone(),
            layers,
            params: state.values[..n_params].to_vec(),
            buffers: state.values[n_params..].to_vec(),
        })
    }
}

fn conv_forward(x: &Batch, w: &[f32], b: &[f32], cout: usize, k: usize) -> Batch {
    let (cin, len) = (x.channels, x.len);
    let pad = (k / 2) as isize;
    let mut out = Batch::zeros(x.n, cout, len);
    out.data
        .par_chunks_mut(cout * len)
        .zip(x.data.par_chunks(cin * len))
        .for_each(|(y, xs)| {
            for co in 0..cout {
                let yrow = &mut y[co * len..(co + 1) * len];
                yrow.fill(b[co]);
                for ci in 0..cin {
                    let xrow = &xs[ci * len..(ci + 1) * len];
                    let wk = &w[(co * cin + ci) * k..(co * cin + ci + 1) * k];
                    for (kk, &wv) in wk.iter().enumerate() {
                        let shift = kk as isize - pad;
                        let t0 = (-shift).max(0) as usize;
                        let t1 = (len as isize - shift).min(len as isize).max(0) as usize;
                        if t0 >= t1 {
                            continue;
                        }
                        let src = &xrow[(t0 as isize + shift) as usize..(t1 as isize + shift) as usize];
                        for (yv, &xv) in yrow[t0..t1].iter_mut().zip(src) {
                            *yv += wv * xv;
                        }
                    }
                }
            }
        });
    out
}

fn conv_backward(
    x: &Batch,
    g: &Batch,
    w: &[f32],
    cin: usize,
    cout: usize,
    k: usize,
    need_input: bool,
) -> (Batch, Vec<f32>, Vec<f32>) {
    let len = x.len;
    let pad = (k / 2) as isize;
    let wlen = cout * cin * k;
    let mut gx = Batch::zeros(if need_input { x.n } else { 0 }, cin, len);

    if need_input {
        gx.data
            .par_chunks_mut(cin * len)
            .zip(g.data.par_chunks(cout * len))
            .for_each(|(gxs, gs)| {
                for co in 0..cout {
                    let grow = &gs[co * len..(co + 1) * len];
                    for ci in 0..cin {
                        let dst = &mut gxs[ci * len..(ci + 1) * len];
                        let wk = &w[(co * cin + ci) * k..(co * cin + ci + 1) * k];
                        for (kk, &wv) in wk.iter().enumerate() {
                            let shift = kk as isize - pad;
                            let t0 = (-shift).max(0) as usize;
                            let t1 = (len as isize - shift).min(len as isize).max(0) as usize;
                            if t0 >= t1 {
                                continue;
                            }
                            let d = &mut dst[(t0 as isize + shift) as usize..(t1 as isize + shift) as usize];
                            for (dv, &gv) in d.iter_mut().zip(&grow[t0..t1]) {
                                *dv += wv * gv;
                            }
                        }
                    }
                }
            });
    }

    let partials: Vec<(Vec<f32>, Vec<f32>)> = x
        .data
        .par_chunks(cin * len * GRAD_CHUNK)
        .zip(g.data.par_chunks(cout * len * GRAD_CHUNK))
        .map(|(xc, gc)| {
            let mut gw = vec![0.0f32; wlen];
            let mut gb = vec![0.0f32; cout];
            for (xs, gs) in xc.chunks(cin * len).zip(gc.chunks(cout * len)) {
                for co in 0..cout {
                    let grow = &gs[co * len..(co + 1) * len];
                    gb[co] += grow.iter().sum::<f32>();
                    for ci in 0..cin {
                        let xrow = &xs[ci * len..(ci + 1) * len];
                        let base = (co * cin + ci) * k;
                        for kk in 0..k {
                            let shift = kk as isize - pad;
                            let t0 = (-shift).max(0) as usize;
                            let t1 = (len as isize - shift).min(len as isize).max(0) as usize;
                            if t0 >= t1 {
                                continue;
                            }
                            let src = &xrow[(t0 as isize + shift) as usize..(t1 as isize + shift) as usize];
                            let mut acc = 0.0f32;
                            for (&gv, &xv) in grow[t0..t1].iter().zip(src) {
                                acc += gv * xv;
                            }
                            gw[base + kk] += acc;
                        }
                    }
                }
            }
            (gw, gb)
        })
        .collect();

    let mut gw = vec![0.0f32; wlen];
    let mut gb = vec![0.0f32; cout];
    for (pw, pb) in &partials {
        gw.iter_mut().zip(pw).for_each(|(a, v)| *a += v);
        gb.iter_mut().zip(pb).for_each(|(a, v)| *a += v);
    }
    (gx, gw, gb)
}

type NormForward = (Batch, Vec<f32>, Vec<f32>, Vec<f32>, Vec<f32>);

fn norm_forward_train(x: &Batch, gamma: &[f32], beta: &[f32]) -> NormForward {
    let (ch, len) = (x.channels, x.len);
    let count = (x.n * len) as f64;
    let mut mean = vec![0.0f64; ch];
    let mut sq = vec![0.0f64; ch];
    for s in x.data.chunks(ch * len) {
        for c in 0..ch {
            for &v in &s[c * len..(c + 1) * len] {
                mean[c] += f64::from(v);
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for s in x.data.chunks(ch * len) {
        for c in 0..ch {
            for &v in &s[c * len..(c + 1) * len] {
                let d = f64::from(v) - mean[c];
                sq[c] += d * d;
            }
        }
    }
    let var: Vec<f64> = sq.iter().map(|s| s / count).collect();
    let inv_std: Vec<f32> = var
        .iter()
        .map(|v| (1.0 / (v + f64::from(BN_EPS)).sqrt()) as f32)
        .collect();
    let mut xhat = vec![0.0f32; x.data.len()];
    let mut y = Batch::zeros(x.n, ch, len);
    for (i, (&v, (h, o))) in x.data.iter().zip(xhat.iter_mut().zip(y.data.iter_mut())).enumerate() {
        let c = (i / len) % ch;
        *h = ((f64::from(v) - mean[c]) as f32) * inv_std[c];
        *o = gamma[c] * *h + beta[c];
    }
    (
        y,
        xhat,
        inv_std,
        mean.iter().map(|&m| m as f32).collect(),
        var.iter().map(|&v| v as f32).collect(),
    )
}

fn norm_backward(g: &Batch, xhat: &[f32], inv_std: &[f32], gamma: &[f32], len: usize) -> (Batch, Vec<f32>, Vec<f32>) {
    let ch = g.channels;
    let count = (g.n * len) as f64;
    let mut dbeta = vec![0.0f64; ch];
    let mut dgamma = vec![0.0f64; ch];
    for (i, (&gv, &h)) in g.data.iter().zip(xhat).enumerate() {
        let c = (i / len) % ch;
        dbeta[c] += f64::from(gv);
        dgamma[c] += f64::from(gv) * f64::from(h);
    }
    let mut gx = Batch::zeros(g.n, ch, len);
    for (i, ((o, &gv), &h)) in gx.data.iter_mut().zip(&g.data).zip(xhat).enumerate() {
        let c = (i / len) % ch;
        let gy = f64::from(gv);
        let v = gy - dbeta[c] / count - f64::from(h) * dgamma[c] / count;
        *o = (f64::from(gamma[c]) * f64::from(inv_std[c]) * v) as f32;
    }
    (
        gx,
        dgamma.iter().map(|&v| v as f32).collect(),
        dbeta.iter().map(|&v| v as f32).collect(),
    )
}

fn maxpool_forward(x: &Batch) -> (Batch, Vec<u32>) {
    let out_len = x.len / 2;
    let mut y = Batch::zeros(x.n, x.channels, out_len);
    let mut argmax = vec![0u32; y.data.len()];
    for (src, (dst, idx)) in x
        .data
        .chunks(x.len)
        .zip(y.data.chunks_mut(out_len).zip(argmax.chunks_mut(out_len)))
    {
        for t in 0..out_len {
            let (a, b) = (src[2 * t], src[2 * t + 1]);
            if b > a {
                dst[t] = b;
                idx[t] = (2 * t + 1) as u32;
            } else {
                dst[t] = a;
                idx[t] = (2 * t) as u32;
            }
        }
    }
    (y, argmax)
}

fn global_avg(x: &Batch) -> Batch {
    let scale = 1.0 / x.len as f32;
    Batch {
        n: x.n,
        channels: x.channels,
        len: 1,
        data: x.data.chunks(x.len).map(|r| r.iter().sum::<f32>() * scale).collect(),
    }
}

fn checksum(parts: &[&[f32]]) -> u64 {
    let mut h = Sha256::new();
    for part in parts {
        for v in *part {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

// ---------------------------------------------------------------------------
// Dense layers and heads

/// One affine layer `y = W x + b`, `W` stored `(dout, din)` row-major,
/// followed by `b` in the same parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub din: usize,
    pub dout: usize,
    pub params: Vec<f32>,
}

impl Dense {
    pub fn new(din: usize, dout: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (din as f32).sqrt();
        let params = (0..dout * din + dout)
            .map(|i| {
                if i < dout * din {
                    rng.random_range(-bound..bound)
                } else {
                    0.0
                }
            })
            .collect();
        Dense { din, dout, params }
    }

    fn weights(&self) -> &[f32] {
        &self.params[..self.dout * self.din]
    }

    pub fn forward(&self, x: &Embeddings) -> Result<Embeddings> {
        if x.dim != self.din {
            return Err(Error::Usage(format!(
                "dense layer expects dim {}, got {}",
                self.din, x.dim
            )));
        }
        let w = self.weights();
        let b = &self.params[self.dout * self.din..];
        let mut data = Vec::with_capacity(x.rows * self.dout);
        for r in 0..x.rows {
            let xr = x.row(r);
            for o in 0..self.dout {
                let wr = &w[o * self.din..(o + 1) * self.din];
                data.push(b[o] + wr.iter().zip(xr).map(|(a, c)| a * c).sum::<f32>());
            }
        }
        Ok(Embeddings {
            rows: x.rows,
            dim: self.dout,
            data,
        })
    }

    /// Accumulates parameter gradients into `grads`; returns the input gradient.
    pub fn backward(&self, x: &Embeddings, g: &[f32], grads: &mut [f32]) -> Vec<f32> {
        let (din, dout) = (self.din, self.dout);
        let w = self.weights();
        let mut gx = vec![0.0f32; x.rows * din];
        let (gw, gb) = grads.split_at_mut(dout * din);
        for r in 0..x.rows {
            let xr = x.row(r);
            let gr = &g[r * dout..(r + 1) * dout];
            let gxr = &mut gx[r * din..(r + 1) * din];
            for o in 0..dout {
                let go = gr[o];
                if go == 0.0 {
                    continue;
                }
                gb[o] += go;
                let wr = &w[o * din..(o + 1) * din];
                let gwr = &mut gw[o * din..(o + 1) * din];
                for i in 0..din {
                    gwr[i] += go * xr[i];
                    gxr[i] += go * wr[i];
                }
            }
        }
        gx
    }
}

/// Two-layer MLP `d -> hidden -> p` used only while training SSL objectives.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHead {
    pub first: Dense,
    pub second: Dense,
}

pub struct ProjectionTape {
    input: Embeddings,
    hidden: Embeddings,
}

impl ProjectionHead {
    pub fn new(d: usize, hidden: usize, p: usize, rng: &mut impl Rng) -> Self {
        ProjectionHead {
            first: Dense::new(d, hidden, rng),
            second: Dense::new(hidden, p, rng),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.second.dout
    }

    pub fn forward(&self, x: &Embeddings) -> Result<(Embeddings, ProjectionTape)> {
        let mut hidden = self.first.forward(x)?;
        hidden.data.iter_mut().for_each(|v| *v = v.max(0.0));
        let out = self.second.forward(&hidden)?;
        Ok((
            out,
            ProjectionTape {
                input: x.clone(),
                hidden,
            },
        ))
    }

    /// Gradients are laid out `[first.params, second.params]`.
    pub fn backward(&self, tape: &ProjectionTape, g: &[f32], grads: &mut [f32]) -> Vec<f32> {
        let split = self.first.params.len();
        let (g1, g2) = grads.split_at_mut(split);
        let mut gh = self.second.backward(&tape.hidden, g, g2);
        for (gv, &h) in gh.iter_mut().zip(&tape.hidden.data) {
            if h <= 0.0 {
                *gv = 0.0;
            }
        }
        self.first.backward(&tape.input, &gh, g1)
    }

    pub fn num_params(&self) -> usize {
        self.first.params.len() + self.second.params.len()
    }

    pub fn flat_params(&self) -> Vec<f32> {
        [self.first.params.as_slice(), self.second.params.as_slice()].concat()
    }

    pub fn set_flat_params(&mut self, values: &[f32]) {
        let split = self.first.params.len();
        self.first.params.copy_from_slice(&values[..split]);
        self.second.params.copy_from_slice(&values[split..]);
    }

    /// Applies `f` to both layers' parameter slices as one logical vector.
    pub fn with_params_mut<R>(&mut self, f: impl FnOnce(&mut [f32], &mut [f32]) -> R) -> R {
        f(&mut self.first.params, &mut self.second.params)
    }
}

/// A linear classifier over a fixed list of global class labels; output `i`
/// scores `classes[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    pub layer: Dense,
    pub classes: Vec<usize>,
}

impl ClassifierHead {
    pub fn new(d: usize, classes: Vec<usize>, rng: &mut impl Rng) -> Self {
        ClassifierHead {
            layer: Dense::new(d, classes.len(), rng),
            classes,
        }
    }

    pub fn num_outputs(&self) -> usize {
        self.classes.len()
    }

    pub fn index_of(&self, label: usize) -> Option<usize> {
        self.classes.iter().position(|&c| c == label)
    }

    pub fn forward(&self, x: &Embeddings) -> Result<Embeddings> {
        self.layer.forward(x)
    }

    /// Predicted global labels.
    pub fn predict(&self, x: &Embeddings) -> Result<Vec<usize>> {
        let logits = self.forward(x)?;
        Ok((0..logits.rows)
            .map(|r| {
                let row = logits.row(r);
                let best = row
                    .iter()
                    .enumerate()
                    .fold(0, |best, (i, &v)| if v > row[best] { i } else { best });
                self.classes[best]
            })
            .collect())
    }

    /// Stacks two heads over disjoint label lists into one.
    pub fn concat(&self, other: &ClassifierHead) -> Result<ClassifierHead> {
        if self.layer.din != other.layer.din {
            return Err(Error::Usage(
                "cannot concatenate heads with different input dims".into(),
            ));
        }
        let (din, a, b) = (self.layer.din, self.layer.dout, other.layer.dout);
        let mut params = Vec::with_capacity((a + b) * (din + 1));
        params.extend_from_slice(&self.layer.params[..a * din]);
        params.extend_from_slice(&other.layer.params[..b * din]);
        params.extend_from_slice(&self.layer.params[a * din..]);
        params.extend_from_slice(&other.layer.params[b * din..]);
        let mut classes = self.classes.clone();
        classes.extend_from_slice(&other.classes);
        Ok(ClassifierHead {
            layer: Dense {
                din,
                dout: a + b,
                params,
            },
            classes,
        })
    }
}

// ---------------------------------------------------------------------------
// Snapshots

/// Immutable copy of an encoder's parameters and running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderState {
    pub task_tag: u64,
    pub arch_hash: u64,
    pub values: Vec<f32>,
}

impl EncoderState {
    pub fn file_name(task: usize) -> String {
        format!("encoder_task{task}.bin")
    }

    /// Little-endian: `u64 arch_hash, u64 task_tag, u64 count`, then `count` f32 values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + 4 * self.values.len());
        out.extend_from_slice(&self.arch_hash.to_le_bytes());
        out.extend_from_slice(&self.task_tag.to_le_bytes());
        out.extend_from_slice(&(self.values.len() as u64).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 24 {
            return Err(Error::Integrity("encoder state shorter than its header".into()));
        }
        let word = |i: usize| u64::from_le_bytes(bytes[i * 8..i * 8 + 8].try_into().unwrap());
        let (arch_hash, task_tag, count) = (word(0), word(1), word(2) as usize);
        let body = &bytes[24..];
        if body.len() != count * 4 {
            return Err(Error::Integrity(format!(
                "encoder state declares {count} values but holds {} bytes",
                body.len()
            )));
        }
        Ok(EncoderState {
            task_tag,
            arch_hash,
            values: body
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        EncoderState::from_bytes(&bytes)
    }
}

/// `key <- m * key + (1 - m) * query`, element-wise.
pub fn ema_update(key: &mut [f32], query: &[f32], momentum: f32) -> Result<()> {
    if key.len() != query.len() {
        return Err(Error::Usage(format!(
            "momentum update between {} and {} parameters",
            key.len(),
            query.len()
        )));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::Config(format!("momentum must be in [0, 1), got {momentum}")));
    }
    for (k, &q) in key.iter_mut().zip(query) {
        *k = momentum * *k + (1.0 - momentum) * q;
    }
    Ok(())
}

/// MoCo key network: a copy of the query encoder and projection head that is
/// only ever moved by EMA, never by gradients.
#[derive(Clone, Debug)]
pub struct MomentumEncoder {
    pub encoder: Encoder,
    pub head: ProjectionHead,
    pub momentum: f32,
}

impl MomentumEncoder {
    pub fn from_query(encoder: &Encoder, head: &ProjectionHead, momentum: f32) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {momentum}")));
        }
        Ok(MomentumEncoder {
            encoder: encoder.clone(),
            head: head.clone(),
            momentum,
        })
    }

    /// One EMA step toward the query network (parameters and running statistics).
    pub fn update(&mut self, encoder: &Encoder, head: &ProjectionHead) -> Result<()> {
        if self.encoder.arch.hash() != encoder.arch.hash() {
            return Err(Error::Usage("key and query encoders differ in architecture".into()));
        }
        ema_update(&mut self.encoder.params, &encoder.params, self.momentum)?;
        ema_update(&mut self.encoder.buffers, &encoder.buffers, self.momentum)?;
        let m = self.momentum;
        self.head.with_params_mut(|a, b| -> Result<()> {
            ema_update(a, &head.first.params, m)?;
            ema_update(b, &head.second.params, m)
        })
    }

    /// Key embeddings for a batch: training-mode batch statistics, no tape.
    pub fn keys(&mut self, batch: &Batch) -> Result<Embeddings> {
        let (h, _) = self.encoder.forward_train(batch)?;
        Ok(self.head.forward(&h)?.0)
    }
}

// ---------------------------------------------------------------------------
// Optimization

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd {
        #[serde(default)]
        momentum: f32,
    },
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f32,
        #[serde(default = "default_beta2")]
        beta2: f32,
        #[serde(default = "default_adam_eps")]
        eps: f32,
    },
}

fn default_beta1() -> f32 {
    0.9
}
fn default_beta2() -> f32 {
    0.999
}
fn default_adam_eps() -> f32 {
    1e-8
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
        }
    }
}

#[derive(Clone, Debug, Default)]
struct Slot {
    m: Vec<f32>,
    v: Vec<f32>,
}

/// First-order optimizer with per-group state. Groups are identified by their
/// position in the slice handed to [`train_step`].
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f32,
    step: u32,
    slots: Vec<Slot>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f32) -> Self {
        Optimizer {
            kind,
            lr,
            step: 0,
            slots: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u32 {
        self.step
    }
}

/// A trainable parameter slice and its gradient.
pub struct ParamGroup<'a> {
    pub params: &'a mut [f32],
    pub grads: &'a [f32],
}

impl<'a> ParamGroup<'a> {
    pub fn new(params: &'a mut [f32], grads: &'a [f32]) -> Self {
        ParamGroup { params, grads }
    }
}

/// Applies one optimizer update to every group, after checking that the loss
/// and all gradients are finite. Nothing outside `groups` is touched.
pub fn train_step(loss: f64, groups: &mut [ParamGroup<'_>], opt: &mut Optimizer) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss is {loss}")));
    }
    for (i, g) in groups.iter().enumerate() {
        if g.params.len() != g.grads.len() {
            return Err(Error::Usage(format!(
                "group {i}: {} params but {} grads",
                g.params.len(),
                g.grads.len()
            )));
        }
        if let Some(j) = g.grads.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("group {i}: gradient {j} is {}", g.grads[j])));
        }
    }
    if opt.slots.len() < groups.len() {
        opt.slots.resize_with(groups.len(), Slot::default);
    }
    opt.step += 1;
    let lr = opt.lr;
    let t = opt.step as i32;
    for (g, slot) in groups.iter_mut().zip(&mut opt.slots) {
        let n = g.params.len();
        match opt.kind {
            OptimizerKind::Sgd { momentum } => {
                if momentum == 0.0 {
                    for (p, &d) in g.params.iter_mut().zip(g.grads) {
                        *p -= lr * d;
                    }
                } else {
                    if slot.m.len() != n {
                        slot.m = vec![0.0; n];
                    }
                    for ((p, &d), m) in g.params.iter_mut().zip(g.grads).zip(&mut slot.m) {
                        *m = momentum * *m + d;
                        *p -= lr * *m;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if slot.m.len() != n {
                    slot.m = vec![0.0; n];
                    slot.v = vec![0.0; n];
                }
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, &d), m), v) in g.params.iter_mut().zip(g.grads).zip(&mut slot.m).zip(&mut slot.v) {
                    *m = beta1 * *m + (1.0 - beta1) * d;
                    *v = beta2 * *v + (1.0 - beta2) * d * d;
                    let mhat = *m / c1;
                    let vhat = *v / c2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
    }
    Ok(())
}
