//! Batch, layer, weight and spectral normalization.
//!
//! BN and LN act on activations and sit after a convolution. WN and SN act on
//! the convolution weight itself. NF is the identity. All five keep tensor
//! shapes unchanged, so a model can swap one for another in any slot.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use crate::autodiff::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-5;
pub const SN_EPS: f64 = 1e-12;
pub const BN_MOMENTUM: f64 = 0.1;
const WN_MIN_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NormKind {
    /// Batch normalization.
    Bn,
    /// Layer normalization.
    Ln,
    /// Weight normalization.
    Wn,
    /// Spectral normalization.
    Sn,
    /// No normalization.
    Nf,
}

impl NormKind {
    pub const ALL: [NormKind; 5] = [NormKind::Bn, NormKind::Wn, NormKind::Sn, NormKind::Nf, NormKind::Ln];

    pub fn as_str(self) -> &'static str {
        match self {
            NormKind::Bn => "BN",
            NormKind::Ln => "LN",
            NormKind::Wn => "WN",
            NormKind::Sn => "SN",
            NormKind::Nf => "NF",
        }
    }

    /// Whether the norm rewrites the convolution weight rather than the
    /// activations.
    pub fn acts_on_weight(self) -> bool {
        matches!(self, NormKind::Wn | NormKind::Sn)
    }
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "BN" => Ok(NormKind::Bn),
            "LN" => Ok(NormKind::Ln),
            "WN" => Ok(NormKind::Wn),
            "SN" => Ok(NormKind::Sn),
            "NF" => Ok(NormKind::Nf),
            _ => Err(Error::Invalid(format!("unknown normalization `{s}` (expected BN, LN, WN, SN or NF)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

// ---------------------------------------------------------------------------
// kernels

/// `(outer, channels, inner)` for an `[B, C, ...]` tensor.
fn channel_layout(op: &'static str, x: &Tensor) -> Result<(usize, usize, usize)> {
    if x.ndim() < 2 {
        return Err(Error::shape(op, format!("expected [B, C, ...], got {:?}", x.shape())));
    }
    let inner = x.shape()[2..].iter().product();
    Ok((x.dim(0), x.dim(1), inner))
}

fn check_affine(op: &'static str, c: usize, gamma: &Tensor, beta: &Tensor) -> Result<()> {
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            op,
            format!("gamma {:?} / beta {:?} for {c} channels", gamma.shape(), beta.shape()),
        ));
    }
    Ok(())
}

/// Per-channel mean and population variance over batch and spatial axes.
pub(crate) fn batch_stats(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let (b, c, inner) = channel_layout("batchnorm", x)?;
    let m = (b * inner) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for n in 0..b {
        for (ch, acc) in mean.iter_mut().enumerate() {
            let s = (n * c + ch) * inner;
            *acc += x.data()[s..s + inner].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    for n in 0..b {
        for ch in 0..c {
            let s = (n * c + ch) * inner;
            let mu = mean[ch];
            var[ch] += x.data()[s..s + inner].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= m);
    Ok((Tensor::from_vec(mean), Tensor::from_vec(var)))
}

pub(crate) fn channel_normalize(
    x: &Tensor,
    mean: &Tensor,
    var: &Tensor,
    eps: f64,
    gamma: &Tensor,
    beta: &Tensor,
) -> Result<Tensor> {
    let (b, c, inner) = channel_layout("batchnorm", x)?;
    check_affine("batchnorm", c, gamma, beta)?;
    if mean.shape() != [c] || var.shape() != [c] {
        return Err(Error::shape("batchnorm", format!("statistics {:?} for {c} channels", mean.shape())));
    }
    let mut out = Vec::with_capacity(x.numel());
    for n in 0..b {
        for ch in 0..c {
            let s = (n * c + ch) * inner;
            let inv = 1.0 / (var.data()[ch] + eps).sqrt();
            let (mu, ga, be) = (mean.data()[ch], gamma.data()[ch], beta.data()[ch]);
            out.extend(x.data()[s..s + inner].iter().map(|v| (v - mu) * inv * ga + be));
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub(crate) fn batchnorm_train_backward(
    x: &Tensor,
    gamma: &Tensor,
    g: &Tensor,
    eps: f64,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (b, c, inner) = channel_layout("batchnorm", x)?;
    let (mean, var) = batch_stats(x)?;
    let m = (b * inner) as f64;
    let mut sum_g = vec![0.0; c];
    let mut sum_gx = vec![0.0; c];
    let inv: Vec<f64> = var.data().iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    for n in 0..b {
        for ch in 0..c {
            let s = (n * c + ch) * inner;
            for (xv, gv) in x.data()[s..s + inner].iter().zip(&g.data()[s..s + inner]) {
                sum_g[ch] += gv;
                sum_gx[ch] += gv * (xv - mean.data()[ch]) * inv[ch];
            }
        }
    }
    let mut gx = Vec::with_capacity(x.numel());
    for n in 0..b {
        for ch in 0..c {
            let s = (n * c + ch) * inner;
            let k = gamma.data()[ch] * inv[ch] / m;
            let mu = mean.data()[ch];
            gx.extend(
                x.data()[s..s + inner]
                    .iter()
                    .zip(&g.data()[s..s + inner])
                    .map(|(xv, gv)| k * (m * gv - sum_g[ch] - (xv - mu) * inv[ch] * sum_gx[ch])),
            );
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), gx),
        Tensor::from_vec(sum_gx),
        Tensor::from_vec(sum_g),
    ))
}

pub(crate) fn batchnorm_eval_backward(
    x: &Tensor,
    mean: &Tensor,
    var: &Tensor,
    gamma: &Tensor,
    g: &Tensor,
    eps: f64,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (b, c, inner) = channel_layout("batchnorm_eval", x)?;
    let mut sum_g = vec![0.0; c];
    let mut sum_gx = vec![0.0; c];
    let mut gx = Vec::with_capacity(x.numel());
    for n in 0..b {
        for ch in 0..c {
            let s = (n * c + ch) * inner;
            let inv = 1.0 / (var.data()[ch] + eps).sqrt();
            let mu = mean.data()[ch];
            for (xv, gv) in x.data()[s..s + inner].iter().zip(&g.data()[s..s + inner]) {
                sum_g[ch] += gv;
                sum_gx[ch] += gv * (xv - mu) * inv;
                gx.push(gv * gamma.data()[ch] * inv);
            }
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), gx),
        Tensor::from_vec(sum_gx),
        Tensor::from_vec(sum_g),
    ))
}

/// Per-sample `(mean, 1/sqrt(var + eps))` over all non-batch axes.
fn sample_stats(x: &Tensor, eps: f64) -> Vec<(f64, f64)> {
    let per = x.numel() / x.dim(0);
    x.data()
        .chunks_exact(per)
        .map(|s| {
            let mu = s.iter().sum::<f64>() / per as f64;
            let var = s.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / per as f64;
            (mu, 1.0 / (var + eps).sqrt())
        })
        .collect()
}

pub(crate) fn layernorm_forward(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let (_, c, inner) = channel_layout("layernorm", x)?;
    check_affine("layernorm", c, gamma, beta)?;
    let stats = sample_stats(x, eps);
    let per = c * inner;
    let mut out = Vec::with_capacity(x.numel());
    for (sample, &(mu, inv)) in x.data().chunks_exact(per).zip(&stats) {
        for ch in 0..c {
            let (ga, be) = (gamma.data()[ch], beta.data()[ch]);
            out.extend(sample[ch * inner..(ch + 1) * inner].iter().map(|v| (v - mu) * inv * ga + be));
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub(crate) fn layernorm_backward(x: &Tensor, gamma: &Tensor, g: &Tensor, eps: f64) -> Result<(Tensor, Tensor, Tensor)> {
    let (_, c, inner) = channel_layout("layernorm", x)?;
    let stats = sample_stats(x, eps);
    let per = c * inner;
    let m = per as f64;
    let mut ggamma = vec![0.0; c];
    let mut gbeta = vec![0.0; c];
    let mut gx = Vec::with_capacity(x.numel());
    for ((xs, gs), &(mu, inv)) in x.data().chunks_exact(per).zip(g.data().chunks_exact(per)).zip(&stats) {
        let mut sum_d = 0.0;
        let mut sum_dx = 0.0;
        for ch in 0..c {
            for k in ch * inner..(ch + 1) * inner {
                let xhat = (xs[k] - mu) * inv;
                let d = gs[k] * gamma.data()[ch];
                sum_d += d;
                sum_dx += d * xhat;
                ggamma[ch] += gs[k] * xhat;
                gbeta[ch] += gs[k];
            }
        }
        for ch in 0..c {
            for k in ch * inner..(ch + 1) * inner {
                let xhat = (xs[k] - mu) * inv;
                let d = gs[k] * gamma.data()[ch];
                gx.push(inv / m * (m * d - sum_d - xhat * sum_dx));
            }
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), gx),
        Tensor::from_vec(ggamma),
        Tensor::from_vec(gbeta),
    ))
}

fn row_layout(op: &'static str, v: &Tensor, g: &Tensor) -> Result<(usize, usize)> {
    let rows = v.dim(0);
    if g.shape() != [rows] {
        return Err(Error::shape(op, format!("scale {:?} for direction {:?}", g.shape(), v.shape())));
    }
    Ok((rows, v.numel() / rows))
}

fn row_norms(v: &Tensor, per: usize) -> Result<Vec<f64>> {
    v.data()
        .chunks_exact(per)
        .enumerate()
        .map(|(c, row)| {
            let n = row.iter().map(|a| a * a).sum::<f64>().sqrt();
            if n < WN_MIN_NORM {
                Err(Error::Invalid(format!("weightnorm: direction of output channel {c} has norm {n:e}")))
            } else {
                Ok(n)
            }
        })
        .collect()
}

pub(crate) fn weightnorm_forward(v: &Tensor, g: &Tensor) -> Result<Tensor> {
    let (_, per) = row_layout("weightnorm", v, g)?;
    let norms = row_norms(v, per)?;
    let mut out = Vec::with_capacity(v.numel());
    for ((row, n), gc) in v.data().chunks_exact(per).zip(&norms).zip(g.data()) {
        out.extend(row.iter().map(|a| gc * a / n));
    }
    Ok(Tensor::from_parts(v.shape().to_vec(), out))
}

pub(crate) fn weightnorm_backward(v: &Tensor, g: &Tensor, gw: &Tensor) -> Result<(Tensor, Tensor)> {
    let (_, per) = row_layout("weightnorm", v, g)?;
    let norms = row_norms(v, per)?;
    let mut gv = Vec::with_capacity(v.numel());
    let mut gg = Vec::with_capacity(g.numel());
    for (((row, grow), n), gc) in v.data().chunks_exact(per).zip(gw.data().chunks_exact(per)).zip(&norms).zip(g.data()) {
        let vg: f64 = row.iter().zip(grow).map(|(a, b)| a * b).sum();
        gg.push(vg / n);
        let k = gc / n;
        let n2 = n * n;
        gv.extend(row.iter().zip(grow).map(|(a, b)| k * (b - vg / n2 * a)));
    }
    Ok((Tensor::from_parts(v.shape().to_vec(), gv), Tensor::from_parts(g.shape().to_vec(), gg)))
}

fn as_matrix(w: &Tensor) -> (usize, usize) {
    let rows = w.dim(0);
    (rows, w.numel() / rows)
}

/// `uᵀ W v` with `W` viewed as `[out, rest]`.
fn bilinear(w: &Tensor, u: &Tensor, v: &Tensor) -> Result<f64> {
    let (r, c) = as_matrix(w);
    if u.numel() != r || v.numel() != c {
        return Err(Error::shape(
            "spectral_scale",
            format!("u {:?}, v {:?} for weight {:?}", u.shape(), v.shape(), w.shape()),
        ));
    }
    Ok(w.data()
        .chunks_exact(c)
        .zip(u.data())
        .map(|(row, ui)| ui * row.iter().zip(v.data()).map(|(a, b)| a * b).sum::<f64>())
        .sum())
}

pub(crate) fn spectral_scale_forward(w: &Tensor, u: &Tensor, v: &Tensor) -> Result<Tensor> {
    let sigma = bilinear(w, u, v)?;
    if !(sigma.abs() > 0.0) {
        return Err(Error::Invalid("spectral normalization: estimated sigma is zero".into()));
    }
    Ok(w.scale(1.0 / sigma))
}

pub(crate) fn spectral_scale_backward(w: &Tensor, u: &Tensor, v: &Tensor, g: &Tensor) -> Result<Tensor> {
    let sigma = bilinear(w, u, v)?;
    let (_, c) = as_matrix(w);
    let gw_dot: f64 = g.dot(w)?;
    let k = gw_dot / (sigma * sigma);
    let mut out = Vec::with_capacity(w.numel());
    for (grow, ui) in g.data().chunks_exact(c).zip(u.data()) {
        out.extend(grow.iter().zip(v.data()).map(|(gv, vj)| gv / sigma - k * ui * vj));
    }
    Ok(Tensor::from_parts(w.shape().to_vec(), out))
}

// ---------------------------------------------------------------------------
// state and graph-level operations

/// Running statistics of a batch-norm layer. The affine `gamma`/`beta` are
/// trainable and live with the other model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: Tensor::zeros([channels]),
            running_var: Tensor::ones([channels]),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    /// Blends batch statistics into the running estimates. The running
    /// variance uses the unbiased batch variance.
    pub fn update(&mut self, mean: &Tensor, var: &Tensor, count: usize) {
        let m = self.momentum;
        let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
        for (r, b) in self.running_mean.data_mut().iter_mut().zip(mean.data()) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.running_var.data_mut().iter_mut().zip(var.data()) {
            *r = (1.0 - m) * *r + m * b * unbias;
        }
    }
}

/// Batch normalization of an `[B, C, ...]` input.
///
/// Train mode normalizes by batch statistics and, when `update_running` is
/// set, folds them into `state`. Eval mode normalizes by the running
/// statistics and never touches `state`.
pub fn batchnorm(
    g: &Graph,
    x: &Var,
    gamma: &Var,
    beta: &Var,
    state: &mut BatchNormState,
    mode: Mode,
    update_running: bool,
) -> Result<Var> {
    match mode {
        Mode::Train => {
            let b = x.shape().first().copied().unwrap_or(0);
            if b < 2 {
                return Err(Error::Invalid(format!(
                    "batchnorm: train mode needs a batch of at least 2, got {b}"
                )));
            }
            let y = g.record(Op::BatchNorm { eps: state.eps }, &[x, gamma, beta])?;
            if update_running {
                let (mean, var) = batch_stats(x.value())?;
                let count = x.value().numel() / mean.numel();
                state.update(&mean, &var, count);
            }
            Ok(y)
        }
        Mode::Eval => g.record(
            Op::BatchNormEval {
                mean: Rc::new(state.running_mean.clone()),
                var: Rc::new(state.running_var.clone()),
                eps: state.eps,
            },
            &[x, gamma, beta],
        ),
    }
}

/// Layer normalization over every non-batch axis of each sample, with a
/// per-channel affine.
pub fn layernorm(g: &Graph, x: &Var, gamma: &Var, beta: &Var, eps: f64) -> Result<Var> {
    g.record(Op::LayerNorm { eps }, &[x, gamma, beta])
}

/// Direction/scale reparametrization of a weight: `w_c = g_c v_c / ‖v_c‖`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightNormParams {
    pub v: Tensor,
    pub g: Tensor,
}

impl WeightNormParams {
    /// Reparametrizes an existing weight so the effective weight is unchanged.
    pub fn from_weight(w: &Tensor) -> Result<Self> {
        let rows = w.dim(0);
        let per = w.numel() / rows;
        let norms = row_norms(w, per)?;
        Ok(WeightNormParams {
            v: w.clone(),
            g: Tensor::from_vec(norms),
        })
    }
}

pub fn weightnorm_effective(p: &WeightNormParams) -> Result<Tensor> {
    weightnorm_forward(&p.v, &p.g)
}

pub fn weightnorm(g: &Graph, v: &Var, scale: &Var) -> Result<Var> {
    g.record(Op::WeightNorm, &[v, scale])
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralNormState {
    /// Left singular vector estimate, unit length.
    pub u: Tensor,
    pub power_iters_per_forward: usize,
    pub eps: f64,
}

fn normalize(data: Vec<f64>, eps: f64) -> Tensor {
    let n = data.iter().map(|a| a * a).sum::<f64>().sqrt();
    let d = n.max(eps);
    Tensor::from_vec(data.into_iter().map(|a| a / d).collect())
}

impl SpectralNormState {
    /// Deterministic start vector `u = 1/sqrt(out)`.
    pub fn new(out_features: usize) -> Self {
        SpectralNormState {
            u: Tensor::full([out_features], 1.0 / (out_features as f64).sqrt()),
            power_iters_per_forward: 1,
            eps: SN_EPS,
        }
    }

    fn check(&self, w: &Tensor) -> Result<(usize, usize)> {
        let (r, c) = as_matrix(w);
        if self.u.numel() != r {
            return Err(Error::shape(
                "spectral_normalize",
                format!("u has {} entries, weight {:?}", self.u.numel(), w.shape()),
            ));
        }
        if w.max_abs() == 0.0 {
            return Err(Error::Invalid("spectral normalization of a zero matrix".into()));
        }
        Ok((r, c))
    }

    /// `v = normalize(Wᵀu)` for the current `u`.
    pub fn right_vector(&self, w: &Tensor) -> Result<Tensor> {
        let (_, c) = self.check(w)?;
        let mut wt_u = vec![0.0; c];
        for (row, ui) in w.data().chunks_exact(c).zip(self.u.data()) {
            wt_u.iter_mut().zip(row).for_each(|(acc, a)| *acc += ui * a);
        }
        Ok(normalize(wt_u, self.eps))
    }

    /// One power-iteration update of `u`; returns the matching `v`.
    pub fn step(&mut self, w: &Tensor) -> Result<Tensor> {
        let v = self.right_vector(w)?;
        let (_, c) = as_matrix(w);
        let wv: Vec<f64> = w
            .data()
            .chunks_exact(c)
            .map(|row| row.iter().zip(v.data()).map(|(a, b)| a * b).sum())
            .collect();
        self.u = normalize(wv, self.eps);
        Ok(v)
    }

    /// Singular value estimate `uᵀ W v` for the current `u`.
    pub fn sigma(&self, w: &Tensor) -> Result<f64> {
        let v = self.right_vector(w)?;
        bilinear(w, &self.u, &v)
    }
}

/// Spectrally normalized weight `W / σ̂`, with `W` viewed as `[out, rest]`.
///
/// Train mode first runs `power_iters_per_forward` updates of the persisted
/// `u`; eval mode reuses it unchanged. The returned graph value treats `u`
/// and `v` as constants.
pub fn spectral_normalize(g: &Graph, w: &Var, state: &mut SpectralNormState, mode: Mode) -> Result<Var> {
    let v = match mode {
        Mode::Train => {
            let mut v = state.right_vector(w.value())?;
            for _ in 0..state.power_iters_per_forward {
                v = state.step(w.value())?;
            }
            v
        }
        Mode::Eval => state.right_vector(w.value())?,
    };
    spectral_scale(g, w, &state.u, &v)
}

/// `w / (uᵀ W v)` for fixed `u`, `v`.
pub fn spectral_scale(g: &Graph, w: &Var, u: &Tensor, v: &Tensor) -> Result<Var> {
    g.record(
        Op::SpectralScale {
            u: Rc::new(u.clone()),
            v: Rc::new(v.clone()),
        },
        &[w],
    )
}
