//! Convolution, activation, pooling and fully-connected layers.
//!
//! Convolution is cross-correlation (no kernel flip) lowered to a matrix
//! product through an im2col buffer per sample.

use rand::Rng;

use crate::autodiff::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvGeom {
    batch: usize,
    in_ch: usize,
    h: usize,
    w: usize,
    out_ch: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 {
            return Err(Error::shape("conv2d", format!("input {x:?}, weight {w:?} must both be 4-D")));
        }
        if x[1] != w[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input {x:?} has {} channels, weight {w:?} expects {}", x[1], w[1]),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        let (h, wd, kh, kw) = (x[2], x[3], w[2], w[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {x:?} (pad {pad})"),
            ));
        }
        Ok(ConvGeom {
            batch: x[0],
            in_ch: x[1],
            h,
            w: wd,
            out_ch: w[0],
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (wd + 2 * pad - kw) / stride + 1,
        })
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Calls `f(col_index, source_index)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let cols = self.col_cols();
        for c in 0..self.in_ch {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    for oi in 0..self.oh {
                        let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                        if ii < 0 || ii >= self.h as isize {
                            continue;
                        }
                        for oj in 0..self.ow {
                            let jj = (oj * self.stride + kj) as isize - self.pad as isize;
                            if jj < 0 || jj >= self.w as isize {
                                continue;
                            }
                            let src = (c * self.h + ii as usize) * self.w + jj as usize;
                            f(row * cols + oi * self.ow + oj, src);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, sample: &[f64], cols: &mut [f64]) {
        cols.fill(0.0);
        self.for_each_tap(|dst, src| cols[dst] = sample[src]);
    }

    fn col2im(&self, cols: &[f64], sample: &mut [f64]) {
        self.for_each_tap(|col, dst| sample[dst] += cols[col]);
    }
}

pub(crate) fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let geo = ConvGeom::new(x.shape(), w.shape(), stride, pad)?;
    if let Some(b) = b {
        if b.shape() != [geo.out_ch] {
            return Err(Error::shape(
                "conv2d",
                format!("bias {:?} for {} output channels", b.shape(), geo.out_ch),
            ));
        }
    }
    let (rows, cols) = (geo.col_rows(), geo.col_cols());
    let in_stride = geo.in_ch * geo.h * geo.w;
    let out_stride = geo.out_ch * cols;
    let mut out = vec![0.0; geo.batch * out_stride];
    let mut buf = vec![0.0; rows * cols];
    for n in 0..geo.batch {
        let sample = &x.data()[n * in_stride..(n + 1) * in_stride];
        let dst = &mut out[n * out_stride..(n + 1) * out_stride];
        let k_is_identity = geo.kh == 1 && geo.kw == 1 && geo.stride == 1 && geo.pad == 0;
        let col: &[f64] = if k_is_identity {
            sample
        } else {
            geo.im2col(sample, &mut buf);
            &buf
        };
        gemm(geo.out_ch, rows, cols, w.data(), false, col, false, dst, false);
        if let Some(b) = b {
            for (o, chunk) in dst.chunks_exact_mut(cols).enumerate() {
                let bo = b.data()[o];
                chunk.iter_mut().for_each(|v| *v += bo);
            }
        }
    }
    Ok(Tensor::from_parts(vec![geo.batch, geo.out_ch, geo.oh, geo.ow], out))
}

#[allow(clippy::type_complexity)]
pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &Tensor,
    stride: usize,
    pad: usize,
    need_x: bool,
    need_b: bool,
) -> Result<(Option<Tensor>, Tensor, Option<Tensor>)> {
    let geo = ConvGeom::new(x.shape(), w.shape(), stride, pad)?;
    let expect = [geo.batch, geo.out_ch, geo.oh, geo.ow];
    if gout.shape() != expect {
        return Err(Error::shape("conv2d", format!("grad {:?} vs output {expect:?}", gout.shape())));
    }
    let (rows, cols) = (geo.col_rows(), geo.col_cols());
    let in_stride = geo.in_ch * geo.h * geo.w;
    let out_stride = geo.out_ch * cols;
    let mut gw = vec![0.0; w.numel()];
    let mut gx = if need_x { vec![0.0; x.numel()] } else { Vec::new() };
    let mut buf = vec![0.0; rows * cols];
    let mut gcol = if need_x { vec![0.0; rows * cols] } else { Vec::new() };
    for n in 0..geo.batch {
        let sample = &x.data()[n * in_stride..(n + 1) * in_stride];
        let go = &gout.data()[n * out_stride..(n + 1) * out_stride];
        geo.im2col(sample, &mut buf);
        // gw += go · colsᵀ
        gemm(geo.out_ch, cols, rows, go, false, &buf, true, &mut gw, true);
        if need_x {
            // gcol = Wᵀ · go
            gemm(rows, geo.out_ch, cols, w.data(), true, go, false, &mut gcol, false);
            geo.col2im(&gcol, &mut gx[n * in_stride..(n + 1) * in_stride]);
        }
    }
    let gb = need_b.then(|| {
        let mut gb = vec![0.0; geo.out_ch];
        for n in 0..geo.batch {
            for (o, acc) in gb.iter_mut().enumerate() {
                let start = n * out_stride + o * cols;
                *acc += gout.data()[start..start + cols].iter().sum::<f64>();
            }
        }
        Tensor::from_parts(vec![geo.out_ch], gb)
    });
    let gx = need_x.then(|| Tensor::from_parts(x.shape().to_vec(), gx));
    Ok((gx, Tensor::from_parts(w.shape().to_vec(), gw), gb))
}

fn expect_4d(op: &'static str, x: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *x.shape() {
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(Error::shape(op, format!("expected [B,C,H,W], got {:?}", x.shape()))),
    }
}

pub(crate) fn avgpool_forward(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = expect_4d("global_avgpool", x)?;
    let hw = h * w;
    let data = x.data().chunks_exact(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
    Ok(Tensor::from_parts(vec![b, c], data))
}

pub(crate) fn avgpool_backward(x: &Tensor, g: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = expect_4d("global_avgpool", x)?;
    if g.shape() != [b, c] {
        return Err(Error::shape("global_avgpool", format!("grad {:?}", g.shape())));
    }
    let hw = h * w;
    let inv = 1.0 / hw as f64;
    let mut out = Vec::with_capacity(x.numel());
    for &gv in g.data() {
        out.extend(std::iter::repeat(gv * inv).take(hw));
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

fn linear_check(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    match (x.shape(), w.shape(), b.shape()) {
        ([bs, i], [o, wi], [bo]) if i == wi && o == bo => Ok((*bs, *i, *o)),
        _ => Err(Error::shape(
            "linear",
            format!("x {:?}, weight {:?}, bias {:?}", x.shape(), w.shape(), b.shape()),
        )),
    }
}

pub(crate) fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (bs, i, o) = linear_check(x, w, b)?;
    let mut out = vec![0.0; bs * o];
    for row in out.chunks_exact_mut(o) {
        row.copy_from_slice(b.data());
    }
    gemm(bs, i, o, x.data(), false, w.data(), true, &mut out, true);
    Ok(Tensor::from_parts(vec![bs, o], out))
}

pub(crate) fn linear_backward(x: &Tensor, w: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (bs, i) = (x.dim(0), x.dim(1));
    let o = w.dim(0);
    if g.shape() != [bs, o] {
        return Err(Error::shape("linear", format!("grad {:?} vs [{bs}, {o}]", g.shape())));
    }
    let mut gx = vec![0.0; bs * i];
    gemm(bs, o, i, g.data(), false, w.data(), false, &mut gx, false);
    let mut gw = vec![0.0; o * i];
    gemm(o, bs, i, g.data(), true, x.data(), false, &mut gw, false);
    let mut gb = vec![0.0; o];
    for row in g.data().chunks_exact(o) {
        gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
    }
    Ok((
        Tensor::from_parts(vec![bs, i], gx),
        Tensor::from_parts(vec![o, i], gw),
        Tensor::from_parts(vec![o], gb),
    ))
}

pub(crate) fn append_channel(x: &Tensor, value: f64) -> Result<Tensor> {
    let (b, c, h, w) = expect_4d("append_time_channel", x)?;
    let plane = h * w;
    let mut out = Vec::with_capacity(b * (c + 1) * plane);
    for sample in x.data().chunks_exact(c * plane) {
        out.extend_from_slice(sample);
        out.extend(std::iter::repeat(value).take(plane));
    }
    Ok(Tensor::from_parts(vec![b, c + 1, h, w], out))
}

pub(crate) fn drop_last_channel(g: &Tensor) -> Result<Tensor> {
    let (b, c1, h, w) = expect_4d("append_time_channel", g)?;
    let plane = h * w;
    let mut out = Vec::with_capacity(b * (c1 - 1) * plane);
    for sample in g.data().chunks_exact(c1 * plane) {
        out.extend_from_slice(&sample[..(c1 - 1) * plane]);
    }
    Ok(Tensor::from_parts(vec![b, c1 - 1, h, w], out))
}

fn log_softmax_row(row: &[f64]) -> impl Iterator<Item = f64> + '_ {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(move |v| v - lse)
}

fn check_labels(logits: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    let (b, k) = match *logits.shape() {
        [b, k] => (b, k),
        _ => return Err(Error::shape("cross_entropy", format!("logits {:?}", logits.shape()))),
    };
    if labels.len() != b {
        return Err(Error::shape("cross_entropy", format!("{} labels for batch {b}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Invalid(format!("label {bad} out of range for {k} classes")));
    }
    Ok((b, k))
}

pub(crate) fn cross_entropy_forward(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (b, k) = check_labels(logits, labels)?;
    let total: f64 = logits
        .data()
        .chunks_exact(k)
        .zip(labels)
        .map(|(row, &y)| -log_softmax_row(row).nth(y).unwrap_or(0.0))
        .sum();
    Ok(Tensor::scalar(total / b as f64))
}

pub(crate) fn cross_entropy_backward(logits: &Tensor, labels: &[usize], g: f64) -> Result<Tensor> {
    let (b, k) = check_labels(logits, labels)?;
    let scale = g / b as f64;
    let mut out = Vec::with_capacity(b * k);
    for (row, &y) in logits.data().chunks_exact(k).zip(labels) {
        out.extend(
            log_softmax_row(row)
                .enumerate()
                .map(|(j, lp)| scale * (lp.exp() - if j == y { 1.0 } else { 0.0 })),
        );
    }
    Ok(Tensor::from_parts(vec![b, k], out))
}

/// Weights and optional bias of a 2-D convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2dParams {
    /// `[out_ch, in_ch, kh, kw]`
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dParams {
    /// Uniform(−k, k) init with `k = 1/sqrt(in_ch·kh·kw)`.
    pub fn init(
        rng: &mut impl Rng,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let k = 1.0 / (fan_in as f64).sqrt();
        let weight = uniform(rng, vec![out_ch, in_ch, kernel, kernel], k);
        let bias = bias.then(|| uniform(rng, vec![out_ch], k));
        Conv2dParams {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim(1)
    }

    /// Spatial output size for an `h × w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let (kh, kw) = (self.weight.dim(2), self.weight.dim(3));
        (
            (h + 2 * self.padding - kh) / self.stride + 1,
            (w + 2 * self.padding - kw) / self.stride + 1,
        )
    }

    /// Pure evaluation outside any graph.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        conv2d_forward(x, &self.weight, self.bias.as_ref(), self.stride, self.padding)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    /// `[out, in]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

impl LinearParams {
    pub fn init(rng: &mut impl Rng, in_features: usize, out_features: usize) -> Self {
        let k = 1.0 / (in_features as f64).sqrt();
        LinearParams {
            weight: uniform(rng, vec![out_features, in_features], k),
            bias: uniform(rng, vec![out_features], k),
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        linear_forward(x, &self.weight, &self.bias)
    }
}

pub(crate) fn uniform(rng: &mut impl Rng, shape: Vec<usize>, k: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-k..=k)).collect();
    Tensor::from_parts(shape, data)
}

pub fn conv2d(g: &Graph, x: &Var, weight: &Var, bias: Option<&Var>, stride: usize, padding: usize) -> Result<Var> {
    let op = Op::Conv2d { stride, padding };
    match bias {
        Some(b) => g.record(op, &[x, weight, b]),
        None => g.record(op, &[x, weight]),
    }
}

pub fn relu(g: &Graph, x: &Var) -> Result<Var> {
    g.relu(x)
}

pub fn global_avgpool(g: &Graph, x: &Var) -> Result<Var> {
    g.record(Op::GlobalAvgPool, &[x])
}

pub fn linear(g: &Graph, x: &Var, weight: &Var, bias: &Var) -> Result<Var> {
    g.record(Op::Linear, &[x, weight, bias])
}

/// Mean softmax cross-entropy, computed with max-subtracted log-sum-exp.
pub fn cross_entropy(g: &Graph, logits: &Var, labels: &[usize]) -> Result<Var> {
    g.record(
        Op::CrossEntropy {
            labels: std::rc::Rc::new(labels.to_vec()),
        },
        &[logits],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct six-loop cross-correlation.
    fn naive_conv(x: &Tensor, w: &Tensor, b: Option<&Tensor>, s: usize, p: usize) -> Tensor {
        let (bn, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (o, kh, kw) = (w.dim(0), w.dim(2), w.dim(3));
        let oh = (h + 2 * p - kh) / s + 1;
        let ow = (wd + 2 * p - kw) / s + 1;
        let mut out = Tensor::zeros([bn, o, oh, ow]);
        for n in 0..bn {
            for oc in 0..o {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = b.map_or(0.0, |b| b.data()[oc]);
                        for ic in 0..c {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let ii = (i * s + ki) as isize - p as isize;
                                    let jj = (j * s + kj) as isize - p as isize;
                                    if ii < 0 || jj < 0 || ii >= h as isize || jj >= wd as isize {
                                        continue;
                                    }
                                    let xv = x.data()[((n * c + ic) * h + ii as usize) * wd + jj as usize];
                                    let wv = w.data()[((oc * c + ic) * kh + ki) * kw + kj];
                                    acc += xv * wv;
                                }
                            }
                        }
                        out.data_mut()[((n * o + oc) * oh + i) * ow + j] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = uniform(&mut rng, vec![2, 1, 5, 4], 1.0);
        let w = Tensor::ones([1, 1, 1, 1]);
        assert_eq!(conv2d_forward(&x, &w, None, 1, 0).unwrap(), x);
    }

    #[test]
    fn all_ones_kernel_counts_neighbours() {
        let x = Tensor::ones([1, 1, 3, 3]);
        let w = Tensor::ones([1, 1, 3, 3]);
        let y = conv2d_forward(&x, &w, None, 1, 1).unwrap();
        assert_eq!(y.data()[4], 9.0);
        assert_eq!(y.data()[0], 4.0);
        assert_eq!(y.data()[8], 4.0);
        assert_eq!(y.data()[1], 6.0);
    }

    #[test]
    fn output_shape_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = Conv2dParams::init(&mut rng, 3, 16, 3, 1, 1, true);
        let x = Tensor::zeros([2, 3, 8, 8]);
        assert_eq!(p.apply(&x).unwrap().shape(), &[2, 16, 8, 8]);
        let p = Conv2dParams::init(&mut rng, 3, 4, 3, 2, 1, true);
        assert_eq!(p.apply(&x).unwrap().shape(), &[2, 4, 4, 4]);
        assert_eq!(p.output_hw(8, 8), (4, 4));
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let x = Tensor::zeros([1, 2, 4, 4]);
        let w = Tensor::zeros([3, 4, 3, 3]);
        let err = conv2d_forward(&x, &w, None, 1, 1).unwrap_err();
        assert!(matches!(err, Error::Shape { op: "conv2d", .. }));
    }

    #[test]
    fn matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(s, p, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 1), (1, 2, 3), (3, 1, 2)] {
            let x = uniform(&mut rng, vec![2, 4, 9, 9], 1.0);
            let w = uniform(&mut rng, vec![3, 4, k, k], 1.0);
            let b = uniform(&mut rng, vec![3], 1.0);
            let fast = conv2d_forward(&x, &w, Some(&b), s, p).unwrap();
            let slow = naive_conv(&x, &w, Some(&b), s, p);
            assert!(fast.max_abs_diff(&slow).unwrap() < 1e-10, "s={s} p={p} k={k}");
        }
    }

    #[test]
    fn conv_without_bias_is_homogeneous() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = uniform(&mut rng, vec![1, 2, 5, 5], 1.0);
        let w = uniform(&mut rng, vec![3, 2, 3, 3], 1.0);
        let y = conv2d_forward(&x, &w, None, 1, 1).unwrap().scale(-2.5);
        let ya = conv2d_forward(&x.scale(-2.5), &w, None, 1, 1).unwrap();
        assert!(y.max_abs_diff(&ya).unwrap() < 1e-12);
    }

    #[test]
    fn avgpool_mean_and_gradient() {
        let x = Tensor::new([1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        assert_eq!(avgpool_forward(&x).unwrap().data(), &[4.0]);
        let c = Tensor::full([2, 3, 4, 5], 2.5);
        assert!(avgpool_forward(&c).unwrap().data().iter().all(|&v| (v - 2.5).abs() < 1e-15));
        let g = avgpool_backward(&x, &Tensor::ones([1, 1])).unwrap();
        assert_eq!(g.data(), &[0.25; 4]);
    }

    #[test]
    fn linear_identity_and_bias() {
        let x = Tensor::new([2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 4.0]).unwrap();
        let y = linear_forward(&x, &Tensor::eye(3), &Tensor::zeros([3])).unwrap();
        assert_eq!(y, x);
        let b = Tensor::from_vec(vec![7.0, 8.0]);
        let y = linear_forward(&x, &Tensor::zeros([2, 3]), &b).unwrap();
        assert_eq!(y.data(), &[7.0, 8.0, 7.0, 8.0]);
        assert!(linear_forward(&x, &Tensor::zeros([2, 2]), &b).is_err());
    }

    #[test]
    fn relu_values() {
        let g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let y = relu(&g, &x).unwrap();
        assert_eq!(y.value().data(), &[0.0, 0.0, 2.0]);
        let s = g.sum(&y).unwrap();
        let gr = g.backward(&s, &Tensor::scalar(1.0)).unwrap();
        // subgradient at 0 is 0
        assert_eq!(gr.wrt(&x).data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn cross_entropy_is_stable_for_large_logits() {
        let logits = Tensor::new([1, 3], vec![1000.0, 0.0, -1000.0]).unwrap();
        let l = cross_entropy_forward(&logits, &[0]).unwrap().item().unwrap();
        assert!(l.abs() < 1e-12);
        let l = cross_entropy_forward(&logits, &[1]).unwrap().item().unwrap();
        assert!((l - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let logits = Tensor::zeros([2, 3]);
        assert!(cross_entropy_forward(&logits, &[0, 3]).is_err());
        assert!(cross_entropy_forward(&logits, &[0]).is_err());
    }

    #[test]
    fn time_channel_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = uniform(&mut rng, vec![2, 3, 2, 2], 1.0);
        let y = append_channel(&x, 0.75).unwrap();
        assert_eq!(y.shape(), &[2, 4, 2, 2]);
        assert_eq!(&y.data()[12..16], &[0.75; 4]);
        assert_eq!(drop_last_channel(&y).unwrap(), x);
    }
}
