//! Shared fixtures for the benchmarks.

use odenorm::{Tensor, Var};

/// A deterministic `[B, C, H, W]` tensor with values in `[-1, 1)`.
pub fn input(b: usize, c: usize, h: usize, w: usize) -> Tensor {
    let n = b * c * h * w;
    let data = (0..n).map(|i| ((i * 7919) % 2000) as f64 / 1000.0 - 1.0).collect();
    Tensor::new([b, c, h, w], data).expect("consistent shape")
}

/// Sum of all elements, used as a scalar loss.
pub fn total(g: &odenorm::Graph, v: &Var) -> odenorm::Result<Var> {
    g.sum(v)
}
