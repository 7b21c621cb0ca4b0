mod common;

use common::{max_rel_diff, probe, uniform};
use odenorm::gradcheck::grad_check;
use odenorm::nn::{Ctx, TensorStore};
use odenorm::{Backprop, Graph, Mode, NormKind, OdeBlock, Scheme, SolverSpec, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn spec(s: Scheme, n: usize) -> SolverSpec {
    SolverSpec::new(s, n).unwrap()
}

fn linear_block(a: &Tensor, s: SolverSpec) -> (TensorStore, OdeBlock) {
    let mut store = TensorStore::new();
    let block = OdeBlock::linear(&mut store, "ode", a, s).unwrap();
    (store, block)
}

fn run(store: &TensorStore, block: &OdeBlock, x: &Tensor) -> Tensor {
    let g = Graph::no_grad();
    let ctx = Ctx::new(&g, store, Mode::Eval);
    block.forward(&ctx, &g.leaf(x.clone())).unwrap().into_tensor()
}

/// Applies a `[C, C]` matrix to every pixel of a `[B, C, H, W]` tensor.
fn per_pixel(m: &[f64], x: &Tensor) -> Tensor {
    let (b, c) = (x.dim(0), x.dim(1));
    let hw = x.numel() / (b * c);
    let mut out = Tensor::zeros(x.shape());
    for i in 0..b {
        for p in 0..hw {
            for r in 0..c {
                let acc: f64 = (0..c).map(|k| m[r * c + k] * x.data()[(i * c + k) * hw + p]).sum();
                out.data_mut()[(i * c + r) * hw + p] = acc;
            }
        }
    }
    out
}

fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = (0..n).map(|k| a[i * n + k] * b[k * n + j]).sum();
        }
    }
    out
}

/// Matrix exponential by scaling, a 20-term Taylor series and squaring.
fn expm(a: &[f64], n: usize) -> Vec<f64> {
    let norm: f64 = a.iter().map(|v| v.abs()).sum();
    let squarings = norm.log2().ceil().max(0.0) as u32 + 1;
    let scaled: Vec<f64> = a.iter().map(|v| v / 2f64.powi(squarings as i32)).collect();
    let mut term: Vec<f64> = (0..n * n).map(|i| if i % (n + 1) == 0 { 1.0 } else { 0.0 }).collect();
    let mut sum = term.clone();
    for k in 1..=20 {
        term = matmul(&term, &scaled, n).into_iter().map(|v| v / k as f64).collect();
        sum.iter_mut().zip(&term).for_each(|(s, t)| *s += t);
    }
    for _ in 0..squarings {
        sum = matmul(&sum, &sum, n);
    }
    sum
}

#[test]
fn zero_dynamics_is_identity_for_every_solver() {
    let x = uniform(&[2, 3, 4, 4], 1);
    for s in Scheme::ALL {
        for n in [4, 8, 16] {
            let (store, block) = linear_block(&Tensor::zeros([3, 3]), spec(s, n));
            assert_eq!(run(&store, &block, &x), x);
        }
    }
}

#[test]
fn single_euler_step_is_one_plus_a() {
    let a = [0.3, -0.7, 0.5, 0.1];
    let (store, block) = linear_block(&Tensor::new([2, 2], a.to_vec()).unwrap(), spec(Scheme::Euler, 1));
    let x = uniform(&[3, 2, 2, 2], 2);
    let ipa = [1.0 + a[0], a[1], a[2], 1.0 + a[3]];
    let y = run(&store, &block, &x);
    assert!(y.max_abs_diff(&per_pixel(&ipa, &x)).unwrap() < 1e-15);

    // d/dz0 of Σ r ⊙ z1 is (I + A)ᵀ r
    let g = Graph::new();
    let ctx = Ctx::new(&g, &store, Mode::Eval);
    let z0 = g.leaf(x.clone());
    let out = probe(&g, &block.forward(&ctx, &z0).unwrap(), 3).unwrap();
    let grad = g.backward(&out, &Tensor::scalar(1.0)).unwrap().wrt(&z0);
    let ipa_t = [ipa[0], ipa[2], ipa[1], ipa[3]];
    let expected = per_pixel(&ipa_t, &uniform(x.shape(), 3));
    assert!(grad.max_abs_diff(&expected).unwrap() < 1e-15);
}

#[test]
fn linear_flow_matches_matrix_exponential() {
    let a = [-0.6, 1.1, -0.9, 0.4];
    let (store, block) = linear_block(&Tensor::new([2, 2], a.to_vec()).unwrap(), spec(Scheme::Rk4, 256));
    let x = uniform(&[2, 2, 3, 3], 4);
    let y = run(&store, &block, &x);
    let oracle = per_pixel(&expm(&a, 2), &x);
    assert!(y.max_abs_diff(&oracle).unwrap() < 1e-8);
}

#[test]
fn expm_oracle_sanity() {
    // rotation generator: exp([[0, -θ], [θ, 0]]) = [[cos, -sin], [sin, cos]]
    let th = 1.3f64;
    let e = expm(&[0.0, -th, th, 0.0], 2);
    let want = [th.cos(), -th.sin(), th.sin(), th.cos()];
    assert!(e.iter().zip(want).all(|(x, y)| (x - y).abs() < 1e-14));
}

fn standard_block(kind: NormKind, s: SolverSpec) -> (TensorStore, OdeBlock) {
    let mut store = TensorStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let block = OdeBlock::register(&mut store, &mut rng, "ode", kind, 3, s, true).unwrap();
    (store, block)
}

/// Probe loss, gradients of every trainable tensor and of the input, and
/// the committed store.
fn grads(store: &TensorStore, block: &OdeBlock, x: &Tensor, bp: Backprop) -> (f64, Vec<Tensor>, TensorStore) {
    let g = Graph::new();
    let mut ctx = Ctx::new(&g, store, Mode::Train);
    ctx.backprop = bp;
    let z0 = g.leaf(x.clone());
    let out = probe(&g, &block.forward(&ctx, &z0).unwrap(), 9).unwrap();
    let gr = g.backward(&out, &Tensor::scalar(1.0)).unwrap();
    let mut all: Vec<Tensor> = store.trainable_ids().map(|id| gr.wrt(ctx.var(id))).collect();
    all.push(gr.wrt(&z0));
    let loss = out.value().item().unwrap();
    let mut next = store.clone();
    ctx.into_updates().apply(&mut next).unwrap();
    (loss, all, next)
}

#[test]
fn checkpointed_matches_full_graph() {
    let x = uniform(&[4, 3, 4, 4], 11);
    for kind in NormKind::ALL {
        for s in [spec(Scheme::Euler, 4), spec(Scheme::Rk2, 4), spec(Scheme::Rk4, 8)] {
            let (store, block) = standard_block(kind, s);
            let before = block.recompute_count();
            let (lc, gc, sc) = grads(&store, &block, &x, Backprop::Checkpointed);
            assert_eq!(block.recompute_count(), before + 1, "{kind} {s}");
            let (lf, gf, sf) = grads(&store, &block, &x, Backprop::FullGraph);
            assert_eq!(block.recompute_count(), before + 1);
            assert_eq!(lc.to_bits(), lf.to_bits());
            for (a, b) in gc.iter().zip(&gf) {
                assert!(a.max_abs_diff(b).unwrap() < 1e-12, "{kind} {s}");
            }
            // running statistics and power-iteration vectors updated once
            for id in sc.ids() {
                assert_eq!(sc.get(id), sf.get(id), "{kind} {s} {}", sc.name(id));
            }
        }
    }
}

#[test]
fn bn_running_stats_fold_once_per_evaluation() {
    let s = spec(Scheme::Euler, 2);
    let (store, block) = standard_block(NormKind::Bn, s);
    let x = uniform(&[4, 3, 4, 4], 12);
    let (_, _, after) = grads(&store, &block, &x, Backprop::Checkpointed);
    let mean_id = after.ids().find(|&id| after.name(id).ends_with("running_mean")).unwrap();
    // two RHS evaluations, each blending with momentum 0.1
    let initial = store.get(mean_id);
    assert_ne!(after.get(mean_id), initial);
    let g = Graph::no_grad();
    let mut ctx = Ctx::new(&g, &store, Mode::Train);
    ctx.solver_override = Some(spec(Scheme::Euler, 1));
    block.forward(&ctx, &g.leaf(x)).unwrap();
    let mut one = store.clone();
    ctx.into_updates().apply(&mut one).unwrap();
    let d1 = max_rel_diff(one.get(mean_id), initial);
    let d2 = max_rel_diff(after.get(mean_id), initial);
    assert!(d1 > 0.0 && d2 > d1);
}

#[test]
fn input_gradient_matches_finite_differences() {
    for kind in NormKind::ALL {
        let (store, block) = standard_block(kind, spec(Scheme::Rk2, 4));
        let x = uniform(&[3, 3, 3, 3], 13);
        let err = grad_check(
            |g, z| {
                let mut ctx = Ctx::new(g, &store, Mode::Train);
                ctx.update_state = false;
                let y = block.forward(&ctx, z)?;
                probe(g, &y, 14)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "{kind}: {err:e}");
    }
}

#[test]
fn wrong_channel_count_is_rejected() {
    let (store, block) = standard_block(NormKind::Nf, spec(Scheme::Euler, 2));
    let g = Graph::no_grad();
    let ctx = Ctx::new(&g, &store, Mode::Eval);
    let err = block.forward(&ctx, &g.leaf(Tensor::zeros([1, 4, 2, 2]))).unwrap_err();
    assert!(err.to_string().contains("channels"), "{err}");
}
