use odenorm::gradcheck::{grad_check, grad_check_many};
use odenorm::{Graph, Result, Tensor, Var};
use proptest::prelude::*;

#[derive(Debug, Clone)]
enum Step {
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Axpy(usize, f64, usize),
    MatMul(usize),
    Reshape(usize),
}

fn step() -> impl Strategy<Value = Step> {
    let i = 0usize..16;
    let a = -2.0f64..2.0;
    prop_oneof![
        (i.clone(), i.clone()).prop_map(|(x, y)| Step::Add(x, y)),
        (i.clone(), i.clone()).prop_map(|(x, y)| Step::Sub(x, y)),
        (i.clone(), i.clone()).prop_map(|(x, y)| Step::Mul(x, y)),
        (i.clone(), a.clone()).prop_map(|(x, c)| Step::Scale(x, c)),
        (i.clone(), a, i.clone()).prop_map(|(x, c, y)| Step::Axpy(x, c, y)),
        i.clone().prop_map(Step::MatMul),
        i.prop_map(Step::Reshape),
    ]
}

/// Runs a straight-line program over three `[2,3]` inputs and a `[3,3]`
/// matrix, reducing the last two values to a scalar.
fn run(program: &[Step], g: &Graph, inputs: &[Var]) -> Result<Var> {
    let m = &inputs[3];
    let mut stack: Vec<Var> = inputs[..3].to_vec();
    let pick = |stack: &Vec<Var>, k: usize| stack[k % stack.len()].clone();
    for s in program {
        let v = match *s {
            Step::Add(a, b) => g.add(&pick(&stack, a), &pick(&stack, b))?,
            Step::Sub(a, b) => g.sub(&pick(&stack, a), &pick(&stack, b))?,
            Step::Mul(a, b) => g.mul(&pick(&stack, a), &pick(&stack, b))?,
            Step::Scale(a, c) => g.scale(&pick(&stack, a), c)?,
            Step::Axpy(a, c, b) => g.axpy(&pick(&stack, a), c, &pick(&stack, b))?,
            Step::MatMul(a) => g.matmul(&pick(&stack, a), m)?,
            Step::Reshape(a) => {
                let flat = g.reshape(&pick(&stack, a), [6])?;
                g.reshape(&flat, [2, 3])?
            }
        };
        stack.push(v);
    }
    let n = stack.len();
    let prod = g.mul(&stack[n - 1], &stack[n - 2])?;
    g.sum(&prod)
}

fn tensor(shape: [usize; 2]) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-1.0f64..1.0, shape[0] * shape[1]).prop_map(move |d| Tensor::new(shape, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn random_compositions_match_finite_differences(
        program in prop::collection::vec(step(), 1..8),
        a in tensor([2, 3]),
        b in tensor([2, 3]),
        c in tensor([2, 3]),
        m in tensor([3, 3]),
    ) {
        let err = grad_check_many(|g, xs| run(&program, g, xs), &[a, b, c, m], 1e-6).unwrap();
        prop_assert!(err < 1e-5, "max relative error {err:e}");
    }

    #[test]
    fn backward_is_deterministic(program in prop::collection::vec(step(), 1..8), a in tensor([2, 3]), m in tensor([3, 3])) {
        let grads = || {
            let g = Graph::new();
            let xs: Vec<Var> = [&a, &a, &a, &m].iter().map(|t| g.leaf((*t).clone())).collect();
            let out = run(&program, &g, &xs).unwrap();
            let gr = g.backward(&out, &Tensor::scalar(1.0)).unwrap();
            xs.iter().map(|x| gr.wrt(x)).collect::<Vec<_>>()
        };
        let (first, second) = (grads(), grads());
        for (p, q) in first.iter().zip(&second) {
            prop_assert_eq!(p.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            q.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }
}

#[test]
fn fan_out_accumulates() {
    // f(x) = Σ x² + Σ 3x, so ∇f = 2x + 3
    let x = Tensor::from_vec(vec![0.5, -1.25, 2.0]);
    let g = Graph::new();
    let xv = g.leaf(x.clone());
    let sq = g.mul(&xv, &xv).unwrap();
    let lin = g.scale(&xv, 3.0).unwrap();
    let out = g.add(&g.sum(&sq).unwrap(), &g.sum(&lin).unwrap()).unwrap();
    let grad = g.backward(&out, &Tensor::scalar(1.0)).unwrap().wrt(&xv);
    assert_eq!(grad.data(), &[4.0, 0.5, 7.0]);
}

#[test]
fn relu_away_from_kink() {
    let x = Tensor::from_vec(vec![0.7, -0.3, 1.1, -2.0, 0.05]);
    let err = grad_check(
        |g, x| {
            let r = g.relu(x)?;
            let sq = g.mul(&r, &r)?;
            g.sum(&sq)
        },
        &x,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-8, "{err:e}");
}

#[test]
fn unreached_leaf_gets_zeros() {
    let g = Graph::new();
    let x = g.leaf(Tensor::from_vec(vec![1.0, 2.0]));
    let unused = g.leaf(Tensor::zeros([3]));
    let out = g.sum(&x).unwrap();
    let grads = g.backward(&out, &Tensor::scalar(1.0)).unwrap();
    assert_eq!(grads.wrt(&unused), Tensor::zeros([3]));
    assert_eq!(grads.wrt(&x).data(), &[1.0, 1.0]);
}

#[test]
fn seed_shape_is_checked() {
    let g = Graph::new();
    let x = g.leaf(Tensor::from_vec(vec![1.0, 2.0]));
    let y = g.scale(&x, 2.0).unwrap();
    assert!(g.backward(&y, &Tensor::scalar(1.0)).is_err());
    assert!(g.add(&x, &g.leaf(Tensor::zeros([3]))).is_err());
}

#[test]
fn no_grad_records_nothing() {
    let g = Graph::no_grad();
    let x = g.leaf(Tensor::from_vec(vec![1.0, 2.0]));
    let y = g.mul(&x, &x).unwrap();
    assert_eq!(y.value().data(), &[1.0, 4.0]);
    assert!(g.is_empty());
    assert!(!y.is_tracked());
}
