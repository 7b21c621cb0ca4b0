#![allow(dead_code)]

use odenorm::{Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform `[-1, 1)` tensor from a fixed seed.
pub fn uniform(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// `Σ y ⊙ r` for a fixed random `r`, a scalar with a generic gradient.
pub fn probe(g: &Graph, y: &Var, seed: u64) -> Result<Var> {
    let r = g.constant(uniform(y.shape(), seed));
    let p = g.mul(y, &r)?;
    g.sum(&p)
}

pub fn max_rel_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Max over every trainable coordinate of `|analytic − central| /
/// max(1, |central|)` for the model's mean cross-entropy in its current mode.
pub fn model_grad_error(model: &odenorm::Model, x: &Tensor, labels: &[usize], step: f64) -> f64 {
    let analytic = model.loss_and_grads(x, labels).unwrap().grads;
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for (id, grad) in analytic {
        for i in 0..grad.numel() {
            let x0 = model.store().get(id).data()[i];
            probe.store_mut().get_mut(id).data_mut()[i] = x0 + step;
            let fp = probe.loss(x, labels).unwrap();
            probe.store_mut().get_mut(id).data_mut()[i] = x0 - step;
            let fm = probe.loss(x, labels).unwrap();
            probe.store_mut().get_mut(id).data_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * step);
            worst = worst.max((grad.data()[i] - numeric).abs() / numeric.abs().max(1.0));
        }
    }
    worst
}

/// Ten-class "rounding" classifier on constant images whose channel 0 holds
/// `v`: the stem passes `v + 0.5` through, a frozen linear ODE block
/// `f(z) = a z` flows it, and the head predicts `round(v)` when its
/// `gain` undoes the exact flow, i.e. `gain = e^{-a}`.
pub fn rounding_model(a: f64, gain: f64, train_spec: odenorm::SolverSpec) -> odenorm::Model {
    use odenorm::model::Layer;
    use odenorm::nn::{NormConv, TensorStore};
    use odenorm::{Arch, ModelConfig, NormKind, NormSchedule, OdeBlock};

    let mut store = TensorStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let stem = NormConv::register(&mut store, &mut rng, "stem", NormKind::Nf, 3, 1, 3, 1, 1, true).unwrap();
    let mut w = Tensor::zeros([1, 3, 3, 3]);
    w.data_mut()[4] = 1.0;
    store.set(stem.weight_id(), w).unwrap();
    store.set(stem.bias_id().unwrap(), Tensor::from_vec(vec![0.5])).unwrap();
    let ode = OdeBlock::linear(&mut store, "ode", &Tensor::new([1, 1], vec![a]).unwrap(), train_spec).unwrap();
    // logit_j = 2j·(v + 0.5) − j − j² = 2jv − j², maximal at j = round(v)
    let weight = store.param("fc.weight", Tensor::new([10, 1], (0..10).map(|j| 2.0 * j as f64 * gain).collect()).unwrap());
    let bias = store.param("fc.bias", Tensor::from_vec((0..10).map(|j| -(j as f64) - (j * j) as f64).collect()));
    let config = ModelConfig {
        base_channels: 1,
        time_channel: false,
        train_spec,
        ..ModelConfig::new(Arch::OdeNet4, NormSchedule::uniform(NormKind::Nf))
    };
    let layers = vec![Layer::Stem(stem), Layer::Relu, Layer::Ode(ode), Layer::AvgPool, Layer::Fc { weight, bias }];
    let mut model = odenorm::Model::from_parts(config, store, layers);
    model.set_mode(odenorm::Mode::Eval);
    model
}

/// Constant 8×8 images with channel 0 equal to `class + offset`.
pub fn rounding_data(offsets: &[f64]) -> odenorm::Dataset {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for class in 0..10 {
        for &d in offsets {
            data.extend(std::iter::repeat(class as f64 + d).take(64));
            data.extend(std::iter::repeat(0.0).take(128));
            labels.push(class);
        }
    }
    let images = Tensor::new([labels.len(), 3, 8, 8], data).unwrap();
    odenorm::Dataset::new(images, labels, 10, odenorm::Split::Test).unwrap()
}
