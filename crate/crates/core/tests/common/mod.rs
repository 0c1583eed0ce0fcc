//! Shared oracles for the integration tests.

#![allow(dead_code)]

use lungvol::drr::View;
use lungvol::nnreg::{
    build_conv_block_cnn, build_dual_cnn, build_six_layer_cnn, ArchitectureRegistry, Layer, LayerSpec, Model,
    ModelInput, Param, Tensor4,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Something with inputs, parameters and an analytic backward pass.
pub trait Differentiable {
    fn forward(&mut self, inputs: &[Tensor4<f64>]) -> Tensor4<f64>;
    /// Input gradients for `grad` at the output of the last forward.
    fn backward(&mut self, grad: &Tensor4<f64>) -> Vec<Tensor4<f64>>;
    fn params(&mut self) -> Vec<(String, &mut Param<f64>)>;
}

pub struct LayerUnderTest(pub Layer<f64>);

impl Differentiable for LayerUnderTest {
    fn forward(&mut self, inputs: &[Tensor4<f64>]) -> Tensor4<f64> {
        self.0.forward(&inputs[0], true).expect("layer forward")
    }

    fn backward(&mut self, grad: &Tensor4<f64>) -> Vec<Tensor4<f64>> {
        vec![self.0.backward(grad)]
    }

    fn params(&mut self) -> Vec<(String, &mut Param<f64>)> {
        self.0.params_mut().into_iter().map(|(n, p)| (n.to_string(), p)).collect()
    }
}

pub struct ModelUnderTest(pub Model<f64>);

impl Differentiable for ModelUnderTest {
    fn forward(&mut self, inputs: &[Tensor4<f64>]) -> Tensor4<f64> {
        let input = match inputs {
            [x] => ModelInput::Single(x.clone()),
            [f, l] => ModelInput::Dual {
                frontal: f.clone(),
                lateral: l.clone(),
            },
            _ => panic!("one or two inputs"),
        };
        self.0.forward(&input, true).expect("model forward")
    }

    fn backward(&mut self, grad: &Tensor4<f64>) -> Vec<Tensor4<f64>> {
        self.0.backward(grad)
    }

    fn params(&mut self) -> Vec<(String, &mut Param<f64>)> {
        self.0.params_mut()
    }
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

pub fn random_tensor(shape: [usize; 4], rng: &mut impl Rng) -> Tensor4<f64> {
    Tensor4::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn sample_indices(len: usize, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    if len <= k {
        (0..len).collect()
    } else {
        (0..k).map(|_| rng.gen_range(0..len)).collect()
    }
}

/// Central finite differences of `L = sum(r * y)` against the analytic
/// gradients, at up to `per_tensor` sampled coordinates of every input and
/// parameter tensor.
pub fn check(sys: &mut dyn Differentiable, inputs: &[Tensor4<f64>], per_tensor: usize, seed: u64) -> GradReport {
    const H: f64 = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = sys.forward(inputs);
    let r = random_tensor(y.shape(), &mut rng);
    for (_, p) in sys.params() {
        p.grad.iter_mut().for_each(|g| *g = 0.0);
    }
    let dx = sys.backward(&r);
    let analytic_params: Vec<(String, Vec<f64>)> =
        sys.params().into_iter().map(|(n, p)| (n, p.grad.clone())).collect();
    let loss = |sys: &mut dyn Differentiable, inputs: &[Tensor4<f64>]| -> f64 {
        let y = sys.forward(inputs);
        y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
    };

    let mut report = GradReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: String::new(),
    };
    let mut record = |name: String, a: f64, n: f64| {
        let e = rel_err(a, n);
        report.checked += 1;
        if e > report.max_rel_err {
            report.max_rel_err = e;
            report.worst = format!("{name}: analytic {a:e} numeric {n:e}");
        }
    };

    for (k, x) in inputs.iter().enumerate() {
        for i in sample_indices(x.len(), per_tensor, &mut rng) {
            let mut probe = inputs.to_vec();
            probe[k].data_mut()[i] = x.data()[i] + H;
            let up = loss(sys, &probe);
            probe[k].data_mut()[i] = x.data()[i] - H;
            let down = loss(sys, &probe);
            record(format!("input{k}[{i}]"), dx[k].data()[i], (up - down) / (2.0 * H));
        }
    }
    for (t, (name, grad)) in analytic_params.iter().enumerate() {
        for i in sample_indices(grad.len(), per_tensor, &mut rng) {
            let orig = sys.params()[t].1.value[i];
            sys.params()[t].1.value[i] = orig + H;
            let up = loss(sys, inputs);
            sys.params()[t].1.value[i] = orig - H;
            let down = loss(sys, inputs);
            sys.params()[t].1.value[i] = orig;
            record(format!("{name}[{i}]"), grad[i], (up - down) / (2.0 * H));
        }
    }
    report
}

/// Random layer instance and a compatible input shape.
pub fn random_layer_case(kind: &str, rng: &mut impl Rng) -> (LayerSpec, [usize; 4]) {
    let b = rng.gen_range(1..=2);
    let c = rng.gen_range(1..=4);
    let h = 2 * rng.gen_range(1..=4);
    let w = 2 * rng.gen_range(1..=4);
    match kind {
        "conv2d" => (
            LayerSpec::Conv2d {
                in_ch: c,
                out_ch: rng.gen_range(1..=4),
                kernel: 3,
            },
            [b, c, h, w],
        ),
        "relu" => (LayerSpec::Relu, [b, c, h, w]),
        "batchnorm2d" => (LayerSpec::BatchNorm2d { ch: c }, [b + 1, c, h, w]),
        "maxpool2d" => (LayerSpec::MaxPool2d, [b, c, h, w]),
        "global_avg_pool" => (LayerSpec::GlobalAvgPool, [b, c, h, w]),
        "flatten" => (LayerSpec::Flatten, [b, c, h, w]),
        "linear" => {
            let f = c * h;
            (
                LayerSpec::Linear {
                    in_features: f,
                    out_features: rng.gen_range(1..=6),
                },
                [b, f, 1, 1],
            )
        }
        other => panic!("unknown layer kind {other}"),
    }
}

pub const LAYER_KINDS: [&str; 7] = [
    "conv2d",
    "relu",
    "batchnorm2d",
    "maxpool2d",
    "global_avg_pool",
    "flatten",
    "linear",
];

/// Worst relative error over `cases` random shapes/seeds of one layer kind.
pub fn check_layer_kind(kind: &str, cases: u64) -> GradReport {
    let mut worst = GradReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: String::new(),
    };
    for seed in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + 1);
        let (spec, shape) = random_layer_case(kind, &mut rng);
        let layer: Layer<f64> = spec.instantiate(&mut rng);
        let mut sys = LayerUnderTest(layer);
        let x = random_tensor(shape, &mut rng);
        let r = check(&mut sys, &[x], 64, seed);
        worst.checked += r.checked;
        if r.max_rel_err >= worst.max_rel_err {
            worst.max_rel_err = r.max_rel_err;
            worst.worst = format!("{kind} {shape:?} seed {seed}: {}", r.worst);
        }
    }
    worst
}

/// Two-block reduced dual model on 8x8 inputs.
pub fn check_reduced_dual(seed: u64) -> GradReport {
    let single = build_conv_block_cnn(View::Frontal, 8, 2, 3, vec![6, 4]).unwrap();
    let spec = build_dual_cnn(&single).unwrap();
    let model = Model::<f64>::new(&spec, &ArchitectureRegistry::default(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xf = random_tensor([3, 1, 8, 8], &mut rng);
    let xl = random_tensor([3, 1, 8, 8], &mut rng);
    check(&mut ModelUnderTest(model), &[xf, xl], 24, seed)
}

/// Full six-block single-view model on 64x64 inputs.
pub fn check_six_layer(view: View, seed: u64) -> GradReport {
    let spec = build_six_layer_cnn(view, 64).unwrap();
    let model = Model::<f64>::new(&spec, &ArchitectureRegistry::default(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_tensor([4, 1, 64, 64], &mut rng);
    check(&mut ModelUnderTest(model), &[x], 4, seed)
}

/// Full dual model (two six-block branches) on 64x64 inputs.
pub fn check_six_layer_dual(seed: u64) -> GradReport {
    let spec = build_dual_cnn(&build_six_layer_cnn(View::Frontal, 64).unwrap()).unwrap();
    let model = Model::<f64>::new(&spec, &ArchitectureRegistry::default(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xf = random_tensor([4, 1, 64, 64], &mut rng);
    let xl = random_tensor([4, 1, 64, 64], &mut rng);
    check(&mut ModelUnderTest(model), &[xf, xl], 3, seed)
}
