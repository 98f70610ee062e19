//! Independent oracles shared by the integration suites: central finite
//! differences, brute-force metric tallies and random model generators.
#![allow(dead_code)]

use camclass::model::{BlockConfig, HeadConfig, HeadKind, Model, ModelConfig};
use camclass::{Scalar, Tape, Tensor, TensorId};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Family image counts of the reference corpus, with their expected
/// (train, val, test) allocation.
pub const REFERENCE_FAMILIES: [(&str, usize, (usize, usize, usize)); 11] = [
    ("Andrenidae", 244, (170, 36, 38)),
    ("Apidae", 466, (326, 69, 71)),
    ("Bethylidae", 94, (65, 14, 15)),
    ("Braconidae", 648, (453, 97, 98)),
    ("Chrysididae", 244, (170, 36, 38)),
    ("Colletidae", 51, (35, 7, 9)),
    ("Halictidae", 75, (52, 11, 12)),
    ("Ichneumonidae", 786, (550, 117, 119)),
    ("Megachilidae", 298, (208, 44, 46)),
    ("Pompilidae", 190, (133, 28, 29)),
    ("Vespidae", 460, (322, 69, 69)),
];
pub const REFERENCE_TOTALS: (usize, usize, usize) = (2484, 528, 544);

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Values bounded away from zero so a small step never crosses the ReLU kink.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Distinct values on a 0.01 grid plus jitter, so pooling windows have a
/// clear winner.
fn distinct(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 + rng.random_range(0.0..0.002)).collect();
    data.shuffle(rng);
    Tensor::new(shape, data).unwrap()
}

#[derive(Clone, Debug)]
pub enum Op {
    Conv2d { stride: usize, padding: usize },
    Relu,
    MaxPool { window: usize, stride: usize },
    GlobalAvgPool,
    Affine,
    SoftmaxCrossEntropy { labels: Vec<usize> },
    Sum,
    Add,
    Mul,
    Scale(f64),
    Select(usize),
    Cnn { config: ModelConfig, labels: Vec<usize> },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Conv2d { .. } => "conv2d",
            Op::Relu => "relu",
            Op::MaxPool { .. } => "max_pool2d",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::Affine => "affine",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::Sum => "sum",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Select(_) => "select",
            Op::Cnn { .. } => "cnn_3_block",
        }
    }

    pub const KINDS: [&'static str; 12] = [
        "conv2d",
        "relu",
        "max_pool2d",
        "global_avg_pool",
        "affine",
        "softmax_cross_entropy",
        "sum",
        "add",
        "mul",
        "scale",
        "select",
        "cnn_3_block",
    ];
}

/// One gradient-check problem: an op, its inputs, and a fixed random
/// projection that turns a tensor output into a scalar.
#[derive(Clone, Debug)]
pub struct GradCase {
    pub op: Op,
    pub inputs: Vec<Tensor<f64>>,
    pub projection: Option<Tensor<f64>>,
}

fn random_cnn_config(rng: &mut ChaCha8Rng, blocks: usize, classes: usize) -> ModelConfig {
    loop {
        let blocks = (0..blocks)
            .map(|_| {
                let kernel = rng.random_range(1..=3);
                BlockConfig::new(
                    rng.random_range(1..=3),
                    kernel,
                    rng.random_range(1..=2),
                    rng.random_range(0..=kernel / 2),
                    rng.random_bool(0.5),
                )
            })
            .collect();
        let config = ModelConfig {
            input_size: rng.random_range(6..=12),
            input_channels: rng.random_range(1..=3),
            blocks,
            head: HeadConfig {
                kind: HeadKind::GapAffine,
                num_classes: classes,
            },
            seed: rng.random(),
        };
        if config.geometry().is_ok() {
            return config;
        }
    }
}

pub fn random_case(kind: &str, rng: &mut ChaCha8Rng) -> GradCase {
    let (n, c) = (rng.random_range(1..=2), rng.random_range(1..=3));
    let any_shape = |rng: &mut ChaCha8Rng| -> Vec<usize> {
        let rank = rng.random_range(1..=4);
        (0..rank).map(|_| rng.random_range(1..=4)).collect()
    };
    let (op, inputs) = match kind {
        "conv2d" => {
            let k = rng.random_range(1..=3);
            let stride = rng.random_range(1..=2);
            let padding = rng.random_range(0..=k / 2);
            let (h, w) = (rng.random_range(k..=6), rng.random_range(k..=6));
            let o = rng.random_range(1..=3);
            let x = random_tensor(rng, vec![n, c, h, w], -1.0, 1.0);
            let wt = random_tensor(rng, vec![o, c, k, k], -1.0, 1.0);
            let b = random_tensor(rng, vec![o], -1.0, 1.0);
            (Op::Conv2d { stride, padding }, vec![x, wt, b])
        }
        "relu" => {
            let s = any_shape(rng);
            (Op::Relu, vec![away_from_zero(rng, s)])
        }
        "max_pool2d" => {
            let window = rng.random_range(1..=3);
            let stride = rng.random_range(1..=3);
            let (h, w) = (rng.random_range(window..=7), rng.random_range(window..=7));
            (Op::MaxPool { window, stride }, vec![distinct(rng, vec![n, c, h, w])])
        }
        "global_avg_pool" => {
            let (h, w) = (rng.random_range(1..=5), rng.random_range(1..=5));
            (Op::GlobalAvgPool, vec![random_tensor(rng, vec![n, c, h, w], -1.0, 1.0)])
        }
        "affine" => {
            let (f, o) = (rng.random_range(1..=6), rng.random_range(1..=5));
            let x = random_tensor(rng, vec![n, f], -1.0, 1.0);
            let wt = random_tensor(rng, vec![o, f], -1.0, 1.0);
            let b = random_tensor(rng, vec![o], -1.0, 1.0);
            (Op::Affine, vec![x, wt, b])
        }
        "softmax_cross_entropy" => {
            let rows = rng.random_range(1..=4);
            let classes = rng.random_range(2..=6);
            let labels = (0..rows).map(|_| rng.random_range(0..classes)).collect();
            (
                Op::SoftmaxCrossEntropy { labels },
                vec![random_tensor(rng, vec![rows, classes], -3.0, 3.0)],
            )
        }
        "sum" => {
            let s = any_shape(rng);
            (Op::Sum, vec![random_tensor(rng, s, -1.0, 1.0)])
        }
        "add" | "mul" => {
            let s = any_shape(rng);
            let a = random_tensor(rng, s.clone(), -1.0, 1.0);
            let b = random_tensor(rng, s, -1.0, 1.0);
            (if kind == "add" { Op::Add } else { Op::Mul }, vec![a, b])
        }
        "scale" => {
            let s = any_shape(rng);
            let factor = rng.random_range(-2.0..2.0);
            (Op::Scale(factor), vec![random_tensor(rng, s, -1.0, 1.0)])
        }
        "select" => {
            let s = any_shape(rng);
            let t = random_tensor(rng, s, -1.0, 1.0);
            let index = rng.random_range(0..t.numel());
            (Op::Select(index), vec![t])
        }
        "cnn_3_block" => {
            let classes = rng.random_range(2..=4);
            let config = random_cnn_config(rng, 3, classes);
            let model = Model::<f64>::build(config.clone()).unwrap();
            let s = config.input_size;
            let mut inputs = vec![random_tensor(rng, vec![n, config.input_channels, s, s], 0.0, 1.0)];
            // fresh parameters so biases are not all zero
            for p in model.params() {
                inputs.push(random_tensor(rng, p.tensor.shape().to_vec(), -0.8, 0.8));
            }
            let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
            (Op::Cnn { config, labels }, inputs)
        }
        other => panic!("unknown op kind {other}"),
    };
    let mut case = GradCase {
        op,
        inputs,
        projection: None,
    };
    let out_shape = case.forward::<f64>(&case.inputs).0;
    if out_shape.iter().product::<usize>() > 1 {
        case.projection = Some(random_tensor(rng, out_shape, -1.0, 1.0));
    }
    case
}

impl GradCase {
    /// Records the op on `tape` and returns the id of its raw output.
    fn record<T: Scalar>(&self, tape: &mut Tape<T>, ids: &[TensorId]) -> TensorId {
        match &self.op {
            Op::Conv2d { stride, padding } => tape.conv2d(ids[0], ids[1], ids[2], *stride, *padding),
            Op::Relu => tape.relu(ids[0]),
            Op::MaxPool { window, stride } => tape.max_pool2d(ids[0], *window, *stride),
            Op::GlobalAvgPool => tape.global_avg_pool(ids[0]),
            Op::Affine => tape.affine(ids[0], ids[1], ids[2]),
            Op::SoftmaxCrossEntropy { labels } => tape.softmax_cross_entropy(ids[0], labels).map(|r| r.0),
            Op::Sum => tape.sum(ids[0]),
            Op::Add => tape.add(ids[0], ids[1]),
            Op::Mul => tape.mul(ids[0], ids[1]),
            Op::Scale(f) => tape.scale(ids[0], T::from_f64_lossy(*f)),
            Op::Select(i) => tape.select(ids[0], *i),
            Op::Cnn { config, labels } => {
                let model = Model::<T>::build(config.clone()).unwrap();
                let pass = model.forward(tape, ids[0], &ids[1..], &[]).unwrap();
                tape.softmax_cross_entropy(pass.logits, labels).map(|r| r.0)
            }
        }
        .unwrap()
    }

    fn objective<T: Scalar>(&self, tape: &mut Tape<T>, ids: &[TensorId]) -> TensorId {
        let out = self.record(tape, ids);
        match &self.projection {
            None => out,
            Some(p) => {
                let p = tape.constant(p.cast());
                let prod = tape.mul(out, p).unwrap();
                tape.sum(prod).unwrap()
            }
        }
    }

    /// Output shape of the raw op and value of the scalar objective.
    fn forward<T: Scalar>(&self, inputs: &[Tensor<f64>]) -> (Vec<usize>, f64) {
        let mut tape = Tape::<T>::new();
        let ids: Vec<_> = inputs.iter().map(|t| tape.constant(t.cast())).collect();
        let out = self.record(&mut tape, &ids);
        let shape = tape.value(out).unwrap().shape().to_vec();
        let value = match &self.projection {
            None => tape.value(out).unwrap().data()[0].as_f64(),
            Some(_) => {
                let obj = self.objective(&mut tape, &ids);
                tape.value(obj).unwrap().data()[0].as_f64()
            }
        };
        (shape, value)
    }

    /// Reverse-mode gradient of the objective with respect to every input,
    /// evaluated in precision `T`.
    pub fn analytic<T: Scalar>(&self) -> Vec<Vec<f64>> {
        let mut tape = Tape::<T>::new();
        let ids: Vec<_> = self.inputs.iter().map(|t| tape.variable(t.cast())).collect();
        let obj = self.objective(&mut tape, &ids);
        tape.backward(obj).unwrap();
        ids.iter()
            .map(|&id| tape.grad(id).unwrap().unwrap().iter().map(|v| v.as_f64()).collect())
            .collect()
    }

    /// Central differences in double precision at the point the `T` analytic
    /// gradient sees (inputs rounded through `T` first).
    pub fn numeric<T: Scalar>(&self, step: f64) -> Vec<Vec<f64>> {
        let base: Vec<Tensor<f64>> = self.inputs.iter().map(|t| t.cast::<T>().cast()).collect();
        let mut out = Vec::with_capacity(base.len());
        for i in 0..base.len() {
            let mut grad = Vec::with_capacity(base[i].numel());
            for j in 0..base[i].numel() {
                let mut plus = base.clone();
                plus[i].data_mut()[j] += step;
                let mut minus = base.clone();
                minus[i].data_mut()[j] -= step;
                let f = |inputs: &[Tensor<f64>]| self.forward::<f64>(inputs).1;
                grad.push((f(&plus) - f(&minus)) / (2.0 * step));
            }
            out.push(grad);
        }
        out
    }

    /// Largest absolute gradient error over all inputs, relative to the
    /// largest oracle gradient magnitude.
    pub fn relative_error<T: Scalar>(&self, step: f64) -> f64 {
        let a = self.analytic::<T>();
        let n = self.numeric::<T>(step);
        let mut max_err: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for (ga, gn) in a.iter().zip(&n) {
            for (&x, &y) in ga.iter().zip(gn) {
                max_err = max_err.max((x - y).abs());
                scale = scale.max(y.abs());
            }
        }
        max_err / scale.max(1e-8)
    }
}

/// Per-class one-vs-rest (tp, fp, fn, tn) by scanning every sample.
pub fn tally(truth: &[usize], predicted: &[usize], classes: usize) -> Vec<(u64, u64, u64, u64)> {
    (0..classes)
        .map(|c| {
            let mut t = (0, 0, 0, 0);
            for (&y, &p) in truth.iter().zip(predicted) {
                match (y == c, p == c) {
                    (true, true) => t.0 += 1,
                    (false, true) => t.1 += 1,
                    (true, false) => t.2 += 1,
                    (false, false) => t.3 += 1,
                }
            }
            t
        })
        .collect()
}

pub fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Random GAP-head model over a small input, with a random input image.
pub fn random_cam_model<T: Scalar>(rng: &mut ChaCha8Rng) -> (Model<T>, Tensor<T>) {
    let blocks = rng.random_range(1..=3);
    let classes = rng.random_range(2..=6);
    let config = loop {
        let blocks = (0..blocks)
            .map(|_| {
                let kernel: usize = *[1, 3, 5].choose(rng).unwrap();
                BlockConfig::new(rng.random_range(1..=8), kernel, 1, kernel / 2, rng.random_bool(0.5))
            })
            .collect();
        let config = ModelConfig {
            input_size: rng.random_range(8..=20),
            input_channels: rng.random_range(1..=3),
            blocks,
            head: HeadConfig {
                kind: HeadKind::GapAffine,
                num_classes: classes,
            },
            seed: rng.random(),
        };
        if config.geometry().is_ok() {
            break config;
        }
    };
    let mut model = Model::<T>::build(config.clone()).unwrap();
    // non-zero head bias so the identity is not trivially s_c = sum
    let n = model.params().len();
    for v in model.params_mut()[n - 1].tensor.data_mut() {
        *v = T::from_f64_lossy(rng.random_range(-1.0..1.0));
    }
    let s = config.input_size;
    let data = (0..config.input_channels * s * s)
        .map(|_| T::from_f64_lossy(rng.random_range(0.0..1.0)))
        .collect();
    let input = Tensor::new(vec![1, config.input_channels, s, s], data).unwrap();
    (model, input)
}
