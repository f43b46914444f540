//! Central finite differences in f64 against the tape gradients.
//!
//! The analytic pass records every non-smooth decision (relu gates, abs
//! signs, modulation statistics and masks, CAM argmax and gates); perturbed
//! passes replay them so that both sides differentiate the same branch.

use amr_core::modulation::{ModulationFn, ThresholdLevel};
use amr_core::network::{loss_total, AmrModel, ModelConfig};
use amr_core::numcore::{Graph, PoolMode, Tensor, Var};
use amr_core::Result;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-3;
/// Denominator floor so that gradients that vanish on both sides compare as
/// absolute rather than relative differences.
pub const FLOOR: f64 = 1e-6;

/// Builds a scalar loss from the inputs and returns it together with the
/// variables whose gradients correspond to those inputs.
pub type Builder<'a> = dyn Fn(&mut Graph<f64>, &[Tensor<f64>]) -> Result<(Var, Vec<Var>)> + 'a;

#[derive(Clone, Copy, Debug, Default)]
pub struct Report {
    pub checked: usize,
    pub max_rel: f64,
}

impl Report {
    pub fn merge(&mut self, other: Report) {
        self.checked += other.checked;
        self.max_rel = self.max_rel.max(other.max_rel);
    }
}

pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

/// Compares up to `coords` sampled coordinates of every input.
pub fn check(inputs: &[Tensor<f64>], build: &Builder, coords: usize, rng: &mut ChaCha8Rng) -> Result<Report> {
    let mut g = Graph::recording();
    let (loss, vars) = build(&mut g, inputs)?;
    let decisions = g.decisions();
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::replaying(decisions.clone());
        let (loss, _) = build(&mut g, perturbed)?;
        Ok(g.value(loss).item())
    };

    let mut report = Report::default();
    for (i, t) in inputs.iter().enumerate() {
        let picks: Vec<usize> = if t.numel() <= coords {
            (0..t.numel()).collect()
        } else {
            sample(rng, t.numel(), coords).into_vec()
        };
        for j in picks {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= STEP;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * STEP);
            let err = rel_error(analytic[i][j], numeric);
            report.checked += 1;
            report.max_rel = report.max_rel.max(err);
        }
    }
    Ok(report)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn leaves(g: &mut Graph<f64>, inputs: &[Tensor<f64>]) -> Vec<Var> {
    inputs
        .iter()
        .map(|t| g.leaf(t.clone().with_requires_grad(true)))
        .collect()
}

/// Contracts a tensor output with fixed random weights into a scalar.
fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random_tensor(&mut rng, g.shape(out));
    let wv = g.constant(w);
    let prod = g.mul(out, wv)?;
    g.sum(prod)
}

/// An operation under test: given a seed, the random inputs and a builder.
pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub build: Box<Builder<'static>>,
}

fn unary_case(
    name: &'static str,
    input: Tensor<f64>,
    seed: u64,
    f: impl Fn(&mut Graph<f64>, Var) -> Result<Var> + 'static,
) -> Case {
    Case {
        name,
        inputs: vec![input],
        build: Box::new(move |g, xs| {
            let v = leaves(g, xs);
            let y = f(g, v[0])?;
            Ok((project(g, y, seed)?, v))
        }),
    }
}

fn dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// Every differentiable graph operation on a random instance.
pub fn op_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut cases = Vec::new();

    let (b, ci, co) = (dims(r, 1, 2), dims(r, 1, 3), dims(r, 1, 3));
    let k = if r.random_bool(0.5) { 3 } else { 1 };
    let (h, w) = (dims(r, 3, 7), dims(r, 3, 7));
    let stride = dims(r, 1, 2);
    let pad = dims(r, 0, 1);
    let x = random_tensor(r, &[b, ci, h, w]);
    let kern = random_tensor(r, &[co, ci, k, k]);
    cases.push(Case {
        name: "conv2d",
        inputs: vec![x, kern],
        build: Box::new(move |g, xs| {
            let v = leaves(g, xs);
            let y = g.conv2d(v[0], v[1], stride, pad)?;
            Ok((project(g, y, seed)?, v))
        }),
    });

    let shape = [dims(r, 1, 2), dims(r, 1, 3), dims(r, 1, 7), dims(r, 1, 7)];
    cases.push(unary_case("downsample2", random_tensor(r, &shape), seed, |g, x| g.downsample2(x)));
    for (name, mode) in [
        ("spatial_avg", PoolMode::SpatialAvg),
        ("channel_avg", PoolMode::ChannelAvg),
        ("global_avg", PoolMode::GlobalAvg),
    ] {
        let shape = [dims(r, 1, 2), dims(r, 1, 4), dims(r, 1, 5), dims(r, 1, 5)];
        cases.push(unary_case(name, random_tensor(r, &shape), seed, move |g, x| g.pool(x, mode)));
    }

    let (b, c, n) = (dims(r, 1, 3), dims(r, 1, 6), dims(r, 1, 4));
    let x = random_tensor(r, &[b, c]);
    let wt = random_tensor(r, &[n, c]);
    cases.push(Case {
        name: "linear",
        inputs: vec![x, wt],
        build: Box::new(move |g, xs| {
            let v = leaves(g, xs);
            let y = g.linear(v[0], v[1])?;
            Ok((project(g, y, seed)?, v))
        }),
    });

    for (name, op) in [
        ("mul", amr_core::numcore::BinaryOp::Mul),
        ("add", amr_core::numcore::BinaryOp::Add),
        ("sub", amr_core::numcore::BinaryOp::Sub),
    ] {
        let full = [dims(r, 1, 2), dims(r, 1, 3), dims(r, 1, 4), dims(r, 1, 4)];
        let bshape: Vec<usize> = full.iter().map(|&d| if r.random_bool(0.4) { 1 } else { d }).collect();
        let (lhs, rhs) = if r.random_bool(0.5) {
            (random_tensor(r, &full), random_tensor(r, &bshape))
        } else {
            (random_tensor(r, &bshape), random_tensor(r, &full))
        };
        cases.push(Case {
            name,
            inputs: vec![lhs, rhs],
            build: Box::new(move |g, xs| {
                let v = leaves(g, xs);
                let y = g.binary(v[0], v[1], op)?;
                Ok((project(g, y, seed)?, v))
            }),
        });
    }

    let shape = [dims(r, 1, 3), dims(r, 1, 5)];
    cases.push(unary_case("relu", random_tensor(r, &shape), seed, |g, x| g.relu(x)));
    cases.push(unary_case("sigmoid", random_tensor(r, &shape), seed, |g, x| g.sigmoid(x)));
    cases.push(unary_case("abs", random_tensor(r, &shape), seed, |g, x| g.abs(x)));
    let factor = r.random_range(-2.0..2.0);
    cases.push(unary_case("scale", random_tensor(r, &shape), seed, move |g, x| g.scale(x, factor)));
    cases.push(unary_case("sum", random_tensor(r, &shape), seed, |g, x| g.sum(x)));
    cases.push(unary_case("mean", random_tensor(r, &shape), seed, |g, x| g.mean(x)));
    let flat = shape[0] * shape[1];
    cases.push(unary_case("reshape", random_tensor(r, &shape), seed, move |g, x| {
        g.reshape(x, vec![flat, 1])
    }));

    let kc = [1, 3, 5][dims(r, 0, 2)];
    let (b, c) = (dims(r, 1, 3), dims(r, kc, 8));
    let x = random_tensor(r, &[b, c, 1, 1]);
    let kern = random_tensor(r, &[kc]);
    cases.push(Case {
        name: "channel_conv",
        inputs: vec![x, kern],
        build: Box::new(move |g, xs| {
            let v = leaves(g, xs);
            let y = g.channel_conv(v[0], v[1])?;
            Ok((project(g, y, seed)?, v))
        }),
    });

    for (name, f) in [
        ("modulate_gaussian", ModulationFn::gaussian()),
        ("modulate_threshold", ModulationFn::threshold(ThresholdLevel::MapMean)),
        ("modulate_threshold_fixed", ModulationFn::threshold(ThresholdLevel::Fixed(0.1))),
        ("modulate_identity", ModulationFn::identity()),
    ] {
        let shape = [dims(r, 1, 3), dims(r, 1, 4), dims(r, 1, 4), dims(r, 1, 4)];
        let x = random_tensor(r, &shape);
        cases.push(unary_case(name, x, seed, move |g, x| g.modulate(x, &f)));
    }

    let (b, n, h, w) = (dims(r, 1, 2), dims(r, 1, 4), dims(r, 1, 5), dims(r, 1, 5));
    let labels: Vec<bool> = (0..b * n).map(|_| r.random_bool(0.6)).collect();
    cases.push(unary_case("normalize_cam", random_tensor(r, &[b, n, h, w]), seed, move |g, x| {
        g.normalize_cam(x, &labels)
    }));

    let (b, n) = (dims(r, 1, 4), dims(r, 1, 5));
    let labels: Vec<f32> = (0..b * n).map(|_| if r.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
    let logits = Tensor::from_fn(vec![b, n], |_| r.random_range(-4.0..4.0));
    cases.push(Case {
        name: "soft_margin_loss",
        inputs: vec![logits],
        build: Box::new(move |g, xs| {
            let v = leaves(g, xs);
            Ok((g.soft_margin_loss(v[0], &labels)?, v))
        }),
    });
    cases
}

/// The joint objective of a reduced-width model on random images, checked
/// with respect to every parameter tensor.
pub fn full_objective_case(seed: u64) -> Result<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0F0F);
    let n = 3;
    let mut config = ModelConfig::new(n, 32);
    config.widths = [4, 6, 8, 8];
    let model = AmrModel::<f64>::new(config, seed)?;
    let batch = 2;
    let images = Tensor::from_fn(vec![batch, 3, 32, 32], |_| rng.random_range(0.0..1.0));
    let mut labels = vec![0.0f32; batch * n];
    for b in 0..batch {
        let first = rng.random_range(0..n);
        labels[b * n + first] = 1.0;
        for c in 0..n {
            if rng.random_bool(0.3) {
                labels[b * n + c] = 1.0;
            }
        }
    }
    let f = if seed % 4 == 3 {
        ModulationFn::threshold(ThresholdLevel::MapMean)
    } else {
        ModulationFn::gaussian()
    };
    let inputs: Vec<Tensor<f64>> = model.named_params().into_iter().map(|(_, t)| t.clone()).collect();
    Ok(Case {
        name: "loss_all",
        inputs,
        build: Box::new(move |g, params| {
            let mut m = model.clone();
            for (slot, p) in m.params_mut().into_iter().zip(params) {
                *slot = p.clone();
            }
            let x = g.constant(images.clone());
            let out = m.forward(g, x, &f)?;
            let losses = loss_total(g, &out, &labels, true)?;
            Ok((losses.all, out.params.clone()))
        }),
    })
}
