#![allow(dead_code)]

use dcn::error::Result;
use dcn::network::{pair_loss, DcnConfig, DcnParams, PairBatch};
use dcn::objectives::{LossWeights, Regularizer};
use dcn::params::Parameters;
use dcn::synth::{derive_rng, generate_identity, render_sample, RenderOptions, RenderedSample, Template};
use dcn::detect::{BackboneConfig, DetectConfig};
use dcn::tensor::{grad_check, Graph, Tensor, Var};
use rand::Rng;

pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_EPS: f64 = 1e-5;

pub fn uniform(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = derive_rng(seed, &[]);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero and from each other, for kinked ops.
pub fn spread(shape: &[usize], seed: u64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut rng = derive_rng(seed, &[]);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape, order.iter().map(|&r| (r as f64 - n as f64 / 2.0 + 0.5) * 0.1).collect()).unwrap()
}

type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// One case per differentiable op: name, inputs, computation.
pub fn op_cases() -> Vec<(&'static str, Vec<Tensor<f64>>, Build)> {
    vec![
        (
            "conv2d stride 1",
            vec![uniform(&[2, 5, 5, 2], 1), uniform(&[3, 3, 2, 3], 2)],
            Box::new(|g, v| g.conv2d(v[0], v[1], 1, 0)),
        ),
        (
            "conv2d stride 2 pad 1",
            vec![uniform(&[1, 6, 6, 3], 3), uniform(&[3, 3, 3, 2], 4)],
            Box::new(|g, v| g.conv2d(v[0], v[1], 2, 1)),
        ),
        (
            "conv2d 7x7 stride 2 pad 3",
            vec![uniform(&[1, 8, 8, 3], 5), uniform(&[7, 7, 3, 2], 6)],
            Box::new(|g, v| g.conv2d(v[0], v[1], 2, 3)),
        ),
        (
            "bias_add",
            vec![uniform(&[2, 3, 3, 4], 7), uniform(&[4], 8)],
            Box::new(|g, v| g.bias_add(v[0], v[1])),
        ),
        ("relu", vec![spread(&[2, 3, 3, 2], 9)], Box::new(|g, v| Ok(g.relu(v[0])))),
        (
            "max_pool2d",
            vec![spread(&[1, 6, 6, 2], 10)],
            Box::new(|g, v| g.max_pool2d(v[0], 3, 2, 1)),
        ),
        ("max_reduce", vec![spread(&[2, 3, 3, 4], 11)], Box::new(|g, v| g.max_reduce(v[0], 3))),
        (
            "softmax_over cells",
            vec![uniform(&[2, 3, 3, 3], 12)],
            Box::new(|g, v| g.softmax_over(v[0], &[1, 2])),
        ),
        (
            "softmax_over images and cells",
            vec![uniform(&[3, 2, 2, 3], 13)],
            Box::new(|g, v| g.softmax_over(v[0], &[0, 1, 2])),
        ),
        ("l2_normalize", vec![uniform(&[4, 5], 14)], Box::new(|g, v| Ok(g.l2_normalize(v[0])))),
        (
            "fully_connected",
            vec![uniform(&[3, 4], 15), uniform(&[4, 5], 16), uniform(&[5], 17)],
            Box::new(|g, v| g.fully_connected(v[0], v[1], Some(v[2]))),
        ),
        (
            "weighted_sum_pool",
            vec![uniform(&[2, 3, 3, 4], 18), uniform(&[2, 3, 3, 3], 19)],
            Box::new(|g, v| g.weighted_sum_pool(v[0], v[1])),
        ),
        (
            "add",
            vec![uniform(&[3, 4], 20), uniform(&[3, 4], 21)],
            Box::new(|g, v| g.add(v[0], v[1])),
        ),
        (
            "sub",
            vec![uniform(&[3, 4], 22), uniform(&[3, 4], 23)],
            Box::new(|g, v| g.sub(v[0], v[1])),
        ),
        (
            "mul",
            vec![uniform(&[3, 4], 24), uniform(&[3, 4], 25)],
            Box::new(|g, v| g.mul(v[0], v[1])),
        ),
        ("affine", vec![uniform(&[3, 4], 26)], Box::new(|g, v| Ok(g.affine(v[0], -1.5, 0.25)))),
        ("scale", vec![uniform(&[3, 4], 27)], Box::new(|g, v| Ok(g.scale(v[0], 3.0)))),
        ("sum", vec![uniform(&[3, 4], 28)], Box::new(|g, v| Ok(g.sum(v[0])))),
        ("reshape", vec![uniform(&[3, 4], 29)], Box::new(|g, v| g.reshape(v[0], &[2, 6]))),
        (
            "concat",
            vec![uniform(&[2, 3], 30), uniform(&[1, 3], 31)],
            Box::new(|g, v| g.concat(&[v[0], v[1]], 0)),
        ),
        ("slice_axis0", vec![uniform(&[5, 3], 32)], Box::new(|g, v| g.slice_axis0(v[0], 1, 3))),
        (
            "gather_axis0",
            vec![uniform(&[4, 3], 33)],
            Box::new(|g, v| g.gather_axis0(v[0], &[3, 0, 3, 1])),
        ),
        (
            "cross_entropy",
            vec![uniform(&[4, 3], 34)],
            Box::new(|g, v| g.cross_entropy(v[0], &[0, 2, 1, 2])),
        ),
    ]
}

/// Worst relative error per op.
pub fn op_gradient_errors() -> Vec<(&'static str, f64)> {
    op_cases()
        .into_iter()
        .map(|(name, inputs, build)| {
            let err = grad_check(&inputs, GRAD_EPS, |g, v| build(g, v)).expect(name);
            (name, err)
        })
        .collect()
}

pub fn micro_config() -> DcnConfig {
    DcnConfig {
        detect: DetectConfig {
            backbone: BackboneConfig {
                conv1: 4,
                conv2: 4,
                features: 8,
            },
            landmarks: 2,
        },
        expert_width: 6,
        identities: 3,
    }
}

pub fn sample(seed: u64, identity: usize, size: usize) -> RenderedSample {
    let mut rng = derive_rng(seed, &[identity as u64]);
    let yaw = rng.random_range(-1.0..1.0);
    let q = rng.random_range(0.3..1.0);
    let opts = RenderOptions { size, nuisance: true };
    render_sample(&generate_identity(seed, identity), yaw, q, &opts, &mut rng)
}

pub fn template(seed: u64, identity: usize, n: usize, size: usize) -> Template {
    Template {
        identity,
        samples: (0..n).map(|i| sample(seed + 1000 * i as u64, identity, size)).collect(),
    }
}

fn micro_loss(params: &DcnParams<f64>, batch: &PairBatch<f64>, step: usize) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let loss = pair_loss(&mut g, &vars, batch, Regularizer::Diversity, step, &LossWeights::default())?;
    g.backward(loss.total)?;
    let grads = vars
        .all()
        .iter()
        .zip(params.named())
        .map(|(v, (_, t))| g.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    Ok((g.scalar(loss.total), grads))
}

/// Worst relative error of the full pair loss over every parameter of a
/// K=2, C=8 model on 8×8 images, and the number of coordinates checked.
pub fn micro_pair_loss_error() -> Result<(f64, usize)> {
    let cfg = micro_config();
    let mut params = DcnParams::<f64>::new(&cfg, &mut derive_rng(3, &[]));
    let templates = [template(1, 0, 2, 8), template(2, 1, 1, 8), template(3, 2, 3, 8)];
    let refs: Vec<&Template> = templates.iter().collect();
    let batch = PairBatch::<f64>::assemble(
        &refs,
        &[(0, 1, 0), (1, 2, 0), (2, 0, 1)],
        Some,
        Regularizer::Diversity,
        cfg.detect.landmarks,
    )?;
    let (_, analytic) = micro_loss(&params, &batch, 0)?;
    let mut worst = 0.0f64;
    let mut count = 0;
    for (p, grads) in analytic.iter().enumerate() {
        for (i, &a) in grads.iter().enumerate() {
            let original = params.named()[p].1.data()[i];
            let mut at = |v: f64| -> Result<f64> {
                params.named_mut()[p].1.data_mut()[i] = v;
                let mut g = Graph::new();
                let vars = params.bind(&mut g);
                let loss = pair_loss(&mut g, &vars, &batch, Regularizer::Diversity, 0, &LossWeights::default())?;
                Ok(g.scalar(loss.total))
            };
            let numeric = (at(original + GRAD_EPS)? - at(original - GRAD_EPS)?) / (2.0 * GRAD_EPS);
            at(original)?;
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > 1e-5 && std::env::var("GRAD_DEBUG").is_ok() {
                eprintln!("{} [{i}]: analytic {a:e} numeric {numeric:e} rel {rel:e}", params.named()[p].0);
            }
            worst = worst.max(rel);
            count += 1;
        }
    }
    Ok((worst, count))
}
