//! Central finite-difference checks of the analytic backward passes.
//!
//! A check builds a small graph from 64-bit leaves, reduces its output to a
//! scalar through a fixed random projection, and compares every analytic
//! input gradient with `(L(x + h) - L(x - h)) / 2h`. The reported error is
//! `max |analytic - numeric| / max(1, |numeric|)` over all input elements.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Mode, NodeId, ParamStore};
use crate::error::Result;
use crate::tensor::{ops, Precision, Tensor};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// Builds an output node from the given input nodes. Must be deterministic.
pub type Builder<'a> = dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId> + 'a;

fn projected_loss(graph: &mut Graph, out: NodeId, seed: u64) -> Result<NodeId> {
    let shape = graph.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let proj = Tensor::uniform(&shape, -1.0, 1.0, &mut rng).to_precision(Precision::F64);
    let proj = graph.input(proj)?;
    let weighted = graph.hadamard(out, proj)?;
    graph.sum(weighted)
}

fn evaluate(inputs: &[Tensor], build: &Builder, seed: u64) -> Result<f64> {
    let mut graph = Graph::new();
    let ids = inputs
        .iter()
        .map(|t| graph.input(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = build(&mut graph, &ids)?;
    let loss = projected_loss(&mut graph, out, seed)?;
    Ok(graph.value(loss).data()[0])
}

/// Maximum relative error between analytic and central-difference gradients
/// over every element of every input.
pub fn grad_check(inputs: &[Tensor], build: &Builder, seed: u64) -> Result<f64> {
    let inputs: Vec<Tensor> = inputs.iter().map(|t| t.to_precision(Precision::F64)).collect();
    let mut graph = Graph::new();
    let ids = inputs
        .iter()
        .map(|t| graph.leaf(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = build(&mut graph, &ids)?;
    let loss = projected_loss(&mut graph, out, seed)?;
    let mut scratch = ParamStore::new();
    graph.backward(loss, &mut scratch)?;

    let mut worst: f64 = 0.0;
    for (k, id) in ids.iter().enumerate() {
        let zeros = Tensor::from_parts(inputs[k].shape().to_vec(), vec![0.0; inputs[k].len()], Precision::F64);
        let analytic = graph.grad(*id).cloned().unwrap_or(zeros);
        let mut probe = inputs.clone();
        for e in 0..inputs[k].len() {
            let orig = inputs[k].data()[e];
            probe[k].data_mut()[e] = orig + STEP;
            let plus = evaluate(&probe, build, seed)?;
            probe[k].data_mut()[e] = orig - STEP;
            let minus = evaluate(&probe, build, seed)?;
            probe[k].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let err = (analytic.data()[e] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// One entry of a gradient-check suite.
pub struct GradCheckCase {
    pub op: String,
    pub shape: String,
    pub inputs: Vec<Tensor>,
    pub build: Box<Builder<'static>>,
}

#[derive(Debug, Clone)]
pub struct GradCheckOutcome {
    pub op: String,
    pub shape: String,
    pub max_rel_error: f64,
}

impl GradCheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

pub fn run_suite(cases: &[GradCheckCase], seed: u64) -> Result<Vec<GradCheckOutcome>> {
    cases
        .iter()
        .map(|c| {
            Ok(GradCheckOutcome {
                op: c.op.clone(),
                shape: c.shape.clone(),
                max_rel_error: grad_check(&c.inputs, c.build.as_ref(), seed)?,
            })
        })
        .collect()
}

fn case(op: &str, shape: String, inputs: Vec<Tensor>, build: impl Fn(&mut Graph, &[NodeId]) -> Result<NodeId> + 'static) -> GradCheckCase {
    GradCheckCase {
        op: op.to_string(),
        shape,
        inputs,
        build: Box::new(build),
    }
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng).to_precision(Precision::F64)
}

/// Values at least `gap` apart, randomly placed; keeps max-pool windows and
/// `maximum` away from ties under a finite-difference step.
fn spaced(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * gap).collect();
    vals.shuffle(rng);
    Tensor::with_precision(shape, vals, Precision::F64).expect("shape matches")
}

/// Random values with magnitude at least `margin`.
fn away_from_zero(shape: &[usize], margin: f64, rng: &mut ChaCha8Rng) -> Tensor {
    randn(shape, rng).map(|v| if v >= 0.0 { v + margin } else { v - margin })
}

/// Three random shapes for every differentiable operation.
pub fn standard_suite(seed: u64) -> Vec<GradCheckCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();

    for (x, w, stride, pad) in [
        ([1, 1, 3, 4, 4], [1, 1, 2, 2, 2], [1, 1, 1], [0, 0, 0]),
        ([2, 2, 3, 5, 4], [3, 2, 2, 3, 3], [1, 2, 1], [1, 1, 1]),
        ([1, 3, 4, 4, 5], [2, 3, 3, 1, 2], [2, 1, 2], [0, 1, 0]),
    ] {
        let inputs = vec![randn(&x, &mut rng), randn(&w, &mut rng), randn(&[w[0]], &mut rng)];
        cases.push(case("conv3d", format!("{x:?} * {w:?}"), inputs, move |g, ids| {
            g.conv3d(ids[0], ids[1], ids[2], stride, pad)
        }));
    }
    for (x, w, stride, pad) in [
        ([1, 1, 4, 4], [1, 1, 2, 2], [1, 1], [0, 0]),
        ([2, 3, 5, 5], [4, 3, 3, 3], [2, 2], [1, 1]),
        ([1, 2, 6, 5], [2, 2, 3, 2], [1, 2], [1, 0]),
    ] {
        let inputs = vec![randn(&x, &mut rng), randn(&w, &mut rng), randn(&[w[0]], &mut rng)];
        cases.push(case("conv2d", format!("{x:?} * {w:?}"), inputs, move |g, ids| {
            g.conv2d(ids[0], ids[1], ids[2], stride, pad)
        }));
    }
    for (x, k, s) in [
        ([1, 1, 2, 4, 4], [1, 2, 2], [1, 2, 2]),
        ([2, 2, 4, 5, 5], [1, 3, 3], [1, 2, 2]),
        ([1, 3, 4, 4, 4], [2, 2, 2], [2, 2, 2]),
    ] {
        let inputs = vec![spaced(&x, 0.01, &mut rng)];
        cases.push(case("maxpool3d", format!("{x:?} k{k:?}"), inputs, move |g, ids| g.maxpool3d(ids[0], k, s)));
    }
    for x in [[1, 1, 2, 2, 2], [2, 3, 2, 3, 3], [3, 2, 1, 4, 2]] {
        let k = [x[2], x[3], x[4]];
        let inputs = vec![randn(&x, &mut rng)];
        cases.push(case("global_avgpool3d", format!("{x:?}"), inputs, move |g, ids| {
            g.global_avgpool3d(ids[0], k)
        }));
    }
    for x in [vec![4, 3], vec![2, 2, 3, 3], vec![2, 3, 2, 2, 2]] {
        let c = x[1];
        let inputs = vec![randn(&x, &mut rng), randn(&[c], &mut rng), randn(&[c], &mut rng)];
        cases.push(case("batchnorm-train", format!("{x:?}"), inputs, |g, ids| {
            Ok(g.batchnorm_train(ids[0], ids[1], ids[2], 1e-5)?.0)
        }));
    }
    for x in [vec![4, 3], vec![2, 2, 3, 3], vec![2, 3, 2, 2, 2]] {
        let c = x[1];
        let mean: Vec<f64> = randn(&[c], &mut rng).into_data();
        let var: Vec<f64> = Tensor::uniform(&[c], 0.5, 2.0, &mut rng).into_data();
        let inputs = vec![randn(&x, &mut rng), randn(&[c], &mut rng), randn(&[c], &mut rng)];
        cases.push(case("batchnorm-eval", format!("{x:?}"), inputs, move |g, ids| {
            g.batchnorm_eval(ids[0], ids[1], ids[2], &mean, &var, 1e-5)
        }));
    }
    for x in [vec![7], vec![3, 4], vec![2, 3, 2, 2]] {
        let inputs = vec![away_from_zero(&x, 0.1, &mut rng)];
        cases.push(case("relu", format!("{x:?}"), inputs, |g, ids| g.relu(ids[0])));
    }
    for (b, din, dout) in [(3, 4, 2), (1, 5, 5), (4, 2, 3)] {
        let inputs = vec![
            randn(&[b, din], &mut rng),
            randn(&[dout, din], &mut rng),
            randn(&[dout], &mut rng),
        ];
        cases.push(case("linear", format!("[{b}, {din}] -> {dout}"), inputs, |g, ids| {
            g.linear(ids[0], ids[1], ids[2])
        }));
    }
    for (x, rate) in [(vec![10], 0.5), (vec![3, 4], 0.2), (vec![2, 2, 3], 0.7)] {
        let mask_seed = rng.random::<u64>();
        let inputs = vec![randn(&x, &mut rng)];
        cases.push(case("dropout", format!("{x:?} p={rate}"), inputs, move |g, ids| {
            let mut r = ChaCha8Rng::seed_from_u64(mask_seed);
            g.dropout(ids[0], rate, Mode::Train, &mut r)
        }));
    }
    for (shapes, axis) in [
        (vec![vec![2], vec![3], vec![4]], 0),
        (vec![vec![2, 3], vec![2, 1]], 1),
        (vec![vec![1, 2, 2], vec![3, 2, 2]], 0),
    ] {
        let inputs: Vec<Tensor> = shapes.iter().map(|s| randn(s, &mut rng)).collect();
        cases.push(case("concat", format!("{shapes:?} axis {axis}"), inputs, move |g, ids| g.concat(ids, axis)));
    }
    for x in [vec![5], vec![2, 3], vec![2, 2, 2]] {
        let inputs = vec![randn(&x, &mut rng), randn(&x, &mut rng)];
        cases.push(case("hadamard", format!("{x:?}"), inputs, |g, ids| g.hadamard(ids[0], ids[1])));
    }
    for x in [vec![5], vec![2, 3], vec![2, 2, 2]] {
        let inputs = vec![randn(&x, &mut rng), randn(&x, &mut rng)];
        cases.push(case("add", format!("{x:?}"), inputs, |g, ids| g.add(ids[0], ids[1])));
    }
    for x in [vec![6], vec![2, 3], vec![2, 2, 2]] {
        let both = spaced(&[2 * x.iter().product::<usize>()], 0.01, &mut rng).into_data();
        let (a, b) = both.split_at(both.len() / 2);
        let inputs = vec![
            Tensor::with_precision(&x, a.to_vec(), Precision::F64).expect("shape"),
            Tensor::with_precision(&x, b.to_vec(), Precision::F64).expect("shape"),
        ];
        cases.push(case("maximum", format!("{x:?}"), inputs, |g, ids| g.maximum(ids[0], ids[1])));
    }
    for (x, perm) in [(vec![2, 3], vec![1, 0]), (vec![2, 3, 4], vec![1, 0, 2]), (vec![1, 2, 3, 2, 2], vec![0, 2, 1, 3, 4])] {
        let inputs = vec![randn(&x, &mut rng)];
        cases.push(case("permute", format!("{x:?} {perm:?}"), inputs, move |g, ids| g.permute(ids[0], &perm)));
    }
    for (x, axis, idx) in [(vec![5], 0, vec![4, 1]), (vec![2, 6, 3], 1, vec![0, 2, 5]), (vec![3, 2], 0, vec![2, 2, 0])] {
        let inputs = vec![randn(&x, &mut rng)];
        cases.push(case("select", format!("{x:?} axis {axis} {idx:?}"), inputs, move |g, ids| {
            g.select(ids[0], axis, &idx)
        }));
    }
    for (x, target) in [([1, 1, 2, 2, 2], [2, 3, 3]), ([1, 2, 4, 3, 3], [2, 2, 2]), ([2, 1, 1, 2, 3], [3, 4, 2])] {
        let inputs = vec![randn(&x, &mut rng)];
        cases.push(case("resize_nearest", format!("{x:?} -> {target:?}"), inputs, move |g, ids| {
            g.resize_nearest(ids[0], target)
        }));
    }
    for x in [vec![2, 3], vec![2, 2, 4], vec![1, 5]] {
        let inputs = vec![randn(&x, &mut rng)];
        cases.push(case("sum_last_axis", format!("{x:?}"), inputs, |g, ids| g.sum_last_axis(ids[0])));
    }
    for x in [vec![3], vec![2, 2], vec![2, 3, 2]] {
        let inputs = vec![randn(&x, &mut rng)];
        cases.push(case("scale", format!("{x:?}"), inputs, |g, ids| g.scale(ids[0], -1.7)));
    }
    for (b, k) in [(4, 5), (1, 3), (3, 2)] {
        let labels: Vec<usize> = (0..b).map(|i| (i * 7 + 1) % k).collect();
        let inputs = vec![randn(&[b, k], &mut rng).scale(3.0)];
        cases.push(case("softmax_cross_entropy", format!("[{b}, {k}]"), inputs, move |g, ids| {
            Ok(g.softmax_cross_entropy(ids[0], &labels)?.0)
        }));
    }
    cases
}

/// A conv3d node whose backward pass is deliberately scaled by `factor`.
/// Used to confirm the checker notices a broken gradient.
pub fn corrupted_conv3d_case(factor: f64, seed: u64) -> GradCheckCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = vec![
        randn(&[1, 1, 3, 4, 4], &mut rng),
        randn(&[1, 1, 2, 2, 2], &mut rng),
        randn(&[1], &mut rng),
    ];
    case("conv3d-corrupted", "[1, 1, 3, 4, 4] * [1, 1, 2, 2, 2]".into(), inputs, move |g, ids| {
        let value = ops::conv3d(g.value(ids[0]), g.value(ids[1]), g.value(ids[2]), [1; 3], [0; 3])?;
        g.custom(
            ids,
            value,
            Box::new(move |grad, xs| {
                let (gi, gw, gb) = ops::conv3d_backward(xs[0], xs[1], grad, [1; 3], [0; 3], true)?;
                let gi = gi.expect("requested");
                Ok(vec![gi.scale(factor), gw.scale(factor), gb])
            }),
        )
    })
}
