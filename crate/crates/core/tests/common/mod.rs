#![allow(dead_code)]

use aide_core::preprocess::Grid;
use aide_core::tensor::{ParamSet, Tape, Tensor4, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_tensor<R: Rng>(rng: &mut R, shape: [usize; 4]) -> Tensor4<f64> {
    let n = shape.iter().product();
    Tensor4::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[derive(Debug, Clone, Copy)]
pub enum GradOp {
    Conv { stride: usize, pad: usize },
    Deconv { stride: usize, pad: usize },
    Relu,
    Add,
    Mse,
    Sum,
}

/// Builds `loss = mse(op(inputs), proj)` for tensor-valued ops (a smooth
/// scalar touching every output element) or the op itself when it is
/// already scalar (`proj = None`).
fn build(op: GradOp, tape: &mut Tape<f64>, inputs: &[Tensor4<f64>], proj: Option<&Tensor4<f64>>) -> (Vec<Var>, Var) {
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = match op {
        GradOp::Conv { stride, pad } => tape.conv2d(vars[0], vars[1], Some(vars[2]), stride, pad).unwrap(),
        GradOp::Deconv { stride, pad } => tape.deconv2d(vars[0], vars[1], Some(vars[2]), stride, pad).unwrap(),
        GradOp::Relu => tape.relu(vars[0]),
        GradOp::Add => tape.add(vars[0], vars[1]).unwrap(),
        GradOp::Mse => tape.mse(vars[0], vars[1]).unwrap(),
        GradOp::Sum => tape.sum(vars[0]),
    };
    let loss = match proj {
        Some(p) => {
            let target = tape.constant(p.clone());
            tape.mse(out, target).unwrap()
        }
        None => out,
    };
    (vars, loss)
}

fn inputs_for<R: Rng>(op: GradOp, rng: &mut R) -> Vec<Tensor4<f64>> {
    match op {
        GradOp::Conv { .. } => vec![
            random_tensor(rng, [2, 2, 7, 7]),
            random_tensor(rng, [3, 2, 3, 3]),
            random_tensor(rng, [1, 3, 1, 1]),
        ],
        GradOp::Deconv { .. } => vec![
            random_tensor(rng, [2, 3, 4, 4]),
            random_tensor(rng, [3, 2, 3, 3]),
            random_tensor(rng, [1, 2, 1, 1]),
        ],
        GradOp::Relu | GradOp::Sum => vec![random_tensor(rng, [1, 2, 4, 4])],
        GradOp::Add | GradOp::Mse => vec![random_tensor(rng, [1, 2, 4, 4]), random_tensor(rng, [1, 2, 4, 4])],
    }
}

fn loss_value(op: GradOp, inputs: &[Tensor4<f64>], proj: Option<&Tensor4<f64>>) -> f64 {
    let mut tape = Tape::new();
    let (_, loss) = build(op, &mut tape, inputs, proj);
    tape.value(loss).data()[0]
}

/// Worst relative error (scaled by the largest analytic gradient of each
/// input) between analytic gradients and central differences.
pub fn fd_check_op<R: Rng>(op: GradOp, rng: &mut R, eps: f64) -> f64 {
    let mut inputs = inputs_for(op, rng);
    if matches!(op, GradOp::Relu) {
        // keep inputs away from the kink so the central difference is valid
        for v in inputs[0].data_mut() {
            if v.abs() < 10.0 * eps {
                *v += 0.1;
            }
        }
    }
    let proj = match op {
        GradOp::Mse | GradOp::Sum => None,
        _ => {
            let mut tape = Tape::new();
            let (_, out) = build(op, &mut tape, &inputs, None);
            Some(random_tensor(rng, tape.value(out).shape()))
        }
    };

    let mut tape = Tape::new();
    let mut params = ParamSet::new();
    let (vars, loss) = build(op, &mut tape, &inputs, proj.as_ref());
    let grads = tape.backward(loss, &mut params).unwrap();
    assert_eq!(grads.len(), vars.len());

    let mut worst = 0.0f64;
    for (slot, (_, g)) in grads.iter().enumerate() {
        let scale = g.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
        for i in 0..inputs[slot].len() {
            let orig = inputs[slot].data()[i];
            inputs[slot].data_mut()[i] = orig + eps;
            let up = loss_value(op, &inputs, proj.as_ref());
            inputs[slot].data_mut()[i] = orig - eps;
            let down = loss_value(op, &inputs, proj.as_ref());
            inputs[slot].data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * eps);
            worst = worst.max((fd - g.data()[i]).abs() / scale);
        }
    }
    worst
}

/// Direct per-window SSIM: 2-D Gaussian weights, centered moments.
#[allow(clippy::needless_range_loop)]
pub fn ssim_literal(x: &Grid, y: &Grid, window: usize, sigma: f64) -> f64 {
    let half = (window / 2) as f64;
    let mut w = vec![vec![0.0; window]; window];
    for (i, row) in w.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - half, j as f64 - half);
            *v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
        }
    }
    let total: f64 = w.iter().flatten().sum();
    w.iter_mut().flatten().for_each(|v| *v /= total);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let at = |g: &Grid, r: usize, c: usize| f64::from(g.at(r, c));
    let mut sum = 0.0;
    let mut count = 0usize;
    for r0 in 0..=x.height - window {
        for c0 in 0..=x.width - window {
            let (mut mx, mut my) = (0.0, 0.0);
            for i in 0..window {
                for j in 0..window {
                    mx += w[i][j] * at(x, r0 + i, c0 + j);
                    my += w[i][j] * at(y, r0 + i, c0 + j);
                }
            }
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for i in 0..window {
                for j in 0..window {
                    let dx = at(x, r0 + i, c0 + j) - mx;
                    let dy = at(y, r0 + i, c0 + j) - my;
                    vx += w[i][j] * dx * dx;
                    vy += w[i][j] * dy * dy;
                    cxy += w[i][j] * dx * dy;
                }
            }
            sum += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    sum / count as f64
}

/// Minimum within-cluster sum of squares over all 3^n labelings with no
/// empty cluster, and the canonical partition attaining it.
pub fn exhaustive_k3(points: &[[f64; 2]]) -> (f64, Vec<usize>) {
    let n = points.len();
    let mut best = (f64::INFINITY, Vec::new());
    for code in 0..3usize.pow(n as u32) {
        let labels: Vec<usize> = (0..n).map(|i| code / 3usize.pow(i as u32) % 3).collect();
        let mut sums = [[0.0; 2]; 3];
        let mut counts = [0usize; 3];
        for (p, &l) in points.iter().zip(&labels) {
            sums[l][0] += p[0];
            sums[l][1] += p[1];
            counts[l] += 1;
        }
        if counts.contains(&0) {
            continue;
        }
        let cost: f64 = points
            .iter()
            .zip(&labels)
            .map(|(p, &l)| {
                let c = [sums[l][0] / counts[l] as f64, sums[l][1] / counts[l] as f64];
                (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)
            })
            .sum();
        if cost < best.0 - 1e-12 {
            best = (cost, canonical(&labels));
        }
    }
    best
}

/// Relabels so clusters appear in order of first occurrence.
pub fn canonical(labels: &[usize]) -> Vec<usize> {
    let mut map = Vec::new();
    labels
        .iter()
        .map(|l| match map.iter().position(|m| m == l) {
            Some(i) => i,
            None => {
                map.push(*l);
                map.len() - 1
            }
        })
        .collect()
}

pub fn blob_instance(rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    let centers: Vec<[f64; 2]> = (0..3)
        .map(|_| [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)])
        .collect();
    (0..9)
        .map(|i| {
            let c = centers[i % 3];
            [c[0] + rng.random_range(-1.5..1.5), c[1] + rng.random_range(-1.5..1.5)]
        })
        .collect()
}
