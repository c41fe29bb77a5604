#![allow(dead_code)]

use ascnet::nn::{
    dropout, global_avg_pool, maxpool2d, softmax, FocalLoss, Mode, Model, RunningStats, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(shape: Vec<usize>, seed: u64, scale: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(
        shape,
        (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
    )
    .unwrap()
}

/// Gives every batch norm nonzero shift, non-unit scale and running
/// statistics so that frozen-statistics inference is not the identity.
pub fn randomize_batch_norms(model: &mut Model, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, bn) in model.batch_norms_mut() {
        let c = bn.channels();
        bn.gamma
            .data_mut()
            .iter_mut()
            .for_each(|g| *g = rng.random_range(0.5..1.5));
        bn.beta
            .data_mut()
            .iter_mut()
            .for_each(|b| *b = rng.random_range(-0.2..0.2));
        bn.running = Some(RunningStats {
            mean: (0..c).map(|_| rng.random_range(-0.1..0.1)).collect(),
            var: (0..c).map(|_| rng.random_range(0.5..2.0)).collect(),
        });
    }
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub checked: usize,
    pub failures: usize,
    pub max_rel: f64,
    pub worst: String,
}

/// Relative error with a denominator floor, so gradients near zero are
/// compared on an absolute scale.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Loss of the part of the network after block 1, given its (pooled,
/// dropout-free) output.
fn tail_loss(model: &Model, d1: &Tensor, mode: Mode, targets: &[usize], loss: &FocalLoss) -> f64 {
    let (y2, _) = model.block2.forward(d1, mode, model.exec).unwrap();
    let (p2, _) = maxpool2d(&y2, model.spec.pool).unwrap();
    let g = global_avg_pool(&p2).unwrap();
    let probs = softmax(&model.dense.forward(&g).unwrap()).unwrap();
    loss.forward(&probs, targets).unwrap()
}

fn full_loss(
    model: &mut Model,
    x: &Tensor,
    mode: Mode,
    targets: &[usize],
    loss: &FocalLoss,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let probs = model.forward(x, mode, &mut rng).unwrap();
    loss.forward(&probs, targets).unwrap()
}

fn block1_output(model: &Model, x: &Tensor, mode: Mode) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (y1, _) = model.block1.forward(x, mode, model.exec).unwrap();
    let (p1, _) = maxpool2d(&y1, model.spec.pool).unwrap();
    dropout(&p1, model.spec.dropout, mode, &mut rng).unwrap().0
}

/// Central differences for every parameter against the backward pass.
/// Dropout must be inactive (inference mode or rate 0). Parameters after
/// block 1 are perturbed on a cached block-1 output.
pub fn check_all_params(
    model: &mut Model,
    x: &Tensor,
    targets: &[usize],
    mode: Mode,
    step: f64,
    floor: f64,
    tol: f64,
) -> GradCheck {
    assert!(mode == Mode::Infer || model.spec.dropout == 0.0);
    let loss = FocalLoss::default();
    model.zero_grad();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    model.forward(x, mode, &mut rng).unwrap();
    model.backward(targets, &loss).unwrap();
    let analytic: Vec<(String, Vec<f64>)> = model
        .params()
        .into_iter()
        .map(|(n, t)| {
            (
                n,
                t.grad().map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec),
            )
        })
        .collect();

    let d1 = block1_output(model, x, mode);
    let mut report = GradCheck {
        checked: 0,
        failures: 0,
        max_rel: 0.0,
        worst: String::new(),
    };
    for (p, (name, grad)) in analytic.iter().enumerate() {
        let in_block1 = name.starts_with("block1.");
        for i in 0..grad.len() {
            let eval = |delta: f64, model: &mut Model| {
                let orig = model.params_mut()[p].1.data()[i];
                model.params_mut()[p].1.data_mut()[i] = orig + delta;
                let v = if in_block1 {
                    full_loss(model, x, mode, targets, &loss)
                } else {
                    tail_loss(model, &d1, mode, targets, &loss)
                };
                model.params_mut()[p].1.data_mut()[i] = orig;
                v
            };
            let numeric = (eval(step, model) - eval(-step, model)) / (2.0 * step);
            let rel = rel_error(grad[i], numeric, floor);
            report.checked += 1;
            if rel >= tol {
                report.failures += 1;
            }
            if rel > report.max_rel {
                report.max_rel = rel;
                report.worst = format!("{name}[{i}]: analytic {:e} numeric {numeric:e}", grad[i]);
            }
        }
    }
    report
}
