//! Random inputs and finite-difference sweeps for individual tape ops.

use rand::Rng;
use thgcl::gradcheck::{grad_check, DEFAULT_STEP};
use thgcl::{OpKind, Result, Tape, Tensor, Var};

use super::rng;

#[derive(Clone, Copy)]
pub enum Domain {
    Any,
    Positive,
    AwayFromZero,
}

pub fn sample(r: &mut impl Rng, rows: usize, cols: usize, domain: Domain) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| match domain {
            Domain::Any => r.random_range(-2.0..2.0),
            Domain::Positive => r.random_range(0.1..3.0),
            Domain::AwayFromZero => {
                let m = r.random_range(0.05..2.0);
                if r.random_bool(0.5) {
                    m
                } else {
                    -m
                }
            }
        })
        .collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Reduces an op output to a scalar through a fixed random weighting so every
/// output coordinate contributes a distinct amount.
pub fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let mut r = rng(seed);
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect())?;
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

/// Worst relative error of d/d(inputs[k]) of `weighted_sum(f(inputs))` over
/// every k; NaN is reported as infinity.
pub fn check_all_inputs(inputs: &[Tensor], seed: u64, f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> f64 {
    let mut worst = 0.0f64;
    for k in 0..inputs.len() {
        let err = grad_check(
            |tape, x| {
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(i, t)| if i == k { x } else { tape.constant(t.clone()) })
                    .collect();
                let y = f(tape, &vars)?;
                weighted_sum(tape, y, seed)
            },
            &inputs[k],
            DEFAULT_STEP,
        )
        .unwrap();
        worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
    }
    worst
}

pub fn op_inputs(kind: OpKind, r: &mut impl Rng) -> Vec<Tensor> {
    let (m, n, k) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..5));
    match kind {
        OpKind::MatMul => vec![sample(r, m, k, Domain::Any), sample(r, k, n, Domain::Any)],
        OpKind::Add | OpKind::Sub | OpKind::MulElementwise => {
            vec![sample(r, m, n, Domain::Any), sample(r, m, n, Domain::Any)]
        }
        OpKind::Relu | OpKind::LeakyRelu => vec![sample(r, m, n, Domain::AwayFromZero)],
        OpKind::Log => vec![sample(r, m, n, Domain::Positive)],
        OpKind::ConcatRows => (0..r.random_range(1..4))
            .map(|_| {
                let rows = r.random_range(1..4);
                sample(r, rows, n, Domain::Any)
            })
            .collect(),
        OpKind::CosineSimilarity => vec![sample(r, m, n, Domain::AwayFromZero), sample(r, k, n, Domain::AwayFromZero)],
        _ => vec![sample(r, m, n, Domain::Any)],
    }
}

/// Worst error per op kind over `trials` random inputs.
pub fn sweep_ops(trials: u64) -> Vec<(OpKind, f64)> {
    OpKind::ALL
        .iter()
        .map(|&kind| {
            let mut r = rng(100 + kind.name().len() as u64);
            let worst = (0..trials)
                .map(|trial| {
                    let inputs = op_inputs(kind, &mut r);
                    check_all_inputs(&inputs, trial, |tape, vars| tape.apply(kind, vars))
                })
                .fold(0.0f64, f64::max);
            (kind, worst)
        })
        .collect()
}
