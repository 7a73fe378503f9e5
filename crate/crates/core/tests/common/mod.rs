//! Central finite-difference gradient checking.
#![allow(dead_code)]

pub mod cases;

use earseg_core::nn::{Module, Slot};
use ndarray::{Array4, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random4(shape: (usize, usize, usize, usize), rng: &mut ChaCha8Rng) -> Array4<f64> {
    Array4::from_shape_simple_fn(shape, || rng.random_range(-1.0..1.0))
}

/// `|a − n| / max(|a|, |n|)`, with absolute error used when both are tiny.
pub fn rel_err(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < 1e-7 {
        (a - n).abs()
    } else {
        (a - n).abs() / scale
    }
}

fn grads<M: Module>(m: &mut M) -> Vec<(String, ArrayD<f64>)> {
    let mut out = Vec::new();
    m.visit("", &mut |name, slot| {
        if let Slot::Param(p) = slot {
            out.push((name.to_string(), p.grad.clone()));
        }
    });
    out
}

fn nudge<M: Module>(m: &mut M, target: &str, index: usize, delta: f64) {
    m.visit("", &mut |name, slot| {
        if let Slot::Param(p) = slot {
            if name == target {
                let v = p.value.iter_mut().nth(index).expect("index in range");
                *v += delta;
            }
        }
    });
}

/// Worst relative error over every parameter entry. `backward` must leave
/// the analytic gradients of `loss` in the module's parameters.
pub fn check_params<M: Module>(
    m: &mut M,
    loss: impl Fn(&M) -> f64,
    backward: impl FnOnce(&mut M),
) -> (f64, String) {
    m.zero_grad();
    backward(m);
    let mut worst = (0.0, String::new());
    for (name, g) in grads(m) {
        for (i, &a) in g.iter().enumerate() {
            nudge(m, &name, i, STEP);
            let up = loss(m);
            nudge(m, &name, i, -2.0 * STEP);
            let down = loss(m);
            nudge(m, &name, i, STEP);
            let e = rel_err(a, (up - down) / (2.0 * STEP));
            if e > worst.0 {
                worst = (e, format!("{name}[{i}] analytic {a:e} numeric {:e}", (up - down) / (2.0 * STEP)));
            }
        }
    }
    worst
}

/// Worst relative error of an input gradient.
pub fn check_input(x: &Array4<f64>, analytic: &Array4<f64>, loss: impl Fn(&Array4<f64>) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for (idx, &a) in analytic.indexed_iter() {
        let orig = probe[idx];
        probe[idx] = orig + STEP;
        let up = loss(&probe);
        probe[idx] = orig - STEP;
        let down = loss(&probe);
        probe[idx] = orig;
        worst = worst.max(rel_err(a, (up - down) / (2.0 * STEP)));
    }
    worst
}

/// `Σ y ⊙ r`, whose gradient w.r.t. `y` is `r`.
pub fn project(y: &Array4<f64>, r: &Array4<f64>) -> f64 {
    (y * r).sum()
}
