//! Minimal layers with hand-written backward passes.
//!
//! Every layer follows the same shape: `forward` returns the output together
//! with a cache holding whatever the backward pass needs, and `backward`
//! consumes the cache, accumulates parameter gradients into [`Param::grad`]
//! and returns the gradient with respect to the layer input. Tensors are
//! `f64` in NCHW layout.

mod batchnorm;
mod block;
mod conv;
mod ops;

pub use batchnorm::{BatchNorm2d, BnCache, BN_EPS, BN_MOMENTUM};
pub use block::{ConvBnRelu, ConvBnReluCache};
pub use conv::{Conv2d, ConvCache, Padding};
pub use ops::{
    concat_channels, relu, relu_backward, sigmoid, sigmoid_backward, split_channels,
    upsample_bilinear, upsample_bilinear_backward,
};

use ndarray::{ArrayD, IxDyn};
use rand::Rng;

/// Forward-pass behaviour of batch normalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics; nothing is mutated.
    Eval,
}

/// A trainable tensor and its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
}

impl Param {
    pub fn zeros(shape: &[usize]) -> Self {
        Param {
            value: ArrayD::zeros(IxDyn(shape)),
            grad: ArrayD::zeros(IxDyn(shape)),
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        Param {
            value: ArrayD::from_elem(IxDyn(shape), v),
            grad: ArrayD::zeros(IxDyn(shape)),
        }
    }

    /// Uniform in `±1/√fan_in`.
    pub fn fan_in_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        Param {
            value: ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape matches length"),
            grad: ArrayD::zeros(IxDyn(shape)),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// A named tensor exposed to optimizers and checkpointing.
pub enum Slot<'a> {
    Param(&'a mut Param),
    /// Non-trainable state such as batch-norm running statistics.
    Buffer(&'a mut ArrayD<f64>),
}

/// Anything that owns named tensors.
pub trait Module {
    /// Calls `f` for every tensor, in a fixed order, with a dotted name.
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>));

    fn zero_grad(&mut self) {
        self.visit("", &mut |_, slot| {
            if let Slot::Param(p) = slot {
                p.zero_grad();
            }
        });
    }

    fn num_params(&mut self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, slot| {
            if let Slot::Param(p) = slot {
                n += p.len();
            }
        });
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
