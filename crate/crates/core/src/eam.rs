//! Error-attention subnetwork and refinement of semantic logits.
//!
//! The subnetwork is two conv3x3–BN–ReLU units followed by a 1x1
//! projection to one channel and a sigmoid. Its output `Am` rescales the
//! logits as `l_final = λ·l + μ·(Am ∗ l)`, with `Am` broadcast over both
//! logit channels.

use ndarray::{Array2, Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{FeatureMap, SemanticLogits};
use crate::error::{Error, Result};
use crate::nn::{
    join, sigmoid, sigmoid_backward, Conv2d, ConvBnRelu, ConvBnReluCache, ConvCache, Mode, Module, Slot,
};

/// Values in `[0, 1]`; `(h, w)` at the feature stride.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub data: Array2<f64>,
    pub stride: usize,
}

impl AttentionMap {
    pub fn mean(&self) -> f64 {
        self.data.mean().unwrap_or(0.0)
    }
}

/// `λ` weights the original logits, `μ` the attended ones.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub lambda: f64,
    pub mu: f64,
}

impl Default for FusionWeights {
    fn default() -> Self {
        FusionWeights { lambda: 0.5, mu: 0.5 }
    }
}

impl FusionWeights {
    pub fn validate(&self) -> Result<()> {
        let FusionWeights { lambda, mu } = *self;
        if !(lambda >= 0.0 && mu >= 0.0) || (lambda + mu - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "fusion weights must be non-negative and sum to 1, got lambda={lambda}, mu={mu}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Eam {
    unit1: ConvBnRelu,
    unit2: ConvBnRelu,
    proj: Conv2d,
    channels: usize,
}

pub struct EamCache {
    unit1: ConvBnReluCache,
    unit2: ConvBnReluCache,
    proj: ConvCache,
    am: Array4<f64>,
}

impl Eam {
    pub fn new(channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Eam {
            unit1: ConvBnRelu::new(channels, channels, 1, &mut rng),
            unit2: ConvBnRelu::new(channels, channels, 1, &mut rng),
            proj: Conv2d::new(channels, 1, 1, 1, 0, true, &mut rng),
            channels,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `fm` is `[n, C, h, w]`; returns `Am` as `[n, 1, h, w]`.
    pub fn forward_batch(&self, fm: &Array4<f64>, mode: Mode) -> Result<(Array4<f64>, EamCache)> {
        let c = fm.dim().1;
        if c != self.channels {
            return Err(Error::shape("error attention input channels", &[self.channels], &[c]));
        }
        let (o1, unit1) = self.unit1.forward(fm, mode);
        let (o2, unit2) = self.unit2.forward(&o1, mode);
        let (z, proj) = self.proj.forward(&o2);
        let am = sigmoid(&z);
        Ok((
            am.clone(),
            EamCache {
                unit1,
                unit2,
                proj,
                am,
            },
        ))
    }

    pub fn update_running(&mut self, cache: &EamCache) {
        self.unit1.update_running(&cache.unit1);
        self.unit2.update_running(&cache.unit2);
    }

    /// Gradient w.r.t. the input features given `dL/dAm`.
    pub fn backward_batch(&mut self, cache: EamCache, d_am: &Array4<f64>) -> Array4<f64> {
        let dz = sigmoid_backward(&cache.am, d_am);
        let d = self.proj.backward(cache.proj, &dz);
        let d = self.unit2.backward(cache.unit2, &d);
        self.unit1.backward(cache.unit1, &d)
    }

    pub fn forward(&self, fm: &FeatureMap, mode: Mode) -> Result<AttentionMap> {
        let (am, _) = self.forward_batch(&fm.data.clone().insert_axis(Axis(0)), mode)?;
        Ok(AttentionMap {
            data: am.index_axis_move(Axis(0), 0).index_axis_move(Axis(0), 0),
            stride: fm.stride,
        })
    }

    pub fn zero_weights(&mut self) {
        self.visit("", &mut |_, slot| {
            if let Slot::Param(p) = slot {
                p.value.fill(0.0);
            }
        });
    }
}

impl Module for Eam {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        self.unit1.visit(&join(prefix, "unit1"), f);
        self.unit2.visit(&join(prefix, "unit2"), f);
        self.proj.visit(&join(prefix, "proj"), f);
    }
}

/// `λ·l + μ·(Am ∗ l)` for a single image.
pub fn refine_logits(
    l: &SemanticLogits,
    am: &AttentionMap,
    weights: FusionWeights,
) -> Result<SemanticLogits> {
    weights.validate()?;
    if am.data.dim() != l.dims() {
        let (h, w) = l.dims();
        let (ah, aw) = am.data.dim();
        return Err(Error::shape("attention map vs logits", &[h, w], &[ah, aw]));
    }
    let scale = am.data.mapv(|a| weights.lambda + weights.mu * a);
    let data: Array3<f64> = &l.data * &scale.insert_axis(Axis(0));
    SemanticLogits::new(data, l.stride)
}

/// Batched refinement: `l` is `[n, 2, h, w]`, `am` is `[n, 1, h, w]`.
pub fn refine_batch(l: &Array4<f64>, am: &Array4<f64>, weights: FusionWeights) -> Array4<f64> {
    let scale = am.mapv(|a| weights.lambda + weights.mu * a);
    l * &scale
}

/// Gradients of [`refine_batch`] w.r.t. `l` and `am`.
pub fn refine_batch_backward(
    l: &Array4<f64>,
    am: &Array4<f64>,
    d_out: &Array4<f64>,
    weights: FusionWeights,
) -> (Array4<f64>, Array4<f64>) {
    let scale = am.mapv(|a| weights.lambda + weights.mu * a);
    let d_l = d_out * &scale;
    let d_am = (d_out * l).sum_axis(Axis(1)).insert_axis(Axis(1)) * weights.mu;
    (d_l, d_am)
}
