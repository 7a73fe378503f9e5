//! Compact encoder–decoder trunk and two-scale relative attention fusion.
//!
//! Layout for feature width `C` (encoder widths `C/2`, `C`, `2C`):
//!
//! ```text
//! image ─ down1 (/2) ─ down2 (/4) ─ down3 (/8) ─ up x2 ─┐
//!                          │                             concat ─ conv-bn-relu ─ features (/4, C)
//!                          ├──────────────────────────────┘                          │
//!                          └─ aux head 1x1 ─ aux logits (/4)          head 1x1 ─ logits (/4) ─ bilinear x4
//! ```
//!
//! Each down block is two conv3x3–BN–ReLU units; the second has stride 2,
//! so the first sees the block input at full resolution.
//! Parameter count for widths `a = C/2`, `b = C`, `c = 2C`:
//!
//! ```text
//! 27a + 9a² + 4a  +  9ab + 9b² + 4b  +  9bc + 9c² + 4c      (down blocks)
//! + 9(b + c)C + 2C                                           (up unit)
//! + 2C + 2  +  2b + 2                                        (head, aux head)
//! ```
//!
//! which is 6464 for `C = 8`.

use ndarray::{s, Array2, Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    concat_channels, join, split_channels, upsample_bilinear, upsample_bilinear_backward, Conv2d,
    ConvBnRelu, ConvBnReluCache, ConvCache, Mode, Module, Slot,
};

/// Stride of the feature tap relative to the input image.
pub const FEATURE_STRIDE: usize = 4;
/// Input height and width must be multiples of this.
pub const INPUT_MULTIPLE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub feature_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { feature_channels: 32 }
    }
}

impl BackboneConfig {
    /// Encoder widths of the three down blocks.
    pub fn widths(&self) -> [usize; 3] {
        let c = self.feature_channels;
        [(c / 2).max(1), c, 2 * c]
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_channels < 2 {
            return Err(Error::InvalidArgument(format!(
                "feature_channels must be >= 2, got {}",
                self.feature_channels
            )));
        }
        Ok(())
    }
}

/// Trunk features at the attention tap, `(C, h, w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub data: Array3<f64>,
    pub stride: usize,
}

/// Two-channel (background, vessel) scores, `(2, h, w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticLogits {
    pub data: Array3<f64>,
    pub stride: usize,
}

impl SemanticLogits {
    pub fn new(data: Array3<f64>, stride: usize) -> Result<Self> {
        if data.dim().0 != 2 {
            return Err(Error::shape("semantic logits channels", &[2], &[data.dim().0]));
        }
        Ok(SemanticLogits { data, stride })
    }

    pub fn dims(&self) -> (usize, usize) {
        let (_, h, w) = self.data.dim();
        (h, w)
    }
}

/// Relative attention between a half-scale and a full-scale prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleAttentionMap {
    pub data: Array2<f64>,
}

/// Two-scale fusion `U(l_low * a) + (1 - U(a)) * l_full` where `U` is 2x
/// bilinear upsampling and `a` is broadcast over the logit channels.
pub fn scale_attention_fuse(
    l_low: &SemanticLogits,
    l_full: &SemanticLogits,
    a_low: &ScaleAttentionMap,
) -> Result<SemanticLogits> {
    let (h, w) = l_low.dims();
    if a_low.data.dim() != (h, w) {
        let (ah, aw) = a_low.data.dim();
        return Err(Error::shape("scale attention map", &[h, w], &[ah, aw]));
    }
    if l_full.dims() != (2 * h, 2 * w) {
        let (fh, fw) = l_full.dims();
        return Err(Error::shape("full-scale logits", &[2 * h, 2 * w], &[fh, fw]));
    }
    let weighted = &l_low.data * &a_low.data.view().insert_axis(Axis(0));
    let up_weighted = upsample_bilinear(&weighted.insert_axis(Axis(0)), 2);
    let up_a = upsample_bilinear(&a_low.data.clone().insert_axis(Axis(0)).insert_axis(Axis(0)), 2);
    let keep = up_a.index_axis(Axis(0), 0).index_axis(Axis(0), 0).mapv(|a| 1.0 - a);
    let out = &up_weighted.index_axis(Axis(0), 0) + &(&l_full.data * &keep.insert_axis(Axis(0)));
    SemanticLogits::new(out, l_full.stride)
}

/// Batched trunk outputs, all at stride [`FEATURE_STRIDE`].
pub struct TrunkOutput {
    /// `[n, C, h, w]`
    pub features: Array4<f64>,
    /// `[n, 2, h, w]`
    pub logits: Array4<f64>,
    /// `[n, 2, h, w]` deep-supervision head on the stride-4 encoder output.
    pub aux_logits: Array4<f64>,
}

pub struct TrunkCache {
    down: Vec<[ConvBnReluCache; 2]>,
    up: ConvBnReluCache,
    head: ConvCache,
    aux: ConvCache,
    skip_channels: usize,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    down: Vec<[ConvBnRelu; 2]>,
    up: ConvBnRelu,
    head: Conv2d,
    aux_head: Conv2d,
}

/// Seeded trunk: conv weights uniform in `±1/√fan_in`, biases 0,
/// batch-norm scales 1 and shifts 0.
pub fn init_params(seed: u64, config: BackboneConfig) -> Result<Backbone> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [a, b, c] = config.widths();
    let fc = config.feature_channels;
    let mut down = Vec::with_capacity(3);
    for (cin, cout) in [(3, a), (a, b), (b, c)] {
        down.push([
            ConvBnRelu::new(cin, cout, 1, &mut rng),
            ConvBnRelu::new(cout, cout, 2, &mut rng),
        ]);
    }
    Ok(Backbone {
        config,
        down,
        up: ConvBnRelu::new(c + b, fc, 1, &mut rng),
        head: Conv2d::new(fc, 2, 1, 1, 0, true, &mut rng),
        aux_head: Conv2d::new(b, 2, 1, 1, 0, true, &mut rng),
    })
}

pub fn check_input_dims(h: usize, w: usize) -> Result<()> {
    let m = INPUT_MULTIPLE;
    if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
        return Err(Error::NotDivisible {
            height: h,
            width: w,
            multiple: m,
            padded_height: h.div_ceil(m).max(1) * m,
            padded_width: w.div_ceil(m).max(1) * m,
        });
    }
    Ok(())
}

impl Backbone {
    pub fn forward_batch(&self, x: &Array4<f64>, mode: Mode) -> Result<(TrunkOutput, TrunkCache)> {
        let (_, c, h, w) = x.dim();
        if c != 3 {
            return Err(Error::shape("backbone input channels", &[3], &[c]));
        }
        check_input_dims(h, w)?;

        let mut act = x.clone();
        let mut down_caches = Vec::with_capacity(self.down.len());
        let mut skip = None;
        for (i, [first, second]) in self.down.iter().enumerate() {
            let (y1, c1) = first.forward(&act, mode);
            let (y2, c2) = second.forward(&y1, mode);
            down_caches.push([c1, c2]);
            if i == 1 {
                skip = Some(y2.clone());
            }
            act = y2;
        }
        let skip = skip.expect("three down blocks");
        let cat = concat_channels(&upsample_bilinear(&act, 2), &skip);
        let (features, up) = self.up.forward(&cat, mode);
        let (logits, head) = self.head.forward(&features);
        let (aux_logits, aux) = self.aux_head.forward(&skip);
        let cache = TrunkCache {
            down: down_caches,
            up,
            head,
            aux,
            skip_channels: act.dim().1,
        };
        Ok((
            TrunkOutput {
                features,
                logits,
                aux_logits,
            },
            cache,
        ))
    }

    /// Commits batch-norm statistics gathered by a train-mode forward pass.
    pub fn update_running(&mut self, cache: &TrunkCache) {
        for (blocks, caches) in self.down.iter_mut().zip(&cache.down) {
            blocks[0].update_running(&caches[0]);
            blocks[1].update_running(&caches[1]);
        }
        self.up.update_running(&cache.up);
    }

    /// Backpropagates gradients w.r.t. the stride-4 outputs. Returns the
    /// gradient w.r.t. the input image batch.
    pub fn backward_batch(
        &mut self,
        cache: TrunkCache,
        d_logits: &Array4<f64>,
        d_features: Option<&Array4<f64>>,
        d_aux: Option<&Array4<f64>>,
    ) -> Array4<f64> {
        let mut d_feat = self.head.backward(cache.head, d_logits);
        if let Some(extra) = d_features {
            d_feat += extra;
        }
        let d_cat = self.up.backward(cache.up, &d_feat);
        let (d_up, d_skip) = split_channels(&d_cat, cache.skip_channels);
        let mut grad = upsample_bilinear_backward(&d_up, 2);
        let mut d_skip = Some(d_skip);
        if let Some(d_aux) = d_aux {
            let d = self.aux_head.backward(cache.aux, d_aux);
            if let Some(s) = d_skip.as_mut() {
                *s += &d;
            }
        }
        for (i, (blocks, [c1, c2])) in self.down.iter_mut().zip(cache.down).enumerate().rev() {
            if i == 1 {
                grad += &d_skip.take().expect("skip gradient");
            }
            let g = blocks[1].backward(c2, &grad);
            grad = blocks[0].backward(c1, &g);
        }
        grad
    }

    /// Single-image forward: stride-4 features and logits upsampled to stride 1.
    pub fn forward(&self, image: &Array3<f64>, mode: Mode) -> Result<(FeatureMap, SemanticLogits)> {
        let x = image.clone().insert_axis(Axis(0));
        let (out, _) = self.forward_batch(&x, mode)?;
        let logits = upsample_bilinear(&out.logits, FEATURE_STRIDE);
        Ok((
            FeatureMap {
                data: out.features.index_axis_move(Axis(0), 0),
                stride: FEATURE_STRIDE,
            },
            SemanticLogits::new(logits.index_axis_move(Axis(0), 0), 1)?,
        ))
    }

    pub fn feature_channels(&self) -> usize {
        self.config.feature_channels
    }

    /// Sets every trainable weight and bias to zero (BN scale/shift too).
    pub fn zero_weights(&mut self) {
        self.visit("", &mut |_, slot| {
            if let Slot::Param(p) = slot {
                p.value.fill(0.0);
            }
        });
    }
}

impl Module for Backbone {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        for (i, [first, second]) in self.down.iter_mut().enumerate() {
            first.visit(&join(prefix, &format!("down{}.0", i + 1)), f);
            second.visit(&join(prefix, &format!("down{}.1", i + 1)), f);
        }
        self.up.visit(&join(prefix, "up"), f);
        self.head.visit(&join(prefix, "head"), f);
        self.aux_head.visit(&join(prefix, "aux_head"), f);
    }
}

/// Stride-4 logits of a single image in a batch, `(2, h, w)`.
pub(crate) fn batch_item(x: &Array4<f64>, i: usize) -> Array3<f64> {
    x.slice(s![i, .., .., ..]).to_owned()
}
