//! Training objectives. Every loss returns its value together with the
//! gradient with respect to its prediction input. Reductions run
//! sequentially in memory order so results are reproducible.

use ndarray::{Array2, Array3, Array4, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::backbone::SemanticLogits;
use crate::eam::AttentionMap;
use crate::errormaps::ErrorMap;
use crate::error::{Error, Result};
use crate::nn::{upsample_bilinear, upsample_bilinear_backward};

/// Weights of the composite objective `η·L_CE + γ·L_HM + ε·L_EA`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub eta: f64,
    pub gamma: f64,
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            eta: 1.0,
            gamma: 0.4,
            epsilon: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("eta", self.eta), ("gamma", self.gamma), ("epsilon", self.epsilon)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidArgument(format!("loss weight {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad<G> {
    pub value: f64,
    pub grad: G,
}

fn check_ce_shapes(logits: ArrayView3<'_, f64>, gt: &Array2<u8>) -> Result<()> {
    let (c, h, w) = logits.dim();
    if c != 2 || gt.dim() != (h, w) {
        let (gh, gw) = gt.dim();
        return Err(Error::shape("cross-entropy inputs", &[2, gh, gw], &[c, h, w]));
    }
    Ok(())
}

/// Mean two-class softmax cross-entropy over every pixel of the batch.
/// `logits` is `[n, 2, H, W]`, `gt` holds one `(H, W)` mask per image.
pub fn ce_loss_batch(logits: &Array4<f64>, gt: &[&Array2<u8>]) -> Result<LossGrad<Array4<f64>>> {
    let (n, _, h, w) = logits.dim();
    if gt.len() != n {
        return Err(Error::shape("cross-entropy batch", &[n], &[gt.len()]));
    }
    let count = (n * h * w) as f64;
    let mut grad = Array4::zeros(logits.dim());
    let mut total = 0.0;
    for (b, mask) in gt.iter().enumerate() {
        let l = logits.index_axis(Axis(0), b);
        check_ce_shapes(l, mask)?;
        for y in 0..h {
            for x in 0..w {
                let (l0, l1) = (l[[0, y, x]], l[[1, y, x]]);
                let m = l0.max(l1);
                let lse = m + ((l0 - m).exp() + (l1 - m).exp()).ln();
                let target = usize::from(mask[[y, x]] == 1);
                total += lse - if target == 1 { l1 } else { l0 };
                let p1 = (l1 - lse).exp();
                let p0 = (l0 - lse).exp();
                grad[[b, 0, y, x]] = (p0 - f64::from(u8::from(target == 0))) / count;
                grad[[b, 1, y, x]] = (p1 - f64::from(u8::from(target == 1))) / count;
            }
        }
    }
    Ok(LossGrad {
        value: total / count,
        grad,
    })
}

/// Cross-entropy of stride-1 logits against the ground truth.
pub fn ce_loss(logits: &SemanticLogits, gt: &Array2<u8>) -> Result<LossGrad<Array3<f64>>> {
    let batched = logits.data.clone().insert_axis(Axis(0));
    let r = ce_loss_batch(&batched, &[gt])?;
    Ok(LossGrad {
        value: r.value,
        grad: r.grad.index_axis_move(Axis(0), 0),
    })
}

/// Deep-supervision loss on an auxiliary low-resolution head: the aux
/// logits are bilinearly upsampled to the mask resolution and scored with
/// cross-entropy. The gradient is w.r.t. the low-resolution aux logits.
pub fn hm_loss_batch(aux_logits: &Array4<f64>, gt: &[&Array2<u8>]) -> Result<LossGrad<Array4<f64>>> {
    let (_, _, h, w) = aux_logits.dim();
    let Some(first) = gt.first() else {
        return Err(Error::EmptyDataset);
    };
    let (gh, gw) = first.dim();
    if h == 0 || gh % h != 0 || gw % w != 0 || gh / h != gw / w {
        return Err(Error::shape("auxiliary head vs mask", &[gh, gw], &[h, w]));
    }
    let factor = gh / h;
    let up = upsample_bilinear(aux_logits, factor);
    let r = ce_loss_batch(&up, gt)?;
    Ok(LossGrad {
        value: r.value,
        grad: upsample_bilinear_backward(&r.grad, factor),
    })
}

pub fn hm_loss(aux_logits: &SemanticLogits, gt: &Array2<u8>) -> Result<LossGrad<Array3<f64>>> {
    let r = hm_loss_batch(&aux_logits.data.clone().insert_axis(Axis(0)), &[gt])?;
    Ok(LossGrad {
        value: r.value,
        grad: r.grad.index_axis_move(Axis(0), 0),
    })
}

/// Mean squared difference between aligned error maps and attention maps.
/// `am` is `[n, 1, h, w]`.
pub fn ea_loss_batch(em: &[&Array2<f64>], am: &Array4<f64>) -> Result<LossGrad<Array4<f64>>> {
    let (n, c, h, w) = am.dim();
    if c != 1 || em.len() != n {
        return Err(Error::shape("attention batch", &[em.len(), 1], &[n, c]));
    }
    let count = (n * h * w) as f64;
    let mut grad = Array4::zeros(am.dim());
    let mut total = 0.0;
    for (b, target) in em.iter().enumerate() {
        if target.dim() != (h, w) {
            let (eh, ew) = target.dim();
            return Err(Error::shape("error map vs attention map", &[h, w], &[eh, ew]));
        }
        for ((y, x), &t) in target.indexed_iter() {
            let d = am[[b, 0, y, x]] - t;
            total += d * d;
            grad[[b, 0, y, x]] = 2.0 * d / count;
        }
    }
    Ok(LossGrad {
        value: total / count,
        grad,
    })
}

pub fn ea_loss(em: &ErrorMap, am: &AttentionMap) -> Result<LossGrad<Array2<f64>>> {
    if em.data.dim() != am.data.dim() {
        let (a, b) = em.data.dim();
        let (c, d) = am.data.dim();
        return Err(Error::shape("error map vs attention map", &[a, b], &[c, d]));
    }
    let target = em.as_f64();
    let batched = am.data.clone().insert_axis(Axis(0)).insert_axis(Axis(0));
    let r = ea_loss_batch(&[&target], &batched)?;
    Ok(LossGrad {
        value: r.value,
        grad: r.grad.index_axis_move(Axis(0), 0).index_axis_move(Axis(0), 0),
    })
}

pub fn total_loss(lce: f64, lhm: f64, lea: f64, w: LossWeights) -> f64 {
    w.eta * lce + w.gamma * lhm + w.epsilon * lea
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn logits_const(bg: f64, fg: f64, h: usize, w: usize) -> SemanticLogits {
        let mut d = Array3::zeros((2, h, w));
        d.index_axis_mut(Axis(0), 0).fill(bg);
        d.index_axis_mut(Axis(0), 1).fill(fg);
        SemanticLogits::new(d, 1).unwrap()
    }

    #[test]
    fn uniform_logits_give_ln2() {
        let gt = arr2(&[[0u8, 1], [1, 0]]);
        let r = ce_loss(&logits_const(0.3, 0.3, 2, 2), &gt).unwrap();
        assert!((r.value - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_vanish() {
        let gt = Array2::<u8>::ones((3, 3));
        let r = ce_loss(&logits_const(0.0, 20.0, 3, 3), &gt).unwrap();
        assert!(r.value < 1e-3);
        let gt = Array2::<u8>::zeros((3, 3));
        let r = hm_loss(&logits_const(20.0, 0.0, 1, 1), &gt).unwrap();
        assert!(r.value < 1e-3);
    }

    #[test]
    fn ce_is_stable_for_huge_logits() {
        let gt = Array2::<u8>::zeros((1, 1));
        let r = ce_loss(&logits_const(0.0, 1e4, 1, 1), &gt).unwrap();
        assert!((r.value - 1e4).abs() < 1e-6);
    }

    #[test]
    fn ea_examples() {
        let em = ErrorMap { data: arr2(&[[1u8, 0], [0, 0]]), stride: 4 };
        let am = AttentionMap { data: arr2(&[[0.5, 0.0], [0.0, 0.5]]), stride: 4 };
        assert_eq!(ea_loss(&em, &am).unwrap().value, 0.125);

        let exact = AttentionMap { data: em.as_f64(), stride: 4 };
        assert_eq!(ea_loss(&em, &exact).unwrap().value, 0.0);

        let ones = ErrorMap { data: Array2::ones((3, 3)), stride: 4 };
        let zeros = AttentionMap { data: Array2::zeros((3, 3)), stride: 4 };
        assert_eq!(ea_loss(&ones, &zeros).unwrap().value, 1.0);
    }

    #[test]
    fn ea_shape_mismatch() {
        let em = ErrorMap { data: Array2::zeros((2, 2)), stride: 4 };
        let am = AttentionMap { data: Array2::zeros((2, 3)), stride: 4 };
        assert!(ea_loss(&em, &am).is_err());
    }

    #[test]
    fn composite() {
        let w = LossWeights::default();
        assert_eq!(total_loss(1.0, 0.5, 0.2, w), 1.3);
        assert_eq!(total_loss(0.0, 0.0, 0.0, w), 0.0);
        let stage1 = LossWeights { epsilon: 0.0, ..w };
        assert_eq!(total_loss(0.7, 0.3, 123.0, stage1), 0.7 + 0.4 * 0.3);
        let no_hm = LossWeights { gamma: 0.0, ..w };
        assert_eq!(total_loss(0.7, 99.0, 0.0, no_hm), 0.7);
    }

    #[test]
    fn weights_validate() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { gamma: -1.0, ..Default::default() }.validate().is_err());
        assert!(LossWeights { eta: f64::NAN, ..Default::default() }.validate().is_err());
    }
}
