//! Gradient-check cases shared by the unit gradchecks and the acceptance run.
//! Each returns the worst relative error and where it occurred.

use earseg_core::backbone::{init_params, BackboneConfig, FEATURE_STRIDE};
use earseg_core::eam::{refine_batch, refine_batch_backward, Eam, FusionWeights};
use earseg_core::losses::{ce_loss_batch, ea_loss_batch, hm_loss_batch};
use earseg_core::nn::{upsample_bilinear, upsample_bilinear_backward, BatchNorm2d, Conv2d, Mode, Padding};
use ndarray::{Array2, Array4};
use rand::Rng;

use super::{check_input, check_params, project, random4, rng};

pub type Worst = (f64, String);

fn worse(a: Worst, b: Worst) -> Worst {
    if b.0 > a.0 {
        b
    } else {
        a
    }
}

pub fn conv(kernel: usize, stride: usize, pad: usize, mode: Padding, bias: bool) -> Worst {
    let mut r = rng(kernel as u64 * 10 + stride as u64);
    let mut conv = Conv2d::new(3, 4, kernel, stride, pad, bias, &mut r).with_padding_mode(mode);
    let x = random4((2, 3, 6, 6), &mut r);
    let (y, _) = conv.forward(&x);
    let proj = random4(y.dim(), &mut r);

    let mut dx = None;
    let params = check_params(
        &mut conv,
        |c| project(&c.forward(&x).0, &proj),
        |c| {
            let (_, cache) = c.forward(&x);
            dx = Some(c.backward(cache, &proj));
        },
    );
    let ex = check_input(&x, &dx.unwrap(), |x| project(&conv.forward(x).0, &proj));
    worse(params, (ex, "input".into()))
}

pub fn batchnorm(mode: Mode) -> Worst {
    let mut r = rng(5);
    let mut bn = BatchNorm2d::new(3);
    bn.gamma.value.mapv_inplace(|_| r.random_range(0.5..1.5));
    bn.beta.value.mapv_inplace(|_| r.random_range(-0.5..0.5));
    bn.running_mean.mapv_inplace(|_| r.random_range(-0.5..0.5));
    bn.running_var.mapv_inplace(|_| r.random_range(0.5..2.0));
    let x = random4((2, 3, 4, 4), &mut r);
    let proj = random4(x.dim(), &mut r);
    let mut dx = None;
    let params = check_params(
        &mut bn,
        |b| project(&b.forward(&x, mode).0, &proj),
        |b| {
            let (_, cache) = b.forward(&x, mode);
            dx = Some(b.backward(cache, &proj));
        },
    );
    let ex = check_input(&x, &dx.unwrap(), |x| project(&bn.forward(x, mode).0, &proj));
    worse(params, (ex, "input".into()))
}

pub fn random_gt(h: usize, w: usize, seed: u64) -> Array2<u8> {
    let mut r = rng(seed);
    Array2::from_shape_simple_fn((h, w), || u8::from(r.random_bool(0.3)))
}

/// Cross-entropy on stride-1 logits and the deep-supervision loss on stride-4 ones.
pub fn cross_entropy_head() -> Worst {
    let mut r = rng(8);
    let logits = random4((2, 2, 8, 8), &mut r) * 3.0;
    let gts = [random_gt(8, 8, 1), random_gt(8, 8, 2)];
    let refs: Vec<&Array2<u8>> = gts.iter().collect();
    let g = ce_loss_batch(&logits, &refs).unwrap();
    let ce = check_input(&logits, &g.grad, |l| ce_loss_batch(l, &refs).unwrap().value);

    let aux = random4((2, 2, 2, 2), &mut r);
    let g = hm_loss_batch(&aux, &refs).unwrap();
    let hm = check_input(&aux, &g.grad, |l| hm_loss_batch(l, &refs).unwrap().value);
    worse((ce, "ce".into()), (hm, "hm".into()))
}

pub fn upsample_adjoint() -> Worst {
    let mut r = rng(9);
    let x = random4((1, 2, 3, 5), &mut r);
    let proj = random4((1, 2, 12, 20), &mut r);
    let dx = upsample_bilinear_backward(&proj, 4);
    (check_input(&x, &dx, |x| project(&upsample_bilinear(x, 4), &proj)), "upsample".into())
}

/// Attention branch end to end on a 4×4×8 feature map: EAM, refinement,
/// upsampling, cross-entropy and the attention loss together.
pub fn eam_end_to_end() -> Worst {
    let mut r = rng(10);
    let mut eam = Eam::new(8, 3);
    let fm = random4((2, 8, 4, 4), &mut r);
    let l = random4((2, 2, 4, 4), &mut r);
    let gts = [random_gt(16, 16, 3), random_gt(16, 16, 4)];
    let gt_refs: Vec<&Array2<u8>> = gts.iter().collect();
    let ems: Vec<Array2<f64>> = (0..2).map(|i| random_gt(4, 4, 20 + i).mapv(f64::from)).collect();
    let em_refs: Vec<&Array2<f64>> = ems.iter().collect();
    let w = FusionWeights::default();

    let loss = |eam: &Eam, fm: &Array4<f64>, l: &Array4<f64>| {
        let (am, _) = eam.forward_batch(fm, Mode::Train).unwrap();
        let fused = upsample_bilinear(&refine_batch(l, &am, w), FEATURE_STRIDE);
        ce_loss_batch(&fused, &gt_refs).unwrap().value + 0.5 * ea_loss_batch(&em_refs, &am).unwrap().value
    };
    let grads = |eam: &mut Eam| {
        let (am, cache) = eam.forward_batch(&fm, Mode::Train).unwrap();
        let fused = upsample_bilinear(&refine_batch(&l, &am, w), FEATURE_STRIDE);
        let ce = ce_loss_batch(&fused, &gt_refs).unwrap();
        let ea = ea_loss_batch(&em_refs, &am).unwrap();
        let d_fused = upsample_bilinear_backward(&ce.grad, FEATURE_STRIDE);
        let (d_l, d_am) = refine_batch_backward(&l, &am, &d_fused, w);
        let d_fm = eam.backward_batch(cache, &(d_am + ea.grad * 0.5));
        (d_l, d_fm)
    };

    let mut out = None;
    let params = check_params(&mut eam, |e| loss(e, &fm, &l), |e| out = Some(grads(e)));
    let (d_l, d_fm) = out.unwrap();
    let efm = check_input(&fm, &d_fm, |x| loss(&eam, x, &l));
    let el = check_input(&l, &d_l, |x| loss(&eam, &fm, x));
    worse(worse(params, (efm, "features".into())), (el, "logits".into()))
}

pub fn backbone_end_to_end() -> Worst {
    let mut r = rng(11);
    let mut net = init_params(4, BackboneConfig { feature_channels: 4 }).unwrap();
    let x = random4((2, 3, 8, 8), &mut r);
    let gts = [random_gt(8, 8, 5), random_gt(8, 8, 6)];
    let refs: Vec<&Array2<u8>> = gts.iter().collect();
    let pf = random4((2, 4, 2, 2), &mut r);

    let loss = |n: &earseg_core::Backbone, x: &Array4<f64>| {
        let (o, _) = n.forward_batch(x, Mode::Train).unwrap();
        let up = upsample_bilinear(&o.logits, FEATURE_STRIDE);
        ce_loss_batch(&up, &refs).unwrap().value
            + 0.4 * hm_loss_batch(&o.aux_logits, &refs).unwrap().value
            + project(&o.features, &pf)
    };
    let mut dx = None;
    let params = check_params(
        &mut net,
        |n| loss(n, &x),
        |n| {
            let (o, cache) = n.forward_batch(&x, Mode::Train).unwrap();
            let up = upsample_bilinear(&o.logits, FEATURE_STRIDE);
            let ce = ce_loss_batch(&up, &refs).unwrap();
            let hm = hm_loss_batch(&o.aux_logits, &refs).unwrap();
            let d_logits = upsample_bilinear_backward(&ce.grad, FEATURE_STRIDE);
            dx = Some(n.backward_batch(cache, &d_logits, Some(&pf), Some(&(hm.grad * 0.4))));
        },
    );
    let ex = check_input(&x, &dx.unwrap(), |x| loss(&net, x));
    worse(params, (ex, "input".into()))
}
