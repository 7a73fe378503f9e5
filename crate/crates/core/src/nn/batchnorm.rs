use ndarray::{Array1, Array4, ArrayD, Axis, IxDyn};

use super::{join, Mode, Module, Param, Slot};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization over the N, H and W axes.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: ArrayD<f64>,
    /// Unbiased estimate, as accumulated during training.
    pub running_var: ArrayD<f64>,
    pub channels: usize,
}

pub struct BnCache {
    xhat: Array4<f64>,
    inv_std: Array1<f64>,
    mode: Mode,
    batch_mean: Array1<f64>,
    /// Biased batch variance.
    batch_var: Array1<f64>,
    count: usize,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::filled(&[channels], 1.0),
            beta: Param::zeros(&[channels]),
            running_mean: ArrayD::zeros(IxDyn(&[channels])),
            running_var: ArrayD::ones(IxDyn(&[channels])),
            channels,
        }
    }

    /// Pure forward pass. Running statistics are only changed by
    /// [`Self::update_running`].
    pub fn forward(&self, x: &Array4<f64>, mode: Mode) -> (Array4<f64>, BnCache) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.channels, "batch-norm channels");
        let m = (n * h * w) as f64;
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = Array1::zeros(c);
                let mut var = Array1::zeros(c);
                for ch in 0..c {
                    let lane = x.index_axis(Axis(1), ch);
                    let mu = lane.iter().sum::<f64>() / m;
                    let v = lane.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m;
                    mean[ch] = mu;
                    var[ch] = v;
                }
                (mean, var)
            }
            Mode::Eval => (
                Array1::from_iter(self.running_mean.iter().copied()),
                Array1::from_iter(self.running_var.iter().copied()),
            ),
        };
        let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
        let mut xhat = x.clone();
        let mut y = Array4::zeros((n, c, h, w));
        for ch in 0..c {
            let (mu, is) = (mean[ch], inv_std[ch]);
            let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
            let mut xl = xhat.index_axis_mut(Axis(1), ch);
            xl.mapv_inplace(|v| (v - mu) * is);
            let mut yl = y.index_axis_mut(Axis(1), ch);
            yl.zip_mut_with(&xl, |o, &v| *o = g * v + b);
        }
        let cache = BnCache {
            xhat,
            inv_std,
            mode,
            batch_mean: mean,
            batch_var: var,
            count: n * h * w,
        };
        (y, cache)
    }

    /// Folds the batch statistics of a train-mode forward pass into the
    /// running estimates with momentum [`BN_MOMENTUM`].
    pub fn update_running(&mut self, cache: &BnCache) {
        if cache.mode != Mode::Train {
            return;
        }
        let m = cache.count as f64;
        let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
        for ch in 0..self.channels {
            self.running_mean[ch] =
                (1.0 - BN_MOMENTUM) * self.running_mean[ch] + BN_MOMENTUM * cache.batch_mean[ch];
            self.running_var[ch] = (1.0 - BN_MOMENTUM) * self.running_var[ch]
                + BN_MOMENTUM * cache.batch_var[ch] * unbias;
        }
    }

    pub fn backward(&mut self, cache: BnCache, dy: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = dy.dim();
        let m = (n * h * w) as f64;
        let mut dx = Array4::zeros((n, c, h, w));
        for ch in 0..c {
            let dyl = dy.index_axis(Axis(1), ch);
            let xl = cache.xhat.index_axis(Axis(1), ch);
            let sum_dy: f64 = dyl.iter().sum();
            let sum_dy_xhat: f64 = dyl.iter().zip(xl.iter()).map(|(a, b)| a * b).sum();
            self.gamma.grad[ch] += sum_dy_xhat;
            self.beta.grad[ch] += sum_dy;
            let g = self.gamma.value[ch];
            let is = cache.inv_std[ch];
            let mut dxl = dx.index_axis_mut(Axis(1), ch);
            match cache.mode {
                Mode::Train => {
                    let scale = g * is / m;
                    ndarray::Zip::from(&mut dxl).and(&dyl).and(&xl).for_each(|d, &g_out, &xh| {
                        *d = scale * (m * g_out - sum_dy - xh * sum_dy_xhat);
                    });
                }
                Mode::Eval => {
                    dxl.zip_mut_with(&dyl, |d, &g_out| *d = g * is * g_out);
                }
            }
        }
        dx
    }
}

impl Module for BatchNorm2d {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        f(&join(prefix, "gamma"), Slot::Param(&mut self.gamma));
        f(&join(prefix, "beta"), Slot::Param(&mut self.beta));
        f(&join(prefix, "running_mean"), Slot::Buffer(&mut self.running_mean));
        f(&join(prefix, "running_var"), Slot::Buffer(&mut self.running_var));
    }
}
