use ndarray::Array4;
use rand::Rng;

use super::{join, relu, relu_backward, BatchNorm2d, BnCache, Conv2d, ConvCache, Mode, Module, Slot};

/// `relu(bn(conv3x3(x)))` with a bias-free convolution.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

pub struct ConvBnReluCache {
    conv: ConvCache,
    bn: BnCache,
    out: Array4<f64>,
}

impl ConvBnRelu {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, stride: usize, rng: &mut R) -> Self {
        ConvBnRelu {
            conv: Conv2d::new(in_channels, out_channels, 3, stride, 1, false, rng),
            bn: BatchNorm2d::new(out_channels),
        }
    }

    pub fn forward(&self, x: &Array4<f64>, mode: Mode) -> (Array4<f64>, ConvBnReluCache) {
        let (z, conv) = self.conv.forward(x);
        let (z, bn) = self.bn.forward(&z, mode);
        let out = relu(&z);
        (out.clone(), ConvBnReluCache { conv, bn, out })
    }

    pub fn update_running(&mut self, cache: &ConvBnReluCache) {
        self.bn.update_running(&cache.bn);
    }

    pub fn backward(&mut self, cache: ConvBnReluCache, dy: &Array4<f64>) -> Array4<f64> {
        let d = relu_backward(&cache.out, dy);
        let d = self.bn.backward(cache.bn, &d);
        self.conv.backward(cache.conv, &d)
    }
}

impl Module for ConvBnRelu {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }
}
