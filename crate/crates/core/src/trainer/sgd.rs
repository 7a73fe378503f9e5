use std::collections::BTreeMap;

use ndarray::ArrayD;

use crate::nn::{Module, Slot};

/// Heavy-ball SGD: `v ← m·v + g`, `w ← w − lr·v`.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    pub momentum: f64,
    /// Velocity per parameter name.
    pub buffers: BTreeMap<String, ArrayD<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Sgd {
            momentum,
            buffers: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, model: &mut dyn Module, prefix: &str, lr: f64) {
        let momentum = self.momentum;
        let buffers = &mut self.buffers;
        model.visit(prefix, &mut |name, slot| {
            let Slot::Param(p) = slot else { return };
            let v = buffers
                .entry(name.to_string())
                .or_insert_with(|| ArrayD::zeros(p.value.raw_dim()));
            v.zip_mut_with(&p.grad, |v, &g| *v = momentum * *v + g);
            p.value.zip_mut_with(v, |w, &v| *w -= lr * v);
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Param;

    struct One(Param);

    impl Module for One {
        fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
            f(&crate::nn::join(prefix, "w"), Slot::Param(&mut self.0));
        }
    }

    #[test]
    fn momentum_accumulates() {
        let mut m = One(Param::filled(&[1], 1.0));
        let mut sgd = Sgd::new(0.9);
        m.0.grad.fill(1.0);
        sgd.step(&mut m, "", 0.1);
        assert!((m.0.value[[0]] - 0.9).abs() < 1e-15);
        sgd.step(&mut m, "", 0.1);
        // v = 0.9 * 1 + 1 = 1.9
        assert!((m.0.value[[0]] - (0.9 - 0.19)).abs() < 1e-15);
        assert_eq!(sgd.buffers["w"][[0]], 1.9);
    }

    #[test]
    fn zero_lr_is_noop() {
        let mut m = One(Param::filled(&[3], 2.0));
        m.0.grad.fill(5.0);
        let mut sgd = Sgd::new(0.9);
        sgd.step(&mut m, "", 0.0);
        assert!(m.0.value.iter().all(|v| *v == 2.0));
    }
}
