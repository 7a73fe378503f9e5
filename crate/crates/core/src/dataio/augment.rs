use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::RetinalSample;

pub const NOISE_SIGMA: f64 = 0.02;

/// One draw of the augmentation pipeline. Geometry is applied in the order
/// horizontal flip, vertical flip, counter-clockwise rotation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AugmentPlan {
    pub hflip: bool,
    pub vflip: bool,
    /// Number of quarter turns, `0..4`.
    pub quarter_turns: u8,
    pub noise: bool,
}

impl AugmentPlan {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    /// Each transform fires independently with probability 0.5. Non-square
    /// inputs only rotate by a half turn so that the shape is preserved.
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, square: bool) -> Self {
        let hflip = rng.random_bool(0.5);
        let vflip = rng.random_bool(0.5);
        let rotate = rng.random_bool(0.5);
        let turns = rng.random_range(1..=3u8);
        let noise = rng.random_bool(0.5);
        let quarter_turns = match (rotate, square) {
            (false, _) => 0,
            (true, true) => turns,
            (true, false) => 2,
        };
        AugmentPlan {
            hflip,
            vflip,
            quarter_turns,
            noise,
        }
    }

    fn geometry<T: Clone>(&self, m: ArrayView2<'_, T>) -> Array2<T> {
        let mut v = m;
        if self.hflip {
            v.invert_axis(Axis(1));
        }
        if self.vflip {
            v.invert_axis(Axis(0));
        }
        for _ in 0..self.quarter_turns {
            // transpose + row reversal is one counter-clockwise quarter turn
            v = v.reversed_axes();
            v.invert_axis(Axis(0));
        }
        v.to_owned()
    }

    pub fn apply_mask(&self, m: &Array2<u8>) -> Array2<u8> {
        self.geometry(m.view())
    }

    /// Geometry only; noise is handled separately by [`Self::apply`].
    pub fn apply_image_geometry(&self, image: &Array3<f64>) -> Array3<f64> {
        let planes: Vec<Array2<f64>> = (0..image.dim().0)
            .map(|c| self.geometry(image.slice(s![c, .., ..])))
            .collect();
        let views: Vec<_> = planes.iter().map(|p| p.view()).collect();
        ndarray::stack(Axis(0), &views).expect("equal planes")
    }

    pub fn apply<R: Rng + ?Sized>(&self, sample: &RetinalSample, rng: &mut R) -> RetinalSample {
        let mut image = self.apply_image_geometry(&sample.image);
        if self.noise {
            let normal = Normal::new(0.0, NOISE_SIGMA).expect("finite sigma");
            image.mapv_inplace(|v| (v + normal.sample(rng)).clamp(0.0, 1.0));
        }
        RetinalSample {
            id: sample.id.clone(),
            image,
            gt: self.apply_mask(&sample.gt),
            fov: sample.fov.as_ref().map(|f| self.apply_mask(f)),
        }
    }
}

pub fn augment<R: Rng + ?Sized>(sample: &RetinalSample, rng: &mut R) -> RetinalSample {
    augment_with_masks(sample, &[], rng).0
}

/// Augments a sample and applies the same geometry to auxiliary masks
/// (for example cached error maps).
pub fn augment_with_masks<R: Rng + ?Sized>(
    sample: &RetinalSample,
    extra: &[&Array2<u8>],
    rng: &mut R,
) -> (RetinalSample, Vec<Array2<u8>>) {
    let plan = AugmentPlan::draw(rng, sample.height() == sample.width());
    let out = plan.apply(sample, rng);
    let masks = extra.iter().map(|m| plan.apply_mask(m)).collect();
    (out, masks)
}
