use ndarray::{concatenate, s, Array4, Axis};

pub fn relu(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Gradient of ReLU given its output `y`.
pub fn relu_backward(y: &Array4<f64>, dy: &Array4<f64>) -> Array4<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |d, &o| {
        if o <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

pub fn sigmoid(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(sigmoid_scalar)
}

pub(crate) fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Gradient of the logistic function given its output `y`.
pub fn sigmoid_backward(y: &Array4<f64>, dy: &Array4<f64>) -> Array4<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |d, &o| *d *= o * (1.0 - o));
    dx
}

/// Source taps along one axis for bilinear upsampling with
/// `align_corners = false`: `(lo, hi, w_lo, w_hi)` per output index.
fn axis_taps(input: usize, factor: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = 1.0 / factor as f64;
    (0..input * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let w_hi = src - lo as f64;
            (lo, hi, 1.0 - w_hi, w_hi)
        })
        .collect()
}

/// Bilinear upsampling by an integer factor (half-pixel centres, edge clamp).
pub fn upsample_bilinear(x: &Array4<f64>, factor: usize) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    if factor == 1 {
        return x.clone();
    }
    let ty = axis_taps(h, factor);
    let tx = axis_taps(w, factor);
    let mut out = Array4::zeros((n, c, h * factor, w * factor));
    for b in 0..n {
        for ch in 0..c {
            let src = x.slice(s![b, ch, .., ..]);
            let mut dst = out.slice_mut(s![b, ch, .., ..]);
            for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                    dst[[oy, ox]] = wy0 * (wx0 * src[[y0, x0]] + wx1 * src[[y0, x1]])
                        + wy1 * (wx0 * src[[y1, x0]] + wx1 * src[[y1, x1]]);
                }
            }
        }
    }
    out
}

/// Adjoint of [`upsample_bilinear`].
pub fn upsample_bilinear_backward(dy: &Array4<f64>, factor: usize) -> Array4<f64> {
    let (n, c, hh, ww) = dy.dim();
    if factor == 1 {
        return dy.clone();
    }
    let (h, w) = (hh / factor, ww / factor);
    let ty = axis_taps(h, factor);
    let tx = axis_taps(w, factor);
    let mut dx = Array4::zeros((n, c, h, w));
    for b in 0..n {
        for ch in 0..c {
            let src = dy.slice(s![b, ch, .., ..]);
            let mut dst = dx.slice_mut(s![b, ch, .., ..]);
            for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                    let g = src[[oy, ox]];
                    dst[[y0, x0]] += wy0 * wx0 * g;
                    dst[[y0, x1]] += wy0 * wx1 * g;
                    dst[[y1, x0]] += wy1 * wx0 * g;
                    dst[[y1, x1]] += wy1 * wx1 * g;
                }
            }
        }
    }
    dx
}

pub fn concat_channels(a: &Array4<f64>, b: &Array4<f64>) -> Array4<f64> {
    concatenate(Axis(1), &[a.view(), b.view()]).expect("matching spatial dims")
}

/// Splits a channel-concatenated gradient back into its two parts.
pub fn split_channels(d: &Array4<f64>, first: usize) -> (Array4<f64>, Array4<f64>) {
    (
        d.slice(s![.., ..first, .., ..]).to_owned(),
        d.slice(s![.., first.., .., ..]).to_owned(),
    )
}
