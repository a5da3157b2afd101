use crate::error::{Error, Result};
use crate::tensor::NdArray;

/// Hexcone RGB -> HSV for one pixel; all components in `[0, 1]`, hue scaled
/// from degrees to `[0, 1)`.
pub fn rgb_to_hsv_pixel(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    if delta == 0.0 {
        return (0.0, s, v);
    }
    let sector = if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    ((sector / 6.0).rem_euclid(1.0), s, v)
}

/// Converts a `[3, h, w]` RGB image to HSV, channel by channel.
pub fn rgb_to_hsv(x: &NdArray) -> Result<NdArray> {
    let s = x.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("rgb_to_hsv", format!("need [3, h, w], got {s:?}")));
    }
    let plane = s[1] * s[2];
    let d = x.data();
    let mut out = vec![0.0; d.len()];
    for i in 0..plane {
        let (h, sat, v) = rgb_to_hsv_pixel(d[i], d[plane + i], d[2 * plane + i]);
        out[i] = h;
        out[plane + i] = sat;
        out[2 * plane + i] = v;
    }
    NdArray::new(s.to_vec(), out)
}

/// Appends HSV channels to an `[n, 3, h, w]` RGB batch, giving `[n, 6, h, w]`.
pub fn with_hsv(batch: &NdArray) -> Result<NdArray> {
    let s = batch.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::shape("with_hsv", format!("need [n, 3, h, w], got {s:?}")));
    }
    let img = 3 * s[2] * s[3];
    let mut out = Vec::with_capacity(2 * batch.len());
    for n in 0..s[0] {
        let rgb = NdArray::new(vec![3, s[2], s[3]], batch.data()[n * img..(n + 1) * img].to_vec())?;
        out.extend_from_slice(rgb.data());
        out.extend_from_slice(rgb_to_hsv(&rgb)?.data());
    }
    NdArray::new(vec![s[0], 6, s[2], s[3]], out)
}

/// Rotates hue by `degrees` about the gray axis.
pub(crate) fn hue_rotation_matrix(degrees: f64) -> [[f64; 3]; 3] {
    let (sin, cos) = degrees.to_radians().sin_cos();
    let k = (1.0 - cos) / 3.0;
    let r = 3f64.sqrt().recip() * sin;
    [[cos + k, k - r, k + r], [k + r, cos + k, k - r], [k - r, k + r, cos + k]]
}
