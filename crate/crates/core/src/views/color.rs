//! sRGB to CIE L*a*b* under the D65 reference white.
//!
//! Companding: `c <= 0.04045 ? c / 12.92 : ((c + 0.055) / 1.055)^2.4`.
//! Linear RGB to XYZ uses the sRGB/D65 matrix below; the white point is
//! `(0.95047, 1.0, 1.08883)`. `f(t) = cbrt(t)` above `(6/29)^3`, otherwise
//! `t / (3 (6/29)^2) + 4/29`.

use crate::error::{Error, Result};

const SRGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

pub const D65_WHITE: [f64; 3] = [0.95047, 1.0, 1.08883];

const DELTA: f64 = 6.0 / 29.0;

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn lab_f(t: f64) -> f64 {
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

/// Convert one pixel with channels in `[0, 1]` to `(L*, a*, b*)`.
pub fn rgb_to_lab(r: f64, g: f64, b: f64) -> Result<[f64; 3]> {
    for (name, c) in [("r", r), ("g", g), ("b", b)] {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::Domain {
                op: "rgb_to_lab",
                msg: format!("channel {name} = {c} outside [0, 1]"),
            });
        }
    }
    let lin = [srgb_to_linear(r), srgb_to_linear(g), srgb_to_linear(b)];
    let mut xyz = [0.0; 3];
    for (o, row) in xyz.iter_mut().zip(&SRGB_TO_XYZ) {
        *o = row.iter().zip(&lin).map(|(m, c)| m * c).sum();
    }
    let fx = lab_f(xyz[0] / D65_WHITE[0]);
    let fy = lab_f(xyz[1] / D65_WHITE[1]);
    let fz = lab_f(xyz[2] / D65_WHITE[2]);
    Ok([116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_and_black_points() {
        let w = rgb_to_lab(1.0, 1.0, 1.0).unwrap();
        assert!(
            (w[0] - 100.0).abs() < 1e-3 && w[1].abs() < 1e-3 && w[2].abs() < 1e-3,
            "{w:?}"
        );
        let k = rgb_to_lab(0.0, 0.0, 0.0).unwrap();
        assert!(k.iter().all(|v| v.abs() < 1e-3), "{k:?}");
    }

    #[test]
    fn out_of_range_channel_rejected() {
        assert!(rgb_to_lab(1.2, 0.0, 0.0).is_err());
        assert!(rgb_to_lab(0.0, -0.1, 0.0).is_err());
    }

    #[test]
    fn lightness_within_bounds() {
        for i in 0..=10 {
            let c = i as f64 / 10.0;
            let l = rgb_to_lab(c, c * 0.5, 1.0 - c).unwrap();
            assert!((0.0..=100.0).contains(&l[0]));
            assert!(l[1].abs() < 130.0 && l[2].abs() < 130.0);
        }
    }
}
