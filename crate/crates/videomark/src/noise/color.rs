//! RGB <-> YCrCb conversion (ITU-R BT.601, full range).
//!
//! The matrices are defined on [0, 1] channels; pixels live in [-1, 1], so
//! the shift is folded into the affine offset. Both directions are exact
//! matrix inverses of each other and differentiable.

use ndarray::ArrayD;

use crate::autodiff::{Scalar, Tape, Var};

/// Row-major forward matrix on [0, 1] channels.
pub const RGB_TO_YCRCB: [f64; 9] = [
    0.299, 0.587, 0.114, // Y
    0.5, -0.4187, -0.0813, // Cr
    -0.1687, -0.3313, 0.5, // Cb
];

/// Offsets added after the matrix on [0, 1] channels.
pub const YCRCB_OFFSET: [f64; 3] = [0.0, 0.5, 0.5];

fn invert3(m: &[f64; 9]) -> [f64; 9] {
    let det = m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
        + m[2] * (m[3] * m[7] - m[4] * m[6]);
    let inv_det = 1.0 / det;
    [
        (m[4] * m[8] - m[5] * m[7]) * inv_det,
        (m[2] * m[7] - m[1] * m[8]) * inv_det,
        (m[1] * m[5] - m[2] * m[4]) * inv_det,
        (m[5] * m[6] - m[3] * m[8]) * inv_det,
        (m[0] * m[8] - m[2] * m[6]) * inv_det,
        (m[2] * m[3] - m[0] * m[5]) * inv_det,
        (m[3] * m[7] - m[4] * m[6]) * inv_det,
        (m[1] * m[6] - m[0] * m[7]) * inv_det,
        (m[0] * m[4] - m[1] * m[3]) * inv_det,
    ]
}

/// Forward affine on [-1, 1] pixels: `y = M x + c` with the [0, 1] shift
/// folded in: `y = 2 (A (x+1)/2 + b) - 1 = A x + (A 1 + 2 b - 1)`.
fn folded_forward() -> ([f64; 9], [f64; 3]) {
    let a = RGB_TO_YCRCB;
    let mut off = [0.0; 3];
    for i in 0..3 {
        off[i] = a[i * 3] + a[i * 3 + 1] + a[i * 3 + 2] + 2.0 * YCRCB_OFFSET[i] - 1.0;
    }
    (a, off)
}

fn folded_inverse() -> ([f64; 9], [f64; 3]) {
    let inv = invert3(&RGB_TO_YCRCB);
    // x = A^{-1} ((y+1)/2 - b) scaled back: x' = A^{-1} y + (A^{-1}(1 - 2b) - 1)
    let mut off = [0.0; 3];
    for i in 0..3 {
        let mut s = 0.0;
        for j in 0..3 {
            s += inv[i * 3 + j] * (1.0 - 2.0 * YCRCB_OFFSET[j]);
        }
        off[i] = s - 1.0;
    }
    (inv, off)
}

pub fn rgb_to_ycrcb<S: Scalar>(tape: &mut Tape<S>, x: Var) -> Var {
    let (m, off) = folded_forward();
    tape.channel_affine3(
        x,
        m.map(S::from_f),
        off.map(S::from_f),
    )
}

pub fn ycrcb_to_rgb<S: Scalar>(tape: &mut Tape<S>, x: Var) -> Var {
    let (m, off) = folded_inverse();
    tape.channel_affine3(
        x,
        m.map(S::from_f),
        off.map(S::from_f),
    )
}

/// Eager conversions on plain arrays, for tests and diagnostics.
pub fn rgb_to_ycrcb_array<S: Scalar>(x: &ArrayD<S>) -> ArrayD<S> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let y = rgb_to_ycrcb(&mut tape, v);
    tape.value(y).clone()
}

pub fn ycrcb_to_rgb_array<S: Scalar>(x: &ArrayD<S>) -> ArrayD<S> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let y = ycrcb_to_rgb(&mut tape, v);
    tape.value(y).clone()
}

/// Convert one [-1, 1] RGB pixel to [0, 1]-scale YCrCb (test oracle scale).
pub fn pixel_to_ycrcb01(rgb: [f64; 3]) -> [f64; 3] {
    let shifted = rgb.map(|v| (v + 1.0) / 2.0);
    let a = RGB_TO_YCRCB;
    let mut out = [0.0; 3];
    for i in 0..3 {
        out[i] = a[i * 3] * shifted[0] + a[i * 3 + 1] * shifted[1] + a[i * 3 + 2] * shifted[2]
            + YCRCB_OFFSET[i];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_tight() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x: ArrayD<f64> = ArrayD::from_shape_vec(
            IxDyn(&[1, 2, 5, 5, 3]),
            (0..150).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let back = ycrcb_to_rgb_array(&rgb_to_ycrcb_array(&x));
        for (a, b) in x.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn black_maps_to_zero_luma_neutral_chroma() {
        let y = pixel_to_ycrcb01([-1.0, -1.0, -1.0]);
        assert!((y[0]).abs() < 1e-12);
        assert!((y[1] - 0.5).abs() < 1e-12);
        assert!((y[2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn gray_has_neutral_chroma() {
        for g in [-0.7, -0.1, 0.33, 0.9] {
            let y = pixel_to_ycrcb01([g, g, g]);
            assert!((y[1] - 0.5).abs() < 1e-12);
            assert!((y[2] - 0.5).abs() < 1e-12);
        }
    }
}
