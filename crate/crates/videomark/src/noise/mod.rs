//! Differentiable noise layers (crop, scale, DCT compression) and the
//! non-differentiable MJPEG round-trip.
//!
//! The differentiable layers sit between encoder and decoder during training
//! so the learned representations survive the corresponding real-world
//! transforms. Random parameters are drawn once per batch so every sample in
//! the batch keeps the same tensor shape.

pub mod color;
pub mod mjpeg;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tape, Var};
use crate::error::{Error, Result};

/// Which noise layers participate in a pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSet {
    pub crop: bool,
    pub scale: bool,
    pub compress: bool,
}

impl LayerSet {
    pub fn all() -> Self {
        LayerSet {
            crop: true,
            scale: true,
            compress: true,
        }
    }

    pub fn none() -> Self {
        LayerSet {
            crop: false,
            scale: false,
            compress: false,
        }
    }

    /// Parse a comma-separated list such as `"crop,scale,compress"`.
    /// The empty string disables every layer.
    pub fn parse(text: &str) -> Result<Self> {
        let mut set = LayerSet::none();
        for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "crop" => set.crop = true,
                "scale" => set.scale = true,
                "compress" => set.compress = true,
                other => {
                    return Err(Error::config(format!("unknown noise layer {other:?}")));
                }
            }
        }
        Ok(set)
    }

    pub fn to_string_list(self) -> String {
        let mut parts = Vec::new();
        if self.crop {
            parts.push("crop");
        }
        if self.scale {
            parts.push("scale");
        }
        if self.compress {
            parts.push("compress");
        }
        parts.join(",")
    }
}

/// Configuration of the noise distribution.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Per-axis scaling factor range (fraction of the original size).
    pub scale_range: (f64, f64),
    /// Retained area fraction range for cropping.
    pub crop_range: (f64, f64),
    /// Fraction of the highest-frequency DCT coefficients to zero.
    pub compress_drop_range: (f64, f64),
    pub layers: LayerSet,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            scale_range: (0.8, 1.0),
            crop_range: (0.8, 1.0),
            compress_drop_range: (0.0, 0.10),
            layers: LayerSet::all(),
            seed: 0,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [
            ("scale_range", self.scale_range),
            ("crop_range", self.crop_range),
        ] {
            if !(0.0 < lo && lo <= hi && hi <= 1.0) {
                return Err(Error::config(format!(
                    "{name} must satisfy 0 < lo <= hi <= 1; got ({lo}, {hi})"
                )));
            }
        }
        let (lo, hi) = self.compress_drop_range;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::config(format!(
                "compress_drop_range must satisfy 0 <= lo <= hi <= 1; got ({lo}, {hi})"
            )));
        }
        Ok(())
    }
}

/// Concrete transform parameters for one application, drawn from a
/// [`NoiseConfig`] or constructed deterministically for evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw {
    /// (w0, h0, out_w, out_h)
    pub crop: Option<(usize, usize, usize, usize)>,
    /// (out_w, out_h)
    pub scale: Option<(usize, usize)>,
    /// Fraction of coefficients to zero.
    pub compress_drop: Option<f64>,
}

impl NoiseDraw {
    pub fn identity() -> Self {
        NoiseDraw {
            crop: None,
            scale: None,
            compress_drop: None,
        }
    }

    /// Sample transform parameters for clips of spatial size `(w, h)`.
    /// Layers compose crop -> scale -> compress, so the scale draw applies to
    /// the cropped dimensions.
    pub fn sample(cfg: &NoiseConfig, (w, h): (usize, usize), rng: &mut impl Rng) -> Self {
        let mut cur = (w, h);
        let crop = cfg.layers.crop.then(|| {
            let area = rng.random_range(cfg.crop_range.0..=cfg.crop_range.1);
            let (cw, ch) = crop_dims(cur, area);
            let w0 = rng.random_range(0..=cur.0 - cw);
            let h0 = rng.random_range(0..=cur.1 - ch);
            cur = (cw, ch);
            (w0, h0, cw, ch)
        });
        let scale = cfg.layers.scale.then(|| {
            let fw = rng.random_range(cfg.scale_range.0..=cfg.scale_range.1);
            let fh = rng.random_range(cfg.scale_range.0..=cfg.scale_range.1);
            let sw = scaled_dim(cur.0, fw);
            let sh = scaled_dim(cur.1, fh);
            cur = (sw, sh);
            (sw, sh)
        });
        let compress_drop = cfg.layers.compress.then(|| {
            rng.random_range(cfg.compress_drop_range.0..=cfg.compress_drop_range.1)
        });
        NoiseDraw {
            crop,
            scale,
            compress_drop,
        }
    }
}

/// Equal-aspect crop window dimensions retaining `area` of the frame.
pub fn crop_dims((w, h): (usize, usize), area: f64) -> (usize, usize) {
    let side = area.sqrt();
    let cw = ((w as f64 * side).ceil() as usize).clamp(1, w);
    let ch = ((h as f64 * side).ceil() as usize).clamp(1, h);
    (cw, ch)
}

/// Output dimension after scaling by `factor`.
pub fn scaled_dim(dim: usize, factor: f64) -> usize {
    ((dim as f64 * factor).round() as usize).max(1)
}

/// Random crop as a tape op (differentiable w.r.t. the retained pixels).
pub fn apply_crop<S: Scalar>(tape: &mut Tape<S>, x: Var, window: (usize, usize, usize, usize)) -> Var {
    let (w0, h0, ow, oh) = window;
    tape.crop(x, w0, h0, ow, oh)
}

/// Bilinear rescale as a tape op.
pub fn apply_scale<S: Scalar>(tape: &mut Tape<S>, x: Var, out: (usize, usize)) -> Var {
    tape.resize_bilinear(x, out.0, out.1)
}

/// Frequency mask for the compression layer: positions ranked by the
/// normalized index sum `u/T + v/W + w/H` (ties broken lexicographically by
/// `(u, v, w)`); the top `drop` fraction is zeroed across all channels.
pub fn frequency_mask<S: Scalar>(dims: (usize, usize, usize), drop: f64) -> ArrayD<S> {
    let (t, w, h) = dims;
    let n = t * w * h;
    let n_drop = ((drop * n as f64).floor() as usize).min(n);
    let mut order: Vec<(f64, usize, usize, usize)> = Vec::with_capacity(n);
    for u in 0..t {
        for v in 0..w {
            for q in 0..h {
                let score = u as f64 / t as f64 + v as f64 / w as f64 + q as f64 / h as f64;
                order.push((score, u, v, q));
            }
        }
    }
    order.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
            .then(a.3.cmp(&b.3))
    });
    let mut mask = ArrayD::from_elem(IxDyn(&[1, t, w, h, 1]), S::one());
    {
        let ms = mask.as_slice_mut().unwrap();
        for &(_, u, v, q) in order.iter().rev().take(n_drop) {
            ms[(u * w + v) * h + q] = S::zero();
        }
    }
    mask
}

/// Differentiable DCT compression: YCrCb conversion, orthonormal 3-D DCT over
/// the full clip volume per channel, zeroing of the `drop` highest-frequency
/// coefficients, inverse DCT, RGB conversion, clamp. The mask is a constant
/// for the backward pass.
pub fn apply_compress<S: Scalar>(tape: &mut Tape<S>, x: Var, drop: f64) -> Var {
    let s = tape.value(x).shape().to_vec();
    let (b, t, w, h) = (s[0], s[1], s[2], s[3]);
    let ycc = color::rgb_to_ycrcb(tape, x);
    let freq = tape.dct3(ycc, false);
    let mask3 = frequency_mask::<S>((t, w, h), drop);
    // broadcast the [1, T, W, H, 1] mask over batch and channels
    let mut full = ArrayD::from_elem(IxDyn(&s), S::one());
    {
        let fs = full.as_slice_mut().unwrap();
        let ms = mask3.as_slice().unwrap();
        let per = t * w * h;
        for bi in 0..b {
            for p in 0..per {
                let m = ms[p];
                for c in 0..3 {
                    fs[(bi * per + p) * 3 + c] = m;
                }
            }
        }
    }
    let masked = tape.mul_const_mask(freq, full);
    let back = tape.dct3(masked, true);
    let rgb = color::ycrcb_to_rgb(tape, back);
    tape.clamp(rgb, S::from_f(-1.0), S::one())
}

/// Apply every enabled layer of a draw, in order crop -> scale -> compress.
/// An empty draw returns the input unchanged.
pub fn apply_noise<S: Scalar>(tape: &mut Tape<S>, x: Var, draw: &NoiseDraw) -> Var {
    let mut cur = x;
    if let Some(window) = draw.crop {
        cur = apply_crop(tape, cur, window);
    }
    if let Some(out) = draw.scale {
        cur = apply_scale(tape, cur, out);
    }
    if let Some(drop) = draw.compress_drop {
        cur = apply_compress(tape, cur, drop);
    }
    cur
}

/// Eager convenience: run a draw on a plain `[B, T, W, H, 3]` array.
pub fn apply_noise_array<S: Scalar>(x: &ArrayD<S>, draw: &NoiseDraw) -> ArrayD<S> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let y = apply_noise(&mut tape, v, draw);
    tape.value(y).clone()
}
