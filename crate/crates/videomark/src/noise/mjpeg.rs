//! 8-bit quantization and the non-differentiable MJPEG round-trip.
//!
//! MJPEG is a sequence of independently coded baseline JPEG frames. Frames
//! are encoded with 4:4:4 chroma by default (subsampling would discard
//! chroma-carried watermark content); 4:2:0 is available behind a flag.

use ndarray::{ArrayD, IxDyn};

use crate::autodiff::Scalar;
use crate::error::{Error, Result};

/// Chroma handling for the JPEG codec.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChromaMode {
    /// No subsampling (4:4:4); the default.
    Full,
    /// 2x2 subsampling (4:2:0), for sensitivity analysis.
    Subsampled,
}

impl Default for ChromaMode {
    fn default() -> Self {
        ChromaMode::Full
    }
}

/// Map a pixel from [-1, 1] to the 8-bit grid.
#[inline]
pub fn quantize_u8(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Inverse of [`quantize_u8`] onto [-1, 1].
#[inline]
pub fn dequantize_u8(k: u8) -> f64 {
    k as f64 / 127.5 - 1.0
}

/// Quantize-only round trip (the "identity" evaluation channel).
pub fn quantize_roundtrip<S: Scalar>(clip: &ArrayD<S>) -> ArrayD<S> {
    clip.mapv(|v| S::from_f(dequantize_u8(quantize_u8(v.to_f()))))
}

/// Pack one frame of a `[T, W, H, 3]` clip into a row-major RGB8 buffer.
/// The W axis is image width, so `buf[(y * w + x) * 3 + c] = clip[t, x, y, c]`.
pub fn frame_to_rgb8<S: Scalar>(clip: &ArrayD<S>, t: usize) -> (Vec<u8>, usize, usize) {
    let s = clip.shape();
    let (w, h) = (s[1], s[2]);
    let cs = clip.as_slice().unwrap();
    let frame = &cs[t * w * h * 3..(t + 1) * w * h * 3];
    let mut buf = vec![0u8; w * h * 3];
    for x in 0..w {
        for y in 0..h {
            for c in 0..3 {
                buf[(y * w + x) * 3 + c] = quantize_u8(frame[(x * h + y) * 3 + c].to_f());
            }
        }
    }
    (buf, w, h)
}

/// Write a row-major RGB8 buffer into frame `t` of a `[T, W, H, 3]` clip.
pub fn rgb8_to_frame<S: Scalar>(clip: &mut ArrayD<S>, t: usize, buf: &[u8], w: usize, h: usize) {
    let cs = clip.as_slice_mut().unwrap();
    let frame = &mut cs[t * w * h * 3..(t + 1) * w * h * 3];
    for x in 0..w {
        for y in 0..h {
            for c in 0..3 {
                frame[(x * h + y) * 3 + c] = S::from_f(dequantize_u8(buf[(y * w + x) * 3 + c]));
            }
        }
    }
}

/// Encode one RGB8 frame as a baseline JPEG.
pub fn encode_jpeg_frame(
    rgb: &[u8],
    w: usize,
    h: usize,
    quality: u8,
    chroma: ChromaMode,
    frame_index: usize,
) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut enc = jpeg_encoder::Encoder::new(&mut out, quality);
    enc.set_sampling_factor(match chroma {
        ChromaMode::Full => jpeg_encoder::SamplingFactor::F_1_1,
        ChromaMode::Subsampled => jpeg_encoder::SamplingFactor::F_2_2,
    });
    enc.encode(rgb, w as u16, h as u16, jpeg_encoder::ColorType::Rgb)
        .map_err(|e| Error::Numerical(format!("jpeg encode failed at frame {frame_index}: {e}")))?;
    Ok(out)
}

/// Decode a baseline JPEG back to RGB8.
pub fn decode_jpeg_frame(bytes: &[u8], frame_index: usize) -> Result<(Vec<u8>, usize, usize)> {
    let options = zune_core::options::DecoderOptions::default()
        .jpeg_set_out_colorspace(zune_core::colorspace::ColorSpace::RGB);
    let mut dec =
        zune_jpeg::JpegDecoder::new_with_options(std::io::Cursor::new(bytes), options);
    let pixels = dec
        .decode()
        .map_err(|e| Error::Numerical(format!("jpeg decode failed at frame {frame_index}: {e}")))?;
    let info = dec
        .info()
        .ok_or_else(|| Error::Numerical(format!("jpeg header missing at frame {frame_index}")))?;
    Ok((pixels, info.width as usize, info.height as usize))
}

/// Full MJPEG round-trip on a `[T, W, H, 3]` clip: quantize to 8 bits, encode
/// every frame as JPEG at `quality`, decode, and map back to [-1, 1].
/// Gradients do not flow through this operation.
pub fn mjpeg_roundtrip<S: Scalar>(
    clip: &ArrayD<S>,
    quality: u8,
    chroma: ChromaMode,
) -> Result<ArrayD<S>> {
    let s = clip.shape().to_vec();
    assert_eq!(s.len(), 4, "mjpeg_roundtrip expects [T, W, H, 3]");
    let mut out = ArrayD::zeros(IxDyn(&s));
    for t in 0..s[0] {
        let (rgb, w, h) = frame_to_rgb8(clip, t);
        let jpeg = encode_jpeg_frame(&rgb, w, h, quality, chroma, t)?;
        let (decoded, dw, dh) = decode_jpeg_frame(&jpeg, t)?;
        if dw != w || dh != h {
            return Err(Error::Numerical(format!(
                "jpeg round-trip changed dimensions at frame {t}: {w}x{h} -> {dw}x{dh}"
            )));
        }
        rgb8_to_frame(&mut out, t, &decoded, w, h);
    }
    Ok(out)
}

/// Batched round-trip on `[B, T, W, H, 3]`.
pub fn mjpeg_roundtrip_batch<S: Scalar>(
    batch: &ArrayD<S>,
    quality: u8,
    chroma: ChromaMode,
) -> Result<ArrayD<S>> {
    let s = batch.shape().to_vec();
    assert_eq!(s.len(), 5);
    let per: usize = s[1..].iter().product();
    let mut out = ArrayD::zeros(IxDyn(&s));
    let src = batch.as_slice().unwrap();
    let dst = out.as_slice_mut().unwrap();
    for b in 0..s[0] {
        let clip = ArrayD::from_shape_vec(
            IxDyn(&s[1..]),
            src[b * per..(b + 1) * per].to_vec(),
        )
        .unwrap();
        let rt = mjpeg_roundtrip(&clip, quality, chroma)?;
        dst[b * per..(b + 1) * per].copy_from_slice(rt.as_slice().unwrap());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_grid_is_fixed_point() {
        for k in 0..=255u8 {
            assert_eq!(quantize_u8(dequantize_u8(k)), k);
        }
    }

    #[test]
    fn quantize_endpoints() {
        assert_eq!(quantize_u8(-1.0), 0);
        assert_eq!(quantize_u8(1.0), 255);
        assert!((dequantize_u8(0) + 1.0).abs() < 1e-12);
        assert!((dequantize_u8(255) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn quantize_roundtrip_error_bounded_by_half_step() {
        let clip = ArrayD::from_shape_vec(
            IxDyn(&[1, 4, 4, 3]),
            (0..48).map(|i| (i as f64 / 47.0) * 2.0 - 1.0).collect(),
        )
        .unwrap();
        let rt = quantize_roundtrip(&clip);
        for (a, b) in clip.iter().zip(rt.iter()) {
            assert!((a - b).abs() <= 1.0 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn mjpeg_preserves_shape_any_quality() {
        let clip = ArrayD::from_shape_vec(
            IxDyn(&[2, 16, 16, 3]),
            (0..2 * 16 * 16 * 3)
                .map(|i| ((i as f64) * 0.03).sin() * 0.8)
                .collect(),
        )
        .unwrap();
        for q in [1u8, 50, 80, 100] {
            let rt = mjpeg_roundtrip(&clip, q, ChromaMode::Full).unwrap();
            assert_eq!(rt.shape(), clip.shape());
        }
    }
}
