//! Core domain types: video clips, bit messages and decoder outputs.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;

use crate::autodiff::Scalar;
use crate::error::{Error, Result};

/// Message widths supported by the production system.
pub const SUPPORTED_WIDTHS: [usize; 2] = [32, 64];

/// A video clip as a `[T, W, H, 3]` tensor of RGB values in `[-1, 1]`.
///
/// The `W` axis is the slower spatial axis; media IO transposes to and from
/// row-major image buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip<S: Scalar> {
    frames: ArrayD<S>,
}

impl<S: Scalar> VideoClip<S> {
    pub fn new(frames: ArrayD<S>) -> Result<Self> {
        let s = frames.shape();
        if s.len() != 4 || s[3] != 3 {
            return Err(Error::config(format!(
                "video clips are [T, W, H, 3]; got {s:?}"
            )));
        }
        if s.iter().any(|&d| d == 0) {
            return Err(Error::config("video clip axes must be nonzero"));
        }
        for &v in frames.iter() {
            let f = v.to_f();
            if !f.is_finite() || !(-1.0..=1.0).contains(&f) {
                return Err(Error::Numerical(format!(
                    "pixel value {f} outside [-1, 1]"
                )));
            }
        }
        Ok(VideoClip { frames })
    }

    /// Construct without range validation; values are clamped into `[-1, 1]`.
    pub fn from_unclamped(mut frames: ArrayD<S>) -> Result<Self> {
        let lo = S::from_f(-1.0);
        let hi = S::one();
        frames.mapv_inplace(|v| v.max(lo).min(hi));
        Self::new(frames)
    }

    pub fn data(&self) -> &ArrayD<S> {
        &self.frames
    }

    pub fn into_data(self) -> ArrayD<S> {
        self.frames
    }

    /// (T, W, H)
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.frames.shape();
        (s[0], s[1], s[2])
    }

    /// View as a single-sample batch `[1, T, W, H, 3]`.
    pub fn batched(&self) -> ArrayD<S> {
        let mut shape = vec![1usize];
        shape.extend_from_slice(self.frames.shape());
        self.frames
            .clone()
            .into_shape_with_order(IxDyn(&shape))
            .unwrap()
    }

    pub fn cast<T: Scalar>(&self) -> VideoClip<T> {
        VideoClip {
            frames: self.frames.mapv(|v| T::from_f(v.to_f())),
        }
    }
}

/// Stack clips of identical shape into a `[B, T, W, H, 3]` batch.
pub fn stack_clips<S: Scalar>(clips: &[VideoClip<S>]) -> ArrayD<S> {
    assert!(!clips.is_empty());
    let inner = clips[0].data().shape().to_vec();
    for c in clips {
        assert_eq!(c.data().shape(), &inner[..], "clip shapes must match");
    }
    let mut shape = vec![clips.len()];
    shape.extend_from_slice(&inner);
    let mut out = ArrayD::zeros(IxDyn(&shape));
    let per = inner.iter().product::<usize>();
    let os = out.as_slice_mut().unwrap();
    for (i, c) in clips.iter().enumerate() {
        os[i * per..(i + 1) * per].copy_from_slice(c.data().as_slice().unwrap());
    }
    out
}

/// Binary watermark message.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BitMessage {
    bits: Vec<u8>,
}

impl BitMessage {
    /// Production constructor: width must be 32 or 64, entries 0/1.
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if !SUPPORTED_WIDTHS.contains(&bits.len()) {
            return Err(Error::config(format!(
                "message width must be one of {SUPPORTED_WIDTHS:?}; got {}",
                bits.len()
            )));
        }
        Self::with_width(bits)
    }

    /// Width-agnostic constructor for reduced test geometries.
    pub fn with_width(bits: Vec<u8>) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::config("message must be nonempty"));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::config("message entries must be 0 or 1"));
        }
        Ok(BitMessage { bits })
    }

    pub fn random(width: usize, rng: &mut impl Rng) -> Self {
        BitMessage {
            bits: (0..width).map(|_| rng.random_range(0..2u8)).collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.bits.len()
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn complement(&self) -> Self {
        BitMessage {
            bits: self.bits.iter().map(|&b| 1 - b).collect(),
        }
    }

    pub fn flip_bit(&self, index: usize) -> Self {
        let mut bits = self.bits.clone();
        bits[index] = 1 - bits[index];
        BitMessage { bits }
    }

    /// Row vector `[1, D]` with entries in {0, 1}.
    pub fn as_row<S: Scalar>(&self) -> ArrayD<S> {
        ArrayD::from_shape_vec(
            IxDyn(&[1, self.bits.len()]),
            self.bits.iter().map(|&b| S::from_f(b as f64)).collect(),
        )
        .unwrap()
    }

    /// Uppercase hex, bit 0 = most significant bit of the first digit.
    /// Width must be a multiple of 4.
    pub fn to_hex(&self) -> String {
        assert_eq!(self.bits.len() % 4, 0, "hex encoding needs width % 4 == 0");
        let bytes: Vec<u8> = self
            .bits
            .chunks(8)
            .map(|chunk| {
                let mut byte = 0u8;
                for (i, &b) in chunk.iter().enumerate() {
                    byte |= b << (7 - i);
                }
                byte
            })
            .collect();
        let mut s = hex::encode_upper(bytes);
        s.truncate(self.bits.len().div_ceil(4));
        s
    }

    /// Parse uppercase/lowercase hex into a message of width `4 * digits`.
    pub fn from_hex(text: &str) -> Result<Self> {
        if text.is_empty() || !text.chars().all(|c| c.is_ascii_hexdigit()) {
            return Err(Error::config(format!("invalid hex message {text:?}")));
        }
        let mut bits = Vec::with_capacity(text.len() * 4);
        for c in text.chars() {
            let v = c.to_digit(16).unwrap() as u8;
            for i in (0..4).rev() {
                bits.push((v >> i) & 1);
            }
        }
        Self::with_width(bits)
    }

    pub fn hamming_distance(&self, other: &Self) -> usize {
        assert_eq!(self.width(), other.width());
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| a != b)
            .count()
    }
}

/// Pre-sigmoid per-bit scores produced by the decoder.
#[derive(Clone, Debug)]
pub struct MessageLogits<S: Scalar> {
    values: Vec<S>,
}

impl<S: Scalar> MessageLogits<S> {
    pub fn new(values: Vec<S>) -> Result<Self> {
        if values.iter().any(|v| !v.to_f().is_finite()) {
            return Err(Error::Numerical("non-finite decoder logits".into()));
        }
        Ok(MessageLogits { values })
    }

    pub fn width(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    /// Hard decision rule: bit d = 1 iff logit d > 0 (ties resolve to 0).
    pub fn predict_bits(&self) -> BitMessage {
        BitMessage::with_width(
            self.values
                .iter()
                .map(|&v| if v > S::zero() { 1u8 } else { 0u8 })
                .collect(),
        )
        .expect("logits are nonempty")
    }

    /// Per-bit probabilities `sigmoid(logit)`.
    pub fn confidences(&self) -> Vec<f64> {
        self.values
            .iter()
            .map(|&v| {
                let x = v.to_f();
                1.0 / (1.0 + (-x).exp())
            })
            .collect()
    }
}

/// Per-pixel probability distribution over message bits, `[T, W, H, D]`.
#[derive(Clone, Debug)]
pub struct AttentionMask<S: Scalar> {
    mask: ArrayD<S>,
}

impl<S: Scalar> AttentionMask<S> {
    pub(crate) fn from_raw(mask: ArrayD<S>) -> Self {
        AttentionMask { mask }
    }

    pub fn data(&self) -> &ArrayD<S> {
        &self.mask
    }

    pub fn message_width(&self) -> usize {
        *self.mask.shape().last().unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn hex_round_trip_and_bit_order() {
        let m = BitMessage::from_hex("DEADBEEF").unwrap();
        assert_eq!(m.width(), 32);
        // 0xD = 1101: bit 0 is the most significant bit of the first digit.
        assert_eq!(&m.bits()[..4], &[1, 1, 0, 1]);
        assert_eq!(m.to_hex(), "DEADBEEF");
    }

    #[test]
    fn complement_differs_everywhere() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let m = BitMessage::random(32, &mut rng);
        let c = m.complement();
        assert_eq!(m.hamming_distance(&c), 32);
    }

    #[test]
    fn message_width_is_checked() {
        assert!(BitMessage::new(vec![0; 16]).is_err());
        assert!(BitMessage::new(vec![0; 32]).is_ok());
        assert!(BitMessage::new(vec![0; 64]).is_ok());
        assert!(BitMessage::new(vec![2; 32]).is_err());
    }

    #[test]
    fn predict_bits_ties_round_to_zero() {
        let l = MessageLogits::new(vec![3.2f64, -1.1]).unwrap();
        assert_eq!(l.predict_bits().bits(), &[1, 0]);
        let z = MessageLogits::new(vec![0.0f64, 0.0]).unwrap();
        assert_eq!(z.predict_bits().bits(), &[0, 0]);
    }

    #[test]
    fn clip_range_is_validated() {
        let ok = ArrayD::from_elem(IxDyn(&[1, 4, 4, 3]), 0.5f32);
        assert!(VideoClip::new(ok).is_ok());
        let bad = ArrayD::from_elem(IxDyn(&[1, 4, 4, 3]), 1.5f32);
        assert!(VideoClip::new(bad).is_err());
        let wrong_c = ArrayD::from_elem(IxDyn(&[1, 4, 4, 4]), 0.0f32);
        assert!(VideoClip::new(wrong_c).is_err());
    }
}
