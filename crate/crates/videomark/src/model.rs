//! The five watermarking networks and their shared state.
//!
//! * attention: two conv blocks (3 -> 32 -> D) + softmax; per-pixel
//!   distribution over message bits, shared by encoder and decoder
//! * encoder: compacts the message through the mask, concatenates it to the
//!   video and produces a residual bounded to ±0.01
//! * decoder: extracts per-pixel bit scores, weights them by the attention
//!   mask of the *watermarked* video (blind decoding) and mean-pools
//! * critic: realism score (Wasserstein, unbounded scalar)
//! * adversary: bounded-perturbation watermark-removal network
//!
//! The `replicate` fusion variant drops the attention module and instead
//! broadcasts the raw message across the spatial dimensions (the
//! concatenation baseline used for ablations).

use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Scalar, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{ConvBlock, LinearLayer, Mode, Pass};
use crate::video::{AttentionMask, BitMessage, MessageLogits, VideoClip};

/// Maximum residual amplitude: no pixel moves by more than this.
pub const RESIDUAL_BOUND: f64 = 0.01;

/// How the message is fused with the video.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// Learned per-pixel distribution over bits (the full model).
    Attention,
    /// Naive spatial replication of the message (ablation baseline).
    Replicate,
}

impl Fusion {
    pub fn tag(self) -> u8 {
        match self {
            Fusion::Attention => 0,
            Fusion::Replicate => 1,
        }
    }

    pub fn from_tag(t: u8) -> Result<Self> {
        match t {
            0 => Ok(Fusion::Attention),
            1 => Ok(Fusion::Replicate),
            _ => Err(Error::config(format!("unknown fusion tag {t}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Fusion::Attention => "attention",
            Fusion::Replicate => "replicate",
        }
    }
}

#[derive(Clone, Debug)]
pub struct AttentionNet<S: Scalar> {
    pub b1: ConvBlock<S>,
    pub b2: ConvBlock<S>,
}

#[derive(Clone, Debug)]
pub struct EncoderNet<S: Scalar> {
    pub b1: ConvBlock<S>,
    pub b2: ConvBlock<S>,
}

#[derive(Clone, Debug)]
pub struct DecoderNet<S: Scalar> {
    pub b1: ConvBlock<S>,
    pub b2: ConvBlock<S>,
}

#[derive(Clone, Debug)]
pub struct CriticNet<S: Scalar> {
    pub b1: ConvBlock<S>,
    pub b2: ConvBlock<S>,
    pub head: LinearLayer<S>,
}

#[derive(Clone, Debug)]
pub struct AdversaryNet<S: Scalar> {
    pub b1: ConvBlock<S>,
    pub b2: ConvBlock<S>,
}

/// All learnable parameters plus batchnorm running statistics.
#[derive(Clone, Debug)]
pub struct ModelState<S: Scalar> {
    pub message_width: usize,
    pub fusion: Fusion,
    pub attention: Option<AttentionNet<S>>,
    pub encoder: EncoderNet<S>,
    pub decoder: DecoderNet<S>,
    pub critic: CriticNet<S>,
    pub adversary: AdversaryNet<S>,
}

/// Which optimization party a forward pass belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Party {
    /// Encoder, decoder and the shared attention module.
    Generator,
    Critic,
    Adversary,
}

impl<S: Scalar> ModelState<S> {
    /// Fresh model. `message_width` is not restricted here so reduced test
    /// geometries stay expressible; the configuration layer enforces the
    /// production widths {32, 64}.
    pub fn new(message_width: usize, fusion: Fusion, seed: u64) -> Self {
        assert!(message_width >= 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = message_width;
        let attention = match fusion {
            Fusion::Attention => Some(AttentionNet {
                b1: ConvBlock::new(3, 32, &mut rng),
                b2: ConvBlock::new(32, d, &mut rng),
            }),
            Fusion::Replicate => None,
        };
        let encoder_in = match fusion {
            Fusion::Attention => 4,
            Fusion::Replicate => 3 + d,
        };
        ModelState {
            message_width: d,
            fusion,
            attention,
            encoder: EncoderNet {
                b1: ConvBlock::new(encoder_in, 32, &mut rng),
                b2: ConvBlock::new(32, 3, &mut rng),
            },
            decoder: DecoderNet {
                b1: ConvBlock::new(3, 32, &mut rng),
                b2: ConvBlock::new(32, d, &mut rng),
            },
            critic: CriticNet {
                b1: ConvBlock::new(3, 16, &mut rng),
                b2: ConvBlock::new(16, 32, &mut rng),
                head: LinearLayer::new(32, 1, &mut rng),
            },
            adversary: AdversaryNet {
                b1: ConvBlock::new(3, 16, &mut rng),
                b2: ConvBlock::new(16, 3, &mut rng),
            },
        }
    }

    /// Attention mask for a batch: `[B, T, W, H, 3] -> [B, T, W, H, D]`,
    /// normalized over the last axis at every pixel.
    pub fn attention_batch(
        &mut self,
        pass: &mut Pass<'_, S>,
        v: Var,
        mode: Mode,
        trainable: bool,
    ) -> Var {
        let att = self
            .attention
            .as_mut()
            .expect("attention mask requires the attention fusion variant");
        let a = att.b1.forward(pass, "attention.b1", v, mode, trainable);
        let b = att.b2.forward(pass, "attention.b2", a, mode, trainable);
        pass.tape.softmax_last(b)
    }

    /// Watermark a batch: returns the watermarked clips, clamped to `[-1, 1]`
    /// with a residual bounded by ±0.01 before the clamp.
    pub fn encode_batch(
        &mut self,
        pass: &mut Pass<'_, S>,
        v: Var,
        msgs: Var,
        mode: Mode,
        trainable: bool,
    ) -> Var {
        assert_eq!(
            pass.tape.value(msgs).shape()[1],
            self.message_width,
            "message width does not match the model"
        );
        let fused = match self.fusion {
            Fusion::Attention => {
                let mask = self.attention_batch(pass, v, mode, trainable);
                let compact = pass.tape.mask_dot_msg(mask, msgs);
                pass.tape.concat_last(v, compact)
            }
            Fusion::Replicate => pass.tape.broadcast_concat_vec(v, msgs),
        };
        let b = self
            .encoder
            .b1
            .forward(pass, "encoder.b1", fused, mode, trainable);
        let c = self
            .encoder
            .b2
            .forward(pass, "encoder.b2", b, mode, trainable);
        let residual = pass.tape.tanh(c);
        let scaled = pass.tape.scale(residual, S::from_f(RESIDUAL_BOUND));
        let sum = pass.tape.add(v, scaled);
        pass.tape.clamp(sum, S::from_f(-1.0), S::one())
    }

    /// Recover message logits from watermarked clips alone: `[B, D]`.
    pub fn decode_batch(
        &mut self,
        pass: &mut Pass<'_, S>,
        vhat: Var,
        mode: Mode,
        trainable: bool,
    ) -> Var {
        let a = self
            .decoder
            .b1
            .forward(pass, "decoder.b1", vhat, mode, trainable);
        let b = self
            .decoder
            .b2
            .forward(pass, "decoder.b2", a, mode, trainable);
        match self.fusion {
            Fusion::Attention => {
                let mask = self.attention_batch(pass, vhat, mode, trainable);
                let weighted = pass.tape.mul(mask, b);
                pass.tape.mean_pool_twh(weighted)
            }
            Fusion::Replicate => pass.tape.mean_pool_twh(b),
        }
    }

    /// Critic scores `[B, 1]` (unbounded; no sigmoid).
    pub fn critic_batch(
        &mut self,
        pass: &mut Pass<'_, S>,
        v: Var,
        mode: Mode,
        trainable: bool,
    ) -> Var {
        let a = self.critic.b1.forward(pass, "critic.b1", v, mode, trainable);
        let b = self.critic.b2.forward(pass, "critic.b2", a, mode, trainable);
        let pooled = pass.tape.mean_pool_twh(b);
        self.critic.head.forward(pass, "critic.head", pooled, trainable)
    }

    /// Adversarial cleaning pass: bounded ±0.01 perturbation of the input.
    pub fn adversary_batch(
        &mut self,
        pass: &mut Pass<'_, S>,
        vhat: Var,
        mode: Mode,
        trainable: bool,
    ) -> Var {
        let a = self
            .adversary
            .b1
            .forward(pass, "adversary.b1", vhat, mode, trainable);
        let r = self
            .adversary
            .b2
            .forward(pass, "adversary.b2", a, mode, trainable);
        let bounded = pass.tape.tanh(r);
        let scaled = pass.tape.scale(bounded, S::from_f(RESIDUAL_BOUND));
        let sum = pass.tape.add(vhat, scaled);
        pass.tape.clamp(sum, S::from_f(-1.0), S::one())
    }

    // ------------------------------------------------------------------
    // Single-clip convenience wrappers (inference mode).
    // ------------------------------------------------------------------

    pub fn attention(&mut self, clip: &VideoClip<S>) -> AttentionMask<S> {
        let mut tape = Tape::new();
        let mut pass = Pass::new(&mut tape);
        let v = pass.tape.constant(clip.batched());
        let mask = self.attention_batch(&mut pass, v, Mode::Eval, false);
        let value = tape.value(mask);
        let s = value.shape();
        let unbatched = value
            .clone()
            .into_shape_with_order(IxDyn(&[s[1], s[2], s[3], s[4]]))
            .unwrap();
        AttentionMask::from_raw(unbatched)
    }

    pub fn encode(&mut self, clip: &VideoClip<S>, message: &BitMessage) -> VideoClip<S> {
        assert_eq!(
            message.width(),
            self.message_width,
            "message width does not match the model"
        );
        let mut tape = Tape::new();
        let mut pass = Pass::new(&mut tape);
        let v = pass.tape.constant(clip.batched());
        let m = pass.tape.constant(message.as_row());
        let vhat = self.encode_batch(&mut pass, v, m, Mode::Eval, false);
        let value = tape.value(vhat);
        let s = value.shape();
        let unbatched = value
            .clone()
            .into_shape_with_order(IxDyn(&[s[1], s[2], s[3], s[4]]))
            .unwrap();
        VideoClip::new(unbatched).expect("encoder output is clamped")
    }

    /// Blind decode: only the watermarked clip is consulted.
    pub fn decode(&mut self, vhat: &VideoClip<S>) -> MessageLogits<S> {
        let mut tape = Tape::new();
        let mut pass = Pass::new(&mut tape);
        let v = pass.tape.constant(vhat.batched());
        let logits = self.decode_batch(&mut pass, v, Mode::Eval, false);
        MessageLogits::new(tape.value(logits).iter().copied().collect())
            .expect("decoder output is finite")
    }

    pub fn critic_score(&mut self, clip: &VideoClip<S>) -> S {
        let mut tape = Tape::new();
        let mut pass = Pass::new(&mut tape);
        let v = pass.tape.constant(clip.batched());
        let score = self.critic_batch(&mut pass, v, Mode::Eval, false);
        *tape.value(score).iter().next().unwrap()
    }

    pub fn adversary_apply(&mut self, vhat: &VideoClip<S>) -> VideoClip<S> {
        let mut tape = Tape::new();
        let mut pass = Pass::new(&mut tape);
        let v = pass.tape.constant(vhat.batched());
        let out = self.adversary_batch(&mut pass, v, Mode::Eval, false);
        let value = tape.value(out);
        let s = value.shape();
        let unbatched = value
            .clone()
            .into_shape_with_order(IxDyn(&[s[1], s[2], s[3], s[4]]))
            .unwrap();
        VideoClip::new(unbatched).expect("adversary output is clamped")
    }

    // ------------------------------------------------------------------
    // Parameter traversal.
    // ------------------------------------------------------------------

    /// Visit every learnable parameter of a party, in a stable order that
    /// matches `learnable_mut` path lookups.
    pub fn visit_party(&self, party: Party, f: &mut impl FnMut(String, &ArrayD<S>)) {
        match party {
            Party::Generator => {
                if let Some(att) = &self.attention {
                    att.b1.visit_learnable("attention.b1", f);
                    att.b2.visit_learnable("attention.b2", f);
                }
                self.encoder.b1.visit_learnable("encoder.b1", f);
                self.encoder.b2.visit_learnable("encoder.b2", f);
                self.decoder.b1.visit_learnable("decoder.b1", f);
                self.decoder.b2.visit_learnable("decoder.b2", f);
            }
            Party::Critic => {
                self.critic.b1.visit_learnable("critic.b1", f);
                self.critic.b2.visit_learnable("critic.b2", f);
                self.critic.head.visit_learnable("critic.head", f);
            }
            Party::Adversary => {
                self.adversary.b1.visit_learnable("adversary.b1", f);
                self.adversary.b2.visit_learnable("adversary.b2", f);
            }
        }
    }

    /// Mutable lookup of a learnable parameter by dotted path.
    pub fn learnable_mut(&mut self, path: &str) -> Option<&mut ArrayD<S>> {
        let (head, rest) = path.split_once('.')?;
        let (block, name) = rest.split_once('.')?;
        match (head, block) {
            ("attention", "b1") => self.attention.as_mut()?.b1.learnable_mut(name),
            ("attention", "b2") => self.attention.as_mut()?.b2.learnable_mut(name),
            ("encoder", "b1") => self.encoder.b1.learnable_mut(name),
            ("encoder", "b2") => self.encoder.b2.learnable_mut(name),
            ("decoder", "b1") => self.decoder.b1.learnable_mut(name),
            ("decoder", "b2") => self.decoder.b2.learnable_mut(name),
            ("critic", "b1") => self.critic.b1.learnable_mut(name),
            ("critic", "b2") => self.critic.b2.learnable_mut(name),
            ("critic", "head") => self.critic.head.learnable_mut(name),
            ("adversary", "b1") => self.adversary.b1.learnable_mut(name),
            ("adversary", "b2") => self.adversary.b2.learnable_mut(name),
            _ => None,
        }
    }

    fn blocks(&self) -> Vec<(&'static str, &ConvBlock<S>)> {
        let mut v: Vec<(&'static str, &ConvBlock<S>)> = Vec::new();
        if let Some(att) = &self.attention {
            v.push(("attention.b1", &att.b1));
            v.push(("attention.b2", &att.b2));
        }
        v.push(("encoder.b1", &self.encoder.b1));
        v.push(("encoder.b2", &self.encoder.b2));
        v.push(("decoder.b1", &self.decoder.b1));
        v.push(("decoder.b2", &self.decoder.b2));
        v.push(("critic.b1", &self.critic.b1));
        v.push(("critic.b2", &self.critic.b2));
        v.push(("adversary.b1", &self.adversary.b1));
        v.push(("adversary.b2", &self.adversary.b2));
        v
    }

    fn blocks_mut(&mut self) -> Vec<(&'static str, &mut ConvBlock<S>)> {
        let mut v: Vec<(&'static str, &mut ConvBlock<S>)> = Vec::new();
        if let Some(att) = &mut self.attention {
            v.push(("attention.b1", &mut att.b1));
            v.push(("attention.b2", &mut att.b2));
        }
        v.push(("encoder.b1", &mut self.encoder.b1));
        v.push(("encoder.b2", &mut self.encoder.b2));
        v.push(("decoder.b1", &mut self.decoder.b1));
        v.push(("decoder.b2", &mut self.decoder.b2));
        v.push(("critic.b1", &mut self.critic.b1));
        v.push(("critic.b2", &mut self.critic.b2));
        v.push(("adversary.b1", &mut self.adversary.b1));
        v.push(("adversary.b2", &mut self.adversary.b2));
        v
    }

    /// Total learnable parameter count.
    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        for party in [Party::Generator, Party::Critic, Party::Adversary] {
            self.visit_party(party, &mut |_, a| n += a.len());
        }
        n
    }

    /// Largest absolute value among a party's learnable parameters.
    pub fn max_abs_param(&self, party: Party) -> f64 {
        let mut m = 0.0f64;
        self.visit_party(party, &mut |_, a| {
            for &v in a.iter() {
                m = m.max(v.to_f().abs());
            }
        });
        m
    }

    /// Clamp every learnable critic parameter into `[-bound, bound]`.
    pub fn clip_critic(&mut self, bound: f64) {
        let lo = S::from_f(-bound);
        let hi = S::from_f(bound);
        let mut paths = Vec::new();
        self.visit_party(Party::Critic, &mut |p, _| paths.push(p));
        for p in paths {
            let a = self.learnable_mut(&p).unwrap();
            a.mapv_inplace(|v| v.max(lo).min(hi));
        }
    }

    pub fn all_params_finite(&self) -> bool {
        let mut ok = true;
        for party in [Party::Generator, Party::Critic, Party::Adversary] {
            self.visit_party(party, &mut |_, a| {
                if a.iter().any(|v| !v.to_f().is_finite()) {
                    ok = false;
                }
            });
        }
        ok
    }

    // ------------------------------------------------------------------
    // Checkpoint serialization.
    // ------------------------------------------------------------------

    /// Serialize to the checkpoint format: a version tag, the message width,
    /// the fusion variant and every named array (learnable parameters plus
    /// batchnorm running statistics). Values are stored as little-endian f64
    /// so the save -> load -> save cycle is byte-stable.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf);
        std::fs::write(path, &buf).map_err(|e| Error::io(path, e))
    }

    pub fn write_to(&self, buf: &mut Vec<u8>) {
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.message_width as u32).to_le_bytes());
        buf.push(self.fusion.tag());
        buf.extend_from_slice(&(self.parameter_count() as u64).to_le_bytes());

        let mut entries: Vec<(String, Vec<f64>, Vec<usize>)> = Vec::new();
        for party in [Party::Generator, Party::Critic, Party::Adversary] {
            self.visit_party(party, &mut |name, a| {
                entries.push((
                    name,
                    a.iter().map(|v| v.to_f()).collect(),
                    a.shape().to_vec(),
                ));
            });
        }
        for (name, block) in self.blocks() {
            entries.push((
                format!("{name}.running_mean"),
                block.running_mean.iter().map(|v| v.to_f()).collect(),
                vec![block.running_mean.len()],
            ));
            entries.push((
                format!("{name}.running_var"),
                block.running_var.iter().map(|v| v.to_f()).collect(),
                vec![block.running_var.len()],
            ));
        }

        buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (name, data, shape) in entries {
            let nb = name.as_bytes();
            buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            buf.extend_from_slice(nb);
            buf.push(shape.len() as u8);
            for d in &shape {
                buf.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&bytes).map_err(|e| match e {
            Error::Config(msg) => Error::data(path, msg),
            other => other,
        })
    }

    pub fn read_from(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::config("not a model checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::config(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let width = r.u32()? as usize;
        let fusion = Fusion::from_tag(r.u8()?)?;
        let _param_count = r.u64()?;
        let count = r.u32()? as usize;

        let mut model = ModelState::new(width, fusion, 0);
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::config("bad checkpoint entry name"))?;
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(S::from_f(r.f64()?));
            }
            model.store_entry(&name, shape, data)?;
        }
        Ok(model)
    }

    fn store_entry(&mut self, name: &str, shape: Vec<usize>, data: Vec<S>) -> Result<()> {
        if let Some(rest) = name.strip_suffix(".running_mean") {
            let block = self.block_mut(rest)?;
            if block.running_mean.len() != data.len() {
                return Err(Error::config(format!("shape mismatch for {name}")));
            }
            block.running_mean = data;
            return Ok(());
        }
        if let Some(rest) = name.strip_suffix(".running_var") {
            let block = self.block_mut(rest)?;
            if block.running_var.len() != data.len() {
                return Err(Error::config(format!("shape mismatch for {name}")));
            }
            block.running_var = data;
            return Ok(());
        }
        let arr = self
            .learnable_mut(name)
            .ok_or_else(|| Error::config(format!("unknown checkpoint entry {name}")))?;
        if arr.shape() != shape.as_slice() {
            return Err(Error::config(format!(
                "shape mismatch for {name}: {:?} vs {:?}",
                arr.shape(),
                shape
            )));
        }
        *arr = ArrayD::from_shape_vec(IxDyn(&shape), data).unwrap();
        Ok(())
    }

    fn block_mut(&mut self, path: &str) -> Result<&mut ConvBlock<S>> {
        for (name, block) in self.blocks_mut() {
            if name == path {
                return Ok(block);
            }
        }
        Err(Error::config(format!("unknown block {path}")))
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"VMRK";
const CHECKPOINT_VERSION: u32 = 1;


struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::config("truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
