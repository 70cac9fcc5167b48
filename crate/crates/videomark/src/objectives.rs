//! Loss functions for the three optimized parties.
//!
//! Encoder/decoder side: message recovery through the differentiable noise
//! pipeline (`data`), through the real MJPEG codec (`codec`), critic realism
//! (`realism`) and recovery after adversarial tampering (`tamper`). Critic
//! side: the Wasserstein separation loss. Adversary side: the negated tamper
//! loss.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tape, Var};
use crate::error::Result;
use crate::model::ModelState;
use crate::nn::{Mode, Pass};
use crate::noise::mjpeg::{mjpeg_roundtrip_batch, ChromaMode};
use crate::noise::{apply_noise, NoiseDraw};
use crate::video::{BitMessage, MessageLogits};

/// Combination weights for the encoder/decoder objective.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossWeights {
    pub data: f64,
    pub codec: f64,
    pub realism: f64,
    pub tamper: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            data: 1.0,
            codec: 1.0,
            realism: 0.1,
            tamper: 0.1,
        }
    }
}

/// How encoder gradients treat the non-differentiable codec in the codec
/// loss: pretend the round-trip is the identity (straight-through) or train
/// the decoder only.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecLossMode {
    StraightThrough,
    DecoderOnly,
}

impl Default for CodecLossMode {
    fn default() -> Self {
        CodecLossMode::StraightThrough
    }
}

/// Scalar values of every loss term computed during one training step.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct LossBundle {
    pub data: f64,
    pub codec: f64,
    pub realism: f64,
    pub tamper: f64,
    pub critic: f64,
    pub removal: f64,
}

/// The weighted encoder/decoder objective.
pub fn encoder_decoder_objective(bundle: &LossBundle, w: &LossWeights) -> f64 {
    w.data * bundle.data + w.codec * bundle.codec + w.realism * bundle.realism
        + w.tamper * bundle.tamper
}

/// Mean binary cross-entropy between a bit message and decoder logits,
/// computed stably from logits: `mean(softplus(l) - m * l)`.
pub fn message_loss<S: Scalar>(message: &BitMessage, logits: &MessageLogits<S>) -> S {
    assert_eq!(
        message.width(),
        logits.width(),
        "message and logits widths differ"
    );
    let mut tape = Tape::new();
    let lv = tape.constant(
        ArrayD::from_shape_vec(
            ndarray::IxDyn(&[1, logits.width()]),
            logits.values().to_vec(),
        )
        .unwrap(),
    );
    let loss = tape.bce_logits_mean(lv, message.as_row());
    tape.scalar_value(loss)
}

/// Settings shared by graph builders.
#[derive(Clone, Debug)]
pub struct ObjectiveCfg {
    pub weights: LossWeights,
    pub codec_mode: CodecLossMode,
    pub mjpeg_quality: u8,
    pub chroma: ChromaMode,
    pub critic_enabled: bool,
    pub adversary_enabled: bool,
}

impl Default for ObjectiveCfg {
    fn default() -> Self {
        ObjectiveCfg {
            weights: LossWeights::default(),
            codec_mode: CodecLossMode::default(),
            mjpeg_quality: 80,
            chroma: ChromaMode::Full,
            critic_enabled: false,
            adversary_enabled: false,
        }
    }
}

/// Loss nodes of the generator (encoder/decoder/attention) phase.
pub struct GeneratorGraph {
    pub objective: Var,
    pub data: Var,
    pub codec: Var,
    pub realism: Option<Var>,
    pub tamper: Option<Var>,
    /// Decoder logits of the data branch, for training-accuracy logging.
    pub data_logits: Var,
}

/// Build the full encoder/decoder objective graph on one tape. The generator
/// networks run in training mode; critic and adversary participate frozen.
pub fn build_generator_graph<S: Scalar>(
    model: &mut ModelState<S>,
    pass: &mut Pass<'_, S>,
    videos: Var,
    messages: Var,
    draw: &NoiseDraw,
    cfg: &ObjectiveCfg,
) -> Result<GeneratorGraph> {
    let targets = pass.tape.value(messages).clone();
    let vhat = model.encode_batch(pass, videos, messages, Mode::Train, true);

    // data branch: differentiable noise then decode
    let noised = apply_noise(pass.tape, vhat, draw);
    let data_logits = model.decode_batch(pass, noised, Mode::Train, true);
    let data = pass.tape.bce_logits_mean(data_logits, targets.clone());

    // codec branch: real MJPEG round-trip, straight-through for the encoder
    let rt = mjpeg_roundtrip_batch(pass.tape.value(vhat), cfg.mjpeg_quality, cfg.chroma)?;
    let codec_in = match cfg.codec_mode {
        CodecLossMode::StraightThrough => pass.tape.straight_through(vhat, rt),
        CodecLossMode::DecoderOnly => pass.tape.constant(rt),
    };
    let codec_logits = model.decode_batch(pass, codec_in, Mode::Train, true);
    let codec = pass.tape.bce_logits_mean(codec_logits, targets.clone());

    let mut terms = vec![
        (data, S::from_f(cfg.weights.data)),
        (codec, S::from_f(cfg.weights.codec)),
    ];

    let realism = if cfg.critic_enabled {
        let scores = model.critic_batch(pass, vhat, Mode::Frozen, false);
        let mean = pass.tape.mean_all(scores);
        terms.push((mean, S::from_f(cfg.weights.realism)));
        Some(mean)
    } else {
        None
    };

    let tamper = if cfg.adversary_enabled {
        let cleaned = model.adversary_batch(pass, vhat, Mode::Frozen, false);
        let logits = model.decode_batch(pass, cleaned, Mode::Train, true);
        let loss = pass.tape.bce_logits_mean(logits, targets);
        terms.push((loss, S::from_f(cfg.weights.tamper)));
        Some(loss)
    } else {
        None
    };

    let objective = pass.tape.sum_scaled(terms);
    Ok(GeneratorGraph {
        objective,
        data,
        codec,
        realism,
        tamper,
        data_logits,
    })
}

/// Critic phase: `mean C(V) - mean C(E(V, M))`, minimized by the critic.
/// The encoder runs frozen; only critic parameters are trainable.
pub fn build_critic_graph<S: Scalar>(
    model: &mut ModelState<S>,
    pass: &mut Pass<'_, S>,
    videos: Var,
    messages: Var,
) -> Var {
    let vhat = model.encode_batch(pass, videos, messages, Mode::Frozen, false);
    let real = model.critic_batch(pass, videos, Mode::Train, true);
    let fake = model.critic_batch(pass, vhat, Mode::Train, true);
    let mean_real = pass.tape.mean_all(real);
    let mean_fake = pass.tape.mean_all(fake);
    pass.tape.sub(mean_real, mean_fake)
}

/// Adversary phase: the negated tamper loss. Encoder and decoder run frozen;
/// only adversary parameters are trainable.
pub fn build_adversary_graph<S: Scalar>(
    model: &mut ModelState<S>,
    pass: &mut Pass<'_, S>,
    videos: Var,
    messages: Var,
) -> Var {
    let targets = pass.tape.value(messages).clone();
    let vhat = model.encode_batch(pass, videos, messages, Mode::Frozen, false);
    let cleaned = model.adversary_batch(pass, vhat, Mode::Train, true);
    let logits = model.decode_batch(pass, cleaned, Mode::Frozen, false);
    let tamper = pass.tape.bce_logits_mean(logits, targets);
    pass.tape.scale(tamper, S::from_f(-1.0))
}

/// Eager helpers used by tests and diagnostics: each builds a throwaway
/// graph in frozen mode (batch statistics, no running-stat mutation).
pub mod eager {
    use super::*;
    use crate::video::{stack_clips, VideoClip};

    pub struct EagerBatch<'a, S: Scalar> {
        pub clips: &'a [VideoClip<S>],
        pub messages: &'a [BitMessage],
    }

    fn batch_vars<'t, S: Scalar>(
        pass: &mut Pass<'t, S>,
        batch: &EagerBatch<'_, S>,
    ) -> (Var, Var) {
        let videos = pass.tape.constant(stack_clips(batch.clips));
        let rows: Vec<ArrayD<S>> = batch.messages.iter().map(|m| m.as_row()).collect();
        let mut data = Vec::new();
        for r in &rows {
            data.extend(r.iter().copied());
        }
        let msgs = pass.tape.constant(
            ArrayD::from_shape_vec(
                ndarray::IxDyn(&[batch.messages.len(), batch.messages[0].width()]),
                data,
            )
            .unwrap(),
        );
        (videos, msgs)
    }

    /// Message loss through encode -> noise -> decode.
    pub fn data_loss<S: Scalar>(
        model: &mut ModelState<S>,
        batch: &EagerBatch<'_, S>,
        draw: &NoiseDraw,
    ) -> S {
        let mut tape = Tape::new();
        let mut pass = Pass::new(&mut tape);
        let (videos, msgs) = batch_vars(&mut pass, batch);
        let targets = pass.tape.value(msgs).clone();
        let vhat = model.encode_batch(&mut pass, videos, msgs, Mode::Frozen, false);
        let noised = apply_noise(pass.tape, vhat, draw);
        let logits = model.decode_batch(&mut pass, noised, Mode::Frozen, false);
        let loss = pass.tape.bce_logits_mean(logits, targets);
        tape.scalar_value(loss)
    }

    /// Message loss through encode -> MJPEG -> decode.
    pub fn codec_data_loss<S: Scalar>(
        model: &mut ModelState<S>,
        batch: &EagerBatch<'_, S>,
        quality: u8,
        chroma: ChromaMode,
    ) -> Result<S> {
        let mut tape = Tape::new();
        let mut pass = Pass::new(&mut tape);
        let (videos, msgs) = batch_vars(&mut pass, batch);
        let targets = pass.tape.value(msgs).clone();
        let vhat = model.encode_batch(&mut pass, videos, msgs, Mode::Frozen, false);
        let rt = mjpeg_roundtrip_batch(pass.tape.value(vhat), quality, chroma)?;
        let codec_in = pass.tape.constant(rt);
        let logits = model.decode_batch(&mut pass, codec_in, Mode::Frozen, false);
        let loss = pass.tape.bce_logits_mean(logits, targets);
        Ok(tape.scalar_value(loss))
    }

    /// Mean critic score of watermarked clips (the realism term).
    pub fn realism_loss<S: Scalar>(model: &mut ModelState<S>, batch: &EagerBatch<'_, S>) -> S {
        let mut tape = Tape::new();
        let mut pass = Pass::new(&mut tape);
        let (videos, msgs) = batch_vars(&mut pass, batch);
        let vhat = model.encode_batch(&mut pass, videos, msgs, Mode::Frozen, false);
        let scores = model.critic_batch(&mut pass, vhat, Mode::Frozen, false);
        let mean = pass.tape.mean_all(scores);
        tape.scalar_value(mean)
    }

    /// Wasserstein separation: `mean C(V) - mean C(E(V, M))`.
    pub fn critic_separation_loss<S: Scalar>(
        model: &mut ModelState<S>,
        batch: &EagerBatch<'_, S>,
    ) -> S {
        let mut tape = Tape::new();
        let mut pass = Pass::new(&mut tape);
        let (videos, msgs) = batch_vars(&mut pass, batch);
        let vhat = model.encode_batch(&mut pass, videos, msgs, Mode::Frozen, false);
        let real = model.critic_batch(&mut pass, videos, Mode::Frozen, false);
        let fake = model.critic_batch(&mut pass, vhat, Mode::Frozen, false);
        let mr = pass.tape.mean_all(real);
        let mf = pass.tape.mean_all(fake);
        let diff = pass.tape.sub(mr, mf);
        tape.scalar_value(diff)
    }

    /// Message loss after the adversary tampers with the watermarked clips.
    pub fn tamper_data_loss<S: Scalar>(
        model: &mut ModelState<S>,
        batch: &EagerBatch<'_, S>,
    ) -> S {
        let mut tape = Tape::new();
        let mut pass = Pass::new(&mut tape);
        let (videos, msgs) = batch_vars(&mut pass, batch);
        let targets = pass.tape.value(msgs).clone();
        let vhat = model.encode_batch(&mut pass, videos, msgs, Mode::Frozen, false);
        let cleaned = model.adversary_batch(&mut pass, vhat, Mode::Frozen, false);
        let logits = model.decode_batch(&mut pass, cleaned, Mode::Frozen, false);
        let loss = pass.tape.bce_logits_mean(logits, targets);
        tape.scalar_value(loss)
    }

    /// The adversary's objective: the negated tamper loss.
    pub fn removal_loss<S: Scalar>(model: &mut ModelState<S>, batch: &EagerBatch<'_, S>) -> S {
        -tamper_data_loss(model, batch)
    }
}
