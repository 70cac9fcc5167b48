//! Training procedure: Hamming-vector-pair batches, augmentation, three-party
//! optimization with Adam, critic weight clipping, plateau learning-rate
//! decay, checkpointing and line-delimited metric logging.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Grads, Scalar, Tape, Var};
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, EvalConfig};
use crate::media::{load_entry, CorpusManifest, Split};
use crate::model::{Fusion, ModelState, Party};
use crate::nn::Pass;
use crate::objectives::{
    build_adversary_graph, build_critic_graph, build_generator_graph, CodecLossMode, LossBundle,
    LossWeights, ObjectiveCfg,
};
use crate::noise::{NoiseConfig, NoiseDraw};
use crate::video::{stack_clips, BitMessage, VideoClip};

/// Full training configuration. Field names double as the flat keys of the
/// on-disk config document.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub message_width: usize,
    pub epochs: usize,
    pub lr: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub plateau_min_delta: f64,
    pub plateau_ema_alpha: f64,
    pub lr_floor: f64,
    pub critic_clip: f64,
    pub critic_steps: usize,
    pub enable_critic: bool,
    pub enable_adversary: bool,
    pub hamming_pairs: bool,
    pub fusion: Fusion,
    pub seed: u64,
    pub train_t: usize,
    pub train_w: usize,
    pub train_h: usize,
    pub noise: NoiseConfig,
    pub mjpeg_quality: u8,
    pub chroma_subsampled: bool,
    pub codec_loss_mode: CodecLossMode,
    pub weights: LossWeights,
    /// Stop before `epochs` once every validation accuracy (identity,
    /// cropped, scaled) reaches this level.
    pub early_stop_min_acc: Option<f64>,
    /// Corpus manifest path (used by the CLI; the library API takes the
    /// manifest directly).
    pub corpus: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 12,
            message_width: 32,
            epochs: 300,
            lr: 1e-3,
            plateau_factor: 0.5,
            plateau_patience: 5,
            plateau_min_delta: 1e-3,
            plateau_ema_alpha: 0.3,
            lr_floor: 1e-5,
            critic_clip: 0.1,
            critic_steps: 1,
            enable_critic: false,
            enable_adversary: false,
            hamming_pairs: true,
            fusion: Fusion::Attention,
            seed: 0,
            train_t: 8,
            train_w: 64,
            train_h: 64,
            noise: NoiseConfig::default(),
            mjpeg_quality: 80,
            chroma_subsampled: false,
            codec_loss_mode: CodecLossMode::StraightThrough,
            weights: LossWeights::default(),
            early_stop_min_acc: None,
            corpus: None,
        }
    }
}

impl TrainConfig {
    /// The desk-scale profile: 30 epochs on the synthetic corpus.
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 30,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hamming_pairs && self.batch_size % 2 != 0 {
            return Err(Error::config(
                "hamming pairing requires an even batch size",
            ));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.message_width == 0 {
            return Err(Error::config("batch_size, epochs and message_width must be positive"));
        }
        for (name, v) in [
            ("lr", self.lr),
            ("plateau_factor", self.plateau_factor),
            ("plateau_min_delta", self.plateau_min_delta),
            ("plateau_ema_alpha", self.plateau_ema_alpha),
            ("lr_floor", self.lr_floor),
            ("critic_clip", self.critic_clip),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive; got {v}")));
            }
        }
        if self.critic_steps == 0 {
            return Err(Error::config("critic_steps must be at least 1"));
        }
        self.noise.validate()
    }

    pub fn objective_cfg(&self) -> ObjectiveCfg {
        ObjectiveCfg {
            weights: self.weights,
            codec_mode: self.codec_loss_mode,
            mjpeg_quality: self.mjpeg_quality,
            chroma: if self.chroma_subsampled {
                crate::noise::mjpeg::ChromaMode::Subsampled
            } else {
                crate::noise::mjpeg::ChromaMode::Full
            },
            critic_enabled: self.enable_critic,
            adversary_enabled: self.enable_adversary,
        }
    }
}

/// One epoch's log line.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub epoch: usize,
    pub wall_clock_s: f64,
    pub loss_data: f64,
    pub loss_codec: f64,
    pub loss_realism: f64,
    pub loss_tamper: f64,
    pub loss_critic: f64,
    pub loss_removal: f64,
    pub train_bit_acc: f64,
    pub val_identity_acc: f64,
    pub val_mjpeg_acc: f64,
    pub val_cropped_acc: f64,
    pub val_scaled_acc: f64,
    pub lr: f64,
}

impl TrainLogRecord {
    /// Equality over everything except wall-clock time.
    pub fn same_trajectory(&self, other: &Self) -> bool {
        self.epoch == other.epoch
            && self.loss_data == other.loss_data
            && self.loss_codec == other.loss_codec
            && self.loss_realism == other.loss_realism
            && self.loss_tamper == other.loss_tamper
            && self.loss_critic == other.loss_critic
            && self.loss_removal == other.loss_removal
            && self.train_bit_acc == other.train_bit_acc
            && self.val_identity_acc == other.val_identity_acc
            && self.val_mjpeg_acc == other.val_mjpeg_acc
            && self.val_cropped_acc == other.val_cropped_acc
            && self.val_scaled_acc == other.val_scaled_acc
            && self.lr == other.lr
    }
}

/// Adam with bias correction; one instance per optimization party.
pub struct Adam<S: Scalar> {
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    slots: HashMap<String, (ArrayD<S>, ArrayD<S>)>,
}

impl<S: Scalar> Adam<S> {
    pub fn new() -> Self {
        Adam {
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            slots: HashMap::new(),
        }
    }

    /// Apply one update to every trainable leaf bound in a pass.
    pub fn apply(
        &mut self,
        model: &mut ModelState<S>,
        bound: &[(String, Var)],
        grads: &mut Grads<S>,
        lr: f64,
    ) {
        self.step += 1;
        let b1 = S::from_f(self.beta1);
        let b2 = S::from_f(self.beta2);
        let one = S::one();
        let corr1 = S::from_f(1.0 - self.beta1.powi(self.step as i32));
        let corr2 = S::from_f(1.0 - self.beta2.powi(self.step as i32));
        let lr_s = S::from_f(lr);
        let eps = S::from_f(self.eps);
        for (path, var) in bound {
            let Some(g) = grads.take(*var) else { continue };
            let param = model
                .learnable_mut(path)
                .unwrap_or_else(|| panic!("unknown parameter {path}"));
            let (m, v) = self
                .slots
                .entry(path.clone())
                .or_insert_with(|| (ArrayD::zeros(g.raw_dim()), ArrayD::zeros(g.raw_dim())));
            let ps = param.as_slice_mut().unwrap();
            let ms = m.as_slice_mut().unwrap();
            let vs = v.as_slice_mut().unwrap();
            let gs = g.as_slice().unwrap();
            for i in 0..ps.len() {
                let gi = gs[i];
                ms[i] = b1 * ms[i] + (one - b1) * gi;
                vs[i] = b2 * vs[i] + (one - b2) * gi * gi;
                let mhat = ms[i] / corr1;
                let vhat = vs[i] / corr2;
                ps[i] = ps[i] - lr_s * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

impl<S: Scalar> Default for Adam<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Learning-rate schedule: multiply by `factor` when the smoothed (EMA)
/// train loss has not improved by `min_delta` for `patience` epochs.
pub struct PlateauScheduler {
    pub lr: f64,
    factor: f64,
    patience: usize,
    min_delta: f64,
    alpha: f64,
    floor: f64,
    ema: Option<f64>,
    best: f64,
    stale: usize,
}

impl PlateauScheduler {
    pub fn new(cfg: &TrainConfig) -> Self {
        PlateauScheduler {
            lr: cfg.lr,
            factor: cfg.plateau_factor,
            patience: cfg.plateau_patience,
            min_delta: cfg.plateau_min_delta,
            alpha: cfg.plateau_ema_alpha,
            floor: cfg.lr_floor,
            ema: None,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Feed one epoch's train loss; returns the learning rate to use next.
    pub fn observe(&mut self, loss: f64) -> f64 {
        let ema = match self.ema {
            None => loss,
            Some(prev) => self.alpha * loss + (1.0 - self.alpha) * prev,
        };
        self.ema = Some(ema);
        if ema < self.best - self.min_delta {
            self.best = ema;
            self.stale = 0;
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                self.lr = (self.lr * self.factor).max(self.floor);
                self.stale = 0;
            }
        }
        self.lr
    }
}

/// One batch: clips stacked `[B, T, W, H, 3]` plus `[B, D]` messages.
pub struct TrainBatch<S: Scalar> {
    pub videos: ArrayD<S>,
    pub messages: ArrayD<S>,
    pub bit_messages: Vec<BitMessage>,
}

/// Pair each clip with a random message and its bitwise complement,
/// interleaved: (v1, M1), (v1, ~M1), (v2, M2), ...
pub fn build_batch<S: Scalar>(
    clips: &[VideoClip<S>],
    rng: &mut impl Rng,
    width: usize,
    hamming_pairs: bool,
) -> TrainBatch<S> {
    let mut ordered = Vec::new();
    let mut messages = Vec::new();
    for clip in clips {
        let m = BitMessage::random(width, rng);
        if hamming_pairs {
            ordered.push(clip.clone());
            ordered.push(clip.clone());
            messages.push(m.complement());
            messages.insert(messages.len() - 1, m);
        } else {
            ordered.push(clip.clone());
            messages.push(m);
        }
    }
    let videos = stack_clips(&ordered);
    let flat: Vec<S> = messages
        .iter()
        .flat_map(|m| m.bits().iter().map(|&b| S::from_f(b as f64)))
        .collect();
    let msg_arr = ArrayD::from_shape_vec(IxDyn(&[messages.len(), width]), flat).unwrap();
    TrainBatch {
        videos,
        messages: msg_arr,
        bit_messages: messages,
    }
}

/// Deterministic augmentation: horizontal flip of every frame with
/// probability 0.5, then one random spatial window of the training size
/// shared by all frames.
pub fn augment<S: Scalar>(
    clip: &VideoClip<S>,
    rng: &mut impl Rng,
    (tt, tw, th): (usize, usize, usize),
    clip_id: &str,
) -> Result<VideoClip<S>> {
    let (t, w, h) = clip.dims();
    if t < tt || w < tw || h < th {
        return Err(Error::config(format!(
            "clip {clip_id} is {t}x{w}x{h}, smaller than the training size {tt}x{tw}x{th}"
        )));
    }
    let flip = rng.random_bool(0.5);
    let x0 = rng.random_range(0..=w - tw);
    let y0 = rng.random_range(0..=h - th);
    let src = clip.data().as_slice().unwrap();
    let mut out = ArrayD::zeros(IxDyn(&[tt, tw, th, 3]));
    {
        let os = out.as_slice_mut().unwrap();
        for ti in 0..tt {
            for x in 0..tw {
                // horizontal flip mirrors the width axis
                let sx = if flip { w - 1 - (x0 + x) } else { x0 + x };
                for y in 0..th {
                    let d = ((ti * tw + x) * th + y) * 3;
                    let s = ((ti * w + sx) * h + (y0 + y)) * 3;
                    os[d..d + 3].copy_from_slice(&src[s..s + 3]);
                }
            }
        }
    }
    Ok(VideoClip::new(out).expect("augmented clip keeps the pixel range"))
}

/// Outcome of one optimization step.
pub struct StepOutcome {
    pub losses: LossBundle,
    pub train_bit_acc: f64,
}

fn ensure_finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numerical(format!(
            "loss term {name} became non-finite ({v})"
        )))
    }
}

/// Generator phase: one Adam step on the combined encoder/decoder objective.
pub fn generator_phase<S: Scalar>(
    model: &mut ModelState<S>,
    adam: &mut Adam<S>,
    batch: &TrainBatch<S>,
    draw: &NoiseDraw,
    cfg: &ObjectiveCfg,
    lr: f64,
) -> Result<StepOutcome> {
    let mut tape = Tape::new();
    let mut pass = Pass::new(&mut tape);
    let videos = pass.tape.constant(batch.videos.clone());
    let msgs = pass.tape.constant(batch.messages.clone());
    let graph = build_generator_graph(model, &mut pass, videos, msgs, draw, cfg)?;
    let bound: Vec<(String, Var)> = pass.trainable().to_vec();

    let mut losses = LossBundle {
        data: ensure_finite("data", tape.scalar_value(graph.data).to_f())?,
        codec: ensure_finite("codec", tape.scalar_value(graph.codec).to_f())?,
        ..LossBundle::default()
    };
    if let Some(r) = graph.realism {
        losses.realism = ensure_finite("realism", tape.scalar_value(r).to_f())?;
    }
    if let Some(a) = graph.tamper {
        losses.tamper = ensure_finite("tamper", tape.scalar_value(a).to_f())?;
    }
    // training accuracy from the data-branch logits
    let logits = tape.value(graph.data_logits);
    let mut correct = 0usize;
    let mut total = 0usize;
    for (row, msg) in logits
        .as_slice()
        .unwrap()
        .chunks_exact(model.message_width)
        .zip(&batch.bit_messages)
    {
        for (l, &b) in row.iter().zip(msg.bits()) {
            let pred = if *l > S::zero() { 1 } else { 0 };
            if pred == b {
                correct += 1;
            }
            total += 1;
        }
    }

    let mut grads = tape.backward(graph.objective);
    adam.apply(model, &bound, &mut grads, lr);
    Ok(StepOutcome {
        losses,
        train_bit_acc: correct as f64 / total.max(1) as f64,
    })
}

/// Critic phase: one Adam step on the separation loss, then weight clipping.
pub fn critic_phase<S: Scalar>(
    model: &mut ModelState<S>,
    adam: &mut Adam<S>,
    batch: &TrainBatch<S>,
    clip_bound: f64,
    lr: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let mut pass = Pass::new(&mut tape);
    let videos = pass.tape.constant(batch.videos.clone());
    let msgs = pass.tape.constant(batch.messages.clone());
    let loss = build_critic_graph(model, &mut pass, videos, msgs);
    let bound: Vec<(String, Var)> = pass.trainable().to_vec();
    let value = ensure_finite("critic", tape.scalar_value(loss).to_f())?;
    let mut grads = tape.backward(loss);
    adam.apply(model, &bound, &mut grads, lr);
    model.clip_critic(clip_bound);
    Ok(value)
}

/// Adversary phase: one Adam step on the negated tamper loss.
pub fn adversary_phase<S: Scalar>(
    model: &mut ModelState<S>,
    adam: &mut Adam<S>,
    batch: &TrainBatch<S>,
    lr: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let mut pass = Pass::new(&mut tape);
    let videos = pass.tape.constant(batch.videos.clone());
    let msgs = pass.tape.constant(batch.messages.clone());
    let loss = build_adversary_graph(model, &mut pass, videos, msgs);
    let bound: Vec<(String, Var)> = pass.trainable().to_vec();
    let value = ensure_finite("removal", tape.scalar_value(loss).to_f())?;
    let mut grads = tape.backward(loss);
    adam.apply(model, &bound, &mut grads, lr);
    Ok(value)
}

/// Optimizer state for the three parties.
pub struct Optimizers<S: Scalar> {
    pub generator: Adam<S>,
    pub critic: Adam<S>,
    pub adversary: Adam<S>,
}

impl<S: Scalar> Optimizers<S> {
    pub fn new() -> Self {
        Optimizers {
            generator: Adam::new(),
            critic: Adam::new(),
            adversary: Adam::new(),
        }
    }
}

impl<S: Scalar> Default for Optimizers<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// One full training step: generator update, then (if enabled) critic
/// update(s) with weight clipping, then (if enabled) adversary update.
pub fn train_step<S: Scalar>(
    model: &mut ModelState<S>,
    opts: &mut Optimizers<S>,
    batch: &TrainBatch<S>,
    draw: &NoiseDraw,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<StepOutcome> {
    let ocfg = cfg.objective_cfg();
    let mut out = generator_phase(model, &mut opts.generator, batch, draw, &ocfg, lr)?;
    if cfg.enable_critic {
        for _ in 0..cfg.critic_steps {
            out.losses.critic =
                critic_phase(model, &mut opts.critic, batch, cfg.critic_clip, lr)?;
        }
        // f32 cannot represent 0.1 exactly; allow representation slack
        debug_assert!(model.max_abs_param(Party::Critic) <= cfg.critic_clip + 1e-6);
    }
    if cfg.enable_adversary {
        out.losses.removal = adversary_phase(model, &mut opts.adversary, batch, lr)?;
    }
    Ok(out)
}

fn derive_seed(base: u64, tag: &str, n: u64) -> u64 {
    let mut hash = 0xcbf29ce484222325u64 ^ base.wrapping_mul(0x9E3779B97F4A7C15);
    for b in tag.as_bytes().iter().copied().chain(n.to_le_bytes()) {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Result of a full training run.
pub struct TrainOutcome {
    pub model: ModelState<f32>,
    pub records: Vec<TrainLogRecord>,
    pub log_path: PathBuf,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
}

/// Train a model on the corpus manifest, writing per-epoch checkpoints, a
/// best-by-validation-accuracy checkpoint and a line-delimited log under
/// `out_dir`.
pub fn fit(cfg: &TrainConfig, manifest: &CorpusManifest, out_dir: &Path) -> Result<TrainOutcome> {
    crate::tune_allocator();
    cfg.validate()?;
    manifest.validate()?;
    let train_entries = manifest.split_entries(Split::Train);
    if train_entries.is_empty() {
        return Err(Error::config("corpus has no training clips"));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ckpt_dir = out_dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let log_path = out_dir.join("train_log.jsonl");
    let mut log_file = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;

    let mut model = ModelState::<f32>::new(
        cfg.message_width,
        cfg.fusion,
        derive_seed(cfg.seed, "init", 0),
    );
    let mut opts = Optimizers::new();
    let mut scheduler = PlateauScheduler::new(cfg);
    let clips_per_batch = if cfg.hamming_pairs {
        cfg.batch_size / 2
    } else {
        cfg.batch_size
    };

    // preload the training clips once; the corpus is desk-scale
    let mut clips: Vec<(String, VideoClip<f32>)> = Vec::new();
    for e in &train_entries {
        clips.push((e.id.clone(), load_entry(e)?));
    }

    let val_cfg = EvalConfig {
        seed: derive_seed(cfg.seed, "val", 0),
        mjpeg_quality: cfg.mjpeg_quality,
        chroma_subsampled: cfg.chroma_subsampled,
        ..EvalConfig::default()
    };

    let start = Instant::now();
    let mut records: Vec<TrainLogRecord> = Vec::new();
    let mut best_score = f64::NEG_INFINITY;
    let best_path = ckpt_dir.join("best.ckpt");
    let mut lr = cfg.lr;

    for epoch in 1..=cfg.epochs {
        // shuffle clip order
        let mut order: Vec<usize> = (0..clips.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "shuffle", epoch as u64));
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.random_range(0..=i);
            order.swap(i, j);
        }

        let mut sums = LossBundle::default();
        let mut acc_sum = 0.0;
        let mut sample_count = 0usize;
        for (step, group) in order.chunks(clips_per_batch).enumerate() {
            let step_seed = derive_seed(cfg.seed, "step", (epoch * 10_000 + step) as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(step_seed);
            let mut batch_clips = Vec::with_capacity(group.len());
            for &idx in group {
                let (id, clip) = &clips[idx];
                batch_clips.push(augment(
                    clip,
                    &mut rng,
                    (cfg.train_t, cfg.train_w, cfg.train_h),
                    id,
                )?);
            }
            let batch = build_batch(&batch_clips, &mut rng, cfg.message_width, cfg.hamming_pairs);
            let draw = NoiseDraw::sample(&cfg.noise, (cfg.train_w, cfg.train_h), &mut rng);
            let out = train_step(&mut model, &mut opts, &batch, &draw, cfg, lr)?;
            let b = batch.bit_messages.len();
            sums.data += out.losses.data * b as f64;
            sums.codec += out.losses.codec * b as f64;
            sums.realism += out.losses.realism * b as f64;
            sums.tamper += out.losses.tamper * b as f64;
            sums.critic += out.losses.critic * b as f64;
            sums.removal += out.losses.removal * b as f64;
            acc_sum += out.train_bit_acc * b as f64;
            sample_count += b;
        }
        let n = sample_count.max(1) as f64;
        let epoch_losses = LossBundle {
            data: sums.data / n,
            codec: sums.codec / n,
            realism: sums.realism / n,
            tamper: sums.tamper / n,
            critic: sums.critic / n,
            removal: sums.removal / n,
        };

        // per-epoch validation with fixed seeds
        let val = evaluate_model(&mut model, manifest, Split::Val, &val_cfg)?;

        let record = TrainLogRecord {
            epoch,
            wall_clock_s: start.elapsed().as_secs_f64(),
            loss_data: epoch_losses.data,
            loss_codec: epoch_losses.codec,
            loss_realism: epoch_losses.realism,
            loss_tamper: epoch_losses.tamper,
            loss_critic: epoch_losses.critic,
            loss_removal: epoch_losses.removal,
            train_bit_acc: acc_sum / n,
            val_identity_acc: val.identity_acc,
            val_mjpeg_acc: val.mjpeg_acc,
            val_cropped_acc: val.cropped_acc,
            val_scaled_acc: val.scaled_acc,
            lr,
        };
        {
            use std::io::Write;
            let line = serde_json::to_string(&record).expect("record serializes");
            writeln!(log_file, "{line}").map_err(|e| Error::io(&log_path, e))?;
        }

        // checkpoints: every epoch plus best-by-mean-validation-accuracy
        let epoch_path = ckpt_dir.join(format!("epoch_{epoch:03}.ckpt"));
        model.save(&epoch_path)?;
        let score =
            (val.identity_acc + val.mjpeg_acc + val.cropped_acc + val.scaled_acc) / 4.0;
        if score > best_score {
            best_score = score;
            model.save(&best_path)?;
        }

        // plateau decay on the smoothed encoder/decoder objective
        let objective = crate::objectives::encoder_decoder_objective(&epoch_losses, &cfg.weights);
        lr = scheduler.observe(objective);

        records.push(record);

        if let Some(target) = cfg.early_stop_min_acc {
            if val.identity_acc >= target
                && val.cropped_acc >= target
                && val.scaled_acc >= target
            {
                break;
            }
        }
    }

    let final_path = ckpt_dir.join("final.ckpt");
    model.save(&final_path)?;
    if best_score == f64::NEG_INFINITY {
        model.save(&best_path)?;
    }
    Ok(TrainOutcome {
        model,
        records,
        log_path,
        final_checkpoint: final_path,
        best_checkpoint: best_path,
    })
}

/// Ablation trainer: identical procedure with the attention mask replaced by
/// naive spatial replication of the message.
pub fn baseline_no_attention(
    cfg: &TrainConfig,
    manifest: &CorpusManifest,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    let cfg = TrainConfig {
        fusion: Fusion::Replicate,
        ..cfg.clone()
    };
    fit(&cfg, manifest, out_dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::media::synth_corpus;
    use crate::noise::LayerSet;

    fn toy_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            message_width: 8,
            epochs: 2,
            train_t: 1,
            train_w: 16,
            train_h: 16,
            noise: NoiseConfig {
                layers: LayerSet::none(),
                ..NoiseConfig::default()
            },
            weights: LossWeights {
                data: 1.0,
                codec: 0.0,
                realism: 0.0,
                tamper: 0.0,
            },
            ..TrainConfig::default()
        }
    }

    fn toy_clips(n: usize, seed: u64) -> Vec<VideoClip<f32>> {
        let manifest = synth_corpus(seed, n.max(3) + 2, 1, 16, 16).unwrap();
        manifest
            .entries
            .iter()
            .take(n)
            .map(|e| load_entry(e).unwrap())
            .collect()
    }

    #[test]
    fn hamming_batches_interleave_complements() {
        let clips = toy_clips(3, 101);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let batch = build_batch(&clips, &mut rng, 8, true);
        assert_eq!(batch.bit_messages.len(), 6);
        assert_eq!(batch.videos.shape()[0], 6);
        for pair in batch.bit_messages.chunks_exact(2) {
            assert_eq!(
                pair[0].hamming_distance(&pair[1]),
                8,
                "xor of a pair must be all ones"
            );
        }
        // clips appear twice, in order
        for (i, pair) in batch.bit_messages.chunks_exact(2).enumerate() {
            let _ = pair;
            let per = 16 * 16 * 3;
            let vs = batch.videos.as_slice().unwrap();
            let a = &vs[(2 * i) * per..(2 * i + 1) * per];
            let b = &vs[(2 * i + 1) * per..(2 * i + 2) * per];
            assert_eq!(a, b);
        }
    }

    #[test]
    fn plain_batches_have_one_message_per_clip() {
        let clips = toy_clips(4, 102);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let batch = build_batch(&clips, &mut rng, 8, false);
        assert_eq!(batch.bit_messages.len(), 4);
        assert_eq!(batch.videos.shape()[0], 4);
    }

    #[test]
    fn augment_is_deterministic_and_temporally_consistent() {
        let clips = toy_clips(1, 103);
        let manifest = synth_corpus(104, 3, 3, 24, 24).unwrap();
        let clip: VideoClip<f32> = load_entry(&manifest.entries[0]).unwrap();
        let _ = clips;
        let a = augment(&clip, &mut ChaCha8Rng::seed_from_u64(9), (2, 16, 16), "c").unwrap();
        let b = augment(&clip, &mut ChaCha8Rng::seed_from_u64(9), (2, 16, 16), "c").unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(a.dims(), (2, 16, 16));
    }

    #[test]
    fn augment_rejects_small_sources() {
        let manifest = synth_corpus(105, 3, 1, 8, 8).unwrap();
        let clip: VideoClip<f32> = load_entry(&manifest.entries[0]).unwrap();
        let r = augment(&clip, &mut ChaCha8Rng::seed_from_u64(10), (1, 16, 16), "tiny");
        assert!(r.is_err());
    }

    #[test]
    fn flip_twice_is_identity() {
        // With the same rng decisions, flipping twice through augment equals
        // the unflipped crop; verify the flip itself is an involution.
        let manifest = synth_corpus(106, 3, 1, 16, 16).unwrap();
        let clip: VideoClip<f32> = load_entry(&manifest.entries[0]).unwrap();
        let flip_once = |c: &VideoClip<f32>| {
            let (t, w, h) = c.dims();
            let src = c.data().as_slice().unwrap();
            let mut out = ArrayD::zeros(IxDyn(&[t, w, h, 3]));
            {
                let os = out.as_slice_mut().unwrap();
                for ti in 0..t {
                    for x in 0..w {
                        for y in 0..h {
                            let d = ((ti * w + x) * h + y) * 3;
                            let s = ((ti * w + (w - 1 - x)) * h + y) * 3;
                            os[d..d + 3].copy_from_slice(&src[s..s + 3]);
                        }
                    }
                }
            }
            VideoClip::new(out).unwrap()
        };
        let twice = flip_once(&flip_once(&clip));
        assert_eq!(clip.data(), twice.data());
    }

    #[test]
    fn critic_step_clips_weights_and_touches_nothing_else() {
        let mut model = ModelState::<f32>::new(8, Fusion::Attention, 200);
        let mut opts = Optimizers::new();
        let clips = toy_clips(2, 107);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let batch = build_batch(&clips, &mut rng, 8, true);

        let snapshot = |m: &ModelState<f32>, party: Party| {
            let mut v = Vec::new();
            m.visit_party(party, &mut |_, a| v.extend(a.iter().copied()));
            v
        };
        let gen_before = snapshot(&model, Party::Generator);
        let adv_before = snapshot(&model, Party::Adversary);
        let critic_before = snapshot(&model, Party::Critic);

        critic_phase(&mut model, &mut opts.critic, &batch, 0.1, 1e-3).unwrap();

        assert_eq!(gen_before, snapshot(&model, Party::Generator));
        assert_eq!(adv_before, snapshot(&model, Party::Adversary));
        assert_ne!(critic_before, snapshot(&model, Party::Critic));
        assert!(model.max_abs_param(Party::Critic) <= 0.1 + 1e-6);
    }

    #[test]
    fn adversary_step_touches_only_adversary() {
        let mut model = ModelState::<f32>::new(8, Fusion::Attention, 201);
        let mut opts = Optimizers::new();
        let clips = toy_clips(2, 108);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let batch = build_batch(&clips, &mut rng, 8, true);
        let snapshot = |m: &ModelState<f32>, party: Party| {
            let mut v = Vec::new();
            m.visit_party(party, &mut |_, a| v.extend(a.iter().copied()));
            v
        };
        let gen_before = snapshot(&model, Party::Generator);
        let critic_before = snapshot(&model, Party::Critic);
        adversary_phase(&mut model, &mut opts.adversary, &batch, 1e-3).unwrap();
        assert_eq!(gen_before, snapshot(&model, Party::Generator));
        assert_eq!(critic_before, snapshot(&model, Party::Critic));
    }

    #[test]
    fn generator_step_leaves_critic_and_adversary_alone() {
        let mut model = ModelState::<f32>::new(8, Fusion::Attention, 202);
        let mut opts = Optimizers::new();
        let clips = toy_clips(2, 109);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let batch = build_batch(&clips, &mut rng, 8, true);
        let cfg = toy_cfg();
        let snapshot = |m: &ModelState<f32>, party: Party| {
            let mut v = Vec::new();
            m.visit_party(party, &mut |_, a| v.extend(a.iter().copied()));
            v
        };
        let critic_before = snapshot(&model, Party::Critic);
        let adv_before = snapshot(&model, Party::Adversary);
        generator_phase(
            &mut model,
            &mut opts.generator,
            &batch,
            &NoiseDraw::identity(),
            &cfg.objective_cfg(),
            1e-3,
        )
        .unwrap();
        assert_eq!(critic_before, snapshot(&model, Party::Critic));
        assert_eq!(adv_before, snapshot(&model, Party::Adversary));
    }

    #[test]
    fn scheduler_decays_on_plateau_and_never_increases() {
        let cfg = TrainConfig {
            plateau_patience: 2,
            ..TrainConfig::default()
        };
        let mut s = PlateauScheduler::new(&cfg);
        // constant loss: the first observation sets the best, then two
        // stale epochs (patience 2) halve the rate
        let mut lr = s.observe(1.0);
        assert_eq!(lr, cfg.lr);
        lr = s.observe(1.0);
        assert_eq!(lr, cfg.lr);
        lr = s.observe(1.0);
        assert!((lr - cfg.lr * 0.5).abs() < 1e-12);
        // never increases, floored below
        let mut last = lr;
        for _ in 0..100 {
            let lr = s.observe(1.0);
            assert!(lr >= cfg.lr_floor - 1e-18);
            assert!(lr <= last);
            last = lr;
        }
    }

    #[test]
    fn overfit_one_clip_drives_data_loss_down() {
        // 200 steps on one fixed (clip, message): the data loss falls below
        // 0.1 and its smoothed curve never rises.
        let mut model = ModelState::<f32>::new(8, Fusion::Attention, 203);
        let mut opts = Optimizers::new();
        let manifest = synth_corpus(110, 3, 2, 16, 16).unwrap();
        let clip: VideoClip<f32> = load_entry(&manifest.entries[0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let message = BitMessage::random(8, &mut rng);
        let videos = stack_clips(&[clip]);
        let flat: Vec<f32> = message.bits().iter().map(|&b| b as f32).collect();
        let batch = TrainBatch {
            videos,
            messages: ArrayD::from_shape_vec(IxDyn(&[1, 8]), flat).unwrap(),
            bit_messages: vec![message],
        };
        let cfg = toy_cfg();
        let ocfg = cfg.objective_cfg();
        let mut losses = Vec::new();
        for _ in 0..200 {
            let out = generator_phase(
                &mut model,
                &mut opts.generator,
                &batch,
                &NoiseDraw::identity(),
                &ocfg,
                5e-2,
            )
            .unwrap();
            losses.push(out.losses.data);
        }
        assert!(
            losses.last().unwrap() < &0.1,
            "final loss {}",
            losses.last().unwrap()
        );
        // smoothed (window 20) trend is non-increasing
        let window = 20;
        let sma: Vec<f64> = losses
            .windows(window)
            .map(|w| w.iter().sum::<f64>() / window as f64)
            .collect();
        for pair in sma.windows(2) {
            assert!(
                pair[1] <= pair[0] + 1e-3,
                "smoothed loss rose: {} -> {}",
                pair[0],
                pair[1]
            );
        }
    }

    #[test]
    fn adversary_training_raises_tamper_loss() {
        // Overfit a small codec first, then train only the adversary; the
        // tamper loss must rise from its starting point.
        let mut model = ModelState::<f32>::new(8, Fusion::Attention, 204);
        let mut opts = Optimizers::new();
        let manifest = synth_corpus(111, 3, 2, 16, 16).unwrap();
        let clip: VideoClip<f32> = load_entry(&manifest.entries[0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let message = BitMessage::random(8, &mut rng);
        let flat: Vec<f32> = message.bits().iter().map(|&b| b as f32).collect();
        let batch = TrainBatch {
            videos: stack_clips(&[clip]),
            messages: ArrayD::from_shape_vec(IxDyn(&[1, 8]), flat).unwrap(),
            bit_messages: vec![message],
        };
        let cfg = toy_cfg();
        let ocfg = cfg.objective_cfg();
        for _ in 0..200 {
            generator_phase(
                &mut model,
                &mut opts.generator,
                &batch,
                &NoiseDraw::identity(),
                &ocfg,
                5e-2,
            )
            .unwrap();
        }
        let before = -adversary_phase(&mut model, &mut opts.adversary, &batch, 5e-2).unwrap();
        let mut after = before;
        for _ in 0..100 {
            after = -adversary_phase(&mut model, &mut opts.adversary, &batch, 5e-2).unwrap();
        }
        assert!(
            after > before,
            "tamper loss should rise under adversary training: {before} -> {after}"
        );
    }

    #[test]
    fn fit_is_deterministic_and_logs_every_epoch() {
        let manifest = synth_corpus(112, 5, 1, 16, 16).unwrap();
        let cfg = toy_cfg();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let a = fit(&cfg, &manifest, dir_a.path()).unwrap();
        let b = fit(&cfg, &manifest, dir_b.path()).unwrap();
        assert_eq!(a.records.len(), 2);
        for (x, y) in a.records.iter().zip(&b.records) {
            assert!(x.same_trajectory(y), "trajectories diverge at epoch {}", x.epoch);
        }
        assert!(a.log_path.exists());
        assert!(a.final_checkpoint.exists());
        assert!(a.best_checkpoint.exists());
        // learning rate never increases
        for pair in a.records.windows(2) {
            assert!(pair[1].lr <= pair[0].lr);
        }
    }

    #[test]
    fn pairing_covers_every_clip_with_message_and_complement() {
        // one epoch's groups cover each train clip exactly once; with
        // hamming pairs each clip therefore sees M and its complement
        let manifest = synth_corpus(113, 6, 1, 16, 16).unwrap();
        let train = manifest.split_entries(Split::Train);
        let clips: Vec<VideoClip<f32>> =
            train.iter().map(|e| load_entry(*e).unwrap()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut seen = vec![0usize; clips.len()];
        for group in (0..clips.len()).collect::<Vec<_>>().chunks(2) {
            let group_clips: Vec<VideoClip<f32>> =
                group.iter().map(|&i| clips[i].clone()).collect();
            let batch = build_batch(&group_clips, &mut rng, 8, true);
            for (gi, &ci) in group.iter().enumerate() {
                seen[ci] += 1;
                let m = &batch.bit_messages[2 * gi];
                let mc = &batch.bit_messages[2 * gi + 1];
                assert_eq!(m.hamming_distance(mc), 8);
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = toy_cfg();
        cfg.batch_size = 5; // odd with pairing
        assert!(cfg.validate().is_err());
        let mut cfg = toy_cfg();
        cfg.lr = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = toy_cfg();
        cfg.noise.crop_range = (0.0, 0.5);
        assert!(cfg.validate().is_err());
    }
}
