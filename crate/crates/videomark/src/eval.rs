//! Quality metrics, the robustness evaluation protocol and diagnostics
//! (residual images, bit-flip difference masks, convergence reports).

use std::path::{Path, PathBuf};

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::autodiff::Scalar;
use crate::error::{Error, Result};
use crate::media::{load_entry, write_png_rgb8, CorpusManifest, Split};
use crate::model::ModelState;
use crate::noise::mjpeg::{mjpeg_roundtrip, quantize_roundtrip, quantize_u8, ChromaMode};
use crate::noise::{apply_noise_array, crop_dims, scaled_dim, NoiseDraw};
use crate::video::{BitMessage, MessageLogits, VideoClip};

/// PSNR in decibels, with a sentinel for identical inputs (infinite ratio).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", untagged)]
pub enum PsnrValue {
    Db(f64),
    Identical(String),
}

impl PsnrValue {
    pub fn identical() -> Self {
        PsnrValue::Identical("identical".into())
    }

    pub fn db(&self) -> Option<f64> {
         match self {
            PsnrValue::Db(v) => Some(*v),
            PsnrValue::Identical(_) => None,
        }
    }
}

/// Fraction of bit positions where the hard decision matches the message.
pub fn bit_accuracy<S: Scalar>(message: &BitMessage, logits: &MessageLogits<S>) -> f64 {
    assert_eq!(message.width(), logits.width());
    let predicted = logits.predict_bits();
    let matches = predicted
        .bits()
        .iter()
        .zip(message.bits())
        .filter(|(a, b)| a == b)
        .count();
    matches as f64 / message.width() as f64
}

/// Peak signal-to-noise ratio with peak 2.0 (the width of [-1, 1]).
pub fn psnr<S: Scalar>(a: &VideoClip<S>, b: &VideoClip<S>) -> PsnrValue {
    assert_eq!(a.data().shape(), b.data().shape());
    let mut se = 0.0f64;
    for (x, y) in a.data().iter().zip(b.data().iter()) {
        let d = x.to_f() - y.to_f();
        se += d * d;
    }
    let mse = se / a.data().len() as f64;
    if mse == 0.0 {
        PsnrValue::identical()
    } else {
        PsnrValue::Db(10.0 * (4.0 / mse).log10())
    }
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_RANGE: f64 = 2.0;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Luminance plane of frame `t`, in [-1, 1] units, as a `[W, H]` row-major
/// (over the W axis) buffer.
fn luminance<S: Scalar>(clip: &VideoClip<S>, t: usize) -> (Vec<f64>, usize, usize) {
    let (_, w, h) = clip.dims();
    let cs = clip.data().as_slice().unwrap();
    let frame = &cs[t * w * h * 3..(t + 1) * w * h * 3];
    let mut out = vec![0.0; w * h];
    for (o, px) in out.iter_mut().zip(frame.chunks_exact(3)) {
        *o = 0.299 * px[0].to_f() + 0.587 * px[1].to_f() + 0.114 * px[2].to_f();
    }
    (out, w, h)
}

/// Separable valid-mode Gaussian filter over a `[w, h]` plane, returning a
/// `[w - 10, h - 10]` plane of weighted window means.
fn gaussian_filter_valid(plane: &[f64], w: usize, h: usize) -> Vec<f64> {
    let k = gaussian_kernel();
    let oh = h - SSIM_WINDOW + 1;
    let ow = w - SSIM_WINDOW + 1;
    // filter along h
    let mut tmp = vec![0.0; w * oh];
    for x in 0..w {
        for y in 0..oh {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * plane[x * h + y + i];
            }
            tmp[x * oh + y] = acc;
        }
    }
    // filter along w
    let mut out = vec![0.0; ow * oh];
    for x in 0..ow {
        for y in 0..oh {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * tmp[(x + i) * oh + y];
            }
            out[x * oh + y] = acc;
        }
    }
    out
}

/// Structural similarity on the luminance channel, 11x11 Gaussian windows
/// (sigma 1.5), averaged over valid window positions and frames. Frames
/// smaller than the window fall back to one global uniform window.
pub fn ssim<S: Scalar>(a: &VideoClip<S>, b: &VideoClip<S>) -> f64 {
    assert_eq!(a.data().shape(), b.data().shape());
    let (t, w, h) = a.dims();
    let c1 = (SSIM_K1 * SSIM_RANGE).powi(2);
    let c2 = (SSIM_K2 * SSIM_RANGE).powi(2);
    let mut total = 0.0;
    for ti in 0..t {
        let (la, ..) = luminance(a, ti);
        let (lb, ..) = luminance(b, ti);
        total += if w >= SSIM_WINDOW && h >= SSIM_WINDOW {
            let sq_a: Vec<f64> = la.iter().map(|v| v * v).collect();
            let sq_b: Vec<f64> = lb.iter().map(|v| v * v).collect();
            let ab: Vec<f64> = la.iter().zip(&lb).map(|(x, y)| x * y).collect();
            let mu_a = gaussian_filter_valid(&la, w, h);
            let mu_b = gaussian_filter_valid(&lb, w, h);
            let m_aa = gaussian_filter_valid(&sq_a, w, h);
            let m_bb = gaussian_filter_valid(&sq_b, w, h);
            let m_ab = gaussian_filter_valid(&ab, w, h);
            let mut sum = 0.0;
            for i in 0..mu_a.len() {
                let (ma, mb) = (mu_a[i], mu_b[i]);
                let va = m_aa[i] - ma * ma;
                let vb = m_bb[i] - mb * mb;
                let cov = m_ab[i] - ma * mb;
                sum += (2.0 * ma * mb + c1) * (2.0 * cov + c2)
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
            sum / mu_a.len() as f64
        } else {
            // global uniform window for frames smaller than 11x11
            let n = la.len() as f64;
            let ma = la.iter().sum::<f64>() / n;
            let mb = lb.iter().sum::<f64>() / n;
            let va = la.iter().map(|v| (v - ma) * (v - ma)).sum::<f64>() / n;
            let vb = lb.iter().map(|v| (v - mb) * (v - mb)).sum::<f64>() / n;
            let cov = la
                .iter()
                .zip(&lb)
                .map(|(x, y)| (x - ma) * (y - mb))
                .sum::<f64>()
                / n;
            (2.0 * ma * mb + c1) * (2.0 * cov + c2)
                / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        };
    }
    total / t as f64
}

/// Evaluation settings; the deterministic variant pins cropping and scaling
/// to their worst-case 80% so reports are stable.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalConfig {
    pub seed: u64,
    pub mjpeg_quality: u8,
    pub chroma_subsampled: bool,
    /// Randomize crop/scale like the training draws instead of the
    /// deterministic worst case.
    pub randomized: bool,
    pub crop_area: f64,
    pub scale_factor: f64,
    /// Measure PSNR/SSIM after 8-bit quantization instead of on the raw
    /// encoder output.
    pub post_quantization: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            seed: 0,
            mjpeg_quality: 80,
            chroma_subsampled: false,
            randomized: false,
            crop_area: 0.8,
            scale_factor: 0.8,
            post_quantization: false,
        }
    }
}

impl EvalConfig {
    pub fn chroma(&self) -> ChromaMode {
        if self.chroma_subsampled {
            ChromaMode::Subsampled
        } else {
            ChromaMode::Full
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClipReport {
    pub id: String,
    pub message: String,
    pub psnr: PsnrValue,
    pub ssim: f64,
    pub identity: f64,
    pub mjpeg: f64,
    pub cropped: f64,
    pub scaled: f64,
}

/// Per-model robustness evaluation results (quality plus accuracy through
/// the four decode pipelines).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub model_id: String,
    pub message_width: usize,
    pub fusion: String,
    pub psnr: PsnrValue,
    pub ssim: f64,
    pub identity_acc: f64,
    pub mjpeg_acc: f64,
    pub cropped_acc: f64,
    pub scaled_acc: f64,
    pub per_clip: Vec<ClipReport>,
    pub eval: EvalConfig,
    pub tool_version: String,
}

impl RobustnessReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

fn fnv1a(text: &str) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for b in text.as_bytes() {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

fn message_label(m: &BitMessage) -> String {
    if m.width() % 4 == 0 {
        m.to_hex()
    } else {
        m.bits().iter().map(|b| char::from(b'0' + b)).collect()
    }
}

/// Evaluate a model over one split of a corpus: encode with a per-clip
/// seeded message, measure PSNR/SSIM against the source, then decode through
/// the four pipelines (quantize-only, MJPEG, crop-then-MJPEG,
/// scale-then-MJPEG) and aggregate mean accuracies.
pub fn evaluate_model<S: Scalar>(
    model: &mut ModelState<S>,
    manifest: &CorpusManifest,
    split: Split,
    cfg: &EvalConfig,
) -> Result<RobustnessReport> {
    crate::tune_allocator();
    let entries = manifest.split_entries(split);
    if entries.is_empty() {
        return Err(Error::config(format!("no clips in the {split:?} split")));
    }
    let mut per_clip = Vec::with_capacity(entries.len());
    for entry in entries {
        let clip: VideoClip<S> = load_entry(entry)?;
        let mut rng = rand::SeedableRng::seed_from_u64(cfg.seed ^ fnv1a(&entry.id));
        let message = BitMessage::random(model.message_width, &mut rng);
        let report = evaluate_clip(model, &entry.id, &clip, &message, cfg, &mut rng)?;
        per_clip.push(report);
    }
    let n = per_clip.len() as f64;
    let mean = |f: fn(&ClipReport) -> f64| per_clip.iter().map(f).sum::<f64>() / n;
    let psnr_vals: Vec<f64> = per_clip.iter().filter_map(|c| c.psnr.db()).collect();
    let psnr_mean = if psnr_vals.len() < per_clip.len() {
        PsnrValue::identical()
    } else {
        PsnrValue::Db(psnr_vals.iter().sum::<f64>() / n)
    };
    Ok(RobustnessReport {
        model_id: format!(
            "{}-d{}-{:07}params",
            model.fusion.name(),
            model.message_width,
            model.parameter_count()
        ),
        message_width: model.message_width,
        fusion: model.fusion.name().to_string(),
        psnr: psnr_mean,
        ssim: mean(|c| c.ssim),
        identity_acc: mean(|c| c.identity),
        mjpeg_acc: mean(|c| c.mjpeg),
        cropped_acc: mean(|c| c.cropped),
        scaled_acc: mean(|c| c.scaled),
        per_clip,
        eval: cfg.clone(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
    })
}

fn evaluate_clip<S: Scalar>(
    model: &mut ModelState<S>,
    id: &str,
    clip: &VideoClip<S>,
    message: &BitMessage,
    cfg: &EvalConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<ClipReport> {
    use rand::Rng;
    let (_, w, h) = clip.dims();
    let vhat = model.encode(clip, message);
    let (p, s) = if cfg.post_quantization {
        let q = VideoClip::new(quantize_roundtrip(vhat.data())).unwrap();
        (psnr(clip, &q), ssim(clip, &q))
    } else {
        (psnr(clip, &vhat), ssim(clip, &vhat))
    };

    let acc_of = |model: &mut ModelState<S>, v: &VideoClip<S>| -> f64 {
        bit_accuracy(message, &model.decode(v))
    };

    // identity: 8-bit quantization only
    let identity_clip = VideoClip::new(quantize_roundtrip(vhat.data())).unwrap();
    let identity = acc_of(model, &identity_clip);

    // mjpeg round-trip
    let mj = VideoClip::new(mjpeg_roundtrip(
        vhat.data(),
        cfg.mjpeg_quality,
        cfg.chroma(),
    )?)
    .unwrap();
    let mjpeg_acc = acc_of(model, &mj);

    // cropped then mjpeg
    let (cw, ch) = if cfg.randomized {
        crop_dims((w, h), rng.random_range(cfg.crop_area..1.0))
    } else {
        crop_dims((w, h), cfg.crop_area)
    };
    let (x0, y0) = if cfg.randomized {
        (rng.random_range(0..=w - cw), rng.random_range(0..=h - ch))
    } else {
        ((w - cw) / 2, (h - ch) / 2)
    };
    let cropped = apply_noise_array(
        &batched(vhat.data()),
        &NoiseDraw {
            crop: Some((x0, y0, cw, ch)),
            scale: None,
            compress_drop: None,
        },
    );
    let cropped_clip = VideoClip::new(mjpeg_roundtrip(
        &unbatched(&cropped),
        cfg.mjpeg_quality,
        cfg.chroma(),
    )?)
    .unwrap();
    let cropped_acc = acc_of(model, &cropped_clip);

    // scaled then mjpeg
    let (sw, sh) = if cfg.randomized {
        (
            scaled_dim(w, rng.random_range(cfg.scale_factor..1.0)),
            scaled_dim(h, rng.random_range(cfg.scale_factor..1.0)),
        )
    } else {
        (
            scaled_dim(w, cfg.scale_factor),
            scaled_dim(h, cfg.scale_factor),
        )
    };
    let scaled = apply_noise_array(
        &batched(vhat.data()),
        &NoiseDraw {
            crop: None,
            scale: Some((sw, sh)),
            compress_drop: None,
        },
    );
    let scaled_clip = VideoClip::new(mjpeg_roundtrip(
        &unbatched(&scaled),
        cfg.mjpeg_quality,
        cfg.chroma(),
    )?)
    .unwrap();
    let scaled_acc = acc_of(model, &scaled_clip);

    Ok(ClipReport {
        id: id.to_string(),
        message: message_label(message),
        psnr: p,
        ssim: s,
        identity,
        mjpeg: mjpeg_acc,
        cropped: cropped_acc,
        scaled: scaled_acc,
    })
}

fn batched<S: Scalar>(clip: &ArrayD<S>) -> ArrayD<S> {
    let mut shape = vec![1usize];
    shape.extend_from_slice(clip.shape());
    clip.clone()
        .into_shape_with_order(ndarray::IxDyn(&shape))
        .unwrap()
}

fn unbatched<S: Scalar>(batch: &ArrayD<S>) -> ArrayD<S> {
    let s = batch.shape().to_vec();
    batch
        .clone()
        .into_shape_with_order(ndarray::IxDyn(&s[1..]))
        .unwrap()
}

/// Residual amplification written into the diagnostic image filenames.
pub const RESIDUAL_AMPLIFICATION: f64 = 100.0;

/// Write watermarked frames and amplified residual maps for one clip.
/// Returns the image paths, one watermarked/residual pair per frame.
pub fn residual_images<S: Scalar>(
    model: &mut ModelState<S>,
    clip: &VideoClip<S>,
    message: &BitMessage,
    outdir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(outdir).map_err(|e| Error::io(outdir, e))?;
    let vhat = model.encode(clip, message);
    let (t, w, h) = clip.dims();
    let mut paths = Vec::new();
    for ti in 0..t {
        let marked = outdir.join(format!("frame_{ti:04}_marked.png"));
        let (rgb, fw, fh) = crate::noise::mjpeg::frame_to_rgb8(vhat.data(), ti);
        write_png_rgb8(&marked, &rgb, fw, fh)?;
        paths.push(marked);

        let residual = outdir.join(format!(
            "frame_{ti:04}_residual_x{:.0}.png",
            RESIDUAL_AMPLIFICATION
        ));
        let mut rgb = vec![0u8; w * h * 3];
        let vs = vhat.data().as_slice().unwrap();
        let cs = clip.data().as_slice().unwrap();
        let base = ti * w * h * 3;
        for x in 0..w {
            for y in 0..h {
                for c in 0..3 {
                    let idx = base + (x * h + y) * 3 + c;
                    let amp = (vs[idx].to_f() - cs[idx].to_f()).abs() * RESIDUAL_AMPLIFICATION;
                    rgb[(y * w + x) * 3 + c] = quantize_u8(amp * 2.0 - 1.0);
                }
            }
        }
        write_png_rgb8(&residual, &rgb, w, h)?;
        paths.push(residual);
    }
    Ok(paths)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BitFlipReport {
    pub bits: Vec<usize>,
    /// Pairwise normalized cross-correlation between difference masks.
    pub correlations: Vec<(usize, usize, f64)>,
    pub images: Vec<PathBuf>,
}

/// Pearson correlation between two equally sized buffers.
pub fn normalized_cross_correlation(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        num += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return 1.0;
    }
    num / (va * vb).sqrt()
}

/// For each requested bit, compute `|encode(v, m) - encode(v, m ^ e_bit)|`,
/// write amplified difference masks, and report pairwise correlations
/// between the masks.
pub fn bit_flip_difference<S: Scalar>(
    model: &mut ModelState<S>,
    clip: &VideoClip<S>,
    message: &BitMessage,
    bits: &[usize],
    outdir: &Path,
) -> Result<BitFlipReport> {
    std::fs::create_dir_all(outdir).map_err(|e| Error::io(outdir, e))?;
    let base = model.encode(clip, message);
    let (t, w, h) = clip.dims();
    let mut diffs: Vec<Vec<f64>> = Vec::new();
    let mut images = Vec::new();
    for &bit in bits {
        assert!(bit < message.width(), "bit index out of range");
        let flipped = model.encode(clip, &message.flip_bit(bit));
        let diff: Vec<f64> = base
            .data()
            .iter()
            .zip(flipped.data().iter())
            .map(|(a, b)| (a.to_f() - b.to_f()).abs())
            .collect();
        for ti in 0..t {
            let path = outdir.join(format!(
                "bit{bit:02}_frame_{ti:04}_x{:.0}.png",
                RESIDUAL_AMPLIFICATION
            ));
            let mut rgb = vec![0u8; w * h * 3];
            for x in 0..w {
                for y in 0..h {
                    for c in 0..3 {
                        let v = diff[(ti * w * h + x * h + y) * 3 + c] * RESIDUAL_AMPLIFICATION;
                        rgb[(y * w + x) * 3 + c] = quantize_u8(v * 2.0 - 1.0);
                    }
                }
            }
            write_png_rgb8(&path, &rgb, w, h)?;
            images.push(path);
        }
        diffs.push(diff);
    }
    let mut correlations = Vec::new();
    for i in 0..bits.len() {
        for j in i + 1..bits.len() {
            correlations.push((
                bits[i],
                bits[j],
                normalized_cross_correlation(&diffs[i], &diffs[j]),
            ));
        }
    }
    let report = BitFlipReport {
        bits: bits.to_vec(),
        correlations,
        images,
    };
    let stats = outdir.join("bit_flip_stats.json");
    std::fs::write(
        &stats,
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )
    .map_err(|e| Error::io(&stats, e))?;
    Ok(report)
}

/// Accuracy thresholds whose first-crossing epochs the convergence report
/// tabulates (on the training bit accuracy).
pub const CONVERGENCE_THRESHOLDS: [f64; 3] = [0.8, 0.9, 0.95];

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub epochs: usize,
    pub final_train_loss: f64,
    pub final_val_mjpeg_acc: f64,
    /// First epoch at which the training bit accuracy crossed each threshold.
    pub crossings: Vec<(f64, Option<usize>)>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub runs: Vec<RunSummary>,
    pub loss_plot: PathBuf,
    pub accuracy_plot: PathBuf,
}

/// Parse a line-delimited training log.
pub fn load_train_log(path: &Path) -> Result<Vec<crate::train::TrainLogRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line)
            .map_err(|e| Error::data(path, format!("log line {}: {e}", i + 1)))?;
        records.push(rec);
    }
    if records.is_empty() {
        return Err(Error::data(path, "training log is empty"));
    }
    Ok(records)
}

/// Render training-loss and validation-accuracy curves against wall-clock
/// time for a set of runs, and tabulate the epochs at which each run first
/// crosses the fixed accuracy thresholds.
pub fn convergence_report(
    logs: &[(String, PathBuf)],
    outdir: &Path,
) -> Result<ConvergenceReport> {
    use plotters::prelude::*;
    if logs.is_empty() {
        return Err(Error::config("convergence report needs at least one log"));
    }
    std::fs::create_dir_all(outdir).map_err(|e| Error::io(outdir, e))?;
    let mut series = Vec::new();
    for (name, path) in logs {
        series.push((name.clone(), load_train_log(path)?));
    }

    let palette = [
        RGBColor(31, 119, 180),
        RGBColor(214, 39, 40),
        RGBColor(44, 160, 44),
        RGBColor(255, 127, 14),
        RGBColor(148, 103, 189),
        RGBColor(140, 86, 75),
    ];
    let loss_plot = outdir.join("train_loss_vs_wall_clock.svg");
    let accuracy_plot = outdir.join("val_mjpeg_acc_vs_wall_clock.svg");

    let max_t = series
        .iter()
        .flat_map(|(_, r)| r.iter().map(|x| x.wall_clock_s))
        .fold(1.0f64, f64::max);
    let max_loss = series
        .iter()
        .flat_map(|(_, r)| r.iter().map(|x| x.loss_data + x.loss_codec))
        .fold(0.1f64, f64::max);

    {
        let root = SVGBackend::new(&loss_plot, (800, 500)).into_drawing_area();
        root.fill(&WHITE)
            .map_err(|e| Error::data(&loss_plot, e.to_string()))?;
        let mut chart = ChartBuilder::on(&root)
            .margin(10)
            .caption("training loss", ("sans-serif", 22))
            .x_label_area_size(40)
            .y_label_area_size(50)
            .build_cartesian_2d(0.0..max_t * 1.05, 0.0..max_loss * 1.05)
            .map_err(|e| Error::data(&loss_plot, e.to_string()))?;
        chart
            .configure_mesh()
            .x_desc("wall clock (s)")
            .y_desc("data + codec loss")
            .draw()
            .map_err(|e| Error::data(&loss_plot, e.to_string()))?;
        for (i, (name, recs)) in series.iter().enumerate() {
            let color = palette[i % palette.len()];
            chart
                .draw_series(LineSeries::new(
                    recs.iter()
                        .map(|r| (r.wall_clock_s, r.loss_data + r.loss_codec)),
                    color.stroke_width(2),
                ))
                .map_err(|e| Error::data(&loss_plot, e.to_string()))?
                .label(name.clone())
                .legend(move |(x, y)| {
                    PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2))
                });
        }
        chart
            .configure_series_labels()
            .border_style(BLACK)
            .background_style(WHITE.mix(0.8))
            .draw()
            .map_err(|e| Error::data(&loss_plot, e.to_string()))?;
        root.present()
            .map_err(|e| Error::data(&loss_plot, e.to_string()))?;
    }
    {
        let root = SVGBackend::new(&accuracy_plot, (800, 500)).into_drawing_area();
        root.fill(&WHITE)
            .map_err(|e| Error::data(&accuracy_plot, e.to_string()))?;
        let mut chart = ChartBuilder::on(&root)
            .margin(10)
            .caption("validation accuracy after the codec round-trip", ("sans-serif", 22))
            .x_label_area_size(40)
            .y_label_area_size(50)
            .build_cartesian_2d(0.0..max_t * 1.05, 0.0..1.0)
            .map_err(|e| Error::data(&accuracy_plot, e.to_string()))?;
        chart
            .configure_mesh()
            .x_desc("wall clock (s)")
            .y_desc("bit accuracy")
            .draw()
            .map_err(|e| Error::data(&accuracy_plot, e.to_string()))?;
        for (i, (name, recs)) in series.iter().enumerate() {
            let color = palette[i % palette.len()];
            chart
                .draw_series(LineSeries::new(
                    recs.iter().map(|r| (r.wall_clock_s, r.val_mjpeg_acc)),
                    color.stroke_width(2),
                ))
                .map_err(|e| Error::data(&accuracy_plot, e.to_string()))?
                .label(name.clone())
                .legend(move |(x, y)| {
                    PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2))
                });
        }
        chart
            .configure_series_labels()
            .border_style(BLACK)
            .background_style(WHITE.mix(0.8))
            .draw()
            .map_err(|e| Error::data(&accuracy_plot, e.to_string()))?;
        root.present()
            .map_err(|e| Error::data(&accuracy_plot, e.to_string()))?;
    }

    let runs = series
        .iter()
        .map(|(name, recs)| {
            let crossings = CONVERGENCE_THRESHOLDS
                .iter()
                .map(|&th| {
                    let epoch = recs
                        .iter()
                        .find(|r| r.train_bit_acc >= th)
                        .map(|r| r.epoch);
                    (th, epoch)
                })
                .collect();
            RunSummary {
                name: name.clone(),
                epochs: recs.len(),
                final_train_loss: recs
                    .last()
                    .map(|r| r.loss_data + r.loss_codec)
                    .unwrap_or(f64::NAN),
                final_val_mjpeg_acc: recs.last().map(|r| r.val_mjpeg_acc).unwrap_or(f64::NAN),
                crossings,
            }
        })
        .collect();
    let report = ConvergenceReport {
        runs,
        loss_plot,
        accuracy_plot,
    };
    let json = outdir.join("convergence.json");
    std::fs::write(
        &json,
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )
    .map_err(|e| Error::io(&json, e))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Fusion;
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn clip_from(vals: ArrayD<f64>) -> VideoClip<f64> {
        VideoClip::new(vals).unwrap()
    }

    fn random_clip(seed: u64, t: usize, w: usize, h: usize) -> VideoClip<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        clip_from(
            ArrayD::from_shape_vec(
                IxDyn(&[t, w, h, 3]),
                (0..t * w * h * 3)
                    .map(|_| rng.random_range(-0.95..0.95))
                    .collect(),
            )
            .unwrap(),
        )
    }

    #[test]
    fn bit_accuracy_basics() {
        let m = BitMessage::with_width(vec![1, 0, 1, 1]).unwrap();
        let perfect = MessageLogits::new(vec![5.0, -5.0, 5.0, 5.0]).unwrap();
        assert_eq!(bit_accuracy(&m, &perfect), 1.0);
        // all-zero logits predict all zeros: accuracy = fraction of zero bits
        let zeros = MessageLogits::new(vec![0.0; 4]).unwrap();
        assert_eq!(bit_accuracy(&m, &zeros), 0.25);
    }

    #[test]
    fn random_logits_hit_half_accuracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut total = 0.0;
        let trials = 10_000;
        for _ in 0..trials {
            let m = BitMessage::random(32, &mut rng);
            let logits = MessageLogits::new(
                (0..32)
                    .map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 })
                    .collect(),
            )
            .unwrap();
            total += bit_accuracy(&m, &logits);
        }
        let mean = total / trials as f64;
        assert!((mean - 0.5).abs() < 0.02, "mean accuracy {mean}");
    }

    #[test]
    fn psnr_identical_and_uniform_error() {
        let a = random_clip(1, 1, 16, 16);
        assert_eq!(psnr(&a, &a), PsnrValue::identical());

        // uniform error 0.02: 10 log10(4 / 4e-4) = 40 dB
        let b = clip_from(a.data().mapv(|v| (v + 0.02).min(1.0)));
        let all_in_range = a.data().iter().all(|&v| v + 0.02 <= 1.0);
        assert!(all_in_range, "test construction keeps values in range");
        let p = psnr(&a, &b).db().unwrap();
        assert!((p - 40.0).abs() < 1e-9, "{p}");

        // offset 0.01 -> 10 log10(4 / 1e-4) = 46.0206
        let c = clip_from(a.data().mapv(|v| v + 0.01));
        let p = psnr(&a, &c).db().unwrap();
        assert!((p - 10.0 * (4.0f64 / 1e-4).log10()).abs() < 1e-9);
        assert!((p - 46.02).abs() < 0.01);
    }

    #[test]
    fn psnr_matches_direct_formula_oracle() {
        let a = random_clip(2, 1, 16, 16);
        let b = random_clip(3, 1, 16, 16);
        let p = psnr(&a, &b).db().unwrap();
        // brute force
        let n = a.data().len() as f64;
        let mse: f64 = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        let oracle = 10.0 * (2.0f64 * 2.0 / mse).log10();
        assert!((p - oracle).abs() < 1e-9);
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let a = random_clip(4, 2, 16, 16);
        let b = random_clip(5, 2, 16, 16);
        assert!((ssim(&a, &a) - 1.0).abs() < 1e-12);
        assert!((ssim(&a, &b) - ssim(&b, &a)).abs() < 1e-12);
    }

    #[test]
    fn ssim_constant_offset_matches_luminance_term() {
        // constant clips: variances vanish, SSIM reduces to the luminance
        // term (2 mx my + C1) / (mx^2 + my^2 + C1)
        let a = clip_from(ArrayD::from_elem(IxDyn(&[1, 16, 16, 3]), 0.1));
        let b = clip_from(ArrayD::from_elem(IxDyn(&[1, 16, 16, 3]), 0.6));
        let got = ssim(&a, &b);
        let (mx, my) = (0.1, 0.6); // luminance of a gray pixel equals its value
        let c1 = (0.01f64 * 2.0).powi(2);
        let expect = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
    }

    #[test]
    fn ssim_matches_brute_force_oracle() {
        let a = random_clip(6, 1, 16, 16);
        let b = {
            // correlated perturbation keeps SSIM in an interesting range
            let d = a.data().mapv(|v| (v * 0.9 + 0.02).clamp(-1.0, 1.0));
            clip_from(d)
        };
        let fast = ssim(&a, &b);
        let brute = ssim_brute_force(&a, &b);
        assert!((fast - brute).abs() < 1e-6, "{fast} vs {brute}");
    }

    /// Direct double-loop implementation used as the oracle.
    fn ssim_brute_force(a: &VideoClip<f64>, b: &VideoClip<f64>) -> f64 {
        let (t, w, h) = a.dims();
        let kernel = gaussian_kernel();
        let c1 = (SSIM_K1 * SSIM_RANGE).powi(2);
        let c2 = (SSIM_K2 * SSIM_RANGE).powi(2);
        let mut total = 0.0;
        for ti in 0..t {
            let (la, ..) = luminance(a, ti);
            let (lb, ..) = luminance(b, ti);
            let mut sum = 0.0;
            let mut count = 0;
            for x0 in 0..=(w - SSIM_WINDOW) {
                for y0 in 0..=(h - SSIM_WINDOW) {
                    let mut mx = 0.0;
                    let mut my = 0.0;
                    for i in 0..SSIM_WINDOW {
                        for j in 0..SSIM_WINDOW {
                            let wgt = kernel[i] * kernel[j];
                            mx += wgt * la[(x0 + i) * h + y0 + j];
                            my += wgt * lb[(x0 + i) * h + y0 + j];
                        }
                    }
                    let mut vx = 0.0;
                    let mut vy = 0.0;
                    let mut cov = 0.0;
                    for i in 0..SSIM_WINDOW {
                        for j in 0..SSIM_WINDOW {
                            let wgt = kernel[i] * kernel[j];
                            let da = la[(x0 + i) * h + y0 + j];
                            let db = lb[(x0 + i) * h + y0 + j];
                            vx += wgt * da * da;
                            vy += wgt * db * db;
                            cov += wgt * da * db;
                        }
                    }
                    vx -= mx * mx;
                    vy -= my * my;
                    cov -= mx * my;
                    sum += (2.0 * mx * my + c1) * (2.0 * cov + c2)
                        / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    count += 1;
                }
            }
            total += sum / count as f64;
        }
        total / t as f64
    }

    #[test]
    fn ncc_detects_identical_and_opposite() {
        let a = vec![0.1, 0.5, 0.9, 0.2];
        assert!((normalized_cross_correlation(&a, &a) - 1.0).abs() < 1e-12);
        let b: Vec<f64> = a.iter().map(|v| 1.0 - v).collect();
        assert!((normalized_cross_correlation(&a, &b) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn evaluate_model_is_deterministic_and_complete() {
        let manifest = crate::media::synth_corpus(3, 5, 2, 24, 24).unwrap();
        let mut model = ModelState::<f32>::new(32, Fusion::Attention, 7);
        let cfg = EvalConfig::default();
        let a = evaluate_model(&mut model, &manifest, Split::Train, &cfg).unwrap();
        let b = evaluate_model(&mut model, &manifest, Split::Train, &cfg).unwrap();
        assert_eq!(a.to_json(), b.to_json(), "equal seeds must agree byte for byte");
        assert_eq!(a.per_clip.len(), 3);
        for c in &a.per_clip {
            for acc in [c.identity, c.mjpeg, c.cropped, c.scaled] {
                assert!((0.0..=1.0).contains(&acc));
            }
        }
    }

    #[test]
    fn evaluate_model_rejects_empty_split() {
        let mut manifest = crate::media::synth_corpus(3, 5, 2, 24, 24).unwrap();
        manifest.entries.retain(|e| e.split != Split::Test);
        let mut model = ModelState::<f32>::new(32, Fusion::Attention, 8);
        let r = evaluate_model(&mut model, &manifest, Split::Test, &EvalConfig::default());
        assert!(r.is_err());
    }

    #[test]
    fn residual_images_written_one_pair_per_frame() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = ModelState::<f32>::new(32, Fusion::Attention, 9);
        let clip = random_clip(10, 3, 16, 16).cast::<f32>();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let msg = BitMessage::random(32, &mut rng);
        let paths = residual_images(&mut model, &clip, &msg, dir.path()).unwrap();
        assert_eq!(paths.len(), 6);
        for p in &paths {
            assert!(p.exists());
        }
    }

    #[test]
    fn zeroed_encoder_gives_black_residual_images() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = ModelState::<f64>::new(32, Fusion::Attention, 12);
        model.encoder.b2.weight.fill(0.0);
        model.encoder.b2.bias.fill(0.0);
        let clip = random_clip(13, 1, 16, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let msg = BitMessage::random(32, &mut rng);
        let paths = residual_images(&mut model, &clip, &msg, dir.path()).unwrap();
        let residual = paths.iter().find(|p| {
            p.file_name().unwrap().to_str().unwrap().contains("residual")
        }).unwrap();
        let (rgb, _, _) = crate::media::read_png_rgb8(residual).unwrap();
        assert!(rgb.iter().all(|&v| v == 0), "residual must be uniformly black");
    }

    #[test]
    fn convergence_report_rejects_empty_and_summarizes_runs() {
        assert!(convergence_report(&[], std::path::Path::new("/tmp")).is_err());

        let dir = tempfile::tempdir().unwrap();
        // two synthetic logs with known crossing epochs
        let mut paths = Vec::new();
        for (name, accs) in [("fast", vec![0.5, 0.85, 0.95]), ("slow", vec![0.4, 0.6, 0.82])] {
            let p = dir.path().join(format!("{name}.jsonl"));
            let mut text = String::new();
            for (i, &acc) in accs.iter().enumerate() {
                let rec = crate::train::TrainLogRecord {
                    epoch: i + 1,
                    wall_clock_s: (i + 1) as f64,
                    loss_data: 0.7 - 0.1 * i as f64,
                    loss_codec: 0.7,
                    loss_realism: 0.0,
                    loss_tamper: 0.0,
                    loss_critic: 0.0,
                    loss_removal: 0.0,
                    train_bit_acc: acc,
                    val_identity_acc: acc,
                    val_mjpeg_acc: acc,
                    val_cropped_acc: acc,
                    val_scaled_acc: acc,
                    lr: 1e-3,
                };
                text.push_str(&serde_json::to_string(&rec).unwrap());
                text.push('\n');
            }
            std::fs::write(&p, text).unwrap();
            paths.push((name.to_string(), p));
        }
        let report = convergence_report(&paths, dir.path()).unwrap();
        assert_eq!(report.runs.len(), 2);
        assert!(report.loss_plot.exists());
        assert!(report.accuracy_plot.exists());
        let fast = &report.runs[0];
        assert_eq!(fast.crossings[0], (0.8, Some(2)));
        assert_eq!(fast.crossings[1], (0.9, Some(3)));
        let slow = &report.runs[1];
        assert_eq!(slow.crossings[1], (0.9, None));
    }

    #[test]
    fn bit_flip_masks_are_symmetric_in_the_flip() {
        let mut model = ModelState::<f64>::new(32, Fusion::Attention, 15);
        let clip = random_clip(16, 1, 16, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let msg = BitMessage::random(32, &mut rng);
        let flipped = msg.flip_bit(3);
        let a = model.encode(&clip, &msg);
        let b = model.encode(&clip, &flipped);
        // |encode(m) - encode(m^e3)| is the same regardless of direction
        let d1: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(x, y)| (x - y).abs()).collect();
        let d2: Vec<f64> = b.data().iter().zip(a.data().iter()).map(|(x, y)| (x - y).abs()).collect();
        assert_eq!(d1, d2);
        // flipping no bit gives an all-zero mask
        let same = model.encode(&clip, &msg);
        assert!(a
            .data()
            .iter()
            .zip(same.data().iter())
            .all(|(x, y)| x == y));
    }
}
