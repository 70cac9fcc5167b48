//! Video ingestion, serialization and the deterministic synthetic corpus.

pub mod avi;

use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{dct3_apply, kernels, Scalar};
use crate::error::{Error, Result};
use crate::noise::mjpeg::{
    decode_jpeg_frame, dequantize_u8, encode_jpeg_frame, frame_to_rgb8, ChromaMode,
};
use crate::video::VideoClip;

/// Dataset split membership.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Synthesis recipe families. Each gives the attention module a different
/// kind of structure to bind bits to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecipeKind {
    /// Moving linear color gradients.
    Gradient,
    /// A translating, smoothly textured rectangle over a gradient background.
    Rectangle,
    /// Band-limited smooth noise fields.
    NoiseField,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthRecipe {
    pub kind: RecipeKind,
    pub seed: u64,
}

/// Where the pixels of a corpus entry come from.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipSource {
    Recipe(SynthRecipe),
    Path(PathBuf),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub id: String,
    pub source: ClipSource,
    pub t: usize,
    pub w: usize,
    pub h: usize,
    pub split: Split,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub entries: Vec<CorpusEntry>,
}

impl CorpusManifest {
    pub fn split_entries(&self, split: Split) -> Vec<&CorpusEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = std::collections::HashSet::new();
        for e in &self.entries {
            if !ids.insert(&e.id) {
                return Err(Error::config(format!("duplicate corpus id {}", e.id)));
            }
            if e.t == 0 || e.w == 0 || e.h == 0 {
                return Err(Error::config(format!("corpus entry {} has empty dims", e.id)));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::config(format!("manifest serialization: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: CorpusManifest = serde_json::from_str(&text)
            .map_err(|e| Error::data(path, format!("manifest parse error: {e}")))?;
        manifest.validate()?;
        Ok(manifest)
    }
}

/// Deterministically generate a desk-scale corpus manifest with a 70/15/15
/// train/val/test split. Clips mix the three recipe families.
pub fn synth_corpus(seed: u64, n_clips: usize, t: usize, w: usize, h: usize) -> Result<CorpusManifest> {
    if n_clips < 3 {
        return Err(Error::config("corpus needs at least 3 clips for the splits"));
    }
    // 70/15/15 split, with every split nonempty at desk scale
    let n_val = ((n_clips as f64 * 0.15).floor() as usize).max(1);
    let n_train = n_clips - 2 * n_val;
    let kinds = [RecipeKind::Gradient, RecipeKind::Rectangle, RecipeKind::NoiseField];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = (0..n_clips)
        .map(|i| {
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            CorpusEntry {
                id: format!("clip{i:04}"),
                source: ClipSource::Recipe(SynthRecipe {
                    kind: kinds[i % kinds.len()],
                    seed: rng.random::<u64>(),
                }),
                t,
                w,
                h,
                split,
            }
        })
        .collect();
    Ok(CorpusManifest { seed, entries })
}

/// Materialize a corpus entry as pixels.
pub fn load_entry<S: Scalar>(entry: &CorpusEntry) -> Result<VideoClip<S>> {
    match &entry.source {
        ClipSource::Recipe(recipe) => Ok(synth_clip(recipe, entry.t, entry.w, entry.h)),
        ClipSource::Path(path) => load_clip(path, entry.t, entry.w, entry.h),
    }
}

/// Generate one synthetic clip; same recipe, same pixels.
pub fn synth_clip<S: Scalar>(recipe: &SynthRecipe, t: usize, w: usize, h: usize) -> VideoClip<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    let data = match recipe.kind {
        RecipeKind::Gradient => gradient_clip(&mut rng, t, w, h),
        RecipeKind::Rectangle => rectangle_clip(&mut rng, t, w, h),
        RecipeKind::NoiseField => noise_field_clip(&mut rng, t, w, h),
    };
    VideoClip::from_unclamped(data.mapv(S::from_f)).expect("synthetic clips are in range")
}

fn gradient_clip(rng: &mut ChaCha8Rng, t: usize, w: usize, h: usize) -> ArrayD<f64> {
    let base: [f64; 3] = [
        rng.random_range(-0.4..0.4),
        rng.random_range(-0.4..0.4),
        rng.random_range(-0.4..0.4),
    ];
    let gw: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.8..0.8));
    let gh: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.8..0.8));
    let (vx, vy) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
    let mut out = ArrayD::zeros(IxDyn(&[t, w, h, 3]));
    {
        let os = out.as_slice_mut().unwrap();
        for ti in 0..t {
            for x in 0..w {
                for y in 0..h {
                    let fx = (x as f64 + vx * ti as f64) / w as f64 - 0.5;
                    let fy = (y as f64 + vy * ti as f64) / h as f64 - 0.5;
                    for c in 0..3 {
                        let v = base[c] + gw[c] * fx + gh[c] * fy;
                        os[((ti * w + x) * h + y) * 3 + c] = v.clamp(-0.9, 0.9);
                    }
                }
            }
        }
    }
    out
}

fn rectangle_clip(rng: &mut ChaCha8Rng, t: usize, w: usize, h: usize) -> ArrayD<f64> {
    let bg_top: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.8..0.2));
    let bg_bot: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.2..0.8));
    let rect_color: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.7..0.7));
    let rw = rng.random_range(w as f64 * 0.25..w as f64 * 0.5);
    let rh = rng.random_range(h as f64 * 0.25..h as f64 * 0.5);
    let (mut cx, mut cy) = (
        rng.random_range(rw / 2.0..w as f64 - rw / 2.0),
        rng.random_range(rh / 2.0..h as f64 - rh / 2.0),
    );
    let (vx, vy) = (rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5));
    let tex_fx = rng.random_range(0.15..0.5);
    let tex_fy = rng.random_range(0.15..0.5);
    let feather = 3.0;
    let mut out = ArrayD::zeros(IxDyn(&[t, w, h, 3]));
    {
        let os = out.as_slice_mut().unwrap();
        for ti in 0..t {
            for x in 0..w {
                for y in 0..h {
                    let fy01 = y as f64 / h.max(1) as f64;
                    // soft-edged rectangle mask
                    let dx = (x as f64 - cx).abs() - rw / 2.0;
                    let dy = (y as f64 - cy).abs() - rh / 2.0;
                    let d = dx.max(dy);
                    let alpha = (0.5 - d / feather).clamp(0.0, 1.0);
                    let tex = 0.25
                        * ((x as f64 * tex_fx).sin() * (y as f64 * tex_fy).cos());
                    for c in 0..3 {
                        let bg = bg_top[c] + (bg_bot[c] - bg_top[c]) * fy01;
                        let fg = rect_color[c] + tex;
                        let v = bg * (1.0 - alpha) + fg * alpha;
                        os[((ti * w + x) * h + y) * 3 + c] = v.clamp(-0.9, 0.9);
                    }
                }
            }
            cx = (cx + vx).rem_euclid(w as f64);
            cy = (cy + vy).rem_euclid(h as f64);
        }
    }
    out
}

fn noise_field_clip(rng: &mut ChaCha8Rng, t: usize, w: usize, h: usize) -> ArrayD<f64> {
    // Random low-frequency DCT coefficients, inverted to a smooth field.
    let mut coeffs = ArrayD::zeros(IxDyn(&[1, t, w, h, 3]));
    {
        let cs = coeffs.as_slice_mut().unwrap();
        let ku = t.min(3);
        let kv = w.min(7);
        let kq = h.min(7);
        for u in 0..ku {
            for v in 0..kv {
                for q in 0..kq {
                    for c in 0..3 {
                        cs[(((u * w) + v) * h + q) * 3 + c] = rng.random_range(-1.0..1.0);
                    }
                }
            }
        }
    }
    let field: ArrayD<f64> = dct3_apply(&coeffs, true);
    // normalize each channel to a bounded amplitude
    let mut max_abs = 1e-9f64;
    for &v in field.iter() {
        max_abs = max_abs.max(v.abs());
    }
    let scale = 0.85 / max_abs;
    let scaled = field.mapv(|v| v * scale);
    scaled
        .into_shape_with_order(IxDyn(&[t, w, h, 3]))
        .unwrap()
}

/// Supported output formats for [`save_clip`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SaveFormat {
    /// MJPEG-in-AVI at the given quality (4:4:4 chroma unless subsampled).
    MjpegAvi { quality: u8, chroma: ChromaMode },
    /// One PNG per frame in a directory; lossless after 8-bit quantization.
    PngFrames,
}

/// Write a clip to disk.
pub fn save_clip<S: Scalar>(clip: &VideoClip<S>, path: &Path, format: SaveFormat) -> Result<()> {
    let (t, w, h) = clip.dims();
    match format {
        SaveFormat::MjpegAvi { quality, chroma } => {
            let mut frames = Vec::with_capacity(t);
            for ti in 0..t {
                let (rgb, fw, fh) = frame_to_rgb8(clip.data(), ti);
                frames.push(encode_jpeg_frame(&rgb, fw, fh, quality, chroma, ti)?);
            }
            write_mjpeg_parent_dir(path)?;
            avi::write_mjpeg_avi(path, &frames, w, h)
        }
        SaveFormat::PngFrames => {
            std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
            for ti in 0..t {
                let (rgb, fw, fh) = frame_to_rgb8(clip.data(), ti);
                let fp = path.join(format!("frame_{ti:04}.png"));
                write_png_rgb8(&fp, &rgb, fw, fh)?;
            }
            Ok(())
        }
    }
}

fn write_mjpeg_parent_dir(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    Ok(())
}

pub fn write_png_rgb8(path: &Path, rgb: &[u8], w: usize, h: usize) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::data(path, format!("png header: {e}")))?;
    writer
        .write_image_data(rgb)
        .map_err(|e| Error::data(path, format!("png write: {e}")))
}

pub fn read_png_rgb8(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::data(path, format!("png header: {e}")))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::data(path, format!("png decode: {e}")))?;
    let (w, h) = (info.width as usize, info.height as usize);
    buf.truncate(info.buffer_size());
    let rgb = match info.color_type {
        png::ColorType::Rgb => buf,
        png::ColorType::Rgba => buf
            .chunks_exact(4)
            .flat_map(|p| [p[0], p[1], p[2]])
            .collect(),
        png::ColorType::Grayscale => buf.iter().flat_map(|&g| [g, g, g]).collect(),
        other => {
            return Err(Error::data(path, format!("unsupported png color type {other:?}")));
        }
    };
    Ok((rgb, w, h))
}

/// Load a video from disk: an AVI file or a directory of PNG frames. Takes
/// the first `t` frames, center-crops to the target aspect ratio, resizes to
/// `(w, h)` and maps pixels to [-1, 1] via `v = k / 127.5 - 1`.
pub fn load_clip<S: Scalar>(path: &Path, t: usize, w: usize, h: usize) -> Result<VideoClip<S>> {
    let frames = decode_frames(path)?;
    if frames.len() < t {
        return Err(Error::data(
            path,
            format!("needs at least {t} frames; found {}", frames.len()),
        ));
    }
    let mut out = ArrayD::zeros(IxDyn(&[t, w, h, 3]));
    for (ti, (rgb, fw, fh)) in frames.into_iter().take(t).enumerate() {
        let fitted = fit_frame(&rgb, fw, fh, w, h);
        let os = out.as_slice_mut().unwrap();
        for x in 0..w {
            for y in 0..h {
                for c in 0..3 {
                    os[((ti * w + x) * h + y) * 3 + c] =
                        S::from_f(fitted[(y * w + x) * 3 + c].clamp(-1.0, 1.0));
                }
            }
        }
    }
    VideoClip::new(out)
}

fn decode_frames(path: &Path) -> Result<Vec<(Vec<u8>, usize, usize)>> {
    if path.is_dir() {
        let mut names: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
            .collect();
        names.sort();
        if names.is_empty() {
            return Err(Error::data(path, "no png frames in directory"));
        }
        names.iter().map(|p| read_png_rgb8(p)).collect()
    } else if path.extension().map(|e| e == "avi").unwrap_or(false) {
        let payloads = avi::read_mjpeg_avi(path)?;
        payloads
            .iter()
            .enumerate()
            .map(|(i, jpeg)| decode_jpeg_frame(jpeg, i))
            .collect()
    } else {
        Err(Error::data(
            path,
            "unsupported input (expected .avi or a directory of png frames)",
        ))
    }
}

/// Center-crop to the target aspect, then bilinear-resize. Output is
/// row-major [-1, 1] floats.
fn fit_frame(rgb: &[u8], fw: usize, fh: usize, w: usize, h: usize) -> Vec<f64> {
    // crop window with the target aspect ratio
    let target_aspect = w as f64 / h as f64;
    let src_aspect = fw as f64 / fh as f64;
    let (cw, ch) = if src_aspect > target_aspect {
        (((fh as f64) * target_aspect).round() as usize, fh)
    } else {
        (fw, ((fw as f64) / target_aspect).round() as usize)
    };
    let (cw, ch) = (cw.clamp(1, fw), ch.clamp(1, fh));
    let x0 = (fw - cw) / 2;
    let y0 = (fh - ch) / 2;

    // to float, kernel layout [frames=1, w(x), h(y), c]
    let mut src = vec![0.0f64; cw * ch * 3];
    for x in 0..cw {
        for y in 0..ch {
            for c in 0..3 {
                src[(x * ch + y) * 3 + c] =
                    dequantize_u8(rgb[((y + y0) * fw + (x + x0)) * 3 + c]);
            }
        }
    }
    let mut dst = vec![0.0f64; w * h * 3];
    kernels::resize_forward(&src, 1, (cw, ch), (w, h), 3, &mut dst);
    // back to row-major
    let mut out = vec![0.0f64; w * h * 3];
    for x in 0..w {
        for y in 0..h {
            for c in 0..3 {
                out[(y * w + x) * 3 + c] = dst[(x * h + y) * 3 + c];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn corpus_split_sizes() {
        let m = synth_corpus(7, 20, 8, 64, 64).unwrap();
        assert_eq!(m.split_entries(Split::Train).len(), 14);
        assert_eq!(m.split_entries(Split::Val).len(), 3);
        assert_eq!(m.split_entries(Split::Test).len(), 3);
        m.validate().unwrap();
    }

    #[test]
    fn corpus_too_small_is_rejected() {
        assert!(synth_corpus(7, 2, 8, 64, 64).is_err());
    }

    #[test]
    fn synthetic_clips_are_deterministic_and_in_range() {
        let m = synth_corpus(42, 6, 4, 32, 32).unwrap();
        for e in &m.entries {
            let a: VideoClip<f32> = load_entry(e).unwrap();
            let b: VideoClip<f32> = load_entry(e).unwrap();
            assert_eq!(a.data(), b.data(), "entry {} not deterministic", e.id);
            assert!(a.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
            assert_eq!(a.dims(), (4, 32, 32));
        }
    }

    #[test]
    fn recipes_differ() {
        let g: VideoClip<f64> = synth_clip(
            &SynthRecipe { kind: RecipeKind::Gradient, seed: 5 },
            2, 16, 16,
        );
        let r: VideoClip<f64> = synth_clip(
            &SynthRecipe { kind: RecipeKind::Rectangle, seed: 5 },
            2, 16, 16,
        );
        assert_ne!(g.data(), r.data());
    }

    #[test]
    fn png_round_trip_is_lossless_after_quantization() {
        let dir = tempdir().unwrap();
        let clip: VideoClip<f32> = synth_clip(
            &SynthRecipe { kind: RecipeKind::NoiseField, seed: 11 },
            3, 16, 12,
        );
        let p = dir.path().join("clip");
        save_clip(&clip, &p, SaveFormat::PngFrames).unwrap();
        let back: VideoClip<f32> = load_clip(&p, 3, 16, 12).unwrap();
        for (a, b) in clip.data().iter().zip(back.data().iter()) {
            assert!((a - b).abs() <= 1.0 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn avi_round_trip_stays_close_at_high_quality() {
        let dir = tempdir().unwrap();
        let clip: VideoClip<f32> = synth_clip(
            &SynthRecipe { kind: RecipeKind::Gradient, seed: 12 },
            2, 32, 24,
        );
        let p = dir.path().join("clip.avi");
        save_clip(
            &clip,
            &p,
            SaveFormat::MjpegAvi { quality: 95, chroma: ChromaMode::Full },
        )
        .unwrap();
        let back: VideoClip<f32> = load_clip(&p, 2, 32, 24).unwrap();
        let mut max_err = 0.0f32;
        for (a, b) in clip.data().iter().zip(back.data().iter()) {
            max_err = max_err.max((a - b).abs());
        }
        assert!(max_err < 0.12, "mjpeg q95 error too large: {max_err}");
    }

    #[test]
    fn load_clip_complains_about_missing_frames() {
        let dir = tempdir().unwrap();
        let clip: VideoClip<f32> = synth_clip(
            &SynthRecipe { kind: RecipeKind::Gradient, seed: 13 },
            2, 16, 16,
        );
        let p = dir.path().join("clip");
        save_clip(&clip, &p, SaveFormat::PngFrames).unwrap();
        let res: Result<VideoClip<f32>> = load_clip(&p, 5, 16, 16);
        assert!(res.is_err());
    }

    #[test]
    fn black_and_white_map_to_range_endpoints() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("f");
        std::fs::create_dir_all(&p).unwrap();
        let mut rgb = vec![0u8; 8 * 8 * 3];
        rgb[..96].fill(0);
        rgb[96..].fill(255);
        write_png_rgb8(&p.join("frame_0000.png"), &rgb, 8, 8).unwrap();
        let clip: VideoClip<f64> = load_clip(&p, 1, 8, 8).unwrap();
        // y in 0..4 is black, y in 4..8 is white
        assert_eq!(clip.data()[[0, 0, 0, 0]], -1.0);
        assert_eq!(clip.data()[[0, 0, 7, 0]], 1.0);
    }

    #[test]
    fn manifest_json_round_trip() {
        let dir = tempdir().unwrap();
        let m = synth_corpus(3, 5, 2, 16, 16).unwrap();
        let p = dir.path().join("manifest.json");
        m.save(&p).unwrap();
        let back = CorpusManifest::load(&p).unwrap();
        assert_eq!(back.entries.len(), 5);
        assert_eq!(back.seed, 3);
    }
}
