//! One full-geometry training step, timed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use videomark::media::{load_entry, synth_corpus};
use videomark::model::{Fusion, ModelState};
use videomark::noise::NoiseDraw;
use videomark::train::*;
use videomark::video::VideoClip;

fn main() {
    videomark::tune_allocator();
    let manifest = synth_corpus(1, 20, 8, 64, 64).unwrap();
    let clips: Vec<VideoClip<f32>> = manifest.entries[..6]
        .iter()
        .map(|e| load_entry(e).unwrap())
        .collect();
    let cfg = TrainConfig::desk();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let batch = build_batch(&clips, &mut rng, 32, true);
    println!("batch {} samples", batch.bit_messages.len());
    let mut model = ModelState::<f32>::new(32, Fusion::Attention, 3);
    let mut opts = Optimizers::new();
    for step in 0..3 {
        let draw = NoiseDraw::sample(&cfg.noise, (64, 64), &mut rng);
        let t0 = std::time::Instant::now();
        let out = train_step(&mut model, &mut opts, &batch, &draw, &cfg, 1e-2).unwrap();
        println!(
            "step {step}: {:.2}s  data={:.4} codec={:.4} acc={:.3}",
            t0.elapsed().as_secs_f64(),
            out.losses.data,
            out.losses.codec,
            out.train_bit_acc
        );
    }
    // peak memory
    if let Ok(s) = std::fs::read_to_string("/proc/self/status") {
        for line in s.lines() {
            if line.starts_with("VmHWM") || line.starts_with("VmRSS") {
                println!("{line}");
            }
        }
    }
}
