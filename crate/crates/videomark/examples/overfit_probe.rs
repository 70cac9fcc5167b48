use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use videomark::media::{load_entry, synth_corpus};
use videomark::model::{Fusion, ModelState};
use videomark::noise::{LayerSet, NoiseConfig, NoiseDraw};
use videomark::objectives::LossWeights;
use videomark::train::*;
use videomark::video::{stack_clips, BitMessage, VideoClip};

fn main() {
    let manifest = synth_corpus(110, 3, 2, 16, 16).unwrap();
    let clip: VideoClip<f32> = load_entry(&manifest.entries[0]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let message = BitMessage::random(8, &mut rng);
    let flat: Vec<f32> = message.bits().iter().map(|&b| b as f32).collect();
    let batch = TrainBatch {
        videos: stack_clips(&[clip]),
        messages: ArrayD::from_shape_vec(IxDyn(&[1, 8]), flat).unwrap(),
        bit_messages: vec![message],
    };
    let cfg = TrainConfig {
        batch_size: 2, message_width: 8, epochs: 1,
        train_t: 2, train_w: 16, train_h: 16,
        noise: NoiseConfig { layers: LayerSet::none(), ..NoiseConfig::default() },
        weights: LossWeights { data: 1.0, codec: 0.0, realism: 0.0, tamper: 0.0 },
        ..TrainConfig::default()
    };
    let ocfg = cfg.objective_cfg();
    for lr in [1e-3, 3e-3, 1e-2, 3e-2, 5e-2] {
        let mut model = ModelState::<f32>::new(8, Fusion::Attention, 203);
        let mut opts = Optimizers::new();
        let t0 = std::time::Instant::now();
        let mut last = 0.0;
        let mut curve = Vec::new();
        for step in 0..200 {
            let out = generator_phase(&mut model, &mut opts.generator, &batch, &NoiseDraw::identity(), &ocfg, lr).unwrap();
            last = out.losses.data;
            if step % 40 == 0 { curve.push(last); }
        }
        println!("lr={lr:8.0e}  final={last:.4}  curve={curve:.3?}  ({:.1}s)", t0.elapsed().as_secs_f64());
    }
}
