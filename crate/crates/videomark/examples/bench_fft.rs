//! FFT conv pass timings at the training geometry.

use std::time::Instant;
use videomark::autodiff::kernels::ConvDims;
use videomark::autodiff::kernels_fft::*;

fn main() {
    for (cin, cout, label) in [(32usize, 32usize, "32->32"), (3, 32, "3->32")] {
        let d = ConvDims { frames: 96, w: 64, h: 64, cin, cout, k: 11 };
        let x: Vec<f32> = (0..d.frames * d.w * d.h * d.cin).map(|i| (i as f32 * 0.001).sin()).collect();
        let w: Vec<f32> = (0..d.cout * 121 * d.cin).map(|i| (i as f32 * 0.01).cos() * 0.01).collect();
        let b = vec![0.0f32; d.cout];
        let go: Vec<f32> = (0..d.frames * d.w * d.h * d.cout).map(|i| (i as f32 * 0.002).cos()).collect();
        let mut out = vec![0.0f32; go.len()];
        let t0 = Instant::now();
        conv2d_forward_fft(&x, &w, &b, &d, &mut out);
        println!("{label} forward: {:.3}s", t0.elapsed().as_secs_f64());
        let mut gx = vec![0.0f32; x.len()];
        let t0 = Instant::now();
        conv2d_backward_input_fft(&go, &w, &d, &mut gx);
        println!("{label} bwd input: {:.3}s", t0.elapsed().as_secs_f64());
        let mut gw = vec![0.0f32; w.len()];
        let mut gb = vec![0.0f32; d.cout];
        let t0 = Instant::now();
        conv2d_backward_params_fft(&x, &go, &d, &mut gw, &mut gb);
        println!("{label} bwd params: {:.3}s", t0.elapsed().as_secs_f64());
        println!("checksum {}", out.iter().sum::<f32>() + gx.iter().sum::<f32>() + gw.iter().sum::<f32>());
    }
}
