//! Rough throughput check for the convolution kernels.

use std::time::Instant;

use videomark::autodiff::kernels::{self, ConvDims};

fn main() {
    let d = ConvDims {
        frames: 8,
        w: 64,
        h: 64,
        cin: 32,
        cout: 32,
        k: 11,
    };
    let n_in = d.frames * d.w * d.h * d.cin;
    let n_out = d.frames * d.w * d.h * d.cout;
    let x: Vec<f32> = (0..n_in).map(|i| (i as f32 * 0.001).sin()).collect();
    let w: Vec<f32> = (0..d.cout * d.k * d.k * d.cin)
        .map(|i| (i as f32 * 0.01).cos() * 0.01)
        .collect();
    let b = vec![0.0f32; d.cout];
    let mut out = vec![0.0f32; n_out];

    let macs = (d.frames * d.w * d.h * d.k * d.k * d.cin * d.cout) as f64;

    // forward
    let reps = 3;
    let t0 = Instant::now();
    for _ in 0..reps {
        kernels::conv2d_forward(&x, &w, &b, &d, &mut out);
    }
    let dt = t0.elapsed().as_secs_f64() / reps as f64;
    println!(
        "forward: {:.3}s  {:.2} GFLOP/s",
        dt,
        2.0 * macs / dt / 1e9
    );

    // backward input
    let mut gx = vec![0.0f32; n_in];
    let t0 = Instant::now();
    for _ in 0..reps {
        kernels::conv2d_backward_input(&out, &w, &d, &mut gx);
    }
    let dt = t0.elapsed().as_secs_f64() / reps as f64;
    println!(
        "backward input: {:.3}s  {:.2} GFLOP/s",
        dt,
        2.0 * macs / dt / 1e9
    );

    // backward params
    let mut gw = vec![0.0f32; w.len()];
    let mut gb = vec![0.0f32; d.cout];
    let t0 = Instant::now();
    for _ in 0..reps {
        kernels::conv2d_backward_params(&x, &out, &d, &mut gw, &mut gb);
    }
    let dt = t0.elapsed().as_secs_f64() / reps as f64;
    println!(
        "backward params: {:.3}s  {:.2} GFLOP/s",
        dt,
        2.0 * macs / dt / 1e9
    );
    println!("checksum {}", out.iter().sum::<f32>() + gx.iter().sum::<f32>() + gw.iter().sum::<f32>());
}
