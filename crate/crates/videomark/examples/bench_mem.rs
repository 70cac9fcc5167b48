use std::time::Instant;
fn main() {
    let n = 64 * 1024 * 1024; // 256 MB of f32
    let src = vec![1.0f32; n];
    let mut dst = vec![0.0f32; n];
    for _ in 0..2 {
        let t0 = Instant::now();
        dst.copy_from_slice(&src);
        let dt = t0.elapsed().as_secs_f64();
        println!("memcpy 256MB: {:.3}s = {:.1} GB/s (r+w)", dt, 2.0 * 256.0 / 1024.0 / dt);
    }
    let t0 = Instant::now();
    let mut acc = 0.0f32;
    for &v in &src { acc += v; }
    let dt = t0.elapsed().as_secs_f64();
    println!("read 256MB: {:.3}s = {:.1} GB/s  ({acc})", dt, 256.0 / 1024.0 / dt);
    // strided write (transpose-like)
    let t0 = Instant::now();
    let stride = 6144;
    let rows = n / stride;
    for c in 0..stride.min(1024) {
        for r in 0..rows {
            dst[r * stride + c] = src[c * rows + r];
        }
    }
    println!("strided transpose 1024 cols: {:.3}s", t0.elapsed().as_secs_f64());
}
