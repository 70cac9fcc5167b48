//! FFT-domain convolution for the large-kernel layers.
//!
//! An 11x11 kernel over 64x64 frames does ~12x less arithmetic in the
//! frequency domain. All three passes (forward, input gradient, weight
//! gradient) are expressed as padded circular convolutions/correlations with
//! the padding chosen so no wraparound reaches the read window:
//!
//! * forward:      `out[p] = IFFT(FFT(x) . FFT(flip w))[p + pad]`
//! * input grad:   `gx[q]  = IFFT(FFT(go) . FFT(w))[q + pad]`
//! * weight grad:  `gw[k]  = IFFT(conj(FFT(go)) . FFT(x))[(k - pad) mod n]`
//!
//! Complex planes are stored split (re then im) so the channel contractions
//! vectorize as plain fused multiply-adds. The direct kernels in
//! [`super::kernels`] remain the reference implementation; equivalence is
//! covered by tests.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::Fft;

use super::kernels::ConvDims;
use super::scalar::Scalar;
use rayon::prelude::*;

/// Smallest 5-smooth number >= n (rustfft is fast for these sizes).
fn next_fast(n: usize) -> usize {
    let mut m = n;
    loop {
        let mut v = m;
        for p in [2usize, 3, 5] {
            while v % p == 0 {
                v /= p;
            }
        }
        if v == 1 {
            return m;
        }
        m += 1;
    }
}

/// Decide whether the FFT path is worth it for these dimensions.
pub fn fft_worthwhile(d: &ConvDims) -> bool {
    let direct = (d.frames * d.w * d.h) as f64
        * (d.k * d.k) as f64
        * (d.cin * d.cout) as f64;
    let fw = next_fast(d.w + d.k - 1) as f64;
    let fh = next_fast(d.h + d.k - 1) as f64;
    let bins = fw * fh;
    let log = bins.log2().max(1.0);
    let transforms =
        ((d.cin + d.cout) * d.frames + d.cin * d.cout) as f64 * 2.5 * bins * log;
    let cross = (d.frames * d.cin * d.cout) as f64 * 4.0 * bins;
    // bias towards the direct path: it has far lower constant overheads
    direct > 2.0 * (transforms + cross)
}

struct FftPair<S: Scalar> {
    fw: usize,
    fh: usize,
    row: Arc<dyn Fft<S>>,    // length fh
    col: Arc<dyn Fft<S>>,    // length fw
    irow: Arc<dyn Fft<S>>,   // inverse, length fw (first inverse stage)
    icol: Arc<dyn Fft<S>>,   // inverse, length fh
}

impl<S: Scalar> FftPair<S> {
    fn new(w: usize, h: usize, k: usize) -> Self {
        let fw = next_fast(w + k - 1);
        let fh = next_fast(h + k - 1);
        let mut planner = rustfft::FftPlanner::new();
        FftPair {
            fw,
            fh,
            row: planner.plan_fft_forward(fh),
            col: planner.plan_fft_forward(fw),
            irow: planner.plan_fft_inverse(fw),
            icol: planner.plan_fft_inverse(fh),
        }
    }

    fn bins(&self) -> usize {
        self.fw * self.fh
    }
}

fn transpose<S: Copy + Default>(src: &[Complex<S>], rows: usize, cols: usize, dst: &mut [Complex<S>]) {
    const B: usize = 32;
    for r0 in (0..rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(rows) {
                for c in c0..(c0 + B).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

/// Forward 2-D FFT of a zero-padded real plane. The result is laid out
/// transposed (fh-major); the inverse stage undoes the same order. `plane`
/// holds `src_w * src_h` values with `src_h` contiguous.
fn fft2_real<S: Scalar>(
    pair: &FftPair<S>,
    plane: &[S],
    src_w: usize,
    src_h: usize,
    out_re: &mut [S],
    out_im: &mut [S],
    buf: &mut Vec<Complex<S>>,
    buf2: &mut Vec<Complex<S>>,
) {
    let (fw, fh) = (pair.fw, pair.fh);
    buf.clear();
    buf.resize(fw * fh, Complex::new(S::zero(), S::zero()));
    for x in 0..src_w {
        for y in 0..src_h {
            buf[x * fh + y] = Complex::new(plane[x * src_h + y], S::zero());
        }
    }
    pair.row.process(buf);
    buf2.clear();
    buf2.resize(fw * fh, Complex::new(S::zero(), S::zero()));
    transpose(buf, fw, fh, buf2);
    pair.col.process(buf2);
    for (i, c) in buf2.iter().enumerate() {
        out_re[i] = c.re;
        out_im[i] = c.im;
    }
}

/// Inverse of [`fft2_real`]; writes the window starting at `(ox, oy)` of size
/// `(out_w, out_h)` into `out` (with `out_h * stride_c` addressing handled by
/// the caller via a closure-free raw layout: `out[x * out_h + y]`).
#[allow(clippy::too_many_arguments)]
fn ifft2_window<S: Scalar>(
    pair: &FftPair<S>,
    re: &[S],
    im: &[S],
    (ox, oy): (usize, usize),
    (out_w, out_h): (usize, usize),
    wrap: bool,
    out: &mut [S],
    buf: &mut Vec<Complex<S>>,
    buf2: &mut Vec<Complex<S>>,
) {
    let (fw, fh) = (pair.fw, pair.fh);
    buf.clear();
    buf.extend(
        re.iter()
            .zip(im.iter())
            .map(|(&r, &i)| Complex::new(r, i)),
    );
    // stored transposed (fh-major): invert columns first, transpose, rows
    pair.irow.process(buf);
    buf2.clear();
    buf2.resize(fw * fh, Complex::new(S::zero(), S::zero()));
    transpose(buf, fh, fw, buf2);
    pair.icol.process(buf2);
    let scale = S::one() / S::from_f((fw * fh) as f64);
    for x in 0..out_w {
        for y in 0..out_h {
            let (sx, sy) = if wrap {
                ((ox + x) % fw, (oy + y) % fh)
            } else {
                (ox + x, oy + y)
            };
            out[x * out_h + y] = buf2[sx * fh + sy].re * scale;
        }
    }
}

/// Gather one channel's spatial plane from channels-last frame data.
fn gather_plane<S: Scalar>(frame: &[S], w: usize, h: usize, c: usize, ci: usize, out: &mut [S]) {
    for p in 0..w * h {
        out[p] = frame[p * c + ci];
    }
}

/// Reorder split-complex planes `[plane][re|im][bin]` into bin-major
/// `[bin][re planes.. | im planes..]` so per-bin matrices are contiguous.
fn to_bin_major<S: Scalar>(planes: &[S], n_planes: usize, bins: usize) -> Vec<S> {
    let stride = 2 * bins;
    let mut out = vec![S::zero(); planes.len()];
    const BB: usize = 64;
    const PB: usize = 64;
    out.par_chunks_mut(BB * 2 * n_planes)
        .enumerate()
        .for_each(|(blk, chunk)| {
            let b0 = blk * BB;
            let bs = (b0 + BB).min(bins) - b0;
            for p0 in (0..n_planes).step_by(PB) {
                let ps = (p0 + PB).min(n_planes) - p0;
                for bi in 0..bs {
                    for pi in 0..ps {
                        let src = &planes[(p0 + pi) * stride..];
                        chunk[bi * 2 * n_planes + p0 + pi] = src[b0 + bi];
                        chunk[bi * 2 * n_planes + n_planes + p0 + pi] = src[bins + b0 + bi];
                    }
                }
            }
        });
    out
}

/// Inverse of [`to_bin_major`].
fn from_bin_major<S: Scalar>(binmajor: &[S], n_planes: usize, bins: usize) -> Vec<S> {
    let stride = 2 * bins;
    let mut out = vec![S::zero(); binmajor.len()];
    const PB: usize = 64;
    const BB: usize = 64;
    out.par_chunks_mut(PB * stride)
        .enumerate()
        .for_each(|(blk, chunk)| {
            let p0 = blk * PB;
            let ps = (p0 + PB).min(n_planes) - p0;
            for b0 in (0..bins).step_by(BB) {
                let bs = (b0 + BB).min(bins) - b0;
                for pi in 0..ps {
                    let dst = &mut chunk[pi * stride..(pi + 1) * stride];
                    for bi in 0..bs {
                        let base = (b0 + bi) * 2 * n_planes;
                        dst[b0 + bi] = binmajor[base + p0 + pi];
                        dst[bins + b0 + bi] = binmajor[base + n_planes + p0 + pi];
                    }
                }
            }
        });
    out
}

/// Complex GEMM `C[m, n] += A[m, k] * B[k, n]` on split-re/im panels, with a
/// register-tiled accumulator over n.
#[allow(clippy::too_many_arguments)]
fn complex_gemm<S: Scalar>(
    ar: &[S],
    ai: &[S],
    br: &[S],
    bi: &[S],
    cr: &mut [S],
    ci_: &mut [S],
    m: usize,
    k: usize,
    n: usize,
) {
    const NT: usize = 32;
    for mi in 0..m {
        let mut n0 = 0;
        // full tiles: fixed-width accumulators stay in registers
        while n0 + NT <= n {
            let mut acc_r = [S::zero(); NT];
            let mut acc_i = [S::zero(); NT];
            for ki in 0..k {
                let war = ar[mi * k + ki];
                let wai = ai[mi * k + ki];
                let brow_r: &[S; NT] = br[ki * n + n0..ki * n + n0 + NT].try_into().unwrap();
                let brow_i: &[S; NT] = bi[ki * n + n0..ki * n + n0 + NT].try_into().unwrap();
                for j in 0..NT {
                    let (xr, xi) = (brow_r[j], brow_i[j]);
                    acc_r[j] = acc_r[j] + war * xr - wai * xi;
                    acc_i[j] = acc_i[j] + war * xi + wai * xr;
                }
            }
            for j in 0..NT {
                cr[mi * n + n0 + j] = cr[mi * n + n0 + j] + acc_r[j];
                ci_[mi * n + n0 + j] = ci_[mi * n + n0 + j] + acc_i[j];
            }
            n0 += NT;
        }
        if n0 < n {
            let ns = n - n0;
            let mut acc_r = [S::zero(); NT];
            let mut acc_i = [S::zero(); NT];
            for ki in 0..k {
                let war = ar[mi * k + ki];
                let wai = ai[mi * k + ki];
                let brow_r = &br[ki * n + n0..ki * n + n0 + ns];
                let brow_i = &bi[ki * n + n0..ki * n + n0 + ns];
                for j in 0..ns {
                    let (xr, xi) = (brow_r[j], brow_i[j]);
                    acc_r[j] = acc_r[j] + war * xr - wai * xi;
                    acc_i[j] = acc_i[j] + war * xi + wai * xr;
                }
            }
            for j in 0..ns {
                cr[mi * n + n0 + j] = cr[mi * n + n0 + j] + acc_r[j];
                ci_[mi * n + n0 + j] = ci_[mi * n + n0 + j] + acc_i[j];
            }
        }
    }
}

/// Cross-channel contraction in the frequency domain:
/// `Y[o, f] = sum_i W[o, i] * X[i, f]` (complex). Inputs are plane-major;
/// the contraction runs bin-major as a batch of small complex GEMMs.
fn contract_channels<S: Scalar>(
    x: &[S],
    w: &[S],
    y: &mut [S],
    cin: usize,
    cout: usize,
    frames: usize,
    bins: usize,
) {
    let xb = to_bin_major(x, cin * frames, bins);
    let wb = to_bin_major(w, cout * cin, bins);
    let mut yb = vec![S::zero(); cout * frames * 2 * bins];
    let x_stride = 2 * cin * frames;
    let w_stride = 2 * cout * cin;
    let y_stride = 2 * cout * frames;
    yb.par_chunks_mut(y_stride)
        .enumerate()
        .for_each(|(b, yc)| {
            let xc = &xb[b * x_stride..(b + 1) * x_stride];
            let wc = &wb[b * w_stride..(b + 1) * w_stride];
            let (war, wai) = wc.split_at(cout * cin);
            let (xr, xi) = xc.split_at(cin * frames);
            let (yr, yi) = yc.split_at_mut(cout * frames);
            complex_gemm(war, wai, xr, xi, yr, yi, cout, cin, frames);
        });
    let back = from_bin_major(&yb, cout * frames, bins);
    y.copy_from_slice(&back);
}

/// Frame-summed correlation in the frequency domain:
/// `R[o, i] = sum_f conj(G[o, f]) * X[i, f]`, bin-major per-bin dot products.
fn contract_frames<S: Scalar>(
    g: &[S],
    x: &[S],
    r: &mut [S],
    cin: usize,
    cout: usize,
    frames: usize,
    bins: usize,
) {
    let gb = to_bin_major(g, cout * frames, bins);
    let xb = to_bin_major(x, cin * frames, bins);
    let mut rb = vec![S::zero(); cout * cin * 2 * bins];
    let g_stride = 2 * cout * frames;
    let x_stride = 2 * cin * frames;
    let r_stride = 2 * cout * cin;
    rb.par_chunks_mut(r_stride)
        .enumerate()
        .for_each(|(b, rc)| {
            let gc = &gb[b * g_stride..(b + 1) * g_stride];
            let xc = &xb[b * x_stride..(b + 1) * x_stride];
            let (gr, gi) = gc.split_at(cout * frames);
            let (xr, xi) = xc.split_at(cin * frames);
            let (rr, ri) = rc.split_at_mut(cout * cin);
            // conj(G) on the fly; X transposed so the GEMM kernel applies:
            // R[o, i] = sum_f conj(G)[o, f] * Xt[f, i]
            let mut gneg = vec![S::zero(); cout * frames];
            for (d, &s) in gneg.iter_mut().zip(gi) {
                *d = -s;
            }
            let mut xtr = vec![S::zero(); cin * frames];
            let mut xti = vec![S::zero(); cin * frames];
            for i in 0..cin {
                for f in 0..frames {
                    xtr[f * cin + i] = xr[i * frames + f];
                    xti[f * cin + i] = xi[i * frames + f];
                }
            }
            complex_gemm(gr, &gneg, &xtr, &xti, rr, ri, cout, frames, cin);
        });
    let back = from_bin_major(&rb, cout * cin, bins);
    r.copy_from_slice(&back);
}

/// FFT every channel plane of channels-last frames into split-complex
/// storage `[channel][frame][re|im]`.
fn fft_all_planes<S: Scalar>(
    pair: &FftPair<S>,
    data: &[S],
    frames: usize,
    w: usize,
    h: usize,
    c: usize,
) -> Vec<S> {
    let bins = pair.bins();
    let stride = 2 * bins;
    let mut out = vec![S::zero(); c * frames * stride];
    let jobs: Vec<(usize, usize)> = (0..c)
        .flat_map(|ci| (0..frames).map(move |f| (ci, f)))
        .collect();
    let frame_len = w * h * c;
    out.par_chunks_mut(stride)
        .zip(jobs.par_iter())
        .for_each(|(slot, &(ci, f))| {
            let mut plane = vec![S::zero(); w * h];
            gather_plane(&data[f * frame_len..(f + 1) * frame_len], w, h, c, ci, &mut plane);
            let (re, im) = slot.split_at_mut(bins);
            let mut b1 = Vec::new();
            let mut b2 = Vec::new();
            fft2_real(pair, &plane, w, h, re, im, &mut b1, &mut b2);
        });
    out
}

/// FFT the kernels into `[cout][cin][re|im]`, optionally flipped.
fn fft_kernels<S: Scalar>(pair: &FftPair<S>, w: &[S], d: &ConvDims, flip: bool) -> Vec<S> {
    let bins = pair.bins();
    let stride = 2 * bins;
    let mut out = vec![S::zero(); d.cout * d.cin * stride];
    let k = d.k;
    let jobs: Vec<(usize, usize)> = (0..d.cout)
        .flat_map(|co| (0..d.cin).map(move |ci| (co, ci)))
        .collect();
    out.par_chunks_mut(stride)
        .zip(jobs.par_iter())
        .for_each(|(slot, &(co, ci))| {
            let mut plane = vec![S::zero(); k * k];
            for kw in 0..k {
                for kh in 0..k {
                    let (sw, sh) = if flip { (k - 1 - kw, k - 1 - kh) } else { (kw, kh) };
                    plane[kw * k + kh] = w[((co * k + sw) * k + sh) * d.cin + ci];
                }
            }
            let (re, im) = slot.split_at_mut(bins);
            let mut b1 = Vec::new();
            let mut b2 = Vec::new();
            fft2_real(pair, &plane, k, k, re, im, &mut b1, &mut b2);
        });
    out
}

pub fn conv2d_forward_fft<S: Scalar>(x: &[S], w: &[S], bias: &[S], d: &ConvDims, out: &mut [S]) {
    let pair = FftPair::new(d.w, d.h, d.k);
    let bins = pair.bins();
    let stride = 2 * bins;
    let pad = d.pad();

    let xhat = fft_all_planes(&pair, x, d.frames, d.w, d.h, d.cin);
    let what = fft_kernels(&pair, w, d, true);
    let mut yhat = vec![S::zero(); d.cout * d.frames * stride];
    contract_channels(&xhat, &what, &mut yhat, d.cin, d.cout, d.frames, bins);
    drop(xhat);
    drop(what);

    // inverse transforms, window read at (pad, pad), scatter into channels-last
    let frame_len = d.w * d.h * d.cout;
    let jobs: Vec<(usize, usize)> = (0..d.cout)
        .flat_map(|co| (0..d.frames).map(move |f| (co, f)))
        .collect();
    // collect per-(co, frame) planes first, then scatter single-threaded per frame
    let mut planes = vec![S::zero(); d.cout * d.frames * d.w * d.h];
    planes
        .par_chunks_mut(d.w * d.h)
        .zip(jobs.par_iter())
        .for_each(|(plane, &(co, f))| {
            let slot = &yhat[(co * d.frames + f) * stride..][..stride];
            let (re, im) = slot.split_at(bins);
            let mut b1 = Vec::new();
            let mut b2 = Vec::new();
            ifft2_window(
                &pair,
                re,
                im,
                (pad, pad),
                (d.w, d.h),
                false,
                plane,
                &mut b1,
                &mut b2,
            );
        });
    out.par_chunks_mut(frame_len)
        .enumerate()
        .for_each(|(f, frame)| {
            for co in 0..d.cout {
                let plane = &planes[(co * d.frames + f) * d.w * d.h..][..d.w * d.h];
                let b = bias[co];
                for p in 0..d.w * d.h {
                    frame[p * d.cout + co] = plane[p] + b;
                }
            }
        });
}

pub fn conv2d_backward_input_fft<S: Scalar>(go: &[S], w: &[S], d: &ConvDims, gx: &mut [S]) {
    let pair = FftPair::new(d.w, d.h, d.k);
    let bins = pair.bins();
    let stride = 2 * bins;
    let pad = d.pad();

    let ghat = fft_all_planes(&pair, go, d.frames, d.w, d.h, d.cout);
    // unflipped kernels, contraction over cout: treat W as [ci][co] by
    // building the transposed kernel table
    let what = {
        let mut wt = vec![S::zero(); w.len()];
        // reorder [co][k][k][ci] -> [ci][co][k][k] layout expected below
        for co in 0..d.cout {
            for kw in 0..d.k {
                for kh in 0..d.k {
                    for ci in 0..d.cin {
                        wt[((ci * d.cout + co) * d.k + kw) * d.k + kh] =
                            w[((co * d.k + kw) * d.k + kh) * d.cin + ci];
                    }
                }
            }
        }
        // FFT each [ci][co] plane
        let mut out = vec![S::zero(); d.cin * d.cout * stride];
        let jobs: Vec<usize> = (0..d.cin * d.cout).collect();
        out.par_chunks_mut(stride)
            .zip(jobs.par_iter())
            .for_each(|(slot, &idx)| {
                let plane = &wt[idx * d.k * d.k..(idx + 1) * d.k * d.k];
                let (re, im) = slot.split_at_mut(bins);
                let mut b1 = Vec::new();
                let mut b2 = Vec::new();
                fft2_real(&pair, plane, d.k, d.k, re, im, &mut b1, &mut b2);
            });
        out
    };
    let mut xhat = vec![S::zero(); d.cin * d.frames * stride];
    contract_channels(&ghat, &what, &mut xhat, d.cout, d.cin, d.frames, bins);
    drop(ghat);
    drop(what);

    let frame_len = d.w * d.h * d.cin;
    let jobs: Vec<(usize, usize)> = (0..d.cin)
        .flat_map(|ci| (0..d.frames).map(move |f| (ci, f)))
        .collect();
    let mut planes = vec![S::zero(); d.cin * d.frames * d.w * d.h];
    planes
        .par_chunks_mut(d.w * d.h)
        .zip(jobs.par_iter())
        .for_each(|(plane, &(ci, f))| {
            let slot = &xhat[(ci * d.frames + f) * stride..][..stride];
            let (re, im) = slot.split_at(bins);
            let mut b1 = Vec::new();
            let mut b2 = Vec::new();
            ifft2_window(
                &pair,
                re,
                im,
                (pad, pad),
                (d.w, d.h),
                false,
                plane,
                &mut b1,
                &mut b2,
            );
        });
    gx.par_chunks_mut(frame_len)
        .enumerate()
        .for_each(|(f, frame)| {
            for ci in 0..d.cin {
                let plane = &planes[(ci * d.frames + f) * d.w * d.h..][..d.w * d.h];
                for p in 0..d.w * d.h {
                    frame[p * d.cin + ci] = plane[p];
                }
            }
        });
}

pub fn conv2d_backward_params_fft<S: Scalar>(
    x: &[S],
    go: &[S],
    d: &ConvDims,
    gw: &mut [S],
    gb: &mut [S],
) {
    let pair = FftPair::new(d.w, d.h, d.k);
    let bins = pair.bins();
    let stride = 2 * bins;
    let pad = d.pad();

    let xhat = fft_all_planes(&pair, x, d.frames, d.w, d.h, d.cin);
    let ghat = fft_all_planes(&pair, go, d.frames, d.w, d.h, d.cout);
    let mut rhat = vec![S::zero(); d.cout * d.cin * stride];
    contract_frames(&ghat, &xhat, &mut rhat, d.cin, d.cout, d.frames, bins);
    drop(xhat);
    drop(ghat);

    // gw[co, kw, kh, ci] = IFFT(R[co, ci]) at lag (kw - pad, kh - pad) mod n
    let jobs: Vec<(usize, usize)> = (0..d.cout)
        .flat_map(|co| (0..d.cin).map(move |ci| (co, ci)))
        .collect();
    let mut lags = vec![S::zero(); d.cout * d.cin * d.k * d.k];
    lags.par_chunks_mut(d.k * d.k)
        .zip(jobs.par_iter())
        .for_each(|(plane, &(co, ci))| {
            let slot = &rhat[(co * d.cin + ci) * stride..][..stride];
            let (re, im) = slot.split_at(bins);
            let mut b1 = Vec::new();
            let mut b2 = Vec::new();
            // window [(0 - pad) mod fw .. ) of size k, wrapped
            ifft2_window(
                &pair,
                re,
                im,
                (pair.fw - pad, pair.fh - pad),
                (d.k, d.k),
                true,
                plane,
                &mut b1,
                &mut b2,
            );
        });
    for co in 0..d.cout {
        for ci in 0..d.cin {
            let plane = &lags[(co * d.cin + ci) * d.k * d.k..][..d.k * d.k];
            for kw in 0..d.k {
                for kh in 0..d.k {
                    gw[((co * d.k + kw) * d.k + kh) * d.cin + ci] = plane[kw * d.k + kh];
                }
            }
        }
    }

    for px in go.chunks_exact(d.cout) {
        for (b, &g) in gb.iter_mut().zip(px) {
            *b = *b + g;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::kernels;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn next_fast_finds_smooth_sizes() {
        assert_eq!(next_fast(74), 75);
        assert_eq!(next_fast(75), 75);
        assert_eq!(next_fast(26), 27);
        assert_eq!(next_fast(17), 18);
        assert_eq!(next_fast(1), 1);
    }

    fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn check_all_passes(d: ConvDims, seed: u64, tol: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_vec(d.frames * d.w * d.h * d.cin, &mut rng);
        let w = rand_vec(d.cout * d.k * d.k * d.cin, &mut rng);
        let b = rand_vec(d.cout, &mut rng);
        let go = rand_vec(d.frames * d.w * d.h * d.cout, &mut rng);

        let mut direct = vec![0.0; go.len()];
        kernels::conv2d_forward(&x, &w, &b, &d, &mut direct);
        let mut fft = vec![0.0; go.len()];
        conv2d_forward_fft(&x, &w, &b, &d, &mut fft);
        for (a, c) in direct.iter().zip(&fft) {
            assert!((a - c).abs() < tol, "forward mismatch {a} vs {c}");
        }

        let mut direct_gx = vec![0.0; x.len()];
        kernels::conv2d_backward_input(&go, &w, &d, &mut direct_gx);
        let mut fft_gx = vec![0.0; x.len()];
        conv2d_backward_input_fft(&go, &w, &d, &mut fft_gx);
        for (a, c) in direct_gx.iter().zip(&fft_gx) {
            assert!((a - c).abs() < tol, "input grad mismatch {a} vs {c}");
        }

        let mut dgw = vec![0.0; w.len()];
        let mut dgb = vec![0.0; d.cout];
        kernels::conv2d_backward_params(&x, &go, &d, &mut dgw, &mut dgb);
        let mut fgw = vec![0.0; w.len()];
        let mut fgb = vec![0.0; d.cout];
        conv2d_backward_params_fft(&x, &go, &d, &mut fgw, &mut fgb);
        // weight gradients accumulate over many pixels; scale tolerance
        let scale = (d.frames * d.w * d.h) as f64;
        for (a, c) in dgw.iter().zip(&fgw) {
            assert!(
                (a - c).abs() < tol * scale,
                "weight grad mismatch {a} vs {c}"
            );
        }
        for (a, c) in dgb.iter().zip(&fgb) {
            assert!((a - c).abs() < 1e-9 * scale, "bias grad mismatch {a} vs {c}");
        }
    }

    #[test]
    fn fft_matches_direct_on_odd_sizes() {
        check_all_passes(
            ConvDims {
                frames: 2,
                w: 13,
                h: 17,
                cin: 3,
                cout: 4,
                k: 11,
            },
            1,
            1e-10,
        );
    }

    #[test]
    fn fft_matches_direct_on_small_kernel() {
        check_all_passes(
            ConvDims {
                frames: 1,
                w: 8,
                h: 8,
                cin: 2,
                cout: 3,
                k: 3,
            },
            2,
            1e-10,
        );
    }

    #[test]
    fn fft_matches_direct_on_training_geometry() {
        check_all_passes(
            ConvDims {
                frames: 2,
                w: 32,
                h: 32,
                cin: 8,
                cout: 8,
                k: 11,
            },
            3,
            1e-10,
        );
    }

    #[test]
    fn fft_matches_direct_kernel_larger_than_frame() {
        check_all_passes(
            ConvDims {
                frames: 1,
                w: 6,
                h: 7,
                cin: 2,
                cout: 2,
                k: 11,
            },
            4,
            1e-10,
        );
    }

    #[test]
    fn worthwhile_only_for_large_work() {
        assert!(fft_worthwhile(&ConvDims {
            frames: 96,
            w: 64,
            h: 64,
            cin: 32,
            cout: 32,
            k: 11
        }));
        assert!(!fft_worthwhile(&ConvDims {
            frames: 1,
            w: 8,
            h: 8,
            cin: 2,
            cout: 4,
            k: 11
        }));
    }
}
