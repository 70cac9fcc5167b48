//! Raw computational kernels behind the tape ops.
//!
//! All kernels operate on contiguous channels-last buffers. Video activations
//! are laid out as `[frames, w, h, c]` with `c` innermost so the hot loops
//! reduce over short contiguous runs that autovectorize. Reductions are
//! performed in a fixed order so results do not depend on thread count.

use rayon::prelude::*;

use super::scalar::Scalar;

/// Largest channel count used by any layer; stack accumulators are sized to it.
const MAX_CHANNELS: usize = 64;

#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub frames: usize,
    pub w: usize,
    pub h: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

impl ConvDims {
    #[inline]
    pub fn pad(&self) -> usize {
        (self.k - 1) / 2
    }
}

/// Transpose weights `[cout, k, k, cin]` -> `[k, k, cin, cout]`.
fn transpose_weights<S: Scalar>(w: &[S], d: &ConvDims) -> Vec<S> {
    let mut out = vec![S::zero(); w.len()];
    for co in 0..d.cout {
        for kw in 0..d.k {
            for kh in 0..d.k {
                for ci in 0..d.cin {
                    out[((kw * d.k + kh) * d.cin + ci) * d.cout + co] =
                        w[((co * d.k + kw) * d.k + kh) * d.cin + ci];
                }
            }
        }
    }
    out
}

/// Flip + transpose weights for the input-gradient pass:
/// `[cout, k, k, cin]` -> `[k, k, cout, cin]` with both spatial taps reversed.
fn flip_weights<S: Scalar>(w: &[S], d: &ConvDims) -> Vec<S> {
    let mut out = vec![S::zero(); w.len()];
    for co in 0..d.cout {
        for kw in 0..d.k {
            for kh in 0..d.k {
                for ci in 0..d.cin {
                    let fkw = d.k - 1 - kw;
                    let fkh = d.k - 1 - kh;
                    out[((fkw * d.k + fkh) * d.cout + co) * d.cin + ci] =
                        w[((co * d.k + kw) * d.k + kh) * d.cin + ci];
                }
            }
        }
    }
    out
}

/// Core gather loop shared by the forward pass and the input-gradient pass.
///
/// Computes, for every frame and output pixel `(wo, ho)`,
/// `out[.., co] = init[co] + sum_{kw,kh,ci} src[.., wo+kw-pad, ho+kh-pad, ci] * wt[kw, kh*cin+ci, co]`
/// where `wt` is laid out `[k, k*cin, cout]`. For interior pixels the
/// `(kh, ci)` reduction is one contiguous dot product of length `k*cin`;
/// output pixels are processed four at a time so each weight row is reused
/// across four accumulators.
fn conv_gather<S: Scalar>(
    src: &[S],
    wt: &[S],
    init: &[S],
    frames: usize,
    w: usize,
    h: usize,
    cin: usize,
    cout: usize,
    k: usize,
    out: &mut [S],
) {
    assert!(cout <= MAX_CHANNELS);
    let pad = (k - 1) / 2;
    let row_in = h * cin;
    let row_out = h * cout;
    let frame_in = w * row_in;
    let kc = k * cin;
    debug_assert_eq!(out.len(), frames * w * row_out);

    out.par_chunks_mut(row_out)
        .enumerate()
        .for_each(|(idx, out_row)| {
            let f = idx / w;
            let wo = idx % w;
            let xf = &src[f * frame_in..(f + 1) * frame_in];
            for px in out_row.chunks_exact_mut(cout) {
                px.copy_from_slice(init);
            }
            // interior pixels have every kh tap in range
            let h_lo = pad.min(h);
            let h_hi = h.saturating_sub(pad).max(h_lo);
            for kw in 0..k {
                let u = (wo + kw).wrapping_sub(pad);
                if u >= w {
                    continue;
                }
                let x_row = &xf[u * row_in..(u + 1) * row_in];
                let wt_kw = &wt[kw * kc * cout..(kw + 1) * kc * cout];
                // boundary pixels: per-tap validity checks
                for ho in (0..h_lo).chain(h_hi..h) {
                    let acc = &mut out_row[ho * cout..(ho + 1) * cout];
                    for kh in 0..k {
                        let v = (ho + kh).wrapping_sub(pad);
                        if v >= h {
                            continue;
                        }
                        let xs = &x_row[v * cin..(v + 1) * cin];
                        let wrows = &wt_kw[kh * cin * cout..(kh + 1) * cin * cout];
                        for (ci, &xv) in xs.iter().enumerate() {
                            let w_row = &wrows[ci * cout..(ci + 1) * cout];
                            for (av, &wv) in acc.iter_mut().zip(w_row) {
                                *av = *av + xv * wv;
                            }
                        }
                    }
                }
                // interior pixels, blocked four at a time
                let mut ho = h_lo;
                while ho + 4 <= h_hi {
                    let base = (ho - pad) * cin;
                    let seg = &x_row[base..base + kc + 3 * cin];
                    let out4 = &mut out_row[ho * cout..(ho + 4) * cout];
                    match cout {
                        3 => block4::<S, 3>(seg, wt_kw, cin, out4),
                        4 => block4::<S, 4>(seg, wt_kw, cin, out4),
                        16 => block4::<S, 16>(seg, wt_kw, cin, out4),
                        32 => block4::<S, 32>(seg, wt_kw, cin, out4),
                        64 => block4::<S, 64>(seg, wt_kw, cin, out4),
                        _ => block4_dyn(seg, wt_kw, cin, cout, out4),
                    }
                    ho += 4;
                }
                while ho < h_hi {
                    let base = (ho - pad) * cin;
                    let seg = &x_row[base..base + kc];
                    let acc = &mut out_row[ho * cout..(ho + 1) * cout];
                    for (j, wr) in wt_kw.chunks_exact(cout).enumerate() {
                        let xv = seg[j];
                        for (av, &wv) in acc.iter_mut().zip(wr) {
                            *av = *av + xv * wv;
                        }
                    }
                    ho += 1;
                }
            }
        });
}

/// Four consecutive output pixels sharing one sweep over a tap column's
/// weight rows. `CO` is monomorphized so the accumulators live in registers.
#[inline(always)]
fn block4<S: Scalar, const CO: usize>(seg: &[S], wt_kw: &[S], cin: usize, out4: &mut [S]) {
    let kc = wt_kw.len() / CO;
    let mut a0 = [S::zero(); CO];
    let mut a1 = [S::zero(); CO];
    let mut a2 = [S::zero(); CO];
    let mut a3 = [S::zero(); CO];
    for j in 0..kc {
        let wr: &[S; CO] = wt_kw[j * CO..j * CO + CO].try_into().unwrap();
        let x0 = seg[j];
        let x1 = seg[j + cin];
        let x2 = seg[j + 2 * cin];
        let x3 = seg[j + 3 * cin];
        for i in 0..CO {
            a0[i] = a0[i] + x0 * wr[i];
            a1[i] = a1[i] + x1 * wr[i];
            a2[i] = a2[i] + x2 * wr[i];
            a3[i] = a3[i] + x3 * wr[i];
        }
    }
    for (o, a) in out4.chunks_exact_mut(CO).zip([&a0, &a1, &a2, &a3]) {
        for (ov, &av) in o.iter_mut().zip(a) {
            *ov = *ov + av;
        }
    }
}

/// Fallback for channel counts without a monomorphized variant.
fn block4_dyn<S: Scalar>(seg: &[S], wt_kw: &[S], cin: usize, cout: usize, out4: &mut [S]) {
    let kc = wt_kw.len() / cout;
    for r in 0..4 {
        let acc = &mut out4[r * cout..(r + 1) * cout];
        for j in 0..kc {
            let xv = seg[j + r * cin];
            let wr = &wt_kw[j * cout..(j + 1) * cout];
            for (av, &wv) in acc.iter_mut().zip(wr) {
                *av = *av + xv * wv;
            }
        }
    }
}

/// Zero-padded spatial correlation, stride 1: one `k x k` kernel applied to
/// every frame independently. `x` is `[frames, w, h, cin]`, output
/// `[frames, w, h, cout]`.
pub fn conv2d_forward<S: Scalar>(x: &[S], w: &[S], bias: &[S], d: &ConvDims, out: &mut [S]) {
    let wt = transpose_weights(w, d);
    conv_gather(x, &wt, bias, d.frames, d.w, d.h, d.cin, d.cout, d.k, out);
}

/// Gradient w.r.t. the convolution input. `go` is `[frames, w, h, cout]`,
/// result `[frames, w, h, cin]`.
pub fn conv2d_backward_input<S: Scalar>(go: &[S], w: &[S], d: &ConvDims, gx: &mut [S]) {
    let wf = flip_weights(w, d);
    let zeros = vec![S::zero(); d.cin];
    // Roles of cin/cout swap: we gather output-channel gradients.
    conv_gather(
        go, &wf, &zeros, d.frames, d.w, d.h, d.cout, d.cin, d.k, gx,
    );
}

/// Gradients w.r.t. weights and bias. Parallel over kernel taps; each tap owns
/// a disjoint slice of the weight gradient, so accumulation order is fixed.
pub fn conv2d_backward_params<S: Scalar>(
    x: &[S],
    go: &[S],
    d: &ConvDims,
    gw: &mut [S],
    gb: &mut [S],
) {
    let pad = d.pad();
    let row_in = d.h * d.cin;
    let row_go = d.h * d.cout;
    let frame_in = d.w * row_in;
    let frame_go = d.w * row_go;

    // Weight gradient in tap-major layout [k, k, cout, cin], transposed back
    // at the end. Each tap owns a disjoint accumulator; within a tap, four
    // output pixels share one pass over the accumulator rows.
    let taps = d.k * d.k;
    let mut gw_taps = vec![S::zero(); taps * d.cout * d.cin];
    gw_taps
        .par_chunks_mut(d.cout * d.cin)
        .enumerate()
        .for_each(|(tap, acc)| {
            let kw = tap / d.k;
            let kh = tap % d.k;
            let ho_lo = pad.saturating_sub(kh);
            let ho_hi = (d.h + pad).saturating_sub(kh).min(d.h);
            for f in 0..d.frames {
                let xf = &x[f * frame_in..(f + 1) * frame_in];
                let gf = &go[f * frame_go..(f + 1) * frame_go];
                for wo in 0..d.w {
                    let u = (wo + kw).wrapping_sub(pad);
                    if u >= d.w {
                        continue;
                    }
                    let x_row = &xf[u * row_in..(u + 1) * row_in];
                    let g_row = &gf[wo * row_go..(wo + 1) * row_go];
                    let mut ho = ho_lo;
                    while ho + 4 <= ho_hi {
                        let v = ho + kh - pad;
                        let xs = &x_row[v * d.cin..(v + 4) * d.cin];
                        let gs = &g_row[ho * d.cout..(ho + 4) * d.cout];
                        match d.cin {
                            3 => params_block4::<S, 3>(xs, gs, d.cout, acc),
                            4 => params_block4::<S, 4>(xs, gs, d.cout, acc),
                            16 => params_block4::<S, 16>(xs, gs, d.cout, acc),
                            32 => params_block4::<S, 32>(xs, gs, d.cout, acc),
                            64 => params_block4::<S, 64>(xs, gs, d.cout, acc),
                            _ => params_block4_dyn(xs, gs, d.cin, d.cout, acc),
                        }
                        ho += 4;
                    }
                    while ho < ho_hi {
                        let v = ho + kh - pad;
                        let xs = &x_row[v * d.cin..(v + 1) * d.cin];
                        let gs = &g_row[ho * d.cout..(ho + 1) * d.cout];
                        for (co, &gv) in gs.iter().enumerate() {
                            let a = &mut acc[co * d.cin..(co + 1) * d.cin];
                            for (av, &xv) in a.iter_mut().zip(xs) {
                                *av = *av + gv * xv;
                            }
                        }
                        ho += 1;
                    }
                }
            }
        });
    for kw in 0..d.k {
        for kh in 0..d.k {
            let tap = &gw_taps[(kw * d.k + kh) * d.cout * d.cin..];
            for co in 0..d.cout {
                for ci in 0..d.cin {
                    gw[((co * d.k + kw) * d.k + kh) * d.cin + ci] = tap[co * d.cin + ci];
                }
            }
        }
    }

    // Bias gradient: plain per-channel sum over all output positions.
    for px in go.chunks_exact(d.cout) {
        for (b, &g) in gb.iter_mut().zip(px) {
            *b = *b + g;
        }
    }
}

/// Accumulate four pixels' outer products `g ⊗ x` into the `[cout, CI]`
/// accumulator of one kernel tap.
#[inline(always)]
fn params_block4<S: Scalar, const CI: usize>(xs: &[S], gs: &[S], cout: usize, acc: &mut [S]) {
    let x0: &[S; CI] = xs[..CI].try_into().unwrap();
    let x1: &[S; CI] = xs[CI..2 * CI].try_into().unwrap();
    let x2: &[S; CI] = xs[2 * CI..3 * CI].try_into().unwrap();
    let x3: &[S; CI] = xs[3 * CI..4 * CI].try_into().unwrap();
    for co in 0..cout {
        let g0 = gs[co];
        let g1 = gs[cout + co];
        let g2 = gs[2 * cout + co];
        let g3 = gs[3 * cout + co];
        let a: &mut [S; CI] = (&mut acc[co * CI..(co + 1) * CI]).try_into().unwrap();
        for i in 0..CI {
            a[i] = a[i] + g0 * x0[i] + g1 * x1[i] + g2 * x2[i] + g3 * x3[i];
        }
    }
}

fn params_block4_dyn<S: Scalar>(xs: &[S], gs: &[S], cin: usize, cout: usize, acc: &mut [S]) {
    for co in 0..cout {
        let a = &mut acc[co * cin..(co + 1) * cin];
        for r in 0..4 {
            let gv = gs[r * cout + co];
            let xr = &xs[r * cin..(r + 1) * cin];
            for (av, &xv) in a.iter_mut().zip(xr) {
                *av = *av + gv * xv;
            }
        }
    }
}

/// Per-channel sums over `[n, c]`-shaped data (rows of length `c`).
pub fn channel_sums<S: Scalar>(data: &[S], c: usize) -> Vec<S> {
    let mut sums = vec![S::zero(); c];
    for px in data.chunks_exact(c) {
        for (s, &v) in sums.iter_mut().zip(px) {
            *s = *s + v;
        }
    }
    sums
}

/// Per-channel sums of `f(a, b)` over paired rows.
pub fn channel_sums2<S: Scalar>(a: &[S], b: &[S], c: usize, f: impl Fn(S, S) -> S) -> Vec<S> {
    let mut sums = vec![S::zero(); c];
    for (pa, pb) in a.chunks_exact(c).zip(b.chunks_exact(c)) {
        for ((s, &va), &vb) in sums.iter_mut().zip(pa).zip(pb) {
            *s = *s + f(va, vb);
        }
    }
    sums
}

/// Source coordinate for bilinear resampling with corner-aligned endpoints.
#[inline]
pub fn align_corners_pos(i: usize, n_out: usize, n_in: usize) -> f64 {
    if n_out <= 1 {
        0.0
    } else {
        i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
    }
}

#[derive(Clone, Copy)]
pub struct BilinearTap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

pub fn bilinear_taps(n_out: usize, n_in: usize) -> Vec<BilinearTap> {
    (0..n_out)
        .map(|i| {
            let pos = align_corners_pos(i, n_out, n_in);
            let lo = (pos.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            BilinearTap {
                lo,
                hi,
                frac: pos - lo as f64,
            }
        })
        .collect()
}

/// Bilinear resample every frame of `[frames, w, h, c]` to `[frames, ow, oh, c]`.
pub fn resize_forward<S: Scalar>(
    x: &[S],
    frames: usize,
    (w, h): (usize, usize),
    (ow, oh): (usize, usize),
    c: usize,
    out: &mut [S],
) {
    let taps_w = bilinear_taps(ow, w);
    let taps_h = bilinear_taps(oh, h);
    let frame_in = w * h * c;
    let row_out = oh * c;
    debug_assert_eq!(out.len(), frames * ow * row_out);
    out.par_chunks_mut(row_out)
        .enumerate()
        .for_each(|(idx, out_row)| {
            let f = idx / ow;
            let i = idx % ow;
            let xf = &x[f * frame_in..(f + 1) * frame_in];
            let tw = taps_w[i];
            let fw = S::from_f(tw.frac);
            let one = S::one();
            for (j, th) in taps_h.iter().enumerate() {
                let fh = S::from_f(th.frac);
                let p00 = &xf[(tw.lo * h + th.lo) * c..][..c];
                let p01 = &xf[(tw.lo * h + th.hi) * c..][..c];
                let p10 = &xf[(tw.hi * h + th.lo) * c..][..c];
                let p11 = &xf[(tw.hi * h + th.hi) * c..][..c];
                let o = &mut out_row[j * c..(j + 1) * c];
                for k in 0..c {
                    let top = p00[k] * (one - fh) + p01[k] * fh;
                    let bot = p10[k] * (one - fh) + p11[k] * fh;
                    o[k] = top * (one - fw) + bot * fw;
                }
            }
        });
}

/// Scatter the gradient of a bilinear resample back onto the source grid.
pub fn resize_backward<S: Scalar>(
    go: &[S],
    frames: usize,
    (w, h): (usize, usize),
    (ow, oh): (usize, usize),
    c: usize,
    gx: &mut [S],
) {
    let taps_w = bilinear_taps(ow, w);
    let taps_h = bilinear_taps(oh, h);
    let frame_in = w * h * c;
    let frame_out = ow * oh * c;
    let one = S::one();
    for f in 0..frames {
        let gf = &go[f * frame_out..(f + 1) * frame_out];
        let xf = &mut gx[f * frame_in..(f + 1) * frame_in];
        for (i, tw) in taps_w.iter().enumerate() {
            let fw = S::from_f(tw.frac);
            for (j, th) in taps_h.iter().enumerate() {
                let fh = S::from_f(th.frac);
                let g = &gf[(i * oh + j) * c..][..c];
                let w00 = (one - fw) * (one - fh);
                let w01 = (one - fw) * fh;
                let w10 = fw * (one - fh);
                let w11 = fw * fh;
                for k in 0..c {
                    let gv = g[k];
                    xf[(tw.lo * h + th.lo) * c + k] += gv * w00;
                    xf[(tw.lo * h + th.hi) * c + k] += gv * w01;
                    xf[(tw.hi * h + th.lo) * c + k] += gv * w10;
                    xf[(tw.hi * h + th.hi) * c + k] += gv * w11;
                }
            }
        }
    }
}

/// Orthonormal DCT-II matrix of size `n` (rows index frequency).
pub fn dct_matrix(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    let norm0 = (1.0 / n as f64).sqrt();
    let norm = (2.0 / n as f64).sqrt();
    for k in 0..n {
        let s = if k == 0 { norm0 } else { norm };
        for j in 0..n {
            m[k * n + j] =
                s * (std::f64::consts::PI * (2.0 * j as f64 + 1.0) * k as f64 / (2.0 * n as f64))
                    .cos();
        }
    }
    m
}

/// Apply an `n x n` matrix along one axis of a contiguous tensor.
///
/// The tensor is viewed as `[outer, n, inner]`; `transpose` applies the
/// matrix transposed (the inverse for orthonormal transforms).
pub fn apply_axis_matrix<S: Scalar>(
    x: &[S],
    outer: usize,
    n: usize,
    inner: usize,
    m: &[f64],
    transpose: bool,
    out: &mut [S],
) {
    let block = n * inner;
    out.par_chunks_mut(block)
        .zip(x.par_chunks(block))
        .for_each(|(ob, xb)| {
            ob.fill(S::zero());
            for k in 0..n {
                let orow = &mut ob[k * inner..(k + 1) * inner];
                for j in 0..n {
                    let coeff = if transpose { m[j * n + k] } else { m[k * n + j] };
                    let coeff = S::from_f(coeff);
                    let xrow = &xb[j * inner..(j + 1) * inner];
                    for (o, &xv) in orow.iter_mut().zip(xrow) {
                        *o = *o + coeff * xv;
                    }
                }
            }
        });
    debug_assert_eq!(outer * block, x.len());
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dct_matrix_is_orthonormal() {
        for n in [1usize, 2, 3, 8, 16] {
            let m = dct_matrix(n);
            for a in 0..n {
                for b in 0..n {
                    let dot: f64 = (0..n).map(|j| m[a * n + j] * m[b * n + j]).sum();
                    let expect = if a == b { 1.0 } else { 0.0 };
                    assert!((dot - expect).abs() < 1e-12, "n={n} a={a} b={b} dot={dot}");
                }
            }
        }
    }

    #[test]
    fn conv_identity_kernel_passes_through() {
        // 1x1 "kernel" embedded in a 3x3 kernel at the center.
        let d = ConvDims {
            frames: 1,
            w: 4,
            h: 4,
            cin: 2,
            cout: 2,
            k: 3,
        };
        let mut w = vec![0.0f64; d.cout * d.k * d.k * d.cin];
        for c in 0..2 {
            w[((c * d.k + 1) * d.k + 1) * d.cin + c] = 1.0;
        }
        let x: Vec<f64> = (0..d.frames * d.w * d.h * d.cin).map(|i| i as f64 * 0.1).collect();
        let mut out = vec![0.0; x.len()];
        conv2d_forward(&x, &w, &[0.0, 0.0], &d, &mut out);
        for (a, b) in x.iter().zip(&out) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn resize_identity_when_same_dims() {
        let x: Vec<f64> = (0..2 * 3 * 3 * 2).map(|i| i as f64).collect();
        let mut out = vec![0.0; x.len()];
        resize_forward(&x, 2, (3, 3), (3, 3), 2, &mut out);
        assert_eq!(x, out);
    }
}
