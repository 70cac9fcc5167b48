//! Reverse-mode automatic differentiation over dynamically shaped tensors.
//!
//! A [`Tape`] records every operation of a forward pass as a node in a
//! Wengert list; [`Tape::backward`] walks the list in reverse and accumulates
//! gradients. Shape conventions used throughout the crate:
//!
//! * video activations: `[B, T, W, H, C]` (channels innermost)
//! * per-sample vectors: `[B, D]`
//! * scalars: `[1]`
//! * convolution weights: `[Cout, K, K, Cin]`, bias `[Cout]`
//! * linear weights: `[In, Out]`, bias `[Out]`

use ndarray::{ArrayD, IxDyn};

use super::kernels::{self, ConvDims};
use super::kernels_fft;
use super::scalar::Scalar;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

struct Node<S: Scalar> {
    value: ArrayD<S>,
    requires_grad: bool,
    op: Op<S>,
}

enum Op<S: Scalar> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Var,
        k: usize,
    },
    Tanh {
        x: Var,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<S>,
        inv_std: Vec<S>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<S>,
        inv_std: Vec<S>,
    },
    SoftmaxLast {
        x: Var,
    },
    MeanPoolTwh {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    ConcatLast {
        a: Var,
        b: Var,
    },
    BroadcastConcatVec {
        x: Var,
        v: Var,
    },
    MaskDotMsg {
        mask: Var,
        msg: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: S,
    },
    Clamp {
        x: Var,
        lo: S,
        hi: S,
    },
    Crop {
        x: Var,
        w0: usize,
        h0: usize,
    },
    Resize {
        x: Var,
    },
    ChannelAffine {
        x: Var,
        m: [S; 9],
    },
    Dct3 {
        x: Var,
        inverse: bool,
    },
    MulConstMask {
        x: Var,
        mask: ArrayD<S>,
    },
    BceLogitsMean {
        logits: Var,
        targets: ArrayD<S>,
    },
    MeanAll {
        x: Var,
    },
    SumScaled {
        terms: Vec<(Var, S)>,
    },
    StraightThrough {
        x: Var,
    },
}

/// Gradients produced by a backward pass, indexed by [`Var`].
pub struct Grads<S: Scalar> {
    g: Vec<Option<ArrayD<S>>>,
}

impl<S: Scalar> Grads<S> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<S>> {
        self.g[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<S>> {
        self.g[v.0].take()
    }
}

fn accumulate<S: Scalar>(slot: &mut Option<ArrayD<S>>, delta: ArrayD<S>) {
    match slot {
        None => *slot = Some(delta),
        Some(acc) => *acc += &delta,
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &ArrayD<S> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> S {
        let a = &self.nodes[v.0].value;
        debug_assert_eq!(a.len(), 1);
        *a.iter().next().expect("scalar node")
    }

    fn push(&mut self, value: ArrayD<S>, requires_grad: bool, op: Op<S>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf with gradient tracking (model parameters).
    pub fn param(&mut self, data: ArrayD<S>) -> Var {
        self.push(data, true, Op::Leaf)
    }

    /// Leaf without gradient tracking (inputs, frozen parameters).
    pub fn constant(&mut self, data: ArrayD<S>) -> Var {
        self.push(data, false, Op::Leaf)
    }

    /// Spatial convolution with zero padding `(k-1)/2`, stride 1, applied to
    /// every frame of `[B, T, W, H, Cin]` independently.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, k: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 5, "conv2d expects [B,T,W,H,C]");
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 4, "conv weights are [Cout,K,K,Cin]");
        assert_eq!(ws[1], k);
        assert_eq!(ws[2], k);
        assert_eq!(
            ws[3], xs[4],
            "input depth {} does not match kernel depth {}",
            xs[4], ws[3]
        );
        let d = ConvDims {
            frames: xs[0] * xs[1],
            w: xs[2],
            h: xs[3],
            cin: xs[4],
            cout: ws[0],
            k,
        };
        let mut out = ArrayD::zeros(IxDyn(&[xs[0], xs[1], xs[2], xs[3], d.cout]));
        if kernels_fft::fft_worthwhile(&d) {
            kernels_fft::conv2d_forward_fft(
                self.value(x).as_slice().unwrap(),
                self.value(w).as_slice().unwrap(),
                self.value(b).as_slice().unwrap(),
                &d,
                out.as_slice_mut().unwrap(),
            );
        } else {
            kernels::conv2d_forward(
                self.value(x).as_slice().unwrap(),
                self.value(w).as_slice().unwrap(),
                self.value(b).as_slice().unwrap(),
                &d,
                out.as_slice_mut().unwrap(),
            );
        }
        let rg = self.requires(x) || self.requires(w) || self.requires(b);
        self.push(out, rg, Op::Conv { x, w, b, k })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v.tanh());
        let rg = self.requires(x);
        self.push(out, rg, Op::Tanh { x })
    }

    /// Batch normalization over all axes but the channel axis, using batch
    /// statistics. Returns the output plus the batch mean/variance so the
    /// caller can update running statistics.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> (Var, Vec<S>, Vec<S>) {
        let shape = self.value(x).shape().to_vec();
        let c = *shape.last().unwrap();
        let n = self.value(x).len() / c;
        let nf = S::from_f(n as f64);
        let xs = self.value(x).as_slice().unwrap();
        let mut mean = kernels::channel_sums(xs, c);
        for m in &mut mean {
            *m = *m / nf;
        }
        let var = {
            let mut v = vec![S::zero(); c];
            for px in xs.chunks_exact(c) {
                for ((vv, &xv), &m) in v.iter_mut().zip(px).zip(&mean) {
                    let d = xv - m;
                    *vv = *vv + d * d;
                }
            }
            for vv in &mut v {
                *vv = *vv / nf;
            }
            v
        };
        let inv_std: Vec<S> = var
            .iter()
            .map(|&v| S::one() / (v + S::from_f(eps)).sqrt())
            .collect();
        let g = self.value(gamma).as_slice().unwrap();
        let b = self.value(beta).as_slice().unwrap();
        let mut out = ArrayD::zeros(IxDyn(&shape));
        {
            let os = out.as_slice_mut().unwrap();
            for (opx, xpx) in os.chunks_exact_mut(c).zip(xs.chunks_exact(c)) {
                for i in 0..c {
                    opx[i] = g[i] * (xpx[i] - mean[i]) * inv_std[i] + b[i];
                }
            }
        }
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        let node = self.push(
            out,
            rg,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                mean: mean.clone(),
                inv_std: inv_std.clone(),
            },
        );
        (node, mean, var)
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[S],
        running_var: &[S],
        eps: f64,
    ) -> Var {
        let shape = self.value(x).shape().to_vec();
        let c = *shape.last().unwrap();
        let inv_std: Vec<S> = running_var
            .iter()
            .map(|&v| S::one() / (v + S::from_f(eps)).sqrt())
            .collect();
        let g = self.value(gamma).as_slice().unwrap();
        let b = self.value(beta).as_slice().unwrap();
        let xs = self.value(x).as_slice().unwrap();
        let mut out = ArrayD::zeros(IxDyn(&shape));
        {
            let os = out.as_slice_mut().unwrap();
            for (opx, xpx) in os.chunks_exact_mut(c).zip(xs.chunks_exact(c)) {
                for i in 0..c {
                    opx[i] = g[i] * (xpx[i] - running_mean[i]) * inv_std[i] + b[i];
                }
            }
        }
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        self.push(
            out,
            rg,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                inv_std,
            },
        )
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Var {
        let shape = self.value(x).shape().to_vec();
        let c = *shape.last().unwrap();
        let xs = self.value(x).as_slice().unwrap();
        let mut out = ArrayD::zeros(IxDyn(&shape));
        {
            let os = out.as_slice_mut().unwrap();
            for (opx, xpx) in os.chunks_exact_mut(c).zip(xs.chunks_exact(c)) {
                let mut mx = xpx[0];
                for &v in xpx.iter() {
                    if v > mx {
                        mx = v;
                    }
                }
                let mut sum = S::zero();
                for i in 0..c {
                    let e = (xpx[i] - mx).exp();
                    opx[i] = e;
                    sum = sum + e;
                }
                let inv = S::one() / sum;
                for o in opx.iter_mut() {
                    *o = *o * inv;
                }
            }
        }
        let rg = self.requires(x);
        self.push(out, rg, Op::SoftmaxLast { x })
    }

    /// Mean over the T, W and H axes: `[B, T, W, H, C]` -> `[B, C]`.
    pub fn mean_pool_twh(&mut self, x: Var) -> Var {
        let s = self.value(x).shape().to_vec();
        assert_eq!(s.len(), 5);
        let (bsz, c) = (s[0], s[4]);
        let per = s[1] * s[2] * s[3];
        let inv = S::from_f(1.0 / per as f64);
        let xs = self.value(x).as_slice().unwrap();
        let mut out = ArrayD::zeros(IxDyn(&[bsz, c]));
        {
            let os = out.as_slice_mut().unwrap();
            for bi in 0..bsz {
                let sums = kernels::channel_sums(&xs[bi * per * c..(bi + 1) * per * c], c);
                for i in 0..c {
                    os[bi * c + i] = sums[i] * inv;
                }
            }
        }
        let rg = self.requires(x);
        self.push(out, rg, Op::MeanPoolTwh { x })
    }

    /// Affine map over the last axis: `[..., In] -> [..., Out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 2);
        let (din, dout) = (ws[0], ws[1]);
        let mut shape = self.value(x).shape().to_vec();
        assert_eq!(
            *shape.last().unwrap(),
            din,
            "linear input dim mismatch: {} vs {}",
            shape.last().unwrap(),
            din
        );
        *shape.last_mut().unwrap() = dout;
        let rows = self.value(x).len() / din;
        let xs = self.value(x).as_slice().unwrap();
        let wv = self.value(w).as_slice().unwrap();
        let bv = self.value(b).as_slice().unwrap();
        let mut out = ArrayD::zeros(IxDyn(&shape));
        {
            let os = out.as_slice_mut().unwrap();
            for r in 0..rows {
                let xr = &xs[r * din..(r + 1) * din];
                let or = &mut os[r * dout..(r + 1) * dout];
                or.copy_from_slice(bv);
                for (i, &xv) in xr.iter().enumerate() {
                    let wr = &wv[i * dout..(i + 1) * dout];
                    for (o, &wvv) in or.iter_mut().zip(wr) {
                        *o = *o + xv * wvv;
                    }
                }
            }
        }
        let rg = self.requires(x) || self.requires(w) || self.requires(b);
        self.push(out, rg, Op::Linear { x, w, b })
    }

    /// Concatenate two tensors along the last axis.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Var {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        assert_eq!(sa[..sa.len() - 1], sb[..sb.len() - 1]);
        let (ca, cb) = (*sa.last().unwrap(), *sb.last().unwrap());
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = ca + cb;
        let av = self.value(a).as_slice().unwrap();
        let bv = self.value(b).as_slice().unwrap();
        let mut out = ArrayD::zeros(IxDyn(&shape));
        {
            let os = out.as_slice_mut().unwrap();
            let c = ca + cb;
            for (i, opx) in os.chunks_exact_mut(c).enumerate() {
                opx[..ca].copy_from_slice(&av[i * ca..(i + 1) * ca]);
                opx[ca..].copy_from_slice(&bv[i * cb..(i + 1) * cb]);
            }
        }
        let rg = self.requires(a) || self.requires(b);
        self.push(out, rg, Op::ConcatLast { a, b })
    }

    /// Concatenate a per-sample vector `[B, Dv]` onto every pixel of
    /// `[B, T, W, H, C]`, yielding `[B, T, W, H, C + Dv]`.
    pub fn broadcast_concat_vec(&mut self, x: Var, v: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        let vs = self.value(v).shape().to_vec();
        assert_eq!(xs.len(), 5);
        assert_eq!(vs.len(), 2);
        assert_eq!(xs[0], vs[0]);
        let (c, dv) = (xs[4], vs[1]);
        let per = xs[1] * xs[2] * xs[3];
        let shape = [xs[0], xs[1], xs[2], xs[3], c + dv];
        let xv = self.value(x).as_slice().unwrap();
        let vv = self.value(v).as_slice().unwrap();
        let mut out = ArrayD::zeros(IxDyn(&shape));
        {
            let os = out.as_slice_mut().unwrap();
            let cc = c + dv;
            for bi in 0..xs[0] {
                let vrow = &vv[bi * dv..(bi + 1) * dv];
                for p in 0..per {
                    let o = &mut os[(bi * per + p) * cc..(bi * per + p + 1) * cc];
                    o[..c].copy_from_slice(&xv[(bi * per + p) * c..(bi * per + p + 1) * c]);
                    o[c..].copy_from_slice(vrow);
                }
            }
        }
        let rg = self.requires(x) || self.requires(v);
        self.push(out, rg, Op::BroadcastConcatVec { x, v })
    }

    /// Per-pixel inner product of a `[B, T, W, H, D]` mask with a `[B, D]`
    /// message, producing the compact `[B, T, W, H, 1]` data tensor.
    pub fn mask_dot_msg(&mut self, mask: Var, msg: Var) -> Var {
        let ms = self.value(mask).shape().to_vec();
        let vs = self.value(msg).shape().to_vec();
        assert_eq!(ms.len(), 5);
        assert_eq!(vs, [ms[0], ms[4]]);
        let d = ms[4];
        let per = ms[1] * ms[2] * ms[3];
        let mv = self.value(mask).as_slice().unwrap();
        let gv = self.value(msg).as_slice().unwrap();
        let mut out = ArrayD::zeros(IxDyn(&[ms[0], ms[1], ms[2], ms[3], 1]));
        {
            let os = out.as_slice_mut().unwrap();
            for bi in 0..ms[0] {
                let msg_row = &gv[bi * d..(bi + 1) * d];
                for p in 0..per {
                    let m = &mv[(bi * per + p) * d..(bi * per + p + 1) * d];
                    let mut acc = S::zero();
                    for i in 0..d {
                        acc = acc + m[i] * msg_row[i];
                    }
                    os[bi * per + p] = acc;
                }
            }
        }
        let rg = self.requires(mask) || self.requires(msg);
        self.push(out, rg, Op::MaskDotMsg { mask, msg })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let out = self.value(a) * self.value(b);
        let rg = self.requires(a) || self.requires(b);
        self.push(out, rg, Op::Mul { a, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let out = self.value(a) + self.value(b);
        let rg = self.requires(a) || self.requires(b);
        self.push(out, rg, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let out = self.value(a) - self.value(b);
        let rg = self.requires(a) || self.requires(b);
        self.push(out, rg, Op::Sub { a, b })
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let out = self.value(x).mapv(|v| v * c);
        let rg = self.requires(x);
        self.push(out, rg, Op::Scale { x, c })
    }

    pub fn clamp(&mut self, x: Var, lo: S, hi: S) -> Var {
        let out = self.value(x).mapv(|v| v.max(lo).min(hi));
        let rg = self.requires(x);
        self.push(out, rg, Op::Clamp { x, lo, hi })
    }

    /// Extract the spatial window `[w0..w0+ow, h0..h0+oh]` from every frame.
    pub fn crop(&mut self, x: Var, w0: usize, h0: usize, ow: usize, oh: usize) -> Var {
        let s = self.value(x).shape().to_vec();
        assert_eq!(s.len(), 5);
        assert!(w0 + ow <= s[2] && h0 + oh <= s[3]);
        let c = s[4];
        let xs = self.value(x).as_slice().unwrap();
        let mut out = ArrayD::zeros(IxDyn(&[s[0], s[1], ow, oh, c]));
        {
            let os = out.as_slice_mut().unwrap();
            let frames = s[0] * s[1];
            let frame_in = s[2] * s[3] * c;
            let row_in = s[3] * c;
            let frame_out = ow * oh * c;
            for f in 0..frames {
                for i in 0..ow {
                    let src = f * frame_in + (w0 + i) * row_in + h0 * c;
                    let dst = f * frame_out + i * oh * c;
                    os[dst..dst + oh * c].copy_from_slice(&xs[src..src + oh * c]);
                }
            }
        }
        let rg = self.requires(x);
        self.push(out, rg, Op::Crop { x, w0, h0 })
    }

    /// Bilinear resample of every frame to `(ow, oh)` with corner-aligned
    /// sampling.
    pub fn resize_bilinear(&mut self, x: Var, ow: usize, oh: usize) -> Var {
        let s = self.value(x).shape().to_vec();
        assert_eq!(s.len(), 5);
        let mut out = ArrayD::zeros(IxDyn(&[s[0], s[1], ow, oh, s[4]]));
        kernels::resize_forward(
            self.value(x).as_slice().unwrap(),
            s[0] * s[1],
            (s[2], s[3]),
            (ow, oh),
            s[4],
            out.as_slice_mut().unwrap(),
        );
        let rg = self.requires(x);
        self.push(out, rg, Op::Resize { x })
    }

    /// Per-pixel 3x3 affine on the channel axis: `y = M x + off`.
    /// `m` is row-major 3x3; the offset rides in as a fourth column via
    /// `off`, kept separate for clarity.
    pub fn channel_affine3(&mut self, x: Var, m: [S; 9], off: [S; 3]) -> Var {
        let s = self.value(x).shape().to_vec();
        assert_eq!(*s.last().unwrap(), 3);
        let xs = self.value(x).as_slice().unwrap();
        let mut out = ArrayD::zeros(IxDyn(&s));
        {
            let os = out.as_slice_mut().unwrap();
            for (opx, xpx) in os.chunks_exact_mut(3).zip(xs.chunks_exact(3)) {
                for i in 0..3 {
                    opx[i] =
                        m[i * 3] * xpx[0] + m[i * 3 + 1] * xpx[1] + m[i * 3 + 2] * xpx[2] + off[i];
                }
            }
        }
        let rg = self.requires(x);
        self.push(out, rg, Op::ChannelAffine { x, m })
    }

    /// Orthonormal 3-D DCT-II (or its inverse) over the (T, W, H) axes of
    /// every `[b, .., c]` volume.
    pub fn dct3(&mut self, x: Var, inverse: bool) -> Var {
        let out = dct3_apply(self.value(x), inverse);
        let rg = self.requires(x);
        self.push(out, rg, Op::Dct3 { x, inverse })
    }

    /// Elementwise product with a constant mask (no gradient for the mask).
    pub fn mul_const_mask(&mut self, x: Var, mask: ArrayD<S>) -> Var {
        assert_eq!(self.value(x).shape(), mask.shape());
        let out = self.value(x) * &mask;
        let rg = self.requires(x);
        self.push(out, rg, Op::MulConstMask { x, mask })
    }

    /// Mean binary cross-entropy from logits against constant targets in
    /// {0, 1}: `mean(softplus(l) - t * l)`.
    pub fn bce_logits_mean(&mut self, logits: Var, targets: ArrayD<S>) -> Var {
        assert_eq!(self.value(logits).shape(), targets.shape());
        let n = targets.len();
        let mut total = S::zero();
        for (&l, &t) in self.value(logits).iter().zip(targets.iter()) {
            total = total + softplus(l) - t * l;
        }
        let mean = total / S::from_f(n as f64);
        let out = ArrayD::from_elem(IxDyn(&[1]), mean);
        let rg = self.requires(logits);
        self.push(out, rg, Op::BceLogitsMean { logits, targets })
    }

    /// Mean over every element, producing a scalar.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let mean = self.value(x).iter().copied().sum::<S>() / S::from_f(n as f64);
        let out = ArrayD::from_elem(IxDyn(&[1]), mean);
        let rg = self.requires(x);
        self.push(out, rg, Op::MeanAll { x })
    }

    /// Weighted sum of scalar nodes.
    pub fn sum_scaled(&mut self, terms: Vec<(Var, S)>) -> Var {
        let mut total = S::zero();
        for &(v, c) in &terms {
            total = total + self.scalar_value(v) * c;
        }
        let out = ArrayD::from_elem(IxDyn(&[1]), total);
        let rg = terms.iter().any(|&(v, _)| self.requires(v));
        self.push(out, rg, Op::SumScaled { terms })
    }

    /// Straight-through estimator: the forward value is `replacement`
    /// (typically the output of a non-differentiable codec applied to `x`),
    /// while the backward pass treats the operation as the identity on `x`.
    pub fn straight_through(&mut self, x: Var, replacement: ArrayD<S>) -> Var {
        assert_eq!(self.value(x).shape(), replacement.shape());
        let rg = self.requires(x);
        self.push(replacement, rg, Op::StraightThrough { x })
    }

    /// Reverse pass from a scalar root seeded with 1.
    pub fn backward(&mut self, root: Var) -> Grads<S> {
        let mut grads: Vec<Option<ArrayD<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        debug_assert_eq!(self.nodes[root.0].value.len(), 1);
        grads[root.0] = Some(ArrayD::from_elem(IxDyn(&[1]), S::one()));
        self.backward_from(root, &mut grads);
        Grads { g: grads }
    }

    /// Reverse pass with an explicit scalar seed (e.g. -1 for a negated loss).
    pub fn backward_seeded(&mut self, root: Var, seed: S) -> Grads<S> {
        let mut grads: Vec<Option<ArrayD<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::from_elem(IxDyn(&[1]), seed));
        self.backward_from(root, &mut grads);
        Grads { g: grads }
    }

    fn backward_from(&self, root: Var, grads: &mut [Option<ArrayD<S>>]) {
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue; // keep leaf grads for the caller
            }
            let Some(g) = grads[i].take() else { continue };
            self.dispatch_backward(i, &g, grads);
        }
    }

    fn dispatch_backward(&self, i: usize, g: &ArrayD<S>, grads: &mut [Option<ArrayD<S>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, k } => {
                let xs = self.value(*x).shape().to_vec();
                let ws = self.value(*w).shape().to_vec();
                let d = ConvDims {
                    frames: xs[0] * xs[1],
                    w: xs[2],
                    h: xs[3],
                    cin: xs[4],
                    cout: ws[0],
                    k: *k,
                };
                let gs = g.as_slice().unwrap();
                if self.requires(*x) {
                    let mut gx = ArrayD::zeros(IxDyn(&xs));
                    if kernels_fft::fft_worthwhile(&d) {
                        kernels_fft::conv2d_backward_input_fft(
                            gs,
                            self.value(*w).as_slice().unwrap(),
                            &d,
                            gx.as_slice_mut().unwrap(),
                        );
                    } else {
                        kernels::conv2d_backward_input(
                            gs,
                            self.value(*w).as_slice().unwrap(),
                            &d,
                            gx.as_slice_mut().unwrap(),
                        );
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                if self.requires(*w) || self.requires(*b) {
                    let mut gw = ArrayD::zeros(IxDyn(&ws));
                    let mut gb = ArrayD::zeros(IxDyn(&[d.cout]));
                    if kernels_fft::fft_worthwhile(&d) {
                        kernels_fft::conv2d_backward_params_fft(
                            self.value(*x).as_slice().unwrap(),
                            gs,
                            &d,
                            gw.as_slice_mut().unwrap(),
                            gb.as_slice_mut().unwrap(),
                        );
                    } else {
                        kernels::conv2d_backward_params(
                            self.value(*x).as_slice().unwrap(),
                            gs,
                            &d,
                            gw.as_slice_mut().unwrap(),
                            gb.as_slice_mut().unwrap(),
                        );
                    }
                    if self.requires(*w) {
                        accumulate(&mut grads[w.0], gw);
                    }
                    if self.requires(*b) {
                        accumulate(&mut grads[b.0], gb);
                    }
                }
            }
            Op::Tanh { x } => {
                if self.requires(*x) {
                    let one = S::one();
                    let mut gx = node.value.mapv(|y| one - y * y);
                    gx *= g;
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let c = mean.len();
                let xs = self.value(*x).as_slice().unwrap();
                let gs = g.as_slice().unwrap();
                let gmv = self.value(*gamma).as_slice().unwrap();
                let n = xs.len() / c;
                let nf = S::from_f(n as f64);
                // dbeta = sum g; dgamma = sum g * xhat
                let mut dbeta = vec![S::zero(); c];
                let mut dgamma = vec![S::zero(); c];
                for (gp, xp) in gs.chunks_exact(c).zip(xs.chunks_exact(c)) {
                    for k in 0..c {
                        let xhat = (xp[k] - mean[k]) * inv_std[k];
                        dbeta[k] = dbeta[k] + gp[k];
                        dgamma[k] = dgamma[k] + gp[k] * xhat;
                    }
                }
                if self.requires(*x) {
                    let mut gx = ArrayD::zeros(IxDyn(self.value(*x).shape()));
                    {
                        let gxs = gx.as_slice_mut().unwrap();
                        let mut mean_g = vec![S::zero(); c];
                        let mut mean_gx = vec![S::zero(); c];
                        for k in 0..c {
                            mean_g[k] = dbeta[k] / nf;
                            mean_gx[k] = dgamma[k] / nf;
                        }
                        for ((gxp, gp), xp) in gxs
                            .chunks_exact_mut(c)
                            .zip(gs.chunks_exact(c))
                            .zip(xs.chunks_exact(c))
                        {
                            for k in 0..c {
                                let xhat = (xp[k] - mean[k]) * inv_std[k];
                                gxp[k] = gmv[k]
                                    * inv_std[k]
                                    * (gp[k] - mean_g[k] - xhat * mean_gx[k]);
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                if self.requires(*gamma) {
                    accumulate(&mut grads[gamma.0], ArrayD::from_shape_vec(IxDyn(&[dgamma.len()]), dgamma).unwrap());
                }
                if self.requires(*beta) {
                    accumulate(&mut grads[beta.0], ArrayD::from_shape_vec(IxDyn(&[dbeta.len()]), dbeta).unwrap());
                }
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let c = mean.len();
                let xs = self.value(*x).as_slice().unwrap();
                let gs = g.as_slice().unwrap();
                let gmv = self.value(*gamma).as_slice().unwrap();
                if self.requires(*x) {
                    let mut gx = ArrayD::zeros(IxDyn(self.value(*x).shape()));
                    {
                        let gxs = gx.as_slice_mut().unwrap();
                        for (gxp, gp) in gxs.chunks_exact_mut(c).zip(gs.chunks_exact(c)) {
                            for k in 0..c {
                                gxp[k] = gp[k] * gmv[k] * inv_std[k];
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                if self.requires(*gamma) || self.requires(*beta) {
                    let mut dgamma = vec![S::zero(); c];
                    let mut dbeta = vec![S::zero(); c];
                    for (gp, xp) in gs.chunks_exact(c).zip(xs.chunks_exact(c)) {
                        for k in 0..c {
                            let xhat = (xp[k] - mean[k]) * inv_std[k];
                            dgamma[k] = dgamma[k] + gp[k] * xhat;
                            dbeta[k] = dbeta[k] + gp[k];
                        }
                    }
                    if self.requires(*gamma) {
                        accumulate(&mut grads[gamma.0], ArrayD::from_shape_vec(IxDyn(&[dgamma.len()]), dgamma).unwrap());
                    }
                    if self.requires(*beta) {
                        accumulate(&mut grads[beta.0], ArrayD::from_shape_vec(IxDyn(&[dbeta.len()]), dbeta).unwrap());
                    }
                }
            }
            Op::SoftmaxLast { x } => {
                if self.requires(*x) {
                    let c = *node.value.shape().last().unwrap();
                    let ys = node.value.as_slice().unwrap();
                    let gs = g.as_slice().unwrap();
                    let mut gx = ArrayD::zeros(IxDyn(node.value.shape()));
                    {
                        let gxs = gx.as_slice_mut().unwrap();
                        for ((gxp, gp), yp) in gxs
                            .chunks_exact_mut(c)
                            .zip(gs.chunks_exact(c))
                            .zip(ys.chunks_exact(c))
                        {
                            let mut dot = S::zero();
                            for k in 0..c {
                                dot = dot + gp[k] * yp[k];
                            }
                            for k in 0..c {
                                gxp[k] = yp[k] * (gp[k] - dot);
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::MeanPoolTwh { x } => {
                if self.requires(*x) {
                    let s = self.value(*x).shape().to_vec();
                    let per = s[1] * s[2] * s[3];
                    let c = s[4];
                    let inv = S::from_f(1.0 / per as f64);
                    let gs = g.as_slice().unwrap();
                    let mut gx = ArrayD::zeros(IxDyn(&s));
                    {
                        let gxs = gx.as_slice_mut().unwrap();
                        for bi in 0..s[0] {
                            let grow = &gs[bi * c..(bi + 1) * c];
                            for p in 0..per {
                                let o = &mut gxs[(bi * per + p) * c..(bi * per + p + 1) * c];
                                for k in 0..c {
                                    o[k] = grow[k] * inv;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::Linear { x, w, b } => {
                let ws = self.value(*w).shape().to_vec();
                let (din, dout) = (ws[0], ws[1]);
                let rows = self.value(*x).len() / din;
                let xs = self.value(*x).as_slice().unwrap();
                let wv = self.value(*w).as_slice().unwrap();
                let gs = g.as_slice().unwrap();
                if self.requires(*x) {
                    let mut gx = ArrayD::zeros(IxDyn(self.value(*x).shape()));
                    {
                        let gxs = gx.as_slice_mut().unwrap();
                        for r in 0..rows {
                            let gr = &gs[r * dout..(r + 1) * dout];
                            let xr = &mut gxs[r * din..(r + 1) * din];
                            for i in 0..din {
                                let wr = &wv[i * dout..(i + 1) * dout];
                                let mut acc = S::zero();
                                for k in 0..dout {
                                    acc = acc + gr[k] * wr[k];
                                }
                                xr[i] = acc;
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                if self.requires(*w) {
                    let mut gw = ArrayD::zeros(IxDyn(&ws));
                    {
                        let gws = gw.as_slice_mut().unwrap();
                        for r in 0..rows {
                            let gr = &gs[r * dout..(r + 1) * dout];
                            let xr = &xs[r * din..(r + 1) * din];
                            for (i, &xv) in xr.iter().enumerate() {
                                let wr = &mut gws[i * dout..(i + 1) * dout];
                                for (o, &gv) in wr.iter_mut().zip(gr) {
                                    *o = *o + xv * gv;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads[w.0], gw);
                }
                if self.requires(*b) {
                    let mut gb = vec![S::zero(); dout];
                    for r in 0..rows {
                        for k in 0..dout {
                            gb[k] = gb[k] + gs[r * dout + k];
                        }
                    }
                    accumulate(&mut grads[b.0], ArrayD::from_shape_vec(IxDyn(&[gb.len()]), gb).unwrap());
                }
            }
            Op::ConcatLast { a, b } => {
                let ca = *self.value(*a).shape().last().unwrap();
                let cb = *self.value(*b).shape().last().unwrap();
                let c = ca + cb;
                let gs = g.as_slice().unwrap();
                if self.requires(*a) {
                    let mut ga = ArrayD::zeros(IxDyn(self.value(*a).shape()));
                    {
                        let gas = ga.as_slice_mut().unwrap();
                        for (i, gp) in gs.chunks_exact(c).enumerate() {
                            gas[i * ca..(i + 1) * ca].copy_from_slice(&gp[..ca]);
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                if self.requires(*b) {
                    let mut gb = ArrayD::zeros(IxDyn(self.value(*b).shape()));
                    {
                        let gbs = gb.as_slice_mut().unwrap();
                        for (i, gp) in gs.chunks_exact(c).enumerate() {
                            gbs[i * cb..(i + 1) * cb].copy_from_slice(&gp[ca..]);
                        }
                    }
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::BroadcastConcatVec { x, v } => {
                let xs = self.value(*x).shape().to_vec();
                let vs = self.value(*v).shape().to_vec();
                let (c, dv) = (xs[4], vs[1]);
                let cc = c + dv;
                let per = xs[1] * xs[2] * xs[3];
                let gs = g.as_slice().unwrap();
                if self.requires(*x) {
                    let mut gx = ArrayD::zeros(IxDyn(&xs));
                    {
                        let gxs = gx.as_slice_mut().unwrap();
                        for (i, gp) in gs.chunks_exact(cc).enumerate() {
                            gxs[i * c..(i + 1) * c].copy_from_slice(&gp[..c]);
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                if self.requires(*v) {
                    let mut gv = ArrayD::zeros(IxDyn(&vs));
                    {
                        let gvs = gv.as_slice_mut().unwrap();
                        for bi in 0..xs[0] {
                            for p in 0..per {
                                let gp = &gs[(bi * per + p) * cc..(bi * per + p + 1) * cc];
                                for k in 0..dv {
                                    gvs[bi * dv + k] = gvs[bi * dv + k] + gp[c + k];
                                }
                            }
                        }
                    }
                    accumulate(&mut grads[v.0], gv);
                }
            }
            Op::MaskDotMsg { mask, msg } => {
                let ms = self.value(*mask).shape().to_vec();
                let d = ms[4];
                let per = ms[1] * ms[2] * ms[3];
                let gs = g.as_slice().unwrap();
                let msg_v = self.value(*msg).as_slice().unwrap();
                if self.requires(*mask) {
                    let mut gm = ArrayD::zeros(IxDyn(&ms));
                    {
                        let gms = gm.as_slice_mut().unwrap();
                        for bi in 0..ms[0] {
                            let msg_row = &msg_v[bi * d..(bi + 1) * d];
                            for p in 0..per {
                                let gv = gs[bi * per + p];
                                let row = &mut gms[(bi * per + p) * d..(bi * per + p + 1) * d];
                                for k in 0..d {
                                    row[k] = gv * msg_row[k];
                                }
                            }
                        }
                    }
                    accumulate(&mut grads[mask.0], gm);
                }
                if self.requires(*msg) {
                    let mask_v = self.value(*mask).as_slice().unwrap();
                    let mut gv = ArrayD::zeros(IxDyn(&[ms[0], d]));
                    {
                        let gvs = gv.as_slice_mut().unwrap();
                        for bi in 0..ms[0] {
                            for p in 0..per {
                                let gval = gs[bi * per + p];
                                let m = &mask_v[(bi * per + p) * d..(bi * per + p + 1) * d];
                                for k in 0..d {
                                    gvs[bi * d + k] = gvs[bi * d + k] + gval * m[k];
                                }
                            }
                        }
                    }
                    accumulate(&mut grads[msg.0], gv);
                }
            }
            Op::Mul { a, b } => {
                if self.requires(*a) {
                    accumulate(&mut grads[a.0], g * self.value(*b));
                }
                if self.requires(*b) {
                    accumulate(&mut grads[b.0], g * self.value(*a));
                }
            }
            Op::Add { a, b } => {
                if self.requires(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.requires(*b) {
                    accumulate(&mut grads[b.0], g.clone());
                }
            }
            Op::Sub { a, b } => {
                if self.requires(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.requires(*b) {
                    accumulate(&mut grads[b.0], g.mapv(|v| -v));
                }
            }
            Op::Scale { x, c } => {
                if self.requires(*x) {
                    let c = *c;
                    accumulate(&mut grads[x.0], g.mapv(|v| v * c));
                }
            }
            Op::Clamp { x, lo, hi } => {
                if self.requires(*x) {
                    let (lo, hi) = (*lo, *hi);
                    let xs = self.value(*x);
                    let mut gx = g.clone();
                    gx.zip_mut_with(xs, |gv, &xv| {
                        if xv < lo || xv > hi {
                            *gv = S::zero();
                        }
                    });
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::Crop { x, w0, h0 } => {
                if self.requires(*x) {
                    let s = self.value(*x).shape().to_vec();
                    let os = node.value.shape().to_vec();
                    let (ow, oh, c) = (os[2], os[3], os[4]);
                    let gs = g.as_slice().unwrap();
                    let mut gx = ArrayD::zeros(IxDyn(&s));
                    {
                        let gxs = gx.as_slice_mut().unwrap();
                        let frames = s[0] * s[1];
                        let frame_in = s[2] * s[3] * c;
                        let row_in = s[3] * c;
                        let frame_out = ow * oh * c;
                        for f in 0..frames {
                            for i in 0..ow {
                                let dst = f * frame_in + (w0 + i) * row_in + h0 * c;
                                let src = f * frame_out + i * oh * c;
                                gxs[dst..dst + oh * c].copy_from_slice(&gs[src..src + oh * c]);
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::Resize { x } => {
                if self.requires(*x) {
                    let s = self.value(*x).shape().to_vec();
                    let os = node.value.shape().to_vec();
                    let mut gx = ArrayD::zeros(IxDyn(&s));
                    kernels::resize_backward(
                        g.as_slice().unwrap(),
                        s[0] * s[1],
                        (s[2], s[3]),
                        (os[2], os[3]),
                        s[4],
                        gx.as_slice_mut().unwrap(),
                    );
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::ChannelAffine { x, m } => {
                if self.requires(*x) {
                    let gs = g.as_slice().unwrap();
                    let mut gx = ArrayD::zeros(IxDyn(self.value(*x).shape()));
                    {
                        let gxs = gx.as_slice_mut().unwrap();
                        for (gxp, gp) in gxs.chunks_exact_mut(3).zip(gs.chunks_exact(3)) {
                            for j in 0..3 {
                                gxp[j] = m[j] * gp[0] + m[3 + j] * gp[1] + m[6 + j] * gp[2];
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::Dct3 { x, inverse } => {
                if self.requires(*x) {
                    // Orthonormal transform: gradient is the opposite transform.
                    let gx = dct3_apply(g, !inverse);
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::MulConstMask { x, mask } => {
                if self.requires(*x) {
                    accumulate(&mut grads[x.0], g * mask);
                }
            }
            Op::BceLogitsMean { logits, targets } => {
                if self.requires(*logits) {
                    let n = targets.len();
                    let gscale = g.as_slice().unwrap()[0] / S::from_f(n as f64);
                    let mut gl = ArrayD::zeros(IxDyn(targets.shape()));
                    {
                        let gls = gl.as_slice_mut().unwrap();
                        let ls = self.value(*logits).as_slice().unwrap();
                        let ts = targets.as_slice().unwrap();
                        for k in 0..n {
                            gls[k] = gscale * (sigmoid(ls[k]) - ts[k]);
                        }
                    }
                    accumulate(&mut grads[logits.0], gl);
                }
            }
            Op::MeanAll { x } => {
                if self.requires(*x) {
                    let n = self.value(*x).len();
                    let gv = g.as_slice().unwrap()[0] / S::from_f(n as f64);
                    accumulate(
                        &mut grads[x.0],
                        ArrayD::from_elem(IxDyn(self.value(*x).shape()), gv),
                    );
                }
            }
            Op::SumScaled { terms } => {
                let gv = g.as_slice().unwrap()[0];
                for &(v, c) in terms {
                    if self.requires(v) {
                        accumulate(
                            &mut grads[v.0],
                            ArrayD::from_elem(IxDyn(&[1]), gv * c),
                        );
                    }
                }
            }
            Op::StraightThrough { x } => {
                if self.requires(*x) {
                    accumulate(&mut grads[x.0], g.clone());
                }
            }
        }
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

#[inline]
fn softplus<S: Scalar>(l: S) -> S {
    // max(l, 0) + ln(1 + exp(-|l|))
    l.max(S::zero()) + (S::one() + (-l.abs()).exp()).ln()
}

#[inline]
fn sigmoid<S: Scalar>(l: S) -> S {
    if l >= S::zero() {
        S::one() / (S::one() + (-l).exp())
    } else {
        let e = l.exp();
        e / (S::one() + e)
    }
}

/// Orthonormal 3-D DCT over axes (T, W, H) of a `[B, T, W, H, C]` tensor.
pub fn dct3_apply<S: Scalar>(x: &ArrayD<S>, inverse: bool) -> ArrayD<S> {
    let s = x.shape().to_vec();
    assert_eq!(s.len(), 5);
    let (b, t, w, h, c) = (s[0], s[1], s[2], s[3], s[4]);
    let mt = kernels::dct_matrix(t);
    let mw = kernels::dct_matrix(w);
    let mh = kernels::dct_matrix(h);
    let mut cur = x.as_slice().unwrap().to_vec();
    let mut tmp = vec![S::zero(); cur.len()];
    // axis T
    kernels::apply_axis_matrix(&cur, b, t, w * h * c, &mt, inverse, &mut tmp);
    std::mem::swap(&mut cur, &mut tmp);
    // axis W
    kernels::apply_axis_matrix(&cur, b * t, w, h * c, &mw, inverse, &mut tmp);
    std::mem::swap(&mut cur, &mut tmp);
    // axis H
    kernels::apply_axis_matrix(&cur, b * t * w, h, c, &mh, inverse, &mut tmp);
    std::mem::swap(&mut cur, &mut tmp);
    ArrayD::from_shape_vec(IxDyn(&s), cur).unwrap()
}
