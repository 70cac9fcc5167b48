//! Tensor building blocks: convolutional blocks (conv + tanh + batchnorm),
//! linear maps, pooling and parameter binding for tape passes.

use std::collections::HashMap;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;

use crate::autodiff::{Scalar, Tape, Var};

/// Spatial kernel size of every convolutional block.
pub const KERNEL_SIZE: usize = 11;
/// Batch-normalization stabilizer.
pub const BN_EPS: f64 = 1e-5;
/// Momentum for running-statistic updates.
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch-statistics behaviour of a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running statistics updated. Used by the party being
    /// optimized in the current phase.
    Train,
    /// Batch statistics without touching running statistics. Used when a
    /// network participates in another party's phase.
    Frozen,
    /// Running statistics; the inference path.
    Eval,
}

impl Mode {
    pub fn uses_batch_stats(self) -> bool {
        matches!(self, Mode::Train | Mode::Frozen)
    }
}

/// One tape pass: wraps the tape and deduplicates parameter leaves so a
/// module bound twice (the shared attention module, for instance) contributes
/// a single leaf whose gradient accumulates across both uses.
pub struct Pass<'a, S: Scalar> {
    pub tape: &'a mut Tape<S>,
    bound: HashMap<String, Var>,
    order: Vec<(String, Var)>,
}

impl<'a, S: Scalar> Pass<'a, S> {
    pub fn new(tape: &'a mut Tape<S>) -> Self {
        Pass {
            tape,
            bound: HashMap::new(),
            order: Vec::new(),
        }
    }

    /// Bind a parameter array as a tape leaf; `trainable` decides whether the
    /// backward pass will produce a gradient for it.
    pub fn bind(&mut self, path: &str, data: &ArrayD<S>, trainable: bool) -> Var {
        if let Some(&v) = self.bound.get(path) {
            return v;
        }
        let var = if trainable {
            self.tape.param(data.clone())
        } else {
            self.tape.constant(data.clone())
        };
        self.bound.insert(path.to_string(), var);
        if trainable {
            self.order.push((path.to_string(), var));
        }
        var
    }

    /// Trainable parameters in bind order: `(path, leaf)` pairs.
    pub fn trainable(&self) -> &[(String, Var)] {
        &self.order
    }
}

/// Convolutional block: `1 x K x K` zero-padded convolution (stride 1,
/// no temporal mixing), tanh activation, then batch normalization.
#[derive(Clone, Debug)]
pub struct ConvBlock<S: Scalar> {
    pub weight: ArrayD<S>,
    pub bias: ArrayD<S>,
    pub gamma: ArrayD<S>,
    pub beta: ArrayD<S>,
    pub running_mean: Vec<S>,
    pub running_var: Vec<S>,
}

impl<S: Scalar> ConvBlock<S> {
    pub fn new(cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        let fan_in = KERNEL_SIZE * KERNEL_SIZE * cin;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = init_uniform(&[cout, KERNEL_SIZE, KERNEL_SIZE, cin], bound, rng);
        ConvBlock {
            weight,
            bias: ArrayD::zeros(IxDyn(&[cout])),
            gamma: ArrayD::from_elem(IxDyn(&[cout]), S::one()),
            beta: ArrayD::zeros(IxDyn(&[cout])),
            running_mean: vec![S::zero(); cout],
            running_var: vec![S::one(); cout],
        }
    }

    pub fn in_depth(&self) -> usize {
        self.weight.shape()[3]
    }

    pub fn out_depth(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Run the block on `[B, T, W, H, Cin]`, preserving the spatial shape.
    pub fn forward(
        &mut self,
        pass: &mut Pass<'_, S>,
        prefix: &str,
        x: Var,
        mode: Mode,
        trainable: bool,
    ) -> Var {
        assert_eq!(
            pass.tape.value(x).shape()[4],
            self.in_depth(),
            "{prefix}: input depth {} does not match block depth {}",
            pass.tape.value(x).shape()[4],
            self.in_depth()
        );
        let w = pass.bind(&format!("{prefix}.weight"), &self.weight, trainable);
        let b = pass.bind(&format!("{prefix}.bias"), &self.bias, trainable);
        let gamma = pass.bind(&format!("{prefix}.gamma"), &self.gamma, trainable);
        let beta = pass.bind(&format!("{prefix}.beta"), &self.beta, trainable);
        let conv = pass.tape.conv2d(x, w, b, KERNEL_SIZE);
        let act = pass.tape.tanh(conv);
        match mode {
            Mode::Train => {
                let n = pass.tape.value(act).len() / self.out_depth();
                let (y, mean, var) = pass.tape.batchnorm_train(act, gamma, beta, BN_EPS);
                self.update_running(&mean, &var, n);
                y
            }
            Mode::Frozen => {
                let (y, _, _) = pass.tape.batchnorm_train(act, gamma, beta, BN_EPS);
                y
            }
            Mode::Eval => pass.tape.batchnorm_eval(
                act,
                gamma,
                beta,
                &self.running_mean,
                &self.running_var,
                BN_EPS,
            ),
        }
    }

    fn update_running(&mut self, mean: &[S], var: &[S], n: usize) {
        let mom = S::from_f(BN_MOMENTUM);
        let keep = S::one() - mom;
        // Running variance uses the unbiased estimate, as is conventional.
        let correction = if n > 1 {
            S::from_f(n as f64 / (n - 1) as f64)
        } else {
            S::one()
        };
        for (r, &m) in self.running_mean.iter_mut().zip(mean) {
            *r = keep * *r + mom * m;
        }
        for (r, &v) in self.running_var.iter_mut().zip(var) {
            *r = keep * *r + mom * v * correction;
        }
    }

    pub fn visit_learnable(&self, prefix: &str, f: &mut impl FnMut(String, &ArrayD<S>)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
        f(format!("{prefix}.gamma"), &self.gamma);
        f(format!("{prefix}.beta"), &self.beta);
    }

    pub fn learnable_mut(&mut self, name: &str) -> Option<&mut ArrayD<S>> {
        match name {
            "weight" => Some(&mut self.weight),
            "bias" => Some(&mut self.bias),
            "gamma" => Some(&mut self.gamma),
            "beta" => Some(&mut self.beta),
            _ => None,
        }
    }
}

/// Affine map over the last tensor dimension.
#[derive(Clone, Debug)]
pub struct LinearLayer<S: Scalar> {
    pub weight: ArrayD<S>,
    pub bias: ArrayD<S>,
}

impl<S: Scalar> LinearLayer<S> {
    pub fn new(din: usize, dout: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (din as f64).sqrt();
        LinearLayer {
            weight: init_uniform(&[din, dout], bound, rng),
            bias: ArrayD::zeros(IxDyn(&[dout])),
        }
    }

    pub fn forward(&self, pass: &mut Pass<'_, S>, prefix: &str, x: Var, trainable: bool) -> Var {
        let w = pass.bind(&format!("{prefix}.weight"), &self.weight, trainable);
        let b = pass.bind(&format!("{prefix}.bias"), &self.bias, trainable);
        pass.tape.linear(x, w, b)
    }

    pub fn visit_learnable(&self, prefix: &str, f: &mut impl FnMut(String, &ArrayD<S>)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }

    pub fn learnable_mut(&mut self, name: &str) -> Option<&mut ArrayD<S>> {
        match name {
            "weight" => Some(&mut self.weight),
            "bias" => Some(&mut self.bias),
            _ => None,
        }
    }
}

fn init_uniform<S: Scalar>(shape: &[usize], bound: f64, rng: &mut impl Rng) -> ArrayD<S> {
    let n: usize = shape.iter().product();
    let data: Vec<S> = (0..n)
        .map(|_| S::from_f((rng.random::<f64>() * 2.0 - 1.0) * bound))
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn video<S: Scalar>(shape: &[usize], f: impl Fn(usize) -> f64) -> ArrayD<S> {
        let n: usize = shape.iter().product();
        ArrayD::from_shape_vec(IxDyn(shape), (0..n).map(|i| S::from_f(f(i))).collect()).unwrap()
    }

    #[test]
    fn conv_block_preserves_spatial_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut block = ConvBlock::<f32>::new(3, 32, &mut rng);
        let mut tape = Tape::new();
        let mut pass = Pass::new(&mut tape);
        let x = video(&[1, 4, 32, 32, 3], |i| (i as f64 * 0.01).sin());
        let xv = pass.tape.constant(x);
        let y = block.forward(&mut pass, "b", xv, Mode::Eval, false);
        assert_eq!(tape.value(y).shape(), &[1, 4, 32, 32, 32]);
    }

    #[test]
    fn conv_block_small_inputs_still_work() {
        // Smaller than the kernel: padding covers it.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut block = ConvBlock::<f32>::new(2, 4, &mut rng);
        let mut tape = Tape::new();
        let mut pass = Pass::new(&mut tape);
        let x = video(&[1, 1, 3, 5, 2], |i| i as f64 * 0.1 - 0.5);
        let xv = pass.tape.constant(x);
        let y = block.forward(&mut pass, "b", xv, Mode::Eval, false);
        assert_eq!(tape.value(y).shape(), &[1, 1, 3, 5, 4]);
    }

    #[test]
    fn zero_initialized_block_maps_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut block = ConvBlock::<f64>::new(3, 8, &mut rng);
        block.weight.fill(0.0);
        block.bias.fill(0.0);
        let x = video(&[1, 2, 16, 16, 3], |i| (i as f64 * 0.37).cos());
        for mode in [Mode::Train, Mode::Eval] {
            let mut tape = Tape::new();
            let mut pass = Pass::new(&mut tape);
            let xv = pass.tape.constant(x.clone());
            let y = block.forward(&mut pass, "b", xv, mode, false);
            for &v in tape.value(y).iter() {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn pre_normalization_activations_bounded_by_tanh() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut block = ConvBlock::<f64>::new(3, 4, &mut rng);
        // Huge weights to stress the bound.
        block.weight.mapv_inplace(|w| w * 1e4);
        let mut tape = Tape::new();
        let mut pass = Pass::new(&mut tape);
        let x = video(&[1, 1, 16, 16, 3], |i| (i as f64 * 0.11).sin());
        let xv = pass.tape.constant(x);
        let _ = block.forward(&mut pass, "b", xv, Mode::Eval, false);
        // Node 1 is the conv output, node 2 the tanh.
        let tanh_out = tape.value(Var(2));
        for &v in tanh_out.iter() {
            assert!(v > -1.0 && v < 1.0);
        }
    }

    #[test]
    fn depth_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut block = ConvBlock::<f32>::new(3, 4, &mut rng);
        let mut tape = Tape::new();
        let mut pass = Pass::new(&mut tape);
        let x = video(&[1, 1, 8, 8, 5], |_| 0.0);
        let xv = pass.tape.constant(x);
        let res = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            block.forward(&mut pass, "b", xv, Mode::Eval, false)
        }));
        assert!(res.is_err());
    }
}
