//! Encoder building blocks operating on batched `N×C×H×W` feature maps:
//! strided convolutional blocks (conv → PReLU → batch norm → dropout), the
//! tanh-gated convolutional layer, and the reshape that turns the final
//! feature map into a left-to-right feature sequence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{conv2d_backward, conv2d_batch, conv_out_extent, Tensor};

/// Train/infer switch. Training uses batch statistics and live dropout;
/// inference uses running statistics and no dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// A `T × D` sequence of feature vectors, one per time step.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence(Tensor);

impl FeatureSequence {
    pub fn new(steps: Tensor) -> Result<FeatureSequence> {
        if steps.rank() != 2 {
            return Err(Error::dim("feature sequence", steps.shape(), "rank 2 (T×D)"));
        }
        Ok(FeatureSequence(steps))
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn step(&self, t: usize) -> &[f64] {
        self.0.row(t)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

// ---------------------------------------------------------------------------
// Convolutional block
// ---------------------------------------------------------------------------

/// Learnable state of one encoder block. The running statistics are updated
/// only by the training loop's single-writer phase, never by `forward`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlockParams {
    pub kernels: Tensor,         // C_out × C_in × kh × kw
    pub prelu_alpha: Tensor,     // [C_out]
    pub bn_gamma: Tensor,        // [C_out]
    pub bn_beta: Tensor,         // [C_out]
    pub bn_running_mean: Tensor, // [C_out]
    pub bn_running_var: Tensor,  // [C_out]
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dropout_p: f64,
    pub bn_epsilon: f64,
}

impl ConvBlockParams {
    pub fn validate(&self) -> Result<()> {
        if self.kernels.rank() != 4 {
            return Err(Error::dim("conv block kernels", self.kernels.shape(), "rank 4"));
        }
        let c_out = self.kernels.shape()[0];
        for (name, t) in [
            ("prelu_alpha", &self.prelu_alpha),
            ("bn_gamma", &self.bn_gamma),
            ("bn_beta", &self.bn_beta),
            ("bn_running_mean", &self.bn_running_mean),
            ("bn_running_var", &self.bn_running_var),
        ] {
            if t.shape() != [c_out] {
                return Err(Error::dim("conv block", format!("{name} {:?}", t.shape()), c_out));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout_p must be in [0,1), got {}", self.dropout_p)));
        }
        if self.bn_running_var.data().iter().any(|&v| v < 0.0) {
            return Err(Error::Config("bn_running_var must be non-negative".into()));
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        self.kernels.shape()[0]
    }
}

/// Forward intermediates retained for the backward pass.
#[derive(Debug, Clone)]
pub struct ConvBlockCache {
    input: Tensor,
    conv_out: Tensor,
    prelu_out: Tensor,
    x_hat: Tensor,
    std_inv: Vec<f64>,
    /// Per-element multiplier applied by dropout (0 or 1/(1-p)).
    dropout_mask: Option<Vec<f64>>,
    mode: Mode,
    /// Biased per-channel batch variance, for the running-stat update.
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ConvBlockGrads {
    pub input: Tensor,
    pub kernels: Tensor,
    pub prelu_alpha: Tensor,
    pub bn_gamma: Tensor,
    pub bn_beta: Tensor,
}

/// conv → PReLU → batch-norm → dropout over a batched `N×C×H×W` input.
///
/// Train mode normalizes with the batch statistics and applies an inverted
/// dropout mask derived from `rng_seed`; infer mode uses the stored running
/// statistics and no dropout, and is seed-independent.
pub fn conv_block_forward(
    x: &Tensor,
    p: &ConvBlockParams,
    mode: Mode,
    rng_seed: u64,
) -> Result<(Tensor, ConvBlockCache)> {
    p.validate()?;
    let conv_out = conv2d_batch(x, &p.kernels, p.stride, p.padding)?;
    let (n, c, h, w) = shape4(&conv_out);

    // PReLU, per-channel slope
    let mut prelu_out = conv_out.clone();
    apply_per_channel(&mut prelu_out, n, c, h * w, |ch, v| {
        let a = p.prelu_alpha.data()[ch];
        if v > 0.0 {
            v
        } else {
            a * v
        }
    });

    // Batch norm
    let plane = h * w;
    let m = (n * plane) as f64;
    let (mean, var) = match mode {
        Mode::Train => {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut s = 0.0;
                for ni in 0..n {
                    let base = (ni * c + ch) * plane;
                    s += prelu_out.data()[base..base + plane].iter().sum::<f64>();
                }
                let mu = s / m;
                let mut v2 = 0.0;
                for ni in 0..n {
                    let base = (ni * c + ch) * plane;
                    v2 += prelu_out.data()[base..base + plane]
                        .iter()
                        .map(|&v| (v - mu) * (v - mu))
                        .sum::<f64>();
                }
                mean[ch] = mu;
                var[ch] = v2 / m;
            }
            (mean, var)
        }
        Mode::Infer => (
            p.bn_running_mean.data().to_vec(),
            p.bn_running_var.data().to_vec(),
        ),
    };
    let std_inv: Vec<f64> = var.iter().map(|&v| 1.0 / (v + p.bn_epsilon).sqrt()).collect();

    let mut x_hat = prelu_out.clone();
    apply_per_channel(&mut x_hat, n, c, plane, |ch, v| (v - mean[ch]) * std_inv[ch]);
    let mut out = x_hat.clone();
    apply_per_channel(&mut out, n, c, plane, |ch, v| {
        p.bn_gamma.data()[ch] * v + p.bn_beta.data()[ch]
    });

    // Inverted dropout
    let dropout_mask = if mode == Mode::Train && p.dropout_p > 0.0 {
        let keep = 1.0 - p.dropout_p;
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mask: Vec<f64> = (0..out.len())
            .map(|_| {
                if rng.random_range(0.0..1.0) < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        for (v, &s) in out.data_mut().iter_mut().zip(&mask) {
            *v *= s;
        }
        Some(mask)
    } else {
        None
    };

    let cache = ConvBlockCache {
        input: x.clone(),
        conv_out,
        prelu_out,
        x_hat,
        batch_mean: mean,
        batch_var: var,
        std_inv,
        dropout_mask,
        mode,
    };
    Ok((out, cache))
}

/// Full backward through dropout, batch norm (batch-statistic Jacobian in
/// train mode), PReLU, and the convolution.
pub fn conv_block_backward(
    p: &ConvBlockParams,
    cache: &ConvBlockCache,
    grad_out: &Tensor,
) -> Result<ConvBlockGrads> {
    let (n, c, h, w) = shape4(&cache.conv_out);
    if grad_out.shape() != cache.conv_out.shape() {
        return Err(Error::dim("conv_block_backward", grad_out.shape(), cache.conv_out.shape()));
    }
    let plane = h * w;
    let m = (n * plane) as f64;

    // dropout
    let mut g = grad_out.clone();
    if let Some(mask) = &cache.dropout_mask {
        for (v, &s) in g.data_mut().iter_mut().zip(mask) {
            *v *= s;
        }
    }

    // batch norm
    let mut bn_gamma = Tensor::zeros(&[c]);
    let mut bn_beta = Tensor::zeros(&[c]);
    let mut g_bn_in = Tensor::zeros(cache.prelu_out.shape());
    for ch in 0..c {
        let gamma = p.bn_gamma.data()[ch];
        let std_inv = cache.std_inv[ch];
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for ni in 0..n {
            let base = (ni * c + ch) * plane;
            for i in 0..plane {
                let dy = g.data()[base + i];
                sum_dy += dy;
                sum_dy_xhat += dy * cache.x_hat.data()[base + i];
            }
        }
        bn_beta.data_mut()[ch] = sum_dy;
        bn_gamma.data_mut()[ch] = sum_dy_xhat;
        match cache.mode {
            Mode::Train => {
                // dx = gamma*std_inv/M * (M*dy - sum(dy) - x_hat * sum(dy*x_hat))
                let k = gamma * std_inv / m;
                for ni in 0..n {
                    let base = (ni * c + ch) * plane;
                    for i in 0..plane {
                        let dy = g.data()[base + i];
                        let xh = cache.x_hat.data()[base + i];
                        g_bn_in.data_mut()[base + i] =
                            k * (m * dy - sum_dy - xh * sum_dy_xhat);
                    }
                }
            }
            Mode::Infer => {
                let k = gamma * std_inv;
                for ni in 0..n {
                    let base = (ni * c + ch) * plane;
                    for i in 0..plane {
                        g_bn_in.data_mut()[base + i] = k * g.data()[base + i];
                    }
                }
            }
        }
    }

    // PReLU
    let mut prelu_alpha = Tensor::zeros(&[c]);
    let mut g_conv = Tensor::zeros(cache.conv_out.shape());
    for ni in 0..n {
        for ch in 0..c {
            let a = p.prelu_alpha.data()[ch];
            let base = (ni * c + ch) * plane;
            let mut da = 0.0;
            for i in 0..plane {
                let v = cache.conv_out.data()[base + i];
                let dy = g_bn_in.data()[base + i];
                if v > 0.0 {
                    g_conv.data_mut()[base + i] = dy;
                } else {
                    g_conv.data_mut()[base + i] = a * dy;
                    da += dy * v;
                }
            }
            prelu_alpha.data_mut()[ch] += da;
        }
    }

    let (input, kernels) =
        conv2d_backward(&cache.input, &p.kernels, p.stride, p.padding, &g_conv)?;
    Ok(ConvBlockGrads {
        input,
        kernels,
        prelu_alpha,
        bn_gamma,
        bn_beta,
    })
}

/// Single-writer update of the running statistics after a training step.
pub fn update_running_stats(p: &mut ConvBlockParams, cache: &ConvBlockCache, momentum: f64) {
    debug_assert_eq!(cache.mode, Mode::Train);
    for ch in 0..p.out_channels() {
        let rm = &mut p.bn_running_mean.data_mut()[ch];
        *rm = momentum * *rm + (1.0 - momentum) * cache.batch_mean[ch];
        let rv = &mut p.bn_running_var.data_mut()[ch];
        *rv = momentum * *rv + (1.0 - momentum) * cache.batch_var[ch];
    }
}

fn apply_per_channel(t: &mut Tensor, n: usize, c: usize, plane: usize, f: impl Fn(usize, f64) -> f64) {
    let data = t.data_mut();
    for ni in 0..n {
        for ch in 0..c {
            let base = (ni * c + ch) * plane;
            for v in &mut data[base..base + plane] {
                *v = f(ch, *v);
            }
        }
    }
}

fn shape4(t: &Tensor) -> (usize, usize, usize, usize) {
    let d = t.shape();
    (d[0], d[1], d[2], d[3])
}

// ---------------------------------------------------------------------------
// Gated convolutional layer
// ---------------------------------------------------------------------------

/// Gate weights: a same-padding convolution whose tanh output multiplies the
/// input feature map positionwise.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    pub kernels: Tensor, // C × C × kh × kw
    pub padding: (usize, usize),
}

impl GateParams {
    pub fn validate(&self, channels: usize, h: usize, w: usize) -> Result<()> {
        let d = self.kernels.shape();
        if self.kernels.rank() != 4 || d[0] != channels || d[1] != channels {
            return Err(Error::dim("gate kernels", self.kernels.shape(), format!("{channels}×{channels}×kh×kw")));
        }
        let oh = conv_out_extent(h, d[2], 1, self.padding.0)?;
        let ow = conv_out_extent(w, d[3], 1, self.padding.1)?;
        if oh != h || ow != w {
            return Err(Error::dim("gate output", (oh, ow), (h, w)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GateCache {
    input: Tensor,
    gate: Tensor, // tanh(conv(x; W))
}

#[derive(Debug, Clone)]
pub struct GateGrads {
    pub input: Tensor,
    pub kernels: Tensor,
}

/// y = tanh(conv(x; W)) ⊙ x, shape-preserving.
pub fn gated_forward(x: &Tensor, p: &GateParams) -> Result<(Tensor, GateCache)> {
    let (_, c, h, w) = shape4(x);
    p.validate(c, h, w)?;
    let gate = conv2d_batch(x, &p.kernels, (1, 1), p.padding)?.tanh();
    let out = gate.mul(x)?;
    Ok((
        out,
        GateCache {
            input: x.clone(),
            gate,
        },
    ))
}

/// Product rule: grad_x = g ⊙ grad_out + conv-path term; the conv path sees
/// grad_out ⊙ x ⊙ (1 − g²).
pub fn gated_backward(p: &GateParams, cache: &GateCache, grad_out: &Tensor) -> Result<GateGrads> {
    if grad_out.shape() != cache.input.shape() {
        return Err(Error::dim("gated_backward", grad_out.shape(), cache.input.shape()));
    }
    let direct = cache.gate.mul(grad_out)?;
    let d_pre = grad_out
        .mul(&cache.input)?
        .mul(&cache.gate.map(|g| 1.0 - g * g))?;
    let (conv_path, kernels) =
        conv2d_backward(&cache.input, &p.kernels, (1, 1), p.padding, &d_pre)?;
    Ok(GateGrads {
        input: direct.add(&conv_path)?,
        kernels,
    })
}

// ---------------------------------------------------------------------------
// Map to sequence
// ---------------------------------------------------------------------------

/// Reshape a `C×H×W` feature map into a `W × (C·H)` sequence: the width axis
/// becomes time, each column flattens channel-major into one feature vector.
pub fn map_to_sequence(feature_map: &Tensor, feature_dim: usize) -> Result<FeatureSequence> {
    if feature_map.rank() != 3 {
        return Err(Error::dim("map_to_sequence", feature_map.shape(), "rank 3 (C×H×W)"));
    }
    let (c, h, w) = (
        feature_map.shape()[0],
        feature_map.shape()[1],
        feature_map.shape()[2],
    );
    if c * h != feature_dim {
        return Err(Error::Config(format!(
            "map_to_sequence: C·H = {}·{} = {} does not match feature dim {feature_dim}",
            c,
            h,
            c * h
        )));
    }
    let mut out = Tensor::zeros(&[w, feature_dim]);
    for ch in 0..c {
        for y in 0..h {
            let d = ch * h + y;
            for t in 0..w {
                let v = feature_map.data()[(ch * h + y) * w + t];
                out.data_mut()[t * feature_dim + d] = v;
            }
        }
    }
    FeatureSequence::new(out)
}

/// Scatter a sequence gradient back onto the feature-map layout.
pub fn map_to_sequence_backward(
    grad_seq: &Tensor,
    c: usize,
    h: usize,
    w: usize,
) -> Result<Tensor> {
    if grad_seq.shape() != [w, c * h] {
        return Err(Error::dim("map_to_sequence_backward", grad_seq.shape(), [w, c * h]));
    }
    let mut out = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        for y in 0..h {
            let d = ch * h + y;
            for t in 0..w {
                out.data_mut()[(ch * h + y) * w + t] = grad_seq.data()[t * (c * h) + d];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_grad, grads_close};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
        Tensor::from_fn(dims, |_| rng.random_range(-1.0..1.0))
    }

    fn gate_3x3(rng: &mut ChaCha8Rng, c: usize) -> GateParams {
        GateParams {
            kernels: rand_tensor(rng, &[c, c, 3, 3]),
            padding: (1, 1),
        }
    }

    fn block(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize, dropout_p: f64) -> ConvBlockParams {
        ConvBlockParams {
            kernels: rand_tensor(rng, &[c_out, c_in, 3, 3]),
            prelu_alpha: Tensor::full(&[c_out], 0.25),
            bn_gamma: Tensor::from_fn(&[c_out], |_| rng.random_range(0.5..1.5)),
            bn_beta: Tensor::from_fn(&[c_out], |_| rng.random_range(-0.5..0.5)),
            bn_running_mean: Tensor::zeros(&[c_out]),
            bn_running_var: Tensor::full(&[c_out], 1.0),
            stride: (1, 1),
            padding: (1, 1),
            dropout_p,
            bn_epsilon: 1e-5,
        }
    }

    #[test]
    fn gate_with_zero_kernels_kills_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, &[1, 2, 3, 3]);
        let p = GateParams {
            kernels: Tensor::zeros(&[2, 2, 3, 3]),
            padding: (1, 1),
        };
        let (y, _) = gated_forward(&x, &p).unwrap();
        assert_eq!(y, Tensor::zeros(&[1, 2, 3, 3]));
    }

    #[test]
    fn gate_on_zero_input_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::zeros(&[1, 2, 3, 3]);
        let p = gate_3x3(&mut rng, 2);
        let (y, _) = gated_forward(&x, &p).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn gate_scalar_case() {
        // 1×1×1 input [2.0] with 1×1×1×1 kernel [10.0]: y = 2·tanh(20)
        let x = Tensor::from_vec(&[1, 1, 1, 1], vec![2.0]).unwrap();
        let p = GateParams {
            kernels: Tensor::from_vec(&[1, 1, 1, 1], vec![10.0]).unwrap(),
            padding: (0, 0),
        };
        let (y, _) = gated_forward(&x, &p).unwrap();
        assert!((y.data()[0] - 2.0 * 20f64.tanh()).abs() < 1e-12);
    }

    #[test]
    fn gate_never_amplifies() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[2, 3, 4, 5]);
        let p = gate_3x3(&mut rng, 3);
        let (y, _) = gated_forward(&x, &p).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!(a.abs() <= b.abs() + 1e-15);
        }
    }

    #[test]
    fn gate_backward_zero_grad_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, &[1, 2, 3, 3]);
        let p = gate_3x3(&mut rng, 2);
        let (_, cache) = gated_forward(&x, &p).unwrap();
        let g = gated_backward(&p, &cache, &Tensor::zeros(x.shape())).unwrap();
        assert_eq!(g.input, Tensor::zeros(x.shape()));
        assert_eq!(g.kernels, Tensor::zeros(p.kernels.shape()));
    }

    #[test]
    fn gate_saturation_blocks_conv_path() {
        // Huge kernel saturates tanh; the conv-path gradient vanishes and
        // grad_x reduces to grad_out ⊙ g with g = ±1.
        let x = Tensor::from_vec(&[1, 1, 1, 2], vec![3.0, -3.0]).unwrap();
        let p = GateParams {
            kernels: Tensor::from_vec(&[1, 1, 1, 1], vec![50.0]).unwrap(),
            padding: (0, 0),
        };
        let (_, cache) = gated_forward(&x, &p).unwrap();
        let grad_out = Tensor::from_vec(&[1, 1, 1, 2], vec![1.0, 1.0]).unwrap();
        let g = gated_backward(&p, &cache, &grad_out).unwrap();
        assert!(g.kernels.data()[0].abs() < 1e-10);
        assert!((g.input.data()[0] - 1.0).abs() < 1e-10); // g ≈ tanh(150) ≈ 1
        assert!((g.input.data()[1] + 1.0).abs() < 1e-10); // g ≈ tanh(-150) ≈ -1
    }

    #[test]
    fn gate_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &[1, 2, 3, 3]);
        let p = gate_3x3(&mut rng, 2);
        let proj = rand_tensor(&mut rng, &[1, 2, 3, 3]);
        let (_, cache) = gated_forward(&x, &p).unwrap();
        let g = gated_backward(&p, &cache, &proj).unwrap();

        let fd_x = finite_diff_grad(
            &mut |t| Ok(gated_forward(t, &p)?.0.dot(&proj)?),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(grads_close(&g.input, &fd_x, 1e-4));

        let fd_k = finite_diff_grad(
            &mut |t| {
                let q = GateParams {
                    kernels: t.clone(),
                    padding: p.padding,
                };
                Ok(gated_forward(&x, &q)?.0.dot(&proj)?)
            },
            &p.kernels,
            1e-5,
        )
        .unwrap();
        assert!(grads_close(&g.kernels, &fd_k, 1e-4));
    }

    #[test]
    fn conv_block_zero_dropout_train_matches_infer_with_matching_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_tensor(&mut rng, &[3, 2, 4, 4]);
        let mut p = block(&mut rng, 2, 3, 0.0);
        let (train_out, cache) = conv_block_forward(&x, &p, Mode::Train, 7).unwrap();
        // copy the batch statistics into the running slots
        p.bn_running_mean = Tensor::from_vec(&[3], cache.batch_mean.clone()).unwrap();
        p.bn_running_var = Tensor::from_vec(&[3], cache.batch_var.clone()).unwrap();
        let (infer_out, _) = conv_block_forward(&x, &p, Mode::Infer, 99).unwrap();
        for (a, b) in train_out.data().iter().zip(infer_out.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn prelu_alpha_one_is_identity() {
        let x = Tensor::from_vec(&[2], vec![-3.0, 2.0]).unwrap();
        assert_eq!(x.prelu(1.0), x);
    }

    #[test]
    fn bn_is_fixed_point_on_standardized_batch() {
        // Batch with per-channel mean exactly 0 and biased variance exactly 1:
        // gamma=1, beta=0 leaves it unchanged up to epsilon.
        let x = Tensor::from_vec(&[2, 1, 1, 2], vec![1.0, -1.0, -1.0, 1.0]).unwrap();
        let p = ConvBlockParams {
            kernels: Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap(),
            prelu_alpha: Tensor::full(&[1], 1.0), // identity rectifier
            bn_gamma: Tensor::full(&[1], 1.0),
            bn_beta: Tensor::zeros(&[1]),
            bn_running_mean: Tensor::zeros(&[1]),
            bn_running_var: Tensor::full(&[1], 1.0),
            stride: (1, 1),
            padding: (0, 0),
            dropout_p: 0.0,
            bn_epsilon: 1e-5,
        };
        let (y, _) = conv_block_forward(&x, &p, Mode::Train, 0).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn inverted_dropout_preserves_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_tensor(&mut rng, &[1, 1, 2, 2]);
        let mut p = block(&mut rng, 1, 1, 0.2);
        // align running stats with the batch so infer output is the
        // dropout-free reference
        let (_, cache) = conv_block_forward(&x, &p, Mode::Train, 0).unwrap();
        p.bn_running_mean = Tensor::from_vec(&[1], cache.batch_mean.clone()).unwrap();
        p.bn_running_var = Tensor::from_vec(&[1], cache.batch_var.clone()).unwrap();
        let (reference, _) = conv_block_forward(&x, &p, Mode::Infer, 0).unwrap();

        let trials = 10_000;
        let mut sums = vec![0.0; reference.len()];
        let mut sq = vec![0.0; reference.len()];
        for seed in 0..trials {
            let (y, _) = conv_block_forward(&x, &p, Mode::Train, seed).unwrap();
            for (i, v) in y.data().iter().enumerate() {
                sums[i] += v;
                sq[i] += v * v;
            }
        }
        for i in 0..sums.len() {
            let mean = sums[i] / trials as f64;
            let var = sq[i] / trials as f64 - mean * mean;
            let stderr = (var / trials as f64).sqrt();
            let diff = (mean - reference.data()[i]).abs();
            assert!(diff <= 3.0 * stderr + 1e-12, "diff {diff} > 3·{stderr}");
        }
    }

    #[test]
    fn infer_mode_is_seed_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_tensor(&mut rng, &[2, 2, 4, 4]);
        let p = block(&mut rng, 2, 2, 0.5);
        let (a, _) = conv_block_forward(&x, &p, Mode::Infer, 1).unwrap();
        let (b, _) = conv_block_forward(&x, &p, Mode::Infer, 999).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn conv_block_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = rand_tensor(&mut rng, &[2, 2, 4, 5]);
        let p = block(&mut rng, 2, 3, 0.3);
        let seed = 1234;
        let (y0, cache) = conv_block_forward(&x, &p, Mode::Train, seed).unwrap();
        let proj = rand_tensor(&mut rng, y0.shape());
        let g = conv_block_backward(&p, &cache, &proj).unwrap();

        let fd_x = finite_diff_grad(
            &mut |t| Ok(conv_block_forward(t, &p, Mode::Train, seed)?.0.dot(&proj)?),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(grads_close(&g.input, &fd_x, 1e-4));

        let check_param =
            |set: &dyn Fn(&mut ConvBlockParams, &Tensor), at: &Tensor, analytic: &Tensor| {
                let mut f = |t: &Tensor| -> crate::error::Result<f64> {
                    let mut q = p.clone();
                    set(&mut q, t);
                    Ok(conv_block_forward(&x, &q, Mode::Train, seed)?.0.dot(&proj)?)
                };
                let fd = finite_diff_grad(&mut f, at, 1e-5).unwrap();
                assert!(grads_close(analytic, &fd, 1e-4));
            };
        check_param(&|q, t| q.kernels = t.clone(), &p.kernels, &g.kernels);
        check_param(&|q, t| q.prelu_alpha = t.clone(), &p.prelu_alpha, &g.prelu_alpha);
        check_param(&|q, t| q.bn_gamma = t.clone(), &p.bn_gamma, &g.bn_gamma);
        check_param(&|q, t| q.bn_beta = t.clone(), &p.bn_beta, &g.bn_beta);
    }

    #[test]
    fn running_stats_blend_with_momentum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_tensor(&mut rng, &[4, 1, 3, 3]);
        let mut p = block(&mut rng, 1, 2, 0.0);
        let (_, cache) = conv_block_forward(&x, &p, Mode::Train, 0).unwrap();
        let before = p.bn_running_mean.data()[0];
        update_running_stats(&mut p, &cache, 0.9);
        let expect = 0.9 * before + 0.1 * cache.batch_mean[0];
        assert!((p.bn_running_mean.data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn map_to_sequence_shapes() {
        // width becomes time, channel×height becomes the feature axis
        let fm = Tensor::zeros(&[256, 1, 128]);
        let seq = map_to_sequence(&fm, 256).unwrap();
        assert_eq!((seq.len(), seq.dim()), (128, 256));

        let tiny = Tensor::from_vec(&[1, 1, 1], vec![5.0]).unwrap();
        let seq = map_to_sequence(&tiny, 1).unwrap();
        assert_eq!((seq.len(), seq.dim()), (1, 1));
        assert_eq!(seq.step(0), &[5.0]);

        assert!(map_to_sequence(&Tensor::zeros(&[2, 3, 4]), 5).is_err());
    }

    #[test]
    fn map_to_sequence_is_positionally_a_reshape() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (c, h, w) = (3, 2, 4);
        let fm = rand_tensor(&mut rng, &[c, h, w]);
        let seq = map_to_sequence(&fm, c * h).unwrap();
        for t in 0..w {
            for ch in 0..c {
                for y in 0..h {
                    assert_eq!(seq.step(t)[ch * h + y], fm.data()[(ch * h + y) * w + t]);
                }
            }
        }
        // scatter-back inverts exactly
        let back = map_to_sequence_backward(seq.tensor(), c, h, w).unwrap();
        assert_eq!(back, fm);
    }
}
