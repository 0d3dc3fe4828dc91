//! Stateful layers (conv wrappers, batch norm, PReLU, fully connected) and
//! the stateless activations.

use super::{conv::conv2d as conv2d_fn, conv::conv_transpose2d as conv_transpose2d_fn, ConvSpec};
use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::scalar::Scalar;
use crate::tensor::{grad_enabled, BackwardOp, Tensor};

/// Fan-in-scaled uniform init: U(−1/√fan_in, 1/√fan_in).
fn fan_in_uniform<S: Scalar>(shape: &[usize], fan_in: usize, rng: &mut StreamRng) -> Tensor<S> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<S> = (0..n).map(|_| S::from_f64(rng.uniform(-bound, bound))).collect();
    Tensor::param(data, shape).expect("shape/data agree")
}

/// Convolution layer owning weight [Cout, Cin, kh, kw] and bias [Cout].
pub struct Conv2d<S: Scalar> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
    pub spec: ConvSpec,
}

impl<S: Scalar> Conv2d<S> {
    pub fn new(spec: ConvSpec, rng: &mut StreamRng) -> Self {
        let (kh, kw) = spec.kernel;
        let fan_in = spec.in_channels * kh * kw;
        Conv2d {
            weight: fan_in_uniform(&[spec.out_channels, spec.in_channels, kh, kw], fan_in, rng),
            bias: fan_in_uniform(&[spec.out_channels], fan_in, rng),
            spec,
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        conv2d_fn(x, &self.weight, &self.bias, &self.spec)
    }
}

/// Transposed-convolution layer owning weight [Cin, Cout, kh, kw].
pub struct ConvTranspose2d<S: Scalar> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
    pub spec: ConvSpec,
}

impl<S: Scalar> ConvTranspose2d<S> {
    pub fn new(spec: ConvSpec, rng: &mut StreamRng) -> Self {
        let (kh, kw) = spec.kernel;
        let fan_in = spec.out_channels * kh * kw;
        ConvTranspose2d {
            weight: fan_in_uniform(&[spec.in_channels, spec.out_channels, kh, kw], fan_in, rng),
            bias: fan_in_uniform(&[spec.out_channels], fan_in, rng),
            spec,
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        conv_transpose2d_fn(x, &self.weight, &self.bias, &self.spec)
    }
}

/// Batch normalization over N×H×W per channel.
///
/// Train mode standardizes by batch statistics and updates running
/// statistics with momentum; eval mode is a deterministic per-sample affine
/// map through the running statistics.
pub struct BatchNorm2d<S: Scalar> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
    pub running_mean: Tensor<S>,
    pub running_var: Tensor<S>,
    pub momentum: f64,
    pub eps: f64,
}

impl<S: Scalar> BatchNorm2d<S> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Tensor::param(vec![S::ONE; channels], &[channels]).unwrap(),
            beta: Tensor::param(vec![S::ZERO; channels], &[channels]).unwrap(),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], S::ONE),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor<S>, training: bool) -> Result<Tensor<S>> {
        batchnorm2d(
            x,
            &self.gamma,
            &self.beta,
            &self.running_mean,
            &self.running_var,
            self.momentum,
            self.eps,
            training,
        )
    }
}

struct BatchNormBackward<S: Scalar> {
    x: Tensor<S>,
    gamma: Tensor<S>,
    beta: Tensor<S>,
    mean: Vec<S>,
    inv_std: Vec<S>,
    training: bool,
}

impl<S: Scalar> BackwardOp<S> for BatchNormBackward<S> {
    fn parents(&self) -> Vec<Tensor<S>> {
        vec![self.x.clone(), self.gamma.clone(), self.beta.clone()]
    }

    fn backward(&self, _out_data: &[S], out_grad: &[S]) {
        let (n, c, h, w) = self.x.dims4().expect("validated in forward");
        let hw = h * w;
        let count = n * hw;
        let xd = self.x.data();
        let gd = self.gamma.data();

        let mut dgamma = vec![S::ZERO; c];
        let mut dbeta = vec![S::ZERO; c];
        let mut sum_g = vec![S::ZERO; c];
        let mut sum_gx = vec![S::ZERO; c];
        for img in 0..n {
            for ch in 0..c {
                let base = (img * c + ch) * hw;
                let m = self.mean[ch];
                let istd = self.inv_std[ch];
                for i in base..base + hw {
                    let xhat = (xd[i] - m) * istd;
                    let g = out_grad[i];
                    dbeta[ch] += g;
                    dgamma[ch] += g * xhat;
                    sum_g[ch] += g;
                    sum_gx[ch] += g * xhat;
                }
            }
        }

        if self.x.requires_grad() {
            let mut dx = vec![S::ZERO; xd.len()];
            let inv_count = S::ONE / S::from_f64(count as f64);
            for img in 0..n {
                for ch in 0..c {
                    let base = (img * c + ch) * hw;
                    let m = self.mean[ch];
                    let istd = self.inv_std[ch];
                    let gam = gd[ch];
                    if self.training {
                        // dx = γ·istd·(g − mean(g) − x̂·mean(g·x̂))
                        let mg = sum_g[ch] * inv_count;
                        let mgx = sum_gx[ch] * inv_count;
                        for i in base..base + hw {
                            let xhat = (xd[i] - m) * istd;
                            dx[i] = gam * istd * (out_grad[i] - mg - xhat * mgx);
                        }
                    } else {
                        for i in base..base + hw {
                            dx[i] = gam * istd * out_grad[i];
                        }
                    }
                }
            }
            self.x.accumulate_grad(&dx);
        }
        drop(xd);
        drop(gd);
        self.gamma.accumulate_grad(&dgamma);
        self.beta.accumulate_grad(&dbeta);
    }
}

/// Functional batch normalization; errors on batch size 1 in train mode
/// (degenerate variance).
#[allow(clippy::too_many_arguments)]
pub fn batchnorm2d<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    running_mean: &Tensor<S>,
    running_var: &Tensor<S>,
    momentum: f64,
    eps: f64,
    training: bool,
) -> Result<Tensor<S>> {
    let (n, c, h, w) = x.dims4()?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::ShapeMismatch {
            op: "batchnorm2d",
            lhs: gamma.shape().to_vec(),
            rhs: vec![c],
        });
    }
    if training && n < 2 {
        return Err(Error::InvalidArgument {
            op: "batchnorm2d",
            msg: "train mode requires batch size >= 2".into(),
        });
    }
    let hw = h * w;
    let count = n * hw;
    let xd = x.data();

    let (mean, var): (Vec<S>, Vec<S>) = if training {
        let inv = S::ONE / S::from_f64(count as f64);
        let mut mean = vec![S::ZERO; c];
        for img in 0..n {
            for ch in 0..c {
                let base = (img * c + ch) * hw;
                let mut acc = S::ZERO;
                for &v in &xd[base..base + hw] {
                    acc += v;
                }
                mean[ch] += acc;
            }
        }
        for m in &mut mean {
            *m *= inv;
        }
        let mut var = vec![S::ZERO; c];
        for img in 0..n {
            for ch in 0..c {
                let base = (img * c + ch) * hw;
                let m = mean[ch];
                let mut acc = S::ZERO;
                for &v in &xd[base..base + hw] {
                    let d = v - m;
                    acc += d * d;
                }
                var[ch] += acc;
            }
        }
        for v in &mut var {
            *v *= inv;
        }
        (mean, var)
    } else {
        (running_mean.data().clone(), running_var.data().clone())
    };

    let inv_std: Vec<S> = var
        .iter()
        .map(|&v| S::ONE / (v + S::from_f64(eps)).sqrt())
        .collect();

    let gd = gamma.data();
    let bd = beta.data();
    let mut out = vec![S::ZERO; xd.len()];
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * hw;
            let m = mean[ch];
            let istd = inv_std[ch];
            let (gam, bet) = (gd[ch], bd[ch]);
            for i in base..base + hw {
                out[i] = (xd[i] - m) * istd * gam + bet;
            }
        }
    }
    drop(gd);
    drop(bd);

    if training && grad_enabled() {
        // Running stats blend uses the unbiased batch variance.
        let mom = S::from_f64(momentum);
        let keep = S::ONE - mom;
        let bessel = S::from_f64(count as f64 / (count as f64 - 1.0));
        let mut rm = running_mean.data_mut();
        let mut rv = running_var.data_mut();
        for ch in 0..c {
            rm[ch] = keep * rm[ch] + mom * mean[ch];
            rv[ch] = keep * rv[ch] + mom * var[ch] * bessel;
        }
    }
    drop(xd);

    Ok(Tensor::from_op(
        out,
        vec![n, c, h, w],
        Box::new(BatchNormBackward {
            x: x.clone(),
            gamma: gamma.clone(),
            beta: beta.clone(),
            mean,
            inv_std,
            training,
        }),
    ))
}

/// Parameterized ReLU with one learnable slope per channel (axis 1).
pub struct PRelu<S: Scalar> {
    pub slopes: Tensor<S>,
}

impl<S: Scalar> PRelu<S> {
    pub fn new(channels: usize) -> Self {
        PRelu {
            slopes: Tensor::param(vec![S::from_f64(0.25); channels], &[channels]).unwrap(),
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        prelu(x, &self.slopes)
    }
}

struct PReluBackward<S: Scalar> {
    x: Tensor<S>,
    slopes: Tensor<S>,
    inner: usize,
}

impl<S: Scalar> BackwardOp<S> for PReluBackward<S> {
    fn parents(&self) -> Vec<Tensor<S>> {
        vec![self.x.clone(), self.slopes.clone()]
    }

    fn backward(&self, _out_data: &[S], out_grad: &[S]) {
        let xd = self.x.data();
        let sd = self.slopes.data();
        let c = sd.len();
        let inner = self.inner;
        let outer = xd.len() / (c * inner);

        if self.x.requires_grad() {
            let mut dx = vec![S::ZERO; xd.len()];
            for o in 0..outer {
                for ch in 0..c {
                    let a = sd[ch];
                    let base = (o * c + ch) * inner;
                    for i in base..base + inner {
                        dx[i] = if xd[i] >= S::ZERO { out_grad[i] } else { a * out_grad[i] };
                    }
                }
            }
            self.x.accumulate_grad(&dx);
        }
        if self.slopes.requires_grad() {
            let mut da = vec![S::ZERO; c];
            for o in 0..outer {
                for ch in 0..c {
                    let base = (o * c + ch) * inner;
                    let mut acc = S::ZERO;
                    for i in base..base + inner {
                        if xd[i] < S::ZERO {
                            acc += out_grad[i] * xd[i];
                        }
                    }
                    da[ch] += acc;
                }
            }
            self.slopes.accumulate_grad(&da);
        }
    }
}

/// y = x for x ≥ 0, aᶜ·x otherwise, with slopes indexed by axis 1.
pub fn prelu<S: Scalar>(x: &Tensor<S>, slopes: &Tensor<S>) -> Result<Tensor<S>> {
    let shape = x.shape().to_vec();
    if shape.len() < 2 {
        return Err(Error::InvalidArgument {
            op: "prelu",
            msg: format!("need a channel axis, got shape {shape:?}"),
        });
    }
    let c = shape[1];
    if slopes.shape() != [c] {
        return Err(Error::ShapeMismatch {
            op: "prelu",
            lhs: slopes.shape().to_vec(),
            rhs: vec![c],
        });
    }
    let inner: usize = shape[2..].iter().product();
    let outer = shape[0];
    let xd = x.data();
    let sd = slopes.data();
    let mut out = vec![S::ZERO; xd.len()];
    for o in 0..outer {
        for ch in 0..c {
            let a = sd[ch];
            let base = (o * c + ch) * inner;
            for i in base..base + inner {
                out[i] = if xd[i] >= S::ZERO { xd[i] } else { a * xd[i] };
            }
        }
    }
    drop(xd);
    drop(sd);
    Ok(Tensor::from_op(
        out,
        shape,
        Box::new(PReluBackward {
            x: x.clone(),
            slopes: slopes.clone(),
            inner,
        }),
    ))
}

struct SigmoidBackward<S: Scalar> {
    x: Tensor<S>,
}

impl<S: Scalar> BackwardOp<S> for SigmoidBackward<S> {
    fn parents(&self) -> Vec<Tensor<S>> {
        vec![self.x.clone()]
    }

    fn backward(&self, out_data: &[S], out_grad: &[S]) {
        if !self.x.requires_grad() {
            return;
        }
        let mut dx = vec![S::ZERO; out_data.len()];
        for i in 0..dx.len() {
            dx[i] = out_grad[i] * out_data[i] * (S::ONE - out_data[i]);
        }
        self.x.accumulate_grad(&dx);
    }
}

pub fn sigmoid<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let xd = x.data();
    let mut out = vec![S::ZERO; xd.len()];
    for (o, &v) in out.iter_mut().zip(xd.iter()) {
        // Branch on sign for numerical stability at large |x|.
        *o = if v >= S::ZERO {
            S::ONE / (S::ONE + (-v).exp())
        } else {
            let e = v.exp();
            e / (S::ONE + e)
        };
    }
    drop(xd);
    let shape = x.shape().to_vec();
    Ok(Tensor::from_op(out, shape, Box::new(SigmoidBackward { x: x.clone() })))
}

/// Texture energy layer: per-channel mean of absolute activations,
/// collapsing N×C×H×W to N×C. Resolution-independent by construction.
pub fn texture_energy_layer<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    x.dims4()?;
    x.abs()?.mean_axes(&[2, 3])
}

/// Fully connected layer: weight [D, K], bias [K].
pub struct Linear<S: Scalar> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> Linear<S> {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut StreamRng) -> Self {
        Linear {
            weight: fan_in_uniform(&[in_dim, out_dim], in_dim, rng),
            bias: fan_in_uniform(&[out_dim], in_dim, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        fully_connected(x, &self.weight, &self.bias)
    }
}

/// x[N, D] · weight[D, K] + bias[K] per row.
pub fn fully_connected<S: Scalar>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    bias: &Tensor<S>,
) -> Result<Tensor<S>> {
    x.matmul(weight)?.add_row_bias(bias)
}
