use serde::{Deserialize, Serialize};

use super::{dims4, expect_shape, LayerGrads};
use crate::error::{NptnError, Result};
use crate::tensor::{NDTensor, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BnMode {
    Train,
    Eval,
}

/// Per-channel batch normalization over `(B, H, W)`.
///
/// Running statistics are an exponential moving average with weight
/// `momentum` on the newest batch; the running variance uses the unbiased
/// batch estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm2d<T = f32> {
    pub gamma: NDTensor<T>,
    pub beta: NDTensor<T>,
    pub running_mean: NDTensor<T>,
    pub running_var: NDTensor<T>,
    pub eps: f64,
    pub momentum: f64,
}

/// What the backward pass needs from a train-mode forward.
#[derive(Clone, Debug)]
pub struct BnCache<T = f32> {
    x_hat: NDTensor<T>,
    inv_std: Vec<f64>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub const EPS: f64 = 1e-5;
    pub const MOMENTUM: f64 = 0.1;

    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: NDTensor::full(&[channels], T::one()),
            beta: NDTensor::zeros(&[channels]),
            running_mean: NDTensor::zeros(&[channels]),
            running_var: NDTensor::full(&[channels], T::one()),
            eps: Self::EPS,
            momentum: Self::MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(
        &mut self,
        x: &NDTensor<T>,
        mode: BnMode,
    ) -> Result<(NDTensor<T>, Option<BnCache<T>>)> {
        let (b, c, h, w) = dims4(x, "batchnorm input")?;
        if c != self.channels() {
            return Err(NptnError::shape(format!(
                "batchnorm has {} channels, input has {c}",
                self.channels()
            )));
        }
        let inner = h * w;
        let count = b * inner;
        match mode {
            BnMode::Eval => Ok((self.infer(x)?, None)),
            BnMode::Train => {
                if b < 2 {
                    return Err(NptnError::contract(
                        "batch norm in train mode needs a batch of at least 2",
                    ));
                }
                let mut x_hat = NDTensor::zeros(x.shape());
                let mut y = NDTensor::zeros(x.shape());
                let mut inv_std = vec![0.0; c];
                for ci in 0..c {
                    let planes =
                        || (0..b).map(move |bi| (bi * c + ci) * inner..(bi * c + ci + 1) * inner);
                    let mut sum = 0.0;
                    for r in planes() {
                        sum += lane_sum(&x.data()[r], |v| v);
                    }
                    let mean = sum / count as f64;
                    let mut sq = 0.0;
                    for r in planes() {
                        sq += lane_sum(&x.data()[r], |v| (v - mean) * (v - mean));
                    }
                    let var = sq / count as f64;
                    let inv = 1.0 / (var + self.eps).sqrt();
                    inv_std[ci] = inv;
                    let g = self.gamma.data()[ci].as_f64();
                    let bt = self.beta.data()[ci].as_f64();
                    for r in planes() {
                        let src = &x.data()[r.clone()];
                        let xh_out = &mut x_hat.data_mut()[r.clone()];
                        for (o, &v) in xh_out.iter_mut().zip(src) {
                            *o = T::from_f64((v.as_f64() - mean) * inv);
                        }
                        for (o, &v) in y.data_mut()[r.clone()].iter_mut().zip(src) {
                            *o = T::from_f64(g * ((v.as_f64() - mean) * inv) + bt);
                        }
                    }
                    let unbiased = if count > 1 {
                        sq / (count - 1) as f64
                    } else {
                        var
                    };
                    let mo = self.momentum;
                    let rm = &mut self.running_mean.data_mut()[ci];
                    *rm = T::from_f64((1.0 - mo) * rm.as_f64() + mo * mean);
                    let rv = &mut self.running_var.data_mut()[ci];
                    *rv = T::from_f64((1.0 - mo) * rv.as_f64() + mo * unbiased);
                }
                Ok((y, Some(BnCache { x_hat, inv_std })))
            }
        }
    }

    /// Eval-mode forward: normalize with the running statistics.
    pub fn infer(&self, x: &NDTensor<T>) -> Result<NDTensor<T>> {
        let (b, c, h, w) = dims4(x, "batchnorm input")?;
        if c != self.channels() {
            return Err(NptnError::shape(format!(
                "batchnorm has {} channels, input has {c}",
                self.channels()
            )));
        }
        let inner = h * w;
        let mut y = x.clone();
        for ci in 0..c {
            let mean = self.running_mean.data()[ci].as_f64();
            let inv = 1.0 / (self.running_var.data()[ci].as_f64() + self.eps).sqrt();
            let g = self.gamma.data()[ci].as_f64();
            let bt = self.beta.data()[ci].as_f64();
            for bi in 0..b {
                for v in &mut y.data_mut()[(bi * c + ci) * inner..(bi * c + ci + 1) * inner] {
                    *v = T::from_f64(g * ((v.as_f64() - mean) * inv) + bt);
                }
            }
        }
        Ok(y)
    }

    /// Backward of a train-mode forward. `d_params = [d_gamma, d_beta]`.
    pub fn backward(&self, dy: &NDTensor<T>, cache: &BnCache<T>) -> Result<LayerGrads<T>> {
        expect_shape(dy, cache.x_hat.shape(), "batchnorm upstream gradient")?;
        let (b, c, h, w) = dims4(dy, "batchnorm upstream gradient")?;
        let inner = h * w;
        let count = (b * inner) as f64;
        let mut dx = NDTensor::zeros(dy.shape());
        let mut dgamma = NDTensor::zeros(&[c]);
        let mut dbeta = NDTensor::zeros(&[c]);
        for ci in 0..c {
            let planes = || (0..b).map(move |bi| (bi * c + ci) * inner..(bi * c + ci + 1) * inner);
            let (mut sum_dy, mut sum_dy_xh) = (0.0, 0.0);
            for r in planes() {
                sum_dy += lane_sum(&dy.data()[r.clone()], |v| v);
                sum_dy_xh += lane_dot(&dy.data()[r.clone()], &cache.x_hat.data()[r]);
            }
            dgamma.data_mut()[ci] = T::from_f64(sum_dy_xh);
            dbeta.data_mut()[ci] = T::from_f64(sum_dy);
            let k = self.gamma.data()[ci].as_f64() * cache.inv_std[ci] / count;
            for r in planes() {
                let out = &mut dx.data_mut()[r.clone()];
                for ((o, &g), &xh) in out
                    .iter_mut()
                    .zip(&dy.data()[r.clone()])
                    .zip(&cache.x_hat.data()[r])
                {
                    *o = T::from_f64(k * (count * g.as_f64() - sum_dy - xh.as_f64() * sum_dy_xh));
                }
            }
        }
        Ok(LayerGrads {
            d_input: dx,
            d_params: vec![dgamma, dbeta],
        })
    }
}

/// `Σ f(x)` in f64 over eight interleaved partial sums.
fn lane_sum<T: Scalar>(xs: &[T], f: impl Fn(f64) -> f64) -> f64 {
    let mut acc = [0.0f64; 8];
    let chunks = xs.chunks_exact(8);
    let rest = chunks.remainder();
    for c in chunks {
        for (a, &v) in acc.iter_mut().zip(c) {
            *a += f(v.as_f64());
        }
    }
    for (a, &v) in acc.iter_mut().zip(rest) {
        *a += f(v.as_f64());
    }
    acc.iter().sum()
}

fn lane_dot<T: Scalar>(xs: &[T], ys: &[T]) -> f64 {
    let mut acc = [0.0f64; 8];
    let (cx, cy) = (xs.chunks_exact(8), ys.chunks_exact(8));
    let (rx, ry) = (cx.remainder(), cy.remainder());
    for (a8, b8) in cx.zip(cy) {
        for ((a, &x), &y) in acc.iter_mut().zip(a8).zip(b8) {
            *a += x.as_f64() * y.as_f64();
        }
    }
    for ((a, &x), &y) in acc.iter_mut().zip(rx).zip(ry) {
        *a += x.as_f64() * y.as_f64();
    }
    acc.iter().sum()
}
