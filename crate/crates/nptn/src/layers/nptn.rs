//! The non-parametric transformation layer.
//!
//! Every `(m, n)` pair of input and output channel is a node owning `G`
//! filters. The node convolves input channel `m` with each of its filters,
//! takes the elementwise max over the `G` resulting maps (transformation
//! pooling), and output channel `n` is the sum (or mean) of the `M` pooled
//! maps feeding it:
//!
//! ```text
//! z[b,m,n,g] = x[b,m] ⋆ w[m,n,g]
//! u[b,m,n]   = max_g z[b,m,n,g]
//! y[b,n]     = Σ_m u[b,m,n]          (or / M for Aggregate::Mean)
//! ```
//!
//! The max never mixes input channels. With `G = 1` the layer is exactly a
//! bias-free convolution.

use serde::{Deserialize, Serialize};

use super::{dims4, expect_shape, LayerGrads};
use crate::error::{NptnError, Result};
use crate::rng::Rng;
use crate::tensor::{col2im_add, gemm, im2col_into, transpose_into, NDTensor, Scalar, Window};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregate {
    #[default]
    Sum,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NptnLayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub group_size: usize,
    pub kernel: usize,
    pub pad: usize,
    pub stride: usize,
    #[serde(default)]
    pub aggregate: Aggregate,
}

impl NptnLayerSpec {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        group_size: usize,
        kernel: usize,
        pad: usize,
    ) -> Self {
        NptnLayerSpec {
            in_channels,
            out_channels,
            group_size,
            kernel,
            pad,
            stride: 1,
            aggregate: Aggregate::Sum,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("in_channels", self.in_channels),
            ("out_channels", self.out_channels),
            ("group_size", self.group_size),
            ("kernel", self.kernel),
            ("stride", self.stride),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(NptnError::Spec(format!(
                    "nptn layer {name} must be at least 1"
                )));
            }
        }
        Ok(())
    }

    /// `M · N · G`.
    pub fn filter_count(&self) -> usize {
        self.in_channels * self.out_channels * self.group_size
    }

    pub fn weight_shape(&self) -> [usize; 5] {
        [
            self.in_channels,
            self.out_channels,
            self.group_size,
            self.kernel,
            self.kernel,
        ]
    }

    pub fn window(&self) -> Window {
        Window::new(self.kernel, self.pad, self.stride)
    }
}

/// Filter bank `[M, N, G, k, k]`, m-major then n then g.
#[derive(Clone, Debug, PartialEq)]
pub struct NptnWeights<T = f32> {
    pub w: NDTensor<T>,
}

impl<T: Scalar> NptnWeights<T> {
    /// Uniform in `±1/sqrt(M·k·k)`. The fan-in counts the `M` summed paths;
    /// only one of the `G` filters per node is active at any location.
    pub fn init(spec: &NptnLayerSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let s = 1.0 / ((spec.in_channels * spec.kernel * spec.kernel) as f64).sqrt();
        Ok(NptnWeights {
            w: NDTensor::uniform(&spec.weight_shape(), -s, s, rng),
        })
    }

    pub fn from_tensor(spec: &NptnLayerSpec, w: NDTensor<T>) -> Result<Self> {
        expect_shape(&w, &spec.weight_shape(), "nptn weights")?;
        Ok(NptnWeights { w })
    }

    /// `[M,N,1,k,k]` → standard convolution bank `[N,M,k,k]`.
    pub fn to_conv_bank(&self) -> Result<NDTensor<T>> {
        let &[m, n, g, k, _] = self.w.shape() else {
            unreachable!("nptn weights are always 5-D")
        };
        if g != 1 {
            return Err(NptnError::contract(format!(
                "only a group size of 1 converts to a convolution bank (got {g})"
            )));
        }
        let kk = k * k;
        let mut out = NDTensor::zeros(&[n, m, k, k]);
        for mi in 0..m {
            for ni in 0..n {
                let src = &self.w.data()[(mi * n + ni) * kk..(mi * n + ni + 1) * kk];
                out.data_mut()[(ni * m + mi) * kk..(ni * m + mi + 1) * kk].copy_from_slice(src);
            }
        }
        Ok(out)
    }

    /// Inverse of [`Self::to_conv_bank`].
    pub fn from_conv_bank(bank: &NDTensor<T>) -> Result<Self> {
        let &[n, m, k, k2] = bank.shape() else {
            return Err(NptnError::shape(format!(
                "conv bank {:?} is not 4-D",
                bank.shape()
            )));
        };
        if k != k2 {
            return Err(NptnError::shape("conv bank kernel must be square"));
        }
        let kk = k * k;
        let mut w = NDTensor::zeros(&[m, n, 1, k, k]);
        for ni in 0..n {
            for mi in 0..m {
                let src = &bank.data()[(ni * m + mi) * kk..(ni * m + mi + 1) * kk];
                w.data_mut()[(mi * n + ni) * kk..(mi * n + ni + 1) * kk].copy_from_slice(src);
            }
        }
        Ok(NptnWeights { w })
    }

    /// The `G` filters of node `(m, n)`, each flattened to `k·k`.
    pub fn node_filters(&self, m: usize, n: usize) -> NDTensor<T> {
        let &[_, nn, g, k, _] = self.w.shape() else {
            unreachable!()
        };
        let len = g * k * k;
        let start = (m * nn + n) * len;
        NDTensor::from_vec(&[g, k * k], self.w.data()[start..start + len].to_vec())
            .expect("node slice shape")
    }
}

/// Index of the winning filter for every `(b, m, n, y, x)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaxRoute {
    pub shape: [usize; 5],
    pub winner: Vec<u32>,
}

impl MaxRoute {
    pub fn at(&self, b: usize, m: usize, n: usize, s: usize) -> u32 {
        let [_, mm, nn, h, w] = self.shape;
        self.winner[((b * mm + m) * nn + n) * h * w + s]
    }
}

fn check_input<T: Scalar>(
    x: &NDTensor<T>,
    spec: &NptnLayerSpec,
    wts: &NptnWeights<T>,
) -> Result<(usize, usize, usize, usize, usize)> {
    spec.validate()?;
    let (batch, m, h, w) = dims4(x, "nptn input")?;
    if m != spec.in_channels {
        return Err(NptnError::shape(format!(
            "nptn input has {m} channels, layer expects {}",
            spec.in_channels
        )));
    }
    expect_shape(&wts.w, &spec.weight_shape(), "nptn weights")?;
    let (oh, ow) = spec.window().output_size(h, w)?;
    Ok((batch, h, w, oh, ow))
}

pub fn nptn_forward<T: Scalar>(
    x: &NDTensor<T>,
    spec: &NptnLayerSpec,
    wts: &NptnWeights<T>,
) -> Result<(NDTensor<T>, MaxRoute)> {
    let (batch, h, w, oh, ow) = check_input(x, spec, wts)?;
    let (m, n, g, k) = (
        spec.in_channels,
        spec.out_channels,
        spec.group_size,
        spec.kernel,
    );
    let (hw, kk, plane) = (oh * ow, k * k, h * w);
    let win = spec.window();

    let mut y = NDTensor::zeros(&[batch, n, oh, ow]);
    let mut route = MaxRoute {
        shape: [batch, m, n, oh, ow],
        winner: vec![0; batch * m * n * hw],
    };
    let mut cols = vec![T::zero(); m * kk * hw];
    // z for one input channel, laid out (n, g, spatial)
    let mut z = vec![T::zero(); n * g * hw];
    let mut best = vec![T::zero(); hw];

    for b in 0..batch {
        im2col_into(
            &x.data()[b * m * plane..(b + 1) * m * plane],
            m,
            h,
            w,
            win,
            oh,
            ow,
            &mut cols,
        );
        let yb = &mut y.data_mut()[b * n * hw..(b + 1) * n * hw];
        for mi in 0..m {
            let bank = &wts.w.data()[mi * n * g * kk..(mi + 1) * n * g * kk];
            gemm(
                n * g,
                kk,
                hw,
                bank,
                &cols[mi * kk * hw..(mi + 1) * kk * hw],
                &mut z,
            );
            for ni in 0..n {
                let maps = &z[ni * g * hw..(ni + 1) * g * hw];
                let start = ((b * m + mi) * n + ni) * hw;
                let win_idx = &mut route.winner[start..start + hw];
                best.copy_from_slice(&maps[..hw]);
                win_idx.fill(0);
                for gi in 1..g {
                    let zg = &maps[gi * hw..(gi + 1) * hw];
                    for ((bv, wi), &v) in best.iter_mut().zip(win_idx.iter_mut()).zip(zg) {
                        // strict: ties stay with the lowest index
                        if v > *bv {
                            *bv = v;
                            *wi = gi as u32;
                        }
                    }
                }
                for (yv, &bv) in yb[ni * hw..(ni + 1) * hw].iter_mut().zip(&best) {
                    *yv += bv;
                }
            }
        }
        if spec.aggregate == Aggregate::Mean {
            let inv = T::one() / T::from_f64(m as f64);
            yb.iter_mut().for_each(|v| *v *= inv);
        }
    }
    Ok((y, route))
}

/// Winner-take-all backward. Only the filter that won the transformation max
/// at a location receives gradient from it. `d_params = [d_w]`.
pub fn nptn_backward<T: Scalar>(
    dy: &NDTensor<T>,
    x: &NDTensor<T>,
    spec: &NptnLayerSpec,
    wts: &NptnWeights<T>,
    route: &MaxRoute,
) -> Result<LayerGrads<T>> {
    let (d_input, dw) = nptn_backward_impl(dy, x, spec, wts, route, true)?;
    Ok(LayerGrads {
        d_input: d_input.expect("input gradient requested"),
        d_params: vec![dw],
    })
}

/// Weight gradient only, for a layer that sees the network input.
pub(crate) fn nptn_param_grads<T: Scalar>(
    dy: &NDTensor<T>,
    x: &NDTensor<T>,
    spec: &NptnLayerSpec,
    wts: &NptnWeights<T>,
    route: &MaxRoute,
) -> Result<NDTensor<T>> {
    Ok(nptn_backward_impl(dy, x, spec, wts, route, false)?.1)
}

fn nptn_backward_impl<T: Scalar>(
    dy: &NDTensor<T>,
    x: &NDTensor<T>,
    spec: &NptnLayerSpec,
    wts: &NptnWeights<T>,
    route: &MaxRoute,
    input_grad: bool,
) -> Result<(Option<NDTensor<T>>, NDTensor<T>)> {
    let (batch, h, w, oh, ow) = check_input(x, spec, wts)?;
    let (m, n, g, k) = (
        spec.in_channels,
        spec.out_channels,
        spec.group_size,
        spec.kernel,
    );
    if route.shape != [batch, m, n, oh, ow] {
        return Err(NptnError::contract(format!(
            "route shape {:?} does not match this layer call ({:?})",
            route.shape,
            [batch, m, n, oh, ow]
        )));
    }
    if let Some(bad) = route.winner.iter().find(|&&v| v as usize >= g) {
        return Err(NptnError::contract(format!(
            "route entry {bad} outside [0, {g})"
        )));
    }
    expect_shape(dy, &[batch, n, oh, ow], "nptn upstream gradient")?;

    let (hw, kk, plane) = (oh * ow, k * k, h * w);
    let mkk = m * kk;
    let win = spec.window();
    let scale = match spec.aggregate {
        Aggregate::Sum => T::one(),
        Aggregate::Mean => T::one() / T::from_f64(m as f64),
    };

    let ng = n * g;
    // per input channel: filters transposed to [kk, ng], and dW accumulated
    // in the same layout
    let mut w_t = vec![T::zero(); m * kk * ng];
    for mi in 0..m {
        let bank = &wts.w.data()[mi * ng * kk..(mi + 1) * ng * kk];
        transpose_into(ng, kk, bank, &mut w_t[mi * kk * ng..(mi + 1) * kk * ng]);
    }
    let mut dw_t = vec![T::zero(); m * kk * ng];
    let mut dx = input_grad.then(|| NDTensor::zeros(x.shape()));
    let mut cols = vec![T::zero(); mkk * hw];
    let mut dcols = vec![T::zero(); mkk * hw];
    // upstream gradient routed to the winning filter, zero elsewhere
    let mut routed = vec![T::zero(); ng * hw];
    let mut routed_t = vec![T::zero(); hw * ng];
    let mut dw_b = vec![T::zero(); kk * ng];

    for b in 0..batch {
        let xb = &x.data()[b * m * plane..(b + 1) * m * plane];
        im2col_into(xb, m, h, w, win, oh, ow, &mut cols);
        let dyb = &dy.data()[b * n * hw..(b + 1) * n * hw];

        for mi in 0..m {
            routed.fill(T::zero());
            routed_t.fill(T::zero());
            for ni in 0..n {
                let start = ((b * m + mi) * n + ni) * hw;
                let winners = &route.winner[start..start + hw];
                for (s, (&gi, &d)) in winners.iter().zip(&dyb[ni * hw..(ni + 1) * hw]).enumerate() {
                    let f = ni * g + gi as usize;
                    routed[f * hw + s] = scale * d;
                    routed_t[s * ng + f] = scale * d;
                }
            }
            let cols_m = &cols[mi * kk * hw..(mi + 1) * kk * hw];
            gemm(kk, hw, ng, cols_m, &routed_t, &mut dw_b);
            for (acc, v) in dw_t[mi * kk * ng..(mi + 1) * kk * ng].iter_mut().zip(&dw_b) {
                *acc += *v;
            }
            if input_grad {
                let wt_m = &w_t[mi * kk * ng..(mi + 1) * kk * ng];
                gemm(
                    kk,
                    ng,
                    hw,
                    wt_m,
                    &routed,
                    &mut dcols[mi * kk * hw..(mi + 1) * kk * hw],
                );
            }
        }
        if let Some(dx) = dx.as_mut() {
            col2im_add(
                &dcols,
                m,
                h,
                w,
                win,
                oh,
                ow,
                &mut dx.data_mut()[b * m * plane..(b + 1) * m * plane],
            );
        }
    }
    let mut dw = NDTensor::zeros(wts.w.shape());
    for mi in 0..m {
        transpose_into(
            kk,
            ng,
            &dw_t[mi * kk * ng..(mi + 1) * kk * ng],
            &mut dw.data_mut()[mi * ng * kk..(mi + 1) * ng * kk],
        );
    }
    Ok((dx, dw))
}
