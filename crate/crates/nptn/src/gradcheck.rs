//! Central finite differences in `f64`, used to certify every hand-written
//! backward pass.
//!
//! A layer is checked through a [`GradProbe`]: the probe draws a random
//! instance (input and parameters), the checker builds the scalar loss
//! `L = Σ r ⊙ layer(x)` with fixed random weights `r`, so the upstream
//! gradient is exactly `r`, and compares the analytic gradients with
//! `(L(θ + ε) − L(θ − ε)) / 2ε` coordinate by coordinate.
//!
//! Max-based layers are only differentiable away from ties. Their probes
//! report the smallest winner margin of an instance; instances closer than
//! [`TIE_MARGIN`] to a tie are redrawn and counted.

use std::fmt;
use std::io::Write;

use serde::Serialize;

use crate::error::{NptnError, Result};
use crate::layers::{
    conv2d_backward, conv2d_forward, linear_backward, linear_forward, nptn_backward, nptn_forward,
    prelu_backward, prelu_forward, softmax_xent, spatial_maxpool, spatial_maxpool_backward,
    Aggregate, BatchNorm2d, BnMode, LayerGrads, NptnLayerSpec, NptnWeights,
};
use crate::rng::Rng;
use crate::tensor::{im2col, NDTensor};

pub const EPS: f64 = 1e-5;
pub const RTOL: f64 = 1e-4;
pub const ATOL: f64 = 1e-6;
pub const TIE_MARGIN: f64 = 1e-3;
const MAX_RESAMPLES: usize = 1000;

type T64 = NDTensor<f64>;

/// `∂f/∂x_i ≈ (f(x + ε e_i) − f(x − ε e_i)) / 2ε` for every coordinate.
pub fn finite_diff_grad<F>(mut f: F, x: &T64, eps: f64) -> Result<T64>
where
    F: FnMut(&T64) -> f64,
{
    let mut probe = x.clone();
    let mut grad = T64::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(NptnError::contract(format!(
                "function is not finite around coordinate {i}"
            )));
        }
        grad.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    Ok(grad)
}

/// A layer under test, in `f64`.
pub trait GradProbe {
    fn name(&self) -> String;

    /// Draw an input and the layer parameters.
    fn sample(&self, rng: &mut Rng) -> (T64, Vec<T64>);

    fn forward(&self, x: &T64, params: &[T64]) -> Result<T64>;

    /// Gradients of `Σ dy ⊙ forward(x, params)`.
    fn backward(&self, dy: &T64, x: &T64, params: &[T64]) -> Result<LayerGrads<f64>>;

    fn param_names(&self) -> Vec<&'static str>;

    /// Smallest gap between a max's winner and runner-up, for max-based
    /// layers.
    fn tie_margin(&self, _x: &T64, _params: &[T64]) -> Option<f64> {
        None
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradEntry {
    pub tensor: String,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub layer: String,
    pub trials: usize,
    pub resampled: usize,
    pub rtol: f64,
    pub atol: f64,
    pub seed: u64,
    pub entries: Vec<GradEntry>,
    pub passed: bool,
}

impl GradReport {
    pub fn max_abs_error(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_abs_error)
            .fold(0.0, f64::max)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_error)
            .fold(0.0, f64::max)
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} [{} trials, {} resampled, rtol {:e}, atol {:e}]: {}",
            self.layer,
            self.trials,
            self.resampled,
            self.rtol,
            self.atol,
            if self.passed { "PASS" } else { "FAIL" }
        )?;
        writeln!(
            f,
            "  {:<10} {:>14} {:>14}",
            "tensor", "max abs err", "max rel err"
        )?;
        for e in &self.entries {
            writeln!(
                f,
                "  {:<10} {:>14.3e} {:>14.3e}{}",
                e.tensor,
                e.max_abs_error,
                e.max_rel_error,
                if e.passed { "" } else { "  <- FAIL" }
            )?;
        }
        Ok(())
    }
}

#[derive(Default)]
struct Tally {
    abs: f64,
    rel: f64,
    ok: bool,
}

fn compare(analytic: &T64, numeric: &T64, rtol: f64, atol: f64, tally: &mut Tally) {
    for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
        let diff = (a - n).abs();
        tally.abs = tally.abs.max(diff);
        tally.rel = tally.rel.max(diff / n.abs().max(1e-12));
        if diff > atol + rtol * n.abs() {
            tally.ok = false;
        }
    }
}

/// Run `trials` random instances of `probe` through the finite-difference
/// oracle and compare `d_input` and every parameter gradient.
pub fn check_layer(
    probe: &dyn GradProbe,
    trials: usize,
    rtol: f64,
    atol: f64,
    seed: u64,
) -> Result<GradReport> {
    let mut rng = Rng::new(seed);
    let names = probe.param_names();
    let mut tallies: Vec<Tally> = (0..=names.len())
        .map(|_| Tally {
            ok: true,
            ..Tally::default()
        })
        .collect();
    let mut resampled = 0;

    for _ in 0..trials {
        let (x, params) = loop {
            let (x, params) = probe.sample(&mut rng);
            match probe.tie_margin(&x, &params) {
                Some(m) if m < TIE_MARGIN => {
                    resampled += 1;
                    if resampled > MAX_RESAMPLES * trials.max(1) {
                        return Err(NptnError::contract(format!(
                            "{}: could not draw a tie-free instance",
                            probe.name()
                        )));
                    }
                }
                _ => break (x, params),
            }
        };
        let y = probe.forward(&x, &params)?;
        let r = T64::uniform(y.shape(), -1.0, 1.0, &mut rng);
        let loss = |y: &T64| -> f64 { y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum() };
        let grads = probe.backward(&r, &x, &params)?;
        if grads.d_params.len() != params.len() {
            return Err(NptnError::contract(format!(
                "{}: backward returned {} parameter gradients for {} parameters",
                probe.name(),
                grads.d_params.len(),
                params.len()
            )));
        }

        let num_x = finite_diff_grad(
            |xp| {
                probe
                    .forward(xp, &params)
                    .map(|y| loss(&y))
                    .unwrap_or(f64::NAN)
            },
            &x,
            EPS,
        )?;
        compare(&grads.d_input, &num_x, rtol, atol, &mut tallies[0]);

        for (pi, p) in params.iter().enumerate() {
            let num_p = finite_diff_grad(
                |pp| {
                    let mut ps = params.clone();
                    ps[pi] = pp.clone();
                    probe.forward(&x, &ps).map(|y| loss(&y)).unwrap_or(f64::NAN)
                },
                p,
                EPS,
            )?;
            compare(
                &grads.d_params[pi],
                &num_p,
                rtol,
                atol,
                &mut tallies[pi + 1],
            );
        }
    }

    let entries: Vec<GradEntry> = std::iter::once("d_input")
        .chain(names.iter().copied())
        .zip(&tallies)
        .map(|(name, t)| GradEntry {
            tensor: name.to_string(),
            max_abs_error: t.abs,
            max_rel_error: t.rel,
            passed: t.ok,
        })
        .collect();
    let passed = entries.iter().all(|e| e.passed);
    Ok(GradReport {
        layer: probe.name(),
        trials,
        resampled,
        rtol,
        atol,
        seed,
        entries,
        passed,
    })
}

/// Columns: `layer,tensor,max_abs_error,max_rel_error,passed,trials,resampled,seed`.
pub fn write_grad_csv<W: Write>(reports: &[GradReport], out: W) -> Result<()> {
    #[derive(Serialize)]
    struct Row<'a> {
        layer: &'a str,
        tensor: &'a str,
        max_abs_error: f64,
        max_rel_error: f64,
        passed: bool,
        trials: usize,
        resampled: usize,
        seed: u64,
    }
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| NptnError::io("gradcheck csv", std::io::Error::other(e));
    for r in reports {
        for e in &r.entries {
            w.serialize(Row {
                layer: &r.layer,
                tensor: &e.tensor,
                max_abs_error: e.max_abs_error,
                max_rel_error: e.max_rel_error,
                passed: e.passed,
                trials: r.trials,
                resampled: r.resampled,
                seed: r.seed,
            })
            .map_err(err)?;
        }
    }
    w.flush().map_err(|e| NptnError::io("gradcheck csv", e))
}

/// Wraps a probe and scales its first parameter gradient (or `d_input` for
/// parameter-free layers) by `1 + factor_offset`. The checker must reject it.
pub struct Mutated<P> {
    pub inner: P,
    pub scale: f64,
}

impl<P: GradProbe> GradProbe for Mutated<P> {
    fn name(&self) -> String {
        format!("{} (mutated x{})", self.inner.name(), self.scale)
    }
    fn sample(&self, rng: &mut Rng) -> (T64, Vec<T64>) {
        self.inner.sample(rng)
    }
    fn forward(&self, x: &T64, params: &[T64]) -> Result<T64> {
        self.inner.forward(x, params)
    }
    fn backward(&self, dy: &T64, x: &T64, params: &[T64]) -> Result<LayerGrads<f64>> {
        let mut g = self.inner.backward(dy, x, params)?;
        let s = self.scale;
        match g.d_params.first_mut() {
            Some(d) => *d = d.map(|v| v * s),
            None => g.d_input = g.d_input.map(|v| v * s),
        }
        Ok(g)
    }
    fn param_names(&self) -> Vec<&'static str> {
        self.inner.param_names()
    }
    fn tie_margin(&self, x: &T64, params: &[T64]) -> Option<f64> {
        self.inner.tie_margin(x, params)
    }
}

impl GradProbe for Box<dyn GradProbe> {
    fn name(&self) -> String {
        (**self).name()
    }
    fn sample(&self, rng: &mut Rng) -> (T64, Vec<T64>) {
        (**self).sample(rng)
    }
    fn forward(&self, x: &T64, params: &[T64]) -> Result<T64> {
        (**self).forward(x, params)
    }
    fn backward(&self, dy: &T64, x: &T64, params: &[T64]) -> Result<LayerGrads<f64>> {
        (**self).backward(dy, x, params)
    }
    fn param_names(&self) -> Vec<&'static str> {
        (**self).param_names()
    }
    fn tie_margin(&self, x: &T64, params: &[T64]) -> Option<f64> {
        (**self).tie_margin(x, params)
    }
}

// ---------------------------------------------------------------------------
// Probes for every layer

pub struct ConvProbe {
    pub input: [usize; 4],
    pub out_channels: usize,
    pub kernel: usize,
    pub pad: usize,
    pub stride: usize,
}

impl GradProbe for ConvProbe {
    fn name(&self) -> String {
        format!(
            "conv2d {:?} -> {} k{}",
            self.input, self.out_channels, self.kernel
        )
    }
    fn sample(&self, rng: &mut Rng) -> (T64, Vec<T64>) {
        let x = T64::uniform(&self.input, -1.0, 1.0, rng);
        let w = T64::uniform(
            &[self.out_channels, self.input[1], self.kernel, self.kernel],
            -1.0,
            1.0,
            rng,
        );
        let b = T64::uniform(&[self.out_channels], -1.0, 1.0, rng);
        (x, vec![w, b])
    }
    fn forward(&self, x: &T64, p: &[T64]) -> Result<T64> {
        conv2d_forward(x, &p[0], Some(&p[1]), self.pad, self.stride)
    }
    fn backward(&self, dy: &T64, x: &T64, p: &[T64]) -> Result<LayerGrads<f64>> {
        conv2d_backward(dy, x, &p[0], true, self.pad, self.stride)
    }
    fn param_names(&self) -> Vec<&'static str> {
        vec!["weight", "bias"]
    }
}

pub struct NptnProbe {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub spec: NptnLayerSpec,
}

impl NptnProbe {
    fn weights(&self, w: &T64) -> Result<NptnWeights<f64>> {
        NptnWeights::from_tensor(&self.spec, w.clone())
    }
}

impl GradProbe for NptnProbe {
    fn name(&self) -> String {
        let s = &self.spec;
        format!(
            "nptn M{} N{} G{} k{} ({:?})",
            s.in_channels, s.out_channels, s.group_size, s.kernel, s.aggregate
        )
    }
    fn sample(&self, rng: &mut Rng) -> (T64, Vec<T64>) {
        let x = T64::uniform(
            &[self.batch, self.spec.in_channels, self.height, self.width],
            -1.0,
            1.0,
            rng,
        );
        let w = T64::uniform(&self.spec.weight_shape(), -1.0, 1.0, rng);
        (x, vec![w])
    }
    fn forward(&self, x: &T64, p: &[T64]) -> Result<T64> {
        nptn_forward(x, &self.spec, &self.weights(&p[0])?).map(|(y, _)| y)
    }
    fn backward(&self, dy: &T64, x: &T64, p: &[T64]) -> Result<LayerGrads<f64>> {
        let w = self.weights(&p[0])?;
        let (_, route) = nptn_forward(x, &self.spec, &w)?;
        nptn_backward(dy, x, &self.spec, &w, &route)
    }
    fn param_names(&self) -> Vec<&'static str> {
        vec!["weight"]
    }
    fn tie_margin(&self, x: &T64, p: &[T64]) -> Option<f64> {
        nptn_tie_margin(x, &self.spec, &p[0])
    }
}

/// Smallest gap between the largest and second largest of the `G` responses
/// of any node at any location.
pub fn nptn_tie_margin(x: &T64, spec: &NptnLayerSpec, w: &T64) -> Option<f64> {
    let (m, n, g, k) = (
        spec.in_channels,
        spec.out_channels,
        spec.group_size,
        spec.kernel,
    );
    if g < 2 {
        return None;
    }
    let &[batch, c, h, wd] = x.shape() else {
        return None;
    };
    let kk = k * k;
    let plane = c * h * wd;
    let mut margin = f64::INFINITY;
    let mut z = vec![0.0; g];
    for b in 0..batch {
        let xb = T64::from_vec(&[c, h, wd], x.data()[b * plane..(b + 1) * plane].to_vec()).ok()?;
        let cols = im2col(&xb, k, spec.pad, spec.stride).ok()?;
        let hw = cols.shape()[1];
        for mi in 0..m {
            for ni in 0..n {
                for s in 0..hw {
                    for (gi, zg) in z.iter_mut().enumerate() {
                        let f = &w.data()[((mi * n + ni) * g + gi) * kk..][..kk];
                        *zg = (0..kk)
                            .map(|t| f[t] * cols.data()[(mi * kk + t) * hw + s])
                            .sum();
                    }
                    z.sort_by(|a, b| b.total_cmp(a));
                    margin = margin.min(z[0] - z[1]);
                }
            }
        }
    }
    Some(margin)
}

pub struct MaxPoolProbe {
    pub input: [usize; 4],
    pub window: usize,
    pub stride: usize,
}

impl GradProbe for MaxPoolProbe {
    fn name(&self) -> String {
        format!("maxpool {:?} w{} s{}", self.input, self.window, self.stride)
    }
    fn sample(&self, rng: &mut Rng) -> (T64, Vec<T64>) {
        (T64::uniform(&self.input, -1.0, 1.0, rng), vec![])
    }
    fn forward(&self, x: &T64, _: &[T64]) -> Result<T64> {
        spatial_maxpool(x, self.window, self.stride).map(|(y, _)| y)
    }
    fn backward(&self, dy: &T64, x: &T64, _: &[T64]) -> Result<LayerGrads<f64>> {
        let (_, route) = spatial_maxpool(x, self.window, self.stride)?;
        Ok(LayerGrads {
            d_input: spatial_maxpool_backward(dy, &route)?,
            d_params: vec![],
        })
    }
    fn param_names(&self) -> Vec<&'static str> {
        vec![]
    }
    fn tie_margin(&self, x: &T64, _: &[T64]) -> Option<f64> {
        let [b, c, h, w] = self.input;
        let (win, s) = (self.window, self.stride);
        let mut margin = f64::INFINITY;
        for p in 0..b * c {
            let plane = &x.data()[p * h * w..(p + 1) * h * w];
            for oy in 0..(h - win) / s + 1 {
                for ox in 0..(w - win) / s + 1 {
                    let mut vals: Vec<f64> = (0..win * win)
                        .map(|i| plane[(oy * s + i / win) * w + ox * s + i % win])
                        .collect();
                    vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
                    if vals.len() > 1 {
                        margin = margin.min(vals[0] - vals[1]);
                    }
                }
            }
        }
        Some(margin)
    }
}

pub struct PreluProbe {
    pub input: [usize; 4],
}

impl GradProbe for PreluProbe {
    fn name(&self) -> String {
        format!("prelu {:?}", self.input)
    }
    fn sample(&self, rng: &mut Rng) -> (T64, Vec<T64>) {
        let x = T64::uniform(&self.input, -1.0, 1.0, rng);
        let a = T64::uniform(&[self.input[1]], 0.0, 0.5, rng);
        (x, vec![a])
    }
    fn forward(&self, x: &T64, p: &[T64]) -> Result<T64> {
        prelu_forward(x, &p[0])
    }
    fn backward(&self, dy: &T64, x: &T64, p: &[T64]) -> Result<LayerGrads<f64>> {
        prelu_backward(dy, x, &p[0])
    }
    fn param_names(&self) -> Vec<&'static str> {
        vec!["slope"]
    }
    /// Distance of the closest input to the kink at zero.
    fn tie_margin(&self, x: &T64, _: &[T64]) -> Option<f64> {
        Some(x.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs())))
    }
}

pub struct BatchNormProbe {
    pub input: [usize; 4],
}

impl GradProbe for BatchNormProbe {
    fn name(&self) -> String {
        format!("batchnorm2d (train) {:?}", self.input)
    }
    fn sample(&self, rng: &mut Rng) -> (T64, Vec<T64>) {
        let c = self.input[1];
        let x = T64::uniform(&self.input, -1.0, 1.0, rng);
        let gamma = T64::uniform(&[c], 0.5, 1.5, rng);
        let beta = T64::uniform(&[c], -0.5, 0.5, rng);
        (x, vec![gamma, beta])
    }
    fn forward(&self, x: &T64, p: &[T64]) -> Result<T64> {
        let mut bn = BatchNorm2d::<f64>::new(self.input[1]);
        bn.gamma = p[0].clone();
        bn.beta = p[1].clone();
        bn.forward(x, BnMode::Train).map(|(y, _)| y)
    }
    fn backward(&self, dy: &T64, x: &T64, p: &[T64]) -> Result<LayerGrads<f64>> {
        let mut bn = BatchNorm2d::<f64>::new(self.input[1]);
        bn.gamma = p[0].clone();
        bn.beta = p[1].clone();
        let (_, cache) = bn.forward(x, BnMode::Train)?;
        bn.backward(dy, &cache.expect("train mode caches"))
    }
    fn param_names(&self) -> Vec<&'static str> {
        vec!["gamma", "beta"]
    }
}

pub struct LinearProbe {
    pub batch: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl GradProbe for LinearProbe {
    fn name(&self) -> String {
        format!("linear {}x{}x{}", self.batch, self.in_dim, self.out_dim)
    }
    fn sample(&self, rng: &mut Rng) -> (T64, Vec<T64>) {
        let x = T64::uniform(&[self.batch, self.in_dim], -1.0, 1.0, rng);
        let w = T64::uniform(&[self.in_dim, self.out_dim], -1.0, 1.0, rng);
        let b = T64::uniform(&[self.out_dim], -1.0, 1.0, rng);
        (x, vec![w, b])
    }
    fn forward(&self, x: &T64, p: &[T64]) -> Result<T64> {
        linear_forward(x, &p[0], &p[1])
    }
    fn backward(&self, dy: &T64, x: &T64, p: &[T64]) -> Result<LayerGrads<f64>> {
        linear_backward(dy, x, &p[0], &p[1])
    }
    fn param_names(&self) -> Vec<&'static str> {
        vec!["weight", "bias"]
    }
}

/// Softmax cross-entropy with fixed labels; the "output" is the scalar loss.
pub struct SoftmaxXentProbe {
    pub batch: usize,
    pub classes: usize,
}

impl SoftmaxXentProbe {
    fn labels(&self) -> Vec<usize> {
        (0..self.batch)
            .map(|b| (b * 7 + 3) % self.classes)
            .collect()
    }
}

impl GradProbe for SoftmaxXentProbe {
    fn name(&self) -> String {
        format!("softmax_xent {}x{}", self.batch, self.classes)
    }
    fn sample(&self, rng: &mut Rng) -> (T64, Vec<T64>) {
        (
            T64::uniform(&[self.batch, self.classes], -3.0, 3.0, rng),
            vec![],
        )
    }
    fn forward(&self, x: &T64, _: &[T64]) -> Result<T64> {
        let (loss, _) = softmax_xent(x, &self.labels())?;
        T64::from_vec(&[1], vec![loss])
    }
    fn backward(&self, dy: &T64, x: &T64, _: &[T64]) -> Result<LayerGrads<f64>> {
        let (_, g) = softmax_xent(x, &self.labels())?;
        let s = dy.data()[0];
        Ok(LayerGrads {
            d_input: g.map(|v| v * s),
            d_params: vec![],
        })
    }
    fn param_names(&self) -> Vec<&'static str> {
        vec![]
    }
}

/// One probe per layer kind, at small sizes.
pub fn standard_probes() -> Vec<Box<dyn GradProbe>> {
    let nptn = NptnLayerSpec::new(2, 3, 4, 3, 1);
    vec![
        Box::new(ConvProbe {
            input: [2, 2, 5, 5],
            out_channels: 3,
            kernel: 3,
            pad: 1,
            stride: 1,
        }),
        Box::new(NptnProbe {
            batch: 2,
            height: 5,
            width: 5,
            spec: nptn,
        }),
        Box::new(NptnProbe {
            batch: 2,
            height: 4,
            width: 4,
            spec: NptnLayerSpec {
                aggregate: Aggregate::Mean,
                stride: 2,
                pad: 1,
                ..NptnLayerSpec::new(3, 2, 3, 2, 0)
            },
        }),
        Box::new(MaxPoolProbe {
            input: [2, 3, 4, 4],
            window: 2,
            stride: 2,
        }),
        Box::new(PreluProbe {
            input: [2, 3, 3, 3],
        }),
        Box::new(BatchNormProbe {
            input: [4, 3, 3, 3],
        }),
        Box::new(LinearProbe {
            batch: 3,
            in_dim: 4,
            out_dim: 5,
        }),
        Box::new(SoftmaxXentProbe {
            batch: 4,
            classes: 6,
        }),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = T64::from_vec(&[1], vec![3.0]).unwrap();
        let g = finite_diff_grad(|t| t.data()[0].powi(2), &x, EPS).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-9);
    }

    #[test]
    fn linear_sum_gives_ones() {
        let mut rng = Rng::new(1);
        let x = T64::uniform(&[7], -5.0, 5.0, &mut rng);
        let g = finite_diff_grad(|t| t.sum(), &x, EPS).unwrap();
        assert!(g.data().iter().all(|v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn non_finite_function_is_rejected() {
        let x = T64::from_vec(&[1], vec![0.0]).unwrap();
        assert!(matches!(
            finite_diff_grad(|_| f64::NAN, &x, EPS),
            Err(NptnError::Contract(_))
        ));
    }

    #[test]
    fn linear_layer_passes() {
        let p = LinearProbe {
            batch: 3,
            in_dim: 4,
            out_dim: 5,
        };
        let r = check_layer(&p, 20, RTOL, ATOL, 9).unwrap();
        assert!(r.passed, "{r}");
    }

    #[test]
    fn mutation_is_caught() {
        let p = Mutated {
            inner: LinearProbe {
                batch: 3,
                in_dim: 4,
                out_dim: 5,
            },
            scale: 1.01,
        };
        let r = check_layer(&p, 5, RTOL, ATOL, 9).unwrap();
        assert!(!r.passed);
    }

    #[test]
    fn prelu_instances_avoid_the_kink() {
        let p = PreluProbe {
            input: [2, 2, 2, 2],
        };
        let r = check_layer(&p, 10, RTOL, ATOL, 3).unwrap();
        assert!(r.passed, "{r}");
    }

    #[test]
    fn report_prints_table() {
        let r = check_layer(
            &SoftmaxXentProbe {
                batch: 2,
                classes: 3,
            },
            2,
            RTOL,
            ATOL,
            0,
        )
        .unwrap();
        let text = r.to_string();
        assert!(text.contains("d_input"));
        assert!(text.contains("PASS"));
        let mut buf = Vec::new();
        write_grad_csv(&[r], &mut buf).unwrap();
        assert!(String::from_utf8(buf)
            .unwrap()
            .starts_with("layer,tensor,max_abs_error"));
    }

    #[test]
    fn every_layer_passes_and_every_mutation_fails() {
        for probe in standard_probes() {
            let r = check_layer(&probe, 20, RTOL, ATOL, 11).unwrap();
            assert!(r.passed, "{r}");
            let bad = Mutated {
                inner: probe,
                scale: 1.01,
            };
            let r = check_layer(&bad, 3, RTOL, ATOL, 11).unwrap();
            assert!(!r.passed, "{r}");
        }
    }
}
