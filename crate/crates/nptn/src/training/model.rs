use super::arch::{ArchSpec, LayerKind, LayerSpec, POOL};
use crate::error::{NptnError, Result};
use crate::layers::{
    conv2d_backward, conv2d_forward, conv2d_param_grads, linear_backward, linear_forward,
    nptn_backward, nptn_forward, nptn_param_grads, prelu_backward, prelu_forward, spatial_maxpool,
    spatial_maxpool_backward, BatchNorm2d, BnCache, BnMode, MaxRoute, NptnWeights, PoolRoute,
    PRELU_INIT,
};
use crate::rng::Rng;
use crate::tensor::{NDTensor, Scalar};

/// `conv|nptn → batchnorm → prelu → 2×2 maxpool`
#[derive(Clone, Debug, PartialEq)]
pub struct Block<T = f32> {
    pub spec: LayerSpec,
    pub weight: NDTensor<T>,
    pub bn: BatchNorm2d<T>,
    pub slope: NDTensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T = f32> {
    pub arch: ArchSpec,
    pub blocks: Vec<Block<T>>,
    /// `[D, K]`
    pub fc_weight: NDTensor<T>,
    pub fc_bias: NDTensor<T>,
}

struct BlockCache<T> {
    input: NDTensor<T>,
    route: Option<MaxRoute>,
    bn: BnCache<T>,
    bn_out: NDTensor<T>,
    pool: PoolRoute,
}

/// Activations kept by a train-mode forward for the backward pass.
pub struct ForwardCache<T = f32> {
    blocks: Vec<BlockCache<T>>,
    flat: NDTensor<T>,
}

/// Initialize a model. Feature filters are uniform in `±1/sqrt(C_in·k·k)`,
/// the classifier weights uniform in `±1/sqrt(D)` with a zero bias; batch
/// norm starts at the identity and PReLU slopes at 0.25. Draws are taken
/// from `rng` in layer order.
pub fn build_model<T: Scalar>(arch: &ArchSpec, rng: &mut Rng) -> Result<Model<T>> {
    arch.validate()?;
    let mut blocks = Vec::with_capacity(arch.layers.len());
    for l in &arch.layers {
        let s = 1.0 / ((l.in_channels * l.kernel * l.kernel) as f64).sqrt();
        blocks.push(Block {
            spec: *l,
            weight: NDTensor::uniform(&l.weight_shape(), -s, s, rng),
            bn: BatchNorm2d::new(l.out_channels),
            slope: NDTensor::full(&[l.out_channels], T::from_f64(PRELU_INIT)),
        });
    }
    let d = arch.flat_dim()?;
    let s = 1.0 / (d as f64).sqrt();
    Ok(Model {
        arch: arch.clone(),
        blocks,
        fc_weight: NDTensor::uniform(&[d, arch.num_classes], -s, s, rng),
        fc_bias: NDTensor::zeros(&[arch.num_classes]),
    })
}

impl<T: Scalar> Model<T> {
    /// Trainable tensors in canonical order: per block weight, bn gamma,
    /// bn beta, prelu slope; then classifier weight and bias.
    pub fn params(&self) -> Vec<&NDTensor<T>> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend([&b.weight, &b.bn.gamma, &b.bn.beta, &b.slope]);
        }
        out.extend([&self.fc_weight, &self.fc_bias]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut NDTensor<T>> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.extend([&mut b.weight, &mut b.bn.gamma, &mut b.bn.beta, &mut b.slope]);
        }
        out.extend([&mut self.fc_weight, &mut self.fc_bias]);
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..self.blocks.len() {
            for p in ["weight", "bn.gamma", "bn.beta", "prelu.slope"] {
                out.push(format!("block{i}.{p}"));
            }
        }
        out.extend(["fc.weight".to_string(), "fc.bias".to_string()]);
        out
    }

    /// Batch norm running statistics, per block mean then variance.
    pub fn buffers(&self) -> Vec<&NDTensor<T>> {
        self.blocks
            .iter()
            .flat_map(|b| [&b.bn.running_mean, &b.bn.running_var])
            .collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut NDTensor<T>> {
        self.blocks
            .iter_mut()
            .flat_map(|b| [&mut b.bn.running_mean, &mut b.bn.running_var])
            .collect()
    }

    pub fn buffer_names(&self) -> Vec<String> {
        (0..self.blocks.len())
            .flat_map(|i| {
                [
                    format!("block{i}.bn.running_mean"),
                    format!("block{i}.bn.running_var"),
                ]
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn feature(&self, b: &Block<T>, x: &NDTensor<T>) -> Result<(NDTensor<T>, Option<MaxRoute>)> {
        match b.spec.kind {
            LayerKind::Conv => Ok((conv2d_forward(x, &b.weight, None, b.spec.pad, 1)?, None)),
            LayerKind::Nptn => {
                let spec = b.spec.nptn(self.arch.aggregate);
                let w = NptnWeights::from_tensor(&spec, b.weight.clone())?;
                let (y, route) = nptn_forward(x, &spec, &w)?;
                Ok((y, Some(route)))
            }
        }
    }

    fn check_input(&self, x: &NDTensor<T>) -> Result<usize> {
        match x.shape() {
            &[b, c, h, w] if [c, h, w] == self.arch.input => Ok(b),
            s => Err(NptnError::shape(format!(
                "model input {s:?} does not match [B, {:?}]",
                self.arch.input
            ))),
        }
    }

    fn flatten(x: NDTensor<T>) -> Result<NDTensor<T>> {
        let b = x.shape()[0];
        let d = x.len() / b;
        x.reshape(&[b, d])
    }

    /// Eval-mode logits `[B, K]`, using batch norm running statistics.
    pub fn predict(&self, x: &NDTensor<T>) -> Result<NDTensor<T>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for b in &self.blocks {
            let (z, _) = self.feature(b, &h)?;
            let z = b.bn.infer(&z)?;
            let a = prelu_forward(&z, &b.slope)?;
            h = spatial_maxpool(&a, POOL, POOL)?.0;
        }
        linear_forward(&Self::flatten(h)?, &self.fc_weight, &self.fc_bias)
    }

    /// Train-mode forward. Updates batch norm running statistics.
    pub fn forward_train(&mut self, x: &NDTensor<T>) -> Result<(NDTensor<T>, ForwardCache<T>)> {
        self.check_input(x)?;
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut h = x.clone();
        for i in 0..self.blocks.len() {
            let (z, route) = self.feature(&self.blocks[i], &h)?;
            let b = &mut self.blocks[i];
            let (bn_out, bn) = b.bn.forward(&z, BnMode::Train)?;
            let a = prelu_forward(&bn_out, &b.slope)?;
            let (pooled, pool) = spatial_maxpool(&a, POOL, POOL)?;
            caches.push(BlockCache {
                input: std::mem::replace(&mut h, pooled),
                route,
                bn: bn.expect("train mode caches"),
                bn_out,
                pool,
            });
        }
        let flat = Self::flatten(h)?;
        let logits = linear_forward(&flat, &self.fc_weight, &self.fc_bias)?;
        Ok((
            logits,
            ForwardCache {
                blocks: caches,
                flat,
            },
        ))
    }

    /// Gradients of all parameters, in [`Model::params`] order.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        d_logits: &NDTensor<T>,
    ) -> Result<Vec<NDTensor<T>>> {
        let fc = linear_backward(d_logits, &cache.flat, &self.fc_weight, &self.fc_bias)?;
        let mut block_grads = Vec::with_capacity(self.blocks.len());
        let mut d = Some(fc.d_input);
        for (i, (b, c)) in self.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            let [bs, ch, h, w] = c.pool.input_shape;
            let d_pool_in = spatial_maxpool_backward(
                &d.take()
                    .expect("upstream gradient")
                    .reshape(&pooled_shape(bs, ch, h, w))?,
                &c.pool,
            )?;
            let pr = prelu_backward(&d_pool_in, &c.bn_out, &b.slope)?;
            let bn = b.bn.backward(&pr.d_input, &c.bn)?;
            let dy = &bn.d_input;
            // the first block's input gradient is never used
            let (d_weight, d_input) = match b.spec.kind {
                LayerKind::Conv if i == 0 => (
                    conv2d_param_grads(dy, &c.input, &b.weight, b.spec.pad)?.remove(0),
                    None,
                ),
                LayerKind::Conv => {
                    let g = conv2d_backward(dy, &c.input, &b.weight, false, b.spec.pad, 1)?;
                    (
                        g.d_params.into_iter().next().expect("weight gradient"),
                        Some(g.d_input),
                    )
                }
                LayerKind::Nptn => {
                    let spec = b.spec.nptn(self.arch.aggregate);
                    let wts = NptnWeights::from_tensor(&spec, b.weight.clone())?;
                    let route = c.route.as_ref().expect("nptn route");
                    if i == 0 {
                        (nptn_param_grads(dy, &c.input, &spec, &wts, route)?, None)
                    } else {
                        let g = nptn_backward(dy, &c.input, &spec, &wts, route)?;
                        (
                            g.d_params.into_iter().next().expect("weight gradient"),
                            Some(g.d_input),
                        )
                    }
                }
            };
            let mut bn_params = bn.d_params.into_iter();
            block_grads.push([
                d_weight,
                bn_params.next().expect("gamma gradient"),
                bn_params.next().expect("beta gradient"),
                pr.d_params.into_iter().next().expect("slope gradient"),
            ]);
            d = d_input;
        }
        let mut out: Vec<NDTensor<T>> = block_grads.into_iter().rev().flatten().collect();
        let mut fcp = fc.d_params.into_iter();
        out.push(fcp.next().expect("fc weight gradient"));
        out.push(fcp.next().expect("fc bias gradient"));
        Ok(out)
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let bn = |b: &BatchNorm2d<T>| BatchNorm2d {
            gamma: b.gamma.cast(),
            beta: b.beta.cast(),
            running_mean: b.running_mean.cast(),
            running_var: b.running_var.cast(),
            eps: b.eps,
            momentum: b.momentum,
        };
        Model {
            arch: self.arch.clone(),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    spec: b.spec,
                    weight: b.weight.cast(),
                    bn: bn(&b.bn),
                    slope: b.slope.cast(),
                })
                .collect(),
            fc_weight: self.fc_weight.cast(),
            fc_bias: self.fc_bias.cast(),
        }
    }
}

fn pooled_shape(b: usize, c: usize, h: usize, w: usize) -> [usize; 4] {
    [b, c, (h - POOL) / POOL + 1, (w - POOL) / POOL + 1]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_grad;
    use crate::layers::softmax_xent;
    use crate::training::arch::{DatasetKind, ModelLabel};

    fn tiny(kind: LayerKind, g: usize) -> ArchSpec {
        let mut a = ArchSpec::two_layer([2, 8, 8], kind, 3, g, 2);
        for l in &mut a.layers {
            l.kernel = 3;
            l.pad = 1;
        }
        a.num_classes = 4;
        a
    }

    #[test]
    fn block_structure_audit() {
        let a = "mnist-nptn-12-3"
            .parse::<ModelLabel>()
            .unwrap()
            .arch(DatasetKind::Mnist);
        let m: Model = build_model(&a, &mut Rng::new(0)).unwrap();
        assert_eq!(m.blocks.len(), 2);
        assert_eq!(m.blocks[0].weight.shape(), &[1, 12, 3, 5, 5]);
        assert_eq!(m.blocks[1].weight.shape(), &[12, 16, 3, 5, 5]);
        assert_eq!(m.blocks[1].bn.channels(), 16);
        assert_eq!(m.blocks[1].slope.data(), &[0.25; 16]);
        assert_eq!(m.fc_weight.shape(), &[784, 10]);
        assert_eq!(m.params().len(), m.param_names().len());
        assert_eq!(m.buffers().len(), 4);
        let x = NDTensor::zeros(&[3, 1, 28, 28]);
        assert_eq!(m.predict(&x).unwrap().shape(), &[3, 10]);
    }

    #[test]
    fn build_is_seeded() {
        let a = tiny(LayerKind::Nptn, 2);
        let m1: Model = build_model(&a, &mut Rng::new(4)).unwrap();
        let m2: Model = build_model(&a, &mut Rng::new(4)).unwrap();
        let m3: Model = build_model(&a, &mut Rng::new(5)).unwrap();
        assert_eq!(m1, m2);
        assert_ne!(m1, m3);
    }

    #[test]
    fn wrong_input_shape() {
        let m: Model = build_model(&tiny(LayerKind::Conv, 1), &mut Rng::new(0)).unwrap();
        assert!(matches!(
            m.predict(&NDTensor::zeros(&[1, 1, 8, 8])),
            Err(NptnError::Shape(_))
        ));
    }

    /// Whole-network gradient against finite differences of the batch loss.
    fn check_model(kind: LayerKind, g: usize) {
        let a = tiny(kind, g);
        let mut rng = Rng::new(17);
        let model: Model<f64> = build_model(&a, &mut rng).unwrap();
        let x = NDTensor::uniform(&[3, 2, 8, 8], -1.0, 1.0, &mut rng);
        let labels = vec![0, 3, 1];
        let loss_of = |m: &Model<f64>| {
            let mut m = m.clone();
            let (logits, _) = m.forward_train(&x).unwrap();
            softmax_xent(&logits, &labels).unwrap().0
        };
        let mut m = model.clone();
        let (logits, cache) = m.forward_train(&x).unwrap();
        let (_, dl) = softmax_xent(&logits, &labels).unwrap();
        let grads = model.backward(&cache, &dl).unwrap();
        // both filter banks, a prelu slope and the classifier bias
        for pi in [0, 3, 4, 9] {
            let numeric = finite_diff_grad(
                |p| {
                    let mut mm = model.clone();
                    *mm.params_mut()[pi] = p.clone();
                    loss_of(&mm)
                },
                model.params()[pi],
                1e-5,
            )
            .unwrap();
            for (a, n) in grads[pi].data().iter().zip(numeric.data()) {
                assert!(
                    (a - n).abs() <= 1e-5 + 1e-3 * n.abs(),
                    "param {pi}: {a} vs {n}"
                );
            }
        }
    }

    #[test]
    fn conv_model_gradient() {
        check_model(LayerKind::Conv, 1);
    }

    #[test]
    fn nptn_model_gradient() {
        check_model(LayerKind::Nptn, 2);
    }
}
