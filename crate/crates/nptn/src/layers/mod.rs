//! Forward and hand-written backward passes.
//!
//! Layers are plain functions over `(input, parameters)`; the only stateful
//! piece is [`BatchNorm2d`], whose running statistics belong to the training
//! loop. Every backward pass returns a [`LayerGrads`] whose `d_params` follow
//! the parameter order documented on the corresponding forward function.

mod batchnorm;
mod conv;
mod linear;
mod loss;
mod nptn;
mod pool;
mod prelu;

pub use batchnorm::{BatchNorm2d, BnCache, BnMode};
pub(crate) use conv::conv2d_param_grads;
pub use conv::{conv2d_backward, conv2d_forward};
pub use linear::{linear_backward, linear_forward};
pub use loss::softmax_xent;
pub(crate) use nptn::nptn_param_grads;
pub use nptn::{nptn_backward, nptn_forward, Aggregate, MaxRoute, NptnLayerSpec, NptnWeights};
pub use pool::{spatial_maxpool, spatial_maxpool_backward, PoolRoute};
pub use prelu::{prelu_backward, prelu_forward, PRELU_INIT};

use crate::error::{NptnError, Result};
use crate::tensor::{NDTensor, Scalar};

#[derive(Clone, Debug)]
pub struct LayerGrads<T = f32> {
    pub d_input: NDTensor<T>,
    pub d_params: Vec<NDTensor<T>>,
}

fn dims4<T: Scalar>(x: &NDTensor<T>, what: &str) -> Result<(usize, usize, usize, usize)> {
    match x.shape() {
        &[b, c, h, w] => Ok((b, c, h, w)),
        s => Err(NptnError::shape(format!(
            "{what}: expected [B,C,H,W], got {s:?}"
        ))),
    }
}

fn expect_shape<T: Scalar>(x: &NDTensor<T>, shape: &[usize], what: &str) -> Result<()> {
    if x.shape() != shape {
        return Err(NptnError::shape(format!(
            "{what}: expected shape {shape:?}, got {:?}",
            x.shape()
        )));
    }
    Ok(())
}
