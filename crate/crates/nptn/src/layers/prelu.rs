use super::{expect_shape, LayerGrads};
use crate::error::{NptnError, Result};
use crate::tensor::{NDTensor, Scalar};

pub const PRELU_INIT: f64 = 0.25;

fn channel_layout<T: Scalar>(x: &NDTensor<T>, a: &NDTensor<T>) -> Result<(usize, usize, usize)> {
    if x.ndim() < 2 {
        return Err(NptnError::shape(format!(
            "prelu input {:?} has no channel axis",
            x.shape()
        )));
    }
    let (b, c) = (x.shape()[0], x.shape()[1]);
    expect_shape(a, &[c], "prelu slopes")?;
    Ok((b, c, x.len() / (b * c)))
}

/// `y = x` where `x > 0`, else `a[c]·x`, with one slope per channel (axis 1).
pub fn prelu_forward<T: Scalar>(x: &NDTensor<T>, a: &NDTensor<T>) -> Result<NDTensor<T>> {
    let (b, c, inner) = channel_layout(x, a)?;
    let mut y = x.clone();
    let yd = y.data_mut();
    for bi in 0..b {
        for ci in 0..c {
            let slope = a.data()[ci];
            for v in &mut yd[(bi * c + ci) * inner..(bi * c + ci + 1) * inner] {
                if *v <= T::zero() {
                    *v = slope * *v;
                }
            }
        }
    }
    Ok(y)
}

/// `d_params = [d_a]`.
pub fn prelu_backward<T: Scalar>(
    dy: &NDTensor<T>,
    x: &NDTensor<T>,
    a: &NDTensor<T>,
) -> Result<LayerGrads<T>> {
    let (b, c, inner) = channel_layout(x, a)?;
    expect_shape(dy, x.shape(), "prelu upstream gradient")?;
    let mut dx = NDTensor::zeros(x.shape());
    let mut da = NDTensor::zeros(&[c]);
    for bi in 0..b {
        for ci in 0..c {
            let range = (bi * c + ci) * inner..(bi * c + ci + 1) * inner;
            let slope = a.data()[ci];
            let mut acc = T::zero();
            for ((d, &g), &xv) in dx.data_mut()[range.clone()]
                .iter_mut()
                .zip(&dy.data()[range.clone()])
                .zip(&x.data()[range])
            {
                if xv > T::zero() {
                    *d = g;
                } else {
                    *d = slope * g;
                    acc += g * xv;
                }
            }
            da.data_mut()[ci] += acc;
        }
    }
    Ok(LayerGrads {
        d_input: dx,
        d_params: vec![da],
    })
}
