use super::{expect_shape, LayerGrads};
use crate::error::{NptnError, Result};
use crate::tensor::{gemm, transpose_into, NDTensor, Scalar};

fn dims<T: Scalar>(
    x: &NDTensor<T>,
    w: &NDTensor<T>,
    b: &NDTensor<T>,
) -> Result<(usize, usize, usize)> {
    let (batch, d) = match x.shape() {
        &[batch, d] => (batch, d),
        s => return Err(NptnError::shape(format!("linear input {s:?} is not [B,D]"))),
    };
    let k = match w.shape() {
        &[d2, k] if d2 == d => k,
        s => {
            return Err(NptnError::shape(format!(
                "linear weights {s:?} do not match input width {d}"
            )))
        }
    };
    expect_shape(b, &[k], "linear bias")?;
    Ok((batch, d, k))
}

/// `y = x·W + b` with `x: [B,D]`, `W: [D,K]`, `b: [K]`.
pub fn linear_forward<T: Scalar>(
    x: &NDTensor<T>,
    w: &NDTensor<T>,
    b: &NDTensor<T>,
) -> Result<NDTensor<T>> {
    let (batch, d, k) = dims(x, w, b)?;
    let mut y = NDTensor::zeros(&[batch, k]);
    gemm(batch, d, k, x.data(), w.data(), y.data_mut());
    for row in y.data_mut().chunks_mut(k) {
        for (v, &bv) in row.iter_mut().zip(b.data()) {
            *v += bv;
        }
    }
    Ok(y)
}

/// `d_params = [d_W, d_b]`.
pub fn linear_backward<T: Scalar>(
    dy: &NDTensor<T>,
    x: &NDTensor<T>,
    w: &NDTensor<T>,
    b: &NDTensor<T>,
) -> Result<LayerGrads<T>> {
    let (batch, d, k) = dims(x, w, b)?;
    expect_shape(dy, &[batch, k], "linear upstream gradient")?;

    let mut x_t = vec![T::zero(); d * batch];
    transpose_into(batch, d, x.data(), &mut x_t);
    let mut dw = NDTensor::zeros(&[d, k]);
    gemm(d, batch, k, &x_t, dy.data(), dw.data_mut());

    let mut w_t = vec![T::zero(); k * d];
    transpose_into(d, k, w.data(), &mut w_t);
    let mut dx = NDTensor::zeros(&[batch, d]);
    gemm(batch, k, d, dy.data(), &w_t, dx.data_mut());

    let mut db = NDTensor::zeros(&[k]);
    for row in dy.data().chunks(k) {
        for (acc, &g) in db.data_mut().iter_mut().zip(row) {
            *acc += g;
        }
    }
    Ok(LayerGrads {
        d_input: dx,
        d_params: vec![dw, db],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn identity_weights() {
        let x = Tensor::from_vec(&[2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let w = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let y = linear_forward(&x, &w, &Tensor::zeros(&[2])).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn hand_computed() {
        let x = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::from_vec(&[2, 1], vec![1.0, 1.0]).unwrap();
        let b = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        assert_eq!(linear_forward(&x, &w, &b).unwrap().data(), &[4.0]);

        let g = linear_backward(&Tensor::full(&[1, 1], 1.0), &x, &w, &b).unwrap();
        assert_eq!(g.d_params[0].data(), &[1.0, 2.0]);
        assert_eq!(g.d_params[1].data(), &[1.0]);
        assert_eq!(g.d_input.data(), &[1.0, 1.0]);
    }

    #[test]
    fn mismatched_width() {
        let x = Tensor::zeros(&[1, 3]);
        let w = Tensor::zeros(&[2, 1]);
        assert!(linear_forward(&x, &w, &Tensor::zeros(&[1])).is_err());
    }
}
