use super::{dims4, expect_shape, LayerGrads};
use crate::error::{NptnError, Result};
use crate::tensor::{col2im_add, gemm, im2col_into, transpose_into, NDTensor, Scalar, Window};

/// Standard cross-correlation with zero padding.
///
/// `x: [B,C,H,W]`, `w: [O,C,k,k]`, `bias: [O]` → `[B,O,H',W']`.
pub fn conv2d_forward<T: Scalar>(
    x: &NDTensor<T>,
    w: &NDTensor<T>,
    bias: Option<&NDTensor<T>>,
    pad: usize,
    stride: usize,
) -> Result<NDTensor<T>> {
    let (batch, c, h, wd) = dims4(x, "conv2d input")?;
    let (o, k) = conv_bank_dims(w, c)?;
    if let Some(b) = bias {
        expect_shape(b, &[o], "conv2d bias")?;
    }
    let win = Window::new(k, pad, stride);
    let (oh, ow) = win.output_size(h, wd)?;
    let hw = oh * ow;
    let ckk = c * k * k;

    let mut y = NDTensor::zeros(&[batch, o, oh, ow]);
    let mut cols = vec![T::zero(); ckk * hw];
    let plane = c * h * wd;
    for b in 0..batch {
        im2col_into(
            &x.data()[b * plane..(b + 1) * plane],
            c,
            h,
            wd,
            win,
            oh,
            ow,
            &mut cols,
        );
        let yb = &mut y.data_mut()[b * o * hw..(b + 1) * o * hw];
        gemm(o, ckk, hw, w.data(), &cols, yb);
        if let Some(bias) = bias {
            for (oc, row) in yb.chunks_mut(hw).enumerate() {
                let bv = bias.data()[oc];
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok(y)
}

fn conv_bank_dims<T: Scalar>(w: &NDTensor<T>, channels: usize) -> Result<(usize, usize)> {
    match w.shape() {
        &[o, c, k, k2] if c == channels && k == k2 => Ok((o, k)),
        s => Err(NptnError::shape(format!(
            "conv2d weights {s:?} incompatible with {channels} input channels (expected [O,{channels},k,k])"
        ))),
    }
}

/// Backward of [`conv2d_forward`]. `d_params = [d_w]` or `[d_w, d_bias]`.
pub fn conv2d_backward<T: Scalar>(
    dy: &NDTensor<T>,
    x: &NDTensor<T>,
    w: &NDTensor<T>,
    with_bias: bool,
    pad: usize,
    stride: usize,
) -> Result<LayerGrads<T>> {
    let (d_input, d_params) = conv2d_backward_impl(dy, x, w, with_bias, pad, stride, true)?;
    Ok(LayerGrads {
        d_input: d_input.expect("input gradient requested"),
        d_params,
    })
}

/// Parameter gradients only, for a layer that sees the network input.
pub(crate) fn conv2d_param_grads<T: Scalar>(
    dy: &NDTensor<T>,
    x: &NDTensor<T>,
    w: &NDTensor<T>,
    pad: usize,
) -> Result<Vec<NDTensor<T>>> {
    Ok(conv2d_backward_impl(dy, x, w, false, pad, 1, false)?.1)
}

fn conv2d_backward_impl<T: Scalar>(
    dy: &NDTensor<T>,
    x: &NDTensor<T>,
    w: &NDTensor<T>,
    with_bias: bool,
    pad: usize,
    stride: usize,
    input_grad: bool,
) -> Result<(Option<NDTensor<T>>, Vec<NDTensor<T>>)> {
    let (batch, c, h, wd) = dims4(x, "conv2d input")?;
    let (o, k) = conv_bank_dims(w, c)?;
    let win = Window::new(k, pad, stride);
    let (oh, ow) = win.output_size(h, wd)?;
    expect_shape(dy, &[batch, o, oh, ow], "conv2d upstream gradient")?;
    let hw = oh * ow;
    let ckk = c * k * k;
    let plane = c * h * wd;

    let mut dx = input_grad.then(|| NDTensor::zeros(x.shape()));
    let mut db = NDTensor::zeros(&[o]);

    let mut w_t = vec![T::zero(); ckk * o];
    transpose_into(o, ckk, w.data(), &mut w_t);
    let mut cols = vec![T::zero(); ckk * hw];
    let mut dy_t = vec![T::zero(); hw * o];
    // dW is accumulated transposed, [ckk, o]
    let mut dw_t = vec![T::zero(); ckk * o];
    let mut dw_b = vec![T::zero(); ckk * o];
    let mut dcols = vec![T::zero(); ckk * hw];

    for b in 0..batch {
        let dyb = &dy.data()[b * o * hw..(b + 1) * o * hw];
        im2col_into(
            &x.data()[b * plane..(b + 1) * plane],
            c,
            h,
            wd,
            win,
            oh,
            ow,
            &mut cols,
        );
        transpose_into(o, hw, dyb, &mut dy_t);
        gemm(ckk, hw, o, &cols, &dy_t, &mut dw_b);
        for (acc, v) in dw_t.iter_mut().zip(&dw_b) {
            *acc += *v;
        }
        if let Some(dx) = dx.as_mut() {
            gemm(ckk, o, hw, &w_t, dyb, &mut dcols);
            col2im_add(
                &dcols,
                c,
                h,
                wd,
                win,
                oh,
                ow,
                &mut dx.data_mut()[b * plane..(b + 1) * plane],
            );
        }
        if with_bias {
            for (oc, row) in dyb.chunks(hw).enumerate() {
                let s: T = row.iter().copied().sum();
                db.data_mut()[oc] += s;
            }
        }
    }

    let mut dw = NDTensor::zeros(w.shape());
    transpose_into(ckk, o, &dw_t, dw.data_mut());
    let mut d_params = vec![dw];
    if with_bias {
        d_params.push(db);
    }
    Ok((dx, d_params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::Tensor;

    /// Direct sliding-window loops in f64.
    fn naive_conv(
        x: &NDTensor<f64>,
        w: &NDTensor<f64>,
        pad: usize,
        stride: usize,
    ) -> NDTensor<f64> {
        let (b, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (o, k) = (w.shape()[0], w.shape()[2]);
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let mut y = NDTensor::zeros(&[b, o, oh, ow]);
        for bi in 0..b {
            for oc in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = 0.0;
                        for ci in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * stride + ki) as isize - pad as isize;
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd
                                    {
                                        s += x.at(&[bi, ci, iy as usize, ix as usize])
                                            * w.at(&[oc, ci, ki, kj]);
                                    }
                                }
                            }
                        }
                        y.set(&[bi, oc, oy, ox], s);
                    }
                }
            }
        }
        y
    }

    #[test]
    fn delta_kernel_is_identity() {
        let x = Tensor::from_vec(&[1, 1, 3, 3], (1..=9).map(|v| v as f32).collect()).unwrap();
        let mut w = Tensor::zeros(&[1, 1, 3, 3]);
        w.set(&[0, 0, 1, 1], 1.0);
        let y = conv2d_forward(&x, &w, None, 1, 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn scalar_kernel_scales() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::from_vec(&[1, 1, 1, 1], vec![2.0]).unwrap();
        let y = conv2d_forward(&x, &w, None, 0, 1).unwrap();
        assert_eq!(y.data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn ones_kernel_sums_channels() {
        let x = Tensor::from_vec(&[1, 2, 1, 2], vec![1.0, 2.0, 10.0, 20.0]).unwrap();
        let w = Tensor::full(&[1, 2, 1, 1], 1.0);
        let y = conv2d_forward(&x, &w, None, 0, 1).unwrap();
        assert_eq!(y.data(), &[11.0, 22.0]);
    }

    #[test]
    fn bias_is_added_per_output_channel() {
        let x = Tensor::full(&[1, 1, 2, 2], 1.0);
        let w = Tensor::full(&[2, 1, 1, 1], 1.0);
        let bias = Tensor::from_vec(&[2], vec![0.5, -1.0]).unwrap();
        let y = conv2d_forward(&x, &w, Some(&bias), 0, 1).unwrap();
        assert_eq!(y.data(), &[1.5, 1.5, 1.5, 1.5, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(matches!(
            conv2d_forward(&x, &w, None, 1, 1),
            Err(NptnError::Shape(_))
        ));
    }

    #[test]
    fn matches_naive_oracle_with_stride() {
        let mut rng = Rng::new(21);
        for &(pad, stride) in &[(0, 1), (1, 1), (1, 2), (2, 1)] {
            let x = NDTensor::<f64>::uniform(&[2, 3, 7, 7], -1.0, 1.0, &mut rng);
            let w = NDTensor::<f64>::uniform(&[4, 3, 3, 3], -1.0, 1.0, &mut rng);
            let y = conv2d_forward(&x, &w, None, pad, stride).unwrap();
            assert!(y.max_abs_diff(&naive_conv(&x, &w, pad, stride)) < 1e-12);
        }
    }
}
