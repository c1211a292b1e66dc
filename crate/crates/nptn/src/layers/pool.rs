use super::{dims4, expect_shape};
use crate::error::{NptnError, Result};
use crate::tensor::{NDTensor, Scalar};

/// Argmax positions of a spatial max pool: for each output element, the flat
/// offset of the winning input element within its `H × W` plane.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolRoute {
    pub input_shape: [usize; 4],
    pub argmax: Vec<u32>,
}

/// Spatial max pooling with a square `window` and `stride`. Trailing rows and
/// columns that do not fill a window are dropped. Ties keep the first element
/// in row-major scan order.
pub fn spatial_maxpool<T: Scalar>(
    x: &NDTensor<T>,
    window: usize,
    stride: usize,
) -> Result<(NDTensor<T>, PoolRoute)> {
    let (b, c, h, w) = dims4(x, "maxpool input")?;
    if window == 0 || stride == 0 || h < window || w < window {
        return Err(NptnError::shape(format!(
            "maxpool window {window} (stride {stride}) does not fit a {h}x{w} plane"
        )));
    }
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut y = NDTensor::zeros(&[b, c, oh, ow]);
    let mut argmax = vec![0u32; b * c * oh * ow];
    let yd = y.data_mut();
    for p in 0..b * c {
        let plane = &x.data()[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_i = (oy * stride) * w + ox * stride;
                let mut best = plane[best_i];
                for dy in 0..window {
                    for dx in 0..window {
                        let i = (oy * stride + dy) * w + ox * stride + dx;
                        if plane[i] > best {
                            best = plane[i];
                            best_i = i;
                        }
                    }
                }
                let o = p * oh * ow + oy * ow + ox;
                yd[o] = best;
                argmax[o] = best_i as u32;
            }
        }
    }
    Ok((
        y,
        PoolRoute {
            input_shape: [b, c, h, w],
            argmax,
        },
    ))
}

/// Routes each upstream gradient to its window's argmax.
pub fn spatial_maxpool_backward<T: Scalar>(
    dy: &NDTensor<T>,
    route: &PoolRoute,
) -> Result<NDTensor<T>> {
    let [b, c, h, w] = route.input_shape;
    let per_plane = route.argmax.len() / (b * c);
    if dy.len() != route.argmax.len() || dy.shape()[0] != b || dy.shape()[1] != c {
        return Err(NptnError::contract(format!(
            "maxpool gradient {:?} does not match the recorded route",
            dy.shape()
        )));
    }
    expect_shape(
        dy,
        &[b, c, dy.shape()[2], dy.shape()[3]],
        "maxpool upstream gradient",
    )?;
    let mut dx = NDTensor::zeros(&route.input_shape);
    let dxd = dx.data_mut();
    for p in 0..b * c {
        for j in 0..per_plane {
            let o = p * per_plane + j;
            dxd[p * h * w + route.argmax[o] as usize] += dy.data()[o];
        }
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn constant_input_quarter_resolution() {
        let x = Tensor::full(&[1, 2, 4, 4], 0.7);
        let (y, _) = spatial_maxpool(&x, 2, 2).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn single_window_and_backward() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, route) = spatial_maxpool(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[4.0]);
        let dx = spatial_maxpool_backward(&Tensor::full(&[1, 1, 1, 1], 1.0), &route).unwrap();
        assert_eq!(dx.data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn ties_take_first_in_scan_order() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![0.0, 5.0, 5.0, 5.0]).unwrap();
        let (_, route) = spatial_maxpool(&x, 2, 2).unwrap();
        assert_eq!(route.argmax, vec![1]);
    }

    #[test]
    fn odd_size_truncates() {
        let x = Tensor::from_vec(&[1, 1, 3, 3], (0..9).map(|v| v as f32).collect()).unwrap();
        let (y, _) = spatial_maxpool(&x, 2, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[4.0]);
    }

    #[test]
    fn empty_window_is_shape_error() {
        let x = Tensor::zeros(&[1, 1, 1, 1]);
        assert!(matches!(
            spatial_maxpool(&x, 2, 2),
            Err(NptnError::Shape(_))
        ));
    }
}
