use super::config::TrainConfig;
use crate::error::{NptnError, Result};
use crate::tensor::{NDTensor, Scalar};

/// `base_lr · decay_factor^j` where `j` counts the decay epochs `≤ epoch`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    let j = cfg.decay_epochs.iter().filter(|&&e| e <= epoch).count();
    cfg.base_lr * cfg.decay_factor.powi(j as i32)
}

/// `v ← μ·v + g + λ·p`, then `p ← p − lr·v`.
pub fn sgd_step<T: Scalar>(
    param: &mut NDTensor<T>,
    grad: &NDTensor<T>,
    velocity: &mut NDTensor<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if grad.shape() != param.shape() || velocity.shape() != param.shape() {
        return Err(NptnError::shape(format!(
            "sgd step: param {:?}, grad {:?}, velocity {:?}",
            param.shape(),
            grad.shape(),
            velocity.shape()
        )));
    }
    let (lr, mu, wd) = (
        T::from_f64(lr),
        T::from_f64(momentum),
        T::from_f64(weight_decay),
    );
    for ((p, &g), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(velocity.data_mut())
    {
        *v = mu * *v + g + wd * *p;
        *p = *p - lr * *v;
    }
    Ok(())
}
