use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Real, Tensor};

/// `v ← μ·v + g + λ·w`, then `w ← w − lr·v`, elementwise.
pub fn sgd_step<T: Real>(w: &mut [T], g: &[T], v: &mut [T], lr: T, momentum: T, weight_decay: T) {
    for ((wi, &gi), vi) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        *vi = momentum * *vi + gi + weight_decay * *wi;
        *wi -= lr * *vi;
    }
}

/// Applies [`sgd_step`] to every parameter with a gradient. Weight decay
/// reaches conv and fully-connected weights only.
pub fn sgd_update<T: Real>(
    params: &mut ParamStore<T>,
    grads: &[(ParamId, Tensor<T>)],
    momentum_buffers: &mut [Tensor<T>],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if momentum_buffers.len() != params.len() {
        return Err(Error::shape(format!(
            "{} momentum buffers for {} parameters",
            momentum_buffers.len(),
            params.len()
        )));
    }
    let (lr, mu) = (T::of(lr), T::of(momentum));
    for (id, g) in grads {
        let kind = params.entry(*id).kind;
        let wd = if kind.is_weight() { T::of(weight_decay) } else { T::zero() };
        let v = &mut momentum_buffers[id.0];
        let w = params.value_mut(*id);
        if g.shape() != w.shape() || v.shape() != w.shape() {
            return Err(Error::shape(format!(
                "parameter {:?} has shape {:?}, gradient {:?}, buffer {:?}",
                id,
                w.shape(),
                g.shape(),
                v.shape()
            )));
        }
        sgd_step(w.data_mut(), g.data(), v.data_mut(), lr, mu, wd);
    }
    Ok(())
}
