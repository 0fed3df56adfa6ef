use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 2e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam step at (1-based) iteration `t`.
pub fn adam_update(
    param: &mut Tensor<f32>,
    grad: &Tensor<f32>,
    m: &mut Tensor<f32>,
    v: &mut Tensor<f32>,
    cfg: &AdamConfig,
    t: u64,
) -> Result<()> {
    if grad.shape() != param.shape() || m.shape() != param.shape() || v.shape() != param.shape() {
        return Err(Error::dim(
            "adam_update",
            format!("param {:?}, grad {:?}, moments {:?}/{:?}", param.shape(), grad.shape(), m.shape(), v.shape()),
        ));
    }
    if t == 0 {
        return Err(Error::Config("Adam iterations are counted from 1".into()));
    }
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
    let step = (cfg.lr / bc1) as f32;
    let bc2 = bc2 as f32;
    let eps = cfg.eps as f32;
    let (p, g) = (param.data_mut(), grad.data());
    for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.data_mut()).zip(v.data_mut()) {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        *p -= step * *m / ((*v / bc2).sqrt() + eps);
    }
    Ok(())
}

/// First and second moments for every parameter, keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ParamStore,
    pub v: ParamStore,
}

impl AdamState {
    pub fn zeros_like(params: &ParamStore) -> Self {
        let zeros = ParamStore::from_vec(params.iter().map(|(n, t)| (n.clone(), Tensor::zeros(t.shape()))).collect());
        AdamState { m: zeros.clone(), v: zeros }
    }

    /// Update exactly the parameters named in `grads`.
    pub fn apply(&mut self, params: &mut ParamStore, grads: &ParamStore, cfg: &AdamConfig, t: u64) -> Result<()> {
        for (name, g) in grads.iter() {
            let p = params.get_mut(name)?;
            let m = self.m.get_mut(name)?;
            let v = self.v.get_mut(name)?;
            adam_update(p, g, m, v, cfg, t)?;
        }
        Ok(())
    }
}
