use indexmap::IndexMap;

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::Tensor;

/// One bias-corrected Adam update at optimizer step `step` (1-based).
/// `m` and `v` are created on first use.
pub fn adam_step(
    params: &mut ParamStore<f32>,
    grads: &IndexMap<String, Tensor<f32>>,
    m: &mut ParamStore<f32>,
    v: &mut ParamStore<f32>,
    step: u64,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if step == 0 {
        return Err(Error::Config("Adam steps are 1-based".into()));
    }
    for (name, g) in grads {
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    let scale = match cfg.clip_norm {
        Some(c) => {
            let norm = grads
                .values()
                .flat_map(|g| g.data())
                .map(|&x| (x as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            if norm > c { c / norm } else { 1.0 }
        }
        None => 1.0,
    };
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for (name, p) in params.iter_mut() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Config(format!("no gradient for parameter `{name}`")))?;
        if g.shape() != p.shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
        let mt = m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
        let vt = v.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
        if mt.shape() != p.shape() || vt.shape() != p.shape() {
            return Err(Error::shape("adam_step moments", p.shape(), mt.shape()));
        }
        for (((x, &gr), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(mt.data_mut())
            .zip(vt.data_mut())
        {
            let gr = gr as f64 * scale;
            let m1 = cfg.beta1 * *mi as f64 + (1.0 - cfg.beta1) * gr;
            let v1 = cfg.beta2 * *vi as f64 + (1.0 - cfg.beta2) * gr * gr;
            *mi = m1 as f32;
            *vi = v1 as f32;
            let update = lr * (m1 / bc1) / ((v1 / bc2).sqrt() + cfg.adam_eps);
            *x = (*x as f64 - update) as f32;
        }
    }
    Ok(())
}
