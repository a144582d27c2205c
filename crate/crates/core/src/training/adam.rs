use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<F: Element = f32> {
    pub step: u64,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
}

impl<F: Element> OptimizerState<F> {
    pub fn new(params: &[Tensor<F>]) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Tensor::zeros(p.dims().to_vec()).expect("parameter dims are positive"))
                .collect()
        };
        OptimizerState {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One bias-corrected Adam update. Fails before touching anything if a
/// gradient is non-finite, naming the parameter.
pub fn adam_step<F: Element>(
    params: &mut [Tensor<F>],
    grads: &[Tensor<F>],
    names: &[&str],
    state: &mut OptimizerState<F>,
    lr: f64,
    hp: AdamParams,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || names.len() != params.len() {
        return Err(Error::invalid("adam", "parameter, gradient and state counts differ"));
    }
    for ((p, g), name) in params.iter().zip(grads).zip(names) {
        if p.dims() != g.dims() {
            return Err(Error::shape("adam", p.dims(), g.dims()));
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(name.to_string()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, x) in p.data_mut().iter_mut().enumerate() {
            let gj = g[j].as_f64();
            let mj = hp.beta1 * m[j].as_f64() + (1.0 - hp.beta1) * gj;
            let vj = hp.beta2 * v[j].as_f64() + (1.0 - hp.beta2) * gj * gj;
            m[j] = F::of(mj);
            v[j] = F::of(vj);
            let update = lr * (mj / c1) / ((vj / c2).sqrt() + hp.eps);
            *x = F::of(x.as_f64() - update);
        }
    }
    Ok(())
}

/// Rescale `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<F: Element>(grads: &mut [Tensor<F>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads {
            for v in g.data_mut() {
                *v = F::of(v.as_f64() * s);
            }
        }
    }
    norm
}
