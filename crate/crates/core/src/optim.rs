//! Adam with bias correction and the inverse-sqrt warmup schedule.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};
use indexmap::IndexMap;

#[derive(Clone, Copy, Debug)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// Per-parameter first/second moments plus the shared step counter.
pub struct AdamState<E: Scalar = f32> {
    m: IndexMap<String, Tensor<E>>,
    v: IndexMap<String, Tensor<E>>,
    step: u64,
    pub hyper: AdamHyper,
}

impl<E: Scalar> AdamState<E> {
    pub fn new(hyper: AdamHyper) -> Self {
        AdamState {
            m: IndexMap::new(),
            v: IndexMap::new(),
            step: 0,
            hyper,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

impl<E: Scalar> Default for AdamState<E> {
    fn default() -> Self {
        Self::new(AdamHyper::default())
    }
}

/// One Adam update over all non-frozen parameters that have gradients.
/// Frozen parameters are untouched even when a gradient is supplied.
pub fn adam_step<E: Scalar>(
    params: &mut ParamStore<E>,
    grads: &IndexMap<String, Tensor<E>>,
    state: &mut AdamState<E>,
    lr: f64,
) -> Result<()> {
    if lr <= 0.0 {
        return Err(Error::invalid(format!("learning rate must be > 0, got {lr}")));
    }
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::invalid(format!("gradient for unknown parameter {name}")))?;
        if g.shape() != p.shape() {
            return Err(Error::shape(format!(
                "gradient shape {:?} vs parameter {:?} for {name}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.all_finite() {
            return Err(Error::invalid(format!("non-finite gradient for {name}")));
        }
    }

    state.step += 1;
    let t = state.step;
    let h = state.hyper;
    let b1 = E::from_f64(h.beta1);
    let b2 = E::from_f64(h.beta2);
    let one_m_b1 = E::from_f64(1.0 - h.beta1);
    let one_m_b2 = E::from_f64(1.0 - h.beta2);
    let bc1 = E::from_f64(1.0 - h.beta1.powi(t as i32));
    let bc2 = E::from_f64(1.0 - h.beta2.powi(t as i32));
    let eps = E::from_f64(h.eps);
    let lr_e = E::from_f64(lr);

    for (name, g) in grads {
        if params.is_frozen(name) {
            continue;
        }
        let shape = g.shape().to_vec();
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(shape.clone()));
        for (mi, &gi) in m.data_mut().iter_mut().zip(g.data()) {
            *mi = b1 * *mi + one_m_b1 * gi;
        }
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(shape));
        for (vi, &gi) in v.data_mut().iter_mut().zip(g.data()) {
            *vi = b2 * *vi + one_m_b2 * gi * gi;
        }
        let p = params.get_mut(name).expect("validated above");
        let (m, v) = (&state.m[name], &state.v[name]);
        for ((pi, &mi), &vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            *pi = *pi - lr_e * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// d_model^-0.5 * min(step^-0.5, step * warmup^-1.5); peaks at step == warmup.
pub fn noam_lr(step: u64, d_model: usize, warmup: u64) -> Result<f64> {
    if step == 0 {
        return Err(Error::invalid("noam_lr: step must be >= 1"));
    }
    if warmup == 0 {
        return Err(Error::invalid("noam_lr: warmup must be >= 1"));
    }
    let s = step as f64;
    let w = warmup as f64;
    Ok((d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5)))
}

/// Scale gradients in place so their global L2 norm is at most `max_norm`.
pub fn clip_grad_norm<E: Scalar>(grads: &mut IndexMap<String, Tensor<E>>, max_norm: f64) {
    let mut sq = 0.0f64;
    for g in grads.values() {
        for &v in g.data() {
            let x = v.as_f64();
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = E::from_f64(max_norm / norm);
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v = *v * scale;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(v: f64) -> ParamStore<f64> {
        let mut ps = ParamStore::new();
        ps.insert("w", Tensor::from_vec(vec![1], vec![v]).unwrap())
            .unwrap();
        ps
    }

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let mut ps = single_param(1.5);
        let mut st = AdamState::default();
        let mut grads = IndexMap::new();
        grads.insert("w".to_string(), Tensor::from_vec(vec![1], vec![0.0]).unwrap());
        adam_step(&mut ps, &grads, &mut st, 0.1).unwrap();
        assert_eq!(ps.get("w").unwrap().data(), &[1.5]);
        assert_eq!(st.step(), 1);
    }

    #[test]
    fn frozen_param_bit_identical_even_with_gradient() {
        let mut ps = single_param(1.5);
        ps.freeze("w");
        let mut st = AdamState::default();
        let mut grads = IndexMap::new();
        grads.insert("w".to_string(), Tensor::from_vec(vec![1], vec![2.0]).unwrap());
        adam_step(&mut ps, &grads, &mut st, 0.1).unwrap();
        assert_eq!(ps.get("w").unwrap().data(), &[1.5]);
    }

    #[test]
    fn first_step_matches_hand_computed_adam() {
        // w=1, g=1, defaults, lr=0.1:
        // m_hat = 1, v_hat = 1, w' = 1 - 0.1 * 1/(1 + 1e-9)
        let mut ps = single_param(1.0);
        let mut st = AdamState::default();
        let mut grads = IndexMap::new();
        grads.insert("w".to_string(), Tensor::from_vec(vec![1], vec![1.0]).unwrap());
        adam_step(&mut ps, &grads, &mut st, 0.1).unwrap();
        let w = ps.get("w").unwrap().data()[0];
        assert!(w < 1.0, "update must be negative");
        assert!((w - 0.9).abs() < 1e-6, "got {w}");
    }

    #[test]
    fn shape_mismatch_and_nonfinite_rejected() {
        let mut ps = single_param(1.0);
        let mut st = AdamState::default();
        let mut grads = IndexMap::new();
        grads.insert("w".to_string(), Tensor::from_vec(vec![2], vec![1.0, 1.0]).unwrap());
        assert!(adam_step(&mut ps, &grads, &mut st, 0.1).is_err());

        let mut grads = IndexMap::new();
        grads.insert(
            "w".to_string(),
            Tensor::from_vec(vec![1], vec![f64::NAN]).unwrap(),
        );
        assert!(adam_step(&mut ps, &grads, &mut st, 0.1).is_err());
    }

    #[test]
    fn noam_schedule_shape() {
        // step == warmup is the peak, both branches equal
        let peak = noam_lr(4000, 64, 4000).unwrap();
        assert!((peak - 64f64.powf(-0.5) * 4000f64.powf(-0.5)).abs() < 1e-15);
        // linear branch at step 1
        let lr1 = noam_lr(1, 64, 4000).unwrap();
        assert!((lr1 - 0.125 * 4000f64.powf(-1.5)).abs() < 1e-15);
        // decay branch monotone
        assert!(noam_lr(8000, 64, 4000).unwrap() < peak);
        // step 0 is an error
        assert!(noam_lr(0, 64, 4000).is_err());
    }

    #[test]
    fn clip_grad_norm_caps_global_norm() {
        let mut grads: IndexMap<String, Tensor<f64>> = IndexMap::new();
        grads.insert("a".into(), Tensor::from_vec(vec![2], vec![3.0, 4.0]).unwrap());
        clip_grad_norm(&mut grads, 1.0);
        let n: f64 = grads["a"].data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
    }
}
