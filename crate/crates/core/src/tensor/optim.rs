use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Momentum SGD state with a polynomial learning-rate schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T: Scalar = f32> {
    pub velocity: Vec<Tensor<T>>,
    pub step_count: u64,
    pub base_lr: f64,
    pub total_steps: u64,
    pub momentum: f64,
    pub poly_power: f64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn lr(&self) -> f64 {
        let frac = 1.0 - self.step_count as f64 / self.total_steps as f64;
        self.base_lr * frac.max(0.0).powf(self.poly_power)
    }
}

pub struct Sgd<T: Scalar = f32> {
    pub state: OptimizerState<T>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new<'a>(
        params: impl IntoIterator<Item = &'a Tensor<T>>,
        base_lr: f64,
        momentum: f64,
        poly_power: f64,
        total_steps: u64,
    ) -> Result<Self> {
        if !(base_lr >= 0.0 && base_lr.is_finite()) {
            return Err(Error::arg(format!("base_lr must be ≥ 0, got {base_lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::arg(format!("momentum must lie in [0,1), got {momentum}")));
        }
        if !(poly_power > 0.0) {
            return Err(Error::arg(format!("poly_power must be positive, got {poly_power}")));
        }
        if total_steps == 0 {
            return Err(Error::arg("total_steps must be positive"));
        }
        Ok(Self {
            state: OptimizerState {
                velocity: params.into_iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
                step_count: 0,
                base_lr,
                total_steps,
                momentum,
                poly_power,
            },
        })
    }

    pub fn from_state(state: OptimizerState<T>) -> Self {
        Self { state }
    }

    /// `v ← μ·v + g; p ← p − lr·v` at the current scheduled rate, then advances
    /// the step counter. Nothing is modified if any gradient is non-finite.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Tensor<T>>,
        grads: &[Vec<T>],
    ) -> Result<()> {
        let params: Vec<&mut Tensor<T>> = params.into_iter().collect();
        if params.len() != self.state.velocity.len() || grads.len() != params.len() {
            return Err(Error::dim(format!(
                "sgd: {} params, {} grads, {} velocity buffers",
                params.len(),
                grads.len(),
                self.state.velocity.len()
            )));
        }
        for ((p, g), v) in params.iter().zip(grads).zip(&self.state.velocity) {
            if p.len() != g.len() || v.len() != g.len() {
                return Err(Error::dim(format!("sgd: shape mismatch for parameter {:?}", p.shape())));
            }
        }
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { op: "sgd_step" });
        }
        if self.state.step_count >= self.state.total_steps {
            return Err(Error::arg(format!(
                "sgd: schedule exhausted after {} steps",
                self.state.total_steps
            )));
        }
        let lr = T::from_f64_lossy(self.state.lr());
        let mu = T::from_f64_lossy(self.state.momentum);
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.state.velocity) {
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g).zip(v.data_mut()) {
                *vv = mu * *vv + gv;
                *pv = *pv - lr * *vv;
            }
        }
        self.state.step_count += 1;
        Ok(())
    }
}
