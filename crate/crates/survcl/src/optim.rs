//! First-order optimizers: SGD with momentum, layerwise-adaptive LARS for
//! large-batch pretraining, Adam for finetuning, and a gradient accumulator
//! that simulates large batches with small ones.

use thiserror::Error;

use crate::autodiff::Tensor;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("got {params} parameter tensors and {grads} gradient tensors")]
    CountMismatch { params: usize, grads: usize },
    #[error("parameter {index} has shape {param:?} but gradient has {grad:?}")]
    ShapeMismatch { index: usize, param: (usize, usize), grad: (usize, usize) },
    #[error("hyperparameter {name} = {value} is invalid ({constraint})")]
    BadHyper { name: &'static str, value: f64, constraint: &'static str },
    #[error("accumulation target must be at least 1")]
    BadTarget,
}

/// Learning rate rule used for contrastive pretraining: scale a base rate
/// of 0.3 linearly with the effective batch size relative to 256.
pub fn pretrain_lr(effective_batch: usize) -> f64 {
    0.3 * effective_batch as f64 / 256.0
}

pub trait Optimizer {
    fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<(), OptimError>;
}

fn check_shapes(
    params: &[Tensor],
    grads: &[Tensor],
    state_len: Option<usize>,
) -> Result<(), OptimError> {
    if params.len() != grads.len() {
        return Err(OptimError::CountMismatch { params: params.len(), grads: grads.len() });
    }
    if let Some(len) = state_len {
        if len != params.len() {
            return Err(OptimError::CountMismatch { params: params.len(), grads: len });
        }
    }
    for (index, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(OptimError::ShapeMismatch { index, param: p.shape(), grad: g.shape() });
        }
    }
    Ok(())
}

#[derive(Debug)]
pub struct SgdMomentum {
    lr: f64,
    momentum: f64,
    velocity: Option<Vec<Tensor>>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64) -> Result<Self, OptimError> {
        if !(lr.is_finite() && lr > 0.0) {
            return Err(OptimError::BadHyper { name: "lr", value: lr, constraint: "> 0" });
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(OptimError::BadHyper {
                name: "momentum",
                value: momentum,
                constraint: "in [0, 1)",
            });
        }
        Ok(SgdMomentum { lr, momentum, velocity: None })
    }
}

impl Optimizer for SgdMomentum {
    fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<(), OptimError> {
        check_shapes(params, grads, self.velocity.as_ref().map(|v| v.len()))?;
        let velocity = self
            .velocity
            .get_or_insert_with(|| params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect());
        for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut().iter_mut())
            {
                *vv = self.momentum * *vv + gv;
                *pv -= self.lr * *vv;
            }
        }
        Ok(())
    }
}

/// Trust-ratio epsilon in the LARS denominator.
pub const LARS_EPS: f64 = 1e-9;

/// Layerwise adaptive rate scaling: each parameter tensor's gradient is
/// rescaled by norm(p) / (norm(g) + wd * norm(p) + eps) before the momentum
/// update. Single-row tensors (biases) and zero norms skip the ratio.
#[derive(Debug)]
pub struct Lars {
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    velocity: Option<Vec<Tensor>>,
}

impl Lars {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Result<Self, OptimError> {
        if !(lr.is_finite() && lr > 0.0) {
            return Err(OptimError::BadHyper { name: "lr", value: lr, constraint: "> 0" });
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(OptimError::BadHyper {
                name: "momentum",
                value: momentum,
                constraint: "in [0, 1)",
            });
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(OptimError::BadHyper {
                name: "weight_decay",
                value: weight_decay,
                constraint: ">= 0",
            });
        }
        Ok(Lars { lr, momentum, weight_decay, velocity: None })
    }

    fn trust_ratio(&self, p: &Tensor, g: &Tensor) -> f64 {
        if p.rows() == 1 {
            return 1.0;
        }
        let p_norm = p.frobenius_norm();
        let g_norm = g.frobenius_norm();
        if p_norm == 0.0 || g_norm == 0.0 {
            return 1.0;
        }
        p_norm / (g_norm + self.weight_decay * p_norm + LARS_EPS)
    }
}

impl Optimizer for Lars {
    fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<(), OptimError> {
        check_shapes(params, grads, self.velocity.as_ref().map(|v| v.len()))?;
        let ratios: Vec<f64> =
            params.iter().zip(grads).map(|(p, g)| self.trust_ratio(p, g)).collect();
        let velocity = self
            .velocity
            .get_or_insert_with(|| params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect());
        for (((p, g), v), phi) in params.iter_mut().zip(grads).zip(velocity.iter_mut()).zip(ratios)
        {
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut().iter_mut())
            {
                *vv = self.momentum * *vv + phi * gv;
                *pv -= self.lr * *vv;
            }
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step_count: u64,
    moments: Option<Vec<(Tensor, Tensor)>>,
}

impl Adam {
    pub fn new(lr: f64) -> Result<Self, OptimError> {
        Adam::with_betas(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64, epsilon: f64) -> Result<Self, OptimError> {
        if !(lr.is_finite() && lr > 0.0) {
            return Err(OptimError::BadHyper { name: "lr", value: lr, constraint: "> 0" });
        }
        for (name, value) in [("beta1", beta1), ("beta2", beta2)] {
            if !(0.0..1.0).contains(&value) {
                return Err(OptimError::BadHyper { name, value, constraint: "in [0, 1)" });
            }
        }
        if !(epsilon > 0.0) {
            return Err(OptimError::BadHyper {
                name: "epsilon",
                value: epsilon,
                constraint: "> 0",
            });
        }
        Ok(Adam { lr, beta1, beta2, epsilon, step_count: 0, moments: None })
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<(), OptimError> {
        check_shapes(params, grads, self.moments.as_ref().map(|m| m.len()))?;
        let moments = self.moments.get_or_insert_with(|| {
            params
                .iter()
                .map(|p| (Tensor::zeros(p.rows(), p.cols()), Tensor::zeros(p.rows(), p.cols())))
                .collect()
        });
        self.step_count += 1;
        let bias1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bias2 = 1.0 - self.beta2.powi(self.step_count as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(moments.iter_mut()) {
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gv;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gv * gv;
                let m_hat = md[i] / bias1;
                let v_hat = vd[i] / bias2;
                *pv -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

/// Sums micro-batch gradients and releases one optimizer step on the mean
/// once the target count is reached.
#[derive(Debug)]
pub struct GradAccumulator {
    target: usize,
    count: usize,
    sums: Option<Vec<Tensor>>,
}

impl GradAccumulator {
    pub fn new(target: usize) -> Result<Self, OptimError> {
        if target == 0 {
            return Err(OptimError::BadTarget);
        }
        Ok(GradAccumulator { target, count: 0, sums: None })
    }

    pub fn target(&self) -> usize {
        self.target
    }

    pub fn pending(&self) -> usize {
        self.count
    }

    /// Adds one micro-batch gradient. On the target'th call the optimizer
    /// steps with the mean gradient, the buffer resets, and this returns
    /// true.
    pub fn accumulate_and_maybe_step(
        &mut self,
        optimizer: &mut dyn Optimizer,
        params: &mut [Tensor],
        grads: &[Tensor],
    ) -> Result<bool, OptimError> {
        check_shapes(params, grads, self.sums.as_ref().map(|s| s.len()))?;
        let sums = self
            .sums
            .get_or_insert_with(|| params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect());
        for (s, g) in sums.iter_mut().zip(grads) {
            for (sv, &gv) in s.data_mut().iter_mut().zip(g.data()) {
                *sv += gv;
            }
        }
        self.count += 1;
        if self.count < self.target {
            return Ok(false);
        }
        let scale = 1.0 / self.target as f64;
        let mean: Vec<Tensor> = sums
            .iter()
            .map(|s| {
                let data = s.data().iter().map(|v| v * scale).collect();
                Tensor::from_vec(s.rows(), s.cols(), data).expect("finite mean gradient")
            })
            .collect();
        optimizer.step(params, &mean)?;
        for s in sums.iter_mut() {
            s.data_mut().fill(0.0);
        }
        self.count = 0;
        Ok(true)
    }
}
