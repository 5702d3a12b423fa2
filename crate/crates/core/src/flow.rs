//! Training objective: interpolate data toward noise along a schedule, ask
//! the network for the velocity of that path, and regress it with mean
//! squared error. Also hosts the guidance combination used at sampling time
//! and the single-optimizer-step helper.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::optim::{clip_global_norm, Adam};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    /// alpha = 1 - t, sigma = t: straight path from data to noise.
    Linear,
    /// alpha = cos(pi t / 2), sigma = sin(pi t / 2): variance preserving.
    Gvp,
}

impl ScheduleKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "linear" => Ok(ScheduleKind::Linear),
            "gvp" => Ok(ScheduleKind::Gvp),
            other => Err(Error::config(format!(
                "unknown schedule {other:?}; expected linear or gvp"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Gvp => "gvp",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Schedule {
    pub kind: ScheduleKind,
}

impl Schedule {
    pub fn new(kind: ScheduleKind) -> Self {
        Schedule { kind }
    }

    pub fn alpha(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::Linear => 1.0 - t,
            // pinned at t = 1 so the endpoint identity is exact in floats
            ScheduleKind::Gvp if t == 1.0 => 0.0,
            ScheduleKind::Gvp => (std::f64::consts::FRAC_PI_2 * t).cos(),
        }
    }

    pub fn sigma(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::Linear => t,
            ScheduleKind::Gvp if t == 1.0 => 1.0,
            ScheduleKind::Gvp => (std::f64::consts::FRAC_PI_2 * t).sin(),
        }
    }

    pub fn dalpha(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::Linear => -1.0,
            ScheduleKind::Gvp => {
                -std::f64::consts::FRAC_PI_2 * (std::f64::consts::FRAC_PI_2 * t).sin()
            }
        }
    }

    pub fn dsigma(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::Linear => 1.0,
            ScheduleKind::Gvp => {
                std::f64::consts::FRAC_PI_2 * (std::f64::consts::FRAC_PI_2 * t).cos()
            }
        }
    }
}

fn check_times(op: &'static str, t: &[f64], batch: usize) -> Result<()> {
    if t.len() != batch {
        return Err(Error::InvalidArgument {
            op,
            detail: format!("{} times for a batch of {batch}", t.len()),
        });
    }
    for &v in t {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidArgument {
                op,
                detail: format!("time {v} outside [0, 1]"),
            });
        }
    }
    Ok(())
}

/// Expand one scalar per batch item to a constant tensor of `shape`.
fn per_sample<T: Scalar>(vals: &[f64], shape: &[usize]) -> Result<Tensor<T>> {
    let numel: usize = shape.iter().product();
    let per = numel / shape[0];
    let mut data = Vec::with_capacity(numel);
    for &v in vals {
        data.extend(std::iter::repeat(T::from_f64(v)).take(per));
    }
    Tensor::from_vec(data, shape)
}

/// x * alpha(t) + eps * sigma(t), with one time per batch item.
pub fn interpolate<T: Scalar>(
    x: &Tensor<T>,
    eps: &Tensor<T>,
    t: &[f64],
    schedule: &Schedule,
) -> Result<Tensor<T>> {
    if x.shape() != eps.shape() {
        return Err(Error::ShapeMismatch {
            op: "interpolate",
            lhs: x.shape().to_vec(),
            rhs: eps.shape().to_vec(),
        });
    }
    check_times("interpolate", t, x.shape()[0])?;
    let alphas: Vec<f64> = t.iter().map(|&v| schedule.alpha(v)).collect();
    let sigmas: Vec<f64> = t.iter().map(|&v| schedule.sigma(v)).collect();
    let a = per_sample::<T>(&alphas, x.shape())?;
    let s = per_sample::<T>(&sigmas, x.shape())?;
    x.mul(&a)?.add(&eps.mul(&s)?)
}

/// Time derivative of the interpolation path: x * alpha'(t) + eps * sigma'(t).
/// Under the linear schedule this is eps - x for every t.
pub fn velocity_target<T: Scalar>(
    x: &Tensor<T>,
    eps: &Tensor<T>,
    t: &[f64],
    schedule: &Schedule,
) -> Result<Tensor<T>> {
    if x.shape() != eps.shape() {
        return Err(Error::ShapeMismatch {
            op: "velocity_target",
            lhs: x.shape().to_vec(),
            rhs: eps.shape().to_vec(),
        });
    }
    check_times("velocity_target", t, x.shape()[0])?;
    let da: Vec<f64> = t.iter().map(|&v| schedule.dalpha(v)).collect();
    let ds: Vec<f64> = t.iter().map(|&v| schedule.dsigma(v)).collect();
    let a = per_sample::<T>(&da, x.shape())?;
    let s = per_sample::<T>(&ds, x.shape())?;
    x.mul(&a)?.add(&eps.mul(&s)?)
}

/// Replace each label with `null_class` with probability `dropout`.
pub fn apply_label_dropout(
    labels: &[usize],
    null_class: usize,
    dropout: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    labels
        .iter()
        .map(|&c| {
            if dropout > 0.0 && rng.gen::<f64>() < dropout {
                null_class
            } else {
                c
            }
        })
        .collect()
}

/// Deterministic loss core: given pre-drawn times and noise, returns the mean
/// squared error between the model's velocity and the schedule's target.
pub fn fm_loss_with<T: Scalar, F>(
    x: &Tensor<T>,
    labels: Option<&[usize]>,
    t: &[f64],
    eps: &Tensor<T>,
    schedule: &Schedule,
    model: F,
) -> Result<Tensor<T>>
where
    F: FnOnce(&Tensor<T>, &[f64], Option<&[usize]>) -> Result<Tensor<T>>,
{
    let x_t = interpolate(x, eps, t, schedule)?;
    let target = velocity_target(x, eps, t, schedule)?;
    let pred = model(&x_t, t, labels)?;
    pred.sub(&target)?.square()?.mean_all()
}

/// Draw per-item times and noise, apply label dropout, and evaluate the loss.
#[allow(clippy::too_many_arguments)]
pub fn fm_loss<T: Scalar, F>(
    x: &Tensor<T>,
    labels: Option<&[usize]>,
    null_class: usize,
    dropout: f64,
    schedule: &Schedule,
    model: F,
    noise_rng: &mut ChaCha8Rng,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<Tensor<T>>
where
    F: FnOnce(&Tensor<T>, &[f64], Option<&[usize]>) -> Result<Tensor<T>>,
{
    let batch = x.shape()[0];
    let t: Vec<f64> = (0..batch).map(|_| noise_rng.gen::<f64>()).collect();
    let eps = Tensor::randn(x.shape(), T::zero(), T::one(), noise_rng);
    let dropped = labels.map(|l| apply_label_dropout(l, null_class, dropout, dropout_rng));
    fm_loss_with(x, dropped.as_deref(), &t, &eps, schedule, model)
}

/// v_uncond + w * (v_cond - v_uncond).
pub fn cfg_velocity<T: Scalar>(
    v_cond: &Tensor<T>,
    v_uncond: &Tensor<T>,
    w: f64,
) -> Result<Tensor<T>> {
    if v_cond.shape() != v_uncond.shape() {
        return Err(Error::ShapeMismatch {
            op: "cfg_velocity",
            lhs: v_cond.shape().to_vec(),
            rhs: v_uncond.shape().to_vec(),
        });
    }
    v_uncond.add(&v_cond.sub(v_uncond)?.scale(T::from_f64(w))?)
}

/// Backward pass, global-norm clip, moment update, gradient reset.
/// Returns the pre-clip gradient norm. A non-finite loss rejects the step.
pub fn train_step<T: Scalar>(
    loss: &Tensor<T>,
    params: &[(String, Tensor<T>)],
    opt: &mut Adam<T>,
    clip: f64,
    step_index: usize,
) -> Result<f64> {
    let value = loss.item()?.as_f64();
    if !value.is_finite() {
        return Err(Error::InvalidArgument {
            op: "train_step",
            detail: format!("non-finite loss {value} at step {step_index}"),
        });
    }
    loss.backward()?;
    let grad_norm = clip_global_norm(params, clip);
    opt.step(params);
    for (_, p) in params {
        p.zero_grad();
    }
    Ok(grad_norm)
}
