//! Probability-flow integration from noise (t = 1) to data (t = 0): fixed
//! Euler and Heun steppers plus an adaptive embedded 5(4) Runge-Kutta pair
//! with step-size control and first-same-as-last reuse.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flow::cfg_velocity;
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tensor::{no_grad, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OdeMethod {
    Euler,
    Heun,
    Dopri5,
}

impl OdeMethod {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "euler" => Ok(OdeMethod::Euler),
            "heun" => Ok(OdeMethod::Heun),
            "dopri5" => Ok(OdeMethod::Dopri5),
            other => Err(Error::config(format!(
                "unknown method {other:?}; expected euler, heun, or dopri5"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OdeMethod::Euler => "euler",
            OdeMethod::Heun => "heun",
            OdeMethod::Dopri5 => "dopri5",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SolverConfig {
    pub method: OdeMethod,
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
    pub initial_step: f64,
    /// Step count for the fixed-step methods.
    pub fixed_steps: usize,
    /// Guidance scale; 1 disables the unconditional pass.
    pub w: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            method: OdeMethod::Dopri5,
            rtol: 1e-5,
            atol: 1e-5,
            max_steps: 10_000,
            initial_step: 0.05,
            fixed_steps: 50,
            w: 1.0,
        }
    }
}

/// x + sum(c_i * k_i), computed outside the autodiff graph.
fn combine<T: Scalar>(x: &Tensor<T>, terms: &[(f64, &Tensor<T>)]) -> Result<Tensor<T>> {
    let mut out: Vec<f64> = x.to_vec().iter().map(|v| v.as_f64()).collect();
    for (c, k) in terms {
        let kd = k.data_ref();
        for (o, v) in out.iter_mut().zip(kd.iter()) {
            *o += c * v.as_f64();
        }
    }
    Tensor::from_vec(out.into_iter().map(T::from_f64).collect(), x.shape())
}

/// RMS of the componentwise error scaled by atol + rtol * max(|x|, |x_new|).
fn error_norm<T: Scalar>(
    err: &Tensor<T>,
    x: &Tensor<T>,
    x_new: &Tensor<T>,
    atol: f64,
    rtol: f64,
) -> f64 {
    let e = err.data_ref();
    let a = x.data_ref();
    let b = x_new.data_ref();
    let n = e.len().max(1);
    let mut sq = 0.0;
    for i in 0..e.len() {
        let scale = atol + rtol * a[i].as_f64().abs().max(b[i].as_f64().abs());
        let r = e[i].as_f64() / scale;
        sq += r * r;
    }
    (sq / n as f64).sqrt()
}

// Dormand-Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 6] = [
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

const SAFETY: f64 = 0.9;
const FACTOR_MIN: f64 = 0.2;
const FACTOR_MAX: f64 = 5.0;

/// Integrate dx/dt = f(x, t) from t_span.0 to t_span.1. Returns the final
/// state and the number of times `f` was evaluated.
pub fn integrate<T: Scalar, F>(
    f: &mut F,
    x0: &Tensor<T>,
    t_span: (f64, f64),
    cfg: &SolverConfig,
) -> Result<(Tensor<T>, usize)>
where
    F: FnMut(&Tensor<T>, f64) -> Result<Tensor<T>>,
{
    let span = t_span.1 - t_span.0;
    if span == 0.0 {
        return Ok((x0.clone(), 0));
    }
    match cfg.method {
        OdeMethod::Euler => {
            let mut x = x0.clone();
            let mut nfe = 0;
            let h = span / cfg.fixed_steps as f64;
            for s in 0..cfg.fixed_steps {
                let t = t_span.0 + s as f64 * h;
                let k = f(&x, t)?;
                nfe += 1;
                x = combine(&x, &[(h, &k)])?;
            }
            Ok((x, nfe))
        }
        OdeMethod::Heun => {
            let mut x = x0.clone();
            let mut nfe = 0;
            let h = span / cfg.fixed_steps as f64;
            for s in 0..cfg.fixed_steps {
                let t = t_span.0 + s as f64 * h;
                let k1 = f(&x, t)?;
                let pred = combine(&x, &[(h, &k1)])?;
                let k2 = f(&pred, t + h)?;
                nfe += 2;
                x = combine(&x, &[(0.5 * h, &k1), (0.5 * h, &k2)])?;
            }
            Ok((x, nfe))
        }
        OdeMethod::Dopri5 => dopri5(f, x0, t_span, cfg),
    }
}

fn dopri5<T: Scalar, F>(
    f: &mut F,
    x0: &Tensor<T>,
    t_span: (f64, f64),
    cfg: &SolverConfig,
) -> Result<(Tensor<T>, usize)>
where
    F: FnMut(&Tensor<T>, f64) -> Result<Tensor<T>>,
{
    if cfg.rtol <= 0.0 || cfg.atol <= 0.0 {
        return Err(Error::Integration(format!(
            "tolerances must be positive, got rtol {} atol {}",
            cfg.rtol, cfg.atol
        )));
    }
    let span = t_span.1 - t_span.0;
    let dir = span.signum();
    let mut t = t_span.0;
    let mut x = x0.clone();
    let mut h = cfg.initial_step.abs().min(span.abs()) * dir;
    if h == 0.0 {
        h = span;
    }

    let mut k1 = f(&x, t)?;
    let mut nfe = 1;
    let mut last_err = 0.0;

    for _attempt in 0..cfg.max_steps {
        let remaining = t_span.1 - t;
        if remaining.abs() <= 1e-12 * span.abs() {
            return Ok((x, nfe));
        }
        if h.abs() > remaining.abs() {
            h = remaining;
        }

        let mut k: Vec<Tensor<T>> = Vec::with_capacity(7);
        k.push(k1.clone());
        for stage in 0..6 {
            let terms: Vec<(f64, &Tensor<T>)> = (0..=stage)
                .filter(|&j| A[stage][j] != 0.0)
                .map(|j| (h * A[stage][j], &k[j]))
                .collect();
            let xs = combine(&x, &terms)?;
            k.push(f(&xs, t + C[stage + 1] * h)?);
            nfe += 1;
        }

        let sol_terms: Vec<(f64, &Tensor<T>)> = (0..7)
            .filter(|&i| B5[i] != 0.0)
            .map(|i| (h * B5[i], &k[i]))
            .collect();
        let x_new = combine(&x, &sol_terms)?;
        let err_terms: Vec<(f64, &Tensor<T>)> = (0..7)
            .filter(|&i| B5[i] - B4[i] != 0.0)
            .map(|i| (h * (B5[i] - B4[i]), &k[i]))
            .collect();
        let err = combine(&Tensor::zeros(x.shape()), &err_terms)?;
        let norm = error_norm(&err, &x, &x_new, cfg.atol, cfg.rtol);
        last_err = norm;

        if norm <= 1.0 {
            t += h;
            x = x_new;
            k1 = k.pop().expect("stage seven exists"); // first-same-as-last
        }
        let factor = if norm == 0.0 {
            FACTOR_MAX
        } else {
            (SAFETY * norm.powf(-0.2)).clamp(FACTOR_MIN, FACTOR_MAX)
        };
        h *= factor;
    }

    if (t_span.1 - t).abs() <= 1e-12 * span.abs() {
        return Ok((x, nfe));
    }
    Err(Error::Integration(format!(
        "no convergence within {} steps: reached t = {t:.6}, last error norm {last_err:.3e}",
        cfg.max_steps
    )))
}

/// Draw standard-normal noise and integrate the model's velocity field from
/// t = 1 to t = 0. `labels` conditions each trajectory; with `w != 1` and
/// labels present, every call blends a conditional and an unconditional pass.
/// Returns the batch and the number of model evaluations.
pub fn sample_batch<T: Scalar>(
    model: &Model<T>,
    labels: Option<&[usize]>,
    cfg: &SolverConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<T>, usize)> {
    let n = labels.map_or(1, <[usize]>::len);
    let shape = [n, model.cfg.channels, model.cfg.image, model.cfg.image];
    let x1 = Tensor::randn(&shape, T::zero(), T::one(), rng);
    let use_cfg = labels.is_some() && cfg.w != 1.0;
    let nulls = vec![model.null_class(); n];
    let mut evals = 0usize;
    let mut f = |x: &Tensor<T>, t: f64| -> Result<Tensor<T>> {
        no_grad(|| {
            let tv = vec![t.clamp(0.0, 1.0); n];
            if use_cfg {
                let v_cond = model.forward(x, &tv, labels)?;
                let v_uncond = model.forward(x, &tv, Some(&nulls))?;
                evals += 2;
                cfg_velocity(&v_cond, &v_uncond, cfg.w)
            } else {
                evals += 1;
                model.forward(x, &tv, labels)
            }
        })
    };
    let (x0, _calls) = integrate(&mut f, &x1, (1.0, 0.0), cfg)?;
    Ok((x0, evals))
}
