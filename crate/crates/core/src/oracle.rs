//! Independent reference implementations used to cross-check the tensor-graph
//! versions. Everything here is deliberately written as plain f64 scalar
//! loops straight from the defining equations, sharing no code with the
//! differentiable implementations it verifies.

/// Shapes and raw parameter values for one selective-scan instance.
pub struct ScanInstance {
    pub bsz: usize,
    pub len: usize,
    /// channel count (model width after expansion)
    pub chan: usize,
    /// state dimension per channel
    pub state: usize,
    /// [chan, state], strictly negative entries
    pub a: Vec<f64>,
    /// [chan, state]: input projection for B
    pub b_w: Vec<f64>,
    /// [chan, state]: input projection for C
    pub c_w: Vec<f64>,
    /// [chan]: projection to the scalar step size
    pub delta_w: Vec<f64>,
    /// [chan]: per-channel step bias
    pub delta_b: Vec<f64>,
    /// [chan]: skip coefficients
    pub d: Vec<f64>,
}

fn softplus(v: f64) -> f64 {
    if v > 0.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

fn phi(u: f64) -> f64 {
    if u.abs() < 1e-6 {
        1.0 + 0.5 * u
    } else {
        (u.exp() - 1.0) / u
    }
}

/// Naive per-step evaluation of the selective state-space recurrence:
/// for each token, derive (B_t, C_t, delta_t) from the input, discretize by
/// zero-order hold, step h, and read out y_t = C_t . h_t + d * x_t.
///
/// `x` is [bsz, len, chan]; `h_init` is [bsz, chan, state]; returns
/// y as [bsz, len, chan].
pub fn naive_selective_scan(inst: &ScanInstance, x: &[f64], h_init: &[f64]) -> Vec<f64> {
    let (bsz, len, chan, state) = (inst.bsz, inst.len, inst.chan, inst.state);
    assert_eq!(x.len(), bsz * len * chan);
    assert_eq!(h_init.len(), bsz * chan * state);
    let mut y = vec![0.0; bsz * len * chan];
    for bi in 0..bsz {
        let mut h = h_init[bi * chan * state..(bi + 1) * chan * state].to_vec();
        for t in 0..len {
            let xt = &x[(bi * len + t) * chan..(bi * len + t + 1) * chan];
            // token-dependent parameters
            let mut b_t = vec![0.0; state];
            let mut c_t = vec![0.0; state];
            for g in 0..chan {
                for n in 0..state {
                    b_t[n] += xt[g] * inst.b_w[g * state + n];
                    c_t[n] += xt[g] * inst.c_w[g * state + n];
                }
            }
            let mut step_raw = 0.0;
            for g in 0..chan {
                step_raw += xt[g] * inst.delta_w[g];
            }
            for g in 0..chan {
                let delta = softplus(step_raw + inst.delta_b[g]);
                let mut out = inst.d[g] * xt[g];
                for n in 0..state {
                    let da = delta * inst.a[g * state + n];
                    let a_bar = da.exp();
                    let b_bar = phi(da) * delta * b_t[n];
                    let hv = a_bar * h[g * state + n] + b_bar * xt[g];
                    h[g * state + n] = hv;
                    out += c_t[n] * hv;
                }
                y[(bi * len + t) * chan + g] = out;
            }
        }
    }
    y
}
