//! Built-in property suite runnable from the CLI: exercises wavelet
//! reconstruction, scan-order bijectivity, the recurrence against its naive
//! reference, and analytic gradients against finite differences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::oracle::{naive_selective_scan, ScanInstance};
use crate::scan::{make_order, wavelet_window_order, ScanKind, WindowDirection};
use crate::ssm::{selective_scan, SsmParams};
use crate::tensor::{finite_diff_check, Tensor};
use crate::wavelet::{decompose, reconstruct, WaveletStack};

#[derive(Debug, Clone)]
pub struct GroupReport {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

pub fn all_passed(reports: &[GroupReport]) -> bool {
    reports.iter().all(|r| r.passed)
}

fn report(name: &'static str, outcome: Result<String, String>) -> GroupReport {
    match outcome {
        Ok(detail) => GroupReport { name, passed: true, detail },
        Err(detail) => GroupReport { name, passed: false, detail },
    }
}

/// Run every group and collect one pass/fail verdict per group.
pub fn run_all() -> Vec<GroupReport> {
    vec![
        report("reconstruction", check_reconstruction()),
        report("bijectivity", check_bijectivity()),
        report("scan-oracle", check_scan_oracle()),
        report("gradient", check_gradient()),
    ]
}

fn check_reconstruction() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let x = Tensor::<f64>::randn(&[2, 3, 16, 16], 0.0, 1.0, &mut rng);
    let energy_in: f64 = x.to_vec().iter().map(|v| v * v).sum();
    let mut worst = 0.0f64;
    let mut worst_energy = 0.0f64;
    for level in 1..=2 {
        let stack = decompose(&x, level).map_err(|e| e.to_string())?;
        let energy_out: f64 = stack
            .subbands()
            .iter()
            .flat_map(|s| s.to_vec())
            .map(|v| v * v)
            .sum();
        worst_energy = worst_energy.max((energy_out - energy_in).abs() / energy_in);

        let tokens = stack.to_tokens().map_err(|e| e.to_string())?;
        let back = WaveletStack::from_tokens(&tokens, level, 16, 16).map_err(|e| e.to_string())?;
        let y = reconstruct(&back).map_err(|e| e.to_string())?;
        let err = x
            .to_vec()
            .iter()
            .zip(y.to_vec())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        worst = worst.max(err);
    }
    if worst <= 1e-10 && worst_energy <= 1e-10 {
        Ok(format!(
            "levels 1-2 roundtrip error {worst:.2e}, energy drift {worst_energy:.2e}"
        ))
    } else {
        Err(format!(
            "roundtrip error {worst:.2e} or energy drift {worst_energy:.2e} above 1e-10"
        ))
    }
}

fn check_bijectivity() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let (h, w) = (8, 8);
    let mut orders = Vec::new();
    for kind in [
        ScanKind::Bi,
        ScanKind::Sweep4,
        ScanKind::Sweep8,
        ScanKind::Zigzag8,
        ScanKind::Jpeg8,
    ] {
        for dir in 0..kind.num_directions() {
            orders.push((
                format!("{}:{dir}", kind.name()),
                make_order(kind, dir, h, w).map_err(|e| e.to_string())?,
            ));
        }
    }
    for level in 0..=1 {
        for dir in [WindowDirection::LeftRight, WindowDirection::TopBottom] {
            orders.push((
                format!("window-l{level}:{dir:?}"),
                wavelet_window_order(level, h, w, dir).map_err(|e| e.to_string())?,
            ));
        }
    }
    let mut checked = 0;
    for (label, order) in &orders {
        let mut seen = order.perm().to_vec();
        seen.sort_unstable();
        if seen != (0..order.len()).collect::<Vec<_>>() {
            return Err(format!("{label} is not a permutation"));
        }
        let x = Tensor::<f64>::randn(&[2, order.len(), 3], 0.0, 1.0, &mut rng);
        let y = order
            .apply_inverse(&order.apply(&x).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        if x.to_vec() != y.to_vec() {
            return Err(format!("{label}: apply then inverse is not identity"));
        }
        checked += 1;
    }
    Ok(format!("{checked} orders are exact permutations with exact inverses"))
}

fn check_scan_oracle() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let (bsz, len, chan, state) = (2, 6, 4, 3);
    let p = SsmParams::<f64>::init(chan, state, &mut rng).map_err(|e| e.to_string())?;
    let x = Tensor::<f64>::randn(&[bsz, len, chan], 0.0, 1.0, &mut rng);
    let h0 = Tensor::<f64>::randn(&[bsz, chan, state], 0.0, 0.5, &mut rng);
    let got = selective_scan(&x, &p, Some(&h0))
        .map_err(|e| e.to_string())?
        .to_vec();

    let inst = ScanInstance {
        bsz,
        len,
        chan,
        state,
        a: p.a().map_err(|e| e.to_string())?.to_vec(),
        b_w: p.b_w.to_vec(),
        c_w: p.c_w.to_vec(),
        delta_w: p.delta_w.to_vec(),
        delta_b: p.delta_b.to_vec(),
        d: p.d.to_vec(),
    };
    let want = naive_selective_scan(&inst, &x.to_vec(), &h0.to_vec());
    let err = got
        .iter()
        .zip(&want)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    if err <= 1e-10 {
        Ok(format!("recurrence matches the per-step reference, max error {err:.2e}"))
    } else {
        Err(format!("recurrence deviates from the per-step reference by {err:.2e}"))
    }
}

fn check_gradient() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let (bsz, len, chan, state) = (1, 4, 3, 2);
    let p = SsmParams::<f64>::init(chan, state, &mut rng).map_err(|e| e.to_string())?;
    let x = Tensor::<f64>::randn(&[bsz, len, chan], 0.0, 1.0, &mut rng);
    let x = Tensor::param(x.to_vec(), x.shape()).map_err(|e| e.to_string())?;
    let h0 = Tensor::<f64>::randn(&[bsz, chan, state], 0.0, 0.5, &mut rng);
    let h0 = Tensor::param(h0.to_vec(), h0.shape()).map_err(|e| e.to_string())?;
    let mut params = Vec::new();
    p.collect_params("p", &mut params);
    let mut tensors: Vec<Tensor<f64>> = params.into_iter().map(|(_, t)| t).collect();
    tensors.push(x.clone());
    tensors.push(h0.clone());
    let err = finite_diff_check(
        move || selective_scan(&x, &p, Some(&h0))?.square()?.sum_all(),
        &tensors,
        1e-6,
    )
    .map_err(|e| e.to_string())?;
    if err <= 1e-5 {
        Ok(format!("recurrence gradients match finite differences, worst {err:.2e}"))
    } else {
        Err(format!("gradient discrepancy {err:.2e} above 1e-5"))
    }
}
