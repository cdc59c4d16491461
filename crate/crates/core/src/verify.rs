//! Self-checks run by `macformer verify`.
//!
//! Each property returns a pass/fail result with a short detail string
//! instead of panicking, so a caller can report every failure at once.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    exact_kernel_attention, max_abs_diff, norm, rmfa, rmfa_reference, softmax_attention,
    AttentionInputs, MaskKind,
};
use crate::bench::gaussian_matrix;
use crate::error::Result;
use crate::kernels::{KernelId, KernelSpec};
use crate::ppsbn::pre_sbn;
use crate::rmf::{FeatureMapDraw, DEFAULT_P};
use crate::rng::{derive_seed, stream_rng};

/// Deliberate corruption used to check that the suites can fail.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fault {
    /// Multiplies the Maclaurin coefficient of `degree` by `factor` in
    /// every kernel the suites build.
    ScaleCoefficient { degree: usize, factor: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VerifyOptions {
    /// Smaller Monte Carlo sizes and fewer random instances.
    pub quick: bool,
    pub seed: u64,
    pub fault: Option<Fault>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropertyResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl PropertyResult {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }

    fn from_result(name: impl Into<String>, outcome: Result<(bool, String)>) -> Self {
        match outcome {
            Ok((passed, detail)) => Self::new(name, passed, detail),
            Err(e) => Self::new(name, false, format!("error: {e}")),
        }
    }
}

fn kernel_spec(id: KernelId, fault: Option<Fault>) -> Result<KernelSpec> {
    let spec = KernelSpec::new(id);
    match fault {
        None => Ok(spec),
        Some(Fault::ScaleCoefficient { degree, factor }) => {
            let value = spec.coefficient(degree)? * factor;
            Ok(spec.with_coefficient_override(degree, value))
        }
    }
}

fn rng_for(options: &VerifyOptions, tags: &[u64]) -> ChaCha8Rng {
    stream_rng(derive_seed(options.seed, tags), 0)
}

/// Partial sums of 400 terms against the closed form.
pub fn check_series(id: KernelId, options: &VerifyOptions) -> PropertyResult {
    let outcome = (|| {
        let spec = kernel_spec(id, options.fault)?;
        let reach = match id {
            KernelId::Exp | KernelId::Trigh => 5.0,
            _ => 0.9,
        };
        let mut worst: f64 = 0.0;
        for i in 0..50 {
            let t = -reach + 2.0 * reach * i as f64 / 49.0;
            let exact = spec.value(t)?;
            let err = (spec.series_value(t, 400)? - exact).abs() / (1.0 + exact.abs());
            worst = worst.max(err);
        }
        Ok((worst <= 1e-6, format!("max scaled error {worst:.3e}")))
    })();
    PropertyResult::from_result(format!("series/{id}"), outcome)
}

/// A vector of norm `radius` with a uniformly random direction.
fn random_on_sphere(rng: &mut ChaCha8Rng, dim: usize, radius: f64) -> Array1<f64> {
    loop {
        let v = gaussian_matrix(1, dim, rng).row(0).to_owned();
        let n = norm(v.view());
        if n > 1e-3 {
            return v * (radius / n);
        }
    }
}

/// Input norm used for the unbiasedness pairs. For the kernels whose
/// coefficients decay polynomially the single-feature variance is finite
/// only while `3‖x‖²‖y‖² < 1/2`, so those pairs stay well inside the ball.
pub fn unbiasedness_radius(id: KernelId) -> f64 {
    match id {
        KernelId::Exp | KernelId::Trigh => 0.9,
        _ => 0.6,
    }
}

/// Five `(x, y)` pairs with `0.15 ≤ |x·y| ≤ 0.9`.
pub fn unbiasedness_pairs(id: KernelId, dim: usize, seed: u64) -> Vec<(Array1<f64>, Array1<f64>)> {
    let mut rng = stream_rng(derive_seed(seed, &[id as u64, 0x7061_6972]), 0);
    let radius = unbiasedness_radius(id);
    let mut pairs = Vec::with_capacity(5);
    while pairs.len() < 5 {
        let x = random_on_sphere(&mut rng, dim, radius);
        let y = random_on_sphere(&mut rng, dim, radius);
        if x.dot(&y).abs() >= 0.15 {
            pairs.push((x, y));
        }
    }
    pairs
}

/// Monte Carlo mean of single-feature products within four standard errors
/// of the kernel value.
pub fn check_unbiasedness(id: KernelId, options: &VerifyOptions) -> PropertyResult {
    let samples = if options.quick { 20_000 } else { 200_000 };
    let outcome = (|| {
        let spec = kernel_spec(id, options.fault)?;
        let mut worst_z: f64 = 0.0;
        for (i, (x, y)) in unbiasedness_pairs(id, 4, options.seed).iter().enumerate() {
            let seed = derive_seed(options.seed, &[id as u64, i as u64]);
            let draw = FeatureMapDraw::sample(spec.clone(), 4, samples, DEFAULT_P, seed)?;
            let products = draw.feature_products(x.view(), y.view())?;
            let n = products.len() as f64;
            let mean = products.iter().sum::<f64>() / n;
            let var = products
                .iter()
                .map(|p| (p - mean) * (p - mean))
                .sum::<f64>()
                / (n - 1.0);
            let target = KernelSpec::new(id).value(x.dot(y))?;
            let z = (mean - target).abs() / (var / n).sqrt();
            worst_z = worst_z.max(z);
        }
        Ok((
            worst_z <= 4.0,
            format!("max |z| {worst_z:.2} over 5 pairs, {samples} samples"),
        ))
    })();
    PropertyResult::from_result(format!("unbiased/{id}"), outcome)
}

/// Rows rescaled to norms drawn uniformly from `[0, 1)`.
fn unit_ball_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    let mut m = gaussian_matrix(n, d, rng);
    for mut row in m.rows_mut() {
        let target: f64 = rng.random_range(0.0..1.0);
        let current = norm(row.view());
        if current > 0.0 {
            row *= target / current;
        }
    }
    m
}

/// Linear-time attention equals the quadratic materialization.
pub fn check_rmfa_equivalence(options: &VerifyOptions) -> PropertyResult {
    let instances = if options.quick { 20 } else { 100 };
    let outcome = (|| {
        let mut worst: f64 = 0.0;
        for i in 0..instances {
            let mut rng = rng_for(options, &[0x6571_7569, i as u64]);
            let id = KernelId::ALL[i % KernelId::ALL.len()];
            let n = rng.random_range(1..=32);
            let d = rng.random_range(1..=8);
            let feature_dim = rng.random_range(1..=64);
            let q = unit_ball_rows(&mut rng, n, d);
            let k = unit_ball_rows(&mut rng, n, d);
            let v = gaussian_matrix(n, d, &mut rng);
            let draw = FeatureMapDraw::sample(
                kernel_spec(id, options.fault)?,
                d,
                feature_dim,
                DEFAULT_P,
                rng.random(),
            )?;
            for mask in [MaskKind::None, MaskKind::Causal] {
                let inputs = AttentionInputs::new(q.view(), k.view(), v.view())?.with_mask(mask)?;
                let fast = rmfa(&draw, &inputs)?;
                let slow = rmfa_reference(&draw, &inputs, &inputs.binary_mask())?;
                worst = worst.max(max_abs_diff(fast.view(), slow.view()));
            }
        }
        Ok((
            worst <= 1e-10,
            format!("max abs diff {worst:.3e} over {instances} instances"),
        ))
    })();
    PropertyResult::from_result("rmfa-equivalence", outcome)
}

/// Exact attention with the exponential kernel is softmax attention.
pub fn check_softmax_consistency(options: &VerifyOptions) -> PropertyResult {
    let instances = if options.quick { 10 } else { 50 };
    let outcome = (|| {
        let spec = kernel_spec(KernelId::Exp, options.fault)?;
        let mut worst: f64 = 0.0;
        for i in 0..instances {
            let mut rng = rng_for(options, &[0x736f_6674, i as u64]);
            let n = rng.random_range(1..=24);
            let d = rng.random_range(1..=8);
            let q = gaussian_matrix(n, d, &mut rng);
            let k = gaussian_matrix(n, d, &mut rng);
            let v = gaussian_matrix(n, d, &mut rng);
            let mask = if i % 2 == 0 {
                MaskKind::None
            } else {
                MaskKind::Causal
            };
            let inputs = AttentionInputs::new(q.view(), k.view(), v.view())?.with_mask(mask)?;
            let a = exact_kernel_attention(&spec, &inputs)?;
            let b = softmax_attention(&inputs)?;
            worst = worst.max(max_abs_diff(a.view(), b.view()));
        }
        Ok((
            worst <= 1e-12,
            format!("max abs diff {worst:.3e} over {instances} instances"),
        ))
    })();
    PropertyResult::from_result("softmax-consistency", outcome)
}

/// preSBN outputs lie in the unit ball and keep restricted-domain kernels valid.
pub fn check_pre_sbn_constraint(options: &VerifyOptions) -> PropertyResult {
    let instances = if options.quick { 20 } else { 100 };
    let outcome = (|| {
        let mut worst_row: f64 = 0.0;
        let mut worst_frob: f64 = 0.0;
        for i in 0..instances {
            let mut rng = rng_for(options, &[0x7362_6e00, i as u64]);
            let n = rng.random_range(2..=40);
            let d = rng.random_range(2..=16);
            let scale = rng.random_range(0.1..100.0);
            let q = gaussian_matrix(n, d, &mut rng) * scale;
            let k = gaussian_matrix(n, d, &mut rng) * scale + 3.0;
            let v = gaussian_matrix(n, d, &mut rng);
            let pre = pre_sbn(q.view(), k.view(), 1e-12)?;
            for m in [&pre.q, &pre.k] {
                worst_row = m
                    .rows()
                    .into_iter()
                    .map(|r| norm(r) - 1.0)
                    .fold(worst_row, f64::max);
                worst_frob =
                    worst_frob.max((m.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs());
            }
            let inputs = AttentionInputs::new(pre.q.view(), pre.k.view(), v.view())?;
            for id in [KernelId::Inv, KernelId::Log, KernelId::Sqrt] {
                exact_kernel_attention(&kernel_spec(id, options.fault)?, &inputs)?;
            }
        }
        let passed = worst_row <= 1e-12 && worst_frob <= 1e-12;
        Ok((
            passed,
            format!("row excess {worst_row:.2e}, frobenius deviation {worst_frob:.2e}"),
        ))
    })();
    PropertyResult::from_result("pre-sbn-constraint", outcome)
}

/// Every suite, in a fixed order.
pub fn run_verification(options: &VerifyOptions) -> Vec<PropertyResult> {
    let mut results = Vec::new();
    for id in KernelId::ALL {
        results.push(check_series(id, options));
    }
    for id in KernelId::ALL {
        results.push(check_unbiasedness(id, options));
    }
    results.push(check_rmfa_equivalence(options));
    results.push(check_softmax_consistency(options));
    results.push(check_pre_sbn_constraint(options));
    results
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> VerifyOptions {
        VerifyOptions {
            quick: true,
            seed: 1,
            fault: None,
        }
    }

    #[test]
    fn clean_run_passes() {
        for r in run_verification(&quick()) {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }

    #[test]
    fn doubled_linear_coefficient_is_caught() {
        let options = VerifyOptions {
            fault: Some(Fault::ScaleCoefficient {
                degree: 1,
                factor: 2.0,
            }),
            ..quick()
        };
        for id in KernelId::ALL {
            assert!(!check_series(id, &options).passed, "series/{id}");
            assert!(!check_unbiasedness(id, &options).passed, "unbiased/{id}");
        }
    }

    #[test]
    fn pairs_respect_dot_range() {
        for id in KernelId::ALL {
            let pairs = unbiasedness_pairs(id, 4, 0);
            assert_eq!(pairs.len(), 5);
            for (x, y) in pairs {
                let c = x.dot(&y).abs();
                assert!((0.15..=0.9).contains(&c), "{c}");
            }
        }
    }
}
