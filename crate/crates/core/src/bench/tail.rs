use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::gaussian_matrix;
use crate::attention::{exact_kernel_attention, max_abs_diff, rmfa, AttentionInputs};
use crate::error::{Error, Result};
use crate::kernels::{KernelId, KernelSpec};
use crate::ppsbn::pre_sbn;
use crate::rmf::{FeatureMapDraw, DEFAULT_P};
use crate::rng::{derive_seed, stream_rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TailConfig {
    pub kernel: KernelId,
    /// Sequence length of each trial.
    pub n: usize,
    pub d: usize,
    #[serde(rename = "D")]
    pub feature_dim: usize,
    /// Entries of `V` are drawn uniformly from `[−L, L]`.
    #[serde(rename = "L")]
    pub value_bound: f64,
    pub epsilons: Vec<f64>,
    pub trials: usize,
    pub p: f64,
    pub sbn_epsilon: f64,
    pub seed: u64,
}

impl Default for TailConfig {
    fn default() -> Self {
        Self {
            kernel: KernelId::Exp,
            n: 16,
            d: 8,
            feature_dim: 128,
            value_bound: 1.0,
            epsilons: vec![0.1, 0.2, 0.3, 0.4, 0.5],
            trials: 10_000,
            p: DEFAULT_P,
            sbn_epsilon: 1e-12,
            seed: 0,
        }
    }
}

impl TailConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("n", self.n),
            ("d", self.d),
            ("feature_dim", self.feature_dim),
            ("trials", self.trials),
        ] {
            if value == 0 {
                return Err(Error::invalid(name, "must be at least 1"));
            }
        }
        if !(self.value_bound > 0.0 && self.value_bound.is_finite()) {
            return Err(Error::invalid(
                "value_bound",
                "L must be a positive finite value",
            ));
        }
        if self.epsilons.is_empty() || self.epsilons.iter().any(|e| !(*e >= 0.0)) {
            return Err(Error::invalid(
                "epsilons",
                "need at least one nonnegative epsilon",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailEntry {
    pub epsilon: f64,
    /// Fraction of trials whose max entrywise error exceeded `epsilon`.
    pub empirical: f64,
    pub bound: f64,
    /// `empirical > bound` where the bound is below one.
    pub violated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailReport {
    pub kernel: KernelId,
    #[serde(rename = "D")]
    pub feature_dim: usize,
    #[serde(rename = "L")]
    pub value_bound: f64,
    pub trials: usize,
    /// Trials that raised an error; they count as exceedances.
    pub failures: usize,
    pub entries: Vec<TailEntry>,
}

impl TailReport {
    pub fn violations(&self) -> impl Iterator<Item = &TailEntry> {
        self.entries.iter().filter(|e| e.violated)
    }
}

/// `2D · exp(−D ε² / (2L²))`.
pub fn tail_bound(feature_dim: usize, value_bound: f64, epsilon: f64) -> f64 {
    let dim = feature_dim as f64;
    2.0 * dim * (-dim * epsilon * epsilon / (2.0 * value_bound * value_bound)).exp()
}

fn trial_error(config: &TailConfig, kernel: &KernelSpec, trial: usize) -> Result<f64> {
    let mut rng = stream_rng(derive_seed(config.seed, &[trial as u64]), 0);
    let q = gaussian_matrix(config.n, config.d, &mut rng);
    let k = gaussian_matrix(config.n, config.d, &mut rng);
    let l = config.value_bound;
    let v = Array2::from_shape_simple_fn((config.n, config.d), || rng.random_range(-l..=l));
    let pre = pre_sbn(q.view(), k.view(), config.sbn_epsilon)?;
    let inputs = AttentionInputs::new(pre.q.view(), pre.k.view(), v.view())?;
    let draw = FeatureMapDraw::sample(
        kernel.clone(),
        config.d,
        config.feature_dim,
        config.p,
        rng.random(),
    )?;
    let approx = rmfa(&draw, &inputs)?;
    let exact = exact_kernel_attention(kernel, &inputs)?;
    Ok(max_abs_diff(approx.view(), exact.view()))
}

/// Empirical frequency of `max |RMFA − exact| > ε` next to the bound, per ε.
pub fn tail_bound_check(config: &TailConfig) -> Result<TailReport> {
    config.validate()?;
    let kernel = KernelSpec::new(config.kernel);
    let mut failures = 0;
    let errors: Vec<f64> = (0..config.trials)
        .map(|t| {
            trial_error(config, &kernel, t).unwrap_or_else(|_| {
                failures += 1;
                f64::INFINITY
            })
        })
        .collect();
    let entries = config
        .epsilons
        .iter()
        .map(|&epsilon| {
            let exceed = errors.iter().filter(|&&e| !(e <= epsilon)).count();
            let empirical = exceed as f64 / config.trials as f64;
            let bound = tail_bound(config.feature_dim, config.value_bound, epsilon);
            TailEntry {
                epsilon,
                empirical,
                bound,
                violated: bound < 1.0 && empirical > bound,
            }
        })
        .collect();
    Ok(TailReport {
        kernel: config.kernel,
        feature_dim: config.feature_dim,
        value_bound: config.value_bound,
        trials: config.trials,
        failures,
        entries,
    })
}
