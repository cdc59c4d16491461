use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::gaussian_matrix;
use crate::attention::{exact_kernel_attention, rmfa_with, AttentionInputs, RmfaOptions};
use crate::error::{Error, Result};
use crate::kernels::{KernelId, KernelSpec};
use crate::ppsbn::{pre_sbn, PreSbnOutput};
use crate::rmf::{FeatureMapDraw, DEFAULT_P};
use crate::rng::{derive_seed, stream_rng};

const TAG_DATA: u64 = 0x6461_7461;
const TAG_DRAW: u64 = 0x6472_6177;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub kernel: KernelId,
    pub batch: usize,
    pub heads: usize,
    pub d: usize,
    pub lengths: Vec<usize>,
    pub feature_dims: Vec<usize>,
    pub repeats: usize,
    pub p: f64,
    pub sbn_epsilon: f64,
    pub seed: u64,
    /// Count feature sampling as part of the RMFA time.
    pub include_sampling: bool,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            kernel: KernelId::Exp,
            batch: 16,
            heads: 8,
            d: 64,
            lengths: (1..=20).map(|i| i * 200).collect(),
            feature_dims: (4..=10).map(|e| 1 << e).collect(),
            repeats: 100,
            p: DEFAULT_P,
            sbn_epsilon: 1e-12,
            seed: 0,
            include_sampling: false,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lengths.is_empty() || self.lengths.contains(&0) {
            return Err(Error::invalid(
                "lengths",
                "need at least one positive length",
            ));
        }
        if self.feature_dims.is_empty() || self.feature_dims.contains(&0) {
            return Err(Error::invalid(
                "feature_dims",
                "need at least one positive feature dimension",
            ));
        }
        for (name, value) in [
            ("batch", self.batch),
            ("heads", self.heads),
            ("d", self.d),
            ("repeats", self.repeats),
        ] {
            if value == 0 {
                return Err(Error::invalid(name, "must be at least 1"));
            }
        }
        if !(self.p.is_finite() && self.p > 1.0) {
            return Err(Error::invalid("p", "must be a finite value > 1"));
        }
        if !(self.sbn_epsilon > 0.0) {
            return Err(Error::invalid("sbn_epsilon", "must be positive"));
        }
        Ok(())
    }
}

/// One `(length, D)` cell, averaged over its successful repeats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub kernel: KernelId,
    pub length: usize,
    pub d: usize,
    #[serde(rename = "D")]
    pub feature_dim: usize,
    pub p: f64,
    pub repeats: usize,
    pub mean_log10_nmse: f64,
    pub mean_log10_accel: f64,
    pub guarded_row_rate: f64,
    pub seed: u64,
    /// Repeats that raised an error and were left out of the means.
    pub failures: usize,
}

impl GridResult {
    pub const CSV_HEADER: &'static str =
        "kernel,length,d,D,p,repeats,mean_log10_nmse,mean_log10_accel,guarded_row_rate,seed,failures";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.kernel,
            self.length,
            self.d,
            self.feature_dim,
            self.p,
            self.repeats,
            self.mean_log10_nmse,
            self.mean_log10_accel,
            self.guarded_row_rate,
            self.seed,
            self.failures
        )
    }
}

struct Instance {
    pre: PreSbnOutput,
    v: Array2<f64>,
}

struct RepeatOutcome {
    log10_nmse: f64,
    log10_accel: f64,
    guarded_rows: usize,
    rows: usize,
}

fn instances(config: &GridConfig, length: usize, repeat: usize) -> Result<Vec<Instance>> {
    let mut out = Vec::with_capacity(config.batch * config.heads);
    for b in 0..config.batch {
        for h in 0..config.heads {
            let seed = derive_seed(
                config.seed,
                &[TAG_DATA, length as u64, repeat as u64, b as u64, h as u64],
            );
            let mut rng = stream_rng(seed, 0);
            let q = gaussian_matrix(length, config.d, &mut rng);
            let k = gaussian_matrix(length, config.d, &mut rng);
            let v = gaussian_matrix(length, config.d, &mut rng);
            out.push(Instance {
                pre: pre_sbn(q.view(), k.view(), config.sbn_epsilon)?,
                v,
            });
        }
    }
    Ok(out)
}

fn draws(
    config: &GridConfig,
    kernel: &KernelSpec,
    length: usize,
    feature_dim: usize,
    repeat: usize,
) -> Result<Vec<FeatureMapDraw>> {
    (0..config.batch * config.heads)
        .map(|i| {
            let seed = derive_seed(
                config.seed,
                &[
                    TAG_DRAW,
                    length as u64,
                    feature_dim as u64,
                    repeat as u64,
                    i as u64,
                ],
            );
            FeatureMapDraw::sample(kernel.clone(), config.d, feature_dim, config.p, seed)
        })
        .collect()
}

fn inputs(instance: &Instance) -> Result<AttentionInputs<'_>> {
    AttentionInputs::new(
        instance.pre.q.view(),
        instance.pre.k.view(),
        instance.v.view(),
    )
}

fn run_repeat(
    config: &GridConfig,
    kernel: &KernelSpec,
    data: &[Instance],
    length: usize,
    feature_dim: usize,
    repeat: usize,
) -> Result<RepeatOutcome> {
    let start = Instant::now();
    let exact = data
        .iter()
        .map(|inst| exact_kernel_attention(kernel, &inputs(inst)?))
        .collect::<Result<Vec<_>>>()?;
    let time_exact = start.elapsed().as_secs_f64();

    let pre_drawn = if config.include_sampling {
        None
    } else {
        Some(draws(config, kernel, length, feature_dim, repeat)?)
    };
    let start = Instant::now();
    let maps = match pre_drawn {
        Some(maps) => maps,
        None => draws(config, kernel, length, feature_dim, repeat)?,
    };
    let approx = data
        .iter()
        .zip(&maps)
        .map(|(inst, draw)| rmfa_with(draw, &inputs(inst)?, RmfaOptions::default()))
        .collect::<Result<Vec<_>>>()?;
    let time_rmfa = start.elapsed().as_secs_f64();

    let (mut err, mut total, mut guarded_rows) = (0.0, 0.0, 0);
    for (a, e) in approx.iter().zip(&exact) {
        guarded_rows += a.guarded_rows;
        for (&x, &y) in a.output.iter().zip(e.iter()) {
            err += (x - y) * (x - y);
            total += y * y;
        }
    }
    if total == 0.0 {
        return Err(Error::ZeroReference);
    }
    Ok(RepeatOutcome {
        log10_nmse: (err / total).log10(),
        log10_accel: (time_exact / time_rmfa.max(f64::MIN_POSITIVE)).log10(),
        guarded_rows,
        rows: data.len() * length,
    })
}

/// Runs every `(length, D)` cell, passing each result to `sink` as soon as it
/// is complete. Cells run one at a time so timings never overlap.
pub fn run_approx_grid_with<F: FnMut(&GridResult)>(
    config: &GridConfig,
    mut sink: F,
) -> Result<Vec<GridResult>> {
    config.validate()?;
    let kernel = KernelSpec::new(config.kernel);
    let mut results = Vec::with_capacity(config.lengths.len() * config.feature_dims.len());
    for &length in &config.lengths {
        for &feature_dim in &config.feature_dims {
            let mut warmed = false;
            let (mut nmse_sum, mut accel_sum, mut guarded, mut rows, mut ok, mut failures) =
                (0.0, 0.0, 0, 0, 0, 0);
            for repeat in 0..config.repeats {
                let outcome = instances(config, length, repeat).and_then(|data| {
                    if !warmed {
                        run_repeat(config, &kernel, &data[..1], length, feature_dim, repeat)?;
                        warmed = true;
                    }
                    run_repeat(config, &kernel, &data, length, feature_dim, repeat)
                });
                match outcome {
                    Ok(o) => {
                        nmse_sum += o.log10_nmse;
                        accel_sum += o.log10_accel;
                        guarded += o.guarded_rows;
                        rows += o.rows;
                        ok += 1;
                    }
                    Err(_) => failures += 1,
                }
            }
            let mean = |sum: f64| if ok == 0 { f64::NAN } else { sum / ok as f64 };
            let result = GridResult {
                kernel: config.kernel,
                length,
                d: config.d,
                feature_dim,
                p: config.p,
                repeats: config.repeats,
                mean_log10_nmse: mean(nmse_sum),
                mean_log10_accel: mean(accel_sum),
                guarded_row_rate: if rows == 0 {
                    0.0
                } else {
                    guarded as f64 / rows as f64
                },
                seed: config.seed,
                failures,
            };
            sink(&result);
            results.push(result);
        }
    }
    Ok(results)
}

pub fn run_approx_grid(config: &GridConfig) -> Result<Vec<GridResult>> {
    run_approx_grid_with(config, |_| {})
}
