//! Pre-post scaling batch normalization.
//!
//! The pre stage standardizes every feature of `Q` and `K` over the sequence
//! axis and then divides each matrix by its Frobenius norm, which places
//! every row in the closed unit ball. The post stage rescales the attention
//! output entrywise by `(γ·x)^β`.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};

use crate::attention::{rmfa_with, AttentionInputs, RmfaOptions};
use crate::error::{Error, Result};
use crate::rmf::FeatureMapDraw;

pub const DEFAULT_EPSILON: f64 = 1e-12;

/// How stage two scales the standardized matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StageTwoNorm {
    /// Divide the whole matrix by its Frobenius norm.
    #[default]
    Frobenius,
    /// Divide each row by its own norm.
    PerRow,
}

/// What to do when a matrix is constant along the sequence axis, so stage
/// two would divide by zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DegeneratePolicy {
    #[default]
    Error,
    /// Keep the all-zero standardized matrix.
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreSbnOptions {
    pub epsilon: f64,
    pub norm: StageTwoNorm,
    pub on_degenerate: DegeneratePolicy,
}

impl Default for PreSbnOptions {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            norm: StageTwoNorm::Frobenius,
            on_degenerate: DegeneratePolicy::Error,
        }
    }
}

/// Reduces the per-feature factors `sqrt((σ_Q + ε)(σ_K + ε))` to one scalar.
#[derive(Debug, Clone, Copy, Default)]
pub enum ScaleReducer {
    #[default]
    Mean,
    Custom(fn(&[f64]) -> f64),
}

impl ScaleReducer {
    pub fn reduce(&self, factors: &[f64]) -> f64 {
        match self {
            ScaleReducer::Mean => factors.iter().sum::<f64>() / factors.len() as f64,
            ScaleReducer::Custom(f) => f(factors),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SbnStats {
    pub mu_q: Array1<f64>,
    pub mu_k: Array1<f64>,
    /// Population variances.
    pub sigma_q: Array1<f64>,
    pub sigma_k: Array1<f64>,
    /// Frobenius norms of the standardized matrices (before stage two).
    pub frob_q: f64,
    pub frob_k: f64,
    pub epsilon: f64,
    /// [`derived_scale_r`] under [`ScaleReducer::Mean`].
    pub r: f64,
}

impl SbnStats {
    /// `sqrt((σ_Q,f + ε)(σ_K,f + ε))` for every feature `f`.
    pub fn scale_factors(&self) -> Vec<f64> {
        self.sigma_q
            .iter()
            .zip(self.sigma_k.iter())
            .map(|(&sq, &sk)| ((sq + self.epsilon) * (sk + self.epsilon)).sqrt())
            .collect()
    }

    /// `frob_Q · frob_K · sqrt((σ_Q,f + ε)(σ_K,f + ε))` for every feature.
    pub fn per_feature_scale(&self) -> Vec<f64> {
        self.scale_factors()
            .into_iter()
            .map(|s| self.frob_q * self.frob_k * s)
            .collect()
    }
}

/// `r = frob_Q · frob_K · mean_f sqrt((σ_Q,f + ε)(σ_K,f + ε))`.
pub fn derived_scale_r(stats: &SbnStats) -> f64 {
    derived_scale_r_with(stats, ScaleReducer::Mean)
}

pub fn derived_scale_r_with(stats: &SbnStats, reducer: ScaleReducer) -> f64 {
    stats.frob_q * stats.frob_k * reducer.reduce(&stats.scale_factors())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreSbnOutput {
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub stats: SbnStats,
}

/// Column means and population variances.
pub fn feature_moments(x: ArrayView2<'_, f64>) -> (Array1<f64>, Array1<f64>) {
    let n = x.nrows() as f64;
    let mean = x.sum_axis(Axis(0)) / n;
    let mut var = Array1::zeros(x.ncols());
    for row in x.rows() {
        Zip::from(&mut var)
            .and(&row)
            .and(&mean)
            .for_each(|v, &x, &m| *v += (x - m) * (x - m));
    }
    var /= n;
    (mean, var)
}

fn standardize(x: ArrayView2<'_, f64>, epsilon: f64) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let (mean, var) = feature_moments(x);
    let inv_std = var.mapv(|s| 1.0 / (s + epsilon).sqrt());
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        Zip::from(&mut row)
            .and(&mean)
            .and(&inv_std)
            .for_each(|v, &m, &s| *v = (*v - m) * s);
    }
    (out, mean, var)
}

fn frobenius(x: ArrayView2<'_, f64>) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn scale_stage_two(
    x: &mut Array2<f64>,
    frob: f64,
    options: &PreSbnOptions,
    which: &'static str,
) -> Result<()> {
    if frob == 0.0 {
        return match options.on_degenerate {
            DegeneratePolicy::Error => Err(Error::DegenerateInput { which }),
            DegeneratePolicy::Zero => Ok(()),
        };
    }
    match options.norm {
        StageTwoNorm::Frobenius => x.mapv_inplace(|v| v / frob),
        StageTwoNorm::PerRow => {
            for mut row in x.rows_mut() {
                let n = row.dot(&row).sqrt();
                if n > 0.0 {
                    row.mapv_inplace(|v| v / n);
                }
            }
        }
    }
    Ok(())
}

/// Both ppSBN pre stages with default options and the given `ε`.
pub fn pre_sbn(
    q: ArrayView2<'_, f64>,
    k: ArrayView2<'_, f64>,
    epsilon: f64,
) -> Result<PreSbnOutput> {
    pre_sbn_with(
        q,
        k,
        PreSbnOptions {
            epsilon,
            ..PreSbnOptions::default()
        },
    )
}

pub fn pre_sbn_with(
    q: ArrayView2<'_, f64>,
    k: ArrayView2<'_, f64>,
    options: PreSbnOptions,
) -> Result<PreSbnOutput> {
    if !(options.epsilon > 0.0) {
        return Err(Error::invalid(
            "epsilon",
            format!("must be positive, got {}", options.epsilon),
        ));
    }
    if q.nrows() == 0 || k.nrows() == 0 {
        return Err(Error::invalid("n", "pre_sbn needs at least one row"));
    }
    if q.ncols() != k.ncols() {
        return Err(Error::DimensionMismatch {
            what: "key width",
            expected: q.ncols(),
            actual: k.ncols(),
        });
    }
    let (mut q_sbn, mu_q, sigma_q) = standardize(q, options.epsilon);
    let (mut k_sbn, mu_k, sigma_k) = standardize(k, options.epsilon);
    let frob_q = frobenius(q_sbn.view());
    let frob_k = frobenius(k_sbn.view());
    scale_stage_two(&mut q_sbn, frob_q, &options, "Q")?;
    scale_stage_two(&mut k_sbn, frob_k, &options, "K")?;
    let mut stats = SbnStats {
        mu_q,
        mu_k,
        sigma_q,
        sigma_k,
        frob_q,
        frob_k,
        epsilon: options.epsilon,
        r: 0.0,
    };
    stats.r = derived_scale_r(&stats);
    Ok(PreSbnOutput {
        q: q_sbn,
        k: k_sbn,
        stats,
    })
}

/// Matrix norm used by stage two, exposed so callers can re-apply it.
pub fn frobenius_normalize(x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let mut out = x.to_owned();
    let frob = frobenius(x);
    scale_stage_two(&mut out, frob, &PreSbnOptions::default(), "matrix")?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PpsbnParams {
    pub epsilon: f64,
    pub gamma: f64,
    pub beta: f64,
    pub norm: StageTwoNorm,
    pub on_degenerate: DegeneratePolicy,
}

impl Default for PpsbnParams {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            gamma: 1.0,
            beta: 1.0,
            norm: StageTwoNorm::Frobenius,
            on_degenerate: DegeneratePolicy::Zero,
        }
    }
}

impl PpsbnParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid(
                "epsilon",
                format!("must be positive, got {}", self.epsilon),
            ));
        }
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(Error::invalid(
                "gamma",
                format!("must be positive, got {}", self.gamma),
            ));
        }
        if !self.beta.is_finite() {
            return Err(Error::invalid("beta", "must be finite"));
        }
        Ok(())
    }

    fn pre_options(&self) -> PreSbnOptions {
        PreSbnOptions {
            epsilon: self.epsilon,
            norm: self.norm,
            on_degenerate: self.on_degenerate,
        }
    }
}

/// Entrywise `sign(γx) |γx|^β`.
pub fn post_sbn(att: ArrayView2<'_, f64>, params: &PpsbnParams) -> Result<Array2<f64>> {
    let (gamma, beta) = (params.gamma, params.beta);
    if beta == 1.0 {
        return Ok(att.mapv(|x| gamma * x));
    }
    let mut out = Array2::zeros(att.raw_dim());
    for (o, &x) in out.iter_mut().zip(att.iter()) {
        let y = gamma * x;
        *o = if y == 0.0 {
            if beta <= 0.0 {
                return Err(Error::ZeroPower { beta });
            }
            0.0
        } else {
            y.signum() * y.abs().powf(beta)
        };
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PpsbnOutput {
    pub output: Array2<f64>,
    pub stats: SbnStats,
    pub guarded_rows: usize,
}

/// Pre stages on `Q`, `K`; RMFA with the original `V`; post stage.
pub fn ppsbn_attention(
    draw: &FeatureMapDraw,
    inputs: &AttentionInputs<'_>,
    params: &PpsbnParams,
) -> Result<Array2<f64>> {
    ppsbn_attention_with(draw, inputs, params, RmfaOptions::default()).map(|o| o.output)
}

pub fn ppsbn_attention_with(
    draw: &FeatureMapDraw,
    inputs: &AttentionInputs<'_>,
    params: &PpsbnParams,
    options: RmfaOptions,
) -> Result<PpsbnOutput> {
    params.validate()?;
    let pre = pre_sbn_with(inputs.q, inputs.k, params.pre_options())?;
    let scaled = AttentionInputs::new(pre.q.view(), pre.k.view(), inputs.v.view())?
        .with_mask(inputs.mask.reborrow())?;
    let attended = rmfa_with(draw, &scaled, options)?;
    Ok(PpsbnOutput {
        output: post_sbn(attended.output.view(), params)?,
        stats: pre.stats,
        guarded_rows: attended.guarded_rows,
    })
}

/// `Softmax((Q − μ_Q)(K − μ_K)ᵀ ⊘ S / √d) V` where the centered product is
/// divided feature-wise by `scale` (one entry per feature). With
/// `scale_f = r` for all `f` this is the scalar-`r` form.
pub fn centered_softmax_attention(
    q: ArrayView2<'_, f64>,
    k: ArrayView2<'_, f64>,
    v: ArrayView2<'_, f64>,
    scale: &[f64],
) -> Result<Array2<f64>> {
    let d = q.ncols();
    if scale.len() != d {
        return Err(Error::DimensionMismatch {
            what: "feature scale",
            expected: d,
            actual: scale.len(),
        });
    }
    let (mu_q, _) = feature_moments(q);
    let (mu_k, _) = feature_moments(k);
    let root_d = (d as f64).sqrt();
    let mut qc = &q - &mu_q;
    for mut row in qc.rows_mut() {
        Zip::from(&mut row)
            .and(scale)
            .for_each(|x, &s| *x /= s * root_d);
    }
    let kc = &k - &mu_k;
    let mut logits = qc.dot(&kc.t());
    for mut row in logits.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - max).exp());
        let total = row.sum();
        row.mapv_inplace(|x| x / total);
    }
    Ok(logits.dot(&v))
}
