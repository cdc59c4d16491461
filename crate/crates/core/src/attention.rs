//! Softmax, exact kernelized, and random-feature attention.
//!
//! The quadratic paths ([`softmax_attention`], [`exact_kernel_attention`],
//! [`rmfa_reference`]) materialize the n × n weight matrix. [`rmfa`] never
//! does: it maps `Q/d^{1/4}` and `K/d^{1/4}` through the feature map once and
//! contracts keys with values first,
//!
//! ```text
//! out_r = Φq_r · Σ_j M'_rj Φk_j ⊗ V_j  /  Φq_r · Σ_j M'_rj Φk_j
//! ```
//!
//! with the key sums either global (no mask) or running prefix sums
//! (causal), for O(n·D·d) work.
//!
//! Masks are applied outside the kernel: a converted binary mask `M'` zeroes
//! kernel values after evaluation.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::rmf::FeatureMapDraw;

/// Default floor for random-feature denominators.
pub const DEFAULT_DENOM_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskKind<'a> {
    None,
    Causal,
    /// Additive-style mask; entries `< 0` (including `−∞`) hide a position.
    Explicit(ArrayView2<'a, f64>),
}

impl MaskKind<'_> {
    /// The same mask borrowed for a shorter lifetime.
    pub fn reborrow(&self) -> MaskKind<'_> {
        match self {
            MaskKind::None => MaskKind::None,
            MaskKind::Causal => MaskKind::Causal,
            MaskKind::Explicit(m) => MaskKind::Explicit(m.view()),
        }
    }
}

/// `M'` with entries in `{0, 1}`; `1` marks a visible key.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    values: Array2<f64>,
}

impl BinaryMask {
    pub fn all_visible(rows: usize, cols: usize) -> Self {
        Self {
            values: Array2::ones((rows, cols)),
        }
    }

    /// Lower-triangular all-ones.
    pub fn causal(n: usize) -> Self {
        Self {
            values: Array2::from_shape_fn((n, n), |(i, j)| if j <= i { 1.0 } else { 0.0 }),
        }
    }

    pub fn from_visibility(visible: &Array2<bool>) -> Self {
        Self {
            values: visible.mapv(|v| if v { 1.0 } else { 0.0 }),
        }
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn is_visible(&self, row: usize, col: usize) -> bool {
        self.values[[row, col]] != 0.0
    }
}

/// `M'_ij = 1` if `M_ij ≥ 0`, else `0`.
pub fn convert_mask(m: ArrayView2<'_, f64>) -> BinaryMask {
    BinaryMask {
        values: m.mapv(|x| if x >= 0.0 { 1.0 } else { 0.0 }),
    }
}

/// Query, key and value matrices with a mask. Keys and values share their
/// row count, queries and keys share their column count.
#[derive(Debug, Clone, Copy)]
pub struct AttentionInputs<'a> {
    pub q: ArrayView2<'a, f64>,
    pub k: ArrayView2<'a, f64>,
    pub v: ArrayView2<'a, f64>,
    pub mask: MaskKind<'a>,
}

fn check_finite(m: ArrayView2<'_, f64>, what: &'static str) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { what })
    }
}

impl<'a> AttentionInputs<'a> {
    pub fn new(
        q: ArrayView2<'a, f64>,
        k: ArrayView2<'a, f64>,
        v: ArrayView2<'a, f64>,
    ) -> Result<Self> {
        if q.ncols() != k.ncols() {
            return Err(Error::DimensionMismatch {
                what: "key width",
                expected: q.ncols(),
                actual: k.ncols(),
            });
        }
        if k.nrows() != v.nrows() {
            return Err(Error::DimensionMismatch {
                what: "value rows",
                expected: k.nrows(),
                actual: v.nrows(),
            });
        }
        if q.ncols() == 0 {
            return Err(Error::invalid(
                "d",
                "queries and keys need at least one column",
            ));
        }
        if q.nrows() == 0 || k.nrows() == 0 {
            return Err(Error::invalid(
                "n",
                "sequences must contain at least one row",
            ));
        }
        check_finite(q, "Q")?;
        check_finite(k, "K")?;
        check_finite(v, "V")?;
        Ok(Self {
            q,
            k,
            v,
            mask: MaskKind::None,
        })
    }

    pub fn with_mask(mut self, mask: MaskKind<'a>) -> Result<Self> {
        let (nq, nk) = (self.q.nrows(), self.k.nrows());
        match mask {
            MaskKind::None => {}
            MaskKind::Causal if nq != nk => {
                return Err(Error::DimensionMismatch {
                    what: "causal mask keys",
                    expected: nq,
                    actual: nk,
                })
            }
            MaskKind::Causal => {}
            MaskKind::Explicit(m) => {
                if m.nrows() != nq || m.ncols() != nk {
                    return Err(Error::DimensionMismatch {
                        what: "explicit mask shape",
                        expected: nq * nk,
                        actual: m.len(),
                    });
                }
            }
        }
        self.mask = mask;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.q.nrows()
    }

    pub fn d(&self) -> usize {
        self.q.ncols()
    }

    /// Whether query `row` may attend to key `col`.
    fn visible(&self, row: usize, col: usize) -> bool {
        match self.mask {
            MaskKind::None => true,
            MaskKind::Causal => col <= row,
            MaskKind::Explicit(m) => m[[row, col]] >= 0.0,
        }
    }

    /// The binary mask implied by [`Self::mask`].
    pub fn binary_mask(&self) -> BinaryMask {
        match self.mask {
            MaskKind::None => BinaryMask::all_visible(self.q.nrows(), self.k.nrows()),
            MaskKind::Causal => BinaryMask::causal(self.q.nrows()),
            MaskKind::Explicit(m) => convert_mask(m),
        }
    }
}

/// Row-wise softmax of `QKᵀ/√d` with hidden positions at `−∞`, times `V`.
pub fn softmax_attention(inputs: &AttentionInputs<'_>) -> Result<Array2<f64>> {
    let scale = 1.0 / (inputs.d() as f64).sqrt();
    let mut weights = inputs.q.dot(&inputs.k.t());
    for (r, mut row) in weights.rows_mut().into_iter().enumerate() {
        let max = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| inputs.visible(r, j))
            .map(|(_, &s)| s * scale)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::FullyMaskedRow { row: r });
        }
        let mut total = 0.0;
        for (j, w) in row.iter_mut().enumerate() {
            *w = if inputs.visible(r, j) {
                (*w * scale - max).exp()
            } else {
                0.0
            };
            total += *w;
        }
        row.mapv_inplace(|w| w / total);
    }
    Ok(weights.dot(&inputs.v))
}

/// `Σ_i K(Q_r·K_i/√d) M'_ri V_i / Σ_j K(Q_r·K_j/√d) M'_rj` evaluated with the
/// kernel's closed form.
pub fn exact_kernel_attention(
    kernel: &KernelSpec,
    inputs: &AttentionInputs<'_>,
) -> Result<Array2<f64>> {
    let scale = 1.0 / (inputs.d() as f64).sqrt();
    let mut weights = inputs.q.dot(&inputs.k.t());
    let mut denominators = Array1::zeros(inputs.q.nrows());
    for (r, mut row) in weights.rows_mut().into_iter().enumerate() {
        let mut total = 0.0;
        for (j, w) in row.iter_mut().enumerate() {
            *w = if inputs.visible(r, j) {
                kernel.value(*w * scale)?
            } else {
                0.0
            };
            total += *w;
        }
        if total == 0.0 || !total.is_finite() {
            return Err(Error::ZeroDenominator { row: r });
        }
        denominators[r] = total;
    }
    let mut out = weights.dot(&inputs.v);
    out.axis_iter_mut(Axis(0))
        .zip(denominators.iter())
        .for_each(|(mut row, &den)| row.mapv_inplace(|x| x / den));
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RmfaOptions {
    /// Denominators with magnitude below this are replaced by
    /// `sign(den) · denom_floor`.
    pub denom_floor: f64,
}

impl Default for RmfaOptions {
    fn default() -> Self {
        Self {
            denom_floor: DEFAULT_DENOM_FLOOR,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RmfaOutput {
    pub output: Array2<f64>,
    /// Rows whose denominator was replaced by the floor.
    pub guarded_rows: usize,
}

#[inline]
fn guard(den: f64, floor: f64) -> (f64, bool) {
    if den.abs() >= floor {
        (den, false)
    } else if den < 0.0 {
        (-floor, true)
    } else {
        (floor, true)
    }
}

fn check_draw(draw: &FeatureMapDraw, inputs: &AttentionInputs<'_>) -> Result<()> {
    if draw.input_dim() != inputs.d() {
        return Err(Error::DimensionMismatch {
            what: "feature map input",
            expected: draw.input_dim(),
            actual: inputs.d(),
        });
    }
    Ok(())
}

/// Random-feature images of `Q/d^{1/4}` and `K/d^{1/4}`.
fn feature_images(
    draw: &FeatureMapDraw,
    inputs: &AttentionInputs<'_>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let scale = (inputs.d() as f64).powf(-0.25);
    let phi_q = draw.apply((&inputs.q * scale).view())?;
    let phi_k = draw.apply((&inputs.k * scale).view())?;
    Ok((phi_q, phi_k))
}

/// Linear-time random Maclaurin feature attention with default options.
pub fn rmfa(draw: &FeatureMapDraw, inputs: &AttentionInputs<'_>) -> Result<Array2<f64>> {
    rmfa_with(draw, inputs, RmfaOptions::default()).map(|o| o.output)
}

pub fn rmfa_with(
    draw: &FeatureMapDraw,
    inputs: &AttentionInputs<'_>,
    options: RmfaOptions,
) -> Result<RmfaOutput> {
    check_draw(draw, inputs)?;
    let causal = match inputs.mask {
        MaskKind::None => false,
        MaskKind::Causal => true,
        MaskKind::Explicit(_) => return Err(Error::UnsupportedMask),
    };
    let (phi_q, phi_k) = feature_images(draw, inputs)?;
    if causal {
        Ok(causal_rmfa(
            phi_q.view(),
            phi_k.view(),
            inputs.v,
            options.denom_floor,
        ))
    } else {
        Ok(global_rmfa(
            phi_q.view(),
            phi_k.view(),
            inputs.v,
            options.denom_floor,
        ))
    }
}

fn global_rmfa(
    phi_q: ArrayView2<'_, f64>,
    phi_k: ArrayView2<'_, f64>,
    v: ArrayView2<'_, f64>,
    floor: f64,
) -> RmfaOutput {
    let summary = phi_k.t().dot(&v);
    let key_sum = phi_k.sum_axis(Axis(0));
    let mut output = phi_q.dot(&summary);
    let denominators = phi_q.dot(&key_sum);
    let mut guarded_rows = 0;
    for (mut row, &den) in output.rows_mut().into_iter().zip(denominators.iter()) {
        let (den, guarded) = guard(den, floor);
        guarded_rows += usize::from(guarded);
        row.mapv_inplace(|x| x / den);
    }
    RmfaOutput {
        output,
        guarded_rows,
    }
}

/// Neumaier-compensated running sums.
struct CompensatedSum {
    sum: Vec<f64>,
    carry: Vec<f64>,
}

impl CompensatedSum {
    fn zeros(len: usize) -> Self {
        Self {
            sum: vec![0.0; len],
            carry: vec![0.0; len],
        }
    }

    #[inline]
    fn add(&mut self, index: usize, x: f64) {
        let s = self.sum[index];
        let t = s + x;
        self.carry[index] += if s.abs() >= x.abs() {
            (s - t) + x
        } else {
            (x - t) + s
        };
        self.sum[index] = t;
    }

    #[inline]
    fn get(&self, index: usize) -> f64 {
        self.sum[index] + self.carry[index]
    }
}

fn causal_rmfa(
    phi_q: ArrayView2<'_, f64>,
    phi_k: ArrayView2<'_, f64>,
    v: ArrayView2<'_, f64>,
    floor: f64,
) -> RmfaOutput {
    let (n, features) = phi_k.dim();
    let width = v.ncols();
    // state[f * width + c] = Σ_{j ≤ r} Φk_jf V_jc
    let mut state = CompensatedSum::zeros(features * width);
    let mut key_sum = CompensatedSum::zeros(features);
    let mut output = Array2::zeros((n, width));
    let mut guarded_rows = 0;
    let mut mixed = vec![0.0; features * width];
    let mut totals = vec![0.0; features];
    for r in 0..n {
        let (k_row, v_row, q_row) = (phi_k.row(r), v.row(r), phi_q.row(r));
        for (f, &kf) in k_row.iter().enumerate() {
            key_sum.add(f, kf);
            for (c, &vc) in v_row.iter().enumerate() {
                state.add(f * width + c, kf * vc);
            }
        }
        for f in 0..features {
            totals[f] = key_sum.get(f);
            for c in 0..width {
                mixed[f * width + c] = state.get(f * width + c);
            }
        }
        let den: f64 = q_row.iter().zip(&totals).map(|(a, b)| a * b).sum();
        let (den, guarded) = guard(den, floor);
        guarded_rows += usize::from(guarded);
        let mut out_row = output.row_mut(r);
        for c in 0..width {
            let num: f64 = q_row
                .iter()
                .enumerate()
                .map(|(f, &qf)| qf * mixed[f * width + c])
                .sum();
            out_row[c] = num / den;
        }
    }
    RmfaOutput {
        output,
        guarded_rows,
    }
}

/// Quadratic evaluation of the same estimator as [`rmfa`]: materializes
/// `Φq Φkᵀ ⊙ M'`, normalizes rows and multiplies by `V`.
pub fn rmfa_reference(
    draw: &FeatureMapDraw,
    inputs: &AttentionInputs<'_>,
    mask: &BinaryMask,
) -> Result<Array2<f64>> {
    rmfa_reference_with(draw, inputs, mask, RmfaOptions::default()).map(|o| o.output)
}

pub fn rmfa_reference_with(
    draw: &FeatureMapDraw,
    inputs: &AttentionInputs<'_>,
    mask: &BinaryMask,
    options: RmfaOptions,
) -> Result<RmfaOutput> {
    check_draw(draw, inputs)?;
    let (nq, nk) = (inputs.q.nrows(), inputs.k.nrows());
    if mask.dim() != (nq, nk) {
        return Err(Error::DimensionMismatch {
            what: "binary mask shape",
            expected: nq * nk,
            actual: mask.values.len(),
        });
    }
    let (phi_q, phi_k) = feature_images(draw, inputs)?;
    let weights = phi_q.dot(&phi_k.t()) * &mask.values;
    let mut output = weights.dot(&inputs.v);
    let mut guarded_rows = 0;
    for (r, (mut row, weight_row)) in output
        .rows_mut()
        .into_iter()
        .zip(weights.rows())
        .enumerate()
    {
        if mask.values.row(r).iter().all(|&m| m == 0.0) {
            return Err(Error::ZeroDenominator { row: r });
        }
        let (den, guarded) = guard(weight_row.sum(), options.denom_floor);
        guarded_rows += usize::from(guarded);
        row.mapv_inplace(|x| x / den);
    }
    Ok(RmfaOutput {
        output,
        guarded_rows,
    })
}

/// Largest absolute entrywise difference.
pub fn max_abs_diff(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// L2 norm of a vector view.
pub(crate) fn norm(v: ArrayView1<'_, f64>) -> f64 {
    v.dot(&v).sqrt()
}
