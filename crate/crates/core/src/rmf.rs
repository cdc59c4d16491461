//! Random Maclaurin feature maps.
//!
//! A feature `φ_i` draws a degree `N ~ Geometric(1 − 1/p)` and `N`
//! independent Rademacher vectors `ω_1..ω_N`, then maps
//! `x ↦ w_N Π_j ⟨ω_j, x⟩` with `w_N = sqrt(a_N / P[N])`. Because
//! `E_ω[Π_j ⟨ω_j, x⟩⟨ω_j, y⟩] = (x·y)^N`, each product `φ_i(x) φ_i(y)` is an
//! unbiased estimate of `Σ_N a_N (x·y)^N = K(x·y)`. The full map stacks `D`
//! independent features scaled by `sqrt(1/D)`.
//!
//! Sign vectors are stored as packed bits (a set bit is `−1`) and applied by
//! flipping the sign bit of the input entries.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::{Rng, RngCore};
use rand_distr::{Distribution, Geometric};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{CoefficientConvention, KernelId, KernelSpec};
use crate::rng::stream_rng;

/// Default `p`; at `p = 2` the normalized geometric law is exactly `1 / p^{N+1}`.
pub const DEFAULT_P: f64 = 2.0;
/// Degrees above this are rejected and resampled.
pub const DEFAULT_MAX_DEGREE: usize = 64;

/// `P[N = n] = (1 − 1/p) p^{−n}`.
pub fn degree_probability(p: f64, n: usize) -> f64 {
    (1.0 - 1.0 / p) * p.powi(-(n as i32))
}

fn check_p(p: f64) -> Result<()> {
    if p.is_finite() && p > 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(
            "p",
            format!("must be a finite value > 1, got {p}"),
        ))
    }
}

/// Draws a feature degree from the geometric law with ratio `1/p`.
pub fn sample_degree<R: Rng + ?Sized>(p: f64, rng: &mut R) -> Result<usize> {
    check_p(p)?;
    let geometric =
        Geometric::new(1.0 - 1.0 / p).map_err(|e| Error::invalid("p", e.to_string()))?;
    Ok(usize::try_from(geometric.sample(rng)).unwrap_or(usize::MAX))
}

fn sample_degree_capped<R: Rng + ?Sized>(p: f64, max_degree: usize, rng: &mut R) -> Result<usize> {
    loop {
        let n = sample_degree(p, rng)?;
        if n <= max_degree {
            return Ok(n);
        }
    }
}

/// Everything needed to regenerate a [`FeatureMapDraw`] bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMapSpec {
    pub kernel: KernelId,
    #[serde(default)]
    pub convention: CoefficientConvention,
    pub input_dim: usize,
    pub feature_dim: usize,
    pub p: f64,
    pub seed: u64,
    #[serde(default = "default_max_degree")]
    pub max_degree: usize,
}

fn default_max_degree() -> usize {
    DEFAULT_MAX_DEGREE
}

impl FeatureMapSpec {
    pub fn new(kernel: KernelId, input_dim: usize, feature_dim: usize, seed: u64) -> Self {
        Self {
            kernel,
            convention: CoefficientConvention::SeriesExact,
            input_dim,
            feature_dim,
            p: DEFAULT_P,
            seed,
            max_degree: DEFAULT_MAX_DEGREE,
        }
    }

    pub fn sample(&self) -> Result<FeatureMapDraw> {
        let kernel = KernelSpec::with_convention(self.kernel, self.convention);
        FeatureMapDraw::sample_with_max_degree(
            kernel,
            self.input_dim,
            self.feature_dim,
            self.p,
            self.seed,
            self.max_degree,
        )
    }
}

/// One frozen sample of the random Maclaurin feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMapDraw {
    kernel: KernelSpec,
    input_dim: usize,
    feature_dim: usize,
    p: f64,
    seed: u64,
    max_degree: usize,
    degrees: Vec<usize>,
    /// `offsets[i]..offsets[i + 1]` indexes the sign vectors of feature `i`.
    offsets: Vec<usize>,
    /// Packed sign vectors, `words_per_vector` words each.
    signs: Vec<u64>,
    words_per_vector: usize,
    weights: Vec<f64>,
}

pub fn sample_feature_map(
    kernel: KernelSpec,
    d: usize,
    feature_dim: usize,
    p: f64,
    seed: u64,
) -> Result<FeatureMapDraw> {
    FeatureMapDraw::sample(kernel, d, feature_dim, p, seed)
}

impl FeatureMapDraw {
    pub fn sample(
        kernel: KernelSpec,
        d: usize,
        feature_dim: usize,
        p: f64,
        seed: u64,
    ) -> Result<Self> {
        Self::sample_with_max_degree(kernel, d, feature_dim, p, seed, DEFAULT_MAX_DEGREE)
    }

    pub fn sample_with_max_degree(
        kernel: KernelSpec,
        d: usize,
        feature_dim: usize,
        p: f64,
        seed: u64,
        max_degree: usize,
    ) -> Result<Self> {
        if d == 0 {
            return Err(Error::invalid("input_dim", "must be at least 1"));
        }
        if feature_dim == 0 {
            return Err(Error::invalid("feature_dim", "must be at least 1"));
        }
        check_p(p)?;

        let words_per_vector = d.div_ceil(64);
        let tail_mask = match d % 64 {
            0 => u64::MAX,
            r => (1u64 << r) - 1,
        };
        let mut degrees = Vec::with_capacity(feature_dim);
        let mut offsets = Vec::with_capacity(feature_dim + 1);
        let mut signs = Vec::new();
        let mut weights = Vec::with_capacity(feature_dim);
        offsets.push(0);

        for i in 0..feature_dim {
            let mut rng = stream_rng(seed, i as u64);
            let n = sample_degree_capped(p, max_degree, &mut rng)?;
            for _ in 0..n {
                for w in 0..words_per_vector {
                    let bits = rng.next_u64();
                    signs.push(if w + 1 == words_per_vector {
                        bits & tail_mask
                    } else {
                        bits
                    });
                }
            }
            let a = kernel.coefficient(n)?;
            weights.push((a / degree_probability(p, n)).sqrt());
            degrees.push(n);
            offsets.push(offsets[i] + n);
        }

        Ok(Self {
            kernel,
            input_dim: d,
            feature_dim,
            p,
            seed,
            max_degree,
            degrees,
            offsets,
            signs,
            words_per_vector,
            weights,
        })
    }

    pub fn spec(&self) -> FeatureMapSpec {
        FeatureMapSpec {
            kernel: self.kernel.id(),
            convention: self.kernel.convention(),
            input_dim: self.input_dim,
            feature_dim: self.feature_dim,
            p: self.p,
            seed: self.seed,
            max_degree: self.max_degree,
        }
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn degrees(&self) -> &[usize] {
        &self.degrees
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Sign vector `j` of feature `i` as `±1.0` entries.
    pub fn rademacher(&self, feature: usize, j: usize) -> Vec<f64> {
        assert!(
            j < self.degrees[feature],
            "feature {feature} has degree {}",
            self.degrees[feature]
        );
        let words = self.sign_words(self.offsets[feature] + j);
        (0..self.input_dim)
            .map(|k| {
                if (words[k / 64] >> (k % 64)) & 1 == 1 {
                    -1.0
                } else {
                    1.0
                }
            })
            .collect()
    }

    fn sign_words(&self, vector: usize) -> &[u64] {
        let start = vector * self.words_per_vector;
        &self.signs[start..start + self.words_per_vector]
    }

    /// `w_i Π_j ⟨ω_{i,j}, x⟩` without the `sqrt(1/D)` factor.
    fn feature_value(&self, feature: usize, x: &[f64]) -> f64 {
        let product: f64 = (self.offsets[feature]..self.offsets[feature + 1])
            .map(|v| signed_dot(self.sign_words(v), x))
            .product();
        self.weights[feature] * product
    }

    fn check_dim(&self, actual: usize) -> Result<()> {
        if actual == self.input_dim {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                what: "feature map input",
                expected: self.input_dim,
                actual,
            })
        }
    }

    /// Maps every row of `x` (n × d) to its feature vector (n × D).
    pub fn apply(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_dim(x.ncols())?;
        let scale = (1.0 / self.feature_dim as f64).sqrt();
        let mut out = Array2::zeros((x.nrows(), self.feature_dim));
        let mut buf = vec![0.0; self.input_dim];
        for (row, mut out_row) in x.rows().into_iter().zip(out.rows_mut()) {
            let slice = match row.as_slice() {
                Some(s) => s,
                None => {
                    buf.iter_mut().zip(row.iter()).for_each(|(b, &v)| *b = v);
                    &buf
                }
            };
            for (i, o) in out_row.iter_mut().enumerate() {
                *o = scale * self.feature_value(i, slice);
            }
        }
        Ok(out)
    }

    /// Feature vector `Φ(x)` of a single input.
    pub fn apply_vector(&self, x: ArrayView1<'_, f64>) -> Result<Vec<f64>> {
        self.check_dim(x.len())?;
        let x = x.to_vec();
        let scale = (1.0 / self.feature_dim as f64).sqrt();
        Ok((0..self.feature_dim)
            .map(|i| scale * self.feature_value(i, &x))
            .collect())
    }

    /// Per-feature products `φ_i(x) φ_i(y)`; each one is an independent
    /// single-feature estimate of `K(x·y)` and their mean is `Φ(x)·Φ(y)`.
    pub fn feature_products(
        &self,
        x: ArrayView1<'_, f64>,
        y: ArrayView1<'_, f64>,
    ) -> Result<Vec<f64>> {
        self.check_dim(x.len())?;
        self.check_dim(y.len())?;
        let (x, y) = (x.to_vec(), y.to_vec());
        Ok((0..self.feature_dim)
            .map(|i| self.feature_value(i, &x) * self.feature_value(i, &y))
            .collect())
    }

    /// `Φ(x)·Φ(y)`.
    pub fn estimate_kernel(&self, x: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>) -> Result<f64> {
        let products = self.feature_products(x, y)?;
        Ok(products.iter().sum::<f64>() / self.feature_dim as f64)
    }
}

pub fn apply_feature_map(draw: &FeatureMapDraw, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    draw.apply(x)
}

pub fn estimate_kernel(
    draw: &FeatureMapDraw,
    x: ArrayView1<'_, f64>,
    y: ArrayView1<'_, f64>,
) -> Result<f64> {
    draw.estimate_kernel(x, y)
}

/// `Σ_k s_k x_k` with `s_k = −1` where bit `k` is set.
#[inline]
fn signed_dot(words: &[u64], x: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (chunk, &word) in x.chunks(64).zip(words) {
        for (bit, &v) in chunk.iter().enumerate() {
            let flip = ((word >> bit) & 1) << 63;
            acc += f64::from_bits(v.to_bits() ^ flip);
        }
    }
    acc
}
