//! Dot-product kernels with non-negative Maclaurin coefficients.
//!
//! | kernel | f(t)               | radius |
//! |--------|--------------------|--------|
//! | exp    | exp(t)             | ∞      |
//! | inv    | 1 / (1 − t)        | 1      |
//! | log    | 1 − log(1 − t)     | 1      |
//! | trigh  | sinh(t) + cosh(t)  | ∞      |
//! | sqrt   | 2 − sqrt(1 − t)    | 1      |
//!
//! Coefficients come in two conventions. [`CoefficientConvention::SeriesExact`]
//! returns the true Taylor coefficients of `f` at zero, which is what keeps
//! the random Maclaurin estimator unbiased. [`CoefficientConvention::Tabulated`]
//! evaluates the tabulated closed forms literally (`1/min(1, N)` for log and
//! `max(1, 2N − 3) / (2^N N!)` for sqrt), which differ from the series for
//! log at `N ≥ 2` and for sqrt at `N ≥ 4`.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default number of cached coefficients (degrees `0..=64`).
pub const DEFAULT_MAX_CACHED_DEGREE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelId {
    Exp,
    Inv,
    Log,
    Trigh,
    Sqrt,
}

impl KernelId {
    pub const ALL: [KernelId; 5] = [
        KernelId::Exp,
        KernelId::Inv,
        KernelId::Log,
        KernelId::Trigh,
        KernelId::Sqrt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            KernelId::Exp => "exp",
            KernelId::Inv => "inv",
            KernelId::Log => "log",
            KernelId::Trigh => "trigh",
            KernelId::Sqrt => "sqrt",
        }
    }

    /// Supremum of `|t|` for which the closed form is defined.
    pub fn domain_radius(self) -> f64 {
        match self {
            KernelId::Exp | KernelId::Trigh => f64::INFINITY,
            KernelId::Inv | KernelId::Log | KernelId::Sqrt => 1.0,
        }
    }
}

impl fmt::Display for KernelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KernelId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        KernelId::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| {
                Error::invalid(
                    "kernel",
                    format!("unknown kernel `{s}` (expected exp, inv, log, trigh or sqrt)"),
                )
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoefficientConvention {
    #[default]
    SeriesExact,
    Tabulated,
}

impl CoefficientConvention {
    pub fn name(self) -> &'static str {
        match self {
            CoefficientConvention::SeriesExact => "series_exact",
            CoefficientConvention::Tabulated => "tabulated",
        }
    }
}

/// Closed form `f(t)` of a kernel.
pub fn kernel_value(id: KernelId, t: f64) -> Result<f64> {
    let radius = id.domain_radius();
    // `!(a < b)` also rejects NaN.
    if !(t.abs() < radius) {
        return Err(Error::Domain {
            kernel: id,
            t,
            radius,
        });
    }
    Ok(match id {
        KernelId::Exp => t.exp(),
        KernelId::Inv => 1.0 / (1.0 - t),
        KernelId::Log => 1.0 - (-t).ln_1p(),
        // sinh + cosh cancels catastrophically for t ≪ 0; the sum is exp(t).
        KernelId::Trigh => t.exp(),
        KernelId::Sqrt => 2.0 - (1.0 - t).sqrt(),
    })
}

/// A kernel together with its coefficient convention and a coefficient cache.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec {
    id: KernelId,
    convention: CoefficientConvention,
    cache: Arc<[Option<f64>]>,
    overridden: Option<(usize, f64)>,
}

impl KernelSpec {
    pub fn new(id: KernelId) -> Self {
        Self::with_convention(id, CoefficientConvention::SeriesExact)
    }

    pub fn with_convention(id: KernelId, convention: CoefficientConvention) -> Self {
        Self::with_cache_size(id, convention, DEFAULT_MAX_CACHED_DEGREE)
    }

    pub fn with_cache_size(
        id: KernelId,
        convention: CoefficientConvention,
        max_degree: usize,
    ) -> Self {
        let cache = CoefficientIter::new(id, convention)
            .take(max_degree + 1)
            .collect::<Vec<_>>()
            .into();
        Self {
            id,
            convention,
            cache,
            overridden: None,
        }
    }

    /// Replaces a single coefficient. Used to inject faults into the
    /// verification suites; an overridden spec no longer matches its kernel.
    pub fn with_coefficient_override(mut self, degree: usize, value: f64) -> Self {
        self.overridden = Some((degree, value));
        self
    }

    pub fn id(&self) -> KernelId {
        self.id
    }

    pub fn convention(&self) -> CoefficientConvention {
        self.convention
    }

    pub fn domain_radius(&self) -> f64 {
        self.id.domain_radius()
    }

    pub fn max_cached_degree(&self) -> usize {
        self.cache.len().saturating_sub(1)
    }

    pub fn value(&self, t: f64) -> Result<f64> {
        kernel_value(self.id, t)
    }

    /// Maclaurin coefficient `a_n`.
    pub fn coefficient(&self, n: usize) -> Result<f64> {
        if let Some((degree, value)) = self.overridden {
            if degree == n {
                return Ok(value);
            }
        }
        let raw = match self.cache.get(n) {
            Some(&c) => c,
            None => CoefficientIter::new(self.id, self.convention)
                .nth(n)
                .flatten(),
        };
        raw.ok_or(Error::Convention {
            kernel: self.id,
            degree: n,
            convention: self.convention.name(),
        })
    }

    /// The first `count` coefficients.
    pub fn coefficients(&self, count: usize) -> Result<Vec<f64>> {
        let mut iter = CoefficientIter::new(self.id, self.convention);
        (0..count)
            .map(|n| {
                let next = iter.next().flatten();
                match (self.overridden, self.cache.get(n)) {
                    (Some((degree, value)), _) if degree == n => Some(value),
                    (_, Some(&c)) => c,
                    _ => next,
                }
                .ok_or(Error::Convention {
                    kernel: self.id,
                    degree: n,
                    convention: self.convention.name(),
                })
            })
            .collect()
    }

    /// Truncated series `Σ_{n < terms} a_n t^n`.
    pub fn series_value(&self, t: f64, terms: usize) -> Result<f64> {
        if terms == 0 {
            return Err(Error::invalid("terms", "at least one term is required"));
        }
        let radius = self.domain_radius();
        if !(t.abs() < radius) {
            return Err(Error::Domain {
                kernel: self.id,
                t,
                radius,
            });
        }
        let coeffs = self.coefficients(terms)?;
        // Horner from the highest degree; tail terms underflow harmlessly.
        Ok(coeffs.iter().rev().fold(0.0, |acc, &a| acc * t + a))
    }
}

/// Free-function form of [`KernelSpec::coefficient`].
pub fn maclaurin_coeff(spec: &KernelSpec, n: usize) -> Result<f64> {
    spec.coefficient(n)
}

/// Free-function form of [`KernelSpec::series_value`].
pub fn series_value(spec: &KernelSpec, t: f64, terms: usize) -> Result<f64> {
    spec.series_value(t, terms)
}

/// Generates coefficients in degree order using overflow-free recurrences.
/// `None` marks a coefficient with no defined value under the convention.
struct CoefficientIter {
    id: KernelId,
    convention: CoefficientConvention,
    n: usize,
    /// `1 / n!` for exp/trigh, `1 / (2^n n!)` for tabulated sqrt,
    /// the running series coefficient for exact sqrt.
    running: f64,
}

impl CoefficientIter {
    fn new(id: KernelId, convention: CoefficientConvention) -> Self {
        Self {
            id,
            convention,
            n: 0,
            running: 1.0,
        }
    }
}

impl Iterator for CoefficientIter {
    type Item = Option<f64>;

    fn next(&mut self) -> Option<Self::Item> {
        let n = self.n;
        let nf = n as f64;
        let value = match (self.id, self.convention) {
            (KernelId::Exp | KernelId::Trigh, _) => {
                if n > 0 {
                    self.running /= nf;
                }
                Some(self.running)
            }
            (KernelId::Inv, _) => Some(1.0),
            (KernelId::Log, CoefficientConvention::SeriesExact) => Some(1.0 / nf.max(1.0)),
            (KernelId::Log, CoefficientConvention::Tabulated) => {
                if n == 0 {
                    None
                } else {
                    Some(1.0 / nf.min(1.0))
                }
            }
            (KernelId::Sqrt, CoefficientConvention::SeriesExact) => {
                // a_0 = 1, a_1 = 1/2, a_{k+1} = a_k (2k − 1) / (2(k + 1)).
                match n {
                    0 => Some(1.0),
                    1 => {
                        self.running = 0.5;
                        Some(0.5)
                    }
                    _ => {
                        let k = nf - 1.0;
                        self.running *= (2.0 * k - 1.0) / (2.0 * (k + 1.0));
                        Some(self.running)
                    }
                }
            }
            (KernelId::Sqrt, CoefficientConvention::Tabulated) => {
                if n > 0 {
                    self.running /= 2.0 * nf;
                }
                Some((2.0 * nf - 3.0).max(1.0) * self.running)
            }
        };
        self.n += 1;
        Some(value)
    }
}
