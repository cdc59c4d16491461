//! Random Maclaurin feature attention (RMFA).
//!
//! Dot-product kernels `K(q·k)` with non-negative Maclaurin coefficients are
//! approximated by inner products of random Maclaurin features, which lets
//! kernelized attention run in `O(n·D·d)` instead of `O(n²·d)`. The crate
//! also provides the ppSBN normalization that keeps attention inputs inside
//! the unit ball, a forward-only encoder block built from them, and the
//! benchmark and verification routines used by the `macformer` CLI.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod bench;
pub mod error;
pub mod kernels;
pub mod model;
pub mod ppsbn;
pub mod rmf;
pub mod rng;
pub mod verify;

pub use attention::{
    convert_mask, exact_kernel_attention, rmfa, rmfa_reference, softmax_attention, AttentionInputs,
    BinaryMask, MaskKind, RmfaOptions, RmfaOutput,
};
pub use bench::{
    nmse, run_approx_grid, tail_bound_check, time_op, GridConfig, GridResult, TailConfig,
    TailReport,
};
pub use error::{Error, Result};
pub use kernels::{
    kernel_value, maclaurin_coeff, series_value, CoefficientConvention, KernelId, KernelSpec,
};
pub use model::{
    encoder_block_forward, init_params, multi_head_rmfa_forward, Macformer, MacformerBlockParams,
    MacformerConfig,
};
pub use ppsbn::{derived_scale_r, post_sbn, ppsbn_attention, pre_sbn, PpsbnParams, SbnStats};
pub use rmf::{
    apply_feature_map, estimate_kernel, sample_degree, sample_feature_map, FeatureMapDraw,
    FeatureMapSpec,
};
