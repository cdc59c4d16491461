//! Forward-only Macformer encoder.
//!
//! Each layer is a standard Transformer encoder block whose attention heads
//! run preSBN → RMFA → postSBN. Feature draws are sampled once at
//! initialization and treated as frozen parameters, unless a forward call
//! asks for fresh draws.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{exact_kernel_attention, AttentionInputs, MaskKind};
use crate::error::{Error, Result};
use crate::kernels::{KernelId, KernelSpec};
use crate::ppsbn::{
    post_sbn, ppsbn_attention, pre_sbn_with, DegeneratePolicy, PpsbnParams, PreSbnOptions,
};
use crate::rmf::{FeatureMapDraw, DEFAULT_P};
use crate::rng::{derive_seed, stream_rng};

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormPlacement {
    /// `LN(x + f(x))`, as in the original Transformer.
    #[default]
    Post,
    /// `x + f(LN(x))`.
    Pre,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MacformerConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub feature_dim: usize,
    pub kernel: KernelId,
    pub p: f64,
    pub sbn_epsilon: f64,
    pub seed: u64,
    pub norm: NormPlacement,
}

impl Default for MacformerConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            hidden_dim: 128,
            num_heads: 2,
            num_layers: 2,
            feature_dim: 128,
            kernel: KernelId::Exp,
            p: DEFAULT_P,
            sbn_epsilon: 1e-13,
            seed: 0,
            norm: NormPlacement::Post,
        }
    }
}

impl MacformerConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("num_layers", self.num_layers),
            ("feature_dim", self.feature_dim),
        ] {
            if value == 0 {
                return Err(Error::invalid(name, "must be at least 1"));
            }
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::invalid(
                "num_heads",
                format!(
                    "embed_dim {} is not divisible by {} heads",
                    self.embed_dim, self.num_heads
                ),
            ));
        }
        if !(self.p > 1.0) {
            return Err(Error::invalid("p", "must be > 1"));
        }
        if !(self.sbn_epsilon > 0.0) {
            return Err(Error::invalid("sbn_epsilon", "must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub ppsbn: PpsbnParams,
    pub draw: FeatureMapDraw,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
}

impl LayerNorm {
    fn identity(dim: usize) -> Self {
        Self {
            gain: Array1::ones(dim),
            bias: Array1::zeros(dim),
        }
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = x.to_owned();
        let width = x.ncols() as f64;
        for mut row in out.rows_mut() {
            let mean = row.sum() / width;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.iter_mut()
                .zip(self.gain.iter().zip(self.bias.iter()))
                .for_each(|(v, (&g, &b))| *v = (*v - mean) * inv * g + b);
        }
        out
    }
}

/// Parameters of one encoder block.
#[derive(Debug, Clone, PartialEq)]
pub struct MacformerBlockParams {
    pub heads: Vec<HeadParams>,
    pub w_o: Array2<f64>,
    pub w_1: Array2<f64>,
    pub b_1: Array1<f64>,
    pub w_2: Array2<f64>,
    pub b_2: Array1<f64>,
    pub norm_attention: LayerNorm,
    pub norm_ffn: LayerNorm,
    pub placement: NormPlacement,
}

/// Which attention each head evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadAttention {
    /// preSBN → RMFA → postSBN with the frozen draws.
    Rmfa,
    /// preSBN → RMFA → postSBN with draws regenerated from this seed.
    Resampled(u64),
    /// preSBN → exact kernelized attention → postSBN.
    Exact,
}

const TAG_QUERY: u64 = 1;
const TAG_KEY: u64 = 2;
const TAG_VALUE: u64 = 3;
const TAG_OUTPUT: u64 = 4;
const TAG_FFN_IN: u64 = 5;
const TAG_FFN_OUT: u64 = 6;
const TAG_DRAW: u64 = 7;

/// Xavier-uniform matrix from its own stream.
fn uniform_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let mut rng = stream_rng(seed, 0);
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

fn draw_seed(seed: u64, layer: usize, head: usize) -> u64 {
    derive_seed(seed, &[layer as u64, head as u64, TAG_DRAW])
}

fn sample_draw(config: &MacformerConfig, seed: u64) -> Result<FeatureMapDraw> {
    FeatureMapDraw::sample(
        KernelSpec::new(config.kernel),
        config.head_dim(),
        config.feature_dim,
        config.p,
        seed,
    )
}

/// Deterministic parameters for every layer.
pub fn init_params(config: &MacformerConfig) -> Result<Vec<MacformerBlockParams>> {
    config.validate()?;
    let (e, h, hd) = (config.embed_dim, config.hidden_dim, config.head_dim());
    let ppsbn = PpsbnParams {
        epsilon: config.sbn_epsilon,
        on_degenerate: DegeneratePolicy::Zero,
        ..PpsbnParams::default()
    };
    (0..config.num_layers)
        .map(|layer| {
            let seed_of =
                |head: usize, tag: u64| derive_seed(config.seed, &[layer as u64, head as u64, tag]);
            let heads = (0..config.num_heads)
                .map(|head| {
                    Ok(HeadParams {
                        w_q: uniform_matrix(e, hd, seed_of(head, TAG_QUERY)),
                        w_k: uniform_matrix(e, hd, seed_of(head, TAG_KEY)),
                        w_v: uniform_matrix(e, hd, seed_of(head, TAG_VALUE)),
                        ppsbn,
                        draw: sample_draw(config, draw_seed(config.seed, layer, head))?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(MacformerBlockParams {
                heads,
                w_o: uniform_matrix(e, e, seed_of(0, TAG_OUTPUT)),
                w_1: uniform_matrix(e, h, seed_of(0, TAG_FFN_IN)),
                b_1: Array1::zeros(h),
                w_2: uniform_matrix(h, e, seed_of(0, TAG_FFN_OUT)),
                b_2: Array1::zeros(e),
                norm_attention: LayerNorm::identity(e),
                norm_ffn: LayerNorm::identity(e),
                placement: config.norm,
            })
        })
        .collect()
}

fn check_input(params: &MacformerBlockParams, x: ArrayView2<'_, f64>) -> Result<()> {
    let width = params.w_o.nrows();
    if x.ncols() != width {
        return Err(Error::DimensionMismatch {
            what: "embedding width",
            expected: width,
            actual: x.ncols(),
        });
    }
    if x.nrows() == 0 {
        return Err(Error::invalid(
            "n",
            "sequence must contain at least one row",
        ));
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { what: "X" });
    }
    Ok(())
}

fn head_forward(
    head: &HeadParams,
    head_index: usize,
    layer: usize,
    x: ArrayView2<'_, f64>,
    mask: MaskKind<'_>,
    path: HeadAttention,
) -> Result<Array2<f64>> {
    let q = x.dot(&head.w_q);
    let k = x.dot(&head.w_k);
    let v = x.dot(&head.w_v);
    let inputs = AttentionInputs::new(q.view(), k.view(), v.view())?.with_mask(mask.reborrow())?;
    match path {
        HeadAttention::Rmfa => ppsbn_attention(&head.draw, &inputs, &head.ppsbn),
        HeadAttention::Resampled(seed) => {
            let spec = head.draw.spec();
            let draw = FeatureMapDraw::sample_with_max_degree(
                head.draw.kernel().clone(),
                spec.input_dim,
                spec.feature_dim,
                spec.p,
                draw_seed(seed, layer, head_index),
                spec.max_degree,
            )?;
            ppsbn_attention(&draw, &inputs, &head.ppsbn)
        }
        HeadAttention::Exact => {
            let pre = pre_sbn_with(
                q.view(),
                k.view(),
                PreSbnOptions {
                    epsilon: head.ppsbn.epsilon,
                    norm: head.ppsbn.norm,
                    on_degenerate: head.ppsbn.on_degenerate,
                },
            )?;
            let scaled = AttentionInputs::new(pre.q.view(), pre.k.view(), v.view())?
                .with_mask(mask.reborrow())?;
            let att = exact_kernel_attention(head.draw.kernel(), &scaled)?;
            post_sbn(att.view(), &head.ppsbn)
        }
    }
}

/// Concatenated per-head outputs, before the output projection.
pub fn multi_head_heads(
    params: &MacformerBlockParams,
    layer: usize,
    x: ArrayView2<'_, f64>,
    mask: MaskKind<'_>,
    path: HeadAttention,
) -> Result<Array2<f64>> {
    check_input(params, x)?;
    let heads = params
        .heads
        .iter()
        .enumerate()
        .map(|(i, head)| head_forward(head, i, layer, x, mask.reborrow(), path))
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = heads.iter().map(|h| h.view()).collect();
    concatenate(Axis(1), &views).map_err(|e| Error::invalid("heads", e.to_string()))
}

/// Multi-head ppSBN-wrapped RMFA followed by the output projection.
pub fn multi_head_rmfa_forward(
    params: &MacformerBlockParams,
    x: ArrayView2<'_, f64>,
    mask: MaskKind<'_>,
) -> Result<Array2<f64>> {
    multi_head_forward_with(params, 0, x, mask, HeadAttention::Rmfa)
}

pub fn multi_head_forward_with(
    params: &MacformerBlockParams,
    layer: usize,
    x: ArrayView2<'_, f64>,
    mask: MaskKind<'_>,
    path: HeadAttention,
) -> Result<Array2<f64>> {
    Ok(multi_head_heads(params, layer, x, mask, path)?.dot(&params.w_o))
}

fn feed_forward(params: &MacformerBlockParams, x: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut hidden = x.dot(&params.w_1) + &params.b_1;
    hidden.mapv_inplace(|v| v.max(0.0));
    hidden.dot(&params.w_2) + &params.b_2
}

pub fn encoder_block_forward(
    params: &MacformerBlockParams,
    x: ArrayView2<'_, f64>,
    mask: MaskKind<'_>,
) -> Result<Array2<f64>> {
    encoder_block_forward_with(params, 0, x, mask, HeadAttention::Rmfa)
}

pub fn encoder_block_forward_with(
    params: &MacformerBlockParams,
    layer: usize,
    x: ArrayView2<'_, f64>,
    mask: MaskKind<'_>,
    path: HeadAttention,
) -> Result<Array2<f64>> {
    match params.placement {
        NormPlacement::Post => {
            let attended = multi_head_forward_with(params, layer, x, mask, path)?;
            let h = params.norm_attention.forward((&x + &attended).view());
            let ffn = feed_forward(params, h.view());
            Ok(params.norm_ffn.forward((&h + &ffn).view()))
        }
        NormPlacement::Pre => {
            let normed = params.norm_attention.forward(x);
            let h = &x + &multi_head_forward_with(params, layer, normed.view(), mask, path)?;
            let normed = params.norm_ffn.forward(h.view());
            Ok(&h + &feed_forward(params, normed.view()))
        }
    }
}

/// A stack of encoder blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Macformer {
    pub config: MacformerConfig,
    pub layers: Vec<MacformerBlockParams>,
}

impl Macformer {
    pub fn new(config: MacformerConfig) -> Result<Self> {
        let layers = init_params(&config)?;
        Ok(Self { config, layers })
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>, mask: MaskKind<'_>) -> Result<Array2<f64>> {
        self.forward_with(x, mask, HeadAttention::Rmfa)
    }

    pub fn forward_with(
        &self,
        x: ArrayView2<'_, f64>,
        mask: MaskKind<'_>,
        path: HeadAttention,
    ) -> Result<Array2<f64>> {
        let mut h = x.to_owned();
        for (layer, params) in self.layers.iter().enumerate() {
            h = encoder_block_forward_with(params, layer, h.view(), mask.reborrow(), path)?;
        }
        Ok(h)
    }
}

/// Sinusoidal positional encodings (n × dim).
pub fn sinusoidal_positions(n: usize, dim: usize) -> Array2<f64> {
    let mut out = Array2::zeros((n, dim));
    for pos in 0..n {
        for i in 0..dim {
            let rate = 10000f64.powf(-((i / 2 * 2) as f64) / dim as f64);
            let angle = pos as f64 * rate;
            out[[pos, i]] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

/// Rows of `x` reordered by `perm` (`out[i] = x[perm[i]]`).
pub fn permute_rows(x: ArrayView2<'_, f64>, perm: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros(x.raw_dim());
    for (i, &p) in perm.iter().enumerate() {
        out.slice_mut(s![i, ..]).assign(&x.row(p));
    }
    out
}
