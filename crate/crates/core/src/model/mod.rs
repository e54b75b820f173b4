//! Transformer encoder over track sequences with a weight-tied GELU
//! prediction head.

mod checkpoint;
mod encoder;

pub use checkpoint::{
    load_checkpoint, load_optimizer_state, save_checkpoint, save_optimizer_state, Checkpoint,
    CheckpointHeader, TensorEntry, CHECKPOINT_MAGIC,
};
pub use encoder::{ForwardPass, PackedRows};

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::FIRST_TRACK;
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Embedding and hidden width.
    pub d: usize,
    pub blocks: usize,
    pub heads: usize,
    pub max_len: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    /// Restrict attention to earlier positions (unidirectional model).
    pub causal: bool,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 128,
            blocks: 2,
            heads: 8,
            max_len: 20,
            ffn_dim: 128,
            dropout: 0.1,
            causal: true,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "model width {} must be a positive multiple of heads {}",
                self.d, self.heads
            )));
        }
        if self.max_len == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("max_len and ffn_dim must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if self.ln_eps <= 0.0 {
            return Err(Error::Config("layer-norm epsilon must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }
}

/// Weights of one post-LN encoder block. Projections are applied as `x W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln1_gamma: Array1<f64>,
    pub ln1_beta: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub ln2_gamma: Array1<f64>,
    pub ln2_beta: Array1<f64>,
}

impl BlockParams {
    fn zeros(d: usize, ffn: usize) -> Self {
        Self {
            wq: Array2::zeros((d, d)),
            bq: Array1::zeros(d),
            wk: Array2::zeros((d, d)),
            bk: Array1::zeros(d),
            wv: Array2::zeros((d, d)),
            bv: Array1::zeros(d),
            wo: Array2::zeros((d, d)),
            bo: Array1::zeros(d),
            ln1_gamma: Array1::zeros(d),
            ln1_beta: Array1::zeros(d),
            w1: Array2::zeros((d, ffn)),
            b1: Array1::zeros(ffn),
            w2: Array2::zeros((ffn, d)),
            b2: Array1::zeros(d),
            ln2_gamma: Array1::zeros(d),
            ln2_beta: Array1::zeros(d),
        }
    }
}

/// All trainable tensors.
///
/// `item_emb` has `num_tracks + 2` rows; row 0 is PAD (kept at zero) and
/// row 1 is MSK. The same table scores candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub num_tracks: usize,
    pub item_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub blocks: Vec<BlockParams>,
    pub head_w: Array2<f64>,
    pub head_b: Array1<f64>,
}

/// Borrowed view of one named tensor.
pub struct TensorRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

macro_rules! block_tensors {
    ($mac:ident, $b:expr, $i:expr, $out:expr) => {{
        let b = $b;
        let i = $i;
        $mac!($out, format!("block{i}.wq"), b.wq);
        $mac!($out, format!("block{i}.bq"), b.bq);
        $mac!($out, format!("block{i}.wk"), b.wk);
        $mac!($out, format!("block{i}.bk"), b.bk);
        $mac!($out, format!("block{i}.wv"), b.wv);
        $mac!($out, format!("block{i}.bv"), b.bv);
        $mac!($out, format!("block{i}.wo"), b.wo);
        $mac!($out, format!("block{i}.bo"), b.bo);
        $mac!($out, format!("block{i}.ln1_gamma"), b.ln1_gamma);
        $mac!($out, format!("block{i}.ln1_beta"), b.ln1_beta);
        $mac!($out, format!("block{i}.w1"), b.w1);
        $mac!($out, format!("block{i}.b1"), b.b1);
        $mac!($out, format!("block{i}.w2"), b.w2);
        $mac!($out, format!("block{i}.b2"), b.b2);
        $mac!($out, format!("block{i}.ln2_gamma"), b.ln2_gamma);
        $mac!($out, format!("block{i}.ln2_beta"), b.ln2_beta);
    }};
}

macro_rules! push_ref {
    ($out:expr, $name:expr, $t:expr) => {
        $out.push(TensorRef {
            name: $name.into(),
            shape: $t.shape().to_vec(),
            data: $t.as_slice().expect("standard layout"),
        })
    };
}

macro_rules! push_mut {
    ($out:expr, $name:expr, $t:expr) => {
        $out.push(($name.into(), $t.as_slice_mut().expect("standard layout")))
    };
}

impl ModelParams {
    /// Zero-filled parameters with the right shapes (also used for gradients).
    pub fn zeros(config: &ModelConfig, num_tracks: usize) -> Self {
        let d = config.d;
        Self {
            config: config.clone(),
            num_tracks,
            item_emb: Array2::zeros((num_tracks + FIRST_TRACK as usize, d)),
            pos_emb: Array2::zeros((config.max_len, d)),
            blocks: (0..config.blocks)
                .map(|_| BlockParams::zeros(d, config.ffn_dim))
                .collect(),
            head_w: Array2::zeros((d, d)),
            head_b: Array1::zeros(d),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config, self.num_tracks)
    }

    pub fn table_size(&self) -> usize {
        self.item_emb.nrows()
    }

    /// Every tensor in a fixed canonical order.
    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        push_ref!(out, "item_emb", self.item_emb);
        push_ref!(out, "pos_emb", self.pos_emb);
        for (i, b) in self.blocks.iter().enumerate() {
            block_tensors!(push_ref, b, i, out);
        }
        push_ref!(out, "head_w", self.head_w);
        push_ref!(out, "head_b", self.head_b);
        out
    }

    /// Mutable counterpart of [`ModelParams::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        push_mut!(out, "item_emb", self.item_emb);
        push_mut!(out, "pos_emb", self.pos_emb);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            block_tensors!(push_mut, b, i, out);
        }
        push_mut!(out, "head_w", self.head_w);
        push_mut!(out, "head_b", self.head_b);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Adds `other` scaled by `scale` into `self`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        let src = other.tensors();
        for ((_, dst), src) in self.tensors_mut().into_iter().zip(src) {
            for (d, s) in dst.iter_mut().zip(src.data) {
                *d += scale * s;
            }
        }
    }

    pub fn zero_pad_row(&mut self) {
        self.item_emb.row_mut(crate::corpus::PAD as usize).fill(0.0);
    }
}

/// One draw from N(0, 1) restricted to `[-bound, bound]` by rejection.
pub fn truncated_normal<R: rand::Rng + ?Sized>(rng: &mut R, bound: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= bound {
            return z;
        }
    }
}

/// Bound of the truncated-normal initializer.
pub const INIT_BOUND: f64 = 0.02;

/// Fresh parameters: weights and embeddings from the truncated normal,
/// biases and layer-norm offsets zero, layer-norm scales one, PAD row zero.
pub fn init_params(config: &ModelConfig, num_tracks: usize, seed_value: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut params = ModelParams::zeros(config, num_tracks);
    let mut rng = seed::rng(seed_value, "init");
    let mut fill = |t: &mut [f64]| {
        for v in t.iter_mut() {
            *v = truncated_normal(&mut rng, INIT_BOUND);
        }
    };
    fill(params.item_emb.as_slice_mut().unwrap());
    fill(params.pos_emb.as_slice_mut().unwrap());
    for b in &mut params.blocks {
        for w in [&mut b.wq, &mut b.wk, &mut b.wv, &mut b.wo, &mut b.w1, &mut b.w2] {
            fill(w.as_slice_mut().unwrap());
        }
        b.ln1_gamma.fill(1.0);
        b.ln2_gamma.fill(1.0);
    }
    fill(params.head_w.as_slice_mut().unwrap());
    params.zero_pad_row();
    Ok(params)
}

/// Exact GELU, `x * Phi(x)`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

fn check_tokens(params: &ModelParams, tokens: ArrayView2<u32>) -> Result<()> {
    if tokens.ncols() > params.config.max_len {
        return Err(Error::Config(format!(
            "sequence length {} exceeds max_len {}",
            tokens.ncols(),
            params.config.max_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= params.table_size()) {
        return Err(Error::Config(format!(
            "token index {bad} out of range for table of {} rows",
            params.table_size()
        )));
    }
    Ok(())
}

/// Token plus positional embedding for every position, PAD included
/// (inference mode, no dropout).
pub fn embed(params: &ModelParams, tokens: ArrayView2<u32>) -> Result<Array3<f64>> {
    check_tokens(params, tokens)?;
    let (b, l) = tokens.dim();
    let d = params.config.d;
    let mut out = Array3::zeros((b, l, d));
    for ((bi, i), &t) in tokens.indexed_iter() {
        let mut cell = out.slice_mut(s![bi, i, ..]);
        cell.assign(&params.item_emb.row(t as usize));
        cell += &params.pos_emb.row(i);
    }
    Ok(out)
}

/// Runs the encoder blocks over right-padded input `x` (B x L x d).
///
/// `pad_mask` is true on real positions and must be a prefix of each row.
/// Outputs at PAD positions are zero.
pub fn encoder_forward(
    params: &ModelParams,
    x: &Array3<f64>,
    pad_mask: ArrayView2<bool>,
) -> Result<Array3<f64>> {
    let lengths = prefix_lengths(pad_mask)?;
    let packed = PackedRows::from_lengths(&lengths);
    let mut flat = Array2::zeros((packed.total(), params.config.d));
    for (b, &(off, n)) in packed.spans().iter().enumerate() {
        flat.slice_mut(s![off..off + n, ..])
            .assign(&x.slice(s![b, ..n, ..]));
    }
    let (hidden, _) = encoder::encode(params, &packed, flat, None)?;
    Ok(packed.unpack(&hidden, x.dim().1))
}

fn prefix_lengths(pad_mask: ArrayView2<bool>) -> Result<Vec<usize>> {
    pad_mask
        .axis_iter(Axis(0))
        .map(|row| {
            let n = row.iter().take_while(|&&m| m).count();
            if row.iter().skip(n).any(|&m| m) {
                Err(Error::Config("pad mask must be right-padded".into()))
            } else {
                Ok(n)
            }
        })
        .collect()
}

/// Prediction layer: `GELU(h W + b)` at every position.
pub fn predict_embeddings(params: &ModelParams, h: &Array3<f64>) -> Array3<f64> {
    let (b, l, d) = h.dim();
    let flat = h.to_shape((b * l, d)).expect("contiguous").to_owned();
    let z = flat.dot(&params.head_w) + &params.head_b;
    z.mapv(gelu)
        .into_shape_with_order((b, l, d))
        .expect("shape preserved")
}

/// Logits of candidate tracks: inner products with the embedding table.
pub fn score_candidates(params: &ModelParams, predicted: ArrayView1<f64>, candidates: &[u32]) -> Vec<f64> {
    candidates
        .iter()
        .map(|&c| predicted.dot(&params.item_emb.row(c as usize)))
        .collect()
}

#[cfg(test)]
mod tests;
