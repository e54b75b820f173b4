//! Packed forward and backward passes.
//!
//! Rows are packed into one `N x d` matrix holding only real positions, so
//! PAD positions never enter attention or the losses.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, Axis, Zip};
use rand::Rng as _;

use super::{gelu, gelu_grad, BlockParams, ModelParams};
use crate::error::{Error, Result};
use crate::seed::Rng;

/// Row offsets of a packed batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedRows {
    spans: Vec<(usize, usize)>,
    total: usize,
}

impl PackedRows {
    pub fn from_lengths(lengths: &[usize]) -> Self {
        let mut spans = Vec::with_capacity(lengths.len());
        let mut off = 0;
        for &n in lengths {
            spans.push((off, n));
            off += n;
        }
        Self { spans, total: off }
    }

    /// `(offset, length)` of every row.
    pub fn spans(&self) -> &[(usize, usize)] {
        &self.spans
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn rows(&self) -> usize {
        self.spans.len()
    }

    pub fn flat_index(&self, row: usize, pos: usize) -> usize {
        let (off, n) = self.spans[row];
        debug_assert!(pos < n);
        off + pos
    }

    /// Scatters packed rows back into a zero-padded `B x max_len x d` array.
    pub fn unpack(&self, flat: &Array2<f64>, max_len: usize) -> Array3<f64> {
        let mut out = Array3::zeros((self.rows(), max_len, flat.ncols()));
        for (b, &(off, n)) in self.spans.iter().enumerate() {
            out.slice_mut(s![b, ..n, ..])
                .assign(&flat.slice(s![off..off + n, ..]));
        }
        out
    }
}

struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

fn layer_norm(
    x: &Array2<f64>,
    gamma: &Array1<f64>,
    beta: &Array1<f64>,
    eps: f64,
) -> (Array2<f64>, LayerNormCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, inv) in xhat.axis_iter_mut(Axis(0)).zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row -= mean;
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *inv = 1.0 / (var + eps).sqrt();
        row *= *inv;
    }
    let y = &xhat * gamma + beta;
    (y, LayerNormCache { xhat, inv_std })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LayerNormCache,
    gamma: &Array1<f64>,
    dgamma: &mut Array1<f64>,
    dbeta: &mut Array1<f64>,
) -> Array2<f64> {
    *dgamma += &(dy * &cache.xhat).sum_axis(Axis(0));
    *dbeta += &dy.sum_axis(Axis(0));
    let d = dy.ncols() as f64;
    let mut dx = dy * gamma;
    Zip::from(dx.rows_mut())
        .and(cache.xhat.rows())
        .and(&cache.inv_std)
        .for_each(|mut dxh, xh, &inv| {
            let mean_d = dxh.sum() / d;
            let mean_dx = dxh.dot(&xh) / d;
            Zip::from(&mut dxh).and(&xh).for_each(|g, &h| {
                *g = inv * (*g - mean_d - h * mean_dx);
            });
        });
    dx
}

fn dropout_mask(rng: &mut Rng, shape: (usize, usize), rate: f64) -> Array2<f64> {
    let keep = 1.0 / (1.0 - rate);
    Array2::from_shape_simple_fn(shape, || if rng.gen::<f64>() < rate { 0.0 } else { keep })
}

pub(crate) struct BlockCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Attention probabilities per row, `heads x n x n`.
    probs: Vec<Array3<f64>>,
    attn_masks: Option<Vec<Array3<f64>>>,
    ctx: Array2<f64>,
    ln1: LayerNormCache,
    h1: Array2<f64>,
    u: Array2<f64>,
    g: Array2<f64>,
    ffn_mask: Option<Array2<f64>>,
    ln2: LayerNormCache,
}

fn block_forward(
    params: &ModelParams,
    block: &BlockParams,
    packed: &PackedRows,
    x: Array2<f64>,
    mut dropout: Option<&mut Rng>,
) -> (Array2<f64>, BlockCache) {
    let cfg = &params.config;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let rate = cfg.dropout;

    let q = x.dot(&block.wq) + &block.bq;
    let k = x.dot(&block.wk) + &block.bk;
    let v = x.dot(&block.wv) + &block.bv;
    let mut ctx = Array2::zeros(x.raw_dim());
    let mut probs = Vec::with_capacity(packed.rows());
    let mut attn_masks = dropout.as_ref().filter(|_| rate > 0.0).map(|_| Vec::new());

    for &(off, n) in packed.spans() {
        let mut row_probs = Array3::zeros((cfg.heads, n, n));
        let mut row_mask = attn_masks.as_ref().map(|_| Array3::zeros((cfg.heads, n, n)));
        for h in 0..cfg.heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = q.slice(s![off..off + n, cols.clone()]);
            let kh = k.slice(s![off..off + n, cols.clone()]);
            let vh = v.slice(s![off..off + n, cols.clone()]);
            let mut scores = qh.dot(&kh.t());
            for (i, mut srow) in scores.axis_iter_mut(Axis(0)).enumerate() {
                let visible = if cfg.causal { i + 1 } else { n };
                let max = srow
                    .iter()
                    .take(visible)
                    .fold(f64::NEG_INFINITY, |m, &v| m.max(v * scale));
                let mut sum = 0.0;
                for (j, sv) in srow.iter_mut().enumerate() {
                    if j < visible {
                        *sv = (*sv * scale - max).exp();
                        sum += *sv;
                    } else {
                        *sv = 0.0;
                    }
                }
                srow /= sum;
            }
            let weights = match (row_mask.as_mut(), dropout.as_deref_mut()) {
                (Some(mask), Some(rng)) => {
                    let m = dropout_mask(rng, (n, n), rate);
                    let w = &scores * &m;
                    mask.slice_mut(s![h, .., ..]).assign(&m);
                    w
                }
                _ => scores.clone(),
            };
            ctx.slice_mut(s![off..off + n, cols]).assign(&weights.dot(&vh));
            row_probs.slice_mut(s![h, .., ..]).assign(&scores);
        }
        probs.push(row_probs);
        if let (Some(all), Some(m)) = (attn_masks.as_mut(), row_mask) {
            all.push(m);
        }
    }

    let attn_out = ctx.dot(&block.wo) + &block.bo;
    let (h1, ln1) = layer_norm(&(&x + &attn_out), &block.ln1_gamma, &block.ln1_beta, cfg.ln_eps);
    let u = h1.dot(&block.w1) + &block.b1;
    let g = u.mapv(gelu);
    let mut f = g.dot(&block.w2) + &block.b2;
    let ffn_mask = match dropout.as_deref_mut() {
        Some(rng) if rate > 0.0 => {
            let m = dropout_mask(rng, f.dim(), rate);
            f *= &m;
            Some(m)
        }
        _ => None,
    };
    let (out, ln2) = layer_norm(&(&h1 + &f), &block.ln2_gamma, &block.ln2_beta, cfg.ln_eps);
    let cache = BlockCache {
        x,
        q,
        k,
        v,
        probs,
        attn_masks,
        ctx,
        ln1,
        h1,
        u,
        g,
        ffn_mask,
        ln2,
    };
    (out, cache)
}

fn block_backward(
    params: &ModelParams,
    block: &BlockParams,
    grads: &mut BlockParams,
    packed: &PackedRows,
    cache: &BlockCache,
    dout: &Array2<f64>,
) -> Array2<f64> {
    let cfg = &params.config;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let dr2 = layer_norm_backward(
        dout,
        &cache.ln2,
        &block.ln2_gamma,
        &mut grads.ln2_gamma,
        &mut grads.ln2_beta,
    );
    let mut df = dr2.clone();
    if let Some(m) = &cache.ffn_mask {
        df *= m;
    }
    grads.w2 += &cache.g.t().dot(&df);
    grads.b2 += &df.sum_axis(Axis(0));
    let mut du = df.dot(&block.w2.t());
    Zip::from(&mut du).and(&cache.u).for_each(|g, &u| *g *= gelu_grad(u));
    grads.w1 += &cache.h1.t().dot(&du);
    grads.b1 += &du.sum_axis(Axis(0));
    let dh1 = dr2 + du.dot(&block.w1.t());

    let dr1 = layer_norm_backward(
        &dh1,
        &cache.ln1,
        &block.ln1_gamma,
        &mut grads.ln1_gamma,
        &mut grads.ln1_beta,
    );
    grads.wo += &cache.ctx.t().dot(&dr1);
    grads.bo += &dr1.sum_axis(Axis(0));
    let dctx = dr1.dot(&block.wo.t());

    let mut dq = Array2::zeros(cache.q.raw_dim());
    let mut dk = Array2::zeros(cache.k.raw_dim());
    let mut dv = Array2::zeros(cache.v.raw_dim());
    for (r, &(off, n)) in packed.spans().iter().enumerate() {
        for h in 0..cfg.heads {
            let cols = h * dh..(h + 1) * dh;
            let p = cache.probs[r].slice(s![h, .., ..]);
            let qh = cache.q.slice(s![off..off + n, cols.clone()]);
            let kh = cache.k.slice(s![off..off + n, cols.clone()]);
            let vh = cache.v.slice(s![off..off + n, cols.clone()]);
            let dctx_h = dctx.slice(s![off..off + n, cols.clone()]);
            let (weights, mask) = match &cache.attn_masks {
                Some(masks) => {
                    let m = masks[r].slice(s![h, .., ..]);
                    (&p * &m, Some(m))
                }
                None => (p.to_owned(), None),
            };
            dv.slice_mut(s![off..off + n, cols.clone()])
                .assign(&weights.t().dot(&dctx_h));
            let mut dp = dctx_h.dot(&vh.t());
            if let Some(m) = mask {
                dp *= &m;
            }
            // Softmax backward: dS = P * (dP - rowsum(dP * P)).
            let mut ds = &dp * &p;
            let row_dot = ds.sum_axis(Axis(1));
            Zip::from(ds.rows_mut())
                .and(p.rows())
                .and(&row_dot)
                .for_each(|mut dsr, pr, &rd| {
                    Zip::from(&mut dsr).and(&pr).for_each(|g, &pv| *g -= pv * rd);
                });
            ds *= scale;
            dq.slice_mut(s![off..off + n, cols.clone()]).assign(&ds.dot(&kh));
            dk.slice_mut(s![off..off + n, cols]).assign(&ds.t().dot(&qh));
        }
    }

    grads.wq += &cache.x.t().dot(&dq);
    grads.bq += &dq.sum_axis(Axis(0));
    grads.wk += &cache.x.t().dot(&dk);
    grads.bk += &dk.sum_axis(Axis(0));
    grads.wv += &cache.x.t().dot(&dv);
    grads.bv += &dv.sum_axis(Axis(0));

    dr1 + dq.dot(&block.wq.t()) + dk.dot(&block.wk.t()) + dv.dot(&block.wv.t())
}

struct EncoderCache {
    blocks: Vec<BlockCache>,
}

/// Runs all blocks on packed input.
pub(crate) fn encode(
    params: &ModelParams,
    packed: &PackedRows,
    x0: Array2<f64>,
    mut dropout: Option<&mut Rng>,
) -> Result<(Array2<f64>, Vec<BlockCache>)> {
    let mut x = x0;
    let mut caches = Vec::with_capacity(params.blocks.len());
    for (i, block) in params.blocks.iter().enumerate() {
        let (out, cache) = block_forward(params, block, packed, x, dropout.as_deref_mut());
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::EncoderNaN { block: i });
        }
        caches.push(cache);
        x = out;
    }
    Ok((x, caches))
}

/// Everything the backward pass needs from one forward pass.
pub struct ForwardPass {
    pub packed: PackedRows,
    tokens: Vec<u32>,
    emb_mask: Option<Array2<f64>>,
    cache: EncoderCache,
    /// Encoder output, `N x d`.
    pub hidden: Array2<f64>,
    head_pre: Array2<f64>,
    /// Predicted embeddings, `N x d`.
    pub predicted: Array2<f64>,
}

impl ForwardPass {
    /// Forward pass over unpadded token rows. Dropout is applied only when
    /// `dropout` is given.
    pub fn run(params: &ModelParams, rows: &[Vec<u32>], mut dropout: Option<&mut Rng>) -> Result<Self> {
        let cfg = &params.config;
        let lengths: Vec<usize> = rows.iter().map(Vec::len).collect();
        if let Some(&n) = lengths.iter().find(|&&n| n > cfg.max_len) {
            return Err(Error::Config(format!(
                "row of length {n} exceeds max_len {}",
                cfg.max_len
            )));
        }
        let packed = PackedRows::from_lengths(&lengths);
        let tokens: Vec<u32> = rows.iter().flatten().copied().collect();
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= params.table_size()) {
            return Err(Error::Config(format!("token index {bad} out of range")));
        }

        let mut x0 = Array2::zeros((packed.total(), cfg.d));
        for (r, &(off, n)) in packed.spans().iter().enumerate() {
            for i in 0..n {
                let t = rows[r][i] as usize;
                let mut out = x0.row_mut(off + i);
                out.assign(&params.item_emb.row(t));
                out += &params.pos_emb.row(i);
            }
        }
        let emb_mask = match dropout.as_deref_mut() {
            Some(rng) if cfg.dropout > 0.0 => {
                let m = dropout_mask(rng, x0.dim(), cfg.dropout);
                x0 *= &m;
                Some(m)
            }
            _ => None,
        };

        let (hidden, blocks) = encode(params, &packed, x0, dropout)?;
        let head_pre = hidden.dot(&params.head_w) + &params.head_b;
        let predicted = head_pre.mapv(gelu);
        Ok(Self {
            packed,
            tokens,
            emb_mask,
            cache: EncoderCache { blocks },
            hidden,
            head_pre,
            predicted,
        })
    }

    pub fn predicted_at(&self, row: usize, pos: usize) -> ArrayView1<'_, f64> {
        self.predicted.row(self.packed.flat_index(row, pos))
    }

    /// Predicted embedding at the last real position of `row`.
    pub fn predicted_last(&self, row: usize) -> ArrayView1<'_, f64> {
        let (off, n) = self.packed.spans()[row];
        self.predicted.row(off + n - 1)
    }

    /// Attention probabilities of `block` for `row`, `heads x n x n`.
    pub fn attention(&self, block: usize, row: usize) -> &Array3<f64> {
        &self.cache.blocks[block].probs[row]
    }

    /// Backpropagates `d_predicted` (`N x d`) and accumulates into `grads`.
    pub fn backward(&self, params: &ModelParams, d_predicted: &Array2<f64>, grads: &mut ModelParams) {
        let mut dz = d_predicted.clone();
        Zip::from(&mut dz)
            .and(&self.head_pre)
            .for_each(|g, &z| *g *= gelu_grad(z));
        grads.head_w += &self.hidden.t().dot(&dz);
        grads.head_b += &dz.sum_axis(Axis(0));
        let mut dx = dz.dot(&params.head_w.t());

        for (i, cache) in self.cache.blocks.iter().enumerate().rev() {
            dx = block_backward(
                params,
                &params.blocks[i],
                &mut grads.blocks[i],
                &self.packed,
                cache,
                &dx,
            );
        }
        if let Some(m) = &self.emb_mask {
            dx *= m;
        }
        for &(off, n) in self.packed.spans() {
            for i in 0..n {
                let g = dx.row(off + i);
                let t = self.tokens[off + i] as usize;
                let mut e = grads.item_emb.row_mut(t);
                e += &g;
                let mut p = grads.pos_emb.row_mut(i);
                p += &g;
            }
        }
    }
}
