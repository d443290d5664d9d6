//! Forward and backward passes of the cross-attention residual stack.
//!
//! Each block reads the running prompt features as queries and the shape
//! tokens as keys/values:
//!
//! ```text
//! X ← X + Attn(LN(X)·W_q, B·W_k, B·W_v)·W_o
//! X ← X + GELU(LN(X)·W_1 + b_1)·W_2 + b_2
//! ```
//!
//! after the last block, `δT = LN(X)·W_out + b_out`.

use ndarray::{s, Array2, ArrayView2, Axis};

use super::params::{BlockParams, Shape2ClipParams};
use crate::backends::{PromptEmbedding, ShapeTokens};
use crate::error::{Error, Result};
use crate::nn::{gelu, gelu_grad, layer_norm, layer_norm_backward, softmax_rows, softmax_rows_backward, LayerNormCache};

#[derive(Debug, Clone)]
struct BlockCache {
    attn_norm: LayerNormCache,
    attn_in: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    attn_out: Array2<f64>,
    mlp_norm: LayerNormCache,
    mlp_in: Array2<f64>,
    pre_act: Array2<f64>,
    act: Array2<f64>,
}

/// Activations retained from [`forward_with_cache`] for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    shape_tokens: ShapeTokens,
    blocks: Vec<BlockCache>,
    final_norm: LayerNormCache,
    final_in: Array2<f64>,
}

fn check_inputs(params: &Shape2ClipParams, b: &ShapeTokens, t: &PromptEmbedding) -> Result<()> {
    let dims = &params.dims;
    if b.ncols() != dims.shape_dim || b.nrows() == 0 {
        return Err(Error::dims(
            "shape tokens",
            format!("Nx{}", dims.shape_dim),
            format!("{}x{}", b.nrows(), b.ncols()),
        ));
    }
    if t.ncols() != dims.text_dim || t.nrows() == 0 {
        return Err(Error::dims(
            "prompt embedding",
            format!("Nx{}", dims.text_dim),
            format!("{}x{}", t.nrows(), t.ncols()),
        ));
    }
    if params.blocks.len() != dims.blocks {
        return Err(Error::dims("block count", dims.blocks, params.blocks.len()));
    }
    Ok(())
}

fn block_forward(blk: &BlockParams, heads: usize, x: &Array2<f64>, b: &ShapeTokens) -> (Array2<f64>, BlockCache) {
    let (attn_in, attn_norm) = layer_norm(x.view(), blk.attn_norm_gamma.view(), blk.attn_norm_beta.view());
    let q = attn_in.dot(&blk.w_q);
    let k = b.dot(&blk.w_k);
    let v = b.dot(&blk.w_v);
    let head_dim = q.ncols() / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut attn_out = Array2::zeros((x.nrows(), q.ncols()));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * head_dim..(h + 1) * head_dim];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        softmax_rows(&mut scores);
        attn_out.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        probs.push(scores);
    }
    let x_mid = x + &attn_out.dot(&blk.w_o);

    let (mlp_in, mlp_norm) = layer_norm(x_mid.view(), blk.mlp_norm_gamma.view(), blk.mlp_norm_beta.view());
    let pre_act = mlp_in.dot(&blk.mlp_w1) + &blk.mlp_b1;
    let act = pre_act.mapv(gelu);
    let out = &x_mid + &(act.dot(&blk.mlp_w2) + &blk.mlp_b2);
    (
        out,
        BlockCache {
            attn_norm,
            attn_in,
            q,
            k,
            v,
            probs,
            attn_out,
            mlp_norm,
            mlp_in,
            pre_act,
            act,
        },
    )
}

/// Residual `δT` for shape tokens `b` and prompt embedding `t`.
pub fn forward(params: &Shape2ClipParams, b: &ShapeTokens, t: &PromptEmbedding) -> Result<PromptEmbedding> {
    forward_with_cache(params, b, t).map(|(delta, _)| delta)
}

pub fn forward_with_cache(
    params: &Shape2ClipParams,
    b: &ShapeTokens,
    t: &PromptEmbedding,
) -> Result<(PromptEmbedding, ForwardCache)> {
    check_inputs(params, b, t)?;
    let mut x = t.clone();
    let mut blocks = Vec::with_capacity(params.blocks.len());
    for blk in &params.blocks {
        let (next, cache) = block_forward(blk, params.dims.heads, &x, b);
        blocks.push(cache);
        x = next;
    }
    let (final_in, final_norm) = layer_norm(x.view(), params.final_norm_gamma.view(), params.final_norm_beta.view());
    let delta = final_in.dot(&params.w_out) + &params.b_out;
    Ok((
        delta,
        ForwardCache {
            shape_tokens: b.clone(),
            blocks,
            final_norm,
            final_in,
        },
    ))
}

fn outer(a: ArrayView2<f64>, g: ArrayView2<f64>) -> Array2<f64> {
    a.t().dot(&g)
}

/// Gradients of a scalar loss with respect to every parameter, given `∂L/∂δT`.
pub fn backward(params: &Shape2ClipParams, cache: &ForwardCache, grad_delta: &PromptEmbedding) -> Result<Shape2ClipParams> {
    let rows = cache.final_in.nrows();
    if grad_delta.dim() != (rows, params.dims.text_dim) {
        return Err(Error::dims(
            "residual gradient",
            format!("{rows}x{}", params.dims.text_dim),
            format!("{}x{}", grad_delta.nrows(), grad_delta.ncols()),
        ));
    }
    let mut grads = params.zeros_like();
    grads.w_out = outer(cache.final_in.view(), grad_delta.view());
    grads.b_out = grad_delta.sum_axis(Axis(0));
    let d_final_in = grad_delta.dot(&params.w_out.t());
    let (mut dx, dg, db) = layer_norm_backward(d_final_in.view(), params.final_norm_gamma.view(), &cache.final_norm);
    grads.final_norm_gamma = dg;
    grads.final_norm_beta = db;

    let heads = params.dims.heads;
    let b = &cache.shape_tokens;
    for (idx, (blk, c)) in params.blocks.iter().zip(&cache.blocks).enumerate().rev() {
        let g = &mut grads.blocks[idx];

        // MLP sublayer
        g.mlp_w2 = outer(c.act.view(), dx.view());
        g.mlp_b2 = dx.sum_axis(Axis(0));
        let d_act = dx.dot(&blk.mlp_w2.t());
        let d_pre = &d_act * &c.pre_act.mapv(gelu_grad);
        g.mlp_w1 = outer(c.mlp_in.view(), d_pre.view());
        g.mlp_b1 = d_pre.sum_axis(Axis(0));
        let d_mlp_in = d_pre.dot(&blk.mlp_w1.t());
        let (d_mid_ln, dg, db) = layer_norm_backward(d_mlp_in.view(), blk.mlp_norm_gamma.view(), &c.mlp_norm);
        g.mlp_norm_gamma = dg;
        g.mlp_norm_beta = db;
        let d_mid = &dx + &d_mid_ln;

        // attention sublayer
        g.w_o = outer(c.attn_out.view(), d_mid.view());
        let d_attn = d_mid.dot(&blk.w_o.t());
        let head_dim = c.q.ncols() / heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut dq = Array2::zeros(c.q.dim());
        let mut dk = Array2::zeros(c.k.dim());
        let mut dv = Array2::zeros(c.v.dim());
        for (h, p) in c.probs.iter().enumerate() {
            let cols = s![.., h * head_dim..(h + 1) * head_dim];
            let d_out = d_attn.slice(cols);
            let d_probs = d_out.dot(&c.v.slice(cols).t());
            dv.slice_mut(cols).assign(&p.t().dot(&d_out));
            let d_scores = softmax_rows_backward(d_probs.view(), p.view()) * scale;
            dq.slice_mut(cols).assign(&d_scores.dot(&c.k.slice(cols)));
            dk.slice_mut(cols).assign(&d_scores.t().dot(&c.q.slice(cols)));
        }
        g.w_q = outer(c.attn_in.view(), dq.view());
        g.w_k = outer(b.view(), dk.view());
        g.w_v = outer(b.view(), dv.view());
        let d_attn_in = dq.dot(&blk.w_q.t());
        let (d_in_ln, dg, db) = layer_norm_backward(d_attn_in.view(), blk.attn_norm_gamma.view(), &c.attn_norm);
        g.attn_norm_gamma = dg;
        g.attn_norm_beta = db;
        dx = d_mid + d_in_ln;
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use ndarray::Array1;

    use super::*;
    use crate::seeding::{derive_rng, normal_vec};
    use crate::shape2clip::{init_params, ModelDims};

    #[test]
    fn identical_keys_give_query_independent_attention() {
        let params = init_params(ModelDims::new(16, 8, 12, 24).with_heads(2), 1).unwrap();
        let mut rng = derive_rng(1, "row");
        let v = Array1::from(normal_vec(&mut rng, 8, 1.0));
        let mut b = Array2::zeros((65, 8));
        for mut row in b.rows_mut() {
            row.assign(&v);
        }
        let x = Array2::from_shape_vec((77, 16), normal_vec(&mut rng, 77 * 16, 1.0)).unwrap();
        let blk = &params.blocks[0];
        let (_, cache) = block_forward(blk, 2, &x, &b);
        let projected = cache.attn_out.dot(&blk.w_o);
        let expected = v.dot(&blk.w_v).dot(&blk.w_o);
        for row in projected.rows() {
            for (a, e) in row.iter().zip(expected.iter()) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }
}
