//! Factorized self-attention transformer over a spatio-temporal token grid.
//!
//! Each block attends over the spatial tokens within every slice, then over
//! the temporal tokens at every spatial index, then applies a shared MLP.
//! Readout is a global average over all tokens.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{dense_block, multi_head_attention, Activation, AttentionParams};
use crate::tensor::Scalar;

use super::encoder::NORM_EPS;
use super::network::ParamSource;
use super::{AggregatorSpec, ModelSpec};

fn attention_params<T: Scalar, P: ParamSource<T>>(
    g: &mut Graph<T>,
    src: &mut P,
    prefix: &str,
) -> Result<AttentionParams> {
    Ok(AttentionParams {
        w_qkv: src.var(g, &format!("{prefix}.w_qkv"))?,
        b_qkv: src.var(g, &format!("{prefix}.b_qkv"))?,
        w_out: src.var(g, &format!("{prefix}.w_out"))?,
        b_out: src.var(g, &format!("{prefix}.b_out"))?,
    })
}

fn layer_norm_named<T: Scalar, P: ParamSource<T>>(
    g: &mut Graph<T>,
    src: &mut P,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let gamma = src.var(g, &format!("{prefix}.gamma"))?;
    let beta = src.var(g, &format!("{prefix}.beta"))?;
    g.layer_norm(x, gamma, beta, NORM_EPS)
}

/// Attention applied independently to each of `groups` contiguous row blocks
/// of `len` rows.
fn grouped_attention<T: Scalar>(
    g: &mut Graph<T>,
    tokens: Var,
    p: AttentionParams,
    heads: usize,
    groups: usize,
    len: usize,
) -> Result<Var> {
    let mut outs = Vec::with_capacity(groups);
    for i in 0..groups {
        let part = g.slice(tokens, 0, i * len, len)?;
        let (out, _) = multi_head_attention(g, part, p, heads)?;
        outs.push(out);
    }
    if groups == 1 {
        Ok(outs[0])
    } else {
        g.concat(&outs, 0)
    }
}

/// Forward pass over one volume laid out as (S, C, H, W); returns the scalar
/// logit.
pub fn vivit_fsa_forward<T: Scalar, P: ParamSource<T>>(
    g: &mut Graph<T>,
    src: &mut P,
    spec: &ModelSpec,
    input: Var,
) -> Result<Var> {
    let (patch, dim, blocks, heads, _mlp) = match &spec.aggregator {
        AggregatorSpec::VivitFsa {
            patch,
            dim,
            blocks,
            heads,
            mlp_dim,
        } => (*patch, *dim, *blocks, *heads, *mlp_dim),
        _ => return Err(Error::Config("spec is not a vivit aggregator".into())),
    };
    let shape = g.value(input).shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::shape("vivit_fsa_forward", "(S, C, H, W)", format!("{shape:?}")));
    }
    let (s, _c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::arg(
            "vivit_fsa_forward",
            format!("patch {patch} does not divide {h}x{w}"),
        ));
    }
    let p_tokens = (h / patch) * (w / patch);
    let t_all = s * p_tokens;

    let patches = g.img2patches(input, patch)?; // (S*P, C*p*p)
    let embed_w = src.var(g, "agg.patch_embed.weight")?;
    let embed_b = src.var(g, "agg.patch_embed.bias")?;
    let mut x = dense_block(g, patches, embed_w, embed_b, Activation::None)?; // (S*P, D)

    // factorized positional embeddings: spatial index + slice index
    let pos_s = src.var(g, "agg.pos_spatial")?;
    let pos_t = src.var(g, "agg.pos_temporal")?;
    let spatial_gather: Vec<usize> = (0..t_all).map(|i| i % p_tokens).collect();
    let temporal_gather: Vec<usize> = (0..t_all).map(|i| i / p_tokens).collect();
    let pos_s_full = g.permute_rows(pos_s, &spatial_gather)?;
    let pos_t_full = g.permute_rows(pos_t, &temporal_gather)?;
    x = g.add(x, pos_s_full)?;
    x = g.add(x, pos_t_full)?;

    // slice-major -> position-major permutation and its inverse
    let to_pos_major: Vec<usize> = (0..t_all)
        .map(|i| {
            let (p_ix, s_ix) = (i / s, i % s);
            s_ix * p_tokens + p_ix
        })
        .collect();
    let to_slice_major: Vec<usize> = (0..t_all)
        .map(|i| {
            let (s_ix, p_ix) = (i / p_tokens, i % p_tokens);
            p_ix * s + s_ix
        })
        .collect();

    for b in 0..blocks {
        let prefix = format!("agg.block{b}");
        // spatial attention within each slice
        let normed = layer_norm_named(g, src, &format!("{prefix}.norm_s"), x)?;
        let ap = attention_params(g, src, &format!("{prefix}.attn_s"))?;
        let sa = grouped_attention(g, normed, ap, heads, s, p_tokens)?;
        x = g.add(x, sa)?;
        // temporal attention at each spatial index
        let normed = layer_norm_named(g, src, &format!("{prefix}.norm_t"), x)?;
        let pos_major = g.permute_rows(normed, &to_pos_major)?;
        let ap = attention_params(g, src, &format!("{prefix}.attn_t"))?;
        let ta = grouped_attention(g, pos_major, ap, heads, p_tokens, s)?;
        let ta = g.permute_rows(ta, &to_slice_major)?;
        x = g.add(x, ta)?;
        // shared MLP
        let normed = layer_norm_named(g, src, &format!("{prefix}.norm_m"), x)?;
        let fc1_w = src.var(g, &format!("{prefix}.mlp.fc1.weight"))?;
        let fc1_b = src.var(g, &format!("{prefix}.mlp.fc1.bias"))?;
        let hid = dense_block(g, normed, fc1_w, fc1_b, Activation::Gelu)?;
        let fc2_w = src.var(g, &format!("{prefix}.mlp.fc2.weight"))?;
        let fc2_b = src.var(g, &format!("{prefix}.mlp.fc2.bias"))?;
        let mlp_out = dense_block(g, hid, fc2_w, fc2_b, Activation::None)?;
        x = g.add(x, mlp_out)?;
    }

    let x = layer_norm_named(g, src, "agg.final_norm", x)?;
    let sum = g.sum_axis(x, 0)?; // (D,)
    let mean = g.scale(sum, 1.0 / t_all as f64);
    let mean = g.reshape(mean, &[1, dim])?;
    let head_w = src.var(g, "head.weight")?;
    let head_b = src.var(g, "head.bias")?;
    let logit_row = dense_block(g, mean, head_w, head_b, Activation::None)?;
    g.reshape(logit_row, &[])
}
