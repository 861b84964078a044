//! Cross-slice aggregation heads for the 2.5D models.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{
    bilstm_forward, dense_block, drop_path, multi_head_attention, Activation, AttentionParams,
    LstmDirParams,
};
use crate::tensor::Scalar;

use super::encoder::NORM_EPS;
use super::network::ParamSource;
use super::{AggregatorSpec, ModelSpec};

/// Squeeze-and-excitation over a stack of per-slice features.
///
/// Squeeze is the mean over the feature axis (one value per slice); the
/// excitation bottleneck maps S -> ceil(S/r) -> S with relu/sigmoid, and the
/// resulting per-slice weights in (0,1) rescale the rows.
pub struct SeParams {
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
}

pub fn se_attention<T: Scalar>(
    g: &mut Graph<T>,
    features: Var,
    p: SeParams,
) -> Result<(Var, Var)> {
    let shape = g.value(features).shape().to_vec();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::shape("se_attention", "(S, F) with S >= 1", format!("{shape:?}")));
    }
    let (s, f) = (shape[0], shape[1]);
    let sum = g.sum_axis(features, 1)?; // (S,)
    let squeeze = g.scale(sum, 1.0 / f as f64);
    let squeeze_row = g.reshape(squeeze, &[1, s])?;
    let hid = dense_block(g, squeeze_row, p.fc1_w, p.fc1_b, Activation::Relu)?;
    let gate_row = dense_block(g, hid, p.fc2_w, p.fc2_b, Activation::Sigmoid)?;
    let weights = g.reshape(gate_row, &[s])?;
    let reweighted = g.scale_rows(features, weights)?;
    Ok((weights, reweighted))
}

/// BiLSTM over slice embeddings, SE attention on the hidden stack, mean
/// pooling, and a dense head. Returns (logit, SE weights over slices).
pub fn bilstm_aggregate<T: Scalar, P: ParamSource<T>>(
    g: &mut Graph<T>,
    src: &mut P,
    spec: &ModelSpec,
    embeddings: Var,
) -> Result<(Var, Var)> {
    let (hidden, _) = match &spec.aggregator {
        AggregatorSpec::Bilstm { hidden, se_reduction } => (*hidden, *se_reduction),
        _ => return Err(Error::Config("spec is not a bilstm aggregator".into())),
    };
    let s = g.value(embeddings).shape()[0];
    let fwd = LstmDirParams {
        w_input: src.var(g, "agg.lstm.fwd.w_input")?,
        w_hidden: src.var(g, "agg.lstm.fwd.w_hidden")?,
        bias: src.var(g, "agg.lstm.fwd.bias")?,
    };
    let bwd = LstmDirParams {
        w_input: src.var(g, "agg.lstm.bwd.w_input")?,
        w_hidden: src.var(g, "agg.lstm.bwd.w_hidden")?,
        bias: src.var(g, "agg.lstm.bwd.bias")?,
    };
    let stack = bilstm_forward(g, embeddings, fwd, bwd, hidden)?; // (S, 2H)
    let se = SeParams {
        fc1_w: src.var(g, "agg.se.fc1.weight")?,
        fc1_b: src.var(g, "agg.se.fc1.bias")?,
        fc2_w: src.var(g, "agg.se.fc2.weight")?,
        fc2_b: src.var(g, "agg.se.fc2.bias")?,
    };
    let (weights, reweighted) = se_attention(g, stack, se)?;
    let pooled_sum = g.sum_axis(reweighted, 0)?; // (2H,)
    let pooled = g.scale(pooled_sum, 1.0 / s as f64);
    let pooled = g.reshape(pooled, &[1, 2 * hidden])?;
    let head_w = src.var(g, "head.weight")?;
    let head_b = src.var(g, "head.bias")?;
    let logit_row = dense_block(g, pooled, head_w, head_b, Activation::None)?;
    let logit = g.reshape(logit_row, &[])?;
    Ok((logit, weights))
}

/// Pre-norm transformer over slice embeddings with a learned classification
/// token. Returns (logit, final-block per-head attention rows of the
/// classification token over all S+1 tokens).
pub fn transformer_aggregate<T: Scalar, P: ParamSource<T>, R: Rng>(
    g: &mut Graph<T>,
    src: &mut P,
    spec: &ModelSpec,
    embeddings: Var,
    training: bool,
    rng: &mut R,
) -> Result<(Var, Vec<Var>)> {
    let (blocks, heads, _mlp, max_rate, posemb) = match &spec.aggregator {
        AggregatorSpec::Transformer {
            blocks,
            heads,
            mlp_dim,
            drop_path_rate,
            positional_embedding,
        } => (*blocks, *heads, *mlp_dim, *drop_path_rate, *positional_embedding),
        _ => return Err(Error::Config("spec is not a transformer aggregator".into())),
    };
    let d = spec.embed_dim();
    let cls = src.var(g, "agg.cls_token")?;
    let mut x = g.concat(&[cls, embeddings], 0)?; // (S+1, D)
    if posemb {
        let pos = src.var(g, "agg.pos_embed")?;
        x = g.add(x, pos)?;
    }
    let mut cls_rows = Vec::new();
    for b in 0..blocks {
        // drop-path rate ramps linearly from 0 to the configured maximum
        let rate = if blocks > 1 {
            max_rate * b as f64 / (blocks - 1) as f64
        } else {
            0.0
        };
        let p = format!("agg.block{b}");
        let g1 = src.var(g, &format!("{p}.norm1.gamma"))?;
        let b1 = src.var(g, &format!("{p}.norm1.beta"))?;
        let normed = g.layer_norm(x, g1, b1, NORM_EPS)?;
        let attn_params = AttentionParams {
            w_qkv: src.var(g, &format!("{p}.attn.w_qkv"))?,
            b_qkv: src.var(g, &format!("{p}.attn.b_qkv"))?,
            w_out: src.var(g, &format!("{p}.attn.w_out"))?,
            b_out: src.var(g, &format!("{p}.attn.b_out"))?,
        };
        let (attn_out, mats) = multi_head_attention(g, normed, attn_params, heads)?;
        if b == blocks - 1 {
            for m in &mats {
                cls_rows.push(g.slice(*m, 0, 0, 1)?);
            }
        }
        let attn_out = drop_path(g, attn_out, rate, training, rng)?;
        x = g.add(x, attn_out)?;
        let g2 = src.var(g, &format!("{p}.norm2.gamma"))?;
        let b2 = src.var(g, &format!("{p}.norm2.beta"))?;
        let normed2 = g.layer_norm(x, g2, b2, NORM_EPS)?;
        let fc1_w = src.var(g, &format!("{p}.mlp.fc1.weight"))?;
        let fc1_b = src.var(g, &format!("{p}.mlp.fc1.bias"))?;
        let hid = dense_block(g, normed2, fc1_w, fc1_b, Activation::Gelu)?;
        let fc2_w = src.var(g, &format!("{p}.mlp.fc2.weight"))?;
        let fc2_b = src.var(g, &format!("{p}.mlp.fc2.bias"))?;
        let mlp_out = dense_block(g, hid, fc2_w, fc2_b, Activation::None)?;
        let mlp_out = drop_path(g, mlp_out, rate, training, rng)?;
        x = g.add(x, mlp_out)?;
    }
    let gf = src.var(g, "agg.final_norm.gamma")?;
    let bf = src.var(g, "agg.final_norm.beta")?;
    let x = g.layer_norm(x, gf, bf, NORM_EPS)?;
    let cls_out = g.slice(x, 0, 0, 1)?; // (1, D)
    let head_w = src.var(g, "head.weight")?;
    let head_b = src.var(g, "head.bias")?;
    let logit_row = dense_block(g, cls_out, head_w, head_b, Activation::None)?;
    let logit = g.reshape(logit_row, &[])?;
    let _ = d;
    Ok((logit, cls_rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    fn se_params(g: &mut Graph<f64>, s: usize, hid: usize, seed: u64) -> SeParams {
        use rand::Rng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let w1: Vec<f64> = (0..s * hid).map(|_| rng.gen_range(-0.7..0.7)).collect();
        let w2: Vec<f64> = (0..hid * s).map(|_| rng.gen_range(-0.7..0.7)).collect();
        SeParams {
            fc1_w: g.leaf(Tensor::from_vec(&[s, hid], w1).unwrap()),
            fc1_b: g.leaf(Tensor::zeros(&[hid])),
            fc2_w: g.leaf(Tensor::from_vec(&[hid, s], w2).unwrap()),
            fc2_b: g.leaf(Tensor::zeros(&[s])),
        }
    }

    #[test]
    fn se_weights_in_open_unit_interval() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..8 * 6).map(|i| (i as f64 * 0.77).sin() * 3.0).collect();
        let feats = g.leaf(Tensor::from_vec(&[8, 6], data).unwrap());
        let p = se_params(&mut g, 8, 2, 1);
        let (w, _) = se_attention(&mut g, feats, p).unwrap();
        for &v in g.value(w).data() {
            assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn se_identical_rows_get_identical_weights_under_symmetric_excitation() {
        // the excitation bottleneck is position-sensitive by design; the
        // symmetry claim holds when its weights treat all slices alike
        let mut g = Graph::<f64>::new();
        let row = [0.4, -1.0, 2.0, 0.1];
        let data: Vec<f64> = (0..5).flat_map(|_| row).collect();
        let feats = g.leaf(Tensor::from_vec(&[5, 4], data).unwrap());
        let p = SeParams {
            fc1_w: g.leaf(Tensor::filled(&[5, 2], 0.3f64)),
            fc1_b: g.leaf(Tensor::filled(&[2], 0.1f64)),
            fc2_w: g.leaf(Tensor::filled(&[2, 5], -0.2f64)),
            fc2_b: g.leaf(Tensor::filled(&[5], 0.05f64)),
        };
        let (w, rw) = se_attention(&mut g, feats, p).unwrap();
        let wd = g.value(w).data().to_vec();
        for &v in &wd {
            assert!((v - wd[0]).abs() < 1e-12);
        }
        // reweighted row i = w_i * features row i
        for i in 0..5 {
            for j in 0..4 {
                let got = g.value(rw).at2(i, j);
                assert!((got - wd[i] * row[j]).abs() < 1e-12);
            }
        }
    }
}
