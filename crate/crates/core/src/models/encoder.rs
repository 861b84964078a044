//! Shared 2D slice encoder: bottleneck-residual CNN with stack normalization
//! and global average pooling.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

use super::network::ParamSource;
use super::{EncoderSpec, BOTTLENECK_EXPANSION};

pub const NORM_EPS: f64 = 1e-5;

/// Replicate a (S, H, W) grayscale stack to (S, C, H, W).
pub fn replicate_channels<T: Scalar>(volume: &Tensor<T>, channels: usize) -> Result<Tensor<T>> {
    let s = volume.shape();
    if s.len() != 3 {
        return Err(Error::shape("replicate_channels", "(S, H, W)", format!("{s:?}")));
    }
    let (n, h, w) = (s[0], s[1], s[2]);
    let plane = h * w;
    let mut data = Vec::with_capacity(n * channels * plane);
    for sl in 0..n {
        for _ in 0..channels {
            data.extend_from_slice(&volume.data()[sl * plane..(sl + 1) * plane]);
        }
    }
    Tensor::from_vec(&[n, channels, h, w], data)
}

fn norm_relu<T: Scalar, P: ParamSource<T>>(
    g: &mut Graph<T>,
    src: &mut P,
    prefix: &str,
    x: Var,
    relu: bool,
) -> Result<Var> {
    let gamma = src.var(g, &format!("{prefix}.gamma"))?;
    let beta = src.var(g, &format!("{prefix}.beta"))?;
    let x = g.channel_norm(x, gamma, beta, 1, NORM_EPS)?;
    Ok(if relu { g.relu(x) } else { x })
}

fn bottleneck<T: Scalar, P: ParamSource<T>>(
    g: &mut Graph<T>,
    src: &mut P,
    prefix: &str,
    x: Var,
    in_ch: usize,
    base: usize,
    stride: usize,
) -> Result<Var> {
    let out_ch = base * BOTTLENECK_EXPANSION;
    let w1 = src.var(g, &format!("{prefix}.conv1.weight"))?;
    let h = g.conv2d(x, w1, 1, 0)?;
    let h = norm_relu(g, src, &format!("{prefix}.norm1"), h, true)?;
    let w2 = src.var(g, &format!("{prefix}.conv2.weight"))?;
    let h = g.conv2d(h, w2, stride, 1)?;
    let h = norm_relu(g, src, &format!("{prefix}.norm2"), h, true)?;
    let w3 = src.var(g, &format!("{prefix}.conv3.weight"))?;
    let h = g.conv2d(h, w3, 1, 0)?;
    let h = norm_relu(g, src, &format!("{prefix}.norm3"), h, false)?;
    let skip = if stride != 1 || in_ch != out_ch {
        let wp = src.var(g, &format!("{prefix}.proj.weight"))?;
        let p = g.conv2d(x, wp, stride, 0)?;
        norm_relu(g, src, &format!("{prefix}.proj_norm"), p, false)?
    } else {
        x
    };
    let sum = g.add(h, skip)?;
    Ok(g.relu(sum))
}

/// Run the encoder over a batch of slices: (N, Cin, H, W) -> (N, D). Every
/// slice shares the same weights, so identical slices produce identical
/// embeddings and slice order is preserved row-for-row.
pub fn encoder_forward<T: Scalar, P: ParamSource<T>>(
    g: &mut Graph<T>,
    src: &mut P,
    enc: &EncoderSpec,
    input: Var,
) -> Result<Var> {
    let w = src.var(g, "encoder.stem.conv.weight")?;
    let pad = enc.stem_kernel / 2;
    let mut x = g.conv2d(input, w, enc.stem_stride, pad)?;
    x = norm_relu(g, src, "encoder.stem.norm", x, true)?;
    if enc.stem_pool {
        x = g.max_pool2d(x, [3, 3], [2, 2], [1, 1])?;
    }
    let mut in_ch = enc.stem_width;
    for (si, stage) in enc.stages.iter().enumerate() {
        for bi in 0..stage.blocks {
            let stride = if bi == 0 { stage.stride } else { 1 };
            x = bottleneck(
                g,
                src,
                &format!("encoder.stage{si}.block{bi}"),
                x,
                in_ch,
                stage.base_width,
                stride,
            )?;
            in_ch = stage.base_width * BOTTLENECK_EXPANSION;
        }
    }
    g.global_avg_pool(x)
}
