//! Inflated 3D network: the 2D encoder layout with kernels replicated along
//! depth.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{dense_block, Activation};
use crate::tensor::{Scalar, Tensor};

use super::encoder::NORM_EPS;
use super::network::ParamSource;
use super::{AggregatorSpec, ModelSpec, TemporalPad, BOTTLENECK_EXPANSION};

/// Replicate a 2D kernel `depth` times along a new depth axis, scaling every
/// copy by 1/depth, so a depth-constant input reproduces the 2D response.
///
/// The center copy absorbs the floating-point rounding residual of the other
/// copies, so [`depth_sum`] recovers the source kernel bit-exactly for odd
/// depths up to 5 (side-copy counts that sum without rounding).
pub fn inflate_kernel<T: Scalar>(kernel2d: &Tensor<T>, depth: usize) -> Result<Tensor<T>> {
    let s = kernel2d.shape();
    if s.len() != 4 {
        return Err(Error::shape("inflate_kernel", "OIKhKw", format!("{s:?}")));
    }
    if depth == 0 {
        return Err(Error::arg("inflate_kernel", "depth must be >= 1"));
    }
    let (o, i, kh, kw) = (s[0], s[1], s[2], s[3]);
    let scale = T::from_f64(1.0 / depth as f64);
    let sides = T::from_f64((depth - 1) as f64);
    let center = depth / 2;
    let plane = kh * kw;
    let mut data = Vec::with_capacity(o * i * depth * plane);
    for oi in 0..o * i {
        let src = &kernel2d.data()[oi * plane..(oi + 1) * plane];
        for dz in 0..depth {
            if dz == center && depth > 1 {
                data.extend(src.iter().map(|&v| v - sides * (v * scale)));
            } else {
                data.extend(src.iter().map(|&v| v * scale));
            }
        }
    }
    Tensor::from_vec(&[o, i, depth, kh, kw], data)
}

/// Sum a 5D kernel over its depth axis back to a 2D kernel. Side copies are
/// summed in a pairwise tree before the center copy is added, matching the
/// exactness guarantee of [`inflate_kernel`].
pub fn depth_sum<T: Scalar>(kernel3d: &Tensor<T>) -> Result<Tensor<T>> {
    let s = kernel3d.shape();
    if s.len() != 5 {
        return Err(Error::shape("depth_sum", "OIKdKhKw", format!("{s:?}")));
    }
    let (o, i, kd, kh, kw) = (s[0], s[1], s[2], s[3], s[4]);
    let center = kd / 2;
    let plane = kh * kw;
    let mut out = vec![T::ZERO; o * i * plane];
    for oi in 0..o * i {
        for p in 0..plane {
            let at = |dz: usize| kernel3d.data()[(oi * kd + dz) * plane + p];
            let mut terms: Vec<T> = (0..kd).filter(|&dz| dz != center).map(at).collect();
            while terms.len() > 1 {
                let mut next = Vec::with_capacity(terms.len().div_ceil(2));
                for pair in terms.chunks(2) {
                    next.push(if pair.len() == 2 { pair[0] + pair[1] } else { pair[0] });
                }
                terms = next;
            }
            let side = terms.first().copied().unwrap_or(T::ZERO);
            out[oi * plane + p] = side + at(center);
        }
    }
    Tensor::from_vec(&[o, i, kh, kw], out)
}

fn tpad(mode: TemporalPad, kd: usize) -> usize {
    match mode {
        TemporalPad::Same => kd / 2,
        TemporalPad::Valid => 0,
    }
}

fn norm_relu3d<T: Scalar, P: ParamSource<T>>(
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

#[allow(clippy::too_many_arguments)]
fn bottleneck3d<T: Scalar, P: ParamSource<T>>(
    g: &mut Graph<T>,
    src: &mut P,
    prefix: &str,
    x: Var,
    in_ch: usize,
    base: usize,
    stride: usize,
    kd: usize,
    pad_mode: TemporalPad,
) -> Result<Var> {
    let out_ch = base * BOTTLENECK_EXPANSION;
    let w1 = src.var(g, &format!("{prefix}.conv1.weight"))?;
    let h = g.conv3d(x, w1, [1, 1, 1], [0, 0, 0])?;
    let h = norm_relu3d(g, src, &format!("{prefix}.norm1"), h, true)?;
    let w2 = src.var(g, &format!("{prefix}.conv2.weight"))?;
    let h = g.conv3d(h, w2, [1, stride, stride], [tpad(pad_mode, kd), 1, 1])?;
    let h = norm_relu3d(g, src, &format!("{prefix}.norm2"), h, true)?;
    let w3 = src.var(g, &format!("{prefix}.conv3.weight"))?;
    let h = g.conv3d(h, w3, [1, 1, 1], [0, 0, 0])?;
    let h = norm_relu3d(g, src, &format!("{prefix}.norm3"), h, false)?;
    let mut skip = if stride != 1 || in_ch != out_ch {
        let wp = src.var(g, &format!("{prefix}.proj.weight"))?;
        let p = g.conv3d(x, wp, [1, stride, stride], [0, 0, 0])?;
        norm_relu3d(g, src, &format!("{prefix}.proj_norm"), p, false)?
    } else {
        x
    };
    // with valid temporal extent the main path lost kd-1 frames; crop the
    // skip path to the matching center window
    if pad_mode == TemporalPad::Valid && kd > 1 {
        let depth = g.value(skip).shape()[2];
        let crop = (kd - 1) / 2;
        if depth < kd {
            return Err(Error::arg(
                "i3d_forward",
                format!("depth {depth} too small for temporal kernel {kd}"),
            ));
        }
        skip = g.slice(skip, 2, crop, depth - 2 * crop)?;
    }
    let sum = g.add(h, skip)?;
    Ok(g.relu(sum))
}

/// Forward pass over one volume laid out as (1, C, S, H, W); returns the
/// scalar logit.
pub fn i3d_forward<T: Scalar, P: ParamSource<T>>(
    g: &mut Graph<T>,
    src: &mut P,
    spec: &ModelSpec,
    input: Var,
) -> Result<Var> {
    let (stem_depth, kd, pad_mode) = match &spec.aggregator {
        AggregatorSpec::I3d {
            stem_depth,
            bottleneck_depth,
            temporal_pad,
        } => (*stem_depth, *bottleneck_depth, *temporal_pad),
        _ => return Err(Error::Config("spec is not an i3d aggregator".into())),
    };
    let enc = &spec.encoder;
    let w = src.var(g, "encoder.stem.conv.weight")?;
    let pad = enc.stem_kernel / 2;
    let mut x = g.conv3d(
        input,
        w,
        [1, enc.stem_stride, enc.stem_stride],
        [tpad(pad_mode, stem_depth), pad, pad],
    )?;
    x = norm_relu3d(g, src, "encoder.stem.norm", x, true)?;
    if enc.stem_pool {
        x = g.max_pool3d(x, [1, 3, 3], [1, 2, 2], [0, 1, 1])?;
    }
    let mut in_ch = enc.stem_width;
    for (si, stage) in enc.stages.iter().enumerate() {
        for bi in 0..stage.blocks {
            let stride = if bi == 0 { stage.stride } else { 1 };
            x = bottleneck3d(
                g,
                src,
                &format!("encoder.stage{si}.block{bi}"),
                x,
                in_ch,
                stage.base_width,
                stride,
                kd,
                pad_mode,
            )?;
            in_ch = stage.base_width * BOTTLENECK_EXPANSION;
        }
    }
    let pooled = g.global_avg_pool(x)?; // (1, D)
    let head_w = src.var(g, "head.weight")?;
    let head_b = src.var(g, "head.bias")?;
    let logit_row = dense_block(g, pooled, head_w, head_b, Activation::None)?;
    g.reshape(logit_row, &[])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inflate_all_ones_scales_by_inverse_depth() {
        let k = Tensor::<f64>::filled(&[2, 1, 3, 3], 1.0);
        let k3 = inflate_kernel(&k, 3).unwrap();
        assert_eq!(k3.shape(), &[2, 1, 3, 3, 3]);
        for &v in k3.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn inflated_conv_on_depth_constant_input_matches_2d() {
        use crate::graph::Graph;
        let kdata: Vec<f64> = (0..9).map(|i| (i as f64 - 4.0) * 0.17).collect();
        let k2 = Tensor::from_vec(&[1, 1, 3, 3], kdata.clone()).unwrap();
        let k3 = inflate_kernel(&k2, 3).unwrap();
        let plane: Vec<f64> = (0..25).map(|i| ((i * 11) % 17) as f64 / 17.0).collect();
        let mut vol = Vec::new();
        for _ in 0..5 {
            vol.extend_from_slice(&plane);
        }
        let mut g = Graph::<f64>::new();
        let x3 = g.leaf(Tensor::from_vec(&[1, 1, 5, 5, 5], vol).unwrap());
        let kv3 = g.leaf(k3);
        // valid temporal extent, same spatial padding as the 2D source
        let y3 = g.conv3d(x3, kv3, [1, 1, 1], [0, 1, 1]).unwrap();
        let mut g2 = Graph::<f64>::new();
        let x2 = g2.leaf(Tensor::from_vec(&[1, 1, 5, 5], plane).unwrap());
        let kv2 = g2.leaf(k2);
        let y2 = g2.conv2d(x2, kv2, 1, 1).unwrap();
        assert_eq!(g.value(y3).shape(), &[1, 1, 3, 5, 5]);
        for dz in 0..3 {
            for p in 0..25 {
                let a = g.value(y3).data()[dz * 25 + p];
                let b = g2.value(y2).data()[p];
                assert!((a - b).abs() < 1e-6, "depth {dz}, pos {p}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn inflate_depth_one_is_unchanged() {
        let data: Vec<f64> = (0..12).map(|i| i as f64 * 0.5).collect();
        let k = Tensor::from_vec(&[2, 2, 1, 3], data.clone()).unwrap();
        let k3 = inflate_kernel(&k, 1).unwrap();
        assert_eq!(k3.shape(), &[2, 2, 1, 1, 3]);
        assert_eq!(k3.data(), &data[..]);
    }

    #[test]
    fn depth_sum_recovers_source_kernel_exactly() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(40);
        let data: Vec<f64> = (0..2 * 3 * 3 * 3).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let k = Tensor::from_vec(&[2, 3, 3, 3], data.clone()).unwrap();
        for depth in [1usize, 3, 5] {
            let k3 = inflate_kernel(&k, depth).unwrap();
            let back = depth_sum(&k3).unwrap();
            assert_eq!(back.shape(), k.shape());
            assert_eq!(back.data(), k.data(), "depth {depth}");
        }
    }

    #[test]
    fn inflate_rejects_bad_inputs() {
        let k = Tensor::<f64>::zeros(&[2, 3, 3]);
        assert!(inflate_kernel(&k, 3).is_err());
        let k = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
        assert!(inflate_kernel(&k, 0).is_err());
    }
}
