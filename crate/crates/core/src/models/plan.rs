//! Parameter plans and analytic parameter/FLOP accounting.
//!
//! A plan lists every parameter tensor (name, shape, init rule) an
//! architecture owns, in a fixed order, together with the forward-pass
//! multiply-accumulate count at the spec's input size. Builders materialize
//! networks from the same plan, so `count_params` equals the number of
//! scalars in a checkpoint of the built model exactly.
//!
//! FLOP counts follow the reporting convention of common profilers: one
//! multiply-accumulate counts as one FLOP, and only convolution, dense, and
//! attention matmuls are counted (normalization, activations, and pooling
//! are ignored).

use crate::error::Result;
use crate::params::InitKind;

use super::{
    AggregatorSpec, EncoderSpec, InputSpec, ModelSpec, TemporalPad, BOTTLENECK_EXPANSION,
};

#[derive(Clone, Debug)]
pub struct PlannedParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: InitKind,
}

impl PlannedParam {
    pub fn numel(&self) -> u64 {
        self.shape.iter().product::<usize>() as u64
    }
}

#[derive(Clone, Debug, Default)]
pub struct ModelPlan {
    pub params: Vec<PlannedParam>,
    pub macs: u64,
}

impl ModelPlan {
    pub fn param_total(&self) -> u64 {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn find(&self, name: &str) -> Option<&PlannedParam> {
        self.params.iter().find(|p| p.name == name)
    }

    fn push(&mut self, name: impl Into<String>, shape: &[usize], init: InitKind) {
        self.params.push(PlannedParam {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        });
    }

    fn norm(&mut self, prefix: &str, channels: usize) {
        self.push(format!("{prefix}.gamma"), &[channels], InitKind::Ones);
        self.push(format!("{prefix}.beta"), &[channels], InitKind::Zeros);
    }

    fn dense(&mut self, prefix: &str, din: usize, dout: usize) {
        self.push(
            format!("{prefix}.weight"),
            &[din, dout],
            InitKind::HeNormal { fan_in: din },
        );
        self.push(format!("{prefix}.bias"), &[dout], InitKind::Zeros);
    }

    fn attention(&mut self, prefix: &str, dim: usize) {
        self.push(
            format!("{prefix}.w_qkv"),
            &[dim, 3 * dim],
            InitKind::HeNormal { fan_in: dim },
        );
        self.push(format!("{prefix}.b_qkv"), &[3 * dim], InitKind::Zeros);
        self.push(
            format!("{prefix}.w_out"),
            &[dim, dim],
            InitKind::HeNormal { fan_in: dim },
        );
        self.push(format!("{prefix}.b_out"), &[dim], InitKind::Zeros);
    }
}

fn pooled_extent(extent: usize, k: usize, stride: usize, pad: usize) -> usize {
    (extent + 2 * pad - k) / stride + 1
}

/// Spatial geometry tracker for the 2D encoder walk.
pub(crate) struct Geometry {
    pub(crate) channels: usize,
    pub(crate) h: usize,
    pub(crate) w: usize,
}

/// Emit the 2D slice encoder's parameters into `plan` and return the final
/// geometry. `batch` is the number of slices sharing the weights (MACs scale
/// with it).
pub(crate) fn plan_encoder_2d(
    plan: &mut ModelPlan,
    input: &InputSpec,
    enc: &EncoderSpec,
    batch: usize,
) -> Geometry {
    let mut g = Geometry {
        channels: input.in_channels,
        h: input.height,
        w: input.width,
    };
    let k = enc.stem_kernel;
    let pad = k / 2;
    let oh = pooled_extent(g.h, k, enc.stem_stride, pad);
    let ow = pooled_extent(g.w, k, enc.stem_stride, pad);
    plan.push(
        "encoder.stem.conv.weight",
        &[enc.stem_width, g.channels, k, k],
        InitKind::HeNormal { fan_in: g.channels * k * k },
    );
    plan.macs += (batch * enc.stem_width * oh * ow * g.channels * k * k) as u64;
    plan.norm("encoder.stem.norm", enc.stem_width);
    g.channels = enc.stem_width;
    g.h = oh;
    g.w = ow;
    if enc.stem_pool {
        g.h = pooled_extent(g.h, 3, 2, 1);
        g.w = pooled_extent(g.w, 3, 2, 1);
    }
    for (si, stage) in enc.stages.iter().enumerate() {
        for bi in 0..stage.blocks {
            let stride = if bi == 0 { stage.stride } else { 1 };
            let base = stage.base_width;
            let out_ch = base * BOTTLENECK_EXPANSION;
            let prefix = format!("encoder.stage{si}.block{bi}");
            let (h2, w2) = (
                pooled_extent(g.h, 3, stride, 1),
                pooled_extent(g.w, 3, stride, 1),
            );
            plan.push(
                format!("{prefix}.conv1.weight"),
                &[base, g.channels, 1, 1],
                InitKind::HeNormal { fan_in: g.channels },
            );
            plan.macs += (batch * base * g.h * g.w * g.channels) as u64;
            plan.norm(&format!("{prefix}.norm1"), base);
            plan.push(
                format!("{prefix}.conv2.weight"),
                &[base, base, 3, 3],
                InitKind::HeNormal { fan_in: base * 9 },
            );
            plan.macs += (batch * base * h2 * w2 * base * 9) as u64;
            plan.norm(&format!("{prefix}.norm2"), base);
            plan.push(
                format!("{prefix}.conv3.weight"),
                &[out_ch, base, 1, 1],
                InitKind::HeNormal { fan_in: base },
            );
            plan.macs += (batch * out_ch * h2 * w2 * base) as u64;
            plan.norm(&format!("{prefix}.norm3"), out_ch);
            if stride != 1 || g.channels != out_ch {
                plan.push(
                    format!("{prefix}.proj.weight"),
                    &[out_ch, g.channels, 1, 1],
                    InitKind::HeNormal { fan_in: g.channels },
                );
                plan.macs += (batch * out_ch * h2 * w2 * g.channels) as u64;
                plan.norm(&format!("{prefix}.proj_norm"), out_ch);
            }
            g.channels = out_ch;
            g.h = h2;
            g.w = w2;
        }
    }
    g
}

/// 3D twin of [`plan_encoder_2d`]: identical parameter names, kernel shapes
/// carry an inflation depth, MACs include the depth extent.
fn plan_encoder_3d(
    plan: &mut ModelPlan,
    input: &InputSpec,
    enc: &EncoderSpec,
    stem_depth: usize,
    bottleneck_depth: usize,
    temporal_pad: TemporalPad,
) -> (Geometry, usize) {
    let mut g = Geometry {
        channels: input.in_channels,
        h: input.height,
        w: input.width,
    };
    let mut depth = input.n_slices;
    let tpad = |kd: usize| match temporal_pad {
        TemporalPad::Same => kd / 2,
        TemporalPad::Valid => 0,
    };
    let k = enc.stem_kernel;
    let pad = k / 2;
    let oh = pooled_extent(g.h, k, enc.stem_stride, pad);
    let ow = pooled_extent(g.w, k, enc.stem_stride, pad);
    let od = pooled_extent(depth, stem_depth, 1, tpad(stem_depth));
    plan.push(
        "encoder.stem.conv.weight",
        &[enc.stem_width, g.channels, stem_depth, k, k],
        InitKind::HeNormal { fan_in: g.channels * stem_depth * k * k },
    );
    plan.macs += (enc.stem_width * od * oh * ow * g.channels * stem_depth * k * k) as u64;
    plan.norm("encoder.stem.norm", enc.stem_width);
    g.channels = enc.stem_width;
    g.h = oh;
    g.w = ow;
    depth = od;
    if enc.stem_pool {
        g.h = pooled_extent(g.h, 3, 2, 1);
        g.w = pooled_extent(g.w, 3, 2, 1);
    }
    for (si, stage) in enc.stages.iter().enumerate() {
        for bi in 0..stage.blocks {
            let stride = if bi == 0 { stage.stride } else { 1 };
            let base = stage.base_width;
            let out_ch = base * BOTTLENECK_EXPANSION;
            let prefix = format!("encoder.stage{si}.block{bi}");
            let (h2, w2) = (
                pooled_extent(g.h, 3, stride, 1),
                pooled_extent(g.w, 3, stride, 1),
            );
            let d2 = pooled_extent(depth, bottleneck_depth, 1, tpad(bottleneck_depth));
            plan.push(
                format!("{prefix}.conv1.weight"),
                &[base, g.channels, 1, 1, 1],
                InitKind::HeNormal { fan_in: g.channels },
            );
            plan.macs += (base * depth * g.h * g.w * g.channels) as u64;
            plan.norm(&format!("{prefix}.norm1"), base);
            plan.push(
                format!("{prefix}.conv2.weight"),
                &[base, base, bottleneck_depth, 3, 3],
                InitKind::HeNormal { fan_in: base * bottleneck_depth * 9 },
            );
            plan.macs += (base * d2 * h2 * w2 * base * bottleneck_depth * 9) as u64;
            plan.norm(&format!("{prefix}.norm2"), base);
            plan.push(
                format!("{prefix}.conv3.weight"),
                &[out_ch, base, 1, 1, 1],
                InitKind::HeNormal { fan_in: base },
            );
            plan.macs += (out_ch * d2 * h2 * w2 * base) as u64;
            plan.norm(&format!("{prefix}.norm3"), out_ch);
            if stride != 1 || g.channels != out_ch {
                plan.push(
                    format!("{prefix}.proj.weight"),
                    &[out_ch, g.channels, 1, 1, 1],
                    InitKind::HeNormal { fan_in: g.channels },
                );
                plan.macs += (out_ch * d2 * h2 * w2 * g.channels) as u64;
                plan.norm(&format!("{prefix}.proj_norm"), out_ch);
            }
            g.channels = out_ch;
            g.h = h2;
            g.w = w2;
            depth = d2;
        }
    }
    (g, depth)
}

/// Full parameter plan plus MAC count for one forward pass of one volume.
pub fn plan_model(spec: &ModelSpec) -> Result<ModelPlan> {
    spec.validate()?;
    let mut plan = ModelPlan::default();
    let s = spec.input.n_slices;
    let d = spec.embed_dim();
    match &spec.aggregator {
        AggregatorSpec::Bilstm { hidden, se_reduction } => {
            plan_encoder_2d(&mut plan, &spec.input, &spec.encoder, s);
            let h = *hidden;
            for dir in ["fwd", "bwd"] {
                plan.push(
                    format!("agg.lstm.{dir}.w_input"),
                    &[d, 4 * h],
                    InitKind::UniformFan { fan_in: h },
                );
                plan.push(
                    format!("agg.lstm.{dir}.w_hidden"),
                    &[h, 4 * h],
                    InitKind::UniformFan { fan_in: h },
                );
                plan.push(format!("agg.lstm.{dir}.bias"), &[4 * h], InitKind::Zeros);
            }
            plan.macs += 2 * (s * 4 * h * (d + h)) as u64;
            let hid = s.div_ceil(*se_reduction);
            plan.dense("agg.se.fc1", s, hid);
            plan.dense("agg.se.fc2", hid, s);
            plan.macs += (2 * s * hid) as u64;
            plan.dense("head", 2 * h, 1);
            plan.macs += (2 * h) as u64;
        }
        AggregatorSpec::Transformer {
            blocks,
            mlp_dim,
            positional_embedding,
            ..
        } => {
            plan_encoder_2d(&mut plan, &spec.input, &spec.encoder, s);
            let t = s + 1;
            plan.push("agg.cls_token", &[1, d], InitKind::Normal { std: 0.02 });
            if *positional_embedding {
                plan.push("agg.pos_embed", &[t, d], InitKind::Normal { std: 0.02 });
            }
            for b in 0..*blocks {
                let p = format!("agg.block{b}");
                plan.norm(&format!("{p}.norm1"), d);
                plan.attention(&format!("{p}.attn"), d);
                plan.norm(&format!("{p}.norm2"), d);
                plan.dense(&format!("{p}.mlp.fc1"), d, *mlp_dim);
                plan.dense(&format!("{p}.mlp.fc2"), *mlp_dim, d);
                plan.macs += (t * d * 3 * d) as u64; // qkv
                plan.macs += 2 * (t * t * d) as u64; // scores + context
                plan.macs += (t * d * d) as u64; // out projection
                plan.macs += 2 * (t * d * mlp_dim) as u64;
            }
            plan.norm("agg.final_norm", d);
            plan.dense("head", d, 1);
            plan.macs += d as u64;
        }
        AggregatorSpec::I3d {
            stem_depth,
            bottleneck_depth,
            temporal_pad,
        } => {
            plan_encoder_3d(
                &mut plan,
                &spec.input,
                &spec.encoder,
                *stem_depth,
                *bottleneck_depth,
                *temporal_pad,
            );
            plan.dense("head", d, 1);
            plan.macs += d as u64;
        }
        AggregatorSpec::VivitFsa {
            patch,
            dim,
            blocks,
            heads: _,
            mlp_dim,
        } => {
            let p_tokens = (spec.input.height / patch) * (spec.input.width / patch);
            let t_all = s * p_tokens;
            let patch_in = spec.input.in_channels * patch * patch;
            plan.dense("agg.patch_embed", patch_in, *dim);
            plan.macs += (t_all * patch_in * dim) as u64;
            plan.push("agg.pos_spatial", &[p_tokens, *dim], InitKind::Normal { std: 0.02 });
            plan.push("agg.pos_temporal", &[s, *dim], InitKind::Normal { std: 0.02 });
            for b in 0..*blocks {
                let p = format!("agg.block{b}");
                plan.norm(&format!("{p}.norm_s"), *dim);
                plan.attention(&format!("{p}.attn_s"), *dim);
                plan.norm(&format!("{p}.norm_t"), *dim);
                plan.attention(&format!("{p}.attn_t"), *dim);
                plan.norm(&format!("{p}.norm_m"), *dim);
                plan.dense(&format!("{p}.mlp.fc1"), *dim, *mlp_dim);
                plan.dense(&format!("{p}.mlp.fc2"), *mlp_dim, *dim);
                // spatial attention within each slice
                plan.macs += (t_all * dim * 3 * dim) as u64;
                plan.macs += 2 * (s * p_tokens * p_tokens * dim) as u64;
                plan.macs += (t_all * dim * dim) as u64;
                // temporal attention at each spatial index
                plan.macs += (t_all * dim * 3 * dim) as u64;
                plan.macs += 2 * (p_tokens * s * s * dim) as u64;
                plan.macs += (t_all * dim * dim) as u64;
                plan.macs += 2 * (t_all * dim * mlp_dim) as u64;
            }
            plan.norm("agg.final_norm", *dim);
            plan.dense("head", *dim, 1);
            plan.macs += *dim as u64;
        }
    }
    Ok(plan)
}

/// Exact number of trainable scalars in the network a spec describes.
pub fn count_params(spec: &ModelSpec) -> Result<u64> {
    Ok(plan_model(spec)?.param_total())
}

/// Analytic forward-pass FLOPs for one volume (1 multiply-accumulate = 1
/// FLOP, matmul-bearing layers only).
pub fn count_flops(spec: &ModelSpec) -> Result<u64> {
    Ok(plan_model(spec)?.macs)
}
