//! Model specifications and the four volume classifiers.
//!
//! A [`ModelSpec`] fully determines a network: parameter names, shapes, and
//! initialization come from [`plan::plan_model`], and the builders in
//! [`network`] materialize exactly that plan. Parameter and FLOP accounting
//! therefore agree with the built network by construction.

pub mod aggregators;
pub mod encoder;
pub mod i3d;
pub mod network;
pub mod plan;
pub mod vivit;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use network::{AttentionTrace, Network};
pub use plan::{count_flops, count_params, plan_model, ModelPlan};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    CnnBilstm,
    CnnTransformer,
    I3d,
    VivitFsa,
}

impl Architecture {
    pub fn all() -> [Architecture; 4] {
        [
            Architecture::CnnBilstm,
            Architecture::CnnTransformer,
            Architecture::I3d,
            Architecture::VivitFsa,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            Architecture::CnnBilstm => "cnn_bilstm",
            Architecture::CnnTransformer => "cnn_transformer",
            Architecture::I3d => "i3d",
            Architecture::VivitFsa => "vivit_fsa",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cnn_bilstm" => Ok(Architecture::CnnBilstm),
            "cnn_transformer" => Ok(Architecture::CnnTransformer),
            "i3d" => Ok(Architecture::I3d),
            "vivit_fsa" => Ok(Architecture::VivitFsa),
            other => Err(Error::Config(format!("unknown architecture `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    PaperScale,
    DeskScale,
}

impl Preset {
    pub fn name(&self) -> &'static str {
        match self {
            Preset::PaperScale => "paper_scale",
            Preset::DeskScale => "desk_scale",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "paper_scale" => Ok(Preset::PaperScale),
            "desk_scale" => Ok(Preset::DeskScale),
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }
}

/// Input volume geometry fed to a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSpec {
    pub n_slices: usize,
    pub height: usize,
    pub width: usize,
    /// Grayscale slices are replicated to this many channels before the stem.
    pub in_channels: usize,
}

/// One encoder stage: `blocks` bottleneck blocks at `base_width` channels
/// (output width is 4x base). The first block carries `stride`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub base_width: usize,
    pub blocks: usize,
    pub stride: usize,
}

/// Bottleneck-residual 2D encoder layout (also the inflation source for the
/// 3D model).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub stem_width: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    /// 3x3/2 max pooling after the stem.
    pub stem_pool: bool,
    pub stages: Vec<StageSpec>,
}

pub const BOTTLENECK_EXPANSION: usize = 4;

impl EncoderSpec {
    /// Embedding width after global average pooling.
    pub fn out_dim(&self) -> usize {
        self.stages
            .last()
            .map(|s| s.base_width * BOTTLENECK_EXPANSION)
            .unwrap_or(0)
    }
}

/// Temporal padding policy for inflated convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalPad {
    /// Zero padding of floor(Kd/2) keeps the slice count through the network.
    Same,
    /// No temporal padding; the depth extent shrinks by Kd-1 per inflated
    /// convolution and residual skips are center-cropped to match.
    Valid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AggregatorSpec {
    Bilstm {
        hidden: usize,
        se_reduction: usize,
    },
    Transformer {
        blocks: usize,
        heads: usize,
        mlp_dim: usize,
        /// Maximum drop-path rate; per-block rates ramp linearly from 0.
        drop_path_rate: f64,
        positional_embedding: bool,
    },
    I3d {
        stem_depth: usize,
        bottleneck_depth: usize,
        temporal_pad: TemporalPad,
    },
    VivitFsa {
        patch: usize,
        dim: usize,
        blocks: usize,
        heads: usize,
        mlp_dim: usize,
    },
}

/// Declarative architecture description; networks, parameter counts, and
/// FLOP counts are all derived from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub preset: Preset,
    pub input: InputSpec,
    pub encoder: EncoderSpec,
    pub aggregator: AggregatorSpec,
}

fn paper_encoder() -> EncoderSpec {
    EncoderSpec {
        stem_width: 64,
        stem_kernel: 7,
        stem_stride: 2,
        stem_pool: true,
        stages: vec![
            StageSpec { base_width: 64, blocks: 3, stride: 1 },
            StageSpec { base_width: 128, blocks: 4, stride: 2 },
            StageSpec { base_width: 256, blocks: 6, stride: 2 },
            StageSpec { base_width: 512, blocks: 3, stride: 2 },
        ],
    }
}

fn desk_encoder() -> EncoderSpec {
    EncoderSpec {
        stem_width: 16,
        stem_kernel: 3,
        stem_stride: 1,
        stem_pool: false,
        stages: vec![
            StageSpec { base_width: 4, blocks: 1, stride: 1 },
            StageSpec { base_width: 8, blocks: 1, stride: 2 },
            StageSpec { base_width: 16, blocks: 1, stride: 2 },
            StageSpec { base_width: 16, blocks: 1, stride: 2 },
        ],
    }
}

impl ModelSpec {
    pub fn preset(architecture: Architecture, preset: Preset) -> Self {
        match preset {
            Preset::PaperScale => Self::paper_scale(architecture),
            Preset::DeskScale => Self::desk_scale(architecture),
        }
    }

    /// Full-size layout: 32 slices of 224x224, 2048-d embeddings.
    pub fn paper_scale(architecture: Architecture) -> Self {
        let input = InputSpec {
            n_slices: 32,
            height: 224,
            width: 224,
            in_channels: 3,
        };
        let encoder = paper_encoder();
        let aggregator = match architecture {
            Architecture::CnnBilstm => AggregatorSpec::Bilstm {
                hidden: 512,
                se_reduction: 4,
            },
            Architecture::CnnTransformer => AggregatorSpec::Transformer {
                blocks: 4,
                heads: 2,
                mlp_dim: 1024,
                drop_path_rate: 0.1,
                positional_embedding: true,
            },
            Architecture::I3d => AggregatorSpec::I3d {
                stem_depth: 5,
                bottleneck_depth: 3,
                temporal_pad: TemporalPad::Same,
            },
            Architecture::VivitFsa => AggregatorSpec::VivitFsa {
                patch: 16,
                dim: 600,
                blocks: 6,
                heads: 8,
                mlp_dim: 2400,
            },
        };
        ModelSpec {
            architecture,
            preset: Preset::PaperScale,
            input,
            encoder,
            aggregator,
        }
    }

    /// Reduced layout with the same structure: 16 slices of 32x32, 64-d
    /// embeddings. Small enough to train on a laptop CPU.
    pub fn desk_scale(architecture: Architecture) -> Self {
        let input = InputSpec {
            n_slices: 16,
            height: 32,
            width: 32,
            in_channels: 1,
        };
        let encoder = desk_encoder();
        let aggregator = match architecture {
            Architecture::CnnBilstm => AggregatorSpec::Bilstm {
                hidden: 32,
                se_reduction: 4,
            },
            Architecture::CnnTransformer => AggregatorSpec::Transformer {
                blocks: 4,
                heads: 2,
                mlp_dim: 32,
                drop_path_rate: 0.1,
                positional_embedding: true,
            },
            Architecture::I3d => AggregatorSpec::I3d {
                stem_depth: 5,
                bottleneck_depth: 3,
                temporal_pad: TemporalPad::Same,
            },
            Architecture::VivitFsa => AggregatorSpec::VivitFsa {
                patch: 8,
                dim: 128,
                blocks: 4,
                heads: 2,
                mlp_dim: 256,
            },
        };
        ModelSpec {
            architecture,
            preset: Preset::DeskScale,
            input,
            encoder,
            aggregator,
        }
    }

    /// Embedding dimension produced by the slice encoder (2.5D and 3D paths).
    pub fn embed_dim(&self) -> usize {
        self.encoder.out_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let i = &self.input;
        if i.n_slices == 0 || i.height == 0 || i.width == 0 || i.in_channels == 0 {
            return Err(Error::Config("input dims must be positive".into()));
        }
        if self.encoder.stages.is_empty() {
            return Err(Error::Config("encoder needs at least one stage".into()));
        }
        match &self.aggregator {
            AggregatorSpec::Bilstm { hidden, se_reduction } => {
                if *hidden == 0 || *se_reduction == 0 {
                    return Err(Error::Config("bilstm dims must be positive".into()));
                }
            }
            AggregatorSpec::Transformer {
                blocks,
                heads,
                mlp_dim,
                drop_path_rate,
                ..
            } => {
                let d = self.embed_dim();
                if *blocks == 0 || *heads == 0 || *mlp_dim == 0 {
                    return Err(Error::Config("transformer dims must be positive".into()));
                }
                if d % heads != 0 {
                    return Err(Error::Config(format!(
                        "token dim {d} not divisible by {heads} heads"
                    )));
                }
                if !(0.0..1.0).contains(drop_path_rate) {
                    return Err(Error::Config("drop_path_rate must be in [0, 1)".into()));
                }
            }
            AggregatorSpec::I3d {
                stem_depth,
                bottleneck_depth,
                ..
            } => {
                if *stem_depth == 0 || *bottleneck_depth == 0 {
                    return Err(Error::Config("inflation depths must be positive".into()));
                }
                if stem_depth % 2 == 0 || bottleneck_depth % 2 == 0 {
                    return Err(Error::Config("inflation depths must be odd".into()));
                }
            }
            AggregatorSpec::VivitFsa {
                patch,
                dim,
                blocks,
                heads,
                mlp_dim,
            } => {
                if *patch == 0 || *dim == 0 || *blocks == 0 || *heads == 0 || *mlp_dim == 0 {
                    return Err(Error::Config("vivit dims must be positive".into()));
                }
                if i.height % patch != 0 || i.width % patch != 0 {
                    return Err(Error::Config(format!(
                        "patch {patch} does not divide {}x{}",
                        i.height, i.width
                    )));
                }
                if dim % heads != 0 {
                    return Err(Error::Config(format!(
                        "token dim {dim} not divisible by {heads} heads"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Stable content hash of the canonical JSON form; stored in checkpoints
    /// so weight transfers can verify spec compatibility.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("spec serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        let digest = h.finalize();
        let mut out = String::with_capacity(64);
        for b in digest {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_scale_pins_cited_dimensions() {
        let spec = ModelSpec::paper_scale(Architecture::CnnBilstm);
        assert_eq!(spec.embed_dim(), 2048);
        assert_eq!(spec.input.n_slices, 32);
        assert_eq!(spec.input.height, 224);
        match spec.aggregator {
            AggregatorSpec::Bilstm { hidden, .. } => assert_eq!(hidden, 512),
            _ => panic!("wrong aggregator"),
        }
        let spec = ModelSpec::paper_scale(Architecture::CnnTransformer);
        match spec.aggregator {
            AggregatorSpec::Transformer { blocks, heads, mlp_dim, .. } => {
                assert_eq!((blocks, heads, mlp_dim), (4, 2, 1024));
            }
            _ => panic!("wrong aggregator"),
        }
    }

    #[test]
    fn desk_scale_validates_for_all_architectures() {
        for arch in Architecture::all() {
            ModelSpec::desk_scale(arch).validate().unwrap();
            ModelSpec::paper_scale(arch).validate().unwrap();
        }
    }

    #[test]
    fn content_hash_is_stable_and_distinguishes_specs() {
        let a = ModelSpec::desk_scale(Architecture::CnnBilstm);
        let b = ModelSpec::desk_scale(Architecture::CnnBilstm);
        let c = ModelSpec::desk_scale(Architecture::I3d);
        assert_eq!(a.content_hash(), b.content_hash());
        assert_ne!(a.content_hash(), c.content_hash());
    }

    #[test]
    fn spec_json_roundtrip() {
        let a = ModelSpec::desk_scale(Architecture::VivitFsa);
        let json = serde_json::to_string(&a).unwrap();
        let b: ModelSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn indivisible_heads_rejected() {
        let mut spec = ModelSpec::desk_scale(Architecture::CnnTransformer);
        if let AggregatorSpec::Transformer { ref mut heads, .. } = spec.aggregator {
            *heads = 3; // 64 % 3 != 0
        }
        assert!(spec.validate().is_err());
    }
}
