//! Network construction and unified forward dispatch.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{init_tensor, Binding, ParamSet};
use crate::rng;
use crate::tensor::{Scalar, Tensor};

use super::aggregators::{bilstm_aggregate, transformer_aggregate};
use super::encoder::{encoder_forward, replicate_channels};
use super::i3d::i3d_forward;
use super::plan::plan_model;
use super::vivit::vivit_fsa_forward;
use super::{Architecture, ModelSpec};

/// Resolves parameter names to graph nodes during a forward pass.
pub trait ParamSource<T: Scalar> {
    fn var(&mut self, g: &mut Graph<T>, name: &str) -> Result<Var>;
}

/// Binds values out of a [`ParamSet`], recording the mapping for gradient
/// routing. Each parameter is bound at most once per graph.
pub struct BoundSource<'a, T: Scalar> {
    params: &'a ParamSet<T>,
    binding: &'a mut Binding,
    cache: HashMap<String, Var>,
}

impl<'a, T: Scalar> BoundSource<'a, T> {
    pub fn new(params: &'a ParamSet<T>, binding: &'a mut Binding) -> Self {
        BoundSource {
            params,
            binding,
            cache: HashMap::new(),
        }
    }
}

impl<T: Scalar> ParamSource<T> for BoundSource<'_, T> {
    fn var(&mut self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.cache.get(name) {
            return Ok(v);
        }
        let v = self.params.bind(g, name, self.binding)?;
        self.cache.insert(name.to_string(), v);
        Ok(v)
    }
}

/// Pre-bound name -> node map; used by gradient checks where parameters enter
/// the graph as externally controlled leaves.
pub struct MapSource {
    map: HashMap<String, Var>,
}

impl MapSource {
    pub fn new(map: HashMap<String, Var>) -> Self {
        MapSource { map }
    }
}

impl<T: Scalar> ParamSource<T> for MapSource {
    fn var(&mut self, _g: &mut Graph<T>, name: &str) -> Result<Var> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| Error::arg("param_source", format!("unknown parameter `{name}`")))
    }
}

/// Graph nodes carrying attention information out of a forward pass.
pub struct TraceVars {
    pub se_weights: Option<Var>,
    pub cls_attention: Vec<Var>,
}

/// Slice-attention evidence extracted from a model.
#[derive(Clone, Debug)]
pub enum AttentionTrace {
    /// Per-slice SE gate values, each in (0, 1).
    SeWeights(Vec<f64>),
    /// Final-block classification-token attention row per head, over the
    /// S+1 tokens (classification token first).
    TokenAttention { rows: Vec<Vec<f64>> },
}

impl AttentionTrace {
    /// Per-slice salience scores of length S, higher = more attended.
    pub fn slice_scores(&self) -> Vec<f64> {
        match self {
            AttentionTrace::SeWeights(w) => w.clone(),
            AttentionTrace::TokenAttention { rows } => {
                if rows.is_empty() {
                    return Vec::new();
                }
                let s = rows[0].len() - 1;
                let mut scores = vec![0.0; s];
                for row in rows {
                    for (i, score) in scores.iter_mut().enumerate() {
                        *score += row[i + 1];
                    }
                }
                for v in &mut scores {
                    *v /= rows.len() as f64;
                }
                scores
            }
        }
    }
}

/// Eval-mode output for one volume.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub logit: f64,
    pub probability: f64,
    pub trace: Option<AttentionTrace>,
}

/// Lay out a (S, H, W) volume as the graph input tensor the architecture
/// expects: (S, C, H, W) for the 2.5D and token models, (1, C, S, H, W) for
/// the 3D model. Grayscale data is replicated across C channels.
pub fn input_tensor<T: Scalar>(spec: &ModelSpec, volume: &Tensor<T>) -> Result<Tensor<T>> {
    let s = volume.shape();
    if s.len() != 3 {
        return Err(Error::shape("input_tensor", "(S, H, W)", format!("{s:?}")));
    }
    if s[0] != spec.input.n_slices || s[1] != spec.input.height || s[2] != spec.input.width {
        return Err(Error::shape(
            "input_tensor",
            format!(
                "({}, {}, {})",
                spec.input.n_slices, spec.input.height, spec.input.width
            ),
            format!("{s:?}"),
        ));
    }
    match spec.architecture {
        Architecture::I3d => {
            let c = spec.input.in_channels;
            let mut data = Vec::with_capacity(c * volume.numel());
            for _ in 0..c {
                data.extend_from_slice(volume.data());
            }
            Tensor::from_vec(&[1, c, s[0], s[1], s[2]], data)
        }
        _ => replicate_channels(volume, spec.input.in_channels),
    }
}

/// Forward dispatch on an already-inserted input node. The input layout must
/// match [`input_tensor`] for the spec's architecture.
pub fn forward_spec<T: Scalar, P: ParamSource<T>, R: Rng>(
    g: &mut Graph<T>,
    src: &mut P,
    spec: &ModelSpec,
    input: Var,
    training: bool,
    rng: &mut R,
) -> Result<(Var, TraceVars)> {
    match spec.architecture {
        Architecture::CnnBilstm => {
            let embeddings = encoder_forward(g, src, &spec.encoder, input)?;
            let (logit, weights) = bilstm_aggregate(g, src, spec, embeddings)?;
            Ok((
                logit,
                TraceVars {
                    se_weights: Some(weights),
                    cls_attention: Vec::new(),
                },
            ))
        }
        Architecture::CnnTransformer => {
            let embeddings = encoder_forward(g, src, &spec.encoder, input)?;
            let (logit, rows) = transformer_aggregate(g, src, spec, embeddings, training, rng)?;
            Ok((
                logit,
                TraceVars {
                    se_weights: None,
                    cls_attention: rows,
                },
            ))
        }
        Architecture::I3d => {
            let logit = i3d_forward(g, src, spec, input)?;
            Ok((
                logit,
                TraceVars {
                    se_weights: None,
                    cls_attention: Vec::new(),
                },
            ))
        }
        Architecture::VivitFsa => {
            let logit = vivit_fsa_forward(g, src, spec, input)?;
            Ok((
                logit,
                TraceVars {
                    se_weights: None,
                    cls_attention: Vec::new(),
                },
            ))
        }
    }
}

/// A specification together with its materialized parameters.
#[derive(Clone)]
pub struct Network<T: Scalar> {
    pub spec: ModelSpec,
    pub params: ParamSet<T>,
}

impl<T: Scalar> Network<T> {
    /// Initialize all parameters from the spec's plan. Initialization draws
    /// from per-parameter streams, so it is independent of build order.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let plan = plan_model(spec)?;
        let mut params = ParamSet::new();
        for p in &plan.params {
            let mut stream = rng::stream(seed, "init", &[name_tag(&p.name)]);
            params.add(p.name.clone(), init_tensor(&p.shape, p.init, &mut stream), true)?;
        }
        Ok(Network {
            spec: spec.clone(),
            params,
        })
    }

    /// Wrap an existing parameter set, validating names and shapes against
    /// the spec's plan.
    pub fn from_params(spec: &ModelSpec, params: ParamSet<T>) -> Result<Self> {
        let plan = plan_model(spec)?;
        if plan.params.len() != params.len() {
            return Err(Error::TransferMismatch {
                layer: "<count>".into(),
                msg: format!("expected {} tensors, got {}", plan.params.len(), params.len()),
            });
        }
        for p in &plan.params {
            let entry = params.get(&p.name).ok_or_else(|| Error::TransferMismatch {
                layer: p.name.clone(),
                msg: "missing parameter".into(),
            })?;
            if entry.value.shape() != p.shape.as_slice() {
                return Err(Error::TransferMismatch {
                    layer: p.name.clone(),
                    msg: format!("shape {:?}, expected {:?}", entry.value.shape(), p.shape),
                });
            }
        }
        Ok(Network {
            spec: spec.clone(),
            params,
        })
    }

    /// Build a training/eval graph over one volume. Returns the graph, the
    /// parameter binding, the logit node, and attention trace nodes.
    pub fn forward_volume<R: Rng>(
        &self,
        volume: &Tensor<T>,
        training: bool,
        rng: &mut R,
    ) -> Result<(Graph<T>, Binding, Var, TraceVars)> {
        let mut g = Graph::new();
        let mut binding = Binding::new();
        let input = g.leaf(input_tensor(&self.spec, volume)?);
        let (logit, trace) = {
            let mut src = BoundSource::new(&self.params, &mut binding);
            forward_spec(&mut g, &mut src, &self.spec, input, training, rng)?
        };
        Ok((g, binding, logit, trace))
    }

    /// Deterministic eval-mode prediction with attention trace.
    pub fn predict(&self, volume: &Tensor<T>) -> Result<Prediction> {
        let mut rng = throwaway_rng();
        let (g, _, logit, trace) = self.forward_volume(volume, false, &mut rng)?;
        let logit_v = g.value(logit).item().to_f64();
        if !logit_v.is_finite() {
            return Err(Error::NonFinite("model logit".into()));
        }
        let probability = 1.0 / (1.0 + (-logit_v).exp());
        let trace = extract_trace(&g, &trace);
        Ok(Prediction {
            logit: logit_v,
            probability,
            trace,
        })
    }

    /// Per-slice embeddings from the shared 2D encoder (2.5D architectures).
    pub fn encode_slices(&self, volume: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let mut binding = Binding::new();
        let input = g.leaf(replicate_channels(volume, self.spec.input.in_channels)?);
        let mut src = BoundSource::new(&self.params, &mut binding);
        let out = encoder_forward(&mut g, &mut src, &self.spec.encoder, input)?;
        Ok(g.value(out).clone())
    }

    pub fn spec_hash(&self) -> String {
        self.spec.content_hash()
    }
}

pub(crate) fn extract_trace<T: Scalar>(g: &Graph<T>, trace: &TraceVars) -> Option<AttentionTrace> {
    if let Some(w) = trace.se_weights {
        let weights = g.value(w).data().iter().map(|v| v.to_f64()).collect();
        return Some(AttentionTrace::SeWeights(weights));
    }
    if !trace.cls_attention.is_empty() {
        let rows = trace
            .cls_attention
            .iter()
            .map(|&r| g.value(r).data().iter().map(|v| v.to_f64()).collect())
            .collect();
        return Some(AttentionTrace::TokenAttention { rows });
    }
    None
}

fn name_tag(name: &str) -> u64 {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(name.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

pub(crate) fn throwaway_rng() -> ChaCha8Rng {
    rng::stream(0, "eval", &[])
}
