//! Time-aware non-contrastive pretraining of the 2D slice encoder, and
//! weight transfer into the downstream architectures.
//!
//! Two visits of the same patient, taken at the same slice index and
//! independently augmented, are pulled together — but only down to a margin
//! that grows with the time between the visits, so representations keep a
//! notion of elapsed time. Variance and covariance regularizers on each
//! branch prevent collapse.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{dense_block, Activation};
use crate::models::encoder::encoder_forward;
use crate::models::network::{BoundSource, Network};
use crate::models::plan::{plan_encoder_2d, ModelPlan};
use crate::models::{Architecture, EncoderSpec, InputSpec, ModelSpec};
use crate::optim::{cosine_lr, LrSchedule, OptimKind, Optimizer};
use crate::params::{init_tensor, Binding, InitKind, ParamSet};
use crate::rng;
use crate::synth::{
    augment_bscan, flatten_volume, sample_visit_pair, ContrastivePolicy, PatientTimeline,
};
use crate::tensor::Tensor;

/// Variance regularizer epsilon inside the std square root.
const VAR_EPS: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TincLossConfig {
    /// Margin reached at (and beyond) `delta_t_max_days`, in embedding
    /// distance units.
    pub margin_max: f64,
    pub delta_t_max_days: f64,
    pub lambda_variance: f64,
    pub lambda_covariance: f64,
    /// Per-dimension batch standard deviation the variance hinge targets.
    pub variance_target: f64,
}

impl Default for TincLossConfig {
    fn default() -> Self {
        TincLossConfig {
            margin_max: 1.0,
            delta_t_max_days: 720.0,
            lambda_variance: 1.0,
            lambda_covariance: 1.0,
            variance_target: 1.0,
        }
    }
}

impl TincLossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("margin_max", self.margin_max),
            ("lambda_variance", self.lambda_variance),
            ("lambda_covariance", self.lambda_covariance),
            ("variance_target", self.variance_target),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        if !(self.delta_t_max_days > 0.0) {
            return Err(Error::Config("delta_t_max_days must be positive".into()));
        }
        Ok(())
    }

    /// Allowed embedding distance for a pair `delta_t` days apart.
    pub fn margin(&self, delta_t_days: f64) -> f64 {
        self.margin_max * (delta_t_days / self.delta_t_max_days).min(1.0)
    }
}

/// Loss components for inspection; the scalar graph node is `total`.
pub struct TincLossParts {
    pub total: Var,
    pub similarity: Var,
    pub variance: Var,
    pub covariance: Var,
}

/// Time-aware non-contrastive loss over paired projections z1, z2 of shape
/// (N, P) with per-pair day gaps.
///
/// similarity = mean_i relu(||z1_i - z2_i|| - margin(dt_i))
/// variance   = mean_j relu(gamma - std_j), per branch, averaged
/// covariance = sum of squared off-diagonal covariance / P, per branch,
///              averaged
pub fn tinc_loss(
    g: &mut Graph<f64>,
    z1: Var,
    z2: Var,
    delta_t_days: &[f64],
    cfg: &TincLossConfig,
) -> Result<TincLossParts> {
    cfg.validate()?;
    let s1 = g.value(z1).shape().to_vec();
    let s2 = g.value(z2).shape().to_vec();
    if s1.len() != 2 || s1 != s2 {
        return Err(Error::shape("tinc_loss", format!("{s1:?}"), format!("{s2:?}")));
    }
    let (n, p) = (s1[0], s1[1]);
    if n < 2 {
        return Err(Error::arg("tinc_loss", "need at least 2 pairs (batch variance undefined)"));
    }
    if delta_t_days.len() != n {
        return Err(Error::shape("tinc_loss", format!("{n} gaps"), format!("{}", delta_t_days.len())));
    }
    if delta_t_days.iter().any(|&d| !(d >= 0.0)) {
        return Err(Error::arg("tinc_loss", "delta_t must be >= 0"));
    }

    // time-scaled hinge on pair distances
    let diff = g.sub(z1, z2)?;
    let dist = g.row_norms(diff)?; // (N,)
    let margins: Vec<f64> = delta_t_days.iter().map(|&d| cfg.margin(d)).collect();
    let margin_leaf = g.leaf(Tensor::from_vec(&[n], margins)?);
    let excess = g.sub(dist, margin_leaf)?;
    let hinge = g.relu(excess);
    let similarity = g.mean_all(hinge);

    let mut variance_terms = Vec::new();
    let mut covariance_terms = Vec::new();
    for z in [z1, z2] {
        let col_sum = g.sum_axis(z, 0)?; // (P,)
        let col_mean = g.scale(col_sum, 1.0 / n as f64);
        let centered = g.sub_row_broadcast(z, col_mean)?;
        let sq = g.mul(centered, centered)?;
        let var_sum = g.sum_axis(sq, 0)?;
        let var = g.scale(var_sum, 1.0 / (n - 1) as f64);
        let var_eps = g.add_scalar(var, VAR_EPS);
        let std = g.sqrt(var_eps);
        let neg_std = g.scale(std, -1.0);
        let short = g.add_scalar(neg_std, cfg.variance_target);
        let hinged = g.relu(short);
        variance_terms.push(g.mean_all(hinged));

        let centered_t = g.transpose(centered)?;
        let cov_scaled = g.matmul(centered_t, centered)?; // (P, P)
        let cov = g.scale(cov_scaled, 1.0 / (n - 1) as f64);
        let off = g.sum_off_diag_sq(cov)?;
        covariance_terms.push(g.scale(off, 1.0 / p as f64));
    }
    let var_sum = g.add(variance_terms[0], variance_terms[1])?;
    let variance = g.scale(var_sum, 0.5);
    let cov_sum = g.add(covariance_terms[0], covariance_terms[1])?;
    let covariance = g.scale(cov_sum, 0.5);

    let v_weighted = g.scale(variance, cfg.lambda_variance);
    let c_weighted = g.scale(covariance, cfg.lambda_covariance);
    let partial = g.add(similarity, v_weighted)?;
    let total = g.add(partial, c_weighted)?;
    Ok(TincLossParts {
        total,
        similarity,
        variance,
        covariance,
    })
}

/// Pretraining settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub tinc: TincLossConfig,
    pub policy: ContrastivePolicy,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Projector width cap: P = min(4 * D, cap).
    pub projector_cap: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            tinc: TincLossConfig::default(),
            policy: ContrastivePolicy::default(),
            epochs: 10,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 1e-6,
            projector_cap: 256,
            seed: 0,
        }
    }
}

/// Output of a pretraining run: encoder weights (projector discarded), the
/// per-epoch loss history, and the resolved configuration for provenance.
pub struct PretrainRun {
    pub encoder: ParamSet<f64>,
    pub loss_history: Vec<f64>,
    pub config: PretrainConfig,
}

/// Geometry the pretraining encoder operates at: single flattened B-scans at
/// the model input resolution.
fn bscan_input(input: &InputSpec) -> InputSpec {
    InputSpec {
        n_slices: 1,
        ..*input
    }
}

/// Pretrain the slice encoder on unlabeled visit pairs.
///
/// Per sampled patient, two distinct visits are drawn and the same random
/// B-scan index is read from both (the pair differs by time and
/// augmentation, not anatomy); each side is augmented with the contrastive
/// policy, encoded, projected, L2-normalized, and scored with [`tinc_loss`].
pub fn pretrain_encoder(
    cohort: &[PatientTimeline],
    input: &InputSpec,
    encoder: &EncoderSpec,
    cfg: &PretrainConfig,
) -> Result<PretrainRun> {
    cfg.tinc.validate()?;
    if cfg.batch_size < 2 || cfg.epochs == 0 {
        return Err(Error::Config("pretrain needs batch_size >= 2 and epochs >= 1".into()));
    }
    let eligible: Vec<&PatientTimeline> =
        cohort.iter().filter(|t| t.visits.len() >= 2).collect();
    if eligible.len() < 2 {
        return Err(Error::Config(
            "pretraining needs at least two patients with two or more visits".into(),
        ));
    }
    let d = encoder.out_dim();
    let proj_dim = (4 * d).min(cfg.projector_cap);

    // parameter set: encoder plan + projection head
    let mut plan = ModelPlan::default();
    plan_encoder_2d(&mut plan, &bscan_input(input), encoder, 1);
    let mut params: ParamSet<f64> = ParamSet::new();
    for p in &plan.params {
        let mut stream = rng::stream(cfg.seed, "pretrain_init", &[name_tag(&p.name)]);
        params.add(p.name.clone(), init_tensor(&p.shape, p.init, &mut stream), true)?;
    }
    for (name, shape, fan_in) in [
        ("projector.fc1.weight", vec![d, proj_dim], d),
        ("projector.fc2.weight", vec![proj_dim, proj_dim], proj_dim),
    ] {
        let mut stream = rng::stream(cfg.seed, "pretrain_init", &[name_tag(name)]);
        params.add(
            name,
            init_tensor(&shape, InitKind::HeNormal { fan_in }, &mut stream),
            true,
        )?;
    }
    params.add("projector.fc1.bias", Tensor::zeros(&[proj_dim]), true)?;
    params.add("projector.fc2.bias", Tensor::zeros(&[proj_dim]), true)?;

    let mut optimizer = Optimizer::new(OptimKind::adam(), cfg.lr, cfg.weight_decay, &params);
    let steps_per_epoch = eligible.len().div_ceil(cfg.batch_size).max(1);
    let schedule = LrSchedule::cosine(cfg.lr, (cfg.epochs * steps_per_epoch) as u64)?;

    let flatten_row = input.height / 2;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step: u64 = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..eligible.len()).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng::stream(cfg.seed, "pretrain_shuffle", &[epoch as u64]));
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue; // batch variance needs at least two pairs
            }
            let mut side_a = Vec::with_capacity(chunk.len());
            let mut side_b = Vec::with_capacity(chunk.len());
            let mut gaps = Vec::with_capacity(chunk.len());
            for (bi, &pi) in chunk.iter().enumerate() {
                let t = eligible[pi];
                let mut srng = rng::stream(
                    cfg.seed,
                    "pretrain_sample",
                    &[epoch as u64, bi as u64, pi as u64],
                );
                let (va, vb, dt) = sample_visit_pair(t, &mut srng)?;
                use rand::Rng;
                let (s, _, _) = va.dims();
                let slice_ix = srng.gen_range(0..s);
                side_a.push(prepare_bscan(va, slice_ix, flatten_row, input, cfg, &mut srng)?);
                side_b.push(prepare_bscan(vb, slice_ix, flatten_row, input, cfg, &mut srng)?);
                gaps.push(dt as f64);
            }
            let mut g: Graph<f64> = Graph::new();
            let mut binding = Binding::new();
            let (z1, z2) = {
                let mut src = BoundSource::new(&params, &mut binding);
                let z1 = embed_batch(&mut g, &mut src, encoder, &side_a, d, proj_dim)?;
                let z2 = embed_batch(&mut g, &mut src, encoder, &side_b, d, proj_dim)?;
                (z1, z2)
            };
            let parts = tinc_loss(&mut g, z1, z2, &gaps, &cfg.tinc)?;
            let loss_value = g.value(parts.total).item();
            if !loss_value.is_finite() {
                return Err(Error::NonFinite("pretraining loss".into()));
            }
            let grads = g.backward(parts.total)?;
            params.accumulate(&binding, &grads, 1.0);
            optimizer.set_lr(cosine_lr(&schedule, step));
            optimizer.step(&mut params)?;
            step += 1;
            epoch_loss += loss_value;
            batches += 1;
        }
        history.push(epoch_loss / batches.max(1) as f64);
    }

    let mut encoder_only = ParamSet::new();
    for e in params.entries() {
        if e.name.starts_with("encoder.") {
            encoder_only.add(e.name.clone(), e.value.clone(), true)?;
        }
    }
    Ok(PretrainRun {
        encoder: encoder_only,
        loss_history: history,
        config: cfg.clone(),
    })
}

fn prepare_bscan(
    scan: &crate::synth::VolumeScan,
    slice_ix: usize,
    flatten_row: usize,
    input: &InputSpec,
    cfg: &PretrainConfig,
    rng: &mut impl rand::Rng,
) -> Result<Tensor<f64>> {
    let flat = flatten_volume(scan, flatten_row.min(scan.dims().1 - 1))?;
    let (_, h, w) = flat.dims();
    let plane = flat.slices.data()[slice_ix * h * w..(slice_ix + 1) * h * w].to_vec();
    let bscan = Tensor::from_vec(&[h, w], plane)?;
    // resize to the encoder input resolution through the volume path
    let as_volume = crate::synth::VolumeScan {
        slices: bscan.reshaped(&[1, h, w])?,
        surface: vec![flatten_row.min(h - 1) as u32; w],
        visit_day: scan.visit_day,
    };
    let resized = crate::synth::preprocess_scan(&as_volume, 1, input.height, input.width)?;
    let plane2 = Tensor::from_vec(
        &[input.height, input.width],
        resized.data().to_vec(),
    )?;
    let augmented = augment_bscan(&plane2, rng, &cfg.policy)?;
    // (1, C, H, W) in f64
    let mut data = Vec::with_capacity(input.in_channels * augmented.numel());
    for _ in 0..input.in_channels {
        data.extend(augmented.data().iter().map(|&v| v as f64));
    }
    Tensor::from_vec(&[1, input.in_channels, input.height, input.width], data)
}

fn embed_batch<P: ParamSource64>(
    g: &mut Graph<f64>,
    src: &mut P,
    encoder: &EncoderSpec,
    bscans: &[Tensor<f64>],
    d: usize,
    proj_dim: usize,
) -> Result<Var> {
    let batch: Vec<Var> = bscans.iter().map(|b| g.leaf(b.clone())).collect();
    let stacked = g.concat(&batch, 0)?; // (N, C, H, W)
    let embeddings = encoder_forward(g, src, encoder, stacked)?; // (N, D)
    let fc1_w = src.var(g, "projector.fc1.weight")?;
    let fc1_b = src.var(g, "projector.fc1.bias")?;
    let hid = dense_block(g, embeddings, fc1_w, fc1_b, Activation::Relu)?;
    let fc2_w = src.var(g, "projector.fc2.weight")?;
    let fc2_b = src.var(g, "projector.fc2.bias")?;
    let z = dense_block(g, hid, fc2_w, fc2_b, Activation::None)?; // (N, P)
    // L2-normalize rows so the margin lives on the unit sphere
    let norms = g.row_norms(z)?;
    let safe = g.add_scalar(norms, 1e-12);
    let inv = g.recip(safe);
    let _ = (d, proj_dim);
    g.scale_rows(z, inv)
}

/// Shorthand bound: `ParamSource` at f64.
trait ParamSource64: crate::models::network::ParamSource<f64> {}
impl<P: crate::models::network::ParamSource<f64>> ParamSource64 for P {}

/// How encoder weights behave after transfer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    Frozen,
    EndToEnd,
}

/// Initialize a network from a pretrained 2D encoder: copied verbatim for
/// the 2.5D architectures, kernel-inflated for the 3D one; aggregator and
/// head parameters are freshly initialized from `seed`.
pub fn transfer_weights(
    encoder_ckpt: &ParamSet<f64>,
    target: &ModelSpec,
    mode: EncoderMode,
    seed: u64,
) -> Result<Network<f64>> {
    if target.architecture == Architecture::VivitFsa {
        return Err(Error::Config(
            "vivit_fsa has no 2D encoder to transfer into".into(),
        ));
    }
    let mut net = Network::build(target, seed)?;
    let plan = plan_model(target)?;
    for planned in &plan.params {
        if !planned.name.starts_with("encoder.") {
            continue;
        }
        let source = encoder_ckpt
            .get(&planned.name)
            .ok_or_else(|| Error::TransferMismatch {
                layer: planned.name.clone(),
                msg: "missing from checkpoint".into(),
            })?;
        let value = if planned.shape.len() == 5 {
            // inflation path: 2D kernel -> replicated/scaled 3D kernel
            let depth = planned.shape[2];
            let inflated = crate::models::i3d::inflate_kernel(&source.value, depth)?;
            if inflated.shape() != planned.shape.as_slice() {
                return Err(Error::TransferMismatch {
                    layer: planned.name.clone(),
                    msg: format!(
                        "inflated shape {:?}, target {:?}",
                        inflated.shape(),
                        planned.shape
                    ),
                });
            }
            inflated
        } else {
            if source.value.shape() != planned.shape.as_slice() {
                return Err(Error::TransferMismatch {
                    layer: planned.name.clone(),
                    msg: format!(
                        "checkpoint shape {:?}, target {:?}",
                        source.value.shape(),
                        planned.shape
                    ),
                });
            }
            source.value.clone()
        };
        net.params.get_mut(&planned.name).expect("planned param exists").value = value;
    }
    if mode == EncoderMode::Frozen {
        net.params.set_trainable_prefix("encoder.", false);
    }
    Ok(net)
}

fn name_tag(name: &str) -> u64 {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(name.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

use crate::models::plan::plan_model;
use crate::models::network::ParamSource as _;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Preset;

    fn z(g: &mut Graph<f64>, rows: &[&[f64]]) -> Var {
        let n = rows.len();
        let p = rows[0].len();
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        g.leaf(Tensor::from_vec(&[n, p], data).unwrap())
    }

    #[test]
    fn identical_branches_zero_similarity() {
        let mut g = Graph::new();
        let z1 = z(&mut g, &[&[0.5, 0.2], &[-0.3, 0.9]]);
        let z2 = z(&mut g, &[&[0.5, 0.2], &[-0.3, 0.9]]);
        let parts = tinc_loss(&mut g, z1, z2, &[0.0, 400.0], &TincLossConfig::default()).unwrap();
        assert_eq!(g.value(parts.similarity).item(), 0.0);
        // total is the regularizers alone
        let expect = g.value(parts.variance).item() * 1.0 + g.value(parts.covariance).item() * 1.0;
        assert!((g.value(parts.total).item() - expect).abs() < 1e-12);
        assert!(g.value(parts.total).item() >= 0.0);
    }

    #[test]
    fn margin_formula_thresholds() {
        let cfg = TincLossConfig::default();
        // distance m_max/2 is inside the margin for dt >= dt_max/2
        let mk = |dt: f64| {
            let mut g = Graph::new();
            let z1 = z(&mut g, &[&[0.5, 0.0], &[0.0, 0.0]]);
            let z2 = z(&mut g, &[&[0.0, 0.0], &[0.0, 0.0]]);
            // first pair distance 0.5 = margin_max/2; second pair 0
            let parts = tinc_loss(&mut g, z1, z2, &[dt, dt], &cfg).unwrap();
            let mut gg = Graph::new();
            let _ = gg;
            let v = {
                let graph = g;
                graph.value(parts.similarity).item()
            };
            v
        };
        assert_eq!(mk(cfg.delta_t_max_days / 2.0), 0.0);
        assert_eq!(mk(cfg.delta_t_max_days), 0.0);
        assert!(mk(1.0) > 0.0);
        // non-increasing in dt
        let a = mk(10.0);
        let b = mk(100.0);
        let c = mk(500.0);
        assert!(a >= b && b >= c);
    }

    #[test]
    fn loss_rejects_tiny_batches_and_negative_gaps() {
        let mut g = Graph::new();
        let z1 = z(&mut g, &[&[0.1, 0.2]]);
        let z2 = z(&mut g, &[&[0.1, 0.2]]);
        assert!(tinc_loss(&mut g, z1, z2, &[5.0], &TincLossConfig::default()).is_err());

        let mut g = Graph::new();
        let z1 = z(&mut g, &[&[0.1, 0.2], &[0.0, 0.1]]);
        let z2 = z(&mut g, &[&[0.1, 0.2], &[0.0, 0.1]]);
        assert!(tinc_loss(&mut g, z1, z2, &[5.0, -1.0], &TincLossConfig::default()).is_err());
    }

    #[test]
    fn loss_gradient_matches_finite_differences_away_from_kinks() {
        use crate::gradcheck::{grad_check, DEFAULT_FD_STEP};
        let cfg = TincLossConfig {
            margin_max: 0.3,
            delta_t_max_days: 100.0,
            ..TincLossConfig::default()
        };
        let z1 = Tensor::from_vec(&[3, 4], vec![
            0.8, -0.2, 0.4, 0.1, //
            -0.5, 0.3, 0.9, -0.7, //
            0.2, 0.6, -0.4, 0.5,
        ])
        .unwrap();
        let z2 = Tensor::from_vec(&[3, 4], vec![
            -0.1, 0.5, -0.3, 0.8, //
            0.4, -0.6, 0.2, 0.3, //
            -0.8, 0.1, 0.7, -0.2,
        ])
        .unwrap();
        let report = grad_check(&[z1, z2], DEFAULT_FD_STEP, |g, vars| {
            let parts = tinc_loss(g, vars[0], vars[1], &[10.0, 50.0, 200.0], &cfg)?;
            Ok(parts.total)
        })
        .unwrap();
        assert!(report.max_rel_err <= 1e-5, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn transfer_roundtrip_is_bitexact_for_2p5d() {
        let spec = tiny_bilstm_spec();
        // fake "pretrained" encoder: build a network and take its encoder
        let donor = Network::<f64>::build(&spec, 99).unwrap();
        let mut encoder = ParamSet::new();
        for e in donor.params.entries() {
            if e.name.starts_with("encoder.") {
                encoder.add(e.name.clone(), e.value.clone(), true).unwrap();
            }
        }
        let net = transfer_weights(&encoder, &spec, EncoderMode::EndToEnd, 1).unwrap();
        for e in net.params.entries() {
            if e.name.starts_with("encoder.") {
                assert_eq!(
                    e.value.data(),
                    encoder.get(&e.name).unwrap().value.data(),
                    "{}",
                    e.name
                );
                assert!(e.trainable);
            }
        }
        let frozen = transfer_weights(&encoder, &spec, EncoderMode::Frozen, 1).unwrap();
        for e in frozen.params.entries() {
            if e.name.starts_with("encoder.") {
                assert!(!e.trainable);
            } else {
                assert!(e.trainable);
            }
        }
    }

    #[test]
    fn transfer_mismatch_names_offending_layer() {
        let spec = tiny_bilstm_spec();
        let donor = Network::<f64>::build(&spec, 99).unwrap();
        let mut encoder = ParamSet::new();
        for e in donor.params.entries() {
            if e.name.starts_with("encoder.") {
                // corrupt the stem shape
                let v = if e.name == "encoder.stem.conv.weight" {
                    Tensor::zeros(&[3, 1, 3, 3])
                } else {
                    e.value.clone()
                };
                encoder.add(e.name.clone(), v, true).unwrap();
            }
        }
        let err = transfer_weights(&encoder, &spec, EncoderMode::EndToEnd, 1).unwrap_err();
        match err {
            Error::TransferMismatch { layer, .. } => {
                assert_eq!(layer, "encoder.stem.conv.weight")
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn transfer_inflates_kernels_for_i3d_and_depth_sums_recover() {
        let spec2d = tiny_bilstm_spec();
        let donor = Network::<f64>::build(&spec2d, 42).unwrap();
        let mut encoder = ParamSet::new();
        for e in donor.params.entries() {
            if e.name.starts_with("encoder.") {
                encoder.add(e.name.clone(), e.value.clone(), true).unwrap();
            }
        }
        let mut spec3d = spec2d.clone();
        spec3d.architecture = Architecture::I3d;
        spec3d.aggregator = crate::models::AggregatorSpec::I3d {
            stem_depth: 5,
            bottleneck_depth: 3,
            temporal_pad: crate::models::TemporalPad::Same,
        };
        let net = transfer_weights(&encoder, &spec3d, EncoderMode::EndToEnd, 7).unwrap();
        for e in net.params.entries() {
            if e.name.starts_with("encoder.") && e.value.rank() == 5 {
                let back = crate::models::i3d::depth_sum(&e.value).unwrap();
                let src = &encoder.get(&e.name).unwrap().value;
                assert_eq!(back.data(), src.data(), "{}", e.name);
            }
            if e.name.ends_with(".gamma") || e.name.ends_with(".beta") {
                if let Some(src) = encoder.get(&e.name) {
                    assert_eq!(e.value.data(), src.value.data());
                }
            }
        }
    }

    fn tiny_bilstm_spec() -> ModelSpec {
        let mut spec = ModelSpec::preset(Architecture::CnnBilstm, Preset::DeskScale);
        spec.input.n_slices = 4;
        spec.input.height = 16;
        spec.input.width = 16;
        spec.encoder.stem_width = 4;
        spec.encoder.stages = vec![
            crate::models::StageSpec { base_width: 2, blocks: 1, stride: 1 },
            crate::models::StageSpec { base_width: 2, blocks: 1, stride: 2 },
        ];
        if let crate::models::AggregatorSpec::Bilstm { ref mut hidden, .. } = spec.aggregator {
            *hidden = 4;
        }
        spec
    }
}
