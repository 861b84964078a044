//! Labeling, flattening, resizing, and augmentation.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{LabelledExample, PatientTimeline, VolumeScan, DEFAULT_WINDOW_DAYS};

/// Label for one retained (pre-conversion) visit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LabelledScan {
    pub visit_index: usize,
    pub visit_day: i64,
    pub label: bool,
}

/// Apply the labeling rule: a scan at day `d` is positive iff conversion
/// happens within `(d, d + window_days]`; scans at or after the conversion
/// day are excluded entirely.
pub fn label_scans(timeline: &PatientTimeline, window_days: i64) -> Vec<LabelledScan> {
    timeline
        .visits
        .iter()
        .enumerate()
        .filter_map(|(i, v)| {
            let label = match timeline.conversion_day {
                Some(conv) => {
                    if v.visit_day >= conv {
                        return None;
                    }
                    conv - v.visit_day <= window_days
                }
                None => false,
            };
            Some(LabelledScan {
                visit_index: i,
                visit_day: v.visit_day,
                label,
            })
        })
        .collect()
}

/// Shift every column vertically so the reference surface lands on
/// `target_row`, zero-filling vacated rows. The output surface map is
/// constant at `target_row`.
pub fn flatten_volume(v: &VolumeScan, target_row: usize) -> Result<VolumeScan> {
    let (s, h, w) = v.dims();
    if target_row >= h {
        return Err(Error::arg(
            "flatten_volume",
            format!("target_row {target_row} outside [0, {h})"),
        ));
    }
    if v.surface.len() != s * w {
        return Err(Error::CohortFormat("surface map size mismatch".into()));
    }
    let src = v.slices.data();
    let mut out = vec![0.0f32; s * h * w];
    for si in 0..s {
        for c in 0..w {
            let shift = v.surface[si * w + c] as isize - target_row as isize;
            for r in 0..h {
                let sr = r as isize + shift;
                if sr >= 0 && (sr as usize) < h {
                    out[(si * h + r) * w + c] = src[(si * h + sr as usize) * w + c];
                }
            }
        }
    }
    Ok(VolumeScan {
        slices: Tensor::from_vec(&[s, h, w], out)?,
        surface: vec![target_row as u32; s * w],
        visit_day: v.visit_day,
    })
}

/// Bilinear resample of one (h, w) plane to (oh, ow) with half-pixel centers;
/// an identity when the sizes match.
fn resize_plane(src: &[f32], h: usize, w: usize, oh: usize, ow: usize, out: &mut [f32]) {
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    for oy in 0..oh {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = (fy - y0 as f64) as f32;
        for ox in 0..ow {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = (fx - x0 as f64) as f32;
            let a = src[y0 * w + x0];
            let b = src[y0 * w + x1];
            let c = src[y1 * w + x0];
            let d = src[y1 * w + x1];
            out[oy * ow + ox] =
                a * (1.0 - wy) * (1.0 - wx) + b * (1.0 - wy) * wx + c * wy * (1.0 - wx) + d * wy * wx;
        }
    }
}

/// Select the contiguous central block of `n_slices`, resize each slice to
/// (out_h, out_w), and min-max scale the whole volume to [0,1]. A degenerate
/// intensity range maps to all zeros.
pub fn preprocess_scan(
    v: &VolumeScan,
    n_slices: usize,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<f32>> {
    let (s, h, w) = v.dims();
    if n_slices == 0 || n_slices > s {
        return Err(Error::arg(
            "preprocess_scan",
            format!("n_slices {n_slices} outside [1, {s}]"),
        ));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::arg("preprocess_scan", "output dims must be positive"));
    }
    let start = central_block_start(s, n_slices);
    let mut out = vec![0.0f32; n_slices * out_h * out_w];
    for (i, si) in (start..start + n_slices).enumerate() {
        let plane = &v.slices.data()[si * h * w..(si + 1) * h * w];
        resize_plane(plane, h, w, out_h, out_w, &mut out[i * out_h * out_w..(i + 1) * out_h * out_w]);
    }
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &x in &out {
        lo = lo.min(x);
        hi = hi.max(x);
    }
    let range = hi - lo;
    if range > 0.0 {
        for x in &mut out {
            *x = (*x - lo) / range;
        }
    } else {
        out.iter_mut().for_each(|x| *x = 0.0);
    }
    Tensor::from_vec(&[n_slices, out_h, out_w], out)
}

/// First index of the contiguous central block of length `n` in `s` slices.
pub fn central_block_start(s: usize, n: usize) -> usize {
    (s - n) / 2
}

/// Preprocessing settings for the labeled pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PreprocessParams {
    pub n_slices: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub flatten_target_row: usize,
}

impl PreprocessParams {
    /// Matches the desk-scale model input (16 slices of 32x32) for the
    /// default generator dims (20 x 48 x 48).
    pub fn desk() -> Self {
        PreprocessParams {
            n_slices: 16,
            out_h: 32,
            out_w: 32,
            flatten_target_row: 24,
        }
    }
}

/// Full labeled pipeline for one timeline: label, flatten, crop and resize.
/// Lesion slice indices are remapped into the preprocessed slice space for
/// positive examples.
pub fn labelled_examples(
    timeline: &PatientTimeline,
    window_days: i64,
    pp: &PreprocessParams,
) -> Result<Vec<LabelledExample>> {
    let mut out = Vec::new();
    let (s, _, _) = match timeline.visits.first() {
        Some(v) => v.dims(),
        None => return Ok(out),
    };
    let start = central_block_start(s, pp.n_slices.min(s));
    for ls in label_scans(timeline, window_days) {
        let scan = &timeline.visits[ls.visit_index];
        let flat = flatten_volume(scan, pp.flatten_target_row)?;
        let volume = preprocess_scan(&flat, pp.n_slices, pp.out_h, pp.out_w)?;
        let lesion_slices = if ls.label {
            timeline
                .lesion_slices
                .iter()
                .filter_map(|&raw| raw.checked_sub(start).filter(|&i| i < pp.n_slices))
                .collect()
        } else {
            Vec::new()
        };
        out.push(LabelledExample {
            patient_id: timeline.patient_id.clone(),
            visit_day: ls.visit_day,
            volume,
            label: ls.label,
            lesion_slices,
        });
    }
    Ok(out)
}

pub fn default_window_days() -> i64 {
    DEFAULT_WINDOW_DAYS
}

/// Volume-level augmentation policy: one transform draw applies to every
/// slice of the volume.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AugmentPolicy {
    /// Maximum integer translation as a fraction of width/height.
    pub max_translate_frac: f64,
    pub max_rotate_deg: f64,
    pub flip_prob: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            max_translate_frac: 0.05,
            max_rotate_deg: 5.0,
            flip_prob: 0.5,
        }
    }
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        AugmentPolicy {
            max_translate_frac: 0.0,
            max_rotate_deg: 0.0,
            flip_prob: 0.0,
        }
    }
}

fn rotate_plane(src: &[f32], h: usize, w: usize, theta_deg: f64, out: &mut [f32]) {
    let theta = theta_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    for r in 0..h {
        for c in 0..w {
            let dy = r as f64 - cy;
            let dx = c as f64 - cx;
            // inverse rotation of the output grid into the source
            let sy = cy + cos * dy + sin * dx;
            let sx = cx - sin * dy + cos * dx;
            let v = if sy >= 0.0 && sy <= (h - 1) as f64 && sx >= 0.0 && sx <= (w - 1) as f64 {
                let y0 = sy.floor() as usize;
                let x0 = sx.floor() as usize;
                let y1 = (y0 + 1).min(h - 1);
                let x1 = (x0 + 1).min(w - 1);
                let wy = (sy - y0 as f64) as f32;
                let wx = (sx - x0 as f64) as f32;
                src[y0 * w + x0] * (1.0 - wy) * (1.0 - wx)
                    + src[y0 * w + x1] * (1.0 - wy) * wx
                    + src[y1 * w + x0] * wy * (1.0 - wx)
                    + src[y1 * w + x1] * wy * wx
            } else {
                0.0
            };
            out[r * w + c] = v;
        }
    }
}

fn shift_plane(src: &[f32], h: usize, w: usize, dy: isize, dx: isize, out: &mut [f32]) {
    for r in 0..h {
        for c in 0..w {
            let sr = r as isize - dy;
            let sc = c as isize - dx;
            out[r * w + c] = if sr >= 0 && (sr as usize) < h && sc >= 0 && (sc as usize) < w {
                src[sr as usize * w + sc as usize]
            } else {
                0.0
            };
        }
    }
}

fn hflip_plane(src: &[f32], h: usize, w: usize, out: &mut [f32]) {
    for r in 0..h {
        for c in 0..w {
            out[r * w + c] = src[r * w + (w - 1 - c)];
        }
    }
}

/// Volume-consistent augmentation: rotation, integer translation, and
/// horizontal flip, each drawn once and applied to every slice.
/// Deterministic given the RNG state; output shape is unchanged.
pub fn augment_scan(
    t: &Tensor<f32>,
    rng: &mut impl Rng,
    policy: &AugmentPolicy,
) -> Result<Tensor<f32>> {
    let s = t.shape();
    if s.len() != 3 {
        return Err(Error::shape("augment_scan", "(S, H, W)", format!("{s:?}")));
    }
    let (n, h, w) = (s[0], s[1], s[2]);
    let theta = if policy.max_rotate_deg > 0.0 {
        rng.gen_range(-policy.max_rotate_deg..=policy.max_rotate_deg)
    } else {
        0.0
    };
    let (ty, tx) = {
        let my = (policy.max_translate_frac * h as f64).round() as isize;
        let mx = (policy.max_translate_frac * w as f64).round() as isize;
        (
            if my > 0 { rng.gen_range(-my..=my) } else { 0 },
            if mx > 0 { rng.gen_range(-mx..=mx) } else { 0 },
        )
    };
    let flip = policy.flip_prob > 0.0 && rng.gen::<f64>() < policy.flip_prob;

    let mut data = t.data().to_vec();
    let mut scratch = vec![0.0f32; h * w];
    for si in 0..n {
        let plane = &mut data[si * h * w..(si + 1) * h * w];
        if theta != 0.0 {
            rotate_plane(plane, h, w, theta, &mut scratch);
            plane.copy_from_slice(&scratch);
        }
        if ty != 0 || tx != 0 {
            shift_plane(plane, h, w, ty, tx, &mut scratch);
            plane.copy_from_slice(&scratch);
        }
        if flip {
            hflip_plane(plane, h, w, &mut scratch);
            plane.copy_from_slice(&scratch);
        }
    }
    Tensor::from_vec(&[n, h, w], data)
}

/// Augmentation policy for pretraining pairs: geometry-heavy,
/// intensity-light transformations of single slices.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ContrastivePolicy {
    /// Per-axis crop scale range (fraction of the extent kept).
    pub crop_scale_min: f64,
    pub flip_prob: f64,
    pub max_rotate_deg: f64,
    /// Brightness shift and contrast factor bound (+-).
    pub intensity_jitter: f64,
    pub noise_sigma_max: f64,
}

impl Default for ContrastivePolicy {
    fn default() -> Self {
        ContrastivePolicy {
            crop_scale_min: 0.6,
            flip_prob: 0.5,
            max_rotate_deg: 10.0,
            intensity_jitter: 0.2,
            noise_sigma_max: 0.05,
        }
    }
}

/// Augment a single (H, W) slice for the pretraining pipeline: random
/// resized crop, horizontal flip, small rotation, brightness/contrast
/// jitter, and additive Gaussian noise. Output stays in [0,1].
pub fn augment_bscan(
    t: &Tensor<f32>,
    rng: &mut impl Rng,
    policy: &ContrastivePolicy,
) -> Result<Tensor<f32>> {
    let s = t.shape();
    if s.len() != 2 {
        return Err(Error::shape("augment_bscan", "(H, W)", format!("{s:?}")));
    }
    let (h, w) = (s[0], s[1]);
    let mut plane = t.data().to_vec();
    let mut scratch = vec![0.0f32; h * w];

    // random resized crop: pick a sub-window covering crop_scale..1 of the
    // area per axis, then resize back
    let smin = policy.crop_scale_min.sqrt();
    let fy = rng.gen_range(smin..=1.0);
    let fx = rng.gen_range(smin..=1.0);
    let ch = ((h as f64 * fy).round() as usize).clamp(2, h);
    let cw = ((w as f64 * fx).round() as usize).clamp(2, w);
    let oy = rng.gen_range(0..=(h - ch));
    let ox = rng.gen_range(0..=(w - cw));
    if ch != h || cw != w {
        let mut crop = vec![0.0f32; ch * cw];
        for r in 0..ch {
            crop[r * cw..(r + 1) * cw]
                .copy_from_slice(&plane[(oy + r) * w + ox..(oy + r) * w + ox + cw]);
        }
        resize_plane(&crop, ch, cw, h, w, &mut scratch);
        plane.copy_from_slice(&scratch);
    }

    if policy.max_rotate_deg > 0.0 {
        let theta = rng.gen_range(-policy.max_rotate_deg..=policy.max_rotate_deg);
        rotate_plane(&plane, h, w, theta, &mut scratch);
        plane.copy_from_slice(&scratch);
    }
    if policy.flip_prob > 0.0 && rng.gen::<f64>() < policy.flip_prob {
        hflip_plane(&plane, h, w, &mut scratch);
        plane.copy_from_slice(&scratch);
    }

    let contrast = 1.0 + rng.gen_range(-policy.intensity_jitter..=policy.intensity_jitter);
    let brightness = rng.gen_range(-policy.intensity_jitter..=policy.intensity_jitter);
    let sigma = rng.gen_range(0.0..=policy.noise_sigma_max.max(f64::MIN_POSITIVE));
    let noise = Normal::new(0.0, sigma.max(1e-12)).unwrap();
    for v in &mut plane {
        let jittered = contrast * (*v as f64 - 0.5) + 0.5 + brightness;
        *v = (jittered + noise.sample(rng)).clamp(0.0, 1.0) as f32;
    }
    Tensor::from_vec(&[h, w], plane)
}

/// Sample two distinct visits uniformly without replacement; returns the
/// scans and their absolute day difference (always positive).
pub fn sample_visit_pair<'a>(
    timeline: &'a PatientTimeline,
    rng: &mut impl Rng,
) -> Result<(&'a VolumeScan, &'a VolumeScan, i64)> {
    let n = timeline.visits.len();
    if n < 2 {
        return Err(Error::arg(
            "sample_visit_pair",
            format!("{} has {n} visit(s), need at least 2", timeline.patient_id),
        ));
    }
    let i = rng.gen_range(0..n);
    let mut j = rng.gen_range(0..n - 1);
    if j >= i {
        j += 1;
    }
    let (a, b) = (&timeline.visits[i], &timeline.visits[j]);
    Ok((a, b, (a.visit_day - b.visit_day).abs()))
}
