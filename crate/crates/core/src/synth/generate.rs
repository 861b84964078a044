//! Cohort generator with per-patient random streams.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::rng;
use crate::tensor::Tensor;

use super::{CohortParams, PatientTimeline, VolumeScan};

/// Brightness of the reference-surface line; the brightest row per column so
/// the surface can be re-detected by argmax.
const SURFACE_BRIGHTNESS: f32 = 0.92;
/// Tissue band brightness below the surface.
const BAND_BRIGHTNESS: f32 = 0.35;
/// Rows of tissue band under the surface line.
const BAND_ROWS: usize = 10;

/// Generate a cohort deterministically from `params.seed`. Patients are
/// independent (per-patient streams), so generation may run in parallel and
/// the result is identical either way.
pub fn generate_cohort(params: &CohortParams) -> Result<Vec<PatientTimeline>> {
    params.validate()?;
    let n_converters = (params.converter_fraction * params.patients as f64).round() as usize;
    let mut cohort = Vec::with_capacity(params.patients);
    for i in 0..params.patients {
        cohort.push(generate_patient(params, i, i < n_converters));
    }
    Ok(cohort)
}

fn generate_patient(p: &CohortParams, index: usize, converter: bool) -> PatientTimeline {
    let mut rng = rng::stream(p.seed, "patient", &[index as u64]);
    let (s, h, w) = (p.slices, p.height, p.width);
    let band_rows = (h / 3).clamp(2, BAND_ROWS);

    // smooth per-patient curved surface: base row plus gentle bowls along
    // slice and column axes and a random tilt
    let base = h as f64 * rng.gen_range(0.42..0.55);
    let bowl_c = h as f64 * rng.gen_range(0.04..0.10);
    let bowl_s = h as f64 * rng.gen_range(0.02..0.08);
    let tilt = h as f64 * rng.gen_range(-0.04..0.04);
    let mut surface = vec![0u32; s * w];
    for si in 0..s {
        let ds = (si as f64 / (s - 1).max(1) as f64) - 0.5;
        for c in 0..w {
            let dc = (c as f64 / (w - 1).max(1) as f64) - 0.5;
            let row = base + bowl_c * (dc * dc * 4.0) + bowl_s * (ds * ds * 4.0) + tilt * dc;
            let max_row = h.saturating_sub(band_rows + 2).max(3) as f64;
            surface[si * w + c] = row.clamp(2.0, max_row) as u32;
        }
    }

    let conversion_day = if converter {
        let last_day = (p.visit_count as i64 - 1) * p.visit_interval_days;
        let lo = p.onset_lead_days.min(last_day).max(p.visit_interval_days);
        let hi = last_day + p.onset_lead_days * 2 / 3;
        Some(rng.gen_range(lo..=hi))
    } else {
        None
    };

    // lesion geometry fixed per patient; slices confined to the central half
    // of the stack so the central preprocessing crop retains them
    let lesion_slices: Vec<usize> = if converter {
        let max_start = (3 * s / 4).saturating_sub(p.affected_slices).max(s / 4);
        let start = rng.gen_range(s / 4..=max_start);
        (start..start + p.affected_slices).collect()
    } else {
        Vec::new()
    };
    let lesion_col = rng.gen_range(w / 4..3 * w / 4);
    let lesion_depth = rng.gen_range(1..band_rows.max(2));
    let sigma_r = h as f64 * 0.06;
    let sigma_c = w as f64 * 0.08;

    let noise = Normal::new(0.0, p.noise_level.max(1e-9)).unwrap();
    let mut visits = Vec::with_capacity(p.visit_count);
    for v in 0..p.visit_count {
        let day = v as i64 * p.visit_interval_days;
        let amplitude = match conversion_day {
            Some(conv) if day < conv => {
                let gap = conv - day;
                if gap >= p.onset_lead_days {
                    0.0
                } else {
                    p.lesion_growth * (1.0 - gap as f64 / p.onset_lead_days as f64)
                }
            }
            _ => 0.0,
        };
        let drift = rng.gen_range(-0.02..0.02);
        let mut data = vec![0.0f32; s * h * w];
        for si in 0..s {
            let lesion_w = if lesion_slices.contains(&si) && amplitude > 0.0 {
                // triangular profile across the affected slices
                let pos = si - lesion_slices[0];
                let half = (p.affected_slices as f64 - 1.0) / 2.0;
                let t = if half > 0.0 {
                    1.0 - ((pos as f64 - half).abs() / (half + 0.5))
                } else {
                    1.0
                };
                amplitude * t.max(0.2)
            } else {
                0.0
            };
            for c in 0..w {
                let srow = surface[si * w + c] as usize;
                for r in 0..h {
                    let mut val = (noise.sample(&mut rng).abs() as f32).min(0.12);
                    if r == srow {
                        val = SURFACE_BRIGHTNESS + drift as f32
                            + (noise.sample(&mut rng) as f32) * 0.3;
                    } else if r > srow && r <= srow + band_rows {
                        val = BAND_BRIGHTNESS + drift as f32 + noise.sample(&mut rng) as f32;
                    }
                    if lesion_w > 0.0 && r > srow {
                        let dr = (r as f64 - (srow + lesion_depth) as f64) / sigma_r;
                        let dc = (c as f64 - lesion_col as f64) / sigma_c;
                        val += (lesion_w * (-0.5 * (dr * dr + dc * dc)).exp()) as f32;
                    }
                    // keep the surface line the per-column maximum
                    if r != srow {
                        val = val.min(SURFACE_BRIGHTNESS - 0.08);
                    }
                    data[(si * h + r) * w + c] = val.clamp(0.0, 1.0);
                }
            }
        }
        visits.push(VolumeScan {
            slices: Tensor::from_vec(&[s, h, w], data).expect("volume dims"),
            surface: surface.clone(),
            visit_day: day,
        });
    }

    PatientTimeline {
        patient_id: format!("patient_{index:04}"),
        visits,
        conversion_day,
        lesion_slices,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_params() -> CohortParams {
        CohortParams {
            patients: 6,
            visit_count: 5,
            slices: 8,
            height: 24,
            width: 24,
            affected_slices: 2,
            ..CohortParams::default()
        }
    }

    #[test]
    fn zero_converter_fraction_means_no_conversions() {
        let params = CohortParams {
            converter_fraction: 0.0,
            ..small_params()
        };
        let cohort = generate_cohort(&params).unwrap();
        assert!(cohort.iter().all(|t| t.conversion_day.is_none()));
        assert!(cohort.iter().all(|t| t.lesion_slices.is_empty()));
    }

    #[test]
    fn converter_count_matches_fraction() {
        let params = CohortParams {
            patients: 463,
            converter_fraction: 113.0 / 463.0,
            visit_count: 2,
            slices: 4,
            height: 16,
            width: 16,
            affected_slices: 1,
            ..CohortParams::default()
        };
        let cohort = generate_cohort(&params).unwrap();
        let converters = cohort.iter().filter(|t| t.is_converter()).count() as f64;
        let expect = 0.24406 * 463.0;
        assert!((converters - expect).abs() <= 1.0, "{converters} vs {expect}");
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let params = small_params();
        let a = generate_cohort(&params).unwrap();
        let b = generate_cohort(&params).unwrap();
        assert_eq!(a.len(), b.len());
        for (ta, tb) in a.iter().zip(b.iter()) {
            assert_eq!(ta.conversion_day, tb.conversion_day);
            assert_eq!(ta.lesion_slices, tb.lesion_slices);
            for (va, vb) in ta.visits.iter().zip(tb.visits.iter()) {
                assert_eq!(va.slices.data(), vb.slices.data());
                assert_eq!(va.surface, vb.surface);
            }
        }
    }

    #[test]
    fn timelines_validate_and_dims_are_constant() {
        let cohort = generate_cohort(&small_params()).unwrap();
        for t in &cohort {
            t.validate().unwrap();
        }
    }

    #[test]
    fn surface_is_brightest_row_per_column() {
        let cohort = generate_cohort(&small_params()).unwrap();
        let scan = &cohort[0].visits[0];
        let (s, h, w) = scan.dims();
        for si in 0..s {
            for c in 0..w {
                let mut best = (0usize, -1.0f32);
                for r in 0..h {
                    let v = scan.slices.data()[(si * h + r) * w + c];
                    if v > best.1 {
                        best = (r, v);
                    }
                }
                assert_eq!(best.0 as u32, scan.surface_at(si, c), "slice {si} col {c}");
            }
        }
    }

    #[test]
    fn converters_have_growing_lesion_and_pre_onset_silence() {
        let params = CohortParams {
            patients: 12,
            converter_fraction: 1.0,
            ..small_params()
        };
        let cohort = generate_cohort(&params).unwrap();
        let t = &cohort[0];
        let conv = t.conversion_day.unwrap();
        // lesion amplitude proxy: total intensity in lesion slices minus a
        // matched non-lesion slice baseline, increasing toward conversion
        let lesion_mass = |v: &VolumeScan| -> f32 {
            t.lesion_slices
                .iter()
                .map(|&si| {
                    let (_, h, w) = v.dims();
                    v.slices.data()[si * h * w..(si + 1) * h * w]
                        .iter()
                        .sum::<f32>()
                })
                .sum()
        };
        let mut masses: Vec<(i64, f32)> = t
            .visits
            .iter()
            .filter(|v| v.visit_day < conv)
            .map(|v| (conv - v.visit_day, lesion_mass(v)))
            .collect();
        masses.sort_by_key(|(gap, _)| *gap);
        if masses.len() >= 2 {
            let near = masses.first().unwrap();
            let far = masses.last().unwrap();
            if far.0 >= params.onset_lead_days && near.0 < params.onset_lead_days / 3 {
                assert!(near.1 > far.1, "lesion should grow toward conversion");
            }
        }
    }

    #[test]
    fn invalid_params_rejected() {
        let mut p = small_params();
        p.patients = 0;
        assert!(generate_cohort(&p).is_err());
        let mut p = small_params();
        p.converter_fraction = f64::NAN;
        assert!(generate_cohort(&p).is_err());
        let mut p = small_params();
        p.affected_slices = p.slices + 1;
        assert!(generate_cohort(&p).is_err());
    }
}
