//! On-disk cohort format.
//!
//! ```text
//! <cohort>/cohort.json                  manifest: format version, seed,
//!                                       params, patient directory names
//! <cohort>/<patient>/patient.json       id, conversion day, lesion slices
//! <cohort>/<patient>/visit_###.json     dims, visit day, conversion day,
//!                                       surface map (S rows of W entries)
//! <cohort>/<patient>/visit_###.raw      S*H*W little-endian f32 intensities,
//!                                       row-major (slice, row, col)
//! ```
//!
//! Everything is deterministic for a fixed cohort, so rerunning generation
//! with the same seed produces byte-identical directories.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{CohortParams, PatientTimeline, VolumeScan};

pub const COHORT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CohortManifest {
    pub format_version: u32,
    pub seed: u64,
    pub params: CohortParams,
    pub patients: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct PatientMeta {
    patient_id: String,
    conversion_day: Option<i64>,
    lesion_slices: Vec<usize>,
    visit_count: usize,
}

#[derive(Serialize, Deserialize)]
struct VisitMeta {
    dims: [usize; 3],
    visit_day: i64,
    conversion_day: Option<i64>,
    surface: Vec<Vec<u32>>,
}

pub fn save_cohort(dir: &Path, cohort: &[PatientTimeline], params: &CohortParams) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = CohortManifest {
        format_version: COHORT_FORMAT_VERSION,
        seed: params.seed,
        params: params.clone(),
        patients: cohort.iter().map(|p| p.patient_id.clone()).collect(),
    };
    write_json(&dir.join("cohort.json"), &manifest)?;
    for patient in cohort {
        let pdir = dir.join(&patient.patient_id);
        fs::create_dir_all(&pdir)?;
        write_json(
            &pdir.join("patient.json"),
            &PatientMeta {
                patient_id: patient.patient_id.clone(),
                conversion_day: patient.conversion_day,
                lesion_slices: patient.lesion_slices.clone(),
                visit_count: patient.visits.len(),
            },
        )?;
        for (i, visit) in patient.visits.iter().enumerate() {
            let (s, h, w) = visit.dims();
            let meta = VisitMeta {
                dims: [s, h, w],
                visit_day: visit.visit_day,
                conversion_day: patient.conversion_day,
                surface: (0..s)
                    .map(|si| visit.surface[si * w..(si + 1) * w].to_vec())
                    .collect(),
            };
            write_json(&pdir.join(format!("visit_{i:03}.json")), &meta)?;
            let mut bytes = Vec::with_capacity(visit.slices.numel() * 4);
            for &v in visit.slices.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            fs::File::create(pdir.join(format!("visit_{i:03}.raw")))?.write_all(&bytes)?;
        }
    }
    Ok(())
}

pub fn load_cohort(dir: &Path) -> Result<(Vec<PatientTimeline>, CohortManifest)> {
    let manifest: CohortManifest = read_json(&dir.join("cohort.json"))?;
    if manifest.format_version != COHORT_FORMAT_VERSION {
        return Err(Error::CohortFormat(format!(
            "unsupported cohort format version {}",
            manifest.format_version
        )));
    }
    let mut cohort = Vec::with_capacity(manifest.patients.len());
    for id in &manifest.patients {
        let pdir = dir.join(id);
        let meta: PatientMeta = read_json(&pdir.join("patient.json"))?;
        let mut visits = Vec::with_capacity(meta.visit_count);
        for i in 0..meta.visit_count {
            let vmeta: VisitMeta = read_json(&pdir.join(format!("visit_{i:03}.json")))?;
            let [s, h, w] = vmeta.dims;
            let bytes = fs::read(pdir.join(format!("visit_{i:03}.raw")))?;
            if bytes.len() != s * h * w * 4 {
                return Err(Error::CohortFormat(format!(
                    "{id} visit {i}: raw payload is {} bytes, expected {}",
                    bytes.len(),
                    s * h * w * 4
                )));
            }
            let data: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            let mut surface = Vec::with_capacity(s * w);
            if vmeta.surface.len() != s {
                return Err(Error::CohortFormat(format!("{id} visit {i}: surface rows")));
            }
            for row in &vmeta.surface {
                if row.len() != w {
                    return Err(Error::CohortFormat(format!("{id} visit {i}: surface cols")));
                }
                surface.extend_from_slice(row);
            }
            visits.push(VolumeScan {
                slices: Tensor::from_vec(&[s, h, w], data)?,
                surface,
                visit_day: vmeta.visit_day,
            });
        }
        let timeline = PatientTimeline {
            patient_id: meta.patient_id,
            visits,
            conversion_day: meta.conversion_day,
            lesion_slices: meta.lesion_slices,
        };
        timeline.validate()?;
        cohort.push(timeline);
    }
    Ok((cohort, manifest))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(serde_json::to_string_pretty(value)?.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| {
        Error::CohortFormat(format!("cannot read {}: {e}", path.display()))
    })?;
    Ok(serde_json::from_slice(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate_cohort;

    #[test]
    fn roundtrip_preserves_cohort_exactly() {
        let params = CohortParams {
            patients: 3,
            visit_count: 3,
            slices: 4,
            height: 12,
            width: 10,
            affected_slices: 2,
            seed: 17,
            ..CohortParams::default()
        };
        let cohort = generate_cohort(&params).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_cohort(dir.path(), &cohort, &params).unwrap();
        let (loaded, manifest) = load_cohort(dir.path()).unwrap();
        assert_eq!(manifest.seed, 17);
        assert_eq!(manifest.patients.len(), 3);
        assert_eq!(loaded.len(), cohort.len());
        for (a, b) in cohort.iter().zip(loaded.iter()) {
            assert_eq!(a.patient_id, b.patient_id);
            assert_eq!(a.conversion_day, b.conversion_day);
            assert_eq!(a.lesion_slices, b.lesion_slices);
            for (va, vb) in a.visits.iter().zip(b.visits.iter()) {
                assert_eq!(va.visit_day, vb.visit_day);
                assert_eq!(va.surface, vb.surface);
                assert_eq!(va.slices.data(), vb.slices.data());
            }
        }
    }

    #[test]
    fn truncated_raw_rejected() {
        let params = CohortParams {
            patients: 1,
            visit_count: 1,
            slices: 2,
            height: 6,
            width: 6,
            affected_slices: 1,
            ..CohortParams::default()
        };
        let cohort = generate_cohort(&params).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_cohort(dir.path(), &cohort, &params).unwrap();
        let raw = dir.path().join("patient_0000").join("visit_000.raw");
        let bytes = fs::read(&raw).unwrap();
        fs::write(&raw, &bytes[..bytes.len() - 4]).unwrap();
        assert!(load_cohort(dir.path()).is_err());
    }
}
