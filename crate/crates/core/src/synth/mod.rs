//! Synthetic longitudinal cohort: generation, labeling, preprocessing,
//! augmentation, and patient-level splitting.
//!
//! Cohorts mirror the statistical structure of longitudinal volumetric
//! screening data: monthly visits, a minority of patients converting to the
//! late disease stage, a localized slice-sparse lesion that grows as
//! conversion approaches, and a curved reference surface that preprocessing
//! flattens.

pub mod generate;
pub mod preprocess;
pub mod split;
pub mod storage;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use generate::generate_cohort;
pub use preprocess::{
    augment_bscan, augment_scan, flatten_volume, label_scans, labelled_examples, preprocess_scan,
    sample_visit_pair, AugmentPolicy, ContrastivePolicy, PreprocessParams,
};
pub use split::{split_dataset, DatasetSplit};
pub use storage::{load_cohort, save_cohort, CohortManifest, COHORT_FORMAT_VERSION};

/// One 3D scan: slice stack in [0,1], per-(slice, column) reference surface
/// row, and acquisition day.
#[derive(Clone, Debug)]
pub struct VolumeScan {
    /// (S, H, W) intensities in [0,1].
    pub slices: Tensor<f32>,
    /// Row index of the reference surface per (slice, column), length S*W.
    pub surface: Vec<u32>,
    pub visit_day: i64,
}

impl VolumeScan {
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.slices.shape();
        (s[0], s[1], s[2])
    }

    pub fn surface_at(&self, slice: usize, col: usize) -> u32 {
        let (_, _, w) = self.dims();
        self.surface[slice * w + col]
    }

    pub fn validate(&self) -> Result<()> {
        let (s, h, w) = self.dims();
        if s == 0 || h == 0 || w == 0 {
            return Err(Error::CohortFormat("empty volume".into()));
        }
        if self.surface.len() != s * w {
            return Err(Error::CohortFormat(format!(
                "surface map has {} entries, expected {}",
                self.surface.len(),
                s * w
            )));
        }
        if self.surface.iter().any(|&r| r as usize >= h) {
            return Err(Error::CohortFormat("surface row out of range".into()));
        }
        if self
            .slices
            .data()
            .iter()
            .any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0)
        {
            return Err(Error::CohortFormat("intensities outside [0,1]".into()));
        }
        Ok(())
    }
}

/// Ordered visits of one synthetic patient; the unit of dataset splitting.
#[derive(Clone, Debug)]
pub struct PatientTimeline {
    pub patient_id: String,
    pub visits: Vec<VolumeScan>,
    /// Day of progression, if this patient converts.
    pub conversion_day: Option<i64>,
    /// Raw slice indices carrying the planted lesion (empty for
    /// non-converters); generator ground truth for attention evaluation.
    pub lesion_slices: Vec<usize>,
}

impl PatientTimeline {
    pub fn is_converter(&self) -> bool {
        self.conversion_day.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        if self.visits.is_empty() {
            return Err(Error::CohortFormat(format!("{}: no visits", self.patient_id)));
        }
        let dims = self.visits[0].dims();
        let mut prev_day = None;
        for v in &self.visits {
            v.validate()?;
            if v.dims() != dims {
                return Err(Error::CohortFormat(format!(
                    "{}: volume dims change across visits",
                    self.patient_id
                )));
            }
            if let Some(p) = prev_day {
                if v.visit_day <= p {
                    return Err(Error::CohortFormat(format!(
                        "{}: visit days not strictly increasing",
                        self.patient_id
                    )));
                }
            }
            prev_day = Some(v.visit_day);
        }
        if let Some(c) = self.conversion_day {
            if c < self.visits[0].visit_day {
                return Err(Error::CohortFormat(format!(
                    "{}: conversion before first visit",
                    self.patient_id
                )));
            }
        }
        Ok(())
    }
}

/// One preprocessed training example.
#[derive(Clone, Debug)]
pub struct LabelledExample {
    pub patient_id: String,
    pub visit_day: i64,
    /// (n_slices, out_h, out_w), min-max scaled to [0,1].
    pub volume: Tensor<f32>,
    pub label: bool,
    /// Lesion slice indices in the preprocessed slice space; empty when no
    /// lesion is visible at this visit.
    pub lesion_slices: Vec<usize>,
}

/// Cohort generation knobs. Defaults are calibrated so label prevalence on
/// the generated scans lands near 5%.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortParams {
    pub patients: usize,
    pub converter_fraction: f64,
    pub visit_interval_days: i64,
    pub visit_count: usize,
    pub slices: usize,
    pub height: usize,
    pub width: usize,
    /// Number of contiguous raw slices the lesion occupies.
    pub affected_slices: usize,
    /// Peak lesion amplitude reached at the conversion day.
    pub lesion_growth: f64,
    /// Days before conversion at which the lesion first appears.
    pub onset_lead_days: i64,
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for CohortParams {
    fn default() -> Self {
        CohortParams {
            patients: 100,
            converter_fraction: 0.24,
            visit_interval_days: 30,
            visit_count: 24,
            slices: 20,
            height: 48,
            width: 48,
            affected_slices: 4,
            lesion_growth: 0.45,
            onset_lead_days: 270,
            noise_level: 0.03,
            seed: 0,
        }
    }
}

impl CohortParams {
    pub fn validate(&self) -> Result<()> {
        if self.patients == 0 {
            return Err(Error::Config("patients must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.converter_fraction) || !self.converter_fraction.is_finite() {
            return Err(Error::Config("converter_fraction must be in [0,1]".into()));
        }
        if self.affected_slices > self.slices {
            return Err(Error::Config("affected_slices exceeds slice count".into()));
        }
        if self.slices == 0 || self.height == 0 || self.width == 0 || self.visit_count == 0 {
            return Err(Error::Config("volume dims and visit count must be positive".into()));
        }
        if self.visit_interval_days <= 0 || self.onset_lead_days <= 0 {
            return Err(Error::Config("day intervals must be positive".into()));
        }
        for (name, v) in [
            ("lesion_growth", self.lesion_growth),
            ("noise_level", self.noise_level),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Default labeling window: six months.
pub const DEFAULT_WINDOW_DAYS: i64 = 183;
