//! Patient-level stratified holdout and k-fold assignment.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng;

use super::PatientTimeline;

/// Holdout patients plus k disjoint fold assignments over the rest.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct DatasetSplit {
    pub holdout: Vec<String>,
    pub folds: Vec<Vec<String>>,
}

impl DatasetSplit {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    /// All patient ids outside the holdout, fold `i` excluded.
    pub fn training_patients(&self, validation_fold: usize) -> Vec<String> {
        self.folds
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != validation_fold)
            .flat_map(|(_, f)| f.iter().cloned())
            .collect()
    }
}

/// Stratified split: the holdout takes `holdout_frac` of patients with the
/// converter ratio preserved, and the remainder is dealt into k folds so
/// per-fold converter counts differ by at most one. Deterministic in `seed`.
pub fn split_dataset(
    patients: &[PatientTimeline],
    holdout_frac: f64,
    k: usize,
    seed: u64,
) -> Result<DatasetSplit> {
    if k == 0 {
        return Err(Error::arg("split_dataset", "k must be positive"));
    }
    if !(0.0..1.0).contains(&holdout_frac) {
        return Err(Error::arg("split_dataset", "holdout_frac must be in [0, 1)"));
    }
    let mut converters: Vec<&str> = Vec::new();
    let mut others: Vec<&str> = Vec::new();
    for p in patients {
        if p.is_converter() {
            converters.push(&p.patient_id);
        } else {
            others.push(&p.patient_id);
        }
    }
    for (name, stratum) in [("converter", &converters), ("non-converter", &others)] {
        if !stratum.is_empty() && stratum.len() < k {
            return Err(Error::arg(
                "split_dataset",
                format!("{name} stratum has {} patients, need at least {k}", stratum.len()),
            ));
        }
    }
    let n = patients.len();
    let n_hold = (holdout_frac * n as f64).round() as usize;
    let mut n_hold_conv = (holdout_frac * converters.len() as f64).round() as usize;
    n_hold_conv = n_hold_conv.min(n_hold).min(converters.len());
    let n_hold_other = (n_hold - n_hold_conv).min(others.len());

    let mut shuffled_conv = converters.clone();
    shuffled_conv.shuffle(&mut rng::stream(seed, "split/converters", &[]));
    let mut shuffled_other = others.clone();
    shuffled_other.shuffle(&mut rng::stream(seed, "split/others", &[]));

    let mut holdout: Vec<String> = Vec::with_capacity(n_hold);
    holdout.extend(shuffled_conv[..n_hold_conv].iter().map(|s| s.to_string()));
    holdout.extend(shuffled_other[..n_hold_other].iter().map(|s| s.to_string()));

    // deal the remainder round-robin, continuing the fold offset across
    // strata so fold sizes stay balanced
    let mut folds: Vec<Vec<String>> = vec![Vec::new(); k];
    let mut offset = 0usize;
    for stratum in [&shuffled_conv[n_hold_conv..], &shuffled_other[n_hold_other..]] {
        for (j, id) in stratum.iter().enumerate() {
            folds[(offset + j) % k].push(id.to_string());
        }
        offset = (offset + stratum.len()) % k;
    }
    for (i, fold) in folds.iter().enumerate() {
        if fold.is_empty() {
            return Err(Error::arg(
                "split_dataset",
                format!("fold {i} is empty; too few patients for k={k}"),
            ));
        }
    }
    Ok(DatasetSplit {
        holdout,
        folds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_cohort, CohortParams};
    use std::collections::HashSet;

    fn cohort(n: usize, frac: f64, seed: u64) -> Vec<PatientTimeline> {
        generate_cohort(&CohortParams {
            patients: n,
            converter_fraction: frac,
            visit_count: 2,
            slices: 2,
            height: 8,
            width: 8,
            affected_slices: 1,
            seed,
            ..CohortParams::default()
        })
        .unwrap()
    }

    fn check_invariants(patients: &[PatientTimeline], split: &DatasetSplit) {
        let all: HashSet<&str> = patients.iter().map(|p| p.patient_id.as_str()).collect();
        let mut seen: HashSet<&str> = HashSet::new();
        for id in &split.holdout {
            assert!(seen.insert(id.as_str()), "duplicate {id}");
        }
        for fold in &split.folds {
            for id in fold {
                assert!(seen.insert(id.as_str()), "duplicate {id}");
            }
        }
        assert_eq!(seen, all, "union must cover all patients");
        // stratification: per-fold converter counts within 1 of each other
        let conv: HashSet<&str> = patients
            .iter()
            .filter(|p| p.is_converter())
            .map(|p| p.patient_id.as_str())
            .collect();
        let counts: Vec<usize> = split
            .folds
            .iter()
            .map(|f| f.iter().filter(|id| conv.contains(id.as_str())).count())
            .collect();
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 1, "converter counts {counts:?}");
    }

    #[test]
    fn ten_patients_fifth_heldout_folds_of_two() {
        let patients = cohort(10, 0.5, 3);
        let split = split_dataset(&patients, 0.2, 4, 7).unwrap();
        assert_eq!(split.holdout.len(), 2);
        let sizes: Vec<usize> = split.folds.iter().map(|f| f.len()).collect();
        assert_eq!(sizes, vec![2, 2, 2, 2]);
        check_invariants(&patients, &split);
    }

    #[test]
    fn all_converters_degenerates_to_plain_split() {
        let patients = cohort(9, 1.0, 4);
        let split = split_dataset(&patients, 0.2, 4, 1).unwrap();
        check_invariants(&patients, &split);
    }

    #[test]
    fn paper_sized_split_has_balanced_converter_folds() {
        let patients = cohort(463, 113.0 / 463.0, 5);
        let split = split_dataset(&patients, 0.2, 4, 11).unwrap();
        check_invariants(&patients, &split);
        let conv: HashSet<&str> = patients
            .iter()
            .filter(|p| p.is_converter())
            .map(|p| p.patient_id.as_str())
            .collect();
        let per_fold: Vec<usize> = split
            .folds
            .iter()
            .map(|f| f.iter().filter(|id| conv.contains(id.as_str())).count())
            .collect();
        // 113 converters, 20% held out -> about 90 over 4 folds
        let target = 113.0 * 0.8 / 4.0;
        for c in per_fold {
            assert!((c as f64 - target).abs() <= 1.5, "{c} vs {target}");
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let patients = cohort(30, 0.3, 6);
        let a = split_dataset(&patients, 0.2, 4, 9).unwrap();
        let b = split_dataset(&patients, 0.2, 4, 9).unwrap();
        let c = split_dataset(&patients, 0.2, 4, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn too_few_in_stratum_rejected() {
        let patients = cohort(10, 0.2, 8); // 2 converters < k=4
        assert!(split_dataset(&patients, 0.2, 4, 0).is_err());
    }

    #[test]
    fn training_patients_excludes_validation_fold_and_holdout() {
        let patients = cohort(20, 0.5, 12);
        let split = split_dataset(&patients, 0.2, 4, 2).unwrap();
        let train = split.training_patients(1);
        let train_set: HashSet<&str> = train.iter().map(|s| s.as_str()).collect();
        for id in &split.folds[1] {
            assert!(!train_set.contains(id.as_str()));
        }
        for id in &split.holdout {
            assert!(!train_set.contains(id.as_str()));
        }
    }
}
