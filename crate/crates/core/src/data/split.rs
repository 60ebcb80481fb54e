use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use super::LabeledSlice;
use crate::error::{Error, Result};

/// Result of [`split_dataset`]. `dropped` holds test-side slices with empty
/// ground truth, which are never evaluated.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Split {
    pub train: Vec<LabeledSlice>,
    pub test: Vec<LabeledSlice>,
    pub dropped: Vec<LabeledSlice>,
}

fn rank_key(seed: u64, key: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(key.as_bytes());
    h.finalize().into()
}

/// Deterministic split: groups (patients, or single slices) are ordered by a
/// seeded hash of their key and the first `round(train_fraction * groups)`
/// go to training, keeping at least one group on each side. A corpus with a
/// single patient is split by slice.
pub fn split_dataset(
    slices: Vec<LabeledSlice>,
    train_fraction: f64,
    seed: u64,
    group_by_patient: bool,
) -> Result<Split> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!("train_fraction {train_fraction} not in (0, 1)")));
    }
    let patients: std::collections::BTreeSet<&str> = slices.iter().map(|s| s.patient()).collect();
    let by_patient = group_by_patient && patients.len() >= 2;
    if group_by_patient && !by_patient {
        log::warn!("only one patient; splitting by slice instead");
    }
    let key = |s: &LabeledSlice| -> String {
        if by_patient {
            s.patient().to_string()
        } else {
            s.id.clone()
        }
    };
    let mut groups: BTreeMap<String, Vec<LabeledSlice>> = BTreeMap::new();
    for s in slices {
        groups.entry(key(&s)).or_default().push(s);
    }
    let mut order: Vec<(String, Vec<LabeledSlice>)> = groups.into_iter().collect();
    order.sort_by_cached_key(|(k, _)| rank_key(seed, k));
    // Keep at least one group on each side.
    let n_train = ((train_fraction * order.len() as f64).round() as usize).clamp(1, order.len().max(2) - 1);
    if order.len() < 2 {
        return Err(Error::Data(format!(
            "{} groups cannot be split with train_fraction {train_fraction}",
            order.len()
        )));
    }

    let mut split = Split::default();
    for (i, (_, members)) in order.into_iter().enumerate() {
        if i < n_train {
            split.train.extend(members);
        } else {
            for s in members {
                if s.is_empty() {
                    split.dropped.push(s);
                } else {
                    split.test.push(s);
                }
            }
        }
    }
    if split.test.is_empty() {
        return Err(Error::Data("test split has no non-empty slices".into()));
    }
    for part in [&mut split.train, &mut split.test, &mut split.dropped] {
        part.sort_by(|a, b| a.id.cmp(&b.id));
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::slice_id;
    use ndarray::Array3;
    use std::collections::BTreeSet;

    fn corpus(patients: usize, per: usize) -> Vec<LabeledSlice> {
        let mut out = Vec::new();
        for p in 0..patients {
            for s in 0..per {
                let fill = u8::from(s % 4 != 0);
                out.push(
                    LabeledSlice::new(
                        slice_id(p, s),
                        Array3::from_elem((1, 2, 2), 0.0),
                        Array3::from_elem((1, 2, 2), fill),
                    )
                    .unwrap(),
                );
            }
        }
        out
    }

    #[test]
    fn patient_split_is_nine_to_one_and_stable() {
        let a = split_dataset(corpus(10, 5), 0.9, 3, true).unwrap();
        let b = split_dataset(corpus(10, 5), 0.9, 3, true).unwrap();
        assert_eq!(a, b);
        let train_patients: BTreeSet<_> = a.train.iter().map(|s| s.patient().to_string()).collect();
        let test_patients: BTreeSet<_> = a
            .test
            .iter()
            .chain(&a.dropped)
            .map(|s| s.patient().to_string())
            .collect();
        assert_eq!(train_patients.len(), 9);
        assert_eq!(test_patients.len(), 1);
        assert!(train_patients.is_disjoint(&test_patients));
    }

    #[test]
    fn test_split_is_non_empty_and_partition_holds() {
        let input = corpus(10, 8);
        let split = split_dataset(input.clone(), 0.7, 1, true).unwrap();
        assert!(split.test.iter().all(|s| !s.is_empty()));
        assert!(split.dropped.iter().all(|s| s.is_empty()));
        let mut ids: Vec<String> = split
            .train
            .iter()
            .chain(&split.test)
            .chain(&split.dropped)
            .map(|s| s.id.clone())
            .collect();
        ids.sort();
        let mut expected: Vec<String> = input.iter().map(|s| s.id.clone()).collect();
        expected.sort();
        assert_eq!(ids, expected);
    }

    #[test]
    fn errors() {
        assert!(split_dataset(corpus(3, 2), 0.0, 0, true).is_err());
        assert!(split_dataset(corpus(3, 2), 1.0, 0, true).is_err());
        assert!(split_dataset(corpus(1, 1), 0.5, 0, true).is_err());
        assert!(split_dataset(corpus(1, 8), 0.5, 0, false).is_ok());
        assert!(split_dataset(corpus(1, 8), 0.5, 0, true).is_ok());
    }
}
