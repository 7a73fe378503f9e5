use serde::{Deserialize, Serialize};

use super::RetinalSample;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Contiguous k-fold partition of the sorted sample ids. The first
/// `n % k` folds hold one extra test id.
pub fn make_folds(samples: &[RetinalSample], k: usize) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("k must be at least 2, got {k}")));
    }
    let mut ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    ids.sort();
    let n = ids.len();
    if k > n {
        return Err(Error::InvalidArgument(format!(
            "cannot make {k} folds from {n} samples"
        )));
    }
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        let end = start + len;
        folds.push(Fold {
            test: ids[start..end].to_vec(),
            train: ids[..start].iter().chain(&ids[end..]).cloned().collect(),
        });
        start = end;
    }
    Ok(folds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3};
    use std::collections::BTreeSet;

    fn samples(n: usize) -> Vec<RetinalSample> {
        (0..n)
            .map(|i| RetinalSample {
                id: format!("{i:03}"),
                image: Array3::zeros((3, 1, 1)),
                gt: Array2::zeros((1, 1)),
                fov: None,
            })
            .collect()
    }

    fn sizes(folds: &[Fold]) -> Vec<usize> {
        folds.iter().map(|f| f.test.len()).collect()
    }

    #[test]
    fn uneven_split() {
        assert_eq!(sizes(&make_folds(&samples(18), 4).unwrap()), vec![5, 5, 4, 4]);
    }

    #[test]
    fn even_and_singleton_splits() {
        assert_eq!(sizes(&make_folds(&samples(20), 4).unwrap()), vec![5, 5, 5, 5]);
        assert_eq!(sizes(&make_folds(&samples(4), 4).unwrap()), vec![1, 1, 1, 1]);
    }

    #[test]
    fn too_many_folds_or_too_few() {
        assert!(make_folds(&samples(3), 4).is_err());
        assert!(make_folds(&samples(3), 1).is_err());
    }

    #[test]
    fn brute_force_partition() {
        for n in 2..30 {
            for k in 2..=n.min(8) {
                let folds = make_folds(&samples(n), k).unwrap();
                let all: BTreeSet<String> = samples(n).into_iter().map(|s| s.id).collect();
                let mut seen = BTreeSet::new();
                for f in &folds {
                    for id in &f.test {
                        assert!(seen.insert(id.clone()), "id {id} tested twice");
                    }
                    let train: BTreeSet<_> = f.train.iter().cloned().collect();
                    let test: BTreeSet<_> = f.test.iter().cloned().collect();
                    assert!(train.is_disjoint(&test));
                    assert_eq!(train.len() + test.len(), n);
                }
                assert_eq!(seen, all);
                let s = sizes(&folds);
                assert!(s.iter().max().unwrap() - s.iter().min().unwrap() <= 1);
            }
        }
    }
}
