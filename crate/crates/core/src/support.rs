use std::cmp::Ordering;

use crate::error::{Error, Result};

/// Sorted, duplicate-free set of atom indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SupportSet(Vec<usize>);

impl SupportSet {
    /// Sorts and deduplicates `indices`.
    pub fn new(mut indices: Vec<usize>) -> Self {
        indices.sort_unstable();
        indices.dedup();
        SupportSet(indices)
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, j: usize) -> bool {
        self.0.binary_search(&j).is_ok()
    }
}

/// Distance ordering with the lowest index winning ties.
#[inline]
pub(crate) fn by_dist_then_index(dists: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| {
        dists[a]
            .partial_cmp(&dists[b])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    }
}

/// Indices of the `kprime` smallest entries of `dists`, ties broken by the
/// lowest index.
pub fn partial_sort_knn(dists: &[f64], kprime: usize) -> Result<SupportSet> {
    if kprime == 0 {
        return Err(Error::InvalidParameter("kprime must be at least 1".into()));
    }
    if kprime > dists.len() {
        return Err(Error::InvalidParameter(format!(
            "kprime = {kprime} exceeds the number of atoms {}",
            dists.len()
        )));
    }
    let mut idx: Vec<usize> = (0..dists.len()).collect();
    if kprime < idx.len() {
        idx.select_nth_unstable_by(kprime - 1, by_dist_then_index(dists));
        idx.truncate(kprime);
    }
    Ok(SupportSet::new(idx))
}

/// All indices sorted by distance (lowest index first on ties).
pub fn rank_by_distance(dists: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dists.len()).collect();
    idx.sort_by(by_dist_then_index(dists));
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Rng, UniformSource};
    use proptest::prelude::*;

    fn full_sort_oracle(d: &[f64], kp: usize) -> Vec<usize> {
        let mut pairs: Vec<(f64, usize)> = d.iter().copied().zip(0..).collect();
        pairs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut out: Vec<usize> = pairs[..kp].iter().map(|p| p.1).collect();
        out.sort();
        out
    }

    #[test]
    fn smallest_two() {
        assert_eq!(partial_sort_knn(&[5.0, 1.0, 3.0], 2).unwrap().indices(), &[1, 2]);
    }

    #[test]
    fn tie_goes_to_lowest_index() {
        assert_eq!(partial_sort_knn(&[2.0, 2.0, 9.0], 1).unwrap().indices(), &[0]);
    }

    #[test]
    fn kprime_too_large() {
        assert!(partial_sort_knn(&[1.0, 2.0], 3).is_err());
        assert!(partial_sort_knn(&[1.0, 2.0], 0).is_err());
    }

    #[test]
    fn matches_full_sort() {
        let mut rng = Rng::new(5);
        for _ in 0..200 {
            // coarse values so ties actually happen
            let d: Vec<f64> = (0..50).map(|_| (rng.uniform(0.0, 20.0)).floor()).collect();
            for kp in [1, 8, 50] {
                assert_eq!(partial_sort_knn(&d, kp).unwrap().indices(), full_sort_oracle(&d, kp));
            }
        }
    }

    proptest! {
        #[test]
        fn permutation_invariant_up_to_ties(d in prop::collection::vec(0.0f64..100.0, 1..40), seed in any::<u64>(), kp_frac in 0.0f64..1.0) {
            let kp = 1 + ((d.len() - 1) as f64 * kp_frac) as usize;
            let base = partial_sort_knn(&d, kp).unwrap();
            let oracle = full_sort_oracle(&d, kp);
            prop_assert_eq!(base.indices(), oracle.as_slice());
            let mut perm: Vec<usize> = (0..d.len()).collect();
            Rng::new(seed).shuffle(&mut perm);
            let permuted: Vec<f64> = perm.iter().map(|&i| d[i]).collect();
            let got = partial_sort_knn(&permuted, kp).unwrap();
            // map back and compare the selected distance multisets
            let mut a: Vec<f64> = got.indices().iter().map(|&i| permuted[i]).collect();
            let mut b: Vec<f64> = base.indices().iter().map(|&i| d[i]).collect();
            a.sort_by(|x, y| x.partial_cmp(y).unwrap());
            b.sort_by(|x, y| x.partial_cmp(y).unwrap());
            prop_assert_eq!(a, b);
        }
    }
}
