use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Episode;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Split<T> {
    pub train: Vec<Episode<T>>,
    pub val: Vec<Episode<T>>,
    pub test: Vec<Episode<T>>,
}

/// Shuffles whole episodes by `seed` and cuts them by `ratios` (train, val, test).
///
/// Validation and test sizes are floored; the remainder goes to training.
pub fn split<T>(episodes: Vec<Episode<T>>, ratios: (f64, f64, f64), seed: u64) -> Result<Split<T>> {
    let (a, b, c) = ratios;
    if a < 0.0 || b < 0.0 || c < 0.0 || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let n = episodes.len();
    let count = |r: f64| (n as f64 * r + 1e-9).floor() as usize;
    let (n_val, n_test) = (count(b), count(c));
    let n_train = n - n_val - n_test;
    for (r, k, name) in [(a, n_train, "train"), (b, n_val, "validation"), (c, n_test, "test")] {
        if r > 0.0 && k == 0 {
            return Err(Error::Config(format!(
                "{n} episodes are too few for a non-empty {name} split"
            )));
        }
    }
    let mut eps = episodes;
    eps.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = eps.split_off(n - n_test);
    let val = eps.split_off(n_train);
    Ok(Split { train: eps, val, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Label;
    use std::collections::HashSet;

    fn eps(n: u32) -> Vec<Episode<f64>> {
        (0..n)
            .map(|id| Episode {
                id,
                label: Label::Real,
                frames: vec![],
                futures: vec![],
                source: String::new(),
            })
            .collect()
    }

    fn ids(v: &[Episode<f64>]) -> Vec<u32> {
        v.iter().map(|e| e.id).collect()
    }

    #[test]
    fn all_to_train() {
        let s = split(eps(5), (1.0, 0.0, 0.0), 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (5, 0, 0));
    }

    #[test]
    fn floor_then_remainder_to_train() {
        let s = split(eps(10), (0.8, 0.1, 0.1), 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 1, 1));
        let s = split(eps(200), (0.7, 0.1, 0.2), 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (140, 20, 40));
    }

    #[test]
    fn seeded_and_disjoint() {
        let a = split(eps(30), (0.6, 0.2, 0.2), 9).unwrap();
        let b = split(eps(30), (0.6, 0.2, 0.2), 9).unwrap();
        assert_eq!(a, b);
        let mut seen = HashSet::new();
        for id in ids(&a.train).into_iter().chain(ids(&a.val)).chain(ids(&a.test)) {
            assert!(seen.insert(id));
        }
        assert_eq!(seen.len(), 30);
    }

    #[test]
    fn errors() {
        assert!(split(eps(10), (0.5, 0.2, 0.2), 0).is_err());
        assert!(split(eps(3), (0.8, 0.1, 0.1), 0).is_err());
    }
}
