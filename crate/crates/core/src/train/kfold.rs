use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Risk;
use crate::error::{bail, Result};

/// Sorted train and test indices of one fold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Splits indices into `k` folds stratified by risk category.
///
/// Each category is shuffled and dealt round-robin; the deal for one category
/// continues at the fold where the previous one stopped, which keeps test
/// fold sizes within one of each other.
pub fn stratified_kfold(risks: &[Risk], k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        bail!(Config, "need at least 2 folds, got {}", k);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tests: Vec<Vec<usize>> = (0..k).map(|_| Vec::new()).collect();
    let mut next = 0;
    for risk in Risk::ALL {
        let mut members: Vec<usize> = (0..risks.len()).filter(|&i| risks[i] == risk).collect();
        if members.len() < k {
            bail!(
                Stratify,
                "category {} has {} samples, fewer than {} folds",
                risk,
                members.len(),
                k
            );
        }
        members.shuffle(&mut rng);
        for i in members {
            tests[next].push(i);
            next = (next + 1) % k;
        }
    }
    let mut owner = alloc::vec![0; risks.len()];
    for (f, t) in tests.iter_mut().enumerate() {
        t.sort_unstable();
        for &i in t.iter() {
            owner[i] = f;
        }
    }
    Ok(tests
        .into_iter()
        .enumerate()
        .map(|(f, test)| Fold {
            train: (0..risks.len()).filter(|&i| owner[i] != f).collect(),
            test,
        })
        .collect())
}
