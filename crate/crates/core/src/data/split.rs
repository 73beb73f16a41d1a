use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Sizes for a 0.5 / 0.2 / 0.3 split of `n` records.
///
/// Train and validation take `round(0.5n)` and `round(0.2n)`, test the rest.
/// When that leaves a subset empty, one record moves over from training.
pub fn split_sizes(n: usize) -> Result<(usize, usize, usize)> {
    if n < 3 {
        return Err(Error::InvalidArgument(format!(
            "splitting needs at least 3 records, got {n}"
        )));
    }
    let mut train = (0.5 * n as f64).round() as usize;
    let val = ((0.2 * n as f64).round() as usize).max(1);
    if train + val >= n {
        train = n - val - 1;
    }
    Ok((train, val, n - train - val))
}

/// Shuffles `ids` with a seeded generator and cuts them into three subsets.
pub fn split_dataset(ids: &[String], seed: u64) -> Result<Split> {
    let (n_train, n_val, _) = split_sizes(ids.len())?;
    let mut order = ids.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = order.split_off(n_train + n_val);
    let val = order.split_off(n_train);
    Ok(Split {
        train: order,
        val,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("r{i}")).collect()
    }

    #[test]
    fn sizes() {
        assert_eq!(split_sizes(10).unwrap(), (5, 2, 3));
        assert_eq!(split_sizes(3).unwrap(), (1, 1, 1));
        assert_eq!(split_sizes(4).unwrap(), (2, 1, 1));
        assert_eq!(split_sizes(100).unwrap(), (50, 20, 30));
        assert!(split_sizes(2).is_err());
        for n in 3..200 {
            let (a, b, c) = split_sizes(n).unwrap();
            assert!(a >= 1 && b >= 1 && c >= 1 && a + b + c == n, "n={n}");
        }
    }

    #[test]
    fn split_is_a_deterministic_partition() {
        let all = ids(23);
        let s = split_dataset(&all, 5).unwrap();
        assert_eq!(s, split_dataset(&all, 5).unwrap());
        let mut joined: Vec<String> = s
            .train
            .iter()
            .chain(&s.val)
            .chain(&s.test)
            .cloned()
            .collect();
        joined.sort();
        let mut expect = all.clone();
        expect.sort();
        assert_eq!(joined, expect);
        assert_ne!(s, split_dataset(&all, 6).unwrap());
    }
}
