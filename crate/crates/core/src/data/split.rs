use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{BnnError, Result};

/// Index partition of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitSpec {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
    pub ratio: f64,
}

/// Stratified train/validation split of every item.
///
/// The training side gets `ceil(ratio * n)` items (729 -> 584/145 at 80:20); the
/// validation quota is shared between classes by largest remainder, so each class is
/// within one item of its proportional share.
pub fn split(labels: &[usize], n_classes: usize, ratio: f64, seed: u64) -> Result<SplitSpec> {
    let all: Vec<usize> = (0..labels.len()).collect();
    let (train, val) = stratified(&all, labels, n_classes, ratio, seed)?;
    Ok(SplitSpec {
        train,
        val,
        test: Vec::new(),
        seed,
        ratio,
    })
}

/// Holds out a stratified test set of `test_fraction`, then splits the rest by `ratio`.
pub fn split_three_way(labels: &[usize], n_classes: usize, test_fraction: f64, ratio: f64, seed: u64) -> Result<SplitSpec> {
    let all: Vec<usize> = (0..labels.len()).collect();
    let (pool, test) = stratified(&all, labels, n_classes, 1.0 - test_fraction, seed ^ 0x7e57)?;
    let (train, val) = stratified(&pool, labels, n_classes, ratio, seed)?;
    Ok(SplitSpec {
        train,
        val,
        test,
        seed,
        ratio,
    })
}

fn stratified(items: &[usize], labels: &[usize], n_classes: usize, ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(BnnError::InvalidArgument(format!("split ratio {ratio} outside [0, 1]")));
    }
    let mut by_class = vec![Vec::new(); n_classes];
    for &i in items {
        let l = labels[i];
        if l >= n_classes {
            return Err(BnnError::InvalidArgument(format!("label {l} outside 0..{n_classes}")));
        }
        by_class[l].push(i);
    }
    if let Some((c, members)) = by_class.iter().enumerate().find(|(_, m)| m.len() < 2) {
        return Err(BnnError::InvalidArgument(format!(
            "class {c} has {} item(s); stratified splitting needs at least 2",
            members.len()
        )));
    }
    let n = items.len();
    let n_train = ((ratio * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let n_held = n - n_train.min(n);
    let frac = n_held as f64 / n as f64;
    let mut quota: Vec<usize> = by_class.iter().map(|m| (m.len() as f64 * frac).floor() as usize).collect();
    let mut remainders: Vec<(f64, usize)> = by_class
        .iter()
        .enumerate()
        .map(|(c, m)| (m.len() as f64 * frac - quota[c] as f64, c))
        .collect();
    remainders.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut missing = n_held - quota.iter().sum::<usize>();
    for &(_, c) in &remainders {
        if missing == 0 {
            break;
        }
        quota[c] += 1;
        missing -= 1;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kept = Vec::with_capacity(n_train);
    let mut held = Vec::with_capacity(n_held);
    for (c, members) in by_class.iter_mut().enumerate() {
        members.shuffle(&mut rng);
        held.extend_from_slice(&members[..quota[c]]);
        kept.extend_from_slice(&members[quota[c]..]);
    }
    kept.sort_unstable();
    held.sort_unstable();
    Ok((kept, held))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(counts: &[usize]) -> Vec<usize> {
        counts.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c, n)).collect()
    }

    #[test]
    fn predefined_training_set_of_729() {
        let l = labels(&[397, 332]);
        let s = split(&l, 2, 0.8, 11).unwrap();
        assert_eq!((s.train.len(), s.val.len()), (584, 145));
        for c in 0..2 {
            let n_c = l.iter().filter(|&&x| x == c).count() as f64;
            let val_c = s.val.iter().filter(|&&i| l[i] == c).count() as f64;
            assert!((val_c - n_c * 145.0 / 729.0).abs() <= 1.0);
        }
    }

    #[test]
    fn deterministic_disjoint_and_covering() {
        let l = labels(&[40, 25, 9]);
        let a = split(&l, 3, 0.8, 5).unwrap();
        assert_eq!(a, split(&l, 3, 0.8, 5).unwrap());
        assert_ne!(a.val, split(&l, 3, 0.8, 6).unwrap().val);
        let mut all: Vec<usize> = a.train.iter().chain(&a.val).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..l.len()).collect::<Vec<_>>());

        let t = split_three_way(&l, 3, 0.2, 0.8, 5).unwrap();
        let mut all: Vec<usize> = t.train.iter().chain(&t.val).chain(&t.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..l.len()).collect::<Vec<_>>());
        assert_eq!(t.test.len(), l.len() - (0.8 * l.len() as f64).ceil() as usize);
    }

    #[test]
    fn tiny_class_is_rejected() {
        let l = labels(&[10, 1]);
        assert!(split(&l, 2, 0.8, 0).unwrap_err().to_string().contains("class 1"));
    }
}
