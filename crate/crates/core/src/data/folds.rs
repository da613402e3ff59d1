use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// One train/test partition of a dataset. Indices are sorted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSplit {
    pub fold_index: usize,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

fn check_folds(folds: usize) -> Result<()> {
    if folds < 2 {
        return Err(Error::Invalid(format!(
            "need at least 2 folds, got {folds}"
        )));
    }
    Ok(())
}

fn splits_from_assignment(assign: &[usize], folds: usize) -> Vec<FoldSplit> {
    (0..folds)
        .map(|f| {
            let (test, train): (Vec<usize>, Vec<usize>) =
                (0..assign.len()).partition(|&i| assign[i] == f);
            FoldSplit {
                fold_index: f,
                train_indices: train,
                test_indices: test,
            }
        })
        .collect()
}

/// Stratified k-fold split.
///
/// Each class is shuffled with one seeded generator (classes visited in
/// ascending order), then members are dealt to folds round-robin. The deal
/// position carries over from one class to the next so fold sizes differ by
/// at most one.
pub fn stratified_kfold(labels: &[usize], folds: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    check_folds(folds)?;
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &c) in labels.iter().enumerate() {
        members[c].push(i);
    }
    for (c, m) in members.iter().enumerate() {
        if !m.is_empty() && m.len() < folds {
            return Err(Error::Invalid(format!(
                "class {c} has {} graphs, fewer than {folds} folds",
                m.len()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assign = vec![0; labels.len()];
    let mut next = 0;
    for m in &mut members {
        m.shuffle(&mut rng);
        for &i in m.iter() {
            assign[i] = next % folds;
            next += 1;
        }
    }
    Ok(splits_from_assignment(&assign, folds))
}

/// Plain shuffled k-fold split, ignoring labels.
pub fn kfold(n: usize, folds: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    check_folds(folds)?;
    if n < folds {
        return Err(Error::Invalid(format!(
            "{n} graphs, fewer than {folds} folds"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assign = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        assign[i] = pos % folds;
    }
    Ok(splits_from_assignment(&assign, folds))
}
