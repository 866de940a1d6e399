//! Patient-level train/validation/test partitions and k-fold plans.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
    /// Index of the held-out fold for k-fold plans.
    pub fold: Option<usize>,
}

/// Patients in first-appearance order, each with the manifest indices of
/// its images.
fn group_patients(items: &[(String, String)]) -> Vec<Vec<usize>> {
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, (_, patient)) in items.iter().enumerate() {
        let g = *index.entry(patient.as_str()).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[g].push(i);
    }
    groups
}

fn check_unique(items: &[(String, String)]) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for (id, _) in items {
        if !seen.insert(id.as_str()) {
            return Err(Error::Split(format!("duplicate id '{id}'")));
        }
    }
    Ok(())
}

/// Partition index of each group: every group goes to the partition furthest
/// below its target image count; ties go to the lower partition index.
fn greedy(sizes: &[usize], targets: &[f64]) -> Vec<usize> {
    let mut counts = vec![0usize; targets.len()];
    sizes
        .iter()
        .map(|&n| {
            let mut best = 0;
            for p in 1..targets.len() {
                if targets[p] - counts[p] as f64 > targets[best] - counts[best] as f64 {
                    best = p;
                }
            }
            counts[best] += n;
            best
        })
        .collect()
}

fn gather(groups: &[&Vec<usize>], assign: &[usize], part: usize) -> Vec<usize> {
    groups
        .iter()
        .zip(assign)
        .filter(|(_, &a)| a == part)
        .flat_map(|(g, _)| g.iter().copied())
        .collect()
}

fn ids(items: &[(String, String)], mut idx: Vec<usize>) -> Vec<String> {
    idx.sort_unstable();
    idx.into_iter().map(|i| items[i].0.clone()).collect()
}

fn shuffled_groups(items: &[(String, String)], seed: u64) -> Vec<Vec<usize>> {
    let mut groups = group_patients(items);
    groups.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    groups
}

/// Split `(id, patient_id)` items into train/val/test by `ratios`, keeping
/// every patient in one partition. Ids keep manifest order within a list.
pub fn split(items: &[(String, String)], ratios: [f64; 3], seed: u64) -> Result<SplitPlan> {
    if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios must be non-negative and sum to 1, got {ratios:?}"
        )));
    }
    check_unique(items)?;
    let groups = shuffled_groups(items, seed);
    let wanted = ratios.iter().filter(|&&r| r > 0.0).count();
    if groups.len() < wanted {
        return Err(Error::Split(format!(
            "need at least {wanted} patients, got {}",
            groups.len()
        )));
    }
    let total = items.len() as f64;
    let targets: Vec<f64> = ratios.iter().map(|r| r * total).collect();
    let groups: Vec<&Vec<usize>> = groups.iter().collect();
    let sizes: Vec<usize> = groups.iter().map(|g| g.len()).collect();
    let mut assign = greedy(&sizes, &targets);
    // A partition with a positive ratio never ends up empty: it takes the
    // last patient of a partition that has more than one.
    for p in (0..3).filter(|&p| ratios[p] > 0.0) {
        if assign.contains(&p) {
            continue;
        }
        let donor = (0..3)
            .max_by_key(|&q| (assign.iter().filter(|&&a| a == q).count(), std::cmp::Reverse(q)))
            .expect("three partitions");
        let g = assign.iter().rposition(|&a| a == donor).expect("donor has patients");
        assign[g] = p;
    }
    Ok(SplitPlan {
        train: ids(items, gather(&groups, &assign, 0)),
        val: ids(items, gather(&groups, &assign, 1)),
        test: ids(items, gather(&groups, &assign, 2)),
        seed,
        fold: None,
    })
}

/// `k` patient-disjoint folds of near-equal image count, filled largest
/// patient first into the emptiest fold. Plan `j` tests on
/// fold `j` and splits the remaining patients 7:1 into train and validation.
pub fn kfold(items: &[(String, String)], k: usize, seed: u64) -> Result<Vec<SplitPlan>> {
    if k < 2 {
        return Err(Error::Split(format!("k-fold needs k >= 2, got {k}")));
    }
    check_unique(items)?;
    // Largest patients first; the shuffle decides the order among equals.
    let mut groups = shuffled_groups(items, seed);
    groups.sort_by_key(|g| std::cmp::Reverse(g.len()));
    if groups.len() < k {
        return Err(Error::Split(format!(
            "{} patients cannot fill {k} folds",
            groups.len()
        )));
    }
    let mut fold_of = vec![0usize; groups.len()];
    let mut counts = vec![0usize; k];
    for (g, group) in groups.iter().enumerate() {
        let f = (0..k).min_by_key(|&f| (counts[f], f)).expect("k >= 2");
        counts[f] += group.len();
        fold_of[g] = f;
    }
    Ok((0..k)
        .map(|j| {
            let test: Vec<usize> = groups
                .iter()
                .zip(&fold_of)
                .filter(|(_, &f)| f == j)
                .flat_map(|(g, _)| g.iter().copied())
                .collect();
            let rest: Vec<&Vec<usize>> = groups
                .iter()
                .zip(&fold_of)
                .filter(|(_, &f)| f != j)
                .map(|(g, _)| g)
                .collect();
            let sizes: Vec<usize> = rest.iter().map(|g| g.len()).collect();
            let n: usize = sizes.iter().sum();
            let mut assign = greedy(&sizes, &[n as f64 * 7.0 / 8.0, n as f64 / 8.0]);
            // Small folds: validation still gets the last patient.
            if assign.len() >= 2 && !assign.contains(&1) {
                *assign.last_mut().expect("non-empty") = 1;
            }
            SplitPlan {
                train: ids(items, gather(&rest, &assign, 0)),
                val: ids(items, gather(&rest, &assign, 1)),
                test: ids(items, test),
                seed,
                fold: Some(j),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn singles(n: usize) -> Vec<(String, String)> {
        (0..n).map(|i| (format!("i{i}"), format!("p{i}"))).collect()
    }

    #[test]
    fn ten_singles_split_exactly() {
        let p = split(&singles(10), [0.7, 0.1, 0.2], 3).unwrap();
        assert_eq!((p.train.len(), p.val.len(), p.test.len()), (7, 1, 2));
    }

    #[test]
    fn too_few_patients() {
        let items = vec![
            ("a".to_string(), "x".to_string()),
            ("b".to_string(), "y".to_string()),
            ("c".to_string(), "y".to_string()),
        ];
        assert!(matches!(split(&items, [0.7, 0.1, 0.2], 0), Err(Error::Split(_))));
        let p = split(&items, [0.5, 0.5, 0.0], 0).unwrap();
        assert_eq!((p.train.len() + p.val.len(), p.test.len()), (3, 0));
        assert!(!p.train.is_empty() && !p.val.is_empty());
        assert!(matches!(kfold(&singles(5), 10, 0), Err(Error::Split(_))));
    }

    #[test]
    fn positive_ratios_get_a_patient() {
        for seed in 0..20 {
            let p = split(&singles(4), [0.9, 0.05, 0.05], seed).unwrap();
            assert_eq!((p.train.len(), p.val.len(), p.test.len()), (2, 1, 1));
        }
    }

    #[test]
    fn bad_ratios() {
        assert!(matches!(split(&singles(10), [0.5, 0.1, 0.2], 0), Err(Error::Config(_))));
    }

    #[test]
    fn twenty_singles_ten_folds() {
        let plans = kfold(&singles(20), 10, 1).unwrap();
        assert_eq!(plans.len(), 10);
        for p in &plans {
            assert_eq!(p.test.len(), 2);
            assert_eq!(p.train.len() + p.val.len(), 18);
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mut items = singles(5);
        items[4].0 = "i0".into();
        assert!(split(&items, [0.7, 0.1, 0.2], 0).is_err());
    }
}
