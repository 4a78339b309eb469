//! Labeled / unlabeled / test partition and entropy-based acquisition.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::{ClassLabel, SampleId};

/// Tolerance on the probability mass accepted by [`entropy`].
const MASS_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoolError {
    #[error("not a probability distribution: {0}")]
    Distribution(String),
    #[error("acquisition ratio must lie in (0, 1], got {0}")]
    Ratio(f64),
    #[error("score for sample {0} is not finite")]
    NonFiniteScore(SampleId),
    #[error("sample {0} is not in the unlabeled pool")]
    NotUnlabeled(SampleId),
    #[error("no label provided for sample {0}")]
    MissingLabel(SampleId),
    #[error("sample {0} appears twice in the batch")]
    DuplicateId(SampleId),
    #[error("sample {id} is assigned to more than one part")]
    Overlap { id: SampleId },
    #[error("sample {id} is outside the universe of {universe}")]
    OutOfUniverse { id: SampleId, universe: usize },
    #[error("partition covers {covered} of {universe} samples")]
    NotExhaustive { covered: usize, universe: usize },
    #[error("sample {0} was already acquired once")]
    Requery(SampleId),
}

/// Shannon entropy in nats, with `0·ln 0 = 0`.
pub fn entropy(p: &[f64]) -> Result<f64, PoolError> {
    if p.is_empty() {
        return Err(PoolError::Distribution("empty".into()));
    }
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(PoolError::Distribution(format!("invalid entry in {p:?}")));
    }
    let mass: f64 = p.iter().sum();
    if (mass - 1.0).abs() > MASS_TOL {
        return Err(PoolError::Distribution(format!("mass {mass}")));
    }
    Ok(p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| -v * v.ln())
        .sum::<f64>()
        .max(0.0))
}

/// Queried ids with their scores, highest score first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionBatch {
    pub items: Vec<(SampleId, f64)>,
    pub ratio: f64,
}

impl AcquisitionBatch {
    pub fn ids(&self) -> Vec<SampleId> {
        self.items.iter().map(|(id, _)| *id).collect()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Descending score, ascending id on ties.
fn rank_order(a: &(SampleId, f64), b: &(SampleId, f64)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then(a.0.cmp(&b.0))
}

/// The `k` highest-scoring ids.
pub fn select_top_k(scores: &[(SampleId, f64)], k: usize, ratio: f64) -> Result<AcquisitionBatch, PoolError> {
    if let Some((id, _)) = scores.iter().find(|(_, s)| !s.is_finite()) {
        return Err(PoolError::NonFiniteScore(*id));
    }
    let mut ranked = scores.to_vec();
    ranked.sort_by(rank_order);
    ranked.truncate(k);
    Ok(AcquisitionBatch { items: ranked, ratio })
}

/// Number of ids taken from a pool of `pool_size` at ratio `tau`.
pub fn top_fraction_count(pool_size: usize, tau: f64) -> usize {
    // A hair below the product so that e.g. 0.05·100 stays 5 despite rounding.
    ((tau * pool_size as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Top-`ceil(τ·|pool|)` ids by score.
pub fn rank_and_select(scores: &[(SampleId, f64)], tau: f64) -> Result<AcquisitionBatch, PoolError> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(PoolError::Ratio(tau));
    }
    let k = top_fraction_count(scores.len(), tau).min(scores.len());
    select_top_k(scores, k, tau)
}

/// Partition of the sample universe into labeled, unlabeled and test ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePool {
    universe: usize,
    labeled: BTreeMap<SampleId, ClassLabel>,
    unlabeled: BTreeSet<SampleId>,
    test: BTreeSet<SampleId>,
    /// Every id ever moved by [`SamplePool::transfer`].
    acquired: BTreeSet<SampleId>,
}

impl SamplePool {
    pub fn new(
        universe: usize,
        labeled: BTreeMap<SampleId, ClassLabel>,
        unlabeled: BTreeSet<SampleId>,
        test: BTreeSet<SampleId>,
    ) -> Result<Self, PoolError> {
        let pool = Self {
            universe,
            labeled,
            unlabeled,
            test,
            acquired: BTreeSet::new(),
        };
        pool.check()?;
        Ok(pool)
    }

    /// Verifies disjointness, exhaustiveness and universe bounds.
    pub fn check(&self) -> Result<(), PoolError> {
        let mut seen = BTreeSet::new();
        let all = self
            .labeled
            .keys()
            .chain(&self.unlabeled)
            .chain(&self.test);
        for &id in all {
            if id as usize >= self.universe {
                return Err(PoolError::OutOfUniverse {
                    id,
                    universe: self.universe,
                });
            }
            if !seen.insert(id) {
                return Err(PoolError::Overlap { id });
            }
        }
        if seen.len() != self.universe {
            return Err(PoolError::NotExhaustive {
                covered: seen.len(),
                universe: self.universe,
            });
        }
        Ok(())
    }

    pub fn universe(&self) -> usize {
        self.universe
    }

    pub fn labeled(&self) -> &BTreeMap<SampleId, ClassLabel> {
        &self.labeled
    }

    pub fn unlabeled(&self) -> &BTreeSet<SampleId> {
        &self.unlabeled
    }

    pub fn test(&self) -> &BTreeSet<SampleId> {
        &self.test
    }

    pub fn acquired(&self) -> &BTreeSet<SampleId> {
        &self.acquired
    }

    pub fn labeled_len(&self) -> usize {
        self.labeled.len()
    }

    pub fn unlabeled_len(&self) -> usize {
        self.unlabeled.len()
    }

    /// Labeled share of the whole universe.
    pub fn labeled_fraction(&self) -> f64 {
        self.labeled.len() as f64 / self.universe.max(1) as f64
    }

    /// Moves `ids` from the unlabeled to the labeled pool. Either every id
    /// moves or none does.
    pub fn transfer(&mut self, ids: &[SampleId], labels: &BTreeMap<SampleId, ClassLabel>) -> Result<(), PoolError> {
        let mut batch = BTreeSet::new();
        for &id in ids {
            if !batch.insert(id) {
                return Err(PoolError::DuplicateId(id));
            }
            if !self.unlabeled.contains(&id) {
                return Err(PoolError::NotUnlabeled(id));
            }
            if self.acquired.contains(&id) {
                return Err(PoolError::Requery(id));
            }
            if !labels.contains_key(&id) {
                return Err(PoolError::MissingLabel(id));
            }
        }
        for &id in ids {
            self.unlabeled.remove(&id);
            self.labeled.insert(id, labels[&id]);
            self.acquired.insert(id);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn pool(labeled: u64, unlabeled: u64, test: u64) -> SamplePool {
        let l = (0..labeled).map(|i| (i, 0)).collect();
        let u = (labeled..labeled + unlabeled).collect();
        let t = (labeled + unlabeled..labeled + unlabeled + test).collect();
        SamplePool::new((labeled + unlabeled + test) as usize, l, u, t).unwrap()
    }

    #[test]
    fn entropy_cases() {
        assert_abs_diff_eq!(entropy(&[0.5, 0.5]).unwrap(), 2f64.ln(), epsilon = 1e-15);
        assert_eq!(entropy(&[1.0, 0.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(entropy(&[0.9, 0.1]).unwrap(), 0.325_082_973_391_448_2, epsilon = 1e-12);
    }

    #[test]
    fn malformed_distributions_are_rejected() {
        assert!(entropy(&[]).is_err());
        assert!(entropy(&[0.5, 0.6]).is_err());
        assert!(entropy(&[1.2, -0.2]).is_err());
        assert!(entropy(&[f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn top_five_percent_of_hundred() {
        let scores: Vec<_> = (0..100u64).map(|i| (i, ((i * 37) % 100) as f64 / 100.0)).collect();
        let batch = rank_and_select(&scores, 0.05).unwrap();
        assert_eq!(batch.len(), 5);
        let chosen: BTreeSet<_> = batch.ids().into_iter().collect();
        let min_chosen = batch.items.iter().map(|x| x.1).fold(f64::INFINITY, f64::min);
        for (id, s) in &scores {
            if !chosen.contains(id) {
                assert!(*s <= min_chosen);
            }
        }
    }

    #[test]
    fn ties_break_by_smallest_id() {
        let scores: Vec<_> = (0..100u64).rev().map(|i| (i, 0.3)).collect();
        let batch = rank_and_select(&scores, 0.05).unwrap();
        assert_eq!(batch.ids(), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn three_element_ranking() {
        let (a, b, c) = (10, 11, 12);
        let batch = rank_and_select(&[(a, 0.9), (b, 0.1), (c, 0.5)], 0.34).unwrap();
        assert_eq!(batch.ids(), vec![a, c]);
    }

    #[test]
    fn empty_scores_give_empty_batch() {
        assert!(rank_and_select(&[], 0.5).unwrap().is_empty());
        assert!(rank_and_select(&[(1, 0.2)], 0.0).is_err());
        assert!(rank_and_select(&[(1, 0.2)], 1.5).is_err());
        assert!(rank_and_select(&[(1, f64::NAN)], 0.5).is_err());
    }

    #[test]
    fn transfer_moves_batch() {
        let mut p = pool(10, 70, 20);
        let ids = [10, 11, 12, 13, 14];
        let labels = ids.iter().map(|&i| (i, 1)).collect();
        p.transfer(&ids, &labels).unwrap();
        assert_eq!((p.labeled_len(), p.unlabeled_len()), (15, 65));
        p.check().unwrap();

        p.transfer(&[], &BTreeMap::new()).unwrap();
        assert_eq!((p.labeled_len(), p.unlabeled_len()), (15, 65));

        let before = p.clone();
        assert_eq!(p.transfer(&ids, &labels), Err(PoolError::NotUnlabeled(10)));
        assert_eq!(p, before);
    }

    #[test]
    fn transfer_is_atomic() {
        let mut p = pool(2, 5, 1);
        let before = p.clone();
        let labels: BTreeMap<_, _> = [(2, 0), (3, 1)].into();
        assert_eq!(p.transfer(&[2, 3, 4], &labels), Err(PoolError::MissingLabel(4)));
        assert_eq!(p, before);
        assert_eq!(p.transfer(&[2, 0], &labels), Err(PoolError::NotUnlabeled(0)));
        assert_eq!(p.transfer(&[2, 2], &labels), Err(PoolError::DuplicateId(2)));
        assert_eq!(p, before);
    }

    #[test]
    fn construction_validates_partition() {
        let l: BTreeMap<_, _> = [(0, 0)].into();
        let u: BTreeSet<_> = [0, 1].into();
        assert_eq!(
            SamplePool::new(3, l.clone(), u, [2].into()),
            Err(PoolError::Overlap { id: 0 })
        );
        assert!(matches!(
            SamplePool::new(4, l, [1].into(), [2].into()),
            Err(PoolError::NotExhaustive { .. })
        ));
    }

    #[test]
    fn ratio_count_is_ceiling() {
        assert_eq!(top_fraction_count(100, 0.05), 5);
        assert_eq!(top_fraction_count(3, 0.34), 2);
        assert_eq!(top_fraction_count(7, 0.05), 1);
        assert_eq!(top_fraction_count(0, 0.05), 0);
    }
}
