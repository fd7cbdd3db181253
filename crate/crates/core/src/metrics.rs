//! AUC and RMSE over pooled predictions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub prob: f64,
    pub label: u8,
}

impl PredictionRecord {
    pub fn new(prob: f64, label: u8) -> Self {
        Self { prob, label }
    }
}

/// Area under the ROC curve, Mann-Whitney style: tied scores count 1/2.
pub fn auc(records: &[PredictionRecord]) -> Result<f64> {
    let pos = records.iter().filter(|r| r.label == 1).count();
    let neg = records.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "auc needs both classes ({pos} positive, {neg} negative)"
        )));
    }
    if let Some(r) = records.iter().find(|r| !r.prob.is_finite()) {
        return Err(Error::UndefinedMetric(format!("non-finite score {}", r.prob)));
    }
    let mut sorted: Vec<&PredictionRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.prob.total_cmp(&b.prob));

    // Sum of positive ranks with average ranks for ties.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1].prob == sorted[i].prob {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        let positives = sorted[i..=j].iter().filter(|r| r.label == 1).count();
        rank_sum += avg_rank * positives as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

pub fn rmse(records: &[PredictionRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::UndefinedMetric("rmse of no records".into()));
    }
    let sse: f64 = records
        .iter()
        .map(|r| (r.prob - f64::from(r.label)).powi(2))
        .sum();
    Ok((sse / records.len() as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pairwise_auc(records: &[PredictionRecord]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for p in records.iter().filter(|r| r.label == 1) {
            for n in records.iter().filter(|r| r.label == 0) {
                den += 1.0;
                if p.prob > n.prob {
                    num += 1.0;
                } else if p.prob == n.prob {
                    num += 0.5;
                }
            }
        }
        num / den
    }

    fn recs(v: &[(f64, u8)]) -> Vec<PredictionRecord> {
        v.iter().map(|&(p, l)| PredictionRecord::new(p, l)).collect()
    }

    #[test]
    fn separated_scores() {
        let r = recs(&[(0.1, 0), (0.2, 0), (0.8, 1), (0.9, 1)]);
        assert_eq!(auc(&r).unwrap(), 1.0);
    }

    #[test]
    fn hand_records_match_pairwise() {
        let r = recs(&[(0.3, 1), (0.3, 0), (0.7, 1), (0.2, 0), (0.7, 0), (0.9, 1)]);
        // 0.3+ scores 1.5, 0.7+ scores 2.5, 0.9+ scores 3 over 9 pairs
        assert!((auc(&r).unwrap() - 7.0 / 9.0).abs() < 1e-12);
        assert!((auc(&r).unwrap() - pairwise_auc(&r)).abs() < 1e-12);
    }

    #[test]
    fn single_class_is_undefined() {
        let r = recs(&[(0.3, 1), (0.4, 1)]);
        assert!(matches!(auc(&r), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn random_labels_give_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r: Vec<_> = (0..20_000)
            .map(|_| PredictionRecord::new(rng.random(), u8::from(rng.random_bool(0.5))))
            .collect();
        assert!((auc(&r).unwrap() - 0.5).abs() < 0.02);
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&recs(&[(1.0, 1), (0.0, 0)])).unwrap(), 0.0);
        assert_eq!(rmse(&recs(&[(0.5, 1)])).unwrap(), 0.5);
        let r = recs(&[(0.9, 1), (0.2, 0), (0.6, 0), (0.4, 1), (0.5, 1)]);
        let hand = ((0.01 + 0.04 + 0.36 + 0.36 + 0.25) / 5.0f64).sqrt();
        assert!((rmse(&r).unwrap() - hand).abs() < 1e-12);
    }

    fn arb_records() -> impl Strategy<Value = Vec<PredictionRecord>> {
        // Coarse scores so ties are common.
        prop::collection::vec((0u8..20, 0u8..=1), 2..60).prop_map(|v| {
            let mut r: Vec<_> = v
                .into_iter()
                .map(|(s, l)| PredictionRecord::new(f64::from(s) / 20.0 + 0.01, l))
                .collect();
            r[0].label = 0;
            r[1].label = 1;
            r
        })
    }

    proptest! {
        #[test]
        fn sort_auc_matches_pairwise(r in arb_records()) {
            prop_assert!((auc(&r).unwrap() - pairwise_auc(&r)).abs() < 1e-12);
        }

        #[test]
        fn auc_invariant_under_monotone_transform(r in arb_records()) {
            let t: Vec<_> = r.iter().map(|x| PredictionRecord::new((3.0 * x.prob).exp() - 7.0, x.label)).collect();
            prop_assert!((auc(&r).unwrap() - auc(&t).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn auc_invariant_under_flip(r in arb_records()) {
            let f: Vec<_> = r.iter().map(|x| PredictionRecord::new(1.0 - x.prob, 1 - x.label)).collect();
            prop_assert!((auc(&r).unwrap() - auc(&f).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn rmse_in_unit_interval(r in arb_records()) {
            let v = rmse(&r).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}
