use crate::attacks::AttackScore;
use crate::error::{LabError, Result};

/// Mann–Whitney AUC: the fraction of (member, non-member) pairs in which the
/// member scores higher, ties counting one half.
///
/// Computed from tie-averaged ranks in integer arithmetic (twice the U
/// statistic), so the result equals the pairwise count exactly.
pub fn auc(scores: &[AttackScore]) -> Result<f64> {
    if let Some(bad) = scores.iter().find(|s| !s.score.is_finite()) {
        return Err(LabError::Input(format!(
            "non-finite score {} for sample {}",
            bad.score, bad.sample_id
        )));
    }
    let members = scores.iter().filter(|s| s.is_member).count() as u64;
    let others = scores.len() as u64 - members;
    if members == 0 || others == 0 {
        return Err(LabError::Input(
            "AUC needs at least one member and one non-member".into(),
        ));
    }
    let mut order: Vec<&AttackScore> = scores.iter().collect();
    order.sort_by(|a, b| a.score.total_cmp(&b.score));

    // 2 × (sum of member ranks), ranks 1-based and averaged over ties
    let mut twice_rank_sum: u64 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end + 1 < order.len() && order[end + 1].score == order[start].score {
            end += 1;
        }
        let twice_avg_rank = (start + 1 + end + 1) as u64;
        let in_group = order[start..=end].iter().filter(|s| s.is_member).count() as u64;
        twice_rank_sum += twice_avg_rank * in_group;
        start = end + 1;
    }
    let twice_u = twice_rank_sum - members * (members + 1);
    Ok(twice_u as f64 / (2 * members * others) as f64)
}

/// Convenience wrapper over two plain score lists.
pub fn auc_of(member_scores: &[f64], nonmember_scores: &[f64]) -> Result<f64> {
    let scores: Vec<AttackScore> = member_scores
        .iter()
        .map(|&s| (s, true))
        .chain(nonmember_scores.iter().map(|&s| (s, false)))
        .enumerate()
        .map(|(i, (score, is_member))| AttackScore {
            sample_id: i,
            score,
            is_member,
        })
        .collect();
    auc(&scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_separation() {
        assert_eq!(auc_of(&[2.0, 3.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(auc_of(&[0.0, 1.0], &[2.0, 3.0]).unwrap(), 0.0);
    }

    #[test]
    fn full_tie_is_half() {
        assert_eq!(auc_of(&[1.0], &[1.0]).unwrap(), 0.5);
        assert_eq!(auc_of(&[1.0, 2.0], &[1.0, 0.0]).unwrap(), 0.875);
    }

    #[test]
    fn single_class_and_nan_rejected() {
        assert!(auc_of(&[1.0, 2.0], &[]).is_err());
        assert!(auc_of(&[], &[1.0]).is_err());
        assert!(auc_of(&[f64::NAN], &[1.0]).is_err());
    }

    fn scores_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        // small integer grid so ties are frequent
        (
            prop::collection::vec((-5i32..5).prop_map(f64::from), 1..40),
            prop::collection::vec((-5i32..5).prop_map(f64::from), 1..40),
        )
    }

    proptest! {
        #[test]
        fn negation_complements((m, n) in scores_strategy()) {
            let a = auc_of(&m, &n).unwrap();
            let neg_m: Vec<f64> = m.iter().map(|v| -v).collect();
            let neg_n: Vec<f64> = n.iter().map(|v| -v).collect();
            let b = auc_of(&neg_m, &neg_n).unwrap();
            prop_assert!((a + b - 1.0).abs() < 1e-12);
        }

        #[test]
        fn monotone_transform_invariant((m, n) in scores_strategy()) {
            let f = |v: &f64| (v * 0.7).exp() + 3.0 * v;
            let a = auc_of(&m, &n).unwrap();
            let tm: Vec<f64> = m.iter().map(f).collect();
            let tn: Vec<f64> = n.iter().map(f).collect();
            prop_assert_eq!(a, auc_of(&tm, &tn).unwrap());
        }
    }
}
