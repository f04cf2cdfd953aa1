//! Detection metrics. Out-of-distribution samples are the positive class and
//! a higher score means "more anomalous".

use crate::error::{Error, Result};
use alloc::format;
use alloc::vec::Vec;

/// True-positive rate the FPR metric is read at, in percent.
pub const TPR_PERCENT: usize = 95;

fn sorted(scores: &[f64], op: &'static str, role: &str) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::Empty(op));
    }
    if let Some(i) = scores.iter().position(|v| v.is_nan()) {
        return Err(Error::Contract(format!("{}: {} score {} is NaN", op, role, i)));
    }
    let mut out = scores.to_vec();
    out.sort_by(f64::total_cmp);
    Ok(out)
}

/// Count of values `< x` and `== x` in an ascending slice.
fn rank(sorted: &[f64], x: f64) -> (usize, usize) {
    let below = sorted.partition_point(|&v| v < x);
    let upto = sorted.partition_point(|&v| v <= x);
    (below, upto - below)
}

/// Area under the ROC curve: the probability that a random OOD score exceeds
/// a random ID score, ties counting one half.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    let id = sorted(id_scores, "auroc", "id")?;
    sorted(ood_scores, "auroc", "ood")?;
    // Twice the Mann-Whitney count keeps everything integral until the end.
    let mut twice: u128 = 0;
    for &x in ood_scores {
        let (below, equal) = rank(&id, x);
        twice += 2 * below as u128 + equal as u128;
    }
    Ok(twice as f64 / (2 * id.len() as u128 * ood_scores.len() as u128) as f64)
}

/// The decision threshold used by [`fpr_at_95tpr`]: the highest OOD score `t`
/// such that at least 95% of OOD scores are `≥ t`.
pub fn tpr95_threshold(ood_scores: &[f64]) -> Result<f64> {
    let ood = sorted(ood_scores, "fpr_at_95tpr", "ood")?;
    let n = ood.len();
    // k = ceil(0.95 n) positives must be kept; the k-th largest score keeps them.
    let k = (TPR_PERCENT * n).div_ceil(100);
    Ok(ood[n - k])
}

/// Fraction of ID scores flagged as OOD when the threshold keeps 95% of OOD.
pub fn fpr_at_95tpr(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    let id = sorted(id_scores, "fpr_at_95tpr", "id")?;
    let t = tpr95_threshold(ood_scores)?;
    let (below, _) = rank(&id, t);
    Ok((id.len() - below) as f64 / id.len() as f64)
}

/// Both metrics for one ID/OOD pairing.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub auroc: f64,
    pub fpr95: f64,
}

pub fn detection(id_scores: &[f64], ood_scores: &[f64]) -> Result<Detection> {
    Ok(Detection {
        auroc: auroc(id_scores, ood_scores)?,
        fpr95: fpr_at_95tpr(id_scores, ood_scores)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn pair_oracle(id: &[f64], ood: &[f64]) -> f64 {
        let mut wins = 0.0;
        for &o in ood {
            for &i in id {
                if o > i {
                    wins += 1.0;
                } else if o == i {
                    wins += 0.5;
                }
            }
        }
        wins / (id.len() * ood.len()) as f64
    }

    fn sweep_oracle(id: &[f64], ood: &[f64]) -> f64 {
        let mut best: Option<f64> = None;
        for &t in ood {
            let kept = ood.iter().filter(|&&o| o >= t).count();
            if kept as f64 / ood.len() as f64 >= 0.95 - 1e-12 && best.is_none_or(|b| t > b) {
                best = Some(t);
            }
        }
        let t = best.unwrap();
        id.iter().filter(|&&i| i >= t).count() as f64 / id.len() as f64
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.1, 0.2], &[0.8, 0.9]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.1, 0.4], &[0.3, 0.5]).unwrap(), 0.75);
        let same = [0.3, 0.1, 0.3, 0.7];
        assert_eq!(auroc(&same, &same).unwrap(), 0.5);
        assert!(auroc(&[], &[0.1]).is_err());
        assert!(auroc(&[0.1], &[f64::NAN]).is_err());
    }

    #[test]
    fn fpr_examples() {
        assert_eq!(fpr_at_95tpr(&[0.1, 0.2], &[0.8, 0.9]).unwrap(), 0.0);
        let twenty: Vec<f64> = (0..20).map(|i| i as f64 / 20.0).collect();
        assert_eq!(fpr_at_95tpr(&twenty, &twenty).unwrap(), 0.95);
        assert_eq!(fpr_at_95tpr(&[0.1, 0.5, 0.6, 0.9], &[0.55]).unwrap(), 0.5);
        assert_eq!(tpr95_threshold(&[0.55]).unwrap(), 0.55);
        assert!(fpr_at_95tpr(&[0.1], &[]).is_err());
    }

    #[test]
    fn all_tied_scores() {
        let id = vec![0.5; 7];
        let ood = vec![0.5; 3];
        assert_eq!(auroc(&id, &ood).unwrap(), 0.5);
        assert_eq!(fpr_at_95tpr(&id, &ood).unwrap(), 1.0);
    }

    fn score_set() -> impl Strategy<Value = Vec<f64>> {
        // Coarse grid so ties are frequent.
        prop::collection::vec((0u32..40).prop_map(|v| v as f64 / 40.0), 1..200)
    }

    proptest! {
        #[test]
        fn matches_oracles(id in score_set(), ood in score_set()) {
            prop_assert!((auroc(&id, &ood).unwrap() - pair_oracle(&id, &ood)).abs() <= 1e-12);
            prop_assert!((fpr_at_95tpr(&id, &ood).unwrap() - sweep_oracle(&id, &ood)).abs() <= 1e-12);
        }

        #[test]
        fn swapping_roles_complements(values in prop::collection::btree_set(0u32..100_000, 2..200),
                                      mask in any::<u64>()) {
            // Distinct values split into two non-empty tie-free sets.
            let (mut a, mut b) = (Vec::new(), Vec::new());
            for (i, &v) in values.iter().enumerate() {
                let x = v as f64 / 1000.0;
                if i == 0 || (i > 1 && (mask >> (i % 64)) & 1 == 1) { a.push(x) } else { b.push(x) }
            }
            let s = auroc(&a, &b).unwrap() + auroc(&b, &a).unwrap();
            prop_assert!((s - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn invariant_under_increasing_maps(id in score_set(), ood in score_set()) {
            let f = |v: f64| libm::exp(3.0 * v) - 7.0;
            let fi: Vec<f64> = id.iter().map(|&v| f(v)).collect();
            let fo: Vec<f64> = ood.iter().map(|&v| f(v)).collect();
            prop_assert_eq!(auroc(&id, &ood).unwrap(), auroc(&fi, &fo).unwrap());
            prop_assert_eq!(fpr_at_95tpr(&id, &ood).unwrap(), fpr_at_95tpr(&fi, &fo).unwrap());
        }

        #[test]
        fn metrics_lie_in_unit_interval(id in score_set(), ood in score_set()) {
            let d = detection(&id, &ood).unwrap();
            prop_assert!((0.0..=1.0).contains(&d.auroc));
            prop_assert!((0.0..=1.0).contains(&d.fpr95));
        }
    }
}
