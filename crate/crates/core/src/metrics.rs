//! Detection metrics. The positive class is "adversarial" throughout.

use serde::{Deserialize, Serialize};

use crate::early_exit::Verdict;
use crate::error::{bail, Result};

fn check_scores(nat: &[f64], adv: &[f64]) -> Result<()> {
    if nat.is_empty() || adv.is_empty() {
        bail!(InvalidArgument, "AUC needs both natural and adversarial scores");
    }
    if nat.iter().chain(adv).any(|v| v.is_nan()) {
        bail!(InvalidArgument, "AUC scores contain NaN");
    }
    Ok(())
}

/// Twice the Mann–Whitney count: `2·#{adv > nat} + #{adv = nat}`.
fn doubled_wins(nat: &[f64], adv: &[f64]) -> u128 {
    let mut sorted = nat.to_vec();
    sorted.sort_by(f64::total_cmp);
    adv.iter()
        .map(|&a| {
            let below = sorted.partition_point(|&v| v < a);
            let not_above = sorted.partition_point(|&v| v <= a);
            (2 * below + (not_above - below)) as u128
        })
        .sum()
}

/// Probability that a random adversarial score beats a random natural one,
/// ties counting one half.
pub fn auc(nat: &[f64], adv: &[f64]) -> Result<f64> {
    check_scores(nat, adv)?;
    let pairs = 2 * nat.len() as u128 * adv.len() as u128;
    Ok(doubled_wins(nat, adv) as f64 / pairs as f64)
}

/// ROC curve as `(false positive rate, true positive rate)` points, one per
/// distinct threshold, from `(0, 0)` to `(1, 1)`.
pub fn roc_points(nat: &[f64], adv: &[f64]) -> Result<Vec<(f64, f64)>> {
    check_scores(nat, adv)?;
    let mut all: Vec<(f64, bool)> = nat.iter().map(|&v| (v, false)).chain(adv.iter().map(|&v| (v, true))).collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (n_nat, n_adv) = (nat.len() as f64, adv.len() as f64);
    let (mut fp, mut tp) = (0usize, 0usize);
    let mut points = vec![(0.0, 0.0)];
    let mut i = 0;
    while i < all.len() {
        let t = all[i].0;
        while i < all.len() && all[i].0 == t {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / n_nat, tp as f64 / n_adv));
    }
    Ok(points)
}

/// Trapezoidal area under [`roc_points`].
pub fn roc_area(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    /// `predicted[i]` and `truth[i]` are true for "adversarial".
    pub fn from_flags(predicted: &[bool], truth: &[bool]) -> Result<Self> {
        if predicted.len() != truth.len() {
            bail!(Shape, "{} verdicts for {} labels", predicted.len(), truth.len());
        }
        let mut c = Self::default();
        for (&p, &t) in predicted.iter().zip(truth) {
            match (p, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    /// F1 of the adversarial class. With no positives at all, predicted or
    /// actual, the score is 1.
    pub fn f1(&self) -> f64 {
        if self.tp + self.fp + self.fn_ == 0 {
            return 1.0;
        }
        if self.tp == 0 {
            return 0.0;
        }
        let precision = self.tp as f64 / (self.tp + self.fp) as f64;
        let recall = self.tp as f64 / (self.tp + self.fn_) as f64;
        2.0 * precision * recall / (precision + recall)
    }
}

pub fn f1(verdicts: &[Verdict], truth: &[bool]) -> Result<f64> {
    let predicted: Vec<bool> = verdicts.iter().map(|v| v.is_adversarial()).collect();
    Ok(Confusion::from_flags(&predicted, truth)?.f1())
}

/// One sample of the detector + classifier pipeline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineSample {
    pub verdict: Verdict,
    pub classifier_correct: bool,
    pub adversarial: bool,
}

/// `(Error %, Accuracy %)`: Error is the share of adversarials that pass
/// the detector and fool the classifier; Accuracy is the share of naturals
/// that pass the detector and are classified correctly.
pub fn error_accuracy(samples: &[PipelineSample]) -> Result<(f64, f64)> {
    let n_adv = samples.iter().filter(|s| s.adversarial).count();
    let n_nat = samples.len() - n_adv;
    if n_adv == 0 || n_nat == 0 {
        bail!(InvalidArgument, "error and accuracy need both natural and adversarial samples");
    }
    let passed_wrong = samples
        .iter()
        .filter(|s| s.adversarial && s.verdict == Verdict::Natural && !s.classifier_correct)
        .count();
    let passed_right = samples
        .iter()
        .filter(|s| !s.adversarial && s.verdict == Verdict::Natural && s.classifier_correct)
        .count();
    Ok((
        100.0 * passed_wrong as f64 / n_adv as f64,
        100.0 * passed_right as f64 / n_nat as f64,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: f64,
    pub f1: f64,
    pub error_pct: f64,
    pub accuracy_pct: f64,
    pub confusion: Confusion,
    pub n_nat: usize,
    pub n_adv: usize,
    /// Samples that exited at each layer, naturals and adversarials together.
    pub exit_histogram: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores_nat: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores_adv: Option<Vec<f64>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop, prop_assert_eq, proptest, ProptestConfig};

    fn brute(nat: &[f64], adv: &[f64]) -> f64 {
        let mut twice = 0u128;
        for a in adv {
            for n in nat {
                twice += if a > n { 2 } else if a == n { 1 } else { 0 };
            }
        }
        twice as f64 / (2 * nat.len() * adv.len()) as f64
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.1, 0.2], &[0.8, 0.9]).unwrap(), 1.0);
        assert_eq!(auc(&[1.0, 2.0, 2.0], &[2.0, 1.0, 2.0]).unwrap(), 0.5);
        assert_eq!(auc(&[1.0, 3.0], &[2.0, 4.0]).unwrap(), 0.75);
        assert!(auc(&[], &[1.0]).is_err());
        assert!(auc(&[1.0], &[f64::NAN]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(300))]

        #[test]
        fn auc_matches_pair_count(
            nat in prop::collection::vec(0u8..20, 1..1000),
            adv in prop::collection::vec(0u8..20, 1..1000),
        ) {
            // Small integer alphabet so ties are common.
            let nat: Vec<f64> = nat.into_iter().map(f64::from).collect();
            let adv: Vec<f64> = adv.into_iter().map(f64::from).collect();
            prop_assert_eq!(auc(&nat, &adv).unwrap(), brute(&nat, &adv));
        }

        #[test]
        fn auc_is_invariant_under_monotone_maps(
            nat in prop::collection::vec(-3.0f64..3.0, 1..200),
            adv in prop::collection::vec(-3.0f64..3.0, 1..200),
        ) {
            let f = |v: &f64| v.exp() * 2.0 + 1.0;
            let (tn, ta): (Vec<f64>, Vec<f64>) = (nat.iter().map(f).collect(), adv.iter().map(f).collect());
            prop_assert_eq!(auc(&nat, &adv).unwrap(), auc(&tn, &ta).unwrap());
        }

        #[test]
        fn roc_area_matches_auc(
            nat in prop::collection::vec(0u8..10, 1..100),
            adv in prop::collection::vec(0u8..10, 1..100),
        ) {
            let nat: Vec<f64> = nat.into_iter().map(f64::from).collect();
            let adv: Vec<f64> = adv.into_iter().map(f64::from).collect();
            let a = roc_area(&roc_points(&nat, &adv).unwrap());
            prop_assert_eq!((a * 1e9).round(), (auc(&nat, &adv).unwrap() * 1e9).round());
        }
    }

    #[test]
    fn f1_examples() {
        let c = Confusion { tp: 8, fp: 2, tn: 0, fn_: 2 };
        assert!((c.f1() - 0.8).abs() < 1e-15);
        assert_eq!(Confusion { tp: 0, fp: 0, tn: 5, fn_: 0 }.f1(), 1.0);
        assert_eq!(Confusion { tp: 0, fp: 0, tn: 5, fn_: 3 }.f1(), 0.0);
        let truth = [true, true, false];
        let v = [Verdict::Adversarial, Verdict::Adversarial, Verdict::Natural];
        assert_eq!(f1(&v, &truth).unwrap(), 1.0);
        assert_eq!(f1(&[Verdict::Natural; 3], &truth).unwrap(), 0.0);
        assert!(f1(&v[..2], &truth).is_err());
    }

    fn sample(adv: bool, caught: bool, correct: bool) -> PipelineSample {
        PipelineSample {
            verdict: if caught { Verdict::Adversarial } else { Verdict::Natural },
            classifier_correct: correct,
            adversarial: adv,
        }
    }

    #[test]
    fn error_and_accuracy() {
        let mut s = vec![sample(true, true, false); 4];
        s.push(sample(false, false, true));
        assert_eq!(error_accuracy(&s).unwrap(), (0.0, 100.0));

        // Half the adversarials slip through, half of those fool the model.
        let mut s = vec![
            sample(true, true, false),
            sample(true, true, true),
            sample(true, false, false),
            sample(true, false, true),
        ];
        s.extend([sample(false, false, true), sample(false, false, false), sample(false, true, true)]);
        let (err, acc) = error_accuracy(&s).unwrap();
        assert_eq!(err, 25.0);
        assert!((acc - 100.0 / 3.0).abs() < 1e-12);
        assert!(error_accuracy(&s[..4]).is_err());
    }
}
