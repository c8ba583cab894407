//! Inference with early exit.
//!
//! At layer `i < n` a sample whose energy is below the band exits as
//! natural and one above the band exits as adversarial; energies inside the
//! band or equal to an edge go on to the next layer. At the last layer the
//! sample is adversarial only if its energy is strictly above the
//! threshold.

use serde::{Deserialize, Serialize};

use crate::calibration::BoundarySet;
use crate::detector::{mean_abs, DetectorState};
use crate::energy::{layer_counts, AccessCounts};
use crate::error::{bail, Result};
use crate::numerics::Tensor4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Natural,
    Adversarial,
}

impl Verdict {
    pub fn is_adversarial(self) -> bool {
        self == Verdict::Adversarial
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExitMode {
    #[default]
    EarlyExit,
    /// Run every layer and decide on the last layer's threshold alone.
    FullDepth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionOutcome {
    pub verdict: Verdict,
    /// 1-based layer at which the decision was made.
    pub exit_layer: usize,
    /// Energies of layers `1..=exit_layer`.
    pub energies: Vec<f64>,
    /// Work done by layers `1..=exit_layer`.
    pub counts: Vec<AccessCounts>,
}

impl DetectionOutcome {
    pub fn total_counts(&self) -> AccessCounts {
        self.counts.iter().copied().sum()
    }
}

/// Decision at `layer` (1-based) for `energy`, or `None` to continue.
pub fn decide(b: &BoundarySet, layer: usize, energy: f64) -> Option<Verdict> {
    if layer == b.depth() {
        return Some(if energy > b.threshold {
            Verdict::Adversarial
        } else {
            Verdict::Natural
        });
    }
    let band = b.bands[layer - 1];
    if energy < band.lower {
        Some(Verdict::Natural)
    } else if energy > band.upper {
        Some(Verdict::Adversarial)
    } else {
        None
    }
}

/// A detector paired with boundaries whose fingerprint has been checked.
#[derive(Debug, Clone)]
pub struct EarlyExitDetector<'a> {
    detector: &'a DetectorState,
    boundaries: &'a BoundarySet,
    counts: Vec<AccessCounts>,
}

impl<'a> EarlyExitDetector<'a> {
    pub fn new(detector: &'a DetectorState, boundaries: &'a BoundarySet) -> Result<Self> {
        boundaries.check_detector(detector)?;
        if boundaries.depth() != detector.depth() {
            bail!(
                Config,
                "boundaries cover {} layers, detector has {}",
                boundaries.depth(),
                detector.depth()
            );
        }
        Ok(Self {
            detector,
            boundaries,
            counts: layer_counts(&detector.spec)?,
        })
    }

    /// Full-network per-image counts by layer.
    pub fn layer_counts(&self) -> &[AccessCounts] {
        &self.counts
    }

    /// One outcome per batch item. Samples that exit are dropped from the
    /// batch before the next layer runs.
    pub fn detect_batch(&self, x: &Tensor4, mode: ExitMode) -> Result<Vec<DetectionOutcome>> {
        let n = x.shape().n;
        let depth = self.detector.depth();
        let mut energies: Vec<Vec<f64>> = vec![Vec::new(); n];
        let mut verdicts: Vec<Option<(Verdict, usize)>> = vec![None; n];
        let mut active: Vec<usize> = (0..n).collect();
        let mut h = x.clone();
        if x.shape() != self.detector.spec.input_shape(n) {
            bail!(Shape, "detector expects input {}, got {}", self.detector.spec.input_shape(n), x.shape());
        }
        for layer in 1..=depth {
            if active.is_empty() {
                break;
            }
            let pre = self.detector.layer_pre_activation(layer, &h)?;
            let mut keep = Vec::with_capacity(active.len());
            for (row, &i) in active.iter().enumerate() {
                let e = mean_abs(pre.item_slice(row));
                energies[i].push(e);
                let decision = match mode {
                    ExitMode::EarlyExit => decide(self.boundaries, layer, e),
                    ExitMode::FullDepth if layer == depth => decide(self.boundaries, layer, e),
                    ExitMode::FullDepth => None,
                };
                match decision {
                    Some(v) => verdicts[i] = Some((v, layer)),
                    None => keep.push(row),
                }
            }
            let out = self.detector.layer_output(layer, pre);
            h = if keep.len() == active.len() { out } else { out.select(&keep) };
            active = keep.iter().map(|&r| active[r]).collect();
        }
        Ok(verdicts
            .into_iter()
            .zip(energies)
            .map(|(v, energies)| {
                let (verdict, exit_layer) = v.expect("last layer always decides");
                DetectionOutcome {
                    verdict,
                    exit_layer,
                    energies,
                    counts: self.counts[..exit_layer].to_vec(),
                }
            })
            .collect())
    }

    /// Like [`detect_batch`](Self::detect_batch) in chunks of `chunk`.
    pub fn detect_all(&self, x: &Tensor4, mode: ExitMode, chunk: usize) -> Result<Vec<DetectionOutcome>> {
        let n = x.shape().n;
        let mut out = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let end = (start + chunk.max(1)).min(n);
            out.extend(self.detect_batch(&x.batch_range(start, end), mode)?);
            start = end;
        }
        Ok(out)
    }

    /// Detection of a single sample `(1, c, h, w)`.
    pub fn detect(&self, x: &Tensor4) -> Result<DetectionOutcome> {
        if x.shape().n != 1 {
            bail!(Shape, "detect takes one sample, got a batch of {}", x.shape().n);
        }
        Ok(self.detect_batch(x, ExitMode::EarlyExit)?.remove(0))
    }
}

/// Checks the fingerprint and runs early-exit detection on one sample.
pub fn detect(d: &DetectorState, b: &BoundarySet, x: &Tensor4) -> Result<DetectionOutcome> {
    EarlyExitDetector::new(d, b)?.detect(x)
}

/// Full-depth last-layer energy of every sample, used as the ROC score.
pub fn score(d: &DetectorState, x: &Tensor4) -> Result<Vec<f64>> {
    let n = d.depth();
    Ok(d.sample_energies_chunked(x, n, 256)?
        .into_iter()
        .map(|e| e[n - 1])
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::{generate_boundaries, Band, Percentiles};
    use crate::detector::{DetectorSpec, Preset};
    use crate::numerics::Shape4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (DetectorState, Tensor4) {
        let mut d = DetectorState::random(DetectorSpec::preset(Preset::D1, [8, 8]), 1).unwrap();
        d.set_all_bits(Some(16)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = Shape4::new(60, 3, 8, 8);
        let x = Tensor4::new(s, (0..s.numel()).map(|_| rng.random::<f64>()).collect()).unwrap();
        (d, x)
    }

    fn with_bands(d: &DetectorState, x: &Tensor4, bands: Vec<Band>, threshold: f64) -> BoundarySet {
        let mut b = generate_boundaries(d, x, Percentiles::default()).unwrap();
        b.bands = bands;
        b.threshold = threshold;
        b
    }

    #[test]
    fn decision_rules_and_ties() {
        let (d, x) = setup();
        let b = with_bands(
            &d,
            &x,
            vec![Band { lower: 1.0, upper: 2.0 }, Band { lower: 3.0, upper: 4.0 }],
            0.5,
        );
        assert_eq!(decide(&b, 1, 0.9), Some(Verdict::Natural));
        assert_eq!(decide(&b, 1, 2.1), Some(Verdict::Adversarial));
        assert_eq!(decide(&b, 1, 1.0), None);
        assert_eq!(decide(&b, 1, 2.0), None);
        assert_eq!(decide(&b, 2, 4.5), Some(Verdict::Adversarial));
        assert_eq!(decide(&b, 3, 0.5), Some(Verdict::Natural));
        assert_eq!(decide(&b, 3, 0.50001), Some(Verdict::Adversarial));
    }

    #[test]
    fn low_first_energy_exits_at_layer_one() {
        let (d, x) = setup();
        let b = with_bands(
            &d,
            &x,
            vec![Band { lower: 1e9, upper: 1e9 }, Band { lower: 0.0, upper: 1e9 }],
            0.0,
        );
        let o = detect(&d, &b, &x.sample(0)).unwrap();
        assert_eq!((o.verdict, o.exit_layer), (Verdict::Natural, 1));
        assert_eq!(o.energies.len(), 1);
        assert_eq!(o.counts.len(), 1);
    }

    #[test]
    fn second_layer_adversarial_exit() {
        let (d, x) = setup();
        let b = with_bands(
            &d,
            &x,
            vec![Band { lower: 0.0, upper: 1e9 }, Band { lower: -1.0, upper: -1.0 }],
            0.0,
        );
        let o = detect(&d, &b, &x.sample(3)).unwrap();
        assert_eq!((o.verdict, o.exit_layer), (Verdict::Adversarial, 2));
    }

    #[test]
    fn batch_and_single_agree_and_counts_grow_with_exit() {
        let (d, x) = setup();
        let b = generate_boundaries(&d, &x, Percentiles::new(60.0, 30.0, 20.0).unwrap()).unwrap();
        let det = EarlyExitDetector::new(&d, &b).unwrap();
        let batch = det.detect_all(&x, ExitMode::EarlyExit, 7).unwrap();
        let full = det.layer_counts().iter().copied().sum::<AccessCounts>();
        let mut exits = [0; 3];
        for (i, o) in batch.iter().enumerate() {
            assert_eq!(o, &det.detect(&x.sample(i)).unwrap());
            exits[o.exit_layer - 1] += 1;
            if o.exit_layer == 3 {
                assert_eq!(o.total_counts(), full);
            }
        }
        // These percentiles spread exits across all three layers.
        assert!(exits.iter().all(|&c| c > 0), "{exits:?}");
        let per: Vec<u64> = (1..=3)
            .map(|l| det.layer_counts()[..l].iter().map(|c| c.macs).sum())
            .collect();
        assert!(per.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn agreement_with_score_when_no_early_exit_fires() {
        let (d, x) = setup();
        let b = generate_boundaries(&d, &x, Percentiles::default()).unwrap();
        let det = EarlyExitDetector::new(&d, &b).unwrap();
        let scores = score(&d, &x).unwrap();
        let full = det.detect_all(&x, ExitMode::FullDepth, 16).unwrap();
        let early = det.detect_all(&x, ExitMode::EarlyExit, 16).unwrap();
        for ((s, f), e) in scores.iter().zip(&full).zip(&early) {
            assert_eq!(f.exit_layer, 3);
            assert_eq!(f.energies[2], *s);
            assert_eq!(f.verdict.is_adversarial(), *s > b.threshold);
            if e.exit_layer == 3 {
                assert_eq!(e.verdict, f.verdict);
            }
        }
        // On the calibration set itself at most (100 − K)% of naturals are
        // flagged by the last-layer threshold.
        let flagged = full.iter().filter(|o| o.verdict.is_adversarial()).count() as f64;
        assert!(flagged / 60.0 <= 0.08 + 1.0 / 60.0);
    }

    #[test]
    fn fingerprint_mismatch_is_rejected() {
        let (d, x) = setup();
        let b = generate_boundaries(&d, &x, Percentiles::default()).unwrap();
        let mut other = d.clone();
        other.set_all_bits(Some(8)).unwrap();
        assert!(EarlyExitDetector::new(&other, &b).is_err());
    }

    #[test]
    fn zero_detector_scores_zero() {
        let mut d = DetectorState::zeros(DetectorSpec::preset(Preset::D1, [8, 8])).unwrap();
        d.set_all_bits(Some(16)).unwrap();
        let (_, x) = setup();
        assert!(score(&d, &x).unwrap().iter().all(|&s| s == 0.0));
    }
}
