//! Per-layer energy boundaries from natural samples.
//!
//! For every layer but the last the band `[pct(K − L), pct(K + U)]` of the
//! natural energy distribution is kept; the last layer gets the single
//! threshold `pct(K)`. Percentiles use the nearest-rank rule.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{read_json, write_json};
use crate::detector::DetectorState;
use crate::error::{bail, Error, Result};
use crate::numerics::{Shape4, Tensor4};
use crate::provenance::{sha256_hex, Provenance};

/// Sorted energies of one layer over a calibration set.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyDistribution {
    pub layer: usize,
    values: Vec<f64>,
}

impl EnergyDistribution {
    pub fn new(layer: usize, mut values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            bail!(InvalidArgument, "layer {layer}: empty energy distribution");
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index: i });
        }
        values.sort_by(f64::total_cmp);
        Ok(Self { layer, values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn percentile(&self, p: f64) -> Result<f64> {
        percentile(&self.values, p)
    }
}

/// Nearest-rank percentile of an ascending slice: the value at 1-based
/// rank `ceil(p/100 · N)`, with `p = 0` giving the minimum.
pub fn percentile(sorted: &[f64], p: f64) -> Result<f64> {
    if sorted.is_empty() {
        bail!(InvalidArgument, "percentile of an empty distribution");
    }
    if !(0.0..=100.0).contains(&p) {
        bail!(InvalidArgument, "percentile {p} outside [0, 100]");
    }
    let n = sorted.len();
    // p/100·N computed as p·N/100 keeps integer-valued products exact.
    let rank = (p * n as f64 / 100.0).ceil() as usize;
    Ok(sorted[rank.clamp(1, n) - 1])
}

/// The K, L, U percentile parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Percentiles {
    pub k: f64,
    pub l: f64,
    pub u: f64,
}

impl Default for Percentiles {
    fn default() -> Self {
        Self {
            k: 92.0,
            l: 30.0,
            u: 5.0,
        }
    }
}

impl Percentiles {
    pub fn new(k: f64, l: f64, u: f64) -> Result<Self> {
        let p = Self { k, l, u };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let Self { k, l, u } = *self;
        if ![k, l, u].iter().all(|v| v.is_finite() && *v >= 0.0) {
            bail!(Config, "K, L and U must be finite and non-negative");
        }
        if k > 100.0 || k - l < 0.0 || k + u > 100.0 {
            bail!(Config, "need 0 <= K - L and K + U <= 100, got K={k}, L={l}, U={u}");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub lower: f64,
    pub upper: f64,
}

/// How calibration images were brought to the detector's input size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputFit {
    #[default]
    None,
    CenterPadCrop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSource {
    pub num_samples: usize,
    /// SHA-256 over the calibration images as `f64` little-endian.
    pub samples_hash: String,
    #[serde(default)]
    pub input_fit: InputFit,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundarySet {
    pub percentiles: Percentiles,
    /// Bands for layers `1..n`.
    pub bands: Vec<Band>,
    /// Threshold on the last layer's energy.
    pub threshold: f64,
    /// Fingerprint of the detector checkpoint these boundaries belong to.
    pub detector_fingerprint: String,
    pub bits: Vec<Option<u32>>,
    pub source: CalibrationSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl BoundarySet {
    pub fn depth(&self) -> usize {
        self.bands.len() + 1
    }

    pub fn check_detector(&self, d: &DetectorState) -> Result<()> {
        let actual = d.fingerprint();
        if actual != self.detector_fingerprint {
            return Err(Error::Fingerprint {
                expected: self.detector_fingerprint.clone(),
                actual,
            });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let b: Self = read_json(path)?;
        b.percentiles.validate()?;
        if let Some(i) = b.bands.iter().position(|band| band.lower > band.upper) {
            bail!(Config, "{}: band of layer {} has lower > upper", path.display(), i + 1);
        }
        Ok(b)
    }
}

fn tensor_hash(x: &Tensor4) -> String {
    let bytes: Vec<u8> = x.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    sha256_hex(&bytes)
}

/// Per-layer energy distributions of `s_nat` from full-depth forwards.
pub fn energy_distributions(d: &DetectorState, s_nat: &Tensor4) -> Result<Vec<EnergyDistribution>> {
    if s_nat.shape().n == 0 {
        bail!(InvalidArgument, "calibration needs at least one natural sample");
    }
    let n = d.depth();
    let per = d.sample_energies_chunked(s_nat, n, 256)?;
    (0..n)
        .map(|i| EnergyDistribution::new(i + 1, per.iter().map(|e| e[i]).collect()))
        .collect()
}

pub fn generate_boundaries(d: &DetectorState, s_nat: &Tensor4, pct: Percentiles) -> Result<BoundarySet> {
    boundaries_with_fit(d, s_nat, pct, InputFit::None)
}

fn boundaries_with_fit(
    d: &DetectorState,
    s_nat: &Tensor4,
    pct: Percentiles,
    input_fit: InputFit,
) -> Result<BoundarySet> {
    pct.validate()?;
    let dists = energy_distributions(d, s_nat)?;
    let (last, rest) = dists.split_last().expect("detector has at least one layer");
    let bands = rest
        .iter()
        .map(|dist| {
            Ok(Band {
                lower: dist.percentile(pct.k - pct.l)?,
                upper: dist.percentile(pct.k + pct.u)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BoundarySet {
        percentiles: pct,
        bands,
        threshold: last.percentile(pct.k)?,
        detector_fingerprint: d.fingerprint(),
        bits: d.bits(),
        source: CalibrationSource {
            num_samples: s_nat.shape().n,
            samples_hash: tensor_hash(s_nat),
            input_fit,
            dataset: None,
        },
        provenance: None,
    })
}

/// Boundaries for a new dataset: same computation on target naturals,
/// which are center padded or cropped to the detector input if needed.
/// Weights are not touched.
pub fn recalibrate_for_transfer(
    d: &DetectorState,
    s_nat_target: &Tensor4,
    pct: Percentiles,
) -> Result<BoundarySet> {
    let want = d.spec.input_shape(s_nat_target.shape().n);
    let s = s_nat_target.shape();
    if s.c != want.c {
        bail!(Shape, "target images have {} channels, detector expects {}", s.c, want.c);
    }
    if (s.h, s.w) == (want.h, want.w) {
        boundaries_with_fit(d, s_nat_target, pct, InputFit::None)
    } else {
        let fitted = center_fit(s_nat_target, want.h, want.w);
        boundaries_with_fit(d, &fitted, pct, InputFit::CenterPadCrop)
    }
}

/// Zero-pads or crops every image around its center to `h × w`. When the
/// size difference is odd the extra row or column goes to the bottom/right.
pub fn center_fit(x: &Tensor4, h: usize, w: usize) -> Tensor4 {
    let s = x.shape();
    let out_shape = Shape4::new(s.n, s.c, h, w);
    let mut out = vec![0.0; out_shape.numel()];
    let off = |src: usize, dst: usize| (src as i64 - dst as i64) / 2;
    let (oy, ox) = (off(s.h, h), off(s.w, w));
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..h {
                let sy = y as i64 + oy;
                if sy < 0 || sy >= s.h as i64 {
                    continue;
                }
                for xx in 0..w {
                    let sx = xx as i64 + ox;
                    if sx < 0 || sx >= s.w as i64 {
                        continue;
                    }
                    out[((n * s.c + c) * h + y) * w + xx] = x.get(n, c, sy as usize, sx as usize);
                }
            }
        }
    }
    Tensor4::from_raw(out_shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{DetectorSpec, Preset};
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Smallest value `v` in the list such that at least `p`% of the values
    /// are `<= v`, found by scanning candidates with integer arithmetic.
    fn oracle(values: &[f64], p: f64) -> f64 {
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        if p == 0.0 {
            return sorted[0];
        }
        let n = sorted.len();
        for (i, v) in sorted.iter().enumerate() {
            if ((i + 1) * 100) as f64 >= p * n as f64 {
                return *v;
            }
        }
        sorted[n - 1]
    }

    #[test]
    fn nearest_rank_examples() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 92.0).unwrap(), 92.0);
        assert_eq!(percentile(&v, 100.0).unwrap(), 100.0);
        assert_eq!(percentile(&v, 0.0).unwrap(), 1.0);
        assert_eq!(percentile(&[1.0, 2.0, 3.0], 50.0).unwrap(), 2.0);
        assert!(percentile(&v, 100.5).is_err());
        assert!(percentile(&v, -1.0).is_err());
        assert!(percentile(&[], 50.0).is_err());
    }

    /// Every array of length 1..=12 over a 3-letter alphabet, at every
    /// integer percentile.
    #[test]
    fn matches_oracle_exhaustively() {
        for n in 1..=12u32 {
            for code in 0..3usize.pow(n) {
                let mut c = code;
                let values: Vec<f64> = (0..n)
                    .map(|_| {
                        let d = c % 3;
                        c /= 3;
                        d as f64
                    })
                    .collect();
                let mut sorted = values.clone();
                sorted.sort_by(f64::total_cmp);
                for p in 0..=100 {
                    let p = p as f64;
                    assert_eq!(percentile(&sorted, p).unwrap(), oracle(&values, p), "{values:?} p={p}");
                }
            }
        }
    }

    #[test]
    fn matches_oracle_on_distinct_values() {
        // Distinct values: every permutation pattern collapses to the sorted
        // list, so lengths up to 12 with arbitrary fractional percentiles.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in 1..=12 {
            let values: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let mut sorted = values.clone();
            sorted.sort_by(f64::total_cmp);
            for p in 0..=1000 {
                let p = p as f64 / 10.0;
                assert_eq!(percentile(&sorted, p).unwrap(), oracle(&values, p));
            }
        }
    }

    proptest! {
        #[test]
        fn percentile_is_scale_equivariant(values in prop::collection::vec(0.0f64..10.0, 1..50), p in 0.0f64..=100.0, c in 0.01f64..100.0) {
            let mut s = values.clone();
            s.sort_by(f64::total_cmp);
            let scaled: Vec<f64> = s.iter().map(|v| v * c).collect();
            prop_assert_eq!(percentile(&scaled, p).unwrap(), c * percentile(&s, p).unwrap());
        }

        #[test]
        fn percentile_is_monotone_in_p(values in prop::collection::vec(-5.0f64..5.0, 1..50), a in 0.0f64..=100.0, b in 0.0f64..=100.0) {
            let mut s = values.clone();
            s.sort_by(f64::total_cmp);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(percentile(&s, lo).unwrap() <= percentile(&s, hi).unwrap());
        }

        #[test]
        fn at_most_tail_fraction_exceeds(values in prop::collection::vec(0.0f64..1.0, 1..200), k in 0.0f64..=100.0) {
            let mut s = values.clone();
            s.sort_by(f64::total_cmp);
            let t = percentile(&s, k).unwrap();
            let above = s.iter().filter(|&&v| v > t).count() as f64;
            prop_assert!(above / s.len() as f64 <= (100.0 - k) / 100.0 + 1e-12);
        }
    }

    fn detector() -> DetectorState {
        let mut d = DetectorState::random(DetectorSpec::preset(Preset::D1, [8, 8]), 3).unwrap();
        d.set_all_bits(Some(16)).unwrap();
        d
    }

    fn images(n: usize, seed: u64, hw: usize) -> Tensor4 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = Shape4::new(n, 3, hw, hw);
        Tensor4::new(s, (0..s.numel()).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn paper_percentiles() {
        let p = Percentiles::default();
        assert_eq!((p.k - p.l, p.k + p.u, p.k), (62.0, 97.0, 92.0));
        assert!(Percentiles::new(10.0, 20.0, 0.0).is_err());
        assert!(Percentiles::new(98.0, 0.0, 5.0).is_err());
    }

    #[test]
    fn boundaries_follow_distributions() {
        let d = detector();
        let x = images(50, 1, 8);
        let b = generate_boundaries(&d, &x, Percentiles::default()).unwrap();
        let dists = energy_distributions(&d, &x).unwrap();
        assert_eq!(b.bands.len(), 2);
        for (band, dist) in b.bands.iter().zip(&dists) {
            assert_eq!(band.lower, dist.percentile(62.0).unwrap());
            assert_eq!(band.upper, dist.percentile(97.0).unwrap());
            assert!(band.lower <= band.upper);
        }
        assert_eq!(b.threshold, dists[2].percentile(92.0).unwrap());
        b.check_detector(&d).unwrap();
    }

    #[test]
    fn zero_width_band_when_l_and_u_vanish() {
        let d = detector();
        let x = images(20, 2, 8);
        let b = generate_boundaries(&d, &x, Percentiles::new(80.0, 0.0, 0.0).unwrap()).unwrap();
        for band in &b.bands {
            assert_eq!(band.lower, band.upper);
        }
    }

    #[test]
    fn identical_samples_give_degenerate_bands() {
        let d = detector();
        let one = images(1, 3, 8);
        let x = Tensor4::concat(&[&one, &one, &one, &one]).unwrap();
        let b = generate_boundaries(&d, &x, Percentiles::default()).unwrap();
        for band in &b.bands {
            assert_eq!(band.lower, band.upper);
        }
    }

    #[test]
    fn empty_calibration_set_is_an_error() {
        let d = detector();
        let x = Tensor4::zeros(Shape4::new(0, 3, 8, 8));
        assert!(generate_boundaries(&d, &x, Percentiles::default()).is_err());
    }

    #[test]
    fn transfer_on_source_samples_is_identity() {
        let d = detector();
        let x = images(30, 4, 8);
        assert_eq!(
            recalibrate_for_transfer(&d, &x, Percentiles::default()).unwrap(),
            generate_boundaries(&d, &x, Percentiles::default()).unwrap()
        );
    }

    #[test]
    fn transfer_scales_first_layer_bands() {
        let d = detector();
        let x = images(40, 5, 8);
        let alpha = 0.37;
        let a = recalibrate_for_transfer(&d, &x, Percentiles::default()).unwrap();
        let b = recalibrate_for_transfer(&d, &x.map(|v| v * alpha), Percentiles::default()).unwrap();
        let rel = |p: f64, q: f64| (p - q).abs() <= 1e-9 * p.abs().max(1e-12);
        assert!(rel(b.bands[0].lower, alpha * a.bands[0].lower));
        assert!(rel(b.bands[0].upper, alpha * a.bands[0].upper));
    }

    #[test]
    fn transfer_fits_other_sizes() {
        let d = detector();
        let big = images(10, 6, 12);
        let b = recalibrate_for_transfer(&d, &big, Percentiles::default()).unwrap();
        assert_eq!(b.source.input_fit, InputFit::CenterPadCrop);
        let small = images(10, 6, 6);
        assert!(recalibrate_for_transfer(&d, &small, Percentiles::default()).is_ok());
    }

    #[test]
    fn center_fit_round_trip() {
        let x = images(2, 7, 4);
        let padded = center_fit(&x, 8, 8);
        assert_eq!(padded.get(1, 2, 2, 2), x.get(1, 2, 0, 0));
        assert_eq!(padded.get(0, 0, 0, 0), 0.0);
        assert_eq!(center_fit(&padded, 4, 4), x);
        assert_eq!(center_fit(&x, 4, 4), x);
    }

    #[test]
    fn boundary_file_round_trip_and_mismatch() {
        let d = detector();
        let b = generate_boundaries(&d, &images(10, 8, 8), Percentiles::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.json");
        b.save(&p).unwrap();
        assert_eq!(BoundarySet::load(&p).unwrap(), b);
        let other = DetectorState::random(DetectorSpec::preset(Preset::D1, [8, 8]), 4).unwrap();
        assert!(matches!(b.check_detector(&other), Err(Error::Fingerprint { .. })));
    }
}
