//! Analytic energy model of the detector accelerator plus the cost of
//! transmitting images to the cloud.
//!
//! Per-operation energies are looked up by precision; memory reads are
//! charged per 16-bit word. The access counts below are a first-order
//! row-stationary model:
//!
//! | count | value |
//! |-------|-------|
//! | MACs  | `C_out·H_out·W_out·C_in·K²` |
//! | ACCs  | `C_out·H_out·W_out` (energy accumulator) |
//! | DRAM  | input words, first layer only |
//! | cache | `input words·K + weight words + output words` |
//! | SPAD  | `3·MACs` (weight, input and partial-sum access) |

use std::ops::{Add, AddAssign};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{read_json, write_json};
use crate::detector::DetectorSpec;
use crate::error::{bail, Result};
use crate::numerics::ConvGeometry;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionCost {
    pub bits: u32,
    pub mac_pj: f64,
    pub acc_pj: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareProfile {
    pub name: String,
    pub precisions: Vec<PrecisionCost>,
    pub dram_pj: f64,
    pub cache_pj: f64,
    pub spad_pj: f64,
    /// Energy to send one image to the cloud.
    pub transmit_mj: f64,
    pub pe_array: usize,
    pub word_bits: u32,
    /// Charge weight words as DRAM reads.
    #[serde(default)]
    pub include_weight_dram: bool,
    /// With `include_weight_dram`, charge weights once per session instead
    /// of once per image.
    #[serde(default = "yes")]
    pub amortize_weights: bool,
}

fn yes() -> bool {
    true
}

/// Per-image transmit energy for 64×64 images.
pub const TRANSMIT_MJ_64PX: f64 = 13.6;

impl Default for HardwareProfile {
    fn default() -> Self {
        let rows = [
            (4, 0.0575, 0.017),
            (6, 0.129, 0.038),
            (8, 0.23, 0.07),
            (12, 0.52, 0.15),
            (16, 0.92, 0.27),
        ];
        Self {
            name: "45nm-32pe".to_string(),
            precisions: rows
                .iter()
                .map(|&(bits, mac_pj, acc_pj)| PrecisionCost { bits, mac_pj, acc_pj })
                .collect(),
            dram_pj: 184.0,
            cache_pj: 10.0,
            spad_pj: 1.7,
            transmit_mj: 6.8,
            pe_array: 32,
            word_bits: 16,
            include_weight_dram: false,
            amortize_weights: true,
        }
    }
}

impl HardwareProfile {
    pub fn cost(&self, bits: u32) -> Result<PrecisionCost> {
        match self.precisions.iter().find(|p| p.bits == bits) {
            Some(p) => Ok(*p),
            None => bail!(
                InvalidArgument,
                "profile {:?} has no energy entry for {bits}-bit arithmetic",
                self.name
            ),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut all = vec![self.dram_pj, self.cache_pj, self.spad_pj, self.transmit_mj];
        for p in &self.precisions {
            all.push(p.mac_pj);
            all.push(p.acc_pj);
        }
        if all.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            bail!(Config, "profile {:?}: every energy must be positive", self.name);
        }
        for bits in crate::quant::SUPPORTED_BITS {
            self.cost(bits)?;
        }
        if self.word_bits == 0 || self.pe_array == 0 {
            bail!(Config, "profile {:?}: word width and PE array must be positive", self.name);
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let p: Self = read_json(path)?;
        p.validate()?;
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

/// Memory reads and arithmetic operations of executed layers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessCounts {
    pub dram: u64,
    pub cache: u64,
    pub spad: u64,
    pub macs: u64,
    pub accs: u64,
}

impl Add for AccessCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            dram: self.dram + o.dram,
            cache: self.cache + o.cache,
            spad: self.spad + o.spad,
            macs: self.macs + o.macs,
            accs: self.accs + o.accs,
        }
    }
}

impl AddAssign for AccessCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl std::iter::Sum for AccessCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

/// Counts for one image through one layer; `first_layer` adds the DRAM
/// fetch of the input image.
pub fn count_layer(g: &ConvGeometry, first_layer: bool) -> AccessCounts {
    let outputs = (g.out_c * g.out_h * g.out_w) as u64;
    let inputs = (g.in_c * g.in_h * g.in_w) as u64;
    let weights = (g.out_c * g.in_c * g.k * g.k) as u64;
    let macs = g.macs();
    AccessCounts {
        dram: if first_layer { inputs } else { 0 },
        cache: inputs * g.k as u64 + weights + outputs,
        spad: 3 * macs,
        macs,
        accs: outputs,
    }
}

/// Per-layer counts for one image through every layer of `spec`.
pub fn layer_counts(spec: &DetectorSpec) -> Result<Vec<AccessCounts>> {
    Ok(spec
        .geometries()?
        .iter()
        .enumerate()
        .map(|(i, g)| count_layer(g, i == 0))
        .collect())
}

/// Energy split by component, in joules.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub dram: f64,
    pub cache: f64,
    pub spad: f64,
    pub mac: f64,
    pub acc: f64,
}

impl EnergyBreakdown {
    pub fn total(&self) -> f64 {
        self.dram + self.cache + self.spad + self.mac + self.acc
    }
}

const PJ_PER_J: f64 = 1e12;

/// Energy of `counts` in joules, by component.
pub fn counts_energy(counts: AccessCounts, profile: &HardwareProfile, bits: u32) -> Result<EnergyBreakdown> {
    let c = profile.cost(bits)?;
    Ok(EnergyBreakdown {
        dram: profile.dram_pj * counts.dram as f64 / PJ_PER_J,
        cache: profile.cache_pj * counts.cache as f64 / PJ_PER_J,
        spad: profile.spad_pj * counts.spad as f64 / PJ_PER_J,
        mac: c.mac_pj * counts.macs as f64 / PJ_PER_J,
        acc: c.acc_pj * counts.accs as f64 / PJ_PER_J,
    })
}

/// Detection energy of a set of per-sample counts (each already truncated
/// at its exit layer). Weight DRAM traffic is added per the profile flags
/// using `weight_words` for the whole detector.
pub fn detection_energy(
    per_sample: &[AccessCounts],
    weight_words: u64,
    profile: &HardwareProfile,
    bits: u32,
) -> Result<EnergyBreakdown> {
    let mut total: AccessCounts = per_sample.iter().copied().sum();
    if profile.include_weight_dram && !per_sample.is_empty() {
        let times = if profile.amortize_weights {
            1
        } else {
            per_sample.len() as u64
        };
        total.dram += weight_words * times;
    }
    counts_energy(total, profile, bits)
}

/// `(p·N_nat·E_tx, q·N_adv·E_tx)` in joules.
pub fn transmission_energy(
    n_nat: usize,
    n_adv: usize,
    p: f64,
    q: f64,
    profile: &HardwareProfile,
) -> Result<(f64, f64)> {
    for (name, f) in [("p", p), ("q", q)] {
        if !(0.0..=1.0).contains(&f) {
            bail!(InvalidArgument, "{name} = {f} is not a fraction");
        }
    }
    let joules = |count: f64| count * profile.transmit_mj / 1000.0;
    Ok((joules(p * n_nat as f64), joules(q * n_adv as f64)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub profile: String,
    pub bits: Option<u32>,
    pub n_nat: usize,
    pub n_adv: usize,
    /// Fraction of naturals / adversarials sent to the cloud.
    pub p: f64,
    pub q: f64,
    pub transmit_nat_j: f64,
    pub transmit_adv_j: f64,
    pub detection_j: f64,
    pub detection_breakdown: EnergyBreakdown,
    pub total_j: f64,
}

impl EnergyReport {
    /// Everything is transmitted and nothing is spent on detection.
    pub fn baseline(n_nat: usize, n_adv: usize, profile: &HardwareProfile) -> Result<Self> {
        let (tn, ta) = transmission_energy(n_nat, n_adv, 1.0, 1.0, profile)?;
        Ok(Self {
            profile: profile.name.clone(),
            bits: None,
            n_nat,
            n_adv,
            p: 1.0,
            q: 1.0,
            transmit_nat_j: tn,
            transmit_adv_j: ta,
            detection_j: 0.0,
            detection_breakdown: EnergyBreakdown::default(),
            total_j: tn + ta + 0.0,
        })
    }
}

/// One sample as seen by the energy report: whether it was passed to the
/// cloud and what the detector executed on it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleCost {
    pub passed: bool,
    pub counts: AccessCounts,
}

/// Combines transmission of passed samples with detection work.
pub fn report(
    nat: &[SampleCost],
    adv: &[SampleCost],
    weight_words: u64,
    profile: &HardwareProfile,
    bits: u32,
) -> Result<EnergyReport> {
    let frac = |s: &[SampleCost]| {
        if s.is_empty() {
            0.0
        } else {
            s.iter().filter(|c| c.passed).count() as f64 / s.len() as f64
        }
    };
    let (p, q) = (frac(nat), frac(adv));
    let (tn, ta) = transmission_energy(nat.len(), adv.len(), p, q, profile)?;
    let counts: Vec<AccessCounts> = nat.iter().chain(adv).map(|c| c.counts).collect();
    let breakdown = detection_energy(&counts, weight_words, profile, bits)?;
    let detection_j = breakdown.total();
    Ok(EnergyReport {
        profile: profile.name.clone(),
        bits: Some(bits),
        n_nat: nat.len(),
        n_adv: adv.len(),
        p,
        q,
        transmit_nat_j: tn,
        transmit_adv_j: ta,
        detection_j,
        detection_breakdown: breakdown,
        total_j: tn + ta + detection_j,
    })
}
