//! End-to-end drivers: data preparation, detector training and calibration,
//! evaluation, energy comparison, ablation sweeps and transfer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attacks::{self, AttackConfig, AttackKind};
use crate::calibration::{generate_boundaries, recalibrate_for_transfer, BoundarySet, Percentiles};
use crate::classifier::{
    predict_classes, train_classifier, Classifier, ClassifierArch, ClassifierPreset, ClassifierReport,
    ClassifierState, ClassifierTrainConfig,
};
use crate::data::{sample_nat, AttackMetadata, Dataset};
use crate::detector::{DetectorSpec, DetectorState, Preset};
use crate::early_exit::{DetectionOutcome, EarlyExitDetector, ExitMode, Verdict};
use crate::energy::{self, EnergyReport, HardwareProfile, SampleCost};
use crate::error::{bail, Result};
use crate::metrics::{auc, error_accuracy, Confusion, EvalReport, PipelineSample};
use crate::numerics::Tensor4;
use crate::qes::{qes_train, TrainConfig, TrainObserver, TrainReport};
use crate::synth::{self, SynthKind};

pub const DEFAULT_CHUNK: usize = 200;

/// Everything needed to train and calibrate one detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorSetup {
    pub preset: Preset,
    /// Number of layers; 3 for the standard presets.
    pub depth: usize,
    pub seed: u64,
    pub qes: TrainConfig,
    pub percentiles: Percentiles,
    pub calibration_samples: usize,
    pub calibration_seed: u64,
}

impl Default for DetectorSetup {
    fn default() -> Self {
        Self {
            preset: Preset::D1,
            depth: 3,
            seed: 0,
            qes: TrainConfig::desk_scale(3),
            percentiles: Percentiles::default(),
            calibration_samples: 1000,
            calibration_seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedDetector {
    pub detector: DetectorState,
    pub report: TrainReport,
    pub boundaries: BoundarySet,
}

/// QES-trains a fresh detector on aligned natural/adversarial sets, then
/// calibrates it on `calibration_samples` images drawn from `calib_pool`.
pub fn train_detector(
    setup: &DetectorSetup,
    train_nat: &Tensor4,
    train_adv: &Tensor4,
    calib_pool: &Tensor4,
    observer: &mut dyn TrainObserver,
) -> Result<TrainedDetector> {
    let s = train_nat.shape();
    let spec = DetectorSpec::preset_with_depth(setup.preset, [s.h, s.w], setup.depth)?;
    let d0 = DetectorState::random(spec, setup.seed)?;
    let (detector, report) = qes_train(d0, train_nat, train_adv, &setup.qes, observer)?;
    let n_cal = setup.calibration_samples.min(calib_pool.shape().n);
    let (s_nat, _) = sample_nat(calib_pool, n_cal, setup.calibration_seed)?;
    let boundaries = generate_boundaries(&detector, &s_nat, setup.percentiles)?;
    Ok(TrainedDetector {
        detector,
        report,
        boundaries,
    })
}

/// Runs `cfg` against `model` on every sample of `source` and packages the
/// result as a dataset that records where it came from.
pub fn adversarial_dataset(
    model: &dyn Classifier,
    classifier_fingerprint: &str,
    source: &Dataset,
    cfg: &AttackConfig,
    chunk: usize,
) -> Result<Dataset> {
    let out = attacks::run_chunked(model, &source.images, &source.labels, cfg, chunk)?;
    let name = format!("{}-{}", source.manifest.name, cfg.label());
    let mut ds = Dataset::new(&name, out.images, source.labels.clone(), source.num_classes())?;
    ds.manifest.split = source.manifest.split.clone();
    ds.manifest.attack = Some(AttackMetadata {
        config: cfg.clone(),
        source_classifier: classifier_fingerprint.to_string(),
        source_dataset: source.manifest.name.clone(),
    });
    Ok(ds)
}

/// Attack label of an adversarial dataset, or its name if it has none.
pub fn attack_label(ds: &Dataset) -> String {
    ds.manifest
        .attack
        .as_ref()
        .map(|a| a.config.label())
        .unwrap_or_else(|| ds.manifest.name.clone())
}

/// AUC of the full-depth last-layer energy, adversarial as positive.
pub fn detection_auc(d: &DetectorState, nat: &Tensor4, adv: &Tensor4) -> Result<f64> {
    auc(&crate::early_exit::score(d, nat)?, &crate::early_exit::score(d, adv)?)
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvalReport,
    /// Natural accuracy of the classifier alone, in percent.
    pub classifier_accuracy_pct: f64,
    pub early_nat: Vec<DetectionOutcome>,
    pub early_adv: Vec<DetectionOutcome>,
    pub full_nat: Vec<DetectionOutcome>,
    pub full_adv: Vec<DetectionOutcome>,
}

fn last_energy(o: &DetectionOutcome) -> f64 {
    *o.energies.last().expect("outcome has at least one energy")
}

/// AUC from full-depth scores; F1, Error and Accuracy from early-exit
/// verdicts combined with the classifier's predictions.
pub fn evaluate(
    d: &DetectorState,
    b: &BoundarySet,
    classifier: &dyn Classifier,
    nat: &Dataset,
    adv: &Dataset,
    chunk: usize,
) -> Result<Evaluation> {
    if nat.is_empty() || adv.is_empty() {
        bail!(InvalidArgument, "evaluation needs natural and adversarial samples");
    }
    let det = EarlyExitDetector::new(d, b)?;
    let early_nat = det.detect_all(&nat.images, ExitMode::EarlyExit, chunk)?;
    let early_adv = det.detect_all(&adv.images, ExitMode::EarlyExit, chunk)?;
    let full_nat = det.detect_all(&nat.images, ExitMode::FullDepth, chunk)?;
    let full_adv = det.detect_all(&adv.images, ExitMode::FullDepth, chunk)?;
    let scores_nat: Vec<f64> = full_nat.iter().map(last_energy).collect();
    let scores_adv: Vec<f64> = full_adv.iter().map(last_energy).collect();

    let pred_nat = predict_classes(classifier, &nat.images, chunk)?;
    let pred_adv = predict_classes(classifier, &adv.images, chunk)?;
    let mut samples = Vec::with_capacity(nat.len() + adv.len());
    for (o, (p, l)) in early_nat.iter().zip(pred_nat.iter().zip(&nat.labels)) {
        samples.push(PipelineSample {
            verdict: o.verdict,
            classifier_correct: p == l,
            adversarial: false,
        });
    }
    for (o, (p, l)) in early_adv.iter().zip(pred_adv.iter().zip(&adv.labels)) {
        samples.push(PipelineSample {
            verdict: o.verdict,
            classifier_correct: p == l,
            adversarial: true,
        });
    }
    let (error_pct, accuracy_pct) = error_accuracy(&samples)?;
    let flags: Vec<bool> = samples.iter().map(|s| s.verdict.is_adversarial()).collect();
    let truth: Vec<bool> = samples.iter().map(|s| s.adversarial).collect();
    let confusion = Confusion::from_flags(&flags, &truth)?;
    let mut exit_histogram = vec![0; d.depth()];
    for o in early_nat.iter().chain(&early_adv) {
        exit_histogram[o.exit_layer - 1] += 1;
    }
    let correct = pred_nat.iter().zip(&nat.labels).filter(|(p, l)| p == l).count();
    Ok(Evaluation {
        report: EvalReport {
            auc: auc(&scores_nat, &scores_adv)?,
            f1: confusion.f1(),
            error_pct,
            accuracy_pct,
            confusion,
            n_nat: nat.len(),
            n_adv: adv.len(),
            exit_histogram,
            scores_nat: Some(scores_nat),
            scores_adv: Some(scores_adv),
        },
        classifier_accuracy_pct: 100.0 * correct as f64 / nat.len() as f64,
        early_nat,
        early_adv,
        full_nat,
        full_adv,
    })
}

/// Bit width the detector runs at; unquantized detectors are costed at 16.
pub fn detector_bits(d: &DetectorState) -> u32 {
    d.bits().into_iter().flatten().max().unwrap_or(16)
}

fn costs(outcomes: &[DetectionOutcome]) -> Vec<SampleCost> {
    outcomes
        .iter()
        .map(|o| SampleCost {
            passed: o.verdict == Verdict::Natural,
            counts: o.total_counts(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyComparison {
    pub early_exit: EnergyReport,
    pub full_depth: EnergyReport,
    pub baseline: EnergyReport,
    /// Early-exit detection energy over full-depth detection energy.
    pub detection_ratio: f64,
}

/// Energy reports for early exit, full depth and the no-detector baseline
/// over the same samples.
pub fn compare_energy(d: &DetectorState, eval: &Evaluation, profile: &HardwareProfile) -> Result<EnergyComparison> {
    let bits = detector_bits(d);
    let words = d.spec.num_weights() as u64;
    let early_exit = energy::report(&costs(&eval.early_nat), &costs(&eval.early_adv), words, profile, bits)?;
    let full_depth = energy::report(&costs(&eval.full_nat), &costs(&eval.full_adv), words, profile, bits)?;
    let baseline = EnergyReport::baseline(eval.early_nat.len(), eval.early_adv.len(), profile)?;
    let detection_ratio = early_exit.detection_j / full_depth.detection_j;
    Ok(EnergyComparison {
        early_exit,
        full_depth,
        baseline,
        detection_ratio,
    })
}

/// Desk-scale end-to-end run on a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub dataset: SynthKind,
    pub data_seed: u64,
    pub train_samples: usize,
    pub test_samples: usize,
    pub classifier_preset: ClassifierPreset,
    pub classifier: ClassifierTrainConfig,
    pub attack: AttackConfig,
    /// Training images (from the front of the training split) that get an
    /// adversarial twin for QES training.
    pub qes_samples: usize,
    pub detector: DetectorSetup,
    pub chunk: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dataset: SynthKind::Shapes,
            data_seed: 1,
            train_samples: 10_000,
            test_samples: 2_000,
            classifier_preset: ClassifierPreset::Small,
            classifier: ClassifierTrainConfig {
                epochs: 8,
                ..ClassifierTrainConfig::default()
            },
            attack: AttackConfig::standard(AttackKind::Pgd),
            qes_samples: 10_000,
            detector: DetectorSetup::default(),
            chunk: DEFAULT_CHUNK,
        }
    }
}

/// Datasets, classifier and adversaries shared by every detector variant.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Dataset,
    pub test: Dataset,
    pub classifier: ClassifierState,
    pub classifier_report: ClassifierReport,
    /// Adversarial twins of `train.head(qes_samples)`.
    pub train_adv: Dataset,
    pub test_adv: Dataset,
}

impl Prepared {
    pub fn qes_nat(&self) -> Tensor4 {
        self.train.images.batch_range(0, self.train_adv.len())
    }
}

/// Train/test split of a synthetic dataset; the test split continues the
/// sample stream after the training split.
pub fn synthetic_split(kind: SynthKind, train: usize, test: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let mut tr = synth::generate(kind, train, seed)?;
    let mut te = synth::generate_range(kind, train, test, seed)?;
    tr.manifest.name = format!("{kind}-train");
    tr.manifest.split = Some("train".into());
    te.manifest.name = format!("{kind}-test");
    te.manifest.split = Some("test".into());
    Ok((tr, te))
}

pub fn prepare(cfg: &PipelineConfig) -> Result<Prepared> {
    if cfg.qes_samples == 0 || cfg.qes_samples > cfg.train_samples {
        bail!(Config, "qes_samples must lie in [1, train_samples]");
    }
    let (train, test) = synthetic_split(cfg.dataset, cfg.train_samples, cfg.test_samples, cfg.data_seed)?;
    let s = train.images.shape();
    let arch = ClassifierArch::preset(cfg.classifier_preset, [s.c, s.h, s.w], train.num_classes());
    let (classifier, classifier_report) = train_classifier(arch, &train, Some(&test), &cfg.classifier)?;
    let fp = classifier.fingerprint();
    let train_adv = adversarial_dataset(&classifier, &fp, &train.head(cfg.qes_samples), &cfg.attack, cfg.chunk)?;
    let test_adv = adversarial_dataset(&classifier, &fp, &test, &cfg.attack, cfg.chunk)?;
    Ok(Prepared {
        train,
        test,
        classifier,
        classifier_report,
        train_adv,
        test_adv,
    })
}

/// Trains and calibrates a detector on prepared data, with `s_nat` drawn
/// from the training split.
pub fn detector_for(p: &Prepared, setup: &DetectorSetup, observer: &mut dyn TrainObserver) -> Result<TrainedDetector> {
    train_detector(setup, &p.qes_nat(), &p.train_adv.images, &p.train.images, observer)
}

/// One row of the K/L/U sweep. AUC does not depend on the percentiles; it
/// is repeated so each row is self-contained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KluRow {
    pub k: f64,
    pub l: f64,
    pub u: f64,
    pub auc: f64,
    pub f1: f64,
    pub error_pct: f64,
    pub accuracy_pct: f64,
    /// Early-exit detection energy per sample, in joules.
    pub detection_j_per_sample: f64,
    pub mean_exit_layer: f64,
}

/// Recalibrates `d` for every percentile triple and evaluates each.
pub fn sweep_klu(
    d: &DetectorState,
    s_nat: &Tensor4,
    classifier: &dyn Classifier,
    nat: &Dataset,
    adv: &Dataset,
    grid: &[Percentiles],
    profile: &HardwareProfile,
    chunk: usize,
) -> Result<Vec<KluRow>> {
    grid.iter()
        .map(|&pct| {
            let b = generate_boundaries(d, s_nat, pct)?;
            let eval = evaluate(d, &b, classifier, nat, adv, chunk)?;
            let energy = compare_energy(d, &eval, profile)?;
            let n = (eval.early_nat.len() + eval.early_adv.len()) as f64;
            let exits: usize = eval.early_nat.iter().chain(&eval.early_adv).map(|o| o.exit_layer).sum();
            Ok(KluRow {
                k: pct.k,
                l: pct.l,
                u: pct.u,
                auc: eval.report.auc,
                f1: eval.report.f1,
                error_pct: eval.report.error_pct,
                accuracy_pct: eval.report.accuracy_pct,
                detection_j_per_sample: energy.early_exit.detection_j / n,
                mean_exit_layer: exits as f64 / n,
            })
        })
        .collect()
}

/// Every `(K, L, U)` of the cartesian grid that passes validation.
pub fn klu_grid(ks: &[f64], ls: &[f64], us: &[f64]) -> Vec<Percentiles> {
    let mut out = Vec::new();
    for &k in ks {
        for &l in ls {
            for &u in us {
                if let Ok(p) = Percentiles::new(k, l, u) {
                    out.push(p);
                }
            }
        }
    }
    out
}

/// Data shared by detector-variant sweeps.
pub struct VariantData<'a> {
    pub train_nat: &'a Tensor4,
    pub train_adv: &'a Tensor4,
    pub calib_pool: &'a Tensor4,
    pub classifier: &'a dyn Classifier,
    pub test_nat: &'a Dataset,
    /// Evaluation adversaries; the first one drives F1 and energy columns.
    pub test_advs: &'a [Dataset],
    pub profile: &'a HardwareProfile,
    pub chunk: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantRow {
    pub setting: String,
    pub auc: BTreeMap<String, f64>,
    pub f1: f64,
    pub error_pct: f64,
    pub accuracy_pct: f64,
    pub detection_j_per_sample: f64,
    pub final_losses: Vec<f64>,
}

/// Trains one detector variant and scores it on every test attack.
pub fn run_variant(data: &VariantData, setting: &str, setup: &DetectorSetup) -> Result<VariantRow> {
    let Some(first) = data.test_advs.first() else {
        bail!(InvalidArgument, "variant sweeps need at least one adversarial test set");
    };
    let t = train_detector(setup, data.train_nat, data.train_adv, data.calib_pool, &mut ())?;
    let eval = evaluate(&t.detector, &t.boundaries, data.classifier, data.test_nat, first, data.chunk)?;
    let energy = compare_energy(&t.detector, &eval, data.profile)?;
    let n = (eval.early_nat.len() + eval.early_adv.len()) as f64;
    let mut aucs = BTreeMap::new();
    aucs.insert(attack_label(first), eval.report.auc);
    for adv in &data.test_advs[1..] {
        aucs.insert(attack_label(adv), detection_auc(&t.detector, &data.test_nat.images, &adv.images)?);
    }
    Ok(VariantRow {
        setting: setting.to_string(),
        auc: aucs,
        f1: eval.report.f1,
        error_pct: eval.report.error_pct,
        accuracy_pct: eval.report.accuracy_pct,
        detection_j_per_sample: energy.early_exit.detection_j / n,
        final_losses: t
            .report
            .layers
            .iter()
            .map(|l| l.epoch_losses.last().copied().unwrap_or(f64::NAN))
            .collect(),
    })
}

/// Natural and adversarial energy targets of one λ setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSetting {
    pub lambda_n: Vec<f64>,
    pub lambda_a: Vec<f64>,
}

pub fn sweep_lambda(data: &VariantData, base: &DetectorSetup, settings: &[LambdaSetting]) -> Result<Vec<VariantRow>> {
    settings
        .iter()
        .map(|s| {
            let mut setup = base.clone();
            setup.qes.lambda_n = s.lambda_n.clone();
            setup.qes.lambda_a = s.lambda_a.clone();
            run_variant(data, &format!("lambda_n={:?} lambda_a={:?}", s.lambda_n, s.lambda_a), &setup)
        })
        .collect()
}

/// Detector presets and depths. Targets and learning rates follow the
/// depth as in [`TrainConfig::for_depth`]; the other settings of `base`
/// are kept.
pub fn sweep_architecture(
    data: &VariantData,
    base: &DetectorSetup,
    variants: &[(Preset, usize)],
) -> Result<Vec<VariantRow>> {
    variants
        .iter()
        .map(|&(preset, depth)| {
            let mut setup = base.clone();
            setup.preset = preset;
            setup.depth = depth;
            let scale = base.qes.learning_rates[0] / TrainConfig::for_depth(base.depth).learning_rates[0];
            let fresh = TrainConfig::for_depth(depth);
            setup.qes.lambda_n = fresh.lambda_n;
            setup.qes.lambda_a = fresh.lambda_a;
            setup.qes.learning_rates = fresh.learning_rates.iter().map(|lr| lr * scale).collect();
            run_variant(data, &format!("{preset} depth {depth}"), &setup)
        })
        .collect()
}

/// Trains on the first `fraction` of the aligned training pairs.
pub fn sweep_data_fraction(data: &VariantData, base: &DetectorSetup, fractions: &[f64]) -> Result<Vec<VariantRow>> {
    let n = data.train_nat.shape().n;
    fractions
        .iter()
        .map(|&f| {
            if !(f > 0.0 && f <= 1.0) {
                bail!(InvalidArgument, "data fraction {f} outside (0, 1]");
            }
            let m = ((n as f64 * f).round() as usize).max(1);
            let nat = data.train_nat.batch_range(0, m);
            let adv = data.train_adv.batch_range(0, m);
            let sub = VariantData {
                train_nat: &nat,
                train_adv: &adv,
                ..*data
            };
            run_variant(&sub, &format!("fraction {f}"), base)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferRow {
    pub attack: String,
    pub auc: f64,
    pub f1: f64,
}

/// Recalibrates `d` on `target_calib` (weights untouched) and scores each
/// target attack. F1 uses the early-exit verdicts under the new boundaries.
pub fn transfer(
    d: &DetectorState,
    pct: Percentiles,
    target_calib: &Tensor4,
    target_nat: &Dataset,
    target_advs: &[Dataset],
    chunk: usize,
) -> Result<(BoundarySet, Vec<TransferRow>)> {
    let b = recalibrate_for_transfer(d, target_calib, pct)?;
    let det = EarlyExitDetector::new(d, &b)?;
    let nat_flags: Vec<bool> = det
        .detect_all(&target_nat.images, ExitMode::EarlyExit, chunk)?
        .iter()
        .map(|o| o.verdict.is_adversarial())
        .collect();
    let rows = target_advs
        .iter()
        .map(|adv| {
            let adv_flags: Vec<bool> = det
                .detect_all(&adv.images, ExitMode::EarlyExit, chunk)?
                .iter()
                .map(|o| o.verdict.is_adversarial())
                .collect();
            let flags: Vec<bool> = nat_flags.iter().chain(&adv_flags).copied().collect();
            let truth: Vec<bool> = (0..flags.len()).map(|i| i >= nat_flags.len()).collect();
            Ok(TransferRow {
                attack: attack_label(adv),
                auc: detection_auc(d, &target_nat.images, &adv.images)?,
                f1: Confusion::from_flags(&flags, &truth)?.f1(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((b, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_setup(epochs: usize) -> DetectorSetup {
        let mut qes = TrainConfig::desk_scale(3);
        qes.epochs = epochs;
        qes.batch_size = 8;
        DetectorSetup {
            qes,
            calibration_samples: 16,
            ..DetectorSetup::default()
        }
    }

    fn tiny_data() -> (Dataset, Dataset, ClassifierState) {
        let (train, test) = synthetic_split(SynthKind::Shapes, 24, 12, 3).unwrap();
        let arch = ClassifierArch::preset(ClassifierPreset::Small, [3, 32, 32], 10);
        let model = ClassifierState::random(arch, 1).unwrap();
        (train, test, model)
    }

    #[test]
    fn adversarial_dataset_records_its_origin() {
        let (_, test, model) = tiny_data();
        let cfg = AttackConfig::standard(AttackKind::Fgsm);
        let adv = adversarial_dataset(&model, "abc", &test, &cfg, 5).unwrap();
        assert_eq!(adv.len(), test.len());
        assert_eq!(adv.labels, test.labels);
        let meta = adv.manifest.attack.as_ref().unwrap();
        assert_eq!(meta.source_classifier, "abc");
        assert_eq!(meta.source_dataset, "shapes-test");
        assert_eq!(attack_label(&adv), "fgsm");
        assert_eq!(attack_label(&test), "shapes-test");
    }

    #[test]
    fn evaluation_is_consistent_with_its_parts() {
        let (train, test, model) = tiny_data();
        let adv_train = adversarial_dataset(&model, "m", &train, &AttackConfig::standard(AttackKind::Fgsm), 8).unwrap();
        let adv_test = adversarial_dataset(&model, "m", &test, &AttackConfig::standard(AttackKind::Fgsm), 8).unwrap();
        let t = train_detector(&tiny_setup(2), &train.images, &adv_train.images, &train.images, &mut ()).unwrap();
        let eval = evaluate(&t.detector, &t.boundaries, &model, &test, &adv_test, 5).unwrap();
        let r = &eval.report;
        assert_eq!(r.exit_histogram.iter().sum::<usize>(), 24);
        let c = r.confusion;
        assert_eq!((c.tp + c.fn_, c.tn + c.fp), (12, 12));
        assert_eq!(r.auc, detection_auc(&t.detector, &test.images, &adv_test.images).unwrap());
        assert!(r.accuracy_pct <= eval.classifier_accuracy_pct);
        // Full-depth outcomes always reach the last layer.
        assert!(eval.full_nat.iter().chain(&eval.full_adv).all(|o| o.exit_layer == 3));

        let cmp = compare_energy(&t.detector, &eval, &HardwareProfile::default()).unwrap();
        assert!(cmp.detection_ratio > 0.0 && cmp.detection_ratio <= 1.0);
        assert_eq!(cmp.baseline.detection_j, 0.0);
        assert_eq!(cmp.baseline.n_adv, 12);
    }

    #[test]
    fn klu_grid_skips_invalid_triples() {
        let g = klu_grid(&[80.0, 96.0], &[5.0, 90.0], &[5.0]);
        assert_eq!(g, vec![Percentiles::new(80.0, 5.0, 5.0).unwrap()]);
    }

    #[test]
    fn data_fraction_sweep_rejects_bad_fractions() {
        let (train, test, model) = tiny_data();
        let profile = HardwareProfile::default();
        let advs = [test.clone()];
        let data = VariantData {
            train_nat: &train.images,
            train_adv: &train.images,
            calib_pool: &train.images,
            classifier: &model,
            test_nat: &test,
            test_advs: &advs,
            profile: &profile,
            chunk: 8,
        };
        assert!(sweep_data_fraction(&data, &tiny_setup(0), &[0.0]).is_err());
        assert!(sweep_data_fraction(&data, &tiny_setup(0), &[1.5]).is_err());
    }

    #[test]
    fn transfer_recalibrates_without_touching_weights() {
        let (train, _, _) = tiny_data();
        let setup = tiny_setup(1);
        let t = train_detector(&setup, &train.images, &train.images.map(|v| v * 0.5), &train.images, &mut ()).unwrap();
        let glyphs = synth::generate(SynthKind::Glyphs, 20, 9).unwrap();
        let advs = [Dataset::new("g2", glyphs.images.map(|v| v * 0.9), glyphs.labels.clone(), 10).unwrap()];
        let before = t.detector.fingerprint();
        let (b, rows) = transfer(&t.detector, Percentiles::default(), &glyphs.images, &glyphs, &advs, 7).unwrap();
        assert_eq!(t.detector.fingerprint(), before);
        assert_eq!(b.source.num_samples, 20);
        assert_eq!(rows.len(), 1);
        assert!((0.0..=1.0).contains(&rows[0].auc));
    }
}
