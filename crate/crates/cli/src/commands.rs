use std::collections::HashSet;
use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};

use qesdet::attacks::{parse_eps, AttackConfig, AttackKind};
use qesdet::calibration::{recalibrate_for_transfer, BoundarySet, Percentiles};
use qesdet::classifier::{self, ClassifierArch, ClassifierPreset, ClassifierState, ClassifierTrainConfig};
use qesdet::data::{sample_nat, Checkpoint, Dataset, ModelKind, PixelEncoding};
use qesdet::detector::{DetectorState, Preset};
use qesdet::early_exit::{DetectionOutcome, EarlyExitDetector, ExitMode, Verdict};
use qesdet::energy::{self, layer_counts, AccessCounts, EnergyReport, HardwareProfile, SampleCost};
use qesdet::experiments::{self, DetectorSetup, LambdaSetting, VariantData};
use qesdet::metrics::{roc_points, EvalReport};
use qesdet::provenance::Provenance;
use qesdet::qes::{EpochEvent, TrainConfig};
use qesdet::synth::{self, SynthKind};

use crate::plot;
use crate::{
    AblateArgs, CalibrateArgs, DetectArgs, EnergyReportArgs, EvaluateArgs, GenAttacksArgs, GenSynthArgs,
    ModelInfoArgs, PercentileArgs, QesTrainArgs, Schedule, Sweep, TrainClassifierArgs, TransferArgs,
};

fn provenance<T: Serialize>(seed: Option<u64>, config: &T) -> Provenance {
    Provenance::new(seed).with_config(config).with_command(std::env::args())
}

/// A report body with the run's provenance in front.
#[derive(Serialize)]
struct Stamped<'a, T> {
    provenance: &'a Provenance,
    #[serde(flatten)]
    body: T,
}

fn write_report<T: Serialize>(path: &Path, prov: &Provenance, body: T) -> Result<()> {
    let text = serde_json::to_string_pretty(&Stamped { provenance: prov, body })?;
    write_text(path, &text)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn load_checkpoint(path: &Path, kind: ModelKind) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    ensure!(
        ck.header.kind == kind,
        "{} holds a {:?} checkpoint, expected {:?}",
        path.display(),
        ck.header.kind,
        kind
    );
    Ok(ck)
}

fn load_detector(path: &Path) -> Result<DetectorState> {
    Ok(DetectorState::from_checkpoint(&load_checkpoint(path, ModelKind::Detector)?)?)
}

fn load_classifier(path: &Path) -> Result<ClassifierState> {
    Ok(ClassifierState::from_checkpoint(&load_checkpoint(path, ModelKind::Classifier)?)?)
}

fn load_profile(path: Option<&Path>) -> Result<HardwareProfile> {
    match path {
        Some(p) => HardwareProfile::load(p).with_context(|| format!("loading profile {}", p.display())),
        None => Ok(HardwareProfile::default()),
    }
}

fn load_boundaries(path: &Path, d: &DetectorState) -> Result<BoundarySet> {
    let b = BoundarySet::load(path).with_context(|| format!("loading boundaries {}", path.display()))?;
    b.check_detector(d)
        .with_context(|| format!("{} was calibrated for a different detector", path.display()))?;
    Ok(b)
}

fn check_input(d: &DetectorState, data: &Dataset) -> Result<()> {
    let want = d.spec.input_shape(data.len());
    ensure!(
        data.images.shape() == want,
        "dataset {} has shape {}, detector expects {}",
        data.manifest.name,
        data.images.shape(),
        want
    );
    Ok(())
}

fn percentiles(p: &PercentileArgs) -> Result<Percentiles> {
    Ok(Percentiles::new(p.k, p.l, p.u)?)
}

fn schedule_config(schedule: Schedule, depth: usize) -> TrainConfig {
    match schedule {
        Schedule::Paper => TrainConfig::for_depth(depth),
        Schedule::Desk => TrainConfig::desk_scale(depth),
    }
}

fn progress(event: &EpochEvent) {
    if event.epoch == 1 || event.epoch % 10 == 0 {
        eprintln!("layer {} epoch {:>4} loss {:.6}", event.layer, event.epoch, event.loss);
    }
}

pub fn gen_synth(a: GenSynthArgs) -> Result<()> {
    let kind: SynthKind = a.kind.parse()?;
    let prov = provenance(Some(a.seed), &(kind, a.samples, a.start));
    let mut ds = synth::generate_range(kind, a.start, a.samples, a.seed)?;
    if let Some(split) = a.split {
        ds.manifest.name = format!("{kind}-{split}");
        ds.manifest.split = Some(split);
    }
    ds.manifest.provenance = Some(prov);
    ds.save(&a.out, PixelEncoding::U8)?;
    println!("wrote {} {} samples to {}", ds.len(), kind, a.out.display());
    Ok(())
}

pub fn train_classifier(a: TrainClassifierArgs) -> Result<()> {
    let preset: ClassifierPreset = a.preset.parse()?;
    let train = load_dataset(&a.data)?;
    let test = a.test.as_deref().map(load_dataset).transpose()?;
    let cfg = ClassifierTrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        batch_size: a.batch_size,
        seed: a.seed,
        ..ClassifierTrainConfig::default()
    };
    let s = train.images.shape();
    let arch = ClassifierArch::preset(preset, [s.c, s.h, s.w], train.num_classes());
    if let Some(t) = &test {
        ensure!(t.images.shape().item_len() == s.item_len(), "test set shape differs from training set");
    }
    let prov = provenance(Some(a.seed), &cfg);
    let (mut model, report) = classifier::train_classifier(arch, &train, test.as_ref(), &cfg)?;
    model.metadata = serde_json::json!({
        "train_config": cfg,
        "report": report,
        "train_dataset": train.manifest.name,
    });
    let mut ck = model.to_checkpoint();
    ck.header.provenance = Some(prov);
    ck.save(&a.out)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

/// Standard settings for `kind`, with the step size rescaled when the
/// budget is overridden so that α/ε stays the same.
fn attack_config(a: &GenAttacksArgs) -> Result<AttackConfig> {
    let kind: AttackKind = a.attack.parse()?;
    let mut cfg = AttackConfig::standard(kind);
    if let Some(eps) = &a.eps {
        let eps = parse_eps(eps)?;
        if cfg.eps > 0.0 {
            cfg.alpha *= eps / cfg.eps;
        }
        cfg.eps = eps;
    }
    if let Some(steps) = a.steps {
        cfg.steps = steps;
    }
    if let Some(alpha) = &a.alpha {
        cfg.alpha = parse_eps(alpha)?;
    }
    if let Some(sigma) = a.sigma {
        cfg.sigma = sigma;
    }
    if let Some(c) = a.c {
        cfg.c = c;
    }
    if let Some(kappa) = a.kappa {
        cfg.kappa = kappa;
    }
    cfg.target = a.target;
    cfg.seed = a.seed;
    cfg.validate()?;
    Ok(cfg)
}

pub fn gen_attacks(a: GenAttacksArgs) -> Result<()> {
    let cfg = attack_config(&a)?;
    let model = load_classifier(&a.classifier)?;
    let data = load_dataset(&a.data)?;
    let s = data.images.shape();
    ensure!(
        model.arch.input == [s.c, s.h, s.w],
        "classifier expects {:?}, dataset has ({}, {}, {})",
        model.arch.input,
        s.c,
        s.h,
        s.w
    );
    ensure!(
        data.num_classes() == model.arch.num_classes,
        "dataset has {} classes, classifier {}",
        data.num_classes(),
        model.arch.num_classes
    );
    let prov = provenance(Some(cfg.seed), &cfg);
    let mut adv = experiments::adversarial_dataset(&model, &model.fingerprint(), &data, &cfg, a.chunk)?;
    adv.manifest.provenance = Some(prov);
    adv.save(&a.out, PixelEncoding::F32)?;
    let preds = classifier::predict_classes(&model, &adv.images, a.chunk)?;
    let fooled = preds.iter().zip(&adv.labels).filter(|(p, l)| p != l).count();
    println!(
        "{}: {} samples, classifier wrong on {} ({:.1}%)",
        cfg.label(),
        adv.len(),
        fooled,
        100.0 * fooled as f64 / adv.len() as f64
    );
    Ok(())
}

/// Natural and adversarial sets must be aligned item by item.
fn check_pairs(nat: &Dataset, adv: &Dataset) -> Result<()> {
    ensure!(
        nat.images.shape() == adv.images.shape(),
        "natural set {} and adversarial set {} differ in shape",
        nat.images.shape(),
        adv.images.shape()
    );
    ensure!(nat.labels == adv.labels, "natural and adversarial labels are not aligned");
    if let Some(meta) = &adv.manifest.attack {
        ensure!(
            meta.source_dataset == nat.manifest.name,
            "adversarial set was built from {:?}, not {:?}",
            meta.source_dataset,
            nat.manifest.name
        );
    }
    Ok(())
}

pub fn qes_train(a: QesTrainArgs) -> Result<()> {
    let preset: Preset = a.preset.parse()?;
    let mut cfg = match &a.config {
        Some(p) => qesdet::data::read_json(p)?,
        None => schedule_config(a.schedule, a.depth),
    };
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    cfg.bits = a.bits;
    cfg.seed = a.seed;
    cfg.validate(a.depth)?;
    let nat = load_dataset(&a.nat)?;
    let adv = load_dataset(&a.adv)?;
    check_pairs(&nat, &adv)?;
    let setup = DetectorSetup {
        preset,
        depth: a.depth,
        seed: a.seed,
        qes: cfg,
        ..DetectorSetup::default()
    };
    let prov = provenance(Some(a.seed), &setup);
    let s = nat.images.shape();
    let spec = qesdet::detector::DetectorSpec::preset_with_depth(preset, [s.h, s.w], a.depth)?;
    let d0 = DetectorState::random(spec, a.seed)?;
    let mut observer = progress;
    let (mut d, report) = qesdet::qes::qes_train(d0, &nat.images, &adv.images, &setup.qes, &mut observer)?;
    d.metadata = serde_json::json!({
        "train_config": setup.qes,
        "init_seed": a.seed,
        "layers": report.layers,
        "nat_dataset": nat.manifest.name,
        "adv_dataset": adv.manifest.name,
    });
    let mut ck = d.to_checkpoint();
    ck.header.provenance = Some(prov);
    ck.save(&a.out)?;
    for l in &report.layers {
        println!(
            "layer {}: final loss {:.6}, mean energy natural {:.4} adversarial {:.4}",
            l.layer,
            l.epoch_losses.last().copied().unwrap_or(f64::NAN),
            l.nat_energy,
            l.adv_energy
        );
    }
    println!("fingerprint {}", d.fingerprint());
    Ok(())
}

pub fn calibrate(a: CalibrateArgs) -> Result<()> {
    let pct = percentiles(&a.pct)?;
    let d = load_detector(&a.detector)?;
    let data = load_dataset(&a.sample_nat)?;
    let s_nat = match a.count {
        Some(n) => sample_nat(&data.images, n, a.seed)?.0,
        None => data.images.clone(),
    };
    let prov = provenance(Some(a.seed), &(pct, a.count));
    let mut b = recalibrate_for_transfer(&d, &s_nat, pct)?;
    b.source.dataset = Some(data.manifest.name.clone());
    b.provenance = Some(prov);
    b.save(&a.out)?;
    for (i, band) in b.bands.iter().enumerate() {
        println!("layer {}: [{:.6}, {:.6}]", i + 1, band.lower, band.upper);
    }
    println!("layer {}: threshold {:.6}", b.depth(), b.threshold);
    Ok(())
}

/// Written by `detect`, read by `energy-report`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutcomeFile {
    pub provenance: Provenance,
    pub dataset: String,
    /// Whether the input set was produced by an attack.
    pub adversarial: bool,
    pub mode: ExitMode,
    pub detector_fingerprint: String,
    pub bits: u32,
    pub weight_words: u64,
    /// Per-image counts of each layer when the full network runs.
    pub layer_counts: Vec<AccessCounts>,
    pub outcomes: Vec<DetectionOutcome>,
}

pub fn detect(a: DetectArgs) -> Result<()> {
    let d = load_detector(&a.detector)?;
    let b = load_boundaries(&a.boundaries, &d)?;
    let data = load_dataset(&a.input)?;
    check_input(&d, &data)?;
    let mode = if a.no_early_exit {
        ExitMode::FullDepth
    } else {
        ExitMode::EarlyExit
    };
    let prov = provenance(None, &mode);
    let det = EarlyExitDetector::new(&d, &b)?;
    let outcomes = det.detect_all(&data.images, mode, a.chunk)?;
    let flagged = outcomes.iter().filter(|o| o.verdict == Verdict::Adversarial).count();
    let file = OutcomeFile {
        provenance: prov,
        dataset: data.manifest.name.clone(),
        adversarial: data.manifest.attack.is_some(),
        mode,
        detector_fingerprint: d.fingerprint(),
        bits: experiments::detector_bits(&d),
        weight_words: d.spec.num_weights() as u64,
        layer_counts: det.layer_counts().to_vec(),
        outcomes,
    };
    write_text(&a.out, &serde_json::to_string(&file)?)?;
    println!(
        "{}: {} of {} flagged adversarial",
        data.manifest.name,
        flagged,
        file.outcomes.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct EvaluateBody<'a> {
    detector_fingerprint: String,
    classifier_fingerprint: String,
    nat_dataset: &'a str,
    adv_dataset: &'a str,
    positive_class: &'static str,
    classifier_accuracy_pct: f64,
    #[serde(flatten)]
    report: EvalReport,
    energy: experiments::EnergyComparison,
}

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    let d = load_detector(&a.detector)?;
    let b = load_boundaries(&a.boundaries, &d)?;
    let model = load_classifier(&a.classifier)?;
    let nat = load_dataset(&a.nat)?;
    let adv = load_dataset(&a.adv)?;
    check_input(&d, &nat)?;
    check_input(&d, &adv)?;
    let prov = provenance(None, &b.percentiles);
    let eval = experiments::evaluate(&d, &b, &model, &nat, &adv, a.chunk)?;
    let energy = experiments::compare_energy(&d, &eval, &HardwareProfile::default())?;
    let mut report = eval.report.clone();
    let (sn, sa) = (report.scores_nat.clone().unwrap_or_default(), report.scores_adv.clone().unwrap_or_default());
    if !a.scores {
        report.scores_nat = None;
        report.scores_adv = None;
    }
    let points = roc_points(&sn, &sa)?;
    if let Some(p) = &a.roc {
        let mut csv = String::from("fpr,tpr\n");
        for (x, y) in &points {
            csv.push_str(&format!("{x},{y}\n"));
        }
        write_text(p, &csv)?;
    }
    if let Some(p) = &a.roc_svg {
        write_text(p, &plot::roc_svg(&points, report.auc))?;
    }
    println!(
        "AUC {:.4}  F1 {:.4}  Error {:.2}%  Accuracy {:.2}% (classifier alone {:.2}%)",
        report.auc, report.f1, report.error_pct, report.accuracy_pct, eval.classifier_accuracy_pct
    );
    write_report(
        &a.out,
        &prov,
        EvaluateBody {
            detector_fingerprint: d.fingerprint(),
            classifier_fingerprint: model.fingerprint(),
            nat_dataset: &nat.manifest.name,
            adv_dataset: &adv.manifest.name,
            positive_class: "adversarial",
            classifier_accuracy_pct: eval.classifier_accuracy_pct,
            report,
            energy,
        },
    )
}

#[derive(Serialize)]
struct EnergyBody {
    detector_fingerprint: String,
    report: EnergyReport,
    baseline: EnergyReport,
    /// Baseline total minus the detector system's total, in joules.
    saving_j: f64,
}

pub fn energy_report(a: EnergyReportArgs) -> Result<()> {
    let profile = load_profile(a.profile.as_deref())?;
    let mut files = Vec::new();
    for p in &a.outcomes {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let f: OutcomeFile =
            serde_json::from_str(&text).with_context(|| format!("parsing outcome file {}", p.display()))?;
        files.push(f);
    }
    let first = &files[0];
    for (f, p) in files.iter().zip(&a.outcomes).skip(1) {
        ensure!(
            f.detector_fingerprint == first.detector_fingerprint,
            "{} comes from a different detector",
            p.display()
        );
    }
    let bits = a.bits.unwrap_or(first.bits);
    profile.cost(bits)?;
    let prov = provenance(None, &(&profile, bits));
    let costs = |adversarial: bool| -> Vec<SampleCost> {
        files
            .iter()
            .filter(|f| f.adversarial == adversarial)
            .flat_map(|f| &f.outcomes)
            .map(|o| SampleCost {
                passed: o.verdict == Verdict::Natural,
                counts: o.total_counts(),
            })
            .collect()
    };
    let (nat, adv) = (costs(false), costs(true));
    let report = energy::report(&nat, &adv, first.weight_words, &profile, bits)?;
    let baseline = EnergyReport::baseline(nat.len(), adv.len(), &profile)?;
    if let Some(p) = &a.svg {
        let bars = [
            ("E_T,N baseline".to_string(), baseline.transmit_nat_j),
            ("E_T,A baseline".to_string(), baseline.transmit_adv_j),
            ("E_T,N".to_string(), report.transmit_nat_j),
            ("E_T,A".to_string(), report.transmit_adv_j),
            ("E_D".to_string(), report.detection_j),
        ];
        write_text(p, &plot::bar_chart_svg("Energy (J)", &bars))?;
    }
    println!(
        "p {:.4} q {:.4}  E_T,N {:.6} J  E_T,A {:.6} J  E_D {:.6} J  total {:.6} J (baseline {:.6} J)",
        report.p, report.q, report.transmit_nat_j, report.transmit_adv_j, report.detection_j, report.total_j, baseline.total_j
    );
    let saving_j = baseline.total_j - report.total_j;
    write_report(
        &a.out,
        &prov,
        EnergyBody {
            detector_fingerprint: first.detector_fingerprint.clone(),
            report,
            baseline,
            saving_j,
        },
    )
}

/// `"88,92"`, `"80..96"` (step 1) or `"80..96:4"`.
fn parse_values(s: &str) -> Result<Vec<f64>> {
    let s = s.trim();
    if let Some((lo, rest)) = s.split_once("..") {
        let (hi, step) = match rest.split_once(':') {
            Some((hi, step)) => (hi, step.trim().parse::<f64>()?),
            None => (rest, 1.0),
        };
        let (lo, hi): (f64, f64) = (lo.trim().parse()?, hi.trim().parse()?);
        ensure!(step > 0.0 && lo <= hi, "bad range {s:?}");
        let n = ((hi - lo) / step + 1e-9).floor() as usize;
        return Ok((0..=n).map(|i| lo + i as f64 * step).collect());
    }
    s.split(',')
        .map(|v| v.trim().parse::<f64>().with_context(|| format!("bad number {v:?}")))
        .collect()
}

fn parse_lambda(s: &str, depth: usize) -> Result<Vec<LambdaSetting>> {
    s.split(';')
        .map(|item| {
            let (n, a) = item
                .split_once(':')
                .with_context(|| format!("lambda setting {item:?} must look like 0.1:0.9,1.3,2.0"))?;
            let lambda_a = parse_values(a)?;
            ensure!(lambda_a.len() == depth, "{item:?} lists {} adversarial targets for depth {depth}", lambda_a.len());
            let n: f64 = n.trim().parse()?;
            Ok(LambdaSetting {
                lambda_n: vec![n; depth],
                lambda_a,
            })
        })
        .collect()
}

fn parse_arch(s: &str) -> Result<Vec<(Preset, usize)>> {
    s.split(',')
        .map(|item| {
            let (p, d) = item.split_once(':').unwrap_or((item, "3"));
            Ok((p.trim().parse()?, d.trim().parse()?))
        })
        .collect()
}

#[derive(Serialize)]
struct AblateBody<T> {
    sweep: &'static str,
    rows: Vec<T>,
}

pub fn ablate(a: AblateArgs) -> Result<()> {
    let profile = load_profile(a.profile.as_deref())?;
    let model = load_classifier(&a.classifier)?;
    let pool = load_dataset(&a.sample_nat)?;
    let nat = load_dataset(&a.nat)?;
    let advs = a.adv.iter().map(|p| load_dataset(p)).collect::<Result<Vec<_>>>()?;
    let ks = parse_values(&a.k)?;
    let ls = parse_values(&a.l)?;
    let us = parse_values(&a.u)?;

    if let Sweep::Klu = a.sweep {
        let Some(det_path) = &a.detector else {
            bail!("the KLU sweep needs --detector");
        };
        let d = load_detector(det_path)?;
        check_input(&d, &nat)?;
        let grid = experiments::klu_grid(&ks, &ls, &us);
        ensure!(!grid.is_empty(), "no valid (K, L, U) combination in the grid");
        let prov = provenance(Some(a.seed), &grid);
        let n = a.calibration_samples.min(pool.len());
        let (s_nat, _) = sample_nat(&pool.images, n, a.seed)?;
        let rows = experiments::sweep_klu(&d, &s_nat, &model, &nat, &advs[0], &grid, &profile, a.chunk)?;
        for r in &rows {
            println!(
                "K {:>5} L {:>5} U {:>4}  F1 {:.4}  Error {:>6.2}%  Accuracy {:>6.2}%  E_D/sample {:.4e} J",
                r.k, r.l, r.u, r.f1, r.error_pct, r.accuracy_pct, r.detection_j_per_sample
            );
        }
        return write_report(&a.out, &prov, AblateBody { sweep: "KLU", rows });
    }

    let (Some(tn), Some(ta)) = (&a.train_nat, &a.train_adv) else {
        bail!("this sweep trains detectors and needs --train-nat and --train-adv");
    };
    let train_nat = load_dataset(tn)?;
    let train_adv = load_dataset(ta)?;
    check_pairs(&train_nat, &train_adv)?;
    let pct = Percentiles::new(ks[0], ls[0], us[0])?;
    let mut qes = schedule_config(a.schedule, 3);
    if let Some(e) = a.epochs {
        qes.epochs = e;
    }
    qes.bits = a.bits;
    qes.seed = a.seed;
    let base = DetectorSetup {
        seed: a.seed,
        qes,
        percentiles: pct,
        calibration_samples: a.calibration_samples,
        calibration_seed: a.seed,
        ..DetectorSetup::default()
    };
    let data = VariantData {
        train_nat: &train_nat.images,
        train_adv: &train_adv.images,
        calib_pool: &pool.images,
        classifier: &model,
        test_nat: &nat,
        test_advs: &advs,
        profile: &profile,
        chunk: a.chunk,
    };
    let values = a.values.as_deref();
    let (name, rows) = match a.sweep {
        Sweep::Lambda => {
            let settings = parse_lambda(values.unwrap_or("0.1:0.9,1.3,2.0"), 3)?;
            let prov_rows = experiments::sweep_lambda(&data, &base, &settings)?;
            ("lambda", prov_rows)
        }
        Sweep::Arch => {
            let variants = parse_arch(values.unwrap_or("D1:3,D2:3,D3:3"))?;
            ("arch", experiments::sweep_architecture(&data, &base, &variants)?)
        }
        Sweep::DataFraction => {
            let fractions = parse_values(values.unwrap_or("0.1,0.4,0.6,1.0"))?;
            ("data-fraction", experiments::sweep_data_fraction(&data, &base, &fractions)?)
        }
        Sweep::Klu => unreachable!(),
    };
    for r in &rows {
        let aucs: Vec<String> = r.auc.iter().map(|(k, v)| format!("{k} {v:.4}")).collect();
        println!(
            "{:<40} AUC [{}]  F1 {:.4}  E_D/sample {:.4e} J",
            r.setting,
            aucs.join(", "),
            r.f1,
            r.detection_j_per_sample
        );
    }
    let prov = provenance(Some(a.seed), &(&base, values));
    write_report(&a.out, &prov, AblateBody { sweep: name, rows })
}

#[derive(Serialize)]
struct TransferBody {
    detector_fingerprint: String,
    target_dataset: String,
    calibration_samples: usize,
    evaluated_naturals: usize,
    boundaries: BoundarySet,
    rows: Vec<experiments::TransferRow>,
}

pub fn transfer(a: TransferArgs) -> Result<()> {
    let pct = percentiles(&a.pct)?;
    let target = load_dataset(&a.target)?;
    let advs = a.target_adv.iter().map(|p| load_dataset(p)).collect::<Result<Vec<_>>>()?;
    ensure!(a.samples > 0 && a.samples < target.len(), "--samples must lie in [1, {})", target.len());
    let d = match (&a.detector, &a.source, &a.source_adv) {
        (Some(p), _, _) => load_detector(p)?,
        (None, Some(sn), Some(sa)) => {
            let nat = load_dataset(sn)?;
            let adv = load_dataset(sa)?;
            check_pairs(&nat, &adv)?;
            let mut qes = schedule_config(a.schedule, 3);
            if let Some(e) = a.epochs {
                qes.epochs = e;
            }
            qes.bits = a.bits;
            qes.seed = a.seed;
            let setup = DetectorSetup {
                seed: a.seed,
                qes,
                ..DetectorSetup::default()
            };
            let mut observer = progress;
            experiments::train_detector(&setup, &nat.images, &adv.images, &nat.images, &mut observer)?.detector
        }
        _ => bail!("give either --detector or both --source and --source-adv"),
    };
    for adv in &advs {
        ensure!(adv.images.shape().c == 3, "{} is not a 3-channel set", adv.manifest.name);
    }
    let prov = provenance(Some(a.seed), &(pct, a.samples));
    let (calib, picked) = sample_nat(&target.images, a.samples, a.seed)?;
    let picked: HashSet<usize> = picked.into_iter().collect();
    let rest: Vec<usize> = (0..target.len()).filter(|i| !picked.contains(i)).collect();
    let eval_nat = target.subset(&rest);
    let fit = |ds: &Dataset| -> Dataset {
        let want = d.spec.input_shape(ds.len());
        if ds.images.shape() == want {
            ds.clone()
        } else {
            Dataset {
                images: qesdet::calibration::center_fit(&ds.images, want.h, want.w),
                ..ds.clone()
            }
        }
    };
    let eval_nat = fit(&eval_nat);
    let advs: Vec<Dataset> = advs.iter().map(fit).collect();
    let (mut b, rows) = experiments::transfer(&d, pct, &calib, &eval_nat, &advs, a.chunk)?;
    b.source.dataset = Some(target.manifest.name.clone());
    b.provenance = Some(prov.clone());
    if let Some(p) = &a.boundaries_out {
        b.save(p)?;
    }
    for r in &rows {
        println!("{:<12} AUC {:.4}  F1 {:.4}", r.attack, r.auc, r.f1);
    }
    write_report(
        &a.out,
        &prov,
        TransferBody {
            detector_fingerprint: d.fingerprint(),
            target_dataset: target.manifest.name.clone(),
            calibration_samples: a.samples,
            evaluated_naturals: eval_nat.len(),
            boundaries: b,
            rows,
        },
    )
}

#[derive(Serialize)]
struct LayerInfo {
    layer: usize,
    in_channels: usize,
    out_channels: usize,
    bits: Option<u32>,
    macs: u64,
    counts: AccessCounts,
    energy_j: f64,
}

pub fn model_info(a: ModelInfoArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let info = match ck.header.kind {
        ModelKind::Detector => {
            let profile = load_profile(a.profile.as_deref())?;
            let d = DetectorState::from_checkpoint(&ck)?;
            let counts = layer_counts(&d.spec)?;
            let bits = experiments::detector_bits(&d);
            let layers = d
                .spec
                .layers
                .iter()
                .zip(&counts)
                .zip(d.bits())
                .enumerate()
                .map(|(i, ((l, c), b))| {
                    Ok(LayerInfo {
                        layer: i + 1,
                        in_channels: l.in_channels,
                        out_channels: l.out_channels,
                        bits: b,
                        macs: c.macs,
                        counts: *c,
                        energy_j: energy::counts_energy(*c, &profile, b.unwrap_or(bits))?.total(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            serde_json::json!({
                "kind": "detector",
                "fingerprint": ck.fingerprint(),
                "spec": d.spec,
                "num_weights": d.spec.num_weights(),
                "weight_bytes": d.spec.num_weights() * bits as usize / 8,
                "layers": layers,
                "full_depth_energy_j": layers.iter().map(|l| l.energy_j).sum::<f64>(),
                "profile": profile.name,
                "metadata": ck.header.metadata,
                "provenance": ck.header.provenance,
            })
        }
        ModelKind::Classifier => {
            let m = ClassifierState::from_checkpoint(&ck)?;
            let params: usize = ck.header.tensors.iter().map(|t| t.shape.numel()).sum();
            serde_json::json!({
                "kind": "classifier",
                "fingerprint": ck.fingerprint(),
                "arch": m.arch,
                "num_parameters": params,
                "metadata": ck.header.metadata,
                "provenance": ck.header.provenance,
            })
        }
    };
    println!("{}", serde_json::to_string_pretty(&info)?);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn value_lists_and_ranges() {
        assert_eq!(parse_values("88, 92").unwrap(), vec![88.0, 92.0]);
        assert_eq!(parse_values("80..84").unwrap(), vec![80.0, 81.0, 82.0, 83.0, 84.0]);
        assert_eq!(parse_values("80..96:8").unwrap(), vec![80.0, 88.0, 96.0]);
        assert!(parse_values("9..1").is_err());
        assert!(parse_values("a,b").is_err());
    }

    #[test]
    fn lambda_and_arch_settings() {
        let l = parse_lambda("0.1:0.9,1.3,2.0;0.2:0.5,0.9,1.6", 3).unwrap();
        assert_eq!(l.len(), 2);
        assert_eq!(l[1].lambda_n, vec![0.2; 3]);
        assert_eq!(l[1].lambda_a, vec![0.5, 0.9, 1.6]);
        assert!(parse_lambda("0.1:0.9,1.3", 3).is_err());
        assert_eq!(parse_arch("D1:3,D2,d3:4").unwrap(), vec![(Preset::D1, 3), (Preset::D2, 3), (Preset::D3, 4)]);
    }
}
