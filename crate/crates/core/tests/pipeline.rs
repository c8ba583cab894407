use qesdet::attacks::{AttackConfig, AttackKind};
use qesdet::calibration::Percentiles;
use qesdet::classifier::ClassifierTrainConfig;
use qesdet::data::{Checkpoint, Dataset, PixelEncoding};
use qesdet::detector::DetectorState;
use qesdet::early_exit::{EarlyExitDetector, ExitMode, Verdict};
use qesdet::energy::{EnergyReport, HardwareProfile};
use qesdet::experiments::{self, DetectorSetup, PipelineConfig, VariantData};
use qesdet::qes::TrainConfig;
use qesdet::synth::SynthKind;

fn tiny() -> PipelineConfig {
    let mut qes = TrainConfig::desk_scale(3);
    qes.epochs = 3;
    qes.batch_size = 20;
    PipelineConfig {
        train_samples: 100,
        test_samples: 40,
        classifier: ClassifierTrainConfig {
            epochs: 1,
            ..ClassifierTrainConfig::default()
        },
        attack: AttackConfig {
            steps: 2,
            ..AttackConfig::standard(AttackKind::Pgd)
        },
        qes_samples: 60,
        detector: DetectorSetup {
            qes,
            calibration_samples: 50,
            ..DetectorSetup::default()
        },
        chunk: 32,
        ..PipelineConfig::default()
    }
}

#[test]
fn prepared_pipeline_is_consistent() {
    let cfg = tiny();
    let p = experiments::prepare(&cfg).unwrap();
    assert_eq!((p.train.len(), p.test.len(), p.train_adv.len()), (100, 40, 60));
    assert_eq!(p.train_adv.labels, p.train.labels[..60]);
    let meta = p.test_adv.manifest.attack.as_ref().unwrap();
    assert_eq!(meta.source_dataset, "shapes-test");
    assert_eq!(meta.source_classifier, p.classifier.fingerprint());
    let dist = p
        .test_adv
        .images
        .zip_map(&p.test.images, |a, b| (a - b).abs())
        .unwrap()
        .max_abs();
    assert!(dist <= 8.0 / 255.0 + 1e-12);

    let t = experiments::detector_for(&p, &cfg.detector, &mut ()).unwrap();
    assert_eq!(t.boundaries.source.num_samples, 50);
    assert_eq!(t.report.layers.len(), 3);

    let ev = experiments::evaluate(&t.detector, &t.boundaries, &p.classifier, &p.test, &p.test_adv, 16).unwrap();
    assert_eq!(ev.report.n_nat + ev.report.n_adv, 80);
    assert_eq!(ev.report.exit_histogram.iter().sum::<usize>(), 80);
    // Full depth runs every layer; early exit never does more work.
    for (e, f) in ev.early_nat.iter().chain(&ev.early_adv).zip(ev.full_nat.iter().chain(&ev.full_adv)) {
        assert_eq!(f.exit_layer, 3);
        assert!(e.exit_layer <= f.exit_layer);
        assert_eq!(&f.energies[..e.exit_layer], &e.energies[..]);
        let (ec, fc) = (e.total_counts(), f.total_counts());
        assert!(ec.macs <= fc.macs && ec.dram <= fc.dram && ec.spad <= fc.spad);
    }

    let profile = HardwareProfile::default();
    let cmp = experiments::compare_energy(&t.detector, &ev, &profile).unwrap();
    assert!(cmp.detection_ratio <= 1.0 + 1e-12);
    let r = &cmp.early_exit;
    assert_eq!(r.total_j, r.transmit_nat_j + r.transmit_adv_j + r.detection_j);
    assert_eq!(cmp.baseline, EnergyReport::baseline(40, 40, &profile).unwrap());
}

#[test]
fn saved_artifacts_reproduce_detection() {
    let dir = tempfile::tempdir().unwrap();
    let (train, mut test) = experiments::synthetic_split(SynthKind::Glyphs, 60, 20, 3).unwrap();
    let adv = Dataset {
        images: train.images.map(|v| (v * 1.3).min(1.0)),
        ..train.clone()
    };
    let mut setup = DetectorSetup::default();
    setup.qes.epochs = 2;
    setup.qes.batch_size = 20;
    setup.calibration_samples = 30;
    let t = experiments::train_detector(&setup, &train.images, &adv.images, &train.images, &mut ()).unwrap();

    let (dp, bp, tp) = (dir.path().join("d.qck"), dir.path().join("b.json"), dir.path().join("t"));
    t.detector.to_checkpoint().save(&dp).unwrap();
    t.boundaries.save(&bp).unwrap();
    test.save(&tp, PixelEncoding::U8).unwrap();

    let d = DetectorState::from_checkpoint(&Checkpoint::load(&dp).unwrap()).unwrap();
    let b = qesdet::calibration::BoundarySet::load(&bp).unwrap();
    let data = Dataset::load(&tp).unwrap();
    assert_eq!(data.images, test.images);
    let before = EarlyExitDetector::new(&t.detector, &t.boundaries)
        .unwrap()
        .detect_all(&test.images, ExitMode::EarlyExit, 7)
        .unwrap();
    let after = EarlyExitDetector::new(&d, &b).unwrap().detect_all(&data.images, ExitMode::EarlyExit, 20).unwrap();
    assert_eq!(before, after);
    assert!(after.iter().all(|o| (1..=3).contains(&o.exit_layer)));
    let flagged = after.iter().filter(|o| o.verdict == Verdict::Adversarial).count();
    assert!(flagged < after.len());
}

#[test]
fn sweeps_produce_one_row_per_setting() {
    let (train, test) = experiments::synthetic_split(SynthKind::Shapes, 40, 20, 5).unwrap();
    let adv = Dataset {
        images: train.images.map(|v| (v * 1.5).min(1.0)),
        ..train.clone()
    };
    let test_adv = Dataset {
        images: test.images.map(|v| (v * 1.5).min(1.0)),
        ..test.clone()
    };
    let model = qesdet::classifier::ClassifierState::random(
        qesdet::classifier::ClassifierArch::preset(qesdet::classifier::ClassifierPreset::Small, [3, 32, 32], 10),
        1,
    )
    .unwrap();
    let profile = HardwareProfile::default();
    let advs = [test_adv];
    let data = VariantData {
        train_nat: &train.images,
        train_adv: &adv.images,
        calib_pool: &train.images,
        classifier: &model,
        test_nat: &test,
        test_advs: &advs,
        profile: &profile,
        chunk: 20,
    };
    let mut base = DetectorSetup::default();
    base.qes.epochs = 1;
    base.qes.batch_size = 20;
    base.calibration_samples = 20;
    let rows = experiments::sweep_data_fraction(&data, &base, &[0.5, 1.0]).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(experiments::sweep_data_fraction(&data, &base, &[1.5]).is_err());

    let t = experiments::train_detector(&base, &train.images, &adv.images, &train.images, &mut ()).unwrap();
    let grid = experiments::klu_grid(&[88.0, 92.0], &[30.0], &[5.0, 50.0]);
    assert_eq!(grid, vec![Percentiles::new(88.0, 30.0, 5.0).unwrap(), Percentiles::new(92.0, 30.0, 5.0).unwrap()]);
    let rows =
        experiments::sweep_klu(&t.detector, &train.images, &model, &test, &advs[0], &grid, &profile, 20).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].auc, rows[1].auc);
}
