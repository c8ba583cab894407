use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn qesdet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qesdet"))
        .args(args)
        .output()
        .expect("spawn qesdet")
}

fn ok(args: &[&str]) -> String {
    let out = qesdet(args);
    assert!(
        out.status.success(),
        "qesdet {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str], needle: &str) {
    let out = qesdet(args);
    assert!(!out.status.success(), "qesdet {args:?} should fail");
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(needle), "expected {needle:?} in:\n{err}");
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

struct Dir(tempfile::TempDir);

impl Dir {
    fn p(&self, name: &str) -> PathBuf {
        self.0.path().join(name)
    }
    fn s(&self, name: &str) -> String {
        self.p(name).to_string_lossy().into_owned()
    }
}

#[test]
fn tiny_pipeline_end_to_end() {
    let d = Dir(tempfile::tempdir().unwrap());
    ok(&["gen-synth", "--kind", "shapes", "--samples", "120", "--split", "train", "--out", &d.s("train")]);
    ok(&["gen-synth", "--kind", "shapes", "--samples", "60", "--start", "1000", "--split", "test", "--out", &d.s("test")]);
    ok(&["gen-synth", "--kind", "glyphs", "--samples", "60", "--out", &d.s("glyphs")]);

    ok(&[
        "train-classifier", "--data", &d.s("train"), "--test", &d.s("test"), "--epochs", "1",
        "--out", &d.s("cls.qck"),
    ]);
    let info: Value = serde_json::from_str(&ok(&["model-info", &d.s("cls.qck")])).unwrap();
    assert_eq!(info["kind"], "classifier");

    for (src, out) in [("train", "train_adv"), ("test", "test_adv")] {
        ok(&[
            "gen-attacks", "--classifier", &d.s("cls.qck"), "--attack", "fgsm", "--eps", "8/255",
            "--data", &d.s(src), "--out", &d.s(out),
        ]);
    }

    ok(&[
        "qes-train", "--nat", &d.s("train"), "--adv", &d.s("train_adv"), "--schedule", "desk",
        "--epochs", "2", "--out", &d.s("det.qck"),
    ]);
    let info: Value = serde_json::from_str(&ok(&["model-info", &d.s("det.qck")])).unwrap();
    assert_eq!(info["kind"], "detector");
    assert_eq!(info["layers"].as_array().unwrap().len(), 3);

    ok(&["calibrate", "--detector", &d.s("det.qck"), "--sample-nat", &d.s("train"), "--out", &d.s("b.json")]);
    let b = json(&d.p("b.json"));
    assert_eq!(b["bands"].as_array().unwrap().len(), 2);

    for (input, out) in [("test", "nat.out"), ("test_adv", "adv.out")] {
        ok(&[
            "detect", "--detector", &d.s("det.qck"), "--boundaries", &d.s("b.json"), "--input", &d.s(input),
            "--out", &d.s(out),
        ]);
    }
    let outcomes = json(&d.p("adv.out"));
    assert_eq!(outcomes["adversarial"], true);
    assert_eq!(outcomes["outcomes"].as_array().unwrap().len(), 60);

    ok(&[
        "energy-report", "--outcomes", &d.s("nat.out"), &d.s("adv.out"), "--svg", &d.s("e.svg"),
        "--out", &d.s("energy.json"),
    ]);
    let e = json(&d.p("energy.json"));
    assert!(e["baseline"]["total_j"].as_f64().unwrap() > 0.0);
    assert!(e["provenance"].is_object());
    assert!(std::fs::read_to_string(d.p("e.svg")).unwrap().starts_with("<svg"));

    ok(&[
        "evaluate", "--detector", &d.s("det.qck"), "--boundaries", &d.s("b.json"), "--classifier", &d.s("cls.qck"),
        "--nat", &d.s("test"), "--adv", &d.s("test_adv"), "--roc", &d.s("roc.csv"), "--out", &d.s("eval.json"),
    ]);
    let ev = json(&d.p("eval.json"));
    let auc = ev["auc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));
    assert!(ev.get("scores_nat").is_none());
    assert!(std::fs::read_to_string(d.p("roc.csv")).unwrap().starts_with("fpr,tpr\n"));

    ok(&[
        "ablate", "--sweep", "KLU", "--K", "88,92", "--L", "30", "--U", "5", "--detector", &d.s("det.qck"),
        "--sample-nat", &d.s("train"), "--calibration-samples", "100", "--classifier", &d.s("cls.qck"),
        "--nat", &d.s("test"), "--adv", &d.s("test_adv"), "--out", &d.s("klu.json"),
    ]);
    assert_eq!(json(&d.p("klu.json"))["rows"].as_array().unwrap().len(), 2);

    // The detector is scored on glyphs after recalibration on 20 of them.
    ok(&[
        "transfer", "--detector", &d.s("det.qck"), "--target", &d.s("glyphs"), "--target-adv", &d.s("test_adv"),
        "--samples", "20", "--boundaries-out", &d.s("tb.json"), "--out", &d.s("transfer.json"),
    ]);
    let t = json(&d.p("transfer.json"));
    assert_eq!(t["evaluated_naturals"], 40);
    assert_eq!(json(&d.p("tb.json"))["source"]["num_samples"], 20);

    // Failure cases: nothing is written when inputs disagree.
    ok(&["qes-train", "--nat", &d.s("train"), "--adv", &d.s("train_adv"), "--epochs", "0", "--seed", "9", "--out", &d.s("other.qck")]);
    fails(
        &[
            "detect", "--detector", &d.s("other.qck"), "--boundaries", &d.s("b.json"), "--input", &d.s("test"),
            "--out", &d.s("never.out"),
        ],
        "different detector",
    );
    assert!(!d.p("never.out").exists());
    fails(
        &["qes-train", "--nat", &d.s("test"), "--adv", &d.s("train_adv"), "--epochs", "1", "--out", &d.s("never.qck")],
        "shape",
    );
    assert!(!d.p("never.qck").exists());
    fails(
        &[
            "calibrate", "--detector", &d.s("det.qck"), "--sample-nat", &d.s("train"), "--K", "20", "--L", "30",
            "--out", &d.s("never.json"),
        ],
        "error",
    );
    fails(&["model-info", &d.s("train")], "error");
}

#[test]
fn bad_arguments_are_rejected() {
    let d = Dir(tempfile::tempdir().unwrap());
    fails(&["gen-synth", "--kind", "plaid", "--samples", "1", "--out", &d.s("x")], "plaid");
    let out = qesdet(&["ablate", "--sweep", "nope"]);
    assert!(!out.status.success());
    fails(&["energy-report", "--outcomes", &d.s("missing.json"), "--out", &d.s("e.json")], "missing.json");
}
