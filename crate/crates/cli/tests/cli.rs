use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::sync::Arc;

use serde_json::{json, Value};

use segloop_core::clinician::{Decision, SessionView, SimulatedClinician, Strategy};
use segloop_core::data::load_dataset;
use segloop_core::engine::JournalRecord;
use segloop_core::{checkpoint, Session, SessionConfig, SessionMode};

fn segloop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_segloop"))
        .args(args)
        .env_remove("MEDUHIP_CKPT")
        .env_remove("MEDUHIP_ADDR")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) {
    let out = segloop(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn write_json(path: &Path, v: Value) -> String {
    fs::write(path, v.to_string()).unwrap();
    path.display().to_string()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn synth_train_eval_replay_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let [data, run, eval, r1, r2] = ["data", "run", "eval", "r1", "r2"].map(|d| tmp.path().join(d));
    let synth_cfg = write_json(&tmp.path().join("c.json"), json!({"cases": 6, "seed": 3}));
    ok(&["synth", "--config", &synth_cfg, "--out", p(&data)]);
    assert!(data.join("manifest.json").exists());

    let train_cfg = write_json(
        &tmp.path().join("t.json"),
        json!({
            "dataset": data,
            "train": {
                "phase1_epochs": 1, "phase2_epochs": 1, "max_cases": 2, "interactions": 1,
                "schedule": {"base_lr": 1e-3},
            },
        }),
    );
    ok(&["train", "--config", &train_cfg, "--out", p(&run), "--seed", "1"]);
    let ckpt = run.join("checkpoint");
    assert!(ckpt.exists());
    let resolved = read_json(&run.join("resolved_config.json"));
    assert_eq!(resolved["train"]["seed"], 1);
    assert_eq!(resolved["model"]["init_seed"], 1);
    assert_eq!(resolved["train"]["schedule"], json!({"base_lr": 1e-3, "step_size": 10, "gamma": 0.5}));
    let log = fs::read_to_string(run.join("loss.jsonl")).unwrap();
    for line in log.lines() {
        let rec: Value = serde_json::from_str(line).unwrap();
        for key in ["step", "phase", "loss", "lr"] {
            assert!(rec.get(key).is_some(), "{line}");
        }
    }

    ok(&["eval", "--dataset", p(&data), "--checkpoint", p(&ckpt), "--out", p(&eval), "--config", &write_json(
        &tmp.path().join("e.json"),
        json!({"interactions": 3, "max_cases": 1}),
    )]);
    let report = read_json(&eval.join("eval_report.json"));
    assert_eq!(report["trajectories"].as_array().unwrap().len(), 1);
    assert_eq!(report["noc"].as_object().unwrap().len(), 1);
    assert!(fs::read_to_string(eval.join("dice.csv")).unwrap().starts_with("case_id,dice_0,dice_1,dice_2,dice_3\n"));

    // a journal recorded directly against the engine
    let (model, sha) = checkpoint::load(&ckpt).unwrap();
    let model = Arc::new(model);
    let ds = load_dataset(&data.join("manifest.json")).unwrap();
    let case = &ds.cases[0];
    let cfg = SessionConfig { seed: 2, ..SessionConfig::for_model(&model) };
    let mut s = Session::create("j", model, case.image().clone(), cfg, SessionMode::Adaptive).unwrap();
    let mut journal = Vec::new();
    JournalRecord::header(&s, Some(sha)).write_line(&mut journal).unwrap();
    let clinician = SimulatedClinician::new(Strategy::LastWrong, case.annotations()[0].clone(), "a", 0);
    for _ in 0..2 {
        let Decision::Event(ev) = clinician.next_event(&SessionView::of(&s).unwrap()).unwrap() else { break };
        JournalRecord::Event { event: ev.clone() }.write_line(&mut journal).unwrap();
        s.apply_selection(ev).unwrap();
    }
    let journal_path = tmp.path().join("s.jsonl");
    fs::write(&journal_path, journal).unwrap();

    for out in [&r1, &r2] {
        ok(&["replay", "--journal", p(&journal_path), "--checkpoint", p(&ckpt), "--out", p(out)]);
    }
    let m1 = fs::read(r1.join("mask.png")).unwrap();
    assert_eq!(m1, fs::read(r2.join("mask.png")).unwrap());
    let expected = s.accept().unwrap();
    assert_eq!(segloop_core::codec::mask_from_png(&m1).unwrap(), expected);
    let rle: segloop_core::Rle = serde_json::from_value(read_json(&r1.join("mask.rle.json"))).unwrap();
    assert_eq!(rle.decode().unwrap(), expected);
}

#[test]
fn synth_is_reproducible_and_flags_override_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_json(&tmp.path().join("c.json"), json!({"cases": 3, "seed": 3}));
    let [a, b, c] = ["a", "b", "c"].map(|d| tmp.path().join(d));
    ok(&["synth", "--config", &cfg, "--seed", "5", "--out", p(&a)]);
    ok(&["synth", "--config", &cfg, "--seed", "5", "--out", p(&b)]);
    ok(&["synth", "--config", &cfg, "--out", p(&c)]);
    assert_eq!(read_json(&a.join("resolved_config.json"))["seed"], 5);
    assert_eq!(read_json(&c.join("resolved_config.json"))["seed"], 3);
    let manifest = read_json(&a.join("manifest.json"));
    let image = manifest["entries"][0]["image"].as_str().unwrap();
    assert_eq!(fs::read(a.join(image)).unwrap(), fs::read(b.join(image)).unwrap());
    assert_ne!(fs::read(a.join(image)).unwrap(), fs::read(c.join(image)).unwrap());
    assert_eq!(fs::read(a.join("manifest.json")).unwrap(), fs::read(b.join("manifest.json")).unwrap());
}

#[test]
fn usage_errors_exit_1() {
    let missing_flag = segloop(&["replay"]);
    assert_eq!(missing_flag.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing_flag.stderr).contains("Usage"));

    for args in [&["frobnicate"][..], &["synth", "--bogus"], &["synth"], &["train", "--out", "/tmp/x"]] {
        let out = segloop(args);
        assert_eq!(out.status.code(), Some(1), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"), "{args:?}");
    }

    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_json(&tmp.path().join("c.json"), json!({"casess": 3}));
    let out = segloop(&["synth", "--config", &cfg, "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("casess"));

    assert_eq!(segloop(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let bogus = tmp.path().join("ckpt");
    fs::write(&bogus, b"not a checkpoint").unwrap();
    let out = segloop(&["replay", "--journal", "/nonexistent.jsonl", "--checkpoint", p(&bogus), "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}
