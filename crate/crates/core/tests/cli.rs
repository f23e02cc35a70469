use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use clipfit::cli::{RunManifest, PretrainSummary};
use clipfit::train::EvalResult;

fn clipfit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clipfit"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = clipfit(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

const SPEC: &str = r#"{"num_classes":6,"num_base":3,"pretrain_per_class":12,"train_per_class":4,
"test_per_class":8,"image_size":16,"noise_std":0.3,"shift":{"offset":0.5,"scale":1.5},"seed":4}"#;

/// gen + a short pretrain, shared by the tests below.
fn workspace() -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("spec.json"), SPEC).unwrap();
    fs::write(d.join("pre.json"), r#"{"pretrain":{"steps":30}}"#).unwrap();
    fs::write(d.join("ft.json"), r#"{"epochs":4,"lr":0.0003}"#).unwrap();
    ok(d, &["gen", "--config", "spec.json", "--out", "g"]);
    ok(d, &["pretrain", "--data", "g", "--config", "pre.json", "--out", "p"]);
    tmp
}

#[test]
fn count_prints_exact_integers() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(ok(d.path(), &["count", "vit_b16_clip", "proj_bias_text"]), "6144\n");
    assert_eq!(ok(d.path(), &["count", "vit_b16_clip", "ffn_bias_text"]), "30720\n");
    assert_eq!(ok(d.path(), &["count", "toy", "text.*.ffn.proj.bias"]), "128\n");
    assert_eq!(ok(d.path(), &["count", "toy", "zero_shot"]), "0\n");
    assert_eq!(code(&clipfit(d.path(), &["count", "resnet50", "clipfit"])), 2);
    assert_eq!(code(&clipfit(d.path(), &["count", "toy", "!x"])), 2);
    assert_eq!(code(&clipfit(d.path(), &["count"])), 2);
}

#[test]
fn eval_of_pretrained_checkpoint_matches_embedded_zero_shot() {
    let tmp = workspace();
    let d = tmp.path();
    ok(d, &["eval", "--checkpoint", "p/model.cfit", "--data", "g", "--out", "e"]);
    let summary: PretrainSummary = serde_json::from_slice(&fs::read(d.join("p/pretrain_report.json")).unwrap()).unwrap();
    let eval: EvalResult = serde_json::from_slice(&fs::read(d.join("e/eval.json")).unwrap()).unwrap();
    assert_eq!(summary.zero_shot, eval);
    assert_eq!(summary.report.loss.len(), 30);

    ok(d, &["eval", "--checkpoint", "p/model.cfit", "--data", "g", "--split", "new", "--out", "e2"]);
    let new: serde_json::Value = serde_json::from_slice(&fs::read(d.join("e2/eval.json")).unwrap()).unwrap();
    assert_eq!(new["accuracy"].as_f64().unwrap(), eval.new_acc);
}

#[test]
fn finetune_is_reproducible_and_leaves_inputs_alone() {
    let tmp = workspace();
    let d = tmp.path();
    let inputs = ["p/model.cfit", "g/data/data.bin", "g/data/manifest.json", "ft.json"];
    let before: Vec<Vec<u8>> = inputs.iter().map(|p| fs::read(d.join(p)).unwrap()).collect();

    let args = ["finetune", "--checkpoint", "p/model.cfit", "--data", "g", "--config", "ft.json", "--seed", "5"];
    ok(d, &[&args[..], &["--out", "f1"]].concat());
    ok(d, &[&args[..], &["--out", "f2", "--sequential"]].concat());
    for f in ["train_report.json", "loss.csv", "changes.csv", "eval.json", "model.cfit"] {
        assert_eq!(fs::read(d.join("f1").join(f)).unwrap(), fs::read(d.join("f2").join(f)).unwrap(), "{f}");
    }
    let after: Vec<Vec<u8>> = inputs.iter().map(|p| fs::read(d.join(p)).unwrap()).collect();
    assert_eq!(before, after);

    let manifest: RunManifest = serde_json::from_slice(&fs::read(d.join("f1/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.command, "finetune");
    assert_eq!(manifest.seeds, vec![5]);
    assert_eq!(manifest.inputs.len(), 4);
    assert!(!manifest.argv.contains(&"--out".to_string()));
    assert_eq!(manifest.config["train"]["seed"], 5);
    for o in &manifest.outputs {
        assert!(d.join("f1").join(o).is_file(), "{o}");
    }

    ok(d, &["replay", "f1/manifest.json", "--out", "f3"]);
    assert_eq!(
        fs::read(d.join("f1/train_report.json")).unwrap(),
        fs::read(d.join("f3/train_report.json")).unwrap()
    );
    assert_eq!(fs::read(d.join("f1/manifest.json")).unwrap(), fs::read(d.join("f3/manifest.json")).unwrap());

    // Without --out the run lands in a derived directory under runs/.
    let printed = ok(d, &args);
    let run = printed.trim();
    assert!(run.starts_with("runs/finetune-clipfit-seed5-"), "{run}");
    assert_eq!(
        fs::read(d.join(run).join("train_report.json")).unwrap(),
        fs::read(d.join("f1/train_report.json")).unwrap()
    );
}

#[test]
fn analyze_reports_from_run_and_pair() {
    let tmp = workspace();
    let d = tmp.path();
    ok(d, &["finetune", "--checkpoint", "p/model.cfit", "--data", "g", "--config", "ft.json", "--out", "f"]);
    ok(d, &["analyze", "--run", "f", "--out", "a1"]);
    ok(d, &["analyze", "--run", "f", "--report", "gradients", "--out", "a2"]);
    ok(d, &["analyze", "--run", "f", "--report", "features", "--data", "g", "--out", "a3"]);
    ok(d, &["analyze", "--pair", "p/model.cfit", "f/model.cfit", "--out", "a4"]);

    let (header, rows) = clipfit::report::read_csv(&d.join("a1/changes.csv")).unwrap();
    assert_eq!(header, ["group", "squared_change", "rank"]);
    // Four text projection biases plus every image LayerNorm gain and bias.
    assert_eq!(rows.len(), 4 + 2 * (2 * 4 + 2));
    let (_, pair_rows) = clipfit::report::read_csv(&d.join("a4/changes.csv")).unwrap();
    for row in &pair_rows {
        let run_row = rows.iter().find(|r| r[0] == row[0]);
        let value: f64 = row[1].parse().unwrap();
        match run_row {
            Some(r) => assert!((value - r[1].parse::<f64>().unwrap()).abs() <= 1e-12 * value.max(1.0)),
            None => assert_eq!(value, 0.0, "{}", row[0]),
        }
    }
    let features: serde_json::Value = serde_json::from_slice(&fs::read(d.join("a3/features.json")).unwrap()).unwrap();
    assert!(features["fisher_ratio"].as_f64().unwrap() > 0.0);
    let (header, rows) = clipfit::report::read_csv(&d.join("a3/features.csv")).unwrap();
    assert_eq!(&header[..2], ["id", "label"]);
    assert_eq!(&header[header.len() - 2..], ["pc1", "pc2"]);
    assert_eq!(rows.len(), 6 * 8);

    assert_eq!(code(&clipfit(d, &["analyze", "--pair", "p/model.cfit", "f/model.cfit", "--report", "gradients"])), 2);
    assert_eq!(code(&clipfit(d, &["analyze", "--run", "f", "--report", "features"])), 2);
}

#[test]
fn errors_map_to_exit_codes() {
    let tmp = workspace();
    let d = tmp.path();
    let base = ["finetune", "--checkpoint", "p/model.cfit", "--data", "g"];

    fs::write(d.join("unknown.json"), r#"{"lr":0.001,"learning_rate":2}"#).unwrap();
    let out = clipfit(d, &[&base[..], &["--config", "unknown.json"]].concat());
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));

    fs::write(d.join("neg.json"), r#"{"lr":-1}"#).unwrap();
    assert_eq!(code(&clipfit(d, &[&base[..], &["--config", "neg.json"]].concat())), 2);
    assert_eq!(code(&clipfit(d, &[&base[..], &["--strategy", "text.nothing.here"]].concat())), 2);
    assert_eq!(code(&clipfit(d, &[&base[..], &["--shots", "50"]].concat())), 2);
    assert_eq!(code(&clipfit(d, &[&base[..], &["--regularizer", "l2"]].concat())), 2);
    assert_eq!(code(&clipfit(d, &["eval", "--checkpoint", "missing.cfit", "--data", "g"])), 2);

    fs::write(d.join("huge.json"), r#"{"epochs":3,"lr":1e300}"#).unwrap();
    let out = clipfit(d, &[&base[..], &["--config", "huge.json", "--out", "nan"]].concat());
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("at step"));

    fs::write(d.join("p/garbage.cfit"), b"not a checkpoint").unwrap();
    assert_eq!(code(&clipfit(d, &["eval", "--checkpoint", "p/garbage.cfit", "--data", "g"])), 1);
}

#[test]
fn mse_regularizer_and_beta_flags_reach_the_report() {
    let tmp = workspace();
    let d = tmp.path();
    ok(d, &[
        "finetune", "--checkpoint", "p/model.cfit", "--data", "g", "--config", "ft.json", "--strategy",
        "proj_bias_text", "--regularizer", "mse", "--beta", "2", "--shots", "2", "--out", "m",
    ]);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(d.join("m/train_report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["regularizer"], "mse_bias");
    assert_eq!(report["config"]["beta"], 2.0);
    assert_eq!(report["shots"], 6);
    assert_eq!(report["trainable_scalars"], 128);
}
