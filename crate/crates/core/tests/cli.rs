use std::path::Path;
use std::process::Command;

fn polyformer(dir: &Path, args: &[&str]) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_polyformer"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
        .status
        .code()
        .expect("exit code")
}

fn tiny_config(dir: &Path) -> String {
    let mut cfg = polyformer::harness::ExperimentConfig::char_lm_fixture();
    cfg.data.corpus_chars = 4_000;
    cfg.model.d_model = 16;
    cfg.model.context_len = 8;
    cfg.baseline.steps = 10;
    cfg.range_min.steps = 5;
    cfg.conversion.noise_trials = 2;
    cfg.conversion.fidelity_examples = 4;
    let path = dir.join("tiny.json");
    std::fs::write(&path, cfg.to_json()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn staged_commands_chain_through_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = tiny_config(d);
    let out = d.join("run");
    let out = out.to_str().unwrap();
    let common = ["--config", cfg.as_str(), "--out", out, "--seed", "3"];
    for cmd in ["train", "range-train", "convert", "verify", "depth", "eval"] {
        let mut args = vec![cmd];
        args.extend(common);
        assert_eq!(polyformer(d, &args), 0, "{cmd}");
    }
    let mut args = vec!["verify", "--stage", "range_min"];
    args.extend(common);
    assert_eq!(polyformer(d, &args), 4);
    for f in ["checkpoints/convert.json", "depth.json", "violations.txt", "metrics_convert.json", "report.json"] {
        assert!(d.join("run").join(f).is_file(), "{f}");
    }
}

#[test]
fn pipeline_and_ablate_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = tiny_config(d);
    assert_eq!(polyformer(d, &["pipeline", "--config", &cfg, "--out", "p", "--stage", "baseline"]), 0);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("p/report.json")).unwrap()).unwrap();
    assert_eq!(report["stages"].as_array().unwrap().len(), 1);
    assert!(report["conversion"].is_null());
    assert_eq!(polyformer(d, &["ablate", "--config", &cfg, "--out", "a", "--stage", "baseline", "--seed", "0"]), 0);
    let csv = std::fs::read_to_string(d.join("a/ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn fit_poly_writes_coefficients_and_curve() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("fit.json"), r#"{"function": "inv_sqrt", "domain": [1, 50], "degree": 5}"#).unwrap();
    assert_eq!(polyformer(d, &["fit-poly", "--config", "fit.json", "--out", "f"]), 0);
    assert!(d.join("f/poly.json").is_file());
    assert!(std::fs::read_to_string(d.join("f/error_curve.csv")).unwrap().lines().count() > 100);
}

#[test]
fn exit_codes_distinguish_failures() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("bad.json"), "{\"seed\": ").unwrap();
    assert_eq!(polyformer(d, &["pipeline", "--config", "bad.json"]), 2);
    assert_eq!(polyformer(d, &["pipeline", "--config", "missing.json"]), 2);
    assert_eq!(polyformer(d, &["pipeline", "--stage", "later"]), 2);
    assert_eq!(polyformer(d, &["eval", "--out", "empty"]), 2);
    std::fs::write(d.join("bad_fit.json"), r#"{"function": "gelu", "domain": [3, -3]}"#).unwrap();
    assert_eq!(polyformer(d, &["fit-poly", "--config", "bad_fit.json", "--out", "f"]), 2);

    // untrained weights carry no frozen normalization statistics, so range training cannot start
    let cfg = tiny_config(d);
    let mut exp = polyformer::harness::ExperimentConfig::from_json(&std::fs::read_to_string(&cfg).unwrap()).unwrap();
    let fresh = polyformer::transformer::Model::new(exp.model.clone()).unwrap();
    polyformer::transformer::save_checkpoint(&fresh, &d.join("fresh.json")).unwrap();
    exp.resume_from = Some(d.join("fresh.json"));
    std::fs::write(d.join("fresh_cfg.json"), exp.to_json()).unwrap();
    assert_eq!(polyformer(d, &["range-train", "--config", "fresh_cfg.json", "--out", "x"]), 3);
}
