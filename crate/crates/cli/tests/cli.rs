use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn detjac(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_detjac")).args(args).output().unwrap()
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn gen_model(dir: &Path, extra: &[&str]) -> String {
    let path = dir.join("model.djt").display().to_string();
    let mut args = vec!["gen-model", "--seed", "3", "--out", &path];
    args.extend_from_slice(extra);
    json(&detjac(&args));
    path
}

#[test]
fn verify_reports_an_exact_detached_reconstruction() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = gen_model(dir.path(), &[]);
    let v = json(&detjac(&["verify", "--bundle", &bundle, "--prompt", "ab"]));
    let detached = v["rel_error_detached"].as_f64().unwrap();
    let standard = v["rel_error_standard"].as_f64().unwrap();
    assert!(detached <= 1e-5, "{detached}");
    assert!(standard >= 10.0 * detached);
    assert_eq!(v["y_true"].as_array().unwrap().len(), 32);
    assert_eq!(v["tokens"].as_array().unwrap().len(), 3);
}

#[test]
fn verify_exports_tensors_for_external_checks() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = gen_model(dir.path(), &[]);
    let export = dir.path().join("verify.djt");
    json(&detjac(&["verify", "--bundle", &bundle, "--tokens", "0,5,9", "--export-tensors", export.to_str().unwrap()]));
    let file = detjac::io::read_container(&export).unwrap();
    let j = detjac::io::jacobian_from_tensors(&file, "jacobian.detached").unwrap();
    assert_eq!(j.blocks.len(), 3);
    assert!(file.get("frozen.layers.1.gates").is_some());
    assert!(file.get("input.2").is_some());
    let b = detjac::io::read_bundle(&bundle).unwrap();
    let x = detjac::embed(&b, &detjac::TokenSequence::new(vec![0, 5, 9]).unwrap()).unwrap();
    assert!(detjac::reconstruct(&j, &b, &x).unwrap().rel_error <= 1e-5);
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = detjac(&["verify", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert!(out.stdout.is_empty());
    assert_eq!(detjac(&["--help"]).status.code(), Some(0));
    assert_eq!(detjac(&["verify"]).status.code(), Some(1));
}

#[test]
fn bad_data_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.djt");
    assert_eq!(detjac(&["verify", "--bundle", missing.to_str().unwrap(), "--tokens", "1"]).status.code(), Some(2));
    assert_eq!(detjac(&["verify", "--tokens", "100000"]).status.code(), Some(2));
    let garbage = dir.path().join("garbage.djt");
    std::fs::write(&garbage, b"not a container").unwrap();
    assert_eq!(detjac(&["svd", "--bundle", garbage.to_str().unwrap(), "--tokens", "1"]).status.code(), Some(2));
}

#[test]
fn non_finite_weights_are_a_numeric_error() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = gen_model(dir.path(), &[]);
    let mut file = detjac::io::read_container(&bundle).unwrap();
    file.tensors.iter_mut().find(|t| t.name == "layers.0.w_q").unwrap().data[5] = f32::NAN;
    let broken = dir.path().join("nan.djt");
    detjac::io::write_container(&file, &broken).unwrap();
    let out = detjac(&["svd", "--bundle", broken.to_str().unwrap(), "--tokens", "1,2"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn svd_top_k_sets_entries_per_vector() {
    let v = json(&detjac(&["svd", "--prompt", "the golden gate", "--top-k", "3"]));
    let positions = v["positions"].as_array().unwrap();
    assert_eq!(positions.len(), 4);
    for p in positions {
        let panels = p["panels"].as_array().unwrap();
        assert_eq!(panels.len(), 3);
        for panel in panels {
            for side in ["u_positive", "u_negative", "v_positive", "v_negative"] {
                assert_eq!(panel[side]["entries"].as_array().unwrap().len(), 3, "{side}");
            }
        }
        let s: Vec<f64> = p["singular_values"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
        assert!(s.windows(2).all(|w| w[0] >= w[1]));
    }

    let csv = detjac(&["svd", "--prompt", "the golden gate", "--top-k", "3", "--format", "csv"]);
    let mut reader = csv::Reader::from_reader(csv.stdout.as_slice());
    let mut n = 0;
    for record in reader.records() {
        let r = record.unwrap();
        for c in 4..8 {
            assert_eq!(r[c].split(' ').count(), 3);
        }
        n += 1;
    }
    assert_eq!(n, 4 * 3);
}

#[test]
fn json_output_round_trips() {
    for args in [
        vec!["layers", "--tokens", "0,3"],
        vec!["decode", "--tokens", "0,3,4", "--count", "2"],
        vec!["steer", "--prompt", "here is a", "--steer-prompt", "i am going to arizona", "--layer", "1"],
    ] {
        let v = json(&detjac(&args));
        let text = serde_json::to_string(&v).unwrap();
        assert_eq!(serde_json::from_str::<Value>(&text).unwrap(), v);
    }
}

#[test]
fn layers_report_every_measurement_point() {
    let v = json(&detjac(&["layers", "--tokens", "0"]));
    let entries = v["profile"]["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 2 * 2 * 3);
    for e in entries {
        if let Some(r) = e["stable_rank"].as_f64() {
            assert!(r >= 1.0);
        }
    }
    let proj = v["projections_onto_final"].as_array().unwrap();
    assert_eq!(proj.len(), 2);
}

#[test]
fn steer_at_lambda_one_matches_normal_generation() {
    let v = json(&detjac(&[
        "steer",
        "--prompt",
        "the sea",
        "--steer-prompt",
        "i went to new york",
        "--layer",
        "0",
        "--lambda",
        "1",
    ]));
    assert_eq!(v["normal"], v["steered"]);
    assert_eq!(v["differing_positions"], 0);
    assert_eq!(v["normal"].as_array().unwrap().len(), 8);
    let out = detjac(&["steer", "--prompt", "the", "--steer-prompt", "the", "--layer", "0", "--lambda", "2"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn decode_markdown_and_file_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("decode.md");
    let run = detjac(&["decode", "--tokens", "0,7", "--count", "3", "--format", "md", "--out", out.to_str().unwrap()]);
    assert!(run.status.success());
    assert!(run.stdout.is_empty());
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.contains("| kind | index | norm | tokens |"));
    assert_eq!(text.lines().filter(|l| l.starts_with("| row |") || l.starts_with("| column |")).count(), 6);
}

#[test]
fn generated_bundles_are_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let pa = gen_model(a.path(), &["--trained", "--layers", "1"]);
    let pb = gen_model(b.path(), &["--trained", "--layers", "1"]);
    assert_eq!(std::fs::read(pa).unwrap(), std::fs::read(pb).unwrap());
    let out = detjac(&["gen-model", "--out", a.path().join("x.djt").to_str().unwrap(), "--heads", "5"]);
    assert_eq!(out.status.code(), Some(1));
}
