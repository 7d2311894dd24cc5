use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ewasr::data::{load_dataset, synth_scene, write_mask, write_sample};
use ewasr::eval::{evaluate, EvalConfig, MetricsReport};
use ewasr::losses::WATER;
use serde_json::Value;
use tempfile::TempDir;

const H: &str = "32";
const W: &str = "64";

fn ewasr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ewasr")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = ewasr(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).expect("readable")).expect("valid json")
}

fn synth(dir: &Path, n: usize, seed: u64) {
    ok(&["synth", "--n", &n.to_string(), "--height", H, "--width", W, "--seed", &seed.to_string(), "--out", p(dir)]);
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).expect("dir") {
            let path = e.expect("entry").path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.insert(path.strip_prefix(root).expect("prefix").to_path_buf(), fs::read(&path).expect("file"));
            }
        }
    }
    files
}

fn train_tiny(data: &Path, out: &Path, variant: &str, epochs: &str) {
    ok(&["train", "--data", p(data), "--out", p(out), "--variant", variant, "--backbone", "tiny", "--epochs", epochs, "--lr-decoder", "1e-3"]);
}

#[test]
fn synth_empty_and_reproducible() {
    let t = TempDir::new().unwrap();
    synth(&t.path().join("empty"), 0, 1);
    assert!(load_dataset(&t.path().join("empty"), None).unwrap().is_empty());
    let run = read_json(&t.path().join("empty/synth_run.json"));
    assert_eq!(run["samples"], 0);
    assert_eq!(run["tool"], "ewasr");

    synth(&t.path().join("a"), 4, 9);
    synth(&t.path().join("b"), 4, 9);
    let (a, b) = (tree(&t.path().join("a")), tree(&t.path().join("b")));
    assert!(a.len() >= 16);
    let strip = |m: BTreeMap<PathBuf, Vec<u8>>| -> BTreeMap<PathBuf, Vec<u8>> {
        m.into_iter().filter(|(k, _)| k != Path::new("synth_run.json")).collect()
    };
    assert_eq!(strip(a), strip(b));

    synth(&t.path().join("c"), 4, 10);
    assert_ne!(
        fs::read(t.path().join("a/images/synth_00000.png")).unwrap(),
        fs::read(t.path().join("c/images/synth_00000.png")).unwrap()
    );
}

#[test]
fn usage_errors_exit_2() {
    let t = TempDir::new().unwrap();
    let out = p(t.path());
    let missing = t.path().join("missing");
    assert_eq!(code(&ewasr(&["train", "--data", p(&missing), "--out", out])), 2);
    assert_eq!(code(&ewasr(&["eval", "--data", p(&missing), "--predictions", out, "--out", out])), 2);
    assert_eq!(code(&ewasr(&["profile", "--variant", "bogus", "--out", out])), 2);
    assert_eq!(code(&ewasr(&["profile", "--replace", "nope", "--variant", "wasr_light", "--out", out])), 2);
    assert_eq!(code(&ewasr(&["profile", "--height", "33", "--out", out])), 2);
    assert_eq!(code(&ewasr(&["eval", "--data", out, "--out", out])), 2);

    let data = t.path().join("ds");
    synth(&data, 2, 0);
    assert_eq!(code(&ewasr(&["train", "--data", p(&data), "--out", out, "--variant", "wasr_ref"])), 2);
    assert_eq!(code(&ewasr(&["train", "--data", p(&data), "--out", out, "--epochs", "2", "--patience", "5"])), 2);
}

#[test]
fn train_resume_continues_epoch_numbering() {
    let t = TempDir::new().unwrap();
    let data = t.path().join("ds");
    let run = t.path().join("run");
    synth(&data, 3, 4);
    train_tiny(&data, &run, "ewasr", "2");
    let first = read_json(&run.join("train_summary.json"));
    assert_eq!(first["summary"]["last_epoch"], 2);

    ok(&["train", "--data", p(&data), "--out", p(&run), "--resume", p(&run.join("last.ckpt")), "--epochs", "4", "--lr-decoder", "1e-3"]);
    let second = read_json(&run.join("train_summary.json"));
    assert_eq!(second["summary"]["last_epoch"], 4);
    assert_eq!(second["summary"]["epochs_run"], 2);
    assert_eq!(second["config"]["model"]["backbone"], "tiny");

    let log = fs::read_to_string(run.join("train_log.ndjson")).unwrap();
    let epochs: Vec<u64> = log
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap())
        .filter_map(|v| v["epoch"].as_u64())
        .collect();
    assert_eq!(epochs, vec![1, 2, 3, 4]);
    assert_eq!(log.lines().filter(|l| l.contains("\"command\":\"train\"")).count(), 1);
}

#[test]
fn eval_ground_truth_and_empty_predictions() {
    let t = TempDir::new().unwrap();
    let data = t.path().join("ds");
    synth(&data, 5, 2);
    let out = t.path().join("gt");
    ok(&["eval", "--data", p(&data), "--predictions", p(&data.join("masks")), "--out", p(&out)]);
    let m = read_json(&out.join("metrics.json"));
    assert_eq!(m["report"]["overall"]["f1"], 1.0);
    assert_eq!(m["report"]["danger"]["recall"], 1.0);
    assert_eq!(m["report"]["water_edge_rmse"], 0.0);
    assert_eq!(m["report"]["frames"], 5);
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("# ewasr "));
    assert!(csv.contains(MetricsReport::summary_header()));

    let ds = load_dataset(&data, None).unwrap();
    let empty = t.path().join("all_water");
    fs::create_dir_all(&empty).unwrap();
    for s in &ds.samples {
        write_mask(&empty.join(format!("{}.png", s.id)), s.height, s.width, &vec![WATER; s.height * s.width]).unwrap();
    }
    let out = t.path().join("empty");
    ok(&["eval", "--data", p(&data), "--predictions", p(&empty), "--out", p(&out)]);
    let m = read_json(&out.join("metrics.json"));
    assert!(m["report"]["counts"]["overall"]["fn"].as_u64().unwrap() > 0);
    assert_eq!(m["report"]["counts"]["overall"]["tp"], 0);
    assert_eq!(m["report"]["overall"]["recall"], 0.0);
}

#[test]
fn eval_report_matches_library() {
    let t = TempDir::new().unwrap();
    let data = t.path().join("ds");
    synth(&data, 4, 6);
    let run = t.path().join("run");
    train_tiny(&data, &run, "ewasr", "1");
    let out = t.path().join("eval");
    ok(&["eval", "--data", p(&data), "--checkpoint", p(&run.join("best.ckpt")), "--save-predictions", "--out", p(&out)]);

    let ds = load_dataset(&data, None).unwrap();
    let preds: Vec<Vec<u8>> = ds
        .samples
        .iter()
        .map(|s| ewasr::data::read_mask(&out.join(format!("predictions/{}.png", s.id))).unwrap().2)
        .collect();
    let frames: Vec<_> = ds
        .samples
        .iter()
        .zip(&preds)
        .map(|(s, pr)| (s.id.as_str(), pr.as_slice(), s.annotation.as_ref().unwrap()))
        .collect();
    let api = evaluate(&frames, &EvalConfig::default()).unwrap();

    let cli = read_json(&out.join("metrics.json"));
    let parsed: MetricsReport = serde_json::from_value(cli["report"].clone()).unwrap();
    assert_eq!(parsed, api);
    assert_eq!(cli["report"], serde_json::to_value(&api).unwrap());

    let model = ewasr::train::load_model(&run.join("best.ckpt")).unwrap();
    let direct = ewasr::train::predict_labels(&model, &ds.samples, 8).unwrap();
    assert_eq!(direct, preds);
}

/// Checks `type`, `required`, `properties` and `items` of a JSON schema.
fn conforms(schema: &Value, v: &Value, at: &str) -> Result<(), String> {
    if let Some(t) = schema.get("type") {
        let types: Vec<&str> = match t {
            Value::String(s) => vec![s.as_str()],
            Value::Array(a) => a.iter().map(|x| x.as_str().unwrap()).collect(),
            _ => return Err(format!("{at}: bad schema type")),
        };
        let ok = types.iter().any(|t| match *t {
            "object" => v.is_object(),
            "array" => v.is_array(),
            "string" => v.is_string(),
            "integer" => v.is_u64() || v.is_i64(),
            "number" => v.is_number(),
            "boolean" => v.is_boolean(),
            "null" => v.is_null(),
            _ => false,
        });
        if !ok {
            return Err(format!("{at}: {v} is not {types:?}"));
        }
    }
    if let Some(obj) = v.as_object() {
        for key in schema.get("required").and_then(Value::as_array).into_iter().flatten() {
            let key = key.as_str().unwrap();
            if !obj.contains_key(key) {
                return Err(format!("{at}: missing {key}"));
            }
        }
        if let Some(props) = schema.get("properties").and_then(Value::as_object) {
            for (k, sub) in props {
                if let Some(x) = obj.get(k) {
                    conforms(sub, x, &format!("{at}.{k}"))?;
                }
            }
        }
    }
    if let (Some(items), Some(arr)) = (schema.get("items"), v.as_array()) {
        for (i, x) in arr.iter().enumerate() {
            conforms(items, x, &format!("{at}[{i}]"))?;
        }
    }
    Ok(())
}

fn schema() -> Value {
    read_json(&Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas/cost_report.schema.json"))
}

#[test]
fn profile_output_follows_schema() {
    let t = TempDir::new().unwrap();
    let out = t.path().join("light");
    ok(&["profile", "--variant", "wasr_light", "--out", p(&out)]);
    let v = read_json(&out.join("cost_report.json"));
    conforms(&schema(), &v, "$").unwrap();
    let sweep = &v["replacement_sweep"]["variants"];
    let names: Vec<&str> = sweep.as_array().unwrap().iter().map(|b| b["block"].as_str().unwrap()).collect();
    assert_eq!(names, ["aspp1", "carm1", "ffm", "carm2", "ffm1", "aspp"]);
    assert!(sweep.as_array().unwrap().iter().all(|b| b["delta_params"].as_i64().unwrap() < 0));

    let cfg = ewasr::models::ModelConfig::wasr_light(ewasr::backbone::BackbonePreset::Resnet18);
    let api = ewasr::profiling::count_config(&cfg).unwrap();
    assert_eq!(v["report"]["total_params"], api.total_params);
    assert_eq!(v["report"]["total_macs"], api.total_macs);
    let txt = fs::read_to_string(out.join("cost_report.txt")).unwrap();
    assert!(txt.contains("replacement sweep"));

    let out = t.path().join("timed");
    ok(&["profile", "--backbone", "tiny", "--height", "64", "--width", "96", "--time", "--repeats", "2", "--out", p(&out)]);
    let v = read_json(&out.join("cost_report.json"));
    conforms(&schema(), &v, "$").unwrap();
    assert!(v.get("replacement_sweep").is_none());
    assert_eq!(v["report"]["timing"]["repeats"], 2);
    assert!(v["report"]["blocks"].as_array().unwrap().iter().all(|b| b["total_ms"].is_number()));

    let bad = serde_json::json!({"tool": "ewasr", "version": "0", "command": "profile", "config": {}, "report": {"blocks": 3}});
    assert!(conforms(&schema(), &bad, "$").is_err());
}

#[test]
fn profile_flags_change_the_graph() {
    let t = TempDir::new().unwrap();
    let totals = |args: &[&str]| -> (u64, u64) {
        let out = t.path().join(args.join("_").replace('-', ""));
        let mut full = vec!["profile", "--out", p(&out)];
        full.extend_from_slice(args);
        ok(&full);
        let v = read_json(&out.join("cost_report.json"));
        (v["report"]["total_params"].as_u64().unwrap(), v["report"]["total_macs"].as_u64().unwrap())
    };
    let base = totals(&[]);
    let no_skip = totals(&["--no-long-skip"]);
    let reduced = totals(&["--channel-reduction"]);
    let replaced = totals(&["--variant", "wasr_light", "--replace", "ffm1"]);
    let light = totals(&["--variant", "wasr_light"]);
    assert!(no_skip.0 < base.0 && no_skip.1 < base.1);
    assert!(reduced.0 < base.0 && reduced.1 < base.1);
    assert!(replaced.0 < light.0 && replaced.1 < light.1);
}

#[test]
fn analyze_identical_images_have_no_diversity() {
    let t = TempDir::new().unwrap();
    let data = t.path().join("same");
    let scene = synth_scene(3, 0, 32, 64);
    for i in 0..4 {
        let mut s = scene.clone();
        s.id = format!("copy_{i}");
        write_sample(&data, &s).unwrap();
    }
    let run = t.path().join("run");
    train_tiny(&data, &run, "wasr_light", "1");
    let out = t.path().join("an");
    ok(&["analyze", "--data", p(&data), "--checkpoint", p(&run.join("best.ckpt")), "--out", p(&out)]);
    let div = read_json(&out.join("gate_diversity.json"));
    let gates = div["gates"].as_array().unwrap();
    assert!(!gates.is_empty());
    for g in gates {
        assert_eq!(g["images"], 4);
        assert!(g["stds"].as_array().unwrap().iter().all(|s| s.as_f64().unwrap() == 0.0), "{}", g["gate"]);
    }
    let rank = read_json(&out.join("imu_ranking.json"));
    let w: Vec<f64> = rank["ranking"].as_array().unwrap().iter().map(|r| r["weight"].as_f64().unwrap()).collect();
    assert!(w.windows(2).all(|p| p[0] == p[1]));
    assert!(fs::read_to_string(out.join("analysis.txt")).unwrap().contains("highest IMU weight"));
}

#[test]
fn analyze_ranking_is_a_stable_permutation() {
    let t = TempDir::new().unwrap();
    let scenes: Vec<_> = (0..6).map(|i| synth_scene(8, i, 32, 64)).collect();
    let fwd = t.path().join("fwd");
    let rev = t.path().join("rev");
    for s in &scenes {
        write_sample(&fwd, s).unwrap();
    }
    for s in scenes.iter().rev() {
        write_sample(&rev, s).unwrap();
    }
    let run = t.path().join("run");
    train_tiny(&fwd, &run, "wasr_light", "1");
    let ranking = |data: &Path, name: &str| -> Vec<(String, f64)> {
        let out = t.path().join(name);
        ok(&["analyze", "--data", p(data), "--checkpoint", p(&run.join("best.ckpt")), "--top", "2", "--out", p(&out)]);
        read_json(&out.join("imu_ranking.json"))["ranking"]
            .as_array()
            .unwrap()
            .iter()
            .map(|r| (r["id"].as_str().unwrap().to_string(), r["weight"].as_f64().unwrap()))
            .collect()
    };
    let a = ranking(&fwd, "a");
    let b = ranking(&rev, "b");
    assert_eq!(a, b);
    let mut ids: Vec<&str> = a.iter().map(|(id, _)| id.as_str()).collect();
    ids.sort();
    let expected: Vec<&str> = scenes.iter().map(|s| s.id.as_str()).collect();
    assert_eq!(ids, expected);
    assert!(a.windows(2).all(|p| p[0].1 >= p[1].1));
    assert!(a.iter().all(|(_, w)| *w > 0.0 && *w < 1.0));
}

#[test]
fn analyze_without_imu_gate_skips_ranking() {
    let t = TempDir::new().unwrap();
    let data = t.path().join("ds");
    synth(&data, 2, 5);
    let run = t.path().join("run");
    train_tiny(&data, &run, "ewasr", "1");
    let out = t.path().join("an");
    ok(&["analyze", "--data", p(&data), "--checkpoint", p(&run.join("best.ckpt")), "--out", p(&out)]);
    assert!(out.join("gate_diversity.json").is_file());
    assert!(!out.join("imu_ranking.json").exists());
    assert!(fs::read_to_string(out.join("analysis.txt")).unwrap().contains("ranking skipped"));
}

#[test]
fn config_file_and_flag_precedence() {
    let t = TempDir::new().unwrap();
    let cfg = t.path().join("run.json");
    fs::write(&cfg, r#"{"seed": 7, "synth": {"n": 3, "height": 32, "width": 64}}"#).unwrap();
    let a = t.path().join("a");
    ok(&["synth", "--config", p(&cfg), "--out", p(&a)]);
    let run = read_json(&a.join("synth_run.json"));
    assert_eq!(run["samples"], 3);
    assert_eq!(run["config"]["synth"]["seed"], 7);

    let b = t.path().join("b");
    ok(&["synth", "--config", p(&cfg), "--n", "2", "--seed", "8", "--out", p(&b)]);
    let run = read_json(&b.join("synth_run.json"));
    assert_eq!(run["samples"], 2);
    assert_eq!(run["config"]["seed"], 8);
    assert_eq!(run["config"]["synth"]["height"], 32);

    let bad = t.path().join("bad.json");
    fs::write(&bad, r#"{"synth": {"n": 3, "colour": "blue"}}"#).unwrap();
    assert_eq!(code(&ewasr(&["synth", "--config", p(&bad), "--out", p(&t.path().join("c"))])), 2);
    fs::write(&bad, "{not json").unwrap();
    assert_eq!(code(&ewasr(&["synth", "--config", p(&bad), "--out", p(&t.path().join("c"))])), 2);
    let missing = t.path().join("nope.json");
    assert_eq!(code(&ewasr(&["synth", "--config", p(&missing), "--out", p(&t.path().join("c"))])), 2);
    fs::write(&bad, r#"{"eval": {"coverage_threshold": 1.5}}"#).unwrap();
    assert_eq!(code(&ewasr(&["eval", "--config", p(&bad), "--data", p(&a), "--predictions", p(&a.join("masks")), "--out", p(&t.path().join("c"))])), 2);
}
