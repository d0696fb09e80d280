use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use segreward::geometry::{BinaryMask, Bbox, Point};
use segreward::structured_output::{render_response, ObjectAnswer};
use serde_json::{json, Value};
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_segreward"));
    c.env_remove("ENGINE_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn cup() -> ObjectAnswer {
    ObjectAnswer::new(Bbox::new(100.0, 100.0, 200.0, 180.0).unwrap(), Point::new(150.0, 140.0))
}

fn perfect_record() -> Value {
    let a = [cup()];
    json!({
        "raw_first_pass": render_response(
            "The query asks for something to drink from. The red cup on the left fits.",
            Some("the red cup on the left"),
            &a,
        ),
        "raw_second_pass": render_response("A red cup on the left.", None, &a),
        "gt_answers": [cup()],
        "image_w": 640.0,
        "image_h": 480.0,
    })
}

fn jsonl(dir: &Path, name: &str, rows: &[Value]) -> std::path::PathBuf {
    let p = dir.join(name);
    let text: String = rows.iter().map(|r| format!("{r}\n")).collect();
    fs::write(&p, text).unwrap();
    p
}

fn read_jsonl(p: &Path) -> Vec<Value> {
    fs::read_to_string(p)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn perfect_record_scores_eight() {
    let dir = TempDir::new().unwrap();
    let input = jsonl(dir.path(), "in.jsonl", &[perfect_record()]);
    let out = dir.path().join("out");
    let o = run(&["score", "--input", path(&input), "--out", path(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let lines = read_jsonl(&out.join("breakdowns.jsonl"));
    assert_eq!(lines.len(), 1);
    let b = &lines[0]["breakdown"];
    assert_eq!(b["len_conditional"], 1.0);
    assert_eq!(b["total"], 8.0);
    assert!(out.join("manifest.json").exists());
}

#[test]
fn empty_input_gives_empty_report() {
    let dir = TempDir::new().unwrap();
    let input = jsonl(dir.path(), "in.jsonl", &[]);
    let out = dir.path().join("out");
    let o = run(&["score", "--input", path(&input), "--out", path(&out)]);
    assert!(o.status.success());
    let summary: Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["records"], 0);
    assert_eq!(summary["mean"]["total"], 0.0);
    assert_eq!(fs::read_to_string(out.join("breakdowns.jsonl")).unwrap(), "");
}

#[test]
fn malformed_first_pass_scores_zero_with_warning() {
    let dir = TempDir::new().unwrap();
    let mut r = perfect_record();
    r["raw_first_pass"] = json!("<think>no closing tags");
    let input = jsonl(dir.path(), "in.jsonl", &[r]);
    let o = run(&["score", "--input", path(&input)]);
    assert!(o.status.success());
    let line: Value = serde_json::from_slice(&o.stdout).unwrap();
    for (k, v) in line["breakdown"].as_object().unwrap() {
        if !k.starts_with("len") {
            assert_eq!(v, 0.0, "{k}");
        }
    }
    assert!(String::from_utf8_lossy(&o.stderr).contains("unparseable"));
}

#[test]
fn schema_violation_exits_one_with_line_number() {
    let dir = TempDir::new().unwrap();
    let input = jsonl(dir.path(), "in.jsonl", &[perfect_record(), json!({"raw_first_pass": "x"})]);
    let o = run(&["score", "--input", path(&input)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("in.jsonl:2"));
}

#[test]
fn grouped_records_share_the_length_gate() {
    let dir = TempDir::new().unwrap();
    let mut good = perfect_record();
    good["group"] = json!("g");
    let mut miss = perfect_record();
    miss["group"] = json!("g");
    // A long first pass with a wrong answer.
    let far = ObjectAnswer::new(Bbox::new(400.0, 300.0, 500.0, 400.0).unwrap(), Point::new(450.0, 350.0));
    let think: String = (0..12).map(|i| format!("Step {i} checks another region of the scene. ")).collect();
    miss["raw_first_pass"] = json!(render_response(&think, Some("something"), &[far]));
    let input = jsonl(dir.path(), "in.jsonl", &[good, miss]);
    let o = run(&["score", "--input", path(&input)]);
    assert!(o.status.success());
    let lines: Vec<Value> = String::from_utf8_lossy(&o.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    // The gate is open, so the long answer keeps its raw length reward of 0.
    assert_eq!(lines[1]["breakdown"]["len_conditional"], 0.0);
    let a0 = lines[0]["advantage"].as_f64().unwrap();
    let a1 = lines[1]["advantage"].as_f64().unwrap();
    assert!(a0 > 0.0 && a1 < 0.0 && (a0 + a1).abs() < 1e-12);
}

#[test]
fn train_zero_steps_writes_header_only_csv() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("run");
    let o = run(&["train", "--steps", "0", "--out", path(&out)]);
    assert!(o.status.success());
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1);
    assert!(csv.starts_with("step,mean_total,mean_acc,mean_desc,mean_len,mean_n1,mean_n2,answer_entropy"));
    assert!(out.join("manifest.json").exists());
    assert!(String::from_utf8_lossy(&o.stdout).contains("no steps run"));
}

fn assert_same_tree(a: &Path, b: &Path) {
    let mut names: Vec<_> = fs::read_dir(a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(!names.is_empty());
    for n in names {
        let (x, y) = (a.join(&n), b.join(&n));
        if x.is_dir() {
            assert_same_tree(&x, &y);
        } else {
            assert_eq!(fs::read(&x).unwrap(), fs::read(&y).unwrap(), "{n:?} differs");
        }
    }
}

#[test]
fn manifest_replay_is_byte_identical_and_traces_rescore_exactly() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a");
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "steps = 4\nbatch_size = 4\n# comment\nmask_noise = 0.05\nreward_mode = mask\n").unwrap();
    let o = run(&["train", "--config", path(&cfg), "--seed", "5", "--out", path(&a)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("step 3:"));

    let b = dir.path().join("b");
    let o = run(&["replay", "--input", path(&a.join("manifest.json")), "--out", path(&b)]);
    assert!(o.status.success());
    assert_same_tree(&a, &b);

    let s = dir.path().join("s");
    let o = run(&["score", "--input", path(&a.join("traces.jsonl")), "--out", path(&s)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let lines = read_jsonl(&s.join("breakdowns.jsonl"));
    assert_eq!(lines.len(), 4 * 4 * 8);
    assert!(lines.iter().all(|l| l["matches_trace"] == true));
}

#[test]
fn tampered_trace_is_an_invariant_violation() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a");
    assert!(run(&["train", "--steps", "1", "--out", path(&a)]).status.success());
    let mut first = read_jsonl(&a.join("traces.jsonl")).remove(0);
    first["samples"][0]["breakdown"]["total"] = json!(7.5);
    let input = jsonl(dir.path(), "t.jsonl", &[first]);
    let o = run(&["score", "--input", path(&input)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn ablation_writes_three_runs() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("abl");
    let o = run(&["ablation", "--steps", "2", "--out", path(&out)]);
    assert!(o.status.success());
    for sub in ["base", "desc", "desc_len"] {
        assert_eq!(fs::read_to_string(out.join(sub).join("metrics.csv")).unwrap().lines().count(), 3);
        assert!(out.join(sub).join("manifest.json").exists());
    }
    let table = fs::read_to_string(out.join("ablation.md")).unwrap();
    assert!(table.contains("| +desc+len | yes | yes |"));
}

#[test]
fn config_errors_name_the_key() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "steps = 2\nanchor_nought = 45\n").unwrap();
    let o = run(&["train", "--config", path(&cfg), "--out", path(&dir.path().join("x"))]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("anchor_nought") && err.contains("line 2"), "{err}");

    fs::write(&cfg, "group_size = 1\n").unwrap();
    let o = run(&["train", "--config", path(&cfg), "--out", path(&dir.path().join("y"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn oracle_suites() {
    let o = run(&["oracle", "--suite", "matching", "--count", "200"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("PASS matching: 200 cases"));
    let o = run(&["oracle", "--suite", "kl", "--count", "2", "--seed", "3"]);
    assert!(o.status.success());
    assert_eq!(run(&["oracle", "--suite", "nope"]).status.code(), Some(1));
}

#[test]
fn engine_threads_is_validated() {
    let o = bin()
        .env("ENGINE_THREADS", "0")
        .args(["oracle", "--suite", "grpo", "--count", "5"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    let o = bin()
        .env("ENGINE_THREADS", "2")
        .args(["oracle", "--suite", "grpo", "--count", "5"])
        .output()
        .unwrap();
    assert!(o.status.success());
}

fn square(w: usize, h: usize, x0: usize, y0: usize, side: usize) -> BinaryMask {
    let mut m = BinaryMask::empty(w, h);
    for y in y0..y0 + side {
        for x in x0..x0 + side {
            m.set(x, y, true);
        }
    }
    m
}

fn mask_row(m: &BinaryMask) -> Value {
    json!({ "mask": m.to_base64() })
}

fn eval_rows(preds: &[Value], gts: &[Value]) -> (Output, Vec<Value>) {
    let dir = TempDir::new().unwrap();
    let p = jsonl(dir.path(), "p.jsonl", preds);
    let g = jsonl(dir.path(), "g.jsonl", gts);
    let out = dir.path().join("e");
    let o = run(&["eval", "--input", path(&p), "--gt", path(&g), "--out", path(&out)]);
    let rows = if o.status.success() {
        read_jsonl(&out.join("eval.jsonl"))
    } else {
        Vec::new()
    };
    (o, rows)
}

#[test]
fn eval_identity_and_averaging() {
    let a = square(20, 20, 2, 2, 5);
    let b = square(20, 20, 10, 10, 6);
    let (o, rows) = eval_rows(&[mask_row(&a), mask_row(&b)], &[mask_row(&a), mask_row(&b)]);
    assert!(o.status.success());
    assert_eq!((rows[0]["giou"].as_f64(), rows[0]["ciou"].as_f64()), (Some(1.0), Some(1.0)));

    let wrong = square(20, 20, 15, 0, 3);
    let (_, rows) = eval_rows(&[mask_row(&a), mask_row(&wrong)], &[mask_row(&a), mask_row(&b)]);
    assert_eq!(rows[0]["giou"], 0.5);
}

#[test]
fn eval_mixed_sizes_separate_giou_from_ciou() {
    // Large object found, small object missed: cIoU favours the large one.
    let big = square(40, 40, 0, 0, 30);
    let small = square(40, 40, 35, 35, 2);
    let elsewhere = square(40, 40, 0, 38, 2);
    let (_, rows) = eval_rows(&[mask_row(&big), mask_row(&elsewhere)], &[mask_row(&big), mask_row(&small)]);
    let giou = rows[0]["giou"].as_f64().unwrap();
    let ciou = rows[0]["ciou"].as_f64().unwrap();
    assert_eq!(giou, 0.5);
    let expect = 900.0 / (900.0 + 8.0);
    assert!((ciou - expect).abs() < 1e-12);
}

#[test]
fn eval_reports_tokens_and_splits() {
    let a = square(8, 8, 0, 0, 4);
    let preds = [
        json!({"mask": a.to_base64(), "tokens": 20.0, "split": "val"}),
        json!({"mask": a.to_base64(), "raw_first_pass": render_response("one two three", Some("d"), &[]), "split": "test"}),
    ];
    let (o, rows) = eval_rows(&preds, &[mask_row(&a), mask_row(&a)]);
    assert!(o.status.success());
    assert_eq!(rows.len(), 2);
    assert_eq!((rows[0]["split"].as_str(), rows[0]["tokens"].as_f64()), (Some("val"), Some(20.0)));
    assert_eq!((rows[1]["split"].as_str(), rows[1]["tokens"].as_f64()), (Some("test"), Some(3.0)));
}

#[test]
fn eval_misalignment_exits_nonzero() {
    let a = square(8, 8, 0, 0, 4);
    let (o, _) = eval_rows(&[mask_row(&a)], &[mask_row(&a), mask_row(&a)]);
    assert_eq!(o.status.code(), Some(1));
    let b = square(9, 8, 0, 0, 4);
    let (o, _) = eval_rows(&[mask_row(&b)], &[mask_row(&a)]);
    assert_eq!(o.status.code(), Some(1));
}
