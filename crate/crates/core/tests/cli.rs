use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

use vaquita::model::{random_video, PipelineConfig};
use vaquita::vqta::{self, DType};
use vaquita::Tensor;

fn vaquita() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_vaquita"));
    cmd.env_remove("VAQUITA_SEED");
    cmd
}

fn run(args: &[&str]) -> Output {
    vaquita().args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "bad stdout ({e}): {}\nstderr: {}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

fn write_tensor(dir: &Path, name: &str, rows: &[Vec<f64>]) -> PathBuf {
    let path = dir.join(name);
    vqta::write(&path, &Tensor::from_rows(rows).unwrap(), DType::F64).unwrap();
    path
}

fn write_config(dir: &Path, cfg: &PipelineConfig) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, cfg.to_json()).unwrap();
    path
}

// sample --------------------------------------------------------------------

#[test]
fn sample_test_mode_grid() {
    let dir = TempDir::new().unwrap();
    let rows: Vec<Vec<f64>> = (0..100).map(|i| vec![1.0, i as f64]).collect();
    let frames = write_tensor(dir.path(), "f.vqta", &rows);
    let out = dir.path().join("plan.json");
    let o = run(&[
        "sample",
        "--frames",
        s(&frames),
        "--T",
        "4",
        "--mode",
        "test",
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(
        text.trim(),
        r#"{"all":[0,25,50,75],"similarity":[],"uniform":[0,25,50,75]}"#
    );
}

#[test]
fn sample_train_mode_six_frames() {
    let dir = TempDir::new().unwrap();
    let rows = vec![
        vec![0.0, 1.0],
        vec![1.0, 0.1],
        vec![0.5, 0.5],
        vec![-1.0, 0.0],
        vec![1.0, 0.0],
        vec![0.0, -1.0],
    ];
    let frames = write_tensor(dir.path(), "f.vqta", &rows);
    let query = write_tensor(dir.path(), "q.vqta", &[vec![1.0, 0.0]]);
    let o = run(&[
        "sample",
        "--frames",
        s(&frames),
        "--query",
        s(&query),
        "--T",
        "4",
        "--mode",
        "train",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let plan = stdout_json(&o);
    assert_eq!(plan["all"], serde_json::json!([0, 1, 3, 4]));
    assert_eq!(plan["uniform"], serde_json::json!([0, 3]));
}

#[test]
fn sample_more_frames_than_available_warns() {
    let dir = TempDir::new().unwrap();
    let frames = write_tensor(dir.path(), "f.vqta", &[vec![1.0], vec![2.0], vec![3.0]]);
    let query = write_tensor(dir.path(), "q.vqta", &[vec![1.0]]);
    let o = run(&[
        "sample",
        "--frames",
        s(&frames),
        "--query",
        s(&query),
        "--T",
        "8",
        "--mode",
        "train",
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout_json(&o)["all"], serde_json::json!([0, 1, 2]));
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning"));
}

#[test]
fn sample_zero_norm_is_degenerate() {
    let dir = TempDir::new().unwrap();
    let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 1.0]).collect();
    let frames = write_tensor(dir.path(), "f.vqta", &rows);
    let query = write_tensor(dir.path(), "q.vqta", &[vec![0.0, 0.0]]);
    let o = run(&[
        "sample",
        "--frames",
        s(&frames),
        "--query",
        s(&query),
        "--T",
        "4",
        "--mode",
        "train",
    ]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn sample_width_mismatch_and_missing_query() {
    let dir = TempDir::new().unwrap();
    let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 1.0]).collect();
    let frames = write_tensor(dir.path(), "f.vqta", &rows);
    let query = write_tensor(dir.path(), "q.vqta", &[vec![1.0, 0.0, 0.0]]);
    let o = run(&[
        "sample",
        "--frames",
        s(&frames),
        "--query",
        s(&query),
        "--T",
        "4",
        "--mode",
        "train",
    ]);
    assert_eq!(o.status.code(), Some(4));
    let o = run(&[
        "sample",
        "--frames",
        s(&frames),
        "--T",
        "4",
        "--mode",
        "train",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn malformed_inputs_never_panic() {
    let dir = TempDir::new().unwrap();
    let junk = dir.path().join("junk");
    fs::write(&junk, b"VQTA\x01\x01\xff\xff garbage").unwrap();
    let empty = dir.path().join("empty");
    fs::write(&empty, b"").unwrap();
    let cfg = write_config(dir.path(), &PipelineConfig::desk());
    for args in [
        vec!["sample", "--frames", s(&junk), "--T", "2", "--mode", "test"],
        vec![
            "sample",
            "--frames",
            s(&empty),
            "--T",
            "0",
            "--mode",
            "test",
        ],
        vec![
            "forward",
            "--config",
            s(&junk),
            "--video",
            s(&junk),
            "--question",
            "q",
        ],
        vec![
            "forward",
            "--config",
            s(&cfg),
            "--video",
            s(&junk),
            "--question",
            "q",
        ],
        vec![
            "train",
            "--config",
            s(&cfg),
            "--data",
            s(&junk),
            "--out",
            s(dir.path()),
        ],
        vec!["eval", "--pred", s(&junk), "--refs", s(&junk)],
        vec!["gradcheck", "--eps", "-1"],
        vec!["sample", "--T", "x"],
    ] {
        let o = run(&args);
        assert_eq!(
            o.status.code(),
            Some(2),
            "{args:?}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
}

// forward -------------------------------------------------------------------

struct ForwardFixture {
    dir: TempDir,
    config: PathBuf,
    video: PathBuf,
}

fn forward_fixture() -> ForwardFixture {
    let dir = TempDir::new().unwrap();
    let cfg = PipelineConfig::desk();
    let config = write_config(dir.path(), &cfg);
    let video = dir.path().join("video.vqta");
    vqta::write(&video, &random_video(20, cfg.raw_dim, 4), DType::F32).unwrap();
    ForwardFixture { dir, config, video }
}

fn forward(f: &ForwardFixture, extra: &[&str]) -> Output {
    let mut args = vec!["forward", "--config", s(&f.config), "--video", s(&f.video)];
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn forward_output_shape() {
    let f = forward_fixture();
    let o = forward(&f, &["--question", "what is the man doing?"]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let v = stdout_json(&o);
    let cfg = PipelineConfig::desk();
    let logits = v["logits"].as_array().unwrap();
    assert_eq!(logits.len(), cfg.answer_len);
    assert!(logits
        .iter()
        .all(|r| r.as_array().unwrap().len() == cfg.vocab_size));
    let ids = v["token_ids"].as_array().unwrap();
    for (row, id) in logits.iter().zip(ids) {
        let row: Vec<f64> = row
            .as_array()
            .unwrap()
            .iter()
            .map(|x| x.as_f64().unwrap())
            .collect();
        let best = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(row[id.as_u64().unwrap() as usize], best);
    }
    assert_eq!(v["question_tokens"], 5);
    let text = String::from_utf8(o.stdout).unwrap();
    let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
    let mut sorted = keys.clone();
    sorted.sort_unstable();
    assert_eq!(keys, sorted);
    assert!(text.find("\"answer\"").unwrap() < text.find("\"token_ids\"").unwrap());
}

#[test]
fn critical_flag_adds_prompt_tokens() {
    let f = forward_fixture();
    let plain = stdout_json(&forward(&f, &["--question", "what is the man doing"]));
    let critical = stdout_json(&forward(
        &f,
        &["--question", "what is the man doing", "--critical"],
    ));
    let n = |v: &Value| v["question_tokens"].as_u64().unwrap();
    assert_eq!(n(&critical), n(&plain) + 3);
    assert_eq!(
        critical["question"],
        "Please be critical. what is the man doing"
    );
}

#[test]
fn missing_video_names_the_path() {
    let f = forward_fixture();
    let missing = f.dir.path().join("nope.vqta");
    let o = run(&[
        "forward",
        "--config",
        s(&f.config),
        "--video",
        s(&missing),
        "--question",
        "what",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains(s(&missing)));
}

#[test]
fn wrong_video_width_is_a_shape_error() {
    let f = forward_fixture();
    let bad = f.dir.path().join("bad.vqta");
    vqta::write(&bad, &random_video(5, 7, 0), DType::F64).unwrap();
    let o = run(&[
        "forward",
        "--config",
        s(&f.config),
        "--video",
        s(&bad),
        "--question",
        "what",
    ]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn unknown_config_key_is_rejected() {
    let f = forward_fixture();
    let mut v: Value = serde_json::from_str(&fs::read_to_string(&f.config).unwrap()).unwrap();
    v["learning_rte"] = Value::from(0.1);
    fs::write(&f.config, v.to_string()).unwrap();
    let o = forward(&f, &["--question", "what"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn seed_precedence_env_over_flag_over_config() {
    let f = forward_fixture();
    let q = ["--question", "what color is the shirt"];
    let config_seed = forward(&f, &q).stdout;
    let flag3 = forward(&f, &[q[0], q[1], "--seed", "3"]).stdout;
    assert_ne!(config_seed, flag3);
    let env3 = vaquita()
        .env("VAQUITA_SEED", "3")
        .args([
            "forward",
            "--config",
            s(&f.config),
            "--video",
            s(&f.video),
            q[0],
            q[1],
            "--seed",
            "9",
        ])
        .output()
        .unwrap();
    assert_eq!(env3.stdout, flag3);
    let bad = vaquita()
        .env("VAQUITA_SEED", "three")
        .args([
            "forward",
            "--config",
            s(&f.config),
            "--video",
            s(&f.video),
            q[0],
            q[1],
        ])
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

// train ---------------------------------------------------------------------

fn train_fixture(dir: &Path, mutate: impl Fn(&mut PipelineConfig)) -> (PathBuf, PathBuf) {
    let mut cfg = PipelineConfig::desk();
    cfg.batch_size = 2;
    cfg.epochs = 2;
    mutate(&mut cfg);
    let config = write_config(dir, &cfg);
    let answers = ["red", "blue", "running", "cooking"];
    let mut records = Vec::new();
    for (i, a) in answers.iter().enumerate() {
        let name = format!("v{i}.vqta");
        vqta::write(
            dir.join(&name),
            &random_video(6 + i, cfg.raw_dim, i as u64),
            DType::F64,
        )
        .unwrap();
        records.push(
            serde_json::json!({"frames": name, "question": "what is the man doing", "answer": a}),
        );
    }
    let data = dir.join("data.json");
    fs::write(&data, Value::from(records).to_string()).unwrap();
    (config, data)
}

fn losses(dir: &Path) -> Vec<(usize, String)> {
    let text = fs::read_to_string(dir.join("losses.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("step,loss"));
    lines
        .map(|l| {
            let (s, v) = l.split_once(',').unwrap();
            (s.parse().unwrap(), v.to_string())
        })
        .collect()
}

fn dir_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "vqta"))
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn train_writes_history_and_checkpoints() {
    let dir = TempDir::new().unwrap();
    let (config, data) = train_fixture(dir.path(), |_| {});
    let out = dir.path().join("run");
    let o = run(&[
        "train",
        "--config",
        s(&config),
        "--data",
        s(&data),
        "--out",
        s(&out),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let history = losses(&out);
    assert_eq!(
        history.iter().map(|h| h.0).collect::<Vec<_>>(),
        vec![0, 1, 2, 3]
    );
    assert!(out.join("final/manifest.json").exists());
    let v = stdout_json(&o);
    assert_eq!(v["steps"], 4);
    assert_ne!(
        dir_files(&out.join("initial")),
        dir_files(&out.join("final"))
    );
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let dir = TempDir::new().unwrap();
    let (config, data) = train_fixture(dir.path(), |c| c.learning_rate = 0.0);
    let out = dir.path().join("run");
    let o = run(&[
        "train",
        "--config",
        s(&config),
        "--data",
        s(&data),
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(
        dir_files(&out.join("initial")),
        dir_files(&out.join("final"))
    );
}

#[test]
fn resume_reproduces_the_next_step() {
    let dir = TempDir::new().unwrap();
    let (config, data) = train_fixture(dir.path(), |_| {});
    let full = dir.path().join("full");
    assert!(run(&[
        "train",
        "--config",
        s(&config),
        "--data",
        s(&data),
        "--out",
        s(&full)
    ])
    .status
    .success());

    let half_dir = dir.path().join("half");
    fs::create_dir(&half_dir).unwrap();
    let (half_config, half_data) = train_fixture(&half_dir, |c| c.epochs = 1);
    let first = dir.path().join("first");
    assert!(run(&[
        "train",
        "--config",
        s(&half_config),
        "--data",
        s(&half_data),
        "--out",
        s(&first)
    ])
    .status
    .success());
    let second = dir.path().join("second");
    let o = run(&[
        "train",
        "--config",
        s(&config),
        "--data",
        s(&data),
        "--out",
        s(&second),
        "--resume",
        s(&first.join("final")),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );

    let mut stitched = losses(&first);
    stitched.extend(losses(&second));
    assert_eq!(stitched, losses(&full));
    assert_eq!(
        dir_files(&second.join("final")),
        dir_files(&full.join("final"))
    );
}

#[test]
fn diverging_training_exits_numeric() {
    let dir = TempDir::new().unwrap();
    let (config, data) = train_fixture(dir.path(), |c| c.learning_rate = 1e300);
    let out = dir.path().join("run");
    let o = run(&[
        "train",
        "--config",
        s(&config),
        "--data",
        s(&data),
        "--out",
        s(&out),
    ]);
    assert_eq!(
        o.status.code(),
        Some(5),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

// gradcheck -----------------------------------------------------------------

#[test]
fn gradcheck_exit_codes() {
    let o = run(&["gradcheck", "--module", "all", "--seeds", "2"]);
    assert_eq!(o.status.code(), Some(0));
    let v = stdout_json(&o);
    assert_eq!(v["passed"], true);
    assert!(v["groups"]
        .as_array()
        .unwrap()
        .iter()
        .any(|g| g["module"] == "model"));

    let o = run(&[
        "gradcheck",
        "--module",
        "perceiver",
        "--corrupt-adjoint",
        "softmax",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("perceiver seed 0"));

    let o = run(&["gradcheck", "--module", "tensor", "--eps", "0"]);
    assert_eq!(o.status.code(), Some(2));
}

// eval ----------------------------------------------------------------------

fn eval(dir: &Path, pred: &[&str], refs: &[&str], judge: &str) -> Output {
    let p = dir.join("pred.json");
    let r = dir.join("refs.json");
    fs::write(&p, serde_json::to_string(pred).unwrap()).unwrap();
    fs::write(&r, serde_json::to_string(refs).unwrap()).unwrap();
    run(&["eval", "--pred", s(&p), "--refs", s(&r), "--judge", judge])
}

#[test]
fn eval_scores() {
    let dir = TempDir::new().unwrap();
    let refs = ["a", "b", "c", "d", "e", "f", "g", "h"];
    let o = eval(dir.path(), &refs, &refs, "exact");
    assert_eq!(
        String::from_utf8(o.stdout).unwrap().trim(),
        r#"{"accuracy":1.0,"score":5.0}"#
    );
    let o = eval(dir.path(), &["z"; 8], &refs, "exact");
    assert_eq!(
        stdout_json(&o),
        serde_json::json!({"accuracy": 0.0, "score": 1.0})
    );
    let half = ["A", "b.", "C", "d", "x", "x", "x", "x"];
    let o = eval(dir.path(), &half, &refs, "exact");
    assert_eq!(
        stdout_json(&o),
        serde_json::json!({"accuracy": 0.5, "score": 3.0})
    );

    let a = eval(dir.path(), &half, &refs, "mock");
    let b = eval(dir.path(), &half, &refs, "mock");
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
    let score = stdout_json(&a)["score"].as_f64().unwrap();
    assert!((1.0..=5.0).contains(&score));

    let o = eval(dir.path(), &["a"], &refs, "exact");
    assert_eq!(o.status.code(), Some(2));
}
