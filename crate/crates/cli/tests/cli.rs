use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bridgepath::checkpoint;
use bridgepath::corpus::Utterance;
use bridgepath::infer::{diverse_generate, GenerationRequest};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_bridgepath"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth(dir: &Path) {
    let o = run(
        &["synth", "--out-dir", "data", "--templates", "3", "--holdout-templates", "1", "--branching", "2"],
        dir,
    );
    assert!(o.status.success(), "{}", stderr(&o));
}

fn config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("run.toml");
    fs::write(
        &p,
        format!(
            "train_corpus = \"data/train.jsonl\"\ncheckpoint_dir = \"ckpt\"\n\
             d_model = 8\nmapper_hidden = 8\nmax_len = 32\nmin_freq = 1\n\
             batch_size = 8\nwarmup = 10\nlr = 3e-3\n{extra}"
        ),
    )
    .unwrap();
    p
}

/// Synthetic corpus plus a checkpoint trained for a few steps.
fn trained(steps: u64) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    config(dir.path(), &format!("max_steps = {steps}\n"));
    let o = run(&["--threads", "1", "train", "--config", "run.toml"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    dir
}

#[test]
fn synth_writes_corpus_and_continuations() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let train = fs::read_to_string(dir.path().join("data/train.jsonl")).unwrap();
    // 3 templates, 2 successors at each of the 3 follow-up turns
    assert_eq!(train.lines().count(), 3 * 8);
    let held = fs::read_to_string(dir.path().join("data/heldout.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(held.lines().next().unwrap()).unwrap();
    // branching 2: the other valid continuation is the single extra reference
    assert_eq!(first["references"].as_array().unwrap().len(), 1);
    assert!(dir.path().join("data/continuations.json").is_file());
}

#[test]
fn config_errors_exit_2_and_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("a.toml"), "checkpoint_dir = \"c\"\n").unwrap();
    let o = run(&["train", "--config", "a.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train_corpus"), "{}", stderr(&o));

    fs::write(dir.path().join("b.toml"), "train_corpus = \"x.jsonl\"\ncheckpoint_dir = \"c\"\nbatchsize = 3\n").unwrap();
    let o = run(&["train", "--config", "b.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("batchsize"), "{}", stderr(&o));
    // nothing was written
    assert!(!dir.path().join("c").exists());
}

#[test]
fn zero_steps_writes_only_the_initial_checkpoint() {
    let dir = trained(0);
    let ckpt = dir.path().join("ckpt");
    assert!(ckpt.join(checkpoint::MANIFEST).is_file());
    assert!(ckpt.join(checkpoint::PARAMS).is_file());
    assert!(!ckpt.join("metrics.csv").exists());
    assert_eq!(checkpoint::read_manifest(&ckpt).unwrap().step, 0);
}

#[test]
fn training_is_reproducible_and_resumable() {
    let a = trained(12);
    let b = trained(12);
    let bytes = |d: &Path| fs::read(d.join("ckpt").join(checkpoint::PARAMS)).unwrap();
    assert_eq!(bytes(a.path()), bytes(b.path()));
    let log = fs::read_to_string(a.path().join("ckpt/metrics.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("step,l_beta,nll,kl,lr"));
    assert_eq!(log.lines().count(), 13);

    // 6 steps, then resume to 12
    let c = trained(6);
    config(c.path(), "max_steps = 12\n");
    let o = run(&["--threads", "1", "train", "--config", "run.toml", "--resume"], c.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(bytes(a.path()), bytes(c.path()));
    let resumed = fs::read_to_string(c.path().join("ckpt/metrics.csv")).unwrap();
    assert_eq!(resumed, log);
}

#[test]
fn generate_contract() {
    let dir = trained(10);
    let p = dir.path();
    fs::write(p.join("empty.jsonl"), "").unwrap();
    let o = run(&["generate", "--checkpoint", "ckpt", "--contexts", "empty.jsonl"], p);
    assert!(o.status.success());
    assert!(o.stdout.is_empty());

    // unknown words map to <unk> instead of failing
    fs::write(
        p.join("ctx.jsonl"),
        "{\"context\": [\"w1 w2 never-seen\", \"w3\"]}\n{\"context\": [\"w4\"]}\n",
    )
    .unwrap();
    let args = ["generate", "--checkpoint", "ckpt", "--contexts", "ctx.jsonl", "--mode", "expectation"];
    let first = run(&args, p);
    assert!(first.status.success(), "{}", stderr(&first));
    assert_eq!(first.stdout, run(&args, p).stdout);
    let lines: Vec<serde_json::Value> = stdout(&first).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    for key in ["context", "response", "mode", "seed", "logprob"] {
        assert!(lines[0].get(key).is_some(), "missing {key}");
    }

    let o = run(
        &[
            "generate", "--checkpoint", "ckpt", "--contexts", "ctx.jsonl", "--mode", "sampled", "--decoding", "beam:3",
            "--seed", "7", "--n", "10",
        ],
        p,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let table: serde_json::Value = serde_json::from_str(stdout(&o).lines().next().unwrap()).unwrap();
    let (state, vocab) = checkpoint::load(&p.join("ckpt")).unwrap();
    let vocab = vocab.unwrap();
    let context: Vec<Utterance> = ["w1 w2 never-seen", "w3"]
        .iter()
        .map(|t| Utterance::new(t, &vocab).unwrap())
        .collect();
    let req = GenerationRequest {
        seed: 7,
        ..GenerationRequest::new(context, "sampled", "beam:3")
    };
    let expected: Vec<(String, u64)> = diverse_generate(&state.model, &req, 10)
        .unwrap()
        .into_iter()
        .map(|r| (vocab.decode(&r.tokens), r.count as u64))
        .collect();
    let got: Vec<(String, u64)> = table["responses"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| (r["response"].as_str().unwrap().to_string(), r["count"].as_u64().unwrap()))
        .collect();
    assert_eq!(got, expected);

    let o = run(&["generate", "--checkpoint", "ckpt", "--contexts", "ctx.jsonl", "--decoding", "nucleus"], p);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_writes_json_and_appends_csv() {
    let dir = trained(10);
    let p = dir.path();
    let args = [
        "eval", "--checkpoint", "ckpt", "--corpus", "data/heldout.jsonl", "--continuations", "data/continuations.json",
        "--csv", "scores.csv", "--out", "report.json",
    ];
    for _ in 0..2 {
        let o = run(&args, p);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["bleu"].as_array().unwrap().len(), 4);
    assert!(report["continuation_rate"].is_number());
    let csv = fs::read_to_string(p.join("scores.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert_eq!(csv.lines().nth(1), csv.lines().nth(2));
}

#[test]
fn sample_paths_contract() {
    let dir = trained(0);
    let p = dir.path();
    fs::write(
        p.join("five.jsonl"),
        "{\"turns\": [\"w1\", \"w2 w3\", \"w4\", \"w5 w6\", \"w7\"]}\n",
    )
    .unwrap();
    let o = run(&["sample-paths", "--checkpoint", "ckpt", "--dialogue", "five.jsonl", "-k", "1"], p);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.starts_with("path,t,dim0,"));
    assert_eq!(text.lines().count(), 1 + 5);

    let o = run(
        &["sample-paths", "--checkpoint", "ckpt", "--dialogue", "five.jsonl", "-k", "4", "--normalize"],
        p,
    );
    let values: Vec<f64> = stdout(&o)
        .lines()
        .skip(1)
        .flat_map(|l| l.split(',').skip(2).map(|x| x.parse::<f64>().unwrap()).collect::<Vec<_>>())
        .collect();
    assert_eq!(values.len(), 4 * 5 * 8);
    assert!(values.iter().all(|v| (0.0..=1.0).contains(v)));

    fs::write(p.join("one.jsonl"), "{\"turns\": [\"w1\"]}\n").unwrap();
    let o = run(&["sample-paths", "--checkpoint", "ckpt", "--dialogue", "one.jsonl"], p);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("at least 2 utterances"));
}

#[test]
fn gradcheck_passes_and_localizes_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["gradcheck", "--max-per-tensor", "4"], dir.path());
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("all groups pass"));

    let o = run(&["gradcheck", "--max-per-tensor", "4", "--corrupt", "attention"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let failing: Vec<String> = stdout(&o)
        .lines()
        .filter(|l| l.ends_with("FAIL"))
        .map(|l| l.split_whitespace().next().unwrap().to_string())
        .collect();
    assert_eq!(failing, vec!["attention"]);

    // single precision cannot meet the double-precision tolerance
    let o = run(&["gradcheck", "--max-per-tensor", "4", "--precision", "f32", "--tol", "1e-4"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}
