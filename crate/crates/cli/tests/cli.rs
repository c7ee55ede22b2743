use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use turnkit::data::{load_manifest, ManifestStats, TurnState};

const TINY: &str = r#"
[paths]
corpus = "train/manifest.jsonl"
checkpoints = "ckpt"
reports = "reports"

[synth]
content_tokens = [2, 3]
trailing_silence = [8, 12]

[model.encoder]
num_layers = 2
num_heads = 2
model_dim = 16
ffn_hidden = 24
mid_layer_index = 1

[model.lm]
num_layers = 1
num_heads = 2
model_dim = 16
ffn_hidden = 24

[model.llm_adapter]
num_layers = 1
num_heads = 2
ffn_hidden = 24

[model.fusion]
fusion_dim = 8
num_layers = 1
num_heads = 2
ffn_hidden = 16
detector_hidden = [16, 8]

[train]
batch_size = 2

[[train.stages]]
stage = "1a"
lr = 0.003
total_steps = 4

[[train.stages]]
stage = "1b"
lr = 0.003
total_steps = 4

[[train.stages]]
stage = "2"
lr = 0.003
total_steps = 4

[[train.stages]]
stage = "3"
lr = 0.001
total_steps = 4

[[train.stages]]
stage = "4"
lr = 0.003
total_steps = 4
"#;

fn turnkit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_turnkit"))
        .current_dir(dir)
        .env("TURNKIT_LOG", "quiet")
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn workspace(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("engine.toml"), config).unwrap();
    dir
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = turnkit(dir, args);
    assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_writes_a_loadable_four_state_corpus() {
    let ws = workspace("");
    let d = ws.path();
    ok(d, &["-c", "engine.toml", "synth", "--out", "a", "--seed", "7", "--per-state", "5"]);
    let descs = load_manifest(&d.join("a/manifest.jsonl")).unwrap();
    let stats = ManifestStats::from_descriptors(&descs);
    for s in TurnState::ALL {
        assert_eq!(stats.count(s), 5);
    }
}

#[test]
fn synth_is_byte_reproducible_and_never_overwrites() {
    let ws = workspace("");
    let d = ws.path();
    let args = |out: &'static str| ["-c", "engine.toml", "synth", "--out", out, "--seed", "7", "--per-state", "3"];
    ok(d, &args("a"));
    ok(d, &args("b"));
    assert_eq!(tree(&d.join("a")), tree(&d.join("b")));
    let again = turnkit(d, &args("a"));
    assert_eq!(code(&again), 3);
    assert_eq!(tree(&d.join("a")), tree(&d.join("b")));
}

#[test]
fn invalid_config_exits_with_2() {
    let ws = workspace("[synth]\noverlap_prob = 1.5\n");
    let out = turnkit(ws.path(), &["-c", "engine.toml", "synth", "--out", "x"]);
    assert_eq!(code(&out), 2);
    assert!(!ws.path().join("x").exists());

    let ws = workspace("[synth]\nmystery = true\n");
    assert_eq!(code(&turnkit(ws.path(), &["-c", "engine.toml", "synth", "--out", "x"])), 2);
}

#[test]
fn missing_config_file_is_an_io_error() {
    let ws = workspace("");
    assert_eq!(code(&turnkit(ws.path(), &["-c", "nope.toml", "synth", "--out", "x"])), 3);
}

#[test]
fn later_stage_without_prerequisite_exits_with_4() {
    let ws = workspace(TINY);
    let d = ws.path();
    ok(d, &["-c", "engine.toml", "synth", "--out", "train", "--per-state", "2"]);
    for stage in ["2", "3", "4"] {
        let out = turnkit(d, &["-c", "engine.toml", "train", "--stage", stage]);
        assert_eq!(code(&out), 4, "stage {stage}");
    }
    let out = turnkit(d, &["-c", "engine.toml", "train", "--stage", "3", "--from-scratch"]);
    assert_eq!(code(&out), 2);
    let out = turnkit(d, &["-c", "engine.toml", "eval", "--manifest", "train/manifest.jsonl"]);
    assert_eq!(code(&out), 4);
}

#[test]
fn staged_training_chains_checkpoints_and_versions_reruns() {
    let ws = workspace(TINY);
    let d = ws.path();
    ok(d, &["-c", "engine.toml", "synth", "--out", "train", "--per-state", "2"]);
    ok(d, &["-c", "engine.toml", "train", "--stage", "1", "--from-scratch"]);
    ok(d, &["-c", "engine.toml", "train", "--stage", "2"]);
    ok(d, &["-c", "engine.toml", "train", "--stage", "1", "--from-scratch"]);
    let ckpt = d.join("ckpt");
    assert!(ckpt.join("stage1.ckpt").exists() && ckpt.join("stage2.ckpt").exists());
    assert_eq!(
        std::fs::read(ckpt.join("stage1.ckpt")).unwrap(),
        std::fs::read(ckpt.join("stage1.2.ckpt")).unwrap()
    );
    let log = std::fs::read_to_string(ckpt.join("train-2.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(first["stage"], "2");
    for key in ["step", "loss", "lr", "timestamp"] {
        assert!(first.get(key).is_some(), "{key}");
    }
}

#[test]
fn end_to_end_train_eval_stream_bench() {
    let ws = workspace(TINY);
    let d = ws.path();
    ok(d, &["-c", "engine.toml", "synth", "--out", "train", "--per-state", "3", "--seed", "1"]);
    ok(d, &["-c", "engine.toml", "synth", "--out", "test", "--per-state", "2", "--seed", "2"]);
    ok(d, &["-c", "engine.toml", "train", "--stage", "all", "--from-scratch"]);
    ok(d, &["-c", "engine.toml", "train", "--stage", "all", "--from-scratch"]);
    let ckpt = d.join("ckpt");
    for n in 1..=4 {
        assert_eq!(
            std::fs::read(ckpt.join(format!("stage{n}.ckpt"))).unwrap(),
            std::fs::read(ckpt.join(format!("stage{n}.2.ckpt"))).unwrap(),
            "stage {n} differs across same-seed runs"
        );
    }

    let table = ok(d, &["-c", "engine.toml", "eval", "--manifest", "test/manifest.jsonl", "--mode", "semantic"]);
    assert!(table.contains("mode: semantic"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("reports/eval-semantic.json")).unwrap()).unwrap();
    assert_eq!(report[0]["n_samples"], 8);
    ok(d, &["-c", "engine.toml", "eval", "--manifest", "test/manifest.jsonl", "--mode", "semantic"]);
    assert!(d.join("reports/eval-semantic.2.json").exists());

    std::fs::create_dir_all(d.join("empty")).unwrap();
    std::fs::write(d.join("empty/manifest.jsonl"), "").unwrap();
    let out = turnkit(d, &["-c", "engine.toml", "eval", "--manifest", "empty/manifest.jsonl"]);
    assert_eq!(code(&out), 2);

    let feats = "test/features/complete-00000.ftfe";
    let run = || ok(d, &["-c", "engine.toml", "stream", "--features", feats, "--realtime-factor", "0"]);
    let strip = |text: &str| -> Vec<serde_json::Value> {
        text.lines()
            .map(|l| {
                let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
                v.as_object_mut().unwrap().remove("t_ms");
                v
            })
            .collect()
    };
    let (a, b) = (strip(&run()), strip(&run()));
    assert_eq!(a, b);
    assert_eq!(a.last().unwrap()["event_type"], "final_decision");
    assert_eq!(a.iter().filter(|e| e["event_type"] == "final_decision").count(), 1);

    let bench = ok(d, &["-c", "engine.toml", "bench-latency", "--manifest", "test/manifest.jsonl"]);
    let doc: serde_json::Value = serde_json::from_str(&bench).unwrap();
    let systems = doc["systems"].as_array().unwrap();
    let names: Vec<&str> = systems.iter().map(|s| s["system"].as_str().unwrap()).collect();
    assert_eq!(names, ["unified", "semantic", "cascaded", "cascaded-ar"]);
    for s in systems {
        let (mean, p50, p95) = (s["mean_ms"].as_f64().unwrap(), s["p50_ms"].as_f64().unwrap(), s["p95_ms"].as_f64().unwrap());
        assert!(mean >= 0.0 && p50 <= p95, "{s}");
    }
    assert!(d.join("reports/latency.json").exists());
}
