use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn thgcl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_thgcl")).args(args).output().expect("spawn thgcl")
}

fn ok(args: &[&str]) -> String {
    let out = thgcl(args);
    assert!(
        out.status.success(),
        "thgcl {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_dataset(dir: &Path) {
    ok(&[
        "synth", "--out", s(dir), "--num-classes", "3", "--clips-train", "20", "--clips-eval", "6",
        "--clip-ms", "3000", "--audio-dim", "4", "--video-dim", "6", "--event-len-ms", "1000",
        "--noise-sigma", "0.05", "--seed", "2",
    ]);
}

#[test]
fn synth_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    small_dataset(&data);
    let train = data.join("train.tsv");
    let eval = data.join("eval.tsv");
    assert!(data.join("events.tsv").exists());

    let summary = ok(&["describe", "--manifest", s(&train)]);
    assert!(summary.starts_with("clips 20\n"), "{summary}");
    assert!(summary.contains("audio_segments_per_clip 3 20"), "{summary}");

    let config = dir.path().join("cfg.toml");
    fs::write(&config, "hidden = 6\nd = 5\nlayers = 2\nbatch_size = 4\neval_every = 2\n").unwrap();
    let out = dir.path().join("run");
    let log = ok(&[
        "train", "--config", s(&config), "--manifest", s(&train), "--out", s(&out), "--max-iterations", "4",
        "--loss-mode", "fl-cl", "--seed", "3",
    ]);
    assert!(log.lines().next().unwrap().starts_with("iter=1 fl="), "{log}");
    assert!(log.contains("eval_iter=4 map="), "{log}");
    assert!(log.lines().last().unwrap().starts_with("checkpoint "), "{log}");
    for f in ["best.ckpt", "train_log.txt", "loss_curve.tsv", "eval_curve.tsv", "config.toml"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let saved = fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(saved.contains("seed = 3") && saved.contains("num_classes = 3"), "{saved}");

    let ckpt = out.join("best.ckpt");
    let report = ok(&["eval", "--checkpoint", s(&ckpt), "--manifest", s(&eval), "--summary"]);
    assert!(report.starts_with("clips=6\nmap="), "{report}");
    assert_eq!(report, ok(&["eval", "--checkpoint", s(&ckpt), "--manifest", s(&eval), "--summary"]));
    let text = ok(&["eval", "--checkpoint", s(&ckpt), "--manifest", s(&eval)]);
    assert!(text.contains("\nmAP ") && text.contains("class 2 AP "), "{text}");

    // retraining with the saved config reproduces the log
    let again = dir.path().join("again");
    ok(&["train", "--config", s(&out.join("config.toml")), "--manifest", s(&train), "--out", s(&again), "--quiet"]);
    let losses = |dir: &Path| -> Vec<String> {
        let text = fs::read_to_string(dir.join("loss_curve.tsv")).unwrap();
        // drop the wall_ms column
        text.lines().map(|l| l.rsplit_once('\t').unwrap().0.to_string()).collect()
    };
    assert_eq!(losses(&out), losses(&again));
    assert_eq!(losses(&out).len(), 5);
}

#[test]
fn build_graph_dumps_edges() {
    let dir = tempfile::tempdir().unwrap();
    small_dataset(dir.path());
    let manifest = dir.path().join("train.tsv");
    let text = ok(&["build-graph", "--manifest", s(&manifest), "--clip-id", "train-00000", "--seed", "1"]);
    let header = text.lines().next().unwrap();
    assert_eq!(header, "# audio_nodes=3 video_nodes=12 temporal_mode=gau_haw");
    let kinds: Vec<&str> = text.lines().skip(1).map(|l| l.split(' ').next().unwrap()).collect();
    for k in ["audio", "video", "inter"] {
        assert!(kinds.contains(&k), "{k}");
    }
    assert_eq!(
        text,
        ok(&["build-graph", "--manifest", s(&manifest), "--clip-id", "train-00000", "--seed", "1"])
    );
    let gau = ok(&[
        "build-graph", "--manifest", s(&manifest), "--clip-id", "train-00000", "--temporal-mode", "both-gau",
    ]);
    assert!(gau.starts_with("# audio_nodes=3 video_nodes=12 temporal_mode=both_gau"));

    let missing = thgcl(&["build-graph", "--manifest", s(&manifest), "--clip-id", "nope"]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope"));
}

#[test]
fn gradcheck_passes() {
    let text = ok(&["gradcheck", "--seed", "4"]);
    let last = text.lines().last().unwrap();
    let worst: f64 = last.strip_prefix("max_rel_error ").unwrap().parse().unwrap();
    assert!(worst < 1e-4);
    assert_eq!(text.lines().count(), 20);
}

#[test]
fn config_errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    small_dataset(dir.path());
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "learning_rate = 0.1\n").unwrap();
    let out = thgcl(&[
        "train", "--config", s(&bad), "--manifest", s(&dir.path().join("train.tsv")), "--out",
        s(&dir.path().join("run")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));

    let one = dir.path().join("one.toml");
    fs::write(&one, "batch_size = 1\n").unwrap();
    let out = thgcl(&[
        "train", "--config", s(&one), "--manifest", s(&dir.path().join("train.tsv")), "--out",
        s(&dir.path().join("run")),
    ]);
    assert!(!out.status.success());

    let out = thgcl(&["eval", "--checkpoint", s(&dir.path().join("missing.ckpt")), "--manifest", s(&bad)]);
    assert!(!out.status.success());
}
