use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn twbert(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_twbert"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn ok(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: &str = r#"{"d": 8, "heads": 2, "video_layers": 1, "text_layers": 1, "cross_layers": 1,
  "d_c": 8, "queue_capacity": 8, "queue_tokens": 4, "batch_size": 4, "train_size": 8,
  "test_size": 4, "steps": 4, "warmup_steps": 1, "precision": 64}"#;

#[test]
fn train_evaluate_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, SMALL).unwrap();
    let cfg = cfg.to_str().unwrap();
    let run = dir.path().join("run");
    let stdout = ok(&twbert(&["--config", cfg, "pretrain"], &run));
    assert!(stdout.contains("step 4"), "{stdout}");
    let log = fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 5);
    let ck = run.join("checkpoint");
    let ck = ck.to_str().unwrap();

    let eval = dir.path().join("eval");
    ok(&twbert(&["eval-retrieval", "--checkpoint", ck, "--mode", "vtm_reranked"], &eval));
    assert!(eval.join("retrieval_vtm_reranked.md").exists());
    let csv = fs::read_to_string(eval.join("retrieval_vtm_reranked_text_to_video.csv")).unwrap();
    assert!(csv.lines().count() > 1);

    let export = dir.path().join("export");
    ok(&twbert(&["export-attention", "--checkpoint", ck, "--sample", "0", "--word", "1"], &export));
    assert!(export.join("attention.json").exists());
    assert!(fs::read_to_string(export.join("frame_0.pgm")).unwrap().starts_with("P2"));

    let more = dir.path().join("more");
    ok(&twbert(&["pretrain", "--resume", ck, "--steps", "6"], &more));
    assert_eq!(fs::read_to_string(more.join("loss.csv")).unwrap().lines().count(), 7);
}

#[test]
fn generated_corpus_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&twbert(&["gen-corpus", "--seed", "3"], &a));
    ok(&twbert(&["gen-corpus", "--seed", "3"], &b));
    for f in ["train.jsonl", "test.jsonl", "vocab.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_eq!(fs::read_to_string(a.join("train.jsonl")).unwrap().lines().count(), 64);
}

#[test]
fn bad_input_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let o = twbert(&["grad-check", "--precision", "32"], dir.path());
    assert!(!o.status.success());
    let o = twbert(&["pretrain", "--precision", "16"], dir.path());
    assert!(!o.status.success());
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"heads": 3, "colour": 1}"#).unwrap();
    let o = twbert(&["--config", cfg.to_str().unwrap(), "gen-corpus"], dir.path());
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("colour"));
    let o = twbert(&["eval-retrieval", "--checkpoint", "/nonexistent"], dir.path());
    assert!(!o.status.success());
}
