use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use neuromoco::cli::read_manifest;
use neuromoco::events::{parse_event_file, read_frame_file};

const TINY: &str = "\
mode = desk
steps = 4
backbone.stem_channels = 4
backbone.stage_widths = 4, 8
backbone.blocks_per_stage = 1, 1
backbone.embed_dim = 8
backbone.resolution = 16x16
pretrain.epochs = 2
pretrain.batch_size = 4
contrastive.queue_len = 16
finetune.epochs = 2
finetune.warmup_epochs = 1
finetune.batch_size = 4
gen.width = 16
gen.height = 16
gen.bar_length = 9
gen.offset_jitter = 2
";

fn nmc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_neuromoco"))
        .args(args)
        .env("NMC_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Generates and bins `per_class` recordings of each of 4 classes.
fn dataset(root: &Path, name: &str, per_class: usize, seed: u64, config: &Path) -> std::path::PathBuf {
    let raw = root.join(format!("{name}-raw"));
    let frames = root.join(name);
    let per = per_class.to_string();
    let seed = seed.to_string();
    ok(&nmc(&[
        "gen", "--classes", "4", "--per-class", &per, "--seed", &seed, "--out-dir", s(&raw), "--config", s(config),
    ]));
    ok(&nmc(&["bin", "--in-dir", s(&raw), "--T", "4", "--out-dir", s(&frames)]));
    frames
}

#[test]
fn gen_writes_counted_deterministic_recordings() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&nmc(&["gen", "--classes", "3", "--per-class", "4", "--seed", "5", "--out-dir", s(d)]));
    }
    let rows = read_manifest(&a).unwrap();
    assert_eq!(rows.len(), 12);
    let mut per_class = [0; 3];
    for (i, (f, y)) in rows.iter().enumerate() {
        assert_eq!(*y, i % 3);
        per_class[*y] += 1;
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
        assert!(!parse_event_file(&a.join(f)).unwrap().is_empty());
    }
    assert_eq!(per_class, [4, 4, 4]);
    assert_eq!(fs::read(a.join("manifest.csv")).unwrap(), fs::read(b.join("manifest.csv")).unwrap());
}

#[test]
fn bin_conserves_events() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw");
    let out = dir.path().join("frames");
    ok(&nmc(&["gen", "--classes", "2", "--per-class", "3", "--out-dir", s(&raw)]));
    let stdout = ok(&nmc(&["bin", "--in-dir", s(&raw), "--out-dir", s(&out)]));
    let rows = read_manifest(&out).unwrap();
    assert_eq!(rows.len(), 6);
    assert_eq!(stdout.lines().filter(|l| l.ends_with(" ok")).count(), 6);
    for ((f, y), (raw_f, raw_y)) in rows.iter().zip(read_manifest(&raw).unwrap()) {
        assert_eq!(*y, raw_y);
        let frames = read_frame_file(&out.join(f)).unwrap();
        assert_eq!(frames.shape(), [16, 2, 32, 32]);
        let events = parse_event_file(&raw.join(&raw_f)).unwrap();
        assert_eq!(frames.total(), events.len() as f64);
    }
}

#[test]
fn pretrain_finetune_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let train = dataset(root, "train", 3, 1, &cfg);
    let test = dataset(root, "test", 2, 2, &cfg);
    let pre = root.join("pre");
    ok(&nmc(&["pretrain", "--config", s(&cfg), "--data", s(&train), "--out-dir", s(&pre)]));
    for f in ["pretrain.nmcw", "pretrain-epoch000.nmcw", "pretrain-epoch001.nmcw", "pretrain.jsonl", "pretrain.jsonl.timing"] {
        assert!(pre.join(f).is_file(), "{f}");
    }
    let ft = root.join("ft");
    let ckpt = pre.join("pretrain.nmcw");
    ok(&nmc(&[
        "finetune", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--train", s(&train), "--test", s(&test), "--out-dir", s(&ft),
    ]));
    let metrics = fs::read_to_string(ft.join("finetune.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = metrics.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[2]["kind"], "summary");
    let final_acc = lines[2]["final_test_acc"].as_f64().unwrap();

    let out = ok(&nmc(&["eval", "--config", s(&cfg), "--checkpoint", s(&ft.join("finetune.nmcw")), "--data", s(&test)]));
    let report: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    assert_eq!(report["accuracy"].as_f64().unwrap(), final_acc);
    assert_eq!(report["total"], 8);

    // Random initialization needs no checkpoint.
    ok(&nmc(&["finetune", "--config", s(&cfg), "--train", s(&train), "--test", s(&test), "--out-dir", s(&root.join("ft0"))]));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    let bad_cfg = root.join("bad.cfg");
    fs::write(&bad_cfg, "pretrain.learning_rate = 0.1\n").unwrap();
    let out = nmc(&["pretrain", "--config", s(&bad_cfg), "--data", s(root), "--out-dir", s(root)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key"));

    assert_eq!(nmc(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(nmc(&["--help"]).status.code(), Some(0));

    let missing = nmc(&["bin", "--in-dir", s(&root.join("nowhere")), "--out-dir", s(root)]);
    assert_eq!(missing.status.code(), Some(1));

    let raw = root.join("raw");
    fs::create_dir(&raw).unwrap();
    fs::write(raw.join("manifest.csv"), "file,label\nbroken.evst,0\n").unwrap();
    fs::write(raw.join("broken.evst"), b"NOPE and some bytes").unwrap();
    let out = nmc(&["bin", "--in-dir", s(&raw), "--out-dir", s(&root.join("o"))]);
    assert_eq!(out.status.code(), Some(2));

    let cfg = root.join("tiny.cfg");
    fs::write(&cfg, format!("{TINY}pretrain.lr = 1e30\n")).unwrap();
    let train = dataset(root, "train", 2, 1, &cfg);
    let out = nmc(&["pretrain", "--config", s(&cfg), "--data", s(&train), "--out-dir", s(&root.join("p"))]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn gradcheck_lists_every_op() {
    let out = ok(&nmc(&["gradcheck", "--seeds", "3"]));
    for op in ["conv2d", "batch_norm_train", "cross_entropy", "l2_normalize", "spike_surrogate"] {
        let line = out.lines().find(|l| l.starts_with(op)).unwrap_or_else(|| panic!("{op} missing"));
        assert!(line.ends_with("PASS"), "{line}");
    }
    let failing = nmc(&["gradcheck", "--seeds", "2", "--tol", "0"]);
    assert_eq!(failing.status.code(), Some(3));
}
