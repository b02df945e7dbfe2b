use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn qfd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qfd"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn qfd")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SYNTH_MLP: &str = r#"
[dataset]
source = "synth"
n_per_class = 30
classes = 3
noise_sigma = 0.3
seed = 1
shape = { kind = "flat", dim = 6 }

[model]
arch = { kind = "mlp", dims = [6, 16, 3] }
bits = "2/2"

[train]
epochs = 2
batch_size = 16
lr = 0.05
quantizer_lr_scale = 0.01

[distill]
regime = "baseline"
"#;

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("exp.toml");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn train_writes_resolved_config_metrics_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SYNTH_MLP);
    let out = dir.path().join("run");
    let o = qfd(&[
        "train",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "3",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in [
        "config.resolved.toml",
        "metrics.csv",
        "metrics.jsonl",
        "best.json",
        "last.json",
        "last.bin",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let resolved = fs::read_to_string(out.join("config.resolved.toml")).unwrap();
    assert!(resolved.contains("seed = 3"), "{resolved}");
    assert!(resolved.contains("lambda = 0.5"), "{resolved}");
    assert!(resolved.contains("warmup_fraction = 0.1"), "{resolved}");

    // the resolved config reproduces the run bitwise
    let again = dir.path().join("again");
    let o = qfd(&[
        "train",
        "--config",
        out.join("config.resolved.toml").to_str().unwrap(),
        "--out",
        again.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read(out.join("last.bin")).unwrap(),
        fs::read(again.join("last.bin")).unwrap()
    );
}

#[test]
fn invalid_lambda_exits_2_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let text = SYNTH_MLP.replace("regime = \"baseline\"", "regime = \"qfd\"\nlambda = 1.5");
    let cfg = write_config(dir.path(), &text);
    let o = qfd(&[
        "train",
        "--config",
        &cfg,
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("distill.lambda"), "{}", stderr(&o));
}

#[test]
fn unknown_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &SYNTH_MLP.replace("epochs = 2", "epochs = 2\nepoch = 3"),
    );
    let o = qfd(&["train", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("epoch"), "{}", stderr(&o));
}

#[test]
fn three_four_bits_are_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SYNTH_MLP.replace("\"2/2\"", "\"3/4\""));
    let out = dir.path().join("o");
    let o = qfd(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = fs::read_to_string(out.join("last.json")).unwrap();
    assert!(manifest.contains("\"3/4\""), "{manifest}");
}

#[test]
fn missing_checkpoint_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SYNTH_MLP);
    let o = qfd(&[
        "eval",
        "--config",
        &cfg,
        "--out",
        dir.path().join("o").to_str().unwrap(),
        "--checkpoint",
        dir.path().join("nope.json").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn distill_without_teacher_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SYNTH_MLP.replace("\"baseline\"", "\"qfd\""));
    let o = qfd(&[
        "distill",
        "--config",
        &cfg,
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = qfd(&["gradcheck", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}\n{}", stdout(&o), stderr(&o));
    let text = stdout(&o);
    for name in [
        "matmul",
        "conv2d",
        "attention",
        "mlp",
        "mini_resnet.block",
        "mini_vit.block",
    ] {
        assert!(text.contains(name), "{text}");
    }
    assert!(!text.contains("FAIL"));
    assert!(dir.path().join("gradcheck.json").exists());
}

#[test]
fn teacher_pipeline_and_compare() {
    let dir = tempfile::tempdir().unwrap();
    let fp = SYNTH_MLP.replace("\"2/2\"", "\"32/32\"");
    let cfg = write_config(dir.path(), &fp);
    let teacher_dir = dir.path().join("teacher");
    let o = qfd(&[
        "train",
        "--config",
        &cfg,
        "--out",
        teacher_dir.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let teacher = teacher_dir.join("last.json");

    let qt = dir.path().join("qt");
    let o = qfd(&[
        "quantize-teacher",
        "--config",
        &cfg,
        "--out",
        qt.to_str().unwrap(),
        "--teacher",
        teacher.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("before"), "{}", stdout(&o));
    assert!(qt.join("teacher.json").exists() && qt.join("warmup.json").exists());

    let cfg = write_config(dir.path(), &SYNTH_MLP.replace("\"baseline\"", "\"qfd\""));
    let o = qfd(&[
        "distill",
        "--config",
        &cfg,
        "--out",
        dir.path().join("student").to_str().unwrap(),
        "--teacher",
        qt.join("teacher.json").to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));

    let text = format!(
        "{SYNTH_MLP}\n[compare]\nregimes = [\"baseline\", \"qfd\"]\nbits = [\"2/2\", \"4/4\"]\nseeds = [0]\n"
    );
    let cfg = write_config(dir.path(), &text);
    let cmp = dir.path().join("cmp");
    let o = qfd(&[
        "compare",
        "--config",
        &cfg,
        "--out",
        cmp.to_str().unwrap(),
        "--teacher",
        teacher.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("mean_top1"));
    let csv = fs::read_to_string(cmp.join("comparison.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "regime,bits,teacher_feature_bits,lambda,runs,failed,mean_top1,std_top1,mean_best_top1,std_best_top1"
    );
    assert_eq!(lines.len(), 1 + 4);
}

fn idx_u8(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
    let mut out = magic.to_be_bytes().to_vec();
    for d in dims {
        out.extend(d.to_be_bytes());
    }
    out.extend(payload);
    out
}

#[test]
fn eval_of_memorized_checkpoint_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let n = 10u32;
    let pixels: Vec<u8> = (0..n * 16).map(|i| ((i * 97 + 13) % 256) as u8).collect();
    let labels: Vec<u8> = (0..n).map(|i| (i % 5) as u8).collect();
    fs::write(
        dir.path().join("img.idx"),
        idx_u8(0x803, &[n, 4, 4], &pixels),
    )
    .unwrap();
    fs::write(dir.path().join("lbl.idx"), idx_u8(0x801, &[n], &labels)).unwrap();
    let text = r#"
[dataset]
source = "idx"
train_images = "img.idx"
train_labels = "lbl.idx"
eval_images = "img.idx"
eval_labels = "lbl.idx"

[model]
arch = { kind = "mini_resnet", in_channels = 1, widths = [16], blocks_per_stage = 1, classes = 5 }
bits = "32/32"

[train]
epochs = 60
batch_size = 10
lr = 0.05
weight_decay = 0.0
schedule = "constant"
"#;
    let cfg = write_config(dir.path(), text);
    let run = dir.path().join("run");
    let o = qfd(&["train", "--config", &cfg, "--out", run.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = qfd(&[
        "eval",
        "--config",
        &cfg,
        "--out",
        dir.path().join("ev").to_str().unwrap(),
        "--checkpoint",
        run.join("last.json").to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("top1 100.00"), "{}", stdout(&o));
    let json: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("ev").join("eval.json")).unwrap())
            .unwrap();
    assert_eq!(json["top1"], 100.0);
}
