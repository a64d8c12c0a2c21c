use std::path::Path;
use std::process::{Command, Output};

const SMALL: [&str; 14] = [
    "--set", "t_in=3", "--set", "t_out=3", "--set", "height=16", "--set", "width=16", "--set", "hidden=16",
    "--set", "depth=3", "--set", "overlap=0",
];

fn stlight(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stlight"))
        .args(args)
        .env("STLIGHT_THREADS", "2")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn dataset(dir: &Path, name: &str, n: &str, t_total: &str) -> String {
    let out = dir.join(name);
    let o = stlight(&["gen-data", "--n", n, "--t-total", t_total, "--hw", "16", "--seed", "1", "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out.to_str().unwrap().to_string()
}

#[test]
fn inspect_reports_large_model_size() {
    let o = stlight(&["inspect", "--preset", "mmnist-l"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let field = |key: &str| -> f64 {
        let line = text.lines().find(|l| l.starts_with(key)).unwrap();
        line[key.len()..].split_whitespace().next().unwrap().parse().unwrap()
    };
    let params = field("params: ");
    let macs = field("macs: ");
    assert!((params - 32.9e6).abs() / 32.9e6 < 0.02, "{params}");
    assert!((macs - 32.3e9).abs() / 32.3e9 < 0.05, "{macs}");
    assert!(text.contains("enumeration check: closed form 33047710, enumerated 33047710: ok"));
    assert!(text.contains("decoder.shuffle"));
    assert!(text.contains("block 15: 321 / 644"));
}

#[test]
fn inspect_reads_config_file_and_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("m.cfg");
    std::fs::write(&cfg, "# tiny\nhidden = 64\ndepth = 4\nheight = 16\nwidth = 16\noverlap = 0\n").unwrap();
    let o = stlight(&["inspect", "--config", p(&cfg), "--set", "depth=5"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("de=5"));
    std::fs::write(&cfg, "hidden = 64\ncolour = blue\n").unwrap();
    let o = stlight(&["inspect", "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("colour"));
}

#[test]
fn gen_data_size_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let a = dataset(dir.path(), "a.stld", "64", "20");
    let b = dataset(dir.path(), "b.stld", "64", "20");
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(bytes.len(), 64 * 20 * 16 * 16 * 4 + 32);
    assert_eq!(bytes, std::fs::read(&b).unwrap());
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(stlight(&["gen-data", "--n", "4"]).status.code(), Some(1));
    assert_eq!(stlight(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(stlight(&["inspect", "--preset", "huge"]).status.code(), Some(1));
    assert_eq!(stlight(&["inspect", "--set", "patch=3"]).status.code(), Some(1));
    assert_eq!(stlight(&["train"]).status.code(), Some(1));
}

#[test]
fn train_with_zero_epochs_writes_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), "d.stld", "8", "6");
    let ckpt = dir.path().join("m.stlw");
    let log = dir.path().join("l.jsonl");
    let mut args = vec!["train", "--data", &data, "--epochs", "0", "--checkpoint", p(&ckpt), "--log", p(&log)];
    args.extend(SMALL);
    let o = stlight(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(ckpt.exists());
    let text = std::fs::read_to_string(&log).unwrap();
    assert!(!text.contains("\"kind\":\"step\""));
}

#[test]
fn max_lr_flag_reaches_the_lr_trace_and_eval_works() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), "d.stld", "12", "6");
    let ckpt = dir.path().join("m.stlw");
    let log = dir.path().join("l.jsonl");
    let mut args = vec![
        "train", "--data", &data, "--epochs", "3", "--batch-size", "4", "--max-lr", "0.001", "--checkpoint",
        p(&ckpt), "--log", p(&log),
    ];
    args.extend(SMALL);
    let o = stlight(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let peak = std::fs::read_to_string(&log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .filter(|v| v["kind"] == "step")
        .map(|v| v["lr"].as_f64().unwrap())
        .fold(0.0, f64::max);
    assert!((peak - 0.001).abs() < 1e-15, "{peak}");

    let o = stlight(&["eval", "--checkpoint", p(&ckpt), "--data", &data, "--json", "--baseline"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    for key in ["mse", "mae", "mse_pixel", "ssim", "psnr"] {
        assert!(v["model"][key].is_f64(), "{key}");
    }
    assert!(v["copy_last"]["mse"].is_f64());
    let kv = stlight(&["eval", "--checkpoint", p(&ckpt), "--data", &data]);
    assert!(stdout(&kv).lines().any(|l| l.starts_with("mse_pixel=")));

    let out = dir.path().join("img");
    let o = stlight(&["predict", "--checkpoint", p(&ckpt), "--data", &data, "--out", p(&out), "--limit", "1"]);
    assert!(o.status.success());
    assert_eq!(std::fs::read_dir(&out).unwrap().count(), 6);

    let other = dataset(dir.path(), "e.stld", "4", "8");
    let o = stlight(&["eval", "--checkpoint", p(&ckpt), "--data", &other]);
    assert_eq!(o.status.code(), Some(2));
    let o = stlight(&["eval", "--checkpoint", p(&dir.path().join("missing.stlw")), "--data", &data]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn diverging_training_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), "d.stld", "8", "6");
    let ckpt = dir.path().join("m.stlw");
    let log = dir.path().join("l.jsonl");
    let mut args = vec!["train", "--data", &data, "--epochs", "2", "--max-lr", "1e30", "--checkpoint", p(&ckpt), "--log", p(&log)];
    args.extend(SMALL);
    let o = stlight(&args);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("non-finite loss"));
}
