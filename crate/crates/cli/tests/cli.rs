use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lsla(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lsla")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn report_presets_and_targets() {
    let o = lsla(&["report", "--config", "vit-lsla-t"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("within 5%"), "{}", stdout(&o));
    let o = lsla(&["report", "--config", "vit-lsla-t", "--variant", "qkv"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("ViT-LSLA (QKV)"));
    assert_eq!(code(&lsla(&["report", "--config", "bogus"])), 2);
    assert_eq!(code(&lsla(&["report", "--config", "tiny", "--variant", "qqq"])), 2);
    assert_eq!(code(&lsla(&["frobnicate"])), 2);
}

#[test]
fn report_csv_is_stable_and_accepts_config_files() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    assert_eq!(code(&lsla(&["report", "--config", "tiny", "--bias-mode", "table", "--csv", p(&a)])), 0);
    assert_eq!(code(&lsla(&["report", "--config", "tiny", "--bias-mode", "table", "--csv", p(&b)])), 0);
    let csv = fs::read(&a).unwrap();
    assert_eq!(csv, fs::read(&b).unwrap());
    assert!(String::from_utf8(csv).unwrap().starts_with("component,params,flops\n"));

    let cfg = dir.path().join("model.cfg");
    fs::write(&cfg, "preset=vit-lsla-t\nvariant=qxx\nfinal_projection=false\n").unwrap();
    let o = lsla(&["report", "--config", p(&cfg)]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("ViT-LSLA (QXX, NP)"));
    fs::write(&cfg, "preset=tiny\nwindow=zero\n").unwrap();
    assert_eq!(code(&lsla(&["report", "--config", p(&cfg)])), 2);
    assert_eq!(code(&lsla(&["report", "--config", "tiny", "--csv", "/nonexistent/dir/x.csv"])), 3);
}

#[test]
fn verify_filter_and_negative_control() {
    let o = lsla(&["verify", "--filter", "equivalence*"]);
    assert_eq!(code(&o), 0);
    let lines: Vec<String> = stdout(&o).lines().filter(|l| l.starts_with("PASS")).map(String::from).collect();
    assert_eq!(lines.len(), 2);
    let o = lsla(&["verify", "--filter", "equivalence*", "--skew-fuse-vo"]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("FAIL equivalence.fuse_vo"));
    assert!(stdout(&o).contains("failed: equivalence.fuse_vo"));
    assert_eq!(code(&lsla(&["verify", "--filter", "no-such-*"])), 2);
}

#[test]
fn bad_thread_setting_is_a_usage_error() {
    let o = Command::new(env!("CARGO_BIN_EXE_lsla"))
        .args(["report", "--config", "tiny"])
        .env("LSLA_NUM_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn synth_train_eval_inspect_round() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = lsla(&["synth", "--out", p(&data), "--per-class", "16", "--seed", "3"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(data.join("train/manifest.csv").is_file() && data.join("eval/manifest.csv").is_file());

    let (ck1, ck2, log) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"), dir.path().join("log.csv"));
    let args = |ck: &Path| {
        vec![
            "train".to_string(),
            "--data".into(),
            p(&data).into(),
            "--config".into(),
            "tiny".into(),
            "--out".into(),
            p(ck).into(),
            "--epochs".into(),
            "1".into(),
            "--batch-size".into(),
            "16".into(),
            "--log".into(),
            p(&log).into(),
        ]
    };
    let run = |ck: &Path| Command::new(env!("CARGO_BIN_EXE_lsla")).args(args(ck)).output().unwrap();
    let o = run(&ck1);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let log_text = fs::read_to_string(&log).unwrap();
    assert_eq!(log_text.lines().count(), 2);
    assert_eq!(code(&run(&ck2)), 0);
    assert_eq!(fs::read(&ck1).unwrap(), fs::read(&ck2).unwrap());
    assert_eq!(fs::read_to_string(&log).unwrap(), log_text);

    let e1 = lsla(&["eval", "--ckpt", p(&ck1), "--data", p(&data)]);
    let e2 = lsla(&["eval", "--ckpt", p(&ck1), "--data", p(&data)]);
    assert_eq!(code(&e1), 0);
    assert_eq!(e1.stdout, e2.stdout);
    let acc: f64 = stdout(&e1).trim().parse().unwrap();
    let logged: f64 = log_text.lines().nth(1).unwrap().split(',').nth(2).unwrap().parse().unwrap();
    assert_eq!(stdout(&e1).trim(), format!("{logged:.4}"));
    assert_eq!(acc, (logged * 1e4).round() / 1e4);

    let csv = dir.path().join("profile.csv");
    let inspect = |extra: &[&str]| {
        let mut a = vec!["inspect", "--ckpt", p(&ck1), "--out", p(&csv), "--stage", "0", "--block", "0"];
        a.extend_from_slice(extra);
        lsla(&a)
    };
    assert_eq!(code(&inspect(&["--window", "3", "--query", "10", "--head", "0"])), 0);
    let rows = fs::read_to_string(&csv).unwrap();
    assert_eq!(rows.lines().count(), 50);
    assert_eq!(code(&inspect(&["--window", "3", "--query", "10", "--head", "0", "--data", p(&data)])), 0);
    assert_eq!(code(&inspect(&["--window", "4", "--query", "0", "--head", "0"])), 2);
    assert_eq!(code(&inspect(&["--window", "0", "--query", "49", "--head", "0"])), 2);
    assert_eq!(code(&inspect(&["--window", "0", "--query", "0", "--head", "1"])), 2);

    // a micro-sized dataset does not fit the tiny model
    let small = dir.path().join("small");
    assert_eq!(code(&lsla(&["synth", "--out", p(&small), "--per-class", "8", "--size", "28"])), 0);
    assert_eq!(code(&lsla(&["eval", "--ckpt", p(&ck1), "--data", p(&small)])), 2);
}

#[test]
fn fresh_inspect_shows_initial_scale_and_bias() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    let ck = dir.path().join("fresh.ckpt");
    assert_eq!(code(&lsla(&["synth", "--out", p(&data), "--per-class", "8", "--size", "28"])), 0);
    // one step at a vanishing lr moves nothing beyond 1e-300
    let o = lsla(&[
        "train", "--data", p(&data), "--config", "micro", "--out", p(&ck), "--epochs", "1", "--lr", "1e-300",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = dir.path().join("p.csv");
    let o = lsla(&[
        "inspect", "--ckpt", p(&ck), "--stage", "1", "--block", "0", "--window", "0", "--query", "5", "--head", "1",
        "--out", p(&csv),
    ]);
    assert_eq!(code(&o), 0);
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "index,ds,inner_bias,attn_pre,attn_post");
    let mut pre_sum = 0.0;
    for line in lines {
        let f: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
        assert!(f[2].abs() < 1e-290, "{line}");
        assert!((f[1] - 1.0 / 16f64.sqrt()).abs() < 1e-12, "{line}");
        pre_sum += f[3];
    }
    assert!((pre_sum - 1.0).abs() < 1e-12);
}

#[test]
fn missing_files_are_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.ckpt");
    assert_eq!(code(&lsla(&["eval", "--ckpt", p(&missing), "--data", p(dir.path())])), 3);
    let o = lsla(&["train", "--data", p(dir.path()), "--config", "tiny", "--out", p(&missing), "--epochs", "1"]);
    assert_eq!(code(&o), 3);
    let bad = dir.path().join("bad.ckpt");
    fs::write(&bad, b"LSLA garbage").unwrap();
    assert_eq!(code(&lsla(&["inspect", "--ckpt", p(&bad), "--stage", "0", "--block", "0", "--window", "0", "--query", "0", "--head", "0", "--out", p(&dir.path().join("x.csv"))])), 3);
}

#[test]
fn constant_predictor_evaluates_to_a_quarter() {
    use lsla_core::model::{save_checkpoint, Model, ModelConfig};
    use lsla_core::numcore::Tensor;
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    assert_eq!(code(&lsla(&["synth", "--out", p(&data), "--per-class", "16", "--size", "28"])), 0);
    let mut model = Model::new(ModelConfig::preset("micro").unwrap(), 0).unwrap();
    *model.params.get_mut("head.fc.weight").unwrap() = Tensor::zeros(&[128, 4]);
    *model.params.get_mut("head.fc.bias").unwrap() = Tensor::new(&[4], vec![0.0, 1.0, 0.0, 0.0]).unwrap();
    let ck = dir.path().join("const.ckpt");
    save_checkpoint(&model, &ck).unwrap();
    let o = lsla(&["eval", "--ckpt", p(&ck), "--data", p(&data)]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o), "0.2500\n");
}
