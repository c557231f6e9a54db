use std::path::Path;
use std::process::{Command, Output};

fn dhpf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dhpf"))
        .args(args)
        .env_remove("DHPF_SEED")
        .output()
        .expect("binary runs")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn synth(dir: &Path, extra: &[&str]) {
    let out = dir.to_str().unwrap();
    let mut args = vec!["synth", "--out", out, "--images", "2", "--pairs-per-image", "1", "--size", "48"];
    args.extend_from_slice(extra);
    let o = dhpf(&args);
    assert!(o.status.success(), "{}", text(&o));
}

fn data_args(dir: &Path) -> Vec<String> {
    vec![
        "--pairs".into(),
        dir.join("pairs.json").display().to_string(),
        "--pyramids".into(),
        dir.join("pyramids").display().to_string(),
    ]
}

fn run(cmd: &str, dir: &Path, extra: &[&str]) -> Output {
    let mut args: Vec<String> = vec![cmd.into()];
    args.extend(data_args(dir));
    args.extend(extra.iter().map(|s| s.to_string()));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    dhpf(&refs)
}

#[test]
fn gradcheck_passes() {
    let o = dhpf(&["gradcheck", "--seed", "7", "--layers", "4"]);
    assert!(o.status.success(), "{}", text(&o));
    let t = text(&o);
    assert!(t.contains("PASS"));
    assert!(!t.contains("FAIL"));
}

#[test]
fn identity_eval_reports_perfect_pck() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, &["--identity"]);
    let out = tmp.path().join("eval");
    let o = run("eval", &data, &["--init", "identity", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["pck_per_alpha"]["0.1"], 1.0);
    assert_eq!(report["pck_per_alpha"]["0.05"], 1.0);
    assert!(std::fs::read_to_string(out.join("selection.csv")).unwrap().starts_with("category,layer_0"));
    assert!(std::fs::read_to_string(out.join("histogram.csv")).unwrap().starts_with("layers_on,pairs"));
}

#[test]
fn weak_mode_with_one_category_fails() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), &["--categories", "1"]);
    let out = tmp.path().join("train");
    let o = run("train", tmp.path(), &["--mode", "weak", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).contains("no negative pairs"));
}

#[test]
fn usage_errors_exit_with_2() {
    assert_eq!(dhpf(&["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(dhpf(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(dhpf(&["gradcheck", "--layers", "many"]).status.code(), Some(2));
}

#[test]
fn validation_errors_exit_with_1() {
    let tmp = tempfile::tempdir().unwrap();
    let o = dhpf(&["eval", "--pairs", "missing.json", "--pyramids", "nowhere", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let o = dhpf(&["gradcheck", "--mu", "1.5"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_writes_checkpoint_and_metrics_then_eval_and_match_use_them() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, &[]);
    let out = tmp.path().join("run");
    let o = run(
        "train",
        &data,
        &["--iterations", "4", "--batch-size", "2", "--out", out.to_str().unwrap(), "--seed", "3"],
    );
    assert!(o.status.success(), "{}", text(&o));
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(
        lines.next().unwrap(),
        "iteration,total_loss,match_loss,sel_loss,layer_freq_0,layer_freq_1,layer_freq_2,layer_freq_3"
    );
    assert_eq!(lines.count(), 4);
    let ckpt = out.join("model.dhpc");
    assert_eq!(&std::fs::read(&ckpt).unwrap()[..4], b"DHPC");

    let ev = tmp.path().join("eval");
    let o = run("eval", &data, &["--checkpoint", ckpt.to_str().unwrap(), "--out", ev.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o));

    let m = tmp.path().join("matches");
    let o = run("match", &data, &["--checkpoint", ckpt.to_str().unwrap(), "--out", m.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o));
    let dumps: Vec<_> = std::fs::read_dir(&m).unwrap().collect();
    assert_eq!(dumps.len(), 4);
    let dump: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(m.join("c0_i0__c0_i0_w0.json")).unwrap()).unwrap();
    assert_eq!(dump["src"], "c0_i0");
    assert_eq!(dump["matches"].as_array().unwrap().len(), 12 * 12);

    // same seed, same metrics
    let again = tmp.path().join("again");
    let o = run(
        "train",
        &data,
        &["--iterations", "4", "--batch-size", "2", "--out", again.to_str().unwrap(), "--threads", "1"],
    );
    assert!(o.status.success());
    let o = Command::new(env!("CARGO_BIN_EXE_dhpf"))
        .args(["train", "--iterations", "4", "--batch-size", "2", "--out"])
        .arg(&again)
        .args(data_args(&data))
        .env("DHPF_SEED", "3")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(std::fs::read_to_string(again.join("metrics.csv")).unwrap(), metrics);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(&cfg, "# bad target rate\nmu = 2.0\n").unwrap();
    let c = cfg.to_str().unwrap();
    let o = dhpf(&["--config", c, "gradcheck", "--layers", "2", "--channels", "8"]);
    assert_eq!(o.status.code(), Some(1), "{}", text(&o));
    assert!(text(&o).contains("mu"));
    let o = dhpf(&["--config", c, "gradcheck", "--layers", "2", "--channels", "8", "--mu", "0.5"]);
    assert!(o.status.success(), "{}", text(&o));
    std::fs::write(&cfg, "colour = red\n").unwrap();
    assert_eq!(dhpf(&["--config", c, "gradcheck"]).status.code(), Some(1));
}

#[test]
fn synth_writes_images_pyramids_and_pairs() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), &["--categories", "3", "--keypoints", "5", "--tps"]);
    let pairs = dhpf::pyramid::load_pair_list(tmp.path().join("pairs.json")).unwrap();
    assert_eq!(pairs.len(), 6);
    assert!(pairs.iter().all(|p| p.keypoints.len() == 5));
    for p in &pairs {
        for id in [&p.src_id, &p.trg_id] {
            assert!(tmp.path().join("images").join(format!("{id}.rgb")).exists());
            let pyr = dhpf::pyramid::load_pyramid(tmp.path().join("pyramids").join(format!("{id}.dhpf"))).unwrap();
            assert_eq!(pyr.num_layers(), 4);
        }
    }
}
