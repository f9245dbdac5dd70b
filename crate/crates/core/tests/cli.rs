use std::path::Path;
use std::process::{Command, Output};

use medformer::data::mft;

const MICRO: &str = "epochs=1\naugment=false\nbatch_size=4\nbase_width=4\nwidths=4,8,8\nblocks=1,1,1\nheads=2,2,2\nsemantic_hw=2,2\nfusion_width=4\nfusion_blocks=1\nfusion_heads=2\n";

fn medformer(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_medformer")).args(args).current_dir(cwd).output().unwrap()
}

fn success(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

/// Synthesises a small dataset and trains a micro model on it.
fn trained(dir: &Path) {
    success(&medformer(&["synth", "--out", "ds", "--n-train", "6", "--n-val", "2", "--size", "32", "--seed", "3"], dir));
    std::fs::write(dir.join("cfg.txt"), MICRO).unwrap();
    success(&medformer(&["train", "--config", "cfg.txt", "--data", "ds", "--out", "run"], dir));
}

#[test]
fn train_then_eval_writes_reports() {
    let t = tempfile::tempdir().unwrap();
    let dir = t.path();
    trained(dir);
    for f in ["config.txt", "manifest.json", "metrics.csv", "steps.csv", "checkpoints/last.ckpt", "checkpoints/best.ckpt"] {
        assert!(dir.join("run").join(f).exists(), "missing {f}");
    }
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("run/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "completed");
    assert_eq!(manifest["workers"], 1);

    success(&medformer(&["eval", "--checkpoint", "run/checkpoints/best.ckpt", "--data", "ds", "--out", "ev"], dir));
    let metrics = std::fs::read_to_string(dir.join("ev/metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "case_id,class,dsc,hd95");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("case0006,1,"));
    let summary = std::fs::read_to_string(dir.join("ev/summary.csv")).unwrap();
    assert!(summary.starts_with("class,cases,mean_dsc,mean_hd95,undefined_hd95\n1,2,"), "{summary}");

    // a second evaluation of the same checkpoint is byte-identical
    success(&medformer(&["eval", "--checkpoint", "run/checkpoints/best.ckpt", "--data", "ds", "--out", "ev2", "--window", "16,16"], dir));
    success(&medformer(&["eval", "--checkpoint", "run/checkpoints/best.ckpt", "--data", "ds", "--out", "ev3", "--window", "16,16"], dir));
    assert_eq!(std::fs::read(dir.join("ev2/metrics.csv")).unwrap(), std::fs::read(dir.join("ev3/metrics.csv")).unwrap());
}

#[test]
fn eval_on_empty_dataset_fails_without_output() {
    let t = tempfile::tempdir().unwrap();
    let dir = t.path();
    trained(dir);
    std::fs::create_dir(dir.join("empty")).unwrap();
    let out = medformer(&["eval", "--checkpoint", "run/checkpoints/best.ckpt", "--data", "empty", "--out", "ev"], dir);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    assert!(!dir.join("ev/metrics.csv").exists());
}

#[test]
fn usage_errors_exit_with_2() {
    let t = tempfile::tempdir().unwrap();
    assert_eq!(medformer(&["train"], t.path()).status.code(), Some(2));
    assert_eq!(medformer(&["bench", "--sweep", "many"], t.path()).status.code(), Some(2));
    assert_eq!(medformer(&["eval", "--window", "0,4", "--checkpoint", "a", "--data", "b", "--out", "c"], t.path()).status.code(), Some(2));
}

#[test]
fn inspect_commands_export_valid_maps() {
    let t = tempfile::tempdir().unwrap();
    let dir = t.path();
    trained(dir);
    let ck = "run/checkpoints/last.ckpt";
    for token in 0..4 {
        let out = format!("attn{token}");
        success(&medformer(&["inspect-attn", "--checkpoint", ck, "--data", "ds", "--case", "case0007", "--level", "0", "--token", &token.to_string(), "--out", &out], dir));
        let map = mft::read_tensor::<f32>(&dir.join(&out).join("attn.mft")).unwrap();
        assert_eq!(map.shape(), &[8, 8]);
        let sum: f64 = map.to_vec().iter().map(|&v| v as f64).sum();
        assert!((sum - 1.0).abs() < 1e-5, "token {token}: {sum}");
        let pgm = std::fs::read_to_string(dir.join(&out).join("attn.pgm")).unwrap();
        assert!(pgm.starts_with("P2\n8 8\n255\n"));
        assert_eq!(pgm.lines().count(), 3 + 8);
    }
    let bad = medformer(&["inspect-attn", "--checkpoint", ck, "--data", "ds", "--case", "case0007", "--token", "4", "--out", "x"], dir);
    assert_eq!(bad.status.code(), Some(1));
    let missing = medformer(&["inspect-attn", "--checkpoint", ck, "--data", "ds", "--case", "nope", "--token", "0", "--out", "x"], dir);
    assert_eq!(missing.status.code(), Some(1));

    success(&medformer(&["inspect-cosine", "--checkpoint", ck, "--data", "ds", "--case", "case0001", "--level", "1", "--out", "cos"], dir));
    let rows: Vec<Vec<f64>> = std::fs::read_to_string(dir.join("cos/cosine.csv"))
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 4);
    for i in 0..4 {
        assert!((rows[i][i] - 1.0).abs() < 1e-5);
        for j in 0..4 {
            assert!((rows[i][j] - rows[j][i]).abs() < 1e-6 && (0.0..=1.0 + 1e-6).contains(&rows[i][j]));
        }
    }
}

#[test]
fn infer_writes_prediction() {
    let t = tempfile::tempdir().unwrap();
    let dir = t.path();
    trained(dir);
    let out = medformer(&["infer", "--checkpoint", "run/checkpoints/last.ckpt", "--image", "ds/cases/case0000_img.mft", "--out", "pred"], dir);
    success(&out);
    let labels = mft::read_mft(&dir.join("pred/labels.mft")).unwrap().into_labels().unwrap();
    assert_eq!((labels.height, labels.width), (32, 32));
    let probs = mft::read_tensor::<f32>(&dir.join("pred/probs.mft")).unwrap();
    assert_eq!(probs.shape(), &[2, 32, 32]);
    let wrong = medformer(&["infer", "--checkpoint", "run/checkpoints/last.ckpt", "--image", "ds/cases/case0000_lbl.mft", "--out", "p2"], dir);
    assert_eq!(wrong.status.code(), Some(1));
}

#[test]
fn bench_writes_csv_and_fits() {
    let t = tempfile::tempdir().unwrap();
    let stdout = success(&medformer(&["bench", "--variant", "conv", "--sweep", "16", "--out", "b.csv"], t.path()));
    assert!(stdout.contains("conv: log-log slope 1.0000"), "{stdout}");
    let csv = std::fs::read_to_string(t.path().join("b.csv")).unwrap();
    assert!(csv.starts_with("variant,h,w,n,d,k,m,hw,params,formula_macs,measured_macs,extra_macs,ratio,wall_us\n"));
    assert_eq!(csv.lines().count(), 1 + 5);
}
