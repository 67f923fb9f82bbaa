use std::fs;
use std::path::Path;
use std::process::Command;

const TINY: &str = "\
# tiny end-to-end run
identities = 12
test_identities = 4
images_per_identity = 6
image_size = 16
batch_pairs = 4
max_steps = 4
mining_refresh = 2
mining_identities = 6
difficulty_ceiling = 2.0
conv1 = 4
conv2 = 4
features = 8
expert_width = 8
baseline_steps = 3
baseline_batch = 8
protocol_pairs = 20
protocol_templates_per_identity = 3
protocol_max_size = 3
";

fn dcn(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_dcn")).args(args).env("RUST_LOG", "warn").output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn gen_data_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let (code, _, err) = dcn(&["gen-data", "--identities", "14", "--dataset-seed", "7", "--set", "test_identities=4", "--set", "images_per_identity=2", "--out-dir", p(d)]);
        assert_eq!(code, 0, "{err}");
    }
    let ma = fs::read(a.join("manifest.txt")).unwrap();
    assert_eq!(ma, fs::read(b.join("manifest.txt")).unwrap());
    let text = String::from_utf8(ma).unwrap();
    assert_eq!(text.lines().count(), 28);
    let ids: std::collections::BTreeSet<&str> = text.lines().map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(ids.len(), 14);
    for line in text.lines() {
        assert_eq!(line.split(',').count(), 12);
        let png = line.split(',').next().unwrap();
        assert_eq!(fs::read(a.join(png)).unwrap(), fs::read(b.join(png)).unwrap());
    }
    assert!(fs::read_to_string(a.join("config.txt")).unwrap().contains("dataset_seed = 7"));
}

#[test]
fn train_eval_and_visualize_with_both_regularizers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    for reg in ["diversity", "keypoints"] {
        let out = dir.path().join(reg);
        let (code, stdout, err) = dcn(&["train", "--config", p(&cfg), "--regularizer", reg, "--deterministic", "--out-dir", p(&out)]);
        assert_eq!(code, 0, "{err}");
        assert!(stdout.contains(&format!("regularizer = {reg}")));
        let log = fs::read_to_string(out.join("loss.csv")).unwrap();
        assert_eq!(log.lines().next().unwrap(), "step,cls1,cls2,sim,reg,alpha3,total");
        assert_eq!(log.lines().count(), 5);

        let echoed = out.join("config.txt");
        let again = dir.path().join(format!("{reg}-again"));
        let (code, _, err) = dcn(&["train", "--config", p(&echoed), "--out-dir", p(&again)]);
        assert_eq!(code, 0, "{err}");
        assert_eq!(log, fs::read_to_string(again.join("loss.csv")).unwrap());

        let ev = dir.path().join(format!("{reg}-eval"));
        let (code, stdout, err) = dcn(&[
            "eval", "--config", p(&cfg), "--checkpoint", p(&out.join("dcn.ckpt")),
            "--baseline", p(&out.join("baseline.ckpt")), "--out-dir", p(&ev),
        ]);
        assert_eq!(code, 0, "{err}");
        assert!(stdout.contains("dcn:") && stdout.contains("fused:"));
        for f in ["roc_dcn.csv", "metrics_dcn.csv", "roc_baseline.csv", "roc_fused.csv", "scores.csv", "protocol.pairs", "protocol.templates"] {
            assert!(ev.join(f).exists(), "{f}");
        }
        assert_eq!(fs::read_to_string(ev.join("protocol.pairs")).unwrap().lines().count(), 20);
    }

    let data = dir.path().join("data");
    let (code, _, err) = dcn(&["gen-data", "--config", p(&cfg), "--out-dir", p(&data)]);
    assert_eq!(code, 0, "{err}");
    let list = data.join("template.txt");
    fs::write(&list, "images/0010_00.png\nimages/0010_01.png\n").unwrap();
    let viz = dir.path().join("viz");
    let (code, stdout, err) = dcn(&[
        "viz-attention", "--checkpoint", p(&dir.path().join("keypoints/dcn.ckpt")),
        "--template", p(&list), "--out-dir", p(&viz),
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(stdout.contains("wrote 26 overlays"), "{stdout}");
    let img = image::open(viz.join("attention/image01_map12.png")).unwrap();
    assert_eq!((img.width(), img.height()), (16, 16));

    let ms = dir.path().join("mine");
    let (code, stdout, err) = dcn(&[
        "mine-stats", "--config", p(&cfg), "--baseline", p(&dir.path().join("keypoints/baseline.ckpt")), "--out-dir", p(&ms),
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(stdout.contains("matrix 12x12, 6 positive pairs"), "{stdout}");
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let (code, _, err) = dcn(&["train", "--no-such-flag"]);
    assert_eq!(code, 2);
    assert!(err.starts_with("error: bad-flag: "), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);

    let (code, _, err) = dcn(&["eval", "--checkpoint", "missing.ckpt", "--baseline", "missing.ckpt", "--out-dir", p(&out)]);
    assert_eq!(code, 3);
    assert!(err.starts_with("error: missing-file: "), "{err}");

    let (code, _, err) = dcn(&["gen-data", "--set", "bogus_key=1", "--out-dir", p(&out)]);
    assert_eq!(code, 4);
    assert!(err.starts_with("error: validation: "), "{err}");
    let (code, _, _) = dcn(&["train", "--precision", "16", "--out-dir", p(&out)]);
    assert_eq!(code, 4);

    let cfg = dir.path().join("nan.cfg");
    fs::write(&cfg, format!("{TINY}lr = 1e30\nbaseline_lr = 1e30\n")).unwrap();
    let (code, _, err) = dcn(&["train", "--config", p(&cfg), "--out-dir", p(&out)]);
    assert_eq!(code, 5, "{err}");
    assert!(err.starts_with("error: numeric: "), "{err}");
}
