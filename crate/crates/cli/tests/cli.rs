use std::path::Path;
use std::process::{Command, Output};

fn acenet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_acenet")).args(args).output().expect("spawn acenet")
}

fn ok(args: &[&str]) -> String {
    let out = acenet(args);
    assert!(out.status.success(), "{args:?}\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn generate_train_evaluate_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    ok(&["gen-data", "--root", p(&data), "--split", "train", "--count", "6", "--seed-base", "0"]);
    ok(&["gen-data", "--root", p(&data), "--split", "val", "--count", "3", "--seed-base", "1000"]);
    assert!(data.join("val/1001/joints.csv").exists());

    let net_cfg = dir.path().join("net.cfg");
    let train_cfg = dir.path().join("train.cfg");
    std::fs::write(&net_cfg, "# full model\nenable_lcm = true\nenable_gem = true\n").unwrap();
    std::fs::write(&train_cfg, "total_iters = 4\nwarmup_iters = 1\nbatch_size = 2\n").unwrap();
    ok(&["train", "--net", p(&net_cfg), "--train", p(&train_cfg), "--data", p(&data), "--out", p(&run)]);
    let log = std::fs::read_to_string(run.join("train.log")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "iter,lr,L_total,L_base,L_fine,L_bd,L_ske");
    assert_eq!(lines.len(), 5);
    assert!(lines[1..].iter().all(|l| l.split(',').count() == 7));

    let report = dir.path().join("report.csv");
    let stdout = ok(&["eval", "--ckpt", p(&run), "--data", p(&data), "--report", p(&report)]);
    assert!(stdout.starts_with("mIoU="));
    let csv = std::fs::read_to_string(&report).unwrap();
    assert!(csv.starts_with("class_id,class_name,iou\n0,background,"));
    assert!(csv.contains("mIoU,pixel_acc,mean_acc"));

    ok(&["eval", "--ckpt", p(&run), "--data", p(&data), "--report", p(&report), "--oracle-inject"]);
    let csv = std::fs::read_to_string(&report).unwrap();
    assert!(csv.trim_end().ends_with("1.000000,1.000000,1.000000"), "{csv}");

    let dumps = dir.path().join("dumps");
    ok(&["inspect-affinity", "--ckpt", p(&run), "--sample", p(&data.join("val/1000")), "--out", p(&dumps)]);
    for f in ["A.acet", "G.acet", "fine_pred.acet", "base_pred.acet"] {
        assert!(dumps.join(f).exists(), "{f}");
    }
}

#[test]
fn gradcheck_subset_passes() {
    let stdout = ok(&["gradcheck", "--module", "lcm", "--seeds", "2"]);
    assert!(stdout.contains("within 1e-4"), "{stdout}");
}

#[test]
fn configuration_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("net.cfg");
    std::fs::write(&cfg, "enable_lcm = true\nbogus_key = 3\n").unwrap();
    let out = acenet(&["train", "--net", p(&cfg), "--train", p(&cfg), "--data", p(dir.path()), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus_key"));

    assert_eq!(acenet(&["train"]).status.code(), Some(1));
    assert_eq!(acenet(&["gradcheck", "--module", "nothing"]).status.code(), Some(1));
    assert_eq!(acenet(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_data_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let net_cfg = dir.path().join("net.cfg");
    std::fs::write(&net_cfg, "").unwrap();
    let out = acenet(&[
        "train", "--net", p(&net_cfg), "--train", p(&net_cfg), "--data", p(&dir.path().join("absent")), "--out",
        p(&dir.path().join("run")),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let out = acenet(&["eval", "--ckpt", p(&dir.path().join("nope")), "--data", p(dir.path()), "--report", "r.csv"]);
    assert_eq!(out.status.code(), Some(2));
}
