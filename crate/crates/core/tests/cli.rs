use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn intact(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_intact"))
        .arg("--out")
        .arg(out)
        .args(["--set", "dataset.per_class=6", "--set", "dataset.n_points=32"])
        .args(["--set", "teacher.k_support=2", "--set", "teacher.k_query=2"])
        .args(args)
        .env_remove("INTACT_OUT")
        .output()
        .unwrap()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn gen_data_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(intact(&a, &["gen-data"]).status.success());
    assert!(intact(&b, &["gen-data"]).status.success());
    let da = dir_bytes(&a.join("dataset/clouds"));
    assert_eq!(da.len(), 6 * 6);
    assert_eq!(da, dir_bytes(&b.join("dataset/clouds")));
    assert_eq!(dir_bytes(&a.join("dataset")), dir_bytes(&b.join("dataset")));
    let hash_line = |d: &Path| fs::read_to_string(d.join("artifacts.txt")).unwrap().lines().next().unwrap().to_string();
    assert_eq!(hash_line(&a), hash_line(&b));

    let c = tmp.path().join("c");
    assert!(intact(&c, &["--seed", "1", "gen-data"]).status.success());
    assert_ne!(da, dir_bytes(&c.join("dataset/clouds")));
}

#[test]
fn missing_artifacts_fail_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let out = intact(tmp.path(), &["eval"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    assert!(intact(tmp.path(), &["gen-data"]).status.success());
    let out = intact(tmp.path(), &["train-student", "--variant", "intact"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("teacher"));
}

#[test]
fn bad_config_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    for set in ["student.bogus=1", "student.frac_end=0.95", "eval.trials=0"] {
        let out = intact(tmp.path(), &["--set", set, "gen-data"]);
        assert!(!out.status.success(), "{set}");
    }
    assert!(!tmp.path().join("dataset").exists());
}

#[test]
fn lidar_model_reports_budget_and_fragment() {
    let tmp = tempfile::tempdir().unwrap();
    let params = tmp.path().join("lidar.txt");
    fs::write(&params, "# slower motor\nI_motor = 0.25\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_intact"))
        .args(["lidar-model", "--range", "200", "--reference-range", "300", "--emit-fragment", "--params"])
        .arg(&params)
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("P_scan                   3.750000e0 W"), "{text}");
    assert!(text.contains("[[eval.conditions]]"));
    assert!(text.contains("drop = 0.49"));

    fs::write(&params, "I_motr = 0.25\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_intact"))
        .args(["lidar-model", "--params"])
        .arg(&params)
        .output()
        .unwrap();
    assert!(!out.status.success());
}
