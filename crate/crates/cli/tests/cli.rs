use std::path::Path;
use std::process::{Command, Output};

fn ocl(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ocl"))
        .args(args)
        .env("OCL_OUT_DIR", out)
        .output()
        .expect("ocl binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn dry_run_prints_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = ocl(&["pretrain", "--dry-run", "--seed", "7"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(cfg["seed"], 7);
    assert_eq!(cfg["masking"]["ratio"], 0.3);
    assert_eq!(cfg["objective"]["kappa"], 64.0);
    assert_eq!(cfg["out_dir"], dir.path().to_str().unwrap());
    // Nothing is written on a dry run.
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn missing_corpus_path_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.json");
    let missing = dir.path().join("nope.bin");
    std::fs::write(
        &config,
        serde_json::json!({"data": {"source": "cifar-binary", "path": missing}}).to_string(),
    )
    .unwrap();
    let o = ocl(&["pretrain", "--config", config.to_str().unwrap()], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("data.path"), "{}", stderr(&o));
}

#[test]
fn unknown_config_field_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.json");
    std::fs::write(&config, r#"{"objective": {"kapa": 4}}"#).unwrap();
    let o = ocl(&["pretrain", "--dry-run", "--config", config.to_str().unwrap()], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("kapa"), "{}", stderr(&o));
}

#[test]
fn invalid_value_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.json");
    std::fs::write(&config, r#"{"objective": {"kappa": -2}}"#).unwrap();
    let o = ocl(&["pretrain", "--config", config.to_str().unwrap()], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("objective.kappa"), "{}", stderr(&o));
}

#[test]
fn verify_passes_and_lists_every_check() {
    let dir = tempfile::tempdir().unwrap();
    let o = ocl(&["verify"], dir.path());
    assert!(o.status.success(), "{}\n{}", stdout(&o), stderr(&o));
    let report = stdout(&o);
    for check in ["tsp_parity", "loss_equivalence", "gradient_check", "sampler_stats", "checkpoint_round_trip"] {
        let line = report.lines().find(|l| l.contains(check)).unwrap_or_else(|| panic!("{check} missing"));
        assert!(line.starts_with("PASS"), "{line}");
        assert!(line.contains("ms"), "{line}");
    }
}

#[test]
fn tiny_pretrain_probe_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.json");
    std::fs::write(
        &config,
        serde_json::json!({
            "model": {"blocks": 1, "dim": 16, "heads": 2},
            "data": {"num_classes": 2, "images_per_class": 8},
            "optim": {"warmup_epochs": 1, "total_epochs": 2},
            "train": {"batch_size": 8},
            "eval": {
                "linear": {"epochs": 2, "batch_size": 4, "warmup_epochs": 1},
                "finetune": {"epochs": 1, "batch_size": 4}
            }
        })
        .to_string(),
    )
    .unwrap();
    let cfg = config.to_str().unwrap();
    let o = ocl(&["pretrain", "--config", cfg], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["checkpoint.ckpt", "metrics.csv", "config.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next().unwrap(), "step,epoch,lr,loss,grad_norm,tau,wall_ms");
    assert_eq!(metrics.lines().count(), 1 + 4);

    for cmd in ["probe", "finetune"] {
        let o = ocl(&[cmd, "--config", cfg], dir.path());
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
    }
    let results = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
    let lines: Vec<&str> = results.lines().collect();
    assert_eq!(lines[0], "run_id,mode,epochs,top1");
    assert!(lines[1].contains(",linear_probe,2,"), "{}", lines[1]);
    assert!(lines[2].contains(",fine_tune,1,"), "{}", lines[2]);

    let export = dir.path().join("corpus.bin");
    let o = ocl(&["export-corpus", "--config", cfg, "--output", export.to_str().unwrap()], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::metadata(&export).unwrap().len(), 16 * 3073);
}

#[test]
fn ablate_writes_rows_and_table() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.json");
    std::fs::write(
        &config,
        serde_json::json!({
            "model": {"blocks": 1, "dim": 16, "heads": 2},
            "data": {"num_classes": 2, "images_per_class": 8},
            "optim": {"warmup_epochs": 0, "total_epochs": 1},
            "train": {"batch_size": 8},
            "eval": {"linear": {"epochs": 1, "batch_size": 4, "warmup_epochs": 0}}
        })
        .to_string(),
    )
    .unwrap();
    let cfg = config.to_str().unwrap();
    let o = ocl(
        &["ablate", "--config", cfg, "--axis", "kappa", "--values", "4,bogus,64", "--no-finetune"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let table = stdout(&o);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "| kappa | 4 | bogus | 64 |");
    assert!(lines[2].starts_with("| LIN |"));
    assert!(lines[2].contains("| failed |"), "{}", lines[2]);
    assert!(lines[3].starts_with("| FT | - | failed | - |"), "{}", lines[3]);

    let rows = dir.path().join("ablate-kappa/rows.csv");
    let again = ocl(&["table", "--axis", "kappa", "--rows", rows.to_str().unwrap()], dir.path());
    assert!(again.status.success());
    assert_eq!(stdout(&again), table);
}
