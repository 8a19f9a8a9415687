use std::fs;

use serde_json::json;
use twins_core::analysis::EvalReport;
use twins_core::workbench::{
    evaluate_checkpoint, load_checkpoint, read_metrics, run_experiment, ExperimentConfig, Stages,
};
use twins_core::Model;

fn config(out: &std::path::Path, method: &str) -> ExperimentConfig {
    let v = json!({
        "output_dir": out,
        "seeds": [1, 2],
        "dtype": "f64",
        "model": {"widths": [4, 6]},
        "source": {"source": "synthetic", "classes": 3, "image": [1, 8, 8], "per_class": 12, "noise": 0.1, "seed": 8},
        "target": {"source": "synthetic", "classes": 2, "image": [1, 8, 8], "per_class": 10, "noise": 0.1, "seed": 9},
        "pretrain": {
            "method": "at", "eta": 0.05, "batch_size": 8, "epochs": 2,
            "attack": {"epsilon": 0.02, "alpha": 0.01, "steps": 2}
        },
        "finetune": {
            "method": method, "eta": 0.05, "batch_size": 8, "epochs": 3, "lambda_twins": 0.3,
            "lambda_lwf": 0.1, "lambda_uot": 0.1,
            "attack": {"epsilon": 0.03, "alpha": 0.01, "steps": 2}
        }
    });
    ExperimentConfig::from_json(&v.to_string(), None).unwrap()
}

#[test]
fn every_method_runs_end_to_end() {
    for method in ["std", "at", "trades", "twins-at", "twins-trades", "lwf", "joint"] {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(dir.path(), method);
        let summaries = run_experiment(&cfg, Stages::ALL).unwrap();
        assert_eq!(summaries.len(), 2);
        for s in &summaries {
            let history = read_metrics(&s.dir.join("metrics.csv")).unwrap();
            assert_eq!(history.len(), 3, "{method}");
            for f in ["pretrain.ckpt", "pretrain_metrics.csv", "finetune.ckpt", "eval.json"] {
                assert!(s.dir.join(f).is_file(), "{method}: {f}");
            }
            assert_eq!(s.dir.join("warmup.ckpt").is_file(), method.starts_with("twins"));
            let (_, meta) = load_checkpoint::<f64>(&s.dir.join("finetune.ckpt")).unwrap();
            assert_eq!(meta.epoch, 3);
            assert_eq!(meta.method.unwrap().as_str(), method);
        }
    }
}

#[test]
fn resumed_evaluation_matches_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "twins-at");
    let summaries = run_experiment(&cfg, Stages::ALL).unwrap();
    for s in &summaries {
        let saved: EvalReport = {
            let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(s.dir.join("eval.json")).unwrap()).unwrap();
            EvalReport {
                clean_acc: v["clean_acc"].as_f64().unwrap(),
                robust_acc: v["robust_acc"].as_f64(),
            }
        };
        let again = evaluate_checkpoint(&cfg, &s.dir.join("finetune.ckpt"), s.seed).unwrap();
        assert_eq!(again, saved);
        let fin = s.finetune.as_ref().unwrap();
        assert_eq!(fin.clean_acc, saved.clean_acc);
    }
}

#[test]
fn staged_runs_reproduce_the_full_pipeline() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_experiment(&config(a.path(), "twins-at"), Stages::ALL).unwrap();
    let cfg = config(b.path(), "twins-at");
    run_experiment(&cfg, Stages::PRETRAIN).unwrap();
    assert!(!b.path().join("seed_1/metrics.csv").exists());
    run_experiment(&cfg, Stages::FINETUNE).unwrap();
    for f in ["seed_1/metrics.csv", "seed_2/finetune.ckpt", "seed_2/warmup.ckpt"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn init_checkpoint_skips_pretraining() {
    let dir = tempfile::tempdir().unwrap();
    let first = config(&dir.path().join("a"), "at");
    run_experiment(&first, Stages::PRETRAIN).unwrap();
    let ckpt = dir.path().join("a/seed_1/pretrain.ckpt");
    let mut v = serde_json::to_value(config(&dir.path().join("b"), "lwf")).unwrap();
    v.as_object_mut().unwrap().remove("pretrain");
    v["init_checkpoint"] = ckpt.to_str().unwrap().into();
    let cfg = ExperimentConfig::from_json(&v.to_string(), None).unwrap();
    let s = run_experiment(&cfg, Stages::ALL).unwrap();
    assert!(s[0].pretrain.is_none());
    let (pt, _) = load_checkpoint::<f64>(&ckpt).unwrap();
    let (ft, _): (Model<f64>, _) = load_checkpoint(&s[0].dir.join("finetune.ckpt")).unwrap();
    assert_eq!(ft.config.source_classes, Some(3));
    assert_ne!(ft.params.get("conv1.weight"), pt.params.get("conv1.weight"));
}
