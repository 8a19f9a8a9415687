//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. A numeric argument runs a single criterion.

mod common;

use std::fs;
use std::panic;
use std::path::Path;
use std::time::Instant;

use common::*;
use serde_json::json;
use twins_core::analysis::{evaluate, frozen_gradient_check, max_relative_error, scale_probe, summarize_run};
use twins_core::finite_diff::finite_diff_grad;
use twins_core::network::{bn_affine_names, conv_name, AffineSet, BnLayerState};
use twins_core::training::{
    compute_at_loss, compute_joint_loss, compute_lwf_loss, compute_trades_loss, compute_twins_at_loss,
    compute_twins_trades_loss, warmup_bn, KlOrder, LossGraph, Reduction,
};
use twins_core::workbench::{
    evaluate_checkpoint, load_checkpoint, read_metrics, run_experiment, save_checkpoint,
    CheckpointMeta, ExperimentConfig, Stages,
};
use twins_core::{
    pgd_attack, AttackConfig, AttackLoss, BranchMode, Dataset, Head, LinearClassifier, Method, Model, ParamStore,
    Scalar,
};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn same_bits<T: Scalar>(a: &[T], b: &[T]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.f64().to_bits() == y.f64().to_bits())
}

fn same_stats<T: Scalar>(a: &[BnLayerState<T>], b: &[BnLayerState<T>]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(s, t)| {
            same_bits(&s.running_mean, &t.running_mean)
                && same_bits(&s.running_var, &t.running_var)
                && same_bits(&s.frozen_mean, &t.frozen_mean)
                && same_bits(&s.frozen_var, &t.frozen_var)
                && same_bits(&[s.eps, s.momentum], &[t.eps, t.momentum])
        })
}

fn same_params<T: Scalar>(a: &ParamStore<T>, b: &ParamStore<T>) -> bool {
    let (na, nb): (Vec<_>, Vec<_>) = (a.names().collect(), b.names().collect());
    na == nb
        && na.iter().all(|n| {
            let (x, y) = (a.get(n).unwrap(), b.get(n).unwrap());
            x.shape() == y.shape() && same_bits(x.data(), y.data())
        })
}

fn gradient_oracle() -> Check {
    let start = Instant::now();
    let (mut checked, mut worst) = (0usize, 0.0f64);
    for seed in 0..8 {
        let m = tiny_model(seed, 1e-5);
        let (x, y) = tiny_batch(4, seed + 1);
        let (x_adv, _) = tiny_batch(4, seed + 2);
        let objective = |m: &Model<f64>| {
            compute_twins_trades_loss(m, &x, &x_adv, &y, 2.0, 0.7, KlOrder::AdvFirst, Reduction::Mean)
        };
        let auto = objective(&m).map_err(|e| e.to_string())?.gradients().map_err(|e| e.to_string())?;
        let loss = |p: &ParamStore<f64>| {
            let mut mm = m.clone();
            mm.params = p.clone();
            objective(&mm).map(|g| g.value())
        };
        let numeric =
            finite_diff_grad(loss, &m.params, 1e-5, |n| !n.starts_with("source_head")).map_err(|e| e.to_string())?;
        for (name, g) in numeric.iter() {
            for (&a, &f) in auto.get(name).ok_or(format!("no gradient for {name}"))?.data().iter().zip(g.data()) {
                if a.abs().max(f.abs()) > 1e-8 {
                    checked += 1;
                    let r = rel(a, f);
                    ensure(r <= 1e-4, || format!("seed {seed} {name}: autodiff {a:e} vs fd {f:e}"))?;
                    worst = worst.max(r);
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 30.0, || format!("took {secs:.1}s"))?;
    Ok(format!("{checked} coordinates, max rel err {worst:.2e}, {secs:.1}s"))
}

fn scale_law() -> Check {
    let start = Instant::now();
    let gammas = [0.5, 2.0, 10.0];
    let (mut worst_ratio, mut worst_fwd) = (0.0f64, 0.0f64);
    for draw in 0..3u64 {
        let m = tiny_model(20 + draw, 0.0);
        let (x, y) = tiny_batch(8, 30 + draw);
        for layer in 0..m.num_layers() {
            let channel = draw as usize % m.config.widths[layer];
            let rows = scale_probe(&m, layer, channel, &gammas, &x, &y).map_err(|e| e.to_string())?;
            let mut frozen_moved = false;
            for r in &rows {
                match r.branch {
                    BranchMode::AdaptiveTrain => {
                        let e = rel(r.grad_ratio, 1.0 / r.gamma);
                        ensure(e <= 1e-6, || format!("draw {draw} layer {layer} γ={}: grad ratio {}", r.gamma, r.grad_ratio))?;
                        ensure(r.forward_delta <= 1e-6 && r.argmax_unchanged, || {
                            format!("draw {draw} layer {layer} γ={}: forward moved by {:e}", r.gamma, r.forward_delta)
                        })?;
                        worst_ratio = worst_ratio.max(e);
                        worst_fwd = worst_fwd.max(r.forward_delta);
                    }
                    _ => frozen_moved |= r.forward_delta > 1e-6,
                }
            }
            ensure(frozen_moved, || format!("draw {draw} layer {layer}: frozen branch ignored the rescaling"))?;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 10.0, || format!("took {secs:.1}s"))?;
    Ok(format!("ratio err {worst_ratio:.1e}, forward delta {worst_fwd:.1e}, {secs:.1}s"))
}

fn frozen_formula() -> Check {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for draw in 0..3u64 {
        let m = tiny_model(40 + draw, 0.0);
        let (x, y) = tiny_batch(6, 50 + draw);
        for layer in 0..m.num_layers() {
            let (a, f) = frozen_gradient_check(&m, layer, &x, &y).map_err(|e| e.to_string())?;
            ensure(a.max_abs() > 1e-8, || format!("draw {draw} layer {layer}: vanishing gradient"))?;
            let e = max_relative_error(&a, &f, 1e-8).map_err(|e| e.to_string())?;
            ensure(e <= 1e-6, || format!("draw {draw} layer {layer}: rel err {e:e}"))?;
            worst = worst.max(e);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 10.0, || format!("took {secs:.1}s"))?;
    Ok(format!("max rel err {worst:.1e}, {secs:.1}s"))
}

fn pgd_closed_form() -> Check {
    let mut cases = 0;
    for seed in 0..5 {
        let mut r = rng(seed);
        let (d, k) = (6, 4);
        let w = uniform(&[d, k], -1.0, 1.0, &mut r);
        let b = uniform(&[k], -0.5, 0.5, &mut r);
        let clf = LinearClassifier::new(w.clone(), b.clone()).map_err(|e| e.to_string())?;
        let x = uniform(&[5, d], 0.0, 1.0, &mut r);
        let y = [0, 1, 2, 3, 1];
        for (alpha, eps) in [(2.0 / 255.0, 8.0 / 255.0), (0.3, 0.1)] {
            let cfg = AttackConfig {
                epsilon: eps,
                alpha,
                steps: 1,
                rand_init: false,
                loss: Some(AttackLoss::Ce),
            };
            let got = pgd_attack(&clf, BranchMode::Inference, &x, &y, &cfg, &mut rng(0)).map_err(|e| e.to_string())?;
            let mut want = x.data().to_vec();
            for i in 0..5 {
                let z: Vec<f64> = (0..k)
                    .map(|j| b.data()[j] + (0..d).map(|t| x.data()[i * d + t] * w.data()[t * k + j]).sum::<f64>())
                    .collect();
                let p: Vec<f64> = log_softmax(&z).iter().map(|v| v.exp()).collect();
                for t in 0..d {
                    let g: f64 = (0..k)
                        .map(|j| (p[j] - if j == y[i] { 1.0 } else { 0.0 }) * w.data()[t * k + j])
                        .sum();
                    let s = if g == 0.0 { 0.0 } else { g.signum() };
                    let o = x.data()[i * d + t];
                    want[i * d + t] = (o + alpha * s).clamp(o - eps, o + eps).clamp(0.0, 1.0);
                }
            }
            ensure(same_bits(got.data(), &want), || format!("seed {seed} α={alpha}: differs from the closed form"))?;
            cases += 1;
        }
    }
    let zero = AttackConfig::pgd10().with_epsilon(0.0);
    let m = tiny_model(4, 1e-5);
    let (x, y) = tiny_batch(4, 5);
    for branch in [BranchMode::AdaptiveTrain, BranchMode::FrozenTrain, BranchMode::Inference] {
        let got = pgd_attack(&m, branch, &x, &y, &zero, &mut rng(6)).map_err(|e| e.to_string())?;
        ensure(same_bits(got.data(), x.data()), || format!("ε=0 moved the input under {branch:?}"))?;
    }
    Ok(format!("{cases} one-step cases bitwise, ε=0 identity on 3 branches"))
}

fn loss_identities() -> Check {
    fn same(a: &LossGraph<f64>, b: &LossGraph<f64>, what: &str) -> Result<(), String> {
        ensure(a.value().to_bits() == b.value().to_bits(), || {
            format!("{what}: {} vs {}", a.value(), b.value())
        })?;
        let (ga, gb) = (a.gradients().map_err(|e| e.to_string())?, b.gradients().map_err(|e| e.to_string())?);
        let mut names: Vec<String> = (0..2).map(conv_name).collect();
        for l in 0..2 {
            let (g, b) = bn_affine_names(l, AffineSet::Adaptive);
            names.extend([g, b]);
        }
        names.extend(["head.weight".into(), "head.bias".into()]);
        for n in &names {
            let (x, y) = (ga.get(n), gb.get(n));
            ensure(x.is_some() && y.is_some() && same_bits(x.unwrap().data(), y.unwrap().data()), || {
                format!("{what}: gradient of {n} differs")
            })?;
        }
        Ok(())
    }
    let e = |e: twins_core::Error| e.to_string();
    let mut cases = 0;
    for seed in 0..3 {
        let m = tiny_model(60 + seed, 1e-5);
        let (x, y) = tiny_batch(8, 70 + seed);
        let (x_adv, _) = tiny_batch(8, 80 + seed);
        let (xa, xc, ya) = (x_adv.slice_rows(0, 4).map_err(e)?, x.slice_rows(0, 4).map_err(e)?, &y[..4]);
        let at = compute_at_loss(&m, &x_adv, &y).map_err(e)?;
        let at_half = compute_at_loss(&m, &xa, ya).map_err(e)?;
        same(&compute_twins_at_loss(&m, &x_adv, &y, 0.0, Reduction::Mean).map_err(e)?, &at_half, "twins-at(λ=0)")?;
        same(&compute_trades_loss(&m, &x, &x_adv, &y, 0.0, KlOrder::AdvFirst).map_err(e)?, &at, "trades(β=0)")?;
        same(
            &compute_twins_trades_loss(&m, &x, &x_adv, &y, 6.0, 0.0, KlOrder::AdvFirst, Reduction::Mean).map_err(e)?,
            &compute_trades_loss(&m, &xc, &xa, ya, 6.0, KlOrder::AdvFirst).map_err(e)?,
            "twins-trades(λ=0)",
        )?;
        same(&compute_lwf_loss(&m, &tiny_model(90 + seed, 1e-5), &x_adv, &y, 0.0).map_err(e)?, &at, "lwf(λ=0)")?;
        let (xs, _) = tiny_batch(6, 95 + seed);
        let ys = [0, 1, 2, 3, 3, 1];
        same(&compute_joint_loss(&m, &x_adv, &y, Some((&xs, &ys)), 0.0).map_err(e)?, &at, "joint(λ=0)")?;
        cases += 5;
    }
    Ok(format!("{cases} identities bitwise in value and gradient"))
}

fn warmup_ema() -> Check {
    let e = |e: twins_core::Error| e.to_string();
    let attack = AttackConfig {
        epsilon: 8.0 / 255.0,
        alpha: 2.0 / 255.0,
        steps: 3,
        rand_init: false,
        loss: Some(AttackLoss::Ce),
    };
    let mut worst = 0.0f64;
    for seed in 0..3 {
        let m = tiny_model(100 + seed, 1e-5);
        let (x, y) = tiny_batch(6, 110 + seed);
        let data = Dataset::new(x.clone(), y.clone(), 3).map_err(e)?;

        let pseudo = m.logits(&x, BranchMode::FrozenTrain, Head::Source).map_err(e)?.argmax_rows().map_err(e)?;
        let x_adv = pgd_attack(&m.with_head(Head::Source), BranchMode::FrozenTrain, &x, &pseudo, &attack, &mut rng(0))
            .map_err(e)?;
        let batch = oracle_forward(&m, &x_adv, OracleNorm::BatchWithFrozenAffine, Head::Source).pre_norm_stats;

        let mut warmed = m.clone();
        warmup_bn(&mut warmed, &data, &attack, x.shape()[0], 1, &mut rng(1)).map_err(e)?;
        for (l, (mu_b, _)) in batch.iter().enumerate() {
            for c in 0..mu_b.len() {
                let want = 0.9 * m.bn[l].frozen_mean[c] + 0.1 * mu_b[c];
                let got = warmed.bn[l].frozen_mean[c];
                ensure((got - want).abs() <= 1e-12, || format!("seed {seed} layer {l} channel {c}: {got} vs {want}"))?;
                worst = worst.max((got - want).abs());
            }
        }

        let mut idle = m.clone();
        warmup_bn(&mut idle, &data, &attack, x.shape()[0], 0, &mut rng(1)).map_err(e)?;
        ensure(same_stats(&idle.bn, &m.bn) && same_params(&idle.params, &m.params), || {
            format!("seed {seed}: zero warmup epochs changed the model")
        })?;
    }
    Ok(format!("max abs err {worst:.1e}; zero epochs bitwise unchanged"))
}

fn small_experiment(out: &Path) -> ExperimentConfig {
    let v = json!({
        "output_dir": out,
        "seeds": [1],
        "dtype": "f32",
        "model": {"widths": [4, 6]},
        "source": {"source": "synthetic", "classes": 3, "image": [1, 8, 8], "per_class": 12, "noise": 0.1, "seed": 8},
        "target": {"source": "synthetic", "classes": 2, "image": [1, 8, 8], "per_class": 10, "noise": 0.1, "seed": 9},
        "pretrain": {"method": "at", "eta": 0.05, "batch_size": 8, "epochs": 2,
            "attack": {"epsilon": 0.02, "alpha": 0.01, "steps": 2}},
        "finetune": {"method": "twins-at", "eta": 0.05, "batch_size": 8, "epochs": 2, "lambda_twins": 0.3,
            "attack": {"epsilon": 0.03, "alpha": 0.01, "steps": 2}}
    });
    ExperimentConfig::from_json(&v.to_string(), None).unwrap()
}

fn round_trip<T: Scalar>(m: &Model<T>, path: &Path) -> Result<(), String> {
    let e = |e: twins_core::Error| e.to_string();
    let meta = CheckpointMeta {
        model: m.config.clone(),
        stage: "finetune".into(),
        seed: 3,
        epoch: 2,
        method: Some(Method::TwinsAt),
    };
    save_checkpoint(path, m, &meta).map_err(e)?;
    let (back, meta_back) = load_checkpoint::<T>(path).map_err(e)?;
    ensure(meta_back == meta && back.config == m.config, || "metadata changed".into())?;
    ensure(same_params(&back.params, &m.params) && same_stats(&back.bn, &m.bn), || "state changed".into())?;
    let again = path.with_extension("again");
    save_checkpoint(&again, &back, &meta_back).map_err(e)?;
    let (a, b) = (fs::read(path), fs::read(&again));
    ensure(matches!((a, b), (Ok(a), Ok(b)) if a == b), || "re-saved file differs".into())?;

    let (x, y) = tiny_batch(10, 7);
    let data = Dataset::new(x, y, 3).map_err(e)?.cast::<T>();
    let attack = AttackConfig::pgd10();
    let before = evaluate(m, &data, Some(&attack), 4, &mut rng(5)).map_err(e)?;
    let after = evaluate(&back, &data, Some(&attack), 4, &mut rng(5)).map_err(e)?;
    ensure(before == after, || format!("evaluation {before:?} became {after:?}"))
}

fn persistence() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let m = tiny_model(120, 1e-5);
    round_trip(&m, &dir.path().join("f64.ckpt"))?;
    round_trip(&m.cast::<f32>(), &dir.path().join("f32.ckpt"))?;

    let cfg = small_experiment(&dir.path().join("run"));
    let s = run_experiment(&cfg, Stages::ALL).map_err(|e| e.to_string())?;
    let text = fs::read_to_string(s[0].dir.join("eval.json")).map_err(|e| e.to_string())?;
    let saved: serde_json::Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let again = evaluate_checkpoint(&cfg, &s[0].dir.join("finetune.ckpt"), s[0].seed).map_err(|e| e.to_string())?;
    ensure(
        saved["clean_acc"].as_f64().map(f64::to_bits) == Some(again.clean_acc.to_bits())
            && saved["robust_acc"].as_f64().map(f64::to_bits) == again.robust_acc.map(f64::to_bits),
        || format!("resumed evaluation {again:?} differs from {text}"),
    )?;
    Ok("f64 and f32 checkpoints bitwise; resumed evaluation identical".into())
}

fn trend_suite() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path();
    let seeds = [0u64, 1, 2];
    let config = |method: &str| {
        json!({
            "output_dir": root.join(method),
            "seeds": seeds,
            "dtype": "f32",
            "source": {"source": "synthetic", "classes": 10, "image": [3, 16, 16], "per_class": 60, "noise": 0.3, "seed": 100},
            "target": {"source": "synthetic", "classes": 5, "image": [3, 16, 16], "per_class": 200, "noise": 0.3,
                "seed": 200, "val_fraction": 0.5},
            "pretrain": {"method": "at", "eta": 0.05, "weight_decay": 5e-4, "batch_size": 64, "epochs": 10,
                "attack": {"epsilon": 4.0 / 255.0, "alpha": 1.0 / 255.0, "steps": 10}},
            "finetune": {"method": method, "eta": 0.01, "weight_decay": 5e-4, "batch_size": 64, "epochs": 20,
                "milestones": [10, 16], "lambda_twins": 0.3,
                "attack": {"epsilon": 8.0 / 255.0, "alpha": 2.0 / 255.0, "steps": 10}}
        })
        .to_string()
    };
    let e = |e: twins_core::Error| e.to_string();
    let at = ExperimentConfig::from_json(&config("at"), None).map_err(e)?;
    let twins = ExperimentConfig::from_json(&config("twins-at"), None).map_err(e)?;
    run_experiment(&at, Stages::ALL).map_err(e)?;
    for s in seeds {
        let to = root.join(format!("twins-at/seed_{s}"));
        fs::create_dir_all(&to).map_err(|e| e.to_string())?;
        fs::copy(root.join(format!("at/seed_{s}/pretrain.ckpt")), to.join("pretrain.ckpt")).map_err(|e| e.to_string())?;
    }
    run_experiment(&twins, Stages::FINETUNE).map_err(e)?;

    let summary = |method: &str, s: u64| {
        let h = read_metrics(&root.join(format!("{method}/seed_{s}/metrics.csv")))?;
        summarize_run(&h)
    };
    let (mut a, mut b, mut c) = (0, 0, 0);
    let mut rows = Vec::new();
    for s in seeds {
        let (p, q) = (summary("at", s).map_err(e)?, summary("twins-at", s).map_err(e)?);
        a += (q.grad_norm_mean > p.grad_norm_mean) as usize;
        b += (q.weight_dist_quarter > p.weight_dist_quarter) as usize;
        c += (q.overfitting.gap <= p.overfitting.gap) as usize;
        rows.push(format!(
            "seed {s}: gn {:.3}/{:.3} wd25 {:.3}/{:.3} gap {:.3}/{:.3}",
            q.grad_norm_mean, p.grad_norm_mean, q.weight_dist_quarter, p.weight_dist_quarter, q.overfitting.gap,
            p.overfitting.gap
        ));
    }
    let detail = format!("(a) {a}/3 (b) {b}/3 (c) {c}/3; twins/at {}", rows.join("; "));
    ensure(a >= 2 && b >= 2 && c >= 2, || detail.clone())?;
    Ok(detail)
}

fn at_sanity() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let v = json!({
        "output_dir": dir.path(),
        "seeds": [0, 1, 2],
        "dtype": "f32",
        "target": {"source": "synthetic", "classes": 4, "image": [3, 16, 16], "per_class": 50, "noise": 0.1,
            "seed": 300, "val_fraction": 0.3},
        "finetune": {"method": "at", "eta": 0.05, "weight_decay": 5e-4, "batch_size": 32, "epochs": 20,
            "attack": {"epsilon": 2.0 / 255.0, "alpha": 0.5 / 255.0, "steps": 10}},
        "eval_attack": {"epsilon": 2.0 / 255.0, "alpha": 0.5 / 255.0, "steps": 10}
    });
    let cfg = ExperimentConfig::from_json(&v.to_string(), None).map_err(|e| e.to_string())?;
    let mut rows = Vec::new();
    let mut ok = true;
    for s in run_experiment(&cfg, Stages::ALL).map_err(|e| e.to_string())? {
        let f = s.finetune.ok_or("no fine-tuning summary")?;
        let robust = f.robust_acc.unwrap_or(0.0);
        ok &= f.clean_acc >= 0.95 && robust >= 0.8;
        rows.push(format!("seed {}: clean {:.3} robust {:.3}", s.seed, f.clean_acc, robust));
    }
    ensure(ok, || rows.join("; "))?;
    Ok(rows.join("; "))
}

fn main() {
    let criteria: [(&str, fn() -> Check); 9] = [
        ("gradient oracle", gradient_oracle),
        ("adaptive scale law", scale_law),
        ("frozen gradient formula", frozen_formula),
        ("PGD closed form", pgd_closed_form),
        ("loss reduction identities", loss_identities),
        ("warmup EMA", warmup_ema),
        ("persistence", persistence),
        ("desk-scale trends", trend_suite),
        ("AT sanity", at_sanity),
    ];
    let only: Option<usize> = std::env::args().skip(1).find_map(|a| a.parse().ok());
    let mut failed = 0;
    for (i, (name, run)) in criteria.into_iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let outcome = panic::catch_unwind(run).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("criterion {n} {name}: PASS: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} {name}: FAIL: {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
