use std::time::Instant;

use aeon::benchmark::{synthesize, SynthConfig};
use aeon::metrics::{evaluate, EvalContext};
use aeon::model::ModelConfig;
use aeon::trainer::{fit, FitOptions, TrainConfig};

fn main() {
    let mut kv = std::collections::HashMap::new();
    for a in std::env::args().skip(1) {
        let (k, v) = a.split_once('=').expect("args are key=value");
        kv.insert(k.to_string(), v.to_string());
    }
    let f = |k: &str, d: f64| kv.get(k).map(|s| s.parse::<f64>().unwrap()).unwrap_or(d);
    let u = |k: &str, d: usize| kv.get(k).map(|s| s.parse::<usize>().unwrap()).unwrap_or(d);

    let synth = SynthConfig {
        num_classes: 8,
        dims: 16,
        train_per_class: 500,
        test_per_class: 250,
        class_separation: f("sep", 6.0),
        within_std: f("std", 1.0),
        pool_offset: f("pool_off", 4.0),
        pool_clusters: u("pools", 4),
        flip_std: f("fstd", 0.1),
        r_id: 0.3,
        r_ood: 0.3,
        seed: u("dseed", 7) as u64,
        ..SynthConfig::default()
    };
    let t0 = Instant::now();
    let (train, test) = synthesize(&synth).unwrap();
    eprintln!("dataset in {:.1?}", t0.elapsed());

    let mut cfg = TrainConfig {
        model: ModelConfig {
            hidden_dims: kv
                .get("hidden")
                .map(|s| s.split(',').map(|t| t.parse().unwrap()).collect())
                .unwrap_or_else(|| vec![32]),
            feature_dim: u("feat", 16),
            projection_hidden: u("proj_h", 16),
            projection_dim: u("proj_d", 32),
            ..ModelConfig::default()
        },
        batch_size: u("batch", 64),
        warmup_epochs: u("warmup", 10),
        total_epochs: u("total", 80),
        lr_theta: f("lr", 0.001),
        lr_gamma: f("lr_g", 0.05),
        momentum: f("m", 0.9),
        weight_decay: f("wd", 5e-5),
        gamma_init: f("g0", 0.0),
        gamma_init_ood: kv.get("g0ood").map(|s| s.parse::<f64>().unwrap()),
        ce_only: u("ce", 0) == 1,
        seed: u("seed", 0) as u64,
        ..TrainConfig::default()
    };
    cfg.augment.weak_std = f("weak", 0.25);
    cfg.augment.strong_std = f("strong", 0.75);
    cfg.augment.strong_dropout = f("drop", 0.2);

    let t1 = Instant::now();
    let out = fit(&cfg, &train, Some(&test), &FitOptions::default());
    let dt = t1.elapsed();
    match out {
        Ok(res) => {
            let every = (cfg.total_epochs / 10).max(1);
            for r in res.history.iter().step_by(every) {
                eprintln!(
                    "e{:3} {:?} loss {:8.3} eta ({:.3},{:.3}) w_ood {} acc {}",
                    r.epoch, r.phase, r.loss_total, r.eta_id, r.eta_ood,
                    r.mean_w_ood.map(|v| format!("{v:.3}")).unwrap_or("-".into()),
                    r.test_acc.map(|v| format!("{v:.4}")).unwrap_or("-".into()),
                );
            }
            let probes: Vec<String> = res
                .mask_probes
                .iter()
                .step_by(every)
                .map(|p| {
                    format!(
                        "({:.2}/{:.2})",
                        p.w_ood_over_true_ood.unwrap_or(f64::NAN),
                        p.w_ood_over_true_id.unwrap_or(f64::NAN)
                    )
                })
                .collect();
            eprintln!("probe ood/id: {}", probes.join(" "));
            let epr: Vec<String> = res
                .mask_probes
                .iter()
                .step_by(every)
                .map(|p| {
                    format!(
                        "({:.1}/{:.1})",
                        p.energy_over_true_ood.unwrap_or(f64::NAN),
                        p.energy_over_true_id.unwrap_or(f64::NAN)
                    )
                })
                .collect();
            eprintln!("E ood/id:     {}", epr.join(" "));
            let ctx = EvalContext {
                train: &train,
                test: &test,
                r_id: Some(0.3),
                r_ood: Some(0.3),
                config_digest: None,
                seed: cfg.seed,
            };
            let rep = evaluate(&res.model, &res.estimators, &cfg.mask, &ctx).unwrap();
            println!(
                "RESULT acc {:.4} ece {:.4} eta_id {:.3} eta_ood {:.3} auroc_ood {:.3} auroc_id {:.3} time {:.1}s",
                rep.test_accuracy, rep.test_ece, rep.eta_id, rep.eta_ood,
                rep.auroc_ood.unwrap_or(f64::NAN), rep.auroc_id.unwrap_or(f64::NAN),
                dt.as_secs_f64()
            );
        }
        Err(e) => println!("RESULT ERR {e} after {:.1}s", dt.as_secs_f64()),
    }
}
