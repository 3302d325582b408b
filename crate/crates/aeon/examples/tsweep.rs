use aeon::benchmark::{synthesize, SynthConfig};
use aeon::model::ModelConfig;
use aeon::trainer::{fit, FitOptions, TrainConfig};
use std::collections::HashMap;
use std::time::Instant;

fn main() {
    let mut kv: HashMap<String, String> = HashMap::new();
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
        class_separation: 5.0,
        within_std: 1.4,
        pool_offset: 6.0,
        r_id: 0.3,
        r_ood: 0.3,
        seed: 3,
        ..SynthConfig::default()
    };
    let (train, test) = synthesize(&synth).unwrap();

    let warmup = u("warmup", 6);
    let total = u("total", 30);
    let t0 = Instant::now();
    let mut rows: Vec<(String, f64, bool)> = Vec::new();
    for te in [0.5, 1.0, 2.0] {
        for t in [5.0, 10.0, 15.0] {
            for beta in [0.05, 0.1, 0.2] {
                let mut accs = Vec::new();
                let mut finite = true;
                for seed in 0..3u64 {
                    let mut cfg = TrainConfig {
                        model: ModelConfig {
                            hidden_dims: vec![32],
                            feature_dim: 16,
                            projection_hidden: 16,
                            projection_dim: 32,
                            ..ModelConfig::default()
                        },
                        t_id: t,
                        t_ood: t,
                        gamma_init: -8.473,
                        gamma_init_ood: Some(-4.055),
                        batch_size: 64,
                        warmup_epochs: warmup,
                        total_epochs: total,
                        lr_theta: f("lr", 0.001),
                        lr_gamma: f("lr_g", 0.1),
                        momentum: 0.5,
                        weight_decay: 0.05,
                        seed,
                        ..TrainConfig::default()
                    };
                    cfg.mask.energy_temp = te;
                    cfg.mask.beta_id = beta;
                    cfg.mask.beta_ood = beta;
                    match fit(&cfg, &train, None, &FitOptions::default()) {
                        Ok(res) => {
                            let (acc, _) =
                                aeon::metrics::test_metrics(&res.model, &test, 15).unwrap();
                            if !acc.is_finite() {
                                finite = false;
                            }
                            accs.push(acc);
                        }
                        Err(e) => {
                            eprintln!("cell ({te},{t},{beta}) seed {seed}: {e}");
                            finite = false;
                            accs.push(f64::NAN);
                        }
                    }
                }
                let mean = accs.iter().sum::<f64>() / accs.len() as f64;
                eprintln!(
                    "cell ({te},{t},{beta}) mean {:.4} [{:.4} {:.4} {:.4}] {}s",
                    mean,
                    accs[0],
                    accs[1],
                    accs[2],
                    t0.elapsed().as_secs()
                );
                rows.push((format!("({te},{t},{beta})"), mean, finite));
            }
        }
    }
    let mut ranked = rows.clone();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    for (i, (name, acc, finite)) in ranked.iter().enumerate() {
        println!("{:2} {} acc {:.4} finite {}", i + 1, name, acc, finite);
    }
    let default_acc = rows.iter().find(|r| r.0 == "(1,10,0.1)").unwrap().1;
    let strictly_above = rows.iter().filter(|r| r.1 > default_acc).count();
    println!(
        "default (1,10,0.1) acc {:.4}, cells strictly above: {} ({}s)",
        default_acc,
        strictly_above,
        t0.elapsed().as_secs()
    );
}
