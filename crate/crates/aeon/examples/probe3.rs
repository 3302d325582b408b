// Scratch: per-branch costs on the clean core vs noisy tail, by weak_std.
use aeon::benchmark::{synthesize, SynthConfig};
use aeon::model::AeonModel;
use aeon::model::ModelConfig;
use aeon::noise::Estimators;
use aeon::objective::{cross_entropy, one_hot, prepare_batch, pseudo_labels};
use aeon::trainer::{warmup_epoch, train_epoch, OptimizerState, Phase, TrainConfig};

fn main() {
    let synth = SynthConfig {
        num_classes: 8, dims: 16, train_per_class: 500, test_per_class: 250,
        class_separation: 5.0, within_std: 1.4, pool_offset: 6.0,
        r_id: 0.3, r_ood: 0.3, seed: 7, ..SynthConfig::default()
    };
    let (train, _test) = synthesize(&synth).unwrap();
    let mut cfg = TrainConfig {
        model: ModelConfig { hidden_dims: vec![32], feature_dim: 16,
            projection_hidden: 16, projection_dim: 32, ..ModelConfig::default() },
        batch_size: 64, warmup_epochs: 4, total_epochs: 60,
        lr_theta: 0.001, lr_gamma: 0.5, momentum: 0.5, weight_decay: 0.05,
        seed: 0, ..TrainConfig::default()
    };
    cfg.augment.weak_std = 0.25;
    cfg.augment.strong_std = 0.75;

    let mut model = AeonModel::init(&cfg.resolved_model(&train).unwrap(), cfg.seed).unwrap();
    let mut est = Estimators::new(0.0, 10.0, 10.0);
    let mut opt_t = OptimizerState::new(model.params.len());
    let mut opt_g = OptimizerState::new(2);
    for e in 0..4 {
        warmup_epoch(&mut model, &mut opt_t, &est, &train, &cfg, e, cfg.lr_theta, Phase::Warmup).unwrap();
    }
    for e in 4..24 {
        train_epoch(&mut model, &mut est, &mut opt_t, &mut opt_g, &train, &cfg, e, cfg.lr_theta, cfg.lr_gamma).unwrap();
    }

    // Raw CE of every record, to rank into core/tail.
    let n = train.records.len();
    let mut ce: Vec<(f64, usize)> = (0..n)
        .map(|i| {
            let r = &train.records[i];
            let z = model.logits(&r.features);
            (cross_entropy(&z, &one_hot(r.noisy_label, 8)), i)
        })
        .collect();
    ce.sort_by(|a, b| a.0.total_cmp(&b.0));
    let core: Vec<usize> = ce[..(n as f64 * 0.3) as usize].iter().map(|&(_, i)| i).collect();
    let tail: Vec<usize> = ce[(n as f64 * 0.7) as usize..].iter().map(|&(_, i)| i).collect();

    for weak in [0.25, 0.5, 0.75, 1.0, 1.4] {
        let mut aug = cfg.augment.clone();
        aug.weak_std = weak;
        aug.strong_std = weak.max(0.75);
        for (name, set) in [("core", &core), ("tail", &tail)] {
            let xs: Vec<&[f64]> = set.iter().map(|&i| train.records[i].features.as_slice()).collect();
            let labels: Vec<usize> = set.iter().map(|&i| train.records[i].noisy_label).collect();
            let prep = prepare_batch(&xs, &labels, set, 8, &aug, &cfg.loss, 1, 99, 0);
            let q = pseudo_labels(&model, &prep, 2.0).unwrap();
            let mut lu = 0.0;
            let mut ls_mix = 0.0;
            let mut ls_raw = 0.0;
            for (k, s) in prep.samples.iter().enumerate() {
                let z = model.logits(&s.x);
                lu += cross_entropy(&z, &q.q[k]);
                ls_raw += cross_entropy(&z, &one_hot(s.label, 8));
                let p = &prep.samples[s.mix_partner];
                let xm: Vec<f64> = s.x.iter().zip(&p.x).map(|(a, b)| s.mix_lambda * a + (1.0 - s.mix_lambda) * b).collect();
                let zm = model.logits(&xm);
                let mut ym = vec![0.0; 8];
                ym[s.label] += s.mix_lambda;
                ym[p.label] += 1.0 - s.mix_lambda;
                ls_mix += cross_entropy(&zm, &ym);
            }
            let m = set.len() as f64;
            println!("weak {weak:4.2} {name}: L_u {:7.4} L_s_mix {:7.4} L_s_raw {:7.4} delta(mix-u) {:+.4}",
                lu / m, ls_mix / m, ls_raw / m, (ls_mix - lu) / m);
        }
    }
    println!("eta after 20 main epochs: ({:.3},{:.3})", est.id.estimate(), est.ood.estimate());
}
