// Scratch: inspect per-batch gamma gradients at a post-warmup state.
use aeon::autodiff::Tape;
use aeon::benchmark::{synthesize, SynthConfig};
use aeon::model::{AeonModel, ModelConfig};
use aeon::noise::Estimators;
use aeon::objective::{batch_loss, prepare_batch, pseudo_labels};
use aeon::trainer::{warmup_epoch, train_epoch, OptimizerState, Phase, TrainConfig};

fn main() {
    let synth = SynthConfig {
        num_classes: 8,
        dims: 16,
        train_per_class: 500,
        test_per_class: 250,
        class_separation: 6.0,
        within_std: 1.0,
        pool_offset: 6.0,
        r_id: 0.3,
        r_ood: 0.3,
        seed: 7,
        ..SynthConfig::default()
    };
    let (train, _test) = synthesize(&synth).unwrap();

    let mut cfg = TrainConfig {
        model: ModelConfig {
            hidden_dims: vec![32],
            feature_dim: 16,
            projection_hidden: 16,
            projection_dim: 32,
            ..ModelConfig::default()
        },
        batch_size: 64,
        warmup_epochs: 10,
        total_epochs: 60,
        lr_theta: 0.001,
        lr_gamma: 0.05,
        momentum: 0.5,
        weight_decay: 0.002,
        seed: 0,
        ..TrainConfig::default()
    };
    cfg.augment.weak_std = 0.25;
    cfg.augment.strong_std = 0.75;
    cfg.augment.strong_dropout = 0.2;

    let mut model = AeonModel::init(&cfg.resolved_model(&train).unwrap(), cfg.seed).unwrap();
    let mut est = Estimators::new(cfg.gamma_init, cfg.t_id, cfg.t_ood);
    let mut opt_t = OptimizerState::new(model.params.len());
    let mut opt_g = OptimizerState::new(2);
    for e in 0..cfg.warmup_epochs {
        warmup_epoch(&mut model, &mut opt_t, &est, &train, &cfg, e, cfg.lr_theta, Phase::Warmup)
            .unwrap();
    }
    // A few main epochs so masks settle.
    for e in cfg.warmup_epochs..cfg.warmup_epochs + 5 {
        train_epoch(&mut model, &mut est, &mut opt_t, &mut opt_g, &train, &cfg, e, cfg.lr_theta, cfg.lr_gamma)
            .unwrap();
    }
    eprintln!("eta after 5 main epochs: ({:.4},{:.4}) gamma ({:.4},{:.4})",
        est.id.estimate(), est.ood.estimate(), est.id.gamma, est.ood.gamma);

    // Inspect gamma gradients over the next epoch's batches without stepping.
    let epoch = cfg.warmup_epochs + 5;
    let idx: Vec<usize> = (0..train.records.len()).collect();
    let tape = Tape::new();
    let mut sums = [0.0f64; 2];
    let mut absums = [0.0f64; 2];
    for (b, batch) in idx.chunks(cfg.batch_size).take(20).enumerate() {
        let xs: Vec<&[f64]> = batch.iter().map(|&i| train.records[i].features.as_slice()).collect();
        let labels: Vec<usize> = batch.iter().map(|&i| train.records[i].noisy_label).collect();
        let prepared = prepare_batch(
            &xs, &labels, batch, model.config.num_classes, &cfg.augment, &cfg.loss,
            cfg.seed, epoch as u64, b as u64,
        );
        let targets = pseudo_labels(&model, &prepared, cfg.loss.sharpen_exponent).unwrap();
        tape.reset();
        let bound = model.bind(&tape);
        let ev = est.bind(&tape);
        let loss = batch_loss(&tape, &bound, &ev, &prepared, &targets, &cfg.mask, &cfg.loss, None)
            .unwrap();
        let g = tape.backward(loss.root);
        let (gi, go) = (g.wrt(ev.gamma_id), g.wrt(ev.gamma_ood));
        sums[0] += gi;
        sums[1] += go;
        absums[0] += gi.abs();
        absums[1] += go.abs();
        if b < 8 {
            eprintln!(
                "b{b:2} g_id {gi:+.3e} g_ood {go:+.3e} tau ({:.2},{:.2}) breakdown sup {:.3} unsup {:.3} hid {:.3} hood {:.3}",
                loss.masks.tau_id.unwrap(), loss.masks.tau_ood.unwrap(),
                loss.breakdown.supervised, loss.breakdown.unsupervised,
                loss.breakdown.id_margin, loss.breakdown.ood_margin,
            );
        }
    }
    eprintln!("mean g_id {:+.3e} g_ood {:+.3e}  mean|.| {:.3e} {:.3e}",
        sums[0] / 20.0, sums[1] / 20.0, absums[0] / 20.0, absums[1] / 20.0);
}
