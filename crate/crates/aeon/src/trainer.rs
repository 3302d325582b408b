//! The training loop: a warm-up phase of plain cross-entropy, then main
//! epochs where every batch estimates the noise rates, masks itself, and
//! updates both the model parameters and the two rate parameters.
//!
//! One run is strictly sequential and fully deterministic in the config
//! seed: batch composition, augmentation views, and mixup draws are all
//! derived streams, so two runs with the same config and dataset produce
//! bit-identical parameter vectors and logs.
//!
//! The learning-rate schedule treats the phases differently: warm-up runs at
//! the full rate, main epochs follow cosine decay over the main span only.
//! The rate parameters keep their own constant learning rate; they are
//! scalar logits, not weights, and decaying them just freezes the estimate
//! early.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::benchmark::{Tag, TaggedDataset};
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{AeonModel, ModelConfig};
use crate::noise::{Estimators, MaskConfig};
use crate::objective::{
    batch_loss, cross_entropy_on, one_hot, prepare_batch, pseudo_labels, AugmentConfig,
    LossConfig,
};
use crate::rng;

pub const MODEL_FILE: &str = "model.json";
pub const ESTIMATORS_FILE: &str = "estimators.json";
pub const TRAIN_CONFIG_FILE: &str = "train_config.json";

/// Full description of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Architecture; `input_dim` and `num_classes` may be left 0 and are
    /// then filled from the dataset.
    pub model: ModelConfig,
    pub mask: MaskConfig,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    /// Sigmoid temperature of the label-noise rate estimator.
    pub t_id: f64,
    /// Sigmoid temperature of the open-set rate estimator.
    pub t_ood: f64,
    /// Initial value of both rate parameters.
    pub gamma_init: f64,
    /// Overrides `gamma_init` for the open-set estimator when set. The two
    /// score distributions firm up at different speeds, so their starting
    /// points may reasonably differ.
    pub gamma_init_ood: Option<f64>,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    /// Total epoch budget including warm-up. Equal to `warmup_epochs` for a
    /// warm-up-only run.
    pub total_epochs: usize,
    pub lr_theta: f64,
    pub lr_gamma: f64,
    pub momentum: f64,
    /// Applied to model parameters only, never to the rate parameters.
    pub weight_decay: f64,
    /// Cosine-decay the model learning rate over the main epochs.
    pub cosine_decay: bool,
    /// Run every epoch as plain cross-entropy: the ablation baseline.
    pub ce_only: bool,
    pub seed: u64,
    /// Checkpoint every this many epochs; 0 checkpoints only at the start
    /// and end.
    pub ckpt_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            mask: MaskConfig::default(),
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
            t_id: 10.0,
            t_ood: 10.0,
            gamma_init: 0.0,
            gamma_init_ood: None,
            batch_size: 64,
            warmup_epochs: 10,
            total_epochs: 110,
            lr_theta: 0.1,
            lr_gamma: 0.01,
            momentum: 0.9,
            weight_decay: 5e-5,
            cosine_decay: true,
            ce_only: false,
            seed: 0,
            ckpt_every: 0,
        }
    }
}

impl TrainConfig {
    /// Checks everything except the model dimensions, which may still be
    /// unresolved; [`TrainConfig::resolved_model`] finishes those.
    pub fn validate(&self) -> Result<()> {
        self.mask.validate()?;
        self.loss.validate()?;
        self.augment.validate()?;
        if !(self.t_id > 0.0) || !(self.t_ood > 0.0) {
            return Err(Error::config("estimator temperatures must be positive"));
        }
        if !self.gamma_init.is_finite() {
            return Err(Error::config("gamma_init must be finite"));
        }
        if let Some(g) = self.gamma_init_ood {
            if !g.is_finite() {
                return Err(Error::config("gamma_init_ood must be finite"));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.total_epochs == 0 {
            return Err(Error::config("total_epochs must be at least 1"));
        }
        if self.warmup_epochs > self.total_epochs {
            return Err(Error::config(
                "warmup_epochs must not exceed total_epochs",
            ));
        }
        if !(self.lr_theta > 0.0) || !(self.lr_gamma > 0.0) {
            return Err(Error::config("learning rates must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::config("weight_decay must be finite and nonnegative"));
        }
        Ok(())
    }

    /// Model config with dataset-derived dimensions filled in and checked.
    pub fn resolved_model(&self, data: &TaggedDataset) -> Result<ModelConfig> {
        let mut m = self.model.clone();
        if m.input_dim == 0 {
            m.input_dim = data.dims;
        }
        if m.num_classes == 0 {
            m.num_classes = data.num_classes;
        }
        if m.input_dim != data.dims {
            return Err(Error::data(format!(
                "model expects {} input dims but the dataset has {}",
                m.input_dim, data.dims
            )));
        }
        if m.num_classes < data.num_classes {
            return Err(Error::data(format!(
                "model has {} classes but the dataset labels need {}",
                m.num_classes, data.num_classes
            )));
        }
        m.validate()?;
        Ok(m)
    }
}

/// Momentum buffer for one parameter vector.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    velocity: Vec<f64>,
    steps: u64,
}

impl OptimizerState {
    pub fn new(dim: usize) -> Self {
        OptimizerState {
            velocity: vec![0.0; dim],
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }
}

/// One SGD-with-momentum update:
/// `v <- momentum * v + (grad + weight_decay * param); param <- param - lr * v`.
/// Fails loud on a non-finite gradient instead of poisoning the parameters.
pub fn sgd_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut OptimizerState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    assert_eq!(params.len(), grads.len(), "gradient dimension mismatch");
    assert_eq!(
        state.velocity.len(),
        params.len(),
        "optimizer state dimension mismatch"
    );
    for (i, g) in grads.iter().enumerate() {
        if !g.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite gradient at parameter {i} on step {}",
                state.steps
            )));
        }
        let v = momentum * state.velocity[i] + (g + weight_decay * params[i]);
        state.velocity[i] = v;
        params[i] -= lr * v;
    }
    state.steps += 1;
    Ok(())
}

/// Cosine decay across the main phase: full rate at `epoch` 0, approaching 0
/// at the end of the span.
pub fn cosine_lr(epoch: usize, total_main_epochs: usize, lr_max: f64) -> f64 {
    debug_assert!(epoch < total_main_epochs);
    let t = std::f64::consts::PI * epoch as f64 / total_main_epochs as f64;
    lr_max * 0.5 * (1.0 + t.cos())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Main,
}

/// One JSONL log line. Mask-side fields are null for warm-up (and ce_only)
/// epochs, where no masks exist; test fields are null without a test split.
///
/// `loss_cont` is the contrastive pair already multiplied by its weight, so
/// the five loss components sum to `loss_total` up to float reassociation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_sup: f64,
    pub loss_unsup: f64,
    pub loss_ood_margin: f64,
    pub loss_id_margin: f64,
    pub loss_cont: f64,
    pub eta_id: f64,
    pub eta_ood: f64,
    pub tau_id: Option<f64>,
    pub tau_ood: Option<f64>,
    pub mean_w_id: Option<f64>,
    pub mean_w_ood: Option<f64>,
    pub test_acc: Option<f64>,
    pub test_ece: Option<f64>,
}

/// Ground-truth-sliced mask means for one main epoch: the epoch mean of
/// w_ood over records the generator replaced versus the rest. A training
/// diagnostic only; nothing in the loop reads it.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct MaskProbe {
    pub epoch: usize,
    pub w_ood_over_true_ood: Option<f64>,
    pub w_ood_over_true_id: Option<f64>,
    pub energy_over_true_ood: Option<f64>,
    pub energy_over_true_id: Option<f64>,
}

/// Seeded epoch batching: shuffle all indices, then cut into batches. The
/// composition is a pure function of (seed, epoch).
fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut r = rng::stream(seed, &[rng::SHUFFLE, epoch as u64]);
    idx.shuffle(&mut r);
    idx.chunks(batch_size).map(|c| c.to_vec()).collect()
}

fn finite_or_abort(value: f64, what: &str, epoch: usize, batch: usize) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::numeric(format!(
            "{what} became {value} in epoch {epoch}, batch {batch}"
        )))
    }
}

/// One epoch of plain supervised cross-entropy on raw inputs: no masks, no
/// augmentation, no mixup, rate parameters untouched. Used for the warm-up
/// phase and for the ce_only baseline.
pub fn warmup_epoch(
    model: &mut AeonModel,
    opt: &mut OptimizerState,
    estimators: &Estimators,
    data: &TaggedDataset,
    cfg: &TrainConfig,
    epoch: usize,
    lr: f64,
    phase: Phase,
) -> Result<EpochRecord> {
    let c = model.config.num_classes;
    let tape = Tape::new();
    let mut loss_sum = 0.0;
    for (b, batch) in epoch_batches(data.records.len(), cfg.batch_size, cfg.seed, epoch)
        .iter()
        .enumerate()
    {
        tape.reset();
        let bound = model.bind(&tape);
        let terms: Vec<_> = batch
            .iter()
            .map(|&i| {
                let rec = &data.records[i];
                let logits = bound.logits_on(&tape, &rec.features);
                cross_entropy_on(&tape, &logits, &one_hot(rec.noisy_label, c))
            })
            .collect();
        let root = tape.sum(&terms) * (1.0 / batch.len() as f64);
        finite_or_abort(root.value(), "warm-up loss", epoch, b)?;
        let grads: Vec<f64> = {
            let g = tape.backward(root);
            bound.param_vars().iter().map(|&v| g.wrt(v)).collect()
        };
        sgd_step(&mut model.params, &grads, opt, lr, cfg.momentum, cfg.weight_decay)?;
        loss_sum += root.value() * batch.len() as f64;
    }
    let mean = loss_sum / data.records.len() as f64;
    Ok(EpochRecord {
        epoch,
        phase,
        lr,
        loss_total: mean,
        loss_sup: mean,
        loss_unsup: 0.0,
        loss_ood_margin: 0.0,
        loss_id_margin: 0.0,
        loss_cont: 0.0,
        eta_id: estimators.id.estimate(),
        eta_ood: estimators.ood.estimate(),
        tau_id: None,
        tau_ood: None,
        mean_w_id: None,
        mean_w_ood: None,
        test_acc: None,
        test_ece: None,
    })
}

/// One main epoch: per batch, build pseudo-labels from the current model,
/// assemble the masked multi-term loss, and take one step on the model
/// parameters and one on the rate parameters.
pub fn train_epoch(
    model: &mut AeonModel,
    estimators: &mut Estimators,
    opt_theta: &mut OptimizerState,
    opt_gamma: &mut OptimizerState,
    data: &TaggedDataset,
    cfg: &TrainConfig,
    epoch: usize,
    lr: f64,
    lr_gamma: f64,
) -> Result<(EpochRecord, MaskProbe)> {
    let n_total = data.records.len() as f64;
    let tape = Tape::new();
    let mut sums = [0.0; 7];
    let mut tau_sums = [0.0; 2];
    let mut w_sums = [0.0; 2];
    let mut masked_n = 0.0;
    let mut probe_sum = [0.0; 2];
    let mut probe_energy = [0.0; 2];
    let mut probe_n = [0usize; 2];

    for (b, batch) in epoch_batches(data.records.len(), cfg.batch_size, cfg.seed, epoch)
        .iter()
        .enumerate()
    {
        let xs: Vec<&[f64]> = batch
            .iter()
            .map(|&i| data.records[i].features.as_slice())
            .collect();
        let labels: Vec<usize> = batch.iter().map(|&i| data.records[i].noisy_label).collect();
        let prepared = prepare_batch(
            &xs,
            &labels,
            batch,
            model.config.num_classes,
            &cfg.augment,
            &cfg.loss,
            cfg.seed,
            epoch as u64,
            b as u64,
        );
        let targets = pseudo_labels(model, &prepared, cfg.loss.sharpen_exponent)?;

        tape.reset();
        let bound = model.bind(&tape);
        let est_vars = estimators.bind(&tape);
        let loss = batch_loss(
            &tape,
            &bound,
            &est_vars,
            &prepared,
            &targets,
            &cfg.mask,
            &cfg.loss,
            None,
        )?;
        finite_or_abort(loss.breakdown.total, "batch loss", epoch, b)?;

        let (theta_grads, gamma_grads) = {
            let g = tape.backward(loss.root);
            let theta: Vec<f64> = bound.param_vars().iter().map(|&v| g.wrt(v)).collect();
            (theta, [g.wrt(est_vars.gamma_id), g.wrt(est_vars.gamma_ood)])
        };
        sgd_step(
            &mut model.params,
            &theta_grads,
            opt_theta,
            lr,
            cfg.momentum,
            cfg.weight_decay,
        )?;
        let mut gammas = [estimators.id.gamma, estimators.ood.gamma];
        // No decay and the constant rate: gamma is an estimate, not a weight.
        sgd_step(
            &mut gammas,
            &gamma_grads,
            opt_gamma,
            lr_gamma,
            cfg.momentum,
            0.0,
        )?;
        estimators.id.gamma = gammas[0];
        estimators.ood.gamma = gammas[1];

        let nb = batch.len() as f64;
        let bd = &loss.breakdown;
        for (s, v) in sums.iter_mut().zip([
            bd.total,
            bd.supervised,
            bd.unsupervised,
            bd.ood_margin,
            bd.id_margin,
            cfg.loss.contrastive_weight * (bd.contrastive_sup + bd.contrastive_uns),
            0.0,
        ]) {
            *s += v * nb;
        }
        // Pinned-open masks report no thresholds or weights; the log then
        // carries nulls, same as a warm-up epoch.
        if let (Some(tau_id), Some(tau_ood)) = (loss.masks.tau_id, loss.masks.tau_ood) {
            tau_sums[0] += tau_id * nb;
            tau_sums[1] += tau_ood * nb;
            w_sums[0] += loss.masks.w_id.iter().sum::<f64>();
            w_sums[1] += loss.masks.w_ood.iter().sum::<f64>();
            masked_n += nb;
            for (k, (&i, &w)) in batch.iter().zip(&loss.masks.w_ood).enumerate() {
                let slot = if data.records[i].tag == Tag::Ood { 0 } else { 1 };
                probe_sum[slot] += w;
                probe_energy[slot] += loss.masks.energies[k];
                probe_n[slot] += 1;
            }
        }
    }

    let record = EpochRecord {
        epoch,
        phase: Phase::Main,
        lr,
        loss_total: sums[0] / n_total,
        loss_sup: sums[1] / n_total,
        loss_unsup: sums[2] / n_total,
        loss_ood_margin: sums[3] / n_total,
        loss_id_margin: sums[4] / n_total,
        loss_cont: sums[5] / n_total,
        eta_id: estimators.id.estimate(),
        eta_ood: estimators.ood.estimate(),
        tau_id: (masked_n > 0.0).then(|| tau_sums[0] / masked_n),
        tau_ood: (masked_n > 0.0).then(|| tau_sums[1] / masked_n),
        mean_w_id: (masked_n > 0.0).then(|| w_sums[0] / masked_n),
        mean_w_ood: (masked_n > 0.0).then(|| w_sums[1] / masked_n),
        test_acc: None,
        test_ece: None,
    };
    let probe = MaskProbe {
        epoch,
        w_ood_over_true_ood: (probe_n[0] > 0).then(|| probe_sum[0] / probe_n[0] as f64),
        w_ood_over_true_id: (probe_n[1] > 0).then(|| probe_sum[1] / probe_n[1] as f64),
        energy_over_true_ood: (probe_n[0] > 0).then(|| probe_energy[0] / probe_n[0] as f64),
        energy_over_true_id: (probe_n[1] > 0).then(|| probe_energy[1] / probe_n[1] as f64),
    };
    Ok((record, probe))
}

/// Where a run writes its artifacts. Everything is optional; a fully
/// in-memory run passes `FitOptions::default()`.
#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    /// JSONL metrics log, one line per epoch.
    pub log_path: Option<PathBuf>,
    /// Checkpoint directory; written at start, at the configured interval,
    /// and at the end, so an aborted run always leaves its last good state.
    pub ckpt_dir: Option<PathBuf>,
}

#[derive(Debug)]
pub struct FitResult {
    pub model: AeonModel,
    pub estimators: Estimators,
    pub history: Vec<EpochRecord>,
    /// One entry per main epoch (empty for ce_only runs).
    pub mask_probes: Vec<MaskProbe>,
}

/// Write the three checkpoint files; the config is stored with its resolved
/// model dimensions so the checkpoint stands alone.
pub fn write_checkpoint(
    dir: &Path,
    model: &AeonModel,
    estimators: &Estimators,
    cfg: &TrainConfig,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    model.save(&dir.join(MODEL_FILE))?;
    estimators.save(&dir.join(ESTIMATORS_FILE))?;
    let resolved = TrainConfig {
        model: model.config.clone(),
        ..cfg.clone()
    };
    let text = serde_json::to_string_pretty(&resolved)?;
    fs::write(dir.join(TRAIN_CONFIG_FILE), text).map_err(|e| Error::io(dir, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<(AeonModel, Estimators, TrainConfig)> {
    let model = AeonModel::load(&dir.join(MODEL_FILE))?;
    let estimators = Estimators::load(&dir.join(ESTIMATORS_FILE))?;
    let path = dir.join(TRAIN_CONFIG_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let cfg: TrainConfig = serde_json::from_str(&text)?;
    Ok((model, estimators, cfg))
}

/// Hex digest identifying a training configuration in reports. Hashes the
/// compact JSON form, so it is independent of on-disk formatting.
pub fn config_digest(cfg: &TrainConfig) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = serde_json::to_vec(cfg)?;
    let hash = Sha256::digest(&bytes);
    let mut out = String::with_capacity(64);
    for b in hash {
        out.push_str(&format!("{b:02x}"));
    }
    Ok(out)
}

/// Run the full schedule. Deterministic in `(config, dataset)`; a non-finite
/// loss or gradient aborts the run with the last checkpoint still on disk.
pub fn fit(
    cfg: &TrainConfig,
    data: &TaggedDataset,
    test: Option<&TaggedDataset>,
    opts: &FitOptions,
) -> Result<FitResult> {
    cfg.validate()?;
    if data.records.is_empty() {
        return Err(Error::data("training dataset is empty"));
    }
    let model_cfg = cfg.resolved_model(data)?;
    let mut model = AeonModel::init(&model_cfg, cfg.seed)?;
    let mut estimators = Estimators::new(cfg.gamma_init, cfg.t_id, cfg.t_ood);
    if let Some(g) = cfg.gamma_init_ood {
        estimators.ood.gamma = g;
    }
    let mut opt_theta = OptimizerState::new(model.params.len());
    let mut opt_gamma = OptimizerState::new(2);

    let mut log = match &opts.log_path {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            Some(fs::File::create(p).map_err(|e| Error::io(p, e))?)
        }
        None => None,
    };
    if let Some(dir) = &opts.ckpt_dir {
        write_checkpoint(dir, &model, &estimators, cfg)?;
    }

    let main_span = cfg.total_epochs - cfg.warmup_epochs;
    let mut history = Vec::with_capacity(cfg.total_epochs);
    let mut mask_probes = Vec::new();
    for epoch in 0..cfg.total_epochs {
        let warmup = epoch < cfg.warmup_epochs;
        let phase = if warmup { Phase::Warmup } else { Phase::Main };
        let (lr, lr_gamma) = if warmup || !cfg.cosine_decay {
            (cfg.lr_theta, cfg.lr_gamma)
        } else {
            // One schedule for both parameter groups: the rate estimate
            // settles while the loss surface is still soft and freezes as
            // the step sizes anneal, instead of drifting across a landscape
            // the model has already left behind.
            let main_epoch = epoch - cfg.warmup_epochs;
            (
                cosine_lr(main_epoch, main_span, cfg.lr_theta),
                cosine_lr(main_epoch, main_span, cfg.lr_gamma),
            )
        };

        let mut record = if warmup || cfg.ce_only {
            warmup_epoch(&mut model, &mut opt_theta, &estimators, data, cfg, epoch, lr, phase)?
        } else {
            let (record, probe) = train_epoch(
                &mut model,
                &mut estimators,
                &mut opt_theta,
                &mut opt_gamma,
                data,
                cfg,
                epoch,
                lr,
                lr_gamma,
            )?;
            mask_probes.push(probe);
            record
        };
        if let Some(t) = test {
            let (acc, ece) = metrics::test_metrics(&model, t, metrics::DEFAULT_ECE_BINS)?;
            record.test_acc = Some(acc);
            record.test_ece = Some(ece);
        }
        if let Some(f) = &mut log {
            let line = serde_json::to_string(&record)?;
            writeln!(f, "{line}").map_err(|e| {
                Error::io(opts.log_path.clone().expect("log path present"), e)
            })?;
        }
        history.push(record);

        if let Some(dir) = &opts.ckpt_dir {
            let due = cfg.ckpt_every > 0 && (epoch + 1) % cfg.ckpt_every == 0;
            if due || epoch + 1 == cfg.total_epochs {
                write_checkpoint(dir, &model, &estimators, cfg)?;
            }
        }
    }

    Ok(FitResult {
        model,
        estimators,
        history,
        mask_probes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmark::{synthesize, SynthConfig};

    fn toy_data(seed: u64) -> (TaggedDataset, TaggedDataset) {
        let cfg = SynthConfig {
            num_classes: 3,
            dims: 6,
            train_per_class: 30,
            test_per_class: 10,
            class_separation: 4.0,
            r_id: 0.2,
            r_ood: 0.2,
            pool_clusters: 2,
            seed,
            ..SynthConfig::default()
        };
        synthesize(&cfg).unwrap()
    }

    fn toy_config() -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                hidden_dims: vec![8],
                feature_dim: 6,
                projection_hidden: 6,
                projection_dim: 8,
                ..ModelConfig::default()
            },
            batch_size: 16,
            warmup_epochs: 2,
            total_epochs: 5,
            lr_theta: 0.02,
            lr_gamma: 0.02,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn sgd_vanilla_step() {
        let mut p = [1.0];
        let mut s = OptimizerState::new(1);
        sgd_step(&mut p, &[0.5], &mut s, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(p[0], 0.95);
        assert_eq!(s.steps(), 1);
    }

    #[test]
    fn sgd_two_momentum_steps_displace_by_2_9_g() {
        // v1 = g, v2 = 0.9 g + g = 1.9 g: total displacement 2.9 g.
        let mut p = [0.0];
        let mut s = OptimizerState::new(1);
        sgd_step(&mut p, &[1.0], &mut s, 1.0, 0.9, 0.0).unwrap();
        sgd_step(&mut p, &[1.0], &mut s, 1.0, 0.9, 0.0).unwrap();
        assert_eq!(p[0], -2.9);
    }

    #[test]
    fn sgd_zero_gradient_cases() {
        // No decay: a zero gradient is a fixed point, as the rate parameters
        // rely on.
        let mut p = [3.0];
        let mut s = OptimizerState::new(1);
        for _ in 0..5 {
            sgd_step(&mut p, &[0.0], &mut s, 0.5, 0.9, 0.0).unwrap();
        }
        assert_eq!(p[0], 3.0);
        // With decay the parameter shrinks toward zero.
        sgd_step(&mut p, &[0.0], &mut s, 0.5, 0.0, 0.1).unwrap();
        assert!(p[0] < 3.0);
        // Non-finite gradients abort before touching anything.
        assert!(sgd_step(&mut p, &[f64::NAN], &mut s, 0.5, 0.0, 0.0).is_err());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 100, 0.1), 0.1);
        let mid = cosine_lr(50, 100, 0.1);
        assert!((mid - 0.05).abs() < 1e-15);
        let tail = cosine_lr(999, 1000, 0.1);
        assert!(tail > 0.0 && tail < 1e-5);
    }

    #[test]
    fn warmup_descends_and_keeps_gamma_frozen() {
        let (train, _) = toy_data(21);
        let cfg = toy_config();
        let model_cfg = cfg.resolved_model(&train).unwrap();
        let mut model = AeonModel::init(&model_cfg, cfg.seed).unwrap();
        let mut opt = OptimizerState::new(model.params.len());
        let est = Estimators::new(cfg.gamma_init, cfg.t_id, cfg.t_ood);
        let first = warmup_epoch(
            &mut model, &mut opt, &est, &train, &cfg, 0, cfg.lr_theta, Phase::Warmup,
        )
        .unwrap();
        let mut last = first.clone();
        for e in 1..3 {
            last = warmup_epoch(
                &mut model, &mut opt, &est, &train, &cfg, e, cfg.lr_theta, Phase::Warmup,
            )
            .unwrap();
        }
        assert!(last.loss_total < first.loss_total);
        assert_eq!(est.id.gamma, 0.0);
        assert!(first.tau_id.is_none() && first.mean_w_ood.is_none());
        assert_eq!(first.loss_total, first.loss_sup);
    }

    #[test]
    fn warmup_epoch_is_deterministic() {
        let (train, _) = toy_data(22);
        let cfg = toy_config();
        let model_cfg = cfg.resolved_model(&train).unwrap();
        let run = || {
            let mut model = AeonModel::init(&model_cfg, cfg.seed).unwrap();
            let mut opt = OptimizerState::new(model.params.len());
            let est = Estimators::new(0.0, 10.0, 10.0);
            let rec = warmup_epoch(
                &mut model, &mut opt, &est, &train, &cfg, 0, 0.05, Phase::Warmup,
            )
            .unwrap();
            (rec, model.params)
        };
        let (rec_a, params_a) = run();
        let (rec_b, params_b) = run();
        assert_eq!(rec_a, rec_b);
        assert_eq!(params_a, params_b);
    }

    #[test]
    fn forced_open_unweighted_epoch_matches_plain_warmup() {
        // Masks pinned open, no contrastive term, no mixup, zero-noise
        // augmentation: the main epoch must collapse to the warm-up epoch.
        let (train, _) = toy_data(23);
        let mut cfg = toy_config();
        cfg.mask.force_open = true;
        cfg.loss.contrastive_weight = 0.0;
        cfg.loss.use_mixup = false;
        cfg.augment.weak_std = 0.0;
        cfg.augment.strong_std = 0.0;
        cfg.augment.strong_dropout = 0.0;
        let model_cfg = cfg.resolved_model(&train).unwrap();

        let mut model_a = AeonModel::init(&model_cfg, cfg.seed).unwrap();
        let mut opt_a = OptimizerState::new(model_a.params.len());
        let est_a = Estimators::new(0.0, 10.0, 10.0);

        let mut model_b = model_a.clone();
        let mut opt_b = OptimizerState::new(model_b.params.len());
        let mut est_b = Estimators::new(0.0, 10.0, 10.0);
        let mut opt_b_gamma = OptimizerState::new(2);

        for epoch in 0..3 {
            let plain = warmup_epoch(
                &mut model_a, &mut opt_a, &est_a, &train, &cfg, epoch, 0.05, Phase::Warmup,
            )
            .unwrap();
            let (masked, _) = train_epoch(
                &mut model_b,
                &mut est_b,
                &mut opt_b,
                &mut opt_b_gamma,
                &train,
                &cfg,
                epoch,
                0.05,
                0.01,
            )
            .unwrap();
            assert!(
                (plain.loss_total - masked.loss_total).abs() < 1e-9,
                "epoch {epoch}: {} vs {}",
                plain.loss_total,
                masked.loss_total
            );
        }
        for (a, b) in model_a.params.iter().zip(&model_b.params) {
            assert!((a - b).abs() < 1e-9);
        }
        // Pinned-open masks leave the rate parameters without gradient.
        assert_eq!(est_b.id.gamma, 0.0);
        assert_eq!(est_b.ood.gamma, 0.0);
    }

    #[test]
    fn fit_is_deterministic_and_logs_every_epoch() {
        let (train, test) = toy_data(24);
        let cfg = toy_config();
        let dir = tempfile::tempdir().unwrap();
        let opts = FitOptions {
            log_path: Some(dir.path().join("log.jsonl")),
            ckpt_dir: Some(dir.path().join("ckpt")),
        };
        let a = fit(&cfg, &train, Some(&test), &opts).unwrap();
        let b = fit(&cfg, &train, Some(&test), &FitOptions::default()).unwrap();
        assert_eq!(a.model.params, b.model.params);
        assert_eq!(a.estimators.id.gamma, b.estimators.id.gamma);
        assert_eq!(a.history.len(), cfg.total_epochs);
        assert_eq!(a.mask_probes.len(), cfg.total_epochs - cfg.warmup_epochs);

        let log = std::fs::read_to_string(dir.path().join("log.jsonl")).unwrap();
        let lines: Vec<&str> = log.lines().collect();
        assert_eq!(lines.len(), cfg.total_epochs);
        let first: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(first["phase"], "warmup");
        assert_eq!(first["tau_id"], serde_json::Value::Null);
        assert!(first["test_acc"].is_number());
        let last: serde_json::Value = serde_json::from_str(lines[4]).unwrap();
        assert_eq!(last["phase"], "main");
        assert!(last["tau_ood"].is_number());
        let eta = last["eta_id"].as_f64().unwrap();
        assert!(eta > 0.0 && eta < 1.0);

        // The checkpoint holds exactly the returned artifacts.
        let (model, est, stored) = load_checkpoint(&dir.path().join("ckpt")).unwrap();
        assert_eq!(model.params, a.model.params);
        assert_eq!(est.id.gamma, a.estimators.id.gamma);
        assert_eq!(est.ood.temperature, 10.0);
        assert_eq!(stored.model.input_dim, 6);
        assert_eq!(stored.total_epochs, cfg.total_epochs);
    }

    #[test]
    fn warmup_only_budget_is_allowed_and_stops_there() {
        let (train, _) = toy_data(25);
        let mut cfg = toy_config();
        cfg.warmup_epochs = 3;
        cfg.total_epochs = 3;
        let res = fit(&cfg, &train, None, &FitOptions::default()).unwrap();
        assert_eq!(res.history.len(), 3);
        assert!(res.history.iter().all(|r| r.phase == Phase::Warmup));
        assert!(res.mask_probes.is_empty());
        // Same prefix as a longer run: the warm-up phase does not depend on
        // what follows it.
        let mut longer = cfg.clone();
        longer.total_epochs = 4;
        let more = fit(&longer, &train, None, &FitOptions::default()).unwrap();
        for (a, b) in res.history.iter().zip(&more.history) {
            assert_eq!(a.loss_total, b.loss_total);
        }
    }

    #[test]
    fn ce_only_runs_plain_epochs_for_the_whole_budget() {
        let (train, _) = toy_data(26);
        let mut cfg = toy_config();
        cfg.ce_only = true;
        let res = fit(&cfg, &train, None, &FitOptions::default()).unwrap();
        assert_eq!(res.history.len(), cfg.total_epochs);
        assert!(res.mask_probes.is_empty());
        assert!(res.history.iter().all(|r| r.tau_id.is_none()));
        // Gamma never moves without the mask graph.
        assert_eq!(res.estimators.id.gamma, cfg.gamma_init);
        // Main-phase records still follow the cosine schedule.
        assert!(res.history[4].lr < res.history[2].lr);
    }

    #[test]
    fn diverging_run_aborts_with_checkpoint_retained() {
        let (train, _) = toy_data(27);
        let mut cfg = toy_config();
        cfg.lr_theta = 1e25;
        cfg.total_epochs = 8;
        cfg.warmup_epochs = 1;
        let dir = tempfile::tempdir().unwrap();
        let opts = FitOptions {
            log_path: None,
            ckpt_dir: Some(dir.path().join("ckpt")),
        };
        let err = fit(&cfg, &train, None, &opts).unwrap_err();
        assert_eq!(err.exit_code(), 4, "unexpected error: {err}");
        // The checkpoint written before the blow-up still loads.
        let (model, est, _) = load_checkpoint(&dir.path().join("ckpt")).unwrap();
        assert!(model.params.iter().all(|p| p.is_finite()));
        assert_eq!(est.id.temperature, 10.0);
    }

    #[test]
    fn config_validation_rejects_bad_budgets_and_rates() {
        let ok = toy_config();
        assert!(ok.validate().is_ok());
        let mut bad = ok.clone();
        bad.warmup_epochs = 6;
        assert!(bad.validate().is_err());
        let mut bad = ok.clone();
        bad.momentum = 1.0;
        assert!(bad.validate().is_err());
        let mut bad = ok.clone();
        bad.lr_theta = 0.0;
        assert!(bad.validate().is_err());
        let mut bad = ok.clone();
        bad.t_id = -1.0;
        assert!(bad.validate().is_err());
        let mut bad = ok;
        bad.batch_size = 0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn resolved_model_fills_dims_and_rejects_mismatches() {
        let (train, _) = toy_data(28);
        let cfg = toy_config();
        let m = cfg.resolved_model(&train).unwrap();
        assert_eq!(m.input_dim, 6);
        assert_eq!(m.num_classes, 3);
        let mut fixed = cfg.clone();
        fixed.model.input_dim = 4;
        assert!(fixed.resolved_model(&train).is_err());
        let mut narrow = cfg;
        narrow.model.num_classes = 2;
        assert!(narrow.resolved_model(&train).is_err());
    }
}
