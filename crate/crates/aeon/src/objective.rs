//! The training objective: a supervised core, a pseudo-label branch for
//! samples whose label looks wrong, energy margins separating
//! in-distribution from out-of-distribution inputs, and a contrastive term,
//! all blended per sample by the soft masks from [`crate::noise`].
//!
//! For a batch of N samples the total is
//!
//! ```text
//! total = (1/N) * sum_i [ w_ood_i * (w_id_i * Ls_i
//!                                    + (1 - w_id_i) * Lu_i
//!                                    + max(0, E_i - m_id)^2)
//!                         + (1 - w_ood_i) * max(0, m_ood - E_i)^2
//!                         + lambda * (Lcont_sup_i + Lcont_uns_i) ]
//! ```
//!
//! where `Ls` is cross-entropy against the given label (on a mixup pair when
//! enabled), `Lu` is cross-entropy against a sharpened pseudo-label, `E` is
//! the energy score, and the contrastive pair compares projections of a weak
//! view of each sample against strong views of the whole batch.
//!
//! Reading the combination: a sample the masks trust (`w_ood`, `w_id` near 1)
//! trains on its own label and is pushed below the in-distribution energy
//! ceiling; a sample flagged as mislabeled but in-distribution trains on its
//! pseudo-label instead; a sample flagged as foreign is pushed above the
//! energy floor and contributes nothing else. The contrastive term applies to
//! every sample regardless of the masks.
//!
//! Two target quantities are deliberately gradient-free: pseudo-labels (a
//! target, not a prediction) and the batch score statistics behind the
//! thresholds. [`batch_loss`] therefore takes both as plain data, and the
//! finite-difference checks pin them while perturbing parameters.
//!
//! Randomness (views, mixup pairing) is drawn ahead of time into a
//! [`PreparedBatch`] keyed by seed, epoch, and dataset indices, so a batch's
//! loss is a pure function of parameters and prepared data.

use rand::prelude::*;
use rand_distr::{Beta, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{AeonModel, BoundModel};
use crate::noise::{
    adaptive_threshold_on, energy_score_on, soft_mask_on, BatchStats, EstimatorVars, MaskConfig,
};
use crate::rng;
use crate::special;

/// Feature-space stand-ins for image augmentation: weak views add small
/// Gaussian jitter, strong views add larger jitter plus coordinate dropout.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Noise scale of weak views, relative to unit-variance features.
    pub weak_std: f64,
    /// Noise scale of strong views.
    pub strong_std: f64,
    /// Probability of zeroing each coordinate in a strong view.
    pub strong_dropout: f64,
    /// Number of weak views averaged into a pseudo-label.
    pub weak_views: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            weak_std: 0.05,
            strong_std: 0.2,
            strong_dropout: 0.2,
            weak_views: 2,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.weak_std.is_finite() || !self.strong_std.is_finite() || self.weak_std < 0.0 {
            return Err(Error::config("augmentation noise scales must be finite and nonnegative"));
        }
        if self.weak_std > self.strong_std {
            return Err(Error::config(
                "weak_std must not exceed strong_std; the strong view is the harsher one",
            ));
        }
        if !(self.strong_dropout >= 0.0 && self.strong_dropout < 1.0) {
            return Err(Error::config("strong_dropout must lie in [0, 1)"));
        }
        if self.weak_views == 0 {
            return Err(Error::config("weak_views must be at least 1"));
        }
        Ok(())
    }
}

/// Weights and shape parameters of the loss components.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Exponent sharpening the averaged pseudo-label distribution.
    pub sharpen_exponent: f64,
    /// Temperature dividing contrastive similarities.
    pub contrastive_temp: f64,
    /// Weight of the contrastive pair in the total. Zero skips the whole
    /// contrastive graph, which dominates the per-batch node count.
    pub contrastive_weight: f64,
    /// Beta(alpha, alpha) parameter for mixup coefficients.
    pub mixup_alpha: f64,
    /// Mix supervised pairs; the mask scores always use the unmixed loss.
    pub use_mixup: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            sharpen_exponent: 2.0,
            contrastive_temp: 0.07,
            contrastive_weight: 0.5,
            mixup_alpha: 0.2,
            use_mixup: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sharpen_exponent >= 1.0) {
            return Err(Error::config("sharpen_exponent must be at least 1"));
        }
        if !(self.contrastive_temp > 0.0) {
            return Err(Error::config("contrastive_temp must be positive"));
        }
        if !(self.contrastive_weight >= 0.0) {
            return Err(Error::config("contrastive_weight must be nonnegative"));
        }
        if !(self.mixup_alpha > 0.0) {
            return Err(Error::config("mixup_alpha must be positive"));
        }
        Ok(())
    }
}

/// One sample with all randomness already drawn.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub x: Vec<f64>,
    pub label: usize,
    /// Weak views averaged into the pseudo-label target.
    pub target_views: Vec<Vec<f64>>,
    /// Weak view anchoring the sample's contrastive row.
    pub weak_anchor: Vec<f64>,
    /// Strong view other samples compare against.
    pub strong: Vec<f64>,
    /// Batch-local index of the mixup partner (self when mixup is off).
    pub mix_partner: usize,
    /// Mixing coefficient toward self (1.0 when mixup is off).
    pub mix_lambda: f64,
}

/// A batch ready for the loss: inputs, labels, views, and mixup pairing.
#[derive(Clone, Debug)]
pub struct PreparedBatch {
    pub samples: Vec<PreparedSample>,
    pub num_classes: usize,
}

/// Gradient-free pseudo-label targets, aligned with a [`PreparedBatch`].
#[derive(Clone, Debug, Default)]
pub struct BatchTargets {
    pub q: Vec<Vec<f64>>,
}

/// Batch score statistics captured from one evaluation so a re-evaluation
/// (finite differences, oracles) can hold them fixed, matching their
/// no-gradient contract.
#[derive(Clone, Copy, Debug)]
pub struct PinnedStats {
    pub loss_stats: BatchStats,
    pub energy_stats: BatchStats,
}

/// Per-component means of one batch loss. `supervised` through `ood_margin`
/// are the mask-weighted means as they enter the total; the contrastive pair
/// is unweighted, so
/// `total = supervised + unsupervised + id_margin + ood_margin
///          + contrastive_weight * (contrastive_sup + contrastive_uns)`
/// up to float reassociation.
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct BatchLossBreakdown {
    pub total: f64,
    pub supervised: f64,
    pub unsupervised: f64,
    pub id_margin: f64,
    pub ood_margin: f64,
    pub contrastive_sup: f64,
    pub contrastive_uns: f64,
    pub mean_w_id: f64,
    pub mean_w_ood: f64,
}

/// Mask-side values of one batch loss, for logging and diagnostics.
#[derive(Clone, Debug)]
pub struct MaskDiagnostics {
    pub eta_id: f64,
    pub eta_ood: f64,
    /// None when the masks were pinned open.
    pub tau_id: Option<f64>,
    pub tau_ood: Option<f64>,
    pub w_id: Vec<f64>,
    pub w_ood: Vec<f64>,
    /// Per-sample energy scores in batch order; empty when the masks were
    /// pinned open.
    pub energies: Vec<f64>,
    pub stats: Option<PinnedStats>,
}

/// The assembled batch loss: the tape root to differentiate plus plain-value
/// summaries.
pub struct BatchLoss<'t> {
    pub root: Var<'t>,
    pub breakdown: BatchLossBreakdown,
    pub masks: MaskDiagnostics,
}

/// One-hot label vector.
pub fn one_hot(label: usize, num_classes: usize) -> Vec<f64> {
    debug_assert!(label < num_classes);
    let mut v = vec![0.0; num_classes];
    v[label] = 1.0;
    v
}

/// Cross-entropy of a logit vector against a probability target:
/// `logsumexp(z) - sum_k target_k * z_k`. Handles one-hot and soft targets
/// alike, with no intermediate softmax to underflow.
pub fn cross_entropy(logits: &[f64], target: &[f64]) -> f64 {
    debug_assert_eq!(logits.len(), target.len());
    let dot: f64 = logits.iter().zip(target).map(|(z, t)| t * z).sum();
    special::logsumexp(logits) - dot
}

/// Tape version of [`cross_entropy`].
pub fn cross_entropy_on<'t>(tape: &'t Tape, logits: &[Var<'t>], target: &[f64]) -> Var<'t> {
    debug_assert_eq!(logits.len(), target.len());
    tape.logsumexp(logits) - tape.dot_const(logits, target)
}

/// Squared hinge pair for one energy score: the first term punishes energy
/// above the in-distribution ceiling, the second punishes energy below the
/// out-of-distribution floor.
pub fn energy_margins(energy: f64, margin_id: f64, margin_ood: f64) -> (f64, f64) {
    let id = (energy - margin_id).max(0.0);
    let ood = (margin_ood - energy).max(0.0);
    (id * id, ood * ood)
}

/// Weak view: the input plus per-coordinate Gaussian noise.
pub fn weak_view<R: Rng>(x: &[f64], std: f64, rng: &mut R) -> Vec<f64> {
    x.iter()
        .map(|&v| v + std * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Strong view: larger Gaussian noise, then coordinate dropout. All noise is
/// drawn before any dropout decision so the two stages cannot interleave
/// differently across platforms.
pub fn strong_view<R: Rng>(x: &[f64], std: f64, dropout: f64, rng: &mut R) -> Vec<f64> {
    let mut out: Vec<f64> = x
        .iter()
        .map(|&v| v + std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    for v in &mut out {
        if rng.gen::<f64>() < dropout {
            *v = 0.0;
        }
    }
    out
}

/// One mixup coefficient drawn from Beta(alpha, alpha).
pub fn mixup_lambda<R: Rng>(alpha: f64, rng: &mut R) -> f64 {
    Beta::new(alpha, alpha)
        .expect("mixup_alpha validated positive")
        .sample(rng)
}

/// Convex combination `lam * a + (1 - lam) * b`.
pub fn mix(a: &[f64], b: &[f64], lam: f64) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&av, &bv)| lam * av + (1.0 - lam) * bv)
        .collect()
}

/// Sharpen a probability vector: elementwise power, then renormalize.
pub fn sharpen(probs: &[f64], exponent: f64) -> Vec<f64> {
    let powed: Vec<f64> = probs.iter().map(|p| p.powf(exponent)).collect();
    let sum: f64 = powed.iter().sum();
    debug_assert!(sum > 0.0, "sharpen needs at least one positive entry");
    powed.iter().map(|p| p / sum).collect()
}

/// Draw all views and mixup pairings for one batch.
///
/// `xs`, `labels`, and `dataset_indices` run over the batch; the dataset
/// indices key the per-sample random streams so a sample's views depend only
/// on (seed, epoch, its dataset position), while the mixup pairing is drawn
/// per batch via `batch_ordinal`.
#[allow(clippy::too_many_arguments)]
pub fn prepare_batch(
    xs: &[&[f64]],
    labels: &[usize],
    dataset_indices: &[usize],
    num_classes: usize,
    aug: &AugmentConfig,
    loss: &LossConfig,
    seed: u64,
    epoch: u64,
    batch_ordinal: u64,
) -> PreparedBatch {
    assert_eq!(xs.len(), labels.len());
    assert_eq!(xs.len(), dataset_indices.len());
    let n = xs.len();

    let (partners, lambdas) = if loss.use_mixup && n > 0 {
        let mut r = rng::stream(seed, &[rng::MIXUP, epoch, batch_ordinal]);
        let mut partners: Vec<usize> = (0..n).collect();
        partners.shuffle(&mut r);
        let lambdas: Vec<f64> = (0..n).map(|_| mixup_lambda(loss.mixup_alpha, &mut r)).collect();
        (partners, lambdas)
    } else {
        ((0..n).collect(), vec![1.0; n])
    };

    let samples = (0..n)
        .map(|i| {
            debug_assert!(labels[i] < num_classes);
            let di = dataset_indices[i] as u64;
            let target_views = (0..aug.weak_views)
                .map(|v| {
                    let mut r = rng::stream(seed, &[rng::WEAK_VIEW, epoch, di, v as u64]);
                    weak_view(xs[i], aug.weak_std, &mut r)
                })
                .collect();
            // The contrastive anchor is one more weak draw, stream-separated
            // from the target views by its view index.
            let mut r = rng::stream(seed, &[rng::WEAK_VIEW, epoch, di, aug.weak_views as u64]);
            let weak_anchor = weak_view(xs[i], aug.weak_std, &mut r);
            let mut r = rng::stream(seed, &[rng::STRONG_VIEW, epoch, di]);
            let strong = strong_view(xs[i], aug.strong_std, aug.strong_dropout, &mut r);
            PreparedSample {
                x: xs[i].to_vec(),
                label: labels[i],
                target_views,
                weak_anchor,
                strong,
                mix_partner: partners[i],
                mix_lambda: lambdas[i],
            }
        })
        .collect();

    PreparedBatch {
        samples,
        num_classes,
    }
}

/// Pseudo-label targets: per sample, the softmax averaged over its weak
/// target views, sharpened. Plain forward passes only; these are targets and
/// receive no gradient. A non-finite prediction means the model has already
/// diverged; that comes back as a numeric error rather than a poisoned
/// target.
pub fn pseudo_labels(
    model: &AeonModel,
    batch: &PreparedBatch,
    exponent: f64,
) -> Result<BatchTargets> {
    let c = batch.num_classes;
    let mut q = Vec::with_capacity(batch.samples.len());
    for s in &batch.samples {
        debug_assert!(!s.target_views.is_empty());
        let mut mean = vec![0.0; c];
        for view in &s.target_views {
            let p = special::softmax(&model.logits(view));
            for (m, pk) in mean.iter_mut().zip(&p) {
                *m += pk;
            }
        }
        let inv = 1.0 / s.target_views.len() as f64;
        for m in &mut mean {
            *m *= inv;
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::numeric(
                "pseudo-label forward produced non-finite probabilities",
            ));
        }
        q.push(sharpen(&mean, exponent));
    }
    Ok(BatchTargets { q })
}

/// Similarity matrix from already-computed unit-norm projections:
/// `S[i][j] = dot(weak[i], strong[j]) / temp`.
pub fn similarity_from_projections(
    weak: &[Vec<f64>],
    strong: &[Vec<f64>],
    temp: f64,
) -> Vec<Vec<f64>> {
    debug_assert!(temp > 0.0);
    let inv_t = 1.0 / temp;
    weak.iter()
        .map(|gw| {
            strong
                .iter()
                .map(|gs| gw.iter().zip(gs).map(|(a, b)| a * b).sum::<f64>() * inv_t)
                .collect()
        })
        .collect()
}

/// Plain-value similarity matrix of a prepared batch under `model`.
pub fn similarity_matrix(model: &AeonModel, batch: &PreparedBatch, temp: f64) -> Vec<Vec<f64>> {
    let weak: Vec<Vec<f64>> = batch
        .samples
        .iter()
        .map(|s| model.projection(&s.weak_anchor))
        .collect();
    let strong: Vec<Vec<f64>> = batch
        .samples
        .iter()
        .map(|s| model.projection(&s.strong))
        .collect();
    similarity_from_projections(&weak, &strong, temp)
}

/// Per-sample contrastive losses from a similarity matrix. For each row,
/// `sup` pulls the sample toward every batch member sharing its (noisy)
/// label, `uns` toward its own strong view only:
/// `sup_i = lse(row) - lse(row restricted to same-label columns)`,
/// `uns_i = lse(row) - S[i][i]`.
pub fn contrastive_losses(s: &[Vec<f64>], labels: &[usize]) -> Vec<(f64, f64)> {
    let n = s.len();
    debug_assert_eq!(labels.len(), n);
    (0..n)
        .map(|i| {
            let row = &s[i];
            debug_assert_eq!(row.len(), n);
            let all = special::logsumexp(row);
            let pos: Vec<f64> = (0..n)
                .filter(|&j| labels[j] == labels[i])
                .map(|j| row[j])
                .collect();
            (all - special::logsumexp(&pos), all - row[i])
        })
        .collect()
}

/// Build the full batch loss on `tape` and return its root plus summaries.
///
/// `targets` must align with `batch` unless the masks are pinned open, in
/// which case the pseudo-label branch is skipped and `targets` may be empty.
/// `pinned` replaces the batch score statistics for re-evaluations; pass
/// `None` in training.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss<'t>(
    tape: &'t Tape,
    model: &BoundModel<'t>,
    est: &EstimatorVars<'t>,
    batch: &PreparedBatch,
    targets: &BatchTargets,
    mask_cfg: &MaskConfig,
    loss_cfg: &LossConfig,
    pinned: Option<&PinnedStats>,
) -> Result<BatchLoss<'t>> {
    let n = batch.samples.len();
    if n == 0 {
        return Err(Error::data("batch_loss needs a non-empty batch"));
    }
    let c = batch.num_classes;
    let forced = mask_cfg.force_open;
    let lambda = loss_cfg.contrastive_weight;
    if !forced && targets.q.len() != n {
        return Err(Error::data(format!(
            "{} pseudo-label targets for a batch of {n}",
            targets.q.len()
        )));
    }

    // Raw forward pass: one set of logits per sample feeding the mask
    // scores, the energies, and the pseudo-label term. Skipped only when the
    // masks are pinned open and mixup supplies the supervised logits.
    let need_raw = !forced || !loss_cfg.use_mixup;
    let mut raw_logits: Vec<Vec<Var<'t>>> = Vec::new();
    let mut raw_ce: Vec<Var<'t>> = Vec::new();
    if need_raw {
        let mut hot = vec![0.0; c];
        for s in &batch.samples {
            let h = model.features_on(tape, &s.x);
            let z = model.logits_from_features_on(tape, &h);
            hot.fill(0.0);
            hot[s.label] = 1.0;
            raw_ce.push(cross_entropy_on(tape, &z, &hot));
            raw_logits.push(z);
        }
    }

    // Scores, thresholds, masks.
    let mut energies: Vec<Var<'t>> = Vec::new();
    let mut w_id: Vec<Var<'t>> = Vec::new();
    let mut w_ood: Vec<Var<'t>> = Vec::new();
    let mut tau_id_val = None;
    let mut tau_ood_val = None;
    let mut diag_stats = None;
    if !forced {
        for z in &raw_logits {
            energies.push(energy_score_on(tape, z, mask_cfg.energy_temp));
        }
        let stats = match pinned {
            Some(p) => *p,
            None => {
                let ce_vals: Vec<f64> = raw_ce.iter().map(|v| v.value()).collect();
                let en_vals: Vec<f64> = energies.iter().map(|v| v.value()).collect();
                PinnedStats {
                    loss_stats: BatchStats::from_scores(&ce_vals)?,
                    energy_stats: BatchStats::from_scores(&en_vals)?,
                }
            }
        };
        let tau_id = adaptive_threshold_on(est.eta_id, &stats.loss_stats, mask_cfg.eta_clamp)?;
        let tau_ood = adaptive_threshold_on(est.eta_ood, &stats.energy_stats, mask_cfg.eta_clamp)?;
        for i in 0..n {
            w_id.push(soft_mask_on(raw_ce[i], tau_id, mask_cfg.beta_id));
            w_ood.push(soft_mask_on(energies[i], tau_ood, mask_cfg.beta_ood));
        }
        tau_id_val = Some(tau_id.value());
        tau_ood_val = Some(tau_ood.value());
        diag_stats = Some(stats);
    }

    // Supervised term, on mixup pairs when enabled. The pairing mixes inputs
    // before the forward pass and labels after, so a same-class pair still
    // produces a valid one-hot target.
    let sup: Vec<Var<'t>> = if loss_cfg.use_mixup {
        let mut ymix = vec![0.0; c];
        batch
            .samples
            .iter()
            .map(|s| {
                let p = &batch.samples[s.mix_partner];
                let xm = mix(&s.x, &p.x, s.mix_lambda);
                ymix.fill(0.0);
                ymix[s.label] += s.mix_lambda;
                ymix[p.label] += 1.0 - s.mix_lambda;
                let h = model.features_on(tape, &xm);
                let z = model.logits_from_features_on(tape, &h);
                cross_entropy_on(tape, &z, &ymix)
            })
            .collect()
    } else {
        raw_ce.clone()
    };

    // Pseudo-label term against the same raw logits the masks score.
    let mut unsup: Vec<Var<'t>> = Vec::new();
    if !forced {
        for (z, q) in raw_logits.iter().zip(&targets.q) {
            debug_assert_eq!(q.len(), c);
            unsup.push(cross_entropy_on(tape, z, q));
        }
    }

    // Energy margins.
    let mut hinge_id: Vec<Var<'t>> = Vec::new();
    let mut hinge_ood: Vec<Var<'t>> = Vec::new();
    if !forced {
        for e in &energies {
            hinge_id.push((*e - mask_cfg.margin_id).relu().powi(2));
            hinge_ood.push((mask_cfg.margin_ood - *e).relu().powi(2));
        }
    }

    // Contrastive pair. The N x N similarity block dominates the tape, so a
    // zero weight skips it entirely.
    let mut cont: Vec<(Var<'t>, Var<'t>)> = Vec::new();
    if lambda > 0.0 {
        let inv_t = 1.0 / loss_cfg.contrastive_temp;
        let gw: Vec<Vec<Var<'t>>> = batch
            .samples
            .iter()
            .map(|s| {
                let h = model.features_on(tape, &s.weak_anchor);
                model.projection_from_features_on(tape, &h)
            })
            .collect();
        let gs: Vec<Vec<Var<'t>>> = batch
            .samples
            .iter()
            .map(|s| {
                let h = model.features_on(tape, &s.strong);
                model.projection_from_features_on(tape, &h)
            })
            .collect();
        for i in 0..n {
            let row: Vec<Var<'t>> = (0..n).map(|j| tape.dot(&gw[i], &gs[j]) * inv_t).collect();
            let all = tape.logsumexp(&row);
            let pos: Vec<Var<'t>> = (0..n)
                .filter(|&j| batch.samples[j].label == batch.samples[i].label)
                .map(|j| row[j])
                .collect();
            // pos is never empty: a sample shares its own label.
            cont.push((all - tape.logsumexp(&pos), all - row[i]));
        }
    }

    // Per-sample combination, summed in batch order.
    let mut terms: Vec<Var<'t>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut t = if forced {
            sup[i]
        } else {
            let inner = w_id[i] * sup[i] + (1.0 - w_id[i]) * unsup[i] + hinge_id[i];
            w_ood[i] * inner + (1.0 - w_ood[i]) * hinge_ood[i]
        };
        if lambda > 0.0 {
            t = t + (cont[i].0 + cont[i].1) * lambda;
        }
        terms.push(t);
    }
    let inv_n = 1.0 / n as f64;
    let root = tape.sum(&terms) * inv_n;

    // Plain-value summaries.
    let mut b = BatchLossBreakdown {
        total: root.value(),
        ..Default::default()
    };
    let mut w_id_vals = Vec::with_capacity(n);
    let mut w_ood_vals = Vec::with_capacity(n);
    for i in 0..n {
        let (wi, wo) = if forced {
            (1.0, 1.0)
        } else {
            (w_id[i].value(), w_ood[i].value())
        };
        w_id_vals.push(wi);
        w_ood_vals.push(wo);
        b.mean_w_id += wi;
        b.mean_w_ood += wo;
        b.supervised += wo * wi * sup[i].value();
        if !forced {
            b.unsupervised += wo * (1.0 - wi) * unsup[i].value();
            b.id_margin += wo * hinge_id[i].value();
            b.ood_margin += (1.0 - wo) * hinge_ood[i].value();
        }
        if lambda > 0.0 {
            b.contrastive_sup += cont[i].0.value();
            b.contrastive_uns += cont[i].1.value();
        }
    }
    b.mean_w_id *= inv_n;
    b.mean_w_ood *= inv_n;
    b.supervised *= inv_n;
    b.unsupervised *= inv_n;
    b.id_margin *= inv_n;
    b.ood_margin *= inv_n;
    b.contrastive_sup *= inv_n;
    b.contrastive_uns *= inv_n;

    Ok(BatchLoss {
        root,
        breakdown: b,
        masks: MaskDiagnostics {
            eta_id: est.eta_id.value(),
            eta_ood: est.eta_ood.value(),
            tau_id: tau_id_val,
            tau_ood: tau_ood_val,
            w_id: w_id_vals,
            w_ood: w_ood_vals,
            energies: energies.iter().map(|e| e.value()).collect(),
            stats: diag_stats,
        },
    })
}
