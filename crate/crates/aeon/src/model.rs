//! The classifier under study: a small MLP encoder, a linear classification
//! head, and a two-layer projection head whose output is L2-normalized.
//!
//! Parameters live in one flat `Vec<f64>` so the optimizer, checkpoints, and
//! the differentiation tape all see the same layout. Every forward pass
//! exists twice: a plain-f64 version for evaluation and pseudo-label targets,
//! and an on-tape version for training. The two are written to accumulate in
//! the same order, so their outputs agree bitwise; tests hold them to that.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng;

/// Elementwise nonlinearity between linear layers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu { slope: f64 },
    Tanh,
}

impl Default for Activation {
    fn default() -> Self {
        Activation::LeakyRelu { slope: 0.01 }
    }
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu { slope } => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Tanh => x.tanh(),
        }
    }

    fn apply_on<'t>(self, v: Var<'t>) -> Var<'t> {
        match self {
            Activation::LeakyRelu { slope } => v.leaky_relu(slope),
            Activation::Tanh => v.tanh(),
        }
    }
}

/// Architecture description; serialized into checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// May be left at 0 in a training config; the trainer fills it from the
    /// dataset. `validate` rejects 0, so it must be resolved before use.
    #[serde(default)]
    pub input_dim: usize,
    /// Same convention as `input_dim`.
    #[serde(default)]
    pub num_classes: usize,
    /// Encoder hidden widths between input and feature layer.
    #[serde(default = "default_hidden")]
    pub hidden_dims: Vec<usize>,
    /// Width of the encoder output (the representation fed to both heads).
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    /// Hidden width of the projection head.
    #[serde(default = "default_feature_dim")]
    pub projection_hidden: usize,
    /// Output width of the projection head (the contrastive embedding).
    #[serde(default = "default_projection_dim")]
    pub projection_dim: usize,
    #[serde(default)]
    pub activation: Activation,
    /// Seed for parameter initialization; the trainer folds its own run seed
    /// into this, so it only needs to distinguish models within one run.
    #[serde(default)]
    pub init_seed: u64,
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}
fn default_feature_dim() -> usize {
    32
}
fn default_projection_dim() -> usize {
    128
}

// Matches the per-field serde defaults, with the dataset-derived dims left
// at their unresolved 0.
impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 0,
            num_classes: 0,
            hidden_dims: default_hidden(),
            feature_dim: default_feature_dim(),
            projection_hidden: default_feature_dim(),
            projection_dim: default_projection_dim(),
            activation: Activation::default(),
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("model.input_dim must be at least 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("model.num_classes must be at least 2"));
        }
        for (i, &h) in self.hidden_dims.iter().enumerate() {
            if h == 0 {
                return Err(Error::config(format!("model.hidden_dims[{i}] is zero")));
            }
        }
        if self.feature_dim == 0 || self.projection_hidden == 0 || self.projection_dim == 0 {
            return Err(Error::config("model layer widths must be at least 1"));
        }
        if let Activation::LeakyRelu { slope } = self.activation {
            if !slope.is_finite() || slope < 0.0 || slope >= 1.0 {
                return Err(Error::config("leaky_relu slope must lie in [0, 1)"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct LayerSpec {
    in_dim: usize,
    out_dim: usize,
    w_off: usize,
    b_off: usize,
}

/// Flat-parameter layout: encoder layers, classifier head, projection head,
/// each layer as row-major weights followed by biases.
#[derive(Clone, Debug)]
struct Layout {
    encoder: Vec<LayerSpec>,
    classifier: LayerSpec,
    projection: [LayerSpec; 2],
    total: usize,
}

fn layout(cfg: &ModelConfig) -> Layout {
    let mut off = 0;
    let mut layer = |in_dim: usize, out_dim: usize| {
        let spec = LayerSpec {
            in_dim,
            out_dim,
            w_off: off,
            b_off: off + in_dim * out_dim,
        };
        off += in_dim * out_dim + out_dim;
        spec
    };
    let mut encoder = Vec::with_capacity(cfg.hidden_dims.len() + 1);
    let mut prev = cfg.input_dim;
    for &h in &cfg.hidden_dims {
        encoder.push(layer(prev, h));
        prev = h;
    }
    encoder.push(layer(prev, cfg.feature_dim));
    let classifier = layer(cfg.feature_dim, cfg.num_classes);
    let projection = [
        layer(cfg.feature_dim, cfg.projection_hidden),
        layer(cfg.projection_hidden, cfg.projection_dim),
    ];
    Layout {
        encoder,
        classifier,
        projection,
        total: off,
    }
}

/// Scaled-uniform initialization bound: sqrt(6 / (fan_in + fan_out)).
pub fn init_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Guards under the projection norm: the tiny term under the root keeps the
/// root's derivative finite at exactly zero, the term on the norm keeps the
/// division finite. Together they bend the unit-norm guarantee by less than
/// 1e-11 for any embedding of plausible scale.
const NORM_SQ_EPS: f64 = 1e-24;
const NORM_EPS: f64 = 1e-12;

/// The model: a config plus its flat parameter vector.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AeonModel {
    pub config: ModelConfig,
    pub params: Vec<f64>,
}

impl AeonModel {
    /// Fresh model with weights drawn uniformly from ±[`init_bound`] per
    /// layer (row-major draw order) and biases zero. Deterministic in `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let lay = layout(config);
        let mut params = vec![0.0; lay.total];
        let mut r = rng::stream(seed, &[rng::MODEL_INIT, config.init_seed]);
        let all = lay
            .encoder
            .iter()
            .chain(std::iter::once(&lay.classifier))
            .chain(lay.projection.iter());
        for spec in all {
            let b = init_bound(spec.in_dim, spec.out_dim);
            for w in &mut params[spec.w_off..spec.w_off + spec.in_dim * spec.out_dim] {
                *w = r.gen_range(-b..=b);
            }
        }
        Ok(AeonModel {
            config: config.clone(),
            params,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn linear(&self, spec: LayerSpec, input: &[f64], out: &mut Vec<f64>) {
        debug_assert_eq!(input.len(), spec.in_dim);
        out.clear();
        for j in 0..spec.out_dim {
            let row = &self.params[spec.w_off + j * spec.in_dim..spec.w_off + (j + 1) * spec.in_dim];
            let mut acc = self.params[spec.b_off + j];
            for (w, x) in row.iter().zip(input) {
                acc += w * x;
            }
            out.push(acc);
        }
    }

    /// Encoder output for one input.
    pub fn features(&self, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        let lay = layout(&self.config);
        for (i, &spec) in lay.encoder.iter().enumerate() {
            self.linear(spec, &cur, &mut next);
            if i + 1 < lay.encoder.len() {
                for v in &mut next {
                    *v = self.config.activation.apply(*v);
                }
            }
            std::mem::swap(&mut cur, &mut next);
        }
        cur
    }

    /// Class logits from precomputed features.
    pub fn logits_from_features(&self, h: &[f64]) -> Vec<f64> {
        let lay = layout(&self.config);
        let mut out = Vec::new();
        self.linear(lay.classifier, h, &mut out);
        out
    }

    /// Class logits for one input.
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.logits_from_features(&self.features(x))
    }

    /// L2-normalized projection embedding from precomputed features.
    pub fn projection_from_features(&self, h: &[f64]) -> Vec<f64> {
        let lay = layout(&self.config);
        let mut mid = Vec::new();
        self.linear(lay.projection[0], h, &mut mid);
        for v in &mut mid {
            *v = self.config.activation.apply(*v);
        }
        let mut out = Vec::new();
        self.linear(lay.projection[1], &mid, &mut out);
        let mut ss = 0.0;
        for &v in &out {
            ss += v * v;
        }
        let norm = (ss + NORM_SQ_EPS).sqrt() + NORM_EPS;
        for v in &mut out {
            *v /= norm;
        }
        out
    }

    /// L2-normalized projection embedding for one input.
    pub fn projection(&self, x: &[f64]) -> Vec<f64> {
        self.projection_from_features(&self.features(x))
    }

    /// Register every parameter on `tape`, in parameter order, and return the
    /// handle used for on-tape forward passes. Must be called on a position
    /// where the next `params.len()` node indices are free (in practice: on a
    /// freshly reset tape, before anything else).
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundModel<'t> {
        let vars: Vec<Var<'t>> = self.params.iter().map(|&p| tape.var(p)).collect();
        BoundModel {
            layout: layout(&self.config),
            activation: self.config.activation,
            vars,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: AeonModel = serde_json::from_str(&text)?;
        model.config.validate()?;
        let expected = layout(&model.config).total;
        if model.params.len() != expected {
            return Err(Error::data(format!(
                "checkpoint has {} parameters, config implies {expected}",
                model.params.len()
            )));
        }
        Ok(model)
    }
}

/// A model whose parameters are registered on a tape.
pub struct BoundModel<'t> {
    layout: Layout,
    activation: Activation,
    vars: Vec<Var<'t>>,
}

impl<'t> BoundModel<'t> {
    /// Variables for all parameters, in flat-layout order.
    pub fn param_vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    fn linear_const(&self, tape: &'t Tape, spec: LayerSpec, x: &[f64]) -> Vec<Var<'t>> {
        (0..spec.out_dim)
            .map(|j| {
                let row = &self.vars[spec.w_off + j * spec.in_dim..spec.w_off + (j + 1) * spec.in_dim];
                tape.affine(row, x, self.vars[spec.b_off + j])
            })
            .collect()
    }

    fn linear_var(&self, tape: &'t Tape, spec: LayerSpec, x: &[Var<'t>]) -> Vec<Var<'t>> {
        (0..spec.out_dim)
            .map(|j| {
                let row = &self.vars[spec.w_off + j * spec.in_dim..spec.w_off + (j + 1) * spec.in_dim];
                tape.affine_var(row, x, self.vars[spec.b_off + j])
            })
            .collect()
    }

    /// On-tape encoder forward for one (constant) input.
    pub fn features_on(&self, tape: &'t Tape, x: &[f64]) -> Vec<Var<'t>> {
        let mut cur = self.linear_const(tape, self.layout.encoder[0], x);
        for (i, &spec) in self.layout.encoder.iter().enumerate().skip(1) {
            for v in &mut cur {
                *v = self.activation.apply_on(*v);
            }
            let _ = i;
            cur = self.linear_var(tape, spec, &cur);
        }
        cur
    }

    /// On-tape class logits from on-tape features.
    pub fn logits_from_features_on(&self, tape: &'t Tape, h: &[Var<'t>]) -> Vec<Var<'t>> {
        self.linear_var(tape, self.layout.classifier, h)
    }

    /// On-tape class logits for one input.
    pub fn logits_on(&self, tape: &'t Tape, x: &[f64]) -> Vec<Var<'t>> {
        let h = self.features_on(tape, x);
        self.logits_from_features_on(tape, &h)
    }

    /// On-tape normalized projection from on-tape features.
    pub fn projection_from_features_on(&self, tape: &'t Tape, h: &[Var<'t>]) -> Vec<Var<'t>> {
        let mut mid = self.linear_var(tape, self.layout.projection[0], h);
        for v in &mut mid {
            *v = self.activation.apply_on(*v);
        }
        let out = self.linear_var(tape, self.layout.projection[1], &mid);
        let ss = tape.dot(&out, &out);
        let norm = (ss + NORM_SQ_EPS).sqrt().expect("sum of squares is non-negative") + NORM_EPS;
        out.into_iter().map(|v| v / norm).collect()
    }
}
