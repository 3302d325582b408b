//! Synthetic dual-noise benchmark with ground truth.
//!
//! Real noisy-label corpora never say which labels are wrong, so method
//! diagnostics (did the mask actually find the corrupted samples?) are
//! unmeasurable on them. This generator builds a classification dataset
//! where every record carries both its given label and its provenance tag:
//!
//! 1. [`generate_clean`] draws Gaussian class blobs with well-separated
//!    seeded means, plus a pool of vectors from a mixture placed away from
//!    every class mean.
//! 2. [`inject_ood`] replaces the training records most similar to the pool
//!    (cosine similarity in an optional embedding space) by their nearest
//!    pool vector, keeping the original label. These records' inputs no
//!    longer belong to any class: open-set noise.
//! 3. [`inject_id`] flips labels of the remaining records through an
//!    instance-dependent transition row: per-class weight blocks score each
//!    input, and an instance-specific flip rate sets the off-diagonal mass.
//!    Closed-set noise.
//!
//! Both stages are instance-dependent: which records turn out-of-distribution
//! follows feature similarity, and where a label flips to follows per-class
//! linear scores of the input. A held-out test split is drawn from the same
//! class blobs and never touched by either injector.
//!
//! Everything is deterministic in the config seed, down to the emitted CSV
//! bytes.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Bumped when any generation rule changes, so old sidecars are identifiable.
pub const GENERATOR_VERSION: u32 = 1;

/// Provenance of one record.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tag {
    /// Label untouched.
    Clean,
    /// Label flipped to another in-task class.
    IdNoisy,
    /// Input replaced by an out-of-task vector; the label points nowhere.
    Ood,
}

impl Tag {
    pub fn as_str(&self) -> &'static str {
        match self {
            Tag::Clean => "clean",
            Tag::IdNoisy => "id_noisy",
            Tag::Ood => "ood",
        }
    }

    pub fn parse(s: &str) -> Option<Tag> {
        match s {
            "clean" => Some(Tag::Clean),
            "id_noisy" => Some(Tag::IdNoisy),
            "ood" => Some(Tag::Ood),
            _ => None,
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One sample: features, the label training sees, and the ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub features: Vec<f64>,
    pub noisy_label: usize,
    /// None for out-of-distribution records (serialized as -1).
    pub true_label: Option<usize>,
    pub tag: Tag,
}

/// A dataset with ground-truth corruption tags.
#[derive(Clone, Debug, PartialEq)]
pub struct TaggedDataset {
    pub records: Vec<Record>,
    pub dims: usize,
    pub num_classes: usize,
}

/// Per-tag record counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagCounts {
    pub clean: usize,
    pub id_noisy: usize,
    pub ood: usize,
}

pub fn tag_counts(ds: &TaggedDataset) -> TagCounts {
    let mut c = TagCounts::default();
    for r in &ds.records {
        match r.tag {
            Tag::Clean => c.clean += 1,
            Tag::IdNoisy => c.id_noisy += 1,
            Tag::Ood => c.ood += 1,
        }
    }
    c
}

/// Generation parameters. `pool_size = 0` sizes the pool to the training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub dims: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Minimum pairwise distance between class means.
    pub class_separation: f64,
    /// Standard deviation of each class blob (and the pool clusters).
    pub within_std: f64,
    /// Number of mixture components behind the out-of-distribution pool.
    pub pool_clusters: usize,
    /// Pool vectors available for replacement; 0 means one per train record.
    pub pool_size: usize,
    /// Minimum distance from each pool cluster mean to every class mean.
    pub pool_offset: f64,
    /// Target label-flip rate among non-replaced records.
    pub r_id: f64,
    /// Fraction of training records replaced by pool vectors.
    pub r_ood: f64,
    /// Spread of the per-record flip rates around `r_id`.
    pub flip_std: f64,
    /// Similarity space for replacement: 0 compares raw features, otherwise
    /// a seeded random linear map to this many dimensions.
    pub embed_dim: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 8,
            dims: 16,
            train_per_class: 500,
            test_per_class: 250,
            class_separation: 3.0,
            within_std: 1.0,
            pool_clusters: 4,
            pool_size: 0,
            pool_offset: 3.0,
            r_id: 0.3,
            r_ood: 0.3,
            flip_std: 0.1,
            embed_dim: 0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("synth.num_classes must be at least 2"));
        }
        if self.dims == 0 {
            return Err(Error::config("synth.dims must be at least 1"));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::config("synth per-class sample counts must be at least 1"));
        }
        if !(self.class_separation > 0.0) || !self.class_separation.is_finite() {
            return Err(Error::config("synth.class_separation must be positive"));
        }
        if !(self.within_std > 0.0) || !self.within_std.is_finite() {
            return Err(Error::config("synth.within_std must be positive"));
        }
        if self.pool_clusters == 0 {
            return Err(Error::config("synth.pool_clusters must be at least 1"));
        }
        if !(self.pool_offset > 0.0) || !self.pool_offset.is_finite() {
            return Err(Error::config("synth.pool_offset must be positive"));
        }
        if !(0.0..=1.0).contains(&self.r_id) || !(0.0..=1.0).contains(&self.r_ood) {
            return Err(Error::config("noise rates must lie in [0, 1]"));
        }
        if !(self.flip_std >= 0.0) || !self.flip_std.is_finite() {
            return Err(Error::config("synth.flip_std must be nonnegative"));
        }
        Ok(())
    }
}

/// Similarity space for the replacement stage.
#[derive(Clone, Debug)]
pub enum Embedding {
    /// Compare raw feature vectors.
    Identity,
    /// Row-major `out_dim x in_dim` linear map.
    Linear { matrix: Vec<f64>, out_dim: usize, in_dim: usize },
}

impl Embedding {
    /// Seeded random projection with N(0, 1/in_dim) entries, or identity
    /// when `out_dim` is 0.
    pub fn from_config(cfg: &SynthConfig) -> Embedding {
        if cfg.embed_dim == 0 {
            return Embedding::Identity;
        }
        let mut r = rng::stream(cfg.seed, &[rng::EMBED_PROJECTION]);
        let scale = 1.0 / (cfg.dims as f64).sqrt();
        let matrix = (0..cfg.embed_dim * cfg.dims)
            .map(|_| scale * r.sample::<f64, _>(StandardNormal))
            .collect();
        Embedding::Linear {
            matrix,
            out_dim: cfg.embed_dim,
            in_dim: cfg.dims,
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Embedding::Identity => x.to_vec(),
            Embedding::Linear { matrix, out_dim, in_dim } => {
                debug_assert_eq!(x.len(), *in_dim);
                (0..*out_dim)
                    .map(|r| {
                        matrix[r * in_dim..(r + 1) * in_dim]
                            .iter()
                            .zip(x)
                            .map(|(m, v)| m * v)
                            .sum()
                    })
                    .collect()
            }
        }
    }
}

/// Cosine similarity with a 1e-12 floor on each norm, so zero vectors
/// compare as orthogonal rather than dividing by zero.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let nb: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-12);
    dot / (na * nb)
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Rejection-sample `count` mean vectors with coordinates N(0, scale^2),
/// keeping only candidates at distance >= `min_dist` from every vector in
/// `existing` and from the means already placed (when `mutual`).
fn place_means<R: Rng>(
    count: usize,
    dims: usize,
    scale: f64,
    min_dist: f64,
    existing: &[Vec<f64>],
    mutual: bool,
    r: &mut R,
) -> Result<Vec<Vec<f64>>> {
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while means.len() < count {
        attempts += 1;
        if attempts > 10_000 * count {
            return Err(Error::config(
                "could not place separated means; lower the separation or raise dims",
            ));
        }
        let cand: Vec<f64> = (0..dims)
            .map(|_| scale * r.sample::<f64, _>(StandardNormal))
            .collect();
        let clear_existing = existing.iter().all(|m| euclidean(m, &cand) >= min_dist);
        let clear_mutual = !mutual || means.iter().all(|m| euclidean(m, &cand) >= min_dist);
        if clear_existing && clear_mutual {
            means.push(cand);
        }
    }
    Ok(means)
}

/// Clean draw: class blobs, a held-out test split from the same blobs, and
/// the out-of-distribution pool.
pub struct CleanData {
    pub train: TaggedDataset,
    pub test: TaggedDataset,
    pub pool: Vec<Vec<f64>>,
    pub class_means: Vec<Vec<f64>>,
}

pub fn generate_clean(cfg: &SynthConfig) -> Result<CleanData> {
    cfg.validate()?;
    let mut r = rng::stream(cfg.seed, &[rng::CLASS_MEANS]);
    let class_means = place_means(
        cfg.num_classes,
        cfg.dims,
        cfg.class_separation,
        cfg.class_separation,
        &[],
        true,
        &mut r,
    )?;
    // Pool clusters are drawn on the same shell as the class means so
    // distractors sit in-range of the inputs the model sees; only the
    // minimum distance to every class mean marks them as foreign.
    let mut r = rng::stream(cfg.seed, &[rng::POOL_MEANS]);
    let pool_means = place_means(
        cfg.pool_clusters,
        cfg.dims,
        cfg.class_separation,
        cfg.pool_offset,
        &class_means,
        false,
        &mut r,
    )?;

    let blob = |mean: &[f64], r: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        mean.iter()
            .map(|m| m + cfg.within_std * r.sample::<f64, _>(StandardNormal))
            .collect()
    };

    let mut r = rng::stream(cfg.seed, &[rng::CLASS_SAMPLES]);
    let mut train = Vec::with_capacity(cfg.num_classes * cfg.train_per_class);
    for (c, mean) in class_means.iter().enumerate() {
        for _ in 0..cfg.train_per_class {
            train.push(Record {
                features: blob(mean, &mut r),
                noisy_label: c,
                true_label: Some(c),
                tag: Tag::Clean,
            });
        }
    }

    let mut r = rng::stream(cfg.seed, &[rng::TEST_SAMPLES]);
    let mut test = Vec::with_capacity(cfg.num_classes * cfg.test_per_class);
    for (c, mean) in class_means.iter().enumerate() {
        for _ in 0..cfg.test_per_class {
            test.push(Record {
                features: blob(mean, &mut r),
                noisy_label: c,
                true_label: Some(c),
                tag: Tag::Clean,
            });
        }
    }

    let pool_size = if cfg.pool_size == 0 {
        train.len()
    } else {
        cfg.pool_size
    };
    let mut r = rng::stream(cfg.seed, &[rng::POOL_SAMPLES]);
    let pool = (0..pool_size)
        .map(|_| {
            let k = r.gen_range(0..cfg.pool_clusters);
            blob(&pool_means[k], &mut r)
        })
        .collect();

    Ok(CleanData {
        train: TaggedDataset {
            records: train,
            dims: cfg.dims,
            num_classes: cfg.num_classes,
        },
        test: TaggedDataset {
            records: test,
            dims: cfg.dims,
            num_classes: cfg.num_classes,
        },
        pool,
        class_means,
    })
}

/// Replace the `round(r_ood * n)` training records most similar to the pool
/// by their most similar unused pool vector, keeping the original label and
/// dropping the true one.
///
/// Selection ranks records by their best pool similarity (ties to the lower
/// record index); assignment walks that ranking greedily, each record taking
/// its most similar still-unused pool vector (ties to the lower pool index).
/// Returns the number of records replaced.
pub fn inject_ood(
    data: &mut TaggedDataset,
    pool: &[Vec<f64>],
    r_ood: f64,
    embed: &Embedding,
) -> Result<usize> {
    let n = data.records.len();
    let k = (r_ood * n as f64).round() as usize;
    if k == 0 {
        return Ok(0);
    }
    if k > pool.len() {
        return Err(Error::config(format!(
            "replacement needs {k} pool vectors but the pool holds {}",
            pool.len()
        )));
    }

    // Normalized embeddings once; cosine then reduces to a dot product.
    let normalize = |v: Vec<f64>| -> Vec<f64> {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.into_iter().map(|x| x / norm).collect()
    };
    let rec_e: Vec<Vec<f64>> = data
        .records
        .iter()
        .map(|r| normalize(embed.apply(&r.features)))
        .collect();
    let pool_e: Vec<Vec<f64>> = pool.iter().map(|p| normalize(embed.apply(p))).collect();

    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let best: Vec<f64> = rec_e
        .iter()
        .map(|re| {
            pool_e
                .iter()
                .map(|pe| dot(re, pe))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| best[b].partial_cmp(&best[a]).unwrap().then(a.cmp(&b)));

    let mut used = vec![false; pool.len()];
    for &i in order.iter().take(k) {
        let mut best_j = usize::MAX;
        let mut best_sim = f64::NEG_INFINITY;
        for (j, pe) in pool_e.iter().enumerate() {
            if used[j] {
                continue;
            }
            let s = dot(&rec_e[i], pe);
            if s > best_sim {
                best_sim = s;
                best_j = j;
            }
        }
        used[best_j] = true;
        let rec = &mut data.records[i];
        rec.features = pool[best_j].clone();
        rec.true_label = None;
        rec.tag = Tag::Ood;
    }
    Ok(k)
}

/// Transition row for one record: the true class keeps `1 - q`, and `q`
/// spreads over the other classes by a softmax of their scores under the
/// true class's weight block (`scores[k] = sum_i x[i] * block[i*C + k]`).
pub fn id_transition_row(x: &[f64], true_label: usize, q: f64, block: &[f64], num_classes: usize) -> Vec<f64> {
    debug_assert_eq!(block.len(), x.len() * num_classes);
    debug_assert!((0.0..=1.0).contains(&q));
    let scores: Vec<f64> = (0..num_classes)
        .map(|k| {
            x.iter()
                .enumerate()
                .map(|(i, xi)| xi * block[i * num_classes + k])
                .sum()
        })
        .collect();
    let m = scores
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != true_label)
        .map(|(_, s)| *s)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut row = vec![0.0; num_classes];
    let mut denom = 0.0;
    for k in 0..num_classes {
        if k != true_label {
            row[k] = (scores[k] - m).exp();
            denom += row[k];
        }
    }
    for (k, v) in row.iter_mut().enumerate() {
        if k != true_label {
            *v = q * (*v / denom);
        }
    }
    row[true_label] = 1.0 - q;
    row
}

/// Flip labels of non-replaced records through instance-dependent transition
/// rows. Per eligible record, a flip rate is drawn from
/// `clip(N(r_id, flip_std^2), 0, 1)` and the new label sampled from its
/// transition row. Returns the number of labels actually flipped.
pub fn inject_id(data: &mut TaggedDataset, r_id: f64, flip_std: f64, seed: u64) -> Result<usize> {
    let c = data.num_classes;
    if c < 2 {
        return Err(Error::config("label flips need at least 2 classes"));
    }
    let mut r = rng::stream(seed, &[rng::TRANSITION_BLOCKS]);
    let blocks: Vec<Vec<f64>> = (0..c)
        .map(|_| {
            (0..data.dims * c)
                .map(|_| r.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();

    let mut rates = rng::stream(seed, &[rng::FLIP_RATES]);
    let mut draws = rng::stream(seed, &[rng::FLIP_DRAWS]);
    let mut flipped = 0usize;
    for rec in &mut data.records {
        if rec.tag == Tag::Ood {
            continue;
        }
        let q = (r_id + flip_std * rates.sample::<f64, _>(StandardNormal)).clamp(0.0, 1.0);
        let y = rec.true_label.expect("non-ood record carries a true label");
        let row = id_transition_row(&rec.features, y, q, &blocks[y], c);
        let u: f64 = draws.gen();
        let mut acc = 0.0;
        let mut chosen = y;
        let mut hit = false;
        for (k, &p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                chosen = k;
                hit = true;
                break;
            }
        }
        if !hit {
            // Rounding left u at or past the accumulated total; take the
            // last class with any mass.
            chosen = row
                .iter()
                .rposition(|&p| p > 0.0)
                .expect("transition row sums to 1");
        }
        if chosen != y {
            rec.noisy_label = chosen;
            rec.tag = Tag::IdNoisy;
            flipped += 1;
        }
    }
    Ok(flipped)
}

/// Full pipeline: clean draw, replacement, label flips. Returns the tagged
/// training set and the untouched clean test split.
pub fn synthesize(cfg: &SynthConfig) -> Result<(TaggedDataset, TaggedDataset)> {
    let clean = generate_clean(cfg)?;
    let mut train = clean.train;
    let embed = Embedding::from_config(cfg);
    inject_ood(&mut train, &clean.pool, cfg.r_ood, &embed)?;
    inject_id(&mut train, cfg.r_id, cfg.flip_std, cfg.seed)?;
    Ok((train, clean.test))
}

/// Sidecar metadata written next to a dataset CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub config: SynthConfig,
    pub generator_version: u32,
    pub tag_counts: TagCounts,
    /// File name (relative to this sidecar) of the clean test split.
    pub test_file: Option<String>,
}

/// `data.csv -> data.meta.json`
pub fn meta_path(csv: &Path) -> PathBuf {
    csv.with_extension("meta.json")
}

/// `data.csv -> data.test.csv`
pub fn test_path(csv: &Path) -> PathBuf {
    csv.with_extension("test.csv")
}

/// Write a dataset as CSV: header `f0,...,f{d-1},noisy_label,true_label,tag`,
/// features in shortest round-trip decimal, -1 standing for a missing true
/// label. Bytes are a pure function of the dataset.
pub fn write_dataset(ds: &TaggedDataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    for i in 0..ds.dims {
        out.push('f');
        out.push_str(&i.to_string());
        out.push(',');
    }
    out.push_str("noisy_label,true_label,tag\n");
    for rec in &ds.records {
        debug_assert_eq!(rec.features.len(), ds.dims);
        for f in &rec.features {
            out.push_str(&f.to_string());
            out.push(',');
        }
        let true_label = match rec.true_label {
            Some(l) => l as i64,
            None => -1,
        };
        out.push_str(&format!("{},{},{}\n", rec.noisy_label, true_label, rec.tag));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Read a dataset CSV written by [`write_dataset`]. The class count is
/// inferred as one past the largest label present.
pub fn read_dataset(path: &Path) -> Result<TaggedDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::data(format!("{}: empty dataset file", path.display())))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 4 || cols[cols.len() - 3..] != ["noisy_label", "true_label", "tag"] {
        return Err(Error::data(format!(
            "{}: expected header f0,...,noisy_label,true_label,tag",
            path.display()
        )));
    }
    let dims = cols.len() - 3;
    for (i, c) in cols[..dims].iter().enumerate() {
        if *c != format!("f{i}") {
            return Err(Error::data(format!(
                "{}: feature column {i} is named {c}",
                path.display()
            )));
        }
    }

    let mut records = Vec::new();
    let mut max_label = 0usize;
    for (lineno, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dims + 3 {
            return Err(Error::data(format!(
                "{}:{}: expected {} fields, found {}",
                path.display(),
                lineno + 1,
                dims + 3,
                fields.len()
            )));
        }
        let bad = |what: &str, val: &str| {
            Error::data(format!(
                "{}:{}: invalid {what} `{val}`",
                path.display(),
                lineno + 1
            ))
        };
        let mut features = Vec::with_capacity(dims);
        for raw in &fields[..dims] {
            features.push(raw.parse::<f64>().map_err(|_| bad("feature", raw))?);
        }
        let noisy_label: usize = fields[dims]
            .parse()
            .map_err(|_| bad("noisy_label", fields[dims]))?;
        let true_raw: i64 = fields[dims + 1]
            .parse()
            .map_err(|_| bad("true_label", fields[dims + 1]))?;
        let true_label = match true_raw {
            -1 => None,
            l if l >= 0 => Some(l as usize),
            _ => return Err(bad("true_label", fields[dims + 1])),
        };
        let tag = Tag::parse(fields[dims + 2]).ok_or_else(|| bad("tag", fields[dims + 2]))?;
        max_label = max_label.max(noisy_label).max(true_label.unwrap_or(0));
        records.push(Record {
            features,
            noisy_label,
            true_label,
            tag,
        });
    }
    Ok(TaggedDataset {
        records,
        dims,
        num_classes: max_label + 1,
    })
}

pub fn write_meta(meta: &DatasetMeta, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(meta)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_meta(path: &Path) -> Result<DatasetMeta> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
