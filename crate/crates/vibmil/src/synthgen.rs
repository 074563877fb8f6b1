//! Synthetic multiple-instance datasets with rare positive instances.
//!
//! Each bag holds hundreds to thousands of instances. A bag of class `c > 0`
//! contains a small fraction of positive instances with labels drawn from
//! `1..=c` (at least one instance of class `c`); the rest are background. The
//! bag label is the maximum instance label, so it equals `c` by construction,
//! and a bag with no positives is labeled 0.
//!
//! Instances live in a latent space where class prototypes sit on scaled
//! unit directions and background sits at the origin; observed features are
//! the latents pushed through a fixed random tanh network (the "warp"). The
//! prototype directions are orthonormal by default, or tilted toward a
//! shared anchor when `class_spread < 1` so that positive classes crowd
//! together while staying far from background. Everything is a pure function
//! of the master seed: bag `i` is generated from an RNG derived as
//! `mix(master_seed, i)`, so datasets are reproducible bag-by-bag.
//!
//! Instance labels are carried for evaluation only. The field is private;
//! training code cannot reach it without going through the loudly named
//! evaluation accessor.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::matrix::Matrix;
use crate::seed;

/// Stream tags for seed derivation; far outside the bag-id range.
const PROTO_STREAM: u64 = 0x5052_4f54_4f54_5950;
const WARP_STREAM: u64 = 0x5741_5250_5741_5250;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("split fraction set {0:?} does not sum to 1")]
    BadSplitFractions(Vec<f64>),
    #[error("split {index} has fraction {fraction} but received no bags")]
    EmptySplit { index: usize, fraction: f64 },
    #[error("malformed dataset file: {0}")]
    Format(String),
    #[error("dataset blob checksum mismatch")]
    ChecksumMismatch,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Generator parameters. All fields have defaults so a TOML config may name
/// only what it overrides; unknown keys are rejected.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub master_seed: u64,
    pub n_bags: usize,
    /// Positive instance classes; bag labels range over `0..=n_classes`.
    pub n_classes: usize,
    pub latent_dim: usize,
    /// Observed feature dimension after the warp.
    pub obs_dim: usize,
    pub n_instances_min: usize,
    pub n_instances_max: usize,
    /// Per-bag positive fraction is drawn uniformly from this range; the
    /// positive count is the ceiling of fraction times bag size.
    pub positive_fraction_min: f64,
    pub positive_fraction_max: f64,
    /// Distance between any two class prototypes in latent space (at
    /// `class_spread` 1.0; smaller spreads shrink it proportionally).
    pub separation: f64,
    /// Isotropic Gaussian noise around the prototype.
    pub noise_std: f64,
    /// Mutual closeness of the class prototypes, in (0, 1]. Pairwise
    /// prototype distance is `separation * class_spread`, while every
    /// prototype stays `separation / sqrt(2)` away from the background
    /// origin. At 1.0 (the default) the prototype directions are orthonormal;
    /// below it they tilt toward a shared anchor direction, so telling
    /// positive classes apart becomes harder than telling positives from
    /// background.
    pub class_spread: f64,
    /// Number of linear layers in the warp; tanh between consecutive layers.
    /// Zero means identity (requires `obs_dim == latent_dim`).
    pub warp_depth: usize,
    pub warp_hidden: usize,
    /// Multiplier on warp weights; larger values saturate the tanh units and
    /// destroy more latent information.
    pub warp_gain: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            master_seed: 17,
            n_bags: 100,
            n_classes: 3,
            latent_dim: 16,
            obs_dim: 64,
            n_instances_min: 512,
            n_instances_max: 2048,
            positive_fraction_min: 0.005,
            positive_fraction_max: 0.05,
            separation: 4.0,
            noise_std: 1.0,
            class_spread: 1.0,
            warp_depth: 2,
            warp_hidden: 64,
            warp_gain: 1.0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if self.n_bags == 0 {
            return bad("n_bags must be positive".into());
        }
        if self.n_classes == 0 || self.n_classes > 255 {
            return bad(format!("n_classes must be in 1..=255, got {}", self.n_classes));
        }
        if self.latent_dim < self.n_classes {
            return bad(format!(
                "latent_dim {} cannot hold {} orthonormal class directions",
                self.latent_dim, self.n_classes
            ));
        }
        if self.n_instances_min == 0 || self.n_instances_min > self.n_instances_max {
            return bad(format!(
                "instance range [{}, {}] is invalid",
                self.n_instances_min, self.n_instances_max
            ));
        }
        if !(self.positive_fraction_min > 0.0
            && self.positive_fraction_min <= self.positive_fraction_max
            && self.positive_fraction_max < 1.0)
        {
            return bad(format!(
                "positive fraction range [{}, {}] must satisfy 0 < min <= max < 1",
                self.positive_fraction_min, self.positive_fraction_max
            ));
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return bad(format!("separation {} must be finite and >= 0", self.separation));
        }
        if !(self.noise_std > 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std {} must be finite and > 0", self.noise_std));
        }
        if self.warp_depth == 0 && self.obs_dim != self.latent_dim {
            return bad(format!(
                "warp_depth 0 is the identity and needs obs_dim == latent_dim, got {} vs {}",
                self.obs_dim, self.latent_dim
            ));
        }
        if self.warp_depth > 0 && (self.obs_dim == 0 || self.warp_hidden == 0) {
            return bad("obs_dim and warp_hidden must be positive".into());
        }
        if !(self.warp_gain > 0.0 && self.warp_gain.is_finite()) {
            return bad(format!("warp_gain {} must be finite and > 0", self.warp_gain));
        }
        Ok(())
    }
}

/// One bag of instances. `instance_labels` is private: it exists for
/// evaluation and is off-limits to training code.
#[derive(Debug, Clone, PartialEq)]
pub struct BagSample {
    pub bag_id: u64,
    /// `[n_instances, obs_dim]` observed features.
    pub instances: Matrix,
    instance_labels: Vec<u8>,
    pub bag_label: u8,
    /// Fraction of instances with a positive label. Reporting only.
    pub positive_fraction: f64,
}

impl BagSample {
    /// Builds a bag and derives its label as the maximum instance label.
    pub fn new(bag_id: u64, instances: Matrix, instance_labels: Vec<u8>) -> BagSample {
        assert_eq!(instances.rows, instance_labels.len(), "label count mismatch");
        let bag_label = instance_labels.iter().copied().max().unwrap_or(0);
        BagSample::from_parts(bag_id, instances, instance_labels, bag_label)
    }

    pub(crate) fn from_parts(
        bag_id: u64,
        instances: Matrix,
        instance_labels: Vec<u8>,
        bag_label: u8,
    ) -> BagSample {
        let n = instance_labels.len().max(1);
        let pos = instance_labels.iter().filter(|&&l| l > 0).count();
        BagSample {
            bag_id,
            instances,
            instance_labels,
            bag_label,
            positive_fraction: pos as f64 / n as f64,
        }
    }

    pub fn n_instances(&self) -> usize {
        self.instances.rows
    }

    /// Ground-truth instance labels. Evaluation and reporting only: the
    /// training path must never read these, and tests verify that stripping
    /// them does not change training behavior.
    pub fn instance_labels_for_eval(&self) -> &[u8] {
        &self.instance_labels
    }
}

/// Distribution-shift corruptions applied to observed features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    /// Adds a fixed signed offset of 0.25 * severity * feature std.
    Shift,
    /// Adds fresh Gaussian noise with std 0.1 * severity * feature std.
    Noise,
    /// Multiplies each feature by a factor from [1 - 0.08s, 1 + 0.08s].
    Scale,
    /// Rotates random disjoint feature pairs by 0.05 * severity radians.
    ChannelMix,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 4] = [
        CorruptionKind::Shift,
        CorruptionKind::Noise,
        CorruptionKind::Scale,
        CorruptionKind::ChannelMix,
    ];

    fn stream(self) -> u64 {
        match self {
            CorruptionKind::Shift => 1,
            CorruptionKind::Noise => 2,
            CorruptionKind::Scale => 3,
            CorruptionKind::ChannelMix => 4,
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CorruptionKind::Shift => "shift",
            CorruptionKind::Noise => "noise",
            CorruptionKind::Scale => "scale",
            CorruptionKind::ChannelMix => "channel_mix",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Corruption {
    pub kind: CorruptionKind,
    /// Severity level, 1..=5.
    pub severity: u8,
    pub seed: u64,
}

/// A full dataset: bags plus the config that produced them and any
/// corruptions applied since.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub generator: GeneratorConfig,
    pub bags: Vec<BagSample>,
    pub corruptions: Vec<Corruption>,
}

impl Dataset {
    pub fn generate(config: &GeneratorConfig) -> Result<Dataset, SynthError> {
        config.validate()?;
        let prototypes = class_prototypes(config);
        let warp = Warp::new(config);
        let bags = (0..config.n_bags as u64)
            .map(|bag_id| generate_bag(config, bag_id, &prototypes, &warp))
            .collect();
        Ok(Dataset { generator: config.clone(), bags, corruptions: vec![] })
    }

    pub fn obs_dim(&self) -> usize {
        self.generator.obs_dim
    }

    pub fn n_instances_total(&self) -> usize {
        self.bags.iter().map(|b| b.n_instances()).sum()
    }

    /// Bag count per bag label, indexed by label.
    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.generator.n_classes + 1];
        for b in &self.bags {
            counts[b.bag_label as usize] += 1;
        }
        counts
    }

    /// Per-feature mean and standard deviation over every instance.
    pub fn feature_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let d = self.obs_dim();
        let mut mean = vec![0.0; d];
        let mut n = 0usize;
        for b in &self.bags {
            for r in 0..b.instances.rows {
                for (m, &x) in mean.iter_mut().zip(b.instances.row(r)) {
                    *m += x;
                }
            }
            n += b.instances.rows;
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut var = vec![0.0; d];
        for b in &self.bags {
            for r in 0..b.instances.rows {
                for (v, (&x, &m)) in var.iter_mut().zip(b.instances.row(r).iter().zip(&mean)) {
                    *v += (x - m) * (x - m);
                }
            }
        }
        let std = var.iter().map(|v| (v / n as f64).sqrt()).collect();
        (mean, std)
    }

    /// A copy with every instance label zeroed but bag labels intact. Used
    /// to verify that training reads only the weak (bag-level) supervision.
    pub fn stripped_of_instance_labels(&self) -> Dataset {
        let bags = self
            .bags
            .iter()
            .map(|b| {
                BagSample::from_parts(
                    b.bag_id,
                    b.instances.clone(),
                    vec![0; b.n_instances()],
                    b.bag_label,
                )
            })
            .collect();
        Dataset { generator: self.generator.clone(), bags, corruptions: self.corruptions.clone() }
    }

    /// Stratified split by bag label using largest-remainder quotas within
    /// each label stratum. Any split with a positive fraction must end up
    /// non-empty. Deterministic in `seed`.
    pub fn split(&self, fractions: &[f64], seed: u64) -> Result<Vec<Dataset>, SynthError> {
        let total: f64 = fractions.iter().sum();
        if fractions.is_empty()
            || fractions.iter().any(|&f| !(0.0..=1.0).contains(&f))
            || (total - 1.0).abs() > 1e-9
        {
            return Err(SynthError::BadSplitFractions(fractions.to_vec()));
        }
        let mut strata: Vec<Vec<usize>> = vec![vec![]; self.generator.n_classes + 1];
        for (i, b) in self.bags.iter().enumerate() {
            strata[b.bag_label as usize].push(i);
        }
        let mut assignment: Vec<Vec<usize>> = vec![vec![]; fractions.len()];
        for (label, stratum) in strata.iter().enumerate() {
            if stratum.is_empty() {
                continue;
            }
            let mut order = stratum.clone();
            order.shuffle(&mut seed::rng(seed::mix(seed, label as u64)));
            let quotas = largest_remainder(fractions, order.len());
            let mut cursor = 0;
            for (k, &q) in quotas.iter().enumerate() {
                assignment[k].extend_from_slice(&order[cursor..cursor + q]);
                cursor += q;
            }
        }
        for (k, idx) in assignment.iter().enumerate() {
            if fractions[k] > 0.0 && idx.is_empty() {
                return Err(SynthError::EmptySplit { index: k, fraction: fractions[k] });
            }
        }
        Ok(assignment
            .into_iter()
            .map(|mut idx| {
                idx.sort_unstable();
                Dataset {
                    generator: self.generator.clone(),
                    bags: idx.iter().map(|&i| self.bags[i].clone()).collect(),
                    corruptions: self.corruptions.clone(),
                }
            })
            .collect())
    }

    /// Applies a corruption in place. Magnitudes are calibrated against this
    /// dataset's per-feature standard deviation at call time.
    pub fn corrupt(&mut self, corruption: &Corruption) -> Result<(), SynthError> {
        if !(1..=5).contains(&corruption.severity) {
            return Err(SynthError::InvalidConfig(format!(
                "corruption severity must be 1..=5, got {}",
                corruption.severity
            )));
        }
        let s = corruption.severity as f64;
        let d = self.obs_dim();
        let (_, std) = self.feature_stats();
        let mut rng = seed::rng(seed::mix(corruption.seed, corruption.kind.stream()));
        match corruption.kind {
            CorruptionKind::Shift => {
                let offset: Vec<f64> = std
                    .iter()
                    .map(|&sd| {
                        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                        0.25 * s * sd * sign
                    })
                    .collect();
                self.for_each_instance(|row| {
                    for (x, &o) in row.iter_mut().zip(&offset) {
                        *x += o;
                    }
                });
            }
            CorruptionKind::Noise => {
                let scale: Vec<f64> = std.iter().map(|&sd| 0.1 * s * sd).collect();
                for b in &mut self.bags {
                    for r in 0..b.instances.rows {
                        for (x, &sc) in b.instances.row_mut(r).iter_mut().zip(&scale) {
                            *x += sc * rng.sample::<f64, _>(StandardNormal);
                        }
                    }
                }
            }
            CorruptionKind::Scale => {
                let lo = 1.0 - 0.08 * s;
                let hi = 1.0 + 0.08 * s;
                let factor: Vec<f64> = (0..d).map(|_| rng.random_range(lo..hi)).collect();
                self.for_each_instance(|row| {
                    for (x, &f) in row.iter_mut().zip(&factor) {
                        *x *= f;
                    }
                });
            }
            CorruptionKind::ChannelMix => {
                // Disjoint random feature pairs, each rotated by a fixed
                // small angle with a random sign: an orthogonal map close to
                // the identity, so instance norms are preserved.
                let mut perm: Vec<usize> = (0..d).collect();
                perm.shuffle(&mut rng);
                let theta = 0.05 * s;
                let rotations: Vec<(usize, usize, f64, f64)> = perm
                    .chunks_exact(2)
                    .map(|p| {
                        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                        (p[0], p[1], (sign * theta).cos(), (sign * theta).sin())
                    })
                    .collect();
                self.for_each_instance(|row| {
                    for &(a, b, c, sn) in &rotations {
                        let (xa, xb) = (row[a], row[b]);
                        row[a] = c * xa - sn * xb;
                        row[b] = sn * xa + c * xb;
                    }
                });
            }
        }
        self.corruptions.push(*corruption);
        Ok(())
    }

    fn for_each_instance(&mut self, mut f: impl FnMut(&mut [f64])) {
        for b in &mut self.bags {
            for r in 0..b.instances.rows {
                f(b.instances.row_mut(r));
            }
        }
    }
}

/// Largest-remainder allocation of `n` items to `fractions` quotas.
/// Remainder ties break toward the lower index.
fn largest_remainder(fractions: &[f64], n: usize) -> Vec<usize> {
    let mut quotas: Vec<usize> = fractions.iter().map(|f| (f * n as f64).floor() as usize).collect();
    let assigned: usize = quotas.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = fractions[a] * n as f64 - quotas[a] as f64;
        let rb = fractions[b] * n as f64 - quotas[b] as f64;
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for k in 0..(n - assigned) {
        quotas[order[k]] += 1;
    }
    quotas
}

/// Orthonormal class directions scaled so any two prototypes are exactly
/// `separation` apart; background is the origin.
fn class_prototypes(config: &GeneratorConfig) -> Matrix {
    let mut rng = seed::rng(seed::mix(config.master_seed, PROTO_STREAM));
    let (c, d) = (config.n_classes, config.latent_dim);
    let mut proto = Matrix::zeros(c, d);
    for i in 0..c {
        loop {
            let mut v: Vec<f64> =
                (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            for j in 0..i {
                let dot: f64 = v.iter().zip(proto.row(j)).map(|(&a, &b)| a * b).sum();
                for (vk, &pk) in v.iter_mut().zip(proto.row(j)) {
                    *vk -= dot * pk;
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                for x in &mut v {
                    *x /= norm;
                }
                proto.row_mut(i).copy_from_slice(&v);
                break;
            }
        }
    }
    // Unit directions scaled by separation / sqrt(2) put any two class
    // prototypes exactly `separation` apart.
    let scale = config.separation / 2.0_f64.sqrt();
    for x in &mut proto.data {
        *x *= scale;
    }
    proto
}

/// Fixed random tanh network mapping latents to observed features.
struct Warp {
    layers: Vec<(Matrix, Vec<f64>)>,
}

impl Warp {
    fn new(config: &GeneratorConfig) -> Warp {
        let mut rng = seed::rng(seed::mix(config.master_seed, WARP_STREAM));
        let mut dims = vec![config.latent_dim];
        for _ in 1..config.warp_depth {
            dims.push(config.warp_hidden);
        }
        if config.warp_depth > 0 {
            dims.push(config.obs_dim);
        }
        let mut layers = vec![];
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let lim = config.warp_gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut m = Matrix::zeros(fan_in, fan_out);
            for x in &mut m.data {
                *x = rng.random_range(-lim..lim);
            }
            let bias = (0..fan_out).map(|_| rng.random_range(-0.1..0.1)).collect();
            layers.push((m, bias));
        }
        Warp { layers }
    }

    /// Applies the warp to a `[n, latent_dim]` matrix of latents.
    fn apply(&self, latents: Matrix) -> Matrix {
        let mut x = latents;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let mut y = x.matmul(w);
            for r in 0..y.rows {
                let row = y.row_mut(r);
                for (v, &bj) in row.iter_mut().zip(b) {
                    *v += bj;
                }
                if i + 1 < self.layers.len() {
                    for v in row {
                        *v = v.tanh();
                    }
                }
            }
            x = y;
        }
        x
    }
}

fn generate_bag(
    config: &GeneratorConfig,
    bag_id: u64,
    prototypes: &Matrix,
    warp: &Warp,
) -> BagSample {
    let mut rng = seed::rng(seed::mix(config.master_seed, bag_id));
    let n = rng.random_range(config.n_instances_min..=config.n_instances_max);

    // Bag class drawn uniformly over 0..=n_classes; 0 is a negative bag.
    let bag_class = rng.random_range(0..=config.n_classes as u8);
    let mut labels = vec![0u8; n];
    if bag_class > 0 {
        let fraction =
            rng.random_range(config.positive_fraction_min..=config.positive_fraction_max);
        let n_pos = ((fraction * n as f64).ceil() as usize).clamp(1, n);
        let mut positions: Vec<usize> = (0..n).collect();
        positions.shuffle(&mut rng);
        // One instance carries the bag class so the label max is exact; the
        // other positives draw uniformly from the classes at or below it.
        labels[positions[0]] = bag_class;
        for &p in &positions[1..n_pos] {
            labels[p] = rng.random_range(1..=bag_class);
        }
    }

    let mut latents = Matrix::zeros(n, config.latent_dim);
    for (i, &label) in labels.iter().enumerate() {
        let row = latents.row_mut(i);
        for x in row.iter_mut() {
            *x = config.noise_std * rng.sample::<f64, _>(StandardNormal);
        }
        if label > 0 {
            for (x, &p) in row.iter_mut().zip(prototypes.row(label as usize - 1)) {
                *x += p;
            }
        }
    }
    let observed = warp.apply(latents);
    let bag = BagSample::new(bag_id, observed, labels);
    debug_assert_eq!(bag.bag_label, bag_class);
    bag
}

// ---- single-file dataset format ----
//
// Layout: an ASCII header line `VIBDS 1 <manifest_len>\n`, then
// `manifest_len` bytes of TOML manifest, then a binary blob of bag records.
// Each record is: instance count as u64 LE, row-major features as f64 LE,
// one u8 instance label per instance, then the bag label u8. The manifest
// carries per-bag byte offsets into the blob and the blob's SHA-256.

const MAGIC: &str = "VIBDS";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    obs_dim: usize,
    n_bags: usize,
    blob_sha256: String,
    bag_ids: Vec<u64>,
    bag_offsets: Vec<u64>,
    generator: GeneratorConfig,
    #[serde(default)]
    corruptions: Vec<Corruption>,
}

/// Exact byte size of one encoded bag record.
fn record_len(n_instances: usize, obs_dim: usize) -> usize {
    8 + n_instances * obs_dim * 8 + n_instances + 1
}

/// Exact on-disk size of a dataset, given its manifest length is `m`.
pub fn predicted_file_len(dataset: &Dataset, manifest_len: usize) -> usize {
    let header = format!("{MAGIC} {FORMAT_VERSION} {manifest_len}\n").len();
    let blob: usize = dataset
        .bags
        .iter()
        .map(|b| record_len(b.n_instances(), dataset.obs_dim()))
        .sum();
    header + manifest_len + blob
}

impl Dataset {
    /// Serializes to `path` atomically (temp file + rename).
    pub fn save(&self, path: &Path) -> Result<(), SynthError> {
        let mut blob = Vec::new();
        let mut offsets = Vec::with_capacity(self.bags.len());
        for b in &self.bags {
            assert_eq!(b.instances.cols, self.obs_dim(), "bag width mismatch");
            offsets.push(blob.len() as u64);
            blob.extend_from_slice(&(b.n_instances() as u64).to_le_bytes());
            for &x in &b.instances.data {
                blob.extend_from_slice(&x.to_le_bytes());
            }
            blob.extend_from_slice(&b.instance_labels);
            blob.push(b.bag_label);
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            obs_dim: self.obs_dim(),
            n_bags: self.bags.len(),
            blob_sha256: hex(&Sha256::digest(&blob)),
            bag_ids: self.bags.iter().map(|b| b.bag_id).collect(),
            bag_offsets: offsets,
            generator: self.generator.clone(),
            corruptions: self.corruptions.clone(),
        };
        let manifest =
            toml::to_string(&manifest).map_err(|e| SynthError::Format(e.to_string()))?;
        let header = format!("{MAGIC} {FORMAT_VERSION} {}\n", manifest.len());

        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(header.as_bytes())?;
            f.write_all(manifest.as_bytes())?;
            f.write_all(&blob)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset, SynthError> {
        let raw = fs::read(path)?;
        let nl = raw
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| SynthError::Format("missing header line".into()))?;
        let header = std::str::from_utf8(&raw[..nl])
            .map_err(|_| SynthError::Format("header is not UTF-8".into()))?;
        let mut parts = header.split_ascii_whitespace();
        if parts.next() != Some(MAGIC) {
            return Err(SynthError::Format("bad magic".into()));
        }
        let version: u32 = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| SynthError::Format("bad version field".into()))?;
        if version != FORMAT_VERSION {
            return Err(SynthError::Format(format!("unsupported format version {version}")));
        }
        let manifest_len: usize = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| SynthError::Format("bad manifest length".into()))?;
        if parts.next().is_some() {
            return Err(SynthError::Format("trailing header fields".into()));
        }
        let manifest_start = nl + 1;
        let blob_start = manifest_start + manifest_len;
        if raw.len() < blob_start {
            return Err(SynthError::Format("file truncated in manifest".into()));
        }
        let manifest_text = std::str::from_utf8(&raw[manifest_start..blob_start])
            .map_err(|_| SynthError::Format("manifest is not UTF-8".into()))?;
        let manifest: Manifest =
            toml::from_str(manifest_text).map_err(|e| SynthError::Format(e.to_string()))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(SynthError::Format("manifest version mismatch".into()));
        }
        if manifest.bag_ids.len() != manifest.n_bags
            || manifest.bag_offsets.len() != manifest.n_bags
        {
            return Err(SynthError::Format("manifest bag tables disagree with n_bags".into()));
        }
        let blob = &raw[blob_start..];
        if hex(&Sha256::digest(blob)) != manifest.blob_sha256 {
            return Err(SynthError::ChecksumMismatch);
        }

        let d = manifest.obs_dim;
        let mut bags = Vec::with_capacity(manifest.n_bags);
        let mut cursor = 0usize;
        for (i, &bag_id) in manifest.bag_ids.iter().enumerate() {
            if manifest.bag_offsets[i] as usize != cursor {
                return Err(SynthError::Format(format!("bag {i} offset mismatch")));
            }
            if blob.len() < cursor + 8 {
                return Err(SynthError::Format("file truncated in bag header".into()));
            }
            let n = u64::from_le_bytes(blob[cursor..cursor + 8].try_into().unwrap()) as usize;
            if blob.len() < cursor + record_len(n, d) {
                return Err(SynthError::Format("file truncated in bag record".into()));
            }
            cursor += 8;
            let mut data = Vec::with_capacity(n * d);
            for k in 0..n * d {
                let at = cursor + k * 8;
                data.push(f64::from_le_bytes(blob[at..at + 8].try_into().unwrap()));
            }
            cursor += n * d * 8;
            let labels = blob[cursor..cursor + n].to_vec();
            cursor += n;
            let bag_label = blob[cursor];
            cursor += 1;
            bags.push(BagSample::from_parts(bag_id, Matrix::from_vec(n, d, data), labels, bag_label));
        }
        if cursor != blob.len() {
            return Err(SynthError::Format("trailing bytes after last bag".into()));
        }
        Ok(Dataset { generator: manifest.generator, bags, corruptions: manifest.corruptions })
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
