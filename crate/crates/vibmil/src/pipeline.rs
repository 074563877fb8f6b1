//! The three-stage training pipeline.
//!
//! Stage 1 trains the instance gate and a scoring head on frozen encoder
//! features with the gated bag objective. Between stages each training bag is
//! distilled to its top-K instances by gate probability (or a random K for
//! ablation). Stage 2 fine-tunes the encoder end-to-end on the distilled
//! sub-bags with a fresh head. Stage 3 freezes the encoder and retrains a
//! final head on full bags. Evaluation compares the fine-tuned encoder
//! against its frozen initialization.
//!
//! Every random draw is keyed by (seed, stream, epoch, bag) through
//! [`crate::seed`], so a run interrupted at any epoch boundary and resumed
//! from its checkpoint reproduces the uninterrupted run bit for bit.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::checkpoint::{self, CheckpointError, Record};
use crate::matrix::Matrix;
use crate::metrics;
use crate::nn::{
    random_k_indices, top_k_indices, vib_forward, Encoder, Gate, Head, HeadVariant, ModelConfig,
};
use crate::optim::{clip_gradients, AdamW, OptimizerConfig};
use crate::seed::{mix, mix_all, rng};
use crate::synthgen::{BagSample, Dataset};

// Stream tags for deriving independent RNGs from one seed.
const ENC_STREAM: u64 = 0x454e_4330; // "ENC0"
const GATE_STREAM: u64 = 0x4741_5445; // "GATE"
const HEAD_STREAM: u64 = 0x4845_4144; // "HEAD"
const SHUFFLE_STREAM: u64 = 0x5348_5546; // "SHUF"
const MASK_STREAM: u64 = 0x4d41_534b; // "MASK"
const SELECT_STREAM: u64 = 0x5345_4c43; // "SELC"
const BASELINE_STREAM: u64 = 0x4241_5345; // "BASE"
const EVAL_STREAM: u64 = 0x4556_414c; // "EVAL"
const KMEANS_STREAM: u64 = 0x4b4d_4e53; // "KMNS"
const VSAMPLE_STREAM: u64 = 0x5653_4d50; // "VSMP"

/// Instances sampled per class for clustering-based evaluation.
pub const V_SCORE_PER_CLASS: usize = 200;
/// Neighbor count for the KNN bag-embedding probes.
pub const KNN_K: usize = 5;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    /// A stage's mean epoch loss stopped being finite. Stage 0 marks an
    /// auxiliary head trained outside the three pipeline stages.
    #[error("training diverged (stage {stage}, epoch {epoch})")]
    Diverged { stage: u8, epoch: usize },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// How stage 2 picks the K instances kept from each bag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    TopK,
    RandomK,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub epochs: usize,
    pub lr_gate: f64,
    pub lr_head: f64,
    /// Weight of the gate's KL penalty in the bag objective.
    pub beta: f64,
    /// Prior keep-probability the gate is regularized toward.
    pub pi: f64,
    /// K for the validation recall reported after every epoch.
    pub recall_k: usize,
    pub seed: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            epochs: 25,
            lr_gate: 1e-3,
            lr_head: 1e-3,
            beta: 0.1,
            pi: 0.05,
            recall_k: 64,
            seed: 101,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    pub epochs: usize,
    pub lr_backbone: f64,
    pub lr_head: f64,
    /// Instances kept per bag by distillation.
    pub k: usize,
    /// Number of leading encoder layers left frozen during fine-tuning.
    pub frozen_layers: usize,
    pub selection: SelectionMode,
    pub seed: u64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            epochs: 25,
            lr_backbone: 1e-4,
            lr_head: 1e-3,
            k: 512,
            frozen_layers: 1,
            selection: SelectionMode::TopK,
            seed: 202,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage3Config {
    pub epochs: usize,
    pub lr_head: f64,
    pub seed: u64,
}

impl Default for Stage3Config {
    fn default() -> Self {
        Stage3Config { epochs: 25, lr_head: 1e-3, seed: 303 }
    }
}

/// Full pipeline configuration. Everything that affects a run is here; two
/// runs with equal configs and datasets produce identical results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Seed for parameter initialization (training schedules use the
    /// per-stage seeds).
    pub init_seed: u64,
    pub model: ModelConfig,
    /// Head variant used by every stage.
    pub head: HeadVariant,
    pub optimizer: OptimizerConfig,
    /// Global gradient-norm clip applied per update; zero disables clipping.
    pub grad_clip: f64,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub stage3: Stage3Config,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            init_seed: 17,
            model: ModelConfig::default(),
            head: HeadVariant::GatedAttention,
            optimizer: OptimizerConfig::default(),
            grad_clip: 5.0,
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            stage3: Stage3Config::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |msg: &str| Err(PipelineError::Config(msg.to_string()));
        if !(self.grad_clip.is_finite() && self.grad_clip >= 0.0) {
            return bad("grad_clip must be finite and non-negative");
        }
        let lrs = [
            ("stage1.lr_gate", self.stage1.lr_gate),
            ("stage1.lr_head", self.stage1.lr_head),
            ("stage2.lr_backbone", self.stage2.lr_backbone),
            ("stage2.lr_head", self.stage2.lr_head),
            ("stage3.lr_head", self.stage3.lr_head),
        ];
        for (name, lr) in lrs {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(PipelineError::Config(format!("{name} must be a positive number")));
            }
        }
        if !(self.stage1.beta.is_finite() && self.stage1.beta >= 0.0) {
            return bad("stage1.beta must be finite and non-negative");
        }
        if !(self.stage1.pi > 0.0 && self.stage1.pi < 1.0) {
            return bad("stage1.pi must lie strictly between 0 and 1");
        }
        if self.stage1.recall_k == 0 {
            return bad("stage1.recall_k must be at least 1");
        }
        if self.stage2.k == 0 {
            return bad("stage2.k must be at least 1");
        }
        if self.model.feat_dim == 0 {
            return bad("model.feat_dim must be at least 1");
        }
        Ok(())
    }
}

/// Hex SHA-256 of the serialized config; stored in checkpoints so a resume
/// with a different configuration is rejected.
pub fn config_digest(cfg: &TrainConfig) -> String {
    let text = toml::to_string(cfg).expect("config serializes");
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage1Epoch {
    pub epoch: usize,
    pub loss: f64,
    pub ce: f64,
    pub kl: f64,
    /// Gate recall at `recall_k` over validation bags: the fraction of
    /// positive bags whose top-K selection keeps at least one positive.
    pub val_recall: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageEpoch {
    pub epoch: usize,
    pub loss: f64,
}

/// Instance-level encoder forward counts, by pipeline phase. Reconstruction
/// work done while resuming from a checkpoint is excluded, so an interrupted
/// run reports the same counts as an uninterrupted one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ForwardCounters {
    /// Frozen-feature caching for stages 1 and 2 (train and validation).
    pub stage1_cache: u64,
    /// Fine-tuning passes over distilled sub-bags.
    pub stage2_train: u64,
    /// What `stage2_train` would have been on full bags.
    pub stage2_equivalent_full: u64,
    /// One full-bag extraction pass feeding stage 3.
    pub stage3_extract: u64,
    /// Final evaluation.
    pub eval: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Bag-level test metrics of the full pipeline (fine-tuned encoder,
    /// stage-3 head).
    pub test_macro_auc: Option<f64>,
    pub test_macro_f1: f64,
    /// Same protocol with the frozen initial encoder and its own head.
    pub frozen_macro_auc: Option<f64>,
    pub frozen_macro_f1: f64,
    /// Instance-clustering agreement on fine-tuned features.
    pub v_score_finetuned: f64,
    /// On frozen-encoder features.
    pub v_score_frozen: f64,
    /// On raw observed features.
    pub v_score_raw: f64,
    /// Gate recall at `recall_k` on test bags (frozen features, as trained).
    pub gate_recall: Option<f64>,
    /// KNN bag-label accuracy over mean-pooled bag embeddings.
    pub knn_mean: f64,
    /// Same over max-pooled embeddings.
    pub knn_max: f64,
}

/// Everything trained during a run.
pub struct TrainedModels {
    /// Fine-tuned encoder (after stage 2).
    pub encoder: Encoder,
    /// The same initialization, never trained.
    pub encoder_frozen: Encoder,
    pub gate: Gate,
    /// Stage-1 scoring head.
    pub head1: Head,
    /// Stage-2 fine-tuning head.
    pub head2: Head,
    /// Stage-3 final head.
    pub head3: Head,
    /// Head trained on frozen features during evaluation, if evaluation ran.
    pub baseline_head: Option<Head>,
    pub n_labels: usize,
}

pub struct PipelineOutcome {
    pub stage1_log: Vec<Stage1Epoch>,
    pub stage2_log: Vec<StageEpoch>,
    pub stage3_log: Vec<StageEpoch>,
    /// Per training bag: (bag id, instance indices kept by distillation).
    pub distill: Vec<(u64, Vec<usize>)>,
    pub counters: ForwardCounters,
    pub eval: Option<EvalReport>,
    pub models: TrainedModels,
}

pub enum RunStatus {
    Completed(Box<PipelineOutcome>),
    /// Stopped at `RunControl::stop_after`; resume from the checkpoint.
    Paused,
}

/// A position in the run: `epochs_done` epochs of `stage` are complete.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopPoint {
    pub stage: u8,
    pub epochs_done: usize,
}

/// Checkpointing and interruption policy for one `run_pipeline` call.
#[derive(Debug, Clone, Default)]
pub struct RunControl {
    /// Where checkpoints are written; `None` disables checkpointing.
    pub checkpoint_path: Option<PathBuf>,
    /// Write a checkpoint every this many epochs (0: only at `stop_after`).
    pub checkpoint_every: usize,
    /// Restore this checkpoint before running.
    pub resume_from: Option<PathBuf>,
    /// Pause the run once this point is reached.
    pub stop_after: Option<StopPoint>,
    /// Skip final evaluation (stage-1-only sweeps, interrupted runs).
    pub skip_final_eval: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    config_digest: String,
    stage: u8,
    epochs_done: usize,
    stage1_log: Vec<Stage1Epoch>,
    stage2_log: Vec<StageEpoch>,
    stage3_log: Vec<StageEpoch>,
    counters: ForwardCounters,
}

/// Runs the pipeline on pre-split datasets.
pub fn run_pipeline(
    train: &Dataset,
    val: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    control: &RunControl,
) -> Result<RunStatus, PipelineError> {
    cfg.validate()?;
    validate_datasets(train, val, test)?;
    let mut runner = Runner::new(train, val, test, cfg, control)?;
    if let Some(path) = &control.resume_from {
        runner.restore(path)?;
    }
    runner.run()
}

fn validate_datasets(train: &Dataset, val: &Dataset, test: &Dataset) -> Result<(), PipelineError> {
    for (name, ds) in [("train", train), ("val", val), ("test", test)] {
        if ds.bags.is_empty() {
            return Err(PipelineError::Config(format!("{name} split has no bags")));
        }
        if ds.generator.n_classes != train.generator.n_classes {
            return Err(PipelineError::Config(format!(
                "{name} split has {} classes but train has {}",
                ds.generator.n_classes, train.generator.n_classes
            )));
        }
        if ds.obs_dim() != train.obs_dim() {
            return Err(PipelineError::Config(format!(
                "{name} split has {} features but train has {}",
                ds.obs_dim(),
                train.obs_dim()
            )));
        }
    }
    Ok(())
}

/// Training progress stored in a checkpoint, readable without rebuilding
/// the models.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointSummary {
    pub stage: u8,
    pub epochs_done: usize,
    pub stage1_log: Vec<Stage1Epoch>,
    pub stage2_log: Vec<StageEpoch>,
    pub stage3_log: Vec<StageEpoch>,
    pub counters: ForwardCounters,
}

/// Reads the progress metadata of a checkpoint file.
pub fn read_checkpoint_summary(path: &Path) -> Result<CheckpointSummary, PipelineError> {
    let (meta, _records): (CheckpointMeta, Vec<Record>) = checkpoint::load(path)?;
    Ok(CheckpointSummary {
        stage: meta.stage,
        epochs_done: meta.epochs_done,
        stage1_log: meta.stage1_log,
        stage2_log: meta.stage2_log,
        stage3_log: meta.stage3_log,
        counters: meta.counters,
    })
}

/// Rebuilds the full model family from `cfg` and a checkpoint written under
/// the same configuration. `train` must be the training split of the
/// checkpointed run: the frozen baseline encoder refits its normalization
/// statistics on it, while the fine-tuned encoder restores its statistics
/// from the checkpoint.
pub fn load_models(
    cfg: &TrainConfig,
    train: &Dataset,
    path: &Path,
) -> Result<TrainedModels, PipelineError> {
    cfg.validate()?;
    let (meta, records): (CheckpointMeta, Vec<Record>) = checkpoint::load(path)?;
    if meta.config_digest != config_digest(cfg) {
        return Err(PipelineError::Config(
            "checkpoint was written with a different configuration".into(),
        ));
    }
    let n_labels = train.generator.n_classes + 1;
    let (mut encoder, mut encoder_frozen, gate, head1, head2, head3) =
        build_components(cfg, train.obs_dim(), n_labels)?;
    let train_mats: Vec<&Matrix> = train.bags.iter().map(|b| &b.instances).collect();
    encoder_frozen.fit_norm_stats(&train_mats);
    let params: HashMap<String, Tensor> =
        named_params(&encoder, &gate, &head1, &head2, &head3).into_iter().collect();
    scatter_records(records, &params, &mut encoder)?;
    encoder.set_frozen_prefix(encoder.n_layers());
    Ok(TrainedModels {
        encoder,
        encoder_frozen,
        gate,
        head1,
        head2,
        head3,
        baseline_head: None,
        n_labels,
    })
}

/// Builds the two encoders, the gate, and the three heads from the seeded
/// streams that `cfg.init_seed` defines.
fn build_components(
    cfg: &TrainConfig,
    obs_dim: usize,
    n_labels: usize,
) -> Result<(Encoder, Encoder, Gate, Head, Head, Head), PipelineError> {
    // Two encoders from the same stream: one is fine-tuned, the other
    // preserves the initialization for the frozen baseline.
    let encoder = Encoder::new(obs_dim, &cfg.model, &mut rng(mix(cfg.init_seed, ENC_STREAM)));
    let encoder_frozen = Encoder::new(obs_dim, &cfg.model, &mut rng(mix(cfg.init_seed, ENC_STREAM)));
    if cfg.stage2.frozen_layers > encoder.n_layers() {
        return Err(PipelineError::Config(format!(
            "stage2.frozen_layers is {} but the encoder has {} layers",
            cfg.stage2.frozen_layers,
            encoder.n_layers()
        )));
    }
    let gate = Gate::new(encoder.feat_dim(), &mut rng(mix(cfg.init_seed, GATE_STREAM)));
    let make_head = |tag: u64| {
        Head::new(
            cfg.head,
            cfg.model.feat_dim,
            n_labels,
            cfg.model.attention_dim,
            &mut rng(mix_all(cfg.init_seed, &[HEAD_STREAM, tag])),
        )
    };
    Ok((encoder, encoder_frozen, gate, make_head(1), make_head(2), make_head(3)))
}

fn named_params(
    encoder: &Encoder,
    gate: &Gate,
    head1: &Head,
    head2: &Head,
    head3: &Head,
) -> Vec<(String, Tensor)> {
    let mut out = encoder.params();
    out.extend(gate.params());
    out.extend(prefixed("h1", head1.params()));
    out.extend(prefixed("h2", head2.params()));
    out.extend(prefixed("h3", head3.params()));
    out
}

type OptEntries = HashMap<String, Vec<(String, Vec<f64>)>>;

/// Applies parameter and normalization records to the live models and
/// returns the optimizer and distillation records for callers that resume
/// training.
fn scatter_records(
    records: Vec<Record>,
    params: &HashMap<String, Tensor>,
    encoder: &mut Encoder,
) -> Result<(OptEntries, HashMap<u64, Vec<usize>>), PipelineError> {
    let mut norm_entries: Vec<(String, Vec<f64>)> = vec![];
    let mut opt_entries: OptEntries = HashMap::new();
    let mut distill_map: HashMap<u64, Vec<usize>> = HashMap::new();
    for (name, shape, data) in records {
        if let Some(rest) = name.strip_prefix("p.") {
            let t = params.get(rest).ok_or_else(|| {
                PipelineError::Config(format!("checkpoint has unknown parameter {rest}"))
            })?;
            if t.shape() != shape.as_slice() {
                return Err(PipelineError::Config(format!(
                    "checkpoint parameter {rest} has shape {shape:?}, expected {:?}",
                    t.shape()
                )));
            }
            t.set_data(&data);
        } else if let Some(rest) = name.strip_prefix("n.") {
            norm_entries.push((rest.to_string(), data));
        } else if let Some(rest) = name.strip_prefix("o.") {
            let (group, entry) = rest.split_once('.').ok_or_else(|| {
                PipelineError::Config(format!("malformed optimizer record {name}"))
            })?;
            opt_entries.entry(group.to_string()).or_default().push((entry.to_string(), data));
        } else if let Some(rest) = name.strip_prefix("d.") {
            let bag_id: u64 = rest.parse().map_err(|_| {
                PipelineError::Config(format!("malformed distillation record {name}"))
            })?;
            distill_map.insert(bag_id, data.iter().map(|&x| x as usize).collect());
        } else {
            return Err(PipelineError::Config(format!("unknown checkpoint record {name}")));
        }
    }
    if !norm_entries.is_empty() {
        encoder.set_norm_state(&norm_entries);
    }
    Ok((opt_entries, distill_map))
}

struct Runner<'a> {
    train: &'a Dataset,
    val: &'a Dataset,
    test: &'a Dataset,
    cfg: &'a TrainConfig,
    control: &'a RunControl,
    n_labels: usize,
    encoder: Encoder,
    encoder_frozen: Encoder,
    gate: Gate,
    head1: Head,
    head2: Head,
    head3: Head,
    opt_gate: AdamW,
    opt_head1: AdamW,
    opt_enc: AdamW,
    opt_head2: AdamW,
    opt_head3: AdamW,
    train_frozen_feats: Vec<Matrix>,
    val_frozen_feats: Vec<Matrix>,
    distill: Vec<(u64, Vec<usize>)>,
    stage1_log: Vec<Stage1Epoch>,
    stage2_log: Vec<StageEpoch>,
    stage3_log: Vec<StageEpoch>,
    counters: ForwardCounters,
    stage: u8,
    epochs_done: usize,
}

impl<'a> Runner<'a> {
    fn new(
        train: &'a Dataset,
        val: &'a Dataset,
        test: &'a Dataset,
        cfg: &'a TrainConfig,
        control: &'a RunControl,
    ) -> Result<Runner<'a>, PipelineError> {
        let n_labels = train.generator.n_classes + 1;
        let (mut encoder, mut encoder_frozen, gate, head1, head2, head3) =
            build_components(cfg, train.obs_dim(), n_labels)?;

        let train_mats: Vec<&Matrix> = train.bags.iter().map(|b| &b.instances).collect();
        encoder.fit_norm_stats(&train_mats);
        encoder_frozen.fit_norm_stats(&train_mats);

        let opt_gate = AdamW::new(gate.params(), cfg.stage1.lr_gate, cfg.optimizer);
        let opt_head1 = AdamW::new(head1.params(), cfg.stage1.lr_head, cfg.optimizer);
        let opt_enc = AdamW::new(encoder.params(), cfg.stage2.lr_backbone, cfg.optimizer);
        let opt_head2 = AdamW::new(head2.params(), cfg.stage2.lr_head, cfg.optimizer);
        let opt_head3 = AdamW::new(head3.params(), cfg.stage3.lr_head, cfg.optimizer);

        let mut counters = ForwardCounters::default();
        encoder_frozen.reset_instance_forwards();
        let train_frozen_feats = cache_features(&encoder_frozen, &train.bags);
        let val_frozen_feats = cache_features(&encoder_frozen, &val.bags);
        counters.stage1_cache += encoder_frozen.instance_forwards();
        encoder_frozen.reset_instance_forwards();

        Ok(Runner {
            train,
            val,
            test,
            cfg,
            control,
            n_labels,
            encoder,
            encoder_frozen,
            gate,
            head1,
            head2,
            head3,
            opt_gate,
            opt_head1,
            opt_enc,
            opt_head2,
            opt_head3,
            train_frozen_feats,
            val_frozen_feats,
            distill: vec![],
            stage1_log: vec![],
            stage2_log: vec![],
            stage3_log: vec![],
            counters,
            stage: 1,
            epochs_done: 0,
        })
    }

    fn run(mut self) -> Result<RunStatus, PipelineError> {
        if self.stage == 1 {
            let (start, end) = (self.epochs_done, self.cfg.stage1.epochs);
            for epoch in start..end {
                self.stage1_epoch(epoch)?;
                self.epochs_done = epoch + 1;
                if self.after_epoch()? {
                    return Ok(RunStatus::Paused);
                }
            }
            self.stage = 2;
            self.epochs_done = 0;
        }
        if self.stage == 2 {
            if self.distill.is_empty() {
                self.distill = self.compute_distill();
            }
            self.encoder.set_frozen_prefix(self.cfg.stage2.frozen_layers);
            let (start, end) = (self.epochs_done, self.cfg.stage2.epochs);
            for epoch in start..end {
                self.stage2_epoch(epoch)?;
                self.epochs_done = epoch + 1;
                if self.after_epoch()? {
                    return Ok(RunStatus::Paused);
                }
            }
            self.stage = 3;
            self.epochs_done = 0;
        }
        if self.stage == 3 {
            self.encoder.set_frozen_prefix(self.encoder.n_layers());
            // Fine-tuning drifts activation statistics away from the stats
            // fitted at initialization; refit so the features the final head
            // trains on are standardized like the frozen baseline's. With an
            // untouched encoder this recomputes identical stats.
            let train_mats: Vec<&Matrix> = self.train.bags.iter().map(|b| &b.instances).collect();
            self.encoder.fit_norm_stats(&train_mats);
            self.encoder.reset_instance_forwards();
            let feats = cache_features(&self.encoder, &self.train.bags);
            if self.epochs_done == 0 {
                // On resume the re-extraction is reconstruction, not new
                // pipeline work; the restored counters already include it.
                self.counters.stage3_extract += self.encoder.instance_forwards();
            }
            self.encoder.reset_instance_forwards();
            let labels = bag_labels(&self.train.bags);
            let (start, end) = (self.epochs_done, self.cfg.stage3.epochs);
            for epoch in start..end {
                let loss = head_epoch(
                    &self.head3,
                    &mut self.opt_head3,
                    &feats,
                    &labels,
                    self.cfg.stage3.seed,
                    epoch,
                    self.cfg.grad_clip,
                );
                if !loss.is_finite() {
                    return Err(PipelineError::Diverged { stage: 3, epoch });
                }
                self.stage3_log.push(StageEpoch { epoch, loss });
                self.epochs_done = epoch + 1;
                if self.after_epoch()? {
                    return Ok(RunStatus::Paused);
                }
            }
        }
        let (eval, baseline) = if self.control.skip_final_eval {
            (None, None)
        } else {
            let (report, head) = self.final_eval()?;
            (Some(report), Some(head))
        };
        Ok(RunStatus::Completed(Box::new(self.into_outcome(eval, baseline))))
    }

    fn stage1_epoch(&mut self, epoch: usize) -> Result<(), PipelineError> {
        let s1 = self.cfg.stage1.clone();
        let clip = self.cfg.grad_clip;
        let union: Vec<(String, Tensor)> =
            self.opt_gate.params().iter().chain(self.opt_head1.params()).cloned().collect();
        let order = shuffled_indices(
            self.train.bags.len(),
            mix_all(s1.seed, &[SHUFFLE_STREAM, epoch as u64]),
        );
        let (mut loss_sum, mut ce_sum, mut kl_sum) = (0.0, 0.0, 0.0);
        for &bi in &order {
            let bag = &self.train.bags[bi];
            let z = Tensor::from_matrix(&self.train_frozen_feats[bi], false);
            let mut mask_rng = rng(mix_all(s1.seed, &[MASK_STREAM, epoch as u64, bag.bag_id]));
            let out = vib_forward(
                &self.gate,
                &self.head1,
                &z,
                bag.bag_label as usize,
                s1.beta,
                s1.pi,
                &mut mask_rng,
            );
            out.loss.backward();
            if clip > 0.0 {
                clip_gradients(&union, clip);
            }
            self.opt_gate.step();
            self.opt_head1.step();
            self.opt_gate.zero_grads();
            self.opt_head1.zero_grads();
            loss_sum += out.loss.item();
            ce_sum += out.ce.item();
            kl_sum += out.kl.item();
        }
        let n = order.len() as f64;
        let loss = loss_sum / n;
        if !loss.is_finite() {
            return Err(PipelineError::Diverged { stage: 1, epoch });
        }
        let val_recall =
            gate_recall(&self.gate, &self.val_frozen_feats, &self.val.bags, s1.recall_k);
        self.stage1_log.push(Stage1Epoch {
            epoch,
            loss,
            ce: ce_sum / n,
            kl: kl_sum / n,
            val_recall,
        });
        Ok(())
    }

    fn compute_distill(&self) -> Vec<(u64, Vec<usize>)> {
        let k = self.cfg.stage2.k;
        self.train
            .bags
            .iter()
            .enumerate()
            .map(|(bi, bag)| {
                let idx = match self.cfg.stage2.selection {
                    SelectionMode::TopK => {
                        let probs = self
                            .gate
                            .probs(&Tensor::from_matrix(&self.train_frozen_feats[bi], false))
                            .to_vec();
                        top_k_indices(&probs, k)
                    }
                    SelectionMode::RandomK => random_k_indices(
                        bag.n_instances(),
                        k,
                        &mut rng(mix_all(self.cfg.stage2.seed, &[SELECT_STREAM, bag.bag_id])),
                    ),
                };
                (bag.bag_id, idx)
            })
            .collect()
    }

    fn stage2_epoch(&mut self, epoch: usize) -> Result<(), PipelineError> {
        let s2 = self.cfg.stage2.clone();
        let clip = self.cfg.grad_clip;
        let union: Vec<(String, Tensor)> =
            self.opt_enc.params().iter().chain(self.opt_head2.params()).cloned().collect();
        let order = shuffled_indices(
            self.train.bags.len(),
            mix_all(s2.seed, &[SHUFFLE_STREAM, epoch as u64]),
        );
        self.encoder.reset_instance_forwards();
        let mut loss_sum = 0.0;
        for &bi in &order {
            let bag = &self.train.bags[bi];
            let sub = bag.instances.select_rows(&self.distill[bi].1);
            let z = self.encoder.forward(&Tensor::from_matrix(&sub, false));
            let loss = self.head2.forward(&z).cross_entropy(&[bag.bag_label as usize]);
            loss.backward();
            if clip > 0.0 {
                clip_gradients(&union, clip);
            }
            self.opt_enc.step();
            self.opt_head2.step();
            self.opt_enc.zero_grads();
            self.opt_head2.zero_grads();
            loss_sum += loss.item();
        }
        self.counters.stage2_train += self.encoder.instance_forwards();
        self.counters.stage2_equivalent_full += self.train.n_instances_total() as u64;
        self.encoder.reset_instance_forwards();
        let loss = loss_sum / order.len() as f64;
        if !loss.is_finite() {
            return Err(PipelineError::Diverged { stage: 2, epoch });
        }
        self.stage2_log.push(StageEpoch { epoch, loss });
        Ok(())
    }

    /// Checkpoints per the control policy; true means pause here.
    fn after_epoch(&mut self) -> Result<bool, PipelineError> {
        let at_stop = self.control.stop_after
            == Some(StopPoint { stage: self.stage, epochs_done: self.epochs_done });
        if let Some(path) = &self.control.checkpoint_path {
            let cadence = self.control.checkpoint_every > 0
                && self.epochs_done.is_multiple_of(self.control.checkpoint_every);
            if at_stop || cadence {
                self.save_checkpoint(path)?;
            }
        }
        Ok(at_stop)
    }

    fn all_params(&self) -> Vec<(String, Tensor)> {
        named_params(&self.encoder, &self.gate, &self.head1, &self.head2, &self.head3)
    }

    fn save_checkpoint(&self, path: &Path) -> Result<(), CheckpointError> {
        let meta = CheckpointMeta {
            config_digest: config_digest(self.cfg),
            stage: self.stage,
            epochs_done: self.epochs_done,
            stage1_log: self.stage1_log.clone(),
            stage2_log: self.stage2_log.clone(),
            stage3_log: self.stage3_log.clone(),
            counters: self.counters,
        };
        let mut records: Vec<Record> = vec![];
        for (name, t) in self.all_params() {
            records.push((format!("p.{name}"), t.shape().to_vec(), t.to_vec()));
        }
        for (name, data) in self.encoder.norm_state() {
            records.push((format!("n.{name}"), vec![data.len()], data));
        }
        let opt_states = [
            ("gate", self.opt_gate.state()),
            ("h1", self.opt_head1.state()),
            ("enc", self.opt_enc.state()),
            ("h2", self.opt_head2.state()),
            ("h3", self.opt_head3.state()),
        ];
        for (group, state) in opt_states {
            for (entry, data) in state {
                records.push((format!("o.{group}.{entry}"), vec![data.len()], data));
            }
        }
        for (bag_id, idx) in &self.distill {
            let data: Vec<f64> = idx.iter().map(|&i| i as f64).collect();
            records.push((format!("d.{bag_id}"), vec![data.len()], data));
        }
        checkpoint::save(path, &meta, &records)
    }

    fn restore(&mut self, path: &Path) -> Result<(), PipelineError> {
        let (meta, records): (CheckpointMeta, Vec<Record>) = checkpoint::load(path)?;
        if meta.config_digest != config_digest(self.cfg) {
            return Err(PipelineError::Config(
                "checkpoint was written with a different configuration".into(),
            ));
        }
        if !(1..=3).contains(&meta.stage) {
            return Err(PipelineError::Config(format!(
                "checkpoint is at unknown stage {}",
                meta.stage
            )));
        }
        let params: HashMap<String, Tensor> = self.all_params().into_iter().collect();
        let (mut opt_entries, mut distill_map) =
            scatter_records(records, &params, &mut self.encoder)?;
        let groups: [(&str, &mut AdamW); 5] = [
            ("gate", &mut self.opt_gate),
            ("h1", &mut self.opt_head1),
            ("enc", &mut self.opt_enc),
            ("h2", &mut self.opt_head2),
            ("h3", &mut self.opt_head3),
        ];
        for (group, opt) in groups {
            if let Some(entries) = opt_entries.remove(group) {
                opt.load_state(&entries);
            }
        }
        if !distill_map.is_empty() {
            let mut distill = Vec::with_capacity(self.train.bags.len());
            for bag in &self.train.bags {
                let idx = distill_map.remove(&bag.bag_id).ok_or_else(|| {
                    PipelineError::Config(
                        "checkpoint distillation records do not match the training set".into(),
                    )
                })?;
                distill.push((bag.bag_id, idx));
            }
            self.distill = distill;
        }
        self.stage1_log = meta.stage1_log;
        self.stage2_log = meta.stage2_log;
        self.stage3_log = meta.stage3_log;
        self.counters = meta.counters;
        self.stage = meta.stage;
        self.epochs_done = meta.epochs_done;
        Ok(())
    }

    fn final_eval(&mut self) -> Result<(EvalReport, Head), PipelineError> {
        self.encoder.reset_instance_forwards();
        self.encoder_frozen.reset_instance_forwards();

        // Test features come from deployment-standardized copies: the norm
        // statistics are refit on the evaluation bags so covariate shift is
        // absorbed before the heads see the features.
        let test_mats: Vec<&Matrix> = self.test.bags.iter().map(|b| &b.instances).collect();
        let enc_eval = self.encoder.standardized_to(&test_mats);
        let frozen_eval = self.encoder_frozen.standardized_to(&test_mats);
        let test_ft = cache_features(&enc_eval, &self.test.bags);
        let test_frozen = cache_features(&frozen_eval, &self.test.bags);
        let train_ft = cache_features(&self.encoder, &self.train.bags);
        let train_frozen = cache_features(&self.encoder_frozen, &self.train.bags);
        let test_labels = bag_labels(&self.test.bags);
        let train_labels = bag_labels(&self.train.bags);

        let (test_macro_auc, test_macro_f1) =
            evaluate_head(&self.head3, &test_ft, &test_labels, self.n_labels);

        let baseline_cfg = HeadTrainConfig {
            variant: self.cfg.head,
            attention_dim: self.cfg.model.attention_dim,
            epochs: self.cfg.stage3.epochs,
            lr: self.cfg.stage3.lr_head,
            grad_clip: self.cfg.grad_clip,
            optimizer: self.cfg.optimizer,
            seed: mix(self.cfg.init_seed, BASELINE_STREAM),
        };
        let baseline =
            train_head_on_features(&train_frozen, &train_labels, self.n_labels, &baseline_cfg)?;
        let (frozen_macro_auc, frozen_macro_f1) =
            evaluate_head(&baseline, &test_frozen, &test_labels, self.n_labels);

        let v_seed = mix(self.cfg.init_seed, EVAL_STREAM);
        let v_score_finetuned = feature_v_score(
            &self.test.bags,
            Some(&test_ft),
            V_SCORE_PER_CLASS,
            self.n_labels,
            self.n_labels,
            v_seed,
        );
        let v_score_frozen = feature_v_score(
            &self.test.bags,
            Some(&test_frozen),
            V_SCORE_PER_CLASS,
            self.n_labels,
            self.n_labels,
            v_seed,
        );
        let v_score_raw = feature_v_score(
            &self.test.bags,
            None,
            V_SCORE_PER_CLASS,
            self.n_labels,
            self.n_labels,
            v_seed,
        );

        let recall =
            gate_recall(&self.gate, &test_frozen, &self.test.bags, self.cfg.stage1.recall_k);

        let train_mean = bag_embeddings(&train_ft, metrics::bag_embedding_mean);
        let test_mean = bag_embeddings(&test_ft, metrics::bag_embedding_mean);
        let train_max = bag_embeddings(&train_ft, metrics::bag_embedding_max);
        let test_max = bag_embeddings(&test_ft, metrics::bag_embedding_max);
        let knn_mean =
            metrics::knn_accuracy(&train_mean, &train_labels, &test_mean, &test_labels, KNN_K);
        let knn_max =
            metrics::knn_accuracy(&train_max, &train_labels, &test_max, &test_labels, KNN_K);

        self.counters.eval += self.encoder.instance_forwards()
            + self.encoder_frozen.instance_forwards()
            + enc_eval.instance_forwards()
            + frozen_eval.instance_forwards();
        self.encoder.reset_instance_forwards();
        self.encoder_frozen.reset_instance_forwards();

        Ok((
            EvalReport {
                test_macro_auc,
                test_macro_f1,
                frozen_macro_auc,
                frozen_macro_f1,
                v_score_finetuned,
                v_score_frozen,
                v_score_raw,
                gate_recall: recall,
                knn_mean,
                knn_max,
            },
            baseline,
        ))
    }

    fn into_outcome(self, eval: Option<EvalReport>, baseline_head: Option<Head>) -> PipelineOutcome {
        PipelineOutcome {
            stage1_log: self.stage1_log,
            stage2_log: self.stage2_log,
            stage3_log: self.stage3_log,
            distill: self.distill,
            counters: self.counters,
            eval,
            models: TrainedModels {
                encoder: self.encoder,
                encoder_frozen: self.encoder_frozen,
                gate: self.gate,
                head1: self.head1,
                head2: self.head2,
                head3: self.head3,
                baseline_head,
                n_labels: self.n_labels,
            },
        }
    }
}

fn prefixed(prefix: &str, params: Vec<(String, Tensor)>) -> Vec<(String, Tensor)> {
    params.into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)).collect()
}

fn shuffled_indices(n: usize, seed_value: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng(seed_value));
    idx
}

/// Detached encoder features for each bag, in bag order.
pub fn cache_features(encoder: &Encoder, bags: &[BagSample]) -> Vec<Matrix> {
    bags.iter().map(|b| encoder.extract(&b.instances)).collect()
}

/// Bag labels in bag order.
pub fn bag_labels(bags: &[BagSample]) -> Vec<u8> {
    bags.iter().map(|b| b.bag_label).collect()
}

/// One optimization pass over all bags; returns the mean loss.
fn head_epoch(
    head: &Head,
    opt: &mut AdamW,
    features: &[Matrix],
    labels: &[u8],
    seed_value: u64,
    epoch: usize,
    clip: f64,
) -> f64 {
    let order = shuffled_indices(features.len(), mix_all(seed_value, &[SHUFFLE_STREAM, epoch as u64]));
    let mut loss_sum = 0.0;
    for &bi in &order {
        let z = Tensor::from_matrix(&features[bi], false);
        let loss = head.forward(&z).cross_entropy(&[labels[bi] as usize]);
        loss.backward();
        if clip > 0.0 {
            clip_gradients(opt.params(), clip);
        }
        opt.step();
        opt.zero_grads();
        loss_sum += loss.item();
    }
    loss_sum / order.len().max(1) as f64
}

/// Configuration for training a standalone head on fixed features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadTrainConfig {
    pub variant: HeadVariant,
    pub attention_dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub grad_clip: f64,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for HeadTrainConfig {
    fn default() -> Self {
        HeadTrainConfig {
            variant: HeadVariant::GatedAttention,
            attention_dim: 16,
            epochs: 25,
            lr: 1e-3,
            grad_clip: 5.0,
            optimizer: OptimizerConfig::default(),
            seed: 7,
        }
    }
}

/// Trains a fresh head on per-bag feature matrices. Used for the frozen
/// baseline and available to experiment drivers.
pub fn train_head_on_features(
    features: &[Matrix],
    labels: &[u8],
    n_labels: usize,
    cfg: &HeadTrainConfig,
) -> Result<Head, PipelineError> {
    assert_eq!(features.len(), labels.len(), "feature/label count mismatch");
    if features.is_empty() {
        return Err(PipelineError::Config("no bags to train a head on".into()));
    }
    let feat_dim = features[0].cols;
    let head = Head::new(
        cfg.variant,
        feat_dim,
        n_labels,
        cfg.attention_dim,
        &mut rng(mix(cfg.seed, HEAD_STREAM)),
    );
    let mut opt = AdamW::new(head.params(), cfg.lr, cfg.optimizer);
    for epoch in 0..cfg.epochs {
        let loss = head_epoch(&head, &mut opt, features, labels, cfg.seed, epoch, cfg.grad_clip);
        if !loss.is_finite() {
            return Err(PipelineError::Diverged { stage: 0, epoch });
        }
    }
    Ok(head)
}

/// Applies a head to per-bag features; returns (macro-AUC, macro-F1).
pub fn evaluate_head(
    head: &Head,
    features: &[Matrix],
    labels: &[u8],
    n_labels: usize,
) -> (Option<f64>, f64) {
    let mut scores = Matrix::zeros(features.len(), n_labels);
    let mut preds = vec![0u8; features.len()];
    for (i, f) in features.iter().enumerate() {
        let logits = head.forward(&Tensor::from_matrix(f, false)).to_vec();
        for (c, &v) in logits.iter().enumerate() {
            scores.set(i, c, v);
        }
        preds[i] = metrics::argmax(&logits) as u8;
    }
    (metrics::macro_auc(&scores, labels, n_labels), metrics::macro_f1(&preds, labels, n_labels))
}

/// Encodes bags and evaluates a head on them; returns (macro-AUC, macro-F1).
/// The encoder's normalization statistics are refit on the given bags
/// first (deployment-time standardization), so evaluation under covariate
/// shift measures the features, not the stale statistics.
pub fn evaluate_on_bags(
    encoder: &Encoder,
    head: &Head,
    bags: &[BagSample],
    n_labels: usize,
) -> (Option<f64>, f64) {
    let mats: Vec<&Matrix> = bags.iter().map(|b| &b.instances).collect();
    let standardized = encoder.standardized_to(&mats);
    let features = cache_features(&standardized, bags);
    evaluate_head(head, &features, &bag_labels(bags), n_labels)
}

/// Fraction of positive bags whose gate top-K keeps at least one positive
/// instance (evaluation only). `None` when no bag has positives.
pub fn gate_recall(gate: &Gate, features: &[Matrix], bags: &[BagSample], k: usize) -> Option<f64> {
    let mut acc = 0.0;
    let mut n = 0usize;
    for (bag, feats) in bags.iter().zip(features) {
        let probs = gate.probs(&Tensor::from_matrix(feats, false)).to_vec();
        if let Some(r) = metrics::top_k_recall(&probs, bag.instance_labels_for_eval(), k) {
            acc += r;
            n += 1;
        }
    }
    (n > 0).then(|| acc / n as f64)
}

/// Clusters a balanced, seeded sample of instances (at most `per_class` per
/// instance label) into `clusters` groups and scores cluster/label
/// agreement. `features` must align with `bags`; `None` clusters the raw
/// observed features.
pub fn feature_v_score(
    bags: &[BagSample],
    features: Option<&[Matrix]>,
    per_class: usize,
    n_labels: usize,
    clusters: usize,
    seed_value: u64,
) -> f64 {
    assert!(clusters >= 1, "clusters must be at least 1");
    let mut by_class: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n_labels];
    for (bi, bag) in bags.iter().enumerate() {
        for (ii, &l) in bag.instance_labels_for_eval().iter().enumerate() {
            by_class[l as usize].push((bi, ii));
        }
    }
    let mut chosen: Vec<(usize, usize, u8)> = Vec::new();
    for (c, list) in by_class.iter_mut().enumerate() {
        list.shuffle(&mut rng(mix_all(seed_value, &[VSAMPLE_STREAM, c as u64])));
        for &(bi, ii) in list.iter().take(per_class) {
            chosen.push((bi, ii, c as u8));
        }
    }
    if chosen.is_empty() {
        return 0.0;
    }
    let dim = match features {
        Some(f) => f[0].cols,
        None => bags[0].instances.cols,
    };
    let mut points = Matrix::zeros(chosen.len(), dim);
    let mut labels = Vec::with_capacity(chosen.len());
    for (r, &(bi, ii, c)) in chosen.iter().enumerate() {
        let row = match features {
            Some(f) => f[bi].row(ii),
            None => bags[bi].instances.row(ii),
        };
        for (j, &x) in row.iter().enumerate() {
            points.set(r, j, x);
        }
        labels.push(c);
    }
    let k = clusters.min(chosen.len());
    let assignments = metrics::kmeans(&points, k, mix(seed_value, KMEANS_STREAM));
    metrics::v_score(&labels, &assignments)
}

/// Stacks one embedding per bag (e.g. `metrics::bag_embedding_mean`) into a
/// row matrix.
pub fn bag_embeddings(features: &[Matrix], embed: fn(&Matrix) -> Vec<f64>) -> Matrix {
    assert!(!features.is_empty(), "no bags to embed");
    let d = features[0].cols;
    let mut out = Matrix::zeros(features.len(), d);
    for (i, f) in features.iter().enumerate() {
        for (j, &x) in embed(f).iter().enumerate() {
            out.set(i, j, x);
        }
    }
    out
}

/// Which hyperparameter an ablation sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    /// KL weight in the stage-1 objective.
    Beta,
    /// Distillation K.
    TopK,
    /// Stage-2 backbone learning rate with clipping disabled.
    LearningRate,
    /// Top-K against random-K distillation.
    Selection,
}

/// One grid point of a sweep. `val_recall` is the best stage-1 validation
/// recall seen during the run; `test_macro_auc` is filled when the run went
/// through the final evaluation. A diverged run keeps its row with
/// `status == "diverged"` and no metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub parameter: String,
    pub value: String,
    /// "ok" or "diverged".
    pub status: String,
    pub val_recall: Option<f64>,
    pub test_macro_auc: Option<f64>,
}

const BETA_GRID: [f64; 6] = [1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0];
const TOPK_GRID: [usize; 5] = [128, 256, 512, 1024, 2048];
const LR_GRID: [f64; 7] = [1e-3, 5e-4, 1e-4, 5e-5, 1e-5, 5e-6, 1e-6];

/// Runs one sweep, one pipeline run per grid point. Divergence is recorded
/// in the row rather than aborting the sweep. The base config's epoch
/// budgets are kept as-is; setting stages 2 and 3 to zero epochs turns the
/// beta sweep into a cheap stage-1-only recall sweep.
pub fn run_ablation(
    kind: AblationKind,
    base: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
    test: &Dataset,
) -> Result<Vec<AblationRow>, PipelineError> {
    let mut rows = vec![];
    match kind {
        AblationKind::Beta => {
            for beta in BETA_GRID {
                let mut cfg = base.clone();
                cfg.stage1.beta = beta;
                rows.push(sweep_row("beta", format!("{beta}"), train, val, test, &cfg)?);
            }
        }
        AblationKind::TopK => {
            for k in TOPK_GRID {
                let mut cfg = base.clone();
                cfg.stage2.k = k;
                rows.push(sweep_row("top_k", format!("{k}"), train, val, test, &cfg)?);
            }
        }
        AblationKind::LearningRate => {
            for lr in LR_GRID {
                let mut cfg = base.clone();
                cfg.stage2.lr_backbone = lr;
                cfg.grad_clip = 0.0;
                rows.push(sweep_row("lr_backbone", format!("{lr}"), train, val, test, &cfg)?);
            }
        }
        AblationKind::Selection => {
            for (name, mode) in [("top_k", SelectionMode::TopK), ("random_k", SelectionMode::RandomK)]
            {
                let mut cfg = base.clone();
                cfg.stage2.selection = mode;
                rows.push(sweep_row("selection", name.to_string(), train, val, test, &cfg)?);
            }
        }
    }
    Ok(rows)
}

fn sweep_row(
    parameter: &str,
    value: String,
    train: &Dataset,
    val: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
) -> Result<AblationRow, PipelineError> {
    // With no later stages configured there is no trained head to evaluate.
    let skip_eval = cfg.stage2.epochs == 0 && cfg.stage3.epochs == 0;
    let control = RunControl { skip_final_eval: skip_eval, ..RunControl::default() };
    match run_pipeline(train, val, test, cfg, &control) {
        Ok(RunStatus::Completed(out)) => {
            let val_recall = out
                .stage1_log
                .iter()
                .filter_map(|e| e.val_recall)
                .fold(None, |acc: Option<f64>, r| Some(acc.map_or(r, |a| a.max(r))));
            let test_macro_auc = out.eval.as_ref().and_then(|e| e.test_macro_auc);
            Ok(AblationRow {
                parameter: parameter.to_string(),
                value,
                status: "ok".into(),
                val_recall,
                test_macro_auc,
            })
        }
        Ok(RunStatus::Paused) => unreachable!("no stop point was set"),
        Err(PipelineError::Diverged { .. }) => Ok(AblationRow {
            parameter: parameter.to_string(),
            value,
            status: "diverged".into(),
            val_recall: None,
            test_macro_auc: None,
        }),
        Err(e) => Err(e),
    }
}
