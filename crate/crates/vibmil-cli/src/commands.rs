//! The operations behind the subcommands.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use vibmil::metrics;
use vibmil::nn::HeadVariant;
use vibmil::pipeline::{
    bag_embeddings, bag_labels, cache_features, evaluate_head, feature_v_score, gate_recall,
    load_models, read_checkpoint_summary, run_ablation, run_pipeline, train_head_on_features,
    AblationKind, EvalReport, ForwardCounters, HeadTrainConfig, PipelineError, RunControl,
    RunStatus, Stage1Epoch, StageEpoch, StopPoint, TrainConfig, TrainedModels,
};
use vibmil::seed::mix;
use vibmil::synthgen::{Corruption, CorruptionKind, Dataset};
use vibmil::Matrix;

use crate::config::{EvalConfig, ExperimentConfig};
use crate::report::{
    cell, corruption_tag, write_atomic, write_report_csv, read_report_csv, ReportRow, CSV_HEADER,
    LOG_HEADER,
};
use crate::CliError;

/// Generates a dataset file and prints its size and class balance.
pub fn generate(config: &Path, seed: Option<u64>, out: &Path) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(config, seed)?;
    let ds = Dataset::generate(&cfg.dataset)?;
    ds.save(out)?;
    let balance: Vec<String> =
        ds.label_counts().iter().enumerate().map(|(c, n)| format!("{c}:{n}")).collect();
    println!("wrote {} ({} bags, {} instances)", out.display(), ds.bags.len(), ds.n_instances_total());
    println!("bag label balance: {}", balance.join(" "));
    Ok(())
}

/// Applies one seeded corruption to a dataset file. Labels and generator
/// settings pass through untouched; only features change.
pub fn corrupt(
    data: &Path,
    kind: CorruptionKind,
    severity: u8,
    seed: u64,
    out: &Path,
) -> Result<(), CliError> {
    let mut ds = Dataset::load(data)?;
    ds.corrupt(&Corruption { kind, severity, seed })?;
    ds.save(out)?;
    println!("wrote {} (corruptions: {})", out.display(), corruption_tag(&ds.corruptions));
    Ok(())
}

/// What `--stage` asks for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageSel {
    One(u8),
    All,
    Ablation(AblationKind),
}

pub fn parse_stage(s: &str) -> Result<StageSel, CliError> {
    match s {
        "1" => Ok(StageSel::One(1)),
        "2" => Ok(StageSel::One(2)),
        "3" => Ok(StageSel::One(3)),
        "all" => Ok(StageSel::All),
        "ablation:beta" => Ok(StageSel::Ablation(AblationKind::Beta)),
        "ablation:topk" => Ok(StageSel::Ablation(AblationKind::TopK)),
        "ablation:lr" => Ok(StageSel::Ablation(AblationKind::LearningRate)),
        "ablation:randomk" => Ok(StageSel::Ablation(AblationKind::Selection)),
        other => Err(CliError::Config(format!(
            "unknown stage {other:?}; use 1, 2, 3, all, or ablation:{{beta,topk,lr,randomk}}"
        ))),
    }
}

/// Trains the requested stage(s) or runs an ablation sweep. Stages resume
/// from the previous stage's checkpoint, so `--stage all` is exactly the
/// three single-stage invocations run back to back.
pub fn train(
    config: &Path,
    data: &Path,
    out_flag: Option<&Path>,
    seed: Option<u64>,
    stage: &str,
) -> Result<(), CliError> {
    let sel = parse_stage(stage)?;
    let cfg = ExperimentConfig::load(config, seed)?;
    let out_dir = out_flag.unwrap_or(&cfg.out_dir).to_path_buf();
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::Io(format!("cannot create {}: {e}", out_dir.display())))?;
    let ds = Dataset::load(data)?;
    let splits = ds.split(&cfg.split.fractions, cfg.split.seed)?;
    let mut it = splits.into_iter();
    let (train_s, val_s, test_s) =
        (it.next().unwrap(), it.next().unwrap(), it.next().unwrap());
    log::info!(
        "split {} bags into {}/{}/{} (train/val/test)",
        ds.bags.len(),
        train_s.bags.len(),
        val_s.bags.len(),
        test_s.bags.len()
    );
    match sel {
        StageSel::Ablation(kind) => ablation(kind, &cfg, &train_s, &val_s, &test_s, &out_dir),
        StageSel::One(n) => segment(n, &cfg, &train_s, &val_s, &test_s, &out_dir),
        StageSel::All => {
            segment(1, &cfg, &train_s, &val_s, &test_s, &out_dir)?;
            segment(2, &cfg, &train_s, &val_s, &test_s, &out_dir)?;
            segment(3, &cfg, &train_s, &val_s, &test_s, &out_dir)
        }
    }
}

fn checkpoint_file(out_dir: &Path, stage: u8) -> PathBuf {
    out_dir.join(format!("stage{stage}.ckpt"))
}

fn stage_epochs(cfg: &TrainConfig, stage: u8) -> usize {
    match stage {
        1 => cfg.stage1.epochs,
        2 => cfg.stage2.epochs,
        _ => cfg.stage3.epochs,
    }
}

/// Runs one stage against the checkpoint chain in `out_dir`. Stages 1 and 2
/// pause at their boundary; stage 3 runs to completion, evaluates, and
/// writes the final report.
fn segment(
    stage: u8,
    cfg: &ExperimentConfig,
    train_s: &Dataset,
    val_s: &Dataset,
    test_s: &Dataset,
    out_dir: &Path,
) -> Result<(), CliError> {
    let epochs = stage_epochs(&cfg.train, stage);
    if epochs == 0 {
        return Err(CliError::Config(format!("stage {stage} has zero epochs configured")));
    }
    let ck = checkpoint_file(out_dir, stage);
    let resume_from = if stage > 1 {
        let prev = checkpoint_file(out_dir, stage - 1);
        if !prev.exists() {
            return Err(CliError::Io(format!(
                "stage {stage} resumes from {}; run --stage {} first",
                prev.display(),
                stage - 1
            )));
        }
        Some(prev)
    } else {
        None
    };
    let finishes = stage == 3;
    let control = RunControl {
        checkpoint_path: Some(ck.clone()),
        checkpoint_every: 1,
        resume_from,
        stop_after: if finishes { None } else { Some(StopPoint { stage, epochs_done: epochs }) },
        skip_final_eval: false,
    };
    log::info!("stage {stage}: {epochs} epochs");
    match run_pipeline(train_s, val_s, test_s, &cfg.train, &control) {
        Ok(RunStatus::Paused) => {
            let summary = read_checkpoint_summary(&ck)?;
            write_logs(
                &out_dir.join("logs.csv"),
                &summary.stage1_log,
                &summary.stage2_log,
                &summary.stage3_log,
            )?;
            write_counters(&out_dir.join("counters.csv"), &summary.counters)?;
            println!("stage {stage} done: {}", ck.display());
            Ok(())
        }
        Ok(RunStatus::Completed(out)) => {
            write_logs(&out_dir.join("logs.csv"), &out.stage1_log, &out.stage2_log, &out.stage3_log)?;
            write_counters(&out_dir.join("counters.csv"), &out.counters)?;
            let report = out.eval.as_ref().expect("the final segment always evaluates");
            let rows = model_rows(report, &cfg.eval, &corruption_tag(&test_s.corruptions));
            write_report_csv(&out_dir.join("report.csv"), &rows)?;
            println!("stage {stage} done: {}", ck.display());
            for row in &rows {
                println!("{}", row.to_csv_line());
            }
            Ok(())
        }
        Err(PipelineError::Diverged { stage: at, epoch }) => {
            // Keep what the run produced: the logs that reached a
            // checkpoint, plus a report row recording the divergence.
            let mut row = ReportRow::new("run", "stage", &at.to_string());
            row.status = "diverged".into();
            row.corruptions = corruption_tag(&test_s.corruptions);
            write_report_csv(&out_dir.join("report.csv"), &[row])?;
            for prev in (1..=stage).rev() {
                let path = checkpoint_file(out_dir, prev);
                if path.exists() {
                    let summary = read_checkpoint_summary(&path)?;
                    write_logs(
                        &out_dir.join("logs.csv"),
                        &summary.stage1_log,
                        &summary.stage2_log,
                        &summary.stage3_log,
                    )?;
                    break;
                }
            }
            Err(CliError::Diverged(format!("training diverged at stage {at}, epoch {epoch}")))
        }
        Err(e) => Err(e.into()),
    }
}

fn model_rows(r: &EvalReport, e: &EvalConfig, tag: &str) -> Vec<ReportRow> {
    let on = |enabled: bool, v: Option<f64>| if enabled { v } else { None };
    let mut finetuned = ReportRow::new("model", "model", "finetuned");
    finetuned.macro_auc = on(e.auc, r.test_macro_auc);
    finetuned.macro_f1 = on(e.f1, Some(r.test_macro_f1));
    finetuned.v_score = on(e.v_score, Some(r.v_score_finetuned));
    finetuned.gate_recall = on(e.gate_recall, r.gate_recall);
    finetuned.knn_mean = on(e.knn, Some(r.knn_mean));
    finetuned.knn_max = on(e.knn, Some(r.knn_max));
    finetuned.corruptions = tag.into();
    let mut frozen = ReportRow::new("model", "model", "frozen");
    frozen.macro_auc = on(e.auc, r.frozen_macro_auc);
    frozen.macro_f1 = on(e.f1, Some(r.frozen_macro_f1));
    frozen.v_score = on(e.v_score, Some(r.v_score_frozen));
    frozen.corruptions = tag.into();
    let mut raw = ReportRow::new("model", "model", "raw");
    raw.v_score = on(e.v_score, Some(r.v_score_raw));
    raw.corruptions = tag.into();
    vec![finetuned, frozen, raw]
}

fn ablation(
    kind: AblationKind,
    cfg: &ExperimentConfig,
    train_s: &Dataset,
    val_s: &Dataset,
    test_s: &Dataset,
    out_dir: &Path,
) -> Result<(), CliError> {
    let rows = run_ablation(kind, &cfg.train, train_s, val_s, test_s)?;
    let tag = corruption_tag(&test_s.corruptions);
    let report_rows: Vec<ReportRow> = rows
        .iter()
        .map(|r| {
            let mut row = ReportRow::new("ablation", &r.parameter, &r.value);
            row.status = r.status.clone();
            row.val_recall = r.val_recall;
            row.macro_auc = r.test_macro_auc;
            row.corruptions = tag.clone();
            row
        })
        .collect();
    write_report_csv(&out_dir.join("ablation.csv"), &report_rows)?;
    println!("wrote {} ({} rows)", out_dir.join("ablation.csv").display(), report_rows.len());
    for row in &report_rows {
        println!("{}", row.to_csv_line());
    }
    Ok(())
}

fn write_logs(
    path: &Path,
    s1: &[Stage1Epoch],
    s2: &[StageEpoch],
    s3: &[StageEpoch],
) -> Result<(), CliError> {
    let mut text = String::from(LOG_HEADER);
    text.push('\n');
    for e in s1 {
        writeln!(text, "1,{},{},{},{},{}", e.epoch, e.loss, e.ce, e.kl, cell(e.val_recall))
            .expect("writing to a String cannot fail");
    }
    for e in s2 {
        writeln!(text, "2,{},{},,,", e.epoch, e.loss).expect("writing to a String cannot fail");
    }
    for e in s3 {
        writeln!(text, "3,{},{},,,", e.epoch, e.loss).expect("writing to a String cannot fail");
    }
    write_atomic(path, text.as_bytes())
}

fn write_counters(path: &Path, c: &ForwardCounters) -> Result<(), CliError> {
    let text = format!(
        "counter,value\nstage1_cache,{}\nstage2_train,{}\nstage2_equivalent_full,{}\n\
stage3_extract,{}\neval,{}\n",
        c.stage1_cache, c.stage2_train, c.stage2_equivalent_full, c.stage3_extract, c.eval
    );
    write_atomic(path, text.as_bytes())
}

/// Aggregation to evaluate a checkpoint under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum EvalHead {
    /// The checkpoint's stage-3 head.
    Attention,
    /// A freshly trained mean-pool head over the checkpointed encoder.
    Mean,
    /// A freshly trained max-pool head over the checkpointed encoder.
    Max,
    /// KNN over mean bag embeddings.
    KnnMean,
    /// KNN over max bag embeddings.
    KnnMax,
}

/// Evaluates a checkpoint on a dataset, one report row per requested head.
/// `train_data` must be the dataset the checkpoint was trained from: it
/// rebuilds normalization statistics and fits the evaluation-time heads
/// and KNN probes.
#[allow(clippy::too_many_arguments)]
pub fn eval(
    config: &Path,
    checkpoint: &Path,
    data: &Path,
    train_data: &Path,
    heads: &[EvalHead],
    out_flag: Option<&Path>,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(config, seed)?;
    let out_dir = out_flag.unwrap_or(&cfg.out_dir).to_path_buf();
    let eval_ds = Dataset::load(data)?;
    let full = Dataset::load(train_data)?;
    if eval_ds.generator.n_classes != full.generator.n_classes
        || eval_ds.obs_dim() != full.obs_dim()
    {
        return Err(CliError::Config(
            "the evaluation dataset and the training dataset disagree on shape".into(),
        ));
    }
    // The checkpoint saw the train split of the full dataset, so the same
    // split must be reproduced here.
    let train_s = full.split(&cfg.split.fractions, cfg.split.seed)?.swap_remove(0);
    let models = load_models(&cfg.train, &train_s, checkpoint).map_err(|e| match e {
        PipelineError::Checkpoint(ce) => {
            CliError::Io(format!("cannot load checkpoint {}: {ce}", checkpoint.display()))
        }
        other => other.into(),
    })?;
    let heads: Vec<EvalHead> =
        if heads.is_empty() { vec![EvalHead::Attention] } else { heads.to_vec() };
    if heads.iter().any(|h| matches!(h, EvalHead::KnnMean | EvalHead::KnnMax))
        && cfg.eval.knn_k > train_s.bags.len()
    {
        return Err(CliError::Config(format!(
            "eval.knn_k is {} but the train split has only {} bags",
            cfg.eval.knn_k,
            train_s.bags.len()
        )));
    }
    let rows = eval_rows(&cfg, &models, &train_s, &eval_ds, &heads)?;
    write_report_csv(&out_dir.join("eval.csv"), &rows)?;
    println!("wrote {}", out_dir.join("eval.csv").display());
    for row in &rows {
        println!("{}", row.to_csv_line());
    }
    Ok(())
}

fn eval_rows(
    cfg: &ExperimentConfig,
    models: &TrainedModels,
    train_s: &Dataset,
    eval_ds: &Dataset,
    heads: &[EvalHead],
) -> Result<Vec<ReportRow>, CliError> {
    let e = &cfg.eval;
    let n_labels = models.n_labels;
    let tag = corruption_tag(&eval_ds.corruptions);
    let eval_ft = cache_features(&models.encoder, &eval_ds.bags);
    let train_ft = cache_features(&models.encoder, &train_s.bags);
    let eval_labels = bag_labels(&eval_ds.bags);
    let train_labels = bag_labels(&train_s.bags);
    let on = |enabled: bool, v: Option<f64>| if enabled { v } else { None };
    let mut rows = vec![];
    for &h in heads {
        let mut row = ReportRow::new("head", "head", head_name(h));
        row.corruptions = tag.clone();
        match h {
            EvalHead::Attention => {
                let (auc, f1) = evaluate_head(&models.head3, &eval_ft, &eval_labels, n_labels);
                row.macro_auc = on(e.auc, auc);
                row.macro_f1 = on(e.f1, Some(f1));
                if e.v_score {
                    row.v_score = Some(feature_v_score(
                        &eval_ds.bags,
                        Some(&eval_ft),
                        e.v_per_class,
                        n_labels,
                        cfg.v_clusters_or(n_labels),
                        e.seed,
                    ));
                }
                if e.gate_recall {
                    let eval_frozen = cache_features(&models.encoder_frozen, &eval_ds.bags);
                    row.gate_recall = gate_recall(
                        &models.gate,
                        &eval_frozen,
                        &eval_ds.bags,
                        cfg.train.stage1.recall_k,
                    );
                }
            }
            EvalHead::Mean | EvalHead::Max => {
                let (variant, stream) = match h {
                    EvalHead::Mean => (HeadVariant::MeanPool, 1),
                    _ => (HeadVariant::MaxPool, 2),
                };
                let head_cfg = HeadTrainConfig {
                    variant,
                    attention_dim: cfg.train.model.attention_dim,
                    epochs: cfg.train.stage3.epochs,
                    lr: cfg.train.stage3.lr_head,
                    grad_clip: cfg.train.grad_clip,
                    optimizer: cfg.train.optimizer,
                    seed: mix(e.seed, stream),
                };
                let head = train_head_on_features(&train_ft, &train_labels, n_labels, &head_cfg)
                    .map_err(CliError::from)?;
                let (auc, f1) = evaluate_head(&head, &eval_ft, &eval_labels, n_labels);
                row.macro_auc = on(e.auc, auc);
                row.macro_f1 = on(e.f1, Some(f1));
            }
            EvalHead::KnnMean | EvalHead::KnnMax => {
                let embed = match h {
                    EvalHead::KnnMean => metrics::bag_embedding_mean,
                    _ => metrics::bag_embedding_max,
                };
                let acc = knn_probe(&train_ft, &train_labels, &eval_ft, &eval_labels, embed, e);
                match h {
                    EvalHead::KnnMean => row.knn_mean = on(e.knn, acc),
                    _ => row.knn_max = on(e.knn, acc),
                }
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

fn head_name(h: EvalHead) -> &'static str {
    match h {
        EvalHead::Attention => "attention",
        EvalHead::Mean => "mean",
        EvalHead::Max => "max",
        EvalHead::KnnMean => "knn_mean",
        EvalHead::KnnMax => "knn_max",
    }
}

fn knn_probe(
    train_ft: &[Matrix],
    train_labels: &[u8],
    eval_ft: &[Matrix],
    eval_labels: &[u8],
    embed: fn(&Matrix) -> Vec<f64>,
    e: &EvalConfig,
) -> Option<f64> {
    let train_emb = bag_embeddings(train_ft, embed);
    let eval_emb = bag_embeddings(eval_ft, embed);
    Some(metrics::knn_accuracy(&train_emb, train_labels, &eval_emb, eval_labels, e.knn_k))
}

/// Merges every report CSV under `dir` into one table and writes a short
/// summary naming the best beta, the best K, and the frozen-vs-fine-tuned
/// AUC gap.
pub fn report(dir: &Path, out_flag: Option<&Path>) -> Result<(), CliError> {
    let mut files = vec![];
    collect_csvs(dir, &mut files)?;
    let mut merged: Vec<(String, Vec<ReportRow>)> = vec![];
    for f in &files {
        if let Some(rows) = read_report_csv(f)? {
            let rel = f.strip_prefix(dir).unwrap_or(f).display().to_string();
            merged.push((rel, rows));
        }
    }
    if merged.is_empty() {
        return Err(CliError::Io(format!("no reports found under {}", dir.display())));
    }
    let out_dir = out_flag.unwrap_or(dir);
    let mut text = format!("source,{CSV_HEADER}\n");
    for (src, rows) in &merged {
        for row in rows {
            writeln!(text, "{src},{}", row.to_csv_line()).expect("writing to a String cannot fail");
        }
    }
    write_atomic(&out_dir.join("combined.csv"), text.as_bytes())?;
    let summary = summarize(&merged);
    write_atomic(&out_dir.join("summary.txt"), summary.as_bytes())?;
    print!("{summary}");
    Ok(())
}

/// Recursively collects `.csv` paths under `dir` in sorted order.
fn collect_csvs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), CliError> {
    let io_err = |e: std::io::Error| CliError::Io(format!("cannot read {}: {e}", dir.display()));
    let mut entries: Vec<PathBuf> =
        std::fs::read_dir(dir).map_err(io_err)?.map(|e| Ok(e.map_err(io_err)?.path())).collect::<Result<_, CliError>>()?;
    entries.sort();
    for path in entries {
        if path.is_dir() {
            collect_csvs(&path, out)?;
        } else if path.extension().is_some_and(|x| x == "csv") {
            out.push(path);
        }
    }
    Ok(())
}

fn summarize(merged: &[(String, Vec<ReportRow>)]) -> String {
    let all: Vec<&ReportRow> = merged.iter().flat_map(|(_, rows)| rows).collect();
    let mut s = String::new();
    writeln!(s, "merged {} reports, {} rows", merged.len(), all.len())
        .expect("writing to a String cannot fail");
    for (param, label) in [("beta", "best beta"), ("top_k", "best top_k")] {
        if let Some((value, metric, by)) = best_ablation(&all, param) {
            writeln!(s, "{label}: {value} ({by} {metric})").expect("writing to a String cannot fail");
        }
    }
    let auc_of = |model: &str| {
        all.iter()
            .find(|r| r.kind == "model" && r.value == model)
            .and_then(|r| r.macro_auc)
    };
    if let (Some(ft), Some(fz)) = (auc_of("finetuned"), auc_of("frozen")) {
        writeln!(s, "fine-tuned minus frozen macro-AUC: {}", ft - fz)
            .expect("writing to a String cannot fail");
    }
    s
}

/// Best surviving grid point for one swept parameter: by test macro-AUC
/// when any row has one, by validation recall otherwise. Ties keep the
/// earliest row in merge order.
fn best_ablation(rows: &[&ReportRow], param: &str) -> Option<(String, f64, &'static str)> {
    let candidates: Vec<&&ReportRow> = rows
        .iter()
        .filter(|r| r.kind == "ablation" && r.parameter == param && r.status == "ok")
        .collect();
    let by_auc = candidates.iter().any(|r| r.macro_auc.is_some());
    let mut best: Option<(&ReportRow, f64)> = None;
    for r in candidates {
        let metric = if by_auc { r.macro_auc } else { r.val_recall };
        if let Some(m) = metric {
            if best.is_none_or(|(_, b)| m > b) {
                best = Some((r, m));
            }
        }
    }
    best.map(|(r, m)| (r.value.clone(), m, if by_auc { "test macro-AUC" } else { "validation recall" }))
}
