//! Library-level command implementations behind the CLI binary. Every
//! command validates its configuration before touching the filesystem,
//! and identical configs plus seeds produce byte-identical artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::adapter::{attention_weights, FusionMode, FusionParams, KnowledgeLibrary};
use crate::config::RunConfig;
use crate::data::{generate_synthetic, load_manifest, save_tensor, LabeledDataset};
use crate::encoder::Encoder;
use crate::error::{KanetError, Result};
use crate::ipel::{self, library_from_encoded, TrainOutcome};
use crate::protocol::{
    build_session_stream, run_incremental, EvalOptions, MetricsReport, SessionSpec,
};
use crate::tensor::Tensor;
use crate::Model;

pub const CHECKPOINT_FILE: &str = "checkpoint.kant";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const METRICS_JSON_FILE: &str = "metrics.json";
pub const METRICS_CSV_FILE: &str = "metrics.csv";
pub const SWEEP_CSV_FILE: &str = "sweep.csv";

fn build_datasets(cfg: &RunConfig) -> Result<(LabeledDataset<f32>, LabeledDataset<f32>)> {
    match &cfg.manifest {
        Some(path) => load_manifest::<f32>(path),
        None => generate_synthetic::<f32>(&cfg.synthetic_config()),
    }
}

fn build_model(cfg: &RunConfig) -> Result<Model<f32>> {
    let encoder = Encoder::new(cfg.encoder_config())?;
    let fusion = FusionParams::init(cfg.embed_dim, cfg.num_heads, cfg.fusion_seed())?;
    Ok(Model::new(encoder, fusion, cfg.alpha as f32))
}

fn build_stream(cfg: &RunConfig) -> Result<Vec<SessionSpec<f32>>> {
    let (train, test) = build_datasets(cfg)?;
    build_session_stream(&train, &test, &cfg.split_config())
}

fn load_or_init_fusion(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<FusionParams<f32>> {
    match checkpoint {
        Some(path) => FusionParams::load(path, cfg.embed_dim, cfg.num_heads),
        None => FusionParams::init(cfg.embed_dim, cfg.num_heads, cfg.fusion_seed()),
    }
}

pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub outcome: TrainOutcome,
}

/// Builds the dataset, encoder, and library, runs episode training on the
/// base session, and writes the fusion checkpoint plus a JSON-lines log.
pub fn cmd_train(cfg: &RunConfig, out_dir: &Path) -> Result<TrainArtifacts> {
    cfg.validate()?;
    let stream = build_stream(cfg)?;
    let mut model = build_model(cfg)?;

    let outcome = ipel::train(&stream[0].train, &mut model, &cfg.ipel_config())?;

    fs::create_dir_all(out_dir)?;
    let checkpoint = out_dir.join(CHECKPOINT_FILE);
    model.fusion.save(&checkpoint)?;

    let log = out_dir.join(TRAIN_LOG_FILE);
    let mut lines = String::new();
    for record in &outcome.log {
        lines.push_str(&serde_json::to_string(record).expect("log record"));
        lines.push('\n');
    }
    fs::write(&log, lines)?;

    Ok(TrainArtifacts { checkpoint, log, outcome })
}

/// Runs the incremental protocol with a trained (or freshly initialized)
/// adapter and writes the metrics report as JSON and CSV. `baseline`
/// mode bypasses fusion entirely.
pub fn cmd_eval(
    cfg: &RunConfig,
    out_dir: &Path,
    checkpoint: Option<&Path>,
) -> Result<MetricsReport> {
    cfg.validate()?;
    let stream = build_stream(cfg)?;
    let mut model = build_model(cfg)?;
    model.fusion = load_or_init_fusion(cfg, checkpoint)?;

    let opts = EvalOptions {
        fusion: if cfg.baseline { FusionMode::Bypass } else { FusionMode::Full },
        zero_library: cfg.zero_library,
    };
    let outcome = run_incremental(&model, &stream, &opts)?;

    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join(METRICS_JSON_FILE), outcome.report.to_json())?;
    fs::write(out_dir.join(METRICS_CSV_FILE), outcome.report.to_csv())?;
    Ok(outcome.report)
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub ks: usize,
    pub kf: usize,
    pub avg: f64,
    pub pd: f64,
    pub base_acc: f64,
    pub new_acc: f64,
}

/// Enumerates every valid (KS, KF) stage split of the configured layer
/// budget, trains and evaluates each, and writes a CSV grid.
pub fn cmd_sweep_layers(cfg: &RunConfig, out_dir: &Path) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let total = cfg.layers_early + cfg.layers_middle + cfg.layers_post;
    let mut rows = Vec::new();
    for ks in 1..total {
        for kf in ks + 1..total {
            let mut split_cfg = cfg.clone();
            split_cfg.apply_stage_split(ks, kf)?;

            let stream = build_stream(&split_cfg)?;
            let mut model = build_model(&split_cfg)?;
            if split_cfg.epochs > 0 {
                ipel::train(&stream[0].train, &mut model, &split_cfg.ipel_config())?;
            }
            let outcome = run_incremental(&model, &stream, &EvalOptions::default())?;
            rows.push(SweepRow {
                ks,
                kf,
                avg: outcome.report.avg,
                pd: outcome.report.pd,
                base_acc: outcome.report.base_acc,
                new_acc: outcome.report.new_acc,
            });
        }
    }

    fs::create_dir_all(out_dir)?;
    let mut csv = String::from("ks,kf,avg,pd,base_acc,new_acc\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{:.2},{:.2},{:.2},{:.2}\n",
            r.ks, r.kf, r.avg, r.pd, r.base_acc, r.new_acc
        ));
    }
    fs::write(out_dir.join(SWEEP_CSV_FILE), csv)?;
    Ok(rows)
}

/// Writes per-head attention weights of selected base-session test
/// samples over the base knowledge library, one CSV per sample with
/// `class_id,head,weight` rows.
pub fn cmd_dump_attention(
    cfg: &RunConfig,
    out_dir: &Path,
    checkpoint: Option<&Path>,
    sample_ids: &[usize],
) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let stream = build_stream(cfg)?;
    let mut model = build_model(cfg)?;
    model.fusion = load_or_init_fusion(cfg, checkpoint)?;

    let enc_train = model.encoder.encode_dataset(&stream[0].train)?;
    let library = library_from_encoded(&enc_train)?;
    let enc_test = model.encoder.encode_dataset(&stream[0].test)?;

    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for &id in sample_ids {
        let middle = enc_test.middle.get(id).ok_or_else(|| {
            KanetError::Argument(format!(
                "sample {id} out of range for {} test samples",
                enc_test.middle.len()
            ))
        })?;
        let x_m0 = middle.row_tensor(0);
        let weights = attention_weights(&model.fusion, &x_m0, &library)?;

        let mut csv = String::from("class_id,head,weight\n");
        for head in 0..weights.shape()[0] {
            for (col, &class_id) in library.class_ids().iter().enumerate() {
                csv.push_str(&format!("{class_id},{head},{:.6}\n", weights.row(head)[col]));
            }
        }
        let path = out_dir.join(format!("attention_{id}.csv"));
        fs::write(&path, csv)?;
        written.push(path);
    }
    Ok(written)
}

/// Exports refined and unrefined features of every test sample (with the
/// library built over the whole stream) plus a label sidecar, for
/// external projection tools.
pub fn cmd_export_embeddings(
    cfg: &RunConfig,
    out_dir: &Path,
    checkpoint: Option<&Path>,
) -> Result<()> {
    cfg.validate()?;
    let stream = build_stream(cfg)?;
    let mut model = build_model(cfg)?;
    model.fusion = load_or_init_fusion(cfg, checkpoint)?;

    // Library over every session's train split.
    let mut library = KnowledgeLibrary::<f32>::empty(cfg.embed_dim);
    for session in &stream {
        let enc = model.encoder.encode_dataset(&session.train)?;
        let mut sets = std::collections::BTreeMap::new();
        for (tok, &label) in enc.early_class.iter().zip(&enc.labels) {
            sets.entry(label).or_insert_with(Vec::new).push(tok.clone());
        }
        library = library.extend(&sets)?;
    }

    let mut refined_rows: Vec<Tensor<f32>> = Vec::new();
    let mut plain_rows: Vec<Tensor<f32>> = Vec::new();
    let mut labels = Vec::new();
    for session in &stream {
        let enc = model.encoder.encode_dataset(&session.test)?;
        let refined = crate::ipel::refine_dataset(
            &model.encoder,
            &model.fusion,
            &library,
            &enc,
            FusionMode::Full,
        )?;
        let plain = crate::ipel::refine_dataset(
            &model.encoder,
            &model.fusion,
            &library,
            &enc,
            FusionMode::Bypass,
        )?;
        for r in 0..enc.labels.len() {
            refined_rows.push(refined.row_tensor(r));
            plain_rows.push(plain.row_tensor(r));
        }
        labels.extend_from_slice(&enc.labels);
    }

    let stack = |rows: &[Tensor<f32>]| -> Result<Tensor<f32>> {
        let slices: Vec<&[f32]> = rows.iter().map(|t| t.data()).collect();
        Tensor::from_rows(&slices)
    };
    fs::create_dir_all(out_dir)?;
    save_tensor(&out_dir.join("embeddings_refined.kant"), &stack(&refined_rows)?)?;
    save_tensor(&out_dir.join("embeddings_unrefined.kant"), &stack(&plain_rows)?)?;
    let label_csv: String = labels.iter().map(|l| format!("{l}\n")).collect();
    fs::write(out_dir.join("embedding_labels.csv"), label_csv)?;
    Ok(())
}
