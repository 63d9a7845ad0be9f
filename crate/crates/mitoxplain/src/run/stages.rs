//! The pipeline stages behind `run`.
//!
//! Every stage reads its inputs from the run directory and writes its
//! outputs there, so stages can be skipped or re-run independently under
//! the manifest's checksum-based resume.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explain::{self, MethodName};
use crate::metrics::{classification_report, confusion, rank_models, trunc2, RankingTable};
use crate::patch::{normalize_patch, patchify, read_patch_set, write_patch_set, Patch};
use crate::run::config::{DataSource, RunConfig};
use crate::split::{split_dataset, DatasetSplit};
use crate::stack::{ChannelMap, ClassLabel, ChannelStack, MEMBRANE_CHANNEL, MITO_MASS_CHANNELS};
use crate::synth::{generate_cohort, write_ground_truth, GroundTruthMeta};
use crate::tiffio::{load_stack, write_stack};
use crate::trainer::{
    build_model, predict_with, train, Backbone, ChannelSelection, TrainConfig, TrainedModel,
};
use crate::viz::{
    render_input_panel, render_map, render_overlay, render_triptych, MapColormap, MapNorm,
    OverlayMode,
};

/// One row of `data/subjects.csv`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub label: ClassLabel,
    pub stack_file: String,
    pub channel_map_file: String,
}

/// One row of `models/index.csv`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelRecord {
    pub model_id: String,
    pub backbone: Backbone,
    pub channel_label: String,
    /// Channel names joined with ';'.
    pub channels: String,
    pub seed: u64,
    pub dir: String,
}

/// One row of `evaluate/metrics.csv` (per model x seed).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub model_id: String,
    pub backbone: Backbone,
    pub channel_label: String,
    pub seed: u64,
    pub test_accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub patient_precision: f64,
    pub patient_recall: f64,
    pub patient_f1: f64,
    pub zero_denominator_warning: bool,
}

/// One row of `explain/manifest.csv`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExplainRecord {
    pub model_id: String,
    pub backbone: Backbone,
    pub channel_label: String,
    pub seed: u64,
    pub method: MethodName,
    pub patch_index: usize,
    pub subject: String,
    pub label: ClassLabel,
    pub origin_row: usize,
    pub origin_col: usize,
    pub target_class: usize,
    pub target_score: f64,
    pub map_file: String,
    pub conservation_residual: f64,
}

/// One row of `figures/index.csv`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FigureRecord {
    pub file: String,
    pub model_id: String,
    pub method: MethodName,
    pub subject: String,
    pub origin_row: usize,
    pub origin_col: usize,
    pub mode: String,
}

pub fn data_dir(run_dir: &Path) -> PathBuf {
    run_dir.join("data")
}
pub fn patches_dir(run_dir: &Path) -> PathBuf {
    run_dir.join("patches")
}
pub fn models_dir(run_dir: &Path) -> PathBuf {
    run_dir.join("models")
}
pub fn evaluate_dir(run_dir: &Path) -> PathBuf {
    run_dir.join("evaluate")
}
pub fn explain_dir(run_dir: &Path) -> PathBuf {
    run_dir.join("explain")
}
pub fn figures_dir(run_dir: &Path) -> PathBuf {
    run_dir.join("figures")
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for row in reader.deserialize() {
        rows.push(row?);
    }
    Ok(rows)
}

/// Stage `data`: synthesise or ingest stacks into `data/`.
pub fn stage_data(config: &RunConfig, run_dir: &Path) -> Result<Vec<PathBuf>> {
    let dir = data_dir(run_dir);
    fs::create_dir_all(&dir)?;
    let mut files = Vec::new();
    let mut subjects = Vec::new();
    match config.data.source {
        DataSource::Synthetic => {
            let synth = config.data.synthetic.as_ref().expect("validated");
            let cohort =
                generate_cohort(&synth.params, synth.n_control, synth.n_patient, synth.seed)?;
            for (stack, truth) in &cohort {
                let stem = stack.subject_id.clone();
                let stack_file = dir.join(format!("{stem}.ome.tiff"));
                write_stack(stack, &stack_file)?;
                let map = ChannelMap {
                    subject_id: Some(stack.subject_id.clone()),
                    class_label: Some(stack.class_label),
                    subtype: stack.subtype.clone(),
                    channels: stack
                        .channel_names()
                        .into_iter()
                        .enumerate()
                        .map(|(i, n)| (i as u32, n))
                        .collect(),
                };
                let map_file = dir.join(format!("{stem}.channels.toml"));
                fs::write(&map_file, map.to_toml_string()?)?;
                let gt_mask = dir.join(format!("{stem}.gt.tiff"));
                let gt_meta = dir.join(format!("{stem}.gt.toml"));
                write_ground_truth(
                    truth,
                    &GroundTruthMeta {
                        subject_id: stack.subject_id.clone(),
                        class_label: stack.class_label,
                        seed: synth.seed,
                        deficient_fiber_ids: truth.deficient_fiber_ids.iter().copied().collect(),
                        rrf_fiber_ids: truth.rrf_fiber_ids.iter().copied().collect(),
                        params: synth.params.clone(),
                    },
                    &gt_mask,
                    &gt_meta,
                )?;
                subjects.push(SubjectRecord {
                    subject_id: stack.subject_id.clone(),
                    label: stack.class_label,
                    stack_file: format!("{stem}.ome.tiff"),
                    channel_map_file: format!("{stem}.channels.toml"),
                });
                files.extend([stack_file, map_file, gt_mask, gt_meta]);
            }
        }
        DataSource::Ingest => {
            let ingest = config.data.ingest.as_ref().expect("validated");
            for (index, stack_path) in ingest.stacks.iter().enumerate() {
                let map_path = if ingest.channel_maps.len() == 1 {
                    &ingest.channel_maps[0]
                } else {
                    &ingest.channel_maps[index]
                };
                let map = ChannelMap::from_toml_str(&fs::read_to_string(map_path)?)?;
                let stack = load_stack(stack_path, &map, ingest.mode)?;
                let stem = stack.subject_id.clone();
                let stack_file = dir.join(format!("{stem}.ome.tiff"));
                write_stack(&stack, &stack_file)?;
                let map_file = dir.join(format!("{stem}.channels.toml"));
                let rewritten = ChannelMap {
                    subject_id: Some(stack.subject_id.clone()),
                    class_label: Some(stack.class_label),
                    subtype: stack.subtype.clone(),
                    channels: stack
                        .channel_names()
                        .into_iter()
                        .enumerate()
                        .map(|(i, n)| (i as u32, n))
                        .collect(),
                };
                fs::write(&map_file, rewritten.to_toml_string()?)?;
                subjects.push(SubjectRecord {
                    subject_id: stack.subject_id.clone(),
                    label: stack.class_label,
                    stack_file: format!("{stem}.ome.tiff"),
                    channel_map_file: format!("{stem}.channels.toml"),
                });
                files.extend([stack_file, map_file]);
            }
        }
    }
    let index = dir.join("subjects.csv");
    write_csv(&index, &subjects)?;
    files.push(index);
    Ok(files)
}

fn load_subjects(run_dir: &Path) -> Result<Vec<(SubjectRecord, ChannelStack)>> {
    let dir = data_dir(run_dir);
    let records: Vec<SubjectRecord> = read_csv(&dir.join("subjects.csv"))?;
    let mut out = Vec::with_capacity(records.len());
    for record in records {
        let map = ChannelMap::from_toml_str(&fs::read_to_string(
            dir.join(&record.channel_map_file),
        )?)?;
        let stack = load_stack(
            &dir.join(&record.stack_file),
            &map,
            crate::stack::LoadMode::Permissive,
        )?;
        out.push((record, stack));
    }
    Ok(out)
}

/// Stage `patchify`: cut, normalise and persist patches over all channels.
pub fn stage_patchify(config: &RunConfig, run_dir: &Path) -> Result<Vec<PathBuf>> {
    let subjects = load_subjects(run_dir)?;
    let mut patches = Vec::new();
    for (_, stack) in &subjects {
        let names = stack.channel_names();
        let cut = patchify(
            stack,
            &names,
            config.preprocess.patch_size,
            config.preprocess.stride(),
            config.preprocess.edge_policy,
        )?;
        for patch in cut {
            patches.push(normalize_patch(&patch, config.preprocess.normalization));
        }
    }
    if patches.is_empty() {
        return Err(Error::InvalidParameter(
            "patchify produced no patches; check patch_size against image size".to_string(),
        ));
    }
    let dir = patches_dir(run_dir);
    let manifest = write_patch_set(&dir, &patches, config.preprocess.normalization)?;
    let mut files: Vec<PathBuf> = (0..patches.len())
        .map(|i| dir.join(format!("patch_{i:05}.mxt")))
        .collect();
    files.push(manifest);
    Ok(files)
}

fn load_patches_and_split(config: &RunConfig, run_dir: &Path) -> Result<(Vec<Patch>, DatasetSplit)> {
    let patches = read_patch_set(&patches_dir(run_dir).join("manifest.csv"))?;
    let split = split_dataset(
        &patches,
        config.preprocess.ratios,
        config.preprocess.split_seed,
        config.preprocess.group_by_subject,
    )?;
    Ok((patches, split))
}

fn model_id(backbone: Backbone, selection: &ChannelSelection, seed: u64) -> String {
    format!("{backbone}_{}_s{seed}", selection.label())
}

fn train_config_for(
    config: &RunConfig,
    backbone: Backbone,
    selection: &ChannelSelection,
    seed: u64,
) -> TrainConfig {
    TrainConfig {
        backbone,
        init: config.train.init,
        pretrained_weights: config.train.pretrained_weights.clone(),
        learning_rate: config.train.learning_rate,
        early_stop_patience: config.train.early_stop_patience,
        max_epochs: config.train.max_epochs,
        batch_size: config.train.batch_size,
        seed,
        channel_selection: selection.clone(),
        bias: config.train.bias,
        ..TrainConfig::smallcnn(seed, selection.clone())
    }
}

/// Stage `train`: the full backbone x channel x seed matrix.
pub fn stage_train(config: &RunConfig, run_dir: &Path) -> Result<Vec<PathBuf>> {
    let (patches, split) = load_patches_and_split(config, run_dir)?;
    let available = patches[0].channel_names.clone();
    let dir = models_dir(run_dir);
    fs::create_dir_all(&dir)?;
    let mut files = Vec::new();
    let mut index = Vec::new();
    for backbone in &config.train.backbones {
        for selection in &config.train.channel_selections {
            let names = selection.resolve(&available);
            let selected: Vec<Patch> = patches
                .iter()
                .map(|p| p.select_channels(&names))
                .collect::<Result<_>>()?;
            for &seed in &config.train.seeds {
                let id = model_id(*backbone, selection, seed);
                let train_config = train_config_for(config, *backbone, selection, seed);
                let model = build_model(&train_config, names.len())?;
                let trained = train(model, &selected, &split, &train_config)?;
                let model_dir = dir.join(&id);
                trained.save(&model_dir)?;
                for file in ["model.mxm", "config.toml", "history.csv", "fingerprint.txt"] {
                    files.push(model_dir.join(file));
                }
                index.push(ModelRecord {
                    model_id: id.clone(),
                    backbone: *backbone,
                    channel_label: selection.label(),
                    channels: names.join(";"),
                    seed,
                    dir: id,
                });
            }
        }
    }
    let index_path = dir.join("index.csv");
    write_csv(&index_path, &index)?;
    files.push(index_path);
    Ok(files)
}

/// Stage `evaluate`: test metrics per model plus the multi-seed ranking.
pub fn stage_evaluate(config: &RunConfig, run_dir: &Path) -> Result<Vec<PathBuf>> {
    let (patches, split) = load_patches_and_split(config, run_dir)?;
    let models: Vec<ModelRecord> = read_csv(&models_dir(run_dir).join("index.csv"))?;
    let dir = evaluate_dir(run_dir);
    fs::create_dir_all(&dir)?;

    let mut metrics_rows: Vec<MetricsRecord> = Vec::new();
    // (backbone, channel_label) -> accumulating per-seed accuracies
    let mut ranking_acc: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    let mut ranking_order: Vec<(String, String)> = Vec::new();

    for record in &models {
        let trained = TrainedModel::load(&models_dir(run_dir).join(&record.dir))?;
        let names: Vec<String> = record.channels.split(';').map(|s| s.to_string()).collect();
        let mut predictions = Vec::new();
        let mut labels = Vec::new();
        for &i in &split.test {
            let patch = patches[i].select_channels(&names)?;
            let scores = predict_with(&trained.model, &patch)?;
            predictions.push(
                ClassLabel::from_index(scores.predicted_class()).expect("binary classes"),
            );
            labels.push(patch.class_label);
        }
        let cm = confusion(&predictions, &labels)?;
        let report = classification_report(&cm, record.seed)?;
        metrics_rows.push(MetricsRecord {
            model_id: record.model_id.clone(),
            backbone: record.backbone,
            channel_label: record.channel_label.clone(),
            seed: record.seed,
            test_accuracy: report.test_accuracy,
            macro_precision: report.macro_precision,
            macro_recall: report.macro_recall,
            macro_f1: report.macro_f1,
            patient_precision: report.patient_precision,
            patient_recall: report.patient_recall,
            patient_f1: report.patient_f1,
            zero_denominator_warning: report.zero_denominator_warning,
        });
        let key = (record.backbone.to_string(), record.channel_label.clone());
        if !ranking_acc.contains_key(&key) {
            ranking_order.push(key.clone());
        }
        ranking_acc
            .entry(key)
            .or_default()
            .push(report.test_accuracy * 100.0);
    }

    let metrics_path = dir.join("metrics.csv");
    write_csv(&metrics_path, &metrics_rows)?;

    let rows: Vec<(String, String, String, Vec<f64>)> = ranking_order
        .iter()
        .map(|key| {
            (
                key.0.clone(),
                "synthetic".to_string(),
                key.1.clone(),
                ranking_acc[key].clone(),
            )
        })
        .collect();
    let ranking = rank_models(&rows)?;
    let ranking_csv = dir.join("ranking.csv");
    fs::write(&ranking_csv, ranking.to_csv())?;
    let ranking_md = dir.join("ranking.md");
    fs::write(&ranking_md, ranking.to_markdown())?;
    Ok(vec![metrics_path, ranking_csv, ranking_md])
}

/// Top-k single-channel (backbone, channel_label) pairs by mean test
/// accuracy; all-channel models are excluded.
pub fn top_k_single_channel(
    ranking: &RankingTable,
    models: &[ModelRecord],
    k: usize,
) -> Vec<(String, String)> {
    ranking
        .rows
        .iter()
        .filter(|row| {
            models.iter().any(|m| {
                m.backbone.to_string() == row.model
                    && m.channel_label == row.channel
                    && m.channel_label != "ALL"
                    && !m.channels.contains(';')
            })
        })
        .take(k)
        .map(|row| (row.model.clone(), row.channel.clone()))
        .collect()
}

fn rebuild_ranking(metrics_rows: &[MetricsRecord]) -> Result<RankingTable> {
    let mut acc: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    let mut order = Vec::new();
    for row in metrics_rows {
        let key = (row.backbone.to_string(), row.channel_label.clone());
        if !acc.contains_key(&key) {
            order.push(key.clone());
        }
        acc.entry(key).or_default().push(row.test_accuracy * 100.0);
    }
    let rows: Vec<(String, String, String, Vec<f64>)> = order
        .iter()
        .map(|key| {
            (
                key.0.clone(),
                "synthetic".to_string(),
                key.1.clone(),
                acc[key].clone(),
            )
        })
        .collect();
    rank_models(&rows)
}

/// Stage `explain`: all configured methods on the top-k single-channel
/// models, over sampled test patches (lowest-index control and patient).
pub fn stage_explain(config: &RunConfig, run_dir: &Path) -> Result<Vec<PathBuf>> {
    let (patches, split) = load_patches_and_split(config, run_dir)?;
    let models: Vec<ModelRecord> = read_csv(&models_dir(run_dir).join("index.csv"))?;
    let metrics_rows: Vec<MetricsRecord> = read_csv(&evaluate_dir(run_dir).join("metrics.csv"))?;
    let ranking = rebuild_ranking(&metrics_rows)?;
    let selected = top_k_single_channel(&ranking, &models, config.explain.top_k);

    let dir = explain_dir(run_dir);
    let maps_dir = dir.join("maps");
    fs::create_dir_all(&maps_dir)?;
    let mut files = Vec::new();
    let mut manifest_rows: Vec<ExplainRecord> = Vec::new();

    for (backbone_name, channel_label) in &selected {
        // best seed for this (backbone, channel): highest test accuracy,
        // ties broken by the lowest seed
        let mut best: Option<&MetricsRecord> = None;
        for row in metrics_rows.iter().filter(|m| {
            m.backbone.to_string() == *backbone_name && m.channel_label == *channel_label
        }) {
            best = match best {
                None => Some(row),
                Some(current)
                    if row.test_accuracy > current.test_accuracy
                        || (row.test_accuracy == current.test_accuracy
                            && row.seed < current.seed) =>
                {
                    Some(row)
                }
                keep => keep,
            };
        }
        let best = best.ok_or_else(|| {
            Error::Manifest(format!("no metrics for {backbone_name}/{channel_label}"))
        })?;
        let record = models
            .iter()
            .find(|m| m.model_id == best.model_id)
            .ok_or_else(|| Error::Manifest(format!("model {} missing from index", best.model_id)))?;
        let trained = TrainedModel::load(&models_dir(run_dir).join(&record.dir))?;
        let model_checksum = trained.weights_checksum();
        let names: Vec<String> = record.channels.split(';').map(|s| s.to_string()).collect();

        // sampled test patches: per class, lowest patch index first
        let mut sampled: Vec<usize> = Vec::new();
        for class in [ClassLabel::Control, ClassLabel::Patient] {
            let mut of_class: Vec<usize> = split
                .test
                .iter()
                .copied()
                .filter(|&i| patches[i].class_label == class)
                .collect();
            of_class.sort_unstable();
            sampled.extend(of_class.into_iter().take(config.explain.patches_per_class));
        }

        for &patch_index in &sampled {
            let patch = patches[patch_index].select_channels(&names)?;
            let target_class = patch.class_label.index();
            for &method in &config.explain.methods {
                let map = explain::explain(&trained.model, &patch, method, target_class)?;
                let stem = format!(
                    "{}_{}_{}_{}_{}",
                    record.model_id, method, patch.source_subject, patch.origin.0, patch.origin.1
                );
                let (tensor_path, meta_path) =
                    explain::write_relevance_map(&map, &model_checksum, &maps_dir, &stem)?;
                manifest_rows.push(ExplainRecord {
                    model_id: record.model_id.clone(),
                    backbone: record.backbone,
                    channel_label: record.channel_label.clone(),
                    seed: record.seed,
                    method,
                    patch_index,
                    subject: patch.source_subject.clone(),
                    label: patch.class_label,
                    origin_row: patch.origin.0,
                    origin_col: patch.origin.1,
                    target_class,
                    target_score: map.target_score,
                    map_file: format!("maps/{stem}.mxt"),
                    conservation_residual: explain::conservation_residual(&map),
                });
                files.extend([tensor_path, meta_path]);
            }
        }
    }

    let manifest_path = dir.join("manifest.csv");
    write_csv(&manifest_path, &manifest_rows)?;
    files.push(manifest_path);
    Ok(files)
}

fn channel_grid_u16(patch: &Patch, name: &str) -> Option<ndarray::Array2<u16>> {
    let index = patch.channel_names.iter().position(|n| n == name)?;
    let (h, w, _) = patch.data.dim();
    let mut grid = ndarray::Array2::<u16>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            grid[(r, c)] =
                (patch.data[(r, c, index)].clamp(0.0, 1.0) * 65535.0).round() as u16;
        }
    }
    Some(grid)
}

/// Stage `render`: triptych figures for every explained map.
pub fn stage_render(_config: &RunConfig, run_dir: &Path) -> Result<Vec<PathBuf>> {
    let patches = read_patch_set(&patches_dir(run_dir).join("manifest.csv"))?;
    let explain_rows: Vec<ExplainRecord> = read_csv(&explain_dir(run_dir).join("manifest.csv"))?;
    let dir = figures_dir(run_dir);
    fs::create_dir_all(&dir)?;
    let mut files = Vec::new();
    let mut index_rows: Vec<FigureRecord> = Vec::new();

    for row in &explain_rows {
        let full_patch = &patches[row.patch_index];
        let model_channel = row
            .channel_label
            .split('+')
            .next()
            .unwrap_or(&row.channel_label)
            .to_string();
        // overlay planes: membrane marker and a mitochondrial-mass marker,
        // falling back to whatever channels exist
        let membrane = channel_grid_u16(full_patch, MEMBRANE_CHANNEL)
            .or_else(|| channel_grid_u16(full_patch, &full_patch.channel_names[0]))
            .expect("patch has channels");
        let mito_name = MITO_MASS_CHANNELS
            .iter()
            .find(|n| full_patch.channel_names.iter().any(|c| c == *n))
            .map(|s| s.to_string())
            .unwrap_or_else(|| {
                full_patch
                    .channel_names
                    .get(1)
                    .unwrap_or(&full_patch.channel_names[0])
                    .clone()
            });
        let mito = channel_grid_u16(full_patch, &mito_name).expect("resolved above");

        // reload the persisted map so figures reflect artifacts on disk
        let tensor_path = explain_dir(run_dir).join(&row.map_file);
        let values = match crate::tensorfile::read(&tensor_path)? {
            crate::tensorfile::Tensor::F32(arr) => arr.mapv(f64::from),
            crate::tensorfile::Tensor::F64(arr) => arr,
        };
        let values = values
            .into_dimensionality::<ndarray::Ix3>()
            .map_err(|e| Error::Decode(e.to_string()))?;
        let map = explain::RelevanceMap {
            method: row.method,
            values,
            target_class: row.target_class,
            target_score: row.target_score,
            patch_ref: explain::PatchRef {
                subject: row.subject.clone(),
                origin_row: row.origin_row,
                origin_col: row.origin_col,
                channels: vec![model_channel.clone()],
            },
        };

        let signal_family =
            matches!(row.method, MethodName::Deconvnet | MethodName::GuidedBackprop);
        let (mode, map_for_overlay) = if signal_family {
            (OverlayMode::Signal, None)
        } else {
            (OverlayMode::Attribution, Some(&map))
        };
        let overlay = render_overlay(&membrane, &mito, map_for_overlay, mode)?;
        let input_patch = full_patch.select_channels(&[model_channel])?;
        let input_panel = render_input_panel(
            &input_patch
                .data
                .index_axis(ndarray::Axis(2), 0)
                .to_owned(),
        );
        let map_panel = render_map(
            &map,
            MapNorm::SymmetricPercentile { p: 99.0 },
            MapColormap::Diverging,
        )?;
        let figure = render_triptych(&input_panel, &overlay, &map_panel, true)?;
        let file = format!(
            "{}_{}_{}_{}_{}.png",
            row.model_id, row.method, row.subject, row.origin_row, row.origin_col
        );
        let path = dir.join(&file);
        figure.save_png(&path)?;
        index_rows.push(FigureRecord {
            file: file.clone(),
            model_id: row.model_id.clone(),
            method: row.method,
            subject: row.subject.clone(),
            origin_row: row.origin_row,
            origin_col: row.origin_col,
            mode: if signal_family { "signal" } else { "attribution" }.to_string(),
        });
        files.push(path);
    }

    let index_path = dir.join("index.csv");
    write_csv(&index_path, &index_rows)?;
    files.push(index_path);
    Ok(files)
}

/// Stage `report`: a markdown report; see [`build_report`].
pub fn stage_report(config: &RunConfig, run_dir: &Path) -> Result<Vec<PathBuf>> {
    let report = build_report(config, run_dir)?;
    let path = run_dir.join("report.md");
    fs::write(&path, report)?;
    Ok(vec![path])
}

/// Assemble the report body. Timestamps are deliberately excluded so two
/// identically configured runs produce byte-identical reports.
pub fn build_report(config: &RunConfig, run_dir: &Path) -> Result<String> {
    let mut out = String::new();
    out.push_str("# Experiment report\n\n");
    out.push_str(&format!(
        "config checksum: `{}`\n\n",
        crate::run::experiment_checksum(config)?
    ));

    let ranking_md = evaluate_dir(run_dir).join("ranking.md");
    if ranking_md.exists() {
        out.push_str("## Model ranking\n\n");
        out.push_str(&fs::read_to_string(ranking_md)?);
        out.push('\n');
    } else {
        out.push_str("## Model ranking\n\n(evaluate stage has not run; no ranking available)\n\n");
    }

    let metrics_csv = evaluate_dir(run_dir).join("metrics.csv");
    if metrics_csv.exists() {
        let rows: Vec<MetricsRecord> = read_csv(&metrics_csv)?;
        out.push_str("## Per-run metrics\n\n");
        out.push_str(
            "| Model | Seed | Accuracy | Macro P | Macro R | Macro F1 | Patient P | Patient R | Patient F1 |\n",
        );
        out.push_str("|---|---|---|---|---|---|---|---|---|\n");
        for row in &rows {
            out.push_str(&format!(
                "| {} | {} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} |\n",
                row.model_id,
                row.seed,
                trunc2(row.test_accuracy * 100.0),
                trunc2(row.macro_precision * 100.0),
                trunc2(row.macro_recall * 100.0),
                trunc2(row.macro_f1 * 100.0),
                trunc2(row.patient_precision * 100.0),
                trunc2(row.patient_recall * 100.0),
                trunc2(row.patient_f1 * 100.0),
            ));
        }
        out.push('\n');
    } else {
        out.push_str("## Per-run metrics\n\n(evaluate stage has not run; no metrics available)\n\n");
    }

    let figures_index = figures_dir(run_dir).join("index.csv");
    if figures_index.exists() {
        let rows: Vec<FigureRecord> = read_csv(&figures_index)?;
        if rows.is_empty() {
            out.push_str("## Figures\n\n(no figures were rendered: the explanation stage produced no maps)\n");
        } else {
            out.push_str("## Figures\n\n");
            for row in &rows {
                out.push_str(&format!(
                    "- [{} / {} / {} ({},{})](figures/{})\n",
                    row.model_id, row.method, row.subject, row.origin_row, row.origin_col, row.file
                ));
            }
        }
    } else {
        out.push_str("## Figures\n\n(render stage has not run; no figures available)\n");
    }
    Ok(out)
}
