//! Experiment orchestration: stages, resume, manifest and report.

pub mod config;
pub mod manifest;
pub mod stages;

use std::fs;
use std::path::Path;

use crate::checksum::sha256_hex;
use crate::error::{Error, Result};

pub use config::{DataConfig, DataSource, ExplainConfig, IngestConfig, OutputConfig,
    PreprocessConfig, RunConfig, SyntheticConfig, TrainMatrixConfig};
pub use manifest::{RunManifest, StageRecord, StageStatus, MANIFEST_FILE};
pub use stages::build_report;

/// Pipeline stages in dependency order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Data,
    Patchify,
    Train,
    Evaluate,
    Explain,
    Render,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Data,
        Stage::Patchify,
        Stage::Train,
        Stage::Evaluate,
        Stage::Explain,
        Stage::Render,
        Stage::Report,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Data => "data",
            Stage::Patchify => "patchify",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
            Stage::Explain => "explain",
            Stage::Render => "render",
            Stage::Report => "report",
        }
    }
}

/// What `run_experiment` did, stage by stage.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    pub executed: Vec<String>,
    pub skipped: Vec<String>,
}

/// Checksum over the experiment-defining config sections. The output
/// directory is excluded so relocated but otherwise identical runs carry
/// the same identity.
pub fn experiment_checksum(config: &RunConfig) -> Result<String> {
    let mut text = String::new();
    for slice in [
        toml::to_string(&config.data),
        toml::to_string(&config.preprocess),
        toml::to_string(&config.train),
        toml::to_string(&config.explain),
    ] {
        text.push_str(&slice.map_err(|e| Error::Config(e.to_string()))?);
        text.push('\n');
    }
    Ok(sha256_hex(text.as_bytes()))
}

fn config_slice(config: &RunConfig, stage: Stage) -> Result<String> {
    let text = match stage {
        Stage::Data => toml::to_string(&config.data),
        Stage::Patchify => toml::to_string(&config.preprocess),
        Stage::Train => toml::to_string(&config.train),
        Stage::Evaluate => toml::to_string(&config.preprocess),
        Stage::Explain => toml::to_string(&config.explain),
        Stage::Render => Ok(String::new()),
        Stage::Report => Ok(String::new()),
    };
    text.map_err(|e| Error::Config(e.to_string()))
}

fn stage_inputs(stage: Stage) -> &'static [Stage] {
    match stage {
        Stage::Data => &[],
        Stage::Patchify => &[Stage::Data],
        Stage::Train => &[Stage::Patchify],
        Stage::Evaluate => &[Stage::Train],
        Stage::Explain => &[Stage::Evaluate],
        Stage::Render => &[Stage::Explain],
        Stage::Report => &[Stage::Evaluate, Stage::Render],
    }
}

fn execute_stage(config: &RunConfig, run_dir: &Path, stage: Stage) -> Result<Vec<std::path::PathBuf>> {
    match stage {
        Stage::Data => stages::stage_data(config, run_dir),
        Stage::Patchify => stages::stage_patchify(config, run_dir),
        Stage::Train => stages::stage_train(config, run_dir),
        Stage::Evaluate => stages::stage_evaluate(config, run_dir),
        Stage::Explain => stages::stage_explain(config, run_dir),
        Stage::Render => stages::stage_render(config, run_dir),
        Stage::Report => stages::stage_report(config, run_dir),
    }
}

/// Run the pipeline up to and including `last_stage` (the whole pipeline by
/// default), skipping stages whose key and artifacts are unchanged.
///
/// On stage failure the partial manifest (with the failed record) is saved
/// before the error is returned.
pub fn run_experiment_until(config: &RunConfig, last_stage: Stage) -> Result<RunOutcome> {
    config.validate()?;
    let run_dir = config.output.dir.clone();
    fs::create_dir_all(&run_dir)?;
    let config_checksum = experiment_checksum(config)?;
    let previous = RunManifest::load(&run_dir).ok();

    let mut manifest = RunManifest::new(config_checksum);
    let mut executed = Vec::new();
    let mut skipped = Vec::new();
    let mut keys: std::collections::BTreeMap<&'static str, String> = Default::default();

    for stage in Stage::ALL {
        if stage > last_stage {
            break;
        }
        let input_keys: Vec<&str> = stage_inputs(stage)
            .iter()
            .map(|s| keys[s.name()].as_str())
            .collect();
        let key = manifest::stage_key(stage.name(), &config_slice(config, stage)?, &input_keys);
        keys.insert(stage.name(), key.clone());

        // resume: reuse an identical completed stage with intact artifacts
        if let Some(prev) = previous.as_ref().and_then(|m| m.stage(stage.name())) {
            if prev.status == StageStatus::Completed
                && prev.key == key
                && manifest::verify_artifacts(&run_dir, &prev.artifacts).is_ok()
            {
                manifest.stages.push(prev.clone());
                skipped.push(stage.name().to_string());
                continue;
            }
        }

        let started = manifest::now_ms();
        match execute_stage(config, &run_dir, stage) {
            Ok(files) => {
                let artifacts = manifest::record_artifacts(&run_dir, &files)?;
                manifest.stages.push(StageRecord {
                    name: stage.name().to_string(),
                    status: StageStatus::Completed,
                    key,
                    artifacts,
                    started_unix_ms: started,
                    finished_unix_ms: manifest::now_ms(),
                    error: None,
                });
                executed.push(stage.name().to_string());
            }
            Err(e) => {
                manifest.stages.push(StageRecord {
                    name: stage.name().to_string(),
                    status: StageStatus::Failed,
                    key,
                    artifacts: Vec::new(),
                    started_unix_ms: started,
                    finished_unix_ms: manifest::now_ms(),
                    error: Some(e.to_string()),
                });
                manifest.written_unix_ms = manifest::now_ms();
                manifest.save(&run_dir)?;
                return Err(e.in_stage(stage.name()));
            }
        }
    }
    manifest.written_unix_ms = manifest::now_ms();
    manifest.save(&run_dir)?;
    Ok(RunOutcome { manifest, executed, skipped })
}

/// Run the complete pipeline.
pub fn run_experiment(config: &RunConfig) -> Result<RunOutcome> {
    run_experiment_until(config, Stage::Report)
}

/// Build the report for an existing run directory without executing any
/// stage. Missing stages show up as explicitly stated gaps.
pub fn report(config: &RunConfig) -> Result<String> {
    build_report(config, &config.output.dir)
}
