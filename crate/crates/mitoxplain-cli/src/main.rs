//! Experiment pipeline CLI.
//!
//! Subcommands map onto pipeline stages (`synth`/`ingest` both drive the
//! data stage); `run` executes the whole pipeline. Completed stages with
//! unchanged config and intact artifacts are skipped.
//!
//! Exit codes: 0 success, 1 stage failure, 2 invalid configuration.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mitoxplain::error::Error;
use mitoxplain::explain::MethodName;
use mitoxplain::patch::{EdgePolicy, NormPolicy};
use mitoxplain::run::{self, DataSource, RunConfig, Stage};
use mitoxplain::trainer::{Backbone, ChannelSelection, InitScheme};

#[derive(Parser)]
#[command(name = "mitoxplain", version, about = "Train and explain classifiers on multichannel protein-expression images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic cohort (data stage; requires source = "synthetic").
    Synth(StageArgs),
    /// Ingest external stacks (data stage; requires source = "ingest").
    Ingest(StageArgs),
    /// Cut, normalise and persist patches.
    Patchify(StageArgs),
    /// Train the full backbone x channel x seed matrix.
    Train(StageArgs),
    /// Compute test metrics and the model ranking.
    Evaluate(StageArgs),
    /// Run the explanation methods on the top models.
    Explain(StageArgs),
    /// Render overlay/triptych figures.
    Render(StageArgs),
    /// Assemble and print the report from whatever the run directory holds;
    /// missing stages appear as stated gaps. Runs nothing.
    Report(StageArgs),
    /// Run the complete pipeline.
    Run(StageArgs),
}

#[derive(Args)]
struct StageArgs {
    /// Run configuration (TOML).
    #[arg(long, short)]
    config: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

/// Flag overrides for every scalar config field; values given here replace
/// the corresponding file entries.
#[derive(Args, Default)]
struct Overrides {
    // output
    #[arg(long)]
    output_dir: Option<PathBuf>,
    // data.synthetic
    #[arg(long)]
    n_control: Option<usize>,
    #[arg(long)]
    n_patient: Option<usize>,
    #[arg(long)]
    synth_seed: Option<u64>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    fiber_count: Option<usize>,
    #[arg(long)]
    mean_fiber_diameter: Option<f64>,
    #[arg(long)]
    membrane_thickness: Option<usize>,
    #[arg(long)]
    noise_sd: Option<f64>,
    #[arg(long)]
    hole_fraction: Option<f64>,
    #[arg(long)]
    deficient_fiber_fraction: Option<f64>,
    #[arg(long)]
    deficiency_factor: Option<f64>,
    #[arg(long)]
    rrf_fraction: Option<f64>,
    #[arg(long)]
    rrf_gain: Option<f64>,
    /// Comma-separated channel names carrying the deficiency signal.
    #[arg(long)]
    deficient_channels: Option<String>,
    #[arg(long)]
    subsarcolemmal_band: Option<usize>,
    #[arg(long)]
    subsarcolemmal_gain: Option<f64>,
    // preprocess
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    /// drop | pad_zero
    #[arg(long)]
    edge_policy: Option<String>,
    /// unit_max | zscore | percentile:<lo>:<hi>
    #[arg(long)]
    normalization: Option<String>,
    /// Comma-separated train,validation,test fractions.
    #[arg(long)]
    ratios: Option<String>,
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long)]
    group_by_subject: Option<bool>,
    // train
    /// Comma-separated: smallcnn | vgg16 | resnet50
    #[arg(long)]
    backbones: Option<String>,
    /// Comma-separated selections; "ALL" or names joined with '+'.
    #[arg(long)]
    channels: Option<String>,
    /// Comma-separated training seeds.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// random | pretrained_imagenet
    #[arg(long)]
    init: Option<String>,
    #[arg(long)]
    pretrained_weights: Option<PathBuf>,
    #[arg(long)]
    bias: Option<bool>,
    // explain
    /// Comma-separated method names.
    #[arg(long)]
    methods: Option<String>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    patches_per_class: Option<usize>,
}

fn split_csv(text: &str) -> Vec<String> {
    text.split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

fn apply_overrides(mut config: RunConfig, o: &Overrides) -> Result<RunConfig, Error> {
    if let Some(dir) = &o.output_dir {
        config.output.dir = dir.clone();
    }
    if let Some(synth) = config.data.synthetic.as_mut() {
        macro_rules! set {
            ($field:ident, $target:expr) => {
                if let Some(v) = o.$field {
                    $target = v;
                }
            };
        }
        set!(n_control, synth.n_control);
        set!(n_patient, synth.n_patient);
        set!(synth_seed, synth.seed);
        set!(image_size, synth.params.image_size);
        set!(fiber_count, synth.params.fiber_count);
        set!(mean_fiber_diameter, synth.params.mean_fiber_diameter);
        set!(membrane_thickness, synth.params.membrane_thickness);
        set!(noise_sd, synth.params.noise_sd);
        set!(hole_fraction, synth.params.hole_fraction);
        set!(deficient_fiber_fraction, synth.params.deficient_fiber_fraction);
        set!(deficiency_factor, synth.params.deficiency_factor);
        set!(rrf_fraction, synth.params.rrf_fraction);
        set!(rrf_gain, synth.params.rrf_gain);
        set!(subsarcolemmal_band, synth.params.subsarcolemmal_band);
        set!(subsarcolemmal_gain, synth.params.subsarcolemmal_gain);
        if let Some(channels) = &o.deficient_channels {
            synth.params.deficient_channels = split_csv(channels);
        }
    }
    if let Some(v) = o.patch_size {
        config.preprocess.patch_size = v;
    }
    if let Some(v) = o.stride {
        config.preprocess.stride = Some(v);
    }
    if let Some(policy) = &o.edge_policy {
        config.preprocess.edge_policy = match policy.as_str() {
            "drop" => EdgePolicy::Drop,
            "pad_zero" => EdgePolicy::PadZero,
            other => return Err(Error::Config(format!("unknown edge policy '{other}'"))),
        };
    }
    if let Some(norm) = &o.normalization {
        config.preprocess.normalization = parse_normalization(norm)?;
    }
    if let Some(ratios) = &o.ratios {
        let parts: Vec<f64> = split_csv(ratios)
            .iter()
            .map(|s| s.parse::<f64>().map_err(|e| Error::Config(e.to_string())))
            .collect::<Result<_, _>>()?;
        if parts.len() != 3 {
            return Err(Error::Config("ratios must have 3 entries".to_string()));
        }
        config.preprocess.ratios = [parts[0], parts[1], parts[2]];
    }
    if let Some(v) = o.split_seed {
        config.preprocess.split_seed = v;
    }
    if let Some(v) = o.group_by_subject {
        config.preprocess.group_by_subject = v;
    }
    if let Some(backbones) = &o.backbones {
        config.train.backbones = split_csv(backbones)
            .iter()
            .map(|s| s.parse::<Backbone>())
            .collect::<Result<_, _>>()?;
    }
    if let Some(channels) = &o.channels {
        config.train.channel_selections = split_csv(channels)
            .iter()
            .map(|s| {
                if s.eq_ignore_ascii_case("all") {
                    ChannelSelection::All
                } else {
                    ChannelSelection::Channels(s.split('+').map(|c| c.to_string()).collect())
                }
            })
            .collect();
    }
    if let Some(seeds) = &o.seeds {
        config.train.seeds = split_csv(seeds)
            .iter()
            .map(|s| s.parse::<u64>().map_err(|e| Error::Config(e.to_string())))
            .collect::<Result<_, _>>()?;
    }
    if let Some(v) = o.learning_rate {
        config.train.learning_rate = v;
    }
    if let Some(v) = o.max_epochs {
        config.train.max_epochs = v;
    }
    if let Some(v) = o.batch_size {
        config.train.batch_size = v;
    }
    if let Some(v) = o.patience {
        config.train.early_stop_patience = v;
    }
    if let Some(init) = &o.init {
        config.train.init = match init.as_str() {
            "random" => InitScheme::Random,
            "pretrained_imagenet" => InitScheme::PretrainedImagenet,
            other => return Err(Error::Config(format!("unknown init '{other}'"))),
        };
    }
    if let Some(path) = &o.pretrained_weights {
        config.train.pretrained_weights = Some(path.clone());
    }
    if let Some(v) = o.bias {
        config.train.bias = v;
    }
    if let Some(methods) = &o.methods {
        config.explain.methods = split_csv(methods)
            .iter()
            .map(|s| s.parse::<MethodName>())
            .collect::<Result<_, _>>()?;
    }
    if let Some(v) = o.top_k {
        config.explain.top_k = v;
    }
    if let Some(v) = o.patches_per_class {
        config.explain.patches_per_class = v;
    }
    config.validate()?;
    Ok(config)
}

fn parse_normalization(text: &str) -> Result<NormPolicy, Error> {
    match text {
        "unit_max" => Ok(NormPolicy::UnitMax),
        "zscore" => Ok(NormPolicy::Zscore),
        other => {
            let parts: Vec<&str> = other.split(':').collect();
            if parts.len() == 3 && parts[0] == "percentile" {
                let p_lo = parts[1].parse().map_err(|_| {
                    Error::Config(format!("bad percentile bound '{}'", parts[1]))
                })?;
                let p_hi = parts[2].parse().map_err(|_| {
                    Error::Config(format!("bad percentile bound '{}'", parts[2]))
                })?;
                Ok(NormPolicy::PercentileClip { p_lo, p_hi })
            } else {
                Err(Error::Config(format!("unknown normalization '{other}'")))
            }
        }
    }
}

fn load_config(args: &StageArgs) -> Result<RunConfig, Error> {
    let config = RunConfig::load(&args.config)?;
    apply_overrides(config, &args.overrides)
}

fn run_stage(args: &StageArgs, stage: Stage, expect_source: Option<DataSource>) -> Result<(), Error> {
    let config = load_config(args)?;
    if let Some(source) = expect_source {
        if config.data.source != source {
            return Err(Error::Config(format!(
                "this subcommand requires data.source = {:?}",
                source
            )));
        }
    }
    let outcome = run::run_experiment_until(&config, stage)?;
    for name in &outcome.skipped {
        eprintln!("stage {name}: unchanged, skipped");
    }
    for name in &outcome.executed {
        eprintln!("stage {name}: completed");
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Synth(args) => run_stage(&args, Stage::Data, Some(DataSource::Synthetic)),
        Command::Ingest(args) => run_stage(&args, Stage::Data, Some(DataSource::Ingest)),
        Command::Patchify(args) => run_stage(&args, Stage::Patchify, None),
        Command::Train(args) => run_stage(&args, Stage::Train, None),
        Command::Evaluate(args) => run_stage(&args, Stage::Evaluate, None),
        Command::Explain(args) => run_stage(&args, Stage::Explain, None),
        Command::Render(args) => run_stage(&args, Stage::Render, None),
        Command::Report(args) => {
            let config = load_config(&args)?;
            let text = run::report(&config)?;
            std::fs::create_dir_all(&config.output.dir)?;
            std::fs::write(config.output.dir.join("report.md"), &text)?;
            println!("{text}");
            Ok(())
        }
        Command::Run(args) => run_stage(&args, Stage::Report, None),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ (Error::Config(_) | Error::BadSplitRatios(_) | Error::FileNotFound(_))) => {
            eprintln!("invalid config: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
