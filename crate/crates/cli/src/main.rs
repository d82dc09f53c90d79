use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgMatches, CommandFactory, FromArgMatches, Parser, Subcommand};
use zoomloc::config::Config;
use zoomloc::eval::Variant;
use zoomloc::pipeline::{self, Layout};
use zoomloc::pretext::PretextTask;
use zoomloc::{Error, Result};

/// Multi-resolution patch-location pretraining and subtype transfer.
///
/// Every stage reads the JSON config given by --config (built-in desk
/// defaults otherwise), takes its inputs from the standard directories
/// below --out unless overridden, and writes only into its own directory
/// below --out. Exit codes: 1 config error, 2 data error, 3 numerical
/// failure.
#[derive(Parser, Debug)]
#[command(name = "zoomloc", version)]
struct Cli {
    /// JSON config; missing keys take the profile defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Defaults profile the config is layered on: desk or full.
    #[arg(long, global = true, default_value = "desk")]
    profile: String,
    /// Overrides the master seed and every derived stage seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact root.
    #[arg(long, global = true, default_value = "zoomloc-out")]
    out: PathBuf,
    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Print the effective config as JSON and exit.
    #[arg(long)]
    print_defaults: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic cohort into OUT/cohort.
    GenSynth,
    /// Sample a pretext dataset into OUT/pretext-<task>.
    GenPretext {
        #[arg(long)]
        cohort: Option<PathBuf>,
        /// Overrides pretext.task.
        #[arg(long)]
        task: Option<String>,
    },
    /// Train the siamese model into OUT/pretext-model-<task>.
    TrainPretext {
        /// Dataset directory (default OUT/pretext-<task>).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        task: Option<String>,
    },
    /// Fine-tune a subtype classifier into OUT/downstream-model.
    TrainDownstream {
        #[arg(long)]
        cohort: Option<PathBuf>,
        /// location-ssl, pair-ssl, external-weights or random-init.
        #[arg(long, default_value = "location-ssl")]
        variant: String,
        /// Encoder checkpoint directory (default OUT/pretext-model-<task> for SSL variants).
        #[arg(long)]
        encoder: Option<PathBuf>,
        /// Overrides downstream.label_fraction.
        #[arg(long)]
        label_fraction: Option<f64>,
    },
    /// Patient-level predictions into OUT/evaluation.
    Evaluate {
        #[arg(long)]
        cohort: Option<PathBuf>,
        /// Downstream model directory (default OUT/downstream-model).
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Label-fraction ablation into OUT/ablation.
    Ablate {
        #[arg(long)]
        cohort: Option<PathBuf>,
        /// Default OUT/pretext-model-location.
        #[arg(long)]
        location_encoder: Option<PathBuf>,
        /// Default OUT/pretext-model-pair.
        #[arg(long)]
        pair_encoder: Option<PathBuf>,
        /// Any compatible encoder checkpoint; required for external-weights.
        #[arg(long)]
        external_weights: Option<PathBuf>,
    },
    /// Oracle and gradient suites; writes OUT/verify/verify.json.
    Verify,
}

/// Config sections each subcommand reads.
const READS: [(&str, &[&str]); 7] = [
    ("gen-synth", &["synth"]),
    ("gen-pretext", &["pretext"]),
    ("train-pretext", &["seed", "precision", "model", "train.pretext"]),
    ("train-downstream", &["seed", "precision", "model", "train.downstream", "downstream"]),
    ("evaluate", &["precision", "downstream.tiles"]),
    ("ablate", &["seed", "precision", "model", "train.downstream", "downstream.tiles", "eval"]),
    ("verify", &["seed", "synth", "pretext.sampler"]),
];

fn command() -> clap::Command {
    let mut cmd = Cli::command();
    for (name, sections) in READS {
        let keys: Vec<String> = sections.iter().flat_map(|s| Config::keys(s)).collect();
        let text = format!("Config keys read:\n  {}", keys.join("\n  "));
        cmd = cmd.mut_subcommand(name, |c| c.after_help(text));
    }
    cmd
}

fn parse_task(s: &str) -> Result<PretextTask> {
    match s {
        "location" => Ok(PretextTask::Location),
        "pair" => Ok(PretextTask::Pair),
        _ => Err(Error::Config(format!("unknown task {s:?} (location, pair)"))),
    }
}

fn load_config(cli: &Cli) -> Result<Config> {
    let text = match &cli.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => "{}".to_string(),
    };
    let mut cfg = Config::profile(&cli.profile)?;
    // layer the file over the profile so partial configs keep profile values
    let mut base = serde_json::to_value(&cfg)?;
    let over: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("config: {e}")))?;
    merge(&mut base, over);
    cfg = Config::from_json(&base.to_string())?;
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    if cli.print_defaults {
        println!("{}", cfg.to_json());
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(Error::Config("no subcommand given (see --help)".into()));
    };
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build_global()
            .map_err(|e| Error::Config(format!("threads: {e}")))?;
    }
    let layout = Layout::new(&cli.out);
    match command {
        Command::GenSynth => {
            cfg.validate()?;
            pipeline::gen_synth(&cfg, &layout.cohort())?;
        }
        Command::GenPretext { cohort, task } => {
            if let Some(t) = task {
                cfg.pretext.task = parse_task(&t)?;
            }
            let cohort = cohort.unwrap_or_else(|| layout.cohort());
            pipeline::gen_pretext(&cfg, &cohort, &layout.pretext_data(cfg.pretext.task))?;
        }
        Command::TrainPretext { data, task } => {
            if let Some(t) = task {
                cfg.pretext.task = parse_task(&t)?;
            }
            let data = data.unwrap_or_else(|| layout.pretext_data(cfg.pretext.task));
            let info = zoomloc::pretext::DatasetInfo::load(&data)
                .map_err(|e| Error::DataFormat(format!("{}: {e}", data.display())))?;
            let summary = pipeline::train_pretext(&cfg, &data, &layout.pretext_model(info.spec.task))?;
            println!("{}", serde_json::to_string(&summary)?);
        }
        Command::TrainDownstream {
            cohort,
            variant,
            encoder,
            label_fraction,
        } => {
            let variant: Variant = variant.parse()?;
            if let Some(f) = label_fraction {
                cfg.downstream.label_fraction = f;
            }
            let encoder = match variant {
                Variant::RandomInit => None,
                Variant::LocationSsl => Some(encoder.unwrap_or_else(|| layout.pretext_model(PretextTask::Location))),
                Variant::PairSsl => Some(encoder.unwrap_or_else(|| layout.pretext_model(PretextTask::Pair))),
                Variant::ExternalWeights => Some(
                    encoder.ok_or_else(|| Error::Config("external-weights needs --encoder".into()))?,
                ),
            };
            let cohort = cohort.unwrap_or_else(|| layout.cohort());
            let summary = pipeline::train_downstream(
                &cfg,
                &cohort,
                encoder.as_deref().map(|d| (variant, d)),
                &layout.downstream_model(),
            )?;
            println!("{}", serde_json::to_string(&summary)?);
        }
        Command::Evaluate { cohort, model } => {
            let cohort = cohort.unwrap_or_else(|| layout.cohort());
            let model = model.unwrap_or_else(|| layout.downstream_model());
            let s = pipeline::evaluate(&cfg, &cohort, &model, &layout.evaluation())?;
            println!(
                "{{\"patients\":{},\"mean_class_accuracy\":{},\"misclassified\":{}}}",
                s.patients, s.mean_class_accuracy, s.misclassified
            );
        }
        Command::Ablate {
            cohort,
            location_encoder,
            pair_encoder,
            external_weights,
        } => {
            let mut encoders = BTreeMap::new();
            encoders.insert(
                Variant::LocationSsl,
                location_encoder.unwrap_or_else(|| layout.pretext_model(PretextTask::Location)),
            );
            encoders.insert(
                Variant::PairSsl,
                pair_encoder.unwrap_or_else(|| layout.pretext_model(PretextTask::Pair)),
            );
            if let Some(d) = external_weights {
                encoders.insert(Variant::ExternalWeights, d);
            }
            let cohort = cohort.unwrap_or_else(|| layout.cohort());
            let r = pipeline::ablate(&cfg, &cohort, &encoders, &layout.ablation())?;
            for p in &r.points {
                println!("{} {:.2}: {:.4} +- {:.4}", p.variant.name(), p.fraction, p.mean_acc, p.std_acc);
            }
        }
        Command::Verify => {
            let r = pipeline::verify(&cfg, &layout.verify())?;
            println!(
                "oracle {}/{}; {} gradient checks passed",
                r.oracle.matched,
                r.oracle.samples,
                r.gradients.len()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_secs()
        .init();
    let matches: ArgMatches = match command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            // usage errors are configuration errors
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
