use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use keyscope::analysis::Augmentation;
use keyscope::pipeline::{
    cache_root, grid_cells, parse_keys, parse_shift_range, AnalyzeAugCmd, EvaluateCmd, ExtractCmd,
    FeatureSource, GridSearchCmd, PipelineConfig, PretrainCmd, PretrainSource, SynthDataCmd,
    TrainProbeCmd,
};
use keyscope::probe::ProbeArch;
use keyscope::{Error, Result};

#[derive(Parser)]
#[command(
    name = "keyscope",
    version,
    about = "Contrastive spectrogram encoder and key-estimation probes"
)]
struct Cli {
    /// TOML pipeline configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Run single-threaded.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render keyed synthetic clips and a `path,key` manifest.
    SynthData {
        /// `all` or a comma-separated key list such as "C major,A minor".
        #[arg(long, default_value = "all")]
        keys: String,
        #[arg(long, default_value_t = 10)]
        clips_per_key: usize,
        /// Clip length in seconds (defaults to the config value).
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Contrastive pretraining of the encoder.
    Pretrain {
        /// Audio manifest (`path,key` CSV or one path per line).
        #[arg(long, conflicts_with = "synthetic")]
        manifest: Option<PathBuf>,
        /// Pretrain on this many lazily synthesised clips instead of a manifest.
        #[arg(long)]
        synthetic: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        depth: Option<usize>,
        /// Checkpoint directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract frozen window features for every track and pitch shift.
    Extract {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        context: Option<usize>,
        /// Inclusive range such as -6..6, or a comma list.
        #[arg(long, allow_hyphen_values = true)]
        shifts: Option<String>,
        /// Cache directory (default: $KEYSCOPE_CACHE, else ./feature-cache).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one probe on cached features.
    TrainProbe {
        #[command(flatten)]
        features: FeatureArgs,
        /// `linear`, `bb`, `gs`, or `<layers>x<width>:<dropout>` (e.g. 1x2048:0.75).
        #[arg(long)]
        arch: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Probe checkpoint directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Search the 28 architecture × 160 optimiser grid.
    GridSearch {
        #[command(flatten)]
        features: FeatureArgs,
        /// Print the enumeration without training.
        #[arg(long)]
        dry_run: bool,
        #[arg(long)]
        max_archs: Option<usize>,
        #[arg(long)]
        max_configs: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, required_unless_present = "dry_run")]
        out: Option<PathBuf>,
    },
    /// Track-level key report for a trained probe.
    Evaluate {
        #[command(flatten)]
        features: FeatureArgs,
        #[arg(long)]
        probe: PathBuf,
        /// Model name in the report row.
        #[arg(long, default_value = "probe")]
        name: String,
        /// Report CSV path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit linear maps from clean to augmented embeddings.
    AnalyzeAug {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Repeatable: pitch:+2, gain:-6, noise:20, lowpass:2000, highpass:300.
        #[arg(long = "augment", required = true, allow_hyphen_values = true)]
        augmentations: Vec<String>,
        #[arg(long)]
        clips: Option<usize>,
        #[arg(long)]
        context: Option<usize>,
        /// Ridge strength (default scales with the feature energy).
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct FeatureArgs {
    /// Feature cache directory (default: $KEYSCOPE_CACHE, else ./feature-cache).
    #[arg(long)]
    features: Option<PathBuf>,
    /// Manifest whose tracks to use.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Checkpoint hash prefix, when the cache holds several encoders.
    #[arg(long)]
    ckpt_hash: Option<String>,
    #[arg(long)]
    context: Option<usize>,
}

impl FeatureArgs {
    fn source(&self) -> Result<FeatureSource> {
        Ok(FeatureSource {
            cache: cache_root(self.features.as_deref(), Path::new("feature-cache")),
            manifest: self
                .manifest
                .clone()
                .ok_or_else(|| Error::InvalidArgument("--manifest is required".into()))?,
            checkpoint_hash: self.ckpt_hash.clone(),
            context_len: self.context,
        })
    }
}

fn parse_arch(text: &str) -> Result<ProbeArch> {
    let bad = || Error::InvalidArgument(format!("bad probe architecture {text:?}"));
    let arch = match text {
        "linear" => ProbeArch::linear(),
        "bb" => ProbeArch::bb_reference(),
        "gs" => ProbeArch::gs_reference(),
        other => {
            let (shape, dropout) = other.split_once(':').ok_or_else(bad)?;
            let (layers, width) = shape.split_once('x').ok_or_else(bad)?;
            ProbeArch::mlp(
                layers.parse().map_err(|_| bad())?,
                width.parse().map_err(|_| bad())?,
                dropout.parse().map_err(|_| bad())?,
            )
        }
    };
    arch.validate()?;
    Ok(arch)
}

fn run(cli: Cli, argv: Vec<String>) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if cli.sequential {
        keyscope::par::set_enabled(false);
    }
    match cli.command {
        Command::SynthData {
            keys,
            clips_per_key,
            duration,
            out,
        } => {
            let manifest = SynthDataCmd {
                out,
                keys: parse_keys(&keys)?,
                clips_per_key,
                duration_s: duration.unwrap_or(cfg.synth_duration_s),
                seed: cfg.seed,
                args: argv,
            }
            .run()?;
            println!("{}", manifest.display());
        }
        Command::Pretrain {
            manifest,
            synthetic,
            steps,
            depth,
            out,
        } => {
            if let Some(s) = steps {
                cfg.pretrain.steps = s;
            }
            if let Some(d) = depth {
                cfg.encoder.depth = d;
            }
            cfg.validate()?;
            let source = match (manifest, synthetic) {
                (Some(m), _) => Some(PretrainSource::Manifest(m)),
                (None, Some(n)) => Some(PretrainSource::Synthetic(n)),
                (None, None) => None,
            };
            let run = PretrainCmd {
                config: cfg,
                source,
                out: out.clone(),
                args: argv,
            }
            .run()?;
            let last = run.curve.last().map(|p| p.loss).unwrap_or(f64::NAN);
            println!(
                "{} steps, final loss {last:.4}, checkpoint {}",
                run.curve.len(),
                out.display()
            );
        }
        Command::Extract {
            manifest,
            ckpt,
            context,
            shifts,
            out,
        } => {
            let shifts = match shifts {
                Some(s) => parse_shift_range(&s)?,
                None => cfg.shift_list()?,
            };
            let out = cache_root(out.as_deref(), Path::new("feature-cache"));
            let summary = ExtractCmd {
                manifest,
                ckpt,
                frontend: cli.config.as_ref().map(|_| cfg.frontend.clone()),
                context_len: context.unwrap_or(cfg.context_len),
                shifts,
                out: out.clone(),
                args: argv,
            }
            .run()?;
            println!(
                "{} variants ({} cached, {} computed) in {}",
                summary.variants,
                summary.hits,
                summary.computed,
                out.display()
            );
        }
        Command::TrainProbe {
            features,
            arch,
            epochs,
            out,
        } => {
            if let Some(a) = arch {
                cfg.probe = parse_arch(&a)?;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            cfg.validate()?;
            let trained = TrainProbeCmd {
                config: cfg,
                features: features.source()?,
                out: out.clone(),
                args: argv,
            }
            .run()?;
            println!(
                "best epoch {}: validation weighted {:.2}; probe saved to {}",
                trained.best_epoch,
                trained.best_val.weighted,
                out.display()
            );
        }
        Command::GridSearch {
            features,
            dry_run,
            max_archs,
            max_configs,
            epochs,
            out,
        } => {
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if dry_run {
                let t = cfg.train_config();
                let cells = grid_cells(t.epochs, t.patience, t.seed);
                println!("architecture\toptimiser");
                for (arch, c) in &cells {
                    println!("{}\t{}", arch.label(), c.label());
                }
                println!(
                    "# 28 architectures x 160 optimiser settings = {} runs",
                    cells.len()
                );
                return Ok(());
            }
            let out = out.ok_or_else(|| Error::InvalidArgument("--out is required".into()))?;
            let rows = GridSearchCmd {
                config: cfg,
                features: features.source()?,
                out: out.clone(),
                max_archs,
                max_configs,
                args: argv,
            }
            .run()?;
            if let Some(best) = rows.first() {
                println!(
                    "best: {} / {} weighted {:.2}",
                    best.arch.label(),
                    best.config.label(),
                    best.val_weighted.unwrap_or(f64::NAN)
                );
            }
        }
        Command::Evaluate {
            features,
            probe,
            name,
            out,
        } => {
            let report = EvaluateCmd {
                probe,
                features: features.source()?,
                model_name: name.clone(),
                out,
            }
            .run()?;
            report.write_csv(std::io::stdout().lock(), &name)?;
        }
        Command::AnalyzeAug {
            manifest,
            ckpt,
            augmentations,
            clips,
            context,
            lambda,
            out,
        } => {
            let augmentations = augmentations
                .iter()
                .map(|a| Augmentation::parse(a))
                .collect::<Result<Vec<_>>>()?;
            let reports = AnalyzeAugCmd {
                manifest,
                ckpt,
                augmentations,
                clips,
                context_len: context.unwrap_or(cfg.context_len),
                lambda,
                seed: cfg.seed,
                out,
                args: argv,
            }
            .run()?;
            for r in &reports {
                println!(
                    "{} {}: train mse {:.4e} (identity {:.4e}), held-out mse {:.4e} (identity {:.4e})",
                    r.augmentation, r.params, r.train_mse, r.identity_train_mse, r.test_mse, r.identity_test_mse
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli, argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
