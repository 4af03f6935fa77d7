//! `homecast`: command-line front end for every pipeline stage.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data validation,
//! parse or I/O error, 3 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use homecast_core::config::{config_hash, RunConfig};
use homecast_core::data::{self, Provenance};
use homecast_core::evaluation;
use homecast_core::features;
use homecast_core::forest::{self, ForestModel};
use homecast_core::pipeline::{self, GatePoint, PipelineArtifact};
use homecast_core::synth::{self, GeneratorConfig};
use homecast_core::Error;

#[derive(Parser)]
#[command(
    name = "homecast",
    version,
    about = "Two-phase home location inference from geotagged check-ins"
)]
struct Cli {
    /// Seed override (beats the config file and HOMECAST_SEED).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to the number of available cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Log at debug level.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunOpts {
    /// JSON run configuration; missing keys take defaults, unknown keys are rejected.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic check-ins with planted homes.
    Synth {
        /// JSON generator configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        users: Option<usize>,
        #[arg(long)]
        days: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
    /// Per-feature separation between home and non-home records.
    Gaps {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-user DBSCAN over raw check-ins.
    Cluster {
        #[command(flatten)]
        run: RunOpts,
        #[arg(long)]
        checkins: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Location records with all ten features; labels homes when truth is given.
    Features {
        #[command(flatten)]
        run: RunOpts,
        /// Clustered check-ins from `cluster`.
        #[arg(long)]
        clustered: PathBuf,
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the phase-1 random forest on labeled records.
    TrainForest {
        #[command(flatten)]
        run: RunOpts,
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Keep records whose forest vote fraction reaches the threshold.
    Filter {
        #[command(flatten)]
        run: RunOpts,
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        forest: PathBuf,
        /// Defaults to the configured phase-1 threshold.
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        /// Optional JSON filter statistics.
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// Fit the full pipeline and save the model artifact.
    Fit {
        #[command(flatten)]
        run: RunOpts,
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict one home per user with a saved model.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        records: PathBuf,
        /// Overrides the gate threshold stored in the model.
        #[arg(long)]
        gate: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Gate-threshold sweep of a saved model on labeled records.
    Sweep {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        records: PathBuf,
        /// start:stop:step
        #[arg(long, default_value = "0:1:0.01")]
        grid: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// k-fold cross-validation with user-disjoint folds.
    Evaluate {
        #[command(flatten)]
        run: RunOpts,
        #[arg(long)]
        records: PathBuf,
        /// JSON evaluation report.
        #[arg(long)]
        out: PathBuf,
        /// Optional CSV of the pooled gate curve.
        #[arg(long)]
        curve: Option<PathBuf>,
        #[arg(long, default_value = "0:1:0.01")]
        grid: String,
    },
    /// Component ablation under the same folds as `evaluate`.
    Ablate {
        #[command(flatten)]
        run: RunOpts,
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// DNN-R accuracy per dropout rate.
    SweepDropout {
        #[command(flatten)]
        run: RunOpts,
        #[arg(long)]
        records: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5")]
        rates: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// DNN-R accuracy per epoch count.
    SweepEpochs {
        #[command(flatten)]
        run: RunOpts,
        #[arg(long)]
        records: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "10,25,50,75,100")]
        epochs: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn env_seed() -> Result<Option<u64>, Error> {
    match std::env::var("HOMECAST_SEED") {
        Ok(s) => {
            s.trim().parse().map(Some).map_err(|_| {
                Error::Config(format!("HOMECAST_SEED={s:?} is not an unsigned integer"))
            })
        }
        Err(_) => Ok(None),
    }
}

fn has_seed_key(path: &Path) -> Result<bool, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let v: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok(v.get("seed").is_some())
}

/// Seed precedence: flag, then config file, then HOMECAST_SEED, then default.
fn resolve_seed(
    flag: Option<u64>,
    config_path: Option<&Path>,
    current: &mut u64,
) -> Result<(), Error> {
    if let Some(s) = flag {
        *current = s;
    } else if !matches!(config_path, Some(p) if has_seed_key(p)?) {
        if let Some(s) = env_seed()? {
            *current = s;
        }
    }
    Ok(())
}

fn load_run_config(opts: &RunOpts, seed: Option<u64>) -> Result<RunConfig, Error> {
    let mut cfg = match &opts.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    resolve_seed(seed, opts.config.as_deref(), &mut cfg.seed)?;
    cfg.validate()?;
    info!(
        "resolved config (hash {}):\n{}",
        cfg.hash(),
        cfg.to_json_pretty()
    );
    Ok(cfg)
}

fn load_generator_config(path: Option<&Path>, seed: Option<u64>) -> Result<GeneratorConfig, Error> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => GeneratorConfig::default(),
    };
    resolve_seed(seed, path, &mut cfg.seed)?;
    Ok(cfg)
}

fn load_forest(path: &Path) -> Result<ForestModel, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut doc: serde_json::Value = serde_json::from_str(&text)?;
    let forest = doc
        .get_mut("forest")
        .map(serde_json::Value::take)
        .ok_or_else(|| Error::Validation(format!("{}: no \"forest\" entry", path.display())))?;
    let model: ForestModel = serde_json::from_value(forest)?;
    model.validate()?;
    Ok(model)
}

fn f(x: f64) -> String {
    x.to_string()
}

fn write_gate_curve(path: &Path, prov: &Provenance, curve: &[GatePoint]) -> Result<(), Error> {
    let rows: Vec<Vec<String>> = curve
        .iter()
        .map(|p| {
            vec![
                f(p.threshold),
                p.n_users.to_string(),
                p.n_reported.to_string(),
                p.n_correct.to_string(),
                f(p.reported_fraction),
                f(p.subset_accuracy),
                u8::from(p.empty).to_string(),
            ]
        })
        .collect();
    data::write_table(
        path,
        Some(prov),
        &[
            "threshold",
            "n_users",
            "n_reported",
            "n_correct",
            "reported_fraction",
            "subset_accuracy",
            "empty",
        ],
        &rows,
    )
}

fn write_sweep(
    path: &Path,
    prov: &Provenance,
    name: &str,
    points: &[evaluation::SweepPoint],
) -> Result<(), Error> {
    let k = points.first().map_or(0, |p| p.fold_accuracies.len());
    let mut header = vec![name.to_string(), "mean_accuracy".to_string()];
    header.extend((0..k).map(|i| format!("fold{i}_accuracy")));
    let rows: Vec<Vec<String>> = points
        .iter()
        .map(|p| {
            let mut r = vec![f(p.value), f(p.mean_accuracy)];
            r.extend(p.fold_accuracies.iter().map(|&a| f(a)));
            r
        })
        .collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    data::write_table(path, Some(prov), &header, &rows)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Synth {
            config,
            users,
            days,
            out,
            truth,
        } => {
            let mut cfg = load_generator_config(config.as_deref(), cli.seed)?;
            if let Some(u) = users {
                cfg.n_users = u;
            }
            if let Some(d) = days {
                cfg.days = d;
            }
            info!(
                "generator config (hash {}):\n{}",
                config_hash(&cfg),
                serde_json::to_string_pretty(&cfg)?
            );
            let prov = Provenance::new(config_hash(&cfg));
            let (checkins, homes) = synth::generate(&cfg)?;
            data::write_checkins(&checkins, &out, Some(&prov))?;
            data::write_truth(&homes, &truth, Some(&prov))?;
            info!("{} check-ins for {} users", checkins.len(), homes.len());
        }
        Command::Gaps { records, out } => {
            let ds = data::read_records(&records)?;
            ds.validate_labeled()?;
            let report = synth::bayes_gap_report(&ds);
            let prov = Provenance::new(config_hash(&report.n_records));
            data::write_json_with_provenance(&out, &prov, "gaps", &report)?;
        }
        Command::Cluster { run, checkins, out } => {
            let cfg = load_run_config(&run, cli.seed)?;
            let rows = data::read_checkins(&checkins)?;
            let labels = features::cluster_checkins(&rows, cfg.dbscan.eps_m, cfg.dbscan.min_pts)?;
            data::write_clustered_checkins(&rows, &labels, &out, Some(&cfg.provenance()))?;
        }
        Command::Features {
            run,
            clustered,
            truth,
            out,
        } => {
            let cfg = load_run_config(&run, cli.seed)?;
            let (rows, labels): (Vec<_>, Vec<_>) = data::read_clustered_checkins(&clustered)?
                .into_iter()
                .unzip();
            let homes = match truth {
                Some(t) => features::label_homes(&rows, &labels, &data::read_truth(&t)?)?,
                None => Default::default(),
            };
            let ds = features::extract_dataset(&rows, &labels, &homes, &cfg.pagerank)?;
            info!("{} records for {} users", ds.len(), ds.n_users());
            data::write_records(&ds, &out, Some(&cfg.provenance()))?;
        }
        Command::TrainForest { run, records, out } => {
            let cfg = load_run_config(&run, cli.seed)?;
            let ds = data::read_records(&records)?;
            let seed = homecast_core::rng::derive_seed(cfg.seed, homecast_core::rng::tags::FOREST);
            let model = ForestModel::fit(&ds, &cfg.forest, seed)?;
            data::write_json_with_provenance(&out, &cfg.provenance(), "forest", &model)?;
        }
        Command::Filter {
            run,
            records,
            forest,
            threshold,
            out,
            stats,
        } => {
            let cfg = load_run_config(&run, cli.seed)?;
            let threshold = threshold.unwrap_or(cfg.forest.threshold);
            let model = load_forest(&forest)?;
            let ds = data::read_records(&records)?;
            let (kept, st) = forest::phase1_filter(&model, &ds, threshold);
            info!(
                "kept {} of {} records, home recall {}",
                st.n_selected, st.n_records, st.recall
            );
            data::write_records(&kept, &out, Some(&cfg.provenance()))?;
            if let Some(p) = stats {
                data::write_json_with_provenance(&p, &cfg.provenance(), "filter", &st)?;
            }
        }
        Command::Fit { run, records, out } => {
            let cfg = load_run_config(&run, cli.seed)?;
            let ds = data::read_records(&records)?;
            let (artifact, report) = pipeline::fit(&ds, &cfg, None)?;
            info!(
                "phase 1 kept {} of {} training records; forest {:.2}s, dnn-r {:.2}s, dnn-c {:.2}s",
                report.phase1.n_selected,
                report.phase1.n_records,
                report.timings.forest_s,
                report.timings.dnnr_s,
                report.timings.dnnc_s
            );
            artifact.save(&out)?;
        }
        Command::Predict {
            model,
            records,
            gate,
            out,
        } => {
            let mut artifact = PipelineArtifact::load(&model)?;
            if let Some(g) = gate {
                if !(0.0..=1.0).contains(&g) {
                    return Err(Error::Config(format!("gate {g} outside [0, 1]")));
                }
                artifact.gate_threshold = g;
            }
            let ds = data::read_records(&records)?;
            let preds = artifact.predict_all(&ds)?;
            let prov = Provenance::new(artifact.config_hash.clone());
            data::write_predictions(&preds, &out, Some(&prov))?;
        }
        Command::Sweep {
            model,
            records,
            grid,
            out,
        } => {
            let artifact = PipelineArtifact::load(&model)?;
            let thresholds = pipeline::parse_grid(&grid)?;
            let ds = data::read_records(&records)?;
            let curve = artifact.sweep_gate(&ds, &thresholds)?;
            write_gate_curve(&out, &Provenance::new(artifact.config_hash.clone()), &curve)?;
        }
        Command::Evaluate {
            run,
            records,
            out,
            curve,
            grid,
        } => {
            let cfg = load_run_config(&run, cli.seed)?;
            let thresholds = pipeline::parse_grid(&grid)?;
            let ds = data::read_records(&records)?;
            let report = evaluation::cross_validate_with(&ds, &cfg, &thresholds)?;
            info!(
                "mean accuracy {:.4} (midnight baseline {:.4}), phase-1 recall {:.4}",
                report.mean_accuracy, report.mean_baseline_accuracy, report.mean_phase1_recall
            );
            data::write_json_with_provenance(&out, &cfg.provenance(), "report", &report)?;
            if let Some(c) = curve {
                write_gate_curve(&c, &cfg.provenance(), &report.gate_curve)?;
            }
        }
        Command::Ablate { run, records, out } => {
            let cfg = load_run_config(&run, cli.seed)?;
            let ds = data::read_records(&records)?;
            let rows: Vec<Vec<String>> = evaluation::ablate(&ds, &cfg)?
                .iter()
                .map(|r| {
                    vec![
                        r.variant.name().to_string(),
                        f(r.accuracy),
                        f(r.reported_fraction),
                        f(r.subset_accuracy),
                        f(r.train_s),
                    ]
                })
                .collect();
            data::write_table(
                &out,
                Some(&cfg.provenance()),
                &[
                    "variant",
                    "accuracy",
                    "reported_fraction",
                    "subset_accuracy",
                    "train_s",
                ],
                &rows,
            )?;
        }
        Command::SweepDropout {
            run,
            records,
            rates,
            out,
        } => {
            let cfg = load_run_config(&run, cli.seed)?;
            let ds = data::read_records(&records)?;
            let points = evaluation::sweep_dropout(&ds, &cfg, &rates)?;
            write_sweep(&out, &cfg.provenance(), "dropout", &points)?;
        }
        Command::SweepEpochs {
            run,
            records,
            epochs,
            out,
        } => {
            let cfg = load_run_config(&run, cli.seed)?;
            let ds = data::read_records(&records)?;
            let points = evaluation::sweep_epochs(&ds, &cfg, &epochs)?;
            write_sweep(&out, &cfg.provenance(), "epochs", &points)?;
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Numerical(_) => 3,
        Error::Parse { .. }
        | Error::Validation(_)
        | Error::Io { .. }
        | Error::Csv(_)
        | Error::Json(_) => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    env_logger::Builder::from_env(
        env_logger::Env::default().default_filter_or(if cli.verbose { "debug" } else { "info" }),
    )
    .init();
    if let Some(j) = cli.jobs {
        if j == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
