use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use iconika_core::datamodel::{load_dataset, save_dataset, Dataset, Split};
use iconika_core::indicators::{IndicatorScores, Provenance};
use iconika_core::pipeline::{
    agreement_tsv, annotator_agreement, apply_fusion, correlation_tsv, evaluate_indicator, fit_suite_whitener,
    fuse_average, fuse_learned, indicator_correlation_matrix, overlap_groups, rows_tsv, run_experiment, sha256_hex,
    split_suites, test_truth, train_selected, ExperimentConfig,
};
use iconika_core::solvers::{encode_model, predict, Objective, TrainParams};
use iconika_core::synthetic;
use iconika_service::{assign, export_dataset, export_dir, serve, Campaign, CampaignConfig, ServeOptions, ServiceError};
use log::{info, warn};
use serde_json::json;

#[derive(Parser)]
#[command(name = "iconika", version, about = "Rank images of a class by how iconic they are")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    Bin,
    Rank,
}

impl From<ObjectiveArg> for Objective {
    fn from(o: ObjectiveArg) -> Self {
        match o {
            ObjectiveArg::Bin => Objective::Binary,
            ObjectiveArg::Rank => Objective::Ranking,
        }
    }
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Dataset manifest (TOML).
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory; a reproducibility manifest is written here.
    #[arg(long)]
    out: PathBuf,
}

/// Experiment options. Flags override the config file.
#[derive(Args, Clone)]
struct ExperimentArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated regularisation grid.
    #[arg(long, value_delimiter = ',')]
    lambda_grid: Option<Vec<f64>>,
    #[arg(long, value_enum)]
    objective: Option<ObjectiveArg>,
    /// Comma-separated subset of the configured indicators.
    #[arg(long, value_delimiter = ',')]
    indicators: Option<Vec<String>>,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a dataset and print a summary.
    Ingest {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score every image with the configured indicators.
    Indicators {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        exp: ExperimentArgs,
    },
    /// Train a linear iconicity predictor on one feature.
    Train {
        #[command(flatten)]
        data: DataArgs,
        /// Feature to train on; defaults to the config's direct predictor feature.
        #[arg(long)]
        feature: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_delimiter = ',')]
        lambda_grid: Option<Vec<f64>>,
        #[arg(long, value_enum)]
        objective: Option<ObjectiveArg>,
    },
    /// Per-indicator SRC, p-value and AP on the test split.
    Evaluate {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        exp: ExperimentArgs,
    },
    /// Pairwise SRC between indicators on the test split.
    Correlate {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        exp: ExperimentArgs,
    },
    /// Average and learned combinations of the indicators.
    Fuse {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        exp: ExperimentArgs,
    },
    /// Inter-annotator agreement within redundancy groups.
    Agreement {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Everything above, written as one report bundle.
    Run {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        exp: ExperimentArgs,
    },
    /// Run the annotation service.
    Serve {
        /// Campaign state directory.
        #[arg(long)]
        campaign: PathBuf,
        /// Campaign config (TOML); needed only to create a new campaign.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset to assign batches from; needed only to create a new campaign.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Directory holding the image files.
        #[arg(long)]
        images: Option<PathBuf>,
        /// Directory with a static UI bundle.
        #[arg(long)]
        ui: Option<PathBuf>,
    },
    /// Export a campaign's ratings.
    Export {
        #[arg(long)]
        campaign: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Base dataset; when given, a complete dataset with the campaign's
        /// ratings and batches is written.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Write a synthetic dataset and a matching experiment config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Validation(String),
}

impl From<iconika_core::Error> for Failure {
    fn from(e: iconika_core::Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Usage(e.to_string())
        }
    }
}

impl From<ServiceError> for Failure {
    fn from(e: ServiceError) -> Self {
        Failure::Validation(e.to_string())
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::Validation(format!("{}: {e}", path.display()))
}

type CliResult<T = ()> = Result<T, Failure>;

/// Files written by a command, for its manifest.
struct Output {
    dir: PathBuf,
    files: Vec<String>,
}

impl Output {
    fn new(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(io(dir))?;
        Ok(Output {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> CliResult {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io(parent))?;
        }
        fs::write(&path, bytes).map_err(io(&path))?;
        self.files.push(name.to_string());
        Ok(())
    }

    /// Writes `run_manifest.json`: command, versions, seed, config and input hashes.
    fn finish(mut self, command: &str, config: Option<&ExperimentConfig>, seed: Option<u64>, inputs: &[&Path]) -> CliResult {
        let mut hashes = BTreeMap::new();
        for p in inputs {
            let bytes = fs::read(p).map_err(io(p))?;
            hashes.insert(p.display().to_string(), sha256_hex(&bytes));
        }
        let manifest = json!({
            "tool": "iconika",
            "version": env!("CARGO_PKG_VERSION"),
            "command": command,
            "args": std::env::args().skip(1).collect::<Vec<_>>(),
            "seed": seed,
            "config": config,
            "config_sha256": config.map(|c| sha256_hex(c.to_toml().as_bytes())),
            "input_sha256": hashes,
            "files": self.files,
        });
        let text = serde_json::to_string_pretty(&manifest).expect("serializes");
        self.write("run_manifest.json", text.as_bytes())
    }
}

fn load(manifest: &Path) -> CliResult<Dataset> {
    Ok(load_dataset(manifest)?)
}

fn resolve_config(exp: &ExperimentArgs) -> CliResult<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&exp.config)?;
    if let Some(s) = exp.seed {
        cfg.seed = s;
    }
    if let Some(g) = &exp.lambda_grid {
        cfg.lambda_grid = g.clone();
    }
    if let Some(o) = exp.objective {
        cfg.fusion.objective = o.into();
        if let Some(d) = &mut cfg.dip {
            d.objective = o.into();
        }
    }
    if let Some(names) = &exp.indicators {
        let known: Vec<&str> = cfg.suite.indicators.iter().map(|i| i.name.as_str()).collect();
        if let Some(bad) = names.iter().find(|n| !known.contains(&n.as_str())) {
            return Err(Failure::Usage(format!(
                "indicator {bad:?} is not in {}; configured: {}",
                exp.config.display(),
                known.join(", ")
            )));
        }
        cfg.suite.indicators.retain(|i| names.contains(&i.name));
    }
    if cfg.lambda_grid.is_empty() || cfg.lambda_grid.iter().any(|l| l.is_nan() || *l <= 0.0) {
        return Err(Failure::Usage("lambda grid must be non-empty and positive".into()));
    }
    Ok(cfg)
}

fn provenance_of(suites: &[&[IndicatorScores]]) -> BTreeMap<String, Provenance> {
    suites
        .iter()
        .flat_map(|s| s.iter())
        .map(|s| (s.indicator_name.clone(), s.provenance))
        .collect()
}

fn scores_tsv(dataset: &Dataset, suites: &[&[IndicatorScores]]) -> String {
    let names: Vec<&str> = suites[0].iter().map(|s| s.indicator_name.as_str()).collect();
    let mut s = String::from("image_id\tsplit");
    for n in &names {
        write!(s, "\t{n}").unwrap();
    }
    s.push('\n');
    for suite in suites {
        let mut ids: Vec<&String> = suite.iter().flat_map(|x| x.scores.keys()).collect();
        ids.sort();
        ids.dedup();
        for id in ids {
            let split = match dataset.splits.get(id) {
                Some(Split::Train) => "train",
                _ => "test",
            };
            write!(s, "{id}\t{split}").unwrap();
            for ind in suite.iter() {
                match ind.scores.get(id) {
                    Some(v) => write!(s, "\t{v}").unwrap(),
                    None => s.push_str("\tNA"),
                }
            }
            s.push('\n');
        }
    }
    s
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Ingest { manifest, out } => {
            let d = load(&manifest)?;
            let mut classes: Vec<u32> = d.records.values().map(|r| r.class_id).collect();
            classes.sort();
            classes.dedup();
            let summary = json!({
                "images": d.records.len(),
                "classes": classes.len(),
                "train_images": d.ids_in(Split::Train).len(),
                "test_images": d.ids_in(Split::Test).len(),
                "ratings": d.ratings.len(),
                "batches": d.batches.len(),
                "rated_images": d.mean_ratings().len(),
                "features": d.features.iter().map(|(n, m)| (n.clone(), m.dim)).collect::<BTreeMap<_, _>>(),
            });
            let text = serde_json::to_string_pretty(&summary).expect("serializes");
            println!("{text}");
            if let Some(out) = out {
                let mut o = Output::new(&out)?;
                o.write("dataset_summary.json", text.as_bytes())?;
                o.finish("ingest", None, None, &[&manifest])?;
            }
        }
        Command::Indicators { data, exp } => {
            let cfg = resolve_config(&exp)?;
            let d = load(&data.manifest)?;
            let (train, test) = split_suites(&d, &cfg)?;
            let mut o = Output::new(&data.out)?;
            o.write("scores.tsv", scores_tsv(&d, &[&train.scores, &test.scores]).as_bytes())?;
            let mut missing = String::from("indicator\timage_id\treason\n");
            for m in [&train.missing, &test.missing] {
                for (name, gaps) in m {
                    for (id, reason) in gaps {
                        writeln!(missing, "{name}\t{id}\t{reason}").unwrap();
                    }
                }
            }
            o.write("missing.tsv", missing.as_bytes())?;
            o.finish("indicators", Some(&cfg), Some(cfg.seed), &[&data.manifest, &exp.config])?;
        }
        Command::Train {
            data,
            feature,
            config,
            seed,
            lambda_grid,
            objective,
        } => {
            let cfg = config.as_deref().map(ExperimentConfig::load).transpose()?;
            let feature = feature
                .or_else(|| cfg.as_ref().and_then(|c| c.dip.as_ref()).map(|d| d.feature.clone()))
                .ok_or_else(|| Failure::Usage("--feature is required when the config names no direct predictor".into()))?;
            let objective: Objective = objective
                .map(Into::into)
                .or_else(|| cfg.as_ref().and_then(|c| c.dip.as_ref()).map(|d| d.objective))
                .unwrap_or(Objective::Ranking);
            let seed = seed.or(cfg.as_ref().map(|c| c.seed)).unwrap_or(0);
            let grid = lambda_grid
                .or_else(|| cfg.as_ref().map(|c| c.lambda_grid.clone()))
                .unwrap_or_else(|| vec![1e-4, 1e-3, 1e-2, 1e-1, 1.0]);
            let base = TrainParams {
                epochs: cfg.as_ref().map(|c| c.epochs).unwrap_or(TrainParams::default().epochs),
                ..TrainParams::default()
            };
            let d = load(&data.manifest)?;
            let f = d.feature(&feature)?;
            let m = train_selected(&d, f, objective, &grid, seed, &base)?;
            for w in &m.warnings {
                warn!("{w}");
            }
            let mut o = Output::new(&data.out)?;
            o.write(&format!("{feature}.model"), &encode_model(&m.model))?;
            let truth = test_truth(&d);
            let mut scores = IndicatorScores::new(format!("{feature}_{objective}"), Provenance::Predicted);
            scores.scores = predict(&m.model, f)?
                .into_iter()
                .filter(|(id, _)| truth.contains_key(id))
                .collect();
            let mut rows = Vec::new();
            if !truth.is_empty() {
                rows.push(evaluate_indicator(&scores, &truth)?);
            }
            let prov = BTreeMap::from([(scores.indicator_name.clone(), Provenance::Predicted)]);
            let tsv = rows_tsv(&rows, &prov);
            print!("{tsv}");
            println!("lambda\t{}", m.selection.lambda);
            o.write("evaluation.tsv", tsv.as_bytes())?;
            let mut inputs = vec![data.manifest.as_path()];
            inputs.extend(config.as_deref());
            o.finish("train", cfg.as_ref(), Some(seed), &inputs)?;
        }
        Command::Evaluate { data, exp } => {
            let cfg = resolve_config(&exp)?;
            let d = load(&data.manifest)?;
            let (_, test) = split_suites(&d, &cfg)?;
            let truth = test_truth(&d);
            let mut rows = Vec::new();
            for s in &test.scores {
                rows.push(evaluate_indicator(s, &truth)?);
            }
            let tsv = rows_tsv(&rows, &provenance_of(&[&test.scores]));
            print!("{tsv}");
            let mut o = Output::new(&data.out)?;
            o.write("indicators.tsv", tsv.as_bytes())?;
            o.finish("evaluate", Some(&cfg), Some(cfg.seed), &[&data.manifest, &exp.config])?;
        }
        Command::Correlate { data, exp } => {
            let cfg = resolve_config(&exp)?;
            let d = load(&data.manifest)?;
            let (_, test) = split_suites(&d, &cfg)?;
            let tsv = correlation_tsv(&indicator_correlation_matrix(&test.scores)?);
            print!("{tsv}");
            let mut o = Output::new(&data.out)?;
            o.write("correlation.tsv", tsv.as_bytes())?;
            o.finish("correlate", Some(&cfg), Some(cfg.seed), &[&data.manifest, &exp.config])?;
        }
        Command::Fuse { data, exp } => {
            let cfg = resolve_config(&exp)?;
            let d = load(&data.manifest)?;
            let (train, test) = split_suites(&d, &cfg)?;
            let truth = test_truth(&d);
            let base = TrainParams {
                epochs: cfg.epochs,
                ..TrainParams::default()
            };
            let average = fuse_average(&test.scores, &fit_suite_whitener(&train.scores)?)?;
            let learned = fuse_learned(
                &d,
                &train.scores,
                cfg.fusion.objective,
                &cfg.lambda_grid,
                cfg.seed.wrapping_add(1),
                &base,
            )?;
            let learned_scores = apply_fusion(&learned.model, &test.scores, "learned")?;
            let rows = vec![
                evaluate_indicator(&average, &truth)?,
                evaluate_indicator(&learned_scores, &truth)?,
            ];
            let prov = BTreeMap::from([
                ("average".to_string(), Provenance::Predicted),
                ("learned".to_string(), Provenance::Predicted),
            ]);
            let tsv = rows_tsv(&rows, &prov);
            print!("{tsv}");
            let mut o = Output::new(&data.out)?;
            o.write("fusion.tsv", tsv.as_bytes())?;
            o.write("models/learned.model", &encode_model(&learned.model))?;
            o.finish("fuse", Some(&cfg), Some(cfg.seed), &[&data.manifest, &exp.config])?;
        }
        Command::Agreement { data, config } => {
            let cfg = config.as_deref().map(ExperimentConfig::load).transpose()?;
            let d = load(&data.manifest)?;
            let groups = cfg
                .as_ref()
                .and_then(|c| c.agreement_groups.clone())
                .unwrap_or_else(|| overlap_groups(&d.ratings));
            let report = annotator_agreement(&d.ratings, &groups);
            let tsv = agreement_tsv(&report);
            print!("{tsv}");
            let mut o = Output::new(&data.out)?;
            o.write("agreement.tsv", tsv.as_bytes())?;
            let mut inputs = vec![data.manifest.as_path()];
            inputs.extend(config.as_deref());
            o.finish("agreement", cfg.as_ref(), None, &inputs)?;
        }
        Command::Run { data, exp } => {
            let cfg = resolve_config(&exp)?;
            let d = load(&data.manifest)?;
            let report = run_experiment(&d, &cfg, &data.out)?;
            for e in &report.errors {
                warn!("{e}");
            }
            print!("{}", fs::read_to_string(data.out.join("fusion.tsv")).unwrap_or_default());
            if !report.errors.is_empty() {
                return Err(Failure::Validation(format!("{} stages failed: {}", report.errors.len(), report.errors.join("; "))));
            }
        }
        Command::Serve {
            campaign,
            config,
            manifest,
            seed,
            host,
            port,
            images,
            ui,
        } => {
            let c = if campaign.join(iconika_service::store::CONFIG_FILE).exists() {
                if config.is_some() || manifest.is_some() {
                    warn!("{} already holds a campaign; --config and --manifest are ignored", campaign.display());
                }
                Campaign::open(&campaign)?
            } else {
                let (Some(config), Some(manifest)) = (config, manifest) else {
                    return Err(Failure::Usage(format!(
                        "{} holds no campaign; pass --config and --manifest to create one",
                        campaign.display()
                    )));
                };
                let text = fs::read_to_string(&config).map_err(io(&config))?;
                let mut cc = CampaignConfig::from_toml(&text)?;
                if let Some(s) = seed {
                    cc.seed = s;
                }
                let d = load(&manifest)?;
                let assignment = assign(&cc, &d)?;
                let c = Campaign::create(&campaign, cc, &assignment)?;
                info!("created campaign with {} batches", assignment.all_batches().count());
                c
            };
            for (a, _) in c.config().annotators() {
                println!("{a}\t{}", c.token(a).unwrap_or(""));
            }
            let rt = tokio::runtime::Runtime::new().map_err(|e| Failure::Validation(e.to_string()))?;
            let opts = ServeOptions {
                addr: SocketAddr::new(host, port),
                images,
                ui,
            };
            rt.block_on(serve(Arc::new(c), opts))
                .map_err(|e| Failure::Validation(format!("serve: {e}")))?;
        }
        Command::Export { campaign, out, manifest } => {
            let (text, summary) = export_dir(&campaign)?;
            let mut o = Output::new(&out)?;
            if let Some(m) = &manifest {
                let d = load(m)?;
                let written = export_dataset(&campaign, &d, &out.join("dataset"))?;
                load(&written)?;
                o.files.push("dataset".into());
            }
            o.write("ratings.jsonl", text.as_bytes())?;
            let summary = serde_json::to_string_pretty(&summary).expect("serializes");
            println!("{summary}");
            o.write("summary.json", summary.as_bytes())?;
            let mut inputs = Vec::new();
            inputs.extend(manifest.as_deref());
            o.finish("export", None, None, &inputs)?;
        }
        Command::Synth { out, seed } => {
            let (d, _) = synthetic::fixture_dataset(seed, &synthetic::FixtureParams::default());
            let manifest = save_dataset(&d, &out)?;
            let cfg = synthetic::fixture_config(true);
            let path = out.join("experiment.toml");
            fs::write(&path, cfg.to_toml()).map_err(io(&path))?;
            println!("{}", manifest.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ICONIKA_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(m)) => {
            eprintln!("usage error: {m}");
            ExitCode::from(2)
        }
    }
}
