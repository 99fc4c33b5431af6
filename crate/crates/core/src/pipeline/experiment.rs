use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    annotator_agreement, apply_fusion, contribution_report, evaluate_indicator, fit_suite_whitener,
    fuse_average, fuse_learned, indicator_correlation_matrix, overlap_groups, train_selected,
    ContributionReport, CorrelationMatrix, EvaluationRow, GroupAgreement,
};
use crate::datamodel::{Dataset, Split};
use crate::error::{Error, Result};
use crate::indicators::{compute_indicator_suite, train_aux_models, IndicatorScores, Provenance, SuiteConfig, SuiteResult};
use crate::solvers::{encode_model, predict, LinearModel, Objective, TrainParams};

fn default_grid() -> Vec<f64> {
    vec![1e-4, 1e-3, 1e-2, 1e-1, 1.0]
}

fn default_objective() -> Objective {
    Objective::Ranking
}

fn default_epochs() -> usize {
    TrainParams::default().epochs
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    #[serde(default = "default_objective")]
    pub objective: Objective,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            objective: default_objective(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DipConfig {
    pub feature: String,
    #[serde(default = "default_objective")]
    pub objective: Objective,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_grid")]
    pub lambda_grid: Vec<f64>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    pub suite: SuiteConfig,
    #[serde(default)]
    pub fusion: FusionConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dip: Option<DipConfig>,
    /// Redundancy groups; derived from shared images when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agreement_groups: Option<Vec<Vec<String>>>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::invalid(format!("experiment config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Everything a run produced. Stages that failed leave their fields empty
/// and add a line to `errors`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub indicators: Vec<EvaluationRow>,
    pub correlation: Option<CorrelationMatrix>,
    pub fusion: Vec<EvaluationRow>,
    pub agreement: Vec<GroupAgreement>,
    pub contributions: Vec<ContributionReport>,
    pub lambdas: BTreeMap<String, f64>,
    pub warnings: Vec<String>,
    pub errors: Vec<String>,
    pub files: Vec<PathBuf>,
}

fn fmt_f(v: f64) -> String {
    format!("{v}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f).unwrap_or_else(|| "NA".into())
}

/// Evaluation rows as TSV, with `NA` for undefined values.
pub fn rows_tsv(rows: &[EvaluationRow], provenance: &BTreeMap<String, Provenance>) -> String {
    let mut s = String::from("name\tprovenance\tsrc\tp_value\tap\tn\n");
    for r in rows {
        let prov = match provenance.get(&r.name) {
            Some(Provenance::Oracle) => "oracle",
            Some(Provenance::External) => "external",
            _ => "predicted",
        };
        let src = if r.degenerate { "NA".into() } else { fmt_f(r.src) };
        writeln!(s, "{}\t{prov}\t{src}\t{}\t{}\t{}", r.name, fmt_f(r.p_value), fmt_opt(r.ap), r.n).unwrap();
    }
    s
}

pub fn correlation_tsv(m: &CorrelationMatrix) -> String {
    let mut s = String::from("indicator");
    for n in &m.names {
        write!(s, "\t{n}").unwrap();
    }
    s.push('\n');
    for (n, row) in m.names.iter().zip(&m.entries) {
        s.push_str(n);
        for v in row {
            write!(s, "\t{}", fmt_opt(*v)).unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn agreement_tsv(groups: &[GroupAgreement]) -> String {
    let mut s = String::from("group\tannotator_a\tannotator_b\tn\tsrc\tp_value\n");
    for (g, ga) in groups.iter().enumerate() {
        for p in &ga.pairs {
            writeln!(
                s,
                "{g}\t{}\t{}\t{}\t{}\t{}",
                p.annotator_a,
                p.annotator_b,
                p.n,
                fmt_opt(p.src),
                fmt_opt(p.p_value)
            )
            .unwrap();
        }
        writeln!(s, "{g}\tmean\t\t\t{}\t", fmt_opt(ga.mean_src)).unwrap();
    }
    s
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

struct Bundle<'a> {
    dir: &'a Path,
    files: Vec<PathBuf>,
}

impl Bundle<'_> {
    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.files.push(PathBuf::from(name));
        Ok(())
    }
}

fn scores_on(model: &LinearModel, dataset: &Dataset, feature: &str, split: Split) -> Result<IndicatorScores> {
    let keep = dataset.ids_in(split).into_iter().collect();
    let f = dataset.restrict(&keep);
    let mut out = IndicatorScores::new("dip", Provenance::Predicted);
    out.scores = predict(model, f.feature(feature)?)?;
    Ok(out)
}

/// Mean rating of every rated test image.
pub fn test_truth(dataset: &Dataset) -> BTreeMap<String, f64> {
    let all = dataset.mean_ratings();
    dataset
        .ids_in(Split::Test)
        .into_iter()
        .filter_map(|id| all.get(&id).map(|v| (id, *v)))
        .collect()
}

/// Trains the auxiliary models on the train split (seeded with
/// `config.seed`) and scores the train and test images.
pub fn split_suites(dataset: &Dataset, config: &ExperimentConfig) -> Result<(SuiteResult, SuiteResult)> {
    let mut suite_config = config.suite.clone();
    suite_config.aux_epochs = config.epochs;
    let aux = train_aux_models(dataset, &suite_config, config.seed)?;
    let train = compute_indicator_suite(dataset, &dataset.ids_in(Split::Train), &aux, &suite_config)?;
    let test = compute_indicator_suite(dataset, &dataset.ids_in(Split::Test), &aux, &suite_config)?;
    Ok((train, test))
}

/// Runs the full evaluation on `dataset` and writes the report bundle to
/// `out_dir`. Identical inputs give byte-identical bundles.
pub fn run_experiment(dataset: &Dataset, config: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentReport> {
    let mut report = ExperimentReport::default();
    let mut bundle = Bundle {
        dir: out_dir,
        files: Vec::new(),
    };
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let seeds = BTreeMap::from([
        ("auxiliary", config.seed),
        ("fusion", config.seed.wrapping_add(1)),
        ("dip", config.seed.wrapping_add(2)),
    ]);
    let base = TrainParams {
        epochs: config.epochs,
        ..TrainParams::default()
    };
    let mut hashes = BTreeMap::new();
    let err = |report: &mut ExperimentReport, stage: &str, e: Error| {
        warn!("{stage}: {e}");
        report.errors.push(format!("{stage}: {e}"));
    };

    let test_truth = test_truth(dataset);

    info!("computing indicator suite");
    let suites = split_suites(dataset, config);
    let (train_suite, test_suite) = match suites {
        Ok((train, test)) => {
            for (name, gaps) in &test.missing {
                report
                    .warnings
                    .push(format!("indicator {name}: {} test images could not be scored", gaps.len()));
            }
            (train.scores, test.scores)
        }
        Err(e) => {
            err(&mut report, "indicators", e);
            (Vec::new(), Vec::new())
        }
    };
    let mut provenance: BTreeMap<String, Provenance> =
        test_suite.iter().map(|s| (s.indicator_name.clone(), s.provenance)).collect();

    for s in &test_suite {
        match evaluate_indicator(s, &test_truth) {
            Ok(row) => report.indicators.push(row),
            Err(e) => err(&mut report, &format!("evaluate {}", s.indicator_name), e),
        }
    }
    if !test_suite.is_empty() {
        match indicator_correlation_matrix(&test_suite) {
            Ok(m) => report.correlation = Some(m),
            Err(e) => err(&mut report, "correlation", e),
        }
    }

    info!("fusing indicators");
    let mut fused: Vec<IndicatorScores> = Vec::new();
    let mut learned_model = None;
    if !train_suite.is_empty() {
        match fit_suite_whitener(&train_suite).and_then(|w| fuse_average(&test_suite, &w)) {
            Ok(s) => fused.push(s),
            Err(e) => err(&mut report, "average fusion", e),
        }
        match fuse_learned(
            dataset,
            &train_suite,
            config.fusion.objective,
            &config.lambda_grid,
            seeds["fusion"],
            &base,
        )
        .and_then(|m| apply_fusion(&m.model, &test_suite, "learned").map(|s| (m, s)))
        {
            Ok((m, s)) => {
                report.lambdas.insert("learned".into(), m.selection.lambda);
                report.warnings.extend(m.warnings.iter().cloned());
                let bytes = encode_model(&m.model);
                hashes.insert("learned".to_string(), sha256_hex(&bytes));
                bundle.write("models/learned.model", &bytes)?;
                fused.push(s);
                learned_model = Some(m.model);
            }
            Err(e) => err(&mut report, "learned fusion", e),
        }
    }

    if let Some(dip) = &config.dip {
        info!("training direct predictor on {}", dip.feature);
        let trained = dataset.feature(&dip.feature).and_then(|f| {
            train_selected(dataset, f, dip.objective, &config.lambda_grid, seeds["dip"], &base)
        });
        match trained {
            Ok(m) => {
                report.lambdas.insert("dip".into(), m.selection.lambda);
                report.warnings.extend(m.warnings.iter().cloned());
                let bytes = encode_model(&m.model);
                hashes.insert("dip".to_string(), sha256_hex(&bytes));
                bundle.write("models/dip.model", &bytes)?;
                let dip_test = scores_on(&m.model, dataset, &dip.feature, Split::Test);
                let dip_train = scores_on(&m.model, dataset, &dip.feature, Split::Train);
                match (dip_train, dip_test) {
                    (Ok(tr), Ok(te)) => {
                        fused.push(te.clone());
                        let mut train_plus = train_suite.clone();
                        train_plus.push(tr);
                        let mut test_plus = test_suite.clone();
                        test_plus.push(te);
                        let combined = fuse_learned(
                            dataset,
                            &train_plus,
                            config.fusion.objective,
                            &config.lambda_grid,
                            seeds["fusion"],
                            &base,
                        )
                        .and_then(|m| apply_fusion(&m.model, &test_plus, "learned+dip").map(|s| (m, s)));
                        match combined {
                            Ok((m, s)) => {
                                report.lambdas.insert("learned+dip".into(), m.selection.lambda);
                                let bytes = encode_model(&m.model);
                                hashes.insert("learned+dip".to_string(), sha256_hex(&bytes));
                                bundle.write("models/learned_dip.model", &bytes)?;
                                fused.push(s);
                            }
                            Err(e) => err(&mut report, "learned+dip fusion", e),
                        }
                    }
                    (Err(e), _) | (_, Err(e)) => err(&mut report, "dip scoring", e),
                }
            }
            Err(e) => err(&mut report, "dip", e),
        }
    }
    for s in &fused {
        provenance.insert(s.indicator_name.clone(), s.provenance);
        match evaluate_indicator(s, &test_truth) {
            Ok(row) => report.fusion.push(row),
            Err(e) => err(&mut report, &format!("evaluate {}", s.indicator_name), e),
        }
    }

    if let Some(model) = &learned_model {
        let mut classes: Vec<u32> = dataset
            .ids_in(Split::Test)
            .iter()
            .map(|id| dataset.records[id].class_id)
            .collect();
        classes.sort();
        classes.dedup();
        for c in classes {
            match contribution_report(model, &test_suite, dataset, c) {
                Ok(r) => report.contributions.push(r),
                Err(e) => err(&mut report, &format!("contributions class {c}"), e),
            }
        }
    }

    let groups = config
        .agreement_groups
        .clone()
        .unwrap_or_else(|| overlap_groups(&dataset.ratings));
    report.agreement = annotator_agreement(&dataset.ratings, &groups);

    bundle.write("indicators.tsv", rows_tsv(&report.indicators, &provenance).as_bytes())?;
    if let Some(m) = &report.correlation {
        bundle.write("correlation.tsv", correlation_tsv(m).as_bytes())?;
    }
    bundle.write("fusion.tsv", rows_tsv(&report.fusion, &provenance).as_bytes())?;
    bundle.write("agreement.tsv", agreement_tsv(&report.agreement).as_bytes())?;
    bundle.write(
        "contributions.json",
        serde_json::to_string_pretty(&report.contributions).expect("serializes").as_bytes(),
    )?;
    let summary = serde_json::json!({
        "lambdas": report.lambdas,
        "group_mean_src": report.agreement.iter().map(|g| g.mean_src).collect::<Vec<_>>(),
        "group_statistic": "arithmetic mean of pairwise SRC over pairs with defined SRC",
        "test_images_rated": test_truth.len(),
        "warnings": report.warnings,
        "errors": report.errors,
    });
    bundle.write("summary.json", serde_json::to_string_pretty(&summary).expect("serializes").as_bytes())?;
    let config_text = config.to_toml();
    let manifest = serde_json::json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "config": config,
        "config_sha256": sha256_hex(config_text.as_bytes()),
        "seed": config.seed,
        "derived_seeds": seeds,
        "model_sha256": hashes,
        "files": bundle.files,
    });
    bundle.write("manifest.json", serde_json::to_string_pretty(&manifest).expect("serializes").as_bytes())?;
    report.files = bundle.files;
    Ok(report)
}
