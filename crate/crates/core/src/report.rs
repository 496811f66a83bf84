//! Batch runs: configuration, validation, the corrected snapshot every design
//! is evaluated on, and the tables and figure series written to disk.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correction::{run_pipeline, CorrectionError, NationalAccountsTable, PipelineConfig, PipelineReport};
use crate::dataset::{load_population, ColumnMap, DatasetError, MultiImplicateDataset, Population, WealthBase};
use crate::goals::{self, DecileShares, GoalError, GoalReport, RadarScores, RADAR_CRITERIA};
use crate::stats::{gini, lorenz_curve, top_share, weighted_quantiles, StatsError, WeightedSeries};
use crate::syngen::{RichList, Scenario, SynthError};
use crate::tax::{presets, BandSchedule, TaxDesign, ThresholdMode};

/// Population shares of the Lorenz grid.
pub const LORENZ_POINTS: usize = 1001;

/// Percentiles reported per wealth base.
pub const PERCENTILES: [(&str, f64); 5] = [("p50", 0.50), ("p75", 0.75), ("p90", 0.90), ("p95", 0.95), ("p99", 0.99)];

const TOP_FRACTIONS: [(&str, f64); 3] = [("top10", 0.10), ("top5", 0.05), ("top1", 0.01)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputSource {
    Csv(CsvInput),
    Synthetic(Scenario),
}

/// Survey extract plus its reconciliation inputs. Relative paths are taken
/// relative to the configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvInput {
    pub dataset: PathBuf,
    #[serde(default)]
    pub column_map: Option<ColumnMap>,
    #[serde(default)]
    pub national_accounts: Option<PathBuf>,
    #[serde(default)]
    pub rich_list: Option<PathBuf>,
}

fn default_designs() -> Vec<TaxDesign> {
    presets()
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub input: InputSource,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default = "default_designs")]
    pub designs: Vec<TaxDesign>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Overrides both the pipeline seed and a synthetic spec's seed.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub threshold_mode: ThresholdMode,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn new(input: InputSource) -> Self {
        RunConfig {
            input,
            pipeline: PipelineConfig::default(),
            designs: presets(),
            output_dir: default_output_dir(),
            seed: None,
            threshold_mode: ThresholdMode::default(),
            base_dir: PathBuf::new(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ReportError> {
        serde_json::from_str(text).map_err(|e| ReportError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ReportError> {
        let text = fs::read_to_string(path).map_err(|e| ReportError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_path(&self) -> PathBuf {
        self.resolve(&self.output_dir)
    }

    pub fn effective_pipeline(&self) -> PipelineConfig {
        let mut p = self.pipeline.clone();
        if let Some(s) = self.seed {
            p.seed = s;
        }
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub level: Level,
    pub path: String,
    pub message: String,
}

impl Diagnostic {
    fn error(path: impl Into<String>, message: impl Into<String>) -> Self {
        Diagnostic { level: Level::Error, path: path.into(), message: message.into() }
    }

    fn warning(path: impl Into<String>, message: impl Into<String>) -> Self {
        Diagnostic { level: Level::Warning, path: path.into(), message: message.into() }
    }
}

pub fn has_errors(diags: &[Diagnostic]) -> bool {
    diags.iter().any(|d| d.level == Level::Error)
}

/// Diagnostics for one design, with paths under `prefix`.
pub fn design_diagnostics(design: &TaxDesign, prefix: &str) -> Vec<Diagnostic> {
    design
        .violations()
        .into_iter()
        .map(|v| Diagnostic::error(format!("{prefix}{}", v.field), v.message))
        .collect()
}

pub fn validate(config: &RunConfig) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    if config.designs.is_empty() {
        out.push(Diagnostic::error("designs", "at least one design is required"));
    }
    let mut seen = BTreeMap::new();
    for (i, d) in config.designs.iter().enumerate() {
        out.extend(design_diagnostics(d, &format!("designs[{i}].")));
        if let Some(j) = seen.insert(d.display_label(), i) {
            out.push(Diagnostic::warning(format!("designs[{i}].label"), format!("duplicates designs[{j}]")));
        }
    }

    let p = &config.pipeline;
    if !(0.0..=1.0).contains(&p.theta) {
        out.push(Diagnostic::error("pipeline.theta", "must lie in [0, 1]"));
    }
    if !(p.w_min > 0.0) {
        out.push(Diagnostic::error("pipeline.w_min", "must be positive"));
    }
    if p.steps.portfolio {
        if let Err(e) = p.top_portfolio.validate() {
            out.push(Diagnostic::error("pipeline.top_portfolio", e.to_string()));
        }
    }
    for (i, r) in p.remaps.iter().enumerate() {
        if !(0.0..=1.0).contains(&r.fraction) {
            out.push(Diagnostic::error(format!("pipeline.remaps[{i}].fraction"), "must lie in [0, 1]"));
        }
    }

    let needs_na = p.steps.adjust_weights || p.steps.rescale;
    match &config.input {
        InputSource::Csv(c) => {
            let missing = |path: &Path, at: &str| {
                (!config.resolve(path).is_file())
                    .then(|| Diagnostic::error(at, format!("file not found: {}", path.display())))
            };
            out.extend(missing(&c.dataset, "input.csv.dataset"));
            match &c.national_accounts {
                Some(na) => out.extend(missing(na, "input.csv.national_accounts")),
                None if needs_na => out.push(Diagnostic::error(
                    "input.csv.national_accounts",
                    "required when weight adjustment or rescaling is enabled",
                )),
                None => {}
            }
            match &c.rich_list {
                Some(rl) => out.extend(missing(rl, "input.csv.rich_list")),
                None if p.steps.tail => {
                    out.push(Diagnostic::warning("input.csv.rich_list", "tail is fitted on survey households only"))
                }
                None => {}
            }
        }
        InputSource::Synthetic(s) => {
            if let Err(e) = s.spec.validate() {
                out.push(Diagnostic::error("input.synthetic.spec", e.to_string()));
            }
            if !(s.richlist_floor > s.spec.tail.w_min) {
                out.push(Diagnostic::error("input.synthetic.richlist_floor", "must exceed the tail threshold"));
            }
            if !(s.household_scale > 0.0) {
                out.push(Diagnostic::error("input.synthetic.household_scale", "must be positive"));
            }
        }
    }
    if config.output_dir.as_os_str().is_empty() {
        out.push(Diagnostic::error("output_dir", "must not be empty"));
    }
    out
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("configuration is invalid ({} error(s))", .0.iter().filter(|d| d.level == Level::Error).count())]
    Invalid(Vec<Diagnostic>),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Correction(#[from] CorrectionError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Goal(#[from] GoalError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

impl ReportError {
    /// 2 for configuration problems, 3 for everything that went wrong with data.
    pub fn exit_code(&self) -> i32 {
        match self {
            ReportError::Config(_) | ReportError::Invalid(_) => 2,
            _ => 3,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ReportError + '_ {
    move |source| ReportError::Io { path: path.to_path_buf(), source }
}

/// Six distribution statistics of one wealth base.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaseSummary {
    pub p50: f64,
    pub p75: f64,
    pub p90: f64,
    pub p95: f64,
    pub p99: f64,
    pub gini: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopShares {
    pub top10: f64,
    pub top5: f64,
    pub top1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub records: usize,
    pub households: f64,
    pub bases: BTreeMap<String, BaseSummary>,
    /// Net wealth, corrected data.
    pub top_shares: TopShares,
    /// Net wealth, before correction.
    pub top_shares_uncorrected: TopShares,
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn series(pop: &Population, base: WealthBase) -> Result<WeightedSeries, StatsError> {
    WeightedSeries::new(pop.base_values(base), pop.weights())
}

pub fn base_summary(ds: &MultiImplicateDataset, base: WealthBase) -> Result<BaseSummary, StatsError> {
    let ps: Vec<f64> = PERCENTILES.iter().map(|(_, p)| *p).collect();
    let mut q = [0.0; 5];
    let mut g = 0.0;
    let n = ds.implicates().len() as f64;
    for pop in ds.implicates() {
        let s = series(pop, base)?;
        for (acc, v) in q.iter_mut().zip(weighted_quantiles(&s, &ps)?) {
            *acc += v;
        }
        g += gini(&s)?;
    }
    Ok(BaseSummary { p50: q[0] / n, p75: q[1] / n, p90: q[2] / n, p95: q[3] / n, p99: q[4] / n, gini: g / n })
}

pub fn top_shares(ds: &MultiImplicateDataset) -> Result<TopShares, StatsError> {
    let mut out = [0.0; 3];
    for (slot, (_, f)) in out.iter_mut().zip(TOP_FRACTIONS) {
        let per = ds.implicates().iter().map(|p| top_share(&series(p, WealthBase::Net)?, f)).collect::<Result<Vec<_>, _>>()?;
        *slot = mean(per);
    }
    Ok(TopShares { top10: out[0], top5: out[1], top1: out[2] })
}

/// Everything a design is evaluated against: the survey before and after
/// correction. Built once, never mutated.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub uncorrected: MultiImplicateDataset,
    pub corrected: MultiImplicateDataset,
    /// Investment-property shares by wealth group, one per implicate, from
    /// the uncorrected data.
    pub decile_shares: Vec<DecileShares>,
    pub pipeline: PipelineReport,
    pub threshold_mode: ThresholdMode,
}

impl Snapshot {
    pub fn build(
        uncorrected: MultiImplicateDataset,
        na: &NationalAccountsTable,
        rich_list: &RichList,
        pipeline: &PipelineConfig,
        threshold_mode: ThresholdMode,
    ) -> Result<Self, ReportError> {
        let (corrected, report) = run_pipeline(&uncorrected, na, rich_list, pipeline)?;
        let decile_shares =
            uncorrected.implicates().iter().map(DecileShares::from_population).collect::<Result<Vec<_>, _>>()?;
        Ok(Snapshot { uncorrected, corrected, decile_shares, pipeline: report, threshold_mode })
    }

    /// Loads or generates the input and runs the correction pipeline.
    pub fn prepare(config: &RunConfig) -> Result<Self, ReportError> {
        let diags = validate(config);
        if has_errors(&diags) {
            return Err(ReportError::Invalid(diags));
        }
        let pipeline = config.effective_pipeline();
        match &config.input {
            InputSource::Synthetic(s) => {
                let mut s = s.clone();
                if let Some(seed) = config.seed {
                    s.spec.seed = seed;
                }
                let data = s.build()?;
                Self::build(data.observed, &data.national_accounts, &data.rich_list, &pipeline, config.threshold_mode)
            }
            InputSource::Csv(c) => {
                let schema = c.column_map.clone().unwrap_or_else(ColumnMap::identity);
                let ds = load_population(&config.resolve(&c.dataset), &schema)?;
                let na = match &c.national_accounts {
                    Some(p) => NationalAccountsTable::load(&config.resolve(p))?,
                    None => NationalAccountsTable::from_population(&ds.implicates()[0]),
                };
                let rl = match &c.rich_list {
                    Some(p) => RichList::load(&config.resolve(p))?,
                    None => RichList::default(),
                };
                Self::build(ds, &na, &rl, &pipeline, config.threshold_mode)
            }
        }
    }

    pub fn evaluate(&self, design: &TaxDesign) -> Result<(GoalReport, Vec<BandSchedule>), GoalError> {
        self.evaluate_with(design, self.threshold_mode)
    }

    pub fn evaluate_with(
        &self,
        design: &TaxDesign,
        mode: ThresholdMode,
    ) -> Result<(GoalReport, Vec<BandSchedule>), GoalError> {
        goals::evaluate(&self.corrected, design, mode, &self.decile_shares)
    }

    pub fn summary(&self) -> Result<DatasetSummary, StatsError> {
        let mut bases = BTreeMap::new();
        for b in WealthBase::ALL {
            bases.insert(b.as_str().to_string(), base_summary(&self.corrected, b)?);
        }
        Ok(DatasetSummary {
            records: self.corrected.implicates()[0].len(),
            households: mean(self.corrected.implicates().iter().map(Population::total_weight)),
            bases,
            top_shares: top_shares(&self.corrected)?,
            top_shares_uncorrected: top_shares(&self.uncorrected)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignResult {
    pub label: String,
    pub design: TaxDesign,
    /// Resolved (P90, P95, P99) thresholds per implicate.
    pub thresholds: Vec<[f64; 3]>,
    pub report: GoalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub threshold_mode: ThresholdMode,
    pub dataset: DatasetSummary,
    pub designs: Vec<DesignResult>,
    pub radar: RadarScores,
    pub pipeline: PipelineReport,
}

pub fn evaluate_designs(snapshot: &Snapshot, designs: &[TaxDesign]) -> Result<Vec<DesignResult>, GoalError> {
    designs
        .par_iter()
        .map(|d| {
            let (report, schedules) = snapshot.evaluate(d)?;
            Ok(DesignResult {
                label: d.display_label(),
                design: d.clone(),
                thresholds: schedules.iter().map(|s| s.thresholds).collect(),
                report,
            })
        })
        .collect()
}

pub fn summarize(snapshot: &Snapshot, designs: &[TaxDesign]) -> Result<Summary, ReportError> {
    let results = evaluate_designs(snapshot, designs)?;
    let pairs: Vec<(String, GoalReport)> = results.iter().map(|r| (r.label.clone(), r.report.clone())).collect();
    Ok(Summary {
        threshold_mode: snapshot.threshold_mode,
        dataset: snapshot.summary()?,
        radar: goals::radar(&pairs)?,
        designs: results,
        pipeline: snapshot.pipeline.clone(),
    })
}

/// Figure series: file stem and the value plotted for each design.
pub const FIGURES: [(&str, &str); 8] = [
    ("fig2_revenue", "revenue"),
    ("fig3_top10_share", "delta_top10_pp"),
    ("fig4_top1_share", "delta_top1_pp"),
    ("fig5_kakwani", "kakwani"),
    ("fig6_count_abs", "delta_count_abs"),
    ("fig7_count_p99", "delta_count_p99"),
    ("fig8_fip", "fip_change_pct"),
    ("fig9_co2", "co2_change"),
];

fn figure_value(r: &GoalReport, name: &str) -> Option<f64> {
    Some(match name {
        "revenue" => r.revenue,
        "delta_top10_pp" => r.delta_top10_pp,
        "delta_top1_pp" => r.delta_top1_pp,
        "kakwani" => return r.kakwani,
        "delta_count_abs" => r.delta_count_abs(),
        "delta_count_p99" => r.delta_count_p99(),
        "fip_change_pct" => r.fip_change_pct,
        "co2_change" => r.co2_change,
        _ => unreachable!("unknown figure series {name}"),
    })
}

pub fn money(v: f64) -> String {
    format!("{v:.2}")
}

fn write_csv(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| ReportError::Io { path: path.to_path_buf(), source: e.into() })?;
    let csv_err = |e: csv::Error| ReportError::Io { path: path.to_path_buf(), source: e.into() };
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

fn lorenz_rows(ds: &MultiImplicateDataset) -> Result<Vec<Vec<String>>, StatsError> {
    let mut curves = Vec::new();
    for b in WealthBase::ALL {
        let per = ds.implicates().iter().map(|p| lorenz_curve(&series(p, b)?)).collect::<Result<Vec<_>, _>>()?;
        curves.push(per);
    }
    Ok((0..LORENZ_POINTS)
        .map(|i| {
            let p = i as f64 / (LORENZ_POINTS - 1) as f64;
            let mut row = vec![p.to_string()];
            row.extend(curves.iter().map(|per| mean(per.iter().map(|c| c.at(p))).to_string()));
            row
        })
        .collect())
}

/// Writes every output file of a run into `dir` and returns their paths.
pub fn write_outputs(dir: &Path, snapshot: &Snapshot, summary: &Summary) -> Result<Vec<PathBuf>, ReportError> {
    let figures = dir.join("figures");
    fs::create_dir_all(&figures).map_err(io_err(&figures))?;
    let mut written = Vec::new();

    let path = dir.join("summary.json");
    let json = serde_json::to_string_pretty(summary).map_err(|e| ReportError::Io { path: path.clone(), source: e.into() })?;
    fs::write(&path, json + "\n").map_err(io_err(&path))?;
    written.push(path);

    let path = dir.join("percentiles.csv");
    let rows = summary
        .dataset
        .bases
        .iter()
        .map(|(b, s)| vec![b.clone(), money(s.p50), money(s.p75), money(s.p90), money(s.p95), money(s.p99), s.gini.to_string()])
        .collect();
    write_csv(&path, &["base", "p50", "p75", "p90", "p95", "p99", "gini"], rows)?;
    written.push(path);

    let path = dir.join("topshares.csv");
    let (u, c) = (&summary.dataset.top_shares_uncorrected, &summary.dataset.top_shares);
    let rows = [("top10", u.top10, c.top10), ("top5", u.top5, c.top5), ("top1", u.top1, c.top1)]
        .into_iter()
        .map(|(n, a, b)| vec![n.to_string(), a.to_string(), b.to_string()])
        .collect();
    write_csv(&path, &["group", "uncorrected", "corrected"], rows)?;
    written.push(path);

    let path = dir.join("lorenz.csv");
    write_csv(&path, &["population_share", "net", "fip", "property"], lorenz_rows(&snapshot.corrected)?)?;
    written.push(path);

    for (stem, series) in FIGURES {
        let path = figures.join(format!("{stem}.csv"));
        let rows = summary
            .designs
            .iter()
            .map(|d| {
                vec![
                    d.label.clone(),
                    d.design.base.as_str().to_string(),
                    u8::from(d.design.exemption_percentile).to_string(),
                    figure_value(&d.report, series).map(|v| v.to_string()).unwrap_or_default(),
                ]
            })
            .collect();
        write_csv(&path, &["design", "base", "exemption_percentile", series], rows)?;
        written.push(path);
    }

    let path = dir.join("radar.csv");
    let mut header: Vec<String> = ["design", "revenue", "goal1", "goal2", "goal3", "goal4"].map(String::from).into();
    header.extend(RADAR_CRITERIA.iter().map(|c| format!("score_{c}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = summary
        .radar
        .rows
        .iter()
        .map(|r| {
            let mut row = vec![r.label.clone()];
            row.extend([r.revenue, r.goal1, r.goal2, r.goal3, r.goal4].iter().map(f64::to_string));
            row.extend(RADAR_CRITERIA.iter().map(|c| r.criteria[*c].to_string()));
            row
        })
        .collect();
    write_csv(&path, &header, rows)?;
    written.push(path);

    Ok(written)
}

/// Validates, builds the snapshot, evaluates every design and writes the outputs.
pub fn run(config: &RunConfig) -> Result<(Summary, Vec<PathBuf>), ReportError> {
    let snapshot = Snapshot::prepare(config)?;
    let summary = summarize(&snapshot, &config.designs)?;
    let written = write_outputs(&config.output_path(), &snapshot, &summary)?;
    Ok((summary, written))
}
