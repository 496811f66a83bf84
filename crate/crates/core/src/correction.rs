//! Corrects survey microdata for the missing top tail and reconciles it with
//! national-accounts aggregates.
//!
//! The procedure runs per implicate in six steps:
//!
//! 1. rescale weights to the national household count of each country;
//! 2. remap survey categories onto their national-accounts counterparts;
//! 3. raise implausibly low deposits to an income-based floor;
//! 4. fit a Pareto tail on survey and rich-list households and fill the gap
//!    between them by sampling from it;
//! 5. allocate the net wealth of new top households across asset categories;
//! 6. rescale every category to its national-accounts aggregate, without
//!    pushing net-negative households further into debt.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Asset, AssetVector, DatasetError, HouseholdRecord, MultiImplicateDataset, Population};
use crate::syngen::RichList;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CorrectionError {
    #[error("country `{0}` has no national household count")]
    UnknownCountry(String),
    #[error("deposit floor fraction {0} outside [0, 1]")]
    InvalidTheta(f64),
    #[error("need at least two tail observations, got {0}")]
    TooFewObservations(usize),
    #[error("observation {value} lies below the tail threshold {w_min}")]
    ObservationBelowThreshold { value: f64, w_min: f64 },
    #[error("tail observations carry no spread above the threshold")]
    DegenerateFit,
    #[error("tail threshold must be positive, got {0}")]
    InvalidThreshold(f64),
    #[error("net wealth must be positive, got {0}")]
    NonPositiveNetWealth(f64),
    #[error("invalid top portfolio model: {0}")]
    InvalidPortfolio(String),
    #[error("survey aggregate of `{category}` is zero in {country} but the national total is not")]
    ZeroSurveyAggregate { country: String, category: String },
    #[error("{0}: liabilities cannot be rescaled, no non-negative household holds debt")]
    LiabilityUnallocatable(String),
    #[error("national accounts: {0}")]
    NationalAccounts(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// Category key of a national-accounts row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NaCategory {
    Asset(Asset),
    Liabilities,
}

impl NaCategory {
    pub fn name(self) -> &'static str {
        match self {
            NaCategory::Asset(a) => a.column(),
            NaCategory::Liabilities => "liabilities",
        }
    }

    pub fn parse(name: &str) -> Option<NaCategory> {
        if name == "liabilities" {
            return Some(NaCategory::Liabilities);
        }
        Asset::from_column(name).map(NaCategory::Asset)
    }
}

/// Country-level household totals and per-category aggregates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NationalAccountsTable {
    aggregates: BTreeMap<String, BTreeMap<NaCategory, f64>>,
    households: BTreeMap<String, f64>,
}

/// Reserved category name for household-count rows.
pub const HOUSEHOLDS_ROW: &str = "HOUSEHOLDS";

impl NationalAccountsTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_households(&mut self, country: &str, count: f64) {
        self.households.insert(country.to_string(), count);
    }

    pub fn set_aggregate(&mut self, country: &str, category: NaCategory, value: f64) {
        self.aggregates.entry(country.to_string()).or_default().insert(category, value);
    }

    pub fn households(&self, country: &str) -> Option<f64> {
        self.households.get(country).copied()
    }

    pub fn aggregate(&self, country: &str, category: NaCategory) -> Option<f64> {
        self.aggregates.get(country).and_then(|m| m.get(&category)).copied()
    }

    pub fn countries(&self) -> BTreeSet<&str> {
        self.households.keys().chain(self.aggregates.keys()).map(String::as_str).collect()
    }

    /// Aggregates of a population, one row per category present, plus
    /// household counts equal to the summed weights.
    pub fn from_population(pop: &Population) -> Self {
        let mut na = NationalAccountsTable::new();
        for r in pop.records() {
            *na.households.entry(r.country.clone()).or_default() += r.weight;
            let row = na.aggregates.entry(r.country.clone()).or_default();
            for a in Asset::ALL {
                *row.entry(NaCategory::Asset(a)).or_default() += r.weight * r.assets.get(a);
            }
            *row.entry(NaCategory::Liabilities).or_default() += r.weight * r.liabilities;
        }
        na
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self, CorrectionError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let mut na = NationalAccountsTable::new();
        for (i, row) in rdr.records().enumerate() {
            let row = row.map_err(|e| CorrectionError::NationalAccounts(e.to_string()))?;
            let bad = |msg: &str| CorrectionError::NationalAccounts(format!("row {}: {msg}", i + 1));
            if row.len() < 3 {
                return Err(bad("expected country,category,aggregate"));
            }
            let country = row[0].trim();
            let category = row[1].trim();
            let value: f64 = row[2].trim().parse().map_err(|_| bad("non-numeric aggregate"))?;
            if !value.is_finite() || value < 0.0 {
                return Err(bad("aggregate must be finite and nonnegative"));
            }
            if category == HOUSEHOLDS_ROW {
                if value <= 0.0 {
                    return Err(bad("household count must be positive"));
                }
                na.set_households(country, value);
            } else {
                let cat = NaCategory::parse(category).ok_or_else(|| bad("unknown category"))?;
                na.set_aggregate(country, cat, value);
            }
        }
        Ok(na)
    }

    pub fn load(path: &Path) -> Result<Self, CorrectionError> {
        let file = std::fs::File::open(path).map_err(|e| CorrectionError::NationalAccounts(e.to_string()))?;
        Self::read_csv(file)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), CorrectionError> {
        let err = |e: csv::Error| CorrectionError::NationalAccounts(e.to_string());
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["country", "category", "aggregate"]).map_err(err)?;
        for (country, n) in &self.households {
            wtr.write_record([country.as_str(), HOUSEHOLDS_ROW, &n.to_string()]).map_err(err)?;
        }
        for (country, row) in &self.aggregates {
            for (cat, v) in row {
                wtr.write_record([country.as_str(), cat.name(), &v.to_string()]).map_err(err)?;
            }
        }
        wtr.flush().map_err(|e| CorrectionError::NationalAccounts(e.to_string()))?;
        Ok(())
    }
}

// ---------------------------------------------------------------- step 1

/// Scales weights per country so they sum to the national household count.
pub fn adjust_weights(pop: &Population, na: &NationalAccountsTable) -> Result<Population, CorrectionError> {
    let mut sums: BTreeMap<&str, f64> = BTreeMap::new();
    for r in pop.records() {
        *sums.entry(r.country.as_str()).or_default() += r.weight;
    }
    let mut factors: BTreeMap<String, f64> = BTreeMap::new();
    for (country, sum) in sums {
        let target = na.households(country).ok_or_else(|| CorrectionError::UnknownCountry(country.into()))?;
        factors.insert(country.to_string(), target / sum);
    }
    Ok(pop.map_records(|r| HouseholdRecord { weight: r.weight * factors[&r.country], ..r.clone() })?)
}

// ---------------------------------------------------------------- step 2

/// Moves `fraction` of one survey category into another so the survey
/// taxonomy lines up with the national-accounts one (e.g. business deposits).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRemap {
    /// Restrict the remap to one country; applies everywhere when absent.
    #[serde(default)]
    pub country: Option<String>,
    pub from: Asset,
    pub to: Asset,
    pub fraction: f64,
}

pub fn link_categories(pop: &Population, remaps: &[CategoryRemap]) -> Result<Population, CorrectionError> {
    if remaps.is_empty() {
        return Ok(pop.clone());
    }
    Ok(pop.map_records(|r| {
        let mut out = r.clone();
        for m in remaps {
            if m.country.as_deref().is_some_and(|c| c != r.country) {
                continue;
            }
            let moved = out.assets.get(m.from) * m.fraction;
            *out.assets.get_mut(m.from) -= moved;
            *out.assets.get_mut(m.to) += moved;
        }
        out
    })?)
}

// ---------------------------------------------------------------- step 3

/// One household whose deposits were raised to the income floor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepositAdjustment {
    pub id: String,
    pub country: String,
    pub before: f64,
    pub after: f64,
}

/// Raises deposits below `theta * gross_income` to that floor.
pub fn correct_deposits(
    pop: &Population,
    theta: f64,
) -> Result<(Population, Vec<DepositAdjustment>), CorrectionError> {
    correct_deposits_except(pop, theta, &BTreeSet::new())
}

fn correct_deposits_except(
    pop: &Population,
    theta: f64,
    skip: &BTreeSet<String>,
) -> Result<(Population, Vec<DepositAdjustment>), CorrectionError> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(CorrectionError::InvalidTheta(theta));
    }
    let mut log = Vec::new();
    let out = pop.map_records(|r| {
        let floor = theta * r.gross_income;
        if r.assets.deposits >= floor || skip.contains(&r.country) {
            return r.clone();
        }
        log.push(DepositAdjustment {
            id: r.id.clone(),
            country: r.country.clone(),
            before: r.assets.deposits,
            after: floor,
        });
        let mut c = r.clone();
        c.assets.deposits = floor;
        c
    })?;
    Ok((out, log))
}

// ---------------------------------------------------------------- step 4

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TailSource {
    HfcsOnly,
    HfcsPlusRichlist,
}

/// Pareto upper tail `P(W > w) = (w_min / w)^alpha` for `w >= w_min`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParetoTail {
    pub alpha: f64,
    pub w_min: f64,
    /// Number of observations the shape was estimated from.
    pub n_fit: usize,
    pub source: TailSource,
}

impl ParetoTail {
    /// Tail with known parameters (no fit).
    pub fn known(alpha: f64, w_min: f64) -> Self {
        ParetoTail { alpha, w_min, n_fit: 0, source: TailSource::HfcsOnly }
    }

    pub fn survival(&self, w: f64) -> f64 {
        if w <= self.w_min {
            1.0
        } else {
            (self.w_min / w).powf(self.alpha)
        }
    }

    /// Wealth at survival probability `s` in (0, 1].
    pub fn at_survival(&self, s: f64) -> f64 {
        self.w_min * s.powf(-1.0 / self.alpha)
    }

    /// Share of tail wealth held by the richest fraction `p` of the tail.
    pub fn top_share(&self, p: f64) -> f64 {
        p.powf(1.0 - 1.0 / self.alpha)
    }
}

/// Hill / maximum-likelihood estimate of the Pareto shape above `w_min`.
pub fn fit_pareto(top_obs: &[f64], w_min: f64) -> Result<ParetoTail, CorrectionError> {
    let weights = vec![1.0; top_obs.len()];
    fit_pareto_weighted(top_obs, &weights, w_min, TailSource::HfcsOnly)
}

/// Weighted Hill estimator, `alpha = sum(w) / sum(w * ln(x / w_min))`.
pub fn fit_pareto_weighted(
    obs: &[f64],
    weights: &[f64],
    w_min: f64,
    source: TailSource,
) -> Result<ParetoTail, CorrectionError> {
    if !(w_min > 0.0) {
        return Err(CorrectionError::InvalidThreshold(w_min));
    }
    if obs.len() < 2 {
        return Err(CorrectionError::TooFewObservations(obs.len()));
    }
    if let Some(&value) = obs.iter().find(|&&x| !(x >= w_min)) {
        return Err(CorrectionError::ObservationBelowThreshold { value, w_min });
    }
    let (mut mass, mut log_sum) = (0.0, 0.0);
    for (&x, &w) in obs.iter().zip(weights) {
        mass += w;
        log_sum += w * (x / w_min).ln();
    }
    if log_sum <= 0.0 {
        return Err(CorrectionError::DegenerateFit);
    }
    Ok(ParetoTail { alpha: mass / log_sum, w_min, n_fit: obs.len(), source })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Seeded inverse-transform draws.
    #[default]
    Random,
    /// Inverse transform at the midpoints of an even probability grid.
    QuantileGrid,
}

/// Households expected in `(lower, upper]` out of `weighted_count` above `w_min`.
pub fn gap_count(tail: &ParetoTail, lower: f64, upper: f64, weighted_count: f64) -> usize {
    if lower >= upper {
        return 0;
    }
    let mass = tail.survival(lower) - tail.survival(upper);
    (weighted_count * mass).round().max(0.0) as usize
}

/// Net wealth of households drawn from the tail truncated to `(lower, upper]`.
pub fn sample_gap_wealth(
    tail: &ParetoTail,
    gap: (f64, f64),
    weighted_count: f64,
    seed: u64,
    mode: SamplingMode,
) -> Vec<f64> {
    let (lower, upper) = gap;
    let n = gap_count(tail, lower, upper, weighted_count);
    if n == 0 {
        return Vec::new();
    }
    let s_lo = tail.survival(lower);
    let s_hi = tail.survival(upper);
    let lowest = lower.next_up();
    let draw = |u: f64| tail.at_survival(s_lo - u * (s_lo - s_hi)).clamp(lowest, upper);
    match mode {
        SamplingMode::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // u in (0, 1] so the upper bound is reachable and the lower is not
            (0..n).map(|_| draw(1.0 - rng.random::<f64>())).collect()
        }
        SamplingMode::QuantileGrid => (0..n).map(|k| draw((k as f64 + 0.5) / n as f64)).collect(),
    }
}

/// Tail-sampled households of unit weight. Only their net wealth is known at
/// this point; it is held undifferentiated in `other_financial` until a
/// portfolio is allocated.
pub fn sample_gap(
    tail: &ParetoTail,
    gap: (f64, f64),
    weighted_count: f64,
    seed: u64,
    mode: SamplingMode,
) -> Vec<HouseholdRecord> {
    sample_gap_wealth(tail, gap, weighted_count, seed, mode)
        .into_iter()
        .enumerate()
        .map(|(k, w)| HouseholdRecord {
            id: format!("SYN-{k}"),
            country: String::new(),
            implicate: 1,
            weight: 1.0,
            assets: AssetVector { other_financial: w, ..Default::default() },
            liabilities: 0.0,
            gross_income: 0.0,
            synthetic: true,
        })
        .collect()
}

// ---------------------------------------------------------------- step 5

/// Per-category shares of gross wealth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssetShares(pub [f64; 9]);

impl AssetShares {
    pub fn get(&self, a: Asset) -> f64 {
        self.0[a as usize]
    }

    pub fn from_pairs(pairs: &[(Asset, f64)]) -> Self {
        let mut s = [0.0; 9];
        for &(a, v) in pairs {
            s[a as usize] = v;
        }
        AssetShares(s)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.0.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err("shares must lie in [0, 1]".into());
        }
        let total: f64 = self.0.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(format!("shares must sum to 1, got {total}"));
        }
        Ok(())
    }

    /// Portfolio shares of gross wealth held by `records` in aggregate.
    pub fn of_records<'a>(records: impl IntoIterator<Item = &'a HouseholdRecord>) -> Option<Self> {
        let mut sums = [0.0; 9];
        for r in records {
            for (s, v) in sums.iter_mut().zip(r.assets.to_array()) {
                *s += r.weight * v;
            }
        }
        let total: f64 = sums.iter().sum();
        (total > 0.0).then(|| AssetShares(sums.map(|s| s / total)))
    }
}

impl Serialize for AssetShares {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let map: BTreeMap<Asset, f64> =
            Asset::ALL.into_iter().map(|a| (a, self.get(a))).filter(|(_, v)| *v != 0.0).collect();
        map.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for AssetShares {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let map = BTreeMap::<Asset, f64>::deserialize(deserializer)?;
        let pairs: Vec<(Asset, f64)> = map.into_iter().collect();
        Ok(AssetShares::from_pairs(&pairs))
    }
}

impl Default for AssetShares {
    /// A business- and equity-heavy portfolio typical of the very top.
    fn default() -> Self {
        AssetShares::from_pairs(&[
            (Asset::Deposits, 0.05),
            (Asset::Bonds, 0.03),
            (Asset::ListedShares, 0.12),
            (Asset::Funds, 0.05),
            (Asset::OtherFinancial, 0.08),
            (Asset::MainResidence, 0.05),
            (Asset::InvestmentProperty, 0.15),
            (Asset::BusinessWealth, 0.45),
            (Asset::VehiclesValuables, 0.02),
        ])
    }
}

/// Leverage and asset mix of households known only by their net wealth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopPortfolioModel {
    /// Liabilities as a multiple of net wealth.
    pub liability_ratio: f64,
    pub allocation_shares: AssetShares,
}

impl Default for TopPortfolioModel {
    fn default() -> Self {
        TopPortfolioModel { liability_ratio: 0.05, allocation_shares: AssetShares::default() }
    }
}

impl TopPortfolioModel {
    pub fn validate(&self) -> Result<(), CorrectionError> {
        if !(self.liability_ratio >= 0.0) || !self.liability_ratio.is_finite() {
            return Err(CorrectionError::InvalidPortfolio("liability ratio must be >= 0".into()));
        }
        self.allocation_shares.validate().map_err(CorrectionError::InvalidPortfolio)
    }
}

/// Gross wealth `net * (1 + lambda)`, split by the model's shares; liabilities
/// `lambda * net`.
pub fn allocate_portfolio(net_wealth: f64, model: &TopPortfolioModel) -> Result<(AssetVector, f64), CorrectionError> {
    if !(net_wealth > 0.0) {
        return Err(CorrectionError::NonPositiveNetWealth(net_wealth));
    }
    let liabilities = model.liability_ratio * net_wealth;
    let gross = net_wealth + liabilities;
    let mut assets = AssetVector::default();
    for a in Asset::ALL {
        *assets.get_mut(a) = model.allocation_shares.get(a) * gross;
    }
    Ok((assets, liabilities))
}

// ---------------------------------------------------------------- step 6

/// Scale factors applied by [`rescale`] in one country.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RescaleFactors {
    pub country: String,
    pub assets: BTreeMap<Asset, f64>,
    /// Factor implied by the national liability total.
    pub liabilities: Option<f64>,
    /// Factor actually applied to non-negative households after the
    /// shortfall of capped households is redistributed.
    pub liabilities_effective: Option<f64>,
}

/// Rescales each category to its national aggregate, country by country.
///
/// Households with negative net wealth never end up with lower net wealth:
/// their liabilities are scaled by at most `min(factor, 1)` and cut further
/// if their assets shrink. Whatever this withholds from the liability total
/// is spread proportionally over households with non-negative net wealth.
pub fn rescale(pop: &Population, na: &NationalAccountsTable) -> Result<Population, CorrectionError> {
    rescale_with_factors(pop, na).map(|(p, _)| p)
}

pub fn rescale_with_factors(
    pop: &Population,
    na: &NationalAccountsTable,
) -> Result<(Population, Vec<RescaleFactors>), CorrectionError> {
    let mut records: Vec<HouseholdRecord> = pop.records().to_vec();
    let mut report = Vec::new();
    let countries: BTreeSet<String> = pop.countries().into_iter().map(String::from).collect();
    for country in countries {
        let idx: Vec<usize> = (0..records.len()).filter(|&i| records[i].country == country).collect();
        let mut factors = RescaleFactors {
            country: country.clone(),
            assets: BTreeMap::new(),
            liabilities: None,
            liabilities_effective: None,
        };

        let before: Vec<(f64, f64)> = idx.iter().map(|&i| (records[i].gross_wealth(), records[i].net_wealth())).collect();

        for a in Asset::ALL {
            let Some(target) = na.aggregate(&country, NaCategory::Asset(a)) else { continue };
            let survey: f64 = idx.iter().map(|&i| records[i].weight * records[i].assets.get(a)).sum();
            let f = scale_factor(target, survey, &country, a.column())?;
            for &i in &idx {
                *records[i].assets.get_mut(a) *= f;
            }
            factors.assets.insert(a, f);
        }

        if let Some(target) = na.aggregate(&country, NaCategory::Liabilities) {
            let survey: f64 = idx.iter().map(|&i| records[i].weight * records[i].liabilities).sum();
            let phi = scale_factor(target, survey, &country, "liabilities")?;
            let mut fixed_total = 0.0;
            let mut free_total = 0.0;
            let mut free = Vec::new();
            for (k, &i) in idx.iter().enumerate() {
                let (gross_before, net_before) = before[k];
                let r = &mut records[i];
                if net_before < 0.0 {
                    let asset_gain = r.gross_wealth() - gross_before;
                    let l = r.liabilities;
                    r.liabilities = (phi * l).min(l).min(l + asset_gain).max(0.0);
                    // rounding in the asset sums can still leave net wealth an ulp lower
                    while r.liabilities > 0.0 && r.net_wealth() < net_before {
                        r.liabilities = (r.gross_wealth() - net_before).min(r.liabilities.next_down()).max(0.0);
                    }
                    fixed_total += r.weight * r.liabilities;
                } else {
                    free_total += r.weight * r.liabilities;
                    free.push(i);
                }
            }
            let remaining = target - fixed_total;
            let phi_free = if free_total > 0.0 {
                remaining / free_total
            } else if remaining.abs() <= 1e-9 * target.max(1.0) {
                1.0
            } else {
                return Err(CorrectionError::LiabilityUnallocatable(country));
            };
            for i in free {
                records[i].liabilities *= phi_free;
            }
            factors.liabilities = Some(phi);
            factors.liabilities_effective = Some(phi_free);
        }
        report.push(factors);
    }
    Ok((pop.with_records(records)?, report))
}

fn scale_factor(target: f64, survey: f64, country: &str, category: &str) -> Result<f64, CorrectionError> {
    if survey > 0.0 {
        Ok(target / survey)
    } else if target > 0.0 {
        Err(CorrectionError::ZeroSurveyAggregate { country: country.into(), category: category.into() })
    } else {
        Ok(1.0)
    }
}

// ---------------------------------------------------------------- pipeline

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    AdjustWeights,
    Link,
    Deposits,
    Tail,
    Portfolio,
    Rescale,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StepToggles {
    pub adjust_weights: bool,
    pub link: bool,
    pub deposits: bool,
    pub tail: bool,
    pub portfolio: bool,
    pub rescale: bool,
}

impl Default for StepToggles {
    fn default() -> Self {
        StepToggles { adjust_weights: true, link: true, deposits: true, tail: true, portfolio: true, rescale: true }
    }
}

impl StepToggles {
    pub fn none() -> Self {
        StepToggles { adjust_weights: false, link: false, deposits: false, tail: false, portfolio: false, rescale: false }
    }

    pub fn enabled(&self, step: Step) -> bool {
        match step {
            Step::AdjustWeights => self.adjust_weights,
            Step::Link => self.link,
            Step::Deposits => self.deposits,
            Step::Tail => self.tail,
            Step::Portfolio => self.portfolio,
            Step::Rescale => self.rescale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub steps: StepToggles,
    /// Deposits are raised to at least this fraction of gross income.
    pub theta: f64,
    /// Survey households at or above this net wealth enter the tail fit.
    pub w_min: f64,
    pub top_portfolio: TopPortfolioModel,
    pub remaps: Vec<CategoryRemap>,
    /// Steps not applied to particular countries (deposits and tail only).
    pub country_skips: BTreeMap<String, Vec<Step>>,
    pub sampling: SamplingMode,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            steps: StepToggles::default(),
            theta: 0.05,
            w_min: 1_000_000.0,
            top_portfolio: TopPortfolioModel::default(),
            remaps: Vec::new(),
            country_skips: BTreeMap::new(),
            sampling: SamplingMode::Random,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn disabled() -> Self {
        PipelineConfig { steps: StepToggles::none(), ..Default::default() }
    }

    fn skipped(&self, country: &str, step: Step) -> bool {
        self.country_skips.get(country).is_some_and(|s| s.contains(&step))
    }
}

/// Tail fit and sampling outcome for one country in one implicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailReport {
    pub country: String,
    pub tail: ParetoTail,
    /// Richest survey household and poorest rich-list household.
    pub gap: Option<(f64, f64)>,
    pub weighted_count_above_wmin: f64,
    pub sampled: usize,
    pub rich_list: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ImplicateReport {
    pub implicate: u8,
    pub deposit_adjustments: usize,
    pub tails: Vec<TailReport>,
    pub rescale: Vec<RescaleFactors>,
    pub records_in: usize,
    pub records_out: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub implicates: Vec<ImplicateReport>,
}

/// Derives an independent stream seed for one (implicate, country) pair.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finaliser over a simple combination
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs the enabled steps in order on every implicate (in parallel).
pub fn run_pipeline(
    ds: &MultiImplicateDataset,
    na: &NationalAccountsTable,
    richlist: &RichList,
    config: &PipelineConfig,
) -> Result<(MultiImplicateDataset, PipelineReport), CorrectionError> {
    if !(0.0..=1.0).contains(&config.theta) {
        return Err(CorrectionError::InvalidTheta(config.theta));
    }
    if config.steps.portfolio {
        config.top_portfolio.validate()?;
    }
    let results: Vec<(Population, ImplicateReport)> = ds
        .implicates()
        .par_iter()
        .map(|pop| correct_implicate(pop, na, richlist, config))
        .collect::<Result<_, _>>()?;
    let (pops, reports): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let provenance = format!("{} | corrected", ds.provenance);
    Ok((MultiImplicateDataset::new(pops, provenance)?, PipelineReport { implicates: reports }))
}

fn correct_implicate(
    input: &Population,
    na: &NationalAccountsTable,
    richlist: &RichList,
    config: &PipelineConfig,
) -> Result<(Population, ImplicateReport), CorrectionError> {
    let steps = &config.steps;
    let mut report = ImplicateReport { implicate: input.implicate(), records_in: input.len(), ..Default::default() };
    let mut pop = input.clone();

    if steps.adjust_weights {
        pop = adjust_weights(&pop, na)?;
    }
    if steps.link {
        pop = link_categories(&pop, &config.remaps)?;
    }
    if steps.deposits {
        let skip: BTreeSet<String> = pop
            .countries()
            .into_iter()
            .filter(|c| config.skipped(c, Step::Deposits))
            .map(String::from)
            .collect();
        let (p, log) = correct_deposits_except(&pop, config.theta, &skip)?;
        report.deposit_adjustments = log.len();
        pop = p;
    }
    if steps.tail {
        let (extra, tails) = impute_top(&pop, richlist, config)?;
        report.tails = tails;
        if !extra.is_empty() {
            let mut records = pop.into_records();
            records.extend(extra);
            pop = Population::new(records, input.reference_year)?;
        }
    }
    if steps.rescale {
        let (p, factors) = rescale_with_factors(&pop, na)?;
        report.rescale = factors;
        pop = p;
    }
    report.records_out = pop.len();
    Ok((pop, report))
}

/// Steps 4 and 5: tail fit, gap sampling, rich-list households and their
/// portfolios.
fn impute_top(
    pop: &Population,
    richlist: &RichList,
    config: &PipelineConfig,
) -> Result<(Vec<HouseholdRecord>, Vec<TailReport>), CorrectionError> {
    let implicate = pop.implicate();
    let mut extra = Vec::new();
    let mut reports = Vec::new();
    let countries: Vec<String> = pop.countries().into_iter().map(String::from).collect();
    for (ci, country) in countries.iter().enumerate() {
        if config.skipped(country, Step::Tail) {
            continue;
        }
        let survey_top: Vec<&HouseholdRecord> = pop
            .records()
            .iter()
            .filter(|r| r.country == *country && r.net_wealth() >= config.w_min)
            .collect();
        let rich: Vec<f64> = richlist.for_country(country).collect();

        let mut obs: Vec<f64> = survey_top.iter().map(|r| r.net_wealth()).collect();
        let mut weights: Vec<f64> = survey_top.iter().map(|r| r.weight).collect();
        obs.extend(rich.iter().copied().filter(|&w| w >= config.w_min));
        weights.resize(obs.len(), 1.0);
        let source = if rich.is_empty() { TailSource::HfcsOnly } else { TailSource::HfcsPlusRichlist };
        let tail = fit_pareto_weighted(&obs, &weights, config.w_min, source)?;

        let n_above: f64 = survey_top.iter().map(|r| r.weight).sum();
        let survey_max = survey_top.iter().map(|r| r.net_wealth()).fold(config.w_min, f64::max);
        let rich_min = rich.iter().copied().fold(f64::INFINITY, f64::min);
        let gap = rich_min.is_finite().then_some((survey_max, rich_min));

        let seed = derive_seed(config.seed, implicate as u64, ci as u64);
        let sampled: Vec<f64> = match gap {
            Some(g) => sample_gap_wealth(&tail, g, n_above, seed, config.sampling),
            None => Vec::new(),
        };

        let model = if config.steps.portfolio {
            config.top_portfolio
        } else {
            survey_portfolio(&survey_top, &config.top_portfolio)
        };

        for (k, &w) in sampled.iter().enumerate() {
            extra.push(top_household(format!("SYN-{country}-{implicate}-{k}"), country, implicate, w, &model, true)?);
        }
        for (k, &w) in rich.iter().enumerate() {
            extra.push(top_household(format!("RL-{country}-{k}"), country, implicate, w, &model, false)?);
        }
        reports.push(TailReport {
            country: country.clone(),
            tail,
            gap,
            weighted_count_above_wmin: n_above,
            sampled: sampled.len(),
            rich_list: rich.len(),
        });
    }
    Ok((extra, reports))
}

/// Falls back on the survey's own top portfolio when the external model is
/// switched off.
fn survey_portfolio(top: &[&HouseholdRecord], fallback: &TopPortfolioModel) -> TopPortfolioModel {
    let Some(shares) = AssetShares::of_records(top.iter().copied()) else { return *fallback };
    let net: f64 = top.iter().map(|r| r.weight * r.net_wealth()).sum();
    let debt: f64 = top.iter().map(|r| r.weight * r.liabilities).sum();
    TopPortfolioModel { liability_ratio: if net > 0.0 { debt / net } else { 0.0 }, allocation_shares: shares }
}

fn top_household(
    id: String,
    country: &str,
    implicate: u8,
    net: f64,
    model: &TopPortfolioModel,
    synthetic: bool,
) -> Result<HouseholdRecord, CorrectionError> {
    let (assets, liabilities) = allocate_portfolio(net, model)?;
    Ok(HouseholdRecord {
        id,
        country: country.to_string(),
        implicate,
        weight: 1.0,
        assets,
        liabilities,
        gross_income: 0.0,
        synthetic,
    })
}
