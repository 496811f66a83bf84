//! Synthetic populations with known wealth distributions, and rich lists
//! drawn from a known Pareto tail.
//!
//! Every household gets its own ChaCha stream (`stream = record index`), so
//! generation is order-independent and can run in parallel.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correction::{derive_seed, AssetShares, NaCategory, NationalAccountsTable, ParetoTail};
use crate::dataset::{Asset, AssetVector, DatasetError, HouseholdRecord, MultiImplicateDataset, Population, IMPLICATES};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("rich-list floor {floor} must exceed the tail threshold {w_min}")]
    InvalidFloor { floor: f64, w_min: f64 },
    #[error("rich list: {0}")]
    RichList(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LognormalParams {
    pub mu: f64,
    pub sigma: f64,
}

impl LognormalParams {
    pub fn mean(&self) -> f64 {
        (self.mu + self.sigma * self.sigma / 2.0).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParetoParams {
    pub alpha: f64,
    pub w_min: f64,
}

impl ParetoParams {
    pub fn tail(&self) -> ParetoTail {
        ParetoTail::known(self.alpha, self.w_min)
    }
}

fn default_weight() -> f64 {
    1.0
}

fn default_countries() -> Vec<String> {
    vec!["EA".to_string()]
}

fn default_income() -> LognormalParams {
    LognormalParams { mu: 10.3, sigma: 0.6 }
}

fn default_year() -> i32 {
    2017
}

/// Parameters of a synthetic survey.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_households: usize,
    /// Net wealth of non-tail households.
    pub body: LognormalParams,
    /// Net wealth of tail households.
    pub tail: ParetoParams,
    /// Fraction of households drawn from the tail.
    pub tail_fraction: f64,
    pub asset_split: AssetShares,
    /// Liabilities as a fraction of gross wealth.
    pub liability_ratio: f64,
    pub seed: u64,
    #[serde(default = "default_income")]
    pub income: LognormalParams,
    #[serde(default = "default_weight")]
    pub weight: f64,
    /// Assigned round-robin by record index.
    #[serde(default = "default_countries")]
    pub countries: Vec<String>,
    /// Relative jitter applied independently to each asset in each implicate;
    /// zero gives five identical implicates.
    #[serde(default)]
    pub implicate_noise: f64,
    /// Tail households above this quantile of the tail distribution are not
    /// observed (survey under-coverage at the very top).
    #[serde(default)]
    pub tail_truncation: Option<f64>,
    #[serde(default = "default_year")]
    pub reference_year: i32,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.to_string()));
        if self.n_households == 0 {
            return bad("n_households must be positive");
        }
        if !(self.tail.alpha > 0.0) {
            return bad("tail alpha must be positive");
        }
        if !(self.tail.w_min > 0.0) {
            return bad("tail w_min must be positive");
        }
        if !(0.0..1.0).contains(&self.tail_fraction) {
            return bad("tail_fraction must lie in [0, 1)");
        }
        if !(self.body.sigma >= 0.0) || !self.body.mu.is_finite() {
            return bad("body lognormal parameters invalid");
        }
        if !(self.income.sigma >= 0.0) || !self.income.mu.is_finite() {
            return bad("income lognormal parameters invalid");
        }
        if !(0.0..1.0).contains(&self.liability_ratio) {
            return bad("liability_ratio must lie in [0, 1)");
        }
        if !(self.weight > 0.0) {
            return bad("weight must be positive");
        }
        if self.countries.is_empty() {
            return bad("at least one country is required");
        }
        if !(0.0..1.0).contains(&self.implicate_noise) {
            return bad("implicate_noise must lie in [0, 1)");
        }
        if let Some(q) = self.tail_truncation {
            if !(q > 0.0 && q < 1.0) {
                return bad("tail_truncation must lie in (0, 1)");
            }
        }
        self.asset_split.validate().map_err(SynthError::InvalidSpec)
    }

    /// Households drawn from the tail (the first ones by index).
    pub fn tail_count(&self) -> usize {
        (self.n_households as f64 * self.tail_fraction).round() as usize
    }

    fn country_of(&self, i: usize) -> &str {
        &self.countries[i % self.countries.len()]
    }
}

/// One generated household before implicate jitter.
struct Draw {
    index: usize,
    net: f64,
    income: f64,
    observed: bool,
}

fn draw_household(spec: &SynthSpec, i: usize, body: &LogNormal<f64>, income: &LogNormal<f64>) -> Draw {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(i as u64);
    let u: f64 = rng.random();
    let in_tail = i < spec.tail_count();
    let net = if in_tail {
        // inverse transform of the Pareto cdf
        spec.tail.w_min * (1.0 - u).powf(-1.0 / spec.tail.alpha)
    } else {
        body.sample(&mut rng)
    };
    let income = income.sample(&mut rng);
    let observed = !(in_tail && spec.tail_truncation.is_some_and(|q| u >= q));
    Draw { index: i, net, income, observed }
}

fn build_record(spec: &SynthSpec, d: &Draw, implicate: u8) -> HouseholdRecord {
    let gross = d.net / (1.0 - spec.liability_ratio);
    let mut assets = AssetVector::default();
    let mut jitter = (spec.implicate_noise > 0.0).then(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, d.index as u64, implicate as u64));
        rng.set_stream(u64::MAX - d.index as u64);
        rng
    });
    for a in Asset::ALL {
        let mut v = spec.asset_split.get(a) * gross;
        if let Some(rng) = jitter.as_mut() {
            let u: f64 = rng.random();
            v *= 1.0 + spec.implicate_noise * (2.0 * u - 1.0);
        }
        *assets.get_mut(a) = v;
    }
    let liabilities = spec.liability_ratio * gross;
    HouseholdRecord {
        id: format!("H{:07}", d.index),
        country: spec.country_of(d.index).to_string(),
        implicate,
        weight: spec.weight,
        assets,
        liabilities,
        gross_income: d.income,
        synthetic: false,
    }
}

fn generate_inner(spec: &SynthSpec, observed_only: bool) -> Result<MultiImplicateDataset, SynthError> {
    spec.validate()?;
    let body = LogNormal::new(spec.body.mu, spec.body.sigma).map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
    let income =
        LogNormal::new(spec.income.mu, spec.income.sigma).map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
    let draws: Vec<Draw> = (0..spec.n_households)
        .into_par_iter()
        .map(|i| draw_household(spec, i, &body, &income))
        .filter(|d| d.observed || !observed_only)
        .collect();
    let pops = (1..=IMPLICATES as u8)
        .map(|k| {
            let records: Vec<HouseholdRecord> = draws.par_iter().map(|d| build_record(spec, d, k)).collect();
            Population::new(records, spec.reference_year)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let provenance = format!("synthetic n={} seed={}", spec.n_households, spec.seed);
    Ok(MultiImplicateDataset::new(pops, provenance)?)
}

/// Observed synthetic survey: tail households above the truncation quantile
/// (if any) are left out.
pub fn generate(spec: &SynthSpec) -> Result<MultiImplicateDataset, SynthError> {
    generate_inner(spec, true)
}

/// The full population, including households the survey misses.
pub fn generate_truth(spec: &SynthSpec) -> Result<MultiImplicateDataset, SynthError> {
    generate_inner(spec, false)
}

/// Very wealthy households known from public rankings.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RichList {
    /// `(country, net_wealth)`, descending by wealth.
    entries: Vec<(String, f64)>,
}

impl RichList {
    pub fn new(mut entries: Vec<(String, f64)>) -> Result<Self, SynthError> {
        if let Some((c, w)) = entries.iter().find(|(_, w)| !(*w > 0.0) || !w.is_finite()) {
            return Err(SynthError::RichList(format!("{c}: net wealth {w} must be positive")));
        }
        entries.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(RichList { entries })
    }

    pub fn entries(&self) -> &[(String, f64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn for_country<'a>(&'a self, country: &'a str) -> impl Iterator<Item = f64> + 'a {
        self.entries.iter().filter(move |(c, _)| c == country).map(|(_, w)| *w)
    }

    pub fn merge(lists: impl IntoIterator<Item = RichList>) -> Result<Self, SynthError> {
        RichList::new(lists.into_iter().flat_map(|l| l.entries).collect())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self, SynthError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let mut entries = Vec::new();
        for (i, row) in rdr.records().enumerate() {
            let row = row.map_err(|e| SynthError::RichList(e.to_string()))?;
            let w: f64 = row
                .get(1)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| SynthError::RichList(format!("row {}: non-numeric net_wealth", i + 1)))?;
            entries.push((row.get(0).unwrap_or("").trim().to_string(), w));
        }
        RichList::new(entries)
    }

    pub fn load(path: &Path) -> Result<Self, SynthError> {
        let f = std::fs::File::open(path).map_err(|e| SynthError::RichList(e.to_string()))?;
        Self::read_csv(f)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), SynthError> {
        let err = |e: csv::Error| SynthError::RichList(e.to_string());
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["country", "net_wealth"]).map_err(err)?;
        for (c, w) in &self.entries {
            wtr.write_record([c.as_str(), &w.to_string()]).map_err(err)?;
        }
        wtr.flush().map_err(|e| SynthError::RichList(e.to_string()))
    }
}

/// `count` i.i.d. draws from `tail` conditioned on being at least `floor`.
pub fn generate_richlist(
    tail: &ParetoTail,
    floor: f64,
    count: usize,
    seed: u64,
    country: &str,
) -> Result<RichList, SynthError> {
    if !(floor > tail.w_min) {
        return Err(SynthError::InvalidFloor { floor, w_min: tail.w_min });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = (0..count)
        .map(|_| {
            let u: f64 = rng.random();
            (country.to_string(), floor * (1.0 - u).powf(-1.0 / tail.alpha))
        })
        .collect();
    RichList::new(entries)
}

/// A synthetic survey with ground truth: the observed (possibly truncated)
/// data, the national accounts of the full population, and a rich list
/// consistent with the tail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub spec: SynthSpec,
    /// Lower bound of the rich list.
    pub richlist_floor: f64,
    /// National household count relative to the summed survey weights.
    #[serde(default = "default_scale")]
    pub household_scale: f64,
}

fn default_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone)]
pub struct ScenarioData {
    pub observed: MultiImplicateDataset,
    pub truth: MultiImplicateDataset,
    pub national_accounts: NationalAccountsTable,
    pub rich_list: RichList,
}

impl Scenario {
    /// Two-country survey with a truncated Pareto top and a rich list above
    /// 50m; small enough for tests and demos.
    pub fn demo(n_households: usize, seed: u64) -> Self {
        Scenario {
            spec: SynthSpec {
                n_households,
                body: LognormalParams { mu: 11.0, sigma: 0.9 },
                tail: ParetoParams { alpha: 1.8, w_min: 1e6 },
                tail_fraction: 0.05,
                asset_split: AssetShares::from_pairs(&[
                    (Asset::Deposits, 0.15),
                    (Asset::ListedShares, 0.15),
                    (Asset::MainResidence, 0.4),
                    (Asset::InvestmentProperty, 0.2),
                    (Asset::BusinessWealth, 0.1),
                ]),
                liability_ratio: 0.1,
                seed,
                income: default_income(),
                weight: 50.0,
                countries: vec!["AA".into(), "BB".into()],
                implicate_noise: 0.02,
                tail_truncation: Some(0.99),
                reference_year: default_year(),
            },
            richlist_floor: 5e7,
            household_scale: 1.0,
        }
    }

    pub fn build(&self) -> Result<ScenarioData, SynthError> {
        let truth = generate_truth(&self.spec)?;
        let observed = generate(&self.spec)?;
        let first = truth.implicate(1);

        let mut na = NationalAccountsTable::from_population(first);
        let mut counts: BTreeMap<String, f64> = BTreeMap::new();
        for r in first.records() {
            *counts.entry(r.country.clone()).or_default() += r.weight;
        }
        for (c, n) in &counts {
            na.set_households(c, n * self.household_scale);
            // households the survey does not represent hold wealth too
            if self.household_scale != 1.0 {
                for cat in Asset::ALL.map(NaCategory::Asset).into_iter().chain([NaCategory::Liabilities]) {
                    if let Some(v) = na.aggregate(c, cat) {
                        na.set_aggregate(c, cat, v * self.household_scale);
                    }
                }
            }
        }

        let tail = self.spec.tail.tail();
        let mut tail_weight: BTreeMap<String, f64> = BTreeMap::new();
        for i in 0..self.spec.tail_count() {
            *tail_weight.entry(self.spec.country_of(i).to_string()).or_default() += self.spec.weight;
        }
        let mut lists = Vec::new();
        for (ci, (country, n_tail)) in tail_weight.iter().enumerate() {
            let expected = n_tail * self.household_scale * tail.survival(self.richlist_floor);
            let seed = derive_seed(self.spec.seed, 0x5249_4348, ci as u64);
            lists.push(generate_richlist(&tail, self.richlist_floor, expected.round() as usize, seed, country)?);
        }
        Ok(ScenarioData { observed, truth, national_accounts: na, rich_list: RichList::merge(lists)? })
    }
}
