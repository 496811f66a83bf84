//! Household microdata model, derived wealth bases and CSV ingestion.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of multiply-imputed versions of the survey.
pub const IMPLICATES: usize = 5;

/// The nine asset categories carried per household.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Asset {
    Deposits,
    Bonds,
    ListedShares,
    Funds,
    OtherFinancial,
    MainResidence,
    InvestmentProperty,
    BusinessWealth,
    VehiclesValuables,
}

impl Asset {
    pub const ALL: [Asset; 9] = [
        Asset::Deposits,
        Asset::Bonds,
        Asset::ListedShares,
        Asset::Funds,
        Asset::OtherFinancial,
        Asset::MainResidence,
        Asset::InvestmentProperty,
        Asset::BusinessWealth,
        Asset::VehiclesValuables,
    ];

    /// Column name used in the dataset and national-accounts CSV files.
    pub fn column(self) -> &'static str {
        match self {
            Asset::Deposits => "deposits",
            Asset::Bonds => "bonds",
            Asset::ListedShares => "listed_shares",
            Asset::Funds => "funds",
            Asset::OtherFinancial => "other_financial",
            Asset::MainResidence => "main_residence",
            Asset::InvestmentProperty => "investment_property",
            Asset::BusinessWealth => "business_wealth",
            Asset::VehiclesValuables => "vehicles_valuables",
        }
    }

    pub fn from_column(name: &str) -> Option<Asset> {
        Asset::ALL.into_iter().find(|a| a.column() == name)
    }

    /// Financial assets plus investment property.
    pub fn is_fip(self) -> bool {
        matches!(
            self,
            Asset::Deposits
                | Asset::Bonds
                | Asset::ListedShares
                | Asset::Funds
                | Asset::OtherFinancial
                | Asset::InvestmentProperty
        )
    }

    pub fn is_property(self) -> bool {
        matches!(self, Asset::MainResidence | Asset::InvestmentProperty)
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Asset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.column())
    }
}

/// Per-household asset holdings in EUR.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AssetVector {
    pub deposits: f64,
    pub bonds: f64,
    pub listed_shares: f64,
    pub funds: f64,
    pub other_financial: f64,
    pub main_residence: f64,
    /// All property other than the main residence, underlying land included.
    pub investment_property: f64,
    pub business_wealth: f64,
    pub vehicles_valuables: f64,
}

impl AssetVector {
    pub fn from_array(values: [f64; 9]) -> Self {
        let mut v = AssetVector::default();
        for (asset, value) in Asset::ALL.into_iter().zip(values) {
            *v.get_mut(asset) = value;
        }
        v
    }

    pub fn to_array(&self) -> [f64; 9] {
        Asset::ALL.map(|a| self.get(a))
    }

    pub fn get(&self, asset: Asset) -> f64 {
        match asset {
            Asset::Deposits => self.deposits,
            Asset::Bonds => self.bonds,
            Asset::ListedShares => self.listed_shares,
            Asset::Funds => self.funds,
            Asset::OtherFinancial => self.other_financial,
            Asset::MainResidence => self.main_residence,
            Asset::InvestmentProperty => self.investment_property,
            Asset::BusinessWealth => self.business_wealth,
            Asset::VehiclesValuables => self.vehicles_valuables,
        }
    }

    pub fn get_mut(&mut self, asset: Asset) -> &mut f64 {
        match asset {
            Asset::Deposits => &mut self.deposits,
            Asset::Bonds => &mut self.bonds,
            Asset::ListedShares => &mut self.listed_shares,
            Asset::Funds => &mut self.funds,
            Asset::OtherFinancial => &mut self.other_financial,
            Asset::MainResidence => &mut self.main_residence,
            Asset::InvestmentProperty => &mut self.investment_property,
            Asset::BusinessWealth => &mut self.business_wealth,
            Asset::VehiclesValuables => &mut self.vehicles_valuables,
        }
    }

    pub fn gross(&self) -> f64 {
        self.to_array().iter().sum()
    }

    pub fn fip(&self) -> f64 {
        self.deposits
            + self.bonds
            + self.listed_shares
            + self.funds
            + self.other_financial
            + self.investment_property
    }

    pub fn property(&self) -> f64 {
        self.main_residence + self.investment_property
    }

    pub fn is_nonnegative(&self) -> bool {
        self.to_array().iter().all(|v| *v >= 0.0)
    }
}

/// Which stock of wealth a tax design is levied on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WealthBase {
    /// Gross assets minus liabilities.
    Net,
    /// Financial wealth plus investment property.
    Fip,
    /// Main residence plus investment property.
    Property,
}

impl WealthBase {
    pub const ALL: [WealthBase; 3] = [WealthBase::Net, WealthBase::Fip, WealthBase::Property];

    pub fn as_str(self) -> &'static str {
        match self {
            WealthBase::Net => "net",
            WealthBase::Fip => "fip",
            WealthBase::Property => "property",
        }
    }
}

impl fmt::Display for WealthBase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HouseholdRecord {
    pub id: String,
    pub country: String,
    pub implicate: u8,
    /// Number of households this record represents.
    pub weight: f64,
    pub assets: AssetVector,
    pub liabilities: f64,
    pub gross_income: f64,
    /// Set for households drawn from a fitted tail distribution.
    #[serde(default)]
    pub synthetic: bool,
}

impl HouseholdRecord {
    pub fn gross_wealth(&self) -> f64 {
        self.assets.gross()
    }

    pub fn net_wealth(&self) -> f64 {
        self.assets.gross() - self.liabilities
    }

    pub fn fip_wealth(&self) -> f64 {
        self.assets.fip()
    }

    pub fn property_wealth(&self) -> f64 {
        self.assets.property()
    }

    pub fn wealth_base(&self, base: WealthBase) -> f64 {
        wealth_base(self, base)
    }
}

/// Value of `record` under the given tax base. Only the net base can be negative.
pub fn wealth_base(record: &HouseholdRecord, base: WealthBase) -> f64 {
    match base {
        WealthBase::Net => record.net_wealth(),
        WealthBase::Fip => record.fip_wealth(),
        WealthBase::Property => record.property_wealth(),
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DatasetError {
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("row {row}: non-numeric value in column `{col}`")]
    NonNumericValue { row: usize, col: String },
    #[error("row {row}: negative amount in column `{col}`")]
    NegativeAmount { row: usize, col: String },
    #[error("row {0}: weight must be positive")]
    NonPositiveWeight(usize),
    #[error("row {0}: implicate index must be in 1..=5")]
    BadImplicateIndex(usize),
    #[error("implicates present {found:?}; expected only 1 (replicated) or exactly 1..=5")]
    IncompleteImplicates { found: Vec<u8> },
    #[error("population is empty")]
    EmptyPopulation,
    #[error("population mixes implicates {0} and {1}")]
    MixedImplicates(u8, u8),
    #[error("expected {IMPLICATES} implicates indexed 1..=5")]
    BadImplicateSet,
    #[error("csv: {0}")]
    Csv(String),
    #[error("io: {0}")]
    Io(String),
}

impl From<csv::Error> for DatasetError {
    fn from(e: csv::Error) -> Self {
        DatasetError::Csv(e.to_string())
    }
}

impl From<std::io::Error> for DatasetError {
    fn from(e: std::io::Error) -> Self {
        DatasetError::Io(e.to_string())
    }
}

/// All households of one implicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Population {
    implicate: u8,
    pub reference_year: i32,
    records: Vec<HouseholdRecord>,
}

impl Population {
    pub fn new(records: Vec<HouseholdRecord>, reference_year: i32) -> Result<Self, DatasetError> {
        let first = records.first().ok_or(DatasetError::EmptyPopulation)?;
        let implicate = first.implicate;
        if !(1..=IMPLICATES as u8).contains(&implicate) {
            return Err(DatasetError::BadImplicateIndex(0));
        }
        for (row, r) in records.iter().enumerate() {
            if r.implicate != implicate {
                return Err(DatasetError::MixedImplicates(implicate, r.implicate));
            }
            if !(r.weight > 0.0) || !r.weight.is_finite() {
                return Err(DatasetError::NonPositiveWeight(row));
            }
        }
        Ok(Population { implicate, reference_year, records })
    }

    pub fn implicate(&self) -> u8 {
        self.implicate
    }

    pub fn records(&self) -> &[HouseholdRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn into_records(self) -> Vec<HouseholdRecord> {
        self.records
    }

    /// Rebuilds the population with `f` applied to each record. Implicate and
    /// weight invariants are re-checked.
    pub fn map_records<F>(&self, f: F) -> Result<Population, DatasetError>
    where
        F: FnMut(&HouseholdRecord) -> HouseholdRecord,
    {
        Population::new(self.records.iter().map(f).collect(), self.reference_year)
    }

    pub fn with_records(&self, records: Vec<HouseholdRecord>) -> Result<Population, DatasetError> {
        Population::new(records, self.reference_year)
    }

    pub fn total_weight(&self) -> f64 {
        self.records.iter().map(|r| r.weight).sum()
    }

    pub fn countries(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.country.as_str()).collect()
    }

    pub fn base_values(&self, base: WealthBase) -> Vec<f64> {
        self.records.iter().map(|r| r.wealth_base(base)).collect()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.weight).collect()
    }
}

/// The five implicates of one survey wave.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiImplicateDataset {
    implicates: Vec<Population>,
    pub provenance: String,
}

impl MultiImplicateDataset {
    pub fn new(implicates: Vec<Population>, provenance: impl Into<String>) -> Result<Self, DatasetError> {
        if implicates.len() != IMPLICATES {
            return Err(DatasetError::BadImplicateSet);
        }
        for (i, p) in implicates.iter().enumerate() {
            if p.implicate() as usize != i + 1 {
                return Err(DatasetError::BadImplicateSet);
            }
        }
        Ok(MultiImplicateDataset { implicates, provenance: provenance.into() })
    }

    /// Five copies of `pop`, relabelled 1..=5.
    pub fn replicate(pop: &Population, provenance: impl Into<String>) -> Result<Self, DatasetError> {
        let implicates = (1..=IMPLICATES as u8)
            .map(|k| {
                pop.map_records(|r| HouseholdRecord { implicate: k, ..r.clone() })
            })
            .collect::<Result<Vec<_>, _>>()?;
        MultiImplicateDataset::new(implicates, provenance)
    }

    pub fn implicates(&self) -> &[Population] {
        &self.implicates
    }

    pub fn implicate(&self, k: u8) -> &Population {
        &self.implicates[k as usize - 1]
    }

    pub fn into_implicates(self) -> Vec<Population> {
        self.implicates
    }

    pub fn record_count(&self) -> usize {
        self.implicates.iter().map(Population::len).sum()
    }
}

/// Canonical dataset columns in file order.
pub const COLUMNS: [&str; 15] = [
    "country",
    "implicate",
    "hh_id",
    "weight",
    "gross_income",
    "deposits",
    "bonds",
    "listed_shares",
    "funds",
    "other_financial",
    "main_residence",
    "investment_property",
    "business_wealth",
    "vehicles_valuables",
    "liabilities",
];

/// Maps canonical column names onto the header names used by a particular
/// extract. Columns without an entry are looked up under their canonical name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ColumnMap {
    #[serde(default)]
    pub columns: BTreeMap<String, String>,
    #[serde(default = "default_reference_year")]
    pub reference_year: i32,
}

fn default_reference_year() -> i32 {
    2017
}

impl ColumnMap {
    pub fn identity() -> Self {
        ColumnMap { columns: BTreeMap::new(), reference_year: default_reference_year() }
    }

    fn header_for<'a>(&'a self, canonical: &'a str) -> &'a str {
        self.columns.get(canonical).map(String::as_str).unwrap_or(canonical)
    }
}

pub fn load_population(path: &Path, schema: &ColumnMap) -> Result<MultiImplicateDataset, DatasetError> {
    let file = std::fs::File::open(path)?;
    read_dataset(file, schema, &path.display().to_string())
}

/// Parses a dataset CSV. A file holding only implicate 1 is replicated to all
/// five implicates; otherwise all five must be present.
pub fn read_dataset<R: Read>(
    reader: R,
    schema: &ColumnMap,
    provenance: &str,
) -> Result<MultiImplicateDataset, DatasetError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut index = [0usize; 15];
    for (slot, canonical) in index.iter_mut().zip(COLUMNS) {
        let name = schema.header_for(canonical);
        *slot = headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| DatasetError::MissingColumn(name.to_string()))?;
    }

    let mut by_implicate: BTreeMap<u8, Vec<HouseholdRecord>> = BTreeMap::new();
    for (i, row) in rdr.records().enumerate() {
        // 1-based data rows, header excluded
        let row_no = i + 1;
        let row = row?;
        let field = |c: usize| row.get(index[c]).unwrap_or("").trim();
        let number = |c: usize| -> Result<f64, DatasetError> {
            let raw = field(c);
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| DatasetError::NonNumericValue { row: row_no, col: COLUMNS[c].to_string() })
        };
        let amount = |c: usize| -> Result<f64, DatasetError> {
            let v = number(c)?;
            if v < 0.0 {
                return Err(DatasetError::NegativeAmount { row: row_no, col: COLUMNS[c].to_string() });
            }
            Ok(v)
        };

        let implicate = match field(1).parse::<i64>() {
            Ok(k) if (1..=IMPLICATES as i64).contains(&k) => k as u8,
            Ok(_) => return Err(DatasetError::BadImplicateIndex(row_no)),
            Err(_) => {
                return Err(DatasetError::NonNumericValue { row: row_no, col: "implicate".into() })
            }
        };
        let weight = number(3)?;
        if weight <= 0.0 {
            return Err(DatasetError::NonPositiveWeight(row_no));
        }
        let mut assets = [0.0; 9];
        for (k, slot) in assets.iter_mut().enumerate() {
            *slot = amount(5 + k)?;
        }
        let record = HouseholdRecord {
            id: field(2).to_string(),
            country: field(0).to_string(),
            implicate,
            weight,
            assets: AssetVector::from_array(assets),
            liabilities: amount(14)?,
            gross_income: amount(4)?,
            synthetic: false,
        };
        by_implicate.entry(implicate).or_default().push(record);
    }

    let found: Vec<u8> = by_implicate.keys().copied().collect();
    if found == [1] {
        let pop = Population::new(by_implicate.remove(&1).unwrap(), schema.reference_year)?;
        return MultiImplicateDataset::replicate(&pop, provenance);
    }
    if found != [1, 2, 3, 4, 5] {
        if found.is_empty() {
            return Err(DatasetError::EmptyPopulation);
        }
        return Err(DatasetError::IncompleteImplicates { found });
    }
    let pops = by_implicate
        .into_values()
        .map(|records| Population::new(records, schema.reference_year))
        .collect::<Result<Vec<_>, _>>()?;
    MultiImplicateDataset::new(pops, provenance)
}

/// Writes every implicate in canonical column order. Floats use the shortest
/// representation that parses back to the same value.
pub fn write_dataset<W: Write>(ds: &MultiImplicateDataset, writer: W) -> Result<(), DatasetError> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(COLUMNS)?;
    for pop in ds.implicates() {
        for r in pop.records() {
            let mut row: Vec<String> = Vec::with_capacity(15);
            row.push(r.country.clone());
            row.push(r.implicate.to_string());
            row.push(r.id.clone());
            row.push(r.weight.to_string());
            row.push(r.gross_income.to_string());
            row.extend(r.assets.to_array().iter().map(f64::to_string));
            row.push(r.liabilities.to_string());
            wtr.write_record(&row)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

pub fn save_dataset(ds: &MultiImplicateDataset, path: &Path) -> Result<(), DatasetError> {
    let file = std::fs::File::create(path)?;
    write_dataset(ds, std::io::BufWriter::new(file))
}
