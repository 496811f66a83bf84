//! Marginal wealth-tax designs, their resolution into absolute bands, and
//! revenue aggregation.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{MultiImplicateDataset, Population, WealthBase};
use crate::stats::{pairwise_sum, weighted_quantile, StatsError, WeightedSeries};

/// Percentile at which a design starts taxing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Exemption {
    P90,
    P95,
}

impl TryFrom<u8> for Exemption {
    type Error = String;
    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            90 => Ok(Exemption::P90),
            95 => Ok(Exemption::P95),
            other => Err(format!("exemption_percentile must be 90 or 95, got {other}")),
        }
    }
}

impl From<Exemption> for u8 {
    fn from(e: Exemption) -> u8 {
        match e {
            Exemption::P90 => 90,
            Exemption::P95 => 95,
        }
    }
}

/// A base, an exemption percentile and three marginal rates for the bands
/// P90-P95, P95-P99 and above P99.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaxDesign {
    pub base: WealthBase,
    pub exemption_percentile: Exemption,
    pub rates: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

/// One rule violation found while checking a design.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DesignViolation {
    /// Field within the design, e.g. `rates`.
    pub field: &'static str,
    pub message: String,
}

impl TaxDesign {
    pub fn new(base: WealthBase, exemption: Exemption, rates: [f64; 3]) -> Self {
        TaxDesign { base, exemption_percentile: exemption, rates, label: None }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    /// Label used in output files; falls back to a description of the design.
    pub fn display_label(&self) -> String {
        match &self.label {
            Some(l) => l.clone(),
            None => format!(
                "P{}-{}-{}/{}/{}",
                u8::from(self.exemption_percentile),
                self.base,
                self.rates[0],
                self.rates[1],
                self.rates[2]
            ),
        }
    }

    /// All rule violations; empty when the design is valid.
    pub fn violations(&self) -> Vec<DesignViolation> {
        let mut out = Vec::new();
        let [r1, r2, r3] = self.rates;
        if self.rates.iter().any(|r| !r.is_finite() || *r < 0.0 || *r > 1.0) {
            out.push(DesignViolation { field: "rates", message: "rates must lie in [0, 1]".into() });
        }
        if !(r1 <= r2 && r2 <= r3) {
            out.push(DesignViolation { field: "rates", message: "rates must be nondecreasing".into() });
        }
        if self.exemption_percentile == Exemption::P95 && r1 != 0.0 {
            out.push(DesignViolation {
                field: "rates",
                message: "exemption at P95 requires a zero rate on the P90-P95 band".into(),
            });
        }
        out
    }

    pub fn validate(&self) -> Result<(), TaxError> {
        match self.violations().into_iter().next() {
            None => Ok(()),
            Some(v) => Err(TaxError::InvalidDesign(v.message)),
        }
    }
}

impl fmt::Display for TaxDesign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.display_label())
    }
}

/// The four rate/threshold models crossed with the three bases.
pub fn presets() -> Vec<TaxDesign> {
    let models: [(u8, Exemption, [f64; 3]); 4] = [
        (1, Exemption::P90, [0.01, 0.02, 0.03]),
        (2, Exemption::P90, [0.01, 0.03, 0.05]),
        (3, Exemption::P95, [0.0, 0.02, 0.03]),
        (4, Exemption::P95, [0.0, 0.03, 0.05]),
    ];
    let mut out = Vec::with_capacity(12);
    for base in WealthBase::ALL {
        for (n, exemption, rates) in models {
            out.push(TaxDesign::new(base, exemption, rates).with_label(format!("Model{n}-{base}")));
        }
    }
    out
}

/// Absolute P90/P95/P99 thresholds of a design's base, with its rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandSchedule {
    pub thresholds: [f64; 3],
    pub rates: [f64; 3],
}

impl BandSchedule {
    pub fn new(thresholds: [f64; 3], rates: [f64; 3]) -> Self {
        BandSchedule { thresholds, rates }
    }

    /// Tax owed on a base value. Negative values owe nothing.
    pub fn liability(&self, value: f64) -> f64 {
        liability(value, self)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TaxError {
    #[error("population is empty")]
    EmptyPopulation,
    #[error("invalid design: {0}")]
    InvalidDesign(String),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

/// How band thresholds are obtained when a design is run over several implicates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// Each implicate uses its own quantiles.
    #[default]
    PerImplicate,
    /// Every implicate uses the thresholds resolved on implicate 1.
    SharedFromFirst,
}

pub fn base_series(pop: &Population, base: WealthBase) -> Result<WeightedSeries, TaxError> {
    if pop.is_empty() {
        return Err(TaxError::EmptyPopulation);
    }
    Ok(WeightedSeries::new(pop.base_values(base), pop.weights())?)
}

/// Thresholds are weighted quantiles of the design's own base over the whole
/// pooled population (all countries together).
pub fn resolve(design: &TaxDesign, pop: &Population) -> Result<BandSchedule, TaxError> {
    let s = base_series(pop, design.base)?;
    let mut thresholds = [0.0; 3];
    for (t, p) in thresholds.iter_mut().zip([0.90, 0.95, 0.99]) {
        *t = weighted_quantile(&s, p)?;
    }
    Ok(BandSchedule { thresholds, rates: design.rates })
}

pub fn liability(value: f64, sched: &BandSchedule) -> f64 {
    let [t90, t95, t99] = sched.thresholds;
    let [r1, r2, r3] = sched.rates;
    r1 * (value.min(t95) - t90).max(0.0)
        + r2 * (value.min(t99) - t95).max(0.0)
        + r3 * (value - t99).max(0.0)
}

/// Per-record liabilities of one implicate.
pub fn liabilities(pop: &Population, base: WealthBase, sched: &BandSchedule) -> Vec<f64> {
    pop.records().iter().map(|r| liability(r.wealth_base(base), sched)).collect()
}

pub fn implicate_revenue(pop: &Population, base: WealthBase, sched: &BandSchedule) -> f64 {
    let due: Vec<f64> = pop
        .records()
        .iter()
        .map(|r| r.weight * liability(r.wealth_base(base), sched))
        .collect();
    pairwise_sum(&due)
}

/// Schedules for each implicate under the given threshold mode.
pub fn resolve_all(
    ds: &MultiImplicateDataset,
    design: &TaxDesign,
    mode: ThresholdMode,
) -> Result<Vec<BandSchedule>, TaxError> {
    match mode {
        ThresholdMode::PerImplicate => ds.implicates().iter().map(|p| resolve(design, p)).collect(),
        ThresholdMode::SharedFromFirst => {
            let first = resolve(design, &ds.implicates()[0])?;
            Ok(vec![first; ds.implicates().len()])
        }
    }
}

/// Mean over implicates of the weighted revenue.
pub fn revenue(ds: &MultiImplicateDataset, design: &TaxDesign) -> Result<f64, TaxError> {
    revenue_with(ds, design, ThresholdMode::PerImplicate)
}

pub fn revenue_with(ds: &MultiImplicateDataset, design: &TaxDesign, mode: ThresholdMode) -> Result<f64, TaxError> {
    let schedules = resolve_all(ds, design, mode)?;
    let per: Vec<f64> = ds
        .implicates()
        .par_iter()
        .zip(schedules.par_iter())
        .map(|(pop, sched)| implicate_revenue(pop, design.base, sched))
        .collect();
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}
