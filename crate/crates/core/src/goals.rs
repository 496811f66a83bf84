//! Post-tax populations and the four goal criteria: redistribution, extreme
//! wealth, rent extraction (financial and investment-property wealth) and
//! emissions, plus the cross-design radar normalisation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Asset, HouseholdRecord, MultiImplicateDataset, Population, WealthBase};
use crate::stats::{self, pairwise_sum, top_share, weighted_quantile, StatsError, WeightedSeries};
use crate::tax::{self, BandSchedule, TaxDesign, TaxError, ThresholdMode};

/// Absolute extreme-wealth line in EUR.
pub const EXTREME_WEALTH_LINE: f64 = 8_900_000.0;

/// Wealth-inequality elasticity of consumption-based CO2 emissions.
pub const CO2_ELASTICITY: f64 = 0.795;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GoalError {
    #[error("property base needs investment-property shares by wealth group")]
    MissingDecileShares,
    #[error("top-10% share must be positive, got {0}")]
    NonPositiveShare(f64),
    #[error("no designs to compare")]
    NoDesigns,
    #[error("populations are not aligned")]
    Misaligned,
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Tax(#[from] TaxError),
}

/// A population after tax, with what each household paid.
#[derive(Debug, Clone, PartialEq)]
pub struct Taxed {
    pub post: Population,
    pub liabilities: Vec<f64>,
    /// Financial and investment-property wealth each household gave up.
    pub fip_reduction: Vec<f64>,
}

/// Deducts each household's liability from the assets that make up the
/// design's base, proportionally to their holdings. A net-wealth tax thus
/// keeps the portfolio composition constant.
pub fn apply_tax(pop: &Population, design: &TaxDesign, sched: &BandSchedule) -> Result<Taxed, GoalError> {
    let n = pop.len();
    let mut liabilities = Vec::with_capacity(n);
    let mut fip_reduction = Vec::with_capacity(n);
    let mut records = Vec::with_capacity(n);
    for r in pop.records() {
        let due = tax::liability(r.wealth_base(design.base), sched);
        let (post, fip_cut) = pay(r, design.base, due);
        liabilities.push(due);
        fip_reduction.push(fip_cut);
        records.push(post);
    }
    Ok(Taxed { post: pop.with_records(records).map_err(|_| GoalError::Misaligned)?, liabilities, fip_reduction })
}

fn pay(r: &HouseholdRecord, base: WealthBase, due: f64) -> (HouseholdRecord, f64) {
    let mut out = r.clone();
    if due == 0.0 {
        return (out, 0.0);
    }
    let in_base = |a: Asset| match base {
        WealthBase::Net => true,
        WealthBase::Fip => a.is_fip(),
        WealthBase::Property => a.is_property(),
    };
    let pool: f64 = Asset::ALL.into_iter().filter(|a| in_base(*a)).map(|a| r.assets.get(a)).sum();
    if pool <= 0.0 {
        // only reachable through a zero-threshold schedule on a debtor; book
        // the payment as new debt so net wealth still falls by `due`
        out.liabilities += due;
        return (out, 0.0);
    }
    let mut fip_cut = 0.0;
    for a in Asset::ALL.into_iter().filter(|a| in_base(*a)) {
        let cut = due * r.assets.get(a) / pool;
        *out.assets.get_mut(a) -= cut;
        if a.is_fip() {
            fip_cut += cut;
        }
    }
    (out, fip_cut)
}

fn net_series(pop: &Population) -> Result<WeightedSeries, GoalError> {
    Ok(WeightedSeries::new(pop.base_values(WealthBase::Net), pop.weights())?)
}

/// Reduction in the net-wealth share of the top `fraction`, in percentage points.
pub fn share_reduction_pp(pre: &Population, post: &Population, fraction: f64) -> Result<f64, GoalError> {
    Ok(100.0 * (top_share(&net_series(pre)?, fraction)? - top_share(&net_series(post)?, fraction)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Redistribution {
    pub top10_share_pre: f64,
    pub top10_share_post: f64,
    pub top1_share_pre: f64,
    pub top1_share_post: f64,
    pub delta_top10_pp: f64,
    pub delta_top1_pp: f64,
    /// `None` when nobody pays (the index is undefined).
    pub kakwani: Option<f64>,
}

pub fn goal1_redistribution(pre: &Population, post: &Population, liabilities: &[f64]) -> Result<Redistribution, GoalError> {
    if pre.len() != post.len() || liabilities.len() != pre.len() {
        return Err(GoalError::Misaligned);
    }
    let before = net_series(pre)?;
    let after = net_series(post)?;
    let top10_share_pre = top_share(&before, 0.10)?;
    let top10_share_post = top_share(&after, 0.10)?;
    let top1_share_pre = top_share(&before, 0.01)?;
    let top1_share_post = top_share(&after, 0.01)?;
    let kakwani = if liabilities.iter().any(|l| *l > 0.0) {
        let tax = before.with_values(liabilities.to_vec())?;
        Some(stats::kakwani(&tax, &before)?)
    } else {
        None
    };
    Ok(Redistribution {
        top10_share_pre,
        top10_share_post,
        top1_share_pre,
        top1_share_post,
        delta_top10_pp: 100.0 * (top10_share_pre - top10_share_post),
        delta_top1_pp: 100.0 * (top1_share_pre - top1_share_post),
        kakwani,
    })
}

/// Weighted household counts above the extreme-wealth lines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtremeWealth {
    pub count_above_abs_pre: f64,
    pub count_above_abs_post: f64,
    pub count_above_p99_pre: f64,
    pub count_above_p99_post: f64,
    /// Pre-tax P99 of net wealth; used as the relative line before and after.
    pub p99_line: f64,
}

impl ExtremeWealth {
    pub fn delta_abs(&self) -> f64 {
        self.count_above_abs_pre - self.count_above_abs_post
    }

    pub fn delta_p99(&self) -> f64 {
        self.count_above_p99_pre - self.count_above_p99_post
    }
}

fn weight_above(pop: &Population, line: f64) -> f64 {
    let w: Vec<f64> = pop.records().iter().filter(|r| r.net_wealth() > line).map(|r| r.weight).collect();
    pairwise_sum(&w)
}

pub fn goal2_extreme_wealth(pre: &Population, post: &Population) -> Result<ExtremeWealth, GoalError> {
    if pre.len() != post.len() {
        return Err(GoalError::Misaligned);
    }
    let p99_line = weighted_quantile(&net_series(pre)?, 0.99)?;
    Ok(ExtremeWealth {
        count_above_abs_pre: weight_above(pre, EXTREME_WEALTH_LINE),
        count_above_abs_post: weight_above(post, EXTREME_WEALTH_LINE),
        count_above_p99_pre: weight_above(pre, p99_line),
        count_above_p99_post: weight_above(post, p99_line),
        p99_line,
    })
}

/// Investment property as a share of total property wealth, for net-wealth
/// deciles 1-10 (the tenth without the top percentile) and the top percentile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecileShares(pub [f64; 11]);

/// Net-wealth cut points P10..P90 and P99 of a population.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WealthGroups {
    deciles: [f64; 9],
    p99: f64,
}

impl WealthGroups {
    pub fn of(pop: &Population) -> Result<Self, GoalError> {
        let s = net_series(pop)?;
        let mut deciles = [0.0; 9];
        for (k, d) in deciles.iter_mut().enumerate() {
            *d = weighted_quantile(&s, (k + 1) as f64 / 10.0)?;
        }
        Ok(WealthGroups { deciles, p99: weighted_quantile(&s, 0.99)? })
    }

    /// Group index 0..=9 for deciles, 10 for the top percentile.
    pub fn group(&self, net_wealth: f64) -> usize {
        if net_wealth > self.p99 {
            return 10;
        }
        self.deciles.iter().filter(|&&c| net_wealth > c).count()
    }
}

impl DecileShares {
    pub fn from_population(pop: &Population) -> Result<Self, GoalError> {
        let groups = WealthGroups::of(pop)?;
        let mut inv = [0.0; 11];
        let mut total = [0.0; 11];
        for r in pop.records() {
            let g = groups.group(r.net_wealth());
            inv[g] += r.weight * r.assets.investment_property;
            total[g] += r.weight * r.property_wealth();
        }
        let mut shares = [0.0; 11];
        for g in 0..11 {
            shares[g] = if total[g] > 0.0 { inv[g] / total[g] } else { 0.0 };
        }
        Ok(DecileShares(shares))
    }

    pub fn validate(&self) -> Result<(), GoalError> {
        if self.0.iter().all(|s| (0.0..=1.0).contains(s)) {
            Ok(())
        } else {
            Err(GoalError::MissingDecileShares)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RentExtraction {
    pub fip_wealth_pre: f64,
    pub fip_wealth_post: f64,
    /// `100 * (post - pre) / pre`; never positive.
    pub fip_change_pct: f64,
}

/// Change in aggregate financial and investment-property wealth.
///
/// * net base: each household gives up its liability times the FIP share of
///   its gross wealth (constant portfolio composition);
/// * FIP base: the whole revenue comes out of FIP wealth;
/// * property base: each household's liability times the investment-property
///   share of property wealth in its wealth group, with the shares taken
///   from the uncorrected survey.
pub fn goal3_rent(
    pre: &Population,
    taxed: &Taxed,
    design: &TaxDesign,
    revenue: f64,
    decile_shares: Option<&DecileShares>,
) -> Result<RentExtraction, GoalError> {
    let fip: Vec<f64> = pre.records().iter().map(|r| r.weight * r.fip_wealth()).collect();
    let fip_wealth_pre = pairwise_sum(&fip);
    let reduction = match design.base {
        WealthBase::Fip => revenue,
        WealthBase::Net => {
            let cut: Vec<f64> = pre.records().iter().zip(&taxed.fip_reduction).map(|(r, c)| r.weight * c).collect();
            pairwise_sum(&cut)
        }
        WealthBase::Property => {
            let shares = decile_shares.ok_or(GoalError::MissingDecileShares)?;
            shares.validate()?;
            let groups = WealthGroups::of(pre)?;
            let cut: Vec<f64> = pre
                .records()
                .iter()
                .zip(&taxed.liabilities)
                .map(|(r, l)| r.weight * l * shares.0[groups.group(r.net_wealth())])
                .collect();
            pairwise_sum(&cut)
        }
    };
    let fip_wealth_post = fip_wealth_pre - reduction;
    let fip_change_pct = if fip_wealth_pre > 0.0 { -100.0 * reduction / fip_wealth_pre } else { 0.0 };
    Ok(RentExtraction { fip_wealth_pre, fip_wealth_post, fip_change_pct })
}

/// Percent change in CO2 emissions implied by a change in the top-10% share,
/// applying the elasticity to the relative change of that share.
pub fn goal4_emissions(top10_pre: f64, top10_post: f64) -> Result<f64, GoalError> {
    if !(top10_pre > 0.0) {
        return Err(GoalError::NonPositiveShare(top10_pre));
    }
    Ok(-CO2_ELASTICITY * 100.0 * (top10_pre - top10_post) / top10_pre)
}

/// Goal criteria and revenue for one design, averaged over implicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalReport {
    pub revenue: f64,
    pub top10_share_pre: f64,
    pub top10_share_post: f64,
    pub top1_share_pre: f64,
    pub top1_share_post: f64,
    pub delta_top10_pp: f64,
    pub delta_top1_pp: f64,
    pub kakwani: Option<f64>,
    pub count_above_abs_pre: f64,
    pub count_above_abs_post: f64,
    pub count_above_p99_pre: f64,
    pub count_above_p99_post: f64,
    pub fip_wealth_pre: f64,
    pub fip_wealth_post: f64,
    pub fip_change_pct: f64,
    pub co2_change: f64,
}

impl GoalReport {
    pub fn delta_count_abs(&self) -> f64 {
        self.count_above_abs_pre - self.count_above_abs_post
    }

    pub fn delta_count_p99(&self) -> f64 {
        self.count_above_p99_pre - self.count_above_p99_post
    }

    /// Field-wise mean. Kakwani is defined only if defined in every input.
    pub fn mean(reports: &[GoalReport]) -> Option<GoalReport> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let avg = |f: fn(&GoalReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let kakwani = reports
            .iter()
            .map(|r| r.kakwani)
            .collect::<Option<Vec<f64>>>()
            .map(|k| k.iter().sum::<f64>() / n);
        Some(GoalReport {
            revenue: avg(|r| r.revenue),
            top10_share_pre: avg(|r| r.top10_share_pre),
            top10_share_post: avg(|r| r.top10_share_post),
            top1_share_pre: avg(|r| r.top1_share_pre),
            top1_share_post: avg(|r| r.top1_share_post),
            delta_top10_pp: avg(|r| r.delta_top10_pp),
            delta_top1_pp: avg(|r| r.delta_top1_pp),
            kakwani,
            count_above_abs_pre: avg(|r| r.count_above_abs_pre),
            count_above_abs_post: avg(|r| r.count_above_abs_post),
            count_above_p99_pre: avg(|r| r.count_above_p99_pre),
            count_above_p99_post: avg(|r| r.count_above_p99_post),
            fip_wealth_pre: avg(|r| r.fip_wealth_pre),
            fip_wealth_post: avg(|r| r.fip_wealth_post),
            fip_change_pct: avg(|r| r.fip_change_pct),
            co2_change: avg(|r| r.co2_change),
        })
    }
}

/// All four goals for one implicate under a resolved schedule.
pub fn evaluate_implicate(
    pop: &Population,
    design: &TaxDesign,
    sched: &BandSchedule,
    decile_shares: Option<&DecileShares>,
) -> Result<GoalReport, GoalError> {
    let taxed = apply_tax(pop, design, sched)?;
    let paid: Vec<f64> = pop.records().iter().zip(&taxed.liabilities).map(|(r, l)| r.weight * l).collect();
    let revenue = pairwise_sum(&paid);
    let g1 = goal1_redistribution(pop, &taxed.post, &taxed.liabilities)?;
    let g2 = goal2_extreme_wealth(pop, &taxed.post)?;
    let g3 = goal3_rent(pop, &taxed, design, revenue, decile_shares)?;
    let co2_change = goal4_emissions(g1.top10_share_pre, g1.top10_share_post)?;
    Ok(GoalReport {
        revenue,
        top10_share_pre: g1.top10_share_pre,
        top10_share_post: g1.top10_share_post,
        top1_share_pre: g1.top1_share_pre,
        top1_share_post: g1.top1_share_post,
        delta_top10_pp: g1.delta_top10_pp,
        delta_top1_pp: g1.delta_top1_pp,
        kakwani: g1.kakwani,
        count_above_abs_pre: g2.count_above_abs_pre,
        count_above_abs_post: g2.count_above_abs_post,
        count_above_p99_pre: g2.count_above_p99_pre,
        count_above_p99_post: g2.count_above_p99_post,
        fip_wealth_pre: g3.fip_wealth_pre,
        fip_wealth_post: g3.fip_wealth_post,
        fip_change_pct: g3.fip_change_pct,
        co2_change,
    })
}

/// Evaluates a design on every implicate and averages. `decile_shares` holds
/// one entry per implicate and is only consulted for the property base.
pub fn evaluate(
    ds: &MultiImplicateDataset,
    design: &TaxDesign,
    mode: ThresholdMode,
    decile_shares: &[DecileShares],
) -> Result<(GoalReport, Vec<BandSchedule>), GoalError> {
    let schedules = tax::resolve_all(ds, design, mode)?;
    let per = ds
        .implicates()
        .iter()
        .enumerate()
        .map(|(k, pop)| evaluate_implicate(pop, design, &schedules[k], decile_shares.get(k)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((GoalReport::mean(&per).expect("five implicates"), schedules))
}

/// Criterion-level and goal-level scores of one design, each in [0, 100].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadarRow {
    pub label: String,
    pub revenue: f64,
    pub goal1: f64,
    pub goal2: f64,
    pub goal3: f64,
    pub goal4: f64,
    pub criteria: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadarScores {
    pub rows: Vec<RadarRow>,
    /// Criteria on which every design scored zero.
    pub all_zero: Vec<String>,
}

/// Criterion names in radar order.
pub const RADAR_CRITERIA: [&str; 8] = [
    "revenue",
    "delta_top10_pp",
    "delta_top1_pp",
    "kakwani",
    "delta_count_abs",
    "delta_count_p99",
    "fip_change_pct",
    "co2_change",
];

fn criterion(r: &GoalReport, name: &str) -> f64 {
    match name {
        "revenue" => r.revenue.abs(),
        "delta_top10_pp" => r.delta_top10_pp.abs(),
        "delta_top1_pp" => r.delta_top1_pp.abs(),
        // signed index: only progressive designs score
        "kakwani" => r.kakwani.unwrap_or(0.0).max(0.0),
        "delta_count_abs" => r.delta_count_abs().abs(),
        "delta_count_p99" => r.delta_count_p99().abs(),
        "fip_change_pct" => r.fip_change_pct.abs(),
        "co2_change" => r.co2_change.abs(),
        _ => unreachable!("unknown radar criterion {name}"),
    }
}

/// Indexes every criterion against the best design (which scores 100) and
/// averages criteria within goals 1 and 2.
pub fn radar(reports: &[(String, GoalReport)]) -> Result<RadarScores, GoalError> {
    if reports.is_empty() {
        return Err(GoalError::NoDesigns);
    }
    let mut all_zero = Vec::new();
    let mut scores: Vec<BTreeMap<String, f64>> = vec![BTreeMap::new(); reports.len()];
    for name in RADAR_CRITERIA {
        let values: Vec<f64> = reports.iter().map(|(_, r)| criterion(r, name)).collect();
        let best = values.iter().copied().fold(0.0, f64::max);
        if best <= 0.0 {
            all_zero.push(name.to_string());
        }
        for (row, v) in scores.iter_mut().zip(values) {
            let s = if best > 0.0 { 100.0 * v / best } else { 0.0 };
            row.insert(name.to_string(), s);
        }
    }
    let rows = reports
        .iter()
        .zip(scores)
        .map(|((label, _), c)| RadarRow {
            label: label.clone(),
            revenue: c["revenue"],
            goal1: (c["delta_top10_pp"] + c["delta_top1_pp"] + c["kakwani"]) / 3.0,
            goal2: (c["delta_count_abs"] + c["delta_count_p99"]) / 2.0,
            goal3: c["fip_change_pct"],
            goal4: c["co2_change"],
            criteria: c,
        })
        .collect();
    Ok(RadarScores { rows, all_zero })
}
