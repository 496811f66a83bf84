//! Weighted inequality statistics over household microdata.
//!
//! Gini and concentration indices share one estimator: one minus twice the
//! trapezoid area under the piecewise-linear (concentration) Lorenz curve.
//! Keeping the two on the same footing makes their difference, the Kakwani
//! index, exactly zero for a proportional tax.

use std::cmp::Ordering;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("series is empty")]
    EmptySeries,
    #[error("probability {0} outside [0, 1]")]
    BadProbability(f64),
    #[error("weighted total is zero")]
    ZeroTotal,
    #[error("total payments are zero")]
    ZeroTotalPayments,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("weight at position {0} is not strictly positive")]
    NonPositiveWeight(usize),
}

/// Values with strictly positive survey weights, in arbitrary order.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSeries {
    values: Vec<f64>,
    weights: Vec<f64>,
}

impl WeightedSeries {
    pub fn new(values: Vec<f64>, weights: Vec<f64>) -> Result<Self, StatsError> {
        if values.len() != weights.len() {
            return Err(StatsError::LengthMismatch(values.len(), weights.len()));
        }
        if let Some(i) = weights.iter().position(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(StatsError::NonPositiveWeight(i));
        }
        Ok(WeightedSeries { values, weights })
    }

    pub fn unweighted(values: Vec<f64>) -> Self {
        let weights = vec![1.0; values.len()];
        WeightedSeries { values, weights }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        pairwise_sum(&self.weights)
    }

    pub fn weighted_total(&self) -> f64 {
        let products: Vec<f64> = self.values.iter().zip(&self.weights).map(|(v, w)| v * w).collect();
        pairwise_sum(&products)
    }

    /// Same weights, new values (e.g. post-tax wealth of the same households).
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self, StatsError> {
        WeightedSeries::new(values, self.weights.clone())
    }

    /// Record indices ordered by ascending value; ties keep record order.
    fn ascending_order(&self) -> Vec<usize> {
        order_by(&self.values)
    }
}

fn order_by(keys: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..keys.len()).collect();
    idx.sort_by(|&a, &b| keys[a].partial_cmp(&keys[b]).unwrap_or(Ordering::Equal));
    idx
}

/// Sum with a fixed pairwise reduction tree, so results do not depend on how
/// callers chunk or parallelise upstream work.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const LEAF: usize = 64;
    if xs.len() <= LEAF {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Relative slack when comparing cumulative weights against `p * total`, so
/// that e.g. `0.9 * 100.0` (which is not exactly 90) still hits the 90th unit.
const QUANTILE_SLACK: f64 = 1e-12;

/// Lower weighted quantile: the smallest value whose cumulative weight
/// reaches `p` of the total.
pub fn weighted_quantile(s: &WeightedSeries, p: f64) -> Result<f64, StatsError> {
    if s.is_empty() {
        return Err(StatsError::EmptySeries);
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(StatsError::BadProbability(p));
    }
    let order = s.ascending_order();
    let total = s.total_weight();
    let target = p * total - QUANTILE_SLACK * total;
    let mut cum = 0.0;
    for (k, &i) in order.iter().enumerate() {
        cum += s.weights[i];
        // ties aggregate: only test at the end of a run of equal values
        let last_of_run = order.get(k + 1).is_none_or(|&j| s.values[j] != s.values[i]);
        if last_of_run && cum >= target {
            return Ok(s.values[i]);
        }
    }
    Ok(s.values[*order.last().unwrap()])
}

/// Several quantiles from one sort.
pub fn weighted_quantiles(s: &WeightedSeries, ps: &[f64]) -> Result<Vec<f64>, StatsError> {
    ps.iter().map(|&p| weighted_quantile(s, p)).collect()
}

/// Piecewise-linear Lorenz or concentration curve.
#[derive(Debug, Clone, PartialEq)]
pub struct LorenzCurve {
    /// `(population_share, cumulative_value_share)`, from (0,0) to (1,1).
    pub points: Vec<(f64, f64)>,
}

impl LorenzCurve {
    /// Area under the curve by the trapezoid rule.
    pub fn area(&self) -> f64 {
        let strips: Vec<f64> = self
            .points
            .windows(2)
            .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
            .collect();
        pairwise_sum(&strips)
    }

    /// Linear interpolation at population share `p`.
    pub fn at(&self, p: f64) -> f64 {
        let p = p.clamp(0.0, 1.0);
        let k = self.points.partition_point(|&(x, _)| x < p);
        if k == 0 {
            return self.points[0].1;
        }
        if k >= self.points.len() {
            return self.points.last().unwrap().1;
        }
        let (x0, y0) = self.points[k - 1];
        let (x1, y1) = self.points[k];
        if x1 == x0 {
            return y1;
        }
        y0 + (y1 - y0) * (p - x0) / (x1 - x0)
    }
}

/// Curve of `values` accumulated in the order given by `order`.
fn curve_in_order(values: &[f64], weights: &[f64], order: &[usize]) -> Result<LorenzCurve, StatsError> {
    let total_w: f64 = pairwise_sum(weights);
    let products: Vec<f64> = values.iter().zip(weights).map(|(v, w)| v * w).collect();
    let total_v = pairwise_sum(&products);
    if total_v == 0.0 {
        return Err(StatsError::ZeroTotal);
    }
    let mut points = Vec::with_capacity(order.len() + 1);
    points.push((0.0, 0.0));
    let (mut cw, mut cv) = (0.0, 0.0);
    for &i in order {
        cw += weights[i];
        cv += products[i];
        points.push((cw / total_w, cv / total_v));
    }
    // pin the end point against accumulated rounding
    if let Some(last) = points.last_mut() {
        *last = (1.0, 1.0);
    }
    Ok(LorenzCurve { points })
}

pub fn lorenz_curve(s: &WeightedSeries) -> Result<LorenzCurve, StatsError> {
    if s.is_empty() {
        return Err(StatsError::EmptySeries);
    }
    curve_in_order(&s.values, &s.weights, &s.ascending_order())
}

/// Gini coefficient, `1 - 2 * area` under the Lorenz curve. Negative values are
/// admitted, in which case the result can exceed one.
pub fn gini(s: &WeightedSeries) -> Result<f64, StatsError> {
    Ok(1.0 - 2.0 * lorenz_curve(s)?.area())
}

/// Concentration index of `payments` with households ranked by `ranking`.
/// Ranking ties keep record order (stable sort).
pub fn concentration_index(payments: &WeightedSeries, ranking: &[f64]) -> Result<f64, StatsError> {
    if payments.len() != ranking.len() {
        return Err(StatsError::LengthMismatch(payments.len(), ranking.len()));
    }
    if payments.is_empty() {
        return Err(StatsError::EmptySeries);
    }
    let order = order_by(ranking);
    let curve = curve_in_order(&payments.values, &payments.weights, &order).map_err(|e| match e {
        StatsError::ZeroTotal => StatsError::ZeroTotalPayments,
        other => other,
    })?;
    Ok(1.0 - 2.0 * curve.area())
}

/// Kakwani progressivity index: concentration index of tax payments (ranked
/// by wealth) minus the Gini of wealth. Positive means progressive.
pub fn kakwani(tax: &WeightedSeries, wealth: &WeightedSeries) -> Result<f64, StatsError> {
    if tax.len() != wealth.len() {
        return Err(StatsError::LengthMismatch(tax.len(), wealth.len()));
    }
    let c = concentration_index(tax, &wealth.values)?;
    Ok(c - gini(wealth)?)
}

/// Share of the weighted total held by the richest `top_fraction` of the
/// weighted population. The record straddling the cut contributes the
/// fraction of its weight that falls inside the top group.
pub fn top_share(s: &WeightedSeries, top_fraction: f64) -> Result<f64, StatsError> {
    if s.is_empty() {
        return Err(StatsError::EmptySeries);
    }
    if !(0.0..=1.0).contains(&top_fraction) {
        return Err(StatsError::BadProbability(top_fraction));
    }
    let total_v = s.weighted_total();
    if total_v == 0.0 {
        return Err(StatsError::ZeroTotal);
    }
    let total_w = s.total_weight();
    let budget = top_fraction * total_w;
    let mut order = s.ascending_order();
    order.reverse();
    let mut taken_w = 0.0;
    let mut held = 0.0;
    for i in order {
        let remaining = budget - taken_w;
        if remaining <= 0.0 {
            break;
        }
        let w = s.weights[i].min(remaining);
        held += w * s.values[i];
        taken_w += w;
    }
    Ok(held / total_v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn ws(values: &[f64], weights: &[f64]) -> WeightedSeries {
        WeightedSeries::new(values.to_vec(), weights.to_vec()).unwrap()
    }

    /// Brute-force pairwise Gini: sum_ij w_i w_j |x_i - x_j| / (2 W^2 mu).
    fn pairwise_gini(values: &[f64], weights: &[f64]) -> f64 {
        let w_total: f64 = weights.iter().sum();
        let mean = values.iter().zip(weights).map(|(v, w)| v * w).sum::<f64>() / w_total;
        let mut acc = 0.0;
        for i in 0..values.len() {
            for j in 0..values.len() {
                acc += weights[i] * weights[j] * (values[i] - values[j]).abs();
            }
        }
        acc / (2.0 * w_total * w_total * mean)
    }

    /// Scans cumulative weights in the most literal way possible.
    fn scan_quantile(values: &[f64], weights: &[f64], p: f64) -> f64 {
        let mut distinct: Vec<f64> = values.to_vec();
        distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
        distinct.dedup();
        let total: f64 = weights.iter().sum();
        for v in distinct.iter() {
            let cum: f64 = values.iter().zip(weights).filter(|(x, _)| *x <= v).map(|(_, w)| w).sum();
            if cum >= p * total - 1e-12 * total {
                return *v;
            }
        }
        *distinct.last().unwrap()
    }

    #[test]
    fn quantile_examples() {
        let s = ws(&[10.0, 20.0, 30.0], &[1.0, 1.0, 2.0]);
        assert_eq!(scan_quantile(s.values(), s.weights(), 0.75), 30.0);
        assert_eq!(weighted_quantile(&s, 0.75).unwrap(), 30.0);
        assert_eq!(weighted_quantile(&s, 0.0).unwrap(), 10.0);
        let s = WeightedSeries::unweighted(vec![4.0, 2.0, 3.0, 1.0]);
        assert_eq!(weighted_quantile(&s, 0.5).unwrap(), 2.0);
    }

    #[test]
    fn quantile_errors() {
        let empty = WeightedSeries::unweighted(vec![]);
        assert_eq!(weighted_quantile(&empty, 0.5), Err(StatsError::EmptySeries));
        let s = WeightedSeries::unweighted(vec![1.0]);
        assert_eq!(weighted_quantile(&s, 1.5), Err(StatsError::BadProbability(1.5)));
    }

    #[test]
    fn quantile_hits_round_percentiles() {
        let s = WeightedSeries::unweighted((1..=100).map(f64::from).collect());
        assert_eq!(weighted_quantile(&s, 0.90).unwrap(), 90.0);
        assert_eq!(weighted_quantile(&s, 0.95).unwrap(), 95.0);
        assert_eq!(weighted_quantile(&s, 0.99).unwrap(), 99.0);
    }

    #[test]
    fn gini_examples() {
        assert_eq!(gini(&WeightedSeries::unweighted(vec![5.0; 7])).unwrap(), 0.0);
        assert_relative_eq!(gini(&WeightedSeries::unweighted(vec![0.0, 1.0])).unwrap(), 0.5);
        let four = [1.0, 2.0, 3.0, 4.0];
        assert_relative_eq!(pairwise_gini(&four, &[1.0; 4]), 0.25);
        assert_relative_eq!(gini(&WeightedSeries::unweighted(four.to_vec())).unwrap(), 0.25, epsilon = 1e-15);
    }

    #[test]
    fn gini_zero_total() {
        let s = WeightedSeries::unweighted(vec![-1.0, 1.0]);
        assert_eq!(gini(&s), Err(StatsError::ZeroTotal));
    }

    #[test]
    fn gini_with_negative_values_may_exceed_one() {
        let s = WeightedSeries::unweighted(vec![-5.0, 0.0, 0.0, 6.0]);
        let g = gini(&s).unwrap();
        assert!(g > 1.0);
        assert_relative_eq!(g, pairwise_gini(s.values(), s.weights()), max_relative = 1e-12);
    }

    #[test]
    fn concentration_examples() {
        let wealth = [1.0, 2.0, 3.0, 4.0];
        let pay = WeightedSeries::unweighted(vec![0.0, 0.0, 0.0, 1.0]);
        assert_relative_eq!(concentration_index(&pay, &wealth).unwrap(), 0.75);
        let flat = WeightedSeries::unweighted(vec![3.0; 4]);
        assert_relative_eq!(concentration_index(&flat, &wealth).unwrap(), 0.0, epsilon = 1e-15);
        let prop = WeightedSeries::unweighted(wealth.iter().map(|w| 0.01 * w).collect());
        let g = gini(&WeightedSeries::unweighted(wealth.to_vec())).unwrap();
        assert_relative_eq!(concentration_index(&prop, &wealth).unwrap(), g, epsilon = 1e-15);
    }

    #[test]
    fn concentration_errors() {
        let pay = WeightedSeries::unweighted(vec![0.0, 0.0]);
        assert_eq!(concentration_index(&pay, &[1.0, 2.0]), Err(StatsError::ZeroTotalPayments));
        assert_eq!(concentration_index(&pay, &[1.0]), Err(StatsError::LengthMismatch(2, 1)));
    }

    #[test]
    fn kakwani_examples() {
        let wealth = WeightedSeries::unweighted(vec![1.0, 2.0, 3.0, 4.0]);
        let tax = WeightedSeries::unweighted(vec![0.0, 0.0, 0.0, 1.0]);
        assert_relative_eq!(kakwani(&tax, &wealth).unwrap(), 0.5, epsilon = 1e-15);
        let lump = WeightedSeries::unweighted(vec![10.0; 4]);
        assert_relative_eq!(kakwani(&lump, &wealth).unwrap(), -0.25, epsilon = 1e-15);
    }

    #[test]
    fn top_share_examples() {
        let s = WeightedSeries::unweighted(vec![1.0, 1.0, 1.0, 7.0]);
        assert_relative_eq!(top_share(&s, 0.25).unwrap(), 0.7);
        let flat = WeightedSeries::unweighted(vec![2.0; 10]);
        for f in [0.01, 0.1, 0.33, 0.5] {
            assert_relative_eq!(top_share(&flat, f).unwrap(), f, max_relative = 1e-12);
        }
        assert_eq!(top_share(&WeightedSeries::unweighted(vec![]), 0.1), Err(StatsError::EmptySeries));
    }

    #[test]
    fn top_share_splits_boundary_record() {
        // top 10% of weight 10 is one unit of the weight-2 richest record
        let s = ws(&[1.0, 10.0], &[8.0, 2.0]);
        assert_relative_eq!(top_share(&s, 0.1).unwrap(), 10.0 / 28.0);
    }

    #[test]
    fn lorenz_interpolation() {
        let c = lorenz_curve(&WeightedSeries::unweighted(vec![1.0, 3.0])).unwrap();
        assert_eq!(c.points, vec![(0.0, 0.0), (0.5, 0.25), (1.0, 1.0)]);
        assert_relative_eq!(c.at(0.25), 0.125);
        assert_relative_eq!(c.at(0.75), 0.625);
        assert_eq!(c.at(1.0), 1.0);
    }

    #[test]
    fn pairwise_sum_matches_naive_on_small_input() {
        let xs: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&xs), 499_500.0);
    }

    fn population() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (1usize..60).prop_flat_map(|n| {
            (
                proptest::collection::vec(0.0f64..1e6, n),
                proptest::collection::vec(0.1f64..50.0, n),
            )
        })
    }

    proptest! {
        #[test]
        fn gini_scale_invariant((v, w) in population(), k in 0.01f64..1e3) {
            prop_assume!(v.iter().any(|x| *x > 0.0));
            let s = ws(&v, &w);
            let scaled = s.with_values(v.iter().map(|x| x * k).collect()).unwrap();
            prop_assert!((gini(&s).unwrap() - gini(&scaled).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn gini_matches_pairwise((v, w) in population()) {
            prop_assume!(v.iter().any(|x| *x > 0.0));
            let g = gini(&ws(&v, &w)).unwrap();
            let oracle = pairwise_gini(&v, &w);
            prop_assert!((g - oracle).abs() <= 1e-9 * oracle.abs().max(1e-12));
        }

        #[test]
        fn top_share_monotone((v, w) in population(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
            prop_assume!(v.iter().any(|x| *x > 0.0));
            let s = ws(&v, &w);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(top_share(&s, lo).unwrap() <= top_share(&s, hi).unwrap() + 1e-12);
            prop_assert!((top_share(&s, 1.0).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn equal_weight_quantile_is_unweighted_lower_quantile(
            v in proptest::collection::vec(-1e3f64..1e3, 1..80),
            p in 0.0f64..=1.0,
            w in 0.5f64..20.0,
        ) {
            let s = ws(&v, &vec![w; v.len()]);
            let mut sorted = v.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let n = sorted.len();
            // smallest k with k/n >= p
            let k = ((p * n as f64) - 1e-12 * n as f64).ceil().max(1.0) as usize;
            prop_assert_eq!(weighted_quantile(&s, p).unwrap(), sorted[k.min(n) - 1]);
        }

        #[test]
        fn quantile_matches_scan((v, w) in population(), p in 0.0f64..=1.0) {
            let s = ws(&v, &w);
            prop_assert_eq!(weighted_quantile(&s, p).unwrap(), scan_quantile(&v, &w, p));
        }
    }
}
