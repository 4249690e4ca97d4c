//! Per-K* statistics over replications.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::OutlierRule;
use crate::sweep::MetricsRow;

const IQR_FACTOR: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub k_star: usize,
    pub runs: usize,
    /// Runs that hit the target within the budget.
    pub reached: usize,
    /// Reached runs removed by the outlier rule.
    pub dropped: usize,
    /// No run reached the target.
    pub unreachable: bool,
    pub median_queries: Option<f64>,
    pub mean_queries: Option<f64>,
    pub std_queries: Option<f64>,
    pub median_rounds: Option<f64>,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(quantile(&v, 0.5))
}

pub fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    Some(values.iter().sum::<f64>() / values.len() as f64)
}

/// Sample standard deviation; 0 for a single value.
pub fn std_dev(values: &[f64]) -> Option<f64> {
    let m = mean(values)?;
    if values.len() < 2 {
        return Some(0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    Some((ss / (values.len() - 1) as f64).sqrt())
}

/// Values kept by the rule, in input order.
pub fn remove_outliers(values: &[f64], rule: OutlierRule) -> Vec<f64> {
    match rule {
        OutlierRule::None => values.to_vec(),
        OutlierRule::Iqr => {
            if values.len() < 4 {
                return values.to_vec();
            }
            let mut sorted = values.to_vec();
            sorted.sort_by(f64::total_cmp);
            let q1 = quantile(&sorted, 0.25);
            let q3 = quantile(&sorted, 0.75);
            let iqr = q3 - q1;
            let (lo, hi) = (q1 - IQR_FACTOR * iqr, q3 + IQR_FACTOR * iqr);
            values.iter().copied().filter(|v| *v >= lo && *v <= hi).collect()
        }
    }
}

pub fn summarize(rows: &[MetricsRow], rule: OutlierRule) -> Vec<GroupSummary> {
    let mut groups: BTreeMap<usize, Vec<&MetricsRow>> = BTreeMap::new();
    for r in rows {
        groups.entry(r.k_star).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(k_star, group)| {
            let queries: Vec<f64> = group
                .iter()
                .filter_map(|r| r.queries_to_target.map(|q| q as f64))
                .collect();
            let rounds: Vec<f64> = group
                .iter()
                .filter_map(|r| r.rounds_to_target.map(|q| q as f64))
                .collect();
            let kept = remove_outliers(&queries, rule);
            GroupSummary {
                k_star,
                runs: group.len(),
                reached: queries.len(),
                dropped: queries.len() - kept.len(),
                unreachable: queries.is_empty(),
                median_queries: median(&kept),
                mean_queries: mean(&kept),
                std_queries: std_dev(&kept),
                median_rounds: median(&rounds),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_values() {
        let v = vec![42.0; 6];
        assert_eq!(remove_outliers(&v, OutlierRule::Iqr).len(), 6);
        assert_eq!(std_dev(&v), Some(0.0));
        assert_eq!(median(&v), Some(42.0));
    }

    #[test]
    fn extreme_point_dropped() {
        let mut v: Vec<f64> = (0..19).map(|i| 100.0 + i as f64).collect();
        let med = median(&v).unwrap();
        v.push(100.0 * med);
        let kept = remove_outliers(&v, OutlierRule::Iqr);
        assert_eq!(kept.len(), 19);
        assert_eq!(remove_outliers(&v, OutlierRule::None).len(), 20);
    }

    #[test]
    fn quantiles_interpolate() {
        let s = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&s, 0.5), 2.5);
        assert_eq!(quantile(&s, 0.25), 1.75);
        assert_eq!(quantile(&s, 1.0), 4.0);
    }

    #[test]
    fn sample_std() {
        assert!((std_dev(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]).unwrap() - 2.138089935299395).abs() < 1e-12);
    }
}
