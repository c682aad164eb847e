//! Ranking metrics: AUC via rank statistic, session-weighted grouped AUC, and
//! the Mann-Whitney U test with a normal approximation.

use std::collections::BTreeMap;

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{GsvrError, Result};

/// Scores with labels and grouping keys for grouped metrics.
#[derive(Debug, Clone, Default)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    /// Session group per impression (e.g. user and session combined).
    pub group_ids: Vec<u64>,
    /// Raw scenario id per impression, for per-scenario reporting.
    pub scenario_ids: Vec<u64>,
}

impl ScoredSet {
    pub fn push(&mut self, score: f64, label: u8, group: u64, scenario: u64) {
        self.scores.push(score);
        self.labels.push(label);
        self.group_ids.push(group);
        self.scenario_ids.push(scenario);
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Impressions belonging to one scenario.
    pub fn filter_scenario(&self, scenario: u64) -> ScoredSet {
        let mut out = ScoredSet::default();
        for i in 0..self.len() {
            if self.scenario_ids[i] == scenario {
                out.push(self.scores[i], self.labels[i], self.group_ids[i], scenario);
            }
        }
        out
    }
}

/// Probability that a random positive outranks a random negative, ties
/// counted half. Rank-statistic computation, O(n log n).
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    assert_eq!(scores.len(), labels.len());
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(GsvrError::UndefinedMetric(format!(
            "AUC needs both classes ({positives} positives, {negatives} negatives)"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    // Average ranks over tie groups (1-based ranks).
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let np = positives as f64;
    let nn = negatives as f64;
    Ok((rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn))
}

/// Session-weighted AUC: per-group AUC over groups containing both classes,
/// averaged with impression-count weights. Groups lacking both classes are
/// excluded from numerator and denominator.
pub fn s_gauc(set: &ScoredSet) -> Result<f64> {
    let mut groups: BTreeMap<u64, (Vec<f64>, Vec<u8>)> = BTreeMap::new();
    for i in 0..set.len() {
        let entry = groups.entry(set.group_ids[i]).or_default();
        entry.0.push(set.scores[i]);
        entry.1.push(set.labels[i]);
    }
    let mut weighted = 0.0;
    let mut weight_total = 0.0;
    for (scores, labels) in groups.values() {
        if let Ok(a) = auc(scores, labels) {
            let w = scores.len() as f64;
            weighted += w * a;
            weight_total += w;
        }
    }
    if weight_total == 0.0 {
        return Err(GsvrError::UndefinedMetric(
            "no session group contains both classes".to_string(),
        ));
    }
    Ok(weighted / weight_total)
}

/// Mann-Whitney U statistic for sample a (wins plus half-ties over all pairs)
/// and a two-sided p-value from the normal approximation with tie and
/// continuity corrections.
pub fn mann_whitney_u(sample_a: &[f64], sample_b: &[f64]) -> (f64, f64) {
    assert!(!sample_a.is_empty() && !sample_b.is_empty());
    let n1 = sample_a.len() as f64;
    let n2 = sample_b.len() as f64;
    let n = n1 + n2;

    // Rank the pooled sample with average ranks for ties.
    let mut pooled: Vec<(f64, bool)> = sample_a
        .iter()
        .map(|&v| (v, true))
        .chain(sample_b.iter().map(|&v| (v, false)))
        .collect();
    pooled.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut rank_sum_a = 0.0;
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j + 1 < pooled.len() && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        if t > 1.0 {
            tie_term += t * t * t - t;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for p in &pooled[i..=j] {
            if p.1 {
                rank_sum_a += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_a - n1 * (n1 + 1.0) / 2.0;

    let mean_u = n1 * n2 / 2.0;
    let var_u = n1 * n2 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if var_u <= 0.0 {
        // All observations tied: no evidence of a difference.
        return (u, 1.0);
    }
    // Continuity correction: shrink the deviation by 1/2, floored at zero.
    let z = ((u - mean_u).abs() - 0.5).max(0.0) / var_u.sqrt();
    let normal = Normal::new(0.0, 1.0).unwrap();
    let p = 2.0 * (1.0 - normal.cdf(z));
    (u, p.clamp(0.0, 1.0))
}

/// Per-scenario slice of a metrics report. Undefined metrics stay `None`
/// rather than silently reading as zero.
#[derive(Debug, Clone, Serialize)]
pub struct ScenarioMetrics {
    pub scenario: u64,
    pub count: usize,
    pub auc: Option<f64>,
    pub s_gauc: Option<f64>,
}

/// One evaluation snapshot; serializes as a single structured line.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub epoch: usize,
    pub split: String,
    pub count: usize,
    pub auc: Option<f64>,
    pub s_gauc: Option<f64>,
    pub scenarios: Vec<ScenarioMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<crate::model::LossBreakdown>,
}

impl MetricsReport {
    /// Compute overall and per-scenario metrics from scored impressions.
    /// Scenario ids in the report are raw ids, in ascending order.
    pub fn from_scores(epoch: usize, split: &str, set: &ScoredSet) -> MetricsReport {
        let mut scenario_ids: Vec<u64> = set.scenario_ids.clone();
        scenario_ids.sort_unstable();
        scenario_ids.dedup();
        let scenarios = scenario_ids
            .into_iter()
            .map(|sid| {
                let sub = set.filter_scenario(sid);
                ScenarioMetrics {
                    scenario: sid,
                    count: sub.len(),
                    auc: auc(&sub.scores, &sub.labels).ok(),
                    s_gauc: s_gauc(&sub).ok(),
                }
            })
            .collect();
        MetricsReport {
            epoch,
            split: split.to_string(),
            count: set.len(),
            auc: auc(&set.scores, &set.labels).ok(),
            s_gauc: s_gauc(set).ok(),
            scenarios,
            loss: None,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}
