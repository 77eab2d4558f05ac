//! Benchmark scoring: R@K, mAP@K, subset recall Rs@K, and suite-level
//! aggregation with per-category macro averages.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::EvalCase;
use crate::encoder::EncoderParams;
use crate::retrieval::{retrieve, Index, QueryBundle, RankedList, RetrievalError, RetrievalMode};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("case {case}: subset recall requested but the case has no subset_ids")]
    MissingSubset { case: usize },
    #[error("gold ids must be a subset of the candidate subset")]
    GoldOutsideSubset,
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

impl MetricsError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        MetricsError::Invalid(msg.into())
    }
}

/// 1 if any gold id appears in the top K, else 0.
pub fn recall_at_k(ranking: &RankedList, gold: &BTreeSet<String>, k: usize) -> f64 {
    let hit = ranking
        .ids()
        .take(k)
        .any(|id| gold.contains(id));
    if hit {
        1.0
    } else {
        0.0
    }
}

/// Truncated average precision: `(1/min(|gold|, K)) * sum of precision@r`
/// over gold hits at ranks `r <= K`.
pub fn map_at_k(ranking: &RankedList, gold: &BTreeSet<String>, k: usize) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, id) in ranking.ids().take(k).enumerate() {
        if gold.contains(id) {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    sum / gold.len().min(k) as f64
}

/// Filters the ranking to subset members (order preserved), then applies
/// recall. `gold` must be contained in `subset`.
pub fn subset_recall_at_k(
    ranking: &RankedList,
    gold: &BTreeSet<String>,
    subset: &BTreeSet<String>,
    k: usize,
) -> Result<f64, MetricsError> {
    if !gold.is_subset(subset) {
        return Err(MetricsError::GoldOutsideSubset);
    }
    let hit = ranking
        .ids()
        .filter(|id| subset.contains(*id))
        .take(k)
        .any(|id| gold.contains(id));
    Ok(if hit { 1.0 } else { 0.0 })
}

/// Which metrics to compute, by cutoff.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricSpec {
    pub recall: Vec<usize>,
    pub map: Vec<usize>,
    pub subset_recall: Vec<usize>,
}

impl Default for MetricSpec {
    fn default() -> Self {
        Self {
            recall: vec![1, 5, 10, 50],
            map: vec![5, 10, 25, 50],
            subset_recall: vec![1, 2, 3],
        }
    }
}

impl MetricSpec {
    /// Parses `"R@1,R@5,mAP@5,Rs@1"`.
    pub fn parse(spec: &str) -> Result<Self, MetricsError> {
        let mut out = Self {
            recall: Vec::new(),
            map: Vec::new(),
            subset_recall: Vec::new(),
        };
        for part in spec.split(',').filter(|p| !p.trim().is_empty()) {
            let part = part.trim();
            let (kind, k) = part
                .split_once('@')
                .ok_or_else(|| MetricsError::invalid(format!("bad metric {part:?}")))?;
            let k: usize = k
                .parse()
                .map_err(|_| MetricsError::invalid(format!("bad metric cutoff {part:?}")))?;
            if k == 0 {
                return Err(MetricsError::invalid("metric cutoff must be >= 1"));
            }
            match kind {
                "R" => out.recall.push(k),
                "mAP" => out.map.push(k),
                "Rs" => out.subset_recall.push(k),
                _ => return Err(MetricsError::invalid(format!("unknown metric kind {kind:?}"))),
            }
        }
        if out.recall.is_empty() && out.map.is_empty() && out.subset_recall.is_empty() {
            return Err(MetricsError::invalid("metric spec names no metrics"));
        }
        Ok(out)
    }

    /// Column order of the report.
    pub fn metric_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        names.extend(self.recall.iter().map(|k| format!("R@{k}")));
        names.extend(self.map.iter().map(|k| format!("mAP@{k}")));
        names.extend(self.subset_recall.iter().map(|k| format!("Rs@{k}")));
        names
    }
}

/// Per-case metric values, retained for auditability.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseDetail {
    pub ref_id: String,
    pub category: Option<String>,
    pub values: BTreeMap<String, f64>,
}

/// Suite results: overall rows (macro-averaged when categories are
/// tagged), per-category rows, and the per-case detail table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: BTreeMap<String, f64>,
    pub categories: BTreeMap<String, BTreeMap<String, f64>>,
    pub per_case: Vec<CaseDetail>,
    /// mean of R@5 and Rs@1 when both are present
    pub cirr_avg: Option<f64>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Single-mode aligned table: one row, metric columns.
    pub fn to_table(&self, mode: &str, names: &[String]) -> String {
        ablation_table(&[(mode.to_string(), self.clone())], names)
    }
}

/// Aligned text table with one row per mode and one column per metric.
pub fn ablation_table(rows: &[(String, EvalReport)], names: &[String]) -> String {
    let label_width = rows
        .iter()
        .map(|(m, _)| m.len())
        .chain(["mode".len()])
        .max()
        .unwrap_or(4);
    let col = |n: &str| n.len().max(7);
    let mut out = String::new();
    out.push_str(&format!("{:label_width$}", "mode"));
    for n in names {
        out.push_str(&format!("  {:>width$}", n, width = col(n)));
    }
    out.push('\n');
    for (mode, report) in rows {
        out.push_str(&format!("{mode:label_width$}"));
        for n in names {
            match report.overall.get(n) {
                Some(v) => out.push_str(&format!("  {:>width$.4}", v, width = col(n))),
                None => out.push_str(&format!("  {:>width$}", "-", width = col(n))),
            }
        }
        out.push('\n');
    }
    out
}

fn case_values(
    case_idx: usize,
    case: &EvalCase,
    ranking: &RankedList,
    spec: &MetricSpec,
) -> Result<BTreeMap<String, f64>, MetricsError> {
    let mut values = BTreeMap::new();
    for &k in &spec.recall {
        values.insert(format!("R@{k}"), recall_at_k(ranking, &case.gold_ids, k));
    }
    for &k in &spec.map {
        values.insert(format!("mAP@{k}"), map_at_k(ranking, &case.gold_ids, k));
    }
    if !spec.subset_recall.is_empty() {
        let subset = case
            .subset_ids
            .as_ref()
            .ok_or(MetricsError::MissingSubset { case: case_idx })?;
        for &k in &spec.subset_recall {
            values.insert(
                format!("Rs@{k}"),
                subset_recall_at_k(ranking, &case.gold_ids, subset, k)?,
            );
        }
    }
    Ok(values)
}

/// Runs retrieval for every case and aggregates the requested metrics.
/// `tq` supplies the generated target description for modes that need it
/// (return `Ok(None)` when the mode does not).
pub fn evaluate_suite(
    cases: &[EvalCase],
    index: &Index,
    mode: RetrievalMode,
    params: &EncoderParams,
    spec: &MetricSpec,
    tq: &(dyn Fn(&EvalCase) -> Result<Option<String>, RetrievalError> + Sync),
) -> Result<EvalReport, MetricsError> {
    if cases.is_empty() {
        return Err(MetricsError::invalid("no cases to evaluate"));
    }
    for (i, case) in cases.iter().enumerate() {
        case.validate().map_err(|e| MetricsError::invalid(format!("case {i}: {e}")))?;
        if index.position(&case.ref_id).is_none() {
            return Err(MetricsError::invalid(format!(
                "case {i}: ref id {:?} not in the index",
                case.ref_id
            )));
        }
        if let Some(outside) = case.gold_ids.iter().find(|id| index.position(id).is_none()) {
            return Err(MetricsError::invalid(format!(
                "case {i}: gold id {outside:?} not in the index"
            )));
        }
    }

    let details: Vec<CaseDetail> = cases
        .par_iter()
        .enumerate()
        .map(|(i, case)| -> Result<CaseDetail, MetricsError> {
            let pos = index.position(&case.ref_id).expect("validated above");
            let mut bundle = QueryBundle::new(index.record(pos).tokens.clone(), &case.modification)?;
            bundle.generated_target_text = tq(case)?;
            let ranking = retrieve(&bundle, index, mode, params, index.len())?;
            Ok(CaseDetail {
                ref_id: case.ref_id.clone(),
                category: case.category.clone(),
                values: case_values(i, case, &ranking, spec)?,
            })
        })
        .collect::<Result<_, _>>()?;

    let names = spec.metric_names();
    let mean_of = |subset: &[&CaseDetail]| -> BTreeMap<String, f64> {
        names
            .iter()
            .map(|n| {
                let sum: f64 = subset.iter().map(|d| d.values[n]).sum();
                (n.clone(), sum / subset.len() as f64)
            })
            .collect()
    };

    let tagged = details.iter().any(|d| d.category.is_some());
    let mut categories = BTreeMap::new();
    let overall = if tagged {
        let mut by_cat: BTreeMap<String, Vec<&CaseDetail>> = BTreeMap::new();
        for d in &details {
            let cat = d.category.clone().unwrap_or_else(|| "uncategorized".to_string());
            by_cat.entry(cat).or_default().push(d);
        }
        for (cat, items) in &by_cat {
            categories.insert(cat.clone(), mean_of(items));
        }
        // macro average over category means
        names
            .iter()
            .map(|n| {
                let sum: f64 = categories.values().map(|m| m[n]).sum();
                (n.clone(), sum / categories.len() as f64)
            })
            .collect()
    } else {
        let all: Vec<&CaseDetail> = details.iter().collect();
        mean_of(&all)
    };

    let cirr_avg = match (overall.get("R@5"), overall.get("Rs@1")) {
        (Some(r5), Some(rs1)) => Some((r5 + rs1) / 2.0),
        _ => None,
    };

    Ok(EvalReport {
        overall,
        categories,
        per_case: details,
        cirr_avg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::RankedEntry;

    fn ranking(ids: &[&str]) -> RankedList {
        let n = ids.len();
        RankedList::new(
            ids.iter()
                .enumerate()
                .map(|(i, id)| RankedEntry {
                    id: id.to_string(),
                    score: 1.0 - i as f64 * 0.1,
                })
                .collect::<Vec<_>>(),
        )
        .unwrap_or_else(|_| panic!("test ranking must be valid: {n} entries"))
    }

    fn gold(ids: &[&str]) -> BTreeSet<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn recall_counts_any_hit_in_top_k() {
        let r = ranking(&["c3", "c1", "c2"]);
        let g = gold(&["c1"]);
        assert_eq!(recall_at_k(&r, &g, 1), 0.0);
        assert_eq!(recall_at_k(&r, &g, 2), 1.0);
        assert_eq!(recall_at_k(&r, &gold(&["zz"]), 3), 0.0);
    }

    #[test]
    fn map_hand_expansions() {
        // single gold ranked first
        assert_eq!(map_at_k(&ranking(&["a", "b", "c"]), &gold(&["a"]), 3), 1.0);
        // gold {a, b}, ranking [a, x, b], K=3: (1/2) * (1/1 + 2/3)
        let v = map_at_k(&ranking(&["a", "x", "b"]), &gold(&["a", "b"]), 3);
        assert!((v - 5.0 / 6.0).abs() < 1e-12, "got {v}");
        // no gold in top K
        assert_eq!(map_at_k(&ranking(&["x", "y"]), &gold(&["a"]), 2), 0.0);
    }

    #[test]
    fn subset_recall_filters_then_recalls() {
        // gold ranked 9th overall but first among subset members
        let ids: Vec<String> = (0..8)
            .map(|i| format!("d{i}"))
            .chain(["g".to_string(), "s1".to_string()])
            .collect();
        let refs: Vec<&str> = ids.iter().map(|s| s.as_str()).collect();
        let r = ranking(&refs);
        let g = gold(&["g"]);
        let subset = gold(&["g", "s1"]);
        assert_eq!(subset_recall_at_k(&r, &g, &subset, 1).unwrap(), 1.0);
        assert_eq!(recall_at_k(&r, &g, 1), 0.0);
        // subset = whole corpus degenerates to plain recall
        let whole: BTreeSet<String> = ids.iter().cloned().collect();
        for k in 1..=10 {
            assert_eq!(
                subset_recall_at_k(&r, &g, &whole, k).unwrap(),
                recall_at_k(&r, &g, k)
            );
        }
    }

    #[test]
    fn subset_must_cover_gold() {
        let r = ranking(&["a", "b"]);
        assert!(matches!(
            subset_recall_at_k(&r, &gold(&["a"]), &gold(&["b"]), 1),
            Err(MetricsError::GoldOutsideSubset)
        ));
    }

    #[test]
    fn monotone_in_k() {
        let r = ranking(&["a", "b", "c", "d", "e"]);
        let g = gold(&["c", "e"]);
        let mut prev_r = 0.0;
        let mut prev_m = 0.0;
        for k in 1..=5 {
            let rv = recall_at_k(&r, &g, k);
            let mv = map_at_k(&r, &g, k);
            assert!(rv >= prev_r);
            assert!(mv + 1e-12 >= prev_m, "mAP must not decrease: {prev_m} -> {mv} at {k}");
            prev_r = rv;
            prev_m = mv;
        }
    }

    #[test]
    fn metric_spec_parses_and_orders_names() {
        let spec = MetricSpec::parse("R@1,R@10,mAP@5,Rs@1").unwrap();
        assert_eq!(spec.recall, vec![1, 10]);
        assert_eq!(spec.map, vec![5]);
        assert_eq!(spec.subset_recall, vec![1]);
        assert_eq!(spec.metric_names(), ["R@1", "R@10", "mAP@5", "Rs@1"]);
        assert!(MetricSpec::parse("bogus").is_err());
        assert!(MetricSpec::parse("R@0").is_err());
        assert!(MetricSpec::parse("").is_err());
    }

    // Brute-force scan oracle over random rankings.
    #[test]
    fn random_suites_match_the_scan_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for _ in 0..50 {
            let n = rng.gen_range(3..15);
            let ids: Vec<String> = (0..n).map(|i| format!("c{i:02}")).collect();
            let mut order: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                let j = rng.gen_range(0..=i);
                order.swap(i, j);
            }
            let ordered: Vec<&str> = order.iter().map(|&i| ids[i].as_str()).collect();
            let r = ranking(&ordered);
            let g: BTreeSet<String> = ids
                .iter()
                .filter(|_| rng.gen_bool(0.3))
                .cloned()
                .collect();
            if g.is_empty() {
                continue;
            }
            for k in [1, 3, 7] {
                // oracle: explicit membership scan
                let top: Vec<&str> = r.ids().take(k).collect();
                let want = if top.iter().any(|id| g.contains(*id)) { 1.0 } else { 0.0 };
                assert_eq!(recall_at_k(&r, &g, k), want);

                // oracle: literal AP sum
                let mut hits = 0;
                let mut ap = 0.0;
                for (rank, id) in top.iter().enumerate() {
                    if g.contains(*id) {
                        hits += 1;
                        ap += hits as f64 / (rank + 1) as f64;
                    }
                }
                ap /= g.len().min(k) as f64;
                assert!((map_at_k(&r, &g, k) - ap).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn ablation_table_is_aligned_and_complete() {
        let mut overall = BTreeMap::new();
        overall.insert("R@1".to_string(), 0.5);
        overall.insert("mAP@5".to_string(), 0.25);
        let report = EvalReport {
            overall,
            categories: BTreeMap::new(),
            per_case: Vec::new(),
            cirr_avg: None,
        };
        let names = vec!["R@1".to_string(), "mAP@5".to_string()];
        let table = ablation_table(&[("fused".to_string(), report)], &names);
        assert!(table.contains("mode"));
        assert!(table.contains("fused"));
        assert!(table.contains("0.5000"));
        assert!(table.contains("0.2500"));
        assert_eq!(table.lines().count(), 2);
    }
}
