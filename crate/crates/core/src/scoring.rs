//! Respondent-level subdimension scores from harmonized items and weights.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harmonize::HarmonizedMatrix;
use crate::mapping::{CoverageWeights, MappingMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringKind {
    WeightedMean,
    WeightedSum,
    ZscoreThenMean,
    CoverageReweightedMean,
}

impl ScoringKind {
    pub const ALL: [ScoringKind; 4] = [
        ScoringKind::WeightedMean,
        ScoringKind::WeightedSum,
        ScoringKind::ZscoreThenMean,
        ScoringKind::CoverageReweightedMean,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ScoringKind::WeightedMean => "weighted_mean",
            ScoringKind::WeightedSum => "weighted_sum",
            ScoringKind::ZscoreThenMean => "zscore_then_mean",
            ScoringKind::CoverageReweightedMean => "coverage_reweighted_mean",
        }
    }
}

impl std::str::FromStr for ScoringKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScoringKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown scoring rule `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoringRule {
    pub kind: ScoringKind,
    #[serde(default = "yes")]
    pub post_standardize: bool,
}

fn yes() -> bool {
    true
}

impl Default for ScoringRule {
    fn default() -> Self {
        Self {
            kind: ScoringKind::WeightedMean,
            post_standardize: true,
        }
    }
}

impl ScoringRule {
    pub fn new(kind: ScoringKind) -> Self {
        Self {
            kind,
            post_standardize: true,
        }
    }
}

/// Scores stored column-major: `values[k][i]` for subdimension `k`, respondent `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub respondent_ids: Vec<String>,
    pub subdim_ids: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
    /// Non-missing items contributing to each cell.
    pub counts: Vec<Vec<u32>>,
    /// Items with positive weight on each subdimension.
    pub item_counts: Vec<usize>,
}

impl ScoreMatrix {
    pub fn n_rows(&self) -> usize {
        self.respondent_ids.len()
    }

    pub fn column_index(&self, subdim: &str) -> Option<usize> {
        self.subdim_ids.iter().position(|s| s == subdim)
    }

    pub fn column(&self, subdim: &str) -> Option<&[Option<f64>]> {
        self.column_index(subdim).map(|k| self.values[k].as_slice())
    }

    pub fn select_rows(&self, rows: &[usize]) -> ScoreMatrix {
        ScoreMatrix {
            respondent_ids: rows.iter().map(|&r| self.respondent_ids[r].clone()).collect(),
            subdim_ids: self.subdim_ids.clone(),
            values: self.values.iter().map(|c| rows.iter().map(|&r| c[r]).collect()).collect(),
            counts: self.counts.iter().map(|c| rows.iter().map(|&r| c[r]).collect()).collect(),
            item_counts: self.item_counts.clone(),
        }
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["respondent_id".to_string()];
        header.extend(self.subdim_ids.iter().cloned());
        w.write_record(&header)?;
        for (i, rid) in self.respondent_ids.iter().enumerate() {
            let mut rec = vec![rid.clone()];
            rec.extend(
                self.values
                    .iter()
                    .map(|c| c[i].map(|v| format!("{v}")).unwrap_or_default()),
            );
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Scores over the subdimensions that carry weight in `w`.
pub fn build_scores(
    h: &HarmonizedMatrix,
    w: &MappingMatrix,
    rule: ScoringRule,
    coverage: Option<&CoverageWeights>,
) -> Result<ScoreMatrix> {
    build_scores_with_columns(h, w, rule, coverage, &w.subdim_ids())
}

/// Scores over an explicit column list; columns without weight are all MISSING.
pub fn build_scores_with_columns(
    h: &HarmonizedMatrix,
    w: &MappingMatrix,
    rule: ScoringRule,
    coverage: Option<&CoverageWeights>,
    columns: &[String],
) -> Result<ScoreMatrix> {
    let idx = h.index_by_id();
    let mut plans: Vec<Vec<(usize, f64)>> = vec![Vec::new(); columns.len()];
    for r in &w.rows {
        let &j = idx
            .get(r.item_id.as_str())
            .ok_or_else(|| Error::StaleMapping(format!("item `{}` is not in the harmonized data", r.item_id)))?;
        let scale = match rule.kind {
            ScoringKind::CoverageReweightedMean => {
                let c = coverage.ok_or_else(|| Error::MissingCoverage(r.item_id.clone()))?;
                c.get(&r.item_id)
                    .ok_or_else(|| Error::MissingCoverage(r.item_id.clone()))?
            }
            _ => 1.0,
        };
        for wt in &r.weights {
            if wt.weight <= 0.0 {
                continue;
            }
            if let Some(k) = columns.iter().position(|c| c == &wt.subdim_id) {
                if rule.kind == ScoringKind::ZscoreThenMean && !h.standardized.get(j).copied().unwrap_or(false) {
                    return Err(Error::NotStandardized(r.item_id.clone()));
                }
                plans[k].push((j, wt.weight * scale));
            }
        }
    }
    let n = h.n_rows();
    let with_denominator = rule.kind != ScoringKind::WeightedSum;
    let built: Vec<(Vec<Option<f64>>, Vec<u32>)> = plans
        .par_iter()
        .map(|plan| {
            let mut vals = Vec::with_capacity(n);
            let mut counts = Vec::with_capacity(n);
            for i in 0..n {
                let mut num = 0.0;
                let mut den = 0.0;
                let mut cnt = 0u32;
                for &(j, wt) in plan {
                    if let Some(x) = h.columns[j][i] {
                        num += wt * x;
                        den += wt;
                        cnt += 1;
                    }
                }
                counts.push(cnt);
                vals.push(if den > 0.0 {
                    Some(if with_denominator { num / den } else { num })
                } else {
                    None
                });
            }
            (vals, counts)
        })
        .collect();
    let item_counts = plans
        .iter()
        .map(|p| {
            let mut items: Vec<usize> = p.iter().map(|&(j, _)| j).collect();
            items.dedup();
            items.len()
        })
        .collect();
    let (values, counts) = built.into_iter().unzip();
    Ok(ScoreMatrix {
        respondent_ids: h.respondent_ids.clone(),
        subdim_ids: columns.to_vec(),
        values,
        counts,
        item_counts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreCoverage {
    pub subdim_id: String,
    pub item_count: usize,
    pub n_nonmissing: usize,
}

pub fn score_coverage(s: &ScoreMatrix) -> Vec<ScoreCoverage> {
    s.subdim_ids
        .iter()
        .enumerate()
        .map(|(k, id)| ScoreCoverage {
            subdim_id: id.clone(),
            item_count: s.item_counts[k],
            n_nonmissing: s.values[k].iter().filter(|v| v.is_some()).count(),
        })
        .collect()
}

/// Train-only standardization of score columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreStandardizer {
    pub subdim_ids: Vec<String>,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl ScoreStandardizer {
    /// Population moments of each column over the non-missing `train_rows`.
    pub fn fit(s: &ScoreMatrix, train_rows: &[usize]) -> Self {
        let mut mean = Vec::with_capacity(s.values.len());
        let mut sd = Vec::with_capacity(s.values.len());
        for col in &s.values {
            let xs: Vec<f64> = train_rows.iter().filter_map(|&i| col[i]).collect();
            if xs.is_empty() {
                mean.push(0.0);
                sd.push(1.0);
                continue;
            }
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64;
            let d = v.sqrt();
            mean.push(m);
            sd.push(if d > 1e-12 * m.abs().max(1.0) { d } else { 1.0 });
        }
        Self {
            subdim_ids: s.subdim_ids.clone(),
            mean,
            sd,
        }
    }

    pub fn apply(&self, s: &ScoreMatrix) -> ScoreMatrix {
        let values = s
            .values
            .iter()
            .enumerate()
            .map(|(k, col)| col.iter().map(|v| v.map(|x| (x - self.mean[k]) / self.sd[k])).collect())
            .collect();
        ScoreMatrix {
            values,
            ..s.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instrument::Usage;
    use crate::mapping::MappingRow;

    fn h(cols: &[(&str, Vec<Option<f64>>)]) -> HarmonizedMatrix {
        let n = cols[0].1.len();
        HarmonizedMatrix {
            respondent_ids: (0..n).map(|i| format!("r{i}")).collect(),
            item_ids: cols.iter().map(|c| c.0.to_string()).collect(),
            usage: vec![Usage::Mechanism; cols.len()],
            columns: cols.iter().map(|c| c.1.clone()).collect(),
            standardized: vec![false; cols.len()],
        }
    }

    fn raw(kind: ScoringKind) -> ScoringRule {
        ScoringRule {
            kind,
            post_standardize: false,
        }
    }

    #[test]
    fn single_item_identity() {
        let hm = h(&[("a", vec![Some(0.7)])]);
        let w = MappingMatrix::new(1, vec![MappingRow::new("a", &[("k", 1.0)])]);
        let s = build_scores(&hm, &w, raw(ScoringKind::WeightedMean), None).unwrap();
        assert_eq!(s.values[0][0], Some(0.7));
    }

    #[test]
    fn q4_style_row_and_missing_exclusion() {
        let hm = h(&[("x1", vec![Some(1.0), Some(1.0)]), ("x2", vec![Some(-1.0), None])]);
        let w = MappingMatrix::new(
            1,
            vec![MappingRow::new("x1", &[("k", 0.9), ("z", 0.1)]), MappingRow::new("x2", &[("k", 0.1), ("z", 0.9)])],
        );
        let s = build_scores(&hm, &w, raw(ScoringKind::WeightedMean), None).unwrap();
        let k = s.column("k").unwrap();
        assert!((k[0].unwrap() - 0.8).abs() < 1e-12);
        assert!((k[1].unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(s.counts[s.column_index("k").unwrap()], vec![2, 1]);
    }

    #[test]
    fn all_missing_is_missing() {
        let hm = h(&[("a", vec![None, Some(2.0)])]);
        let w = MappingMatrix::new(1, vec![MappingRow::new("a", &[("k", 1.0)])]);
        let s = build_scores(&hm, &w, raw(ScoringKind::WeightedSum), None).unwrap();
        assert_eq!(s.values[0], vec![None, Some(2.0)]);
    }

    #[test]
    fn stale_mapping() {
        let hm = h(&[("a", vec![Some(1.0)])]);
        let w = MappingMatrix::new(1, vec![MappingRow::new("nope", &[("k", 1.0)])]);
        assert!(matches!(
            build_scores(&hm, &w, ScoringRule::default(), None),
            Err(Error::StaleMapping(_))
        ));
    }

    #[test]
    fn zscore_requires_standardized() {
        let mut hm = h(&[("a", vec![Some(1.0)])]);
        let w = MappingMatrix::new(1, vec![MappingRow::new("a", &[("k", 1.0)])]);
        assert!(matches!(
            build_scores(&hm, &w, raw(ScoringKind::ZscoreThenMean), None),
            Err(Error::NotStandardized(_))
        ));
        hm.standardized = vec![true];
        assert!(build_scores(&hm, &w, raw(ScoringKind::ZscoreThenMean), None).is_ok());
    }

    #[test]
    fn coverage_two_thirds_one_third() {
        let hm = h(&[("a", vec![Some(3.0)]), ("b", vec![Some(0.0)])]);
        let w = MappingMatrix::new(1, vec![MappingRow::new("a", &[("k", 1.0)]), MappingRow::new("b", &[("k", 1.0)])]);
        let c = CoverageWeights([("a".to_string(), 1.0), ("b".to_string(), 0.5)].into());
        let s = build_scores(&hm, &w, raw(ScoringKind::CoverageReweightedMean), Some(&c)).unwrap();
        // effective weights 2/3 and 1/3
        assert!((s.values[0][0].unwrap() - 2.0).abs() < 1e-12);
        assert!(matches!(
            build_scores(&hm, &w, raw(ScoringKind::CoverageReweightedMean), None),
            Err(Error::MissingCoverage(_))
        ));
    }

    #[test]
    fn zero_weight_column_reports_zero() {
        let hm = h(&[("a", vec![Some(1.0)])]);
        let w = MappingMatrix::new(1, vec![MappingRow::new("a", &[("k", 1.0)])]);
        let s = build_scores_with_columns(&hm, &w, ScoringRule::default(), None, &["k".into(), "empty".into()])
            .unwrap();
        let cov = score_coverage(&s);
        assert_eq!((cov[1].item_count, cov[1].n_nonmissing), (0, 0));
        assert_eq!((cov[0].item_count, cov[0].n_nonmissing), (1, 1));
    }

    #[test]
    fn coverage_counts_two_items() {
        let n = 6000;
        let col = |skip: usize| (0..n).map(|i| if i < skip { None } else { Some(i as f64) }).collect();
        let hm = h(&[("Q1", col(476)), ("Q2", col(476))]);
        let w = MappingMatrix::new(
            1,
            vec![
                MappingRow::new("Q1", &[("service_tenure_lockin", 1.0)]),
                MappingRow::new("Q2", &[("service_tenure_lockin", 1.0)]),
            ],
        );
        let s = build_scores(&hm, &w, ScoringRule::default(), None).unwrap();
        let c = &score_coverage(&s)[0];
        assert_eq!((c.item_count, c.n_nonmissing), (2, 5524));
    }

    #[test]
    fn standardizer_uses_training_rows_only() {
        let hm = h(&[("a", vec![Some(1.0), Some(3.0), Some(100.0)])]);
        let w = MappingMatrix::new(1, vec![MappingRow::new("a", &[("k", 1.0)])]);
        let s = build_scores(&hm, &w, ScoringRule::default(), None).unwrap();
        let st = ScoreStandardizer::fit(&s, &[0, 1]);
        assert_eq!((st.mean[0], st.sd[0]), (2.0, 1.0));
        assert_eq!(st.apply(&s).values[0][2], Some(98.0));
    }

    #[test]
    fn rule_names_round_trip() {
        for k in ScoringKind::ALL {
            assert_eq!(k.as_str().parse::<ScoringKind>().unwrap(), k);
        }
    }
}
