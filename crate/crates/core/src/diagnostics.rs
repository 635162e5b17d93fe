//! Overlap screening, conditional contribution within clusters, and
//! data-limitation flags.

use std::collections::BTreeSet;
use std::io::Write;

use petgraph::unionfind::UnionFind;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ecv::{compare_nested, mean_sd, Col, EcvConfig, SplitFrame, Study};
use crate::error::{Error, Result};
use crate::evalcore::Metric;
use crate::mapping::MappingMatrix;
use crate::scoring::{ScoreMatrix, ScoringRule};

pub const DEFAULT_CUTOFF: f64 = 0.85;
pub const MIN_PAIR_ROWS: usize = 3;
pub const DEFAULT_PASS_SHARE: f64 = 0.60;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairCorrelation {
    pub subdim_a: String,
    pub subdim_b: String,
    pub rho: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedPair {
    pub subdim_a: String,
    pub subdim_b: String,
    pub n: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub cutoff: f64,
    pub flagged: Vec<PairCorrelation>,
    pub clusters: Vec<Vec<String>>,
    /// Every computed pair, flagged or not.
    pub pairs: Vec<PairCorrelation>,
    pub skipped: Vec<SkippedPair>,
}

impl OverlapReport {
    pub fn cluster_of(&self, subdim: &str) -> Option<usize> {
        self.clusters.iter().position(|c| c.iter().any(|s| s == subdim))
    }

    /// Other members of `subdim`'s cluster.
    pub fn partners(&self, subdim: &str) -> Vec<String> {
        self.cluster_of(subdim)
            .map(|i| self.clusters[i].iter().filter(|s| *s != subdim).cloned().collect())
            .unwrap_or_default()
    }

    pub fn is_flagged(&self, subdim: &str) -> bool {
        self.cluster_of(subdim).is_some()
    }

    /// The same pairs screened at another cutoff.
    pub fn at_cutoff(&self, cutoff: f64, order: &[String]) -> Result<OverlapReport> {
        check_cutoff(cutoff)?;
        Ok(assemble(cutoff, order, self.pairs.clone(), self.skipped.clone()))
    }
}

fn check_cutoff(cutoff: f64) -> Result<()> {
    if !(cutoff > 0.0 && cutoff < 1.0) {
        return Err(Error::InvalidParameter(format!("cutoff {cutoff} outside (0, 1)")));
    }
    Ok(())
}

/// Pearson correlation over the rows where both values are present.
pub fn pairwise_pearson(a: &[Option<f64>], b: &[Option<f64>], rows: &[usize]) -> (Option<f64>, usize) {
    let pairs: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|&r| Some((a[r]?, b[r]?)))
        .collect();
    let n = pairs.len();
    if n < MIN_PAIR_ROWS {
        return (None, n);
    }
    let nf = n as f64;
    let ma = pairs.iter().map(|p| p.0).sum::<f64>() / nf;
    let mb = pairs.iter().map(|p| p.1).sum::<f64>() / nf;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in &pairs {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return (None, n);
    }
    (Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)), n)
}

fn assemble(cutoff: f64, order: &[String], pairs: Vec<PairCorrelation>, skipped: Vec<SkippedPair>) -> OverlapReport {
    let flagged: Vec<PairCorrelation> = pairs.iter().filter(|p| p.rho.abs() >= cutoff).cloned().collect();
    let idx = |s: &str| order.iter().position(|o| o == s).expect("pair names come from order");
    let mut uf = UnionFind::<usize>::new(order.len());
    let mut members = BTreeSet::new();
    for p in &flagged {
        let (i, j) = (idx(&p.subdim_a), idx(&p.subdim_b));
        uf.union(i, j);
        members.insert(i);
        members.insert(j);
    }
    let mut clusters: Vec<(usize, Vec<String>)> = Vec::new();
    for &i in &members {
        let root = uf.find(i);
        match clusters.iter_mut().find(|(r, _)| *r == root) {
            Some((_, c)) => c.push(order[i].clone()),
            None => clusters.push((root, vec![order[i].clone()])),
        }
    }
    OverlapReport {
        cutoff,
        flagged,
        clusters: clusters.into_iter().map(|(_, c)| c).collect(),
        pairs,
        skipped,
    }
}

/// Flags score pairs with |rho| >= cutoff on `rows` and groups them into
/// connected components.
pub fn correlation_screen(s: &ScoreMatrix, cutoff: f64, rows: &[usize]) -> Result<OverlapReport> {
    check_cutoff(cutoff)?;
    let k = s.subdim_ids.len();
    let ij: Vec<(usize, usize)> = (0..k).flat_map(|i| (i + 1..k).map(move |j| (i, j))).collect();
    let computed: Vec<(usize, usize, Option<f64>, usize)> = ij
        .par_iter()
        .map(|&(i, j)| {
            let (rho, n) = pairwise_pearson(&s.values[i], &s.values[j], rows);
            (i, j, rho, n)
        })
        .collect();
    let mut pairs = Vec::new();
    let mut skipped = Vec::new();
    for (i, j, rho, n) in computed {
        let (a, b) = (s.subdim_ids[i].clone(), s.subdim_ids[j].clone());
        match rho {
            Some(rho) => pairs.push(PairCorrelation {
                subdim_a: a,
                subdim_b: b,
                rho,
                n,
            }),
            None => skipped.push(SkippedPair {
                subdim_a: a,
                subdim_b: b,
                n,
                reason: if n < MIN_PAIR_ROWS {
                    format!("fewer than {MIN_PAIR_ROWS} complete rows")
                } else {
                    "constant column".to_string()
                },
            }),
        }
    }
    Ok(assemble(cutoff, &s.subdim_ids, pairs, skipped))
}

pub fn write_overlap_csv<W: Write>(writer: W, report: &OverlapReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["subdim_a", "subdim_b", "rho"])?;
    for p in &report.flagged {
        w.write_record([p.subdim_a.as_str(), p.subdim_b.as_str(), &format!("{:.6}", p.rho)])?;
    }
    w.flush()?;
    Ok(())
}

/// Scores every frame with the same mapping.
pub fn score_frames(frames: &[SplitFrame], mapping: &MappingMatrix, columns: &[String], rule: ScoringRule) -> Result<Vec<ScoreMatrix>> {
    frames.par_iter().map(|f| f.score(mapping, columns, rule)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalContribution {
    pub cluster_id: usize,
    pub candidate: String,
    pub outcome_id: String,
    pub metric: Metric,
    pub raw: Vec<f64>,
    pub oriented: Vec<f64>,
    pub mean: f64,
    pub share_improve: f64,
    pub pass: bool,
}

/// Gain of `candidate` over the rest of its cluster, per frame, on the
/// outcome's primary metric.
#[allow(clippy::too_many_arguments)]
pub fn conditional_contribution(
    study: &Study,
    frames: &[SplitFrame],
    scores: &[ScoreMatrix],
    cluster_id: usize,
    cluster: &[String],
    candidate: &str,
    baseline_scores: &[String],
    outcome: usize,
    cfg: &EcvConfig,
    pass_share: f64,
) -> Result<ConditionalContribution> {
    if cluster.len() < 2 {
        return Err(Error::Precondition(format!("cluster {cluster_id} has fewer than two members")));
    }
    if !cluster.iter().any(|c| c == candidate) {
        return Err(Error::Precondition(format!("`{candidate}` is not in cluster {cluster_id}")));
    }
    if frames.len() != scores.len() || frames.is_empty() {
        return Err(Error::LengthMismatch(format!("{} frames, {} score sets", frames.len(), scores.len())));
    }
    let y = study.outcome_vector(outcome)?;
    let spec = study.model_spec(outcome, cfg);
    let metric = Metric::primary(spec.task);
    let raw: Vec<f64> = frames
        .par_iter()
        .zip(scores.par_iter())
        .map(|(frame, s)| -> Result<f64> {
            let sc = |id: &String| {
                s.column_index(id)
                    .map(Col::Score)
                    .ok_or_else(|| Error::UnknownSubdimension(id.clone()))
            };
            let mut reduced = Vec::new();
            for cov in study.covariates(outcome) {
                let j = frame.items.column_index(&cov).ok_or_else(|| Error::UnknownItem(cov.clone()))?;
                reduced.push(Col::Item(j));
            }
            for b in baseline_scores.iter().filter(|b| !cluster.contains(b)) {
                reduced.push(sc(b)?);
            }
            for m in cluster.iter().filter(|m| *m != candidate) {
                reduced.push(sc(m)?);
            }
            let mut full = reduced.clone();
            full.push(sc(&candidate.to_string())?);
            Ok(compare_nested(frame, s, &y, &reduced, &full, &spec, &[metric])?[0])
        })
        .collect::<Result<_>>()?;
    let o = metric.orientation();
    let oriented: Vec<f64> = raw.iter().map(|d| o * d).collect();
    let (mean, _) = mean_sd(&oriented);
    let share_improve = oriented.iter().filter(|d| **d > 0.0).count() as f64 / oriented.len() as f64;
    Ok(ConditionalContribution {
        cluster_id,
        candidate: candidate.to_string(),
        outcome_id: study.outcomes[outcome].outcome_id.clone(),
        metric,
        raw,
        oriented,
        mean,
        share_improve,
        pass: share_improve >= pass_share && mean > 0.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataLimitThresholds {
    pub min_n: usize,
    pub min_items: usize,
    pub min_sd: f64,
}

impl Default for DataLimitThresholds {
    fn default() -> Self {
        Self {
            min_n: 100,
            min_items: 2,
            min_sd: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LimitReason {
    LowN,
    FewItems,
    LowVariance,
    DegenerateColumns,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataLimitFlag {
    pub subdim: String,
    pub reasons: Vec<LimitReason>,
    pub n_nonmissing: usize,
    pub items: usize,
    pub sd: f64,
    pub thresholds: DataLimitThresholds,
}

/// Flags on unstandardized scores over `rows`. `degenerate` lists items whose
/// fold transform found no variation.
pub fn data_limit_flags(
    s: &ScoreMatrix,
    rows: &[usize],
    mapping: &MappingMatrix,
    degenerate: &[String],
    th: &DataLimitThresholds,
) -> Vec<DataLimitFlag> {
    let mut out = Vec::new();
    for (k, id) in s.subdim_ids.iter().enumerate() {
        let vals: Vec<f64> = rows.iter().filter_map(|&r| s.values[k][r]).collect();
        let n = vals.len();
        let sd = if n == 0 {
            0.0
        } else {
            let m = vals.iter().sum::<f64>() / n as f64;
            (vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64).sqrt()
        };
        let mut reasons = Vec::new();
        if n < th.min_n {
            reasons.push(LimitReason::LowN);
        }
        if s.item_counts[k] < th.min_items {
            reasons.push(LimitReason::FewItems);
        }
        if sd < th.min_sd {
            reasons.push(LimitReason::LowVariance);
        }
        let touched = degenerate
            .iter()
            .any(|item| mapping.row(item).is_some_and(|r| r.weight_on(id) > 0.0));
        if touched {
            reasons.push(LimitReason::DegenerateColumns);
        }
        if !reasons.is_empty() {
            out.push(DataLimitFlag {
                subdim: id.clone(),
                reasons,
                n_nonmissing: n,
                items: s.item_counts[k],
                sd,
                thresholds: *th,
            });
        }
    }
    out
}
