//! Permutation placebos: shuffle the outcome or the item-to-subdimension
//! labels, rerun the held-out comparison, and compare with the observed gain.

use std::io::Write;

use rand::seq::{IndexedRandom, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ecv::{evaluate_frames, mean_sd, scored_leaves, EcvConfig, EvalRequest, SplitFrame, Study};
use crate::error::{Error, Result};
use crate::evalcore::Metric;
use crate::mapping::{MappingMatrix, Weight};
use crate::rng;
use crate::taxonomy::Taxonomy;

const STREAM_OUTCOME: u32 = 3;
const STREAM_MAPPING: u32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlaceboKind {
    Outcome,
    Mapping,
}

impl PlaceboKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PlaceboKind::Outcome => "outcome",
            PlaceboKind::Mapping => "mapping",
        }
    }
}

impl std::str::FromStr for PlaceboKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "outcome" => Ok(PlaceboKind::Outcome),
            "mapping" => Ok(PlaceboKind::Mapping),
            _ => Err(Error::InvalidParameter(format!("unknown placebo kind `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaceboConfig {
    pub draws: usize,
    pub seed: u64,
    /// Use `(1 + #{draw >= observed}) / (1 + draws)`.
    pub smoothing: bool,
}

impl Default for PlaceboConfig {
    fn default() -> Self {
        Self {
            draws: 100,
            seed: 0,
            smoothing: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaceboReport {
    pub kind: PlaceboKind,
    pub candidate: String,
    pub outcome_id: String,
    pub metric: Metric,
    pub draws: usize,
    pub seed: u64,
    pub observed: f64,
    pub placebo: Vec<f64>,
    pub summary: Summary,
    pub p_value: f64,
    pub smoothed: bool,
}

fn summarize(v: &[f64]) -> Summary {
    let (mean, sd) = mean_sd(v);
    Summary {
        mean,
        sd,
        min: v.iter().copied().fold(f64::INFINITY, f64::min),
        max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

pub fn p_value(observed: f64, draws: &[f64], smoothing: bool) -> f64 {
    let hits = draws.iter().filter(|d| **d >= observed).count() as f64;
    if smoothing {
        (hits + 1.0) / (draws.len() as f64 + 1.0)
    } else {
        hits / draws.len() as f64
    }
}

/// What the placebo perturbs and measures.
pub struct PlaceboInputs<'a> {
    pub study: &'a Study,
    /// Frames of the observed run; draws reuse them.
    pub frames: &'a [SplitFrame],
    pub taxonomy: &'a Taxonomy,
    pub mapping: &'a MappingMatrix,
    pub candidate: &'a str,
    pub outcome: usize,
    pub ecv: &'a EcvConfig,
}

impl PlaceboInputs<'_> {
    fn single_outcome(&self) -> Result<Study> {
        let spec = self
            .study
            .outcomes
            .get(self.outcome)
            .ok_or_else(|| Error::InvalidParameter(format!("no outcome at index {}", self.outcome)))?;
        let mut s = self.study.clone();
        s.outcomes = vec![spec.clone()];
        Ok(s)
    }

    /// Oriented mean gain on the primary metric; `None` when the candidate
    /// receives no weight.
    fn statistic(&self, study: &Study, mapping: &MappingMatrix, y: Option<&[Vec<Option<f64>>]>) -> Result<Option<f64>> {
        let columns = scored_leaves(self.taxonomy, mapping);
        if !columns.iter().any(|c| c == self.candidate) {
            return Ok(None);
        }
        let cand = [self.candidate.to_string()];
        let req = EvalRequest {
            mapping,
            columns: &columns,
            candidates: &cand,
            baseline_scores: &[],
        };
        let task = study.model_spec(0, self.ecv).task;
        let reports = evaluate_frames(study, self.frames, &req, y, self.ecv)?;
        let primary = Metric::primary(task);
        Ok(reports.into_iter().find(|r| r.metric == primary).map(|r| r.mean))
    }
}

fn finish(kind: PlaceboKind, inp: &PlaceboInputs<'_>, cfg: &PlaceboConfig, observed: f64, placebo: Vec<f64>) -> PlaceboReport {
    let task = inp.study.model_spec(inp.outcome, inp.ecv).task;
    PlaceboReport {
        kind,
        candidate: inp.candidate.to_string(),
        outcome_id: inp.study.outcomes[inp.outcome].outcome_id.clone(),
        metric: Metric::primary(task),
        draws: cfg.draws,
        seed: cfg.seed,
        observed,
        summary: summarize(&placebo),
        p_value: p_value(observed, &placebo, cfg.smoothing),
        placebo,
        smoothed: cfg.smoothing,
    }
}

fn check(cfg: &PlaceboConfig) -> Result<()> {
    if cfg.draws == 0 {
        return Err(Error::InvalidParameter("draws must be >= 1".into()));
    }
    Ok(())
}

/// Shuffles the values among the rows where `y` is present.
pub fn permute_outcome(y: &[Option<f64>], g: &mut impl rand::Rng) -> Vec<Option<f64>> {
    let idx: Vec<usize> = (0..y.len()).filter(|&i| y[i].is_some()).collect();
    let mut vals: Vec<Option<f64>> = idx.iter().map(|&i| y[i]).collect();
    vals.shuffle(g);
    let mut out = y.to_vec();
    for (i, v) in idx.into_iter().zip(vals) {
        out[i] = v;
    }
    out
}

pub fn outcome_permutation(inp: &PlaceboInputs<'_>, cfg: &PlaceboConfig) -> Result<PlaceboReport> {
    check(cfg)?;
    let study = inp.single_outcome()?;
    let y = study.outcome_vector(0)?;
    let observed = inp
        .statistic(&study, inp.mapping, None)?
        .ok_or_else(|| Error::UnknownSubdimension(inp.candidate.to_string()))?;
    let placebo: Vec<f64> = (0..cfg.draws)
        .into_par_iter()
        .map(|d| -> Result<f64> {
            let mut g = rng::stream(cfg.seed, rng::stream_id(STREAM_OUTCOME, d as u64));
            let yp = vec![permute_outcome(&y, &mut g)];
            Ok(inp.statistic(&study, inp.mapping, Some(&yp))?.unwrap_or(0.0))
        })
        .collect::<Result<_>>()?;
    Ok(finish(PlaceboKind::Outcome, inp, cfg, observed, placebo))
}

/// Keeps each row's weights and redraws their subdimensions, without
/// replacement, from `leaves`. Anchored rows stay put.
pub fn permute_mapping(w: &MappingMatrix, leaves: &[String], g: &mut impl rand::Rng) -> MappingMatrix {
    let mut out = w.clone();
    for row in out.rows.iter_mut().filter(|r| !r.anchored) {
        let k = row.weights.len().min(leaves.len());
        let targets: Vec<&String> = leaves.choose_multiple(g, k).collect();
        row.weights = row
            .weights
            .iter()
            .zip(targets)
            .map(|(w, t)| Weight::new(t.clone(), w.weight))
            .collect();
    }
    out
}

pub fn mapping_permutation(inp: &PlaceboInputs<'_>, cfg: &PlaceboConfig) -> Result<PlaceboReport> {
    check(cfg)?;
    let leaves = inp.taxonomy.leaf_ids();
    if leaves.len() < 2 {
        return Err(Error::Precondition("mapping permutation needs at least two leaves".into()));
    }
    let study = inp.single_outcome()?;
    let observed = inp
        .statistic(&study, inp.mapping, None)?
        .ok_or_else(|| Error::UnknownSubdimension(inp.candidate.to_string()))?;
    let placebo: Vec<f64> = (0..cfg.draws)
        .into_par_iter()
        .map(|d| -> Result<f64> {
            let mut g = rng::stream(cfg.seed, rng::stream_id(STREAM_MAPPING, d as u64));
            let wp = permute_mapping(inp.mapping, &leaves, &mut g);
            Ok(inp.statistic(&study, &wp, None)?.unwrap_or(0.0))
        })
        .collect::<Result<_>>()?;
    Ok(finish(PlaceboKind::Mapping, inp, cfg, observed, placebo))
}

pub fn run_placebo(kind: PlaceboKind, inp: &PlaceboInputs<'_>, cfg: &PlaceboConfig) -> Result<PlaceboReport> {
    match kind {
        PlaceboKind::Outcome => outcome_permutation(inp, cfg),
        PlaceboKind::Mapping => mapping_permutation(inp, cfg),
    }
}

/// `draw,delta` rows for histograms.
pub fn write_draws_csv<W: Write>(writer: W, r: &PlaceboReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["draw", "delta"])?;
    for (i, d) in r.placebo.iter().enumerate() {
        w.write_record([i.to_string(), format!("{d}")])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mapping::{validate_mapping, MappingRow};
    use crate::taxonomy::{Anchor, Subdimension};

    #[test]
    fn p_value_conventions() {
        assert_eq!(p_value(0.5, &[0.1, 0.5, 0.9, 0.2], false), 0.5);
        assert_eq!(p_value(0.5, &[0.1, 0.5, 0.9, 0.2], true), 0.6);
        assert!([0.0, 1.0].contains(&p_value(0.1, &[0.3], false)));
        assert!([0.0, 1.0].contains(&p_value(0.4, &[0.3], false)));
    }

    #[test]
    fn outcome_permutation_keeps_class_counts() {
        let y: Vec<Option<f64>> = (0..50)
            .map(|i| if i % 7 == 0 { None } else { Some((i % 3 == 0) as u8 as f64) })
            .collect();
        let mut g = rng::stream(1, 0);
        let p = permute_outcome(&y, &mut g);
        let ones = |v: &[Option<f64>]| v.iter().filter(|x| **x == Some(1.0)).count();
        assert_eq!(ones(&y), ones(&p));
        for (a, b) in y.iter().zip(&p) {
            assert_eq!(a.is_none(), b.is_none());
        }
        assert_ne!(y, p);
    }

    fn tax() -> Taxonomy {
        let mut fl = Subdimension::new("fl", "A", "d");
        fl.anchored = true;
        Taxonomy::new(
            1,
            vec![Anchor {
                anchor_id: "A".into(),
                definition: "a".into(),
            }],
            vec![Subdimension::new("a", "A", "d"), Subdimension::new("b", "A", "d"), Subdimension::new("c", "A", "d"), fl],
        )
    }

    #[test]
    fn permuted_mapping_keeps_structure() {
        let t = tax();
        let mut w = MappingMatrix::new(
            1,
            vec![
                MappingRow::new("q1", &[("a", 0.7), ("b", 0.3)]),
                MappingRow::new("q2", &[("c", 1.0)]),
                MappingRow::new("q3", &[("fl", 1.0)]),
            ],
        );
        w.mark_anchored(&t);
        let leaves = t.leaf_ids();
        for d in 0..50 {
            let mut g = rng::stream(9, d);
            let p = permute_mapping(&w, &leaves, &mut g);
            assert!(validate_mapping(&p, &t, None).is_valid());
            for (a, b) in w.rows.iter().zip(&p.rows) {
                let mut wa: Vec<f64> = a.weights.iter().map(|x| x.weight).collect();
                let mut wb: Vec<f64> = b.weights.iter().map(|x| x.weight).collect();
                wa.sort_by(f64::total_cmp);
                wb.sort_by(f64::total_cmp);
                assert_eq!(wa, wb);
                assert_eq!(a.sum(), b.sum());
            }
            assert_eq!(p.row("q3"), w.row("q3"));
        }
    }

    #[test]
    fn single_leaf_is_precondition() {
        let t = Taxonomy::new(
            1,
            vec![Anchor {
                anchor_id: "A".into(),
                definition: "a".into(),
            }],
            vec![Subdimension::new("a", "A", "d")],
        );
        let out = crate::synth::generate(&crate::synth::SynthSpec {
            n: 200,
            ..Default::default()
        })
        .unwrap();
        let study = out.study().unwrap();
        let w = MappingMatrix::new(1, vec![]);
        let cfg = EcvConfig::default();
        let inp = PlaceboInputs {
            study: &study,
            frames: &[],
            taxonomy: &t,
            mapping: &w,
            candidate: "a",
            outcome: 0,
            ecv: &cfg,
        };
        let e = mapping_permutation(&inp, &PlaceboConfig::default()).unwrap_err();
        assert_eq!(e.kind(), "Precondition");
    }
}
