//! Embedded cross-validation: fold plans, per-split frames, incremental
//! deltas for candidate scores, and triage labels.
//!
//! Every statistic that feeds a decision is fitted on the training part of a
//! split. Frames only ever see the rows of their own split.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalcore::{self, Features, Metric, ModelSpec, Task};
use crate::harmonize::{
    apply_fold_transform, fit_fold_transform_with, FitOptions, HarmonizationRule, HarmonizedMatrix,
};
use crate::instrument::{Instrument, OutcomeKind, OutcomeSpec, PredicateSet, Usage};
use crate::mapping::{CoverageWeights, MappingMatrix};
use crate::rng;
use crate::scoring::{build_scores_with_columns, ScoreMatrix, ScoreStandardizer, ScoringKind, ScoringRule};
use crate::taxonomy::Taxonomy;

const STREAM_OUTER: u32 = 1;
const STREAM_INNER: u32 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Row assignments for outer folds and repeated inner folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub n: usize,
    pub k_out: usize,
    pub k_in: usize,
    pub repeats: usize,
    pub seed: u64,
    /// Test rows of each outer fold, sorted.
    pub outer: Vec<Vec<usize>>,
    /// `inner[o][r][f]`: test rows of inner fold `f`, repeat `r`, outer fold `o`.
    pub inner: Vec<Vec<Vec<Vec<usize>>>>,
}

fn assign_folds(rows: &[usize], strata: Option<&[usize]>, k: usize, rng: &mut impl rand::Rng) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &r in rows {
        groups.entry(strata.map_or(0, |s| s[r])).or_default().push(r);
    }
    let mut folds = vec![Vec::new(); k];
    let mut offset = 0;
    for (_, mut g) in groups {
        g.shuffle(rng);
        for (i, r) in g.iter().enumerate() {
            folds[(offset + i) % k].push(*r);
        }
        offset += g.len();
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    folds
}

/// Stratified, seeded fold plan. `strata` gives a class per row (binary
/// labels as 0/1, missing as a third class).
pub fn make_fold_plan(
    n: usize,
    strata: Option<&[usize]>,
    k_out: usize,
    k_in: usize,
    repeats: usize,
    seed: u64,
) -> Result<FoldPlan> {
    if k_out < 2 || k_in < 2 || repeats < 1 {
        return Err(Error::InvalidParameter(format!(
            "need K_out >= 2, K_in >= 2, repeats >= 1 (got {k_out}, {k_in}, {repeats})"
        )));
    }
    if n < k_out * k_in {
        return Err(Error::TooFewRows { have: n, need: k_out * k_in });
    }
    if let Some(s) = strata {
        if s.len() != n {
            return Err(Error::LengthMismatch(format!("{} strata for {n} rows", s.len())));
        }
    }
    let all: Vec<usize> = (0..n).collect();
    let outer = assign_folds(&all, strata, k_out, &mut rng::stream(seed, rng::stream_id(STREAM_OUTER, 0)));
    let mut plan = FoldPlan {
        n,
        k_out,
        k_in,
        repeats,
        seed,
        outer,
        inner: vec![],
    };
    plan.inner = (0..k_out)
        .map(|o| {
            let train = plan.outer_train(o);
            (0..repeats)
                .map(|r| {
                    let id = (o * repeats + r) as u64;
                    let mut g = rng::stream(seed, rng::stream_id(STREAM_INNER, id));
                    assign_folds(&train, strata, k_in, &mut g)
                })
                .collect()
        })
        .collect();
    Ok(plan)
}

impl FoldPlan {
    pub fn outer_train(&self, o: usize) -> Vec<usize> {
        let mut test = vec![false; self.n];
        for &r in &self.outer[o] {
            test[r] = true;
        }
        (0..self.n).filter(|&r| !test[r]).collect()
    }

    pub fn outer_splits(&self) -> Vec<Split> {
        (0..self.k_out)
            .map(|o| Split {
                train: self.outer_train(o),
                test: self.outer[o].clone(),
            })
            .collect()
    }

    /// The `K_in * repeats` inner splits of outer fold `o`, repeat-major.
    pub fn inner_splits(&self, o: usize) -> Vec<Split> {
        let outer_train = self.outer_train(o);
        let mut out = Vec::new();
        for rep in &self.inner[o] {
            for test in rep {
                let mut held = vec![false; self.n];
                for &r in test {
                    held[r] = true;
                }
                out.push(Split {
                    train: outer_train.iter().copied().filter(|&r| !held[r]).collect(),
                    test: test.clone(),
                });
            }
        }
        out
    }

    /// Checks the partition structure; any outer-test row inside an inner
    /// fold is a leak.
    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![0u32; self.n];
        for f in &self.outer {
            for &r in f {
                if r >= self.n {
                    return Err(Error::LeakageViolation(format!("row {r} out of range")));
                }
                seen[r] += 1;
            }
        }
        if seen.iter().any(|&c| c != 1) {
            return Err(Error::LeakageViolation("outer folds do not partition the rows".into()));
        }
        if self.inner.len() != self.k_out {
            return Err(Error::LeakageViolation("inner plan missing for some outer fold".into()));
        }
        for o in 0..self.k_out {
            let train: BTreeSet<usize> = self.outer_train(o).into_iter().collect();
            for rep in &self.inner[o] {
                let mut got = BTreeSet::new();
                for f in rep {
                    for &r in f {
                        if !train.contains(&r) {
                            return Err(Error::LeakageViolation(format!(
                                "row {r} of outer test fold {o} appears in an inner fold"
                            )));
                        }
                        if !got.insert(r) {
                            return Err(Error::LeakageViolation(format!("row {r} in two inner folds")));
                        }
                    }
                }
                if got != train {
                    return Err(Error::LeakageViolation(format!(
                        "inner folds of outer fold {o} do not cover its training rows"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Everything the evaluation needs that does not change during refinement.
#[derive(Debug, Clone)]
pub struct Study {
    pub instrument: Instrument,
    /// Harmonized values before any fold transform.
    pub data: HarmonizedMatrix,
    pub rules: Vec<HarmonizationRule>,
    pub outcomes: Vec<OutcomeSpec>,
    pub predicates: PredicateSet,
}

impl Study {
    pub fn new(
        instrument: Instrument,
        data: HarmonizedMatrix,
        rules: Vec<HarmonizationRule>,
        outcomes: Vec<OutcomeSpec>,
        predicates: PredicateSet,
    ) -> Result<Self> {
        if outcomes.is_empty() {
            return Err(Error::Precondition("at least one outcome is required".into()));
        }
        for o in &outcomes {
            o.validate(&instrument, &predicates)?;
            if data.column_index(&o.outcome_id).is_none() {
                return Err(Error::UnknownItem(o.outcome_id.clone()));
            }
            for c in &o.covariate_item_ids {
                if data.column_index(c).is_none() {
                    return Err(Error::UnknownItem(c.clone()));
                }
            }
        }
        Ok(Self {
            instrument,
            data,
            rules,
            outcomes,
            predicates,
        })
    }

    pub fn n(&self) -> usize {
        self.data.n_rows()
    }

    /// Outcome column with rows outside its subsample set to missing.
    pub fn outcome_vector(&self, idx: usize) -> Result<Vec<Option<f64>>> {
        let spec = &self.outcomes[idx];
        let y = self
            .data
            .column(&spec.outcome_id)
            .ok_or_else(|| Error::UnknownItem(spec.outcome_id.clone()))?;
        let keep: Vec<bool> = match &spec.subsample_filter {
            None => vec![true; y.len()],
            Some(name) => {
                let p = self.predicates.get(name)?;
                let col = self
                    .data
                    .column(&p.item_id)
                    .ok_or_else(|| Error::UnknownItem(p.item_id.clone()))?;
                col.iter().map(|v| *v == Some(p.equals)).collect()
            }
        };
        Ok(y.iter().zip(keep).map(|(v, k)| if k { *v } else { None }).collect())
    }

    pub fn outcome_vectors(&self) -> Result<Vec<Vec<Option<f64>>>> {
        (0..self.outcomes.len()).map(|i| self.outcome_vector(i)).collect()
    }

    /// Baseline covariates: the outcome's list, or every control item.
    pub fn covariates(&self, idx: usize) -> Vec<String> {
        let spec = &self.outcomes[idx];
        if !spec.covariate_item_ids.is_empty() {
            return spec.covariate_item_ids.clone();
        }
        self.data
            .item_ids
            .iter()
            .zip(&self.data.usage)
            .filter(|(_, u)| **u == Usage::Control)
            .map(|(id, _)| id.clone())
            .collect()
    }

    /// Strata from the first binary outcome: 0/1, missing as 2.
    pub fn strata(&self) -> Option<Vec<usize>> {
        let idx = self.outcomes.iter().position(|o| o.kind == OutcomeKind::Binary)?;
        let y = self.data.column(&self.outcomes[idx].outcome_id)?;
        Some(
            y.iter()
                .map(|v| match v {
                    Some(x) if *x == 1.0 => 1,
                    Some(_) => 0,
                    None => 2,
                })
                .collect(),
        )
    }

    pub fn plan(&self, cfg: &EcvConfig, seed: u64) -> Result<FoldPlan> {
        make_fold_plan(self.n(), self.strata().as_deref(), cfg.k_out, cfg.k_in, cfg.repeats, seed)
    }

    pub fn model_spec(&self, idx: usize, cfg: &EcvConfig) -> ModelSpec {
        let task = match self.outcomes[idx].kind {
            OutcomeKind::Binary => Task::Binary,
            OutcomeKind::Continuous => Task::Continuous,
        };
        ModelSpec {
            task,
            lambda: cfg.lambda,
            max_iter: cfg.max_iter,
            tol: cfg.tol,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriageThresholds {
    pub signal_share: f64,
    pub weak_share: f64,
}

impl Default for TriageThresholds {
    fn default() -> Self {
        Self {
            signal_share: 0.90,
            weak_share: 0.60,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EcvConfig {
    pub k_out: usize,
    pub k_in: usize,
    pub repeats: usize,
    pub scoring: ScoringRule,
    pub lambda: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub thresholds: TriageThresholds,
}

impl Default for EcvConfig {
    fn default() -> Self {
        Self {
            k_out: 5,
            k_in: 5,
            repeats: 5,
            scoring: ScoringRule::default(),
            lambda: 1e-6,
            max_iter: 100,
            tol: 1e-10,
            thresholds: TriageThresholds::default(),
        }
    }
}

/// Fold-transformed items for one split; rows are `train` then `test`.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitFrame {
    /// Global row index of each local row.
    pub rows: Vec<usize>,
    pub n_train: usize,
    pub items: HarmonizedMatrix,
    pub coverage: CoverageWeights,
    pub degenerate: Vec<String>,
}

impl SplitFrame {
    pub fn build(study: &Study, split: &Split, cfg: &EcvConfig) -> Result<Self> {
        Self::from_data(&study.data, &study.rules, split, cfg.scoring)
    }

    /// Same as [`SplitFrame::build`] without outcome bookkeeping.
    pub fn from_data(data: &HarmonizedMatrix, rules: &[HarmonizationRule], split: &Split, scoring: ScoringRule) -> Result<Self> {
        let opts = FitOptions {
            force_standardize: scoring.kind == ScoringKind::ZscoreThenMean,
        };
        let t = fit_fold_transform_with(data, &split.train, rules, opts)?;
        let rows: Vec<usize> = split.train.iter().chain(&split.test).copied().collect();
        let items = apply_fold_transform(data, &t, &rows)?;
        let local_train: Vec<usize> = (0..split.train.len()).collect();
        let mech: Vec<String> = items
            .item_ids
            .iter()
            .zip(&items.usage)
            .filter(|(_, u)| **u != Usage::Outcome)
            .map(|(id, _)| id.clone())
            .collect();
        let coverage = CoverageWeights::from_training(&items, &local_train, &mech)?;
        Ok(Self {
            rows,
            n_train: split.train.len(),
            items,
            coverage,
            degenerate: t.degenerate_items().into_iter().map(str::to_owned).collect(),
        })
    }

    pub fn train_rows(&self) -> std::ops::Range<usize> {
        0..self.n_train
    }

    pub fn test_rows(&self) -> std::ops::Range<usize> {
        self.n_train..self.rows.len()
    }

    /// Scores for `columns`, standardized with training statistics when the
    /// rule asks for it.
    pub fn score(&self, mapping: &MappingMatrix, columns: &[String], rule: ScoringRule) -> Result<ScoreMatrix> {
        let s = build_scores_with_columns(&self.items, mapping, rule, Some(&self.coverage), columns)?;
        if rule.post_standardize {
            let train: Vec<usize> = self.train_rows().collect();
            Ok(ScoreStandardizer::fit(&s, &train).apply(&s))
        } else {
            Ok(s)
        }
    }
}

pub fn build_frames(study: &Study, splits: &[Split], cfg: &EcvConfig) -> Result<Vec<SplitFrame>> {
    splits.par_iter().map(|s| SplitFrame::build(study, s, cfg)).collect()
}

/// A model column: a fold-transformed item or a score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Col {
    Item(usize),
    Score(usize),
}

fn col_values<'a>(frame: &'a SplitFrame, scores: &'a ScoreMatrix, c: Col) -> &'a [Option<f64>] {
    match c {
        Col::Item(j) => &frame.items.columns[j],
        Col::Score(k) => &scores.values[k],
    }
}

fn gather(frame: &SplitFrame, scores: &ScoreMatrix, cols: &[Col], rows: &[usize]) -> Features {
    let columns = cols
        .iter()
        .map(|&c| {
            let v = col_values(frame, scores, c);
            rows.iter().map(|&r| v[r].expect("complete rows only")).collect()
        })
        .collect();
    Features {
        n: rows.len(),
        columns,
    }
}

fn fit_eval(
    frame: &SplitFrame,
    scores: &ScoreMatrix,
    cols: &[Col],
    y: &[f64],
    train: &[usize],
    test: &[usize],
    spec: &ModelSpec,
    metrics: &[Metric],
) -> Result<Vec<f64>> {
    let ytr: Vec<f64> = train.iter().map(|&r| y[r]).collect();
    let yte: Vec<f64> = test.iter().map(|&r| y[r]).collect();
    let model = evalcore::fit(&gather(frame, scores, cols, train), &ytr, spec)?;
    let pred = model.predict(&gather(frame, scores, cols, test));
    metrics.iter().map(|m| m.compute(&pred, &yte)).collect()
}

/// Local outcome values (global `y` re-indexed to the frame's rows).
fn local_outcome(frame: &SplitFrame, y: &[Option<f64>]) -> Vec<Option<f64>> {
    frame.rows.iter().map(|&g| y[g]).collect()
}

/// Raw `M(full) - M(reduced)` per metric, both fitted on the rows complete
/// for `full`.
pub fn compare_nested(
    frame: &SplitFrame,
    scores: &ScoreMatrix,
    y: &[Option<f64>],
    reduced: &[Col],
    full: &[Col],
    spec: &ModelSpec,
    metrics: &[Metric],
) -> Result<Vec<f64>> {
    let yl = local_outcome(frame, y);
    let ok = |r: usize| yl[r].is_some() && full.iter().all(|&c| col_values(frame, scores, c)[r].is_some());
    let train: Vec<usize> = frame.train_rows().filter(|&r| ok(r)).collect();
    let test: Vec<usize> = frame.test_rows().filter(|&r| ok(r)).collect();
    let yv: Vec<f64> = yl.iter().map(|v| v.unwrap_or(f64::NAN)).collect();
    let m_red = fit_eval(frame, scores, reduced, &yv, &train, &test, spec, metrics)?;
    let m_full = fit_eval(frame, scores, full, &yv, &train, &test, spec, metrics)?;
    Ok(m_full.iter().zip(&m_red).map(|(a, b)| a - b).collect())
}

/// Raw deltas of each candidate over `base`, reusing the baseline fit when
/// the candidate drops no rows.
fn candidate_deltas(
    frame: &SplitFrame,
    scores: &ScoreMatrix,
    y: &[Option<f64>],
    base: &[Col],
    candidates: &[Col],
    spec: &ModelSpec,
    metrics: &[Metric],
) -> Result<Vec<Vec<f64>>> {
    let yl = local_outcome(frame, y);
    let base_ok: Vec<bool> = (0..frame.rows.len())
        .map(|r| yl[r].is_some() && base.iter().all(|&c| col_values(frame, scores, c)[r].is_some()))
        .collect();
    let yv: Vec<f64> = yl.iter().map(|v| v.unwrap_or(f64::NAN)).collect();
    let pick = |range: std::ops::Range<usize>, extra: Option<&[Option<f64>]>| -> Vec<usize> {
        range
            .filter(|&r| base_ok[r] && extra.is_none_or(|e| e[r].is_some()))
            .collect()
    };
    let b_train = pick(frame.train_rows(), None);
    let b_test = pick(frame.test_rows(), None);
    let mut base_metrics: Option<Vec<f64>> = None;
    let mut out = Vec::with_capacity(candidates.len());
    for &c in candidates {
        let cv = col_values(frame, scores, c);
        let train = pick(frame.train_rows(), Some(cv));
        let test = pick(frame.test_rows(), Some(cv));
        let m_base = if train.len() == b_train.len() && test.len() == b_test.len() {
            if base_metrics.is_none() {
                base_metrics = Some(fit_eval(frame, scores, base, &yv, &b_train, &b_test, spec, metrics)?);
            }
            base_metrics.clone().expect("set above")
        } else {
            fit_eval(frame, scores, base, &yv, &train, &test, spec, metrics)?
        };
        let mut full = base.to_vec();
        full.push(c);
        let m_aug = fit_eval(frame, scores, &full, &yv, &train, &test, spec, metrics)?;
        out.push(m_aug.iter().zip(&m_base).map(|(a, b)| a - b).collect());
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    NoiseLike,
    WeakSignal,
    Signal,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Signal => "signal",
            Label::WeakSignal => "weak_signal",
            Label::NoiseLike => "noise_like",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriageLabel {
    pub label: Label,
    pub thresholds: TriageThresholds,
}

const SHARE_EPS: f64 = 1e-9;

pub fn classify_values(mean: f64, share: f64, th: &TriageThresholds) -> Label {
    if mean > 0.0 && share + SHARE_EPS >= th.signal_share {
        Label::Signal
    } else if mean > 0.0 && share + SHARE_EPS >= th.weak_share {
        Label::WeakSignal
    } else {
        Label::NoiseLike
    }
}

pub fn classify(report: &DeltaReport, th: &TriageThresholds) -> TriageLabel {
    TriageLabel {
        label: classify_values(report.mean, report.share_improve, th),
        thresholds: *th,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub candidate: String,
    pub outcome_id: String,
    pub metric: Metric,
    /// Augmented minus baseline, per fold.
    pub raw: Vec<f64>,
    /// Improvement-positive per fold.
    pub oriented: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
    pub share_improve: f64,
    pub n: usize,
    pub items: usize,
    pub label: Label,
}

impl DeltaReport {
    pub fn from_raw(
        candidate: &str,
        outcome_id: &str,
        metric: Metric,
        raw: Vec<f64>,
        n: usize,
        items: usize,
        th: &TriageThresholds,
    ) -> Self {
        let oriented: Vec<f64> = raw.iter().map(|d| d * metric.orientation()).collect();
        let (mean, sd) = mean_sd(&oriented);
        let share = if oriented.is_empty() {
            0.0
        } else {
            oriented.iter().filter(|&&d| d > 0.0).count() as f64 / oriented.len() as f64
        };
        Self {
            candidate: candidate.to_owned(),
            outcome_id: outcome_id.to_owned(),
            metric,
            raw,
            oriented,
            mean,
            sd,
            share_improve: share,
            n,
            items,
            label: classify_values(mean, share, th),
        }
    }
}

/// Mean and sample sd (0 for fewer than two values).
pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64;
    (m, var.sqrt())
}

/// What to score and compare.
#[derive(Debug, Clone, Copy)]
pub struct EvalRequest<'a> {
    pub mapping: &'a MappingMatrix,
    /// Score columns, in report order.
    pub columns: &'a [String],
    /// Columns to evaluate as candidates.
    pub candidates: &'a [String],
    /// Retained scores that join the covariates in the baseline.
    pub baseline_scores: &'a [String],
}

/// Score columns for a mapping: leaves of `t` that carry weight.
pub fn scored_leaves(t: &Taxonomy, w: &MappingMatrix) -> Vec<String> {
    let weighted: BTreeSet<String> = w.subdim_ids().into_iter().collect();
    t.leaf_ids().into_iter().filter(|s| weighted.contains(s)).collect()
}

/// Per-fold deltas for every candidate and outcome, aggregated into reports.
/// `outcomes` overrides the study's outcome vectors (used by placebo draws).
pub fn evaluate_frames(
    study: &Study,
    frames: &[SplitFrame],
    req: &EvalRequest<'_>,
    outcomes: Option<&[Vec<Option<f64>>]>,
    cfg: &EcvConfig,
) -> Result<Vec<DeltaReport>> {
    let owned;
    let ys: &[Vec<Option<f64>>] = match outcomes {
        Some(y) => y,
        None => {
            owned = study.outcome_vectors()?;
            &owned
        }
    };
    let candidates: Vec<&String> = req
        .candidates
        .iter()
        .filter(|c| !req.baseline_scores.contains(c))
        .collect();
    for c in candidates.iter().chain(req.baseline_scores.iter().collect::<Vec<_>>().iter()) {
        if !req.columns.contains(c) {
            return Err(Error::UnknownSubdimension((*c).clone()));
        }
    }
    let col_of = |s: &String| req.columns.iter().position(|c| c == s).expect("checked");
    let cand_cols: Vec<Col> = candidates.iter().map(|c| Col::Score(col_of(c))).collect();

    // per frame: (scores item counts, per outcome: per candidate: per metric raw delta, nonmissing mask)
    type FrameOut = (Vec<usize>, Vec<Vec<Vec<f64>>>, Vec<Vec<Vec<usize>>>);
    let per_frame: Vec<FrameOut> = frames
        .par_iter()
        .map(|frame| -> Result<FrameOut> {
            let scores = frame.score(req.mapping, req.columns, cfg.scoring)?;
            let mut deltas = Vec::new();
            let mut used = Vec::new();
            for (oi, y) in ys.iter().enumerate() {
                let spec = study.model_spec(oi, cfg);
                let metrics = Metric::for_task(spec.task);
                let mut base: Vec<Col> = Vec::new();
                for cov in study.covariates(oi) {
                    let j = frame
                        .items
                        .column_index(&cov)
                        .ok_or_else(|| Error::UnknownItem(cov.clone()))?;
                    base.push(Col::Item(j));
                }
                base.extend(req.baseline_scores.iter().map(|s| Col::Score(col_of(s))));
                let d = candidate_deltas(frame, &scores, y, &base, &cand_cols, &spec, &metrics)?;
                deltas.push(d);
                used.push(
                    cand_cols
                        .iter()
                        .map(|&c| {
                            let v = col_values(frame, &scores, c);
                            frame
                                .test_rows()
                                .filter(|&r| v[r].is_some() && y[frame.rows[r]].is_some())
                                .map(|r| frame.rows[r])
                                .collect()
                        })
                        .collect(),
                );
            }
            let counts = cand_cols
                .iter()
                .map(|&c| match c {
                    Col::Score(k) => scores.item_counts[k],
                    Col::Item(_) => 1,
                })
                .collect();
            Ok((counts, deltas, used))
        })
        .collect::<Result<_>>()?;

    let mut reports = Vec::new();
    for (oi, spec) in study.outcomes.iter().enumerate() {
        let task = study.model_spec(oi, cfg).task;
        for (ci, cand) in candidates.iter().enumerate() {
            let mut seen = vec![false; study.n()];
            for f in &per_frame {
                for &g in &f.2[oi][ci] {
                    seen[g] = true;
                }
            }
            let n = seen.iter().filter(|&&s| s).count();
            let items = per_frame.first().map_or(0, |f| f.0[ci]);
            for (mi, metric) in Metric::for_task(task).into_iter().enumerate() {
                let raw: Vec<f64> = per_frame.iter().map(|f| f.1[oi][ci][mi]).collect();
                reports.push(DeltaReport::from_raw(
                    cand,
                    &spec.outcome_id,
                    metric,
                    raw,
                    n,
                    items,
                    &cfg.thresholds,
                ));
            }
        }
    }
    Ok(reports)
}

/// Frozen artifacts for the final outer evaluation.
#[derive(Debug, Clone, Copy)]
pub struct Frozen<'a> {
    pub taxonomy: &'a Taxonomy,
    pub mapping: &'a MappingMatrix,
    pub baseline_scores: &'a [String],
}

/// One evaluation per outer fold, on outer-test rows only.
pub fn outer_evaluate(study: &Study, frozen: &Frozen<'_>, plan: &FoldPlan, cfg: &EcvConfig) -> Result<Vec<DeltaReport>> {
    if frozen.mapping.taxonomy_version != frozen.taxonomy.version {
        return Err(Error::StaleVersion(format!(
            "mapping v{} targets taxonomy v{}, frozen taxonomy is v{}",
            frozen.mapping.version, frozen.mapping.taxonomy_version, frozen.taxonomy.version
        )));
    }
    plan.validate()?;
    if plan.n != study.n() {
        return Err(Error::ShapeMismatch(format!("plan for {} rows, study has {}", plan.n, study.n())));
    }
    let frames = build_frames(study, &plan.outer_splits(), cfg)?;
    let columns = scored_leaves(frozen.taxonomy, frozen.mapping);
    let req = EvalRequest {
        mapping: frozen.mapping,
        columns: &columns,
        candidates: &columns,
        baseline_scores: frozen.baseline_scores,
    };
    evaluate_frames(study, &frames, &req, None, cfg)
}

/// Primary-metric report of `candidate` for outcome `outcome_id`.
pub fn find_report<'a>(reports: &'a [DeltaReport], candidate: &str, outcome_id: &str, metric: Metric) -> Option<&'a DeltaReport> {
    reports
        .iter()
        .find(|r| r.candidate == candidate && r.outcome_id == outcome_id && r.metric == metric)
}

pub fn write_delta_csv<W: Write>(writer: W, reports: &[DeltaReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "subdim",
        "outcome",
        "metric",
        "items",
        "n",
        "delta_mean",
        "delta_sd",
        "share_improve",
        "label",
    ])?;
    for r in reports {
        w.write_record([
            r.candidate.clone(),
            r.outcome_id.clone(),
            r.metric.as_str().to_string(),
            r.items.to_string(),
            r.n.to_string(),
            format!("{}", r.mean),
            format!("{}", r.sd),
            format!("{}", r.share_improve),
            r.label.as_str().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
