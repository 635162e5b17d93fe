//! The refinement loop: evaluate, diagnose, decide, and split overlap-driven
//! noise through the proposer until gains plateau.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::diagnostics::{
    conditional_contribution, correlation_screen, data_limit_flags, score_frames, ConditionalContribution,
    DataLimitFlag, DataLimitThresholds, OverlapReport, DEFAULT_CUTOFF, DEFAULT_PASS_SHARE,
};
use crate::ecv::{
    build_frames, evaluate_frames, scored_leaves, DeltaReport, EcvConfig, EvalRequest, FoldPlan, Label, Split,
    SplitFrame, Study,
};
use crate::error::{Error, Result};
use crate::evalcore::Metric;
use crate::findings::FindingCode;
use crate::mapping::{changed_rows, validate_mapping, MappingMatrix, MappingRow};
use crate::proposer::{
    render_prompt, request_proposal, AuditStore, Constraints, Payload, PromptContext, ProposalKind, Proposer,
    RefinementPayload,
};
use crate::scoring::ScoringRule;
use crate::taxonomy::{Subdimension, Taxonomy, TaxonomyEdit, TaxonomyLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Retain,
    Refine,
    Defer,
    Discard,
    /// Noise-like but not yet discardable (or anchored, which is never
    /// discarded).
    Hold,
}

impl Decision {
    pub fn as_str(self) -> &'static str {
        match self {
            Decision::Retain => "retain",
            Decision::Refine => "refine",
            Decision::Defer => "defer",
            Decision::Discard => "discard",
            Decision::Hold => "hold",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubdimDecision {
    pub subdim: String,
    pub decision: Decision,
    /// Best primary-metric label across outcomes.
    pub label: Label,
    pub reason: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster: Option<usize>,
    /// Consecutive noise-like rounds, this one included.
    pub noise_streak: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecideConfig {
    pub discard_after: usize,
}

impl Default for DecideConfig {
    fn default() -> Self {
        Self { discard_after: 2 }
    }
}

fn primary_reports<'a>(reports: &'a [DeltaReport], subdim: &str) -> Vec<&'a DeltaReport> {
    reports
        .iter()
        .filter(|r| r.candidate == subdim && r.metric == primary_metric(r.metric))
        .collect()
}

fn primary_metric(m: Metric) -> Metric {
    match m {
        Metric::Auc | Metric::Logloss => Metric::Auc,
        Metric::R2 | Metric::Rmse => Metric::R2,
    }
}

/// Applies the retain / refine / defer / discard rules to one round.
/// `streaks` holds each subdim's noise-like streak before this round.
pub fn decide(
    reports: &[DeltaReport],
    overlap: &OverlapReport,
    limits: &[DataLimitFlag],
    cc: &[ConditionalContribution],
    streaks: &BTreeMap<String, usize>,
    anchored: &BTreeSet<String>,
    cfg: &DecideConfig,
) -> Result<Vec<SubdimDecision>> {
    let mut subdims: Vec<String> = Vec::new();
    for r in reports {
        if !subdims.contains(&r.candidate) {
            subdims.push(r.candidate.clone());
        }
    }
    let known = |s: &String| subdims.contains(s);
    for s in overlap.clusters.iter().flatten() {
        if !known(s) {
            return Err(Error::InconsistentRound(format!("overlap cluster names `{s}` without a report")));
        }
    }
    for f in limits {
        if !known(&f.subdim) {
            return Err(Error::InconsistentRound(format!("data-limit flag for `{}` without a report", f.subdim)));
        }
    }
    for c in cc {
        if overlap.clusters.get(c.cluster_id).is_none_or(|cl| !cl.contains(&c.candidate)) {
            return Err(Error::InconsistentRound(format!(
                "conditional contribution for `{}` does not match cluster {}",
                c.candidate, c.cluster_id
            )));
        }
    }

    let mut out = Vec::with_capacity(subdims.len());
    for s in subdims {
        let label = primary_reports(reports, &s)
            .iter()
            .map(|r| r.label)
            .max()
            .unwrap_or(Label::NoiseLike);
        let cluster = overlap.cluster_of(&s);
        let is_anchored = anchored.contains(&s);
        let prev = streaks.get(&s).copied().unwrap_or(0);
        let streak = if label == Label::NoiseLike { prev + 1 } else { 0 };
        let (decision, reason) = if label != Label::NoiseLike {
            (Decision::Retain, format!("{} on at least one outcome", label.as_str()))
        } else if let Some(f) = limits.iter().find(|f| f.subdim == s) {
            (Decision::Defer, format!("data-limited: {:?}", f.reasons))
        } else if let Some(ci) = cluster {
            if cc.iter().any(|c| c.candidate == s && c.cluster_id == ci && c.pass) {
                (Decision::Retain, "passes conditional contribution in its cluster".to_string())
            } else if is_anchored {
                (Decision::Hold, "anchored; weights stay fixed".to_string())
            } else {
                (Decision::Refine, format!("noise-like and overlapping cluster {ci}"))
            }
        } else if is_anchored {
            (Decision::Hold, "anchored; never discarded".to_string())
        } else if streak >= cfg.discard_after {
            (Decision::Discard, format!("noise-like for {streak} consecutive rounds"))
        } else {
            (Decision::Hold, format!("noise-like for {streak} round(s)"))
        };
        out.push(SubdimDecision {
            subdim: s,
            decision,
            label,
            reason,
            cluster,
            noise_streak: streak,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refined {
    pub taxonomy: Taxonomy,
    pub mapping: MappingMatrix,
    pub edit: TaxonomyEdit,
    pub changed: BTreeSet<String>,
}

/// Splits `target` into the payload's children and rewrites the payload's
/// rows. Only items loading on the target or its partners may change, and
/// anchored weights may not move.
pub fn apply_refinement(
    taxonomy: &Taxonomy,
    mapping: &MappingMatrix,
    target: &str,
    partners: &[String],
    payload: &RefinementPayload,
    instrument: Option<&crate::instrument::Instrument>,
) -> Result<Refined> {
    if payload.target != target {
        return Err(Error::ConstraintViolation(format!(
            "proposal targets `{}`, expected `{target}`",
            payload.target
        )));
    }
    if mapping.taxonomy_version != taxonomy.version {
        return Err(Error::StaleVersion(format!(
            "mapping targets taxonomy v{}, current is v{}",
            mapping.taxonomy_version, taxonomy.version
        )));
    }
    let mut cluster = vec![target.to_string()];
    cluster.extend(partners.iter().cloned());
    let neighborhood = mapping.items_loading_on(&cluster);
    let anchored = taxonomy.anchored_ids();
    for r in &payload.rows {
        let cur = mapping.row(&r.item_id).ok_or_else(|| Error::UnknownItem(r.item_id.clone()))?;
        if cur.anchored {
            return Err(Error::AnchorViolation(format!("row `{}` is anchored", r.item_id)));
        }
        if !neighborhood.contains(&r.item_id) {
            return Err(Error::NeighborhoodViolation(r.item_id.clone()));
        }
    }

    let children: Vec<Subdimension> = payload
        .children
        .iter()
        .map(|c| Subdimension::new(c.subdim_id.clone(), String::new(), c.definition.clone()))
        .collect();
    let edit = TaxonomyEdit::Split {
        parent: target.to_string(),
        children,
    };
    let next_tax = edit.apply(taxonomy)?;
    let leaves: BTreeSet<String> = next_tax.leaf_ids().into_iter().collect();

    let mut rows: Vec<MappingRow> = mapping.rows.clone();
    for r in &payload.rows {
        for s in std::iter::once(&r.primary).chain(r.secondary.as_ref().map(|s| &s.subdim_id)) {
            if !leaves.contains(s) {
                return Err(Error::UnknownSubdimension(s.clone()));
            }
        }
        let pos = rows.iter().position(|x| x.item_id == r.item_id).expect("checked above");
        let new_row = r.resolve(&rows[pos], &anchored);
        for a in &anchored {
            if new_row.weight_on(a) != rows[pos].weight_on(a) {
                return Err(Error::AnchorViolation(format!(
                    "row `{}` changes its weight on anchored `{a}`",
                    r.item_id
                )));
            }
        }
        rows[pos] = new_row;
    }
    let mut next_map = MappingMatrix {
        version: mapping.version + 1,
        taxonomy_version: next_tax.version,
        sparsity_cap: mapping.sparsity_cap,
        threshold: mapping.threshold,
        rows,
    };
    next_map.mark_anchored(&next_tax);
    let report = validate_mapping(&next_map, &next_tax, instrument);
    let blocking: Vec<_> = report
        .findings
        .into_iter()
        .filter(|f| f.code != FindingCode::Renormalized)
        .collect();
    if !blocking.is_empty() {
        return Err(Error::InvalidReallocation(blocking));
    }
    let changed = changed_rows(mapping, &next_map);
    Ok(Refined {
        taxonomy: next_tax,
        mapping: next_map,
        edit,
        changed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StoppingRule {
    pub plateau_delta: f64,
    pub patience: usize,
    pub max_rounds: usize,
}

impl Default for StoppingRule {
    fn default() -> Self {
        Self {
            plateau_delta: 0.002,
            patience: 2,
            max_rounds: 5,
        }
    }
}

impl StoppingRule {
    pub fn check(&self) -> Result<()> {
        if !(self.plateau_delta > 0.0) {
            return Err(Error::InvalidParameter("plateau delta must be > 0".into()));
        }
        if self.patience < 1 {
            return Err(Error::InvalidParameter("patience must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    pub stopping: StoppingRule,
    pub cutoff: f64,
    pub limits: DataLimitThresholds,
    pub decide: DecideConfig,
    pub pass_share: f64,
    pub proposer_attempts: u32,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            stopping: StoppingRule::default(),
            cutoff: DEFAULT_CUTOFF,
            limits: DataLimitThresholds::default(),
            decide: DecideConfig::default(),
            pass_share: DEFAULT_PASS_SHARE,
            proposer_attempts: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppliedRefinement {
    pub target: String,
    pub partners: Vec<String>,
    pub payload: RefinementPayload,
    pub changed_rows: Vec<String>,
    pub taxonomy_version: u32,
    pub mapping_version: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationState {
    pub round: usize,
    pub taxonomy_version: u32,
    pub mapping_version: u32,
    pub reports: Vec<DeltaReport>,
    pub overlap: OverlapReport,
    pub limits: Vec<DataLimitFlag>,
    pub conditional: Vec<ConditionalContribution>,
    pub decisions: Vec<SubdimDecision>,
    /// Best oriented primary-metric mean per outcome.
    pub best: BTreeMap<String, f64>,
    pub plateau_rounds: usize,
    pub refinements: Vec<AppliedRefinement>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl IterationState {
    pub fn decision(&self, subdim: &str) -> Option<&SubdimDecision> {
        self.decisions.iter().find(|d| d.subdim == subdim)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    MaxRounds,
    ProposerFailure,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopResult {
    pub states: Vec<IterationState>,
    pub taxonomy_log: TaxonomyLog,
    pub initial_mapping: MappingMatrix,
    pub taxonomy: Taxonomy,
    pub mapping: MappingMatrix,
    pub stop: StopReason,
}

impl LoopResult {
    pub fn refinements(&self) -> impl Iterator<Item = &AppliedRefinement> {
        self.states.iter().flat_map(|s| s.refinements.iter())
    }
}

fn best_per_outcome(reports: &[DeltaReport]) -> BTreeMap<String, f64> {
    let mut best: BTreeMap<String, f64> = BTreeMap::new();
    for r in reports.iter().filter(|r| r.metric == primary_metric(r.metric)) {
        let e = best.entry(r.outcome_id.clone()).or_insert(f64::NEG_INFINITY);
        if r.mean > *e {
            *e = r.mean;
        }
    }
    best
}

fn improved(prev: &BTreeMap<String, f64>, cur: &BTreeMap<String, f64>, delta: f64) -> bool {
    cur.iter()
        .any(|(o, v)| prev.get(o).is_none_or(|p| v - p >= delta))
}

/// Inputs that stay fixed across rounds.
pub struct LoopInputs<'a> {
    pub study: &'a Study,
    pub plan: &'a FoldPlan,
    pub outer_fold: usize,
    pub ecv: &'a EcvConfig,
    pub config: &'a LoopConfig,
    pub proposer: &'a dyn Proposer,
    pub audit: Option<&'a AuditStore>,
}

struct Round {
    reports: Vec<DeltaReport>,
    overlap: OverlapReport,
    limits: Vec<DataLimitFlag>,
    conditional: Vec<ConditionalContribution>,
}

fn evaluate_round(
    inp: &LoopInputs<'_>,
    frames: &[SplitFrame],
    diag: &SplitFrame,
    taxonomy: &Taxonomy,
    mapping: &MappingMatrix,
    discarded: &BTreeSet<String>,
) -> Result<Round> {
    let columns: Vec<String> = scored_leaves(taxonomy, mapping)
        .into_iter()
        .filter(|c| !discarded.contains(c))
        .collect();
    let req = EvalRequest {
        mapping,
        columns: &columns,
        candidates: &columns,
        baseline_scores: &[],
    };
    let reports = evaluate_frames(inp.study, frames, &req, None, inp.ecv)?;

    let train: Vec<usize> = diag.train_rows().collect();
    let scores = diag.score(mapping, &columns, inp.ecv.scoring)?;
    let overlap = correlation_screen(&scores, inp.config.cutoff, &train)?;
    let raw_rule = ScoringRule {
        post_standardize: false,
        ..inp.ecv.scoring
    };
    let raw = diag.score(mapping, &columns, raw_rule)?;
    let limits = data_limit_flags(&raw, &train, mapping, &diag.degenerate, &inp.config.limits);

    let mut conditional = Vec::new();
    if !overlap.clusters.is_empty() {
        let fold_scores = score_frames(frames, mapping, &columns, inp.ecv.scoring)?;
        for (ci, cluster) in overlap.clusters.iter().enumerate() {
            for member in cluster {
                for oi in 0..inp.study.outcomes.len() {
                    conditional.push(conditional_contribution(
                        inp.study,
                        frames,
                        &fold_scores,
                        ci,
                        cluster,
                        member,
                        &[],
                        oi,
                        inp.ecv,
                        inp.config.pass_share,
                    )?);
                }
            }
        }
    }
    Ok(Round {
        reports,
        overlap,
        limits,
        conditional,
    })
}

fn propose_refinement(
    inp: &LoopInputs<'_>,
    taxonomy: &Taxonomy,
    mapping: &MappingMatrix,
    target: &str,
    partners: &[String],
) -> Result<RefinementPayload> {
    let mut cluster = vec![target.to_string()];
    cluster.extend(partners.iter().cloned());
    let neighborhood: Vec<String> = mapping.items_loading_on(&cluster).into_iter().collect();
    let mut ctx = PromptContext::with_items(&inp.study.instrument, &neighborhood)?.with_taxonomy(taxonomy);
    ctx.target = Some(target.to_string());
    ctx.target_definition = taxonomy.get(target).map(|s| s.definition.clone());
    ctx.partners = partners.to_vec();
    ctx.mapping_version = Some(mapping.version);
    let constraints = Constraints {
        neighborhood,
        ..Constraints::default()
    };
    let req = render_prompt(ProposalKind::Refinement, &ctx, constraints)?;
    let resp = request_proposal(inp.proposer, &req, inp.audit, inp.config.proposer_attempts)?;
    match resp.payload {
        Payload::Refinement(p) => Ok(p),
        _ => Err(Error::ProposerFailure("expected a refinement payload".into())),
    }
}

/// Runs the loop on the inner folds of one outer fold.
pub fn run_loop(inp: &LoopInputs<'_>, taxonomy: &Taxonomy, mapping: &MappingMatrix) -> Result<LoopResult> {
    inp.config.stopping.check()?;
    inp.plan.validate()?;
    if mapping.taxonomy_version != taxonomy.version {
        return Err(Error::StaleVersion(format!(
            "mapping targets taxonomy v{}, current is v{}",
            mapping.taxonomy_version, taxonomy.version
        )));
    }
    let outer_train = inp.plan.outer_train(inp.outer_fold);
    let frames = build_frames(inp.study, &inp.plan.inner_splits(inp.outer_fold), inp.ecv)?;
    let diag = SplitFrame::build(
        inp.study,
        &Split {
            train: outer_train,
            test: vec![],
        },
        inp.ecv,
    )?;
    let anchored = taxonomy.anchored_ids();

    let mut log = TaxonomyLog::new(taxonomy.clone());
    let mut tax = taxonomy.clone();
    let mut map = mapping.clone();
    let mut streaks: BTreeMap<String, usize> = BTreeMap::new();
    let mut discarded: BTreeSet<String> = BTreeSet::new();
    let mut prev_best: Option<BTreeMap<String, f64>> = None;
    let mut plateau = 0usize;
    let mut states = Vec::new();

    for round in 0.. {
        let r = evaluate_round(inp, &frames, &diag, &tax, &map, &discarded)?;
        let decisions = decide(
            &r.reports,
            &r.overlap,
            &r.limits,
            &r.conditional,
            &streaks,
            &anchored,
            &inp.config.decide,
        )?;
        let best = best_per_outcome(&r.reports);
        plateau = match &prev_best {
            Some(p) if improved(p, &best, inp.config.stopping.plateau_delta) => 0,
            _ => plateau + 1,
        };
        for d in &decisions {
            streaks.insert(d.subdim.clone(), d.noise_streak);
            if d.decision == Decision::Discard {
                discarded.insert(d.subdim.clone());
            }
        }
        let mut state = IterationState {
            round,
            taxonomy_version: tax.version,
            mapping_version: map.version,
            reports: r.reports,
            overlap: r.overlap,
            limits: r.limits,
            conditional: r.conditional,
            decisions,
            best: best.clone(),
            plateau_rounds: plateau,
            refinements: vec![],
            failure: None,
        };
        prev_best = Some(best);

        let targets: Vec<(String, Vec<String>)> = state
            .decisions
            .iter()
            .filter(|d| d.decision == Decision::Refine)
            .map(|d| (d.subdim.clone(), state.overlap.partners(&d.subdim)))
            .collect();
        let stop = if targets.is_empty() && plateau >= inp.config.stopping.patience {
            Some(StopReason::Converged)
        } else if round >= inp.config.stopping.max_rounds {
            Some(StopReason::MaxRounds)
        } else {
            None
        };
        if let Some(stop) = stop {
            states.push(state);
            return Ok(finish(states, log, mapping, tax, map, stop));
        }

        for (target, partners) in targets {
            let applied = propose_refinement(inp, &tax, &map, &target, &partners).and_then(|p| {
                let refined = apply_refinement(&tax, &map, &target, &partners, &p, Some(&inp.study.instrument))?;
                Ok((p, refined))
            });
            match applied {
                Ok((payload, refined)) => {
                    log.apply(refined.edit.clone(), format!("round {round}: split `{target}`"))?;
                    state.refinements.push(AppliedRefinement {
                        target,
                        partners,
                        payload,
                        changed_rows: refined.changed.into_iter().collect(),
                        taxonomy_version: refined.taxonomy.version,
                        mapping_version: refined.mapping.version,
                    });
                    tax = refined.taxonomy;
                    map = refined.mapping;
                }
                Err(e) => {
                    state.failure = Some(format!("{}: {e}", e.kind()));
                    states.push(state);
                    return Ok(finish(states, log, mapping, tax, map, StopReason::ProposerFailure));
                }
            }
        }
        states.push(state);
    }
    unreachable!("loop returns from inside")
}

fn finish(
    states: Vec<IterationState>,
    log: TaxonomyLog,
    initial: &MappingMatrix,
    taxonomy: Taxonomy,
    mapping: MappingMatrix,
    stop: StopReason,
) -> LoopResult {
    LoopResult {
        states,
        taxonomy_log: log,
        initial_mapping: initial.clone(),
        taxonomy,
        mapping,
        stop,
    }
}

/// Rebuilds the final artifacts from the initial ones and the log.
pub fn replay(
    taxonomy: &Taxonomy,
    mapping: &MappingMatrix,
    refinements: &[AppliedRefinement],
    instrument: Option<&crate::instrument::Instrument>,
) -> Result<(Taxonomy, MappingMatrix)> {
    let mut tax = taxonomy.clone();
    let mut map = mapping.clone();
    for a in refinements {
        let r = apply_refinement(&tax, &map, &a.target, &a.partners, &a.payload, instrument)?;
        if r.taxonomy.version != a.taxonomy_version || r.mapping.version != a.mapping_version {
            return Err(Error::StaleVersion(format!(
                "replay of `{}` reached v{}/v{}, log says v{}/v{}",
                a.target, r.taxonomy.version, r.mapping.version, a.taxonomy_version, a.mapping_version
            )));
        }
        tax = r.taxonomy;
        map = r.mapping;
    }
    Ok((tax, map))
}

/// One JSON object per round.
pub fn write_iteration_log<W: Write>(mut w: W, states: &[IterationState]) -> Result<()> {
    for s in states {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::{LimitReason, PairCorrelation};
    use crate::ecv::TriageThresholds;
    use crate::proposer::{ChildSpec, RefinementRow};
    use crate::taxonomy::Anchor;

    fn report(c: &str, o: &str, metric: Metric, mean: f64, share: f64) -> DeltaReport {
        let th = TriageThresholds::default();
        DeltaReport {
            candidate: c.into(),
            outcome_id: o.into(),
            metric,
            raw: vec![],
            oriented: vec![],
            mean,
            sd: 0.0,
            share_improve: share,
            n: 100,
            items: 3,
            label: crate::ecv::classify_values(mean, share, &th),
        }
    }

    fn overlap(clusters: Vec<Vec<&str>>) -> OverlapReport {
        OverlapReport {
            cutoff: 0.85,
            flagged: vec![PairCorrelation {
                subdim_a: "financial_literacy".into(),
                subdim_b: "perceived_generosity".into(),
                rho: 0.948,
                n: 100,
            }],
            clusters: clusters
                .into_iter()
                .map(|c| c.into_iter().map(String::from).collect())
                .collect(),
            pairs: vec![],
            skipped: vec![],
        }
    }

    fn reference_round() -> Vec<DeltaReport> {
        vec![
            report("service_tenure_lockin", "accept", Metric::Auc, 0.114, 1.0),
            report("service_tenure_lockin", "rate", Metric::R2, 0.05, 1.0),
            report("perceived_generosity", "accept", Metric::Auc, -0.0026, 0.4),
            report("perceived_generosity", "rate", Metric::R2, -0.0005, 0.3),
            report("financial_literacy", "accept", Metric::Auc, 0.08, 1.0),
            report("financial_literacy", "rate", Metric::R2, 0.0009, 0.6),
            report("health_risk", "accept", Metric::Auc, -0.002, 0.32),
            report("health_risk", "rate", Metric::R2, -0.001, 0.3),
        ]
    }

    fn anchored() -> BTreeSet<String> {
        ["financial_literacy".to_string()].into()
    }

    #[test]
    fn decides_reference_round() {
        let ov = overlap(vec![vec!["financial_literacy", "perceived_generosity"]]);
        let d = decide(&reference_round(), &ov, &[], &[], &BTreeMap::new(), &anchored(), &DecideConfig::default()).unwrap();
        let get = |s: &str| d.iter().find(|x| x.subdim == s).unwrap().decision;
        assert_eq!(get("service_tenure_lockin"), Decision::Retain);
        assert_eq!(get("perceived_generosity"), Decision::Refine);
        assert_eq!(get("financial_literacy"), Decision::Retain);
        assert_eq!(get("health_risk"), Decision::Hold);
    }

    #[test]
    fn data_limited_defers_and_streak_discards() {
        let ov = overlap(vec![]);
        let flag = DataLimitFlag {
            subdim: "perceived_generosity".into(),
            reasons: vec![LimitReason::LowN],
            n_nonmissing: 12,
            items: 3,
            sd: 1.0,
            thresholds: DataLimitThresholds::default(),
        };
        let streaks: BTreeMap<String, usize> = [("health_risk".to_string(), 1)].into();
        let d = decide(&reference_round(), &ov, &[flag], &[], &streaks, &anchored(), &DecideConfig::default()).unwrap();
        let get = |s: &str| d.iter().find(|x| x.subdim == s).unwrap().decision;
        assert_eq!(get("perceived_generosity"), Decision::Defer);
        assert_eq!(get("health_risk"), Decision::Discard);
    }

    #[test]
    fn anchored_never_discarded() {
        let reports = vec![report("financial_literacy", "accept", Metric::Auc, -0.01, 0.1)];
        let streaks: BTreeMap<String, usize> = [("financial_literacy".to_string(), 9)].into();
        let d = decide(&reports, &overlap(vec![]), &[], &[], &streaks, &anchored(), &DecideConfig::default()).unwrap();
        assert_eq!(d[0].decision, Decision::Hold);
    }

    #[test]
    fn cluster_member_passing_cc_is_retained() {
        let ov = overlap(vec![vec!["financial_literacy", "perceived_generosity"]]);
        let cc = ConditionalContribution {
            cluster_id: 0,
            candidate: "perceived_generosity".into(),
            outcome_id: "accept".into(),
            metric: Metric::Auc,
            raw: vec![],
            oriented: vec![],
            mean: 0.01,
            share_improve: 0.8,
            pass: true,
        };
        let d = decide(&reference_round(), &ov, &[], &[cc], &BTreeMap::new(), &anchored(), &DecideConfig::default()).unwrap();
        assert_eq!(d.iter().find(|x| x.subdim == "perceived_generosity").unwrap().decision, Decision::Retain);
    }

    #[test]
    fn inconsistent_inputs() {
        let ov = overlap(vec![vec!["nope", "perceived_generosity"]]);
        let e = decide(&reference_round(), &ov, &[], &[], &BTreeMap::new(), &anchored(), &DecideConfig::default()).unwrap_err();
        assert_eq!(e.kind(), "InconsistentRound");
    }

    fn fixture() -> (Taxonomy, MappingMatrix) {
        let mut fl = Subdimension::new("financial_literacy", "Cognition_time", "knowledge");
        fl.anchored = true;
        let t = Taxonomy::new(
            1,
            vec![
                Anchor {
                    anchor_id: "Cognition_time".into(),
                    definition: "c".into(),
                },
                Anchor {
                    anchor_id: "DB_beliefs".into(),
                    definition: "b".into(),
                },
            ],
            vec![
                fl,
                Subdimension::new("perceived_generosity", "DB_beliefs", "generosity"),
                Subdimension::new("tenure", "DB_beliefs", "tenure"),
            ],
        );
        let mut w = MappingMatrix::new(
            1,
            vec![
                MappingRow::new("Q14", &[("perceived_generosity", 0.75), ("financial_literacy", 0.25)]),
                MappingRow::new("Q16", &[("perceived_generosity", 0.75), ("financial_literacy", 0.25)]),
                MappingRow::new("Q18", &[("perceived_generosity", 0.60), ("financial_literacy", 0.40)]),
                MappingRow::new("Q34", &[("financial_literacy", 1.0)]),
                MappingRow::new("Q4", &[("tenure", 1.0)]),
            ],
        );
        w.mark_anchored(&t);
        (t, w)
    }

    fn payload(rows: &[(&str, &str)]) -> RefinementPayload {
        RefinementPayload {
            target: "perceived_generosity".into(),
            children: vec![
                ChildSpec {
                    subdim_id: "benefit_value".into(),
                    definition: "value".into(),
                },
                ChildSpec {
                    subdim_id: "employer_contribution".into(),
                    definition: "contribution".into(),
                },
            ],
            rows: rows
                .iter()
                .map(|(i, p)| RefinementRow {
                    item_id: i.to_string(),
                    primary: p.to_string(),
                    secondary: None,
                    rationale: String::new(),
                    not_this: String::new(),
                })
                .collect(),
        }
    }

    fn generosity_split() -> RefinementPayload {
        payload(&[("Q14", "benefit_value"), ("Q16", "benefit_value"), ("Q18", "employer_contribution")])
    }

    #[test]
    fn applies_generosity_split() {
        let (t, w) = fixture();
        let partners = vec!["financial_literacy".to_string()];
        let r = apply_refinement(&t, &w, "perceived_generosity", &partners, &generosity_split(), None).unwrap();
        let q14 = r.mapping.row("Q14").unwrap();
        assert_eq!(q14.weight_on("financial_literacy"), 0.25);
        assert_eq!(q14.weight_on("benefit_value"), 0.75);
        let q18 = r.mapping.row("Q18").unwrap();
        assert_eq!(q18.weight_on("financial_literacy"), 0.40);
        assert_eq!(q18.weight_on("employer_contribution"), 0.60);
        assert_eq!(r.mapping.row("Q4"), w.row("Q4"));
        assert_eq!(r.mapping.row("Q34"), w.row("Q34"));
        assert_eq!(r.changed, ["Q14", "Q16", "Q18"].iter().map(|s| s.to_string()).collect());
        assert_eq!((r.taxonomy.version, r.mapping.version, r.mapping.taxonomy_version), (2, 2, 2));
    }

    #[test]
    fn outside_item_is_neighborhood_violation() {
        let (t, w) = fixture();
        let mut p = generosity_split();
        p.rows.push(RefinementRow {
            item_id: "Q4".into(),
            primary: "benefit_value".into(),
            secondary: None,
            rationale: String::new(),
            not_this: String::new(),
        });
        let e = apply_refinement(&t, &w, "perceived_generosity", &["financial_literacy".into()], &p, None).unwrap_err();
        assert_eq!(e.kind(), "NeighborhoodViolation");
    }

    #[test]
    fn anchored_row_is_anchor_violation() {
        let (t, w) = fixture();
        let mut p = generosity_split();
        p.rows.push(RefinementRow {
            item_id: "Q34".into(),
            primary: "benefit_value".into(),
            secondary: None,
            rationale: String::new(),
            not_this: String::new(),
        });
        let e = apply_refinement(&t, &w, "perceived_generosity", &["financial_literacy".into()], &p, None).unwrap_err();
        assert_eq!(e.kind(), "AnchorViolation");

        let mut p = generosity_split();
        p.rows[0].secondary = Some(crate::proposer::SecondaryLoading {
            subdim_id: "financial_literacy".into(),
            weight: 0.1,
        });
        let e = apply_refinement(&t, &w, "perceived_generosity", &["financial_literacy".into()], &p, None).unwrap_err();
        assert_eq!(e.kind(), "AnchorViolation");
    }

    #[test]
    fn incomplete_split_rejected() {
        let (t, w) = fixture();
        let p = payload(&[("Q14", "benefit_value")]);
        let e = apply_refinement(&t, &w, "perceived_generosity", &["financial_literacy".into()], &p, None).unwrap_err();
        assert_eq!(e.kind(), "InvalidReallocation");
    }

    #[test]
    fn replay_matches() {
        let (t, w) = fixture();
        let partners = vec!["financial_literacy".to_string()];
        let r = apply_refinement(&t, &w, "perceived_generosity", &partners, &generosity_split(), None).unwrap();
        let applied = AppliedRefinement {
            target: "perceived_generosity".into(),
            partners,
            payload: generosity_split(),
            changed_rows: r.changed.iter().cloned().collect(),
            taxonomy_version: 2,
            mapping_version: 2,
        };
        let (t2, w2) = replay(&t, &w, &[applied], None).unwrap();
        assert_eq!(t2, r.taxonomy);
        assert_eq!(w2, r.mapping);
    }

    #[test]
    fn stopping_rule_checks() {
        assert!(StoppingRule::default().check().is_ok());
        assert!(StoppingRule {
            plateau_delta: 0.0,
            ..StoppingRule::default()
        }
        .check()
        .is_err());
        assert!(StoppingRule {
            patience: 0,
            ..StoppingRule::default()
        }
        .check()
        .is_err());
    }
}
