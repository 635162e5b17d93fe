use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use surveyscope::diagnostics::{correlation_screen, data_limit_flags, write_overlap_csv, OverlapReport};
use surveyscope::ecv::{
    build_frames, evaluate_frames, outer_evaluate, scored_leaves, write_delta_csv, DeltaReport, EcvConfig, EvalRequest,
    Frozen, Split, SplitFrame, Study,
};
use surveyscope::error::{Error, Result};
use surveyscope::evalcore::Metric;
use surveyscope::findings::{FindingCode, ValidationReport};
use surveyscope::harmonize::{apply_rules, load_rules, HarmonizationRule, HarmonizedMatrix};
use surveyscope::instrument::{load_instrument, load_responses, Instrument, MissingTokens, OutcomeSpec, PredicateSet};
use surveyscope::mapping::{
    cross_loading_concentration, load_mapping, sparsify_threshold, sparsify_top_m, validate_mapping, write_mapping,
    MappingMatrix,
};
use surveyscope::placebo::{run_placebo, write_draws_csv, PlaceboConfig, PlaceboInputs, PlaceboKind};
use surveyscope::proposer::{AuditStore, EndpointConfig, FixtureProposer, HttpTransport, Proposer, RemoteProposer};
use surveyscope::refine::{run_loop, write_iteration_log, LoopInputs};
use surveyscope::scoring::{score_coverage, ScoreMatrix, ScoringRule};
use surveyscope::synth::{generate, SynthSpec};
use surveyscope::taxonomy::{load_taxonomy, validate_taxonomy, write_taxonomy, Taxonomy};

use crate::config::RunConfig;

/// Exit status of a command that did not hit a hard error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Clean,
    Findings,
}

pub struct Ctx {
    pub out: PathBuf,
    pub cfg: RunConfig,
}

impl Ctx {
    fn json<T: Serialize + ?Sized>(&self, name: &str, v: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(v)?;
        text.push('\n');
        fs::write(self.out.join(name), text)?;
        Ok(())
    }

    fn file(&self, name: &str) -> Result<fs::File> {
        Ok(fs::File::create(self.out.join(name))?)
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
}

fn missing_tokens(c: &RunConfig) -> MissingTokens {
    c.missing_tokens.clone().map(MissingTokens::new).unwrap_or_default()
}

fn load_harmonized(c: &RunConfig) -> Result<(Instrument, HarmonizedMatrix, Vec<HarmonizationRule>)> {
    let instrument = load_instrument(c.path(&c.instrument, "instrument")?)?;
    let raw = load_responses(c.path(&c.responses, "responses")?, &instrument, &missing_tokens(c))?;
    let rules = load_rules(c.path(&c.rules, "rules")?)?;
    let data = apply_rules(&raw, &instrument, &rules)?;
    Ok((instrument, data, rules))
}

fn load_study(c: &RunConfig) -> Result<Study> {
    let (instrument, data, rules) = load_harmonized(c)?;
    let outcomes: Vec<OutcomeSpec> = read_json(&c.path(&c.outcomes, "outcomes")?)?;
    let predicates: PredicateSet = match &c.predicates {
        Some(p) => read_json(p)?,
        None => PredicateSet::default(),
    };
    Study::new(instrument, data, rules, outcomes, predicates)
}

/// Taxonomy and mapping with `--tau` and `--top-m` applied, in that order.
fn load_model(c: &RunConfig) -> Result<(Taxonomy, MappingMatrix)> {
    let t = load_taxonomy(c.path(&c.taxonomy, "taxonomy")?)?;
    let mut w = load_mapping(c.path(&c.mapping, "mapping")?)?;
    if let Some(tau) = c.tau {
        w = sparsify_threshold(&w, tau)?;
    }
    if let Some(m) = c.top_m {
        w = sparsify_top_m(&w, m)?;
    }
    w.mark_anchored(&t);
    Ok((t, w))
}

/// Validation findings that block computation. Unknown subdimensions are a
/// hard error rather than a finding.
fn gate(ctx: &Ctx, t: &Taxonomy, w: &MappingMatrix, instrument: Option<&Instrument>) -> Result<Option<ValidationReport>> {
    let tr = validate_taxonomy(t);
    let mut mr = validate_mapping(w, t, instrument);
    if let Some(f) = mr.with_code(FindingCode::UnknownSubdimension).next() {
        return Err(Error::UnknownSubdimension(f.message.clone()));
    }
    mr.findings.retain(|f| f.code != FindingCode::Renormalized);
    let mut all = tr;
    all.findings.extend(mr.findings);
    if all.is_valid() {
        Ok(None)
    } else {
        ctx.json("validation.json", &all)?;
        Ok(Some(all))
    }
}

/// Scores over every row, with fold statistics fitted on every row. Used for
/// descriptive output and overlap screening, never for held-out metrics.
fn full_sample_scores(
    data: &HarmonizedMatrix,
    rules: &[HarmonizationRule],
    t: &Taxonomy,
    w: &MappingMatrix,
    rule: ScoringRule,
) -> Result<(SplitFrame, ScoreMatrix)> {
    let split = Split {
        train: (0..data.n_rows()).collect(),
        test: vec![],
    };
    let frame = SplitFrame::from_data(data, rules, &split, rule)?;
    let s = frame.score(w, &scored_leaves(t, w), rule)?;
    Ok((frame, s))
}

pub fn synth(ctx: &Ctx) -> Result<Status> {
    let c = &ctx.cfg;
    let mut spec: SynthSpec = match &c.spec {
        Some(p) => read_json(p)?,
        None => SynthSpec::default(),
    };
    if c.null == Some(true) {
        for f in &mut spec.factors {
            f.beta_binary = 0.0;
            f.beta_continuous = 0.0;
        }
        spec.control_beta = 0.0;
    }
    if let Some(n) = c.n {
        spec.n = n;
    }
    spec.seed = c.seed();
    let out = generate(&spec)?;
    out.write_to(&ctx.out)?;
    ctx.json("spec.json", &spec)?;
    Ok(Status::Clean)
}

pub fn harmonize(ctx: &Ctx) -> Result<Status> {
    let (_, data, _) = load_harmonized(&ctx.cfg)?;
    data.write_csv(ctx.file("harmonized.csv")?)?;
    ctx.json("harmonized.json", &data)?;
    Ok(Status::Clean)
}

pub fn score(ctx: &Ctx) -> Result<Status> {
    let c = &ctx.cfg;
    let (instrument, data, rules) = load_harmonized(c)?;
    let (t, w) = load_model(c)?;
    if gate(ctx, &t, &w, Some(&instrument))?.is_some() {
        return Ok(Status::Findings);
    }
    let (_, s) = full_sample_scores(&data, &rules, &t, &w, c.scoring()?)?;
    s.write_csv(ctx.file("scores.csv")?)?;
    ctx.json("scores.json", &s)?;
    ctx.json("coverage.json", &score_coverage(&s))?;
    Ok(Status::Clean)
}

#[derive(Serialize)]
struct Validation {
    taxonomy: ValidationReport,
    mapping: ValidationReport,
    cross_loading: surveyscope::mapping::CrossLoadingReport,
}

pub fn validate(ctx: &Ctx) -> Result<Status> {
    let c = &ctx.cfg;
    let instrument = c.instrument.as_ref().map(load_instrument).transpose()?;
    let (t, w) = load_model(c)?;
    let tr = validate_taxonomy(&t);
    let mr = validate_mapping(&w, &t, instrument.as_ref());
    if let Some(f) = mr.with_code(FindingCode::UnknownSubdimension).next() {
        return Err(Error::UnknownSubdimension(f.message.clone()));
    }
    let cl = cross_loading_concentration(&w, c.closeness.unwrap_or(crate::config::DEFAULT_CLOSENESS), instrument.as_ref())?;
    let clean = tr.is_valid() && mr.is_valid();
    ctx.json(
        "validation.json",
        &Validation {
            taxonomy: tr,
            mapping: mr,
            cross_loading: cl,
        },
    )?;
    Ok(if clean { Status::Clean } else { Status::Findings })
}

pub fn diagnose(ctx: &Ctx) -> Result<Status> {
    let c = &ctx.cfg;
    let study = load_study(c)?;
    let (t, w) = load_model(c)?;
    if gate(ctx, &t, &w, Some(&study.instrument))?.is_some() {
        return Ok(Status::Findings);
    }
    let ecv = c.ecv()?;
    let baseline = c.baseline.clone().unwrap_or_default();
    let plan = study.plan(&ecv, c.seed())?;
    let reports = outer_evaluate(
        &study,
        &Frozen {
            taxonomy: &t,
            mapping: &w,
            baseline_scores: &baseline,
        },
        &plan,
        &ecv,
    )?;
    write_delta_csv(ctx.file("deltas.csv")?, &reports)?;
    ctx.json("deltas.json", &reports)?;

    let (frame, s) = full_sample_scores(&study.data, &study.rules, &t, &w, ecv.scoring)?;
    let rows: Vec<usize> = (0..s.n_rows()).collect();
    let overlap = correlation_screen(&s, c.overlap_cutoff.expect("resolved"), &rows)?;
    write_overlap_csv(ctx.file("overlap.csv")?, &overlap)?;
    ctx.json("overlap.json", &overlap)?;
    let raw = frame.score(&w, &s.subdim_ids, ScoringRule { post_standardize: false, ..ecv.scoring })?;
    let limits = data_limit_flags(&raw, &rows, &w, &frame.degenerate, &Default::default());
    ctx.json("limits.json", &limits)?;
    ctx.json(
        "cross_loading.json",
        &cross_loading_concentration(&w, c.closeness.expect("resolved"), Some(&study.instrument))?,
    )?;
    Ok(Status::Clean)
}

#[derive(Serialize)]
struct RefineSummary<'a> {
    stop: surveyscope::refine::StopReason,
    rounds: usize,
    taxonomy_version: u32,
    mapping_version: u32,
    decisions: &'a [surveyscope::refine::SubdimDecision],
}

pub fn refine(ctx: &Ctx) -> Result<Status> {
    let c = &ctx.cfg;
    let study = load_study(c)?;
    let (t, w) = load_model(c)?;
    if gate(ctx, &t, &w, Some(&study.instrument))?.is_some() {
        return Ok(Status::Findings);
    }
    let ecv = c.ecv()?;
    let lc = c.loop_config();
    lc.stopping.check()?;
    let plan = study.plan(&ecv, c.seed())?;
    let proposer: Box<dyn Proposer> = match (&c.endpoint, &c.proposals) {
        (Some(url), _) => Box::new(RemoteProposer {
            config: EndpointConfig::new(url.clone(), c.model.clone().unwrap_or_default()),
            transport: Box::new(HttpTransport),
        }),
        (None, Some(dir)) => Box::new(FixtureProposer::new(dir.clone())),
        (None, None) => return Err(Error::InvalidParameter("`--proposals` or `--endpoint` is required".into())),
    };
    let audit = AuditStore::new(ctx.out.join("audit"))?;
    let inp = LoopInputs {
        study: &study,
        plan: &plan,
        outer_fold: c.outer_fold.expect("resolved"),
        ecv: &ecv,
        config: &lc,
        proposer: proposer.as_ref(),
        audit: Some(&audit),
    };
    let r = run_loop(&inp, &t, &w)?;
    write_iteration_log(ctx.file("iteration_log.jsonl")?, &r.states)?;
    write_taxonomy(ctx.out.join("taxonomy.json"), &r.taxonomy)?;
    write_mapping(ctx.out.join("mapping.json"), &r.mapping)?;
    ctx.json("taxonomy_log.json", &r.taxonomy_log)?;
    ctx.json("refinements.json", &r.refinements().collect::<Vec<_>>())?;
    let last = r.states.last().expect("at least one round");
    ctx.json(
        "summary.json",
        &RefineSummary {
            stop: r.stop,
            rounds: r.states.len(),
            taxonomy_version: r.taxonomy.version,
            mapping_version: r.mapping.version,
            decisions: &last.decisions,
        },
    )?;
    Ok(Status::Clean)
}

fn outcome_index(study: &Study, id: Option<&str>) -> Result<usize> {
    match id {
        None => Ok(0),
        Some(id) => study
            .outcomes
            .iter()
            .position(|o| o.outcome_id == id)
            .ok_or_else(|| Error::UnknownItem(id.to_string())),
    }
}

pub fn placebo(ctx: &Ctx) -> Result<Status> {
    let c = &ctx.cfg;
    let study = load_study(c)?;
    let (t, w) = load_model(c)?;
    if gate(ctx, &t, &w, Some(&study.instrument))?.is_some() {
        return Ok(Status::Findings);
    }
    let ecv = c.ecv()?;
    let kind: PlaceboKind = c.kind.as_deref().expect("resolved").parse()?;
    let candidate = c
        .candidate
        .clone()
        .ok_or_else(|| Error::InvalidParameter("`--candidate` is required".into()))?;
    let plan = study.plan(&ecv, c.seed())?;
    let frames = build_frames(&study, &plan.outer_splits(), &ecv)?;
    let inp = PlaceboInputs {
        study: &study,
        frames: &frames,
        taxonomy: &t,
        mapping: &w,
        candidate: &candidate,
        outcome: outcome_index(&study, c.outcome.as_deref())?,
        ecv: &ecv,
    };
    let pc = PlaceboConfig {
        draws: c.draws.expect("resolved"),
        seed: c.seed(),
        smoothing: c.smoothing.expect("resolved"),
    };
    let r = run_placebo(kind, &inp, &pc)?;
    ctx.json("placebo.json", &r)?;
    write_draws_csv(ctx.file("placebo_draws.csv")?, &r)?;
    Ok(Status::Clean)
}

/// One cell of the robustness grid.
#[derive(Debug, Clone, Serialize)]
pub struct GridRow {
    pub scoring: String,
    pub tau: f64,
    pub m: usize,
    pub candidate: String,
    /// Oriented primary-metric mean gain per outcome; `None` when the
    /// candidate has no items in this cell.
    pub deltas: BTreeMap<String, Option<f64>>,
    pub labels: BTreeMap<String, Option<String>>,
    pub top_pair: Option<(String, String)>,
    pub top_abs_rho: Option<f64>,
    /// Flagged pairs at each overlap cutoff, keyed by the cutoff.
    pub flagged: Vec<(f64, usize)>,
}

fn grid_cell(
    study: &Study,
    frames: &[SplitFrame],
    t: &Taxonomy,
    w: &MappingMatrix,
    candidate: &str,
    cutoffs: &[f64],
    ecv: &EcvConfig,
) -> Result<(BTreeMap<String, Option<DeltaReport>>, OverlapReport, Vec<(f64, usize)>)> {
    let columns = scored_leaves(t, w);
    let mut per_outcome: BTreeMap<String, Option<DeltaReport>> =
        study.outcomes.iter().map(|o| (o.outcome_id.clone(), None)).collect();
    if columns.iter().any(|c| c == candidate) {
        let cand = [candidate.to_string()];
        let req = EvalRequest {
            mapping: w,
            columns: &columns,
            candidates: &cand,
            baseline_scores: &[],
        };
        for r in evaluate_frames(study, frames, &req, None, ecv)? {
            let idx = study.outcomes.iter().position(|o| o.outcome_id == r.outcome_id).expect("known outcome");
            if r.metric == Metric::primary(study.model_spec(idx, ecv).task) {
                per_outcome.insert(r.outcome_id.clone(), Some(r));
            }
        }
    }
    let (_, s) = full_sample_scores(&study.data, &study.rules, t, w, ecv.scoring)?;
    let rows: Vec<usize> = (0..s.n_rows()).collect();
    let lowest = cutoffs.iter().copied().fold(f64::INFINITY, f64::min);
    let base = correlation_screen(&s, lowest, &rows)?;
    let flagged = cutoffs
        .iter()
        .map(|&k| Ok((k, base.at_cutoff(k, &s.subdim_ids)?.flagged.len())))
        .collect::<Result<Vec<_>>>()?;
    Ok((per_outcome, base, flagged))
}

pub fn grid(ctx: &Ctx) -> Result<Status> {
    let c = &ctx.cfg;
    let study = load_study(c)?;
    let t = load_taxonomy(c.path(&c.taxonomy, "taxonomy")?)?;
    let w0 = load_mapping(c.path(&c.mapping, "mapping")?)?;
    if gate(ctx, &t, &w0, Some(&study.instrument))?.is_some() {
        return Ok(Status::Findings);
    }
    let candidate = c
        .candidate
        .clone()
        .ok_or_else(|| Error::InvalidParameter("`--candidate` is required".into()))?;
    let cutoffs = c.grid_cutoff.clone().expect("resolved");
    let base_ecv = c.ecv()?;
    let plan = study.plan(&base_ecv, c.seed())?;
    let mut rows = Vec::new();
    for rule in c.grid_scoring.clone().expect("resolved") {
        let ecv = EcvConfig {
            scoring: ScoringRule {
                kind: rule.parse()?,
                ..base_ecv.scoring
            },
            ..base_ecv
        };
        let frames = build_frames(&study, &plan.outer_splits(), &ecv)?;
        for &tau in c.grid_tau.as_deref().expect("resolved") {
            for &m in c.grid_top_m.as_deref().expect("resolved") {
                let mut w = sparsify_top_m(&sparsify_threshold(&w0, tau)?, m)?;
                w.mark_anchored(&t);
                let (per, overlap, flagged) = grid_cell(&study, &frames, &t, &w, &candidate, &cutoffs, &ecv)?;
                let top = overlap
                    .pairs
                    .iter()
                    .max_by(|a, b| a.rho.abs().total_cmp(&b.rho.abs()));
                rows.push(GridRow {
                    scoring: rule.clone(),
                    tau,
                    m,
                    candidate: candidate.clone(),
                    deltas: per.iter().map(|(k, r)| (k.clone(), r.as_ref().map(|r| r.mean))).collect(),
                    labels: per
                        .iter()
                        .map(|(k, r)| (k.clone(), r.as_ref().map(|r| r.label.as_str().to_string())))
                        .collect(),
                    top_pair: top.map(|p| (p.subdim_a.clone(), p.subdim_b.clone())),
                    top_abs_rho: top.map(|p| p.rho.abs()),
                    flagged,
                });
            }
        }
    }
    write_grid_csv(ctx.file("grid.csv")?, &rows, &study, &cutoffs)?;
    ctx.json("grid.json", &rows)?;
    Ok(Status::Clean)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn write_grid_csv<W: std::io::Write>(w: W, rows: &[GridRow], study: &Study, cutoffs: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    let mut header: Vec<String> = ["scoring", "tau", "m", "candidate"].map(String::from).to_vec();
    for o in &study.outcomes {
        header.push(format!("delta_{}", o.outcome_id));
        header.push(format!("label_{}", o.outcome_id));
    }
    header.extend(["top_pair", "top_abs_rho"].map(String::from));
    header.extend(cutoffs.iter().map(|k| format!("flagged_{k:.2}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.scoring.clone(), format!("{:.2}", r.tau), r.m.to_string(), r.candidate.clone()];
        for o in &study.outcomes {
            rec.push(fmt_opt(r.deltas.get(&o.outcome_id).copied().flatten()));
            rec.push(r.labels.get(&o.outcome_id).cloned().flatten().unwrap_or_default());
        }
        rec.push(r.top_pair.as_ref().map(|(a, b)| format!("{a}|{b}")).unwrap_or_default());
        rec.push(fmt_opt(r.top_abs_rho));
        rec.extend(r.flagged.iter().map(|(_, n)| n.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// One line of the triage table.
#[derive(Debug, Clone, Serialize)]
pub struct TriageRow {
    pub family: String,
    pub subdimension: String,
    pub items: String,
    pub delta_auc: Option<f64>,
    pub delta_r2: Option<f64>,
    pub label_auc: Option<String>,
    pub label_r2: Option<String>,
    pub notes: String,
}

pub fn triage_rows(reports: &[DeltaReport], t: Option<&Taxonomy>, w: Option<&MappingMatrix>) -> Vec<TriageRow> {
    let mut order: Vec<&str> = Vec::new();
    for r in reports {
        if !order.contains(&r.candidate.as_str()) {
            order.push(&r.candidate);
        }
    }
    let mut rows: Vec<TriageRow> = order
        .into_iter()
        .map(|cand| {
            let pick = |m: Metric| reports.iter().find(|r| r.candidate == cand && r.metric == m);
            let auc = pick(Metric::Auc);
            let r2 = pick(Metric::R2);
            let items = match w {
                Some(w) => w.items_loading_on(&[cand.to_string()]).into_iter().collect::<Vec<_>>().join(", "),
                None => auc.or(r2).map(|r| r.items.to_string()).unwrap_or_default(),
            };
            let mut notes = Vec::new();
            if auc.or(r2).is_some_and(|r| r.items == 0) {
                notes.push("no items");
            }
            if t.and_then(|t| t.get(cand)).is_some_and(|s| s.anchored) {
                notes.push("anchored");
            }
            TriageRow {
                family: t.and_then(|t| t.anchor_of(cand)).unwrap_or_default().to_string(),
                subdimension: cand.to_string(),
                items,
                delta_auc: auc.map(|r| r.mean),
                delta_r2: r2.map(|r| r.mean),
                label_auc: auc.map(|r| r.label.as_str().to_string()),
                label_r2: r2.map(|r| r.label.as_str().to_string()),
                notes: notes.join("; "),
            }
        })
        .collect();
    rows.sort_by(|a, b| match (a.delta_auc, b.delta_auc) {
        (Some(x), Some(y)) => y.total_cmp(&x),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    rows
}

pub fn report(ctx: &Ctx) -> Result<Status> {
    let c = &ctx.cfg;
    let reports: Vec<DeltaReport> = read_json(&c.path(&c.deltas, "deltas")?)?;
    let t = c.taxonomy.as_ref().map(load_taxonomy).transpose()?;
    let w = c.mapping.as_ref().map(load_mapping).transpose()?;
    let rows = triage_rows(&reports, t.as_ref(), w.as_ref());
    let mut out = csv::Writer::from_writer(ctx.file("triage.csv")?);
    out.write_record(["Family", "Subdimension", "Items", "dAUC", "dR2", "label_auc", "label_r2", "notes"])?;
    for r in &rows {
        out.write_record([
            r.family.clone(),
            r.subdimension.clone(),
            r.items.clone(),
            fmt_opt(r.delta_auc),
            fmt_opt(r.delta_r2),
            r.label_auc.clone().unwrap_or_default(),
            r.label_r2.clone().unwrap_or_default(),
            r.notes.clone(),
        ])?;
    }
    out.flush()?;
    ctx.json("triage.json", &rows)?;
    Ok(Status::Clean)
}
