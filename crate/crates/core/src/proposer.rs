//! Proposal engine boundary: prompt rendering, tolerant response parsing,
//! constraint checks, fixture and remote proposers, and an audit store.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::findings::{Finding, FindingCode, ValidationReport};
use crate::instrument::{Instrument, Usage};
use crate::mapping::{MappingRow, Weight};
use crate::taxonomy::{Anchor, Subdimension, Taxonomy};

pub const TEMPLATE_VERSION: &str = "surveyscope-prompts/1";
pub const ROW_SUM_TOL: f64 = 1e-9;
/// Rows whose sum lands in this band are renormalized with a finding.
pub const RENORMALIZE_BAND: (f64, f64) = (0.9, 1.1);
pub const SECONDARY_BAND: (f64, f64) = (0.05, 0.20);
pub const API_KEY_ENV: &str = "SURVEYSCOPE_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalKind {
    TaxonomyInduction,
    SoftMapping,
    Refinement,
}

impl ProposalKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ProposalKind::TaxonomyInduction => "taxonomy_induction",
            ProposalKind::SoftMapping => "soft_mapping",
            ProposalKind::Refinement => "refinement",
        }
    }

    pub fn template(self) -> &'static str {
        match self {
            ProposalKind::TaxonomyInduction => TAXONOMY_TEMPLATE,
            ProposalKind::SoftMapping => MAPPING_TEMPLATE,
            ProposalKind::Refinement => REFINEMENT_TEMPLATE,
        }
    }
}

const TAXONOMY_TEMPLATE: &str = "\
You are organising survey questions by the economic mechanism they measure.
The researcher fixed these anchor dimensions:
<<anchors>>

Question texts (no answers are shown):
<<stems>>

Under each anchor, propose up to <<max_subdims>> narrower subdimensions. Give each one a snake_case name, a one-sentence definition, rules for what belongs and what does not, and the ids of items that represent it well.
Answer with a single JSON object. Keys are anchor ids. Each value is a list of objects with the fields name, definition, inclusion_rules, exclusion_rules, representative_items.
";

const MAPPING_TEMPLATE: &str = "\
Candidate subdimensions (id: definition):
<<subdims>>

Item <<item_id>>: <<stem>>

Give this item a weight on each subdimension it measures. Use at most <<m>> nonzero weights. Weights are nonnegative and add up to 1.
Explain the choice briefly, and say which nearby subdimension the item is not about.
Answer with a single JSON object: {\"item_id\": \"...\", \"weights\": {\"subdim_id\": weight}, \"rationale\": \"...\", \"not_this\": \"...\"}
";

const REFINEMENT_TEMPLATE: &str = "\
Subdimension <<target>> is hard to tell apart from: <<partners>>.
Current definition of <<target>>: <<target_definition>>

Items that load on these subdimensions:
<<stems>>

Propose narrower children that replace <<target>>. For every item above give one primary subdimension and, only if needed, one secondary subdimension with a weight between <<secondary_lo>> and <<secondary_hi>>.
Weights on these fixed subdimensions stay as they are: <<anchored>>.
Answer with a single JSON object: {\"target\": \"...\", \"children\": [{\"subdim_id\": \"...\", \"definition\": \"...\"}], \"rows\": [{\"item_id\": \"...\", \"primary\": \"...\", \"secondary\": {\"subdim_id\": \"...\", \"weight\": 0.1}, \"rationale\": \"...\", \"not_this\": \"...\"}]}
";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextItem {
    pub item_id: String,
    pub stem: String,
    pub usage: Usage,
}

/// Everything a template may draw on. Only question text enters a prompt.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PromptContext {
    pub items: Vec<ContextItem>,
    pub anchors: Vec<Anchor>,
    /// (subdim_id, definition)
    pub subdims: Vec<(String, String)>,
    pub target: Option<String>,
    pub target_definition: Option<String>,
    pub partners: Vec<String>,
    pub anchored: Vec<String>,
    pub m: Option<usize>,
    pub max_subdims: Option<usize>,
    pub taxonomy_version: Option<u32>,
    pub mapping_version: Option<u32>,
}

impl PromptContext {
    /// Pulls stems for `ids` from the instrument. Outcome items are refused.
    pub fn with_items(instrument: &Instrument, ids: &[String]) -> Result<Self> {
        let mut items = Vec::with_capacity(ids.len());
        for id in ids {
            let it = instrument.get(id).ok_or_else(|| Error::UnknownItem(id.clone()))?;
            if it.usage == Usage::Outcome {
                return Err(Error::OutcomeLeak(id.clone()));
            }
            items.push(ContextItem {
                item_id: id.clone(),
                stem: it.stem_text.clone(),
                usage: it.usage,
            });
        }
        Ok(Self {
            items,
            ..Self::default()
        })
    }

    pub fn with_taxonomy(mut self, t: &Taxonomy) -> Self {
        self.anchors = t.anchors.clone();
        self.subdims = t
            .leaves()
            .into_iter()
            .map(|s| (s.subdim_id.clone(), s.definition.clone()))
            .collect();
        self.anchored = t.anchored_ids().into_iter().collect();
        self.taxonomy_version = Some(t.version);
        self
    }

    fn slots(&self) -> BTreeMap<&'static str, String> {
        let mut s = BTreeMap::new();
        if !self.anchors.is_empty() {
            s.insert(
                "anchors",
                self.anchors
                    .iter()
                    .map(|a| format!("- {}: {}", a.anchor_id, a.definition))
                    .collect::<Vec<_>>()
                    .join("\n"),
            );
        }
        if !self.items.is_empty() {
            s.insert(
                "stems",
                self.items
                    .iter()
                    .map(|i| format!("- {}: {}", i.item_id, i.stem))
                    .collect::<Vec<_>>()
                    .join("\n"),
            );
        }
        if let [one] = self.items.as_slice() {
            s.insert("item_id", one.item_id.clone());
            s.insert("stem", one.stem.clone());
        }
        if !self.subdims.is_empty() {
            s.insert(
                "subdims",
                self.subdims
                    .iter()
                    .map(|(id, d)| format!("- {id}: {d}"))
                    .collect::<Vec<_>>()
                    .join("\n"),
            );
        }
        if let Some(t) = &self.target {
            s.insert("target", t.clone());
        }
        if let Some(d) = &self.target_definition {
            s.insert("target_definition", d.clone());
        }
        if !self.partners.is_empty() {
            s.insert("partners", self.partners.join(", "));
        }
        s.insert(
            "anchored",
            if self.anchored.is_empty() {
                "none".to_string()
            } else {
                self.anchored.join(", ")
            },
        );
        if let Some(m) = self.m {
            s.insert("m", m.to_string());
        }
        if let Some(k) = self.max_subdims {
            s.insert("max_subdims", k.to_string());
        }
        s.insert("secondary_lo", format!("{:.2}", SECONDARY_BAND.0));
        s.insert("secondary_hi", format!("{:.2}", SECONDARY_BAND.1));
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constraints {
    pub m: Option<usize>,
    pub secondary_band: (f64, f64),
    pub neighborhood: Vec<String>,
    /// Subdimension ids a mapping row may use; empty means unchecked.
    pub allowed_subdims: Vec<String>,
}

impl Default for Constraints {
    fn default() -> Self {
        Self {
            m: None,
            secondary_band: SECONDARY_BAND,
            neighborhood: vec![],
            allowed_subdims: vec![],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalRequest {
    pub kind: ProposalKind,
    pub template_version: String,
    /// Fixture lookup key, `<kind>__<subject>`.
    pub key: String,
    pub prompt: String,
    pub constraints: Constraints,
    pub taxonomy_version: Option<u32>,
    pub mapping_version: Option<u32>,
}

impl ProposalRequest {
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("request serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

fn fill(template: &str, slots: &BTreeMap<&'static str, String>) -> Result<String> {
    let mut out = String::with_capacity(template.len() * 2);
    let mut rest = template;
    while let Some(start) = rest.find("<<") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after
            .find(">>")
            .ok_or_else(|| Error::Schema("unterminated template slot".into()))?;
        let name = &after[..end];
        let value = slots.get(name).ok_or_else(|| Error::MissingSlot(name.to_string()))?;
        out.push_str(value);
        rest = &after[end + 2..];
    }
    out.push_str(rest);
    Ok(out)
}

pub fn render_prompt(kind: ProposalKind, ctx: &PromptContext, constraints: Constraints) -> Result<ProposalRequest> {
    if let Some(i) = ctx.items.iter().find(|i| i.usage == Usage::Outcome) {
        return Err(Error::OutcomeLeak(i.item_id.clone()));
    }
    let mut slots = ctx.slots();
    if let (None, Some(m)) = (ctx.m, constraints.m) {
        slots.insert("m", m.to_string());
    }
    let prompt = fill(kind.template(), &slots)?;
    let subject = match kind {
        ProposalKind::TaxonomyInduction => "taxonomy".to_string(),
        ProposalKind::SoftMapping => ctx.items.first().map(|i| i.item_id.clone()).unwrap_or_default(),
        ProposalKind::Refinement => ctx.target.clone().unwrap_or_default(),
    };
    Ok(ProposalRequest {
        kind,
        template_version: TEMPLATE_VERSION.into(),
        key: format!("{}__{}", kind.as_str(), subject),
        prompt,
        constraints,
        taxonomy_version: ctx.taxonomy_version,
        mapping_version: ctx.mapping_version,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubdimProposal {
    #[serde(alias = "subdim_id")]
    pub name: String,
    pub definition: String,
    #[serde(default)]
    pub inclusion_rules: Vec<String>,
    #[serde(default)]
    pub exclusion_rules: Vec<String>,
    #[serde(default, alias = "representative_item_ids")]
    pub representative_items: Vec<String>,
}

/// Anchor id -> proposed subdimensions, in response order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaxonomyProposal(pub IndexMap<String, Vec<SubdimProposal>>);

impl TaxonomyProposal {
    pub fn into_taxonomy(self, anchors: &[Anchor], version: u32) -> Result<Taxonomy> {
        let mut subdims = Vec::new();
        for (anchor, list) in self.0 {
            if !anchors.iter().any(|a| a.anchor_id == anchor) {
                return Err(Error::ConstraintViolation(format!("unknown anchor `{anchor}`")));
            }
            for p in list {
                let mut s = Subdimension::new(p.name, anchor.clone(), p.definition);
                s.inclusion_rules = p.inclusion_rules;
                s.exclusion_rules = p.exclusion_rules;
                s.representative_item_ids = p.representative_items;
                subdims.push(s);
            }
        }
        Ok(Taxonomy::new(version, anchors.to_vec(), subdims))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChildSpec {
    pub subdim_id: String,
    pub definition: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecondaryLoading {
    pub subdim_id: String,
    pub weight: f64,
}

/// One reallocated item. The primary and optional secondary split the row's
/// non-anchored mass; anchored weights carry over unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementRow {
    pub item_id: String,
    pub primary: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub secondary: Option<SecondaryLoading>,
    #[serde(default)]
    pub rationale: String,
    #[serde(default)]
    pub not_this: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementPayload {
    pub target: String,
    pub children: Vec<ChildSpec>,
    pub rows: Vec<RefinementRow>,
}

impl RefinementRow {
    /// Completes the row against the current one: anchored mass `a` is kept,
    /// the rest `1 - a` goes to the primary and secondary.
    pub fn resolve(&self, current: &MappingRow, anchored: &BTreeSet<String>) -> MappingRow {
        let mut weights: Vec<Weight> = current
            .weights
            .iter()
            .filter(|w| anchored.contains(&w.subdim_id) && w.weight > 0.0)
            .cloned()
            .collect();
        let kept: f64 = weights.iter().map(|w| w.weight).sum();
        let free = 1.0 - kept;
        let s = self.secondary.as_ref().map_or(0.0, |s| s.weight);
        weights.push(Weight::new(self.primary.clone(), free * (1.0 - s)));
        if let Some(sec) = &self.secondary {
            weights.push(Weight::new(sec.subdim_id.clone(), free * s));
        }
        MappingRow {
            item_id: self.item_id.clone(),
            weights,
            rationale: self.rationale.clone(),
            not_this: self.not_this.clone(),
            proposer: current.proposer.clone(),
            anchored: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Taxonomy(TaxonomyProposal),
    Mapping(Vec<MappingRow>),
    Refinement(RefinementPayload),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalResponse {
    pub kind: ProposalKind,
    pub raw: String,
    pub payload: Payload,
    pub findings: ValidationReport,
}

/// First JSON object or array embedded in `text`.
pub fn extract_json(text: &str) -> Result<serde_json::Value> {
    for (i, c) in text.char_indices() {
        if c != '{' && c != '[' {
            continue;
        }
        let mut stream = serde_json::Deserializer::from_str(&text[i..]).into_iter::<serde_json::Value>();
        if let Some(Ok(v)) = stream.next() {
            return Ok(v);
        }
    }
    Err(Error::UnparseableResponse(
        "no JSON object found in response".to_string(),
    ))
}

fn check_mapping_row(row: &mut MappingRow, c: &Constraints, report: &mut ValidationReport) -> Result<()> {
    let bad = |m: String| Err(Error::ConstraintViolation(format!("{}: {m}", row.item_id)));
    if row.weights.is_empty() {
        return bad("no weights".into());
    }
    for w in &row.weights {
        if !w.weight.is_finite() || w.weight < 0.0 {
            return bad(format!("weight {} on `{}`", w.weight, w.subdim_id));
        }
        if !c.allowed_subdims.is_empty() && !c.allowed_subdims.contains(&w.subdim_id) {
            return bad(format!("unknown subdimension `{}`", w.subdim_id));
        }
    }
    if let Some(m) = c.m {
        if row.nonzero() > m {
            return bad(format!("{} nonzero weights, cap is {m}", row.nonzero()));
        }
    }
    let sum = row.sum();
    if (sum - 1.0).abs() > ROW_SUM_TOL {
        if sum < RENORMALIZE_BAND.0 - ROW_SUM_TOL || sum > RENORMALIZE_BAND.1 + ROW_SUM_TOL {
            return bad(format!("row sum {sum} outside the repair band"));
        }
        for w in &mut row.weights {
            w.weight /= sum;
        }
        report.push(Finding::new(
            FindingCode::Renormalized,
            row.item_id.clone(),
            format!("row sum {sum} renormalized to 1"),
        ));
    }
    Ok(())
}

fn check_refinement(p: &RefinementPayload, c: &Constraints) -> Result<()> {
    let bad = |m: String| Err(Error::ConstraintViolation(m));
    let mut seen = BTreeSet::new();
    for ch in &p.children {
        if ch.subdim_id.is_empty() || !seen.insert(ch.subdim_id.as_str()) {
            return bad(format!("child id `{}` empty or repeated", ch.subdim_id));
        }
    }
    let mut items = BTreeSet::new();
    for r in &p.rows {
        if !items.insert(r.item_id.as_str()) {
            return bad(format!("item `{}` listed twice", r.item_id));
        }
        if r.primary.is_empty() {
            return bad(format!("{}: empty primary", r.item_id));
        }
        if let Some(s) = &r.secondary {
            let (lo, hi) = c.secondary_band;
            if !(s.weight >= lo && s.weight <= hi) {
                return bad(format!("{}: secondary weight {} outside [{lo}, {hi}]", r.item_id, s.weight));
            }
            if s.subdim_id == r.primary {
                return bad(format!("{}: secondary equals primary", r.item_id));
            }
        }
        if !c.neighborhood.is_empty() && !c.neighborhood.contains(&r.item_id) {
            return Err(Error::NeighborhoodViolation(r.item_id.clone()));
        }
    }
    Ok(())
}

pub fn parse_and_validate(raw: &str, kind: ProposalKind, c: &Constraints) -> Result<ProposalResponse> {
    let value = extract_json(raw)?;
    let unparseable = |e: serde_json::Error| Error::UnparseableResponse(e.to_string());
    let mut findings = ValidationReport::default();
    let payload = match kind {
        ProposalKind::TaxonomyInduction => {
            let p: TaxonomyProposal = serde_json::from_value(value).map_err(unparseable)?;
            for list in p.0.values() {
                for s in list {
                    if s.name.is_empty() || s.definition.trim().is_empty() {
                        return Err(Error::ConstraintViolation(format!(
                            "subdimension `{}` lacks a name or definition",
                            s.name
                        )));
                    }
                }
            }
            Payload::Taxonomy(p)
        }
        ProposalKind::SoftMapping => {
            let mut rows: Vec<MappingRow> = match value {
                serde_json::Value::Array(_) => serde_json::from_value(value).map_err(unparseable)?,
                v => vec![serde_json::from_value(v).map_err(unparseable)?],
            };
            for row in &mut rows {
                check_mapping_row(row, c, &mut findings)?;
            }
            Payload::Mapping(rows)
        }
        ProposalKind::Refinement => {
            let p: RefinementPayload = serde_json::from_value(value).map_err(unparseable)?;
            check_refinement(&p, c)?;
            Payload::Refinement(p)
        }
    };
    Ok(ProposalResponse {
        kind,
        raw: raw.to_string(),
        payload,
        findings,
    })
}

pub trait Proposer: Send + Sync {
    fn name(&self) -> &str;
    /// Raw response text for the request.
    fn propose(&self, req: &ProposalRequest) -> Result<String>;
}

/// Reads responses from `<hash>.json` or, failing that, `<key>.json`.
#[derive(Debug, Clone)]
pub struct FixtureProposer {
    pub dir: PathBuf,
}

impl FixtureProposer {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }
}

impl Proposer for FixtureProposer {
    fn name(&self) -> &str {
        "fixture"
    }

    fn propose(&self, req: &ProposalRequest) -> Result<String> {
        for name in [format!("{}.json", req.hash()), format!("{}.json", req.key)] {
            let p = self.dir.join(name);
            if p.is_file() {
                return Ok(fs::read_to_string(p)?);
            }
        }
        Err(Error::ProposerFailure(format!(
            "no fixture for `{}` in {}",
            req.key,
            self.dir.display()
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub url: String,
    pub model: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    /// Read from the environment, never from files.
    #[serde(skip)]
    pub credential: Option<String>,
}

fn default_retries() -> u32 {
    5
}

fn default_backoff_ms() -> u64 {
    500
}

impl EndpointConfig {
    pub fn new(url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            model: model.into(),
            temperature: 0.0,
            max_retries: default_retries(),
            backoff_ms: default_backoff_ms(),
            credential: std::env::var(API_KEY_ENV).ok(),
        }
    }

    pub fn body(&self, req: &ProposalRequest) -> serde_json::Value {
        serde_json::json!({
            "model": self.model,
            "temperature": self.temperature,
            "messages": [{"role": "user", "content": req.prompt}],
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TransportError {
    /// Worth retrying.
    Transient(String),
    RateLimited,
    Fatal(String),
}

pub trait Transport: Send + Sync {
    fn post(&self, url: &str, credential: Option<&str>, body: &serde_json::Value) -> Result<String, TransportError>;
}

pub struct HttpTransport;

impl Transport for HttpTransport {
    fn post(&self, url: &str, credential: Option<&str>, body: &serde_json::Value) -> Result<String, TransportError> {
        let mut rb = ureq::post(url);
        if let Some(key) = credential {
            rb = rb.header("Authorization", &format!("Bearer {key}"));
        }
        match rb.send_json(body) {
            Ok(mut resp) => resp
                .body_mut()
                .read_to_string()
                .map_err(|e| TransportError::Transient(e.to_string())),
            Err(ureq::Error::StatusCode(429)) => Err(TransportError::RateLimited),
            Err(ureq::Error::StatusCode(c)) if c >= 500 => Err(TransportError::Transient(format!("status {c}"))),
            Err(ureq::Error::StatusCode(c)) => Err(TransportError::Fatal(format!("status {c}"))),
            Err(e @ (ureq::Error::Io(_) | ureq::Error::Timeout(_) | ureq::Error::ConnectionFailed)) => {
                Err(TransportError::Transient(e.to_string()))
            }
            Err(e) => Err(TransportError::Fatal(e.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fetched {
    pub text: String,
    pub retries: u32,
    pub retry_log: Vec<String>,
}

/// Message content of a chat-style reply, or the body itself.
fn reply_content(body: &str) -> String {
    serde_json::from_str::<serde_json::Value>(body)
        .ok()
        .and_then(|v| {
            v.pointer("/choices/0/message/content")
                .and_then(|c| c.as_str())
                .map(str::to_owned)
        })
        .unwrap_or_else(|| body.to_string())
}

pub fn fetch_remote(req: &ProposalRequest, cfg: &EndpointConfig, transport: &dyn Transport) -> Result<Fetched> {
    if cfg.url.is_empty() {
        return Err(Error::InvalidParameter("endpoint url is not configured".into()));
    }
    let body = cfg.body(req);
    let mut retry_log = Vec::new();
    let mut attempt = 0u32;
    loop {
        let err = match transport.post(&cfg.url, cfg.credential.as_deref(), &body) {
            Ok(text) => {
                return Ok(Fetched {
                    text: reply_content(&text),
                    retries: attempt,
                    retry_log,
                })
            }
            Err(TransportError::Fatal(m)) => return Err(Error::Network(m)),
            Err(TransportError::RateLimited) => "rate limited".to_string(),
            Err(TransportError::Transient(m)) => m,
        };
        attempt += 1;
        retry_log.push(format!("attempt {attempt}: {err}"));
        if attempt > cfg.max_retries {
            return Err(Error::MaxRetries {
                attempts: attempt,
                last: err,
            });
        }
        let delay = cfg.backoff_ms.saturating_mul(1u64 << (attempt - 1).min(16));
        if delay > 0 {
            std::thread::sleep(Duration::from_millis(delay));
        }
    }
}

pub struct RemoteProposer {
    pub config: EndpointConfig,
    pub transport: Box<dyn Transport>,
}

impl Proposer for RemoteProposer {
    fn name(&self) -> &str {
        "remote"
    }

    fn propose(&self, req: &ProposalRequest) -> Result<String> {
        fetch_remote(req, &self.config, self.transport.as_ref()).map(|f| f.text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub request_hash: String,
    pub template_version: String,
    pub proposer: String,
    pub request: ProposalRequest,
    pub raw: String,
    pub parsed: Option<serde_json::Value>,
    pub findings: Vec<Finding>,
    pub error: Option<String>,
}

/// One file per record, named by the hash of its contents.
#[derive(Debug, Clone)]
pub struct AuditStore {
    pub dir: PathBuf,
}

impl AuditStore {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn record(&self, rec: &AuditRecord) -> Result<String> {
        let text = serde_json::to_string_pretty(rec)?;
        let h = hex::encode(Sha256::digest(text.as_bytes()));
        let path = self.dir.join(format!("{h}.json"));
        if !path.exists() {
            fs::write(path, text)?;
        }
        Ok(h)
    }

    pub fn load(&self, hash: &str) -> Result<AuditRecord> {
        Ok(serde_json::from_str(&fs::read_to_string(self.dir.join(format!("{hash}.json")))?)?)
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }
}

fn payload_json(p: &Payload) -> serde_json::Value {
    match p {
        Payload::Taxonomy(t) => serde_json::to_value(t),
        Payload::Mapping(r) => serde_json::to_value(r),
        Payload::Refinement(r) => serde_json::to_value(r),
    }
    .expect("payload serializes")
}

/// Propose, parse and validate, archiving the exchange when a store is given.
/// Invalid proposals are retried up to `attempts` times.
pub fn request_proposal(
    proposer: &dyn Proposer,
    req: &ProposalRequest,
    audit: Option<&AuditStore>,
    attempts: u32,
) -> Result<ProposalResponse> {
    let mut last = String::new();
    for _ in 0..attempts.max(1) {
        let raw = proposer.propose(req);
        let parsed = raw
            .as_ref()
            .map_err(|e| Error::ProposerFailure(e.to_string()))
            .and_then(|r| parse_and_validate(r, req.kind, &req.constraints));
        if let Some(store) = audit {
            store.record(&AuditRecord {
                request_hash: req.hash(),
                template_version: req.template_version.clone(),
                proposer: proposer.name().to_string(),
                request: req.clone(),
                raw: raw.as_deref().unwrap_or_default().to_string(),
                parsed: parsed.as_ref().ok().map(|p| payload_json(&p.payload)),
                findings: parsed.as_ref().map(|p| p.findings.findings.clone()).unwrap_or_default(),
                error: parsed.as_ref().err().map(|e| e.to_string()),
            })?;
        }
        match parsed {
            Ok(p) => return Ok(p),
            Err(e @ Error::NeighborhoodViolation(_)) => return Err(e),
            Err(e) => last = e.to_string(),
        }
    }
    Err(Error::ProposerFailure(last))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instrument::{ResponseKind, SurveyItem};
    use std::sync::Mutex;

    fn inst() -> Instrument {
        let item = |id: &str, usage| SurveyItem {
            item_id: id.into(),
            stem_text: format!("stem of {id}"),
            response_kind: ResponseKind::Numeric,
            option_labels: vec![],
            usage,
        };
        Instrument::new(vec![
            item("q1", Usage::Mechanism),
            item("q2", Usage::Mechanism),
            item("y", Usage::Outcome),
        ])
        .unwrap()
    }

    #[test]
    fn mapping_prompt_fills_cap() {
        let mut ctx = PromptContext::with_items(&inst(), &["q1".into()]).unwrap();
        ctx.subdims = vec![("a".into(), "def a".into())];
        ctx.m = Some(2);
        let r = render_prompt(ProposalKind::SoftMapping, &ctx, Constraints::default()).unwrap();
        assert!(r.prompt.contains("at most 2 nonzero"));
        assert!(r.prompt.contains("stem of q1"));
        assert_eq!(r.key, "soft_mapping__q1");
        assert_eq!(r.template_version, TEMPLATE_VERSION);
    }

    #[test]
    fn taxonomy_prompt_lists_all_stems() {
        let ids: Vec<String> = (0..46).map(|i| format!("s{i}")).collect();
        let mut ctx = PromptContext::default();
        ctx.items = ids
            .iter()
            .map(|id| ContextItem {
                item_id: id.clone(),
                stem: format!("text {id}"),
                usage: Usage::Mechanism,
            })
            .collect();
        ctx.anchors = (0..3)
            .map(|i| Anchor {
                anchor_id: format!("A{i}"),
                definition: format!("anchor def {i}"),
            })
            .collect();
        ctx.max_subdims = Some(4);
        let r = render_prompt(ProposalKind::TaxonomyInduction, &ctx, Constraints::default()).unwrap();
        for id in &ids {
            assert!(r.prompt.contains(&format!("- {id}: text {id}")));
        }
        for i in 0..3 {
            assert!(r.prompt.contains(&format!("anchor def {i}")));
        }
    }

    #[test]
    fn missing_slot_and_outcome_leak() {
        let ctx = PromptContext::with_items(&inst(), &["q1".into()]).unwrap();
        let e = render_prompt(ProposalKind::SoftMapping, &ctx, Constraints::default()).unwrap_err();
        assert_eq!(e.kind(), "MissingSlot");
        let e = PromptContext::with_items(&inst(), &["q1".into(), "y".into()]).unwrap_err();
        assert_eq!(e.kind(), "OutcomeLeak");
        let mut ctx = PromptContext::default();
        ctx.target = Some("t".into());
        ctx.items.push(ContextItem {
            item_id: "y".into(),
            stem: "s".into(),
            usage: Usage::Outcome,
        });
        let e = render_prompt(ProposalKind::Refinement, &ctx, Constraints::default()).unwrap_err();
        assert_eq!(e.kind(), "OutcomeLeak");
    }

    #[test]
    fn accepts_valid_mapping_in_prose() {
        let raw = "Sure, here it is:\n```json\n{\"item_id\": \"q1\", \"weights\": {\"a\": 0.7, \"b\": 0.3}, \"rationale\": \"r\", \"not_this\": \"n\"}\n```";
        let c = Constraints {
            m: Some(2),
            ..Constraints::default()
        };
        let r = parse_and_validate(raw, ProposalKind::SoftMapping, &c).unwrap();
        assert!(r.findings.is_valid());
        let Payload::Mapping(rows) = r.payload else { panic!() };
        assert_eq!(rows[0].weight_on("a"), 0.7);
    }

    #[test]
    fn renormalizes_within_band() {
        let raw = r#"{"item_id": "q1", "weights": {"a": 0.7, "b": 0.2}}"#;
        let r = parse_and_validate(raw, ProposalKind::SoftMapping, &Constraints::default()).unwrap();
        assert!(r.findings.has(FindingCode::Renormalized));
        let Payload::Mapping(rows) = r.payload else { panic!() };
        assert!((rows[0].weight_on("a") - 0.7 / 0.9).abs() < 1e-12);
        assert!((rows[0].weight_on("b") - 0.2 / 0.9).abs() < 1e-12);
        assert!((rows[0].weight_on("a") - 0.778).abs() < 5e-4);

        let raw = r#"{"item_id": "q1", "weights": {"a": 0.5, "b": 0.2}}"#;
        let e = parse_and_validate(raw, ProposalKind::SoftMapping, &Constraints::default()).unwrap_err();
        assert_eq!(e.kind(), "ConstraintViolation");
    }

    #[test]
    fn sparsity_cap_and_garbage() {
        let raw = r#"{"item_id": "q1", "weights": {"a": 0.5, "b": 0.3, "c": 0.2}}"#;
        let c = Constraints {
            m: Some(2),
            ..Constraints::default()
        };
        assert_eq!(
            parse_and_validate(raw, ProposalKind::SoftMapping, &c).unwrap_err().kind(),
            "ConstraintViolation"
        );
        assert_eq!(
            parse_and_validate("no json here", ProposalKind::SoftMapping, &c).unwrap_err().kind(),
            "UnparseableResponse"
        );
    }

    #[test]
    fn secondary_band_enforced() {
        let mk = |w: f64| {
            format!(
                r#"{{"target": "t", "children": [{{"subdim_id": "c1", "definition": "d"}}],
                 "rows": [{{"item_id": "q1", "primary": "c1", "secondary": {{"subdim_id": "fl", "weight": {w}}}}}]}}"#
            )
        };
        let c = Constraints::default();
        assert!(parse_and_validate(&mk(0.1), ProposalKind::Refinement, &c).is_ok());
        assert!(parse_and_validate(&mk(0.05), ProposalKind::Refinement, &c).is_ok());
        assert_eq!(
            parse_and_validate(&mk(0.3), ProposalKind::Refinement, &c).unwrap_err().kind(),
            "ConstraintViolation"
        );
    }

    #[test]
    fn resolve_carries_anchored_mass() {
        let current = MappingRow::new("Q18", &[("perceived_generosity", 0.6), ("financial_literacy", 0.4)]);
        let row = RefinementRow {
            item_id: "Q18".into(),
            primary: "employer_contribution".into(),
            secondary: None,
            rationale: String::new(),
            not_this: String::new(),
        };
        let anchored: BTreeSet<String> = ["financial_literacy".to_string()].into();
        let r = row.resolve(&current, &anchored);
        assert_eq!(r.weight_on("financial_literacy"), 0.4);
        assert_eq!(r.weight_on("employer_contribution"), 0.6);
    }

    struct Flaky {
        fails: Mutex<u32>,
    }

    impl Transport for Flaky {
        fn post(&self, _: &str, _: Option<&str>, _: &serde_json::Value) -> Result<String, TransportError> {
            let mut f = self.fails.lock().unwrap();
            if *f > 0 {
                *f -= 1;
                return Err(TransportError::Transient("reset".into()));
            }
            Ok(r#"{"choices": [{"message": {"content": "{\"item_id\": \"q1\", \"weights\": {\"a\": 1.0}}"}}]}"#.into())
        }
    }

    fn req() -> ProposalRequest {
        let mut ctx = PromptContext::with_items(&inst(), &["q1".into()]).unwrap();
        ctx.subdims = vec![("a".into(), "d".into())];
        ctx.m = Some(1);
        render_prompt(ProposalKind::SoftMapping, &ctx, Constraints::default()).unwrap()
    }

    fn cfg() -> EndpointConfig {
        EndpointConfig {
            url: "http://localhost".into(),
            model: "m".into(),
            temperature: 0.0,
            max_retries: 5,
            backoff_ms: 0,
            credential: None,
        }
    }

    #[test]
    fn retries_then_succeeds() {
        let t = Flaky { fails: Mutex::new(3) };
        let f = fetch_remote(&req(), &cfg(), &t).unwrap();
        assert_eq!(f.retries, 3);
        assert_eq!(f.retry_log.len(), 3);
        assert!(f.text.starts_with("{\"item_id\""));
    }

    #[test]
    fn persistent_failure_hits_cap() {
        let t = Flaky { fails: Mutex::new(100) };
        let e = fetch_remote(&req(), &cfg(), &t).unwrap_err();
        assert!(matches!(e, Error::MaxRetries { attempts: 6, .. }));
    }

    #[test]
    fn fixture_and_audit() {
        let dir = tempfile::tempdir().unwrap();
        let r = req();
        fs::write(dir.path().join(format!("{}.json", r.key)), r#"{"item_id": "q1", "weights": {"a": 1.0}}"#).unwrap();
        let store = AuditStore::new(dir.path().join("audit")).unwrap();
        let p = FixtureProposer::new(dir.path());
        let resp = request_proposal(&p, &r, Some(&store), 1).unwrap();
        assert!(matches!(resp.payload, Payload::Mapping(_)));
        let files: Vec<_> = fs::read_dir(store.path()).unwrap().collect();
        assert_eq!(files.len(), 1);
        let name = files[0].as_ref().unwrap().file_name().into_string().unwrap();
        let rec = store.load(name.trim_end_matches(".json")).unwrap();
        assert_eq!(rec.request_hash, r.hash());
        assert!(!serde_json::to_string(&rec.request).unwrap().contains("stem of y"));
    }

    #[test]
    fn remote_and_fixture_share_contract() {
        let remote = RemoteProposer {
            config: cfg(),
            transport: Box::new(Flaky { fails: Mutex::new(0) }),
        };
        let dir = tempfile::tempdir().unwrap();
        let r = req();
        fs::write(dir.path().join(format!("{}.json", r.hash())), r#"{"item_id": "q1", "weights": {"a": 1.0}}"#).unwrap();
        let fixture = FixtureProposer::new(dir.path());
        let a = request_proposal(&remote, &r, None, 1).unwrap();
        let b = request_proposal(&fixture, &r, None, 1).unwrap();
        assert_eq!(a.payload, b.payload);
    }
}
