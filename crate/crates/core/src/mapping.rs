//! Item-to-subdimension weight matrix and its sparsification transforms.
//!
//! Rows are simplex vectors over leaf subdimensions. Ties between equal
//! weights always resolve to the lexicographically smaller `subdim_id`.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::findings::{Finding, FindingCode, ValidationReport};
use crate::harmonize::HarmonizedMatrix;
use crate::instrument::{Instrument, Usage};
use crate::taxonomy::Taxonomy;

pub const SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weight {
    pub subdim_id: String,
    pub weight: f64,
}

impl Weight {
    pub fn new(subdim_id: impl Into<String>, weight: f64) -> Self {
        Self {
            subdim_id: subdim_id.into(),
            weight,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingRow {
    pub item_id: String,
    #[serde(deserialize_with = "de_weights")]
    pub weights: Vec<Weight>,
    #[serde(default)]
    pub rationale: String,
    #[serde(default)]
    pub not_this: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proposer: Option<String>,
    /// Set for rows whose whole mass sits on anchored subdimensions.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub anchored: bool,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum WeightsRepr {
    List(Vec<Weight>),
    Map(IndexMap<String, f64>),
}

fn de_weights<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<Weight>, D::Error> {
    Ok(match WeightsRepr::deserialize(d)? {
        WeightsRepr::List(v) => v,
        WeightsRepr::Map(m) => m.into_iter().map(|(k, w)| Weight::new(k, w)).collect(),
    })
}

impl MappingRow {
    pub fn new(item_id: impl Into<String>, weights: &[(&str, f64)]) -> Self {
        Self {
            item_id: item_id.into(),
            weights: weights.iter().map(|(s, w)| Weight::new(*s, *w)).collect(),
            rationale: String::new(),
            not_this: String::new(),
            proposer: None,
            anchored: false,
        }
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().map(|w| w.weight).sum()
    }

    pub fn weight_on(&self, subdim: &str) -> f64 {
        self.weights
            .iter()
            .filter(|w| w.subdim_id == subdim)
            .map(|w| w.weight)
            .sum()
    }

    pub fn nonzero(&self) -> usize {
        self.weights.iter().filter(|w| w.weight > 0.0).count()
    }

    /// Weights ordered largest first, ties by subdim_id.
    pub fn ranked(&self) -> Vec<Weight> {
        let mut v = self.weights.clone();
        v.sort_by(rank_cmp);
        v
    }
}

fn rank_cmp(a: &Weight, b: &Weight) -> Ordering {
    b.weight
        .partial_cmp(&a.weight)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.subdim_id.cmp(&b.subdim_id))
}

fn renormalized(mut ws: Vec<Weight>) -> Vec<Weight> {
    let total: f64 = ws.iter().map(|w| w.weight).sum();
    if total > 0.0 {
        for w in &mut ws {
            w.weight /= total;
        }
    }
    ws
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MappingMatrix {
    #[serde(default = "one")]
    pub version: u32,
    pub taxonomy_version: u32,
    /// Sparsity cap `m`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sparsity_cap: Option<usize>,
    /// Threshold `tau` last applied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    pub rows: Vec<MappingRow>,
}

fn one() -> u32 {
    1
}

#[derive(Deserialize)]
struct MappingObject {
    #[serde(default = "one")]
    version: u32,
    #[serde(default = "one")]
    taxonomy_version: u32,
    #[serde(default)]
    sparsity_cap: Option<usize>,
    #[serde(default)]
    threshold: Option<f64>,
    rows: Vec<MappingRow>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum MappingRepr {
    Object(MappingObject),
    List(Vec<MappingRow>),
}

impl<'de> Deserialize<'de> for MappingMatrix {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        Ok(match MappingRepr::deserialize(d)? {
            MappingRepr::Object(o) => MappingMatrix {
                version: o.version,
                taxonomy_version: o.taxonomy_version,
                sparsity_cap: o.sparsity_cap,
                threshold: o.threshold,
                rows: o.rows,
            },
            MappingRepr::List(rows) => MappingMatrix::new(1, rows),
        })
    }
}

impl MappingMatrix {
    pub fn new(taxonomy_version: u32, rows: Vec<MappingRow>) -> Self {
        Self {
            version: 1,
            taxonomy_version,
            sparsity_cap: None,
            threshold: None,
            rows,
        }
    }

    pub fn row(&self, item_id: &str) -> Option<&MappingRow> {
        self.rows.iter().find(|r| r.item_id == item_id)
    }

    pub fn item_ids(&self) -> Vec<String> {
        self.rows.iter().map(|r| r.item_id.clone()).collect()
    }

    /// Subdimensions carrying positive weight, sorted.
    pub fn subdim_ids(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self
            .rows
            .iter()
            .flat_map(|r| r.weights.iter())
            .filter(|w| w.weight > 0.0)
            .map(|w| w.subdim_id.as_str())
            .collect();
        set.into_iter().map(str::to_owned).collect()
    }

    /// Items with positive weight on any of `subdims`.
    pub fn items_loading_on(&self, subdims: &[String]) -> BTreeSet<String> {
        self.rows
            .iter()
            .filter(|r| {
                r.weights
                    .iter()
                    .any(|w| w.weight > 0.0 && subdims.contains(&w.subdim_id))
            })
            .map(|r| r.item_id.clone())
            .collect()
    }

    /// Flags rows whose whole mass sits on anchored subdimensions.
    pub fn mark_anchored(&mut self, t: &Taxonomy) {
        let anchored = t.anchored_ids();
        for r in &mut self.rows {
            r.anchored = !r.weights.is_empty()
                && r
                    .weights
                    .iter()
                    .filter(|w| w.weight > 0.0)
                    .all(|w| anchored.contains(&w.subdim_id));
        }
    }

    fn map_rows(&self, f: impl Fn(&MappingRow) -> MappingRow + Sync) -> MappingMatrix {
        let rows = self
            .rows
            .par_iter()
            .map(|r| if r.anchored { r.clone() } else { f(r) })
            .collect();
        MappingMatrix {
            rows,
            ..self.clone()
        }
    }
}

pub fn load_mapping(path: impl AsRef<Path>) -> Result<MappingMatrix> {
    let mut text = String::new();
    File::open(path)?.read_to_string(&mut text)?;
    serde_json::from_str(&text).map_err(|e| Error::Schema(e.to_string()))
}

pub fn write_mapping(path: impl AsRef<Path>, w: &MappingMatrix) -> Result<()> {
    let mut f = File::create(path)?;
    serde_json::to_writer_pretty(&mut f, w)?;
    f.write_all(b"\n")?;
    Ok(())
}

/// Constraint checks against the current taxonomy (and optionally the
/// instrument, for usage rules). Never fails; returns findings.
pub fn validate_mapping(w: &MappingMatrix, t: &Taxonomy, instrument: Option<&Instrument>) -> ValidationReport {
    let mut report = ValidationReport::default();
    if w.taxonomy_version != t.version {
        report.push(Finding::new(
            FindingCode::StaleTaxonomyVersion,
            "",
            format!(
                "mapping built against taxonomy v{}, current is v{}",
                w.taxonomy_version, t.version
            ),
        ));
    }
    let mut seen = HashSet::new();
    for r in &w.rows {
        let id = r.item_id.as_str();
        if !seen.insert(id) {
            report.push(Finding::new(FindingCode::DuplicateItem, id, "item has more than one row"));
        }
        if r.weights.is_empty() {
            report.push(Finding::new(FindingCode::EmptyRow, id, "row has no weights"));
            continue;
        }
        let mut finite = true;
        for wt in &r.weights {
            if !wt.weight.is_finite() {
                finite = false;
                report.push(Finding::new(
                    FindingCode::NonFiniteWeight,
                    id,
                    format!("weight on `{}` is not finite", wt.subdim_id),
                ));
            } else if wt.weight < 0.0 {
                report.push(Finding::new(
                    FindingCode::NegativeWeight,
                    id,
                    format!("weight {} on `{}`", wt.weight, wt.subdim_id),
                ));
            }
            match t.get(&wt.subdim_id) {
                None => report.push(Finding::new(
                    FindingCode::UnknownSubdimension,
                    id,
                    format!("`{}` is not in taxonomy v{}", wt.subdim_id, t.version),
                )),
                Some(_) if !t.is_leaf(&wt.subdim_id) => report.push(Finding::new(
                    FindingCode::SplitParentWeight,
                    id,
                    format!("`{}` has been split and cannot carry weight", wt.subdim_id),
                )),
                _ => {}
            }
        }
        let sum = r.sum();
        if finite && (sum - 1.0).abs() > SUM_TOL {
            report.push(Finding::new(FindingCode::RowSum, id, format!("row sums to {sum}")));
        }
        if let Some(m) = w.sparsity_cap {
            if r.nonzero() > m {
                report.push(Finding::new(
                    FindingCode::SparsityCap,
                    id,
                    format!("{} nonzero weights exceed m = {m}", r.nonzero()),
                ));
            }
        }
        if let Some(inst) = instrument {
            match inst.usage(id) {
                None => report.push(Finding::new(FindingCode::UnknownItem, id, "item not in instrument")),
                Some(Usage::Outcome) | Some(Usage::Excluded) => report.push(Finding::new(
                    FindingCode::OutcomeMapped,
                    id,
                    "outcome and excluded items carry no mapping weight",
                )),
                Some(Usage::Control) if r.nonzero() != 1 => report.push(Finding::new(
                    FindingCode::ControlNotPure,
                    id,
                    "control items map with weight 1.0 to a single subdimension",
                )),
                _ => {}
            }
        }
    }
    report
}

/// Drops weights below `tau` and renormalizes; an all-below row keeps its
/// largest weight at 1.0.
pub fn sparsify_threshold(w: &MappingMatrix, tau: f64) -> Result<MappingMatrix> {
    if !(0.0..1.0).contains(&tau) {
        return Err(Error::InvalidParameter(format!("tau must lie in [0, 1), got {tau}")));
    }
    let mut out = w.map_rows(|r| {
        if r.weights.iter().all(|x| x.weight >= tau) {
            return r.clone();
        }
        let kept: Vec<Weight> = r.weights.iter().filter(|x| x.weight >= tau).cloned().collect();
        let weights = if kept.is_empty() {
            vec![Weight::new(r.ranked()[0].subdim_id.clone(), 1.0)]
        } else {
            renormalized(kept)
        };
        MappingRow {
            weights,
            ..r.clone()
        }
    });
    out.threshold = Some(tau);
    Ok(out)
}

/// Keeps the `m` largest weights per row and renormalizes.
pub fn sparsify_top_m(w: &MappingMatrix, m: usize) -> Result<MappingMatrix> {
    if m == 0 {
        return Err(Error::InvalidParameter("m must be at least 1".into()));
    }
    let mut out = w.map_rows(|r| {
        if r.weights.len() <= m {
            return r.clone();
        }
        let mut ranked = r.ranked();
        ranked.truncate(m);
        MappingRow {
            weights: renormalized(ranked),
            ..r.clone()
        }
    });
    out.sparsity_cap = Some(out.sparsity_cap.map_or(m, |c| c.min(m)));
    Ok(out)
}

/// One primary plus at most one secondary whose share lies in `[lo, hi]`.
pub fn tighten_primary_secondary(w: &MappingMatrix, lo: f64, hi: f64) -> Result<MappingMatrix> {
    if !(lo > 0.0 && lo <= hi && hi < 0.5) {
        return Err(Error::InvalidParameter(format!(
            "secondary band [{lo}, {hi}] must lie within (0, 0.5)"
        )));
    }
    let out = w.map_rows(|r| {
        let ranked = r.ranked();
        let weights = match ranked.as_slice() {
            [] => vec![],
            [p] => vec![Weight::new(p.subdim_id.clone(), 1.0)],
            [p, s, ..] => {
                let share = if p.weight + s.weight > 0.0 {
                    s.weight / (p.weight + s.weight)
                } else {
                    0.0
                };
                if share < lo {
                    vec![Weight::new(p.subdim_id.clone(), 1.0)]
                } else {
                    let s_w = share.min(hi);
                    vec![
                        Weight::new(p.subdim_id.clone(), 1.0 - s_w),
                        Weight::new(s.subdim_id.clone(), s_w),
                    ]
                }
            }
        };
        if weights == r.weights {
            return r.clone();
        }
        MappingRow {
            weights,
            ..r.clone()
        }
    });
    Ok(out)
}

/// Per-item coverage `c_j`: training-fold non-missing share.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CoverageWeights(pub BTreeMap<String, f64>);

impl CoverageWeights {
    /// Non-missing share of each item over `train_rows` only.
    pub fn from_training(h: &HarmonizedMatrix, train_rows: &[usize], items: &[String]) -> Result<Self> {
        if train_rows.is_empty() {
            return Err(Error::Precondition("coverage needs training rows".into()));
        }
        let mut map = BTreeMap::new();
        for item in items {
            let col = h
                .column(item)
                .ok_or_else(|| Error::StaleMapping(format!("item `{item}` not in harmonized data")))?;
            let present = train_rows.iter().filter(|&&i| col[i].is_some()).count();
            map.insert(item.clone(), present as f64 / train_rows.len() as f64);
        }
        Ok(Self(map))
    }

    pub fn get(&self, item: &str) -> Option<f64> {
        self.0.get(item).copied()
    }
}

/// Mapping plus per-item scale factors applied at score assembly.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledMapping {
    pub mapping: MappingMatrix,
    pub scale: BTreeMap<String, f64>,
}

impl ScaledMapping {
    pub fn effective_weight(&self, item: &str, subdim: &str) -> f64 {
        let s = self.scale.get(item).copied().unwrap_or(1.0);
        self.mapping.row(item).map_or(0.0, |r| r.weight_on(subdim) * s)
    }
}

/// Rows stay on the simplex (a per-row renormalization would cancel `c_j`);
/// the coverage factors are carried alongside for scoring.
pub fn reweight_by_coverage(w: &MappingMatrix, c: &CoverageWeights) -> Result<ScaledMapping> {
    let mut scale = BTreeMap::new();
    for r in &w.rows {
        let cj = c
            .get(&r.item_id)
            .ok_or_else(|| Error::MissingCoverage(r.item_id.clone()))?;
        if !(0.0..=1.0).contains(&cj) {
            return Err(Error::InvalidParameter(format!(
                "coverage {cj} for `{}` outside [0, 1]",
                r.item_id
            )));
        }
        scale.insert(r.item_id.clone(), cj);
    }
    Ok(ScaledMapping {
        mapping: w.clone(),
        scale,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossLoading {
    pub item_id: String,
    pub top1: String,
    pub top2: Option<String>,
    pub gap: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossLoadingReport {
    pub closeness: f64,
    pub items: Vec<CrossLoading>,
    pub flagged_share: f64,
}

/// Flags items whose top two weights differ by at most `closeness`.
pub fn cross_loading_concentration(
    w: &MappingMatrix,
    closeness: f64,
    instrument: Option<&Instrument>,
) -> Result<CrossLoadingReport> {
    if !(closeness > 0.0 && closeness <= 1.0) {
        return Err(Error::InvalidParameter(format!("closeness {closeness} outside (0, 1]")));
    }
    let mut items = Vec::new();
    for r in &w.rows {
        let ranked: Vec<Weight> = r.ranked().into_iter().filter(|x| x.weight > 0.0).collect();
        let Some(first) = ranked.first() else { continue };
        let (top2, gap) = match ranked.get(1) {
            Some(s) => (Some(s.subdim_id.clone()), first.weight - s.weight),
            None => (None, first.weight),
        };
        items.push(CrossLoading {
            item_id: r.item_id.clone(),
            top1: first.subdim_id.clone(),
            flagged: top2.is_some() && gap <= closeness + 1e-12,
            top2,
            gap,
        });
    }
    let counted: Vec<&CrossLoading> = items
        .iter()
        .filter(|c| match instrument {
            Some(inst) => inst.usage(&c.item_id) == Some(Usage::Mechanism),
            None => true,
        })
        .collect();
    let flagged_share = if counted.is_empty() {
        0.0
    } else {
        counted.iter().filter(|c| c.flagged).count() as f64 / counted.len() as f64
    };
    Ok(CrossLoadingReport {
        closeness,
        items,
        flagged_share,
    })
}

/// One target per item: the baseline comparator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HardMapping(pub BTreeMap<String, String>);

impl HardMapping {
    pub fn from_soft(w: &MappingMatrix) -> Self {
        Self(
            w.rows
                .iter()
                .filter_map(|r| r.ranked().first().map(|x| (r.item_id.clone(), x.subdim_id.clone())))
                .collect(),
        )
    }

    /// Same row order and metadata as `template`, each row a single 1.0.
    pub fn to_matrix(&self, template: &MappingMatrix) -> MappingMatrix {
        let rows = template
            .rows
            .iter()
            .filter_map(|r| {
                self.0.get(&r.item_id).map(|s| MappingRow {
                    weights: vec![Weight::new(s.clone(), 1.0)],
                    ..r.clone()
                })
            })
            .collect();
        MappingMatrix {
            rows,
            sparsity_cap: Some(1),
            ..template.clone()
        }
    }
}

/// Item ids whose rows differ (bitwise) between two mapping versions.
pub fn changed_rows(before: &MappingMatrix, after: &MappingMatrix) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for r in &after.rows {
        match before.row(&r.item_id) {
            Some(b) if b.weights == r.weights => {}
            _ => {
                out.insert(r.item_id.clone());
            }
        }
    }
    for r in &before.rows {
        if after.row(&r.item_id).is_none() {
            out.insert(r.item_id.clone());
        }
    }
    out
}
