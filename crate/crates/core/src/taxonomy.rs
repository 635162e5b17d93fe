//! Anchors, subdimensions and their one-level nesting.
//!
//! A `Taxonomy` value is an immutable snapshot. Edits return a new snapshot
//! with a higher version, and [`TaxonomyLog`] keeps the edit chain so any
//! version can be rebuilt from the base.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::findings::{Finding, FindingCode, ValidationReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub anchor_id: String,
    pub definition: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subdimension {
    pub subdim_id: String,
    pub anchor_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_id: Option<String>,
    #[serde(default)]
    pub definition: String,
    #[serde(default)]
    pub inclusion_rules: Vec<String>,
    #[serde(default)]
    pub exclusion_rules: Vec<String>,
    #[serde(default)]
    pub representative_item_ids: Vec<String>,
    #[serde(default)]
    pub anchored: bool,
}

impl Subdimension {
    pub fn new(id: impl Into<String>, anchor: impl Into<String>, definition: impl Into<String>) -> Self {
        Self {
            subdim_id: id.into(),
            anchor_id: anchor.into(),
            parent_id: None,
            definition: definition.into(),
            inclusion_rules: vec![],
            exclusion_rules: vec![],
            representative_item_ids: vec![],
            anchored: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "TaxonomyFile", try_from = "TaxonomyFile")]
pub struct Taxonomy {
    pub version: u32,
    pub anchors: Vec<Anchor>,
    pub subdimensions: Vec<Subdimension>,
}

impl Taxonomy {
    /// Builds a snapshot with subdimensions grouped by anchor order, which is
    /// the order the file form preserves.
    pub fn new(version: u32, anchors: Vec<Anchor>, subdimensions: Vec<Subdimension>) -> Self {
        let mut subdimensions = subdimensions;
        let rank = |a: &str| anchors.iter().position(|x| x.anchor_id == a).unwrap_or(usize::MAX);
        subdimensions.sort_by_key(|s| rank(&s.anchor_id));
        Self {
            version,
            anchors,
            subdimensions,
        }
    }

    pub fn get(&self, id: &str) -> Option<&Subdimension> {
        self.subdimensions.iter().find(|s| s.subdim_id == id)
    }

    pub fn has_children(&self, id: &str) -> bool {
        self.subdimensions
            .iter()
            .any(|s| s.parent_id.as_deref() == Some(id))
    }

    pub fn is_leaf(&self, id: &str) -> bool {
        self.get(id).is_some() && !self.has_children(id)
    }

    /// Leaf subdimensions in declaration order; the valid targets for weights.
    pub fn leaves(&self) -> Vec<&Subdimension> {
        let parents: HashSet<&str> = self
            .subdimensions
            .iter()
            .filter_map(|s| s.parent_id.as_deref())
            .collect();
        self.subdimensions
            .iter()
            .filter(|s| !parents.contains(s.subdim_id.as_str()))
            .collect()
    }

    pub fn leaf_ids(&self) -> Vec<String> {
        self.leaves().into_iter().map(|s| s.subdim_id.clone()).collect()
    }

    /// `K`: number of leaf subdimensions.
    pub fn k(&self) -> usize {
        self.leaves().len()
    }

    pub fn anchored_ids(&self) -> BTreeSet<String> {
        self.subdimensions
            .iter()
            .filter(|s| s.anchored)
            .map(|s| s.subdim_id.clone())
            .collect()
    }

    pub fn anchor_of(&self, id: &str) -> Option<&str> {
        self.get(id).map(|s| s.anchor_id.as_str())
    }
}

/// On-disk layout: anchors as keys, each holding its subdimension list.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TaxonomyFile {
    #[serde(default = "first_version")]
    version: u32,
    anchors: IndexMap<String, AnchorEntry>,
}

fn first_version() -> u32 {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AnchorEntry {
    #[serde(default)]
    definition: String,
    #[serde(default)]
    subdimensions: Vec<FileSubdimension>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FileSubdimension {
    #[serde(alias = "name")]
    subdim_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    parent_id: Option<String>,
    #[serde(default)]
    definition: String,
    #[serde(default)]
    inclusion_rules: Vec<String>,
    #[serde(default)]
    exclusion_rules: Vec<String>,
    #[serde(default)]
    representative_item_ids: Vec<String>,
    #[serde(default)]
    anchored: bool,
}

impl From<Taxonomy> for TaxonomyFile {
    fn from(t: Taxonomy) -> Self {
        let mut anchors: IndexMap<String, AnchorEntry> = t
            .anchors
            .iter()
            .map(|a| {
                (
                    a.anchor_id.clone(),
                    AnchorEntry {
                        definition: a.definition.clone(),
                        subdimensions: vec![],
                    },
                )
            })
            .collect();
        for s in t.subdimensions {
            anchors
                .entry(s.anchor_id.clone())
                .or_insert_with(|| AnchorEntry {
                    definition: String::new(),
                    subdimensions: vec![],
                })
                .subdimensions
                .push(FileSubdimension {
                    subdim_id: s.subdim_id,
                    parent_id: s.parent_id,
                    definition: s.definition,
                    inclusion_rules: s.inclusion_rules,
                    exclusion_rules: s.exclusion_rules,
                    representative_item_ids: s.representative_item_ids,
                    anchored: s.anchored,
                });
        }
        TaxonomyFile {
            version: t.version,
            anchors,
        }
    }
}

impl TryFrom<TaxonomyFile> for Taxonomy {
    type Error = String;

    fn try_from(f: TaxonomyFile) -> std::result::Result<Self, String> {
        let mut anchors = Vec::new();
        let mut subdimensions = Vec::new();
        for (anchor_id, entry) in f.anchors {
            if anchor_id.trim().is_empty() {
                return Err("anchor with empty id".into());
            }
            for s in entry.subdimensions {
                subdimensions.push(Subdimension {
                    subdim_id: s.subdim_id,
                    anchor_id: anchor_id.clone(),
                    parent_id: s.parent_id,
                    definition: s.definition,
                    inclusion_rules: s.inclusion_rules,
                    exclusion_rules: s.exclusion_rules,
                    representative_item_ids: s.representative_item_ids,
                    anchored: s.anchored,
                });
            }
            anchors.push(Anchor {
                anchor_id,
                definition: entry.definition,
            });
        }
        Ok(Taxonomy {
            version: f.version,
            anchors,
            subdimensions,
        })
    }
}

pub fn load_taxonomy(path: impl AsRef<Path>) -> Result<Taxonomy> {
    let mut text = String::new();
    File::open(path)?.read_to_string(&mut text)?;
    serde_json::from_str(&text).map_err(|e| Error::Schema(e.to_string()))
}

pub fn write_taxonomy(path: impl AsRef<Path>, t: &Taxonomy) -> Result<()> {
    let mut f = File::create(path)?;
    serde_json::to_writer_pretty(&mut f, t)?;
    f.write_all(b"\n")?;
    Ok(())
}

/// Naming and boundary consistency checks. Never fails; returns findings.
pub fn validate_taxonomy(t: &Taxonomy) -> ValidationReport {
    let mut report = ValidationReport::default();
    let anchors: HashSet<&str> = t.anchors.iter().map(|a| a.anchor_id.as_str()).collect();
    let mut seen = HashSet::new();
    for s in &t.subdimensions {
        if !seen.insert(s.subdim_id.as_str()) {
            report.push(Finding::new(
                FindingCode::DuplicateId,
                &s.subdim_id,
                "subdimension id declared more than once",
            ));
        }
    }
    let by_id: HashMap<&str, &Subdimension> = t
        .subdimensions
        .iter()
        .map(|s| (s.subdim_id.as_str(), s))
        .collect();
    for s in &t.subdimensions {
        if !anchors.contains(s.anchor_id.as_str()) {
            report.push(Finding::new(
                FindingCode::UnknownAnchor,
                &s.subdim_id,
                format!("anchor `{}` is not declared", s.anchor_id),
            ));
        }
        if s.definition.trim().is_empty() {
            report.push(Finding::new(
                FindingCode::EmptyDefinition,
                &s.subdim_id,
                "definition is empty",
            ));
        }
        if let Some(p) = &s.parent_id {
            match by_id.get(p.as_str()) {
                None => report.push(Finding::new(
                    FindingCode::OrphanParent,
                    &s.subdim_id,
                    format!("parent `{p}` does not exist"),
                )),
                Some(parent) => {
                    if parent.parent_id.is_some() || p == &s.subdim_id {
                        report.push(Finding::new(
                            FindingCode::DepthExceeded,
                            &s.subdim_id,
                            "nesting deeper than one split level",
                        ));
                    }
                    if parent.anchor_id != s.anchor_id {
                        report.push(Finding::new(
                            FindingCode::UnknownAnchor,
                            &s.subdim_id,
                            "child anchor differs from its parent's",
                        ));
                    }
                }
            }
        }
        if s.anchored && t.has_children(&s.subdim_id) {
            report.push(Finding::new(
                FindingCode::AnchoredNonLeaf,
                &s.subdim_id,
                "anchored subdimension has children",
            ));
        }
    }
    report
}

fn union_into(dst: &mut Vec<String>, src: &[String]) {
    for s in src {
        if !dst.contains(s) {
            dst.push(s.clone());
        }
    }
}

/// Merges the second id of each pair into the first.
pub fn consolidate(t: &Taxonomy, merge_pairs: &[(String, String)]) -> Result<Taxonomy> {
    let mut out = t.clone();
    for (keep, gone) in merge_pairs {
        let a = out
            .get(keep)
            .ok_or_else(|| Error::UnknownSubdimension(keep.clone()))?;
        let b = out
            .get(gone)
            .ok_or_else(|| Error::UnknownSubdimension(gone.clone()))?;
        if keep == gone {
            return Err(Error::Precondition(format!("cannot merge `{keep}` into itself")));
        }
        for id in [keep, gone] {
            if !out.is_leaf(id) {
                return Err(Error::NotALeaf(id.clone()));
            }
        }
        if a.anchor_id != b.anchor_id {
            return Err(Error::CrossAnchorMerge {
                a: keep.clone(),
                b: gone.clone(),
            });
        }
        if a.anchored || b.anchored {
            return Err(Error::AnchorViolation(format!(
                "cannot merge anchored subdimension (`{keep}`, `{gone}`)"
            )));
        }
        let b = b.clone();
        let a = out
            .subdimensions
            .iter_mut()
            .find(|s| &s.subdim_id == keep)
            .expect("looked up above");
        union_into(&mut a.representative_item_ids, &b.representative_item_ids);
        union_into(&mut a.inclusion_rules, &b.inclusion_rules);
        union_into(&mut a.exclusion_rules, &b.exclusion_rules);
        out.subdimensions.retain(|s| &s.subdim_id != gone);
    }
    out.version = t.version + 1;
    Ok(out)
}

/// Replaces leaf `parent` by nested children. Each child's definition is
/// prefixed with the parent's definition.
pub fn split_subdimension(t: &Taxonomy, parent: &str, children: &[Subdimension]) -> Result<Taxonomy> {
    let p = t
        .get(parent)
        .ok_or_else(|| Error::UnknownSubdimension(parent.to_owned()))?;
    if p.anchored || !t.is_leaf(parent) || p.parent_id.is_some() {
        return Err(Error::NotALeaf(parent.to_owned()));
    }
    if children.len() < 2 {
        return Err(Error::Precondition(format!(
            "splitting `{parent}` needs at least two children"
        )));
    }
    let mut fresh = HashSet::new();
    for c in children {
        if t.get(&c.subdim_id).is_some() || !fresh.insert(c.subdim_id.as_str()) {
            return Err(Error::DuplicateChildId(c.subdim_id.clone()));
        }
    }
    let mut out = t.clone();
    let parent_def = p.definition.clone();
    let anchor = p.anchor_id.clone();
    let pos = out
        .subdimensions
        .iter()
        .position(|s| s.subdim_id == parent)
        .expect("exists");
    let new_children: Vec<Subdimension> = children
        .iter()
        .map(|c| {
            let mut c = c.clone();
            c.anchor_id = anchor.clone();
            c.parent_id = Some(parent.to_owned());
            c.anchored = false;
            c.definition = if c.definition.trim().is_empty() {
                parent_def.clone()
            } else {
                format!("{parent_def} | {}", c.definition)
            };
            c
        })
        .collect();
    out.subdimensions.splice(pos + 1..pos + 1, new_children);
    out.version = t.version + 1;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum TaxonomyEdit {
    Consolidate { pairs: Vec<(String, String)> },
    Split { parent: String, children: Vec<Subdimension> },
}

impl TaxonomyEdit {
    pub fn apply(&self, t: &Taxonomy) -> Result<Taxonomy> {
        match self {
            TaxonomyEdit::Consolidate { pairs } => consolidate(t, pairs),
            TaxonomyEdit::Split { parent, children } => split_subdimension(t, parent, children),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRecord {
    pub from_version: u32,
    pub to_version: u32,
    pub edit: TaxonomyEdit,
    #[serde(default)]
    pub note: String,
}

/// Append-only edit chain over a base snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaxonomyLog {
    pub base: Taxonomy,
    pub edits: Vec<EditRecord>,
    #[serde(skip)]
    current: Option<Taxonomy>,
}

impl TaxonomyLog {
    pub fn new(base: Taxonomy) -> Self {
        Self {
            current: Some(base.clone()),
            base,
            edits: vec![],
        }
    }

    pub fn current(&self) -> Taxonomy {
        match &self.current {
            Some(t) => t.clone(),
            None => self.replay().expect("log was built from valid edits"),
        }
    }

    pub fn apply(&mut self, edit: TaxonomyEdit, note: impl Into<String>) -> Result<Taxonomy> {
        let cur = self.current();
        let next = edit.apply(&cur)?;
        let mut note = note.into();
        if matches!(edit, TaxonomyEdit::Split { .. }) && note.is_empty() {
            note = "parent definition copied into each child as a prefix".into();
        }
        self.edits.push(EditRecord {
            from_version: cur.version,
            to_version: next.version,
            edit,
            note,
        });
        self.current = Some(next.clone());
        Ok(next)
    }

    pub fn replay(&self) -> Result<Taxonomy> {
        let mut t = self.base.clone();
        for rec in &self.edits {
            if rec.from_version != t.version {
                return Err(Error::StaleVersion(format!(
                    "edit expects version {}, chain is at {}",
                    rec.from_version, t.version
                )));
            }
            t = rec.edit.apply(&t)?;
        }
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// The ten-leaf initial taxonomy from the appendix table.
    pub(crate) fn initial() -> Taxonomy {
        let rows = [
            ("Cognition_time", "financial_literacy"),
            ("Controls", "demographics"),
            ("Econ_constraints", "income_wealth_buffer"),
            ("Controls", "employment_context"),
            ("Econ_constraints", "retirement_horizon"),
            ("DB_beliefs", "perceived_generosity"),
            ("Econ_constraints", "service_tenure_lockin"),
            ("Cognition_time", "discounting"),
            ("Econ_constraints", "health_risk"),
            ("DB_beliefs", "perceived_stability"),
        ];
        let anchors = ["Cognition_time", "Controls", "Econ_constraints", "DB_beliefs"]
            .iter()
            .map(|a| Anchor { anchor_id: a.to_string(), definition: format!("{a} anchor") })
            .collect();
        Taxonomy::new(
            1,
            anchors,
            rows.iter()
                .map(|(a, s)| Subdimension::new(*s, *a, format!("{s} definition")))
                .collect(),
        )
    }

    #[test]
    fn initial_taxonomy_is_valid_with_ten_leaves() {
        let t = initial();
        assert!(validate_taxonomy(&t).is_valid());
        assert_eq!(t.k(), 10);
    }

    #[test]
    fn orphan_and_duplicate_findings() {
        let mut t = initial();
        let mut child = Subdimension::new("child", "DB_beliefs", "x");
        child.parent_id = Some("missing".into());
        t.subdimensions.push(child);
        t.subdimensions.push(Subdimension::new("financial_literacy", "Cognition_time", "again"));
        let r = validate_taxonomy(&t);
        assert!(r.has(FindingCode::OrphanParent));
        assert_eq!(r.with_code(FindingCode::DuplicateId).count(), 1);
    }

    #[test]
    fn anchored_non_leaf_and_empty_definition() {
        let mut t = initial();
        let i = t.subdimensions.iter().position(|s| s.subdim_id == "perceived_generosity").unwrap();
        t.subdimensions[i].anchored = true;
        t.subdimensions[0].definition = " ".into();
        let mut c = Subdimension::new("c1", "DB_beliefs", "c");
        c.parent_id = Some("perceived_generosity".into());
        t.subdimensions.push(c);
        let r = validate_taxonomy(&t);
        assert!(r.has(FindingCode::AnchoredNonLeaf));
        assert!(r.has(FindingCode::EmptyDefinition));
    }

    #[test]
    fn merge_unions_items() {
        let mut t = initial();
        let mut a = Subdimension::new("gen_a", "DB_beliefs", "a");
        a.representative_item_ids = vec!["Q14".into(), "Q16".into()];
        let mut b = Subdimension::new("gen_b", "DB_beliefs", "b");
        b.representative_item_ids = vec!["Q16".into(), "Q18".into()];
        t.subdimensions.extend([a, b]);
        let merged = consolidate(&t, &[("gen_a".into(), "gen_b".into())]).unwrap();
        assert!(merged.get("gen_b").is_none());
        assert_eq!(merged.get("gen_a").unwrap().representative_item_ids, vec!["Q14", "Q16", "Q18"]);
        assert_eq!(merged.version, 2);
        assert_eq!(merged.k(), 11);
    }

    #[test]
    fn cross_anchor_merge_rejected() {
        let t = initial();
        let r = consolidate(&t, &[("financial_literacy".into(), "perceived_generosity".into())]);
        assert!(matches!(r, Err(Error::CrossAnchorMerge { .. })));
    }

    #[test]
    fn empty_merge_only_bumps_version() {
        let t = initial();
        let m = consolidate(&t, &[]).unwrap();
        assert_eq!(m.subdimensions, t.subdimensions);
        assert_eq!(m.version, t.version + 1);
    }

    fn gen_children() -> Vec<Subdimension> {
        vec![
            Subdimension::new("benefit_value", "", "value of promised benefits"),
            Subdimension::new("employer_contribution", "", "employer contribution level"),
        ]
    }

    #[test]
    fn split_generosity() {
        let t = initial();
        let s = split_subdimension(&t, "perceived_generosity", &gen_children()).unwrap();
        assert_eq!(s.k(), 11);
        assert!(!s.is_leaf("perceived_generosity"));
        let bv = s.get("benefit_value").unwrap();
        assert_eq!(bv.anchor_id, "DB_beliefs");
        assert_eq!(bv.parent_id.as_deref(), Some("perceived_generosity"));
        assert!(bv.definition.starts_with("perceived_generosity definition"));
        assert!(validate_taxonomy(&s).is_valid());
    }

    #[test]
    fn split_anchored_is_not_a_leaf() {
        let mut t = initial();
        let i = t.subdimensions.iter().position(|s| s.subdim_id == "financial_literacy").unwrap();
        t.subdimensions[i].anchored = true;
        let r = split_subdimension(&t, "financial_literacy", &gen_children());
        assert!(matches!(r, Err(Error::NotALeaf(_))));
    }

    #[test]
    fn split_needs_two_children_and_fresh_ids() {
        let t = initial();
        let one = &gen_children()[..1];
        assert!(matches!(split_subdimension(&t, "perceived_generosity", one), Err(Error::Precondition(_))));
        let dup = vec![
            Subdimension::new("x", "", ""),
            Subdimension::new("x", "", ""),
        ];
        assert!(matches!(split_subdimension(&t, "perceived_generosity", &dup), Err(Error::DuplicateChildId(_))));
        let clash = vec![
            Subdimension::new("discounting", "", ""),
            Subdimension::new("y", "", ""),
        ];
        assert!(matches!(split_subdimension(&t, "perceived_generosity", &clash), Err(Error::DuplicateChildId(_))));
    }

    #[test]
    fn depth_limited_to_one_split() {
        let t = initial();
        let s = split_subdimension(&t, "perceived_generosity", &gen_children()).unwrap();
        let again = vec![Subdimension::new("a", "", ""), Subdimension::new("b", "", "")];
        assert!(matches!(split_subdimension(&s, "benefit_value", &again), Err(Error::NotALeaf(_))));
    }

    #[test]
    fn log_replays_to_current() {
        let mut log = TaxonomyLog::new(initial());
        log.apply(
            TaxonomyEdit::Split { parent: "perceived_generosity".into(), children: gen_children() },
            "",
        )
        .unwrap();
        log.apply(TaxonomyEdit::Consolidate { pairs: vec![] }, "noop").unwrap();
        let cur = log.current();
        assert_eq!(cur.version, 3);
        assert_eq!(log.replay().unwrap(), cur);
        assert!(log.edits.windows(2).all(|w| w[0].to_version < w[1].to_version));
        let json = serde_json::to_string(&log).unwrap();
        let back: TaxonomyLog = serde_json::from_str(&json).unwrap();
        assert_eq!(back.current(), cur);
    }

    #[test]
    fn file_form_keys_by_anchor() {
        let t = initial();
        let v: serde_json::Value = serde_json::to_value(&t).unwrap();
        assert!(v["anchors"]["DB_beliefs"]["subdimensions"].is_array());
        let back: Taxonomy = serde_json::from_str(&serde_json::to_string(&t).unwrap()).unwrap();
        assert_eq!(back, t);
    }
}
