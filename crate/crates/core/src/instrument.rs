//! Survey instrument, raw response matrix and outcome designations.
//!
//! Nothing here coerces response tokens to numbers; that happens in
//! [`crate::harmonize`]. A missing cell is `None`, never a sentinel value.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseKind {
    Binary,
    Ordinal,
    Categorical,
    Numeric,
    FreeText,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Usage {
    Mechanism,
    Control,
    Outcome,
    Excluded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurveyItem {
    pub item_id: String,
    pub stem_text: String,
    pub response_kind: ResponseKind,
    #[serde(default)]
    pub option_labels: Vec<String>,
    pub usage: Usage,
}

/// An ordered, id-unique list of survey items.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Instrument {
    items: Vec<SurveyItem>,
}

impl Instrument {
    pub fn new(items: Vec<SurveyItem>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Schema("instrument has no items".into()));
        }
        let mut seen = HashSet::new();
        for item in &items {
            if item.item_id.trim().is_empty() {
                return Err(Error::Schema("item with empty item_id".into()));
            }
            if !seen.insert(item.item_id.as_str()) {
                return Err(Error::DuplicateId(item.item_id.clone()));
            }
            if matches!(
                item.response_kind,
                ResponseKind::Ordinal | ResponseKind::Categorical
            ) && item.option_labels.len() < 2
            {
                return Err(Error::Schema(format!(
                    "item `{}` is {:?} but has fewer than two option labels",
                    item.item_id, item.response_kind
                )));
            }
        }
        Ok(Self { items })
    }

    pub fn items(&self) -> &[SurveyItem] {
        &self.items
    }

    pub fn get(&self, item_id: &str) -> Option<&SurveyItem> {
        self.items.iter().find(|i| i.item_id == item_id)
    }

    pub fn contains(&self, item_id: &str) -> bool {
        self.get(item_id).is_some()
    }

    pub fn usage(&self, item_id: &str) -> Option<Usage> {
        self.get(item_id).map(|i| i.usage)
    }

    pub fn ids_with_usage(&self, usage: Usage) -> Vec<String> {
        self.items
            .iter()
            .filter(|i| i.usage == usage)
            .map(|i| i.item_id.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Reads an instrument JSON file: a list of [`SurveyItem`] records.
pub fn load_instrument(path: impl AsRef<Path>) -> Result<Instrument> {
    let mut text = String::new();
    File::open(path)?.read_to_string(&mut text)?;
    parse_instrument(&text)
}

pub fn parse_instrument(text: &str) -> Result<Instrument> {
    let items: Vec<SurveyItem> =
        serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
    Instrument::new(items)
}

pub fn write_instrument(path: impl AsRef<Path>, instrument: &Instrument) -> Result<()> {
    let mut f = File::create(path)?;
    serde_json::to_writer_pretty(&mut f, instrument)?;
    f.write_all(b"\n")?;
    Ok(())
}

/// Tokens that mark a non-substantive answer. Compared after trimming.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MissingTokens(BTreeSet<String>);

impl Default for MissingTokens {
    fn default() -> Self {
        Self::new(["", "NA", "Prefer not to say"])
    }
}

impl MissingTokens {
    pub fn new<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self(tokens.into_iter().map(Into::into).collect())
    }

    pub fn is_missing(&self, token: &str) -> bool {
        let t = token.trim();
        t.is_empty() || self.0.contains(t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseMatrix {
    pub respondent_ids: Vec<String>,
    pub item_ids: Vec<String>,
    /// Row-major `N x J` raw tokens.
    pub cells: Vec<Vec<Option<String>>>,
}

impl ResponseMatrix {
    pub fn new(
        respondent_ids: Vec<String>,
        item_ids: Vec<String>,
        cells: Vec<Vec<Option<String>>>,
    ) -> Result<Self> {
        if cells.len() != respondent_ids.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} respondent ids but {} rows",
                respondent_ids.len(),
                cells.len()
            )));
        }
        if let Some((i, row)) = cells
            .iter()
            .enumerate()
            .find(|(_, r)| r.len() != item_ids.len())
        {
            return Err(Error::ShapeMismatch(format!(
                "row {i} has {} cells, expected {}",
                row.len(),
                item_ids.len()
            )));
        }
        let mut seen = HashSet::new();
        for id in &respondent_ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        let mut seen = HashSet::new();
        for id in &item_ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        Ok(Self {
            respondent_ids,
            item_ids,
            cells,
        })
    }

    pub fn n_respondents(&self) -> usize {
        self.respondent_ids.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn column_index(&self, item_id: &str) -> Option<usize> {
        self.item_ids.iter().position(|i| i == item_id)
    }
}

/// Reads a responses CSV: first column respondent id, remaining columns item ids.
pub fn load_responses(
    path: impl AsRef<Path>,
    instrument: &Instrument,
    missing: &MissingTokens,
) -> Result<ResponseMatrix> {
    let file = File::open(path)?;
    read_responses(file, instrument, missing)
}

pub fn read_responses<R: Read>(
    reader: R,
    instrument: &Instrument,
    missing: &MissingTokens,
) -> Result<ResponseMatrix> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::Schema(e.to_string()))?;
    if headers.is_empty() {
        return Err(Error::Schema("responses file has no header".into()));
    }
    let item_ids: Vec<String> = headers.iter().skip(1).map(str::to_owned).collect();
    for id in &item_ids {
        if !instrument.contains(id) {
            return Err(Error::UnknownItem(id.clone()));
        }
    }
    let mut respondent_ids = Vec::new();
    let mut cells = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Schema(e.to_string()))?;
        let rid = record.get(0).unwrap_or_default().to_owned();
        if rid.trim().is_empty() {
            return Err(Error::Schema("row with empty respondent id".into()));
        }
        respondent_ids.push(rid);
        cells.push(
            record
                .iter()
                .skip(1)
                .map(|tok| (!missing.is_missing(tok)).then(|| tok.to_owned()))
                .collect(),
        );
    }
    ResponseMatrix::new(respondent_ids, item_ids, cells)
}

/// Writes responses back in the same CSV layout; missing cells become empty.
pub fn write_responses<W: Write>(writer: W, m: &ResponseMatrix) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["respondent_id".to_owned()];
    header.extend(m.item_ids.iter().cloned());
    w.write_record(&header)?;
    for (rid, row) in m.respondent_ids.iter().zip(&m.cells) {
        let mut rec = vec![rid.as_str()];
        rec.extend(row.iter().map(|c| c.as_deref().unwrap_or("")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    Binary,
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeSpec {
    /// Item id of the outcome column.
    pub outcome_id: String,
    pub kind: OutcomeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subsample_filter: Option<String>,
    #[serde(default)]
    pub covariate_item_ids: Vec<String>,
}

/// A named row filter evaluated on harmonized values: keeps rows whose
/// `item_id` value equals `equals`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predicate {
    pub item_id: String,
    pub equals: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PredicateSet(pub BTreeMap<String, Predicate>);

impl PredicateSet {
    pub fn get(&self, name: &str) -> Result<&Predicate> {
        self.0
            .get(name)
            .ok_or_else(|| Error::UnknownPredicate(name.to_owned()))
    }

    pub fn insert(&mut self, name: impl Into<String>, p: Predicate) {
        self.0.insert(name.into(), p);
    }
}

impl OutcomeSpec {
    /// Checks the outcome and its references against the instrument.
    pub fn validate(&self, instrument: &Instrument, predicates: &PredicateSet) -> Result<()> {
        match instrument.get(&self.outcome_id) {
            None => return Err(Error::UnknownItem(self.outcome_id.clone())),
            Some(item) if item.usage != Usage::Outcome => {
                return Err(Error::Schema(format!(
                    "`{}` is used as an outcome but its usage is {:?}",
                    self.outcome_id, item.usage
                )))
            }
            Some(_) => {}
        }
        if let Some(name) = &self.subsample_filter {
            let p = predicates.get(name)?;
            if !instrument.contains(&p.item_id) {
                return Err(Error::UnknownItem(p.item_id.clone()));
            }
        }
        for c in &self.covariate_item_ids {
            if !instrument.contains(c) {
                return Err(Error::UnknownItem(c.clone()));
            }
        }
        Ok(())
    }
}
