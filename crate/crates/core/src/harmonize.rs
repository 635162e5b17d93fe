//! Conversion of raw tokens into a unified numeric representation, and the
//! fold-local winsorize/standardize transform.
//!
//! `apply_rules` is row-independent, so it can run once on the full sample.
//! Anything that looks at a column's distribution lives in [`FoldTransform`],
//! which is fitted on training rows only and then applied to any row.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instrument::{Instrument, ResponseKind, ResponseMatrix, Usage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    /// Option index (0, 1, 2, ...) for labelled items; plain number otherwise.
    IdentityOrdinal,
    CategoricalToOrderedCodes,
    Log1pNumeric,
    Binary01,
    Drop,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub lo: f64,
    pub hi: f64,
}

impl Default for Quantiles {
    fn default() -> Self {
        Self { lo: 0.01, hi: 0.99 }
    }
}

fn default_winsorize() -> Option<Quantiles> {
    Some(Quantiles::default())
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code_table: Option<BTreeMap<String, f64>>,
    /// `null` disables winsorization.
    #[serde(default = "default_winsorize")]
    pub winsorize: Option<Quantiles>,
    #[serde(default = "yes")]
    pub standardize: bool,
}

impl Default for RuleParams {
    fn default() -> Self {
        Self {
            code_table: None,
            winsorize: default_winsorize(),
            standardize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarmonizationRule {
    pub item_id: String,
    pub kind: RuleKind,
    #[serde(default)]
    pub params: RuleParams,
}

impl HarmonizationRule {
    pub fn new(item_id: impl Into<String>, kind: RuleKind) -> Self {
        Self {
            item_id: item_id.into(),
            kind,
            params: RuleParams::default(),
        }
    }

    fn check(&self) -> Result<()> {
        if let Some(q) = self.params.winsorize {
            if !(0.0 <= q.lo && q.lo < q.hi && q.hi <= 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "winsorize quantiles for `{}` must satisfy 0 <= lo < hi <= 1",
                    self.item_id
                )));
            }
        }
        if self.kind == RuleKind::CategoricalToOrderedCodes && self.params.code_table.is_none() {
            return Err(Error::InvalidParameter(format!(
                "categorical rule for `{}` has no code table",
                self.item_id
            )));
        }
        Ok(())
    }
}

pub fn load_rules(path: impl AsRef<Path>) -> Result<Vec<HarmonizationRule>> {
    let mut text = String::new();
    File::open(path)?.read_to_string(&mut text)?;
    serde_json::from_str(&text).map_err(|e| Error::Schema(e.to_string()))
}

/// Respondent-by-item numeric values, stored column-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarmonizedMatrix {
    pub respondent_ids: Vec<String>,
    pub item_ids: Vec<String>,
    pub usage: Vec<Usage>,
    pub columns: Vec<Vec<Option<f64>>>,
    /// Whether each column has been z-scored by a fold transform.
    #[serde(default)]
    pub standardized: Vec<bool>,
}

impl HarmonizedMatrix {
    pub fn n_rows(&self) -> usize {
        self.respondent_ids.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn column_index(&self, item_id: &str) -> Option<usize> {
        self.item_ids.iter().position(|i| i == item_id)
    }

    pub fn column(&self, item_id: &str) -> Option<&[Option<f64>]> {
        self.column_index(item_id).map(|j| self.columns[j].as_slice())
    }

    pub fn index_by_id(&self) -> HashMap<&str, usize> {
        self.item_ids
            .iter()
            .enumerate()
            .map(|(j, id)| (id.as_str(), j))
            .collect()
    }

    /// Restriction to `rows`, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> HarmonizedMatrix {
        HarmonizedMatrix {
            respondent_ids: rows.iter().map(|&r| self.respondent_ids[r].clone()).collect(),
            item_ids: self.item_ids.clone(),
            usage: self.usage.clone(),
            columns: self
                .columns
                .iter()
                .map(|c| rows.iter().map(|&r| c[r]).collect())
                .collect(),
            standardized: self.standardized.clone(),
        }
    }

    /// Writes the matrix as CSV (`respondent_id` then item columns, empty = missing).
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["respondent_id".to_owned()];
        header.extend(self.item_ids.iter().cloned());
        w.write_record(&header)?;
        for (i, rid) in self.respondent_ids.iter().enumerate() {
            let mut rec = vec![rid.clone()];
            rec.extend(
                self.columns
                    .iter()
                    .map(|c| c[i].map(|v| v.to_string()).unwrap_or_default()),
            );
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn parse_number(item: &str, tok: &str) -> Result<f64> {
    let v: f64 = tok.trim().parse().map_err(|_| Error::InvalidNumber {
        item: item.to_owned(),
        value: tok.to_owned(),
    })?;
    if !v.is_finite() {
        return Err(Error::InvalidNumber {
            item: item.to_owned(),
            value: tok.to_owned(),
        });
    }
    Ok(v)
}

fn code_token(kind: RuleKind, item: &crate::instrument::SurveyItem, params: &RuleParams, tok: &str) -> Result<f64> {
    let id = item.item_id.as_str();
    let gap = || Error::CodeTableGap {
        item: id.to_owned(),
        value: tok.to_owned(),
    };
    match kind {
        RuleKind::IdentityOrdinal => {
            if item.option_labels.is_empty() {
                parse_number(id, tok)
            } else {
                item.option_labels
                    .iter()
                    .position(|l| l == tok || l.trim() == tok.trim())
                    .map(|p| p as f64)
                    .ok_or_else(gap)
            }
        }
        RuleKind::CategoricalToOrderedCodes => {
            let table = params.code_table.as_ref().ok_or_else(gap)?;
            table
                .get(tok)
                .or_else(|| table.get(tok.trim()))
                .copied()
                .ok_or_else(gap)
        }
        RuleKind::Log1pNumeric => {
            let v = parse_number(id, tok)?;
            if v <= -1.0 {
                return Err(Error::InvalidNumber {
                    item: id.to_owned(),
                    value: tok.to_owned(),
                });
            }
            Ok(v.ln_1p())
        }
        RuleKind::Binary01 => binary_token(item, tok).ok_or_else(gap),
        RuleKind::Drop => unreachable!("dropped items are never coded"),
    }
}

fn binary_token(item: &crate::instrument::SurveyItem, tok: &str) -> Option<f64> {
    let t = tok.trim();
    if item.option_labels.len() == 2 {
        if let Some(p) = item.option_labels.iter().position(|l| l.trim() == t) {
            return Some(p as f64);
        }
    }
    match t.to_ascii_lowercase().as_str() {
        "0" | "0.0" | "no" | "false" | "n" => Some(0.0),
        "1" | "1.0" | "yes" | "true" | "y" => Some(1.0),
        _ => None,
    }
}

/// Applies per-item rules to the raw token matrix.
///
/// Every non-outcome, non-excluded column needs exactly one rule. Outcome
/// columns without a rule are coded as 0/1 when binary and as plain numbers
/// otherwise. Excluded items and `drop` rules remove the column.
pub fn apply_rules(
    raw: &ResponseMatrix,
    instrument: &Instrument,
    rules: &[HarmonizationRule],
) -> Result<HarmonizedMatrix> {
    let mut by_item: HashMap<&str, &HarmonizationRule> = HashMap::new();
    for r in rules {
        if !instrument.contains(&r.item_id) {
            return Err(Error::UnknownItem(r.item_id.clone()));
        }
        r.check()?;
        if by_item.insert(r.item_id.as_str(), r).is_some() {
            return Err(Error::DuplicateId(r.item_id.clone()));
        }
    }

    let mut item_ids = Vec::new();
    let mut usage = Vec::new();
    let mut columns = Vec::new();
    for (j, id) in raw.item_ids.iter().enumerate() {
        let item = instrument
            .get(id)
            .ok_or_else(|| Error::UnknownItem(id.clone()))?;
        if item.usage == Usage::Excluded {
            continue;
        }
        let (kind, params) = match by_item.get(id.as_str()) {
            Some(r) if r.kind == RuleKind::Drop => continue,
            Some(r) => (r.kind, r.params.clone()),
            None if item.usage == Usage::Outcome => {
                let kind = if item.response_kind == ResponseKind::Binary {
                    RuleKind::Binary01
                } else {
                    RuleKind::IdentityOrdinal
                };
                (kind, RuleParams::default())
            }
            None => return Err(Error::MissingRule(id.clone())),
        };
        if kind == RuleKind::CategoricalToOrderedCodes {
            let table = params.code_table.as_ref().expect("checked above");
            if let Some(label) = item.option_labels.iter().find(|l| !table.contains_key(*l)) {
                return Err(Error::CodeTableGap {
                    item: id.clone(),
                    value: label.clone(),
                });
            }
        }
        let col = raw
            .cells
            .iter()
            .map(|row| {
                row[j]
                    .as_deref()
                    .map(|tok| code_token(kind, item, &params, tok))
                    .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        item_ids.push(id.clone());
        usage.push(item.usage);
        columns.push(col);
    }
    let n = item_ids.len();
    Ok(HarmonizedMatrix {
        respondent_ids: raw.respondent_ids.clone(),
        item_ids,
        usage,
        columns,
        standardized: vec![false; n],
    })
}

/// Lower nearest-rank quantile: `sorted[floor(q * (n - 1))]`.
pub fn lower_quantile(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let idx = (q * (sorted.len() - 1) as f64).floor() as usize;
    sorted[idx.min(sorted.len() - 1)]
}

#[inline]
pub fn winsorize(v: f64, lo: Option<f64>, hi: Option<f64>) -> f64 {
    let v = lo.map_or(v, |l| v.max(l));
    hi.map_or(v, |h| v.min(h))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnTransform {
    pub lo_cut: Option<f64>,
    pub hi_cut: Option<f64>,
    pub mean: f64,
    pub sd: f64,
    pub standardize: bool,
    /// Constant training column: centred but not scaled.
    pub degenerate: bool,
    /// Outcome and rule-less columns are left untouched.
    pub passthrough: bool,
}

impl ColumnTransform {
    #[inline]
    pub fn apply(&self, v: f64) -> f64 {
        if self.passthrough {
            return v;
        }
        let w = winsorize(v, self.lo_cut, self.hi_cut);
        if self.standardize {
            (w - self.mean) / self.sd
        } else {
            w
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldTransform {
    pub item_ids: Vec<String>,
    pub columns: Vec<ColumnTransform>,
}

impl FoldTransform {
    pub fn degenerate_items(&self) -> Vec<&str> {
        self.item_ids
            .iter()
            .zip(&self.columns)
            .filter(|(_, c)| c.degenerate)
            .map(|(id, _)| id.as_str())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FitOptions {
    /// Standardize every non-outcome column regardless of its rule.
    pub force_standardize: bool,
}

pub fn fit_fold_transform(
    h: &HarmonizedMatrix,
    train_rows: &[usize],
    rules: &[HarmonizationRule],
) -> Result<FoldTransform> {
    fit_fold_transform_with(h, train_rows, rules, FitOptions::default())
}

/// Fits per-column winsorize cuts and standardization statistics using only
/// `train_rows`. Mean and sd (population) are computed after winsorizing.
pub fn fit_fold_transform_with(
    h: &HarmonizedMatrix,
    train_rows: &[usize],
    rules: &[HarmonizationRule],
    opts: FitOptions,
) -> Result<FoldTransform> {
    if train_rows.is_empty() {
        return Err(Error::Precondition("fold transform needs training rows".into()));
    }
    if let Some(&r) = train_rows.iter().find(|&&r| r >= h.n_rows()) {
        return Err(Error::ShapeMismatch(format!("training row {r} out of range")));
    }
    let by_item: HashMap<&str, &HarmonizationRule> =
        rules.iter().map(|r| (r.item_id.as_str(), r)).collect();

    let mut columns = Vec::with_capacity(h.n_items());
    for (j, id) in h.item_ids.iter().enumerate() {
        let rule = by_item.get(id.as_str());
        if h.usage[j] == Usage::Outcome || rule.is_none() {
            columns.push(ColumnTransform {
                lo_cut: None,
                hi_cut: None,
                mean: 0.0,
                sd: 1.0,
                standardize: false,
                degenerate: false,
                passthrough: true,
            });
            continue;
        }
        let params = &rule.expect("checked").params;
        let standardize = params.standardize || opts.force_standardize;
        let mut vals: Vec<f64> = train_rows
            .iter()
            .filter_map(|&r| h.columns[j][r])
            .collect();
        if standardize && vals.len() < 2 {
            return Err(Error::Precondition(format!(
                "item `{id}` has {} non-missing training values; standardizing needs 2",
                vals.len()
            )));
        }
        let (lo_cut, hi_cut) = match (params.winsorize, vals.is_empty()) {
            (Some(q), false) => {
                let mut sorted = vals.clone();
                sorted.sort_by(f64::total_cmp);
                (
                    Some(lower_quantile(&sorted, q.lo)),
                    Some(lower_quantile(&sorted, q.hi)),
                )
            }
            _ => (None, None),
        };
        for v in vals.iter_mut() {
            *v = winsorize(*v, lo_cut, hi_cut);
        }
        let (mean, sd) = if vals.is_empty() {
            (0.0, 1.0)
        } else {
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            (mean, var.sqrt())
        };
        let degenerate = standardize && sd <= 1e-12 * mean.abs().max(1.0);
        columns.push(ColumnTransform {
            lo_cut,
            hi_cut,
            mean: if standardize { mean } else { 0.0 },
            sd: if degenerate || !standardize { 1.0 } else { sd },
            standardize,
            degenerate,
            passthrough: false,
        });
    }
    Ok(FoldTransform {
        item_ids: h.item_ids.clone(),
        columns,
    })
}

/// Applies a fitted transform to `rows`, returning only those rows.
pub fn apply_fold_transform(
    h: &HarmonizedMatrix,
    t: &FoldTransform,
    rows: &[usize],
) -> Result<HarmonizedMatrix> {
    if h.item_ids != t.item_ids {
        return Err(Error::ShapeMismatch(format!(
            "transform fitted on {} columns, matrix has {}",
            t.item_ids.len(),
            h.item_ids.len()
        )));
    }
    if let Some(&r) = rows.iter().find(|&&r| r >= h.n_rows()) {
        return Err(Error::ShapeMismatch(format!("row {r} out of range")));
    }
    let columns = h
        .columns
        .iter()
        .zip(&t.columns)
        .map(|(col, ct)| rows.iter().map(|&r| col[r].map(|v| ct.apply(v))).collect())
        .collect();
    Ok(HarmonizedMatrix {
        respondent_ids: rows.iter().map(|&r| h.respondent_ids[r].clone()).collect(),
        item_ids: h.item_ids.clone(),
        usage: h.usage.clone(),
        columns,
        standardized: t
            .columns
            .iter()
            .zip(&h.standardized)
            .map(|(c, &prev)| prev || (c.standardize && !c.passthrough))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instrument::{MissingTokens, SurveyItem};

    fn item(id: &str, kind: ResponseKind, labels: &[&str]) -> SurveyItem {
        SurveyItem {
            item_id: id.into(),
            stem_text: String::new(),
            response_kind: kind,
            option_labels: labels.iter().map(|s| s.to_string()).collect(),
            usage: Usage::Mechanism,
        }
    }

    fn single_column(values: &[Option<f64>]) -> HarmonizedMatrix {
        HarmonizedMatrix {
            respondent_ids: (0..values.len()).map(|i| format!("r{i}")).collect(),
            item_ids: vec!["Q".into()],
            usage: vec![Usage::Mechanism],
            columns: vec![values.to_vec()],
            standardized: vec![false],
        }
    }

    fn rule(q: Option<(f64, f64)>, standardize: bool) -> HarmonizationRule {
        HarmonizationRule {
            item_id: "Q".into(),
            kind: RuleKind::IdentityOrdinal,
            params: RuleParams {
                code_table: None,
                winsorize: q.map(|(lo, hi)| Quantiles { lo, hi }),
                standardize,
            },
        }
    }

    #[test]
    fn likert_codes_follow_option_order() {
        let inst = Instrument::new(vec![item("L", ResponseKind::Ordinal, &["Low", "Med", "High"])]).unwrap();
        let raw = crate::instrument::read_responses(
            "respondent_id,L\na,High\nb,Low\nc,Med\n".as_bytes(),
            &inst,
            &MissingTokens::default(),
        )
        .unwrap();
        let h = apply_rules(&raw, &inst, &[HarmonizationRule::new("L", RuleKind::IdentityOrdinal)]).unwrap();
        assert_eq!(h.columns[0], vec![Some(2.0), Some(0.0), Some(1.0)]);
    }

    #[test]
    fn log1p_of_zero_is_zero() {
        let inst = Instrument::new(vec![item("I", ResponseKind::Numeric, &[])]).unwrap();
        let raw = ResponseMatrix::new(vec!["a".into()], vec!["I".into()], vec![vec![Some("0".into())]]).unwrap();
        let h = apply_rules(&raw, &inst, &[HarmonizationRule::new("I", RuleKind::Log1pNumeric)]).unwrap();
        assert_eq!(h.columns[0][0], Some(0.0));
    }

    #[test]
    fn categorical_gap() {
        let inst = Instrument::new(vec![item("C", ResponseKind::Categorical, &["Yes", "No"])]).unwrap();
        let mut r = HarmonizationRule::new("C", RuleKind::CategoricalToOrderedCodes);
        r.params.code_table = Some([("Yes".to_owned(), 1.0), ("No".to_owned(), 0.0)].into());
        let raw = ResponseMatrix::new(vec!["a".into()], vec!["C".into()], vec![vec![Some("Maybe".into())]]).unwrap();
        let err = apply_rules(&raw, &inst, &[r]).unwrap_err();
        assert!(matches!(err, Error::CodeTableGap { value, .. } if value == "Maybe"));
    }

    #[test]
    fn code_table_must_cover_labels() {
        let inst = Instrument::new(vec![item("C", ResponseKind::Categorical, &["Yes", "No"])]).unwrap();
        let mut r = HarmonizationRule::new("C", RuleKind::CategoricalToOrderedCodes);
        r.params.code_table = Some([("Yes".to_owned(), 1.0)].into());
        let raw = ResponseMatrix::new(vec!["a".into()], vec!["C".into()], vec![vec![Some("Yes".into())]]).unwrap();
        assert!(matches!(apply_rules(&raw, &inst, &[r]), Err(Error::CodeTableGap { .. })));
    }

    #[test]
    fn missing_rule_and_drop() {
        let inst = Instrument::new(vec![
            item("A", ResponseKind::Numeric, &[]),
            item("B", ResponseKind::Numeric, &[]),
        ])
        .unwrap();
        let raw = ResponseMatrix::new(
            vec!["a".into()],
            vec!["A".into(), "B".into()],
            vec![vec![Some("1".into()), None]],
        )
        .unwrap();
        let only_a = [HarmonizationRule::new("A", RuleKind::IdentityOrdinal)];
        assert!(matches!(apply_rules(&raw, &inst, &only_a), Err(Error::MissingRule(id)) if id == "B"));
        let with_drop = [only_a[0].clone(), HarmonizationRule::new("B", RuleKind::Drop)];
        let h = apply_rules(&raw, &inst, &with_drop).unwrap();
        assert_eq!(h.item_ids, vec!["A"]);
    }

    #[test]
    fn upper_cut_uses_lower_nearest_rank() {
        let h = single_column(&[1.0, 2.0, 3.0, 4.0, 100.0].map(Some));
        let t = fit_fold_transform(&h, &[0, 1, 2, 3, 4], &[rule(Some((0.0, 0.8)), true)]).unwrap();
        assert_eq!(t.columns[0].hi_cut, Some(4.0));
        assert_eq!(t.columns[0].lo_cut, Some(1.0));
        // winsorized [1,2,3,4,4]: mean 2.8, population sd sqrt(1.36)
        assert!((t.columns[0].mean - 2.8).abs() < 1e-12);
        assert!((t.columns[0].sd - 1.36f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn test_value_clipped_by_training_cut() {
        let h = single_column(&[1.0, 2.0, 3.0, 4.0, 100.0, 1000.0].map(Some));
        let t = fit_fold_transform(&h, &[0, 1, 2, 3, 4], &[rule(Some((0.0, 0.8)), true)]).unwrap();
        let out = apply_fold_transform(&h, &t, &[5]).unwrap();
        let expected = (4.0 - 2.8) / 1.36f64.sqrt();
        assert!((out.columns[0][0].unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn constant_column_is_centred_and_flagged() {
        let h = single_column(&[5.0, 5.0, 5.0].map(Some));
        let t = fit_fold_transform(&h, &[0, 1, 2], &[rule(None, true)]).unwrap();
        assert!(t.columns[0].degenerate);
        assert_eq!(t.columns[0].sd, 1.0);
        let out = apply_fold_transform(&h, &t, &[0]).unwrap();
        assert_eq!(out.columns[0][0], Some(0.0));
        assert_eq!(t.degenerate_items(), vec!["Q"]);
    }

    #[test]
    fn empty_training_rows() {
        let h = single_column(&[Some(1.0)]);
        assert!(matches!(fit_fold_transform(&h, &[], &[rule(None, true)]), Err(Error::Precondition(_))));
    }

    #[test]
    fn missing_passes_through() {
        let h = single_column(&[Some(1.0), Some(2.0), None]);
        let t = fit_fold_transform(&h, &[0, 1], &[rule(None, true)]).unwrap();
        let out = apply_fold_transform(&h, &t, &[2]).unwrap();
        assert_eq!(out.columns[0][0], None);
    }

    #[test]
    fn shape_mismatch() {
        let h = single_column(&[Some(1.0), Some(2.0)]);
        let t = fit_fold_transform(&h, &[0, 1], &[rule(None, true)]).unwrap();
        let mut other = h.clone();
        other.item_ids = vec!["Z".into()];
        assert!(matches!(apply_fold_transform(&other, &t, &[0]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn standardized_training_moments() {
        let vals: Vec<Option<f64>> = (0..50).map(|i| Some(((i * 37) % 11) as f64 + 0.5 * i as f64)).collect();
        let h = single_column(&vals);
        let train: Vec<usize> = (0..40).collect();
        let t = fit_fold_transform(&h, &train, &[rule(None, true)]).unwrap();
        let out = apply_fold_transform(&h, &t, &train).unwrap();
        let xs: Vec<f64> = out.columns[0].iter().map(|v| v.unwrap()).collect();
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        let sd = (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt();
        assert!(m.abs() < 1e-9);
        assert!((sd - 1.0).abs() < 1e-9);
        assert!(out.standardized[0]);
    }

    #[test]
    fn winsorizing_twice_is_noop() {
        for v in [-10.0, 0.5, 3.0, 99.0] {
            let once = winsorize(v, Some(0.0), Some(4.0));
            assert_eq!(winsorize(once, Some(0.0), Some(4.0)), once);
        }
    }
}
