//! Synthetic instruments with planted latent structure.
//!
//! The default spec plants one strong factor, one null factor and a
//! contaminated construct whose items mix two belief factors with an anchored
//! literacy factor that has no pure items. The initial mapping lumps the
//! belief items into a single `perceived_generosity` leaf; the true mapping
//! splits it, and a matching refinement proposal is written for the fixture
//! proposer.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::ecv::{Label, Study};
use crate::error::{Error, Result};
use crate::harmonize::{apply_rules, HarmonizationRule, RuleKind};
use crate::instrument::{
    write_instrument, write_responses, Instrument, OutcomeKind, OutcomeSpec, Predicate, PredicateSet, ResponseKind,
    ResponseMatrix, SurveyItem, Usage,
};
use crate::mapping::{write_mapping, MappingMatrix, MappingRow, Weight};
use crate::proposer::{ChildSpec, RefinementPayload, RefinementRow};
use crate::rng;
use crate::taxonomy::{split_subdimension, write_taxonomy, Anchor, Subdimension, Taxonomy};

pub const ACCEPT_ID: &str = "switch_accept";
pub const THRESHOLD_ID: &str = "switch_threshold";
pub const ACCEPTERS_ONLY: &str = "accepters_only";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorSpec {
    pub name: String,
    pub anchor: String,
    /// Items loading only on this factor.
    pub n_items: usize,
    #[serde(default = "unit")]
    pub loading: f64,
    #[serde(default)]
    pub beta_binary: f64,
    #[serde(default)]
    pub beta_continuous: f64,
    #[serde(default)]
    pub anchored: bool,
    /// Leaf under which the initial mapping lumps this factor's items.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proposed_as: Option<String>,
}

fn unit() -> f64 {
    1.0
}

/// `count` items each equal to `mix * primary + (1 - mix) * secondary + noise`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contamination {
    pub primary: String,
    pub secondary: String,
    pub mix: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n: usize,
    pub seed: u64,
    pub noise_sd: f64,
    pub missing_rate: f64,
    pub factors: Vec<FactorSpec>,
    pub contamination: Vec<Contamination>,
    pub n_controls: usize,
    pub control_beta: f64,
    pub base_rate: f64,
    pub continuous_noise_sd: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        let f = |name: &str, anchor: &str, n_items, beta: f64| FactorSpec {
            name: name.into(),
            anchor: anchor.into(),
            n_items,
            loading: 1.0,
            beta_binary: beta,
            beta_continuous: beta,
            anchored: false,
            proposed_as: None,
        };
        let mut fl = f("financial_literacy", "Cognition_time", 0, 0.0);
        fl.anchored = true;
        let mut bv = f("benefit_value", "DB_beliefs", 0, 0.0);
        bv.proposed_as = Some("perceived_generosity".into());
        let mut ec = f("employer_contribution", "DB_beliefs", 0, 0.0);
        ec.proposed_as = Some("perceived_generosity".into());
        Self {
            n: 2000,
            seed: 1,
            noise_sd: 0.5,
            missing_rate: 0.02,
            factors: vec![
                f("service_tenure_lockin", "Econ_constraints", 3, 1.0),
                f("health_risk", "Econ_constraints", 3, 0.0),
                fl,
                bv,
                ec,
            ],
            contamination: vec![
                Contamination {
                    primary: "benefit_value".into(),
                    secondary: "financial_literacy".into(),
                    mix: 0.75,
                    count: 2,
                },
                Contamination {
                    primary: "employer_contribution".into(),
                    secondary: "financial_literacy".into(),
                    mix: 0.60,
                    count: 1,
                },
            ],
            n_controls: 2,
            control_beta: 0.5,
            base_rate: 0.5,
            continuous_noise_sd: 1.0,
        }
    }
}

impl SynthSpec {
    /// The default spec with every outcome coefficient set to zero.
    pub fn null() -> Self {
        let mut s = Self::default();
        for f in &mut s.factors {
            f.beta_binary = 0.0;
            f.beta_continuous = 0.0;
        }
        s.control_beta = 0.0;
        s
    }

    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.n < 2 {
            return bad("n must be at least 2".into());
        }
        if !(0.0..=1.0).contains(&self.missing_rate) {
            return bad(format!("missing rate {} outside [0, 1]", self.missing_rate));
        }
        if !(self.base_rate > 0.0 && self.base_rate < 1.0) {
            return bad(format!("base rate {} outside (0, 1)", self.base_rate));
        }
        if self.noise_sd < 0.0 || self.continuous_noise_sd < 0.0 {
            return bad("noise sd must be >= 0".into());
        }
        let names: Vec<&str> = self.factors.iter().map(|f| f.name.as_str()).collect();
        for c in &self.contamination {
            if !(0.0..=1.0).contains(&c.mix) {
                return bad(format!("mixture {} outside [0, 1]", c.mix));
            }
            for f in [&c.primary, &c.secondary] {
                if !names.contains(&f.as_str()) {
                    return bad(format!("contamination names unknown factor `{f}`"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorTruth {
    pub name: String,
    pub beta_binary: f64,
    pub beta_continuous: f64,
    pub intended: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// item -> (factor, loading)
    pub loadings: BTreeMap<String, Vec<(String, f64)>>,
    pub factors: Vec<FactorTruth>,
    pub control_beta: f64,
    pub intercept: f64,
}

/// Expected triage band for a factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpectedLabel {
    Signal,
    WeakOrNoise,
    NoiseLike,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectThresholds {
    /// |beta| at or above which a factor is expected to be a signal.
    pub strong: f64,
}

impl Default for EffectThresholds {
    fn default() -> Self {
        Self { strong: 0.5 }
    }
}

pub fn oracle_labels(gt: &GroundTruth, th: &EffectThresholds) -> BTreeMap<String, ExpectedLabel> {
    gt.factors
        .iter()
        .map(|f| {
            let b = f.beta_binary.abs().max(f.beta_continuous.abs());
            let l = if b >= th.strong {
                ExpectedLabel::Signal
            } else if b > 0.0 {
                ExpectedLabel::WeakOrNoise
            } else {
                ExpectedLabel::NoiseLike
            };
            (f.name.clone(), l)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub instrument: Instrument,
    pub responses: ResponseMatrix,
    pub rules: Vec<HarmonizationRule>,
    pub taxonomy: Taxonomy,
    pub initial_mapping: MappingMatrix,
    pub true_taxonomy: Taxonomy,
    pub true_mapping: MappingMatrix,
    pub ground_truth: GroundTruth,
    pub outcomes: Vec<OutcomeSpec>,
    pub predicates: PredicateSet,
    /// Refinement proposals keyed by `<kind>__<target>`.
    pub proposals: BTreeMap<String, RefinementPayload>,
    /// Latent factor draws, per factor name.
    pub latent: BTreeMap<String, Vec<f64>>,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Intercept whose sample mean probability equals `rate`.
fn calibrate_intercept(eta: &[f64], rate: f64) -> f64 {
    let mean_p = |a: f64| eta.iter().map(|e| sigmoid(a + e)).sum::<f64>() / eta.len() as f64;
    let (mut lo, mut hi) = (-50.0, 50.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_p(mid) < rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn numeric_item(id: &str, stem: &str, usage: Usage) -> SurveyItem {
    SurveyItem {
        item_id: id.into(),
        stem_text: stem.into(),
        response_kind: ResponseKind::Numeric,
        option_labels: vec![],
        usage,
    }
}

pub fn generate(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.check()?;
    let n = spec.n;
    let mut g = rng::stream(spec.seed, 0);
    let normal = |g: &mut rand_chacha::ChaCha8Rng| -> f64 { StandardNormal.sample(g) };

    let mut latent: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for f in &spec.factors {
        latent.insert(f.name.clone(), (0..n).map(|_| normal(&mut g)).collect());
    }
    let controls: Vec<Vec<f64>> = (0..spec.n_controls)
        .map(|_| (0..n).map(|_| normal(&mut g)).collect())
        .collect();

    // item definitions: (id, stem, usage, [(factor, loading)])
    let mut items: Vec<(String, String, Vec<(String, f64)>)> = Vec::new();
    for f in &spec.factors {
        for i in 0..f.n_items {
            items.push((
                format!("{}_{}", f.name, i + 1),
                format!("How strongly does statement {} about {} describe you?", i + 1, f.name.replace('_', " ")),
                vec![(f.name.clone(), f.loading)],
            ));
        }
    }
    let mut mix_no = 0;
    for c in &spec.contamination {
        for _ in 0..c.count {
            mix_no += 1;
            let primary = spec.factors.iter().find(|f| f.name == c.primary).expect("checked");
            let prefix = primary.proposed_as.as_deref().unwrap_or(&primary.name);
            items.push((
                format!("{prefix}_mix_{mix_no}"),
                format!("Mixed statement {mix_no} on {} and {}.", c.primary.replace('_', " "), c.secondary.replace('_', " ")),
                vec![(c.primary.clone(), c.mix), (c.secondary.clone(), 1.0 - c.mix)],
            ));
        }
    }

    let mut cols: Vec<Vec<f64>> = items
        .iter()
        .map(|(_, _, loads)| {
            (0..n)
                .map(|r| loads.iter().map(|(f, l)| l * latent[f][r]).sum::<f64>())
                .collect()
        })
        .collect();
    for col in cols.iter_mut() {
        for v in col.iter_mut() {
            *v += spec.noise_sd * normal(&mut g);
        }
    }

    // outcomes
    let eta_b: Vec<f64> = (0..n)
        .map(|r| {
            spec.factors.iter().map(|f| f.beta_binary * latent[&f.name][r]).sum::<f64>()
                + controls.iter().map(|c| spec.control_beta * c[r]).sum::<f64>()
        })
        .collect();
    let intercept = calibrate_intercept(&eta_b, spec.base_rate);
    let accept: Vec<f64> = eta_b
        .iter()
        .map(|e| if g.random::<f64>() < sigmoid(intercept + e) { 1.0 } else { 0.0 })
        .collect();
    let threshold: Vec<f64> = (0..n)
        .map(|r| {
            spec.factors.iter().map(|f| f.beta_continuous * latent[&f.name][r]).sum::<f64>()
                + controls.iter().map(|c| spec.control_beta * c[r]).sum::<f64>()
                + spec.continuous_noise_sd * normal(&mut g)
        })
        .collect();

    // assemble instrument and tokens
    let mut inst_items = Vec::new();
    let mut cell_cols: Vec<Vec<Option<String>>> = Vec::new();
    let fmt = |v: f64| Some(format!("{v}"));
    for ((id, stem, _), col) in items.iter().zip(&cols) {
        inst_items.push(numeric_item(id, stem, Usage::Mechanism));
        cell_cols.push(col.iter().map(|&v| fmt(v)).collect());
    }
    for (k, c) in controls.iter().enumerate() {
        let id = format!("control_{}", k + 1);
        inst_items.push(numeric_item(&id, "Background characteristic.", Usage::Control));
        cell_cols.push(c.iter().map(|&v| fmt(v)).collect());
    }
    let n_maskable = cell_cols.len();
    for col in cell_cols.iter_mut().take(n_maskable) {
        for cell in col.iter_mut() {
            if g.random::<f64>() < spec.missing_rate {
                *cell = None;
            }
        }
    }
    inst_items.push(SurveyItem {
        item_id: ACCEPT_ID.into(),
        stem_text: "Would you accept switching to the alternative plan?".into(),
        response_kind: ResponseKind::Binary,
        option_labels: vec!["No".into(), "Yes".into()],
        usage: Usage::Outcome,
    });
    cell_cols.push(
        accept
            .iter()
            .map(|&a| Some(if a == 1.0 { "Yes" } else { "No" }.to_string()))
            .collect(),
    );
    inst_items.push(numeric_item(
        THRESHOLD_ID,
        "Minimum employer contribution rate that would make you switch.",
        Usage::Outcome,
    ));
    cell_cols.push(
        threshold
            .iter()
            .zip(&accept)
            .map(|(&t, &a)| if a == 1.0 { fmt(t) } else { None })
            .collect(),
    );
    let instrument = Instrument::new(inst_items)?;
    let item_ids: Vec<String> = instrument.items().iter().map(|i| i.item_id.clone()).collect();
    let cells: Vec<Vec<Option<String>>> = (0..n)
        .map(|r| cell_cols.iter().map(|c| c[r].clone()).collect())
        .collect();
    let respondent_ids: Vec<String> = (0..n).map(|r| format!("R{:05}", r + 1)).collect();
    let responses = ResponseMatrix::new(respondent_ids, item_ids, cells)?;

    let rules: Vec<HarmonizationRule> = instrument
        .items()
        .iter()
        .filter(|i| i.usage != Usage::Outcome)
        .map(|i| HarmonizationRule::new(i.item_id.clone(), RuleKind::IdentityOrdinal))
        .collect();

    // taxonomy v1: proposed leaves, anchored flags
    let mut anchors: Vec<Anchor> = Vec::new();
    let mut subdims: Vec<Subdimension> = Vec::new();
    let mut children: BTreeMap<String, Vec<Subdimension>> = BTreeMap::new();
    for f in &spec.factors {
        if !anchors.iter().any(|a| a.anchor_id == f.anchor) {
            anchors.push(Anchor {
                anchor_id: f.anchor.clone(),
                definition: format!("{} mechanisms", f.anchor.replace('_', " ")),
            });
        }
        let leaf = f.proposed_as.clone().unwrap_or_else(|| f.name.clone());
        if let Some(p) = &f.proposed_as {
            children.entry(p.clone()).or_default().push(Subdimension::new(
                f.name.clone(),
                f.anchor.clone(),
                format!("{} channel", f.name.replace('_', " ")),
            ));
        }
        if subdims.iter().any(|s| s.subdim_id == leaf) {
            continue;
        }
        let mut s = Subdimension::new(leaf.clone(), f.anchor.clone(), format!("{} content", leaf.replace('_', " ")));
        s.anchored = f.anchored;
        subdims.push(s);
    }
    for (id, _, loads) in &items {
        let leaf_of = |f: &str| {
            let fs = spec.factors.iter().find(|x| x.name == f).expect("known factor");
            fs.proposed_as.clone().unwrap_or_else(|| fs.name.clone())
        };
        let leaf = leaf_of(&loads[0].0);
        if let Some(s) = subdims.iter_mut().find(|s| s.subdim_id == leaf) {
            s.representative_item_ids.push(id.clone());
        }
    }
    let taxonomy = Taxonomy::new(1, anchors, subdims);

    let anchored: Vec<&str> = spec
        .factors
        .iter()
        .filter(|f| f.anchored)
        .map(|f| f.name.as_str())
        .collect();
    let proposed = |f: &str| {
        let fs = spec.factors.iter().find(|x| x.name == f).expect("known factor");
        fs.proposed_as.clone().unwrap_or_else(|| fs.name.clone())
    };
    let row_for = |id: &str, loads: &[(String, f64)], map: &dyn Fn(&str) -> String| {
        let total: f64 = loads.iter().map(|(_, l)| l).sum();
        let mut weights: Vec<Weight> = Vec::new();
        for (f, l) in loads {
            let s = map(f);
            match weights.iter_mut().find(|w| w.subdim_id == s) {
                Some(w) => w.weight += l / total,
                None => weights.push(Weight::new(s, l / total)),
            }
        }
        MappingRow {
            item_id: id.to_owned(),
            weights,
            rationale: String::new(),
            not_this: String::new(),
            proposer: Some("synth".into()),
            anchored: false,
        }
    };
    let mut initial_mapping = MappingMatrix::new(
        1,
        items.iter().map(|(id, _, loads)| row_for(id, loads, &proposed)).collect(),
    );
    initial_mapping.mark_anchored(&taxonomy);

    let mut true_taxonomy = taxonomy.clone();
    let mut proposals = BTreeMap::new();
    for (parent, kids) in &children {
        true_taxonomy = split_subdimension(&true_taxonomy, parent, kids)?;
        let rows = items
            .iter()
            .filter(|(id, _, _)| initial_mapping.row(id).is_some_and(|r| r.weight_on(parent) > 0.0))
            .map(|(id, _, loads)| {
                let primary = loads
                    .iter()
                    .filter(|(f, _)| !anchored.contains(&f.as_str()))
                    .max_by(|a, b| a.1.total_cmp(&b.1))
                    .map(|(f, _)| f.clone())
                    .expect("item has a non-anchored factor");
                RefinementRow {
                    item_id: id.clone(),
                    primary,
                    secondary: None,
                    rationale: "content is about the plan's value rather than financial knowledge".into(),
                    not_this: "not a literacy item: no concept is tested".into(),
                }
            })
            .collect();
        proposals.insert(
            format!("refinement__{parent}"),
            RefinementPayload {
                target: parent.clone(),
                children: kids
                    .iter()
                    .map(|k| ChildSpec {
                        subdim_id: k.subdim_id.clone(),
                        definition: k.definition.clone(),
                    })
                    .collect(),
                rows,
            },
        );
    }
    let mut true_mapping = MappingMatrix::new(
        true_taxonomy.version,
        items
            .iter()
            .map(|(id, _, loads)| row_for(id, loads, &|f: &str| f.to_owned()))
            .collect(),
    );
    true_mapping.mark_anchored(&true_taxonomy);

    let mut predicates = PredicateSet::default();
    predicates.insert(
        ACCEPTERS_ONLY,
        Predicate {
            item_id: ACCEPT_ID.into(),
            equals: 1.0,
        },
    );
    let outcomes = vec![
        OutcomeSpec {
            outcome_id: ACCEPT_ID.into(),
            kind: OutcomeKind::Binary,
            subsample_filter: None,
            covariate_item_ids: vec![],
        },
        OutcomeSpec {
            outcome_id: THRESHOLD_ID.into(),
            kind: OutcomeKind::Continuous,
            subsample_filter: Some(ACCEPTERS_ONLY.into()),
            covariate_item_ids: vec![],
        },
    ];

    let ground_truth = GroundTruth {
        loadings: items.iter().map(|(id, _, l)| (id.clone(), l.clone())).collect(),
        factors: spec
            .factors
            .iter()
            .map(|f| FactorTruth {
                name: f.name.clone(),
                beta_binary: f.beta_binary,
                beta_continuous: f.beta_continuous,
                intended: if f.beta_binary.abs().max(f.beta_continuous.abs()) >= EffectThresholds::default().strong {
                    Label::Signal
                } else {
                    Label::NoiseLike
                },
            })
            .collect(),
        control_beta: spec.control_beta,
        intercept,
    };

    Ok(SynthOutput {
        instrument,
        responses,
        rules,
        taxonomy,
        initial_mapping,
        true_taxonomy,
        true_mapping,
        ground_truth,
        outcomes,
        predicates,
        proposals,
        latent,
    })
}

/// File names written by [`SynthOutput::write_to`].
pub mod files {
    pub const INSTRUMENT: &str = "instrument.json";
    pub const RESPONSES: &str = "responses.csv";
    pub const RULES: &str = "rules.json";
    pub const TAXONOMY: &str = "taxonomy.json";
    pub const MAPPING: &str = "mapping.json";
    pub const TRUE_TAXONOMY: &str = "true_taxonomy.json";
    pub const TRUE_MAPPING: &str = "true_mapping.json";
    pub const GROUND_TRUTH: &str = "ground_truth.json";
    pub const OUTCOMES: &str = "outcomes.json";
    pub const PREDICATES: &str = "predicates.json";
    pub const PROPOSALS: &str = "proposals";
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

impl SynthOutput {
    /// Harmonized study over the generated responses.
    pub fn study(&self) -> Result<Study> {
        let data = apply_rules(&self.responses, &self.instrument, &self.rules)?;
        Study::new(
            self.instrument.clone(),
            data,
            self.rules.clone(),
            self.outcomes.clone(),
            self.predicates.clone(),
        )
    }

    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join(files::PROPOSALS))?;
        write_instrument(dir.join(files::INSTRUMENT), &self.instrument)?;
        write_responses(fs::File::create(dir.join(files::RESPONSES))?, &self.responses)?;
        write_json(&dir.join(files::RULES), &self.rules)?;
        write_taxonomy(dir.join(files::TAXONOMY), &self.taxonomy)?;
        write_mapping(dir.join(files::MAPPING), &self.initial_mapping)?;
        write_taxonomy(dir.join(files::TRUE_TAXONOMY), &self.true_taxonomy)?;
        write_mapping(dir.join(files::TRUE_MAPPING), &self.true_mapping)?;
        write_json(&dir.join(files::GROUND_TRUTH), &self.ground_truth)?;
        write_json(&dir.join(files::OUTCOMES), &self.outcomes)?;
        write_json(&dir.join(files::PREDICATES), &self.predicates)?;
        for (key, p) in &self.proposals {
            write_json(&dir.join(files::PROPOSALS).join(format!("{key}.json")), p)?;
        }
        Ok(())
    }
}
