//! Run configuration: command-line flags layered over an optional config
//! file, resolved against defaults and echoed into `manifest.json`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use surveyscope::diagnostics::{DataLimitThresholds, DEFAULT_CUTOFF, DEFAULT_PASS_SHARE};
use surveyscope::ecv::{EcvConfig, TriageThresholds};
use surveyscope::error::{Error, Result};
use surveyscope::placebo::PlaceboConfig;
use surveyscope::refine::{DecideConfig, LoopConfig, StoppingRule};
use surveyscope::scoring::{ScoringKind, ScoringRule};
use surveyscope::synth::files;

pub const MANIFEST: &str = "manifest.json";
pub const DEFAULT_CLOSENESS: f64 = 0.25;
pub const GRID_TAUS: [f64; 3] = [0.05, 0.10, 0.15];
pub const GRID_MS: [usize; 3] = [1, 2, 3];
pub const GRID_CUTOFFS: [f64; 3] = [0.80, 0.85, 0.90];

/// Every tunable. All fields are optional so that flags, a config file and
/// defaults can be layered; `resolve` fills in what the command needs.
#[derive(Args, Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Directory laid out like `synth` output; fills in any missing path.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub instrument: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub responses: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rules: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub taxonomy: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mapping: Option<PathBuf>,
    /// JSON list of outcome specs.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub outcomes: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub predicates: Option<PathBuf>,
    /// Directory of proposal fixtures.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub proposals: Option<PathBuf>,
    /// Generator spec (JSON) for `synth`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spec: Option<PathBuf>,
    /// Delta reports (JSON) for `report`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub deltas: Option<PathBuf>,

    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub missing_tokens: Option<Vec<String>>,

    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top_m: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub overlap_cutoff: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub closeness: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub outer_folds: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inner_folds: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub repeats: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scoring_rule: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub post_standardize: Option<bool>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub signal_share: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weak_share: Option<f64>,
    /// Scores always kept in the baseline model.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline: Option<Vec<String>>,

    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_rounds: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plateau_delta: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patience: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub discard_after: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pass_share: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub outer_fold: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub proposer_attempts: Option<u32>,
    /// Chat-completions endpoint; the credential comes from the environment.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,

    /// Subdimension under test (`placebo`, `grid`).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub candidate: Option<String>,
    /// Outcome id (`placebo`); defaults to the first outcome.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub outcome: Option<String>,
    /// `outcome` or `mapping`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub draws: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub smoothing: Option<bool>,

    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid_tau: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid_top_m: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid_cutoff: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid_scoring: Option<Vec<String>>,

    /// `synth`: respondents.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    /// `synth`: zero every effect.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub null: Option<bool>,
}

macro_rules! layer {
    ($a:ident, $b:ident; $($f:ident),* $(,)?) => {
        $( if $a.$f.is_none() { $a.$f = $b.$f.clone(); } )*
    };
}

macro_rules! default {
    ($s:ident; $($f:ident = $v:expr),* $(,)?) => {
        { $( if $s.$f.is_none() { $s.$f = Some($v); } )* }
    };
}

/// What `--config` may point at: a bare config or a previous manifest.
#[derive(Deserialize)]
#[serde(untagged)]
enum ConfigFile {
    Manifest(Manifest),
    Bare(RunConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: RunConfig,
}

impl Manifest {
    pub fn new(command: &str, config: RunConfig) -> Self {
        Self {
            tool: "surveyscope".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config,
        }
    }
}

fn need<T: Clone>(v: &Option<T>, what: &str) -> Result<T> {
    v.clone()
        .ok_or_else(|| Error::InvalidParameter(format!("`--{what}` is required")))
}

impl RunConfig {
    /// Flags win over the file at `path`.
    pub fn layer_file(mut self, path: &Path, command: &str) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let file: RunConfig = match serde_json::from_str(&text).map_err(|e| Error::Schema(e.to_string()))? {
            ConfigFile::Manifest(m) => {
                if m.command != command {
                    return Err(Error::InvalidParameter(format!(
                        "manifest is for `{}`, not `{command}`",
                        m.command
                    )));
                }
                m.config
            }
            ConfigFile::Bare(c) => c,
        };
        let o = file;
        layer!(self, o;
            data, instrument, responses, rules, taxonomy, mapping, outcomes, predicates, proposals, spec, deltas,
            missing_tokens, seed, tau, top_m, overlap_cutoff, closeness, outer_folds, inner_folds, repeats,
            scoring_rule, post_standardize, lambda, signal_share, weak_share, baseline, max_rounds, plateau_delta,
            patience, discard_after, pass_share, outer_fold, proposer_attempts, endpoint, model, candidate, outcome,
            kind, draws, smoothing, grid_tau, grid_top_m, grid_cutoff, grid_scoring, n, null,
        );
        Ok(self)
    }

    /// Expands `--data`, makes paths absolute and fills defaults so the
    /// manifest records every value the command will use.
    pub fn resolve(mut self, command: &str) -> Result<Self> {
        if self.seed.is_none() {
            return Err(Error::InvalidParameter("`--seed` is required".into()));
        }
        if let Some(dir) = self.data.take() {
            let pick = |p: &mut Option<PathBuf>, name: &str| {
                if p.is_none() && dir.join(name).exists() {
                    *p = Some(dir.join(name));
                }
            };
            pick(&mut self.instrument, files::INSTRUMENT);
            pick(&mut self.responses, files::RESPONSES);
            pick(&mut self.rules, files::RULES);
            pick(&mut self.taxonomy, files::TAXONOMY);
            pick(&mut self.mapping, files::MAPPING);
            pick(&mut self.outcomes, files::OUTCOMES);
            pick(&mut self.predicates, files::PREDICATES);
            pick(&mut self.proposals, files::PROPOSALS);
        }
        for p in [
            &mut self.instrument,
            &mut self.responses,
            &mut self.rules,
            &mut self.taxonomy,
            &mut self.mapping,
            &mut self.outcomes,
            &mut self.predicates,
            &mut self.proposals,
            &mut self.spec,
            &mut self.deltas,
        ] {
            if let Some(path) = p.as_mut() {
                *path = fs::canonicalize(&*path)
                    .map_err(|e| Error::InvalidParameter(format!("{}: {e}", path.display())))?;
            }
        }

        let ecv = EcvConfig::default();
        let lc = LoopConfig::default();
        let eval = matches!(command, "diagnose" | "refine" | "placebo" | "grid");
        if eval || command == "score" {
            default!(self;
                scoring_rule = ecv.scoring.kind.as_str().to_string(),
                post_standardize = ecv.scoring.post_standardize,
            );
        }
        if eval {
            default!(self;
                outer_folds = ecv.k_out,
                inner_folds = ecv.k_in,
                repeats = ecv.repeats,
                lambda = ecv.lambda,
                signal_share = ecv.thresholds.signal_share,
                weak_share = ecv.thresholds.weak_share,
                baseline = vec![],
            );
        }
        if matches!(command, "diagnose" | "refine") {
            default!(self; overlap_cutoff = DEFAULT_CUTOFF);
        }
        match command {
            "validate" => default!(self; closeness = DEFAULT_CLOSENESS),
            "diagnose" => default!(self; closeness = DEFAULT_CLOSENESS),
            "refine" => default!(self;
                max_rounds = lc.stopping.max_rounds,
                plateau_delta = lc.stopping.plateau_delta,
                patience = lc.stopping.patience,
                discard_after = lc.decide.discard_after,
                pass_share = DEFAULT_PASS_SHARE,
                outer_fold = 0,
                proposer_attempts = lc.proposer_attempts,
            ),
            "placebo" => {
                let p = PlaceboConfig::default();
                default!(self; kind = "outcome".to_string(), draws = p.draws, smoothing = p.smoothing);
            }
            "grid" => default!(self;
                grid_tau = GRID_TAUS.to_vec(),
                grid_top_m = GRID_MS.to_vec(),
                grid_cutoff = GRID_CUTOFFS.to_vec(),
                grid_scoring = vec![self.scoring_rule.clone().expect("set above")],
            ),
            "synth" => default!(self; null = false),
            _ => {}
        }
        Ok(self)
    }

    pub fn seed(&self) -> u64 {
        self.seed.expect("resolved config has a seed")
    }

    pub fn path(&self, p: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
        need(p, what)
    }

    pub fn scoring(&self) -> Result<ScoringRule> {
        let kind: ScoringKind = need(&self.scoring_rule, "scoring-rule")?.parse()?;
        Ok(ScoringRule {
            kind,
            post_standardize: self.post_standardize.unwrap_or(true),
        })
    }

    pub fn ecv(&self) -> Result<EcvConfig> {
        let d = EcvConfig::default();
        Ok(EcvConfig {
            k_out: self.outer_folds.unwrap_or(d.k_out),
            k_in: self.inner_folds.unwrap_or(d.k_in),
            repeats: self.repeats.unwrap_or(d.repeats),
            scoring: self.scoring()?,
            lambda: self.lambda.unwrap_or(d.lambda),
            thresholds: TriageThresholds {
                signal_share: self.signal_share.unwrap_or(d.thresholds.signal_share),
                weak_share: self.weak_share.unwrap_or(d.thresholds.weak_share),
            },
            ..d
        })
    }

    pub fn loop_config(&self) -> LoopConfig {
        let d = LoopConfig::default();
        LoopConfig {
            stopping: StoppingRule {
                plateau_delta: self.plateau_delta.unwrap_or(d.stopping.plateau_delta),
                patience: self.patience.unwrap_or(d.stopping.patience),
                max_rounds: self.max_rounds.unwrap_or(d.stopping.max_rounds),
            },
            cutoff: self.overlap_cutoff.unwrap_or(d.cutoff),
            limits: DataLimitThresholds::default(),
            decide: DecideConfig {
                discard_after: self.discard_after.unwrap_or(d.decide.discard_after),
            },
            pass_share: self.pass_share.unwrap_or(d.pass_share),
            proposer_attempts: self.proposer_attempts.unwrap_or(d.proposer_attempts),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_and_manifest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.json");
        fs::write(&file, r#"{"seed": 3, "tau": 0.1, "draws": 7}"#).unwrap();
        let flags = RunConfig {
            tau: Some(0.15),
            ..Default::default()
        };
        let c = flags.layer_file(&file, "placebo").unwrap().resolve("placebo").unwrap();
        assert_eq!(c.seed, Some(3));
        assert_eq!(c.tau, Some(0.15));
        assert_eq!(c.draws, Some(7));
        assert_eq!(c.kind.as_deref(), Some("outcome"));

        let m = Manifest::new("placebo", c.clone());
        let mpath = dir.path().join(MANIFEST);
        fs::write(&mpath, serde_json::to_string(&m).unwrap()).unwrap();
        let again = RunConfig::default().layer_file(&mpath, "placebo").unwrap().resolve("placebo").unwrap();
        assert_eq!(again, c);
        assert!(RunConfig::default().layer_file(&mpath, "grid").is_err());
    }

    #[test]
    fn seed_is_mandatory() {
        let e = RunConfig::default().resolve("score").unwrap_err();
        assert_eq!(e.kind(), "InvalidParameter");
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.json");
        fs::write(&file, r#"{"seed": 3, "taus": 0.1}"#).unwrap();
        assert!(RunConfig::default().layer_file(&file, "score").is_err());
    }
}
