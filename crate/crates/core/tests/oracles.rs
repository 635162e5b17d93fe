use rand_distr::{Distribution, StandardNormal};

use surveyscope::diagnostics::{conditional_contribution, correlation_screen, score_frames};
use surveyscope::ecv::{build_frames, evaluate_frames, EcvConfig, EvalRequest, SplitFrame, Study};
use surveyscope::mapping::{MappingMatrix, Weight};
use surveyscope::placebo::{run_placebo, PlaceboConfig, PlaceboInputs, PlaceboKind};
use surveyscope::rng;
use surveyscope::scoring::ScoreMatrix;
use surveyscope::synth::{generate, SynthOutput, SynthSpec};

const TWIN: &str = "health_twin";

fn setup(spec: SynthSpec, seed: u64) -> (SynthOutput, Study, Vec<SplitFrame>) {
    let out = generate(&spec).unwrap();
    let study = out.study().unwrap();
    let plan = study.plan(&EcvConfig::default(), seed).unwrap();
    let frames = build_frames(&study, &plan.outer_splits(), &EcvConfig::default()).unwrap();
    (out, study, frames)
}

/// Splits every `health_risk` weight evenly with a new leaf, so both score
/// columns are the same weighted mean of the same items.
fn with_twin(w: &MappingMatrix) -> MappingMatrix {
    let mut w = w.clone();
    let mut hit = false;
    for r in &mut w.rows {
        let mut extra = Vec::new();
        for x in &mut r.weights {
            if x.subdim_id == "health_risk" {
                x.weight /= 2.0;
                extra.push(Weight::new(TWIN, x.weight));
                hit = true;
            }
        }
        r.weights.extend(extra);
    }
    assert!(hit, "synthetic mapping has no health_risk items");
    w
}

#[test]
fn duplicate_never_passes_conditional_check() {
    let cfg = EcvConfig::default();
    let (out, study, frames) = setup(SynthSpec { n: 800, ..SynthSpec::default() }, 3);
    let w = with_twin(&out.initial_mapping);
    let cols = vec!["health_risk".to_string(), TWIN.to_string(), "service_tenure_lockin".to_string()];
    let scores = score_frames(&frames, &w, &cols, cfg.scoring).unwrap();
    for s in &scores {
        assert_eq!(s.values[0], s.values[1]);
    }
    let cluster = vec!["health_risk".to_string(), TWIN.to_string()];
    for outcome in 0..study.outcomes.len() {
        for cand in &cluster {
            let cc = conditional_contribution(&study, &frames, &scores, 0, &cluster, cand, &[], outcome, &cfg, 0.9).unwrap();
            assert!(!cc.pass, "{cand} passed on outcome {outcome}: {:?}", cc.raw);
        }
    }
}

#[test]
fn candidate_equal_to_baseline_score_adds_nothing() {
    let cfg = EcvConfig::default();
    let (out, study, frames) = setup(SynthSpec { n: 800, ..SynthSpec::default() }, 4);
    let w = with_twin(&out.initial_mapping);
    let cols = vec!["health_risk".to_string(), TWIN.to_string()];
    let req = EvalRequest {
        mapping: &w,
        columns: &cols,
        candidates: &cols[1..],
        baseline_scores: &cols[..1],
    };
    let reports = evaluate_frames(&study, &frames, &req, None, &cfg).unwrap();
    assert!(!reports.is_empty());
    for r in &reports {
        let bound = 2.0 * r.sd / (r.oriented.len() as f64).sqrt();
        assert!(r.mean.abs() <= bound + 1e-12, "{} {:?}: mean {} sd {}", r.outcome_id, r.metric, r.mean, r.sd);
    }
}

#[test]
fn independent_scores_are_not_flagged() {
    let n = 1000;
    for seed in 0..20 {
        let mut g = rng::stream(seed, 0);
        let values: Vec<Vec<Option<f64>>> = (0..6)
            .map(|_| (0..n).map(|_| Some(StandardNormal.sample(&mut g))).collect())
            .collect();
        let s = ScoreMatrix {
            respondent_ids: (0..n).map(|i| format!("r{i}")).collect(),
            subdim_ids: (0..6).map(|k| format!("s{k}")).collect(),
            values,
            counts: vec![vec![1; n]; 6],
            item_counts: vec![1; 6],
        };
        let rows: Vec<usize> = (0..n).collect();
        let rep = correlation_screen(&s, 0.85, &rows).unwrap();
        assert!(rep.flagged.is_empty(), "seed {seed}: {:?}", rep.flagged);
        assert!(rep.clusters.is_empty());
    }
}

#[test]
fn planted_signal_survives_outcome_permutation() {
    let cfg = EcvConfig::default();
    let (out, study, frames) = setup(SynthSpec { seed: 11, ..SynthSpec::default() }, 11);
    let inp = PlaceboInputs {
        study: &study,
        frames: &frames,
        taxonomy: &out.taxonomy,
        mapping: &out.initial_mapping,
        candidate: "service_tenure_lockin",
        outcome: 0,
        ecv: &cfg,
    };
    let pc = PlaceboConfig {
        draws: 50,
        seed: 11,
        smoothing: false,
    };
    let r = run_placebo(PlaceboKind::Outcome, &inp, &pc).unwrap();
    assert_eq!(r.placebo.len(), 50);
    assert!(r.summary.mean.abs() <= 0.01, "placebo mean {}", r.summary.mean);
    assert!(r.p_value <= 0.05, "p = {}", r.p_value);
    assert!(r.observed > r.summary.max);
}
