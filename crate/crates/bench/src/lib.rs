//! Shared fixtures for the benchmarks.

use surveyscope::ecv::{build_frames, EcvConfig, SplitFrame, Study};
use surveyscope::synth::{generate, SynthOutput, SynthSpec};

pub struct Fixture {
    pub out: SynthOutput,
    pub study: Study,
    pub frames: Vec<SplitFrame>,
    pub cfg: EcvConfig,
}

/// Default synthetic study with `n` respondents, split into outer folds.
pub fn fixture(n: usize) -> Fixture {
    let cfg = EcvConfig::default();
    let out = generate(&SynthSpec { n, ..SynthSpec::default() }).expect("synth");
    let study = out.study().expect("study");
    let plan = study.plan(&cfg, 1).expect("plan");
    let frames = build_frames(&study, &plan.outer_splits(), &cfg).expect("frames");
    Fixture { out, study, frames, cfg }
}
