//! Suite metrics: task success over benign scenarios, attack success over
//! attack scenarios.

use std::collections::BTreeMap;
use std::fmt;

use aura_core::kernel::{KernelMode, Layer};
use serde::{Deserialize, Serialize};

use crate::engine::{run, RunOptions, RunReport, SimError};
use crate::inspect::RunOutcome;
use crate::scenario::{Scenario, ScenarioKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rate {
    pub num: usize,
    pub den: usize,
}

impl Rate {
    pub fn value(self) -> Option<f64> {
        (self.den > 0).then(|| self.num as f64 / self.den as f64)
    }
}

impl fmt::Display for Rate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub mode: KernelMode,
    pub seed: u64,
    pub optimistic: bool,
    /// Benign scenarios whose task completed.
    pub tsr: Rate,
    /// Attack scenarios whose payload landed.
    pub asr: Rate,
    pub mean_steps: f64,
    pub blocked_by_stage: BTreeMap<String, usize>,
    pub blocked_by_layer: BTreeMap<Layer, usize>,
    /// Every scenario met its expected verdict.
    pub all_met: bool,
    pub reports: Vec<RunReport>,
}

pub fn summarize(reports: Vec<RunReport>, opts: &RunOptions) -> Result<SuiteReport, SimError> {
    if reports.is_empty() {
        return Err(SimError::EmptySuite);
    }
    let count = |k: ScenarioKind, f: &dyn Fn(&RunReport) -> bool| Rate {
        num: reports.iter().filter(|r| r.kind == k && f(r)).count(),
        den: reports.iter().filter(|r| r.kind == k).count(),
    };
    let tsr = count(ScenarioKind::Benign, &|r| r.outcome == RunOutcome::Success);
    let asr = count(ScenarioKind::Attack, &|r| r.attack_landed);
    let mut blocked_by_stage = BTreeMap::new();
    let mut blocked_by_layer = BTreeMap::new();
    for r in &reports {
        if let RunOutcome::Blocked { stage } = r.outcome {
            *blocked_by_stage.entry(stage.name().to_string()).or_insert(0) += 1;
            *blocked_by_layer.entry(stage.layer()).or_insert(0) += 1;
        }
    }
    Ok(SuiteReport {
        mode: opts.mode,
        seed: opts.seed,
        optimistic: opts.optimistic,
        tsr,
        asr,
        mean_steps: reports.iter().map(|r| r.steps_used as f64).sum::<f64>() / reports.len() as f64,
        blocked_by_stage,
        blocked_by_layer,
        all_met: reports.iter().all(|r| r.met),
        reports,
    })
}

/// Runs every scenario on a fresh device with the same options and seed.
pub fn run_suite(scenarios: &[Scenario], opts: &RunOptions) -> Result<SuiteReport, SimError> {
    let reports = scenarios
        .iter()
        .map(|s| run(s, opts).map(|r| r.report))
        .collect::<Result<Vec<_>, _>>()?;
    summarize(reports, opts)
}
