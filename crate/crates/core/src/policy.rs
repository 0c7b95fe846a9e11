//! Online execution of the quantized stopping rule and Monte Carlo evaluation
//! of detectors.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dp::{BeliefQuantization, PolicySolution};
use crate::error::{Error, Result};
use crate::filter::{psi_bar, Belief};
use crate::kernel::{strategy_cost, CostParams, Decision};
use crate::model::{observe, simulate_trajectory, ObservationSequence, PdmpModel, Trajectory};
use crate::quantize::StateQuantization;
use crate::rng::run_rng;

/// A detector's answer on one stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Detection {
    pub decision: Decision,
    /// Filter updates that fell back to prediction.
    pub degenerate: usize,
}

impl From<Decision> for Detection {
    fn from(decision: Decision) -> Self {
        Self { decision, degenerate: 0 }
    }
}

/// Any online rule mapping `y_0..y_N` to a stopping decision. Implementations
/// must be non-anticipative: the decision to stop at `k` may only read
/// `y_0..y_k`.
pub trait Detector: Sync {
    fn name(&self) -> String;
    fn detect(&self, observations: &[f64]) -> Result<Detection>;
}

/// The quantized candidate strategy.
pub struct QuantizedPolicy<'a> {
    pub model: &'a PdmpModel,
    pub states: &'a StateQuantization,
    pub beliefs: &'a BeliefQuantization,
    pub solution: &'a PolicySolution,
}

impl<'a> QuantizedPolicy<'a> {
    pub fn new(model: &'a PdmpModel, states: &'a StateQuantization, beliefs: &'a BeliefQuantization, solution: &'a PolicySolution) -> Result<Self> {
        let steps = states.grids.len();
        if beliefs.grids.len() != steps || solution.values.len() != steps {
            return Err(Error::Shape(format!(
                "{} state grids, {} belief grids, {} solved steps",
                steps,
                beliefs.grids.len(),
                solution.values.len()
            )));
        }
        for (n, g) in beliefs.grids.iter().enumerate() {
            if solution.stop[n].len() != g.len() || g.belief_dim() != states.grids[n].len() {
                return Err(Error::Shape(format!("step {n}: solution does not match the grids")));
            }
        }
        Ok(Self { model, states, beliefs, solution })
    }
}

/// Runs the candidate strategy: filter with `Ψ̄`, project onto `Γ_k`, stop
/// at the first `r_k = 1`.
pub fn run_policy(policy: &QuantizedPolicy<'_>, observations: &[f64]) -> Result<Detection> {
    let steps = policy.states.grids.len();
    if observations.len() != steps {
        return Err(Error::Shape(format!("{} observations for horizon {}", observations.len(), steps - 1)));
    }
    let model = policy.model;
    let mut belief = Belief::start(model, &policy.states.grids[0])?;
    let mut degenerate = 0;
    for (k, &y) in observations.iter().enumerate() {
        if k > 0 {
            let (b, flag) = psi_bar(model, &policy.states.grids[k], &policy.states.transitions[k - 1], &belief, y);
            degenerate += flag as usize;
            belief = b;
        }
        let i = policy.beliefs.grids[k].project(&belief.weights, y)?;
        if policy.solution.stop[k][i] {
            return Ok(Detection { decision: Decision::Stop { time: k, mode: policy.solution.action[k][i] }, degenerate });
        }
    }
    Ok(Detection { decision: Decision::NoStop, degenerate })
}

impl Detector for QuantizedPolicy<'_> {
    fn name(&self) -> String {
        "quantized".into()
    }

    fn detect(&self, observations: &[f64]) -> Result<Detection> {
        run_policy(self, observations)
    }
}

/// Never stops.
pub struct NeverStop;

impl Detector for NeverStop {
    fn name(&self) -> String {
        "never".into()
    }

    fn detect(&self, _observations: &[f64]) -> Result<Detection> {
        Ok(Decision::NoStop.into())
    }
}

/// Outcome of one detector on one simulated run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyRun {
    pub decision: Decision,
    pub cost: f64,
    /// `τδ − T` for a stop at or after the jump.
    pub delay: Option<f64>,
    /// `#{n ≤ τ : t_n ≥ T}`.
    pub observations_after_jump: usize,
    pub early: bool,
    pub degenerate: usize,
}

pub fn score_run(model: &PdmpModel, costs: &CostParams, trajectory: &Trajectory, detection: Detection) -> Result<StrategyRun> {
    let modes: Vec<usize> = (0..=model.horizon).map(|n| trajectory.mode_at(n as f64 * model.delta)).collect();
    let cost = strategy_cost(costs, &modes, detection.decision)?;
    let (delay, after, early) = match detection.decision {
        Decision::Stop { time, .. } => {
            let t = time as f64 * model.delta;
            let after = (0..=time).filter(|&n| n as f64 * model.delta >= trajectory.jump_time).count();
            if t < trajectory.jump_time {
                (None, 0, true)
            } else {
                (Some(t - trajectory.jump_time), after, false)
            }
        }
        Decision::NoStop => (None, 0, false),
    };
    Ok(StrategyRun { decision: detection.decision, cost, delay, observations_after_jump: after, early, degenerate: detection.degenerate })
}

/// Aggregates over runs, in the order of the columns of the result tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub runs: usize,
    pub mean_cost: f64,
    pub sd_cost: f64,
    /// `1.96 · sd / √runs`.
    pub ci95: f64,
    /// Mean `ΔT` over stops at or after the jump; NaN when there are none.
    pub mean_delay: f64,
    pub sd_delay: f64,
    pub mean_obs_after_jump: f64,
    pub early: usize,
    pub no_stop: usize,
    pub degenerate: usize,
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn summarize(runs: &[StrategyRun]) -> Summary {
    let costs: Vec<f64> = runs.iter().map(|r| r.cost).collect();
    let (mean_cost, sd_cost) = mean_sd(&costs);
    let delays: Vec<f64> = runs.iter().filter_map(|r| r.delay).collect();
    let (mean_delay, sd_delay) = mean_sd(&delays);
    let after: Vec<f64> = runs.iter().filter(|r| r.delay.is_some()).map(|r| r.observations_after_jump as f64).collect();
    Summary {
        runs: runs.len(),
        mean_cost,
        sd_cost,
        ci95: 1.96 * sd_cost / (runs.len() as f64).sqrt(),
        mean_delay,
        sd_delay,
        mean_obs_after_jump: mean_sd(&after).0,
        early: runs.iter().filter(|r| r.early).count(),
        no_stop: runs.iter().filter(|r| r.decision == Decision::NoStop).count(),
        degenerate: runs.iter().map(|r| r.degenerate).sum(),
    }
}

/// Run `i` uses the stream seeded by `master ^ i`; the same trajectories
/// and noise feed every detector.
pub fn simulate_run(model: &PdmpModel, master: u64, index: usize) -> (Trajectory, ObservationSequence) {
    let mut rng = run_rng(master, index as u64);
    let tr = simulate_trajectory(model, &mut rng);
    let obs = observe(&tr, model, &mut rng);
    (tr, obs)
}

/// Evaluates each detector on the same `runs` simulated streams.
pub fn evaluate_runs(model: &PdmpModel, detectors: &[&dyn Detector], costs: &CostParams, runs: usize, master: u64) -> Result<Vec<Vec<StrategyRun>>> {
    let per_run: Vec<Vec<StrategyRun>> = (0..runs)
        .into_par_iter()
        .map(|i| {
            let (tr, obs) = simulate_run(model, master, i);
            detectors.iter().map(|d| score_run(model, costs, &tr, d.detect(&obs.values)?)).collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok((0..detectors.len()).map(|k| per_run.iter().map(|r| r[k]).collect()).collect())
}

pub fn evaluate_strategy(model: &PdmpModel, detectors: &[&dyn Detector], costs: &CostParams, runs: usize, master: u64) -> Result<Vec<Summary>> {
    Ok(evaluate_runs(model, detectors, costs, runs, master)?.iter().map(|r| summarize(r)).collect())
}
