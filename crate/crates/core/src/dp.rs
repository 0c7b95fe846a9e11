//! Second discretization and the backward dynamic program.
//!
//! The surrogate chain `(Θ̄_n, Ȳ_n)` is quantized jointly into grids `Γ_n`
//! with transition counts `R̂′_n`; the stopping problem is then solved by
//! backward induction on the grids. [`bound_constants`] and
//! [`theorem_bounds`] evaluate the a-priori error coefficients.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{bar_step, Belief};
use crate::kernel::CostParams;
use crate::model::{FlowFamily, Link, PdmpModel};
use crate::quantize::{Codebook, QuantGrid, StateQuantization, StepSchedule, TransitionMatrix};
use crate::rng::{stage, stream_rng, SimRng};

// ---------------------------------------------------------------------------
// Belief grids
// ---------------------------------------------------------------------------

/// Grid `Γ_n`: rows are `(θ_1..θ_ℓ, y·scale)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeliefGrid {
    pub n: usize,
    /// Observation coordinate weight in the projection metric.
    pub obs_scale: f64,
    pub book: Codebook,
}

impl BeliefGrid {
    pub fn len(&self) -> usize {
        self.book.len()
    }

    pub fn is_empty(&self) -> bool {
        self.book.is_empty()
    }

    /// Number of belief coordinates `ℓ_n`.
    pub fn belief_dim(&self) -> usize {
        self.book.dim - 1
    }

    pub fn weights(&self, i: usize) -> &[f64] {
        let p = self.book.point(i);
        &p[..p.len() - 1]
    }

    pub fn observation(&self, i: usize) -> f64 {
        self.book.point(i)[self.book.dim - 1] / self.obs_scale
    }

    fn coords(&self, weights: &[f64], y: f64, out: &mut Vec<f64>) {
        out.extend_from_slice(weights);
        out.push(y * self.obs_scale);
    }

    /// Nearest point to `(θ, y)`; ties go to the lowest index.
    pub fn project(&self, weights: &[f64], y: f64) -> Result<usize> {
        if weights.len() != self.belief_dim() {
            return Err(Error::Shape(format!("belief of length {} on Γ_{} of dimension {}", weights.len(), self.n, self.belief_dim())));
        }
        let mut z = Vec::with_capacity(self.book.dim);
        self.coords(weights, y, &mut z);
        Ok(self.book.nearest(&z).0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BeliefConfig {
    /// Points per grid `N_n` for `n ≥ 1`.
    pub size: usize,
    pub chains: usize,
    pub lloyd_iterations: usize,
    pub fallback_samples: usize,
    pub schedule: StepSchedule,
    pub seed: u64,
}

impl Default for BeliefConfig {
    fn default() -> Self {
        Self { size: 50, chains: 100_000, lloyd_iterations: 5, fallback_samples: 100, schedule: StepSchedule::default(), seed: 1 }
    }
}

/// Grids `Γ_0..Γ_N`, kernels `R̂′_0..R̂′_{N-1}` and training diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeliefQuantization {
    pub grids: Vec<BeliefGrid>,
    pub transitions: Vec<TransitionMatrix>,
    /// Monte Carlo `E‖Θ̂_n − Θ̄_n‖₁` over the training chains.
    pub belief_l1: Vec<f64>,
    /// Degenerate filter updates met while simulating the chains.
    pub degenerate_updates: u64,
}

/// `1 / (2(S + s))` with `S` the largest `|F(x)|` on `K`.
pub fn observation_scale(model: &PdmpModel) -> f64 {
    let (lo, hi) = model.bounds;
    let s_max = model.link_value(lo).abs().max(model.link_value(hi).abs());
    1.0 / (2.0 * (s_max + model.noise.trunc))
}

fn renormalize(weights: &mut [f64]) {
    weights.iter_mut().for_each(|w| *w = w.max(0.0));
    let total: f64 = weights.iter().sum();
    if total > 0.0 {
        weights.iter_mut().for_each(|w| *w /= total);
    }
}

/// Simulates the surrogate chain forward and quantizes each step.
pub fn build_belief_grids(model: &PdmpModel, sq: &StateQuantization, config: &BeliefConfig) -> Result<BeliefQuantization> {
    let scale = observation_scale(model);
    let m = config.chains.max(1);
    let horizon = sq.transitions.len();
    let start = Belief::start(model, &sq.grids[0])?;
    let y0 = model.link_value(model.x0);

    let mut grids = vec![BeliefGrid { n: 0, obs_scale: scale, book: Codebook::new(start.weights.len() + 1, [start.weights.clone(), vec![y0 * scale]].concat()) }];
    let mut transitions = Vec::with_capacity(horizon);
    let mut belief_l1 = vec![0.0];
    let mut degenerate = 0u64;

    let mut rngs: Vec<SimRng> = (0..m).map(|c| stream_rng(config.seed, stage::BELIEF_CHAINS, c as u64)).collect();
    let mut beliefs: Vec<Belief> = vec![start; m];
    let mut idx: Vec<usize> = vec![0; m];

    for n in 1..=horizon {
        let stepped: Vec<(Belief, f64, bool)> = beliefs.par_iter().zip(rngs.par_iter_mut()).map(|(b, rng)| bar_step(model, sq, b, rng)).collect();
        let dim = sq.grids[n].len() + 1;
        let mut samples = Vec::with_capacity(m * dim);
        for (b, y, flag) in &stepped {
            degenerate += *flag as u64;
            samples.extend_from_slice(&b.weights);
            samples.push(y * scale);
        }
        let mut book = Codebook::from_distinct(&samples, dim, config.size.max(1));
        for (t, z) in samples.chunks_exact(dim).enumerate() {
            book.clvq_step(z, config.schedule.gain(t));
        }
        if config.lloyd_iterations > 0 {
            book.lloyd(&samples, config.lloyd_iterations, 0.0);
        }
        for i in 0..book.len() {
            renormalize(&mut book.point_mut(i)[..dim - 1]);
        }
        book.dedup();
        let grid = BeliefGrid { n, obs_scale: scale, book };

        let next_idx: Vec<usize> = samples.par_chunks(dim).map(|z| grid.book.nearest(z).0).collect();
        let l1: f64 = samples
            .par_chunks(dim)
            .zip(next_idx.par_iter())
            .map(|(z, &j)| z[..dim - 1].iter().zip(grid.weights(j)).map(|(a, b)| (a - b).abs()).sum::<f64>())
            .sum();
        belief_l1.push(l1 / m as f64);

        let rows = grids[n - 1].len();
        let cols = grid.len();
        let mut counts = vec![0u64; rows * cols];
        for (&i, &j) in idx.iter().zip(&next_idx) {
            counts[i * cols + j] += 1;
        }
        let (mut matrix, empty) = TransitionMatrix::from_counts(rows, cols, &counts);
        for i in empty {
            log::debug!("Γ step {}: row {i} unvisited, simulating {} fallback transitions", n - 1, config.fallback_samples);
            let src = Belief { n: n - 1, weights: grids[n - 1].weights(i).to_vec() };
            let mut rng = stream_rng(config.seed, stage::BELIEF_FALLBACK, ((n as u64) << 32) | i as u64);
            let k = config.fallback_samples.max(1);
            let mut row = vec![0u64; cols];
            for _ in 0..k {
                let (b, y, _) = bar_step(model, sq, &src, &mut rng);
                row[grid.project(&b.weights, y)?] += 1;
            }
            for (p, c) in matrix.row_mut(i).iter_mut().zip(row) {
                *p = c as f64 / k as f64;
            }
        }
        transitions.push(matrix);
        grids.push(grid);
        beliefs = stepped.into_iter().map(|(b, _, _)| b).collect();
        idx = next_idx;
    }
    if degenerate > 0 {
        log::info!("{degenerate} degenerate filter updates over {m} surrogate chains");
    }
    Ok(BeliefQuantization { grids, transitions, belief_l1, degenerate_updates: degenerate })
}

// ---------------------------------------------------------------------------
// Costs on belief points
// ---------------------------------------------------------------------------

/// `C′(θ, a) = Σ_i θ_i C(mode(ω_i), a)`; `a = 0` gives `c′`.
pub fn expected_cost(costs: &CostParams, omega: &QuantGrid, weights: &[f64], action: usize) -> f64 {
    omega.points.iter().zip(weights).map(|(p, w)| w * costs.terminal(p.mode, action)).sum()
}

/// Per-step, per-point, per-action costs `C′(γ, a)` for `a = 0..=d`, with
/// the row-stochastic kernels between steps. The dynamic program only sees
/// these tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpTables {
    pub costs: Vec<Vec<Vec<f64>>>,
    pub transitions: Vec<TransitionMatrix>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicySolution {
    pub values: Vec<Vec<f64>>,
    pub stop: Vec<Vec<bool>>,
    pub action: Vec<Vec<usize>>,
    pub costs: Option<CostParams>,
}

impl PolicySolution {
    pub fn horizon(&self) -> usize {
        self.values.len().saturating_sub(1)
    }
}

fn argmin_from(values: &[f64], from: usize) -> (usize, f64) {
    let mut best = (from, values[from]);
    for (a, &v) in values.iter().enumerate().skip(from + 1) {
        if v < best.1 {
            best = (a, v);
        }
    }
    best
}

/// Backward induction on tabulated costs.
///
/// At the horizon the minimum runs over every action including `0`; before
/// it, stopping wins only when strictly cheaper than continuing.
pub fn solve_tables(tables: &DpTables) -> Result<PolicySolution> {
    let steps = tables.costs.len();
    if steps == 0 || tables.transitions.len() + 1 != steps {
        return Err(Error::Shape(format!("{} cost tables for {} transitions", steps, tables.transitions.len())));
    }
    let horizon = steps - 1;
    let mut values = vec![Vec::new(); steps];
    let mut stop = vec![Vec::new(); steps];
    let mut action = vec![Vec::new(); steps];
    let last: Vec<(usize, f64)> = tables.costs[horizon].iter().map(|c| argmin_from(c, 0)).collect();
    values[horizon] = last.iter().map(|x| x.1).collect();
    action[horizon] = last.iter().map(|x| x.0).collect();
    stop[horizon] = last.iter().map(|x| x.0 > 0).collect();
    for n in (0..horizon).rev() {
        let r = &tables.transitions[n];
        if r.rows != tables.costs[n].len() || r.cols != values[n + 1].len() {
            return Err(Error::Shape(format!("kernel {n} is {}×{}", r.rows, r.cols)));
        }
        let next = &values[n + 1];
        let solved: Vec<(f64, bool, usize)> = tables.costs[n]
            .par_iter()
            .enumerate()
            .map(|(i, c)| {
                let (a, stop_value) = argmin_from(c, 1);
                let cont = c[0] + r.row(i).iter().zip(next).map(|(p, v)| p * v).sum::<f64>();
                if stop_value < cont {
                    (stop_value, true, a)
                } else {
                    (cont, false, 0)
                }
            })
            .collect();
        values[n] = solved.iter().map(|s| s.0).collect();
        stop[n] = solved.iter().map(|s| s.1).collect();
        action[n] = solved.iter().map(|s| s.2).collect();
    }
    Ok(PolicySolution { values, stop, action, costs: None })
}

/// Solves the stopping problem on the belief grids.
pub fn backward_solve(bq: &BeliefQuantization, omegas: &[QuantGrid], costs: &CostParams) -> Result<PolicySolution> {
    if omegas.len() != bq.grids.len() {
        return Err(Error::Shape(format!("{} state grids for {} belief grids", omegas.len(), bq.grids.len())));
    }
    let d = costs.num_post_modes();
    let tables: Vec<Vec<Vec<f64>>> = bq
        .grids
        .iter()
        .zip(omegas)
        .map(|(g, omega)| {
            if g.belief_dim() != omega.len() {
                return Err(Error::Shape(format!("Γ_{} has belief dimension {} but Ω has {} points", g.n, g.belief_dim(), omega.len())));
            }
            Ok((0..g.len()).map(|i| (0..=d).map(|a| expected_cost(costs, omega, g.weights(i), a)).collect()).collect())
        })
        .collect::<Result<_>>()?;
    let mut solution = solve_tables(&DpTables { costs: tables, transitions: bq.transitions.clone() })?;
    solution.costs = Some(costs.clone());
    Ok(solution)
}

// ---------------------------------------------------------------------------
// Error-bound constants
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundConstants {
    /// `[Φ] = 1 ∨ max_i [Φ_i]`.
    pub phi_lip: f64,
    pub g_bar: f64,
    pub b_bar: f64,
    pub f_upper: f64,
    pub f_lower: f64,
    pub b_f: f64,
    pub l_f: f64,
    pub ff_bar: f64,
    pub ff_tilde: f64,
    pub ff_plus: f64,
    /// First-discretization coefficients `a_0..a_{N-1}`.
    pub a: Vec<f64>,
    /// Second-discretization coefficients `b_0..b_N`.
    pub b: Vec<f64>,
}

/// Lipschitz constant in `x` of each flow over `0 < t ≤ Nδ`.
///
/// Sinusoidal flows act on the phase coordinate by translation, so their
/// constant is 1.
pub fn flow_lipschitz(model: &PdmpModel) -> Vec<f64> {
    let horizon = model.horizon_time();
    let mut out = vec![1.0];
    match model.family {
        FlowFamily::Exponential => out.extend(model.speeds.iter().map(|v| (v * horizon).exp().max(1.0))),
        FlowFamily::ExponentialLinear => {
            out.push((model.speeds[0] * horizon).exp().max(1.0));
            out.push(1.0);
        }
        FlowFamily::SineFrequency | FlowFamily::SineSlope => out.extend(model.speeds.iter().map(|_| 1.0)),
    }
    out
}

pub fn bound_constants(model: &PdmpModel, costs: &CostParams) -> Result<BoundConstants> {
    let noise = &model.noise;
    if noise.sigma2 <= 0.0 {
        return Err(Error::UnsupportedBounds("noise variance must be positive".into()));
    }
    let sigma = noise.sigma();
    let s = noise.trunc;
    let p = noise.normalizer;
    let f_upper = noise.peak();
    let f_lower = f_upper * (-s * s / (2.0 * noise.sigma2)).exp();
    let root = (2.0 * std::f64::consts::PI).sqrt();
    let (lo, hi) = model.bounds;
    let (b_f, l_f) = match model.link {
        Link::Identity => {
            let big = lo.abs().max(hi.abs());
            (2.0 * (s + big) * f_upper, 2.0 * s * big * (big + s) / (p * sigma.powi(3) * root))
        }
        Link::Inverse => {
            if lo <= 0.0 {
                return Err(Error::UnsupportedBounds(format!("inverse link needs K = [S1, S2] with S1 > 0, got [{lo}, {hi}]")));
            }
            let width = 2.0 * s + hi - lo;
            (width * f_upper, s * width / (lo * lo * p * sigma.powi(3) * root))
        }
    };
    let phi_lip = flow_lipschitz(model).into_iter().fold(1.0, f64::max);
    let g_bar = costs.max_terminal();
    let b_bar = g_bar + costs.delta * costs.beta;
    let ff_bar = (b_f + l_f) / f_lower + l_f * f_upper / (f_lower * f_lower);
    let ff_tilde = b_f / f_lower * (1.0 + f_upper / f_lower);
    let phi2 = phi_lip * phi_lip;
    let ff_plus = b_f / f_lower + phi2 * ff_bar;

    let horizon = model.horizon;
    let ratio_a = ff_plus * f_upper;
    let a = (0..horizon)
        .map(|n| {
            let k = horizon - n;
            let sum: f64 = (0..=k).map(|j| ((1.0 + phi2 * l_f) * (k - j) as f64 + 1.0) * ratio_a.powi(j as i32)).sum();
            b_bar * (1.0 + phi2) * (l_f * (k + 1) as f64 + f_upper * ff_bar * sum)
        })
        .collect();
    let ratio_b = f_upper * ff_tilde;
    let b = (0..=horizon)
        .map(|n| {
            let k = horizon - n;
            2.0 * b_bar * (0..=k).map(|j| (k + 1 - j) as f64 * ratio_b.powi(j as i32)).sum::<f64>()
        })
        .collect();
    Ok(BoundConstants { phi_lip, g_bar, b_bar, f_upper, f_lower, b_f, l_f, ff_bar, ff_tilde, ff_plus, a, b })
}

/// `(Σ_{n<N} a_n E|X̄_n − X_n|, Σ_{n≤N} b_n E‖Θ̂_n − Θ̄_n‖₁)`.
///
/// Zero distortions contribute nothing even when a coefficient overflows.
pub fn theorem_bounds(constants: &BoundConstants, state_distortion: &[f64], belief_distortion: &[f64]) -> (f64, f64) {
    let weigh = |coef: &[f64], dist: &[f64]| -> f64 {
        coef.iter().zip(dist).filter(|(_, e)| **e != 0.0).map(|(c, e)| c * e).sum()
    };
    (weigh(&constants.a, state_distortion), weigh(&constants.b, belief_distortion))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FlowFamily, NoiseSpec};
    use crate::quantize::{GridPoint, QuantGrid};

    fn model_1a() -> PdmpModel {
        PdmpModel::new(FlowFamily::Exponential, vec![0.1, 0.5, 1.0], NoiseSpec::new(0.5, None).unwrap(), 1.0 / 6.0, 36)
            .unwrap()
    }

    fn costs() -> CostParams {
        CostParams::uniform(4.0, 1.0, 1.5, 3, 1.0 / 6.0, 36).unwrap()
    }

    fn omega(modes: &[usize]) -> QuantGrid {
        let m = model_1a();
        let entries = modes
            .iter()
            .map(|&mode| {
                let mut s = m.start_state();
                s.mode = mode;
                (GridPoint { mode, x: 1.0 + mode as f64, u: 0.0 }, s)
            })
            .collect();
        QuantGrid::new(0, false, 4, entries).unwrap()
    }

    #[test]
    fn expected_cost_examples() {
        let c = costs();
        let g = omega(&[0, 1, 2]);
        assert_eq!(expected_cost(&c, &g, &[1.0, 0.0, 0.0], 2), 4.0);
        assert_eq!(expected_cost(&c, &g, &[0.5, 0.5, 0.0], 1), 2.0);
        assert_eq!(expected_cost(&c, &g, &[1.0, 0.0, 0.0], 0), 0.0);
    }

    #[test]
    fn horizon_zero_start_continues() {
        let c = costs();
        let g = omega(&[0]);
        let table = vec![vec![(0..=3).map(|a| expected_cost(&c, &g, &[1.0], a)).collect::<Vec<_>>()]];
        let sol = solve_tables(&DpTables { costs: table, transitions: vec![] }).unwrap();
        assert_eq!(sol.values[0][0], 0.0);
        assert_eq!(sol.action[0][0], 0);
        assert!(!sol.stop[0][0]);
    }

    #[test]
    fn certain_mode_at_horizon_is_free() {
        let c = costs();
        let g = omega(&[0, 2]);
        let row: Vec<f64> = (0..=3).map(|a| expected_cost(&c, &g, &[0.0, 1.0], a)).collect();
        let sol = solve_tables(&DpTables { costs: vec![vec![row]], transitions: vec![] }).unwrap();
        assert_eq!(sol.values[0][0], 0.0);
        assert_eq!(sol.action[0][0], 2);
        assert!(sol.stop[0][0]);
    }

    #[test]
    fn ties_continue_before_horizon() {
        // Stopping costs exactly the continuation value: continue.
        let tables = DpTables {
            costs: vec![vec![vec![0.5, 1.0, 2.0]], vec![vec![0.5, 1.0, 0.5]]],
            transitions: vec![TransitionMatrix { rows: 1, cols: 1, data: vec![1.0] }],
        };
        let sol = solve_tables(&tables).unwrap();
        assert_eq!(sol.values[1][0], 0.5);
        assert_eq!(sol.action[1][0], 0);
        assert_eq!(sol.values[0][0], 1.0);
        assert!(!sol.stop[0][0]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let tables = DpTables { costs: vec![vec![vec![0.0, 1.0]]; 2], transitions: vec![] };
        assert!(solve_tables(&tables).is_err());
    }

    #[test]
    fn b_bar_and_density_bounds() {
        let m = model_1a();
        let bc = bound_constants(&m, &costs()).unwrap();
        assert_eq!(bc.g_bar, 4.0);
        assert!((bc.b_bar - (4.0 + 1.0 / 6.0)).abs() < 1e-15);
        assert!((bc.b[36] - 2.0 * bc.b_bar).abs() < 1e-12);
        assert_eq!(bc.a.len(), 36);
        assert_eq!(bc.b.len(), 37);
    }

    #[test]
    fn inverse_link_needs_positive_bounds() {
        let mut m = model_1a();
        m.link = Link::Inverse;
        m.bounds = (-1.0, 2.0);
        assert!(matches!(bound_constants(&m, &costs()), Err(Error::UnsupportedBounds(_))));
        m.bounds = (0.5, 2.0);
        assert!(bound_constants(&m, &costs()).is_ok());
    }

    #[test]
    fn zero_distortion_gives_zero_bound() {
        let bc = bound_constants(&model_1a(), &costs()).unwrap();
        assert_eq!(theorem_bounds(&bc, &[0.0; 37], &[0.0; 37]), (0.0, 0.0));
    }
}
