//! Filtering on the quantized state chain, and an exact reference posterior.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{PdmpModel, Trajectory};
use crate::quantize::{QuantGrid, StateQuantization, TransitionMatrix};

/// Below this the normalizing constant is treated as zero.
pub const DEGENERATE_DENOMINATOR: f64 = 1e-300;

/// Weights over the points of `Ω_n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Belief {
    pub n: usize,
    pub weights: Vec<f64>,
}

impl Belief {
    pub fn point_mass(n: usize, len: usize, at: usize) -> Self {
        let mut weights = vec![0.0; len];
        weights[at] = 1.0;
        Self { n, weights }
    }

    /// Start belief: all mass on the projection of the start state.
    pub fn start(model: &PdmpModel, grid: &QuantGrid) -> Result<Self> {
        let i = grid.project(&model.start_state())?;
        Ok(Self::point_mass(grid.n, grid.len(), i))
    }

    /// Total weight per mode.
    pub fn mode_marginal(&self, grid: &QuantGrid) -> Vec<f64> {
        grid.mode_ranges.iter().map(|r| self.weights[r.clone()].iter().sum()).collect()
    }

    pub fn simplex_error(&self) -> f64 {
        (self.weights.iter().sum::<f64>() - 1.0).abs()
    }
}

/// `Σ_i |a_i - b_i|`.
///
/// # Panics
/// If the beliefs live on different grids.
pub fn belief_l1(a: &Belief, b: &Belief) -> f64 {
    assert!(a.n == b.n && a.weights.len() == b.weights.len(), "beliefs on different grids");
    a.weights.iter().zip(&b.weights).map(|(x, y)| (x - y).abs()).sum()
}

/// Prediction `Σ_i p̄_{ij} θ_i`.
pub fn predict(transition: &TransitionMatrix, belief: &Belief) -> Vec<f64> {
    let mut out = vec![0.0; transition.cols];
    for (i, &w) in belief.weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        for (o, p) in out.iter_mut().zip(transition.row(i)) {
            *o += w * p;
        }
    }
    out
}

/// `Ψ̄_n(θ, y')`. The flag is set when no reachable point of `Ω_{n+1}` is
/// compatible with `y'`; the prediction is then returned unchanged.
pub fn psi_bar(model: &PdmpModel, next: &QuantGrid, transition: &TransitionMatrix, belief: &Belief, y: f64) -> (Belief, bool) {
    let prior = predict(transition, belief);
    let lik: Vec<f64> = next.points.iter().map(|p| model.likelihood(y, p.x)).collect();
    let mut post: Vec<f64> = if lik.iter().any(|l| l.is_infinite()) {
        // Noise-free limit: keep only the points matched exactly.
        prior.iter().zip(&lik).map(|(p, l)| if l.is_infinite() { *p } else { 0.0 }).collect()
    } else {
        prior.iter().zip(&lik).map(|(p, l)| p * l).collect()
    };
    let total: f64 = post.iter().sum();
    if !(total >= DEGENERATE_DENOMINATOR) {
        return (Belief { n: next.n, weights: prior }, true);
    }
    post.iter_mut().for_each(|w| *w /= total);
    (Belief { n: next.n, weights: post }, false)
}

/// Runs `θ̄_k = Ψ̄_{k-1}(θ̄_{k-1}, y_k)` along an observation stream. Returns
/// every belief and the number of degenerate updates.
pub fn filter_stream(model: &PdmpModel, sq: &StateQuantization, observations: &[f64]) -> Result<(Vec<Belief>, usize)> {
    let mut beliefs = vec![Belief::start(model, &sq.grids[0])?];
    let mut degenerate = 0;
    for (k, &y) in observations.iter().enumerate().skip(1) {
        if k >= sq.grids.len() {
            return Err(Error::Shape(format!("{} observations for {} grids", observations.len(), sq.grids.len())));
        }
        let (b, flag) = psi_bar(model, &sq.grids[k], &sq.transitions[k - 1], &beliefs[k - 1], y);
        degenerate += flag as usize;
        beliefs.push(b);
    }
    Ok((beliefs, degenerate))
}

fn sample_index<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random::<f64>() * weights.iter().sum::<f64>();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// One step of the surrogate chain from `(θ̄_n, ·)`: returns `(θ̄_{n+1}, ȳ_{n+1}, degenerate)`.
pub fn bar_step<R: Rng + ?Sized>(model: &PdmpModel, sq: &StateQuantization, belief: &Belief, rng: &mut R) -> (Belief, f64, bool) {
    let n = belief.n;
    let i = sample_index(&belief.weights, rng);
    let j = sample_index(sq.transitions[n].row(i), rng);
    let next = &sq.grids[n + 1];
    let y = model.link_value(next.points[j].x) + model.noise.sample(rng);
    let (b, flag) = psi_bar(model, next, &sq.transitions[n], belief, y);
    (b, y, flag)
}

/// Samples `(Θ̄_0, Ȳ_0), .., (Θ̄_N, Ȳ_N)` with `Θ̄_0` the start point mass.
pub fn simulate_bar_chain<R: Rng + ?Sized>(model: &PdmpModel, sq: &StateQuantization, rng: &mut R) -> Result<Vec<(Belief, f64)>> {
    let start = Belief::start(model, &sq.grids[0])?;
    let i0 = sample_index(&start.weights, rng);
    let y0 = model.link_value(sq.grids[0].points[i0].x) + model.noise.sample(rng);
    let mut chain = vec![(start, y0)];
    for _ in 0..sq.transitions.len() {
        let (b, y, _) = bar_step(model, sq, &chain.last().unwrap().0, rng);
        chain.push((b, y));
    }
    Ok(chain)
}

// ---------------------------------------------------------------------------
// Reference posterior
// ---------------------------------------------------------------------------

/// Posterior over `{no jump before Nδ} ∪ {(mode i, T ∈ bucket q)}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleBelief {
    /// Observations absorbed so far (`y_0..y_n`).
    pub n: usize,
    pub bucket_width: f64,
    /// `mass[q][i-1]`: mode `i`, jump time in bucket `q`.
    pub mass: Vec<Vec<f64>>,
    /// No jump during `[0, Nδ]`.
    pub no_jump: f64,
    pub degenerate: bool,
}

impl OracleBelief {
    pub fn total(&self) -> f64 {
        self.no_jump + self.mass.iter().flatten().sum::<f64>()
    }

    /// Jump time used for bucket `q` (midpoint rule).
    pub fn bucket_time(&self, q: usize) -> f64 {
        (q as f64 + 0.5) * self.bucket_width
    }

    /// Posterior of `m_{t_n}` at `t_n = nδ`.
    pub fn mode_posterior(&self, delta: f64) -> Vec<f64> {
        let d = self.mass.first().map_or(0, |r| r.len());
        let t = self.n as f64 * delta;
        let mut out = vec![0.0; d + 1];
        out[0] = self.no_jump;
        for (q, row) in self.mass.iter().enumerate() {
            if self.bucket_time(q) <= t {
                for (o, w) in out[1..].iter_mut().zip(row) {
                    *o += w;
                }
            } else {
                out[0] += row.iter().sum::<f64>();
            }
        }
        out
    }

    /// Induced law of `(m, x)` at `t_n` as `(mode, position, weight)` atoms.
    pub fn position_law(&self, model: &PdmpModel) -> Vec<(usize, f64, f64)> {
        let t = self.n as f64 * model.delta;
        let start = model.start_flow();
        let mut pre = self.no_jump;
        let mut out = Vec::new();
        for (q, row) in self.mass.iter().enumerate() {
            let jt = self.bucket_time(q);
            if jt > t {
                pre += row.iter().sum::<f64>();
                continue;
            }
            for (i, w) in row.iter().enumerate() {
                let tr = Trajectory { start, jump_time: jt, post_mode: i + 1 };
                out.push((i + 1, tr.state_at(model, t).x(), *w));
            }
        }
        out.insert(0, (0, model.flow(0, &start, t).x, pre));
        out
    }
}

/// Bucket count used by [`oracle_filter`]: `q` rounded up to a multiple of
/// `N` so that no bucket straddles an observation epoch.
pub fn aligned_buckets(q: usize, horizon: usize) -> usize {
    let h = horizon.max(1);
    q.div_ceil(h) * h
}

/// Largest bucket refinement tried when every hypothesis is incompatible.
pub const ORACLE_MAX_REFINE: usize = 64;

/// Exact one-jump posterior after `y_0..y_n`, by midpoint quadrature over
/// the jump time with `q` buckets on `[0, Nδ]` (rounded, see [`aligned_buckets`]).
///
/// Under tightly truncated noise a coarse bucket may miss the narrow set of
/// jump times compatible with the data; the bucket count is then doubled up
/// to [`ORACLE_MAX_REFINE`] times before the result is flagged degenerate.
pub fn oracle_filter(model: &PdmpModel, observations: &[f64], q: usize) -> Result<OracleBelief> {
    if observations.is_empty() {
        return Err(Error::Shape("oracle filter needs at least y_0".into()));
    }
    let base = aligned_buckets(q, model.horizon);
    let mut factor = 1;
    loop {
        let post = oracle_pass(model, observations, base * factor);
        if !post.degenerate || factor >= ORACLE_MAX_REFINE {
            return Ok(post);
        }
        factor *= 2;
    }
}

fn oracle_pass(model: &PdmpModel, observations: &[f64], q: usize) -> OracleBelief {
    let horizon = model.horizon_time();
    let width = horizon / q as f64;
    let d = model.num_post_modes();
    let n = observations.len() - 1;
    let start = model.start_flow();

    let log_lik = |path: &dyn Fn(usize) -> f64| -> f64 {
        let mut acc = 0.0;
        for (k, y) in observations.iter().enumerate() {
            let f = model.likelihood(*y, path(k));
            if f == 0.0 {
                return f64::NEG_INFINITY;
            }
            acc += f.ln();
        }
        acc
    };
    let pre_path = |k: usize| model.flow(0, &start, k as f64 * model.delta).x;
    let pre_ll = log_lik(&pre_path);

    let mut logw = vec![vec![f64::NEG_INFINITY; d]; q];
    for (b, row) in logw.iter_mut().enumerate() {
        let lo = b as f64 * width;
        let hi = lo + width;
        let prior = model.survival(0.0, lo) - model.survival(0.0, hi);
        if prior <= 0.0 {
            continue;
        }
        let jt = lo + 0.5 * width;
        for (i, w) in row.iter_mut().enumerate() {
            let ll = if jt > n as f64 * model.delta {
                pre_ll
            } else {
                let tr = Trajectory { start, jump_time: jt, post_mode: i + 1 };
                log_lik(&|k| tr.state_at(model, k as f64 * model.delta).x())
            };
            *w = (prior * model.post_jump[i]).ln() + ll;
        }
    }
    let no_jump_prior = model.survival(0.0, horizon);
    let log_no_jump = if no_jump_prior > 0.0 { no_jump_prior.ln() + pre_ll } else { f64::NEG_INFINITY };

    let max = logw.iter().flatten().copied().fold(log_no_jump, f64::max);
    let degenerate = max == f64::NEG_INFINITY;
    let mut mass: Vec<Vec<f64>>;
    let mut no_jump;
    if degenerate {
        // Fall back to the prior.
        mass = (0..q)
            .map(|b| {
                let lo = b as f64 * width;
                let p = model.survival(0.0, lo) - model.survival(0.0, lo + width);
                model.post_jump.iter().map(|pi| pi * p).collect()
            })
            .collect();
        no_jump = no_jump_prior;
    } else {
        mass = logw.iter().map(|row| row.iter().map(|l| (l - max).exp()).collect()).collect();
        no_jump = (log_no_jump - max).exp();
    }
    let total = no_jump + mass.iter().flatten().sum::<f64>();
    mass.iter_mut().flatten().for_each(|w| *w /= total);
    no_jump /= total;
    OracleBelief { n, bucket_width: width, mass, no_jump, degenerate }
}
