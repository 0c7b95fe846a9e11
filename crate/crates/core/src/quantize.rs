//! Vector quantization of the state chain.
//!
//! [`Codebook`] is a plain Euclidean codebook trained by competitive learning
//! (CLVQ) and refined by Lloyd iterations; it is reused for the belief chain.
//! [`QuantGrid`] stratifies a codebook by mode so that projection never
//! changes the discrete component, and [`estimate_transitions`] counts
//! projected chain transitions between consecutive grids.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::step_sample;
use crate::model::{DiscreteState, PdmpModel};
use crate::rng::{stage, stream_rng};

// ---------------------------------------------------------------------------
// Generic codebook
// ---------------------------------------------------------------------------

/// CLVQ gain `a_t = a0 · A / (A + t)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepSchedule {
    pub a0: f64,
    pub scale: f64,
}

impl Default for StepSchedule {
    fn default() -> Self {
        Self { a0: 0.5, scale: 1e4 }
    }
}

impl StepSchedule {
    #[inline]
    pub fn gain(&self, t: usize) -> f64 {
        self.a0 * self.scale / (self.scale + t as f64)
    }
}

/// Row-major set of `len` points in dimension `dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub dim: usize,
    pub points: Vec<f64>,
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl Codebook {
    pub fn new(dim: usize, points: Vec<f64>) -> Self {
        assert!(dim > 0 && points.len().is_multiple_of(dim), "codebook shape");
        Self { dim, points }
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn point_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.points[i * self.dim..(i + 1) * self.dim]
    }

    /// Nearest point and squared distance; ties go to the lowest index.
    pub fn nearest(&self, z: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (i, p) in self.points.chunks_exact(self.dim).enumerate() {
            let d = sq_dist(p, z);
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }

    /// Initial codebook from the first `size` distinct samples.
    pub fn from_distinct(samples: &[f64], dim: usize, size: usize) -> Self {
        let mut points: Vec<f64> = Vec::with_capacity(size * dim);
        for z in samples.chunks_exact(dim) {
            if points.len() / dim == size {
                break;
            }
            if !points.chunks_exact(dim).any(|p| p == z) {
                points.extend_from_slice(z);
            }
        }
        Self::new(dim, points)
    }

    /// One competitive-learning update: the winner moves toward `z`.
    #[inline]
    pub fn clvq_step(&mut self, z: &[f64], gain: f64) {
        let (i, _) = self.nearest(z);
        for (w, x) in self.point_mut(i).iter_mut().zip(z) {
            *w += gain * (x - *w);
        }
    }

    /// Cell means, counts and the largest distance from a point to its cell mean.
    pub fn cell_means(&self, samples: &[f64]) -> (Vec<f64>, Vec<usize>, f64) {
        let dim = self.dim;
        let (sums, counts) = samples
            .par_chunks(dim * 4096)
            .map(|block| {
                let mut sums = vec![0.0; self.points.len()];
                let mut counts = vec![0usize; self.len()];
                for z in block.chunks_exact(dim) {
                    let (i, _) = self.nearest(z);
                    counts[i] += 1;
                    for (s, x) in sums[i * dim..(i + 1) * dim].iter_mut().zip(z) {
                        *s += x;
                    }
                }
                (sums, counts)
            })
            .collect::<Vec<_>>()
            .into_iter()
            .fold((vec![0.0; self.points.len()], vec![0usize; self.len()]), |(mut s, mut c), (bs, bc)| {
                s.iter_mut().zip(bs).for_each(|(a, b)| *a += b);
                c.iter_mut().zip(bc).for_each(|(a, b)| *a += b);
                (s, c)
            });
        let mut residual = 0.0_f64;
        let mut means = self.points.clone();
        for i in 0..self.len() {
            if counts[i] == 0 {
                continue;
            }
            let mean: Vec<f64> = sums[i * dim..(i + 1) * dim].iter().map(|s| s / counts[i] as f64).collect();
            residual = residual.max(sq_dist(&mean, self.point(i)).sqrt());
            means[i * dim..(i + 1) * dim].copy_from_slice(&mean);
        }
        (means, counts, residual)
    }

    /// Lloyd iterations on a fixed sample until the fixed-point residual
    /// drops below `tol`. Returns the final residual.
    pub fn lloyd(&mut self, samples: &[f64], max_iter: usize, tol: f64) -> f64 {
        let mut residual = f64::INFINITY;
        for _ in 0..max_iter {
            let (means, _, r) = self.cell_means(samples);
            self.points = means;
            residual = r;
            if r <= tol {
                break;
            }
        }
        residual
    }

    /// Mean squared distance from `samples` to their nearest point.
    pub fn distortion(&self, samples: &[f64]) -> f64 {
        let n = samples.len() / self.dim;
        if n == 0 {
            return 0.0;
        }
        let total: f64 = samples.par_chunks(self.dim * 4096).map(|b| b.chunks_exact(self.dim).map(|z| self.nearest(z).1).sum::<f64>()).collect::<Vec<_>>().iter().sum();
        total / n as f64
    }

    /// Removes exact duplicates, keeping first occurrences.
    pub fn dedup(&mut self) -> Vec<usize> {
        let mut kept = Vec::new();
        let mut points: Vec<f64> = Vec::with_capacity(self.points.len());
        for (i, p) in self.points.chunks_exact(self.dim).enumerate() {
            if !points.chunks_exact(self.dim).any(|q| q == p) {
                points.extend_from_slice(p);
                kept.push(i);
            }
        }
        self.points = points;
        kept
    }
}

/// Trains a codebook of at most `size` points on a stream and a refinement pool.
///
/// CLVQ runs over `stream` in order; the result is then polished by Lloyd
/// iterations on `pool`. Both slices are row-major in dimension `dim`.
pub fn train_codebook(stream: &[f64], pool: &[f64], dim: usize, size: usize, schedule: StepSchedule, lloyd_iter: usize, tol: f64) -> Codebook {
    let mut book = Codebook::from_distinct(pool, dim, size);
    for (t, z) in stream.chunks_exact(dim).enumerate() {
        book.clvq_step(z, schedule.gain(t));
    }
    if lloyd_iter > 0 {
        book.lloyd(pool, lloyd_iter, tol);
    }
    book.dedup();
    book
}

// ---------------------------------------------------------------------------
// Mode-stratified state grids
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub mode: usize,
    pub x: f64,
    /// Time since jump; part of the metric only for flows that depend on it.
    pub u: f64,
}

/// Grid `Ω_n`: points sorted by mode, each with a representative full state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantGrid {
    pub n: usize,
    pub uses_aux: bool,
    pub points: Vec<GridPoint>,
    /// A full state near each point, used to flow the point forward.
    pub representatives: Vec<DiscreteState>,
    /// `mode_ranges[m]` indexes the mode-`m` points.
    pub mode_ranges: Vec<Range<usize>>,
    /// Largest Lloyd fixed-point residual on the refinement pool.
    pub lloyd_residual: f64,
}

impl QuantGrid {
    pub fn new(n: usize, uses_aux: bool, num_modes: usize, mut entries: Vec<(GridPoint, DiscreteState)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Shape(format!("grid {n} has no points")));
        }
        entries.sort_by_key(|(p, _)| p.mode);
        let mut mode_ranges = vec![0..0; num_modes];
        for m in 0..num_modes {
            let start = entries.partition_point(|(p, _)| p.mode < m);
            let end = entries.partition_point(|(p, _)| p.mode <= m);
            mode_ranges[m] = start..end;
        }
        if entries.last().is_some_and(|(p, _)| p.mode >= num_modes) {
            return Err(Error::Shape("grid point mode out of range".into()));
        }
        let (points, representatives) = entries.into_iter().unzip();
        Ok(Self { n, uses_aux, points, representatives, mode_ranges, lloyd_residual: 0.0 })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn mode_count(&self, mode: usize) -> usize {
        self.mode_ranges.get(mode).map_or(0, |r| r.len())
    }

    #[inline]
    fn dist2(&self, p: &GridPoint, x: f64, u: f64) -> f64 {
        let dx = p.x - x;
        if self.uses_aux {
            let du = p.u - u;
            dx * dx + du * du
        } else {
            dx * dx
        }
    }

    /// Nearest same-mode point; ties go to the lowest index.
    pub fn project(&self, state: &DiscreteState) -> Result<usize> {
        self.project_coords(state.mode, state.flow.x, state.flow.u)
    }

    pub fn project_coords(&self, mode: usize, x: f64, u: f64) -> Result<usize> {
        let range = self.mode_ranges.get(mode).cloned().unwrap_or(0..0);
        if range.is_empty() {
            return Err(Error::ModeMissing { step: self.n, mode });
        }
        let mut best = (range.start, f64::INFINITY);
        for i in range {
            let d = self.dist2(&self.points[i], x, u);
            if d < best.1 {
                best = (i, d);
            }
        }
        Ok(best.0)
    }

    /// Squared projection error of a state.
    pub fn projection_error(&self, state: &DiscreteState) -> Result<f64> {
        let i = self.project(state)?;
        Ok(self.dist2(&self.points[i], state.flow.x, state.flow.u))
    }
}

/// Row-stochastic matrix stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl TransitionMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// Normalizes integer counts row by row; returns the indices of empty rows.
    pub fn from_counts(rows: usize, cols: usize, counts: &[u64]) -> (Self, Vec<usize>) {
        let mut m = Self::zeros(rows, cols);
        let mut empty = Vec::new();
        for i in 0..rows {
            let row = &counts[i * cols..(i + 1) * cols];
            let total: u64 = row.iter().sum();
            if total == 0 {
                empty.push(i);
                continue;
            }
            for (p, c) in m.row_mut(i).iter_mut().zip(row) {
                *p = *c as f64 / total as f64;
            }
        }
        (m, empty)
    }

    pub fn max_row_error(&self) -> f64 {
        (0..self.rows).map(|i| (self.row(i).iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max)
    }
}

/// Sizes and budgets for training the state grids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantConfig {
    /// Total points per grid `ℓ_n` (n ≥ 1; the start grid is a single point).
    pub size: usize,
    pub clvq_samples: usize,
    pub lloyd_samples: usize,
    pub lloyd_iterations: usize,
    pub lloyd_tol: f64,
    pub transition_samples: usize,
    pub schedule: StepSchedule,
    pub seed: u64,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            size: 21,
            clvq_samples: 1_000_000,
            lloyd_samples: 100_000,
            lloyd_iterations: 500,
            lloyd_tol: 1e-5,
            transition_samples: 1_000_000,
            schedule: StepSchedule::default(),
            seed: 1,
        }
    }
}

/// Grids `Ω_0..Ω_N` and transitions `p̄_0..p̄_{N-1}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateQuantization {
    pub grids: Vec<QuantGrid>,
    pub transitions: Vec<TransitionMatrix>,
}

/// Draws `X_n` conditioned on `m_{t_n} = mode`.
pub fn sample_state_given_mode<R: Rng + ?Sized>(model: &PdmpModel, n: usize, mode: usize, rng: &mut R) -> DiscreteState {
    let t = n as f64 * model.delta;
    let start = model.start_flow();
    if mode == 0 {
        return DiscreteState { mode: 0, flow: model.flow(0, &start, t) };
    }
    let total = model.intensity.cumulative(t);
    let u: f64 = rng.random();
    let mass = -(-u * -(-total).exp_m1()).ln_1p();
    let jump = model.intensity.inverse_cumulative(0.0, mass).clamp(0.0, t);
    let at_jump = model.jump(&model.flow(0, &start, jump));
    DiscreteState { mode, flow: model.flow(mode, &at_jump, t - jump) }
}

/// Point budget per mode: proportional to occupation, at least one point for
/// every reachable mode, largest remainder for the rest.
pub fn mode_budget(occupation: &[f64], total: usize) -> Vec<usize> {
    let reachable: Vec<usize> = (0..occupation.len()).filter(|&m| occupation[m] > 0.0).collect();
    let mut budget = vec![0usize; occupation.len()];
    if reachable.is_empty() {
        return budget;
    }
    let total = total.max(reachable.len());
    for &m in &reachable {
        budget[m] = 1;
    }
    distribute(&mut budget, occupation, &reachable, total - reachable.len());
    budget
}

/// Adds `extra` points to `eligible` modes by largest remainder on `weights`.
fn distribute(budget: &mut [usize], weights: &[f64], eligible: &[usize], extra: usize) {
    if extra == 0 || eligible.is_empty() {
        return;
    }
    let mass: f64 = eligible.iter().map(|&m| weights[m]).sum();
    let shares: Vec<f64> = eligible.iter().map(|&m| extra as f64 * weights[m] / mass).collect();
    let mut given = 0;
    for (k, &m) in eligible.iter().enumerate() {
        let whole = shares[k].floor() as usize;
        budget[m] += whole;
        given += whole;
    }
    let mut order: Vec<usize> = (0..eligible.len()).collect();
    order.sort_by(|&a, &b| (shares[b] - shares[b].floor()).total_cmp(&(shares[a] - shares[a].floor())).then(a.cmp(&b)));
    for k in order.into_iter().take(extra - given) {
        budget[eligible[k]] += 1;
    }
}

fn coords(state: &DiscreteState, uses_aux: bool, out: &mut Vec<f64>) {
    out.push(state.flow.x);
    if uses_aux {
        out.push(state.flow.u);
    }
}

fn distinct_count(samples: &[f64], dim: usize, cap: usize) -> usize {
    let mut seen: Vec<&[f64]> = Vec::new();
    for z in samples.chunks_exact(dim) {
        if !seen.contains(&z) {
            seen.push(z);
            if seen.len() >= cap {
                break;
            }
        }
    }
    seen.len()
}

/// Trains grid `Ω_n`.
pub fn train_grid(model: &PdmpModel, n: usize, config: &QuantConfig) -> Result<QuantGrid> {
    let mut rng = stream_rng(config.seed, stage::STATE_GRID, n as u64);
    let uses_aux = model.family.uses_aux();
    let dim = if uses_aux { 2 } else { 1 };
    let num_modes = model.num_post_modes() + 1;
    let occupation = model.mode_occupation(n);
    let size = if n == 0 { 1 } else { config.size };
    let mut budget = mode_budget(&occupation, size);

    let mut pools: Vec<Vec<DiscreteState>> = vec![Vec::new(); num_modes];
    let mut pool_coords: Vec<Vec<f64>> = vec![Vec::new(); num_modes];
    for m in 0..num_modes {
        if budget[m] == 0 {
            continue;
        }
        let count = ((config.lloyd_samples as f64 * budget[m] as f64 / size as f64).round() as usize).max(2000);
        for _ in 0..count {
            let s = sample_state_given_mode(model, n, m, &mut rng);
            coords(&s, uses_aux, &mut pool_coords[m]);
            pools[m].push(s);
        }
    }

    // Cap strata that cannot support their budget and hand the excess on.
    loop {
        let mut excess = 0;
        let mut open = Vec::new();
        for m in 0..num_modes {
            if budget[m] == 0 {
                continue;
            }
            let distinct = distinct_count(&pool_coords[m], dim, budget[m] + 1);
            if distinct < budget[m] {
                log::debug!("step {n}: mode {m} has {distinct} distinct values for {} points", budget[m]);
                excess += budget[m] - distinct;
                budget[m] = distinct;
            } else if distinct > budget[m] {
                open.push(m);
            }
        }
        if excess == 0 || open.is_empty() {
            break;
        }
        distribute(&mut budget, &occupation, &open, excess);
    }

    let mut entries = Vec::new();
    let mut worst = 0.0_f64;
    for m in 0..num_modes {
        if budget[m] == 0 {
            continue;
        }
        let book = if budget[m] == 1 && distinct_count(&pool_coords[m], dim, 2) == 1 {
            Codebook::new(dim, pool_coords[m][..dim].to_vec())
        } else {
            let samples = (config.clvq_samples as f64 * budget[m] as f64 / size as f64).round() as usize;
            let mut stream = Vec::with_capacity(samples * dim);
            for _ in 0..samples {
                coords(&sample_state_given_mode(model, n, m, &mut rng), uses_aux, &mut stream);
            }
            let mut shuffled = pool_coords[m].chunks_exact(dim).map(|c| c.to_vec()).collect::<Vec<_>>();
            shuffled.shuffle(&mut rng);
            let init: Vec<f64> = shuffled.concat();
            let mut book = Codebook::from_distinct(&init, dim, budget[m]);
            for (t, z) in stream.chunks_exact(dim).enumerate() {
                book.clvq_step(z, config.schedule.gain(t));
            }
            if config.lloyd_iterations > 0 {
                let r = book.lloyd(&pool_coords[m], config.lloyd_iterations, config.lloyd_tol);
                log::trace!("step {n}: mode {m} Lloyd residual {r:.2e}");
                worst = worst.max(r);
            }
            book.dedup();
            book
        };
        for i in 0..book.len() {
            let p = book.point(i);
            let point = GridPoint { mode: m, x: p[0], u: if uses_aux { p[1] } else { pools[m][0].flow.u } };
            let (rep_idx, _) = pool_coords[m]
                .chunks_exact(dim)
                .enumerate()
                .map(|(k, z)| (k, sq_dist(z, p)))
                .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best });
            entries.push((point, pools[m][rep_idx]));
        }
    }
    let mut grid = QuantGrid::new(n, uses_aux, num_modes, entries)?;
    grid.lloyd_residual = worst;
    Ok(grid)
}

/// Trains `Ω_0..Ω_N` in parallel over time steps.
pub fn clvq_train(model: &PdmpModel, config: &QuantConfig) -> Result<Vec<QuantGrid>> {
    (0..=model.horizon).into_par_iter().map(|n| train_grid(model, n, config)).collect()
}

/// Counts projected transitions over `samples` fresh chains.
///
/// Rows never visited fall back to the projection of the deterministic flow
/// of the point's representative state.
pub fn estimate_transitions(model: &PdmpModel, grids: &[QuantGrid], samples: usize, seed: u64) -> Result<Vec<TransitionMatrix>> {
    let steps = grids.len().saturating_sub(1);
    const CHUNK: usize = 8192;
    let chunks = samples.div_ceil(CHUNK);
    let sizes: Vec<usize> = grids.iter().map(|g| g.len()).collect();
    let partials: Vec<(Vec<Vec<u64>>, u64)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream_rng(seed, stage::STATE_TRANSITIONS, c as u64);
            let mut counts: Vec<Vec<u64>> = (0..steps).map(|n| vec![0u64; sizes[n] * sizes[n + 1]]).collect();
            let mut skipped = 0u64;
            let here = CHUNK.min(samples - c * CHUNK);
            for _ in 0..here {
                let mut state = model.start_state();
                let Ok(mut i) = grids[0].project(&state) else {
                    skipped += 1;
                    continue;
                };
                for n in 0..steps {
                    state = step_sample(model, n, &state, &mut rng);
                    match grids[n + 1].project(&state) {
                        Ok(j) => {
                            counts[n][i * sizes[n + 1] + j] += 1;
                            i = j;
                        }
                        Err(_) => {
                            skipped += 1;
                            break;
                        }
                    }
                }
            }
            (counts, skipped)
        })
        .collect();
    let mut totals: Vec<Vec<u64>> = (0..steps).map(|n| vec![0u64; sizes[n] * sizes[n + 1]]).collect();
    let mut skipped = 0;
    for (counts, s) in partials {
        skipped += s;
        for (t, c) in totals.iter_mut().zip(counts) {
            t.iter_mut().zip(c).for_each(|(a, b)| *a += b);
        }
    }
    if skipped > 0 {
        log::warn!("{skipped} chains left the grid support and were dropped");
    }
    let mut out = Vec::with_capacity(steps);
    for n in 0..steps {
        let (mut matrix, empty) = TransitionMatrix::from_counts(sizes[n], sizes[n + 1], &totals[n]);
        for i in empty {
            let rep = grids[n].representatives[i];
            let next = DiscreteState { mode: rep.mode, flow: model.flow(rep.mode, &rep.flow, model.delta) };
            let j = grids[n + 1].project(&next)?;
            log::debug!("step {n}: row {i} unvisited, using deterministic flow to {j}");
            matrix.row_mut(i)[j] = 1.0;
        }
        out.push(matrix);
    }
    Ok(out)
}

/// Trains every grid and its transitions.
pub fn quantize_state_chain(model: &PdmpModel, config: &QuantConfig) -> Result<StateQuantization> {
    let grids = clvq_train(model, config)?;
    let transitions = estimate_transitions(model, &grids, config.transition_samples, config.seed)?;
    Ok(StateQuantization { grids, transitions })
}

/// Monte Carlo distortions of `Ω_n`: `(E|X_n - X̄_n|², E|X_n - X̄_n|)`.
pub fn distortion<R: Rng + ?Sized>(model: &PdmpModel, grid: &QuantGrid, samples: usize, rng: &mut R) -> Result<(f64, f64)> {
    let (mut mse, mut mae) = (0.0, 0.0);
    for _ in 0..samples {
        let tr = crate::model::simulate_trajectory(model, rng);
        let state = tr.state_at(model, grid.n as f64 * model.delta);
        let e = grid.projection_error(&state)?;
        mse += e;
        mae += e.sqrt();
    }
    Ok((mse / samples as f64, mae / samples as f64))
}
