//! One-jump piecewise deterministic Markov processes observed through noise.
//!
//! The process starts in mode 0 and follows the mode-0 flow until a single
//! random jump time `T`, whose hazard depends only on the running time. At
//! `T` a post-jump mode is drawn from `π`, the position is kept, the
//! time-since-jump resets to zero and the process then follows the flow of
//! the new mode forever.
//!
//! Four flow families are provided: exponential growth (`1a`), exponential
//! or linear growth (`1b`), a sinusoid whose frequency changes (`2a`) and a
//! sinusoid that picks up a linear drift (`2b`). Sinusoidal flows carry an
//! explicit phase, so `x = sin(phase)` (plus `v·u` for `2b`) and the flows
//! are exact semigroups on every branch of `arcsin`.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// Flow families and link functions
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FlowFamily {
    /// `Φ_0(x,t) = x`, `Φ_i(x,t) = e^{v_i t} x`.
    #[serde(rename = "1a")]
    Exponential,
    /// `Φ_0(x,t) = x`, `Φ_1(x,t) = e^{v_1 t} x`, `Φ_2(x,t) = x + v_2 t`.
    #[serde(rename = "1b")]
    ExponentialLinear,
    /// `x_t = sin(φ + v_m π t)`: the jump changes the frequency.
    #[serde(rename = "2a")]
    SineFrequency,
    /// `x_t = sin(φ + v_0 π t) + v_i u_t`: the jump adds a linear drift.
    #[serde(rename = "2b")]
    SineSlope,
}

impl FlowFamily {
    pub fn id(self) -> &'static str {
        match self {
            Self::Exponential => "1a",
            Self::ExponentialLinear => "1b",
            Self::SineFrequency => "2a",
            Self::SineSlope => "2b",
        }
    }

    pub fn from_id(id: &str) -> Result<Self> {
        match id {
            "1a" => Ok(Self::Exponential),
            "1b" => Ok(Self::ExponentialLinear),
            "2a" => Ok(Self::SineFrequency),
            "2b" => Ok(Self::SineSlope),
            other => Err(Error::Config(format!("unknown example id {other:?} (expected 1a|1b|2a|2b)"))),
        }
    }

    pub fn is_sinusoidal(self) -> bool {
        matches!(self, Self::SineFrequency | Self::SineSlope)
    }

    /// Whether the time-since-jump coordinate enters the position.
    pub fn uses_aux(self) -> bool {
        matches!(self, Self::SineSlope)
    }

    /// Start position used when no `x0` is configured.
    pub fn default_x0(self) -> f64 {
        if self.is_sinusoidal() {
            0.0
        } else {
            1.0
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    #[default]
    Identity,
    Inverse,
}

impl Link {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Self::Identity => x,
            Self::Inverse => 1.0 / x,
        }
    }
}

// ---------------------------------------------------------------------------
// Jump intensity
// ---------------------------------------------------------------------------

/// Hazard rate of the jump time as a function of the running time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Intensity {
    Zero,
    Constant { rate: f64 },
    /// `λ(t) = slope · t`; the examples use `slope = 1`.
    Linear { slope: f64 },
    /// `λ(t) = Σ_k c_k t^k` with nonnegative coefficients.
    Polynomial { coeffs: Vec<f64> },
}

impl Default for Intensity {
    fn default() -> Self {
        Self::Linear { slope: 1.0 }
    }
}

const ROOT_TOL: f64 = 1e-10;

impl Intensity {
    pub fn rate(&self, t: f64) -> f64 {
        match self {
            Self::Zero => 0.0,
            Self::Constant { rate } => *rate,
            Self::Linear { slope } => slope * t,
            Self::Polynomial { coeffs } => coeffs.iter().rev().fold(0.0, |acc, c| acc * t + c),
        }
    }

    /// `Λ(t) = ∫_0^t λ(s) ds`.
    pub fn cumulative(&self, t: f64) -> f64 {
        match self {
            Self::Zero => 0.0,
            Self::Constant { rate } => rate * t,
            Self::Linear { slope } => 0.5 * slope * t * t,
            Self::Polynomial { coeffs } => coeffs
                .iter()
                .enumerate()
                .rev()
                .fold(0.0, |acc, (k, c)| acc * t + c / (k as f64 + 1.0))
                * t,
        }
    }

    /// `P(T > t0 + t | T > t0) = exp(-∫_{t0}^{t0+t} λ)`.
    pub fn survival(&self, t0: f64, t: f64) -> f64 {
        (-(self.cumulative(t0 + t) - self.cumulative(t0))).exp()
    }

    /// Smallest `s ≥ 0` with `Λ(t0 + s) − Λ(t0) = mass`, or `+∞` when the
    /// hazard never accumulates that much.
    pub fn inverse_cumulative(&self, t0: f64, mass: f64) -> f64 {
        if mass <= 0.0 {
            return 0.0;
        }
        match self {
            Self::Zero => f64::INFINITY,
            Self::Constant { rate } if *rate > 0.0 => mass / rate,
            Self::Constant { .. } => f64::INFINITY,
            Self::Linear { slope } if *slope > 0.0 => {
                // (t0+s)^2 - t0^2 = 2 mass / slope
                (t0 * t0 + 2.0 * mass / slope).sqrt() - t0
            }
            Self::Linear { .. } => f64::INFINITY,
            Self::Polynomial { .. } => self.bisect_cumulative(t0, mass),
        }
    }

    fn bisect_cumulative(&self, t0: f64, mass: f64) -> f64 {
        let base = self.cumulative(t0);
        let excess = |s: f64| self.cumulative(t0 + s) - base - mass;
        let mut hi = 1.0;
        while excess(hi) < 0.0 {
            hi *= 2.0;
            if hi > 1e12 {
                return f64::INFINITY;
            }
        }
        let mut lo = 0.0;
        while hi - lo > ROOT_TOL * hi.max(1.0) {
            let mid = 0.5 * (lo + hi);
            if excess(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// Draws a jump time for a process that has survived until `t0`,
    /// returned as an offset from `t0`.
    pub fn sample_residual<R: Rng + ?Sized>(&self, t0: f64, rng: &mut R) -> f64 {
        let e: f64 = rng.sample(Exp1);
        self.inverse_cumulative(t0, e)
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            Self::Zero => true,
            Self::Constant { rate } => *rate >= 0.0,
            Self::Linear { slope } => *slope >= 0.0,
            Self::Polynomial { coeffs } => coeffs.iter().all(|c| *c >= 0.0),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config("jump intensity must be nonnegative".into()))
        }
    }
}

// ---------------------------------------------------------------------------
// Observation noise
// ---------------------------------------------------------------------------

/// Centered Gaussian noise with variance `σ²` truncated to `[-s, s]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma2: f64,
    pub trunc: f64,
    /// `p = P(-s ≤ Z ≤ s)` for `Z ~ N(0, σ²)`.
    pub normalizer: f64,
}

impl NoiseSpec {
    /// Truncation defaults to `3σ`.
    pub fn new(sigma2: f64, trunc: Option<f64>) -> Result<Self> {
        if !(sigma2 >= 0.0) || !sigma2.is_finite() {
            return Err(Error::Config(format!("noise variance must be finite and ≥ 0, got {sigma2}")));
        }
        let sigma = sigma2.sqrt();
        let trunc = trunc.unwrap_or(3.0 * sigma);
        if !(trunc >= 0.0) {
            return Err(Error::Config(format!("truncation must be ≥ 0, got {trunc}")));
        }
        if sigma2 > 0.0 && trunc == 0.0 {
            return Err(Error::Config("truncation must be positive when σ² > 0".into()));
        }
        let normalizer = if sigma2 > 0.0 { libm::erf(trunc / (sigma * std::f64::consts::SQRT_2)) } else { 1.0 };
        Ok(Self { sigma2, trunc, normalizer })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma2.sqrt()
    }

    /// Peak density `(p σ √(2π))⁻¹`.
    pub fn peak(&self) -> f64 {
        1.0 / (self.normalizer * self.sigma() * (2.0 * PI).sqrt())
    }

    /// Truncated-Gaussian density; zero outside `[-s, s]`. With `σ² = 0` the
    /// noise is a point mass and the density is `+∞` at 0.
    #[inline]
    pub fn density(&self, e: f64) -> f64 {
        if e.abs() > self.trunc {
            return 0.0;
        }
        if self.sigma2 == 0.0 {
            return if e == 0.0 { f64::INFINITY } else { 0.0 };
        }
        self.peak() * (-e * e / (2.0 * self.sigma2)).exp()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.sigma2 == 0.0 {
            return 0.0;
        }
        let sigma = self.sigma();
        if self.normalizer > 0.3 {
            loop {
                let z: f64 = rng.sample(StandardNormal);
                let e = sigma * z;
                if e.abs() <= self.trunc {
                    return e;
                }
            }
        }
        // Narrow truncation: uniform proposal on [-s, s].
        loop {
            let e = rng.random_range(-self.trunc..=self.trunc);
            let accept = (-e * e / (2.0 * self.sigma2)).exp();
            if rng.random::<f64>() <= accept {
                return e;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// States
// ---------------------------------------------------------------------------

/// Euclidean part of the state.
///
/// `phase` is only meaningful for the sinusoidal families; `u` is the time
/// since the last jump (time since start while in mode 0).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowState {
    pub x: f64,
    pub phase: f64,
    pub u: f64,
}

/// Observed-in-discrete-time chain state `(m, x)` plus flow auxiliaries.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteState {
    pub mode: usize,
    pub flow: FlowState,
}

impl DiscreteState {
    #[inline]
    pub fn x(&self) -> f64 {
        self.flow.x
    }
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PdmpModel {
    pub family: FlowFamily,
    /// `v_1 .. v_d`.
    pub speeds: Vec<f64>,
    /// `v_0`, used by the sinusoidal families.
    pub base_speed: f64,
    pub intensity: Intensity,
    /// `π_1 .. π_d`.
    pub post_jump: Vec<f64>,
    pub link: Link,
    pub noise: NoiseSpec,
    /// Observation step `δ`.
    pub delta: f64,
    /// Horizon `N`: observations at `t_n = nδ`, `0 ≤ n ≤ N`.
    pub horizon: usize,
    pub x0: f64,
    /// Compact state space `K = [lo, hi]`.
    pub bounds: (f64, f64),
}

impl PdmpModel {
    /// Model with `λ(t) = t`, uniform post-jump law, identity link, the
    /// family's default start point and `v_0 = 3` for the sinusoidal
    /// families.
    pub fn new(family: FlowFamily, speeds: Vec<f64>, noise: NoiseSpec, delta: f64, horizon: usize) -> Result<Self> {
        let d = speeds.len();
        if d == 0 {
            return Err(Error::Config("at least one post-jump mode is required".into()));
        }
        if family == FlowFamily::ExponentialLinear && d != 2 {
            return Err(Error::Config("example 1b has exactly two post-jump modes".into()));
        }
        let base_speed = if family.is_sinusoidal() { 3.0 } else { 0.0 };
        let mut model = Self {
            family,
            speeds,
            base_speed,
            intensity: Intensity::default(),
            post_jump: vec![1.0 / d as f64; d],
            link: Link::Identity,
            noise,
            delta,
            horizon,
            x0: family.default_x0(),
            bounds: (0.0, 0.0),
        };
        model.bounds = model.natural_bounds();
        model.validate()?;
        Ok(model)
    }

    pub fn with_base_speed(mut self, v0: f64) -> Self {
        self.base_speed = v0;
        self.bounds = self.natural_bounds();
        self
    }

    pub fn with_x0(mut self, x0: f64) -> Self {
        self.x0 = x0;
        self.bounds = self.natural_bounds();
        self
    }

    pub fn with_link(mut self, link: Link) -> Self {
        self.link = link;
        self
    }

    pub fn with_intensity(mut self, intensity: Intensity) -> Self {
        self.intensity = intensity;
        self
    }

    pub fn with_post_jump(mut self, weights: Vec<f64>) -> Self {
        self.post_jump = weights;
        self
    }

    /// Intersects `K` with declared bounds.
    pub fn with_bounds_clip(mut self, lo: f64, hi: f64) -> Self {
        self.bounds = (self.bounds.0.max(lo), self.bounds.1.min(hi));
        self
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.speeds.len();
        if self.post_jump.len() != d {
            return Err(Error::Config(format!("post-jump law has {} weights for {d} modes", self.post_jump.len())));
        }
        if self.post_jump.iter().any(|p| !(*p > 0.0)) {
            return Err(Error::Config("post-jump weights must be positive".into()));
        }
        let total: f64 = self.post_jump.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("post-jump weights sum to {total}, expected 1")));
        }
        if !(self.delta > 0.0) {
            return Err(Error::Config(format!("observation step must be positive, got {}", self.delta)));
        }
        if self.family.is_sinusoidal() && self.x0.abs() > 1.0 {
            return Err(Error::Config("sinusoidal start point must lie in [-1, 1]".into()));
        }
        if self.family == FlowFamily::SineFrequency && self.speeds.contains(&self.base_speed) {
            return Err(Error::Config("post-jump frequencies must differ from v_0".into()));
        }
        if self.link == Link::Inverse && self.bounds.0 <= 0.0 && self.bounds.1 >= 0.0 {
            return Err(Error::Config("inverse link requires a state space excluding 0".into()));
        }
        if self.bounds.0 > self.bounds.1 {
            return Err(Error::Config("state bounds are empty".into()));
        }
        self.intensity.validate()
    }

    pub fn num_post_modes(&self) -> usize {
        self.speeds.len()
    }

    /// Real-time horizon `Nδ`.
    pub fn horizon_time(&self) -> f64 {
        self.horizon as f64 * self.delta
    }

    fn natural_bounds(&self) -> (f64, f64) {
        let horizon = self.horizon_time();
        match self.family {
            FlowFamily::Exponential | FlowFamily::ExponentialLinear => {
                let exp_speeds: &[f64] =
                    if self.family == FlowFamily::Exponential { &self.speeds } else { &self.speeds[..1] };
                let vmax = exp_speeds.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
                let a = self.x0 * (-vmax * horizon).exp();
                let b = self.x0 * (vmax * horizon).exp();
                let (mut lo, mut hi) = (a.min(b), a.max(b));
                if self.family == FlowFamily::ExponentialLinear {
                    let drift = self.speeds[1].abs() * horizon;
                    lo = lo.min(self.x0 - drift);
                    hi = hi.max(self.x0 + drift);
                }
                (lo, hi)
            }
            FlowFamily::SineFrequency => (-1.0, 1.0),
            FlowFamily::SineSlope => {
                let vmax = self.speeds.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
                (-1.0 - vmax * horizon, 1.0 + vmax * horizon)
            }
        }
    }

    pub fn start_flow(&self) -> FlowState {
        let phase = if self.family.is_sinusoidal() { self.x0.asin() } else { 0.0 };
        FlowState { x: self.x0, phase, u: 0.0 }
    }

    pub fn start_state(&self) -> DiscreteState {
        DiscreteState { mode: 0, flow: self.start_flow() }
    }

    /// `Φ_mode` applied for a duration `t ≥ 0`.
    ///
    /// # Panics
    /// If `mode > d`.
    pub fn flow(&self, mode: usize, state: &FlowState, t: f64) -> FlowState {
        assert!(mode <= self.num_post_modes(), "mode {mode} out of range 0..={}", self.num_post_modes());
        let u = state.u + t;
        match self.family {
            FlowFamily::Exponential => {
                let x = if mode == 0 { state.x } else { (self.speeds[mode - 1] * t).exp() * state.x };
                FlowState { x, phase: state.phase, u }
            }
            FlowFamily::ExponentialLinear => {
                let x = match mode {
                    0 => state.x,
                    1 => (self.speeds[0] * t).exp() * state.x,
                    _ => state.x + self.speeds[1] * t,
                };
                FlowState { x, phase: state.phase, u }
            }
            FlowFamily::SineFrequency => {
                let v = if mode == 0 { self.base_speed } else { self.speeds[mode - 1] };
                let phase = state.phase + v * PI * t;
                FlowState { x: phase.sin(), phase, u }
            }
            FlowFamily::SineSlope => {
                let phase = state.phase + self.base_speed * PI * t;
                let drift = if mode == 0 { 0.0 } else { self.speeds[mode - 1] * u };
                FlowState { x: phase.sin() + drift, phase, u }
            }
        }
    }

    /// State right after a jump: same position, time-since-jump reset.
    pub fn jump(&self, state: &FlowState) -> FlowState {
        FlowState { x: state.x, phase: state.phase, u: 0.0 }
    }

    #[inline]
    pub fn link_value(&self, x: f64) -> f64 {
        self.link.apply(x)
    }

    /// Likelihood `f(y - F(x))`.
    #[inline]
    pub fn likelihood(&self, y: f64, x: f64) -> f64 {
        self.noise.density(y - self.link.apply(x))
    }

    /// `P(T > t0 + t | T > t0)`.
    pub fn survival(&self, t0: f64, t: f64) -> f64 {
        self.intensity.survival(t0, t)
    }

    /// Draws a post-jump mode in `1..=d` from `π`.
    pub fn sample_post_mode<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, p) in self.post_jump.iter().enumerate() {
            acc += p;
            if u < acc {
                return i + 1;
            }
        }
        self.num_post_modes()
    }

    /// `P(m_{t_n} = m)` for each mode: `[P(T > nδ), π_1 P(T ≤ nδ), ...]`.
    pub fn mode_occupation(&self, n: usize) -> Vec<f64> {
        let stay = self.survival(0.0, n as f64 * self.delta);
        std::iter::once(stay).chain(self.post_jump.iter().map(|p| p * (1.0 - stay))).collect()
    }
}

// ---------------------------------------------------------------------------
// Trajectories and observations
// ---------------------------------------------------------------------------

/// A continuous-time path, fully described by its jump time and post-jump mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub start: FlowState,
    /// `+∞` when the process never jumps.
    pub jump_time: f64,
    pub post_mode: usize,
}

impl Trajectory {
    pub fn state_at(&self, model: &PdmpModel, t: f64) -> DiscreteState {
        if t < self.jump_time {
            DiscreteState { mode: 0, flow: model.flow(0, &self.start, t) }
        } else {
            let at_jump = model.jump(&model.flow(0, &self.start, self.jump_time));
            DiscreteState { mode: self.post_mode, flow: model.flow(self.post_mode, &at_jump, t - self.jump_time) }
        }
    }

    pub fn mode_at(&self, t: f64) -> usize {
        if t < self.jump_time {
            0
        } else {
            self.post_mode
        }
    }

    /// States `X_0 .. X_N` at the observation epochs.
    pub fn observation_states(&self, model: &PdmpModel) -> Vec<DiscreteState> {
        (0..=model.horizon).map(|n| self.state_at(model, n as f64 * model.delta)).collect()
    }

    /// Index of the first observation epoch at or after the jump.
    pub fn first_post_jump_index(&self, model: &PdmpModel) -> Option<usize> {
        (0..=model.horizon).find(|&n| n as f64 * model.delta >= self.jump_time)
    }
}

pub fn simulate_trajectory<R: Rng + ?Sized>(model: &PdmpModel, rng: &mut R) -> Trajectory {
    let jump_time = model.intensity.sample_residual(0.0, rng);
    let post_mode = model.sample_post_mode(rng);
    Trajectory { start: model.start_flow(), jump_time, post_mode }
}

/// `y_0 .. y_N` observed at `t_n = nδ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationSequence {
    pub values: Vec<f64>,
}

impl ObservationSequence {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

pub fn observe<R: Rng + ?Sized>(trajectory: &Trajectory, model: &PdmpModel, rng: &mut R) -> ObservationSequence {
    let values = trajectory
        .observation_states(model)
        .iter()
        .map(|s| model.link_value(s.x()) + model.noise.sample(rng))
        .collect();
    ObservationSequence { values }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::run_rng;
    use rand::SeedableRng;

    fn model_1a() -> PdmpModel {
        PdmpModel::new(FlowFamily::Exponential, vec![0.1, 0.5, 1.0], NoiseSpec::new(0.5, None).unwrap(), 1.0 / 6.0, 36)
            .unwrap()
    }

    fn model_2b() -> PdmpModel {
        PdmpModel::new(FlowFamily::SineSlope, vec![0.5, 1.5], NoiseSpec::new(0.1, None).unwrap(), 1.0 / 6.0, 36)
            .unwrap()
    }

    #[test]
    fn mode_zero_flow_is_identity_for_1a() {
        let m = model_1a();
        let s = FlowState { x: 1.0, phase: 0.0, u: 0.0 };
        assert_eq!(m.flow(0, &s, 2.5).x, 1.0);
    }

    #[test]
    fn exponential_mode_flow() {
        let m = model_1a();
        let s = FlowState { x: 1.0, phase: 0.0, u: 0.0 };
        assert!((m.flow(2, &s, 2.0).x - std::f64::consts::E).abs() < 1e-12);
    }

    #[test]
    #[should_panic]
    fn unknown_mode_panics() {
        let m = model_1a();
        m.flow(4, &m.start_flow(), 1.0);
    }

    #[test]
    fn sine_slope_semigroup() {
        let m = model_2b();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut worst = 0.0_f64;
        for _ in 0..100 {
            let mode = rng.random_range(0..=2);
            let phase: f64 = rng.random_range(-10.0..10.0);
            let u: f64 = rng.random_range(0.0..3.0);
            let drift = if mode == 0 { 0.0 } else { m.speeds[mode - 1] * u };
            let s0 = FlowState { x: phase.sin() + drift, phase, u };
            let (s, t) = (rng.random_range(0.0..3.0), rng.random_range(0.0..3.0));
            let two = m.flow(mode, &m.flow(mode, &s0, s), t);
            let one = m.flow(mode, &s0, s + t);
            worst = worst.max((two.x - one.x).abs());
        }
        assert!(worst <= 1e-9, "semigroup error {worst}");
    }

    #[test]
    fn survival_values() {
        let m = model_1a();
        assert!((m.survival(0.0, 6.0) - (-18.0_f64).exp()).abs() < 1e-20);
        assert_eq!(m.survival(0.0, 0.0), 1.0);
    }

    #[test]
    fn zero_intensity_never_jumps() {
        let m = model_1a().with_intensity(Intensity::Zero);
        let mut rng = run_rng(1, 0);
        let tr = simulate_trajectory(&m, &mut rng);
        assert!(tr.jump_time.is_infinite());
        assert!(tr.observation_states(&m).iter().all(|s| s.mode == 0));
    }

    #[test]
    fn polynomial_intensity_matches_linear_closed_form() {
        let lin = Intensity::Linear { slope: 1.0 };
        let poly = Intensity::Polynomial { coeffs: vec![0.0, 1.0] };
        for (t0, e) in [(0.0, 0.3), (1.5, 2.0), (2.0, 1e-4)] {
            let a = lin.inverse_cumulative(t0, e);
            let b = poly.inverse_cumulative(t0, e);
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn degenerate_noise_is_exact() {
        let m = PdmpModel::new(FlowFamily::Exponential, vec![0.5], NoiseSpec::new(0.0, Some(1.0)).unwrap(), 0.25, 8)
            .unwrap();
        let mut rng = run_rng(3, 0);
        let tr = simulate_trajectory(&m, &mut rng);
        let obs = observe(&tr, &m, &mut rng);
        for (y, s) in obs.values.iter().zip(tr.observation_states(&m)) {
            assert_eq!(*y, s.x());
        }
    }

    #[test]
    fn inverse_link_observations_in_support() {
        let noise = NoiseSpec::new(0.01, None).unwrap();
        let s = noise.trunc;
        let m = PdmpModel::new(FlowFamily::Exponential, vec![0.5], noise, 0.25, 8)
            .unwrap()
            .with_link(Link::Inverse)
            .with_intensity(Intensity::Zero)
            .with_x0(2.0);
        let mut rng = run_rng(5, 0);
        for _ in 0..1000 {
            let tr = simulate_trajectory(&m, &mut rng);
            for y in observe(&tr, &m, &mut rng).values {
                assert!((0.5 - s..=0.5 + s).contains(&y));
            }
        }
    }

    #[test]
    fn density_outside_support_is_zero() {
        let noise = NoiseSpec::new(1.0, Some(3.0)).unwrap();
        assert_eq!(noise.density(3.001), 0.0);
        let expected = 1.0 / (libm::erf(3.0 / 2f64.sqrt()) * (2.0 * PI).sqrt());
        assert!((noise.density(0.0) - expected).abs() < 1e-15);
    }

    #[test]
    fn trajectory_is_continuous_at_jump() {
        let m = model_1a();
        let mut rng = run_rng(11, 0);
        for _ in 0..100 {
            let tr = simulate_trajectory(&m, &mut rng);
            let before = m.flow(0, &tr.start, tr.jump_time);
            let after = tr.state_at(&m, tr.jump_time);
            assert_eq!(before.x, after.x());
        }
    }

    #[test]
    fn rejects_bad_post_jump_law() {
        let m = model_1a().with_post_jump(vec![0.5, 0.5, 0.5]);
        assert!(m.validate().is_err());
    }
}
