//! Discrete-time transition kernel of the observed chain `X_n = (m_{t_n}, x_{t_n})`
//! and the detection costs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DiscreteState, PdmpModel};

/// `exp(-∫_0^δ λ(nδ + s) ds)`: probability of no jump during `(t_n, t_{n+1}]`.
pub fn no_jump_prob(model: &PdmpModel, n: usize) -> f64 {
    model.survival(n as f64 * model.delta, model.delta)
}

/// Samples `X_{n+1}` given `X_n = state`.
pub fn step_sample<R: Rng + ?Sized>(model: &PdmpModel, n: usize, state: &DiscreteState, rng: &mut R) -> DiscreteState {
    let delta = model.delta;
    if state.mode > 0 {
        return DiscreteState { mode: state.mode, flow: model.flow(state.mode, &state.flow, delta) };
    }
    let t0 = n as f64 * delta;
    let stay = model.survival(t0, delta);
    let u: f64 = rng.random();
    if u < stay || stay >= 1.0 {
        return DiscreteState { mode: 0, flow: model.flow(0, &state.flow, delta) };
    }
    // Conditional on a jump in (t0, t0 + δ]; reuse the uniform for the offset.
    let w = (u - stay) / (1.0 - stay);
    let offset = jump_offset(model, t0, stay, w);
    let mode = model.sample_post_mode(rng);
    let at_jump = model.jump(&model.flow(0, &state.flow, offset));
    DiscreteState { mode, flow: model.flow(mode, &at_jump, delta - offset) }
}

/// Inverse of the conditional CDF of the jump offset in `[0, δ]` at level `w`.
pub fn jump_offset(model: &PdmpModel, t0: f64, stay: f64, w: f64) -> f64 {
    let mass = -(-w * (1.0 - stay)).ln_1p();
    model.intensity.inverse_cumulative(t0, mass).clamp(0.0, model.delta)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    pub alpha: f64,
    pub beta: f64,
    /// `gamma[m-1][a-1]`: cost of announcing `a` when the true mode is `m`.
    pub gamma: Vec<Vec<f64>>,
    pub delta: f64,
    pub horizon: usize,
}

impl CostParams {
    /// Constant off-diagonal mis-identification cost.
    pub fn uniform(alpha: f64, beta: f64, gamma: f64, d: usize, delta: f64, horizon: usize) -> Result<Self> {
        let gamma = (0..d).map(|m| (0..d).map(|a| if m == a { 0.0 } else { gamma }).collect()).collect();
        let params = Self { alpha, beta, gamma, delta, horizon };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !(self.beta > 0.0) {
            return Err(Error::Config(format!("α and β must be positive (α={}, β={})", self.alpha, self.beta)));
        }
        let d = self.gamma.len();
        for (m, row) in self.gamma.iter().enumerate() {
            if row.len() != d {
                return Err(Error::Config("γ must be a square matrix".into()));
            }
            if row.iter().any(|g| !(*g >= 0.0)) {
                return Err(Error::Config("γ entries must be nonnegative".into()));
            }
            if row[m] != 0.0 {
                return Err(Error::Config("γ must vanish on the diagonal".into()));
            }
        }
        Ok(())
    }

    pub fn num_post_modes(&self) -> usize {
        self.gamma.len()
    }

    /// `Ḡ = α ∨ max γ`.
    pub fn max_terminal(&self) -> f64 {
        self.gamma.iter().flatten().fold(self.alpha, |m, g| m.max(*g))
    }

    /// `c(m) = βδ·1{m > 0}`.
    #[inline]
    pub fn stage(&self, mode: usize) -> f64 {
        if mode == 0 {
            0.0
        } else {
            self.beta * self.delta
        }
    }

    /// `C(m, a)`; `a = 0` is the continuation branch and costs `c(m)`.
    #[inline]
    pub fn terminal(&self, mode: usize, action: usize) -> f64 {
        match (mode, action) {
            (m, 0) => self.stage(m),
            (0, _) => self.alpha,
            (m, a) => self.gamma[m - 1][a - 1],
        }
    }
}

pub fn stage_cost(params: &CostParams, state: &DiscreteState) -> f64 {
    params.stage(state.mode)
}

pub fn terminal_cost(params: &CostParams, state: &DiscreteState, action: usize) -> f64 {
    params.terminal(state.mode, action)
}

/// Outcome of a detector on one observation stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    /// Stop at observation index `time` and announce post-jump mode `mode ≥ 1`.
    Stop { time: usize, mode: usize },
    NoStop,
}

impl Decision {
    pub fn stop_time(&self) -> Option<usize> {
        match self {
            Self::Stop { time, .. } => Some(*time),
            Self::NoStop => None,
        }
    }

    pub fn action(&self) -> usize {
        match self {
            Self::Stop { mode, .. } => *mode,
            Self::NoStop => 0,
        }
    }
}

/// Realized cost `J` of a decision given the modes at the observation epochs.
///
/// Stage costs are charged for `n = 0 ..= (τ-1) ∧ N`, plus the terminal cost
/// at `τ` when the detector stops.
pub fn strategy_cost(params: &CostParams, modes: &[usize], decision: Decision) -> Result<f64> {
    let n_max = modes.len().checked_sub(1).ok_or_else(|| Error::Shape("empty mode sequence".into()))?;
    match decision {
        Decision::NoStop => Ok(modes.iter().map(|m| params.stage(*m)).sum()),
        Decision::Stop { time, mode } => {
            if mode == 0 || mode > params.num_post_modes() {
                return Err(Error::Inadmissible(format!("stopping requires an announced mode in 1..={}", params.num_post_modes())));
            }
            if time > n_max {
                return Err(Error::Inadmissible(format!("stop time {time} beyond horizon {n_max}")));
            }
            let running: f64 = modes[..time].iter().map(|m| params.stage(*m)).sum();
            Ok(running + params.terminal(modes[time], mode))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FlowFamily, FlowState, Intensity, NoiseSpec};
    use crate::rng::run_rng;

    fn model_1a() -> PdmpModel {
        PdmpModel::new(FlowFamily::Exponential, vec![0.1, 0.5, 1.0], NoiseSpec::new(0.5, None).unwrap(), 1.0 / 6.0, 36)
            .unwrap()
    }

    fn costs() -> CostParams {
        CostParams::uniform(4.0, 1.0, 1.5, 3, 1.0 / 6.0, 36).unwrap()
    }

    #[test]
    fn post_jump_step_is_deterministic() {
        let m = model_1a();
        let s = DiscreteState { mode: 2, flow: FlowState { x: 1.0, phase: 0.0, u: 0.3 } };
        let mut rng = run_rng(0, 0);
        for _ in 0..10 {
            let next = step_sample(&m, 4, &s, &mut rng);
            assert_eq!(next.mode, 2);
            assert!((next.x() - (1.0_f64 / 12.0).exp()).abs() < 1e-15);
        }
    }

    #[test]
    fn no_jump_closed_form() {
        let m = model_1a();
        assert!((no_jump_prob(&m, 0) - (-1.0_f64 / 72.0).exp()).abs() < 1e-15);
        assert!((no_jump_prob(&m, 35) - (-71.0_f64 / 72.0).exp()).abs() < 1e-14);
        assert!((no_jump_prob(&m, 35) - 0.3730).abs() < 1e-4);
        let mut z = m.clone();
        z.delta = 0.0;
        assert_eq!(no_jump_prob(&z, 3), 1.0);
    }

    #[test]
    fn zero_intensity_stays() {
        let m = model_1a().with_intensity(Intensity::Zero);
        let mut rng = run_rng(1, 0);
        let mut s = m.start_state();
        for n in 0..36 {
            s = step_sample(&m, n, &s, &mut rng);
            assert_eq!(s.mode, 0);
        }
    }

    #[test]
    fn jump_offsets_are_in_interval() {
        let m = model_1a();
        for n in [0, 5, 35] {
            let t0 = n as f64 * m.delta;
            let q = no_jump_prob(&m, n);
            for w in [0.0, 0.1, 0.5, 0.999, 1.0] {
                let s = jump_offset(&m, t0, q, w);
                assert!((0.0..=m.delta).contains(&s));
            }
            assert!((jump_offset(&m, t0, q, 1.0) - m.delta).abs() < 1e-9);
        }
    }

    #[test]
    fn mixture_mass_is_one() {
        // stay + ∫_0^δ λ(t0+s) exp(-∫_0^s λ(t0+z)dz) ds, by composite Simpson.
        let m = model_1a();
        for n in [0usize, 10, 35] {
            let t0 = n as f64 * m.delta;
            let dens = |s: f64| (t0 + s) * (-((t0 + s).powi(2) - t0 * t0) / 2.0).exp();
            let k = 2000;
            let h = m.delta / k as f64;
            let mut acc = dens(0.0) + dens(m.delta);
            for i in 1..k {
                acc += if i % 2 == 1 { 4.0 } else { 2.0 } * dens(i as f64 * h);
            }
            let total = no_jump_prob(&m, n) + acc * h / 3.0;
            assert!((total - 1.0).abs() < 1e-10, "n={n}: {total}");
        }
    }

    #[test]
    fn empirical_stay_probability() {
        let m = model_1a();
        let mut rng = run_rng(4, 0);
        let n = 1_000_000;
        let stays = (0..n).filter(|_| step_sample(&m, 0, &m.start_state(), &mut rng).mode == 0).count();
        let p = (-1.0_f64 / 72.0).exp();
        let sd = (p * (1.0 - p) / n as f64).sqrt();
        assert!((stays as f64 / n as f64 - p).abs() < 3.0 * sd);
    }

    #[test]
    fn modes_never_change_after_jump() {
        let m = model_1a();
        let mut rng = run_rng(9, 0);
        for _ in 0..10_000 {
            let mut s = m.start_state();
            let mut seen = 0;
            for n in 0..36 {
                s = step_sample(&m, n, &s, &mut rng);
                if seen > 0 {
                    assert_eq!(s.mode, seen);
                }
                seen = s.mode;
            }
        }
    }

    #[test]
    fn cost_examples() {
        let c = costs();
        assert_eq!(c.stage(0), 0.0);
        assert!((c.stage(2) - 1.0 / 6.0).abs() < 1e-15);
        let c2 = CostParams::uniform(4.0, 2.0, 1.5, 3, 1.0 / 6.0, 36).unwrap();
        assert!((c2.stage(1) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(c.terminal(0, 3), 4.0);
        assert_eq!(c.terminal(2, 2), 0.0);
        assert_eq!(c.terminal(1, 2), 1.5);
        assert_eq!(c.terminal(2, 0), c.stage(2));
        assert_eq!(c.max_terminal(), 4.0);
    }

    #[test]
    fn strategy_cost_examples() {
        let c = costs();
        let mut modes = vec![0; 37];
        for m in modes.iter_mut().skip(10) {
            *m = 2;
        }
        let late = strategy_cost(&c, &modes, Decision::Stop { time: 11, mode: 2 }).unwrap();
        assert!((late - c.beta * c.delta).abs() < 1e-15);
        assert_eq!(strategy_cost(&c, &modes, Decision::Stop { time: 10, mode: 2 }).unwrap(), 0.0);
        assert_eq!(strategy_cost(&c, &modes, Decision::Stop { time: 0, mode: 1 }).unwrap(), 4.0);
        assert_eq!(strategy_cost(&c, &[0; 37], Decision::NoStop).unwrap(), 0.0);
        assert!(strategy_cost(&c, &modes, Decision::Stop { time: 3, mode: 0 }).is_err());
        assert!(strategy_cost(&c, &modes, Decision::Stop { time: 37, mode: 1 }).is_err());
    }
}
