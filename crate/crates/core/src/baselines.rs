//! Comparison detectors: a moving-average threshold with a likelihood-based
//! mode choice, and an exact mode posterior under a linearized regime model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{no_jump_prob, CostParams, Decision};
use crate::model::{FlowFamily, Link, PdmpModel};
use crate::policy::{Detection, Detector};

/// Observations closer to zero than this are clamped before inversion.
pub const INVERSE_CLAMP: f64 = 1e-6;

/// Maps observations to the position scale: `1/y` for the inverse link.
pub fn linearize(model: &PdmpModel, observations: &[f64]) -> Vec<f64> {
    match model.link {
        Link::Identity => observations.to_vec(),
        Link::Inverse => observations
            .iter()
            .map(|&y| {
                let y = if y.abs() < INVERSE_CLAMP { INVERSE_CLAMP.copysign(y) } else { y };
                1.0 / y
            })
            .collect(),
    }
}

/// Mean trajectory of mode `mode` a time `t` after the jump, from `x0`.
fn post_jump_mean(model: &PdmpModel, mode: usize, x0: f64, t: f64) -> f64 {
    match (model.family, mode) {
        (FlowFamily::ExponentialLinear, 2) => x0 + model.speeds[1] * t,
        _ => (model.speeds[mode - 1] * t).exp() * x0,
    }
}

fn check_family(model: &PdmpModel) -> Result<()> {
    if model.family.is_sinusoidal() {
        return Err(Error::Config("the baselines only apply to the exponential examples".into()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Moving average
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    #[default]
    Above,
    Below,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaConfig {
    pub window: usize,
    pub threshold: f64,
    #[serde(default)]
    pub direction: Direction,
}

/// First `n ≥ k-1` whose trailing window mean strictly crosses the threshold.
pub fn ma_detect(observations: &[f64], config: &MaConfig) -> Option<usize> {
    let k = config.window.max(1);
    if observations.len() < k {
        return None;
    }
    let mut sum: f64 = observations[..k - 1].iter().sum();
    for n in k - 1..observations.len() {
        sum += observations[n];
        if n >= k {
            sum -= observations[n - k];
        }
        let mean = sum / k as f64;
        let fired = match config.direction {
            Direction::Above => mean > config.threshold,
            Direction::Below => mean < config.threshold,
        };
        if fired {
            return Some(n);
        }
    }
    None
}

/// Squared-error negative log-likelihood of `y_0..y_τ` with the jump after `t`.
fn segment_nll(model: &PdmpModel, ys: &[f64], tau: usize, mode: usize, t: usize, sigma2: f64) -> f64 {
    let x0 = model.x0;
    let mut acc = 0.0;
    for (n, y) in ys.iter().enumerate().take(tau + 1) {
        let mean = if n <= t { x0 } else { post_jump_mean(model, mode, x0, (n - t) as f64 * model.delta) };
        acc += (y - mean) * (y - mean);
    }
    acc / (2.0 * sigma2)
}

/// `argmin_i min_t ℓ_i(t)` over jump epochs `t ∈ {2..τ-1}`; for `τ < 3` the
/// jump is placed at `t = 0`. Ties go to the smallest mode.
pub fn ma_mode_choice(model: &PdmpModel, observations: &[f64], tau: usize, sigma2: f64) -> usize {
    let ys = linearize(model, observations);
    let sigma2 = if sigma2 > 0.0 { sigma2 } else { 1.0 };
    let d = model.num_post_modes();
    let mut best = (1, f64::INFINITY);
    for mode in 1..=d {
        let score = if tau < 3 {
            segment_nll(model, &ys, tau, mode, 0, sigma2)
        } else {
            (2..tau).map(|t| segment_nll(model, &ys, tau, mode, t, sigma2)).fold(f64::INFINITY, f64::min)
        };
        if score < best.1 {
            best = (mode, score);
        }
    }
    best.0
}

pub struct MaDetector<'a> {
    pub model: &'a PdmpModel,
    pub config: MaConfig,
}

impl Detector for MaDetector<'_> {
    fn name(&self) -> String {
        format!("ma(k={},s={})", self.config.window, self.config.threshold)
    }

    fn detect(&self, observations: &[f64]) -> Result<Detection> {
        check_family(self.model)?;
        let ys = linearize(self.model, observations);
        Ok(match ma_detect(&ys, &self.config) {
            Some(tau) => Decision::Stop { time: tau, mode: ma_mode_choice(self.model, observations, tau, self.model.noise.sigma2) },
            None => Decision::NoStop,
        }
        .into())
    }
}

// ---------------------------------------------------------------------------
// Linearized regime model
// ---------------------------------------------------------------------------

/// Mode transition matrix between `t_n` and `t_{n+1}`; modes `1..d` absorb.
pub fn mode_transition_matrix(model: &PdmpModel, n: usize) -> Vec<Vec<f64>> {
    let d = model.num_post_modes();
    let stay = no_jump_prob(model, n);
    let mut m = vec![vec![0.0; d + 1]; d + 1];
    m[0][0] = stay;
    for i in 1..=d {
        m[0][i] = model.post_jump[i - 1] * (1.0 - stay);
        m[i][i] = 1.0;
    }
    m
}

/// State of hypothesis `(jump epoch t, mode i)` at epoch `n ≥ t`:
/// `X_n = A_i^{n-t} x0`, or `x0 + (n-t) v_2 δ` for the linear mode.
fn hypothesis_mean(model: &PdmpModel, mode: usize, steps: usize) -> f64 {
    post_jump_mean(model, mode, model.x0, steps as f64 * model.delta)
}

/// Incremental posterior over `{no jump yet} ∪ {(t, i)}`.
#[derive(Clone, Debug)]
pub struct RegimePosterior<'a> {
    model: &'a PdmpModel,
    sigma2: f64,
    k: usize,
    /// Log prior + log likelihood of "no jump up to k".
    log_none: f64,
    /// `log_jump[t-1][i-1]` for jump epochs `t = 1..k`.
    log_jump: Vec<Vec<f64>>,
    /// `Π_{n<k} P(0→0 at n)` kept in log form.
    log_stay: f64,
}

impl<'a> RegimePosterior<'a> {
    pub fn new(model: &'a PdmpModel, sigma2: f64) -> Self {
        Self { model, sigma2: if sigma2 > 0.0 { sigma2 } else { 1.0 }, k: 0, log_none: 0.0, log_jump: Vec::new(), log_stay: 0.0 }
    }

    #[inline]
    fn log_gauss(&self, y: f64, mean: f64) -> f64 {
        -(y - mean) * (y - mean) / (2.0 * self.sigma2)
    }

    /// Absorbs `y_{k+1}` (already linearized).
    pub fn update(&mut self, y: f64) {
        let model = self.model;
        let n = self.k;
        let trans = mode_transition_matrix(model, n);
        let new_t = n + 1;
        // Jumps at the new epoch start from the "none" hypothesis' likelihood.
        let base_ll = self.log_none - self.log_stay;
        let mut fresh = Vec::with_capacity(model.num_post_modes());
        for i in 1..=model.num_post_modes() {
            let prior = self.log_stay + trans[0][i].ln();
            fresh.push(prior + base_ll + self.log_gauss(y, hypothesis_mean(model, i, 0)));
        }
        for (t_idx, row) in self.log_jump.iter_mut().enumerate() {
            let t = t_idx + 1;
            for (i, w) in row.iter_mut().enumerate() {
                *w += -(y - hypothesis_mean(model, i + 1, new_t - t)).powi(2) / (2.0 * self.sigma2);
            }
        }
        self.log_jump.push(fresh);
        self.log_stay += trans[0][0].ln();
        self.log_none = self.log_stay + base_ll + self.log_gauss(y, model.x0);
        self.k = new_t;
    }

    /// `P(M_k = m | y_1..y_k)` for `m = 0..d`.
    pub fn mode_posterior(&self) -> Vec<f64> {
        let d = self.model.num_post_modes();
        let max = self.log_jump.iter().flatten().copied().fold(self.log_none, f64::max);
        let mut out = vec![0.0; d + 1];
        out[0] = (self.log_none - max).exp();
        for row in &self.log_jump {
            for (o, w) in out[1..].iter_mut().zip(row) {
                *o += (w - max).exp();
            }
        }
        let total: f64 = out.iter().sum();
        out.iter_mut().for_each(|p| *p /= total);
        out
    }
}

/// Mode posterior after `y_0..y_k` under the linearized model.
pub fn kalman_posterior(model: &PdmpModel, observations: &[f64], sigma2: f64) -> Vec<f64> {
    let ys = linearize(model, observations);
    let mut post = RegimePosterior::new(model, sigma2);
    for &y in ys.iter().skip(1) {
        post.update(y);
    }
    post.mode_posterior()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KalmanRule {
    /// Stop once some post-jump mode has posterior above the threshold.
    Fixed { threshold: f64 },
    /// Stop once announcing some mode is cheaper in expectation than one
    /// more step of delay.
    Calibrated { costs: CostParams },
}

/// Decision of a rule on a posterior; `None` means continue.
pub fn rule_decision(rule: &KalmanRule, posterior: &[f64]) -> Option<usize> {
    let d = posterior.len() - 1;
    match rule {
        KalmanRule::Fixed { threshold } => {
            let mut best = (0, f64::NEG_INFINITY);
            for (i, &p) in posterior.iter().enumerate().skip(1) {
                if p > best.1 {
                    best = (i, p);
                }
            }
            (best.1 > *threshold).then_some(best.0)
        }
        KalmanRule::Calibrated { costs } => {
            let jumped: f64 = posterior[1..].iter().sum();
            let delay = costs.beta * costs.delta * jumped;
            let announce = |j: usize| -> f64 {
                costs.alpha * posterior[0] + (1..=d).filter(|&i| i != j).map(|i| costs.gamma[i - 1][j - 1] * posterior[i]).sum::<f64>()
            };
            let mut best = (1, f64::INFINITY);
            for j in 1..=d {
                let c = announce(j);
                if c < best.1 {
                    best = (j, c);
                }
            }
            (delay > best.1).then_some(best.0)
        }
    }
}

pub struct KalmanDetector<'a> {
    pub model: &'a PdmpModel,
    pub rule: KalmanRule,
}

impl Detector for KalmanDetector<'_> {
    fn name(&self) -> String {
        match &self.rule {
            KalmanRule::Fixed { threshold } => format!("kf({threshold})"),
            KalmanRule::Calibrated { .. } => "kf(calibrated)".into(),
        }
    }

    fn detect(&self, observations: &[f64]) -> Result<Detection> {
        check_family(self.model)?;
        let ys = linearize(self.model, observations);
        let mut post = RegimePosterior::new(self.model, self.model.noise.sigma2);
        for (k, &y) in ys.iter().enumerate() {
            if k > 0 {
                post.update(y);
            }
            if let Some(mode) = rule_decision(&self.rule, &post.mode_posterior()) {
                return Ok(Decision::Stop { time: k, mode }.into());
            }
        }
        Ok(Decision::NoStop.into())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FlowFamily, NoiseSpec};
    use crate::rng::run_rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn model_1a(sigma2: f64) -> PdmpModel {
        PdmpModel::new(FlowFamily::Exponential, vec![0.1, 0.5, 1.0], NoiseSpec::new(sigma2, None).unwrap(), 1.0 / 6.0, 36)
            .unwrap()
    }

    fn ma(window: usize, threshold: f64) -> MaConfig {
        MaConfig { window, threshold, direction: Direction::Above }
    }

    #[test]
    fn ma_examples() {
        assert_eq!(ma_detect(&[1.0; 10], &ma(3, 2.0)), None);
        assert_eq!(ma_detect(&[1.0, 1.0, 1.0, 3.0, 3.0], &ma(2, 2.0)), Some(4));
        assert_eq!(ma_detect(&[2.0, 2.0, 2.0], &ma(2, 2.0)), None);
        let below = MaConfig { direction: Direction::Below, ..ma(2, 0.5) };
        assert_eq!(ma_detect(&[1.0, 1.0, 0.2, 0.2], &below), Some(3));
    }

    #[test]
    fn ma_mode_choice_noiseless() {
        let m = model_1a(0.1);
        for mode in 1..=3 {
            // Jump exactly at epoch 6, observed until epoch 30.
            let ys: Vec<f64> = (0..=36).map(|n| if n <= 6 { 1.0 } else { post_jump_mean(&m, mode, 1.0, (n - 6) as f64 * m.delta) }).collect();
            assert_eq!(ma_mode_choice(&m, &ys, 30, 0.1), mode);
        }
    }

    #[test]
    fn ma_mode_choice_ties_to_lowest() {
        let m = PdmpModel::new(FlowFamily::Exponential, vec![0.5, 0.5], NoiseSpec::new(0.1, None).unwrap(), 1.0 / 6.0, 36).unwrap();
        let ys: Vec<f64> = (0..20).map(|n| (0.5 * n as f64 / 6.0).exp()).collect();
        assert_eq!(ma_mode_choice(&m, &ys, 19, 0.1), 1);
    }

    #[test]
    fn transition_matrix_examples() {
        let m = model_1a(0.5);
        let p = mode_transition_matrix(&m, 0);
        assert!((p[0][0] - (-1.0_f64 / 72.0).exp()).abs() < 1e-15);
        for row in &p {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
        let z = m.clone().with_intensity(crate::model::Intensity::Zero);
        let p = mode_transition_matrix(&z, 4);
        for (i, row) in p.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert_eq!(*v, if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn posterior_at_start_is_prior() {
        let m = model_1a(0.5);
        assert_eq!(kalman_posterior(&m, &[1.3], 0.5), vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn posterior_is_normalized() {
        let m = model_1a(0.5);
        let mut rng = run_rng(8, 0);
        for _ in 0..10_000 {
            let k = rng.random_range(1..=36);
            let ys: Vec<f64> = (0..=k).map(|_| rng.random_range(-1.0..6.0)).collect();
            let p = kalman_posterior(&m, &ys, 0.5);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            assert!(p.iter().all(|x| *x >= 0.0));
        }
    }

    #[test]
    fn clean_post_jump_stream_identifies_mode() {
        let m = model_1a(0.1);
        for mode in 1..=3 {
            // Jump at epoch 12 under the linearized model, noiseless.
            let ys: Vec<f64> = (0..=36).map(|n| if n < 12 { 1.0 } else { hypothesis_mean(&m, mode, n - 12) }).collect();
            let p = kalman_posterior(&m, &ys, 0.1);
            assert!(p[mode] >= 0.99, "mode {mode}: {p:?}");
        }
    }

    #[test]
    fn calibrated_rule_examples() {
        let costs = CostParams::uniform(4.0, 1.0, 1.5, 3, 1.0 / 6.0, 36).unwrap();
        let rule = KalmanRule::Calibrated { costs: costs.clone() };
        assert_eq!(rule_decision(&rule, &[1.0, 0.0, 0.0, 0.0]), None);
        assert_eq!(rule_decision(&rule, &[0.0, 1.0, 0.0, 0.0]), Some(1));
        let two = CostParams::uniform(4.0, 1.0, 1.5, 2, 1.0 / 6.0, 36).unwrap();
        assert_eq!(rule_decision(&KalmanRule::Calibrated { costs: two }, &[0.2, 0.5, 0.3]), None);
        assert_eq!(rule_decision(&KalmanRule::Fixed { threshold: 0.5 }, &[0.2, 0.3, 0.5]), None);
        assert_eq!(rule_decision(&KalmanRule::Fixed { threshold: 0.5 }, &[0.2, 0.2, 0.6]), Some(2));
    }

    proptest! {
        #[test]
        fn sigma_scaling_preserves_fixed_t_argmin(c in 0.1f64..10.0, seed in 0u64..1000) {
            let m = model_1a(0.5);
            let mut rng = run_rng(seed, 0);
            let ys: Vec<f64> = (0..=20).map(|_| rng.random_range(0.5..3.0)).collect();
            let pick = |s2: f64| (1..=3).min_by(|&a, &b| segment_nll(&m, &ys, 20, a, 8, s2).total_cmp(&segment_nll(&m, &ys, 20, b, 8, s2)).then(a.cmp(&b))).unwrap();
            prop_assert_eq!(pick(0.5), pick(0.5 * c));
        }
    }

    #[test]
    fn sinusoidal_models_are_rejected() {
        let m = PdmpModel::new(FlowFamily::SineFrequency, vec![5.0], NoiseSpec::new(0.1, None).unwrap(), 1.0 / 6.0, 36).unwrap();
        let d = MaDetector { model: &m, config: ma(3, 2.0) };
        assert!(d.detect(&[0.0; 37]).is_err());
    }
}
