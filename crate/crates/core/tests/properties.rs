use proptest::prelude::*;

use pdmp_changepoint::baselines::{kalman_posterior, ma_detect, Direction, KalmanDetector, KalmanRule, MaConfig, MaDetector};
use pdmp_changepoint::filter::{psi_bar, Belief};
use pdmp_changepoint::kernel::{strategy_cost, CostParams, Decision};
use pdmp_changepoint::model::{DiscreteState, FlowFamily, FlowState, NoiseSpec, PdmpModel};
use pdmp_changepoint::policy::Detector;
use pdmp_changepoint::quantize::{GridPoint, QuantGrid, TransitionMatrix};

fn model() -> PdmpModel {
    PdmpModel::new(FlowFamily::Exponential, vec![0.1, 0.5, 1.0], NoiseSpec::new(0.5, None).unwrap(), 1.0 / 6.0, 36).unwrap()
}

fn stream() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..25.0, 37)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn baselines_depend_only_on_the_past(y in stream(), tail in stream(), k in 0usize..37) {
        let m = model();
        let costs = CostParams::uniform(4.0, 1.0, 1.5, 3, m.delta, m.horizon).unwrap();
        let mut z = y.clone();
        z[k + 1..].copy_from_slice(&tail[k + 1..]);
        let ma = MaDetector { model: &m, config: MaConfig { window: 3, threshold: 2.0, direction: Direction::Above } };
        let kf = KalmanDetector { model: &m, rule: KalmanRule::Calibrated { costs } };
        for d in [&ma as &dyn Detector, &kf] {
            let a = d.detect(&y).unwrap().decision;
            let b = d.detect(&z).unwrap().decision;
            if a.stop_time().is_some_and(|t| t <= k) {
                prop_assert_eq!(a, b);
            } else {
                prop_assert!(b.stop_time().is_none_or(|t| t > k));
            }
        }
        prop_assert_eq!(kalman_posterior(&m, &y[..=k], 0.5), kalman_posterior(&m, &z[..=k], 0.5));
    }

    #[test]
    fn ma_fires_exactly_on_the_first_crossing(y in stream(), k in 1usize..8, s in 0.5f64..4.0) {
        let cfg = MaConfig { window: k, threshold: s, direction: Direction::Above };
        let first = (k - 1..y.len()).find(|&n| y[n + 1 - k..=n].iter().sum::<f64>() / k as f64 > s);
        prop_assert_eq!(ma_detect(&y, &cfg), first);
    }

    #[test]
    fn strategy_cost_is_nonnegative(jump in 0usize..40, mode in 1usize..4, stop in 0usize..40, a in 1usize..4, never in any::<bool>()) {
        let c = CostParams::uniform(4.0, 1.0, 1.5, 3, 1.0 / 6.0, 36).unwrap();
        let modes: Vec<usize> = (0..=36).map(|n| if n >= jump { mode } else { 0 }).collect();
        let decision = if never || stop > 36 { Decision::NoStop } else { Decision::Stop { time: stop, mode: a } };
        let cost = strategy_cost(&c, &modes, decision).unwrap();
        prop_assert!(cost >= 0.0);
        let perfect = matches!(decision, Decision::Stop { time, mode: am } if time == jump && am == mode);
        let silent = decision == Decision::NoStop && jump > 36;
        prop_assert_eq!(cost == 0.0, perfect || silent);
    }

    #[test]
    fn psi_bar_stays_on_the_simplex(
        xs in prop::collection::vec((0usize..4, 0.5f64..20.0), 1..8),
        raw in prop::collection::vec(0.0f64..1.0, 1..8),
        w in prop::collection::vec(0.0f64..1.0, 1..8),
        y in -5.0f64..30.0,
    ) {
        let m = model();
        let entries: Vec<(GridPoint, DiscreteState)> = xs.iter().map(|&(mode, x)| (GridPoint { mode, x, u: 0.0 }, DiscreteState { mode, flow: FlowState { x, phase: 0.0, u: 0.0 } })).collect();
        let next = QuantGrid::new(1, false, 4, entries).unwrap();
        let rows = w.len();
        let cols = next.len();
        let mut data: Vec<f64> = (0..rows * cols).map(|i| raw[i % raw.len()] + 1e-3).collect();
        for r in data.chunks_mut(cols) {
            let t: f64 = r.iter().sum();
            r.iter_mut().for_each(|v| *v /= t);
        }
        let t = TransitionMatrix { rows, cols, data };
        let total: f64 = w.iter().sum::<f64>() + 1e-9;
        let belief = Belief { n: 0, weights: w.iter().map(|v| (v + 1e-9 / rows as f64) / total).collect() };
        let (b, _) = psi_bar(&m, &next, &t, &belief, y);
        prop_assert!(b.weights.iter().all(|v| *v >= 0.0));
        prop_assert!((b.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
    }
}
