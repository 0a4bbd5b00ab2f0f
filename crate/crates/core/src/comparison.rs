//! Class-K / K-infinity / KL comparison functions: evaluation, inversion,
//! composition, decay-envelope checking, and empirical envelope fitting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::systems::Trajectory;
use crate::vecn;

/// Minimum slope enforced between knots of piecewise-linear class-K
/// representations, so strict monotonicity survives float comparisons.
pub const MIN_PL_SLOPE: f64 = 1e-12;

/// A class-K function: continuous, strictly increasing, zero at zero.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KFunction {
    /// `s -> a * s^p` with `a, p > 0`; class K-infinity.
    Power { a: f64, p: f64 },
    /// Piecewise-linear interpolation through `(0,0)` and the given knots,
    /// extended with the last slope beyond the final knot.
    PiecewiseLinear { knots: Vec<(f64, f64)> },
    /// `outer(inner(s))`.
    Compose {
        outer: Box<KFunction>,
        inner: Box<KFunction>,
    },
}

impl KFunction {
    pub fn power(a: f64, p: f64) -> Result<Self> {
        if a > 0.0 && p > 0.0 && a.is_finite() && p.is_finite() {
            Ok(KFunction::Power { a, p })
        } else {
            Err(Error::InvalidParams(format!(
                "power K-function needs a, p > 0 (got a={a}, p={p})"
            )))
        }
    }

    pub fn identity() -> Self {
        KFunction::Power { a: 1.0, p: 1.0 }
    }

    /// Piecewise-linear class-K function through `(0, 0)`; knots must be
    /// strictly increasing in both coordinates.
    pub fn piecewise_linear(knots: Vec<(f64, f64)>) -> Result<Self> {
        if knots.is_empty() {
            return Err(Error::InvalidParams("piecewise-linear needs >= 1 knot".into()));
        }
        let mut prev = (0.0, 0.0);
        for &(s, v) in &knots {
            let ds = s - prev.0;
            let dv = v - prev.1;
            if !(ds > 0.0 && dv >= MIN_PL_SLOPE * ds) {
                return Err(Error::InvalidParams(format!(
                    "knots must increase strictly (slope >= {MIN_PL_SLOPE}); offending knot ({s}, {v})"
                )));
            }
            prev = (s, v);
        }
        Ok(KFunction::PiecewiseLinear { knots })
    }

    pub fn eval(&self, s: f64) -> f64 {
        match self {
            KFunction::Power { a, p } => a * s.powf(*p),
            KFunction::PiecewiseLinear { knots } => pl_eval(knots, s),
            KFunction::Compose { outer, inner } => outer.eval(inner.eval(s)),
        }
    }

    /// Inverse as a class-K function (exact for powers and piecewise-linear;
    /// compositions invert member-wise in reverse order).
    pub fn inverse(&self) -> KFunction {
        match self {
            KFunction::Power { a, p } => KFunction::Power {
                a: (1.0 / a).powf(1.0 / p),
                p: 1.0 / p,
            },
            KFunction::PiecewiseLinear { knots } => KFunction::PiecewiseLinear {
                knots: knots.iter().map(|&(s, v)| (v, s)).collect(),
            },
            KFunction::Compose { outer, inner } => KFunction::Compose {
                outer: Box::new(inner.inverse()),
                inner: Box::new(outer.inverse()),
            },
        }
    }

    /// Evaluate the inverse at `v`, rejecting values outside the range for
    /// bounded (piecewise-linear) representations.
    pub fn inverse_eval(&self, v: f64) -> Result<f64> {
        if v < 0.0 {
            return Err(Error::OutsideRange(v));
        }
        if let KFunction::PiecewiseLinear { knots } = self {
            let (last_s, last_v) = *knots.last().unwrap();
            // the PL extension beyond the last knot keeps the final slope, so
            // values above it are invertible too unless that slope is ~0
            let slope = {
                let (ps, pv) = if knots.len() >= 2 {
                    knots[knots.len() - 2]
                } else {
                    (0.0, 0.0)
                };
                (last_v - pv) / (last_s - ps)
            };
            if v > last_v && slope < MIN_PL_SLOPE {
                return Err(Error::OutsideRange(v));
            }
        }
        Ok(self.inverse().eval(v))
    }

    pub fn compose(outer: KFunction, inner: KFunction) -> KFunction {
        match (outer, inner) {
            // power compositions stay closed-form
            (KFunction::Power { a: a1, p: p1 }, KFunction::Power { a: a2, p: p2 }) => {
                KFunction::Power {
                    a: a1 * a2.powf(p1),
                    p: p1 * p2,
                }
            }
            (outer, inner) => KFunction::Compose {
                outer: Box::new(outer),
                inner: Box::new(inner),
            },
        }
    }
}

fn pl_eval(knots: &[(f64, f64)], s: f64) -> f64 {
    if s <= 0.0 {
        return 0.0;
    }
    let mut prev = (0.0, 0.0);
    for &(ks, kv) in knots {
        if s <= ks {
            return prev.1 + (kv - prev.1) * (s - prev.0) / (ks - prev.0);
        }
        prev = (ks, kv);
    }
    // extend with the last slope
    let (ls, lv) = *knots.last().unwrap();
    let (ps, pv) = if knots.len() >= 2 {
        knots[knots.len() - 2]
    } else {
        (0.0, 0.0)
    };
    lv + (lv - pv) / (ls - ps) * (s - ls)
}

/// A class-KL function: class-K in `s` for fixed `t`, decreasing to zero in
/// `t` for fixed `s`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KLFunction {
    /// `(s, t) -> sigma(s) * exp(-lambda t)`.
    ExpEnvelope { sigma: KFunction, lambda: f64 },
    /// Bilinear interpolation on a rectangular grid, clamped at the edges.
    Tabulated {
        s_grid: Vec<f64>,
        t_grid: Vec<f64>,
        /// `values[i][j]` = beta(s_grid[i], t_grid[j]).
        values: Vec<Vec<f64>>,
    },
}

impl KLFunction {
    pub fn exp_envelope(sigma: KFunction, lambda: f64) -> Result<Self> {
        if lambda >= 0.0 && lambda.is_finite() {
            Ok(KLFunction::ExpEnvelope { sigma, lambda })
        } else {
            Err(Error::InvalidParams(format!("lambda must be >= 0, got {lambda}")))
        }
    }

    pub fn eval(&self, s: f64, t: f64) -> f64 {
        match self {
            KLFunction::ExpEnvelope { sigma, lambda } => sigma.eval(s) * (-lambda * t).exp(),
            KLFunction::Tabulated {
                s_grid,
                t_grid,
                values,
            } => {
                let (i, ws) = bracket(s_grid, s);
                let (j, wt) = bracket(t_grid, t);
                let v00 = values[i][j];
                let v10 = values[(i + 1).min(s_grid.len() - 1)][j];
                let v01 = values[i][(j + 1).min(t_grid.len() - 1)];
                let v11 = values[(i + 1).min(s_grid.len() - 1)][(j + 1).min(t_grid.len() - 1)];
                let a = v00 + (v10 - v00) * ws;
                let b = v01 + (v11 - v01) * ws;
                a + (b - a) * wt
            }
        }
    }

    /// Sample onto a rectangular grid.
    pub fn tabulate(&self, s_grid: Vec<f64>, t_grid: Vec<f64>) -> KLFunction {
        let values = s_grid
            .iter()
            .map(|s| t_grid.iter().map(|t| self.eval(*s, *t)).collect())
            .collect();
        KLFunction::Tabulated {
            s_grid,
            t_grid,
            values,
        }
    }
}

fn bracket(grid: &[f64], x: f64) -> (usize, f64) {
    if x <= grid[0] {
        return (0, 0.0);
    }
    for i in 0..grid.len() - 1 {
        if x <= grid[i + 1] {
            return (i, (x - grid[i]) / (grid[i + 1] - grid[i]));
        }
    }
    (grid.len() - 1, 0.0)
}

/// One flagged sample from an envelope check.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ViolationRow {
    pub trajectory: usize,
    pub time: f64,
    pub norm: f64,
    pub bound: f64,
}

/// Result of checking a trajectory bundle against a decay bound.
/// `violations` is empty exactly when `max_ratio <= 1`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnvelopeReport {
    pub violations: Vec<ViolationRow>,
    pub max_ratio: f64,
    pub samples_checked: usize,
}

impl EnvelopeReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Check `|x(t)| <= max(beta(|x0|, t), floor)` at every recorded sample of
/// every trajectory. Tolerance is `1e-9 * (1 + bound)` per sample.
pub fn check_kl_estimate(trajs: &[Trajectory], beta: &KLFunction, floor: f64) -> EnvelopeReport {
    check_bound(trajs, |traj, t, _idx| {
        beta.eval(traj.initial_norm(), t).max(floor)
    })
}

pub(crate) fn check_bound(
    trajs: &[Trajectory],
    bound_at: impl Fn(&Trajectory, f64, usize) -> f64,
) -> EnvelopeReport {
    let mut violations = Vec::new();
    let mut max_ratio: f64 = 0.0;
    let mut samples = 0;
    for (id, traj) in trajs.iter().enumerate() {
        for (idx, (t, x)) in traj.times.iter().zip(&traj.states).enumerate() {
            let bound = bound_at(traj, *t, idx);
            let tol = 1e-9 * (1.0 + bound.abs());
            let nx = vecn::norm(x);
            max_ratio = max_ratio.max(nx / (bound + tol));
            samples += 1;
            if nx > bound + tol {
                violations.push(ViolationRow {
                    trajectory: id,
                    time: *t,
                    norm: nx,
                    bound,
                });
            }
        }
    }
    EnvelopeReport {
        violations,
        max_ratio,
        samples_checked: samples,
    }
}

/// Fit an exponential KL envelope `a |x0| e^(-lambda t)` to a trajectory
/// bundle: log-domain least squares for the decay rate, then the scale is
/// inflated until the envelope dominates every sample above `floor`.
///
/// The result always passes `check_kl_estimate` on the same bundle.
pub fn fit_kl_envelope(trajs: &[Trajectory], floor: f64) -> Result<KLFunction> {
    if trajs.is_empty() {
        return Err(Error::InvalidParams("empty trajectory bundle".into()));
    }
    if let Some(idx) = trajs.iter().position(|t| t.escaped) {
        return Err(Error::UnboundedBundle(idx));
    }

    // per-trajectory decay slope; keep the slowest so the envelope covers all
    let mut lambda = f64::INFINITY;
    for traj in trajs {
        if let Some(slope) = log_slope(traj, floor) {
            lambda = lambda.min(-slope);
        }
    }
    let lambda = if lambda.is_finite() { lambda.max(0.0) } else { 0.0 };

    let mut scale: f64 = 1e-9; // strictly positive so sigma is class K
    for traj in trajs {
        let s0 = traj.initial_norm();
        for (t, x) in traj.times.iter().zip(&traj.states) {
            let nx = vecn::norm(x);
            if nx <= floor {
                continue;
            }
            if s0 == 0.0 {
                return Err(Error::InvalidParams(
                    "trajectory from |x0| = 0 exceeds the floor; no K envelope in |x0| exists".into(),
                ));
            }
            scale = scale.max(nx * (lambda * t).exp() / s0);
        }
    }
    KLFunction::exp_envelope(KFunction::power(scale, 1.0)?, lambda)
}

fn log_slope(traj: &Trajectory, floor: f64) -> Option<f64> {
    let mut pts: Vec<(f64, f64)> = Vec::new();
    for (t, x) in traj.times.iter().zip(&traj.states) {
        let nx = vecn::norm(x);
        if nx > floor.max(1e-300) {
            pts.push((*t, nx.ln()));
        }
    }
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let (st, sy): (f64, f64) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
    let (mt, my) = (st / n, sy / n);
    let mut num = 0.0;
    let mut den = 0.0;
    for (t, y) in &pts {
        num += (t - mt) * (y - my);
        den += (t - mt) * (t - mt);
    }
    if den == 0.0 {
        None
    } else {
        Some(num / den)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj_from(f: impl Fn(f64) -> f64, t_end: f64, n: usize) -> Trajectory {
        let times = vecn::linspace(0.0, t_end, n);
        let states = times.iter().map(|t| vec![f(*t)]).collect();
        Trajectory {
            times,
            states,
            ..Default::default()
        }
    }

    #[test]
    fn power_eval_inverse_compose() {
        let sq = KFunction::power(1.0, 2.0).unwrap();
        assert_eq!(sq.eval(3.0), 9.0);
        assert!((sq.inverse().eval(9.0) - 3.0).abs() < 1e-12);
        let lin2 = KFunction::power(2.0, 1.0).unwrap();
        let comp = KFunction::compose(lin2, sq.clone());
        assert!((comp.eval(3.0) - 18.0).abs() < 1e-12);
    }

    #[test]
    fn inverse_round_trip_grid() {
        let f = KFunction::power(2.5, 1.7).unwrap();
        for s in vecn::linspace(0.0, 10.0, 101) {
            let v = f.eval(s);
            assert!((f.inverse_eval(v).unwrap() - s).abs() <= 1e-8 * (1.0 + s));
        }
        assert!(f.inverse_eval(-1.0).is_err());
    }

    #[test]
    fn piecewise_linear_validation() {
        assert!(KFunction::piecewise_linear(vec![(1.0, 1.0), (2.0, 1.0)]).is_err());
        assert!(KFunction::piecewise_linear(vec![(1.0, 1.0), (2.0, 3.0)]).is_ok());
        let f = KFunction::piecewise_linear(vec![(1.0, 2.0), (3.0, 4.0)]).unwrap();
        assert!((f.eval(0.5) - 1.0).abs() < 1e-12);
        assert!((f.eval(2.0) - 3.0).abs() < 1e-12);
        // extension keeps last slope
        assert!((f.eval(4.0) - 5.0).abs() < 1e-12);
        let inv = f.inverse();
        assert!((inv.eval(f.eval(2.3)) - 2.3).abs() < 1e-10);
    }

    #[test]
    fn kl_check_equality_case() {
        let beta = KLFunction::exp_envelope(KFunction::identity(), 1.0).unwrap();
        let traj = traj_from(|t| (-t).exp(), 5.0, 101);
        let report = check_kl_estimate(&[traj], &beta, 0.0);
        assert!(report.passed(), "{:?}", report.violations.first());
        assert!(report.max_ratio <= 1.0 + 1e-9);
    }

    #[test]
    fn kl_check_flags_everything_above() {
        let beta = KLFunction::exp_envelope(KFunction::identity(), 1.0).unwrap();
        // |x0| = 1 but the state runs at twice the envelope
        let mut traj = traj_from(|t| 2.0 * (-t).exp(), 5.0, 101);
        traj.states[0] = vec![1.0];
        let report = check_kl_estimate(&[traj], &beta, 0.0);
        assert_eq!(report.violations.len(), 100);
        assert!(report.max_ratio > 1.9);
    }

    #[test]
    fn kl_check_floor_dominates() {
        let beta = KLFunction::exp_envelope(KFunction::identity(), 1.0).unwrap();
        let traj = traj_from(|t| 9.0 + t.sin(), 5.0, 101);
        let report = check_kl_estimate(&[traj], &beta, 10.0);
        assert!(report.passed());
    }

    #[test]
    fn fit_recovers_decay_rate() {
        let traj = traj_from(|t| (-2.0 * t).exp(), 5.0, 201);
        let beta = fit_kl_envelope(std::slice::from_ref(&traj), 0.0).unwrap();
        match &beta {
            KLFunction::ExpEnvelope { lambda, .. } => {
                assert!(*lambda >= 2.0 - 1e-3, "lambda = {lambda}");
                assert!(*lambda <= 2.0 + 1e-3, "lambda = {lambda}");
            }
            _ => panic!("expected exp envelope"),
        }
        assert!(check_kl_estimate(&[traj], &beta, 0.0).passed());
    }

    #[test]
    fn fit_rejects_escaped() {
        let mut traj = traj_from(|t| t, 5.0, 11);
        traj.escaped = true;
        assert!(matches!(
            fit_kl_envelope(&[traj], 0.0),
            Err(Error::UnboundedBundle(0))
        ));
    }

    #[test]
    fn fit_zero_trajectory() {
        let traj = traj_from(|_| 0.0, 5.0, 11);
        let beta = fit_kl_envelope(std::slice::from_ref(&traj), 0.0).unwrap();
        match &beta {
            KLFunction::ExpEnvelope { lambda, .. } => assert!(lambda.is_finite()),
            _ => panic!(),
        }
        assert!(check_kl_estimate(&[traj], &beta, 0.0).passed());
    }

    #[test]
    fn tabulated_fit_is_monotone_in_t() {
        let trajs = vec![
            traj_from(|t| 1.7 * (-0.8 * t).exp(), 6.0, 120),
            traj_from(|t| 0.4 * (-1.5 * t).exp(), 6.0, 120),
        ];
        let beta = fit_kl_envelope(&trajs, 0.0).unwrap();
        let tab = beta.tabulate(vecn::linspace(0.0, 3.0, 16), vecn::linspace(0.0, 6.0, 40));
        if let KLFunction::Tabulated { s_grid, t_grid, .. } = &tab {
            for s in s_grid {
                for w in t_grid.windows(2) {
                    assert!(tab.eval(*s, w[1]) <= tab.eval(*s, w[0]) + 1e-9);
                }
            }
        } else {
            panic!();
        }
    }
}

#[cfg(test)]
mod prop_tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        // fit -> check round trip on random exponential bundles
        #[test]
        fn fit_passes_own_bundle(
            scales in proptest::collection::vec(0.1f64..5.0, 1..4),
            rates in proptest::collection::vec(0.05f64..3.0, 1..4),
        ) {
            let n = scales.len().min(rates.len());
            let trajs: Vec<Trajectory> = (0..n)
                .map(|i| {
                    let c = scales[i];
                    let l = rates[i];
                    let times = crate::vecn::linspace(0.0, 4.0, 80);
                    let states = times.iter().map(|t| vec![c * (-l * t).exp()]).collect();
                    Trajectory { times, states, ..Default::default() }
                })
                .collect();
            let beta = fit_kl_envelope(&trajs, 0.0).unwrap();
            prop_assert!(check_kl_estimate(&trajs, &beta, 0.0).passed());
        }

        #[test]
        fn power_inverse_round_trip(a in 0.1f64..10.0, p in 0.2f64..4.0, s in 0.0f64..20.0) {
            let f = KFunction::power(a, p).unwrap();
            let back = f.inverse_eval(f.eval(s)).unwrap();
            prop_assert!((back - s).abs() <= 1e-8 * (1.0 + s));
        }
    }
}
