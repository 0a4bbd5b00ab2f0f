//! Sampling schedules, sample-and-hold (pi-) trajectory semantics with
//! measurement error and disturbances, classical closed-loop integration,
//! and the sampled robust-stabilization experiment together with its sizing
//! constants.
//!
//! Integration is fixed-step RK4 with a configurable number of substeps per
//! sampling interval; reproducibility of fixtures is preferred over
//! adaptivity, and the held control makes the dynamics smooth within each
//! interval anyway.

use std::sync::Arc;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clf::{argmin_over_grid, ContinuityClass, FeedbackLaw, SmoothClf};
use crate::error::{Error, Result};
use crate::nonsmooth::{annulus_inf, ball_sup, lipschitz_estimate, ContinuousClf, MoreauEnvelope};
use crate::systems::{ControlSet, ControlSystem, Trajectory};
use crate::vecn;

/// A partition `{t_i}` of `[0, T]`, strictly increasing from 0, truncated at
/// the first point at or beyond the horizon.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SamplingSchedule {
    pub times: Vec<f64>,
}

impl SamplingSchedule {
    pub fn from_times(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 || times[0] != 0.0 {
            return Err(Error::InvalidParams(
                "schedule needs at least two times starting at 0".into(),
            ));
        }
        if !times.windows(2).all(|w| w[1] > w[0]) {
            return Err(Error::InvalidParams("schedule times must strictly increase".into()));
        }
        Ok(SamplingSchedule { times })
    }

    /// `t_i = i h` up to the first point at or beyond `t_end`.
    pub fn uniform(h: f64, t_end: f64) -> Result<Self> {
        if !(h > 0.0 && h.is_finite() && t_end > 0.0) {
            return Err(Error::InvalidParams("uniform schedule needs h > 0, t_end > 0".into()));
        }
        let mut times = vec![0.0];
        let mut i = 0u64;
        while *times.last().unwrap() < t_end {
            i += 1;
            times.push(i as f64 * h);
        }
        Ok(SamplingSchedule { times })
    }

    /// Gaps drawn uniformly from `[h (1 - jitter), h (1 + jitter))`,
    /// deterministic per seed.
    pub fn jittered(h: f64, jitter: f64, seed: u64, t_end: f64) -> Result<Self> {
        if !(h > 0.0 && (0.0..1.0).contains(&jitter) && t_end > 0.0) {
            return Err(Error::InvalidParams(
                "jittered schedule needs h > 0, 0 <= jitter < 1, t_end > 0".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut times = vec![0.0];
        while *times.last().unwrap() < t_end {
            let gap = h * (1.0 + jitter * (2.0 * rng.gen::<f64>() - 1.0));
            let last = *times.last().unwrap();
            times.push(last + gap);
        }
        Ok(SamplingSchedule { times })
    }

    /// `d(pi)`: the largest gap.
    pub fn diameter(&self) -> f64 {
        self.times
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(0.0, f64::max)
    }

    /// The smallest gap.
    pub fn lower_diameter(&self) -> f64 {
        self.times
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::INFINITY, f64::min)
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }
}

/// Time/state-dependent vector signal used for measurement errors,
/// disturbances, and open-loop inputs. The declared `sup_bound` is exact for
/// every generator.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Signal {
    Zero,
    Constant { value: Vec<f64> },
    Sinusoid { amp: Vec<f64>, omega: f64, phase: f64 },
    /// Piecewise-constant with values `amp * xi`, `xi` drawn uniformly from
    /// `[-1, 1]` once per dwell interval, deterministic per seed.
    PiecewiseConstant { seed: u64, dwell: f64, amp: Vec<f64> },
    /// `magnitude * x / |x|`: the adversarial radially-outward direction.
    RadialOutward { magnitude: f64 },
    /// `-magnitude * sign(x[axis]) e_axis`: pushes the measured coordinate
    /// toward (and, when `|x[axis]| < magnitude`, across) zero. The worst
    /// case for feedback laws that switch on the sign of that coordinate.
    AxisFlip { magnitude: f64, axis: usize },
}

impl Signal {
    pub fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) {
        match self {
            Signal::Zero => out.fill(0.0),
            Signal::Constant { value } => out.copy_from_slice(value),
            Signal::Sinusoid { amp, omega, phase } => {
                let s = (omega * t + phase).sin();
                for (o, a) in out.iter_mut().zip(amp) {
                    *o = a * s;
                }
            }
            Signal::PiecewiseConstant { seed, dwell, amp } => {
                let idx = (t / dwell).floor().max(0.0) as u64;
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ idx.wrapping_mul(0x9e37_79b9));
                for (o, a) in out.iter_mut().zip(amp) {
                    *o = a * rng.gen_range(-1.0..=1.0);
                }
            }
            Signal::RadialOutward { magnitude } => {
                let n = vecn::norm(x);
                if n == 0.0 {
                    out.fill(0.0);
                } else {
                    for (o, xi) in out.iter_mut().zip(x) {
                        *o = magnitude * xi / n;
                    }
                }
            }
            Signal::AxisFlip { magnitude, axis } => {
                out.fill(0.0);
                let sign = if x[*axis] > 0.0 {
                    1.0
                } else if x[*axis] < 0.0 {
                    -1.0
                } else {
                    1.0
                };
                out[*axis] = -sign * magnitude;
            }
        }
    }

    pub fn sup_bound(&self) -> f64 {
        match self {
            Signal::Zero => 0.0,
            Signal::Constant { value } => vecn::norm(value),
            Signal::Sinusoid { amp, .. } => vecn::norm(amp),
            Signal::PiecewiseConstant { amp, .. } => vecn::norm(amp),
            Signal::RadialOutward { magnitude } => magnitude.abs(),
            Signal::AxisFlip { magnitude, .. } => magnitude.abs(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.sup_bound() == 0.0
    }
}

/// Measurement error `e` (applied to the state fed to the controller at
/// sample instants) and additive state disturbance `d`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub measurement: Signal,
    pub disturbance: Signal,
}

impl PerturbationSpec {
    pub fn none() -> Self {
        PerturbationSpec {
            measurement: Signal::Zero,
            disturbance: Signal::Zero,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct IntegratorCfg {
    /// RK4 substeps per sampling interval (at least 4).
    pub substeps: usize,
    pub blowup: f64,
}

impl Default for IntegratorCfg {
    fn default() -> Self {
        IntegratorCfg {
            substeps: 16,
            blowup: crate::systems::DEFAULT_BLOWUP_BOUND,
        }
    }
}

/// Optional CLF diagnostics recorded at sample instants.
#[derive(Clone)]
pub enum DiagClf {
    Smooth(SmoothClf),
    Envelope(Arc<MoreauEnvelope>),
}

#[derive(Clone)]
pub struct SimOptions {
    pub integrator: IntegratorCfg,
    pub diagnostics: Option<DiagClf>,
    /// Keep every `dense_stride`-th substep state (>= 1).
    pub dense_stride: usize,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            integrator: IntegratorCfg::default(),
            diagnostics: None,
            dense_stride: 1,
        }
    }
}

/// Record of one sample-and-hold run.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct PiTrajectory {
    /// Dense output: times, states, and a sample-instant flag per row.
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub is_sample: Vec<bool>,
    /// Held control per executed sampling interval.
    pub held_controls: Vec<Vec<f64>>,
    /// State at each executed sample instant.
    pub sample_times: Vec<f64>,
    pub sample_states: Vec<Vec<f64>>,
    /// `V` (and `V_alpha` for envelope diagnostics) at sample instants.
    pub diag_v: Vec<f64>,
    pub diag_v_alpha: Vec<f64>,
    pub escaped: bool,
    pub escape_time: Option<f64>,
}

impl PiTrajectory {
    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("nonempty pi-trajectory")
    }

    pub fn as_trajectory(&self) -> Trajectory {
        Trajectory {
            times: self.times.clone(),
            states: self.states.clone(),
            controls: Vec::new(),
            escaped: self.escaped,
            escape_time: self.escape_time,
        }
    }
}

enum StepOutcome {
    Ok,
    Escaped,
}

type DerivFn<'a> = &'a mut dyn FnMut(f64, &[f64], &mut [f64]);

/// One RK4 step of `xdot = deriv(t, x)`; returns `Escaped` when the state
/// leaves the blow-up ball or the dynamics overflow while already large.
fn rk4_step(
    deriv: DerivFn<'_>,
    t: f64,
    h: f64,
    x: &mut [f64],
    blowup: f64,
    scratch: &mut [Vec<f64>],
) -> Result<StepOutcome> {
    let n = x.len();
    let (k1, rest) = scratch.split_at_mut(1);
    let (k2, rest) = rest.split_at_mut(1);
    let (k3, rest) = rest.split_at_mut(1);
    let (k4, rest) = rest.split_at_mut(1);
    let tmp = &mut rest[0];
    let (k1, k2, k3, k4) = (&mut k1[0], &mut k2[0], &mut k3[0], &mut k4[0]);

    deriv(t, x, k1);
    vecn::add_scaled(x, 0.5 * h, k1, tmp);
    deriv(t + 0.5 * h, tmp, k2);
    vecn::add_scaled(x, 0.5 * h, k2, tmp);
    deriv(t + 0.5 * h, tmp, k3);
    vecn::add_scaled(x, h, k3, tmp);
    deriv(t + h, tmp, k4);

    let mut finite = true;
    for i in 0..n {
        let dx = (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]) / 6.0;
        x[i] += h * dx;
        finite &= x[i].is_finite();
    }
    if !finite {
        // overflow while already heading out of the blow-up ball counts as
        // escape; a NaN at a benign state is a modeling bug
        let pre_large = k1.iter().any(|v| !v.is_finite() || v.abs() > blowup);
        if pre_large {
            return Ok(StepOutcome::Escaped);
        }
        return Err(Error::NonFiniteState {
            t,
            context: "integration produced a non-finite state",
        });
    }
    if vecn::norm(x) > blowup {
        return Ok(StepOutcome::Escaped);
    }
    Ok(StepOutcome::Ok)
}

fn diag_values(diag: &Option<DiagClf>, x: &[f64]) -> Result<(Option<f64>, Option<f64>)> {
    match diag {
        None => Ok((None, None)),
        Some(DiagClf::Smooth(clf)) => Ok((Some(clf.value(x)), None)),
        Some(DiagClf::Envelope(env)) => {
            let v = env.base.value(x);
            let (va, _) = env.inf_convolve(x)?;
            Ok((Some(v), Some(va)))
        }
    }
}

/// Solve the sample-and-hold closed loop: on each `[t_i, t_{i+1})` the
/// control is frozen at `k(x(t_i) + e(t_i))` and the state obeys
/// `xdot = f(x, u_i) + d(t)`, chaining interval endpoints.
pub fn simulate_pi_trajectory(
    sys: &ControlSystem,
    law: &FeedbackLaw,
    schedule: &SamplingSchedule,
    x0: &[f64],
    pert: &PerturbationSpec,
    opts: &SimOptions,
) -> Result<PiTrajectory> {
    if x0.len() != sys.state_dim {
        return Err(Error::DimensionMismatch {
            what: "initial state",
            expected: sys.state_dim,
            got: x0.len(),
        });
    }
    if law.state_dim != sys.state_dim || law.control_dim != sys.control_dim {
        return Err(Error::DimensionMismatch {
            what: "feedback law",
            expected: sys.state_dim,
            got: law.state_dim,
        });
    }
    if opts.integrator.substeps < 4 {
        return Err(Error::InvalidParams("at least 4 substeps per interval".into()));
    }
    let n = sys.state_dim;
    let m = sys.control_dim;
    let stride = opts.dense_stride.max(1);
    let blowup = opts.integrator.blowup;

    let mut out = PiTrajectory::default();
    let mut x = x0.to_vec();
    let mut scratch = vec![vec![0.0; n]; 5];
    let mut e = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut u = vec![0.0; m];

    out.times.push(0.0);
    out.states.push(x.clone());
    out.is_sample.push(true);

    'outer: for w in schedule.times.windows(2) {
        let (t_i, t_next) = (w[0], w[1]);
        pert.measurement.eval(t_i, &x, &mut e);
        let measured: Vec<f64> = x.iter().zip(&e).map(|(a, b)| a + b).collect();
        law.eval_into(&measured, &mut u)?;
        out.sample_times.push(t_i);
        out.sample_states.push(x.clone());
        out.held_controls.push(u.clone());
        let (v, va) = diag_values(&opts.diagnostics, &x)?;
        if let Some(v) = v {
            out.diag_v.push(v);
        }
        if let Some(va) = va {
            out.diag_v_alpha.push(va);
        }

        let h = (t_next - t_i) / opts.integrator.substeps as f64;
        for s in 0..opts.integrator.substeps {
            let t = t_i + s as f64 * h;
            let mut deriv = |tt: f64, xx: &[f64], dx: &mut [f64]| {
                sys.eval_into(xx, &u, dx);
                pert.disturbance.eval(tt, xx, &mut d);
                for i in 0..n {
                    dx[i] += d[i];
                }
            };
            match rk4_step(&mut deriv, t, h, &mut x, blowup, &mut scratch)? {
                StepOutcome::Ok => {}
                StepOutcome::Escaped => {
                    out.escaped = true;
                    out.escape_time = Some(t + h);
                    out.times.push(t + h);
                    out.states.push(x.clone());
                    out.is_sample.push(false);
                    break 'outer;
                }
            }
            if (s + 1) % stride == 0 || s + 1 == opts.integrator.substeps {
                out.times.push(t_i + (s + 1) as f64 * h);
                out.states.push(x.clone());
                out.is_sample.push(s + 1 == opts.integrator.substeps);
            }
        }
    }
    Ok(out)
}

/// Classical (non-sampled) closed-loop solution `xdot = f(x, k(x))` by
/// fixed-step RK4. Refused for measurable-discontinuous laws, whose
/// closed-loop semantics are defined through pi-trajectories instead.
pub fn simulate_classical(
    sys: &ControlSystem,
    law: &FeedbackLaw,
    x0: &[f64],
    t_end: f64,
    step: f64,
) -> Result<Trajectory> {
    if law.continuity == ContinuityClass::MeasurableDiscontinuous {
        return Err(Error::RefusedDiscontinuous);
    }
    if x0.len() != sys.state_dim {
        return Err(Error::DimensionMismatch {
            what: "initial state",
            expected: sys.state_dim,
            got: x0.len(),
        });
    }
    if !(step > 0.0 && t_end > 0.0) {
        return Err(Error::InvalidParams("need step > 0 and t_end > 0".into()));
    }
    let n = sys.state_dim;
    let m = sys.control_dim;
    let steps = (t_end / step).ceil() as usize;
    let h = t_end / steps as f64;

    let mut traj = Trajectory::default();
    let mut x = x0.to_vec();
    let mut scratch = vec![vec![0.0; n]; 5];
    traj.times.push(0.0);
    traj.states.push(x.clone());

    for s in 0..steps {
        let t = s as f64 * h;
        let mut u0 = vec![0.0; m];
        law.eval_into(&x, &mut u0)?;
        traj.controls.push(u0);
        let mut u = vec![0.0; m];
        let mut law_err = false;
        let mut deriv = |_tt: f64, xx: &[f64], dx: &mut [f64]| {
            // closed loop: the control is re-evaluated at every stage
            if law.eval_into(xx, &mut u).is_err() {
                law_err = true;
                dx.fill(f64::NAN);
                return;
            }
            sys.eval_into(xx, &u, dx);
        };
        let outcome = rk4_step(&mut deriv, t, h, &mut x, sys.blowup_bound, &mut scratch);
        if law_err {
            // surface the law's own error rather than the NaN it induced
            let mut probe = vec![0.0; m];
            law.eval_into(traj.states.last().unwrap(), &mut probe)?;
        }
        match outcome? {
            StepOutcome::Ok => {
                traj.times.push(t + h);
                traj.states.push(x.clone());
            }
            StepOutcome::Escaped => {
                traj.times.push(t + h);
                traj.states.push(x.clone());
                traj.escaped = true;
                traj.escape_time = Some(t + h);
                break;
            }
        }
    }
    Ok(traj)
}

/// Open-loop solution `xdot = f(x, u(t))` for an exogenous input signal,
/// recording the input at each step start.
pub fn simulate_with_input(
    sys: &ControlSystem,
    input: &Signal,
    x0: &[f64],
    t_end: f64,
    step: f64,
) -> Result<Trajectory> {
    if x0.len() != sys.state_dim {
        return Err(Error::DimensionMismatch {
            what: "initial state",
            expected: sys.state_dim,
            got: x0.len(),
        });
    }
    if !(step > 0.0 && t_end > 0.0) {
        return Err(Error::InvalidParams("need step > 0 and t_end > 0".into()));
    }
    let n = sys.state_dim;
    let m = sys.control_dim;
    let steps = (t_end / step).ceil() as usize;
    let h = t_end / steps as f64;

    let mut traj = Trajectory::default();
    let mut x = x0.to_vec();
    let mut scratch = vec![vec![0.0; n]; 5];
    let mut u = vec![0.0; m];
    traj.times.push(0.0);
    traj.states.push(x.clone());
    for s in 0..steps {
        let t = s as f64 * h;
        input.eval(t, &x, &mut u);
        traj.controls.push(u.clone());
        let mut ustage = vec![0.0; m];
        let mut deriv = |tt: f64, xx: &[f64], dx: &mut [f64]| {
            input.eval(tt, xx, &mut ustage);
            sys.eval_into(xx, &ustage, dx);
        };
        match rk4_step(&mut deriv, t, h, &mut x, sys.blowup_bound, &mut scratch)? {
            StepOutcome::Ok => {
                traj.times.push(t + h);
                traj.states.push(x.clone());
            }
            StepOutcome::Escaped => {
                traj.times.push(t + h);
                traj.states.push(x.clone());
                traj.escaped = true;
                traj.escape_time = Some(t + h);
                break;
            }
        }
    }
    Ok(traj)
}

/// How the Lipschitz constant of the envelope is obtained: measured from
/// difference quotients (default), or the closed-form bound
/// `sqrt(2 sup V) / alpha + R / alpha^2`, which is far more conservative.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LipschitzMode {
    Measured,
    Formula,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConstantsCfg {
    pub alpha_override: Option<f64>,
    pub lipschitz: LipschitzMode,
    /// Fraction of `gamma(r)` the envelope decrease must achieve.
    pub decrease_fraction: f64,
    /// `T_bound = t_bound_factor * gamma(R) / delta_rate`.
    pub t_bound_factor: f64,
    pub band_lo_override: Option<f64>,
    pub band_hi_override: Option<f64>,
    pub seed: u64,
}

impl Default for ConstantsCfg {
    fn default() -> Self {
        ConstantsCfg {
            alpha_override: None,
            lipschitz: LipschitzMode::Measured,
            decrease_fraction: 0.5,
            t_bound_factor: 2.0,
            band_lo_override: None,
            band_hi_override: None,
            seed: 0x5a11,
        }
    }
}

/// Sizing constants for the sampled stabilization argument on the annulus
/// `r <= |x| <= R`:
///
/// * `gamma(s)` = infimum of the rate `W` over `s <= |x| <= R`; requires
///   `2 gamma(r) < gamma(R)` strictly,
/// * `alpha` small enough that the envelope's smoothing scale does not eat
///   the decrease (`L_V * sqrt(2 sup V) * alpha <= gamma(r) / 16`),
/// * `c` a Lipschitz constant for `V_alpha` on the working ball,
/// * `m` a bound on `|f|` over the ball times the control set,
/// * `delta_rate = gamma(r) / (8 c m)` the certified decrease rate,
/// * `kappa = delta_rate / (2 c)` coupling measurement error to the
///   schedule's lower diameter in the worst-case argument,
/// * `t_bound = 2 gamma(R) / delta_rate` the entry horizon,
/// * `band_lo/band_hi` the admissible schedule-gap range; the upper end
///   defaults to the hold-drift bound `r / (2 m)`, the lower end to a
///   quarter of that,
/// * `eps_bound = m * band_hi / 20`, a decade below the smallest
///   measurement error that can persistently flip a sampled branch decision
///   (the chattering/pinning scale `m * d(pi)`).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthesisConstants {
    pub r: f64,
    pub big_r: f64,
    pub alpha: f64,
    pub gamma_r: f64,
    pub gamma_big_r: f64,
    pub sup_v: f64,
    pub s_br: f64,
    pub lipschitz_c: f64,
    pub velocity_bound: f64,
    pub delta_rate: f64,
    pub kappa: f64,
    pub t_bound: f64,
    pub eps_bound: f64,
    pub band_lo: f64,
    pub band_hi: f64,
    pub decrease_fraction: f64,
}

pub fn constants_for(
    clf: &ContinuousClf,
    sys: &ControlSystem,
    u0: &ControlSet,
    r: f64,
    big_r: f64,
    cfg: &ConstantsCfg,
) -> Result<SynthesisConstants> {
    if !(0.0 < r && r < big_r) {
        return Err(Error::PreconditionFailed(format!("need 0 < r < R, got r={r}, R={big_r}")));
    }
    let n = sys.state_dim;
    let value = clf.value_fn();
    let rate = {
        let clf = clf.clone();
        move |x: &[f64]| clf.rate(x)
    };
    let gamma_r = annulus_inf(&rate, n, r, big_r);
    let gamma_big_r = annulus_inf(&rate, n, big_r, big_r);
    if 2.0 * gamma_r >= gamma_big_r {
        return Err(Error::PreconditionFailed(format!(
            "2 gamma(r) = {} must be strictly below gamma(R) = {}",
            2.0 * gamma_r,
            gamma_big_r
        )));
    }
    let sup_v = ball_sup(&move |x: &[f64]| value(x), n, big_r);
    let s_br = (2.0 * sup_v).sqrt();
    let value2 = clf.value_fn();
    let lip_v = lipschitz_estimate(&move |x: &[f64]| value2(x), n, big_r, cfg.seed);
    let alpha = match cfg.alpha_override {
        Some(a) if a > 0.0 => a,
        Some(a) => return Err(Error::InvalidParams(format!("alpha must be > 0, got {a}"))),
        None => (gamma_r / (16.0 * lip_v * s_br)).min(0.25 * r),
    };

    // velocity bound over the working ball x control grid
    let grid = u0.grid();
    let mut velocity_bound = 0.0f64;
    {
        let mut f = vec![0.0; n];
        for rad in vecn::linspace(big_r / 16.0, big_r, 16) {
            for dir in sample_directions(n) {
                let x: Vec<f64> = dir.iter().map(|v| v * rad).collect();
                for u in &grid {
                    sys.eval_into(&x, u, &mut f);
                    velocity_bound = velocity_bound.max(vecn::norm(&f));
                }
            }
        }
    }
    if velocity_bound <= 0.0 {
        return Err(Error::PreconditionFailed("velocity bound came out zero".into()));
    }

    let lipschitz_c = match cfg.lipschitz {
        LipschitzMode::Formula => s_br / alpha + big_r / (alpha * alpha),
        LipschitzMode::Measured => {
            let env = MoreauEnvelope::new(clf.clone(), alpha)?.without_cache();
            let est = lipschitz_estimate(
                &move |x: &[f64]| env.inf_convolve(x).map(|p| p.0).unwrap_or(f64::NAN),
                n,
                big_r,
                cfg.seed ^ 0xe57,
            );
            if !est.is_finite() || est <= 0.0 {
                return Err(Error::PreconditionFailed("envelope Lipschitz estimate failed".into()));
            }
            est
        }
    };

    let delta_rate = gamma_r / (8.0 * lipschitz_c * velocity_bound);
    let kappa = delta_rate / (2.0 * lipschitz_c);
    let t_bound = cfg.t_bound_factor * gamma_big_r / delta_rate;
    let band_hi = cfg.band_hi_override.unwrap_or(r / (2.0 * velocity_bound));
    let band_lo = cfg.band_lo_override.unwrap_or(band_hi / 4.0);
    // a measurement error can defeat a sample-and-hold law only once it can
    // flip the controller's branch decision persistently, which takes an
    // error comparable to the per-interval drift m * d(pi); the admissible
    // bound sits a decade below that pinning scale at the band's upper gap
    let eps_bound = velocity_bound * band_hi / 20.0;

    let constants = SynthesisConstants {
        r,
        big_r,
        alpha,
        gamma_r,
        gamma_big_r,
        sup_v,
        s_br,
        lipschitz_c,
        velocity_bound,
        delta_rate,
        kappa,
        t_bound,
        eps_bound,
        band_lo,
        band_hi,
        decrease_fraction: cfg.decrease_fraction,
    };
    for (name, v) in [
        ("alpha", constants.alpha),
        ("gamma_r", constants.gamma_r),
        ("gamma_R", constants.gamma_big_r),
        ("c", constants.lipschitz_c),
        ("m", constants.velocity_bound),
        ("delta_rate", constants.delta_rate),
        ("kappa", constants.kappa),
        ("t_bound", constants.t_bound),
        ("eps_bound", constants.eps_bound),
        ("band_lo", constants.band_lo),
        ("band_hi", constants.band_hi),
    ] {
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::PreconditionFailed(format!("constant {name} = {v} not positive")));
        }
    }
    Ok(constants)
}

fn sample_directions(n: usize) -> Vec<Vec<f64>> {
    match n {
        1 => vec![vec![1.0], vec![-1.0]],
        2 => (0..32)
            .map(|k| {
                let th = 2.0 * std::f64::consts::PI * (k as f64) / 32.0;
                vec![th.cos(), th.sin()]
            })
            .collect(),
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(0xd1e5);
            let mut dirs: Vec<Vec<f64>> = (0..64)
                .map(|_| {
                    let d: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0f64..1.0)).collect();
                    let nd = vecn::norm(&d).max(1e-12);
                    d.into_iter().map(|v| v / nd).collect()
                })
                .collect();
            for i in 0..n {
                for sgn in [1.0, -1.0] {
                    let mut e = vec![0.0; n];
                    e[i] = sgn;
                    dirs.push(e);
                }
            }
            dirs
        }
    }
}

/// Schedule generator for experiment sweeps.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleSpec {
    Uniform { h: f64 },
    Jittered { h: f64, jitter: f64, seed: u64 },
}

impl ScheduleSpec {
    pub fn build(&self, t_end: f64) -> Result<SamplingSchedule> {
        match self {
            ScheduleSpec::Uniform { h } => SamplingSchedule::uniform(*h, t_end),
            ScheduleSpec::Jittered { h, jitter, seed } => {
                SamplingSchedule::jittered(*h, *jitter, *seed, t_end)
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NamedPerturbation {
    pub name: String,
    pub spec: PerturbationSpec,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub r: f64,
    pub big_r: f64,
    pub x0s: Vec<Vec<f64>>,
    pub schedules: Vec<ScheduleSpec>,
    pub perturbations: Vec<NamedPerturbation>,
    /// RK4 substeps per sampling interval.
    pub substeps: usize,
    /// The simulated horizon is `max(2 t_bound, horizon)`.
    pub horizon: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellResult {
    pub x0_index: usize,
    pub schedule_index: usize,
    pub perturbation: String,
    pub band_compliant: bool,
    pub schedule_diameter: f64,
    pub schedule_lower_diameter: f64,
    pub contained: bool,
    pub max_norm: f64,
    pub entered_by_t_bound: bool,
    pub in_br_from_t_bound: bool,
    pub last_time_outside_br: f64,
    /// Sample pairs outside `B_r` where the envelope failed to decrease at
    /// the certified rate (tracked only for zero measurement error).
    pub decrease_violations: usize,
    pub decrease_samples: usize,
    pub escaped: bool,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub constants: SynthesisConstants,
    pub t_end: f64,
    pub cells: Vec<CellResult>,
}

impl ExperimentReport {
    pub fn compliant_cells(&self) -> impl Iterator<Item = &CellResult> {
        self.cells.iter().filter(|c| c.band_compliant)
    }

    pub fn all_compliant_passed(&self) -> bool {
        let mut any = false;
        for c in self.compliant_cells() {
            any = true;
            if !c.passed {
                return false;
            }
        }
        any
    }

    pub fn any_failure(&self) -> bool {
        self.cells.iter().any(|c| !c.passed)
    }
}

/// Run the sampled stabilization experiment: proximal feedback from the
/// envelope, every (initial state, schedule, perturbation) cell simulated
/// independently, checking containment in `B_R` for all time and entry into
/// `B_r` by `t_bound` (staying there through the horizon).
///
/// Non-compliant schedules and oversized errors are run rather than
/// rejected; each cell records whether it satisfied the band so failures
/// can be attributed to band violations rather than genuine
/// counterexamples.
pub fn robust_stabilization_experiment(
    sys: &ControlSystem,
    env: &Arc<MoreauEnvelope>,
    u0: &ControlSet,
    constants: &SynthesisConstants,
    spec: &ExperimentSpec,
) -> Result<ExperimentReport> {
    use rayon::prelude::*;

    if spec.substeps < 4 {
        return Err(Error::InvalidParams("at least 4 substeps per interval".into()));
    }
    let t_end = (2.0 * constants.t_bound).max(spec.horizon);
    let grid = Arc::new(u0.grid());

    let schedules: Vec<SamplingSchedule> = spec
        .schedules
        .iter()
        .map(|s| s.build(t_end))
        .collect::<Result<_>>()?;

    let mut cells: Vec<(usize, usize, usize)> = Vec::new();
    for xi in 0..spec.x0s.len() {
        for si in 0..schedules.len() {
            for pi in 0..spec.perturbations.len() {
                cells.push((xi, si, pi));
            }
        }
    }

    let results: Vec<Result<CellResult>> = cells
        .par_iter()
        .map(|&(xi, si, pi)| {
            run_cell(
                sys,
                env,
                &grid,
                constants,
                spec,
                xi,
                &schedules[si],
                si,
                &spec.perturbations[pi],
            )
        })
        .collect();

    let mut out = Vec::with_capacity(results.len());
    for r in results {
        out.push(r?);
    }
    Ok(ExperimentReport {
        constants: constants.clone(),
        t_end,
        cells: out,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_cell(
    sys: &ControlSystem,
    env: &Arc<MoreauEnvelope>,
    grid: &Arc<Vec<Vec<f64>>>,
    constants: &SynthesisConstants,
    spec: &ExperimentSpec,
    x0_index: usize,
    schedule: &SamplingSchedule,
    schedule_index: usize,
    pert: &NamedPerturbation,
) -> Result<CellResult> {
    let n = sys.state_dim;
    let r = constants.r;
    let big_r = constants.big_r;
    let eps = pert.spec.measurement.sup_bound();
    let d_pi = schedule.diameter();
    let lo_pi = schedule.lower_diameter();
    let band_compliant = lo_pi >= constants.band_lo - 1e-12
        && d_pi <= constants.band_hi + 1e-12
        && eps <= constants.eps_bound + 1e-15;
    let track_decrease = pert.spec.measurement.is_zero();

    let mut x = spec.x0s[x0_index].clone();
    let mut scratch = vec![vec![0.0; n]; 5];
    let mut e = vec![0.0; n];
    let mut d = vec![0.0; n];

    let mut max_norm = vecn::norm(&x);
    let mut last_outside = if max_norm > r { 0.0 } else { -1.0 };
    let mut max_norm_after_tbound = 0.0f64;
    let mut escaped = false;
    let mut decrease_violations = 0usize;
    let mut decrease_samples = 0usize;
    let mut prev_sample: Option<(f64, f64)> = None; // (t_i, V_alpha(x(t_i)))

    'outer: for w in schedule.times.windows(2) {
        let (t_i, t_next) = (w[0], w[1]);
        pert.spec.measurement.eval(t_i, &x, &mut e);
        let measured: Vec<f64> = x.iter().zip(&e).map(|(a, b)| a + b).collect();
        let (va_meas, y) = env.inf_convolve(&measured)?;
        let a2 = env.alpha * env.alpha;
        let zeta: Vec<f64> = measured
            .iter()
            .zip(&y)
            .map(|(xi, yi)| (xi - yi) / a2)
            .collect();
        let idx = argmin_over_grid(sys, &zeta, &measured, grid);
        let u = &grid[idx];

        if track_decrease {
            // measured == true state here, so va_meas is V_alpha(x(t_i))
            let nx = vecn::norm(&x);
            if let Some((t_prev, va_prev)) = prev_sample {
                if nx > r {
                    decrease_samples += 1;
                    let required = va_prev - constants.delta_rate * (t_i - t_prev);
                    if va_meas > required + 1e-9 * (1.0 + va_prev.abs()) {
                        decrease_violations += 1;
                    }
                }
            }
            prev_sample = Some((t_i, va_meas));
        }

        let h = (t_next - t_i) / spec.substeps as f64;
        for s in 0..spec.substeps {
            let t = t_i + s as f64 * h;
            let mut deriv = |tt: f64, xx: &[f64], dx: &mut [f64]| {
                sys.eval_into(xx, u, dx);
                pert.spec.disturbance.eval(tt, xx, &mut d);
                for i in 0..n {
                    dx[i] += d[i];
                }
            };
            match rk4_step(&mut deriv, t, h, &mut x, sys.blowup_bound, &mut scratch)? {
                StepOutcome::Ok => {}
                StepOutcome::Escaped => {
                    escaped = true;
                    max_norm = f64::INFINITY;
                    last_outside = t + h;
                    break 'outer;
                }
            }
            let nx = vecn::norm(&x);
            max_norm = max_norm.max(nx);
            if nx > r {
                last_outside = t + h;
            }
            if t + h >= constants.t_bound {
                max_norm_after_tbound = max_norm_after_tbound.max(nx);
            }
        }
    }

    let contained = !escaped && max_norm <= big_r + 1e-12;
    let in_br_from_t_bound = !escaped && max_norm_after_tbound <= r + 1e-12;
    let entered_by_t_bound = !escaped && last_outside <= constants.t_bound;
    let passed = contained && in_br_from_t_bound && entered_by_t_bound;

    Ok(CellResult {
        x0_index,
        schedule_index,
        perturbation: pert.name.clone(),
        band_compliant,
        schedule_diameter: d_pi,
        schedule_lower_diameter: lo_pi,
        contained,
        max_norm,
        entered_by_t_bound,
        in_br_from_t_bound,
        last_time_outside_br: last_outside,
        decrease_violations,
        decrease_samples,
        escaped,
        passed,
    })
}

/// Equally spaced initial states on the circle of the given radius
/// (two-dimensional systems).
pub fn circle_initial_states(count: usize, radius: f64) -> Vec<Vec<f64>> {
    (0..count)
        .map(|k| {
            let th = 2.0 * std::f64::consts::PI * (k as f64) / (count as f64);
            vec![radius * th.cos(), radius * th.sin()]
        })
        .collect()
}
