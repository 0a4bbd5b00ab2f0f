//! Continuous (nonsmooth) control-Lyapunov functions, proximal
//! subgradients, the inf-convolution (Moreau envelope) regularization
//! `V_a(x) = inf_y [V(y) + |x - y|^2 / (2 a^2)]`, and the proximal
//! feedback built by aiming along `zeta_a(x) = (x - y_a(x)) / a^2`.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clf::{argmin_over_grid, ContinuityClass, FeedbackLaw, Provenance, ScalarFieldFn};
use crate::comparison::KFunction;
use crate::error::{Error, Result};
use crate::systems::{ControlSet, ControlSystem};
use crate::vecn;

/// A merely-continuous CLF: value, positive-definite decrease rate `W`,
/// properness sandwich, and the control-magnitude bound `sigma` from its
/// decrease condition (metadata; the grid checks take an explicit compact
/// control set).
#[derive(Clone)]
pub struct ContinuousClf {
    pub dim: usize,
    value: ScalarFieldFn,
    rate: ScalarFieldFn,
    pub sandwich: (KFunction, KFunction),
    pub sigma: KFunction,
}

impl fmt::Debug for ContinuousClf {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ContinuousClf")
            .field("dim", &self.dim)
            .finish()
    }
}

impl ContinuousClf {
    pub fn new(
        dim: usize,
        value: ScalarFieldFn,
        rate: ScalarFieldFn,
        sandwich: (KFunction, KFunction),
        sigma: KFunction,
    ) -> Self {
        ContinuousClf {
            dim,
            value,
            rate,
            sandwich,
            sigma,
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        (self.value)(x)
    }

    pub fn rate(&self, x: &[f64]) -> f64 {
        (self.rate)(x)
    }

    pub fn value_fn(&self) -> ScalarFieldFn {
        self.value.clone()
    }

    /// `V(x) = |x|` with `W(x) = |x|/2`.
    pub fn norm_clf(dim: usize) -> Self {
        ContinuousClf::new(
            dim,
            Arc::new(|x: &[f64]| vecn::norm(x)),
            Arc::new(|x: &[f64]| 0.5 * vecn::norm(x)),
            (
                KFunction::power(1.0, 1.0).unwrap(),
                KFunction::power(1.0, 1.0).unwrap(),
            ),
            KFunction::identity(),
        )
    }

    /// `V(x) = |x|^2 / 2` viewed as a continuous CLF.
    pub fn quadratic(dim: usize) -> Self {
        ContinuousClf::new(
            dim,
            Arc::new(|x: &[f64]| 0.5 * vecn::dot(x, x)),
            Arc::new(|x: &[f64]| 0.5 * vecn::dot(x, x)),
            (
                KFunction::power(0.5, 2.0).unwrap(),
                KFunction::power(0.5, 2.0).unwrap(),
            ),
            KFunction::identity(),
        )
    }
}

/// The planar CLF for the circles system:
/// `V(x1, x2) = (x1^2 + x2^2) / (sqrt(x1^2 + x2^2) + |x1|)`, `V(0) = 0`,
/// with decrease rate `W(x) = |x|^2 / 2`. Continuous, 1-homogeneous, not
/// differentiable on the line `x1 = 0`.
pub fn artstein_clf() -> ContinuousClf {
    ContinuousClf::new(
        2,
        Arc::new(|x: &[f64]| artstein_value(x)),
        Arc::new(|x: &[f64]| 0.5 * vecn::dot(x, x)),
        (
            KFunction::power(0.5, 1.0).unwrap(),
            KFunction::power(1.0, 1.0).unwrap(),
        ),
        KFunction::identity(),
    )
}

fn artstein_value(x: &[f64]) -> f64 {
    let rho2 = x[0] * x[0] + x[1] * x[1];
    if rho2 == 0.0 {
        return 0.0;
    }
    let rho = rho2.sqrt();
    rho2 / (rho + x[0].abs())
}

/// Smooth view of the circles CLF using its formal gradient with the
/// convention `sign(0) = 0` on the kink line; the decrease check then fails
/// exactly on `x1 = 0`, which is the point of the example.
pub fn artstein_clf_formal() -> crate::clf::SmoothClf {
    let value: ScalarFieldFn = Arc::new(|x: &[f64]| artstein_value(x));
    let gradient: crate::clf::GradientFn = Arc::new(|x, out| {
        let rho2 = x[0] * x[0] + x[1] * x[1];
        if rho2 == 0.0 {
            out.fill(0.0);
            return;
        }
        let rho = rho2.sqrt();
        let den = rho + x[0].abs();
        let s = if x[0] > 0.0 {
            1.0
        } else if x[0] < 0.0 {
            -1.0
        } else {
            0.0
        };
        out[0] = (2.0 * x[0] * den - rho2 * (x[0] / rho + s)) / (den * den);
        out[1] = (2.0 * x[1] * den - rho2 * (x[1] / rho)) / (den * den);
    });
    let rate: ScalarFieldFn = Arc::new(|x: &[f64]| 0.5 * vecn::dot(x, x));
    crate::clf::SmoothClf::new(
        2,
        value,
        gradient,
        rate,
        (
            KFunction::power(0.5, 1.0).unwrap(),
            KFunction::power(1.0, 1.0).unwrap(),
        ),
    )
}

/// Tuning for the envelope minimizer search. Defaults match the documented
/// construction: pattern search seeded at `x` plus three random restarts,
/// deterministic per query point.
#[derive(Clone, Copy, Debug)]
pub struct ProxParams {
    pub restarts: usize,
    /// Evaluation budget per query before `NonConvergence`.
    pub budget: usize,
    /// Absolute floor for the pattern-search step.
    pub step_floor: f64,
}

impl Default for ProxParams {
    fn default() -> Self {
        ProxParams {
            restarts: 3,
            budget: 200_000,
            step_floor: 1e-9,
        }
    }
}

/// Moreau envelope of a continuous CLF at regularization scale `alpha`.
///
/// Any minimizer satisfies `|y - x|^2 / (2 a^2) <= V(x)`, so the search is
/// confined to the ball `|y - x| <= sqrt(2) a sqrt(V(x))`, which makes it
/// compact. Computed minimizers are cached (bounded; concurrent reads are
/// cheap, writes serialized) unless caching is disabled.
type MinimizerCache = Mutex<HashMap<Box<[u64]>, (f64, Vec<f64>)>>;

pub struct MoreauEnvelope {
    pub base: ContinuousClf,
    pub alpha: f64,
    pub params: ProxParams,
    cache: Option<MinimizerCache>,
    cache_cap: usize,
}

impl fmt::Debug for MoreauEnvelope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MoreauEnvelope")
            .field("alpha", &self.alpha)
            .finish()
    }
}

impl MoreauEnvelope {
    pub fn new(base: ContinuousClf, alpha: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::InvalidParams(format!("alpha must be > 0, got {alpha}")));
        }
        Ok(MoreauEnvelope {
            base,
            alpha,
            params: ProxParams::default(),
            cache: Some(Mutex::new(HashMap::new())),
            cache_cap: 1 << 18,
        })
    }

    pub fn with_params(mut self, params: ProxParams) -> Self {
        self.params = params;
        self
    }

    pub fn without_cache(mut self) -> Self {
        self.cache = None;
        self
    }

    /// `V_a(x)` and the found minimizer `y_a(x)`.
    pub fn inf_convolve(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        if vecn::norm(x) == 0.0 {
            return Ok((0.0, vec![0.0; x.len()]));
        }
        if let Some(cache) = &self.cache {
            let key: Box<[u64]> = x.iter().map(|v| v.to_bits()).collect();
            if let Some(hit) = cache.lock().unwrap().get(&key) {
                return Ok(hit.clone());
            }
            let out = self.search(x)?;
            let mut guard = cache.lock().unwrap();
            if guard.len() < self.cache_cap {
                guard.insert(key, out.clone());
            }
            Ok(out)
        } else {
            self.search(x)
        }
    }

    /// The envelope's aiming vector `zeta_a(x) = (x - y_a(x)) / a^2`; equals
    /// the gradient of `V_a` wherever the envelope is differentiable, and is
    /// a proximal subgradient of `V` at `y_a(x)` in general.
    pub fn proximal_aim(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (_, y) = self.inf_convolve(x)?;
        let a2 = self.alpha * self.alpha;
        Ok(x.iter().zip(&y).map(|(xi, yi)| (xi - yi) / a2).collect())
    }

    fn objective(&self, x: &[f64], y: &[f64]) -> f64 {
        let mut d2 = 0.0;
        for (a, b) in x.iter().zip(y) {
            d2 += (a - b) * (a - b);
        }
        self.base.value(y) + d2 / (2.0 * self.alpha * self.alpha)
    }

    fn search(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let n = x.len();
        let vx = self.base.value(x);
        let radius = (2.0f64).sqrt() * self.alpha * vx.max(0.0).sqrt();
        if radius == 0.0 {
            return Ok((vx, x.to_vec()));
        }
        let step_min = (1e-9 * (1.0 + radius)).max(self.params.step_floor * 1e-3);
        let mut evals = 0usize;

        let dist_to_x = |y: &[f64]| {
            let mut d2 = 0.0;
            for (a, b) in y.iter().zip(x) {
                d2 += (a - b) * (a - b);
            }
            d2.sqrt()
        };

        // candidate minimizers: a damped-gradient pass from x, plus seeded
        // random restarts inside the search ball
        let mut rng = ChaCha8Rng::seed_from_u64(vecn::bits_fold(x) ^ 0x6d6f_7265_6175);
        let mut best_psi = f64::INFINITY;
        let mut best_dist = f64::INFINITY;
        let mut best_y = x.to_vec();

        let a2 = self.alpha * self.alpha;
        let h = (1e-6 * self.alpha * (1.0 + vecn::norm(x))).max(1e-12);
        let mut y = vec![0.0; n];
        let mut ynew = vec![0.0; n];
        let mut probe = vec![0.0; n];
        let mut grad = vec![0.0; n];

        let starts = self.params.restarts + 1;
        let mut last_move = radius;
        for s in 0..starts {
            if s == 0 {
                y.copy_from_slice(x);
            } else {
                let mut nd = 0.0f64;
                for g in probe.iter_mut() {
                    *g = rng.gen_range(-1.0..1.0);
                    nd += *g * *g;
                }
                let nd = nd.sqrt().max(1e-12);
                let r = rng.gen_range(0.0..radius);
                for i in 0..n {
                    y[i] = x[i] + probe[i] / nd * r;
                }
            }
            let psi0 = self.objective(x, &y);
            evals += 1;
            if psi0 < best_psi || (psi0 == best_psi && dist_to_x(&y) < best_dist) {
                best_psi = psi0;
                best_dist = dist_to_x(&y);
                best_y.copy_from_slice(&y);
            }
            // fixed-point pass y <- x - a^2 grad V(y); converges quickly
            // when V is smooth near the minimizer and is merely a cheap seed
            // otherwise
            for _ in 0..25 {
                for i in 0..n {
                    probe.copy_from_slice(&y);
                    probe[i] = y[i] + h;
                    let vp = self.base.value(&probe);
                    probe[i] = y[i] - h;
                    let vm = self.base.value(&probe);
                    grad[i] = (vp - vm) / (2.0 * h);
                    evals += 2;
                }
                let mut d2 = 0.0;
                for i in 0..n {
                    ynew[i] = x[i] - a2 * grad[i];
                    d2 += (ynew[i] - x[i]) * (ynew[i] - x[i]);
                }
                let d = d2.sqrt();
                if d > radius {
                    for i in 0..n {
                        ynew[i] = x[i] + (ynew[i] - x[i]) * radius / d;
                    }
                }
                let mut moved2 = 0.0;
                for i in 0..n {
                    moved2 += (ynew[i] - y[i]) * (ynew[i] - y[i]);
                }
                let moved = moved2.sqrt();
                let pnew = self.objective(x, &ynew);
                evals += 1;
                if pnew < best_psi || (pnew == best_psi && dist_to_x(&ynew) < best_dist) {
                    best_psi = pnew;
                    best_dist = dist_to_x(&ynew);
                    best_y.copy_from_slice(&ynew);
                }
                y.copy_from_slice(&ynew);
                last_move = moved;
                if moved <= step_min {
                    break;
                }
                if evals > self.params.budget {
                    return Err(Error::NonConvergence(vecn::norm(x)));
                }
            }
        }

        // compass polish from the best candidate
        let mut bp = best_psi;
        let mut by = best_y;
        let step_hi = radius * 0.5;
        let step_lo = (16.0 * step_min).min(step_hi);
        let mut step = (4.0 * last_move + 16.0 * step_min).clamp(step_lo, step_hi);
        while step > step_min {
            let mut improved = false;
            for i in 0..n {
                for sgn in [1.0, -1.0] {
                    let yi = by[i];
                    let cand = yi + sgn * step;
                    by[i] = cand;
                    if dist_to_x(&by) > radius + 1e-15 {
                        by[i] = yi;
                        continue;
                    }
                    let p = self.objective(x, &by);
                    evals += 1;
                    if p < bp {
                        bp = p;
                        improved = true;
                    } else {
                        by[i] = yi;
                    }
                }
            }
            if !improved {
                step *= 0.5;
            }
            if evals > self.params.budget {
                return Err(Error::NonConvergence(vecn::norm(x)));
            }
        }
        // the envelope never exceeds V itself (y = x is feasible)
        if bp > vx {
            bp = vx;
            by.copy_from_slice(x);
        }
        Ok((bp, by))
    }
}

/// Free-function form of the envelope evaluation.
pub fn inf_convolve(env: &MoreauEnvelope, x: &[f64]) -> Result<(f64, Vec<f64>)> {
    env.inf_convolve(x)
}

/// Free-function form of the aiming vector.
pub fn proximal_aim(env: &MoreauEnvelope, x: &[f64]) -> Result<Vec<f64>> {
    env.proximal_aim(x)
}

/// Feedback `k_a(x)`: the grid point of `u0` minimizing
/// `zeta_a(x) . f(x, u)`, with `k(0) = 0`. Measurable but in general
/// discontinuous; simulate it with sampled (pi-) trajectories.
pub fn proximal_feedback(
    env: Arc<MoreauEnvelope>,
    sys: &ControlSystem,
    u0: &ControlSet,
) -> FeedbackLaw {
    let grid = Arc::new(u0.grid());
    let sys2 = sys.clone();
    let n = sys.state_dim;
    let m = sys.control_dim;
    let k = Arc::new(move |x: &[f64], u: &mut [f64]| -> Result<()> {
        u.fill(0.0);
        if vecn::norm(x) == 0.0 {
            return Ok(());
        }
        let zeta = env.proximal_aim(x)?;
        let idx = argmin_over_grid(&sys2, &zeta, x, &grid);
        u.copy_from_slice(&grid[idx]);
        Ok(())
    });
    let mut law = FeedbackLaw::from_fn(
        n,
        m,
        ContinuityClass::MeasurableDiscontinuous,
        Provenance::Proximal,
        k,
    );
    law.control_set = Some(u0.clone());
    law
}

/// Test the proximal-subgradient inequality
/// `V(y) >= V(x) + zeta . (y - x) - mu |y - x|^2` over at least 100 sampled
/// `y` in the ball of the given radius around `x`. Returns the verdict and
/// the worst slack (negative slack = violation).
pub fn proximal_subgradient_test(
    v: &dyn Fn(&[f64]) -> f64,
    x: &[f64],
    zeta: &[f64],
    mu: f64,
    radius: f64,
    samples: usize,
) -> (bool, f64) {
    let n = x.len();
    let samples = samples.max(100);
    let vx = v(x);
    let mut rng = ChaCha8Rng::seed_from_u64(vecn::bits_fold(x) ^ 0x7375_6267);
    let mut worst = f64::INFINITY;
    let mut check = |y: &[f64]| {
        let d = vecn::sub(y, x);
        let slack = v(y) - vx - vecn::dot(zeta, &d) + mu * vecn::dot(&d, &d);
        if slack < worst {
            worst = slack;
        }
    };
    // axis probes at several radii catch one-dimensional kinks exactly
    for frac in [1.0, 0.5, 0.1, 0.01] {
        for i in 0..n {
            for sgn in [1.0, -1.0] {
                let mut y = x.to_vec();
                y[i] += sgn * frac * radius;
                check(&y);
            }
        }
    }
    for _ in 0..samples {
        let dir: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let nd = vecn::norm(&dir).max(1e-12);
        let r = rng.gen_range(0.0..radius);
        let y: Vec<f64> = x.iter().zip(&dir).map(|(xi, d)| xi + d / nd * r).collect();
        check(&y);
    }
    (worst >= -1e-9, worst)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecreaseViolation {
    pub x: Vec<f64>,
    pub margin: f64,
    pub bound: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnvelopeDecreaseReport {
    pub gamma_r: f64,
    pub decrease_fraction: f64,
    pub points_checked: usize,
    pub violations: Vec<DecreaseViolation>,
}

impl EnvelopeDecreaseReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Verify `min_u zeta_a(x) . f(x, u) <= -c_dec * gamma(r)` on an annulus
/// grid, where `gamma(r)` is the infimum of the base rate `W` over the
/// annulus. `c_dec` defaults to 1/2 in callers; the exact lemma constant is
/// configurable.
pub fn envelope_decrease_check(
    env: &MoreauEnvelope,
    sys: &ControlSystem,
    u0: &ControlSet,
    r: f64,
    big_r: f64,
    grid_resolution: usize,
    c_dec: f64,
) -> Result<EnvelopeDecreaseReport> {
    use rayon::prelude::*;
    let n = sys.state_dim;
    let rate = {
        let base = env.base.clone();
        move |x: &[f64]| base.rate(x)
    };
    let gamma_r = annulus_inf(&rate, n, r, big_r);
    let axis = vecn::linspace(-big_r, big_r, grid_resolution);
    let points: Vec<Vec<f64>> = crate::clf::cartesian_points(&vec![axis; n])
        .into_iter()
        .filter(|x| {
            let nx = vecn::norm(x);
            nx >= r && nx <= big_r + 1e-12
        })
        .collect();
    let grid = u0.grid();
    let bound = -c_dec * gamma_r;
    let rows: Vec<Result<Option<DecreaseViolation>>> = points
        .par_iter()
        .map(|x| {
            let zeta = env.proximal_aim(x)?;
            let idx = argmin_over_grid(sys, &zeta, x, &grid);
            let mut f = vec![0.0; n];
            sys.eval_into(x, &grid[idx], &mut f);
            let margin = vecn::dot(&zeta, &f);
            Ok(if margin > bound + 1e-9 * (1.0 + bound.abs()) {
                Some(DecreaseViolation {
                    x: x.clone(),
                    margin,
                    bound,
                })
            } else {
                None
            })
        })
        .collect();
    let mut violations = Vec::new();
    for row in rows {
        if let Some(v) = row? {
            violations.push(v);
        }
    }
    Ok(EnvelopeDecreaseReport {
        gamma_r,
        decrease_fraction: c_dec,
        points_checked: points.len(),
        violations,
    })
}

/// Deterministic direction set on the unit sphere used by the radial
/// sampling helpers.
fn directions(n: usize) -> Vec<Vec<f64>> {
    match n {
        1 => vec![vec![1.0], vec![-1.0]],
        2 => (0..96)
            .map(|k| {
                let th = 2.0 * std::f64::consts::PI * (k as f64) / 96.0;
                vec![th.cos(), th.sin()]
            })
            .collect(),
        3 => {
            // Fibonacci sphere
            let count = 194;
            let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
            (0..count)
                .map(|k| {
                    let z = 1.0 - 2.0 * (k as f64 + 0.5) / (count as f64);
                    let rad = (1.0 - z * z).sqrt();
                    let th = golden * k as f64;
                    vec![rad * th.cos(), rad * th.sin(), z]
                })
                .collect()
        }
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(0x5048_4552);
            let mut dirs: Vec<Vec<f64>> = (0..500)
                .map(|_| {
                    let d: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(rand_distr_standard())).collect();
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

// rand 0.8's StandardNormal lives in rand_distr; a Box-Muller pull from the
// uniform keeps the dependency list short.
fn rand_distr_standard() -> impl rand::distributions::Distribution<f64> {
    struct BoxMuller;
    impl rand::distributions::Distribution<f64> for BoxMuller {
        fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        }
    }
    BoxMuller
}

/// Infimum of a scalar field over the annulus `r <= |x| <= big_r`,
/// estimated on a deterministic radial/angular grid.
pub fn annulus_inf(f: &dyn Fn(&[f64]) -> f64, n: usize, r: f64, big_r: f64) -> f64 {
    let dirs = directions(n);
    let mut inf = f64::INFINITY;
    for rad in vecn::linspace(r, big_r.max(r), 48) {
        for d in &dirs {
            let x: Vec<f64> = d.iter().map(|v| v * rad).collect();
            inf = inf.min(f(&x));
        }
    }
    inf
}

/// Supremum of a scalar field over the ball `|x| <= big_r`, same sampling.
pub fn ball_sup(f: &dyn Fn(&[f64]) -> f64, n: usize, big_r: f64) -> f64 {
    let dirs = directions(n);
    let mut sup = f(&vec![0.0; n]);
    for rad in vecn::linspace(big_r / 48.0, big_r, 48) {
        for d in &dirs {
            let x: Vec<f64> = d.iter().map(|v| v * rad).collect();
            sup = sup.max(f(&x));
        }
    }
    sup
}

/// Largest observed difference quotient `|f(p) - f(q)| / |p - q|` over
/// seeded sample pairs in the ball of radius `big_r`, probed at several
/// displacement scales.
pub fn lipschitz_estimate(f: &dyn Fn(&[f64]) -> f64, n: usize, big_r: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = 0.0f64;
    for &scale in &[1e-4, 1e-2, 0.3] {
        for _ in 0..400 {
            let p: Vec<f64> = (0..n).map(|_| rng.gen_range(-big_r..big_r)).collect();
            if vecn::norm(&p) > big_r {
                continue;
            }
            let dir: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let nd = vecn::norm(&dir).max(1e-12);
            let q: Vec<f64> = p
                .iter()
                .zip(&dir)
                .map(|(a, d)| a + d / nd * scale * big_r)
                .collect();
            if vecn::norm(&q) > big_r {
                continue;
            }
            let dist = vecn::norm(&vecn::sub(&q, &p));
            if dist > 0.0 {
                best = best.max((f(&q) - f(&p)).abs() / dist);
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::zoo_build;
    use std::collections::BTreeMap;

    fn huber_env(alpha: f64) -> MoreauEnvelope {
        MoreauEnvelope::new(ContinuousClf::norm_clf(1), alpha).unwrap()
    }

    #[test]
    fn huber_closed_form() {
        let env = huber_env(1.0);
        let (v, y) = env.inf_convolve(&[2.0]).unwrap();
        assert!((v - 1.5).abs() < 1e-8, "v = {v}");
        assert!((y[0] - 1.0).abs() < 1e-6, "y = {}", y[0]);

        let (v, y) = env.inf_convolve(&[0.5]).unwrap();
        assert!((v - 0.125).abs() < 1e-8, "v = {v}");
        assert!(y[0].abs() < 1e-6, "y = {}", y[0]);
    }

    #[test]
    fn envelope_at_origin() {
        let env = huber_env(0.3);
        let (v, y) = env.inf_convolve(&[0.0]).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(y, vec![0.0]);
        assert_eq!(env.proximal_aim(&[0.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn aim_examples() {
        let env = huber_env(1.0);
        let z = env.proximal_aim(&[2.0]).unwrap();
        assert!((z[0] - 1.0).abs() < 1e-6);
        let z = env.proximal_aim(&[0.5]).unwrap();
        assert!((z[0] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn quadratic_closed_form() {
        for n in [1usize, 2] {
            for &alpha in &[0.1, 0.5, 1.0] {
                let env = MoreauEnvelope::new(ContinuousClf::quadratic(n), alpha).unwrap();
                for s in crate::vecn::linspace(-2.0, 2.0, 9) {
                    let x = vec![s; n];
                    let (v, y) = env.inf_convolve(&x).unwrap();
                    let want = vecn::dot(&x, &x) / (2.0 * (1.0 + alpha * alpha));
                    assert!((v - want).abs() < 1e-8, "n={n} a={alpha} s={s}: {v} vs {want}");
                    let want_y = s / (1.0 + alpha * alpha);
                    for yi in &y {
                        assert!((yi - want_y).abs() < 2e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn envelope_below_value_and_monotone_in_alpha() {
        let clf = artstein_clf();
        let e1 = MoreauEnvelope::new(clf.clone(), 0.05).unwrap();
        let e2 = MoreauEnvelope::new(clf.clone(), 0.2).unwrap();
        for x in [[1.0, 0.3], [0.0, 1.0], [-0.4, -0.7]] {
            let v = clf.value(&x);
            let v1 = e1.inf_convolve(&x).unwrap().0;
            let v2 = e2.inf_convolve(&x).unwrap().0;
            assert!(v1 <= v + 1e-12);
            assert!(v2 <= v1 + 1e-12, "alpha-monotonicity at {x:?}");
        }
    }

    #[test]
    fn envelope_converges_to_value() {
        let clf = artstein_clf();
        let x = [0.7, -0.4];
        let v = clf.value(&x);
        let mut prev = 0.0;
        for &alpha in &[1.0, 0.1, 0.01] {
            let env = MoreauEnvelope::new(clf.clone(), alpha).unwrap();
            let va = env.inf_convolve(&x).unwrap().0;
            assert!(va >= prev - 1e-12);
            prev = va;
        }
        assert!((v - prev).abs() <= 1e-3 * (1.0 + v));
    }

    #[test]
    fn aim_is_proximal_subgradient_at_minimizer() {
        let clf = artstein_clf();
        let env = MoreauEnvelope::new(clf.clone(), 0.1).unwrap();
        let vf = clf.value_fn();
        for x in [[0.9, 0.2], [0.0, 0.8], [-0.5, 0.6]] {
            let (_, y) = env.inf_convolve(&x).unwrap();
            let zeta = env.proximal_aim(&x).unwrap();
            let mu = 1.0 / (2.0 * env.alpha * env.alpha);
            let value = vf.clone();
            let (ok, worst) =
                proximal_subgradient_test(&move |p| value(p), &y, &zeta, mu, 0.05, 400);
            assert!(ok, "worst slack {worst} at {x:?}");
        }
    }

    #[test]
    fn subgradient_test_examples() {
        let v_abs = |x: &[f64]| x[0].abs();
        let (ok, _) = proximal_subgradient_test(&v_abs, &[0.0], &[0.5], 0.0, 1.0, 200);
        assert!(ok);
        let (ok, worst) = proximal_subgradient_test(&v_abs, &[0.0], &[2.0], 0.0, 1.0, 200);
        assert!(!ok);
        assert!(worst < -0.9); // fails at y = radius: |y| - 2y = -1
        // -|x| has no proximal subgradient at 0 for any zeta/mu
        let v_neg = |x: &[f64]| -x[0].abs();
        for zeta in [-2.0, -0.5, 0.0, 0.5, 2.0] {
            for mu in [0.0, 1.0, 10.0] {
                for radius in [1.0, 0.1, 0.01] {
                    let (ok, _) =
                        proximal_subgradient_test(&v_neg, &[0.0], &[zeta], mu, radius, 200);
                    assert!(!ok, "zeta={zeta} mu={mu} radius={radius}");
                }
            }
        }
    }

    #[test]
    fn artstein_values() {
        let clf = artstein_clf();
        assert!((clf.value(&[1.0, 0.0]) - 0.5).abs() < 1e-15);
        assert!((clf.value(&[0.0, 1.0]) - 1.0).abs() < 1e-15);
        assert_eq!(clf.value(&[0.0, 0.0]), 0.0);
    }

    #[test]
    fn proximal_feedback_sign_argument() {
        // xdot = u, V = |x|, alpha = 1, x = 2: zeta = 1 > 0 so u = -1
        let sys = ControlSystem::new(
            "integrator-1d",
            1,
            1,
            Arc::new(|_x, u, out| out[0] = u[0]),
        )
        .with_affine(
            Arc::new(|_x, out| out[0] = 0.0),
            Arc::new(|_x, g| g[0][0] = 1.0),
        );
        let env = Arc::new(huber_env(1.0));
        let set = ControlSet::ball(1, 1.0, 21).unwrap();
        let law = proximal_feedback(env, &sys, &set);
        assert_eq!(law.eval(&[2.0]).unwrap(), vec![-1.0]);
        assert_eq!(law.eval(&[0.0]).unwrap(), vec![0.0]);
        assert_eq!(law.continuity, ContinuityClass::MeasurableDiscontinuous);
    }

    #[test]
    fn proximal_feedback_artstein_boundary() {
        let sys = zoo_build("artstein-circles", &BTreeMap::new()).unwrap();
        let env = Arc::new(MoreauEnvelope::new(artstein_clf(), 0.1).unwrap());
        let set = ControlSet::ball(1, 1.0, 21).unwrap();
        let law = proximal_feedback(env.clone(), &sys, &set);
        // at (1, 0): zeta ~ grad V = (1/2, 0), g = (1, 0): objective u/2,
        // minimizer at the -1 boundary
        let u = law.eval(&[1.0, 0.0]).unwrap();
        assert_eq!(u, vec![-1.0]);
        // on the kink line the aim points off-axis and still picks a
        // boundary control
        let u = law.eval(&[0.0, 1.0]).unwrap();
        assert_eq!(u[0].abs(), 1.0);
    }

    #[test]
    fn decrease_check_smooth_quadratic() {
        // V = |x|^2/2 on xdot = u: zeta_a = x/(1 + a^2); decrease passes for
        // small alpha
        let sys = ControlSystem::new(
            "integrator-1d",
            1,
            1,
            Arc::new(|_x, u, out| out[0] = u[0]),
        )
        .with_affine(
            Arc::new(|_x, out| out[0] = 0.0),
            Arc::new(|_x, g| g[0][0] = 1.0),
        );
        let env = MoreauEnvelope::new(ContinuousClf::quadratic(1), 0.05).unwrap();
        let set = ControlSet::ball(1, 1.0, 21).unwrap();
        // W = |x|^2/2, annulus [0.5, 1]: gamma = 0.125; margins are
        // -|x|/(1+a^2) <= -0.49, far below -gamma/2
        let report = envelope_decrease_check(&env, &sys, &set, 0.5, 1.0, 41, 0.5).unwrap();
        assert!(report.passed(), "violations: {:?}", report.violations.first());
        assert!((report.gamma_r - 0.125).abs() < 1e-6);
    }

    #[test]
    fn decrease_check_flags_oversized_alpha() {
        let sys = zoo_build("artstein-circles", &BTreeMap::new()).unwrap();
        let set = ControlSet::ball(1, 1.0, 21).unwrap();
        // alpha comparable to the outer radius destroys the decrease
        let env = MoreauEnvelope::new(artstein_clf(), 2.0).unwrap();
        let report = envelope_decrease_check(&env, &sys, &set, 0.2, 2.0, 21, 0.5).unwrap();
        assert!(!report.passed());
    }

    #[test]
    fn field_sampling_helpers() {
        let w = |x: &[f64]| 0.5 * vecn::dot(x, x);
        let g = annulus_inf(&w, 2, 0.2, 2.0);
        assert!((g - 0.02).abs() < 1e-9);
        let clf = artstein_clf();
        let sup = ball_sup(&move |x: &[f64]| clf.value(x), 2, 2.0);
        assert!((sup - 2.0).abs() < 1e-6);
        let clf2 = artstein_clf();
        let lip = lipschitz_estimate(&move |x: &[f64]| clf2.value(x), 2, 2.0, 11);
        assert!(lip > 1.0 && lip < 1.5, "lip = {lip}");
    }
}
