//! Smooth control-Lyapunov functions and the feedback constructions built
//! from them: the universal formula and pointwise argmin over a compact
//! control set, plus grid verification of the decrease condition.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::comparison::KFunction;
use crate::error::{Error, Result};
use crate::systems::{ControlSet, ControlSystem};
use crate::vecn;

pub type ScalarFieldFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type GradientFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// A differentiable control-Lyapunov function candidate: value, gradient,
/// decrease-rate function `W`, and a properness sandwich
/// `alpha_lower(|x|) <= V(x) <= alpha_upper(|x|)`.
#[derive(Clone)]
pub struct SmoothClf {
    pub dim: usize,
    value: ScalarFieldFn,
    gradient: GradientFn,
    rate: ScalarFieldFn,
    pub sandwich: (KFunction, KFunction),
    /// Set when arbitrarily small controls achieve decrease near the origin,
    /// which makes the universal formula continuous at 0.
    pub small_control_property: bool,
}

impl fmt::Debug for SmoothClf {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SmoothClf").field("dim", &self.dim).finish()
    }
}

impl SmoothClf {
    pub fn new(
        dim: usize,
        value: ScalarFieldFn,
        gradient: GradientFn,
        rate: ScalarFieldFn,
        sandwich: (KFunction, KFunction),
    ) -> Self {
        SmoothClf {
            dim,
            value,
            gradient,
            rate,
            sandwich,
            small_control_property: false,
        }
    }

    pub fn with_small_control_property(mut self) -> Self {
        self.small_control_property = true;
        self
    }

    /// `V(x) = c |x|^2` with `W(x) = c |x|^2` as the default rate.
    pub fn quadratic(dim: usize, c: f64) -> Self {
        let value: ScalarFieldFn = Arc::new(move |x: &[f64]| c * vecn::dot(x, x));
        let rate = value.clone();
        let gradient: GradientFn = Arc::new(move |x, out| {
            for i in 0..x.len() {
                out[i] = 2.0 * c * x[i];
            }
        });
        let sandwich = (
            KFunction::power(c, 2.0).unwrap(),
            KFunction::power(c, 2.0).unwrap(),
        );
        SmoothClf::new(dim, value, gradient, rate, sandwich).with_small_control_property()
    }

    /// Quadratic form `V(x) = x' Q x` (Q symmetric positive definite,
    /// row-major), with eigenvalue-bound sandwich estimated from Q's
    /// diagonal dominance left to the caller via `sandwich`.
    pub fn quadratic_form(q: Vec<Vec<f64>>, sandwich: (KFunction, KFunction)) -> Self {
        let dim = q.len();
        let q2 = q.clone();
        let value: ScalarFieldFn = Arc::new(move |x: &[f64]| {
            let mut acc = 0.0;
            for i in 0..x.len() {
                for j in 0..x.len() {
                    acc += x[i] * q[i][j] * x[j];
                }
            }
            acc
        });
        let gradient: GradientFn = Arc::new(move |x, out| {
            for i in 0..x.len() {
                out[i] = 0.0;
                for j in 0..x.len() {
                    out[i] += (q2[i][j] + q2[j][i]) * x[j];
                }
            }
        });
        let rate: ScalarFieldFn = Arc::new(|x: &[f64]| vecn::dot(x, x));
        SmoothClf::new(dim, value, gradient, rate, sandwich)
    }

    pub fn with_rate(mut self, rate: ScalarFieldFn) -> Self {
        self.rate = rate;
        self
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        (self.value)(x)
    }

    pub fn grad(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.dim];
        (self.gradient)(x, &mut g);
        g
    }

    #[inline]
    pub fn grad_into(&self, x: &[f64], out: &mut [f64]) {
        (self.gradient)(x, out)
    }

    pub fn rate(&self, x: &[f64]) -> f64 {
        (self.rate)(x)
    }

    /// Replace the decrease rate with `W(x) = c |x|^2`, `c` calibrated from
    /// a verification run: half the worst decrease margin achieved on the
    /// region grid, normalized by `|x|^2`. For callers that supply only a
    /// value/gradient pair. Errors when some grid point has no decrease
    /// control at all.
    pub fn calibrate_rate(
        mut self,
        sys: &ControlSystem,
        u0: &ControlSet,
        region: Region,
        grid_resolution: usize,
    ) -> Result<Self> {
        let grid = u0.grid();
        let axis = vecn::linspace(-region.r_outer, region.r_outer, grid_resolution);
        let mut c = f64::INFINITY;
        for x in cartesian_points(&vec![axis; self.dim]) {
            let nx = vecn::norm(&x);
            if nx < region.r_inner || nx > region.r_outer + 1e-12 {
                continue;
            }
            let grad = self.grad(&x);
            let idx = argmin_over_grid(sys, &grad, &x, &grid);
            let f = sys.eval_dynamics(&x, &grid[idx])?;
            let margin = vecn::dot(&grad, &f);
            if margin >= 0.0 {
                return Err(Error::InvalidParams(format!(
                    "no decrease control at |x| = {nx:.3e}; cannot calibrate a rate"
                )));
            }
            c = c.min(-margin / (nx * nx));
        }
        if !c.is_finite() {
            return Err(Error::InvalidParams("empty calibration region".into()));
        }
        let half = 0.5 * c;
        self.rate = Arc::new(move |x: &[f64]| half * vecn::dot(x, x));
        Ok(self)
    }

    /// Check `V(0) = 0`, positivity, the sandwich, and agreement of the
    /// gradient with central finite differences at seeded sample points.
    pub fn validate(&self, radius: f64, samples: usize, seed: u64) -> Result<()> {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let zero = vec![0.0; self.dim];
        if self.value(&zero).abs() > 1e-12 {
            return Err(Error::InvalidParams("V(0) != 0".into()));
        }
        for _ in 0..samples {
            let x: Vec<f64> = (0..self.dim)
                .map(|_| rng.gen_range(-radius..radius))
                .collect();
            let nx = vecn::norm(&x);
            if nx < 1e-9 {
                continue;
            }
            let v = self.value(&x);
            if v <= 0.0 {
                return Err(Error::InvalidParams(format!("V not positive at |x| = {nx}")));
            }
            let (lo, hi) = (&self.sandwich.0, &self.sandwich.1);
            if v < lo.eval(nx) - 1e-9 * (1.0 + v) || v > hi.eval(nx) + 1e-9 * (1.0 + v) {
                return Err(Error::InvalidParams(format!(
                    "sandwich violated at |x| = {nx}: {} <= {v} <= {}",
                    lo.eval(nx),
                    hi.eval(nx)
                )));
            }
            let g = self.grad(&x);
            let h = 1e-5 * (1.0 + nx);
            for i in 0..self.dim {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                let fd = (self.value(&xp) - self.value(&xm)) / (2.0 * h);
                if (fd - g[i]).abs() > 1e-4 * (1.0 + fd.abs().max(g[i].abs())) {
                    return Err(Error::InvalidParams(format!(
                        "gradient mismatch at component {i}: fd = {fd}, grad = {}",
                        g[i]
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContinuityClass {
    Smooth,
    Continuous,
    MeasurableDiscontinuous,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    UniversalFormula,
    PointwiseMin,
    Proximal,
    User,
}

type FeedbackFn = Arc<dyn Fn(&[f64], &mut [f64]) -> Result<()> + Send + Sync>;

/// A state feedback `u = k(x)`, possibly discontinuous. Evaluation is pure.
#[derive(Clone)]
pub struct FeedbackLaw {
    pub state_dim: usize,
    pub control_dim: usize,
    pub continuity: ContinuityClass,
    pub provenance: Provenance,
    k: FeedbackFn,
    pub control_set: Option<ControlSet>,
}

impl fmt::Debug for FeedbackLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FeedbackLaw")
            .field("continuity", &self.continuity)
            .field("provenance", &self.provenance)
            .finish()
    }
}

impl FeedbackLaw {
    pub fn from_fn(
        state_dim: usize,
        control_dim: usize,
        continuity: ContinuityClass,
        provenance: Provenance,
        k: FeedbackFn,
    ) -> Self {
        FeedbackLaw {
            state_dim,
            control_dim,
            continuity,
            provenance,
            k,
            control_set: None,
        }
    }

    /// Identically-zero feedback.
    pub fn zero(state_dim: usize, control_dim: usize) -> Self {
        FeedbackLaw::from_fn(
            state_dim,
            control_dim,
            ContinuityClass::Smooth,
            Provenance::User,
            Arc::new(|_x, u| {
                u.fill(0.0);
                Ok(())
            }),
        )
    }

    /// A smooth user feedback from a plain closure.
    pub fn smooth(
        state_dim: usize,
        control_dim: usize,
        k: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        FeedbackLaw::from_fn(
            state_dim,
            control_dim,
            ContinuityClass::Smooth,
            Provenance::User,
            Arc::new(move |x, u| {
                k(x, u);
                Ok(())
            }),
        )
    }

    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.state_dim {
            return Err(Error::DimensionMismatch {
                what: "feedback state",
                expected: self.state_dim,
                got: x.len(),
            });
        }
        let mut u = vec![0.0; self.control_dim];
        (self.k)(x, &mut u)?;
        Ok(u)
    }

    #[inline]
    pub fn eval_into(&self, x: &[f64], u: &mut [f64]) -> Result<()> {
        (self.k)(x, u)
    }

    /// Wrap this law with an additive control offset (models a disturbance
    /// entering through the control channel).
    pub fn with_control_offset(&self, offset: Vec<f64>) -> FeedbackLaw {
        let inner = self.k.clone();
        FeedbackLaw {
            state_dim: self.state_dim,
            control_dim: self.control_dim,
            continuity: self.continuity,
            provenance: self.provenance,
            control_set: None,
            k: Arc::new(move |x, u| {
                inner(x, u)?;
                for (ui, o) in u.iter_mut().zip(&offset) {
                    *ui += o;
                }
                Ok(())
            }),
        }
    }
}

/// The universal formula for control-affine systems:
/// with `a = grad V . f0` and `b = G' grad V`,
///
///    k(x) = -((a + sqrt(a^2 + |b|^4)) / |b|^2) b   when b != 0, else 0.
///
/// The single-input case reduces to the familiar scalar expression. The
/// multi-input `|b|^4` generalization is the standard one.
///
/// Errors lazily with `ClfPremiseViolated` when queried at an `x != 0` where
/// `a(x) >= 0` and `b(x) = 0` (no decrease control exists there).
pub fn universal_formula_feedback(clf: &SmoothClf, sys: &ControlSystem) -> Result<FeedbackLaw> {
    if !sys.is_affine() {
        return Err(Error::NotAffine(sys.name.clone()));
    }
    let clf = clf.clone();
    let sys2 = sys.clone();
    let n = sys.state_dim;
    let m = sys.control_dim;
    let k: FeedbackFn = Arc::new(move |x, u| {
        u.fill(0.0);
        if vecn::norm(x) == 0.0 {
            return Ok(());
        }
        let grad = clf.grad(x);
        let mut drift = vec![0.0; n];
        let mut g = vec![vec![0.0; n]; m];
        sys2.affine_into(x, &mut drift, &mut g);
        let a = vecn::dot(&grad, &drift);
        let b: Vec<f64> = g.iter().map(|col| vecn::dot(&grad, col)).collect();
        let b2 = vecn::dot(&b, &b);
        // rationalized form: (a + sqrt(a^2 + b2^2)) / b2 = b2 / (sqrt - a)
        let root = (a * a + b2 * b2).sqrt();
        let denom = root - a;
        if b2 == 0.0 || denom == 0.0 {
            if a < 0.0 {
                return Ok(()); // decrease holds for free, take u = 0
            }
            return Err(Error::ClfPremiseViolated {
                norm: vecn::norm(x),
                a,
            });
        }
        let scale = -b2 / denom;
        for j in 0..m {
            u[j] = scale * b[j];
        }
        Ok(())
    });
    Ok(FeedbackLaw::from_fn(
        n,
        m,
        ContinuityClass::Smooth,
        Provenance::UniversalFormula,
        k,
    ))
}

/// Select the grid point of `u0` minimizing `grad V(x) . f(x, u)`.
/// Ties break toward smaller `|u|`, then lexicographic coordinate order, so
/// results are bit-reproducible.
pub fn pointwise_min_feedback(
    clf: &SmoothClf,
    sys: &ControlSystem,
    u0: &ControlSet,
) -> FeedbackLaw {
    let grid = Arc::new(u0.grid());
    let clf = clf.clone();
    let sys2 = sys.clone();
    let n = sys.state_dim;
    let m = sys.control_dim;
    let grid2 = grid.clone();
    let k: FeedbackFn = Arc::new(move |x, u| {
        u.fill(0.0);
        if vecn::norm(x) == 0.0 {
            return Ok(());
        }
        let grad = clf.grad(x);
        let best = argmin_over_grid(&sys2, &grad, x, &grid2);
        u.copy_from_slice(&grid2[best]);
        Ok(())
    });
    let mut law = FeedbackLaw::from_fn(
        n,
        m,
        ContinuityClass::MeasurableDiscontinuous,
        Provenance::PointwiseMin,
        k,
    );
    law.control_set = Some(u0.clone());
    law
}

/// Index of the grid control minimizing `w . f(x, u)`, with the fixed
/// tie-breaking rule (value, then |u|, then lexicographic).
pub(crate) fn argmin_over_grid(
    sys: &ControlSystem,
    w: &[f64],
    x: &[f64],
    grid: &[Vec<f64>],
) -> usize {
    let n = sys.state_dim;
    let m = sys.control_dim;
    let mut drift = vec![0.0; n];
    let mut g = vec![vec![0.0; n]; m];
    let affine = sys.affine_into(x, &mut drift, &mut g);
    let mut fx = vec![0.0; n];

    let mut best_idx = 0usize;
    let mut best: Option<(f64, f64)> = None; // (objective, |u|^2)
    for (idx, u) in grid.iter().enumerate() {
        let obj = if affine {
            let mut acc = vecn::dot(w, &drift);
            for (j, col) in g.iter().enumerate() {
                acc += u[j] * vecn::dot(w, col);
            }
            acc
        } else {
            sys.eval_into(x, u, &mut fx);
            vecn::dot(w, &fx)
        };
        let u2 = vecn::dot(u, u);
        let better = match &best {
            None => true,
            Some((bo, bu2)) => {
                obj < *bo
                    || (obj == *bo
                        && (u2 < *bu2 || (u2 == *bu2 && lex_less(u, &grid[best_idx]))))
            }
        };
        if better {
            best = Some((obj, u2));
            best_idx = idx;
        }
    }
    best_idx
}

fn lex_less(a: &[f64], b: &[f64]) -> bool {
    for (x, y) in a.iter().zip(b) {
        if x < y {
            return true;
        }
        if x > y {
            return false;
        }
    }
    false
}

/// Minimum of `grad V(x) . f(x, u)` over the control-set grid; compare
/// against `-W(x)` to test the decrease condition at `x`.
pub fn clf_decrease_margin(
    clf: &SmoothClf,
    sys: &ControlSystem,
    u0: &ControlSet,
    x: &[f64],
) -> Result<f64> {
    if vecn::norm(x) == 0.0 {
        return Err(Error::InvalidParams(
            "decrease margin is undefined at x = 0".into(),
        ));
    }
    let grad = clf.grad(x);
    let grid = u0.grid();
    let idx = argmin_over_grid(sys, &grad, x, &grid);
    let f = sys.eval_dynamics(x, &grid[idx])?;
    Ok(vecn::dot(&grad, &f))
}

/// Annulus `r_inner <= |x| <= r_outer` (a punctured ball when
/// `r_inner = 0`, subject to the grid-step exclusion).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Region {
    pub r_inner: f64,
    pub r_outer: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClfViolation {
    pub x: Vec<f64>,
    pub margin: f64,
    pub required: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClfRegionReport {
    pub violations: Vec<ClfViolation>,
    pub points_checked: usize,
    pub grid_resolution: usize,
    pub region: Region,
}

impl ClfRegionReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Check `min_u grad V . f(x, u) <= -W(x) + tol` on a lattice over the
/// region; lists every violating grid point. The lattice spans
/// `[-r_outer, r_outer]^n` with `grid_resolution` points per axis (odd
/// resolutions sample coordinate hyperplanes exactly).
pub fn verify_clf_on_region(
    clf: &SmoothClf,
    sys: &ControlSystem,
    u0: &ControlSet,
    region: Region,
    grid_resolution: usize,
) -> Result<ClfRegionReport> {
    use rayon::prelude::*;

    let n = sys.state_dim;
    let step = 2.0 * region.r_outer / (grid_resolution.max(2) as f64 - 1.0);
    if region.r_inner < step * (1.0 - 1e-12) {
        return Err(Error::PreconditionFailed(format!(
            "region must exclude a ball of radius >= the grid step around 0 \
             (r_inner = {}, step = {step})",
            region.r_inner
        )));
    }
    let axis = vecn::linspace(-region.r_outer, region.r_outer, grid_resolution);
    let axes = vec![axis; n];
    let points: Vec<Vec<f64>> = cartesian_points(&axes)
        .into_iter()
        .filter(|x| {
            let nx = vecn::norm(x);
            nx >= region.r_inner && nx <= region.r_outer + 1e-12
        })
        .collect();

    let grid = u0.grid();
    let results: Vec<Option<ClfViolation>> = points
        .par_iter()
        .map(|x| {
            let grad = clf.grad(x);
            let idx = argmin_over_grid(sys, &grad, x, &grid);
            let mut f = vec![0.0; n];
            sys.eval_into(x, &grid[idx], &mut f);
            let margin = vecn::dot(&grad, &f);
            let required = -clf.rate(x);
            let tol = 1e-9 * (1.0 + clf.rate(x).abs());
            if margin > required + tol {
                Some(ClfViolation {
                    x: x.clone(),
                    margin,
                    required,
                })
            } else {
                None
            }
        })
        .collect();

    Ok(ClfRegionReport {
        violations: results.into_iter().flatten().collect(),
        points_checked: points.len(),
        grid_resolution,
        region,
    })
}

pub(crate) fn cartesian_points(axes: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = vec![Vec::new()];
    for axis in axes {
        let mut next = Vec::with_capacity(out.len() * axis.len());
        for prefix in &out {
            for v in axis {
                let mut p = prefix.clone();
                p.push(*v);
                next.push(p);
            }
        }
        out = next;
    }
    out
}
