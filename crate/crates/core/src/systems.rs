//! Control systems `xdot = f(x, u)`, compact control sets, and the built-in
//! example zoo.
//!
//! `ControlSystem` values are immutable after construction and their
//! evaluators are pure, so they can be shared freely across worker threads.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vecn;

/// Default bound on `|x|` beyond which integrators stop and flag escape.
pub const DEFAULT_BLOWUP_BOUND: f64 = 1e6;

pub type DynFn = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;
pub type DriftFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
/// Input matrix evaluator; fills `g` column-major as `g[j][i]` = entry (i, j).
pub type InputMatrixFn = Arc<dyn Fn(&[f64], &mut [Vec<f64>]) + Send + Sync>;

/// Control-affine decomposition `f(x, u) = f0(x) + G(x) u`.
#[derive(Clone)]
pub struct AffineParts {
    pub drift: DriftFn,
    pub input_matrix: InputMatrixFn,
}

/// A control system `xdot = f(x, u)` with `x` in R^n, `u` in R^m.
#[derive(Clone)]
pub struct ControlSystem {
    pub name: String,
    pub state_dim: usize,
    pub control_dim: usize,
    dynamics: DynFn,
    affine: Option<AffineParts>,
    /// Optional local Lipschitz-constant estimate on a stated ball.
    pub lipschitz_hint: Option<f64>,
    pub blowup_bound: f64,
    pub default_control_set: ControlSet,
}

impl fmt::Debug for ControlSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlSystem")
            .field("name", &self.name)
            .field("state_dim", &self.state_dim)
            .field("control_dim", &self.control_dim)
            .field("affine", &self.affine.is_some())
            .finish()
    }
}

impl ControlSystem {
    pub fn new(
        name: impl Into<String>,
        state_dim: usize,
        control_dim: usize,
        dynamics: DynFn,
    ) -> Self {
        let control_set = ControlSet::ball(control_dim, 1.0, 101).expect("unit ball");
        ControlSystem {
            name: name.into(),
            state_dim,
            control_dim,
            dynamics,
            affine: None,
            lipschitz_hint: None,
            blowup_bound: DEFAULT_BLOWUP_BOUND,
            default_control_set: control_set,
        }
    }

    pub fn with_affine(mut self, drift: DriftFn, input_matrix: InputMatrixFn) -> Self {
        self.affine = Some(AffineParts {
            drift,
            input_matrix,
        });
        self
    }

    pub fn with_default_control_set(mut self, set: ControlSet) -> Self {
        self.default_control_set = set;
        self
    }

    pub fn with_lipschitz_hint(mut self, hint: f64) -> Self {
        self.lipschitz_hint = Some(hint);
        self
    }

    pub fn is_affine(&self) -> bool {
        self.affine.is_some()
    }

    fn check_dims(&self, x: &[f64], u: &[f64]) -> Result<()> {
        if x.len() != self.state_dim {
            return Err(Error::DimensionMismatch {
                what: "state",
                expected: self.state_dim,
                got: x.len(),
            });
        }
        if u.len() != self.control_dim {
            return Err(Error::DimensionMismatch {
                what: "control",
                expected: self.control_dim,
                got: u.len(),
            });
        }
        Ok(())
    }

    /// Evaluate `f(x, u)` with dimension and finiteness checks.
    pub fn eval_dynamics(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        self.check_dims(x, u)?;
        let mut out = vec![0.0; self.state_dim];
        (self.dynamics)(x, u, &mut out);
        if !vecn::all_finite(&out) {
            return Err(Error::NonFiniteState {
                t: f64::NAN,
                context: "dynamics returned a non-finite derivative",
            });
        }
        Ok(out)
    }

    /// Unchecked evaluation into a caller-provided buffer (integrator hot path).
    #[inline]
    pub fn eval_into(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        (self.dynamics)(x, u, out);
    }

    /// Drift `f0(x)` and input matrix `G(x)` (columns `g_j(x)`), for
    /// control-affine systems.
    pub fn affine_parts(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        self.check_dims(x, &vec![0.0; self.control_dim])?;
        let parts = self
            .affine
            .as_ref()
            .ok_or_else(|| Error::NotAffine(self.name.clone()))?;
        let mut drift = vec![0.0; self.state_dim];
        (parts.drift)(x, &mut drift);
        let mut g = vec![vec![0.0; self.state_dim]; self.control_dim];
        (parts.input_matrix)(x, &mut g);
        Ok((drift, g))
    }

    /// Like `affine_parts` but writing into caller buffers, no checks.
    #[inline]
    pub fn affine_into(&self, x: &[f64], drift: &mut [f64], g: &mut [Vec<f64>]) -> bool {
        match &self.affine {
            Some(parts) => {
                (parts.drift)(x, drift);
                (parts.input_matrix)(x, g);
                true
            }
            None => false,
        }
    }
}

/// Compact set of admissible control values, with a deterministic sampling
/// grid used by the argmin-based feedback constructions.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ControlSet {
    pub kind: ControlSetKind,
    pub dim: usize,
    /// Points per axis for grid construction.
    pub sample_resolution: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ControlSetKind {
    Ball { radius: f64 },
    Box { lo: Vec<f64>, hi: Vec<f64> },
    Finite { points: Vec<Vec<f64>> },
}

impl ControlSet {
    pub fn ball(dim: usize, radius: f64, sample_resolution: usize) -> Result<Self> {
        if !(radius.is_finite() && radius >= 0.0) {
            return Err(Error::InvalidParams(format!(
                "ball radius must be finite and nonnegative, got {radius}"
            )));
        }
        Ok(ControlSet {
            kind: ControlSetKind::Ball { radius },
            dim,
            sample_resolution: sample_resolution.max(1),
        })
    }

    pub fn cube(dim: usize, half_width: f64, sample_resolution: usize) -> Result<Self> {
        Self::boxed(
            vec![-half_width; dim],
            vec![half_width; dim],
            sample_resolution,
        )
    }

    pub fn boxed(lo: Vec<f64>, hi: Vec<f64>, sample_resolution: usize) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::InvalidParams("box bounds length mismatch".into()));
        }
        for (a, b) in lo.iter().zip(&hi) {
            if !(a.is_finite() && b.is_finite() && a <= b) {
                return Err(Error::InvalidParams("box bounds must be finite, lo <= hi".into()));
            }
            if *a > 0.0 || *b < 0.0 {
                return Err(Error::InvalidParams("control set must contain u = 0".into()));
            }
        }
        let dim = lo.len();
        Ok(ControlSet {
            kind: ControlSetKind::Box { lo, hi },
            dim,
            sample_resolution: sample_resolution.max(1),
        })
    }

    pub fn finite(points: Vec<Vec<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidParams("finite control set is empty".into()));
        }
        let dim = points[0].len();
        if !points.iter().all(|p| p.len() == dim && vecn::all_finite(p)) {
            return Err(Error::InvalidParams("finite control set points malformed".into()));
        }
        if !points.iter().any(|p| vecn::norm(p) == 0.0) {
            return Err(Error::InvalidParams("finite control set must contain u = 0".into()));
        }
        Ok(ControlSet {
            kind: ControlSetKind::Finite { points },
            dim,
            sample_resolution: 1,
        })
    }

    pub fn contains(&self, u: &[f64], tol: f64) -> bool {
        match &self.kind {
            ControlSetKind::Ball { radius } => vecn::norm(u) <= radius + tol,
            ControlSetKind::Box { lo, hi } => u
                .iter()
                .zip(lo.iter().zip(hi))
                .all(|(v, (a, b))| *v >= a - tol && *v <= b + tol),
            ControlSetKind::Finite { points } => points
                .iter()
                .any(|p| vecn::norm(&vecn::sub(p, u)) <= tol),
        }
    }

    /// Deterministic sampling grid. Always contains `u = 0`; box and ball
    /// grids include their extreme points along each axis.
    pub fn grid(&self) -> Vec<Vec<f64>> {
        match &self.kind {
            ControlSetKind::Finite { points } => points.clone(),
            ControlSetKind::Box { lo, hi } => {
                let axes: Vec<Vec<f64>> = lo
                    .iter()
                    .zip(hi)
                    .map(|(a, b)| axis_with_zero(*a, *b, self.sample_resolution))
                    .collect();
                cartesian(&axes)
            }
            ControlSetKind::Ball { radius } => {
                let r = *radius;
                if self.dim == 1 {
                    return axis_with_zero(-r, r, self.sample_resolution)
                        .into_iter()
                        .map(|v| vec![v])
                        .collect();
                }
                let axes: Vec<Vec<f64>> =
                    vec![axis_with_zero(-r, r, self.sample_resolution); self.dim];
                let mut pts: Vec<Vec<f64>> = cartesian(&axes)
                    .into_iter()
                    .filter(|p| vecn::norm(p) <= r + 1e-12)
                    .collect();
                // keep the axis-extreme boundary points even when the lattice
                // misses them
                for j in 0..self.dim {
                    for s in [-1.0, 1.0] {
                        let mut p = vec![0.0; self.dim];
                        p[j] = s * r;
                        if !pts.iter().any(|q| q == &p) {
                            pts.push(p);
                        }
                    }
                }
                pts
            }
        }
    }
}

fn axis_with_zero(lo: f64, hi: f64, resolution: usize) -> Vec<f64> {
    let mut vals = vecn::linspace(lo, hi, resolution.max(2));
    if !vals.contains(&0.0) {
        vals.push(0.0);
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    }
    vals
}

fn cartesian(axes: &[Vec<f64>]) -> Vec<Vec<f64>> {
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

/// A simulated trajectory with piecewise controls aligned to time intervals
/// (`controls.len() == times.len() - 1` when controls were recorded).
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub controls: Vec<Vec<f64>>,
    pub escaped: bool,
    pub escape_time: Option<f64>,
}

impl Trajectory {
    pub fn initial_norm(&self) -> f64 {
        self.states.first().map(|x| vecn::norm(x)).unwrap_or(0.0)
    }

    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("nonempty trajectory")
    }
}

/// Description of a zoo entry, for the CLI's `zoo` command.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ZooDescription {
    pub name: String,
    pub state_dim: usize,
    pub control_dim: usize,
    pub affine: bool,
    pub default_control_set: ControlSet,
    pub note: String,
}

pub const ZOO_NAMES: &[&str] = &[
    "cubic-1d",
    "scalar-two-regions",
    "shopping-cart",
    "nonholonomic-integrator",
    "artstein-circles",
    "rigid-body-reduced",
    "double-integrator",
    "gas-not-iss",
    "unstable-1d",
    "iss-redesigned-1d",
    "arctan-iiss",
    "uuu",
];

/// Build a catalog system by name.
///
/// Recognized `params` keys: `control_radius` (radius of the default ball
/// control set), `control_resolution` (grid points per axis), `blowup`
/// (escape bound for integrators). Unknown keys are rejected.
pub fn zoo_build(name: &str, params: &BTreeMap<String, f64>) -> Result<ControlSystem> {
    for key in params.keys() {
        if !matches!(key.as_str(), "control_radius" | "control_resolution" | "blowup") {
            return Err(Error::InvalidParams(format!("unknown zoo parameter `{key}`")));
        }
    }
    let mut sys = match name {
        // xdot = x + u^3; smoothly stabilized only by a non-Lipschitz law
        // such as k(x) = -cbrt(2 x).
        "cubic-1d" => ControlSystem::new(
            name,
            1,
            1,
            Arc::new(|x, u, out| out[0] = x[0] + u[0] * u[0] * u[0]),
        ),
        // Scalar system whose decrease regions are
        //   O1 = {(u+1)^2 < 2 - x},  O2 = {(u-1)^2 < x - 1}.
        // The right-hand side below reproduces exactly those sign regions
        // (x f < 0 iff (x,u) in O1 or O2); the concrete factorization is a
        // reconstruction and is documented as such in docs/formats.md.
        "scalar-two-regions" => ControlSystem::new(
            name,
            1,
            1,
            Arc::new(|x, u, out| {
                let a = (u[0] + 1.0) * (u[0] + 1.0) - (2.0 - x[0]);
                let b = (u[0] - 1.0) * (u[0] - 1.0) - (x[0] - 1.0);
                out[0] = x[0] * a * b;
            }),
        ),
        // Kinematic cart: state (x1, x2, theta), controls (forward speed,
        // steering rate).
        "shopping-cart" => ControlSystem::new(
            name,
            3,
            2,
            Arc::new(|x, u, out| {
                out[0] = u[0] * x[2].cos();
                out[1] = u[0] * x[2].sin();
                out[2] = u[1];
            }),
        )
        .with_affine(
            Arc::new(|_x, out| out.fill(0.0)),
            Arc::new(|x, g| {
                g[0][0] = x[2].cos();
                g[0][1] = x[2].sin();
                g[0][2] = 0.0;
                g[1][0] = 0.0;
                g[1][1] = 0.0;
                g[1][2] = 1.0;
            }),
        ),
        // Driftless system z1' = v1, z2' = v2, z3' = z1 v2 (the cart after a
        // feedback-equivalent change of coordinates).
        "nonholonomic-integrator" => ControlSystem::new(
            name,
            3,
            2,
            Arc::new(|x, u, out| {
                out[0] = u[0];
                out[1] = u[1];
                out[2] = x[0] * u[1];
            }),
        )
        .with_affine(
            Arc::new(|_x, out| out.fill(0.0)),
            Arc::new(|x, g| {
                g[0][0] = 1.0;
                g[0][1] = 0.0;
                g[0][2] = 0.0;
                g[1][0] = 0.0;
                g[1][1] = 1.0;
                g[1][2] = x[0];
            }),
        ),
        // Planar single-input system xdot = g(x) u with
        // g = (x1^2 - x2^2, 2 x1 x2); orbits of g are circles through 0.
        "artstein-circles" => ControlSystem::new(
            name,
            2,
            1,
            Arc::new(|x, u, out| {
                out[0] = (x[0] * x[0] - x[1] * x[1]) * u[0];
                out[1] = 2.0 * x[0] * x[1] * u[0];
            }),
        )
        .with_affine(
            Arc::new(|_x, out| out.fill(0.0)),
            Arc::new(|x, g| {
                g[0][0] = x[0] * x[0] - x[1] * x[1];
                g[0][1] = 2.0 * x[0] * x[1];
            }),
        ),
        // Angular-velocity equations of a rigid body with two torque inputs,
        // after normalizing substitutions: x1' = x2 x3, x2' = u1, x3' = u2.
        "rigid-body-reduced" => ControlSystem::new(
            name,
            3,
            2,
            Arc::new(|x, u, out| {
                out[0] = x[1] * x[2];
                out[1] = u[0];
                out[2] = u[1];
            }),
        )
        .with_affine(
            Arc::new(|x, out| {
                out[0] = x[1] * x[2];
                out[1] = 0.0;
                out[2] = 0.0;
            }),
            Arc::new(|_x, g| {
                g[0][0] = 0.0;
                g[0][1] = 1.0;
                g[0][2] = 0.0;
                g[1][0] = 0.0;
                g[1][1] = 0.0;
                g[1][2] = 1.0;
            }),
        ),
        "double-integrator" => ControlSystem::new(
            name,
            2,
            1,
            Arc::new(|x, u, out| {
                out[0] = x[1];
                out[1] = u[0];
            }),
        )
        .with_affine(
            Arc::new(|x, out| {
                out[0] = x[1];
                out[1] = 0.0;
            }),
            Arc::new(|_x, g| {
                g[0][0] = 0.0;
                g[0][1] = 1.0;
            }),
        ),
        // GAS for u = 0 but not ISS: bounded inputs can force finite escape.
        "gas-not-iss" => scalar_affine(name, |x| -x, |x| x * x + 1.0),
        "unstable-1d" => scalar_affine(name, |x| x, |x| x * x + 1.0),
        // The redesigned loop obtained from unstable-1d by the damping
        // preliminary feedback; ISS with respect to the remaining input.
        "iss-redesigned-1d" => scalar_affine(name, |x| -2.0 * x - x * x * x, |x| x * x + 1.0),
        // iISS but not ISS: xdot = -atan(x) + u.
        "arctan-iiss" => scalar_affine(name, |x| -x.atan(), |_x| 1.0),
        // Non control-affine system with quadratic input coupling.
        "uuu" => ControlSystem::new(
            name,
            3,
            3,
            Arc::new(|_x, u, out| {
                out[0] = u[1] * u[2];
                out[1] = u[0] * u[2];
                out[2] = u[0] * u[1];
            }),
        ),
        _ => return Err(Error::UnknownSystem(name.into())),
    };

    if let Some(r) = params.get("control_radius") {
        let res = params
            .get("control_resolution")
            .map(|v| *v as usize)
            .unwrap_or(sys.default_control_set.sample_resolution);
        sys.default_control_set = ControlSet::ball(sys.control_dim, *r, res)?;
    } else if let Some(res) = params.get("control_resolution") {
        sys.default_control_set.sample_resolution = (*res as usize).max(1);
    }
    if let Some(b) = params.get("blowup") {
        if !(b.is_finite() && *b > 0.0) {
            return Err(Error::InvalidParams("blowup bound must be positive".into()));
        }
        sys.blowup_bound = *b;
    }
    Ok(sys)
}

fn scalar_affine(
    name: &str,
    drift: impl Fn(f64) -> f64 + Send + Sync + Copy + 'static,
    gain: impl Fn(f64) -> f64 + Send + Sync + Copy + 'static,
) -> ControlSystem {
    ControlSystem::new(
        name,
        1,
        1,
        Arc::new(move |x, u, out| out[0] = drift(x[0]) + gain(x[0]) * u[0]),
    )
    .with_affine(
        Arc::new(move |x, out| out[0] = drift(x[0])),
        Arc::new(move |x, g| g[0][0] = gain(x[0])),
    )
}

pub fn zoo_describe(name: &str) -> Result<ZooDescription> {
    let sys = zoo_build(name, &BTreeMap::new())?;
    let note = match name {
        "scalar-two-regions" => {
            "right-hand side reconstructed from the decrease-region inequalities; see docs/formats.md"
        }
        "cubic-1d" => "stabilizable only by a non-Lipschitz-at-0 law, e.g. k(x) = -cbrt(2x)",
        "uuu" => "no control-affine decomposition",
        _ => "",
    };
    Ok(ZooDescription {
        name: sys.name.clone(),
        state_dim: sys.state_dim,
        control_dim: sys.control_dim,
        affine: sys.is_affine(),
        default_control_set: sys.default_control_set.clone(),
        note: note.into(),
    })
}
