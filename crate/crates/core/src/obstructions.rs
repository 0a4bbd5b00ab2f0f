//! Necessary-condition checkers for continuous stabilizability: the linear
//! rank test `rank [A B] = n`, the driftless rank test on `G(0)`, and an
//! empirical probe of whether `(x, u) -> f(x, u)` maps small neighborhoods
//! onto a neighborhood of zero.
//!
//! The rank tests are exact up to a tolerance. The probe reports `fails`
//! only as strong evidence and is labeled empirical: sampling cannot
//! certify surjectivity.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::systems::ControlSystem;
use crate::vecn;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictStatus {
    FailsNecessaryCondition,
    Inconclusive,
}

/// Outcome of an obstruction test. `witness` is present whenever the
/// verdict is `FailsNecessaryCondition`: a direction complementary to the
/// reachable span for the rank tests, the worst unreached target for the
/// probe.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BrockettVerdict {
    pub status: VerdictStatus,
    pub witness: Option<Vec<f64>>,
    pub rank: Option<usize>,
    /// Set for the sampling-based probe, whose `fails` is evidence rather
    /// than proof.
    pub empirical: bool,
    pub detail: String,
}

impl BrockettVerdict {
    pub fn fails(&self) -> bool {
        self.status == VerdictStatus::FailsNecessaryCondition
    }

    fn inconclusive(detail: impl Into<String>, rank: Option<usize>) -> Self {
        BrockettVerdict {
            status: VerdictStatus::Inconclusive,
            witness: None,
            rank,
            empirical: false,
            detail: detail.into(),
        }
    }
}

/// Column-pivoted Gram-Schmidt rank of the matrix with the given columns,
/// plus a unit vector orthogonal to the column span when the span is
/// proper. Tolerance: `1e-10 * ||M||_F`.
fn rank_and_complement(columns: &[Vec<f64>], n: usize) -> (usize, Option<Vec<f64>>) {
    let frob: f64 = columns.iter().map(|c| vecn::dot(c, c)).sum::<f64>().sqrt();
    let tol = 1e-10 * frob.max(1e-300);

    let project_out = |basis: &[Vec<f64>], v: &mut Vec<f64>| {
        for b in basis {
            let proj = vecn::dot(v, b);
            for k in 0..n {
                v[k] -= proj * b[k];
            }
        }
    };

    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut remaining: Vec<Vec<f64>> = columns.to_vec();
    while basis.len() < n {
        let mut best: Option<(usize, f64)> = None;
        for (i, c) in remaining.iter().enumerate() {
            let mut res = c.clone();
            project_out(&basis, &mut res);
            let nr = vecn::norm(&res);
            if best.is_none_or(|(_, bn)| nr > bn) {
                best = Some((i, nr));
            }
        }
        match best {
            Some((i, nr)) if nr > tol => {
                let mut res = remaining.swap_remove(i);
                project_out(&basis, &mut res);
                let nr2 = vecn::norm(&res);
                debug_assert!(nr2 > 0.0 && (nr2 - nr).abs() <= nr);
                for v in res.iter_mut() {
                    *v /= nr2;
                }
                basis.push(res);
            }
            _ => break,
        }
    }
    let rank = basis.len();
    if rank == n {
        return (rank, None);
    }
    for i in 0..n {
        let mut res = vec![0.0; n];
        res[i] = 1.0;
        project_out(&basis, &mut res);
        let nr = vecn::norm(&res);
        if nr > 1e-8 {
            for v in res.iter_mut() {
                *v /= nr;
            }
            return (rank, Some(res));
        }
    }
    (rank, None)
}

/// Linear test: the pair `(A, B)` fails the necessary condition when
/// `rank [A B] < n`; the witness spans the uncovered directions.
pub fn brockett_linear_test(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<BrockettVerdict> {
    let n = a.len();
    if n == 0 || a.iter().any(|row| row.len() != n) {
        return Err(Error::InvalidParams("A must be square and nonempty".into()));
    }
    if b.len() != n {
        return Err(Error::InvalidParams("B must have as many rows as A".into()));
    }
    let m = b[0].len();
    if b.iter().any(|row| row.len() != m) {
        return Err(Error::InvalidParams("B rows must have equal length".into()));
    }
    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(n + m);
    for j in 0..n {
        columns.push(a.iter().map(|row| row[j]).collect());
    }
    for j in 0..m {
        columns.push(b.iter().map(|row| row[j]).collect());
    }
    let (rank, complement) = rank_and_complement(&columns, n);
    if rank < n {
        Ok(BrockettVerdict {
            status: VerdictStatus::FailsNecessaryCondition,
            witness: complement,
            rank: Some(rank),
            empirical: false,
            detail: format!("rank [A B] = {rank} < n = {n}"),
        })
    } else {
        Ok(BrockettVerdict::inconclusive(
            format!("rank [A B] = {n} = n"),
            Some(rank),
        ))
    }
}

/// Driftless test: for `xdot = G(x) u` with `m < n` and `rank G(0) = m`,
/// no continuous stabilizer exists; the witness is a direction outside
/// `Im G(0)`.
///
/// The rank argument needs the drift to vanish identically, not just at the
/// origin (a drift that wakes up away from 0 can cover the missing
/// directions), so the drift is sampled on a small ball.
pub fn brockett_driftless_test(sys: &ControlSystem) -> Result<BrockettVerdict> {
    let n = sys.state_dim;
    let m = sys.control_dim;
    let zero = vec![0.0; n];
    let (_, g) = sys.affine_parts(&zero)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0xd21f);
    let mut probe = vec![vec![0.0; n]];
    for _ in 0..32 {
        probe.push((0..n).map(|_| rng.gen_range(-0.5..0.5)).collect());
    }
    for x in &probe {
        let (drift, _) = sys.affine_parts(x)?;
        if vecn::norm(&drift) > 1e-9 * (1.0 + vecn::norm(x)) {
            return Err(Error::PreconditionFailed(format!(
                "system `{}` is not driftless (|f0(x)| = {:.3e} at |x| = {:.3e})",
                sys.name,
                vecn::norm(&drift),
                vecn::norm(x)
            )));
        }
    }
    let (rank, complement) = rank_and_complement(&g, n);
    if m < n && rank == m {
        Ok(BrockettVerdict {
            status: VerdictStatus::FailsNecessaryCondition,
            witness: complement,
            rank: Some(rank),
            empirical: false,
            detail: format!("m = {m} < n = {n} with rank G(0) = {m}"),
        })
    } else {
        Ok(BrockettVerdict::inconclusive(
            format!("m = {m}, n = {n}, rank G(0) = {rank}"),
            Some(rank),
        ))
    }
}

/// Deterministic target directions on the unit sphere: coordinate axes plus
/// a seeded generic spread.
fn target_directions(n: usize, count: usize) -> Vec<Vec<f64>> {
    let mut dirs: Vec<Vec<f64>> = Vec::new();
    for i in 0..n {
        for sgn in [1.0, -1.0] {
            let mut e = vec![0.0; n];
            e[i] = sgn;
            dirs.push(e);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x7461_7267);
    while dirs.len() < count.max(2 * n) {
        let d: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0f64..1.0)).collect();
        let nd = vecn::norm(&d);
        if nd > 1e-6 {
            dirs.push(d.into_iter().map(|v| v / nd).collect());
        }
    }
    dirs.truncate(count.max(2 * n));
    dirs
}

/// Box-projected Levenberg-Marquardt on `|f(x, u) - p|^2` with a numeric
/// Jacobian and seeded multistart; returns the best residual norm found
/// within the evaluation budget.
fn least_squares_reach(
    sys: &ControlSystem,
    p: &[f64],
    x_radius: f64,
    u_radius: f64,
    budget: usize,
    seed: u64,
) -> f64 {
    let n = sys.state_dim;
    let m = sys.control_dim;
    let dim = n + m;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut evals = 0usize;
    let mut best = f64::INFINITY;

    let clamp = |z: &mut [f64]| {
        for (i, v) in z.iter_mut().enumerate() {
            let lim = if i < n { x_radius } else { u_radius };
            *v = v.clamp(-lim, lim);
        }
    };
    let mut fx = vec![0.0; n];
    let mut residual = |z: &[f64], out: &mut Vec<f64>, evals: &mut usize| {
        sys.eval_into(&z[..n], &z[n..], &mut fx);
        *evals += 1;
        out.clear();
        out.extend(fx.iter().zip(p).map(|(a, b)| a - b));
    };

    let starts = 8;
    for s in 0..starts {
        let mut z: Vec<f64> = if s == 0 {
            vec![0.0; dim]
        } else {
            (0..dim)
                .map(|i| {
                    let lim = if i < n { x_radius } else { u_radius };
                    rng.gen_range(-lim..lim)
                })
                .collect()
        };
        let mut r = Vec::new();
        residual(&z, &mut r, &mut evals);
        let mut rnorm = vecn::norm(&r);
        best = best.min(rnorm);
        let mut lambda = 1e-3;
        for _ in 0..60 {
            if evals >= budget || rnorm < 1e-9 {
                break;
            }
            let mut jac = nalgebra::DMatrix::<f64>::zeros(n, dim);
            let h = 1e-6 * (1.0 + x_radius.max(u_radius));
            for j in 0..dim {
                let mut zp = z.clone();
                let mut zm = z.clone();
                zp[j] += h;
                zm[j] -= h;
                clamp(&mut zp);
                clamp(&mut zm);
                let denom = zp[j] - zm[j];
                if denom.abs() < 1e-14 {
                    continue;
                }
                let mut rp = Vec::new();
                let mut rm = Vec::new();
                residual(&zp, &mut rp, &mut evals);
                residual(&zm, &mut rm, &mut evals);
                for i in 0..n {
                    jac[(i, j)] = (rp[i] - rm[i]) / denom;
                }
            }
            let rv = nalgebra::DVector::from_column_slice(&r);
            let jt = jac.transpose();
            let mut improved = false;
            for _ in 0..8 {
                let lhs = &jt * &jac + nalgebra::DMatrix::identity(dim, dim) * lambda;
                let rhs = -(&jt * &rv);
                if let Some(delta) = lhs.lu().solve(&rhs) {
                    let mut znew = z.clone();
                    for i in 0..dim {
                        znew[i] += delta[i];
                    }
                    clamp(&mut znew);
                    let mut rnew = Vec::new();
                    residual(&znew, &mut rnew, &mut evals);
                    let rn = vecn::norm(&rnew);
                    if rn < rnorm {
                        z = znew;
                        r = rnew;
                        rnorm = rn;
                        lambda = (lambda * 0.3).max(1e-12);
                        improved = true;
                        break;
                    }
                }
                lambda *= 10.0;
                if lambda > 1e8 {
                    break;
                }
            }
            best = best.min(rnorm);
            if !improved {
                break;
            }
        }
        if best < 1e-9 {
            break;
        }
    }
    best
}

/// Empirical onto-a-neighborhood probe: targets on the sphere of radius
/// `0.1 * x_radius` must all be reachable as values `f(x, u)` with
/// `|x|_inf <= x_radius`, `|u|_inf <= u_radius`. A target whose best
/// residual stays above `1e-6 |p|` after the solver budget yields an
/// (empirical) failure verdict with that target as witness.
pub fn onto_neighborhood_probe(
    sys: &ControlSystem,
    x_radius: f64,
    u_radius: f64,
    n_targets: usize,
    budget: usize,
) -> Result<BrockettVerdict> {
    use rayon::prelude::*;
    if !(x_radius > 0.0 && u_radius > 0.0) {
        return Err(Error::InvalidParams("radii must be positive".into()));
    }
    let scale = 0.1 * x_radius;
    let targets: Vec<Vec<f64>> = target_directions(sys.state_dim, n_targets)
        .into_iter()
        .map(|d| d.into_iter().map(|v| v * scale).collect())
        .collect();

    let residuals: Vec<f64> = targets
        .par_iter()
        .enumerate()
        .map(|(i, p)| least_squares_reach(sys, p, x_radius, u_radius, budget, 0xbeef ^ i as u64))
        .collect();

    let mut worst: Option<(usize, f64)> = None;
    for (i, res) in residuals.iter().enumerate() {
        let rel = res / vecn::norm(&targets[i]);
        if worst.is_none_or(|(_, w)| rel > w) {
            worst = Some((i, rel));
        }
    }
    let (wi, wrel) = worst.expect("at least one target");
    if wrel > 1e-6 {
        Ok(BrockettVerdict {
            status: VerdictStatus::FailsNecessaryCondition,
            witness: Some(targets[wi].clone()),
            rank: None,
            empirical: true,
            detail: format!("EMPIRICAL: target at relative residual {wrel:.3e} appears unreachable"),
        })
    } else {
        Ok(BrockettVerdict {
            status: VerdictStatus::Inconclusive,
            witness: None,
            rank: None,
            empirical: true,
            detail: format!("EMPIRICAL: all {} targets reached", targets.len()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::{zoo_build, ZOO_NAMES};
    use std::collections::BTreeMap;
    use std::sync::Arc;

    fn build(name: &str) -> ControlSystem {
        zoo_build(name, &BTreeMap::new()).unwrap()
    }

    #[test]
    fn linear_double_integrator_inconclusive() {
        let a = vec![vec![0.0, 1.0], vec![0.0, 0.0]];
        let b = vec![vec![0.0], vec![1.0]];
        let v = brockett_linear_test(&a, &b).unwrap();
        assert_eq!(v.status, VerdictStatus::Inconclusive);
        assert_eq!(v.rank, Some(2));
    }

    #[test]
    fn linear_zero_system_fails() {
        let a = vec![vec![0.0]];
        let b = vec![vec![0.0]];
        let v = brockett_linear_test(&a, &b).unwrap();
        assert!(v.fails());
        let w = v.witness.unwrap();
        assert!((w[0].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn linear_identity_pair_inconclusive() {
        let a = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let b = vec![vec![1.0], vec![0.0]];
        let v = brockett_linear_test(&a, &b).unwrap();
        assert_eq!(v.status, VerdictStatus::Inconclusive);
        assert_eq!(v.rank, Some(2));
    }

    #[test]
    fn driftless_nonholonomic_fails_with_axis_witness() {
        let v = brockett_driftless_test(&build("nonholonomic-integrator")).unwrap();
        assert!(v.fails());
        let w = v.witness.unwrap();
        // Im G(0) = span(e1, e2): the complement direction is +-e3
        assert!(w[0].abs() < 1e-9 && w[1].abs() < 1e-9);
        assert!((w[2].abs() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn driftless_shopping_cart_fails() {
        let v = brockett_driftless_test(&build("shopping-cart")).unwrap();
        assert!(v.fails());
        assert_eq!(v.rank, Some(2));
    }

    #[test]
    fn driftless_rank_deficient_at_origin_inconclusive() {
        // x1dot = x1 u, x2dot = x2 u: m = 1 < 2 = n but rank G(0) = 0
        let sys = ControlSystem::new(
            "scaling-field",
            2,
            1,
            Arc::new(|x, u, out| {
                out[0] = x[0] * u[0];
                out[1] = x[1] * u[0];
            }),
        )
        .with_affine(
            Arc::new(|_x, out| out.fill(0.0)),
            Arc::new(|x, g| {
                g[0][0] = x[0];
                g[0][1] = x[1];
            }),
        );
        let v = brockett_driftless_test(&sys).unwrap();
        assert_eq!(v.status, VerdictStatus::Inconclusive);
        assert_eq!(v.rank, Some(0));
    }

    #[test]
    fn probe_nonholonomic_fails_along_z3() {
        let v = onto_neighborhood_probe(&build("nonholonomic-integrator"), 1.0, 1.0, 26, 20_000)
            .unwrap();
        assert!(v.fails());
        assert!(v.empirical);
        let w = v.witness.unwrap();
        // the unreachable directions concentrate near +-e3
        assert!(w[2].abs() > 0.5 * vecn::norm(&w), "witness {w:?}");
    }

    #[test]
    fn probe_scalar_integrator_inconclusive() {
        let sys = ControlSystem::new("xu", 1, 1, Arc::new(|_x, u, out| out[0] = u[0]));
        let v = onto_neighborhood_probe(&sys, 1.0, 1.0, 8, 20_000).unwrap();
        assert_eq!(v.status, VerdictStatus::Inconclusive);
    }

    #[test]
    fn probe_rigid_body_inconclusive() {
        let v =
            onto_neighborhood_probe(&build("rigid-body-reduced"), 1.0, 1.0, 26, 20_000).unwrap();
        assert_eq!(v.status, VerdictStatus::Inconclusive, "{}", v.detail);
    }

    #[test]
    fn probe_uuu_fails_on_sign_obstruction() {
        // (u2u3)(u1u3)(u1u2) = (u1 u2 u3)^2 >= 0: targets whose coordinate
        // product is negative are unreachable
        let v = onto_neighborhood_probe(&build("uuu"), 1.0, 1.0, 26, 20_000).unwrap();
        assert!(v.fails());
        let w = v.witness.unwrap();
        assert!(w[0] * w[1] * w[2] < 0.0, "witness {w:?}");
    }

    #[test]
    fn tests_agree_across_zoo() {
        for name in ZOO_NAMES {
            let sys = build(name);
            let driftless = brockett_driftless_test(&sys).ok();
            let probe = onto_neighborhood_probe(&sys, 1.0, 1.0, 26, 20_000).unwrap();
            if let Some(d) = driftless {
                if d.fails() {
                    assert!(probe.fails(), "{name}: rank test fails but probe passed");
                }
            }
        }
    }

    #[test]
    fn linear_verdict_invariant_under_coordinate_change() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let cases = [
            (
                vec![vec![0.0, 1.0], vec![0.0, 0.0]],
                vec![vec![0.0], vec![1.0]],
            ),
            (
                vec![vec![1.0, 0.0], vec![0.0, 1.0]],
                vec![vec![1.0], vec![1.0]],
            ),
            (
                vec![vec![0.0, 0.0], vec![0.0, -1.0]],
                vec![vec![0.0], vec![1.0]],
            ),
        ];
        for (a, b) in &cases {
            let base = brockett_linear_test(a, b).unwrap().status;
            for _ in 0..5 {
                let mut t = vec![vec![0.0; 2]; 2];
                for (i, row) in t.iter_mut().enumerate() {
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = if i == j { 1.0 } else { 0.0 } + 0.3 * rng.gen_range(-1.0..1.0);
                    }
                }
                let det: f64 = t[0][0] * t[1][1] - t[0][1] * t[1][0];
                assert!(det.abs() > 0.1);
                let tinv = vec![
                    vec![t[1][1] / det, -t[0][1] / det],
                    vec![-t[1][0] / det, t[0][0] / det],
                ];
                let mul = |p: &Vec<Vec<f64>>, q: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
                    let rows = p.len();
                    let inner = q.len();
                    let cols = q[0].len();
                    let mut out = vec![vec![0.0; cols]; rows];
                    for (i, orow) in out.iter_mut().enumerate() {
                        for (j, ov) in orow.iter_mut().enumerate() {
                            for k in 0..inner {
                                *ov += p[i][k] * q[k][j];
                            }
                        }
                    }
                    out
                };
                let ta = mul(&t, &mul(a, &tinv));
                let tb = mul(&t, b);
                let v = brockett_linear_test(&ta, &tb).unwrap();
                assert_eq!(v.status, base);
            }
        }
    }
}
