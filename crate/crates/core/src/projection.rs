//! Nearest-point projection onto the stretched allowed set.
//!
//! In stretched coordinates the reflection is normal, so one reflected Euler
//! step is the Euclidean projection of the free proposal onto
//! `{ |x_i - x_j| >= sigma (r_i + r_j), r_minus/sigma <= r_i <= r_plus/sigma }`.
//! The projection is found by sequential linearization. Every pair gap is a
//! convex function of the coordinates, so replacing the working constraints
//! by their tangent half-spaces at the current iterate gives a convex inner
//! approximation of the allowed set; its nearest point to the proposal is a
//! least-distance problem solved by a nonnegative least-squares active-set
//! method. Constraints violated by an iterate join the working set. Once the
//! set of positive multipliers stops changing, Newton's method on the KKT
//! system of that active set finishes the solve.
//!
//! Each constraint is handled through its normalized form `h_c` whose
//! gradient is the unit inward normal `n_c`, so the returned multipliers
//! satisfy `projected = raw + sum_c lambda_c n_c(projected)`.

use nalgebra::{DMatrix, DVector, Matrix3};

use crate::error::{Error, Result};
use crate::geometry::{
    center_offset, pair_scale, radius_offset, Configuration, ContactKind, ModelParams, Vec3,
    CONTACT_TOL, COORDS_PER_GLOBULE,
};

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionOptions {
    /// Cap on active-set iterations.
    pub max_iters: usize,
    /// Constraints with gap at most this (stretched units) join the initial
    /// working set.
    pub tol_active: f64,
    /// Projected pair gaps are pushed to this small positive value so that the
    /// result stays allowed after rounding in the inverse stretch.
    pub pair_margin: f64,
    /// Convergence tolerance on the change between successive
    /// linearization rounds, relative to the size of the proposal.
    pub tol: f64,
    pub max_newton: usize,
}

impl Default for ProjectionOptions {
    fn default() -> Self {
        ProjectionOptions {
            max_iters: 50,
            tol_active: CONTACT_TOL,
            pair_margin: 1e-11,
            tol: 1e-14,
            max_newton: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// Nearest allowed point, stretched coordinates.
    pub point: Configuration,
    /// Nonnegative multiplier of every constraint in the final working set.
    pub multipliers: Vec<(ContactKind, f64)>,
    /// Active-set iterations used (0 when `raw` was already allowed).
    pub iterations: usize,
}

impl Projection {
    pub fn multiplier(&self, kind: ContactKind) -> f64 {
        self.multipliers
            .iter()
            .find(|(k, _)| *k == kind)
            .map_or(0.0, |(_, l)| *l)
    }
}

/// Stretched-coordinate constraint data shared by the solver and the step.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Geometry {
    pub sigma: f64,
    pub scale: f64,
    pub cap_plus: f64,
    pub cap_minus: f64,
}

impl Geometry {
    pub fn new(params: &ModelParams) -> Self {
        let sigma = params.sigma();
        Geometry {
            sigma,
            scale: pair_scale(sigma),
            cap_plus: params.r_plus() / sigma,
            cap_minus: params.r_minus() / sigma,
        }
    }

    /// Gap in stretched length units (not normalized).
    pub fn gap(&self, kind: ContactKind, y: &[f64]) -> f64 {
        match kind {
            ContactKind::Pair(i, j) => {
                let d = center(y, i) - center(y, j);
                d.norm() - self.sigma * (y[radius_offset(i)] + y[radius_offset(j)])
            }
            ContactKind::CapPlus(i) => self.cap_plus - y[radius_offset(i)],
            ContactKind::CapMinus(i) => y[radius_offset(i)] - self.cap_minus,
        }
    }

    /// Normalized constraint value: the gap divided by the gradient norm.
    fn value(&self, kind: ContactKind, y: &[f64]) -> f64 {
        match kind {
            ContactKind::Pair(..) => self.gap(kind, y) / self.scale,
            _ => self.gap(kind, y),
        }
    }

    fn target(&self, kind: ContactKind, opts: &ProjectionOptions) -> f64 {
        match kind {
            ContactKind::Pair(..) => opts.pair_margin / self.scale,
            _ => 0.0,
        }
    }

    /// Every constraint of an `n`-globule system with its gap.
    pub fn all_gaps(&self, y: &[f64], n: usize) -> Vec<(ContactKind, f64)> {
        let mut out = Vec::with_capacity(n * (n + 3) / 2);
        for i in 0..n {
            for j in i + 1..n {
                let k = ContactKind::Pair(i, j);
                out.push((k, self.gap(k, y)));
            }
            for k in [ContactKind::CapPlus(i), ContactKind::CapMinus(i)] {
                out.push((k, self.gap(k, y)));
            }
        }
        out
    }
}

#[inline]
fn center(y: &[f64], i: usize) -> Vec3 {
    let o = center_offset(i);
    Vec3::new(y[o], y[o + 1], y[o + 2])
}

fn involved(kind: ContactKind) -> (usize, Option<usize>) {
    match kind {
        ContactKind::Pair(i, j) => (i, Some(j)),
        ContactKind::CapPlus(i) | ContactKind::CapMinus(i) => (i, None),
    }
}

/// Projects the stretched proposal `raw` onto the stretched allowed set.
pub fn project_to_allowed(
    raw: &Configuration,
    params: &ModelParams,
    opts: &ProjectionOptions,
) -> Result<Projection> {
    let geo = Geometry::new(params);
    let n = raw.len();
    let raw_vec = raw.to_vector();
    let raw_y = raw_vec.as_slice();

    let gaps = geo.all_gaps(raw_y, n);
    let feasible = gaps.iter().all(|&(k, g)| match k {
        ContactKind::Pair(..) => g >= opts.pair_margin,
        _ => g >= 0.0,
    });
    if feasible {
        return Ok(Projection {
            point: raw.clone(),
            multipliers: Vec::new(),
            iterations: 0,
        });
    }

    let mut working: Vec<ContactKind> = gaps
        .iter()
        .filter(|&&(_, g)| g <= opts.tol_active)
        .map(|&(k, _)| k)
        .collect();
    check_degenerate(&working, raw_y)?;

    let failure = |iterations| Error::ProjectionFailure {
        iterations,
        state: Box::new(raw.clone()),
    };
    let scale = 1.0 + raw_vec.amax();
    let mut y = raw_y.to_vec();
    let mut support: Vec<ContactKind> = Vec::new();
    for iter in 1..=opts.max_iters {
        let (next, lambda) = linearized_step(&geo, raw_y, &y, &working, opts).ok_or_else(|| failure(iter))?;
        let moved = next
            .iter()
            .zip(&y)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));

        let violated = violated_outside(&geo, &next, n, &working, opts);
        if !violated.is_empty() {
            check_degenerate(&violated, &next)?;
            working.extend(violated);
            y = next;
            continue;
        }
        check_degenerate(&working, &next)?;

        let new_support: Vec<ContactKind> = working
            .iter()
            .zip(&lambda)
            .filter(|(_, l)| **l > 0.0)
            .map(|(&k, _)| k)
            .collect();
        let settled = new_support == support && moved <= 1e-6 * scale;
        support = new_support;

        if settled {
            // Newton on the identified active set converges quadratically
            if let Some((yp, lp)) = solve_equality(&geo, raw_y, &support, &next, opts) {
                let ok = lp.iter().all(|&l| l >= 0.0)
                    && violated_outside(&geo, &yp, n, &support, opts).is_empty();
                if ok {
                    return Ok(finish(&geo, &yp, &support, &lp, iter));
                }
            }
        }
        if moved <= opts.tol * scale {
            return Ok(finish(&geo, &next, &working, &lambda, iter));
        }
        y = next;
    }
    Err(failure(opts.max_iters))
}

fn finish(geo: &Geometry, y: &[f64], kinds: &[ContactKind], lambda: &[f64], iterations: usize) -> Projection {
    let mut point = Configuration::from_vector(&DVector::from_column_slice(y));
    for g in point.globules.iter_mut() {
        g.radius = g.radius.clamp(geo.cap_minus, geo.cap_plus);
    }
    let multipliers = kinds
        .iter()
        .zip(lambda)
        .filter(|(_, l)| **l > 0.0)
        .map(|(&k, &l)| (k, l))
        .collect();
    Projection {
        point,
        multipliers,
        iterations,
    }
}

/// Constraints outside `kinds` that `y` violates.
fn violated_outside(
    geo: &Geometry,
    y: &[f64],
    n: usize,
    kinds: &[ContactKind],
    opts: &ProjectionOptions,
) -> Vec<ContactKind> {
    geo.all_gaps(y, n)
        .into_iter()
        .filter(|(k, g)| {
            !kinds.contains(k)
                && match k {
                    ContactKind::Pair(..) => *g < 0.5 * opts.pair_margin,
                    _ => *g < -1e-14,
                }
        })
        .map(|(k, _)| k)
        .collect()
}

/// Nearest point to `raw` under the working constraints linearized at `y`.
///
/// The pair gaps are convex in the coordinates, so each linearization lies
/// inside its constraint and the returned point satisfies every working
/// constraint. Multipliers are returned in working-set order.
fn linearized_step(
    geo: &Geometry,
    raw: &[f64],
    y: &[f64],
    working: &[ContactKind],
    opts: &ProjectionOptions,
) -> Option<(Vec<f64>, Vec<f64>)> {
    if working.is_empty() {
        return Some((raw.to_vec(), Vec::new()));
    }
    let local = Local::new(working);
    let raw_local = local.gather(raw);
    let y_local = local.gather(y);
    let k = working.len();
    let mut a = DMatrix::zeros(k, local.dim());
    let mut h = DVector::zeros(k);
    for (r, &c) in working.iter().enumerate() {
        let nv = normal_local(geo, &local, c, y).0;
        // n . z >= target - value(y) + n . y, shifted to x = z - raw
        h[r] = geo.target(c, opts) - geo.value(c, y) + nv.dot(&y_local) - nv.dot(&raw_local);
        a.row_mut(r).copy_from(&nv.transpose());
    }
    let (x, lambda) = least_distance(&a, &h)?;
    let mut out = raw.to_vec();
    local.scatter(&(raw_local + x), &mut out);
    Some((out, lambda.iter().copied().collect()))
}

/// `min |x|` subject to `A x >= h`, through the nonnegative least-squares
/// dual. Returns `x` and multipliers `lambda >= 0` with `x = A^T lambda`, or
/// `None` when the constraints are inconsistent.
fn least_distance(a: &DMatrix<f64>, h: &DVector<f64>) -> Option<(DVector<f64>, DVector<f64>)> {
    let (k, dim) = a.shape();
    let mut e = DMatrix::zeros(dim + 1, k);
    e.rows_mut(0, dim).copy_from(&a.transpose());
    e.row_mut(dim).copy_from(&h.transpose());
    let mut f = DVector::zeros(dim + 1);
    f[dim] = 1.0;
    let u = nnls(&e, &f)?;
    let r = &e * &u - &f;
    let denom = -r[dim];
    if !(denom > 1e-300) || !denom.is_finite() {
        return None;
    }
    let lambda = u / denom;
    let x = a.transpose() * &lambda;
    Some((x, lambda))
}

/// Lawson-Hanson active-set solver for `min |E u - f|` with `u >= 0`.
fn nnls(e: &DMatrix<f64>, f: &DVector<f64>) -> Option<DVector<f64>> {
    let (p, m) = e.shape();
    let tol = 10.0 * f64::EPSILON * e.amax().max(1.0) * p.max(m) as f64;
    let mut u = DVector::zeros(m);
    let mut passive = vec![false; m];
    let mut blocked = vec![false; m];
    for _ in 0..3 * m + 20 {
        let w = e.tr_mul(&(f - e * &u));
        let pick = (0..m)
            .filter(|&j| !passive[j] && !blocked[j])
            .max_by(|&a, &b| w[a].total_cmp(&w[b]));
        let t = match pick {
            Some(t) if w[t] > tol => t,
            _ => return Some(u),
        };
        passive[t] = true;
        let mut first = true;
        loop {
            let idx: Vec<usize> = (0..m).filter(|&j| passive[j]).collect();
            let ep = e.select_columns(&idx);
            let svd = ep.svd(true, true);
            let cut = 1e-13 * svd.singular_values.amax();
            let sp = svd.solve(f, cut).ok()?;
            if sp.iter().all(|&v| v > 0.0) {
                u.fill(0.0);
                for (&j, &v) in idx.iter().zip(sp.iter()) {
                    u[j] = v;
                }
                blocked.iter_mut().for_each(|b| *b = false);
                break;
            }
            if first && sp[idx.binary_search(&t).expect("t is passive")] <= 0.0 {
                // numerically useless column: leave it out until u changes
                passive[t] = false;
                blocked[t] = true;
                break;
            }
            first = false;
            let alpha = idx
                .iter()
                .zip(sp.iter())
                .filter(|(_, &s)| s <= 0.0)
                .map(|(&j, &s)| u[j] / (u[j] - s))
                .fold(f64::INFINITY, f64::min);
            for (&j, &s) in idx.iter().zip(sp.iter()) {
                u[j] += alpha * (s - u[j]);
                if u[j] <= tol {
                    u[j] = 0.0;
                    passive[j] = false;
                }
            }
            if !passive.iter().any(|&b| b) {
                break;
            }
        }
    }
    None
}

fn check_degenerate(kinds: &[ContactKind], y: &[f64]) -> Result<()> {
    for &k in kinds {
        if let ContactKind::Pair(i, j) = k {
            if (center(y, i) - center(y, j)).norm() == 0.0 {
                return Err(Error::DegenerateContact { i, j });
            }
        }
    }
    Ok(())
}

/// Local coordinate block for the globules touched by the working set.
struct Local {
    globules: Vec<usize>,
}

impl Local {
    fn new(working: &[ContactKind]) -> Self {
        let mut globules: Vec<usize> = working
            .iter()
            .flat_map(|&k| {
                let (i, j) = involved(k);
                std::iter::once(i).chain(j)
            })
            .collect();
        globules.sort_unstable();
        globules.dedup();
        Local { globules }
    }

    fn dim(&self) -> usize {
        COORDS_PER_GLOBULE * self.globules.len()
    }

    fn slot(&self, g: usize) -> usize {
        COORDS_PER_GLOBULE * self.globules.binary_search(&g).expect("globule in working set")
    }

    fn gather(&self, y: &[f64]) -> DVector<f64> {
        let mut z = DVector::zeros(self.dim());
        for (s, &g) in self.globules.iter().enumerate() {
            for k in 0..COORDS_PER_GLOBULE {
                z[COORDS_PER_GLOBULE * s + k] = y[center_offset(g) + k];
            }
        }
        z
    }

    fn scatter(&self, z: &DVector<f64>, y: &mut [f64]) {
        for (s, &g) in self.globules.iter().enumerate() {
            for k in 0..COORDS_PER_GLOBULE {
                y[center_offset(g) + k] = z[COORDS_PER_GLOBULE * s + k];
            }
        }
    }
}

/// Unit normal of `kind` at `y`, in local coordinates, and its Hessian block
/// (pairs only).
fn normal_local(geo: &Geometry, local: &Local, kind: ContactKind, y: &[f64]) -> (DVector<f64>, Option<(usize, usize, Matrix3<f64>)>) {
    let mut nv = DVector::zeros(local.dim());
    match kind {
        ContactKind::Pair(i, j) => {
            let d = center(y, i) - center(y, j);
            let dist = d.norm();
            let u = d / dist;
            let (si, sj) = (local.slot(i), local.slot(j));
            for k in 0..3 {
                nv[si + k] = u[k] / geo.scale;
                nv[sj + k] = -u[k] / geo.scale;
            }
            nv[si + 3] = -geo.sigma / geo.scale;
            nv[sj + 3] = -geo.sigma / geo.scale;
            let p = (Matrix3::identity() - u * u.transpose()) / (dist * geo.scale);
            (nv, Some((si, sj, p)))
        }
        ContactKind::CapPlus(i) => {
            nv[local.slot(i) + 3] = -1.0;
            (nv, None)
        }
        ContactKind::CapMinus(i) => {
            nv[local.slot(i) + 3] = 1.0;
            (nv, None)
        }
    }
}

/// Newton's method on the KKT system of
/// `min |y - raw|^2 / 2  s.t.  h_c(y) = target_c, c in working`.
fn solve_equality(
    geo: &Geometry,
    raw: &[f64],
    working: &[ContactKind],
    start: &[f64],
    opts: &ProjectionOptions,
) -> Option<(Vec<f64>, Vec<f64>)> {
    let mut y = start.to_vec();
    if working.is_empty() {
        return Some((raw.to_vec(), Vec::new()));
    }
    let local = Local::new(working);
    let dim = local.dim();
    let k = working.len();
    let raw_local = local.gather(raw);
    let targets: Vec<f64> = working.iter().map(|&c| geo.target(c, opts)).collect();

    // multipliers fitted to the stationarity condition at the start point
    let mut z = local.gather(start);
    let normals: Vec<_> = working
        .iter()
        .map(|&c| normal_local(geo, &local, c, start).0)
        .collect();
    let nmat = DMatrix::from_columns(&normals);
    let mut lambda = nmat.svd(true, true).solve(&(&z - &raw_local), 1e-13).ok()?;

    let residual = |y: &[f64], z: &DVector<f64>, lambda: &DVector<f64>| -> DVector<f64> {
        let mut f = DVector::zeros(dim + k);
        let mut stat = z - &raw_local;
        for (idx, &c) in working.iter().enumerate() {
            let (nv, _) = normal_local(geo, &local, c, y);
            stat -= nv * lambda[idx];
            f[dim + idx] = geo.value(c, y) - targets[idx];
        }
        f.rows_mut(0, dim).copy_from(&stat);
        f
    };

    let scale = 1.0 + raw_local.amax();
    let mut f = residual(&y, &z, &lambda);
    for _ in 0..opts.max_newton {
        if f.amax() <= opts.tol * scale {
            return Some((y, lambda.iter().copied().collect()));
        }
        let mut jac = DMatrix::<f64>::identity(dim + k, dim + k);
        for r in dim..dim + k {
            jac[(r, r)] = 0.0;
        }
        for (idx, &c) in working.iter().enumerate() {
            let (nv, hess) = normal_local(geo, &local, c, &y);
            for r in 0..dim {
                jac[(r, dim + idx)] = -nv[r];
                jac[(dim + idx, r)] = nv[r];
            }
            if let Some((si, sj, p)) = hess {
                let w = lambda[idx];
                for a in 0..3 {
                    for b in 0..3 {
                        let v = w * p[(a, b)];
                        jac[(si + a, si + b)] -= v;
                        jac[(sj + a, sj + b)] -= v;
                        jac[(si + a, sj + b)] += v;
                        jac[(sj + a, si + b)] += v;
                    }
                }
            }
        }
        let step = jac.lu().solve(&(-&f))?;
        if !step.iter().all(|v| v.is_finite()) {
            return None;
        }
        // backtracking on the residual norm
        let base = f.norm();
        let mut t = 1.0;
        loop {
            let z_try = &z + step.rows(0, dim) * t;
            let l_try = &lambda + step.rows(dim, k) * t;
            let mut y_try = y.clone();
            local.scatter(&z_try, &mut y_try);
            let f_try = residual(&y_try, &z_try, &l_try);
            if f_try.norm() < base || t < 1e-4 {
                z = z_try;
                lambda = l_try;
                y = y_try;
                f = f_try;
                break;
            }
            t *= 0.5;
        }
    }
    if f.amax() <= 1e3 * opts.tol * scale {
        return Some((y, lambda.iter().copied().collect()));
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{allowed, sigma_unstretch, Globule};

    fn params(sigma: f64) -> ModelParams {
        ModelParams::new(sigma, 0.5, 1.5, 3).unwrap()
    }

    #[test]
    fn allowed_input_is_identity() {
        let p = params(1.0);
        let c = Configuration::new(vec![
            Globule::new([0.0; 3], 1.0),
            Globule::new([3.0, 0.0, 0.0], 1.0),
        ]);
        let out = project_to_allowed(&c, &p, &ProjectionOptions::default()).unwrap();
        assert_eq!(out.point, c);
        assert!(out.multipliers.is_empty());
        assert_eq!(out.iterations, 0);
    }

    #[test]
    fn radius_below_floor_is_lifted() {
        for &sigma in &[0.5, 1.0, 2.0] {
            let p = params(sigma);
            let h = 0.01;
            let c = Configuration::new(vec![Globule::new([0.0; 3], 0.5 / sigma - h)]);
            let out = project_to_allowed(&c, &p, &ProjectionOptions::default()).unwrap();
            assert!((out.point.globules[0].radius - 0.5 / sigma).abs() < 1e-15);
            assert!((out.multiplier(ContactKind::CapMinus(0)) - h).abs() < 1e-14);
            assert_eq!(out.point.globules[0].center, Vec3::zeros());
        }
    }

    #[test]
    fn head_on_overlap_is_symmetric() {
        let sigma = 1.5;
        let p = params(sigma);
        // stretched radii 0.6 each, required separation 1.8
        let raw = Configuration::new(vec![
            Globule::new([-0.8, 0.0, 0.0], 0.6),
            Globule::new([0.8, 0.0, 0.0], 0.6),
        ]);
        let out = project_to_allowed(&raw, &p, &ProjectionOptions::default()).unwrap();
        let (a, b) = (out.point.globules[0], out.point.globules[1]);
        assert!((a.center.x + b.center.x).abs() < 1e-14);
        assert!(a.center.x < -0.8 && b.center.x > 0.8);
        assert!(a.radius < 0.6 && (a.radius - b.radius).abs() < 1e-14);
        let gap = (a.center - b.center).norm() - sigma * (a.radius + b.radius);
        assert!(gap >= 0.0 && gap <= 1e-9);
        // displacement is lambda times the unit normal
        let lambda = out.multiplier(ContactKind::Pair(0, 1));
        let s = pair_scale(sigma);
        assert!((a.center.x - (-0.8 - lambda / s)).abs() < 1e-13);
        assert!((a.radius - (0.6 - lambda * sigma / s)).abs() < 1e-13);
        assert!(allowed(&sigma_unstretch(&out.point, sigma).unwrap(), &p));
    }

    #[test]
    fn coincident_centers_are_rejected() {
        let p = params(1.0);
        let raw = Configuration::new(vec![
            Globule::new([0.0; 3], 1.0),
            Globule::new([0.0; 3], 1.0),
        ]);
        assert!(matches!(
            project_to_allowed(&raw, &p, &ProjectionOptions::default()),
            Err(Error::DegenerateContact { .. })
        ));
    }

    #[test]
    fn exhausted_iterations_report_failure() {
        let p = params(1.0);
        let raw = Configuration::new(vec![
            Globule::new([0.0; 3], 1.0),
            Globule::new([1.0, 0.0, 0.0], 1.0),
        ]);
        let opts = ProjectionOptions {
            max_iters: 0,
            ..Default::default()
        };
        assert!(matches!(
            project_to_allowed(&raw, &p, &opts),
            Err(Error::ProjectionFailure { .. })
        ));
    }
}
