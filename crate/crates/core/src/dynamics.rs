//! Projected Euler–Maruyama integration of the reflected globule system.
//!
//! A step works in stretched coordinates (radii divided by `sigma`), where the
//! reflection is normal: the free proposal is projected onto the stretched
//! allowed set and the projection multipliers become local-time increments in
//! original coordinates,
//!
//! ```text
//! dL_ij = lambda_ij / sqrt(2 + 2 sigma^2),   dL_i+ = sigma lambda_i+,   dL_i- = sigma lambda_i-.
//! ```
//!
//! In original coordinates the constrained part of the step is then
//! `sum_j (x_i - x_j)/(r_i + r_j) dL_ij` for center `i` and
//! `-sigma^2 sum_j dL_ij - dL_i+ + dL_i-` for radius `i`.
//!
//! The hard core acts among the simulated globules only; the external
//! configuration enters through the `psi3` part of the drift.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geometry::{
    active_contacts, allowed_internal, center_offset, exterior_sphere_constant, pair_scale,
    radius_offset, BoundaryContact, Configuration, ContactKind, Globule, ModelParams, Vec3,
    COORDS_PER_GLOBULE,
};
use crate::penalization::PenalizationSpec;
use crate::projection::{project_to_allowed, ProjectionOptions};
use crate::rng;

/// Tolerance of the per-step check that the constrained displacement equals
/// the reflection terms rebuilt from the local-time increments.
pub const IDENTITY_TOL: f64 = 1e-10;

/// Random words reserved per globule within one step's stream.
const WORDS_PER_GLOBULE: u128 = 256;

/// Brownian increments of one step: `dw` drives the centers, `dw_breve` the
/// stretched radii. Each component has variance `dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct DriveIncrements {
    pub dw: Vec<Vec3>,
    pub dw_breve: Vec<f64>,
}

impl DriveIncrements {
    pub fn zeros(n: usize) -> Self {
        DriveIncrements {
            dw: vec![Vec3::zeros(); n],
            dw_breve: vec![0.0; n],
        }
    }

    /// Increments of step `step` for `n` globules. Globule `i` reads its own
    /// block of the `(seed, step)` stream, so its draw depends only on
    /// `(seed, step, i)`.
    pub fn generate(seed: u64, step: u64, n: usize, dt: f64) -> Self {
        let sd = dt.sqrt();
        let mut r = rng::stream(seed, step);
        let mut out = DriveIncrements::zeros(n);
        for i in 0..n {
            r.set_word_pos(i as u128 * WORDS_PER_GLOBULE);
            let mut z = || -> f64 { r.sample::<f64, _>(StandardNormal) * sd };
            out.dw[i] = Vec3::new(z(), z(), z());
            out.dw_breve[i] = z();
        }
        out
    }

    pub fn len(&self) -> usize {
        self.dw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dw.is_empty()
    }

    pub fn negated(&self) -> Self {
        DriveIncrements {
            dw: self.dw.iter().map(|v| -v).collect(),
            dw_breve: self.dw_breve.iter().map(|v| -v).collect(),
        }
    }

    /// Splits an increment over `dt` into its two halves by sampling the
    /// Brownian bridge at the midpoint.
    pub fn split<R: Rng>(&self, dt: f64, rng: &mut R) -> (Self, Self) {
        let sd = 0.5 * dt.sqrt();
        let mut first = DriveIncrements::zeros(self.len());
        for i in 0..self.len() {
            let z = Vec3::new(
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
            );
            first.dw[i] = 0.5 * self.dw[i] + sd * z;
            first.dw_breve[i] = 0.5 * self.dw_breve[i] + sd * rng.sample::<f64, _>(StandardNormal);
        }
        let second = DriveIncrements {
            dw: self.dw.iter().zip(&first.dw).map(|(a, b)| a - b).collect(),
            dw_breve: self
                .dw_breve
                .iter()
                .zip(&first.dw_breve)
                .map(|(a, b)| a - b)
                .collect(),
        };
        (first, second)
    }
}

/// Accumulated local times. Pair entries are stored once under `(i, j)` with
/// `i < j`; absent pairs have local time zero.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LocalTimeLedger {
    pub pair: BTreeMap<(usize, usize), f64>,
    pub cap_plus: Vec<f64>,
    pub cap_minus: Vec<f64>,
}

impl LocalTimeLedger {
    pub fn new(n: usize) -> Self {
        LocalTimeLedger {
            pair: BTreeMap::new(),
            cap_plus: vec![0.0; n],
            cap_minus: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.cap_plus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cap_plus.is_empty()
    }

    /// `L_ij`, symmetric in its arguments; `L_ii = 0`.
    pub fn pair_value(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return 0.0;
        }
        *self.pair.get(&(i.min(j), i.max(j))).unwrap_or(&0.0)
    }

    pub fn get(&self, kind: ContactKind) -> f64 {
        match kind {
            ContactKind::Pair(i, j) => self.pair_value(i, j),
            ContactKind::CapPlus(i) => self.cap_plus[i],
            ContactKind::CapMinus(i) => self.cap_minus[i],
        }
    }

    pub fn add(&mut self, kind: ContactKind, v: f64) {
        match kind {
            ContactKind::Pair(i, j) => {
                *self.pair.entry((i.min(j), i.max(j))).or_insert(0.0) += v;
            }
            ContactKind::CapPlus(i) => self.cap_plus[i] += v,
            ContactKind::CapMinus(i) => self.cap_minus[i] += v,
        }
    }

    pub fn apply(&mut self, increments: &[(ContactKind, f64)]) {
        for &(k, v) in increments {
            self.add(k, v);
        }
    }

    /// Every entry, pairs first, caps in index order.
    pub fn entries(&self) -> Vec<(ContactKind, f64)> {
        let mut out: Vec<_> = self
            .pair
            .iter()
            .map(|(&(i, j), &v)| (ContactKind::Pair(i, j), v))
            .collect();
        for i in 0..self.len() {
            out.push((ContactKind::CapPlus(i), self.cap_plus[i]));
            out.push((ContactKind::CapMinus(i), self.cap_minus[i]));
        }
        out
    }

    /// `self - earlier`; pair entries that cancel are dropped.
    pub fn since(&self, earlier: &LocalTimeLedger) -> LocalTimeLedger {
        let mut pair = BTreeMap::new();
        for (&k, &v) in &self.pair {
            let d = v - earlier.pair.get(&k).copied().unwrap_or(0.0);
            if d != 0.0 {
                pair.insert(k, d);
            }
        }
        let sub = |a: &[f64], b: &[f64]| -> Vec<f64> {
            a.iter()
                .enumerate()
                .map(|(i, v)| v - b.get(i).copied().unwrap_or(0.0))
                .collect()
        };
        LocalTimeLedger {
            pair,
            cap_plus: sub(&self.cap_plus, &earlier.cap_plus),
            cap_minus: sub(&self.cap_minus, &earlier.cap_minus),
        }
    }

    /// Componentwise `self >= earlier - tol`.
    pub fn dominates(&self, earlier: &LocalTimeLedger, tol: f64) -> bool {
        earlier.entries().iter().all(|&(k, v)| self.get(k) >= v - tol)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    /// New state, original coordinates.
    pub next: Configuration,
    /// Unconstrained proposal (drift and noise only), original coordinates.
    pub free: Configuration,
    /// Positive local-time increments, original coordinates.
    pub dl: Vec<(ContactKind, f64)>,
    /// Constraints active at the projected point, stretched coordinates.
    pub active_set: Vec<BoundaryContact>,
    pub projection_iters: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntegratorOptions {
    pub projection: ProjectionOptions,
    /// How many times a failing step may be halved.
    pub max_halvings: u32,
    /// A state (and ledger snapshot) is recorded every `record_stride` steps.
    pub record_stride: usize,
    pub store_drive: bool,
    /// Rebuild the reflection terms from the local-time increments at every
    /// step and fail when they disagree with the actual displacement.
    pub check_identity: bool,
}

impl Default for IntegratorOptions {
    fn default() -> Self {
        IntegratorOptions {
            projection: ProjectionOptions::default(),
            max_halvings: 4,
            record_stride: 1,
            store_drive: false,
            check_identity: cfg!(debug_assertions),
        }
    }
}

/// A step that had to be split; `depth` is the number of halvings used.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Refinement {
    pub step: usize,
    pub depth: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    /// Recording grid, `times[0] = 0`.
    pub times: Vec<f64>,
    pub states: Vec<Configuration>,
    /// Accumulated local times at each recorded time.
    pub ledgers: Vec<LocalTimeLedger>,
    /// Increments of every integration step when requested.
    pub drive: Option<Vec<DriveIncrements>>,
    pub dt: f64,
    pub refinements: Vec<Refinement>,
}

impl TrajectoryRecord {
    pub fn final_time(&self) -> f64 {
        self.times.last().copied().unwrap_or(0.0)
    }

    pub fn n_globules(&self) -> usize {
        self.states.first().map_or(0, |c| c.len())
    }
}

/// One integration step (or sub-step) as seen by an observer.
#[derive(Debug)]
pub struct StepEvent<'a> {
    pub step: usize,
    pub depth: u32,
    pub dt: f64,
    pub prev: &'a Configuration,
    pub result: &'a StepResult,
}

/// Drift in original coordinates: `-1/2 grad_x psi` for centers and
/// `-sigma^2/2 d_r psi` for radii.
pub fn drift(c: &Configuration, spec: &PenalizationSpec, params: &ModelParams) -> DVector<f64> {
    let s2 = params.sigma() * params.sigma();
    let mut out = DVector::zeros(COORDS_PER_GLOBULE * c.len());
    for (i, g) in c.iter().enumerate() {
        let (gx, gr) = spec.psi_gradient(g);
        for k in 0..3 {
            out[center_offset(i) + k] = -0.5 * gx[k];
        }
        out[radius_offset(i)] = -0.5 * s2 * gr;
    }
    out
}

pub fn step(
    c: &Configuration,
    dt: f64,
    drive: &DriveIncrements,
    spec: &PenalizationSpec,
    params: &ModelParams,
) -> Result<StepResult> {
    step_with(c, dt, drive, spec, params, &IntegratorOptions::default())
}

pub fn step_with(
    c: &Configuration,
    dt: f64,
    drive: &DriveIncrements,
    spec: &PenalizationSpec,
    params: &ModelParams,
    opts: &IntegratorOptions,
) -> Result<StepResult> {
    let n = c.len();
    if drive.len() != n {
        return Err(Error::param(
            "drive",
            format!("has {} globules, configuration has {n}", drive.len()),
        ));
    }
    let sigma = params.sigma();
    let b = drift(c, spec, params);

    let mut max_disp: f64 = 0.0;
    let raw: Configuration = c
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let o = center_offset(i);
            let dx = Vec3::new(b[o], b[o + 1], b[o + 2]) * dt + drive.dw[i];
            let dr = b[radius_offset(i)] / sigma * dt + drive.dw_breve[i];
            max_disp = max_disp.max((dx.norm_squared() + dr * dr).sqrt());
            Globule {
                center: g.center + dx,
                radius: g.radius / sigma + dr,
            }
        })
        .collect();

    // a pair constraint sees two globules at once
    let bound = 0.5 * exterior_sphere_constant(params);
    let displacement = std::f64::consts::SQRT_2 * max_disp;
    if displacement >= bound {
        return Err(Error::StepTooLarge {
            displacement,
            bound,
        });
    }

    let proj = project_to_allowed(&raw, params, &opts.projection)?;
    let scale = pair_scale(sigma);
    let dl: Vec<(ContactKind, f64)> = proj
        .multipliers
        .iter()
        .filter(|(_, l)| *l > 0.0)
        .map(|&(k, l)| match k {
            ContactKind::Pair(..) => (k, l / scale),
            _ => (k, sigma * l),
        })
        .collect();

    let (rm, rp) = (params.r_minus(), params.r_plus());
    let unstretch = |g: &Globule| Globule {
        center: g.center,
        radius: g.radius * sigma,
    };
    let free: Configuration = raw.iter().map(unstretch).collect();
    let next: Configuration = proj
        .point
        .iter()
        .map(|g| {
            let mut u = unstretch(g);
            u.radius = u.radius.clamp(rm, rp);
            u
        })
        .collect();

    if !allowed_internal(&next, params) {
        return Err(Error::Numerical(
            "projected state violates the hard-core constraints".into(),
        ));
    }
    let active_set = active_contacts(&proj.point, params, opts.projection.tol_active)?;
    let result = StepResult {
        next,
        free,
        dl,
        active_set,
        projection_iters: proj.iterations,
    };
    if opts.check_identity {
        let err = reflection_identity_error(&result, params);
        if err > IDENTITY_TOL {
            return Err(Error::Numerical(format!(
                "reflection terms rebuilt from local times miss the displacement by {err:.3e}"
            )));
        }
    }
    Ok(result)
}

/// Oblique reflection direction of a constraint, original
/// coordinates, evaluated at `c`.
pub fn reflection_direction(c: &Configuration, kind: ContactKind, sigma: f64) -> DVector<f64> {
    let mut d = DVector::zeros(COORDS_PER_GLOBULE * c.len());
    match kind {
        ContactKind::Pair(i, j) => {
            let (a, b) = (&c.globules[i], &c.globules[j]);
            let u = (a.center - b.center) / (a.radius + b.radius);
            for k in 0..3 {
                d[center_offset(i) + k] = u[k];
                d[center_offset(j) + k] = -u[k];
            }
            d[radius_offset(i)] = -sigma * sigma;
            d[radius_offset(j)] = -sigma * sigma;
        }
        ContactKind::CapPlus(i) => d[radius_offset(i)] = -1.0,
        ContactKind::CapMinus(i) => d[radius_offset(i)] = 1.0,
    }
    d
}

/// Max-norm gap between `next - free` and the reflection terms built from
/// `dl`.
pub fn reflection_identity_error(r: &StepResult, params: &ModelParams) -> f64 {
    let mut expected = DVector::zeros(COORDS_PER_GLOBULE * r.next.len());
    for &(k, v) in &r.dl {
        expected += reflection_direction(&r.next, k, params.sigma()) * v;
    }
    let actual = r.next.to_vector() - r.free.to_vector();
    (actual - expected).amax()
}

/// Least-squares fit of the constrained displacement onto the reflection
/// directions of the active constraints.
#[derive(Debug, Clone, PartialEq)]
pub struct ReflectionFit {
    pub residual: f64,
    pub coefficients: Vec<(ContactKind, f64)>,
}

pub fn reflection_fit(r: &StepResult, params: &ModelParams) -> ReflectionFit {
    let disp = r.next.to_vector() - r.free.to_vector();
    let kinds: Vec<ContactKind> = r.active_set.iter().map(|c| c.kind).collect();
    if kinds.is_empty() {
        return ReflectionFit {
            residual: disp.norm(),
            coefficients: Vec::new(),
        };
    }
    let cols: Vec<DVector<f64>> = kinds
        .iter()
        .map(|&k| reflection_direction(&r.next, k, params.sigma()))
        .collect();
    let a = DMatrix::from_columns(&cols);
    let coef = a
        .clone()
        .svd(true, true)
        .solve(&disp, 1e-14)
        .unwrap_or_else(|_| DVector::zeros(kinds.len()));
    ReflectionFit {
        residual: (a * &coef - disp).norm(),
        coefficients: kinds.into_iter().zip(coef.iter().copied()).collect(),
    }
}

pub fn simulate(
    initial: &Configuration,
    t_final: f64,
    dt: f64,
    spec: &PenalizationSpec,
    params: &ModelParams,
    seed: u64,
) -> Result<TrajectoryRecord> {
    simulate_with(
        initial,
        t_final,
        dt,
        spec,
        params,
        seed,
        &IntegratorOptions::default(),
        |_| {},
    )
}

/// Number of steps of size `dt` in `[0, t_final]`, failing unless the ratio is
/// an integer.
pub fn step_count(t_final: f64, dt: f64) -> Result<usize> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::param("dt", format!("must be positive, got {dt}")));
    }
    if !(t_final.is_finite() && t_final > 0.0) {
        return Err(Error::param("T", format!("must be positive, got {t_final}")));
    }
    let ratio = t_final / dt;
    let k = ratio.round();
    if (ratio - k).abs() > 1e-9 * ratio.max(1.0) || k < 1.0 {
        return Err(Error::Grid(format!("T / dt = {ratio} is not an integer")));
    }
    Ok(k as usize)
}

#[allow(clippy::too_many_arguments)]
pub fn simulate_with<F: FnMut(&StepEvent)>(
    initial: &Configuration,
    t_final: f64,
    dt: f64,
    spec: &PenalizationSpec,
    params: &ModelParams,
    seed: u64,
    opts: &IntegratorOptions,
    mut observer: F,
) -> Result<TrajectoryRecord> {
    let steps = step_count(t_final, dt)?;
    let stride = opts.record_stride;
    if stride == 0 || steps % stride != 0 {
        return Err(Error::Grid(format!(
            "record stride {stride} does not divide the {steps} steps"
        )));
    }
    if !allowed_internal(initial, params) {
        return Err(Error::param("initial", "configuration is not allowed"));
    }
    let n = initial.len();
    let mut state = initial.clone();
    let mut ledger = LocalTimeLedger::new(n);
    let mut rec = TrajectoryRecord {
        times: vec![0.0],
        states: vec![state.clone()],
        ledgers: vec![ledger.clone()],
        drive: opts.store_drive.then(Vec::new),
        dt,
        refinements: Vec::new(),
    };

    let mut runner = Runner {
        spec,
        params,
        opts,
        seed,
        observer: &mut observer,
    };
    for k in 0..steps {
        let drive = DriveIncrements::generate(seed, k as u64, n, dt);
        let mut bridge = None;
        let mut depth = 0;
        match runner.advance(&state, dt, &drive, k, 0, &mut bridge, &mut depth) {
            Ok((next, dl)) => {
                ledger.apply(&dl);
                state = next;
            }
            Err(e) => {
                return Err(Error::SimulationAborted {
                    step: k,
                    last_good: Box::new(state),
                    source: Box::new(e),
                })
            }
        }
        if depth > 0 {
            rec.refinements.push(Refinement { step: k, depth });
        }
        if let Some(d) = rec.drive.as_mut() {
            d.push(drive);
        }
        if (k + 1) % stride == 0 {
            rec.times.push((k + 1) as f64 * dt);
            rec.states.push(state.clone());
            rec.ledgers.push(ledger.clone());
        }
    }
    Ok(rec)
}

struct Runner<'a> {
    spec: &'a PenalizationSpec,
    params: &'a ModelParams,
    opts: &'a IntegratorOptions,
    seed: u64,
    observer: &'a mut dyn FnMut(&StepEvent),
}

impl Runner<'_> {
    #[allow(clippy::too_many_arguments)]
    fn advance(
        &mut self,
        c: &Configuration,
        dt: f64,
        drive: &DriveIncrements,
        step: usize,
        depth: u32,
        bridge: &mut Option<rand_chacha::ChaCha8Rng>,
        max_depth: &mut u32,
    ) -> Result<(Configuration, Vec<(ContactKind, f64)>)> {
        match step_with(c, dt, drive, self.spec, self.params, self.opts) {
            Ok(r) => {
                (self.observer)(&StepEvent {
                    step,
                    depth,
                    dt,
                    prev: c,
                    result: &r,
                });
                Ok((r.next, r.dl))
            }
            Err(e) if retryable(&e) && depth < self.opts.max_halvings => {
                *max_depth = (*max_depth).max(depth + 1);
                let r = bridge.get_or_insert_with(|| rng::bridge_stream(self.seed, step as u64));
                let (a, b) = drive.split(dt, r);
                let (mid, mut dl) = self.advance(c, 0.5 * dt, &a, step, depth + 1, bridge, max_depth)?;
                let (end, dl2) = self.advance(&mid, 0.5 * dt, &b, step, depth + 1, bridge, max_depth)?;
                dl.extend(dl2);
                Ok((end, dl))
            }
            Err(e) => Err(e),
        }
    }
}

fn retryable(e: &Error) -> bool {
    matches!(
        e,
        Error::ProjectionFailure { .. } | Error::StepTooLarge { .. } | Error::DegenerateContact { .. }
    )
}

/// Simulates one trajectory per initial configuration in parallel.
/// Trajectory `k` uses the seed `split_seed(seed, k)`, so the ensemble does
/// not depend on the number of worker threads.
#[allow(clippy::too_many_arguments)]
pub fn simulate_ensemble(
    initials: &[Configuration],
    t_final: f64,
    dt: f64,
    spec: &PenalizationSpec,
    params: &ModelParams,
    seed: u64,
    opts: &IntegratorOptions,
) -> Result<Vec<TrajectoryRecord>> {
    initials
        .par_iter()
        .enumerate()
        .map(|(k, c)| simulate_with(c, t_final, dt, spec, params, rng::split_seed(seed, k as u64), opts, |_| {}))
        .collect()
}

/// Reverses the time direction: state `k` of the result is state `K - k` of
/// `traj`, the ledger at time `t` is `L(T) - L(T - t)` and the stored drive is
/// reversed and negated.
pub fn time_reverse(traj: &TrajectoryRecord) -> TrajectoryRecord {
    let last = traj.ledgers.last().cloned().unwrap_or_default();
    let steps = traj
        .drive
        .as_ref()
        .map(|d| d.len())
        .unwrap_or_else(|| (traj.final_time() / traj.dt).round() as usize);
    TrajectoryRecord {
        times: traj.times.clone(),
        states: traj.states.iter().rev().cloned().collect(),
        ledgers: traj.ledgers.iter().rev().map(|l| last.since(l)).collect(),
        drive: traj
            .drive
            .as_ref()
            .map(|d| d.iter().rev().map(DriveIncrements::negated).collect()),
        dt: traj.dt,
        refinements: traj
            .refinements
            .iter()
            .rev()
            .map(|r| Refinement {
                step: steps.saturating_sub(1 + r.step),
                depth: r.depth,
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::allowed;

    fn params(sigma: f64) -> ModelParams {
        ModelParams::new(sigma, 0.5, 1.5, 5).unwrap()
    }

    fn opts() -> IntegratorOptions {
        IntegratorOptions {
            check_identity: true,
            ..Default::default()
        }
    }

    #[test]
    fn drift_examples() {
        let p = params(1.3);
        let spec = PenalizationSpec::new(&p).unwrap();
        let inside = Configuration::new(vec![Globule::new([0.0; 3], 1.0), Globule::new([3.0, 0.0, 0.0], 0.7)]);
        assert_eq!(drift(&inside, &spec, &p).amax(), 0.0);

        let w = spec.transition_width();
        let big = Configuration::new(vec![Globule::new([0.0; 3], 1.5 + 2.0 * w)]);
        let b = drift(&big, &spec, &p);
        assert!((b[3] + 1.3 * 1.3 * 5.0 / 2.0).abs() < 1e-12);

        let far = Configuration::new(vec![Globule::new([0.0, 6.0, 0.0], 1.0)]);
        let b = drift(&far, &spec, &p);
        assert!((b[1] + 1.0).abs() < 1e-12 && b[0] == 0.0 && b[2] == 0.0);
    }

    #[test]
    fn free_step_adds_noise() {
        let p = params(2.0);
        let spec = PenalizationSpec::new(&p).unwrap();
        let c = Configuration::new(vec![Globule::new([0.0; 3], 1.0)]);
        let drive = DriveIncrements {
            dw: vec![Vec3::new(0.01, -0.02, 0.005)],
            dw_breve: vec![0.01],
        };
        let r = step_with(&c, 1e-3, &drive, &spec, &p, &opts()).unwrap();
        let g = r.next.globules[0];
        assert!((g.center - Vec3::new(0.01, -0.02, 0.005)).norm() < 1e-15);
        // unit noise in the stretched radius is sigma times that in original units
        assert!((g.radius - 1.02).abs() < 1e-14);
        assert!(r.dl.is_empty());
    }

    #[test]
    fn cap_plus_hit() {
        let p = params(2.0);
        let spec = PenalizationSpec::new(&p).unwrap();
        let c = Configuration::new(vec![Globule::new([0.0; 3], 1.45)]);
        let h = 0.03;
        // stretched radius noise b gives original radius 1.45 + 2 b = 1.5 + h
        let drive = DriveIncrements {
            dw: vec![Vec3::zeros()],
            dw_breve: vec![(0.05 + h) / 2.0],
        };
        let r = step_with(&c, 1e-4, &drive, &spec, &p, &opts()).unwrap();
        assert_eq!(r.next.globules[0].radius, 1.5);
        assert_eq!(r.next.globules[0].center, Vec3::zeros());
        assert_eq!(r.dl.len(), 1);
        assert_eq!(r.dl[0].0, ContactKind::CapPlus(0));
        assert!((r.dl[0].1 - h).abs() < 1e-12);
    }

    #[test]
    fn pair_collision_follows_oblique_directions() {
        for sigma in [0.5, 1.0, 2.0] {
            let p = params(sigma);
            let spec = PenalizationSpec::new(&p).unwrap();
            let c = Configuration::new(vec![
                Globule::new([0.0; 3], 1.0),
                Globule::new([2.01, 0.0, 0.0], 1.0),
            ]);
            let drive = DriveIncrements {
                dw: vec![Vec3::new(0.02, 0.001, 0.0), Vec3::new(-0.02, 0.0, 0.0)],
                dw_breve: vec![0.001, 0.0],
            };
            let r = step_with(&c, 1e-4, &drive, &spec, &p, &opts()).unwrap();
            assert!(allowed(&r.next, &p));
            assert!(r.dl.iter().any(|(k, v)| *k == ContactKind::Pair(0, 1) && *v > 0.0));
            let fit = reflection_fit(&r, &p);
            assert!(fit.residual < 1e-8, "residual {}", fit.residual);
            assert!(reflection_identity_error(&r, &p) < IDENTITY_TOL);
        }
    }

    #[test]
    fn drive_split_preserves_total() {
        let d = DriveIncrements::generate(3, 9, 4, 0.01);
        let mut r = rng::bridge_stream(3, 9);
        let (a, b) = d.split(0.01, &mut r);
        for i in 0..4 {
            assert!((a.dw[i] + b.dw[i] - d.dw[i]).norm() < 1e-15);
            assert!((a.dw_breve[i] + b.dw_breve[i] - d.dw_breve[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn drive_depends_on_globule_index_only() {
        let a = DriveIncrements::generate(11, 5, 3, 1.0);
        let b = DriveIncrements::generate(11, 5, 7, 1.0);
        assert_eq!(a.dw[..], b.dw[..3]);
        assert_eq!(a.dw_breve[..], b.dw_breve[..3]);
        assert_ne!(a, DriveIncrements::generate(11, 6, 3, 1.0));
    }

    #[test]
    fn simulate_is_deterministic_and_records_grid() {
        let p = params(1.5);
        let spec = PenalizationSpec::new(&p).unwrap();
        let c = Configuration::new(vec![
            Globule::new([0.0; 3], 1.0),
            Globule::new([2.05, 0.0, 0.0], 1.0),
        ]);
        let o = IntegratorOptions {
            record_stride: 10,
            ..opts()
        };
        let a = simulate_with(&c, 0.1, 1e-3, &spec, &p, 4, &o, |_| {}).unwrap();
        let b = simulate_with(&c, 0.1, 1e-3, &spec, &p, 4, &o, |_| {}).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.states.len(), 11);
        assert_eq!(a.states[0], c);
        assert!((a.final_time() - 0.1).abs() < 1e-15);
        for w in a.ledgers.windows(2) {
            assert!(w[1].dominates(&w[0], 0.0));
        }
    }

    #[test]
    fn simulate_rejects_bad_grid() {
        let p = params(1.0);
        let spec = PenalizationSpec::new(&p).unwrap();
        let c = Configuration::new(vec![Globule::new([0.0; 3], 1.0)]);
        assert!(matches!(simulate(&c, 1.0, 0.3, &spec, &p, 0), Err(Error::Grid(_))));
    }

    #[test]
    fn aborts_carry_last_good_state() {
        let p = params(1.0);
        let spec = PenalizationSpec::new(&p).unwrap();
        let c = Configuration::new(vec![Globule::new([0.0; 3], 1.0)]);
        // steps this large exceed the displacement bound even after halving
        let err = simulate(&c, 100.0, 100.0, &spec, &p, 1).unwrap_err();
        match err {
            Error::SimulationAborted { step, last_good, .. } => {
                assert_eq!(step, 0);
                assert_eq!(*last_good, c);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn halving_rescues_moderate_steps() {
        let p = params(1.0);
        let spec = PenalizationSpec::new(&p).unwrap();
        let c = Configuration::new(vec![Globule::new([0.0; 3], 1.0)]);
        // bound 0.5 * 0.5 * 2 = 0.5; typical displacement sqrt(2 * 4 dt)
        let rec = simulate(&c, 1.0, 0.05, &spec, &p, 2).unwrap();
        assert!(!rec.refinements.is_empty());
        assert!(rec.states.iter().all(|s| allowed(s, &p)));
    }

    #[test]
    fn reverse_twice_is_identity() {
        let p = params(1.5);
        let spec = PenalizationSpec::new(&p).unwrap();
        let c = Configuration::new(vec![
            Globule::new([0.0; 3], 1.0),
            Globule::new([2.41, 0.0, 0.0], 1.4),
        ]);
        let o = IntegratorOptions {
            store_drive: true,
            ..opts()
        };
        let a = simulate_with(&c, 0.2, 1e-3, &spec, &p, 8, &o, |_| {}).unwrap();
        let rr = time_reverse(&time_reverse(&a));
        assert_eq!(rr.states, a.states);
        assert_eq!(rr.drive, a.drive);
        for (x, y) in rr.ledgers.iter().zip(&a.ledgers) {
            for (k, v) in y.entries() {
                assert!((x.get(k) - v).abs() < 1e-12);
            }
        }

        let r = time_reverse(&a);
        let k_max = a.times.len() - 1;
        for k in 0..=k_max {
            // reversed increments over [0, t_k] equal forward ones over [T - t_k, T]
            let fwd = a.ledgers[k_max].since(&a.ledgers[k_max - k]);
            for (kind, v) in fwd.entries() {
                assert!((r.ledgers[k].get(kind) - v).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn constant_trajectory_reverses_to_itself() {
        let c = Configuration::new(vec![Globule::new([1.0, 2.0, 3.0], 0.7)]);
        let t = TrajectoryRecord {
            times: vec![0.0, 0.5, 1.0],
            states: vec![c.clone(); 3],
            ledgers: vec![LocalTimeLedger::new(1); 3],
            drive: None,
            dt: 0.5,
            refinements: Vec::new(),
        };
        assert_eq!(time_reverse(&t), t);
    }
}
