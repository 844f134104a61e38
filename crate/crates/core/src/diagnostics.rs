//! Path functionals and statistical checks on simulated trajectories:
//! moduli of continuity, epsilon-chains, nice-path membership, localization
//! index sets, the reversibility statistic and the two scaling-law fits.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::dynamics::TrajectoryRecord;
use crate::error::{Error, Result};
use crate::geometry::Configuration;
use crate::penalization::PenalizationSpec;
use crate::sampler::{sample_penalized_many, SamplerConfig};
use crate::stats::{jackknife, linear_fit, mean, LinearFit};
use crate::{rng, ModelParams};

/// Work cap of the chain search, in DFS expansions.
pub const CHAIN_SEARCH_LIMIT: usize = 10_000_000;

/// Smallest ensemble accepted by [`reversibility_statistic`].
pub const MIN_ENSEMBLE: usize = 30;

/// Continuity exponent of the nice-path scheme.
pub const KAPPA: f64 = 0.25;

/// Relative slack when matching times against the recording grid.
const GRID_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathRegularityParams {
    pub delta: f64,
    pub epsilon: f64,
    /// Chain length `M`.
    pub chain_len: usize,
    /// Scale integer `m`.
    pub scale: u32,
}

impl PathRegularityParams {
    pub fn new(delta: f64, epsilon: f64, chain_len: usize, scale: u32) -> Result<Self> {
        if !(delta > 0.0 && delta <= 1.0) {
            return Err(Error::param("delta", format!("must lie in (0, 1], got {delta}")));
        }
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::param("epsilon", "must be positive"));
        }
        if chain_len < 2 {
            return Err(Error::param("M", "chain length must be at least 2"));
        }
        Ok(PathRegularityParams {
            delta,
            epsilon,
            chain_len,
            scale,
        })
    }

    /// Parameters tied to scale `m`: `delta = 2^{-4m}`.
    pub fn at_scale(scale: u32, chain_len: usize, epsilon: f64) -> Result<Self> {
        PathRegularityParams::new(slot_width(scale), epsilon, chain_len, scale)
    }

    pub fn kappa(&self) -> f64 {
        KAPPA
    }

    /// `ell(m) = (1 + 3 r_plus) M 2^{4m}`.
    pub fn ell_of_scale(&self, r_plus: f64) -> f64 {
        (1.0 + 3.0 * r_plus) * self.chain_len as f64 * slots(self.scale) as f64
    }

    /// `v_{k,m} = rho + (1 + 3 r_plus M) 2^{4m} - 3 r_plus M k`.
    pub fn localization_radius(&self, rho: f64, r_plus: f64, k: f64) -> f64 {
        let m3 = 3.0 * r_plus * self.chain_len as f64;
        rho + (1.0 + m3) * slots(self.scale) as f64 - m3 * k
    }
}

/// `2^{4m}`.
pub fn slots(scale: u32) -> u64 {
    1u64 << (4 * scale)
}

/// `delta(m) = 2^{-4m}`.
pub fn slot_width(scale: u32) -> f64 {
    1.0 / slots(scale) as f64
}

fn check_index(traj: &TrajectoryRecord, i: usize) -> Result<()> {
    let n = traj.n_globules();
    if i >= n {
        return Err(Error::IndexOutOfRange { index: i, len: n });
    }
    Ok(())
}

/// `sup sqrt(|X_i(t) - X_i(s)|^2 + (r_i(t) - r_i(s))^2)` over recorded times
/// with `|t - s| <= delta`.
pub fn modulus_of_continuity(traj: &TrajectoryRecord, i: usize, delta: f64) -> Result<f64> {
    check_index(traj, i)?;
    let t_end = traj.final_time();
    if !(delta > 0.0 && delta <= t_end * (1.0 + GRID_TOL)) {
        return Err(Error::param("delta", format!("must lie in (0, {t_end}], got {delta}")));
    }
    let pts: Vec<(f64, [f64; 4])> = traj
        .times
        .iter()
        .zip(&traj.states)
        .map(|(&t, c)| {
            let g = &c.globules[i];
            (t, [g.center.x, g.center.y, g.center.z, g.radius])
        })
        .collect();
    let reach = delta * (1.0 + GRID_TOL);
    let mut w: f64 = 0.0;
    for a in 0..pts.len() {
        for b in a + 1..pts.len() {
            if pts[b].0 - pts[a].0 > reach {
                break;
            }
            let d2: f64 = (0..4).map(|k| (pts[b].1[k] - pts[a].1[k]).powi(2)).sum();
            w = w.max(d2);
        }
    }
    Ok(w.sqrt())
}

/// Largest modulus over all globules.
pub fn max_modulus(traj: &TrajectoryRecord, delta: f64) -> Result<f64> {
    (0..traj.n_globules()).try_fold(0.0f64, |acc, i| Ok(acc.max(modulus_of_continuity(traj, i, delta)?)))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainReport {
    pub found: bool,
    /// `M` distinct indices, consecutive ones epsilon-close, when found.
    pub witness: Vec<usize>,
}

/// Adjacency lists of the graph joining globules whose gap is below `epsilon`.
pub fn proximity_graph(c: &Configuration, epsilon: f64) -> Vec<Vec<usize>> {
    let n = c.len();
    let mut adj = vec![Vec::new(); n];
    for i in 0..n {
        for j in i + 1..n {
            if c.globules[i].gap_to(&c.globules[j]) < epsilon {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
    }
    adj
}

fn components(adj: &[Vec<usize>]) -> Vec<usize> {
    let n = adj.len();
    let mut label = vec![usize::MAX; n];
    let mut next = 0;
    for s in 0..n {
        if label[s] != usize::MAX {
            continue;
        }
        let mut stack = vec![s];
        label[s] = next;
        while let Some(v) = stack.pop() {
            for &u in &adj[v] {
                if label[u] == usize::MAX {
                    label[u] = next;
                    stack.push(u);
                }
            }
        }
        next += 1;
    }
    label
}

/// Searches for `M` distinct globules forming a path in the epsilon-proximity
/// graph (depth-first search over simple paths).
pub fn detect_chain(c: &Configuration, epsilon: f64, chain_len: usize) -> Result<ChainReport> {
    if chain_len < 2 {
        return Err(Error::param("M", "chain length must be at least 2"));
    }
    let adj = proximity_graph(c, epsilon);
    let label = components(&adj);
    let mut size = vec![0usize; adj.len()];
    for &l in &label {
        size[l] += 1;
    }
    let mut starts: Vec<usize> = (0..adj.len())
        .filter(|&v| size[label[v]] >= chain_len && !adj[v].is_empty())
        .collect();
    // low-degree vertices are the likeliest path ends
    starts.sort_by_key(|&v| adj[v].len());

    let mut budget = CHAIN_SEARCH_LIMIT;
    let mut on_path = vec![false; adj.len()];
    let mut path = Vec::with_capacity(chain_len);
    for s in starts {
        path.clear();
        path.push(s);
        on_path[s] = true;
        let found = extend(&adj, chain_len, &mut path, &mut on_path, &mut budget)?;
        on_path[s] = false;
        if found {
            return Ok(ChainReport {
                found: true,
                witness: path,
            });
        }
    }
    Ok(ChainReport {
        found: false,
        witness: Vec::new(),
    })
}

fn extend(
    adj: &[Vec<usize>],
    target: usize,
    path: &mut Vec<usize>,
    on_path: &mut [bool],
    budget: &mut usize,
) -> Result<bool> {
    if path.len() == target {
        return Ok(true);
    }
    let last = *path.last().expect("path starts nonempty");
    for &u in &adj[last] {
        if on_path[u] {
            continue;
        }
        if *budget == 0 {
            return Err(Error::ChainSearchOverflow {
                limit: CHAIN_SEARCH_LIMIT,
            });
        }
        *budget -= 1;
        path.push(u);
        on_path[u] = true;
        if extend(adj, target, path, on_path, budget)? {
            return Ok(true);
        }
        on_path[u] = false;
        path.pop();
    }
    Ok(false)
}

/// Recording-grid index of time `t`, failing when `t` is not a grid time.
fn grid_index(traj: &TrajectoryRecord, t: f64) -> Result<usize> {
    let k = traj
        .times
        .partition_point(|&s| s < t - GRID_TOL * t.abs().max(1.0))
        .min(traj.times.len().saturating_sub(1));
    let ok = traj
        .times
        .get(k)
        .is_some_and(|&s| (s - t).abs() <= GRID_TOL * t.abs().max(1.0));
    if ok {
        Ok(k)
    } else {
        Err(Error::Grid(format!("time {t} is not on the recording grid")))
    }
}

/// Number of `delta`-slots in the recorded horizon, failing unless the
/// horizon is a whole number of slots and every slot boundary is recorded.
fn slot_count(traj: &TrajectoryRecord, delta: f64) -> Result<usize> {
    let t_end = traj.final_time();
    let ratio = t_end / delta;
    let k = ratio.round();
    if k < 1.0 || (ratio - k).abs() > 1e-9 * ratio.max(1.0) {
        return Err(Error::Grid(format!(
            "horizon {t_end} is not a whole number of slots of width {delta}"
        )));
    }
    for j in 0..=k as usize {
        grid_index(traj, j as f64 * delta)?;
    }
    Ok(k as usize)
}

/// `(in N~(delta, eps), in N~~(delta, M, eps))`: every globule's modulus is
/// at most `eps`, and no recorded state at times `delta k` (before the
/// horizon) contains an eps-chain of `M` globules.
pub fn nice_path_membership(traj: &TrajectoryRecord, p: &PathRegularityParams) -> Result<(bool, bool)> {
    let k_max = slot_count(traj, p.delta)?;
    let regular = max_modulus(traj, p.delta)? <= p.epsilon;
    let mut chain_free = true;
    for k in 0..k_max {
        let idx = grid_index(traj, k as f64 * p.delta)?;
        if detect_chain(&traj.states[idx], p.epsilon, p.chain_len)?.found {
            chain_free = false;
            break;
        }
    }
    Ok((regular, chain_free))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationReport {
    /// `J_{k,m}` for each slot `k`, sorted.
    pub sets: Vec<Vec<usize>>,
    /// `v_{k,m}` for each slot.
    pub radii: Vec<f64>,
    /// `(k, i)`: `i` is in `J_{k+1,m}` but not in `J_{k,m}`.
    pub nesting_violations: Vec<(usize, usize)>,
    /// Globules with `|X_i(0)| <= rho` missing from the last set.
    pub initial_violations: Vec<usize>,
    /// `(i, j, k)`: `i` in `J_{k,m}`, `j` outside, closer than the margin
    /// during slot `k`.
    pub interaction_violations: Vec<(usize, usize, usize)>,
    /// `v_{0,m}` and `ell(m) - 2 r_plus`.
    pub v0: f64,
    pub ell_minus_margin: f64,
}

impl LocalizationReport {
    pub fn nesting_holds(&self) -> bool {
        self.nesting_violations.is_empty() && self.initial_violations.is_empty()
    }

    pub fn non_interaction_holds(&self) -> bool {
        self.interaction_violations.is_empty()
    }

    pub fn containment_holds(&self) -> bool {
        self.v0 <= self.ell_minus_margin
    }
}

/// Chain tolerance `2^6 / 2^m` used by the index sets.
pub fn localization_chain_epsilon(scale: u32) -> f64 {
    64.0 / (1u64 << scale) as f64
}

/// Separation margin `2^5 / 2^{4m}` of the non-interaction property.
pub fn localization_margin(scale: u32) -> f64 {
    32.0 * slot_width(scale)
}

/// Index sets `J_{k,m}` of a trajectory recorded on a grid refining
/// `2^{-4m}`: globules within `v_{k,m}` of the origin at time `k 2^{-4m}`,
/// together with every globule chain-connected (chain tolerance
/// [`localization_chain_epsilon`]) to a globule whose body meets
/// `B(0, v_{k,m})`. Nesting, non-interaction and `v_{0,m} <= ell(m) - 2 r_plus`
/// are reported, not enforced.
pub fn localization_sets(
    traj: &TrajectoryRecord,
    p: &PathRegularityParams,
    rho: f64,
    r_plus: f64,
) -> Result<LocalizationReport> {
    let width = slot_width(p.scale);
    let k_max = slot_count(traj, width)?;
    let eps = localization_chain_epsilon(p.scale);
    let margin = localization_margin(p.scale);
    let n = traj.n_globules();

    let mut sets = Vec::with_capacity(k_max);
    let mut radii = Vec::with_capacity(k_max);
    let mut interaction_violations = Vec::new();
    for k in 0..k_max {
        let v = p.localization_radius(rho, r_plus, k as f64);
        let start = grid_index(traj, k as f64 * width)?;
        let end = grid_index(traj, (k + 1) as f64 * width)?;
        let c = &traj.states[start];
        let adj = proximity_graph(c, eps);
        let label = components(&adj);
        let mut seeded = vec![false; n];
        for (i, g) in c.iter().enumerate() {
            if g.center.norm() <= v + g.radius {
                seeded[label[i]] = true;
            }
        }
        let set: Vec<usize> = (0..n)
            .filter(|&i| c.globules[i].center.norm() <= v || seeded[label[i]])
            .collect();

        let mut inside = vec![false; n];
        for &i in &set {
            inside[i] = true;
        }
        for state in &traj.states[start..=end] {
            for &i in &set {
                for j in (0..n).filter(|&j| !inside[j]) {
                    if state.globules[i].gap_to(&state.globules[j]) <= margin
                        && !interaction_violations.contains(&(i, j, k))
                    {
                        interaction_violations.push((i, j, k));
                    }
                }
            }
        }
        sets.push(set);
        radii.push(v);
    }

    let mut nesting_violations = Vec::new();
    for k in 0..k_max.saturating_sub(1) {
        for &i in &sets[k + 1] {
            if sets[k].binary_search(&i).is_err() {
                nesting_violations.push((k, i));
            }
        }
    }
    let initial_violations = match sets.last() {
        Some(last) => traj.states[0]
            .iter()
            .enumerate()
            .filter(|(i, g)| g.center.norm() <= rho && last.binary_search(i).is_err())
            .map(|(i, _)| i)
            .collect(),
        None => Vec::new(),
    };
    Ok(LocalizationReport {
        sets,
        radii,
        nesting_violations,
        initial_violations,
        interaction_violations,
        v0: p.localization_radius(rho, r_plus, 0.0),
        ell_minus_margin: p.ell_of_scale(r_plus) - 2.0 * r_plus,
    })
}

/// Bounded test functionals of a configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TestFunctional {
    Constant(f64),
    /// Smoothed indicator that at least `at_least` globules lie in
    /// `B(0, radius)`; each globule counts through a cubic ramp of half-width
    /// `width` around `radius`.
    CountInBall {
        radius: f64,
        width: f64,
        at_least: usize,
    },
    /// `exp(-g / scale)` for the smallest pair gap `g`; zero below two
    /// globules.
    MinPairGap { scale: f64 },
    /// Smoothed number of pairs with center distance in `[lo, hi]`.
    PairDistanceBin { lo: f64, hi: f64, width: f64 },
}

/// `0` below `0`, `1` above `1`, `3u^2 - 2u^3` in between.
fn smoothstep(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

impl TestFunctional {
    pub fn eval(&self, c: &Configuration) -> f64 {
        match *self {
            TestFunctional::Constant(v) => v,
            TestFunctional::CountInBall {
                radius,
                width,
                at_least,
            } => {
                let count: f64 = c
                    .iter()
                    .map(|g| 1.0 - smoothstep((g.center.norm() - radius + width) / (2.0 * width)))
                    .sum();
                smoothstep(count - at_least as f64 + 1.0)
            }
            TestFunctional::MinPairGap { scale } => {
                let mut g = f64::INFINITY;
                for (i, a) in c.iter().enumerate() {
                    for b in &c.globules[i + 1..] {
                        g = g.min(a.gap_to(b));
                    }
                }
                if g.is_finite() {
                    (-g.max(0.0) / scale).exp()
                } else {
                    0.0
                }
            }
            TestFunctional::PairDistanceBin { lo, hi, width } => {
                let mut s = 0.0;
                for (i, a) in c.iter().enumerate() {
                    for b in &c.globules[i + 1..] {
                        let d = (a.center - b.center).norm();
                        s += smoothstep((d - lo + width) / width) * (1.0 - smoothstep((d - hi) / width));
                    }
                }
                s
            }
        }
    }

    pub fn name(&self) -> String {
        match *self {
            TestFunctional::Constant(v) => format!("constant({v})"),
            TestFunctional::CountInBall {
                radius, at_least, ..
            } => format!("count_in_ball(R={radius},k>={at_least})"),
            TestFunctional::MinPairGap { scale } => format!("min_pair_gap(scale={scale})"),
            TestFunctional::PairDistanceBin { lo, hi, .. } => format!("pair_distance_bin([{lo},{hi}])"),
        }
    }
}

/// The fixed functional library for a system confined near `B(0, ell)`.
pub fn functional_library(ell: f64, r_plus: f64) -> Vec<TestFunctional> {
    vec![
        TestFunctional::CountInBall {
            radius: 0.5 * ell,
            width: 0.25 * r_plus,
            at_least: 1,
        },
        TestFunctional::CountInBall {
            radius: 0.75 * ell,
            width: 0.25 * r_plus,
            at_least: 2,
        },
        TestFunctional::MinPairGap { scale: r_plus },
        TestFunctional::PairDistanceBin {
            lo: 2.0 * r_plus,
            hi: ell,
            width: 0.5 * r_plus,
        },
    ]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReversibilityEstimate {
    pub forward: f64,
    pub backward: f64,
    /// Jackknife standard error of `forward - backward`.
    pub stderr: f64,
    pub forward_stderr: f64,
    pub backward_stderr: f64,
}

impl ReversibilityEstimate {
    /// `|forward - backward|` in units of its standard error (0 when both
    /// vanish).
    pub fn z_score(&self) -> f64 {
        let d = (self.forward - self.backward).abs();
        if d == 0.0 {
            0.0
        } else {
            d / self.stderr
        }
    }
}

/// Monte Carlo estimates of `E[prod_i f_i(X(t_i))]` and
/// `E[prod_i f_i(X(T - t_i))]` over an ensemble of trajectories on `[0, T]`.
pub fn reversibility_statistic(
    ensemble: &[TrajectoryRecord],
    f: &[TestFunctional],
    t: &[f64],
) -> Result<ReversibilityEstimate> {
    if ensemble.len() < MIN_ENSEMBLE {
        return Err(Error::EnsembleTooSmall {
            got: ensemble.len(),
            needed: MIN_ENSEMBLE,
        });
    }
    if f.len() != t.len() || f.is_empty() {
        return Err(Error::param("t", "need one time per functional"));
    }
    let pairs: Vec<(f64, f64)> = ensemble
        .iter()
        .map(|traj| {
            let t_end = traj.final_time();
            let mut fwd = 1.0;
            let mut bwd = 1.0;
            for (fi, &ti) in f.iter().zip(t) {
                fwd *= fi.eval(&traj.states[grid_index(traj, ti)?]);
                bwd *= fi.eval(&traj.states[grid_index(traj, t_end - ti)?]);
            }
            Ok((fwd, bwd))
        })
        .collect::<Result<_>>()?;
    let diffs: Vec<f64> = pairs.iter().map(|(a, b)| a - b).collect();
    let fw: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let bw: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let (_, stderr) = jackknife(&diffs, mean);
    let (forward, forward_stderr) = jackknife(&fw, mean);
    let (backward, backward_stderr) = jackknife(&bw, mean);
    Ok(ReversibilityEstimate {
        forward,
        backward,
        stderr,
        forward_stderr,
        backward_stderr,
    })
}

/// One point of an estimated probability curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbabilityPoint {
    pub epsilon: f64,
    pub estimate: f64,
    pub stderr: f64,
    pub hits: usize,
    pub trials: usize,
}

/// Power-law or exponential fit over the usable points of a curve.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingReport {
    pub points: Vec<ProbabilityPoint>,
    /// Fit of `log P` against the abscissa, when at least two points are
    /// usable.
    pub fit: Option<LinearFit>,
    /// Epsilons left out of the fit, each with the reason.
    pub excluded: Vec<(f64, &'static str)>,
    /// `3 / trials`: the 95% one-sided bound reported for zero counts.
    pub zero_count_bound: f64,
}

fn binomial_point(epsilon: f64, hits: usize, trials: usize) -> ProbabilityPoint {
    let p = hits as f64 / trials as f64;
    ProbabilityPoint {
        epsilon,
        estimate: p,
        stderr: (p * (1.0 - p) / trials as f64).sqrt(),
        hits,
        trials,
    }
}

fn check_epsilons(epsilons: &[f64], min_len: usize, min_span: f64) -> Result<()> {
    if epsilons.len() < min_len || epsilons.iter().any(|&e| !(e > 0.0)) {
        return Err(Error::param(
            "epsilons",
            format!("need at least {min_len} positive values"),
        ));
    }
    let lo = epsilons.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = epsilons.iter().cloned().fold(0.0, f64::max);
    if hi / lo < min_span * (1.0 - 1e-12) {
        return Err(Error::param(
            "epsilons",
            format!("values must span a factor of at least {min_span}"),
        ));
    }
    Ok(())
}

/// Fraction of `samples` containing an eps-chain of `M` globules, for each
/// eps.
pub fn chain_probability_curve(
    samples: &[Configuration],
    epsilons: &[f64],
    chain_len: usize,
) -> Result<Vec<ProbabilityPoint>> {
    let hits: Vec<Vec<bool>> = samples
        .par_iter()
        .map(|c| {
            epsilons
                .iter()
                .map(|&e| Ok(detect_chain(c, e, chain_len)?.found))
                .collect::<Result<Vec<bool>>>()
        })
        .collect::<Result<_>>()?;
    Ok(epsilons
        .iter()
        .enumerate()
        .map(|(k, &e)| binomial_point(e, hits.iter().filter(|h| h[k]).count(), samples.len()))
        .collect())
}

/// Probability above which a chain curve counts as saturated.
pub const SATURATION: f64 = 0.5;

/// Log-log fit of an epsilon-chain probability curve. Points with zero hits
/// or with probability above [`SATURATION`] are excluded.
pub fn fit_chain_curve(points: Vec<ProbabilityPoint>) -> Result<ScalingReport> {
    let trials = points.first().map_or(1, |p| p.trials);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut excluded = Vec::new();
    for p in &points {
        if p.hits == 0 {
            excluded.push((p.epsilon, "zero count"));
        } else if p.estimate > SATURATION {
            excluded.push((p.epsilon, "saturated"));
        } else {
            xs.push(p.epsilon.ln());
            ys.push(p.estimate.ln());
        }
    }
    let fit = if xs.len() >= 2 {
        Some(linear_fit(&xs, &ys)?)
    } else {
        None
    };
    Ok(ScalingReport {
        points,
        fit,
        excluded,
        zero_count_bound: 3.0 / trials as f64,
    })
}

/// Samples `mu^{ell, y}` (`samples` draws spread over independent chains),
/// estimates the eps-chain probability at each eps and fits `log P` against
/// `log eps`. Needs at least four epsilons spanning a decade.
#[allow(clippy::too_many_arguments)]
pub fn scaling_fit_chain_probability(
    params: &ModelParams,
    spec: &PenalizationSpec,
    epsilons: &[f64],
    chain_len: usize,
    samples: usize,
    chains: usize,
    config: &SamplerConfig,
    seed: u64,
) -> Result<ScalingReport> {
    check_epsilons(epsilons, 4, 10.0)?;
    let configs = stationary_samples(params, spec, samples, chains, config, seed)?;
    fit_chain_curve(chain_probability_curve(&configs, epsilons, chain_len)?)
}

/// `samples` draws of `mu^{ell, y}` from `chains` independent chains run in
/// parallel; chain `c` is seeded with `split_seed(seed, c)`.
pub fn stationary_samples(
    params: &ModelParams,
    spec: &PenalizationSpec,
    samples: usize,
    chains: usize,
    config: &SamplerConfig,
    seed: u64,
) -> Result<Vec<Configuration>> {
    let chains = chains.clamp(1, samples.max(1));
    let per: Vec<usize> = (0..chains)
        .map(|c| samples / chains + usize::from(c < samples % chains))
        .collect();
    let draws: Vec<Vec<Configuration>> = per
        .par_iter()
        .enumerate()
        .map(|(c, &k)| {
            if k == 0 {
                return Ok(Vec::new());
            }
            sample_penalized_many(params, spec, config, k, rng::split_seed(seed, c as u64))
        })
        .collect::<Result<_>>()?;
    Ok(draws.into_iter().flatten().collect())
}

/// Tail probabilities are fitted only inside this window.
pub const TAIL_FIT_RANGE: (f64, f64) = (1e-3, 0.5);

/// Largest modulus of each trajectory of an ensemble.
pub fn ensemble_moduli(ensemble: &[TrajectoryRecord], delta: f64) -> Result<Vec<f64>> {
    ensemble.par_iter().map(|t| max_modulus(t, delta)).collect()
}

/// `P(exists i: w_i(delta) > eps)` for each eps, from per-trajectory moduli.
pub fn modulus_tail_curve(moduli: &[f64], epsilons: &[f64]) -> Vec<ProbabilityPoint> {
    epsilons
        .iter()
        .map(|&e| binomial_point(e, moduli.iter().filter(|&&v| v > e).count(), moduli.len()))
        .collect()
}

/// Fits `log P(exists i: w_i(delta) > eps)` against `eps^2 / delta` over the
/// points whose probability lies in [`TAIL_FIT_RANGE`]. Gaussian-type decay
/// shows as a negative slope.
pub fn scaling_fit_modulus_tail(ensemble: &[TrajectoryRecord], delta: f64, epsilons: &[f64]) -> Result<ScalingReport> {
    fit_modulus_tail(&ensemble_moduli(ensemble, delta)?, delta, epsilons)
}

/// [`scaling_fit_modulus_tail`] from precomputed per-trajectory moduli.
pub fn fit_modulus_tail(moduli: &[f64], delta: f64, epsilons: &[f64]) -> Result<ScalingReport> {
    if moduli.is_empty() {
        return Err(Error::EnsembleTooSmall { got: 0, needed: 1 });
    }
    let points = modulus_tail_curve(moduli, epsilons);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut excluded = Vec::new();
    for p in &points {
        if p.estimate < TAIL_FIT_RANGE.0 {
            excluded.push((p.epsilon, "below fit range"));
        } else if p.estimate > TAIL_FIT_RANGE.1 {
            excluded.push((p.epsilon, "above fit range"));
        } else {
            xs.push(p.epsilon * p.epsilon / delta);
            ys.push(p.estimate.ln());
        }
    }
    let fit = if xs.len() >= 2 {
        Some(linear_fit(&xs, &ys)?)
    } else {
        None
    };
    Ok(ScalingReport {
        points,
        fit,
        excluded,
        zero_count_bound: 3.0 / moduli.len() as f64,
    })
}

/// Flat key-value report.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub entries: Vec<(String, String)>,
}

impl Report {
    pub fn new() -> Self {
        Report::default()
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.push((key.into(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// One `key = value` line per entry.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Report> {
        let mut r = Report::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line.split_once(" = ").ok_or(Error::Parse {
                line: n + 1,
                reason: "expected `key = value`".into(),
            })?;
            r.push(k, v);
        }
        Ok(r)
    }

    pub fn add_scaling(&mut self, prefix: &str, s: &ScalingReport) {
        match &s.fit {
            Some(f) => {
                self.push(format!("{prefix}.slope"), f.slope);
                self.push(format!("{prefix}.intercept"), f.intercept);
                self.push(format!("{prefix}.r2"), f.r2);
                self.push(format!("{prefix}.slope_stderr"), f.slope_stderr);
            }
            None => self.push(format!("{prefix}.fit"), "none"),
        }
        for (e, why) in &s.excluded {
            self.push(format!("{prefix}.excluded.{e}"), why);
        }
        self.push(format!("{prefix}.zero_count_bound"), s.zero_count_bound);
    }
}

/// `epsilon,estimate,stderr` rows with a header line.
pub fn curve_csv(points: &[ProbabilityPoint]) -> String {
    let mut s = String::from("epsilon,estimate,stderr\n");
    for p in points {
        let _ = writeln!(s, "{},{},{}", p.epsilon, p.estimate, p.stderr);
    }
    s
}
