//! Stationary measures: the hard-globule Poisson process in a bounded window,
//! the penalized measures `nu_n` and `mu`, and a quadrature oracle for the
//! partition function of tiny windows.
//!
//! All samplers are birth–death–move Metropolis chains whose target is a
//! density with respect to the unit-rate Poisson process on
//! `window x [r_minus, r_plus]`:
//!
//! * hard Poisson: `1{allowed together with the external configuration}`;
//! * penalized: `1{allowed} prod_i exp(-psi(x_i, r_i))`, on a ball large enough
//!   that the discarded mass is below [`PENALIZED_TAIL_MASS`].
//!
//! With `p_b`, `p_d` the birth and death probabilities, `V` the reference mass
//! and `n` the current count, a birth of `u` is accepted with probability
//! `min(1, f(x + u)/f(x) V p_d / (p_b (n + 1)))` and a death of one of the `n`
//! globules with `min(1, f(x - u)/f(x) n p_b / (V p_d))`. Moves perturb one
//! globule by a symmetric Gaussian step.

use std::f64::consts::PI;

use quadrature::double_exponential;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geometry::{Configuration, Globule, ModelParams, Vec3};
use crate::penalization::PenalizationSpec;

/// Reference mass left outside the truncated domain of the penalized sampler.
pub const PENALIZED_TAIL_MASS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Region {
    /// Ball `B(0, radius)`.
    Ball { radius: f64 },
    /// Axis-aligned box `[lo, hi]`.
    Box { lo: [f64; 3], hi: [f64; 3] },
}

impl Region {
    pub fn volume(&self) -> f64 {
        match *self {
            Region::Ball { radius } => 4.0 / 3.0 * PI * radius.powi(3),
            Region::Box { lo, hi } => (0..3).map(|k| hi[k] - lo[k]).product(),
        }
    }

    pub fn contains(&self, x: &Vec3) -> bool {
        match *self {
            Region::Ball { radius } => x.norm() <= radius,
            Region::Box { lo, hi } => (0..3).all(|k| x[k] >= lo[k] && x[k] <= hi[k]),
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> Vec3 {
        match *self {
            Region::Ball { radius } => loop {
                let x = Vec3::new(
                    rng.random_range(-radius..radius),
                    rng.random_range(-radius..radius),
                    rng.random_range(-radius..radius),
                );
                if x.norm() <= radius {
                    return x;
                }
            },
            Region::Box { lo, hi } => Vec3::new(
                rng.random_range(lo[0]..hi[0]),
                rng.random_range(lo[1]..hi[1]),
                rng.random_range(lo[2]..hi[2]),
            ),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Region::Ball { radius } => radius.is_finite() && radius > 0.0,
            Region::Box { lo, hi } => (0..3).all(|k| lo[k].is_finite() && hi[k].is_finite() && hi[k] > lo[k]),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::param("region", "window must have finite positive volume"))
        }
    }
}

/// Spatial window with its radius interval. When `r_minus == r_plus` the
/// marks are fixed and the reference measure on marks is a unit point mass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowSpec {
    pub region: Region,
    pub r_minus: f64,
    pub r_plus: f64,
}

impl WindowSpec {
    pub fn new(region: Region, r_minus: f64, r_plus: f64) -> Result<Self> {
        region.validate()?;
        if !(r_minus.is_finite() && r_minus > 0.0) {
            return Err(Error::param("r_minus", format!("must be positive, got {r_minus}")));
        }
        if !(r_plus.is_finite() && r_plus >= r_minus) {
            return Err(Error::param("r_plus", "radius interval is empty"));
        }
        Ok(WindowSpec {
            region,
            r_minus,
            r_plus,
        })
    }

    pub fn degenerate_marks(&self) -> bool {
        self.r_plus == self.r_minus
    }

    pub fn mark_measure(&self) -> f64 {
        if self.degenerate_marks() {
            1.0
        } else {
            self.r_plus - self.r_minus
        }
    }

    /// `|Lambda'|`, the mass of the reference Poisson intensity.
    pub fn reference_mass(&self) -> f64 {
        self.region.volume() * self.mark_measure()
    }

    pub fn contains(&self, g: &Globule) -> bool {
        self.region.contains(&g.center) && g.radius >= self.r_minus && g.radius <= self.r_plus
    }

    fn sample_globule<R: Rng>(&self, rng: &mut R) -> Globule {
        let center = self.region.sample(rng);
        let radius = if self.degenerate_marks() {
            self.r_minus
        } else {
            rng.random_range(self.r_minus..self.r_plus)
        };
        Globule { center, radius }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub burn_in: usize,
    pub thinning: usize,
    pub p_birth: f64,
    pub p_death: f64,
    /// Standard deviation of a center move; defaults to `r_plus / 2`.
    pub move_center: Option<f64>,
    /// Standard deviation of a radius move; defaults to `(r_plus - r_minus) / 4`.
    pub move_radius: Option<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            burn_in: 10_000,
            thinning: 100,
            p_birth: 0.35,
            p_death: 0.35,
            move_center: None,
            move_radius: None,
        }
    }
}

impl SamplerConfig {
    fn validate(&self) -> Result<()> {
        let (b, d) = (self.p_birth, self.p_death);
        if !(b > 0.0 && d > 0.0 && b + d <= 1.0) {
            return Err(Error::param(
                "p_birth",
                "birth and death probabilities must be positive with sum at most 1",
            ));
        }
        if self.thinning == 0 {
            return Err(Error::param("thinning", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ProposalCounts {
    pub proposed: u64,
    pub accepted: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AcceptanceStats {
    pub birth: ProposalCounts,
    pub death: ProposalCounts,
    pub moves: ProposalCounts,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerState {
    pub current: Configuration,
    /// Proposals made so far.
    pub step_count: u64,
    pub acceptance: AcceptanceStats,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Proposal {
    Birth,
    Death,
    Move,
}

struct Target<'a> {
    window: WindowSpec,
    external: Configuration,
    penalty: Option<&'a PenalizationSpec>,
    fixed_n: bool,
}

impl Target<'_> {
    fn log_weight(&self, g: &Globule) -> f64 {
        self.penalty.map_or(0.0, |p| -p.psi(g))
    }

    /// `g` may join `others` (skipping index `skip`) without leaving the
    /// window or overlapping anything.
    fn fits(&self, g: &Globule, others: &[Globule], skip: Option<usize>) -> bool {
        self.window.contains(g)
            && others
                .iter()
                .enumerate()
                .all(|(k, o)| Some(k) == skip || !g.overlaps(o))
            && self.external.iter().all(|y| !g.overlaps(y))
    }
}

/// A birth–death–move (or, for fixed counts, move-only) Metropolis chain.
pub struct SamplerChain<'a> {
    target: Target<'a>,
    config: SamplerConfig,
    rng: ChaCha8Rng,
    state: SamplerState,
    move_center: f64,
    move_radius: f64,
}

impl<'a> SamplerChain<'a> {
    fn build(target: Target<'a>, config: SamplerConfig, seed: u64, initial: Configuration) -> Result<Self> {
        config.validate()?;
        let w = target.window;
        let move_center = config.move_center.unwrap_or(0.5 * w.r_plus);
        let move_radius = config.move_radius.unwrap_or(0.25 * (w.r_plus - w.r_minus));
        Ok(SamplerChain {
            target,
            config,
            rng: ChaCha8Rng::seed_from_u64(seed),
            state: SamplerState {
                current: initial,
                step_count: 0,
                acceptance: AcceptanceStats::default(),
            },
            move_center,
            move_radius,
        })
    }

    /// Chain for the hard-globule Poisson process in `window` conditioned on
    /// `external`, started empty.
    pub fn hard(window: WindowSpec, external: &Configuration, config: SamplerConfig, seed: u64) -> Result<Self> {
        let target = Target {
            window,
            external: external.clone(),
            penalty: None,
            fixed_n: false,
        };
        SamplerChain::build(target, config, seed, Configuration::empty())
    }

    /// Chain for `mu^{ell, y}`, started empty.
    pub fn penalized(
        params: &ModelParams,
        spec: &'a PenalizationSpec,
        config: SamplerConfig,
        seed: u64,
    ) -> Result<Self> {
        let target = penalized_target(params, spec)?;
        SamplerChain::build(target, config, seed, Configuration::empty())
    }

    /// Move-only chain for `nu_n^{ell, y}` normalized, started from a random
    /// sequential placement in `B(0, ell)`.
    pub fn fixed_n(
        params: &ModelParams,
        spec: &'a PenalizationSpec,
        n: usize,
        config: SamplerConfig,
        seed: u64,
    ) -> Result<Self> {
        let mut target = penalized_target(params, spec)?;
        target.fixed_n = true;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f1ed);
        let inner = WindowSpec::new(
            Region::Ball {
                radius: params.ell() as f64,
            },
            params.r_minus(),
            params.r_plus(),
        )?;
        let mut placed: Vec<Globule> = Vec::with_capacity(n);
        let mut attempts = 0usize;
        while placed.len() < n {
            attempts += 1;
            if attempts > 1_000_000 {
                return Err(Error::Numerical(format!(
                    "could not place {n} non-overlapping globules in B(0, {})",
                    params.ell()
                )));
            }
            let g = inner.sample_globule(&mut rng);
            if placed.iter().all(|o| !g.overlaps(o)) {
                placed.push(g);
            }
        }
        SamplerChain::build(target, config, seed, Configuration::new(placed))
    }

    pub fn state(&self) -> &SamplerState {
        &self.state
    }

    pub fn current(&self) -> &Configuration {
        &self.state.current
    }

    /// Reference mass `|Lambda'|` of the chain's domain.
    pub fn reference_mass(&self) -> f64 {
        self.target.window.reference_mass()
    }

    /// Whether the current state is in the support of the target.
    pub fn is_valid(&self) -> bool {
        let gs = &self.state.current.globules;
        gs.iter()
            .enumerate()
            .all(|(i, g)| self.target.fits(g, gs, Some(i)))
    }

    /// One Metropolis proposal; returns its kind and whether it was accepted.
    pub fn propose(&mut self) -> (Proposal, bool) {
        self.state.step_count += 1;
        let kind = if self.target.fixed_n {
            Proposal::Move
        } else {
            let u: f64 = self.rng.random();
            if u < self.config.p_birth {
                Proposal::Birth
            } else if u < self.config.p_birth + self.config.p_death {
                Proposal::Death
            } else {
                Proposal::Move
            }
        };
        let accepted = match kind {
            Proposal::Birth => self.birth(),
            Proposal::Death => self.death(),
            Proposal::Move => self.shift(),
        };
        let counts = match kind {
            Proposal::Birth => &mut self.state.acceptance.birth,
            Proposal::Death => &mut self.state.acceptance.death,
            Proposal::Move => &mut self.state.acceptance.moves,
        };
        counts.proposed += 1;
        counts.accepted += accepted as u64;
        (kind, accepted)
    }

    /// `max(1, n)` proposals, `n` the count at the start of the sweep.
    pub fn sweep(&mut self) {
        let k = self.state.current.len().max(1);
        for _ in 0..k {
            self.propose();
        }
        debug_assert!(self.is_valid(), "sampler left the support of its target");
    }

    pub fn run(&mut self, sweeps: usize) {
        for _ in 0..sweeps {
            self.sweep();
        }
    }

    fn accept(&mut self, log_ratio: f64) -> bool {
        log_ratio >= 0.0 || self.rng.random::<f64>().ln() < log_ratio
    }

    fn birth(&mut self) -> bool {
        let g = self.target.window.sample_globule(&mut self.rng);
        let gs = &self.state.current.globules;
        if !self.target.fits(&g, gs, None) {
            return false;
        }
        let n = gs.len() as f64;
        let log_ratio = self.target.log_weight(&g)
            + (self.reference_mass() * self.config.p_death / (self.config.p_birth * (n + 1.0))).ln();
        let ok = self.accept(log_ratio);
        if ok {
            self.state.current.globules.push(g);
        }
        ok
    }

    fn death(&mut self) -> bool {
        let n = self.state.current.len();
        if n == 0 {
            return false;
        }
        let k = self.rng.random_range(0..n);
        let g = self.state.current.globules[k];
        let log_ratio = -self.target.log_weight(&g)
            + (n as f64 * self.config.p_birth / (self.reference_mass() * self.config.p_death)).ln();
        let ok = self.accept(log_ratio);
        if ok {
            self.state.current.globules.swap_remove(k);
        }
        ok
    }

    fn shift(&mut self) -> bool {
        let n = self.state.current.len();
        if n == 0 {
            return false;
        }
        let k = self.rng.random_range(0..n);
        let old = self.state.current.globules[k];
        let mut z = || -> f64 { self.rng.sample(StandardNormal) };
        let dx = Vec3::new(z(), z(), z()) * self.move_center;
        let dr = if self.target.window.degenerate_marks() {
            0.0
        } else {
            z() * self.move_radius
        };
        let g = Globule {
            center: old.center + dx,
            radius: old.radius + dr,
        };
        if !self.target.fits(&g, &self.state.current.globules, Some(k)) {
            return false;
        }
        let log_ratio = self.target.log_weight(&g) - self.target.log_weight(&old);
        let ok = self.accept(log_ratio);
        if ok {
            self.state.current.globules[k] = g;
        }
        ok
    }
}

fn penalized_target<'a>(params: &ModelParams, spec: &'a PenalizationSpec) -> Result<Target<'a>> {
    let window = WindowSpec::new(
        Region::Ball {
            radius: penalized_truncation_radius(params),
        },
        params.r_minus(),
        params.r_plus(),
    )?;
    Ok(Target {
        window,
        // the external configuration acts through psi3 only
        external: Configuration::empty(),
        penalty: Some(spec),
        fixed_n: false,
    })
}

/// Radius `R >= ell + 1` of the ball on which the penalized samplers live,
/// chosen so that `∫_{|x|>R} e^{-2|x|} dx (r_plus - r_minus)`, which bounds
/// the discarded reference mass, is at most [`PENALIZED_TAIL_MASS`].
pub fn penalized_truncation_radius(params: &ModelParams) -> f64 {
    let span = params.r_plus() - params.r_minus();
    let tail = |b: f64| PI * (-2.0 * b).exp() * (2.0 * b * b + 2.0 * b + 1.0) * span;
    let mut r = params.ell() as f64 + 1.0;
    while tail(r) > PENALIZED_TAIL_MASS {
        r += 0.25;
    }
    r
}

fn check_window_marks(window: &WindowSpec, params: &ModelParams) -> Result<()> {
    if window.r_minus < params.r_minus() || window.r_plus > params.r_plus() {
        return Err(Error::param(
            "window",
            "radius interval must lie inside [r_minus, r_plus]",
        ));
    }
    Ok(())
}

pub fn sample_hard_poisson(
    window: &WindowSpec,
    external: &Configuration,
    params: &ModelParams,
    sweeps: usize,
    seed: u64,
) -> Result<Configuration> {
    sample_hard_poisson_with(window, external, params, &SamplerConfig::default(), sweeps, seed)
}

/// Runs `sweeps` sweeps of the hard Poisson chain (at least `burn_in`) and
/// returns the final state.
pub fn sample_hard_poisson_with(
    window: &WindowSpec,
    external: &Configuration,
    params: &ModelParams,
    config: &SamplerConfig,
    sweeps: usize,
    seed: u64,
) -> Result<Configuration> {
    check_window_marks(window, params)?;
    if sweeps < config.burn_in {
        return Err(Error::param(
            "sweeps",
            format!("{sweeps} is below the burn-in of {}", config.burn_in),
        ));
    }
    let mut chain = SamplerChain::hard(*window, external, config.clone(), seed)?;
    chain.run(sweeps);
    Ok(chain.state.current)
}

/// One draw from `mu^{ell, y}` after the default burn-in.
pub fn sample_penalized(params: &ModelParams, spec: &PenalizationSpec, seed: u64) -> Result<Configuration> {
    Ok(sample_penalized_many(params, spec, &SamplerConfig::default(), 1, seed)?.remove(0))
}

/// `count` draws from one `mu^{ell, y}` chain: burn-in, then one draw every
/// `thinning` sweeps.
pub fn sample_penalized_many(
    params: &ModelParams,
    spec: &PenalizationSpec,
    config: &SamplerConfig,
    count: usize,
    seed: u64,
) -> Result<Vec<Configuration>> {
    let mut chain = SamplerChain::penalized(params, spec, config.clone(), seed)?;
    chain.run(config.burn_in);
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        if k > 0 {
            chain.run(config.thinning);
        }
        out.push(chain.current().clone());
    }
    Ok(out)
}

/// One draw from the normalized `nu_n^{ell, y}` (the penalized measure
/// conditioned on exactly `n` globules).
pub fn sample_fixed_n(
    params: &ModelParams,
    spec: &PenalizationSpec,
    n: usize,
    config: &SamplerConfig,
    seed: u64,
) -> Result<Configuration> {
    let mut chain = SamplerChain::fixed_n(params, spec, n, config.clone(), seed)?;
    chain.run(config.burn_in);
    Ok(chain.state.current)
}

/// Brute-force partition function of a window holding at most two globules.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionOracle {
    /// `|Lambda'|`.
    pub reference_mass: f64,
    /// `terms[n] = (1/n!) ∫ 1{allowed} dx dr` over `n` globules; `terms[0] = 1`.
    pub terms: Vec<f64>,
    /// `exp(-|Lambda'|) sum_n terms[n]`.
    pub z: f64,
    /// Estimated absolute error of the summed terms.
    pub error_estimate: f64,
}

impl PartitionOracle {
    /// `P(N = n)` under the hard Poisson process, exact when the window
    /// admits at most `terms.len() - 1` globules.
    pub fn probability(&self, n: usize) -> f64 {
        self.terms.get(n).copied().unwrap_or(0.0) / self.terms.iter().sum::<f64>()
    }
}

const GRID_REL_TOL: f64 = 5e-4;
const GRID_MAX: usize = 256;

pub fn partition_function_oracle(
    window: &WindowSpec,
    external: &Configuration,
    n_max: usize,
) -> Result<PartitionOracle> {
    if n_max > 2 {
        return Err(Error::param("n_max", "brute force supports at most two globules"));
    }
    let mass = window.reference_mass();
    let mut terms = vec![1.0];
    let mut err = 0.0;
    if n_max >= 1 {
        let (i1, e1) = if external.is_empty() {
            (mass, 0.0)
        } else {
            first_order_with_external(window, external)?
        };
        terms.push(i1);
        err += e1;
    }
    if n_max >= 2 {
        if !external.is_empty() {
            return Err(Error::Unsupported(
                "two-globule oracle needs an empty external configuration".into(),
            ));
        }
        let (i2, e2) = second_order(window)?;
        terms.push(i2);
        err += e2;
    }
    Ok(PartitionOracle {
        reference_mass: mass,
        z: (-mass).exp() * terms.iter().sum::<f64>(),
        terms,
        error_estimate: err,
    })
}

/// Mark measure of the radii a globule centered at `x` may take next to the
/// external globules.
fn admissible_marks(window: &WindowSpec, external: &Configuration, x: &Vec3) -> f64 {
    let room = external
        .iter()
        .map(|y| (x - y.center).norm() - y.radius)
        .fold(f64::INFINITY, f64::min);
    if window.degenerate_marks() {
        if room >= window.r_minus {
            1.0
        } else {
            0.0
        }
    } else {
        (room.min(window.r_plus) - window.r_minus).max(0.0)
    }
}

/// Midpoint tensor grid over the window, doubled until two successive
/// estimates agree to [`GRID_REL_TOL`].
fn first_order_with_external(window: &WindowSpec, external: &Configuration) -> Result<(f64, f64)> {
    let f = |x: &Vec3| admissible_marks(window, external, x);
    let mut prev: Option<f64> = None;
    let mut n = 8;
    while n <= GRID_MAX {
        let est = grid_integral(&window.region, n, &f);
        if let Some(p) = prev {
            let diff = (est - p).abs();
            if diff <= GRID_REL_TOL * est.abs() || (est == 0.0 && p == 0.0) {
                return Ok((est, diff));
            }
        }
        prev = Some(est);
        n *= 2;
    }
    Err(Error::Numerical(format!(
        "partition oracle grid did not converge at {GRID_MAX} points per axis"
    )))
}

fn grid_integral(region: &Region, n: usize, f: &impl Fn(&Vec3) -> f64) -> f64 {
    let nf = n as f64;
    let mut sum = 0.0;
    match *region {
        Region::Ball { radius } => {
            // spherical coordinates (s, cos theta, phi), Jacobian s^2
            let (hs, hm, hp) = (radius / nf, 2.0 / nf, 2.0 * PI / nf);
            for a in 0..n {
                let s = (a as f64 + 0.5) * hs;
                for b in 0..n {
                    let mu = -1.0 + (b as f64 + 0.5) * hm;
                    let st = (1.0 - mu * mu).sqrt();
                    for c in 0..n {
                        let phi = (c as f64 + 0.5) * hp;
                        let x = Vec3::new(s * st * phi.cos(), s * st * phi.sin(), s * mu);
                        sum += s * s * f(&x);
                    }
                }
            }
            sum * hs * hm * hp
        }
        Region::Box { lo, hi } => {
            let h: Vec<f64> = (0..3).map(|k| (hi[k] - lo[k]) / nf).collect();
            for a in 0..n {
                for b in 0..n {
                    for c in 0..n {
                        let x = Vec3::new(
                            lo[0] + (a as f64 + 0.5) * h[0],
                            lo[1] + (b as f64 + 0.5) * h[1],
                            lo[2] + (c as f64 + 0.5) * h[2],
                        );
                        sum += f(&x);
                    }
                }
            }
            sum * h[0] * h[1] * h[2]
        }
    }
}

/// Mark area `{(r_1, r_2): r_1 + r_2 <= t}` of a pair at center distance `t`.
fn pair_mark_area(window: &WindowSpec, t: f64) -> f64 {
    if window.degenerate_marks() {
        return if t >= 2.0 * window.r_minus { 1.0 } else { 0.0 };
    }
    let span = window.r_plus - window.r_minus;
    let u = t - 2.0 * window.r_minus;
    if u <= 0.0 {
        0.0
    } else if u >= 2.0 * span {
        span * span
    } else if u <= span {
        0.5 * u * u
    } else {
        span * span - 0.5 * (2.0 * span - u).powi(2)
    }
}

fn mark_breaks(window: &WindowSpec) -> Vec<f64> {
    if window.degenerate_marks() {
        vec![2.0 * window.r_minus]
    } else {
        vec![
            2.0 * window.r_minus,
            window.r_minus + window.r_plus,
            2.0 * window.r_plus,
        ]
    }
}

/// `∫_a^b f` split at the points of `breaks` inside `(a, b)`.
fn integrate_pieces(f: &dyn Fn(f64) -> f64, a: f64, b: f64, breaks: &[f64], tol: f64) -> (f64, f64) {
    let mut pts = vec![a];
    pts.extend(breaks.iter().copied().filter(|&t| t > a && t < b));
    pts.push(b);
    pts.sort_by(f64::total_cmp);
    let mut val = 0.0;
    let mut err = 0.0;
    for w in pts.windows(2) {
        if w[1] > w[0] {
            let o = double_exponential::integrate(f, w[0], w[1], tol);
            val += o.integral;
            err += o.error_estimate;
        }
    }
    (val, err)
}

/// `(1/2) ∫∫ 1{allowed pair}` over the window, through the set covariogram.
fn second_order(window: &WindowSpec) -> Result<(f64, f64)> {
    let breaks = mark_breaks(window);
    let scale = window.reference_mass().powi(2);
    let tol = 1e-10 * scale.max(1e-300);
    let (val, err) = match window.region {
        Region::Ball { radius } => {
            let cov = |t: f64| PI * (4.0 * radius + t) * (2.0 * radius - t).powi(2) / 12.0;
            let f = |t: f64| 4.0 * PI * t * t * cov(t) * pair_mark_area(window, t);
            let (v, e) = integrate_pieces(&f, 0.0, 2.0 * radius, &breaks, tol);
            (0.5 * v, 0.5 * e)
        }
        Region::Box { lo, hi } => {
            let l = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
            let cut = |rho2: f64| -> Vec<f64> {
                breaks
                    .iter()
                    .filter(|&&t| t * t > rho2)
                    .map(|&t| (t * t - rho2).sqrt())
                    .collect()
            };
            let err_acc = std::cell::Cell::new(0.0);
            let inner = |h1: f64, h2: f64| -> f64 {
                let rho2 = h1 * h1 + h2 * h2;
                let f = |h3: f64| (l[2] - h3) * pair_mark_area(window, (rho2 + h3 * h3).sqrt());
                let (v, e) = integrate_pieces(&f, 0.0, l[2], &cut(rho2), tol);
                err_acc.set(err_acc.get() + e);
                v
            };
            let middle = |h1: f64| -> f64 {
                let f = |h2: f64| (l[1] - h2) * inner(h1, h2);
                integrate_pieces(&f, 0.0, l[1], &cut(h1 * h1), tol).0
            };
            let outer = |h1: f64| (l[0] - h1) * middle(h1);
            let (v, e) = integrate_pieces(&outer, 0.0, l[0], &breaks, tol);
            // the covariogram is even in each coordinate: eight octants
            (4.0 * v, 4.0 * e)
        }
    };
    if !val.is_finite() || err > 1e-3 * val.abs().max(1e-300) && val != 0.0 {
        return Err(Error::Numerical(format!(
            "two-globule quadrature did not converge (estimate {val}, error {err})"
        )));
    }
    Ok((val, err))
}
