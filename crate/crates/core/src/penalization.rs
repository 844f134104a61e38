//! Confinement potential keeping the finite system essentially inside
//! `B(0, ell)`.
//!
//! `psi(x, r) = psi1(|x|) + psi2(r) + sum_j psi3(|x - y_j| / (r + r_j))`, the sum
//! running over external globules with `|y_j| > ell`. Each scalar profile is
//! linear (or constant) outside transition bands of width `e^{-ell}` and is
//! joined to zero inside the band by a quintic Hermite bridge, so the profiles
//! are C² with bounded first and second derivatives.

use std::f64::consts::PI;

use quadrature::double_exponential;

use crate::error::{Error, Result};
use crate::geometry::{Configuration, Globule, ModelParams, Vec3};

/// Quintic polynomial on `[start, start + width]` matching value, first and
/// second derivative at both ends.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuinticBridge {
    start: f64,
    width: f64,
    // coefficients in t = (s - start) / width, ascending powers
    coeffs: [f64; 6],
}

impl QuinticBridge {
    /// `left` and `right` are `(value, first derivative, second derivative)`
    /// at `start` and `start + width`.
    pub fn new(start: f64, width: f64, left: [f64; 3], right: [f64; 3]) -> Self {
        let h = width;
        let (f0, d0, s0) = (left[0], h * left[1], h * h * left[2]);
        let (f1, d1, s1) = (right[0], h * right[1], h * h * right[2]);
        // Hermite basis expanded in powers of t.
        const H: [[f64; 6]; 6] = [
            [1.0, 0.0, 0.0, -10.0, 15.0, -6.0],
            [0.0, 1.0, 0.0, -6.0, 8.0, -3.0],
            [0.0, 0.0, 0.5, -1.5, 1.5, -0.5],
            [0.0, 0.0, 0.0, 10.0, -15.0, 6.0],
            [0.0, 0.0, 0.0, -4.0, 7.0, -3.0],
            [0.0, 0.0, 0.0, 0.5, -1.0, 0.5],
        ];
        let weights = [f0, d0, s0, f1, d1, s1];
        let mut coeffs = [0.0; 6];
        for (w, basis) in weights.iter().zip(H.iter()) {
            for (c, b) in coeffs.iter_mut().zip(basis.iter()) {
                *c += w * b;
            }
        }
        QuinticBridge { start, width, coeffs }
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn end(&self) -> f64 {
        self.start + self.width
    }

    /// Value and first two derivatives at `s`.
    pub fn eval(&self, s: f64) -> (f64, f64, f64) {
        let t = (s - self.start) / self.width;
        let c = &self.coeffs;
        let v = c[0] + t * (c[1] + t * (c[2] + t * (c[3] + t * (c[4] + t * c[5]))));
        let d = c[1] + t * (2.0 * c[2] + t * (3.0 * c[3] + t * (4.0 * c[4] + t * 5.0 * c[5])));
        let dd = 2.0 * c[2] + t * (6.0 * c[3] + t * (12.0 * c[4] + t * 20.0 * c[5]));
        (v, d / self.width, dd / (self.width * self.width))
    }
}

/// The three scalar profiles for a given `ell` and radius interval.
#[derive(Debug, Clone, PartialEq)]
pub struct Profiles {
    ell: f64,
    width: f64,
    r_minus: f64,
    r_plus: f64,
    psi1_bridge: QuinticBridge,
    psi2_upper: QuinticBridge,
    psi2_lower: QuinticBridge,
    psi3_bridge: QuinticBridge,
}

impl Profiles {
    pub fn new(ell: u32, r_minus: f64, r_plus: f64) -> Result<Self> {
        let l = ell as f64;
        let w = (-l).exp();
        if !(w < 1.0 && w < (r_plus - r_minus) / 4.0) {
            return Err(Error::param(
                "ell",
                format!(
                    "transition width e^-ell = {w:.4} must be below min(1, (r_plus - r_minus)/4) = {:.4}",
                    ((r_plus - r_minus) / 4.0).min(1.0)
                ),
            ));
        }
        let b1 = l + w;
        let up = r_plus + w;
        let lo = r_minus - w;
        Ok(Profiles {
            ell: l,
            width: w,
            r_minus,
            r_plus,
            psi1_bridge: QuinticBridge::new(l, w, [0.0; 3], [2.0 * b1, 2.0, 0.0]),
            psi2_upper: QuinticBridge::new(r_plus, w, [0.0; 3], [l * up, l, 0.0]),
            psi2_lower: QuinticBridge::new(lo, w, [l * (r_plus + r_minus - lo), -l, 0.0], [0.0; 3]),
            psi3_bridge: QuinticBridge::new(1.0 - w, w, [l, 0.0, 0.0], [0.0; 3]),
        })
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    /// `psi1` and its derivative.
    pub fn psi1(&self, s: f64) -> (f64, f64) {
        if s <= self.ell {
            (0.0, 0.0)
        } else if s >= self.psi1_bridge.end() {
            (2.0 * s, 2.0)
        } else {
            let (v, d, _) = self.psi1_bridge.eval(s);
            (v, d)
        }
    }

    /// `psi2` and its derivative.
    pub fn psi2(&self, s: f64) -> (f64, f64) {
        if s >= self.r_minus && s <= self.r_plus {
            (0.0, 0.0)
        } else if s > self.r_plus {
            if s >= self.psi2_upper.end() {
                (self.ell * s, self.ell)
            } else {
                let (v, d, _) = self.psi2_upper.eval(s);
                (v, d)
            }
        } else if s <= self.psi2_lower.start() {
            (self.ell * (self.r_plus + self.r_minus - s), -self.ell)
        } else {
            let (v, d, _) = self.psi2_lower.eval(s);
            (v, d)
        }
    }

    /// `psi3` and its derivative.
    pub fn psi3(&self, s: f64) -> (f64, f64) {
        if s >= 1.0 {
            (0.0, 0.0)
        } else if s <= self.psi3_bridge.start() {
            (self.ell, 0.0)
        } else {
            let (v, d, _) = self.psi3_bridge.eval(s);
            (v, d)
        }
    }
}

/// `psi^{ell, y}` for fixed `ell`, radius interval and external configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct PenalizationSpec {
    ell: u32,
    profiles: Profiles,
    // only the external globules with |y_j| > ell contribute
    external: Configuration,
}

impl PenalizationSpec {
    /// Builds the potential for the level and external configuration carried
    /// by `params`. Fails unless `e^{-ell} < min(1, (r_plus - r_minus)/4)`.
    pub fn new(params: &ModelParams) -> Result<Self> {
        let ell = params.ell();
        let profiles = Profiles::new(ell, params.r_minus(), params.r_plus())?;
        let external = params
            .external()
            .iter()
            .filter(|y| y.center.norm() > ell as f64)
            .copied()
            .collect();
        Ok(PenalizationSpec {
            ell,
            profiles,
            external,
        })
    }

    pub fn ell(&self) -> u32 {
        self.ell
    }

    pub fn transition_width(&self) -> f64 {
        self.profiles.width
    }

    pub fn profiles(&self) -> &Profiles {
        &self.profiles
    }

    /// External globules entering the `psi3` sum.
    pub fn contributing_external(&self) -> &Configuration {
        &self.external
    }

    pub fn psi(&self, g: &Globule) -> f64 {
        let p = &self.profiles;
        let mut v = p.psi1(g.center.norm()).0 + p.psi2(g.radius).0;
        for y in self.external.iter() {
            v += p.psi3((g.center - y.center).norm() / (g.radius + y.radius)).0;
        }
        v
    }

    /// Gradient of [`psi`](Self::psi) with respect to `(center, radius)`.
    pub fn psi_gradient(&self, g: &Globule) -> (Vec3, f64) {
        let p = &self.profiles;
        let norm = g.center.norm();
        let (_, d1) = p.psi1(norm);
        let mut grad_x = if d1 != 0.0 {
            g.center * (d1 / norm)
        } else {
            Vec3::zeros()
        };
        let mut grad_r = p.psi2(g.radius).1;
        for y in self.external.iter() {
            let diff = g.center - y.center;
            let dist = diff.norm();
            let rsum = g.radius + y.radius;
            let (_, d3) = p.psi3(dist / rsum);
            if d3 != 0.0 {
                grad_x += diff * (d3 / (dist * rsum));
                grad_r -= d3 * dist / (rsum * rsum);
            }
        }
        (grad_x, grad_r)
    }

    /// `sum_i psi(x_i, r_i)`.
    pub fn total(&self, c: &Configuration) -> f64 {
        c.iter().map(|g| self.psi(g)).sum()
    }
}

/// Partial sums of `sum_ell ∫ 1_{psi > 0} e^{-psi} dx dr`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntegrabilityReport {
    /// Contribution of each level, starting at `ell = 1`.
    pub increments: Vec<f64>,
    pub partial_sum: f64,
    /// Largest quadrature error estimate met along the way.
    pub error_estimate: f64,
}

impl IntegrabilityReport {
    /// `increment(ell + 1) / increment(ell)` for consecutive levels.
    pub fn increment_ratios(&self) -> Vec<f64> {
        self.increments.windows(2).map(|w| w[1] / w[0]).collect()
    }
}

const QUAD_TOL: f64 = 1e-12;

/// Quadrature estimate of the repulsion integral for `ell = 1..=ell_max` with
/// no external configuration, in which case the integrand separates into a
/// radial and a radius factor.
pub fn integrability_check(params: &ModelParams, ell_max: u32) -> Result<IntegrabilityReport> {
    if ell_max < 1 {
        return Err(Error::param("ell_max", "must be at least 1"));
    }
    if !params.external().is_empty() {
        return Err(Error::Unsupported(
            "integrability check is only defined for an empty external configuration".into(),
        ));
    }
    let (rm, rp) = (params.r_minus(), params.r_plus());
    let mut increments = Vec::with_capacity(ell_max as usize);
    let mut worst = 0.0f64;
    for ell in 1..=ell_max {
        let prof = Profiles::new(ell, rm, rp)?;
        let l = ell as f64;
        let w = prof.width;

        // radial tail: ∫_{ell}^∞ 4π s² e^{-psi1(s)} ds
        let band = integrate(|s| 4.0 * PI * s * s * (-prof.psi1(s).0).exp(), l, l + w)?;
        let b = l + w;
        let radial_tail = band.0 + PI * (-2.0 * b).exp() * (2.0 * b * b + 2.0 * b + 1.0);

        // radius tails: ∫_{r ∉ [r-, r+]} e^{-psi2(r)} dr
        let upper = integrate(|s| (-prof.psi2(s).0).exp(), rp, rp + w)?;
        let lower = integrate(|s| (-prof.psi2(s).0).exp(), rm - w, rm)?;
        let linear_tails = 2.0 * (-l * (rp + w)).exp() / l;
        let radius_tail = upper.0 + lower.0 + linear_tails;

        let ball = 4.0 / 3.0 * PI * l.powi(3);
        let span = rp - rm;
        let inc = ball * radius_tail + radial_tail * span + radial_tail * radius_tail;
        worst = worst.max(band.1).max(upper.1).max(lower.1);
        increments.push(inc);
    }
    Ok(IntegrabilityReport {
        partial_sum: increments.iter().sum(),
        increments,
        error_estimate: worst,
    })
}

fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64) -> Result<(f64, f64)> {
    let out = double_exponential::integrate(f, a, b, QUAD_TOL * (b - a).max(1.0));
    let scale = out.integral.abs().max(1e-300);
    if !out.integral.is_finite() || out.error_estimate > 1e-6 * scale.max(1e-12) {
        return Err(Error::Numerical(format!(
            "quadrature on [{a}, {b}] did not converge (estimate {}, error {})",
            out.integral, out.error_estimate
        )));
    }
    Ok((out.integral, out.error_estimate))
}
