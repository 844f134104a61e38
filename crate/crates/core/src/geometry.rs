//! Globules, configurations and the boundary geometry of the allowed set.
//!
//! Configuration-space vectors are flat arrays of length `4n` laid out as
//! `(x_1, r_1, x_2, r_2, ...)`: three center coordinates followed by the
//! radius of each globule. External globules never appear in these vectors.
//!
//! Operations documented as working in *stretched* coordinates expect radii
//! already divided by `sigma` (see [`sigma_stretch`]). In those coordinates the
//! pair constraint reads `|x_i - x_j| >= sigma (r_i + r_j)` and the radius caps
//! read `r_minus / sigma <= r_i <= r_plus / sigma`.

use nalgebra::{DVector, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Default tolerance (stretched length units) under which a constraint counts
/// as active.
pub const CONTACT_TOL: f64 = 1e-9;

/// Number of configuration-space coordinates carried by one globule.
pub const COORDS_PER_GLOBULE: usize = 4;

#[inline]
pub fn center_offset(i: usize) -> usize {
    COORDS_PER_GLOBULE * i
}

#[inline]
pub fn radius_offset(i: usize) -> usize {
    COORDS_PER_GLOBULE * i + 3
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Globule {
    pub center: Vec3,
    pub radius: f64,
}

impl Globule {
    pub fn new(center: [f64; 3], radius: f64) -> Self {
        Globule {
            center: Vec3::from(center),
            radius,
        }
    }

    /// Center distance minus radii sum; negative when the two overlap.
    pub fn gap_to(&self, other: &Globule) -> f64 {
        (self.center - other.center).norm() - (self.radius + other.radius)
    }

    pub fn overlaps(&self, other: &Globule) -> bool {
        (self.center - other.center).norm() < self.radius + other.radius
    }
}

/// Ordered finite list of globules; the position in the list is the identity.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Configuration {
    pub globules: Vec<Globule>,
}

impl Configuration {
    pub fn new(globules: Vec<Globule>) -> Self {
        Configuration { globules }
    }

    pub fn empty() -> Self {
        Configuration::default()
    }

    pub fn len(&self) -> usize {
        self.globules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.globules.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Globule> {
        self.globules.iter()
    }

    pub fn get(&self, i: usize) -> Result<&Globule> {
        self.globules.get(i).ok_or(Error::IndexOutOfRange {
            index: i,
            len: self.globules.len(),
        })
    }

    pub fn to_vector(&self) -> DVector<f64> {
        let mut v = DVector::zeros(COORDS_PER_GLOBULE * self.len());
        for (i, g) in self.globules.iter().enumerate() {
            let o = center_offset(i);
            v[o] = g.center.x;
            v[o + 1] = g.center.y;
            v[o + 2] = g.center.z;
            v[o + 3] = g.radius;
        }
        v
    }

    pub fn from_vector(v: &DVector<f64>) -> Self {
        assert_eq!(
            v.len() % COORDS_PER_GLOBULE,
            0,
            "configuration vector length must be a multiple of 4"
        );
        let globules = v
            .as_slice()
            .chunks_exact(COORDS_PER_GLOBULE)
            .map(|c| Globule::new([c[0], c[1], c[2]], c[3]))
            .collect();
        Configuration { globules }
    }
}

impl FromIterator<Globule> for Configuration {
    fn from_iter<I: IntoIterator<Item = Globule>>(iter: I) -> Self {
        Configuration::new(iter.into_iter().collect())
    }
}

/// Radius scale, radius bounds, penalization level and the fixed external
/// configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    sigma: f64,
    r_minus: f64,
    r_plus: f64,
    ell: u32,
    external: Configuration,
}

impl ModelParams {
    pub fn new(sigma: f64, r_minus: f64, r_plus: f64, ell: u32) -> Result<Self> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::param("sigma", format!("must be positive, got {sigma}")));
        }
        if !(r_minus.is_finite() && r_minus > 0.0) {
            return Err(Error::param(
                "r_minus",
                format!("must be positive, got {r_minus}"),
            ));
        }
        if !(r_plus.is_finite() && r_plus > r_minus) {
            return Err(Error::param(
                "r_plus",
                format!("must exceed r_minus = {r_minus}, got {r_plus}"),
            ));
        }
        if ell < 1 {
            return Err(Error::param("ell", "must be at least 1"));
        }
        Ok(ModelParams {
            sigma,
            r_minus,
            r_plus,
            ell,
            external: Configuration::empty(),
        })
    }

    pub fn with_external(mut self, external: Configuration) -> Self {
        self.external = external;
        self
    }

    pub fn with_sigma(mut self, sigma: f64) -> Result<Self> {
        ModelParams::new(sigma, self.r_minus, self.r_plus, self.ell)?;
        self.sigma = sigma;
        Ok(self)
    }

    pub fn with_ell(mut self, ell: u32) -> Result<Self> {
        ModelParams::new(self.sigma, self.r_minus, self.r_plus, ell)?;
        self.ell = ell;
        Ok(self)
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn r_minus(&self) -> f64 {
        self.r_minus
    }

    pub fn r_plus(&self) -> f64 {
        self.r_plus
    }

    pub fn ell(&self) -> u32 {
        self.ell
    }

    pub fn external(&self) -> &Configuration {
        &self.external
    }

    /// `sigma ∨ 1`.
    pub fn sigma_or_one(&self) -> f64 {
        self.sigma.max(1.0)
    }

    pub fn radius_in_range(&self, r: f64) -> bool {
        r >= self.r_minus && r <= self.r_plus
    }
}

/// Membership in the allowed set: radii in `[r_minus, r_plus]` and no overlap
/// among the globules of `c` nor between `c` and the external configuration.
pub fn allowed(c: &Configuration, params: &ModelParams) -> bool {
    allowed_internal(c, params)
        && c.iter()
            .all(|g| params.external.iter().all(|y| !g.overlaps(y)))
}

/// Same as [`allowed`] but ignoring the external configuration.
pub fn allowed_internal(c: &Configuration, params: &ModelParams) -> bool {
    let gs = &c.globules;
    gs.iter().all(|g| params.radius_in_range(g.radius))
        && gs
            .iter()
            .enumerate()
            .all(|(i, a)| gs[i + 1..].iter().all(|b| !a.overlaps(b)))
}

/// Divides every radius by `sigma`, leaving centers unchanged.
pub fn sigma_stretch(c: &Configuration, sigma: f64) -> Result<Configuration> {
    check_sigma(sigma)?;
    Ok(c.iter()
        .map(|g| Globule {
            center: g.center,
            radius: g.radius / sigma,
        })
        .collect())
}

/// Inverse of [`sigma_stretch`].
pub fn sigma_unstretch(c: &Configuration, sigma: f64) -> Result<Configuration> {
    check_sigma(sigma)?;
    Ok(c.iter()
        .map(|g| Globule {
            center: g.center,
            radius: g.radius * sigma,
        })
        .collect())
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma.is_finite() && sigma > 0.0 {
        Ok(())
    } else {
        Err(Error::param("sigma", format!("must be positive, got {sigma}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ContactKind {
    Pair(usize, usize),
    CapPlus(usize),
    CapMinus(usize),
}

/// One boundary piece of the stretched allowed set, with its unit inward
/// normal and signed gap (negative when violated).
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryContact {
    pub kind: ContactKind,
    pub normal: DVector<f64>,
    pub gap: f64,
}

/// `sqrt(2 + 2 sigma^2)`, the norm of the pair-constraint gradient.
#[inline]
pub fn pair_scale(sigma: f64) -> f64 {
    (2.0 + 2.0 * sigma * sigma).sqrt()
}

/// Unit inward normal of the pair constraint `(i, j)` in stretched
/// coordinates.
///
/// The center components are `±(x_i - x_j) / |x_i - x_j|` and the radius
/// components are `-sigma`, all divided by `sqrt(2 + 2 sigma^2)`. On the
/// contact surface `|x_i - x_j| = sigma (r_i + r_j)` this coincides with
/// `w / sqrt(2 + 2 sigma^2)`, `w_i = (x_i - x_j) / (sigma (r_i + r_j))`; off the
/// surface it stays a unit vector.
pub fn pair_normal(c: &Configuration, i: usize, j: usize, sigma: f64) -> Result<BoundaryContact> {
    check_sigma(sigma)?;
    if i == j {
        return Err(Error::param("j", "pair normal needs two distinct globules"));
    }
    let gi = c.get(i)?;
    let gj = c.get(j)?;
    let d = gi.center - gj.center;
    let dist = d.norm();
    if dist == 0.0 {
        return Err(Error::DegenerateContact { i, j });
    }
    let u = d / dist;
    let s = pair_scale(sigma);
    let mut normal = DVector::zeros(COORDS_PER_GLOBULE * c.len());
    for k in 0..3 {
        normal[center_offset(i) + k] = u[k] / s;
        normal[center_offset(j) + k] = -u[k] / s;
    }
    normal[radius_offset(i)] = -sigma / s;
    normal[radius_offset(j)] = -sigma / s;
    Ok(BoundaryContact {
        kind: ContactKind::Pair(i, j),
        normal,
        gap: dist - sigma * (gi.radius + gj.radius),
    })
}

/// Upper radius cap of globule `i` (stretched coordinates); inward normal is
/// `-e` along the radius coordinate.
pub fn cap_plus_contact(c: &Configuration, i: usize, params: &ModelParams) -> Result<BoundaryContact> {
    let g = c.get(i)?;
    let mut normal = DVector::zeros(COORDS_PER_GLOBULE * c.len());
    normal[radius_offset(i)] = -1.0;
    Ok(BoundaryContact {
        kind: ContactKind::CapPlus(i),
        normal,
        gap: params.r_plus / params.sigma - g.radius,
    })
}

/// Lower radius cap of globule `i` (stretched coordinates); inward normal is
/// `+e` along the radius coordinate.
pub fn cap_minus_contact(c: &Configuration, i: usize, params: &ModelParams) -> Result<BoundaryContact> {
    let g = c.get(i)?;
    let mut normal = DVector::zeros(COORDS_PER_GLOBULE * c.len());
    normal[radius_offset(i)] = 1.0;
    Ok(BoundaryContact {
        kind: ContactKind::CapMinus(i),
        normal,
        gap: g.radius - params.r_minus / params.sigma,
    })
}

/// All constraints of the stretched configuration with gap `<= tol`.
pub fn active_contacts(c: &Configuration, params: &ModelParams, tol: f64) -> Result<Vec<BoundaryContact>> {
    let sigma = params.sigma;
    let mut out = Vec::new();
    for i in 0..c.len() {
        for j in i + 1..c.len() {
            let (a, b) = (&c.globules[i], &c.globules[j]);
            if (a.center - b.center).norm() - sigma * (a.radius + b.radius) <= tol {
                out.push(pair_normal(c, i, j, sigma)?);
            }
        }
        let plus = cap_plus_contact(c, i, params)?;
        if plus.gap <= tol {
            out.push(plus);
        }
        let minus = cap_minus_contact(c, i, params)?;
        if minus.gap <= tol {
            out.push(minus);
        }
    }
    Ok(out)
}

/// `C_i(x)`: globules reachable from `i` through chains of contacts
/// `|x_k - x_l| <= sigma (r_k + r_l) + contact_tol` (stretched coordinates).
/// Sorted ascending; always contains `i`.
pub fn cluster(c: &Configuration, i: usize, sigma: f64, contact_tol: f64) -> Result<Vec<usize>> {
    c.get(i)?;
    let n = c.len();
    let mut seen = vec![false; n];
    let mut stack = vec![i];
    seen[i] = true;
    while let Some(k) = stack.pop() {
        let gk = &c.globules[k];
        for l in 0..n {
            if seen[l] {
                continue;
            }
            let gl = &c.globules[l];
            if (gk.center - gl.center).norm() <= sigma * (gk.radius + gl.radius) + contact_tol {
                seen[l] = true;
                stack.push(l);
            }
        }
    }
    Ok((0..n).filter(|&k| seen[k]).collect())
}

/// The compatibility vector `v(x)` (stretched coordinates):
/// `v_i = x_i - mean_{k in C_i} x_k` and
/// `rv_i = r_minus ((r_plus + r_minus)/2 - sigma r_i) / ((r_plus - r_minus)(sigma ∨ 1))`.
pub fn pushback_vector(c: &Configuration, params: &ModelParams, contact_tol: f64) -> Result<DVector<f64>> {
    let sigma = params.sigma;
    let (rm, rp) = (params.r_minus, params.r_plus);
    let mut v = DVector::zeros(COORDS_PER_GLOBULE * c.len());
    for (i, g) in c.iter().enumerate() {
        let members = cluster(c, i, sigma, contact_tol)?;
        let mean = members
            .iter()
            .fold(Vec3::zeros(), |acc, &k| acc + c.globules[k].center)
            / members.len() as f64;
        let vi = g.center - mean;
        for k in 0..3 {
            v[center_offset(i) + k] = vi[k];
        }
        v[radius_offset(i)] =
            rm * (0.5 * (rp + rm) - sigma * g.radius) / ((rp - rm) * params.sigma_or_one());
    }
    Ok(v)
}

/// Uniform exterior sphere radius `r_minus sqrt(2 + 2 sigma^2)` of every pair
/// constraint.
pub fn exterior_sphere_constant(params: &ModelParams) -> f64 {
    params.r_minus * pair_scale(params.sigma)
}

/// Compatibility constant `r_minus / (4 r_plus (sigma ∨ 1) n^{3/2})`.
pub fn compatibility_constant(params: &ModelParams, n: usize) -> f64 {
    params.r_minus / (4.0 * params.r_plus * params.sigma_or_one() * (n as f64).powf(1.5))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(sigma: f64, rm: f64, rp: f64) -> ModelParams {
        ModelParams::new(sigma, rm, rp, 1).unwrap()
    }

    fn pair(a: [f64; 3], ra: f64, b: [f64; 3], rb: f64) -> Configuration {
        Configuration::new(vec![Globule::new(a, ra), Globule::new(b, rb)])
    }

    #[test]
    fn allowed_examples() {
        let p = params(1.0, 0.5, 2.0);
        assert!(allowed(&pair([0.0; 3], 1.0, [2.0, 0.0, 0.0], 1.0), &p));
        assert!(!allowed(&pair([0.0; 3], 1.0, [1.9, 0.0, 0.0], 1.0), &p));
        let single = Configuration::new(vec![Globule::new([0.0; 3], 0.4)]);
        assert!(!allowed(&single, &p));
    }

    #[test]
    fn allowed_checks_external() {
        let ext = Configuration::new(vec![Globule::new([2.4, 0.0, 0.0], 1.0)]);
        let p = params(1.0, 0.5, 2.0).with_external(ext);
        let inside = Configuration::new(vec![Globule::new([0.0; 3], 1.5)]);
        assert!(!allowed(&inside, &p));
        assert!(allowed_internal(&inside, &p));
        let clear = Configuration::new(vec![Globule::new([0.0; 3], 1.4)]);
        assert!(allowed(&clear, &p));
    }

    #[test]
    fn stretch_examples() {
        let c = Configuration::new(vec![Globule::new([0.0; 3], 1.0)]);
        assert_eq!(sigma_stretch(&c, 2.0).unwrap().globules[0].radius, 0.5);
        assert_eq!(sigma_stretch(&c, 1.0).unwrap(), c);
        let c = Configuration::new(vec![Globule::new([1.0, 2.0, 3.0], 0.6)]);
        let s = sigma_stretch(&c, 0.5).unwrap();
        assert_eq!(s.globules[0].center, Vec3::new(1.0, 2.0, 3.0));
        assert!((s.globules[0].radius - 1.2).abs() < 1e-15);
        assert!(matches!(sigma_stretch(&c, 0.0), Err(Error::Parameter { .. })));
        assert!(matches!(sigma_stretch(&c, -1.0), Err(Error::Parameter { .. })));
    }

    #[test]
    fn pair_normal_unit_sigma() {
        let c = pair([0.0; 3], 1.0, [2.0, 0.0, 0.0], 1.0);
        let n = pair_normal(&c, 0, 1, 1.0).unwrap();
        let expected = DVector::from_vec(vec![-1.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0, -1.0]) / 2.0;
        assert!((n.normal - expected).norm() < 1e-15);
        assert_eq!(n.gap, 0.0);
        assert_eq!(n.kind, ContactKind::Pair(0, 1));
    }

    #[test]
    fn pair_normal_rotated() {
        let c = pair([0.0; 3], 1.0, [0.0, 0.0, 2.0], 1.0);
        let n = pair_normal(&c, 0, 1, 1.0).unwrap();
        let expected = DVector::from_vec(vec![0.0, 0.0, -1.0, -1.0, 0.0, 0.0, 1.0, -1.0]) / 2.0;
        assert!((n.normal - expected).norm() < 1e-15);
    }

    #[test]
    fn pair_normal_sigma_two() {
        let c = pair([0.0; 3], 0.5, [2.0, 0.0, 0.0], 0.5);
        let n = pair_normal(&c, 0, 1, 2.0).unwrap();
        let expected =
            DVector::from_vec(vec![-1.0, 0.0, 0.0, -2.0, 1.0, 0.0, 0.0, -2.0]) / 10f64.sqrt();
        assert!((n.normal - expected).norm() < 1e-15);
        assert!(n.gap.abs() < 1e-15);
    }

    #[test]
    fn pair_normal_rejects_coincident_centers() {
        let c = pair([1.0; 3], 1.0, [1.0; 3], 1.0);
        assert!(matches!(
            pair_normal(&c, 0, 1, 1.0),
            Err(Error::DegenerateContact { i: 0, j: 1 })
        ));
    }

    #[test]
    fn cluster_examples() {
        let row = Configuration::new(vec![
            Globule::new([0.0; 3], 1.0),
            Globule::new([2.0, 0.0, 0.0], 1.0),
            Globule::new([4.0, 0.0, 0.0], 1.0),
        ]);
        assert_eq!(cluster(&row, 0, 1.0, 0.0).unwrap(), vec![0, 1, 2]);

        let single = Configuration::new(vec![Globule::new([0.0; 3], 1.0)]);
        assert_eq!(cluster(&single, 0, 1.0, 0.0).unwrap(), vec![0]);

        let two_pairs = Configuration::new(vec![
            Globule::new([0.0; 3], 1.0),
            Globule::new([2.0, 0.0, 0.0], 1.0),
            Globule::new([10.0, 0.0, 0.0], 1.0),
            Globule::new([12.0, 0.0, 0.0], 1.0),
        ]);
        assert_eq!(cluster(&two_pairs, 1, 1.0, 0.0).unwrap(), vec![0, 1]);
        assert_eq!(cluster(&two_pairs, 3, 1.0, 0.0).unwrap(), vec![2, 3]);
    }

    #[test]
    fn pushback_touching_pair() {
        let p = params(1.0, 1.0, 2.0);
        let c = pair([0.0; 3], 1.5, [3.0, 0.0, 0.0], 1.5);
        let v = pushback_vector(&c, &p, 1e-9).unwrap();
        let expected = DVector::from_vec(vec![-1.5, 0.0, 0.0, 0.0, 1.5, 0.0, 0.0, 0.0]);
        assert!((&v - expected).norm() < 1e-15);
        let n = pair_normal(&c, 0, 1, 1.0).unwrap();
        assert!((pair_scale(1.0) * v.dot(&n.normal) - 3.0).abs() < 1e-14);
    }

    #[test]
    fn pushback_cap_plus() {
        for &sigma in &[0.5, 1.0, 2.0] {
            let p = params(sigma, 1.0, 2.0);
            // stretched radius with sigma * r = r_plus
            let c = Configuration::new(vec![Globule::new([0.0; 3], 2.0 / sigma)]);
            let v = pushback_vector(&c, &p, 1e-9).unwrap();
            let n = cap_plus_contact(&c, 0, &p).unwrap();
            assert!(n.gap.abs() < 1e-15);
            let expected = 1.0 / (2.0 * sigma.max(1.0));
            assert!((v.dot(&n.normal) - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn pushback_isolated_midpoint() {
        let p = params(2.0, 1.0, 2.0);
        let c = Configuration::new(vec![Globule::new([5.0, 1.0, 0.0], 0.75)]);
        let v = pushback_vector(&c, &p, 1e-9).unwrap();
        assert!(v.norm() < 1e-15);
    }

    #[test]
    fn exterior_sphere_examples() {
        assert!((exterior_sphere_constant(&params(1.0, 1.0, 2.0)) - 2.0).abs() < 1e-15);
        let p = params(3f64.sqrt(), 2.0, 3.0);
        assert!((exterior_sphere_constant(&p) - 2.0 * 8f64.sqrt()).abs() < 1e-12);
        assert!(ModelParams::new(0.0, 0.5, 1.0, 1).is_err());
    }

    #[test]
    fn model_params_validation() {
        assert!(ModelParams::new(1.0, 0.0, 1.0, 1).is_err());
        assert!(ModelParams::new(1.0, 1.0, 1.0, 1).is_err());
        assert!(ModelParams::new(1.0, 0.5, 1.0, 0).is_err());
        assert!(ModelParams::new(f64::NAN, 0.5, 1.0, 1).is_err());
    }

    #[test]
    fn vector_layout_round_trip() {
        let c = pair([1.0, 2.0, 3.0], 0.5, [4.0, 5.0, 6.0], 0.7);
        let v = c.to_vector();
        assert_eq!(v.as_slice(), &[1.0, 2.0, 3.0, 0.5, 4.0, 5.0, 6.0, 0.7]);
        assert_eq!(Configuration::from_vector(&v), c);
    }
}
