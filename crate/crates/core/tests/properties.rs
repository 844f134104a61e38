use globule_core::diagnostics::{detect_chain, modulus_of_continuity, nice_path_membership, PathRegularityParams};
use globule_core::dynamics::{step, DriveIncrements, LocalTimeLedger, TrajectoryRecord};
use globule_core::geometry::{
    active_contacts, allowed, compatibility_constant, exterior_sphere_constant, pair_normal, pushback_vector,
    sigma_stretch, sigma_unstretch, ContactKind,
};
use globule_core::penalization::PenalizationSpec;
use globule_core::{Configuration, Globule, ModelParams, Vec3};
use nalgebra::{DVector, Rotation3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn unit(r: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Stretched configuration of `n` globules grown as a touching cluster: each
/// new globule sits exactly on the contact surface of an earlier one. Some
/// radii are pinned at a cap.
fn touching_cluster(n: usize, p: &ModelParams, seed: u64) -> Configuration {
    let mut r = rng(seed);
    let s = p.sigma();
    let (lo, hi) = (p.r_minus() / s, p.r_plus() / s);
    'outer: loop {
        let mut gs: Vec<Globule> = Vec::new();
        for k in 0..n {
            let rad = match r.random_range(0..4) {
                0 => lo,
                1 => hi,
                _ => r.random_range(lo..hi),
            };
            if k == 0 {
                gs.push(Globule::new([0.0; 3], rad));
                continue;
            }
            let mut placed = false;
            for _ in 0..50 {
                let anchor = gs[r.random_range(0..gs.len())];
                let center = anchor.center + unit(&mut r) * s * (anchor.radius + rad);
                let cand = Globule { center, radius: rad };
                if gs
                    .iter()
                    .all(|g| (g.center - center).norm() >= s * (g.radius + rad) * (1.0 - 1e-12))
                {
                    gs.push(cand);
                    placed = true;
                    break;
                }
            }
            if !placed {
                continue 'outer;
            }
        }
        return Configuration::new(gs);
    }
}

fn stretched_gap(c: &Configuration, i: usize, j: usize, sigma: f64) -> f64 {
    let (a, b) = (&c.globules[i], &c.globules[j]);
    (a.center - b.center).norm() - sigma * (a.radius + b.radius)
}

fn sigma_strategy() -> impl Strategy<Value = f64> {
    prop_oneof![Just(1.0), 0.3..3.0f64]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn stretch_is_a_bijection_of_allowed_sets(
        seed in any::<u64>(), n in 1usize..6, sigma in sigma_strategy()
    ) {
        let p = ModelParams::new(sigma, 0.4, 1.0, 3).unwrap();
        let mut r = rng(seed);
        let c: Configuration = (0..n)
            .map(|_| Globule::new(
                [r.random_range(-3.0..3.0), r.random_range(-3.0..3.0), r.random_range(-3.0..3.0)],
                r.random_range(0.3..1.1),
            ))
            .collect();
        let back = sigma_unstretch(&sigma_stretch(&c, sigma).unwrap(), sigma).unwrap();
        prop_assert_eq!(allowed(&back, &p), allowed(&c, &p));
        for (a, b) in back.iter().zip(c.iter()) {
            prop_assert!((a.radius - b.radius).abs() <= 1e-15 * b.radius);
        }
    }

    #[test]
    fn pair_normal_symmetries(seed in any::<u64>(), sigma in sigma_strategy()) {
        let mut r = rng(seed);
        let c = Configuration::new(vec![
            Globule::new([r.random_range(-2.0..2.0), r.random_range(-2.0..2.0), 0.3], r.random_range(0.2..1.0)),
            Globule::new([1.0, r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)], r.random_range(0.2..1.0)),
            Globule::new([5.0, 5.0, 5.0], 0.5),
        ]);
        let a = pair_normal(&c, 0, 1, sigma).unwrap().normal;
        let b = pair_normal(&c, 1, 0, sigma).unwrap().normal;
        prop_assert!((a.norm() - 1.0).abs() <= 1e-12);
        // one constraint, whichever order the pair is named in
        prop_assert_eq!(&a, &b);
        for k in 0..3 {
            prop_assert_eq!(a[k], -a[4 + k]);
        }
        prop_assert_eq!(a[3], a[7]);
        prop_assert!(a.rows(8, 4).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn uniform_exterior_sphere(seed in any::<u64>(), n in 2usize..6, sigma in sigma_strategy()) {
        let p = ModelParams::new(sigma, 0.3, 0.9, 3).unwrap();
        let c = touching_cluster(n, &p, seed);
        let alpha = exterior_sphere_constant(&p);
        let mut r = rng(seed ^ 1);
        for i in 0..n {
            for j in i + 1..n {
                if stretched_gap(&c, i, j, sigma).abs() > 1e-9 {
                    continue;
                }
                let nij = pair_normal(&c, i, j, sigma).unwrap().normal;
                for _ in 0..20 {
                    let mut z = DVector::from_fn(4 * n, |_, _| r.random_range(-1.0..1.0));
                    z *= alpha * r.random_range(0.0..0.999) / z.norm();
                    let moved = Configuration::from_vector(&(c.to_vector() - alpha * &nij + z));
                    prop_assert!(stretched_gap(&moved, i, j, sigma) < 0.0);
                }
            }
        }
    }

    #[test]
    fn normal_cone_continuity(seed in any::<u64>(), sigma in sigma_strategy(), h in 1e-6..1e-2f64) {
        let p = ModelParams::new(sigma, 0.3, 0.9, 3).unwrap();
        let (lo, hi) = (p.r_minus() / sigma, p.r_plus() / sigma);
        let mut r = rng(seed);
        let on_surface = |ri: f64, rj: f64, u: Vec3, xj: Vec3| Configuration::new(vec![
            Globule { center: xj + u * sigma * (ri + rj), radius: ri },
            Globule { center: xj, radius: rj },
        ]);
        let mid = 0.5 * (lo + hi);
        let u = unit(&mut r);
        let x = on_surface(mid, mid, u, Vec3::zeros());
        let u2 = (u + unit(&mut r) * h).normalize();
        let y = on_surface(mid + h * r.random_range(-1.0..1.0), mid, u2, unit(&mut r) * h);
        let nx = pair_normal(&x, 0, 1, sigma).unwrap().normal;
        let ny = pair_normal(&y, 0, 1, sigma).unwrap().normal;
        let dist = (x.to_vector() - y.to_vector()).norm();
        let bound = 1.0 - std::f64::consts::SQRT_2 * dist / (p.r_minus() * (1.0 + sigma * sigma));
        prop_assert!(nx.dot(&ny) >= bound - 1e-14);
    }

    #[test]
    fn compatibility_of_pushback(seed in any::<u64>(), n in 1usize..6, sigma in sigma_strategy()) {
        let p = ModelParams::new(sigma, 0.3, 0.9, 3).unwrap();
        let c = touching_cluster(n, &p, seed);
        let v = pushback_vector(&c, &p, 1e-9).unwrap();
        let beta = compatibility_constant(&p, n);
        for contact in active_contacts(&c, &p, 1e-9).unwrap() {
            prop_assert!(
                v.dot(&contact.normal) >= beta * v.norm() - 1e-12,
                "{:?}: {} < {}", contact.kind, v.dot(&contact.normal), beta * v.norm()
            );
        }
    }
}

const ELL: u32 = 2;
const RM: f64 = 0.5;
const RP: f64 = 1.2;

fn penalized_with_external() -> (ModelParams, PenalizationSpec) {
    let ext = Configuration::new(vec![Globule::new([3.6, 0.0, 0.0], 0.7)]);
    let p = ModelParams::new(1.0, RM, RP, ELL).unwrap().with_external(ext);
    let spec = PenalizationSpec::new(&p).unwrap();
    (p, spec)
}

/// Probe points concentrated near every transition band.
fn probe() -> impl Strategy<Value = (Vec3, f64)> {
    let w = (-(ELL as f64)).exp();
    let l = ELL as f64;
    let dir = (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
        .prop_filter("nonzero", |(a, b, c)| a * a + b * b + c * c > 1e-4)
        .prop_map(|(a, b, c)| Vec3::new(a, b, c).normalize());
    let norm = prop_oneof![0.01..l + 2.0, (l - 0.1 * w)..(l + 1.1 * w)];
    let radius = prop_oneof![
        0.2..1.4f64,
        (RP - 0.1 * w)..(RP + 1.1 * w),
        (RM - 1.1 * w)..(RM + 0.1 * w),
    ];
    let near_external = (dir.clone(), 0.55..1.0f64).prop_map(|(d, r)| {
        // distance ratio inside or around the contact band of the external
        (Vec3::new(3.6, 0.0, 0.0) + d * (r + 0.7) * (1.0 - 0.02 * d.x.abs()), r)
    });
    prop_oneof![
        (dir, norm, radius).prop_map(|(d, s, r)| (d * s, r)),
        near_external,
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn psi_gradient_matches_finite_differences((x, r) in probe()) {
        let (_, spec) = penalized_with_external();
        let g = Globule { center: x, radius: r };
        let (gx, gr) = spec.psi_gradient(&g);
        let h = 1e-5;
        let fd = |dx: Vec3, drr: f64| {
            let plus = spec.psi(&Globule { center: x + dx, radius: r + drr });
            let minus = spec.psi(&Globule { center: x - dx, radius: r - drr });
            (plus - minus) / (2.0 * h)
        };
        // relative tolerance, with an absolute floor covering the truncation
        // error of the central difference inside the steep bridges
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-4 * b.abs().max(a.abs()) + 5e-6;
        for k in 0..3 {
            let mut e = Vec3::zeros();
            e[k] = h;
            let d = fd(e, 0.0);
            prop_assert!(close(d, gx[k]), "d/dx{}: fd {} vs {}", k, d, gx[k]);
        }
        let d = fd(Vec3::zeros(), h);
        prop_assert!(close(d, gr), "d/dr: fd {} vs {}", d, gr);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn psi_vanishes_exactly_on_the_admissible_set((x, r) in probe()) {
        let (p, spec) = penalized_with_external();
        let g = Globule { center: x, radius: r };
        let v = spec.psi(&g);
        prop_assert!(v >= 0.0);
        let y = &p.external().globules[0];
        let inside = x.norm() <= ELL as f64
            && (RM..=RP).contains(&r)
            && (x - y.center).norm() >= r + y.radius;
        prop_assert_eq!(v == 0.0, inside, "psi = {}", v);
    }

    #[test]
    fn psi_is_rotation_invariant(
        (x, r) in probe(), axis in (-1.0..1.0f64, -1.0..1.0f64, 0.1..1.0f64), angle in 0.0..6.3f64
    ) {
        let p = ModelParams::new(1.0, RM, RP, ELL).unwrap();
        let spec = PenalizationSpec::new(&p).unwrap();
        let rot = Rotation3::from_axis_angle(
            &nalgebra::Unit::new_normalize(Vec3::new(axis.0, axis.1, axis.2)),
            angle,
        );
        let a = spec.psi(&Globule { center: x, radius: r });
        let b = spec.psi(&Globule { center: rot * x, radius: r });
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }
}

/// Globules on a jittered cubic lattice, many at or near contact.
fn packed(n: usize, p: &ModelParams, seed: u64) -> Configuration {
    let mut r = rng(seed);
    let side = (n as f64).cbrt().ceil() as usize;
    let a = 2.0 * p.r_plus() * 1.0005;
    let mut gs = Vec::new();
    'fill: for i in 0..side {
        for j in 0..side {
            for k in 0..side {
                if gs.len() == n {
                    break 'fill;
                }
                let rad = if r.random_bool(0.6) { p.r_plus() } else { r.random_range(p.r_minus()..p.r_plus()) };
                gs.push(Globule::new([i as f64 * a, j as f64 * a, k as f64 * a], rad));
            }
        }
    }
    Configuration::new(gs)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn bounded_steps_project_quickly(seed in any::<u64>(), n in 2usize..=20, sigma in sigma_strategy()) {
        let p = ModelParams::new(sigma, 0.5, 1.0, 20).unwrap();
        let spec = PenalizationSpec::new(&p).unwrap();
        let mut c = packed(n, &p, seed);
        let mut r = rng(seed ^ 7);
        let amp = 0.15 * exterior_sphere_constant(&p);
        let mut ledger = LocalTimeLedger::new(n);
        for _ in 0..20 {
            let drive = DriveIncrements {
                dw: (0..n).map(|_| Vec3::new(
                    r.random_range(-amp..amp), r.random_range(-amp..amp), r.random_range(-amp..amp),
                )).collect(),
                dw_breve: (0..n).map(|_| r.random_range(-amp..amp)).collect(),
            };
            let res = step(&c, 1e-3, &drive, &spec, &p).unwrap();
            prop_assert!(res.projection_iters <= 50);
            prop_assert!(allowed(&res.next, &p));
            for &(kind, dl) in &res.dl {
                prop_assert!(dl > 0.0);
                prop_assert!(res.active_set.iter().any(|a| a.kind == kind), "{:?} inactive", kind);
            }
            let before = ledger.clone();
            ledger.apply(&res.dl);
            prop_assert!(ledger.dominates(&before, 0.0));
            c = res.next;
        }
    }
}

fn walk(n: usize, steps: usize, dt: f64, scale: f64, seed: u64) -> TrajectoryRecord {
    let mut r = rng(seed);
    let mut c: Configuration = (0..n)
        .map(|k| Globule::new([2.2 * k as f64, r.random_range(-0.3..0.3), 0.0], r.random_range(0.4..1.0)))
        .collect();
    let mut states = vec![c.clone()];
    for _ in 0..steps {
        for g in &mut c.globules {
            g.center += Vec3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)) * scale;
            g.radius = (g.radius + r.random_range(-1.0..1.0) * scale).clamp(0.4, 1.0);
        }
        states.push(c.clone());
    }
    TrajectoryRecord {
        times: (0..=steps).map(|k| k as f64 * dt).collect(),
        ledgers: vec![LocalTimeLedger::new(n); steps + 1],
        states,
        drive: None,
        dt,
        refinements: Vec::new(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn chain_detection_is_monotone(seed in any::<u64>(), n in 2usize..9, e1 in 0.0..0.5f64, e2 in 0.0..0.5f64, m in 2usize..5) {
        let traj = walk(n, 1, 1.0, 0.3, seed);
        let c = &traj.states[1];
        let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
        if detect_chain(c, lo, m).unwrap().found {
            prop_assert!(detect_chain(c, hi, m).unwrap().found);
        }
        if detect_chain(c, hi, m + 1).unwrap().found {
            prop_assert!(detect_chain(c, hi, m).unwrap().found);
        }
    }

    #[test]
    fn modulus_is_nondecreasing_in_delta(seed in any::<u64>(), d1 in 1usize..64, d2 in 1usize..64) {
        let traj = walk(2, 64, 1.0 / 64.0, 0.05, seed);
        let (a, b) = (d1.min(d2) as f64 / 64.0, d1.max(d2) as f64 / 64.0);
        for i in 0..2 {
            prop_assert!(modulus_of_continuity(&traj, i, a).unwrap() <= modulus_of_continuity(&traj, i, b).unwrap());
        }
    }

    #[test]
    fn chain_free_sets_shrink_in_epsilon(seed in any::<u64>(), e1 in 0.01..0.6f64, e2 in 0.01..0.6f64) {
        let traj = walk(5, 64, 1.0 / 64.0, 0.05, seed);
        let (lo, hi) = (e1.min(e2), e1.max(e2));
        let at = |e| nice_path_membership(&traj, &PathRegularityParams::new(0.25, e, 3, 0).unwrap()).unwrap();
        let (reg_hi, free_hi) = at(hi);
        let (reg_lo, free_lo) = at(lo);
        if free_hi {
            prop_assert!(free_lo);
        }
        if reg_lo {
            prop_assert!(reg_hi);
        }
    }
}

#[test]
fn contact_kinds_order_pairs_first() {
    assert!(ContactKind::Pair(0, 1) < ContactKind::CapPlus(0));
}
