use super::*;
use crate::error::Error;
use crate::fields::TorusMap;
use crate::moduli::Mark;
use crate::spectrum::{unstable_basis, IndexOptions};
use crate::targets::TargetManifold;

const PI: f64 = std::f64::consts::PI;

fn clifford(n: usize) -> TorusMap {
    let s = 0.5f64.sqrt();
    TorusMap::from_fn(Mark::new(0.0, 1.0), TargetManifold::unit_s3(), n, n, |a, b| {
        vec![
            s * (2.0 * PI * a).cos(),
            s * (2.0 * PI * a).sin(),
            s * (2.0 * PI * b).cos(),
            s * (2.0 * PI * b).sin(),
        ]
    })
    .expect("clifford construction")
}

fn equatorial_value(w: Complex64) -> Vec<f64> {
    let n2 = w.norm_sqr();
    vec![2.0 * w.re / (1.0 + n2), 2.0 * w.im / (1.0 + n2), (1.0 - n2) / (1.0 + n2), 0.0]
}

// ---------------------------------------------------------------------- cutoff

#[test]
fn cutoff_profile_rejects_bad_radii() {
    for r in [0.0, 1.0, -0.3, 1.7, f64::NAN] {
        assert!(matches!(cutoff_profile(r), Err(Error::BadRadius(_))), "radius {r}");
    }
}

#[test]
fn cutoff_profile_shape() {
    let p = cutoff_profile(0.2).unwrap();
    assert_eq!(p.eval(0.0), 0.0);
    assert_eq!(p.eval(0.04), 0.0);
    assert_eq!(p.eval(0.2), 1.0);
    assert_eq!(p.eval(0.9), 1.0);
    // Continuity at the breakpoints and monotonicity across the annulus.
    assert!(p.eval(0.04 + 1e-12) < 1e-10);
    assert!((p.eval(0.2 - 1e-12) - 1.0).abs() < 1e-10);
    let mut prev = -1.0;
    for i in 0..=400 {
        let rho = 1e-3 + (0.5 - 1e-3) * i as f64 / 400.0;
        let v = p.eval(rho);
        assert!(v >= prev - 1e-14, "not monotone at rho = {rho}");
        assert!((0.0..=1.0).contains(&v));
        prev = v;
    }
}

#[test]
fn cutoff_quadrature_matches_exact_integral() {
    for r in [(-2.0 * PI).exp(), 0.1, 0.01] {
        let p = cutoff_profile(r).unwrap();
        let exact = p.grad_sq_exact();
        assert!((exact - 2.0 * PI / (-r.ln())).abs() < 1e-14);
        let approx = cutoff_grad_sq(&p, 512, 512);
        let ratio = approx / exact;
        assert!(
            (0.98..=1.02).contains(&ratio),
            "radius {r}: quadrature/exact = {ratio}"
        );
    }
}

// ---------------------------------------------------------------------- Möbius

#[test]
fn mobius_validation_contracts() {
    assert!(Mobius::identity().validate().is_ok());
    let bad_det = Mobius {
        a: Complex64::new(1.0 + 1e-6, 0.0),
        ..Mobius::identity()
    };
    assert!(matches!(bad_det.validate(), Err(Error::ConfigViolation(_))));
    let huge = Mobius::shrink(1e12);
    // Condition ~1e12 exceeds the cap even though the determinant is 1.
    assert!(matches!(huge.unwrap().validate(), Err(Error::ChartOverflow(_))));
    assert!(matches!(Mobius::shrink(-1.0), Err(Error::ConfigViolation(_))));
}

#[test]
fn mobius_shrink_and_inverse() {
    let m = Mobius::shrink(25.0).unwrap();
    let z = Complex64::new(3.0, -4.0);
    assert!((m.apply(z).unwrap() - z / 25.0).norm() < 1e-12);
    let inv = m.inverse();
    let back = inv.apply(m.apply(z).unwrap()).unwrap();
    assert!((back - z).norm() < 1e-12);
    // Projective form agrees with the affine one away from the pole.
    let (num, den) = m.map_frac(z, Complex64::new(1.0, 0.0));
    assert!((num / den - z / 25.0).norm() < 1e-12);
}

#[test]
fn mobius_circle_image_matches_pointwise_images() {
    // Inversion: det(0, i; i, 0) = 1, z -> 1/z.
    let inv = Mobius {
        a: Complex64::new(0.0, 0.0),
        b: Complex64::new(0.0, 1.0),
        c: Complex64::new(0.0, 1.0),
        d: Complex64::new(0.0, 0.0),
    };
    assert!(inv.validate().is_ok());
    let p = Complex64::new(3.0, 1.0);
    let r = 0.8;
    let (q, s) = inv.circle_image(p, r).unwrap();
    for t in 0..16 {
        let ang = 2.0 * PI * t as f64 / 16.0;
        let z = p + Complex64::from_polar(r, ang);
        let img = inv.apply(z).unwrap();
        assert!(
            ((img - q).norm() - s).abs() < 1e-10,
            "point {t} off the image circle: |{img} - {q}| vs {s}"
        );
    }
    // Affine case.
    let aff = Mobius {
        a: Complex64::new(2.0, 0.0),
        b: Complex64::new(1.0, 1.0),
        c: Complex64::new(0.0, 0.0),
        d: Complex64::new(0.5, 0.0),
    };
    let (q, s) = aff.circle_image(p, r).unwrap();
    assert!((q - (aff.a * p + aff.b) / aff.d).norm() < 1e-12);
    assert!((s - 4.0 * r).abs() < 1e-12);
    // A circle through the pole has a line for image: rejected.
    let through_pole = inv.circle_image(Complex64::new(1.0, 0.0), 1.0);
    assert!(matches!(through_pole, Err(Error::ChartOverflow(_))));
}

#[test]
fn mobius_serde_roundtrip() {
    let m = Mobius::cylinder_twist(0.3, 1.1);
    let json = serde_json::to_string(&m).unwrap();
    let back: Mobius = serde_json::from_str(&json).unwrap();
    assert_eq!(m, back);
}

// ------------------------------------------------------------------ sphere maps

#[test]
fn equatorial_sphere_energy_and_poles() {
    let target = TargetManifold::unit_s3();
    let v = SphereMap::equatorial(&target, None).unwrap();
    assert!((v.grad_sq_total() - 8.0 * PI).abs() < 1e-12);
    let quad = v.energy();
    assert!(
        (quad - 4.0 * PI).abs() < 1e-3 * 4.0 * PI,
        "chart quadrature {quad} vs {}",
        4.0 * PI
    );
    let inf = v.value_at_infinity();
    assert!((inf[2] + 1.0).abs() < 1e-14 && inf[0].abs() < 1e-14 && inf[3].abs() < 1e-14);
    let mut at0 = vec![0.0; 4];
    v.eval(Complex64::new(0.0, 0.0), &mut at0);
    assert!((at0[2] - 1.0).abs() < 1e-14);
}

#[test]
fn equatorial_rotation_sends_infinity_to_requested_point() {
    let target = TargetManifold::unit_s3();
    let mut p = vec![0.3, -0.4, 0.5, 0.7];
    let n = crate::num::norm(&p);
    for x in p.iter_mut() {
        *x /= n;
    }
    let v = SphereMap::equatorial(&target, Some(&p)).unwrap();
    let inf = v.value_at_infinity();
    for k in 0..4 {
        assert!((inf[k] - p[k]).abs() < 1e-12, "component {k}: {} vs {}", inf[k], p[k]);
    }
    // A rotation preserves the total gradient integral.
    assert!((v.grad_sq_total() - 8.0 * PI).abs() < 1e-12);
}

#[test]
fn sampled_sphere_map_agrees_with_closed_form() {
    let target = TargetManifold::unit_s3();
    let v = SphereMap::from_fns(
        target,
        CHART_RES,
        |z| equatorial_value(z),
        |w| {
            // v(1/w) expressed without dividing at w = 0.
            let n2 = w.norm_sqr();
            vec![
                2.0 * w.re / (1.0 + n2),
                -2.0 * w.im / (1.0 + n2),
                (n2 - 1.0) / (1.0 + n2),
                0.0,
            ]
        },
    )
    .expect("chart overlap within tolerance");
    let mut out = vec![0.0; 4];
    for (re, im) in [(0.0, 0.0), (0.4, -0.3), (0.9, 0.1), (2.5, 1.0), (40.0, -3.0)] {
        let z = Complex64::new(re, im);
        v.eval(z, &mut out);
        let exact = equatorial_value(z);
        for k in 0..4 {
            assert!(
                (out[k] - exact[k]).abs() < 1e-7,
                "z = {z}: component {k}: {} vs {}",
                out[k],
                exact[k]
            );
        }
    }
    assert!((v.energy() - 4.0 * PI).abs() < 2e-3 * 4.0 * PI);
    assert!((v.grad_sq_total() - 8.0 * PI).abs() < 4e-3 * 8.0 * PI);
}

#[test]
fn sphere_field_constant_is_exact() {
    let f = SphereField::constant(&[1.0, -2.0, 3.0, 0.25]);
    let mut out = vec![0.0; 4];
    for (num, den) in [
        (Complex64::new(0.3, 0.1), Complex64::new(1.0, 0.0)),
        (Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)),
        (Complex64::new(17.0, -4.0), Complex64::new(1.0, 0.0)),
    ] {
        f.eval_frac(num, den, &mut out);
        assert!((out[0] - 1.0).abs() < 1e-12);
        assert!((out[1] + 2.0).abs() < 1e-12);
        assert!((out[2] - 3.0).abs() < 1e-12);
        assert!((out[3] - 0.25).abs() < 1e-12);
    }
}

// ------------------------------------------------------------- configurations

#[test]
fn config_validation_enforces_nesting() {
    let u = clifford(16);
    let coll = BubbleCollection::new(Some(u.clone()), vec![], false).unwrap();
    // Ball counts must match the collection.
    let cfg = BubbleConfig {
        balls: vec![Ball { center: (0.5, 0.5), radius: 0.2 }],
        d0: (0.0, 0.0),
        ds: vec![],
    };
    assert!(matches!(cfg.validate(u.tau(), &coll), Err(Error::ConfigViolation(_))));

    let target = TargetManifold::unit_s3();
    let sphere = || SphereMap::equatorial(&target, None).unwrap();
    let coll2 =
        BubbleCollection::new(Some(u.clone()), vec![sphere(), sphere()], false).unwrap();
    let mk = |b1: Ball, b2: Ball| BubbleConfig {
        balls: vec![b1, b2],
        d0: (0.0, 0.0),
        ds: vec![Mobius::identity(), Mobius::identity()],
    };
    // Disjoint: fine.
    let disjoint = mk(
        Ball { center: (0.2, 0.2), radius: 0.1 },
        Ball { center: (0.7, 0.7), radius: 0.1 },
    );
    assert!(disjoint.validate(u.tau(), &coll2).is_ok());
    // Intersecting without square-radius containment: rejected.
    let crossing = mk(
        Ball { center: (0.5, 0.5), radius: 0.2 },
        Ball { center: (0.62, 0.5), radius: 0.2 },
    );
    assert!(matches!(crossing.validate(u.tau(), &coll2), Err(Error::ConfigViolation(_))));
    // Nested inside the square-radius core: accepted, containment recorded.
    let nested = mk(
        Ball { center: (0.5, 0.5), radius: 0.45 },
        Ball { center: (0.55, 0.5), radius: 0.1 },
    );
    let geom = nested.validate(u.tau(), &coll2).unwrap();
    assert_eq!(geom.contained[0], vec![1]);
    assert!(geom.contained[1].is_empty());
}

#[test]
fn domain_masks_partition_consistently() {
    let u = clifford(32);
    let target = TargetManifold::unit_s3();
    let sphere = || SphereMap::equatorial(&target, None).unwrap();
    let coll =
        BubbleCollection::new(Some(u.clone()), vec![sphere(), sphere()], false).unwrap();
    let cfg = BubbleConfig {
        balls: vec![
            Ball { center: (0.5, 0.5), radius: 0.45 },
            Ball { center: (0.55, 0.5), radius: 0.1 },
        ],
        d0: (0.0, 0.0),
        ds: vec![Mobius::identity(), Mobius::identity()],
    };
    let geom = cfg.validate(u.tau(), &coll).unwrap();
    let masks = build_masks(&u, &cfg, &geom);
    let (na, nb) = u.grid();
    for i in 0..na {
        let a = (i as f64 + 0.5) / na as f64;
        for j in 0..nb {
            let b = (j as f64 + 0.5) / nb as f64;
            let idx = i * nb + j;
            let d: Vec<f64> = cfg
                .balls
                .iter()
                .map(|ball| torus_distance(u.tau(), (a, b), ball.center))
                .collect();
            let in_any = d[0] < 0.45 || d[1] < 0.1;
            assert_eq!(masks.outside[idx], !in_any);
            assert_eq!(masks.union_balls[idx], in_any);
            // The annular domains exclude contained balls and are disjoint.
            let om0 = d[0] < 0.45 * 0.45 && d[1] >= 0.1;
            let om1 = d[1] < 0.1 * 0.1;
            assert_eq!(masks.omega[0][idx], om0, "cell ({i},{j})");
            assert_eq!(masks.omega[1][idx], om1, "cell ({i},{j})");
            assert!(!(masks.omega[0][idx] && masks.omega[1][idx]));
            let neck = (d[0] < 0.45 && d[0] >= 0.45 * 0.45)
                || (d[1] < 0.1 && d[1] >= 0.1 * 0.1);
            assert_eq!(masks.neck[idx], neck);
        }
    }
}

// ------------------------------------------------------------------- defect

#[test]
fn defect_vanishes_for_the_collection_itself() {
    let u = clifford(24);
    let coll = BubbleCollection::new(Some(u.clone()), vec![], false).unwrap();
    let d = bubble_defect(&u, &coll, &BubbleConfig::empty()).unwrap();
    assert!(d < 1e-10, "defect of a map against itself: {d}");
}

#[test]
fn defect_reports_modulus_mismatch() {
    let u = clifford(24);
    let body = u.with_mark(Mark::new(0.01, 1.0)).unwrap();
    let coll = BubbleCollection::new(Some(body), vec![], false).unwrap();
    let d = bubble_defect(&u, &coll, &BubbleConfig::empty()).unwrap();
    assert!((d - 0.01).abs() < 1e-9, "defect {d} should equal the mark distance 0.01");
}

#[test]
fn defect_absorbs_integer_grid_shifts_via_d0() {
    let n = 32;
    let body = clifford(n);
    let u = body.grid_shift(5, 9);
    let coll = BubbleCollection::new(Some(body), vec![], false).unwrap();
    let aligned = BubbleConfig {
        balls: vec![],
        d0: (5.0 / n as f64, 9.0 / n as f64),
        ds: vec![],
    };
    let d = bubble_defect(&u, &coll, &aligned).unwrap();
    assert!(d < 1e-9, "aligned shift should zero the defect, got {d}");
    let misaligned = bubble_defect(&u, &coll, &BubbleConfig::empty()).unwrap();
    assert!(misaligned > 0.1, "ignoring the shift must cost energy, got {misaligned}");
}

#[test]
fn degenerate_cylinder_defect_approaches_the_cap_integral() {
    // A map equal to the cylinder body everywhere has zero difference term;
    // the whole defect is the energy of the two spherical caps the cylinder
    // misses: 16π / (1 + e^{2π·Im τ}) for an equatorial bubble.
    let h_mod = 1.5f64;
    let tail = 16.0 * PI / (1.0 + (2.0 * PI * h_mod).exp());
    let target = TargetManifold::unit_s3();
    let sphere = SphereMap::equatorial(&target, None).unwrap();
    let coll = BubbleCollection::new(None, vec![sphere], true).unwrap();
    let cfg = BubbleConfig { balls: vec![], d0: (0.0, 0.0), ds: vec![Mobius::identity()] };
    let n = 128usize;
    let mark = Mark::new(0.0, h_mod);
    let tau = mark.tau;
    let u = TorusMap::from_fn(mark, TargetManifold::unit_s3(), n, n, |a, b| {
        equatorial_value(cylinder_chart(tau, a, b))
    })
    .unwrap();
    let defect = bubble_defect(&u, &coll, &cfg).unwrap();
    let measured_tail = (defect / 3.0).powi(2);
    assert!(
        (measured_tail - tail).abs() <= 0.1 * tail,
        "measured cap energy {measured_tail} vs analytic {tail}"
    );
}

#[test]
fn defect_is_stable_under_small_tangential_noise() {
    // Start from a map at a definite distance from the body (a smooth
    // low-frequency displacement), then add small high-frequency noise. The
    // defect may move by at most the gradient norm of the noise.
    let body = clifford(24);
    let smooth = Section::from_fn(&body, SectionFlavor::Ambient, |a, b| {
        let sa = (2.0 * PI * a).sin();
        let ca = (2.0 * PI * a).cos();
        let sb = (2.0 * PI * b).sin();
        vec![-sb * sa, sb * ca, 0.0, 0.0]
    })
    .unwrap()
    .tangentialize(&body);
    let u = body.perturb(&smooth, 0.02).unwrap();
    let coll = BubbleCollection::new(Some(body), vec![], false).unwrap();
    let cfg = BubbleConfig::empty();
    let base = bubble_defect(&u, &coll, &cfg).unwrap();
    assert!(base > 0.05, "base defect {base} should be dominated by the smooth part");

    let mut rng = rng_from_seed(0x5eed);
    let mut raw = Section::zeros(&u, SectionFlavor::Ambient);
    for v in raw.values.iter_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    let section = raw.tangentialize(&u);
    let u2 = u.perturb(&section, 1e-4).unwrap();
    let diff = diff_block(u2.nodes(), u.nodes());
    let all = vec![true; u.grid().0 * u.grid().1];
    let eta = grad_sq_masked(&u, &diff, &all).sqrt();
    assert!(eta > 1e-6, "perturbation should be measurable, got {eta}");
    let moved = bubble_defect(&u2, &coll, &cfg).unwrap();
    assert!(
        (moved - base).abs() <= eta + 1e-6,
        "defect moved {} for a perturbation of gradient norm {eta}",
        (moved - base).abs()
    );
}

// ---------------------------------------------------------------- find_config

#[test]
fn find_config_recovers_integer_shift_of_the_body() {
    let n = 64;
    let body = clifford(n);
    let u = body.grid_shift(7, 3);
    let coll = BubbleCollection::new(Some(body), vec![], false).unwrap();
    let cfg = find_config(&u, &coll).unwrap();
    assert!(cfg.balls.is_empty());
    let h = 1.0 / n as f64;
    let da = (cfg.d0.0 - 7.0 * h).rem_euclid(1.0).min((7.0 * h - cfg.d0.0).rem_euclid(1.0));
    let db = (cfg.d0.1 - 3.0 * h).rem_euclid(1.0).min((3.0 * h - cfg.d0.1).rem_euclid(1.0));
    assert!(da < 0.51 * h && db < 0.51 * h, "shift estimate {:?}", cfg.d0);
    let d = bubble_defect(&u, &coll, &cfg).unwrap();
    assert!(d < 1e-6, "defect {d} after exact-shift recovery");
}

#[test]
fn find_config_requires_a_concentration_for_each_bubble() {
    // A plain low-defect body map cannot match a collection that expects a
    // bubble: no energy concentration exists.
    let u = clifford(32);
    let target = TargetManifold::unit_s3();
    let sphere = SphereMap::equatorial(&target, None).unwrap();
    let coll = BubbleCollection::new(Some(u.clone()), vec![sphere], false).unwrap();
    assert!(matches!(find_config(&u, &coll), Err(Error::NoCandidate(_))));
}

// ----------------------------------------------------------------- transplant

#[test]
fn transplant_of_body_basis_passes_band_and_envelope() {
    let u = clifford(16);
    let coll = BubbleCollection::new(Some(u.clone()), vec![], false).unwrap();
    let cfg = BubbleConfig::empty();
    let basis = unstable_basis(&u, 4, &IndexOptions::default()).unwrap();
    assert_eq!(basis.sections.len(), 4);
    let bases = TransplantBases::body_only(basis, 0);
    let opts = TransplantOptions { n_samples: 80, hessian_samples: 8, ..Default::default() };
    let pack = transplant(&u, &coll, &cfg, &bases, &opts).unwrap();
    assert_eq!(pack.k, 4);
    assert!(pack.c0 > 0.0 && pack.c0 < 1.0);
    // The map is a critical point, so the surrogate maximum sits at the
    // origin and the maximal value is the map's energy.
    assert!(crate::num::norm(&pack.m) < 1e-5, "maximizer {:?}", pack.m);
    assert!((pack.e_at_m - u.energy()).abs() < 1e-9);
    // Moving along the pack strictly decreases energy.
    let s = vec![0.5, 0.0, 0.0, 0.0];
    let (excess, defect) = separation_check(&u, &coll, &cfg, &pack, &s).unwrap();
    assert!(excess < -1e-4, "unstable direction should drop energy, got {excess}");
    assert!(defect.is_finite() && defect > 0.0);
}

#[test]
fn transplant_with_no_directions_is_a_fast_identity() {
    let u = clifford(16);
    let coll = BubbleCollection::new(Some(u.clone()), vec![], false).unwrap();
    let pack = transplant(
        &u,
        &coll,
        &BubbleConfig::empty(),
        &TransplantBases::default(),
        &TransplantOptions::default(),
    )
    .unwrap();
    assert_eq!(pack.k, 0);
    assert!(pack.fields.is_empty() && pack.m.is_empty());
    assert_eq!(pack.c0, 1.0);
    assert!((pack.e_at_m - u.energy()).abs() < 1e-14);
    let (excess, _) =
        separation_check(&u, &coll, &BubbleConfig::empty(), &pack, &[]).unwrap();
    assert_eq!(excess, 0.0);
}

#[test]
fn transplant_rejects_large_defect_before_any_work() {
    let u = clifford(16);
    let body = u.with_mark(Mark::new(0.05, 1.0)).unwrap();
    let coll = BubbleCollection::new(Some(body), vec![], false).unwrap();
    let opts = TransplantOptions { eps_unstable: 0.01, ..Default::default() };
    let out = transplant(
        &u,
        &coll,
        &BubbleConfig::empty(),
        &TransplantBases::default(),
        &opts,
    );
    match out {
        Err(Error::DefectTooLarge { defect, threshold }) => {
            assert!((defect - 0.05).abs() < 1e-9);
            assert_eq!(threshold, 0.01);
        }
        other => panic!("expected DefectTooLarge, got {other:?}"),
    }
}

#[test]
fn sample_ball_is_deterministic_and_inside() {
    let a = sample_ball(3, 50, 42);
    let b = sample_ball(3, 50, 42);
    assert_eq!(a, b);
    assert_eq!(a.len(), 51);
    assert!(a[0].iter().all(|&x| x == 0.0));
    for s in &a {
        assert!(crate::num::dot(s, s) <= 1.0 + 1e-12);
    }
    let c = sample_ball(3, 50, 43);
    assert_ne!(a[1], c[1]);
}

#[test]
fn bubble_config_serde_roundtrip() {
    let cfg = BubbleConfig {
        balls: vec![Ball { center: (0.25, 0.75), radius: 0.125 }],
        d0: (0.1, 0.9),
        ds: vec![Mobius::shrink(0.02).unwrap()],
    };
    let json = serde_json::to_string_pretty(&cfg).unwrap();
    let back: BubbleConfig = serde_json::from_str(&json).unwrap();
    assert_eq!(back.balls, cfg.balls);
    assert_eq!(back.d0, cfg.d0);
    assert_eq!(back.ds, cfg.ds);
}
