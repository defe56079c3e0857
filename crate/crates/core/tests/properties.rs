use proptest::prelude::*;

use landau_lab::bounds::tail_bound;
use landau_lab::density::{estimate_density, make_mollifier, MollifierKind};
use landau_lab::engine::StepControls;
use landau_lab::kernels::{eval_a, eval_b, eval_sigma, HFunction};
use landau_lab::scheme::decompose_step;
use landau_lab::simulator::{
    init_population, particle_coefficients, step, ModelSpec, Population, Scheme,
};
use landau_lab::weakform::{weakform_rhs, Monomial, TestFunction};

fn h_kind() -> impl Strategy<Value = HFunction> {
    prop_oneof![
        (0.1f64..5.0).prop_map(|value| HFunction::Constant { value }),
        (0.1f64..1.0, 1.0f64..4.0).prop_map(|(lower, upper)| HFunction::ExponentialFloor { lower, upper }),
        (0.1f64..1.0, 1.0f64..4.0).prop_map(|(lower, upper)| HFunction::RationalFloor { lower, upper }),
    ]
}

fn points(d: usize, n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-3.0f64..3.0, d), n)
}

fn rotation(d: usize, angles: &[f64]) -> Vec<f64> {
    let rot = |i: usize, j: usize, th: f64| {
        let mut m = vec![0.0; d * d];
        for k in 0..d {
            m[k * d + k] = 1.0;
        }
        let (s, c) = th.sin_cos();
        m[i * d + i] = c;
        m[j * d + j] = c;
        m[i * d + j] = -s;
        m[j * d + i] = s;
        m
    };
    let mul = |a: &[f64], b: &[f64]| {
        let mut m = vec![0.0; d * d];
        for r in 0..d {
            for c in 0..d {
                m[r * d + c] = (0..d).map(|k| a[r * d + k] * b[k * d + c]).sum();
            }
        }
        m
    };
    if d == 2 {
        rot(0, 1, angles[0])
    } else {
        mul(&mul(&rot(0, 1, angles[0]), &rot(1, 2, angles[1])), &rot(0, 2, angles[2]))
    }
}

fn spec_for(pop: &Population, h: HFunction, scheme: Scheme, delta: f64, seed: u64) -> ModelSpec {
    let mut s = ModelSpec::maxwellian(pop.d, pop.len(), delta, delta, seed);
    s.h = h;
    s.scheme = scheme;
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn coefficient_parities(z in prop::collection::vec(-5.0f64..5.0, 2..=3), h in h_kind()) {
        let neg: Vec<f64> = z.iter().map(|v| -v).collect();
        prop_assert_eq!(eval_a(&z, &h).unwrap(), eval_a(&neg, &h).unwrap());
        prop_assert_eq!(eval_b(&z, &h).unwrap(), -eval_b(&neg, &h).unwrap());
        prop_assert_eq!(eval_sigma(&z, &h).unwrap(), -eval_sigma(&neg, &h).unwrap());
        let a = eval_a(&z, &h).unwrap();
        let r2: f64 = z.iter().map(|v| v * v).sum();
        let az = &a * nalgebra::DVector::from_column_slice(&z);
        prop_assert!(az.amax() <= 1e-13 * h.upper() * r2.powf(1.5).max(1.0));
        let eig = a.symmetric_eigen().eigenvalues;
        prop_assert!(eig.min() >= -1e-12 * (1.0 + r2));
    }

    #[test]
    fn exchangeable_under_relabelling(
        pts in points(2, 3..12),
        seed in any::<u64>(),
        shift in 1usize..11,
        h in h_kind(),
    ) {
        let n = pts.len();
        let perm: Vec<usize> = (0..n).map(|k| (k * 7 + shift) % n).collect();
        prop_assume!({ let mut p = perm.clone(); p.sort(); p.dedup(); p.len() == n });
        let mut pop = Population::from_points(&pts, seed).unwrap();
        let mut permuted = pop.clone();
        for (new, &old) in perm.iter().enumerate() {
            permuted.positions[new * 2..new * 2 + 2].copy_from_slice(pop.particle(old));
            permuted.ids[new] = pop.ids[old];
        }
        let spec = spec_for(&pop, h, Scheme::PairwiseSharedNoise, 0.01, seed);
        for _ in 0..5 {
            pop = step(&pop, &spec, StepControls::default()).unwrap().0;
            permuted = step(&permuted, &spec, StepControls::default()).unwrap().0;
        }
        for (new, &old) in perm.iter().enumerate() {
            for k in 0..2 {
                let (a, b) = (permuted.particle(new)[k], pop.particle(old)[k]);
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{} vs {}", a, b);
            }
        }
    }

    #[test]
    fn noiseless_step_moves_by_the_mean_drift(
        pts in points(3, 2..10),
        h in h_kind(),
        meanfield in any::<bool>(),
    ) {
        let pop = Population::from_points(&pts, 1).unwrap();
        let scheme = if meanfield { Scheme::MeanfieldGaussian } else { Scheme::PairwiseSharedNoise };
        let spec = spec_for(&pop, h, scheme, 0.02, 1);
        let (_, inc) = step(&pop, &spec, StepControls { drift: true, noise: false }).unwrap();
        prop_assert!(inc.noise.iter().all(|v| *v == 0.0));
        for i in 0..pop.len() {
            let b = particle_coefficients(&pop, i, &h).b_mean;
            for k in 0..3 {
                let want = 0.02 * b[k];
                prop_assert!((inc.drift[i * 3 + k] - want).abs() <= 1e-13 * (1.0 + want.abs()));
            }
        }
    }

    #[test]
    fn step_decomposition_sums_to_the_increment(seed in any::<u64>(), h in h_kind()) {
        let mut spec = ModelSpec::maxwellian(2, 12, 0.05, 0.05, seed);
        spec.h = h;
        let pop = init_population(&spec, None).unwrap();
        let dec = decompose_step(&pop, &spec, 20).unwrap();
        let gamma = dec.gamma();
        for k in 0..dec.increment.len() {
            let sum = dec.j[k] + gamma[k];
            prop_assert!((sum - dec.increment[k]).abs() <= 1e-14 * (1.0 + dec.increment[k].abs()));
        }
    }

    #[test]
    fn conserved_weak_forms_vanish(pts in points(3, 2..30), h in h_kind()) {
        let pop = Population::from_points(&pts, 0).unwrap();
        for phi in [
            TestFunction::Energy,
            TestFunction::Coordinate { index: 0 },
            TestFunction::Coordinate { index: 2 },
        ] {
            let w = weakform_rhs(&pop, &phi, &h).unwrap();
            prop_assert!(w.value.abs() <= 1e-12 * w.scale.max(1e-300), "{:?} {:?}", phi, w);
        }
    }

    #[test]
    fn weak_form_is_rotation_equivariant(
        pts in points(3, 2..20),
        angles in prop::collection::vec(0.0f64..6.3, 3),
        h in h_kind(),
        coef in -2.0f64..2.0,
    ) {
        let q = rotation(3, &angles);
        let pop = Population::from_points(&pts, 0).unwrap();
        let mut rotated = pop.clone();
        for i in 0..pop.len() {
            let v = pop.particle(i);
            for r in 0..3 {
                rotated.positions[i * 3 + r] = (0..3).map(|c| q[r * 3 + c] * v[c]).sum();
            }
        }
        let phi = TestFunction::Polynomial {
            terms: vec![
                Monomial { coef, powers: vec![2, 1, 0] },
                Monomial { coef: 1.0, powers: vec![0, 1, 1] },
                Monomial { coef: 0.5, powers: vec![4, 0, 0] },
            ],
        };
        let lhs = weakform_rhs(&rotated, &phi, &h).unwrap();
        let composed = TestFunction::Transformed { inner: Box::new(phi), q };
        let rhs = weakform_rhs(&pop, &composed, &h).unwrap();
        prop_assert!((lhs.value - rhs.value).abs() <= 1e-12 * (1.0 + lhs.scale), "{:?} {:?}", lhs, rhs);
    }

    #[test]
    fn kde_values_are_bounded_means(
        a in points(2, 1..40),
        b in points(2, 1..40),
        grid in points(2, 1..10),
        eta in 0.05f64..2.0,
        cosine in any::<bool>(),
    ) {
        let kind = if cosine { MollifierKind::ProductCosine } else { MollifierKind::Bump };
        let m = make_mollifier(kind, 2, eta).unwrap();
        let fa = estimate_density(&a, &grid, &m).unwrap();
        let fb = estimate_density(&b, &grid, &m).unwrap();
        let union: Vec<Vec<f64>> = a.iter().chain(&b).cloned().collect();
        let fu = estimate_density(&union, &grid, &m).unwrap();
        let (na, nb) = (a.len() as f64, b.len() as f64);
        for g in 0..grid.len() {
            prop_assert!(fu.values[g] >= 0.0 && fu.values[g] <= m.peak() * (1.0 + 1e-12));
            let mix = (na * fa.values[g] + nb * fb.values[g]) / (na + nb);
            prop_assert!((fu.values[g] - mix).abs() <= 1e-12 * m.peak());
        }
    }

    #[test]
    fn atom_value_decreases_with_bandwidth(
        x in prop::collection::vec(-3.0f64..3.0, 2),
        e1 in 0.01f64..3.0,
        e2 in 0.01f64..3.0,
        cosine in any::<bool>(),
    ) {
        let kind = if cosine { MollifierKind::ProductCosine } else { MollifierKind::Bump };
        let (lo, hi) = if e1 < e2 { (e1, e2) } else { (e2, e1) };
        let at = |eta| {
            let m = make_mollifier(kind, 2, eta).unwrap();
            estimate_density(&[x.clone()], &[x.clone()], &m).unwrap().values[0]
        };
        prop_assert!(at(hi) <= at(lo));
    }

    #[test]
    fn tail_bound_is_monotone(
        r1 in 0.0f64..20.0,
        r2 in 0.0f64..20.0,
        t in 0.01f64..3.0,
        c1 in 0.0f64..2.0,
        c2 in 0.01f64..5.0,
        x0 in prop::collection::vec(-2.0f64..2.0, 2),
    ) {
        let (lo, hi) = if r1 < r2 { (r1, r2) } else { (r2, r1) };
        let (a, b) = (tail_bound(t, lo, &x0, c1, c2), tail_bound(t, hi, &x0, c1, c2));
        prop_assert!(b <= a);
        prop_assert!((0.0..=1.0).contains(&b));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn moderate_runs_stay_finite(
        seed in any::<u64>(),
        h in h_kind(),
        d in 2usize..=3,
        spread in 0.5f64..5.0,
        meanfield in any::<bool>(),
    ) {
        let mut spec = ModelSpec::maxwellian(d, 30, 1e-2, 2.0, seed);
        spec.h = h;
        spec.scheme = if meanfield { Scheme::MeanfieldGaussian } else { Scheme::PairwiseSharedNoise };
        let mut pop = init_population(&spec, None).unwrap();
        for v in pop.positions.iter_mut() {
            *v = (*v * spread).clamp(-10.0 / (d as f64).sqrt(), 10.0 / (d as f64).sqrt());
        }
        for _ in 0..spec.n_steps() {
            pop = step(&pop, &spec, StepControls::default()).unwrap().0;
        }
        prop_assert!(pop.positions.iter().all(|v| v.is_finite()));
    }
}
