use std::sync::{Arc, OnceLock};

use nalgebra::DMatrix;
use num_complex::Complex64;
use proptest::prelude::*;

use fractafold::graph::{build, FractalGraph, FractalKind};
use fractafold::products::{apply2, product_basis, ProductBasis};
use fractafold::psido::compose_check;
use fractafold::sobolev::{bessel_lift, hs_norm, lp_norm};
use fractafold::spectral::{eigensolve, eigensolve_cached, multiset_diff, BoundaryCondition, EigenBasis};
use fractafold::symbol::{bessel, imaginary_power, riesz_i};
use fractafold::wavefront::{cone_decay_exponent, ConeClass, CoeffField};

fn dirichlet() -> &'static EigenBasis {
    static B: OnceLock<EigenBasis> = OnceLock::new();
    B.get_or_init(|| eigensolve(&build(FractalKind::Gasket, 3).unwrap(), BoundaryCondition::Dirichlet).unwrap())
}

fn product() -> &'static ProductBasis {
    static P: OnceLock<ProductBasis> = OnceLock::new();
    P.get_or_init(|| {
        let b = Arc::new(eigensolve(&build(FractalKind::Gasket, 2).unwrap(), BoundaryCondition::Neumann).unwrap());
        product_basis(b.clone(), b).unwrap()
    })
}

fn field(b: &EigenBasis, c: &[f64]) -> Vec<f64> {
    let mut full = vec![0.0; b.len()];
    for (x, y) in full.iter_mut().zip(c) {
        *x = *y;
    }
    b.synthesize(&full)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn composition_is_multiplication(s in -1.5f64..1.5, t in -2.0f64..2.0, tau in -5.0f64..5.0,
                                     c in prop::collection::vec(-1.0f64..1.0, 12)) {
        let b = dirichlet();
        let p1 = bessel(Complex64::new(s, t), b.d);
        let p2 = imaginary_power(tau);
        prop_assert!(compose_check(&p1, &p2, b, &field(b, &c)).unwrap() <= 1e-12);
    }

    #[test]
    fn hs_norm_is_l2_norm_of_lift(s in -2.0f64..2.0, c in prop::collection::vec(-1.0f64..1.0, 12)) {
        let b = dirichlet();
        let u = field(b, &c);
        let direct = lp_norm(&bessel_lift(&u, s, b), 2.0, b.mass());
        prop_assert!((hs_norm(&u, s, b) - direct).abs() <= 1e-12 * direct.max(1e-300));
    }

    #[test]
    fn riesz_pair_sums_to_identity(c in prop::collection::vec(-1.0f64..1.0, 1..40)) {
        let pb = product();
        let (n1, n2) = (pb.l1.len(), pb.l2.len());
        let coeff = DMatrix::from_fn(n1, n2, |i, j| c[(i * n2 + j) % c.len()] * (1.0 + (i + j) as f64).recip());
        let u = pb.synthesize(&coeff);
        let s = apply2(&riesz_i(1), pb, &u).unwrap().re + apply2(&riesz_i(2), pb, &u).unwrap().re;
        prop_assert!((&s - &u).amax() <= 1e-12 * u.amax().max(1e-300));
    }

    #[test]
    fn cone_verdicts_ignore_scaling(k in 2.0f64..12.0, scale in prop_oneof![-1e3f64..-1e-3, 1e-3f64..1e3]) {
        let lattice: Vec<f64> = (0..40).map(|j| if j == 0 { 0.0 } else { 3.0 * 1.2f64.powi(j) }).collect();
        let f = CoeffField::from_fn(lattice.clone(), lattice.clone(), |a, b| (1.0 + a + b).powf(-k / 3.0));
        let g = CoeffField::from_fn(lattice.clone(), lattice, |a, b| scale * (1.0 + a + b).powf(-k / 3.0));
        for class in [ConeClass::XAxis, ConeClass::Interior, ConeClass::YAxis] {
            let (r, q) = (cone_decay_exponent(&f, &class.cone(), 2, 2.0).unwrap(), cone_decay_exponent(&g, &class.cone(), 2, 2.0).unwrap());
            prop_assert_eq!(r.verdict, q.verdict);
            prop_assert!((r.slope.unwrap() - q.slope.unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn graph_json_round_trips(level in 0usize..4) {
        let g = build(FractalKind::Gasket, level).unwrap();
        let back = FractalGraph::from_json(&g.to_json()).unwrap();
        prop_assert_eq!(back.hash(), g.hash());
        prop_assert_eq!(back.to_json_string(), g.to_json_string());
    }

    #[test]
    fn multiset_diff_is_symmetric(mut v in prop::collection::vec(0.0f64..10.0, 1..20), e in 0.0f64..1e-11) {
        v.sort_by(f64::total_cmp);
        let w: Vec<f64> = v.iter().map(|x| x + e).collect();
        prop_assert!(multiset_diff(&v, &w, 1e-10).is_ok());
        prop_assert!(multiset_diff(&w, &v, 1e-10).is_ok());
        let mut longer = w.clone();
        longer.push(1.0);
        prop_assert!(multiset_diff(&v, &longer, 1e-10).is_err());
    }
}

#[test]
fn cache_hits_are_bit_identical() {
    let dir = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("prop-cache");
    let _ = std::fs::remove_dir_all(&dir);
    for (kind, level, bc) in [(FractalKind::Gasket, 3, BoundaryCondition::Neumann), (FractalKind::Circle, 12, BoundaryCondition::None)] {
        let g = build(kind, level).unwrap();
        let fresh = eigensolve(&g, bc).unwrap();
        let miss = eigensolve_cached(&g, bc, Some(&dir)).unwrap();
        let hit = eigensolve_cached(&g, bc, Some(&dir)).unwrap();
        assert_eq!(fresh.encode(), miss.encode());
        assert_eq!(fresh.encode(), hit.encode());
        assert_eq!(fresh.hash(), hit.hash());
    }
}
