use emsa::certificates::is_localized;
use emsa::disorder::{decompose_check, sample_potential, DisorderSpec};
use emsa::exponents::{derive, validate, ExponentOverrides, RowKind};
use emsa::lattice::{cover_disjoint, interior, suitable_cover, BoxSpec, Region};
use emsa::msa::max_disjoint_bad;
use emsa::spectral::{spectral_separation, EnergyInterval};
use proptest::prelude::*;

fn chain(n: usize) -> Region {
    Region::new(1, (0..n as i64).map(|x| vec![x]).collect()).unwrap()
}

proptest! {
    #[test]
    fn required_rows_imply_the_rest(xi in 0.01f64..0.5, gap in 0.01f64..0.5, dg in 0.0f64..1.0) {
        let zeta = xi + gap;
        prop_assume!(zeta < 1.0);
        let base = derive(xi, zeta, &ExponentOverrides::default());
        if let Ok(base) = base {
            // perturb γ inside its admissible window and recheck
            let hi = (zeta / xi).sqrt().min(1.0 / zeta);
            let gamma = 1.0 + dg * (hi - 1.0);
            let e = base.with_field("gamma", gamma).unwrap();
            let rep = validate(&e);
            if rep.pass {
                prop_assert!(rep.rows.iter().filter(|r| r.kind == RowKind::Implied).all(|r| r.pass));
            }
            prop_assert!(validate(&base).pass);
        }
    }

    #[test]
    fn h_is_a_bump(e in -5.0f64..5.0, a in 0.01f64..5.0, t in -12.0f64..12.0) {
        let i = EnergyInterval::new(e, a).unwrap();
        let h = i.h(t);
        prop_assert!((0.0..=1.0).contains(&h));
        prop_assert_eq!(h > 0.0, i.contains(t));
        prop_assert!((h - i.h(2.0 * e - t)).abs() < 1e-9);
        prop_assert!(i.h(e) == 1.0);
    }

    #[test]
    fn shrink_and_expand_bracket(a in 0.01f64..10.0, l in 1.5f64..1e4, kappa in 0.01f64..0.99) {
        let i = EnergyInterval::new(0.0, a).unwrap();
        let (s, x) = (i.shrink(l, kappa), i.expand(l, kappa));
        prop_assert!(s.radius < a && a < x.radius);
        prop_assert!((x.shrink(l, kappa).radius - a).abs() <= 4.0 * f64::EPSILON * a);
        // h_I stays above L^{-κ} on I_L
        prop_assert!(i.h(s.radius * (1.0 - 1e-12)) >= l.powf(-kappa) - 1e-12);
    }

    #[test]
    fn decomposition_is_exact(n in 1usize..40, mask in any::<u64>(), seed in any::<u64>()) {
        let theta = chain(n);
        let phi = Region::new(1, (0..n as i64).filter(|x| mask >> (x % 64) & 1 == 1).map(|x| vec![x]).collect()).unwrap();
        let v = sample_potential(&theta, &DisorderSpec::centered_uniform(3.0).unwrap(), seed, 0).unwrap();
        prop_assert_eq!(decompose_check(&theta, &phi, &v).unwrap(), 0.0);
    }

    #[test]
    fn sampling_is_site_keyed(seed in any::<u64>(), index in 0u64..1000, lo in -20i64..0, len in 1i64..20) {
        let d = DisorderSpec::uniform(0.0, 1.0).unwrap();
        let big = Region::new(1, (lo..lo + 40).map(|x| vec![x]).collect()).unwrap();
        let small = Region::new(1, (lo + 5..lo + 5 + len).map(|x| vec![x]).collect()).unwrap();
        let vb = sample_potential(&big, &d, seed, index).unwrap();
        let vs = sample_potential(&small, &d, seed, index).unwrap();
        for (k, y) in small.iter().enumerate() {
            prop_assert_eq!(vs.values[k], vb.values[big.index_of(y).unwrap()]);
        }
        prop_assert_eq!(sample_potential(&big, &d, seed, index).unwrap().values, vb.values);
    }

    #[test]
    fn localization_is_monotone_in_m(raw in proptest::collection::vec(-1.0f64..1.0, 30), x in 0i64..30, m1 in 0.0f64..2.0, m2 in 0.0f64..2.0) {
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assume!(norm > 1e-3);
        let phi: Vec<f64> = raw.iter().map(|v| v / norm).collect();
        let r = chain(30);
        let (lo, hi) = if m1 < m2 { (m1, m2) } else { (m2, m1) };
        let (ok_hi, margin_hi) = is_localized(&r, &phi, &[x], hi, 30.0, 0.6).unwrap();
        let (ok_lo, margin_lo) = is_localized(&r, &phi, &[x], lo, 30.0, 0.6).unwrap();
        prop_assert!(margin_lo >= margin_hi);
        prop_assert!(!ok_hi || ok_lo);
    }

    #[test]
    fn disjoint_bad_is_a_maximal_packing(mask in any::<u32>()) {
        let cover = suitable_cover(&BoxSpec::centered(1, 40.0).unwrap(), 6.0, 0.5).unwrap();
        let flags: Vec<bool> = (0..cover.len()).map(|a| mask >> (a % 32) & 1 == 1).collect();
        let got = max_disjoint_bad(&flags, &cover).unwrap();
        for (p, &a) in got.set.iter().enumerate() {
            prop_assert!(flags[a]);
            for &b in &got.set[p + 1..] {
                prop_assert!(cover_disjoint(&cover, a, b));
            }
        }
        for a in (0..cover.len()).filter(|&a| flags[a] && !got.set.contains(&a)) {
            prop_assert!(got.set.iter().any(|&b| !cover_disjoint(&cover, a, b)));
        }
    }

    #[test]
    fn interior_shrinks_with_t(side in 2.0f64..30.0, inner in 1.0f64..20.0, t in 1.0f64..10.0) {
        let theta = BoxSpec::centered(2, side).unwrap().sites();
        let phi = BoxSpec::centered(2, inner).unwrap().sites().intersection(&theta);
        let a = interior(&phi, &theta, t).unwrap();
        let b = interior(&phi, &theta, t + 1.0).unwrap();
        prop_assert!(a.is_subset_of(&phi));
        prop_assert!(b.is_subset_of(&a));
    }

    #[test]
    fn separation_matches_brute_force(mut a in proptest::collection::vec(-5.0f64..5.0, 0..12), mut b in proptest::collection::vec(-5.0f64..5.0, 0..12)) {
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        let brute = a.iter().flat_map(|x| b.iter().map(move |y| (x - y).abs())).fold(f64::INFINITY, f64::min);
        prop_assert_eq!(spectral_separation(&a, &b), brute);
    }
}
