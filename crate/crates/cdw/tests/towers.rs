mod common;

use cdw::dynamics::{same_orbit_within, Direction};
use cdw::kr::{first_return_partition, make_compatible, shrink_base, verify_kr, KRPartition};
use common::*;
use proptest::prelude::*;

/// Addition-order column over `[0^n]`: start at `0^n` and add one until the
/// word returns.
fn addition_column(n: usize) -> Vec<String> {
    let mut w = vec![0u8; n];
    let mut out = Vec::new();
    loop {
        out.push(format!("[{}]", text(&w)));
        w = add_one(&w);
        if w.iter().all(|&x| x == 0) {
            return out;
        }
    }
}

#[test]
fn odometer_on_clopens_and_points() {
    let phi = odo();
    assert_eq!(phi.apply_clopen(&c("[0]"), Direction::Forward), c("[1]"));
    assert_eq!(phi.apply_clopen(&c("[11]"), Direction::Forward), c("[00]"));
    assert_eq!(phi.apply_point(&p("(1)"), Direction::Forward), p("(0)"));
    assert_eq!(phi.apply_point(&p("(0)"), Direction::Forward), p("1(0)"));
    assert_eq!(phi.apply_point(&p("(0)"), Direction::Backward), p("(1)"));
    let a = c("[010,11]");
    assert_eq!(phi.apply_clopen(&phi.apply_clopen(&a, Direction::Forward), Direction::Backward), a);
}

#[test]
fn orbit_search() {
    let phi = odo();
    assert_eq!(same_orbit_within(&*phi, &p("(0)"), &p("1(0)"), 5), Some(1));
    assert_eq!(same_orbit_within(&*phi, &p("(01)"), &p("(01)"), 0), Some(0));
    assert_eq!(same_orbit_within(&*phi, &p("(0)"), &p("(01)"), 100), None);
}

#[test]
fn towers_over_dyadic_cylinders() {
    for n in 0..=6 {
        let base = c(&format!("[{}]", text(&vec![0; n])));
        let t = first_return_partition(&odo(), &base, None).unwrap();
        assert_eq!(t.columns.len(), 1);
        let got: Vec<String> = t.columns[0].iter().map(|a| a.to_string()).collect();
        assert_eq!(got, addition_column(n), "n = {n}");
        assert!(verify_kr(&t).passed());
    }
}

#[test]
fn compatible_and_shrunk_towers() {
    let t0 = first_return_partition(&odo(), &c("[0]"), None).unwrap();
    let t = make_compatible(&t0, &c("[01]"));
    assert!(t.atoms().any(|a| *a == c("[01]")));
    assert!(verify_kr(&t).passed());
    assert_eq!(make_compatible(&t0, &c("[1]")).columns, t0.columns);
    assert_eq!(make_compatible(&t0, &c("[e]")).columns, t0.columns);

    let s = shrink_base(&t0, &c("[00]")).unwrap();
    assert_eq!(s.columns, first_return_partition(&odo(), &c("[00]"), None).unwrap().columns);
    assert_eq!(shrink_base(&t0, &c("[0]")).unwrap().columns, t0.columns);
    let t00 = first_return_partition(&odo(), &c("[00]"), None).unwrap();
    assert_eq!(shrink_base(&t00, &c("[000]")).unwrap().heights(), vec![8]);
}

#[test]
fn seeded_broken_towers_fail() {
    let swapped = KRPartition::from_columns(odo(), vec![vec![c("[00]"), c("[01]"), c("[10]"), c("[11]")]]);
    let r = verify_kr(&swapped);
    assert!(r.failures().any(|f| f.name.contains("U_i,j+1")));

    let mut t = first_return_partition(&odo(), &c("[0]"), None).unwrap();
    t.base = c("[1]");
    assert!(!verify_kr(&t).passed());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Every first-return partition verifies, its atoms tile X, and each
    /// column climbs by the addition oracle.
    #[test]
    fn first_return_partitions_verify(mask in 1u32..256) {
        let base = from_mask(3, mask);
        let t = first_return_partition(&odo(), &base, None).unwrap();
        prop_assert!(verify_kr(&t).passed());
        let total: usize = t.atoms().map(|a| expand(a, 6).len()).sum();
        prop_assert_eq!(total, 64);
        for col in &t.columns {
            for pair in col.windows(2) {
                let up: Vec<Vec<u8>> = expand(&pair[0], 6).iter().map(|w| add_one(w)).collect();
                let mut up = up;
                up.sort();
                prop_assert_eq!(up, expand(&pair[1], 6));
            }
        }
    }

    #[test]
    fn compatibility_keeps_verification(base in 1u32..16, u in 0u32..256) {
        let t = first_return_partition(&odo(), &from_mask(2, base), None).unwrap();
        let u = from_mask(3, u);
        let t2 = make_compatible(&t, &u);
        prop_assert!(verify_kr(&t2).passed());
        prop_assert!(t2.is_compatible(&u));
        prop_assert_eq!(t2.base.clone(), t.base.clone());
    }
}
