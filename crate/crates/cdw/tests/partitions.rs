mod common;

use std::sync::Arc;

use cdw::ample::{DyadicPerm, GammaX, Intersection, StageSequence};
use cdw::balance::{almost_equivalent_refine, common_refinement, measure_equivalent_pairs, ordered_sequence_to_system, verify_almost_equivalence, verify_ordered, GammaPartition};
use cdw::cancel::Horizon;
use cdw::dynamics::{Direction, SystemHandle};
use cdw::gw::element_on;
use cdw::kr::verify_kr;
use cdw::measure::ErgodicList;
use cdw::Error;
use common::*;
use proptest::prelude::*;

fn m() -> ErgodicList {
    ErgodicList::product(&dyadic())
}

fn inter() -> Intersection {
    Intersection::new(odo(), p("(0)"), p("(01)")).unwrap()
}

#[test]
fn orbit_counts() {
    let s = GammaX::new(odo(), p("(0)")).unwrap();
    let q = GammaPartition::from_stage(&s.stage(2).unwrap());
    let id = q.ids()[0];
    assert_eq!(q.orbit_count(id, &c("[0]")).unwrap(), 2);
    assert_eq!(q.orbit_count(id, &c("[e]")).unwrap(), q.orbit(id).len());
    assert_eq!(q.orbit_count(id, &c("[]")).unwrap(), 0);
    assert!(q.orbit_count(id, &c("[000]")).is_err());
}

#[test]
fn refinements() {
    let s = GammaX::new(odo(), p("(0)")).unwrap();
    let h = Horizon::new(10);
    let p1 = GammaPartition::from_stage(&s.stage(1).unwrap());
    let t = GammaPartition::trivial(&dyadic());
    assert!(common_refinement(&p1, &p1, &s, &h).unwrap().refines(&p1));
    assert!(common_refinement(&t, &p1, &s, &h).unwrap().refines(&p1));
    // Two depth-one partitions: the stage itself, and its halves cut apart.
    let mut p2 = p1.clone();
    let id = p2.ids()[0];
    p2.cut_orbit(id, &[vec![c("[00]"), c("[01]")], vec![c("[10]"), c("[11]")]]).unwrap();
    let r = common_refinement(&p1, &p2, &s, &h).unwrap();
    assert!(r.refines(&p1) && r.refines(&p2));
    assert!(r.refinement_report(&p2).passed());
}

#[test]
fn cut_and_join() {
    let s = GammaX::new(odo(), p("(0)")).unwrap();
    let st = s.stage(1).unwrap();
    let mut q = GammaPartition::from_stage(&st);
    let id = q.ids()[0];
    let ids = q.cut_orbit(id, &[vec![c("[00]"), c("[01]")], vec![c("[10]"), c("[11]")]]).unwrap();
    let (a, b) = (ids[0].unwrap(), ids[1].unwrap());
    assert!(q.verify().passed());
    let before = q.orbit_count(a, &c("[0]")).unwrap() + q.orbit_count(b, &c("[0]")).unwrap();
    let w = element_on(&s.stage(2).unwrap(), &cdw::ample::orbit_equiv_clopen(&s, &c("[00]"), &c("[01]"), 4).unwrap().mapping, &c("[00]")).unwrap();
    let j = q.join_orbits(a, b, Some(&w)).unwrap();
    assert!(q.verify().passed());
    assert_eq!(q.orbit_count(j, &c("[0]")).unwrap(), before);
    let mut q2 = GammaPartition::from_stage(&st);
    let id = q2.ids()[0];
    let ids = q2.cut_orbit(id, &[vec![c("[00]"), c("[01]")], vec![c("[10]"), c("[11]")]]).unwrap();
    assert!(matches!(q2.join_orbits(ids[0].unwrap(), ids[1].unwrap(), None), Err(Error::NoWitness(_))));
}

#[test]
fn almost_equivalence_examples() {
    let h = Horizon::new(16);
    let s = GammaX::new(odo(), p("(0)")).unwrap();
    let t = GammaPartition::trivial(&dyadic());
    let (us, vs) = (vec![c("[00]")], vec![c("[10]")]);
    let (q, e) = almost_equivalent_refine(&t, &us, &vs, &s, &m(), &h).unwrap();
    assert!(e.is_empty());
    assert!(verify_almost_equivalence(&t, &q, &e, &us, &vs, &m()).passed());

    let same = vec![c("[01]")];
    let (q, e) = almost_equivalent_refine(&t, &same, &same, &s, &m(), &h).unwrap();
    assert!(e.is_empty() && q.refines(&t));

    let i = inter();
    let (us, vs) = (vec![c("[01]")], vec![c("[10]")]);
    let (q, e) = almost_equivalent_refine(&t, &us, &vs, &i, &m(), &h).unwrap();
    assert_eq!(e.len(), 1);
    let r = verify_almost_equivalence(&t, &q, &e, &us, &vs, &m());
    assert!(r.passed(), "{:?}", r.failures().collect::<Vec<_>>());
}

#[test]
fn all_depth_two_pairs_balance() {
    let i = inter();
    let pairs = measure_equivalent_pairs(&dyadic(), &m(), 2);
    assert_eq!(pairs.len(), 27);
    let (us, vs): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    let t = GammaPartition::trivial(&dyadic());
    let (q, e) = almost_equivalent_refine(&t, &us, &vs, &i, &m(), &Horizon::new(16)).unwrap();
    assert!(e.len() <= us.len());
    assert!(verify_almost_equivalence(&t, &q, &e, &us, &vs, &m()).passed());
}

#[test]
fn ordered_dyadic_perm_is_an_odometer() {
    let (sys, x) = ordered_sequence_to_system(Arc::new(DyadicPerm::default()), 6, &Horizon::new(10)).unwrap();
    for d in 1..=6usize {
        let start = c(&format!("[{}]", text(&vec![0; d])));
        let mut cur = start.clone();
        let mut seen = vec![cur.clone()];
        for _ in 1..(1 << d) {
            cur = sys.apply_clopen(&cur, Direction::Forward);
            assert_eq!(cur.depth(), d);
            seen.push(cur.clone());
        }
        assert_eq!(sys.apply_clopen(&cur, Direction::Forward), start, "depth {d}");
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 1 << d);
        assert!(start.contains_point(&x));
    }
    for n in 1..=4 {
        let (a, b) = (sys.level(n - 1).unwrap(), sys.level(n).unwrap());
        assert!(verify_ordered(&a, &b).passed());
        let t = b.to_kr(sys.clone());
        assert!(verify_kr(&t).passed());
        assert_eq!(sys.apply_clopen(&t.top, Direction::Forward), t.base);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Any single equal-measure pair on the intersection sequence balances.
    #[test]
    fn single_pairs_balance(k in 0usize..81) {
        let pairs = measure_equivalent_pairs(&dyadic(), &m(), 2);
        let (u, v) = pairs[k % pairs.len()].clone();
        let t = GammaPartition::trivial(&dyadic());
        let (q, e) = almost_equivalent_refine(&t, std::slice::from_ref(&u), std::slice::from_ref(&v), &inter(), &m(), &Horizon::new(16)).unwrap();
        prop_assert!(e.len() <= 1);
        prop_assert!(verify_almost_equivalence(&t, &q, &e, &[u], &[v], &m()).passed());
    }
}
