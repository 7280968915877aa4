mod common;

use cdw::ample::{check_unit_system, orbit_equiv_clopen, verify_witness, DyadicPerm, GammaX, GroupElement, Intersection, MatchPolicy, StageSequence, UnitSystem};
use cdw::gw::{count_profile, count_profile_kr, equal_measure_exchange, subequivalence};
use cdw::kr::first_return_partition;
use cdw::moves::Elem;
use cdw::measure::{compare_measures, Comparison, ErgodicList};
use cdw::Error;
use common::*;
use proptest::prelude::*;

fn gx() -> GammaX {
    GammaX::new(odo(), p("(0)")).unwrap()
}

fn m() -> ErgodicList {
    ErgodicList::product(&dyadic())
}

fn factorial(n: usize) -> usize {
    (1..=n).product()
}

#[test]
fn gamma_x_stage_groups() {
    let s = gx();
    let st = s.stage(1).unwrap();
    assert_eq!(st.atoms, vec![c("[0]"), c("[1]")]);
    for n in 1..=3 {
        let st = s.stage(n).unwrap();
        assert_eq!(st.orbits.len(), 1);
        assert_eq!(st.closure_order(50_000), Some(factorial(1 << n)), "stage {n}");
        assert!(check_unit_system(&st).passed());
        assert!(st.generators.iter().all(|g| g.label != "id" || g.moves.is_empty()));
    }
}

#[test]
fn dyadic_perm_stage_groups() {
    let d = DyadicPerm::default();
    assert_eq!(d.stage(1).unwrap().closure_order(100), Some(2));
    assert_eq!(d.stage(2).unwrap().closure_order(100), Some(24));
    for n in 1..=4 {
        assert!(d.stage(n - 1).unwrap().is_refined_by(&d.stage(n).unwrap()));
    }
}

#[test]
fn intersection_is_finer_than_measure() {
    let s = Intersection::new(odo(), p("(0)"), p("(01)")).unwrap();
    for n in 0..=3 {
        let st = s.stage(n).unwrap();
        assert!(check_unit_system(&st).passed());
        if n > 0 {
            assert!(s.stage(n - 1).unwrap().is_refined_by(&st));
        }
        // Offsets stay inside columns.
        for g in &st.generators {
            assert!(g.moves.iter().all(|&(a, b)| st.orbit_of(a) == st.orbit_of(b)));
        }
    }
    // [01] and [10] have equal measure but are never equivalent.
    assert_eq!(compare_measures(&c("[01]"), &c("[10]"), &m()), Comparison::AllEq);
    assert!(matches!(orbit_equiv_clopen(&s, &c("[01]"), &c("[10]"), 6), Err(Error::HorizonExceeded(_))));
}

#[test]
fn orbit_equivalence_witnesses() {
    let s = gx();
    let g = orbit_equiv_clopen(&s, &c("[00]"), &c("[10]"), 8).unwrap();
    assert_eq!(g.stage, 2);
    assert!(verify_witness(&s, &g, &c("[00]"), &c("[10]")).unwrap());
    let id = orbit_equiv_clopen(&s, &c("[01]"), &c("[01]"), 8).unwrap();
    assert!(id.is_identity());
}

#[test]
fn element_extension() {
    let s = gx();
    let (s1, s2) = (s.stage(1).unwrap(), s.stage(2).unwrap());
    let id = s1.extend_element(&GroupElement::identity(1, 2), &s2, MatchPolicy::default()).unwrap();
    assert!(id.is_identity());
    let swap = GroupElement { stage: 1, mapping: vec![1, 0] };
    let ext = s1.extend_element(&swap, &s2, MatchPolicy::default()).unwrap();
    for (from, to) in [("[00]", "[10]"), ("[01]", "[11]")] {
        assert_eq!(s2.apply_mapping(&ext.mapping, &c(from)), Some(c(to)));
    }
    // [0] holds three atoms of one fine orbit, [1] only one.
    let atoms = vec![c("[00]"), c("[01]"), c("[10]"), c("[11]")];
    let charts = vec![Elem::identity(), Elem::prefix(vec![0, 0], vec![0, 1]), Elem::prefix(vec![0, 0], vec![1, 0]), Elem::identity()];
    let fine = UnitSystem::new(dyadic(), atoms, vec![vec![0, 1, 2], vec![3]], charts, "seeded");
    assert!(matches!(s1.extend_element(&swap, &fine, MatchPolicy::default()), Err(Error::NoMatching(_))));
}

#[test]
fn seeded_unit_systems_fail() {
    let st = gx().stage(1).unwrap();
    let dup = UnitSystem::new(dyadic(), vec![c("[0]"), c("[0]")], vec![vec![0, 1]], st.charts.clone(), "dup");
    assert!(check_unit_system(&dup).failures().any(|f| f.name == "atoms partition X"));
    let mut gens = st.generators.clone();
    gens.push(cdw::ample::Generator { label: "one".into(), moves: vec![] });
    gens.push(cdw::ample::Generator { label: "other".into(), moves: vec![] });
    let unfaithful = UnitSystem::with_generators(dyadic(), st.atoms.clone(), st.orbits.clone(), st.charts.clone(), gens, "two identities");
    assert!(check_unit_system(&unfaithful).failures().any(|f| f.name == "faithful"));
}

#[test]
fn counting_and_subequivalence() {
    let t = first_return_partition(&odo(), &c("[00]"), None).unwrap();
    assert_eq!(count_profile_kr(&t, &c("[0]")).unwrap(), vec![2]);
    assert_eq!(count_profile_kr(&t, &c("[e]")).unwrap(), vec![4]);
    assert_eq!(count_profile_kr(&t, &c("[]")).unwrap(), vec![0]);
    let st = gx().stage(2).unwrap();
    assert_eq!(count_profile(&st, &c("[0]")).unwrap(), vec![2]);

    let s = gx();
    let g = subequivalence(&s, &m(), &c("[00]"), &c("[1]"), 8).unwrap();
    assert_eq!(g.stage, 2);
    assert!(s.stage(2).unwrap().apply_mapping(&g.mapping, &c("[00]")).unwrap().is_subset(&c("[1]")));
    assert!(subequivalence(&s, &m(), &c("[]"), &c("[1]"), 8).unwrap().is_identity());
    let inter = Intersection::new(odo(), p("(0)"), p("(01)")).unwrap();
    assert!(matches!(subequivalence(&inter, &m(), &c("[01]"), &c("[10]"), 8), Err(Error::HypothesisViolated(_))));
}

#[test]
fn exchange_examples() {
    let s = gx();
    let ex = equal_measure_exchange(&s, &m(), &c("[0]"), &c("[1]"), &p("(0)"), &p("1(0)"), 3, 12).unwrap();
    assert!(ex.rest_a.mass() <= c("[000]").mass());
    assert!(ex.rest_b.mass() <= c("[000]").mass());
    for st in &ex.steps {
        assert!(verify_witness(&s, &st.element, &st.u, &st.v).unwrap());
    }
    let one = equal_measure_exchange(&s, &m(), &c("[0]"), &c("[1]"), &p("(0)"), &p("1(0)"), 1, 12).unwrap();
    assert!(one.steps.len() <= 1);
    assert!(equal_measure_exchange(&s, &m(), &c("[0]"), &c("[0]"), &p("(0)"), &p("(0)"), 2, 12).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Soundness: a witness always maps A into B, and exists at the stage
    /// where every column count of A is below that of B.
    #[test]
    fn subequivalence_is_sound(x in 0u32..256, y in 0u32..256) {
        let (a, b) = (from_mask(3, x), from_mask(3, y));
        prop_assume!(compare_measures(&a, &b, &m()) == Comparison::AllLt);
        let s = gx();
        let g = subequivalence(&s, &m(), &a, &b, 10).unwrap();
        let img = s.stage(g.stage).unwrap().apply_mapping(&g.mapping, &a).unwrap();
        prop_assert!(img.is_subset(&b));
        prop_assert_eq!(img.mass(), a.mass());
    }

    /// Closure agreement on gamma_x: equal measure iff stage-equivalent.
    #[test]
    fn gamma_x_orbits_are_measure_classes(x in 0u32..256, y in 0u32..256) {
        let (a, b) = (from_mask(3, x), from_mask(3, y));
        let eq = compare_measures(&a, &b, &m()) == Comparison::AllEq;
        let s = gx();
        prop_assert_eq!(orbit_equiv_clopen(&s, &a, &b, 6).is_ok(), eq);
    }
}
