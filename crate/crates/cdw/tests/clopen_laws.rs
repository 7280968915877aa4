mod common;

use cdw::clopen::{Bases, Clopen};
use cdw::Error;
use common::*;
use proptest::prelude::*;

#[test]
fn normalize_examples() {
    let b = dyadic();
    let n = |ws: &[&str]| Clopen::normalize(&b, ws.iter().map(|w| w.bytes().map(|x| x - b'0').collect())).unwrap();
    assert_eq!(n(&["00", "01"]), c("[0]"));
    assert!(n(&[]).is_empty());
    assert!(n(&["0", "10", "11"]).is_full());
    assert_eq!(c("[e]").to_string(), "[e]");
    assert_eq!(c("[]").to_string(), "[]");
}

#[test]
fn boolean_examples() {
    assert_eq!(c("[0]").complement(), c("[1]"));
    assert_eq!(c("[0]").intersection(&c("[01]")), c("[01]"));
    let a = c("[010,11]");
    assert_eq!(a.complement().complement(), a);
}

#[test]
fn refine_examples() {
    let s = |a: &Clopen, d| a.refine_to_depth(d).unwrap().iter().map(|w| text(w)).collect::<Vec<_>>();
    assert_eq!(s(&c("[0]"), 2), ["00", "01"]);
    assert_eq!(s(&c("[e]"), 1), ["0", "1"]);
    assert_eq!(s(&c("[01,1]"), 2), ["01", "10", "11"]);
    assert!(matches!(c("[010]").refine_to_depth(2), Err(Error::DepthTooSmall { .. })));
}

#[test]
fn point_membership() {
    assert!(!c("[0]").contains_point(&p("(10)")));
    assert!(c("[e]").contains_point(&p("(10)")));
    assert!(c("[01]").contains_point(&p("0(1)")));
}

#[test]
fn malformed_text_is_a_parse_error() {
    for bad in ["[0,00]", "[2]", "0,1", "[0"] {
        let e = Clopen::parse(&dyadic(), bad).unwrap_err();
        assert_eq!(e.exit_code(), 2, "{bad}: {e}");
    }
}

#[test]
fn mixed_radix_words() {
    let b = Bases::parse("3|2").unwrap();
    let x = Clopen::parse(&b, "[0,1,2]").unwrap();
    assert!(x.is_full());
    assert!(Clopen::parse(&b, "[3]").is_err());
    assert_eq!(b.all_words(2).len(), 6);
}

fn clopen(d: usize) -> impl Strategy<Value = Clopen> {
    (0..=d).prop_flat_map(|k| (Just(k), 0u32..(1u32 << (1 << k)))).prop_map(|(k, m)| from_mask(k, m))
}

proptest! {
    #[test]
    fn boolean_algebra_laws(a in clopen(4), b in clopen(4), x in clopen(3)) {
        prop_assert_eq!(a.union(&b), b.union(&a));
        prop_assert_eq!(a.intersection(&b.union(&x)), a.intersection(&b).union(&a.intersection(&x)));
        prop_assert_eq!(a.union(&b).complement(), a.complement().intersection(&b.complement()));
        prop_assert_eq!(a.difference(&b), a.intersection(&b.complement()));
        prop_assert!(a.intersection(&b).is_subset(&a));
        prop_assert_eq!(a.is_disjoint(&b), a.intersection(&b).is_empty());
        prop_assert!(a.union(&a.complement()).is_full());
    }

    #[test]
    fn operations_agree_with_word_sets(a in clopen(4), b in clopen(4)) {
        let (ea, eb) = (expand(&a, 4), expand(&b, 4));
        let u: Vec<_> = words(4).into_iter().filter(|w| ea.contains(w) || eb.contains(w)).collect();
        let i: Vec<_> = words(4).into_iter().filter(|w| ea.contains(w) && eb.contains(w)).collect();
        prop_assert_eq!(expand(&a.union(&b), 4), u);
        prop_assert_eq!(expand(&a.intersection(&b), 4), i);
        prop_assert_eq!(a.refine_to_depth(4).unwrap(), ea);
    }

    #[test]
    fn canonical_form_is_unique(a in clopen(4)) {
        let again = Clopen::normalize(&dyadic(), a.refine_to_depth(4).unwrap()).unwrap();
        prop_assert_eq!(&again, &a);
        prop_assert_eq!(Clopen::parse(&dyadic(), &a.to_string()).unwrap(), a.clone());
        // No two siblings survive normalization.
        let ws = words_of(&a);
        for w in &ws {
            if let Some((last, stem)) = w.split_last() {
                let mut sib = stem.to_vec();
                sib.push(1 - last);
                prop_assert!(!ws.contains(&sib));
            }
        }
    }

    #[test]
    fn mass_counts_words(a in clopen(4)) {
        let (k, n) = mass(&a, 4);
        prop_assert_eq!(a.mass(), num_rational::BigRational::new(k.into(), n.into()));
    }
}
