//! Glasner–Weiss searches: subequivalence under strict measure inequality and
//! equal-measure exchange by back-and-forth.

use serde::Serialize;

use crate::ample::{cylinder_around, orbit_equiv_clopen, GroupElement, StageSequence, UnitSystem};
use crate::clopen::{Clopen, SymbolicPoint};
use crate::error::{Error, Result};
use crate::kr::KRPartition;
use crate::measure::{compare_measures, Comparison, ErgodicList};
use crate::moves::Move;

pub fn count_profile(us: &UnitSystem, a: &Clopen) -> Result<Vec<usize>> {
    us.counts(a)
}

/// Per-column counts of atoms inside `a`.
pub fn count_profile_kr(p: &KRPartition, a: &Clopen) -> Result<Vec<usize>> {
    p.columns
        .iter()
        .map(|col| {
            col.iter().try_fold(0, |n, atom| {
                if atom.is_subset(a) {
                    Ok(n + 1)
                } else if atom.is_disjoint(a) {
                    Ok(n)
                } else {
                    Err(Error::NotCompatible(format!("{a} splits atom {atom}")))
                }
            })
        })
        .collect()
}

/// Least stage where every orbit has fewer atoms in `a` than in `b`, with an
/// element mapping `a` into `b` (re-verified on clopen images).
pub fn subequivalence(s: &dyn StageSequence, m: &ErgodicList, a: &Clopen, b: &Clopen, max_stage: usize) -> Result<GroupElement> {
    if a.is_empty() {
        return Ok(GroupElement::identity(0, 1));
    }
    if compare_measures(a, b, m) != Comparison::AllLt {
        return Err(Error::HypothesisViolated(format!("{a} is not smaller than {b} under every measure")));
    }
    for n in 0..=max_stage {
        let st = s.stage(n)?;
        if let Some(mapping) = st.subequivalence_witness(a, b) {
            let img = st.apply_mapping(&mapping, a).ok_or_else(|| Error::NotAutomorphism(format!("stage {n} chart failed")))?;
            if !img.is_subset(b) {
                return Err(Error::NotAutomorphism(format!("witness maps {a} to {img}, not into {b}")));
            }
            return Ok(GroupElement { stage: n, mapping });
        }
    }
    Err(Error::HorizonExceeded(format!("{a} into {b} in {} up to stage {max_stage}", s.descriptor())))
}

/// The stage permutation `mapping` as an exact map on the atoms of `a`.
pub fn element_on(st: &UnitSystem, mapping: &[usize], a: &Clopen) -> Result<Move> {
    let idx = st.decompose(a).ok_or_else(|| Error::NotCompatible(format!("{a} at {}", st.label)))?;
    let pieces = idx
        .into_iter()
        .filter(|&i| mapping[i] != i)
        .map(|i| (st.atoms[i].clone(), st.elem_between(i, mapping[i])))
        .filter(|(_, e)| !e.is_identity())
        .collect();
    Ok(Move { bases: st.bases.clone(), pieces })
}

/// [`subequivalence`] returned as an exact map defined on `a`.
pub fn subequivalence_move(s: &dyn StageSequence, m: &ErgodicList, a: &Clopen, b: &Clopen, max_stage: usize) -> Result<Move> {
    let g = subequivalence(s, m, a, b, max_stage)?;
    element_on(&*s.stage(g.stage)?, &g.mapping, a)
}

/// The piecewise map `a ∖ remainder_a → b ∖ remainder_b` assembled from the
/// steps of an exchange.
pub fn exchange_move(s: &dyn StageSequence, ex: &Exchange) -> Result<Move> {
    let mut pieces = Vec::new();
    for st in &ex.steps {
        pieces.extend(element_on(&*s.stage(st.element.stage)?, &st.element.mapping, &st.u)?.pieces);
    }
    Ok(Move { bases: s.bases(), pieces })
}

#[derive(Clone, Debug, Serialize)]
pub struct ExchangeStep {
    pub from: String,
    pub to: String,
    pub element: GroupElement,
    #[serde(skip)]
    pub u: Clopen,
    #[serde(skip)]
    pub v: Clopen,
}

#[derive(Clone, Debug, Serialize)]
pub struct Exchange {
    pub steps: Vec<ExchangeStep>,
    pub remainder_a: String,
    pub remainder_b: String,
    #[serde(skip)]
    pub rest_a: Clopen,
    #[serde(skip)]
    pub rest_b: Clopen,
}

fn around_inside(s: &dyn StageSequence, p: &SymbolicPoint, set: &Clopen, min_depth: usize) -> Clopen {
    let b = s.bases();
    (min_depth..).map(|e| cylinder_around(&b, p, e)).find(|c| c.is_subset(set)).expect("open set contains a cylinder")
}

/// Back-and-forth matching of `a` with `b` away from the points `pa`, `pb`,
/// until both remainders are single cylinders of depth at least
/// `depth_target`.
pub fn equal_measure_exchange(
    s: &dyn StageSequence,
    m: &ErgodicList,
    a: &Clopen,
    b: &Clopen,
    pa: &SymbolicPoint,
    pb: &SymbolicPoint,
    depth_target: usize,
    max_stage: usize,
) -> Result<Exchange> {
    if compare_measures(a, b, m) != Comparison::AllEq {
        return Err(Error::HypothesisViolated(format!("{a} and {b} differ in measure")));
    }
    if !a.is_disjoint(b) || !a.contains_point(pa) || !b.contains_point(pb) {
        return Err(Error::HypothesisViolated("sets must be disjoint and contain their points".into()));
    }
    let (mut ra, mut rb) = (a.clone(), b.clone());
    let mut steps = Vec::new();
    let mut forward = true;
    for _ in 0..4 * (max_stage + 2) {
        let ca = around_inside(s, pa, &ra, depth_target);
        let cb = around_inside(s, pb, &rb, depth_target);
        if ca == ra && cb == rb {
            return Ok(Exchange { steps, remainder_a: ra.to_string(), remainder_b: rb.to_string(), rest_a: ra, rest_b: rb });
        }
        // Exact exchange when the two leftovers are already equivalent.
        let (la, lb) = (ra.difference(&ca), rb.difference(&cb));
        if compare_measures(&la, &lb, m) == Comparison::AllEq {
            if let Ok(g) = orbit_equiv_clopen(s, &la, &lb, max_stage) {
                steps.push(ExchangeStep { from: la.to_string(), to: lb.to_string(), element: g, u: la, v: lb });
                ra = ca;
                rb = cb;
                continue;
            }
        }
        // One strict step of the back-and-forth, alternating sides.
        let (src, here, there, pt, rest) = if forward { (&ra, &ca, &rb, pb, &cb) } else { (&rb, &cb, &ra, pa, &ca) };
        let u = src.difference(here);
        let mut depth = rest.depth() + 1;
        let target = loop {
            let hole = cylinder_around(&s.bases(), pt, depth);
            let t = there.difference(&hole);
            if compare_measures(&u, &t, m) == Comparison::AllLt {
                break t;
            }
            depth += 1;
            if depth > rest.depth() + 64 {
                return Err(Error::HorizonExceeded("no shrinking neighbourhood leaves room".into()));
            }
        };
        let g = subequivalence(s, m, &u, &target, max_stage)?;
        let img = s.stage(g.stage)?.apply_mapping(&g.mapping, &u).expect("verified by subequivalence");
        let (new_src, new_there) = (here.clone(), there.difference(&img));
        if forward {
            steps.push(ExchangeStep { from: u.to_string(), to: img.to_string(), element: g, u, v: img });
            ra = new_src;
            rb = new_there;
        } else {
            steps.push(ExchangeStep { from: img.to_string(), to: u.to_string(), element: g.inverse(), u: img, v: u });
            rb = new_src;
            ra = new_there;
        }
        forward = !forward;
    }
    Err(Error::HorizonExceeded("exchange did not settle".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ample::{GammaX, Intersection};
    use crate::clopen::Bases;
    use crate::dynamics::{Odometer, SystemHandle};
    use std::sync::Arc;

    fn c(s: &str) -> Clopen {
        Clopen::parse(&Bases::dyadic(), s).unwrap()
    }
    fn p(s: &str) -> SymbolicPoint {
        SymbolicPoint::parse(s).unwrap()
    }
    fn odo() -> Arc<dyn SystemHandle> {
        Arc::new(Odometer::dyadic())
    }

    #[test]
    fn subequivalence_example() {
        let s = GammaX::new(odo(), p("(0)")).unwrap();
        let m = ErgodicList::for_system(&Odometer::dyadic());
        let g = subequivalence(&s, &m, &c("[00]"), &c("[1]"), 8).unwrap();
        assert_eq!(g.stage, 2);
        let st = s.stage(2).unwrap();
        assert_eq!(st.apply_mapping(&g.mapping, &c("[00]")), Some(c("[10]")));
        assert!(subequivalence(&s, &m, &Clopen::empty(&Bases::dyadic()), &c("[1]"), 8).unwrap().is_identity());
    }

    #[test]
    fn subequivalence_rejects_equal_measure() {
        let s = Intersection::new(odo(), p("(0)"), p("(01)")).unwrap();
        let m = ErgodicList::for_system(&Odometer::dyadic());
        assert!(matches!(subequivalence(&s, &m, &c("[0]"), &c("[1]"), 8), Err(Error::HypothesisViolated(_))));
    }

    #[test]
    fn profiles() {
        let sys = odo();
        let tower = crate::kr::first_return_partition(&sys, &c("[00]"), None).unwrap();
        assert_eq!(count_profile_kr(&tower, &c("[0]")).unwrap(), vec![2]);
        assert_eq!(count_profile_kr(&tower, &c("[e]")).unwrap(), vec![4]);
        assert_eq!(count_profile_kr(&tower, &c("[]")).unwrap(), vec![0]);
        assert!(count_profile_kr(&tower, &c("[000]")).is_err());
    }

    #[test]
    fn exchange_example() {
        let s = GammaX::new(odo(), p("(0)")).unwrap();
        let m = ErgodicList::for_system(&Odometer::dyadic());
        let ex = equal_measure_exchange(&s, &m, &c("[0]"), &c("[1]"), &p("(0)"), &p("1(0)"), 3, 8).unwrap();
        assert_eq!(ex.remainder_a, "[000]");
        assert_eq!(ex.remainder_b, "[100]");
        for st in &ex.steps {
            assert_eq!(s.stage(st.element.stage).unwrap().apply_mapping(&st.element.mapping, &st.u), Some(st.v.clone()));
        }
        let ex = equal_measure_exchange(&s, &m, &c("[0]"), &c("[1]"), &p("(0)"), &p("1(0)"), 1, 8).unwrap();
        assert!(ex.steps.len() <= 1);
        assert!(equal_measure_exchange(&s, &m, &c("[0]"), &c("[0]"), &p("(0)"), &p("(0)"), 1, 8).is_err());
    }
}
