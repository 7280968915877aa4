//! The pointed back-and-forth between two ample groups: sparse point sets,
//! K-compatible refinements, clopen matching, and the alternating extension of
//! h-compatible isomorphisms between finite unit systems.
//!
//! Every isomorphism in a chain is stored from the Γ side to the Λ side; steps
//! that absorb a Λ stage run the extension with the roles swapped and invert.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::sync::Arc;

use serde_json::json;

use crate::ample::{cylinder_around, orbit_equiv_clopen, StageSequence, UnitSystem};
use crate::balance::measure_equivalent_pairs;
use crate::cancel::Horizon;
use crate::clopen::{Bases, Clopen, SymbolicPoint};
use crate::error::{Error, Result};
use crate::gw::{element_on, subequivalence_move};
use crate::measure::{compare_measures, Comparison, ErgodicList};
use crate::moves::Move;
use crate::report::Report;

/// `a` then `b`, as a map defined on `dom` only.
fn compose(a: &Move, b: &Move, dom: &Clopen) -> Result<Move> {
    a.then(b).map(|m| m.restrict(dom)).ok_or_else(|| Error::NotAutomorphism("composition undefined".into()))
}

fn move_string(m: &Move) -> String {
    let mut s = String::new();
    for (i, (p, e)) in m.pieces.iter().enumerate() {
        if i > 0 {
            s.push(';');
        }
        let _ = write!(s, "{p}:{e}");
    }
    if s.is_empty() {
        s.push_str("id");
    }
    s
}

/// `p` and `q` lie in one orbit of some stage group up to `horizon`.
pub fn same_group_orbit(s: &dyn StageSequence, p: &SymbolicPoint, q: &SymbolicPoint, horizon: usize) -> Result<bool> {
    for n in 0..=horizon {
        let st = s.stage(n)?;
        let (Some(a), Some(b)) = (st.locate_point(p), st.locate_point(q)) else { continue };
        if st.orbit_of(a) == st.orbit_of(b) && st.elem_between(a, b).apply_point(p).as_ref() == Some(q) {
            return Ok(true);
        }
    }
    Ok(false)
}

/// A finite set meeting every group orbit at most once, as far as the
/// stages up to `horizon` can tell.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SparseSet {
    pub points: Vec<SymbolicPoint>,
    pub horizon: usize,
}

impl SparseSet {
    pub fn empty() -> SparseSet {
        SparseSet::default()
    }

    pub fn new(s: &dyn StageSequence, mut points: Vec<SymbolicPoint>, horizon: usize) -> Result<SparseSet> {
        let n = points.len();
        points.sort();
        points.dedup();
        if points.len() != n {
            return Err(Error::HypothesisViolated("repeated point in a sparse set".into()));
        }
        for (i, p) in points.iter().enumerate() {
            for q in &points[i + 1..] {
                if same_group_orbit(s, p, q, horizon)? {
                    return Err(Error::HypothesisViolated(format!("{p} and {q} lie in one orbit of {}", s.descriptor())));
                }
            }
        }
        Ok(SparseSet { points, horizon })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Indices of the points inside `c`.
    pub fn inside(&self, c: &Clopen) -> Vec<usize> {
        (0..self.points.len()).filter(|&i| c.contains_point(&self.points[i])).collect()
    }
}

/// A bijection between two finite sparse sets, given pointwise.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PointedMap {
    pub pairs: Vec<(SymbolicPoint, SymbolicPoint)>,
}

impl PointedMap {
    pub fn new(k: &SparseSet, l: &SparseSet, pairs: Vec<(SymbolicPoint, SymbolicPoint)>) -> Result<PointedMap> {
        let dom: BTreeSet<&SymbolicPoint> = pairs.iter().map(|p| &p.0).collect();
        let img: BTreeSet<&SymbolicPoint> = pairs.iter().map(|p| &p.1).collect();
        let ok = dom.len() == pairs.len()
            && img.len() == pairs.len()
            && dom == k.points.iter().collect()
            && img == l.points.iter().collect();
        if !ok {
            return Err(Error::HypothesisViolated("h must be a bijection K → L".into()));
        }
        Ok(PointedMap { pairs })
    }

    /// Pairs the two sets in sorted order.
    pub fn in_order(k: &SparseSet, l: &SparseSet) -> Result<PointedMap> {
        PointedMap::new(k, l, k.points.iter().cloned().zip(l.points.iter().cloned()).collect())
    }

    pub fn image(&self, p: &SymbolicPoint) -> Option<&SymbolicPoint> {
        self.pairs.iter().find(|x| &x.0 == p).map(|x| &x.1)
    }

    pub fn inverse(&self) -> PointedMap {
        PointedMap { pairs: self.pairs.iter().map(|(a, b)| (b.clone(), a.clone())).collect() }
    }
}

/// A finite unit system whose charts are piecewise maps: `charts[a]` carries
/// the representative of the orbit of `a` onto `a`. The group is every
/// orbit-preserving permutation of atoms, realized through the charts.
#[derive(Clone, Debug)]
pub struct FiniteSystem {
    pub bases: Arc<Bases>,
    pub atoms: Vec<Clopen>,
    pub orbits: Vec<Vec<usize>>,
    pub charts: Vec<Move>,
    pub label: String,
    orbit_of: Vec<usize>,
}

impl FiniteSystem {
    pub fn new(bases: Arc<Bases>, atoms: Vec<Clopen>, orbits: Vec<Vec<usize>>, charts: Vec<Move>, label: impl Into<String>) -> FiniteSystem {
        let mut orbit_of = vec![usize::MAX; atoms.len()];
        for (o, orbit) in orbits.iter().enumerate() {
            for &a in orbit {
                orbit_of[a] = o;
            }
        }
        FiniteSystem { bases, atoms, orbits, charts, label: label.into(), orbit_of }
    }

    pub fn trivial(bases: &Arc<Bases>) -> FiniteSystem {
        FiniteSystem::new(bases.clone(), vec![Clopen::full(bases)], vec![vec![0]], vec![Move::identity(bases)], "trivial")
    }

    pub fn from_stage(us: &UnitSystem) -> FiniteSystem {
        let mut charts = vec![Move::identity(&us.bases); us.len()];
        for o in &us.orbits {
            for &a in o {
                charts[a] = Move::single(us.atoms[o[0]].clone(), us.elem_between(o[0], a));
            }
        }
        FiniteSystem::new(us.bases.clone(), us.atoms.clone(), us.orbits.clone(), charts, us.label.clone())
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn orbit_of(&self, a: usize) -> usize {
        self.orbit_of[a]
    }

    pub fn rep(&self, a: usize) -> usize {
        self.orbits[self.orbit_of[a]][0]
    }

    /// The group element carrying atom `a` onto atom `b`, on `a` only.
    pub fn between(&self, a: usize, b: usize) -> Result<Move> {
        let back = self.charts[a].inverse().ok_or_else(|| Error::NotAutomorphism(format!("chart of {} is not invertible", self.atoms[a])))?;
        compose(&back, &self.charts[b], &self.atoms[a])
    }

    pub fn locate_point(&self, p: &SymbolicPoint) -> Option<usize> {
        self.atoms.iter().position(|a| a.contains_point(p))
    }

    /// Atoms inside `u`, if `u` is a union of atoms.
    pub fn decompose(&self, u: &Clopen) -> Option<Vec<usize>> {
        let mut out = Vec::new();
        for (i, a) in self.atoms.iter().enumerate() {
            if a.is_subset(u) {
                out.push(i);
            } else if !a.is_disjoint(u) {
                return None;
            }
        }
        Some(out)
    }

    /// For each atom of `fine`, the atom of `self` containing it.
    pub fn parents_in(&self, fine: &FiniteSystem) -> Option<Vec<usize>> {
        fine.atoms
            .iter()
            .map(|c| {
                let w = c.least_word()?;
                let p = SymbolicPoint::new(w.clone(), vec![0]);
                let a = self.locate_point(&p)?;
                c.is_subset(&self.atoms[a]).then_some(a)
            })
            .collect()
    }

    /// `fine` refines `self`: atoms nest, and every chart of `self` permutes
    /// the atoms of `fine` inside its domain, agreeing with the group of `fine`.
    pub fn is_refined_by(&self, fine: &FiniteSystem) -> bool {
        let Some(parent) = self.parents_in(fine) else { return false };
        let mut children = vec![Vec::new(); self.len()];
        for (c, &a) in parent.iter().enumerate() {
            children[a].push(c);
        }
        for orbit in &self.orbits {
            let r = orbit[0];
            for &a in &orbit[1..] {
                for &c in &children[r] {
                    let Some(img) = self.charts[a].apply(&fine.atoms[c]) else { return false };
                    let Some(d) = children[a].iter().copied().find(|&d| fine.atoms[d] == img) else { return false };
                    if fine.orbit_of[c] != fine.orbit_of[d] {
                        return false;
                    }
                    let Ok(theirs) = fine.between(c, d) else { return false };
                    if !self.charts[a].restrict(&fine.atoms[c]).agrees_on(&theirs, &fine.atoms[c]) {
                        return false;
                    }
                }
            }
        }
        true
    }

    /// Every orbit has at most one atom meeting `k`.
    pub fn is_compatible_with(&self, k: &SparseSet) -> bool {
        self.orbits.iter().all(|o| o.iter().filter(|&&a| !k.inside(&self.atoms[a]).is_empty()).count() <= 1)
    }

    pub fn verify(&self) -> Report {
        let mut r = Report::new(format!("unit system {}", self.label));
        let mass: num_rational::BigRational = self.atoms.iter().map(Clopen::mass).sum();
        let union = Clopen::union_all(&self.bases, self.atoms.iter());
        let mut words: Vec<&Vec<u8>> = self.atoms.iter().flat_map(|a| a.words().iter()).collect();
        words.sort();
        let disjoint = words.windows(2).all(|w| !w[1].starts_with(w[0]));
        r.check("atoms partition X", union.is_full() && disjoint && num_traits::One::is_one(&mass), "atoms overlap or miss part of X");
        let mut bad = Vec::new();
        for (a, chart) in self.charts.iter().enumerate() {
            if chart.apply(&self.atoms[self.rep(a)]).as_ref() != Some(&self.atoms[a]) {
                bad.push(self.atoms[a].to_string());
            }
        }
        r.check("charts carry representatives onto atoms", bad.is_empty(), bad.join(", "));
        r
    }

    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "label": self.label,
            "orbits": self.orbits.iter().map(|o| o.iter().map(|&a| self.atoms[a].to_string()).collect::<Vec<_>>()).collect::<Vec<_>>(),
        })
    }
}

/// Splits orbit representatives so that every orbit has at most one atom
/// meeting `k`. The group is unchanged.
pub fn k_compatible_refine(us: &FiniteSystem, k: &SparseSet) -> Result<FiniteSystem> {
    let mut atoms = Vec::new();
    let mut orbits = Vec::new();
    let mut charts = Vec::new();
    for orbit in &us.orbits {
        let rep = &us.atoms[orbit[0]];
        let mut pulled: Vec<SymbolicPoint> = Vec::new();
        for &a in orbit {
            let back = us.charts[a].inverse().ok_or_else(|| Error::NotAutomorphism("chart not invertible".into()))?;
            for i in k.inside(&us.atoms[a]) {
                let q = back.apply_point(&k.points[i]).ok_or_else(|| Error::NotAutomorphism("chart undefined at a point".into()))?;
                if pulled.contains(&q) {
                    return Err(Error::HypothesisViolated(format!("{} shares an orbit with another point of K", k.points[i])));
                }
                pulled.push(q);
            }
        }
        let pieces = if pulled.len() <= 1 {
            vec![rep.clone()]
        } else {
            pulled.sort();
            let e = (rep.depth()..)
                .find(|&e| {
                    let cyl: BTreeSet<Clopen> = pulled.iter().map(|q| cylinder_around(&us.bases, q, e)).collect();
                    cyl.len() == pulled.len()
                })
                .expect("distinct points separate");
            let mut pieces: Vec<Clopen> = pulled.iter().map(|q| cylinder_around(&us.bases, q, e)).collect();
            let rest = pieces.iter().fold(rep.clone(), |acc, c| acc.difference(c));
            if !rest.is_empty() {
                pieces.push(rest);
            }
            pieces
        };
        for piece in pieces {
            let mut o = Vec::new();
            for &a in orbit {
                let chart = us.charts[a].restrict(&piece);
                let img = chart.apply(&piece).ok_or_else(|| Error::NotAutomorphism("chart undefined on a piece".into()))?;
                o.push(atoms.len());
                atoms.push(img);
                charts.push(chart);
            }
            orbits.push(o);
        }
    }
    Ok(FiniteSystem::new(us.bases.clone(), atoms, orbits, charts, format!("{} (K-compatible)", us.label)))
}

fn least_stage_with<T>(s: &dyn StageSequence, h: &Horizon, mut f: impl FnMut(&UnitSystem) -> Option<T>) -> Result<Option<(usize, T)>> {
    for n in 0..=h.max_stage {
        h.check()?;
        let st = s.stage(n)?;
        if let Some(t) = f(&st) {
            return Ok(Some((n, t)));
        }
    }
    Ok(None)
}

/// A witness `u ∼ v` as a map defined on `u`.
fn equivalence_move(s: &dyn StageSequence, u: &Clopen, v: &Clopen, h: &Horizon) -> Result<Move> {
    h.check()?;
    let g = orbit_equiv_clopen(s, u, v, h.max_stage)?;
    element_on(&*s.stage(g.stage)?, &g.mapping, u)
}

/// `U′ ⊂ V` with `U′ ∼ U` and `U′ ∩ P = {P_i : i ∈ a}`, together with a
/// witness carrying `U` onto `U′`.
pub fn clopen_matching(
    s: &dyn StageSequence,
    m: &ErgodicList,
    pts: &SparseSet,
    u: &Clopen,
    a: &[usize],
    v: &Clopen,
    h: &Horizon,
) -> Result<(Clopen, Move)> {
    let b = s.bases();
    if a.iter().any(|&i| !v.contains_point(&pts.points[i])) {
        return Err(Error::HypothesisViolated("the prescribed points must lie in V".into()));
    }
    if u.is_empty() {
        if !a.is_empty() {
            return Err(Error::HypothesisViolated("an empty clopen meets no point".into()));
        }
        return Ok((u.clone(), Move::identity(&b)));
    }
    if compare_measures(u, v, m) != Comparison::AllLt {
        return Err(Error::HypothesisViolated(format!("{u} is not smaller than {v} for every measure")));
    }
    let outside = u.complement();
    let (w, v2) = if pts.is_empty() {
        (u.clone(), v.clone())
    } else {
        // Small disjoint cylinders around the points: D around the prescribed
        // ones, E around the others, B their union.
        let e = (1..)
            .find(|&e| {
                let cyl: BTreeSet<Clopen> = pts.points.iter().map(|p| cylinder_around(&b, p, e)).collect();
                if cyl.len() != pts.len() {
                    return false;
                }
                let all = Clopen::union_all(&b, cyl.iter());
                let e_part = Clopen::union_all(&b, (0..pts.len()).filter(|i| !a.contains(i)).map(|i| cylinder_around(&b, &pts.points[i], e)).collect::<Vec<_>>().iter());
                compare_measures(&all, u, m) == Comparison::AllLt
                    && (e_part.is_empty() || compare_measures(&e_part, &outside, m) == Comparison::AllLt)
                    && compare_measures(u, &v.difference(&all), m) == Comparison::AllLt
            })
            .expect("cylinders shrink to zero measure");
        let cyl = |i: usize| cylinder_around(&b, &pts.points[i], e);
        let d = Clopen::union_all(&b, a.iter().map(|&i| cyl(i)).collect::<Vec<_>>().iter());
        let e_set = Clopen::union_all(&b, (0..pts.len()).filter(|i| !a.contains(i)).map(cyl).collect::<Vec<_>>().iter());
        let all = d.union(&e_set);
        let found = least_stage_with(s, h, |st| {
            let g = st.injection_witness(&[(&d, u), (&e_set, &outside)])?;
            let img = st.decompose(u)?;
            let w = Clopen::union_all(&st.bases, (0..st.len()).filter(|x| img.contains(&g[*x])).map(|x| &st.atoms[x]));
            Some(w)
        })?;
        let (_, w) = found.ok_or_else(|| Error::HorizonExceeded(format!("no element moves the points of K into {u} as prescribed")))?;
        (w, v.difference(&all))
    };
    let v1 = v.intersection(&w);
    let rest = w.difference(&v1);
    let y = if rest.is_empty() {
        rest
    } else {
        let g = subequivalence_move(s, m, &rest, &v2.difference(&v1), h.max_stage)?;
        g.apply(&rest).expect("defined on its domain")
    };
    let u2 = v1.union(&y);
    let inside: Vec<usize> = pts.inside(&u2);
    if !u2.is_subset(v) || inside != a {
        return Err(Error::HypothesisViolated(format!("matching of {u} inside {v} misses its constraints")));
    }
    let wit = equivalence_move(s, u, &u2, h)?;
    Ok((u2, wit))
}

/// An h-compatible isomorphism between finite unit systems. Atom `i` of the
/// source goes to atom `atom_map[i]` of the target; `witnesses[i]` carries
/// the one onto the other inside one of the two groups.
#[derive(Clone, Debug)]
pub struct PartialIso {
    pub source: FiniteSystem,
    pub target: FiniteSystem,
    pub atom_map: Vec<usize>,
    pub witnesses: Vec<Move>,
}

impl PartialIso {
    pub fn trivial(bases: &Arc<Bases>) -> PartialIso {
        let t = FiniteSystem::trivial(bases);
        PartialIso { source: t.clone(), target: t, atom_map: vec![0], witnesses: vec![Move::identity(bases)] }
    }

    pub fn image(&self, a: usize) -> &Clopen {
        &self.target.atoms[self.atom_map[a]]
    }

    /// `Φ(u)` for a union of source atoms.
    pub fn apply(&self, u: &Clopen) -> Option<Clopen> {
        let idx = self.source.decompose(u)?;
        Some(Clopen::union_all(&self.source.bases, idx.iter().map(|&a| self.image(a))))
    }

    pub fn inverse(&self) -> Result<PartialIso> {
        let mut back = vec![0; self.atom_map.len()];
        for (a, &b) in self.atom_map.iter().enumerate() {
            back[b] = a;
        }
        let witnesses = back
            .iter()
            .map(|&a| self.witnesses[a].inverse().map(|w| w.restrict(&self.target.atoms[self.atom_map[a]])))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::NotAutomorphism("witness not invertible".into()))?;
        Ok(PartialIso { source: self.target.clone(), target: self.source.clone(), atom_map: back, witnesses })
    }

    /// All three h-compatibility clauses plus the unit-system invariants of
    /// both sides.
    pub fn verify(&self, k: &SparseSet, l: &SparseSet, h: &PointedMap) -> Report {
        let mut r = Report::new("partial isomorphism");
        r.merge(self.source.verify());
        r.merge(self.target.verify());
        let n = self.source.len();
        let img: BTreeSet<usize> = self.atom_map.iter().copied().collect();
        r.check("atom map is a bijection", self.target.len() == n && img.len() == n, "atom counts or images differ");
        if !r.passed() {
            return r;
        }
        let mut bad = Vec::new();
        for a in 0..n {
            if self.witnesses[a].apply(&self.source.atoms[a]).as_ref() != Some(self.image(a)) {
                bad.push(self.source.atoms[a].to_string());
            }
        }
        r.check("respects equivalence", bad.is_empty(), bad.join(", "));
        // With full orbit groups on both sides, conjugation means orbits go
        // onto orbits; each chart link then has its counterpart.
        let mut conj = Vec::new();
        for (o, orbit) in self.source.orbits.iter().enumerate() {
            let t = self.target.orbit_of(self.atom_map[orbit[0]]);
            let same = orbit.iter().all(|&a| self.target.orbit_of(self.atom_map[a]) == t);
            if !same || self.target.orbits[t].len() != orbit.len() {
                conj.push(format!("orbit {o}"));
            }
        }
        r.check("conjugates the groups", conj.is_empty(), conj.join(", "));
        let mut pointed = Vec::new();
        for a in 0..n {
            for (p, q) in &h.pairs {
                if self.source.atoms[a].contains_point(p) != self.image(a).contains_point(q) {
                    pointed.push(format!("{} at {p}", self.source.atoms[a]));
                }
            }
            for q in &l.points {
                if self.image(a).contains_point(q) && !h.pairs.iter().any(|x| &x.1 == q && self.source.atoms[a].contains_point(&x.0)) {
                    pointed.push(format!("{} meets {q}", self.image(a)));
                }
            }
        }
        r.check("pointed: image meets L exactly in h of the atom's points", pointed.is_empty(), pointed.join(", "));
        r.check("source is K-compatible", self.source.is_compatible_with(k), "an orbit meets K twice");
        r.check("target is L-compatible", self.target.is_compatible_with(l), "an orbit meets L twice");
        r
    }

    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "pairs": (0..self.source.len()).map(|a| [self.source.atoms[a].to_string(), self.image(a).to_string()]).collect::<Vec<_>>(),
            "witnesses": self.witnesses.iter().map(move_string).collect::<Vec<_>>(),
            "source_orbits": self.source.orbits.len(),
        })
    }
}

/// `next` extends `prev`: both sides refine, and every atom of `prev` is
/// sent where `prev` sends it.
pub fn verify_coherence(prev: &PartialIso, next: &PartialIso) -> Report {
    let mut r = Report::new("chain coherence");
    r.check("source refines", prev.source.is_refined_by(&next.source), "source does not refine the previous source");
    r.check("target refines", prev.target.is_refined_by(&next.target), "target does not refine the previous target");
    let mut bad = Vec::new();
    for (a, atom) in prev.source.atoms.iter().enumerate() {
        if next.apply(atom).as_ref() != Some(prev.image(a)) {
            bad.push(atom.to_string());
        }
    }
    r.check("extends the previous isomorphism", bad.is_empty(), bad.join(", "));
    r
}

/// Extends `phi` to `fine`, a K-compatible refinement of its source, by
/// building a matching refinement of its target inside `s_target`.
#[allow(clippy::too_many_arguments)]
pub fn extend_iso(
    phi: &PartialIso,
    fine: &FiniteSystem,
    s_target: &dyn StageSequence,
    m: &ErgodicList,
    k: &SparseSet,
    l: &SparseSet,
    h: &PointedMap,
    hz: &Horizon,
) -> Result<PartialIso> {
    if !fine.is_compatible_with(k) {
        return Err(Error::HypothesisViolated("the refinement is not K-compatible".into()));
    }
    let parent = phi.source.parents_in(fine).filter(|_| phi.source.is_refined_by(fine));
    let parent = parent.ok_or_else(|| Error::HypothesisViolated("the new source does not refine the old one".into()))?;
    let mut children = vec![Vec::new(); phi.source.len()];
    for (c, &a) in parent.iter().enumerate() {
        children[a].push(c);
    }
    let n = fine.len();
    let b = fine.bases.clone();
    let mut img: Vec<Option<Clopen>> = vec![None; n];
    let mut wit: Vec<Option<Move>> = vec![None; n];
    // For each fine atom, the child of the representative it comes from.
    let mut home = vec![usize::MAX; n];
    let l_of = |c: &Clopen| -> Vec<usize> {
        let mut v: Vec<usize> = k.inside(c).iter().filter_map(|&i| h.image(&k.points[i])).filter_map(|q| l.points.iter().position(|x| x == q)).collect();
        v.sort_unstable();
        v
    };
    for orbit in &phi.source.orbits {
        let rho = orbit.iter().copied().find(|&a| !k.inside(&phi.source.atoms[a]).is_empty()).unwrap_or(orbit[0]);
        let target = phi.image(rho).clone();
        let mut left = target.clone();
        let kids = &children[rho];
        for (j, &c) in kids.iter().enumerate() {
            let atom = &fine.atoms[c];
            let (u, w) = if j + 1 == kids.len() {
                let w = equivalence_move(s_target, atom, &left, hz).map_err(|e| match e {
                    Error::HorizonExceeded(_) => Error::HypothesisFailed { u: atom.to_string(), v: left.to_string() },
                    e => e,
                })?;
                (left.clone(), w)
            } else {
                clopen_matching(s_target, m, l, atom, &l_of(atom), &left, hz)?
            };
            left = left.difference(&u);
            img[c] = Some(u);
            wit[c] = Some(w);
            home[c] = c;
        }
        for &a in orbit {
            if a == rho {
                continue;
            }
            let delta = phi.source.between(a, rho)?;
            let sigma = phi.target.between(phi.atom_map[rho], phi.atom_map[a])?;
            for &c in &children[a] {
                let c0_set = delta.apply(&fine.atoms[c]).ok_or_else(|| Error::NotAutomorphism("chart undefined".into()))?;
                let c0 = kids.iter().copied().find(|&x| fine.atoms[x] == c0_set).ok_or_else(|| Error::NotCompatible(format!("{c0_set} is not a fine atom")))?;
                let u0 = img[c0].clone().expect("representative children first");
                let u = sigma.apply(&u0).ok_or_else(|| Error::NotAutomorphism("chart undefined".into()))?;
                let w = compose(&delta.restrict(&fine.atoms[c]), wit[c0].as_ref().expect("set"), &fine.atoms[c])?;
                let w = compose(&w, &sigma.restrict(&u0), &fine.atoms[c])?;
                img[c] = Some(u);
                wit[c] = Some(w);
                home[c] = c0;
            }
        }
    }
    let img: Vec<Clopen> = img.into_iter().map(|x| x.expect("every fine atom lies under some coarse atom")).collect();
    let wit: Vec<Move> = wit.into_iter().map(|x| x.expect("set with the image")).collect();
    // σ-part of each chart: from the image of the representative child to
    // the image of the atom.
    let mut sigma_part = Vec::with_capacity(n);
    for c in 0..n {
        let c0 = home[c];
        if c0 == c {
            sigma_part.push(Move::identity(&b));
        } else {
            let mv = phi.target.between(phi.atom_map[parent[c0]], phi.atom_map[parent[c]])?;
            sigma_part.push(mv.restrict(&img[c0]));
        }
    }
    let mut charts = vec![Move::identity(&b); n];
    for orbit in &fine.orbits {
        let r = orbit[0];
        let back = sigma_part[r].inverse().ok_or_else(|| Error::NotAutomorphism("chart not invertible".into()))?.restrict(&img[r]);
        let base = home[r];
        for &c in &orbit[1..] {
            let t = home[c];
            // λ links the representative children of two Δ-orbits of one fine orbit.
            let lambda = if t == base {
                Move::identity(&b)
            } else {
                equivalence_move(s_target, &img[base], &img[t], hz).map_err(|e| match e {
                    Error::HorizonExceeded(_) => Error::HypothesisFailed { u: fine.atoms[base].to_string(), v: fine.atoms[t].to_string() },
                    e => e,
                })?
            };
            let chart = compose(&back, &lambda, &img[r])?;
            charts[c] = compose(&chart, &sigma_part[c], &img[r])?;
        }
    }
    let target = FiniteSystem::new(b, img, fine.orbits.clone(), charts, format!("image of {}", fine.label));
    Ok(PartialIso { source: fine.clone(), target, atom_map: (0..n).collect(), witnesses: wit })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Gamma,
    Lambda,
}

/// One link of a chain: the isomorphism and the stage that was absorbed.
#[derive(Clone, Debug)]
pub struct ChainStep {
    pub iso: PartialIso,
    pub absorbed: Option<(Side, usize)>,
}

/// Equal-measure pairs of depth at most `depth` must be equivalent on both
/// sides or on neither, as far as the horizon can tell.
pub fn check_isomorphic_closures(sg: &dyn StageSequence, sl: &dyn StageSequence, m: &ErgodicList, depth: usize, hz: &Horizon) -> Result<()> {
    for (u, v) in measure_equivalent_pairs(&sg.bases(), m, depth) {
        hz.check()?;
        let a = orbit_equiv_clopen(sg, &u, &v, hz.max_stage).is_ok();
        let b = orbit_equiv_clopen(sl, &u, &v, hz.max_stage).is_ok();
        if a != b {
            return Err(Error::HypothesisFailed { u: u.to_string(), v: v.to_string() });
        }
    }
    Ok(())
}

/// Depth of equal-measure pairs probed before the back-and-forth starts.
pub const CLOSURE_PROBE_DEPTH: usize = 2;

pub struct Driver<'a> {
    pub gamma: &'a dyn StageSequence,
    pub lambda: &'a dyn StageSequence,
    pub k: SparseSet,
    pub l: SparseSet,
    pub h: PointedMap,
    pub horizon: Horizon,
}

impl Driver<'_> {
    /// `Φ_0, …, Φ_depth`: odd steps absorb Γ stages, even steps Λ stages;
    /// the last two steps absorb stages of index at least `depth`, so the
    /// final isomorphism is defined on every clopen of depth `depth`.
    pub fn run(&self, depth: usize) -> Result<Vec<ChainStep>> {
        let bases = self.gamma.bases();
        if *self.lambda.bases() != *bases {
            return Err(Error::HypothesisViolated("the two sequences live on different spaces".into()));
        }
        let m = ErgodicList::product(&bases);
        check_isomorphic_closures(self.gamma, self.lambda, &m, CLOSURE_PROBE_DEPTH.min(depth.max(1)), &self.horizon)?;
        let mut chain = vec![ChainStep { iso: PartialIso::trivial(&bases), absorbed: None }];
        let mut last = [0usize, 0usize];
        let hinv = self.h.inverse();
        for step in 1..=depth {
            let cur = &chain.last().expect("nonempty").iso;
            let (side, seq, pts) = if step % 2 == 1 { (Side::Gamma, self.gamma, &self.k) } else { (Side::Lambda, self.lambda, &self.l) };
            let slot = side as usize;
            let mut min_k = last[slot] + 1;
            if step + 1 >= depth {
                min_k = min_k.max(depth);
            }
            let coarse = if side == Side::Gamma { &cur.source } else { &cur.target };
            let mut found = None;
            for kk in min_k..=self.horizon.max_stage {
                self.horizon.check()?;
                let fine = k_compatible_refine(&FiniteSystem::from_stage(&*seq.stage(kk)?), pts)?;
                if coarse.is_refined_by(&fine) {
                    found = Some((kk, fine));
                    break;
                }
            }
            let (kk, fine) = found.ok_or_else(|| Error::HorizonExceeded(format!("no stage of {} refines step {}", seq.descriptor(), step - 1)))?;
            let next = match side {
                Side::Gamma => extend_iso(cur, &fine, self.lambda, &m, &self.k, &self.l, &self.h, &self.horizon)?,
                Side::Lambda => extend_iso(&cur.inverse()?, &fine, self.gamma, &m, &self.l, &self.k, &hinv, &self.horizon)?.inverse()?,
            };
            last[slot] = kk;
            chain.push(ChainStep { iso: next, absorbed: Some((side, kk)) });
        }
        Ok(chain)
    }

    pub fn verify(&self, chain: &[ChainStep]) -> Report {
        let mut r = Report::new("krieger chain");
        for (i, st) in chain.iter().enumerate() {
            let rep = st.iso.verify(&self.k, &self.l, &self.h);
            if !rep.passed() {
                for f in rep.failures() {
                    r.fail(format!("step {i}: {}", f.name), f.detail.clone());
                }
            }
            if i > 0 {
                let c = verify_coherence(&chain[i - 1].iso, &st.iso);
                for f in c.failures() {
                    r.fail(format!("step {i}: {}", f.name), f.detail.clone());
                }
            }
        }
        r.summarize("every step is h-compatible and extends the previous one", chain.len());
        r
    }
}

pub fn chain_to_json(gamma: &dyn StageSequence, lambda: &dyn StageSequence, chain: &[ChainStep]) -> serde_json::Value {
    json!({
        "gamma": gamma.descriptor(),
        "lambda": lambda.descriptor(),
        "steps": chain.iter().enumerate().map(|(i, st)| {
            let mut v = st.iso.to_json();
            v["step"] = json!(i);
            v["absorbed"] = match st.absorbed {
                Some((side, k)) => json!({"side": side, "stage": k}),
                None => serde_json::Value::Null,
            };
            v
        }).collect::<Vec<_>>(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ample::{DyadicPerm, GammaX, Intersection};
    use crate::dynamics::{Odometer, SystemHandle};

    fn c(s: &str) -> Clopen {
        Clopen::parse(&Bases::dyadic(), s).unwrap()
    }
    fn p(s: &str) -> SymbolicPoint {
        SymbolicPoint::parse(s).unwrap()
    }
    fn odo() -> Arc<dyn SystemHandle> {
        Arc::new(Odometer::dyadic())
    }
    fn m() -> ErgodicList {
        ErgodicList::product(&Bases::dyadic())
    }

    #[test]
    fn k_compatible_split() {
        let s = GammaX::new(odo(), p("(0)")).unwrap();
        let st = FiniteSystem::from_stage(&s.stage(2).unwrap());
        assert!(k_compatible_refine(&st, &SparseSet::empty()).unwrap().atoms == st.atoms);
        let k = SparseSet::new(&s, vec![p("(0)"), p("(01)")], 8).unwrap();
        assert!(!st.is_compatible_with(&k));
        let fine = k_compatible_refine(&st, &k).unwrap();
        assert!(fine.is_compatible_with(&k));
        assert!(fine.verify().passed());
        assert!(st.is_refined_by(&fine));
        let one = SparseSet::new(&s, vec![p("(01)")], 8).unwrap();
        assert_eq!(k_compatible_refine(&st, &one).unwrap().orbits.len(), 1);
        assert!(SparseSet::new(&s, vec![p("(0)"), p("1(0)")], 8).is_err());
    }

    #[test]
    fn matching_respects_points() {
        let s = GammaX::new(odo(), p("(0)")).unwrap();
        let h = Horizon::new(12);
        let (u2, w) = clopen_matching(&s, &m(), &SparseSet::empty(), &c("[00]"), &[], &c("[0,10]"), &h).unwrap();
        assert!(u2.is_subset(&c("[0,10]")));
        assert_eq!(w.apply(&c("[00]")), Some(u2.clone()));
        let k = SparseSet::new(&s, vec![p("(01)")], 8).unwrap();
        let (u2, w) = clopen_matching(&s, &m(), &k, &c("[00]"), &[0], &c("[0]"), &h).unwrap();
        assert!(u2.is_subset(&c("[0]")) && u2.contains_point(&p("(01)")));
        assert_eq!(w.apply(&c("[00]")), Some(u2));
        assert!(clopen_matching(&s, &m(), &k, &c("[0]"), &[0], &c("[0]"), &h).is_err());
    }

    #[test]
    fn first_extension_matches_depth_one() {
        let s = GammaX::new(odo(), p("(0)")).unwrap();
        let d = DyadicPerm::default();
        let h = Horizon::new(12);
        let phi = PartialIso::trivial(&Bases::dyadic());
        let fine = FiniteSystem::from_stage(&s.stage(1).unwrap());
        let e = SparseSet::empty();
        let hm = PointedMap::default();
        let next = extend_iso(&phi, &fine, &d, &m(), &e, &e, &hm, &h).unwrap();
        assert!(next.verify(&e, &e, &hm).passed());
        assert!(verify_coherence(&phi, &next).passed());
        for a in 0..2 {
            assert_eq!(next.source.atoms[a].mass(), next.image(a).mass());
        }
    }

    #[test]
    fn driver_gamma_x_against_dyadic_perm() {
        let g = GammaX::new(odo(), p("(0)")).unwrap();
        let d = DyadicPerm::default();
        let drv = Driver { gamma: &g, lambda: &d, k: SparseSet::empty(), l: SparseSet::empty(), h: PointedMap::default(), horizon: Horizon::new(14) };
        let chain = drv.run(4).unwrap();
        assert_eq!(chain.len(), 5);
        let r = drv.verify(&chain);
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn driver_refutes_different_closures() {
        let g = GammaX::new(odo(), p("(0)")).unwrap();
        let i = Intersection::new(odo(), p("(0)"), p("(01)")).unwrap();
        let drv = Driver { gamma: &g, lambda: &i, k: SparseSet::empty(), l: SparseSet::empty(), h: PointedMap::default(), horizon: Horizon::new(10) };
        assert!(matches!(drv.run(3), Err(Error::HypothesisFailed { .. })));
    }

    #[test]
    fn pointed_driver() {
        let g = GammaX::new(odo(), p("(0)")).unwrap();
        let g2 = GammaX::new(odo(), p("(01)")).unwrap();
        let k = SparseSet::new(&g, vec![p("(10)")], 8).unwrap();
        let l = SparseSet::new(&g2, vec![p("(0)")], 8).unwrap();
        let h = PointedMap::in_order(&k, &l).unwrap();
        let drv = Driver { gamma: &g, lambda: &g2, k, l, h, horizon: Horizon::new(14) };
        let chain = drv.run(4).unwrap();
        let r = drv.verify(&chain);
        assert!(r.passed(), "{r:?}");
    }
}
