//! pairwise equivalent atoms. Orbits are cut into fragments and joined along
//! witnesses, which is all the almost-equivalence refinement needs. Ordered
//! partitions turn a stage sequence into a minimal map with `Γ = Γ_x(φ)`.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex};

use num_rational::BigRational;
use num_traits::{One, Zero};
use serde::Serialize;
use serde_json::json;

use crate::ample::{cylinder_around, orbit_equiv_clopen, StageSequence, UnitSystem};
use crate::cancel::Horizon;
use crate::clopen::{Bases, Clopen, SymbolicPoint};
use crate::dynamics::{Direction, SystemHandle};
use crate::error::{Error, Result};
use crate::gw::{element_on, subequivalence_move};
use crate::kr::KRPartition;
use crate::measure::{compare_measures, Comparison, ErgodicList};
use crate::moves::{Elem, Move};
use crate::report::Report;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Mode {
    /// Atoms of an orbit are `∼_Γ`-equivalent, with stored witnesses.
    Sim,
    /// Atoms of an orbit have equal measure under every listed measure.
    SimStar,
}

/// Atoms of one orbit; `atoms[0]` is the representative and `witnesses[j]`
/// maps it onto `atoms[j]` (absent in `SimStar` mode).
#[derive(Clone, Debug)]
pub struct Orbit {
    pub atoms: Vec<Clopen>,
    pub witnesses: Vec<Option<Move>>,
}

impl Orbit {
    pub fn rep(&self) -> &Clopen {
        &self.atoms[0]
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct GammaPartition {
    pub bases: Arc<Bases>,
    pub mode: Mode,
    measures: Option<ErgodicList>,
    orbits: BTreeMap<usize, Orbit>,
    next_id: usize,
}

fn measure_lt_scaled(m: &ErgodicList, a: &Clopen, k: usize, b: &Clopen) -> bool {
    let k = BigRational::from_integer(k.into());
    m.0.iter().all(|mu| mu.eval(a) * &k < mu.eval(b))
}

fn least_point(c: &Clopen) -> SymbolicPoint {
    SymbolicPoint::new(c.least_word().expect("nonempty clopen").clone(), vec![0])
}

/// A point of `c` with a tail `(011)`. Fragments are cut around it rather
/// than around the least point, which may be a distinguished point whose
/// neighbourhoods only move at very deep stages.
fn fragment_point(c: &Clopen) -> SymbolicPoint {
    SymbolicPoint::new(c.least_word().expect("nonempty clopen").clone(), vec![0, 1, 1])
}

/// A cylinder strictly inside `c` around its fragment point, deep enough
/// that `ok` holds.
fn small_cylinder(c: &Clopen, ok: impl Fn(&Clopen) -> bool) -> Clopen {
    let p = fragment_point(c);
    (c.depth() + 1..)
        .map(|e| cylinder_around(c.bases(), &p, e))
        .find(|t| ok(t))
        .expect("cylinders shrink to zero measure")
}

impl GammaPartition {
    fn with_orbits(bases: Arc<Bases>, mode: Mode, measures: Option<ErgodicList>, orbits: Vec<Orbit>) -> GammaPartition {
        let next_id = orbits.len();
        GammaPartition { bases, mode, measures, orbits: orbits.into_iter().enumerate().collect(), next_id }
    }

    pub fn trivial(bases: &Arc<Bases>) -> GammaPartition {
        GammaPartition::from_stage(&UnitSystem::trivial(bases))
    }

    /// The stage orbits, witnessed by the stage charts.
    pub fn from_stage(us: &UnitSystem) -> GammaPartition {
        let orbits = us
            .orbits
            .iter()
            .map(|o| Orbit {
                atoms: o.iter().map(|&a| us.atoms[a].clone()).collect(),
                witnesses: o.iter().map(|&a| Some(Move::single(us.atoms[o[0]].clone(), us.elem_between(o[0], a)))).collect(),
            })
            .collect();
        GammaPartition::with_orbits(us.bases.clone(), Mode::Sim, None, orbits)
    }

    /// A `∼*` partition from explicit orbits, checked against `m`.
    pub fn sim_star(bases: &Arc<Bases>, m: &ErgodicList, orbits: Vec<Vec<Clopen>>) -> Result<GammaPartition> {
        for o in &orbits {
            if o.is_empty() || o.iter().any(|a| compare_measures(&o[0], a, m) != Comparison::AllEq) {
                return Err(Error::NoWitness(format!("orbit {o:?} has atoms of different measure")));
            }
        }
        let orbits = orbits.into_iter().map(|atoms| Orbit { witnesses: vec![None; atoms.len()], atoms }).collect();
        Ok(GammaPartition::with_orbits(bases.clone(), Mode::SimStar, Some(m.clone()), orbits))
    }

    pub fn ids(&self) -> Vec<usize> {
        self.orbits.keys().copied().collect()
    }

    pub fn orbit(&self, id: usize) -> &Orbit {
        &self.orbits[&id]
    }

    pub fn orbits(&self) -> impl Iterator<Item = (usize, &Orbit)> {
        self.orbits.iter().map(|(k, v)| (*k, v))
    }

    pub fn orbit_len(&self) -> usize {
        self.orbits.len()
    }

    pub fn atom_count(&self) -> usize {
        self.orbits.values().map(Orbit::len).sum()
    }

    pub fn atoms(&self) -> impl Iterator<Item = &Clopen> {
        self.orbits.values().flat_map(|o| o.atoms.iter())
    }

    fn insert(&mut self, o: Orbit) -> usize {
        let id = self.next_id;
        self.next_id += 1;
        self.orbits.insert(id, o);
        id
    }

    /// `n_O(U)`.
    pub fn orbit_count(&self, id: usize, u: &Clopen) -> Result<usize> {
        let mut n = 0;
        for a in &self.orbit(id).atoms {
            if a.is_subset(u) {
                n += 1;
            } else if !a.is_disjoint(u) {
                return Err(Error::NotCompatible(format!("{u} splits atom {a}")));
            }
        }
        Ok(n)
    }

    /// `n_O(U) − n_O(V)`.
    pub fn imbalance(&self, id: usize, u: &Clopen, v: &Clopen) -> Result<i64> {
        Ok(self.orbit_count(id, u)? as i64 - self.orbit_count(id, v)? as i64)
    }

    pub fn is_compatible(&self, u: &Clopen) -> bool {
        self.atoms().all(|a| a.is_subset(u) || a.is_disjoint(u))
    }

    /// Atoms of orbit `id` inside `alpha`: copies of the coarser orbit of
    /// `alpha` contained in this orbit.
    pub fn copies(&self, id: usize, alpha: &Clopen) -> usize {
        self.orbit(id).atoms.iter().filter(|a| a.is_subset(alpha)).count()
    }

    pub fn rep_union(&self, ids: &[usize]) -> Clopen {
        Clopen::union_all(&self.bases, ids.iter().map(|i| self.orbit(*i).rep()))
    }

    /// Replaces orbit `id` by one orbit per column of `per_atom`; row `j`
    /// subdivides atom `j`. Empty columns are dropped.
    pub fn cut_orbit(&mut self, id: usize, per_atom: &[Vec<Clopen>]) -> Result<Vec<Option<usize>>> {
        let o = self.orbits.get(&id).ok_or_else(|| Error::IncoherentFragment(format!("no orbit {id}")))?;
        if per_atom.len() != o.len() || per_atom.iter().any(|r| r.len() != per_atom[0].len()) {
            return Err(Error::IncoherentFragment("subdivision must split every atom into the same number of parts".into()));
        }
        for (j, row) in per_atom.iter().enumerate() {
            let union = Clopen::union_all(&self.bases, row.iter());
            let mass: BigRational = row.iter().map(Clopen::mass).sum();
            if union != o.atoms[j] || mass != o.atoms[j].mass() {
                return Err(Error::IncoherentFragment(format!("parts do not partition atom {}", o.atoms[j])));
            }
        }
        let parts = per_atom[0].len();
        let mut new = Vec::with_capacity(parts);
        for i in 0..parts {
            if per_atom[0][i].is_empty() {
                if per_atom.iter().any(|r| !r[i].is_empty()) {
                    return Err(Error::IncoherentFragment(format!("part {i} is empty in the representative only")));
                }
                new.push(None);
                continue;
            }
            let mut atoms = Vec::with_capacity(o.len());
            let mut witnesses = Vec::with_capacity(o.len());
            for (j, row) in per_atom.iter().enumerate() {
                let piece = &row[i];
                match (&o.witnesses[j], self.mode) {
                    (Some(w), Mode::Sim) => {
                        let w = w.restrict(&per_atom[0][i]);
                        if w.apply(&per_atom[0][i]).as_ref() != Some(piece) {
                            return Err(Error::IncoherentFragment(format!("part {i} of atom {j} is not the transported part")));
                        }
                        witnesses.push(Some(w));
                    }
                    (_, Mode::Sim) => return Err(Error::IncoherentFragment(format!("atom {j} has no witness"))),
                    (_, Mode::SimStar) => {
                        let m = self.measures.as_ref().expect("sim-star partitions carry measures");
                        if compare_measures(piece, &per_atom[0][i], m) != Comparison::AllEq {
                            return Err(Error::IncoherentFragment(format!("part {i} of atom {j} has a different measure")));
                        }
                        witnesses.push(None);
                    }
                }
                atoms.push(piece.clone());
            }
            new.push(Some(Orbit { atoms, witnesses }));
        }
        self.orbits.remove(&id);
        Ok(new.into_iter().map(|o| o.map(|o| self.insert(o))).collect())
    }

    /// Cuts orbit `id` by a partition of its representative, transported to
    /// the other atoms along the witnesses.
    pub fn cut_by_rep(&mut self, id: usize, pieces: &[Clopen]) -> Result<Vec<Option<usize>>> {
        let o = self.orbits.get(&id).ok_or_else(|| Error::IncoherentFragment(format!("no orbit {id}")))?;
        let mut per_atom = Vec::with_capacity(o.len());
        for w in &o.witnesses {
            let w = w.as_ref().ok_or_else(|| Error::IncoherentFragment("sim-star orbits are cut atom by atom".into()))?;
            let row = pieces
                .iter()
                .map(|p| w.apply(p).ok_or_else(|| Error::IncoherentFragment(format!("witness undefined on {p}"))))
                .collect::<Result<Vec<_>>>()?;
            per_atom.push(row);
        }
        self.cut_orbit(id, &per_atom)
    }

    /// Stacks orbit `b` after orbit `a`; the witness maps `rep(a)` onto `rep(b)`.
    pub fn join_orbits(&mut self, a: usize, b: usize, witness: Option<&Move>) -> Result<usize> {
        if a == b || !self.orbits.contains_key(&a) || !self.orbits.contains_key(&b) {
            return Err(Error::NoWitness(format!("cannot join orbits {a} and {b}")));
        }
        let (ra, rb) = (self.orbit(a).rep().clone(), self.orbit(b).rep().clone());
        let extra = match self.mode {
            Mode::Sim => {
                let w = witness.ok_or_else(|| Error::NoWitness(format!("{ra} to {rb}")))?.restrict(&ra);
                if w.apply(&ra).as_ref() != Some(&rb) {
                    return Err(Error::NoWitness(format!("witness does not map {ra} onto {rb}")));
                }
                self.orbit(b)
                    .witnesses
                    .iter()
                    .map(|v| {
                        let v = v.as_ref().expect("sim orbits carry witnesses");
                        w.then(v).map(|c| Some(c.restrict(&ra))).ok_or_else(|| Error::NoWitness("composition undefined".into()))
                    })
                    .collect::<Result<Vec<_>>>()?
            }
            Mode::SimStar => {
                let m = self.measures.as_ref().expect("sim-star partitions carry measures");
                if compare_measures(&ra, &rb, m) != Comparison::AllEq {
                    return Err(Error::NoWitness(format!("{ra} and {rb} differ in measure")));
                }
                vec![None; self.orbit(b).len()]
            }
        };
        let mut oa = self.orbits.remove(&a).expect("checked");
        let ob = self.orbits.remove(&b).expect("checked");
        oa.atoms.extend(ob.atoms);
        oa.witnesses.extend(extra);
        Ok(self.insert(oa))
    }

    /// Atoms partition X: prefix-free words of total mass one.
    fn partitions_space(&self) -> bool {
        let mut words: Vec<&Vec<u8>> = self.atoms().flat_map(|a| a.words().iter()).collect();
        words.sort();
        let prefix_free = words.windows(2).all(|w| !w[1].starts_with(w[0]));
        let mass: BigRational = self.atoms().map(Clopen::mass).sum();
        prefix_free && mass.is_one()
    }

    pub fn verify(&self) -> Report {
        let mut r = Report::new("gamma partition");
        r.check("atoms nonempty", self.atoms().all(|a| !a.is_empty()), "empty atom");
        r.check("atoms partition X", self.partitions_space(), "atoms overlap or miss part of X");
        let mut checked = 0;
        for (id, o) in self.orbits() {
            for (j, a) in o.atoms.iter().enumerate() {
                checked += 1;
                let ok = match (self.mode, &o.witnesses[j]) {
                    (Mode::Sim, Some(w)) => w.apply(o.rep()).as_ref() == Some(a),
                    (Mode::Sim, None) => false,
                    (Mode::SimStar, _) => {
                        let m = self.measures.as_ref().expect("sim-star partitions carry measures");
                        compare_measures(o.rep(), a, m) == Comparison::AllEq
                    }
                };
                if !ok {
                    r.fail("intra-orbit equivalence", format!("orbit {id}, atom {a}"));
                }
            }
        }
        r.summarize("intra-orbit equivalence", checked);
        r
    }

    /// `self` refines `coarse`: atoms nest, and every orbit of `self` holds
    /// equally many atoms inside each atom of a coarse orbit.
    pub fn refines(&self, coarse: &GammaPartition) -> bool {
        self.refinement_report(coarse).passed()
    }

    pub fn refinement_report(&self, coarse: &GammaPartition) -> Report {
        let mut r = Report::new("refinement");
        let nest = self.atoms().all(|a| coarse.atoms().any(|c| a.is_subset(c)));
        r.check("atoms nest", nest, "an atom meets two coarse atoms");
        let mut bad = Vec::new();
        for (id, _) in self.orbits() {
            for (cid, co) in coarse.orbits() {
                let c0 = self.copies(id, co.rep());
                if co.atoms.iter().any(|a| self.copies(id, a) != c0) {
                    bad.push(format!("orbit {id} over coarse orbit {cid}"));
                }
            }
        }
        r.check("copy counts agree along coarse orbits", bad.is_empty(), bad.join("; "));
        r
    }

    pub fn to_json(&self, exceptional: Option<&ExceptionalPairs>) -> serde_json::Value {
        let exc: BTreeSet<usize> = exceptional.map(|e| e.pairs.iter().flat_map(|(a, b)| [*a, *b]).collect()).unwrap_or_default();
        json!({
            "mode": self.mode,
            "orbits": self.orbits().map(|(id, o)| json!({
                "id": id,
                "atoms": o.atoms.iter().map(ToString::to_string).collect::<Vec<_>>(),
                "exceptional": exc.contains(&id),
            })).collect::<Vec<_>>(),
            "exceptional_pairs": exceptional.map(|e| e.pairs.clone()).unwrap_or_default(),
        })
    }
}

/// Orbit pairs `(C_i, D_i)` of a partition, by orbit id.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ExceptionalPairs {
    pub pairs: Vec<(usize, usize)>,
}

impl ExceptionalPairs {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    fn members(&self) -> BTreeSet<usize> {
        self.pairs.iter().flat_map(|(a, b)| [*a, *b]).collect()
    }
}

/// Least stage refining every given partition and compatible with `extra`.
pub fn refining_stage(parts: &[&GammaPartition], extra: &[Clopen], s: &dyn StageSequence, h: &Horizon) -> Result<usize> {
    for n in 0..=h.max_stage {
        h.check()?;
        let st = s.stage(n)?;
        if !extra.iter().chain(parts.iter().flat_map(|p| p.atoms())).all(|c| st.is_compatible(c)) {
            continue;
        }
        let q = GammaPartition::from_stage(&st);
        if parts.iter().all(|p| q.refines(p)) {
            return Ok(n);
        }
    }
    Err(Error::HorizonExceeded(format!("no stage of {} refines the partitions up to stage {}", s.descriptor(), h.max_stage)))
}

/// A stage partition refining both `p` and `q`.
pub fn common_refinement(p: &GammaPartition, q: &GammaPartition, s: &dyn StageSequence, h: &Horizon) -> Result<GammaPartition> {
    if p.mode != Mode::Sim || q.mode != Mode::Sim {
        return Err(Error::HypothesisViolated("common refinement needs sim-mode partitions".into()));
    }
    let n = refining_stage(&[p, q], &[], s, h)?;
    Ok(GammaPartition::from_stage(&*s.stage(n)?))
}

/// One stage element assembled from per-piece equivalences at stage `us`
/// (fullness of `∼_Γ`): maps `⋃ A_i` onto `⋃ B_i` and each `A_i` onto `B_i`.
pub fn assemble_witness(us: &UnitSystem, pairs: &[(Clopen, Clopen)]) -> Option<Vec<usize>> {
    for (a, b) in pairs {
        us.equivalence_witness(a, b)?;
    }
    let refs: Vec<(&Clopen, &Clopen)> = pairs.iter().map(|(a, b)| (a, b)).collect();
    let g = us.injection_witness(&refs)?;
    pairs.iter().all(|(a, b)| us.apply_mapping(&g, a).as_ref() == Some(b)).then_some(g)
}

/// Extra stages searched for an equivalence between the last two orbits.
const EQUIV_PROBE: usize = 4;

struct Ctx<'a> {
    s: &'a dyn StageSequence,
    m: &'a ErgodicList,
    h: &'a Horizon,
}

impl Ctx<'_> {
    fn into_move(&self, a: &Clopen, b: &Clopen) -> Result<Move> {
        self.h.check()?;
        subequivalence_move(self.s, self.m, a, b, self.h.max_stage)
    }

    /// Strict comparison for the descent; equality is the endgame signal.
    fn strictly_smaller(&self, a: &Clopen, b: &Clopen) -> Result<bool> {
        match compare_measures(a, b, self.m) {
            Comparison::AllLt => Ok(true),
            Comparison::AllEq => Ok(false),
            _ => Err(Error::HypothesisViolated(format!("{a} is not dominated by {b}; the pair is not measure-equivalent"))),
        }
    }
}

fn region(q: &GammaPartition, exc: &[(usize, usize)]) -> Vec<usize> {
    let ex: BTreeSet<usize> = exc.iter().flat_map(|(a, b)| [*a, *b]).collect();
    q.ids().into_iter().filter(|i| !ex.contains(i)).collect()
}

/// Maps the representatives of `src` into those of `dst` by one element,
/// cuts both sides along the image, and joins matching fragments.
fn absorb(q: &mut GammaPartition, src: &[usize], dst: &[usize], ctx: &Ctx) -> Result<()> {
    let a = q.rep_union(src);
    let b = q.rep_union(dst);
    let g = ctx.into_move(&a, &b)?;
    let ginv = g.inverse().ok_or_else(|| Error::NotAutomorphism("witness is not invertible".into()))?;
    let undefined = || Error::NotAutomorphism("witness undefined on a representative".into());
    let imgs = src.iter().map(|i| g.apply(q.orbit(*i).rep()).ok_or_else(undefined)).collect::<Result<Vec<_>>>()?;
    let img_all = Clopen::union_all(&q.bases, imgs.iter());
    let dst_reps: Vec<Clopen> = dst.iter().map(|j| q.orbit(*j).rep().clone()).collect();
    let mut dst_ids = Vec::new();
    for (&j, rep) in dst.iter().zip(&dst_reps) {
        let mut pieces: Vec<Clopen> = imgs.iter().map(|im| im.intersection(rep)).collect();
        pieces.push(rep.difference(&img_all));
        dst_ids.push(q.cut_by_rep(j, &pieces)?);
    }
    for (k, &i) in src.iter().enumerate() {
        let pieces = dst_reps
            .iter()
            .map(|rep| ginv.apply(&imgs[k].intersection(rep)).ok_or_else(undefined))
            .collect::<Result<Vec<_>>>()?;
        let ids = q.cut_by_rep(i, &pieces)?;
        for (jj, sid) in ids.into_iter().enumerate() {
            if let (Some(sid), Some(did)) = (sid, dst_ids[jj][k]) {
                q.join_orbits(sid, did, Some(&g.restrict(&pieces[jj])))?;
            }
        }
    }
    Ok(())
}

/// Splits a small equivalent fragment off both orbits of pair `j` and joins
/// the two fragments outside the exceptional orbits. Returns the new orbit.
fn split_pair_fragment(q: &mut GammaPartition, exc: &mut [(usize, usize)], j: usize, ctx: &Ctx) -> Result<usize> {
    let (c, d) = exc[j];
    let (alpha, beta) = (q.orbit(c).rep().clone(), q.orbit(d).rep().clone());
    let tau = small_cylinder(&alpha, |t| measure_lt_scaled(ctx.m, t, 1, &beta));
    let g = ctx.into_move(&tau, &beta)?;
    let pi = g.apply(&tau).expect("defined on its domain");
    let ci = q.cut_by_rep(c, &[tau.clone(), alpha.difference(&tau)])?;
    let di = q.cut_by_rep(d, &[pi.clone(), beta.difference(&pi)])?;
    let y = q.join_orbits(ci[0].expect("nonempty"), di[0].expect("nonempty"), Some(&g))?;
    exc[j] = (ci[1].expect("proper fragment"), di[1].expect("proper fragment"));
    Ok(y)
}

/// The first part of the refinement for one pair, run on the orbits outside
/// the exceptional pairs. Returns a new exceptional pair if one is needed.
fn balance_in_region(q: &mut GammaPartition, exc: &[(usize, usize)], u: &Clopen, v: &Clopen, ctx: &Ctx) -> Result<Option<(usize, usize)>> {
    loop {
        ctx.h.check()?;
        let d: Vec<(usize, i64)> = region(q, exc).into_iter().map(|i| Ok((i, q.imbalance(i, u, v)?))).collect::<Result<_>>()?;
        let n = d.iter().map(|(_, x)| x.abs()).max().unwrap_or(0);
        if n == 0 {
            return Ok(None);
        }
        let pick = |f: &dyn Fn(i64) -> bool| d.iter().filter(|(_, x)| f(*x)).map(|(i, _)| *i).collect::<Vec<_>>();
        let top = pick(&|x| x == n);
        let neg = pick(&|x| x < 0);
        if !top.is_empty() && ctx.strictly_smaller(&q.rep_union(&top), &q.rep_union(&neg))? {
            absorb(q, &top, &neg, ctx)?;
            continue;
        }
        let bottom = pick(&|x| x == -n);
        let pos = pick(&|x| x > 0);
        if !bottom.is_empty() && ctx.strictly_smaller(&q.rep_union(&bottom), &q.rep_union(&pos))? {
            absorb(q, &bottom, &pos, ctx)?;
            continue;
        }
        return endgame(q, exc, u, v, n, ctx);
    }
}

/// Every unbalanced orbit has imbalance `±n`: reduce to one orbit on each
/// side, then join them if they turn out to be equivalent.
fn endgame(q: &mut GammaPartition, exc: &[(usize, usize)], u: &Clopen, v: &Clopen, n: i64, ctx: &Ctx) -> Result<Option<(usize, usize)>> {
    let sides = |q: &GammaPartition| -> Result<(Vec<usize>, Vec<usize>)> {
        let (mut top, mut bottom) = (Vec::new(), Vec::new());
        for i in region(q, exc) {
            match q.imbalance(i, u, v)? {
                0 => {}
                x if x == n => top.push(i),
                x if x == -n => bottom.push(i),
                x => return Err(Error::HypothesisViolated(format!("imbalance {x} left in the endgame"))),
            }
        }
        Ok((top, bottom))
    };
    let (top, bottom) = sides(q)?;
    if top.is_empty() || bottom.is_empty() {
        return Err(Error::HypothesisViolated("one-sided imbalance: the pair is not measure-equivalent".into()));
    }
    if top.len() > 1 {
        absorb(q, &top[1..], &bottom, ctx)?;
    }
    let (top, bottom) = sides(q)?;
    if bottom.len() > 1 {
        absorb(q, &bottom[1..], &top, ctx)?;
    }
    let (top, bottom) = sides(q)?;
    let ([a], [b]) = (top.as_slice(), bottom.as_slice()) else {
        return Err(Error::HypothesisViolated("endgame did not reduce to two orbits".into()));
    };
    let (ra, rb) = (q.orbit(*a).rep().clone(), q.orbit(*b).rep().clone());
    // A bounded probe: missing an equivalence only costs an exceptional pair.
    let probe = ctx.h.max_stage.min(ra.depth().max(rb.depth()) + EQUIV_PROBE);
    if let Ok(g) = orbit_equiv_clopen(ctx.s, &ra, &rb, probe) {
        let w = element_on(&*ctx.s.stage(g.stage)?, &g.mapping, &ra)?;
        q.join_orbits(*a, *b, Some(&w))?;
        return Ok(None);
    }
    Ok(Some((*a, *b)))
}

/// Three-way join of small fragments of `C_i`, `D_i` and `δ`; the new orbit
/// has imbalance `s_i + d_δ`.
fn triple_join(q: &mut GammaPartition, exc: &mut [(usize, usize)], i: usize, delta: usize, ctx: &Ctx) -> Result<usize> {
    let (c, d) = exc[i];
    let (alpha, beta, r) = (q.orbit(c).rep().clone(), q.orbit(d).rep().clone(), q.orbit(delta).rep().clone());
    let tau = small_cylinder(&alpha, |t| measure_lt_scaled(ctx.m, t, 1, &beta) && measure_lt_scaled(ctx.m, t, 1, &r));
    let g1 = ctx.into_move(&tau, &beta)?;
    let g2 = ctx.into_move(&tau, &r)?;
    let (pi, rho) = (g1.apply(&tau).expect("defined"), g2.apply(&tau).expect("defined"));
    let ci = q.cut_by_rep(c, &[tau.clone(), alpha.difference(&tau)])?;
    let di = q.cut_by_rep(d, &[pi.clone(), beta.difference(&pi)])?;
    let ri = q.cut_by_rep(delta, &[rho.clone(), r.difference(&rho)])?;
    let o = q.join_orbits(ci[0].expect("nonempty"), di[0].expect("nonempty"), Some(&g1))?;
    let o = q.join_orbits(o, ri[0].expect("nonempty"), Some(&g2))?;
    exc[i] = (ci[1].expect("proper"), di[1].expect("proper"));
    Ok(o)
}

/// Orbitwise matching of the atoms of `a` and `b` at stage `us`: the move
/// carrying the matched atoms of `a` onto those of `b`, and the unmatched
/// remainders. At least one matched pair is left over so that the remainders
/// stay nonempty.
fn stage_matching(us: &UnitSystem, a: &Clopen, b: &Clopen) -> Option<(Move, Clopen, Clopen)> {
    let (xa, xb) = (us.decompose(a)?, us.decompose(b)?);
    let mut by_orbit: BTreeMap<usize, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for &x in &xa {
        by_orbit.entry(us.orbit_of(x)).or_default().0.push(x);
    }
    for &y in &xb {
        by_orbit.entry(us.orbit_of(y)).or_default().1.push(y);
    }
    let mut pairs: Vec<(usize, usize)> = by_orbit.values().flat_map(|(p, q)| p.iter().copied().zip(q.iter().copied())).collect();
    if pairs.len() == xa.len() && pairs.len() == xb.len() {
        pairs.pop()?;
    }
    let mut mv = Move::identity(&us.bases);
    for &(x, y) in &pairs {
        mv.pieces.push((us.atoms[x].clone(), us.elem_between(x, y)));
    }
    let ra = Clopen::union_all(&us.bases, xa.iter().filter(|x| !pairs.iter().any(|p| p.0 == **x)).map(|x| &us.atoms[*x]));
    let rb = Clopen::union_all(&us.bases, xb.iter().filter(|y| !pairs.iter().any(|p| p.1 == **y)).map(|y| &us.atoms[*y]));
    Some((mv, ra, rb))
}

/// Matches the bulk of `rep C_i` with `rep D_i` atom by atom at a deep
/// enough stage, leaving remainders with `k·measure < measure(bound)`. The
/// bulk becomes an ordinary orbit; the remainders form the new pair.
fn shrink_pair(q: &mut GammaPartition, exc: &mut [(usize, usize)], i: usize, bound: &Clopen, k: usize, ctx: &Ctx) -> Result<()> {
    let (c, d) = exc[i];
    let (alpha, beta) = (q.orbit(c).rep().clone(), q.orbit(d).rep().clone());
    for n in 0..=ctx.h.max_stage {
        ctx.h.check()?;
        let us = ctx.s.stage(n)?;
        let Some((w, ra, rb)) = stage_matching(&us, &alpha, &beta) else { continue };
        if !measure_lt_scaled(ctx.m, &ra, k, bound) || !measure_lt_scaled(ctx.m, &rb, k, bound) {
            continue;
        }
        let (bulk_a, bulk_b) = (alpha.difference(&ra), beta.difference(&rb));
        if w.apply(&bulk_a).as_ref() != Some(&bulk_b) {
            return Err(Error::NotAutomorphism("stage matching does not carry the bulk across".into()));
        }
        let ci = q.cut_by_rep(c, &[bulk_a, ra])?;
        let di = q.cut_by_rep(d, &[bulk_b, rb])?;
        q.join_orbits(ci[0].expect("nonempty bulk"), di[0].expect("nonempty bulk"), Some(&w))?;
        exc[i] = (ci[1].expect("remainder"), di[1].expect("remainder"));
        return Ok(());
    }
    Err(Error::HorizonExceeded(format!("{alpha} and {beta} do not match up to small remainders below stage {}", ctx.h.max_stage)))
}

/// Brings every exceptional pair to zero total imbalance for `(u, v)`.
///
/// The reduction of the largest pair sum `M` joins the remainder of `C_1`
/// with a fragment of an orbit `δ` of opposite imbalance `K`, `0 < K < 2M`;
/// the bulk of `C_1` and `D_1` is first matched by an equal-measure exchange
/// so that only small, equivalent-measure remainders stay exceptional.
fn reduce_pair_sums(q: &mut GammaPartition, exc: &mut [(usize, usize)], u: &Clopen, v: &Clopen, ctx: &Ctx) -> Result<()> {
    loop {
        ctx.h.check()?;
        let sums = exc.iter().map(|(c, d)| Ok(q.imbalance(*c, u, v)? + q.imbalance(*d, u, v)?)).collect::<Result<Vec<i64>>>()?;
        let mm = sums.iter().map(|x| x.abs()).max().unwrap_or(0);
        if mm == 0 {
            return Ok(());
        }
        let i1 = sums.iter().position(|x| x.abs() == mm).expect("max exists");
        let sign = sums[i1].signum();
        let mut delta = None;
        for id in region(q, exc) {
            if sign * q.imbalance(id, u, v)? < 0 {
                delta = Some(id);
                break;
            }
        }
        let mut delta = match delta {
            Some(id) => id,
            None => {
                let j = sums
                    .iter()
                    .position(|x| sign * x < 0)
                    .ok_or_else(|| Error::HypothesisViolated("pair sums all have one sign".into()))?;
                split_pair_fragment(q, exc, j, ctx)?
            }
        };
        let mut k = -sign * q.imbalance(delta, u, v)?;
        while k >= 2 * mm {
            delta = triple_join(q, exc, i1, delta, ctx)?;
            k -= mm;
        }
        let r = q.orbit(delta).rep().clone();
        shrink_pair(q, exc, i1, &r, 1, ctx)?;
        let (c, d) = exc[i1];
        let ra = q.orbit(c).rep().clone();
        let g = ctx.into_move(&ra, &r)?;
        let rho = g.apply(&ra).expect("defined");
        let ri = q.cut_by_rep(delta, &[rho.clone(), r.difference(&rho)])?;
        let cnew = q.join_orbits(c, ri[0].expect("nonempty"), Some(&g))?;
        exc[i1] = (cnew, d);
    }
}

/// `N(Q) = Σ_i max_O |n_O(U_i) − n_O(V_i)|`.
pub fn total_defect(q: &GammaPartition, us: &[Clopen], vs: &[Clopen]) -> Result<usize> {
    let mut total = 0;
    for (u, v) in us.iter().zip(vs) {
        let mut best = 0;
        for id in q.ids() {
            best = best.max(q.imbalance(id, u, v)?.unsigned_abs() as usize);
        }
        total += best;
    }
    Ok(total)
}

/// The copies clause: every exceptional orbit holds more than `3hN` copies
/// of every orbit of `p`.
fn strengthen(q: &mut GammaPartition, exc: &mut Vec<(usize, usize)>, p: &GammaPartition, us: &[Clopen], vs: &[Clopen], ctx: &Ctx) -> Result<()> {
    if exc.is_empty() {
        return Ok(());
    }
    let h = p.atom_count();
    let need = 3 * h * total_defect(q, us, vs)? + 1;
    let coarse: Vec<Clopen> = p.orbits().map(|(_, o)| o.rep().clone()).collect();
    let covered = |q: &GammaPartition, exc: &[(usize, usize)]| coarse.iter().all(|c| region(q, exc).iter().any(|&i| q.copies(i, c) > 0));
    if !covered(q, exc) {
        for j in 0..exc.len() {
            split_pair_fragment(q, exc, j, ctx)?;
        }
        if !covered(q, exc) {
            return Err(Error::ChoiceExhausted("some coarse orbit has no fragment outside the exceptional orbits".into()));
        }
    }
    // For every coarse orbit, the ordinary orbit with most copies of it, and
    // how many fragments of that orbit the joined orbit needs.
    let mut wanted: BTreeMap<usize, usize> = BTreeMap::new();
    for c in &coarse {
        let (best, copies) = region(q, exc)
            .into_iter()
            .map(|i| (i, q.copies(i, c)))
            .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
            .expect("covered");
        let k = need.div_ceil(copies);
        let e = wanted.entry(best).or_default();
        *e = (*e).max(k);
    }
    let chosen: Vec<(usize, usize)> = wanted.into_iter().collect();
    let first_rep = q.orbit(chosen[0].0).rep().clone();
    let reps: Vec<Clopen> = chosen.iter().map(|(i, _)| q.orbit(*i).rep().clone()).collect();
    let tau = small_cylinder(&first_rep, |t| chosen.iter().zip(&reps).all(|((_, k), r)| measure_lt_scaled(ctx.m, t, k + 1, r)));
    let mut fragments: Vec<(usize, Option<Move>)> = Vec::new();
    for ((id, k), rep) in chosen.iter().zip(&reps) {
        let mut pieces = Vec::new();
        let mut moves = Vec::new();
        let mut used = Clopen::empty(&q.bases);
        for j in 0..*k {
            if j == 0 && *id == chosen[0].0 {
                pieces.push(tau.clone());
                moves.push(None);
                used = tau.clone();
                continue;
            }
            let g = ctx.into_move(&tau, &rep.difference(&used))?;
            let rho = g.apply(&tau).expect("defined");
            used = used.union(&rho);
            pieces.push(rho);
            moves.push(Some(g));
        }
        pieces.push(rep.difference(&used));
        let ids = q.cut_by_rep(*id, &pieces)?;
        for (fid, mv) in ids.into_iter().zip(moves) {
            fragments.push((fid.expect("nonempty fragment"), mv));
        }
    }
    let mut delta = fragments[0].0;
    for (fid, mv) in &fragments[1..] {
        delta = q.join_orbits(delta, *fid, mv.as_ref())?;
    }
    // Shrink the pairs until all of them fit into the joined orbit, then
    // attach a fragment of it to every exceptional orbit.
    let k = exc.len();
    let r = q.orbit(delta).rep().clone();
    for i in 0..k {
        let (c, d) = exc[i];
        if !measure_lt_scaled(ctx.m, q.orbit(c).rep(), 2 * k, &r) || !measure_lt_scaled(ctx.m, q.orbit(d).rep(), 2 * k, &r) {
            shrink_pair(q, exc, i, &r, 2 * k, ctx)?;
        }
    }
    let mut pieces = Vec::new();
    let mut moves = Vec::new();
    let mut used = Clopen::empty(&q.bases);
    for &(c, d) in exc.iter() {
        for x in [c, d] {
            let rep = q.orbit(x).rep().clone();
            let g = ctx.into_move(&rep, &r.difference(&used))?;
            let rho = g.apply(&rep).expect("defined");
            used = used.union(&rho);
            pieces.push(rho);
            moves.push(g);
        }
    }
    pieces.push(r.difference(&used));
    let ids = q.cut_by_rep(delta, &pieces)?;
    for (i, pair) in exc.iter_mut().enumerate() {
        let c = q.join_orbits(pair.0, ids[2 * i].expect("fragment"), Some(&moves[2 * i]))?;
        let d = q.join_orbits(pair.1, ids[2 * i + 1].expect("fragment"), Some(&moves[2 * i + 1]))?;
        *pair = (c, d);
    }
    Ok(())
}

/// A refinement `Q` of `p` for which `(Ū, V̄)` are almost `Q`-equivalent,
/// with exceptional orbits carrying more than `3hN(Q)` copies of every orbit
/// of `p`. Choices are canonical; the output is one valid witness.
pub fn almost_equivalent_refine(
    p: &GammaPartition,
    us: &[Clopen],
    vs: &[Clopen],
    s: &dyn StageSequence,
    m: &ErgodicList,
    h: &Horizon,
) -> Result<(GammaPartition, ExceptionalPairs)> {
    almost_equivalent_refine_from(p, us, vs, &[], 0, s, m, h)
}

/// [`almost_equivalent_refine`] starting from a stage at least `min_stage`
/// that is also compatible with every clopen of `extra`.
#[allow(clippy::too_many_arguments)]
pub fn almost_equivalent_refine_from(
    p: &GammaPartition,
    us: &[Clopen],
    vs: &[Clopen],
    extra: &[Clopen],
    min_stage: usize,
    s: &dyn StageSequence,
    m: &ErgodicList,
    h: &Horizon,
) -> Result<(GammaPartition, ExceptionalPairs)> {
    if us.len() != vs.len() {
        return Err(Error::HypothesisViolated("tuples of different lengths".into()));
    }
    if p.mode != Mode::Sim {
        return Err(Error::HypothesisViolated("the starting partition must be in sim mode".into()));
    }
    for (u, v) in us.iter().zip(vs) {
        if compare_measures(u, v, m) != Comparison::AllEq {
            return Err(Error::HypothesisViolated(format!("{u} and {v} differ in measure")));
        }
    }
    let ctx = Ctx { s, m, h };
    let extra: Vec<Clopen> = us.iter().chain(vs).chain(extra).cloned().collect();
    let n = refining_stage(&[p], &extra, s, h)?.max(min_stage);
    let n = (n..=h.max_stage.max(n))
        .find(|&n| s.stage(n).map(|st| GammaPartition::from_stage(&st).refines(p)).unwrap_or(false))
        .ok_or_else(|| Error::HorizonExceeded(format!("no stage from {n} refines the partition")))?;
    let mut q = GammaPartition::from_stage(&*s.stage(n)?);
    let mut exc: Vec<(usize, usize)> = Vec::new();
    for (u, v) in us.iter().zip(vs) {
        if !exc.is_empty() {
            reduce_pair_sums(&mut q, &mut exc, u, v, &ctx)?;
        }
        if let Some(pair) = balance_in_region(&mut q, &exc, u, v, &ctx)? {
            exc.push(pair);
        }
    }
    strengthen(&mut q, &mut exc, p, us, vs, &ctx)?;
    Ok((q, ExceptionalPairs { pairs: exc }))
}

/// Re-verifies every clause of the almost-equivalence statement by counting.
pub fn verify_almost_equivalence(
    p: &GammaPartition,
    q: &GammaPartition,
    exc: &ExceptionalPairs,
    us: &[Clopen],
    vs: &[Clopen],
    m: &ErgodicList,
) -> Report {
    let mut r = Report::new("almost equivalence");
    r.merge(q.verify());
    r.merge(q.refinement_report(p));
    r.check("k is at most the number of pairs", exc.len() <= us.len(), format!("{} pairs for {} inputs", exc.len(), us.len()));
    let members = exc.members();
    r.check(
        "exceptional orbits are distinct orbits",
        members.len() == 2 * exc.len() && members.iter().all(|i| q.orbits.contains_key(i)),
        "an exceptional orbit is repeated or missing",
    );
    if !r.passed() {
        return r;
    }
    let mut compatible = true;
    for (j, (u, v)) in us.iter().zip(vs).enumerate() {
        for id in q.ids() {
            match q.imbalance(id, u, v) {
                Err(_) => {
                    compatible = false;
                    r.fail("partition compatible with every U_j and V_j", format!("pair {j}"));
                }
                Ok(d) if d != 0 && !members.contains(&id) => r.fail("ordinary orbits are balanced", format!("orbit {id}, pair {j}: {d}")),
                Ok(_) => {}
            }
        }
        if !compatible {
            break;
        }
        for &(c, d) in &exc.pairs {
            let (dc, dd) = (q.imbalance(c, u, v).unwrap_or(0), q.imbalance(d, u, v).unwrap_or(0));
            if dc != -dd {
                r.fail("exceptional pairs are balanced", format!("({c}, {d}) for pair {j}: {dc} vs {dd}"));
            }
        }
    }
    r.summarize("partition compatible with every U_j and V_j", us.len());
    r.summarize("ordinary orbits are balanced", q.orbit_len() * us.len());
    r.summarize("exceptional pairs are balanced", exc.len() * us.len());
    for &(c, d) in &exc.pairs {
        if compare_measures(q.orbit(c).rep(), q.orbit(d).rep(), m) != Comparison::AllEq {
            r.fail("exceptional representatives have equal measure", format!("({c}, {d})"));
        }
    }
    r.summarize("exceptional representatives have equal measure", exc.len());
    if compatible {
        let hn = 3 * p.atom_count() * total_defect(q, us, vs).unwrap_or(0);
        for &x in &members {
            for (pid, po) in p.orbits() {
                let copies = q.copies(x, po.rep());
                if copies <= hn {
                    r.fail("exceptional orbits carry more than 3hN copies", format!("orbit {x} has {copies} copies of {pid}, 3hN = {hn}"));
                }
            }
        }
        r.summarize("exceptional orbits carry more than 3hN copies", members.len() * p.orbit_len());
    }
    r
}

/// Every unordered pair of distinct, equal-measure clopens of depth `d`, in
/// canonical order.
pub fn measure_equivalent_pairs(bases: &Arc<Bases>, m: &ErgodicList, d: usize) -> Vec<(Clopen, Clopen)> {
    let words = bases.all_words(d);
    assert!(words.len() <= 16, "pair enumeration is exhaustive and meant for small depths");
    let all: Vec<Clopen> = (0u32..1 << words.len())
        .map(|mask| {
            let ws = words.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, w)| w.clone());
            Clopen::normalize(bases, ws).expect("valid words")
        })
        .collect();
    let mut out = Vec::new();
    for (i, u) in all.iter().enumerate() {
        for v in &all[i + 1..] {
            if compare_measures(u, v, m) == Comparison::AllEq {
                out.push((u.clone(), v.clone()));
            }
        }
    }
    out.sort_by(|a, b| (a.0.depth().max(a.1.depth()), &a.0, &a.1).cmp(&(b.0.depth().max(b.1.depth()), &b.0, &b.1)));
    out
}

/// A stage whose orbits are totally ordered.
#[derive(Clone, Debug)]
pub struct OrderedStage {
    pub stage: usize,
    pub system: Arc<UnitSystem>,
    /// Atom indices per orbit, from base to top.
    pub order: Vec<Vec<usize>>,
}

impl OrderedStage {
    pub fn base(&self) -> Clopen {
        Clopen::union_all(&self.system.bases, self.order.iter().map(|o| &self.system.atoms[o[0]]))
    }

    pub fn top(&self) -> Clopen {
        Clopen::union_all(&self.system.bases, self.order.iter().map(|o| &self.system.atoms[*o.last().expect("nonempty")]))
    }

    /// Successor atom and the exact map onto it, for atoms off the top.
    fn successors(&self) -> Vec<Option<(usize, Elem)>> {
        let mut out = vec![None; self.system.len()];
        for o in &self.order {
            for w in o.windows(2) {
                out[w[0]] = Some((w[1], self.system.elem_between(w[0], w[1])));
            }
        }
        out
    }

    pub fn to_kr(&self, sys: Arc<dyn SystemHandle>) -> KRPartition {
        let cols = self.order.iter().map(|o| o.iter().map(|&a| self.system.atoms[a].clone()).collect()).collect();
        KRPartition::from_columns(sys, cols)
    }
}

/// Copies of the coarse orbits inside `fine`, transported by the coarse
/// charts. `None` if some transported atom is not a fine atom of the same
/// fine orbit, or the copies do not exhaust the fine atoms.
fn copies_of(coarse: &OrderedStage, fine: &UnitSystem) -> Option<Vec<(usize, usize, Vec<usize>)>> {
    let cs = &coarse.system;
    let parent = cs.parents_in(fine)?;
    let mut used = vec![false; fine.len()];
    let mut out = Vec::new();
    for (co, order) in coarse.order.iter().enumerate() {
        let q0 = order[0];
        for c in (0..fine.len()).filter(|&c| parent[c] == q0) {
            let mut copy = vec![c];
            for &qj in &order[1..] {
                let img = cs.elem_between(q0, qj).apply(&fine.atoms[c])?;
                let parts = fine.decompose(&img)?;
                let [d] = parts.as_slice() else { return None };
                if fine.orbit_of(*d) != fine.orbit_of(c) {
                    return None;
                }
                copy.push(*d);
            }
            for &a in &copy {
                if std::mem::replace(&mut used[a], true) {
                    return None;
                }
            }
            out.push((fine.orbit_of(c), co, copy));
        }
    }
    used.iter().all(|&u| u).then_some(out)
}

fn atoms_within_depth(us: &UnitSystem, d: usize) -> bool {
    us.atoms.iter().all(|a| {
        let w = a.words();
        w.iter().all(|x| x.len() >= d && x[..d] == w[0][..d])
    })
}

/// The next ordered stage: fine orbits are concatenations of copies of
/// coarse orbits, each starting with a copy of the first coarse orbit and
/// ending with a copy of the last one.
fn order_next(coarse: &OrderedStage, s: &dyn StageSequence, level: usize, h: &Horizon) -> Result<OrderedStage> {
    let first = 0;
    let last = coarse.order.len() - 1;
    for n in coarse.stage + 1..=h.max_stage {
        h.check()?;
        let fine = s.stage(n)?;
        if !atoms_within_depth(&fine, level) {
            continue;
        }
        let Some(copies) = copies_of(coarse, &fine) else { continue };
        let mut order = Vec::with_capacity(fine.orbits.len());
        let mut ok = true;
        for fo in 0..fine.orbits.len() {
            let mine: Vec<&(usize, usize, Vec<usize>)> = copies.iter().filter(|c| c.0 == fo).collect();
            let head = mine.iter().position(|c| c.1 == first);
            let tail = mine.iter().rposition(|c| c.1 == last);
            match (head, tail) {
                (Some(a), Some(b)) if a != b => {
                    let mut seq = mine[a].2.clone();
                    for (k, c) in mine.iter().enumerate() {
                        if k != a && k != b {
                            seq.extend(&c.2);
                        }
                    }
                    seq.extend(&mine[b].2);
                    order.push(seq);
                }
                _ => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            return Ok(OrderedStage { stage: n, system: fine, order });
        }
    }
    Err(Error::HorizonExceeded(format!("no ordered refinement of stage {} below stage {}", coarse.stage, h.max_stage)))
}

/// Checks the interval condition and the nesting of bases and tops.
pub fn verify_ordered(coarse: &OrderedStage, fine: &OrderedStage) -> Report {
    let mut r = Report::new(format!("ordered stage {}", fine.stage));
    let Some(copies) = copies_of(coarse, &fine.system) else {
        r.fail("fine orbits are made of coarse copies", "transport failed");
        return r;
    };
    let mut bad = 0;
    for (fo, _, copy) in &copies {
        let seq = &fine.order[*fo];
        let pos: Vec<usize> = copy.iter().map(|a| seq.iter().position(|b| b == a).expect("atom in its orbit")).collect();
        if pos.windows(2).any(|w| w[1] != w[0] + 1) {
            bad += 1;
        }
    }
    r.check("coarse copies are intervals in coarse order", bad == 0, format!("{bad} copies out of order"));
    let (cb, ct) = (coarse.base(), coarse.top());
    let first = &coarse.system.atoms[coarse.order[0][0]];
    let last = &coarse.system.atoms[*coarse.order.last().expect("orbits").last().expect("atoms")];
    r.check("bases inside the first coarse base", fine.base().is_subset(first) && first.is_subset(&cb), "base leaves the coarse base");
    r.check("tops inside the last coarse top", fine.top().is_subset(last) && last.is_subset(&ct), "top leaves the coarse top");
    r
}

/// The successor map of an ordered refining sequence, extended lazily.
#[derive(Debug)]
pub struct OrderedSystem {
    source: Arc<dyn StageSequence>,
    bases: Arc<Bases>,
    horizon: Horizon,
    levels: Mutex<Vec<OrderedStage>>,
}

impl OrderedSystem {
    pub fn new(source: Arc<dyn StageSequence>, horizon: Horizon) -> Result<OrderedSystem> {
        let st = source.stage(0)?;
        let order = st.orbits.clone();
        let bases = source.bases();
        let level0 = OrderedStage { stage: 0, system: st, order };
        Ok(OrderedSystem { source, bases, horizon, levels: Mutex::new(vec![level0]) })
    }

    /// Ordered stage whose atoms lie inside depth-`level` cylinders.
    pub fn level(&self, level: usize) -> Result<OrderedStage> {
        let mut lv = self.levels.lock().expect("levels poisoned");
        while lv.len() <= level {
            let next = order_next(lv.last().expect("level 0"), self.source.as_ref(), lv.len(), &self.horizon)?;
            lv.push(next);
        }
        Ok(lv[level].clone())
    }

    /// The nested base point, read off the base at `level`.
    pub fn base_point(&self, level: usize) -> Result<SymbolicPoint> {
        let l = self.level(level)?;
        Ok(least_point(&l.system.atoms[l.order[0][0]]))
    }

    fn forward_off(&self, a: &Clopen, l: &OrderedStage, forward: bool) -> Option<Clopen> {
        let succ = l.successors();
        let mut out = Clopen::empty(&self.bases);
        if forward {
            for (x, s) in succ.iter().enumerate() {
                let part = a.intersection(&l.system.atoms[x]);
                if part.is_empty() {
                    continue;
                }
                let (_, e) = s.as_ref()?;
                out = out.union(&e.apply(&part)?);
            }
        } else {
            for (x, s) in succ.iter().enumerate() {
                let Some((y, e)) = s else { continue };
                let part = a.intersection(&l.system.atoms[*y]);
                if !part.is_empty() {
                    out = out.union(&e.inverse().apply(&part)?);
                }
                let _ = x;
            }
            let covered: Clopen = Clopen::union_all(&self.bases, succ.iter().flatten().map(|(y, _)| &l.system.atoms[*y]));
            if !a.difference(&covered).is_empty() {
                return None;
            }
        }
        Some(out)
    }
}

impl SystemHandle for OrderedSystem {
    fn descriptor(&self) -> String {
        format!("ordered({})", self.source.descriptor())
    }

    fn bases(&self) -> &Arc<Bases> {
        &self.bases
    }

    fn apply_clopen(&self, a: &Clopen, dir: Direction) -> Clopen {
        if a.is_empty() || a.is_full() {
            return a.clone();
        }
        let forward = dir == Direction::Forward;
        let l = self.level(a.depth()).expect("ordered levels within the horizon");
        if let Some(img) = self.forward_off(a, &l, forward) {
            return img;
        }
        let img = self.forward_off(&a.complement(), &l, forward).expect("the top meets one side only");
        img.complement()
    }

    fn apply_point(&self, p: &SymbolicPoint, dir: Direction) -> SymbolicPoint {
        let forward = dir == Direction::Forward;
        let (start, len) = p.joint_horizon(&self.bases);
        for lev in 1..=start + 2 * len + 8 {
            let l = self.level(lev).expect("ordered levels within the horizon");
            let succ = l.successors();
            let Some(x) = l.system.locate_point(p) else { continue };
            if forward {
                if let Some((_, e)) = &succ[x] {
                    return e.apply_point(p).expect("atoms are mapped onto atoms");
                }
            } else if let Some((from, (_, e))) = succ.iter().enumerate().find_map(|(i, s)| s.as_ref().filter(|(y, _)| *y == x).map(|s| (i, s))) {
                let _ = from;
                return e.inverse().apply_point(p).expect("atoms are mapped onto atoms");
            }
        }
        // `p` stayed in the top (or base): it is the limit point there.
        let lev = start + 2 * len + 8;
        let l = self.level(lev).expect("levels");
        if forward {
            least_point(&l.system.atoms[l.order[0][0]])
        } else {
            let t = &l.system.atoms[*l.order.last().expect("orbits").last().expect("atoms")];
            let w = t.words().last().expect("nonempty").clone();
            let per: Vec<u8> = (w.len()..w.len() + len.max(1)).map(|i| self.bases.at(i) - 1).collect();
            SymbolicPoint::new(w, per)
        }
    }
}

/// `(φ, x)` with `Γ = Γ_x(φ)` at every computed depth: the successor map of
/// ordered refinements of `s` and its nested base point.
pub fn ordered_sequence_to_system(s: Arc<dyn StageSequence>, depth: usize, h: &Horizon) -> Result<(Arc<OrderedSystem>, SymbolicPoint)> {
    let sys = Arc::new(OrderedSystem::new(s, h.clone())?);
    sys.level(depth)?;
    let x = sys.base_point(depth)?;
    Ok((sys, x))
}

/// Zero used for mass sums in tests and reports.
pub fn zero_mass() -> BigRational {
    BigRational::zero()
}
