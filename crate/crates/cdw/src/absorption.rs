//! Orbit gluing at finite depth: exceptional stage sequences, the involution
//! `π` with its singular atoms, the saturation pipeline, and the stages of
//! `Γ_Y = ⋂_{y ∈ Y} Γ_y(φ)`.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde_json::json;

use crate::ample::{check_distinct_orbits, GammaX, cylinder_around, orbit_equiv_clopen, StageCache, StageSequence, UnitSystem, ORBIT_PROBE_HORIZON};
use crate::balance::{almost_equivalent_refine_from, measure_equivalent_pairs, verify_almost_equivalence, ExceptionalPairs, GammaPartition};
use crate::cancel::Horizon;
use crate::clopen::{Bases, Clopen, SymbolicPoint};
use crate::dynamics::SystemHandle;
use crate::error::{Error, Result};
use crate::kr::tower_over;
use crate::krieger::{Driver, PointedMap, SparseSet};
use crate::measure::{compare_measures, Comparison, ErgodicList};
use crate::report::Report;

/// Stages of `Γ_Y` for a finite set `Y` of points in distinct orbits.
///
/// Stage `n ≥ 1` is the tower over `U = ⋃_y [y|e]`, compatible with depth-`n`
/// cylinders, where `e ≥ n` is least with `U ∩ φ^i(U) = ∅` for `1 ≤ i ≤ N`.
/// Stage 0 is the trivial system.
#[derive(Debug)]
pub struct SplitOrbit {
    pub system: Arc<dyn SystemHandle>,
    pub points: Vec<SymbolicPoint>,
    pub separation: usize,
    cache: StageCache,
}

impl SplitOrbit {
    pub fn new(system: Arc<dyn SystemHandle>, points: Vec<SymbolicPoint>) -> Result<SplitOrbit> {
        SplitOrbit::with_separation(system, points, 1)
    }

    pub fn with_separation(system: Arc<dyn SystemHandle>, mut points: Vec<SymbolicPoint>, separation: usize) -> Result<SplitOrbit> {
        points.sort();
        points.dedup();
        check_distinct_orbits(system.as_ref(), &points, ORBIT_PROBE_HORIZON)?;
        Ok(SplitOrbit { system, points, separation, cache: StageCache::default() })
    }

    fn union_at(&self, e: usize) -> Clopen {
        let b = self.system.bases();
        Clopen::union_all(b, self.points.iter().map(|y| cylinder_around(b, y, e)).collect::<Vec<_>>().iter())
    }

    fn separated(&self, u: &Clopen) -> bool {
        (1..=self.separation as i64).all(|i| u.is_disjoint(&self.system.power_clopen(u, i)))
    }

    /// The base `U` of stage `n`.
    pub fn base(&self, n: usize) -> Clopen {
        if n == 0 {
            return Clopen::full(self.system.bases());
        }
        (n..).map(|e| self.union_at(e)).find(|u| self.separated(u)).expect("distinct orbits separate at some depth")
    }

    /// `U ∩ φ^i(U) = ∅` for `1 ≤ i ≤ N` at stage `n ≥ 1`.
    pub fn disjointness_holds(&self, n: usize) -> bool {
        n == 0 || self.separated(&self.base(n))
    }
}

impl StageSequence for SplitOrbit {
    fn tag(&self) -> &str {
        "split_orbit"
    }
    fn descriptor(&self) -> String {
        let pts: Vec<String> = self.points.iter().map(ToString::to_string).collect();
        format!("split_orbit({}, {})", self.system.descriptor(), pts.join(", "))
    }
    fn bases(&self) -> Arc<Bases> {
        self.system.bases().clone()
    }
    fn stage(&self, n: usize) -> Result<Arc<UnitSystem>> {
        self.cache.get_or(n, || {
            let label = format!("{} stage {n}", self.descriptor());
            if n == 0 {
                let mut t = UnitSystem::trivial(self.system.bases());
                t.label = label;
                return Ok(t);
            }
            let p = tower_over(&self.system, &self.base(n), n)?;
            Ok(UnitSystem::from_kr(&p, label))
        })
    }
}

/// One level of a gluing construction: atoms grouped into orbits, and the
/// exceptional orbit pairs that the joined partition `B` merges.
#[derive(Clone, Debug)]
pub struct Level {
    pub atoms: Vec<Clopen>,
    pub orbits: Vec<Vec<usize>>,
    pub exceptional: Vec<(usize, usize)>,
    orbit_of: Vec<usize>,
    partner: Vec<Option<usize>>,
}

impl Level {
    pub fn new(atoms: Vec<Clopen>, orbits: Vec<Vec<usize>>, exceptional: Vec<(usize, usize)>) -> Result<Level> {
        let mut orbit_of = vec![usize::MAX; atoms.len()];
        for (o, orbit) in orbits.iter().enumerate() {
            for &a in orbit {
                if a >= atoms.len() || orbit_of[a] != usize::MAX {
                    return Err(Error::NotCompatible(format!("atom {a} is listed twice or out of range")));
                }
                orbit_of[a] = o;
            }
        }
        if orbit_of.contains(&usize::MAX) {
            return Err(Error::NotCompatible("an atom belongs to no orbit".into()));
        }
        let mut partner = vec![None; orbits.len()];
        for &(o, p) in &exceptional {
            if o == p || o >= orbits.len() || p >= orbits.len() || partner[o].is_some() || partner[p].is_some() {
                return Err(Error::NotCompatible(format!("bad exceptional pair ({o}, {p})")));
            }
            partner[o] = Some(p);
            partner[p] = Some(o);
        }
        Ok(Level { atoms, orbits, exceptional, orbit_of, partner })
    }

    /// Orbits in id order; `exc` refers to partition ids.
    pub fn from_partition(p: &GammaPartition, exc: &ExceptionalPairs) -> Level {
        let mut atoms = Vec::with_capacity(p.atom_count());
        let mut orbits = Vec::with_capacity(p.orbit_len());
        let mut dense = BTreeMap::new();
        for (id, o) in p.orbits() {
            dense.insert(id, orbits.len());
            orbits.push((atoms.len()..atoms.len() + o.len()).collect());
            atoms.extend(o.atoms.iter().cloned());
        }
        let exceptional = exc.pairs.iter().map(|(a, b)| (dense[a], dense[b])).collect();
        Level::new(atoms, orbits, exceptional).expect("partitions are well formed")
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

    pub fn partner(&self, o: usize) -> Option<usize> {
        self.partner[o]
    }

    /// Orbit of the joined partition: the lesser orbit of an exceptional pair.
    pub fn joined_orbit(&self, o: usize) -> usize {
        self.partner[o].map_or(o, |p| p.min(o))
    }

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

    fn counts(&self, u: &Clopen, joined: bool) -> Option<BTreeMap<usize, usize>> {
        let mut c = BTreeMap::new();
        for a in self.decompose(u)? {
            let o = self.orbit_of[a];
            *c.entry(if joined { self.joined_orbit(o) } else { o }).or_insert(0) += 1;
        }
        Some(c)
    }

    /// `u` and `v` are equivalent for the partition itself (`A`), or for the
    /// joined one (`B`). `None` when they are not unions of atoms.
    pub fn equivalent(&self, u: &Clopen, v: &Clopen, joined: bool) -> Option<bool> {
        Some(self.counts(u, joined)? == self.counts(v, joined)?)
    }
}

/// For each atom of `fine`, the atom of `coarse` containing it.
fn parents(coarse: &Level, fine: &Level) -> Result<Vec<usize>> {
    fine.atoms
        .iter()
        .map(|c| {
            let p = SymbolicPoint::new(c.least_word().cloned().unwrap_or_default(), vec![0]);
            coarse
                .atoms
                .iter()
                .position(|a| a.contains_point(&p))
                .filter(|&a| c.is_subset(&coarse.atoms[a]))
                .ok_or_else(|| Error::NotCompatible(format!("{c} meets two coarse atoms")))
        })
        .collect()
}

/// Children of every coarse atom, split by fine orbit, in atom order.
type ChildIndex = Vec<BTreeMap<usize, Vec<usize>>>;

fn child_index(coarse: &Level, fine: &Level, parent: &[usize]) -> ChildIndex {
    let mut idx: ChildIndex = vec![BTreeMap::new(); coarse.len()];
    for (c, &a) in parent.iter().enumerate() {
        idx[a].entry(fine.orbit_of(c)).or_default().push(c);
    }
    idx
}

/// Refinement by counting: every fine orbit has equally many atoms in each
/// atom of a coarse orbit.
fn check_refinement(coarse: &Level, kids: &ChildIndex) -> Result<()> {
    for orbit in &coarse.orbits {
        let count = |a: usize| kids[a].iter().map(|(o, v)| (*o, v.len())).collect::<BTreeMap<_, _>>();
        let first = count(orbit[0]);
        if let Some(&a) = orbit.iter().find(|&&a| count(a) != first) {
            return Err(Error::NotCompatible(format!("{} and {} hold different fine orbits", coarse.atoms[orbit[0]], coarse.atoms[a])));
        }
    }
    Ok(())
}

/// `Γ̃_n`-orbit of a fine atom: the coarse orbit of its parent, its own orbit,
/// and its rank among the siblings of that orbit. The coarse group moves
/// children by rank, so equal keys mean one orbit.
type OrbitKey = (usize, usize, usize);

fn key(coarse: &Level, fine: &Level, parent: &[usize], kids: &ChildIndex, c: usize) -> OrbitKey {
    let a = parent[c];
    let o = fine.orbit_of(c);
    let rank = kids[a][&o].iter().position(|&x| x == c).expect("child of its parent");
    (coarse.orbit_of(a), o, rank)
}

/// An involution of the joined partitions at every level, with its singular
/// atoms: those sent outside their own orbit.
#[derive(Clone, Debug)]
pub struct PiInvolution {
    pub levels: Vec<Level>,
    /// `parent[n][c]` is the level-`n` atom containing atom `c` of level `n + 1`.
    pub parent: Vec<Vec<usize>>,
    pub maps: Vec<Vec<usize>>,
    pub singular: Vec<Vec<usize>>,
    /// How many set-asides used the three-atom arrangement, and how many the
    /// symmetric two-plus-two one.
    pub three_atom_cases: usize,
    pub symmetric_cases: usize,
    kids: Vec<ChildIndex>,
}

#[derive(Default)]
struct SetAside {
    used: BTreeSet<OrbitKey>,
    three: usize,
    symmetric: usize,
}

struct Step<'a> {
    coarse: &'a Level,
    fine: &'a Level,
    parent: &'a [usize],
    kids: &'a ChildIndex,
}

impl Step<'_> {
    fn key(&self, c: usize) -> OrbitKey {
        key(self.coarse, self.fine, self.parent, self.kids, c)
    }

    /// The first `n` atoms of `list` in unused `Γ̃_n`-orbits, pairwise distinct.
    fn pick(&self, list: &[usize], n: usize, used: &BTreeSet<OrbitKey>) -> Option<Vec<usize>> {
        let mut keys = BTreeSet::new();
        let out: Vec<usize> = list.iter().copied().filter(|&c| !used.contains(&self.key(c)) && keys.insert(self.key(c))).take(n).collect();
        (out.len() == n).then_some(out)
    }
}

/// Atoms of orbit `o` inside the coarse atom `a` that are still free.
type Avail = BTreeMap<(usize, usize), Vec<usize>>;

fn free(avail: &Avail, a: usize, o: usize) -> &[usize] {
    avail.get(&(a, o)).map_or(&[], Vec::as_slice)
}

/// Picks the requested atoms all at once, or nothing. Each request is
/// (coarse atom, fine orbit, count); the result pairs the requests as
/// `θ_j ↔ δ_j` in the order given by `pairing`.
fn commit(st: &Step, avail: &mut Avail, sa: &mut SetAside, asks: &[(usize, usize, usize)]) -> Option<Vec<Vec<usize>>> {
    let mut used = sa.used.clone();
    let mut picks = Vec::new();
    for &(a, o, n) in asks {
        let p = st.pick(free(avail, a, o), n, &used)?;
        used.extend(p.iter().map(|&c| st.key(c)));
        picks.push(p);
    }
    sa.used = used;
    for (p, &(a, o, _)) in picks.iter().zip(asks) {
        avail.get_mut(&(a, o)).expect("picked from it").retain(|c| !p.contains(c));
    }
    Some(picks)
}

fn set(map: &mut [usize], x: usize, y: usize) {
    map[x] = y;
    map[y] = x;
}

/// Extends `pi` from `coarse` to `fine` by the recipe of the gluing proof.
fn extend_pi(st: &Step, pi: &[usize], sa: &mut SetAside) -> Result<Vec<usize>> {
    let (coarse, fine, kids) = (st.coarse, st.fine, st.kids);
    let mut out = vec![usize::MAX; fine.len()];
    let mut taus = Vec::new();
    for a in 0..coarse.len() {
        let b = pi[a];
        if b < a {
            continue;
        }
        if coarse.orbit_of(a) != coarse.orbit_of(b) {
            taus.push((a, b));
            continue;
        }
        // π agrees with a group element here; its extension moves children by rank.
        for (o, list) in &kids[a] {
            let other = kids[b].get(o).filter(|l| l.len() == list.len()).ok_or_else(|| Error::NotCompatible(format!("{} and {} hold different fine orbits", coarse.atoms[a], coarse.atoms[b])))?;
            for (&c, &d) in list.iter().zip(other) {
                set(&mut out, c, d);
            }
        }
    }
    let mut avail: Avail = BTreeMap::new();
    for &(a, b) in &taus {
        for x in [a, b] {
            for (o, list) in &kids[x] {
                avail.insert((x, *o), list.clone());
            }
        }
    }
    let mut crossings: Vec<(usize, usize)> = Vec::new();
    let mut has_aside = vec![false; taus.len()];
    let mut linked = vec![false; fine.exceptional.len()];
    for (i, &(t, b)) in taus.iter().enumerate() {
        for (j, &(o, o2)) in fine.exceptional.iter().enumerate() {
            let m = free(&avail, t, o).len() as i64 - free(&avail, b, o).len() as i64;
            // (θ requests in O, δ requests in O'), paired in order.
            let (th, de): (Vec<(usize, usize, usize)>, Vec<(usize, usize, usize)>) = match m {
                0 => continue,
                1 => (vec![(t, o, 2), (b, o, 1)], vec![(b, o2, 2), (t, o2, 1)]),
                -1 => (vec![(b, o, 2), (t, o, 1)], vec![(t, o2, 2), (b, o2, 1)]),
                m if m > 1 => (vec![(t, o, m as usize)], vec![(b, o2, m as usize)]),
                m => (vec![(b, o, (-m) as usize)], vec![(t, o2, (-m) as usize)]),
            };
            let asks: Vec<_> = th.iter().chain(&de).copied().collect();
            let picks = commit(st, &mut avail, sa, &asks).ok_or_else(|| Error::ChoiceExhausted(format!("no room to set atoms aside in {} for orbit pair {j}", coarse.atoms[t])))?;
            let thetas: Vec<usize> = picks[..th.len()].concat();
            let deltas: Vec<usize> = picks[th.len()..].concat();
            if m.abs() == 1 {
                sa.three += 1;
            }
            crossings.extend(thetas.into_iter().zip(deltas));
            has_aside[i] = true;
            linked[j] = true;
        }
    }
    // Balanced pairs: a symmetric set-aside keeps at least two singular atoms
    // inside every singular atom, and links every exceptional pair.
    let symmetric = |t: usize, b: usize, o: usize, o2: usize, avail: &mut Avail, sa: &mut SetAside| -> Option<Vec<(usize, usize)>> {
        let picks = commit(st, avail, sa, &[(t, o, 2), (b, o, 2), (b, o2, 2), (t, o2, 2)])?;
        let thetas: Vec<usize> = picks[..2].concat();
        let deltas: Vec<usize> = picks[2..].concat();
        sa.symmetric += 1;
        Some(thetas.into_iter().zip(deltas).collect())
    };
    for (i, &(t, b)) in taus.iter().enumerate() {
        if has_aside[i] {
            continue;
        }
        let done = fine.exceptional.iter().enumerate().find_map(|(j, &(o, o2))| symmetric(t, b, o, o2, &mut avail, sa).map(|x| (j, x)));
        let (j, x) = done.ok_or_else(|| Error::ChoiceExhausted(format!("no exceptional orbit pair has room inside {}", coarse.atoms[t])))?;
        crossings.extend(x);
        linked[j] = true;
    }
    for (j, &(o, o2)) in fine.exceptional.iter().enumerate() {
        if linked[j] {
            continue;
        }
        let x = taus
            .iter()
            .find_map(|&(t, b)| symmetric(t, b, o, o2, &mut avail, sa))
            .ok_or_else(|| Error::ChoiceExhausted(format!("exceptional orbit pair {j} cannot be linked")))?;
        crossings.extend(x);
    }
    for (c, d) in crossings {
        set(&mut out, c, d);
    }
    // What is left pairs up by rank inside each orbit.
    for &(t, b) in &taus {
        let orbits: BTreeSet<usize> = kids[t].keys().chain(kids[b].keys()).copied().collect();
        for o in orbits {
            let (l1, l2) = (free(&avail, t, o), free(&avail, b, o));
            if l1.len() != l2.len() {
                return Err(Error::NotCompatible(format!("orbit {o} is not balanced between {} and {}", coarse.atoms[t], coarse.atoms[b])));
            }
            for (&c, &d) in l1.iter().zip(l2) {
                set(&mut out, c, d);
            }
        }
    }
    if out.contains(&usize::MAX) {
        return Err(Error::NotCompatible("the extension leaves atoms unassigned".into()));
    }
    Ok(out)
}

fn singular_of(level: &Level, map: &[usize]) -> Vec<usize> {
    (0..level.len()).filter(|&a| level.orbit_of(a) != level.orbit_of(map[a])).collect()
}

/// Builds `π` level by level: it swaps the representatives of each
/// exceptional pair at level 0 and extends by group elements wherever it is
/// not singular.
pub fn build_pi(levels: Vec<Level>) -> Result<PiInvolution> {
    let Some(first) = levels.first() else {
        return Err(Error::HypothesisViolated("no levels".into()));
    };
    let mut map: Vec<usize> = (0..first.len()).collect();
    for &(o, p) in &first.exceptional {
        set(&mut map, first.orbits[o][0], first.orbits[p][0]);
    }
    let mut maps = vec![map];
    let mut parent = Vec::new();
    let mut kids = Vec::new();
    let mut sa = SetAside::default();
    for w in levels.windows(2) {
        let (coarse, fine) = (&w[0], &w[1]);
        let par = parents(coarse, fine)?;
        let k = child_index(coarse, fine, &par);
        check_refinement(coarse, &k)?;
        sa.used.clear();
        let next = extend_pi(&Step { coarse, fine, parent: &par, kids: &k }, maps.last().expect("nonempty"), &mut sa)?;
        maps.push(next);
        parent.push(par);
        kids.push(k);
    }
    let singular = levels.iter().zip(&maps).map(|(l, m)| singular_of(l, m)).collect();
    Ok(PiInvolution { levels, parent, maps, singular, three_atom_cases: sa.three, symmetric_cases: sa.symmetric, kids })
}

/// One generator of `Λ_n`: a group element of `Γ̃_n` carrying one atom onto
/// another of its orbit, or `π`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Letter {
    Gamma(usize, usize),
    Pi,
}

impl PiInvolution {
    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn is_singular(&self, n: usize, a: usize) -> bool {
        self.singular[n].binary_search(&a).is_ok()
    }

    /// A word in the generators carrying atom `x` onto atom `y` at level `n`,
    /// if they share a `Λ_n`-orbit.
    pub fn word(&self, n: usize, x: usize, y: usize) -> Option<Vec<Letter>> {
        let l = &self.levels[n];
        let (ox, oy) = (l.orbit_of(x), l.orbit_of(y));
        let gamma = |a: usize, b: usize| (a != b).then_some(Letter::Gamma(a, b));
        if ox == oy {
            return Some(gamma(x, y).into_iter().collect());
        }
        let s = l.orbits[ox].iter().copied().find(|&s| l.orbit_of(self.maps[n][s]) == oy)?;
        Some(gamma(x, s).into_iter().chain([Letter::Pi]).chain(gamma(self.maps[n][s], y)).collect())
    }

    /// Applies a word; `None` when a letter does not apply.
    pub fn apply_word(&self, n: usize, x: usize, word: &[Letter]) -> Option<usize> {
        let l = &self.levels[n];
        word.iter().try_fold(x, |cur, w| match *w {
            Letter::Gamma(a, b) => (a == cur && l.orbit_of(a) == l.orbit_of(b)).then_some(b),
            Letter::Pi => Some(self.maps[n][cur]),
        })
    }

    pub fn word_string(&self, n: usize, word: &[Letter]) -> String {
        let l = &self.levels[n];
        if word.is_empty() {
            return "id".into();
        }
        word.iter()
            .map(|w| match *w {
                Letter::Gamma(a, b) => format!("g({}->{})", l.atoms[a], l.atoms[b]),
                Letter::Pi => "pi".into(),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Every invariant of the involution, re-checked from the stored maps.
    pub fn verify(&self, m: Option<&ErgodicList>) -> Report {
        let mut r = Report::new("involution");
        for (n, (l, map)) in self.levels.iter().zip(&self.maps).enumerate() {
            let inv = (0..l.len()).all(|a| map[map[a]] == a);
            r.check(format!("level {n}: pi squared is the identity"), inv, "pi is not an involution");
            let mut bad = Vec::new();
            for a in 0..l.len() {
                let (o, p) = (l.orbit_of(a), l.orbit_of(map[a]));
                if o != p && l.partner(o) != Some(p) {
                    bad.push(l.atoms[a].to_string());
                }
            }
            r.check(format!("level {n}: pi preserves the joined orbits"), bad.is_empty(), bad.join(", "));
            if let Some(m) = m {
                let moved: Vec<String> = (0..l.len())
                    .filter(|&a| map[a] != a && compare_measures(&l.atoms[a], &l.atoms[map[a]], m) != Comparison::AllEq)
                    .map(|a| l.atoms[a].to_string())
                    .collect();
                r.check(format!("level {n}: pi preserves every measure"), moved.is_empty(), moved.join(", "));
            }
            r.check(format!("level {n}: Lambda orbits are the joined orbits"), self.lambda_orbits_match(n), "an exceptional pair is not linked by pi");
        }
        for n in 0..self.levels.len().saturating_sub(1) {
            let (coarse, fine, par) = (&self.levels[n], &self.levels[n + 1], &self.parent[n]);
            let (pm, fm) = (&self.maps[n], &self.maps[n + 1]);
            let incoherent: Vec<String> = (0..fine.len()).filter(|&c| par[fm[c]] != pm[par[c]]).map(|c| fine.atoms[c].to_string()).collect();
            r.check(format!("level {}: coherent with level {n}", n + 1), incoherent.is_empty(), incoherent.join(", "));
            // Off the singular atoms π is the rank-preserving group extension.
            let mut off = Vec::new();
            for a in (0..coarse.len()).filter(|&a| !self.is_singular(n, a)) {
                for (o, list) in &self.kids[n][a] {
                    let img = &self.kids[n][pm[a]][o];
                    if list.iter().zip(img).any(|(&c, &d)| fm[c] != d) {
                        off.push(coarse.atoms[a].to_string());
                    }
                }
            }
            r.check(format!("level {}: group element off the singular atoms", n + 1), off.is_empty(), off.join(", "));
            let mut seen = BTreeMap::new();
            let mut clash = Vec::new();
            for &c in &self.singular[n + 1] {
                if let Some(d) = seen.insert(key(coarse, fine, par, &self.kids[n], c), c) {
                    clash.push(format!("{} and {}", fine.atoms[d], fine.atoms[c]));
                }
            }
            r.check(format!("level {}: at most one singular atom per orbit of the previous group", n + 1), clash.is_empty(), clash.join("; "));
            let thin: Vec<String> = self.singular[n]
                .iter()
                .filter(|&&a| self.singular[n + 1].iter().filter(|&&c| par[c] == a).count() < 2)
                .map(|&a| coarse.atoms[a].to_string())
                .collect();
            r.check(format!("level {n}: every singular atom holds two singular atoms"), thin.is_empty(), thin.join(", "));
        }
        r
    }

    fn lambda_orbits_match(&self, n: usize) -> bool {
        let l = &self.levels[n];
        let mut root: Vec<usize> = (0..l.orbits.len()).collect();
        fn find(r: &mut [usize], x: usize) -> usize {
            let mut x = x;
            while r[x] != x {
                r[x] = r[r[x]];
                x = r[x];
            }
            x
        }
        for a in 0..l.len() {
            let (x, y) = (find(&mut root, l.orbit_of(a)), find(&mut root, l.orbit_of(self.maps[n][a])));
            root[x] = y;
        }
        (0..l.orbits.len()).all(|o| {
            (0..l.orbits.len()).all(|p| {
                let joined = o == p || l.partner(o) == Some(p);
                (find(&mut root, o) == find(&mut root, p)) == joined
            })
        })
    }

    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "levels": self.levels.iter().zip(&self.maps).enumerate().map(|(n, (l, map))| json!({
                "level": n,
                "atoms": l.len(),
                "orbits": l.orbits.len(),
                "exceptional_pairs": l.exceptional,
                "singular": self.singular[n].iter().map(|&a| [l.atoms[a].to_string(), l.atoms[map[a]].to_string()]).collect::<Vec<_>>(),
            })).collect::<Vec<_>>(),
            "three_atom_cases": self.three_atom_cases,
            "symmetric_cases": self.symmetric_cases,
        })
    }
}

/// A singular atom of the tree: its level index and its parent's position
/// in the previous tree level.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SingularNode {
    pub atom: Clopen,
    pub image: Clopen,
    pub index: usize,
    pub parent: Option<usize>,
}

/// The nested singular atoms down to some depth: the finite shadow of the
/// Cantor set of singular points.
#[derive(Clone, Debug)]
pub struct SingularTree {
    pub levels: Vec<Vec<SingularNode>>,
}

pub fn singular_points(pi: &PiInvolution, depth: usize) -> SingularTree {
    let mut levels: Vec<Vec<SingularNode>> = Vec::new();
    for n in 0..depth.min(pi.depth()) {
        let l = &pi.levels[n];
        let prev: BTreeMap<usize, usize> = levels.last().map(|p| p.iter().enumerate().map(|(i, x)| (x.index, i)).collect()).unwrap_or_default();
        let nodes = pi.singular[n]
            .iter()
            .map(|&a| SingularNode {
                atom: l.atoms[a].clone(),
                image: l.atoms[pi.maps[n][a]].clone(),
                index: a,
                parent: if n == 0 { None } else { prev.get(&pi.parent[n - 1][a]).copied() },
            })
            .collect();
        levels.push(nodes);
    }
    SingularTree { levels }
}

impl SingularTree {
    pub fn roots(&self) -> usize {
        self.levels.first().map_or(0, Vec::len)
    }

    /// Least number of singular children over the nodes above the last level.
    pub fn min_branching(&self) -> Option<usize> {
        (1..self.levels.len())
            .flat_map(|n| (0..self.levels[n - 1].len()).map(move |i| self.levels[n].iter().filter(|x| x.parent == Some(i)).count()))
            .min()
    }

    pub fn verify(&self, pi: &PiInvolution) -> Report {
        let mut r = Report::new("singular tree");
        let orphans = self.levels.iter().skip(1).flatten().filter(|x| x.parent.is_none()).count();
        r.check("every node sits under a singular atom", orphans == 0, format!("{orphans} orphan nodes"));
        r.check("every node has two singular children", self.min_branching().is_none_or(|b| b >= 2), format!("{:?}", self.min_branching()));
        for n in 1..self.levels.len() {
            let keys: BTreeSet<OrbitKey> = self.levels[n].iter().map(|x| key(&pi.levels[n - 1], &pi.levels[n], &pi.parent[n - 1], &pi.kids[n - 1], x.index)).collect();
            r.check(format!("level {n}: nodes lie in distinct orbits of the previous group"), keys.len() == self.levels[n].len(), "two nodes share an orbit");
        }
        r
    }

    pub fn to_json(&self) -> serde_json::Value {
        json!(self
            .levels
            .iter()
            .map(|l| l.iter().map(|x| json!({"atom": x.atom.to_string(), "pi": x.image.to_string(), "parent": x.parent})).collect::<Vec<_>>())
            .collect::<Vec<_>>())
    }
}

/// One level of an exceptional stage sequence: a stage partition cut so that
/// the representatives of `pair` split one stage orbit in two.
#[derive(Clone, Debug)]
pub struct ExceptionalLevel {
    pub stage: usize,
    pub partition: GammaPartition,
    pub pair: (usize, usize),
}

impl ExceptionalLevel {
    pub fn alpha(&self) -> &Clopen {
        self.partition.orbit(self.pair.0).rep()
    }

    pub fn beta(&self) -> &Clopen {
        self.partition.orbit(self.pair.1).rep()
    }

    pub fn level(&self) -> Level {
        Level::from_partition(&self.partition, &ExceptionalPairs { pairs: vec![self.pair] })
    }
}

/// Cuts orbit `id` by the last letter of its representative refined one step:
/// letter 0 gives `α`, letter 1 gives `β`.
fn cut_in_two(p: &mut GammaPartition, id: usize, m: &ErgodicList) -> Result<(usize, usize)> {
    let rep = p.orbit(id).rep().clone();
    let words = rep.refine_to_depth(rep.depth() + 1)?;
    let by_letter = |f: &dyn Fn(u8) -> bool| Clopen::normalize(&p.bases, words.iter().filter(|w| f(*w.last().expect("nonempty"))).cloned());
    let (a, b, rest) = (by_letter(&|x| x == 0)?, by_letter(&|x| x == 1)?, by_letter(&|x| x > 1)?);
    if compare_measures(&a, &b, m) != Comparison::AllEq {
        return Err(Error::ChoiceExhausted(format!("the halves of {rep} differ in measure")));
    }
    let ids = p.cut_by_rep(id, &[a, b, rest])?;
    Ok((ids[0].expect("nonempty half"), ids[1].expect("nonempty half")))
}

/// A refining sequence of cut stage partitions with one exceptional orbit
/// pair per level: `α_n` and `β_n` are equivalent for the next partition,
/// whose exceptional orbits each hold at least `2h_n` copies of theirs.
pub fn exceptional_stage_sequence(s: &dyn StageSequence, m: &ErgodicList, depth: usize, h: &Horizon) -> Result<Vec<ExceptionalLevel>> {
    let mut out: Vec<ExceptionalLevel> = Vec::new();
    for _ in 0..depth {
        let start = out.last().map_or(0, |l| l.stage + 1);
        let mut found = None;
        for k in start..=h.max_stage {
            h.check()?;
            let st = s.stage(k)?;
            let Some(prev) = out.last() else {
                let mut p = GammaPartition::from_stage(&st);
                let id = (0..st.orbits.len()).max_by_key(|&o| (st.orbits[o].len(), std::cmp::Reverse(o))).expect("nonempty stage");
                let pair = cut_in_two(&mut p, id, m)?;
                found = Some(ExceptionalLevel { stage: k, partition: p, pair });
                break;
            };
            let need = 2 * prev.partition.atom_count();
            let (alpha, beta) = (prev.alpha(), prev.beta());
            if !st.is_compatible(alpha) || !st.is_compatible(beta) {
                continue;
            }
            let inside = |o: usize, c: &Clopen| st.orbits[o].iter().filter(|&&a| st.atoms[a].is_subset(c)).count();
            let best = (0..st.orbits.len()).filter(|&o| inside(o, alpha) >= need && inside(o, beta) >= need).max_by_key(|&o| (st.orbits[o].len(), std::cmp::Reverse(o)));
            let Some(id) = best else { continue };
            if st.equivalence_witness(alpha, beta).is_none() {
                continue;
            }
            let mut p = GammaPartition::from_stage(&st);
            if !p.refines(&prev.partition) {
                continue;
            }
            let pair = cut_in_two(&mut p, id, m)?;
            let lvl = ExceptionalLevel { stage: k, partition: p, pair };
            if lvl.level().equivalent(alpha, beta, false) != Some(true) {
                continue;
            }
            found = Some(lvl);
            break;
        }
        let lvl = found.ok_or_else(|| Error::HorizonExceeded(format!("level {} of the exceptional sequence of {} needs a stage beyond {}", out.len(), s.descriptor(), h.max_stage)))?;
        out.push(lvl);
    }
    Ok(out)
}

/// Re-checks both conditions of an exceptional stage sequence by counting.
pub fn verify_exceptional_sequence(levels: &[ExceptionalLevel]) -> Report {
    let mut r = Report::new("exceptional stage sequence");
    for (n, l) in levels.iter().enumerate() {
        r.merge(l.partition.verify());
        r.check(format!("level {n}: two distinct exceptional orbits"), l.pair.0 != l.pair.1, "the pair is one orbit");
        let Some(next) = levels.get(n + 1) else { continue };
        r.merge(next.partition.refinement_report(&l.partition));
        let eq = next.level().equivalent(l.alpha(), l.beta(), false) == Some(true);
        r.check(format!("level {n}: alpha and beta are equivalent at level {}", n + 1), eq, format!("{} vs {}", l.alpha(), l.beta()));
        let need = 2 * l.partition.atom_count();
        let (ca, cb) = (next.partition.copies(next.pair.0, l.alpha()), next.partition.copies(next.pair.1, l.beta()));
        r.check(format!("level {}: exceptional orbits hold 2h copies", n + 1), ca >= need && cb >= need, format!("{ca} and {cb} copies, need {need}"));
    }
    r
}

/// A verified witness `λ(U) = V` in `Λ_n`: atom `from` goes to atom `to`
/// along `word`. Atoms of `U ∩ V` stay put.
#[derive(Clone, Debug)]
pub struct LambdaWitness {
    pub level: usize,
    pub maps: Vec<(usize, usize, Vec<Letter>)>,
}

/// Output of the saturation pipeline.
#[derive(Clone, Debug)]
pub struct SaturationRun {
    pub descriptor: String,
    pub pairs: Vec<(Clopen, Clopen)>,
    /// `U ∼_Γ V` within the horizon.
    pub equivalent: Vec<bool>,
    /// First level at which each pair is equivalent for the joined partition.
    pub level_of: Vec<usize>,
    pub partitions: Vec<GammaPartition>,
    pub exceptional: Vec<ExceptionalPairs>,
    /// Tuples `(Ū, V̄)` fed to the refinement producing each level.
    pub tuples: Vec<(Vec<Clopen>, Vec<Clopen>)>,
    pub pi: PiInvolution,
    pub witnesses: Vec<LambdaWitness>,
}

fn lambda_witness(pi: &PiInvolution, n: usize, u: &Clopen, v: &Clopen) -> Option<LambdaWitness> {
    let l = &pi.levels[n];
    let (us, vs) = (l.decompose(&u.difference(v))?, l.decompose(&v.difference(u))?);
    let mut by_orbit: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &b in &vs {
        by_orbit.entry(l.joined_orbit(l.orbit_of(b))).or_default().push(b);
    }
    let mut maps = Vec::new();
    for &a in &us {
        let list = by_orbit.get_mut(&l.joined_orbit(l.orbit_of(a)))?;
        if list.is_empty() {
            return None;
        }
        let b = list.remove(0);
        maps.push((a, b, pi.word(n, a, b)?));
    }
    by_orbit.values().all(Vec::is_empty).then_some(LambdaWitness { level: n, maps })
}

/// Saturates `Γ` at finite depth. Pairs of equal-measure clopens of depth at
/// most `pair_depth` are processed in enumeration order; a pair already
/// equivalent for the current joined partition needs no level of its own.
/// The run stops once every pair is handled and `levels` levels exist.
pub fn saturation_pipeline(s: &dyn StageSequence, m: &ErgodicList, pair_depth: usize, levels: usize, h: &Horizon) -> Result<SaturationRun> {
    let b = s.bases();
    let pairs = measure_equivalent_pairs(&b, m, pair_depth);
    let diff = |(u, v): &(Clopen, Clopen)| (u.difference(v), v.difference(u));
    let mut class: BTreeMap<(Clopen, Clopen), Option<usize>> = BTreeMap::new();
    for p in &pairs {
        h.check()?;
        let d = diff(p);
        if !class.contains_key(&d) {
            let g = orbit_equiv_clopen(s, &d.0, &d.1, h.max_stage).ok().map(|g| g.stage);
            class.insert(d, g);
        }
    }
    let equivalent: Vec<bool> = pairs.iter().map(|p| class[&diff(p)].is_some()).collect();
    let min_stage = class.values().flatten().copied().max().unwrap_or(0);
    let first = pairs
        .iter()
        .zip(&equivalent)
        .find(|(_, e)| !**e)
        .map(|(p, _)| diff(p))
        .ok_or_else(|| Error::HypothesisViolated(format!("every pair of depth {pair_depth} is already equivalent in {}", s.descriptor())))?;
    let mut a0 = GammaPartition::trivial(&b);
    let rest = first.0.union(&first.1).complement();
    let ids = a0.cut_by_rep(a0.ids()[0], &[first.0.clone(), first.1.clone(), rest])?;
    let mut exc = vec![ExceptionalPairs { pairs: vec![(ids[0].expect("nonempty"), ids[1].expect("nonempty"))] }];
    let mut parts = vec![a0];
    let mut tuples = vec![(vec![first.0.clone()], vec![first.1.clone()])];
    let cylinders: Vec<Clopen> = b.all_words(pair_depth).into_iter().map(|w| Clopen::normalize(&b, [w])).collect::<Result<_>>()?;
    let handled = |p: &GammaPartition, e: &ExceptionalPairs, d: &(Clopen, Clopen)| Level::from_partition(p, e).equivalent(&d.0, &d.1, true) == Some(true);
    loop {
        let (p, e) = (parts.last().expect("nonempty"), exc.last().expect("nonempty"));
        let pending = pairs.iter().map(diff).find(|d| !handled(p, e, d));
        if pending.is_none() && parts.len() >= levels {
            break;
        }
        if parts.len() > levels + pairs.len() {
            return Err(Error::HorizonExceeded("the pipeline does not settle".into()));
        }
        let mut us: Vec<Clopen> = e.pairs.iter().map(|x| p.orbit(x.0).rep().clone()).collect();
        let mut vs: Vec<Clopen> = e.pairs.iter().map(|x| p.orbit(x.1).rep().clone()).collect();
        if let Some((u, v)) = pending {
            us.push(u);
            vs.push(v);
        }
        let first_step = parts.len() == 1;
        let (extra, min) = if first_step { (cylinders.as_slice(), min_stage) } else { (&[][..], 0) };
        let (q, e2) = almost_equivalent_refine_from(p, &us, &vs, extra, min, s, m, h)?;
        tuples.push((us, vs));
        parts.push(q);
        exc.push(e2);
    }
    let lv: Vec<Level> = parts.iter().zip(&exc).map(|(p, e)| Level::from_partition(p, e)).collect();
    let level_of: Vec<usize> = pairs
        .iter()
        .map(|p| {
            let d = diff(p);
            lv.iter().position(|l| l.equivalent(&d.0, &d.1, true) == Some(true)).expect("the loop handles every pair")
        })
        .collect();
    let pi = build_pi(lv)?;
    let witnesses = pairs
        .iter()
        .zip(&level_of)
        .map(|((u, v), &n)| lambda_witness(&pi, n, u, v).ok_or_else(|| Error::NoWitness(format!("{u} to {v} at level {n}"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(SaturationRun { descriptor: s.descriptor(), pairs, equivalent, level_of, partitions: parts, exceptional: exc, tuples, pi, witnesses })
}

impl SaturationRun {
    pub fn verify(&self, m: &ErgodicList) -> Report {
        let mut r = Report::new("saturation run");
        for (n, p) in self.partitions.iter().enumerate() {
            r.merge(p.verify());
            if n > 0 {
                let prev = &self.partitions[n - 1];
                let (us, vs) = &self.tuples[n];
                let mut rep = verify_almost_equivalence(prev, p, &self.exceptional[n], us, vs, m);
                rep.subject = format!("level {n} almost equivalence");
                r.merge(rep);
            }
        }
        r.merge(self.pi.verify(Some(m)));
        for n in 1..self.pi.depth() {
            r.check(format!("level {n}: joined partition refines level {}", n - 1), self.joined_refines(n), "copy counts differ along a joined orbit");
        }
        let mut late = Vec::new();
        for ((u, v), &n) in self.pairs.iter().zip(&self.level_of) {
            let (du, dv) = (u.difference(v), v.difference(u));
            if self.pi.levels[n..].iter().any(|l| l.equivalent(&du, &dv, true) != Some(true)) {
                late.push(format!("{u} ~ {v}"));
            }
        }
        r.check("each pair is equivalent for the joined partitions from its level on", late.is_empty(), late.join("; "));
        let mut bad = Vec::new();
        for ((u, v), w) in self.pairs.iter().zip(&self.witnesses) {
            let l = &self.pi.levels[w.level];
            let mut image = u.intersection(v);
            let mut ok = true;
            for (a, b, word) in &w.maps {
                ok &= self.pi.apply_word(w.level, *a, word) == Some(*b);
                image = image.union(&l.atoms[*b]);
            }
            if !ok || image != *v {
                bad.push(format!("{u} -> {v}"));
            }
        }
        r.check("every pair has a Lambda witness", bad.is_empty(), bad.join("; "));
        // Orbits of the built group on clopens are those of the stage groups.
        let last = self.pi.levels.last().expect("nonempty");
        let differ: Vec<String> = self
            .pairs
            .iter()
            .zip(&self.equivalent)
            .filter(|((u, v), e)| (last.equivalent(&u.difference(v), &v.difference(u), false) == Some(true)) != **e)
            .map(|((u, v), _)| format!("{u} ~ {v}"))
            .collect();
        r.check("orbits on clopens agree with the stage groups", differ.is_empty(), differ.join("; "));
        r
    }

    fn joined_refines(&self, n: usize) -> bool {
        let (coarse, fine, par) = (&self.pi.levels[n - 1], &self.pi.levels[n], &self.pi.parent[n - 1]);
        let mut count: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for (c, &a) in par.iter().enumerate() {
            *count.entry((a, fine.joined_orbit(fine.orbit_of(c)))).or_insert(0) += 1;
        }
        let fine_orbits: BTreeSet<usize> = (0..fine.orbits.len()).map(|o| fine.joined_orbit(o)).collect();
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for a in 0..coarse.len() {
            groups.entry(coarse.joined_orbit(coarse.orbit_of(a))).or_default().push(a);
        }
        groups.values().all(|atoms| fine_orbits.iter().all(|&o| atoms.iter().all(|&a| count.get(&(a, o)) == count.get(&(atoms[0], o)))))
    }

    pub fn to_json(&self, with_witnesses: bool) -> serde_json::Value {
        let mut v = json!({
            "sequence": self.descriptor,
            "pairs": self.pairs.len(),
            "inequivalent_pairs": self.equivalent.iter().filter(|e| !**e).count(),
            "levels": self.partitions.iter().zip(&self.exceptional).enumerate().map(|(n, (p, e))| json!({
                "level": n,
                "atoms": p.atom_count(),
                "orbits": p.orbit_len(),
                "exceptional_pairs": e.len(),
                "pairs_handled": self.level_of.iter().filter(|&&l| l == n).count(),
            })).collect::<Vec<_>>(),
            "pi": self.pi.to_json(),
        });
        if with_witnesses {
            v["witnesses"] = json!(self
                .pairs
                .iter()
                .zip(&self.witnesses)
                .map(|((u, w), lw)| {
                    let l = &self.pi.levels[lw.level];
                    json!({
                        "u": u.to_string(),
                        "v": w.to_string(),
                        "level": lw.level,
                        "maps": lw.maps.iter().map(|(a, b, word)| json!({"from": l.atoms[*a].to_string(), "to": l.atoms[*b].to_string(), "word": self.pi.word_string(lw.level, word)})).collect::<Vec<_>>(),
                    })
                })
                .collect::<Vec<_>>());
        }
        v
    }
}

/// Finite-depth evidence that the relation of a minimal system is isomorphic
/// to that of `Γ_x`: split at `y`, saturate the two-point intersection, and
/// drive back-and-forth between the split sequence and `Γ_x`.
pub fn classification_scenario(system: Arc<dyn SystemHandle>, x: SymbolicPoint, y: SymbolicPoint, depth: usize, h: &Horizon) -> Result<Report> {
    let mut r = Report::new("classification scenario (finite-depth evidence)");
    let split = SplitOrbit::new(system.clone(), vec![y.clone()])?;
    let gy = GammaX::new(system.clone(), y.clone())?;
    let mut agree = true;
    for n in 0..=depth {
        let (a, b) = (split.stage(n)?, gy.stage(n)?);
        agree &= a.atoms == b.atoms && a.orbits == b.orbits && split.disjointness_holds(n);
    }
    r.check("splitting at one point gives the stages of its stabilizer", agree, format!("depth {depth}"));
    let gx = GammaX::new(system.clone(), x.clone())?;
    let m = ErgodicList::product(&system.bases());
    let both = SplitOrbit::new(system.clone(), vec![x, y])?;
    let run = saturation_pipeline(&both, &m, 2, 2, h)?;
    r.merge(run.verify(&m));
    let drv = Driver { gamma: &split, lambda: &gx, k: SparseSet::empty(), l: SparseSet::empty(), h: PointedMap::default(), horizon: h.clone() };
    let chain = drv.run(depth)?;
    r.merge(drv.verify(&chain));
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ample::Intersection;
    use crate::dynamics::Odometer;
    use crate::measure::ErgodicList;

    fn p(s: &str) -> SymbolicPoint {
        SymbolicPoint::parse(s).unwrap()
    }
    fn odo() -> Arc<dyn SystemHandle> {
        Arc::new(Odometer::dyadic())
    }

    #[test]
    fn split_orbit_matches_known_sequences() {
        let one = SplitOrbit::new(odo(), vec![p("(0)")]).unwrap();
        let gx = GammaX::new(odo(), p("(0)")).unwrap();
        let two = SplitOrbit::new(odo(), vec![p("(0)"), p("(01)")]).unwrap();
        let inter = Intersection::new(odo(), p("(0)"), p("(01)")).unwrap();
        for n in 0..=3 {
            assert_eq!(one.stage(n).unwrap().orbits, gx.stage(n).unwrap().orbits);
            assert_eq!(one.stage(n).unwrap().atoms, gx.stage(n).unwrap().atoms);
            assert_eq!(two.stage(n).unwrap().atoms, inter.stage(n).unwrap().atoms);
            assert_eq!(two.stage(n).unwrap().orbits, inter.stage(n).unwrap().orbits);
            assert!(two.disjointness_holds(n));
        }
    }

    #[test]
    fn split_orbit_grows_base_for_wider_separation() {
        let s = SplitOrbit::with_separation(odo(), vec![p("(0)"), p("(01)")], 3).unwrap();
        for n in 1..=4 {
            let u = s.base(n);
            assert!(u.depth() >= n);
            for i in 1..=3 {
                assert!(u.is_disjoint(&odo().power_clopen(&u, i)));
            }
        }
        assert!(SplitOrbit::new(odo(), vec![p("(0)"), p("1(0)")]).is_err());
    }

    fn cyl(words: &[&str]) -> Clopen {
        Clopen::parse(&Bases::dyadic(), &format!("[{}]", words.join(","))).unwrap()
    }

    /// Two singleton orbits glued at level 0; level 1 has an exceptional pair
    /// with one more atom under [0] than under [1].
    fn seeded_levels() -> Vec<Level> {
        let l0 = Level::new(vec![cyl(&["0"]), cyl(&["1"])], vec![vec![0], vec![1]], vec![(0, 1)]).unwrap();
        let atoms: Vec<Clopen> = ["000", "001", "010", "011", "100", "101", "110", "111"].iter().map(|w| cyl(&[w])).collect();
        let l1 = Level::new(atoms, vec![vec![0, 1, 4], vec![2, 6, 7], vec![3, 5]], vec![(0, 1)]).unwrap();
        vec![l0, l1]
    }

    #[test]
    fn three_atom_set_aside() {
        let pi = build_pi(seeded_levels()).unwrap();
        assert_eq!(pi.three_atom_cases, 1);
        let r = pi.verify(Some(&ErgodicList::product(&Bases::dyadic())));
        assert!(r.passed(), "{:?}", r.failures().collect::<Vec<_>>());
        let tree = singular_points(&pi, 2);
        assert_eq!(tree.roots(), 2);
        assert!(tree.min_branching().unwrap() >= 2);
        assert!(tree.verify(&pi).passed());
    }

    #[test]
    fn broken_involution_is_caught() {
        let mut pi = build_pi(seeded_levels()).unwrap();
        let (a, b) = (0, pi.maps[1][0]);
        pi.maps[1][a] = a;
        pi.maps[1][b] = b;
        assert!(!pi.verify(None).passed());
    }

    #[test]
    fn unbalanced_levels_are_rejected() {
        let l0 = Level::new(vec![cyl(&["0"]), cyl(&["1"])], vec![vec![0, 1]], vec![]).unwrap();
        let l1 = Level::new(vec![cyl(&["00"]), cyl(&["01"]), cyl(&["1"])], vec![vec![0, 1], vec![2]], vec![]).unwrap();
        assert!(matches!(build_pi(vec![l0, l1]), Err(Error::NotCompatible(_))));
    }

    #[test]
    fn exceptional_sequence_on_gamma_x() {
        let gx = GammaX::new(odo(), p("(0)")).unwrap();
        let m = ErgodicList::product(&Bases::dyadic());
        let seq = exceptional_stage_sequence(&gx, &m, 3, &Horizon::new(16)).unwrap();
        assert!(seq.windows(2).all(|w| w[0].stage < w[1].stage));
        let r = verify_exceptional_sequence(&seq);
        assert!(r.passed(), "{:?}", r.failures().collect::<Vec<_>>());
        let pi = build_pi(seq.iter().map(ExceptionalLevel::level).collect()).unwrap();
        assert!(pi.verify(Some(&m)).passed());
        let mut bad = seq.clone();
        bad[1].partition = bad[0].partition.clone();
        bad[1].pair = bad[0].pair;
        assert!(!verify_exceptional_sequence(&bad).passed());
    }

    #[test]
    fn saturation_on_two_points() {
        let s = SplitOrbit::new(odo(), vec![p("(0)"), p("(01)")]).unwrap();
        let m = ErgodicList::product(&Bases::dyadic());
        let run = saturation_pipeline(&s, &m, 2, 2, &Horizon::new(16)).unwrap();
        let r = run.verify(&m);
        assert!(r.passed(), "{:?}", r.failures().collect::<Vec<_>>());
        assert_eq!(run.witnesses.len(), run.pairs.len());
    }

    #[test]
    fn classification_scenario_is_green() {
        let r = classification_scenario(odo(), p("(0)"), p("(01)"), 3, &Horizon::new(16)).unwrap();
        assert!(r.passed(), "{:?}", r.failures().collect::<Vec<_>>());
    }
}
