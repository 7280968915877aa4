//! Finite unit systems and stage sequences of ample groups.
//!
//! A unit system is stored as atoms grouped into orbits, plus one chart per
//! atom: an exact map sending the orbit representative onto the atom. The
//! group is every orbit-preserving permutation of atoms; the permutation `σ`
//! acts on atom `a` by `chart[σ(a)] ∘ chart[a]⁻¹`. This is the product of
//! symmetric groups a tower stage carries, and it is full by construction.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::fmt;
use std::sync::{Arc, Mutex};

use num_rational::BigRational;
use serde::Serialize;

use crate::clopen::{Bases, Clopen, SymbolicPoint};
use crate::dynamics::{same_orbit_within, SystemHandle};
use crate::error::{Error, Result};
use crate::kr::{tower_over, AtomIndex, KRPartition};
use crate::moves::{Elem, Move};
use crate::report::Report;

/// A labelled generator, given by the atoms it moves.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Generator {
    pub label: String,
    /// Sorted `(atom, image)` pairs; every other atom is fixed.
    pub moves: Vec<(usize, usize)>,
}

impl Generator {
    pub fn from_mapping(label: impl Into<String>, mapping: &[usize]) -> Generator {
        let moves = mapping.iter().enumerate().filter(|(a, b)| a != *b).map(|(a, &b)| (a, b)).collect();
        Generator { label: label.into(), moves }
    }

    pub fn image(&self, a: usize) -> usize {
        self.moves.binary_search_by_key(&a, |m| m.0).map_or(a, |i| self.moves[i].1)
    }

    /// The full atom permutation on `n` atoms.
    pub fn dense(&self, n: usize) -> Vec<usize> {
        let mut m: Vec<usize> = (0..n).collect();
        for &(a, b) in &self.moves {
            if a < n {
                m[a] = b;
            }
        }
        m
    }
}

/// A group element of a particular stage, given by its atom permutation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct GroupElement {
    pub stage: usize,
    pub mapping: Vec<usize>,
}

impl GroupElement {
    pub fn identity(stage: usize, n: usize) -> GroupElement {
        GroupElement { stage, mapping: (0..n).collect() }
    }

    pub fn is_identity(&self) -> bool {
        self.mapping.iter().enumerate().all(|(i, &j)| i == j)
    }

    pub fn inverse(&self) -> GroupElement {
        let mut mapping = vec![0; self.mapping.len()];
        for (i, &j) in self.mapping.iter().enumerate() {
            mapping[j] = i;
        }
        GroupElement { stage: self.stage, mapping }
    }
}

#[derive(Clone, Debug)]
pub struct UnitSystem {
    pub bases: Arc<Bases>,
    pub atoms: Vec<Clopen>,
    /// Atom indices per orbit; the first entry is the representative.
    pub orbits: Vec<Vec<usize>>,
    pub charts: Vec<Elem>,
    pub generators: Vec<Generator>,
    pub label: String,
    orbit_of: Vec<usize>,
    index: AtomIndex,
    depth: usize,
    weights: Vec<u128>,
}

impl UnitSystem {
    pub fn new(bases: Arc<Bases>, atoms: Vec<Clopen>, orbits: Vec<Vec<usize>>, charts: Vec<Elem>, label: impl Into<String>) -> UnitSystem {
        let mut generators = Vec::new();
        for (o, orbit) in orbits.iter().enumerate() {
            for w in orbit.windows(2) {
                let mut moves = vec![(w[0], w[1]), (w[1], w[0])];
                moves.sort_unstable();
                generators.push(Generator { label: format!("o{o}:{}<->{}", w[0], w[1]), moves });
            }
        }
        UnitSystem::with_generators(bases, atoms, orbits, charts, generators, label)
    }

    pub fn with_generators(
        bases: Arc<Bases>,
        atoms: Vec<Clopen>,
        orbits: Vec<Vec<usize>>,
        charts: Vec<Elem>,
        generators: Vec<Generator>,
        label: impl Into<String>,
    ) -> UnitSystem {
        let mut orbit_of = vec![usize::MAX; atoms.len()];
        for (o, orbit) in orbits.iter().enumerate() {
            for &a in orbit {
                orbit_of[a] = o;
            }
        }
        let index = AtomIndex::new(&atoms);
        let depth = atoms.iter().map(Clopen::depth).max().unwrap_or(0);
        let weights = atoms.iter().map(|a| a.count_at_depth(depth).expect("depth bounds atoms")).collect();
        UnitSystem { bases, atoms, orbits, charts, generators, label: label.into(), orbit_of, index, depth, weights }
    }

    /// The trivial system `({∅, X}, {1})`.
    pub fn trivial(bases: &Arc<Bases>) -> UnitSystem {
        UnitSystem::new(bases.clone(), vec![Clopen::full(bases)], vec![vec![0]], vec![Elem::identity()], "trivial")
    }

    /// One orbit per column, charts `φ^j` from the column base.
    pub fn from_kr(p: &KRPartition, label: impl Into<String>) -> UnitSystem {
        let mut atoms = Vec::new();
        let mut orbits = Vec::new();
        let mut charts = Vec::new();
        for col in &p.columns {
            let mut orbit = Vec::new();
            for (j, a) in col.iter().enumerate() {
                orbit.push(atoms.len());
                atoms.push(a.clone());
                charts.push(Elem::shift(&p.system, j as i64));
            }
            orbits.push(orbit);
        }
        UnitSystem::new(p.system.bases().clone(), atoms, orbits, charts, label)
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn orbit_of(&self, a: usize) -> usize {
        self.orbit_of[a]
    }

    pub fn rep(&self, o: usize) -> usize {
        self.orbits[o][0]
    }

    pub fn orbit_sizes(&self) -> Vec<usize> {
        self.orbits.iter().map(Vec::len).collect()
    }

    /// Indices of the atoms whose union is `u`, or `None`.
    pub fn decompose(&self, u: &Clopen) -> Option<Vec<usize>> {
        if u.is_empty() {
            return Some(Vec::new());
        }
        if u.depth() > self.depth {
            return None;
        }
        let words = u.refine_to_depth(self.depth).ok()?;
        let mut hit = vec![0u128; self.atoms.len()];
        for w in &words {
            hit[self.index.locate(w)?] += 1;
        }
        let idx: Vec<usize> = (0..self.atoms.len()).filter(|&a| hit[a] > 0).collect();
        idx.iter().all(|&a| hit[a] == self.weights[a]).then_some(idx)
    }

    pub fn is_compatible(&self, u: &Clopen) -> bool {
        self.decompose(u).is_some()
    }

    /// `(n_O(U))_O` over orbits.
    pub fn counts(&self, u: &Clopen) -> Result<Vec<usize>> {
        let idx = self.decompose(u).ok_or_else(|| Error::NotCompatible(format!("{u} at {}", self.label)))?;
        let mut c = vec![0; self.orbits.len()];
        for a in idx {
            c[self.orbit_of[a]] += 1;
        }
        Ok(c)
    }

    pub fn locate_point(&self, p: &SymbolicPoint) -> Option<usize> {
        self.index.locate(&p.prefix(self.depth))
    }

    /// The exact map from atom `a` onto atom `b` of the same orbit.
    pub fn elem_between(&self, a: usize, b: usize) -> Elem {
        self.charts[a].inverse().then(&self.charts[b])
    }

    pub fn is_orbit_permutation(&self, mapping: &[usize]) -> bool {
        let n = self.atoms.len();
        let mut seen = vec![false; n];
        mapping.len() == n
            && mapping.iter().enumerate().all(|(a, &b)| {
                b < n && !std::mem::replace(&mut seen[b], true) && self.orbit_of[a] == self.orbit_of[b]
            })
    }

    pub fn realize(&self, mapping: &[usize]) -> Move {
        let pieces = mapping
            .iter()
            .enumerate()
            .filter(|(a, b)| a != *b)
            .map(|(a, &b)| (self.atoms[a].clone(), self.elem_between(a, b)))
            .collect();
        Move { bases: self.bases.clone(), pieces }
    }

    /// Exact image of any clopen under the realized permutation.
    pub fn apply_mapping(&self, mapping: &[usize], u: &Clopen) -> Option<Clopen> {
        let mut out = Clopen::empty(&self.bases);
        for (a, &b) in mapping.iter().enumerate() {
            let part = u.intersection(&self.atoms[a]);
            if part.is_empty() {
                continue;
            }
            let img = if a == b { part } else { self.elem_between(a, b).apply(&part)? };
            out = out.union(&img);
        }
        Some(out)
    }

    pub fn apply_mapping_point(&self, mapping: &[usize], p: &SymbolicPoint) -> Option<SymbolicPoint> {
        let a = self.locate_point(p)?;
        self.elem_between(a, mapping[a]).apply_point(p)
    }

    /// A permutation carrying the atoms of `u` onto those of `v`: within each
    /// orbit the i-th atom of `u` goes to the i-th atom of `v`, and the rest in
    /// order.
    pub fn equivalence_witness(&self, u: &Clopen, v: &Clopen) -> Option<Vec<usize>> {
        let iu: HashSet<usize> = self.decompose(u)?.into_iter().collect();
        let iv: HashSet<usize> = self.decompose(v)?.into_iter().collect();
        let mut mapping = vec![0; self.atoms.len()];
        for orbit in &self.orbits {
            let (su, ru): (Vec<usize>, Vec<usize>) = orbit.iter().partition(|a| iu.contains(a));
            let (sv, rv): (Vec<usize>, Vec<usize>) = orbit.iter().partition(|a| iv.contains(a));
            if su.len() != sv.len() {
                return None;
            }
            for (a, b) in su.iter().zip(&sv).chain(ru.iter().zip(&rv)) {
                mapping[*a] = *b;
            }
        }
        Some(mapping)
    }

    /// A permutation sending the atoms of `a` into `b`, provided every orbit
    /// has strictly more atoms in `b` than in `a`.
    pub fn subequivalence_witness(&self, a: &Clopen, b: &Clopen) -> Option<Vec<usize>> {
        let ca = self.counts(a).ok()?;
        let cb = self.counts(b).ok()?;
        if ca.iter().zip(&cb).any(|(x, y)| x >= y) {
            return None;
        }
        self.injection_witness(&[(a, b)])
    }

    /// A permutation sending the atoms of each source into the matching
    /// target, with canonical-order choices. Sources must be pairwise disjoint
    /// and so must targets.
    pub fn injection_witness(&self, pairs: &[(&Clopen, &Clopen)]) -> Option<Vec<usize>> {
        let mut src = vec![None; self.atoms.len()];
        let mut dst = vec![None; self.atoms.len()];
        for (k, (s, t)) in pairs.iter().enumerate() {
            for a in self.decompose(s)? {
                src[a] = Some(k);
            }
            for a in self.decompose(t)? {
                dst[a] = Some(k);
            }
        }
        let mut mapping = vec![usize::MAX; self.atoms.len()];
        for orbit in &self.orbits {
            let mut taken = HashSet::new();
            for k in 0..pairs.len() {
                let from: Vec<usize> = orbit.iter().copied().filter(|&a| src[a] == Some(k)).collect();
                let mut to = orbit.iter().copied().filter(|&a| dst[a] == Some(k));
                for a in from {
                    let b = to.next()?;
                    mapping[a] = b;
                    taken.insert(b);
                }
            }
            let mut free = orbit.iter().copied().filter(|b| !taken.contains(b));
            for &a in orbit {
                if src[a].is_none() {
                    mapping[a] = free.next()?;
                }
            }
        }
        Some(mapping)
    }

    /// Order of the generated group, by closure; `None` past `limit`.
    pub fn closure_order(&self, limit: usize) -> Option<usize> {
        let id: Vec<usize> = (0..self.atoms.len()).collect();
        let mut seen = HashSet::from([id.clone()]);
        let mut queue = VecDeque::from([id]);
        while let Some(g) = queue.pop_front() {
            for s in &self.generators {
                let h: Vec<usize> = g.iter().map(|&x| s.image(x)).collect();
                if seen.insert(h.clone()) {
                    if seen.len() > limit {
                        return None;
                    }
                    queue.push_back(h);
                }
            }
        }
        Some(seen.len())
    }

    /// Product of the orbit factorials, saturating.
    pub fn group_order(&self) -> u128 {
        self.orbits
            .iter()
            .map(|o| (1..=o.len() as u128).fold(1u128, |acc, k| acc.saturating_mul(k)))
            .fold(1u128, |acc, f| acc.saturating_mul(f))
    }

    /// Atom-level image under the coarse move `a → b` of every fine atom
    /// inside `a`, checked to be a fine atom of the same fine orbit and to
    /// agree with the fine chart map.
    fn realized_on(&self, a: usize, b: usize, fine: &UnitSystem, children: &[usize], out: &mut Vec<(usize, usize)>) -> Option<()> {
        let e = self.elem_between(a, b);
        for &c in children {
            let atom = &fine.atoms[c];
            let img = e.apply(atom)?;
            let parts = fine.decompose(&img)?;
            let d = parts[0];
            if parts.len() != 1 || fine.orbit_of[d] != fine.orbit_of[c] {
                return None;
            }
            let ours = Move::single(atom.clone(), e.clone());
            let theirs = Move::single(atom.clone(), fine.elem_between(c, d));
            if !ours.agrees_on(&theirs, atom) {
                return None;
            }
            out.push((c, d));
        }
        Some(())
    }

    /// Fine atoms grouped by their coarse parent.
    fn children(&self, parent: &[usize]) -> Vec<Vec<usize>> {
        let mut ch = vec![Vec::new(); self.len()];
        for (c, &a) in parent.iter().enumerate() {
            ch[a].push(c);
        }
        ch
    }

    /// The permutation of `fine` atoms realizing `g`, if it exists.
    fn realized_in(&self, g: &[(usize, usize)], fine: &UnitSystem, parent: &[usize]) -> Option<Vec<usize>> {
        let ch = self.children(parent);
        let mut moves = Vec::new();
        for &(a, b) in g {
            self.realized_on(a, b, fine, &ch[a], &mut moves)?;
        }
        let mut mapping: Vec<usize> = (0..fine.len()).collect();
        for (c, d) in moves {
            mapping[c] = d;
        }
        Some(mapping)
    }

    /// For each fine atom, the coarse atom containing it.
    pub fn parents_in(&self, fine: &UnitSystem) -> Option<Vec<usize>> {
        fine.atoms
            .iter()
            .map(|c| {
                let w = c.least_word()?;
                let mut deep = w.clone();
                deep.resize(deep.len().max(self.depth), 0);
                let a = self.index.locate(&deep)?;
                c.is_subset(&self.atoms[a]).then_some(a)
            })
            .collect()
    }

    /// `fine` refines `self`: atoms nest and every generator of `self` is
    /// realized in the group of `fine`.
    pub fn is_refined_by(&self, fine: &UnitSystem) -> bool {
        let Some(parent) = self.parents_in(fine) else { return false };
        let ch = self.children(&parent);
        let mut scratch = Vec::new();
        self.generators.iter().all(|g| g.moves.iter().all(|&(a, b)| self.realized_on(a, b, fine, &ch[a], &mut scratch).is_some()))
    }

    /// Extends the permutation `g` of `self` to `fine`.
    pub fn extend_element(&self, g: &GroupElement, fine: &UnitSystem, policy: MatchPolicy) -> Result<GroupElement> {
        let parent = self.parents_in(fine).ok_or_else(|| Error::NoMatching("atoms do not nest".into()))?;
        let mapping = match policy {
            MatchPolicy::Realized => self
                .realized_in(&Generator::from_mapping("", &g.mapping).moves, fine, &parent)
                .ok_or_else(|| Error::NoMatching("element is not realized in the finer stage".into()))?,
            MatchPolicy::CanonicalOrder => {
                let mut children: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
                for (c, &a) in parent.iter().enumerate() {
                    children.entry(a).or_default().push(c);
                }
                for list in children.values_mut() {
                    list.sort_by(|x, y| fine.atoms[*x].cmp(&fine.atoms[*y]));
                }
                let mut mapping = vec![0; fine.len()];
                for (a, list) in &children {
                    let b = g.mapping[*a];
                    let target = children.get(&b).map(Vec::as_slice).unwrap_or(&[]);
                    if target.len() != list.len() {
                        return Err(Error::NoMatching(format!("atom {a} has {} parts, its image {}", list.len(), target.len())));
                    }
                    for (c, d) in list.iter().zip(target) {
                        mapping[*c] = *d;
                    }
                }
                if !fine.is_orbit_permutation(&mapping) {
                    return Err(Error::NoMatching("matching leaves the orbits of the finer stage".into()));
                }
                mapping
            }
        };
        Ok(GroupElement { stage: g.stage + 1, mapping })
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "label": self.label,
            "orbits": self.orbits.iter().map(|o| o.iter().map(|&a| self.atoms[a].to_string()).collect::<Vec<_>>()).collect::<Vec<_>>(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MatchPolicy {
    /// Children matched in canonical clopen order.
    #[default]
    CanonicalOrder,
    /// Children matched by the exact image under the realized element.
    Realized,
}

pub fn check_unit_system(us: &UnitSystem) -> Report {
    let mut r = Report::new(format!("unit system {}", us.label));
    let n = us.len();
    r.check("atoms nonempty", us.atoms.iter().all(|a| !a.is_empty()), "empty atom");
    let total: u128 = us.weights.iter().sum();
    let union = Clopen::union_all(&us.bases, &us.atoms);
    let covers = union.is_full();
    let disjoint = covers && total == us.bases.count(us.depth);
    r.check("atoms partition X", covers && disjoint, if covers { "atoms overlap" } else { "atoms do not cover X" });
    let mut listed: Vec<usize> = us.orbits.iter().flatten().copied().collect();
    listed.sort_unstable();
    r.check("orbits partition the atoms", listed == (0..n).collect::<Vec<_>>(), "orbit lists are not a partition of the atom indices");
    let mut bad_chart = 0;
    for (o, orbit) in us.orbits.iter().enumerate() {
        let rep = &us.atoms[orbit[0]];
        for &a in orbit {
            let img = us.charts.get(a).and_then(|c| c.apply(rep));
            if img.as_ref() != Some(&us.atoms[a]) || us.atoms[a].mass() != rep.mass() {
                bad_chart += 1;
                r.fail("charts map representatives onto atoms", format!("orbit {o}, atom {a}"));
            }
        }
    }
    if bad_chart == 0 {
        r.summarize("charts map representatives onto atoms", n);
    }
    let mut bad = 0;
    for g in &us.generators {
        if !us.is_orbit_permutation(&g.dense(n)) {
            bad += 1;
            r.fail("generators are orbit-preserving bijections", g.label.clone());
        }
    }
    if bad == 0 {
        r.summarize("generators are orbit-preserving bijections", us.generators.len());
    }
    let mut seen: BTreeMap<&[(usize, usize)], &str> = BTreeMap::new();
    let mut unfaithful = Vec::new();
    for g in &us.generators {
        let trivial = g.moves.is_empty();
        if trivial && g.label != "id" {
            unfaithful.push(format!("{} fixes every atom", g.label));
        }
        if let Some(prev) = seen.insert(&g.moves, &g.label) {
            if prev != g.label {
                unfaithful.push(format!("{prev} and {} act identically on atoms", g.label));
            }
        }
    }
    r.check("faithful", unfaithful.is_empty(), unfaithful.join("; "));
    let mut fixed_ok = true;
    for g in &us.generators {
        if !us.is_orbit_permutation(&g.dense(n)) {
            continue;
        }
        let dense = g.dense(n);
        let m = us.realize(&dense);
        let fixed = Clopen::union_all(&us.bases, dense.iter().enumerate().filter(|(a, b)| a == *b).map(|(a, _)| &us.atoms[a]));
        if !m.support().is_disjoint(&fixed) {
            fixed_ok = false;
        }
        for (a, &b) in dense.iter().enumerate() {
            if a != b && m.apply(&us.atoms[a]).as_ref() != Some(&us.atoms[b]) {
                fixed_ok = false;
            }
        }
    }
    r.check("fixed sets are unions of atoms", fixed_ok, "a generator moves part of an atom it should fix");
    // Orbits of the generated group against the recorded orbits.
    let mut comp: Vec<usize> = (0..n).collect();
    fn find(c: &mut [usize], x: usize) -> usize {
        let mut x = x;
        while c[x] != x {
            c[x] = c[c[x]];
            x = c[x];
        }
        x
    }
    for g in &us.generators {
        for &(a, b) in &g.moves {
            if a < n && b < n {
                let (ra, rb) = (find(&mut comp, a), find(&mut comp, b));
                comp[ra] = rb;
            }
        }
    }
    let orbits_ok = us.orbits.iter().all(|o| o.iter().all(|&a| find(&mut comp, a) == find(&mut comp, o[0])))
        && us.orbits.iter().map(|o| find(&mut comp, o[0])).collect::<HashSet<_>>().len() == us.orbits.len();
    r.check("orbits match the generated group", orbits_ok, "generated orbits differ from the recorded ones");
    r
}

/// A refining sequence of finite unit systems, generated lazily.
pub trait StageSequence: Send + Sync + fmt::Debug {
    /// One of `gamma_x`, `dyadic_perm`, `intersection`, `split_orbit`, `custom`.
    fn tag(&self) -> &str;
    fn descriptor(&self) -> String;
    fn bases(&self) -> Arc<Bases>;
    fn stage(&self, n: usize) -> Result<Arc<UnitSystem>>;

    /// A stage covering every clopen of depth `depth`.
    fn schedule(&self, depth: usize) -> usize {
        depth
    }
}

/// Memoized stages behind a mutex; the accessor behaves as a pure function.
#[derive(Debug, Default)]
pub struct StageCache(Mutex<BTreeMap<usize, Arc<UnitSystem>>>);

impl StageCache {
    pub fn get_or(&self, n: usize, build: impl FnOnce() -> Result<UnitSystem>) -> Result<Arc<UnitSystem>> {
        if let Some(s) = self.0.lock().expect("stage cache poisoned").get(&n) {
            return Ok(s.clone());
        }
        let s = Arc::new(build()?);
        Ok(self.0.lock().expect("stage cache poisoned").entry(n).or_insert(s).clone())
    }
}

/// Cylinder of depth `n` around `x`.
pub fn cylinder_around(bases: &Arc<Bases>, x: &SymbolicPoint, n: usize) -> Clopen {
    Clopen::cylinder(bases, &x.prefix(n)).expect("points are checked against the bases")
}

/// Stages of `Γ_x(φ)`: towers over `[x|n]`, compatible with depth-`n` cylinders.
#[derive(Debug)]
pub struct GammaX {
    pub system: Arc<dyn SystemHandle>,
    pub x: SymbolicPoint,
    cache: StageCache,
}

impl GammaX {
    pub fn new(system: Arc<dyn SystemHandle>, x: SymbolicPoint) -> Result<GammaX> {
        x.check(system.bases())?;
        Ok(GammaX { system, x, cache: StageCache::default() })
    }
}

impl StageSequence for GammaX {
    fn tag(&self) -> &str {
        "gamma_x"
    }
    fn descriptor(&self) -> String {
        format!("gamma_x({}, {})", self.system.descriptor(), self.x)
    }
    fn bases(&self) -> Arc<Bases> {
        self.system.bases().clone()
    }
    fn stage(&self, n: usize) -> Result<Arc<UnitSystem>> {
        self.cache.get_or(n, || {
            let base = cylinder_around(self.system.bases(), &self.x, n);
            let p = tower_over(&self.system, &base, n)?;
            Ok(UnitSystem::from_kr(&p, format!("{} stage {n}", self.descriptor())))
        })
    }
}

/// All permutations of depth-`n` cylinders, acting on prefixes.
#[derive(Debug)]
pub struct DyadicPerm {
    bases: Arc<Bases>,
    cache: StageCache,
}

impl DyadicPerm {
    pub fn new(bases: Arc<Bases>) -> DyadicPerm {
        DyadicPerm { bases, cache: StageCache::default() }
    }
}

impl Default for DyadicPerm {
    fn default() -> DyadicPerm {
        DyadicPerm::new(Bases::dyadic())
    }
}

impl StageSequence for DyadicPerm {
    fn tag(&self) -> &str {
        "dyadic_perm"
    }
    fn descriptor(&self) -> String {
        if self.bases.is_constant() == Some(2) {
            "dyadic_perm".into()
        } else {
            format!("dyadic_perm({})", self.bases)
        }
    }
    fn bases(&self) -> Arc<Bases> {
        self.bases.clone()
    }
    fn stage(&self, n: usize) -> Result<Arc<UnitSystem>> {
        self.cache.get_or(n, || {
            let words = self.bases.all_words(n);
            let rep = words[0].clone();
            let atoms = words.iter().map(|w| Clopen::cylinder(&self.bases, w)).collect::<Result<Vec<_>>>()?;
            let charts = words.iter().map(|w| Elem::prefix(rep.clone(), w.clone())).collect();
            let orbits = vec![(0..words.len()).collect()];
            Ok(UnitSystem::new(self.bases.clone(), atoms, orbits, charts, format!("dyadic_perm stage {n}")))
        })
    }
}

/// Default horizon for the distinct-orbit precondition on points.
pub const ORBIT_PROBE_HORIZON: u64 = 1 << 10;

pub fn check_distinct_orbits(sys: &dyn SystemHandle, points: &[SymbolicPoint], horizon: u64) -> Result<()> {
    for (i, p) in points.iter().enumerate() {
        p.check(sys.bases())?;
        for q in &points[i + 1..] {
            if let Some(k) = same_orbit_within(sys, p, q, horizon) {
                return Err(Error::SameOrbitDetected(k));
            }
        }
    }
    Ok(())
}

/// Stages of `Γ_x(φ) ∩ Γ_y(φ)`: towers over `[x|n] ∪ [y|n]`.
#[derive(Debug)]
pub struct Intersection {
    pub system: Arc<dyn SystemHandle>,
    pub x: SymbolicPoint,
    pub y: SymbolicPoint,
    cache: StageCache,
}

impl Intersection {
    pub fn new(system: Arc<dyn SystemHandle>, x: SymbolicPoint, y: SymbolicPoint) -> Result<Intersection> {
        check_distinct_orbits(system.as_ref(), &[x.clone(), y.clone()], ORBIT_PROBE_HORIZON)?;
        Ok(Intersection { system, x, y, cache: StageCache::default() })
    }
}

impl StageSequence for Intersection {
    fn tag(&self) -> &str {
        "intersection"
    }
    fn descriptor(&self) -> String {
        format!("intersection({}, {}, {})", self.system.descriptor(), self.x, self.y)
    }
    fn bases(&self) -> Arc<Bases> {
        self.system.bases().clone()
    }
    fn stage(&self, n: usize) -> Result<Arc<UnitSystem>> {
        self.cache.get_or(n, || {
            let b = self.system.bases();
            let base = cylinder_around(b, &self.x, n).union(&cylinder_around(b, &self.y, n));
            let p = tower_over(&self.system, &base, n)?;
            Ok(UnitSystem::from_kr(&p, format!("{} stage {n}", self.descriptor())))
        })
    }
}

/// Least stage `n ≤ max_stage` with a witness `γ(U) = V`.
pub fn orbit_equiv_clopen(s: &dyn StageSequence, u: &Clopen, v: &Clopen, max_stage: usize) -> Result<GroupElement> {
    for n in 0..=max_stage {
        let st = s.stage(n)?;
        if let Some(mapping) = st.equivalence_witness(u, v) {
            return Ok(GroupElement { stage: n, mapping });
        }
    }
    Err(Error::HorizonExceeded(format!("no witness for {u} ~ {v} in {} up to stage {max_stage}", s.descriptor())))
}

/// Exact re-verification of a witness.
pub fn verify_witness(s: &dyn StageSequence, g: &GroupElement, u: &Clopen, v: &Clopen) -> Result<bool> {
    let st = s.stage(g.stage)?;
    Ok(st.is_orbit_permutation(&g.mapping) && st.apply_mapping(&g.mapping, u).as_ref() == Some(v))
}

pub fn masses(us: &UnitSystem) -> Vec<BigRational> {
    us.atoms.iter().map(Clopen::mass).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::Odometer;

    fn c(s: &str) -> Clopen {
        Clopen::parse(&Bases::dyadic(), s).unwrap()
    }
    fn p(s: &str) -> SymbolicPoint {
        SymbolicPoint::parse(s).unwrap()
    }
    fn odo() -> Arc<dyn SystemHandle> {
        Arc::new(Odometer::dyadic())
    }
    fn gx() -> GammaX {
        GammaX::new(odo(), p("(0)")).unwrap()
    }

    #[test]
    fn gamma_x_small_stages() {
        let s = gx();
        let st = s.stage(1).unwrap();
        assert_eq!(st.atoms, vec![c("[0]"), c("[1]")]);
        assert_eq!(st.closure_order(10), Some(2));
        for n in 0..=3 {
            let st = s.stage(n).unwrap();
            assert_eq!(st.orbits.len(), 1);
            assert_eq!(st.len(), 1 << n);
            let fact: usize = (1..=(1usize << n)).product();
            assert_eq!(st.closure_order(50_000), Some(fact));
            assert!(check_unit_system(&st).passed(), "{:?}", check_unit_system(&st));
        }
    }

    #[test]
    fn dyadic_perm_orders() {
        let s = DyadicPerm::default();
        assert_eq!(s.stage(1).unwrap().closure_order(10), Some(2));
        assert_eq!(s.stage(2).unwrap().closure_order(100), Some(24));
        assert!(s.stage(1).unwrap().is_refined_by(&s.stage(2).unwrap()));
        assert!(check_unit_system(&s.stage(3).unwrap()).passed());
    }

    #[test]
    fn gamma_x_stages_nest() {
        let s = gx();
        for n in 0..4 {
            assert!(s.stage(n).unwrap().is_refined_by(&s.stage(n + 1).unwrap()), "stage {n}");
        }
    }

    #[test]
    fn extension_by_canonical_order() {
        let s = gx();
        let (s1, s2) = (s.stage(1).unwrap(), s.stage(2).unwrap());
        let swap = GroupElement { stage: 1, mapping: vec![1, 0] };
        let ext = s1.extend_element(&swap, &s2, MatchPolicy::CanonicalOrder).unwrap();
        let img = |w: &str| {
            let a = s2.atoms.iter().position(|x| x == &c(w)).unwrap();
            s2.atoms[ext.mapping[a]].to_string()
        };
        assert_eq!(img("[00]"), "[10]");
        assert_eq!(img("[01]"), "[11]");
        let real = s1.extend_element(&swap, &s2, MatchPolicy::Realized).unwrap();
        assert_eq!(real, ext);
        let id = GroupElement::identity(1, 2);
        assert!(s1.extend_element(&id, &s2, MatchPolicy::CanonicalOrder).unwrap().is_identity());
    }

    #[test]
    fn extension_count_mismatch() {
        let coarse = UnitSystem::new(
            Bases::dyadic(),
            vec![c("[0]"), c("[1]")],
            vec![vec![0, 1]],
            vec![Elem::identity(), Elem::shift(&odo(), 1)],
            "coarse",
        );
        let fine = UnitSystem::new(Bases::dyadic(), vec![c("[0]"), c("[10]"), c("[11]")], vec![vec![0], vec![1], vec![2]], vec![Elem::identity(); 3], "fine");
        let swap = GroupElement { stage: 0, mapping: vec![1, 0] };
        assert!(matches!(coarse.extend_element(&swap, &fine, MatchPolicy::CanonicalOrder), Err(Error::NoMatching(_))));
    }

    #[test]
    fn orbit_equivalence_examples() {
        let s = gx();
        let g = orbit_equiv_clopen(&s, &c("[00]"), &c("[10]"), 6).unwrap();
        assert_eq!(g.stage, 2);
        assert!(verify_witness(&s, &g, &c("[00]"), &c("[10]")).unwrap());
        let g = orbit_equiv_clopen(&s, &c("[01,1]"), &c("[01,1]"), 6).unwrap();
        assert!(g.is_identity());
    }

    #[test]
    fn seeded_unit_system_failures() {
        let s = gx();
        let st = s.stage(1).unwrap();
        let dup = UnitSystem::new(Bases::dyadic(), vec![c("[0]"), c("[0]"), c("[1]")], vec![vec![0, 1], vec![2]], vec![Elem::identity(), Elem::identity(), Elem::identity()], "dup");
        assert!(check_unit_system(&dup).failures().any(|f| f.name == "atoms partition X"));
        let mut gens = st.generators.clone();
        gens.push(Generator { label: "id".into(), moves: vec![] });
        gens.push(Generator { label: "id2".into(), moves: vec![] });
        let bad = UnitSystem::with_generators(st.bases.clone(), st.atoms.clone(), st.orbits.clone(), st.charts.clone(), gens, "unfaithful");
        assert!(check_unit_system(&bad).failures().any(|f| f.name == "faithful"));
    }

    #[test]
    fn intersection_has_two_columns() {
        let s = Intersection::new(odo(), p("(0)"), p("(01)")).unwrap();
        for n in 3..7 {
            assert!(s.stage(n).unwrap().orbits.len() >= 2);
            assert!(check_unit_system(&s.stage(n).unwrap()).passed());
        }
        assert!(matches!(Intersection::new(odo(), p("(0)"), p("1(0)")), Err(Error::SameOrbitDetected(_))));
    }
}
