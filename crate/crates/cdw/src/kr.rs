//! Kakutani–Rokhlin partitions: first-return towers, compatibility
//! refinement, cutting and stacking.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::sync::Arc;

use num_rational::BigRational;
use num_traits::{One, Zero};

use crate::clopen::{Clopen, Word};
use crate::dynamics::{Direction, SystemHandle};
use crate::error::{Error, Result};
use crate::report::Report;

/// Maps any sufficiently long word to the atom whose cylinder contains it.
#[derive(Clone, Debug, Default)]
pub struct AtomIndex {
    map: HashMap<Word, usize>,
    lengths: Vec<usize>,
}

impl AtomIndex {
    pub fn new<'a>(atoms: impl IntoIterator<Item = &'a Clopen>) -> AtomIndex {
        let mut map = HashMap::new();
        let mut lengths = HashSet::new();
        for (i, a) in atoms.into_iter().enumerate() {
            for w in a.words() {
                lengths.insert(w.len());
                map.insert(w.clone(), i);
            }
        }
        let mut lengths: Vec<usize> = lengths.into_iter().collect();
        lengths.sort_unstable();
        AtomIndex { map, lengths }
    }

    pub fn max_depth(&self) -> usize {
        self.lengths.last().copied().unwrap_or(0)
    }

    /// Atom containing `[w]`; `None` if `[w]` straddles atoms or is uncovered.
    pub fn locate(&self, w: &[u8]) -> Option<usize> {
        self.lengths.iter().take_while(|&&l| l <= w.len()).find_map(|&l| self.map.get(&w[..l]).copied())
    }

    /// Indices of the atoms whose union is `u`, or `None` if `u` is not such a
    /// union. Assumes the indexed atoms partition the space.
    pub fn atoms_in(&self, u: &Clopen, atoms: &[Clopen]) -> Option<Vec<usize>> {
        let mut found = BTreeMap::new();
        for w in u.words() {
            match self.locate(w) {
                Some(i) => {
                    found.insert(i, ());
                }
                None => {
                    // `[w]` is a union of several atoms: collect those lying inside it.
                    let mut any = false;
                    for (i, a) in atoms.iter().enumerate() {
                        if a.inside_cylinder(w) {
                            found.insert(i, ());
                            any = true;
                        } else if a.words().iter().any(|v| w.starts_with(v)) {
                            return None;
                        }
                    }
                    if !any {
                        return None;
                    }
                }
            }
        }
        let idx: Vec<usize> = found.into_keys().collect();
        let total = Clopen::union_all(u.bases(), idx.iter().map(|&i| &atoms[i]));
        (&total == u).then_some(idx)
    }
}

/// Membership test for depth-≥`depth(u)` cylinders.
struct Member {
    set: HashSet<Word>,
    lengths: Vec<usize>,
}

impl Member {
    fn new(u: &Clopen) -> Member {
        let set: HashSet<Word> = u.words().iter().cloned().collect();
        let mut lengths: Vec<usize> = set.iter().map(Vec::len).collect();
        lengths.sort_unstable();
        lengths.dedup();
        Member { set, lengths }
    }

    fn contains(&self, w: &[u8]) -> bool {
        self.lengths.iter().any(|&l| l <= w.len() && self.set.contains(&w[..l]))
    }
}

/// Ordered columns of clopen atoms, each column mapped upward by `φ`.
#[derive(Clone, Debug)]
pub struct KRPartition {
    pub columns: Vec<Vec<Clopen>>,
    pub base: Clopen,
    pub top: Clopen,
    pub system: Arc<dyn SystemHandle>,
}

impl KRPartition {
    /// Sorts columns by (height, least base word) and fills in base and top.
    pub fn from_columns(system: Arc<dyn SystemHandle>, mut columns: Vec<Vec<Clopen>>) -> KRPartition {
        columns.retain(|c| !c.is_empty());
        columns.sort_by(|a, b| (a.len(), a[0].least_word()).cmp(&(b.len(), b[0].least_word())));
        let bases = system.bases().clone();
        let base = Clopen::union_all(&bases, columns.iter().map(|c| &c[0]));
        let top = Clopen::union_all(&bases, columns.iter().map(|c| c.last().expect("nonempty column")));
        KRPartition { columns, base, top, system }
    }

    pub fn atoms(&self) -> impl Iterator<Item = &Clopen> {
        self.columns.iter().flatten()
    }

    pub fn heights(&self) -> Vec<usize> {
        self.columns.iter().map(Vec::len).collect()
    }

    pub fn atom_count(&self) -> usize {
        self.columns.iter().map(Vec::len).sum()
    }

    fn max_atom_depth(&self) -> usize {
        self.atoms().map(Clopen::depth).max().unwrap_or(0)
    }

    /// Whether `u` is a union of atoms.
    pub fn is_compatible(&self, u: &Clopen) -> bool {
        self.atoms().all(|a| a.is_subset(u) || a.is_disjoint(u))
    }

    /// JSON export: a list of columns, each a list of clopen strings.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::Value::Array(
            self.columns
                .iter()
                .map(|c| serde_json::Value::Array(c.iter().map(|a| a.to_string().into()).collect()))
                .collect(),
        )
    }

    pub fn to_dot(&self) -> String {
        let mut s = String::from("digraph tower {\n  rankdir=BT;\n");
        for (i, col) in self.columns.iter().enumerate() {
            let _ = writeln!(s, "  subgraph cluster_{i} {{\n    label=\"column {i}\";");
            for (j, a) in col.iter().enumerate() {
                let _ = writeln!(s, "    c{i}_{j} [label=\"{a}\"];");
            }
            for j in 1..col.len() {
                let _ = writeln!(s, "    c{i}_{} -> c{i}_{j};", j - 1);
            }
            s.push_str("  }\n");
        }
        s.push_str("}\n");
        s
    }
}

pub fn default_bound(u: &Clopen) -> u64 {
    1u64 << (u.depth() + 4).min(62)
}

/// Columns over base words of a common depth, for systems that map cylinders
/// to cylinders. Base words are grouped by return time and by `key` applied to
/// the visited words.
fn cylinder_columns<K: Ord>(
    sys: &Arc<dyn SystemHandle>,
    base_words: &[Word],
    bound: u64,
    key: impl Fn(&[u8]) -> K,
) -> Option<Result<Vec<Vec<Clopen>>>> {
    sys.cylinder_map(&base_words.first()?.clone(), 1)?;
    let in_base: HashSet<&Word> = base_words.iter().collect();
    let mut groups: BTreeMap<(usize, Vec<K>), Vec<Word>> = BTreeMap::new();
    for w in base_words {
        let mut trace = vec![key(w)];
        let mut cur = w.clone();
        let mut t = 0u64;
        loop {
            cur = sys.cylinder_map(&cur, 1).expect("cylinder map is total");
            t += 1;
            if in_base.contains(&cur) {
                break;
            }
            if t > bound {
                return Some(Err(Error::NonMinimalTimeout(bound)));
            }
            trace.push(key(&cur));
        }
        groups.entry((t as usize, trace)).or_default().push(w.clone());
    }
    let bases = sys.bases().clone();
    let mut columns = Vec::new();
    for ((h, _), ws) in groups {
        let mut col = Vec::with_capacity(h);
        let mut level = ws;
        for j in 0..h {
            if j > 0 {
                level = level.iter().map(|w| sys.cylinder_map(w, 1).expect("total")).collect();
            }
            let mut sorted = level.clone();
            sorted.sort();
            col.push(Clopen::from_sorted(&bases, &sorted));
        }
        columns.push(col);
    }
    Some(Ok(columns))
}

/// The tower of first returns to `u`.
pub fn first_return_partition(sys: &Arc<dyn SystemHandle>, u: &Clopen, bound: Option<u64>) -> Result<KRPartition> {
    if u.is_empty() {
        return Err(Error::HypothesisViolated("first-return base must be nonempty".into()));
    }
    let bound = bound.unwrap_or_else(|| default_bound(u));
    if u.is_full() {
        return Ok(KRPartition::from_columns(sys.clone(), vec![vec![u.clone()]]));
    }
    let words = u.refine_to_depth(u.depth())?;
    if let Some(cols) = cylinder_columns(sys, &words, bound, |_| ()) {
        return Ok(KRPartition::from_columns(sys.clone(), cols?));
    }
    // Generic path: T_1 = φ(U), R_i = T_i ∩ U, T_{i+1} = φ(T_i \ U).
    let mut columns = Vec::new();
    let mut t = sys.apply_clopen(u, Direction::Forward);
    let mut i = 1i64;
    while !t.is_empty() {
        if i as u64 > bound {
            return Err(Error::NonMinimalTimeout(bound));
        }
        let r = t.intersection(u);
        if !r.is_empty() {
            let ui = sys.power_clopen(&r, -i);
            let mut col = vec![ui.clone()];
            for _ in 1..i {
                let next = sys.apply_clopen(col.last().expect("nonempty"), Direction::Forward);
                col.push(next);
            }
            columns.push(col);
        }
        t = sys.apply_clopen(&t.difference(u), Direction::Forward);
        i += 1;
    }
    Ok(KRPartition::from_columns(sys.clone(), columns))
}

/// First-return tower over `base`, made compatible with every cylinder of
/// depth `compat_depth`.
pub fn tower_over(sys: &Arc<dyn SystemHandle>, base: &Clopen, compat_depth: usize) -> Result<KRPartition> {
    let d = base.depth().max(compat_depth);
    let words = base.refine_to_depth(d)?;
    let bound = default_bound(base).max(sys.bases().count(d).min(u64::MAX as u128) as u64);
    if !base.is_full() || compat_depth > 0 {
        if let Some(cols) = cylinder_columns(sys, &words, bound, |w| w[..compat_depth].to_vec()) {
            return Ok(KRPartition::from_columns(sys.clone(), cols?));
        }
    }
    let mut p = first_return_partition(sys, base, Some(bound))?;
    for w in sys.bases().all_words(compat_depth) {
        p = make_compatible(&p, &Clopen::cylinder(sys.bases(), &w)?);
    }
    Ok(p)
}

/// Splits each column by the trace pattern of its base points with respect
/// to `u`, so that `u` becomes a union of atoms.
pub fn make_compatible(p: &KRPartition, u: &Clopen) -> KRPartition {
    if p.is_compatible(u) {
        return p.clone();
    }
    let sys = &p.system;
    let d = p.max_atom_depth().max(u.depth());
    let member = Member::new(u);
    let mut columns = Vec::new();
    for col in &p.columns {
        let h = col.len() as i64;
        if let (Ok(words), Some(_)) = (col[0].refine_to_depth(d), sys.cylinder_map(&[0], 0)) {
            let mut groups: BTreeMap<Vec<bool>, Vec<Word>> = BTreeMap::new();
            for w in words {
                let trace: Vec<bool> = (0..h).map(|j| member.contains(&sys.cylinder_map(&w, j).expect("total"))).collect();
                groups.entry(trace).or_default().push(w);
            }
            for ws in groups.into_values() {
                let b = Clopen::from_sorted(sys.bases(), &ws);
                columns.push(stack(sys, &b, h));
            }
        } else {
            let mut pieces = vec![col[0].clone()];
            for j in 0..h {
                let pre = sys.power_clopen(u, -j);
                pieces = pieces
                    .into_iter()
                    .flat_map(|s| [s.intersection(&pre), s.difference(&pre)])
                    .filter(|s| !s.is_empty())
                    .collect();
            }
            for b in pieces {
                columns.push(stack(sys, &b, h));
            }
        }
    }
    KRPartition::from_columns(sys.clone(), columns)
}

fn stack(sys: &Arc<dyn SystemHandle>, b: &Clopen, h: i64) -> Vec<Clopen> {
    let mut col = vec![b.clone()];
    for _ in 1..h {
        let next = sys.apply_clopen(col.last().expect("nonempty"), Direction::Forward);
        col.push(next);
    }
    col
}

/// The tower over `v ⊆ base(P)`, with columns cut so that it refines `P`.
pub fn shrink_base(p: &KRPartition, v: &Clopen) -> Result<KRPartition> {
    if v.is_empty() || !v.is_subset(&p.base) {
        return Err(Error::HypothesisViolated(format!("{v} must be a nonempty subset of the base {}", p.base)));
    }
    if v == &p.base {
        return Ok(p.clone());
    }
    let sys = &p.system;
    let atoms: Vec<Clopen> = p.atoms().cloned().collect();
    let index = AtomIndex::new(&atoms);
    let d = v.depth().max(index.max_depth());
    let words = v.refine_to_depth(d)?;
    let bound = default_bound(v).max(sys.bases().count(d).min(u64::MAX as u128) as u64);
    if let Some(cols) = cylinder_columns(sys, &words, bound, |w| index.locate(w)) {
        return Ok(KRPartition::from_columns(sys.clone(), cols?));
    }
    let mut q = first_return_partition(sys, v, Some(bound))?;
    for a in &atoms {
        q = make_compatible(&q, a);
    }
    Ok(q)
}

/// Whether every atom of `fine` lies inside an atom of `coarse` and the bases
/// are nested.
pub fn refines(fine: &KRPartition, coarse: &KRPartition) -> bool {
    fine.base.is_subset(&coarse.base) && fine.atoms().all(|a| coarse.atoms().any(|b| a.is_subset(b)))
}

pub fn verify_kr(p: &KRPartition) -> Report {
    let mut r = Report::new("kr");
    let bases = p.system.bases().clone();
    let atoms: Vec<&Clopen> = p.atoms().collect();
    r.check("atoms nonempty", atoms.iter().all(|a| !a.is_empty()), "empty atom present");
    let mut total = BigRational::zero();
    let mut union = Clopen::empty(&bases);
    for a in &atoms {
        total += a.mass();
        union = union.union(a);
    }
    r.check("atoms cover X", union.is_full(), format!("uncovered: {}", union.complement()));
    r.check("atoms pairwise disjoint", total == BigRational::one() || !union.is_full(), "masses sum above one");
    let mut bad = 0;
    for (i, col) in p.columns.iter().enumerate() {
        for j in 0..col.len().saturating_sub(1) {
            let img = p.system.apply_clopen(&col[j], Direction::Forward);
            if img != col[j + 1] {
                bad += 1;
                r.fail("phi(U_ij) = U_i,j+1", format!("column {i}, level {j}: {img} != {}", col[j + 1]));
            }
        }
    }
    if bad == 0 {
        r.summarize("phi(U_ij) = U_i,j+1", atoms.len());
    }
    let base = Clopen::union_all(&bases, p.columns.iter().map(|c| &c[0]));
    let top = Clopen::union_all(&bases, p.columns.iter().filter_map(|c| c.last()));
    r.check("base is union of column bottoms", base == p.base, format!("base {} but bottoms {}", p.base, base));
    r.check("top is union of column tops", top == p.top, format!("top {} but tops {}", p.top, top));
    let img = p.system.apply_clopen(&p.top, Direction::Forward);
    r.check("phi(top) = base", img == p.base, format!("phi(top) = {img}, base {}", p.base));
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clopen::Bases;
    use crate::dynamics::Odometer;

    fn c(s: &str) -> Clopen {
        Clopen::parse(&Bases::dyadic(), s).unwrap()
    }
    fn sys() -> Arc<dyn SystemHandle> {
        Arc::new(Odometer::dyadic())
    }
    fn strings(p: &KRPartition) -> Vec<Vec<String>> {
        p.columns.iter().map(|col| col.iter().map(|a| a.to_string()).collect()).collect()
    }

    #[test]
    fn first_return_examples() {
        let p = first_return_partition(&sys(), &c("[0]"), None).unwrap();
        assert_eq!(strings(&p), vec![vec!["[0]", "[1]"]]);
        let p = first_return_partition(&sys(), &c("[00]"), None).unwrap();
        assert_eq!(strings(&p), vec![vec!["[00]", "[10]", "[01]", "[11]"]]);
        let p = first_return_partition(&sys(), &c("[e]"), None).unwrap();
        assert_eq!(strings(&p), vec![vec!["[e]"]]);
        assert!(verify_kr(&p).passed());
    }

    #[test]
    fn compatibility() {
        let p = first_return_partition(&sys(), &c("[0]"), None).unwrap();
        let q = make_compatible(&p, &c("[01]"));
        assert!(q.atoms().any(|a| a == &c("[01]")));
        assert!(verify_kr(&q).passed());
        assert_eq!(strings(&make_compatible(&p, &c("[e]"))), strings(&p));
        assert_eq!(strings(&make_compatible(&p, &c("[1]"))), strings(&p));
        assert_eq!(strings(&make_compatible(&q, &c("[01]"))), strings(&q));
    }

    #[test]
    fn shrinking() {
        let p = first_return_partition(&sys(), &c("[0]"), None).unwrap();
        let q = shrink_base(&p, &c("[00]")).unwrap();
        assert_eq!(strings(&q), strings(&first_return_partition(&sys(), &c("[00]"), None).unwrap()));
        assert_eq!(strings(&shrink_base(&p, &c("[0]")).unwrap()), strings(&p));
        let p2 = first_return_partition(&sys(), &c("[00]"), None).unwrap();
        let q2 = shrink_base(&p2, &c("[000]")).unwrap();
        assert_eq!(q2.heights(), vec![8]);
    }

    #[test]
    fn seeded_failures() {
        let p = first_return_partition(&sys(), &c("[00]"), None).unwrap();
        let mut broken = p.clone();
        broken.columns[0].swap(1, 2);
        let r = verify_kr(&broken);
        assert!(r.failures().any(|f| f.name.starts_with("phi(U_ij)")));
        let mut rebased = first_return_partition(&sys(), &c("[0]"), None).unwrap();
        rebased.base = c("[1]");
        let r = verify_kr(&rebased);
        assert!(r.failures().any(|f| f.name == "base is union of column bottoms"));
    }

    #[test]
    fn exports() {
        let p = first_return_partition(&sys(), &c("[0]"), None).unwrap();
        assert_eq!(p.to_json().to_string(), r#"[["[0]","[1]"]]"#);
        assert!(p.to_dot().contains("c0_0 -> c0_1"));
    }

    #[test]
    fn tower_with_compatibility_depth() {
        let p = tower_over(&sys(), &c("[00,01]"), 2).unwrap();
        assert!(verify_kr(&p).passed());
        for w in ["[00]", "[01]", "[10]", "[11]"] {
            assert!(p.is_compatible(&c(w)));
        }
    }
}
