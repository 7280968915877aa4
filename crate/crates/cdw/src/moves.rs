//! Exact piecewise maps: powers of the system map, prefix replacements, and
//! their compositions, glued over clopen pieces.

use std::fmt;
use std::sync::Arc;

use crate::clopen::{Bases, Clopen, SymbolicPoint, Word};
use crate::dynamics::SystemHandle;

/// A partial homeomorphism applied to a piece of X.
#[derive(Clone)]
pub enum Elem {
    /// `φ^k`.
    Shift(Arc<dyn SystemHandle>, i64),
    /// `from·t ↦ to·t`, with `|from| = |to|`.
    Prefix { from: Word, to: Word },
    /// Left to right composition.
    Seq(Vec<Elem>),
}

fn same_system(a: &Arc<dyn SystemHandle>, b: &Arc<dyn SystemHandle>) -> bool {
    std::ptr::eq(Arc::as_ptr(a) as *const u8, Arc::as_ptr(b) as *const u8) || a.descriptor() == b.descriptor()
}

impl Elem {
    pub fn identity() -> Elem {
        Elem::Seq(Vec::new())
    }

    pub fn shift(sys: &Arc<dyn SystemHandle>, k: i64) -> Elem {
        if k == 0 {
            Elem::identity()
        } else {
            Elem::Shift(sys.clone(), k)
        }
    }

    /// A prefix replacement with common trailing letters stripped.
    pub fn prefix(mut from: Word, mut to: Word) -> Elem {
        assert_eq!(from.len(), to.len(), "prefix replacement must keep lengths");
        while from.last().is_some() && from.last() == to.last() {
            from.pop();
            to.pop();
        }
        if from.is_empty() {
            Elem::identity()
        } else {
            Elem::Prefix { from, to }
        }
    }

    pub fn is_identity(&self) -> bool {
        match self {
            Elem::Shift(_, k) => *k == 0,
            Elem::Prefix { from, to } => from == to,
            Elem::Seq(v) => v.iter().all(Elem::is_identity),
        }
    }

    /// Image of `c`; `None` if `c` leaves the domain of a prefix replacement.
    pub fn apply(&self, c: &Clopen) -> Option<Clopen> {
        match self {
            Elem::Shift(s, k) => Some(s.power_clopen(c, *k)),
            Elem::Prefix { from, to } => {
                let mut out = Vec::with_capacity(c.words().len());
                for w in c.words() {
                    if !w.starts_with(from) {
                        return None;
                    }
                    let mut v = to.clone();
                    v.extend_from_slice(&w[from.len()..]);
                    out.push(v);
                }
                Clopen::normalize(c.bases(), out).ok()
            }
            Elem::Seq(v) => v.iter().try_fold(c.clone(), |acc, e| e.apply(&acc)),
        }
    }

    pub fn apply_point(&self, p: &SymbolicPoint) -> Option<SymbolicPoint> {
        match self {
            Elem::Shift(s, k) => Some(s.power_point(p, *k)),
            Elem::Prefix { from, to } => (p.prefix(from.len()) == *from).then(|| p.splice(to.clone(), from.len())),
            Elem::Seq(v) => v.iter().try_fold(p.clone(), |acc, e| e.apply_point(&acc)),
        }
    }

    pub fn inverse(&self) -> Elem {
        match self {
            Elem::Shift(s, k) => Elem::Shift(s.clone(), -k),
            Elem::Prefix { from, to } => Elem::Prefix { from: to.clone(), to: from.clone() },
            Elem::Seq(v) => Elem::Seq(v.iter().rev().map(Elem::inverse).collect()),
        }
    }

    fn flatten_into(&self, out: &mut Vec<Elem>) {
        match self {
            Elem::Seq(v) => v.iter().for_each(|e| e.flatten_into(out)),
            e if e.is_identity() => {}
            e => out.push(e.clone()),
        }
    }

    /// `next ∘ self`, simplified where adjacent factors merge.
    pub fn then(&self, next: &Elem) -> Elem {
        let mut flat = Vec::new();
        self.flatten_into(&mut flat);
        next.flatten_into(&mut flat);
        let mut stack: Vec<Elem> = Vec::with_capacity(flat.len());
        for e in flat {
            let merged = match (stack.last(), &e) {
                (Some(Elem::Shift(s, a)), Elem::Shift(t, b)) if same_system(s, t) => Some(Elem::shift(s, a + b)),
                (Some(Elem::Prefix { from, to }), Elem::Prefix { from: f2, to: t2 }) => {
                    if to.starts_with(f2) {
                        let mut img = t2.clone();
                        img.extend_from_slice(&to[f2.len()..]);
                        Some(Elem::prefix(from.clone(), img))
                    } else if f2.starts_with(to) {
                        let mut dom = from.clone();
                        dom.extend_from_slice(&f2[to.len()..]);
                        Some(Elem::prefix(dom, t2.clone()))
                    } else {
                        None
                    }
                }
                _ => None,
            };
            match merged {
                Some(m) => {
                    stack.pop();
                    if !m.is_identity() {
                        stack.push(m);
                    }
                }
                None => stack.push(e),
            }
        }
        if stack.len() == 1 {
            stack.pop().expect("one element")
        } else {
            Elem::Seq(stack)
        }
    }

    /// Longest prefix word involved; maps agree on a piece once they agree on
    /// the cylinders a little deeper than this.
    pub fn prefix_depth(&self) -> usize {
        match self {
            Elem::Shift(..) => 0,
            Elem::Prefix { from, .. } => from.len(),
            Elem::Seq(v) => v.iter().map(Elem::prefix_depth).max().unwrap_or(0),
        }
    }
}

impl PartialEq for Elem {
    fn eq(&self, other: &Elem) -> bool {
        match (self, other) {
            (Elem::Shift(s, a), Elem::Shift(t, b)) => a == b && same_system(s, t),
            (Elem::Prefix { from: f1, to: t1 }, Elem::Prefix { from: f2, to: t2 }) => f1 == f2 && t1 == t2,
            (Elem::Seq(a), Elem::Seq(b)) => a == b,
            _ => false,
        }
    }
}

impl fmt::Display for Elem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Elem::Shift(_, k) => write!(f, "shift({k})"),
            Elem::Prefix { from, to } => {
                write!(f, "prefix({}->{})", crate::clopen::word_string(from), crate::clopen::word_string(to))
            }
            Elem::Seq(v) if v.is_empty() => write!(f, "id"),
            Elem::Seq(v) => {
                let parts: Vec<String> = v.iter().map(|e| e.to_string()).collect();
                write!(f, "{}", parts.join(";"))
            }
        }
    }
}

impl fmt::Debug for Elem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

/// A map of X given on disjoint clopen pieces; the identity off their union.
#[derive(Clone, Debug)]
pub struct Move {
    pub bases: Arc<Bases>,
    pub pieces: Vec<(Clopen, Elem)>,
}

impl Move {
    pub fn identity(bases: &Arc<Bases>) -> Move {
        Move { bases: bases.clone(), pieces: Vec::new() }
    }

    pub fn single(piece: Clopen, elem: Elem) -> Move {
        let bases = piece.bases().clone();
        let pieces = if piece.is_empty() || elem.is_identity() { vec![] } else { vec![(piece, elem)] };
        Move { bases, pieces }
    }

    pub fn support(&self) -> Clopen {
        Clopen::union_all(&self.bases, self.pieces.iter().map(|(p, _)| p))
    }

    pub fn apply(&self, c: &Clopen) -> Option<Clopen> {
        let mut out = Clopen::empty(&self.bases);
        let mut rest = c.clone();
        for (p, e) in &self.pieces {
            let part = c.intersection(p);
            if !part.is_empty() {
                out = out.union(&e.apply(&part)?);
                rest = rest.difference(p);
            }
        }
        Some(out.union(&rest))
    }

    pub fn apply_point(&self, x: &SymbolicPoint) -> Option<SymbolicPoint> {
        match self.pieces.iter().find(|(p, _)| p.contains_point(x)) {
            Some((_, e)) => e.apply_point(x),
            None => Some(x.clone()),
        }
    }

    pub fn inverse(&self) -> Option<Move> {
        let pieces = self
            .pieces
            .iter()
            .map(|(p, e)| Some((e.apply(p)?, e.inverse())))
            .collect::<Option<Vec<_>>>()?;
        Some(Move { bases: self.bases.clone(), pieces })
    }

    /// `next ∘ self`.
    pub fn then(&self, next: &Move) -> Option<Move> {
        let mut pieces = Vec::new();
        for (p, e) in &self.pieces {
            let q = e.apply(p)?;
            let inv = e.inverse();
            let mut rem = q.clone();
            for (p2, e2) in &next.pieces {
                let r = q.intersection(p2);
                if !r.is_empty() {
                    pieces.push((inv.apply(&r)?, e.then(e2)));
                    rem = rem.difference(p2);
                }
            }
            if !rem.is_empty() {
                pieces.push((inv.apply(&rem)?, e.clone()));
            }
        }
        let outside = self.support().complement();
        for (p2, e2) in &next.pieces {
            let r = outside.intersection(p2);
            if !r.is_empty() {
                pieces.push((r, e2.clone()));
            }
        }
        pieces.retain(|(p, e)| !p.is_empty() && !e.is_identity());
        Some(Move { bases: self.bases.clone(), pieces })
    }

    pub fn restrict(&self, piece: &Clopen) -> Move {
        let pieces = self
            .pieces
            .iter()
            .map(|(p, e)| (p.intersection(piece), e.clone()))
            .filter(|(p, _)| !p.is_empty())
            .collect();
        Move { bases: self.bases.clone(), pieces }
    }

    /// Finite-depth agreement of two maps on `piece`: images of all cylinders
    /// two levels below every prefix involved must coincide.
    pub fn agrees_on(&self, other: &Move, piece: &Clopen) -> bool {
        let depth = self
            .pieces
            .iter()
            .chain(other.pieces.iter())
            .map(|(p, e)| p.depth().max(e.prefix_depth()))
            .max()
            .unwrap_or(0)
            .max(piece.depth())
            + 2;
        let Ok(words) = piece.refine_to_depth(depth) else { return false };
        words.iter().all(|w| {
            let c = Clopen::cylinder(&self.bases, w).expect("refined words are valid");
            let a = self.apply(&c);
            a.is_some() && a == other.apply(&c)
        })
    }
}
