//! Clopen subsets of a Cantor space, stored as reduced prefix-free antichains
//! of cylinder words, and eventually periodic points.

use std::fmt;
use std::sync::Arc;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Zero};

use crate::error::{Error, Result};

pub type Letter = u8;
pub type Word = Vec<Letter>;

/// Shortest (pre, per) describing the same eventually periodic sequence.
fn canonical_eventual(mut pre: Vec<u8>, per: Vec<u8>) -> (Vec<u8>, Vec<u8>) {
    let n = per.len();
    let p = (1..=n)
        .find(|&p| n % p == 0 && (0..n).all(|i| per[i] == per[i % p]))
        .unwrap_or(n);
    let mut per: Vec<u8> = per[..p].to_vec();
    while let (Some(&a), Some(&b)) = (pre.last(), per.last()) {
        if a != b {
            break;
        }
        pre.pop();
        per.rotate_right(1);
    }
    (pre, per)
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

/// The alphabet size at each coordinate. Eventually periodic; constant 2 is the
/// dyadic case.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Bases {
    pre: Vec<u8>,
    per: Vec<u8>,
}

impl Bases {
    pub fn constant(b: u8) -> Arc<Bases> {
        assert!(b >= 2, "base must be at least 2");
        Arc::new(Bases { pre: vec![], per: vec![b] })
    }

    pub fn dyadic() -> Arc<Bases> {
        Bases::constant(2)
    }

    pub fn new(pre: Vec<u8>, per: Vec<u8>) -> Result<Arc<Bases>> {
        if per.is_empty() {
            return Err(Error::Parse("empty periodic base part".into()));
        }
        if pre.iter().chain(per.iter()).any(|&b| b < 2 || b > 10) {
            return Err(Error::Parse("bases must lie in 2..=10".into()));
        }
        let (pre, per) = canonical_eventual(pre, per);
        Ok(Arc::new(Bases { pre, per }))
    }

    /// Parses "2" or "2,3|2" (preperiodic part, then periodic part).
    pub fn parse(s: &str) -> Result<Arc<Bases>> {
        let nums = |t: &str| -> Result<Vec<u8>> {
            t.split(',')
                .filter(|x| !x.trim().is_empty())
                .map(|x| x.trim().parse::<u8>().map_err(|_| Error::Parse(format!("bad base `{x}`"))))
                .collect()
        };
        match s.split_once('|') {
            Some((a, b)) => Bases::new(nums(a)?, nums(b)?),
            None => Bases::new(vec![], nums(s)?),
        }
    }

    pub fn at(&self, i: usize) -> u8 {
        if i < self.pre.len() {
            self.pre[i]
        } else {
            self.per[(i - self.pre.len()) % self.per.len()]
        }
    }

    pub fn preperiod(&self) -> &[u8] {
        &self.pre
    }

    pub fn period(&self) -> &[u8] {
        &self.per
    }

    /// Number of words of length `d`, saturating at `u128::MAX`.
    pub fn count(&self, d: usize) -> u128 {
        (0..d).fold(1u128, |acc, i| acc.saturating_mul(self.at(i) as u128))
    }

    /// Number of words of length `to` extending a fixed word of length `from`.
    pub fn count_between(&self, from: usize, to: usize) -> u128 {
        (from..to).fold(1u128, |acc, i| acc.saturating_mul(self.at(i) as u128))
    }

    pub fn is_constant(&self) -> Option<u8> {
        (self.pre.is_empty() && self.per.len() == 1).then(|| self.per[0])
    }

    pub fn check_word(&self, w: &[Letter]) -> Result<()> {
        for (pos, &letter) in w.iter().enumerate() {
            let base = self.at(pos);
            if letter >= base {
                return Err(Error::InvalidLetter { letter, pos, base });
            }
        }
        Ok(())
    }

    /// All words of length `d` in lexicographic order.
    pub fn all_words(&self, d: usize) -> Vec<Word> {
        let mut out = vec![Vec::new()];
        for i in 0..d {
            let b = self.at(i);
            out = out
                .into_iter()
                .flat_map(|w| {
                    (0..b).map(move |c| {
                        let mut v = w.clone();
                        v.push(c);
                        v
                    })
                })
                .collect();
        }
        out
    }
}

impl fmt::Display for Bases {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |v: &[u8]| v.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(",");
        if self.pre.is_empty() {
            write!(f, "{}", join(&self.per))
        } else {
            write!(f, "{}|{}", join(&self.pre), join(&self.per))
        }
    }
}

pub fn word_string(w: &[Letter]) -> String {
    if w.is_empty() {
        "e".into()
    } else {
        w.iter().map(|&c| char::from(b'0' + c)).collect()
    }
}

pub fn parse_word(s: &str) -> Result<Word> {
    if s == "e" {
        return Ok(vec![]);
    }
    s.chars()
        .map(|c| c.to_digit(10).map(|d| d as u8).ok_or_else(|| Error::Parse(format!("bad letter `{c}`"))))
        .collect()
}

#[derive(Clone, Copy)]
enum Side<'a> {
    Empty,
    Full,
    Words(&'a [Word]),
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Node {
    Empty,
    Full,
    Mixed,
}

fn side_of<'a>(slice: &'a [Word], depth: usize) -> Side<'a> {
    match slice.first() {
        None => Side::Empty,
        Some(w) if w.len() == depth => Side::Full,
        Some(_) => Side::Words(slice),
    }
}

fn child<'a>(s: Side<'a>, depth: usize, c: Letter) -> Side<'a> {
    match s {
        Side::Words(ws) => {
            let lo = ws.partition_point(|w| w[depth] < c);
            let hi = ws.partition_point(|w| w[depth] <= c);
            side_of(&ws[lo..hi], depth + 1)
        }
        other => other,
    }
}

/// Simultaneous descent through two sorted word lists. Writes the canonical
/// words of the result below `prefix` into `out`.
fn combine_rec(
    bases: &Bases,
    prefix: &mut Word,
    a: Side<'_>,
    b: Side<'_>,
    op: &dyn Fn(bool, bool) -> bool,
    out: &mut Vec<Word>,
) -> Node {
    let flat = |s: Side<'_>| match s {
        Side::Empty => Some(false),
        Side::Full => Some(true),
        Side::Words(_) => None,
    };
    if let (Some(x), Some(y)) = (flat(a), flat(b)) {
        return if op(x, y) { Node::Full } else { Node::Empty };
    }
    let depth = prefix.len();
    let start = out.len();
    let (mut all_full, mut all_empty) = (true, true);
    for c in 0..bases.at(depth) {
        prefix.push(c);
        let r = combine_rec(bases, prefix, child(a, depth, c), child(b, depth, c), op, out);
        match r {
            Node::Full => {
                out.push(prefix.clone());
                all_empty = false;
            }
            Node::Empty => all_full = false,
            Node::Mixed => {
                all_full = false;
                all_empty = false;
            }
        }
        prefix.pop();
    }
    if all_full {
        out.truncate(start);
        Node::Full
    } else if all_empty {
        Node::Empty
    } else {
        Node::Mixed
    }
}

fn combine_words(bases: &Bases, a: &[Word], b: &[Word], op: &dyn Fn(bool, bool) -> bool) -> Vec<Word> {
    let mut out = Vec::new();
    let mut prefix = Vec::new();
    match combine_rec(bases, &mut prefix, side_of(a, 0), side_of(b, 0), op, &mut out) {
        Node::Full => vec![vec![]],
        Node::Empty => vec![],
        Node::Mixed => out,
    }
}

/// A clopen set: a canonical (reduced, prefix-free, sorted) list of words.
///
/// `[]` is the empty set and `[e]` (the empty word) is the whole space.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Clopen {
    words: Vec<Word>,
    bases: Arc<Bases>,
}

impl Clopen {
    pub fn empty(bases: &Arc<Bases>) -> Clopen {
        Clopen { words: vec![], bases: bases.clone() }
    }

    pub fn full(bases: &Arc<Bases>) -> Clopen {
        Clopen { words: vec![vec![]], bases: bases.clone() }
    }

    pub fn cylinder(bases: &Arc<Bases>, w: &[Letter]) -> Result<Clopen> {
        bases.check_word(w)?;
        Ok(Clopen { words: vec![w.to_vec()], bases: bases.clone() })
    }

    /// Canonical form of an arbitrary word set (duplicates, nested words and
    /// complete sibling sets are all allowed).
    pub fn normalize(bases: &Arc<Bases>, words: impl IntoIterator<Item = Word>) -> Result<Clopen> {
        let mut ws: Vec<Word> = words.into_iter().collect();
        for w in &ws {
            bases.check_word(w)?;
        }
        ws.sort();
        ws.dedup();
        Ok(Clopen::from_sorted(bases, &ws))
    }

    pub(crate) fn from_sorted(bases: &Arc<Bases>, ws: &[Word]) -> Clopen {
        let words = combine_words(bases, ws, &[], &|x, _| x);
        Clopen { words, bases: bases.clone() }
    }

    /// Text form "[00,01,1]"; strict: words must be valid and prefix-free.
    pub fn parse(bases: &Arc<Bases>, s: &str) -> Result<Clopen> {
        let inner = s
            .trim()
            .strip_prefix('[')
            .and_then(|t| t.strip_suffix(']'))
            .ok_or_else(|| Error::Parse(format!("clopen `{s}` must be bracketed")))?;
        let mut ws = Vec::new();
        for t in inner.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            ws.push(parse_word(t)?);
        }
        for w in &ws {
            bases.check_word(w)?;
        }
        for (i, u) in ws.iter().enumerate() {
            for (j, v) in ws.iter().enumerate() {
                if i != j && v.starts_with(u) {
                    return Err(Error::Parse(format!("`{s}` is not prefix-free")));
                }
            }
        }
        Clopen::normalize(bases, ws)
    }

    pub fn words(&self) -> &[Word] {
        &self.words
    }

    pub fn bases(&self) -> &Arc<Bases> {
        &self.bases
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.words.len() == 1 && self.words[0].is_empty()
    }

    /// Longest word length; 0 for the empty set and for X.
    pub fn depth(&self) -> usize {
        self.words.iter().map(Vec::len).max().unwrap_or(0)
    }

    fn op(&self, other: &Clopen, f: &dyn Fn(bool, bool) -> bool) -> Clopen {
        debug_assert_eq!(self.bases, other.bases, "mixing alphabets");
        Clopen { words: combine_words(&self.bases, &self.words, &other.words, f), bases: self.bases.clone() }
    }

    pub fn union(&self, other: &Clopen) -> Clopen {
        self.op(other, &|x, y| x || y)
    }

    pub fn intersection(&self, other: &Clopen) -> Clopen {
        self.op(other, &|x, y| x && y)
    }

    pub fn difference(&self, other: &Clopen) -> Clopen {
        self.op(other, &|x, y| x && !y)
    }

    pub fn symmetric_difference(&self, other: &Clopen) -> Clopen {
        self.op(other, &|x, y| x != y)
    }

    pub fn complement(&self) -> Clopen {
        Clopen::full(&self.bases).difference(self)
    }

    pub fn is_subset(&self, other: &Clopen) -> bool {
        self.difference(other).is_empty()
    }

    pub fn is_disjoint(&self, other: &Clopen) -> bool {
        self.intersection(other).is_empty()
    }

    pub fn union_all<'a>(bases: &Arc<Bases>, parts: impl IntoIterator<Item = &'a Clopen>) -> Clopen {
        let mut ws: Vec<Word> = parts.into_iter().flat_map(|c| c.words.iter().cloned()).collect();
        ws.sort();
        ws.dedup();
        Clopen::from_sorted(bases, &ws)
    }

    /// All depth-`d` words whose cylinders lie in the set, sorted.
    pub fn refine_to_depth(&self, d: usize) -> Result<Vec<Word>> {
        let needed = self.depth();
        if d < needed {
            return Err(Error::DepthTooSmall { asked: d, needed });
        }
        let mut out = Vec::new();
        for w in &self.words {
            let mut frontier = vec![w.clone()];
            for i in w.len()..d {
                let b = self.bases.at(i);
                frontier = frontier
                    .into_iter()
                    .flat_map(|u| {
                        (0..b).map(move |c| {
                            let mut v = u.clone();
                            v.push(c);
                            v
                        })
                    })
                    .collect();
            }
            out.extend(frontier);
        }
        Ok(out)
    }

    /// Number of depth-`d` cylinders inside the set.
    pub fn count_at_depth(&self, d: usize) -> Result<u128> {
        let needed = self.depth();
        if d < needed {
            return Err(Error::DepthTooSmall { asked: d, needed });
        }
        Ok(self.words.iter().map(|w| self.bases.count_between(w.len(), d)).sum())
    }

    /// Mass under the uniform product measure of the bases.
    pub fn mass(&self) -> BigRational {
        let mut total = BigRational::zero();
        for w in &self.words {
            let den: BigInt = (0..w.len()).fold(BigInt::one(), |acc, i| acc * BigInt::from(self.bases.at(i)));
            total += BigRational::new(BigInt::one(), den);
        }
        total
    }

    pub fn contains_point(&self, p: &SymbolicPoint) -> bool {
        self.words.iter().any(|w| w.iter().enumerate().all(|(i, &c)| p.letter(i) == c))
    }

    /// True when the set lies inside the cylinder `[w]`.
    pub fn inside_cylinder(&self, w: &[Letter]) -> bool {
        !self.words.is_empty() && self.words.iter().all(|u| u.starts_with(w))
    }

    /// The canonical-least word (used for ordering columns and atoms).
    pub fn least_word(&self) -> Option<&Word> {
        self.words.first()
    }
}

impl fmt::Display for Clopen {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.words.iter().map(|w| word_string(w)).collect();
        write!(f, "[{}]", parts.join(","))
    }
}

impl fmt::Debug for Clopen {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

/// An eventually periodic sequence `pre · per^∞` in canonical form.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SymbolicPoint {
    pre: Word,
    per: Word,
}

impl SymbolicPoint {
    pub fn new(pre: Word, per: Word) -> SymbolicPoint {
        let per = if per.is_empty() { vec![0] } else { per };
        let (pre, per) = canonical_eventual(pre, per);
        SymbolicPoint { pre, per }
    }

    /// `u(v)`; an empty period `u()` means a tail of zeros.
    pub fn parse(s: &str) -> Result<SymbolicPoint> {
        let s = s.trim();
        let (u, rest) = s.split_once('(').ok_or_else(|| Error::Parse(format!("point `{s}` needs `(`")))?;
        let v = rest.strip_suffix(')').ok_or_else(|| Error::Parse(format!("point `{s}` needs `)`")))?;
        let u = if u.is_empty() { vec![] } else { parse_word(u)? };
        let v = if v.is_empty() { vec![] } else { parse_word(v)? };
        Ok(SymbolicPoint::new(u, v))
    }

    pub fn preperiod(&self) -> &[Letter] {
        &self.pre
    }

    pub fn period(&self) -> &[Letter] {
        &self.per
    }

    pub fn letter(&self, i: usize) -> Letter {
        if i < self.pre.len() {
            self.pre[i]
        } else {
            self.per[(i - self.pre.len()) % self.per.len()]
        }
    }

    pub fn prefix(&self, n: usize) -> Word {
        (0..n).map(|i| self.letter(i)).collect()
    }

    /// Index past which both the point and `bases` are jointly periodic.
    pub fn joint_horizon(&self, bases: &Bases) -> (usize, usize) {
        let start = self.pre.len().max(bases.preperiod().len());
        (start, lcm(self.per.len(), bases.period().len()))
    }

    pub fn check(&self, bases: &Bases) -> Result<()> {
        let (start, len) = self.joint_horizon(bases);
        for pos in 0..start + len {
            let (letter, base) = (self.letter(pos), bases.at(pos));
            if letter >= base {
                return Err(Error::InvalidLetter { letter, pos, base });
            }
        }
        Ok(())
    }

    /// Point given by an explicit finite prefix followed by the sequence of
    /// `self` from index `from` on.
    pub(crate) fn splice(&self, head: Word, from: usize) -> SymbolicPoint {
        let n = head.len();
        let mut from = from;
        let mut head = head;
        // Extend until the tail is purely periodic.
        while from < self.pre.len() {
            head.push(self.letter(from));
            from += 1;
        }
        debug_assert!(head.len() >= n);
        let per = (0..self.per.len()).map(|k| self.letter(from + k)).collect();
        SymbolicPoint::new(head, per)
    }
}

impl fmt::Display for SymbolicPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pre = if self.pre.is_empty() { String::new() } else { word_string(&self.pre) };
        write!(f, "{}({})", pre, word_string(&self.per))
    }
}

impl fmt::Debug for SymbolicPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(s: &str) -> Clopen {
        Clopen::parse(&Bases::dyadic(), s).unwrap()
    }

    #[test]
    fn normalize_examples() {
        let b = Bases::dyadic();
        assert_eq!(Clopen::normalize(&b, vec![vec![0, 0], vec![0, 1]]).unwrap(), c("[0]"));
        assert!(Clopen::normalize(&b, vec![]).unwrap().is_empty());
        assert!(Clopen::normalize(&b, vec![vec![0], vec![1, 0], vec![1, 1]]).unwrap().is_full());
        assert!(matches!(Clopen::normalize(&b, vec![vec![2]]), Err(Error::InvalidLetter { .. })));
    }

    #[test]
    fn boolean_examples() {
        assert_eq!(c("[0]").complement(), c("[1]"));
        assert_eq!(c("[0]").intersection(&c("[01]")), c("[01]"));
        let a = c("[010,11]");
        assert_eq!(a.complement().complement(), a);
        assert_eq!(c("[0]").union(&c("[1]")).to_string(), "[e]");
    }

    #[test]
    fn refine_examples() {
        assert_eq!(c("[0]").refine_to_depth(2).unwrap(), vec![vec![0, 0], vec![0, 1]]);
        assert_eq!(c("[e]").refine_to_depth(1).unwrap(), vec![vec![0], vec![1]]);
        assert_eq!(c("[01,1]").refine_to_depth(2).unwrap(), vec![vec![0, 1], vec![1, 0], vec![1, 1]]);
        assert!(matches!(c("[01]").refine_to_depth(1), Err(Error::DepthTooSmall { .. })));
    }

    #[test]
    fn point_membership() {
        let p = SymbolicPoint::parse("(10)").unwrap();
        assert!(!c("[0]").contains_point(&p));
        assert!(c("[e]").contains_point(&p));
        assert!(c("[01]").contains_point(&SymbolicPoint::parse("0(1)").unwrap()));
    }

    #[test]
    fn point_canonical_forms() {
        assert_eq!(SymbolicPoint::parse("0()").unwrap(), SymbolicPoint::parse("(0)").unwrap());
        assert_eq!(SymbolicPoint::parse("01(01)").unwrap().to_string(), "(01)");
        assert_eq!(SymbolicPoint::parse("1(0101)").unwrap().to_string(), "(10)");
        assert_eq!(SymbolicPoint::parse("1(00)").unwrap().to_string(), "1(0)");
    }

    #[test]
    fn parse_rejects_nested_words() {
        let b = Bases::dyadic();
        assert!(matches!(Clopen::parse(&b, "[0,00]"), Err(Error::Parse(_))));
        assert!(matches!(Clopen::parse(&b, "00"), Err(Error::Parse(_))));
        assert_eq!(Clopen::parse(&b, "[]").unwrap().to_string(), "[]");
    }

    #[test]
    fn mixed_bases() {
        let b = Bases::parse("2,3|2").unwrap();
        assert_eq!(b.at(0), 2);
        assert_eq!(b.at(1), 3);
        assert_eq!(b.at(7), 2);
        let x = Clopen::normalize(&b, vec![vec![0, 0], vec![0, 1], vec![0, 2]]).unwrap();
        assert_eq!(x.to_string(), "[0]");
        assert_eq!(b.to_string(), "2,3|2");
    }
}
