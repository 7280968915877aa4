//! Minimal homeomorphisms acting on clopens and points. Only adic odometers
//! ship; other systems plug in through [`SystemHandle`].

use std::fmt;
use std::sync::Arc;

use crate::clopen::{Bases, Clopen, Letter, SymbolicPoint, Word};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub fn sign(self) -> i64 {
        match self {
            Direction::Forward => 1,
            Direction::Backward => -1,
        }
    }
}

/// A minimal homeomorphism of the Cantor space of `bases()`.
pub trait SystemHandle: Send + Sync + fmt::Debug {
    fn descriptor(&self) -> String;
    fn bases(&self) -> &Arc<Bases>;
    fn apply_clopen(&self, a: &Clopen, dir: Direction) -> Clopen;
    fn apply_point(&self, p: &SymbolicPoint, dir: Direction) -> SymbolicPoint;

    fn power_clopen(&self, a: &Clopen, k: i64) -> Clopen {
        let dir = if k >= 0 { Direction::Forward } else { Direction::Backward };
        (0..k.unsigned_abs()).fold(a.clone(), |acc, _| self.apply_clopen(&acc, dir))
    }

    fn power_point(&self, p: &SymbolicPoint, k: i64) -> SymbolicPoint {
        let dir = if k >= 0 { Direction::Forward } else { Direction::Backward };
        (0..k.unsigned_abs()).fold(p.clone(), |acc, _| self.apply_point(&acc, dir))
    }

    /// Image word of `[w]` under `φ^k` when the map sends cylinders of each
    /// depth to cylinders of the same depth. Enables the fast tower paths.
    fn cylinder_map(&self, _w: &[Letter], _k: i64) -> Option<Word> {
        None
    }

    /// `Some(w')` when `φ^k` restricted to `[w]` is the prefix replacement
    /// `w·t ↦ w'·t`.
    fn shift_as_prefix(&self, _w: &[Letter], _k: i64) -> Option<Word> {
        None
    }
}

/// Adding one with carry to the right.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Odometer {
    bases: Arc<Bases>,
}

impl Odometer {
    pub fn new(bases: Arc<Bases>) -> Odometer {
        Odometer { bases }
    }

    pub fn dyadic() -> Odometer {
        Odometer::new(Bases::dyadic())
    }

    /// "odometer:2" or "odometer:2,3|2".
    pub fn parse(s: &str) -> Result<Odometer> {
        let rest = s
            .trim()
            .strip_prefix("odometer:")
            .ok_or_else(|| Error::Parse(format!("unknown system `{s}`")))?;
        Ok(Odometer::new(Bases::parse(rest)?))
    }

    fn value(&self, w: &[Letter]) -> u128 {
        let mut v = 0u128;
        let mut scale = 1u128;
        for (i, &c) in w.iter().enumerate() {
            v += c as u128 * scale;
            scale *= self.bases.at(i) as u128;
        }
        v
    }

    fn word_of(&self, mut v: u128, d: usize) -> Word {
        (0..d)
            .map(|i| {
                let b = self.bases.at(i) as u128;
                let c = (v % b) as u8;
                v /= b;
                c
            })
            .collect()
    }

    fn add_to_word(&self, w: &[Letter], k: i64) -> (Word, bool) {
        let m = self.bases.count(w.len());
        assert!(m < u128::MAX / 4, "cylinder depth too large for exact arithmetic");
        let v = self.value(w) as i128 + k as i128;
        let m = m as i128;
        let wrapped = !(0..m).contains(&v);
        (self.word_of(v.rem_euclid(m) as u128, w.len()), wrapped)
    }
}

impl SystemHandle for Odometer {
    fn descriptor(&self) -> String {
        format!("odometer:{}", self.bases)
    }

    fn bases(&self) -> &Arc<Bases> {
        &self.bases
    }

    fn apply_clopen(&self, a: &Clopen, dir: Direction) -> Clopen {
        self.power_clopen(a, dir.sign())
    }

    fn power_clopen(&self, a: &Clopen, k: i64) -> Clopen {
        if k == 0 || a.is_empty() || a.is_full() {
            return a.clone();
        }
        let ws: Vec<Word> = a.words().iter().map(|w| self.add_to_word(w, k).0).collect();
        Clopen::normalize(&self.bases, ws).expect("odometer images stay in the alphabet")
    }

    fn apply_point(&self, p: &SymbolicPoint, dir: Direction) -> SymbolicPoint {
        let (start, len) = p.joint_horizon(&self.bases);
        let bound = start + len;
        let forward = dir == Direction::Forward;
        let stop = (0..bound).find(|&i| {
            let top = self.bases.at(i) - 1;
            if forward {
                p.letter(i) < top
            } else {
                p.letter(i) > 0
            }
        });
        match stop {
            None if forward => SymbolicPoint::new(vec![], vec![0]),
            None => {
                // Every digit wraps: the all-maximal sequence.
                let pre = self.bases.preperiod().iter().map(|b| b - 1).collect();
                let per = self.bases.period().iter().map(|b| b - 1).collect();
                SymbolicPoint::new(pre, per)
            }
            Some(i) => {
                let mut head: Word = (0..i)
                    .map(|j| if forward { 0 } else { self.bases.at(j) - 1 })
                    .collect();
                head.push(if forward { p.letter(i) + 1 } else { p.letter(i) - 1 });
                p.splice(head, i + 1)
            }
        }
    }

    fn power_point(&self, p: &SymbolicPoint, k: i64) -> SymbolicPoint {
        let dir = if k >= 0 { Direction::Forward } else { Direction::Backward };
        (0..k.unsigned_abs()).fold(p.clone(), |acc, _| self.apply_point(&acc, dir))
    }

    fn cylinder_map(&self, w: &[Letter], k: i64) -> Option<Word> {
        Some(self.add_to_word(w, k).0)
    }

    fn shift_as_prefix(&self, w: &[Letter], k: i64) -> Option<Word> {
        let (img, wrapped) = self.add_to_word(w, k);
        (!wrapped).then_some(img)
    }
}

/// Parses a system descriptor. Only odometers are built in.
pub fn parse_system(s: &str) -> Result<Arc<dyn SystemHandle>> {
    Ok(Arc::new(Odometer::parse(s)?))
}

/// Smallest `|k| ≤ horizon` with `φ^k(p) = q`, preferring the positive one.
pub fn same_orbit_within(phi: &dyn SystemHandle, p: &SymbolicPoint, q: &SymbolicPoint, horizon: u64) -> Option<i64> {
    if p == q {
        return Some(0);
    }
    let (mut fwd, mut bwd) = (p.clone(), p.clone());
    for k in 1..=horizon as i64 {
        fwd = phi.apply_point(&fwd, Direction::Forward);
        if &fwd == q {
            return Some(k);
        }
        bwd = phi.apply_point(&bwd, Direction::Backward);
        if &bwd == q {
            return Some(-k);
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(s: &str) -> Clopen {
        Clopen::parse(&Bases::dyadic(), s).unwrap()
    }
    fn p(s: &str) -> SymbolicPoint {
        SymbolicPoint::parse(s).unwrap()
    }

    #[test]
    fn clopen_images() {
        let phi = Odometer::dyadic();
        assert_eq!(phi.apply_clopen(&c("[0]"), Direction::Forward), c("[1]"));
        assert_eq!(phi.apply_clopen(&c("[11]"), Direction::Forward), c("[00]"));
        let a = c("[010,11]");
        assert_eq!(phi.apply_clopen(&phi.apply_clopen(&a, Direction::Forward), Direction::Backward), a);
    }

    #[test]
    fn point_images() {
        let phi = Odometer::dyadic();
        assert_eq!(phi.apply_point(&p("(1)"), Direction::Forward), p("(0)"));
        assert_eq!(phi.apply_point(&p("(0)"), Direction::Forward), p("1(0)"));
        assert_eq!(phi.apply_point(&p("(0)"), Direction::Backward), p("(1)"));
        assert_eq!(phi.apply_point(&p("1(01)"), Direction::Forward), p("01(10)"));
    }

    #[test]
    fn orbit_probe() {
        let phi = Odometer::dyadic();
        assert_eq!(same_orbit_within(&phi, &p("(0)"), &p("1(0)"), 5), Some(1));
        assert_eq!(same_orbit_within(&phi, &p("(01)"), &p("(01)"), 0), Some(0));
        assert_eq!(same_orbit_within(&phi, &p("(0)"), &p("(01)"), 100), None);
        assert_eq!(same_orbit_within(&phi, &p("1(0)"), &p("(0)"), 5), Some(-1));
    }

    #[test]
    fn mixed_radix_points() {
        let phi = Odometer::parse("odometer:2,3|2").unwrap();
        let x = p("12(0)");
        let y = phi.apply_point(&x, Direction::Forward);
        assert_eq!(y, p("001(0)"));
        assert_eq!(phi.apply_point(&y, Direction::Backward), x);
        assert_eq!(phi.descriptor(), "odometer:2,3|2");
    }
}
