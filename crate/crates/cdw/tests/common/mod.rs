//! Test-side oracles, written against words and integers only so they share
//! no code with the library.

#![allow(dead_code)]

use std::sync::Arc;

use cdw::clopen::{Bases, Clopen, SymbolicPoint};
use cdw::dynamics::{Odometer, SystemHandle};

pub fn dyadic() -> Arc<Bases> {
    Bases::dyadic()
}

pub fn odo() -> Arc<dyn SystemHandle> {
    Arc::new(Odometer::dyadic())
}

pub fn c(s: &str) -> Clopen {
    Clopen::parse(&dyadic(), s).unwrap()
}

pub fn p(s: &str) -> SymbolicPoint {
    SymbolicPoint::parse(s).unwrap()
}

/// Adds one to a binary word, least significant letter first, dropping the
/// carry out of the last letter.
pub fn add_one(w: &[u8]) -> Vec<u8> {
    let mut out = w.to_vec();
    for x in out.iter_mut() {
        if *x == 0 {
            *x = 1;
            return out;
        }
        *x = 0;
    }
    out
}

/// All binary words of length `d`, in lexicographic order.
pub fn words(d: usize) -> Vec<Vec<u8>> {
    (0..1u32 << d).map(|v| (0..d).map(|i| ((v >> (d - 1 - i)) & 1) as u8).collect()).collect()
}

/// Membership of a depth-`d` word in a set given by words of length at most `d`.
pub fn member(set: &[Vec<u8>], w: &[u8]) -> bool {
    set.iter().any(|s| w.starts_with(s))
}

/// The words of `a`, read off its text form.
pub fn words_of(a: &Clopen) -> Vec<Vec<u8>> {
    let s = a.to_string();
    let inner = &s[1..s.len() - 1];
    if inner.is_empty() {
        return vec![];
    }
    inner.split(',').map(|w| if w == "e" { vec![] } else { w.bytes().map(|b| b - b'0').collect() }).collect()
}

/// Depth-`d` words of a clopen, by brute-force membership.
pub fn expand(a: &Clopen, d: usize) -> Vec<Vec<u8>> {
    let ws = words_of(a);
    words(d).into_iter().filter(|w| member(&ws, w)).collect()
}

/// Number of depth-`d` words in `a`, over `2^d`.
pub fn mass(a: &Clopen, d: usize) -> (usize, usize) {
    (expand(a, d).len(), 1 << d)
}

/// The clopen whose depth-`d` words are selected by the bits of `mask`.
pub fn from_mask(d: usize, mask: u32) -> Clopen {
    let ws: Vec<String> = words(d)
        .into_iter()
        .enumerate()
        .filter(|(i, _)| mask >> i & 1 == 1)
        .map(|(_, w)| if w.is_empty() { "e".into() } else { w.iter().map(|b| (b + b'0') as char).collect() })
        .collect();
    c(&format!("[{}]", ws.join(",")))
}

/// Text of a word.
pub fn text(w: &[u8]) -> String {
    if w.is_empty() {
        "e".into()
    } else {
        w.iter().map(|b| (b + b'0') as char).collect()
    }
}
