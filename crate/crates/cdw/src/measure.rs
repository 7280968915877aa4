//! Exact invariant measures and finite-depth invariance checks.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use num_rational::BigRational;
use num_traits::Zero;
use serde::Serialize;

use crate::clopen::{Bases, Clopen, Word};
use crate::dynamics::SystemHandle;
use crate::report::Report;

/// An evaluator `Clopen -> [0,1]`, finitely additive with total mass one.
pub trait MeasureEval: Send + Sync + fmt::Debug {
    fn name(&self) -> String;
    fn eval(&self, a: &Clopen) -> BigRational;
}

/// The product measure giving each letter at coordinate `i` mass `1/b_i`;
/// the unique invariant measure of the odometer over `bases`.
#[derive(Debug, Clone)]
pub struct ProductMeasure {
    bases: Arc<Bases>,
}

impl ProductMeasure {
    pub fn new(bases: Arc<Bases>) -> ProductMeasure {
        ProductMeasure { bases }
    }
}

impl MeasureEval for ProductMeasure {
    fn name(&self) -> String {
        format!("product:{}", self.bases)
    }

    fn eval(&self, a: &Clopen) -> BigRational {
        debug_assert_eq!(a.bases(), &self.bases);
        a.mass()
    }
}

pub fn odometer_measure(phi: &dyn SystemHandle, a: &Clopen) -> BigRational {
    ProductMeasure::new(phi.bases().clone()).eval(a)
}

/// The finite list of ergodic measures standing in for `M(Γ)`.
#[derive(Debug, Clone)]
pub struct ErgodicList(pub Vec<Arc<dyn MeasureEval>>);

impl ErgodicList {
    /// Built-in systems are uniquely ergodic.
    pub fn for_system(phi: &dyn SystemHandle) -> ErgodicList {
        ErgodicList(vec![Arc::new(ProductMeasure::new(phi.bases().clone()))])
    }

    /// The product measure of `bases`, invariant for every built-in stage
    /// sequence over those bases.
    pub fn product(bases: &Arc<Bases>) -> ErgodicList {
        ErgodicList(vec![Arc::new(ProductMeasure::new(bases.clone()))])
    }

    pub fn eval_all(&self, a: &Clopen) -> Vec<BigRational> {
        self.0.iter().map(|m| m.eval(a)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Comparison {
    AllLt,
    AllEq,
    AllGt,
    Mixed,
}

pub fn compare_measures(a: &Clopen, b: &Clopen, m: &ErgodicList) -> Comparison {
    let mut seen = (false, false, false);
    for mu in &m.0 {
        match mu.eval(a).cmp(&mu.eval(b)) {
            std::cmp::Ordering::Less => seen.0 = true,
            std::cmp::Ordering::Equal => seen.1 = true,
            std::cmp::Ordering::Greater => seen.2 = true,
        }
    }
    match seen {
        (true, false, false) => Comparison::AllLt,
        (false, true, false) => Comparison::AllEq,
        (false, false, true) => Comparison::AllGt,
        _ => Comparison::Mixed,
    }
}

/// "p/q" with the denominator always written.
pub fn rational_string(q: &BigRational) -> String {
    format!("{}/{}", q.numer(), q.denom())
}

/// A clopen-algebra map given by the images of all depth-`d` cylinders.
#[derive(Clone, Debug)]
pub struct DepthMap {
    pub bases: Arc<Bases>,
    pub depth: usize,
    pub images: BTreeMap<Word, Clopen>,
}

impl DepthMap {
    pub fn from_fn(bases: &Arc<Bases>, depth: usize, f: impl Fn(&Clopen) -> Clopen) -> DepthMap {
        let images = bases
            .all_words(depth)
            .into_iter()
            .map(|w| {
                let cyl = Clopen::cylinder(bases, &w).expect("enumerated words are valid");
                let img = f(&cyl);
                (w, img)
            })
            .collect();
        DepthMap { bases: bases.clone(), depth, images }
    }
}

/// Checks that `g` is an automorphism of the depth-`d` algebra and that it
/// preserves every measure on every depth-`d` cylinder.
pub fn verify_invariance(g: &DepthMap, m: &ErgodicList, d: usize) -> Report {
    let mut r = Report::new("invariance");
    let words = g.bases.all_words(d);
    let missing: Vec<&Word> = words.iter().filter(|w| !g.images.contains_key(*w)).collect();
    if !r.check("defined on all depth-d words", missing.is_empty() && g.depth == d, format!("{} words missing", missing.len())) {
        return r;
    }
    let mut acc = Clopen::empty(&g.bases);
    let mut total = BigRational::zero();
    let mut empty_image = false;
    for img in g.images.values() {
        empty_image |= img.is_empty();
        total += img.mass();
        acc = acc.union(img);
    }
    let bijective = !empty_image && acc.is_full() && total == acc.mass();
    if !r.check("automorphism", bijective, "images are not a partition of X into nonempty pieces") {
        return r;
    }
    let mut bad = 0usize;
    for (w, img) in &g.images {
        let cyl = Clopen::cylinder(&g.bases, w).expect("valid word");
        for mu in &m.0 {
            if mu.eval(&cyl) != mu.eval(img) {
                bad += 1;
                r.fail("measure preserved", format!("{} under {}", cyl, mu.name()));
            }
        }
    }
    if bad == 0 {
        r.summarize("measure preserved", g.images.len() * m.0.len());
    }
    r
}
