//! Named stage-sequence builders, looked up from textual descriptors such as
//! `gamma_x(odometer:2, 0())` or `intersection(odometer:2,3|2, (0), (01))`.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::absorption::SplitOrbit;
use crate::ample::{DyadicPerm, GammaX, Intersection, StageSequence};
use crate::clopen::{Bases, SymbolicPoint};
use crate::dynamics::parse_system;
use crate::error::{Error, Result};

pub type Builder = Box<dyn Fn(&[String]) -> Result<Arc<dyn StageSequence>> + Send + Sync>;

pub struct Registry {
    builders: BTreeMap<String, Builder>,
}

impl fmt::Debug for Registry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.builders.keys()).finish()
    }
}

impl Default for Registry {
    fn default() -> Registry {
        Registry::builtin()
    }
}

/// Splits `name(a, b, ...)` into the name and top-level arguments.
pub fn split_call(desc: &str) -> Result<(String, Vec<String>)> {
    let desc = desc.trim();
    let Some(open) = desc.find('(') else {
        return Ok((desc.to_string(), Vec::new()));
    };
    let inner = desc[open + 1..]
        .strip_suffix(')')
        .ok_or_else(|| Error::Parse(format!("descriptor `{desc}` is missing `)`")))?;
    let mut args = Vec::new();
    let mut depth = 0i32;
    let mut cur = String::new();
    for ch in inner.chars() {
        match ch {
            '(' => depth += 1,
            ')' => depth -= 1,
            ',' if depth == 0 => {
                args.push(cur.trim().to_string());
                cur.clear();
                continue;
            }
            _ => {}
        }
        if depth < 0 {
            return Err(Error::Parse(format!("unbalanced parentheses in `{desc}`")));
        }
        cur.push(ch);
    }
    if depth != 0 {
        return Err(Error::Parse(format!("unbalanced parentheses in `{desc}`")));
    }
    if !cur.trim().is_empty() || !args.is_empty() {
        args.push(cur.trim().to_string());
    }
    Ok((desc[..open].trim().to_string(), args))
}

/// Rejoins the leading arguments that belong to the system descriptor (mixed
/// radix bases contain commas); the remaining arguments are points.
fn system_and_points(args: &[String]) -> Result<(String, Vec<SymbolicPoint>)> {
    let k = args.iter().position(|a| a.contains('(')).unwrap_or(args.len());
    if k == 0 {
        return Err(Error::Parse("missing system argument".into()));
    }
    let points = args[k..].iter().map(|a| SymbolicPoint::parse(a)).collect::<Result<Vec<_>>>()?;
    Ok((args[..k].join(","), points))
}

impl Registry {
    pub fn empty() -> Registry {
        Registry { builders: BTreeMap::new() }
    }

    pub fn builtin() -> Registry {
        let mut r = Registry::empty();
        r.register("gamma_x", Box::new(|args| {
            let (sys, pts) = system_and_points(args)?;
            let [x] = pts.as_slice() else {
                return Err(Error::Parse("gamma_x takes a system and one point".into()));
            };
            Ok(Arc::new(GammaX::new(parse_system(&sys)?, x.clone())?))
        }));
        r.register("dyadic_perm", Box::new(|args| {
            let bases = if args.is_empty() { Bases::dyadic() } else { Bases::parse(&args.join(","))? };
            Ok(Arc::new(DyadicPerm::new(bases)))
        }));
        r.register("intersection", Box::new(|args| {
            let (sys, pts) = system_and_points(args)?;
            let [x, y] = pts.as_slice() else {
                return Err(Error::Parse("intersection takes a system and two points".into()));
            };
            Ok(Arc::new(Intersection::new(parse_system(&sys)?, x.clone(), y.clone())?))
        }));
        r.register("split_orbit", Box::new(|args| {
            let (sys, pts) = system_and_points(args)?;
            if pts.is_empty() {
                return Err(Error::Parse("split_orbit needs at least one point".into()));
            }
            Ok(Arc::new(SplitOrbit::new(parse_system(&sys)?, pts)?))
        }));
        r
    }

    pub fn register(&mut self, name: impl Into<String>, builder: Builder) {
        self.builders.insert(name.into(), builder);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.builders.keys().map(String::as_str)
    }

    pub fn build(&self, desc: &str) -> Result<Arc<dyn StageSequence>> {
        let (name, args) = split_call(desc)?;
        let b = self
            .builders
            .get(&name)
            .ok_or_else(|| Error::Parse(format!("unknown stage sequence `{name}`")))?;
        b(&args)
    }
}
