//! `cdw`: batch front end for the workbench. Every subcommand prints a
//! deterministic report on stdout and maps failures onto the exit codes
//! 0 ok, 1 verification failure, 2 parse, 3 hypothesis, 4 horizon.

use std::fs;
use std::io::Write;
use std::process::ExitCode;
use std::sync::Arc;

use cdw::absorption::{build_pi, exceptional_stage_sequence, saturation_pipeline, singular_points, verify_exceptional_sequence, ExceptionalLevel};
use cdw::ample::{check_unit_system, Generator, UnitSystem};
use cdw::balance::{almost_equivalent_refine, measure_equivalent_pairs, verify_almost_equivalence, GammaPartition};
use cdw::cancel::Horizon;
use cdw::clopen::{Clopen, SymbolicPoint};
use cdw::dynamics::{parse_system, SystemHandle};
use cdw::kr::{first_return_partition, make_compatible, verify_kr, KRPartition};
use cdw::krieger::{chain_to_json, Driver, PointedMap, SparseSet};
use cdw::measure::{odometer_measure, rational_string, ErgodicList};
use cdw::registry::Registry;
use cdw::report::Report;
use cdw::{Error, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

#[derive(Parser, Debug)]
#[command(name = "cdw", version, about = "Finite-stage constructions on Cantor minimal systems")]
struct Cli {
    /// Largest stage any search may visit; defaults to $CDW_MAX_STAGE, else 16.
    #[arg(long, global = true)]
    horizon: Option<usize>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Export {
    Json,
    Dot,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Kakutani-Rokhlin partition over a base clopen.
    Tower {
        system: String,
        base: String,
        #[arg(long)]
        compatible: Vec<String>,
        #[arg(long, value_enum, default_value = "json")]
        export: Export,
    },
    /// Back-and-forth chain between the closures of two stage sequences.
    Conjugate {
        gamma: String,
        lambda: String,
        /// Comma-separated points of the sparse set on the first side.
        #[arg(long = "K")]
        k: Option<String>,
        #[arg(long = "L")]
        l: Option<String>,
        /// Comma-separated `p->q` pairs; defaults to pairing K and L in order.
        #[arg(long)]
        map: Option<String>,
        #[arg(long)]
        depth: usize,
    },
    /// Saturation pipeline over the equal-measure pairs up to `--pairs`.
    Saturate {
        stages: String,
        #[arg(long, default_value = "depth2")]
        pairs: String,
        /// Number of levels.
        #[arg(long, default_value_t = 2)]
        depth: usize,
        #[arg(long)]
        witnesses: bool,
    },
    /// Exceptional stage sequence, its involution and singular tree.
    Absorb {
        stages: String,
        #[arg(long, default_value_t = 3)]
        depth: usize,
    },
    /// Almost-equivalent refinement of stage `--depth` for the given pairs.
    Balance {
        stages: String,
        #[arg(long, default_value = "depth2")]
        pairs: String,
        #[arg(long, default_value_t = 0)]
        depth: usize,
    },
    /// Re-verify a fixture or a run of stages.
    Verify {
        #[command(subcommand)]
        what: VerifyCmd,
    },
    /// Exact invariant measure of a clopen.
    Measure { system: String, clopen: String },
}

#[derive(Subcommand, Debug)]
enum VerifyCmd {
    /// A tower given as JSON columns of clopens.
    Tower { system: String, file: String },
    /// A unit system fixture (see README for the format).
    Units { file: String },
    /// Stages 0..=depth of a sequence, each checked and refining the previous.
    Stages {
        stages: String,
        #[arg(long, default_value_t = 3)]
        depth: usize,
    },
    /// A clopen in text form.
    Clopen { system: String, clopen: String },
}

/// What a command produced: a report to print and whether it passed.
struct Outcome {
    out: String,
    ok: bool,
}

impl Outcome {
    fn json(v: Value, ok: bool) -> Outcome {
        Outcome { out: serde_json::to_string_pretty(&v).expect("values serialize"), ok }
    }
}

fn default_horizon() -> Result<usize> {
    match std::env::var("CDW_MAX_STAGE") {
        Ok(s) => s.trim().parse().map_err(|_| Error::Parse(format!("CDW_MAX_STAGE must be a stage number, got `{s}`"))),
        Err(_) => Ok(16),
    }
}

fn pair_depth(s: &str) -> Result<usize> {
    s.strip_prefix("depth").and_then(|d| d.parse().ok()).ok_or_else(|| Error::Parse(format!("--pairs expects `depthN`, got `{s}`")))
}

fn points(s: &Option<String>) -> Result<Vec<SymbolicPoint>> {
    s.iter().flat_map(|s| s.split(',')).filter(|p| !p.trim().is_empty()).map(|p| SymbolicPoint::parse(p.trim())).collect()
}

fn report_json(r: &Report) -> Value {
    serde_json::to_value(r).expect("reports serialize")
}

fn tower(system: &str, base: &str, compatible: &[String], export: Export, h: &Horizon) -> Result<Outcome> {
    let sys = parse_system(system)?;
    let u = Clopen::parse(sys.bases(), base)?;
    let extra = compatible.iter().map(|c| Clopen::parse(sys.bases(), c)).collect::<Result<Vec<_>>>()?;
    h.check()?;
    let mut p = first_return_partition(&sys, &u, None)?;
    for c in &extra {
        p = make_compatible(&p, c);
    }
    let r = verify_kr(&p);
    Ok(match export {
        Export::Dot => Outcome { out: p.to_dot().trim_end().to_string(), ok: r.passed() },
        Export::Json => Outcome::json(json!({"base": u.to_string(), "heights": p.heights(), "columns": p.to_json(), "report": report_json(&r)}), r.passed()),
    })
}

#[allow(clippy::too_many_arguments)]
fn conjugate(reg: &Registry, a: &str, b: &str, k: &Option<String>, l: &Option<String>, map: &Option<String>, depth: usize, h: &Horizon) -> Result<Outcome> {
    let (g, lam) = (reg.build(a)?, reg.build(b)?);
    let (kp, lp) = (points(k)?, points(l)?);
    let k = if kp.is_empty() { SparseSet::empty() } else { SparseSet::new(&*g, kp, h.max_stage)? };
    let l = if lp.is_empty() { SparseSet::empty() } else { SparseSet::new(&*lam, lp, h.max_stage)? };
    let hmap = match map {
        None => PointedMap::in_order(&k, &l)?,
        Some(m) => {
            let pairs = m
                .split(',')
                .map(|pq| {
                    let (p, q) = pq.split_once("->").ok_or_else(|| Error::Parse(format!("--map entries look like `p->q`, got `{pq}`")))?;
                    Ok((SymbolicPoint::parse(p.trim())?, SymbolicPoint::parse(q.trim())?))
                })
                .collect::<Result<Vec<_>>>()?;
            PointedMap::new(&k, &l, pairs)?
        }
    };
    let drv = Driver { gamma: &*g, lambda: &*lam, k, l, h: hmap, horizon: h.clone() };
    let chain = drv.run(depth)?;
    let r = drv.verify(&chain);
    let mut v = chain_to_json(&*g, &*lam, &chain);
    v["report"] = report_json(&r);
    Ok(Outcome::json(v, r.passed()))
}

fn saturate(reg: &Registry, stages: &str, pairs: &str, levels: usize, witnesses: bool, h: &Horizon) -> Result<Outcome> {
    let s = reg.build(stages)?;
    let m = ErgodicList::product(&s.bases());
    let run = saturation_pipeline(&*s, &m, pair_depth(pairs)?, levels, h)?;
    let r = run.verify(&m);
    let mut v = run.to_json(witnesses);
    v["report"] = report_json(&r);
    Ok(Outcome::json(v, r.passed()))
}

fn absorb(reg: &Registry, stages: &str, depth: usize, h: &Horizon) -> Result<Outcome> {
    let s = reg.build(stages)?;
    let m = ErgodicList::product(&s.bases());
    let seq = exceptional_stage_sequence(&*s, &m, depth, h)?;
    let mut r = verify_exceptional_sequence(&seq);
    let pi = build_pi(seq.iter().map(ExceptionalLevel::level).collect())?;
    r.merge(pi.verify(Some(&m)));
    let tree = singular_points(&pi, depth);
    r.merge(tree.verify(&pi));
    let v = json!({
        "sequence": s.descriptor(),
        "stages": seq.iter().map(|l| json!({"stage": l.stage, "alpha": l.alpha().to_string(), "beta": l.beta().to_string(), "atoms": l.partition.atom_count()})).collect::<Vec<_>>(),
        "pi": pi.to_json(),
        "singular_tree": tree.to_json(),
        "report": report_json(&r),
    });
    Ok(Outcome::json(v, r.passed()))
}

fn balance(reg: &Registry, stages: &str, pairs: &str, depth: usize, h: &Horizon) -> Result<Outcome> {
    let s = reg.build(stages)?;
    let b = s.bases();
    let m = ErgodicList::product(&b);
    let pairs = measure_equivalent_pairs(&b, &m, pair_depth(pairs)?);
    let p = GammaPartition::from_stage(&*s.stage(depth)?);
    let (us, vs): (Vec<Clopen>, Vec<Clopen>) = pairs.iter().cloned().unzip();
    let (q, exc) = almost_equivalent_refine(&p, &us, &vs, &*s, &m, h)?;
    let r = verify_almost_equivalence(&p, &q, &exc, &us, &vs, &m);
    let v = json!({
        "sequence": s.descriptor(),
        "start_stage": depth,
        "pairs": pairs.len(),
        "exceptional_pairs": exc.pairs.len(),
        "partition": q.to_json(Some(&exc)),
        "report": report_json(&r),
    });
    Ok(Outcome::json(v, r.passed()))
}

/// `{"system": "odometer:2", "base": "[0]", "generators": [{"label": .., "moves": [[0, 1], [1, 0]]}]}`:
/// the unit system of the tower over `base`, with extra generators appended.
fn unit_fixture(text: &str) -> Result<UnitSystem> {
    let v: Value = serde_json::from_str(text).map_err(|e| Error::Parse(format!("fixture: {e}")))?;
    let field = |k: &str| v.get(k).and_then(Value::as_str).ok_or_else(|| Error::Parse(format!("fixture lacks string field `{k}`")));
    let sys = parse_system(field("system")?)?;
    let base = Clopen::parse(sys.bases(), field("base")?)?;
    let us = UnitSystem::from_kr(&first_return_partition(&sys, &base, None)?, "fixture");
    let mut gens = us.generators.clone();
    for g in v.get("generators").and_then(Value::as_array).into_iter().flatten() {
        let label = g.get("label").and_then(Value::as_str).unwrap_or("g").to_string();
        let moves: Vec<(usize, usize)> = serde_json::from_value(g.get("moves").cloned().unwrap_or(Value::Null)).map_err(|e| Error::Parse(format!("generator `{label}`: {e}")))?;
        let mut moves = moves;
        moves.sort_unstable();
        gens.push(Generator { label, moves });
    }
    Ok(UnitSystem::with_generators(us.bases.clone(), us.atoms.clone(), us.orbits.clone(), us.charts.clone(), gens, "fixture"))
}

fn read(file: &str) -> Result<String> {
    fs::read_to_string(file).map_err(|e| Error::Parse(format!("{file}: {e}")))
}

fn verify(reg: &Registry, what: &VerifyCmd) -> Result<Outcome> {
    let r = match what {
        VerifyCmd::Tower { system, file } => {
            let sys: Arc<dyn SystemHandle> = parse_system(system)?;
            let cols: Vec<Vec<String>> = serde_json::from_str(&read(file)?).map_err(|e| Error::Parse(format!("{file}: {e}")))?;
            let cols = cols.iter().map(|c| c.iter().map(|a| Clopen::parse(sys.bases(), a)).collect::<Result<Vec<_>>>()).collect::<Result<Vec<_>>>()?;
            verify_kr(&KRPartition::from_columns(sys, cols))
        }
        VerifyCmd::Units { file } => check_unit_system(&unit_fixture(&read(file)?)?),
        VerifyCmd::Stages { stages, depth } => {
            let s = reg.build(stages)?;
            let mut r = Report::new(s.descriptor());
            for n in 0..=*depth {
                let st = s.stage(n)?;
                r.merge(check_unit_system(&st));
                if n > 0 {
                    r.check(format!("stage {n} refines stage {}", n - 1), s.stage(n - 1)?.is_refined_by(&st), "atoms or orbits do not nest");
                }
            }
            r
        }
        VerifyCmd::Clopen { system, clopen } => {
            let sys = parse_system(system)?;
            let c = Clopen::parse(sys.bases(), clopen)?;
            let mut r = Report::new("clopen");
            r.check(format!("parses as {c}"), true, "");
            r
        }
    };
    Ok(Outcome::json(report_json(&r), r.passed()))
}

fn run(cli: &Cli) -> Result<Outcome> {
    let h = Horizon::new(match cli.horizon {
        Some(n) => n,
        None => default_horizon()?,
    });
    let reg = Registry::builtin();
    match &cli.cmd {
        Command::Tower { system, base, compatible, export } => tower(system, base, compatible, *export, &h),
        Command::Conjugate { gamma, lambda, k, l, map, depth } => conjugate(&reg, gamma, lambda, k, l, map, *depth, &h),
        Command::Saturate { stages, pairs, depth, witnesses } => saturate(&reg, stages, pairs, *depth, *witnesses, &h),
        Command::Absorb { stages, depth } => absorb(&reg, stages, *depth, &h),
        Command::Balance { stages, pairs, depth } => balance(&reg, stages, pairs, *depth, &h),
        Command::Verify { what } => verify(&reg, what),
        Command::Measure { system, clopen } => {
            let sys = parse_system(system)?;
            let c = Clopen::parse(sys.bases(), clopen)?;
            Ok(Outcome { out: rational_string(&odometer_measure(&*sys, &c)), ok: true })
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(o) => {
            // A closed pipe (`cdw ... | head`) is not an error of the run.
            let _ = writeln!(std::io::stdout(), "{}", o.out);
            ExitCode::from(if o.ok { 0 } else { 1 })
        }
        Err(e) => {
            if let Error::HypothesisFailed { u, v } = &e {
                println!("{}", serde_json::to_string_pretty(&json!({"hypothesis_failed": {"u": u, "v": v}})).expect("values serialize"));
            }
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
