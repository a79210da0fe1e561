//! Subcommand bodies. Every command returns `Result<(), Failure>`; `main`
//! turns a `Failure` into a message on stderr plus the process exit code.
//!
//! Exit-code contract: 0 = success (a non-QLGA detection verdict is data,
//! not failure), 1 = failed check or invalid input, 2 = violated model
//! invariant, 3 = sparse term cap exceeded.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use qca_core::evolution::EvolutionHandle;
use qca_core::heisenberg::{self, LocalRule};
use qca_core::lattice::Site;
use qca_core::structure;
use qca_core::{Error, Tolerances};

use crate::formats;
use crate::RunArgs;

/// Spanning-set guard of the translation check: boxes are shrunk until
/// d^cells stays within it.
const TRANSLATION_GUARD: usize = 1 << 14;

pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn validation(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::ModelInvariant(_) => 2,
            Error::TermCap { .. } => 3,
            Error::Invalid(_) | Error::Recovery { .. } | Error::CoordinateOverflow => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

struct Setup {
    tol: Tolerances,
    seed: u64,
}

fn setup(args: &RunArgs) -> Result<Setup, Failure> {
    Ok(Setup {
        tol: parse_tolerances(&args.tol)?,
        seed: resolve_seed(args.seed)?,
    })
}

fn resolve_seed(flag: Option<u64>) -> Result<u64, Failure> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var("QCA_CORR_SEED") {
        Ok(v) => v.trim().parse::<u64>().map_err(|_| {
            Failure::validation(format!("QCA_CORR_SEED=\"{v}\" is not an unsigned integer"))
        }),
        Err(_) => Ok(0),
    }
}

fn parse_tolerances(overrides: &[String]) -> Result<Tolerances, Failure> {
    let mut t = Tolerances::default();
    for pair in overrides {
        let (name, value) = pair.split_once('=').ok_or_else(|| {
            Failure::validation(format!("--tol expects NAME=VALUE, got \"{pair}\""))
        })?;
        let v: f64 = value.parse().map_err(|_| {
            Failure::validation(format!("--tol {name}: \"{value}\" is not a number"))
        })?;
        if !v.is_finite() || v <= 0.0 {
            return Err(Failure::validation(format!(
                "--tol {name}: tolerance must be positive and finite"
            )));
        }
        let slot = match name {
            "algebraic" => &mut t.algebraic,
            "causality" => &mut t.causality,
            "validation" => &mut t.validation,
            "translation" => &mut t.translation,
            "leakage" => &mut t.leakage,
            "intertwiner" => &mut t.intertwiner,
            "rank" => &mut t.rank,
            "cluster_gap" => &mut t.cluster_gap,
            "reduce" => &mut t.reduce,
            "prune" => &mut t.prune,
            _ => {
                return Err(Failure::validation(format!(
                    "unknown tolerance \"{name}\" (known: algebraic, causality, validation, \
                     translation, leakage, intertwiner, rank, cluster_gap, reduce, prune)"
                )))
            }
        };
        *slot = v;
    }
    Ok(t)
}

fn read_file(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path)
        .map_err(|e| Failure::validation(format!("{}: {e}", path.display())))
}

fn load_model(path: &Path, tol: &Tolerances) -> Result<EvolutionHandle, Failure> {
    Ok(formats::model_from_json(&read_file(path)?, tol)?)
}

/// The rule a command operates on: given directly via `--rule`, or derived
/// from `--model` (in which case the handle is returned too, enabling the
/// model-level checks).
fn load_rule(
    args: &RunArgs,
    tol: &Tolerances,
) -> Result<(LocalRule, Option<EvolutionHandle>), Failure> {
    match (&args.model, &args.rule) {
        (Some(_), Some(_)) => Err(Failure::validation(
            "give either --model or --rule, not both",
        )),
        (None, None) => Err(Failure::validation("need --model or --rule")),
        (Some(m), None) => {
            let handle = load_model(m, tol)?;
            let rule = heisenberg::gamma_rule(&handle, tol)?;
            Ok((rule, Some(handle)))
        }
        (None, Some(r)) => {
            let text = read_file(r)?;
            let dto: formats::RuleDto = serde_json::from_str(&text)
                .map_err(|e| Failure::validation(format!("{}: {e}", r.display())))?;
            Ok((formats::rule_from_dto(&dto)?, None))
        }
    }
}

/// Write via a temp file in the same directory plus an atomic rename, so an
/// interrupted run never leaves a partial file behind.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    let tmp = PathBuf::from(format!("{}.tmp{}", path.display(), std::process::id()));
    fs::write(&tmp, bytes)
        .map_err(|e| Failure::validation(format!("{}: {e}", tmp.display())))?;
    fs::rename(&tmp, path)
        .map_err(|e| Failure::validation(format!("{}: {e}", path.display())))
}

fn emit_json<T: Serialize>(out: Option<&Path>, value: &T) -> Result<(), Failure> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| Failure::validation(format!("serialization: {e}")))?;
    bytes.push(b'\n');
    match out {
        None => std::io::stdout()
            .write_all(&bytes)
            .map_err(|e| Failure::validation(format!("stdout: {e}"))),
        Some(p) => write_atomic(p, &bytes),
    }
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

pub fn simulate(args: &RunArgs) -> Result<(), Failure> {
    let s = setup(args)?;
    let model_path = args
        .model
        .as_ref()
        .ok_or_else(|| Failure::validation("simulate needs --model"))?;
    let state_path = args
        .state
        .as_ref()
        .ok_or_else(|| Failure::validation("simulate needs --state"))?;
    let out_dir = args
        .out
        .as_ref()
        .ok_or_else(|| Failure::validation("simulate needs --out DIRECTORY"))?;

    let model = load_model(model_path, &s.tol)?;
    let terms: Vec<formats::TermDto> = serde_json::from_str(&read_file(state_path)?)
        .map_err(|e| Failure::validation(format!("{}: {e}", state_path.display())))?;
    let initial = formats::state_from_dto(&terms, model.n(), model.d())?;

    // Run the whole trajectory before touching the filesystem: a late
    // term-cap abort must not leave a truncated run on disk.
    let mut states = vec![initial];
    for _ in 0..args.steps {
        let next = model.apply(states.last().unwrap(), args.term_cap, s.tol.prune)?;
        states.push(next);
    }

    fs::create_dir_all(out_dir)
        .map_err(|e| Failure::validation(format!("{}: {e}", out_dir.display())))?;
    for (k, st) in states.iter().enumerate() {
        let path = out_dir.join(format!("step_{k:04}.json"));
        emit_json(Some(&path), &formats::state_to_dto(st))?;
    }

    // Per-site probability mass: Σ over terms whose configuration is
    // non-quiescent at the site of |amplitude|².
    let mut csv = String::from("step,site,mass\n");
    for (k, st) in states.iter().enumerate() {
        let mut mass: BTreeMap<Site, f64> = BTreeMap::new();
        for (c, a) in st.terms() {
            let w = a.norm_sqr();
            for (site, _) in c.iter() {
                *mass.entry(site.clone()).or_default() += w;
            }
        }
        for (site, m) in mass {
            let coords: Vec<String> = site.0.iter().map(|x| x.to_string()).collect();
            csv.push_str(&format!("{k},{},{m}\n", coords.join(":")));
        }
    }
    write_atomic(&out_dir.join("trajectory.csv"), csv.as_bytes())
}

// ---------------------------------------------------------------------------
// check
// ---------------------------------------------------------------------------

/// Box extents for the translation check: start from `window` cells per axis
/// and shrink (largest extent first, keeping the shifted axis ≥ 2 as long as
/// possible) until d^cells fits the spanning-set guard.
fn translation_extents(n: usize, d: usize, axis: usize, window: usize) -> Vec<usize> {
    let mut extents = vec![window.max(1); n];
    let fits = |ext: &[usize]| {
        let cells: usize = ext.iter().product();
        (d as f64).powi(cells as i32) <= TRANSLATION_GUARD as f64
    };
    while !fits(&extents) {
        let mut pick = None;
        let mut best = 1usize;
        for (k, &e) in extents.iter().enumerate() {
            let floor = if k == axis { 2 } else { 1 };
            if e > floor && e >= best {
                pick = Some(k);
                best = e;
            }
        }
        match pick {
            Some(k) => extents[k] -= 1,
            None => {
                // Give up the shifted-axis floor too before surrendering.
                if extents[axis] > 1 {
                    extents[axis] -= 1;
                } else {
                    break;
                }
            }
        }
    }
    extents
}

pub fn check(args: &RunArgs) -> Result<(), Failure> {
    let s = setup(args)?;
    if args.model.is_some() && args.rule.is_some() {
        return Err(Failure::validation("give either --model or --rule, not both"));
    }

    let mut errors: Vec<String> = Vec::new();
    let mut pass = true;
    let mut rule_dto = None;
    let mut translation = None;
    let mut causality_forward = None;
    let mut causality_backward = None;
    let mut reversibility = None;

    let handle = match &args.model {
        Some(p) => Some(load_model(p, &s.tol)?),
        None => None,
    };

    // Rule algebra: from the file, or derived from the model. A derivation
    // failure (e.g. images leaking past the declared neighborhood) is a
    // finding, not an abort — the model-level checks still run and locate it.
    match (&handle, &args.rule) {
        (Some(h), None) => match heisenberg::gamma_rule(h, &s.tol) {
            Ok(rule) => match heisenberg::validate_rule(&rule, &s.tol, s.seed) {
                Ok(rep) => {
                    pass &= rep.pass;
                    rule_dto = Some(formats::RuleReportDto::from(&rep));
                }
                Err(e) => {
                    pass = false;
                    errors.push(format!("rule validation: {e}"));
                }
            },
            Err(e) => {
                pass = false;
                errors.push(format!("rule derivation: {e}"));
            }
        },
        (None, Some(r)) => {
            let text = read_file(r)?;
            let dto: formats::RuleDto = serde_json::from_str(&text)
                .map_err(|e| Failure::validation(format!("{}: {e}", r.display())))?;
            let rule = formats::rule_from_dto(&dto)?;
            let rep = heisenberg::validate_rule(&rule, &s.tol, s.seed)?;
            pass &= rep.pass;
            rule_dto = Some(formats::RuleReportDto::from(&rep));
        }
        (None, None) => return Err(Failure::validation("need --model or --rule")),
        (Some(_), Some(_)) => unreachable!(),
    }

    if let Some(h) = &handle {
        let n = h.n();
        let d = h.d();

        let mut trs = Vec::new();
        for axis in 0..n {
            let mut coords = vec![0i64; n];
            coords[axis] = 1;
            let shift = Site::new(coords);
            let extents = translation_extents(n, d, axis, args.window);
            match heisenberg::check_translation_invariance(h, &extents, &shift, &s.tol) {
                Ok(rep) => {
                    pass &= rep.pass;
                    trs.push(formats::translation_to_dto(&shift, &extents, &rep));
                }
                Err(e) => {
                    pass = false;
                    errors.push(format!("translation axis {axis}: {e}"));
                }
            }
        }
        translation = Some(trs);

        let origin = Site::origin(n);
        match heisenberg::check_causality_density(
            h, &origin, None, false, args.trials, s.seed.wrapping_add(1), &s.tol,
        ) {
            Ok(rep) => {
                pass &= rep.pass;
                causality_forward = Some(formats::CausalityDto::from(&rep));
            }
            Err(e) => {
                pass = false;
                errors.push(format!("causality forward: {e}"));
            }
        }
        match heisenberg::check_causality_density(
            h, &origin, None, true, args.trials, s.seed.wrapping_add(2), &s.tol,
        ) {
            Ok(rep) => {
                pass &= rep.pass;
                causality_backward = Some(formats::CausalityDto::from(&rep));
            }
            Err(e) => {
                pass = false;
                errors.push(format!("causality backward: {e}"));
            }
        }
        match heisenberg::check_structural_reversibility(
            h, args.trials, s.seed.wrapping_add(3), &s.tol,
        ) {
            Ok(rep) => {
                pass &= rep.pass;
                reversibility = Some(formats::ReversibilityDto::from(&rep));
            }
            Err(e) => {
                pass = false;
                errors.push(format!("reversibility: {e}"));
            }
        }
    }

    let report = formats::CheckDto {
        rule: rule_dto,
        translation,
        causality_forward,
        causality_backward,
        reversibility,
        errors,
        pass,
        seed: s.seed,
        tolerances: (&s.tol).into(),
    };
    emit_json(args.out.as_deref(), &report)?;
    if pass {
        Ok(())
    } else {
        Err(Failure::validation("one or more checks failed"))
    }
}

// ---------------------------------------------------------------------------
// detect / intertwine
// ---------------------------------------------------------------------------

/// Both structure commands refuse rules that are not QCA duals: the
/// downstream theory assumes a validated *-automorphism.
fn validated_rule(args: &RunArgs, s: &Setup) -> Result<LocalRule, Failure> {
    let (rule, _) = load_rule(args, &s.tol)?;
    let rep = heisenberg::validate_rule(&rule, &s.tol, s.seed)?;
    if !rep.pass {
        return Err(Failure::validation(format!(
            "rule fails validation (unit {:.3e}, star {:.3e}, homomorphism {:.3e}, \
             commutation {:.3e}, trace {:.3e})",
            rep.unit_defect,
            rep.star_defect,
            rep.homomorphism_defect,
            rep.commutation_defect,
            rep.trace_defect
        )));
    }
    Ok(rule)
}

pub fn detect(args: &RunArgs) -> Result<(), Failure> {
    let s = setup(args)?;
    let rule = validated_rule(args, &s)?;
    let rep = structure::detect_and_reconstruct(&rule, s.seed, &s.tol)?;
    emit_json(args.out.as_deref(), &formats::detect_to_dto(&rep, &s.tol))
}

pub fn intertwine(args: &RunArgs) -> Result<(), Failure> {
    let s = setup(args)?;
    let rule = validated_rule(args, &s)?;
    let res = structure::solve_intertwiner(&rule, args.window, s.seed, &s.tol)?;
    emit_json(
        args.out.as_deref(),
        &formats::intertwine_to_dto(&res, s.seed, &s.tol),
    )
}
