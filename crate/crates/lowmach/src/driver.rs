//! Case files, mechanism files, initialization, the time loop, and output.
//!
//! A case is a flat text file of `name { key = value ... }` blocks:
//!
//! ```text
//! mesh {
//!     dims = 32 32 32
//!     lengths = 6.2831853e-3 6.2831853e-3 6.2831853e-3
//!     xmin = periodic
//!     ...
//! }
//! time {
//!     dt = 1.25e-5
//!     endTime = 5e-4
//!     ...
//! }
//! ```
//!
//! `#` starts a comment; unknown blocks or keys are rejected; every parse
//! error carries a line:column position. [`emit_case`] and [`emit_mechanism`]
//! render a canonical form whose reparse is a fixed point, so hand-written
//! files can be normalized mechanically.
//!
//! Mechanism files describe species (NASA-7 thermo, transport, Lewis number,
//! elemental composition) and Arrhenius reactions:
//!
//! ```text
//! units {
//!     ea = J/kmol
//! }
//! species F {
//!     w = 2
//!     tLow = 200
//!     tCommon = 1000
//!     tHigh = 6000
//!     low = 3.5 0 0 0 0 20000 0
//!     high = 3.5 0 0 0 0 20000 0
//!     transport = constant 1e-5
//!     lewis = 1
//!     composition = F 2
//! }
//! reaction "F + X => 2 P" {
//!     a = 50000
//!     beta = 0
//!     ea = 6.65157e6
//! }
//! ```
//!
//! Reaction equations use `=>` (irreversible) or `<=>` (reversible via the
//! equilibrium constant); a bare `M` on both sides marks a third-body
//! reaction whose per-species efficiencies come from the optional
//! `efficiencies` key. Every reaction is atom-audited against the declared
//! compositions.
//!
//! The only initialization kind is `tgv`: the Taylor-Green vortex on a triply
//! periodic box, optionally with a tanh fuel/oxidizer slab for reactive runs.
//! [`run_case`] advances to `endTime`, writing legacy-ASCII VTK snapshots and
//! a diagnostics CSV at `writeInterval` steps; reruns are byte-identical.
//! [`bench_case`] times a few steps and reports the per-stage cost split.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use thiserror::Error;

use crate::chemistry::{
    generate_samples, parse_sample_table, write_sample_table, ChemistryError, Mechanism,
    Reaction, ReactorTols, SampleRanges, SampleTable,
};
use crate::field::{self, CellField};
use crate::fvm::{DdtScheme, DivScheme};
use crate::mesh::{Mesh, MeshError, PatchKind, PatchSpec};
use crate::piso::{self, ChemistryMode, PisoConfig, SimulationState, StepReport};
use crate::sparse::{SolverControls, SolverKind};
use crate::surrogate::{
    load_weights, save_weights, SurrogateBundle, SurrogateError, TrainerConfig,
};
use crate::thermo::{self, MixtureState, Nasa7, SpeciesDef, ThermoError, TransportModel};

#[derive(Debug, Error)]
pub enum DriverError {
    /// Syntax or value error anchored to a file position.
    #[error("{path}:{line}:{col}: {message}")]
    Parse { path: String, line: usize, col: usize, message: String },
    /// Structural problem that has no single line to point at.
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("step {step} failed")]
    Step {
        step: usize,
        #[source]
        source: piso::PisoError,
    },
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Piso(#[from] piso::PisoError),
    #[error(transparent)]
    Chemistry(#[from] ChemistryError),
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DriverError + '_ {
    move |source| DriverError::Io { path: path.display().to_string(), source }
}

// ---------------------------------------------------------------------------
// Raw block syntax shared by case and mechanism files.

#[derive(Debug, Clone)]
struct Val {
    value: String,
    line: usize,
    col: usize,
}

#[derive(Debug, Clone)]
struct RawEntry {
    key: String,
    key_col: usize,
    val: Val,
}

#[derive(Debug, Clone)]
struct RawBlock {
    name: String,
    /// Optional block argument: a bare identifier or a quoted string.
    arg: Option<String>,
    line: usize,
    col: usize,
    entries: Vec<RawEntry>,
}

#[derive(Debug, Clone)]
enum RawItem {
    Entry(RawEntry),
    Block(RawBlock),
}

fn perr(path: &str, line: usize, col: usize, message: String) -> DriverError {
    DriverError::Parse { path: path.to_string(), line, col, message }
}

fn inv(path: &str, message: String) -> DriverError {
    DriverError::Invalid { path: path.to_string(), message }
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Cut a line at the first `#` outside double quotes.
fn strip_comment(line: &str) -> &str {
    let mut in_quotes = false;
    for (i, ch) in line.char_indices() {
        match ch {
            '"' => in_quotes = !in_quotes,
            '#' if !in_quotes => return &line[..i],
            _ => {}
        }
    }
    line
}

fn parse_raw(text: &str, path: &str) -> Result<Vec<RawItem>, DriverError> {
    let mut items = Vec::new();
    let mut open: Option<RawBlock> = None;
    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let content = strip_comment(raw_line);
        let trimmed = content.trim();
        if trimmed.is_empty() {
            continue;
        }
        let col = content.len() - content.trim_start().len() + 1;
        if trimmed == "}" {
            match open.take() {
                Some(block) => items.push(RawItem::Block(block)),
                None => return Err(perr(path, line_no, col, "unmatched '}'".into())),
            }
        } else if let Some(head) = trimmed.strip_suffix('{') {
            if let Some(outer) = &open {
                return Err(perr(
                    path,
                    line_no,
                    col,
                    format!("blocks cannot nest (block '{}' is still open)", outer.name),
                ));
            }
            let head = head.trim_end();
            let name_len = head.chars().take_while(|c| c.is_ascii_alphanumeric() || *c == '_').count();
            let (name, rest) = head.split_at(name_len);
            if !is_ident(name) {
                return Err(perr(path, line_no, col, "expected a block name before '{'".into()));
            }
            let rest = rest.trim();
            let arg = if rest.is_empty() {
                None
            } else if let Some(q) = rest.strip_prefix('"') {
                match q.strip_suffix('"') {
                    Some(inner) if !inner.is_empty() && !inner.contains('"') => {
                        Some(inner.to_string())
                    }
                    _ => {
                        return Err(perr(
                            path,
                            line_no,
                            col,
                            format!("malformed quoted argument on block '{name}'"),
                        ))
                    }
                }
            } else if is_ident(rest) {
                Some(rest.to_string())
            } else {
                return Err(perr(
                    path,
                    line_no,
                    col,
                    format!("block '{name}' argument must be an identifier or quoted string"),
                ));
            };
            open = Some(RawBlock { name: name.to_string(), arg, line: line_no, col, entries: Vec::new() });
        } else if let Some(eq_idx) = content.find('=') {
            let key = content[..eq_idx].trim();
            if !is_ident(key) {
                return Err(perr(path, line_no, col, "expected an identifier key before '='".into()));
            }
            let value_raw = &content[eq_idx + 1..];
            let value = value_raw.trim();
            if value.is_empty() {
                return Err(perr(path, line_no, col, format!("key '{key}' has no value")));
            }
            let value_col = eq_idx + 2 + (value_raw.len() - value_raw.trim_start().len());
            let entry = RawEntry {
                key: key.to_string(),
                key_col: col,
                val: Val { value: value.to_string(), line: line_no, col: value_col },
            };
            match open.as_mut() {
                Some(block) => block.entries.push(entry),
                None => items.push(RawItem::Entry(entry)),
            }
        } else {
            return Err(perr(
                path,
                line_no,
                col,
                "expected 'key = value', 'name {', or '}'".into(),
            ));
        }
    }
    if let Some(block) = open {
        return Err(perr(path, block.line, block.col, format!("block '{}' is never closed", block.name)));
    }
    Ok(items)
}

/// Strict key access over one block: duplicates and unknown keys are errors.
struct BlockReader<'p> {
    path: &'p str,
    block_name: String,
    line: usize,
    col: usize,
    entries: Vec<(RawEntry, bool)>,
}

impl<'p> BlockReader<'p> {
    fn new(path: &'p str, block: RawBlock) -> Result<BlockReader<'p>, DriverError> {
        for i in 1..block.entries.len() {
            let key = &block.entries[i].key;
            if block.entries[..i].iter().any(|e| &e.key == key) {
                let e = &block.entries[i];
                return Err(perr(
                    path,
                    e.val.line,
                    e.key_col,
                    format!("duplicate key '{}' in block '{}'", key, block.name),
                ));
            }
        }
        Ok(BlockReader {
            path,
            block_name: block.name,
            line: block.line,
            col: block.col,
            entries: block.entries.into_iter().map(|e| (e, false)).collect(),
        })
    }

    fn optional(&mut self, key: &str) -> Option<Val> {
        for (entry, used) in &mut self.entries {
            if entry.key == key {
                *used = true;
                return Some(entry.val.clone());
            }
        }
        None
    }

    fn require(&mut self, key: &str) -> Result<Val, DriverError> {
        self.optional(key).ok_or_else(|| {
            perr(
                self.path,
                self.line,
                self.col,
                format!("block '{}' is missing key '{}'", self.block_name, key),
            )
        })
    }

    fn finish(self) -> Result<(), DriverError> {
        for (entry, used) in &self.entries {
            if !used {
                return Err(perr(
                    self.path,
                    entry.val.line,
                    entry.key_col,
                    format!("unknown key '{}' in block '{}'", entry.key, self.block_name),
                ));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Typed value parsers.

fn p_f64(path: &str, v: &Val) -> Result<f64, DriverError> {
    match v.value.parse::<f64>() {
        Ok(x) if x.is_finite() => Ok(x),
        _ => Err(perr(path, v.line, v.col, format!("expected a number, got '{}'", v.value))),
    }
}

fn p_f64_positive(path: &str, v: &Val) -> Result<f64, DriverError> {
    let x = p_f64(path, v)?;
    if x > 0.0 {
        Ok(x)
    } else {
        Err(perr(path, v.line, v.col, format!("expected a positive number, got '{}'", v.value)))
    }
}

fn p_f64_nonneg(path: &str, v: &Val) -> Result<f64, DriverError> {
    let x = p_f64(path, v)?;
    if x >= 0.0 {
        Ok(x)
    } else {
        Err(perr(path, v.line, v.col, format!("expected a non-negative number, got '{}'", v.value)))
    }
}

fn p_usize(path: &str, v: &Val) -> Result<usize, DriverError> {
    v.value
        .parse::<usize>()
        .map_err(|_| perr(path, v.line, v.col, format!("expected a non-negative integer, got '{}'", v.value)))
}

fn p_bool(path: &str, v: &Val) -> Result<bool, DriverError> {
    match v.value.as_str() {
        "yes" => Ok(true),
        "no" => Ok(false),
        other => Err(perr(path, v.line, v.col, format!("expected 'yes' or 'no', got '{other}'"))),
    }
}

fn p_words<T>(
    path: &str,
    v: &Val,
    n: usize,
    what: &str,
    parse_one: impl Fn(&str) -> Option<T>,
) -> Result<Vec<T>, DriverError> {
    let words: Vec<&str> = v.value.split_whitespace().collect();
    if words.len() != n {
        return Err(perr(
            path,
            v.line,
            v.col,
            format!("expected {n} {what} values, got {}", words.len()),
        ));
    }
    let mut out = Vec::with_capacity(n);
    for w in words {
        match parse_one(w) {
            Some(x) => out.push(x),
            None => {
                return Err(perr(path, v.line, v.col, format!("expected {what} values, got '{w}'")))
            }
        }
    }
    Ok(out)
}

fn p_f64_n(path: &str, v: &Val, n: usize) -> Result<Vec<f64>, DriverError> {
    p_words(path, v, n, "numeric", |w| w.parse::<f64>().ok().filter(|x| x.is_finite()))
}

fn p_usize_n(path: &str, v: &Val, n: usize) -> Result<Vec<usize>, DriverError> {
    p_words(path, v, n, "integer", |w| w.parse::<usize>().ok())
}

fn p_patch_kind(path: &str, v: &Val) -> Result<PatchKind, DriverError> {
    match v.value.as_str() {
        "periodic" => Ok(PatchKind::Periodic),
        "wall" => Ok(PatchKind::FixedValue),
        "zeroGradient" => Ok(PatchKind::ZeroGradient),
        other => Err(perr(
            path,
            v.line,
            v.col,
            format!("expected 'periodic', 'wall', or 'zeroGradient', got '{other}'"),
        )),
    }
}

fn p_ddt(path: &str, v: &Val) -> Result<DdtScheme, DriverError> {
    match v.value.as_str() {
        "euler" => Ok(DdtScheme::Euler),
        "backward2" => Ok(DdtScheme::Backward2),
        other => Err(perr(path, v.line, v.col, format!("expected 'euler' or 'backward2', got '{other}'"))),
    }
}

fn p_div(path: &str, v: &Val) -> Result<DivScheme, DriverError> {
    match v.value.as_str() {
        "linear" => Ok(DivScheme::Linear),
        "upwind" => Ok(DivScheme::Upwind),
        other => Err(perr(path, v.line, v.col, format!("expected 'linear' or 'upwind', got '{other}'"))),
    }
}

fn p_chem_mode(path: &str, v: &Val) -> Result<ChemistryMode, DriverError> {
    match v.value.as_str() {
        "none" => Ok(ChemistryMode::None),
        "ode" => Ok(ChemistryMode::Ode),
        "surrogate" => Ok(ChemistryMode::Surrogate),
        other => Err(perr(
            path,
            v.line,
            v.col,
            format!("expected 'none', 'ode', or 'surrogate', got '{other}'"),
        )),
    }
}

// ---------------------------------------------------------------------------
// Case configuration.

#[derive(Debug, Clone, PartialEq)]
pub struct MeshConfig {
    pub dims: [usize; 3],
    pub lengths: [f64; 3],
    /// Per-side closures in (xmin, xmax, ymin, ymax, zmin, zmax) order.
    pub sides: [PatchKind; 6],
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeConfig {
    pub dt: f64,
    /// Must be an integer multiple of dt; zero means "write the initial
    /// state and stop".
    pub end_time: f64,
    pub max_co: f64,
    /// Snapshot cadence in steps.
    pub write_interval: usize,
}

impl TimeConfig {
    pub fn n_steps(&self) -> usize {
        (self.end_time / self.dt).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchemesConfig {
    pub ddt: DdtScheme,
    pub div_u: DivScheme,
    pub div_scalar: DivScheme,
}

/// One `kind absTol relTol maxIter` line of the solvers block.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverSpec {
    pub kind: SolverKind,
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_iter: usize,
}

impl SolverSpec {
    pub fn controls(&self) -> SolverControls {
        let mut c = SolverControls::new(self.kind);
        c.abs_tol = self.abs_tol;
        c.rel_tol = self.rel_tol;
        c.max_iter = self.max_iter;
        c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolversConfig {
    pub u: SolverSpec,
    pub p: SolverSpec,
    pub y: SolverSpec,
    pub h: SolverSpec,
    pub n_correctors: usize,
    pub momentum_predictor: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChemistryConfig {
    pub mode: ChemistryMode,
    /// Mechanism path, resolved against the case file's directory.
    pub mechanism: String,
    /// Weights path; required exactly when mode is surrogate.
    pub weights: Option<String>,
    /// Training dt of the weights file, which does not store it.
    pub surrogate_dt: Option<f64>,
    pub abs_tol: f64,
    pub rel_tol: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReactiveLayer {
    pub fuel: String,
    pub oxidizer: String,
    /// Tanh half-width of the fuel slab edges, in meters.
    pub interface_width: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitKind {
    Tgv,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitConfig {
    pub kind: InitKind,
    pub u0: f64,
    /// Characteristic length; the box edge must be an integer multiple of
    /// 2 pi L so the vortex is periodic.
    pub l: f64,
    pub t: f64,
    pub p: f64,
    pub prandtl: f64,
    pub energy_dpdt: bool,
    pub reactive: Option<ReactiveLayer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputConfig {
    pub dir: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseConfig {
    pub mesh: MeshConfig,
    pub time: TimeConfig,
    pub schemes: SchemesConfig,
    pub solvers: SolversConfig,
    pub chemistry: ChemistryConfig,
    pub init: InitConfig,
    pub output: OutputConfig,
}

const SIDE_KEYS: [&str; 6] = ["xmin", "xmax", "ymin", "ymax", "zmin", "zmax"];

fn parse_mesh_block(path: &str, block: RawBlock) -> Result<MeshConfig, DriverError> {
    let mut r = BlockReader::new(path, block)?;
    let dims_v = r.require("dims")?;
    let dims = p_usize_n(path, &dims_v, 3)?;
    if dims.iter().any(|&d| d == 0) {
        return Err(perr(path, dims_v.line, dims_v.col, "mesh dims must all be at least 1".into()));
    }
    let len_v = r.require("lengths")?;
    let lengths = p_f64_n(path, &len_v, 3)?;
    if lengths.iter().any(|&l| l <= 0.0) {
        return Err(perr(path, len_v.line, len_v.col, "mesh lengths must all be positive".into()));
    }
    let mut sides = [PatchKind::Periodic; 6];
    for (i, key) in SIDE_KEYS.iter().enumerate() {
        sides[i] = p_patch_kind(path, &r.require(key)?)?;
    }
    r.finish()?;
    Ok(MeshConfig {
        dims: [dims[0], dims[1], dims[2]],
        lengths: [lengths[0], lengths[1], lengths[2]],
        sides,
    })
}

fn parse_time_block(path: &str, block: RawBlock) -> Result<TimeConfig, DriverError> {
    let mut r = BlockReader::new(path, block)?;
    let dt = p_f64_positive(path, &r.require("dt")?)?;
    let end_v = r.require("endTime")?;
    let end_time = p_f64_nonneg(path, &end_v)?;
    let ratio = end_time / dt;
    if (ratio - ratio.round()).abs() > 1e-6 * ratio.max(1.0) {
        return Err(perr(
            path,
            end_v.line,
            end_v.col,
            format!("endTime {} is not an integer multiple of dt {}", end_v.value, dt),
        ));
    }
    let max_co = p_f64_positive(path, &r.require("maxCo")?)?;
    let wi_v = r.require("writeInterval")?;
    let write_interval = p_usize(path, &wi_v)?;
    if write_interval == 0 {
        return Err(perr(path, wi_v.line, wi_v.col, "writeInterval must be at least 1".into()));
    }
    r.finish()?;
    Ok(TimeConfig { dt, end_time, max_co, write_interval })
}

fn parse_schemes_block(path: &str, block: RawBlock) -> Result<SchemesConfig, DriverError> {
    let mut r = BlockReader::new(path, block)?;
    let ddt = p_ddt(path, &r.require("ddt")?)?;
    let div_u = p_div(path, &r.require("divU")?)?;
    let div_scalar = p_div(path, &r.require("divScalar")?)?;
    r.finish()?;
    Ok(SchemesConfig { ddt, div_u, div_scalar })
}

fn p_solver_spec(path: &str, v: &Val) -> Result<SolverSpec, DriverError> {
    let words: Vec<&str> = v.value.split_whitespace().collect();
    if words.len() != 4 {
        return Err(perr(
            path,
            v.line,
            v.col,
            format!("expected 'kind absTol relTol maxIter', got '{}'", v.value),
        ));
    }
    let kind = match words[0] {
        "pcg" => SolverKind::Pcg,
        "bicgstab" => SolverKind::BiCgStab,
        "amgpcg" => SolverKind::AmgPcg,
        other => {
            return Err(perr(
                path,
                v.line,
                v.col,
                format!("expected solver kind 'pcg', 'bicgstab', or 'amgpcg', got '{other}'"),
            ))
        }
    };
    let num = |w: &str| -> Result<f64, DriverError> {
        w.parse::<f64>()
            .ok()
            .filter(|x| x.is_finite() && *x >= 0.0)
            .ok_or_else(|| perr(path, v.line, v.col, format!("expected a non-negative tolerance, got '{w}'")))
    };
    let abs_tol = num(words[1])?;
    let rel_tol = num(words[2])?;
    let max_iter = words[3]
        .parse::<usize>()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| perr(path, v.line, v.col, format!("expected maxIter >= 1, got '{}'", words[3])))?;
    Ok(SolverSpec { kind, abs_tol, rel_tol, max_iter })
}

fn parse_solvers_block(path: &str, block: RawBlock) -> Result<SolversConfig, DriverError> {
    let mut r = BlockReader::new(path, block)?;
    let u = p_solver_spec(path, &r.require("u")?)?;
    let p = p_solver_spec(path, &r.require("p")?)?;
    let y = p_solver_spec(path, &r.require("y")?)?;
    let h = p_solver_spec(path, &r.require("h")?)?;
    let nc_v = r.require("nCorrectors")?;
    let n_correctors = p_usize(path, &nc_v)?;
    if n_correctors == 0 {
        return Err(perr(path, nc_v.line, nc_v.col, "nCorrectors must be at least 1".into()));
    }
    let momentum_predictor = p_bool(path, &r.require("momentumPredictor")?)?;
    r.finish()?;
    Ok(SolversConfig { u, p, y, h, n_correctors, momentum_predictor })
}

fn parse_chemistry_block(path: &str, block: RawBlock) -> Result<ChemistryConfig, DriverError> {
    let mut r = BlockReader::new(path, block)?;
    let mode = p_chem_mode(path, &r.require("mode")?)?;
    let mechanism = r.require("mechanism")?.value;
    let weights = r.optional("weights");
    let surrogate_dt = r.optional("surrogateDt");
    let (weights, surrogate_dt) = if mode == ChemistryMode::Surrogate {
        let w = weights.ok_or_else(|| {
            perr(path, r.line, r.col, "surrogate chemistry requires key 'weights'".into())
        })?;
        let sdt = surrogate_dt.ok_or_else(|| {
            perr(path, r.line, r.col, "surrogate chemistry requires key 'surrogateDt'".into())
        })?;
        (Some(w.value), Some(p_f64_positive(path, &sdt)?))
    } else {
        if let Some(w) = weights {
            return Err(perr(path, w.line, w.col, "key 'weights' is only valid when mode = surrogate".into()));
        }
        if let Some(s) = surrogate_dt {
            return Err(perr(path, s.line, s.col, "key 'surrogateDt' is only valid when mode = surrogate".into()));
        }
        (None, None)
    };
    let abs_tol = match r.optional("absTol") {
        Some(v) => p_f64_positive(path, &v)?,
        None => 1e-10,
    };
    let rel_tol = match r.optional("relTol") {
        Some(v) => p_f64_positive(path, &v)?,
        None => 1e-6,
    };
    r.finish()?;
    Ok(ChemistryConfig { mode, mechanism, weights, surrogate_dt, abs_tol, rel_tol })
}

fn parse_init_block(path: &str, block: RawBlock) -> Result<InitConfig, DriverError> {
    let mut r = BlockReader::new(path, block)?;
    let kind_v = r.require("kind")?;
    let kind = match kind_v.value.as_str() {
        "tgv" => InitKind::Tgv,
        other => {
            return Err(perr(path, kind_v.line, kind_v.col, format!("unknown init kind '{other}' (expected 'tgv')")))
        }
    };
    let u0 = p_f64(path, &r.require("u0")?)?;
    let l = p_f64_positive(path, &r.require("l")?)?;
    let t = p_f64_positive(path, &r.require("t")?)?;
    let p = p_f64_positive(path, &r.require("p")?)?;
    let prandtl = match r.optional("prandtl") {
        Some(v) => p_f64_positive(path, &v)?,
        None => 0.72,
    };
    let energy_dpdt = match r.optional("energyDpdt") {
        Some(v) => p_bool(path, &v)?,
        None => false,
    };
    let reactive_v = r.optional("reactive");
    let reactive_on = match &reactive_v {
        Some(v) => p_bool(path, v)?,
        None => false,
    };
    let fuel = r.optional("fuel");
    let oxidizer = r.optional("oxidizer");
    let width = r.optional("interfaceWidth");
    let reactive = if reactive_on {
        let fuel = fuel
            .ok_or_else(|| perr(path, r.line, r.col, "reactive init requires key 'fuel'".into()))?
            .value;
        let oxidizer = oxidizer
            .ok_or_else(|| perr(path, r.line, r.col, "reactive init requires key 'oxidizer'".into()))?
            .value;
        let width_v = width.ok_or_else(|| {
            perr(path, r.line, r.col, "reactive init requires key 'interfaceWidth'".into())
        })?;
        if fuel == oxidizer {
            return Err(perr(path, r.line, r.col, "fuel and oxidizer must be different species".into()));
        }
        Some(ReactiveLayer { fuel, oxidizer, interface_width: p_f64_positive(path, &width_v)? })
    } else {
        for v in [fuel, oxidizer, width].into_iter().flatten() {
            return Err(perr(path, v.line, v.col, "layering keys are only valid when reactive = yes".into()));
        }
        None
    };
    r.finish()?;
    Ok(InitConfig { kind, u0, l, t, p, prandtl, energy_dpdt, reactive })
}

fn parse_output_block(path: &str, block: RawBlock) -> Result<OutputConfig, DriverError> {
    let mut r = BlockReader::new(path, block)?;
    let dir = r.require("dir")?.value;
    r.finish()?;
    Ok(OutputConfig { dir })
}

/// Parse a case from text. File-system checks (the mechanism and weights
/// paths existing) are done by [`parse_case`], which knows the base directory.
pub fn parse_case_str(text: &str, path: &str) -> Result<CaseConfig, DriverError> {
    let items = parse_raw(text, path)?;
    let mut mesh = None;
    let mut time = None;
    let mut schemes = None;
    let mut solvers = None;
    let mut chem = None;
    let mut init = None;
    let mut output = None;
    for item in items {
        let block = match item {
            RawItem::Entry(e) => {
                return Err(perr(path, e.val.line, e.key_col, format!("key '{}' must live inside a block", e.key)))
            }
            RawItem::Block(b) => b,
        };
        if let Some(arg) = &block.arg {
            return Err(perr(path, block.line, block.col, format!("block '{}' takes no argument, got '{arg}'", block.name)));
        }
        let (line, col) = (block.line, block.col);
        let dup = |name: &str| perr(path, line, col, format!("duplicate block '{name}'"));
        match block.name.as_str() {
            "mesh" => {
                if mesh.is_some() {
                    return Err(dup("mesh"));
                }
                mesh = Some(parse_mesh_block(path, block)?);
            }
            "time" => {
                if time.is_some() {
                    return Err(dup("time"));
                }
                time = Some(parse_time_block(path, block)?);
            }
            "schemes" => {
                if schemes.is_some() {
                    return Err(dup("schemes"));
                }
                schemes = Some(parse_schemes_block(path, block)?);
            }
            "solvers" => {
                if solvers.is_some() {
                    return Err(dup("solvers"));
                }
                solvers = Some(parse_solvers_block(path, block)?);
            }
            "chemistry" => {
                if chem.is_some() {
                    return Err(dup("chemistry"));
                }
                chem = Some(parse_chemistry_block(path, block)?);
            }
            "init" => {
                if init.is_some() {
                    return Err(dup("init"));
                }
                init = Some(parse_init_block(path, block)?);
            }
            "output" => {
                if output.is_some() {
                    return Err(dup("output"));
                }
                output = Some(parse_output_block(path, block)?);
            }
            other => return Err(perr(path, line, col, format!("unknown block '{other}'"))),
        }
    }
    let missing = |name: &str| inv(path, format!("missing required block '{name}'"));
    Ok(CaseConfig {
        mesh: mesh.ok_or_else(|| missing("mesh"))?,
        time: time.ok_or_else(|| missing("time"))?,
        schemes: schemes.ok_or_else(|| missing("schemes"))?,
        solvers: solvers.ok_or_else(|| missing("solvers"))?,
        chemistry: chem.ok_or_else(|| missing("chemistry"))?,
        init: init.ok_or_else(|| missing("init"))?,
        output: output.ok_or_else(|| missing("output"))?,
    })
}

/// Parse a case file and verify that the mechanism (and weights, for
/// surrogate chemistry) it references exist next to it.
pub fn parse_case(case_path: &Path) -> Result<CaseConfig, DriverError> {
    let label = case_path.display().to_string();
    let text = fs::read_to_string(case_path).map_err(io_err(case_path))?;
    let case = parse_case_str(&text, &label)?;
    let dir = case_dir(case_path);
    let mech_path = dir.join(&case.chemistry.mechanism);
    if !mech_path.is_file() {
        return Err(inv(&label, format!("mechanism file '{}' does not exist", mech_path.display())));
    }
    if let Some(weights) = &case.chemistry.weights {
        let weights_path = dir.join(weights);
        if !weights_path.is_file() {
            return Err(inv(&label, format!("weights file '{}' does not exist", weights_path.display())));
        }
    }
    Ok(case)
}

fn case_dir(case_path: &Path) -> PathBuf {
    match case_path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn fmt_f64(x: f64) -> String {
    format!("{x:e}")
}

fn patch_kind_token(kind: PatchKind) -> &'static str {
    match kind {
        PatchKind::Periodic => "periodic",
        PatchKind::FixedValue => "wall",
        PatchKind::ZeroGradient => "zeroGradient",
    }
}

fn solver_kind_token(kind: SolverKind) -> &'static str {
    match kind {
        SolverKind::Pcg => "pcg",
        SolverKind::BiCgStab => "bicgstab",
        SolverKind::AmgPcg => "amgpcg",
    }
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

/// Render a case in canonical form: fixed block and key order, `{:e}` floats.
/// Reparsing the output reproduces the config exactly, and re-emitting it is
/// byte-stable.
pub fn emit_case(case: &CaseConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "mesh {{");
    let _ = writeln!(s, "    dims = {} {} {}", case.mesh.dims[0], case.mesh.dims[1], case.mesh.dims[2]);
    let _ = writeln!(
        s,
        "    lengths = {} {} {}",
        fmt_f64(case.mesh.lengths[0]),
        fmt_f64(case.mesh.lengths[1]),
        fmt_f64(case.mesh.lengths[2])
    );
    for (i, key) in SIDE_KEYS.iter().enumerate() {
        let _ = writeln!(s, "    {key} = {}", patch_kind_token(case.mesh.sides[i]));
    }
    let _ = writeln!(s, "}}");
    let _ = writeln!(s, "time {{");
    let _ = writeln!(s, "    dt = {}", fmt_f64(case.time.dt));
    let _ = writeln!(s, "    endTime = {}", fmt_f64(case.time.end_time));
    let _ = writeln!(s, "    maxCo = {}", fmt_f64(case.time.max_co));
    let _ = writeln!(s, "    writeInterval = {}", case.time.write_interval);
    let _ = writeln!(s, "}}");
    let _ = writeln!(s, "schemes {{");
    let ddt = match case.schemes.ddt {
        DdtScheme::Euler => "euler",
        DdtScheme::Backward2 => "backward2",
    };
    let div = |d: DivScheme| match d {
        DivScheme::Linear => "linear",
        DivScheme::Upwind => "upwind",
    };
    let _ = writeln!(s, "    ddt = {ddt}");
    let _ = writeln!(s, "    divU = {}", div(case.schemes.div_u));
    let _ = writeln!(s, "    divScalar = {}", div(case.schemes.div_scalar));
    let _ = writeln!(s, "}}");
    let _ = writeln!(s, "solvers {{");
    let spec = |sp: &SolverSpec| {
        format!(
            "{} {} {} {}",
            solver_kind_token(sp.kind),
            fmt_f64(sp.abs_tol),
            fmt_f64(sp.rel_tol),
            sp.max_iter
        )
    };
    let _ = writeln!(s, "    u = {}", spec(&case.solvers.u));
    let _ = writeln!(s, "    p = {}", spec(&case.solvers.p));
    let _ = writeln!(s, "    y = {}", spec(&case.solvers.y));
    let _ = writeln!(s, "    h = {}", spec(&case.solvers.h));
    let _ = writeln!(s, "    nCorrectors = {}", case.solvers.n_correctors);
    let _ = writeln!(s, "    momentumPredictor = {}", yes_no(case.solvers.momentum_predictor));
    let _ = writeln!(s, "}}");
    let _ = writeln!(s, "chemistry {{");
    let mode = match case.chemistry.mode {
        ChemistryMode::None => "none",
        ChemistryMode::Ode => "ode",
        ChemistryMode::Surrogate => "surrogate",
    };
    let _ = writeln!(s, "    mode = {mode}");
    let _ = writeln!(s, "    mechanism = {}", case.chemistry.mechanism);
    if let Some(w) = &case.chemistry.weights {
        let _ = writeln!(s, "    weights = {w}");
    }
    if let Some(sdt) = case.chemistry.surrogate_dt {
        let _ = writeln!(s, "    surrogateDt = {}", fmt_f64(sdt));
    }
    let _ = writeln!(s, "    absTol = {}", fmt_f64(case.chemistry.abs_tol));
    let _ = writeln!(s, "    relTol = {}", fmt_f64(case.chemistry.rel_tol));
    let _ = writeln!(s, "}}");
    let _ = writeln!(s, "init {{");
    let _ = writeln!(s, "    kind = tgv");
    let _ = writeln!(s, "    u0 = {}", fmt_f64(case.init.u0));
    let _ = writeln!(s, "    l = {}", fmt_f64(case.init.l));
    let _ = writeln!(s, "    t = {}", fmt_f64(case.init.t));
    let _ = writeln!(s, "    p = {}", fmt_f64(case.init.p));
    let _ = writeln!(s, "    prandtl = {}", fmt_f64(case.init.prandtl));
    let _ = writeln!(s, "    energyDpdt = {}", yes_no(case.init.energy_dpdt));
    let _ = writeln!(s, "    reactive = {}", yes_no(case.init.reactive.is_some()));
    if let Some(layer) = &case.init.reactive {
        let _ = writeln!(s, "    fuel = {}", layer.fuel);
        let _ = writeln!(s, "    oxidizer = {}", layer.oxidizer);
        let _ = writeln!(s, "    interfaceWidth = {}", fmt_f64(layer.interface_width));
    }
    let _ = writeln!(s, "}}");
    let _ = writeln!(s, "output {{");
    let _ = writeln!(s, "    dir = {}", case.output.dir);
    let _ = writeln!(s, "}}");
    s
}

// ---------------------------------------------------------------------------
// Mechanism files.

/// Textual mirror of a mechanism file; [`build_mechanism`] turns it into a
/// validated [`Mechanism`]. Keeping the mirror around lets tools re-emit the
/// file canonically without losing entry order.
#[derive(Debug, Clone, PartialEq)]
pub struct MechanismFile {
    pub species: Vec<SpeciesEntry>,
    pub inert: Vec<String>,
    pub reactions: Vec<ReactionEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeciesEntry {
    pub name: String,
    pub w: f64,
    pub t_low: f64,
    pub t_common: f64,
    pub t_high: f64,
    pub low: [f64; 7],
    pub high: [f64; 7],
    pub transport: TransportModel,
    pub lewis: f64,
    pub composition: Vec<(String, f64)>,
}

/// One reaction with Ea already normalized to J/kmol.
#[derive(Debug, Clone, PartialEq)]
pub struct ReactionEntry {
    pub reactants: Vec<(String, f64)>,
    pub products: Vec<(String, f64)>,
    pub reversible: bool,
    pub third_body: bool,
    pub a: f64,
    pub beta: f64,
    pub ea: f64,
    pub efficiencies: Vec<(String, f64)>,
}

/// Canonical equation text: coefficients only when not 1, `+ M` appended for
/// third-body reactions, `<=>` for reversible ones.
pub fn equation_string(entry: &ReactionEntry) -> String {
    let side = |terms: &[(String, f64)]| {
        let mut parts: Vec<String> = terms
            .iter()
            .map(|(name, nu)| if *nu == 1.0 { name.clone() } else { format!("{nu} {name}") })
            .collect();
        if entry.third_body {
            parts.push("M".to_string());
        }
        parts.join(" + ")
    };
    let arrow = if entry.reversible { "<=>" } else { "=>" };
    format!("{} {} {}", side(&entry.reactants), arrow, side(&entry.products))
}

/// Parse one side of an equation into (terms, saw_M).
fn parse_side(path: &str, line: usize, col: usize, side: &str) -> Result<(Vec<(String, f64)>, bool), DriverError> {
    let mut terms: Vec<(String, f64)> = Vec::new();
    let mut saw_m = false;
    for term in side.split('+') {
        let words: Vec<&str> = term.split_whitespace().collect();
        let (nu, name) = match words.as_slice() {
            [name] => (1.0, *name),
            [coeff, name] => {
                let nu = coeff.parse::<f64>().ok().filter(|x| x.is_finite() && *x > 0.0).ok_or_else(|| {
                    perr(path, line, col, format!("bad stoichiometric coefficient '{coeff}'"))
                })?;
                (nu, *name)
            }
            _ => {
                return Err(perr(
                    path,
                    line,
                    col,
                    format!("bad equation term '{}' (expected '[coeff] name')", term.trim()),
                ))
            }
        };
        if name == "M" {
            if words.len() != 1 || saw_m {
                return Err(perr(path, line, col, "third body 'M' must appear once, without a coefficient".into()));
            }
            saw_m = true;
            continue;
        }
        if !is_ident(name) {
            return Err(perr(path, line, col, format!("bad species name '{name}' in equation")));
        }
        match terms.iter_mut().find(|(n, _)| n == name) {
            Some((_, existing)) => *existing += nu,
            None => terms.push((name.to_string(), nu)),
        }
    }
    if terms.is_empty() {
        return Err(perr(path, line, col, "equation side has no species".into()));
    }
    Ok((terms, saw_m))
}

fn parse_equation(
    path: &str,
    line: usize,
    col: usize,
    eq: &str,
) -> Result<(Vec<(String, f64)>, Vec<(String, f64)>, bool, bool), DriverError> {
    let (lhs, rhs, reversible) = if let Some((l, r)) = eq.split_once("<=>") {
        (l, r, true)
    } else if let Some((l, r)) = eq.split_once("=>") {
        (l, r, false)
    } else {
        return Err(perr(path, line, col, format!("equation '{eq}' has no '=>' or '<=>'")));
    };
    let (reactants, m_lhs) = parse_side(path, line, col, lhs)?;
    let (products, m_rhs) = parse_side(path, line, col, rhs)?;
    if m_lhs != m_rhs {
        return Err(perr(path, line, col, "third body 'M' must appear on both sides or neither".into()));
    }
    Ok((reactants, products, reversible, m_lhs))
}

fn parse_transport(path: &str, v: &Val) -> Result<TransportModel, DriverError> {
    let words: Vec<&str> = v.value.split_whitespace().collect();
    let num = |w: &str| -> Result<f64, DriverError> {
        w.parse::<f64>()
            .ok()
            .filter(|x| x.is_finite() && *x > 0.0)
            .ok_or_else(|| perr(path, v.line, v.col, format!("expected a positive number, got '{w}'")))
    };
    match words.as_slice() {
        ["constant", mu] => Ok(TransportModel::Constant { mu: num(mu)? }),
        ["sutherland", a_s, t_s] => Ok(TransportModel::Sutherland { a_s: num(a_s)?, t_s: num(t_s)? }),
        _ => Err(perr(
            path,
            v.line,
            v.col,
            format!("expected 'constant mu' or 'sutherland As Ts', got '{}'", v.value),
        )),
    }
}

fn parse_pairs(path: &str, v: &Val, what: &str) -> Result<Vec<(String, f64)>, DriverError> {
    let words: Vec<&str> = v.value.split_whitespace().collect();
    if words.is_empty() || words.len() % 2 != 0 {
        return Err(perr(path, v.line, v.col, format!("expected '{what} value' pairs, got '{}'", v.value)));
    }
    let mut out: Vec<(String, f64)> = Vec::new();
    for pair in words.chunks(2) {
        if !is_ident(pair[0]) {
            return Err(perr(path, v.line, v.col, format!("bad {what} name '{}'", pair[0])));
        }
        let x = pair[1].parse::<f64>().ok().filter(|x| x.is_finite() && *x >= 0.0).ok_or_else(|| {
            perr(path, v.line, v.col, format!("expected a non-negative number, got '{}'", pair[1]))
        })?;
        if out.iter().any(|(n, _)| n == pair[0]) {
            return Err(perr(path, v.line, v.col, format!("duplicate {what} '{}'", pair[0])));
        }
        out.push((pair[0].to_string(), x));
    }
    Ok(out)
}

fn parse_species_block(path: &str, block: RawBlock) -> Result<SpeciesEntry, DriverError> {
    let (line, col) = (block.line, block.col);
    let name = match &block.arg {
        Some(n) if is_ident(n) => n.clone(),
        _ => return Err(perr(path, line, col, "species block needs a name: 'species NAME {'".into())),
    };
    let mut r = BlockReader::new(path, block)?;
    let w = p_f64_positive(path, &r.require("w")?)?;
    let t_low = p_f64_positive(path, &r.require("tLow")?)?;
    let t_common = p_f64_positive(path, &r.require("tCommon")?)?;
    let t_high = p_f64_positive(path, &r.require("tHigh")?)?;
    let low_v = p_f64_n(path, &r.require("low")?, 7)?;
    let high_v = p_f64_n(path, &r.require("high")?, 7)?;
    let transport = parse_transport(path, &r.require("transport")?)?;
    let lewis = p_f64_positive(path, &r.require("lewis")?)?;
    let composition = match r.optional("composition") {
        Some(v) => parse_pairs(path, &v, "element")?,
        None => Vec::new(),
    };
    r.finish()?;
    let mut low = [0.0; 7];
    low.copy_from_slice(&low_v);
    let mut high = [0.0; 7];
    high.copy_from_slice(&high_v);
    Ok(SpeciesEntry { name, w, t_low, t_common, t_high, low, high, transport, lewis, composition })
}

enum EaUnits {
    JPerKmol,
    Kelvin,
}

/// Parse a mechanism from text. Order of blocks is free; species referenced
/// by reactions, efficiencies, or the inert list must be declared somewhere
/// in the file.
pub fn parse_mechanism_str(text: &str, path: &str) -> Result<MechanismFile, DriverError> {
    let items = parse_raw(text, path)?;
    let mut ea_units: Option<EaUnits> = None;
    let mut species: Vec<SpeciesEntry> = Vec::new();
    let mut inert: Vec<String> = Vec::new();
    let mut inert_seen = false;
    let mut reactions: Vec<ReactionEntry> = Vec::new();
    let mut reaction_pos: Vec<(usize, usize)> = Vec::new();
    for item in items {
        match item {
            RawItem::Entry(e) => {
                if e.key != "inert" {
                    return Err(perr(path, e.val.line, e.key_col, format!("unknown top-level key '{}'", e.key)));
                }
                if inert_seen {
                    return Err(perr(path, e.val.line, e.key_col, "duplicate 'inert' entry".into()));
                }
                inert_seen = true;
                for name in e.val.value.split_whitespace() {
                    if !is_ident(name) {
                        return Err(perr(path, e.val.line, e.val.col, format!("bad species name '{name}'")));
                    }
                    inert.push(name.to_string());
                }
            }
            RawItem::Block(block) => match block.name.as_str() {
                "units" => {
                    if ea_units.is_some() {
                        return Err(perr(path, block.line, block.col, "duplicate block 'units'".into()));
                    }
                    if block.arg.is_some() {
                        return Err(perr(path, block.line, block.col, "block 'units' takes no argument".into()));
                    }
                    let mut r = BlockReader::new(path, block)?;
                    let ea_v = r.require("ea")?;
                    ea_units = Some(match ea_v.value.as_str() {
                        "J/kmol" => EaUnits::JPerKmol,
                        "K" => EaUnits::Kelvin,
                        other => {
                            return Err(perr(
                                path,
                                ea_v.line,
                                ea_v.col,
                                format!("expected Ea units 'J/kmol' or 'K', got '{other}'"),
                            ))
                        }
                    });
                    r.finish()?;
                }
                "species" => {
                    let entry = parse_species_block(path, block)?;
                    if species.iter().any(|s| s.name == entry.name) {
                        return Err(inv(path, format!("species '{}' is declared twice", entry.name)));
                    }
                    species.push(entry);
                }
                "reaction" => {
                    let (line, col) = (block.line, block.col);
                    let eq = block.arg.clone().ok_or_else(|| {
                        perr(path, line, col, "reaction block needs a quoted equation: 'reaction \"A => B\" {'".into())
                    })?;
                    let (reactants, products, reversible, third_body) = parse_equation(path, line, col, &eq)?;
                    let mut r = BlockReader::new(path, block)?;
                    let a = p_f64_positive(path, &r.require("a")?)?;
                    let beta = p_f64(path, &r.require("beta")?)?;
                    let ea = p_f64(path, &r.require("ea")?)?;
                    let efficiencies = match r.optional("efficiencies") {
                        Some(v) => {
                            if !third_body {
                                return Err(perr(
                                    path,
                                    v.line,
                                    v.col,
                                    "efficiencies are only valid for third-body ('+ M') reactions".into(),
                                ));
                            }
                            parse_pairs(path, &v, "species")?
                        }
                        None => Vec::new(),
                    };
                    r.finish()?;
                    reactions.push(ReactionEntry {
                        reactants,
                        products,
                        reversible,
                        third_body,
                        a,
                        beta,
                        ea,
                        efficiencies,
                    });
                    reaction_pos.push((line, col));
                }
                other => {
                    return Err(perr(path, block.line, block.col, format!("unknown block '{other}'")))
                }
            },
        }
    }
    let ea_units = ea_units.ok_or_else(|| inv(path, "missing required block 'units'".to_string()))?;
    if species.is_empty() {
        return Err(inv(path, "a mechanism needs at least one species block".to_string()));
    }
    if let EaUnits::Kelvin = ea_units {
        for entry in &mut reactions {
            entry.ea *= crate::constants::R_UNIVERSAL;
        }
    }
    // Names are resolvable only once every block has been read.
    let known = |name: &String| species.iter().any(|s| &s.name == name);
    for (entry, &(line, col)) in reactions.iter().zip(&reaction_pos) {
        for (name, _) in entry.reactants.iter().chain(&entry.products).chain(&entry.efficiencies) {
            if !known(name) {
                return Err(perr(
                    path,
                    line,
                    col,
                    format!("reaction '{}' references undeclared species '{}'", equation_string(entry), name),
                ));
            }
        }
    }
    for name in &inert {
        if !known(name) {
            return Err(inv(path, format!("inert species '{name}' is not declared")));
        }
    }
    Ok(MechanismFile { species, inert, reactions })
}

/// Render a mechanism in canonical form (Ea in J/kmol, entry order kept).
pub fn emit_mechanism(file: &MechanismFile) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "units {{");
    let _ = writeln!(s, "    ea = J/kmol");
    let _ = writeln!(s, "}}");
    for sp in &file.species {
        let _ = writeln!(s, "species {} {{", sp.name);
        let _ = writeln!(s, "    w = {}", fmt_f64(sp.w));
        let _ = writeln!(s, "    tLow = {}", fmt_f64(sp.t_low));
        let _ = writeln!(s, "    tCommon = {}", fmt_f64(sp.t_common));
        let _ = writeln!(s, "    tHigh = {}", fmt_f64(sp.t_high));
        let coeffs = |a: &[f64; 7]| a.iter().map(|&x| fmt_f64(x)).collect::<Vec<_>>().join(" ");
        let _ = writeln!(s, "    low = {}", coeffs(&sp.low));
        let _ = writeln!(s, "    high = {}", coeffs(&sp.high));
        match &sp.transport {
            TransportModel::Constant { mu } => {
                let _ = writeln!(s, "    transport = constant {}", fmt_f64(*mu));
            }
            TransportModel::Sutherland { a_s, t_s } => {
                let _ = writeln!(s, "    transport = sutherland {} {}", fmt_f64(*a_s), fmt_f64(*t_s));
            }
        }
        let _ = writeln!(s, "    lewis = {}", fmt_f64(sp.lewis));
        if !sp.composition.is_empty() {
            let pairs =
                sp.composition.iter().map(|(el, n)| format!("{el} {n}")).collect::<Vec<_>>().join(" ");
            let _ = writeln!(s, "    composition = {pairs}");
        }
        let _ = writeln!(s, "}}");
    }
    if !file.inert.is_empty() {
        let _ = writeln!(s, "inert = {}", file.inert.join(" "));
    }
    for entry in &file.reactions {
        let _ = writeln!(s, "reaction \"{}\" {{", equation_string(entry));
        let _ = writeln!(s, "    a = {}", fmt_f64(entry.a));
        let _ = writeln!(s, "    beta = {}", fmt_f64(entry.beta));
        let _ = writeln!(s, "    ea = {}", fmt_f64(entry.ea));
        if !entry.efficiencies.is_empty() {
            let pairs = entry
                .efficiencies
                .iter()
                .map(|(n, e)| format!("{n} {}", fmt_f64(*e)))
                .collect::<Vec<_>>()
                .join(" ");
            let _ = writeln!(s, "    efficiencies = {pairs}");
        }
        let _ = writeln!(s, "}}");
    }
    s
}

/// Build the validated kinetics structures. Thermo range and atom-balance
/// problems are reported with species and equation names rather than indices.
pub fn build_mechanism(file: &MechanismFile, path: &str) -> Result<Mechanism, DriverError> {
    let mut species = Vec::with_capacity(file.species.len());
    for sp in &file.species {
        let thermo = Nasa7::new(sp.low, sp.high, sp.t_low, sp.t_common, sp.t_high).map_err(|e| {
            let msg = match e {
                ThermoError::BadRange { t_low, t_common, t_high } => {
                    format!("species '{}': temperature ranges must satisfy tLow < tCommon < tHigh, got {t_low}, {t_common}, {t_high}", sp.name)
                }
                other => format!("species '{}': {other}", sp.name),
            };
            inv(path, msg)
        })?;
        species.push(SpeciesDef {
            name: sp.name.clone(),
            w: sp.w,
            thermo,
            transport: sp.transport.clone(),
            lewis: sp.lewis,
            composition: sp.composition.clone(),
        });
    }
    let index_of = |name: &str| file.species.iter().position(|s| s.name == name).unwrap();
    let mut reactions = Vec::with_capacity(file.reactions.len());
    for entry in &file.reactions {
        let map = |terms: &[(String, f64)]| {
            terms.iter().map(|(n, nu)| (index_of(n), *nu)).collect::<Vec<_>>()
        };
        let third_body = entry.third_body.then(|| {
            let mut eff = vec![1.0; file.species.len()];
            for (name, e) in &entry.efficiencies {
                eff[index_of(name)] = *e;
            }
            eff
        });
        reactions.push(Reaction {
            reactants: map(&entry.reactants),
            products: map(&entry.products),
            a: entry.a,
            beta: entry.beta,
            ea: entry.ea,
            reversible: entry.reversible,
            third_body,
        });
    }
    Mechanism::new(species, reactions, &file.inert).map_err(|e| match e {
        ChemistryError::AtomImbalance { reaction, element, delta } => inv(
            path,
            format!(
                "reaction '{}' does not conserve element '{}' (net {delta})",
                equation_string(&file.reactions[reaction]),
                element
            ),
        ),
        other => inv(path, other.to_string()),
    })
}

/// Read, parse, and validate a mechanism file.
pub fn parse_mechanism(path: &Path) -> Result<(MechanismFile, Mechanism), DriverError> {
    let label = path.display().to_string();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let file = parse_mechanism_str(&text, &label)?;
    let mech = build_mechanism(&file, &label)?;
    Ok((file, mech))
}

// ---------------------------------------------------------------------------
// Initialization.

/// Taylor-Green vortex on a triply periodic box:
///
/// ```text
/// u =  u0 sin(x/L) cos(y/L) cos(z/L)
/// v = -u0 cos(x/L) sin(y/L) cos(z/L)
/// w =  0
/// ```
///
/// with uniform temperature and pressure. For reactive cases a fuel slab
/// occupies the middle half of the y extent, blended over `interfaceWidth`
/// by tanh profiles placed at y = Ly/4 and 3Ly/4, so composition stays
/// smooth across the periodic wrap:
///
/// ```text
/// s(y)      = 0.5 (tanh((y - Ly/4)/d) - tanh((y - 3Ly/4)/d))
/// Y_fuel    = s,   Y_oxidizer = 1 - s
/// ```
///
/// The discrete face flux of the vortex is divergence-free to rounding when
/// density is uniform, so the first pressure solve starts from a consistent
/// state.
pub fn init_tgv(
    mesh: &Arc<Mesh>,
    mech: &Arc<Mechanism>,
    init: &InitConfig,
    path: &str,
) -> Result<SimulationState, DriverError> {
    if !mesh.patches.is_empty() {
        return Err(inv(path, "tgv initialization requires a triply periodic mesh".to_string()));
    }
    let two_pi_l = 2.0 * std::f64::consts::PI * init.l;
    for axis in 0..3 {
        let ratio = mesh.geometry.lengths[axis] / two_pi_l;
        if ratio < 0.5 || (ratio - ratio.round()).abs() > 1e-8 {
            return Err(inv(
                path,
                format!(
                    "domain length {} along axis {axis} must be an integer multiple of 2*pi*L = {two_pi_l}",
                    mesh.geometry.lengths[axis]
                ),
            ));
        }
    }
    let n = mesh.n_cells();
    let n_sp = mech.n_species();
    let mut u = CellField::zeros(mesh, 3);
    for c in 0..n {
        let [x, y, z] = mesh.geometry.cell_centers[c];
        let (sx, cx) = (x / init.l).sin_cos();
        let (sy, cy) = (y / init.l).sin_cos();
        let cz = (z / init.l).cos();
        u.set(0, c, init.u0 * sx * cy * cz);
        u.set(1, c, -init.u0 * cx * sy * cz);
    }
    let t = CellField::uniform(mesh, &[init.t]);
    let mut y = CellField::zeros(mesh, n_sp);
    match &init.reactive {
        None => {
            if n_sp != 1 {
                return Err(inv(
                    path,
                    format!("nonreactive tgv needs a single-species mechanism, this one has {n_sp}"),
                ));
            }
            y.comp_mut(0).fill(1.0);
        }
        Some(layer) => {
            let fuel = mech.species_index(&layer.fuel).ok_or_else(|| {
                inv(path, format!("fuel species '{}' is not in the mechanism", layer.fuel))
            })?;
            let ox = mech.species_index(&layer.oxidizer).ok_or_else(|| {
                inv(path, format!("oxidizer species '{}' is not in the mechanism", layer.oxidizer))
            })?;
            let ly = mesh.geometry.lengths[1];
            let d = layer.interface_width;
            for c in 0..n {
                let yc = mesh.geometry.cell_centers[c][1];
                let s = 0.5 * (((yc - 0.25 * ly) / d).tanh() - ((yc - 0.75 * ly) / d).tanh());
                y.set(fuel, c, s);
                y.set(ox, c, 1.0 - s);
            }
        }
    }
    Ok(SimulationState::from_primitive(mesh, mech, u, t, y, init.p)?)
}

/// Map the case blocks onto the stepping configuration.
pub fn piso_config(case: &CaseConfig) -> PisoConfig {
    PisoConfig {
        n_correctors: case.solvers.n_correctors,
        momentum_predictor: case.solvers.momentum_predictor,
        max_co: case.time.max_co,
        ddt_scheme: case.schemes.ddt,
        div_u: case.schemes.div_u,
        div_scalar: case.schemes.div_scalar,
        prandtl: case.init.prandtl,
        energy_dpdt: case.init.energy_dpdt,
        chemistry: case.chemistry.mode,
        reactor_tols: ReactorTols { abs_tol: case.chemistry.abs_tol, rel_tol: case.chemistry.rel_tol },
        controls_u: case.solvers.u.controls(),
        controls_p: case.solvers.p.controls(),
        controls_y: case.solvers.y.controls(),
        controls_h: case.solvers.h.controls(),
    }
}

/// Everything needed to step a case: parsed config, mesh, mechanism,
/// optional surrogate weights, and the initialized state.
pub struct CaseRuntime {
    pub case: CaseConfig,
    pub case_dir: PathBuf,
    pub mesh: Arc<Mesh>,
    pub mech: Arc<Mechanism>,
    pub mech_file: MechanismFile,
    pub bundle: Option<SurrogateBundle>,
    pub piso: PisoConfig,
    pub state: SimulationState,
    pub output_dir: PathBuf,
}

pub fn prepare_case(case_path: &Path) -> Result<CaseRuntime, DriverError> {
    let label = case_path.display().to_string();
    let case = parse_case(case_path)?;
    let dir = case_dir(case_path);
    let mesh = Arc::new(Mesh::cartesian(case.mesh.dims, case.mesh.lengths, PatchSpec(case.mesh.sides))?);
    let (mech_file, mech) = parse_mechanism(&dir.join(&case.chemistry.mechanism))?;
    let mech = Arc::new(mech);
    let bundle = match (&case.chemistry.weights, case.chemistry.surrogate_dt) {
        (Some(weights), Some(sdt)) => {
            let weights_path = dir.join(weights);
            let mut bundle = load_weights(&weights_path)
                .map_err(|e| inv(&weights_path.display().to_string(), e.to_string()))?;
            bundle.train_dt = Some(sdt);
            for name in &bundle.species_names {
                if mech.species_index(name).is_none() {
                    return Err(inv(
                        &label,
                        format!("weights predict species '{name}' which is not in the mechanism"),
                    ));
                }
            }
            Some(bundle)
        }
        _ => None,
    };
    let state = init_tgv(&mesh, &mech, &case.init, &label)?;
    let piso = piso_config(&case);
    let output_dir = dir.join(&case.output.dir);
    Ok(CaseRuntime { case, case_dir: dir, mesh, mech, mech_file, bundle, piso, state, output_dir })
}

// ---------------------------------------------------------------------------
// Diagnostics and output.

pub fn kinetic_energy(state: &SimulationState) -> f64 {
    let v = state.mesh.geometry.cell_volume;
    let mut ke = 0.0;
    for c in 0..state.n_cells() {
        let u2 = state.u.at(0, c).powi(2) + state.u.at(1, c).powi(2) + state.u.at(2, c).powi(2);
        ke += 0.5 * state.rho.data[c] * u2 * v;
    }
    ke
}

pub fn max_temperature(state: &SimulationState) -> f64 {
    state.t.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

/// Courant number of the current mass flux at the given dt, matching the
/// check the stepper applies.
pub fn current_courant(state: &SimulationState, dt: f64) -> Result<f64, DriverError> {
    let mesh = &state.mesh;
    let rho_f = field::interpolate_linear(&state.rho, mesh)
        .map_err(|source| piso::PisoError::Field { stage: "diagnostics", source })?;
    let mut volf = state.phi.clone();
    for f in 0..volf.n_internal_faces {
        volf.data[f] /= rho_f.data[f];
    }
    for ip in 0..volf.patch_data.len() {
        for bf in 0..volf.patch_data[ip].len() {
            volf.patch_data[ip][bf] /= rho_f.patch_data[ip][bf];
        }
    }
    let (co, _) = field::courant_number(&volf, mesh, dt);
    Ok(co)
}

/// Write one legacy-ASCII VTK STRUCTURED_POINTS snapshot: U as a vector
/// field, then p, T, rho, and one Y_<name> scalar per species, all in
/// shortest-roundtrip scientific notation so a reload is bit-exact.
pub fn write_vtk(state: &SimulationState, path: &Path, time: f64) -> Result<(), DriverError> {
    let mesh = &state.mesh;
    let [nx, ny, nz] = mesh.geometry.dims;
    let [hx, hy, hz] = mesh.geometry.spacing;
    let n = mesh.n_cells();
    let mut s = String::new();
    let _ = writeln!(s, "# vtk DataFile Version 3.0");
    let _ = writeln!(s, "lowmach snapshot t = {}", fmt_f64(time));
    let _ = writeln!(s, "ASCII");
    let _ = writeln!(s, "DATASET STRUCTURED_POINTS");
    let _ = writeln!(s, "DIMENSIONS {} {} {}", nx + 1, ny + 1, nz + 1);
    let _ = writeln!(s, "ORIGIN 0 0 0");
    let _ = writeln!(s, "SPACING {} {} {}", fmt_f64(hx), fmt_f64(hy), fmt_f64(hz));
    let _ = writeln!(s, "CELL_DATA {n}");
    let _ = writeln!(s, "VECTORS U double");
    for c in 0..n {
        let _ = writeln!(
            s,
            "{} {} {}",
            fmt_f64(state.u.at(0, c)),
            fmt_f64(state.u.at(1, c)),
            fmt_f64(state.u.at(2, c))
        );
    }
    let mut scalar = |name: &str, values: &dyn Fn(usize) -> f64| {
        let _ = writeln!(s, "SCALARS {name} double 1");
        let _ = writeln!(s, "LOOKUP_TABLE default");
        for c in 0..n {
            let _ = writeln!(s, "{}", fmt_f64(values(c)));
        }
    };
    scalar("p", &|c| state.p.data[c]);
    scalar("T", &|c| state.t.data[c]);
    scalar("rho", &|c| state.rho.data[c]);
    for (k, sp) in state.mech.species.iter().enumerate() {
        scalar(&format!("Y_{}", sp.name), &|c| state.y.at(k, c));
    }
    fs::write(path, s).map_err(io_err(path))
}

/// A snapshot read back from [`write_vtk`] output.
#[derive(Debug, Clone)]
pub struct VtkData {
    /// Point dimensions (cells + 1 per axis).
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub n_cells: usize,
    /// (name, components, cell-major data).
    pub fields: Vec<(String, usize, Vec<f64>)>,
}

impl VtkData {
    pub fn field(&self, name: &str) -> Option<(usize, &[f64])> {
        self.fields.iter().find(|(n, _, _)| n == name).map(|(_, nc, d)| (*nc, d.as_slice()))
    }
}

/// Parse the subset of legacy VTK that [`write_vtk`] emits.
pub fn parse_vtk(text: &str, path: &str) -> Result<VtkData, DriverError> {
    let mut dims = None;
    let mut spacing = None;
    let mut n_cells = None;
    let mut fields: Vec<(String, usize, Vec<f64>)> = Vec::new();
    let mut lines = text.lines().enumerate().peekable();
    let bad = |line: usize, msg: String| perr(path, line + 1, 1, msg);
    let take_floats = |line_no: usize, line: &str, want: usize| -> Result<Vec<f64>, DriverError> {
        let vals: Result<Vec<f64>, _> = line.split_whitespace().map(str::parse::<f64>).collect();
        match vals {
            Ok(v) if v.len() == want => Ok(v),
            _ => Err(bad(line_no, format!("expected {want} numbers, got '{line}'"))),
        }
    };
    while let Some((line_no, line)) = lines.next() {
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["DIMENSIONS", a, b, c] => {
                let parse = |w: &str| w.parse::<usize>().map_err(|_| bad(line_no, format!("bad dimension '{w}'")));
                dims = Some([parse(a)?, parse(b)?, parse(c)?]);
            }
            ["SPACING", ..] => {
                let v = take_floats(line_no, &line["SPACING".len()..], 3)?;
                spacing = Some([v[0], v[1], v[2]]);
            }
            ["CELL_DATA", count] => {
                n_cells =
                    Some(count.parse::<usize>().map_err(|_| bad(line_no, format!("bad cell count '{count}'")))?);
            }
            ["VECTORS", name, "double"] => {
                let n = n_cells.ok_or_else(|| bad(line_no, "VECTORS before CELL_DATA".into()))?;
                let mut data = Vec::with_capacity(3 * n);
                for _ in 0..n {
                    let (ln, l) = lines.next().ok_or_else(|| bad(line_no, "truncated VECTORS data".into()))?;
                    data.extend(take_floats(ln, l, 3)?);
                }
                fields.push((name.to_string(), 3, data));
            }
            ["SCALARS", name, "double", "1"] => {
                let n = n_cells.ok_or_else(|| bad(line_no, "SCALARS before CELL_DATA".into()))?;
                match lines.next() {
                    Some((_, l)) if l.trim() == "LOOKUP_TABLE default" => {}
                    _ => return Err(bad(line_no, "SCALARS without LOOKUP_TABLE line".into())),
                }
                let mut data = Vec::with_capacity(n);
                for _ in 0..n {
                    let (ln, l) = lines.next().ok_or_else(|| bad(line_no, "truncated SCALARS data".into()))?;
                    data.push(take_floats(ln, l, 1)?[0]);
                }
                fields.push((name.to_string(), 1, data));
            }
            _ => {}
        }
    }
    let dims = dims.ok_or_else(|| inv(path, "no DIMENSIONS line".to_string()))?;
    let spacing = spacing.ok_or_else(|| inv(path, "no SPACING line".to_string()))?;
    let n_cells = n_cells.ok_or_else(|| inv(path, "no CELL_DATA line".to_string()))?;
    Ok(VtkData { dims, spacing, n_cells, fields })
}

// ---------------------------------------------------------------------------
// The time loop.

#[derive(Debug)]
pub struct RunSummary {
    pub steps: usize,
    pub final_time: f64,
    pub vtk_files: Vec<PathBuf>,
    pub diagnostics: PathBuf,
    pub reports: Vec<StepReport>,
}

fn snapshot_name(step: usize) -> String {
    format!("state_{step:06}.vtk")
}

fn diag_row(diag: &mut String, t: f64, state: &SimulationState, max_co: f64, continuity: f64) {
    let _ = writeln!(
        diag,
        "{},{},{},{},{}",
        fmt_f64(t),
        fmt_f64(kinetic_energy(state)),
        fmt_f64(max_temperature(state)),
        fmt_f64(max_co),
        fmt_f64(continuity)
    );
}

/// Advance a prepared case to its end time, writing a snapshot and a
/// diagnostics row every `writeInterval` steps (plus the initial state and
/// the final step). With endTime = 0 only the initial state is written.
/// On a step failure the partial diagnostics and a `state_failed.vtk` dump
/// are written before the error is returned. Reruns produce byte-identical
/// files: nothing time- or machine-dependent goes into them.
pub fn run_case(rt: &mut CaseRuntime) -> Result<RunSummary, DriverError> {
    let n_steps = rt.case.time.n_steps();
    let dt = rt.case.time.dt;
    fs::create_dir_all(&rt.output_dir).map_err(io_err(&rt.output_dir))?;
    let diagnostics = rt.output_dir.join("diagnostics.csv");
    let mut diag = String::from("t,kineticEnergy,maxT,maxCo,continuity\n");
    let co0 = current_courant(&rt.state, dt)?;
    diag_row(&mut diag, 0.0, &rt.state, co0, 0.0);
    let mut vtk_files = Vec::new();
    let initial = rt.output_dir.join(snapshot_name(0));
    write_vtk(&rt.state, &initial, 0.0)?;
    vtk_files.push(initial);
    let mut reports = Vec::with_capacity(n_steps);
    for step in 1..=n_steps {
        let report = match piso::advance(&mut rt.state, dt, &rt.piso, rt.bundle.as_ref()) {
            Ok(r) => r,
            Err(source) => {
                let t = step as f64 * dt;
                let _ = write_vtk(&rt.state, &rt.output_dir.join("state_failed.vtk"), t);
                let _ = fs::write(&diagnostics, &diag);
                return Err(DriverError::Step { step, source });
            }
        };
        let t = step as f64 * dt;
        if step % rt.case.time.write_interval == 0 || step == n_steps {
            let file = rt.output_dir.join(snapshot_name(step));
            write_vtk(&rt.state, &file, t)?;
            vtk_files.push(file);
            diag_row(&mut diag, t, &rt.state, report.max_co, report.continuity);
            println!(
                "step {step:6}  t {}  co {:.4}  continuity {:.4e}  pThermo {:.6e}",
                fmt_f64(t),
                report.max_co,
                report.continuity,
                report.p_thermo
            );
        }
        reports.push(report);
    }
    fs::write(&diagnostics, &diag).map_err(io_err(&diagnostics))?;
    Ok(RunSummary { steps: n_steps, final_time: n_steps as f64 * dt, vtk_files, diagnostics, reports })
}

// ---------------------------------------------------------------------------
// Benchmarking.

#[derive(Debug, Clone, Copy)]
pub struct BenchReport {
    pub steps: usize,
    /// Per-stage mean seconds per step.
    pub mean: piso::StageTimings,
    /// Mean wall-clock seconds per step, including untimed glue.
    pub mean_total: f64,
}

impl BenchReport {
    /// Sum of the four stage means; should track `mean_total` closely.
    pub fn stage_sum(&self) -> f64 {
        self.mean.sum()
    }

    pub fn chemistry_seconds(&self) -> f64 {
        self.mean.chemistry
    }

    /// Everything that is not chemistry: discretisation, linear solves, and
    /// thermo updates.
    pub fn fluid_seconds(&self) -> f64 {
        self.mean.discretisation + self.mean.linear_solve + self.mean.thermo
    }
}

/// Time `steps` steps of a prepared case. No files are written; timing output
/// is inherently machine-dependent, so it only ever goes to stdout.
pub fn bench_case(rt: &mut CaseRuntime, steps: usize) -> Result<BenchReport, DriverError> {
    if steps == 0 {
        return Err(inv("bench", "need at least one step".to_string()));
    }
    let dt = rt.case.time.dt;
    let mut mean = piso::StageTimings::default();
    let mut mean_total = 0.0;
    for step in 1..=steps {
        let report = piso::advance(&mut rt.state, dt, &rt.piso, rt.bundle.as_ref())
            .map_err(|source| DriverError::Step { step, source })?;
        mean.discretisation += report.timings.discretisation;
        mean.linear_solve += report.timings.linear_solve;
        mean.chemistry += report.timings.chemistry;
        mean.thermo += report.timings.thermo;
        mean_total += report.total_seconds;
    }
    let inv_n = 1.0 / steps as f64;
    mean.discretisation *= inv_n;
    mean.linear_solve *= inv_n;
    mean.chemistry *= inv_n;
    mean.thermo *= inv_n;
    Ok(BenchReport { steps, mean, mean_total: mean_total * inv_n })
}

/// Two CSV tables: mean seconds per stage, then the sum/chemistry/fluid
/// split used to compare chemistry treatments.
pub fn render_bench(r: &BenchReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "stage,meanSeconds");
    let _ = writeln!(s, "discretisation,{}", fmt_f64(r.mean.discretisation));
    let _ = writeln!(s, "linearSolve,{}", fmt_f64(r.mean.linear_solve));
    let _ = writeln!(s, "chemistry,{}", fmt_f64(r.mean.chemistry));
    let _ = writeln!(s, "thermo,{}", fmt_f64(r.mean.thermo));
    let _ = writeln!(s, "wallTotal,{}", fmt_f64(r.mean_total));
    let _ = writeln!(s);
    let _ = writeln!(s, "split,seconds");
    let _ = writeln!(s, "sum,{}", fmt_f64(r.stage_sum()));
    let _ = writeln!(s, "chemistry,{}", fmt_f64(r.chemistry_seconds()));
    let _ = writeln!(s, "fluid,{}", fmt_f64(r.fluid_seconds()));
    s
}

// ---------------------------------------------------------------------------
// Command entry points. `main` stays a thin argument-parsing shell.

pub fn cmd_run(case_path: &Path) -> Result<RunSummary, DriverError> {
    let mut rt = prepare_case(case_path)?;
    let summary = run_case(&mut rt)?;
    println!(
        "completed {} steps to t = {}; wrote {} snapshots and {} to {}",
        summary.steps,
        fmt_f64(summary.final_time),
        summary.vtk_files.len(),
        summary.diagnostics.file_name().and_then(|n| n.to_str()).unwrap_or("diagnostics.csv"),
        rt.output_dir.display()
    );
    Ok(summary)
}

pub fn cmd_bench(case_path: &Path, steps: usize) -> Result<BenchReport, DriverError> {
    let mut rt = prepare_case(case_path)?;
    let report = bench_case(&mut rt, steps)?;
    print!("{}", render_bench(&report));
    Ok(report)
}

/// Sampling controls for `sample-chemistry`. When the pressure range is
/// nonempty the samples are split over eight evenly spaced pressure slices
/// so the table exercises the pressure input of the surrogate.
pub struct SampleSpec {
    pub n: usize,
    pub dt: f64,
    pub t_min: f64,
    pub t_max: f64,
    pub p_min: f64,
    pub p_max: f64,
    pub seed: u64,
}

pub fn cmd_sample(mech_path: &Path, spec: &SampleSpec, out: &Path) -> Result<usize, DriverError> {
    let label = mech_path.display().to_string();
    if spec.n == 0 {
        return Err(inv(&label, "need at least one sample".to_string()));
    }
    if !(spec.dt > 0.0) {
        return Err(inv(&label, format!("dt must be positive, got {}", spec.dt)));
    }
    if !(spec.t_min > 0.0 && spec.t_max >= spec.t_min) {
        return Err(inv(&label, format!("bad temperature range [{}, {}]", spec.t_min, spec.t_max)));
    }
    if !(spec.p_min > 0.0 && spec.p_max >= spec.p_min) {
        return Err(inv(&label, format!("bad pressure range [{}, {}]", spec.p_min, spec.p_max)));
    }
    let (_, mech) = parse_mechanism(mech_path)?;
    let tols = ReactorTols::default();
    let slices = if spec.p_max > spec.p_min { spec.n.min(8) } else { 1 };
    let mut rows = Vec::with_capacity(spec.n);
    for i in 0..slices {
        let n_i = spec.n / slices + usize::from(i < spec.n % slices);
        if n_i == 0 {
            continue;
        }
        let p = if slices == 1 {
            spec.p_min
        } else {
            spec.p_min + (i as f64 + 0.5) * (spec.p_max - spec.p_min) / slices as f64
        };
        let ranges = SampleRanges { t_min: spec.t_min, t_max: spec.t_max, p };
        let slice = generate_samples(&mech, &ranges, spec.dt, n_i, spec.seed.wrapping_add(i as u64), &tols)?;
        rows.extend(slice.rows);
    }
    let table = SampleTable {
        species_names: mech.species.iter().map(|s| s.name.clone()).collect(),
        dt: spec.dt,
        rows,
    };
    fs::write(out, write_sample_table(&table)).map_err(io_err(out))?;
    println!("wrote {} samples over {} pressure slices to {}", table.rows.len(), slices, out.display());
    Ok(table.rows.len())
}

pub fn cmd_train(
    samples_path: &Path,
    hidden: &[usize],
    epochs: usize,
    seed: u64,
    learning_rate: f64,
    batch_size: usize,
    out: &Path,
) -> Result<(), DriverError> {
    let label = samples_path.display().to_string();
    if hidden.is_empty() || hidden.iter().any(|&w| w == 0) {
        return Err(inv(&label, "arch needs at least one nonzero hidden width".to_string()));
    }
    if epochs == 0 || batch_size == 0 {
        return Err(inv(&label, "epochs and batch size must be at least 1".to_string()));
    }
    if !(learning_rate > 0.0) {
        return Err(inv(&label, format!("learning rate must be positive, got {learning_rate}")));
    }
    let text = fs::read_to_string(samples_path).map_err(io_err(samples_path))?;
    let table = parse_sample_table(&text)?;
    let config = TrainerConfig {
        learning_rate,
        epochs,
        seed,
        batch_size,
        ..TrainerConfig::default()
    };
    let bundle = crate::surrogate::train_bundle(&table, hidden, &config)?;
    // Report the fit in physical units so retraining regressions show up.
    let n_sp = table.species_names.len();
    let in_dim = 2 + n_sp;
    let mut features = Vec::with_capacity(table.rows.len() * in_dim);
    for row in &table.rows {
        features.extend_from_slice(&row[..in_dim]);
    }
    for (name, net) in bundle.species_names.iter().zip(&bundle.nets) {
        let k = table.species_names.iter().position(|n| n == name).unwrap();
        let preds = net.forward(&features, table.rows.len())?;
        let mse = table
            .rows
            .iter()
            .zip(&preds)
            .map(|(row, pred)| (pred - row[in_dim + k]).powi(2))
            .sum::<f64>()
            / table.rows.len() as f64;
        println!("net {name}: mse {:.6e}", mse);
    }
    save_weights(&bundle, out).map_err(io_err(out))?;
    println!("wrote weights for {} species to {}", bundle.nets.len(), out.display());
    Ok(())
}

/// Human-readable summary of a case, mechanism, or weights file, chosen by
/// extension (.cfg, .mech, anything else is tried as weights).
pub fn cmd_info(path: &Path) -> Result<String, DriverError> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("cfg") => info_case(path),
        Some("mech") => info_mechanism(path),
        _ => info_weights(path),
    }
}

fn info_case(path: &Path) -> Result<String, DriverError> {
    let case = parse_case(path)?;
    let dir = case_dir(path);
    let (_, mech) = parse_mechanism(&dir.join(&case.chemistry.mechanism))?;
    let mut s = String::new();
    let m = &case.mesh;
    let _ = writeln!(s, "case {}", path.display());
    let _ = writeln!(
        s,
        "mesh {} x {} x {} = {} cells, lengths {} x {} x {}",
        m.dims[0],
        m.dims[1],
        m.dims[2],
        m.dims.iter().product::<usize>(),
        fmt_f64(m.lengths[0]),
        fmt_f64(m.lengths[1]),
        fmt_f64(m.lengths[2])
    );
    let sides = m.sides.map(patch_kind_token).join(" ");
    let _ = writeln!(s, "sides {sides}");
    let _ = writeln!(
        s,
        "time dt {} endTime {} ({} steps), maxCo {}",
        fmt_f64(case.time.dt),
        fmt_f64(case.time.end_time),
        case.time.n_steps(),
        fmt_f64(case.time.max_co)
    );
    let mode = match case.chemistry.mode {
        ChemistryMode::None => "none",
        ChemistryMode::Ode => "ode",
        ChemistryMode::Surrogate => "surrogate",
    };
    let _ = writeln!(
        s,
        "chemistry {mode}, mechanism {} ({} species, {} reactions)",
        case.chemistry.mechanism,
        mech.n_species(),
        mech.reactions.len()
    );
    let _ = writeln!(
        s,
        "init tgv u0 {} L {} T {} p {} reactive {}",
        fmt_f64(case.init.u0),
        fmt_f64(case.init.l),
        fmt_f64(case.init.t),
        fmt_f64(case.init.p),
        yes_no(case.init.reactive.is_some())
    );
    if mech.n_species() == 1 && case.init.u0 != 0.0 {
        let y = [1.0];
        let ms = MixtureState { p: case.init.p, t: case.init.t, y: &y };
        let rho = thermo::density(&mech.species, &ms);
        let nu = thermo::viscosity(&mech.species, &ms) / rho;
        let _ = writeln!(s, "Re {:.1} (u0 L / nu, nu = {})", case.init.u0.abs() * case.init.l / nu, fmt_f64(nu));
    }
    Ok(s)
}

fn info_mechanism(path: &Path) -> Result<String, DriverError> {
    let (file, mech) = parse_mechanism(path)?;
    let mut s = String::new();
    let _ = writeln!(s, "mechanism {}", path.display());
    let _ = writeln!(s, "{} species, {} reactions", mech.n_species(), mech.reactions.len());
    for sp in &file.species {
        let transport = match &sp.transport {
            TransportModel::Constant { mu } => format!("constant {}", fmt_f64(*mu)),
            TransportModel::Sutherland { a_s, t_s } => {
                format!("sutherland {} {}", fmt_f64(*a_s), fmt_f64(*t_s))
            }
        };
        let _ = writeln!(
            s,
            "species {} w {} T [{}, {}] Le {} transport {}",
            sp.name,
            fmt_f64(sp.w),
            fmt_f64(sp.t_low),
            fmt_f64(sp.t_high),
            fmt_f64(sp.lewis),
            transport
        );
    }
    if !file.inert.is_empty() {
        let _ = writeln!(s, "inert {}", file.inert.join(" "));
    }
    for entry in &file.reactions {
        let _ = writeln!(
            s,
            "reaction {} (a {}, beta {}, Ea {})",
            equation_string(entry),
            fmt_f64(entry.a),
            fmt_f64(entry.beta),
            fmt_f64(entry.ea)
        );
    }
    Ok(s)
}

fn info_weights(path: &Path) -> Result<String, DriverError> {
    let bundle = load_weights(path).map_err(|e| inv(&path.display().to_string(), e.to_string()))?;
    let mut s = String::new();
    let _ = writeln!(s, "weights {}", path.display());
    let _ = writeln!(s, "{} networks (training dt comes from the case's surrogateDt)", bundle.nets.len());
    for (name, net) in bundle.species_names.iter().zip(&bundle.nets) {
        let mut dims = vec![net.input_dim()];
        dims.extend(net.layers.iter().map(|l| l.out_dim));
        let arch = dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(" -> ");
        let _ = writeln!(s, "net {name}: {arch}");
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::explicit_divergence;
    use tempfile::tempdir;

    const AIR_MECH: &str = "\
units {
    ea = J/kmol
}
species AIR {
    w = 28.96
    tLow = 200
    tCommon = 1000
    tHigh = 6000
    low = 3.5 0 0 0 0 0 0
    high = 3.5 0 0 0 0 0 0
    transport = constant 1.88226e-5
    lewis = 1
}
inert = AIR
";

    const FUEL3_MECH: &str = "\
units {
    ea = J/kmol
}
species F {
    w = 2
    tLow = 200
    tCommon = 1000
    tHigh = 6000
    low = 3.5 0 0 0 0 20000 0
    high = 3.5 0 0 0 0 20000 0
    transport = constant 1e-5
    lewis = 1
    composition = F 2
}
species X {
    w = 32
    tLow = 200
    tCommon = 1000
    tHigh = 6000
    low = 3.5 0 0 0 0 0 0
    high = 3.5 0 0 0 0 0 0
    transport = constant 1e-5
    lewis = 1
    composition = X 2
}
species P {
    w = 17
    tLow = 200
    tCommon = 1000
    tHigh = 6000
    low = 4 0 0 0 0 -10000 0
    high = 4 0 0 0 0 -10000 0
    transport = constant 1e-5
    lewis = 1
    composition = F 1 X 1
}
reaction \"F + X => 2 P\" {
    a = 50000
    beta = 0
    ea = 6651570.094522592
}
";

    const AB_MECH: &str = "\
units {
    ea = J/kmol
}
species A {
    w = 10
    tLow = 200
    tCommon = 1000
    tHigh = 6000
    low = 3.5 0 0 0 0 500 0
    high = 3.5 0 0 0 0 500 0
    transport = constant 1.8e-5
    lewis = 1
    composition = Q 1
}
species B {
    w = 10
    tLow = 200
    tCommon = 1000
    tHigh = 6000
    low = 3.5 0 0 0 0 0 0
    high = 3.5 0 0 0 0 0 0
    transport = constant 1.8e-5
    lewis = 1
    composition = Q 1
}
reaction \"A => B\" {
    a = 2000
    beta = 0
    ea = 0
}
";

    fn case_text(
        dims: [usize; 3],
        dt: f64,
        end_time: f64,
        write_interval: usize,
        chemistry: &str,
        init_extra: &str,
        out_dir: &str,
    ) -> String {
        format!(
            "mesh {{
    dims = {} {} {}
    lengths = 6.283185307179586e-3 6.283185307179586e-3 6.283185307179586e-3
    xmin = periodic
    xmax = periodic
    ymin = periodic
    ymax = periodic
    zmin = periodic
    zmax = periodic
}}
time {{
    dt = {dt}
    endTime = {end_time}
    maxCo = 0.9
    writeInterval = {write_interval}
}}
schemes {{
    ddt = euler
    divU = linear
    divScalar = upwind
}}
solvers {{
    u = bicgstab 1e-10 0 1000
    p = amgpcg 1e-9 0 2000
    y = bicgstab 1e-10 0 1000
    h = bicgstab 1e-10 0 1000
    nCorrectors = 2
    momentumPredictor = yes
}}
chemistry {{
{chemistry}
}}
init {{
    kind = tgv
    u0 = 4
    l = 1e-3
    t = 300
    p = 101325
{init_extra}
}}
output {{
    dir = {out_dir}
}}
",
            dims[0], dims[1], dims[2]
        )
    }

    fn air_case_dir(dims: [usize; 3], dt: f64, end_time: f64, write_interval: usize) -> (tempfile::TempDir, PathBuf) {
        let dir = tempdir().unwrap();
        fs::write(dir.path().join("air.mech"), AIR_MECH).unwrap();
        let text = case_text(dims, dt, end_time, write_interval, "    mode = none\n    mechanism = air.mech", "", "out");
        let cfg = dir.path().join("case.cfg");
        fs::write(&cfg, text).unwrap();
        (dir, cfg)
    }

    fn parse_err<T: std::fmt::Debug>(res: Result<T, DriverError>) -> (usize, usize, String) {
        match res {
            Err(DriverError::Parse { line, col, message, .. }) => (line, col, message),
            other => panic!("expected a parse error, got {other:?}"),
        }
    }

    fn invalid_err<T: std::fmt::Debug>(res: Result<T, DriverError>) -> String {
        match res {
            Err(DriverError::Invalid { message, .. }) => message,
            other => panic!("expected an invalid-case error, got {other:?}"),
        }
    }

    #[test]
    fn case_parse_and_reemission_reach_a_fixed_point() {
        // Deliberately noisy input: comments, ragged spacing, mixed float styles.
        let text = "
# a demo case
mesh {
  dims =    4 4     4
  lengths = 0.006283185307179586 6.283185307179586e-3 .006283185307179586
  xmin = periodic
  xmax = periodic
  ymin=periodic
  ymax = periodic   # wrap
  zmin = periodic
  zmax = periodic
}
time {
  dt = 1.0e-5
  endTime = 2e-4
  maxCo = 0.9
  writeInterval = 5
}
schemes {
  ddt = backward2
  divU = linear
  divScalar = upwind
}
solvers {
  u = bicgstab 1e-10 0 1000
  p = amgpcg 1e-9 0 2000
  y = bicgstab 1e-10 0 1000
  h = bicgstab 1e-10 0 1000
  nCorrectors = 3
  momentumPredictor = no
}
chemistry {
  mode = none
  mechanism = air.mech
}
init {
  kind = tgv
  u0 = 4
  l = 0.001
  t = 300
  p = 101325.0
}
output {
  dir = out
}
";
        let c1 = parse_case_str(text, "demo.cfg").unwrap();
        assert_eq!(c1.mesh.dims, [4, 4, 4]);
        assert_eq!(c1.schemes.ddt, DdtScheme::Backward2);
        assert_eq!(c1.solvers.n_correctors, 3);
        assert!(!c1.solvers.momentum_predictor);
        assert_eq!(c1.solvers.p.kind, SolverKind::AmgPcg);
        assert_eq!(c1.time.n_steps(), 20);
        assert_eq!(c1.chemistry.abs_tol, 1e-10);
        // The three length spellings all parse to the same f64.
        assert_eq!(c1.mesh.lengths[0], c1.mesh.lengths[1]);
        assert_eq!(c1.mesh.lengths[0], c1.mesh.lengths[2]);
        let e1 = emit_case(&c1);
        let c2 = parse_case_str(&e1, "demo.cfg").unwrap();
        assert_eq!(c1, c2);
        assert_eq!(e1, emit_case(&c2));
    }

    #[test]
    fn parse_errors_carry_line_and_column() {
        // Unknown key, anchored at the key itself. Required keys are checked
        // first, so the block is otherwise complete.
        let text = "time {\n    dt = 1e-3\n    endTime = 1e-3\n    maxCo = 0.9\n    writeInterval = 1\n    foo = 1\n}\n";
        let (line, col, msg) = parse_err(parse_case_str(text, "t.cfg"));
        assert_eq!((line, col), (6, 5));
        assert!(msg.contains("foo"), "{msg}");

        // Bad numeric value, anchored at the value.
        let (line, col, msg) = parse_err(parse_case_str("time {\n    dt = fast\n}\n", "t.cfg"));
        assert_eq!((line, col), (2, 10));
        assert!(msg.contains("fast"), "{msg}");

        // Missing key, anchored at the block header.
        let (line, _, msg) = parse_err(parse_case_str("time {\n    dt = 1e-3\n}\n", "t.cfg"));
        assert_eq!(line, 1);
        assert!(msg.contains("endTime"), "{msg}");

        // Duplicate key, anchored at the second occurrence.
        let (line, _, msg) =
            parse_err(parse_case_str("time {\n    dt = 1e-3\n    dt = 2e-3\n}\n", "t.cfg"));
        assert_eq!(line, 3);
        assert!(msg.contains("duplicate"), "{msg}");

        // Unknown block.
        let (line, _, msg) = parse_err(parse_case_str("extras {\n}\n", "t.cfg"));
        assert_eq!(line, 1);
        assert!(msg.contains("extras"), "{msg}");

        // Unclosed block.
        let (_, _, msg) = parse_err(parse_case_str("time {\n    dt = 1e-3\n", "t.cfg"));
        assert!(msg.contains("never closed"), "{msg}");

        // Solver lines must carry all four fields.
        let (_, _, msg) = parse_err(parse_case_str("solvers {\n    u = bicgstab 1e-10 0\n}\n", "t.cfg"));
        assert!(msg.contains("kind absTol relTol maxIter"), "{msg}");

        // endTime must land on a step boundary.
        let (_, _, msg) = parse_err(parse_case_str(
            "time {\n    dt = 3e-5\n    endTime = 1e-4\n    maxCo = 0.9\n    writeInterval = 1\n}\n",
            "t.cfg",
        ));
        assert!(msg.contains("integer multiple"), "{msg}");
    }

    #[test]
    fn surrogate_keys_are_gated_on_the_mode() {
        let with = |chem: &str| case_text([4, 4, 4], 1e-5, 0.0, 1, chem, "", "out");
        let (_, _, msg) = parse_err(parse_case_str(
            &with("    mode = ode\n    mechanism = ab.mech\n    weights = w.bin"),
            "t.cfg",
        ));
        assert!(msg.contains("only valid when mode = surrogate"), "{msg}");
        let (_, _, msg) = parse_err(parse_case_str(
            &with("    mode = surrogate\n    mechanism = ab.mech\n    weights = w.bin"),
            "t.cfg",
        ));
        assert!(msg.contains("surrogateDt"), "{msg}");
        let ok = parse_case_str(
            &with("    mode = surrogate\n    mechanism = ab.mech\n    weights = w.bin\n    surrogateDt = 1e-5"),
            "t.cfg",
        )
        .unwrap();
        assert_eq!(ok.chemistry.surrogate_dt, Some(1e-5));
    }

    #[test]
    fn mechanism_roundtrip_reversibility_and_third_bodies() {
        let text = "\
units {
    ea = K
}
species A {
    w = 10
    tLow = 200
    tCommon = 1000
    tHigh = 6000
    low = 3.5 0 0 0 0 500 0
    high = 3.5 0 0 0 0 500 0
    transport = sutherland 1.4792e-6 116
    lewis = 0.8
    composition = Q 1
}
species B {
    w = 10
    tLow = 200
    tCommon = 1000
    tHigh = 6000
    low = 3.6 0 0 0 0 0 0
    high = 3.6 0 0 0 0 0 0
    transport = constant 1.8e-5
    lewis = 1
    composition = Q 1
}
reaction \"A <=> B\" {
    a = 100
    beta = 0.5
    ea = 800
}
reaction \"A + M => B + M\" {
    a = 5
    beta = 0
    ea = 0
    efficiencies = A 1.5 B 0.4
}
";
        let file = parse_mechanism_str(text, "t.mech").unwrap();
        assert!(file.reactions[0].reversible);
        assert!(!file.reactions[0].third_body);
        assert!(file.reactions[1].third_body);
        // Ea declared in Kelvin is normalized to J/kmol.
        assert_eq!(file.reactions[0].ea, 800.0 * crate::constants::R_UNIVERSAL);
        assert_eq!(equation_string(&file.reactions[1]), "A + M => B + M");

        let mech = build_mechanism(&file, "t.mech").unwrap();
        assert_eq!(mech.reactions[1].third_body, Some(vec![1.5, 0.4]));
        assert!(mech.reactions[0].third_body.is_none());

        let e1 = emit_mechanism(&file);
        let file2 = parse_mechanism_str(&e1, "t.mech").unwrap();
        assert_eq!(file, file2);
        assert_eq!(e1, emit_mechanism(&file2));
    }

    #[test]
    fn atom_imbalance_is_rejected_with_the_equation_named() {
        let text = FUEL3_MECH.replace("composition = F 1 X 1", "composition = F 1 X 2");
        let file = parse_mechanism_str(&text, "t.mech").unwrap();
        let msg = invalid_err(build_mechanism(&file, "t.mech"));
        assert!(msg.contains("F + X => 2 P"), "{msg}");
        assert!(msg.contains("'X'"), "{msg}");
    }

    #[test]
    fn undeclared_species_in_an_equation_is_an_error() {
        let text = AB_MECH.replace("\"A => B\"", "\"A => C\"");
        let (line, _, msg) = parse_err(parse_mechanism_str(&text, "t.mech"));
        assert!(msg.contains("'C'"), "{msg}");
        assert!(line > 1);
    }

    fn mech_from(text: &str) -> Arc<Mechanism> {
        let file = parse_mechanism_str(text, "test.mech").unwrap();
        Arc::new(build_mechanism(&file, "test.mech").unwrap())
    }

    fn periodic_mesh(dims: [usize; 3]) -> Arc<Mesh> {
        let l = 2.0 * std::f64::consts::PI * 1e-3;
        Arc::new(Mesh::cartesian(dims, [l, l, l], PatchSpec::fully_periodic()).unwrap())
    }

    fn tgv_init(reactive: Option<ReactiveLayer>) -> InitConfig {
        InitConfig {
            kind: InitKind::Tgv,
            u0: 4.0,
            l: 1e-3,
            t: 300.0,
            p: 101325.0,
            prandtl: 0.72,
            energy_dpdt: false,
            reactive,
        }
    }

    #[test]
    fn tgv_velocity_is_capped_at_u0_and_solenoidal() {
        let mesh = periodic_mesh([16, 16, 16]);
        let mech = mech_from(AIR_MECH);
        let state = init_tgv(&mesh, &mech, &tgv_init(None), "t").unwrap();
        let mut max_u = 0.0f64;
        for c in 0..state.n_cells() {
            let mag = (state.u.at(0, c).powi(2) + state.u.at(1, c).powi(2) + state.u.at(2, c).powi(2)).sqrt();
            max_u = max_u.max(mag);
        }
        // The analytic peak u0 sits between cell centers; the sampled max
        // approaches it from below.
        assert!(max_u <= 4.0 + 1e-12, "max |U| = {max_u}");
        assert!(max_u > 0.9 * 4.0, "max |U| = {max_u}");

        // With uniform density the centered flux divergence cancels exactly,
        // up to rounding.
        let div = explicit_divergence(&state.phi, &mesh).unwrap();
        let scale = state.rho.data[0] * 4.0 / 1e-3;
        let worst = div.data.iter().fold(0.0f64, |m, &d| m.max(d.abs()));
        assert!(worst / scale < 1e-10, "normalized divergence {}", worst / scale);
    }

    #[test]
    fn reactive_layering_sums_to_one_and_stays_symmetric() {
        let mesh = periodic_mesh([4, 32, 4]);
        let mech = mech_from(FUEL3_MECH);
        let layer = ReactiveLayer { fuel: "F".into(), oxidizer: "X".into(), interface_width: 6e-4 };
        let state = init_tgv(&mesh, &mech, &tgv_init(Some(layer)), "t").unwrap();
        let f = mech.species_index("F").unwrap();
        let n_sp = mech.n_species();
        for c in 0..state.n_cells() {
            let sum: f64 = (0..n_sp).map(|k| state.y.at(k, c)).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        // Mirror symmetry about the slab mid-plane, and a fuel-rich core
        // between oxidizer-rich wrap edges.
        let ny = 32;
        let at_j = |j: usize| state.y.at(f, mesh.geometry.cell_index(1, j, 2));
        for j in 0..ny / 2 {
            assert!((at_j(j) - at_j(ny - 1 - j)).abs() < 1e-12);
        }
        assert!(at_j(ny / 2) > 0.95, "core Y_F = {}", at_j(ny / 2));
        assert!(at_j(0) < 0.05, "edge Y_F = {}", at_j(0));
    }

    #[test]
    fn tgv_rejects_walls_and_mismatched_domains() {
        let l = 2.0 * std::f64::consts::PI * 1e-3;
        let walls = Arc::new(Mesh::cartesian([4, 4, 4], [l, l, l], PatchSpec::all_walls()).unwrap());
        let mech = mech_from(AIR_MECH);
        let msg = invalid_err(init_tgv(&walls, &mech, &tgv_init(None), "t"));
        assert!(msg.contains("periodic"), "{msg}");

        let stretched = Arc::new(Mesh::cartesian([4, 4, 4], [1.5 * l, l, l], PatchSpec::fully_periodic()).unwrap());
        let msg = invalid_err(init_tgv(&stretched, &mech, &tgv_init(None), "t"));
        assert!(msg.contains("multiple"), "{msg}");
    }

    #[test]
    fn zero_end_time_writes_the_initial_state_only() {
        let (_dir, cfg) = air_case_dir([8, 8, 8], 5e-5, 0.0, 1);
        let mut rt = prepare_case(&cfg).unwrap();
        let summary = run_case(&mut rt).unwrap();
        assert_eq!(summary.steps, 0);
        assert_eq!(summary.vtk_files.len(), 1);
        assert!(rt.output_dir.join("state_000000.vtk").is_file());
        assert!(!rt.output_dir.join("state_000001.vtk").exists());
        let diag = fs::read_to_string(&summary.diagnostics).unwrap();
        assert_eq!(diag.lines().count(), 2);
        assert!(diag.starts_with("t,kineticEnergy,maxT,maxCo,continuity\n"));
    }

    #[test]
    fn vtk_snapshots_reload_bit_exact() {
        let (_dir, cfg) = air_case_dir([8, 8, 8], 5e-5, 0.0, 1);
        let mut rt = prepare_case(&cfg).unwrap();
        run_case(&mut rt).unwrap();
        let path = rt.output_dir.join("state_000000.vtk");
        let text = fs::read_to_string(&path).unwrap();
        let vtk = parse_vtk(&text, "state_000000.vtk").unwrap();
        assert_eq!(vtk.dims, [9, 9, 9]);
        assert_eq!(vtk.n_cells, 512);
        let (nc, u) = vtk.field("U").unwrap();
        assert_eq!(nc, 3);
        let (_, p) = vtk.field("p").unwrap();
        let (_, t) = vtk.field("T").unwrap();
        let (_, rho) = vtk.field("rho").unwrap();
        let (_, y_air) = vtk.field("Y_AIR").unwrap();
        for c in 0..512 {
            for comp in 0..3 {
                assert_eq!(u[3 * c + comp].to_bits(), rt.state.u.at(comp, c).to_bits());
            }
            assert_eq!(p[c].to_bits(), rt.state.p.data[c].to_bits());
            assert_eq!(t[c].to_bits(), rt.state.t.data[c].to_bits());
            assert_eq!(rho[c].to_bits(), rt.state.rho.data[c].to_bits());
            assert_eq!(y_air[c].to_bits(), rt.state.y.data[c].to_bits());
        }
    }

    #[test]
    fn reruns_are_byte_identical_and_time_is_monotone() {
        let run_once = || {
            let (dir, cfg) = air_case_dir([8, 8, 8], 5e-5, 3e-4, 2);
            let mut rt = prepare_case(&cfg).unwrap();
            let summary = run_case(&mut rt).unwrap();
            let mut files = Vec::new();
            for f in &summary.vtk_files {
                files.push((f.file_name().unwrap().to_owned(), fs::read(f).unwrap()));
            }
            files.push(("diagnostics.csv".into(), fs::read(&summary.diagnostics).unwrap()));
            drop(dir);
            (summary.steps, files)
        };
        let (steps_a, a) = run_once();
        let (steps_b, b) = run_once();
        assert_eq!(steps_a, 6);
        assert_eq!(steps_b, 6);
        assert_eq!(a.len(), b.len());
        for ((name_a, bytes_a), (name_b, bytes_b)) in a.iter().zip(&b) {
            assert_eq!(name_a, name_b);
            assert_eq!(bytes_a, bytes_b, "snapshot {name_a:?} differs between reruns");
        }
        // Snapshots at steps 0, 2, 4, 6.
        assert_eq!(a.len(), 5);
        let diag = String::from_utf8(a.last().unwrap().1.clone()).unwrap();
        let times: Vec<f64> =
            diag.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
        assert_eq!(times.len(), 4);
        assert!(times.windows(2).all(|w| w[1] > w[0]), "{times:?}");
        // Kinetic energy stays finite and positive through the run.
        for line in diag.lines().skip(1) {
            let ke: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
            assert!(ke.is_finite() && ke > 0.0);
        }
    }

    #[test]
    fn bench_split_is_internally_consistent() {
        let (_dir, cfg) = air_case_dir([8, 8, 8], 5e-5, 0.0, 1);
        let mut rt = prepare_case(&cfg).unwrap();
        let report = bench_case(&mut rt, 3).unwrap();
        assert_eq!(report.steps, 3);
        let sum = report.stage_sum();
        assert!((report.chemistry_seconds() + report.fluid_seconds() - sum).abs() <= 1e-12 * sum.max(1e-30));
        let rendered = render_bench(&report);
        assert!(rendered.contains("stage,meanSeconds"));
        assert!(rendered.contains("split,seconds"));
        assert!(rendered.contains("\nsum,"));
        assert!(rendered.contains("\nfluid,"));
    }

    #[test]
    fn missing_referenced_files_fail_at_parse() {
        let dir = tempdir().unwrap();
        let text = case_text([4, 4, 4], 1e-5, 0.0, 1, "    mode = none\n    mechanism = nope.mech", "", "out");
        let cfg = dir.path().join("case.cfg");
        fs::write(&cfg, text).unwrap();
        let msg = invalid_err(parse_case(&cfg));
        assert!(msg.contains("does not exist"), "{msg}");
        assert!(msg.contains("nope.mech"), "{msg}");
    }

    #[test]
    fn sampling_training_and_info_round_trip() {
        let dir = tempdir().unwrap();
        let mech_path = dir.path().join("ab.mech");
        fs::write(&mech_path, AB_MECH).unwrap();
        let samples = dir.path().join("samples.txt");
        let spec = SampleSpec {
            n: 12,
            dt: 1e-5,
            t_min: 900.0,
            t_max: 1100.0,
            p_min: 101325.0,
            p_max: 101325.0,
            seed: 7,
        };
        assert_eq!(cmd_sample(&mech_path, &spec, &samples).unwrap(), 12);
        let table = parse_sample_table(&fs::read_to_string(&samples).unwrap()).unwrap();
        assert_eq!(table.rows.len(), 12);
        assert_eq!(table.dt, 1e-5);

        let weights = dir.path().join("w.bin");
        cmd_train(&samples, &[8], 30, 1, 0.02, 8, &weights).unwrap();
        let bundle = load_weights(&weights).unwrap();
        assert_eq!(bundle.nets.len(), 2);
        assert!(bundle.train_dt.is_none(), "train dt must come from the case file");

        let info = cmd_info(&weights).unwrap();
        assert!(info.contains("net A"), "{info}");
        let info = cmd_info(&mech_path).unwrap();
        assert!(info.contains("2 species, 1 reactions"), "{info}");
    }

    #[test]
    fn case_info_reports_the_reynolds_number() {
        let (_dir, cfg) = air_case_dir([8, 8, 8], 5e-5, 0.0, 1);
        let info = cmd_info(&cfg).unwrap();
        assert!(info.contains("8 x 8 x 8 = 512 cells"), "{info}");
        assert!(info.contains("Re 250."), "{info}");
    }
}
