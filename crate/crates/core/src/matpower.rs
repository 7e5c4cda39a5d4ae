//! Reader for MATPOWER `.m` case files and conversion of a case into a
//! normalized [`RadialNetwork`].
//!
//! Only the numeric matrices are interpreted. Distribution cases shipped with
//! MATPOWER store loads in kW and impedances in ohms and convert them with a
//! trailing script; the two idioms used there (`mpc.bus(:, [PD, QD]) = ... / k`
//! and the `Vbase^2 / Sbase` impedance scaling) are recognized and applied.
//! Every other statement is ignored.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::sync::OnceLock;

use log::warn;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::distflow::{sweep_solve, SweepOptions, FEAS_TOL};
use crate::error::{FlexError, Result};
use crate::network::{validate_radial, Bounds, Branch, CostCoefficients, Der, RadialNetwork};

// 0-based MATPOWER column indices
const BUS_I: usize = 0;
const BUS_TYPE: usize = 1;
const PD: usize = 2;
const QD: usize = 3;
const GS: usize = 4;
const BS: usize = 5;
const BASE_KV: usize = 9;
const VMAX: usize = 11;
const VMIN: usize = 12;

const F_BUS: usize = 0;
const T_BUS: usize = 1;
const BR_R: usize = 2;
const BR_X: usize = 3;
const BR_B: usize = 4;
const RATE_A: usize = 5;
const TAP: usize = 8;
const SHIFT: usize = 9;
const BR_STATUS: usize = 10;

const GEN_BUS: usize = 0;
const QMAX: usize = 3;
const QMIN: usize = 4;
const PMAX: usize = 8;
const PMIN: usize = 9;

const REF_BUS_TYPE: u8 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusRow {
    pub id: usize,
    pub bus_type: u8,
    pub pd: f64,
    pub qd: f64,
    /// 0 when the column is absent.
    pub vmax: f64,
    pub vmin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchRow {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
    /// Long-term rating in MVA, 0 for unlimited.
    pub rate_a: f64,
    pub in_service: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenRow {
    pub bus: usize,
    pub pmax: f64,
    pub pmin: f64,
    pub qmax: f64,
    pub qmin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenCostRow {
    pub model: u8,
    pub cost: CostCoefficients,
}

/// The subset of a MATPOWER case this crate reads. Power in MW/MVAr,
/// impedances in p.u. on `base_mva`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawCase {
    pub name: String,
    pub base_mva: f64,
    pub buses: Vec<BusRow>,
    pub branches: Vec<BranchRow>,
    pub gens: Vec<GenRow>,
    pub gencosts: Vec<GenCostRow>,
}

impl RawCase {
    pub fn total_pd(&self) -> f64 {
        self.buses.iter().map(|b| b.pd).sum()
    }

    pub fn total_qd(&self) -> f64 {
        self.buses.iter().map(|b| b.qd).sum()
    }

    pub fn check_invariants(&self) -> Result<()> {
        if !(self.base_mva > 0.0) {
            return Err(FlexError::InvalidCase(format!(
                "baseMVA must be positive, got {}",
                self.base_mva
            )));
        }
        let ids: HashSet<usize> = self.buses.iter().map(|b| b.id).collect();
        if ids.len() != self.buses.len() {
            return Err(FlexError::InvalidCase("duplicate bus ids".into()));
        }
        for br in &self.branches {
            for end in [br.from, br.to] {
                if !ids.contains(&end) {
                    return Err(FlexError::InvalidCase(format!(
                        "branch {}-{} references unknown bus {end}",
                        br.from, br.to
                    )));
                }
            }
        }
        for g in &self.gens {
            if !ids.contains(&g.bus) {
                return Err(FlexError::InvalidCase(format!(
                    "generator at unknown bus {}",
                    g.bus
                )));
            }
        }
        if !self.gencosts.is_empty() && self.gencosts.len() != self.gens.len() {
            return Err(FlexError::InvalidCase(format!(
                "{} generators but {} gencost rows",
                self.gens.len(),
                self.gencosts.len()
            )));
        }
        Ok(())
    }
}

fn re(cell: &'static OnceLock<Regex>, pattern: &str) -> &'static Regex {
    cell.get_or_init(|| Regex::new(pattern).expect("static regex"))
}

fn matrix_start() -> &'static Regex {
    static R: OnceLock<Regex> = OnceLock::new();
    re(&R, r"^\s*mpc\.(\w+)\s*=\s*\[(.*)$")
}

fn scalar_assign() -> &'static Regex {
    static R: OnceLock<Regex> = OnceLock::new();
    re(&R, r"^\s*mpc\.(\w+)\s*=\s*([^;\[']+?)\s*;?\s*$")
}

fn function_header() -> &'static Regex {
    static R: OnceLock<Regex> = OnceLock::new();
    re(&R, r"^\s*function\s+mpc\s*=\s*(\w+)")
}

// the patterns below run on lines with whitespace and commas removed
fn vbase_def() -> &'static Regex {
    static R: OnceLock<Regex> = OnceLock::new();
    re(&R, r"^Vbase=mpc\.bus\(1BASE_KV\)\*([0-9.eE+\-]+);?$")
}

fn sbase_def() -> &'static Regex {
    static R: OnceLock<Regex> = OnceLock::new();
    re(&R, r"^Sbase=mpc\.baseMVA\*([0-9.eE+\-]+);?$")
}

fn load_scaling() -> &'static Regex {
    static R: OnceLock<Regex> = OnceLock::new();
    re(&R, r"^mpc\.bus\(:\[PDQD\]\)=mpc\.bus\(:\[PDQD\]\)/([0-9.eE+\-]+);?$")
}

const IMPEDANCE_SCALING: &str = "mpc.branch(:[BR_RBR_X])=mpc.branch(:[BR_RBR_X])/(Vbase^2/Sbase);";

fn strip_comment(line: &str) -> &str {
    let mut in_quote = false;
    for (i, c) in line.char_indices() {
        match c {
            '\'' => in_quote = !in_quote,
            '%' if !in_quote => return &line[..i],
            _ => {}
        }
    }
    line
}

fn parse_number(tok: &str, section: &str, line: usize) -> Result<f64> {
    let v: f64 = tok.parse().map_err(|_| FlexError::MalformedMatrix {
        section: section.into(),
        line,
        detail: format!("non-numeric token `{tok}`"),
    })?;
    if v.is_nan() {
        return Err(FlexError::MalformedMatrix {
            section: section.into(),
            line,
            detail: "NaN entry".into(),
        });
    }
    Ok(v)
}

struct OpenMatrix {
    name: String,
    start_line: usize,
    rows: Vec<Vec<f64>>,
    current: Vec<f64>,
}

impl OpenMatrix {
    /// Feeds one comment-free line; returns true when the closing bracket was seen.
    fn feed(&mut self, text: &str, line: usize) -> Result<bool> {
        let mut rest = text;
        let mut closed = false;
        if let Some(pos) = rest.find(']') {
            let tail = rest[pos + 1..].trim();
            if !(tail.is_empty() || tail == ";") {
                return Err(FlexError::MalformedMatrix {
                    section: self.name.clone(),
                    line,
                    detail: format!("unexpected text after `]`: `{tail}`"),
                });
            }
            rest = &rest[..pos];
            closed = true;
        }
        if rest.contains('[') {
            return Err(FlexError::MalformedMatrix {
                section: self.name.clone(),
                line,
                detail: "nested `[`".into(),
            });
        }
        let mut segments = rest.split(';').peekable();
        while let Some(seg) = segments.next() {
            for tok in seg.split(|c: char| c.is_whitespace() || c == ',') {
                if tok.is_empty() || tok == "..." {
                    continue;
                }
                self.current.push(parse_number(tok, &self.name, line)?);
            }
            // a `;` or the end of the line terminates the row
            let _ = segments.peek();
            if !self.current.is_empty() {
                self.rows.push(std::mem::take(&mut self.current));
            }
        }
        Ok(closed)
    }
}

/// Parses MATPOWER case text.
pub fn parse_case(text: &str) -> Result<RawCase> {
    let mut name = String::from("case");
    let mut base_mva: Option<f64> = None;
    let mut matrices: HashMap<String, Vec<Vec<f64>>> = HashMap::new();
    let mut open: Option<OpenMatrix> = None;
    let mut vbase_mult: Option<f64> = None;
    let mut sbase_mult: Option<f64> = None;
    let mut impedance_divisor: Option<(f64, f64)> = None;
    let mut load_divisor: Option<f64> = None;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = strip_comment(raw);
        if let Some(m) = open.as_mut() {
            if matrix_start().is_match(line) {
                return Err(FlexError::MalformedMatrix {
                    section: m.name.clone(),
                    line: m.start_line,
                    detail: "unbalanced brackets: matrix never closed".into(),
                });
            }
            if m.feed(line, line_no)? {
                let m = open.take().expect("open matrix");
                matrices.insert(m.name, m.rows);
            }
            continue;
        }
        if let Some(c) = matrix_start().captures(line) {
            let mut m = OpenMatrix {
                name: c[1].to_string(),
                start_line: line_no,
                rows: Vec::new(),
                current: Vec::new(),
            };
            if m.feed(&c[2], line_no)? {
                matrices.insert(m.name, m.rows);
            } else {
                open = Some(m);
            }
            continue;
        }
        if let Some(c) = function_header().captures(line) {
            name = c[1].to_string();
            continue;
        }
        if let Some(c) = scalar_assign().captures(line) {
            if &c[1] == "baseMVA" {
                base_mva = Some(parse_number(c[2].trim(), "baseMVA", line_no)?);
            }
            continue;
        }
        let compact: String = line
            .chars()
            .filter(|c| !c.is_whitespace() && *c != ',')
            .collect();
        if compact.is_empty() {
            continue;
        }
        if let Some(c) = vbase_def().captures(&compact) {
            vbase_mult = Some(parse_number(&c[1], "Vbase", line_no)?);
        } else if let Some(c) = sbase_def().captures(&compact) {
            sbase_mult = Some(parse_number(&c[1], "Sbase", line_no)?);
        } else if let Some(c) = load_scaling().captures(&compact) {
            load_divisor = Some(parse_number(&c[1], "bus", line_no)?);
        } else if compact == IMPEDANCE_SCALING {
            let (Some(vm), Some(sm)) = (vbase_mult, sbase_mult) else {
                return Err(FlexError::InvalidCase(format!(
                    "line {line_no}: impedance scaling before Vbase/Sbase are defined"
                )));
            };
            impedance_divisor = Some((vm, sm));
        } else if compact.starts_with("mpc.") {
            warn!("line {line_no}: ignoring unsupported statement `{}`", line.trim());
        }
    }
    if let Some(m) = open {
        return Err(FlexError::MalformedMatrix {
            section: m.name,
            line: m.start_line,
            detail: "unbalanced brackets: matrix never closed".into(),
        });
    }

    let base_mva = base_mva.ok_or_else(|| FlexError::MissingSection("mpc.baseMVA".into()))?;
    let mut bus = matrices
        .remove("bus")
        .ok_or_else(|| FlexError::MissingSection("mpc.bus".into()))?;
    let mut branch = matrices
        .remove("branch")
        .ok_or_else(|| FlexError::MissingSection("mpc.branch".into()))?;
    let gen = matrices.remove("gen").unwrap_or_default();
    let gencost = matrices.remove("gencost").unwrap_or_default();

    let col = |row: &[f64], c: usize| row.get(c).copied().unwrap_or(0.0);

    if let Some(div) = load_divisor {
        for row in bus.iter_mut() {
            for c in [PD, QD] {
                if let Some(v) = row.get_mut(c) {
                    *v /= div;
                }
            }
        }
    }
    if let Some((vm, sm)) = impedance_divisor {
        let base_kv = bus.first().map(|r| col(r, BASE_KV)).unwrap_or(0.0);
        let z_base = (base_kv * vm).powi(2) / (base_mva * sm);
        if !(z_base > 0.0) {
            return Err(FlexError::InvalidCase("impedance base is not positive".into()));
        }
        for row in branch.iter_mut() {
            for c in [BR_R, BR_X] {
                if let Some(v) = row.get_mut(c) {
                    *v /= z_base;
                }
            }
        }
    }

    let as_id = |v: f64, what: &str| -> Result<usize> {
        if v >= 0.0 && v.fract() == 0.0 {
            Ok(v as usize)
        } else {
            Err(FlexError::InvalidCase(format!("{what} id `{v}` is not a non-negative integer")))
        }
    };
    let require_cols = |rows: &[Vec<f64>], min: usize, section: &str| -> Result<()> {
        match rows.iter().position(|r| r.len() < min) {
            Some(i) => Err(FlexError::MalformedMatrix {
                section: section.into(),
                line: 0,
                detail: format!("row {} has fewer than {min} columns", i + 1),
            }),
            None => Ok(()),
        }
    };
    require_cols(&bus, 4, "bus")?;
    require_cols(&branch, 4, "branch")?;
    require_cols(&gen, 1, "gen")?;

    let mut buses = Vec::with_capacity(bus.len());
    for row in &bus {
        if col(row, GS) != 0.0 || col(row, BS) != 0.0 {
            warn!("bus {}: shunt ignored", col(row, BUS_I));
        }
        buses.push(BusRow {
            id: as_id(row[BUS_I], "bus")?,
            bus_type: col(row, BUS_TYPE) as u8,
            pd: row[PD],
            qd: row[QD],
            vmax: col(row, VMAX),
            vmin: col(row, VMIN),
        });
    }
    let mut branches = Vec::with_capacity(branch.len());
    for row in &branch {
        let tap = col(row, TAP);
        if col(row, BR_B) != 0.0 || (tap != 0.0 && tap != 1.0) || col(row, SHIFT) != 0.0 {
            warn!(
                "branch {}-{}: charging/tap/shift ignored",
                col(row, F_BUS),
                col(row, T_BUS)
            );
        }
        branches.push(BranchRow {
            from: as_id(row[F_BUS], "branch from-bus")?,
            to: as_id(row[T_BUS], "branch to-bus")?,
            r: row[BR_R],
            x: row[BR_X],
            rate_a: col(row, RATE_A),
            in_service: row.get(BR_STATUS).is_none_or(|&s| s != 0.0),
        });
    }
    let mut gens = Vec::with_capacity(gen.len());
    for row in &gen {
        gens.push(GenRow {
            bus: as_id(row[GEN_BUS], "generator bus")?,
            pmax: col(row, PMAX),
            pmin: col(row, PMIN),
            qmax: col(row, QMAX),
            qmin: col(row, QMIN),
        });
    }
    let mut gencosts = Vec::with_capacity(gencost.len());
    for row in &gencost {
        let model = col(row, 0) as u8;
        let mut cost = CostCoefficients::default();
        if model == 2 {
            let n = col(row, 3) as usize;
            let coeffs: Vec<f64> = row.iter().skip(4).take(n).copied().collect();
            if n > 3 {
                warn!("gencost polynomial of degree {} truncated to quadratic", n - 1);
            }
            let mut it = coeffs.iter().rev();
            cost.c0 = it.next().copied().unwrap_or(0.0);
            cost.c1 = it.next().copied().unwrap_or(0.0);
            cost.c2 = it.next().copied().unwrap_or(0.0);
        } else {
            warn!("gencost model {model} not supported; using zero cost");
        }
        gencosts.push(GenCostRow { model, cost });
    }

    let case = RawCase {
        name,
        base_mva,
        buses,
        branches,
        gens,
        gencosts,
    };
    case.check_invariants()?;
    Ok(case)
}

pub fn read_case(path: &std::path::Path) -> Result<RawCase> {
    let text = std::fs::read_to_string(path).map_err(|e| FlexError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_case(&text)
}

/// Writes a case back as MATPOWER text. Columns not held by [`RawCase`] are
/// filled with neutral values, so `parse_case(to_matpower_text(c)) == c`.
pub fn to_matpower_text(case: &RawCase) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "function mpc = {}", case.name);
    let _ = writeln!(s, "mpc.version = '2';");
    let _ = writeln!(s, "mpc.baseMVA = {};", case.base_mva);
    let _ = writeln!(s, "\n%%\tbus_i\ttype\tPd\tQd\tGs\tBs\tarea\tVm\tVa\tbaseKV\tzone\tVmax\tVmin");
    let _ = writeln!(s, "mpc.bus = [");
    for b in &case.buses {
        let _ = writeln!(
            s,
            "\t{}\t{}\t{}\t{}\t0\t0\t1\t1\t0\t0\t1\t{}\t{};",
            b.id, b.bus_type, b.pd, b.qd, b.vmax, b.vmin
        );
    }
    let _ = writeln!(s, "];\n\nmpc.gen = [");
    for g in &case.gens {
        let _ = writeln!(
            s,
            "\t{}\t0\t0\t{}\t{}\t1\t{}\t1\t{}\t{}\t0\t0\t0\t0\t0\t0\t0\t0\t0\t0\t0;",
            g.bus, g.qmax, g.qmin, case.base_mva, g.pmax, g.pmin
        );
    }
    let _ = writeln!(s, "];\n\nmpc.branch = [");
    for b in &case.branches {
        let _ = writeln!(
            s,
            "\t{}\t{}\t{}\t{}\t0\t{}\t0\t0\t0\t0\t{}\t-360\t360;",
            b.from,
            b.to,
            b.r,
            b.x,
            b.rate_a,
            u8::from(b.in_service)
        );
    }
    let _ = writeln!(s, "];");
    if !case.gencosts.is_empty() {
        let _ = writeln!(s, "\nmpc.gencost = [");
        for c in &case.gencosts {
            let _ = writeln!(
                s,
                "\t{}\t0\t0\t3\t{}\t{}\t{};",
                c.model, c.cost.c2, c.cost.c1, c.cost.c0
            );
        }
        let _ = writeln!(s, "];");
    }
    s
}

/// Where the single DER goes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DerPlacement {
    /// Leaf bus farthest (in hops) from the PCC; lowest original id on ties.
    #[default]
    DeepestLeaf,
    /// Explicit original bus id.
    Bus(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeederOptions {
    pub der_placement: DerPlacement,
    /// DER active bounds are ±p_fraction × total active demand.
    pub p_fraction: f64,
    /// DER reactive bounds are ±q_fraction × total reactive demand.
    pub q_fraction: f64,
    pub der_cost: CostCoefficients,
    /// PCC exchange bounds are ±factor × total demand (each axis).
    pub pcc_bound_factor: f64,
    /// Squared-voltage band used where the case gives no Vmin/Vmax.
    pub default_u_bounds: Bounds,
    /// Drop voltage bounds the DER cannot influence and that already fail
    /// without it (see [`relax_uncontrollable_voltages`]).
    pub relax_uncontrollable_voltages: bool,
}

impl Default for FeederOptions {
    fn default() -> Self {
        Self {
            der_placement: DerPlacement::DeepestLeaf,
            p_fraction: 0.5,
            q_fraction: 0.5,
            der_cost: CostCoefficients::default(),
            pcc_bound_factor: 2.0,
            default_u_bounds: Bounds::new(0.81, 1.21),
            relax_uncontrollable_voltages: true,
        }
    }
}

impl FeederOptions {
    pub fn with_fraction(fraction: f64) -> Self {
        Self {
            p_fraction: fraction,
            q_fraction: fraction,
            ..Self::default()
        }
    }
}

fn find_root(case: &RawCase, active: &[&BranchRow]) -> Result<usize> {
    let refs: Vec<usize> = case
        .buses
        .iter()
        .filter(|b| b.bus_type == REF_BUS_TYPE)
        .map(|b| b.id)
        .collect();
    if refs.len() == 1 {
        return Ok(refs[0]);
    }
    let fed: HashSet<usize> = active.iter().map(|b| b.to).collect();
    let roots: Vec<usize> = case
        .buses
        .iter()
        .map(|b| b.id)
        .filter(|id| !fed.contains(id))
        .collect();
    if roots.len() == 1 {
        Ok(roots[0])
    } else {
        Err(FlexError::NotRadial {
            reason: "cannot identify a unique substation bus".into(),
            buses: if refs.is_empty() { roots } else { refs },
        })
    }
}

/// Builds the per-unit feeder model: drops out-of-service branches, checks
/// radiality, renumbers from the substation and places/sizes the DER.
pub fn to_radial_network(case: &RawCase, opts: &FeederOptions) -> Result<RadialNetwork> {
    case.check_invariants()?;
    let active: Vec<&BranchRow> = case.branches.iter().filter(|b| b.in_service).collect();
    let root_id = find_root(case, &active)?;
    let index: BTreeMap<usize, usize> = case
        .buses
        .iter()
        .enumerate()
        .map(|(i, b)| (b.id, i))
        .collect();
    let n = case.buses.len();
    let base = case.base_mva;

    let u_bound = |v: f64, default: f64| if v > 0.0 { v * v } else { default };
    let total_p = case.total_pd() / base;
    let total_q = case.total_qd() / base;

    let raw = RadialNetwork {
        name: case.name.clone(),
        base_mva: base,
        pcc_bus: index[&root_id],
        bus_ids: case.buses.iter().map(|b| b.id).collect(),
        branches: active
            .iter()
            .map(|b| Branch {
                from: index[&b.from],
                to: index[&b.to],
                r: b.r,
                x: b.x,
            })
            .collect(),
        demand_p: case.buses.iter().map(|b| b.pd / base).collect(),
        demand_q: case.buses.iter().map(|b| b.qd / base).collect(),
        u_min: case
            .buses
            .iter()
            .map(|b| u_bound(b.vmin, opts.default_u_bounds.lo))
            .collect(),
        u_max: case
            .buses
            .iter()
            .map(|b| u_bound(b.vmax, opts.default_u_bounds.hi))
            .collect(),
        der: Der {
            bus: index[&root_id],
            p_bounds: Bounds::symmetric(opts.p_fraction * total_p),
            q_bounds: Bounds::symmetric(opts.q_fraction * total_q),
            cost: opts.der_cost,
        },
        pcc_p_bounds: Bounds::symmetric(opts.pcc_bound_factor * total_p.abs()),
        pcc_q_bounds: Bounds::symmetric(opts.pcc_bound_factor * total_q.abs()),
    };
    let mut net = raw.normalized()?;
    if n < 2 {
        return Err(FlexError::NoLeaf);
    }

    net.der.bus = match opts.der_placement {
        DerPlacement::Bus(id) => net
            .index_of(id)
            .ok_or_else(|| FlexError::InvalidCase(format!("DER bus {id} not in case")))?,
        DerPlacement::DeepestLeaf => deepest_leaf(&net).ok_or(FlexError::NoLeaf)?,
    };
    net.check_invariants()?;
    if opts.relax_uncontrollable_voltages {
        relax_uncontrollable_voltages(&mut net, &SweepOptions::default())?;
    }
    Ok(net)
}

/// Buses whose voltage does not depend on the DER setpoint: everything
/// outside the substation branch that leads to the DER. Indices, ascending.
pub fn uncontrollable_buses(net: &RadialNetwork) -> Result<Vec<usize>> {
    let order = validate_radial(net)?;
    let top = |mut j: usize| {
        while let Some(p) = order.parent[j] {
            if p == net.pcc_bus {
                return Some(j);
            }
            j = p;
        }
        None
    };
    let der_top = top(net.der.bus);
    Ok((0..net.n_bus())
        .filter(|&j| j != net.pcc_bus && (der_top.is_none() || top(j) != der_top))
        .collect())
}

/// Removes voltage bounds that no DER setpoint can restore: the bus is
/// uncontrollable and the zero-injection power flow already violates the
/// bound. Returns the original ids of the relaxed buses.
pub fn relax_uncontrollable_voltages(net: &mut RadialNetwork, sweep: &SweepOptions) -> Result<Vec<usize>> {
    let buses = uncontrollable_buses(net)?;
    if buses.is_empty() {
        return Ok(Vec::new());
    }
    let sol = match sweep_solve(net, [0.0, 0.0], sweep) {
        Ok(s) => s,
        Err(e) => {
            warn!("{}: zero-injection power flow failed ({e}); voltage bounds kept", net.name);
            return Ok(Vec::new());
        }
    };
    let mut relaxed = Vec::new();
    for j in buses {
        let mut hit = false;
        if sol.u[j] < net.u_min[j] - FEAS_TOL {
            net.u_min[j] = 0.0;
            hit = true;
        }
        if sol.u[j] > net.u_max[j] + FEAS_TOL {
            net.u_max[j] = f64::INFINITY;
            hit = true;
        }
        if hit {
            relaxed.push(net.bus_ids[j]);
        }
    }
    if !relaxed.is_empty() {
        warn!(
            "{}: voltage bounds dropped at buses {:?}; they are violated without DER and the DER at bus {} cannot reach them",
            net.name, relaxed, net.bus_ids[net.der.bus]
        );
    }
    Ok(relaxed)
}

/// Deepest leaf of a normalized network, lowest original id on ties.
pub fn deepest_leaf(net: &RadialNetwork) -> Option<usize> {
    let n = net.n_bus();
    let mut depth = vec![0usize; n];
    let mut has_child = vec![false; n];
    for b in &net.branches {
        depth[b.to] = depth[b.from] + 1;
        has_child[b.from] = true;
    }
    (0..n)
        .filter(|&i| i != net.pcc_bus && !has_child[i])
        .max_by(|&a, &b| {
            depth[a]
                .cmp(&depth[b])
                .then_with(|| net.bus_ids[b].cmp(&net.bus_ids[a]))
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const TWO_BUS: &str = r"
function mpc = twobus
mpc.baseMVA = 10;
mpc.bus = [
    1  3  0   0   0 0 1 1 0 12 1 1.1 0.9;
    2  1  6.0 2.0 0 0 1 1 0 12 1 1.1 0.9;
];
mpc.gen = [ 1 0 0 10 -10 1 100 1 10 0 0 0 0 0 0 0 0 0 0 0 0 ];
mpc.branch = [
    1  2  0.01  0.02  0  0  0  0  0  0  1  -360  360;
];
mpc.gencost = [ 2 0 0 3 0 20 0 ];
";

    #[test]
    fn minimal_two_bus_case() {
        let c = parse_case(TWO_BUS).unwrap();
        assert_eq!(c.name, "twobus");
        assert_eq!(c.base_mva, 10.0);
        assert_eq!(c.buses.len(), 2);
        assert_eq!(c.branches.len(), 1);
        assert_eq!(c.gencosts[0].cost, CostCoefficients::new(0.0, 20.0, 0.0));
        assert_eq!(c.buses[1].pd, 6.0);
    }

    #[test]
    fn missing_branch_section() {
        let text = TWO_BUS.replace("mpc.branch", "mpc.branchx");
        assert_eq!(
            parse_case(&text).unwrap_err(),
            FlexError::MissingSection("mpc.branch".into())
        );
    }

    #[test]
    fn non_numeric_token_reports_line() {
        let text = TWO_BUS.replace("0.01  0.02", "0.01  abc");
        match parse_case(&text).unwrap_err() {
            FlexError::MalformedMatrix { section, line, .. } => {
                assert_eq!(section, "branch");
                assert_eq!(line, 10);
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn unclosed_matrix_is_malformed() {
        let text = TWO_BUS.replacen("];\nmpc.gen", "\nmpc.gen", 1);
        assert!(matches!(
            parse_case(&text).unwrap_err(),
            FlexError::MalformedMatrix { ref section, .. } if section == "bus"
        ));
    }

    #[test]
    fn unknown_branch_endpoint_is_rejected() {
        let text = TWO_BUS.replace("1  2  0.01", "1  7  0.01");
        assert!(matches!(parse_case(&text), Err(FlexError::InvalidCase(_))));
    }

    #[test]
    fn unit_conversion_idioms_are_applied() {
        let text = format!(
            "{TWO_BUS}
Vbase = mpc.bus(1, BASE_KV) * 1e3;
Sbase = mpc.baseMVA * 1e6;
mpc.branch(:, [BR_R BR_X]) = mpc.branch(:, [BR_R BR_X]) / (Vbase^2 / Sbase);
mpc.bus(:, [PD, QD]) = mpc.bus(:, [PD, QD]) / 1e3;
"
        );
        let c = parse_case(&text).unwrap();
        // z_base = 12 kV² / 10 MVA = 14.4 ohm
        assert!((c.branches[0].r - 0.01 / 14.4).abs() < 1e-15);
        assert!((c.buses[1].pd - 6e-3).abs() < 1e-15);
    }

    #[test]
    fn der_sizing_arithmetic() {
        // total Pd = 10 MW, fraction 0.5 → ±5 MW
        let text = TWO_BUS.replace("6.0 2.0", "10.0 4.0");
        let c = parse_case(&text).unwrap();
        let net = to_radial_network(&c, &FeederOptions::with_fraction(0.5)).unwrap();
        assert!((net.der.p_bounds.hi * net.base_mva - 5.0).abs() < 1e-12);
        assert!((net.der.p_bounds.lo * net.base_mva + 5.0).abs() < 1e-12);
        assert!((net.der.q_bounds.hi * net.base_mva - 2.0).abs() < 1e-12);
        assert_eq!(net.der.bus, 1);
    }

    #[test]
    fn zero_fraction_gives_point_bounds() {
        let c = parse_case(TWO_BUS).unwrap();
        let net = to_radial_network(&c, &FeederOptions::with_fraction(0.0)).unwrap();
        assert_eq!(net.der.p_bounds, Bounds::new(0.0, 0.0));
        assert_eq!(net.der.q_bounds.width(), 0.0);
    }

    #[test]
    fn single_bus_has_no_leaf() {
        let text = r"
mpc.baseMVA = 1;
mpc.bus = [ 1 3 0 0 0 0 1 1 0 12 1 1.1 0.9 ];
mpc.branch = [ ];
";
        assert_eq!(
            to_radial_network(&parse_case(text).unwrap(), &FeederOptions::default()).unwrap_err(),
            FlexError::NoLeaf
        );
    }

    #[test]
    fn out_of_service_branches_are_dropped() {
        let text = TWO_BUS.replace(
            "1  2  0.01  0.02  0  0  0  0  0  0  1  -360  360;",
            "1  2  0.01  0.02  0  0  0  0  0  0  1  -360  360;\n 2 1 0.5 0.5 0 0 0 0 0 0 0 -360 360;",
        );
        let c = parse_case(&text).unwrap();
        assert_eq!(c.branches.len(), 2);
        let net = to_radial_network(&c, &FeederOptions::default()).unwrap();
        assert_eq!(net.n_line(), 1);
    }

    #[test]
    fn per_unit_round_trip_of_demands() {
        let c = parse_case(TWO_BUS).unwrap();
        let net = to_radial_network(&c, &FeederOptions::default()).unwrap();
        for (i, id) in net.bus_ids.iter().enumerate() {
            let row = c.buses.iter().find(|b| b.id == *id).unwrap();
            let back = net.demand_p[i] * net.base_mva;
            assert!((back - row.pd).abs() <= 1e-12 * row.pd.abs().max(1e-300));
        }
    }

    fn arb_case() -> impl Strategy<Value = RawCase> {
        (1usize..6, 0.1f64..1000.0).prop_flat_map(|(n, base)| {
            let buses = proptest::collection::vec(
                (0u8..4, -50.0f64..50.0, -50.0f64..50.0, 0.0f64..1.2, 0.0f64..1.2),
                n,
            );
            let branches = proptest::collection::vec(
                (0..n, 0..n, 0.0f64..1.0, 0.0f64..1.0, 0.0f64..500.0, any::<bool>()),
                0..6,
            );
            let gens = proptest::collection::vec(
                (0..n, -10.0f64..10.0, -10.0f64..10.0, 0.0f64..1.0, -5.0f64..5.0, 0.0f64..1e-2),
                0..3,
            );
            (Just(base), buses, branches, gens).prop_map(|(base, buses, branches, gens)| RawCase {
                name: "rt".into(),
                base_mva: base,
                buses: buses
                    .into_iter()
                    .enumerate()
                    .map(|(i, (t, pd, qd, vmax, vmin))| BusRow {
                        id: i + 1,
                        bus_type: t,
                        pd,
                        qd,
                        vmax,
                        vmin,
                    })
                    .collect(),
                branches: branches
                    .into_iter()
                    .map(|(f, t, r, x, rate_a, s)| BranchRow {
                        from: f + 1,
                        to: t + 1,
                        r,
                        x,
                        rate_a,
                        in_service: s,
                    })
                    .collect(),
                gencosts: gens
                    .iter()
                    .map(|g| GenCostRow {
                        model: 2,
                        cost: CostCoefficients::new(g.5, g.4, g.3),
                    })
                    .collect(),
                gens: gens
                    .into_iter()
                    .map(|(b, pmax, pmin, qmax, qmin, _)| GenRow {
                        bus: b + 1,
                        pmax,
                        pmin,
                        qmax,
                        qmin,
                    })
                    .collect(),
            })
        })
    }

    proptest! {
        #[test]
        fn text_round_trip(case in arb_case()) {
            let text = to_matpower_text(&case);
            let back = parse_case(&text).unwrap();
            prop_assert_eq!(back, case);
        }
    }
}
