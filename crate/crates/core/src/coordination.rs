//! TSO-DSO coordination: a DC transmission dispatch in which each attached
//! feeder is represented only by its flexibility polygon and loss map.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::aggregate::{AggregateOptions, FeederModel};
use crate::distflow::{
    check_feasible, exact_flex_cloud, grid_axis, invert_pcc, sweep_solve, ExactFlexCloud, InvertOptions, SweepOptions,
    Violation, ViolationTag,
};
use crate::error::{FlexError, Result};
use crate::exec::Execution;
use crate::geometry::{HalfSpace, Point};
use crate::matpower::{to_radial_network, FeederOptions, RawCase};
use crate::network::{Bounds, CostCoefficients, RadialNetwork};
use crate::numerics::{qp_solve, Lu, QpProblem};

/// System base of the transmission model, MVA.
pub const TSO_BASE_MVA: f64 = 100.0;
const REF_BUS_TYPE: u8 = 3;
/// Relative cost gaps are divided by at least this much.
const GAP_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Exact feeder power flow inside the fixed-point loop; defines f*.
    Reference,
    /// Lossless polygon only.
    Lds,
    /// Lossless polygon plus the quadratic loss map.
    Slc,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Reference, Method::Lds, Method::Slc];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Reference => "reference",
            Method::Lds => "lds",
            Method::Slc => "slc",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = FlexError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "reference" | "ref" => Ok(Method::Reference),
            "lds" => Ok(Method::Lds),
            "slc" => Ok(Method::Slc),
            other => Err(FlexError::Config(format!(
                "unknown method `{other}` (expected reference, lds or slc)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeederClass {
    Small,
    Medium,
    Large,
}

impl FeederClass {
    pub const ALL: [FeederClass; 3] = [FeederClass::Small, FeederClass::Medium, FeederClass::Large];

    /// Distribution case attached for this class.
    pub fn template(&self) -> &'static str {
        match self {
            FeederClass::Small => "case33mg",
            FeederClass::Medium => "case10ba",
            FeederClass::Large => "case118zh",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttachOptions {
    /// (low, high) MW: `Pd > high` is large, `low ≤ Pd ≤ high` medium, the rest small.
    pub thresholds: (f64, f64),
    /// Attach a small feeder to buses without load as well.
    pub include_zero_load: bool,
}

impl Default for AttachOptions {
    fn default() -> Self {
        Self {
            thresholds: (5.0, 15.0),
            include_zero_load: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Attachment {
    pub bus_id: usize,
    pub demand_mw: f64,
    pub class: FeederClass,
}

/// One feeder per non-reference bus, ordered by bus id.
pub fn attach_feeders(case: &RawCase, opts: &AttachOptions) -> Vec<Attachment> {
    let (low, high) = opts.thresholds;
    let mut out: Vec<Attachment> = case
        .buses
        .iter()
        .filter(|b| b.bus_type != REF_BUS_TYPE)
        .filter(|b| opts.include_zero_load || b.pd > 0.0)
        .map(|b| Attachment {
            bus_id: b.id,
            demand_mw: b.pd,
            class: if b.pd > high {
                FeederClass::Large
            } else if b.pd >= low {
                FeederClass::Medium
            } else {
                FeederClass::Small
            },
        })
        .collect();
    out.sort_by_key(|a| a.bus_id);
    out
}

pub fn class_counts(plan: &[Attachment]) -> BTreeMap<FeederClass, usize> {
    let mut m = BTreeMap::new();
    for a in plan {
        *m.entry(a.class).or_insert(0) += 1;
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DcLine {
    pub from: usize,
    pub to: usize,
    pub susceptance: f64,
    /// p.u. on the TSO base; infinite when unrated.
    pub limit: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TsoGenerator {
    pub bus: usize,
    /// p.u. on the TSO base.
    pub p_bounds: Bounds,
    /// On MW.
    pub cost: CostCoefficients,
}

/// DC transmission model. Bus indices are positions in `bus_ids`.
#[derive(Debug, Clone)]
pub struct TsoModel {
    pub name: String,
    pub bus_ids: Vec<usize>,
    pub slack: usize,
    pub lines: Vec<DcLine>,
    pub generators: Vec<TsoGenerator>,
    /// Demand left at each bus after attachment, p.u.
    pub demand_p: Vec<f64>,
    /// Line flow per unit bus injection, slack absorbing.
    pub ptdf: DMatrix<f64>,
    /// Bus index of each attached feeder, in feeder order.
    pub feeder_buses: Vec<usize>,
}

impl TsoModel {
    pub fn from_case(case: &RawCase) -> Result<Self> {
        case.check_invariants()?;
        if case.gencosts.len() != case.gens.len() || case.gens.is_empty() {
            return Err(FlexError::InvalidCase(format!(
                "{}: transmission case needs one gencost row per generator",
                case.name
            )));
        }
        let base = case.base_mva;
        if (base - TSO_BASE_MVA).abs() > 1e-9 {
            log::warn!("{}: baseMVA {base} rescaled to {TSO_BASE_MVA}", case.name);
        }
        let index: BTreeMap<usize, usize> = case.buses.iter().enumerate().map(|(i, b)| (b.id, i)).collect();
        let slack = case
            .buses
            .iter()
            .position(|b| b.bus_type == REF_BUS_TYPE)
            .unwrap_or(0);
        let mut lines = Vec::new();
        for b in case.branches.iter().filter(|b| b.in_service) {
            if b.x <= 0.0 {
                return Err(FlexError::InvalidCase(format!(
                    "branch {}-{} has non-positive reactance {}",
                    b.from, b.to, b.x
                )));
            }
            lines.push(DcLine {
                from: index[&b.from],
                to: index[&b.to],
                susceptance: 1.0 / b.x,
                limit: if b.rate_a > 0.0 { b.rate_a / TSO_BASE_MVA } else { f64::INFINITY },
            });
        }
        let generators = case
            .gens
            .iter()
            .zip(&case.gencosts)
            .map(|(g, c)| TsoGenerator {
                bus: index[&g.bus],
                p_bounds: Bounds::new(g.pmin / TSO_BASE_MVA, g.pmax / TSO_BASE_MVA),
                cost: c.cost,
            })
            .collect();
        let n = case.buses.len();
        let ptdf = ptdf(n, slack, &lines)?;
        Ok(Self {
            name: case.name.clone(),
            bus_ids: case.buses.iter().map(|b| b.id).collect(),
            slack,
            lines,
            generators,
            demand_p: case.buses.iter().map(|b| b.pd / TSO_BASE_MVA).collect(),
            ptdf,
            feeder_buses: Vec::new(),
        })
    }

    /// One bus, one generator, no lines: the setting of a single-feeder price sweep.
    pub fn single_bus(name: &str, cost: CostCoefficients, p_bounds_mw: Bounds) -> Self {
        Self {
            name: name.into(),
            bus_ids: vec![1],
            slack: 0,
            lines: Vec::new(),
            generators: vec![TsoGenerator {
                bus: 0,
                p_bounds: Bounds::new(p_bounds_mw.lo / TSO_BASE_MVA, p_bounds_mw.hi / TSO_BASE_MVA),
                cost,
            }],
            demand_p: vec![0.0],
            ptdf: DMatrix::zeros(0, 1),
            feeder_buses: Vec::new(),
        }
    }

    pub fn n_bus(&self) -> usize {
        self.bus_ids.len()
    }

    /// Attaches a feeder at an original bus id; the feeder's load replaces the bus demand.
    pub fn attach(&mut self, bus_id: usize) -> Result<usize> {
        let i = self
            .bus_ids
            .iter()
            .position(|&b| b == bus_id)
            .ok_or_else(|| FlexError::InvalidCase(format!("attachment bus {bus_id} not in {}", self.name)))?;
        self.demand_p[i] = 0.0;
        self.feeder_buses.push(i);
        Ok(self.feeder_buses.len() - 1)
    }

    /// Total generation cost, $/h, for outputs in p.u.
    pub fn cost(&self, gen_pu: &[f64]) -> f64 {
        self.generators
            .iter()
            .zip(gen_pu)
            .map(|(g, &p)| g.cost.eval(p * TSO_BASE_MVA))
            .sum()
    }

    pub fn line_flows(&self, injection: &[f64]) -> Vec<f64> {
        (&self.ptdf * DVector::from_column_slice(injection)).iter().copied().collect()
    }
}

fn ptdf(n: usize, slack: usize, lines: &[DcLine]) -> Result<DMatrix<f64>> {
    if lines.is_empty() {
        return Ok(DMatrix::zeros(0, n));
    }
    let mut b = DMatrix::zeros(n, n);
    for l in lines {
        let s = l.susceptance;
        b[(l.from, l.from)] += s;
        b[(l.to, l.to)] += s;
        b[(l.from, l.to)] -= s;
        b[(l.to, l.from)] -= s;
    }
    let keep: Vec<usize> = (0..n).filter(|&i| i != slack).collect();
    let b_red = b.select_rows(&keep).select_columns(&keep);
    let lu = Lu::factor(&b_red).map_err(|_| {
        FlexError::InvalidCase("DC network is not connected to the slack bus".into())
    })?;
    let x_red = lu.solve(&DMatrix::identity(n - 1, n - 1))?;
    let mut x = DMatrix::zeros(n, n);
    for (r, &i) in keep.iter().enumerate() {
        for (c, &j) in keep.iter().enumerate() {
            x[(i, j)] = x_red[(r, c)];
        }
    }
    let mut out = DMatrix::zeros(lines.len(), n);
    for (k, l) in lines.iter().enumerate() {
        for j in 0..n {
            out[(k, j)] = l.susceptance * (x[(l.from, j)] - x[(l.to, j)]);
        }
    }
    Ok(out)
}

/// DER cost rising linearly in marginal terms from 1 to 8 $/MWh over `[0, p̄]`.
pub fn default_der_cost(net: &RadialNetwork) -> CostCoefficients {
    let p_max_mw = net.der.p_bounds.hi * net.base_mva;
    let c2 = if p_max_mw > 0.0 { (8.0 - 1.0) / (2.0 * p_max_mw) } else { 0.0 };
    CostCoefficients::new(c2, 1.0, 0.0)
}

/// Aggregated feeder ready for coordination, with the default DER cost.
pub fn prepare_feeder(case: &RawCase, feeder: &FeederOptions, agg: &AggregateOptions) -> Result<FeederModel> {
    let mut net = to_radial_network(case, feeder)?;
    net.der.cost = default_der_cost(&net);
    FeederModel::build(net, agg)
}

/// Transmission model with its attached feeders, `feeders[i]` at `plan[i]`.
#[derive(Debug, Clone)]
pub struct Fleet {
    pub tso: TsoModel,
    pub plan: Vec<Attachment>,
    pub feeders: Vec<FeederModel>,
}

/// Attaches a copy of the class template feeder at every planned bus.
/// Each template is aggregated once.
pub fn build_fleet(
    tso_case: &RawCase,
    templates: &BTreeMap<FeederClass, RawCase>,
    attach: &AttachOptions,
    feeder: &FeederOptions,
    agg: &AggregateOptions,
) -> Result<Fleet> {
    let plan = attach_feeders(tso_case, attach);
    let mut tso = TsoModel::from_case(tso_case)?;
    let mut models = BTreeMap::new();
    let mut feeders = Vec::with_capacity(plan.len());
    for a in &plan {
        if let std::collections::btree_map::Entry::Vacant(e) = models.entry(a.class) {
            let case = templates
                .get(&a.class)
                .ok_or_else(|| FlexError::Config(format!("no template feeder for class {}", a.class.template())))?;
            e.insert(prepare_feeder(case, feeder, agg)?);
        }
        tso.attach(a.bus_id)?;
        feeders.push(models[&a.class].clone());
    }
    Ok(Fleet { tso, plan, feeders })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoordinateOptions {
    /// Fixed-point tolerance on exchanges and losses, feeder p.u.
    pub tol: f64,
    pub max_iter: usize,
    /// Iteration cap of the exact-loss loop, which converges linearly where
    /// voltage limits bind.
    pub reference_max_iter: usize,
    /// DER grid points per axis searched by the single-feeder reference.
    pub reference_resolution: usize,
    /// Weight on squared delivered reactive exchange, $/(MVAr²h).
    pub q_weight: f64,
    pub sweep: SweepOptions,
    /// Bound excess below this is not recorded as a violation.
    pub violation_tol: f64,
    #[serde(skip)]
    pub exec: Execution,
}

impl Default for CoordinateOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 20,
            reference_max_iter: 100,
            reference_resolution: 101,
            q_weight: 1.0,
            sweep: SweepOptions::default(),
            violation_tol: 1e-6,
            exec: Execution::Parallel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchResult {
    pub method: Method,
    /// Per feeder, in the lossless coordinates the polygon is written in.
    pub lds_exchanges: Vec<Point>,
    /// Per feeder, what the TSO schedules at the PCC (feeder p.u.).
    pub exchanges: Vec<Point>,
    /// DER setpoints recovered by post-verification (feeder p.u.).
    pub der_setpoints: Vec<Point>,
    pub generation_mw: Vec<f64>,
    /// DER cost at the recovered setpoint, $/h.
    pub feeder_cost: Vec<f64>,
    /// Generation plus DER cost, $/h.
    pub cost_total: f64,
    pub violations: Vec<Vec<Violation>>,
    /// |f − f*| / |f*| per feeder; zero until a reference is assigned.
    pub feeder_gap: Vec<f64>,
    pub cost_gap: f64,
    pub iterations: usize,
    pub last_change: f64,
}

impl DispatchResult {
    pub fn n_feeder(&self) -> usize {
        self.exchanges.len()
    }

    pub fn violation_count(&self, tol: f64) -> usize {
        self.violations.iter().flatten().filter(|v| v.magnitude > tol).count()
    }

    pub fn feeder_violation_count(&self, feeder: usize, tol: f64) -> usize {
        self.violations[feeder].iter().filter(|v| v.magnitude > tol).count()
    }

    pub fn tag_counts(&self, tol: f64) -> BTreeMap<ViolationTag, usize> {
        let mut m = BTreeMap::new();
        for v in self.violations.iter().flatten().filter(|v| v.magnitude > tol) {
            *m.entry(v.tag).or_insert(0) += 1;
        }
        m
    }

    pub fn max_violation(&self) -> f64 {
        self.violations.iter().flatten().map(|v| v.magnitude).fold(0.0, f64::max)
    }

    /// Fills the gap fields against a reference result for the same feeders.
    pub fn assign_gaps(&mut self, reference: &DispatchResult) -> Result<()> {
        if reference.n_feeder() != self.n_feeder() {
            return Err(FlexError::Dimension(format!(
                "reference has {} feeders, result has {}",
                reference.n_feeder(),
                self.n_feeder()
            )));
        }
        self.feeder_gap = self
            .feeder_cost
            .iter()
            .zip(&reference.feeder_cost)
            .map(|(&f, &r)| relative_gap(f, r))
            .collect();
        self.cost_gap = relative_gap(self.cost_total, reference.cost_total);
        Ok(())
    }
}

pub fn relative_gap(f: f64, f_star: f64) -> f64 {
    (f - f_star).abs() / f_star.abs().max(GAP_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verification {
    pub der: Point,
    pub violations: Vec<Violation>,
    /// DER cost at `der`, $/h.
    pub cost: f64,
}

/// Recovers each feeder's DER setpoint from its scheduled exchange with an
/// exact power flow and reports the bounds it breaks. An exchange no DER
/// setpoint can deliver is an `unreachable` violation.
pub fn post_verify(feeders: &[FeederModel], exchanges: &[Point], opts: &CoordinateOptions) -> Result<Vec<Verification>> {
    if feeders.len() != exchanges.len() {
        return Err(FlexError::Dimension(format!(
            "{} feeders but {} exchanges",
            feeders.len(),
            exchanges.len()
        )));
    }
    let inv = InvertOptions {
        sweep: opts.sweep,
        ..Default::default()
    };
    let idx: Vec<usize> = (0..feeders.len()).collect();
    Ok(opts.exec.map(&idx, |&i| {
        let net = &feeders[i].net;
        let der_cost = |der: Point| net.der.cost.eval(der[0] * net.base_mva);
        match invert_pcc(net, exchanges[i], &inv) {
            Ok(r) => Verification {
                der: r.der,
                violations: crate::distflow::check_feasible_tol(&r.solution, net, opts.violation_tol),
                cost: der_cost(r.der),
            },
            Err(e) => {
                let (residual, best) = match e {
                    FlexError::NoConvergence { residual, best, .. } => (residual, best),
                    _ => (f64::INFINITY, None),
                };
                let der = best.unwrap_or([f64::NAN, f64::NAN]);
                log::warn!("{}: exchange {:?} not reachable (residual {residual:.3e})", net.name, exchanges[i]);
                Verification {
                    der,
                    violations: vec![Violation {
                        tag: ViolationTag::Unreachable,
                        element: 0,
                        magnitude: if residual.is_finite() { residual } else { f64::MAX },
                    }],
                    cost: if der[0].is_finite() { der_cost(der) } else { f64::NAN },
                }
            }
        }
    }))
}

/// Per-feeder data that changes between fixed-point iterations.
#[derive(Debug, Clone)]
struct FeederState {
    halfspaces: Vec<HalfSpace>,
    loss: Point,
}

struct Master {
    problem: QpProblem,
    labels: Vec<String>,
}

fn feeder_halfspaces(f: &FeederModel, shift: Option<&[f64]>) -> Result<Vec<HalfSpace>> {
    let poly = match shift {
        None => f.lds.clone(),
        Some(s) => f.model.flexibility_polygon_shifted(&f.net, Some(s)).into_result()?,
    };
    let hs = poly.halfspaces();
    if hs.is_empty() {
        Ok(f.model.halfspaces(&f.net, shift))
    } else {
        Ok(hs)
    }
}

fn build_master(tso: &TsoModel, feeders: &[FeederModel], state: &[FeederState], q_weight: f64) -> Master {
    let ng = tso.generators.len();
    let nf = feeders.len();
    let n = ng + 2 * nf;
    let b2 = TSO_BASE_MVA * TSO_BASE_MVA;
    let mut h = DMatrix::zeros(n, n);
    let mut g = DVector::zeros(n);
    for (k, gen) in tso.generators.iter().enumerate() {
        h[(k, k)] = 2.0 * gen.cost.c2 * b2;
        g[k] = gen.cost.c1 * TSO_BASE_MVA;
    }
    // feeder injection into the TSO bus, TSO p.u.: −s·(u_p + loss_p)
    let scale: Vec<f64> = feeders.iter().map(|f| f.net.base_mva / TSO_BASE_MVA).collect();
    for (i, f) in feeders.iter().enumerate() {
        let (ip, iq) = (ng + 2 * i, ng + 2 * i + 1);
        let base = f.net.base_mva;
        let c = f.net.der.cost;
        let d = f.model.der_at([0.0, 0.0])[0];
        h[(ip, ip)] = 2.0 * c.c2 * base * base;
        g[ip] = -2.0 * c.c2 * base * base * d - c.c1 * base;
        h[(iq, iq)] = 2.0 * q_weight * base * base;
        g[iq] = 2.0 * q_weight * base * base * state[i].loss[1];
    }

    let mut a_eq = DMatrix::zeros(1, n);
    let mut b_eq = tso.demand_p.iter().sum::<f64>();
    for k in 0..ng {
        a_eq[(0, k)] = 1.0;
    }
    for i in 0..nf {
        a_eq[(0, ng + 2 * i)] = -scale[i];
        b_eq += scale[i] * state[i].loss[0];
    }

    let mut rows: Vec<(Vec<f64>, f64, String)> = Vec::new();
    let name = |b: usize| tso.bus_ids[b];
    let base_flow = &tso.ptdf * DVector::from_column_slice(&tso.demand_p);
    for (l, line) in tso.lines.iter().enumerate() {
        if !line.limit.is_finite() {
            continue;
        }
        // flow = Σ ptdf·gen − Σ ptdf·s·u_p − (ptdf·d + Σ ptdf·s·loss_p)
        let mut a = vec![0.0; n];
        let mut fixed = base_flow[l];
        for (k, gen) in tso.generators.iter().enumerate() {
            a[k] = tso.ptdf[(l, gen.bus)];
        }
        for (i, &bus) in tso.feeder_buses.iter().enumerate() {
            a[ng + 2 * i] = -tso.ptdf[(l, bus)] * scale[i];
            fixed += tso.ptdf[(l, bus)] * scale[i] * state[i].loss[0];
        }
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        let tag = format!("line {}-{}", name(line.from), name(line.to));
        rows.push((a, line.limit + fixed, format!("{tag} forward limit")));
        rows.push((neg, line.limit - fixed, format!("{tag} reverse limit")));
    }
    for (k, gen) in tso.generators.iter().enumerate() {
        let mut up = vec![0.0; n];
        up[k] = 1.0;
        if gen.p_bounds.hi.is_finite() {
            rows.push((up.clone(), gen.p_bounds.hi, format!("gen {} at bus {} pmax", k + 1, name(gen.bus))));
        }
        if gen.p_bounds.lo.is_finite() {
            up[k] = -1.0;
            rows.push((up, -gen.p_bounds.lo, format!("gen {} at bus {} pmin", k + 1, name(gen.bus))));
        }
    }
    for (i, f) in feeders.iter().enumerate() {
        for (e, hs) in state[i].halfspaces.iter().enumerate() {
            let mut a = vec![0.0; n];
            a[ng + 2 * i] = hs.normal[0];
            a[ng + 2 * i + 1] = hs.normal[1];
            rows.push((
                a,
                hs.offset,
                format!("feeder {} ({} at bus {}) edge {}", i + 1, f.net.name, name(tso.feeder_buses[i]), e + 1),
            ));
        }
    }

    let mut a_ineq = DMatrix::zeros(rows.len(), n);
    let mut b_ineq = DVector::zeros(rows.len());
    let mut labels = Vec::with_capacity(rows.len());
    for (r, (a, b, label)) in rows.into_iter().enumerate() {
        for (c, v) in a.into_iter().enumerate() {
            a_ineq[(r, c)] = v;
        }
        b_ineq[r] = b;
        labels.push(label);
    }
    Master {
        problem: QpProblem::new(h, g)
            .with_inequalities(a_ineq, b_ineq)
            .with_equalities(a_eq, DVector::from_element(1, b_eq)),
        labels,
    }
}

fn solve_master(master: &Master) -> Result<DVector<f64>> {
    match qp_solve(&master.problem) {
        Ok(s) => Ok(s.z),
        Err(FlexError::Infeasible { detail, rows }) => {
            let names: Vec<&str> = rows.iter().filter_map(|&r| master.labels.get(r)).map(String::as_str).collect();
            Err(FlexError::Infeasible {
                detail: if names.is_empty() {
                    detail
                } else {
                    format!("{detail}; conflicting constraints: {}", names.join(", "))
                },
                rows,
            })
        }
        Err(e) => Err(e),
    }
}

/// Losses and voltage shift the next master problem should see.
fn loss_update(f: &FeederModel, u: Point, method: Method, sweep: &SweepOptions) -> Result<(Point, Option<Vec<f64>>)> {
    match method {
        Method::Lds => Ok(([0.0, 0.0], None)),
        Method::Slc => Ok((f.loss.losses(u), None)),
        Method::Reference => {
            let sol = sweep_solve(&f.net, f.model.der_at(u), &sweep.precise())?;
            let e = sol.exchange();
            let lin = f.model.voltages_at(u);
            let shift = sol.u.iter().zip(&lin).map(|(a, b)| a - b).collect();
            Ok(([e[0] - u[0], e[1] - u[1]], Some(shift)))
        }
    }
}

fn max_abs_diff(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).abs().max((a[1] - b[1]).abs())
}

/// Solves the flexibility-reduced dispatch and post-verifies every feeder.
/// `feeders[i]` sits at `tso.feeder_buses[i]`.
pub fn coordinate(
    tso: &TsoModel,
    feeders: &[FeederModel],
    method: Method,
    opts: &CoordinateOptions,
) -> Result<DispatchResult> {
    if tso.feeder_buses.len() != feeders.len() {
        return Err(FlexError::Dimension(format!(
            "{} attachments but {} feeders",
            tso.feeder_buses.len(),
            feeders.len()
        )));
    }
    let ng = tso.generators.len();
    let nf = feeders.len();
    let mut state: Vec<FeederState> = feeders
        .iter()
        .map(|f| {
            Ok(FeederState {
                halfspaces: feeder_halfspaces(f, None)?,
                loss: [0.0, 0.0],
            })
        })
        .collect::<Result<_>>()?;

    let cap = if method == Method::Reference {
        opts.reference_max_iter
    } else {
        opts.max_iter
    };
    let mut prev_u: Option<Vec<Point>> = None;
    let mut iterations = 0;
    let mut last_change: f64;
    let (z, u, delivered) = loop {
        iterations += 1;
        let z = solve_master(&build_master(tso, feeders, &state, opts.q_weight))?;
        let u: Vec<Point> = (0..nf).map(|i| [z[ng + 2 * i], z[ng + 2 * i + 1]]).collect();
        if method == Method::Lds {
            last_change = 0.0;
            break (z, u.clone(), u);
        }
        let idx: Vec<usize> = (0..nf).collect();
        let updates = opts
            .exec
            .map(&idx, |&i| loss_update(&feeders[i], u[i], method, &opts.sweep))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        last_change = 0.0_f64;
        for i in 0..nf {
            last_change = last_change.max(max_abs_diff(updates[i].0, state[i].loss));
            if let Some(p) = &prev_u {
                last_change = last_change.max(max_abs_diff(u[i], p[i]));
            }
        }
        let delivered: Vec<Point> = u
            .iter()
            .zip(&updates)
            .map(|(u, (l, _))| [u[0] + l[0], u[1] + l[1]])
            .collect();
        let converged = prev_u.is_some() && last_change < opts.tol;
        for (i, (loss, shift)) in updates.into_iter().enumerate() {
            state[i].loss = loss;
            if let Some(s) = shift {
                state[i].halfspaces = feeder_halfspaces(&feeders[i], Some(&s))?;
            }
        }
        if converged {
            break (z, u, delivered);
        }
        if iterations >= cap {
            return Err(FlexError::FixedPointStall {
                iterations,
                last_change,
            });
        }
        prev_u = Some(u);
    };
    log::debug!("{method}: {iterations} master solves, last change {last_change:.2e}");

    let generation: Vec<f64> = (0..ng).map(|k| z[k]).collect();
    let checks = post_verify(feeders, &delivered, opts)?;
    let feeder_cost: Vec<f64> = checks.iter().map(|c| c.cost).collect();
    Ok(DispatchResult {
        method,
        lds_exchanges: u,
        exchanges: delivered,
        der_setpoints: checks.iter().map(|c| c.der).collect(),
        generation_mw: generation.iter().map(|p| p * TSO_BASE_MVA).collect(),
        cost_total: tso.cost(&generation) + feeder_cost.iter().sum::<f64>(),
        feeder_cost,
        violations: checks.into_iter().map(|c| c.violations).collect(),
        feeder_gap: vec![0.0; nf],
        cost_gap: 0.0,
        iterations,
        last_change,
    })
}

/// Runs every method and fills gaps against the reference (computed even
/// when not requested). Results come back in the requested order.
pub fn coordinate_methods(
    tso: &TsoModel,
    feeders: &[FeederModel],
    methods: &[Method],
    opts: &CoordinateOptions,
) -> Result<Vec<DispatchResult>> {
    let reference = coordinate(tso, feeders, Method::Reference, opts)?;
    let mut out = Vec::with_capacity(methods.len());
    for &m in methods {
        let mut r = if m == Method::Reference {
            reference.clone()
        } else {
            coordinate(tso, feeders, m, opts)?
        };
        r.assign_gaps(&reference)?;
        out.push(r);
    }
    Ok(out)
}

/// TSO cost for the single-feeder sweep: marginal price 20 $/MWh at zero
/// import, 60 $/MWh when importing the whole feeder demand.
pub fn default_tso_cost(net: &RadialNetwork) -> CostCoefficients {
    let d_mw = (net.total_demand_p() * net.base_mva).max(1e-9);
    CostCoefficients::new(20.0 / d_mw, 20.0, 0.0)
}

/// Seven log-spaced DER prices from half to twice 60 $/MWh.
pub fn default_der_prices() -> Vec<f64> {
    (0..7).map(|k| 60.0 * 2f64.powf(-1.0 + k as f64 / 3.0)).collect()
}

/// Dispatches one feeder against a single aggregate TSO generator for each
/// linear DER price. The reference is a search over the exact cloud rather
/// than the exact-loss fixed point.
pub fn price_sweep_dispatch(
    feeder: &FeederModel,
    tso_cost: CostCoefficients,
    der_prices: &[f64],
    method: Method,
    opts: &CoordinateOptions,
) -> Result<Vec<DispatchResult>> {
    let mut tso = TsoModel::single_bus(&feeder.net.name, tso_cost, Bounds::new(0.0, f64::INFINITY));
    tso.attach(1)?;
    let cloud = match method {
        Method::Reference => Some(exact_flex_cloud(
            &feeder.net,
            opts.reference_resolution,
            &opts.sweep,
            opts.exec,
        )?),
        _ => None,
    };
    der_prices
        .iter()
        .map(|&price| {
            let mut f = feeder.clone();
            f.net.der.cost = CostCoefficients::linear(price);
            match &cloud {
                Some(c) => cloud_dispatch(&f, c, tso_cost, opts),
                None => coordinate(&tso, std::slice::from_ref(&f), method, opts),
            }
        })
        .collect()
}

/// Best feasible cloud sample for the single-bus objective, refined by
/// shrinking DER grids around it and recovered through `post_verify`.
fn cloud_dispatch(
    f: &FeederModel,
    cloud: &ExactFlexCloud,
    tso_cost: CostCoefficients,
    opts: &CoordinateOptions,
) -> Result<DispatchResult> {
    const ROUNDS: usize = 4;
    const POINTS: usize = 9;
    let net = &f.net;
    let b = net.base_mva;
    let objective = |der: Point, e: Point| {
        tso_cost.eval(b * e[0]) + net.der.cost.eval(b * der[0]) + opts.q_weight * (b * e[1]).powi(2)
    };
    let admissible = |der: Point| -> Option<(f64, Point)> {
        let sol = sweep_solve(net, der, &opts.sweep).ok()?;
        if sol.p_pcc < 0.0 || !check_feasible(&sol, net).is_empty() {
            return None;
        }
        Some((objective(der, sol.exchange()), der))
    };
    let (mut best_v, mut best) = cloud
        .samples
        .iter()
        .filter(|s| s.feasible && s.exchange[0] >= 0.0)
        .map(|s| (objective(s.der, s.exchange), s.der))
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .ok_or_else(|| FlexError::Infeasible {
            detail: format!("{}: no feasible cloud sample imports power", net.name),
            rows: Vec::new(),
        })?;

    let (np, nq) = cloud.grid_shape;
    let cell = |bounds: Bounds, n: usize| if n > 1 { bounds.width() / (n - 1) as f64 } else { 0.0 };
    let (mut dp, mut dq) = (cell(net.der.p_bounds, np), cell(net.der.q_bounds, nq));
    for _ in 0..ROUNDS {
        let ps = grid_axis(clamp_bounds(best[0], dp, net.der.p_bounds), POINTS);
        let qs = grid_axis(clamp_bounds(best[1], dq, net.der.q_bounds), POINTS);
        let found = opts.exec.map_range(ps.len() * qs.len(), |i| admissible([ps[i / qs.len()], qs[i % qs.len()]]));
        for (v, der) in found.into_iter().flatten() {
            if v < best_v {
                best_v = v;
                best = der;
            }
        }
        dp /= (POINTS - 1) as f64 / 2.0;
        dq /= (POINTS - 1) as f64 / 2.0;
    }

    let exchange = sweep_solve(net, best, &opts.sweep.precise())?.exchange();
    let check = post_verify(std::slice::from_ref(f), &[exchange], opts)?.remove(0);
    let generation_mw = exchange[0] * b;
    Ok(DispatchResult {
        method: Method::Reference,
        lds_exchanges: vec![f.model.exchange_for_der(check.der)?],
        exchanges: vec![exchange],
        der_setpoints: vec![check.der],
        generation_mw: vec![generation_mw],
        cost_total: tso_cost.eval(generation_mw) + check.cost,
        feeder_cost: vec![check.cost],
        violations: vec![check.violations],
        feeder_gap: vec![0.0],
        cost_gap: 0.0,
        iterations: ROUNDS,
        last_change: dp.max(dq),
    })
}

fn clamp_bounds(center: f64, half_width: f64, b: Bounds) -> Bounds {
    Bounds::new((center - half_width).max(b.lo), (center + half_width).min(b.hi))
}
