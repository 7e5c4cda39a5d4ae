//! Exact DistFlow oracle: forward-backward sweep, bound checks, dense
//! sampling of the exact flexibility region and inversion of the PCC map.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{FlexError, Result};
use crate::exec::Execution;
use crate::geometry::{convex_hull, FlexPolygon, Point};
use crate::network::{Bounds, RadialNetwork};
use crate::numerics::{newton_2d, NewtonOptions};

/// Bound-check tolerance in p.u.
pub const FEAS_TOL: f64 = 1e-9;

/// Which squared voltage divides `P² + Q²` in the squared-current update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Denominator {
    /// Sending-end squared voltage `U_i`.
    #[default]
    Sending,
    /// Squared-voltage difference `U_i − U_j` across the line.
    Difference,
}

impl FromStr for Denominator {
    type Err = FlexError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sending" => Ok(Self::Sending),
            "difference" => Ok(Self::Difference),
            _ => Err(FlexError::Config(format!(
                "unknown denominator `{s}` (expected sending|difference)"
            ))),
        }
    }
}

impl fmt::Display for Denominator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sending => "sending",
            Self::Difference => "difference",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub denominator: Denominator,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 100,
            denominator: Denominator::Sending,
        }
    }
}

impl SweepOptions {
    /// Tighter settings used inside finite-difference Newton.
    pub fn precise(self) -> Self {
        Self {
            tol: 1e-13,
            max_iter: self.max_iter.max(300),
            ..self
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerFlowSolution {
    pub u: Vec<f64>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub l: Vec<f64>,
    pub p_pcc: f64,
    pub q_pcc: f64,
    pub der: Point,
    pub residual: f64,
    pub iterations: usize,
}

impl PowerFlowSolution {
    pub fn exchange(&self) -> Point {
        [self.p_pcc, self.q_pcc]
    }

    /// `Rᵀ L`
    pub fn loss_p(&self, net: &RadialNetwork) -> f64 {
        net.branches.iter().zip(&self.l).map(|(b, l)| b.r * l).sum()
    }

    /// `Xᵀ L`
    pub fn loss_q(&self, net: &RadialNetwork) -> f64 {
        net.branches.iter().zip(&self.l).map(|(b, l)| b.x * l).sum()
    }

    /// Residuals of the two feeder-wide power conservation identities.
    pub fn conservation_residual(&self, net: &RadialNetwork) -> Point {
        [
            self.p_pcc + self.der[0] - net.total_demand_p() - self.loss_p(net),
            self.q_pcc + self.der[1] - net.total_demand_q() - self.loss_q(net),
        ]
    }
}

struct Sweep<'a> {
    net: &'a RadialNetwork,
    der: Point,
    u: Vec<f64>,
    p: Vec<f64>,
    q: Vec<f64>,
    l: Vec<f64>,
    out_p: Vec<f64>,
    out_q: Vec<f64>,
    p_pcc: f64,
    q_pcc: f64,
}

impl<'a> Sweep<'a> {
    fn new(net: &'a RadialNetwork, der: Point) -> Self {
        let (nb, nl) = (net.n_bus(), net.n_line());
        Self {
            net,
            der,
            u: vec![1.0; nb],
            p: vec![0.0; nl],
            q: vec![0.0; nl],
            l: vec![0.0; nl],
            out_p: vec![0.0; nb],
            out_q: vec![0.0; nb],
            p_pcc: 0.0,
            q_pcc: 0.0,
        }
    }

    fn injection(&self, bus: usize) -> Point {
        if bus == self.net.der.bus {
            self.der
        } else {
            [0.0, 0.0]
        }
    }

    fn backward(&mut self) {
        let net = self.net;
        self.out_p.iter_mut().for_each(|v| *v = 0.0);
        self.out_q.iter_mut().for_each(|v| *v = 0.0);
        for k in (0..net.n_line()).rev() {
            let br = &net.branches[k];
            let j = br.to;
            let g = self.injection(j);
            self.p[k] = net.demand_p[j] - g[0] + self.out_p[j] + br.r * self.l[k];
            self.q[k] = net.demand_q[j] - g[1] + self.out_q[j] + br.x * self.l[k];
            self.out_p[br.from] += self.p[k];
            self.out_q[br.from] += self.q[k];
        }
        let g = self.injection(0);
        self.p_pcc = self.out_p[0] + net.demand_p[0] - g[0];
        self.q_pcc = self.out_q[0] + net.demand_q[0] - g[1];
    }

    fn forward(&mut self) {
        self.u[0] = 1.0;
        for (k, br) in self.net.branches.iter().enumerate() {
            self.u[br.to] = self.u[br.from] - 2.0 * (br.r * self.p[k] + br.x * self.q[k])
                + (br.r * br.r + br.x * br.x) * self.l[k];
        }
    }

    fn denominator(&self, k: usize, mode: Denominator) -> f64 {
        let br = &self.net.branches[k];
        match mode {
            Denominator::Sending => self.u[br.from],
            Denominator::Difference => self.u[br.from] - self.u[br.to],
        }
    }

    /// Updates `L` in place, returning the largest change.
    fn update_current(&mut self, mode: Denominator) -> Option<f64> {
        let mut delta = 0.0f64;
        for k in 0..self.net.n_line() {
            let s2 = self.p[k] * self.p[k] + self.q[k] * self.q[k];
            let new = if s2 == 0.0 {
                0.0
            } else {
                let d = self.denominator(k, mode);
                if !(d > 0.0) {
                    return None;
                }
                s2 / d
            };
            if !new.is_finite() {
                return None;
            }
            delta = delta.max((new - self.l[k]).abs());
            self.l[k] = new;
        }
        Some(delta)
    }

    fn residual(&self, mode: Denominator) -> f64 {
        let net = self.net;
        let mut r = 0.0f64;
        for (k, br) in net.branches.iter().enumerate() {
            let drop = self.u[br.from] - self.u[br.to] - 2.0 * (br.r * self.p[k] + br.x * self.q[k])
                + (br.r * br.r + br.x * br.x) * self.l[k];
            let quad = self.denominator(k, mode) * self.l[k] - (self.p[k] * self.p[k] + self.q[k] * self.q[k]);
            r = r.max(drop.abs()).max(quad.abs());
        }
        // bus balances
        let mut bal_p = vec![0.0; net.n_bus()];
        let mut bal_q = vec![0.0; net.n_bus()];
        for (k, br) in net.branches.iter().enumerate() {
            bal_p[br.from] -= self.p[k];
            bal_q[br.from] -= self.q[k];
            bal_p[br.to] += self.p[k] - br.r * self.l[k];
            bal_q[br.to] += self.q[k] - br.x * self.l[k];
        }
        bal_p[0] += self.p_pcc;
        bal_q[0] += self.q_pcc;
        for j in 0..net.n_bus() {
            let g = self.injection(j);
            r = r
                .max((bal_p[j] + g[0] - net.demand_p[j]).abs())
                .max((bal_q[j] + g[1] - net.demand_q[j]).abs());
        }
        r
    }

    fn diverged(&self) -> bool {
        self.u.iter().any(|u| !(u.is_finite() && *u > 0.0))
    }

    fn into_solution(self, residual: f64, iterations: usize) -> PowerFlowSolution {
        PowerFlowSolution {
            u: self.u,
            p: self.p,
            q: self.q,
            l: self.l,
            p_pcc: self.p_pcc,
            q_pcc: self.q_pcc,
            der: self.der,
            residual,
            iterations,
        }
    }
}

/// Forward-backward sweep power flow with the DER at `der` (p.u.).
pub fn sweep_solve(net: &RadialNetwork, der: Point, opts: &SweepOptions) -> Result<PowerFlowSolution> {
    net.require_normalized()?;
    if !(der[0].is_finite() && der[1].is_finite()) {
        return Err(FlexError::NonFinite("DER setpoint".into()));
    }
    let mut s = Sweep::new(net, der);
    s.backward();
    s.forward();
    let mut last = f64::INFINITY;
    for it in 1..=opts.max_iter {
        let Some(delta) = s.update_current(opts.denominator) else {
            return Err(FlexError::NoConvergence {
                iterations: it,
                residual: f64::INFINITY,
                best: None,
            });
        };
        s.backward();
        s.forward();
        if s.diverged() {
            return Err(FlexError::NoConvergence {
                iterations: it,
                residual: f64::INFINITY,
                best: None,
            });
        }
        last = delta;
        if delta < opts.tol {
            let r = s.residual(opts.denominator);
            return Ok(s.into_solution(r, it));
        }
    }
    Err(FlexError::NoConvergence {
        iterations: opts.max_iter,
        residual: last,
        best: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationTag {
    VoltageLow,
    VoltageHigh,
    PccP,
    PccQ,
    DerP,
    DerQ,
    /// The requested exchange could not be realized by any DER setpoint.
    Unreachable,
}

impl ViolationTag {
    pub const ALL: [ViolationTag; 7] = [
        Self::VoltageLow,
        Self::VoltageHigh,
        Self::PccP,
        Self::PccQ,
        Self::DerP,
        Self::DerQ,
        Self::Unreachable,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::VoltageLow => "voltage-low",
            Self::VoltageHigh => "voltage-high",
            Self::PccP => "pcc-p",
            Self::PccQ => "pcc-q",
            Self::DerP => "der-p",
            Self::DerQ => "der-q",
            Self::Unreachable => "unreachable",
        }
    }
}

impl fmt::Display for ViolationTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub tag: ViolationTag,
    /// Original bus id for voltage violations, 0 otherwise.
    pub element: usize,
    pub magnitude: f64,
}

fn bound_violations(
    out: &mut Vec<Violation>,
    v: f64,
    b: Bounds,
    tol: f64,
    lo: ViolationTag,
    hi: ViolationTag,
    element: usize,
) {
    if v < b.lo - tol {
        out.push(Violation { tag: lo, element, magnitude: b.lo - v });
    } else if v > b.hi + tol {
        out.push(Violation { tag: hi, element, magnitude: v - b.hi });
    }
}

pub fn check_feasible(sol: &PowerFlowSolution, net: &RadialNetwork) -> Vec<Violation> {
    check_feasible_tol(sol, net, FEAS_TOL)
}

pub fn check_feasible_tol(sol: &PowerFlowSolution, net: &RadialNetwork, tol: f64) -> Vec<Violation> {
    use ViolationTag::*;
    let mut out = Vec::new();
    for j in 0..net.n_bus() {
        bound_violations(
            &mut out,
            sol.u[j],
            Bounds::new(net.u_min[j], net.u_max[j]),
            tol,
            VoltageLow,
            VoltageHigh,
            net.bus_ids[j],
        );
    }
    bound_violations(&mut out, sol.p_pcc, net.pcc_p_bounds, tol, PccP, PccP, 0);
    bound_violations(&mut out, sol.q_pcc, net.pcc_q_bounds, tol, PccQ, PccQ, 0);
    bound_violations(&mut out, sol.der[0], net.der.p_bounds, tol, DerP, DerP, 0);
    bound_violations(&mut out, sol.der[1], net.der.q_bounds, tol, DerQ, DerQ, 0);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloudSample {
    pub der: Point,
    /// NaN when the sweep failed.
    pub exchange: Point,
    pub converged: bool,
    pub feasible: bool,
    /// Sorted, without repeats.
    pub tags: Vec<ViolationTag>,
    pub iterations: usize,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactFlexCloud {
    pub samples: Vec<CloudSample>,
    pub hull: FlexPolygon,
    /// Points along the DER p and q axes.
    pub grid_shape: (usize, usize),
}

impl ExactFlexCloud {
    pub fn feasible_points(&self) -> Vec<Point> {
        self.samples
            .iter()
            .filter(|s| s.feasible)
            .map(|s| s.exchange)
            .collect()
    }
}

/// `n` evenly spaced values covering `b`, a single value when `b` is a point.
pub fn grid_axis(b: Bounds, n: usize) -> Vec<f64> {
    if b.width() == 0.0 || n < 2 {
        return vec![b.lo];
    }
    let step = (b.hi - b.lo) / (n - 1) as f64;
    let mut v: Vec<f64> = (0..n).map(|i| b.lo + i as f64 * step).collect();
    v[n - 1] = b.hi;
    v
}

/// Sweeps the DER grid; rows iterate over p, columns over q.
pub fn exact_flex_cloud(
    net: &RadialNetwork,
    resolution: usize,
    opts: &SweepOptions,
    exec: Execution,
) -> Result<ExactFlexCloud> {
    if resolution < 2 {
        return Err(FlexError::Config(format!("grid resolution must be at least 2, got {resolution}")));
    }
    net.require_normalized()?;
    let ps = grid_axis(net.der.p_bounds, resolution);
    let qs = grid_axis(net.der.q_bounds, resolution);
    let nq = qs.len();
    let samples = exec.map_range(ps.len() * nq, |i| {
        let der = [ps[i / nq], qs[i % nq]];
        match sweep_solve(net, der, opts) {
            Ok(sol) => {
                let mut tags: Vec<ViolationTag> = check_feasible(&sol, net).iter().map(|v| v.tag).collect();
                tags.sort();
                tags.dedup();
                CloudSample {
                    der,
                    exchange: sol.exchange(),
                    converged: true,
                    feasible: tags.is_empty(),
                    tags,
                    iterations: sol.iterations,
                    residual: sol.residual,
                }
            }
            Err(e) => {
                let (iterations, residual) = match e {
                    FlexError::NoConvergence { iterations, residual, .. } => (iterations, residual),
                    _ => (0, f64::NAN),
                };
                CloudSample {
                    der,
                    exchange: [f64::NAN, f64::NAN],
                    converged: false,
                    feasible: false,
                    tags: Vec::new(),
                    iterations,
                    residual,
                }
            }
        }
    });
    let feasible: Vec<Point> = samples.iter().filter(|s| s.feasible).map(|s| s.exchange).collect();
    Ok(ExactFlexCloud {
        hull: convex_hull(&feasible),
        samples,
        grid_shape: (ps.len(), nq),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct InvertOptions {
    pub sweep: SweepOptions,
    pub newton: NewtonOptions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inversion {
    pub der: Point,
    pub solution: PowerFlowSolution,
    pub newton_iterations: usize,
}

/// Finds the DER setpoint whose power flow delivers `target` at the PCC.
pub fn invert_pcc(net: &RadialNetwork, target: Point, opts: &InvertOptions) -> Result<Inversion> {
    let sweep = opts.sweep.precise();
    let guess = [net.total_demand_p() - target[0], net.total_demand_q() - target[1]];
    let r = newton_2d(
        |der| {
            let s = sweep_solve(net, der, &sweep)?;
            Ok([s.p_pcc - target[0], s.q_pcc - target[1]])
        },
        guess,
        &opts.newton,
    )?;
    let solution = sweep_solve(net, r.x, &sweep)?;
    Ok(Inversion {
        der: r.x,
        solution,
        newton_iterations: r.iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lindistflow::assemble_network;
    use crate::network::fixtures::{from_edges, two_bus};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    /// Scalar fixed point of `l = ((pd + r l)² + (qd + x l)²) / 1` by bisection.
    fn two_bus_oracle(pd: f64, qd: f64, r: f64, x: f64) -> f64 {
        let f = |l: f64| ((pd + r * l).powi(2) + (qd + x * l).powi(2)) - l;
        let (mut lo, mut hi) = (0.0, 0.1);
        while f(hi) > 0.0 {
            hi *= 1.5;
        }
        assert!(f(lo) >= 0.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn flat_start_is_exact_without_load() {
        let net = from_edges(4, &[(0, 1), (1, 2), (1, 3)]);
        let s = sweep_solve(&net, [0.0, 0.0], &SweepOptions::default()).unwrap();
        assert!(s.u.iter().all(|&u| u == 1.0));
        assert!(s.l.iter().all(|&l| l == 0.0));
        assert_eq!(s.exchange(), [0.0, 0.0]);
        assert!(check_feasible(&s, &net).is_empty());
    }

    #[test]
    fn two_bus_tutorial_values() {
        let net = two_bus(0.5);
        let s = sweep_solve(&net, [0.0, 0.0], &SweepOptions::default()).unwrap();
        let l = two_bus_oracle(0.5, 0.2, 0.01, 0.02);
        assert_relative_eq!(s.l[0], l, epsilon = 1e-10);
        // the fixed point is 0.295360; 0.29539 is a coarser hand value
        assert_relative_eq!(s.l[0], 0.29536, epsilon = 5e-6);
        assert_relative_eq!(s.l[0], 0.29539, epsilon = 5e-5);
        assert_relative_eq!(s.p_pcc, 0.50295, epsilon = 5e-6);
        assert_relative_eq!(s.q_pcc, 0.20591, epsilon = 5e-6);
        assert_relative_eq!(s.u[1], 0.98185, epsilon = 5e-6);
        assert!(s.residual < 1e-9);
    }

    #[test]
    fn der_serving_its_own_load_removes_flow() {
        let net = two_bus(1.0);
        let s = sweep_solve(&net, [0.5, 0.2], &SweepOptions::default()).unwrap();
        assert!(s.p_pcc.abs() < 1e-15 && s.q_pcc.abs() < 1e-15);
        assert_eq!(s.l[0], 0.0);
    }

    #[test]
    fn voltage_low_violation_magnitude() {
        let mut net = two_bus(0.5);
        net.u_min[1] = 0.99;
        let s = sweep_solve(&net, [0.0, 0.0], &SweepOptions::default()).unwrap();
        let v = check_feasible(&s, &net);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].tag, ViolationTag::VoltageLow);
        assert_relative_eq!(v[0].magnitude, 0.99 - s.u[1], epsilon = 1e-15);
        assert!((v[0].magnitude - 0.0082).abs() < 1e-4);
    }

    #[test]
    fn der_bound_violation() {
        let net = two_bus(0.5);
        let s = sweep_solve(&net, [0.25 + 1e-6, 0.0], &SweepOptions::default()).unwrap();
        let v = check_feasible(&s, &net);
        assert_eq!(v.iter().map(|v| v.tag).collect::<Vec<_>>(), vec![ViolationTag::DerP]);
        let s = sweep_solve(&net, [0.25, 0.0], &SweepOptions::default()).unwrap();
        assert!(check_feasible(&s, &net).is_empty());
    }

    #[test]
    fn difference_denominator_inflates_losses() {
        let net = two_bus(0.5);
        let send = sweep_solve(&net, [0.0, 0.0], &SweepOptions::default()).unwrap();
        let opts = SweepOptions { denominator: Denominator::Difference, ..SweepOptions::default() };
        match sweep_solve(&net, [0.0, 0.0], &opts) {
            Ok(diff) => assert!(diff.l[0] > 10.0 * send.l[0]),
            Err(FlexError::NoConvergence { .. }) => {}
            Err(e) => panic!("unexpected {e}"),
        }
        assert_eq!("difference".parse::<Denominator>().unwrap(), Denominator::Difference);
        assert!("middle".parse::<Denominator>().is_err());
    }

    #[test]
    fn overload_does_not_converge() {
        let mut net = two_bus(0.5);
        net.demand_p[1] = 30.0;
        assert!(matches!(
            sweep_solve(&net, [0.0, 0.0], &SweepOptions::default()),
            Err(FlexError::NoConvergence { .. })
        ));
    }

    #[test]
    fn cloud_on_two_bus() {
        let net = two_bus(0.5);
        let c = exact_flex_cloud(&net, 3, &SweepOptions::default(), Execution::Sequential).unwrap();
        assert_eq!(c.samples.len(), 9);
        assert_eq!(c.grid_shape, (3, 3));
        let centre = &c.samples[4];
        assert_eq!(centre.der, [0.0, 0.0]);
        let s = sweep_solve(&net, [0.0, 0.0], &SweepOptions::default()).unwrap();
        assert_eq!(centre.exchange, s.exchange());
        assert!(c.samples.iter().all(|s| s.feasible));
        for v in &c.hull.vertices {
            assert!(c.samples.iter().any(|s| s.exchange == *v));
        }
    }

    #[test]
    fn cloud_with_point_der_has_one_sample() {
        let net = two_bus(0.0);
        let c = exact_flex_cloud(&net, 11, &SweepOptions::default(), Execution::Sequential).unwrap();
        assert_eq!(c.samples.len(), 1);
        assert_eq!(c.hull.len(), 1);
        assert!(exact_flex_cloud(&net, 1, &SweepOptions::default(), Execution::Sequential).is_err());
    }

    #[test]
    fn parallel_cloud_matches_sequential() {
        let net = two_bus(0.5);
        let o = SweepOptions::default();
        let a = exact_flex_cloud(&net, 9, &o, Execution::Sequential).unwrap();
        let b = exact_flex_cloud(&net, 9, &o, Execution::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invert_round_trip() {
        let net = two_bus(0.5);
        let s = sweep_solve(&net, [0.1, -0.05], &SweepOptions::default()).unwrap();
        let inv = invert_pcc(&net, s.exchange(), &InvertOptions::default()).unwrap();
        assert!((inv.der[0] - 0.1).abs() < 1e-8 && (inv.der[1] + 0.05).abs() < 1e-8);
        assert!((inv.solution.p_pcc - s.p_pcc).abs() < 1e-8);
    }

    #[test]
    fn invert_lossless_target_asks_der_for_the_losses() {
        let net = two_bus(0.5);
        let inv = invert_pcc(&net, [0.5, 0.2], &InvertOptions::default()).unwrap();
        let s = &inv.solution;
        assert_relative_eq!(inv.der[0], s.loss_p(&net), epsilon = 1e-9);
        assert_relative_eq!(inv.der[1], s.loss_q(&net), epsilon = 1e-9);
        assert!(inv.der[0] > 0.0 && inv.der[1] > 0.0);
    }

    #[test]
    fn invert_far_target_fails() {
        let net = two_bus(0.5);
        assert!(matches!(
            invert_pcc(&net, [-50.0, 30.0], &InvertOptions::default()),
            Err(FlexError::NoConvergence { .. })
        ));
    }

    #[test]
    fn grid_axis_endpoints() {
        let a = grid_axis(Bounds::new(-0.3, 0.7), 11);
        assert_eq!(a.len(), 11);
        assert_eq!(a[0], -0.3);
        assert_eq!(a[10], 0.7);
        assert_eq!(grid_axis(Bounds::new(0.2, 0.2), 11), vec![0.2]);
    }

    fn feeder() -> RadialNetwork {
        let mut net = from_edges(6, &[(0, 1), (1, 2), (2, 3), (1, 4), (4, 5)]);
        net.demand_p = vec![0.0, 0.1, 0.05, 0.2, 0.1, 0.15];
        net.demand_q = vec![0.0, 0.04, 0.02, 0.08, 0.03, 0.05];
        net.der.p_bounds = Bounds::symmetric(0.3);
        net.der.q_bounds = Bounds::symmetric(0.1);
        net
    }

    proptest! {
        #[test]
        fn two_bus_matches_closed_form(pd in 0.0f64..1.0, qd in 0.0f64..0.5) {
            let mut net = two_bus(0.5);
            net.demand_p[1] = pd;
            net.demand_q[1] = qd;
            let s = sweep_solve(&net, [0.0, 0.0], &SweepOptions::default()).unwrap();
            let l = two_bus_oracle(pd, qd, 0.01, 0.02);
            prop_assert!((s.l[0] - l).abs() <= 1e-10);
            prop_assert!((s.p_pcc - (pd + 0.01 * l)).abs() <= 1e-10);
        }

        #[test]
        fn conservation_and_loss_positivity(pg in -0.3f64..0.3, qg in -0.1f64..0.1) {
            let net = feeder();
            let s = sweep_solve(&net, [pg, qg], &SweepOptions::default()).unwrap();
            let c = s.conservation_residual(&net);
            prop_assert!(c[0].abs() <= 1e-8 && c[1].abs() <= 1e-8);
            prop_assert!(s.l.iter().all(|&l| l >= 0.0));
            // lossless exchange at the same DER setpoint
            let m = assemble_network(&net).unwrap();
            let u_lds = m.exchange_for_der([pg, qg]).unwrap();
            prop_assert!((s.p_pcc - u_lds[0] - s.loss_p(&net)).abs() <= 1e-10);
            prop_assert!((s.q_pcc - u_lds[1] - s.loss_q(&net)).abs() <= 1e-10);
            prop_assert!(s.p_pcc - u_lds[0] >= -1e-10);
        }
    }
}
