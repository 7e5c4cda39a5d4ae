//! Quadratic loss maps and the loss-compensated flexibility region.
//!
//! With line flows affine in the exchange `u` and the sending-end squared
//! voltages frozen at an estimate `û`, total losses are quadratic in `u`:
//! `p_loss(u) = Σ_k r_k/û_k ((a_p,k·u + b_p,k)² + (a_q,k·u + b_q,k)²)`.

use std::fmt::Write as _;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::distflow::{check_feasible, sweep_solve, Denominator, SweepOptions};
use crate::error::{FlexError, Result};
use crate::geometry::{densify_boundary, FlexPolygon, Point, CONTAINS_TOL};
use crate::lindistflow::{FlowMaps, LinDistModel};
use crate::network::RadialNetwork;
use crate::numerics::{newton_2d, NewtonOptions};

/// `½ uᵀ H u + gᵀ u + c`
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct QuadForm {
    pub h: [[f64; 2]; 2],
    pub g: Point,
    pub c: f64,
}

impl QuadForm {
    pub fn eval(&self, u: Point) -> f64 {
        let hu = [
            self.h[0][0] * u[0] + self.h[0][1] * u[1],
            self.h[1][0] * u[0] + self.h[1][1] * u[1],
        ];
        0.5 * (u[0] * hu[0] + u[1] * hu[1]) + self.g[0] * u[0] + self.g[1] * u[1] + self.c
    }

    pub fn gradient(&self, u: Point) -> Point {
        [
            self.h[0][0] * u[0] + self.h[0][1] * u[1] + self.g[0],
            self.h[1][0] * u[0] + self.h[1][1] * u[1] + self.g[1],
        ]
    }

    pub fn eigenvalues(&self) -> Point {
        let m = 0.5 * (self.h[0][0] + self.h[1][1]);
        let det = self.h[0][0] * self.h[1][1] - self.h[0][1] * self.h[1][0];
        let d = (m * m - det).max(0.0).sqrt();
        [m - d, m + d]
    }

    fn add_line(&mut self, w: f64, a_p: Point, b_p: f64, a_q: Point, b_q: f64) {
        for i in 0..2 {
            for j in 0..2 {
                self.h[i][j] += 2.0 * w * (a_p[i] * a_p[j] + a_q[i] * a_q[j]);
            }
            self.g[i] += 2.0 * w * (b_p * a_p[i] + b_q * a_q[i]);
        }
        self.c += w * (b_p * b_p + b_q * b_q);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadLossMap {
    pub p: QuadForm,
    pub q: QuadForm,
    /// Per-line squared-voltage estimates the map was built with.
    pub u_hat: Vec<f64>,
}

/// The twelve numbers a feeder publishes alongside its polygon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub h_p11: f64,
    pub h_p12: f64,
    pub h_p22: f64,
    pub g_p1: f64,
    pub g_p2: f64,
    pub c_p: f64,
    pub h_q11: f64,
    pub h_q12: f64,
    pub h_q22: f64,
    pub g_q1: f64,
    pub g_q2: f64,
    pub c_q: f64,
}

impl LossRecord {
    pub const FIELDS: [&'static str; 12] = [
        "h_p11", "h_p12", "h_p22", "g_p1", "g_p2", "c_p", "h_q11", "h_q12", "h_q22", "g_q1", "g_q2", "c_q",
    ];

    pub fn values(&self) -> [f64; 12] {
        [
            self.h_p11, self.h_p12, self.h_p22, self.g_p1, self.g_p2, self.c_p, self.h_q11, self.h_q12,
            self.h_q22, self.g_q1, self.g_q2, self.c_q,
        ]
    }

    pub fn to_csv(&self) -> String {
        let mut s = Self::FIELDS.join(",");
        s.push('\n');
        let vals: Vec<String> = self.values().iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "{}", vals.join(","));
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain numbers serialize")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| FlexError::Config(format!("loss record: {e}")))
    }
}

/// Where the frozen squared voltages come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VoltageEstimate {
    /// DistFlow sweep at zero DER injection.
    #[default]
    Sweep,
    /// LinDistFlow state map at zero DER injection.
    Lindistflow,
}

/// Per-line denominators `û_k` at zero DER injection.
pub fn estimate_voltages(
    net: &RadialNetwork,
    model: &LinDistModel,
    source: VoltageEstimate,
    opts: &SweepOptions,
) -> Result<Vec<f64>> {
    let u: Vec<f64> = match source {
        VoltageEstimate::Sweep => {
            let sol = sweep_solve(net, [0.0, 0.0], opts)?;
            if check_feasible(&sol, net)
                .iter()
                .any(|v| matches!(v.tag, crate::distflow::ViolationTag::VoltageLow | crate::distflow::ViolationTag::VoltageHigh))
            {
                warn!("{}: zero-injection power flow violates voltage limits; using it anyway", net.name);
            }
            sol.u
        }
        VoltageEstimate::Lindistflow => {
            let u = model.exchange_for_der([0.0, 0.0])?;
            model.voltages_at(u)
        }
    };
    Ok(net
        .branches
        .iter()
        .map(|b| match opts.denominator {
            Denominator::Sending => u[b.from],
            Denominator::Difference => u[b.from] - u[b.to],
        })
        .collect())
}

pub fn build_maps(net: &RadialNetwork, flows: &FlowMaps, u_hat: &[f64]) -> Result<QuadLossMap> {
    if flows.n_line() != net.n_line() || u_hat.len() != net.n_line() {
        return Err(FlexError::Dimension(format!(
            "{} lines, {} flow rows, {} voltage estimates",
            net.n_line(),
            flows.n_line(),
            u_hat.len()
        )));
    }
    if let Some(k) = u_hat.iter().position(|&v| !(v > 0.0)) {
        return Err(FlexError::InvalidCase(format!(
            "voltage estimate of line {k} is not positive ({})",
            u_hat[k]
        )));
    }
    let mut p = QuadForm::default();
    let mut q = QuadForm::default();
    for (k, br) in net.branches.iter().enumerate() {
        let (a_p, b_p, a_q, b_q) = (flows.a_p[k], flows.b_p[k], flows.a_q[k], flows.b_q[k]);
        p.add_line(br.r / u_hat[k], a_p, b_p, a_q, b_q);
        q.add_line(br.x / u_hat[k], a_p, b_p, a_q, b_q);
    }
    Ok(QuadLossMap { p, q, u_hat: u_hat.to_vec() })
}

/// Line-by-line loss sum, the reference for the quadratic form.
pub fn direct_losses(net: &RadialNetwork, flows: &FlowMaps, u_hat: &[f64], u: Point) -> Point {
    let (pl, ql) = flows.flows_at(u);
    let mut out = [0.0, 0.0];
    for (k, br) in net.branches.iter().enumerate() {
        let s2 = (pl[k] * pl[k] + ql[k] * ql[k]) / u_hat[k];
        out[0] += br.r * s2;
        out[1] += br.x * s2;
    }
    out
}

impl QuadLossMap {
    pub fn zero() -> Self {
        Self { p: QuadForm::default(), q: QuadForm::default(), u_hat: Vec::new() }
    }

    pub fn losses(&self, u: Point) -> Point {
        [self.p.eval(u), self.q.eval(u)]
    }

    pub fn is_psd(&self, tol: f64) -> bool {
        self.p.eigenvalues()[0] >= -tol && self.q.eigenvalues()[0] >= -tol
    }

    pub fn record(&self) -> LossRecord {
        LossRecord {
            h_p11: self.p.h[0][0],
            h_p12: self.p.h[0][1],
            h_p22: self.p.h[1][1],
            g_p1: self.p.g[0],
            g_p2: self.p.g[1],
            c_p: self.p.c,
            h_q11: self.q.h[0][0],
            h_q12: self.q.h[0][1],
            h_q22: self.q.h[1][1],
            g_q1: self.q.g[0],
            g_q2: self.q.g[1],
            c_q: self.q.c,
        }
    }

    /// Rebuilds a map from the published record; `u_hat` is not part of it.
    pub fn from_record(r: &LossRecord) -> Self {
        Self {
            p: QuadForm { h: [[r.h_p11, r.h_p12], [r.h_p12, r.h_p22]], g: [r.g_p1, r.g_p2], c: r.c_p },
            q: QuadForm { h: [[r.h_q11, r.h_q12], [r.h_q12, r.h_q22]], g: [r.g_q1, r.g_q2], c: r.c_q },
            u_hat: Vec::new(),
        }
    }

    /// `u + (p_loss(u), q_loss(u))`
    pub fn compensate(&self, u: Point) -> Point {
        let l = self.losses(u);
        [u[0] + l[0], u[1] + l[1]]
    }

    /// Lossless exchange `v` with `compensate(v) = u`.
    pub fn preimage(&self, u: Point, opts: &NewtonOptions) -> Result<Point> {
        let l = self.losses(u);
        let r = newton_2d(
            |v| {
                let c = self.compensate(v);
                Ok([c[0] - u[0], c[1] - u[1]])
            },
            [u[0] - l[0], u[1] - l[1]],
            opts,
        )?;
        Ok(r.x)
    }

    /// Membership in the loss-compensated region, tested on the pre-image.
    pub fn slc_contains(&self, lds: &FlexPolygon, u: Point, opts: &NewtonOptions) -> bool {
        match self.preimage(u, opts) {
            Ok(v) => lds.contains(v, CONTAINS_TOL),
            Err(_) => false,
        }
    }

    /// Image of the densified `lds` boundary. The result need not be convex.
    pub fn compensate_polygon(&self, lds: &FlexPolygon, max_edge: f64) -> Result<FlexPolygon> {
        if lds.is_empty() {
            return Err(FlexError::DegeneratePolygon(0.0));
        }
        let dense = densify_boundary(lds, max_edge);
        Ok(FlexPolygon {
            vertices: dense.vertices.iter().map(|&v| self.compensate(v)).collect(),
            closed: true,
        })
    }
}
