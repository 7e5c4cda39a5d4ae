//! Lossless LinDistFlow model in the compact form `A x + B u − b = 0` and
//! the flexibility polygon it induces at the PCC.

use log::debug;
use nalgebra::{DMatrix, DVector};

use crate::error::{FlexError, Result};
use crate::geometry::{intersect_halfspaces, Clipped, HalfSpace, Point, Rect};
use crate::network::{build_incidence, Incidence, RadialNetwork};
use crate::numerics::Lu;

/// Environment variable overriding the clipping seed box, `pmin,pmax,qmin,qmax` in p.u.
pub const SEED_BOX_ENV: &str = "FLEXAGG_SEED_BOX";

/// Positions of the state blocks `[U; P_l; Q_l; p^g; q^g]` in `x`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StateIndex {
    pub n_bus: usize,
    pub n_line: usize,
}

impl StateIndex {
    pub fn dim(&self) -> usize {
        self.n_bus + 2 * self.n_line + 2
    }

    pub fn u(&self, bus: usize) -> usize {
        bus
    }

    pub fn p_line(&self, k: usize) -> usize {
        self.n_bus + k
    }

    pub fn q_line(&self, k: usize) -> usize {
        self.n_bus + self.n_line + k
    }

    pub fn pg(&self) -> usize {
        self.n_bus + 2 * self.n_line
    }

    pub fn qg(&self) -> usize {
        self.pg() + 1
    }

    pub fn label(&self, row: usize) -> String {
        if row < self.n_bus {
            format!("U[{row}]")
        } else if row < self.n_bus + self.n_line {
            format!("P_l[{}]", row - self.n_bus)
        } else if row < self.pg() {
            format!("Q_l[{}]", row - self.n_bus - self.n_line)
        } else if row == self.pg() {
            "p_g".into()
        } else {
            "q_g".into()
        }
    }
}

#[derive(Debug, Clone)]
pub struct LinDistModel {
    pub a: DMatrix<f64>,
    pub b_mat: DMatrix<f64>,
    pub b: DVector<f64>,
    pub index: StateIndex,
    /// `A⁻¹ b`
    pub a_inv_b: DVector<f64>,
    /// `A⁻¹ B`, two columns
    pub a_inv_bmat: DMatrix<f64>,
    pub condition: f64,
}

/// Line flows as affine functions of the exchange, `P_l(u) = a_p u + b_p`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowMaps {
    pub a_p: Vec<Point>,
    pub b_p: Vec<f64>,
    pub a_q: Vec<Point>,
    pub b_q: Vec<f64>,
}

impl FlowMaps {
    pub fn n_line(&self) -> usize {
        self.b_p.len()
    }

    pub fn flows_at(&self, u: Point) -> (Vec<f64>, Vec<f64>) {
        let eval = |a: &[Point], b: &[f64]| -> Vec<f64> {
            a.iter().zip(b).map(|(a, b)| a[0] * u[0] + a[1] * u[1] + b).collect()
        };
        (eval(&self.a_p, &self.b_p), eval(&self.a_q, &self.b_q))
    }
}

/// Assembles and factors the LinDistFlow system of a normalized feeder.
pub fn assemble(net: &RadialNetwork, inc: &Incidence) -> Result<LinDistModel> {
    net.require_normalized()?;
    let (nb, nl) = (net.n_bus(), net.n_line());
    let idx = StateIndex { n_bus: nb, n_line: nl };
    let n = idx.dim();
    if inc.c.nrows() != nl || inc.c.ncols() != nb || inc.c_gen.ncols() != 1 {
        return Err(FlexError::Dimension(format!(
            "incidence is {}x{} with {} DER columns, network has {nl} lines and {nb} buses",
            inc.c.nrows(),
            inc.c.ncols(),
            inc.c_gen.ncols()
        )));
    }

    let mut a = DMatrix::zeros(n, n);
    let mut b = DVector::zeros(n);
    let mut b_mat = DMatrix::zeros(n, 2);

    // root pin
    for j in 0..nb {
        a[(0, idx.u(j))] = inc.e1[j];
    }
    b[0] = 1.0;
    // voltage drops
    for k in 0..nl {
        let row = 1 + k;
        for j in 0..nb {
            a[(row, idx.u(j))] = inc.c[(k, j)];
        }
        a[(row, idx.p_line(k))] = -2.0 * net.branches[k].r;
        a[(row, idx.q_line(k))] = -2.0 * net.branches[k].x;
    }
    // active then reactive balance
    let p_row0 = 1 + nl;
    let q_row0 = p_row0 + nb;
    for j in 0..nb {
        for k in 0..nl {
            a[(p_row0 + j, idx.p_line(k))] = -inc.c[(k, j)];
            a[(q_row0 + j, idx.q_line(k))] = -inc.c[(k, j)];
        }
        a[(p_row0 + j, idx.pg())] = inc.c_gen[(j, 0)];
        a[(q_row0 + j, idx.qg())] = inc.c_gen[(j, 0)];
        b_mat[(p_row0 + j, 0)] = inc.e1[j];
        b_mat[(q_row0 + j, 1)] = inc.e1[j];
        b[p_row0 + j] = net.demand_p[j];
        b[q_row0 + j] = net.demand_q[j];
    }

    let lu = Lu::factor(&a)?;
    let condition = lu.condition_estimate();
    let a_inv_b = lu.solve_vec(&b)?;
    let a_inv_bmat = lu.solve(&b_mat)?;
    debug!("{}: LinDistFlow A is {n}x{n}, condition ~{condition:.3e}", net.name);
    Ok(LinDistModel {
        a,
        b_mat,
        b,
        index: idx,
        a_inv_b,
        a_inv_bmat,
        condition,
    })
}

/// Convenience wrapper building the incidence first.
pub fn assemble_network(net: &RadialNetwork) -> Result<LinDistModel> {
    assemble(net, &build_incidence(net))
}

impl LinDistModel {
    /// `x = A⁻¹(b − B u)`
    pub fn state_at(&self, u: Point) -> DVector<f64> {
        &self.a_inv_b - self.a_inv_bmat.column(0) * u[0] - self.a_inv_bmat.column(1) * u[1]
    }

    fn entry_at(&self, row: usize, u: Point) -> f64 {
        self.a_inv_b[row] - self.a_inv_bmat[(row, 0)] * u[0] - self.a_inv_bmat[(row, 1)] * u[1]
    }

    /// `‖A x + B u − b‖∞`
    pub fn residual(&self, x: &DVector<f64>, u: Point) -> f64 {
        let bu = self.b_mat.column(0) * u[0] + self.b_mat.column(1) * u[1];
        (&self.a * x + bu - &self.b).amax()
    }

    pub fn der_at(&self, u: Point) -> Point {
        [self.entry_at(self.index.pg(), u), self.entry_at(self.index.qg(), u)]
    }

    pub fn voltages_at(&self, u: Point) -> Vec<f64> {
        (0..self.index.n_bus).map(|j| self.entry_at(self.index.u(j), u)).collect()
    }

    /// Exchange delivering a given DER setpoint (inverse of [`Self::der_at`]).
    pub fn exchange_for_der(&self, der: Point) -> Result<Point> {
        // der(u) = c − M u, with M the 2×2 DER block of A⁻¹B
        let (i, j) = (self.index.pg(), self.index.qg());
        let m = [
            [self.a_inv_bmat[(i, 0)], self.a_inv_bmat[(i, 1)]],
            [self.a_inv_bmat[(j, 0)], self.a_inv_bmat[(j, 1)]],
        ];
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        if det.abs() < 1e-14 {
            return Err(FlexError::Singular { pivot: det, threshold: 1e-14 });
        }
        let r = [self.a_inv_b[i] - der[0], self.a_inv_b[j] - der[1]];
        Ok([
            (m[1][1] * r[0] - m[0][1] * r[1]) / det,
            (-m[1][0] * r[0] + m[0][0] * r[1]) / det,
        ])
    }

    pub fn flow_maps(&self) -> FlowMaps {
        let nl = self.index.n_line;
        let coeffs = |row: usize| -> (Point, f64) {
            (
                [-self.a_inv_bmat[(row, 0)], -self.a_inv_bmat[(row, 1)]],
                self.a_inv_b[row],
            )
        };
        let (a_p, b_p) = (0..nl).map(|k| coeffs(self.index.p_line(k))).unzip();
        let (a_q, b_q) = (0..nl).map(|k| coeffs(self.index.q_line(k))).unzip();
        FlowMaps { a_p, b_p, a_q, b_q }
    }

    /// Half-spaces in `u` from every finite bound on `x` plus the PCC box.
    /// `voltage_shift[j]` is added to the modeled `U[j]` before it is
    /// compared with its limits.
    pub fn halfspaces(&self, net: &RadialNetwork, voltage_shift: Option<&[f64]>) -> Vec<HalfSpace> {
        let idx = self.index;
        let mut rows: Vec<(usize, f64, f64)> = Vec::with_capacity(idx.n_bus + 2);
        for j in 0..idx.n_bus {
            let s = voltage_shift.map_or(0.0, |v| v[j]);
            rows.push((idx.u(j), net.u_min[j] - s, net.u_max[j] - s));
        }
        rows.push((idx.pg(), net.der.p_bounds.lo, net.der.p_bounds.hi));
        rows.push((idx.qg(), net.der.q_bounds.lo, net.der.q_bounds.hi));

        let mut out = Vec::with_capacity(2 * rows.len() + 4);
        for (row, lo, hi) in rows {
            // x_row(u) = c − d·u
            let c = self.a_inv_b[row];
            let d = [self.a_inv_bmat[(row, 0)], self.a_inv_bmat[(row, 1)]];
            let constant = d[0].abs().max(d[1].abs()) <= 1e-13;
            for (normal, offset) in [([-d[0], -d[1]], hi - c), (d, c - lo)] {
                if !offset.is_finite() {
                    continue;
                }
                if constant {
                    // a violated constant row empties the region
                    if offset < -1e-12 {
                        out.push(HalfSpace { normal: [0.0, 0.0], offset });
                    }
                    continue;
                }
                out.push(HalfSpace { normal, offset });
            }
        }
        out.extend(pcc_box(net).halfspaces());
        out
    }

    /// `U_LDS` clipped from the seed box.
    pub fn flexibility_polygon(&self, net: &RadialNetwork) -> Clipped {
        self.flexibility_polygon_shifted(net, None)
    }

    pub fn flexibility_polygon_shifted(&self, net: &RadialNetwork, voltage_shift: Option<&[f64]>) -> Clipped {
        intersect_halfspaces(&self.halfspaces(net, voltage_shift), &seed_box(net))
    }
}

pub fn pcc_box(net: &RadialNetwork) -> Rect {
    Rect::new(
        [net.pcc_p_bounds.lo, net.pcc_q_bounds.lo],
        [net.pcc_p_bounds.hi, net.pcc_q_bounds.hi],
    )
}

/// PCC box unless `FLEXAGG_SEED_BOX` holds a valid override.
pub fn seed_box(net: &RadialNetwork) -> Rect {
    match std::env::var(SEED_BOX_ENV) {
        Ok(s) => match parse_seed_box(&s) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("ignoring {SEED_BOX_ENV}: {e}");
                pcc_box(net)
            }
        },
        Err(_) => pcc_box(net),
    }
}

pub fn parse_seed_box(s: &str) -> Result<Rect> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| FlexError::Config(format!("seed box `{s}`: {e}")))?;
    if v.len() != 4 {
        return Err(FlexError::Config(format!("seed box `{s}` needs 4 numbers")));
    }
    let r = Rect::new([v[0], v[2]], [v[1], v[3]]);
    if !r.is_valid() {
        return Err(FlexError::Config(format!("seed box `{s}` is not a bounded box")));
    }
    Ok(r)
}
