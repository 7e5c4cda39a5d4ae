//! Radial feeder model shared by every engine.
//!
//! Quantities are per-unit on the feeder's own MVA base. Voltages are kept as
//! squared magnitudes. After [`RadialNetwork::normalized`] the buses are
//! numbered in breadth-first order from the PCC (index 0) and branch `k`
//! always feeds bus `k + 1` from a parent with a smaller index, so forward and
//! backward sweeps are plain index loops.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{FlexError, Result};

/// Closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lo: f64,
    pub hi: f64,
}

impl Bounds {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn symmetric(half_width: f64) -> Self {
        Self::new(-half_width, half_width)
    }

    pub fn contains(&self, v: f64, tol: f64) -> bool {
        v >= self.lo - tol && v <= self.hi + tol
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    /// Amount by which `v` lies outside the interval (0 inside).
    pub fn excess(&self, v: f64) -> f64 {
        if v < self.lo {
            self.lo - v
        } else if v > self.hi {
            v - self.hi
        } else {
            0.0
        }
    }
}

/// Quadratic generation cost `c2·P² + c1·P + c0` with `P` in MW, cost in $/h.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CostCoefficients {
    pub c2: f64,
    pub c1: f64,
    pub c0: f64,
}

impl CostCoefficients {
    pub const fn new(c2: f64, c1: f64, c0: f64) -> Self {
        Self { c2, c1, c0 }
    }

    pub fn linear(c1: f64) -> Self {
        Self::new(0.0, c1, 0.0)
    }

    pub fn eval(&self, p_mw: f64) -> f64 {
        self.c2 * p_mw * p_mw + self.c1 * p_mw + self.c0
    }

    pub fn marginal(&self, p_mw: f64) -> f64 {
        2.0 * self.c2 * p_mw + self.c1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
}

/// The single controllable DER of a feeder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Der {
    pub bus: usize,
    pub p_bounds: Bounds,
    pub q_bounds: Bounds,
    pub cost: CostCoefficients,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadialNetwork {
    pub name: String,
    pub base_mva: f64,
    pub pcc_bus: usize,
    /// Original (case file) bus id of every internal bus index.
    pub bus_ids: Vec<usize>,
    pub branches: Vec<Branch>,
    pub demand_p: Vec<f64>,
    pub demand_q: Vec<f64>,
    pub u_min: Vec<f64>,
    pub u_max: Vec<f64>,
    pub der: Der,
    pub pcc_p_bounds: Bounds,
    pub pcc_q_bounds: Bounds,
}

/// Result of a successful radiality check.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeOrder {
    /// Branches as (parent, child) pairs, parents before children.
    pub oriented: Vec<(usize, usize)>,
    /// Index into `net.branches` for every entry of `oriented`.
    pub branch_order: Vec<usize>,
    /// Parent of each bus (`None` for the PCC).
    pub parent: Vec<Option<usize>>,
    /// Hop distance from the PCC.
    pub depth: Vec<usize>,
}

impl RadialNetwork {
    pub fn n_bus(&self) -> usize {
        self.demand_p.len()
    }

    pub fn n_line(&self) -> usize {
        self.branches.len()
    }

    pub fn total_demand_p(&self) -> f64 {
        self.demand_p.iter().sum()
    }

    pub fn total_demand_q(&self) -> f64 {
        self.demand_q.iter().sum()
    }

    pub fn resistance(&self) -> Vec<f64> {
        self.branches.iter().map(|b| b.r).collect()
    }

    pub fn reactance(&self) -> Vec<f64> {
        self.branches.iter().map(|b| b.x).collect()
    }

    /// True when buses are in BFS order from the PCC and branch `k` feeds bus `k + 1`.
    pub fn is_normalized(&self) -> bool {
        self.pcc_bus == 0
            && self.n_bus() == self.n_line() + 1
            && self
                .branches
                .iter()
                .enumerate()
                .all(|(k, b)| b.to == k + 1 && b.from < b.to)
    }

    pub fn require_normalized(&self) -> Result<()> {
        if self.is_normalized() {
            Ok(())
        } else {
            Err(FlexError::InvalidCase(format!(
                "network `{}` must be normalized (PCC at 0, branch k feeding bus k+1)",
                self.name
            )))
        }
    }

    /// Checks the data invariants of the model in addition to radiality.
    pub fn check_invariants(&self) -> Result<TreeOrder> {
        let n = self.n_bus();
        for (name, v) in [
            ("demand_q", &self.demand_q),
            ("u_min", &self.u_min),
            ("u_max", &self.u_max),
        ] {
            if v.len() != n {
                return Err(FlexError::Dimension(format!(
                    "{name} has {} entries, expected {n}",
                    v.len()
                )));
            }
        }
        if let Some(b) = self.branches.iter().find(|b| b.r < 0.0 || b.x < 0.0) {
            return Err(FlexError::InvalidCase(format!(
                "negative impedance on branch {}-{}",
                b.from, b.to
            )));
        }
        if self.der.bus >= n {
            return Err(FlexError::InvalidCase("DER bus out of range".into()));
        }
        let root = self.pcc_bus;
        if root >= n || self.u_min[root] > 1.0 + 1e-12 || self.u_max[root] < 1.0 - 1e-12 {
            return Err(FlexError::InvalidCase(
                "PCC voltage bounds must contain 1 p.u.".into(),
            ));
        }
        validate_radial(self)
    }

    /// Relabels buses breadth-first from the PCC and orients every branch
    /// away from it. `bus_ids` is carried through the permutation.
    pub fn normalized(&self) -> Result<RadialNetwork> {
        let order = validate_radial(self)?;
        let n = self.n_bus();
        let mut new_index = vec![usize::MAX; n];
        new_index[self.pcc_bus] = 0;
        for (k, &(_, child)) in order.oriented.iter().enumerate() {
            new_index[child] = k + 1;
        }
        let mut old_of = vec![0; n];
        for (old, &new) in new_index.iter().enumerate() {
            old_of[new] = old;
        }
        let permute = |v: &[f64]| old_of.iter().map(|&o| v[o]).collect::<Vec<_>>();
        let branches = order
            .oriented
            .iter()
            .zip(&order.branch_order)
            .map(|(&(p, c), &bi)| Branch {
                from: new_index[p],
                to: new_index[c],
                r: self.branches[bi].r,
                x: self.branches[bi].x,
            })
            .collect();
        let bus_ids = if self.bus_ids.len() == n {
            old_of.iter().map(|&o| self.bus_ids[o]).collect()
        } else {
            old_of.iter().map(|&o| o + 1).collect()
        };
        Ok(RadialNetwork {
            name: self.name.clone(),
            base_mva: self.base_mva,
            pcc_bus: 0,
            bus_ids,
            branches,
            demand_p: permute(&self.demand_p),
            demand_q: permute(&self.demand_q),
            u_min: permute(&self.u_min),
            u_max: permute(&self.u_max),
            der: Der {
                bus: new_index[self.der.bus],
                ..self.der.clone()
            },
            pcc_p_bounds: self.pcc_p_bounds,
            pcc_q_bounds: self.pcc_q_bounds,
        })
    }

    /// Internal index of an original bus id.
    pub fn index_of(&self, bus_id: usize) -> Option<usize> {
        self.bus_ids.iter().position(|&b| b == bus_id)
    }
}

/// Confirms the branch graph is a spanning tree rooted at the PCC and returns
/// a parent-before-child ordering.
pub fn validate_radial(net: &RadialNetwork) -> Result<TreeOrder> {
    let n = net.n_bus();
    let root = net.pcc_bus;
    if n == 0 || root >= n {
        return Err(FlexError::NotRadial {
            reason: "PCC bus out of range".into(),
            buses: vec![root],
        });
    }
    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    for (k, b) in net.branches.iter().enumerate() {
        if b.from >= n || b.to >= n {
            return Err(FlexError::NotRadial {
                reason: format!("branch {k} references a missing bus"),
                buses: vec![b.from, b.to],
            });
        }
        if b.from == b.to {
            return Err(FlexError::NotRadial {
                reason: format!("branch {k} is a self-loop"),
                buses: vec![b.from],
            });
        }
        adj[b.from].push((b.to, k));
        adj[b.to].push((b.from, k));
    }

    let mut parent = vec![None; n];
    let mut depth = vec![0; n];
    let mut seen = vec![false; n];
    let mut used = vec![false; net.n_line()];
    let mut oriented = Vec::with_capacity(n.saturating_sub(1));
    let mut branch_order = Vec::with_capacity(n.saturating_sub(1));
    let mut cycle_buses = Vec::new();
    let mut queue = VecDeque::from([root]);
    seen[root] = true;
    while let Some(bus) = queue.pop_front() {
        for &(next, k) in &adj[bus] {
            if used[k] {
                continue;
            }
            used[k] = true;
            if seen[next] {
                cycle_buses.push(bus);
                cycle_buses.push(next);
                continue;
            }
            seen[next] = true;
            parent[next] = Some(bus);
            depth[next] = depth[bus] + 1;
            oriented.push((bus, next));
            branch_order.push(k);
            queue.push_back(next);
        }
    }

    if !cycle_buses.is_empty() {
        cycle_buses.sort_unstable();
        cycle_buses.dedup();
        return Err(FlexError::NotRadial {
            reason: "cycle detected".into(),
            buses: cycle_buses,
        });
    }
    let unreached: Vec<usize> = (0..n).filter(|&i| !seen[i]).collect();
    if !unreached.is_empty() {
        return Err(FlexError::NotRadial {
            reason: "disconnected component".into(),
            buses: unreached,
        });
    }
    if n != net.n_line() + 1 {
        return Err(FlexError::NotRadial {
            reason: format!("{} buses but {} lines", n, net.n_line()),
            buses: Vec::new(),
        });
    }
    Ok(TreeOrder {
        oriented,
        branch_order,
        parent,
        depth,
    })
}

/// Connectivity matrices of a feeder (line × bus unless noted).
#[derive(Debug, Clone, PartialEq)]
pub struct Incidence {
    pub c_from: DMatrix<f64>,
    pub c_to: DMatrix<f64>,
    /// Signed incidence `c_from - c_to`.
    pub c: DMatrix<f64>,
    /// Bus × device placement of the DER.
    pub c_gen: DMatrix<f64>,
    pub e1: DVector<f64>,
}

pub fn build_incidence(net: &RadialNetwork) -> Incidence {
    let (nl, nb) = (net.n_line(), net.n_bus());
    let mut c_from = DMatrix::zeros(nl, nb);
    let mut c_to = DMatrix::zeros(nl, nb);
    for (k, b) in net.branches.iter().enumerate() {
        c_from[(k, b.from)] = 1.0;
        c_to[(k, b.to)] = 1.0;
    }
    let c = &c_from - &c_to;
    let mut c_gen = DMatrix::zeros(nb, 1);
    c_gen[(net.der.bus, 0)] = 1.0;
    let mut e1 = DVector::zeros(nb);
    e1[net.pcc_bus] = 1.0;
    Incidence {
        c_from,
        c_to,
        c,
        c_gen,
        e1,
    }
}
