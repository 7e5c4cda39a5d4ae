//! Per-feeder aggregation: lossless polygon, loss map, compensated boundary
//! and the exact reference cloud, plus the numbers used to compare them.

use serde::{Deserialize, Serialize};

use crate::distflow::{exact_flex_cloud, grid_axis, sweep_solve, ExactFlexCloud, SweepOptions};
use crate::error::Result;
use crate::exec::Execution;
use crate::geometry::{densify_boundary, dist, polygon_metrics, FlexPolygon, Point, PolygonMetrics};
use crate::lindistflow::{assemble_network, LinDistModel};
use crate::loss::{build_maps, estimate_voltages, QuadLossMap, VoltageEstimate};
use crate::network::RadialNetwork;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateOptions {
    /// DER grid points per axis for the exact cloud.
    pub resolution: usize,
    /// Longest boundary piece imaged through the loss map, p.u.
    pub max_edge: f64,
    pub sweep: SweepOptions,
    pub voltage_estimate: VoltageEstimate,
    #[serde(skip)]
    pub exec: Execution,
}

impl Default for AggregateOptions {
    fn default() -> Self {
        Self {
            resolution: 101,
            max_edge: 0.01,
            sweep: SweepOptions::default(),
            voltage_estimate: VoltageEstimate::Sweep,
            exec: Execution::Parallel,
        }
    }
}

/// What a feeder hands to the transmission operator, plus the model it came from.
#[derive(Debug, Clone)]
pub struct FeederModel {
    pub net: RadialNetwork,
    pub model: LinDistModel,
    pub lds: FlexPolygon,
    pub loss: QuadLossMap,
}

impl FeederModel {
    pub fn build(net: RadialNetwork, opts: &AggregateOptions) -> Result<Self> {
        let model = assemble_network(&net)?;
        let lds = model.flexibility_polygon(&net).into_result()?;
        let u_hat = estimate_voltages(&net, &model, opts.voltage_estimate, &opts.sweep)?;
        let loss = build_maps(&net, &model.flow_maps(), &u_hat)?;
        Ok(Self { net, model, lds, loss })
    }

    pub fn slc(&self, max_edge: f64) -> Result<FlexPolygon> {
        self.loss.compensate_polygon(&self.lds, max_edge)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompensationError {
    pub samples: usize,
    /// Mean ‖u_lds − u_exact‖₂ at equal DER setpoints.
    pub mean_lds: f64,
    /// Mean ‖compensate(u_lds) − u_exact‖₂.
    pub mean_slc: f64,
}

impl CompensationError {
    pub fn reduction(&self) -> f64 {
        self.mean_lds / self.mean_slc
    }
}

/// Compares lossless and compensated exchanges with the exact one over a
/// DER grid. Non-converged grid points are skipped.
pub fn compensation_error(
    f: &FeederModel,
    resolution: usize,
    sweep: &SweepOptions,
    exec: Execution,
) -> Result<CompensationError> {
    let ps = grid_axis(f.net.der.p_bounds, resolution);
    let qs = grid_axis(f.net.der.q_bounds, resolution);
    let nq = qs.len();
    let rows = exec.map_range(ps.len() * nq, |i| -> Result<Option<(f64, f64)>> {
        let der = [ps[i / nq], qs[i % nq]];
        let Ok(sol) = sweep_solve(&f.net, der, sweep) else {
            return Ok(None);
        };
        let u = f.model.exchange_for_der(der)?;
        let exact = sol.exchange();
        Ok(Some((dist(u, exact), dist(f.loss.compensate(u), exact))))
    });
    let mut n = 0usize;
    let (mut lds, mut slc) = (0.0, 0.0);
    for r in rows {
        if let Some((a, b)) = r? {
            n += 1;
            lds += a;
            slc += b;
        }
    }
    let n_f = n.max(1) as f64;
    Ok(CompensationError { samples: n, mean_lds: lds / n_f, mean_slc: slc / n_f })
}

#[derive(Debug, Clone)]
pub struct Aggregation {
    pub feeder: FeederModel,
    pub slc: FlexPolygon,
    pub cloud: ExactFlexCloud,
    /// Exact hull boundary measured against each region; `None` when the
    /// region is degenerate.
    pub lds_metrics: Option<PolygonMetrics>,
    pub slc_metrics: Option<PolygonMetrics>,
}

/// Densified exact-hull boundary used as the probe set for the metrics.
pub fn hull_probe(cloud: &ExactFlexCloud, max_edge: f64) -> Vec<Point> {
    densify_boundary(&cloud.hull, max_edge).vertices
}

pub fn aggregate(net: RadialNetwork, opts: &AggregateOptions) -> Result<Aggregation> {
    let feeder = FeederModel::build(net, opts)?;
    let slc = feeder.slc(opts.max_edge)?;
    let cloud = exact_flex_cloud(&feeder.net, opts.resolution, &opts.sweep, opts.exec)?;
    let probe = hull_probe(&cloud, opts.max_edge);
    Ok(Aggregation {
        lds_metrics: polygon_metrics(&feeder.lds, &probe).ok(),
        slc_metrics: polygon_metrics(&slc, &probe).ok(),
        feeder,
        slc,
        cloud,
    })
}
