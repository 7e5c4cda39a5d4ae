use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use flexagg::aggregate::{aggregate, compensation_error, AggregateOptions, Aggregation};
use flexagg::coordination::{
    build_fleet, class_counts, coordinate_methods, default_tso_cost, price_sweep_dispatch, AttachOptions,
    CoordinateOptions, FeederClass,
};
use flexagg::distflow::SweepOptions;
use flexagg::export::{
    cloud_csv, dispatch_csv, dispatch_svg, gap_chart_svg, overlay_svg, polygon_csv, price_sweep_csv, summary_csv,
    FeederLabel,
};
use flexagg::matpower::{read_case, to_radial_network, FeederOptions, RawCase};
use flexagg::{Execution, FlexError, Result};

use crate::config::RunConfig;

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| FlexError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn prepare_out(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out).map_err(|e| FlexError::Io {
        path: cfg.out.display().to_string(),
        message: e.to_string(),
    })
}

fn sweep(cfg: &RunConfig) -> SweepOptions {
    SweepOptions {
        denominator: cfg.denominator,
        ..Default::default()
    }
}

fn aggregate_options(cfg: &RunConfig) -> AggregateOptions {
    AggregateOptions {
        resolution: cfg.resolution,
        max_edge: cfg.max_edge,
        sweep: sweep(cfg),
        ..Default::default()
    }
}

fn coordinate_options(cfg: &RunConfig) -> CoordinateOptions {
    CoordinateOptions {
        tol: cfg.fixed_point_tol,
        max_iter: cfg.max_iter,
        reference_resolution: cfg.reference_resolution,
        q_weight: cfg.q_weight,
        sweep: sweep(cfg),
        violation_tol: cfg.violation_tol,
        ..Default::default()
    }
}

fn aggregate_case(cfg: &RunConfig) -> Result<Aggregation> {
    let case = read_case(&cfg.case)?;
    let net = to_radial_network(&case, &FeederOptions::with_fraction(cfg.der_fraction))?;
    aggregate(net, &aggregate_options(cfg))
}

/// Writes the lossless vertices, loss record, compensated boundary and the
/// overlay figure, plus the classified cloud when asked. Returns the report.
pub fn cmd_aggregate(cfg: &RunConfig) -> Result<String> {
    let agg = aggregate_case(cfg)?;
    prepare_out(cfg)?;
    let name = agg.feeder.net.name.clone();
    write(&cfg.out, "lds_vertices.csv", &polygon_csv(&agg.feeder.lds))?;
    write(&cfg.out, "loss_record.csv", &agg.feeder.loss.record().to_csv())?;
    write(&cfg.out, "slc_boundary.csv", &polygon_csv(&agg.slc))?;
    write(
        &cfg.out,
        "overlay.svg",
        &overlay_svg(&name, &agg.feeder.lds, &agg.slc, &agg.cloud.hull),
    )?;
    if cfg.export_cloud {
        write(&cfg.out, "cloud.csv", &cloud_csv(&agg.cloud))?;
    }

    let err = compensation_error(&agg.feeder, 21, &aggregate_options(cfg).sweep, Execution::Parallel)?;
    let feasible = agg.cloud.samples.iter().filter(|s| s.feasible).count();
    let mut s = String::new();
    let _ = writeln!(s, "{name}: {} buses, DER at bus {}", agg.feeder.net.n_bus(), agg.feeder.net.bus_ids[agg.feeder.net.der.bus]);
    let _ = writeln!(
        s,
        "  U_LDS {} vertices, area {:.4e}; U_SLC {} vertices, area {:.4e}; exact hull area {:.4e}",
        agg.feeder.lds.len(),
        agg.feeder.lds.area(),
        agg.slc.len(),
        agg.slc.area(),
        agg.cloud.hull.area()
    );
    let _ = writeln!(s, "  cloud: {feasible}/{} feasible samples", agg.cloud.samples.len());
    for (label, m) in [("lds", agg.lds_metrics), ("slc", agg.slc_metrics)] {
        if let Some(m) = m {
            let _ = writeln!(
                s,
                "  {label}: Hausdorff {:.4e}, containment {:.3}, area {:.4e}",
                m.hausdorff, m.containment, m.area
            );
        }
    }
    let _ = writeln!(
        s,
        "  mean exchange error over 21x21 DER grid: lds {:.4e}, slc {:.4e} ({:.2}x)",
        err.mean_lds,
        err.mean_slc,
        err.reduction()
    );
    Ok(s)
}

/// Single-feeder price sweep for every configured method.
pub fn cmd_dispatch(cfg: &RunConfig) -> Result<String> {
    let mut agg = aggregate_case(cfg)?;
    agg.feeder.net.der.cost = flexagg::coordination::default_der_cost(&agg.feeder.net);
    let tso_cost = default_tso_cost(&agg.feeder.net);
    let opts = coordinate_options(cfg);
    let runs = cfg
        .methods
        .iter()
        .map(|&m| price_sweep_dispatch(&agg.feeder, tso_cost, &cfg.prices, m, &opts))
        .collect::<Result<Vec<_>>>()?;
    prepare_out(cfg)?;
    let name = agg.feeder.net.name.clone();
    write(&cfg.out, "price_sweep.csv", &price_sweep_csv(&cfg.prices, &runs))?;
    write(
        &cfg.out,
        "dispatch.svg",
        &dispatch_svg(&name, &agg.feeder.lds, &agg.slc, &agg.cloud.hull, &runs),
    )?;

    let mut s = format!("{name}: TSO marginal {:.1} $/MWh at zero import\n", tso_cost.c1);
    for run in &runs {
        for (price, r) in cfg.prices.iter().zip(run) {
            let e = r.exchanges[0];
            let _ = writeln!(
                s,
                "  {:<9} price {price:>7.2}: pcc ({:.5}, {:.5}), {} violations above {:e}",
                r.method.as_str(),
                e[0],
                e[1],
                r.violation_count(cfg.report_tol),
                cfg.report_tol
            );
        }
    }
    Ok(s)
}

/// Multi-feeder coordination on a transmission case.
pub fn cmd_coordinate(cfg: &RunConfig) -> Result<String> {
    let tso_case = read_case(&cfg.case)?;
    let templates: BTreeMap<FeederClass, RawCase> = FeederClass::ALL
        .iter()
        .map(|&k| Ok((k, read_case(&cfg.feeder_dir.join(format!("{}.m", k.template())))?)))
        .collect::<Result<_>>()?;
    let attach = AttachOptions {
        thresholds: cfg.thresholds,
        include_zero_load: cfg.include_zero_load,
    };
    let fleet = build_fleet(
        &tso_case,
        &templates,
        &attach,
        &FeederOptions::with_fraction(cfg.der_fraction),
        &aggregate_options(cfg),
    )?;
    let results = coordinate_methods(&fleet.tso, &fleet.feeders, &cfg.methods, &coordinate_options(cfg))?;
    let labels: Vec<FeederLabel> = fleet
        .plan
        .iter()
        .map(|a| FeederLabel {
            bus_id: a.bus_id,
            case: a.class.template().to_string(),
        })
        .collect();
    prepare_out(cfg)?;
    write(&cfg.out, "dispatch.csv", &dispatch_csv(&results, &labels))?;
    write(&cfg.out, "summary.csv", &summary_csv(&results, cfg.report_tol))?;
    write(
        &cfg.out,
        "gaps.svg",
        &gap_chart_svg(&tso_case.name, &results, &labels, cfg.report_tol),
    )?;

    let counts = class_counts(&fleet.plan);
    let mut s = format!("{}: {} feeders (", tso_case.name, fleet.plan.len());
    let parts: Vec<String> = FeederClass::ALL
        .iter()
        .map(|k| format!("{} {}", counts.get(k).copied().unwrap_or(0), k.template()))
        .collect();
    let _ = writeln!(s, "{})", parts.join(", "));
    for r in &results {
        let tags: Vec<String> = r
            .tag_counts(cfg.report_tol)
            .iter()
            .map(|(t, n)| format!("{t} {n}"))
            .collect();
        let _ = writeln!(
            s,
            "  {:<9} cost {:.4} $/h, gap {:.3e}, {} iterations, {} violations above {:e} [{}]",
            r.method.as_str(),
            r.cost_total,
            r.cost_gap,
            r.iterations,
            r.violation_count(cfg.report_tol),
            cfg.report_tol,
            tags.join(", ")
        );
    }
    Ok(s)
}
