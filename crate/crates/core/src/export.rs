//! CSV and SVG writers. Output depends only on the data passed in: numbers
//! use Rust's shortest round-trip formatting in CSV and fixed precision in SVG.

use std::fmt::Write as _;

use crate::coordination::DispatchResult;
use crate::distflow::ExactFlexCloud;
use crate::geometry::{FlexPolygon, Point};

pub fn polygon_csv(poly: &FlexPolygon) -> String {
    let mut s = String::from("p,q\n");
    for v in &poly.vertices {
        let _ = writeln!(s, "{},{}", v[0], v[1]);
    }
    s
}

pub fn cloud_csv(cloud: &ExactFlexCloud) -> String {
    let mut s = String::from("pg,qg,p_pcc,q_pcc,feasible,tags,iterations,residual\n");
    for c in &cloud.samples {
        let tags: Vec<&str> = c.tags.iter().map(|t| t.as_str()).collect();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            c.der[0],
            c.der[1],
            c.exchange[0],
            c.exchange[1],
            c.feasible,
            tags.join(";"),
            c.iterations,
            c.residual
        );
    }
    s
}

/// Per-feeder descriptor used to label dispatch rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FeederLabel {
    pub bus_id: usize,
    pub case: String,
}

fn tag_list(r: &DispatchResult, i: usize) -> String {
    let mut tags: Vec<String> = r.violations[i]
        .iter()
        .map(|v| {
            if v.element > 0 {
                format!("{}@{}", v.tag.as_str(), v.element)
            } else {
                v.tag.as_str().to_string()
            }
        })
        .collect();
    tags.dedup();
    tags.join(";")
}

pub fn dispatch_csv(results: &[DispatchResult], labels: &[FeederLabel]) -> String {
    let mut s = String::from(
        "method,feeder,bus,case,p_lds,q_lds,p_pcc,q_pcc,pg,qg,cost,cost_gap,violations,max_violation,tags\n",
    );
    for r in results {
        for i in 0..r.n_feeder() {
            let (bus, case) = labels.get(i).map_or((0, ""), |l| (l.bus_id, l.case.as_str()));
            let max = r.violations[i].iter().map(|v| v.magnitude).fold(0.0, f64::max);
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.method,
                i + 1,
                bus,
                case,
                r.lds_exchanges[i][0],
                r.lds_exchanges[i][1],
                r.exchanges[i][0],
                r.exchanges[i][1],
                r.der_setpoints[i][0],
                r.der_setpoints[i][1],
                r.feeder_cost[i],
                r.feeder_gap[i],
                r.violations[i].len(),
                max,
                tag_list(r, i)
            );
        }
    }
    s
}

/// One row per method with system totals.
pub fn summary_csv(results: &[DispatchResult], tol: f64) -> String {
    let mut s = String::from("method,cost_total,cost_gap,iterations,violations,max_violation\n");
    for r in results {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.method,
            r.cost_total,
            r.cost_gap,
            r.iterations,
            r.violation_count(tol),
            r.max_violation()
        );
    }
    s
}

/// Rows of a single-feeder price sweep, one per (method, price).
pub fn price_sweep_csv(prices: &[f64], runs: &[Vec<DispatchResult>]) -> String {
    let mut s = String::from("method,price,p_pcc,q_pcc,pg,qg,cost_total,violations,max_violation,tags\n");
    for run in runs {
        for (p, r) in prices.iter().zip(run) {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                r.method,
                p,
                r.exchanges[0][0],
                r.exchanges[0][1],
                r.der_setpoints[0][0],
                r.der_setpoints[0][1],
                r.cost_total,
                r.violations[0].len(),
                r.max_violation(),
                tag_list(r, 0)
            );
        }
    }
    s
}

pub const RED: &str = "#d62728";
pub const GREEN: &str = "#2ca02c";
pub const BLUE: &str = "#1f77b4";
pub const BLACK: &str = "#000000";

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Marker {
    Cross,
    Square,
    Triangle,
    Dot,
}

/// Minimal scatter/region plot in data coordinates.
#[derive(Debug, Clone)]
pub struct SvgPlot {
    width: f64,
    height: f64,
    margin: f64,
    lo: Point,
    hi: Point,
    title: String,
    x_label: String,
    y_label: String,
    body: String,
    legend: Vec<(String, String)>,
}

impl SvgPlot {
    pub fn new(title: &str, x_label: &str, y_label: &str) -> Self {
        Self {
            width: 640.0,
            height: 480.0,
            margin: 60.0,
            lo: [f64::INFINITY; 2],
            hi: [f64::NEG_INFINITY; 2],
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            body: String::new(),
            legend: Vec::new(),
        }
    }

    /// Grows the data window to include `pts`. Call for every layer before drawing.
    pub fn fit(&mut self, pts: &[Point]) {
        for p in pts.iter().filter(|p| p[0].is_finite() && p[1].is_finite()) {
            for k in 0..2 {
                self.lo[k] = self.lo[k].min(p[k]);
                self.hi[k] = self.hi[k].max(p[k]);
            }
        }
    }

    fn window(&self) -> (Point, Point) {
        let mut lo = self.lo;
        let mut hi = self.hi;
        for k in 0..2 {
            if !lo[k].is_finite() {
                lo[k] = 0.0;
                hi[k] = 1.0;
            }
            let pad = ((hi[k] - lo[k]) * 0.05).max(1e-6);
            lo[k] -= pad;
            hi[k] += pad;
        }
        (lo, hi)
    }

    fn map(&self, p: Point) -> (f64, f64) {
        let (lo, hi) = self.window();
        let w = self.width - 2.0 * self.margin;
        let h = self.height - 2.0 * self.margin;
        (
            self.margin + (p[0] - lo[0]) / (hi[0] - lo[0]) * w,
            self.height - self.margin - (p[1] - lo[1]) / (hi[1] - lo[1]) * h,
        )
    }

    fn points_attr(&self, pts: &[Point]) -> String {
        pts.iter()
            .filter(|p| p[0].is_finite() && p[1].is_finite())
            .map(|&p| {
                let (x, y) = self.map(p);
                format!("{x:.2},{y:.2}")
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn region(&mut self, poly: &FlexPolygon, color: &str, label: &str) {
        let pts = self.points_attr(&poly.vertices);
        let _ = writeln!(
            self.body,
            r#"<polygon points="{pts}" fill="{color}" fill-opacity="0.35" stroke="{color}" stroke-width="1"/>"#
        );
        self.legend.push((color.into(), label.into()));
    }

    pub fn outline(&mut self, poly: &FlexPolygon, color: &str, label: &str) {
        let pts = self.points_attr(&poly.vertices);
        let _ = writeln!(
            self.body,
            r#"<polygon points="{pts}" fill="none" stroke="{color}" stroke-width="1.5" stroke-dasharray="5,3"/>"#
        );
        self.legend.push((color.into(), label.into()));
    }

    pub fn markers(&mut self, pts: &[Point], marker: Marker, color: &str, label: &str) {
        for &p in pts.iter().filter(|p| p[0].is_finite() && p[1].is_finite()) {
            let (x, y) = self.map(p);
            let el = match marker {
                Marker::Cross => format!(
                    r#"<path d="M{:.2},{:.2}L{:.2},{:.2}M{:.2},{:.2}L{:.2},{:.2}" stroke="{color}" stroke-width="2"/>"#,
                    x - 5.0, y - 5.0, x + 5.0, y + 5.0, x - 5.0, y + 5.0, x + 5.0, y - 5.0
                ),
                Marker::Square => format!(
                    r#"<rect x="{:.2}" y="{:.2}" width="9" height="9" fill="none" stroke="{color}" stroke-width="2"/>"#,
                    x - 4.5, y - 4.5
                ),
                Marker::Triangle => format!(
                    r#"<path d="M{:.2},{:.2}L{:.2},{:.2}L{:.2},{:.2}Z" fill="none" stroke="{color}" stroke-width="2"/>"#,
                    x, y - 6.0, x + 5.5, y + 4.0, x - 5.5, y + 4.0
                ),
                Marker::Dot => format!(r#"<circle cx="{x:.2}" cy="{y:.2}" r="1.2" fill="{color}"/>"#),
            };
            self.body.push_str(&el);
            self.body.push('\n');
        }
        self.legend.push((color.into(), label.into()));
    }

    fn axes(&self) -> String {
        let (lo, hi) = self.window();
        let mut s = String::new();
        let (x0, y0) = (self.margin, self.height - self.margin);
        let (x1, y1) = (self.width - self.margin, self.margin);
        let _ = writeln!(
            s,
            r#"<rect x="{x0}" y="{y1}" width="{}" height="{}" fill="none" stroke="{BLACK}"/>"#,
            x1 - x0,
            y0 - y1
        );
        for k in 0..=4 {
            let t = k as f64 / 4.0;
            let vx = lo[0] + t * (hi[0] - lo[0]);
            let vy = lo[1] + t * (hi[1] - lo[1]);
            let (px, _) = self.map([vx, lo[1]]);
            let (_, py) = self.map([lo[0], vy]);
            let _ = writeln!(
                s,
                r#"<text x="{px:.2}" y="{:.2}" font-size="11" text-anchor="middle">{vx:.3}</text>"#,
                y0 + 16.0
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{py:.2}" font-size="11" text-anchor="end">{vy:.3}</text>"#,
                x0 - 4.0
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="13" text-anchor="middle">{}</text>"#,
            self.width / 2.0,
            self.height - 16.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="16" y="{:.2}" font-size="13" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
            self.height / 2.0,
            self.height / 2.0,
            escape(&self.y_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="24" font-size="15" text-anchor="middle">{}</text>"#,
            self.width / 2.0,
            escape(&self.title)
        );
        for (i, (color, label)) in self.legend.iter().enumerate() {
            let y = self.margin + 14.0 + 16.0 * i as f64;
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="10" height="10" fill="{color}"/><text x="{:.2}" y="{:.2}" font-size="11">{}</text>"#,
                x0 + 8.0,
                y - 9.0,
                x0 + 22.0,
                y,
                escape(label)
            );
        }
        s
    }

    pub fn render(&self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" viewBox=\"0 0 {} {}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{}{}</svg>\n",
            self.width,
            self.height,
            self.width,
            self.height,
            self.body,
            self.axes()
        )
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Red lossless region, green compensated region, dashed exact hull.
pub fn overlay_svg(title: &str, lds: &FlexPolygon, slc: &FlexPolygon, hull: &FlexPolygon) -> String {
    let mut plot = SvgPlot::new(title, "p_pcc (p.u.)", "q_pcc (p.u.)");
    for p in [lds, slc, hull] {
        plot.fit(&p.vertices);
    }
    plot.region(lds, RED, "U_LDS");
    plot.region(slc, GREEN, "U_SLC");
    plot.outline(hull, BLUE, "exact hull");
    plot.render()
}

/// Two stacked bar panels per feeder: relative cost gap (log scale) and
/// violation count above `tol`, one bar colour per method.
pub fn gap_chart_svg(title: &str, results: &[DispatchResult], labels: &[FeederLabel], tol: f64) -> String {
    let nf = results.first().map_or(0, |r| r.n_feeder());
    let (width, panel, margin) = (40.0 + 22.0 * nf as f64 + 80.0, 200.0, 50.0);
    let height = 2.0 * panel + 3.0 * margin;
    let colors = |r: &DispatchResult| match r.method {
        crate::coordination::Method::Lds => RED,
        crate::coordination::Method::Slc => GREEN,
        crate::coordination::Method::Reference => BLUE,
    };
    let shown: Vec<&DispatchResult> = results.iter().filter(|r| r.method != crate::coordination::Method::Reference).collect();
    let bar = 18.0 / shown.len().max(1) as f64;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" viewBox=\"0 0 {width:.0} {height:.0}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="22" font-size="15" text-anchor="middle">{}</text>"#,
        width / 2.0,
        escape(title)
    );
    // gap panel: log10 from 1e-6 to 1e1
    let (g_lo, g_hi) = (-6.0, 1.0);
    let top0 = margin;
    let base0 = margin + panel;
    let max_count = shown
        .iter()
        .flat_map(|r| (0..nf).map(move |i| r.feeder_violation_count(i, tol)))
        .max()
        .unwrap_or(0)
        .max(1) as f64;
    let top1 = 2.0 * margin + panel;
    let base1 = top1 + panel;
    for (y0, y1) in [(top0, base0), (top1, base1)] {
        let _ = writeln!(
            s,
            r#"<rect x="60" y="{y0}" width="{:.2}" height="{}" fill="none" stroke="{BLACK}"/>"#,
            22.0 * nf as f64,
            y1 - y0
        );
    }
    for e in (g_lo as i32)..=(g_hi as i32) {
        let y = base0 - (e as f64 - g_lo) / (g_hi - g_lo) * panel;
        let _ = writeln!(s, r#"<text x="56" y="{y:.2}" font-size="10" text-anchor="end">1e{e}</text>"#);
    }
    let _ = writeln!(s, r#"<text x="56" y="{top1:.2}" font-size="10" text-anchor="end">{max_count:.0}</text>"#);
    let _ = writeln!(s, r#"<text x="56" y="{base1:.2}" font-size="10" text-anchor="end">0</text>"#);
    let _ = writeln!(s, r#"<text x="64" y="{:.2}" font-size="12">|f − f*| / f*</text>"#, top0 - 6.0);
    let _ = writeln!(s, r#"<text x="64" y="{:.2}" font-size="12">violations &gt; {tol:e}</text>"#, top1 - 6.0);
    for i in 0..nf {
        let x = 60.0 + 22.0 * i as f64 + 2.0;
        for (k, r) in shown.iter().enumerate() {
            let c = colors(r);
            let gap = r.feeder_gap[i].max(1e-12).log10().clamp(g_lo, g_hi);
            let h = (gap - g_lo) / (g_hi - g_lo) * panel;
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{bar:.2}" height="{h:.2}" fill="{c}"/>"#,
                x + bar * k as f64,
                base0 - h
            );
            let h = r.feeder_violation_count(i, tol) as f64 / max_count * panel;
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{bar:.2}" height="{h:.2}" fill="{c}"/>"#,
                x + bar * k as f64,
                base1 - h
            );
        }
        if let Some(l) = labels.get(i) {
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" font-size="9" text-anchor="end" transform="rotate(-60 {:.2} {:.2})">{} {}</text>"#,
                x + 9.0,
                base1 + 12.0,
                x + 9.0,
                base1 + 12.0,
                l.bus_id,
                escape(&l.case)
            );
        }
    }
    for (k, r) in shown.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<rect x="{:.2}" y="{:.2}" width="10" height="10" fill="{}"/><text x="{:.2}" y="{:.2}" font-size="11">{}</text>"#,
            width - 70.0,
            margin + 16.0 * k as f64,
            colors(r),
            width - 56.0,
            margin + 9.0 + 16.0 * k as f64,
            r.method
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Price-sweep markers over the three regions, as in the dispatch row of the figure.
pub fn dispatch_svg(
    title: &str,
    lds: &FlexPolygon,
    slc: &FlexPolygon,
    hull: &FlexPolygon,
    runs: &[Vec<DispatchResult>],
) -> String {
    let mut plot = SvgPlot::new(title, "p_pcc (p.u.)", "q_pcc (p.u.)");
    for p in [lds, slc, hull] {
        plot.fit(&p.vertices);
    }
    let points: Vec<(crate::coordination::Method, Vec<Point>)> = runs
        .iter()
        .filter_map(|run| run.first().map(|r| (r.method, run.iter().map(|r| r.exchanges[0]).collect())))
        .collect();
    for (_, pts) in &points {
        plot.fit(pts);
    }
    plot.region(lds, RED, "U_LDS");
    plot.region(slc, GREEN, "U_SLC");
    plot.outline(hull, BLUE, "exact hull");
    for (m, pts) in &points {
        let (marker, color) = match m {
            crate::coordination::Method::Reference => (Marker::Cross, BLUE),
            crate::coordination::Method::Lds => (Marker::Square, RED),
            crate::coordination::Method::Slc => (Marker::Triangle, GREEN),
        };
        plot.markers(pts, marker, color, m.as_str());
    }
    plot.render()
}
