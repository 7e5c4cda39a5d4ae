//! Run configuration: an optional TOML scenario file, overridden by flags.

use std::path::{Path, PathBuf};

use flexagg::coordination::{default_der_prices, Method};
use flexagg::distflow::Denominator;
use flexagg::FlexError;
use serde::Deserialize;

/// Scenario file contents. Every key is optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub case: Option<PathBuf>,
    pub feeder_dir: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub der_fraction: Option<f64>,
    pub resolution: Option<usize>,
    pub reference_resolution: Option<usize>,
    pub max_edge: Option<f64>,
    pub thresholds: Option<(f64, f64)>,
    pub include_zero_load: Option<bool>,
    pub prices: Option<Vec<f64>>,
    pub methods: Option<Vec<String>>,
    pub denominator: Option<String>,
    pub q_weight: Option<f64>,
    #[serde(default)]
    pub tolerances: Tolerances,
}

#[derive(Debug, Clone, Copy, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    /// Bound excess recorded as a violation.
    pub violation: Option<f64>,
    /// Bound excess counted in reports and charts.
    pub report: Option<f64>,
    pub fixed_point: Option<f64>,
    pub max_iter: Option<usize>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, FlexError> {
        let text = std::fs::read_to_string(path).map_err(|e| FlexError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        toml::from_str(&text).map_err(|e| FlexError::Config(format!("{}: {e}", path.display())))
    }
}

/// Fully resolved settings shared by all commands.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub case: PathBuf,
    pub feeder_dir: PathBuf,
    pub out: PathBuf,
    pub der_fraction: f64,
    pub resolution: usize,
    pub reference_resolution: usize,
    pub max_edge: f64,
    pub thresholds: (f64, f64),
    pub include_zero_load: bool,
    pub prices: Vec<f64>,
    pub methods: Vec<Method>,
    pub denominator: Denominator,
    pub q_weight: f64,
    pub violation_tol: f64,
    pub report_tol: f64,
    pub fixed_point_tol: f64,
    pub max_iter: usize,
    pub export_cloud: bool,
}

/// Values given on the command line; `None` falls back to the file, then the default.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub case: Option<PathBuf>,
    pub feeder_dir: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub der_fraction: Option<f64>,
    pub resolution: Option<usize>,
    pub thresholds: Option<(f64, f64)>,
    pub prices: Option<Vec<f64>>,
    pub methods: Option<Vec<Method>>,
    pub denominator: Option<Denominator>,
    pub export_cloud: bool,
}

impl RunConfig {
    pub fn resolve(file: FileConfig, cli: Overrides) -> Result<Self, FlexError> {
        let case = cli
            .case
            .or(file.case)
            .ok_or_else(|| FlexError::Config("no case given (use --case or `case` in the config file)".into()))?;
        let methods = match (cli.methods, file.methods) {
            (Some(m), _) => m,
            (None, Some(names)) => names.iter().map(|s| s.parse()).collect::<Result<_, _>>()?,
            (None, None) => Method::ALL.to_vec(),
        };
        let denominator = match (cli.denominator, file.denominator) {
            (Some(d), _) => d,
            (None, Some(s)) => s.parse()?,
            (None, None) => Denominator::default(),
        };
        let feeder_dir = cli
            .feeder_dir
            .or(file.feeder_dir)
            .unwrap_or_else(|| case.parent().map(Path::to_path_buf).unwrap_or_default());
        let t = file.tolerances;
        let cfg = Self {
            feeder_dir,
            out: cli.out.or(file.out).unwrap_or_else(|| PathBuf::from("out")),
            der_fraction: cli.der_fraction.or(file.der_fraction).unwrap_or(0.5),
            resolution: cli.resolution.or(file.resolution).unwrap_or(101),
            reference_resolution: file.reference_resolution.unwrap_or(101),
            max_edge: file.max_edge.unwrap_or(0.01),
            thresholds: cli.thresholds.or(file.thresholds).unwrap_or((5.0, 15.0)),
            include_zero_load: file.include_zero_load.unwrap_or(true),
            prices: cli.prices.or(file.prices).unwrap_or_else(default_der_prices),
            methods,
            denominator,
            q_weight: file.q_weight.unwrap_or(1.0),
            violation_tol: t.violation.unwrap_or(1e-6),
            report_tol: t.report.unwrap_or(1e-3),
            fixed_point_tol: t.fixed_point.unwrap_or(1e-8),
            max_iter: t.max_iter.unwrap_or(20),
            export_cloud: cli.export_cloud,
            case,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), FlexError> {
        let bad = |msg: String| Err(FlexError::Config(msg));
        if !(0.0..=1.0).contains(&self.der_fraction) {
            return bad(format!("DER fraction {} is outside [0, 1]", self.der_fraction));
        }
        if self.resolution < 2 || self.reference_resolution < 2 {
            return bad("grid resolutions must be at least 2".into());
        }
        let (lo, hi) = self.thresholds;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return bad(format!("thresholds ({lo}, {hi}) must be finite with low <= high"));
        }
        if self.prices.is_empty() || self.prices.iter().any(|p| !p.is_finite()) {
            return bad("price list must be non-empty and finite".into());
        }
        if self.methods.is_empty() {
            return bad("no method selected".into());
        }
        if !(self.max_edge > 0.0) {
            return bad(format!("max_edge {} must be positive", self.max_edge));
        }
        for tol in [self.violation_tol, self.report_tol, self.fixed_point_tol] {
            if !(tol > 0.0) {
                return bad(format!("tolerance {tol} must be positive"));
            }
        }
        if !self.case.is_file() {
            return Err(FlexError::Io {
                path: self.case.display().to_string(),
                message: "case file not found".into(),
            });
        }
        Ok(())
    }
}
