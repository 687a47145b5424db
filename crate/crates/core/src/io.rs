//! Run configuration, price calibration and CSV/JSON output.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::contract::RebateReport;
use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::policy::network::FeatureScaling;
use crate::policy::{train_with, IterationStats, PolicyNetwork, TrainConfig};
use crate::search::{baseline_report, evaluate_policy, fee_grid, sweep_fee_with, SweepResult};
use crate::sim::{PathBatch, TrajectoryPoint};
use crate::stats::MeanSe;

/// Environment variable naming the default output root.
pub const OUTPUT_ENV: &str = "REBATE_LAB_OUT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Apple,
    Alphabet,
}

impl Preset {
    pub fn params(self) -> ModelParams {
        match self {
            Preset::Apple => ModelParams::apple(),
            Preset::Alphabet => ModelParams::alphabet(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub enabled: bool,
    pub grid: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            grid: fee_grid(0.0, 6.0, 0.5),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    /// Paths per evaluation batch; at least the training batch size.
    pub paths: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self { paths: 1024 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationConfig {
    pub price_csv: PathBuf,
    /// Length of one bar in model time units.
    #[serde(default = "one")]
    pub bar_interval: f64,
}

fn one() -> f64 {
    1.0
}

/// Fully resolved experiment configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelParams,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
    pub evaluation: EvaluationConfig,
    pub output_dir: Option<PathBuf>,
    pub emit_trajectories: bool,
    pub calibration: Option<CalibrationConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelParams::apple(),
            train: TrainConfig::default(),
            sweep: SweepConfig::default(),
            evaluation: EvaluationConfig::default(),
            output_dir: None,
            emit_trajectories: true,
            calibration: None,
        }
    }
}

/// Config file as written: `preset` picks the base parameters and `[model]`
/// overrides any subset of them.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    preset: Option<Preset>,
    #[serde(default)]
    model: toml::Table,
    #[serde(default)]
    train: TrainConfig,
    #[serde(default)]
    sweep: SweepConfig,
    #[serde(default)]
    evaluation: EvaluationConfig,
    output_dir: Option<PathBuf>,
    #[serde(default = "yes")]
    emit_trajectories: bool,
    calibration: Option<CalibrationConfig>,
}

fn yes() -> bool {
    true
}

impl RunConfig {
    /// Parses TOML config text. Relative paths are taken relative to `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let base = raw.preset.unwrap_or(Preset::Apple).params();
        let mut table = toml::Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        for (k, v) in raw.model {
            table.insert(k, v);
        }
        let model: ModelParams = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("[model]: {e}")))?;
        let rebase = |p: PathBuf| if p.is_relative() { base_dir.join(p) } else { p };
        let cfg = RunConfig {
            model,
            train: raw.train,
            sweep: raw.sweep,
            evaluation: raw.evaluation,
            output_dir: raw.output_dir.map(rebase),
            emit_trajectories: raw.emit_trajectories,
            calibration: raw.calibration.map(|c| CalibrationConfig {
                price_csv: rebase(c.price_csv),
                ..c
            }),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a TOML config, or the `config` echoed in a run manifest when the
    /// file ends in `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e == "json") {
            let manifest: Manifest =
                serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
            manifest.config.validate()?;
            return Ok(manifest.config);
        }
        let dir = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, dir)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.evaluation.paths < self.train.batch_size.max(1) {
            return Err(Error::InvalidParams {
                field: "evaluation.paths",
                reason: format!(
                    "{} is below the training batch size {}",
                    self.evaluation.paths, self.train.batch_size
                ),
            });
        }
        if let Some(c) = &self.calibration {
            if !(c.bar_interval > 0.0 && c.bar_interval.is_finite()) {
                return Err(Error::InvalidParams {
                    field: "calibration.bar_interval",
                    reason: "must be > 0".into(),
                });
            }
        }
        Ok(())
    }

    /// Sets the model seed (evaluation batches) and the training seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.model.rng_seed = seed;
        self.train.seed = seed;
        self
    }
}

/// Output directory: command-line flag, then config, then `$REBATE_LAB_OUT`,
/// then `out`.
pub fn resolve_output_dir(
    flag: Option<&Path>,
    config: Option<&Path>,
    env: Option<&str>,
) -> PathBuf {
    flag.or(config)
        .map(Path::to_path_buf)
        .or_else(|| env.filter(|s| !s.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub p0_star: f64,
    pub sigma: f64,
    pub rows: usize,
}

/// `P0* = last close`, `sigma = sample SD of close-to-close changes / sqrt(bar_interval)`.
///
/// Expects a header row with a `date` and a `close` column (any case; extra
/// columns are ignored) and at least 30 data rows. Row numbers in errors
/// count the header as row 1.
pub fn calibrate(price_csv: &Path, bar_interval: f64) -> Result<Calibration> {
    let malformed = |row: usize, reason: String| Error::MalformedInput {
        path: price_csv.to_path_buf(),
        row,
        reason,
    };
    let file = fs::File::open(price_csv).map_err(|e| Error::io(price_csv, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| malformed(1, e.to_string()))?
        .clone();
    let find = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let (Some(date_col), Some(close_col)) = (find("date"), find("close")) else {
        return Err(malformed(
            1,
            "header needs `date` and `close` columns".into(),
        ));
    };
    let mut closes = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| malformed(row, e.to_string()))?;
        if rec.get(date_col).is_none_or(str::is_empty) {
            return Err(malformed(row, "missing date".into()));
        }
        let field = rec.get(close_col).unwrap_or("");
        let close: f64 = field
            .parse()
            .map_err(|_| malformed(row, format!("close `{field}` is not a number")))?;
        if !close.is_finite() {
            return Err(malformed(row, format!("close `{field}` is not finite")));
        }
        closes.push(close);
    }
    if closes.len() < 30 {
        return Err(malformed(
            closes.len() + 1,
            format!("need at least 30 price rows, found {}", closes.len()),
        ));
    }
    let diffs: Vec<f64> = closes.windows(2).map(|w| w[1] - w[0]).collect();
    let sd = MeanSe::from_slice(&diffs).se * (diffs.len() as f64).sqrt();
    Ok(Calibration {
        p0_star: *closes.last().expect("at least 30 rows"),
        sigma: sd / bar_interval.sqrt(),
        rows: closes.len(),
    })
}

/// Contents of `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub config: RunConfig,
    pub model_seed: u64,
    pub train_seed: u64,
    pub feature_scaling: FeatureScaling,
    pub calibration: Option<Calibration>,
    /// Fee of the reported policy: the sweep minimiser or the configured `d`.
    pub d: f64,
    pub d_hat: Option<f64>,
    pub d_hat_interior: Option<bool>,
    pub files: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub d: f64,
    pub sweep: Option<SweepResult>,
    pub no_incentive: RebateReport,
    pub with_incentive: RebateReport,
    pub files: Vec<String>,
}

struct Output {
    dir: PathBuf,
    files: Vec<String>,
}

impl Output {
    fn csv(
        &mut self,
        name: &str,
        header: &[&str],
        rows: impl IntoIterator<Item = Vec<String>>,
    ) -> Result<()> {
        let path = self.dir.join(name);
        let to_err = |e: csv::Error| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(&path, io),
            other => Error::Config(format!("{other:?}")),
        };
        let mut w = csv::Writer::from_path(&path).map_err(to_err)?;
        w.write_record(header).map_err(to_err)?;
        for row in rows {
            w.write_record(&row).map_err(to_err)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn text(&mut self, name: &str, contents: &str) -> Result<()> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
        self.files.push(name.to_string());
        Ok(())
    }
}

fn num(x: f64) -> String {
    x.to_string()
}

pub const FEE_SWEEP_HEADER: [&str; 7] = [
    "d",
    "rho",
    "rho_se",
    "spread_sq",
    "fee_revenue",
    "penalty_active",
    "failed",
];
pub const LOSS_HISTORY_HEADER: [&str; 8] = [
    "d",
    "iteration",
    "loss",
    "rho_term",
    "failed_fraction",
    "participation_active_p",
    "participation_active_q",
    "grad_norm",
];
pub const COMPARISON_HEADER: [&str; 16] = [
    "scenario",
    "d",
    "rho",
    "rho_se",
    "spread_sq",
    "spread_sq_se",
    "fee_revenue",
    "fee_revenue_se",
    "xi_p",
    "xi_p_se",
    "xi_q",
    "xi_q_se",
    "v0_p",
    "v0_q",
    "failed_fraction",
    "paths",
];

fn sweep_rows(result: &SweepResult) -> Vec<Vec<String>> {
    result
        .points
        .iter()
        .map(|pt| match pt.report {
            Some(r) => vec![
                num(pt.d),
                num(r.rho.mean),
                num(r.rho.se),
                num(r.spread_sq.mean),
                num(r.fee_revenue.mean),
                pt.penalty_active.to_string(),
                pt.failed.to_string(),
            ],
            None => vec![
                num(pt.d),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                pt.penalty_active.to_string(),
                pt.failed.to_string(),
            ],
        })
        .collect()
}

fn history_rows(d: f64, history: &[IterationStats]) -> impl Iterator<Item = Vec<String>> + '_ {
    history.iter().map(move |s| {
        vec![
            num(d),
            s.iteration.to_string(),
            num(s.loss),
            num(s.rho_term),
            num(s.failed_fraction),
            s.participation_active[0].to_string(),
            s.participation_active[1].to_string(),
            num(s.grad_norm),
        ]
    })
}

fn comparison_row(scenario: &str, d: f64, r: &RebateReport) -> Vec<String> {
    vec![
        scenario.to_string(),
        num(d),
        num(r.rho.mean),
        num(r.rho.se),
        num(r.spread_sq.mean),
        num(r.spread_sq.se),
        num(r.fee_revenue.mean),
        num(r.fee_revenue.se),
        num(r.xi_p.mean),
        num(r.xi_p.se),
        num(r.xi_q.mean),
        num(r.xi_q.se),
        num(r.v0_p.mean),
        num(r.v0_q.mean),
        num(r.failed_fraction),
        r.paths.to_string(),
    ]
}

/// One per-time series file: name, value columns, extractor.
type SeriesSpec = (&'static str, Vec<String>, fn(&TrajectoryPoint) -> Vec<f64>);

fn series_specs() -> Vec<SeriesSpec> {
    let cols = |names: &[&str]| names.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    vec![
        (
            "z_series.csv",
            (1..=7).map(|k| format!("z{k}")).collect(),
            |p| p.z.p.to_vec(),
        ),
        ("lambda_series.csv", cols(&["lambda_p", "lambda_q"]), |p| {
            vec![p.lam_p, p.lam_q]
        }),
        ("mu_series.csv", cols(&["mu_p", "mu_q"]), |p| {
            vec![p.mu_p, p.mu_q]
        }),
        (
            "investor_intensity_series.csv",
            cols(&["lambda_a", "lambda_b"]),
            |p| vec![p.lam_a, p.lam_b],
        ),
        (
            "incentive_series.csv",
            cols(&["neg_int_f_p", "neg_int_f_q", "f_p", "f_q"]),
            |p| vec![-p.int_f_p, -p.int_f_q, p.f_p, p.f_q],
        ),
        (
            "continuation_utility_series.csv",
            cols(&["y_p", "y_q"]),
            |p| vec![p.y_p, p.y_q],
        ),
    ]
}

/// Header of a series file with the given value columns.
pub fn series_header(values: &[String]) -> Vec<String> {
    std::iter::once("t".to_string())
        .chain(values.iter().flat_map(|v| [v.clone(), format!("{v}_se")]))
        .collect()
}

/// Names and headers of every series file, in output order.
pub fn series_headers() -> Vec<(&'static str, Vec<String>)> {
    series_specs()
        .into_iter()
        .map(|(n, v, _)| (n, series_header(&v)))
        .collect()
}

fn write_series(out: &mut Output, batch: &PathBatch) -> Result<()> {
    let Some(trajs) = batch.trajectories.as_ref() else {
        return Ok(());
    };
    let len = trajs.iter().map(Vec::len).min().unwrap_or(0);
    for (name, values, extract) in series_specs() {
        let header = series_header(&values);
        let rows = (0..len).map(|k| {
            let per_path: Vec<Vec<f64>> = trajs.iter().map(|tr| extract(&tr[k])).collect();
            let mut row = vec![num(trajs[0][k].t)];
            for j in 0..values.len() {
                let est = MeanSe::from_values(per_path.iter().map(|v| v[j]));
                row.push(num(est.mean));
                row.push(num(est.se));
            }
            row
        });
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        out.csv(name, &header, rows)?;
    }
    Ok(())
}

fn checkpoint_name(d: f64) -> String {
    format!("checkpoints/policy_d{d}.txt")
}

/// Runs the configured experiment into `output_dir`, reporting progress
/// through `log`.
pub fn run_config_with(
    cfg: &RunConfig,
    output_dir: &Path,
    mut log: impl FnMut(&str),
) -> Result<RunSummary> {
    cfg.validate()?;
    fs::create_dir_all(output_dir).map_err(|e| Error::io(output_dir, e))?;
    let mut out = Output {
        dir: output_dir.to_path_buf(),
        files: Vec::new(),
    };
    let mut params = cfg.model.clone();
    let calibration = match &cfg.calibration {
        Some(c) => {
            let cal = calibrate(&c.price_csv, c.bar_interval)?;
            log(&format!(
                "calibrated P0_star = {}, sigma = {}",
                cal.p0_star, cal.sigma
            ));
            params.p0_star = cal.p0_star;
            params.sigma = cal.sigma;
            params.validate()?;
            Some(cal)
        }
        None => None,
    };
    let m = cfg.evaluation.paths;
    let seed = params.rng_seed;

    let mut sweep = None;
    let (d, net) = if cfg.sweep.enabled {
        let result = sweep_fee_with(&cfg.sweep.grid, &cfg.train, m, seed, &params, |i, pt| {
            let rho = pt.rho().map_or("failed".to_string(), |r| {
                format!("rho = {:.3} +- {:.3}", r.mean, r.se)
            });
            log(&format!("sweep point {} (d = {}): {rho}", i, pt.d));
        })?;
        out.csv("fee_sweep.csv", &FEE_SWEEP_HEADER, sweep_rows(&result))?;
        out.csv(
            "loss_history.csv",
            &LOSS_HISTORY_HEADER,
            result
                .points
                .iter()
                .flat_map(|pt| history_rows(pt.d, &pt.history)),
        )?;
        for pt in &result.points {
            if let Some(net) = &pt.net {
                out.text(&checkpoint_name(pt.d), &net.to_text())?;
            }
        }
        let Some(i) = result.d_hat_index else {
            return Err(Error::Config("every fee grid point failed to train".into()));
        };
        let pick = (
            result.points[i].d,
            result.points[i].net.clone().expect("trained point"),
        );
        sweep = Some(result);
        pick
    } else {
        let outcome = train_with(&params, &cfg.train, |s| {
            if s.iteration % 10 == 0 {
                log(&format!("iteration {}: loss = {:.3}", s.iteration, s.loss));
            }
        })?;
        out.csv(
            "loss_history.csv",
            &LOSS_HISTORY_HEADER,
            history_rows(params.d, &outcome.history),
        )?;
        out.text(&checkpoint_name(params.d), &outcome.net.to_text())?;
        (params.d, outcome.net)
    };

    let trained_params = params.with_fee(d);
    let (with_incentive, batch) =
        evaluate_policy(&net, &trained_params, m, seed, cfg.emit_trajectories)?;
    if cfg.emit_trajectories {
        write_series(&mut out, &batch)?;
    }
    let (no_incentive, _) = baseline_report(&params, m, seed)?;
    out.csv(
        "comparison.csv",
        &COMPARISON_HEADER,
        [
            comparison_row("no_incentive", 0.0, &no_incentive),
            comparison_row("with_incentive", d, &with_incentive),
        ],
    )?;

    let mut files = out.files.clone();
    files.push("manifest.json".into());
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        model_seed: seed,
        train_seed: cfg.train.seed,
        feature_scaling: net.scaling,
        calibration,
        d,
        d_hat: sweep.as_ref().and_then(|s| s.d_hat),
        d_hat_interior: sweep.as_ref().map(|s| s.interior),
        files: files.clone(),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    out.text("manifest.json", &(json + "\n"))?;
    Ok(RunSummary {
        output_dir: output_dir.to_path_buf(),
        d,
        sweep,
        no_incentive,
        with_incentive,
        files,
    })
}

pub fn run_config(cfg: &RunConfig, output_dir: &Path) -> Result<RunSummary> {
    run_config_with(cfg, output_dir, |_| {})
}

/// Loads `config_path` and runs it into the directory chosen by
/// [`resolve_output_dir`] (no flag).
pub fn run_experiment(config_path: &Path) -> Result<RunSummary> {
    let cfg = RunConfig::load(config_path)?;
    let env = std::env::var(OUTPUT_ENV).ok();
    let dir = resolve_output_dir(None, cfg.output_dir.as_deref(), env.as_deref());
    run_config(&cfg, &dir)
}

/// Checkpoint file of the policy trained at fee `d`, relative to the output
/// directory.
pub fn checkpoint_path(d: f64) -> PathBuf {
    PathBuf::from(checkpoint_name(d))
}

/// Loads a checkpoint written by a run.
pub fn load_policy(output_dir: &Path, d: f64) -> Result<PolicyNetwork> {
    PolicyNetwork::load(&output_dir.join(checkpoint_name(d)))
}
