//! Grids of independent runs, one CSV row each.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::task::{make_task, TaskSpec};
use super::train::{measure_step, measure_throughput, train, TrainConfig, TrainOptions};
use crate::adapters::{AdapterSet, AdapterSpec, Ia3Config, LarsConfig, LoraConfig, Pooling};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::memory::{estimate_peak, fit_growth_rate, GrowthFit, Optimizer, Toggles};
use crate::tensor::DType;
use crate::transformer::{Backbone, BackboneConfig, Site};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum SweepDimension {
    #[default]
    #[serde(rename = "S", alias = "s")]
    S,
    #[serde(rename = "R", alias = "r")]
    R,
    #[serde(rename = "targets")]
    Targets,
    #[serde(rename = "adapter")]
    Adapter,
}

impl std::str::FromStr for SweepDimension {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "S" | "s" => Ok(SweepDimension::S),
            "R" | "r" => Ok(SweepDimension::R),
            "targets" => Ok(SweepDimension::Targets),
            "adapter" => Ok(SweepDimension::Adapter),
            other => Err(Error::Config(format!("unknown sweep dimension `{other}`"))),
        }
    }
}

/// One grid value: an integer (S, R) or a name (targets, adapter).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridValue {
    Int(usize),
    Text(String),
}

impl fmt::Display for GridValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GridValue::Int(v) => write!(f, "{v}"),
            GridValue::Text(s) => f.write_str(s),
        }
    }
}

impl GridValue {
    fn int(&self, what: &str) -> Result<usize> {
        match self {
            GridValue::Int(v) => Ok(*v),
            GridValue::Text(s) => s
                .parse()
                .map_err(|_| Error::Config(format!("{what} grid value `{s}` is not an integer"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    /// One forward + backward per point.
    #[default]
    Measure,
    /// A full training run per point.
    Train,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub dimension: SweepDimension,
    pub grid: Vec<GridValue>,
    pub mode: SweepMode,
    /// Batch size of measured steps.
    pub batch: usize,
    /// Sequence length for sweeps over other dimensions.
    pub seq: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            dimension: SweepDimension::S,
            grid: [64, 128, 256, 512].into_iter().map(GridValue::Int).collect(),
            mode: SweepMode::Measure,
            batch: 2,
            seq: 64,
        }
    }
}

/// A fully resolved grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub spec: AdapterSpec,
    pub batch: usize,
    pub seq: usize,
}

pub fn parse_targets(label: &str) -> Result<Vec<Site>> {
    label
        .split(['+', ','])
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect()
}

/// Default spec for an adapter name; `lars_learned` selects learned pooling.
pub fn default_spec(name: &str) -> Result<AdapterSpec> {
    match name {
        "lars" | "lars_fixed" => Ok(AdapterSpec::Lars(LarsConfig::default())),
        "lars_learned" => Ok(AdapterSpec::Lars(LarsConfig {
            pooling: Pooling::Learned,
            ..LarsConfig::default()
        })),
        "lora" => Ok(AdapterSpec::Lora(LoraConfig::default())),
        "ia3" => Ok(AdapterSpec::Ia3(Ia3Config::default())),
        other => Err(Error::Config(format!("unknown adapter `{other}`"))),
    }
}

/// Expands `grid` over every configured adapter, adapter-major.
pub fn sweep_points(config: &SweepConfig, adapters: &[AdapterSpec]) -> Result<Vec<SweepPoint>> {
    if config.grid.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    if config.batch == 0 {
        return Err(Error::Config("sweep batch must be at least 1".into()));
    }
    let point = |spec: AdapterSpec, seq| SweepPoint {
        spec,
        batch: config.batch,
        seq,
    };
    let mut points = Vec::new();
    if config.dimension == SweepDimension::Adapter {
        for value in &config.grid {
            let name = value.to_string();
            let spec = adapters
                .iter()
                .find(|a| a.kind() == name || (name == "lars_learned" && a.pooling() == "learned"))
                .cloned()
                .map_or_else(|| default_spec(&name), Ok)?;
            points.push(point(spec, config.seq));
        }
        return Ok(points);
    }
    if adapters.is_empty() {
        return Err(Error::Config("no adapters configured".into()));
    }
    for spec in adapters {
        for value in &config.grid {
            match config.dimension {
                SweepDimension::S => {
                    let seq = value.int("S")?;
                    if seq == 0 {
                        return Err(Error::Config("S grid values must be positive".into()));
                    }
                    points.push(point(spec.clone(), seq));
                }
                SweepDimension::R => {
                    let mut s = spec.clone();
                    s.set_rank(value.int("R")?);
                    points.push(point(s, config.seq));
                }
                SweepDimension::Targets => {
                    let mut s = spec.clone();
                    *s.targets_mut() = parse_targets(&value.to_string())?;
                    points.push(point(s, config.seq));
                }
                SweepDimension::Adapter => unreachable!(),
            }
        }
    }
    Ok(points)
}

/// One CSV row. Column order is fixed by field order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub adapter: String,
    pub pooling: String,
    #[serde(rename = "B")]
    pub batch: usize,
    #[serde(rename = "S")]
    pub seq: usize,
    #[serde(rename = "H")]
    pub hidden: usize,
    #[serde(rename = "L")]
    pub layers: usize,
    #[serde(rename = "R")]
    pub rank: Option<usize>,
    pub targets: String,
    pub step_peak_adapter_bytes: Option<u64>,
    pub step_peak_base_bytes: Option<u64>,
    pub est_adapter_bytes: Option<u64>,
    pub est_base_bytes: Option<u64>,
    pub params_trainable: Option<usize>,
    pub tokens_per_sec: Option<f64>,
    pub final_loss: Option<f64>,
    pub final_acc: Option<f64>,
    /// `ok`, `exceeds_budget`, or `error: <message>`.
    pub status: String,
}

impl SweepRow {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }

    pub fn total_bytes(&self) -> Option<u64> {
        Some(self.step_peak_adapter_bytes? + self.step_peak_base_bytes?)
    }
}

#[derive(Debug, Clone)]
pub struct SweepSettings<'a> {
    pub backbone: &'a BackboneConfig,
    pub task: &'a TaskSpec,
    pub train: &'a TrainConfig,
    pub mode: SweepMode,
    pub budget: Option<u64>,
    pub exec: Exec,
    pub timing: bool,
}

fn run_point(settings: &SweepSettings<'_>, point: &SweepPoint, row: &mut SweepRow) -> Result<()> {
    let cfg = settings.backbone;
    if point.seq > cfg.max_seq {
        return Err(Error::SequenceLength {
            len: point.seq,
            max: cfg.max_seq,
        });
    }
    let est = estimate_peak(
        cfg,
        &point.spec,
        point.batch,
        point.seq,
        Optimizer::Adamw,
        Toggles::default(),
        DType::F32,
    )?;
    row.est_adapter_bytes = Some(est.adapter_act_bytes);
    row.est_base_bytes = Some(est.base_act_bytes);

    let model = Backbone::<f32>::build(cfg)?;
    let mut adapters = AdapterSet::<f32>::new(point.spec.clone(), cfg, settings.train.seed)?;
    row.params_trainable = Some(adapters.trainable_count());
    let mut task_spec = settings.task.clone();
    task_spec.set_seq_len(point.seq);
    let task = make_task(task_spec, cfg.vocab, settings.train.seed)?;

    match settings.mode {
        SweepMode::Measure => {
            let started = Instant::now();
            let m = measure_step(&model, &adapters, &task, point.batch, settings.budget)?;
            let elapsed = started.elapsed().as_secs_f64();
            row.step_peak_adapter_bytes = Some(m.adapter_bytes);
            row.step_peak_base_bytes = Some(m.base_bytes);
            row.final_loss = Some(m.loss);
            if settings.timing {
                row.tokens_per_sec = Some(measure_throughput(
                    (point.batch * point.seq) as u64,
                    elapsed.max(f64::MIN_POSITIVE),
                )?);
            }
        }
        SweepMode::Train => {
            let train_cfg = TrainConfig {
                batch_size: point.batch,
                ..settings.train.clone()
            };
            let opts = TrainOptions {
                exec: Exec::Sequential,
                timing: settings.timing,
                budget: settings.budget,
            };
            let report = train(&model, &mut adapters, &task, &train_cfg, opts)?;
            row.step_peak_adapter_bytes = Some(report.peak_adapter_bytes);
            row.step_peak_base_bytes = Some(report.peak_base_bytes);
            row.final_loss = report.final_loss;
            row.final_acc = Some(report.final_acc);
            row.tokens_per_sec = report.tokens_per_sec;
        }
    }
    Ok(())
}

/// Runs every point; failures are recorded in the row's status and the
/// sweep continues. Rows come back in point order.
pub fn run_sweep(settings: &SweepSettings<'_>, points: &[SweepPoint]) -> Vec<SweepRow> {
    settings.exec.map(points, |point| {
        let mut row = SweepRow {
            adapter: point.spec.kind().to_string(),
            pooling: point.spec.pooling().to_string(),
            batch: point.batch,
            seq: point.seq,
            hidden: settings.backbone.hidden,
            layers: settings.backbone.layers,
            rank: point.spec.rank(),
            targets: point.spec.targets_label(),
            step_peak_adapter_bytes: None,
            step_peak_base_bytes: None,
            est_adapter_bytes: None,
            est_base_bytes: None,
            params_trainable: None,
            tokens_per_sec: None,
            final_loss: None,
            final_acc: None,
            status: "ok".into(),
        };
        match run_point(settings, point, &mut row) {
            Ok(()) => {}
            Err(Error::BudgetExceeded { .. }) => {
                row.status = "exceeds_budget".into();
            }
            Err(e) => {
                row.status = format!("error: {e}");
            }
        }
        row
    })
}

pub fn write_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}

/// Growth of adapter-scope and total (base + adapter) bytes with S.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlopeSummary {
    pub label: String,
    pub adapter: GrowthFit,
    pub total: GrowthFit,
}

/// Fits one line per configuration over the successful rows of an S-sweep.
/// Configurations with fewer than 3 usable rows are skipped.
pub fn fit_slopes(rows: &[SweepRow]) -> Vec<SlopeSummary> {
    let mut groups: BTreeMap<String, Vec<&SweepRow>> = BTreeMap::new();
    let mut order = Vec::new();
    for row in rows.iter().filter(|r| r.is_ok()) {
        let rank = row.rank.map_or_else(|| "-".to_string(), |r| r.to_string());
        let label = format!("{}/{}/R={}/{}/B={}", row.adapter, row.pooling, rank, row.targets, row.batch);
        if !groups.contains_key(&label) {
            order.push(label.clone());
        }
        groups.entry(label).or_default().push(row);
    }
    order
        .into_iter()
        .filter_map(|label| {
            let rows = &groups[&label];
            let points = |f: &dyn Fn(&SweepRow) -> Option<u64>| -> Option<Vec<(f64, f64)>> {
                rows.iter().map(|r| Some((r.seq as f64, f(r)? as f64))).collect()
            };
            let adapter = fit_growth_rate(&points(&|r| r.step_peak_adapter_bytes)?).ok()?;
            let total = fit_growth_rate(&points(&|r| r.total_bytes())?).ok()?;
            Some(SlopeSummary { label, adapter, total })
        })
        .collect()
}
