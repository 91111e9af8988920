//! Ablation harness: retrain from scratch for every (value, seed) cell of
//! one architecture axis and tabulate validation metrics.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::Serialize;

use crate::data::{generate_phantoms, PhantomSpec, Sample, Split};
use crate::kernels::{map_indexed, Exec};
use crate::metrics::EvalReport;
use crate::model::{Model, ModelConfig};
use crate::train::{train_loop, TrainConfig};
use crate::{Error, Result};

/// The architecture axis being varied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    /// skip budget `s`
    Skips,
    /// patch size on the deepest feature map
    Patch,
    /// input extent `H×W`
    Resolution,
}

impl Axis {
    pub fn as_str(self) -> &'static str {
        match self {
            Axis::Skips => "skips",
            Axis::Patch => "patch",
            Axis::Resolution => "resolution",
        }
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "skips" => Ok(Axis::Skips),
            "patch" => Ok(Axis::Patch),
            "resolution" => Ok(Axis::Resolution),
            _ => Err(Error::Config(format!("unknown ablation axis `{s}` (skips, patch or resolution)"))),
        }
    }
}

/// One setting of the axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum AxisValue {
    Skips(usize),
    Patch(usize),
    Resolution(usize, usize),
}

impl AxisValue {
    pub fn axis(self) -> Axis {
        match self {
            AxisValue::Skips(_) => Axis::Skips,
            AxisValue::Patch(_) => Axis::Patch,
            AxisValue::Resolution(..) => Axis::Resolution,
        }
    }

    /// Parses `3` (skips, patch) or `64x64` / `64` (resolution).
    pub fn parse(axis: Axis, s: &str) -> Result<Self> {
        let num = |t: &str| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("invalid {} value `{s}`", axis.as_str())))
        };
        Ok(match axis {
            Axis::Skips => AxisValue::Skips(num(s)?),
            Axis::Patch => AxisValue::Patch(num(s)?),
            Axis::Resolution => match s.split_once(['x', 'X']) {
                Some((h, w)) => AxisValue::Resolution(num(h)?, num(w)?),
                None => {
                    let n = num(s)?;
                    AxisValue::Resolution(n, n)
                }
            },
        })
    }

    /// `base` with this setting applied.
    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let mut c = base.clone();
        match self {
            AxisValue::Skips(s) => c.skips = s,
            AxisValue::Patch(p) => c.patch_size = p,
            AxisValue::Resolution(h, w) => {
                c.height = h;
                c.width = w;
            }
        }
        c
    }
}

impl fmt::Display for AxisValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AxisValue::Skips(v) | AxisValue::Patch(v) => write!(f, "{v}"),
            AxisValue::Resolution(h, w) => write!(f, "{h}x{w}"),
        }
    }
}

/// Where the cells' training and validation samples come from.
#[derive(Debug, Clone)]
pub enum AblationData {
    /// fixed samples; every cell must accept their extent
    Fixed { train: Vec<Sample>, val: Vec<Sample> },
    /// phantoms regenerated at each cell's input extent
    Generated(PhantomSpec),
}

impl AblationData {
    fn for_extent(&self, height: usize, width: usize) -> Result<(Vec<Sample>, Vec<Sample>)> {
        match self {
            AblationData::Fixed { train, val } => {
                if let Some(s) = train.iter().chain(val).find(|s| (s.height(), s.width()) != (height, width)) {
                    return Err(Error::Config(format!(
                        "dataset samples are {}x{} but the cell needs {height}x{width}; \
                         the resolution axis needs generated data",
                        s.height(),
                        s.width()
                    )));
                }
                Ok((train.clone(), val.clone()))
            }
            AblationData::Generated(spec) => {
                let spec = PhantomSpec {
                    height,
                    width,
                    ..spec.clone()
                };
                let samples = generate_phantoms(&spec)?;
                let (mut train, mut val) = (Vec::new(), Vec::new());
                for (s, split) in samples.into_iter().zip(spec.splits()) {
                    match split {
                        Split::Train => train.push(s),
                        Split::Val => val.push(s),
                        Split::Test => {}
                    }
                }
                Ok((train, val))
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationSpec {
    pub values: Vec<AxisValue>,
    pub seeds: Vec<u64>,
    pub base: ModelConfig,
    pub train: TrainConfig,
}

impl AblationSpec {
    /// Rejects an empty sweep, mixed axes and any value whose config is
    /// invalid (the config error states the violated rule).
    pub fn validate(&self) -> Result<()> {
        let first = self.values.first().ok_or(Error::Empty("ablation value list"))?;
        if self.seeds.is_empty() {
            return Err(Error::Empty("ablation seed list"));
        }
        for v in &self.values {
            if v.axis() != first.axis() {
                return Err(Error::Config("ablation values must all belong to one axis".into()));
            }
            v.apply(&self.base).validate().map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("{} = {v}: {m}", v.axis().as_str())),
                e => e,
            })?;
        }
        self.train.validate()
    }
}

/// Validation result of one (value, seed) cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub value: AxisValue,
    pub seed: u64,
    pub report: EvalReport,
}

/// Runs every cell, value-major then seed order; rows come back in that
/// order whatever the execution strategy.
pub fn run_ablation(spec: &AblationSpec, data: &AblationData, exec: Exec) -> Result<Vec<AblationRow>> {
    spec.validate()?;
    let cells: Vec<(AxisValue, u64)> = spec
        .values
        .iter()
        .flat_map(|&v| spec.seeds.iter().map(move |&s| (v, s)))
        .collect();
    map_indexed(exec, cells.len(), |i| {
        let (value, seed) = cells[i];
        let config = value.apply(&spec.base);
        let (train, val) = data.for_extent(config.height, config.width)?;
        if val.is_empty() {
            return Err(Error::Empty("validation split"));
        }
        let cfg = TrainConfig {
            seed,
            ..spec.train.clone()
        };
        let out = train_loop(Model::<f32>::new(config, seed)?, &train, &val, &cfg, |_| {})?;
        let report = out.best_report.ok_or(Error::Empty("validation split"))?;
        Ok(AblationRow { value, seed, report })
    })
    .into_iter()
    .collect()
}

/// `axis,value,seed,mean_dice,mean_ahd,mean_hd95,class_1,…` with one row
/// per cell.
pub fn rows_to_csv(rows: &[AblationRow]) -> String {
    let na = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| x.to_string());
    let mut out = String::from("axis,value,seed,mean_dice,mean_ahd,mean_hd95");
    if let Some(r) = rows.first() {
        for c in &r.report.classes {
            write!(out, ",{}", c.label).unwrap();
        }
    }
    out.push('\n');
    for r in rows {
        write!(
            out,
            "{},{},{},{},{},{}",
            r.value.axis().as_str(),
            r.value,
            r.seed,
            na(r.report.mean_dice),
            na(r.report.mean_ahd),
            na(r.report.mean_hd95)
        )
        .unwrap();
        for c in &r.report.classes {
            write!(out, ",{}", na(c.dice)).unwrap();
        }
        out.push('\n');
    }
    out
}

/// Mean validation Dice over seeds of one value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValueSummary {
    pub value: AxisValue,
    pub seeds: usize,
    pub mean_dice: f64,
    pub std_dice: f64,
    pub mean_ahd: Option<f64>,
}

/// Per-value aggregates in first-appearance order; an undefined mean Dice
/// counts as 0.
pub fn summarize(rows: &[AblationRow]) -> Vec<ValueSummary> {
    let mut values: Vec<AxisValue> = Vec::new();
    for r in rows {
        if !values.contains(&r.value) {
            values.push(r.value);
        }
    }
    values
        .into_iter()
        .map(|value| {
            let cell: Vec<&AblationRow> = rows.iter().filter(|r| r.value == value).collect();
            let dice: Vec<f64> = cell.iter().map(|r| r.report.mean_dice.unwrap_or(0.0)).collect();
            let n = dice.len() as f64;
            let mean = dice.iter().sum::<f64>() / n;
            let var = dice.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
            let ahd: Vec<f64> = cell.iter().filter_map(|r| r.report.mean_ahd).collect();
            ValueSummary {
                value,
                seeds: cell.len(),
                mean_dice: mean,
                std_dice: var.sqrt(),
                mean_ahd: (!ahd.is_empty()).then(|| ahd.iter().sum::<f64>() / ahd.len() as f64),
            }
        })
        .collect()
}

pub fn summary_to_csv(summary: &[ValueSummary]) -> String {
    let mut out = String::from("axis,value,seeds,mean_dice,std_dice,mean_ahd\n");
    for s in summary {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            s.value.axis().as_str(),
            s.value,
            s.seeds,
            s.mean_dice,
            s.std_dice,
            s.mean_ahd.map_or_else(|| "n/a".to_string(), |x| x.to_string())
        )
        .unwrap();
    }
    out
}
