//! Batch experiment driver: single runs over seeds, parameter and
//! perturbation sweeps, and the comma-separated result tables they emit.
//!
//! Runs are configured by a flat `key = value` text file; see
//! [`Config`] for the recognized keys.

use std::fmt;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use ndarray::{concatenate, Axis};
use rayon::prelude::*;

use crate::clustering::{kmeans, KMeansConfig};
use crate::data::{
    generate_zafar_raw, load_table, make_views, standardize, MultiViewDataset, PerturbKind, PerturbSpec, ZafarConfig,
};
use crate::error::{Error, Result};
use crate::losses::{HyperParams, RegMode};
use crate::metrics::{balance, nmi, Partition};
use crate::trainer::{fit, TrainConfig};

/// Column order of every result table.
pub const HEADER: [&str; 7] = ["variant", "seed", "axis", "axis_value", "nmi", "balance", "seconds"];

/// Environment variable bounding the worker pool.
pub const THREADS_VAR: &str = "FAIRMVC_THREADS";

/// Offset between a run seed and the seed of its perturbation mask, so the
/// mask stream is independent of the data and model streams.
const PERTURB_SEED_OFFSET: u64 = 0x5EED_0000;

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// The synthetic two-class generator with `n` samples.
    Zafar { n: usize },
    /// A header-led comma-separated table.
    Table {
        path: PathBuf,
        sensitive: Vec<String>,
        label: Option<String>,
    },
}

impl DataSource {
    /// Parses `zafar:<n>` or `table:<path>`; table columns are set separately.
    pub fn parse(text: &str) -> Result<Self> {
        let (kind, arg) = text.split_once(':').ok_or_else(|| {
            Error::usage(
                "dataset",
                format!("expected `zafar:<n>` or `table:<path>`, got `{text}`"),
            )
        })?;
        match kind.trim() {
            "zafar" => Ok(DataSource::Zafar {
                n: parse_value("dataset", arg.trim())?,
            }),
            "table" => Ok(DataSource::Table {
                path: PathBuf::from(arg.trim()),
                sensitive: Vec::new(),
                label: None,
            }),
            other => Err(Error::usage("dataset", format!("unknown source `{other}`"))),
        }
    }
}

/// The method variants of the comparison tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    C,
    N,
    One,
    Two,
    Cf,
    Nf,
    KMeans,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::C,
        Variant::N,
        Variant::One,
        Variant::Two,
        Variant::Cf,
        Variant::Nf,
        Variant::KMeans,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::C => "fairmvc-c",
            Variant::N => "fairmvc-n",
            Variant::One => "fairmvc-1",
            Variant::Two => "fairmvc-2",
            Variant::Cf => "fairmvc-cf",
            Variant::Nf => "fairmvc-nf",
            Variant::KMeans => "kmeans",
        }
    }

    /// Regularizer of the variant; `None` for the k-means baseline.
    pub fn reg(self) -> Option<RegMode> {
        match self {
            Variant::C | Variant::Cf => Some(RegMode::Ctr),
            Variant::N | Variant::Nf => Some(RegMode::Nctr),
            Variant::One => Some(RegMode::L1),
            Variant::Two => Some(RegMode::L2),
            Variant::KMeans => None,
        }
    }

    /// Whether the fairness terms are active (α > 0).
    pub fn is_fair(self) -> bool {
        matches!(self, Variant::C | Variant::N | Variant::One | Variant::Two)
    }

    /// Default hyperparameters of the variant.
    pub fn hyper(self) -> HyperParams {
        let base = HyperParams::default();
        HyperParams {
            alpha: if self.is_fair() { base.alpha } else { 0.0 },
            gamma: if matches!(self, Variant::N | Variant::Nf) {
                20.0
            } else {
                base.gamma
            },
            reg: self.reg().unwrap_or(RegMode::None),
            ..base
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            let known: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
            Error::usage(
                "variant",
                format!("unknown variant `{s}` (expected one of {})", known.join(", ")),
            )
        })
    }
}

/// Optional replacements for the variant's defaults.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub tau: Option<f64>,
    pub iterations: Option<usize>,
    pub lr: Option<f64>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub hidden: Option<usize>,
    pub dim: Option<usize>,
    /// `Some(None)` disables the initial latent rescaling.
    pub latent_scale: Option<Option<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Perturbation {
    pub kind: PerturbKind,
    pub p: f64,
}

impl Perturbation {
    pub fn axis_name(&self) -> &'static str {
        match self.kind {
            PerturbKind::Missing => "missing-p",
            PerturbKind::Noise => "noise-p",
        }
    }
}

/// One experiment: a dataset, a variant and a list of seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub source: DataSource,
    pub k: usize,
    pub variant: Variant,
    pub overrides: Overrides,
    pub perturbation: Option<Perturbation>,
    pub seeds: Vec<u64>,
    pub out: Option<PathBuf>,
    /// When false the seconds column is written as 0 so that repeated runs
    /// produce byte-identical files.
    pub timing: bool,
}

impl RunSpec {
    /// A spec with five seeds, no perturbation and default hyperparameters.
    pub fn new(source: DataSource, k: usize, variant: Variant) -> Self {
        Self {
            source,
            k,
            variant,
            overrides: Overrides::default(),
            perturbation: None,
            seeds: (0..5).collect(),
            out: None,
            timing: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::usage("k", format!("need at least 2 clusters, got {}", self.k)));
        }
        if self.seeds.is_empty() {
            return Err(Error::usage("seeds", "at least one seed is required"));
        }
        match &self.source {
            DataSource::Zafar { n } if *n < self.k => {
                return Err(Error::usage(
                    "dataset",
                    format!("n = {n} is smaller than k = {}", self.k),
                ));
            }
            DataSource::Table { sensitive, .. } if sensitive.is_empty() => {
                return Err(Error::usage("sensitive", "tables need at least one sensitive column"));
            }
            _ => {}
        }
        if let Some(p) = &self.perturbation {
            PerturbSpec::new(p.kind, p.p, 0).map_err(|e| Error::usage("p", e.to_string()))?;
        }
        if self.variant != Variant::KMeans {
            let cfg = self.train_config(0)?;
            if self.variant.is_fair() && cfg.hp.alpha <= 0.0 {
                return Err(Error::usage(
                    "alpha",
                    format!("{} keeps the fairness terms and needs alpha > 0", self.variant),
                ));
            }
            if !self.variant.is_fair() && cfg.hp.alpha != 0.0 {
                return Err(Error::usage(
                    "alpha",
                    format!("{} removes the fairness terms; alpha must stay 0", self.variant),
                ));
            }
        }
        Ok(())
    }

    /// Training configuration for one seed.
    pub fn train_config(&self, seed: u64) -> Result<TrainConfig> {
        let o = &self.overrides;
        let mut cfg = TrainConfig {
            hp: self.variant.hyper(),
            seed,
            ..TrainConfig::default()
        };
        if let Some(v) = o.alpha {
            cfg.hp.alpha = v;
        }
        if let Some(v) = o.beta {
            cfg.hp.beta = v;
        }
        if let Some(v) = o.gamma {
            cfg.hp.gamma = v;
        }
        if let Some(v) = o.tau {
            cfg.hp.tau = v;
        }
        if let Some(v) = o.iterations {
            cfg.hp.iterations = v;
        }
        if let Some(v) = o.lr {
            cfg.lr = v;
        }
        if let Some(v) = o.momentum {
            cfg.momentum = v;
        }
        if let Some(v) = o.weight_decay {
            cfg.weight_decay = v;
        }
        if let Some(v) = o.hidden {
            cfg.hidden = v;
        }
        if let Some(v) = o.dim {
            cfg.dim = v;
        }
        if let Some(v) = o.latent_scale {
            cfg.latent_scale = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// The raw single-view dataset before preprocessing. Tables do not
    /// depend on the seed.
    pub fn raw_dataset(&self, seed: u64) -> Result<MultiViewDataset> {
        match &self.source {
            DataSource::Zafar { n } => generate_zafar_raw(*n, seed, &ZafarConfig::default()),
            DataSource::Table { path, sensitive, label } => {
                let cols: Vec<&str> = sensitive.iter().map(String::as_str).collect();
                load_table(path, &cols, label.as_deref())
            }
        }
    }

    /// Standardizes, perturbs and synthesizes the two views.
    pub fn prepare(&self, raw: &MultiViewDataset, seed: u64) -> Result<MultiViewDataset> {
        let mut ds = standardize(raw)?;
        if let Some(p) = &self.perturbation {
            ds = PerturbSpec::new(p.kind, p.p, seed.wrapping_add(PERTURB_SEED_OFFSET))?.apply(&ds)?;
        }
        make_views(&ds)
    }

    fn axis(&self) -> (String, f64) {
        match &self.perturbation {
            Some(p) => (p.axis_name().to_string(), p.p),
            None => ("none".to_string(), 0.0),
        }
    }
}

/// The result of one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedOutcome {
    pub seed: u64,
    pub nmi: f64,
    pub balance: f64,
    pub seconds: f64,
    pub labels: Vec<usize>,
}

/// Fits (or clusters, for the baseline) one prepared dataset and scores the
/// hard partition against the ground truth.
pub fn evaluate(spec: &RunSpec, ds: &MultiViewDataset, seed: u64) -> Result<SeedOutcome> {
    let truth = ds
        .labels
        .clone()
        .ok_or_else(|| Error::usage("label", "scoring needs ground-truth labels"))?;
    let start = Instant::now();
    let labels = match spec.variant {
        Variant::KMeans => {
            let views: Vec<_> = ds.views.iter().map(|v| v.view()).collect();
            let points = concatenate(Axis(1), &views).map_err(|e| Error::Contract(e.to_string()))?;
            kmeans(&points, spec.k, KMeansConfig::default(), seed)?.labels
        }
        _ => fit(ds, spec.k, &spec.train_config(seed)?)?.labels(),
    };
    let seconds = start.elapsed().as_secs_f64();
    let pred = Partition::new(labels.clone(), spec.k)?;
    let truth = Partition::from_labels(truth)?;
    Ok(SeedOutcome {
        seed,
        nmi: nmi(&pred, &truth)?,
        balance: balance(&pred, &ds.sensitive)?,
        seconds: if spec.timing { seconds } else { 0.0 },
        labels,
    })
}

/// Seed column of a result row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedLabel {
    Seed(u64),
    Mean,
    Std,
}

impl fmt::Display for SeedLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SeedLabel::Seed(s) => write!(f, "{s}"),
            SeedLabel::Mean => f.write_str("mean"),
            SeedLabel::Std => f.write_str("std"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub variant: Variant,
    pub seed: SeedLabel,
    pub axis: String,
    pub axis_value: f64,
    pub nmi: f64,
    pub balance: f64,
    pub seconds: f64,
}

impl ResultRow {
    fn fields(&self) -> [String; 7] {
        [
            self.variant.to_string(),
            self.seed.to_string(),
            self.axis.clone(),
            self.axis_value.to_string(),
            self.nmi.to_string(),
            self.balance.to_string(),
            self.seconds.to_string(),
        ]
    }
}

/// Arithmetic mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-seed rows followed by the mean and std rows.
fn rows_for(spec: &RunSpec, axis: &str, axis_value: f64, outcomes: &[SeedOutcome]) -> Vec<ResultRow> {
    let row = |seed, nmi, balance, seconds| ResultRow {
        variant: spec.variant,
        seed,
        axis: axis.to_string(),
        axis_value,
        nmi,
        balance,
        seconds,
    };
    let mut rows: Vec<ResultRow> = outcomes
        .iter()
        .map(|o| row(SeedLabel::Seed(o.seed), o.nmi, o.balance, o.seconds))
        .collect();
    let column = |f: fn(&SeedOutcome) -> f64| mean_std(&outcomes.iter().map(f).collect::<Vec<_>>());
    let (nm, ns) = column(|o| o.nmi);
    let (bm, bs) = column(|o| o.balance);
    let (sm, ss) = column(|o| o.seconds);
    rows.push(row(SeedLabel::Mean, nm, bm, sm));
    rows.push(row(SeedLabel::Std, ns, bs, ss));
    rows
}

/// Worker count from [`THREADS_VAR`], or rayon's default when unset.
pub fn thread_count() -> Result<Option<usize>> {
    match std::env::var(THREADS_VAR) {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .map_err(|_| Error::usage(THREADS_VAR, format!("expected a positive integer, got `{v}`")))?;
            if n == 0 {
                return Err(Error::usage(THREADS_VAR, "must be at least 1"));
            }
            Ok(Some(n))
        }
        Err(_) => Ok(None),
    }
}

/// Runs independent jobs on a bounded pool; results keep the job order.
fn execute<J: Sync, T: Send>(jobs: &[J], work: impl Fn(&J) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_count()? {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Contract(format!("cannot start worker pool: {e}")))?;
    pool.install(|| jobs.par_iter().map(&work).collect())
}

fn outcomes(spec: &RunSpec) -> Result<Vec<SeedOutcome>> {
    spec.validate()?;
    let shared = match spec.source {
        DataSource::Table { .. } => Some(spec.raw_dataset(0)?),
        DataSource::Zafar { .. } => None,
    };
    execute(&spec.seeds, |&seed| {
        let raw = match &shared {
            Some(raw) => raw.clone(),
            None => spec.raw_dataset(seed)?,
        };
        let ds = spec.prepare(&raw, seed)?;
        evaluate(spec, &ds, seed)
    })
}

/// Executes every seed of `spec`; returns per-seed rows plus mean and std.
pub fn run(spec: &RunSpec) -> Result<Vec<ResultRow>> {
    let outcomes = outcomes(spec)?;
    let (axis, value) = spec.axis();
    let rows = rows_for(spec, &axis, value, &outcomes);
    if let Some(path) = &spec.out {
        write_rows(path, &rows)?;
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    MissingP,
    NoiseP,
    Alpha,
    Beta,
    Gamma,
    N,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 6] = [
        SweepAxis::MissingP,
        SweepAxis::NoiseP,
        SweepAxis::Alpha,
        SweepAxis::Beta,
        SweepAxis::Gamma,
        SweepAxis::N,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::MissingP => "missing-p",
            SweepAxis::NoiseP => "noise-p",
            SweepAxis::Alpha => "alpha",
            SweepAxis::Beta => "beta",
            SweepAxis::Gamma => "gamma",
            SweepAxis::N => "n",
        }
    }

    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &RunSpec, value: f64) -> Result<RunSpec> {
        let mut spec = base.clone();
        let needs_model = || {
            if base.variant == Variant::KMeans {
                Err(Error::usage(
                    "axis",
                    format!("`{}` does not apply to the kmeans baseline", self.name()),
                ))
            } else {
                Ok(())
            }
        };
        match self {
            SweepAxis::MissingP | SweepAxis::NoiseP => {
                let kind = if self == SweepAxis::MissingP {
                    PerturbKind::Missing
                } else {
                    PerturbKind::Noise
                };
                spec.perturbation = Some(Perturbation { kind, p: value });
            }
            SweepAxis::Alpha => {
                needs_model()?;
                spec.overrides.alpha = Some(value);
            }
            SweepAxis::Beta => {
                needs_model()?;
                spec.overrides.beta = Some(value);
            }
            SweepAxis::Gamma => {
                needs_model()?;
                spec.overrides.gamma = Some(value);
            }
            SweepAxis::N => {
                if !matches!(spec.source, DataSource::Zafar { .. }) {
                    return Err(Error::usage("axis", "the `n` axis needs the synthetic source"));
                }
                if !(value >= 1.0 && value.fract() == 0.0) {
                    return Err(Error::usage(
                        "values",
                        format!("sample counts must be positive integers, got {value}"),
                    ));
                }
                spec.source = DataSource::Zafar { n: value as usize };
            }
        }
        Ok(spec)
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SweepAxis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::usage("axis", format!("unknown sweep axis `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub run: RunSpec,
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

/// Runs the cartesian product of values and seeds. Rows are grouped by
/// value in the given order, each group ending with its mean and std rows.
pub fn sweep(spec: &SweepSpec) -> Result<Vec<ResultRow>> {
    if spec.values.is_empty() {
        return Err(Error::usage("values", "a sweep needs at least one value"));
    }
    let points: Vec<RunSpec> = spec
        .values
        .iter()
        .map(|&v| spec.axis.apply(&spec.run, v))
        .collect::<Result<_>>()?;
    for p in &points {
        p.validate()?;
    }
    let jobs: Vec<(usize, u64)> = (0..points.len())
        .flat_map(|i| points[i].seeds.iter().map(move |&s| (i, s)))
        .collect();
    let results = execute(&jobs, |&(i, seed)| {
        let point = &points[i];
        let ds = point.prepare(&point.raw_dataset(seed)?, seed)?;
        evaluate(point, &ds, seed)
    })?;
    let mut rows = Vec::new();
    let mut results = results.into_iter();
    for (point, &value) in points.iter().zip(&spec.values) {
        let group: Vec<SeedOutcome> = results.by_ref().take(point.seeds.len()).collect();
        rows.extend(rows_for(point, spec.axis.name(), value, &group));
    }
    if let Some(path) = &spec.run.out {
        write_rows(path, &rows)?;
    }
    Ok(rows)
}

/// Writes a complete table (header first) to any writer.
pub fn write_table<W: Write>(writer: W, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let fail = |e: csv::Error| Error::Contract(format!("cannot write result table: {e}"));
    w.write_record(HEADER).map_err(fail)?;
    for row in rows {
        w.write_record(row.fields()).map_err(fail)?;
    }
    w.flush()
        .map_err(|e| Error::Contract(format!("cannot write result table: {e}")))
}

/// Rewrites `path` with the table.
pub fn write_rows(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_table(file, rows)
}

/// Parsed `key = value` configuration.
///
/// Blank lines and lines starting with `#` are ignored. Recognized keys:
/// `dataset` (`zafar:<n>` or `table:<path>`), `sensitive` (comma list),
/// `label`, `k`, `variant`, `alpha`, `beta`, `gamma`, `tau`, `iterations`,
/// `lr`, `momentum`, `weight_decay`, `hidden`, `dim`, `latent_scale`
/// (number or `none`), `perturbation` (`missing` or `noise`), `p`, `seeds`
/// (comma list), `out`, `timing` (`true`/`false`), and for sweeps `axis`
/// and `values` (comma list).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    entries: Vec<(String, String)>,
}

const KEYS: [&str; 23] = [
    "dataset",
    "sensitive",
    "label",
    "k",
    "variant",
    "alpha",
    "beta",
    "gamma",
    "tau",
    "iterations",
    "lr",
    "momentum",
    "weight_decay",
    "hidden",
    "dim",
    "latent_scale",
    "perturbation",
    "p",
    "seeds",
    "out",
    "timing",
    "axis",
    "values",
];

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(String, String)> = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::usage(
                    format!("line {}", no + 1),
                    format!("expected `key = value`, got `{line}`"),
                )
            })?;
            let key = key.trim();
            if !KEYS.contains(&key) {
                return Err(Error::usage(key, format!("unknown key on line {}", no + 1)));
            }
            if entries.iter().any(|(k, _)| k == key) {
                return Err(Error::usage(key, format!("repeated on line {}", no + 1)));
            }
            entries.push((key.to_string(), value.trim().to_string()));
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key).map(|v| parse_value(key, v)).transpose()
    }

    fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::usage(key, "required key is missing"))
    }

    pub fn run_spec(&self) -> Result<RunSpec> {
        let mut source = DataSource::parse(self.require("dataset")?)?;
        if let DataSource::Table { sensitive, label, .. } = &mut source {
            *sensitive = list(self.require("sensitive")?);
            *label = self.get("label").map(str::to_string);
        } else if self.get("sensitive").is_some() || self.get("label").is_some() {
            return Err(Error::usage("sensitive", "column names only apply to table sources"));
        }
        let variant: Variant = self.require("variant")?.parse()?;
        let mut spec = RunSpec::new(source, self.parsed("k")?.unwrap_or(2), variant);
        spec.overrides = Overrides {
            alpha: self.parsed("alpha")?,
            beta: self.parsed("beta")?,
            gamma: self.parsed("gamma")?,
            tau: self.parsed("tau")?,
            iterations: self.parsed("iterations")?,
            lr: self.parsed("lr")?,
            momentum: self.parsed("momentum")?,
            weight_decay: self.parsed("weight_decay")?,
            hidden: self.parsed("hidden")?,
            dim: self.parsed("dim")?,
            latent_scale: match self.get("latent_scale") {
                None => None,
                Some("none") => Some(None),
                Some(v) => Some(Some(parse_value("latent_scale", v)?)),
            },
        };
        spec.perturbation = match (self.get("perturbation"), self.parsed::<f64>("p")?) {
            (None, None) => None,
            (Some(kind), Some(p)) => Some(Perturbation {
                kind: match kind {
                    "missing" => PerturbKind::Missing,
                    "noise" => PerturbKind::Noise,
                    other => {
                        return Err(Error::usage(
                            "perturbation",
                            format!("expected `missing` or `noise`, got `{other}`"),
                        ))
                    }
                },
                p,
            }),
            (Some(_), None) => return Err(Error::usage("p", "a perturbation needs a fraction `p`")),
            (None, Some(_)) => return Err(Error::usage("perturbation", "`p` needs a perturbation kind")),
        };
        if let Some(seeds) = self.get("seeds") {
            spec.seeds = parse_list("seeds", seeds)?;
        }
        spec.out = self.get("out").map(PathBuf::from);
        if let Some(t) = self.parsed("timing")? {
            spec.timing = t;
        }
        Ok(spec)
    }

    pub fn sweep_spec(&self) -> Result<SweepSpec> {
        Ok(SweepSpec {
            run: self.run_spec()?,
            axis: self.require("axis")?.parse()?,
            values: parse_list("values", self.require("values")?)?,
        })
    }
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::usage(key, format!("cannot parse `{v}`")))
}

fn list(v: &str) -> Vec<String> {
    v.split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

/// Parses a comma-separated list such as `0,1,2`.
pub fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    list(v).iter().map(|s| parse_value(key, s)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(variant: Variant) -> RunSpec {
        let mut spec = RunSpec::new(DataSource::Zafar { n: 60 }, 2, variant);
        spec.seeds = vec![0, 1];
        spec.overrides.iterations = Some(3);
        spec.overrides.hidden = Some(8);
        spec.overrides.dim = Some(4);
        spec.timing = false;
        spec
    }

    #[test]
    fn variant_mapping() {
        let c = Variant::C.hyper();
        assert_eq!((c.reg, c.alpha, c.gamma), (RegMode::Ctr, 5.0, 10.0));
        let n = Variant::N.hyper();
        assert_eq!((n.reg, n.alpha, n.gamma), (RegMode::Nctr, 5.0, 20.0));
        assert_eq!(Variant::Cf.hyper().alpha, 0.0);
        assert_eq!(Variant::Nf.hyper().reg, RegMode::Nctr);
        assert_eq!(Variant::One.hyper().reg, RegMode::L1);
        assert_eq!(Variant::Two.hyper().reg, RegMode::L2);
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            if v != Variant::KMeans {
                assert_eq!(v.hyper().beta, 0.01);
                assert_eq!(v.hyper().tau, 0.5);
            }
        }
        assert!(matches!("fairmvc".parse::<Variant>(), Err(Error::Usage { .. })));
    }

    #[test]
    fn kmeans_run_has_seed_rows_and_aggregates() {
        let mut spec = RunSpec::new(DataSource::Zafar { n: 1000 }, 2, Variant::KMeans);
        spec.seeds = vec![0, 1, 2];
        let rows = run(&spec).unwrap();
        assert_eq!(rows.len(), 5);
        assert_eq!(rows[3].seed, SeedLabel::Mean);
        assert_eq!(rows[4].seed, SeedLabel::Std);
        let (mean, std) = mean_std(&rows[..3].iter().map(|r| r.nmi).collect::<Vec<_>>());
        assert!((rows[3].nmi - mean).abs() < 1e-12);
        assert!((rows[4].nmi - std).abs() < 1e-12);
        assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.nmi)));
    }

    #[test]
    fn fairness_toggle_is_enforced() {
        let mut spec = small(Variant::Cf);
        spec.overrides.alpha = Some(1.0);
        assert!(matches!(spec.validate(), Err(Error::Usage { field, .. }) if field == "alpha"));
        let mut spec = small(Variant::C);
        spec.overrides.alpha = Some(0.0);
        assert!(matches!(spec.validate(), Err(Error::Usage { field, .. }) if field == "alpha"));
    }

    #[test]
    fn sweep_groups_rows_by_value() {
        let spec = SweepSpec {
            run: small(Variant::One),
            axis: SweepAxis::MissingP,
            values: vec![0.0, 0.25, 0.5],
        };
        let rows = sweep(&spec).unwrap();
        let means: Vec<&ResultRow> = rows.iter().filter(|r| r.seed == SeedLabel::Mean).collect();
        assert_eq!(means.len(), 3);
        assert_eq!(
            means.iter().map(|r| r.axis_value).collect::<Vec<_>>(),
            vec![0.0, 0.25, 0.5]
        );
        assert!(rows.iter().all(|r| r.axis == "missing-p"));
    }

    #[test]
    fn axes_check_their_preconditions() {
        let km = small(Variant::KMeans);
        assert!(SweepAxis::Alpha.apply(&km, 1.0).is_err());
        let mut table = small(Variant::C);
        table.source = DataSource::Table {
            path: "x.csv".into(),
            sensitive: vec!["s".into()],
            label: None,
        };
        assert!(SweepAxis::N.apply(&table, 100.0).is_err());
        assert!(SweepAxis::N.apply(&small(Variant::C), 10.5).is_err());
        let sized = SweepAxis::N.apply(&small(Variant::C), 80.0).unwrap();
        assert_eq!(sized.source, DataSource::Zafar { n: 80 });
        let empty = SweepSpec {
            run: small(Variant::C),
            axis: SweepAxis::Alpha,
            values: vec![],
        };
        assert!(matches!(sweep(&empty), Err(Error::Usage { .. })));
    }

    #[test]
    fn config_round_trip() {
        let text = "# run\ndataset = zafar:500\nvariant = fairmvc-c\nalpha = 2.5\nseeds = 3, 4\n\
                    perturbation = missing\np = 0.25\nlatent_scale = none\naxis = alpha\nvalues = 0.01,1,5\n";
        let cfg = Config::parse(text).unwrap();
        let spec = cfg.sweep_spec().unwrap();
        assert_eq!(spec.run.source, DataSource::Zafar { n: 500 });
        assert_eq!(spec.run.overrides.alpha, Some(2.5));
        assert_eq!(spec.run.overrides.latent_scale, Some(None));
        assert_eq!(spec.run.seeds, vec![3, 4]);
        assert_eq!(
            spec.run.perturbation,
            Some(Perturbation {
                kind: PerturbKind::Missing,
                p: 0.25
            })
        );
        assert_eq!(spec.axis, SweepAxis::Alpha);
        assert_eq!(spec.values, vec![0.01, 1.0, 5.0]);
    }

    #[test]
    fn config_errors_name_the_field() {
        let field = |text: &str| match Config::parse(text).and_then(|c| c.run_spec()) {
            Err(Error::Usage { field, .. }) => field,
            other => panic!("expected a usage error, got {other:?}"),
        };
        assert_eq!(field("dataset = zafar:10\nvariant = fairmvc-c\nspeed = 3\n"), "speed");
        assert_eq!(field("variant = fairmvc-c\n"), "dataset");
        assert_eq!(field("dataset = zafar:ten\nvariant = fairmvc-c\n"), "dataset");
        assert_eq!(field("dataset = zafar:10\nvariant = kmeans\nk = two\n"), "k");
        assert_eq!(field("dataset = zafar:10\nvariant = kmeans\np = 0.5\n"), "perturbation");
        assert_eq!(field("dataset = zafar:10\nvariant = kmeans\nk = 2\nk = 3\n"), "k");
        assert_eq!(field("dataset = zafar:10\nvariant = kmeans\nseeds = 1,x\n"), "seeds");
        assert_eq!(field("no equals sign\n"), "line 1");
    }

    #[test]
    fn table_serialization() {
        let rows = run(&small(Variant::KMeans)).unwrap();
        let mut buf = Vec::new();
        write_table(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), HEADER.join(","));
        assert_eq!(lines.count(), rows.len());
        assert!(text.contains("kmeans,mean,none,0,"));
    }
}
