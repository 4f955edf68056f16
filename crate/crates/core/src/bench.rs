//! Experiment plans, the comparison runner and its CSV/Markdown reports.
//!
//! A plan file looks like this:
//!
//! ```text
//! name = desk
//! seeds = 0, 1, 2
//! precision = f64
//!
//! [dataset]
//! manifest = desk.manifest
//!
//! [net]
//! levels = 2
//! base_filters = 8
//!
//! [train]
//! epochs = 10
//! learning_rate = 1e-3
//!
//! [methods]
//! list = none, batch, group:2, group:4, group:8, group:16, group:32, instance
//! ```
//!
//! `[dataset]` either names a manifest file (relative to the plan) or lists
//! manifest keys inline.

use std::fmt::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::thread;

use crate::config::{KeyValueDoc, Section};
use crate::data::{Dataset, DatasetManifest};
use crate::error::{Error, Result};
use crate::net::{UNet, UNetSpec};
use crate::norm::{NormKind, NormMethod, DEFAULT_EPSILON};
use crate::tensor::{DType, Real};
use crate::train::{evaluate, samples_from_volumes, save_checkpoint, train, AdamHyper, Optimizer, Sample, TrainConfig};

/// Every method of the comparison: no norm, batch, group with G in
/// {2, 4, 8, 16, 32}, and instance.
pub fn full_grid() -> Vec<NormMethod> {
    let mut grid = vec![NormMethod::none(), NormMethod::batch()];
    grid.extend([2, 4, 8, 16, 32].map(NormMethod::group));
    grid.push(NormMethod::instance());
    grid
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentPlan {
    pub name: String,
    /// Methods in report order.
    pub methods: Vec<NormMethod>,
    /// Architecture shared by every run; its `norm` field is replaced per method.
    pub net: UNetSpec,
    pub train: TrainConfig,
    pub dataset: DatasetManifest,
    /// One run per method per seed. The seed drives initialization and shuffling.
    pub seeds: Vec<u64>,
    pub precision: DType,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        Self {
            name: "desk".into(),
            methods: full_grid(),
            net: UNetSpec::default(),
            train: TrainConfig::default(),
            dataset: DatasetManifest::default(),
            seeds: vec![0, 1, 2],
            precision: DType::F64,
        }
    }
}

const ROOT_KEYS: &[&str] = &["name", "seeds", "precision"];
const NET_KEYS: &[&str] = &["levels", "base_filters", "kernel", "dilation", "epsilon", "momentum"];
const TRAIN_KEYS: &[&str] = &[
    "epochs",
    "learning_rate",
    "batch_size",
    "optimizer",
    "beta1",
    "beta2",
    "adam_epsilon",
    "momentum",
    "divergence_threshold",
    "preset",
];

fn parse_precision(raw: &str) -> Result<DType> {
    match raw {
        "f64" | "double" => Ok(DType::F64),
        "f32" | "single" => Ok(DType::F32),
        other => Err(Error::Config(format!("precision must be f64 or f32, got `{other}`"))),
    }
}

fn precision_name(d: DType) -> &'static str {
    match d {
        DType::F32 => "f32",
        DType::F64 => "f64",
    }
}

fn parse_train(section: &Section) -> Result<TrainConfig> {
    section.check_keys(TRAIN_KEYS)?;
    let base = match section.get("preset") {
        None | Some("desk") => TrainConfig::default(),
        Some("long") => TrainConfig::long_preset(),
        Some(other) => return Err(Error::Config(format!("unknown training preset `{other}`"))),
    };
    let adam = AdamHyper::default();
    let optimizer = match section.get("optimizer").unwrap_or("adam") {
        "adam" => Optimizer::Adam(AdamHyper {
            beta1: section.parse_or("beta1", adam.beta1)?,
            beta2: section.parse_or("beta2", adam.beta2)?,
            epsilon: section.parse_or("adam_epsilon", adam.epsilon)?,
        }),
        "sgd" => Optimizer::Sgd {
            momentum: section.parse_or("momentum", 0.0)?,
        },
        other => return Err(Error::Config(format!("unknown optimizer `{other}`"))),
    };
    let cfg = TrainConfig {
        epochs: section.parse_or("epochs", base.epochs)?,
        learning_rate: section.parse_or("learning_rate", base.learning_rate)?,
        batch_size: section.parse_or("batch_size", base.batch_size)?,
        optimizer,
        seed: base.seed,
        divergence_threshold: section.parse_or("divergence_threshold", base.divergence_threshold)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn parse_net(section: &Section) -> Result<UNetSpec> {
    section.check_keys(NET_KEYS)?;
    let d = UNetSpec::default();
    let epsilon = section.parse_or("epsilon", DEFAULT_EPSILON)?;
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    Ok(UNetSpec {
        levels: section.parse_or("levels", d.levels)?,
        base_filters: section.parse_or("base_filters", d.base_filters)?,
        kernel: section.parse_or("kernel", d.kernel)?,
        dilation: section.parse_or("dilation", d.dilation)?,
        momentum: section.parse_or("momentum", d.momentum)?,
        norm: NormMethod::none().with_epsilon(epsilon),
        ..d
    })
}

impl ExperimentPlan {
    /// Parses plan text; relative manifest paths resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let doc = KeyValueDoc::parse(text)?;
        let mut plan = Self::default();
        let mut epsilon = DEFAULT_EPSILON;
        for section in doc.sections() {
            match section.name.as_str() {
                "" => {
                    section.check_keys(ROOT_KEYS)?;
                    if let Some(name) = section.get("name") {
                        plan.name = name.to_string();
                    }
                    if let Some(seeds) = section.parse_list("seeds")? {
                        plan.seeds = seeds;
                    }
                    if let Some(p) = section.get("precision") {
                        plan.precision = parse_precision(p)?;
                    }
                }
                "dataset" => {
                    plan.dataset = match section.get("manifest") {
                        Some(rel) if section.entries().len() == 1 => {
                            DatasetManifest::load(base_dir.join(rel))?
                        }
                        Some(_) => {
                            return Err(Error::Config(
                                "[dataset] takes either `manifest` or inline keys, not both".into(),
                            ))
                        }
                        None => DatasetManifest::from_section(section)?,
                    }
                }
                "net" => {
                    plan.net = parse_net(section)?;
                    epsilon = plan.net.norm.epsilon;
                }
                "train" => plan.train = parse_train(section)?,
                "methods" => {
                    section.check_keys(&["list"])?;
                    let list: Vec<NormKind> = section
                        .parse_list("list")?
                        .ok_or_else(|| Error::Config("[methods] needs `list`".into()))?;
                    plan.methods = list.into_iter().map(NormMethod::new).collect();
                }
                other => return Err(Error::Config(format!("unknown plan section [{other}]"))),
            }
        }
        for m in &mut plan.methods {
            *m = m.with_epsilon(epsilon);
        }
        plan.validate()?;
        Ok(plan)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("plan lists no methods".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("plan lists no seeds".into()));
        }
        if self.dataset.eval_count == 0 {
            return Err(Error::Config("plan needs at least one evaluation volume".into()));
        }
        self.train.validate()?;
        UNetSpec {
            norm: NormMethod::none(),
            ..self.net
        }
        .validate()
    }

    /// Self-contained plan text with the dataset inlined.
    pub fn render(&self) -> String {
        let mut doc = KeyValueDoc::new();
        let mut root = Section::new("");
        root.set("name", &self.name);
        root.set(
            "seeds",
            self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(", "),
        );
        root.set("precision", precision_name(self.precision));
        doc.push(root);
        doc.push(self.dataset.to_section("dataset"));
        let mut net = Section::new("net");
        net.set("levels", self.net.levels);
        net.set("base_filters", self.net.base_filters);
        net.set("kernel", self.net.kernel);
        net.set("dilation", self.net.dilation);
        net.set("epsilon", self.net.norm.epsilon);
        net.set("momentum", self.net.momentum);
        doc.push(net);
        let mut tr = Section::new("train");
        tr.set("epochs", self.train.epochs);
        tr.set("learning_rate", self.train.learning_rate);
        tr.set("batch_size", self.train.batch_size);
        match self.train.optimizer {
            Optimizer::Adam(h) => {
                tr.set("optimizer", "adam");
                tr.set("beta1", h.beta1);
                tr.set("beta2", h.beta2);
                tr.set("adam_epsilon", h.epsilon);
            }
            Optimizer::Sgd { momentum } => {
                tr.set("optimizer", "sgd");
                tr.set("momentum", momentum);
            }
        }
        tr.set("divergence_threshold", self.train.divergence_threshold);
        doc.push(tr);
        let mut methods = Section::new("methods");
        methods.set(
            "list",
            self.methods.iter().map(|m| m.kind.to_string()).collect::<Vec<_>>().join(", "),
        );
        doc.push(methods);
        doc.render()
    }

    /// Network spec for one method.
    pub fn net_for(&self, method: NormMethod) -> UNetSpec {
        UNetSpec {
            norm: method,
            ..self.net
        }
    }
}

/// Outcome of one method under one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedRun {
    pub seed: u64,
    pub epoch_seconds: f64,
    pub predict_seconds: f64,
    /// Mean held-out Dice; `None` when training diverged or the run failed.
    pub dice: Option<f64>,
    pub diverged: bool,
    pub epoch_losses: Vec<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Completed,
    /// The method cannot be built for this network, e.g. an incompatible group count.
    Skipped(String),
}

/// Everything measured for one method across seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub method: NormMethod,
    pub status: RunStatus,
    pub runs: Vec<SeedRun>,
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    Some(if values.len() % 2 == 1 {
        values[mid]
    } else {
        0.5 * (values[mid - 1] + values[mid])
    })
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl RunReport {
    pub fn method_name(&self) -> &'static str {
        match self.method.kind {
            NormKind::NoNorm => "none",
            NormKind::Batch => "batch",
            NormKind::Group { .. } => "group",
            NormKind::Instance => "instance",
        }
    }

    pub fn groups(&self) -> Option<usize> {
        match self.method.kind {
            NormKind::Group { groups } => Some(groups),
            _ => None,
        }
    }

    pub fn is_skipped(&self) -> bool {
        matches!(self.status, RunStatus::Skipped(_))
    }

    /// Any seed diverged.
    pub fn diverged(&self) -> bool {
        self.runs.iter().any(|r| r.diverged)
    }

    pub fn failed(&self) -> bool {
        self.runs.iter().any(|r| r.error.is_some())
    }

    /// Mean over seeds that ran without error.
    pub fn epoch_seconds(&self) -> Option<f64> {
        mean(self.runs.iter().filter(|r| r.error.is_none()).map(|r| r.epoch_seconds))
    }

    pub fn predict_seconds(&self) -> Option<f64> {
        mean(self.runs.iter().filter(|r| r.dice.is_some()).map(|r| r.predict_seconds))
    }

    /// Median Dice over seeds that finished training.
    pub fn dice_median(&self) -> Option<f64> {
        let mut d: Vec<f64> = self.runs.iter().filter_map(|r| r.dice).collect();
        median(&mut d)
    }
}

/// Serial runs keep clocks clean; parallel runs spread (method, seed) jobs
/// over worker threads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    #[default]
    Serial,
    Parallel { workers: usize },
}

/// Optional side outputs of a plan run.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub execution: Execution,
    /// Saves every trained network as `{method}_seed{seed}.ckpt` here.
    pub checkpoint_dir: Option<PathBuf>,
    /// Called after each finished run.
    pub progress: Option<fn(&NormMethod, &SeedRun)>,
}

fn checkpoint_name(method: &NormMethod, seed: u64) -> String {
    format!("{}_seed{seed}.ckpt", method.kind.to_string().replace(':', "-"))
}

fn run_one<T: Real>(
    plan: &ExperimentPlan,
    method: NormMethod,
    seed: u64,
    samples: &[Sample<T>],
    data: &Dataset,
    options: &RunOptions,
) -> SeedRun {
    let mut run = SeedRun {
        seed,
        epoch_seconds: 0.0,
        predict_seconds: 0.0,
        dice: None,
        diverged: false,
        epoch_losses: Vec::new(),
        error: None,
    };
    let result = catch_unwind(AssertUnwindSafe(|| -> Result<()> {
        let mut net = UNet::<T>::build(plan.net_for(method), seed)?;
        let cfg = TrainConfig { seed, ..plan.train };
        let outcome = train(&mut net, samples, &cfg)?;
        run.epoch_seconds = outcome.mean_epoch_seconds();
        run.epoch_losses = outcome.records.iter().map(|r| r.mean_loss).collect();
        run.diverged = outcome.diverged;
        if let Some(dir) = &options.checkpoint_dir {
            save_checkpoint(net.params(), dir.join(checkpoint_name(&method, seed)))?;
        }
        if !outcome.diverged {
            let eval = evaluate(&net, &data.eval)?;
            run.predict_seconds = eval.seconds;
            run.dice = Some(eval.mean_dice);
        }
        Ok(())
    }));
    match result {
        Ok(Ok(())) => {}
        Ok(Err(e)) => run.error = Some(e.to_string()),
        Err(panic) => {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            run.error = Some(format!("panicked: {msg}"));
        }
    }
    if run.error.is_some() {
        run.dice = None;
    }
    if let Some(progress) = options.progress {
        progress(&method, &run);
    }
    run
}

fn run_grid<T: Real>(plan: &ExperimentPlan, data: &Dataset, options: &RunOptions) -> Result<Vec<RunReport>> {
    let samples = samples_from_volumes::<T>(&data.train)?;
    let mut reports: Vec<RunReport> = plan
        .methods
        .iter()
        .map(|&method| {
            let status = match plan.net_for(method).validate() {
                Err(e) if matches!(method.kind, NormKind::Group { .. }) => {
                    RunStatus::Skipped(format!("skipped: incompatible G ({e})"))
                }
                _ => RunStatus::Completed,
            };
            RunReport {
                method,
                status,
                runs: Vec::new(),
            }
        })
        .collect();
    let jobs: Vec<(usize, u64)> = reports
        .iter()
        .enumerate()
        .filter(|(_, r)| !r.is_skipped())
        .flat_map(|(i, _)| plan.seeds.iter().map(move |&s| (i, s)))
        .collect();
    let results: Vec<SeedRun> = match options.execution {
        Execution::Serial => jobs
            .iter()
            .map(|&(i, seed)| run_one(plan, plan.methods[i], seed, &samples, data, options))
            .collect(),
        Execution::Parallel { workers } => {
            let slots: Vec<Mutex<Option<SeedRun>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
            let next = Mutex::new(0usize);
            thread::scope(|scope| {
                for _ in 0..workers.max(1).min(jobs.len().max(1)) {
                    scope.spawn(|| loop {
                        let k = {
                            let mut n = next.lock().expect("job counter");
                            let k = *n;
                            *n += 1;
                            k
                        };
                        let Some(&(i, seed)) = jobs.get(k) else { break };
                        let run = run_one(plan, plan.methods[i], seed, &samples, data, options);
                        *slots[k].lock().expect("result slot") = Some(run);
                    });
                }
            });
            slots
                .into_iter()
                .map(|s| s.into_inner().expect("result slot").expect("every job ran"))
                .collect()
        }
    };
    for (&(i, _), run) in jobs.iter().zip(results) {
        reports[i].runs.push(run);
    }
    Ok(reports)
}

/// Runs every method of the plan for every seed and returns one report per
/// method, in plan order. Dataset generation happens before any clock starts.
pub fn run_plan(plan: &ExperimentPlan, options: &RunOptions) -> Result<Vec<RunReport>> {
    plan.validate()?;
    if let Some(dir) = &options.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let data = plan.dataset.generate()?;
    match plan.precision {
        DType::F64 => run_grid::<f64>(plan, &data, options),
        DType::F32 => run_grid::<f32>(plan, &data, options),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

impl ReportFormat {
    /// `.csv` selects CSV, anything else Markdown.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => Self::Csv,
            _ => Self::Markdown,
        }
    }
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "markdown" | "md" => Ok(Self::Markdown),
            other => Err(Error::Usage(format!("unknown report format `{other}`"))),
        }
    }
}

pub const REPORT_COLUMNS: [&str; 7] = [
    "method",
    "groups",
    "epoch_seconds",
    "predict_seconds",
    "dice_median",
    "dice_per_seed",
    "diverged",
];

/// The seven report cells of one row.
pub fn report_cells(report: &RunReport) -> [String; 7] {
    let dash = || "-".to_string();
    let groups = report.groups().map_or_else(dash, |g| g.to_string());
    if let RunStatus::Skipped(reason) = &report.status {
        return [report.method_name().into(), groups, dash(), dash(), reason.clone(), dash(), dash()];
    }
    let secs = |v: Option<f64>| v.map_or_else(dash, |s| format!("{s:.3}"));
    let dice_median = match report.dice_median() {
        Some(d) => format!("{d:.4}"),
        None if report.diverged() => "div.".into(),
        None => "failed".into(),
    };
    let per_seed = report
        .runs
        .iter()
        .map(|r| match (r.dice, r.diverged, &r.error) {
            (_, _, Some(_)) => "failed".to_string(),
            (Some(d), _, _) => format!("{d:.4}"),
            (None, true, _) => "div.".to_string(),
            (None, false, _) => "-".to_string(),
        })
        .collect::<Vec<_>>()
        .join(";");
    let diverged = if report.diverged() { "yes" } else { "no" };
    [
        report.method_name().into(),
        groups,
        secs(report.epoch_seconds()),
        secs(report.predict_seconds()),
        dice_median,
        per_seed,
        diverged.into(),
    ]
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn md_row(cells: &[&str]) -> String {
    let escaped: Vec<String> = cells.iter().map(|c| c.replace('|', "\\|")).collect();
    format!("| {} |\n", escaped.join(" | "))
}

/// Renders reports in plan order. Output depends only on `reports`.
pub fn emit_report(reports: &[RunReport], format: ReportFormat) -> String {
    let rows: Vec<[String; 7]> = reports.iter().map(report_cells).collect();
    let mut out = String::new();
    match format {
        ReportFormat::Csv => {
            out.push_str(&REPORT_COLUMNS.join(","));
            out.push('\n');
            for row in &rows {
                let fields: Vec<String> = row.iter().map(|c| csv_field(c)).collect();
                out.push_str(&fields.join(","));
                out.push('\n');
            }
        }
        ReportFormat::Markdown => {
            let tables: [(&str, [usize; 4]); 2] = [("Timing", [0, 1, 2, 3]), ("Accuracy", [0, 1, 4, 5])];
            for (t, (title, cols)) in tables.iter().enumerate() {
                let mut cols = cols.to_vec();
                if t == 1 {
                    cols.push(6);
                }
                if t > 0 {
                    out.push('\n');
                }
                let _ = writeln!(out, "## {title}\n");
                let header: Vec<&str> = cols.iter().map(|&c| REPORT_COLUMNS[c]).collect();
                out.push_str(&md_row(&header));
                out.push_str(&md_row(&vec!["---"; cols.len()]));
                for row in &rows {
                    let cells: Vec<&str> = cols.iter().map(|&c| row[c].as_str()).collect();
                    out.push_str(&md_row(&cells));
                }
            }
        }
    }
    out
}
