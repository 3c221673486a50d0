//! Command-line front end: `train`, `eval`, `sweep-precision`, and `bench`
//! subcommands over a sectioned key=value config file.
//!
//! Exit codes: 0 success, 2 config error (parse failure, unknown key, bad
//! value), 3 dataset error (missing or malformed data files), 1 anything
//! else at runtime. Logs go to stderr; metrics go to files under `out_dir`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use crate::data::{load_idx, make_synthetic_clusters, DataError, Dataset, Encoding};
use crate::model::{build_network, AnyNetwork, HypercolumnGeometry, Network, TrainConfig};
use crate::precision::{ArithMode, EmArith, F32Arith, F64Arith, ScalarArith};
use crate::trainer::{evaluate, fit_hidden_with, fit_output_with, TrainReport};

/// Environment variable consulted for the default worker count when the
/// config file does not set `n_workers`.
pub const WORKERS_ENV: &str = "BCPNN_WORKERS";

const MODEL_FILE: &str = "model.bin";

#[derive(Debug)]
pub enum CliError {
    /// Config file problems: unreadable file, syntax, unknown key, bad value.
    Config(String),
    /// Dataset problems: missing or malformed data files.
    Data(String),
    /// Everything else: training failure, model file IO, metrics IO.
    Runtime(String),
}

impl CliError {
    /// Process exit code for this error class.
    pub fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Data(m) => write!(f, "dataset error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<crate::model::ModelError> for CliError {
    fn from(e: crate::model::ModelError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<crate::trainer::TrainerError> for CliError {
    fn from(e: crate::trainer::TrainerError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricsFormat {
    Csv,
    Json,
}

impl MetricsFormat {
    fn ext(self) -> &'static str {
        match self {
            MetricsFormat::Csv => "csv",
            MetricsFormat::Json => "json",
        }
    }
}

/// Where the samples come from.
#[derive(Debug, Clone)]
pub enum DataSpec {
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    Synthetic {
        clusters: usize,
        train_samples: usize,
        test_samples: usize,
        features: usize,
        spread: f64,
    },
}

/// Full run description: the trainer config plus data source, geometry, and
/// artifact plumbing.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DataSpec,
    pub encoding: Encoding,
    /// 0 = use the whole split.
    pub limit_train: usize,
    pub limit_test: usize,
    pub hidden: HypercolumnGeometry,
    pub out_dir: PathBuf,
    /// Save a model snapshot every this many epochs; 0 disables.
    pub checkpoint_interval: usize,
    pub metrics_format: MetricsFormat,
}

// ---------------------------------------------------------------------------
// Config file parsing

struct KeyReader {
    section: String,
    seen: Vec<String>,
}

impl KeyReader {
    fn qualified(&self, key: &str) -> String {
        format!("{}.{}", self.section, key)
    }
}

fn parse_usize(qual: &str, v: &str) -> Result<usize, CliError> {
    v.parse()
        .map_err(|_| CliError::Config(format!("{qual}: expected a non-negative integer, got `{v}`")))
}

fn parse_f64(qual: &str, v: &str) -> Result<f64, CliError> {
    v.parse()
        .map_err(|_| CliError::Config(format!("{qual}: expected a number, got `{v}`")))
}

fn parse_u64(qual: &str, v: &str) -> Result<u64, CliError> {
    v.parse()
        .map_err(|_| CliError::Config(format!("{qual}: expected a non-negative integer, got `{v}`")))
}

/// Parses the sectioned key=value config format. Full-line `#` comments and
/// blank lines are allowed; every key must live in a known section; unknown
/// and duplicate keys are rejected.
pub fn parse_config(text: &str) -> Result<RunConfig, CliError> {
    let mut train = TrainConfig::default();
    let mut n_workers_set = false;

    let mut source: Option<String> = None;
    let mut paths: [Option<PathBuf>; 4] = [None, None, None, None];
    let mut encoding = Encoding::Complement;
    let (mut limit_train, mut limit_test) = (0usize, 0usize);
    let (mut clusters, mut train_samples, mut test_samples, mut features) =
        (10usize, 1000usize, 200usize, 16usize);
    let mut spread = 0.05f64;

    let (mut hidden_hcus, mut hidden_mcus) = (30usize, 100usize);

    let mut out_dir = PathBuf::from("out");
    let mut checkpoint_interval = 0usize;
    let mut metrics_format = MetricsFormat::Csv;

    let mut r = KeyReader { section: String::new(), seen: Vec::new() };

    for (ln, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            match name {
                "data" | "model" | "train" | "run" => r.section = name.to_string(),
                other => {
                    return Err(CliError::Config(format!(
                        "line {}: unknown section [{other}]",
                        ln + 1
                    )))
                }
            }
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::Config(format!(
                "line {}: expected `key = value`, got `{line}`",
                ln + 1
            )));
        };
        let (key, val) = (k.trim(), v.trim());
        if r.section.is_empty() {
            return Err(CliError::Config(format!(
                "line {}: key `{key}` appears before any [section]",
                ln + 1
            )));
        }
        let qual = r.qualified(key);
        if r.seen.contains(&qual) {
            return Err(CliError::Config(format!("line {}: duplicate key {qual}", ln + 1)));
        }
        r.seen.push(qual.clone());

        match (r.section.as_str(), key) {
            ("data", "source") => source = Some(val.to_string()),
            ("data", "train_images") => paths[0] = Some(PathBuf::from(val)),
            ("data", "train_labels") => paths[1] = Some(PathBuf::from(val)),
            ("data", "test_images") => paths[2] = Some(PathBuf::from(val)),
            ("data", "test_labels") => paths[3] = Some(PathBuf::from(val)),
            ("data", "encoding") => {
                encoding = match val {
                    "complement" => Encoding::Complement,
                    "raw" => Encoding::Raw,
                    _ => {
                        return Err(CliError::Config(format!(
                            "{qual}: expected `complement` or `raw`, got `{val}`"
                        )))
                    }
                }
            }
            ("data", "limit_train") => limit_train = parse_usize(&qual, val)?,
            ("data", "limit_test") => limit_test = parse_usize(&qual, val)?,
            ("data", "clusters") => clusters = parse_usize(&qual, val)?,
            ("data", "train_samples") => train_samples = parse_usize(&qual, val)?,
            ("data", "test_samples") => test_samples = parse_usize(&qual, val)?,
            ("data", "features") => features = parse_usize(&qual, val)?,
            ("data", "spread") => spread = parse_f64(&qual, val)?,

            ("model", "hidden_hcus") => hidden_hcus = parse_usize(&qual, val)?,
            ("model", "hidden_mcus") => hidden_mcus = parse_usize(&qual, val)?,

            ("train", "mode") => {
                train.mode = val
                    .parse::<ArithMode>()
                    .map_err(|e| CliError::Config(format!("{qual}: {e}")))?
            }
            ("train", "lambda_hidden") => train.lambda_hidden = parse_f64(&qual, val)?,
            ("train", "lambda_output") => train.lambda_output = parse_f64(&qual, val)?,
            ("train", "k_b") => train.k_b = parse_f64(&qual, val)?,
            ("train", "n_epochs1") => train.n_epochs1 = parse_usize(&qual, val)?,
            ("train", "n_epochs2") => train.n_epochs2 = parse_usize(&qual, val)?,
            ("train", "n_cycles") => train.n_cycles = parse_usize(&qual, val)?,
            ("train", "batch_size") => train.batch_size = parse_usize(&qual, val)?,
            ("train", "mask_update_period") => {
                train.mask_update_period = Some(parse_usize(&qual, val)?)
            }
            ("train", "fan_in") => train.fan_in = parse_usize(&qual, val)?,
            ("train", "swaps_per_hcu") => train.swaps_per_hcu = parse_usize(&qual, val)?,
            ("train", "support_noise") => train.support_noise = parse_f64(&qual, val)?,
            ("train", "n_workers") => {
                train.n_workers = parse_usize(&qual, val)?;
                n_workers_set = true;
            }
            ("train", "seed") => train.seed = parse_u64(&qual, val)?,

            ("run", "out_dir") => out_dir = PathBuf::from(val),
            ("run", "checkpoint_interval") => checkpoint_interval = parse_usize(&qual, val)?,
            ("run", "metrics_format") => {
                metrics_format = match val {
                    "csv" => MetricsFormat::Csv,
                    "json" => MetricsFormat::Json,
                    _ => {
                        return Err(CliError::Config(format!(
                            "{qual}: expected `csv` or `json`, got `{val}`"
                        )))
                    }
                }
            }

            (sec, key) => {
                return Err(CliError::Config(format!(
                    "line {}: unknown key `{key}` in section [{sec}]",
                    ln + 1
                )))
            }
        }
    }

    if !n_workers_set {
        if let Ok(v) = std::env::var(WORKERS_ENV) {
            train.n_workers = v.parse().map_err(|_| {
                CliError::Config(format!("{WORKERS_ENV}: expected a positive integer, got `{v}`"))
            })?;
        }
    }

    let data = match source.as_deref() {
        Some("idx") => {
            let req = |p: Option<PathBuf>, name: &str| {
                p.ok_or_else(|| {
                    CliError::Config(format!("data.{name} is required when data.source = idx"))
                })
            };
            let [ti, tl, vi, vl] = paths;
            DataSpec::Idx {
                train_images: req(ti, "train_images")?,
                train_labels: req(tl, "train_labels")?,
                test_images: req(vi, "test_images")?,
                test_labels: req(vl, "test_labels")?,
            }
        }
        Some("synthetic") => DataSpec::Synthetic {
            clusters,
            train_samples,
            test_samples,
            features,
            spread,
        },
        Some(other) => {
            return Err(CliError::Config(format!(
                "data.source: expected `idx` or `synthetic`, got `{other}`"
            )))
        }
        None => return Err(CliError::Config("data.source is required".into())),
    };

    let hidden = HypercolumnGeometry::new(hidden_hcus, hidden_mcus)
        .map_err(|e| CliError::Config(format!("model geometry: {e}")))?;

    Ok(RunConfig {
        train,
        data,
        encoding,
        limit_train,
        limit_test,
        hidden,
        out_dir,
        checkpoint_interval,
        metrics_format,
    })
}

pub fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

// ---------------------------------------------------------------------------
// Data loading

fn apply_encoding(ds: Dataset, encoding: Encoding) -> Result<Dataset, CliError> {
    Ok(match encoding {
        Encoding::Raw => ds,
        Encoding::Complement => ds.encode_complement()?,
    })
}

fn limited(ds: Dataset, limit: usize) -> Dataset {
    if limit == 0 {
        ds
    } else {
        ds.subset(0, limit)
    }
}

/// Loads (train, test) as the config describes, encoded and limited.
pub fn load_datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset), CliError> {
    let (train, test) = match &cfg.data {
        DataSpec::Idx { train_images, train_labels, test_images, test_labels } => (
            load_idx(train_images, train_labels)?,
            load_idx(test_images, test_labels)?,
        ),
        DataSpec::Synthetic { clusters, train_samples, test_samples, features, spread } => {
            // Disjoint deterministic streams for the two splits.
            let s = cfg.train.seed;
            (
                make_synthetic_clusters(s, *clusters, *train_samples, *features, *spread),
                make_synthetic_clusters(s ^ 0x7465_7374, *clusters, *test_samples, *features, *spread),
            )
        }
    };
    let train = limited(apply_encoding(train, cfg.encoding)?, cfg.limit_train);
    let test = limited(apply_encoding(test, cfg.encoding)?, cfg.limit_test);
    Ok((train, test))
}

fn input_geometry(ds: &Dataset) -> Result<HypercolumnGeometry, CliError> {
    let g = match ds.encoding {
        Encoding::Complement => HypercolumnGeometry::new(ds.n_features() / 2, 2),
        Encoding::Raw => HypercolumnGeometry::new(ds.n_features(), 1),
    };
    g.map_err(|e| CliError::Data(format!("input geometry: {e}")))
}

fn output_geometry(train: &Dataset, test: &Dataset) -> Result<HypercolumnGeometry, CliError> {
    let classes = train.n_classes().max(test.n_classes());
    if classes == 0 {
        return Err(CliError::Data("labels are required for training".into()));
    }
    HypercolumnGeometry::new(1, classes).map_err(|e| CliError::Data(format!("output geometry: {e}")))
}

// ---------------------------------------------------------------------------
// Metrics files

fn write_file(path: &Path, content: &str) -> Result<(), CliError> {
    fs::write(path, content)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

const REPORT_COLUMNS: &str = "phase,epoch,wall_seconds,images_per_sec,mask_swaps,trace_max";

fn report_csv(reports: &[TrainReport]) -> String {
    let mut s = String::from(REPORT_COLUMNS);
    s.push('\n');
    for r in reports {
        for e in &r.epochs {
            s.push_str(&format!(
                "{},{},{:.6},{:.3},{},{:.9e}\n",
                r.phase, e.epoch, e.wall_seconds, e.images_per_sec, e.mask_swaps, e.trace_max
            ));
        }
    }
    s
}

fn write_reports(cfg: &RunConfig, reports: &[TrainReport]) -> Result<PathBuf, CliError> {
    let path = cfg.out_dir.join(format!("report.{}", cfg.metrics_format.ext()));
    let content = match cfg.metrics_format {
        MetricsFormat::Csv => report_csv(reports),
        MetricsFormat::Json => serde_json::to_string_pretty(reports)
            .map_err(|e| CliError::Runtime(format!("metrics encode: {e}")))?,
    };
    write_file(&path, &content)?;
    Ok(path)
}

#[derive(serde::Serialize)]
struct Summary {
    test_accuracy: f64,
    train_wall_seconds: f64,
    mode: ArithMode,
    n_workers: usize,
    seed: u64,
    n_train: usize,
    n_test: usize,
}

fn write_summary(cfg: &RunConfig, s: &Summary) -> Result<PathBuf, CliError> {
    let path = cfg.out_dir.join(format!("summary.{}", cfg.metrics_format.ext()));
    let content = match cfg.metrics_format {
        MetricsFormat::Csv => format!(
            "test_accuracy,train_wall_seconds,mode,n_workers,seed,n_train,n_test\n{:.6},{:.3},{},{},{},{},{}\n",
            s.test_accuracy, s.train_wall_seconds, s.mode, s.n_workers, s.seed, s.n_train, s.n_test
        ),
        MetricsFormat::Json => serde_json::to_string_pretty(s)
            .map_err(|e| CliError::Runtime(format!("metrics encode: {e}")))?,
    };
    write_file(&path, &content)?;
    Ok(path)
}

// ---------------------------------------------------------------------------
// Commands

fn ensure_out_dir(cfg: &RunConfig) -> Result<(), CliError> {
    fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", cfg.out_dir.display())))
}

fn validated(cfg: &RunConfig, n_features: usize) -> Result<(), CliError> {
    cfg.train
        .validate(n_features)
        .map_err(|e| CliError::Config(e.to_string()))
}

/// Trains per config with checkpointing and epoch logging; returns the
/// network and the two phase reports.
fn run_fit<P: ScalarArith>(
    p: P,
    cfg: &RunConfig,
    train: &Dataset,
    test: &Dataset,
) -> Result<(Network<P>, Vec<TrainReport>), CliError> {
    let input = input_geometry(train)?;
    let output = output_geometry(train, test)?;
    let mut net = build_network(p, input, cfg.hidden, output, &cfg.train)?;

    let interval = cfg.checkpoint_interval;
    let checkpoint = |net: &Network<P>, phase: &str, epoch: usize| {
        if interval == 0 || (epoch + 1) % interval != 0 {
            return;
        }
        let path = cfg.out_dir.join(format!("checkpoint_{phase}_{:04}.bin", epoch + 1));
        // Best effort: a failed snapshot must not kill a long run.
        if let Err(e) = fs::write(&path, net.serialize()) {
            eprintln!("[checkpoint] write {} failed: {e}", path.display());
        }
    };

    let hidden_report = fit_hidden_with(&mut net, train, &cfg.train, |net, e| {
        eprintln!(
            "[hidden] epoch {:>3}: {:6.1}s {:8.0} img/s swaps={}",
            e.epoch, e.wall_seconds, e.images_per_sec, e.mask_swaps
        );
        checkpoint(net, "hidden", e.epoch);
    })?;
    let output_report = fit_output_with(&mut net, train, &cfg.train, |net, e| {
        eprintln!(
            "[output] epoch {:>3}: {:6.1}s {:8.0} img/s",
            e.epoch, e.wall_seconds, e.images_per_sec
        );
        checkpoint(net, "output", e.epoch);
    })?;
    Ok((net, vec![hidden_report, output_report]))
}

fn with_mode<T>(
    mode: ArithMode,
    f64_case: impl FnOnce(F64Arith) -> Result<T, CliError>,
    f32_case: impl FnOnce(F32Arith) -> Result<T, CliError>,
    em_case: impl FnOnce(EmArith) -> Result<T, CliError>,
) -> Result<T, CliError> {
    match mode {
        ArithMode::F64 => f64_case(F64Arith),
        ArithMode::F32 => f32_case(F32Arith),
        ArithMode::Reduced(f) => em_case(EmArith::new(f)),
    }
}

pub fn cmd_train(config_path: &Path) -> Result<(), CliError> {
    let cfg = load_config(config_path)?;
    let (train, test) = load_datasets(&cfg)?;
    validated(&cfg, train.n_features())?;
    ensure_out_dir(&cfg)?;

    fn train_once<P: ScalarArith>(
        p: P,
        cfg: &RunConfig,
        train: &Dataset,
        test: &Dataset,
    ) -> Result<(Vec<u8>, Vec<TrainReport>, f64), CliError> {
        let (net, reports) = run_fit(p, cfg, train, test)?;
        let accuracy = evaluate(&net, test)?;
        Ok((net.serialize(), reports, accuracy))
    }

    let t0 = Instant::now();
    let (model_bytes, reports, accuracy) = with_mode(
        cfg.train.mode,
        |p| train_once(p, &cfg, &train, &test),
        |p| train_once(p, &cfg, &train, &test),
        |p| train_once(p, &cfg, &train, &test),
    )?;
    let wall = t0.elapsed().as_secs_f64();

    let model_path = cfg.out_dir.join(MODEL_FILE);
    fs::write(&model_path, &model_bytes)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", model_path.display())))?;
    write_reports(&cfg, &reports)?;
    write_summary(
        &cfg,
        &Summary {
            test_accuracy: accuracy,
            train_wall_seconds: wall,
            mode: cfg.train.mode,
            n_workers: cfg.train.n_workers,
            seed: cfg.train.seed,
            n_train: train.n_samples(),
            n_test: test.n_samples(),
        },
    )?;
    eprintln!(
        "[train] done in {wall:.1}s: test accuracy {:.4}, model at {}",
        accuracy,
        model_path.display()
    );
    Ok(())
}

pub fn cmd_eval(config_path: &Path, model_path: &Path) -> Result<(), CliError> {
    let cfg = load_config(config_path)?;
    let bytes = fs::read(model_path)
        .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", model_path.display())))?;
    let net = AnyNetwork::deserialize(&bytes)?;
    let (_, test) = load_datasets(&cfg)?;
    ensure_out_dir(&cfg)?;

    let t0 = Instant::now();
    let accuracy = match &net {
        AnyNetwork::F64(n) => evaluate(n, &test)?,
        AnyNetwork::F32(n) => evaluate(n, &test)?,
        AnyNetwork::Reduced(n) => evaluate(n, &test)?,
    };
    let wall = t0.elapsed().as_secs_f64();

    let path = cfg.out_dir.join(format!("eval.{}", cfg.metrics_format.ext()));
    let content = match cfg.metrics_format {
        MetricsFormat::Csv => format!(
            "test_accuracy,n_test,mode,eval_wall_seconds\n{:.6},{},{},{:.3}\n",
            accuracy,
            test.n_samples(),
            net.mode(),
            wall
        ),
        MetricsFormat::Json => serde_json::to_string_pretty(&serde_json::json!({
            "test_accuracy": accuracy,
            "n_test": test.n_samples(),
            "mode": net.mode().to_string(),
            "eval_wall_seconds": wall,
        }))
        .map_err(|e| CliError::Runtime(format!("metrics encode: {e}")))?,
    };
    write_file(&path, &content)?;
    eprintln!("[eval] {} samples, mode {}: accuracy {accuracy:.4}", test.n_samples(), net.mode());
    Ok(())
}

#[derive(serde::Serialize)]
struct SweepRow {
    format: String,
    test_accuracy: f64,
    wall_seconds: f64,
}

pub fn cmd_precision_sweep(config_path: &Path, formats: &[String]) -> Result<(), CliError> {
    let mut cfg = load_config(config_path)?;
    let modes: Vec<ArithMode> = formats
        .iter()
        .map(|name| {
            name.parse::<ArithMode>()
                .map_err(|e| CliError::Config(format!("--formats: {e}")))
        })
        .collect::<Result<_, _>>()?;

    let (train, test) = load_datasets(&cfg)?;
    validated(&cfg, train.n_features())?;
    ensure_out_dir(&cfg)?;
    cfg.checkpoint_interval = 0;

    let mut rows = Vec::with_capacity(modes.len());
    for (mode, name) in modes.iter().zip(formats) {
        cfg.train.mode = *mode;
        let t0 = Instant::now();
        let accuracy = with_mode(
            *mode,
            |p| Ok(evaluate(&run_fit(p, &cfg, &train, &test)?.0, &test)?),
            |p| Ok(evaluate(&run_fit(p, &cfg, &train, &test)?.0, &test)?),
            |p| Ok(evaluate(&run_fit(p, &cfg, &train, &test)?.0, &test)?),
        )?;
        let wall = t0.elapsed().as_secs_f64();
        eprintln!("[sweep] {name}: accuracy {accuracy:.4} in {wall:.1}s");
        rows.push(SweepRow { format: name.clone(), test_accuracy: accuracy, wall_seconds: wall });
    }

    let path = cfg.out_dir.join(format!("sweep.{}", cfg.metrics_format.ext()));
    let content = match cfg.metrics_format {
        MetricsFormat::Csv => {
            let mut s = String::from("format,test_accuracy,wall_seconds\n");
            for r in &rows {
                s.push_str(&format!("{},{:.6},{:.3}\n", r.format, r.test_accuracy, r.wall_seconds));
            }
            s
        }
        MetricsFormat::Json => serde_json::to_string_pretty(&rows)
            .map_err(|e| CliError::Runtime(format!("metrics encode: {e}")))?,
    };
    write_file(&path, &content)?;
    Ok(())
}

#[derive(serde::Serialize)]
struct BenchRow {
    batch_size: usize,
    train_images_per_sec: f64,
    infer_images_per_sec: f64,
}

pub fn cmd_bench(config_path: &Path, batch_sizes: &[usize]) -> Result<(), CliError> {
    let mut cfg = load_config(config_path)?;
    if batch_sizes.is_empty() {
        return Err(CliError::Config("--batch-sizes: at least one batch size required".into()));
    }
    if cfg.train.n_epochs1 == 0 {
        return Err(CliError::Config("bench needs n_epochs1 >= 1 to measure training".into()));
    }
    let (train, test) = load_datasets(&cfg)?;
    ensure_out_dir(&cfg)?;
    cfg.checkpoint_interval = 0;

    let mut rows = Vec::with_capacity(batch_sizes.len());
    for &bs in batch_sizes {
        cfg.train.batch_size = bs;
        validated(&cfg, train.n_features())?;
        let (train_ips, infer_ips) = with_mode(
            cfg.train.mode,
            |p| bench_one(p, &cfg, &train, &test),
            |p| bench_one(p, &cfg, &train, &test),
            |p| bench_one(p, &cfg, &train, &test),
        )?;
        eprintln!("[bench] batch {bs}: train {train_ips:.0} img/s, inference {infer_ips:.0} img/s");
        rows.push(BenchRow {
            batch_size: bs,
            train_images_per_sec: train_ips,
            infer_images_per_sec: infer_ips,
        });
    }

    let path = cfg.out_dir.join(format!("bench.{}", cfg.metrics_format.ext()));
    let content = match cfg.metrics_format {
        MetricsFormat::Csv => {
            let mut s = String::from("batch_size,train_images_per_sec,infer_images_per_sec\n");
            for r in &rows {
                s.push_str(&format!(
                    "{},{:.3},{:.3}\n",
                    r.batch_size, r.train_images_per_sec, r.infer_images_per_sec
                ));
            }
            s
        }
        MetricsFormat::Json => serde_json::to_string_pretty(&rows)
            .map_err(|e| CliError::Runtime(format!("metrics encode: {e}")))?,
    };
    write_file(&path, &content)?;
    Ok(())
}

/// One bench point: unsupervised training throughput over `n_epochs1`
/// epochs, then inference throughput over the test set.
pub fn bench_one<P: ScalarArith>(
    p: P,
    cfg: &RunConfig,
    train: &Dataset,
    test: &Dataset,
) -> Result<(f64, f64), CliError> {
    let input = input_geometry(train)?;
    let output = output_geometry(train, test)?;
    let mut net = build_network(p, input, cfg.hidden, output, &cfg.train)?;

    let t0 = Instant::now();
    let report = fit_hidden_with(&mut net, train, &cfg.train, |_, _| {})?;
    let train_wall = t0.elapsed().as_secs_f64();
    let images = (report.epochs.len() * train.n_samples()) as f64;
    let train_ips = if train_wall > 0.0 { images / train_wall } else { 0.0 };

    let t1 = Instant::now();
    evaluate(&net, test)?;
    let infer_wall = t1.elapsed().as_secs_f64();
    let infer_ips = if infer_wall > 0.0 { test.n_samples() as f64 / infer_wall } else { 0.0 };
    Ok((train_ips, infer_ips))
}

// ---------------------------------------------------------------------------
// Entry point

#[derive(Parser)]
#[command(name = "bcpnn", about = "Train and evaluate rate-based BCPNN models", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Two-phase training per the config; writes model and metrics files.
    Train { config: PathBuf },
    /// Evaluate a saved model on the config's test split.
    Eval { config: PathBuf, model: PathBuf },
    /// Train/evaluate once per arithmetic format with a shared seed.
    SweepPrecision {
        config: PathBuf,
        /// Comma-separated: bf14,bf15,bf16,bf20,bf24,bf28,f32,f64
        #[arg(long, value_delimiter = ',', required = true)]
        formats: Vec<String>,
    },
    /// Training/inference throughput per batch size.
    Bench {
        config: PathBuf,
        /// Comma-separated batch sizes, e.g. 16,512
        #[arg(long, value_delimiter = ',', required = true)]
        batch_sizes: Vec<usize>,
    },
}

pub fn main_entry() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Cmd::Train { config } => cmd_train(config),
        Cmd::Eval { config, model } => cmd_eval(config, model),
        Cmd::SweepPrecision { config, formats } => cmd_precision_sweep(config, formats),
        Cmd::Bench { config, batch_sizes } => cmd_bench(config, batch_sizes),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code())
        }
    }
}
