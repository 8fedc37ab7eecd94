//! Command-line entry point.
//!
//! Subcommands: `synth` (emit a synthetic sensor CSV), `prepare` (CSV to
//! window-cache files), `train`, `evaluate`, `sweep`, `ablate`, `params`,
//! and `verify` (the invariant/gradient self-test suite).
//!
//! Configuration is a flat set of section-prefixed keys (`model.kernel`,
//! `train.epochs`, ...) with precedence flag > config file > default. Every
//! run writes a manifest echoing the fully resolved configuration; feeding
//! that manifest back via `--config` reproduces the run. Exit codes: 0
//! success, 1 usage error, 2 data/format error, 3 internal invariant
//! violation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::dataio::{
    self, ColumnMap, Feature, NormScheme, Position, PrepareOptions, Side, SplitSpec, WindowOptions,
    WindowSet,
};
use crate::error::{Error, Result};
use crate::experiments::{
    emit_report, run_ablation, run_sweep, DataSource, ReportFormat, SweepSpec,
};
use crate::model::{build_model, Model, ModelConfig, VariantName};
use crate::numcore::{Precision, Rng};
use crate::synth::SynthConfig;
use crate::train::{evaluate, train, MetricsReport, TrainConfig};

const USAGE: &str = "\
usage: etlnet <command> [--config FILE] [--KEY VALUE ...] [outputs]

commands:
  synth      emit a synthetic sensor CSV            (--out FILE)
  prepare    CSV -> window cache                    (--data FILE... --out FILE |
                                                     --out-train FILE --out-val FILE)
  train      train a model                          (--train-cache F --val-cache F |
                                                     --data FILE...) --checkpoint FILE
  evaluate   score a checkpoint on cached windows   (--checkpoint F --cache F)
  sweep      run a variant x window x position grid (--out report.csv)
  ablate     run the six-variant ablation grid      (--out report.csv)
  params     print parameter counts                 (--variant NAME | --all)
  verify     run the gradient/metric/invariant self-test suite

configuration keys (flag > config file > default), settable as --KEY VALUE:
  run.seed run.precision run.workers run.source
  model.variant model.in_features model.window model.tcn_filters model.kernel
  model.dilations model.lstm_hidden model.dense_hidden model.dropout_rate
  model.bn_momentum model.bn_epsilon
  train.learning_rate train.beta1 train.beta2 train.adam_epsilon
  train.batch_size train.epochs train.shuffle train.early_stop_patience
  train.threshold
  data.scheme data.stride_divisor data.theta data.position data.side
  data.split data.holdout data.loo_index data.files data.column_map data.features
  synth.traces synth.duration synth.bumps synth.bump_len synth.bump_amplitude
  synth.gyro_amplitude synth.noise_std synth.base_speed
  sweep.variants sweep.windows sweep.positions
aliases: --seed --precision --workers --variant --window --epochs --threshold
         --data FILE (appends to data.files) --column-map FILE
";

/// Fully resolved run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub workers: usize,
    /// Data source for sweep/ablate: "synth" or "csv".
    pub source: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub scheme: NormScheme,
    pub stride_divisor: usize,
    pub theta: f64,
    pub position: Position,
    pub side: Side,
    pub split: String,
    pub holdout: Vec<String>,
    pub loo_index: usize,
    pub files: Vec<PathBuf>,
    pub column_map: Option<PathBuf>,
    /// "all" or "no_gyro".
    pub features: String,
    pub synth_traces: usize,
    pub synth: SynthConfig,
    pub sweep_variants: Vec<VariantName>,
    pub sweep_windows: Vec<usize>,
    pub sweep_positions: Vec<Position>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            precision: Precision::Standard,
            workers: std::env::var("ETLNET_WORKERS")
                .ok()
                .and_then(|v| v.parse().ok())
                .unwrap_or(1),
            source: "synth".to_string(),
            model: ModelConfig::for_variant(VariantName::Etlnet),
            train: TrainConfig::default(),
            scheme: NormScheme::MinMax,
            stride_divisor: 2,
            theta: 0.15,
            position: Position::Dashboard,
            side: Side::Right,
            split: "leave_one_out".to_string(),
            holdout: Vec::new(),
            loo_index: 0,
            files: Vec::new(),
            column_map: None,
            features: "all".to_string(),
            synth_traces: 3,
            synth: SynthConfig::default(),
            sweep_variants: vec![VariantName::Etlnet],
            sweep_windows: vec![100, 200, 300, 400, 500],
            sweep_positions: vec![Position::Dashboard],
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Format(format!("invalid value {v:?} for {key}")))
}

impl RunConfig {
    /// Sets one canonical key. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "run.seed" => self.seed = parse_num(key, value)?,
            "run.precision" => self.precision = value.parse()?,
            "run.workers" => self.workers = parse_num(key, value)?,
            "run.source" => match value {
                "synth" | "csv" => self.source = value.to_string(),
                other => return Err(Error::Format(format!("unknown source {other:?}"))),
            },
            _ if key.starts_with("model.") => self.model.set(&key[6..], value)?,
            _ if key.starts_with("train.") => self.train.set(&key[6..], value)?,
            "data.scheme" => self.scheme = value.parse()?,
            "data.stride_divisor" => self.stride_divisor = parse_num(key, value)?,
            "data.theta" => self.theta = parse_num(key, value)?,
            "data.position" => self.position = value.parse()?,
            "data.side" => self.side = value.parse()?,
            "data.split" => match value {
                "holdout" | "leave_one_out" => self.split = value.to_string(),
                other => return Err(Error::Format(format!("unknown split mode {other:?}"))),
            },
            "data.holdout" => {
                self.holdout = value
                    .split(',')
                    .filter(|s| !s.is_empty())
                    .map(|s| s.trim().to_string())
                    .collect();
            }
            "data.loo_index" => self.loo_index = parse_num(key, value)?,
            "data.files" => {
                self.files = value
                    .split(',')
                    .filter(|s| !s.is_empty())
                    .map(|s| PathBuf::from(s.trim()))
                    .collect();
            }
            "data.column_map" => {
                self.column_map = if value.is_empty() {
                    None
                } else {
                    Some(PathBuf::from(value))
                };
            }
            "data.features" => match value {
                "all" | "no_gyro" => self.features = value.to_string(),
                other => return Err(Error::Format(format!("unknown feature set {other:?}"))),
            },
            "synth.traces" => self.synth_traces = parse_num(key, value)?,
            "synth.duration" => self.synth.duration_samples = parse_num(key, value)?,
            "synth.bumps" => self.synth.bump_count = parse_num(key, value)?,
            "synth.bump_len" => self.synth.bump_len_samples = parse_num(key, value)?,
            "synth.bump_amplitude" => self.synth.bump_amplitude = parse_num(key, value)?,
            "synth.gyro_amplitude" => self.synth.gyro_amplitude = parse_num(key, value)?,
            "synth.noise_std" => self.synth.noise_std = parse_num(key, value)?,
            "synth.base_speed" => self.synth.base_speed = parse_num(key, value)?,
            "sweep.variants" => {
                self.sweep_variants = value
                    .split(',')
                    .filter(|s| !s.is_empty())
                    .map(|s| s.trim().parse())
                    .collect::<Result<_>>()?;
            }
            "sweep.windows" => {
                self.sweep_windows = value
                    .split(',')
                    .filter(|s| !s.is_empty())
                    .map(|s| parse_num::<usize>(key, s.trim()))
                    .collect::<Result<_>>()?;
            }
            "sweep.positions" => {
                self.sweep_positions = value
                    .split(',')
                    .filter(|s| !s.is_empty())
                    .map(|s| s.trim().parse())
                    .collect::<Result<_>>()?;
            }
            other => return Err(Error::Format(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies a key=value config file (unknown keys rejected).
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Format(format!(
                    "{}:{}: expected key=value, got {line:?}",
                    path.display(),
                    lineno + 1
                ))
            })?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        }
        Ok(())
    }

    /// Full key=value echo; a valid config file that reproduces this run.
    pub fn manifest(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("run.seed={}\n", self.seed));
        out.push_str(&format!("run.precision={}\n", self.precision));
        out.push_str(&format!("run.workers={}\n", self.workers));
        out.push_str(&format!("run.source={}\n", self.source));
        for line in self.model.to_kv().lines() {
            out.push_str(&format!("model.{line}\n"));
        }
        for line in self.train.to_kv().lines() {
            if line.starts_with("seed=") {
                continue; // the run seed governs
            }
            out.push_str(&format!("train.{line}\n"));
        }
        out.push_str(&format!("data.scheme={}\n", self.scheme));
        out.push_str(&format!("data.stride_divisor={}\n", self.stride_divisor));
        out.push_str(&format!("data.theta={}\n", self.theta));
        out.push_str(&format!("data.position={}\n", self.position));
        out.push_str(&format!("data.side={}\n", self.side));
        out.push_str(&format!("data.split={}\n", self.split));
        out.push_str(&format!("data.holdout={}\n", self.holdout.join(",")));
        out.push_str(&format!("data.loo_index={}\n", self.loo_index));
        out.push_str(&format!(
            "data.files={}\n",
            self.files
                .iter()
                .map(|p| p.display().to_string())
                .collect::<Vec<_>>()
                .join(",")
        ));
        out.push_str(&format!(
            "data.column_map={}\n",
            self.column_map
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        ));
        out.push_str(&format!("data.features={}\n", self.features));
        out.push_str(&format!("synth.traces={}\n", self.synth_traces));
        out.push_str(&format!("synth.duration={}\n", self.synth.duration_samples));
        out.push_str(&format!("synth.bumps={}\n", self.synth.bump_count));
        out.push_str(&format!("synth.bump_len={}\n", self.synth.bump_len_samples));
        out.push_str(&format!(
            "synth.bump_amplitude={}\n",
            self.synth.bump_amplitude
        ));
        out.push_str(&format!(
            "synth.gyro_amplitude={}\n",
            self.synth.gyro_amplitude
        ));
        out.push_str(&format!("synth.noise_std={}\n", self.synth.noise_std));
        out.push_str(&format!("synth.base_speed={}\n", self.synth.base_speed));
        out.push_str(&format!(
            "sweep.variants={}\n",
            self.sweep_variants
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(",")
        ));
        out.push_str(&format!(
            "sweep.windows={}\n",
            self.sweep_windows
                .iter()
                .map(|w| w.to_string())
                .collect::<Vec<_>>()
                .join(",")
        ));
        out.push_str(&format!(
            "sweep.positions={}\n",
            self.sweep_positions
                .iter()
                .map(|p| p.to_string())
                .collect::<Vec<_>>()
                .join(",")
        ));
        out
    }

    fn split_spec(&self) -> SplitSpec {
        match self.split.as_str() {
            "holdout" => SplitSpec::Holdout {
                val_traces: self.holdout.clone(),
            },
            _ => SplitSpec::LeaveOneOut {
                index: self.loo_index,
            },
        }
    }

    fn feature_list(&self) -> Vec<Feature> {
        if self.features == "no_gyro" {
            Feature::NO_GYRO.to_vec()
        } else {
            Feature::ALL.to_vec()
        }
    }

    fn window_options(&self) -> WindowOptions {
        WindowOptions {
            window: self.model.window,
            stride: (self.model.window / self.stride_divisor).max(1),
            threshold: self.theta,
            features: self.feature_list(),
        }
    }

    fn column_map(&self) -> Result<ColumnMap> {
        match &self.column_map {
            Some(p) => ColumnMap::from_file(p),
            None => Ok(ColumnMap::identity()),
        }
    }

    /// Builds the sweep grid description this configuration denotes.
    pub fn sweep_spec(&self) -> Result<SweepSpec> {
        let source = match self.source.as_str() {
            "synth" => DataSource::Synth {
                traces: self.synth_traces,
                template: self.synth.clone(),
            },
            _ => {
                if self.files.is_empty() {
                    return Err(Error::Arg(
                        "csv source needs data.files (--data FILE ...)".into(),
                    ));
                }
                DataSource::Csv {
                    paths: self.files.clone(),
                    column_map: self.column_map.clone(),
                }
            }
        };
        Ok(SweepSpec {
            variants: self.sweep_variants.clone(),
            windows: self.sweep_windows.clone(),
            positions: self.sweep_positions.clone(),
            side: self.side,
            source,
            split: self.split_spec(),
            scheme: self.scheme,
            stride_divisor: self.stride_divisor,
            threshold: self.theta,
            model: self.model.clone(),
            train: self.train.clone(),
            seed: self.seed,
            precision: self.precision,
            workers: self.workers,
        })
    }
}

// ---------------------------------------------------------------------------
// Argument parsing
// ---------------------------------------------------------------------------

struct ParsedArgs {
    config: RunConfig,
    /// Output/path options that are not configuration keys.
    outputs: BTreeMap<String, String>,
    flags: Vec<String>,
}

const OUTPUT_OPTS: [&str; 10] = [
    "out",
    "out-train",
    "out-val",
    "checkpoint",
    "history",
    "markdown",
    "manifest",
    "train-cache",
    "val-cache",
    "cache",
];

fn parse_args(args: &[String]) -> std::result::Result<ParsedArgs, String> {
    // First pass: locate --config so file values sit under flag overrides.
    let mut config = RunConfig::default();
    let mut i = 0;
    while i < args.len() {
        if args[i] == "--config" {
            let path = args
                .get(i + 1)
                .ok_or_else(|| "--config needs a file argument".to_string())?;
            config
                .apply_file(Path::new(path))
                .map_err(|e| format!("config file: {e}"))?;
        }
        i += 1;
    }

    let alias = |name: &str| -> Option<&'static str> {
        match name {
            "seed" => Some("run.seed"),
            "precision" => Some("run.precision"),
            "workers" => Some("run.workers"),
            "variant" => Some("model.variant"),
            "window" => Some("model.window"),
            "epochs" => Some("train.epochs"),
            "threshold" => Some("train.threshold"),
            "column-map" => Some("data.column_map"),
            _ => None,
        }
    };

    let mut outputs = BTreeMap::new();
    let mut flags = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let arg = &args[i];
        let Some(name) = arg.strip_prefix("--") else {
            return Err(format!("unexpected argument {arg:?}"));
        };
        if name == "all" {
            flags.push("all".to_string());
            i += 1;
            continue;
        }
        let value = args
            .get(i + 1)
            .ok_or_else(|| format!("--{name} needs a value"))?
            .clone();
        i += 2;
        if name == "config" {
            continue; // already applied
        }
        if name == "data" {
            let mut files = config.files.clone();
            files.push(PathBuf::from(&value));
            config.files = files;
            continue;
        }
        if OUTPUT_OPTS.contains(&name) {
            outputs.insert(name.to_string(), value);
            continue;
        }
        let key = alias(name).map(str::to_string).unwrap_or_else(|| name.to_string());
        if let Err(e) = config.set(&key, &value) {
            // Unknown keys at the command line are usage errors.
            if let Error::Format(msg) = &e {
                if msg.contains("unknown config key")
                    || msg.contains("unknown model key")
                    || msg.contains("unknown train key")
                {
                    return Err(format!("unknown flag --{name}"));
                }
            }
            return Err(e.to_string());
        }
    }
    Ok(ParsedArgs {
        config,
        outputs,
        flags,
    })
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}

fn print_metrics(m: &MetricsReport) {
    println!("accuracy  {:.6}", m.accuracy);
    println!(
        "precision {:.6}{}",
        m.precision,
        if m.precision_defined { "" } else { " (undefined: no positive predictions)" }
    );
    println!(
        "recall    {:.6}{}",
        m.recall,
        if m.recall_defined { "" } else { " (undefined: no positive labels)" }
    );
    println!(
        "f1        {:.6}{}",
        m.f1,
        if m.f1_defined { "" } else { " (undefined)" }
    );
    println!(
        "confusion tp={} fp={} tn={} fn={} (threshold {})",
        m.confusion.tp, m.confusion.fp, m.confusion.tn, m.confusion.fn_, m.threshold
    );
}

fn cmd_synth(p: &ParsedArgs) -> Result<()> {
    let out = p
        .outputs
        .get("out")
        .ok_or_else(|| Error::Arg("synth needs --out FILE".into()))?;
    let cfg = &p.config;
    let mut records = Vec::new();
    for i in 0..cfg.synth_traces.max(1) {
        let trace_cfg = SynthConfig {
            seed: Rng::child_seed(cfg.seed, 1_000_000 + i as u64),
            trace_id: format!("syn{i}"),
            ..cfg.synth.clone()
        };
        let mut trace = crate::synth::generate_trace(&trace_cfg)?;
        for r in &mut trace {
            r.position = cfg.position;
            r.side = cfg.side;
        }
        records.extend(trace);
    }
    let mut buf = Vec::new();
    dataio::write_csv(&records, &mut buf)?;
    std::fs::write(Path::new(out), buf)?;
    println!(
        "wrote {} samples ({} traces) to {out}",
        records.len(),
        cfg.synth_traces.max(1)
    );
    Ok(())
}

fn load_all_csv(cfg: &RunConfig) -> Result<Vec<dataio::SampleRecord>> {
    if cfg.files.is_empty() {
        return Err(Error::Arg("no input files; pass --data FILE".into()));
    }
    let map = cfg.column_map()?;
    let mut records = Vec::new();
    for f in &cfg.files {
        records.extend(dataio::load_csv(f, cfg.position, cfg.side, &map)?);
    }
    if records.is_empty() {
        return Err(Error::Data(format!(
            "no records match position {} side {}",
            cfg.position, cfg.side
        )));
    }
    Ok(records)
}

fn cmd_prepare(p: &ParsedArgs) -> Result<()> {
    let cfg = &p.config;
    let records = load_all_csv(cfg)?;
    match (p.outputs.get("out"), p.outputs.get("out-train"), p.outputs.get("out-val")) {
        (Some(out), None, None) => {
            // Whole-set cache: fit the normalizer on the set itself.
            let mut records = records;
            let stats = dataio::fit_normalizer(&records, cfg.scheme, "all")?;
            dataio::apply_normalizer(&mut records, &stats);
            let ws = dataio::make_windows(&records, &cfg.window_options(), cfg.precision)?;
            ws.save_cache(Path::new(out))?;
            let (pos, neg) = ws.class_counts();
            println!("wrote {} windows ({pos} positive / {neg} negative) to {out}", ws.len());
            Ok(())
        }
        (None, Some(out_train), Some(out_val)) => {
            let mut rng = Rng::new(cfg.seed);
            let out = dataio::split(
                &records,
                &cfg.split_spec(),
                &PrepareOptions {
                    scheme: cfg.scheme,
                    window: cfg.window_options(),
                    precision: cfg.precision,
                },
                &mut rng,
            )?;
            out.train.save_cache(Path::new(out_train))?;
            out.val.save_cache(Path::new(out_val))?;
            let (tp, tn) = out.train.class_counts();
            let (vp, vn) = out.val.class_counts();
            println!(
                "train: {} windows ({tp}/{tn}) from traces {:?} -> {out_train}",
                out.train.len(),
                out.train_traces
            );
            println!(
                "val:   {} windows ({vp}/{vn}) from traces {:?} -> {out_val}",
                out.val.len(),
                out.val_traces
            );
            Ok(())
        }
        _ => Err(Error::Arg(
            "prepare needs either --out FILE or both --out-train and --out-val".into(),
        )),
    }
}

fn check_cache_per_model(cfg: &RunConfig, ws: &WindowSet, what: &str) -> Result<()> {
    if ws.window != cfg.model.window {
        return Err(Error::Data(format!(
            "{what} cache window {} does not match configured model window {}",
            ws.window, cfg.model.window
        )));
    }
    if ws.channels() != cfg.model.in_features {
        return Err(Error::Data(format!(
            "{what} cache has {} channels but the model expects {} input features",
            ws.channels(),
            cfg.model.in_features
        )));
    }
    Ok(())
}

fn cmd_train(p: &ParsedArgs) -> Result<()> {
    let cfg = &p.config;
    let checkpoint = p
        .outputs
        .get("checkpoint")
        .ok_or_else(|| Error::Arg("train needs --checkpoint FILE".into()))?;

    let (train_ws, val_ws) = match (p.outputs.get("train-cache"), p.outputs.get("val-cache")) {
        (Some(tc), Some(vc)) => (
            WindowSet::load_cache(Path::new(tc))?,
            WindowSet::load_cache(Path::new(vc))?,
        ),
        (None, None) => {
            let records = load_all_csv(cfg)?;
            let mut rng = Rng::new(cfg.seed);
            let out = dataio::split(
                &records,
                &cfg.split_spec(),
                &PrepareOptions {
                    scheme: cfg.scheme,
                    window: cfg.window_options(),
                    precision: cfg.precision,
                },
                &mut rng,
            )?;
            (out.train, out.val)
        }
        _ => {
            return Err(Error::Arg(
                "train needs both --train-cache and --val-cache, or --data files".into(),
            ))
        }
    };
    check_cache_per_model(cfg, &train_ws, "training")?;
    check_cache_per_model(cfg, &val_ws, "validation")?;

    let mut model_rng = Rng::new(Rng::child_seed(cfg.seed, 1));
    let mut model = build_model(&cfg.model, &mut model_rng, cfg.precision)?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = Rng::child_seed(cfg.seed, 2);
    let history = train(&mut model, &train_ws, &val_ws, &train_cfg)?;

    model.save(Path::new(checkpoint))?;
    if let Some(history_path) = p.outputs.get("history") {
        write_text(Path::new(history_path), &history.to_csv())?;
    }
    let manifest_path = p
        .outputs
        .get("manifest")
        .cloned()
        .unwrap_or_else(|| format!("{checkpoint}.manifest"));
    write_text(Path::new(&manifest_path), &cfg.manifest())?;

    let last = history.epochs.last().expect("at least one epoch");
    println!(
        "trained {} epochs; final train loss {:.6}",
        history.epochs.len(),
        last.train_loss
    );
    print_metrics(&last.val);
    println!("checkpoint -> {checkpoint}");
    println!("manifest   -> {manifest_path}");
    Ok(())
}

fn cmd_evaluate(p: &ParsedArgs) -> Result<()> {
    let checkpoint = p
        .outputs
        .get("checkpoint")
        .ok_or_else(|| Error::Arg("evaluate needs --checkpoint FILE".into()))?;
    let cache = p
        .outputs
        .get("cache")
        .ok_or_else(|| Error::Arg("evaluate needs --cache FILE".into()))?;
    let model = Model::load(Path::new(checkpoint))?;
    let ws = WindowSet::load_cache(Path::new(cache))?;
    if ws.window != model.config().window || ws.channels() != model.config().in_features {
        return Err(Error::Data(format!(
            "cache geometry [{} x {}] does not match checkpoint [{} x {}]",
            ws.window,
            ws.channels(),
            model.config().window,
            model.config().in_features
        )));
    }
    let report = evaluate(&model, &ws, p.config.train.threshold)?;
    print_metrics(&report);
    Ok(())
}

fn run_grid(p: &ParsedArgs, ablation: bool) -> Result<()> {
    let cfg = &p.config;
    let out = p
        .outputs
        .get("out")
        .ok_or_else(|| Error::Arg("sweep/ablate need --out report.csv".into()))?;
    let spec = cfg.sweep_spec()?;
    let table = if ablation {
        run_ablation(&spec)?
    } else {
        run_sweep(&spec)?
    };
    write_text(Path::new(out), &emit_report(&table, ReportFormat::Csv))?;
    if let Some(md) = p.outputs.get("markdown") {
        write_text(Path::new(md), &emit_report(&table, ReportFormat::Markdown))?;
    }
    let manifest_path = p
        .outputs
        .get("manifest")
        .cloned()
        .unwrap_or_else(|| format!("{out}.manifest"));
    write_text(Path::new(&manifest_path), &cfg.manifest())?;

    let failed = table.rows.iter().filter(|r| r.error.is_some()).count();
    println!(
        "{} cells ({} failed) -> {out}",
        table.rows.len(),
        failed
    );
    println!("manifest -> {manifest_path}");
    for row in &table.rows {
        match (&row.metrics, &row.error) {
            (Some(m), _) => println!(
                "  {} w={} {}: acc {:.4} f1 {:.4}",
                row.variant, row.window, row.position, m.accuracy, m.f1
            ),
            (None, Some(e)) => println!("  {} w={} {}: FAILED ({e})", row.variant, row.window, row.position),
            _ => {}
        }
    }
    Ok(())
}

fn cmd_params(p: &ParsedArgs) -> Result<()> {
    let variants: Vec<VariantName> = if p.flags.contains(&"all".to_string()) {
        VariantName::ALL.to_vec()
    } else {
        vec![p.config.model.variant]
    };
    println!("{:<20} {:>12} {:>12}", "variant", "trainable", "total");
    for v in variants {
        let mut cfg = p.config.model.clone();
        let defaults = ModelConfig::for_variant(v);
        cfg.variant = v;
        cfg.in_features = defaults.in_features;
        let model = build_model(&cfg, &mut Rng::new(0), Precision::Standard)?;
        let (trainable, total) = model.count_params();
        println!("{:<20} {:>12} {:>12}", v.to_string(), trainable, total);
    }
    Ok(())
}

fn cmd_verify(p: &ParsedArgs) -> Result<()> {
    let checks = crate::verify::run_all(p.config.seed)?;
    let mut failed = 0;
    for c in &checks {
        if c.passed {
            println!("PASS {}: {}", c.name, c.detail);
        } else {
            failed += 1;
            println!("FAIL {}: {}", c.name, c.detail);
        }
    }
    println!("{} checks, {} failed", checks.len(), failed);
    if failed > 0 {
        return Err(Error::Contract(format!("{failed} self-checks failed")));
    }
    Ok(())
}

/// Dispatches a full argv (without the program name) and returns the exit
/// code: 0 success, 1 usage, 2 data/format, 3 internal invariant violation.
pub fn run(args: Vec<String>) -> i32 {
    let Some((command, rest)) = args.split_first() else {
        eprint!("{USAGE}");
        return 1;
    };
    let parsed = match parse_args(rest) {
        Ok(p) => p,
        Err(msg) => {
            eprintln!("error: {msg}");
            eprint!("{USAGE}");
            return 1;
        }
    };
    // Required output flags are usage errors, caught before dispatch.
    let missing: Option<String> = match command.as_str() {
        "synth" | "sweep" | "ablate" if !parsed.outputs.contains_key("out") => {
            Some(format!("{command} needs --out FILE"))
        }
        "train" if !parsed.outputs.contains_key("checkpoint") => {
            Some("train needs --checkpoint FILE".into())
        }
        "evaluate"
            if !(parsed.outputs.contains_key("checkpoint")
                && parsed.outputs.contains_key("cache")) =>
        {
            Some("evaluate needs --checkpoint FILE and --cache FILE".into())
        }
        "prepare" => {
            let whole = parsed.outputs.contains_key("out");
            let split = parsed.outputs.contains_key("out-train")
                && parsed.outputs.contains_key("out-val");
            if whole == split {
                Some("prepare needs either --out FILE or both --out-train and --out-val".into())
            } else {
                None
            }
        }
        _ => None,
    };
    if let Some(msg) = missing {
        eprintln!("error: {msg}");
        eprint!("{USAGE}");
        return 1;
    }
    let result = match command.as_str() {
        "synth" => cmd_synth(&parsed),
        "prepare" => cmd_prepare(&parsed),
        "train" => cmd_train(&parsed),
        "evaluate" => cmd_evaluate(&parsed),
        "sweep" => run_grid(&parsed, false),
        "ablate" => run_grid(&parsed, true),
        "params" => cmd_params(&parsed),
        "verify" => cmd_verify(&parsed),
        other => {
            eprintln!("error: unknown command {other:?}");
            eprint!("{USAGE}");
            return 1;
        }
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_overrides_file_overrides_default() {
        let dir = std::env::temp_dir().join(format!("etlnet-cli-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let cfg_path = dir.join("run.cfg");
        std::fs::write(&cfg_path, "run.seed=5\nmodel.kernel=2\n").unwrap();
        let args: Vec<String> = [
            "--config",
            cfg_path.to_str().unwrap(),
            "--seed",
            "9",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let parsed = parse_args(&args).unwrap();
        assert_eq!(parsed.config.seed, 9); // flag wins
        assert_eq!(parsed.config.model.kernel, 2); // file wins over default
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn unknown_flag_is_a_usage_error() {
        let args = vec!["--nonsense".to_string(), "1".to_string()];
        assert!(parse_args(&args).is_err());
    }

    #[test]
    fn unknown_config_file_key_is_a_format_error() {
        let dir = std::env::temp_dir().join(format!("etlnet-cli2-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let cfg_path = dir.join("bad.cfg");
        std::fs::write(&cfg_path, "bogus.key=1\n").unwrap();
        let mut cfg = RunConfig::default();
        assert!(matches!(
            cfg.apply_file(&cfg_path).unwrap_err(),
            Error::Format(_)
        ));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn manifest_parses_back_identically() {
        let mut cfg = RunConfig::default();
        cfg.set("run.seed", "17").unwrap();
        cfg.set("model.variant", "dual_tcn").unwrap();
        cfg.set("sweep.windows", "32,64").unwrap();
        cfg.set("data.holdout", "a,b").unwrap();
        let manifest = cfg.manifest();

        let dir = std::env::temp_dir().join(format!("etlnet-cli3-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.cfg");
        std::fs::write(&path, &manifest).unwrap();
        let mut reparsed = RunConfig::default();
        reparsed.apply_file(&path).unwrap();
        assert_eq!(reparsed.manifest(), manifest);
        std::fs::remove_dir_all(&dir).ok();
    }
}
