//! Sensor CSV ingestion and the preprocessing chain: feature selection,
//! normalization, windowing, labeling, class balancing, and trace-level
//! train/validation splitting.
//!
//! The canonical CSV layout is one sample per row with a header. Required
//! columns: `timestamp`, `acc_x`, `acc_y`, `acc_z`, `gyro_x`, `gyro_y`,
//! `gyro_z`, `speed`, `label`; optional: `position`, `side`, `trace_id`.
//! A column-map file (`canonical=actual_header` lines) translates these
//! names to whatever headers a particular dataset distribution uses.
//!
//! Normalization statistics are always fitted on the training split only and
//! reused on validation, so no information leaks across the split.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::{Precision, Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Position {
    BelowSuspension,
    AboveSuspension,
    Dashboard,
}

impl Position {
    pub const ALL: [Position; 3] = [
        Position::BelowSuspension,
        Position::AboveSuspension,
        Position::Dashboard,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Position::BelowSuspension => "below_suspension",
            Position::AboveSuspension => "above_suspension",
            Position::Dashboard => "dashboard",
        }
    }
}

impl fmt::Display for Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Position {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Position::ALL
            .iter()
            .copied()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Format(format!("unknown sensor position {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn as_str(&self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Side {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "left" => Ok(Side::Left),
            "right" => Ok(Side::Right),
            other => Err(Error::Format(format!("unknown side {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Bump,
    NoBump,
}

/// One timestamped inertial reading.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub timestamp: f64,
    pub acc: [f64; 3],
    pub gyro: [f64; 3],
    pub speed: f64,
    pub label: Label,
    pub position: Position,
    pub side: Side,
    pub trace_id: String,
}

/// The seven model input features, in canonical column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Feature {
    AccX,
    AccY,
    AccZ,
    GyroX,
    GyroY,
    GyroZ,
    Speed,
}

impl Feature {
    pub const ALL: [Feature; 7] = [
        Feature::AccX,
        Feature::AccY,
        Feature::AccZ,
        Feature::GyroX,
        Feature::GyroY,
        Feature::GyroZ,
        Feature::Speed,
    ];

    /// The reduced set: accelerometer and speed, no gyroscope.
    pub const NO_GYRO: [Feature; 4] =
        [Feature::AccX, Feature::AccY, Feature::AccZ, Feature::Speed];

    pub fn get(&self, r: &SampleRecord) -> f64 {
        match self {
            Feature::AccX => r.acc[0],
            Feature::AccY => r.acc[1],
            Feature::AccZ => r.acc[2],
            Feature::GyroX => r.gyro[0],
            Feature::GyroY => r.gyro[1],
            Feature::GyroZ => r.gyro[2],
            Feature::Speed => r.speed,
        }
    }

    fn set(&self, r: &mut SampleRecord, v: f64) {
        match self {
            Feature::AccX => r.acc[0] = v,
            Feature::AccY => r.acc[1] = v,
            Feature::AccZ => r.acc[2] = v,
            Feature::GyroX => r.gyro[0] = v,
            Feature::GyroY => r.gyro[1] = v,
            Feature::GyroZ => r.gyro[2] = v,
            Feature::Speed => r.speed = v,
        }
    }
}

// ---------------------------------------------------------------------------
// CSV loading
// ---------------------------------------------------------------------------

const REQUIRED_COLUMNS: [&str; 9] = [
    "timestamp", "acc_x", "acc_y", "acc_z", "gyro_x", "gyro_y", "gyro_z", "speed", "label",
];

/// Maps canonical column names to the headers actually present in a file.
#[derive(Debug, Clone, Default)]
pub struct ColumnMap {
    map: BTreeMap<String, String>,
}

impl ColumnMap {
    /// Identity mapping: canonical names are the file headers.
    pub fn identity() -> ColumnMap {
        ColumnMap::default()
    }

    /// Parses `canonical=actual` lines; `#` starts a comment.
    pub fn from_file(path: &Path) -> Result<ColumnMap> {
        let text = std::fs::read_to_string(path)?;
        let mut map = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Format(format!(
                    "{}:{}: expected canonical=actual, got {line:?}",
                    path.display(),
                    lineno + 1
                ))
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(ColumnMap { map })
    }

    fn actual<'a>(&'a self, canonical: &'a str) -> &'a str {
        self.map
            .get(canonical)
            .map(String::as_str)
            .unwrap_or(canonical)
    }
}

fn parse_label(s: &str) -> Result<Label> {
    match s {
        "bump" | "1" => Ok(Label::Bump),
        "no_bump" | "0" => Ok(Label::NoBump),
        other => Err(Error::Format(format!("unknown label {other:?}"))),
    }
}

/// Loads a sensor CSV, keeping only rows recorded at the requested position
/// and side. Files without position/side columns are assumed to match the
/// request. Malformed rows are rejected with their line number.
pub fn load_csv(
    path: &Path,
    position: Position,
    side: Side,
    columns: &ColumnMap,
) -> Result<Vec<SampleRecord>> {
    let file = std::fs::File::open(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })?;
    let mut lines = std::io::BufReader::new(file).lines();
    let header = match lines.next() {
        Some(h) => h?,
        None => return Err(Error::Format(format!("{}: empty file", path.display()))),
    };
    let headers: Vec<&str> = header.split(',').map(str::trim).collect();
    let find = |canonical: &str| -> Option<usize> {
        let actual = columns.actual(canonical);
        headers.iter().position(|h| *h == actual)
    };
    let mut idx = BTreeMap::new();
    for col in REQUIRED_COLUMNS {
        let i = find(col).ok_or_else(|| {
            Error::Format(format!(
                "{}: missing required column {:?}",
                path.display(),
                columns.actual(col)
            ))
        })?;
        idx.insert(col, i);
    }
    let pos_idx = find("position");
    let side_idx = find("side");
    let trace_idx = find("trace_id");
    let default_trace = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "trace".to_string());

    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2; // header is line 1
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < headers.len() {
            return Err(Error::Format(format!(
                "{}:{lineno}: expected {} fields, got {}",
                path.display(),
                headers.len(),
                fields.len()
            )));
        }
        let num = |col: &str| -> Result<f64> {
            let v = fields[idx[col]];
            v.parse().map_err(|_| {
                Error::Format(format!(
                    "{}:{lineno}: non-numeric {col} value {v:?}",
                    path.display()
                ))
            })
        };
        let row_position = match pos_idx {
            Some(p) => fields[p]
                .parse()
                .map_err(|e: Error| Error::Format(format!("{}:{lineno}: {e}", path.display())))?,
            None => position,
        };
        let row_side = match side_idx {
            Some(p) => fields[p]
                .parse()
                .map_err(|e: Error| Error::Format(format!("{}:{lineno}: {e}", path.display())))?,
            None => side,
        };
        if row_position != position || row_side != side {
            continue;
        }
        let label = parse_label(fields[idx["label"]])
            .map_err(|e| Error::Format(format!("{}:{lineno}: {e}", path.display())))?;
        records.push(SampleRecord {
            timestamp: num("timestamp")?,
            acc: [num("acc_x")?, num("acc_y")?, num("acc_z")?],
            gyro: [num("gyro_x")?, num("gyro_y")?, num("gyro_z")?],
            speed: num("speed")?,
            label,
            position: row_position,
            side: row_side,
            trace_id: match trace_idx {
                Some(p) => fields[p].to_string(),
                None => default_trace.clone(),
            },
        });
    }

    // Timestamps must be strictly increasing within each trace.
    let mut last: BTreeMap<&str, f64> = BTreeMap::new();
    for r in &records {
        if let Some(&prev) = last.get(r.trace_id.as_str()) {
            if r.timestamp <= prev {
                return Err(Error::Data(format!(
                    "{}: non-monotone timestamps in trace {:?} ({} after {})",
                    path.display(),
                    r.trace_id,
                    r.timestamp,
                    prev
                )));
            }
        }
        last.insert(r.trace_id.as_str(), r.timestamp);
    }
    Ok(records)
}

/// Writes records in the canonical CSV layout.
pub fn write_csv(records: &[SampleRecord], out: &mut dyn Write) -> Result<()> {
    writeln!(
        out,
        "timestamp,acc_x,acc_y,acc_z,gyro_x,gyro_y,gyro_z,speed,label,position,side,trace_id"
    )?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.timestamp,
            r.acc[0],
            r.acc[1],
            r.acc[2],
            r.gyro[0],
            r.gyro[1],
            r.gyro[2],
            r.speed,
            match r.label {
                Label::Bump => "bump",
                Label::NoBump => "no_bump",
            },
            r.position,
            r.side,
            r.trace_id
        )?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormScheme {
    MinMax,
    ZScore,
}

impl fmt::Display for NormScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NormScheme::MinMax => write!(f, "minmax"),
            NormScheme::ZScore => write!(f, "zscore"),
        }
    }
}

impl std::str::FromStr for NormScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "minmax" => Ok(NormScheme::MinMax),
            "zscore" => Ok(NormScheme::ZScore),
            other => Err(Error::Arg(format!(
                "unknown normalization scheme {other:?}, expected minmax or zscore"
            ))),
        }
    }
}

/// Per-feature normalization statistics. For min-max the pair is
/// `(min, max)`, for z-score `(mean, std)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub scheme: NormScheme,
    pub per_feature: Vec<(f64, f64)>,
    /// Identifier of the split the stats were fitted on.
    pub fitted_on: String,
}

pub fn fit_normalizer(
    records: &[SampleRecord],
    scheme: NormScheme,
    fitted_on: &str,
) -> Result<NormStats> {
    if records.is_empty() {
        return Err(Error::Arg("cannot fit a normalizer on zero records".into()));
    }
    if scheme == NormScheme::ZScore && records.len() < 2 {
        return Err(Error::Arg(
            "z-score normalization needs at least 2 records".into(),
        ));
    }
    let per_feature = Feature::ALL
        .iter()
        .map(|f| match scheme {
            NormScheme::MinMax => {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for r in records {
                    let v = f.get(r);
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
                (lo, hi)
            }
            NormScheme::ZScore => {
                let n = records.len() as f64;
                let mean = records.iter().map(|r| f.get(r)).sum::<f64>() / n;
                let var = records
                    .iter()
                    .map(|r| (f.get(r) - mean) * (f.get(r) - mean))
                    .sum::<f64>()
                    / n;
                (mean, var.sqrt())
            }
        })
        .collect();
    Ok(NormStats {
        scheme,
        per_feature,
        fitted_on: fitted_on.to_string(),
    })
}

/// Maps every feature through the fitted statistics. Degenerate features
/// (zero range or zero spread) map to 0; out-of-range validation values are
/// deliberately not clipped.
pub fn apply_normalizer(records: &mut [SampleRecord], stats: &NormStats) {
    for r in records {
        for (f, &(a, b)) in Feature::ALL.iter().zip(&stats.per_feature) {
            let v = f.get(r);
            let normed = match stats.scheme {
                NormScheme::MinMax => {
                    if b > a {
                        (v - a) / (b - a)
                    } else {
                        0.0
                    }
                }
                NormScheme::ZScore => {
                    if b > 0.0 {
                        (v - a) / b
                    } else {
                        0.0
                    }
                }
            };
            f.set(r, normed);
        }
    }
}

// ---------------------------------------------------------------------------
// Windowing
// ---------------------------------------------------------------------------

/// Windowing parameters.
#[derive(Debug, Clone)]
pub struct WindowOptions {
    pub window: usize,
    pub stride: usize,
    /// A window is positive when the fraction of bump-labeled samples in it
    /// is at least this threshold; with threshold 0 a single bump sample
    /// suffices.
    pub threshold: f64,
    pub features: Vec<Feature>,
}

impl WindowOptions {
    /// Stride defaults to half the window (50% overlap), threshold to 0.15.
    pub fn new(window: usize) -> WindowOptions {
        WindowOptions {
            window,
            stride: (window / 2).max(1),
            threshold: 0.15,
            features: Feature::ALL.to_vec(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.window == 0 || self.stride == 0 {
            return Err(Error::Arg("window and stride must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Arg(format!(
                "label threshold {} must lie in [0, 1]",
                self.threshold
            )));
        }
        if self.features.is_empty() {
            return Err(Error::Arg("feature list must be non-empty".into()));
        }
        Ok(())
    }
}

/// Fixed-length labeled windows ready for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSet {
    /// `[n, window, channels]`.
    pub x: Tensor,
    /// `[n]` of 0/1.
    pub y: Tensor,
    pub window: usize,
    pub stride: usize,
    pub threshold: f64,
    /// `(trace_id, start index)` per window.
    pub provenance: Vec<(String, usize)>,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.x.shape()[2]
    }

    /// `(positive, negative)` window counts.
    pub fn class_counts(&self) -> (usize, usize) {
        let pos = self.y.data().iter().filter(|&&v| v == 1.0).count();
        (pos, self.y.len() - pos)
    }

    /// Copies the selected windows into a new set, in the given order.
    fn select(&self, indices: &[usize]) -> Result<WindowSet> {
        let (_, w, c) = self.x.dim3()?;
        let mut x = Vec::with_capacity(indices.len() * w * c);
        let mut y = Vec::with_capacity(indices.len());
        let mut provenance = Vec::with_capacity(indices.len());
        for &i in indices {
            x.extend_from_slice(&self.x.data()[i * w * c..(i + 1) * w * c]);
            y.push(self.y.data()[i]);
            provenance.push(self.provenance[i].clone());
        }
        Ok(WindowSet {
            x: Tensor::from_data(&[indices.len(), w, c], x, self.x.precision())?,
            y: Tensor::from_data(&[indices.len()], y, self.y.precision())?,
            window: self.window,
            stride: self.stride,
            threshold: self.threshold,
            provenance,
        })
    }

    /// Concatenates window sets with identical geometry.
    pub fn concat(sets: &[WindowSet]) -> Result<WindowSet> {
        let first = sets
            .first()
            .ok_or_else(|| Error::Data("cannot concatenate zero window sets".into()))?;
        let (_, w, c) = first.x.dim3()?;
        let mut x = Vec::new();
        let mut y = Vec::new();
        let mut provenance = Vec::new();
        for s in sets {
            let (_, sw, sc) = s.x.dim3()?;
            if (sw, sc) != (w, c) {
                return Err(Error::Dim(format!(
                    "window sets disagree on geometry: [{w}, {c}] vs [{sw}, {sc}]"
                )));
            }
            x.extend_from_slice(s.x.data());
            y.extend_from_slice(s.y.data());
            provenance.extend(s.provenance.iter().cloned());
        }
        let n = y.len();
        Ok(WindowSet {
            x: Tensor::from_data(&[n, w, c], x, first.x.precision())?,
            y: Tensor::from_data(&[n], y, first.y.precision())?,
            window: first.window,
            stride: first.stride,
            threshold: first.threshold,
            provenance,
        })
    }

    // -- cache file ----------------------------------------------------------
    //
    // magic "ETLW", u32 window, u32 stride, f32 threshold, u32 channels,
    // u32 count, x as little-endian f32, y as bytes.

    pub fn save_cache(&self, path: &Path) -> Result<()> {
        let (n, w, c) = self.x.dim3()?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(b"ETLW")?;
        f.write_all(&(w as u32).to_le_bytes())?;
        f.write_all(&(self.stride as u32).to_le_bytes())?;
        f.write_all(&(self.threshold as f32).to_le_bytes())?;
        f.write_all(&(c as u32).to_le_bytes())?;
        f.write_all(&(n as u32).to_le_bytes())?;
        for &v in self.x.data() {
            f.write_all(&(v as f32).to_le_bytes())?;
        }
        for &v in self.y.data() {
            f.write_all(&[if v == 1.0 { 1u8 } else { 0u8 }])?;
        }
        Ok(())
    }

    pub fn load_cache(path: &Path) -> Result<WindowSet> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)?;
        if &magic != b"ETLW" {
            return Err(Error::Format(format!(
                "{} is not a window cache (bad magic)",
                path.display()
            )));
        }
        fn next_u32(f: &mut dyn Read) -> Result<u32> {
            let mut buf = [0u8; 4];
            f.read_exact(&mut buf)?;
            Ok(u32::from_le_bytes(buf))
        }
        let w = next_u32(&mut f)? as usize;
        let stride = next_u32(&mut f)? as usize;
        let mut f32buf = [0u8; 4];
        f.read_exact(&mut f32buf)?;
        let threshold = f32::from_le_bytes(f32buf) as f64;
        let c = next_u32(&mut f)? as usize;
        let n = next_u32(&mut f)? as usize;
        let mut x = Vec::with_capacity(n * w * c);
        let mut buf = [0u8; 4];
        for _ in 0..n * w * c {
            f.read_exact(&mut buf)?;
            x.push(f32::from_le_bytes(buf) as f64);
        }
        let mut y = Vec::with_capacity(n);
        let mut byte = [0u8; 1];
        for _ in 0..n {
            f.read_exact(&mut byte)?;
            y.push(byte[0] as f64);
        }
        Ok(WindowSet {
            x: Tensor::from_data(&[n, w, c], x, Precision::Standard)?,
            y: Tensor::from_data(&[n], y, Precision::Standard)?,
            window: w,
            stride,
            threshold,
            provenance: (0..n).map(|i| ("cache".to_string(), i)).collect(),
        })
    }
}

/// Groups records by trace in first-appearance order.
fn group_by_trace(records: &[SampleRecord]) -> Vec<(String, Vec<&SampleRecord>)> {
    let mut out: Vec<(String, Vec<&SampleRecord>)> = Vec::new();
    for r in records {
        match out.iter_mut().find(|(id, _)| *id == r.trace_id) {
            Some((_, rows)) => rows.push(r),
            None => out.push((r.trace_id.clone(), vec![r])),
        }
    }
    out
}

/// Slices traces into fixed-length windows. A trace of length `len` yields
/// `floor((len - W) / S) + 1` windows (zero when `len < W`); windows never
/// span trace boundaries.
pub fn make_windows(
    records: &[SampleRecord],
    opts: &WindowOptions,
    precision: Precision,
) -> Result<WindowSet> {
    opts.validate()?;
    let w = opts.window;
    let s = opts.stride;
    let c = opts.features.len();
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut provenance = Vec::new();
    for (trace_id, rows) in group_by_trace(records) {
        if rows.len() < w {
            continue;
        }
        let count = (rows.len() - w) / s + 1;
        for k in 0..count {
            let start = k * s;
            let slice = &rows[start..start + w];
            for r in slice {
                for f in &opts.features {
                    x.push(f.get(r));
                }
            }
            let bumps = slice.iter().filter(|r| r.label == Label::Bump).count();
            let positive = if opts.threshold > 0.0 {
                (bumps as f64 / w as f64) >= opts.threshold
            } else {
                bumps >= 1
            };
            y.push(if positive { 1.0 } else { 0.0 });
            provenance.push((trace_id.clone(), start));
        }
    }
    let n = y.len();
    Ok(WindowSet {
        x: Tensor::from_data(&[n, w, c], x, precision)?,
        y: Tensor::from_data(&[n], y, precision)?,
        window: w,
        stride: s,
        threshold: opts.threshold,
        provenance,
    })
}

/// Random undersampling of the majority class to the minority count, with
/// the result order shuffled. Deterministic for a given rng seed.
pub fn balance_classes(ws: &WindowSet, rng: &mut Rng) -> Result<WindowSet> {
    let mut pos: Vec<usize> = Vec::new();
    let mut neg: Vec<usize> = Vec::new();
    for (i, &v) in ws.y.data().iter().enumerate() {
        if v == 1.0 {
            pos.push(i);
        } else {
            neg.push(i);
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Data(format!(
            "cannot balance a single-class window set ({} positive, {} negative)",
            pos.len(),
            neg.len()
        )));
    }
    let keep = pos.len().min(neg.len());
    rng.shuffle(&mut pos);
    rng.shuffle(&mut neg);
    let mut indices: Vec<usize> = pos[..keep].iter().chain(&neg[..keep]).copied().collect();
    rng.shuffle(&mut indices);
    ws.select(&indices)
}

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

/// How to divide traces between training and validation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SplitSpec {
    /// Hold out a fixed set of trace ids for validation.
    Holdout { val_traces: Vec<String> },
    /// Hold out the i-th trace (traces ordered by id) for validation.
    LeaveOneOut { index: usize },
}

/// Everything the preprocessing chain needs besides the records.
#[derive(Debug, Clone)]
pub struct PrepareOptions {
    pub scheme: NormScheme,
    pub window: WindowOptions,
    pub precision: Precision,
}

/// Output of [`split`]: leakage-safe train/validation window sets plus the
/// statistics that were fitted on the training side.
#[derive(Debug)]
pub struct SplitOutput {
    pub train: WindowSet,
    pub val: WindowSet,
    pub stats: NormStats,
    pub train_traces: Vec<String>,
    pub val_traces: Vec<String>,
}

/// Splits records by trace, then runs the full chain in leakage-safe order:
/// normalization statistics are fitted on the training traces only, both
/// sides are windowed, and only the training side is class-balanced.
pub fn split(
    records: &[SampleRecord],
    spec: &SplitSpec,
    opts: &PrepareOptions,
    rng: &mut Rng,
) -> Result<SplitOutput> {
    let mut trace_ids: Vec<String> = Vec::new();
    for r in records {
        if !trace_ids.contains(&r.trace_id) {
            trace_ids.push(r.trace_id.clone());
        }
    }
    trace_ids.sort();

    let val_set: Vec<String> = match spec {
        SplitSpec::Holdout { val_traces } => {
            for t in val_traces {
                if !trace_ids.contains(t) {
                    return Err(Error::Arg(format!(
                        "holdout trace {t:?} does not exist; known traces: {trace_ids:?}"
                    )));
                }
            }
            val_traces.clone()
        }
        SplitSpec::LeaveOneOut { index } => {
            if *index >= trace_ids.len() {
                return Err(Error::Arg(format!(
                    "leave-one-out index {index} out of range for {} traces",
                    trace_ids.len()
                )));
            }
            vec![trace_ids[*index].clone()]
        }
    };
    let train_traces: Vec<String> = trace_ids
        .iter()
        .filter(|t| !val_set.contains(t))
        .cloned()
        .collect();
    if train_traces.is_empty() || val_set.is_empty() {
        return Err(Error::Data(
            "split leaves one side empty; need at least one trace per side".into(),
        ));
    }

    let mut train_records: Vec<SampleRecord> = records
        .iter()
        .filter(|r| train_traces.contains(&r.trace_id))
        .cloned()
        .collect();
    let mut val_records: Vec<SampleRecord> = records
        .iter()
        .filter(|r| val_set.contains(&r.trace_id))
        .cloned()
        .collect();

    let stats = fit_normalizer(&train_records, opts.scheme, &train_traces.join("+"))?;
    apply_normalizer(&mut train_records, &stats);
    apply_normalizer(&mut val_records, &stats);

    let train_raw = make_windows(&train_records, &opts.window, opts.precision)?;
    let val = make_windows(&val_records, &opts.window, opts.precision)?;
    if val.is_empty() {
        return Err(Error::Data(
            "validation side produced zero windows; traces shorter than the window?".into(),
        ));
    }
    let train = balance_classes(&train_raw, rng)?;
    Ok(SplitOutput {
        train,
        val,
        stats,
        train_traces,
        val_traces: val_set,
    })
}
