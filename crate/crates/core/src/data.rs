//! Regression tables, synthetic waveforms, standardization and windowing.

use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Inputs (`N x D`) and targets (`N x M`).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Array2<f64>,
    pub targets: Array2<f64>,
}

impl Dataset {
    pub fn new(inputs: Array2<f64>, targets: Array2<f64>) -> Result<Self> {
        if inputs.nrows() != targets.nrows() {
            return Err(Error::DimensionMismatch {
                expected: inputs.nrows(),
                found: targets.nrows(),
            });
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.targets.ncols()
    }

    /// Rows `rows`, in the given order.
    pub fn select(&self, rows: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select(Axis(0), rows),
            targets: self.targets.select(Axis(0), rows),
        }
    }
}

/// A parsed table before standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    pub name: String,
    pub input_names: Vec<String>,
    pub target_names: Vec<String>,
    pub data: Dataset,
}

impl RawTable {
    pub fn n(&self) -> usize {
        self.data.len()
    }

    pub fn d(&self) -> usize {
        self.data.input_dim()
    }

    pub fn m(&self) -> usize {
        self.data.output_dim()
    }
}

/// One entry of the dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub name: String,
    pub file: String,
    pub d: usize,
    pub m: usize,
    pub n: usize,
    pub sha256: String,
    #[serde(default)]
    pub source: String,
}

/// The manifest file (`manifest.json`) describing the local dataset files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRegistry {
    #[serde(skip)]
    pub root: PathBuf,
    pub datasets: Vec<DatasetEntry>,
}

impl DatasetRegistry {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut reg: DatasetRegistry =
            serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        reg.root = root.to_path_buf();
        Ok(reg)
    }

    pub fn entry(&self, name: &str) -> Option<&DatasetEntry> {
        self.datasets.iter().find(|d| d.name == name)
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Load a dataset by manifest name, checking checksum and shape.
pub fn load_uci(name: &str, registry: &DatasetRegistry) -> Result<RawTable> {
    let entry = registry
        .entry(name)
        .ok_or_else(|| Error::UnknownDataset(name.to_string()))?;
    let path = registry.root.join(&entry.file);
    let found = sha256_file(&path)?;
    if !found.eq_ignore_ascii_case(&entry.sha256) {
        return Err(Error::Checksum {
            path,
            expected: entry.sha256.clone(),
            found,
        });
    }
    let table = read_csv(&path, entry.m, &entry.name)?;
    if table.d() != entry.d || table.n() != entry.n {
        return Err(Error::Schema(format!(
            "{}: manifest says N={} D={}, file has N={} D={}",
            entry.name,
            entry.n,
            entry.d,
            table.n(),
            table.d()
        )));
    }
    Ok(table)
}

/// Parse a CSV with one header row whose last `targets` columns are targets.
pub fn read_csv(path: &Path, targets: usize, name: &str) -> Result<RawTable> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_csv(file, targets, name)
}

pub fn parse_csv<R: std::io::Read>(reader: R, targets: usize, name: &str) -> Result<RawTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| Error::Parse {
            row: 0,
            column: 0,
            message: e.to_string(),
        })?
        .clone();
    let width = header.len();
    if width == 0 || header.iter().all(str::is_empty) {
        return Err(Error::Parse {
            row: 0,
            column: 0,
            message: "missing header row".into(),
        });
    }
    if targets == 0 || targets >= width {
        return Err(Error::Schema(format!(
            "{width} columns cannot hold {targets} target column(s) and at least one input"
        )));
    }
    let mut values = Vec::new();
    let mut rows = 0;
    for (r, record) in rdr.records().enumerate() {
        // row numbers are 1-based lines of the file, header is line 1
        let line = r + 2;
        let record = record.map_err(|e| Error::Parse {
            row: line,
            column: 0,
            message: e.to_string(),
        })?;
        if record.len() != width {
            return Err(Error::Schema(format!(
                "line {line} has {} columns, header has {width}",
                record.len()
            )));
        }
        for (c, field) in record.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                row: line,
                column: c + 1,
                message: format!("{field:?} is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row: line,
                    column: c + 1,
                    message: format!("{field:?} is not finite"),
                });
            }
            values.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Parse {
            row: 1,
            column: 0,
            message: "no data rows".into(),
        });
    }
    let all = Array2::from_shape_vec((rows, width), values).expect("row-major table");
    let d = width - targets;
    let names: Vec<String> = header.iter().map(str::to_string).collect();
    Ok(RawTable {
        name: name.to_string(),
        input_names: names[..d].to_vec(),
        target_names: names[d..].to_vec(),
        data: Dataset {
            inputs: all.slice(s![.., ..d]).to_owned(),
            targets: all.slice(s![.., d..]).to_owned(),
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub mean: f64,
    pub std: f64,
}

impl ColumnStats {
    fn of(column: ndarray::ArrayView1<f64>) -> Self {
        let n = column.len() as f64;
        let mean = column.sum() / n;
        let var = column.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
        }
    }

    fn degenerate(&self) -> bool {
        !(self.std > 1e-12 * self.mean.abs().max(1.0))
    }
}

/// Standardized train/test split with the statistics needed to undo it.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Dataset,
    pub test: Dataset,
    /// Statistics of the retained input columns, in order.
    pub input_stats: Vec<ColumnStats>,
    pub target_stats: Vec<ColumnStats>,
    /// Indices (into the raw table) of the retained input columns.
    pub kept_inputs: Vec<usize>,
    /// Input columns dropped for having no spread in the training rows.
    pub dropped_inputs: Vec<usize>,
    pub train_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
}

impl DatasetSplit {
    /// Map a standardized dataset back to raw units.
    pub fn destandardize(&self, data: &Dataset) -> Dataset {
        let undo = |a: &Array2<f64>, stats: &[ColumnStats]| {
            let mut out = a.clone();
            for (mut col, st) in out.axis_iter_mut(Axis(1)).zip(stats) {
                col.mapv_inplace(|v| v * st.std + st.mean);
            }
            out
        };
        Dataset {
            inputs: undo(&data.inputs, &self.input_stats),
            targets: undo(&data.targets, &self.target_stats),
        }
    }

    pub fn warnings(&self) -> Vec<String> {
        self.dropped_inputs
            .iter()
            .map(|c| format!("input column {c} has zero variance on the training rows and was dropped"))
            .collect()
    }
}

/// Random split with `⌊test_fraction · N⌋` test rows, z-scored with training statistics.
pub fn standardize_and_split(table: &RawTable, test_fraction: f64, seed: u64) -> Result<DatasetSplit> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!("test fraction {test_fraction} must lie in (0, 1)")));
    }
    let n = table.n();
    let n_test = (test_fraction * n as f64).floor() as usize;
    if n_test == 0 || n - n_test < 2 {
        return Err(Error::Config(format!(
            "{n} rows cannot be split with test fraction {test_fraction}"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test_rows = perm[..n_test].to_vec();
    let train_rows = perm[n_test..].to_vec();
    let train_raw = table.data.select(&train_rows);
    let test_raw = table.data.select(&test_rows);

    let mut kept_inputs = Vec::new();
    let mut dropped_inputs = Vec::new();
    let mut input_stats = Vec::new();
    for (c, col) in train_raw.inputs.axis_iter(Axis(1)).enumerate() {
        let st = ColumnStats::of(col);
        if st.degenerate() {
            dropped_inputs.push(c);
        } else {
            kept_inputs.push(c);
            input_stats.push(st);
        }
    }
    if kept_inputs.is_empty() {
        return Err(Error::DegenerateColumn {
            column: dropped_inputs[0],
        });
    }
    let mut target_stats = Vec::new();
    for (c, col) in train_raw.targets.axis_iter(Axis(1)).enumerate() {
        let st = ColumnStats::of(col);
        if st.degenerate() {
            return Err(Error::DegenerateColumn {
                column: table.d() + c,
            });
        }
        target_stats.push(st);
    }

    let apply = |a: &Array2<f64>, cols: Option<&[usize]>, stats: &[ColumnStats]| {
        let a = match cols {
            Some(cols) => a.select(Axis(1), cols),
            None => a.clone(),
        };
        let mut out = a;
        for (mut col, st) in out.axis_iter_mut(Axis(1)).zip(stats) {
            col.mapv_inplace(|v| (v - st.mean) / st.std);
        }
        out
    };
    let standardize = |d: &Dataset| Dataset {
        inputs: apply(&d.inputs, Some(&kept_inputs), &input_stats),
        targets: apply(&d.targets, None, &target_stats),
    };
    Ok(DatasetSplit {
        train: standardize(&train_raw),
        test: standardize(&test_raw),
        input_stats,
        target_stats,
        kept_inputs,
        dropped_inputs,
        train_rows,
        test_rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WaveformKind {
    Sine,
    Sawtooth,
    Square,
}

impl std::str::FromStr for WaveformKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sine" => Ok(WaveformKind::Sine),
            "sawtooth" => Ok(WaveformKind::Sawtooth),
            "square" => Ok(WaveformKind::Square),
            other => Err(Error::UnknownDataset(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaveformSpec {
    pub kind: WaveformKind,
    pub n_samples: usize,
    pub period: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl WaveformSpec {
    pub fn new(kind: WaveformKind) -> Self {
        Self {
            kind,
            n_samples: 1000,
            period: 20.0,
            noise_std: 0.05,
            seed: 0,
        }
    }
}

/// `s_t` for `t = 0..n`, plus Gaussian noise.
pub fn gen_waveform(spec: &WaveformSpec) -> Result<Vec<f64>> {
    if !(spec.period > 0.0 && spec.period.is_finite()) || !(spec.noise_std >= 0.0) {
        return Err(Error::Config("waveform needs a positive period and non-negative noise".into()));
    }
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok((0..spec.n_samples)
        .map(|t| {
            // reduce the phase first so that integer periods repeat exactly
            let phase = (t as f64).rem_euclid(spec.period) / spec.period;
            let clean = match spec.kind {
                WaveformKind::Sine => (2.0 * std::f64::consts::PI * phase).sin(),
                WaveformKind::Sawtooth => 2.0 * (phase - (phase + 0.5).floor()),
                // sign of the sine, +1 on its zeros at phase 0 and 1/2
                WaveformKind::Square => {
                    if phase <= 0.5 {
                        1.0
                    } else {
                        -1.0
                    }
                }
            };
            if spec.noise_std > 0.0 {
                clean + noise.sample(&mut rng)
            } else {
                clean
            }
        })
        .collect())
}

/// Sliding windows of `window` samples, each paired with the next sample.
pub fn windowize(series: &[f64], window: usize, name: &str) -> Result<RawTable> {
    if window == 0 || series.len() <= window {
        return Err(Error::SeriesTooShort {
            len: series.len(),
            window,
        });
    }
    let rows = series.len() - window;
    let inputs = Array2::from_shape_fn((rows, window), |(i, j)| series[i + j]);
    let targets = Array2::from_shape_fn((rows, 1), |(i, _)| series[i + window]);
    Ok(RawTable {
        name: name.to_string(),
        input_names: (0..window).map(|j| format!("lag{}", window - j)).collect(),
        target_names: vec!["next".into()],
        data: Dataset { inputs, targets },
    })
}
