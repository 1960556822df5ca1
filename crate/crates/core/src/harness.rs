//! Experiment orchestration: training runs, single-pass and iterative BMR
//! pruning, pruning-rate sweeps, criterion comparisons, the pruning-region
//! grid, and deterministic report files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bmr::{
    delta_f_gaussian, rank, score, score_snr, score_spr, select_prunable, Criterion, ParamId,
    PruneScore, ReducedPriorConfig,
};
use crate::data::{
    gen_waveform, load_uci, read_csv, sha256_file, standardize_and_split, windowize, DatasetRegistry,
    DatasetSplit, RawTable, WaveformKind, WaveformSpec,
};
use crate::dists::Gaussian1D;
use crate::error::{Error, Result};
use crate::grad::{evaluation_vfe, rmse, train_on_stream, TrainConfig};
use crate::net::{Architecture, ForwardMode, InitSettings, MeanFieldNet, PriorSettings};

pub const SOFTWARE: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

/// RNG stream used for initialization; training rounds use streams from
/// `TRAIN_STREAM` upward.
const INIT_STREAM: u64 = 1;
const TRAIN_STREAM: u64 = 2;

/// Where the data of a run comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSource {
    /// Entry of the dataset manifest.
    Uci { name: String, sha256: String },
    /// Any CSV whose last `targets` columns are targets.
    File {
        path: String,
        sha256: String,
        targets: usize,
    },
    /// Synthetic series cut into windows.
    Waveform { spec: WaveformSpec, window: usize },
}

impl DatasetSource {
    /// Resolve a CLI dataset argument: a manifest name, a waveform kind, or a CSV path.
    pub fn from_arg(arg: &str, data_dir: &Path) -> Result<Self> {
        if let Ok(kind) = arg.parse::<WaveformKind>() {
            return Ok(DatasetSource::Waveform {
                spec: WaveformSpec::new(kind),
                window: Architecture::GRU_SEQUENCE_LEN,
            });
        }
        let as_path = Path::new(arg);
        if as_path.is_file() {
            return Ok(DatasetSource::File {
                path: arg.to_string(),
                sha256: sha256_file(as_path)?,
                targets: 1,
            });
        }
        let registry = DatasetRegistry::load(data_dir)?;
        let entry = registry
            .entry(arg)
            .ok_or_else(|| Error::UnknownDataset(arg.to_string()))?;
        Ok(DatasetSource::Uci {
            name: entry.name.clone(),
            sha256: entry.sha256.clone(),
        })
    }

    pub fn id(&self) -> String {
        match self {
            DatasetSource::Uci { name, .. } => name.clone(),
            DatasetSource::File { path, .. } => path.clone(),
            DatasetSource::Waveform { spec, .. } => format!("{:?}", spec.kind).to_lowercase(),
        }
    }

    pub fn load(&self, data_dir: &Path) -> Result<RawTable> {
        match self {
            DatasetSource::Uci { name, sha256 } => {
                let registry = DatasetRegistry::load(data_dir)?;
                let entry = registry
                    .entry(name)
                    .ok_or_else(|| Error::UnknownDataset(name.clone()))?;
                if !entry.sha256.eq_ignore_ascii_case(sha256) {
                    return Err(Error::Checksum {
                        path: data_dir.join(&entry.file),
                        expected: sha256.clone(),
                        found: entry.sha256.clone(),
                    });
                }
                load_uci(name, &registry)
            }
            DatasetSource::File {
                path,
                sha256,
                targets,
            } => {
                let p = Path::new(path);
                let found = sha256_file(p)?;
                if !found.eq_ignore_ascii_case(sha256) {
                    return Err(Error::Checksum {
                        path: p.to_path_buf(),
                        expected: sha256.clone(),
                        found,
                    });
                }
                read_csv(p, *targets, path)
            }
            DatasetSource::Waveform { spec, window } => {
                windowize(&gen_waveform(spec)?, *window, &self.id())
            }
        }
    }
}

/// Everything needed to rerun an experiment bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub software: String,
    pub dataset: DatasetSource,
    pub architecture: Architecture,
    pub mode: ForwardMode,
    pub train: TrainConfig,
    /// Epochs of each warm-started retraining round of the iterative procedure.
    pub retrain_epochs: usize,
    /// Upper bound on prune/retrain rounds of the iterative procedure.
    pub max_iterations: usize,
    pub priors: PriorSettings,
    pub init: InitSettings,
    pub reduced_prior: ReducedPriorConfig,
    pub seed: u64,
    pub test_fraction: f64,
    /// Taken from `SOURCE_DATE_EPOCH` when set, so that reruns stay byte-identical.
    pub timestamp: Option<String>,
}

impl ExperimentManifest {
    /// Defaults for a dataset/architecture/mode/seed combination.
    pub fn new(dataset: DatasetSource, architecture: Architecture, mode: ForwardMode, seed: u64) -> Self {
        let epochs = match architecture {
            Architecture::Fcn50 => 500,
            Architecture::Gru16 => 300,
        };
        Self {
            software: SOFTWARE.to_string(),
            dataset,
            architecture,
            mode,
            train: TrainConfig::new(mode, epochs, seed),
            retrain_epochs: epochs / 5,
            max_iterations: 50,
            priors: PriorSettings::default(),
            init: InitSettings::default(),
            reduced_prior: ReducedPriorConfig::default(),
            seed,
            test_fraction: 0.1,
            timestamp: source_date(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.train.seed != self.seed || self.train.mode != self.mode {
            return Err(Error::Config("training seed and mode must match the manifest".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be at least 1".into()));
        }
        if self.mode == ForwardMode::Moments && self.architecture == Architecture::Gru16 {
            return Err(Error::ArchitectureUnsupported(
                "moment propagation is not defined for the GRU architecture".into(),
            ));
        }
        ReducedPriorConfig::new(self.reduced_prior.epsilon)?;
        if !(self.reduced_prior.epsilon < self.priors.weight.variance) {
            return Err(Error::Config("reduced prior must be narrower than the prior".into()));
        }
        Ok(())
    }

    pub fn eval(&self) -> EvalSettings {
        EvalSettings {
            mode: self.mode,
            samples: self.train.eval_samples,
            seed: self.seed,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("manifest serializes")
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        serde_json::from_value(value.clone())
            .map_err(|e| Error::Snapshot(format!("embedded manifest is invalid: {e}")))
    }
}

fn source_date() -> Option<String> {
    std::env::var("SOURCE_DATE_EPOCH").ok().filter(|s| !s.is_empty())
}

/// How VFE is evaluated: forward mode, draws per evaluation, noise seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub mode: ForwardMode,
    pub samples: usize,
    pub seed: u64,
}

impl EvalSettings {
    pub fn vfe(&self, net: &MeanFieldNet, data: &crate::data::Dataset) -> Result<f64> {
        evaluation_vfe(net, data, self.mode, self.samples, self.seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VfeValue {
    pub total: f64,
    pub per_sample: f64,
}

impl VfeValue {
    fn new(total: f64, n: usize) -> Self {
        Self {
            total,
            per_sample: total / n as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub epochs: usize,
    pub trained_vfe: VfeValue,
    pub pruned_vfe: VfeValue,
    pub newly_pruned: usize,
    pub pruning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VfeReport {
    pub dataset: String,
    pub architecture: Architecture,
    pub mode: ForwardMode,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub total_params: usize,
    pub dropped_input_columns: Vec<usize>,
    /// VFE of the trained, unpruned network.
    pub start_vfe: VfeValue,
    /// VFE after the last pruning step.
    pub end_vfe: VfeValue,
    pub pruning_rate: f64,
    pub iterations: usize,
    /// False when the iteration cap stopped the loop before a round pruned nothing.
    pub converged: bool,
    pub trace: Vec<IterationRecord>,
    /// Per-epoch evaluation VFE of the initial training.
    pub training_trace: Vec<f64>,
    /// Auxiliary: posterior-mean RMSE on the test rows, standardized units.
    pub test_rmse_start: f64,
    pub test_rmse_end: f64,
}

/// A run's report with the network it ended on.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: VfeReport,
    pub trained: MeanFieldNet,
    pub net: MeanFieldNet,
    pub split: DatasetSplit,
}

/// Load and split the manifest's dataset.
pub fn load_split(manifest: &ExperimentManifest, data_dir: &Path) -> Result<DatasetSplit> {
    let table = manifest.dataset.load(data_dir)?;
    standardize_and_split(&table, manifest.test_fraction, manifest.seed)
}

/// Load, split and initialize.
pub fn prepare(manifest: &ExperimentManifest, data_dir: &Path) -> Result<(DatasetSplit, MeanFieldNet)> {
    manifest.validate()?;
    let split = load_split(manifest, data_dir)?;
    let (layers, seq) = manifest
        .architecture
        .build(split.train.input_dim(), split.train.output_dim())?;
    let mut rng = ChaCha8Rng::seed_from_u64(manifest.seed);
    rng.set_stream(INIT_STREAM);
    let net = MeanFieldNet::new(
        layers,
        seq,
        manifest.priors,
        manifest.init,
        split.train.output_dim(),
        &mut rng,
    )?;
    Ok((split, net))
}

/// Score every active parameter.
pub fn score_network(
    net: &MeanFieldNet,
    criterion: Criterion,
    reduced: ReducedPriorConfig,
) -> Result<Vec<PruneScore>> {
    net.active()
        .into_iter()
        .map(|(id, p)| {
            Ok(PruneScore {
                param_id: id,
                value: score(criterion, p.posterior(), p.prior, reduced)?,
                criterion,
            })
        })
        .collect()
}

/// Train only; the report has no pruning rounds.
pub fn run_training(manifest: &ExperimentManifest, data_dir: &Path) -> Result<RunOutcome> {
    run(manifest, data_dir, 0)
}

/// Train, prune every parameter with `ΔF <= 0` once, re-evaluate.
pub fn run_single_iteration(manifest: &ExperimentManifest, data_dir: &Path) -> Result<RunOutcome> {
    run(manifest, data_dir, 1)
}

/// Iterative training and pruning until a round prunes nothing.
pub fn run_algorithm1(manifest: &ExperimentManifest, data_dir: &Path) -> Result<RunOutcome> {
    run(manifest, data_dir, manifest.max_iterations)
}

fn run(manifest: &ExperimentManifest, data_dir: &Path, max_rounds: usize) -> Result<RunOutcome> {
    let (split, mut net) = prepare(manifest, data_dir)?;
    let train_data = &split.train;
    let eval = manifest.eval();
    let n = train_data.len();

    let training_trace = train_on_stream(&mut net, train_data, &manifest.train, TRAIN_STREAM)?;
    let trained = net.clone();
    let start = eval.vfe(&net, train_data)?;
    let test_rmse_start = rmse(&net, &split.test)?;

    let mut trace = Vec::new();
    let mut converged = max_rounds == 0;
    for round in 1..=max_rounds {
        let mut epochs = 0;
        let trained_vfe = if round == 1 {
            start
        } else {
            let mut retrain = manifest.train;
            retrain.epochs = manifest.retrain_epochs;
            epochs = retrain.epochs;
            train_on_stream(&mut net, train_data, &retrain, TRAIN_STREAM + round as u64 - 1)?;
            eval.vfe(&net, train_data)?
        };
        let scores = score_network(&net, Criterion::BmrDeltaF, manifest.reduced_prior)?;
        let picked = select_prunable(&scores, Criterion::BmrDeltaF, None)?;
        let ids: Vec<ParamId> = picked.iter().map(|s| s.param_id).collect();
        net.apply_prune(&ids)?;
        let pruned_vfe = if ids.is_empty() {
            trained_vfe
        } else {
            eval.vfe(&net, train_data)?
        };
        trace.push(IterationRecord {
            iteration: round,
            epochs,
            trained_vfe: VfeValue::new(trained_vfe, n),
            pruned_vfe: VfeValue::new(pruned_vfe, n),
            newly_pruned: ids.len(),
            pruning_rate: net.pruning_rate(),
        });
        if ids.is_empty() {
            converged = true;
            break;
        }
    }
    if max_rounds == 1 {
        // a single pass stops by construction
        converged = true;
    }
    let end = trace.last().map(|r| r.pruned_vfe.total).unwrap_or(start);
    let report = VfeReport {
        dataset: manifest.dataset.id(),
        architecture: manifest.architecture,
        mode: manifest.mode,
        seed: manifest.seed,
        n_train: n,
        n_test: split.test.len(),
        total_params: net.total_params(),
        dropped_input_columns: split.dropped_inputs.clone(),
        start_vfe: VfeValue::new(start, n),
        end_vfe: VfeValue::new(end, n),
        pruning_rate: net.pruning_rate(),
        iterations: trace.len(),
        converged,
        trace,
        training_trace,
        test_rmse_start,
        test_rmse_end: rmse(&net, &split.test)?,
    };
    Ok(RunOutcome {
        report,
        trained,
        net,
        split,
    })
}

/// Number of grid intervals for a rate step, which must divide 1.
pub fn rate_steps(step: f64) -> Result<usize> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::Config(format!("rate step {step} must lie in (0, 1]")));
    }
    let k = (1.0 / step).round();
    if (k * step - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("rate step {step} does not divide 1")));
    }
    Ok(k as usize)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub rate: f64,
    pub estimated_vfe: f64,
    pub actual_vfe: f64,
}

/// Prune by ascending ΔF in steps of `step`; compare the additive ΔF
/// estimate with the recomputed VFE.
pub fn divergence_sweep(
    net: &MeanFieldNet,
    data: &crate::data::Dataset,
    eval: EvalSettings,
    reduced: ReducedPriorConfig,
    step: f64,
) -> Result<Vec<SweepRow>> {
    let k = rate_steps(step)?;
    let ranked = rank(&score_network(net, Criterion::BmrDeltaF, reduced)?);
    let n = ranked.len();
    let base = eval.vfe(net, data)?;

    let mut rows = Vec::with_capacity(k + 1);
    let mut masked = net.clone();
    let mut done = 0;
    let mut cumulative = 0.0;
    for i in 0..=k {
        let count = i * n / k;
        let fresh: Vec<ParamId> = ranked[done..count].iter().map(|s| s.param_id).collect();
        for s in &ranked[done..count] {
            cumulative += s.value;
        }
        let actual = if count == 0 {
            base
        } else {
            masked.apply_prune(&fresh)?;
            eval.vfe(&masked, data)?
        };
        done = count;
        rows.push(SweepRow {
            rate: i as f64 / k as f64,
            estimated_vfe: base + cumulative,
            actual_vfe: actual,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub rate: f64,
    pub method: Criterion,
    pub vfe: f64,
}

/// Actual VFE at each pruning rate when ranking by each criterion. No retraining.
pub fn criterion_comparison(
    net: &MeanFieldNet,
    data: &crate::data::Dataset,
    eval: EvalSettings,
    reduced: ReducedPriorConfig,
    methods: &[Criterion],
    step: f64,
) -> Result<Vec<CompareRow>> {
    let k = rate_steps(step)?;
    let base = eval.vfe(net, data)?;
    let mut rows = Vec::with_capacity(methods.len() * (k + 1));
    for &method in methods {
        let ranked = rank(&score_network(net, method, reduced)?);
        let n = ranked.len();
        let mut masked = net.clone();
        let mut done = 0;
        for i in 0..=k {
            let count = i * n / k;
            let fresh: Vec<ParamId> = ranked[done..count].iter().map(|s| s.param_id).collect();
            let vfe = if count == 0 {
                base
            } else {
                masked.apply_prune(&fresh)?;
                eval.vfe(&masked, data)?
            };
            done = count;
            rows.push(CompareRow {
                rate: i as f64 / k as f64,
                method,
                vfe,
            });
        }
    }
    Ok(rows)
}

/// Lowest VFE per method, with the rate where it occurs (first on ties).
pub fn curve_minima(rows: &[CompareRow]) -> Vec<(Criterion, f64, f64)> {
    let mut out: Vec<(Criterion, f64, f64)> = Vec::new();
    for r in rows {
        match out.iter_mut().find(|(m, _, _)| *m == r.method) {
            Some(entry) => {
                if r.vfe < entry.2 {
                    entry.1 = r.rate;
                    entry.2 = r.vfe;
                }
            }
            None => out.push((r.method, r.rate, r.vfe)),
        }
    }
    out
}

/// `(rate, value)` minimizing each sweep curve: estimated first, then actual.
pub fn sweep_argmins(rows: &[SweepRow]) -> ((f64, f64), (f64, f64)) {
    let mut est = (rows[0].rate, rows[0].estimated_vfe);
    let mut act = (rows[0].rate, rows[0].actual_vfe);
    for r in rows {
        if r.estimated_vfe < est.1 {
            est = (r.rate, r.estimated_vfe);
        }
        if r.actual_vfe < act.1 {
            act = (r.rate, r.actual_vfe);
        }
    }
    (est, act)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionGrid {
    pub mu_min: f64,
    pub mu_max: f64,
    pub mu_points: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub sigma_points: usize,
}

impl Default for RegionGrid {
    fn default() -> Self {
        Self {
            mu_min: -2.0,
            mu_max: 2.0,
            mu_points: 201,
            sigma_min: 0.01,
            sigma_max: 2.0,
            sigma_points: 200,
        }
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionRow {
    pub mu: f64,
    pub sigma: f64,
    pub delta_f: f64,
    pub snr: f64,
    pub spr: f64,
}

/// ΔF, SNR and SPR over a `(μ̂, σ̂)` grid.
pub fn export_prune_region(
    prior: Gaussian1D,
    reduced: ReducedPriorConfig,
    grid: &RegionGrid,
) -> Result<Vec<RegionRow>> {
    if grid.mu_points == 0 || grid.sigma_points == 0 || !(grid.sigma_min > 0.0) {
        return Err(Error::Config("grid needs points and positive σ̂".into()));
    }
    if !(grid.mu_min <= grid.mu_max && grid.sigma_min <= grid.sigma_max) {
        return Err(Error::Config("grid bounds are reversed".into()));
    }
    let mut rows = Vec::with_capacity(grid.mu_points * grid.sigma_points);
    for sigma in linspace(grid.sigma_min, grid.sigma_max, grid.sigma_points) {
        for mu in linspace(grid.mu_min, grid.mu_max, grid.mu_points) {
            let q = Gaussian1D::new(mu, sigma * sigma)?;
            rows.push(RegionRow {
                mu,
                sigma,
                delta_f: delta_f_gaussian(q, prior, reduced)?,
                snr: score_snr(q),
                spr: score_spr(q),
            });
        }
    }
    Ok(rows)
}

/// Positive `μ̂` where `ΔF(μ̂, σ̂) = 0`, found by bisection; `None` when
/// `ΔF > 0` already at `μ̂ = 0` (nothing at that σ̂ is prunable).
pub fn zero_contour(
    prior: Gaussian1D,
    reduced: ReducedPriorConfig,
    sigma: f64,
) -> Result<Option<f64>> {
    let df = |mu: f64| delta_f_gaussian(Gaussian1D::new(mu, sigma * sigma)?, prior, reduced);
    if df(prior.mean)? > 0.0 {
        return Ok(None);
    }
    let mut lo = prior.mean;
    let mut hi = prior.mean + prior.std_dev().max(sigma);
    while df(hi)? <= 0.0 {
        hi = prior.mean + 2.0 * (hi - prior.mean);
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if df(mid)? <= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(Some(0.5 * (lo + hi)))
}

/// Shortest round-trip decimal form, so equal inputs give equal bytes.
fn num(v: f64) -> String {
    format!("{v:?}")
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("rate,estimated_vfe,actual_vfe\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", num(r.rate), num(r.estimated_vfe), num(r.actual_vfe));
    }
    out
}

pub fn compare_csv(rows: &[CompareRow]) -> String {
    let mut out = String::from("rate,method,vfe\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", num(r.rate), r.method, num(r.vfe));
    }
    out
}

pub fn region_csv(rows: &[RegionRow]) -> String {
    let mut out = String::from("mu,sigma,delta_f,snr,spr\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            num(r.mu),
            num(r.sigma),
            num(r.delta_f),
            num(r.snr),
            num(r.spr)
        );
    }
    out
}

/// One file of a report.
pub enum Artifact<'a> {
    Json(&'a str, serde_json::Value),
    Text(&'a str, String),
    Snapshot(&'a str, &'a MeanFieldNet, Option<serde_json::Value>),
}

/// Write every artifact under `dir`, creating it if needed.
pub fn report(dir: &Path, artifacts: &[Artifact<'_>]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::with_capacity(artifacts.len());
    for artifact in artifacts {
        let path = match artifact {
            Artifact::Json(name, value) => {
                let path = dir.join(name);
                let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(&path, e))?;
                std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
                path
            }
            Artifact::Text(name, text) => {
                let path = dir.join(name);
                std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
                path
            }
            Artifact::Snapshot(name, net, manifest) => {
                let path = dir.join(name);
                net.save(&path, manifest.clone())?;
                path
            }
        };
        written.push(path);
    }
    Ok(written)
}
