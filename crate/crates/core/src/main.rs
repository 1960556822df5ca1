use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use bnn_bmr::bmr::{select_prunable, Criterion, ParamId, ReducedPriorConfig};
use bnn_bmr::dists::Gaussian1D;
use bnn_bmr::harness::{
    compare_csv, criterion_comparison, curve_minima, divergence_sweep, export_prune_region,
    load_split, region_csv, report, run_algorithm1, run_training, score_network, sweep_argmins,
    sweep_csv, zero_contour, Artifact, DatasetSource, ExperimentManifest, RegionGrid,
};
use bnn_bmr::net::{Architecture, ForwardMode, MeanFieldNet};
use bnn_bmr::{Error, Result};

#[derive(Parser)]
#[command(name = "bnn-bmr", version, about = "Bayesian model reduction for mean-field Bayesian neural networks")]
struct Cli {
    /// Directory holding the dataset manifest and CSV files.
    #[arg(long, global = true, default_value = "data/uci")]
    data_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network and write its snapshot.
    Train(RunArgs),
    /// Prune a trained snapshot once by a criterion.
    Prune(PruneArgs),
    /// Iterative training and BMR pruning until nothing more is pruned.
    Iterate(RunArgs),
    /// Estimated vs actual VFE over pruning rates.
    Sweep(SweepArgs),
    /// Actual VFE over pruning rates for several ranking criteria.
    Compare(CompareArgs),
    /// Export ΔF, SNR and SPR over a (μ̂, σ̂) grid.
    Region(RegionArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Rerun a saved manifest; the other run flags are ignored.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Manifest dataset name, waveform kind (sine, sawtooth, square) or CSV path.
    #[arg(long, required_unless_present = "manifest")]
    dataset: Option<String>,
    #[arg(long, default_value = "fcn50")]
    arch: Architecture,
    #[arg(long, default_value = "moments")]
    mode: ForwardMode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    retrain_epochs: Option<usize>,
    #[arg(long)]
    max_iterations: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Variance of the Gaussian weight prior.
    #[arg(long)]
    prior_var: Option<f64>,
    /// Variance of the reduced prior.
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long)]
    snapshot: PathBuf,
    #[arg(long, default_value = "bmr")]
    method: Criterion,
    /// Fraction of active parameters to prune; BMR without a rate prunes every ΔF ≤ 0.
    #[arg(long)]
    rate: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    snapshot: PathBuf,
    #[arg(long, default_value_t = 0.01)]
    step: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    snapshot: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "bmr,snr,spr")]
    methods: Vec<Criterion>,
    #[arg(long, default_value_t = 0.01)]
    step: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RegionArgs {
    #[arg(long, default_value_t = 1.0)]
    prior_var: f64,
    #[arg(long, default_value_t = 1e-16)]
    epsilon: f64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: &Cli) -> Result<Vec<PathBuf>> {
    let data_dir = cli.data_dir.as_path();
    match &cli.command {
        Command::Train(args) => train(args, data_dir),
        Command::Iterate(args) => iterate(args, data_dir),
        Command::Prune(args) => prune(args, data_dir),
        Command::Sweep(args) => sweep(args, data_dir),
        Command::Compare(args) => compare(args, data_dir),
        Command::Region(args) => region(args),
    }
}

fn build_manifest(args: &RunArgs, data_dir: &Path) -> Result<ExperimentManifest> {
    if let Some(path) = &args.manifest {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let manifest = ExperimentManifest::from_json(&value)?;
        manifest.validate()?;
        return Ok(manifest);
    }
    let dataset = args.dataset.as_deref().expect("clap enforces --dataset");
    let source = DatasetSource::from_arg(dataset, data_dir)?;
    let mut m = ExperimentManifest::new(source, args.arch, args.mode, args.seed);
    if let Some(e) = args.epochs {
        m.train.epochs = e;
        m.retrain_epochs = e / 5;
    }
    if let Some(e) = args.retrain_epochs {
        m.retrain_epochs = e;
    }
    if let Some(k) = args.max_iterations {
        m.max_iterations = k;
    }
    if let Some(lr) = args.lr {
        m.train.learning_rate = lr;
    }
    if let Some(b) = args.batch_size {
        m.train.batch_size = b;
    }
    if let Some(v) = args.prior_var {
        m.priors.weight = Gaussian1D::new(0.0, v)?;
    }
    if let Some(eps) = args.epsilon {
        m.reduced_prior = ReducedPriorConfig::new(eps)?;
    }
    m.validate()?;
    Ok(m)
}

fn train(args: &RunArgs, data_dir: &Path) -> Result<Vec<PathBuf>> {
    let manifest = build_manifest(args, data_dir)?;
    let outcome = run_training(&manifest, data_dir)?;
    let mj = manifest.to_json();
    report(
        &args.out,
        &[
            Artifact::Json("manifest.json", mj.clone()),
            Artifact::Json("report.json", to_value(&outcome.report)),
            Artifact::Snapshot("snapshot.json", &outcome.net, Some(mj)),
        ],
    )
}

fn iterate(args: &RunArgs, data_dir: &Path) -> Result<Vec<PathBuf>> {
    let manifest = build_manifest(args, data_dir)?;
    let outcome = run_algorithm1(&manifest, data_dir)?;
    let mj = manifest.to_json();
    report(
        &args.out,
        &[
            Artifact::Json("manifest.json", mj.clone()),
            Artifact::Json("report.json", to_value(&outcome.report)),
            Artifact::Snapshot("trained.json", &outcome.trained, Some(mj.clone())),
            Artifact::Snapshot("snapshot.json", &outcome.net, Some(mj)),
        ],
    )
}

/// A snapshot together with the manifest it was trained under.
fn load_run(path: &Path) -> Result<(MeanFieldNet, ExperimentManifest, serde_json::Value)> {
    let (net, manifest) = MeanFieldNet::load(path)?;
    let value = manifest.ok_or_else(|| {
        Error::Snapshot(format!("{} carries no manifest; it cannot be re-evaluated", path.display()))
    })?;
    Ok((net, ExperimentManifest::from_json(&value)?, value))
}

fn prune(args: &PruneArgs, data_dir: &Path) -> Result<Vec<PathBuf>> {
    let (mut net, manifest, mj) = load_run(&args.snapshot)?;
    let split = load_split(&manifest, data_dir)?;
    let eval = manifest.eval();
    let n = split.train.len() as f64;
    let before = eval.vfe(&net, &split.train)?;

    let scores = score_network(&net, args.method, manifest.reduced_prior)?;
    let picked = select_prunable(&scores, args.method, args.rate)?;
    let ids: Vec<ParamId> = picked.iter().map(|s| s.param_id).collect();
    net.apply_prune(&ids)?;
    let after = eval.vfe(&net, &split.train)?;

    let summary = json!({
        "dataset": manifest.dataset.id(),
        "method": args.method,
        "requested_rate": args.rate,
        "newly_pruned": ids.len(),
        "pruning_rate": net.pruning_rate(),
        "vfe_before": { "total": before, "per_sample": before / n },
        "vfe_after": { "total": after, "per_sample": after / n },
    });
    report(
        &args.out,
        &[
            Artifact::Json("report.json", summary),
            Artifact::Snapshot("snapshot.json", &net, Some(mj)),
        ],
    )
}

fn sweep(args: &SweepArgs, data_dir: &Path) -> Result<Vec<PathBuf>> {
    let (net, manifest, _) = load_run(&args.snapshot)?;
    let split = load_split(&manifest, data_dir)?;
    let rows = divergence_sweep(&net, &split.train, manifest.eval(), manifest.reduced_prior, args.step)?;
    let ((est_rate, est_vfe), (act_rate, act_vfe)) = sweep_argmins(&rows);
    let summary = json!({
        "dataset": manifest.dataset.id(),
        "mode": manifest.mode,
        "step": args.step,
        "points": rows.len(),
        "estimated_argmin": { "rate": est_rate, "vfe": est_vfe },
        "actual_argmin": { "rate": act_rate, "vfe": act_vfe },
    });
    report(
        &args.out,
        &[
            Artifact::Text("sweep.csv", sweep_csv(&rows)),
            Artifact::Json("report.json", summary),
        ],
    )
}

fn compare(args: &CompareArgs, data_dir: &Path) -> Result<Vec<PathBuf>> {
    let (net, manifest, _) = load_run(&args.snapshot)?;
    let split = load_split(&manifest, data_dir)?;
    let rows = criterion_comparison(
        &net,
        &split.train,
        manifest.eval(),
        manifest.reduced_prior,
        &args.methods,
        args.step,
    )?;
    let minima: Vec<serde_json::Value> = curve_minima(&rows)
        .into_iter()
        .map(|(method, rate, vfe)| json!({ "method": method, "rate": rate, "vfe": vfe }))
        .collect();
    let summary = json!({
        "dataset": manifest.dataset.id(),
        "mode": manifest.mode,
        "step": args.step,
        "minima": minima,
    });
    report(
        &args.out,
        &[
            Artifact::Text("compare.csv", compare_csv(&rows)),
            Artifact::Json("report.json", summary),
        ],
    )
}

fn region(args: &RegionArgs) -> Result<Vec<PathBuf>> {
    let prior = Gaussian1D::new(0.0, args.prior_var)?;
    let reduced = ReducedPriorConfig::new(args.epsilon)?;
    let grid = RegionGrid::default();
    let rows = export_prune_region(prior, reduced, &grid)?;
    let contour: Vec<serde_json::Value> = [0.1, 0.25, 0.5, 0.75, 0.9]
        .into_iter()
        .map(|sigma| Ok(json!({ "sigma": sigma, "mu": zero_contour(prior, reduced, sigma)? })))
        .collect::<Result<_>>()?;
    let summary = json!({
        "prior_var": args.prior_var,
        "epsilon": args.epsilon,
        "grid": grid,
        "zero_contour": contour,
    });
    report(
        &args.out,
        &[
            Artifact::Text("region.csv", region_csv(&rows)),
            Artifact::Json("report.json", summary),
        ],
    )
}

fn to_value<T: serde::Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("report serializes")
}
