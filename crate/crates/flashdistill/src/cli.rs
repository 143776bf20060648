//! Command-line surface: subcommands wiring configs, datasets, checkpoints,
//! and reports together. Exit codes are fixed so scripts can branch on them:
//! 0 for success, 2 for configuration or usage errors, 3 for numeric aborts.

use crate::egnn::NetSpec;
use crate::geom::{read_xyz, write_xyz, PointSet};
use crate::netgrad::ParamVector;
use crate::oracle::bridge_table;
use crate::rng::RngStream;
use crate::schedule::{BaseSchedule, GridKind};
use crate::toymol::{compute_metrics, generate_dataset, ToyChemSpec};
use crate::trainer::{
    distill, evaluate_with, load_student, load_teacher, par_map_fixed, rg_targets, train_teacher,
    SamplerKind, TrainConfig,
};
use crate::{Error, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

/// Runs the CLI and returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Numeric(_) => 3,
                _ => 2,
            }
        }
    }
}

#[derive(Parser)]
#[command(
    name = "flashdistill",
    version,
    about = "Few-step distillation of equivariant point-cloud diffusion models"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a sampling grid as CSV and report its low-noise fraction.
    Schedule(ScheduleArgs),
    /// Train the multi-step denoising teacher described by a config file.
    TeacherTrain(TeacherTrainArgs),
    /// Distill a teacher checkpoint into a few-step student.
    Distill(DistillArgs),
    /// Draw molecules from a checkpoint into an XYZ file.
    Sample(SampleArgs),
    /// Score a checkpoint's samples, or an XYZ file directly.
    Eval(EvalArgs),
    /// Run the closed-form Gaussian bridge checks and print the table.
    Oracle(OracleArgs),
}

fn dispatch(cmd: &Cmd) -> Result<()> {
    match cmd {
        Cmd::Schedule(a) => cmd_schedule(a),
        Cmd::TeacherTrain(a) => cmd_teacher_train(a),
        Cmd::Distill(a) => cmd_distill(a),
        Cmd::Sample(a) => cmd_sample(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Oracle(a) => cmd_oracle(a),
    }
}

fn parse_grid_kind(kind: &str, rho: f64) -> Result<GridKind> {
    match kind {
        "uniform" => Ok(GridKind::Uniform),
        "respaced" => Ok(GridKind::Respaced { rho }),
        other => Err(Error::invalid(format!(
            "grid kind must be uniform or respaced, got {other:?}"
        ))),
    }
}

fn parse_sampler(name: &str) -> Result<SamplerKind> {
    match name {
        "consistency" => Ok(SamplerKind::Consistency),
        "ddim" => Ok(SamplerKind::Ddim),
        other => Err(Error::invalid(format!(
            "sampler must be consistency or ddim, got {other:?}"
        ))),
    }
}

/// Grid length backing a `k`-step draw. The consistency sampler reads only
/// its first `k` entries, so a one-step draw still gets a well-formed grid.
fn grid_entries(sampler: SamplerKind, k: usize) -> usize {
    match sampler {
        SamplerKind::Consistency => k.max(2),
        SamplerKind::Ddim => k,
    }
}

fn parse_kv(s: &str) -> std::result::Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected key=value, got {s:?}"))
}

// ---------------------------------------------------------------------------
// Run manifest

/// What a run was, what went in, and what came out. Written before the work
/// starts and rewritten at exit with the end timestamp and final status.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    /// Content hash (SHA-256 of the raw bytes) per input file.
    pub input_hashes: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub status: Option<String>,
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn content_hash(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    h.update(fs::read(path)?);
    Ok(format!("{:x}", h.finalize()))
}

impl RunManifest {
    pub fn begin(
        command: &str,
        seed: u64,
        config: BTreeMap<String, String>,
        inputs: &[&Path],
    ) -> Result<RunManifest> {
        let mut input_hashes = BTreeMap::new();
        for path in inputs {
            input_hashes.insert(path.display().to_string(), content_hash(path)?);
        }
        Ok(RunManifest {
            command: command.to_string(),
            seed,
            config,
            input_hashes,
            outputs: Vec::new(),
            started_unix: unix_now(),
            finished_unix: None,
            status: None,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text =
            serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))?;
        fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn finish(&mut self, status: &str, outputs: &[PathBuf]) {
        self.finished_unix = Some(unix_now());
        self.status = Some(status.to_string());
        self.outputs = outputs.iter().map(|p| p.display().to_string()).collect();
    }
}

/// Runs `work` bracketed by the manifest writes, so the manifest exists
/// before the run starts and reflects the outcome afterwards, success or not.
fn with_manifest<F>(
    manifest_path: Option<&Path>,
    command: &str,
    seed: u64,
    config: BTreeMap<String, String>,
    inputs: &[&Path],
    work: F,
) -> Result<()>
where
    F: FnOnce() -> Result<Vec<PathBuf>>,
{
    let mut manifest = RunManifest::begin(command, seed, config, inputs)?;
    if let Some(p) = manifest_path {
        manifest.write(p)?;
    }
    let result = work();
    match &result {
        Ok(outputs) => manifest.finish("ok", outputs),
        Err(e) => manifest.finish(&format!("failed: {e}"), &[]),
    }
    if let Some(p) = manifest_path {
        manifest.write(p)?;
    }
    result.map(|_| ())
}

// ---------------------------------------------------------------------------
// schedule

#[derive(Args)]
struct ScheduleArgs {
    /// Number of grid entries.
    #[arg(long)]
    n: usize,
    /// Respacing exponent.
    #[arg(long, default_value_t = 2.25)]
    rho: f64,
    /// Base schedule length T.
    #[arg(long = "t", default_value_t = 1000)]
    t_total: usize,
    /// Grid placement rule: respaced or uniform.
    #[arg(long, default_value = "respaced")]
    kind: String,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_schedule(a: &ScheduleArgs) -> Result<()> {
    let base = BaseSchedule::new(a.t_total)?;
    let grid = parse_grid_kind(&a.kind, a.rho)?.build(a.n, &base)?;
    match &a.out {
        Some(path) => {
            let mut w = BufWriter::new(fs::File::create(path)?);
            grid.write_csv(&mut w)?;
            w.flush()?;
        }
        None => {
            let stdout = std::io::stdout();
            grid.write_csv(&mut stdout.lock())?;
        }
    }
    println!(
        "fraction of steps with t/T < 1e-3: {:.4}",
        grid.frac_below(1e-3)
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// teacher-train / distill

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: PathBuf,
    /// Override one config key, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_kv)]
    set: Vec<(String, String)>,
}

impl ConfigArgs {
    fn load(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::from_file(&self.config)?;
        cfg.apply_overrides(&self.set)?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TeacherTrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Molecules to synthesize when the dataset file does not exist yet.
    #[arg(long, default_value_t = 256)]
    dataset_size: usize,
    /// Smallest chain length for a synthesized dataset.
    #[arg(long, default_value_t = 3)]
    min_atoms: usize,
    /// Largest chain length for a synthesized dataset.
    #[arg(long, default_value_t = 7)]
    max_atoms: usize,
}

fn read_dataset(path: &Path) -> Result<Vec<PointSet>> {
    let file = fs::File::open(path).map_err(|e| {
        Error::invalid(format!("cannot open dataset {}: {e}", path.display()))
    })?;
    let sets = read_xyz(&mut std::io::BufReader::new(file))?;
    if sets.is_empty() {
        return Err(Error::invalid(format!(
            "dataset {} holds no molecules",
            path.display()
        )));
    }
    Ok(sets)
}

fn cmd_teacher_train(a: &TeacherTrainArgs) -> Result<()> {
    let cfg = a.config.load()?;
    if !cfg.dataset_path.exists() {
        let mut rng = RngStream::labeled(cfg.seed, "dataset");
        let data = generate_dataset(
            &ToyChemSpec::default(),
            a.dataset_size,
            (a.min_atoms, a.max_atoms),
            &mut rng,
        )?;
        if let Some(dir) = cfg.dataset_path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let mut w = BufWriter::new(fs::File::create(&cfg.dataset_path)?);
        write_xyz(&mut w, &data, "toy chain dataset")?;
        w.flush()?;
        println!(
            "dataset {} not found; synthesized {} molecules",
            cfg.dataset_path.display(),
            data.len()
        );
    }
    let data = read_dataset(&cfg.dataset_path)?;
    fs::create_dir_all(&cfg.out_dir)?;
    with_manifest(
        Some(&cfg.out_dir.join("manifest.json")),
        "teacher-train",
        cfg.seed,
        cfg.snapshot(),
        &[&a.config.config, &cfg.dataset_path],
        || {
            let report = train_teacher(&cfg, &data)?;
            println!("teacher checkpoint: {}", report.ckpt_path.display());
            if let (Some(first), Some(last)) = (report.losses.first(), report.losses.last()) {
                println!("loss: {first:.4} -> {last:.4} over {} iterations", report.losses.len());
            }
            Ok(vec![
                report.ckpt_path.clone(),
                cfg.out_dir.join("teacher_loss.jsonl"),
            ])
        },
    )
}

#[derive(Args)]
struct DistillArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Teacher checkpoint to initialize the student, real score, and fake
    /// score from.
    #[arg(long)]
    teacher: PathBuf,
}

fn cmd_distill(a: &DistillArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let data = read_dataset(&cfg.dataset_path)?;
    let (net, t_total, params) = load_teacher(&a.teacher)?;
    if t_total != cfg.t_total {
        return Err(Error::invalid(format!(
            "teacher was trained with t_total = {t_total}, config says {}",
            cfg.t_total
        )));
    }
    if net.hidden != cfg.hidden || net.layers != cfg.layers {
        return Err(Error::invalid(format!(
            "teacher network is {}x{} but the config says {}x{}; set hidden/layers to match",
            net.hidden, net.layers, cfg.hidden, cfg.layers
        )));
    }
    if (net.cond_dim > 0) != cfg.conditional {
        return Err(Error::invalid(
            "conditional flag does not match the teacher checkpoint",
        ));
    }
    fs::create_dir_all(&cfg.out_dir)?;
    with_manifest(
        Some(&cfg.out_dir.join("manifest.json")),
        "distill",
        cfg.seed,
        cfg.snapshot(),
        &[&a.config.config, &cfg.dataset_path, &a.teacher],
        || {
            let (_, outcome) = distill(&cfg, net.clone(), params.clone(), &data)?;
            println!("student checkpoint: {}", outcome.ckpt_path.display());
            println!(
                "iterations: {} ({} skipped)",
                outcome.metrics.len(),
                outcome.skipped_iters
            );
            if let Some((it, rec)) = outcome.evals.last() {
                println!(
                    "eval at iteration {it}: mol_stab {:.3}, valid_unique {:.3}",
                    rec.mol_stab, rec.valid_unique
                );
            }
            let mut outputs = vec![outcome.ckpt_path.clone(), cfg.out_dir.join("metrics.jsonl")];
            if cfg.eval_interval > 0 {
                outputs.push(cfg.out_dir.join("eval.jsonl"));
            }
            Ok(outputs)
        },
    )
}

// ---------------------------------------------------------------------------
// sample / eval

/// Loads whichever parameter vector a checkpoint carries: the averaged
/// student from a distillation checkpoint, or the teacher weights.
fn load_any(path: &Path) -> Result<(NetSpec, usize, ParamVector)> {
    match load_student(path) {
        Ok(found) => Ok(found),
        Err(Error::Checkpoint(_)) => load_teacher(path),
        Err(e) => Err(e),
    }
}

#[derive(Args)]
struct SampleArgs {
    /// Checkpoint to sample: a distilled student or a teacher.
    #[arg(long)]
    ckpt: PathBuf,
    /// Number of molecules to draw.
    #[arg(long, default_value_t = 64)]
    n: usize,
    /// Sampler steps (grid entries).
    #[arg(long, default_value_t = 4)]
    k: usize,
    /// Grid placement rule: respaced or uniform.
    #[arg(long, default_value = "respaced")]
    grid: String,
    /// Respacing exponent.
    #[arg(long, default_value_t = 2.25)]
    rho: f64,
    /// consistency (few-step) or ddim (multi-step).
    #[arg(long, default_value = "consistency")]
    sampler: String,
    /// Dataset supplying the molecule-size distribution.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Fixed atom count when no dataset is given.
    #[arg(long, default_value_t = 5)]
    atoms: usize,
    /// Radius-of-gyration target for conditional checkpoints.
    #[arg(long)]
    target: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// XYZ destination.
    #[arg(long)]
    out: PathBuf,
    /// Optional manifest destination.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

fn cmd_sample(a: &SampleArgs) -> Result<()> {
    let (net, t_total, params) = load_any(&a.ckpt)?;
    let base = BaseSchedule::new(t_total)?;
    let sampler = parse_sampler(&a.sampler)?;
    let grid = parse_grid_kind(&a.grid, a.rho)?.build(grid_entries(sampler, a.k), &base)?;
    if net.cond_dim > 0 && a.target.is_none() {
        return Err(Error::invalid("conditional checkpoint needs --target"));
    }
    if net.cond_dim == 0 && a.target.is_some() {
        return Err(Error::invalid("--target given for an unconditional checkpoint"));
    }
    let sizes: Vec<usize> = match &a.dataset {
        Some(path) => {
            let data = read_dataset(path)?;
            let mut rng = RngStream::labeled(a.seed, "sample-sizes");
            (0..a.n)
                .map(|_| data[rng.uniform_int(0, data.len() - 1)].n_nodes())
                .collect()
        }
        None => vec![a.atoms; a.n],
    };
    let mut config = BTreeMap::new();
    for (k, v) in [
        ("ckpt", a.ckpt.display().to_string()),
        ("n", a.n.to_string()),
        ("k", a.k.to_string()),
        ("grid", a.grid.clone()),
        ("rho", a.rho.to_string()),
        ("sampler", a.sampler.clone()),
        ("out", a.out.display().to_string()),
    ] {
        config.insert(k.to_string(), v);
    }
    with_manifest(
        a.manifest.as_deref(),
        "sample",
        a.seed,
        config,
        &[&a.ckpt],
        || {
            let drawn = par_map_fixed(&sizes, |i, n| {
                let mut rng = RngStream::labeled(a.seed, &format!("sample-{i}"));
                match sampler {
                    SamplerKind::Consistency => crate::diffusion::consistency_sample(
                        &net, &params, &grid, &base, a.k, *n, &mut rng, a.target,
                    ),
                    SamplerKind::Ddim => crate::diffusion::ddim_sample(
                        &net, &params, &grid, &base, *n, &mut rng, a.target,
                    ),
                }
            });
            let samples = drawn.into_iter().collect::<Result<Vec<PointSet>>>()?;
            let mut w = BufWriter::new(fs::File::create(&a.out)?);
            write_xyz(
                &mut w,
                &samples,
                &format!("k={} grid={} sampler={}", a.k, a.grid, a.sampler),
            )?;
            w.flush()?;
            println!("wrote {} molecules to {}", samples.len(), a.out.display());
            Ok(vec![a.out.clone()])
        },
    )
}

#[derive(Args)]
struct EvalArgs {
    /// Score this XYZ file directly instead of sampling a checkpoint.
    #[arg(long, conflicts_with = "ckpt")]
    xyz: Option<PathBuf>,
    /// Checkpoint to draw from and score.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Dataset supplying sizes and conditioning targets (checkpoint mode).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Number of molecules to draw (checkpoint mode).
    #[arg(long, default_value_t = 128)]
    n: usize,
    /// Sampler steps (grid entries).
    #[arg(long, default_value_t = 4)]
    k: usize,
    /// Grid placement rule: respaced or uniform.
    #[arg(long, default_value = "respaced")]
    grid: String,
    /// Respacing exponent.
    #[arg(long, default_value_t = 2.25)]
    rho: f64,
    /// consistency (few-step) or ddim (multi-step).
    #[arg(long, default_value = "consistency")]
    sampler: String,
    /// Score against radius-of-gyration targets drawn from the dataset.
    #[arg(long, default_value_t = false)]
    conditional: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional JSON destination; stdout always gets the object.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Optional manifest destination.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

fn emit_json<T: Serialize>(record: &T, out: Option<&Path>) -> Result<()> {
    let line = serde_json::to_string(record).map_err(|e| Error::Parse(e.to_string()))?;
    println!("{line}");
    if let Some(path) = out {
        fs::write(path, line + "\n")?;
    }
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    if let Some(path) = &a.xyz {
        let sets = read_dataset(path)?;
        let metrics = compute_metrics(&sets, &ToyChemSpec::default())?;
        return emit_json(&metrics, a.out.as_deref());
    }
    let ckpt = a
        .ckpt
        .as_ref()
        .ok_or_else(|| Error::invalid("eval needs either --xyz or --ckpt"))?;
    let dataset_path = a
        .dataset
        .as_ref()
        .ok_or_else(|| Error::invalid("checkpoint eval needs --dataset for the size distribution"))?;
    let data = read_dataset(dataset_path)?;
    let (net, t_total, params) = load_any(ckpt)?;
    let base = BaseSchedule::new(t_total)?;
    let sampler = parse_sampler(&a.sampler)?;
    let grid = parse_grid_kind(&a.grid, a.rho)?.build(grid_entries(sampler, a.k), &base)?;
    let targets = a.conditional.then(|| rg_targets(&data, a.n, a.seed)).transpose()?;
    if targets.is_some() && net.cond_dim == 0 {
        return Err(Error::invalid("--conditional given for an unconditional checkpoint"));
    }
    let mut config = BTreeMap::new();
    for (k, v) in [
        ("ckpt", ckpt.display().to_string()),
        ("dataset", dataset_path.display().to_string()),
        ("n", a.n.to_string()),
        ("k", a.k.to_string()),
        ("grid", a.grid.clone()),
        ("rho", a.rho.to_string()),
        ("sampler", a.sampler.clone()),
        ("conditional", a.conditional.to_string()),
    ] {
        config.insert(k.to_string(), v);
    }
    with_manifest(
        a.manifest.as_deref(),
        "eval",
        a.seed,
        config,
        &[ckpt, dataset_path],
        || {
            let record = evaluate_with(
                sampler,
                &net,
                &params,
                &base,
                &grid,
                a.k,
                a.n,
                &data,
                &ToyChemSpec::default(),
                targets.as_deref(),
                a.seed,
            )?;
            emit_json(&record, a.out.as_deref())?;
            Ok(a.out.iter().cloned().collect())
        },
    )
}

// ---------------------------------------------------------------------------
// oracle

#[derive(Args)]
struct OracleArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional manifest destination.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

fn cmd_oracle(a: &OracleArgs) -> Result<()> {
    with_manifest(
        a.manifest.as_deref(),
        "oracle",
        a.seed,
        BTreeMap::new(),
        &[],
        || {
            let rows = bridge_table(a.seed)?;
            let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(0);
            for row in &rows {
                println!(
                    "{:<width$}  {}  {}",
                    row.name,
                    if row.pass { "pass" } else { "FAIL" },
                    row.detail,
                );
            }
            let failed = rows.iter().filter(|r| !r.pass).count();
            if failed > 0 {
                return Err(Error::numeric(format!(
                    "{failed} of {} bridge checks failed",
                    rows.len()
                )));
            }
            println!("all {} checks passed", rows.len());
            Ok(Vec::new())
        },
    )
}
