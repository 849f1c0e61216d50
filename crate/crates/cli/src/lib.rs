//! `dgdet` commands: toy data generation, training, evaluation, the
//! information-theoretic identity check, and loss-weight sweeps.
//!
//! Every command writes a [`RunManifest`] next to its outputs; [`replay`]
//! reruns a command from the manifest alone.

pub mod manifest;

use std::fmt;
use std::fs::{self, File};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use chrono::Utc;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use dgdet_core::dglosses::LossWeights;
use dgdet_core::metrics::{evaluate, MetricReport, DEFAULT_IOU};
use dgdet_core::oracle::{verify_random_joints, BatchVerification};
use dgdet_core::params::{ArchConfig, ModelParams, FRAMEWORK_VERSION};
use dgdet_core::toydata::{generate_toy_dataset, load_dataset, DomainDataset, ToySpec, ANNOTATIONS_FILE};
use dgdet_core::trainer::{train_with, TrainConfig, TrainHistory};

pub use manifest::{PathRecord, RunManifest, MANIFEST_FILE};

/// Environment variable selecting the compute device.
pub const DEVICE_VAR: &str = "DGDET_DEVICE";
pub const CHECKPOINT_FILE: &str = "checkpoints/best.ckpt";

/// Bad input from the user: configuration, arguments or data layout.
#[derive(Debug)]
pub struct Invalid(pub String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

/// 1 for validation errors, 2 for runtime failures.
pub fn exit_code(e: &anyhow::Error) -> i32 {
    for cause in e.chain() {
        if cause.is::<Invalid>() || cause.is::<toml::de::Error>() {
            return 1;
        }
        if let Some(c) = cause.downcast_ref::<dgdet_core::Error>() {
            return if c.is_validation() { 1 } else { 2 };
        }
    }
    2
}

/// Only the CPU backend exists.
pub fn check_device() -> Result<()> {
    match std::env::var(DEVICE_VAR) {
        Err(_) => Ok(()),
        Ok(d) if d.eq_ignore_ascii_case("cpu") => Ok(()),
        Ok(d) => Err(invalid(format!("{DEVICE_VAR}={d} is not supported; the only device is cpu"))),
    }
}

#[derive(Debug, Parser)]
#[command(name = "dgdet", version, about = "Domain-generalised object detection toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic multi-domain dataset from a TOML spec.
    GenData(GenDataArgs),
    /// Train a detector on the source domains of a dataset.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Check the entropy identities on random discrete joints.
    VerifyTheorem(VerifyArgs),
    /// Train and evaluate every loss-weight tuple of a grid.
    Sweep(SweepArgs),
    /// Rerun a command from its manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub images_per_domain: Option<usize>,
}

/// Flags mirroring the training config keys; they override the file.
#[derive(Debug, Args, Default)]
pub struct TrainOverrides {
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub optimizer: Option<String>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub alpha1: Option<f64>,
    #[arg(long)]
    pub alpha2: Option<f64>,
    #[arg(long)]
    pub alpha3: Option<f64>,
    #[arg(long)]
    pub alpha4: Option<f64>,
    #[arg(long)]
    pub alpha5: Option<f64>,
    #[arg(long)]
    pub grl_lambda: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
}

impl TrainOverrides {
    fn apply(&self, t: &mut toml::Table) {
        let mut set = |k: &str, v: Option<toml::Value>| {
            if let Some(v) = v {
                t.insert(k.to_string(), v);
            }
        };
        let int = |v: Option<usize>| v.map(|x| toml::Value::Integer(x as i64));
        let float = |v: Option<f64>| v.map(toml::Value::Float);
        set("max_epochs", int(self.max_epochs));
        set("batch_size", int(self.batch_size));
        set("optimizer", self.optimizer.clone().map(toml::Value::String));
        set("learning_rate", float(self.learning_rate));
        set("weight_decay", float(self.weight_decay));
        set("momentum", float(self.momentum));
        set("alpha1", float(self.alpha1));
        set("alpha2", float(self.alpha2));
        set("alpha3", float(self.alpha3));
        set("alpha4", float(self.alpha4));
        set("alpha5", float(self.alpha5));
        set("grl_lambda", float(self.grl_lambda));
        set("patience", int(self.patience));
        set("seed", self.seed.map(|s| toml::Value::Integer(s as i64)));
        set("val_fraction", float(self.val_fraction));
    }
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
pub struct TrainArgs {
    /// TOML file with training config keys; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory, or a generated root containing `source/`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory, or a generated root containing `target/`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_IOU)]
    pub iou: f64,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    #[arg(long, default_value_t = 5)]
    pub m: usize,
    #[arg(long, default_value_t = 1000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-10)]
    pub tolerance: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
pub struct SweepArgs {
    /// Base training config; each grid tuple replaces its loss weights.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// TOML file with `alphas = [[a1, a2, a3, a4, a5], ...]` and optional
    /// `seeds = [...]`.
    #[arg(long)]
    pub grid: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated seeds; overrides the grid file.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Resolved settings of each command, stored in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenDataRun {
    pub spec: ToySpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub config: TrainConfig,
    pub data: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRun {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyRun {
    pub k: usize,
    pub m: usize,
    pub samples: usize,
    pub seed: u64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub base: TrainConfig,
    pub alphas: Vec<[f64; 5]>,
    pub seeds: Vec<u64>,
    pub data: PathBuf,
    /// Evaluation set; `None` scores the held-out source split of each run.
    pub eval_data: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridFile {
    alphas: Vec<[f64; 5]>,
    #[serde(default)]
    seeds: Option<Vec<u64>>,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))
}

/// Parses `path` as `T`; errors carry the file's line and column.
fn parse_file<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    toml::from_str(&read_text(path)?).with_context(|| format!("invalid {what} {}", path.display()))
}

fn from_table<T: serde::de::DeserializeOwned>(t: toml::Table, what: &str) -> Result<T> {
    T::deserialize(toml::Value::Table(t)).with_context(|| format!("invalid {what}"))
}

/// Training config from an optional file with flag overrides on top.
pub fn resolve_train_config(file: Option<&Path>, overrides: &TrainOverrides) -> Result<TrainConfig> {
    let mut t = match file {
        Some(p) => {
            parse_file::<TrainConfig>(p, "training config")?;
            parse_file::<toml::Table>(p, "training config")?
        }
        None => toml::Table::new(),
    };
    overrides.apply(&mut t);
    let c: TrainConfig = from_table(t, "training config")?;
    c.validate()?;
    Ok(c)
}

/// Dataset spec from file; `--seed` may stand in for a missing `seed` key.
pub fn resolve_spec(args: &GenDataArgs) -> Result<ToySpec> {
    let t: toml::Table = parse_file(&args.spec, "dataset spec")?;
    let mut spec: ToySpec = match (t.contains_key("seed"), args.seed) {
        (false, Some(seed)) => {
            let mut t = t;
            t.insert("seed".into(), toml::Value::Integer(seed as i64));
            from_table(t, "dataset spec")?
        }
        _ => parse_file(&args.spec, "dataset spec")?,
    };
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    if let Some(n) = args.images_per_domain {
        spec.images_per_domain = n;
    }
    spec.validate()?;
    Ok(spec)
}

/// A dataset directory itself, or its `preferred` child under a generated
/// root.
pub fn resolve_data(dir: &Path, preferred: &str) -> Result<PathBuf> {
    if dir.join(ANNOTATIONS_FILE).is_file() {
        return Ok(dir.to_path_buf());
    }
    let child = dir.join(preferred);
    if child.join(ANNOTATIONS_FILE).is_file() {
        return Ok(child);
    }
    Err(invalid(format!(
        "{} holds neither {ANNOTATIONS_FILE} nor {preferred}/{ANNOTATIONS_FILE}",
        dir.display()
    )))
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn load(dir: &Path) -> Result<DomainDataset> {
    load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Parses arguments, runs the command and returns its manifest.
pub fn run(cli: Cli) -> Result<RunManifest> {
    check_device()?;
    match cli.command {
        Command::GenData(a) => {
            let spec = resolve_spec(&a)?;
            let m = execute_gen_data(&GenDataRun { spec }, &a.out)?;
            with_given_inputs(m, &a.out, &[("spec", &a.spec)])
        }
        Command::Train(a) => {
            let config = resolve_train_config(a.config.as_deref(), &a.overrides)?;
            let data = absolute(&resolve_data(&a.data, "source")?);
            let m = execute_train(&TrainRun { config, data }, &a.out)?;
            let mut given = vec![("data", a.data.as_path())];
            given.extend(a.config.as_deref().map(|c| ("config", c)));
            with_given_inputs(m, &a.out, &given)
        }
        Command::Eval(a) => {
            let data = absolute(&resolve_data(&a.data, "target")?);
            let run = EvalRun {
                checkpoint: absolute(&a.checkpoint),
                data,
                iou: a.iou,
            };
            let m = execute_eval(&run, &a.out)?.0;
            with_given_inputs(m, &a.out, &[("checkpoint", &a.checkpoint), ("data", &a.data)])
        }
        Command::VerifyTheorem(a) => {
            let run = VerifyRun {
                k: a.k,
                m: a.m,
                samples: a.samples,
                seed: a.seed,
                tolerance: a.tolerance,
            };
            Ok(execute_verify(&run, &a.out)?.0)
        }
        Command::Sweep(a) => {
            let base = resolve_train_config(a.config.as_deref(), &a.overrides)?;
            let grid: GridFile = parse_file(&a.grid, "grid file")?;
            let seeds = a.seeds.or(grid.seeds).unwrap_or_else(|| vec![base.seed]);
            let data = absolute(&resolve_data(&a.data, "source")?);
            let eval_data = resolve_data(&a.data, "target").ok().filter(|p| *p != data).map(|p| absolute(&p));
            let run = SweepRun {
                base,
                alphas: grid.alphas,
                seeds,
                data,
                eval_data,
            };
            let m = execute_sweep(&run, &a.out)?.0;
            let mut given = vec![("grid", a.grid.as_path())];
            given.extend(a.config.as_deref().map(|c| ("config", c)));
            with_given_inputs(m, &a.out, &given)
        }
        Command::Replay(a) => {
            let m = RunManifest::read(&a.manifest)?;
            replay(&m, &a.out)
        }
    }
}

/// Records the user's spelling of inputs that the run stored resolved, and
/// rewrites the manifest.
fn with_given_inputs(mut m: RunManifest, out: &Path, given: &[(&str, &Path)]) -> Result<RunManifest> {
    for (role, p) in given {
        let rec = PathRecord::new(role, p);
        match m.inputs.iter_mut().find(|r| r.role == *role) {
            Some(r) => r.given = rec.given,
            None => m.inputs.push(rec),
        }
    }
    m.write(out)?;
    Ok(m)
}

struct Started {
    command: &'static str,
    at: chrono::DateTime<Utc>,
}

impl Started {
    fn now(command: &'static str) -> Self {
        Self { command, at: Utc::now() }
    }

    fn finish(
        self,
        config: &impl Serialize,
        seed: Option<u64>,
        inputs: Vec<PathRecord>,
        out: &Path,
        files: &[&str],
    ) -> Result<RunManifest> {
        let mut outputs = vec![PathRecord::new("out", out)];
        outputs.extend(files.iter().map(|f| PathRecord::new(f, &out.join(f))));
        let m = RunManifest {
            command: self.command.to_string(),
            config: serde_json::to_value(config)?,
            seed,
            framework_version: FRAMEWORK_VERSION.to_string(),
            inputs,
            outputs,
            started: self.at,
            finished: Utc::now(),
        };
        m.write(out)?;
        Ok(m)
    }
}

pub fn execute_gen_data(run: &GenDataRun, out: &Path) -> Result<RunManifest> {
    let started = Started::now("gen-data");
    run.spec.validate()?;
    let data = generate_toy_dataset(&run.spec, out).with_context(|| format!("generating into {}", out.display()))?;
    println!(
        "wrote {} source images{} to {}",
        data.source.len(),
        data.target.as_ref().map_or(String::new(), |t| format!(" and {} target images", t.len())),
        out.display()
    );
    let mut files = vec!["source", "styles.json"];
    if data.target.is_some() {
        files.push("target");
    }
    started.finish(run, Some(run.spec.seed), vec![], out, &files)
}

/// Trains, then writes the best checkpoint, `history.csv` and `train.log`.
pub fn execute_train(run: &TrainRun, out: &Path) -> Result<RunManifest> {
    let started = Started::now("train");
    let ds = load(&run.data)?;
    let (params, history) = train_to_dir(&run.config, &ds, out)?;
    let best = history.best().map_or(0.0, |r| r.val_map);
    println!(
        "best epoch {} of {} (validation mAP {best:.4}); checkpoint {}",
        history.best_epoch,
        history.records.len(),
        out.join(CHECKPOINT_FILE).display()
    );
    drop(params);
    started.finish(
        run,
        Some(run.config.seed),
        vec![PathRecord::new("data", &run.data)],
        out,
        &[CHECKPOINT_FILE, "history.csv", "train.log"],
    )
}

fn train_to_dir(config: &TrainConfig, ds: &DomainDataset, out: &Path) -> Result<(ModelParams, TrainHistory)> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let log_path = out.join("train.log");
    let mut log = File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    writeln!(
        log,
        "training on {} images from {} domains; config {}",
        ds.len(),
        ds.num_domains(),
        serde_json::to_string(config)?
    )?;
    let mut log_err = None;
    let result = train_with(config, ds, &ArchConfig::default(), |r| {
        let l = &r.losses;
        let line = format!(
            "epoch {:>3} cls {:.5} reg {:.5} dadv {:.5} dins {:.5} cst {:.5} erc {:.5} cel {:.5} total {:.5} val_map {:.5}",
            r.epoch, l.cls, l.reg, l.dadv, l.dins, l.cst, l.erc, l.cel, l.total, r.val_map
        );
        eprintln!("{line}");
        if let Err(e) = writeln!(log, "{line}") {
            log_err.get_or_insert(e);
        }
    });
    let (params, history) = match result {
        Ok(v) => v,
        Err(e) => {
            let _ = writeln!(log, "error: {e}");
            return Err(e).context("training failed");
        }
    };
    if let Some(e) = log_err {
        return Err(e).context("writing train.log");
    }
    writeln!(log, "best epoch {}", history.best_epoch)?;
    let ckpt = out.join(CHECKPOINT_FILE);
    if let Some(parent) = ckpt.parent() {
        fs::create_dir_all(parent)?;
    }
    params.save(&ckpt)?;
    write(&out.join("history.csv"), history.to_csv())?;
    Ok((params, history))
}

pub fn execute_eval(run: &EvalRun, out: &Path) -> Result<(RunManifest, MetricReport)> {
    let started = Started::now("eval");
    let params = ModelParams::load(&run.checkpoint)
        .with_context(|| format!("loading checkpoint {}", run.checkpoint.display()))?;
    let ds = load(&run.data)?;
    let report = evaluate(&params, &ds, run.iou)?;
    let table = report.to_table();
    print!("{table}");
    write(&out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    write(&out.join("report.txt"), &table)?;
    let m = started.finish(
        run,
        None,
        vec![PathRecord::new("checkpoint", &run.checkpoint), PathRecord::new("data", &run.data)],
        out,
        &["report.json", "report.txt"],
    )?;
    Ok((m, report))
}

pub fn execute_verify(run: &VerifyRun, out: &Path) -> Result<(RunManifest, BatchVerification)> {
    let started = Started::now("verify-theorem");
    if !(run.tolerance > 0.0 && run.tolerance.is_finite()) {
        return Err(invalid(format!("tolerance must be positive, got {}", run.tolerance)));
    }
    let report = verify_random_joints(run.k, run.m, run.samples, run.seed, run.tolerance)?;
    write(&out.join("verify.json"), serde_json::to_string_pretty(&report)?)?;
    println!(
        "{} random joints, K={}, m={}, tolerance {:e}",
        report.samples, report.num_classes, report.num_cells, report.tolerance
    );
    for c in &report.checks {
        let verdict = if c.failures == 0 { "pass" } else { "FAIL" };
        println!("  {verdict} {:<40} max residual {:.3e} ({} failures)", c.name, c.max_residual, c.failures);
    }
    let e = &report.equal_case;
    println!(
        "  {} equal conditionals: js {:.3e}, H(C|Z) {:.15} vs ln K {:.15}",
        if e.passed() { "pass" } else { "FAIL" },
        e.js,
        e.conditional_entropy,
        e.max_entropy
    );
    println!("{}", if report.passed() { "PASS" } else { "FAIL" });
    let m = started.finish(run, Some(run.seed), vec![], out, &["verify.json"])?;
    if !report.passed() {
        bail!("identity checks failed on {} of {} joints", report.failures, report.samples);
    }
    Ok((m, report))
}

/// One grid tuple aggregated over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alphas: [f64; 5],
    pub seeds: Vec<u64>,
    pub map: Vec<f64>,
    pub wmap: Vec<f64>,
    pub map_mean: f64,
    pub map_spread: f64,
    pub wmap_mean: f64,
    pub wmap_spread: f64,
}

fn mean_and_spread(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Rows in descending WmAP; ties keep grid order.
pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut s = format!(
        "{:>8} {:>8} {:>8} {:>8} {:>8} | {:>16} | {:>16}\n",
        "a1", "a2", "a3", "a4", "a5", "mAP", "WmAP"
    );
    for r in rows {
        let a = r.alphas;
        s.push_str(&format!(
            "{:>8} {:>8} {:>8} {:>8} {:>8} | {:>7.4} ± {:<6.4} | {:>7.4} ± {:<6.4}\n",
            a[0], a[1], a[2], a[3], a[4], r.map_mean, r.map_spread, r.wmap_mean, r.wmap_spread
        ));
    }
    s
}

pub fn execute_sweep(run: &SweepRun, out: &Path) -> Result<(RunManifest, Vec<SweepRow>)> {
    let started = Started::now("sweep");
    if run.alphas.is_empty() {
        return Err(invalid("the sweep grid has no alpha tuples"));
    }
    if run.seeds.is_empty() {
        return Err(invalid("the sweep needs at least one seed"));
    }
    for a in &run.alphas {
        LossWeights::from_array(*a)?;
    }
    let ds = load(&run.data)?;
    let eval_ds = run.eval_data.as_deref().map(load).transpose()?;
    let mut rows = Vec::with_capacity(run.alphas.len());
    for (i, a) in run.alphas.iter().enumerate() {
        let mut map = Vec::new();
        let mut wmap = Vec::new();
        for &seed in &run.seeds {
            let mut cfg = run.base.clone();
            cfg.set_weights(LossWeights::from_array(*a)?);
            cfg.seed = seed;
            let dir = out.join("runs").join(format!("{i:02}-seed{seed}"));
            let (params, _) = train_to_dir(&cfg, &ds, &dir)?;
            let held;
            let target = match &eval_ds {
                Some(t) => t,
                None => {
                    held = ds.split(cfg.val_fraction, cfg.seed).1;
                    &held
                }
            };
            let r = evaluate(&params, target, DEFAULT_IOU)?;
            eprintln!("alphas {a:?} seed {seed}: mAP {:.4} WmAP {:.4}", r.map, r.wmap);
            map.push(r.map);
            wmap.push(r.wmap);
        }
        let (map_mean, map_spread) = mean_and_spread(&map);
        let (wmap_mean, wmap_spread) = mean_and_spread(&wmap);
        rows.push(SweepRow {
            alphas: *a,
            seeds: run.seeds.clone(),
            map,
            wmap,
            map_mean,
            map_spread,
            wmap_mean,
            wmap_spread,
        });
    }
    rows.sort_by(|x, y| y.wmap_mean.total_cmp(&x.wmap_mean));
    let table = sweep_table(&rows);
    print!("{table}");
    let mut csv = String::from("alpha1,alpha2,alpha3,alpha4,alpha5,map_mean,map_spread,wmap_mean,wmap_spread,seeds\n");
    for r in &rows {
        let a = r.alphas;
        let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            a[0], a[1], a[2], a[3], a[4], r.map_mean, r.map_spread, r.wmap_mean, r.wmap_spread,
            seeds.join(" ")
        ));
    }
    write(&out.join("sweep.txt"), &table)?;
    write(&out.join("sweep.csv"), csv)?;
    write(&out.join("sweep.json"), serde_json::to_string_pretty(&rows)?)?;
    let mut inputs = vec![PathRecord::new("data", &run.data)];
    if let Some(e) = &run.eval_data {
        inputs.push(PathRecord::new("eval_data", e));
    }
    let m = started.finish(run, run.seeds.first().copied(), inputs, out, &["sweep.txt", "sweep.csv", "sweep.json"])?;
    Ok((m, rows))
}

/// Reruns the command recorded in `m`, writing into `out`.
pub fn replay(m: &RunManifest, out: &Path) -> Result<RunManifest> {
    let cfg = m.config.clone();
    let parse = |what: &str| -> anyhow::Error { invalid(format!("manifest config is not a valid {what} run")) };
    match m.command.as_str() {
        "gen-data" => execute_gen_data(&serde_json::from_value(cfg).map_err(|_| parse("gen-data"))?, out),
        "train" => execute_train(&serde_json::from_value(cfg).map_err(|_| parse("train"))?, out),
        "eval" => Ok(execute_eval(&serde_json::from_value(cfg).map_err(|_| parse("eval"))?, out)?.0),
        "verify-theorem" => Ok(execute_verify(&serde_json::from_value(cfg).map_err(|_| parse("verify-theorem"))?, out)?.0),
        "sweep" => Ok(execute_sweep(&serde_json::from_value(cfg).map_err(|_| parse("sweep"))?, out)?.0),
        other => Err(invalid(format!("unknown command {other:?} in manifest"))),
    }
}
