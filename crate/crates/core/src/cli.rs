//! Command-line front end: JSON run configs, artifact writing and exit codes.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::bilevel::{
    evaluate, load_checkpoint, save_checkpoint, search_loop, train_loop, AlphaRecord, EpochMetrics, EvalMetrics,
    SearchConfig, TrainConfig,
};
use crate::data::{load_dataset, save_dataset, split, synth_generate, write_atomic, Sample, SplitSpec, Splits, SynthConfig};
use crate::error::{Error, Result};
use crate::gradsuite::{run_suite, SuiteOptions, GRADCHECK_TOL};
use crate::search_space::{export_dot, AlphaParams, Genotype, Network, NetworkConfig, ParamReport};

pub const VERSION: &str = env!("SPDNAS_VERSION");

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    Synth(SynthConfig),
    Dir { path: PathBuf },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synth(SynthConfig::default())
    }
}

/// Everything a run depends on. Every field has a default.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSource,
    pub split: SplitSpec,
    pub network: NetworkConfig,
    pub search: SearchConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Every problem with the configuration.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        p.extend(self.split.problems());
        p.extend(self.network.problems());
        p.extend(self.search.problems());
        p.extend(self.train.problems());
        if let DataSource::Synth(s) = &self.data {
            p.extend(s.problems());
            if s.dim != self.network.input_dim {
                p.push(format!(
                    "synthetic dimension {} does not match network.input_dim {}",
                    s.dim, self.network.input_dim
                ));
            }
            if s.classes != self.network.classes {
                p.push(format!(
                    "synthetic classes {} do not match network.classes {}",
                    s.classes, self.network.classes
                ));
            }
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::config(p.join("\n  ")))
        }
    }
}

/// Record of one artifact-producing run; accepted back as a config.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub manifest_version: u32,
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: RunConfig,
    pub metrics: Vec<EpochMetrics>,
    pub wall_time_secs: f64,
    pub genotype: Option<Genotype>,
    pub param_report: Option<ParamReport>,
    pub test: Option<EvalMetrics>,
    pub notes: Vec<String>,
}

#[derive(Debug, Parser)]
#[command(name = "spdnas", version = VERSION, about = "Architecture search for SPD matrix networks")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run config (JSON), or a manifest from an earlier run.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Worker threads for batch evaluation (default: all cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Bi-level search; writes genotype.json, alpha_history.csv, metrics.csv, manifest.json.
    Search,
    /// Derives a genotype from an alpha history.
    Derive {
        #[arg(long)]
        alphas: PathBuf,
        /// Epoch to derive from (default: last).
        #[arg(long)]
        epoch: Option<usize>,
    },
    /// Trains a genotype from scratch; writes metrics.csv, checkpoint.bin, manifest.json.
    Train {
        #[arg(long)]
        genotype: Option<PathBuf>,
    },
    /// Test metrics of a trained checkpoint.
    Eval {
        #[arg(long)]
        genotype: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Writes the configured synthetic dataset as a dataset directory.
    SynthData,
    /// Finite-difference gradient checks; exit 1 on any failure.
    Gradcheck {
        /// Skip the supernet case.
        #[arg(long)]
        quick: bool,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Graphviz rendering of a genotype.
    ExportDot {
        #[arg(long)]
        genotype: PathBuf,
    },
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Shape(_) => EXIT_CONFIG,
        Error::Data { .. } | Error::Io { .. } | Error::Json(_) => EXIT_DATA,
        Error::Numeric(_) | Error::Domain(_) => EXIT_NUMERIC,
        Error::Contract(_) => EXIT_FAILURE,
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("SPDNAS_LOG", "info"))
        .format_timestamp(None)
        .try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    let pool = match cli.common.workers {
        Some(0) => {
            eprintln!("error: --workers must be at least 1");
            return EXIT_CONFIG;
        }
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build(),
        None => rayon::ThreadPoolBuilder::new().build(),
    };
    let pool = match pool {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return EXIT_FAILURE;
        }
    };
    match pool.install(|| dispatch(&cli)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

struct Loaded {
    config: RunConfig,
    genotype: Option<Genotype>,
}

fn load_config(common: &Common) -> Result<Loaded> {
    let (mut config, genotype) = match &common.config {
        None => (RunConfig::default(), None),
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
            let value: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
            if value.get("manifest_version").is_some() {
                let m: Manifest = serde_json::from_value(value)
                    .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
                (m.config, m.genotype)
            } else {
                let c: RunConfig = serde_json::from_value(value)
                    .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
                (c, None)
            }
        }
    };
    if let Some(s) = common.seed {
        config.seed = s;
    }
    config.validate()?;
    Ok(Loaded { config, genotype })
}

fn load_samples(cfg: &RunConfig) -> Result<Vec<Sample>> {
    let (samples, dim, classes) = match &cfg.data {
        DataSource::Synth(s) => (synth_generate(s, cfg.seed)?, s.dim, s.classes),
        DataSource::Dir { path } => {
            let d = load_dataset(path)?;
            (d.samples, d.dim, d.classes)
        }
    };
    if dim != cfg.network.input_dim {
        return Err(Error::config(format!(
            "dataset dimension {dim} does not match network.input_dim {}",
            cfg.network.input_dim
        )));
    }
    if classes != cfg.network.classes {
        return Err(Error::config(format!(
            "dataset has {classes} classes, network.classes is {}",
            cfg.network.classes
        )));
    }
    Ok(samples)
}

fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    let s = split(&load_samples(cfg)?, &cfg.split, cfg.seed)?;
    log::info!("split: {} train, {} val, {} test", s.train.len(), s.val.len(), s.test.len());
    if s.train.is_empty() || s.val.is_empty() {
        return Err(Error::config("the split leaves the training or validation set empty"));
    }
    Ok(s)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, (serde_json::to_string_pretty(value)? + "\n").as_bytes())
}

fn csv_bytes<F>(f: F) -> Result<Vec<u8>>
where
    F: FnOnce(&mut csv::Writer<Vec<u8>>) -> csv::Result<()>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    f(&mut w).map_err(|e| Error::contract(format!("csv encoding: {e}")))?;
    w.into_inner().map_err(|e| Error::contract(format!("csv encoding: {e}")))
}

pub fn metrics_csv(metrics: &[EpochMetrics]) -> Result<Vec<u8>> {
    csv_bytes(|w| {
        w.write_record(["epoch", "train_loss", "train_acc", "val_loss", "val_acc"])?;
        for m in metrics {
            w.write_record([
                m.epoch.to_string(),
                m.train_loss.to_string(),
                m.train_acc.to_string(),
                m.val_loss.to_string(),
                m.val_acc.to_string(),
            ])?;
        }
        Ok(())
    })
}

/// One row per (epoch, edge, candidate).
pub fn alpha_history_csv(net: &Network, history: &[AlphaRecord]) -> Result<Vec<u8>> {
    let specs = net.specs();
    csv_bytes(|w| {
        w.write_record(["epoch", "cell_kind", "edge", "from", "to", "op", "logit", "weight"])?;
        for rec in history {
            let spec = specs.iter().find(|s| s.kind == rec.kind).expect("alpha kinds come from the specs");
            let (from, to) = spec.edges[rec.edge];
            for ((op, z), wt) in spec.candidates(rec.edge).iter().zip(&rec.logits).zip(&rec.weights) {
                w.write_record([
                    rec.epoch.to_string(),
                    rec.kind.name().to_string(),
                    rec.edge.to_string(),
                    from.to_string(),
                    to.to_string(),
                    op.tag().to_string(),
                    z.to_string(),
                    wt.to_string(),
                ])?;
            }
        }
        Ok(())
    })
}

#[derive(Debug, Deserialize)]
struct AlphaRow {
    epoch: usize,
    cell_kind: String,
    edge: usize,
    op: String,
    logit: f64,
}

/// Logits at `epoch` (default: the last) from an alpha history file.
pub fn read_alpha_history(path: &Path, net: &Network, epoch: Option<usize>) -> Result<Vec<AlphaParams>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::data(path, e.to_string()))?;
    let rows = rdr
        .deserialize::<AlphaRow>()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::data(path, e.to_string()))?;
    let last = rows.iter().map(|r| r.epoch).max().ok_or_else(|| Error::data(path, "no rows"))?;
    let epoch = epoch.unwrap_or(last);
    let specs = net.specs();
    let mut out = net.alphas();
    for a in &mut out {
        let spec = specs.iter().find(|s| s.kind == a.kind).expect("alpha kinds come from the specs");
        let mut seen: Vec<Vec<bool>> = a.edges.iter().map(|e| vec![false; e.len()]).collect();
        for r in rows.iter().filter(|r| r.epoch == epoch && r.cell_kind == a.kind.name()) {
            if r.edge >= a.edges.len() {
                return Err(Error::data(path, format!("edge {} outside the {} cell", r.edge, a.kind.name())));
            }
            let k = spec
                .candidates(r.edge)
                .iter()
                .position(|c| c.tag() == r.op)
                .ok_or_else(|| Error::data(path, format!("{} is not a candidate of edge {}", r.op, r.edge)))?;
            a.edges[r.edge][k] = r.logit;
            seen[r.edge][k] = true;
        }
        if seen.iter().flatten().any(|s| !s) {
            return Err(Error::data(
                path,
                format!("epoch {epoch} does not cover every {} edge and candidate", a.kind.name()),
            ));
        }
    }
    Ok(out)
}

fn read_genotype(path: Option<&Path>, fallback: Option<Genotype>) -> Result<Genotype> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Genotype::from_json(&text).map_err(|e| Error::config(format!("{}: {e}", p.display())))
        }
        None => fallback.ok_or_else(|| Error::config("no genotype: pass --genotype or a manifest that has one")),
    }
}

fn check_genotype_dims(g: &Genotype, cfg: &NetworkConfig) -> Result<()> {
    let want = cfg.genotype_dims()?;
    if g.dims.input != want.input {
        return Err(Error::config(format!(
            "genotype input dimension {} does not match network.input_dim {}",
            g.dims.input, want.input
        )));
    }
    if g.dims != want {
        return Err(Error::config(format!(
            "genotype dimensions {:?} do not match the configured network {:?}",
            g.dims, want
        )));
    }
    Ok(())
}

fn manifest(command: &str, config: &RunConfig) -> Manifest {
    Manifest {
        manifest_version: 1,
        command: command.into(),
        version: VERSION.into(),
        seed: config.seed,
        config: config.clone(),
        metrics: Vec::new(),
        wall_time_secs: 0.0,
        genotype: None,
        param_report: None,
        test: None,
        notes: Vec::new(),
    }
}

fn dispatch(cli: &Cli) -> Result<i32> {
    let out = &cli.common.out;
    match &cli.command {
        Command::Gradcheck { quick, inject_fault } => {
            let res = run_suite(&SuiteOptions {
                quick: *quick,
                fault: inject_fault.clone(),
            })?;
            let mut failed = Vec::new();
            for c in &res {
                let status = if c.passed() { "ok" } else { "FAIL" };
                println!("{:<40} worst rel. error {:.3e}  {status}", c.name, c.report.max_rel_error);
                if let Some(f) = &c.report.failure {
                    println!("    {f}");
                }
                if !c.passed() {
                    failed.push(c.name.clone());
                }
            }
            if failed.is_empty() {
                println!("all {} gradient checks passed (tolerance {GRADCHECK_TOL:e})", res.len());
                Ok(0)
            } else {
                eprintln!("gradient check failed: {}", failed.join(", "));
                Ok(EXIT_FAILURE)
            }
        }
        Command::ExportDot { genotype } => {
            let g = read_genotype(Some(genotype), None)?;
            ensure_dir(out)?;
            let path = out.join("genotype.dot");
            write_atomic(&path, export_dot(&g).as_bytes())?;
            println!("{}", path.display());
            Ok(0)
        }
        Command::SynthData => {
            let loaded = load_config(&cli.common)?;
            let DataSource::Synth(s) = &loaded.config.data else {
                return Err(Error::config("synth-data needs a synthetic data source"));
            };
            let samples = synth_generate(s, loaded.config.seed)?;
            save_dataset(out, &samples, s.classes)?;
            println!("{} samples written to {}", samples.len(), out.display());
            Ok(0)
        }
        Command::Search => cmd_search(cli, out),
        Command::Derive { alphas, epoch } => {
            let loaded = load_config(&cli.common)?;
            let cfg = &loaded.config;
            let mut net = Network::supernet(&cfg.network, cfg.search.activation, cfg.seed)?;
            let a = read_alpha_history(alphas, &net, *epoch)?;
            net.set_alphas(&a)?;
            let g = net.derive_genotype()?;
            ensure_dir(out)?;
            write_atomic(&out.join("genotype.json"), g.to_json()?.as_bytes())?;
            print!("{}", g.to_json()?);
            Ok(0)
        }
        Command::Train { genotype } => cmd_train(cli, out, genotype.as_deref()),
        Command::Eval { genotype, checkpoint } => {
            let loaded = load_config(&cli.common)?;
            let cfg = &loaded.config;
            let g = read_genotype(genotype.as_deref(), loaded.genotype.clone())?;
            check_genotype_dims(&g, &cfg.network)?;
            let splits = load_splits(cfg)?;
            let mut net = Network::discrete(&cfg.network, &g, cfg.search.activation, cfg.seed)?;
            load_checkpoint(checkpoint, &mut net)?;
            let m = evaluate(&net, &splits.test)?;
            println!("test loss {:.6}, test accuracy {:.4} ({} samples)", m.loss, m.accuracy, m.count);
            ensure_dir(out)?;
            write_json(&out.join("eval.json"), &m)?;
            Ok(0)
        }
    }
}

fn cmd_search(cli: &Cli, out: &Path) -> Result<i32> {
    let start = Instant::now();
    let loaded = load_config(&cli.common)?;
    let cfg = &loaded.config;
    let splits = load_splits(cfg)?;
    ensure_dir(out)?;
    let mut net = Network::supernet(&cfg.network, cfg.search.activation, cfg.seed)?;
    let res = search_loop(&mut net, &splits.train, &splits.val, &cfg.search, cfg.seed)?;
    write_atomic(&out.join("genotype.json"), res.genotype.to_json()?.as_bytes())?;
    write_atomic(&out.join("alpha_history.csv"), &alpha_history_csv(&net, &res.alpha_history)?)?;
    write_atomic(&out.join("metrics.csv"), &metrics_csv(&res.metrics)?)?;
    let discrete = Network::discrete(&cfg.network, &res.genotype, cfg.search.activation, cfg.seed)?;
    let mut m = manifest("search", cfg);
    m.metrics = res.metrics;
    m.genotype = Some(res.genotype);
    m.param_report = Some(discrete.param_report());
    let wfm = cfg.network.wfm;
    m.notes = vec![
        format!("finite-difference term skipped on {} steps", res.skipped_second_order),
        format!(
            "node and mixed-edge Fréchet means: {:?} solver, max_iters {}, tol {:e}; gradients flow through the unrolled iterations",
            wfm.solver, wfm.max_iters, wfm.tol
        ),
        "w+ and w- reuse the training batch of the weight step".into(),
    ];
    m.wall_time_secs = start.elapsed().as_secs_f64();
    write_json(&out.join("manifest.json"), &m)?;
    println!("genotype written to {}", out.join("genotype.json").display());
    Ok(0)
}

fn cmd_train(cli: &Cli, out: &Path, genotype: Option<&Path>) -> Result<i32> {
    let start = Instant::now();
    let loaded = load_config(&cli.common)?;
    let cfg = &loaded.config;
    let g = read_genotype(genotype, loaded.genotype.clone())?;
    check_genotype_dims(&g, &cfg.network)?;
    let splits = load_splits(cfg)?;
    ensure_dir(out)?;
    let mut net = Network::discrete(&cfg.network, &g, cfg.search.activation, cfg.seed)?;
    let res = train_loop(&mut net, &splits.train, &splits.val, &splits.test, &cfg.train, cfg.seed)?;
    write_atomic(&out.join("metrics.csv"), &metrics_csv(&res.metrics)?)?;
    save_checkpoint(&out.join("checkpoint.bin"), &net)?;
    let mut m = manifest("train", cfg);
    m.metrics = res.metrics;
    m.genotype = Some(g);
    m.param_report = Some(net.param_report());
    m.test = Some(res.test);
    m.wall_time_secs = start.elapsed().as_secs_f64();
    write_json(&out.join("manifest.json"), &m)?;
    println!(
        "test loss {:.6}, test accuracy {:.4} ({} samples)",
        res.test.loss, res.test.accuracy, res.test.count
    );
    Ok(0)
}
