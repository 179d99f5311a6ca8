//! Command-line driver: dataset partitioning, reference solves, experiment
//! runs and lab verification.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or configuration
//! error, 3 runtime numerical failure.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::data::{
    max_abs_factors, partition_iid, partition_noniid, ClientShard, Dataset, ParseOptions, PartitionScheme,
    ShardManifest,
};
use crate::error::{Error, Result};
use crate::lab::{lemma_suite, rate_check, CheckReport, QuadInstance, RateKind, RateReport, MAX_ENUMERATION_N};
use crate::model::{solve_reference, ModelParams};
use crate::sim::{Algorithm, CsvLogger, FedProblem, ReferencePoint, SimConfig, Simulator, CSV_SCHEMA_VERSION};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// Environment variable naming the directory searched for dataset names
/// that do not resolve as given.
pub const DATA_DIR_ENV: &str = "FEDDCD_DATA_DIR";

#[derive(Debug, Parser)]
#[command(name = "feddcd", version, about = "Federated dual coordinate descent simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split a dataset across clients and write the shard manifest.
    Partition(PartitionArgs),
    /// Solve the centralized problem and write `w*` and a JSON summary.
    SolveReference(ReferenceArgs),
    /// Run a federated experiment and stream the round log.
    Run(Box<RunArgs>),
    /// Run lab verification suites and print a JSON report.
    Verify(VerifyArgs),
}

#[derive(Debug, clap::Args)]
pub struct PartitionArgs {
    #[arg(long)]
    pub dataset: String,
    #[arg(long, default_value = "iid")]
    pub scheme: PartitionScheme,
    #[arg(long, default_value_t = 100)]
    pub n_clients: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2)]
    pub shards_per_client: usize,
    #[arg(long)]
    pub num_features: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, clap::Args)]
pub struct ReferenceArgs {
    #[arg(long)]
    pub dataset: String,
    #[arg(long, default_value_t = 100)]
    pub n_clients: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub gamma: f64,
    #[arg(long, default_value_t = 1e-10)]
    pub tol: f64,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub scale_features: bool,
    #[arg(long)]
    pub num_features: Option<usize>,
    /// Output prefix; writes `<out>.bin` and `<out>.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Default, clap::Args)]
pub struct RunArgs {
    /// JSON (`.json`) or TOML config with flat `SimConfig` keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub algo: Option<Algorithm>,
    #[arg(long)]
    pub n_clients: Option<usize>,
    #[arg(long)]
    pub tau: Option<usize>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub local_epochs: Option<usize>,
    #[arg(long)]
    pub local_lr: Option<f64>,
    #[arg(long)]
    pub max_local_steps: Option<usize>,
    #[arg(long)]
    pub fedprox_mu: Option<f64>,
    #[arg(long)]
    pub seed_partition: Option<u64>,
    #[arg(long)]
    pub seed_participation: Option<u64>,
    #[arg(long)]
    pub seed_solver: Option<u64>,
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub test_dataset: Option<String>,
    #[arg(long)]
    pub partition: Option<PartitionScheme>,
    #[arg(long, action = clap::ArgAction::Set)]
    pub dual_metrics: Option<bool>,
    /// Reference model written by `solve-reference` (`.bin`).
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Lemmas,
    Rates,
}

#[derive(Debug, clap::Args)]
pub struct VerifyArgs {
    #[arg(long, value_enum)]
    pub suite: Suite,
    #[arg(long, default_value_t = 5)]
    pub n: usize,
    /// Participation level; every `2..=n` when absent (lemmas) or `n/2` (rates).
    #[arg(long)]
    pub tau: Option<usize>,
    /// Random instances for the lemma suite, seeds for the rate suite.
    #[arg(long)]
    pub seeds: Option<usize>,
    #[arg(long, default_value = "exact")]
    pub algo: String,
    /// Ratio `L_max / mu_min` of the rate-check instance.
    #[arg(long, default_value_t = 10.0)]
    pub cond: f64,
    #[arg(long, value_delimiter = ',', default_value = "10,50,200")]
    pub horizons: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Maps an error to the exit-code convention.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite(_) | Error::Divergence { .. } | Error::NonConvergence { .. } | Error::Stream(_) => EXIT_RUNTIME,
        _ => EXIT_USAGE,
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Partition(a) => cmd_partition(&a),
        Command::SolveReference(a) => cmd_solve_reference(&a),
        Command::Run(a) => cmd_run(&a),
        Command::Verify(a) => cmd_verify(&a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Resolves a dataset argument: the path as given, else relative to `$FEDDCD_DATA_DIR`.
pub fn resolve_dataset(name: &str) -> Result<PathBuf> {
    let direct = PathBuf::from(name);
    if direct.is_file() {
        return Ok(direct);
    }
    if let Some(root) = std::env::var_os(DATA_DIR_ENV) {
        let candidate = Path::new(&root).join(name);
        if candidate.is_file() {
            return Ok(candidate);
        }
        return Err(Error::io(
            &candidate,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset not found"),
        ));
    }
    Err(Error::io(
        &direct,
        std::io::Error::new(std::io::ErrorKind::NotFound, "dataset not found"),
    ))
}

/// Hex SHA-256 of a file.
pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let k = file.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if k == 0 {
            break;
        }
        hasher.update(&buf[..k]);
    }
    Ok(hex::encode(hasher.finalize()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetRecord {
    pub path: PathBuf,
    pub sha256: String,
    pub examples: usize,
    pub num_features: usize,
    pub num_classes: usize,
}

/// Training (and optional test) split, aligned and scaled.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Arc<Dataset>,
    pub test: Option<Arc<Dataset>>,
    pub train_record: DatasetRecord,
    pub test_record: Option<DatasetRecord>,
}

fn record(path: &Path, data: &Dataset) -> Result<DatasetRecord> {
    Ok(DatasetRecord {
        path: path.to_path_buf(),
        sha256: sha256_file(path)?,
        examples: data.len(),
        num_features: data.num_features(),
        num_classes: data.num_classes(),
    })
}

/// Loads the datasets named by `cfg`. Without an explicit test split,
/// `<train>.t` is used when it exists. The test split shares the training
/// label map and feature space; max-abs scaling factors come from training.
pub fn load_data(cfg: &SimConfig) -> Result<PreparedData> {
    let name = cfg
        .dataset
        .as_deref()
        .ok_or_else(|| Error::Config("no dataset given".into()))?;
    let train_path = resolve_dataset(name)?;
    let opts = ParseOptions {
        label_map: None,
        num_features: cfg.num_features,
    };
    let mut train = Dataset::load(&train_path, &opts)?;
    let test_path = match &cfg.test_dataset {
        Some(t) => Some(resolve_dataset(t)?),
        None => {
            let mut p = train_path.clone().into_os_string();
            p.push(".t");
            let p = PathBuf::from(p);
            p.is_file().then_some(p)
        }
    };
    let mut test = match &test_path {
        Some(p) => Some(Dataset::load(
            p,
            &ParseOptions {
                label_map: Some(train.label_map().clone()),
                num_features: Some(train.num_features()),
            },
        )?),
        None => None,
    };
    if let Some(t) = &mut test {
        let width = t.num_features().max(train.num_features());
        train.set_num_features(width)?;
        t.set_num_features(width)?;
    }
    if cfg.scale_features {
        let factors = max_abs_factors(&train);
        train.scale_features(&factors);
        if let Some(t) = &mut test {
            t.scale_features(&factors);
        }
    }
    let train_record = record(&train_path, &train)?;
    let test_record = match (&test_path, &test) {
        (Some(p), Some(t)) => Some(record(p, t)?),
        _ => None,
    };
    Ok(PreparedData {
        train: Arc::new(train),
        test: test.map(Arc::new),
        train_record,
        test_record,
    })
}

pub fn make_shards(cfg: &SimConfig, data: &Dataset) -> Result<Vec<ClientShard>> {
    match cfg.partition {
        PartitionScheme::Iid => partition_iid(data, cfg.n_clients, cfg.seed_partition),
        PartitionScheme::NonIid => partition_noniid(data, cfg.n_clients, cfg.shards_per_client, cfg.seed_partition),
    }
}

/// MLR problem with reference optimum and test accuracy attached. The
/// reference is solved centrally when not supplied.
pub fn build_problem(cfg: &SimConfig, data: &PreparedData, reference: Option<ReferencePoint>) -> Result<FedProblem> {
    let shards = make_shards(cfg, &data.train)?;
    let mut problem = FedProblem::mlr(Arc::clone(&data.train), &shards, cfg.gamma)?;
    problem = match reference {
        Some(r) => {
            if r.w_star.len() != problem.dim() {
                return Err(Error::DimensionMismatch {
                    expected: problem.dim(),
                    got: r.w_star.len(),
                });
            }
            problem.reference = Some(r);
            problem
        }
        None => problem.with_mlr_reference(Arc::clone(&data.train), cfg.gamma, cfg.reference_tol)?,
    };
    if let Some(t) = &data.test {
        problem = problem.with_test_set(Arc::clone(t));
    }
    Ok(problem)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    let res = fs::write(&tmp, bytes).and_then(|_| fs::rename(&tmp, path));
    if let Err(e) = res {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

fn cmd_partition(a: &PartitionArgs) -> Result<i32> {
    let path = resolve_dataset(&a.dataset)?;
    let data = Dataset::load(
        &path,
        &ParseOptions {
            label_map: None,
            num_features: a.num_features,
        },
    )?;
    let shards = match a.scheme {
        PartitionScheme::Iid => partition_iid(&data, a.n_clients, a.seed)?,
        PartitionScheme::NonIid => partition_noniid(&data, a.n_clients, a.shards_per_client, a.seed)?,
    };
    let manifest = ShardManifest::new(a.seed, a.scheme, &shards);
    write_atomic(&a.out, manifest.to_json()?.as_bytes())?;
    Ok(EXIT_OK)
}

#[derive(Debug, Serialize)]
struct ReferenceSummary {
    dataset_sha256: String,
    n_clients: usize,
    gamma: f64,
    tol: f64,
    scale_features: bool,
    num_classes: usize,
    num_features: usize,
    f_star: f64,
    grad_norm: f64,
    iterations: usize,
}

fn cmd_solve_reference(a: &ReferenceArgs) -> Result<i32> {
    let cfg = SimConfig {
        dataset: Some(a.dataset.clone()),
        n_clients: a.n_clients,
        tau: a.n_clients.max(2),
        gamma: a.gamma,
        reference_tol: a.tol,
        scale_features: a.scale_features,
        num_features: a.num_features,
        ..SimConfig::default()
    };
    cfg.validate()?;
    let data = load_data(&SimConfig { test_dataset: None, ..cfg.clone() })?;
    let r = solve_reference(Arc::clone(&data.train), a.n_clients, a.gamma, a.tol)?;
    let summary = ReferenceSummary {
        dataset_sha256: data.train_record.sha256.clone(),
        n_clients: a.n_clients,
        gamma: a.gamma,
        tol: a.tol,
        scale_features: a.scale_features,
        num_classes: r.w_star.num_classes,
        num_features: r.w_star.num_features,
        f_star: r.f_star,
        grad_norm: r.grad_norm,
        iterations: r.iterations,
    };
    let bin = a.out.with_extension("bin");
    let json = a.out.with_extension("json");
    let mut bytes = Vec::new();
    r.w_star.write_binary(&mut bytes)?;
    write_atomic(&bin, &bytes)?;
    if let Err(e) = write_atomic(&json, serde_json::to_string_pretty(&summary)?.as_bytes()) {
        let _ = fs::remove_file(&bin);
        return Err(e);
    }
    println!("{}", serde_json::to_string(&summary)?);
    Ok(EXIT_OK)
}

/// Applies command-line overrides on top of a config (flags win).
pub fn apply_overrides(mut cfg: SimConfig, a: &RunArgs) -> SimConfig {
    macro_rules! set {
        ($field:ident) => {
            if let Some(v) = &a.$field {
                cfg.$field = v.clone();
            }
        };
        ($field:ident, opt) => {
            if let Some(v) = &a.$field {
                cfg.$field = Some(v.clone());
            }
        };
    }
    if let Some(v) = a.algo {
        cfg.algorithm = v;
    }
    set!(n_clients);
    set!(tau);
    set!(rounds);
    set!(gamma);
    set!(delta, opt);
    set!(eta, opt);
    set!(local_epochs);
    set!(local_lr);
    set!(max_local_steps, opt);
    set!(fedprox_mu);
    set!(seed_partition);
    set!(seed_participation);
    set!(seed_solver);
    set!(dataset, opt);
    set!(test_dataset, opt);
    set!(partition);
    set!(dual_metrics);
    cfg
}

/// Everything needed to reproduce a run. Written once, before round 0.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub csv_schema_version: u32,
    pub version: String,
    pub config: SimConfig,
    pub seeds: Seeds,
    pub dataset: DatasetRecord,
    pub test_dataset: Option<DatasetRecord>,
    pub reference_f_star: f64,
    pub reference_source: String,
    pub outputs: Outputs,
}

#[derive(Debug, Serialize)]
pub struct Seeds {
    pub partition: u64,
    pub participation: u64,
    pub solver: u64,
}

#[derive(Debug, Serialize)]
pub struct Outputs {
    pub manifest: PathBuf,
    pub csv: PathBuf,
    pub rounds_jsonl: PathBuf,
    pub final_model: PathBuf,
}

pub fn version_string() -> String {
    match option_env!("FEDDCD_GIT_DESCRIBE") {
        Some(d) => format!("{} ({d})", env!("CARGO_PKG_VERSION")),
        None => env!("CARGO_PKG_VERSION").to_string(),
    }
}

fn load_reference(path: &Path, problem_dim_hint: Option<usize>) -> Result<Vec<f64>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let params = ModelParams::read_binary(std::io::BufReader::new(file))?;
    if let Some(d) = problem_dim_hint {
        if params.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: params.dim(),
            });
        }
    }
    Ok(params.weights)
}

fn cmd_run(a: &RunArgs) -> Result<i32> {
    let base = match &a.config {
        Some(p) => SimConfig::load(p)?,
        None => SimConfig::default(),
    };
    let cfg = apply_overrides(base, a);
    cfg.validate()?;
    let data = load_data(&cfg)?;
    let (problem, source) = match &a.reference {
        Some(path) => {
            let w = load_reference(path, None)?;
            let mut p = build_problem(
                &cfg,
                &data,
                Some(ReferencePoint {
                    w_star: w.clone(),
                    f_star: 0.0,
                }),
            )?;
            let f_star = p.primal_value(&w);
            p.reference = Some(ReferencePoint { w_star: w, f_star });
            (p, path.display().to_string())
        }
        None => (build_problem(&cfg, &data, None)?, "solved".to_string()),
    };
    fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let outputs = Outputs {
        manifest: a.out_dir.join("manifest.json"),
        csv: a.out_dir.join("rounds.csv"),
        rounds_jsonl: a.out_dir.join("rounds.jsonl"),
        final_model: a.out_dir.join("final_model.bin"),
    };
    let manifest = RunManifest {
        csv_schema_version: CSV_SCHEMA_VERSION,
        version: version_string(),
        seeds: Seeds {
            partition: cfg.seed_partition,
            participation: cfg.seed_participation,
            solver: cfg.seed_solver,
        },
        config: cfg.clone(),
        dataset: data.train_record.clone(),
        test_dataset: data.test_record.clone(),
        reference_f_star: problem.reference.as_ref().map_or(f64::NAN, |r| r.f_star),
        reference_source: source,
        outputs,
    };
    write_atomic(&manifest.outputs.manifest, serde_json::to_string_pretty(&manifest)?.as_bytes())?;

    let csv_file = File::create(&manifest.outputs.csv).map_err(|e| Error::io(&manifest.outputs.csv, e))?;
    let mut csv = CsvLogger::new(BufWriter::new(csv_file))?;
    let jsonl_path = &manifest.outputs.rounds_jsonl;
    let mut jsonl = BufWriter::new(File::create(jsonl_path).map_err(|e| Error::io(jsonl_path, e))?);

    let mut sim = Simulator::new(&problem, cfg.clone())?;
    let mut last_good = 0;
    let outcome = (|| -> Result<()> {
        let init = sim.initial_log()?;
        writeln!(jsonl, "{}", serde_json::to_string(&init)?)?;
        for _ in 0..cfg.rounds {
            let log = sim.step()?;
            csv.write(&log)?;
            writeln!(jsonl, "{}", serde_json::to_string(&log)?)?;
            jsonl.flush()?;
            last_good = log.round;
        }
        Ok(())
    })();
    jsonl.flush()?;
    if let Err(e) = outcome {
        eprintln!("error: {e} (last good round: {last_good})");
        return Ok(exit_code(&e));
    }
    let (k, p) = (data.train.num_classes(), data.train.num_features());
    let model = ModelParams::from_vec(k, p, sim.reported_model().to_vec())?;
    let mut bytes = Vec::new();
    model.write_binary(&mut bytes)?;
    write_atomic(&manifest.outputs.final_model, &bytes)?;
    Ok(EXIT_OK)
}

#[derive(Debug, Serialize)]
struct LemmaInstanceReport {
    instance: QuadInstance,
    tau: usize,
    checks: Vec<CheckReport>,
}

fn cmd_verify(a: &VerifyArgs) -> Result<i32> {
    if a.n > MAX_ENUMERATION_N {
        return Err(Error::InvalidArgument(format!(
            "--n {} exceeds the enumeration cap of {MAX_ENUMERATION_N}",
            a.n
        )));
    }
    if a.n < 2 {
        return Err(Error::InvalidArgument("--n must be at least 2".into()));
    }
    if let Some(t) = a.tau {
        if t < 2 || t > a.n {
            return Err(Error::InvalidArgument(format!("--tau {t} must lie in [2, {}]", a.n)));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let (json, failures) = match a.suite {
        Suite::Lemmas => {
            let taus: Vec<usize> = match a.tau {
                Some(t) => vec![t],
                None => (2..=a.n).collect(),
            };
            let mut reports = Vec::new();
            for _ in 0..a.seeds.unwrap_or(1) {
                let inst = QuadInstance::random(a.n, 0.5, 10.0, &mut rng)?;
                for &tau in &taus {
                    let checks = lemma_suite(&inst, tau, &mut rng)?;
                    reports.push(LemmaInstanceReport {
                        instance: inst.clone(),
                        tau,
                        checks,
                    });
                }
            }
            let failures: Vec<String> = reports
                .iter()
                .flat_map(|r| r.checks.iter().filter(|c| !c.pass).map(|c| c.lemma_id.clone()))
                .collect();
            (serde_json::to_string_pretty(&reports)?, failures)
        }
        Suite::Rates => {
            let kind: RateKind = a.algo.parse()?;
            if !(a.cond >= 1.0) {
                return Err(Error::InvalidArgument("--cond must be at least 1".into()));
            }
            let tau = a.tau.unwrap_or((a.n / 2).max(2));
            let inst = QuadInstance::log_spaced(a.n, 1.0, a.cond, &mut rng)?;
            let reports: Vec<RateReport> = rate_check(&inst, tau, kind, &a.horizons, a.seeds.unwrap_or(200), 1.05)?;
            let failures = reports
                .iter()
                .filter(|r| !r.pass)
                .map(|r| format!("rate_{:?}_T{}", r.kind, r.horizon).to_lowercase())
                .collect();
            (serde_json::to_string_pretty(&reports)?, failures)
        }
    };
    println!("{json}");
    if let Some(out) = &a.out {
        write_atomic(out, json.as_bytes())?;
    }
    if failures.is_empty() {
        Ok(EXIT_OK)
    } else {
        eprintln!("verification failed: {}", failures.join(", "));
        Ok(EXIT_VERIFY)
    }
}
