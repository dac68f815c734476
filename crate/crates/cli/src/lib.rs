//! `blocktower` subcommands. Exit codes: 0 success, 1 validation or usage
//! error, 2 runtime failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use blocktower::dataset::{self, load_dataset, load_example, read_manifest, SplitFilter};
use blocktower::eval::occlusion::occlusion_heatmap;
use blocktower::eval::{self, knn_report, transfer_protocol, EvalError, KnnFeatures};
use blocktower::learn::{
    load_checkpoint, logreg_baseline, save_checkpoint, train_mini, AnyModel, LearnError, LossConfig, ModelKind,
    NetConfig, TrainConfig, TrainLogEntry, TrainSample,
};
use blocktower::scenegen::{generate_balanced, GenConfig, GenError, Split};
use blocktower_trials::{model_confidences, router, TrialError, TrialService};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Parser, Serialize)]
#[command(name = "blocktower", version, about = "Block-tower stability lab")]
pub struct Cli {
    /// Worker threads for generation, training and evaluation.
    #[arg(long, global = true, env = "BLOCKTOWER_JOBS")]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "command", rename_all = "lowercase")]
pub enum Command {
    /// Sample, simulate and render a balanced dataset.
    Generate(GenerateArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on the test split.
    Eval(EvalArgs),
    /// Occlusion heatmap for one example.
    Occlude(OccludeArgs),
    /// Train on some tower sizes and evaluate on all.
    Transfer(TransferArgs),
    /// Re-check a dataset directory.
    Verify(VerifyArgs),
    /// Run the trial service.
    Serve(ServeArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct GenerateArgs {
    /// Generation config JSON; defaults apply when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub count_per_cell: Option<usize>,
    /// Master seed override.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Serialize, Clone)]
pub struct Hyper {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub lr_grid: Option<Vec<f64>>,
    #[arg(long)]
    pub lambda_mask: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Training seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "mini")]
    pub model: String,
    #[command(flatten)]
    pub hyper: Hyper,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Add a k-nearest-neighbour baseline on raw pixels or trunk features.
    #[arg(long)]
    pub knn: Option<String>,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct OccludeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub id: String,
    /// Writes PREFIX.pgm and PREFIX.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TransferArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    pub train_sizes: Vec<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub hyper: Hyper,
}

#[derive(Debug, Args, Serialize)]
pub struct VerifyArgs {
    #[arg(long)]
    pub dataset: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub sessions: PathBuf,
    /// Serve browser assets from this directory instead of the built-in page.
    #[arg(long = "static")]
    pub static_dir: Option<PathBuf>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<LearnError> for CliError {
    fn from(e: LearnError) -> Self {
        match e {
            LearnError::InvalidConfig(_)
            | LearnError::ModelTooLarge { .. }
            | LearnError::ShapeMismatch { .. }
            | LearnError::EmptyTrainSet => CliError::Invalid(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Learn(l) => l.into(),
            EvalError::InvalidInput(_) | EvalError::LengthMismatch(..) => CliError::Invalid(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<GenError> for CliError {
    fn from(e: GenError) -> Self {
        match e {
            GenError::InvalidConfig(_) | GenError::Parse(_) => CliError::Invalid(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<dataset::DatasetError> for CliError {
    fn from(e: dataset::DatasetError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<TrialError> for CliError {
    fn from(e: TrialError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    text.push('\n');
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn samples(dir: &Path, split: SplitFilter) -> Result<Vec<TrainSample>, CliError> {
    Ok(load_dataset(dir, split)?.iter().map(TrainSample::from_example).collect())
}

fn load_model(path: &Path) -> Result<AnyModel, CliError> {
    load_checkpoint(path).map_err(|e| match e {
        LearnError::Io(_) => CliError::Runtime(format!("{}: {e}", path.display())),
        other => CliError::Invalid(format!("{}: {other}", path.display())),
    })
}

fn train_config(h: &Hyper) -> Result<(TrainConfig, LossConfig), CliError> {
    let mut cfg = TrainConfig::default();
    if let Some(e) = h.epochs {
        cfg.epochs = e;
    }
    if let Some(g) = &h.lr_grid {
        cfg.lr_grid = g.clone();
    }
    if let Some(b) = h.batch_size {
        cfg.batch_size = b;
    }
    if let Some(s) = h.seed {
        cfg.seed = s;
    }
    let mut loss = LossConfig::default();
    if let Some(l) = h.lambda_mask {
        loss.lambda_mask = l;
    }
    cfg.validate()?;
    loss.validate()?;
    Ok((cfg, loss))
}

fn write_log(path: &Path, log: &[TrainLogEntry]) -> Result<(), CliError> {
    let mut text = String::new();
    for e in log {
        text.push_str(&serde_json::to_string(e).map_err(|e| CliError::Runtime(e.to_string()))?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn generate(a: &GenerateArgs) -> Result<(), CliError> {
    let mut cfg = match &a.config {
        Some(p) => GenConfig::from_json(&fs::read_to_string(p).map_err(|e| io_err(p, e))?)?,
        None => GenConfig::default(),
    };
    if let Some(n) = a.count_per_cell {
        cfg.count_per_cell = n;
    }
    if let Some(s) = a.seed {
        cfg.master_seed = s;
    }
    cfg.validate()?;
    println!("{}", serde_json::json!({ "gen_config": cfg }));
    let mut all = generate_balanced(&cfg, Split::Train)?;
    if cfg.test_count_per_cell > 0 {
        all.extend(generate_balanced(&cfg, Split::Test)?);
    }
    let manifest = dataset::write_dataset(&all, &cfg, &a.out)?;
    println!("wrote {} records to {}", manifest.records.len(), a.out.display());
    Ok(())
}

fn train(a: &TrainArgs) -> Result<(), CliError> {
    let kind: ModelKind = a.model.parse()?;
    let (cfg, loss) = train_config(&a.hyper)?;
    println!("{}", serde_json::json!({ "train_config": cfg, "loss": loss }));
    let image_size = read_manifest(&a.dataset)?.gen_config.image_size;
    let train = samples(&a.dataset, SplitFilter::Train)?;
    let (log, best_lr, best_epoch, best_val) = match kind {
        ModelKind::Mini => {
            let net = NetConfig {
                image_size,
                ..NetConfig::default()
            };
            let out = train_mini(&train, net, &cfg, &loss)?;
            save_checkpoint(&out.model, &a.out)?;
            (out.log, out.best_lr, out.best_epoch, out.best_val_acc)
        }
        ModelKind::Logreg | ModelKind::LogregFactored => {
            let out = logreg_baseline(&train, image_size, kind == ModelKind::LogregFactored, &cfg, &loss)?;
            save_checkpoint(&out.model, &a.out)?;
            (out.log, out.best_lr, out.best_epoch, out.best_val_acc)
        }
    };
    write_log(&with_suffix(&a.out, ".log.jsonl"), &log)?;
    println!("selected lr {best_lr} epoch {best_epoch} (validation accuracy {best_val:.4})");
    Ok(())
}

fn eval_cmd(a: &EvalArgs) -> Result<(), CliError> {
    let features: Option<KnnFeatures> = a.knn.as_deref().map(str::parse).transpose()?;
    let model = load_model(&a.model)?;
    let test = samples(&a.dataset, SplitFilter::Test)?;
    let mut report = eval::evaluate(model.as_model(), &test)?;
    if let Some(f) = features {
        let trunk = match (&model, f) {
            (AnyModel::Mini(net), _) => Some(net),
            (_, KnnFeatures::Trunk) => return Err(CliError::Invalid("--knn trunk needs a mini checkpoint".into())),
            _ => None,
        };
        let train = samples(&a.dataset, SplitFilter::Train)?;
        report.knn = Some(knn_report(&train, &test, a.k, f, trunk)?);
    }
    write_json(&a.out, &report)?;
    println!(
        "fall accuracy {:.4} ± {:.4} on {} examples",
        report.fall_accuracy, report.accuracy_ci, report.count
    );
    Ok(())
}

#[derive(Serialize)]
struct OcclusionSidecar<'a> {
    id: &'a str,
    base_prob: f64,
    mapping: eval::occlusion::PgmMapping,
    cells: &'a [f64],
}

fn occlude(a: &OccludeArgs) -> Result<(), CliError> {
    let model = load_model(&a.model)?;
    let manifest = read_manifest(&a.dataset)?;
    let record = manifest
        .records
        .iter()
        .find(|r| r.id == a.id)
        .ok_or_else(|| CliError::Invalid(format!("no record {:?} in {}", a.id, a.dataset.display())))?;
    let ex = load_example(&a.dataset, record)?;
    let m = model.as_model();
    if ex.image.width != m.image_size() || ex.image.height != m.image_size() {
        return Err(CliError::Invalid(format!(
            "image is {}x{}, model expects {}",
            ex.image.width,
            ex.image.height,
            m.image_size()
        )));
    }
    let heat = occlusion_heatmap(m, &ex.image.to_chw_f32());
    let (pgm, mapping) = heat.to_pgm();
    let pgm_path = with_suffix(&a.out, ".pgm");
    fs::write(&pgm_path, pgm).map_err(|e| io_err(&pgm_path, e))?;
    write_json(
        &with_suffix(&a.out, ".json"),
        &OcclusionSidecar {
            id: &a.id,
            base_prob: heat.base_prob,
            mapping,
            cells: &heat.cells,
        },
    )?;
    println!("base fall probability {:.4}", heat.base_prob);
    Ok(())
}

fn transfer(a: &TransferArgs) -> Result<(), CliError> {
    let (cfg, loss) = train_config(&a.hyper)?;
    println!("{}", serde_json::json!({ "train_config": cfg, "loss": loss }));
    let image_size = read_manifest(&a.dataset)?.gen_config.image_size;
    let train = samples(&a.dataset, SplitFilter::Train)?;
    let test = samples(&a.dataset, SplitFilter::Test)?;
    let net = NetConfig {
        image_size,
        ..NetConfig::default()
    };
    let (report, _) = transfer_protocol(&train, &test, &a.train_sizes, net, &cfg, &loss)?;
    write_json(&a.out, &report)?;
    for s in &report.report.per_size {
        let tag = if s.held_out { " (held out)" } else { "" };
        println!("{} blocks: accuracy {:.4}{tag}", s.n_blocks, s.accuracy);
    }
    Ok(())
}

fn verify(a: &VerifyArgs) -> Result<(), CliError> {
    let report = dataset::verify(&a.dataset)?;
    println!("{}", serde_json::to_string_pretty(&report).map_err(|e| CliError::Runtime(e.to_string()))?);
    if report.ok() {
        Ok(())
    } else {
        Err(CliError::Invalid(format!("{} problems found", report.problems.len())))
    }
}

fn serve(a: &ServeArgs) -> Result<(), CliError> {
    let model = load_model(&a.model)?;
    let conf = model_confidences(&a.dataset, model.as_model())?;
    let svc = TrialService::open(&a.dataset, &a.sessions, &conf)?;
    let app = router(Arc::new(svc), a.static_dir.clone());
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Runtime(e.to_string()))?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(("0.0.0.0", a.port))
            .await
            .map_err(|e| CliError::Runtime(format!("bind port {}: {e}", a.port)))?;
        println!("listening on {}", listener.local_addr().map_err(|e| CliError::Runtime(e.to_string()))?);
        axum::serve(listener, app).await.map_err(|e| CliError::Runtime(e.to_string()))
    })
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    if cli.jobs == Some(0) {
        return Err(CliError::Invalid("--jobs must be >= 1".into()));
    }
    println!("{}", serde_json::to_string(cli).map_err(|e| CliError::Runtime(e.to_string()))?);
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.jobs {
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| CliError::Runtime(e.to_string()))?;
    pool.install(|| match &cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Occlude(a) => occlude(a),
        Command::Transfer(a) => transfer(a),
        Command::Verify(a) => verify(a),
        Command::Serve(a) => serve(a),
    })
}

/// Parses `argv` (including the program name) and runs it.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            eprint!("{}", e.render());
            return 1;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
