//! Subcommand definitions and handlers.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ldam_core::adversarial::{pretrain_discriminator, DEFAULT_PRETRAIN_STEPS};
use ldam_core::dataset::{load_mnist, resolve_data_dir, Split, DATA_DIR_ENV};
use ldam_core::model::build_discriminator;
use ldam_core::probe::{probe_filters, KernelProbe, ProbeConfig};
use ldam_core::sampler::{BurnInConfig, StepSchedule, DEFAULT_INIT_STD};
use ldam_core::train::{evaluate_ensemble, train_classifier_with};
use ldam_core::{
    load_checkpoint, save_checkpoint, Checkpoint, RegularizerKind, RegularizerSpec, RmsPropConfig,
    SamplerConfig, SamplerMode, TrainConfig,
};
use serde::Serialize;
use serde_json::json;

use crate::fetch::{fetch, Source, DEFAULT_BASE_URL};
use crate::neurons::parse_neurons;
use crate::sample::{self, SampleJob};

#[derive(Debug, Parser)]
#[command(name = "ldam", version, about = "Langevin dynamics activation maximization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Download (or import) MNIST into the data directory.
    Fetch(FetchArgs),
    /// Train a classifier (or a discriminator) and write checkpoints.
    Train(TrainArgs),
    /// Run one chain per neuron and write a PNG grid plus JSON traces.
    Sample(SampleArgs),
    /// Check that L2-regularized maximization recovers the conv1 kernels.
    ProbeFilter(ProbeArgs),
    /// Run the HTTP + WebSocket session service.
    Serve(ServeArgs),
}

impl Cli {
    pub fn run(self) -> Result<()> {
        match self.command {
            Command::Fetch(a) => cmd_fetch(a),
            Command::Train(a) => cmd_train(a),
            Command::Sample(a) => cmd_sample(a),
            Command::ProbeFilter(a) => cmd_probe(a),
            Command::Serve(a) => cmd_serve(a),
        }
    }
}

#[derive(Debug, Args)]
pub struct DataDir {
    /// MNIST directory (IDX files); falls back to LDAM_DATA_DIR.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
}

impl DataDir {
    fn resolve(&self) -> Result<PathBuf> {
        Ok(resolve_data_dir(self.data_dir.as_deref())?)
    }
}

#[derive(Debug, Args)]
pub struct ModelsDir {
    /// Directory of `<id>.ckpt` files used to resolve model ids.
    #[arg(long, env = ldam_service::MODELS_DIR_ENV, default_value = "models")]
    pub models_dir: PathBuf,
}

impl ModelsDir {
    /// Accepts a checkpoint path or an id inside the models directory.
    fn load(&self, model: &str) -> Result<Checkpoint> {
        let direct = Path::new(model);
        let path = if direct.is_file() {
            direct.to_path_buf()
        } else {
            self.models_dir.join(format!("{model}.ckpt"))
        };
        load_checkpoint(&path).with_context(|| format!("loading model `{model}` from {}", path.display()))
    }
}

fn print_json(v: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string(v)?);
    Ok(())
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(d)?;
    }
    std::fs::write(path, serde_json::to_vec_pretty(v)?).with_context(|| format!("writing {}", path.display()))
}

#[derive(Debug, Args)]
pub struct FetchArgs {
    #[command(flatten)]
    pub data: DataDir,
    /// Base URL serving `<name>.gz` files.
    #[arg(long, default_value = DEFAULT_BASE_URL)]
    pub base_url: String,
    /// Import from a local directory instead of downloading.
    #[arg(long)]
    pub from: Option<PathBuf>,
}

fn cmd_fetch(a: FetchArgs) -> Result<()> {
    let dir = a.data.resolve()?;
    let source = match a.from {
        Some(d) => Source::Dir(d),
        None => Source::Url(a.base_url),
    };
    let written = fetch(&dir, &source)?;
    print_json(&json!({ "data_dir": dir, "written": written }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelKindArg {
    Classifier,
    Discriminator,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataDir,
    #[arg(long, value_enum, default_value = "classifier")]
    pub kind: ModelKindArg,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    /// Average parameters over the epochs after this one; disabled when it
    /// is not below --epochs.
    #[arg(long, default_value_t = 5)]
    pub param_avg_from: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "models")]
    pub out: PathBuf,
    /// File stem of the written checkpoints; defaults to `lenet-s<seed>` or `disc-s<seed>`.
    #[arg(long)]
    pub id: Option<String>,
    #[arg(long, default_value_t = RmsPropConfig::default().lr)]
    pub lr: f32,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    /// Train on the first N training images only.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Optimizer steps when training a discriminator.
    #[arg(long, default_value_t = DEFAULT_PRETRAIN_STEPS)]
    pub disc_steps: usize,
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let dir = a.data.resolve()?;
    let mut train = load_mnist(&dir, Split::Train)?;
    if let Some(n) = a.limit {
        train = train.take(n)?;
    }
    match a.kind {
        ModelKindArg::Discriminator => {
            let id = a.id.unwrap_or_else(|| format!("disc-s{}", a.seed));
            let d = pretrain_discriminator(
                &build_discriminator(a.seed),
                &train,
                a.disc_steps,
                16,
                0.01,
                DEFAULT_INIT_STD,
                a.seed,
            )?;
            let path = a.out.join(format!("{id}.ckpt"));
            save_checkpoint(&d, &path)?;
            print_json(&json!({ "event": "done", "files": [path] }))
        }
        ModelKindArg::Classifier => {
            let test = load_mnist(&dir, Split::Test)?;
            let id = a.id.unwrap_or_else(|| format!("lenet-s{}", a.seed));
            let cfg = TrainConfig {
                epochs: a.epochs,
                batch_size: a.batch_size,
                optimizer: RmsPropConfig {
                    lr: a.lr,
                    ..Default::default()
                },
                seed: a.seed,
                param_avg_start_epoch: (a.param_avg_from < a.epochs).then_some(a.param_avg_from),
                snapshot_every: None,
            };
            let mut epoch_err = None;
            let out = train_classifier_with(&cfg, &train, Some(&test), |r| {
                if let Err(e) = print_json(&json!({ "event": "epoch", "report": r })) {
                    epoch_err.get_or_insert(e);
                }
            })?;
            if let Some(e) = epoch_err {
                return Err(e);
            }
            let ensemble = if out.snapshots.is_empty() {
                None
            } else {
                Some(evaluate_ensemble(&out.snapshots, &test)?)
            };
            let files = out.save(&a.out, &id)?;
            print_json(&json!({
                "event": "done",
                "base_accuracy": out.base.meta.accuracy,
                "averaged_accuracy": out.averaged.as_ref().and_then(|m| m.meta.accuracy),
                "ensemble_accuracy": ensemble,
                "files": files,
            }))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Free,
    Principled,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[command(flatten)]
    pub models: ModelsDir,
    /// Model id or checkpoint path.
    #[arg(long)]
    pub model: String,
    /// Neuron specs, e.g. `presoftmax:0..9` or `layer0:0..5@12,12`.
    #[arg(long, default_value = "presoftmax:0..9")]
    pub neurons: Vec<String>,
    #[arg(long, default_value_t = 2000)]
    pub steps: u64,
    /// L2 regularizer weight.
    #[arg(long, default_value_t = 0.0)]
    pub l2: f32,
    /// Total-variation regularizer weight.
    #[arg(long, default_value_t = 0.0)]
    pub tv: f32,
    /// Discriminator weights, one grid row each (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub disc_weight: Vec<f32>,
    /// Discriminator model id or path; required with --disc-weight.
    #[arg(long)]
    pub disc_model: Option<String>,
    #[arg(long, default_value_t = 1.0)]
    pub activation_weight: f32,
    /// Sample-average window.
    #[arg(long, default_value_t = 200)]
    pub avg: usize,
    #[arg(long, value_enum, default_value = "free")]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f32,
    #[arg(long, default_value_t = SamplerConfig::default().sigma)]
    pub sigma: f32,
    #[arg(long, default_value_t = SamplerConfig::default().momentum)]
    pub momentum: f32,
    /// Step schedule `a,b,mu` for beta_t = a (b + t)^-mu.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub schedule: Option<Vec<f64>>,
    #[arg(long, default_value_t = BurnInConfig::default().window)]
    pub burn_in_window: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "grid.png")]
    pub out: PathBuf,
    /// Metrics JSON; defaults to the grid path with a .json extension.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long)]
    pub threads: Option<usize>,
}

fn cmd_sample(a: SampleArgs) -> Result<()> {
    let model = Arc::new(a.models.load(&a.model)?);
    let neurons = parse_neurons(&a.neurons, &model.arch)?;
    let discriminator = match (&a.disc_model, a.disc_weight.is_empty()) {
        (Some(d), _) => Some(Arc::new(a.models.load(d)?)),
        (None, false) => bail!("--disc-weight needs --disc-model"),
        (None, true) => None,
    };
    let mut regularizers = Vec::new();
    for (kind, w) in [(RegularizerKind::L2, a.l2), (RegularizerKind::Tv, a.tv)] {
        if w != 0.0 {
            regularizers.push(RegularizerSpec::new(kind, w)?);
        }
    }
    let base = SamplerConfig {
        mode: match a.mode {
            ModeArg::Free => SamplerMode::Free,
            ModeArg::Principled => SamplerMode::Principled,
        },
        temperature: a.temperature,
        sigma: a.sigma,
        momentum: a.momentum,
        schedule: match a.schedule.as_deref() {
            Some(&[a, b, mu]) => StepSchedule { a, b, mu },
            _ => StepSchedule::default(),
        },
        activation_weight: a.activation_weight,
        regularizers,
        burn_in: BurnInConfig {
            window: a.burn_in_window,
            ..Default::default()
        },
        avg_window: a.avg,
        seed: a.seed,
        ..Default::default()
    };
    base.validate()?;
    let rows = if a.disc_weight.is_empty() {
        vec![None]
    } else {
        a.disc_weight.iter().map(|&w| Some(w)).collect()
    };
    let job = SampleJob {
        model,
        discriminator,
        neurons,
        rows,
        base,
        steps: a.steps,
        threads: a
            .threads
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())),
    };
    let (grid, metrics) = sample::run(&job, &a.model)?;
    if let Some(d) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(d)?;
    }
    grid.save_png(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let metrics_path = a.metrics.unwrap_or_else(|| a.out.with_extension("json"));
    write_json(&metrics_path, &metrics)?;
    print_json(&json!({
        "grid": a.out,
        "width": grid.width,
        "height": grid.height,
        "metrics": metrics_path,
    }))
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub models: ModelsDir,
    #[arg(long)]
    pub model: String,
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f32,
    /// Output position `row,col` of the probed conv1 neurons.
    #[arg(long, value_delimiter = ',', num_args = 2, default_values_t = [12usize, 12])]
    pub position: Vec<usize>,
    /// Cosine similarity a kernel must reach to pass.
    #[arg(long, default_value_t = 0.95)]
    pub threshold: f64,
    /// Largest relative error allowed between the ascent fixed point and `kernel/lambda`.
    #[arg(long, default_value_t = 1e-3)]
    pub ascent_tolerance: f64,
    #[arg(long, default_value_t = ProbeConfig::default().max_sampler_steps)]
    pub max_steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeVerdict {
    #[serde(flatten)]
    pub kernel: KernelProbe,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeOutput {
    pub model: String,
    pub lambda: f32,
    pub position: (usize, usize),
    pub threshold: f64,
    pub ascent_tolerance: f64,
    pub kernels: Vec<ProbeVerdict>,
    pub all_pass: bool,
}

pub fn probe_output(
    model: &str,
    ckpt: Arc<Checkpoint>,
    cfg: &ProbeConfig,
    threshold: f64,
    ascent_tolerance: f64,
) -> Result<ProbeOutput> {
    let report = probe_filters(ckpt, cfg)?;
    let kernels: Vec<ProbeVerdict> = report
        .kernels
        .into_iter()
        .map(|k| ProbeVerdict {
            pass: k.ascent_relative_error <= ascent_tolerance
                && k.sample_cosine.is_some_and(|c| c >= threshold),
            kernel: k,
        })
        .collect();
    Ok(ProbeOutput {
        model: model.to_string(),
        lambda: report.lambda,
        position: report.position,
        threshold,
        ascent_tolerance,
        all_pass: kernels.iter().all(|k| k.pass),
        kernels,
    })
}

fn cmd_probe(a: ProbeArgs) -> Result<()> {
    let ckpt = Arc::new(a.models.load(&a.model)?);
    let cfg = ProbeConfig {
        lambda: a.lambda,
        position: (a.position[0], a.position[1]),
        max_sampler_steps: a.max_steps,
        seed: a.seed,
        ..Default::default()
    };
    let out = probe_output(&a.model, ckpt, &cfg, a.threshold, a.ascent_tolerance)?;
    if let Some(p) = &a.out {
        write_json(p, &out)?;
    }
    print_json(&out)
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = ldam_service::BIND_ADDR_ENV, default_value = ldam_service::DEFAULT_BIND_ADDR)]
    pub bind: std::net::SocketAddr,
    #[arg(long, env = ldam_service::RUNS_DIR_ENV, default_value = "runs")]
    pub runs_dir: PathBuf,
    #[command(flatten)]
    pub models: ModelsDir,
    /// MNIST directory for training jobs and discriminator retraining.
    #[arg(long, env = DATA_DIR_ENV)]
    pub data_dir: Option<PathBuf>,
}

fn cmd_serve(a: ServeArgs) -> Result<()> {
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = match tokio::net::TcpListener::bind(a.bind).await {
            Ok(l) => l,
            Err(e) if e.kind() == std::io::ErrorKind::AddrInUse => bail!(
                "address {} is already in use; pick another with --bind or {}",
                a.bind,
                ldam_service::BIND_ADDR_ENV
            ),
            Err(e) => return Err(e).with_context(|| format!("binding {}", a.bind)),
        };
        let state = ldam_service::AppState::new(ldam_service::AppConfig {
            runs_dir: a.runs_dir,
            models_dir: a.models.models_dir,
            data_dir: a.data_dir,
        });
        let restored = state.restore_sessions().await;
        tracing::info!(
            "listening on {} ({} session(s) restored)",
            listener.local_addr()?,
            restored.len()
        );
        ldam_service::serve(listener, state, async {
            let _ = tokio::signal::ctrl_c().await;
            tracing::info!("shutting down; persisting sessions");
        })
        .await?;
        Ok(())
    })
}
