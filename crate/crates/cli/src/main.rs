use std::collections::BTreeMap;
use std::io::Write as _;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use ashwin_core::app::{App, AppConfig};
use ashwin_core::model::{JobSpec, LoopParams};
use ashwin_core::plugin::{Approval, PluginDescriptor, Visibility};
use ashwin_core::sim::{simulate_crowd, uniform_profiles};
use ashwin_core::stages::builtin::{run_from_files, BuiltinStage};
use ashwin_core::storage::{content_id, read_source, write_zip};
use clap::{Args, Parser, Subcommand};

use ashwin_cli::client::Client;
use ashwin_cli::demo::{self, CrowdConfig, Dataset};

#[derive(Parser)]
#[command(name = "ashwin", version, about = "Machine-human image annotation loop")]
struct Cli {
    /// Base URL of a running server.
    #[arg(long, global = true, env = "ASHWIN_SERVER")]
    server: Option<String>,
    /// Admin bearer token.
    #[arg(long, global = true, env = "ASHWIN_ADMIN_TOKEN")]
    token: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP server.
    Serve {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Token required for admin routes. Without one every caller is admin.
        #[arg(long)]
        admin_token: Option<String>,
    },
    #[command(subcommand)]
    Plugin(PluginCmd),
    #[command(subcommand)]
    Job(JobCmd),
    #[command(subcommand)]
    Batch(BatchCmd),
    #[command(subcommand)]
    Crowd(CrowdCmd),
    #[command(subcommand)]
    Demo(DemoCmd),
    #[command(subcommand)]
    Barcode(BarcodeCmd),
    /// Serve one request file with a built-in stage.
    #[command(hide = true)]
    StageExec { builtin: String, request: PathBuf, response: PathBuf },
}

#[derive(Subcommand)]
enum PluginCmd {
    /// Upload a plugin archive (ZIP or directory).
    Add {
        path: PathBuf,
        #[arg(long)]
        owner: String,
        #[arg(long)]
        public: bool,
    },
    /// Approve a plugin, or reject it with a reason.
    Approve {
        id: String,
        #[arg(long)]
        reject: Option<String>,
    },
    List {
        #[arg(long)]
        viewer: Option<String>,
    },
    /// Run the conformance check.
    Check { id: String },
}

#[derive(Subcommand)]
enum JobCmd {
    Create {
        #[arg(long)]
        spec: PathBuf,
        /// Image directory or ZIP.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        owner: Option<String>,
    },
    Status { id: String },
}

#[derive(Subcommand)]
enum BatchCmd {
    /// Open the next annotation batch.
    Open { job: String },
}

#[derive(Args, Clone)]
struct CrowdArgs {
    #[arg(long, default_value_t = 0.9)]
    accuracy: f64,
    #[arg(long, default_value_t = 5)]
    workers: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

impl CrowdArgs {
    fn config(&self) -> CrowdConfig {
        CrowdConfig { workers: self.workers, accuracy: self.accuracy, seed: self.seed }
    }
}

#[derive(Subcommand)]
enum CrowdCmd {
    /// Annotate an open batch with simulated workers.
    Simulate {
        /// Batch token.
        #[arg(long = "batch-token")]
        batch_token: String,
        /// TSV of `<file name or image id>\t<class>`.
        #[arg(long)]
        truth: PathBuf,
        /// Dataset used to map file names to image ids.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[command(flatten)]
        crowd: CrowdArgs,
    },
}

#[derive(Subcommand)]
enum DemoCmd {
    /// Create a job and run crowd iterations end to end.
    Loop {
        #[arg(long, default_value_t = 3)]
        iterations: usize,
        /// Data directory of the embedded server. Ignored with --server.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Job spec; defaults to a built-in stripes job.
        #[arg(long, requires_all = ["dataset", "truth"])]
        spec: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long, default_value_t = 30)]
        per_class: usize,
        #[command(flatten)]
        crowd: CrowdArgs,
    },
}

#[derive(Subcommand)]
enum BarcodeCmd {
    /// Slide a window over an image and score it with a served model.
    Locate {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        job: String,
        #[arg(long)]
        version: u32,
        #[arg(long, default_value_t = 32)]
        window: u32,
        #[arg(long, default_value_t = 16)]
        stride: u32,
        #[arg(long, default_value = "barcode")]
        positive: String,
    },
    /// Train a one-class barcode model on 20 striped crops and localize fixtures.
    Demo {
        /// Crowd rounds to run after the seed model.
        #[arg(long, default_value_t = 0)]
        iterations: usize,
        #[arg(long, default_value_t = 50)]
        images: u64,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[command(flatten)]
        crowd: CrowdArgs,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let remote = || -> Result<Client> {
        let server = cli.server.clone().context("--server (or ASHWIN_SERVER) is required")?;
        Ok(Client::new(server, cli.token.clone()))
    };
    match cli.command {
        Command::Serve { ref data_dir, port, ref host, ref admin_token } => {
            serve(data_dir, host, port, admin_token.clone().or(cli.token.clone()))
        }
        Command::Plugin(cmd) => plugin(&remote()?, cmd),
        Command::Job(cmd) => job(&remote()?, cmd),
        Command::Batch(BatchCmd::Open { job }) => {
            let b = remote()?.request_batch(&job)?;
            println!("batch_id\t{}\ntoken\t{}\nurl\t{}\nimages\t{}", b.batch_id, b.token, b.url, b.image_ids.len());
            for p in &b.postings {
                println!("posting\t{}", serde_json::to_string(p)?);
            }
            Ok(())
        }
        Command::Crowd(CrowdCmd::Simulate { batch_token, truth, dataset, crowd }) => {
            let client = remote()?;
            let truth = read_truth(&truth, dataset.as_deref())?;
            let profiles = uniform_profiles(crowd.workers, crowd.accuracy, crowd.seed);
            let report = simulate_crowd(&client, &batch_token, &profiles, &truth).map_err(|e| anyhow!("{e}"))?;
            print!("{}", report.log_tsv());
            println!("accuracy\t{:.4}", report.accuracy());
            println!("batch_complete\t{}", report.batch_complete);
            if let Some(v) = report.model_version {
                println!("model_version\t{v}");
            }
            Ok(())
        }
        Command::Demo(DemoCmd::Loop { iterations, data_dir, spec, dataset, truth, per_class, crowd }) => {
            let (spec, data) = match (spec, dataset, truth) {
                (Some(spec), Some(dataset), Some(truth)) => {
                    let spec: JobSpec = serde_json::from_slice(&std::fs::read(&spec)?).context("parsing job spec")?;
                    (spec, dataset_with_truth(&dataset, &truth)?)
                }
                _ => (
                    demo::stripes_spec(5, "builtin-logistic", "builtin-least-confidence", LoopParams::default()),
                    demo::stripes_dataset(per_class, crowd.seed),
                ),
            };
            with_server(cli.server.clone(), cli.token.clone(), data_dir, |client| {
                let summary = demo::run_loop(client, &spec, &data, iterations, &crowd.config())?;
                print!("{}", summary.tsv());
                Ok(())
            })
        }
        Command::Barcode(BarcodeCmd::Locate { image, job, version, window, stride, positive }) => {
            let img = demo::load_image(&image)?;
            let loc = demo::locate_via_api(&remote()?, &job, version, &img, window, stride, &positive)?;
            let b = loc.best;
            println!("{}\t{}\t{}\t{}\t{:.6}", b.x, b.y, b.w, b.h, b.score);
            Ok(())
        }
        Command::Barcode(BarcodeCmd::Demo { iterations, images, data_dir, crowd }) => {
            let spec = demo::barcode_spec(20);
            let data = demo::stripes_dataset(40, crowd.seed);
            with_server(cli.server.clone(), cli.token.clone(), data_dir, |client| {
                let summary = demo::run_loop(client, &spec, &data, iterations, &crowd.config())?;
                print!("{}", summary.tsv());
                let version = summary.rows.last().map(|r| r.model_version).context("no model")?;
                let rows = demo::barcode_fixture_run(client, &summary.job_id, version, images, 32, 16)?;
                println!("seed\tx\ty\tw\th\tscore\ttruth_x\ttruth_y\tiou");
                for r in &rows {
                    println!(
                        "{}\t{}\t{}\t{}\t{}\t{:.6}\t{}\t{}\t{:.4}",
                        r.seed, r.best.x, r.best.y, r.best.w, r.best.h, r.best.score, r.truth.x, r.truth.y, r.iou
                    );
                }
                let hits = rows.iter().filter(|r| r.iou >= 0.5).count();
                println!("hits_at_iou_0.5\t{hits}/{}", rows.len());
                Ok(())
            })
        }
        Command::StageExec { builtin, request, response } => {
            let stage = BuiltinStage::from_id(&builtin).with_context(|| format!("unknown built-in `{builtin}`"))?;
            run_from_files(stage, &request, &response)?;
            Ok(())
        }
    }
}

fn serve(data_dir: &Path, host: &str, port: u16, admin_token: Option<String>) -> Result<()> {
    let mut config = AppConfig::new(data_dir);
    config.admin_token = admin_token;
    let app = Arc::new(App::open(config).context("opening data directory")?);
    let addr: SocketAddr = format!("{host}:{port}").parse().context("bad --host/--port")?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
        println!("listening on http://{}", listener.local_addr()?);
        std::io::stdout().flush()?;
        ashwin_server::serve(app, listener).await?;
        Ok(())
    })
}

/// Runs `f` against `server`, or against an embedded server on an ephemeral
/// port when none is given.
fn with_server(
    server: Option<String>,
    token: Option<String>,
    data_dir: Option<PathBuf>,
    f: impl FnOnce(&Client) -> Result<()>,
) -> Result<()> {
    if let Some(url) = server {
        return f(&Client::new(url, token));
    }
    let scratch = tempfile::tempdir()?;
    let dir = data_dir.unwrap_or_else(|| scratch.path().to_path_buf());
    let app = Arc::new(App::open(AppConfig::new(&dir)).context("opening data directory")?);
    let rt = tokio::runtime::Runtime::new()?;
    let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0"))?;
    let addr = listener.local_addr()?;
    rt.spawn(ashwin_server::serve(app, listener));
    let result = f(&Client::new(format!("http://{addr}"), None));
    rt.shutdown_background();
    result
}

fn plugin(client: &Client, cmd: PluginCmd) -> Result<()> {
    match cmd {
        PluginCmd::Add { path, owner, public } => {
            let archive = if path.is_dir() { write_zip(&read_source(&path)?)? } else { std::fs::read(&path)? };
            print_plugins(&[client.add_plugin(archive, &owner, public)?]);
        }
        PluginCmd::Approve { id, reject } => print_plugins(&[client.approve_plugin(&id, reject.as_deref())?]),
        PluginCmd::List { viewer } => print_plugins(&client.list_plugins(viewer.as_deref())?),
        PluginCmd::Check { id } => {
            let report = client.check_plugin(&id)?;
            for m in &report.methods {
                println!("{}\t{}\t{}", m.method, if m.passed { "pass" } else { "fail" }, m.detail);
            }
            if !report.all_passed() {
                bail!("plugin {id} failed conformance");
            }
        }
    }
    Ok(())
}

fn print_plugins(plugins: &[PluginDescriptor]) {
    for p in plugins {
        let visibility = match &p.visibility {
            Visibility::Public => "public".to_string(),
            Visibility::Private { owner_id } => format!("private:{owner_id}"),
        };
        let approval = match &p.approval {
            Approval::Uploaded => "uploaded".to_string(),
            Approval::Approved { by } => format!("approved:{by}"),
            Approval::Rejected { by, reason } => format!("rejected:{by}:{reason}"),
        };
        println!("{}\t{}\t{}\t{}\t{visibility}\t{approval}", p.plugin_id, p.name, p.version, p.stage_kind.stage());
    }
}

fn job(client: &Client, cmd: JobCmd) -> Result<()> {
    let id = match cmd {
        JobCmd::Create { spec, dataset, owner } => {
            let spec: JobSpec = serde_json::from_slice(&std::fs::read(&spec)?).context("parsing job spec")?;
            let archive = if dataset.is_dir() { write_zip(&read_source(&dataset)?)? } else { std::fs::read(&dataset)? };
            client.create_job(&spec, archive, owner.as_deref())?.job_id
        }
        JobCmd::Status { id } => id,
    };
    let s = client.job_status(&id)?;
    println!("job_id\t{}\nstate\t{}", s.job_id, s.state);
    println!("training_set\t{}\nholdout\t{}\npool_remaining\t{}", s.training_set_size, s.holdout_size, s.pool_remaining);
    for v in &s.versions {
        let acc = v.holdout_accuracy.map_or("-".to_string(), |a| format!("{a:.4}"));
        println!("version\t{}\t{}\t{acc}", v.version, v.trained_on);
    }
    if let Some(b) = &s.open_batch {
        println!("open_batch\t{}\t{}", b.progress.batch_id, b.token);
    }
    Ok(())
}

/// Parses a truth TSV. Keys that name a file of `dataset` become its image id.
fn read_truth(path: &Path, dataset: Option<&Path>) -> Result<BTreeMap<String, String>> {
    let names: BTreeMap<String, String> = match dataset {
        Some(d) => read_source(d)?.into_iter().map(|(n, b)| (n, content_id(&b))).collect(),
        None => BTreeMap::new(),
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, class) = line
            .split_once('\t')
            .with_context(|| format!("{}:{}: expected `<image>\\t<class>`", path.display(), n + 1))?;
        let id = names.get(key).cloned().unwrap_or_else(|| key.to_string());
        out.insert(id, class.trim().to_string());
    }
    Ok(out)
}

fn dataset_with_truth(dataset: &Path, truth: &Path) -> Result<Dataset> {
    let files = read_source(dataset)?;
    let raw = read_truth(truth, None)?;
    Ok(Dataset { files, truth: raw })
}
