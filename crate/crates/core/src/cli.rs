//! The `fedstar` command surface.
//!
//! ```text
//! fedstar workspace create --prefix DIR [--template NAME]
//! fedstar plan initialize [-a FQDN]
//! fedstar workspace certify
//! fedstar aggregator generate-cert-request [--fqdn FQDN]
//! fedstar aggregator certify [--fqdn FQDN]
//! fedstar workspace export
//! fedstar workspace import --archive ZIP
//! fedstar collaborator generate-cert-request -n LABEL [--shard I]
//! fedstar collaborator certify --request-pkg ZIP | --import ZIP
//! fedstar aggregator start
//! fedstar collaborator start -n LABEL
//! ```
//!
//! Commands other than `workspace create` and `workspace import` act on the
//! workspace in `--workspace`, `$FEDSTAR_WORKSPACE`, or the current
//! directory, in that order.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use crate::aggregator::{Aggregator, AggregatorService};
use crate::collaborator::{Collaborator, CollaboratorConfig};
use crate::localsim::{self, SimConfig};
use crate::metricsink::MetricSink;
use crate::pki::KeyAlgorithm;
use crate::plan;
use crate::reference_task::ReferenceRunner;
use crate::wire::{self, ClientTls, Endpoint, RetryPolicy, TlsClient};
use crate::workspace::{self, model_file, ShardSpec, Workspace, WorkspaceError, TEMPLATES};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "fedstar", version, about = "Plan-driven federated learning on a star topology")]
pub struct Cli {
    /// Workspace directory (defaults to the current directory)
    #[arg(long, global = true, env = "FEDSTAR_WORKSPACE", value_name = "DIR")]
    pub workspace: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create, certify, export and import workspaces
    #[command(subcommand)]
    Workspace(WorkspaceCmd),
    /// Prepare the federation plan
    #[command(subcommand)]
    Plan(PlanCmd),
    /// Aggregator certificates and the aggregator server
    #[command(subcommand)]
    Aggregator(AggregatorCmd),
    /// Collaborator certificates and the collaborator client
    #[command(subcommand)]
    Collaborator(CollaboratorCmd),
    /// Run a whole federation in-process and print its metrics as CSV
    #[command(hide = true)]
    Simulate(SimulateArgs),
}

#[derive(Debug, Subcommand)]
pub enum WorkspaceCmd {
    /// Create a workspace from a template (lists templates when none given)
    Create {
        #[arg(long, value_name = "DIR")]
        prefix: PathBuf,
        #[arg(long)]
        template: Option<String>,
    },
    /// Turn this workspace into the federation's certificate authority
    Certify,
    /// Write <workspace>/<name>.zip for distribution to collaborators
    Export,
    /// Unpack an exported workspace into the current directory
    Import {
        #[arg(long, value_name = "ZIP")]
        archive: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum PlanCmd {
    /// Set the aggregator address and write the initial model
    Initialize {
        /// Aggregator FQDN (detected from the host name when omitted)
        #[arg(short = 'a', long = "fqdn", value_name = "FQDN")]
        fqdn: Option<String>,
    },
}

#[derive(Debug, Args)]
pub struct KeyArgs {
    /// Use RSA-3072 keys instead of ECDSA P-384
    #[arg(long)]
    rsa: bool,
}

impl KeyArgs {
    fn algorithm(&self) -> KeyAlgorithm {
        if self.rsa {
            KeyAlgorithm::Rsa3072
        } else {
            KeyAlgorithm::EcdsaP384
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum AggregatorCmd {
    /// Create the aggregator key and certificate signing request
    GenerateCertRequest {
        /// Defaults to the plan's aggregator FQDN
        #[arg(long, value_name = "FQDN")]
        fqdn: Option<String>,
        #[command(flatten)]
        key: KeyArgs,
    },
    /// Sign the aggregator request with this workspace's CA
    Certify {
        #[arg(long, value_name = "FQDN")]
        fqdn: Option<String>,
    },
    /// Serve the federation until every round is done
    Start {
        /// Listen address (defaults to 0.0.0.0 and the plan's port)
        #[arg(long, value_name = "ADDR")]
        bind: Option<String>,
        /// Seconds to keep serving quits after the last round
        #[arg(long, default_value_t = 30)]
        linger: u64,
    },
}

#[derive(Debug, Subcommand)]
pub enum CollaboratorCmd {
    /// Create a key, a signing request package and the data shard file
    GenerateCertRequest {
        #[arg(short = 'n', long = "label")]
        label: String,
        /// 1-based shard of the dataset (defaults to the label's roster position)
        #[arg(long)]
        shard: Option<usize>,
        /// Number of shards (defaults to the roster size)
        #[arg(long)]
        shard_count: Option<usize>,
        #[command(flatten)]
        key: KeyArgs,
    },
    /// Sign a request package (CA side) or install a signed one
    Certify {
        #[arg(long, value_name = "ZIP", conflicts_with = "import", required_unless_present = "import")]
        request_pkg: Option<PathBuf>,
        #[arg(long, value_name = "ZIP")]
        import: Option<PathBuf>,
    },
    /// Join the federation and run assigned tasks until told to quit
    Start {
        #[arg(short = 'n', long = "label")]
        label: String,
        /// Give up when the aggregator stays unreachable this long
        #[arg(long, default_value_t = 600, value_name = "SECS")]
        connect_timeout: u64,
    },
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, value_name = "FILE")]
    plan: PathBuf,
    /// Roster is replaced with col1..colN when its size differs
    #[arg(long)]
    collaborators: usize,
    /// Dotted plan path override, e.g. aggregator.settings.rounds_to_train=3
    #[arg(long = "set", value_name = "PATH=VALUE")]
    overrides: Vec<String>,
}

/// An error with the exit status it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    fn runtime(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_RUNTIME,
            message: message.into(),
        }
    }
}

impl From<WorkspaceError> for Failure {
    fn from(e: WorkspaceError) -> Self {
        match e {
            WorkspaceError::Io { .. } => Failure::runtime(e.to_string()),
            _ => Failure::config(e.to_string()),
        }
    }
}

impl From<crate::pki::PkiError> for Failure {
    fn from(e: crate::pki::PkiError) -> Self {
        Failure::config(e.to_string())
    }
}

impl Command {
    fn component(&self) -> &'static str {
        match self {
            Command::Workspace(_) => "workspace",
            Command::Plan(_) => "plan",
            Command::Aggregator(_) => "aggregator",
            Command::Collaborator(_) => "collaborator",
            Command::Simulate(_) => "simulate",
        }
    }
}

/// Parses the process arguments and runs the command.
pub fn run() -> i32 {
    run_from(std::env::args_os())
}

pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let component = cli.command.component();
    init_logging(component);
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("[{component}] error: {}", f.message);
            f.code
        }
    }
}

fn init_logging(component: &str) {
    let component = component.to_string();
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(move |buf, record| writeln!(buf, "[{component}] {}", record.args()))
        .try_init();
}

fn say(component: &str, line: impl std::fmt::Display) {
    println!("[{component}] {line}");
}

pub fn dispatch(cli: Cli) -> Result<(), Failure> {
    let ws_dir = cli.workspace.clone().unwrap_or_else(|| PathBuf::from("."));
    let open = || Workspace::open(&ws_dir).map_err(Failure::from);
    match cli.command {
        Command::Workspace(cmd) => workspace_cmd(cmd, open),
        Command::Plan(PlanCmd::Initialize { fqdn }) => {
            let ws = open()?;
            let plan = ws.initialize_plan(fqdn.as_deref())?;
            say("plan", format!("aggregator at {}:{}", plan.settings().fqdn, plan.settings().port));
            say("plan", format!("initial model written to {}", ws.init_model_path()?.display()));
            say("plan", format!("plan hash {}", plan.hash()));
            Ok(())
        }
        Command::Aggregator(cmd) => aggregator_cmd(cmd, &open()?),
        Command::Collaborator(cmd) => collaborator_cmd(cmd, &open()?),
        Command::Simulate(args) => simulate(args),
    }
}

fn workspace_cmd(cmd: WorkspaceCmd, open: impl Fn() -> Result<Workspace, Failure>) -> Result<(), Failure> {
    match cmd {
        WorkspaceCmd::Create { prefix, template: None } => {
            say("workspace", format!("no template given for {}; available templates:", prefix.display()));
            for t in TEMPLATES {
                say("workspace", format!("  {:<12} {}", t.name, t.description));
            }
            Ok(())
        }
        WorkspaceCmd::Create {
            prefix,
            template: Some(t),
        } => {
            let ws = workspace::create_workspace(&prefix, &t)?;
            say("workspace", format!("created {} from template {t}", ws.root().display()));
            Ok(())
        }
        WorkspaceCmd::Certify => {
            let ws = open()?;
            let ca = ws.certify()?;
            say("workspace", format!("certificate authority created in {}", ca.layout().ca_dir().display()));
            Ok(())
        }
        WorkspaceCmd::Export => {
            let ws = open()?;
            let path = ws.export()?;
            say("workspace", format!("exported to {}", path.display()));
            Ok(())
        }
        WorkspaceCmd::Import { archive } => {
            let stem = archive
                .file_stem()
                .ok_or_else(|| Failure::config(format!("{} has no file name", archive.display())))?;
            let (ws, requirements) = workspace::import_workspace(&archive, Path::new(stem))?;
            say("workspace", format!("imported into {}", ws.root().display()));
            say("workspace", format!("plan hash {}", ws.load_plan()?.hash()));
            for line in requirements.lines().filter(|l| !l.trim().is_empty()) {
                say("workspace", format!("requirement: {line}"));
            }
            Ok(())
        }
    }
}

fn aggregator_cmd(cmd: AggregatorCmd, ws: &Workspace) -> Result<(), Failure> {
    let plan = ws.load_plan()?;
    let default_fqdn = plan.settings().fqdn.clone();
    match cmd {
        AggregatorCmd::GenerateCertRequest { fqdn, key } => {
            let fqdn = fqdn.unwrap_or(default_fqdn);
            let csr = ws.aggregator_cert_request(&fqdn, key.algorithm())?;
            say("aggregator", format!("signing request for {fqdn} written to {}", csr.display()));
            Ok(())
        }
        AggregatorCmd::Certify { fqdn } => {
            let fqdn = fqdn.unwrap_or(default_fqdn);
            let crt = ws.aggregator_certify(&fqdn)?;
            say("aggregator", format!("certificate for {fqdn} written to {}", crt.display()));
            Ok(())
        }
        AggregatorCmd::Start { bind, linger } => start_aggregator(ws, bind, Duration::from_secs(linger)),
    }
}

fn start_aggregator(ws: &Workspace, bind: Option<String>, linger: Duration) -> Result<(), Failure> {
    let plan = ws.load_plan()?;
    let settings = plan.settings().clone();
    let bundle = ws.pki().server_bundle(&settings.fqdn).map_err(|e| {
        Failure::config(format!(
            "aggregator certificate for {} is not usable ({e}); run `aggregator generate-cert-request` and `aggregator certify`",
            settings.fqdn
        ))
    })?;
    let init_path = ws.resolve(&settings.init_model_path);
    if !init_path.is_file() {
        return Err(Failure::config(format!(
            "initial model {} is missing; run `plan initialize`",
            init_path.display()
        )));
    }
    let initial = model_file::load(&init_path).map_err(|e| Failure::config(e.to_string()))?;
    let sink = Arc::new(MetricSink::default().bounded(plan.rounds_to_train()));
    let final_path = ws.resolve(&settings.final_model_path);
    let aggregator = Aggregator::new(plan.clone(), initial)
        .map_err(|e| Failure::config(e.to_string()))?
        .with_final_model_path(&final_path)
        .with_sink(sink.clone());
    let service = AggregatorService::spawn(aggregator);
    let addr = bind.unwrap_or_else(|| format!("0.0.0.0:{}", settings.port));
    let mut server = wire::serve(addr.as_str(), &bundle, Arc::new(service.handle()))
        .map_err(|e| Failure::runtime(format!("cannot listen on {addr}: {e}")))?;
    say(
        "aggregator",
        format!(
            "listening on {} for {} collaborators, {} rounds, plan {}",
            server.local_addr(),
            plan.collaborators.len(),
            plan.rounds_to_train(),
            plan.hash()
        ),
    );
    say("aggregator", "waiting for the collaborators to connect");
    let snapshot = service.wait(Duration::from_millis(200), linger);
    server.shutdown();
    service.stop();
    if !snapshot.pending_quits.is_empty() {
        log::warn!("collaborators that never collected their quit: {:?}", snapshot.pending_quits);
    }
    let metrics_path = ws.resolve("save/aggregator_metrics.csv");
    sink.flush_csv(&metrics_path)
        .map_err(|e| Failure::runtime(e.to_string()))?;
    say("aggregator", format!("metrics written to {}", metrics_path.display()));
    Ok(())
}

fn collaborator_cmd(cmd: CollaboratorCmd, ws: &Workspace) -> Result<(), Failure> {
    match cmd {
        CollaboratorCmd::GenerateCertRequest {
            label,
            shard,
            shard_count,
            key,
        } => {
            let plan = ws.load_plan()?;
            if !plan::is_label(&label) {
                return Err(Failure::config(format!("`{label}` is not a valid collaborator label")));
            }
            let position = plan.collaborators.iter().position(|c| *c == label);
            let shard_index = match (shard, position) {
                (Some(i), _) => i,
                (None, Some(p)) => p + 1,
                (None, None) => {
                    return Err(Failure::config(format!(
                        "`{label}` is not in the plan's roster; pass --shard explicitly"
                    )))
                }
            };
            let spec = ShardSpec {
                shard_index,
                shard_count: shard_count.unwrap_or(plan.collaborators.len()),
            };
            let package = ws.collaborator_cert_request(&label, spec, key.algorithm())?;
            say("collaborator", format!("{label}: data shard {} of {}", spec.shard_index, spec.shard_count));
            say("collaborator", format!("{label}: send {} to the certificate authority", package.display()));
            Ok(())
        }
        CollaboratorCmd::Certify {
            request_pkg: Some(pkg),
            ..
        } => {
            let signed = ws.certify_request_package(&pkg)?;
            say("collaborator", format!("signed certificate package written to {}", signed.display()));
            Ok(())
        }
        CollaboratorCmd::Certify { import: Some(pkg), .. } => {
            let label = ws.import_signed_package(&pkg)?;
            say("collaborator", format!("{label}: certificate installed"));
            Ok(())
        }
        CollaboratorCmd::Certify { .. } => Err(Failure {
            code: EXIT_USAGE,
            message: "one of --request-pkg or --import is required".into(),
        }),
        CollaboratorCmd::Start { label, connect_timeout } => start_collaborator(ws, &label, connect_timeout),
    }
}

fn start_collaborator(ws: &Workspace, label: &str, connect_timeout: u64) -> Result<(), Failure> {
    let plan = ws.load_plan()?;
    if !plan.has_collaborator(label) {
        return Err(Failure::config(format!("`{label}` is not in the plan's roster")));
    }
    let shard = ws.shard()?;
    let bundle = ws.pki().client_bundle(label).map_err(|e| {
        Failure::config(format!(
            "certificate for `{label}` is not usable ({e}); run `collaborator generate-cert-request` and `collaborator certify --import`"
        ))
    })?;
    let settings = plan.settings();
    let tls = ClientTls::new(&bundle, &settings.fqdn).map_err(|e| Failure::config(e.to_string()))?;
    let client = TlsClient::new(
        Endpoint::new(settings.fqdn.clone(), settings.port),
        tls,
        RetryPolicy::with_timeout(Duration::from_secs(connect_timeout)),
    );
    let runner = ReferenceRunner::from_plan(&plan, shard.shard_index, shard.shard_count)
        .map_err(|e| Failure::config(e.to_string()))?;
    let config = CollaboratorConfig::new(label, plan.clone(), shard.shard_index, shard.shard_count);
    let fail = |e: crate::collaborator::CollaboratorError| Failure {
        code: e.exit_code(),
        message: e.to_string(),
    };
    let mut collaborator = Collaborator::new(config, runner, client).map_err(fail)?;
    say("collaborator", format!("{label}: connecting to {}:{}", settings.fqdn, settings.port));
    let summary = collaborator.run().map_err(fail)?;
    say(
        "collaborator",
        format!(
            "{label}: finished: {} rounds participated, {} tasks run",
            summary.rounds_participated(),
            summary.tasks_run
        ),
    );
    Ok(())
}

fn simulate(args: SimulateArgs) -> Result<(), Failure> {
    let text = std::fs::read_to_string(&args.plan)
        .map_err(|e| Failure::config(format!("{}: {e}", args.plan.display())))?;
    let mut plan = plan::parse_plan(&text).map_err(|e| Failure::config(e.to_string()))?;
    if plan.collaborators.len() != args.collaborators {
        plan = localsim::resize_roster(&plan, args.collaborators).map_err(|e| Failure::config(e.to_string()))?;
    }
    let mut overrides = BTreeMap::new();
    for o in &args.overrides {
        let (path, value) = o
            .split_once('=')
            .ok_or_else(|| Failure::config(format!("override `{o}` is not PATH=VALUE")))?;
        let value: serde_yaml::Value =
            serde_yaml::from_str(value).map_err(|e| Failure::config(format!("override `{o}`: {e}")))?;
        overrides.insert(path.to_string(), value);
    }
    let mut config = SimConfig::new(plan);
    config.overrides = overrides;
    let result = localsim::run_experiment(config).map_err(|e| match e {
        localsim::SimError::Deadlock { .. } => Failure::runtime(e.to_string()),
        _ => Failure::config(e.to_string()),
    })?;
    let mut out = csv::Writer::from_writer(std::io::stdout());
    let csv_err = |e: csv::Error| Failure::runtime(e.to_string());
    out.write_record(["round", "task", "metric", "value"]).map_err(csv_err)?;
    for r in &result.metrics {
        out.write_record([r.round.to_string(), r.task.clone(), r.name.clone(), r.value.to_string()])
            .map_err(csv_err)?;
    }
    out.flush().map_err(|e| Failure::runtime(e.to_string()))?;
    Ok(())
}
