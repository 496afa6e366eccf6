//! Fixtures shared by the integration tests: a throwaway federation CA,
//! plans that point at localhost, and aggregator servers on ephemeral ports.
#![allow(dead_code)]

pub mod runbook;

use std::sync::{Arc, Mutex};
use std::time::Duration;

use fedstar::aggregator::{Aggregator, AggregatorHandle, AggregatorService};
use fedstar::collaborator::{Collaborator, CollaboratorConfig, CollaboratorError, RunSummary};
use fedstar::pki::{self, CertBundle, CertKind, CertificateAuthority, KeyAlgorithm};
use fedstar::plan::{parse_plan, FlPlan, HyperValue};
use fedstar::reference_task::ReferenceRunner;
use fedstar::wire::{self, ClientTls, Endpoint, Handler, Message, PeerInfo, RetryPolicy, ServerHandle, TlsClient};

pub const FQDN: &str = "localhost";

pub const PLAN: &str = "
aggregator:
  settings:
    fqdn: localhost
    port: 50051
    rounds_to_train: 3
    init_model_path: save/init.ofmf
    final_model_path: save/final.ofmf
collaborators: [one, two]
tasks:
  train:
    kind: TRAIN
    hyperparams:
      batch_size: 16
      epochs_per_round: 1
      learning_rate: 0.05
      samples_per_class: 50
      held_out_per_class: 20
  validate:
    kind: VALIDATE
assigner:
  groups:
    - group_name: everyone
      percentage: 1.0
      task_names: [train, validate]
straggler_policy:
  mode: ALL
assignment_seed: 7
";

pub fn plan() -> FlPlan {
    parse_plan(PLAN).unwrap()
}

pub fn quorum_plan(rounds: u32, timeout_seconds: u32) -> FlPlan {
    let text = PLAN
        .replace("rounds_to_train: 3", &format!("rounds_to_train: {rounds}"))
        .replace(
            "  mode: ALL",
            &format!("  mode: QUORUM\n  quorum_fraction: 0.5\n  timeout_seconds: {timeout_seconds}"),
        );
    parse_plan(&text).unwrap()
}

pub fn set_hyper(plan: &mut FlPlan, key: &str, value: HyperValue) {
    plan.tasks.get_mut("train").unwrap().hyperparams.insert(key, value);
}

/// A CA in a temporary workspace plus a server certificate for localhost.
pub struct TestPki {
    pub dir: tempfile::TempDir,
    pub ca: CertificateAuthority,
    pub server: CertBundle,
}

impl TestPki {
    pub fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let ca = pki::create_ca(dir.path()).unwrap();
        let server = issue(&ca, FQDN, CertKind::Server);
        TestPki { dir, ca, server }
    }

    pub fn client(&self, label: &str) -> CertBundle {
        issue(&self.ca, label, CertKind::Client)
    }
}

pub fn issue(ca: &CertificateAuthority, name: &str, kind: CertKind) -> CertBundle {
    let (request, key) = pki::generate_csr(name, kind, KeyAlgorithm::EcdsaP384).unwrap();
    CertBundle {
        ca_chain: vec![ca.chain_pem()],
        entity_cert: ca.sign_csr(&request, kind).unwrap(),
        private_key: key,
    }
}

/// Wraps the aggregator handle and remembers who got through the TLS layer.
pub struct Recorder {
    pub inner: AggregatorHandle,
    pub peers: Mutex<Vec<PeerInfo>>,
}

impl Handler for Recorder {
    fn handle(&self, peer: &PeerInfo, message: Message) -> Message {
        self.peers.lock().unwrap().push(peer.clone());
        self.inner.request(&peer.identity, message)
    }
}

pub struct Running {
    pub service: AggregatorService,
    pub server: ServerHandle,
    pub recorder: Arc<Recorder>,
}

impl Running {
    pub fn port(&self) -> u16 {
        self.server.local_addr().port()
    }

    pub fn client(&self, bundle: &CertBundle) -> TlsClient {
        client_for(self.port(), ClientTls::new(bundle, FQDN).unwrap(), Duration::from_secs(5))
    }
}

pub fn start(aggregator: Aggregator, server_bundle: &CertBundle) -> Running {
    start_on("127.0.0.1:0", aggregator, server_bundle)
}

pub fn start_on(addr: &str, aggregator: Aggregator, server_bundle: &CertBundle) -> Running {
    let service = AggregatorService::spawn(aggregator);
    let recorder = Arc::new(Recorder {
        inner: service.handle(),
        peers: Mutex::new(Vec::new()),
    });
    let server = wire::serve(addr, server_bundle, recorder.clone()).unwrap();
    Running {
        service,
        server,
        recorder,
    }
}

pub fn client_for(port: u16, tls: ClientTls, timeout: Duration) -> TlsClient {
    TlsClient::new(Endpoint::new("127.0.0.1", port), tls, RetryPolicy::with_timeout(timeout))
}

/// A port that was free a moment ago.
pub fn free_port() -> u16 {
    std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

/// Runs the reference collaborator for `label` against a local aggregator
/// on its own thread.
pub fn spawn_collaborator(
    plan: &FlPlan,
    label: &str,
    port: u16,
    bundle: CertBundle,
    timeout: Duration,
) -> std::thread::JoinHandle<Result<RunSummary, CollaboratorError>> {
    let plan = plan.clone();
    let label = label.to_string();
    std::thread::spawn(move || {
        let index = plan.collaborators.iter().position(|c| *c == label).map_or(1, |i| i + 1);
        let count = plan.collaborators.len();
        let runner = ReferenceRunner::from_plan(&plan, index, count)?;
        let client = client_for(port, ClientTls::new(&bundle, FQDN)?, timeout);
        let config = CollaboratorConfig::new(label, plan, index, count);
        Collaborator::new(config, runner, client)?.run()
    })
}

pub fn initial_model(plan: &FlPlan) -> Vec<fedstar::ModelTensor> {
    ReferenceRunner::from_plan(plan, 1, 1).unwrap().initial_model()
}
