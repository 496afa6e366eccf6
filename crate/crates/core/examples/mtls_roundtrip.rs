//! One request over mutual TLS to a live aggregator, plus a client without
//! a certificate being turned away at the handshake.

use std::sync::Arc;
use std::time::Duration;

use fedstar::aggregator::{Aggregator, AggregatorService};
use fedstar::pki::{self, CertBundle, CertKind, KeyAlgorithm};
use fedstar::plan::parse_plan;
use fedstar::reference_task::ReferenceRunner;
use fedstar::wire::{self, ClientTls, Endpoint, GetTasksRequest, Message, RequestHeader, RetryPolicy, TlsClient};

fn issue(ca: &pki::CertificateAuthority, name: &str, kind: CertKind) -> anyhow::Result<CertBundle> {
    let (csr, key) = pki::generate_csr(name, kind, KeyAlgorithm::EcdsaP384)?;
    Ok(CertBundle {
        ca_chain: vec![ca.chain_pem()],
        entity_cert: ca.sign_csr(&csr, kind)?,
        private_key: key,
    })
}

fn main() -> anyhow::Result<()> {
    let plan = parse_plan(fedstar::workspace::template("mlp_blobs")?.plan)?;
    let initial = ReferenceRunner::from_plan(&plan, 1, 1)?.initial_model();
    let service = AggregatorService::spawn(Aggregator::new(plan.clone(), initial)?);

    let dir = tempfile::tempdir()?;
    let ca = pki::create_ca(dir.path())?;
    let server = wire::serve("127.0.0.1:0", &issue(&ca, "localhost", CertKind::Server)?, Arc::new(service.handle()))?;
    let endpoint = Endpoint::new("127.0.0.1", server.local_addr().port());
    println!("aggregator on {}", server.local_addr());

    let request = Message::GetTasksRequest(GetTasksRequest {
        header: RequestHeader::new("one", plan.hash()),
    });
    let tls = ClientTls::new(&issue(&ca, "one", CertKind::Client)?, "localhost")?;
    let mut client = TlsClient::new(endpoint.clone(), tls, RetryPolicy::with_timeout(Duration::from_secs(5)));
    println!("reply: {:?}", client.call(&request)?);
    println!("negotiated {}", client.protocol_version().unwrap_or_default());

    let anonymous = ClientTls::anonymous(&issue(&ca, "localhost", CertKind::Server)?, "localhost")?;
    let mut stranger = TlsClient::new(endpoint, anonymous, RetryPolicy::with_timeout(Duration::from_secs(5)));
    println!("without a certificate: {}", stranger.call(&request).unwrap_err());
    Ok(())
}
