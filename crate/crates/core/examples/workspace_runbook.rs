//! The operator runbook through the library: an aggregator workspace acts
//! as CA, two collaborator hosts import it and exchange certificates, then
//! the federation runs over mutual TLS on localhost threads.

use std::sync::Arc;
use std::time::Duration;

use fedstar::aggregator::{Aggregator, AggregatorService};
use fedstar::collaborator::{Collaborator, CollaboratorConfig};
use fedstar::pki::KeyAlgorithm;
use fedstar::reference_task::ReferenceRunner;
use fedstar::wire::{self, ClientTls, Endpoint, RetryPolicy, TlsClient};
use fedstar::workspace::{self, model_file, ShardSpec, Workspace};

fn main() -> anyhow::Result<()> {
    let root = tempfile::tempdir()?;

    let agg = workspace::create_workspace(&root.path().join("agg"), "mlp_blobs")?;
    let mut plan = agg.load_plan()?;
    plan.aggregator.settings.port = free_port()?;
    agg.save_plan(&plan)?;
    let plan = agg.initialize_plan(Some("localhost"))?;
    agg.certify()?;
    agg.aggregator_cert_request("localhost", KeyAlgorithm::EcdsaP384)?;
    agg.aggregator_certify("localhost")?;
    let archive = agg.export()?;
    println!("exported {}", archive.display());

    let mut hosts: Vec<(String, Workspace)> = Vec::new();
    for (i, label) in plan.collaborators.iter().enumerate() {
        let (ws, _requirements) = workspace::import_workspace(&archive, &root.path().join(label))?;
        let request = ws.collaborator_cert_request(
            label,
            ShardSpec {
                shard_index: i + 1,
                shard_count: plan.collaborators.len(),
            },
            KeyAlgorithm::EcdsaP384,
        )?;
        let signed = agg.certify_request_package(&request)?;
        ws.import_signed_package(&signed)?;
        println!("{label}: certified via {}", signed.display());
        hosts.push((label.clone(), ws));
    }

    let initial = model_file::load(&agg.init_model_path()?)?;
    let service = AggregatorService::spawn(Aggregator::new(plan.clone(), initial)?.with_final_model_path(agg.final_model_path()?));
    let server_bundle = agg.pki().server_bundle("localhost")?;
    let addr = format!("127.0.0.1:{}", plan.settings().port);
    let mut server = wire::serve(addr.as_str(), &server_bundle, Arc::new(service.handle()))?;

    let workers: Vec<_> = hosts
        .into_iter()
        .map(|(label, ws)| {
            std::thread::spawn(move || -> anyhow::Result<usize> {
                let plan = ws.load_plan()?;
                let shard = ws.shard()?;
                let tls = ClientTls::new(&ws.pki().client_bundle(&label)?, "localhost")?;
                let client = TlsClient::new(
                    Endpoint::new("127.0.0.1", plan.settings().port),
                    tls,
                    RetryPolicy::with_timeout(Duration::from_secs(30)),
                );
                let runner = ReferenceRunner::from_plan(&plan, shard.shard_index, shard.shard_count)?;
                let config = CollaboratorConfig::new(label, plan, shard.shard_index, shard.shard_count);
                Ok(Collaborator::new(config, runner, client)?.run()?.rounds_participated())
            })
        })
        .collect();
    for w in workers {
        println!("collaborator finished after {} rounds", w.join().expect("worker panicked")?);
    }
    let snapshot = service.wait(Duration::from_millis(100), Duration::from_secs(5));
    server.shutdown();
    for record in snapshot.metrics.iter().filter(|r| r.name == "accuracy") {
        println!("round {} accuracy {:.4}", record.round, record.value);
    }
    println!("final model: {}", agg.final_model_path()?.display());
    Ok(())
}

fn free_port() -> std::io::Result<u16> {
    Ok(std::net::TcpListener::bind("127.0.0.1:0")?.local_addr()?.port())
}
