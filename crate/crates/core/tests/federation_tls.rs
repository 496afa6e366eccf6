mod common;

use std::time::Duration;

use common::*;
use fedstar::aggregator::{Aggregator, Phase};
use fedstar::localsim::{run_experiment, SimConfig};
use fedstar::wire::{ErrorCode, GetTasksRequest, Message, RequestHeader, SendResultsRequest};

fn federate(plan: &fedstar::FlPlan) -> fedstar::aggregator::Snapshot {
    let pki = TestPki::new();
    let running = start(Aggregator::new(plan.clone(), initial_model(plan)).unwrap(), &pki.server);
    let workers: Vec<_> = plan
        .collaborators
        .iter()
        .map(|label| spawn_collaborator(plan, label, running.port(), pki.client(label), Duration::from_secs(30)))
        .collect();
    for w in workers {
        let summary = w.join().unwrap().unwrap();
        assert_eq!(summary.rounds_participated() as u32, plan.rounds_to_train());
    }
    let snapshot = running.service.wait(Duration::from_millis(50), Duration::from_secs(5));
    assert_eq!(snapshot.status.phase, Phase::Done);
    let peers = running.recorder.peers.lock().unwrap();
    assert!(peers.iter().all(|p| plan.has_collaborator(&p.identity)));
    assert!(peers.iter().all(|p| p.protocol_version == "TLSv1.3" || p.protocol_version == "TLSv1.2"));
    snapshot
}

#[test]
fn tls_federation_matches_the_in_process_simulation() {
    let plan = plan();
    let over_tls = federate(&plan);
    let simulated = run_experiment(SimConfig::new(plan.clone())).unwrap();
    assert_eq!(over_tls.final_model.as_deref(), Some(simulated.final_model.as_slice()));
    let values = |m: &[fedstar::metricsink::MetricRecord]| {
        m.iter()
            .map(|r| (r.round, r.task.clone(), r.name.clone(), r.value, r.weight))
            .collect::<Vec<_>>()
    };
    assert_eq!(values(&over_tls.metrics), values(&simulated.metrics));
    assert_eq!(over_tls.participation, simulated.participation);
}

#[test]
fn finished_federation_says_quit_and_refuses_results() {
    let plan = plan();
    let pki = TestPki::new();
    let running = start(Aggregator::new(plan.clone(), initial_model(&plan)).unwrap(), &pki.server);
    let workers: Vec<_> = ["one", "two"]
        .iter()
        .map(|l| spawn_collaborator(&plan, l, running.port(), pki.client(l), Duration::from_secs(30)))
        .collect();
    for w in workers {
        w.join().unwrap().unwrap();
    }
    let mut client = running.client(&pki.client("one"));
    let header = RequestHeader::new("one", plan.hash());
    match client
        .call(&Message::GetTasksRequest(GetTasksRequest { header: header.clone() }))
        .unwrap()
    {
        Message::GetTasksResponse(r) => assert!(r.quit),
        other => panic!("{other:?}"),
    }
    let late = Message::SendResultsRequest(SendResultsRequest {
        header,
        round: plan.rounds_to_train() - 1,
        task_name: "train".into(),
        data_size: 1,
        tensors: Vec::new(),
    });
    match client.call(&late).unwrap() {
        Message::ErrorResponse(e) => assert_eq!(e.kind(), Some(ErrorCode::FederationOver)),
        other => panic!("{other:?}"),
    }
}
