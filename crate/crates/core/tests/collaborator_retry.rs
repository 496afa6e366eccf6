mod common;

use std::time::{Duration, Instant};

use common::*;
use fedstar::aggregator::Aggregator;
use fedstar::collaborator::{Collaborator, CollaboratorConfig, CollaboratorError};
use fedstar::reference_task::ReferenceRunner;
use fedstar::wire::{CallError, ClientTls};

#[test]
fn collaborators_wait_out_a_late_aggregator() {
    let plan = plan();
    let pki = TestPki::new();
    let port = free_port();
    let workers: Vec<_> = ["one", "two"]
        .iter()
        .map(|l| spawn_collaborator(&plan, l, port, pki.client(l), Duration::from_secs(60)))
        .collect();
    std::thread::sleep(Duration::from_secs(3));
    let running = start_on(
        &format!("127.0.0.1:{port}"),
        Aggregator::new(plan.clone(), initial_model(&plan)).unwrap(),
        &pki.server,
    );
    for w in workers {
        assert_eq!(w.join().unwrap().unwrap().rounds_participated(), 3);
    }
    assert!(running.service.handle().snapshot().unwrap().final_model.is_some());
}

#[test]
fn unreachable_aggregator_is_a_transport_failure_after_the_budget() {
    let plan = plan();
    let pki = TestPki::new();
    let client = client_for(free_port(), ClientTls::new(&pki.client("one"), FQDN).unwrap(), Duration::from_secs(2));
    let runner = ReferenceRunner::from_plan(&plan, 1, 2).unwrap();
    let mut collaborator = Collaborator::new(CollaboratorConfig::new("one", plan, 1, 2), runner, client).unwrap();
    let started = Instant::now();
    let err = collaborator.run().unwrap_err();
    assert!(
        matches!(err, CollaboratorError::Transport(CallError::Timeout { .. })),
        "{err:?}"
    );
    assert_eq!(err.exit_code(), 3);
    let elapsed = started.elapsed();
    assert!(elapsed >= Duration::from_secs(1) && elapsed < Duration::from_secs(10), "{elapsed:?}");
}
