//! A collaborator disappears after the first round. Under ALL the
//! federation stalls; under QUORUM it finishes on the survivors.

use fedstar::localsim::{run_experiment, SimConfig, SimError};
use fedstar::plan::parse_plan;

fn main() -> anyhow::Result<()> {
    let plan = parse_plan(fedstar::workspace::template("mlp_blobs")?.plan)?;

    match run_experiment(SimConfig::new(plan.clone()).with_fault("two", 0)) {
        Err(SimError::Deadlock { round, diagnosis }) => println!("ALL: stuck in round {round}: {diagnosis}"),
        other => anyhow::bail!("expected a deadlock, got {other:?}"),
    }

    let text = fedstar::plan::serialize_plan(&plan).replace(
        "mode: ALL",
        "mode: QUORUM\n  quorum_fraction: 0.5\n  timeout_seconds: 5",
    );
    let quorum = SimConfig::new(parse_plan(&text)?).with_fault("two", 0);
    let result = run_experiment(quorum)?;
    for r in &result.rounds {
        println!(
            "QUORUM: round {} from {:?}{}",
            r.round,
            r.train_contributors,
            if r.closed_by_quorum { " (closed by quorum)" } else { "" }
        );
    }
    Ok(())
}
