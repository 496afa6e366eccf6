//! A whole federation in one process on a virtual clock, with the plan
//! edited through dotted-path overrides.

use fedstar::localsim::{run_experiment, SimConfig};
use fedstar::plan::parse_plan;

fn main() -> anyhow::Result<()> {
    let plan = parse_plan(fedstar::workspace::template("mlp_blobs")?.plan)?;
    let config = SimConfig::new(plan)
        .with_override("aggregator.settings.rounds_to_train", 8)
        .with_override("tasks.train.hyperparams.learning_rate", 0.1);
    let result = run_experiment(config)?;

    for record in &result.metrics {
        println!("{}", record.log_line());
    }
    println!("participation: {:?}", result.participation);
    println!("virtual time: {:?}", result.virtual_elapsed);
    println!(
        "final accuracy {:.4}",
        result.final_metric("validate", "accuracy").unwrap_or(f64::NAN)
    );
    Ok(())
}
