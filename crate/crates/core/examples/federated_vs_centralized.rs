//! Trains the blobs classifier federated across two collaborators and
//! centrally on the pooled data with the same schedule, then compares.

use fedstar::collaborator::TaskRunner;
use fedstar::localsim::{run_centralized_baseline, run_experiment, SimConfig};
use fedstar::plan::parse_plan;
use fedstar::reference_task::ReferenceRunner;

fn main() -> anyhow::Result<()> {
    let plan = parse_plan(fedstar::workspace::template("mlp_blobs")?.plan)?;
    let federated = run_experiment(SimConfig::new(plan.clone()))?;
    let central = run_centralized_baseline(&SimConfig::new(plan.clone()))?;

    let mut pooled = ReferenceRunner::from_plan(&plan, 1, 1)?;
    let fed = pooled.validate(&federated.final_model, &Default::default(), 0)?;
    println!("federated   accuracy {:.4}  loss {:.4}", fed.metrics["accuracy"], fed.metrics["loss"]);
    println!("centralized accuracy {:.4}  loss {:.4}", central.accuracy, central.loss);
    for (epoch, loss) in central.epoch_losses.iter().enumerate() {
        println!("  centralized epoch {epoch}: train loss {loss:.4}");
    }
    Ok(())
}
