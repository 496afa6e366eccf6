//! Parse a plan, print its hash, and show which collaborator gets which
//! tasks in the first few rounds.

use fedstar::plan::{assign_tasks, parse_plan};

const PLAN: &str = "
aggregator:
  settings:
    fqdn: agg.example.org
    port: 50051
    rounds_to_train: 4
    init_model_path: save/init.ofmf
    final_model_path: save/final.ofmf
collaborators: [alpha, bravo, charlie, delta, echo]
tasks:
  train:
    kind: TRAIN
    hyperparams: {batch_size: 32, epochs_per_round: 1, learning_rate: 0.05}
  validate:
    kind: VALIDATE
assigner:
  groups:
    - group_name: trainers
      percentage: 0.8
      task_names: [train, validate]
    - group_name: validators
      percentage: 0.2
      task_names: [validate]
straggler_policy:
  mode: QUORUM
  quorum_fraction: 0.6
  timeout_seconds: 30
assignment_seed: 11
";

fn main() -> anyhow::Result<()> {
    let plan = parse_plan(PLAN)?;
    println!("plan hash {}", plan.hash());
    println!(
        "quorum: {} of {} collaborators",
        plan.straggler_policy.quorum_count(plan.collaborators.len()),
        plan.collaborators.len()
    );
    for round in 0..plan.rounds_to_train() {
        let assignment = assign_tasks(&plan, round)?;
        println!("round {round}");
        for (label, tasks) in &assignment.entries {
            println!("  {label:<8} {}", tasks.join(", "));
        }
    }

    // Any edit changes the hash collaborators must present.
    let mut edited = plan.clone();
    edited.assignment_seed += 1;
    println!("edited plan hash {}", edited.hash());
    Ok(())
}
