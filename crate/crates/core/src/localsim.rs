//! In-process federation: the aggregator state machine and N collaborator
//! loops driven on a virtual clock, talking through the real codec.

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::path::PathBuf;
use std::rc::Rc;
use std::time::Duration;

use crate::aggregator::{Aggregator, AggregatorError, RoundSummary};
use crate::collaborator::{
    Collaborator, CollaboratorConfig, CollaboratorError, RunSummary, Step, TaskError, TaskRunner,
};
use crate::metricsink::MetricRecord;
use crate::plan::{self, FlPlan, PlanError, StragglerPolicy};
use crate::reference_task::{
    evaluate, init_model, train_epochs, DatasetConfig, OptimizerState, Params, ReferenceRunner,
    SyntheticDataset, TrainSettings,
};
use crate::tensorstore::ModelTensor;
use crate::wire::{self, CallError, Direction, FrameTap, Message};

/// Builds the runner for shard `index` (1-based) of `count`.
pub type RunnerFactory = Box<dyn Fn(usize, usize) -> Result<Box<dyn TaskRunner>, TaskError>>;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error("override `{path}`: {reason}")]
    Override { path: String, reason: String },
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Aggregator(#[from] AggregatorError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("collaborator {label}: {source}")]
    Collaborator {
        label: String,
        #[source]
        source: CollaboratorError,
    },
    #[error("deadlock in round {round}: {diagnosis}")]
    Deadlock { round: u32, diagnosis: String },
}

/// Silences a collaborator once the federation moves past `drop_after_round`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fault {
    pub drop_after_round: u32,
}

pub struct SimConfig {
    pub plan: FlPlan,
    pub num_collaborators: usize,
    /// `None` means reference runners built from the effective plan.
    pub runner_factory: Option<RunnerFactory>,
    /// Required with a custom runner factory.
    pub initial_model: Option<Vec<ModelTensor>>,
    /// Dotted plan path to scalar, applied before the run.
    pub overrides: BTreeMap<String, serde_yaml::Value>,
    pub faults: BTreeMap<String, Fault>,
    pub final_model_path: Option<PathBuf>,
    /// Sees every encoded frame in both directions.
    pub tap: Option<FrameTap>,
    /// Virtual time a round may go without progress before giving up.
    pub watchdog: Duration,
}

impl std::fmt::Debug for SimConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SimConfig")
            .field("num_collaborators", &self.num_collaborators)
            .field("overrides", &self.overrides)
            .field("faults", &self.faults)
            .finish_non_exhaustive()
    }
}

impl SimConfig {
    /// Reference runners on equal shards, one per roster entry.
    pub fn new(plan: FlPlan) -> Self {
        SimConfig {
            num_collaborators: plan.collaborators.len(),
            plan,
            runner_factory: None,
            initial_model: None,
            overrides: BTreeMap::new(),
            faults: BTreeMap::new(),
            final_model_path: None,
            tap: None,
            watchdog: Duration::from_secs(3600),
        }
    }

    pub fn with_runner_factory(mut self, factory: RunnerFactory, initial_model: Vec<ModelTensor>) -> Self {
        self.runner_factory = Some(factory);
        self.initial_model = Some(initial_model);
        self
    }

    pub fn with_override(mut self, path: &str, value: impl Into<serde_yaml::Value>) -> Self {
        self.overrides.insert(path.to_string(), value.into());
        self
    }

    pub fn with_fault(mut self, label: &str, drop_after_round: u32) -> Self {
        self.faults.insert(label.to_string(), Fault { drop_after_round });
        self
    }

    pub fn with_final_model_path(mut self, path: impl Into<PathBuf>) -> Self {
        self.final_model_path = Some(path.into());
        self
    }

    pub fn with_tap(mut self, tap: FrameTap) -> Self {
        self.tap = Some(tap);
        self
    }

    /// The plan with overrides applied.
    pub fn effective_plan(&self) -> Result<FlPlan, SimError> {
        apply_overrides(&self.plan, &self.overrides)
    }
}

#[derive(Debug, Clone)]
pub struct SimResult {
    pub final_model: Vec<ModelTensor>,
    /// Aggregated metrics, ordered by (round, task, name).
    pub metrics: Vec<MetricRecord>,
    pub participation: BTreeMap<String, u32>,
    pub rounds: Vec<RoundSummary>,
    pub collaborators: BTreeMap<String, RunSummary>,
    pub virtual_elapsed: Duration,
}

impl SimResult {
    /// Aggregated value of `task/name` in `round`.
    pub fn metric(&self, round: u32, task: &str, name: &str) -> Option<f64> {
        self.metrics
            .iter()
            .find(|r| r.round == round && r.task == task && r.name == name)
            .map(|r| r.value)
    }

    /// Value of `task/name` in the last round that has it.
    pub fn final_metric(&self, task: &str, name: &str) -> Option<f64> {
        self.metrics
            .iter()
            .rev()
            .find(|r| r.task == task && r.name == name)
            .map(|r| r.value)
    }
}

/// Sets each dotted path, which must already exist in the plan, and
/// re-validates. Sequence elements are addressed by index.
pub fn apply_overrides(
    plan: &FlPlan,
    overrides: &BTreeMap<String, serde_yaml::Value>,
) -> Result<FlPlan, SimError> {
    use serde_yaml::Value;
    if overrides.is_empty() {
        return Ok(plan.clone());
    }
    let mut doc: Value = serde_yaml::from_str(&plan::serialize_plan(plan)).expect("plans serialize to YAML");
    for (path, value) in overrides {
        let bad = |reason: &str| SimError::Override {
            path: path.clone(),
            reason: reason.to_string(),
        };
        if matches!(value, Value::Mapping(_) | Value::Sequence(_) | Value::Tagged(_)) {
            return Err(bad("only scalars can be overridden"));
        }
        let mut node = &mut doc;
        for part in path.split('.') {
            node = match node {
                Value::Mapping(m) => m.get_mut(part).ok_or_else(|| bad(&format!("no key `{part}`")))?,
                Value::Sequence(s) => part
                    .parse::<usize>()
                    .ok()
                    .and_then(|i| s.get_mut(i))
                    .ok_or_else(|| bad(&format!("no element `{part}`")))?,
                _ => return Err(bad(&format!("`{part}` is below a scalar"))),
            };
        }
        if matches!(node, Value::Mapping(_) | Value::Sequence(_)) {
            return Err(bad("path names a section, not a scalar"));
        }
        *node = value.clone();
    }
    let text = serde_yaml::to_string(&doc).expect("YAML value serializes");
    Ok(plan::parse_plan(&text)?)
}

/// Replaces the roster with `col1..colN`, for quick experiments with a
/// plan written for a different federation size.
pub fn resize_roster(plan: &FlPlan, n: usize) -> Result<FlPlan, SimError> {
    if n == 0 {
        return Err(SimError::Config("need at least one collaborator".into()));
    }
    let mut p = plan.clone();
    p.collaborators = (1..=n).map(|i| format!("col{i}")).collect();
    p.validate()?;
    Ok(p)
}

/// Shared virtual clock and aggregator behind every in-memory transport.
struct World {
    aggregator: RefCell<Aggregator>,
    now: Cell<Duration>,
    tap: Option<FrameTap>,
}

/// Encodes each request, decodes it on the "server" side, and does the
/// same for the reply, so only bytes cross between the two roles.
pub struct SimTransport {
    label: String,
    world: Rc<World>,
}

impl SimTransport {
    fn carry(&self, direction: Direction, message: &Message) -> Result<Message, CallError> {
        let frame = wire::encode(message);
        if let Some(tap) = &self.world.tap {
            tap(direction, &frame);
        }
        wire::decode(&frame).map_err(CallError::Protocol)
    }
}

impl crate::collaborator::Transport for SimTransport {
    fn exchange(&mut self, request: &Message) -> Result<Message, CallError> {
        let request = self.carry(Direction::Sent, request)?;
        let now = self.world.now.get();
        let reply = self.world.aggregator.borrow_mut().handle(&self.label, request, now);
        self.carry(Direction::Received, &reply)
    }
}

struct Node {
    collaborator: Collaborator<Box<dyn TaskRunner>, SimTransport>,
    wake: Duration,
    state: NodeState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum NodeState {
    Running,
    Quit,
    Silenced,
}

/// Runs a whole federation. Collaborators take turns in wake-time order
/// (ties by roster order); training takes no virtual time.
pub fn run_experiment(config: SimConfig) -> Result<SimResult, SimError> {
    let plan = config.effective_plan()?;
    if config.num_collaborators != plan.collaborators.len() {
        return Err(SimError::Config(format!(
            "num_collaborators is {} but the roster has {} entries",
            config.num_collaborators,
            plan.collaborators.len()
        )));
    }
    for label in config.faults.keys() {
        if !plan.has_collaborator(label) {
            return Err(SimError::Config(format!("fault for unknown collaborator `{label}`")));
        }
    }
    if config.runner_factory.is_some() && config.initial_model.is_none() {
        return Err(SimError::Config("a custom runner factory needs an initial model".into()));
    }
    let initial = match &config.initial_model {
        Some(m) => m.clone(),
        None => {
            let cfg = DatasetConfig::from_plan(&plan)?;
            init_model(cfg.input_dim(), cfg.classes, cfg.model_seed)
        }
    };
    let mut aggregator = Aggregator::new(plan.clone(), initial)?;
    if let Some(path) = &config.final_model_path {
        aggregator = aggregator.with_final_model_path(path);
    }
    let world = Rc::new(World {
        aggregator: RefCell::new(aggregator),
        now: Cell::new(Duration::ZERO),
        tap: config.tap.clone(),
    });

    let count = plan.collaborators.len();
    let reference: RunnerFactory = {
        let dataset = DatasetConfig::from_plan(&plan);
        Box::new(move |i, k| Ok(Box::new(ReferenceRunner::new(dataset.clone()?, i, k)?) as Box<dyn TaskRunner>))
    };
    let factory = config.runner_factory.as_ref().unwrap_or(&reference);
    let mut nodes = Vec::with_capacity(count);
    for (i, label) in plan.collaborators.iter().enumerate() {
        let runner = factory(i + 1, count)?;
        let transport = SimTransport {
            label: label.clone(),
            world: world.clone(),
        };
        let cc = CollaboratorConfig::new(label.clone(), plan.clone(), i + 1, count);
        let collaborator = Collaborator::new(cc, runner, transport).map_err(|source| SimError::Collaborator {
            label: label.clone(),
            source,
        })?;
        nodes.push(Node {
            collaborator,
            wake: Duration::ZERO,
            state: NodeState::Running,
        });
    }

    let mut last_round = 0;
    let mut last_progress = Duration::ZERO;
    loop {
        let next = nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.state == NodeState::Running)
            .min_by_key(|(i, n)| (n.wake, *i))
            .map(|(i, _)| i);
        let Some(i) = next else { break };
        let now = world.now.get().max(nodes[i].wake);
        world.now.set(now);
        world.aggregator.borrow_mut().tick(now);

        let round = world.aggregator.borrow().current_round();
        if round != last_round {
            last_round = round;
            last_progress = now;
        } else if now.saturating_sub(last_progress) > config.watchdog {
            return Err(deadlock(&world.aggregator.borrow(), &nodes, &plan));
        }

        let node = &mut nodes[i];
        let label = node.collaborator.label().to_string();
        if let Some(fault) = config.faults.get(&label) {
            if round > fault.drop_after_round && !world.aggregator.borrow().is_done() {
                log::info!("{label}: silenced after round {}", fault.drop_after_round);
                node.state = NodeState::Silenced;
                continue;
            }
        }
        match node.collaborator.step() {
            Ok(Step::Quit) => node.state = NodeState::Quit,
            Ok(Step::Sleep(d)) => node.wake = now + d,
            Ok(Step::Worked { .. }) => node.wake = now,
            Err(source) => return Err(SimError::Collaborator { label, source }),
        }
    }

    let aggregator = world.aggregator.borrow();
    if !aggregator.is_done() {
        return Err(deadlock(&aggregator, &nodes, &plan));
    }
    Ok(SimResult {
        final_model: aggregator.final_model().expect("done implies a final model").to_vec(),
        metrics: aggregator.metrics_log(),
        participation: aggregator.participation().clone(),
        rounds: aggregator.round_summaries().to_vec(),
        collaborators: nodes
            .iter()
            .map(|n| (n.collaborator.label().to_string(), n.collaborator.summary().clone()))
            .collect(),
        virtual_elapsed: world.now.get(),
    })
}

fn deadlock(aggregator: &Aggregator, nodes: &[Node], plan: &FlPlan) -> SimError {
    let silenced: Vec<&str> = nodes
        .iter()
        .filter(|n| n.state == NodeState::Silenced)
        .map(|n| n.collaborator.label())
        .collect();
    let round = aggregator.current_round();
    let policy = match plan.straggler_policy {
        StragglerPolicy::All => "ALL waits for every assigned result".to_string(),
        StragglerPolicy::Quorum { .. } => format!(
            "QUORUM needs {} distinct reporters",
            plan.straggler_policy.quorum_count(plan.collaborators.len())
        ),
    };
    let diagnosis = if silenced.is_empty() {
        format!("no progress; {policy}")
    } else {
        format!(
            "silenced collaborators [{}] still hold assigned tasks and {policy}",
            silenced.join(", ")
        )
    };
    SimError::Deadlock { round, diagnosis }
}

#[derive(Debug, Clone)]
pub struct BaselineResult {
    pub final_model: Vec<ModelTensor>,
    pub accuracy: f64,
    pub loss: f64,
    /// Full-pass loss on the pooled training data after each epoch.
    pub epoch_losses: Vec<f64>,
}

/// One model trained on the pooled data for rounds x epochs_per_round
/// epochs with the plan's seeds, evaluated on the pooled held-out set.
pub fn run_centralized_baseline(config: &SimConfig) -> Result<BaselineResult, SimError> {
    let plan = config.effective_plan()?;
    let cfg = DatasetConfig::from_plan(&plan)?;
    let hyper = plan
        .first_train_task()
        .map(|t| t.hyperparams.clone())
        .unwrap_or_default();
    let settings = TrainSettings::from_hyperparams(&hyper)?;
    let (train, held_out): (SyntheticDataset, SyntheticDataset) = SyntheticDataset::generate(&cfg);
    let initial = match &config.initial_model {
        Some(m) => m.clone(),
        None => init_model(cfg.input_dim(), cfg.classes, cfg.model_seed),
    };
    let mut params = Params::from_tensors(&initial, cfg.input_dim(), cfg.classes)?;
    let mut optimizer = OptimizerState::new(settings.optimizer, settings.learning_rate, params.dims);
    let one_epoch = TrainSettings {
        epochs_per_round: 1,
        ..settings.clone()
    };
    let epochs = u64::from(plan.rounds_to_train()) * settings.epochs_per_round as u64;
    let mut epoch_losses = Vec::with_capacity(epochs as usize);
    for epoch in 0..epochs {
        train_epochs(&mut params, &mut optimizer, &train, &one_epoch, epoch);
        epoch_losses.push(evaluate(&params, &train).loss);
    }
    let eval = evaluate(&params, &held_out);
    Ok(BaselineResult {
        final_model: params.to_tensors(),
        accuracy: eval.accuracy,
        loss: eval.loss,
        epoch_losses,
    })
}
