//! The collaborator loop: poll for tasks, fetch the global model, run
//! tasks through a [`TaskRunner`], report results.
//!
//! Only runner outputs (model tensors and scalar metrics) are ever put on
//! the wire; the runner's local data has no path into a [`Message`].

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use crate::plan::{FlPlan, Hyperparams, PlanHash, TaskKind};
use crate::tensorstore::{ModelTensor, NamedTensor, Tag, TensorKey};
use crate::wire::{
    CallError, ErrorCode, ErrorResponse, GetTasksRequest, GetTensorRequest, Message, RequestHeader,
    SendResultsRequest, TlsClient,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TaskError {
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<u32>,
        found: Vec<u32>,
    },
    #[error("model tensor `{0}` is missing")]
    MissingTensor(String),
    #[error("hyperparameter `{key}`: {message}")]
    BadHyperparam { key: String, message: String },
    #[error("shard {index} of {count} does not exist")]
    BadShard { index: usize, count: usize },
    #[error("{0}")]
    Other(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub tensors: Vec<ModelTensor>,
    pub data_size: u64,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidateOutput {
    pub metrics: BTreeMap<String, f64>,
    pub data_size: u64,
}

/// What a collaborator needs from an ML framework.
pub trait TaskRunner {
    /// Model tensor names and shapes, in a fixed order.
    fn tensor_specs(&self) -> Vec<(String, Vec<u32>)>;

    fn train(
        &mut self,
        model: &[ModelTensor],
        hyperparams: &Hyperparams,
        round: u32,
    ) -> Result<TrainOutput, TaskError>;

    fn validate(
        &mut self,
        model: &[ModelTensor],
        hyperparams: &Hyperparams,
        round: u32,
    ) -> Result<ValidateOutput, TaskError>;
}

impl<R: TaskRunner + ?Sized> TaskRunner for Box<R> {
    fn tensor_specs(&self) -> Vec<(String, Vec<u32>)> {
        (**self).tensor_specs()
    }

    fn train(&mut self, model: &[ModelTensor], h: &Hyperparams, round: u32) -> Result<TrainOutput, TaskError> {
        (**self).train(model, h, round)
    }

    fn validate(
        &mut self,
        model: &[ModelTensor],
        h: &Hyperparams,
        round: u32,
    ) -> Result<ValidateOutput, TaskError> {
        (**self).validate(model, h, round)
    }
}

/// One request, one response.
pub trait Transport {
    fn exchange(&mut self, request: &Message) -> Result<Message, CallError>;
}

impl Transport for TlsClient {
    fn exchange(&mut self, request: &Message) -> Result<Message, CallError> {
        self.call(request)
    }
}

#[derive(Debug, Clone)]
pub struct CollaboratorConfig {
    pub label: String,
    pub plan: FlPlan,
    pub shard_index: usize,
    pub shard_count: usize,
    /// How long to keep asking for a global tensor that is not there yet.
    pub tensor_wait_budget: Duration,
}

impl CollaboratorConfig {
    pub fn new(label: impl Into<String>, plan: FlPlan, shard_index: usize, shard_count: usize) -> Self {
        CollaboratorConfig {
            label: label.into(),
            plan,
            shard_index,
            shard_count,
            tensor_wait_budget: Duration::from_secs(600),
        }
    }

    pub fn validate(&self) -> Result<(), CollaboratorError> {
        if !self.plan.has_collaborator(&self.label) {
            return Err(CollaboratorError::Config(format!(
                "`{}` is not in the plan's roster",
                self.label
            )));
        }
        if self.shard_count == 0 || self.shard_index == 0 || self.shard_index > self.shard_count {
            return Err(CollaboratorError::Config(format!(
                "shard {} of {} is invalid",
                self.shard_index, self.shard_count
            )));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CollaboratorError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("transport: {0}")]
    Transport(#[from] CallError),
    #[error("plan mismatch: {0}")]
    PlanMismatch(String),
    #[error("aggregator refused request ({code}): {detail}")]
    Rejected { code: u16, detail: String },
    #[error("task failed: {0}")]
    Task(#[from] TaskError),
    #[error("protocol: {0}")]
    Protocol(String),
}

impl CollaboratorError {
    /// Process exit status for this failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CollaboratorError::Config(_) | CollaboratorError::Task(_) => 2,
            CollaboratorError::Rejected { code, .. }
                if *code == ErrorCode::UnknownCollaborator.code()
                    || *code == ErrorCode::IdentityMismatch.code() =>
            {
                2
            }
            CollaboratorError::PlanMismatch(_) => 4,
            _ => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Step {
    Quit,
    Sleep(Duration),
    Worked { round: u32, tasks: Vec<String> },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunSummary {
    pub rounds: BTreeSet<u32>,
    pub tasks_run: u32,
    pub results_accepted: u32,
    /// Results the aggregator already had (after a restart).
    pub duplicates: u32,
    /// Results that arrived after their round closed.
    pub late: u32,
}

impl RunSummary {
    pub fn rounds_participated(&self) -> usize {
        self.rounds.len()
    }
}

pub struct Collaborator<R, T> {
    config: CollaboratorConfig,
    plan_hash: PlanHash,
    runner: R,
    transport: T,
    model: Option<(u32, Vec<ModelTensor>)>,
    summary: RunSummary,
    waited_for_tensors: Duration,
}

impl<R: TaskRunner, T: Transport> Collaborator<R, T> {
    pub fn new(config: CollaboratorConfig, runner: R, transport: T) -> Result<Self, CollaboratorError> {
        config.validate()?;
        Ok(Collaborator {
            plan_hash: config.plan.hash(),
            config,
            runner,
            transport,
            model: None,
            summary: RunSummary::default(),
            waited_for_tensors: Duration::ZERO,
        })
    }

    pub fn label(&self) -> &str {
        &self.config.label
    }

    pub fn summary(&self) -> &RunSummary {
        &self.summary
    }

    pub fn runner(&self) -> &R {
        &self.runner
    }

    pub fn transport_mut(&mut self) -> &mut T {
        &mut self.transport
    }

    fn header(&self) -> RequestHeader {
        RequestHeader::new(self.config.label.clone(), self.plan_hash)
    }

    fn rejected(e: ErrorResponse) -> CollaboratorError {
        if e.kind() == Some(ErrorCode::PlanHashMismatch) {
            CollaboratorError::PlanMismatch(e.detail)
        } else {
            CollaboratorError::Rejected {
                code: e.code,
                detail: e.detail,
            }
        }
    }

    /// One poll plus whatever work it hands out.
    pub fn step(&mut self) -> Result<Step, CollaboratorError> {
        let reply = self
            .transport
            .exchange(&Message::GetTasksRequest(GetTasksRequest { header: self.header() }))?;
        let resp = match reply {
            Message::GetTasksResponse(r) => r,
            Message::ErrorResponse(e) if e.kind() == Some(ErrorCode::FederationOver) => {
                return Ok(Step::Quit)
            }
            Message::ErrorResponse(e) => return Err(Self::rejected(e)),
            other => {
                return Err(CollaboratorError::Protocol(format!(
                    "unexpected {:?} to GetTasks",
                    other.message_type()
                )))
            }
        };
        if resp.quit {
            return Ok(Step::Quit);
        }
        if resp.task_names.is_empty() {
            return Ok(Step::Sleep(Duration::from_secs(u64::from(resp.sleep_seconds))));
        }
        let round = resp.round;
        let model = match self.global_model(round)? {
            Some(m) => m,
            None => {
                let wait = Duration::from_secs(1);
                self.waited_for_tensors += wait;
                if self.waited_for_tensors > self.config.tensor_wait_budget {
                    return Err(CollaboratorError::Transport(CallError::Timeout {
                        attempts: 0,
                        elapsed: self.waited_for_tensors,
                        last: format!("global model for round {round} never appeared"),
                    }));
                }
                return Ok(Step::Sleep(wait));
            }
        };
        self.waited_for_tensors = Duration::ZERO;
        let mut done = Vec::new();
        for task in &resp.task_names {
            if !self.run_task(round, task, &model)? {
                break;
            }
            done.push(task.clone());
        }
        self.summary.rounds.insert(round);
        Ok(Step::Worked { round, tasks: done })
    }

    /// `None` while the aggregator does not have the tensors yet.
    fn global_model(&mut self, round: u32) -> Result<Option<Vec<ModelTensor>>, CollaboratorError> {
        if let Some((r, m)) = &self.model {
            if *r == round {
                return Ok(Some(m.clone()));
            }
        }
        let specs = self.runner.tensor_specs();
        let mut tensors = Vec::with_capacity(specs.len());
        for (name, shape) in specs {
            let req = Message::GetTensorRequest(GetTensorRequest {
                header: self.header(),
                key: TensorKey::global(name.clone(), round),
            });
            match self.transport.exchange(&req)? {
                Message::GetTensorResponse(r) => {
                    if r.tensor.shape != shape || r.tensor.key.name != name {
                        return Err(CollaboratorError::Protocol(format!(
                            "aggregator sent {} with shape {:?}, runner declares `{name}` {shape:?}",
                            r.tensor.key, r.tensor.shape
                        )));
                    }
                    tensors.push(r.tensor.into_model());
                }
                Message::ErrorResponse(e) if e.kind() == Some(ErrorCode::TensorNotFound) => {
                    log::debug!("{}: {} not available yet", self.config.label, e.detail);
                    return Ok(None);
                }
                Message::ErrorResponse(e) => return Err(Self::rejected(e)),
                other => {
                    return Err(CollaboratorError::Protocol(format!(
                        "unexpected {:?} to GetTensor",
                        other.message_type()
                    )))
                }
            }
        }
        self.model = Some((round, tensors.clone()));
        Ok(Some(tensors))
    }

    /// Returns false when the federation turned out to be over.
    fn run_task(&mut self, round: u32, task: &str, model: &[ModelTensor]) -> Result<bool, CollaboratorError> {
        let spec = self
            .config
            .plan
            .task(task)
            .ok_or_else(|| CollaboratorError::Protocol(format!("assigned unknown task `{task}`")))?
            .clone();
        let label = self.config.label.clone();
        let metric = |name: &str, value: f64| -> Result<NamedTensor, CollaboratorError> {
            NamedTensor::scalar(
                TensorKey::new(format!("{task}/{name}"), round, label.clone(), [Tag::Metric]),
                value as f32,
            )
            .map_err(|e| CollaboratorError::Task(TaskError::Other(e.to_string())))
        };
        let (data_size, tensors) = match spec.kind {
            TaskKind::Train => {
                let out = self.runner.train(model, &spec.hyperparams, round)?;
                let mut tensors: Vec<NamedTensor> = out
                    .tensors
                    .into_iter()
                    .map(|t| t.with_key(round, &label, [Tag::Trained]))
                    .collect();
                for (name, value) in &out.metrics {
                    tensors.push(metric(name, *value)?);
                }
                (out.data_size, tensors)
            }
            TaskKind::Validate => {
                let out = self.runner.validate(model, &spec.hyperparams, round)?;
                let tensors = out
                    .metrics
                    .iter()
                    .map(|(name, value)| metric(name, *value))
                    .collect::<Result<Vec<_>, _>>()?;
                (out.data_size, tensors)
            }
        };
        if data_size == 0 {
            return Err(TaskError::Other(format!("task `{task}` reported an empty dataset")).into());
        }
        self.summary.tasks_run += 1;
        let req = Message::SendResultsRequest(SendResultsRequest {
            header: self.header(),
            round,
            task_name: task.to_string(),
            data_size,
            tensors,
        });
        match self.transport.exchange(&req)? {
            Message::SendResultsAck(_) => self.summary.results_accepted += 1,
            Message::ErrorResponse(e) => match e.kind() {
                Some(ErrorCode::DuplicateResult) => self.summary.duplicates += 1,
                Some(ErrorCode::Malformed) if e.detail.contains("round") => {
                    log::warn!("{label}: result for `{task}` round {round} arrived late: {}", e.detail);
                    self.summary.late += 1;
                }
                Some(ErrorCode::FederationOver) => return Ok(false),
                _ => return Err(Self::rejected(e)),
            },
            other => {
                return Err(CollaboratorError::Protocol(format!(
                    "unexpected {:?} to SendResults",
                    other.message_type()
                )))
            }
        }
        Ok(true)
    }

    /// Polls until told to quit, sleeping as instructed in between.
    pub fn run(&mut self) -> Result<RunSummary, CollaboratorError> {
        loop {
            match self.step()? {
                Step::Quit => {
                    log::info!(
                        "{}: done after {} rounds, {} tasks",
                        self.config.label,
                        self.summary.rounds_participated(),
                        self.summary.tasks_run
                    );
                    return Ok(self.summary.clone());
                }
                Step::Sleep(d) => std::thread::sleep(d),
                Step::Worked { round, tasks } => {
                    log::info!("{}: round {round} ran {tasks:?}", self.config.label)
                }
            }
        }
    }
}
