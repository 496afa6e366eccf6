//! The round state machine and the thread that owns it.
//!
//! [`Aggregator`] is a plain value: every request and clock tick goes
//! through `&mut self` with the current time passed in, so the same logic
//! runs under the TLS server (via [`AggregatorService`]) and under the
//! in-process simulator with a virtual clock.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::mpsc;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use crate::metricsink::{MetricRecord, MetricSink};
use crate::plan::{assign_tasks, FlPlan, PlanHash, StragglerPolicy, TaskAssignment, TaskKind};
use crate::tensorstore::{
    aggregate_weighted_mean, ModelTensor, NamedTensor, Tag, TensorKey, TensorStore,
    WeightedContribution, AGGREGATOR_ORIGIN,
};
use crate::wire::{
    ErrorCode, GetTasksResponse, GetTensorResponse, Handler, Message, PeerInfo, RequestHeader,
    SendResultsAck, SendResultsRequest,
};
use crate::workspace::model_file;

/// Poll interval handed out while waiting for the roster to join.
pub const JOIN_SLEEP_SECONDS: u32 = 10;
/// Poll interval for a collaborator with nothing left to do this round.
pub const IDLE_SLEEP_SECONDS: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum AggregatorError {
    #[error("initial model: {0}")]
    InitialModel(String),
    #[error("plan: {0}")]
    Plan(#[from] crate::plan::PlanError),
    #[error("writing final model: {0}")]
    FinalModel(#[from] model_file::ModelFileError),
    #[error("aggregation: {0}")]
    Aggregation(#[from] crate::tensorstore::TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    WaitingForJoin,
    RoundActive,
    Done,
}

#[derive(Debug, Clone)]
struct Received {
    data_size: u64,
    tensors: Vec<NamedTensor>,
}

/// What happened in one completed round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundSummary {
    pub round: u32,
    /// Collaborators whose TRAIN results entered the consensus.
    pub train_contributors: Vec<String>,
    /// Pairs that never arrived (QUORUM rounds only).
    pub missing: Vec<(String, String)>,
    pub closed_by_quorum: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Status {
    pub phase: Phase,
    pub joined: BTreeSet<String>,
    pub current_round: u32,
}

pub struct Aggregator {
    plan: FlPlan,
    plan_hash: PlanHash,
    model_names: Vec<String>,
    model_shapes: BTreeMap<String, Vec<u32>>,
    store: TensorStore,
    phase: Phase,
    joined: BTreeSet<String>,
    round: u32,
    assignment: TaskAssignment,
    expected: BTreeSet<(String, String)>,
    received: BTreeMap<(String, String), Received>,
    deadline: Option<Duration>,
    model_aggregated: bool,
    metrics: Vec<MetricRecord>,
    summaries: Vec<RoundSummary>,
    participation: BTreeMap<String, u32>,
    quits_sent: BTreeSet<String>,
    final_model_path: Option<PathBuf>,
    final_model: Option<Vec<ModelTensor>>,
    sink: Option<Arc<MetricSink>>,
    clock_origin: Option<Duration>,
}

impl std::fmt::Debug for Aggregator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Aggregator")
            .field("phase", &self.phase)
            .field("round", &self.round)
            .field("joined", &self.joined)
            .finish_non_exhaustive()
    }
}

impl Aggregator {
    /// The initial model is served as round 0's global model.
    pub fn new(plan: FlPlan, initial_model: Vec<ModelTensor>) -> Result<Self, AggregatorError> {
        plan.validate()?;
        if initial_model.is_empty() {
            return Err(AggregatorError::InitialModel("model has no tensors".into()));
        }
        let store = TensorStore::new();
        let mut model_names = Vec::with_capacity(initial_model.len());
        let mut model_shapes = BTreeMap::new();
        for t in initial_model {
            if model_shapes.insert(t.name.clone(), t.shape.clone()).is_some() {
                return Err(AggregatorError::InitialModel(format!("duplicate tensor `{}`", t.name)));
            }
            model_names.push(t.name.clone());
            store
                .put(t.with_key(0, AGGREGATOR_ORIGIN, [Tag::Model]))
                .map_err(|e| AggregatorError::InitialModel(e.to_string()))?;
        }
        let assignment = assign_tasks(&plan, 0)?;
        Ok(Aggregator {
            plan_hash: plan.hash(),
            plan,
            model_names,
            model_shapes,
            store,
            phase: Phase::WaitingForJoin,
            joined: BTreeSet::new(),
            round: 0,
            assignment,
            expected: BTreeSet::new(),
            received: BTreeMap::new(),
            deadline: None,
            model_aggregated: false,
            metrics: Vec::new(),
            summaries: Vec::new(),
            participation: BTreeMap::new(),
            quits_sent: BTreeSet::new(),
            final_model_path: None,
            final_model: None,
            sink: None,
            clock_origin: None,
        })
    }

    pub fn with_final_model_path(mut self, path: impl Into<PathBuf>) -> Self {
        self.final_model_path = Some(path.into());
        self
    }

    pub fn with_sink(mut self, sink: Arc<MetricSink>) -> Self {
        self.sink = Some(sink);
        self
    }

    pub fn plan(&self) -> &FlPlan {
        &self.plan
    }

    pub fn status(&self) -> Status {
        Status {
            phase: self.phase,
            joined: self.joined.clone(),
            current_round: self.round,
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn current_round(&self) -> u32 {
        self.round
    }

    pub fn is_done(&self) -> bool {
        self.phase == Phase::Done
    }

    pub fn assignment(&self) -> &TaskAssignment {
        &self.assignment
    }

    /// Aggregated metric records so far, ordered by (round, task, name).
    pub fn metrics_log(&self) -> Vec<MetricRecord> {
        let mut out = self.metrics.clone();
        out.sort_by(|a, b| (a.round, &a.task, &a.name).cmp(&(b.round, &b.task, &b.name)));
        out
    }

    pub fn round_summaries(&self) -> &[RoundSummary] {
        &self.summaries
    }

    /// Rounds in which each collaborator had at least one result accepted.
    pub fn participation(&self) -> &BTreeMap<String, u32> {
        &self.participation
    }

    pub fn quits_sent(&self) -> &BTreeSet<String> {
        &self.quits_sent
    }

    /// Collaborators still expected to come back for their quit: everybody
    /// who reported in the final round.
    pub fn pending_quits(&self) -> BTreeSet<String> {
        let last = self.summaries.last();
        let active: BTreeSet<String> = match last {
            Some(s) if s.closed_by_quorum => {
                let missing: BTreeSet<&String> = s.missing.iter().map(|(c, _)| c).collect();
                self.plan
                    .collaborators
                    .iter()
                    .filter(|c| !missing.contains(c))
                    .cloned()
                    .collect()
            }
            _ => self.plan.collaborators.iter().cloned().collect(),
        };
        active.difference(&self.quits_sent).cloned().collect()
    }

    pub fn final_model(&self) -> Option<&[ModelTensor]> {
        self.final_model.as_deref()
    }

    /// Global model served for `round`, in declaration order.
    pub fn global_model(&self, round: u32) -> Option<Vec<ModelTensor>> {
        self.model_names
            .iter()
            .map(|n| self.store.get(&TensorKey::global(n.clone(), round)).map(|t| t.into_model()))
            .collect()
    }

    pub fn deadline(&self) -> Option<Duration> {
        self.deadline
    }

    /// Dispatches one request from the authenticated `identity`.
    pub fn handle(&mut self, identity: &str, message: Message, now: Duration) -> Message {
        self.clock_origin.get_or_insert(now);
        let reply = match message {
            Message::GetTasksRequest(req) => match self.admit(identity, &req.header) {
                Err(e) => e,
                Ok(()) => self.get_tasks(identity),
            },
            Message::GetTensorRequest(req) => match self.admit(identity, &req.header) {
                Err(e) => e,
                Ok(()) => self.get_tensor(&req.key),
            },
            Message::SendResultsRequest(req) => match self.admit(identity, &req.header) {
                Err(e) => e,
                Ok(()) => self.send_results(identity, req, now),
            },
            other => Message::error(
                ErrorCode::Malformed,
                format!("{:?} is not a request", other.message_type()),
            ),
        };
        self.tick(now);
        reply
    }

    /// Lets time-based transitions (QUORUM deadlines) happen.
    pub fn tick(&mut self, now: Duration) {
        if self.phase == Phase::RoundActive && self.round_can_close(now) {
            self.complete_round();
        }
    }

    #[allow(clippy::result_large_err)]
    fn admit(&self, identity: &str, header: &RequestHeader) -> Result<(), Message> {
        if !self.plan.has_collaborator(identity) {
            return Err(Message::error(
                ErrorCode::UnknownCollaborator,
                format!("`{identity}` is not in the roster"),
            ));
        }
        if header.sender_label != identity {
            return Err(Message::error(
                ErrorCode::IdentityMismatch,
                format!(
                    "header label `{}` does not match certificate `{identity}`",
                    header.sender_label
                ),
            ));
        }
        if header.plan_hash != self.plan_hash {
            return Err(Message::error(
                ErrorCode::PlanHashMismatch,
                format!("plan hash {} differs from {}", header.plan_hash, self.plan_hash),
            ));
        }
        Ok(())
    }

    fn get_tasks(&mut self, identity: &str) -> Message {
        let sleep = |secs| {
            Message::GetTasksResponse(GetTasksResponse {
                round: 0,
                task_names: Vec::new(),
                sleep_seconds: secs,
                quit: false,
            })
        };
        match self.phase {
            Phase::WaitingForJoin => {
                if self.joined.insert(identity.to_string()) {
                    log::info!("{identity} joined ({}/{})", self.joined.len(), self.plan.collaborators.len());
                }
                if self.joined.len() < self.plan.collaborators.len() {
                    return sleep(JOIN_SLEEP_SECONDS);
                }
                self.start_round(0);
                self.get_tasks(identity)
            }
            Phase::RoundActive => {
                let pending: Vec<String> = self
                    .assignment
                    .tasks_for(identity)
                    .iter()
                    .filter(|t| !self.received.contains_key(&(identity.to_string(), (*t).clone())))
                    .cloned()
                    .collect();
                if pending.is_empty() {
                    let mut r = sleep(IDLE_SLEEP_SECONDS);
                    if let Message::GetTasksResponse(resp) = &mut r {
                        resp.round = self.round;
                    }
                    return r;
                }
                Message::GetTasksResponse(GetTasksResponse {
                    round: self.round,
                    task_names: pending,
                    sleep_seconds: 0,
                    quit: false,
                })
            }
            Phase::Done => {
                self.quits_sent.insert(identity.to_string());
                Message::GetTasksResponse(GetTasksResponse {
                    round: self.round,
                    task_names: Vec::new(),
                    sleep_seconds: 0,
                    quit: true,
                })
            }
        }
    }

    fn get_tensor(&self, key: &TensorKey) -> Message {
        match self.store.get(key) {
            Some(t) if t.key.origin == AGGREGATOR_ORIGIN => {
                Message::GetTensorResponse(GetTensorResponse { tensor: t })
            }
            _ => Message::error(ErrorCode::TensorNotFound, format!("no tensor {key}")),
        }
    }

    fn send_results(&mut self, identity: &str, req: SendResultsRequest, now: Duration) -> Message {
        match self.phase {
            Phase::Done => {
                return Message::error(ErrorCode::FederationOver, "the federation has finished")
            }
            Phase::WaitingForJoin => {
                return Message::error(ErrorCode::Malformed, "no round is active yet")
            }
            Phase::RoundActive => {}
        }
        if req.round != self.round {
            return Message::error(
                ErrorCode::Malformed,
                format!("results for round {} but round {} is active", req.round, self.round),
            );
        }
        let pair = (identity.to_string(), req.task_name.clone());
        let Some(task) = self.plan.task(&req.task_name) else {
            return Message::error(ErrorCode::TensorNotFound, format!("unknown task `{}`", req.task_name));
        };
        if !self.expected.contains(&pair) {
            return Message::error(
                ErrorCode::TensorNotFound,
                format!("task `{}` is not assigned to {identity} in round {}", req.task_name, self.round),
            );
        }
        if self.received.contains_key(&pair) {
            return Message::error(
                ErrorCode::DuplicateResult,
                format!("{identity} already reported `{}` for round {}", req.task_name, self.round),
            );
        }
        if req.data_size == 0 {
            return Message::error(ErrorCode::Malformed, "data_size must be positive");
        }
        if let Err(detail) = self.check_result_tensors(identity, task.kind, &req) {
            return Message::error(ErrorCode::Malformed, detail);
        }
        for t in &req.tensors {
            if let Err(e) = self.store.put(t.clone()) {
                return Message::error(ErrorCode::Malformed, e.to_string());
            }
        }
        log::debug!("{identity} reported {} for round {}", req.task_name, self.round);
        self.received.insert(
            pair,
            Received {
                data_size: req.data_size,
                tensors: req.tensors,
            },
        );
        if let StragglerPolicy::Quorum { timeout_seconds, .. } = self.plan.straggler_policy {
            self.deadline
                .get_or_insert(now + Duration::from_secs_f64(timeout_seconds));
        }
        if !self.model_aggregated && self.all_train_received() {
            self.aggregate_model();
        }
        Message::SendResultsAck(SendResultsAck { accepted: true })
    }

    fn check_result_tensors(
        &self,
        identity: &str,
        kind: TaskKind,
        req: &SendResultsRequest,
    ) -> Result<(), String> {
        let mut model_seen = BTreeSet::new();
        let mut names = BTreeSet::new();
        for t in &req.tensors {
            t.check().map_err(|e| e.to_string())?;
            if t.key.origin != identity || t.key.round != req.round {
                return Err(format!("tensor {} must be keyed by {identity} for round {}", t.key, req.round));
            }
            if !names.insert(t.key.name.clone()) {
                return Err(format!("tensor `{}` sent twice", t.key.name));
            }
            if t.key.has(Tag::Metric) {
                let prefix = format!("{}/", req.task_name);
                if !t.key.name.starts_with(&prefix) || t.data.len() != 1 {
                    return Err(format!("metric `{}` must be a scalar named {prefix}<metric>", t.key.name));
                }
                continue;
            }
            if kind != TaskKind::Train {
                return Err(format!("VALIDATE results may only carry metrics, got `{}`", t.key.name));
            }
            match self.model_shapes.get(&t.key.name) {
                Some(shape) if *shape == t.shape => {
                    model_seen.insert(t.key.name.clone());
                }
                Some(shape) => {
                    return Err(format!("tensor `{}` has shape {:?}, expected {shape:?}", t.key.name, t.shape))
                }
                None => return Err(format!("`{}` is not a model tensor", t.key.name)),
            }
        }
        if kind == TaskKind::Train && model_seen.len() != self.model_shapes.len() {
            return Err("TRAIN results must include every model tensor".into());
        }
        Ok(())
    }

    fn start_round(&mut self, round: u32) {
        self.phase = Phase::RoundActive;
        self.round = round;
        self.assignment = assign_tasks(&self.plan, round).expect("plan validated at construction");
        self.expected = self
            .assignment
            .entries
            .iter()
            .flat_map(|(c, tasks)| tasks.iter().map(move |t| (c.clone(), t.clone())))
            .collect();
        self.received.clear();
        self.deadline = None;
        self.model_aggregated = false;
        log::info!("round {round} started");
    }

    fn is_train(&self, task: &str) -> bool {
        self.plan.task(task).is_some_and(|t| t.kind == TaskKind::Train)
    }

    fn all_train_received(&self) -> bool {
        self.expected
            .iter()
            .filter(|(_, t)| self.is_train(t))
            .all(|p| self.received.contains_key(p))
    }

    fn round_can_close(&self, now: Duration) -> bool {
        if self.expected.iter().all(|p| self.received.contains_key(p)) {
            return true;
        }
        match self.plan.straggler_policy {
            StragglerPolicy::All => false,
            policy @ StragglerPolicy::Quorum { .. } => {
                let reporters: BTreeSet<&String> = self.received.keys().map(|(c, _)| c).collect();
                let needed = policy.quorum_count(self.plan.collaborators.len());
                reporters.len() >= needed && self.deadline.is_some_and(|d| now >= d)
            }
        }
    }

    /// Builds the next round's global model from whatever TRAIN results are
    /// in, or carries the current one forward if there are none.
    fn aggregate_model(&mut self) {
        self.model_aggregated = true;
        let contributions: Vec<WeightedContribution> = self
            .received
            .iter()
            .filter(|((_, task), _)| self.is_train(task))
            .map(|((collab, _), r)| WeightedContribution {
                origin: collab.clone(),
                weight: r.data_size as f64,
                tensors: r
                    .tensors
                    .iter()
                    .filter(|t| !t.key.has(Tag::Metric))
                    .cloned()
                    .collect(),
            })
            .collect();
        let next = if contributions.is_empty() {
            log::warn!("round {}: no TRAIN results, carrying the model forward", self.round);
            self.global_model(self.round)
                .expect("current global model is stored")
                .into_iter()
                .map(|t| t.with_key(self.round + 1, AGGREGATOR_ORIGIN, [Tag::Model]))
                .collect()
        } else {
            // Shapes and names were checked on receipt, so this cannot fail.
            aggregate_weighted_mean(&contributions, self.round).expect("validated contributions")
        };
        for t in next {
            self.store.put(t).expect("next-round keys are written once");
        }
    }

    fn aggregate_metrics(&mut self) {
        // (task, metric) -> contributions
        let mut groups: BTreeMap<(String, String), Vec<WeightedContribution>> = BTreeMap::new();
        for ((collab, task), r) in &self.received {
            for t in r.tensors.iter().filter(|t| t.key.has(Tag::Metric)) {
                let metric = t.key.name[task.len() + 1..].to_string();
                groups
                    .entry((task.clone(), metric))
                    .or_default()
                    .push(WeightedContribution {
                        origin: collab.clone(),
                        weight: r.data_size as f64,
                        tensors: vec![t.clone()],
                    });
            }
        }
        let timestamp = chrono::Utc::now();
        for ((task, metric), contributions) in groups {
            let weight: f64 = contributions.iter().map(|c| c.weight).sum();
            let Ok(mut agg) = aggregate_weighted_mean(&contributions, self.round) else {
                continue;
            };
            let value = f64::from(agg.remove(0).data[0]);
            let Ok(record) =
                MetricRecord::at(timestamp, AGGREGATOR_ORIGIN, self.round, task, metric, value, weight)
            else {
                continue;
            };
            match &self.sink {
                Some(sink) => {
                    let _ = sink.emit(record.clone());
                }
                None => log::info!("{}", record.log_line()),
            }
            self.metrics.push(record);
        }
    }

    fn complete_round(&mut self) {
        if !self.model_aggregated {
            self.aggregate_model();
        }
        self.aggregate_metrics();
        let missing: Vec<(String, String)> = self
            .expected
            .iter()
            .filter(|p| !self.received.contains_key(*p))
            .cloned()
            .collect();
        let mut train_contributors: Vec<String> = self
            .received
            .keys()
            .filter(|(_, t)| self.is_train(t))
            .map(|(c, _)| c.clone())
            .collect();
        train_contributors.dedup();
        let reporters: BTreeSet<String> = self.received.keys().map(|(c, _)| c.clone()).collect();
        for c in reporters {
            *self.participation.entry(c).or_default() += 1;
        }
        if !missing.is_empty() {
            log::warn!("round {} closed by quorum; missing {missing:?}", self.round);
        }
        self.summaries.push(RoundSummary {
            round: self.round,
            train_contributors,
            closed_by_quorum: !missing.is_empty(),
            missing,
        });
        let next = self.round + 1;
        if next >= self.plan.rounds_to_train() {
            self.round = next;
            self.phase = Phase::Done;
            self.expected.clear();
            self.received.clear();
            self.deadline = None;
            let model = self.global_model(next).expect("final model was aggregated");
            if let Some(path) = &self.final_model_path {
                match model_file::save(path, &model) {
                    Ok(()) => log::info!("final model written to {}", path.display()),
                    Err(e) => log::error!("could not write final model to {}: {e}", path.display()),
                }
            }
            self.final_model = Some(model);
            log::info!("federation finished after {next} rounds");
        } else {
            self.start_round(next);
        }
    }
}

enum Command {
    Request {
        identity: String,
        message: Message,
        reply: mpsc::SyncSender<Message>,
    },
    Snapshot(mpsc::SyncSender<Snapshot>),
    Stop,
}

/// Read-only view of the aggregator for callers outside its thread.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub status: Status,
    pub metrics: Vec<MetricRecord>,
    pub summaries: Vec<RoundSummary>,
    pub participation: BTreeMap<String, u32>,
    pub quits_sent: BTreeSet<String>,
    pub pending_quits: BTreeSet<String>,
    pub final_model: Option<Vec<ModelTensor>>,
}

impl Aggregator {
    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            status: self.status(),
            metrics: self.metrics_log(),
            summaries: self.summaries.clone(),
            participation: self.participation.clone(),
            quits_sent: self.quits_sent.clone(),
            pending_quits: self.pending_quits(),
            final_model: self.final_model.clone(),
        }
    }
}

/// Runs an [`Aggregator`] on its own thread. Every mutation goes through
/// the command channel, so connection threads never touch the state.
pub struct AggregatorService {
    handle: AggregatorHandle,
    thread: Option<thread::JoinHandle<Aggregator>>,
}

#[derive(Clone)]
pub struct AggregatorHandle {
    tx: mpsc::Sender<Command>,
}

impl std::fmt::Debug for AggregatorHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("AggregatorHandle")
    }
}

const TICK: Duration = Duration::from_millis(100);

impl AggregatorService {
    pub fn spawn(mut aggregator: Aggregator) -> Self {
        let (tx, rx) = mpsc::channel::<Command>();
        let started = Instant::now();
        let thread = thread::Builder::new()
            .name("aggregator".into())
            .spawn(move || {
                loop {
                    match rx.recv_timeout(TICK) {
                        Ok(Command::Request {
                            identity,
                            message,
                            reply,
                        }) => {
                            let response = aggregator.handle(&identity, message, started.elapsed());
                            let _ = reply.send(response);
                        }
                        Ok(Command::Snapshot(reply)) => {
                            let _ = reply.send(aggregator.snapshot());
                        }
                        Ok(Command::Stop) | Err(mpsc::RecvTimeoutError::Disconnected) => break,
                        Err(mpsc::RecvTimeoutError::Timeout) => {
                            aggregator.tick(started.elapsed())
                        }
                    }
                }
                aggregator
            })
            .expect("spawn aggregator thread");
        AggregatorService {
            handle: AggregatorHandle { tx },
            thread: Some(thread),
        }
    }

    pub fn handle(&self) -> AggregatorHandle {
        self.handle.clone()
    }

    /// Blocks until the federation is done and every collaborator still
    /// active in the last round has received its quit, or until `grace`
    /// has passed since the federation finished.
    pub fn wait(&self, poll: Duration, grace: Duration) -> Snapshot {
        let mut done_at: Option<Instant> = None;
        loop {
            let snap = self.handle.snapshot().expect("aggregator thread alive");
            if snap.status.phase == Phase::Done {
                let since = *done_at.get_or_insert_with(Instant::now);
                if snap.pending_quits.is_empty() || since.elapsed() >= grace {
                    return snap;
                }
            }
            thread::sleep(poll);
        }
    }

    /// Stops the thread and returns the state machine.
    pub fn stop(mut self) -> Aggregator {
        let _ = self.handle.tx.send(Command::Stop);
        self.thread
            .take()
            .expect("joined once")
            .join()
            .expect("aggregator thread panicked")
    }
}

impl Drop for AggregatorService {
    fn drop(&mut self) {
        if let Some(t) = self.thread.take() {
            let _ = self.handle.tx.send(Command::Stop);
            let _ = t.join();
        }
    }
}

impl AggregatorHandle {
    pub fn request(&self, identity: &str, message: Message) -> Message {
        let (reply, rx) = mpsc::sync_channel(1);
        let sent = self.tx.send(Command::Request {
            identity: identity.to_string(),
            message,
            reply,
        });
        match sent.ok().and_then(|_| rx.recv().ok()) {
            Some(m) => m,
            None => Message::error(ErrorCode::FederationOver, "aggregator has shut down"),
        }
    }

    pub fn snapshot(&self) -> Option<Snapshot> {
        let (reply, rx) = mpsc::sync_channel(1);
        self.tx.send(Command::Snapshot(reply)).ok()?;
        rx.recv().ok()
    }
}

impl Handler for AggregatorHandle {
    fn handle(&self, peer: &PeerInfo, message: Message) -> Message {
        self.request(&peer.identity, message)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan::{parse_plan, tests::TWO_COLLAB_PLAN};
    use crate::wire::{GetTasksRequest, GetTensorRequest};

    const T0: Duration = Duration::ZERO;

    fn plan() -> FlPlan {
        parse_plan(TWO_COLLAB_PLAN).unwrap()
    }

    fn quorum_plan(rounds: u32) -> FlPlan {
        let mut p = plan();
        p.aggregator.settings.rounds_to_train = rounds;
        p.straggler_policy = StragglerPolicy::Quorum {
            quorum_fraction: 0.5,
            timeout_seconds: 5.0,
        };
        p
    }

    fn init() -> Vec<ModelTensor> {
        vec![ModelTensor::new("w", vec![2], vec![0.0, 0.0])]
    }

    fn header(p: &FlPlan, label: &str) -> RequestHeader {
        RequestHeader::new(label, p.hash())
    }

    fn get_tasks(agg: &mut Aggregator, label: &str, now: Duration) -> GetTasksResponse {
        let h = header(agg.plan(), label);
        match agg.handle(label, Message::GetTasksRequest(GetTasksRequest { header: h }), now) {
            Message::GetTasksResponse(r) => r,
            other => panic!("unexpected {other:?}"),
        }
    }

    fn train_result(p: &FlPlan, label: &str, round: u32, task: &str, data: Vec<f32>, n: u64) -> Message {
        Message::SendResultsRequest(SendResultsRequest {
            header: header(p, label),
            round,
            task_name: task.into(),
            data_size: n,
            tensors: vec![
                ModelTensor::new("w", vec![2], data).with_key(round, label, [Tag::Trained]),
                NamedTensor::scalar(
                    TensorKey::new(format!("{task}/train_loss"), round, label, [Tag::Metric]),
                    0.5,
                )
                .unwrap(),
            ],
        })
    }

    fn validate_result(p: &FlPlan, label: &str, round: u32, task: &str, acc: f32, n: u64) -> Message {
        Message::SendResultsRequest(SendResultsRequest {
            header: header(p, label),
            round,
            task_name: task.into(),
            data_size: n,
            tensors: vec![NamedTensor::scalar(
                TensorKey::new(format!("{task}/accuracy"), round, label, [Tag::Metric]),
                acc,
            )
            .unwrap()],
        })
    }

    fn code(m: &Message) -> Option<u16> {
        match m {
            Message::ErrorResponse(e) => Some(e.code),
            _ => None,
        }
    }

    fn tasks_of(p: &FlPlan) -> (String, String) {
        let train = p.tasks.values().find(|t| t.kind == TaskKind::Train).unwrap().name.clone();
        let val = p.tasks.values().find(|t| t.kind == TaskKind::Validate).unwrap().name.clone();
        (train, val)
    }

    fn joined(p: FlPlan) -> Aggregator {
        let mut agg = Aggregator::new(p, init()).unwrap();
        let first = get_tasks(&mut agg, "one", T0);
        assert_eq!(first.sleep_seconds, JOIN_SLEEP_SECONDS);
        assert!(first.task_names.is_empty());
        agg
    }

    #[test]
    fn round_starts_once_everyone_joined() {
        let mut agg = joined(plan());
        assert_eq!(agg.phase(), Phase::WaitingForJoin);
        let second = get_tasks(&mut agg, "two", T0);
        assert_eq!(agg.phase(), Phase::RoundActive);
        assert!(!second.task_names.is_empty());
        let first = get_tasks(&mut agg, "one", T0);
        assert_eq!(first.round, 0);
        assert_eq!(first.task_names, agg.assignment().tasks_for("one"));
    }

    #[test]
    fn admission_order_of_checks() {
        let mut agg = joined(plan());
        let p = agg.plan().clone();
        let req = |label: &str, hash: PlanHash| {
            Message::GetTasksRequest(GetTasksRequest {
                header: RequestHeader::new(label, hash),
            })
        };
        assert_eq!(code(&agg.handle("mallory", req("mallory", p.hash()), T0)), Some(401));
        assert_eq!(code(&agg.handle("one", req("two", p.hash()), T0)), Some(403));
        assert_eq!(code(&agg.handle("one", req("one", PlanHash([7; 32])), T0)), Some(409));
        // none of that changed the join state
        assert_eq!(agg.status().joined.len(), 1);
    }

    #[test]
    fn two_rounds_with_weighted_model_and_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("final.ofm");
        let mut p = plan();
        p.aggregator.settings.rounds_to_train = 2;
        let mut agg = joined(p.clone()).with_final_model_path(&path);
        get_tasks(&mut agg, "two", T0);
        let (train, val) = tasks_of(&p);
        for round in 0..2u32 {
            let r = |m| agg_ok(m);
            r(agg.handle("one", train_result(&p, "one", round, &train, vec![2.0, 4.0], 1), T0));
            assert_eq!(agg.current_round(), round);
            r(agg.handle("two", train_result(&p, "two", round, &train, vec![4.0, 8.0], 3), T0));
            // model is ready for the next round before validation is in
            let next = agg.global_model(round + 1).unwrap();
            assert_eq!(next[0].data, vec![3.5, 7.0]);
            r(agg.handle("one", validate_result(&p, "one", round, &val, 0.5, 100), T0));
            r(agg.handle("two", validate_result(&p, "two", round, &val, 1.0, 300), T0));
        }
        assert!(agg.is_done());
        let log = agg.metrics_log();
        let acc: Vec<&MetricRecord> = log.iter().filter(|m| m.name == "accuracy").collect();
        assert_eq!(acc.len(), 2);
        assert!(acc.iter().all(|m| m.value == 0.875 && m.weight == 400.0));
        assert!(log.windows(2).all(|w| w[0].round <= w[1].round));
        assert_eq!(log.len(), 2 * 2);
        let saved = model_file::load(&path).unwrap();
        assert_eq!(saved, agg.final_model().unwrap());
        assert_eq!(saved[0].data, vec![3.5, 7.0]);

        assert!(get_tasks(&mut agg, "one", T0).quit);
        assert_eq!(agg.pending_quits().len(), 1);
        assert!(get_tasks(&mut agg, "two", T0).quit);
        assert!(agg.pending_quits().is_empty());
        let late = agg.handle("one", train_result(&p, "one", 2, &train, vec![0.0, 0.0], 1), T0);
        assert_eq!(code(&late), Some(410));
    }

    fn agg_ok(m: Message) {
        assert!(matches!(m, Message::SendResultsAck(SendResultsAck { accepted: true })), "{m:?}");
    }

    #[test]
    fn duplicates_wrong_round_and_unknown_task() {
        let p = plan();
        let mut agg = joined(p.clone());
        get_tasks(&mut agg, "two", T0);
        let (train, _) = tasks_of(&p);
        agg_ok(agg.handle("one", train_result(&p, "one", 0, &train, vec![1.0, 1.0], 2), T0));
        let dup = agg.handle("one", train_result(&p, "one", 0, &train, vec![9.0, 9.0], 2), T0);
        assert_eq!(code(&dup), Some(429));
        let wrong = agg.handle("two", train_result(&p, "two", 1, &train, vec![1.0, 1.0], 2), T0);
        assert_eq!(code(&wrong), Some(400));
        let unknown = agg.handle("two", train_result(&p, "two", 0, "nope", vec![1.0, 1.0], 2), T0);
        assert_eq!(code(&unknown), Some(404));
        assert_eq!(agg.current_round(), 0);
        // a crashed-and-restarted collaborator sees only what is left
        let left = get_tasks(&mut agg, "one", T0);
        assert!(!left.task_names.contains(&train));
    }

    #[test]
    fn malformed_results_are_refused() {
        let p = plan();
        let mut agg = joined(p.clone());
        get_tasks(&mut agg, "two", T0);
        let (train, _) = tasks_of(&p);
        let mut bad_shape = train_result(&p, "one", 0, &train, vec![1.0, 1.0], 2);
        if let Message::SendResultsRequest(r) = &mut bad_shape {
            r.tensors[0] = ModelTensor::new("w", vec![1], vec![1.0]).with_key(0, "one", [Tag::Trained]);
        }
        assert_eq!(code(&agg.handle("one", bad_shape, T0)), Some(400));
        let mut spoofed = train_result(&p, "one", 0, &train, vec![1.0, 1.0], 2);
        if let Message::SendResultsRequest(r) = &mut spoofed {
            r.tensors[0].key.origin = "two".into();
        }
        assert_eq!(code(&agg.handle("one", spoofed, T0)), Some(400));
        let zero = train_result(&p, "one", 0, &train, vec![1.0, 1.0], 0);
        assert_eq!(code(&agg.handle("one", zero, T0)), Some(400));
        agg_ok(agg.handle("one", train_result(&p, "one", 0, &train, vec![1.0, 1.0], 2), T0));
    }

    #[test]
    fn tensors_are_served_by_round() {
        let p = plan();
        let mut agg = joined(p.clone());
        get_tasks(&mut agg, "two", T0);
        let get = |agg: &mut Aggregator, name: &str, round| {
            agg.handle(
                "one",
                Message::GetTensorRequest(GetTensorRequest {
                    header: header(&p, "one"),
                    key: TensorKey::global(name, round),
                }),
                T0,
            )
        };
        match get(&mut agg, "w", 0) {
            Message::GetTensorResponse(r) => assert_eq!(r.tensor.data, vec![0.0, 0.0]),
            other => panic!("{other:?}"),
        }
        assert_eq!(code(&get(&mut agg, "w", 1)), Some(404));
        assert_eq!(code(&get(&mut agg, "undeclared", 0)), Some(404));
    }

    #[test]
    fn quorum_closes_after_deadline_with_single_contribution() {
        let p = quorum_plan(3);
        let mut agg = joined(p.clone());
        get_tasks(&mut agg, "two", T0);
        let (train, val) = tasks_of(&p);
        let t = |s: u64| Duration::from_secs(s);
        // round 0: both report
        for (who, n) in [("one", 1), ("two", 3)] {
            agg_ok(agg.handle(who, train_result(&p, who, 0, &train, vec![2.0 * n as f32, 1.0], n), t(1)));
            agg_ok(agg.handle(who, validate_result(&p, who, 0, &val, 0.5, 10), t(1)));
        }
        assert_eq!(agg.current_round(), 1);
        // rounds 1..: only "one" reports
        for round in 1..3u32 {
            let start = 10 * u64::from(round);
            let weights = vec![round as f32, -(round as f32)];
            agg_ok(agg.handle("one", train_result(&p, "one", round, &train, weights.clone(), 7), t(start)));
            agg.tick(t(start + 4));
            assert_eq!(agg.current_round(), round, "deadline not yet passed");
            agg_ok(agg.handle("one", validate_result(&p, "one", round, &val, 0.9, 10), t(start + 4)));
            agg.tick(t(start + 5));
            assert_eq!(agg.current_round(), round + 1);
            assert_eq!(agg.global_model(round + 1).unwrap()[0].data, weights);
        }
        assert!(agg.is_done());
        let s = agg.round_summaries();
        assert!(!s[0].closed_by_quorum);
        assert!(s[1].closed_by_quorum && s[2].closed_by_quorum);
        assert_eq!(s[2].train_contributors, vec!["one".to_string()]);
        assert_eq!(agg.participation()["one"], 3);
        assert_eq!(agg.participation()["two"], 1);
        assert_eq!(agg.pending_quits(), BTreeSet::from(["one".to_string()]));
    }

    #[test]
    fn quorum_never_closes_without_enough_reporters() {
        let mut p = quorum_plan(2);
        p.straggler_policy = StragglerPolicy::Quorum {
            quorum_fraction: 1.0,
            timeout_seconds: 1.0,
        };
        let mut agg = joined(p.clone());
        get_tasks(&mut agg, "two", T0);
        let (train, _) = tasks_of(&p);
        agg_ok(agg.handle("one", train_result(&p, "one", 0, &train, vec![1.0, 1.0], 1), T0));
        agg.tick(Duration::from_secs(100));
        assert_eq!(agg.current_round(), 0);
    }

    #[test]
    fn late_result_after_quorum_close_is_wrong_round() {
        let p = quorum_plan(3);
        let mut agg = joined(p.clone());
        get_tasks(&mut agg, "two", T0);
        let (train, val) = tasks_of(&p);
        agg_ok(agg.handle("one", train_result(&p, "one", 0, &train, vec![1.0, 1.0], 1), T0));
        agg_ok(agg.handle("one", validate_result(&p, "one", 0, &val, 1.0, 1), T0));
        agg.tick(Duration::from_secs(6));
        assert_eq!(agg.current_round(), 1);
        let late = agg.handle("two", train_result(&p, "two", 0, &train, vec![5.0, 5.0], 1), Duration::from_secs(7));
        assert_eq!(code(&late), Some(400));
        assert_eq!(agg.global_model(1).unwrap()[0].data, vec![1.0, 1.0]);
    }

    #[test]
    fn service_serializes_requests() {
        let p = plan();
        let svc = AggregatorService::spawn(Aggregator::new(p.clone(), init()).unwrap());
        let threads: Vec<_> = ["one", "two"]
            .into_iter()
            .map(|who| {
                let h = svc.handle();
                let p = p.clone();
                thread::spawn(move || {
                    h.request(who, Message::GetTasksRequest(GetTasksRequest { header: header(&p, who) }))
                })
            })
            .collect();
        for t in threads {
            t.join().unwrap();
        }
        let snap = svc.handle().snapshot().unwrap();
        assert_eq!(snap.status.phase, Phase::RoundActive);
        assert!(snap.metrics.is_empty());
        let agg = svc.stop();
        assert_eq!(agg.status().joined.len(), 2);
    }
}
