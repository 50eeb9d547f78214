//! Discrete-event engine. The clock counts whole microseconds; agents see
//! milliseconds as `f64`.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::behavior::{
    Ack, Agent, BehaviorError, Binding, Ctx, DiagnosisSettings, Mitigation, Output, Record,
    RemediationHooks, Role, Strategy,
};
use crate::domain::{
    AgentId, ConversationId, IdSource, Measurements, Message, MessageId, Receiver, ServiceId,
    RESPONSE_TIME,
};
use crate::protocol::{make_message, Payload, Performative, ProbeLimits};

use super::metrics::{phase_boundaries, MetricsRecord, RunSummary};
use super::scenario::{Failure, FailureKind, Scenario};
use super::topology::Topology;

fn us(ms: f64) -> u64 {
    (ms * 1000.0).round().max(0.0) as u64
}

fn ms(us: u64) -> f64 {
    us as f64 / 1000.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogEntry {
    pub sent_us: u64,
    /// `None` for broadcasts, which are delivered to every other agent.
    pub delivered_us: Option<u64>,
    pub message: Message,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Note {
    FailureInjected { failure: String, episode: u32 },
    FailureCleared { failure: String, component: &'static str, by: AgentId },
    /// A heal or repair that found nothing to clear.
    NothingToClear { agent: AgentId, action: &'static str },
    /// Request for a service the receiver does not offer. The requester is
    /// left waiting, so the run ends non-quiescent.
    Refused { agent: AgentId, service: ServiceId, request: MessageId },
}

/// Everything that happened in a run, in order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub messages: Vec<LogEntry>,
    pub records: Vec<(u64, AgentId, Record)>,
    pub notes: Vec<(u64, Note)>,
}

impl RunLog {
    /// One `id_m|id_c|sender|receiver|performative|service|payload` line
    /// per message.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for e in &self.messages {
            s.push_str(&e.message.log_line());
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub strategy: Strategy,
    pub seed: u64,
    pub metrics: Vec<MetricsRecord>,
    pub summary: RunSummary,
    pub log: RunLog,
    pub initial_bindings: BTreeMap<AgentId, BTreeMap<ServiceId, AgentId>>,
    pub final_bindings: BTreeMap<AgentId, BTreeMap<ServiceId, AgentId>>,
    pub events_processed: u64,
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("event cap of {cap} reached at t={at_ms} ms without quiescence")]
    EventCap { cap: u64, at_ms: f64 },
    #[error("agent {agent}: {source}")]
    Behavior {
        agent: AgentId,
        #[source]
        source: BehaviorError,
    },
    #[error("top-level reply for episode {0} did not arrive within the episode")]
    MissingReply(u32),
    #[error("not quiescent after draining: {0}")]
    NotQuiescent(String),
}

#[derive(Debug, Clone)]
struct FailureState {
    spec: Failure,
    provider_active: bool,
    link_active: bool,
}

impl FailureState {
    fn active(&self) -> bool {
        self.provider_active || self.link_active
    }

    fn on_link(&self, a: &AgentId, b: &AgentId) -> bool {
        self.spec
            .link
            .as_ref()
            .is_some_and(|(x, y)| (x == a && y == b) || (x == b && y == a))
    }
}

#[derive(Debug, Clone, Default)]
struct FailureBook {
    failures: Vec<FailureState>,
}

impl FailureBook {
    fn inject(&mut self, specs: &[Failure], episode: u32) -> Vec<String> {
        let mut out = Vec::new();
        for f in specs.iter().filter(|f| f.onset_episode == episode) {
            self.failures.push(FailureState {
                spec: f.clone(),
                provider_active: matches!(f.kind, FailureKind::Provider | FailureKind::Both),
                link_active: matches!(f.kind, FailureKind::Link | FailureKind::Both),
            });
            out.push(f.id.clone());
        }
        out
    }

    fn provider_penalty_ms(&self, agent: &AgentId) -> f64 {
        self.failures
            .iter()
            .filter(|f| f.provider_active && f.spec.agent.as_ref() == Some(agent))
            .map(|f| f.spec.penalty_ms)
            .sum()
    }

    fn link_penalty_ms(&self, a: &AgentId, b: &AgentId) -> f64 {
        self.failures
            .iter()
            .filter(|f| f.link_active && f.on_link(a, b))
            .map(|f| f.spec.penalty_ms)
            .sum()
    }

    fn active_ids(&self) -> Vec<String> {
        self.failures
            .iter()
            .filter(|f| f.active())
            .map(|f| f.spec.id.clone())
            .collect()
    }
}

struct SimHooks<'a> {
    book: &'a mut FailureBook,
    notes: &'a mut Vec<(u64, Note)>,
    now: u64,
}

impl RemediationHooks for SimHooks<'_> {
    fn self_healing(&mut self, agent: &AgentId) -> Ack {
        let mut ack = Ack::NoOp;
        for f in &mut self.book.failures {
            if f.provider_active && f.spec.agent.as_ref() == Some(agent) {
                f.provider_active = false;
                ack = Ack::Done;
                self.notes.push((
                    self.now,
                    Note::FailureCleared {
                        failure: f.spec.id.clone(),
                        component: "provider",
                        by: agent.clone(),
                    },
                ));
            }
        }
        if ack == Ack::NoOp {
            self.notes.push((
                self.now,
                Note::NothingToClear {
                    agent: agent.clone(),
                    action: "self_healing",
                },
            ));
        }
        ack
    }

    fn mitigate(&mut self, _: &AgentId, binding: &mut Binding, suspect: &AgentId) -> Option<Mitigation> {
        binding.swap_out(suspect)
    }

    fn repair_link(&mut self, agent: &AgentId, peer: &AgentId) -> Ack {
        let mut ack = Ack::NoOp;
        for f in &mut self.book.failures {
            if f.link_active && f.on_link(agent, peer) {
                f.link_active = false;
                ack = Ack::Done;
                self.notes.push((
                    self.now,
                    Note::FailureCleared {
                        failure: f.spec.id.clone(),
                        component: "link",
                        by: agent.clone(),
                    },
                ));
            }
        }
        if ack == Ack::NoOp {
            self.notes.push((
                self.now,
                Note::NothingToClear {
                    agent: agent.clone(),
                    action: "repair_link",
                },
            ));
        }
        ack
    }

    fn undo(&mut self, _: &AgentId, binding: &mut Binding, m: &Mitigation) -> Ack {
        binding.restore(m)
    }
}

#[derive(Debug)]
enum Ev {
    Deliver(usize, Message),
    Complete(usize),
    Timer(usize, ConversationId, f64),
    Fire(usize),
}

#[derive(Debug)]
struct Queued {
    at: u64,
    seq: u64,
    ev: Ev,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}

impl Eq for Queued {}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Queued {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

#[derive(Debug)]
struct ActiveJob {
    request: Message,
    service: ServiceId,
    outstanding: BTreeSet<MessageId>,
    sub_cost: f64,
}

#[derive(Debug, Default)]
struct Jobs {
    queue: VecDeque<Message>,
    active: Option<ActiveJob>,
}

struct Pending {
    episode: u32,
    sent_us: u64,
}

pub struct Engine {
    scenario: Scenario,
    strategy: Strategy,
    seed: u64,
    episodes: u32,
    topology: Topology,
    settings: DiagnosisSettings,
    agents: Vec<Agent>,
    index: HashMap<AgentId, usize>,
    jobs: Vec<Jobs>,
    top: usize,
    queue: BinaryHeap<Reverse<Queued>>,
    clock: u64,
    seq: u64,
    processed: u64,
    ids: IdSource,
    rng: ChaCha8Rng,
    book: FailureBook,
    log: RunLog,
    own_requests: HashMap<MessageId, Pending>,
    observed: BTreeMap<u32, (f64, f64)>,
}

impl Engine {
    /// `episodes` overrides the scenario's run length; failures whose onset
    /// falls after the last episode never fire.
    pub fn new(scenario: &Scenario, strategy: Strategy, seed: u64, episodes: Option<u32>) -> Self {
        let topology = Topology::from_scenario(scenario);
        let declared: Vec<&str> = scenario.features.iter().map(String::as_str).collect();
        let mut agents = Vec::new();
        for spec in &scenario.agents {
            let role = if spec.id == scenario.top_client {
                Role::Client
            } else {
                Role::Provider
            };
            let mut a = Agent::new(spec.id.clone(), role, strategy);
            a.services = spec.services.clone();
            for b in &spec.bindings {
                a = a.with_binding(Binding::new(
                    b.service.clone(),
                    b.primary.clone(),
                    b.alternates.clone(),
                ));
            }
            for (feature, c) in &spec.requirements {
                a.requirements
                    .insert(feature, c.clone(), &declared)
                    .expect("scenario validation checks declared features");
            }
            agents.push(a);
        }
        for bg in &scenario.background {
            agents.push(
                Agent::new(bg.id.clone(), Role::Background, strategy).with_binding(Binding::new(
                    bg.service.clone(),
                    bg.provider.clone(),
                    vec![],
                )),
            );
        }
        let index: HashMap<AgentId, usize> = agents
            .iter()
            .enumerate()
            .map(|(i, a)| (a.id.clone(), i))
            .collect();
        let run = &scenario.run;
        let settings = DiagnosisSettings {
            threshold: run.threshold,
            probe: ProbeLimits {
                deadline_ms: run.probe_deadline_ms,
                quota: run.probe_quota,
            },
            give_up_ms: run.give_up_ms,
        };
        Self {
            top: index[&scenario.top_client],
            jobs: agents.iter().map(|_| Jobs::default()).collect(),
            scenario: scenario.clone(),
            strategy,
            seed,
            episodes: episodes.unwrap_or(run.episodes),
            topology,
            settings,
            agents,
            index,
            queue: BinaryHeap::new(),
            clock: 0,
            seq: 0,
            processed: 0,
            ids: IdSource::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            book: FailureBook::default(),
            log: RunLog::default(),
            own_requests: HashMap::new(),
            observed: BTreeMap::new(),
        }
    }

    fn bindings(&self) -> BTreeMap<AgentId, BTreeMap<ServiceId, AgentId>> {
        self.agents
            .iter()
            .map(|a| {
                (
                    a.id.clone(),
                    a.bindings
                        .iter()
                        .map(|(s, b)| (s.clone(), b.current.clone()))
                        .collect(),
                )
            })
            .collect()
    }

    pub fn run(mut self) -> Result<RunResult, EngineError> {
        let initial_bindings = self.bindings();
        let gap = us(self.scenario.run.episode_gap_ms);
        let mut metrics = Vec::new();
        for k in 1..=self.episodes {
            let t0 = (k as u64 - 1) * gap;
            self.run_until(t0)?;
            self.clock = t0;
            if k > 1 {
                metrics.push(self.finalize(k - 1)?);
            }
            self.start_episode(k)?;
        }
        self.run_until(self.episodes as u64 * gap)?;
        metrics.push(self.finalize(self.episodes)?);
        self.run_until(u64::MAX)?;
        self.check_quiescent()?;

        let boundaries = phase_boundaries(&self.scenario, self.episodes);
        let summary = RunSummary::from_metrics(
            self.strategy,
            self.seed,
            &metrics,
            self.book.active_ids(),
            &boundaries,
        );
        Ok(RunResult {
            strategy: self.strategy,
            seed: self.seed,
            metrics,
            summary,
            final_bindings: self.bindings(),
            initial_bindings,
            log: self.log,
            events_processed: self.processed,
        })
    }

    fn check_quiescent(&self) -> Result<(), EngineError> {
        if let Some((i, _)) = self
            .jobs
            .iter()
            .enumerate()
            .find(|(_, j)| j.active.is_some() || !j.queue.is_empty())
        {
            return Err(EngineError::NotQuiescent(format!(
                "{} still has service work",
                self.agents[i].id
            )));
        }
        if !self.own_requests.is_empty() {
            return Err(EngineError::NotQuiescent(format!(
                "{} client requests unanswered",
                self.own_requests.len()
            )));
        }
        Ok(())
    }

    fn finalize(&mut self, episode: u32) -> Result<MetricsRecord, EngineError> {
        let (rt, cost) = self
            .observed
            .remove(&episode)
            .ok_or(EngineError::MissingReply(episode))?;
        let measured: Measurements = [(RESPONSE_TIME.to_string(), rt)].into_iter().collect();
        let violation = !self.agents[self.top]
            .requirements
            .violated(&measured)
            .map_err(|e| EngineError::Behavior {
                agent: self.agents[self.top].id.clone(),
                source: e.into(),
            })?
            .is_empty();
        Ok(MetricsRecord {
            episode,
            strategy: self.strategy,
            response_time_ms: rt,
            cost_units: cost,
            violation,
            active_failures: self.book.active_ids(),
        })
    }

    fn start_episode(&mut self, k: u32) -> Result<(), EngineError> {
        for id in self.book.inject(&self.scenario.failures, k) {
            self.log.notes.push((
                self.clock,
                Note::FailureInjected {
                    failure: id,
                    episode: k,
                },
            ));
        }
        self.client_request(self.top, k)?;
        let (w0, w1) = self.scenario.run.background_window_ms;
        let (w0, w1) = (us(w0), us(w1));
        for bi in 0..self.scenario.background.len() {
            let i = self.index[&self.scenario.background[bi].id];
            for _ in 0..self.scenario.background[bi].requests_per_episode {
                let off = self.rng.gen_range(w0..=w1);
                self.push(self.clock + off, Ev::Fire(i));
            }
        }
        Ok(())
    }

    fn push(&mut self, at: u64, ev: Ev) {
        self.seq += 1;
        self.queue.push(Reverse(Queued {
            at,
            seq: self.seq,
            ev,
        }));
    }

    fn behavior_err(&self, i: usize) -> impl FnOnce(BehaviorError) -> EngineError + '_ {
        move |source| EngineError::Behavior {
            agent: self.agents[i].id.clone(),
            source,
        }
    }

    fn client_request(&mut self, i: usize, episode: u32) -> Result<(), EngineError> {
        let (service, provider) = {
            let (s, b) = self.agents[i]
                .bindings
                .iter()
                .next()
                .expect("clients have one binding");
            (s.clone(), b.current.clone())
        };
        let conversation = self.ids.conversation();
        let m = self.request_message(i, provider, service, conversation);
        self.agents[i]
            .client_on_request_sent(&m, ms(self.clock))
            .map_err(|e| self.behavior_err(i)(e.into()))?;
        self.own_requests.insert(
            m.id_m,
            Pending {
                episode,
                sent_us: self.clock,
            },
        );
        self.send(i, m);
        Ok(())
    }

    fn request_message(
        &mut self,
        i: usize,
        provider: AgentId,
        service: ServiceId,
        conversation: ConversationId,
    ) -> Message {
        make_message(
            &mut self.ids,
            Performative::RequestService,
            self.agents[i].id.clone(),
            Receiver::Agent(provider),
            conversation,
            Some(service),
            Payload::RequestService {
                args: String::new(),
            },
        )
        .expect("well-formed request")
    }

    fn send(&mut self, from: usize, m: Message) {
        let sender = self.agents[from].id.clone();
        match &m.receiver {
            Receiver::Agent(r) => {
                let j = self.index[r];
                let at = self.clock + us(self.book.link_penalty_ms(&sender, r));
                self.log.messages.push(LogEntry {
                    sent_us: self.clock,
                    delivered_us: Some(at),
                    message: m.clone(),
                });
                self.push(at, Ev::Deliver(j, m));
            }
            Receiver::Broadcast => {
                self.log.messages.push(LogEntry {
                    sent_us: self.clock,
                    delivered_us: None,
                    message: m.clone(),
                });
                for j in 0..self.agents.len() {
                    if j == from {
                        continue;
                    }
                    let at = self.clock + us(self.book.link_penalty_ms(&sender, &self.agents[j].id));
                    self.push(at, Ev::Deliver(j, m.clone()));
                }
            }
        }
    }

    fn run_until(&mut self, limit: u64) -> Result<(), EngineError> {
        while let Some(Reverse(q)) = self.queue.peek() {
            if q.at >= limit {
                break;
            }
            let Reverse(q) = self.queue.pop().unwrap();
            debug_assert!(q.at >= self.clock);
            self.clock = q.at;
            self.processed += 1;
            if self.processed > self.scenario.run.event_cap {
                return Err(EngineError::EventCap {
                    cap: self.scenario.run.event_cap,
                    at_ms: ms(self.clock),
                });
            }
            match q.ev {
                Ev::Deliver(j, m) => self.deliver(j, m)?,
                Ev::Complete(j) => self.complete(j)?,
                Ev::Timer(j, c, at) => self.timer(j, c, at)?,
                Ev::Fire(j) => {
                    let episode = (self.clock / us(self.scenario.run.episode_gap_ms)) as u32 + 1;
                    self.client_request(j, episode)?;
                }
            }
        }
        Ok(())
    }

    fn deliver(&mut self, j: usize, m: Message) -> Result<(), EngineError> {
        match m.performative {
            Performative::RequestService => {
                let service = m.service.clone().expect("validated");
                if !self.agents[j].services.contains_key(&service) {
                    self.log.notes.push((
                        self.clock,
                        Note::Refused {
                            agent: self.agents[j].id.clone(),
                            service,
                            request: m.id_m,
                        },
                    ));
                    return Ok(());
                }
                self.jobs[j].queue.push_back(m);
                self.try_start(j)
            }
            Performative::InformService => self.on_service_reply(j, m),
            _ => {
                let now = ms(self.clock);
                let out = {
                    let mut hooks = SimHooks {
                        book: &mut self.book,
                        notes: &mut self.log.notes,
                        now: self.clock,
                    };
                    let mut ctx = Ctx {
                        now,
                        ids: &mut self.ids,
                        proximity: &self.topology,
                        settings: &self.settings,
                    };
                    self.agents[j].handle_control(&m, &mut ctx, &mut hooks)
                }
                .map_err(|e| self.behavior_err(j)(e))?;
                self.apply(j, out);
                Ok(())
            }
        }
    }

    fn timer(&mut self, j: usize, c: ConversationId, at: f64) -> Result<(), EngineError> {
        let out = {
            let mut hooks = SimHooks {
                book: &mut self.book,
                notes: &mut self.log.notes,
                now: self.clock,
            };
            let mut ctx = Ctx {
                now: at,
                ids: &mut self.ids,
                proximity: &self.topology,
                settings: &self.settings,
            };
            self.agents[j].on_timer(c, &mut ctx, &mut hooks)
        }
        .map_err(|e| self.behavior_err(j)(e))?;
        self.apply(j, out);
        Ok(())
    }

    fn apply(&mut self, j: usize, out: Output) {
        for m in out.messages {
            self.send(j, m);
        }
        for t in out.timers {
            self.push(us(t.at).max(self.clock), Ev::Timer(j, t.conversation, t.at));
        }
        let id = self.agents[j].id.clone();
        for r in out.records {
            self.log.records.push((self.clock, id.clone(), r));
        }
    }

    fn on_service_reply(&mut self, j: usize, m: Message) -> Result<(), EngineError> {
        let now = ms(self.clock);
        let (id_m, notices) = self.agents[j]
            .client_on_reply(&m, now, &mut self.ids)
            .map_err(|e| self.behavior_err(j)(e))?;
        for n in notices {
            self.send(j, n);
        }
        let cost = match m.payload {
            Payload::InformService { cost, .. } => cost,
            _ => 0.0,
        };
        if let Some(job) = self.jobs[j].active.as_mut() {
            if job.outstanding.remove(&id_m) {
                job.sub_cost += cost;
                if job.outstanding.is_empty() {
                    self.schedule_completion(j);
                }
                return Ok(());
            }
        }
        if let Some(p) = self.own_requests.remove(&id_m) {
            if j == self.top {
                self.observed.insert(p.episode, (ms(self.clock - p.sent_us), cost));
            }
        }
        Ok(())
    }

    fn try_start(&mut self, j: usize) -> Result<(), EngineError> {
        if self.jobs[j].active.is_some() {
            return Ok(());
        }
        let Some(request) = self.jobs[j].queue.pop_front() else {
            return Ok(());
        };
        let service = request.service.clone().expect("validated");
        let targets: Vec<(ServiceId, AgentId)> = self.agents[j]
            .bindings
            .iter()
            .map(|(s, b)| (s.clone(), b.current.clone()))
            .collect();
        let mut job = ActiveJob {
            request,
            service,
            outstanding: BTreeSet::new(),
            sub_cost: 0.0,
        };
        let mut subs = Vec::new();
        for (s, p) in targets {
            let m = self.request_message(j, p, s, job.request.id_c);
            self.agents[j]
                .client_on_request_sent(&m, ms(self.clock))
                .map_err(|e| self.behavior_err(j)(e.into()))?;
            job.outstanding.insert(m.id_m);
            subs.push(m);
        }
        let leaf = job.outstanding.is_empty();
        self.jobs[j].active = Some(job);
        for m in subs {
            self.send(j, m);
        }
        if leaf {
            self.schedule_completion(j);
        }
        Ok(())
    }

    fn schedule_completion(&mut self, j: usize) {
        let service = &self.jobs[j].active.as_ref().unwrap().service;
        let spec = self.agents[j].services[service];
        let jitter = us(self.scenario.run.processing_jitter_ms);
        let extra = if jitter > 0 {
            self.rng.gen_range(0..jitter)
        } else {
            0
        };
        let penalty = us(self.book.provider_penalty_ms(&self.agents[j].id));
        let at = self.clock + us(spec.processing_ms) + extra + penalty;
        self.push(at, Ev::Complete(j));
    }

    fn complete(&mut self, j: usize) -> Result<(), EngineError> {
        let job = self.jobs[j].active.take().expect("completion without job");
        let unit = self.agents[j].services[&job.service].cost;
        let reply = make_message(
            &mut self.ids,
            Performative::InformService,
            self.agents[j].id.clone(),
            Receiver::Agent(job.request.sender.clone()),
            job.request.id_c,
            Some(job.service.clone()),
            Payload::InformService {
                output: format!("{}:done", job.service),
                cost: unit + job.sub_cost,
            },
        )
        .expect("well-formed reply");
        self.send(j, reply);
        self.try_start(j)
    }
}

/// Runs one simulation. Deterministic in (scenario, strategy, seed,
/// episodes).
pub fn run_simulation(
    scenario: &Scenario,
    strategy: Strategy,
    seed: u64,
    episodes: Option<u32>,
) -> Result<RunResult, EngineError> {
    Engine::new(scenario, strategy, seed, episodes).run()
}
