//! Agent role logic: tracing on the client side, stepwise cause diagnosis
//! on the provider side, and probability answers for cooperating agents.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use num_rational::BigRational;
use num_traits::{Signed, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    AgentId, ConversationId, EvalError, IdSource, Measurements, Message, MessageId,
    QualityRequirement, Receiver, ServiceId, TraceError, TraceStore, RESPONSE_TIME,
};
use crate::protocol::{
    make_message, ConversationState, Effect, Event, Payload, Performative, Phase, ProbeLimits,
    ProbeReply, ProtocolError, DEFAULT_PROBE_DEADLINE_MS,
};
use crate::stats::{anomaly_probability, is_anomalous, Sample};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Passive,
    Remedial,
    Cooperative,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Passive, Strategy::Remedial, Strategy::Cooperative];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Passive => "passive",
            Strategy::Remedial => "remedial",
            Strategy::Cooperative => "cooperative",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown strategy `{0}` (expected passive, remedial or cooperative)")]
pub struct UnknownStrategy(pub String);

impl FromStr for Strategy {
    type Err = UnknownStrategy;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "passive" => Ok(Strategy::Passive),
            "remedial" => Ok(Strategy::Remedial),
            "cooperative" => Ok(Strategy::Cooperative),
            _ => Err(UnknownStrategy(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    /// Top-level consumer whose requirement drives the experiment.
    Client,
    Provider,
    /// Unnamed traffic source; traces and answers probes, never diagnoses.
    Background,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServiceSpec {
    pub cost: f64,
    pub processing_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mitigation {
    pub service: ServiceId,
    pub replaced: AgentId,
    pub installed: AgentId,
}

/// Required service bound to its current provider, with ordered fallbacks.
#[derive(Debug, Clone, PartialEq)]
pub struct Binding {
    pub service: ServiceId,
    pub current: AgentId,
    pub primary: AgentId,
    pub alternates: Vec<AgentId>,
}

impl Binding {
    pub fn new(service: ServiceId, primary: AgentId, alternates: Vec<AgentId>) -> Self {
        Self {
            service,
            current: primary.clone(),
            primary,
            alternates,
        }
    }

    /// Swaps `suspect` out for the first alternate that is not the suspect.
    /// `None` when the binding no longer points at the suspect or no
    /// alternate exists.
    pub fn swap_out(&mut self, suspect: &AgentId) -> Option<Mitigation> {
        if &self.current != suspect {
            return None;
        }
        let alt = self.alternates.iter().find(|a| *a != suspect)?.clone();
        let m = Mitigation {
            service: self.service.clone(),
            replaced: self.current.clone(),
            installed: alt.clone(),
        };
        self.current = alt;
        Some(m)
    }

    /// Reverts `m` if the binding still points at what it installed.
    pub fn restore(&mut self, m: &Mitigation) -> Ack {
        if self.current == m.installed {
            self.current = m.replaced.clone();
            Ack::Done
        } else {
            Ack::NoOp
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ack {
    Done,
    NoOp,
}

/// Extension point for the four remediation actions. The simulator clears
/// injected failures; a deployment would restart processes, reroute, etc.
pub trait RemediationHooks {
    fn self_healing(&mut self, agent: &AgentId) -> Ack;
    fn mitigate(&mut self, agent: &AgentId, binding: &mut Binding, suspect: &AgentId)
        -> Option<Mitigation>;
    fn repair_link(&mut self, agent: &AgentId, peer: &AgentId) -> Ack;
    fn undo(&mut self, agent: &AgentId, binding: &mut Binding, mitigation: &Mitigation) -> Ack;
}

/// Hooks that only manipulate bindings. Healing and repair do nothing.
#[derive(Debug, Default)]
pub struct BindingHooks;

impl RemediationHooks for BindingHooks {
    fn self_healing(&mut self, _: &AgentId) -> Ack {
        Ack::NoOp
    }

    fn mitigate(&mut self, _: &AgentId, binding: &mut Binding, suspect: &AgentId) -> Option<Mitigation> {
        binding.swap_out(suspect)
    }

    fn repair_link(&mut self, _: &AgentId, _: &AgentId) -> Ack {
        Ack::NoOp
    }

    fn undo(&mut self, _: &AgentId, binding: &mut Binding, m: &Mitigation) -> Ack {
        binding.restore(m)
    }
}

/// Weight given to a cooperating agent's opinion.
pub trait Proximity {
    fn similarity(&self, a: &AgentId, b: &AgentId) -> f64;
}

/// 1/d for hop distance d, 1 for an agent and itself, 0 when disconnected.
pub fn similarity_from_hops(hops: Option<usize>) -> f64 {
    match hops {
        None => 0.0,
        Some(0) => 1.0,
        Some(d) => 1.0 / d as f64,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AnomalousInteraction {
    pub service: ServiceId,
    pub provider: AgentId,
    pub id_m: MessageId,
}

/// Sub-interactions of conversation `id_c` whose measurement of `feature`
/// is a Tukey outlier against the provider's history up to that point.
pub fn classify_interactions(
    traces: &TraceStore,
    feature: &str,
    id_c: ConversationId,
) -> Vec<AnomalousInteraction> {
    let mut out = Vec::new();
    for t in traces.get_traces(id_c) {
        let Some(time) = t.time else { continue };
        if t.measurement(feature).is_none() {
            continue;
        }
        let history = traces.get_measurements(t.service(), t.provider(), feature, time);
        if is_anomalous(&history).unwrap_or(false) {
            out.push(AnomalousInteraction {
                service: t.service().clone(),
                provider: t.provider().clone(),
                id_m: t.message.id_m,
            });
        }
    }
    out
}

/// Similarity-weighted mean of probe answers; 0.0 without evidence.
///
/// Summed in exact rationals and rounded once, so the result is the double
/// nearest the true weighted mean: scaling all similarities leaves it
/// unchanged, and one reply yields exactly its own probability.
pub fn external_verification_score<I>(replies: I) -> f64
where
    I: IntoIterator<Item = (f64, f64)>,
{
    let exact = |x: f64| BigRational::from_float(x).expect("finite probe values");
    let (mut num, mut den) = (BigRational::zero(), BigRational::zero());
    for (prob, sim) in replies {
        let s = exact(sim);
        num += exact(prob) * &s;
        den += s;
    }
    if den.is_positive() {
        (num / den).to_f64().unwrap_or(f64::NAN)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cause {
    Internal,
    Link,
    Provider,
}

impl fmt::Display for Cause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Cause::Internal => "internal",
            Cause::Link => "link",
            Cause::Provider => "provider",
        })
    }
}

/// A score at or below the threshold blames the link.
pub fn cause_from_score(score: f64, threshold: f64) -> Cause {
    if score > threshold {
        Cause::Provider
    } else {
        Cause::Link
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagnosisSettings {
    pub threshold: f64,
    pub probe: ProbeLimits,
    /// How long to wait for a suspect's INFORM_NORMALITY before keeping the
    /// mitigation for good.
    pub give_up_ms: f64,
}

impl Default for DiagnosisSettings {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            probe: ProbeLimits::default(),
            give_up_ms: 10.0 * DEFAULT_PROBE_DEADLINE_MS,
        }
    }
}

pub struct Ctx<'a> {
    pub now: f64,
    pub ids: &'a mut IdSource,
    pub proximity: &'a dyn Proximity,
    pub settings: &'a DiagnosisSettings,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Resolution {
    Normalized,
    LinkRepaired,
    GaveUp,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RemediationAction {
    SelfHealing(Ack),
    Mitigate {
        service: ServiceId,
        suspect: AgentId,
        installed: Option<AgentId>,
    },
    RepairLink { peer: AgentId, ack: Ack },
    Undo { service: ServiceId, ack: Ack },
    Resolved(Resolution),
}

/// One remediation step. `diagnosis` is the conversation of the triggering
/// INFORM_ABNORMALITY, `step` the index of the anomalous interaction.
#[derive(Debug, Clone, PartialEq)]
pub struct RemediationEvent {
    pub at: f64,
    pub agent: AgentId,
    pub diagnosis: ConversationId,
    pub step: usize,
    pub action: RemediationAction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosisOutcome {
    pub at: f64,
    pub agent: AgentId,
    pub diagnosis: ConversationId,
    pub interaction: Option<AnomalousInteraction>,
    pub cause: Cause,
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSummary {
    pub agent: AgentId,
    pub conversation: ConversationId,
    pub closed_at: f64,
    pub replies: Vec<ProbeReply>,
    pub refusals: Vec<AgentId>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    Outcome(DiagnosisOutcome),
    Remediation(RemediationEvent),
    ProbeClosed(ProbeSummary),
    /// A probe reply that arrived after its probe closed.
    LateReply { conversation: ConversationId, from: AgentId, at: f64 },
    Warning(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timer {
    pub at: f64,
    pub conversation: ConversationId,
}

#[derive(Debug, Default)]
pub struct Output {
    pub messages: Vec<Message>,
    pub timers: Vec<Timer>,
    pub records: Vec<Record>,
}

#[derive(Debug, Error)]
pub enum BehaviorError {
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{agent}: reply {reply} matches no pending request")]
    UnmatchedReply { agent: AgentId, reply: MessageId },
    #[error("{agent}: unexpected {performative} in conversation {conversation}")]
    Unexpected {
        agent: AgentId,
        performative: Performative,
        conversation: ConversationId,
    },
}

#[derive(Debug, Clone)]
enum Step {
    Idle,
    Probing {
        conversation: ConversationId,
        interaction: AnomalousInteraction,
        mitigation: Option<Mitigation>,
    },
    AwaitingSuspect {
        conversation: ConversationId,
        interaction: AnomalousInteraction,
        mitigation: Option<Mitigation>,
        give_up_at: f64,
    },
}

#[derive(Debug, Clone)]
struct Diagnosis {
    notifier: AgentId,
    feature: String,
    violated: ConversationId,
    queue: VecDeque<AnomalousInteraction>,
    next_step: usize,
    normality_sent: bool,
    step: Step,
}

#[derive(Debug, Clone)]
pub struct Agent {
    pub id: AgentId,
    pub role: Role,
    pub services: BTreeMap<ServiceId, ServiceSpec>,
    pub requirements: QualityRequirement,
    pub bindings: BTreeMap<ServiceId, Binding>,
    pub strategy: Strategy,
    pub traces: TraceStore,
    sent_at: HashMap<MessageId, f64>,
    conversations: BTreeMap<ConversationId, ConversationState>,
    diagnoses: BTreeMap<ConversationId, Diagnosis>,
    // opened conversation -> diagnosis waiting on it
    waiting: BTreeMap<ConversationId, ConversationId>,
}

impl Agent {
    pub fn new(id: AgentId, role: Role, strategy: Strategy) -> Self {
        Self {
            id,
            role,
            services: BTreeMap::new(),
            requirements: QualityRequirement::new(),
            bindings: BTreeMap::new(),
            strategy,
            traces: TraceStore::new(),
            sent_at: HashMap::new(),
            conversations: BTreeMap::new(),
            diagnoses: BTreeMap::new(),
            waiting: BTreeMap::new(),
        }
    }

    pub fn with_service(mut self, s: ServiceId, spec: ServiceSpec) -> Self {
        self.services.insert(s, spec);
        self
    }

    pub fn with_binding(mut self, b: Binding) -> Self {
        self.bindings.insert(b.service.clone(), b);
        self
    }

    /// Diagnoses still in progress (suspended on a probe or a suspect).
    pub fn open_diagnoses(&self) -> usize {
        self.diagnoses.len()
    }

    pub fn conversation(&self, id: ConversationId) -> Option<&ConversationState> {
        self.conversations.get(&id)
    }

    /// Records the pending trace for an outgoing service request.
    pub fn client_on_request_sent(&mut self, m: &Message, now: f64) -> Result<(), TraceError> {
        self.traces.create_trace(m.clone())?;
        self.sent_at.insert(m.id_m, now);
        Ok(())
    }

    /// Completes the trace for `reply` and notifies the provider once per
    /// violated feature. Returns the request id the reply answered and the
    /// notifications to send.
    pub fn client_on_reply(
        &mut self,
        reply: &Message,
        now: f64,
        ids: &mut IdSource,
    ) -> Result<(MessageId, Vec<Message>), BehaviorError> {
        let unmatched = || BehaviorError::UnmatchedReply {
            agent: self.id.clone(),
            reply: reply.id_m,
        };
        let service = reply.service.as_ref().ok_or_else(unmatched)?;
        let id_m = self
            .traces
            .pending_request(reply.id_c, &reply.sender, service)
            .ok_or_else(unmatched)?;
        let sent = self.sent_at.remove(&id_m).ok_or_else(unmatched)?;
        let measured: Measurements = [(RESPONSE_TIME.to_string(), now - sent)].into_iter().collect();
        let violated = self.requirements.violated(&measured)?;
        self.traces.update_trace(reply.id_c, id_m, measured, now)?;

        let mut out = Vec::new();
        for feature in violated {
            let conversation = ids.conversation();
            let m = make_message(
                ids,
                Performative::InformAbnormality,
                self.id.clone(),
                Receiver::Agent(reply.sender.clone()),
                conversation,
                None,
                Payload::InformAbnormality {
                    feature,
                    conversation: reply.id_c,
                    message: None,
                },
            )?;
            self.open(&m, now)?;
            out.push(m);
        }
        Ok((id_m, out))
    }

    fn open(&mut self, m: &Message, now: f64) -> Result<(), ProtocolError> {
        let st = ConversationState::open(m, now, ProbeLimits::default())?;
        self.conversations.insert(m.id_c, st);
        Ok(())
    }

    /// Answer to REQUEST_PROBABILITY(suspect, s, q) from `requester`.
    /// `None` when this agent is the suspect or the requester.
    pub fn compute_probability(
        &self,
        suspect: &AgentId,
        service: &ServiceId,
        feature: &str,
        requester: &AgentId,
        now: f64,
    ) -> Option<Payload> {
        if &self.id == suspect || &self.id == requester {
            return None;
        }
        let (values, times) = self.traces.get_series(service, suspect, feature, now);
        if values.is_empty() {
            return Some(Payload::RefuseProbability);
        }
        let prob = Sample::new(values, times)
            .and_then(|s| anomaly_probability(&s))
            .ok()?;
        Some(Payload::InformProbability { prob })
    }

    /// Handles every message except service requests and replies.
    pub fn handle_control(
        &mut self,
        msg: &Message,
        ctx: &mut Ctx<'_>,
        hooks: &mut dyn RemediationHooks,
    ) -> Result<Output, BehaviorError> {
        let mut out = Output::default();
        match &msg.payload {
            Payload::InformAbnormality { .. } => self.strategy_dispatch(msg, ctx, hooks, &mut out)?,
            Payload::RequestProbability {
                suspect,
                service,
                feature,
            } => {
                if let Some(payload) =
                    self.compute_probability(suspect, service, feature, &msg.sender, ctx.now)
                {
                    let p = payload.performative();
                    out.messages.push(make_message(
                        ctx.ids,
                        p,
                        self.id.clone(),
                        Receiver::Agent(msg.sender.clone()),
                        msg.id_c,
                        None,
                        payload,
                    )?);
                }
            }
            Payload::InformNormality
            | Payload::InformProbability { .. }
            | Payload::RefuseProbability => self.on_reply(msg, ctx, hooks, &mut out)?,
            Payload::RequestService { .. } | Payload::InformService { .. } => {
                return Err(BehaviorError::Unexpected {
                    agent: self.id.clone(),
                    performative: msg.performative,
                    conversation: msg.id_c,
                })
            }
        }
        Ok(out)
    }

    /// Reaction to INFORM_ABNORMALITY according to the agent's strategy.
    pub fn strategy_dispatch(
        &mut self,
        notice: &Message,
        ctx: &mut Ctx<'_>,
        hooks: &mut dyn RemediationHooks,
        out: &mut Output,
    ) -> Result<(), BehaviorError> {
        if self.strategy == Strategy::Passive || self.role != Role::Provider {
            return Ok(());
        }
        let Payload::InformAbnormality {
            feature,
            conversation,
            ..
        } = &notice.payload
        else {
            return Ok(());
        };
        self.internal_verification(notice, feature, *conversation, ctx, hooks, out)
    }

    fn internal_verification(
        &mut self,
        notice: &Message,
        feature: &str,
        violated: ConversationId,
        ctx: &mut Ctx<'_>,
        hooks: &mut dyn RemediationHooks,
        out: &mut Output,
    ) -> Result<(), BehaviorError> {
        let key = notice.id_c;
        let anomalous = classify_interactions(&self.traces, feature, violated);
        if anomalous.is_empty() {
            if self.traces.get_traces(violated).is_empty() && !self.bindings.is_empty() {
                out.records.push(Record::Warning(format!(
                    "{}: no sub-interactions recorded for conversation {}; treating as internal",
                    self.id, violated
                )));
            }
            let ack = hooks.self_healing(&self.id);
            self.remediation(out, ctx.now, key, 0, RemediationAction::SelfHealing(ack));
            self.send_normality(&notice.sender, key, ctx, out)?;
            out.records.push(Record::Outcome(DiagnosisOutcome {
                at: ctx.now,
                agent: self.id.clone(),
                diagnosis: key,
                interaction: None,
                cause: Cause::Internal,
                score: None,
            }));
            return Ok(());
        }
        self.diagnoses.insert(
            key,
            Diagnosis {
                notifier: notice.sender.clone(),
                feature: feature.to_string(),
                violated,
                queue: anomalous.into(),
                next_step: 0,
                normality_sent: false,
                step: Step::Idle,
            },
        );
        self.continue_diagnosis(key, ctx, hooks, out)
    }

    fn send_normality(
        &mut self,
        to: &AgentId,
        conversation: ConversationId,
        ctx: &mut Ctx<'_>,
        out: &mut Output,
    ) -> Result<(), BehaviorError> {
        out.messages.push(make_message(
            ctx.ids,
            Performative::InformNormality,
            self.id.clone(),
            Receiver::Agent(to.clone()),
            conversation,
            None,
            Payload::InformNormality,
        )?);
        Ok(())
    }

    fn remediation(&self, out: &mut Output, at: f64, diagnosis: ConversationId, step: usize, action: RemediationAction) {
        out.records.push(Record::Remediation(RemediationEvent {
            at,
            agent: self.id.clone(),
            diagnosis,
            step,
            action,
        }));
    }

    // Runs the loop over anomalous interactions until it has to wait for a
    // probe or a suspect, or runs out of work.
    fn continue_diagnosis(
        &mut self,
        key: ConversationId,
        ctx: &mut Ctx<'_>,
        hooks: &mut dyn RemediationHooks,
        out: &mut Output,
    ) -> Result<(), BehaviorError> {
        loop {
            let Some(diag) = self.diagnoses.get_mut(&key) else {
                return Ok(());
            };
            let Some(ia) = diag.queue.pop_front() else {
                self.diagnoses.remove(&key);
                return Ok(());
            };
            let step = diag.next_step;
            diag.next_step += 1;
            let notifier = diag.notifier.clone();
            let feature = diag.feature.clone();
            let first = !diag.normality_sent;
            diag.normality_sent = true;

            let mitigation = match self.bindings.get_mut(&ia.service) {
                Some(b) => hooks.mitigate(&self.id, b, &ia.provider),
                None => None,
            };
            self.remediation(
                out,
                ctx.now,
                key,
                step,
                RemediationAction::Mitigate {
                    service: ia.service.clone(),
                    suspect: ia.provider.clone(),
                    installed: mitigation.as_ref().map(|m| m.installed.clone()),
                },
            );
            if first {
                self.send_normality(&notifier, key, ctx, out)?;
            }
            if self.strategy != Strategy::Cooperative {
                continue;
            }

            let conversation = ctx.ids.conversation();
            let probe = make_message(
                ctx.ids,
                Performative::RequestProbability,
                self.id.clone(),
                Receiver::Broadcast,
                conversation,
                None,
                Payload::RequestProbability {
                    suspect: ia.provider.clone(),
                    service: ia.service.clone(),
                    feature,
                },
            )?;
            let st = ConversationState::open(&probe, ctx.now, ctx.settings.probe)?;
            if let Phase::ProbeCollecting {
                deadline: Some(d), ..
            } = st.phase
            {
                out.timers.push(Timer {
                    at: d,
                    conversation: probe.id_c,
                });
            }
            self.conversations.insert(probe.id_c, st);
            self.waiting.insert(probe.id_c, key);
            self.diagnoses.get_mut(&key).unwrap().step = Step::Probing {
                conversation: probe.id_c,
                interaction: ia,
                mitigation,
            };
            out.messages.push(probe);
            return Ok(());
        }
    }

    fn on_reply(
        &mut self,
        msg: &Message,
        ctx: &mut Ctx<'_>,
        hooks: &mut dyn RemediationHooks,
        out: &mut Output,
    ) -> Result<(), BehaviorError> {
        let Some(st) = self.conversations.get(&msg.id_c) else {
            return Err(BehaviorError::Unexpected {
                agent: self.id.clone(),
                performative: msg.performative,
                conversation: msg.id_c,
            });
        };
        let was_open = st.is_probe_open();
        let (next, effect) = st.advance(Event::Received(msg), ctx.now)?;
        if effect == Effect::Discarded {
            out.records.push(Record::LateReply {
                conversation: msg.id_c,
                from: msg.sender.clone(),
                at: ctx.now,
            });
        }
        let phase = next.phase.clone();
        self.conversations.insert(msg.id_c, next);
        match phase {
            Phase::ProbeClosed if was_open => self.finish_probe(msg.id_c, ctx, hooks, out),
            Phase::NormalityReceived => self.suspect_normalized(msg.id_c, ctx, hooks, out),
            _ => Ok(()),
        }
    }

    /// Fires a timer previously returned in [`Output::timers`].
    pub fn on_timer(
        &mut self,
        conversation: ConversationId,
        ctx: &mut Ctx<'_>,
        hooks: &mut dyn RemediationHooks,
    ) -> Result<Output, BehaviorError> {
        let mut out = Output::default();
        if let Some(st) = self.conversations.get(&conversation) {
            if st.is_probe_open() {
                let (next, _) = st.advance(Event::Tick, ctx.now)?;
                let closed = !next.is_probe_open();
                self.conversations.insert(conversation, next);
                if closed {
                    self.finish_probe(conversation, ctx, hooks, &mut out)?;
                }
                return Ok(out);
            }
        }
        let Some(&key) = self.waiting.get(&conversation) else {
            return Ok(out);
        };
        let Some(diag) = self.diagnoses.get_mut(&key) else {
            return Ok(out);
        };
        if let Step::AwaitingSuspect {
            conversation: c,
            give_up_at,
            ..
        } = &diag.step
        {
            if *c == conversation && ctx.now >= *give_up_at {
                diag.step = Step::Idle;
                self.waiting.remove(&conversation);
                let step = diag.next_step - 1;
                self.remediation(&mut out, ctx.now, key, step, RemediationAction::Resolved(Resolution::GaveUp));
                self.continue_diagnosis(key, ctx, hooks, &mut out)?;
            }
        }
        Ok(out)
    }

    fn finish_probe(
        &mut self,
        conversation: ConversationId,
        ctx: &mut Ctx<'_>,
        hooks: &mut dyn RemediationHooks,
        out: &mut Output,
    ) -> Result<(), BehaviorError> {
        let st = &self.conversations[&conversation];
        let score = external_verification_score(
            st.replies
                .iter()
                .map(|r| (r.prob, ctx.proximity.similarity(&self.id, &r.agent))),
        );
        out.records.push(Record::ProbeClosed(ProbeSummary {
            agent: self.id.clone(),
            conversation,
            closed_at: ctx.now,
            replies: st.replies.clone(),
            refusals: st.refusals.clone(),
            score,
        }));
        let Some(key) = self.waiting.remove(&conversation) else {
            return Ok(());
        };
        let Some(diag) = self.diagnoses.get_mut(&key) else {
            return Ok(());
        };
        let Step::Probing {
            conversation: probing,
            interaction,
            mitigation,
        } = std::mem::replace(&mut diag.step, Step::Idle)
        else {
            return Ok(());
        };
        debug_assert_eq!(probing, conversation);
        let step = diag.next_step - 1;
        let cause = cause_from_score(score, ctx.settings.threshold);
        out.records.push(Record::Outcome(DiagnosisOutcome {
            at: ctx.now,
            agent: self.id.clone(),
            diagnosis: key,
            interaction: Some(interaction.clone()),
            cause,
            score: Some(score),
        }));
        match cause {
            Cause::Provider => {
                let feature = diag.feature.clone();
                let violated = diag.violated;
                let conversation = ctx.ids.conversation();
                let notice = make_message(
                    ctx.ids,
                    Performative::InformAbnormality,
                    self.id.clone(),
                    Receiver::Agent(interaction.provider.clone()),
                    conversation,
                    None,
                    Payload::InformAbnormality {
                        feature,
                        conversation: violated,
                        message: Some(interaction.id_m),
                    },
                )?;
                let give_up_at = ctx.now + ctx.settings.give_up_ms;
                self.open(&notice, ctx.now)?;
                self.waiting.insert(notice.id_c, key);
                out.timers.push(Timer {
                    at: give_up_at,
                    conversation: notice.id_c,
                });
                self.diagnoses.get_mut(&key).unwrap().step = Step::AwaitingSuspect {
                    conversation: notice.id_c,
                    interaction,
                    mitigation,
                    give_up_at,
                };
                out.messages.push(notice);
                Ok(())
            }
            _ => {
                let ack = hooks.repair_link(&self.id, &interaction.provider);
                self.remediation(
                    out,
                    ctx.now,
                    key,
                    step,
                    RemediationAction::RepairLink {
                        peer: interaction.provider.clone(),
                        ack,
                    },
                );
                self.remediation(out, ctx.now, key, step, RemediationAction::Resolved(Resolution::LinkRepaired));
                self.undo(key, step, &interaction, mitigation, ctx.now, hooks, out);
                self.continue_diagnosis(key, ctx, hooks, out)
            }
        }
    }

    fn suspect_normalized(
        &mut self,
        conversation: ConversationId,
        ctx: &mut Ctx<'_>,
        hooks: &mut dyn RemediationHooks,
        out: &mut Output,
    ) -> Result<(), BehaviorError> {
        let Some(key) = self.waiting.remove(&conversation) else {
            return Ok(());
        };
        let Some(diag) = self.diagnoses.get_mut(&key) else {
            return Ok(());
        };
        let Step::AwaitingSuspect {
            interaction,
            mitigation,
            ..
        } = std::mem::replace(&mut diag.step, Step::Idle)
        else {
            return Ok(());
        };
        let step = diag.next_step - 1;
        self.remediation(out, ctx.now, key, step, RemediationAction::Resolved(Resolution::Normalized));
        self.undo(key, step, &interaction, mitigation, ctx.now, hooks, out);
        self.continue_diagnosis(key, ctx, hooks, out)
    }

    #[allow(clippy::too_many_arguments)]
    fn undo(
        &mut self,
        key: ConversationId,
        step: usize,
        ia: &AnomalousInteraction,
        mitigation: Option<Mitigation>,
        now: f64,
        hooks: &mut dyn RemediationHooks,
        out: &mut Output,
    ) {
        let ack = match (&mitigation, self.bindings.get_mut(&ia.service)) {
            (Some(m), Some(b)) => hooks.undo(&self.id, b, m),
            _ => Ack::NoOp,
        };
        self.remediation(
            out,
            now,
            key,
            step,
            RemediationAction::Undo {
                service: ia.service.clone(),
                ack,
            },
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{parse_constraint, InteractionTrace};
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest, ProptestConfig};

    struct Hops(BTreeMap<(String, String), usize>);

    impl Proximity for Hops {
        fn similarity(&self, a: &AgentId, b: &AgentId) -> f64 {
            let k = (a.to_string(), b.to_string());
            let r = (b.to_string(), a.to_string());
            similarity_from_hops(self.0.get(&k).or(self.0.get(&r)).copied())
        }
    }

    fn hops(pairs: &[(&str, &str, usize)]) -> Hops {
        Hops(
            pairs
                .iter()
                .map(|(a, b, d)| ((a.to_string(), b.to_string()), *d))
                .collect(),
        )
    }

    #[derive(Default)]
    struct Recording {
        healed: Vec<AgentId>,
        repaired: Vec<(AgentId, AgentId)>,
        mitigated: usize,
        undone: usize,
    }

    impl RemediationHooks for Recording {
        fn self_healing(&mut self, a: &AgentId) -> Ack {
            self.healed.push(a.clone());
            Ack::Done
        }
        fn mitigate(&mut self, _: &AgentId, b: &mut Binding, s: &AgentId) -> Option<Mitigation> {
            self.mitigated += 1;
            b.swap_out(s)
        }
        fn repair_link(&mut self, a: &AgentId, p: &AgentId) -> Ack {
            self.repaired.push((a.clone(), p.clone()));
            Ack::Done
        }
        fn undo(&mut self, _: &AgentId, b: &mut Binding, m: &Mitigation) -> Ack {
            self.undone += 1;
            b.restore(m)
        }
    }

    fn req(ids: &mut IdSource, from: &str, to: &str, s: &str, c: ConversationId) -> Message {
        make_message(
            ids,
            Performative::RequestService,
            from.into(),
            Receiver::Agent(to.into()),
            c,
            Some(s.into()),
            Payload::RequestService { args: String::new() },
        )
        .unwrap()
    }

    fn inform(ids: &mut IdSource, from: &str, to: &str, s: &str, c: ConversationId) -> Message {
        make_message(
            ids,
            Performative::InformService,
            from.into(),
            Receiver::Agent(to.into()),
            c,
            Some(s.into()),
            Payload::InformService {
                output: String::new(),
                cost: 1.0,
            },
        )
        .unwrap()
    }

    fn rt(v: f64) -> Measurements {
        [(RESPONSE_TIME.to_string(), v)].into_iter().collect()
    }

    // Provider p_a bound to b -> p_b (alt p_b2) and c -> p_c, with history.
    fn provider(strategy: Strategy, ids: &mut IdSource, b_hist: &[f64], c_hist: &[f64]) -> (Agent, ConversationId) {
        let mut a = Agent::new("p_a".into(), Role::Provider, strategy)
            .with_binding(Binding::new("b".into(), "p_b".into(), vec!["p_b2".into()]))
            .with_binding(Binding::new("c".into(), "p_c".into(), vec![]));
        let mut t = 1.0;
        let mut last = ConversationId(0);
        let n = b_hist.len().max(c_hist.len());
        for i in 0..n {
            let conv = ids.conversation();
            last = conv;
            for (s, p, hist) in [("b", "p_b", b_hist), ("c", "p_c", c_hist)] {
                if let Some(v) = hist.get(i) {
                    let m = req(ids, "p_a", p, s, conv);
                    a.traces.create_trace(m.clone()).unwrap();
                    a.traces.update_trace(conv, m.id_m, rt(*v), t).unwrap();
                    t += 1.0;
                }
            }
        }
        (a, last)
    }

    fn notice(ids: &mut IdSource, to: &str, violated: ConversationId) -> Message {
        let c = ids.conversation();
        make_message(
            ids,
            Performative::InformAbnormality,
            "c".into(),
            Receiver::Agent(to.into()),
            c,
            None,
            Payload::InformAbnormality {
                feature: RESPONSE_TIME.into(),
                conversation: violated,
                message: None,
            },
        )
        .unwrap()
    }

    fn run(
        agent: &mut Agent,
        msg: &Message,
        ids: &mut IdSource,
        now: f64,
        hooks: &mut dyn RemediationHooks,
    ) -> Output {
        let prox = hops(&[("p_a", "n1", 1), ("p_a", "n2", 2)]);
        let settings = DiagnosisSettings::default();
        let mut ctx = Ctx {
            now,
            ids,
            proximity: &prox,
            settings: &settings,
        };
        agent.handle_control(msg, &mut ctx, hooks).unwrap()
    }

    #[test]
    fn client_tracing_and_notification() {
        let mut ids = IdSource::new();
        let mut c = Agent::new("c".into(), Role::Client, Strategy::Cooperative)
            .with_binding(Binding::new("a".into(), "p_a".into(), vec![]));
        c.requirements
            .insert(
                RESPONSE_TIME,
                parse_constraint("(response_time <= 15)").unwrap(),
                &[RESPONSE_TIME],
            )
            .unwrap();
        let conv = ids.conversation();
        let m0 = req(&mut ids, "c", "p_a", "a", conv);
        c.client_on_request_sent(&m0, 5.0).unwrap();
        let (id, notes) = c
            .client_on_reply(&inform(&mut ids, "p_a", "c", "a", conv), 12.0, &mut ids)
            .unwrap();
        assert_eq!(id, m0.id_m);
        assert!(notes.is_empty());

        let conv = ids.conversation();
        let m1 = req(&mut ids, "c", "p_a", "a", conv);
        c.client_on_request_sent(&m1, 20.0).unwrap();
        let (_, notes) = c
            .client_on_reply(&inform(&mut ids, "p_a", "c", "a", conv), 36.0, &mut ids)
            .unwrap();
        assert_eq!(notes.len(), 1);
        assert_eq!(notes[0].performative, Performative::InformAbnormality);
        assert_eq!(notes[0].receiver, Receiver::Agent("p_a".into()));
        assert!(matches!(
            &notes[0].payload,
            Payload::InformAbnormality { conversation, message: None, .. } if *conversation == conv
        ));

        // a second reply for the same request matches nothing
        assert!(matches!(
            c.client_on_reply(&inform(&mut ids, "p_a", "c", "a", conv), 40.0, &mut ids),
            Err(BehaviorError::UnmatchedReply { .. })
        ));
    }

    #[test]
    fn two_violated_features_two_notices() {
        let mut ids = IdSource::new();
        let mut c = Agent::new("c".into(), Role::Client, Strategy::Passive);
        // two requirement entries, both constraining response time
        c.requirements
            .insert(RESPONSE_TIME, parse_constraint("(response_time <= 15)").unwrap(), &[])
            .unwrap();
        c.requirements
            .insert("latency_budget", parse_constraint("(response_time < 10)").unwrap(), &[RESPONSE_TIME])
            .unwrap();
        let conv = ids.conversation();
        let m = req(&mut ids, "c", "p_a", "a", conv);
        c.client_on_request_sent(&m, 0.0).unwrap();
        let (_, notes) = c
            .client_on_reply(&inform(&mut ids, "p_a", "c", "a", conv), 16.0, &mut ids)
            .unwrap();
        let feats: Vec<_> = notes
            .iter()
            .map(|n| match &n.payload {
                Payload::InformAbnormality { feature, .. } => feature.clone(),
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(feats, vec!["latency_budget".to_string(), RESPONSE_TIME.to_string()]);
    }

    #[test]
    fn internal_cause_without_sub_interactions() {
        let mut ids = IdSource::new();
        let mut leaf = Agent::new("p_j".into(), Role::Provider, Strategy::Cooperative);
        let n = notice(&mut ids, "p_j", ConversationId(77));
        let mut hooks = Recording::default();
        let out = run(&mut leaf, &n, &mut ids, 10.0, &mut hooks);
        assert_eq!(hooks.healed, vec![AgentId::new("p_j")]);
        assert_eq!(out.messages.len(), 1);
        assert_eq!(out.messages[0].performative, Performative::InformNormality);
        assert_eq!(out.messages[0].id_c, n.id_c);
        assert!(out.records.iter().any(|r| matches!(r, Record::Outcome(o) if o.cause == Cause::Internal)));
    }

    #[test]
    fn worked_list_flags_external_cause() {
        let mut ids = IdSource::new();
        let (mut a, last) = provider(
            Strategy::Remedial,
            &mut ids,
            &[8.0, 7.0, 11.0, 8.0, 8.0, 9.0, 47.0],
            &[],
        );
        let ia = classify_interactions(&a.traces, RESPONSE_TIME, last);
        assert_eq!(ia.len(), 1);
        assert_eq!(ia[0].provider, AgentId::new("p_b"));

        let n = notice(&mut ids, "p_a", last);
        let mut hooks = Recording::default();
        let out = run(&mut a, &n, &mut ids, 100.0, &mut hooks);
        assert_eq!(a.bindings[&ServiceId::new("b")].current, AgentId::new("p_b2"));
        // remedial: normality, no probe, no undo
        let perf: Vec<_> = out.messages.iter().map(|m| m.performative).collect();
        assert_eq!(perf, vec![Performative::InformNormality]);
        assert_eq!(hooks.undone, 0);
        assert_eq!(a.open_diagnoses(), 0);
    }

    #[test]
    fn only_the_anomalous_sub_service_is_processed() {
        let mut ids = IdSource::new();
        let b = [8.0, 7.0, 11.0, 8.0, 8.0, 9.0, 47.0];
        let c = [5.0, 6.0, 5.0, 6.0, 5.0, 6.0, 5.5];
        let (a, last) = provider(Strategy::Cooperative, &mut ids, &b, &c);
        let ia = classify_interactions(&a.traces, RESPONSE_TIME, last);
        assert_eq!(ia.len(), 1);
        assert_eq!(ia[0].service, ServiceId::new("b"));
        // oracle: re-run is_anomalous per trace
        for t in a.traces.get_traces(last) {
            let h = a.traces.get_measurements(t.service(), t.provider(), RESPONSE_TIME, t.time.unwrap());
            assert_eq!(is_anomalous(&h).unwrap(), t.service().as_str() == "b");
        }
    }

    #[test]
    fn passive_ignores_notices() {
        let mut ids = IdSource::new();
        let (mut a, last) = provider(Strategy::Passive, &mut ids, &[8.0, 7.0, 11.0, 8.0, 8.0, 9.0, 47.0], &[]);
        let n = notice(&mut ids, "p_a", last);
        let mut hooks = Recording::default();
        let out = run(&mut a, &n, &mut ids, 100.0, &mut hooks);
        assert!(out.messages.is_empty() && out.records.is_empty());
        assert_eq!(hooks.mitigated, 0);
    }

    fn answer(ids: &mut IdSource, from: &str, probe: &Message, prob: Option<f64>) -> Message {
        let payload = match prob {
            Some(prob) => Payload::InformProbability { prob },
            None => Payload::RefuseProbability,
        };
        make_message(
            ids,
            payload.performative(),
            from.into(),
            Receiver::Agent(probe.sender.clone()),
            probe.id_c,
            None,
            payload,
        )
        .unwrap()
    }

    // Full cooperative sequence: mitigate, normality, probe, verdict,
    // suspect notice, suspect normality, undo.
    #[test]
    fn cooperative_provider_branch() {
        let mut ids = IdSource::new();
        let (mut a, last) = provider(Strategy::Cooperative, &mut ids, &[8.0, 7.0, 11.0, 8.0, 8.0, 9.0, 47.0], &[]);
        let n = notice(&mut ids, "p_a", last);
        let mut hooks = Recording::default();
        let out = run(&mut a, &n, &mut ids, 100.0, &mut hooks);
        let perf: Vec<_> = out.messages.iter().map(|m| m.performative).collect();
        assert_eq!(perf, vec![Performative::InformNormality, Performative::RequestProbability]);
        assert_eq!(out.timers.len(), 1);
        assert_eq!(out.timers[0].at, 5100.0);
        let probe = out.messages[1].clone();

        let out = run(&mut a, &answer(&mut ids, "n1", &probe, Some(0.9)), &mut ids, 200.0, &mut hooks);
        assert!(out.messages.is_empty());
        let out = run(&mut a, &answer(&mut ids, "n2", &probe, Some(0.3)), &mut ids, 300.0, &mut hooks);
        assert!(out.messages.is_empty());

        let prox = hops(&[("p_a", "n1", 1), ("p_a", "n2", 2)]);
        let settings = DiagnosisSettings::default();
        let mut ctx = Ctx {
            now: 5100.0,
            ids: &mut ids,
            proximity: &prox,
            settings: &settings,
        };
        let out = a.on_timer(probe.id_c, &mut ctx, &mut hooks).unwrap();
        let score = out.records.iter().find_map(|r| match r {
            Record::ProbeClosed(p) => Some(p.score),
            _ => None,
        });
        assert!((score.unwrap() - 0.7).abs() < 1e-12);
        assert_eq!(out.messages.len(), 1);
        let suspect_notice = out.messages[0].clone();
        assert_eq!(suspect_notice.receiver, Receiver::Agent("p_b".into()));
        assert!(matches!(
            suspect_notice.payload,
            Payload::InformAbnormality { message: Some(_), .. }
        ));

        // late probe reply is discarded
        let out = run(&mut a, &answer(&mut ids, "n3", &probe, Some(1.0)), &mut ids, 5200.0, &mut hooks);
        assert!(matches!(out.records[0], Record::LateReply { .. }));

        let norm = make_message(
            &mut ids,
            Performative::InformNormality,
            "p_b".into(),
            Receiver::Agent("p_a".into()),
            suspect_notice.id_c,
            None,
            Payload::InformNormality,
        )
        .unwrap();
        run(&mut a, &norm, &mut ids, 6000.0, &mut hooks);
        assert_eq!(hooks.undone, 1);
        assert_eq!(a.bindings[&ServiceId::new("b")].current, AgentId::new("p_b"));
        assert_eq!(a.open_diagnoses(), 0);
    }

    #[test]
    fn cooperative_link_branch_without_replies() {
        let mut ids = IdSource::new();
        let (mut a, last) = provider(Strategy::Cooperative, &mut ids, &[8.0, 7.0, 11.0, 8.0, 8.0, 9.0, 47.0], &[]);
        let n = notice(&mut ids, "p_a", last);
        let mut hooks = Recording::default();
        let out = run(&mut a, &n, &mut ids, 0.0, &mut hooks);
        let probe = out.messages[1].clone();
        let prox = hops(&[]);
        let settings = DiagnosisSettings::default();
        let mut ctx = Ctx {
            now: 5000.0,
            ids: &mut ids,
            proximity: &prox,
            settings: &settings,
        };
        let out = a.on_timer(probe.id_c, &mut ctx, &mut hooks).unwrap();
        assert!(out.messages.is_empty());
        assert_eq!(hooks.repaired, vec![(AgentId::new("p_a"), AgentId::new("p_b"))]);
        assert_eq!(hooks.undone, 1);
        assert_eq!(a.bindings[&ServiceId::new("b")].current, AgentId::new("p_b"));
    }

    #[test]
    fn give_up_keeps_mitigation() {
        let mut ids = IdSource::new();
        let (mut a, last) = provider(Strategy::Cooperative, &mut ids, &[8.0, 7.0, 11.0, 8.0, 8.0, 9.0, 47.0], &[]);
        let mut hooks = Recording::default();
        let out = run(&mut a, &notice(&mut ids, "p_a", last), &mut ids, 0.0, &mut hooks);
        let probe = out.messages[1].clone();
        run(&mut a, &answer(&mut ids, "n1", &probe, Some(0.95)), &mut ids, 10.0, &mut hooks);
        let prox = hops(&[("p_a", "n1", 1)]);
        let settings = DiagnosisSettings::default();
        let mut ctx = Ctx { now: 5000.0, ids: &mut ids, proximity: &prox, settings: &settings };
        let out = a.on_timer(probe.id_c, &mut ctx, &mut hooks).unwrap();
        let t = out.timers[0];
        assert_eq!(t.at, 55_000.0);
        ctx.now = t.at;
        let out = a.on_timer(t.conversation, &mut ctx, &mut hooks).unwrap();
        assert!(out.records.iter().any(|r| matches!(
            r,
            Record::Remediation(RemediationEvent { action: RemediationAction::Resolved(Resolution::GaveUp), .. })
        )));
        assert_eq!(hooks.undone, 0);
        assert_eq!(a.bindings[&ServiceId::new("b")].current, AgentId::new("p_b2"));
    }

    #[test]
    fn compute_probability_cases() {
        let mut ids = IdSource::new();
        let mut n = Agent::new("n".into(), Role::Background, Strategy::Cooperative);
        let (b, p_b) = (ServiceId::new("b"), AgentId::new("p_b"));
        assert_eq!(
            n.compute_probability(&p_b, &b, RESPONSE_TIME, &"p_a".into(), 100.0),
            Some(Payload::RefuseProbability)
        );
        let values = [8.0, 10.0, 9.0, 9.0, 11.0, 12.0, 10.0, 9.0, 12.0, 20.0, 43.0];
        for (i, v) in values.iter().enumerate() {
            let conv = ids.conversation();
            let m = req(&mut ids, "n", "p_b", "b", conv);
            n.traces.create_trace(m.clone()).unwrap();
            n.traces.update_trace(conv, m.id_m, rt(*v), 5.0 * (i + 1) as f64).unwrap();
        }
        let Some(Payload::InformProbability { prob }) =
            n.compute_probability(&p_b, &b, RESPONSE_TIME, &"p_a".into(), 100.0)
        else {
            panic!()
        };
        assert!((prob - 0.484513441180501).abs() < 1e-6, "{prob}");
        // the suspect and the requester stay silent
        assert_eq!(n.compute_probability(&"n".into(), &b, RESPONSE_TIME, &"p_a".into(), 100.0), None);
        assert_eq!(n.compute_probability(&p_b, &b, RESPONSE_TIME, &"n".into(), 100.0), None);
        // cutoff excludes later evidence: one measurement -> degenerate -> 0
        assert_eq!(
            n.compute_probability(&p_b, &b, RESPONSE_TIME, &"p_a".into(), 5.0),
            Some(Payload::InformProbability { prob: 0.0 })
        );
    }

    #[test]
    fn score_examples() {
        assert_eq!(external_verification_score([(0.8, 1.0)]), 0.8);
        assert_eq!(external_verification_score([(0.9, 1.0), (0.3, 0.5)]), 0.7);
        assert_eq!(external_verification_score(std::iter::empty()), 0.0);
        assert_eq!(cause_from_score(0.0, 0.5), Cause::Link);
        assert_eq!(cause_from_score(0.5, 0.5), Cause::Link);
        assert_eq!(cause_from_score(0.5 + f64::EPSILON, 0.5), Cause::Provider);
        assert_eq!(similarity_from_hops(Some(1)), 1.0);
        assert_eq!(similarity_from_hops(Some(2)), 0.5);
        assert_eq!(similarity_from_hops(Some(0)), 1.0);
        assert_eq!(similarity_from_hops(None), 0.0);
    }

    #[test]
    fn binding_mitigate_then_undo_restores() {
        let mut b = Binding::new("b".into(), "p_b".into(), vec!["p_b".into(), "p_b2".into()]);
        let before = b.clone();
        assert!(b.swap_out(&"p_x".into()).is_none());
        let m = b.swap_out(&"p_b".into()).unwrap();
        assert_eq!(b.current, AgentId::new("p_b2"));
        assert_eq!(b.restore(&m), Ack::Done);
        assert_eq!(b, before);
        assert_eq!(b.restore(&m), Ack::NoOp);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn score_scale_invariant_and_bounded(
            replies in prop::collection::vec((0.0f64..=1.0, 0.01f64..1.0), 1..8),
            k in 0.01f64..100.0,
            j in -20i32..20,
        ) {
            let s = external_verification_score(replies.iter().copied());
            // w * k rounds, so only approximately the same weights
            let scaled = external_verification_score(replies.iter().map(|(p, w)| (*p, w * k)));
            prop_assert!((s - scaled).abs() < 1e-9);
            // power-of-two scaling is exact in floating point
            let two_j = 2f64.powi(j);
            let exact = external_verification_score(replies.iter().map(|(p, w)| (*p, w * two_j)));
            prop_assert_eq!(s, exact);
            let lo = replies.iter().map(|r| r.0).fold(f64::INFINITY, f64::min);
            let hi = replies.iter().map(|r| r.0).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(s >= lo && s <= hi);
        }

        // Classification equals a brute-force re-evaluation over the store.
        #[test]
        fn classification_matches_brute_force(
            rows in prop::collection::vec((0usize..3, 1u32..60), 1..40),
        ) {
            let mut ids = IdSource::new();
            let mut store = TraceStore::new();
            let mut convs = Vec::new();
            for (i, (p, v)) in rows.iter().enumerate() {
                let conv = ConversationId((i / 3) as u64 + 1);
                convs.push(conv);
                let m = req(&mut ids, "me", &format!("p{p}"), &format!("s{p}"), conv);
                store.create_trace(m.clone()).unwrap();
                store.update_trace(conv, m.id_m, rt(*v as f64), (i + 1) as f64).unwrap();
            }
            for conv in convs {
                let got = classify_interactions(&store, RESPONSE_TIME, conv);
                let all: Vec<&InteractionTrace> = store.iter().collect();
                let expect: Vec<MessageId> = all.iter()
                    .filter(|t| t.message.id_c == conv)
                    .filter(|t| {
                        let hist: Vec<f64> = all.iter()
                            .filter(|u| u.provider() == t.provider() && u.time <= t.time)
                            .map(|u| u.measurement(RESPONSE_TIME).unwrap())
                            .collect();
                        is_anomalous(&hist).unwrap()
                    })
                    .map(|t| t.message.id_m)
                    .collect();
                prop_assert_eq!(got.iter().map(|a| a.id_m).collect::<Vec<_>>(), expect);
            }
        }
    }
}
