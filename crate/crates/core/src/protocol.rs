//! Performatives, payloads and the per-conversation state machine.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    AgentId, ConversationId, IdSource, Message, MessageId, MessageType, Receiver, ServiceId,
};

/// Default probe deadline, in simulation milliseconds.
pub const DEFAULT_PROBE_DEADLINE_MS: f64 = 5000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Performative {
    RequestService,
    InformService,
    InformAbnormality,
    InformNormality,
    RequestProbability,
    InformProbability,
    RefuseProbability,
}

impl Performative {
    pub const ALL: [Performative; 7] = [
        Performative::RequestService,
        Performative::InformService,
        Performative::InformAbnormality,
        Performative::InformNormality,
        Performative::RequestProbability,
        Performative::InformProbability,
        Performative::RefuseProbability,
    ];

    pub fn message_type(self) -> MessageType {
        match self {
            Performative::RequestService | Performative::RequestProbability => MessageType::Request,
            Performative::RefuseProbability => MessageType::Refuse,
            _ => MessageType::Inform,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Performative::RequestService => "REQUEST_SERVICE",
            Performative::InformService => "INFORM_SERVICE",
            Performative::InformAbnormality => "INFORM_ABNORMALITY",
            Performative::InformNormality => "INFORM_NORMALITY",
            Performative::RequestProbability => "REQUEST_PROBABILITY",
            Performative::InformProbability => "INFORM_PROBABILITY",
            Performative::RefuseProbability => "REFUSE_PROBABILITY",
        }
    }

    fn carries_service(self) -> bool {
        matches!(self, Performative::RequestService | Performative::InformService)
    }

    pub fn is_probe_reply(self) -> bool {
        matches!(
            self,
            Performative::InformProbability | Performative::RefuseProbability
        )
    }
}

impl fmt::Display for Performative {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    RequestService {
        args: String,
    },
    InformService {
        output: String,
        /// Accumulated cost of the delivery, including sub-services.
        cost: f64,
    },
    InformAbnormality {
        feature: String,
        /// The conversation in which the violation was observed.
        conversation: ConversationId,
        /// Set when a provider notifies a suspect about one request.
        message: Option<MessageId>,
    },
    InformNormality,
    RequestProbability {
        suspect: AgentId,
        service: ServiceId,
        feature: String,
    },
    InformProbability {
        prob: f64,
    },
    RefuseProbability,
}

impl Payload {
    pub fn performative(&self) -> Performative {
        match self {
            Payload::RequestService { .. } => Performative::RequestService,
            Payload::InformService { .. } => Performative::InformService,
            Payload::InformAbnormality { .. } => Performative::InformAbnormality,
            Payload::InformNormality => Performative::InformNormality,
            Payload::RequestProbability { .. } => Performative::RequestProbability,
            Payload::InformProbability { .. } => Performative::InformProbability,
            Payload::RefuseProbability => Performative::RefuseProbability,
        }
    }
}

impl fmt::Display for Payload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Payload::RequestService { args } if args.is_empty() => f.write_str("-"),
            Payload::RequestService { args } => write!(f, "args={args}"),
            Payload::InformService { output, cost } => write!(f, "output={output};cost={cost}"),
            Payload::InformAbnormality {
                feature,
                conversation,
                message,
            } => {
                write!(f, "feature={feature};id_c={}", conversation.0)?;
                if let Some(m) = message {
                    write!(f, ";id_m={}", m.0)?;
                }
                Ok(())
            }
            Payload::RequestProbability {
                suspect,
                service,
                feature,
            } => write!(f, "suspect={suspect};service={service};feature={feature}"),
            Payload::InformProbability { prob } => write!(f, "prob={prob}"),
            Payload::InformNormality | Payload::RefuseProbability => f.write_str("-"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProtocolError {
    #[error("{performative} cannot carry a {payload} payload")]
    PayloadMismatch {
        performative: Performative,
        payload: Performative,
    },
    #[error("{0} requires a service")]
    MissingService(Performative),
    #[error("{0} must not carry a service")]
    UnexpectedService(Performative),
    #[error("probability {0} outside [0, 1]")]
    ProbabilityOutOfRange(f64),
    #[error("{0} cannot be broadcast")]
    BroadcastNotAllowed(Performative),
    #[error("illegal {performative} ({direction}) in phase {phase}")]
    IllegalTransition {
        phase: &'static str,
        performative: Performative,
        direction: &'static str,
    },
    #[error("{0} does not answer the message that opened the conversation")]
    NotAReply(Performative),
    #[error("message belongs to conversation {got}, expected {expected}")]
    WrongConversation {
        expected: ConversationId,
        got: ConversationId,
    },
    #[error("probe needs a deadline or a reply quota")]
    UnboundedProbe,
    #[error("{0} already answered this probe")]
    DuplicateReply(AgentId),
}

/// Builds a message with a fresh id, checking the payload against the
/// performative.
pub fn make_message(
    ids: &mut IdSource,
    performative: Performative,
    sender: AgentId,
    receiver: Receiver,
    id_c: ConversationId,
    service: Option<ServiceId>,
    payload: Payload,
) -> Result<Message, ProtocolError> {
    if payload.performative() != performative {
        return Err(ProtocolError::PayloadMismatch {
            performative,
            payload: payload.performative(),
        });
    }
    match (performative.carries_service(), service.is_some()) {
        (true, false) => return Err(ProtocolError::MissingService(performative)),
        (false, true) => return Err(ProtocolError::UnexpectedService(performative)),
        _ => {}
    }
    if let Payload::InformProbability { prob } = payload {
        if !(0.0..=1.0).contains(&prob) {
            return Err(ProtocolError::ProbabilityOutOfRange(prob));
        }
    }
    if receiver == Receiver::Broadcast && performative != Performative::RequestProbability {
        return Err(ProtocolError::BroadcastNotAllowed(performative));
    }
    Ok(Message {
        id_m: ids.message(),
        id_c,
        sender,
        receiver,
        performative,
        service,
        payload,
    })
}

/// Whether `reply` is a legal answer to `request`.
pub fn validate_reply(request: &Message, reply: &Message) -> bool {
    if reply.id_c != request.id_c {
        return false;
    }
    let from_addressee = match &request.receiver {
        Receiver::Agent(a) => &reply.sender == a,
        Receiver::Broadcast => reply.sender != request.sender,
    };
    if !from_addressee || reply.receiver != Receiver::Agent(request.sender.clone()) {
        return false;
    }
    use Performative::*;
    match (request.performative, reply.performative) {
        (RequestService, InformService) => reply.service == request.service,
        (InformAbnormality, InformNormality) => true,
        (RequestProbability, InformProbability | RefuseProbability) => true,
        _ => false,
    }
}

/// When a probe stops collecting replies. At least one bound is required.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeLimits {
    pub deadline_ms: Option<f64>,
    pub quota: Option<usize>,
}

impl Default for ProbeLimits {
    fn default() -> Self {
        Self {
            deadline_ms: Some(DEFAULT_PROBE_DEADLINE_MS),
            quota: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReply {
    pub agent: AgentId,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Phase {
    ServicePending,
    ServiceDone,
    AbnormalityPending,
    NormalityReceived,
    ProbeCollecting {
        deadline: Option<f64>,
        quota: Option<usize>,
    },
    ProbeClosed,
}

impl Phase {
    pub fn name(&self) -> &'static str {
        match self {
            Phase::ServicePending => "ServicePending",
            Phase::ServiceDone => "ServiceDone",
            Phase::AbnormalityPending => "AbnormalityPending",
            Phase::NormalityReceived => "NormalityReceived",
            Phase::ProbeCollecting { .. } => "ProbeCollecting",
            Phase::ProbeClosed => "ProbeClosed",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Event<'a> {
    Sent(&'a Message),
    Received(&'a Message),
    /// Time passes with no message.
    Tick,
}

/// Whether an event changed the conversation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Effect {
    Applied,
    /// A probe reply that arrived after the probe closed.
    Discarded,
}

/// One agent's view of a conversation it opened.
#[derive(Debug, Clone, PartialEq)]
pub struct ConversationState {
    pub id_c: ConversationId,
    pub initiator: AgentId,
    pub opener: Message,
    pub phase: Phase,
    pub replies: Vec<ProbeReply>,
    pub refusals: Vec<AgentId>,
}

impl ConversationState {
    /// Opens a conversation with the message its initiator sends first.
    pub fn open(first: &Message, now: f64, limits: ProbeLimits) -> Result<Self, ProtocolError> {
        let phase = match first.performative {
            Performative::RequestService => Phase::ServicePending,
            Performative::InformAbnormality => Phase::AbnormalityPending,
            Performative::RequestProbability => {
                if limits.deadline_ms.is_none() && limits.quota.is_none() {
                    return Err(ProtocolError::UnboundedProbe);
                }
                Phase::ProbeCollecting {
                    deadline: limits.deadline_ms.map(|d| now + d),
                    quota: limits.quota,
                }
            }
            p => {
                return Err(ProtocolError::IllegalTransition {
                    phase: "(none)",
                    performative: p,
                    direction: "sent",
                })
            }
        };
        Ok(Self {
            id_c: first.id_c,
            initiator: first.sender.clone(),
            opener: first.clone(),
            phase,
            replies: Vec::new(),
            refusals: Vec::new(),
        })
    }

    pub fn is_probe_open(&self) -> bool {
        matches!(self.phase, Phase::ProbeCollecting { .. })
    }

    fn answered(&self, agent: &AgentId) -> bool {
        self.replies.iter().any(|r| &r.agent == agent) || self.refusals.contains(agent)
    }

    /// Pure transition: returns the next state, leaving `self` untouched.
    pub fn advance(&self, event: Event<'_>, now: f64) -> Result<(Self, Effect), ProtocolError> {
        let mut next = self.clone();
        if let Phase::ProbeCollecting {
            deadline: Some(d), ..
        } = next.phase
        {
            if d <= now {
                next.phase = Phase::ProbeClosed;
            }
        }
        let (msg, direction) = match event {
            Event::Tick => return Ok((next, Effect::Applied)),
            Event::Sent(m) => (m, "sent"),
            Event::Received(m) => (m, "received"),
        };
        if msg.id_c != self.id_c {
            return Err(ProtocolError::WrongConversation {
                expected: self.id_c,
                got: msg.id_c,
            });
        }
        let illegal = |phase: &Phase| ProtocolError::IllegalTransition {
            phase: phase.name(),
            performative: msg.performative,
            direction,
        };
        if matches!(event, Event::Sent(_)) {
            // Only the opener is ever sent by the initiator.
            return Err(illegal(&next.phase));
        }
        if !validate_reply(&self.opener, msg) {
            return Err(ProtocolError::NotAReply(msg.performative));
        }
        match (&next.phase, msg.performative) {
            (Phase::ServicePending, Performative::InformService) => {
                next.phase = Phase::ServiceDone;
            }
            (Phase::AbnormalityPending, Performative::InformNormality) => {
                next.phase = Phase::NormalityReceived;
            }
            (Phase::ProbeCollecting { quota, .. }, p) if p.is_probe_reply() => {
                let quota = *quota;
                if next.answered(&msg.sender) {
                    return Err(ProtocolError::DuplicateReply(msg.sender.clone()));
                }
                match &msg.payload {
                    Payload::InformProbability { prob } => next.replies.push(ProbeReply {
                        agent: msg.sender.clone(),
                        prob: *prob,
                    }),
                    _ => next.refusals.push(msg.sender.clone()),
                }
                if quota.is_some_and(|q| next.replies.len() + next.refusals.len() >= q) {
                    next.phase = Phase::ProbeClosed;
                }
            }
            (Phase::ProbeClosed, p) if p.is_probe_reply() => {
                return Ok((self.closed_copy(), Effect::Discarded));
            }
            (phase, _) => return Err(illegal(phase)),
        }
        Ok((next, Effect::Applied))
    }

    // The state after a deadline check, with no reply counted.
    fn closed_copy(&self) -> Self {
        let mut s = self.clone();
        s.phase = Phase::ProbeClosed;
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids() -> IdSource {
        IdSource::new()
    }

    fn probe(ids: &mut IdSource) -> Message {
        make_message(
            ids,
            Performative::RequestProbability,
            "p_a".into(),
            Receiver::Broadcast,
            ConversationId(9),
            None,
            Payload::RequestProbability {
                suspect: "p_b".into(),
                service: "b".into(),
                feature: "response_time".into(),
            },
        )
        .unwrap()
    }

    fn answer(ids: &mut IdSource, from: &str, prob: Option<f64>) -> Message {
        let (p, payload) = match prob {
            Some(prob) => (Performative::InformProbability, Payload::InformProbability { prob }),
            None => (Performative::RefuseProbability, Payload::RefuseProbability),
        };
        make_message(
            ids,
            p,
            from.into(),
            Receiver::Agent("p_a".into()),
            ConversationId(9),
            None,
            payload,
        )
        .unwrap()
    }

    #[test]
    fn make_message_examples() {
        let mut ids = ids();
        let m0 = make_message(
            &mut ids,
            Performative::RequestService,
            "p_a".into(),
            Receiver::Agent("p_b".into()),
            ConversationId(1),
            Some("b".into()),
            Payload::RequestService { args: String::new() },
        )
        .unwrap();
        assert_eq!(m0.id_m, MessageId(1));
        assert_eq!(m0.id_c, ConversationId(1));
        assert_eq!(m0.message_type(), MessageType::Request);
        assert_eq!(m0.log_line(), "1|1|p_a|p_b|REQUEST_SERVICE|b|-");

        let inf = make_message(
            &mut ids,
            Performative::InformProbability,
            "n".into(),
            Receiver::Agent("p_a".into()),
            ConversationId(9),
            None,
            Payload::InformProbability { prob: 0.49 },
        )
        .unwrap();
        assert_eq!(inf.log_line(), "2|9|n|p_a|INFORM_PROBABILITY|-|prob=0.49");

        assert_eq!(
            make_message(
                &mut ids,
                Performative::InformProbability,
                "n".into(),
                Receiver::Agent("p_a".into()),
                ConversationId(9),
                None,
                Payload::InformProbability { prob: 1.3 },
            ),
            Err(ProtocolError::ProbabilityOutOfRange(1.3))
        );
        assert!(matches!(
            make_message(
                &mut ids,
                Performative::InformService,
                "n".into(),
                Receiver::Agent("p_a".into()),
                ConversationId(9),
                Some("b".into()),
                Payload::InformNormality,
            ),
            Err(ProtocolError::PayloadMismatch { .. })
        ));
        assert_eq!(
            make_message(
                &mut ids,
                Performative::RequestService,
                "p_a".into(),
                Receiver::Agent("p_b".into()),
                ConversationId(1),
                None,
                Payload::RequestService { args: String::new() },
            ),
            Err(ProtocolError::MissingService(Performative::RequestService))
        );
        assert_eq!(
            make_message(
                &mut ids,
                Performative::InformNormality,
                "p_a".into(),
                Receiver::Broadcast,
                ConversationId(1),
                None,
                Payload::InformNormality,
            ),
            Err(ProtocolError::BroadcastNotAllowed(Performative::InformNormality))
        );
    }

    #[test]
    fn message_types() {
        use MessageType::*;
        let expected = [Request, Inform, Inform, Inform, Request, Inform, Refuse];
        for (p, t) in Performative::ALL.iter().zip(expected) {
            assert_eq!(p.message_type(), t, "{p}");
        }
    }

    #[test]
    fn reply_pairing() {
        let mut ids = ids();
        let m0 = make_message(
            &mut ids,
            Performative::RequestService,
            "p_a".into(),
            Receiver::Agent("p_b".into()),
            ConversationId(1),
            Some("b".into()),
            Payload::RequestService { args: String::new() },
        )
        .unwrap();
        let mut reply = make_message(
            &mut ids,
            Performative::InformService,
            "p_b".into(),
            Receiver::Agent("p_a".into()),
            ConversationId(1),
            Some("b".into()),
            Payload::InformService {
                output: "ok".into(),
                cost: 1.0,
            },
        )
        .unwrap();
        assert!(validate_reply(&m0, &reply));
        reply.id_c = ConversationId(2);
        assert!(!validate_reply(&m0, &reply));
        reply.id_c = ConversationId(1);
        reply.sender = "p_c".into();
        assert!(!validate_reply(&m0, &reply));

        let q = probe(&mut ids);
        assert!(validate_reply(&q, &answer(&mut ids, "n", Some(0.3))));
        assert!(validate_reply(&q, &answer(&mut ids, "x", None)));
        // a broadcaster never answers itself
        assert!(!validate_reply(&q, &answer(&mut ids, "p_a", Some(0.3))));
    }

    #[test]
    fn service_and_abnormality_lifecycles() {
        let mut ids = ids();
        let m0 = make_message(
            &mut ids,
            Performative::RequestService,
            "p_a".into(),
            Receiver::Agent("p_b".into()),
            ConversationId(1),
            Some("b".into()),
            Payload::RequestService { args: String::new() },
        )
        .unwrap();
        let st = ConversationState::open(&m0, 0.0, ProbeLimits::default()).unwrap();
        assert_eq!(st.phase, Phase::ServicePending);
        let reply = make_message(
            &mut ids,
            Performative::InformService,
            "p_b".into(),
            Receiver::Agent("p_a".into()),
            ConversationId(1),
            Some("b".into()),
            Payload::InformService {
                output: String::new(),
                cost: 1.0,
            },
        )
        .unwrap();
        let (st2, _) = st.advance(Event::Received(&reply), 3.0).unwrap();
        assert_eq!(st2.phase, Phase::ServiceDone);
        assert!(matches!(
            st2.advance(Event::Received(&reply), 4.0),
            Err(ProtocolError::IllegalTransition {
                phase: "ServiceDone",
                ..
            })
        ));

        let ab = make_message(
            &mut ids,
            Performative::InformAbnormality,
            "c".into(),
            Receiver::Agent("p_a".into()),
            ConversationId(7),
            None,
            Payload::InformAbnormality {
                feature: "response_time".into(),
                conversation: ConversationId(1),
                message: None,
            },
        )
        .unwrap();
        let st = ConversationState::open(&ab, 0.0, ProbeLimits::default()).unwrap();
        assert_eq!(st.phase, Phase::AbnormalityPending);
        let norm = make_message(
            &mut ids,
            Performative::InformNormality,
            "p_a".into(),
            Receiver::Agent("c".into()),
            ConversationId(7),
            None,
            Payload::InformNormality,
        )
        .unwrap();
        let (st, eff) = st.advance(Event::Received(&norm), 1.0).unwrap();
        assert_eq!((st.phase, eff), (Phase::NormalityReceived, Effect::Applied));
    }

    #[test]
    fn probe_deadline_keeps_early_replies() {
        let mut ids = ids();
        let q = probe(&mut ids);
        let limits = ProbeLimits {
            deadline_ms: Some(5000.0),
            quota: Some(5),
        };
        let mut st = ConversationState::open(&q, 100.0, limits).unwrap();
        for (who, t) in [("n", 200.0), ("x", 4000.0)] {
            st = st.advance(Event::Received(&answer(&mut ids, who, Some(0.4))), t).unwrap().0;
        }
        assert!(st.is_probe_open());
        st = st.advance(Event::Tick, 5100.0).unwrap().0;
        assert_eq!(st.phase, Phase::ProbeClosed);
        assert_eq!(st.replies.len(), 2);
        let late = answer(&mut ids, "y", Some(0.9));
        let (after, eff) = st.advance(Event::Received(&late), 5200.0).unwrap();
        assert_eq!(eff, Effect::Discarded);
        assert_eq!(after, st);
    }

    #[test]
    fn probe_reply_at_deadline_is_late() {
        let mut ids = ids();
        let q = probe(&mut ids);
        let st = ConversationState::open(&q, 0.0, ProbeLimits::default()).unwrap();
        let (st, eff) = st
            .advance(Event::Received(&answer(&mut ids, "n", Some(0.4))), 5000.0)
            .unwrap();
        assert_eq!(eff, Effect::Discarded);
        assert!(st.replies.is_empty());
    }

    #[test]
    fn probe_quota_counts_refusals() {
        let mut ids = ids();
        let q = probe(&mut ids);
        let limits = ProbeLimits {
            deadline_ms: None,
            quota: Some(2),
        };
        let st = ConversationState::open(&q, 0.0, limits).unwrap();
        let (st, _) = st.advance(Event::Received(&answer(&mut ids, "n", None)), 1.0).unwrap();
        assert!(st.is_probe_open());
        let dup = answer(&mut ids, "n", Some(0.2));
        assert!(matches!(
            st.advance(Event::Received(&dup), 2.0),
            Err(ProtocolError::DuplicateReply(_))
        ));
        let (st, _) = st
            .advance(Event::Received(&answer(&mut ids, "x", Some(0.7))), 2.0)
            .unwrap();
        assert_eq!(st.phase, Phase::ProbeClosed);
        assert_eq!(st.refusals.len(), 1);
        assert_eq!(st.replies, vec![ProbeReply { agent: "x".into(), prob: 0.7 }]);

        let unbounded = ProbeLimits {
            deadline_ms: None,
            quota: None,
        };
        assert_eq!(
            ConversationState::open(&q, 0.0, unbounded),
            Err(ProtocolError::UnboundedProbe)
        );
    }
}
