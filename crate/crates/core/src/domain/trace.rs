use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use super::{AgentId, ConversationId, Measurements, Message, MessageId, Receiver, ServiceId};
use crate::protocol::Performative;

/// A traced request together with what was measured on its reply.
/// `measurements` and `time` are both `None` while the reply is pending.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionTrace {
    pub message: Message,
    pub measurements: Option<Measurements>,
    pub time: Option<f64>,
}

impl InteractionTrace {
    pub fn is_pending(&self) -> bool {
        self.time.is_none()
    }

    pub fn provider(&self) -> &AgentId {
        self.message
            .receiver_agent()
            .expect("traced requests are always directed")
    }

    pub fn service(&self) -> &ServiceId {
        self.message
            .service
            .as_ref()
            .expect("traced requests always carry a service")
    }

    pub fn measurement(&self, feature: &str) -> Option<f64> {
        self.measurements.as_ref()?.get(feature).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TraceError {
    #[error("only request-service messages are traced, got {0}")]
    NotAServiceRequest(Performative),
    #[error("traced request has no service")]
    MissingService,
    #[error("traced request must be addressed to a single provider")]
    BroadcastRequest,
    #[error("trace for conversation {0}, message {1} already exists")]
    Duplicate(ConversationId, MessageId),
    #[error("no trace for conversation {0}, message {1}")]
    Unknown(ConversationId, MessageId),
    #[error("trace for conversation {0}, message {1} is already completed")]
    AlreadyCompleted(ConversationId, MessageId),
    #[error("record time must be finite and nonnegative, got {0}")]
    InvalidTime(f64),
}

/// Interaction traces owned by a single agent.
///
/// Record order is creation order. Only completed traces are returned by
/// the queries.
#[derive(Debug, Clone, Default)]
pub struct TraceStore {
    traces: Vec<InteractionTrace>,
    by_key: HashMap<(ConversationId, MessageId), usize>,
    by_conversation: BTreeMap<ConversationId, Vec<usize>>,
    by_provider: HashMap<(ServiceId, AgentId), Vec<usize>>,
}

impl TraceStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &InteractionTrace> {
        self.traces.iter()
    }

    pub fn create_trace(&mut self, m: Message) -> Result<&InteractionTrace, TraceError> {
        if m.performative != Performative::RequestService {
            return Err(TraceError::NotAServiceRequest(m.performative));
        }
        let service = m.service.clone().ok_or(TraceError::MissingService)?;
        let provider = match &m.receiver {
            Receiver::Agent(p) => p.clone(),
            Receiver::Broadcast => return Err(TraceError::BroadcastRequest),
        };
        let key = (m.id_c, m.id_m);
        if self.by_key.contains_key(&key) {
            return Err(TraceError::Duplicate(key.0, key.1));
        }
        let idx = self.traces.len();
        self.by_key.insert(key, idx);
        self.by_conversation.entry(m.id_c).or_default().push(idx);
        self.by_provider.entry((service, provider)).or_default().push(idx);
        self.traces.push(InteractionTrace {
            message: m,
            measurements: None,
            time: None,
        });
        Ok(&self.traces[idx])
    }

    pub fn update_trace(
        &mut self,
        id_c: ConversationId,
        id_m: MessageId,
        measurements: Measurements,
        time: f64,
    ) -> Result<&InteractionTrace, TraceError> {
        if !time.is_finite() || time < 0.0 {
            return Err(TraceError::InvalidTime(time));
        }
        let idx = *self
            .by_key
            .get(&(id_c, id_m))
            .ok_or(TraceError::Unknown(id_c, id_m))?;
        let t = &mut self.traces[idx];
        if !t.is_pending() {
            return Err(TraceError::AlreadyCompleted(id_c, id_m));
        }
        t.measurements = Some(measurements);
        t.time = Some(time);
        Ok(&self.traces[idx])
    }

    /// Message id of the pending request in `id_c` sent to `provider` for
    /// `service`, if any. Used to pair an incoming reply with its trace.
    pub fn pending_request(
        &self,
        id_c: ConversationId,
        provider: &AgentId,
        service: &ServiceId,
    ) -> Option<MessageId> {
        self.by_conversation.get(&id_c)?.iter().find_map(|&i| {
            let t = &self.traces[i];
            (t.is_pending() && t.provider() == provider && t.service() == service)
                .then_some(t.message.id_m)
        })
    }

    /// Completed traces of conversation `id_c`, in record order.
    pub fn get_traces(&self, id_c: ConversationId) -> Vec<&InteractionTrace> {
        self.by_conversation
            .get(&id_c)
            .map(|ix| {
                ix.iter()
                    .map(|&i| &self.traces[i])
                    .filter(|t| !t.is_pending())
                    .collect()
            })
            .unwrap_or_default()
    }

    // Completed traces for (s, p) recorded at or before `time`, by record
    // time with ties in record order.
    fn window(&self, s: &ServiceId, p: &AgentId, time: f64) -> Vec<&InteractionTrace> {
        let mut out: Vec<&InteractionTrace> = match self.by_provider.get(&(s.clone(), p.clone())) {
            Some(ix) => ix
                .iter()
                .map(|&i| &self.traces[i])
                .filter(|t| t.time.is_some_and(|tt| tt <= time))
                .collect(),
            None => Vec::new(),
        };
        out.sort_by(|a, b| a.time.unwrap().total_cmp(&b.time.unwrap()));
        out
    }

    /// Measurements of `q` on `s` delivered by `p` up to and including
    /// `time`. Traces that did not measure `q` are skipped.
    pub fn get_measurements(&self, s: &ServiceId, p: &AgentId, q: &str, time: f64) -> Vec<f64> {
        self.window(s, p, time)
            .into_iter()
            .filter_map(|t| t.measurement(q))
            .collect()
    }

    pub fn get_times(&self, s: &ServiceId, p: &AgentId, time: f64) -> Vec<f64> {
        self.window(s, p, time)
            .into_iter()
            .map(|t| t.time.unwrap())
            .collect()
    }

    /// Measurements of `q` and their record times, index aligned.
    pub fn get_series(&self, s: &ServiceId, p: &AgentId, q: &str, time: f64) -> (Vec<f64>, Vec<f64>) {
        self.window(s, p, time)
            .into_iter()
            .filter_map(|t| t.measurement(q).map(|v| (v, t.time.unwrap())))
            .unzip()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::RESPONSE_TIME;
    use crate::protocol::Payload;
    use proptest::prelude::*;

    fn request(id_m: u64, id_c: u64, from: &str, to: &str, s: &str) -> Message {
        Message {
            id_m: MessageId(id_m),
            id_c: ConversationId(id_c),
            sender: from.into(),
            receiver: Receiver::Agent(to.into()),
            performative: Performative::RequestService,
            service: Some(s.into()),
            payload: Payload::RequestService { args: String::new() },
        }
    }

    fn rt(v: f64) -> Measurements {
        [(RESPONSE_TIME.to_string(), v)].into_iter().collect()
    }

    #[test]
    fn create_then_update() {
        let mut store = TraceStore::new();
        let m0 = request(1, 1, "p_a", "p_b", "b");
        let t0 = store.create_trace(m0.clone()).unwrap().clone();
        assert_eq!(
            t0,
            InteractionTrace {
                message: m0.clone(),
                measurements: None,
                time: None
            }
        );
        assert_eq!(store.get_traces(ConversationId(1)).len(), 0);
        let t0 = store
            .update_trace(ConversationId(1), MessageId(1), rt(7.0), 12.0)
            .unwrap();
        assert_eq!(t0.measurement(RESPONSE_TIME), Some(7.0));
        assert_eq!(t0.time, Some(12.0));
        let (b, p_b) = (ServiceId::new("b"), AgentId::new("p_b"));
        assert_eq!(store.get_measurements(&b, &p_b, RESPONSE_TIME, 12.0), vec![7.0]);
        assert_eq!(store.get_times(&b, &p_b, 12.0), vec![12.0]);
        assert!(store.get_measurements(&b, &p_b, RESPONSE_TIME, 11.0).is_empty());
        assert!(store.get_times(&b, &p_b, 11.0).is_empty());
        assert_eq!(store.get_traces(ConversationId(1)).len(), 1);
        assert!(store.get_traces(ConversationId(9)).is_empty());
    }

    #[test]
    fn rejections() {
        let mut store = TraceStore::new();
        let m0 = request(1, 1, "p_a", "p_b", "b");
        store.create_trace(m0.clone()).unwrap();
        assert_eq!(
            store.create_trace(m0.clone()),
            Err(TraceError::Duplicate(ConversationId(1), MessageId(1)))
        );
        let mut inform = m0.clone();
        inform.id_m = MessageId(2);
        inform.performative = Performative::InformService;
        assert!(matches!(
            store.create_trace(inform),
            Err(TraceError::NotAServiceRequest(_))
        ));
        let mut bare = request(3, 1, "p_a", "p_b", "b");
        bare.service = None;
        assert_eq!(store.create_trace(bare), Err(TraceError::MissingService));

        store
            .update_trace(ConversationId(1), MessageId(1), rt(7.0), 12.0)
            .unwrap();
        assert_eq!(
            store.update_trace(ConversationId(1), MessageId(1), rt(7.0), 13.0),
            Err(TraceError::AlreadyCompleted(ConversationId(1), MessageId(1)))
        );
        assert_eq!(
            store.update_trace(ConversationId(5), MessageId(1), rt(7.0), 13.0),
            Err(TraceError::Unknown(ConversationId(5), MessageId(1)))
        );
    }

    #[test]
    fn pending_request_lookup() {
        let mut store = TraceStore::new();
        store.create_trace(request(4, 2, "p_a", "p_b", "b")).unwrap();
        store.create_trace(request(5, 2, "p_a", "p_c", "c")).unwrap();
        let (p_c, c) = (AgentId::new("p_c"), ServiceId::new("c"));
        assert_eq!(store.pending_request(ConversationId(2), &p_c, &c), Some(MessageId(5)));
        store
            .update_trace(ConversationId(2), MessageId(5), rt(3.0), 1.0)
            .unwrap();
        assert_eq!(store.pending_request(ConversationId(2), &p_c, &c), None);
    }

    // (conversation, provider, service, completed?, value, time)
    type Op = (u64, usize, usize, bool, i32, u8);

    fn build(ops: &[Op]) -> TraceStore {
        let mut store = TraceStore::new();
        for (i, &(c, p, s, ..)) in ops.iter().enumerate() {
            let m = request(i as u64 + 1, c, "me", &format!("p{p}"), &format!("s{s}"));
            store.create_trace(m).unwrap();
        }
        // complete in reverse order so record order differs from completion order
        for (i, &(c, _, _, done, v, t)) in ops.iter().enumerate().rev() {
            if done {
                store
                    .update_trace(ConversationId(c), MessageId(i as u64 + 1), rt(v as f64), t as f64)
                    .unwrap();
            }
        }
        store
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn queries_match_linear_scan(
            ops in prop::collection::vec((0u64..3, 0usize..3, 0usize..2, any::<bool>(), -50i32..50, 0u8..20), 0..30),
            qp in 0usize..3, qs in 0usize..2, qc in 0u64..3, cutoff in 0u8..22,
        ) {
            let store = build(&ops);
            let (s, p) = (ServiceId::new(format!("s{qs}")), AgentId::new(format!("p{qp}")));
            let cutoff = cutoff as f64;

            let mut expect: Vec<(f64, usize, f64)> = ops.iter().enumerate()
                .filter(|(_, o)| o.3 && o.1 == qp && o.2 == qs && (o.5 as f64) <= cutoff)
                .map(|(i, o)| (o.5 as f64, i, o.4 as f64))
                .collect();
            expect.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let values: Vec<f64> = expect.iter().map(|e| e.2).collect();
            let times: Vec<f64> = expect.iter().map(|e| e.0).collect();
            prop_assert_eq!(store.get_measurements(&s, &p, RESPONSE_TIME, cutoff), values.clone());
            prop_assert_eq!(store.get_times(&s, &p, cutoff), times.clone());
            prop_assert_eq!(store.get_series(&s, &p, RESPONSE_TIME, cutoff), (values, times));

            let conv: Vec<u64> = store.get_traces(ConversationId(qc)).iter().map(|t| t.message.id_m.0).collect();
            let oracle: Vec<u64> = ops.iter().enumerate()
                .filter(|(_, o)| o.0 == qc && o.3)
                .map(|(i, _)| i as u64 + 1)
                .collect();
            prop_assert_eq!(conv, oracle);
        }
    }
}
