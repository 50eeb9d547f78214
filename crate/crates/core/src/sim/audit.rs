//! Post-run consistency checks over the message log and agent records.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::behavior::{Record, RemediationAction, Resolution, Strategy};
use crate::domain::{AgentId, ConversationId, Receiver, ServiceId};
use crate::protocol::{Payload, Performative};

use super::engine::RunResult;
use super::scenario::Scenario;

const EPS_MS: f64 = 1e-6;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AuditReport {
    pub violations: Vec<String>,
    pub messages_checked: usize,
    pub diagnoses_checked: usize,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn audit(scenario: &Scenario, run: &RunResult) -> AuditReport {
    let mut r = AuditReport {
        messages_checked: run.log.messages.len(),
        ..Default::default()
    };
    let v = &mut r.violations;
    let msgs = &run.log.messages;

    // well-formedness, ids, clock
    let mut seen = BTreeSet::new();
    let mut last = 0u64;
    for e in msgs {
        let m = &e.message;
        if !seen.insert(m.id_m) {
            v.push(format!("duplicate message id {}", m.id_m));
        }
        if m.payload.performative() != m.performative {
            v.push(format!("{}: payload does not match {}", m.id_m, m.performative));
        }
        let wants_service = matches!(
            m.performative,
            Performative::RequestService | Performative::InformService
        );
        if wants_service != m.service.is_some() {
            v.push(format!("{}: service field inconsistent with {}", m.id_m, m.performative));
        }
        if matches!(m.receiver, Receiver::Broadcast) != (m.performative == Performative::RequestProbability) {
            v.push(format!("{}: broadcast misuse", m.id_m));
        }
        if e.sent_us < last {
            v.push(format!("{}: clock went backwards", m.id_m));
        }
        last = e.sent_us;
        if e.delivered_us.is_some_and(|d| d < e.sent_us) {
            v.push(format!("{}: delivered before sent", m.id_m));
        }
    }

    // every service request is answered exactly once, after it was sent
    type Key = (ConversationId, AgentId, AgentId, ServiceId);
    let mut requests: BTreeMap<Key, Vec<usize>> = BTreeMap::new();
    let mut replies: BTreeMap<Key, Vec<usize>> = BTreeMap::new();
    for (i, e) in msgs.iter().enumerate() {
        let m = &e.message;
        let (Some(s), Receiver::Agent(to)) = (&m.service, &m.receiver) else {
            continue;
        };
        match m.performative {
            Performative::RequestService => requests
                .entry((m.id_c, m.sender.clone(), to.clone(), s.clone()))
                .or_default()
                .push(i),
            Performative::InformService => replies
                .entry((m.id_c, to.clone(), m.sender.clone(), s.clone()))
                .or_default()
                .push(i),
            _ => {}
        }
    }
    for (k, reqs) in &requests {
        let reps = replies.get(k).map(Vec::as_slice).unwrap_or_default();
        if reqs.len() != 1 || reps.len() != 1 {
            v.push(format!(
                "{} {}->{} {}: {} requests, {} replies",
                k.0, k.1, k.2, k.3,
                reqs.len(),
                reps.len()
            ));
        } else if reps[0] < reqs[0] {
            v.push(format!("{} {}->{} {}: reply before request", k.0, k.1, k.2, k.3));
        }
    }
    for k in replies.keys().filter(|k| !requests.contains_key(*k)) {
        v.push(format!("{} {}->{} {}: reply without request", k.0, k.1, k.2, k.3));
    }

    // providers answer in arrival order; arrival ties break by send order
    let mut arrivals: BTreeMap<&AgentId, Vec<(u64, usize, Key)>> = BTreeMap::new();
    let mut answers: BTreeMap<&AgentId, Vec<Key>> = BTreeMap::new();
    for (k, reqs) in &requests {
        let e = &msgs[reqs[0]];
        arrivals
            .entry(&k.2)
            .or_default()
            .push((e.delivered_us.unwrap_or(e.sent_us), reqs[0], k.clone()));
    }
    for e in msgs {
        let m = &e.message;
        if m.performative == Performative::InformService {
            if let (Some(s), Some(to)) = (&m.service, m.receiver_agent()) {
                answers
                    .entry(&m.sender)
                    .or_default()
                    .push((m.id_c, to.clone(), m.sender.clone(), s.clone()));
            }
        }
    }
    for (provider, mut arr) in arrivals {
        arr.sort();
        let order: Vec<&Key> = arr.iter().map(|(_, _, k)| k).collect();
        let answered: Vec<&Key> = answers.get(provider).map(|a| a.iter().collect()).unwrap_or_default();
        if !order.starts_with(&answered) {
            v.push(format!("{provider}: replies out of arrival order"));
        }
    }

    // cost additivity for the top client's conversations
    for (k, reqs) in &requests {
        if k.1 != scenario.top_client || reqs.len() != 1 {
            continue;
        }
        let conv = k.0;
        let expected: f64 = msgs
            .iter()
            .filter(|e| e.message.id_c == conv && e.message.performative == Performative::InformService)
            .map(|e| {
                let m = &e.message;
                scenario
                    .unit_cost(&m.sender, m.service.as_ref().unwrap())
                    .unwrap_or(f64::NAN)
            })
            .sum();
        let reported = replies.get(k).and_then(|r| match &msgs[r[0]].message.payload {
            Payload::InformService { cost, .. } => Some(*cost),
            _ => None,
        });
        match reported {
            Some(c) if (c - expected).abs() <= 1e-9 => {}
            other => v.push(format!(
                "{conv}: reported cost {other:?}, sum of unit costs {expected}"
            )),
        }
    }

    // normality only answers an abnormality notice, in reverse direction
    let mut notices: HashMap<ConversationId, (usize, AgentId, AgentId)> = HashMap::new();
    let mut probes: HashMap<ConversationId, AgentId> = HashMap::new();
    for (i, e) in msgs.iter().enumerate() {
        let m = &e.message;
        match m.performative {
            Performative::InformAbnormality => {
                if let Receiver::Agent(to) = &m.receiver {
                    notices.insert(m.id_c, (i, m.sender.clone(), to.clone()));
                }
            }
            Performative::InformNormality => match notices.get(&m.id_c) {
                Some((j, from, to)) if *j < i && *to == m.sender && m.receiver_agent() == Some(from) => {}
                _ => v.push(format!("{}: INFORM_NORMALITY without matching notice", m.id_m)),
            },
            Performative::RequestProbability => {
                probes.insert(m.id_c, m.sender.clone());
            }
            Performative::InformProbability | Performative::RefuseProbability => {
                match probes.get(&m.id_c) {
                    Some(b) if *b == m.sender => {
                        v.push(format!("{}: {} answered its own probe", m.id_m, b))
                    }
                    Some(b) if m.receiver_agent() == Some(b) => {}
                    _ => v.push(format!("{}: probe reply without probe", m.id_m)),
                }
            }
            _ => {}
        }
    }

    // probe closure timing
    let delivered: HashMap<(ConversationId, &AgentId), f64> = msgs
        .iter()
        .filter(|e| e.message.performative.is_probe_reply())
        .filter_map(|e| Some(((e.message.id_c, &e.message.sender), e.delivered_us? as f64 / 1000.0)))
        .collect();
    let mut closed: HashMap<ConversationId, f64> = HashMap::new();
    for (_, _, rec) in &run.log.records {
        if let Record::ProbeClosed(p) = rec {
            closed.insert(p.conversation, p.closed_at);
            let counted = p.replies.iter().map(|x| &x.agent).chain(p.refusals.iter());
            for a in counted {
                match delivered.get(&(p.conversation, a)) {
                    Some(t) if *t <= p.closed_at + EPS_MS => {}
                    _ => v.push(format!("{}: counted reply from {a} not delivered before close", p.conversation)),
                }
            }
        }
    }
    for (_, _, rec) in &run.log.records {
        if let Record::LateReply { conversation, from, at } = rec {
            match closed.get(conversation) {
                Some(c) if *at + EPS_MS >= *c => {}
                _ => v.push(format!("{conversation}: late reply from {from} precedes close")),
            }
        }
    }

    // remediation pairing
    #[derive(Default)]
    struct Step {
        installed: bool,
        resolved: Vec<Resolution>,
        undos: usize,
    }
    let mut steps: BTreeMap<(AgentId, ConversationId, usize), Step> = BTreeMap::new();
    let mut remediation_records = 0usize;
    for (_, _, rec) in &run.log.records {
        let Record::Remediation(ev) = rec else { continue };
        remediation_records += 1;
        let s = steps
            .entry((ev.agent.clone(), ev.diagnosis, ev.step))
            .or_default();
        match &ev.action {
            RemediationAction::Mitigate { installed, .. } => s.installed |= installed.is_some(),
            RemediationAction::Undo { .. } => s.undos += 1,
            RemediationAction::Resolved(res) => s.resolved.push(res.clone()),
            _ => {}
        }
    }
    r.diagnoses_checked = steps.len();
    match run.strategy {
        Strategy::Passive => {
            if remediation_records > 0 {
                v.push(format!("passive run has {remediation_records} remediation records"));
            }
            if run.initial_bindings != run.final_bindings {
                v.push("passive run changed bindings".into());
            }
            if run
                .metrics
                .windows(2)
                .any(|w| w[1].active_failures.len() < w[0].active_failures.len())
            {
                v.push("passive run cleared a failure".into());
            }
        }
        Strategy::Cooperative => {
            for ((agent, diag, step), s) in &steps {
                let tag = format!("{agent} {diag} step {step}");
                if s.installed && s.resolved.len() != 1 {
                    v.push(format!("{tag}: {} resolutions", s.resolved.len()));
                }
                let want_undo = match s.resolved.first() {
                    Some(Resolution::Normalized | Resolution::LinkRepaired) => 1,
                    _ => 0,
                };
                if s.undos != want_undo {
                    v.push(format!("{tag}: {} undos, expected {want_undo}", s.undos));
                }
            }
        }
        Strategy::Remedial => {
            for ((agent, diag, step), s) in &steps {
                if s.undos > 0 || !s.resolved.is_empty() {
                    v.push(format!("{agent} {diag} step {step}: remedial step was undone"));
                }
            }
        }
    }
    r
}
