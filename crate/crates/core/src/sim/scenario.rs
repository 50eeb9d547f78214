//! Scenario documents: JSON schema, defaults and referential validation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::behavior::{ServiceSpec, Strategy, DEFAULT_THRESHOLD};
use crate::domain::{parse_constraint, AgentId, Constraint, ServiceId, RESPONSE_TIME};
use crate::protocol::DEFAULT_PROBE_DEADLINE_MS;

/// The bundled scenario: 38 agents, failures at episodes 30, 60 and 90.
pub const BUNDLED_SCENARIO: &str = include_str!("../../scenarios/service_chain_38.json");

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioDoc {
    #[serde(default)]
    pub name: String,
    /// Declared quality features; `response_time` is always declared.
    #[serde(default)]
    pub features: Vec<FeatureDoc>,
    pub agents: Vec<AgentDoc>,
    #[serde(default)]
    pub background_clients: Vec<BackgroundDoc>,
    #[serde(default)]
    pub failures: Vec<FailureDoc>,
    pub run: RunDoc,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureDoc {
    pub name: String,
    #[serde(default)]
    pub unit: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentDoc {
    pub id: String,
    #[serde(default)]
    pub services: Vec<ServiceDoc>,
    #[serde(default)]
    pub requirements: Vec<RequirementDoc>,
    /// Informational; the strategy given to a run applies to every agent.
    #[serde(default)]
    pub strategy: Option<Strategy>,
    #[serde(default)]
    pub bindings: Vec<BindingDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceDoc {
    pub name: String,
    pub cost: f64,
    #[serde(default = "default_processing_ms")]
    pub processing_ms: f64,
}

fn default_processing_ms() -> f64 {
    10.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequirementDoc {
    pub feature: String,
    pub constraint: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BindingDoc {
    pub service: String,
    pub primary: String,
    #[serde(default)]
    pub alternates: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackgroundDoc {
    pub id: String,
    pub service: String,
    pub provider: String,
    #[serde(default = "one")]
    pub requests_per_episode: u32,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FailureKind {
    Provider,
    Link,
    Both,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailureDoc {
    pub id: String,
    pub kind: FailureKind,
    #[serde(default)]
    pub agent: Option<String>,
    #[serde(default)]
    pub link: Option<[String; 2]>,
    pub onset_episode: u32,
    #[serde(default = "default_penalty")]
    pub penalty_ms: f64,
}

fn default_penalty() -> f64 {
    250.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunDoc {
    pub episodes: u32,
    #[serde(default = "default_gap")]
    pub episode_gap_ms: f64,
    #[serde(default = "default_deadline")]
    pub probe_deadline_ms: Option<f64>,
    #[serde(default)]
    pub probe_quota: Option<usize>,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default)]
    pub seed: u64,
    /// Offsets within an episode at which background requests fire.
    #[serde(default)]
    pub background_window_ms: Option<[f64; 2]>,
    #[serde(default)]
    pub processing_jitter_ms: f64,
    /// Defaults to ten probe deadlines.
    #[serde(default)]
    pub give_up_ms: Option<f64>,
    #[serde(default = "default_event_cap")]
    pub event_cap: u64,
}

fn default_gap() -> f64 {
    10_000.0
}

fn default_deadline() -> Option<f64> {
    Some(DEFAULT_PROBE_DEADLINE_MS)
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

fn default_event_cap() -> u64 {
    10_000_000
}

#[derive(Debug, Clone, PartialEq)]
pub struct BindingSpec {
    pub service: ServiceId,
    pub primary: AgentId,
    pub alternates: Vec<AgentId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentSpec {
    pub id: AgentId,
    pub services: BTreeMap<ServiceId, ServiceSpec>,
    pub requirements: Vec<(String, Constraint)>,
    pub strategy: Option<Strategy>,
    pub bindings: Vec<BindingSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundClient {
    pub id: AgentId,
    pub service: ServiceId,
    pub provider: AgentId,
    pub requests_per_episode: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub id: String,
    pub kind: FailureKind,
    pub agent: Option<AgentId>,
    pub link: Option<(AgentId, AgentId)>,
    pub onset_episode: u32,
    pub penalty_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSettings {
    pub episodes: u32,
    pub episode_gap_ms: f64,
    pub probe_deadline_ms: Option<f64>,
    pub probe_quota: Option<usize>,
    pub threshold: f64,
    pub seed: u64,
    pub background_window_ms: (f64, f64),
    pub processing_jitter_ms: f64,
    pub give_up_ms: f64,
    pub event_cap: u64,
}

/// A validated scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub features: Vec<String>,
    pub agents: Vec<AgentSpec>,
    /// The one agent that provides no service.
    pub top_client: AgentId,
    pub background: Vec<BackgroundClient>,
    pub failures: Vec<Failure>,
    pub run: RunSettings,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Issue {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {message}")]
    Syntax { path: String, message: String },
    #[error("{} problem(s):\n{}", .0.len(), render(.0))]
    Invalid(Vec<Issue>),
}

fn render(issues: &[Issue]) -> String {
    issues
        .iter()
        .map(|i| format!("  {i}"))
        .collect::<Vec<_>>()
        .join("\n")
}

impl ScenarioError {
    pub fn issues(&self) -> Vec<Issue> {
        match self {
            ScenarioError::Syntax { path, message } => vec![Issue {
                path: path.clone(),
                message: message.clone(),
            }],
            ScenarioError::Invalid(v) => v.clone(),
        }
    }
}

impl Scenario {
    pub fn bundled() -> Self {
        Self::from_json(BUNDLED_SCENARIO).expect("bundled scenario is valid")
    }

    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let doc: ScenarioDoc = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            ScenarioError::Syntax {
                path: if path == "." { "$".into() } else { format!("$.{path}") },
                message: inner.to_string(),
            }
        })?;
        doc.validate()
    }

    pub fn agent(&self, id: &AgentId) -> Option<&AgentSpec> {
        self.agents.iter().find(|a| &a.id == id)
    }

    /// Unit cost of `service` at `provider`.
    pub fn unit_cost(&self, provider: &AgentId, service: &ServiceId) -> Option<f64> {
        self.agent(provider)?.services.get(service).map(|s| s.cost)
    }
}

struct Checker {
    issues: Vec<Issue>,
}

impl Checker {
    fn err(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.issues.push(Issue {
            path: path.into(),
            message: message.into(),
        });
    }

    fn finite_nonneg(&mut self, path: String, v: f64) {
        if !v.is_finite() || v < 0.0 {
            self.err(path, format!("must be a finite nonnegative number, got {v}"));
        }
    }
}

impl ScenarioDoc {
    pub fn validate(&self) -> Result<Scenario, ScenarioError> {
        let mut ck = Checker { issues: Vec::new() };
        let run = &self.run;

        // features
        let mut features = vec![RESPONSE_TIME.to_string()];
        for (i, f) in self.features.iter().enumerate() {
            if f.name.is_empty() {
                ck.err(format!("$.features[{i}].name"), "must be nonempty");
            } else if !features.contains(&f.name) {
                features.push(f.name.clone());
            }
        }
        let declared: Vec<&str> = features.iter().map(String::as_str).collect();

        // agent ids and the services they offer
        let mut offers: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        for (i, a) in self.agents.iter().enumerate() {
            if a.id.is_empty() {
                ck.err(format!("$.agents[{i}].id"), "must be nonempty");
                continue;
            }
            if offers.contains_key(a.id.as_str()) {
                ck.err(format!("$.agents[{i}].id"), format!("duplicate agent id `{}`", a.id));
            }
            let set = offers.entry(a.id.as_str()).or_default();
            for (j, s) in a.services.iter().enumerate() {
                let p = format!("$.agents[{i}].services[{j}]");
                if s.name.is_empty() {
                    ck.err(format!("{p}.name"), "must be nonempty");
                } else if !set.insert(s.name.as_str()) {
                    ck.err(format!("{p}.name"), format!("duplicate service `{}`", s.name));
                }
                ck.finite_nonneg(format!("{p}.cost"), s.cost);
                ck.finite_nonneg(format!("{p}.processing_ms"), s.processing_ms);
            }
        }
        for (i, b) in self.background_clients.iter().enumerate() {
            if b.id.is_empty() {
                ck.err(format!("$.background_clients[{i}].id"), "must be nonempty");
            } else if offers.contains_key(b.id.as_str()) {
                ck.err(
                    format!("$.background_clients[{i}].id"),
                    format!("duplicate agent id `{}`", b.id),
                );
            } else {
                offers.insert(b.id.as_str(), BTreeSet::new());
            }
        }
        let provides = |agent: &str, service: &str| {
            offers
                .get(agent)
                .is_some_and(|s| s.contains(service))
        };

        // agents
        let mut agents = Vec::new();
        let mut clients = Vec::new();
        let mut edges: BTreeSet<(String, String)> = BTreeSet::new();
        let mut deps: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for (i, a) in self.agents.iter().enumerate() {
            let ap = format!("$.agents[{i}]");
            if a.services.is_empty() {
                clients.push(i);
            }
            let mut requirements = Vec::new();
            for (j, r) in a.requirements.iter().enumerate() {
                let p = format!("{ap}.requirements[{j}]");
                if !declared.contains(&r.feature.as_str()) {
                    ck.err(format!("{p}.feature"), format!("undeclared feature `{}`", r.feature));
                }
                match parse_constraint(&r.constraint) {
                    Ok(c) => {
                        for f in c.features() {
                            if !declared.contains(&f) {
                                ck.err(format!("{p}.constraint"), format!("undeclared feature `{f}`"));
                            }
                        }
                        requirements.push((r.feature.clone(), c));
                    }
                    Err(e) => ck.err(format!("{p}.constraint"), e.to_string()),
                }
            }
            let mut bindings = Vec::new();
            let mut bound = BTreeSet::new();
            for (j, b) in a.bindings.iter().enumerate() {
                let p = format!("{ap}.bindings[{j}]");
                if b.service.is_empty() {
                    ck.err(format!("{p}.service"), "must be nonempty");
                    continue;
                }
                if !bound.insert(b.service.as_str()) {
                    ck.err(format!("{p}.service"), format!("service `{}` bound twice", b.service));
                }
                let targets = std::iter::once((format!("{p}.primary"), &b.primary)).chain(
                    b.alternates
                        .iter()
                        .enumerate()
                        .map(|(k, alt)| (format!("{p}.alternates[{k}]"), alt)),
                );
                let mut ok = true;
                for (tp, t) in targets {
                    if !offers.contains_key(t.as_str()) {
                        ck.err(tp, format!("unknown agent `{t}`"));
                        ok = false;
                    } else if !provides(t, &b.service) {
                        ck.err(tp, format!("agent `{t}` does not provide service `{}`", b.service));
                        ok = false;
                    } else if t == &a.id {
                        ck.err(tp, "an agent cannot bind to itself");
                        ok = false;
                    } else {
                        edges.insert(ordered(&a.id, t));
                        deps.entry(a.id.as_str()).or_default().push(t.as_str());
                    }
                }
                if ok && !a.id.is_empty() && !b.primary.is_empty() {
                    bindings.push(BindingSpec {
                        service: ServiceId::new(b.service.clone()),
                        primary: AgentId::new(b.primary.clone()),
                        alternates: b.alternates.iter().map(|x| AgentId::new(x.clone())).collect(),
                    });
                }
            }
            if a.id.is_empty() {
                continue;
            }
            agents.push(AgentSpec {
                id: AgentId::new(a.id.clone()),
                services: a
                    .services
                    .iter()
                    .filter(|s| !s.name.is_empty())
                    .map(|s| {
                        (
                            ServiceId::new(s.name.clone()),
                            ServiceSpec {
                                cost: s.cost,
                                processing_ms: s.processing_ms,
                            },
                        )
                    })
                    .collect(),
                requirements,
                strategy: a.strategy,
                bindings,
            });
        }
        if let Some(cycle_at) = find_cycle(&deps) {
            ck.err("$.agents", format!("dependency cycle through `{cycle_at}`"));
        }
        let top_client = match clients.as_slice() {
            [i] => {
                let a = &self.agents[*i];
                if a.bindings.len() != 1 {
                    ck.err(
                        format!("$.agents[{i}].bindings"),
                        "the top-level client must bind exactly one service",
                    );
                }
                Some(a.id.clone())
            }
            [] => {
                ck.err("$.agents", "no top-level client (an agent providing no services)");
                None
            }
            many => {
                let ids: Vec<&str> = many.iter().map(|i| self.agents[*i].id.as_str()).collect();
                ck.err(
                    "$.agents",
                    format!("exactly one agent may provide no services, found {ids:?}"),
                );
                None
            }
        };

        // background clients
        let mut background = Vec::new();
        for (i, b) in self.background_clients.iter().enumerate() {
            let p = format!("$.background_clients[{i}]");
            if !offers.contains_key(b.provider.as_str()) || b.provider.is_empty() {
                ck.err(format!("{p}.provider"), format!("unknown agent `{}`", b.provider));
                continue;
            }
            if !provides(&b.provider, &b.service) {
                ck.err(
                    format!("{p}.service"),
                    format!("agent `{}` does not provide service `{}`", b.provider, b.service),
                );
                continue;
            }
            if b.id.is_empty() {
                continue;
            }
            edges.insert(ordered(&b.id, &b.provider));
            background.push(BackgroundClient {
                id: AgentId::new(b.id.clone()),
                service: ServiceId::new(b.service.clone()),
                provider: AgentId::new(b.provider.clone()),
                requests_per_episode: b.requests_per_episode,
            });
        }

        // failures
        let mut failures = Vec::new();
        let mut failure_ids = BTreeSet::new();
        for (i, f) in self.failures.iter().enumerate() {
            let p = format!("$.failures[{i}]");
            if f.id.is_empty() {
                ck.err(format!("{p}.id"), "must be nonempty");
            } else if !failure_ids.insert(f.id.as_str()) {
                ck.err(format!("{p}.id"), format!("duplicate failure id `{}`", f.id));
            }
            if f.onset_episode == 0 || f.onset_episode > run.episodes {
                ck.err(
                    format!("{p}.onset_episode"),
                    format!("onset {} outside episodes 1..={}", f.onset_episode, run.episodes),
                );
            }
            ck.finite_nonneg(format!("{p}.penalty_ms"), f.penalty_ms);
            let wants_agent = matches!(f.kind, FailureKind::Provider | FailureKind::Both);
            let wants_link = matches!(f.kind, FailureKind::Link | FailureKind::Both);
            let mut agent = None;
            let mut link = None;
            match (&f.agent, wants_agent) {
                (Some(a), true) => {
                    if offers.get(a.as_str()).is_some_and(|s| !s.is_empty()) {
                        agent = Some(AgentId::new(a.clone()));
                    } else {
                        ck.err(format!("{p}.agent"), format!("unknown provider `{a}`"));
                    }
                }
                (None, true) => ck.err(format!("{p}.agent"), "required for this kind"),
                (Some(_), false) => ck.err(format!("{p}.agent"), "not allowed for a link failure"),
                (None, false) => {}
            }
            match (&f.link, wants_link) {
                (Some([a, b]), true) => {
                    let mut ok = true;
                    for (k, end) in [a, b].into_iter().enumerate() {
                        if !offers.contains_key(end.as_str()) {
                            ck.err(format!("{p}.link[{k}]"), format!("unknown agent `{end}`"));
                            ok = false;
                        }
                    }
                    if ok && a == b {
                        ck.err(format!("{p}.link"), "link endpoints must differ");
                    } else if ok && !edges.contains(&ordered(a, b)) {
                        ck.err(format!("{p}.link"), format!("`{a}` and `{b}` are not bound to each other"));
                    } else if ok {
                        link = Some((AgentId::new(a.clone()), AgentId::new(b.clone())));
                    }
                }
                (None, true) => ck.err(format!("{p}.link"), "required for this kind"),
                (Some(_), false) => ck.err(format!("{p}.link"), "not allowed for a provider failure"),
                (None, false) => {}
            }
            if !f.id.is_empty() {
                failures.push(Failure {
                    id: f.id.clone(),
                    kind: f.kind,
                    agent,
                    link,
                    onset_episode: f.onset_episode,
                    penalty_ms: f.penalty_ms,
                });
            }
        }

        // run
        if run.episodes == 0 {
            ck.err("$.run.episodes", "must be at least 1");
        }
        if !(run.episode_gap_ms.is_finite() && run.episode_gap_ms > 0.0) {
            ck.err("$.run.episode_gap_ms", "must be positive");
        }
        if let Some(d) = run.probe_deadline_ms {
            if !(d.is_finite() && d > 0.0) {
                ck.err("$.run.probe_deadline_ms", "must be positive");
            }
        }
        match run.probe_quota {
            Some(0) => ck.err("$.run.probe_quota", "must be at least 1"),
            None if run.probe_deadline_ms.is_none() => ck.err(
                "$.run",
                "a probe needs probe_deadline_ms or probe_quota",
            ),
            _ => {}
        }
        if !(0.0..=1.0).contains(&run.threshold) {
            ck.err("$.run.threshold", "must lie in [0, 1]");
        }
        ck.finite_nonneg("$.run.processing_jitter_ms".into(), run.processing_jitter_ms);
        let window = run.background_window_ms.unwrap_or([0.0, run.episode_gap_ms]);
        if !(0.0 <= window[0] && window[0] <= window[1] && window[1] <= run.episode_gap_ms) {
            ck.err(
                "$.run.background_window_ms",
                format!("must satisfy 0 <= start <= end <= episode_gap_ms, got {window:?}"),
            );
        }
        let give_up_ms = run
            .give_up_ms
            .unwrap_or(10.0 * run.probe_deadline_ms.unwrap_or(DEFAULT_PROBE_DEADLINE_MS));
        if !(give_up_ms.is_finite() && give_up_ms > 0.0) {
            ck.err("$.run.give_up_ms", "must be positive");
        }
        if run.event_cap == 0 {
            ck.err("$.run.event_cap", "must be at least 1");
        }

        if !ck.issues.is_empty() {
            return Err(ScenarioError::Invalid(ck.issues));
        }
        Ok(Scenario {
            name: self.name.clone(),
            features,
            agents,
            top_client: AgentId::new(top_client.expect("checked above")),
            background,
            failures,
            run: RunSettings {
                episodes: run.episodes,
                episode_gap_ms: run.episode_gap_ms,
                probe_deadline_ms: run.probe_deadline_ms,
                probe_quota: run.probe_quota,
                threshold: run.threshold,
                seed: run.seed,
                background_window_ms: (window[0], window[1]),
                processing_jitter_ms: run.processing_jitter_ms,
                give_up_ms,
                event_cap: run.event_cap,
            },
        })
    }
}

fn ordered(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

fn find_cycle(deps: &BTreeMap<&str, Vec<&str>>) -> Option<String> {
    // 0 unvisited, 1 on stack, 2 done
    fn visit<'a>(
        n: &'a str,
        deps: &BTreeMap<&'a str, Vec<&'a str>>,
        state: &mut BTreeMap<&'a str, u8>,
    ) -> Option<String> {
        match state.get(n) {
            Some(1) => return Some(n.to_string()),
            Some(2) => return None,
            _ => {}
        }
        state.insert(n, 1);
        for m in deps.get(n).into_iter().flatten() {
            if let Some(c) = visit(m, deps, state) {
                return Some(c);
            }
        }
        state.insert(n, 2);
        None
    }
    let mut state = BTreeMap::new();
    deps.keys().find_map(|n| visit(n, deps, &mut state))
}
