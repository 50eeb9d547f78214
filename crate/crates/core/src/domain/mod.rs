//! Services, quality features and requirements, messages and interaction
//! traces.

mod constraint;
mod trace;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::protocol::{Payload, Performative};

pub use constraint::{parse_constraint, CmpOp, Constraint, EvalError, ParseError};
pub use trace::{InteractionTrace, TraceError, TraceStore};

/// Quality feature measured by every client in the simulation.
pub const RESPONSE_TIME: &str = "response_time";

macro_rules! name_id {
    ($(#[$m:meta])* $name:ident) => {
        $(#[$m])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(String);

        impl $name {
            /// Panics on an empty name.
            pub fn new(name: impl Into<String>) -> Self {
                let name = name.into();
                assert!(!name.is_empty(), concat!(stringify!($name), " must be nonempty"));
                Self(name)
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self::new(s)
            }
        }
    };
}

name_id!(
    /// An action an agent can perform for others.
    ServiceId
);
name_id!(AgentId);

macro_rules! counter_id {
    ($name:ident, $prefix:literal) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        pub struct $name(pub u64);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, "{}"), self.0)
            }
        }
    };
}

counter_id!(MessageId, "#");
counter_id!(ConversationId, "#");

/// Monotonic source of message and conversation identifiers.
#[derive(Debug, Clone, Default)]
pub struct IdSource {
    next_message: u64,
    next_conversation: u64,
}

impl IdSource {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn message(&mut self) -> MessageId {
        self.next_message += 1;
        MessageId(self.next_message)
    }

    pub fn conversation(&mut self) -> ConversationId {
        self.next_conversation += 1;
        ConversationId(self.next_conversation)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QualityFeature {
    pub name: String,
    pub unit: String,
}

impl QualityFeature {
    pub fn new(name: impl Into<String>, unit: impl Into<String>) -> Self {
        let name = name.into();
        assert!(!name.is_empty(), "quality feature name must be nonempty");
        Self {
            name,
            unit: unit.into(),
        }
    }

    pub fn response_time() -> Self {
        Self::new(RESPONSE_TIME, "ms")
    }
}

/// Partial mapping from quality feature to the constraint its measurements
/// must satisfy.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct QualityRequirement {
    constraints: BTreeMap<String, Constraint>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("constraint for `{mapped}` references undeclared feature `{feature}`")]
pub struct UndeclaredFeature {
    pub mapped: String,
    pub feature: String,
}

impl QualityRequirement {
    pub fn new() -> Self {
        Self::default()
    }

    /// Maps `feature` to `constraint`; every leaf must reference one of
    /// `declared` (or `feature` itself).
    pub fn insert(
        &mut self,
        feature: &str,
        constraint: Constraint,
        declared: &[&str],
    ) -> Result<(), UndeclaredFeature> {
        for f in constraint.features() {
            if f != feature && !declared.contains(&f) {
                return Err(UndeclaredFeature {
                    mapped: feature.to_string(),
                    feature: f.to_string(),
                });
            }
        }
        self.constraints.insert(feature.to_string(), constraint);
        Ok(())
    }

    pub fn get(&self, feature: &str) -> Option<&Constraint> {
        self.constraints.get(feature)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Constraint)> {
        self.constraints.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn is_empty(&self) -> bool {
        self.constraints.is_empty()
    }

    /// Features whose constraint evaluates false on `measured`.
    pub fn violated(&self, measured: &Measurements) -> Result<Vec<String>, EvalError> {
        let mut out = Vec::new();
        for (feature, c) in &self.constraints {
            if !c.eval(measured)? {
                out.push(feature.clone());
            }
        }
        Ok(out)
    }
}

pub type Measurements = BTreeMap<String, f64>;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Receiver {
    Agent(AgentId),
    Broadcast,
}

impl fmt::Display for Receiver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Receiver::Agent(a) => a.fmt(f),
            Receiver::Broadcast => f.write_str("*"),
        }
    }
}

/// Coarse message type; every performative maps onto exactly one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MessageType {
    Request,
    Inform,
    Refuse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub id_m: MessageId,
    pub id_c: ConversationId,
    pub sender: AgentId,
    pub receiver: Receiver,
    pub performative: Performative,
    pub service: Option<ServiceId>,
    pub payload: Payload,
}

impl Message {
    pub fn message_type(&self) -> MessageType {
        self.performative.message_type()
    }

    pub fn receiver_agent(&self) -> Option<&AgentId> {
        match &self.receiver {
            Receiver::Agent(a) => Some(a),
            Receiver::Broadcast => None,
        }
    }

    /// `id_m|id_c|sender|receiver|performative|service|payload`
    pub fn log_line(&self) -> String {
        format!(
            "{}|{}|{}|{}|{}|{}|{}",
            self.id_m.0,
            self.id_c.0,
            self.sender,
            self.receiver,
            self.performative,
            self.service.as_ref().map(ServiceId::as_str).unwrap_or("-"),
            self.payload
        )
    }
}
