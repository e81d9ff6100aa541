use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::ValidationError;

/// A backbone × role pair; the unit the router distributes weight over.
///
/// Rendered as `backbone::role`. Ordering is by backbone, then role, and is
/// the tie-break order used everywhere an "agent id ascending" rule applies.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct AgentId {
    pub backbone: String,
    pub role: String,
}

impl AgentId {
    pub fn new(backbone: impl Into<String>, role: impl Into<String>) -> Self {
        Self {
            backbone: backbone.into(),
            role: role.into(),
        }
    }
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}::{}", self.backbone, self.role)
    }
}

impl FromStr for AgentId {
    type Err = ValidationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once("::") {
            Some((b, r)) if !b.is_empty() && !r.is_empty() && !r.contains("::") => {
                Ok(AgentId::new(b, r))
            }
            _ => Err(ValidationError::new(format!(
                "agent id {s:?} is not of the form backbone::role"
            ))),
        }
    }
}

impl TryFrom<String> for AgentId {
    type Error = ValidationError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<AgentId> for String {
    fn from(id: AgentId) -> Self {
        id.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_string() {
        let id = AgentId::new("gpt_oss_20b", "react_reflect");
        assert_eq!(id.to_string(), "gpt_oss_20b::react_reflect");
        assert_eq!(id.to_string().parse::<AgentId>().unwrap(), id);
        assert!("nocolon".parse::<AgentId>().is_err());
        assert!("a::b::c".parse::<AgentId>().is_err());
    }
}
