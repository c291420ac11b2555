//! Identifier newtypes shared across the crate.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.pad(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                $name(s.to_owned())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                $name(s)
            }
        }
    };
}

string_id!(
    /// Opaque experiment id: a fixed-width hex millisecond timestamp followed by a random
    /// suffix, so ids sort by creation time.
    ExperimentId
);
string_id!(RunId);
string_id!(SuggestionId);

impl ExperimentId {
    pub fn generate() -> Self {
        let millis = chrono::Utc::now().timestamp_millis().max(0) as u64;
        let suffix: u32 = rand::rng().random_range(0..0x10_0000);
        ExperimentId(format!("{millis:011x}{suffix:05x}"))
    }

    pub fn run_id(&self, index: u64) -> RunId {
        RunId(format!("{}-r{index:04}", self.0))
    }

    pub fn suggestion_id(&self, index: u64) -> SuggestionId {
        SuggestionId(format!("{}-s{index:04}", self.0))
    }
}

impl RunId {
    /// The per-experiment part of the id (`r0003`), used as a compact log prefix.
    pub fn short(&self) -> &str {
        self.0.rsplit('-').next().unwrap_or(&self.0)
    }
}

/// Cluster-wide node number. Ids are never reused within a cluster's lifetime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(&format!("node-{}", self.0))
    }
}
