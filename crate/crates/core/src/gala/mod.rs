//! Gradient-aligned layer adaptation.
//!
//! Each test-time step proposes `u = -lr * grad` for every parameter group, scores
//! the group by the cosine between `u` and `u + TD`, where `TD` is the displacement of
//! the group since its anchor, and applies the update only to groups that pass the
//! threshold. Anchors are refreshed every `window` steps; the first sample after a
//! refresh updates every group.

mod criterion;
mod engine;
mod grouping;

pub use criterion::{angle_between, cosine_alignment, cosine_via_decomposition, total_displacement};
pub use engine::{
    apply_masked_update, decide, maybe_reset, warmup_scale, AnchorState, Gala, SelectionDecision, UpdateProposal,
};
pub use grouping::{ParamGroup, ParameterGrouping};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Number of steps between anchor refreshes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Window {
    Steps(u64),
    Infinite,
}

impl Window {
    pub fn steps(&self) -> Option<u64> {
        match self {
            Window::Steps(s) => Some(*s),
            Window::Infinite => None,
        }
    }
}

impl fmt::Display for Window {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Window::Steps(s) => write!(f, "{s}"),
            Window::Infinite => f.write_str("inf"),
        }
    }
}

impl FromStr for Window {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "inf" | "infinite" | "none" => Ok(Window::Infinite),
            other => match other.parse::<u64>() {
                Ok(0) | Err(_) => Err(Error::config(format!("invalid window size {other:?}"))),
                Ok(n) => Ok(Window::Steps(n)),
            },
        }
    }
}

// Serialized as an integer or the string "inf".
#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum WindowRepr {
    Steps(u64),
    Word(String),
}

impl Serialize for Window {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Window::Steps(n) => WindowRepr::Steps(*n),
            Window::Infinite => WindowRepr::Word("inf".into()),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Window {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match WindowRepr::deserialize(d)? {
            WindowRepr::Steps(0) => Err(serde::de::Error::custom("window size must be positive")),
            WindowRepr::Steps(n) => Ok(Window::Steps(n)),
            WindowRepr::Word(w) => w.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// Update at most the single best-aligned layer.
    SingleLayer,
    /// Update every layer above the threshold.
    MultiLayer,
    /// Update at most the single best-aligned block of layers.
    Block,
}

impl FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single_layer" => Ok(Granularity::SingleLayer),
            "multi_layer" => Ok(Granularity::MultiLayer),
            "block" => Ok(Granularity::Block),
            other => Err(Error::config(format!("unknown granularity {other:?}"))),
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Granularity::SingleLayer => "single_layer",
            Granularity::MultiLayer => "multi_layer",
            Granularity::Block => "block",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarmupMode {
    /// The `j`-th sample of a window is scaled by `j / warmup_len` while `j <= warmup_len`.
    #[default]
    LinearRamp,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GalaConfig {
    pub threshold: f64,
    pub window: Window,
    pub granularity: Granularity,
    /// Block count when `granularity` is `Block`.
    pub blocks: usize,
    pub warmup_len: u64,
    pub warmup_mode: WarmupMode,
    pub epsilon: f64,
}

impl Default for GalaConfig {
    fn default() -> Self {
        Self {
            threshold: 0.75,
            window: Window::Steps(20),
            granularity: Granularity::SingleLayer,
            blocks: 4,
            warmup_len: 3,
            warmup_mode: WarmupMode::LinearRamp,
            epsilon: 1e-12,
        }
    }
}

impl GalaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > -1.0 - f64::EPSILON && self.threshold <= 1.0) {
            return Err(Error::config(format!("threshold {} outside [-1, 1]", self.threshold)));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config("epsilon must be a small positive number"));
        }
        if self.granularity == Granularity::Block && self.blocks == 0 {
            return Err(Error::config("blocks must be positive"));
        }
        Ok(())
    }

    /// Threshold `-1`, every layer, no warm-up: reduces to plain all-layer SGD.
    pub fn permissive() -> Self {
        Self {
            threshold: -1.0,
            granularity: Granularity::MultiLayer,
            warmup_len: 0,
            warmup_mode: WarmupMode::None,
            ..Self::default()
        }
    }
}
