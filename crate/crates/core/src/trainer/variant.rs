use serde::{Deserialize, Serialize};

use crate::datakit::View;
use crate::error::{Error, Result};
use crate::losses::{LossConfig, TripletVariant, WeightMode};

/// Full method and its ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    WithoutSa,
    /// First-person attention vector in the attention loss replaced by the
    /// pooled raw features.
    #[serde(rename = "cnn_sa_1")]
    CnnSa1,
    #[serde(rename = "cnn_sa_3")]
    CnnSa3,
    /// First-person embeddings computed from unfiltered features.
    #[serde(rename = "cnn_tl_1")]
    CnnTl1,
    #[serde(rename = "cnn_tl_3")]
    CnnTl3,
    LowlevelTw,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::WithoutSa,
        Variant::CnnSa1,
        Variant::CnnSa3,
        Variant::CnnTl1,
        Variant::CnnTl3,
        Variant::LowlevelTw,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WithoutSa => "without_sa",
            Variant::CnnSa1 => "cnn_sa_1",
            Variant::CnnSa3 => "cnn_sa_3",
            Variant::CnnTl1 => "cnn_tl_1",
            Variant::CnnTl3 => "cnn_tl_3",
            Variant::LowlevelTw => "lowlevel_tw",
        }
    }

    /// Whether embeddings of frames from `view` are attention-filtered.
    pub fn filters(self, view: View) -> bool {
        !matches!(
            (self, view),
            (Variant::CnnTl1, View::First) | (Variant::CnnTl3, View::Third)
        )
    }

    /// Whether the attention loss takes the raw pooled features in place of
    /// the attention vector for `view`.
    pub fn raw_in_attention_loss(self, view: View) -> bool {
        matches!(
            (self, view),
            (Variant::CnnSa1, View::First) | (Variant::CnnSa3, View::Third)
        )
    }

    pub fn loss_config(self, lambda: f64, triplet_variant: TripletVariant, denom_epsilon: f64) -> LossConfig {
        LossConfig {
            lambda: if self == Variant::WithoutSa { 0.0 } else { lambda },
            triplet_variant,
            denom_epsilon,
            weight_mode: if self == Variant::LowlevelTw {
                WeightMode::LowlevelGradient
            } else {
                WeightMode::Learned
            },
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant '{s}'")))
    }
}
