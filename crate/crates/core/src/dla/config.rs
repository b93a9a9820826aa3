//! Ablation switches for the attention module. Each variant has a fixed
//! lowercase name used in config files and on the command line.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::Error;

macro_rules! named_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn name(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }

            /// Allowed names joined with `|`.
            pub fn choices() -> String {
                Self::ALL.iter().map(|v| v.name()).collect::<Vec<_>>().join("|")
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self, Error> {
                Self::ALL.iter().copied().find(|v| v.name() == s).ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "unknown {} '{s}' (allowed: {})",
                        stringify!($name),
                        Self::choices()
                    ))
                })
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(self.name())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

named_enum!(
    /// Which spatial quantities feed the position encoding.
    PeVariant {
        NeighborOnly => "neighbor_only",
        RelativeOnly => "relative_only",
        RelativeDist => "relative_dist",
        CenterRelativeDist => "center_relative_dist",
        NeighborRelativeDist => "neighbor_relative_dist",
        All => "all",
    }
);

named_enum!(
    /// Where the position encoding enters the self-attention block.
    PePlacement {
        Both => "both",
        MappingOnly => "mapping_only",
        ValuesOnly => "values_only",
        None => "none",
    }
);

named_enum!(
    /// Neighbourhood pooling after self-attention.
    PoolMode {
        Attentive => "attentive",
        Max => "max",
        Avg => "avg",
        Passthrough => "passthrough",
        NoPe => "no_pe",
    }
);

named_enum!(
    /// Whether self-attention sums over neighbours or keeps one row per neighbour.
    SaAggregate {
        Sum => "sum",
        PerNeighbor => "per_neighbor",
    }
);

named_enum!(
    /// Batch-norm + ReLU toggle.
    Switch {
        On => "on",
        Off => "off",
    }
);

impl Switch {
    pub fn is_on(self) -> bool {
        self == Switch::On
    }
}

impl From<bool> for Switch {
    fn from(on: bool) -> Self {
        if on {
            Switch::On
        } else {
            Switch::Off
        }
    }
}

impl PeVariant {
    /// Width of the raw per-neighbour vector before the encoding MLP.
    pub fn raw_width(self) -> usize {
        match self {
            PeVariant::NeighborOnly | PeVariant::RelativeOnly => 3,
            PeVariant::RelativeDist => 4,
            PeVariant::CenterRelativeDist | PeVariant::NeighborRelativeDist => 7,
            PeVariant::All => 10,
        }
    }
}

impl PePlacement {
    pub fn in_mapping(self) -> bool {
        matches!(self, PePlacement::Both | PePlacement::MappingOnly)
    }

    pub fn in_values(self) -> bool {
        matches!(self, PePlacement::Both | PePlacement::ValuesOnly)
    }
}

/// All ablation axes of one attention module.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DlaConfig {
    #[serde(rename = "pe.variant")]
    pub pe_variant: PeVariant,
    #[serde(rename = "pe.bn")]
    pub pe_bn: Switch,
    #[serde(rename = "sa.pe_placement")]
    pub sa_pe_placement: PePlacement,
    #[serde(rename = "sa.bn")]
    pub sa_bn: Switch,
    #[serde(rename = "sa.aggregate")]
    pub sa_aggregate: SaAggregate,
    #[serde(rename = "ap.mode")]
    pub ap_mode: PoolMode,
}

impl Default for DlaConfig {
    fn default() -> Self {
        DlaConfig {
            pe_variant: PeVariant::RelativeDist,
            pe_bn: Switch::On,
            sa_pe_placement: PePlacement::Both,
            sa_bn: Switch::On,
            sa_aggregate: SaAggregate::Sum,
            ap_mode: PoolMode::Attentive,
        }
    }
}
