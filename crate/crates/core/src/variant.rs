//! Guidance wirings: which source denormalizes which texture normalization.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NormMode {
    Global,
    Local,
}

/// Where a branch takes its `γ`/`β` input from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GuideSource {
    /// Structure encoder features at the same level.
    GlobalStructure,
    /// Previous reconstruction minus the upsampled current texture map.
    LocalResidual,
    /// The texture map itself.
    Texture,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Branch {
    pub norm: NormMode,
    pub source: GuideSource,
    /// 2 for the cascaded "twice" guidance.
    pub passes: usize,
}

const fn br(norm: NormMode, source: GuideSource, passes: usize) -> Branch {
    Branch { norm, source, passes }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum ReconVariant {
    Baseline,
    GlobalToGlobal,
    GlobalToLocal,
    LocalToGlobal,
    LocalToLocal,
    TextureToGlobal,
    TextureToLocal,
    TwiceGlobalLocalToLocalGlobal,
    TwiceGlobalLocalToLocalLocal,
    GlobalTwiceLocalToGlobalLocal,
    TwiceGlobalTextureToGlobalLocal,
    #[default]
    TwiceGlobalLocalToGlobalLocal,
}

use GuideSource::{GlobalStructure as GS, LocalResidual as LR, Texture as TX};
use NormMode::{Global as G, Local as L};

impl ReconVariant {
    /// Ablation table row order, baseline first and the full model last.
    pub const ALL: [ReconVariant; 12] = [
        ReconVariant::Baseline,
        ReconVariant::GlobalToGlobal,
        ReconVariant::GlobalToLocal,
        ReconVariant::LocalToGlobal,
        ReconVariant::LocalToLocal,
        ReconVariant::TextureToGlobal,
        ReconVariant::TextureToLocal,
        ReconVariant::TwiceGlobalLocalToLocalGlobal,
        ReconVariant::TwiceGlobalLocalToLocalLocal,
        ReconVariant::GlobalTwiceLocalToGlobalLocal,
        ReconVariant::TwiceGlobalTextureToGlobalLocal,
        ReconVariant::TwiceGlobalLocalToGlobalLocal,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            ReconVariant::Baseline => "baseline",
            ReconVariant::GlobalToGlobal => "GG",
            ReconVariant::GlobalToLocal => "GL",
            ReconVariant::LocalToGlobal => "LG",
            ReconVariant::LocalToLocal => "LL",
            ReconVariant::TextureToGlobal => "TG",
            ReconVariant::TextureToLocal => "TL",
            ReconVariant::TwiceGlobalLocalToLocalGlobal => "TwoGL_LG",
            ReconVariant::TwiceGlobalLocalToLocalLocal => "TwoGL_LL",
            ReconVariant::GlobalTwiceLocalToGlobalLocal => "G2L_GL",
            ReconVariant::TwiceGlobalTextureToGlobalLocal => "TwoGT_GL",
            ReconVariant::TwiceGlobalLocalToGlobalLocal => "TwoGL_GL",
        }
    }

    /// Row label as printed in ablation tables.
    pub fn label(self) -> &'static str {
        match self {
            ReconVariant::Baseline => "Baseline",
            ReconVariant::GlobalToGlobal => "Global->Global",
            ReconVariant::GlobalToLocal => "Global->Local",
            ReconVariant::LocalToGlobal => "Local->Global",
            ReconVariant::LocalToLocal => "Local->Local",
            ReconVariant::TextureToGlobal => "Texture->Global",
            ReconVariant::TextureToLocal => "Texture->Local",
            ReconVariant::TwiceGlobalLocalToLocalGlobal => "2Global(Local)->Local(Global)",
            ReconVariant::TwiceGlobalLocalToLocalLocal => "2Global(Local)->Local(Local)",
            ReconVariant::GlobalTwiceLocalToGlobalLocal => "Global(2Local)->Global(Local)",
            ReconVariant::TwiceGlobalTextureToGlobalLocal => "2Global(Texture)->Global(Local)",
            ReconVariant::TwiceGlobalLocalToGlobalLocal => "2Global(Local)->Global(Local)",
        }
    }

    pub fn branches(self) -> &'static [Branch] {
        match self {
            ReconVariant::Baseline => &[],
            ReconVariant::GlobalToGlobal => {
                const B: &[Branch] = &[br(G, GS, 1)];
                B
            }
            ReconVariant::GlobalToLocal => {
                const B: &[Branch] = &[br(L, GS, 1)];
                B
            }
            ReconVariant::LocalToGlobal => {
                const B: &[Branch] = &[br(G, LR, 1)];
                B
            }
            ReconVariant::LocalToLocal => {
                const B: &[Branch] = &[br(L, LR, 1)];
                B
            }
            ReconVariant::TextureToGlobal => {
                const B: &[Branch] = &[br(G, TX, 1)];
                B
            }
            ReconVariant::TextureToLocal => {
                const B: &[Branch] = &[br(L, TX, 1)];
                B
            }
            ReconVariant::TwiceGlobalLocalToLocalGlobal => {
                const B: &[Branch] = &[br(L, GS, 2), br(G, LR, 1)];
                B
            }
            ReconVariant::TwiceGlobalLocalToLocalLocal => {
                const B: &[Branch] = &[br(L, GS, 2), br(L, LR, 1)];
                B
            }
            ReconVariant::GlobalTwiceLocalToGlobalLocal => {
                const B: &[Branch] = &[br(G, GS, 1), br(L, LR, 2)];
                B
            }
            ReconVariant::TwiceGlobalTextureToGlobalLocal => {
                const B: &[Branch] = &[br(G, GS, 2), br(L, TX, 1)];
                B
            }
            ReconVariant::TwiceGlobalLocalToGlobalLocal => {
                const B: &[Branch] = &[br(G, GS, 2), br(L, LR, 1)];
                B
            }
        }
    }

    pub fn is_baseline(self) -> bool {
        self == ReconVariant::Baseline
    }

    pub fn uses_structure(self) -> bool {
        self.branches().iter().any(|b| b.source == GS)
    }

    /// Every accepted spelling, for error messages.
    pub fn aliases() -> Vec<String> {
        let mut v = Vec::new();
        for r in Self::ALL {
            v.push(r.tag().to_string());
            v.push(r.label().replace("->", "$\\rightarrow$"));
        }
        v
    }
}

fn normalize_label(s: &str) -> String {
    s.replace("$\\rightarrow$", "->").replace('→', "->").split_whitespace().collect::<String>().to_ascii_lowercase()
}

impl fmt::Display for ReconVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for ReconVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let key = normalize_label(s);
        let key = key.trim_end_matches("(ours)");
        if key == "ours" {
            return Ok(ReconVariant::TwiceGlobalLocalToGlobalLocal);
        }
        Self::ALL
            .into_iter()
            .find(|r| r.tag().eq_ignore_ascii_case(key) || normalize_label(r.label()) == key)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}; valid: {}", Self::aliases().join(", "))))
    }
}

impl Serialize for ReconVariant {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.tag())
    }
}

impl<'de> Deserialize<'de> for ReconVariant {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
