use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Mechanism {
    Late,
    Early,
    Mid,
    Skip,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EarlyConcat {
    #[serde(rename = "CHANNEL")]
    Channel,
    #[serde(rename = "EDGE")]
    Edge,
    #[serde(rename = "STACK3D")]
    Stack3d,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MidMapping {
    #[serde(rename = "FG_HR")]
    FgHr,
    #[serde(rename = "SEMANTIC")]
    Semantic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Modeling {
    Separate,
    Tied,
    Joint,
}

/// Where FiLM acts inside a residual block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilmPlacement {
    /// After the second normalization, before the residual add.
    PostNorm,
    /// After the second convolution, before its normalization.
    PreNorm,
}

macro_rules! display_via_serde {
    ($($t:ty),*) => {$(
        impl std::fmt::Display for $t {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                let s = serde_json::to_value(self).map_err(|_| std::fmt::Error)?;
                f.write_str(s.as_str().unwrap_or_default())
            }
        }
        impl std::str::FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                serde_json::from_value(serde_json::Value::String(s.to_string()))
                    .map_err(|_| Error::config(format!("unknown {} value {s:?}", stringify!($t))))
            }
        }
    )*};
}
display_via_serde!(Mechanism, EarlyConcat, MidMapping, Modeling, FilmPlacement);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StemSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub channels: usize,
    pub stride: usize,
}

/// Stem convolution, four residual blocks, and a fully connected head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub stem: StemSpec,
    pub blocks: Vec<BlockSpec>,
    pub embed_dim: usize,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self::with_widths(32, [64, 128, 256, 256], 512)
    }
}

impl BackboneSpec {
    /// Standard layout (5×5 stride-2 stem, strides 2,2,2,1) with custom widths.
    pub fn with_widths(stem: usize, blocks: [usize; 4], embed_dim: usize) -> Self {
        let strides = [2, 2, 2, 1];
        Self {
            stem: StemSpec {
                channels: stem,
                kernel: 5,
                stride: 2,
            },
            blocks: blocks
                .iter()
                .zip(strides)
                .map(|(&channels, stride)| BlockSpec { channels, stride })
                .collect(),
            embed_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.len() != 4 {
            return Err(Error::config(format!(
                "fusion.backbone.blocks must list exactly 4 blocks, got {}",
                self.blocks.len()
            )));
        }
        let channels = std::iter::once(self.stem.channels).chain(self.blocks.iter().map(|b| b.channels));
        for c in channels {
            if c == 0 || c % crate::numerics::NORM_GROUPS.min(c) != 0 {
                return Err(Error::config(format!("fusion.backbone channel count {c} must be a positive multiple of the group count")));
            }
        }
        if self.stem.kernel == 0 || self.stem.kernel.is_multiple_of(2) || self.stem.stride == 0 {
            return Err(Error::config("fusion.backbone.stem needs an odd kernel and positive stride"));
        }
        if self.blocks.iter().any(|b| b.stride == 0) || self.embed_dim == 0 {
            return Err(Error::config("fusion.backbone strides and embed_dim must be positive"));
        }
        Ok(())
    }

    /// Spatial size after the stem and after each block for an `h×w` input.
    pub fn schedule(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        let pad = self.stem.kernel / 2;
        let conv = |n: usize, k: usize, s: usize, p: usize| (n + 2 * p).saturating_sub(k) / s + 1;
        let mut out = vec![(conv(h, self.stem.kernel, self.stem.stride, pad), conv(w, self.stem.kernel, self.stem.stride, pad))];
        for b in &self.blocks {
            let (ph, pw) = *out.last().expect("non-empty");
            out.push((conv(ph, 3, b.stride, 1), conv(pw, 3, b.stride, 1)));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub mechanism: Mechanism,
    pub early_concat: EarlyConcat,
    pub mid_mapping: MidMapping,
    pub mid_depth: usize,
    pub skip_k: usize,
    /// Width of the keypoint-branch projection in skip fusion.
    pub skip_hidden: usize,
    /// Defaults to JOINT for early fusion and SEPARATE otherwise.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub modeling: Option<Modeling>,
    pub film_placement: FilmPlacement,
    pub backbone: BackboneSpec,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            mechanism: Mechanism::Mid,
            early_concat: EarlyConcat::Channel,
            mid_mapping: MidMapping::FgHr,
            mid_depth: 2,
            skip_k: crate::keypoints::DEFAULT_TOP_K,
            skip_hidden: 64,
            modeling: None,
            film_placement: FilmPlacement::PostNorm,
            backbone: BackboneSpec::default(),
        }
    }
}

impl FusionConfig {
    pub fn with_mechanism(mechanism: Mechanism) -> Self {
        Self {
            mechanism,
            ..Self::default()
        }
    }

    pub fn modeling(&self) -> Modeling {
        self.modeling.unwrap_or(match self.mechanism {
            Mechanism::Early => Modeling::Joint,
            _ => Modeling::Separate,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let modeling = self.modeling();
        let ok = match self.mechanism {
            Mechanism::Early => modeling == Modeling::Joint,
            Mechanism::Late | Mechanism::Skip => matches!(modeling, Modeling::Separate | Modeling::Tied),
            Mechanism::Mid => modeling == Modeling::Separate,
        };
        if !ok {
            return Err(Error::config(format!(
                "fusion.modeling {modeling} is not valid for mechanism {}",
                self.mechanism
            )));
        }
        if self.mechanism == Mechanism::Mid && ![1, 2, 4].contains(&self.mid_depth) {
            return Err(Error::config(format!("fusion.mid_depth must be 1, 2 or 4, got {}", self.mid_depth)));
        }
        if self.skip_k == 0 || self.skip_hidden == 0 {
            return Err(Error::config("fusion.skip_k and fusion.skip_hidden must be positive"));
        }
        Ok(())
    }
}
