//! Run configuration files: `[model]`, `[codec]`, `[train]`, `[sampler]`
//! and `[data]` sections layered over a named preset.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::codec::CodecConfig;
use crate::dit::ModelConfig;
use crate::samplers::{GuidanceConfig, SamplerConfig, SamplerKind};
use crate::toydata::NULL_TOKEN;
use crate::trainer::TrainConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Toy,
    PaperProfile,
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Toy => "toy",
            Preset::PaperProfile => "paper-profile",
        })
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Preset::Toy),
            "paper-profile" => Ok(Preset::PaperProfile),
            _ => Err(Error::Usage(format!("unknown preset {s:?} (expected toy or paper-profile)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSection {
    pub kind: SamplerKind,
    pub steps: usize,
    pub eta: f64,
    pub seed: u64,
    pub cfg_scale: f64,
    pub null_condition: bool,
}

impl SamplerSection {
    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            kind: self.kind,
            steps: self.steps,
            eta: self.eta,
            seed: self.seed,
        }
    }

    pub fn guidance(&self) -> GuidanceConfig {
        GuidanceConfig {
            omega: self.cfg_scale,
            null_caption: vec![NULL_TOKEN],
            null_condition: self.null_condition,
            batched: true,
        }
    }
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection {
            kind: SamplerKind::Ddim,
            steps: 50,
            eta: 0.0,
            seed: 0,
            cfg_scale: 4.0,
            null_condition: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub n: u64,
    pub seed: u64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub codec: CodecConfig,
    pub train: TrainConfig,
    pub sampler: SamplerSection,
    pub data: DataSection,
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Toy => RunConfig {
                model: ModelConfig::toy(),
                codec: CodecConfig::haar(2),
                train: TrainConfig::toy(),
                sampler: SamplerSection::default(),
                data: DataSection { n: 1024, seed: 7, size: 32 },
            },
            Preset::PaperProfile => RunConfig {
                model: ModelConfig::paper_profile(),
                codec: CodecConfig::haar(2),
                train: TrainConfig::paper_profile(),
                sampler: SamplerSection::default(),
                data: DataSection { n: 1024, seed: 7, size: 64 },
            },
        }
    }

    /// Overlays TOML `text` on `self`. Keys must name existing fields; a
    /// top-level `preset` key is accepted and ignored here.
    pub fn merge_toml(&self, text: &str) -> Result<Self> {
        let overlay: toml::Table = text.parse().map_err(|e| Error::Config(format!("invalid config file: {e}")))?;
        let mut base = toml::Table::try_from(self).map_err(|e| Error::State(e.to_string()))?;
        for (section, value) in overlay {
            if section == "preset" {
                continue;
            }
            let Some(target) = base.get_mut(&section) else {
                return Err(Error::Config(format!("unknown config section [{section}]")));
            };
            let (Some(dst), toml::Value::Table(src)) = (target.as_table_mut(), value) else {
                return Err(Error::Config(format!("[{section}] must be a table")));
            };
            for (k, v) in src {
                if !dst.contains_key(&k) {
                    return Err(Error::Config(format!("unknown key {section}.{k}")));
                }
                dst.insert(k, v);
            }
        }
        toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("invalid config value: {e}")))
    }

    /// Preset named in the file (or `fallback`), then the file's overrides.
    pub fn load(path: &Path, fallback: Preset) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let preset = match table.get("preset") {
            Some(toml::Value::String(s)) => s.parse()?,
            Some(_) => return Err(Error::Config("preset must be a string".into())),
            None => fallback,
        };
        Self::preset(preset).merge_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::State(e.to_string()))
    }

    /// Checks every section and that the codec produces the model's latent width.
    pub fn validate_for_training(&self) -> Result<()> {
        self.model.validate()?;
        self.codec.validate()?;
        self.train.validate()?;
        let (c, _, _) = self.codec.latent_shape(3, self.data.size, self.data.size)?;
        if c != self.model.latent_channels {
            return Err(Error::Config(format!(
                "codec yields {c} latent channels, model expects {}",
                self.model.latent_channels
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlay_and_unknown_keys() {
        let base = RunConfig::preset(Preset::Toy);
        let merged = base.merge_toml("preset = \"toy\"\n[train]\nbase_lr = 0.5\n[model]\ndepth = 2\n").unwrap();
        assert_eq!(merged.train.base_lr, 0.5);
        assert_eq!(merged.model.depth, 2);
        assert_eq!(merged.model.hidden, base.model.hidden);
        assert!(matches!(base.merge_toml("[train]\nlearning_rate = 1.0\n"), Err(Error::Config(_))));
        assert!(matches!(base.merge_toml("[optimizer]\nx = 1\n"), Err(Error::Config(_))));
        assert!(matches!(base.merge_toml("[train]\nbase_lr = \"fast\"\n"), Err(Error::Config(_))));
    }

    #[test]
    fn roundtrip_through_toml() {
        let c = RunConfig::preset(Preset::PaperProfile);
        assert_eq!(RunConfig::preset(Preset::Toy).merge_toml(&c.to_toml().unwrap()).unwrap(), c);
    }

    #[test]
    fn toy_is_trainable_and_paper_profile_is_not() {
        RunConfig::preset(Preset::Toy).validate_for_training().unwrap();
        assert!(RunConfig::preset(Preset::PaperProfile).validate_for_training().is_err());
        assert!(matches!("huge".parse::<Preset>(), Err(Error::Usage(_))));
    }
}
