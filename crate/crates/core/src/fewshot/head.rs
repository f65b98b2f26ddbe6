use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Feature scale of the prototype matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Global,
    Local,
    Mix,
}

impl Scale {
    pub const ALL: [Scale; 3] = [Scale::Global, Scale::Local, Scale::Mix];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Scale::Global => "global",
            Scale::Local => "local",
            Scale::Mix => "mix",
        }
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "global" => Ok(Scale::Global),
            "local" => Ok(Scale::Local),
            "mix" => Ok(Scale::Mix),
            o => Err(Error::InvalidArgument(format!("unknown scale `{o}` (global, local, mix)"))),
        }
    }
}

/// Parse a comma-separated scale list such as `global,local,mix`.
pub fn parse_scales(s: &str) -> Result<Vec<Scale>> {
    s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect()
}

/// Join scales as `global+local+mix` for reports.
pub fn scales_label(scales: &[Scale]) -> String {
    scales.iter().map(|s| s.as_str()).collect::<Vec<_>>().join("+")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Euclidean,
    Cosine,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Euclidean => "euclidean",
            Metric::Cosine => "cosine",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Metric::Euclidean),
            "cosine" => Ok(Metric::Cosine),
            o => Err(Error::InvalidArgument(format!("unknown metric `{o}` (euclidean, cosine)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    /// Enabled scales in canonical order; confidences are summed over these.
    pub scales: Vec<Scale>,
    pub metric: Metric,
    /// Distances are divided by this before exponentiation.
    pub temperature: f64,
    /// Use the squared Euclidean distance.
    #[serde(default)]
    pub squared: bool,
    /// Whether the global channel starts from a pretrained checkpoint.
    #[serde(default)]
    pub pretrained: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            scales: Scale::ALL.to_vec(),
            metric: Metric::Euclidean,
            temperature: 1.0,
            squared: false,
            pretrained: false,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::config("fewshot.scales", "at least one scale must be enabled"));
        }
        let mut sorted = self.scales.clone();
        sorted.sort();
        sorted.dedup();
        if sorted != self.scales {
            return Err(Error::config(
                "fewshot.scales",
                "scales must be distinct and listed as global, local, mix in that order",
            ));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::config("fewshot.temperature", format!("{} must be finite and positive", self.temperature)));
        }
        Ok(())
    }

    pub fn uses(&self, scale: Scale) -> bool {
        self.scales.contains(&scale)
    }

    pub fn needs_projector(&self) -> bool {
        self.uses(Scale::Mix)
    }
}

/// Head configuration for an ablation row. Scales are deduplicated and put
/// in canonical order.
pub fn ablation_config(scales: &[Scale], metric: Metric, pretrained: bool) -> Result<HeadConfig> {
    let mut s = scales.to_vec();
    s.sort();
    s.dedup();
    let cfg = HeadConfig {
        scales: s,
        metric,
        pretrained,
        ..HeadConfig::default()
    };
    cfg.validate()?;
    Ok(cfg)
}
