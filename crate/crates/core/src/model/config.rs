use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture variant: the full model or one of the ablations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Decomposition, heterogeneous branches, cross aggregation.
    #[default]
    Full,
    /// Every branch receives the raw window instead of a wavelet component.
    #[serde(rename = "NoMSE")]
    NoMse,
    /// Every component goes through the same three-block conv stack.
    #[serde(rename = "NoHFL")]
    NoHfl,
    /// Branch features are concatenated and classified directly.
    #[serde(rename = "NoCA")]
    NoCa,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoMse, Variant::NoHfl, Variant::NoCa];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "Full",
            Variant::NoMse => "NoMSE",
            Variant::NoHfl => "NoHFL",
            Variant::NoCa => "NoCA",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant {s:?}")))
    }
}

/// What happens to the final approximation component.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LastLevelMode {
    /// Unused.
    #[default]
    #[serde(rename = "NoAC")]
    NoAc,
    /// Concatenated with the deepest detail component as one branch input.
    #[serde(rename = "ConAC")]
    ConAc,
    /// Fed to a branch of its own.
    #[serde(rename = "SepAC")]
    SepAc,
}

impl LastLevelMode {
    pub const ALL: [LastLevelMode; 3] = [LastLevelMode::NoAc, LastLevelMode::ConAc, LastLevelMode::SepAc];

    pub fn name(self) -> &'static str {
        match self {
            LastLevelMode::NoAc => "NoAC",
            LastLevelMode::ConAc => "ConAC",
            LastLevelMode::SepAc => "SepAC",
        }
    }
}

impl std::str::FromStr for LastLevelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LastLevelMode::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown last-level mode {s:?}")))
    }
}

fn default_levels() -> usize {
    3
}
fn default_variant() -> Variant {
    Variant::Full
}
fn default_last_level_mode() -> LastLevelMode {
    LastLevelMode::NoAc
}
fn default_filters() -> usize {
    128
}
fn default_agg_kernels() -> Vec<usize> {
    vec![7, 5, 3]
}
fn default_dropout() -> f64 {
    0.2
}
fn default_leaky_slope() -> f64 {
    0.01
}
fn default_bn_momentum() -> f64 {
    0.1
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MhnnConfig {
    pub channels: usize,
    pub window: usize,
    pub classes: usize,
    #[serde(default = "default_levels")]
    pub levels: usize,
    #[serde(default = "default_variant")]
    pub variant: Variant,
    #[serde(default = "default_last_level_mode")]
    pub last_level_mode: LastLevelMode,
    #[serde(default = "default_filters")]
    pub filters: usize,
    #[serde(default = "default_agg_kernels")]
    pub agg_kernels: Vec<usize>,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_leaky_slope")]
    pub leaky_slope: f64,
    /// Temporal length every branch is aligned to; `ceil(window / 2^levels)` when absent.
    #[serde(default)]
    pub common_length: Option<usize>,
    #[serde(default = "default_bn_momentum")]
    pub bn_momentum: f64,
}

impl MhnnConfig {
    /// Defaults (three levels, no approximation branch, 128 filters).
    pub fn new(channels: usize, window: usize, classes: usize) -> Self {
        Self {
            channels,
            window,
            classes,
            levels: default_levels(),
            variant: default_variant(),
            last_level_mode: default_last_level_mode(),
            filters: default_filters(),
            agg_kernels: default_agg_kernels(),
            dropout: default_dropout(),
            leaky_slope: default_leaky_slope(),
            common_length: None,
            bn_momentum: default_bn_momentum(),
        }
    }

    /// Length of the coarsest component, `ceil(window / 2^levels)`.
    pub fn coarsest_length(&self) -> usize {
        let mut len = self.window;
        for _ in 0..self.levels {
            len = len.div_ceil(2);
        }
        len
    }

    pub fn aligned_length(&self) -> usize {
        self.common_length.unwrap_or_else(|| self.coarsest_length())
    }

    /// Short tag such as `L3_NoAC`.
    pub fn tag(&self) -> String {
        format!("L{}_{}", self.levels, self.last_level_mode.name())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.channels == 0 {
            return fail("channels must be >= 1".into());
        }
        if self.classes < 2 {
            return fail(format!("classes must be >= 2, got {}", self.classes));
        }
        if self.levels == 0 || self.levels >= 31 {
            return fail(format!("levels must be in 1..=30, got {}", self.levels));
        }
        if self.window < (1usize << self.levels) {
            return fail(format!("window {} shorter than 2^levels = {}", self.window, 1usize << self.levels));
        }
        if self.filters == 0 {
            return fail("filters must be >= 1".into());
        }
        if self.agg_kernels.is_empty() || self.agg_kernels.iter().any(|k| k % 2 == 0) {
            return fail(format!("agg_kernels must be nonempty and odd, got {:?}", self.agg_kernels));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return fail(format!("leaky_slope {} outside [0, 1)", self.leaky_slope));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return fail(format!("bn_momentum {} outside [0, 1]", self.bn_momentum));
        }
        let coarsest = self.coarsest_length();
        if let Some(lc) = self.common_length {
            if lc == 0 || lc > coarsest {
                return fail(format!("common_length {lc} must be in 1..={coarsest}"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_tag() {
        let c = MhnnConfig::new(45, 24, 17);
        assert_eq!(c.levels, 3);
        assert_eq!(c.filters, 128);
        assert_eq!(c.aligned_length(), 3);
        assert_eq!(c.tag(), "L3_NoAC");
        c.validate().unwrap();
    }

    #[test]
    fn invalid_configs_name_the_violation() {
        let mut c = MhnnConfig::new(3, 7, 2);
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("window 7"), "{err}");
        c.window = 16;
        c.classes = 1;
        assert!(c.validate().unwrap_err().to_string().contains("classes"));
        c.classes = 3;
        c.agg_kernels = vec![7, 4];
        assert!(c.validate().unwrap_err().to_string().contains("agg_kernels"));
    }

    #[test]
    fn json_rejects_unknown_keys_and_uses_short_names() {
        let c: MhnnConfig = serde_json::from_str(
            r#"{"channels":6,"window":64,"classes":4,"variant":"NoHFL","last_level_mode":"SepAC"}"#,
        )
        .unwrap();
        assert_eq!(c.variant, Variant::NoHfl);
        assert_eq!(c.last_level_mode, LastLevelMode::SepAc);
        assert!(serde_json::from_str::<MhnnConfig>(r#"{"channels":6,"window":64,"classes":4,"bogus":1}"#).is_err());
    }

    #[test]
    fn odd_windows_round_up() {
        let mut c = MhnnConfig::new(3, 200, 6);
        c.levels = 4;
        assert_eq!(c.coarsest_length(), 13);
    }
}
