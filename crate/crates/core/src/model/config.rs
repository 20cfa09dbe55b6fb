use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of general scene classes.
pub const GENERAL_CLASSES: usize = 13;
/// Transparent-object classes plus background.
pub const TRANSPARENCY_CLASSES: usize = 12;
/// Decoder widths supported by the full-size variants.
pub const TPM_CHANNEL_CHOICES: [usize; 4] = [64, 128, 256, 512];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Tiny,
    Small,
    Medium,
    /// Test-sized model for gradient checks and toy training.
    Nano,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Tiny => "tiny",
            Variant::Small => "small",
            Variant::Medium => "medium",
            Variant::Nano => "nano",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tiny" | "t" => Ok(Variant::Tiny),
            "small" | "s" => Ok(Variant::Small),
            "medium" | "m" => Ok(Variant::Medium),
            "nano" | "n" => Ok(Variant::Nano),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum HeadLayout {
    Single { classes: usize },
    Dual { general: usize, transparency: usize },
}

impl HeadLayout {
    pub fn dual() -> Self {
        HeadLayout::Dual {
            general: GENERAL_CLASSES,
            transparency: TRANSPARENCY_CLASSES,
        }
    }

    pub fn single() -> Self {
        HeadLayout::Single {
            classes: GENERAL_CLASSES,
        }
    }

    /// `(name, classes)` for every decoder head, in forward order.
    pub fn heads(&self) -> Vec<(&'static str, usize)> {
        match *self {
            HeadLayout::Single { classes } => vec![("main", classes)],
            HeadLayout::Dual {
                general,
                transparency,
            } => vec![("general", general), ("transparency", transparency)],
        }
    }

    pub fn is_dual(&self) -> bool {
        matches!(self, HeadLayout::Dual { .. })
    }
}

/// Architectural hyperparameters of the pyramid encoder and its decoders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub stage_channels: [usize; 4],
    pub stage_depths: [usize; 4],
    pub stage_heads: [usize; 4],
    pub sr_ratios: [usize; 4],
    pub mlp_ratios: [usize; 4],
    /// Patch size of each stage's embedding (stride equals kernel).
    pub patch_sizes: [usize; 4],
    /// Shared embedding width of the decoder's parsing modules.
    pub tpm_channels: usize,
    pub tpm_mlp_ratio: usize,
    pub heads: HeadLayout,
    /// Training resolution `(H, W)`.
    pub input_size: (usize, usize),
    /// Image resolution the stored position embeddings correspond to; they
    /// are bilinearly resized to whatever resolution the model runs at.
    pub pos_embed_size: (usize, usize),
    pub layer_norm_eps: f64,
}

impl ModelConfig {
    fn pvt(variant: Variant, depths: [usize; 4]) -> Self {
        Self {
            variant,
            stage_channels: [64, 128, 320, 512],
            stage_depths: depths,
            stage_heads: [1, 2, 5, 8],
            sr_ratios: [8, 4, 2, 1],
            mlp_ratios: [8, 8, 4, 4],
            patch_sizes: [4, 2, 2, 2],
            tpm_channels: 64,
            tpm_mlp_ratio: 8,
            heads: HeadLayout::single(),
            input_size: (512, 512),
            pos_embed_size: (224, 224),
            layer_norm_eps: 1e-6,
        }
    }

    pub fn tiny() -> Self {
        Self::pvt(Variant::Tiny, [2, 2, 2, 2])
    }

    pub fn small() -> Self {
        Self::pvt(Variant::Small, [3, 4, 6, 3])
    }

    pub fn medium() -> Self {
        Self::pvt(Variant::Medium, [3, 4, 18, 3])
    }

    /// Channels [8,16,24,32], one block per stage, 32×32 input.
    pub fn nano() -> Self {
        Self {
            variant: Variant::Nano,
            stage_channels: [8, 16, 24, 32],
            stage_depths: [1, 1, 1, 1],
            stage_heads: [1, 2, 3, 4],
            sr_ratios: [4, 2, 1, 1],
            mlp_ratios: [4, 4, 4, 4],
            patch_sizes: [4, 2, 2, 2],
            tpm_channels: 16,
            tpm_mlp_ratio: 4,
            heads: HeadLayout::dual(),
            input_size: (32, 32),
            pos_embed_size: (32, 32),
            layer_norm_eps: 1e-6,
        }
    }

    pub fn for_variant(variant: Variant) -> Self {
        match variant {
            Variant::Tiny => Self::tiny(),
            Variant::Small => Self::small(),
            Variant::Medium => Self::medium(),
            Variant::Nano => Self::nano(),
        }
    }

    pub fn with_heads(mut self, heads: HeadLayout) -> Self {
        self.heads = heads;
        self
    }

    pub fn dual_head(self) -> Self {
        self.with_heads(HeadLayout::dual())
    }

    pub fn single_head(self) -> Self {
        self.with_heads(HeadLayout::single())
    }

    pub fn with_tpm_channels(mut self, channels: usize) -> Self {
        self.tpm_channels = channels;
        self
    }

    /// Sets the training resolution. Nano keeps its position embeddings at
    /// the training resolution.
    pub fn with_input_size(mut self, h: usize, w: usize) -> Self {
        self.input_size = (h, w);
        if self.variant == Variant::Nano {
            self.pos_embed_size = (h, w);
        }
        self
    }

    /// Total downsampling factor after each stage: 4, 8, 16, 32.
    pub fn stage_strides(&self) -> [usize; 4] {
        let mut s = [0; 4];
        let mut acc = 1;
        for (i, p) in self.patch_sizes.iter().enumerate() {
            acc *= p;
            s[i] = acc;
        }
        s
    }

    /// Attention heads of stage `i`'s parsing module: the largest divisor of
    /// the decoder width that also divides the encoder stage's head count.
    pub fn tpm_heads(&self, stage: usize) -> usize {
        gcd(self.stage_heads[stage], self.tpm_channels)
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.stage_channels;
        if c.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("stage channels {c:?} must strictly increase")));
        }
        for i in 0..4 {
            if self.stage_heads[i] == 0 || c[i] % self.stage_heads[i] != 0 {
                return Err(Error::Config(format!(
                    "stage {} channels {} not divisible by {} heads",
                    i + 1,
                    c[i],
                    self.stage_heads[i]
                )));
            }
            if self.sr_ratios[i] == 0 || self.mlp_ratios[i] == 0 || self.patch_sizes[i] == 0 {
                return Err(Error::Config("ratios and patch sizes must be positive".into()));
            }
        }
        if self.variant != Variant::Nano && !TPM_CHANNEL_CHOICES.contains(&self.tpm_channels) {
            return Err(Error::Config(format!(
                "tpm_channels {} not in {TPM_CHANNEL_CHOICES:?}",
                self.tpm_channels
            )));
        }
        if self.tpm_channels == 0 || self.tpm_mlp_ratio == 0 {
            return Err(Error::Config("decoder width and mlp ratio must be positive".into()));
        }
        for (name, k) in self.heads.heads() {
            if k == 0 || k > 256 {
                return Err(Error::Config(format!("head {name} has {k} classes")));
            }
        }
        self.check_input(self.input_size)?;
        self.check_input(self.pos_embed_size)?;
        // Every stage's token grid must be poolable by its reduction ratio.
        for size in [self.input_size, self.pos_embed_size] {
            for (i, s) in self.stage_strides().iter().enumerate() {
                let r = self.sr_ratios[i];
                if (size.0 / s) % r != 0 || (size.1 / s) % r != 0 {
                    return Err(Error::Config(format!(
                        "stage {} grid {}x{} not divisible by reduction ratio {r}",
                        i + 1,
                        size.0 / s,
                        size.1 / s
                    )));
                }
            }
        }
        Ok(())
    }

    /// Checks that a runtime resolution is compatible with the stride ladder.
    pub fn check_input(&self, (h, w): (usize, usize)) -> Result<()> {
        let total = self.stage_strides()[3];
        if h == 0 || w == 0 || h % total != 0 || w % total != 0 {
            return Err(Error::Validation(format!(
                "input {h}x{w} must be a positive multiple of {total}"
            )));
        }
        Ok(())
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for v in [Variant::Tiny, Variant::Small, Variant::Medium, Variant::Nano] {
            let cfg = ModelConfig::for_variant(v);
            cfg.validate().unwrap();
            cfg.clone().dual_head().validate().unwrap();
        }
        assert_eq!(ModelConfig::tiny().stage_strides(), [4, 8, 16, 32]);
        assert_eq!(ModelConfig::tiny().tpm_heads(2), 1);
        assert_eq!(ModelConfig::tiny().tpm_heads(3), 8);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = ModelConfig::tiny();
        cfg.stage_channels = [64, 64, 320, 512];
        assert!(cfg.validate().is_err());
        assert!(ModelConfig::tiny().with_tpm_channels(96).validate().is_err());
        assert!(ModelConfig::tiny().with_input_size(500, 512).validate().is_err());
        let mut cfg = ModelConfig::tiny();
        cfg.stage_heads[2] = 3;
        assert!(cfg.validate().is_err());
        assert!("huge".parse::<Variant>().is_err());
        assert_eq!("Tiny".parse::<Variant>().unwrap(), Variant::Tiny);
    }
}
