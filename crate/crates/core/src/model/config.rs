use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::nn::UpsampleMode;
use crate::{Error, Result};

/// Version of the configuration document layout.
pub const CONFIG_VERSION: u32 = 1;

/// Every architecture hyperparameter. Serialized as a flat JSON object whose
/// keys are the field names below; missing keys take their defaults.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub config_version: u32,
    /// input extent in pixels
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    /// number of classes including background
    pub num_classes: usize,
    /// convolutional levels before the transformer
    pub levels: usize,
    /// channel width of level 1, doubling per level
    pub base_channels: usize,
    /// patch extent on the deepest feature map; the effective patch on the
    /// input image is `patch_size · 2^levels`
    pub patch_size: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_mlp: usize,
    /// number of levels (deepest first) whose encoder and up-path
    /// connections feed the decoder
    pub skips: usize,
    pub upsample: UpsampleMode,
    pub position_embedding: bool,
    /// also feed the same-level encoder feature into each decoder level
    pub include_same_level_encoder: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            config_version: CONFIG_VERSION,
            height: 64,
            width: 64,
            in_channels: 1,
            num_classes: 4,
            levels: 3,
            base_channels: 16,
            patch_size: 1,
            layers: 4,
            heads: 4,
            d_model: 64,
            d_mlp: 128,
            skips: 3,
            upsample: UpsampleMode::Bilinear,
            position_embedding: true,
            include_same_level_encoder: false,
        }
    }
}

/// One input feeding a decoder level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    /// encoder feature of the given level, average-pooled down
    Encoder(usize),
    /// up-path feature of the decoder's own level
    Up,
    /// output of a deeper decoder level (the bottleneck at `levels + 1`),
    /// upsampled
    Decoder(usize),
}

impl ModelConfig {
    /// Effective patch extent on the input image.
    pub fn effective_patch(&self) -> usize {
        self.patch_size << self.levels
    }

    /// Token grid `(rows, cols)` of the transformer.
    pub fn token_grid(&self) -> (usize, usize) {
        let p = self.effective_patch();
        (self.height / p, self.width / p)
    }

    pub fn tokens(&self) -> usize {
        let (r, c) = self.token_grid();
        r * c
    }

    /// Channel width of level `i` (1-based).
    pub fn level_width(&self, i: usize) -> usize {
        self.base_channels << (i - 1)
    }

    /// Channel width of the bottleneck, equal to the deepest level's width.
    pub fn bottleneck_width(&self) -> usize {
        self.level_width(self.levels)
    }

    /// Spatial extent `(h, w)` of level `i`; level `levels + 1` is the
    /// token grid.
    pub fn level_extent(&self, i: usize) -> (usize, usize) {
        if i > self.levels {
            self.token_grid()
        } else {
            (self.height >> (i - 1), self.width >> (i - 1))
        }
    }

    /// Whether level `i` receives encoder and up-path connections.
    pub fn skip_enabled(&self, i: usize) -> bool {
        i + self.skips > self.levels
    }

    /// Inputs of decoder level `i < levels + 1` in concatenation order.
    pub fn decoder_sources(&self, i: usize) -> Vec<Source> {
        let mut out = Vec::new();
        if self.skip_enabled(i) {
            let last = if self.include_same_level_encoder { i } else { i - 1 };
            out.extend((1..=last).map(Source::Encoder));
            out.push(Source::Up);
        }
        out.extend((i + 1..=self.levels + 1).map(Source::Decoder));
        out
    }

    /// Channel widths the sources of level `i` are reduced to; they sum to
    /// the level width, earlier sources taking the remainder.
    pub fn source_widths(&self, i: usize) -> Vec<usize> {
        let count = self.decoder_sources(i).len();
        let w = self.level_width(i);
        (0..count)
            .map(|j| w / count + usize::from(j < w % count))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.config_version != CONFIG_VERSION {
            return Err(Error::Version {
                what: "model config",
                found: self.config_version,
                expected: CONFIG_VERSION,
            });
        }
        for (name, v) in [
            ("height", self.height),
            ("width", self.width),
            ("in_channels", self.in_channels),
            ("levels", self.levels),
            ("base_channels", self.base_channels),
            ("patch_size", self.patch_size),
            ("heads", self.heads),
            ("d_model", self.d_model),
            ("d_mlp", self.d_mlp),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if self.num_classes < 2 || self.num_classes > 256 {
            return fail(format!("num_classes must be in 2..=256, got {}", self.num_classes));
        }
        if self.levels > 8 {
            return fail(format!("levels must be at most 8, got {}", self.levels));
        }
        let p = self.effective_patch();
        if !self.height.is_multiple_of(p) || !self.width.is_multiple_of(p) {
            return fail(format!(
                "input {}x{} is not divisible by patch_size·2^levels = {}·2^{} = {p}",
                self.height, self.width, self.patch_size, self.levels
            ));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return fail(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            ));
        }
        if self.skips > self.levels {
            return fail(format!("skips {} exceeds levels {}", self.skips, self.levels));
        }
        for i in 1..=self.levels {
            let n = self.decoder_sources(i).len();
            if self.level_width(i) < n {
                return fail(format!(
                    "level {i} width {} cannot be split over {n} sources; raise base_channels",
                    self.level_width(i)
                ));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config document: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        let cfg: ModelConfig = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n").map_err(Error::io(path))
    }
}
