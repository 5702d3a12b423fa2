//! Flat JSON run configuration. One struct carries the model shape, training
//! hyper-parameters, and dataset choice; unknown keys are rejected so a typo
//! in a hyper-parameter name fails loudly instead of training the default.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DataKind;
use crate::error::{Error, Result};
use crate::flow::ScheduleKind;
use crate::fusion::FusionVariant;
use crate::scan::ScanKind;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    // model shape
    pub channels: usize,
    pub image: usize,
    pub patch: usize,
    pub width: usize,
    pub depth: usize,
    /// Insert the shared transformer block after every `attn_every` blocks.
    pub attn_every: usize,
    /// Wavelet levels in the frequency branch; 0 disables the branch.
    pub level: usize,
    pub heads: usize,
    /// State dimension of each selective-scan channel.
    pub state: usize,
    /// Channel expansion factor inside the scan blocks.
    pub expand: usize,
    /// Number of classes; 0 trains unconditionally.
    pub class_count: usize,
    pub label_dropout: f64,
    /// Token ordering family for the spatial branch.
    pub scan: String,
    pub fusion: String,
    /// One transformer parameter set reused at every insertion point, or
    /// independent parameters per insertion.
    pub shared_transformer: bool,
    pub schedule: String,

    // training
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch: usize,
    pub grad_clip: f64,
    pub steps: usize,
    pub seed: u64,
    pub log_every: usize,
    pub ckpt_every: usize,
    pub train_log: String,

    // data
    pub data_kind: String,
    pub data_count: usize,

    // sampling defaults
    pub sample_steps: usize,
    pub cfg_scale: f64,
}

impl Default for Config {
    /// Desk-scale reference: every acceptance run finishes on one CPU core.
    fn default() -> Self {
        Config {
            channels: 3,
            image: 16,
            patch: 2,
            width: 64,
            depth: 4,
            attn_every: 4,
            level: 1,
            heads: 4,
            state: 4,
            expand: 2,
            class_count: 4,
            label_dropout: 0.15,
            scan: "sweep4".into(),
            fusion: "swap_q".into(),
            shared_transformer: true,
            schedule: "linear".into(),
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            batch: 16,
            grad_clip: 1.0,
            steps: 500,
            seed: 0,
            log_every: 10,
            ckpt_every: 250,
            train_log: "train_log.csv".into(),
            data_kind: "gaussian_mixture".into(),
            data_count: 2048,
            sample_steps: 50,
            cfg_scale: 1.4,
        }
    }
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Config = serde_json::from_str(text)
            .map_err(|e| Error::config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn scan_kind(&self) -> Result<ScanKind> {
        ScanKind::parse(&self.scan).ok_or_else(|| {
            Error::config(format!(
                "unknown scan {:?}; expected bi, sweep4, sweep8, zigzag8, jpeg8, or window",
                self.scan
            ))
        })
    }

    pub fn fusion_variant(&self) -> Result<FusionVariant> {
        FusionVariant::parse(&self.fusion)
    }

    pub fn schedule_kind(&self) -> Result<ScheduleKind> {
        ScheduleKind::parse(&self.schedule)
    }

    pub fn dataset_kind(&self) -> Result<DataKind> {
        DataKind::parse(&self.data_kind)
    }

    /// Token grid extent per side.
    pub fn grid(&self) -> usize {
        self.image / self.patch
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::config(msg));
        if self.channels == 0 || self.image == 0 || self.patch == 0 {
            return fail("channels, image, and patch must be positive".into());
        }
        if self.image % self.patch != 0 {
            return fail(format!(
                "image extent {} not divisible by patch {}",
                self.image, self.patch
            ));
        }
        let grid = self.grid();
        if grid % (1 << self.level) != 0 {
            return fail(format!(
                "token grid {grid} not divisible by 2^level = {}",
                1usize << self.level
            ));
        }
        if self.width == 0 || self.width % 2 != 0 {
            return fail(format!("width {} must be positive and even", self.width));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return fail(format!(
                "width {} not divisible by {} heads",
                self.width, self.heads
            ));
        }
        if self.depth == 0 || self.attn_every == 0 || self.depth % self.attn_every != 0 {
            return fail(format!(
                "depth {} must be a positive multiple of attn_every {}",
                self.depth, self.attn_every
            ));
        }
        if self.state == 0 || self.expand == 0 {
            return fail("state and expand must be positive".into());
        }
        if !(0.0..1.0).contains(&self.label_dropout) {
            return fail(format!("label_dropout {} outside [0, 1)", self.label_dropout));
        }
        if !(self.lr > 0.0) || !(self.grad_clip > 0.0) {
            return fail("lr and grad_clip must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("beta1 and beta2 must lie in [0, 1)".into());
        }
        if self.batch == 0 {
            return fail("batch must be positive".into());
        }
        if self.sample_steps == 0 {
            return fail("sample_steps must be positive".into());
        }
        if !(self.cfg_scale >= 0.0) {
            return fail(format!("cfg_scale {} must be >= 0", self.cfg_scale));
        }
        self.scan_kind()?;
        self.fusion_variant()?;
        self.schedule_kind()?;
        crate::data::DataKind::parse(&self.data_kind)?;
        Ok(())
    }
}
