//! Flat run configuration shared by every subcommand.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::WorldConfig;
use crate::encoders::{LocConfig, VitConfig};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objectives::LossConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Cosine,
    Constant,
}

/// Every tunable in one flat JSON object. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // data
    pub seed: u64,
    pub count: usize,
    pub holdout: usize,
    pub region_deg: [f64; 4],
    pub footprint_deg: f64,
    pub rs_size: usize,
    pub rs_channels: usize,
    pub sv_size: usize,
    pub temporal: usize,
    pub modes: usize,
    pub freq_min: f64,
    pub freq_max: f64,
    pub sigma_rs: f64,
    pub sigma_sv: f64,
    pub sigma_temporal: f64,
    // model
    pub patch: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub embed_dim: usize,
    pub rff_frequencies: usize,
    pub rff_sigma: f64,
    pub loc_hidden: usize,
    // training
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub warmup: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub schedule: Schedule,
    pub augment: bool,
    pub tau: f64,
    pub lambda: f64,
    pub bank_capacity: usize,
    /// Steps between periodic checkpoints; 0 keeps only the final one.
    pub checkpoint_every: u64,
    // evaluation
    pub probe_steps: usize,
    pub probe_lr: f64,
    pub probe_hidden: usize,
    pub heatmap_resolution: f64,
    /// Heatmap grids span `2 * heatmap_half + 1` cells per side.
    pub heatmap_half: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let w = WorldConfig::default();
        let m = ModelConfig::default();
        let l = LossConfig::default();
        Self {
            seed: w.seed,
            count: w.count,
            holdout: 256,
            region_deg: w.region_deg,
            footprint_deg: w.footprint_deg,
            rs_size: w.rs_size,
            rs_channels: w.rs_channels,
            sv_size: w.sv_size,
            temporal: w.temporal,
            modes: w.modes,
            freq_min: w.freq_min,
            freq_max: w.freq_max,
            sigma_rs: w.sigma_rs,
            sigma_sv: w.sigma_sv,
            sigma_temporal: w.sigma_temporal,
            patch: m.rs.patch,
            width: m.rs.width,
            depth: m.rs.depth,
            heads: m.rs.heads,
            ff_width: m.rs.ff_width,
            embed_dim: m.embed_dim,
            rff_frequencies: m.loc.frequencies,
            rff_sigma: m.loc.sigma,
            loc_hidden: m.loc.hidden,
            batch_size: 64,
            epochs: 30,
            lr: 3e-4,
            warmup: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 5.0,
            schedule: Schedule::Cosine,
            augment: true,
            tau: l.tau,
            lambda: l.lambda_secl,
            bank_capacity: l.bank_capacity,
            checkpoint_every: 0,
            probe_steps: 500,
            probe_lr: 1e-2,
            probe_hidden: 64,
            heatmap_resolution: 0.01,
            heatmap_half: 5,
        }
    }
}

impl RunConfig {
    /// A few-second configuration for smoke tests: tiny images, model and dataset.
    pub fn small() -> Self {
        Self {
            count: 80,
            holdout: 16,
            rs_size: 16,
            sv_size: 8,
            temporal: 2,
            patch: 4,
            width: 16,
            depth: 1,
            heads: 2,
            ff_width: 24,
            embed_dim: 8,
            rff_frequencies: 8,
            loc_hidden: 16,
            batch_size: 8,
            epochs: 2,
            bank_capacity: 32,
            probe_steps: 50,
            probe_hidden: 8,
            ..Self::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Canonical serialization; the config hash is computed over these bytes.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_json().as_bytes()).into()
    }

    pub fn hash_hex(&self) -> String {
        hex(&self.hash())
    }

    pub fn world(&self) -> WorldConfig {
        WorldConfig {
            seed: self.seed,
            count: self.count,
            region_deg: self.region_deg,
            footprint_deg: self.footprint_deg,
            rs_size: self.rs_size,
            rs_channels: self.rs_channels,
            sv_size: self.sv_size,
            temporal: self.temporal,
            grid: if self.patch > 0 { self.rs_size / self.patch } else { 0 },
            modes: self.modes,
            freq_min: self.freq_min,
            freq_max: self.freq_max,
            sigma_rs: self.sigma_rs,
            sigma_sv: self.sigma_sv,
            sigma_temporal: self.sigma_temporal,
        }
    }

    pub fn model(&self) -> ModelConfig {
        let vit = |channels, image_size| VitConfig {
            channels,
            image_size,
            patch: self.patch,
            width: self.width,
            depth: self.depth,
            heads: self.heads,
            ff_width: self.ff_width,
            out_dim: self.embed_dim,
        };
        ModelConfig {
            embed_dim: self.embed_dim,
            rs: vit(self.rs_channels, self.rs_size),
            sv: vit(1, self.sv_size),
            loc: LocConfig {
                frequencies: self.rff_frequencies,
                sigma: self.rff_sigma,
                hidden: self.loc_hidden,
                out_dim: self.embed_dim,
            },
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            tau: self.tau,
            lambda_secl: self.lambda,
            bank_capacity: self.bank_capacity,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.world().validate()?;
        self.model().validate()?;
        self.loss().validate(self.batch_size)?;
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.warmup) {
            return Err(Error::Config(format!("warmup fraction {} not in [0, 1)", self.warmup)));
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("invalid optimizer hyperparameters".into()));
        }
        if !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0) || !(self.clip_norm >= 0.0) {
            return Err(Error::Config("invalid optimizer hyperparameters".into()));
        }
        if !(self.heatmap_resolution > 0.0) {
            return Err(Error::Config("heatmap resolution must be positive".into()));
        }
        Ok(())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
