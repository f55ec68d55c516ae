//! Flat JSON run configuration. Keys are the training fields plus the
//! `data.*` keys; command-line flags override values read from a file.

use std::path::Path;

use facialgan_core::losses::LossWeights;
use facialgan_core::networks::NetConfig;
use facialgan_core::optim::AdamConfig;
use facialgan_core::training::{SegTrainConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Width preset of the networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Full,
    Desk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(rename = "data.root", skip_serializing_if = "Option::is_none")]
    pub data_root: Option<String>,
    #[serde(rename = "data.image_size")]
    pub image_size: usize,
    #[serde(rename = "data.split_seed", skip_serializing_if = "Option::is_none")]
    pub split_seed: Option<u64>,
    pub scale: Scale,
    pub base_channels: Option<usize>,
    pub max_channels: Option<usize>,
    pub style_dim: Option<usize>,
    pub latent_dim: Option<usize>,
    pub batch_size: usize,
    pub total_iters: u64,
    pub seg_epochs: usize,
    pub seg_batch_size: usize,
    #[serde(rename = "lr_G")]
    pub lr_g: f64,
    #[serde(rename = "lr_D")]
    pub lr_d: f64,
    #[serde(rename = "lr_E")]
    pub lr_e: f64,
    #[serde(rename = "lr_F")]
    pub lr_f: f64,
    pub lr_seg: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lambda_adv: f64,
    pub lambda_sty: f64,
    pub lambda_ds_init: f64,
    pub lambda_cyc: f64,
    pub lambda_seg: f64,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub dual_pass: bool,
    pub ema_decay: Option<f64>,
    pub grad_clip: Option<f64>,
    pub seg_dilation: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::new(NetConfig::full(256));
        let w = LossWeights::default();
        Self {
            data_root: None,
            image_size: 256,
            split_seed: None,
            scale: Scale::Full,
            base_channels: None,
            max_channels: None,
            style_dim: None,
            latent_dim: None,
            batch_size: t.batch_size,
            total_iters: t.total_iters,
            seg_epochs: 50,
            seg_batch_size: 32,
            lr_g: t.lr_g,
            lr_d: t.lr_d,
            lr_e: t.lr_e,
            lr_f: t.lr_f,
            lr_seg: 1e-2,
            beta1: t.beta1,
            beta2: t.beta2,
            lambda_adv: w.adv,
            lambda_sty: w.sty,
            lambda_ds_init: w.ds,
            lambda_cyc: w.cyc,
            lambda_seg: w.seg,
            seed: 0,
            checkpoint_every: t.checkpoint_every,
            log_every: t.log_every,
            dual_pass: t.dual_pass,
            ema_decay: None,
            grad_clip: None,
            seg_dilation: None,
        }
    }
}

impl RunConfig {
    /// Desk-scale widths at 64x64.
    pub fn desk() -> Self {
        Self {
            image_size: 64,
            scale: Scale::Desk,
            ..Self::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn net(&self) -> NetConfig {
        let mut n = match self.scale {
            Scale::Full => NetConfig::full(self.image_size),
            Scale::Desk => NetConfig::desk(self.image_size),
        };
        if let Some(v) = self.base_channels {
            n.base_channels = v;
        }
        if let Some(v) = self.max_channels {
            n.max_channels = v;
        }
        if let Some(v) = self.style_dim {
            n.style_dim = v;
        }
        if let Some(v) = self.latent_dim {
            n.latent_dim = v;
        }
        n
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            adv: self.lambda_adv,
            sty: self.lambda_sty,
            ds: self.lambda_ds_init,
            cyc: self.lambda_cyc,
            seg: self.lambda_seg,
        }
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            net: self.net(),
            batch_size: self.batch_size,
            total_iters: self.total_iters,
            lr_g: self.lr_g,
            lr_d: self.lr_d,
            lr_e: self.lr_e,
            lr_f: self.lr_f,
            beta1: self.beta1,
            beta2: self.beta2,
            weights: self.weights(),
            seed: self.seed,
            checkpoint_every: self.checkpoint_every,
            log_every: self.log_every,
            dual_pass: self.dual_pass,
            ema_decay: self.ema_decay,
            grad_clip: self.grad_clip,
            seg_dilation: self.seg_dilation,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn segmenter(&self) -> Result<SegTrainConfig> {
        let cfg = SegTrainConfig {
            net: self.net(),
            epochs: self.seg_epochs,
            batch_size: self.seg_batch_size,
            adam: AdamConfig::new(self.lr_seg, 0.9, 0.999),
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
