//! The full MPSI super-resolution network and its configuration.

use std::collections::HashSet;
use std::path::Path;

use crate::blocks::{FeatureSeq, SambMixKind, Samg, SamgSpec, WindowSpec};
use crate::checkpoint::{self, Checkpoint};
use crate::error::{Error, Result};
use crate::layers::Conv2d;
use crate::param::{ParamBuilder, ParamVisit, Parameter};
use crate::scalar::Scalar;
use crate::ssm::SsmConfig;
use crate::tensor::nn::pixel_shuffle;
use crate::tensor::Tensor;

/// Upscaling factors the reconstruction head supports.
pub const SUPPORTED_SCALES: [usize; 3] = [2, 3, 4];

/// Hyperparameters of the network. The defaults are the published
/// full-size model; tests and the overfit gate shrink them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    /// Feature channels C throughout the body.
    pub channels: usize,
    /// Number of SAMGs.
    pub groups: usize,
    /// SAMBs per SAMG.
    pub blocks_per_group: usize,
    /// Attention heads (must divide `channels`).
    pub heads: usize,
    /// Attention window extent, rows.
    pub window_h: usize,
    /// Attention window extent, columns.
    pub window_w: usize,
    /// SGFN hidden width as a multiple of `channels`.
    pub sgfn_expansion: usize,
    /// State dimension of the CMB's bidirectional Mamba.
    pub cmb_state_dim: usize,
    /// Causal conv width inside the CMB's Mamba.
    pub cmb_conv_width: usize,
    /// Inner expansion of the CMB's Mamba.
    pub cmb_expansion: usize,
    /// State dimension of the MCRM's Mamba.
    pub mcrm_state_dim: usize,
    /// Causal conv width inside the MCRM's Mamba.
    pub mcrm_conv_width: usize,
    /// Inner expansion of the MCRM's Mamba.
    pub mcrm_expansion: usize,
    /// Upscaling factor (2, 3 or 4).
    pub scale: usize,
    /// Keep the channel-Mamba half of each SAMB (`false` substitutes a
    /// second STB so depth stays comparable).
    pub use_cmb: bool,
    /// Keep the channel recursion gate at the end of each group.
    pub use_mcrm: bool,
    /// Swap the DDBM inside each CMB for conventional channel attention.
    pub ddbm_as_channel_attention: bool,
    /// Recurse over the whole layer sequence in the MCRM (`false`: gate
    /// from the last feature map alone).
    pub mcrm_recursive: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 60,
            groups: 1,
            blocks_per_group: 9,
            heads: 6,
            window_h: 8,
            window_w: 32,
            sgfn_expansion: 2,
            cmb_state_dim: 32,
            cmb_conv_width: 3,
            cmb_expansion: 4,
            mcrm_state_dim: 64,
            mcrm_conv_width: 4,
            mcrm_expansion: 2,
            scale: 4,
            use_cmb: true,
            use_mcrm: true,
            ddbm_as_channel_attention: false,
            mcrm_recursive: true,
        }
    }
}

/// Field order for serialization; also the canonical key list.
const CONFIG_KEYS: [&str; 19] = [
    "channels",
    "groups",
    "blocks_per_group",
    "heads",
    "window_h",
    "window_w",
    "sgfn_expansion",
    "cmb_state_dim",
    "cmb_conv_width",
    "cmb_expansion",
    "mcrm_state_dim",
    "mcrm_conv_width",
    "mcrm_expansion",
    "scale",
    "use_cmb",
    "use_mcrm",
    "ddbm_as_channel_attention",
    "mcrm_recursive",
    "seed", // parsed by the run config; listed so files stay one flat namespace
];

pub(crate) fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value.parse().map_err(|_| {
        Error::config(format!(
            "key '{key}': '{value}' is not a non-negative integer"
        ))
    })
}

pub(crate) fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::config(format!(
            "key '{key}': '{value}' is not 'true' or 'false'"
        ))),
    }
}

pub(crate) fn parse_f64(key: &str, value: &str) -> Result<f64> {
    value
        .parse()
        .map_err(|_| Error::config(format!("key '{key}': '{value}' is not a number")))
}

/// Split one `key=value` pair (whitespace around either side is fine).
pub(crate) fn split_kv(line: &str) -> Result<(&str, &str)> {
    let (k, v) = line
        .split_once('=')
        .ok_or_else(|| Error::config(format!("expected key=value, got '{line}'")))?;
    Ok((k.trim(), v.trim()))
}

impl ModelConfig {
    /// Apply one key. `Ok(false)` means the key is not a model key (the
    /// run-level parser may claim it).
    pub(crate) fn try_set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "channels" => self.channels = parse_usize(key, value)?,
            "groups" => self.groups = parse_usize(key, value)?,
            "blocks_per_group" => self.blocks_per_group = parse_usize(key, value)?,
            "heads" => self.heads = parse_usize(key, value)?,
            "window_h" => self.window_h = parse_usize(key, value)?,
            "window_w" => self.window_w = parse_usize(key, value)?,
            "sgfn_expansion" => self.sgfn_expansion = parse_usize(key, value)?,
            "cmb_state_dim" => self.cmb_state_dim = parse_usize(key, value)?,
            "cmb_conv_width" => self.cmb_conv_width = parse_usize(key, value)?,
            "cmb_expansion" => self.cmb_expansion = parse_usize(key, value)?,
            "mcrm_state_dim" => self.mcrm_state_dim = parse_usize(key, value)?,
            "mcrm_conv_width" => self.mcrm_conv_width = parse_usize(key, value)?,
            "mcrm_expansion" => self.mcrm_expansion = parse_usize(key, value)?,
            "scale" => self.scale = parse_usize(key, value)?,
            "use_cmb" => self.use_cmb = parse_bool(key, value)?,
            "use_mcrm" => self.use_mcrm = parse_bool(key, value)?,
            "ddbm_as_channel_attention" => self.ddbm_as_channel_attention = parse_bool(key, value)?,
            "mcrm_recursive" => self.mcrm_recursive = parse_bool(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Apply one `key=value` string; unknown keys error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.try_set(key, value)? {
            Ok(())
        } else {
            Err(Error::config(format!("unknown config key '{key}'")))
        }
    }

    /// Parse a flat `key = value` file body. Blank lines and `#` comments
    /// are skipped; unknown or duplicate keys error.
    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        let mut seen = HashSet::new();
        for raw in text.lines() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = split_kv(line)?;
            if !seen.insert(k.to_string()) {
                return Err(Error::config(format!("duplicate config key '{k}'")));
            }
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Serialize every field as `key = value`, one per line, in canonical
    /// order.
    pub fn to_kv_text(&self) -> String {
        let mut out = String::new();
        for key in CONFIG_KEYS {
            let value = match key {
                "channels" => self.channels.to_string(),
                "groups" => self.groups.to_string(),
                "blocks_per_group" => self.blocks_per_group.to_string(),
                "heads" => self.heads.to_string(),
                "window_h" => self.window_h.to_string(),
                "window_w" => self.window_w.to_string(),
                "sgfn_expansion" => self.sgfn_expansion.to_string(),
                "cmb_state_dim" => self.cmb_state_dim.to_string(),
                "cmb_conv_width" => self.cmb_conv_width.to_string(),
                "cmb_expansion" => self.cmb_expansion.to_string(),
                "mcrm_state_dim" => self.mcrm_state_dim.to_string(),
                "mcrm_conv_width" => self.mcrm_conv_width.to_string(),
                "mcrm_expansion" => self.mcrm_expansion.to_string(),
                "scale" => self.scale.to_string(),
                "use_cmb" => self.use_cmb.to_string(),
                "use_mcrm" => self.use_mcrm.to_string(),
                "ddbm_as_channel_attention" => self.ddbm_as_channel_attention.to_string(),
                "mcrm_recursive" => self.mcrm_recursive.to_string(),
                "seed" => continue,
                _ => unreachable!("key list covers all fields"),
            };
            out.push_str(&format!("{key} = {value}\n"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::config("channels must be positive"));
        }
        if self.groups == 0 || self.blocks_per_group == 0 {
            return Err(Error::config(
                "need at least one group and one block per group",
            ));
        }
        if !SUPPORTED_SCALES.contains(&self.scale) {
            return Err(Error::config(format!(
                "scale {} unsupported (choose one of {SUPPORTED_SCALES:?})",
                self.scale
            )));
        }
        self.window_spec().validate(self.channels)?;
        self.cmb_ssm().validate("cmb ssm")?;
        self.mcrm_ssm().validate("mcrm ssm")?;
        let hidden = self.channels * self.sgfn_expansion;
        if hidden == 0 || !hidden.is_multiple_of(2) {
            return Err(Error::config(format!(
                "sgfn expanded width {hidden} must be positive and even"
            )));
        }
        if self.ddbm_as_channel_attention && !self.use_cmb {
            return Err(Error::config(
                "ddbm_as_channel_attention has no effect with use_cmb = false",
            ));
        }
        Ok(())
    }

    pub fn window_spec(&self) -> WindowSpec {
        WindowSpec {
            win_h: self.window_h,
            win_w: self.window_w,
            heads: self.heads,
        }
    }

    pub fn cmb_ssm(&self) -> SsmConfig {
        SsmConfig {
            state_dim: self.cmb_state_dim,
            conv_width: self.cmb_conv_width,
            expansion: self.cmb_expansion,
        }
    }

    pub fn mcrm_ssm(&self) -> SsmConfig {
        SsmConfig {
            state_dim: self.mcrm_state_dim,
            conv_width: self.mcrm_conv_width,
            expansion: self.mcrm_expansion,
        }
    }

    fn samg_spec(&self) -> SamgSpec {
        let mix_kind = if !self.use_cmb {
            SambMixKind::StbOnly
        } else if self.ddbm_as_channel_attention {
            SambMixKind::CmbWithChannelAttention
        } else {
            SambMixKind::Cmb
        };
        SamgSpec {
            channels: self.channels,
            blocks: self.blocks_per_group,
            window: self.window_spec(),
            sgfn_expansion: self.sgfn_expansion,
            cmb_ssm: self.cmb_ssm(),
            mcrm_ssm: self.mcrm_ssm(),
            mix_kind,
            mcrm_recursive: self.use_mcrm.then_some(self.mcrm_recursive),
        }
    }
}

/// The super-resolution network:
///
/// ```text
/// f_s = Conv3x3(x)                  shallow feature
/// f_d = Conv3x3(SAMG_N(...SAMG_1(f_s)))
/// y   = PixelShuffle(Conv3x3(f_s + f_d), scale)
/// ```
#[derive(Debug)]
pub struct Mpsi<T: Scalar> {
    cfg: ModelConfig,
    shallow: Conv2d<T>,
    groups: Vec<Samg<T>>,
    conv_after_body: Conv2d<T>,
    recon: Conv2d<T>,
}

impl<T: Scalar> Mpsi<T> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let pb = ParamBuilder::new(seed);
        Self::build(cfg, &pb)
    }

    /// Build with an externally-scoped builder (training shares the
    /// builder's RNG discipline).
    pub fn build(cfg: &ModelConfig, pb: &ParamBuilder) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let shallow = Conv2d::same(&pb.scope("shallow"), 3, c, 3, 1, true);
        let groups = (0..cfg.groups)
            .map(|i| Samg::new(&pb.scope(&format!("samg{i}")), cfg.samg_spec()))
            .collect::<Result<Vec<_>>>()?;
        let conv_after_body = Conv2d::same(&pb.scope("conv_after_body"), c, c, 3, 1, true);
        let recon = Conv2d::same(&pb.scope("recon"), c, 3 * cfg.scale * cfg.scale, 3, 1, true);
        Ok(Mpsi {
            cfg: cfg.clone(),
            shallow,
            groups,
            conv_after_body,
            recon,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn scale(&self) -> usize {
        self.cfg.scale
    }

    /// `[B, 3, H, W] -> [B, 3, scale*H, scale*W]`, values unclamped.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.ndim() != 4 || x.shape()[1] != 3 {
            return Err(Error::contract(
                "mpsi",
                format!("input must be [B, 3, H, W], got {:?}", x.shape()),
            ));
        }
        if x.shape()[2] == 0 || x.shape()[3] == 0 {
            return Err(Error::contract("mpsi", "input has an empty spatial extent"));
        }
        let f_s = self.shallow.forward(x)?;
        let mut seq = FeatureSeq::from_map(&f_s)?;
        for g in &self.groups {
            seq = g.forward(&seq)?;
        }
        let f_d = self.conv_after_body.forward(&seq.to_map()?)?;
        let fused = f_s.add(&f_d)?;
        let expanded = self.recon.forward(&fused)?;
        pixel_shuffle(&expanded, self.cfg.scale)
    }

    pub fn param_count(&self) -> usize {
        crate::param::param_count(self)
    }

    /// Write all parameters (alone) to a checkpoint file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ckpt = Checkpoint::new();
        checkpoint::store_params(&mut ckpt, self);
        ckpt.write_to(path)
    }

    /// Load parameters from a checkpoint file (strict name/shape match).
    pub fn load_params_from(&mut self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint::read_from(path)?;
        checkpoint::load_params(&ckpt, self)
    }
}

impl<T: Scalar> ParamVisit<T> for Mpsi<T> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<T>)) {
        self.shallow.visit_params(f);
        for g in &self.groups {
            g.visit_params(f);
        }
        self.conv_after_body.visit_params(f);
        self.recon.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.shallow.visit_params_mut(f);
        for g in &mut self.groups {
            g.visit_params_mut(f);
        }
        self.conv_after_body.visit_params_mut(f);
        self.recon.visit_params_mut(f);
    }
}

/// A small configuration for tests and quick experiments.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        channels: 16,
        groups: 1,
        blocks_per_group: 2,
        heads: 2,
        window_h: 4,
        window_w: 4,
        sgfn_expansion: 2,
        cmb_state_dim: 4,
        cmb_conv_width: 2,
        cmb_expansion: 2,
        mcrm_state_dim: 4,
        mcrm_conv_width: 2,
        mcrm_expansion: 2,
        scale: 2,
        ..ModelConfig::default()
    }
}
