//! `key = value` configuration files for the network and the training run.
//!
//! Blank lines and `#` comments are skipped. Unknown keys, duplicate keys
//! and malformed values are configuration errors.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{config_err, Error, Result};
use crate::losses::{BoundaryWeighting, LossWeights};

/// Raw key/value pairs, consumed field by field.
struct Entries {
    map: BTreeMap<String, String>,
}

impl Entries {
    fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| config_err(format!("line {}: expected `key = value`, got `{raw}`", no + 1)))?;
            let key = key.trim().to_string();
            if map.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(config_err(format!("line {}: duplicate key `{key}`", no + 1)));
            }
        }
        Ok(Entries { map })
    }

    fn take<V: FromStr>(&mut self, key: &str, into: &mut V) -> Result<()> {
        if let Some(raw) = self.map.remove(key) {
            *into = raw.parse().map_err(|_| config_err(format!("invalid value `{raw}` for `{key}`")))?;
        }
        Ok(())
    }

    fn take_list(&mut self, key: &str, into: &mut Vec<usize>) -> Result<()> {
        if let Some(raw) = self.map.remove(key) {
            *into = raw
                .split(',')
                .map(|f| f.trim().parse().map_err(|_| config_err(format!("invalid list `{raw}` for `{key}`"))))
                .collect::<Result<_>>()?;
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        match self.map.keys().next() {
            Some(k) => Err(config_err(format!("unknown key `{k}`"))),
            None => Ok(()),
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(Error::from)
}

fn list(v: &[usize]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn line(out: &mut String, key: &str, value: impl Display) {
    out.push_str(&format!("{key} = {value}\n"));
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub in_channels: usize,
    /// Width of the two stride-2 stem convolutions.
    pub stem_width: usize,
    /// Four backbone stages at strides 1, 2, 2, 2 after the stem.
    pub stage_widths: Vec<usize>,
    /// Parsing feature channels `C`.
    pub channels: usize,
    pub lcm_maps: usize,
    pub gem_dim: usize,
    pub gc_kernel: usize,
    pub ppm_bins: Vec<usize>,
    pub num_classes: usize,
    pub num_joints: usize,
    pub shuffle_groups: usize,
    /// Per-source width of the boundary branch reduction.
    pub boundary_reduce: usize,
    pub enable_lcm: bool,
    pub enable_gem: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            in_channels: 3,
            stem_width: 16,
            stage_widths: vec![16, 32, 48, 64],
            channels: 32,
            lcm_maps: 8,
            gem_dim: 8,
            gc_kernel: 7,
            ppm_bins: vec![1, 2],
            num_classes: crate::data::NUM_CLASSES,
            num_joints: crate::data::NUM_JOINTS,
            shuffle_groups: 4,
            boundary_reduce: 16,
            enable_lcm: true,
            enable_gem: true,
        }
    }
}

impl NetworkConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut e = Entries::parse(text)?;
        let mut c = NetworkConfig::default();
        e.take("in_channels", &mut c.in_channels)?;
        e.take("stem_width", &mut c.stem_width)?;
        e.take_list("stage_widths", &mut c.stage_widths)?;
        e.take("channels", &mut c.channels)?;
        e.take("lcm_maps", &mut c.lcm_maps)?;
        e.take("gem_dim", &mut c.gem_dim)?;
        e.take("gc_kernel", &mut c.gc_kernel)?;
        e.take_list("ppm_bins", &mut c.ppm_bins)?;
        e.take("num_classes", &mut c.num_classes)?;
        e.take("num_joints", &mut c.num_joints)?;
        e.take("shuffle_groups", &mut c.shuffle_groups)?;
        e.take("boundary_reduce", &mut c.boundary_reduce)?;
        e.take("enable_lcm", &mut c.enable_lcm)?;
        e.take("enable_gem", &mut c.enable_gem)?;
        e.finish()?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        line(&mut out, "in_channels", self.in_channels);
        line(&mut out, "stem_width", self.stem_width);
        line(&mut out, "stage_widths", list(&self.stage_widths));
        line(&mut out, "channels", self.channels);
        line(&mut out, "lcm_maps", self.lcm_maps);
        line(&mut out, "gem_dim", self.gem_dim);
        line(&mut out, "gc_kernel", self.gc_kernel);
        line(&mut out, "ppm_bins", list(&self.ppm_bins));
        line(&mut out, "num_classes", self.num_classes);
        line(&mut out, "num_joints", self.num_joints);
        line(&mut out, "shuffle_groups", self.shuffle_groups);
        line(&mut out, "boundary_reduce", self.boundary_reduce);
        line(&mut out, "enable_lcm", self.enable_lcm);
        line(&mut out, "enable_gem", self.enable_gem);
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_widths.len() != 4 {
            return Err(config_err(format!("expected 4 stage widths, got {}", self.stage_widths.len())));
        }
        let widths = [self.in_channels, self.stem_width, self.channels, self.lcm_maps, self.gem_dim, self.boundary_reduce];
        if widths.contains(&0) || self.stage_widths.contains(&0) {
            return Err(config_err("channel widths must be positive"));
        }
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(config_err(format!("num_classes must lie in 2..=255, got {}", self.num_classes)));
        }
        if self.num_joints == 0 {
            return Err(config_err("num_joints must be positive"));
        }
        if self.gc_kernel % 2 == 0 {
            return Err(config_err(format!("gc_kernel must be odd, got {}", self.gc_kernel)));
        }
        if self.ppm_bins.is_empty() || self.ppm_bins.contains(&0) {
            return Err(config_err("ppm_bins must be a non-empty list of positive sizes"));
        }
        let total: usize = self.stage_widths.iter().sum();
        if self.shuffle_groups == 0 || total % self.shuffle_groups != 0 {
            return Err(config_err(format!(
                "shuffle_groups {} must divide the concatenated stage width {total}",
                self.shuffle_groups
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub total_iters: usize,
    pub warmup_iters: usize,
    pub poly_power: f64,
    pub seed: u64,
    pub flip: bool,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub max_grad_norm: f64,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    /// Toy budget sized for 64×64 synthetic figures on a CPU.
    fn default() -> Self {
        TrainConfig {
            base_lr: 0.05,
            momentum: 0.9,
            weight_decay: 0.0005,
            batch_size: 8,
            total_iters: 600,
            warmup_iters: 50,
            poly_power: 0.9,
            seed: 0,
            flip: true,
            max_grad_norm: 2.0,
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut e = Entries::parse(text)?;
        let mut c = TrainConfig::default();
        e.take("base_lr", &mut c.base_lr)?;
        e.take("momentum", &mut c.momentum)?;
        e.take("weight_decay", &mut c.weight_decay)?;
        e.take("batch_size", &mut c.batch_size)?;
        e.take("total_iters", &mut c.total_iters)?;
        e.take("warmup_iters", &mut c.warmup_iters)?;
        e.take("poly_power", &mut c.poly_power)?;
        e.take("seed", &mut c.seed)?;
        e.take("flip", &mut c.flip)?;
        e.take("max_grad_norm", &mut c.max_grad_norm)?;
        let l = &mut c.loss;
        e.take("alpha", &mut l.alpha)?;
        e.take("beta", &mut l.beta)?;
        e.take("ohem_keep_fraction", &mut l.ohem_keep_fraction)?;
        e.take("ohem_min_kept", &mut l.ohem_min_kept)?;
        e.take("fallback_pos_weight", &mut l.fallback_pos_weight)?;
        let mut mode = String::from(match l.boundary_weighting {
            BoundaryWeighting::InverseFrequency => "inverse_frequency",
            BoundaryWeighting::Fixed { .. } => "fixed",
        });
        let mut pos_weight = match l.boundary_weighting {
            BoundaryWeighting::Fixed { pos_weight } => pos_weight,
            BoundaryWeighting::InverseFrequency => 1.0,
        };
        e.take("boundary_weighting", &mut mode)?;
        e.take("boundary_pos_weight", &mut pos_weight)?;
        l.boundary_weighting = match mode.as_str() {
            "inverse_frequency" => BoundaryWeighting::InverseFrequency,
            "fixed" => BoundaryWeighting::Fixed { pos_weight },
            other => return Err(config_err(format!("unknown boundary_weighting `{other}`"))),
        };
        e.finish()?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        line(&mut out, "base_lr", self.base_lr);
        line(&mut out, "momentum", self.momentum);
        line(&mut out, "weight_decay", self.weight_decay);
        line(&mut out, "batch_size", self.batch_size);
        line(&mut out, "total_iters", self.total_iters);
        line(&mut out, "warmup_iters", self.warmup_iters);
        line(&mut out, "poly_power", self.poly_power);
        line(&mut out, "seed", self.seed);
        line(&mut out, "flip", self.flip);
        line(&mut out, "max_grad_norm", self.max_grad_norm);
        let l = &self.loss;
        line(&mut out, "alpha", l.alpha);
        line(&mut out, "beta", l.beta);
        line(&mut out, "ohem_keep_fraction", l.ohem_keep_fraction);
        line(&mut out, "ohem_min_kept", l.ohem_min_kept);
        line(&mut out, "fallback_pos_weight", l.fallback_pos_weight);
        match l.boundary_weighting {
            BoundaryWeighting::InverseFrequency => line(&mut out, "boundary_weighting", "inverse_frequency"),
            BoundaryWeighting::Fixed { pos_weight } => {
                line(&mut out, "boundary_weighting", "fixed");
                line(&mut out, "boundary_pos_weight", pos_weight);
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_iters >= self.total_iters {
            return Err(config_err(format!(
                "warmup_iters ({}) must be below total_iters ({})",
                self.warmup_iters, self.total_iters
            )));
        }
        if !(self.poly_power > 0.0) {
            return Err(config_err("poly_power must be positive"));
        }
        if !(self.base_lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(config_err("base_lr and weight_decay must be non-negative and momentum in [0, 1)"));
        }
        if !(self.max_grad_norm >= 0.0) {
            return Err(config_err("max_grad_norm must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(config_err("batch_size must be positive"));
        }
        self.loss.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let n = NetworkConfig::default();
        assert_eq!(NetworkConfig::parse(&n.render()).unwrap(), n);
        let t = TrainConfig::default();
        assert_eq!(TrainConfig::parse(&t.render()).unwrap(), t);
        let fixed = TrainConfig {
            loss: LossWeights { boundary_weighting: BoundaryWeighting::Fixed { pos_weight: 3.5 }, ..Default::default() },
            ..Default::default()
        };
        assert_eq!(TrainConfig::parse(&fixed.render()).unwrap(), fixed);
    }

    #[test]
    fn comments_and_overrides() {
        let c = NetworkConfig::parse("# toy\nenable_gem = false\nppm_bins = 1, 2 ,3\n\n").unwrap();
        assert!(!c.enable_gem);
        assert_eq!(c.ppm_bins, vec![1, 2, 3]);
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "bogus = 1",
            "channels",
            "channels = x",
            "channels = 4\nchannels = 5",
            "gc_kernel = 4",
            "stage_widths = 16,32",
            "shuffle_groups = 7",
        ] {
            let err = NetworkConfig::parse(text).unwrap_err();
            assert_eq!(err.exit_code(), 1, "{text}: {err}");
        }
        for text in ["warmup_iters = 600", "poly_power = 0", "boundary_weighting = other", "lr = 1"] {
            assert!(TrainConfig::parse(text).is_err(), "{text}");
        }
    }
}
