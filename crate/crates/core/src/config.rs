//! Model and run configuration, loadable from `key = value` text files.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{MvsError, Result};

/// Network shape and unrolling.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Hypotheses at initialization.
    pub d1: usize,
    /// Samples of the predicted distribution.
    pub d2: usize,
    /// Half-width of the readout window.
    pub radius: usize,
    pub groups: usize,
    pub hidden: usize,
    /// Hypothesis half-range per level, in normalized inverse depth.
    pub level_radii: [f64; 3],
    pub level_counts: [usize; 3],
    /// GRU iterations `K`.
    pub iters: usize,
    pub unet_base: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d1: 32,
            d2: 256,
            radius: 4,
            groups: 8,
            hidden: 32,
            level_radii: [2f64.powi(-7), 2f64.powi(-5), 2f64.powi(-3)],
            level_counts: [4, 4, 2],
            iters: 4,
            unet_base: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(MvsError::Config(m.into()));
        if self.d1 < 2 || self.d2 < 2 {
            return bad("d1 and d2 must be at least 2");
        }
        if !crate::matching::check_groups(self.groups) {
            return bad("groups must divide 16, 32 and 64");
        }
        if self.level_counts.iter().any(|&n| n < 2) {
            return bad("every level needs at least two hypotheses");
        }
        let r = self.level_radii;
        if !(r[0] > 0.0 && r[0] < r[1] && r[1] < r[2] && r[2] <= 1.0) {
            return bad("level radii must increase with the level and lie in (0, 1]");
        }
        if self.hidden == 0 || self.unet_base == 0 {
            return bad("hidden and unet_base must be positive");
        }
        Ok(())
    }

    /// Channels of the multi-scale similarity input to the GRU.
    pub fn similarity_channels(&self) -> usize {
        self.level_counts.iter().sum()
    }

    /// Offsets of the hypotheses around the current estimate at `level`.
    pub fn level_offsets(&self, level: usize) -> Vec<f64> {
        let (n, r) = (self.level_counts[level - 1], self.level_radii[level - 1]);
        (0..n).map(|i| -r + 2.0 * r * i as f64 / (n - 1) as f64).collect()
    }
}

/// Loss weights.
#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    /// Weight of the inverse-depth L1 terms; defaults to `d2`.
    pub beta: f64,
    /// Tolerance of the confidence label.
    pub gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.8,
            beta: 256.0,
            gamma: 0.002,
        }
    }
}

/// Filtering and fusion thresholds.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    pub tau: f64,
    /// Reprojection distance threshold in pixels.
    pub delta: f64,
    /// Relative depth threshold.
    pub epsilon: f64,
    pub n_geo: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            tau: 0.3,
            delta: 1.0,
            epsilon: 0.01,
            n_geo: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub fusion: FusionConfig,
    /// Views per training sample, reference included.
    pub views: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_milestones: Vec<usize>,
    pub lr_decay: f64,
    pub warmup_epochs: usize,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Sources are drawn from this many nearest neighbours.
    pub source_pool: usize,
    pub seed: u64,
    /// Optional cap on optimizer steps (for smoke runs).
    pub max_steps: Option<usize>,
    pub train_data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            fusion: FusionConfig::default(),
            views: 3,
            epochs: 16,
            batch: 2,
            lr: 1e-3,
            lr_milestones: vec![4, 8, 12],
            lr_decay: 0.5,
            warmup_epochs: 1,
            scale_min: 0.8,
            scale_max: 1.25,
            source_pool: 4,
            seed: 0,
            max_steps: None,
            train_data: None,
            checkpoint: None,
            metrics: None,
        }
    }
}

impl TrainConfig {
    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr * self.lr_decay.powi(drops as i32)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: &str| Err(MvsError::Config(m.into()));
        if self.views < 2 {
            return bad("views must be at least 2");
        }
        if self.batch == 0 || self.epochs == 0 {
            return bad("batch and epochs must be positive");
        }
        if !(self.lr > 0.0) || !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return bad("lr and scale range must be positive");
        }
        if self.source_pool + 1 < self.views {
            return bad("source_pool must provide views - 1 sources");
        }
        if !(self.fusion.tau >= 0.0 && self.fusion.tau <= 1.0) {
            return bad("tau must lie in [0, 1]");
        }
        Ok(())
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<V: FromStr>(key: &str, v: &str) -> Result<V> {
            v.trim()
                .parse()
                .map_err(|_| MvsError::Config(format!("{key}: cannot parse '{v}'")))
        }
        fn list<V: FromStr>(key: &str, v: &str) -> Result<Vec<V>> {
            v.split(',').filter(|s| !s.trim().is_empty()).map(|s| num(key, s)).collect()
        }
        fn three<V: FromStr + Copy>(key: &str, v: &str) -> Result<[V; 3]> {
            let l: Vec<V> = list(key, v)?;
            l.try_into()
                .map_err(|_| MvsError::Config(format!("{key}: expected three values")))
        }
        let m = &mut self.model;
        match key {
            "iters" | "K" => m.iters = num(key, value)?,
            "d1" => m.d1 = num(key, value)?,
            "d2" => m.d2 = num(key, value)?,
            "radius" | "r" => m.radius = num(key, value)?,
            "groups" => m.groups = num(key, value)?,
            "hidden" => m.hidden = num(key, value)?,
            "unet_base" => m.unet_base = num(key, value)?,
            "radii" => m.level_radii = three(key, value)?,
            "counts" => m.level_counts = three(key, value)?,
            "alpha" => self.loss.alpha = num(key, value)?,
            "beta" => self.loss.beta = num(key, value)?,
            "gamma" => self.loss.gamma = num(key, value)?,
            "tau" => self.fusion.tau = num(key, value)?,
            "delta" => self.fusion.delta = num(key, value)?,
            "epsilon" => self.fusion.epsilon = num(key, value)?,
            "ngeo" => self.fusion.n_geo = num(key, value)?,
            "views" | "N" => self.views = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch" => self.batch = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "lr_milestones" => self.lr_milestones = list(key, value)?,
            "lr_decay" => self.lr_decay = num(key, value)?,
            "warmup_epochs" => self.warmup_epochs = num(key, value)?,
            "scale_min" => self.scale_min = num(key, value)?,
            "scale_max" => self.scale_max = num(key, value)?,
            "source_pool" => self.source_pool = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "max_steps" => self.max_steps = Some(num(key, value)?),
            "train_data" => self.train_data = Some(PathBuf::from(value)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "metrics" => self.metrics = Some(PathBuf::from(value)),
            _ => return Err(MvsError::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut beta_set = false;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| MvsError::Config(format!("line {}: expected key = value", n + 1)))?;
            let k = k.trim();
            beta_set |= k == "beta";
            cfg.set(k, v.trim())
                .map_err(|e| MvsError::Config(format!("line {}: {e}", n + 1)))?;
        }
        if !beta_set {
            cfg.loss.beta = cfg.model.d2 as f64;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| MvsError::io(path, e))?;
        Self::parse(&text)
    }
}
