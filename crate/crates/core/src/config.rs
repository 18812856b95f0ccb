//! Training configuration and its `key = value` text form.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::distill::CmdConfig;
use crate::encoder::{EncoderConfig, Pooling};
use crate::error::{Error, Result};
use crate::skeleton::{AugmentConfig, Modality};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Parameter(format!("unknown precision '{other}'"))),
        }
    }
}

/// Every pre-training hyperparameter.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub modalities: Vec<Modality>,
    pub tau_c: f64,
    pub tau_t: f64,
    pub tau_s: f64,
    pub k: usize,
    pub bank_size: usize,
    pub alpha: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
    pub seed: u64,
    pub cmd_weight: f64,
    pub hidden_dim: usize,
    pub embedding_dim: usize,
    pub layers: usize,
    pub pooling: Pooling,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub augment: AugmentConfig,
    /// All modalities of a sample see the same augmentation draw.
    pub shared_aug_seed: bool,
    pub precision: Precision,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Record and check the source sample of every bank slot.
    pub debug_provenance: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Scaled-down settings that train in minutes on a CPU.
    pub fn desk() -> Self {
        Self {
            modalities: vec![Modality::Joint, Modality::Motion],
            tau_c: 0.07,
            tau_t: 0.05,
            tau_s: 0.1,
            k: 32,
            bank_size: 512,
            alpha: 0.999,
            batch_size: 64,
            lr: 0.01,
            sgd_momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 50,
            lr_drop_epoch: 39,
            lr_drop_factor: 0.1,
            seed: 0,
            cmd_weight: 1.0,
            hidden_dim: 64,
            embedding_dim: 32,
            layers: 3,
            pooling: Pooling::Mean,
            bn_momentum: 0.9,
            bn_eps: 1e-5,
            augment: AugmentConfig::default(),
            shared_aug_seed: true,
            precision: Precision::F32,
            checkpoint_every: 0,
            debug_provenance: false,
        }
    }

    /// The full-size schedule and model.
    pub fn full() -> Self {
        Self {
            k: 8192,
            bank_size: 16384,
            epochs: 450,
            lr_drop_epoch: 350,
            hidden_dim: 1024,
            embedding_dim: 128,
            ..Self::desk()
        }
    }

    pub fn encoder_config(&self, joints: usize) -> EncoderConfig {
        EncoderConfig {
            input_dim: 2 * joints * 3,
            hidden_dim: self.hidden_dim,
            embedding_dim: self.embedding_dim,
            layers: self.layers,
            pooling: self.pooling,
            bn_momentum: self.bn_momentum,
            bn_eps: self.bn_eps,
        }
    }

    pub fn cmd_config(&self) -> CmdConfig {
        CmdConfig {
            k: self.k,
            tau_t: self.tau_t,
            tau_s: self.tau_s,
            pairs: CmdConfig::all_pairs(&self.modalities),
            weight: self.cmd_weight,
        }
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.lr_drop_epoch {
            self.lr
        } else {
            self.lr * self.lr_drop_factor
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.modalities.is_empty() {
            return bad("at least one modality is required".into());
        }
        for (i, m) in self.modalities.iter().enumerate() {
            if self.modalities[..i].contains(m) {
                return bad(format!("modality {m} listed twice"));
            }
        }
        for (name, v) in [
            ("tau_c", self.tau_c),
            ("tau_s", self.tau_s),
            ("lr_drop_factor", self.lr_drop_factor),
            ("bn_eps", self.bn_eps),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be > 0, got {v}"));
            }
        }
        for (name, v) in [
            ("tau_t", self.tau_t),
            ("lr", self.lr),
            ("sgd_momentum", self.sgd_momentum),
            ("weight_decay", self.weight_decay),
            ("cmd_weight", self.cmd_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be >= 0, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad(format!("bn_momentum must lie in [0, 1], got {}", self.bn_momentum));
        }
        for (name, v) in [
            ("k", self.k),
            ("bank_size", self.bank_size),
            ("batch_size", self.batch_size),
            ("hidden_dim", self.hidden_dim),
            ("embedding_dim", self.embedding_dim),
            ("layers", self.layers),
        ] {
            if v == 0 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        if self.k > self.bank_size {
            return bad(format!("k = {} exceeds bank_size = {}", self.k, self.bank_size));
        }
        if self.batch_size > self.bank_size {
            return bad(format!(
                "batch_size = {} exceeds bank_size = {}",
                self.batch_size, self.bank_size
            ));
        }
        if self.epochs > 0 && self.lr_drop_epoch >= self.epochs {
            return bad(format!(
                "lr_drop_epoch = {} must be < epochs = {}",
                self.lr_drop_epoch, self.epochs
            ));
        }
        self.augment.validate()
    }

    /// Canonical `(key, value)` listing; parsing it back gives an equal config.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let a = &self.augment;
        let mods: Vec<&str> = self.modalities.iter().map(|m| m.name()).collect();
        vec![
            ("modalities", mods.join(",")),
            ("tau_c", self.tau_c.to_string()),
            ("tau_t", self.tau_t.to_string()),
            ("tau_s", self.tau_s.to_string()),
            ("k", self.k.to_string()),
            ("bank_size", self.bank_size.to_string()),
            ("alpha", self.alpha.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("sgd_momentum", self.sgd_momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("epochs", self.epochs.to_string()),
            ("lr_drop_epoch", self.lr_drop_epoch.to_string()),
            ("lr_drop_factor", self.lr_drop_factor.to_string()),
            ("seed", self.seed.to_string()),
            ("cmd_weight", self.cmd_weight.to_string()),
            ("hidden_dim", self.hidden_dim.to_string()),
            ("embedding_dim", self.embedding_dim.to_string()),
            ("layers", self.layers.to_string()),
            ("pooling", self.pooling.to_string()),
            ("bn_momentum", self.bn_momentum.to_string()),
            ("bn_eps", self.bn_eps.to_string()),
            ("frames", a.target_frames.to_string()),
            ("crop_min", a.crop_min.to_string()),
            ("crop_max", a.crop_max.to_string()),
            ("rotate_prob", a.rotate_prob.to_string()),
            ("max_rotation_deg", a.max_rotation_deg.to_string()),
            ("shear_prob", a.shear_prob.to_string()),
            ("max_shear", a.max_shear.to_string()),
            ("jitter_prob", a.jitter_prob.to_string()),
            ("jitter_std", a.jitter_std.to_string()),
            ("shared_aug_seed", self.shared_aug_seed.to_string()),
            ("precision", self.precision.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("debug_provenance", self.debug_provenance.to_string()),
        ]
    }

    pub fn keys() -> Vec<&'static str> {
        Self::desk().to_pairs().into_iter().map(|(k, _)| k).collect()
    }

    /// Sets one field from its text form. Unknown keys are usage errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::Parameter(format!("{key}: cannot parse '{v}'")))
        }
        let v = value.trim();
        let a = &mut self.augment;
        match key.trim() {
            "modalities" => {
                self.modalities = v
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(str::parse)
                    .collect::<Result<_>>()?
            }
            "tau_c" => self.tau_c = num(key, v)?,
            "tau_t" => self.tau_t = num(key, v)?,
            "tau_s" => self.tau_s = num(key, v)?,
            "k" => self.k = num(key, v)?,
            "bank_size" => self.bank_size = num(key, v)?,
            "alpha" => self.alpha = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "lr" => self.lr = num(key, v)?,
            "sgd_momentum" => self.sgd_momentum = num(key, v)?,
            "weight_decay" => self.weight_decay = num(key, v)?,
            "epochs" => self.epochs = num(key, v)?,
            "lr_drop_epoch" => self.lr_drop_epoch = num(key, v)?,
            "lr_drop_factor" => self.lr_drop_factor = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "cmd_weight" => self.cmd_weight = num(key, v)?,
            "hidden_dim" => self.hidden_dim = num(key, v)?,
            "embedding_dim" => self.embedding_dim = num(key, v)?,
            "layers" => self.layers = num(key, v)?,
            "pooling" => self.pooling = v.parse()?,
            "bn_momentum" => self.bn_momentum = num(key, v)?,
            "bn_eps" => self.bn_eps = num(key, v)?,
            "frames" => a.target_frames = num(key, v)?,
            "crop_min" => a.crop_min = num(key, v)?,
            "crop_max" => a.crop_max = num(key, v)?,
            "rotate_prob" => a.rotate_prob = num(key, v)?,
            "max_rotation_deg" => a.max_rotation_deg = num(key, v)?,
            "shear_prob" => a.shear_prob = num(key, v)?,
            "max_shear" => a.max_shear = num(key, v)?,
            "jitter_prob" => a.jitter_prob = num(key, v)?,
            "jitter_std" => a.jitter_std = num(key, v)?,
            "shared_aug_seed" => self.shared_aug_seed = num(key, v)?,
            "precision" => self.precision = v.parse()?,
            "checkpoint_every" => self.checkpoint_every = num(key, v)?,
            "debug_provenance" => self.debug_provenance = num(key, v)?,
            other => return Err(Error::Usage(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and `#`
    /// comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected 'key = value', got '{line}'"),
            })?;
            self.set(k, v).map_err(|e| match e {
                Error::Parameter(msg) => Error::Parse { line: i + 1, msg },
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::desk();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn to_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// SHA-256 of the canonical text form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = TrainConfig::full();
        cfg.modalities = Modality::ALL.to_vec();
        cfg.pooling = Pooling::Last;
        cfg.augment.jitter_std = 0.02;
        cfg.shared_aug_seed = false;
        cfg.precision = Precision::F64;
        let back = TrainConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_ne!(TrainConfig::desk().hash(), cfg.hash());
    }

    #[test]
    fn presets_are_valid() {
        TrainConfig::desk().validate().unwrap();
        TrainConfig::full().validate().unwrap();
        let p = TrainConfig::full();
        assert_eq!((p.k, p.bank_size, p.epochs, p.lr_drop_epoch), (8192, 16384, 450, 350));
        assert_eq!(p.lr_at(349), 0.01);
        assert!((p.lr_at(350) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn comments_and_errors() {
        let cfg = TrainConfig::from_text("# header\n\nk = 16  # neighbors\nepochs=3\nlr_drop_epoch = 2\n").unwrap();
        assert_eq!((cfg.k, cfg.epochs), (16, 3));
        assert!(matches!(TrainConfig::from_text("nope = 1"), Err(Error::Usage(_))));
        assert!(matches!(
            TrainConfig::from_text("k = 1\nk = x"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(TrainConfig::from_text("k"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn validation_rules() {
        let mut c = TrainConfig::desk();
        c.k = c.bank_size + 1;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::desk();
        c.lr_drop_epoch = c.epochs;
        assert!(c.validate().is_err());
        c.epochs = 0;
        assert!(c.validate().is_ok());
        let mut c = TrainConfig::desk();
        c.modalities = vec![Modality::Joint, Modality::Joint];
        assert!(c.validate().is_err());
        let mut c = TrainConfig::desk();
        c.tau_c = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn every_key_is_settable() {
        let mut c = TrainConfig::desk();
        for (k, v) in TrainConfig::desk().to_pairs() {
            c.set(k, &v).unwrap();
        }
        assert_eq!(c, TrainConfig::desk());
        assert_eq!(TrainConfig::keys().len(), TrainConfig::desk().to_pairs().len());
    }
}
