//! Training configuration and its `key=value` file format.

use serde::{Deserialize, Serialize};

use super::data::DEFAULT_DIMS;
use crate::error::{Error, Result};
use crate::vwal::RankOrder;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Weight of the uncertainty-weighted term while pre-training.
    pub lambda1: f64,
    /// Weight of the labeled uncertainty-weighted term while self-training.
    pub lambda2: f64,
    /// Weight of the unlabeled uncertainty-weighted term while self-training.
    pub lambda3: f64,
    pub ema_decay: f64,
    pub learning_rate: f64,
    pub pretrain_epochs: usize,
    pub selftrain_epochs: usize,
    /// Labeled samples per pre-training step (paired consecutively).
    pub pretrain_batch: usize,
    /// Labeled/unlabeled pairs per self-training step.
    pub selftrain_batch: usize,
    pub labeled: usize,
    pub unlabeled: usize,
    pub test: usize,
    pub dims: [usize; 3],
    /// Zero box edge as a fraction of each volume edge.
    pub mask_ratio: f64,
    pub epsilon: f64,
    pub rank_order: RankOrder,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.8,
            lambda2: 0.8,
            lambda3: 0.4,
            ema_decay: 0.99,
            learning_rate: 0.05,
            pretrain_epochs: 40,
            selftrain_epochs: 12,
            pretrain_batch: 2,
            selftrain_batch: 2,
            labeled: 4,
            unlabeled: 36,
            test: 10,
            dims: DEFAULT_DIMS,
            mask_ratio: 2.0 / 3.0,
            epsilon: 1.0,
            rank_order: RankOrder::AscendingUncertainty,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Contract(msg));
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("{name} must be a finite value >= 0, got {v}"));
            }
        }
        if !(self.ema_decay >= 0.0 && self.ema_decay <= 1.0) {
            return bad(format!(
                "ema_decay must lie in [0, 1], got {}",
                self.ema_decay
            ));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return bad(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if !self.epsilon.is_finite() || self.epsilon <= 0.0 {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return bad(format!(
                "mask_ratio must lie in [0, 1], got {}",
                self.mask_ratio
            ));
        }
        if self.pretrain_batch == 0 || self.selftrain_batch == 0 {
            return bad("batch sizes must be at least 1".into());
        }
        if self.labeled < 2 {
            return bad(format!(
                "need at least 2 labeled samples, got {}",
                self.labeled
            ));
        }
        if self.dims.iter().any(|&d| d < 2) {
            return bad(format!("volume dims {:?} too small", self.dims));
        }
        Ok(())
    }

    /// Zero-box size derived from [`mask_ratio`](Self::mask_ratio).
    pub fn zero_size(&self) -> [usize; 3] {
        self.dims
            .map(|d| ((d as f64 * self.mask_ratio).round() as usize).min(d))
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Contract(format!("bad value {value:?} for {key}")))
        }
        match key {
            "lambda1" => self.lambda1 = num(key, value)?,
            "lambda2" => self.lambda2 = num(key, value)?,
            "lambda3" => self.lambda3 = num(key, value)?,
            "ema_decay" | "alpha" => self.ema_decay = num(key, value)?,
            "learning_rate" | "lr" => self.learning_rate = num(key, value)?,
            "pretrain_epochs" => self.pretrain_epochs = num(key, value)?,
            "selftrain_epochs" => self.selftrain_epochs = num(key, value)?,
            "pretrain_batch" => self.pretrain_batch = num(key, value)?,
            "selftrain_batch" => self.selftrain_batch = num(key, value)?,
            "labeled" => self.labeled = num(key, value)?,
            "unlabeled" => self.unlabeled = num(key, value)?,
            "test" => self.test = num(key, value)?,
            "mask_ratio" => self.mask_ratio = num(key, value)?,
            "epsilon" => self.epsilon = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "rank_order" => self.rank_order = value.parse()?,
            "dims" => {
                let parts: Vec<usize> = value
                    .split(',')
                    .map(|p| num(key, p.trim()))
                    .collect::<Result<_>>()?;
                self.dims = match parts[..] {
                    [d] => [d, d, d],
                    [w, h, l] => [w, h, l],
                    _ => {
                        return Err(Error::Contract(format!(
                            "dims takes 1 or 3 values, got {value:?}"
                        )))
                    }
                };
            }
            other => return Err(Error::Contract(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parses `key=value` lines over the defaults. `#` starts a comment.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Contract(format!(
                    "line {}: expected key=value, got {line:?}",
                    lineno + 1
                ))
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Contract(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        assert_eq!((cfg.lambda1, cfg.lambda2, cfg.lambda3), (0.8, 0.8, 0.4));
        assert_eq!(cfg.zero_size(), [16, 16, 16]);
    }

    #[test]
    fn parses_kv_with_comments() {
        let cfg = TrainConfig::from_kv_str(
            "# toy run\nlambda1 = 0\nlr=0.1 # faster\n\nrank_order=desc\ndims=8\n",
        )
        .unwrap();
        assert_eq!(cfg.lambda1, 0.0);
        assert_eq!(cfg.learning_rate, 0.1);
        assert_eq!(cfg.rank_order, RankOrder::DescendingUncertainty);
        assert_eq!(cfg.dims, [8, 8, 8]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(TrainConfig::from_kv_str("nonsense").is_err());
        assert!(TrainConfig::from_kv_str("unknown=1").is_err());
        assert!(TrainConfig::from_kv_str("lambda1=-1").is_err());
        assert!(TrainConfig::from_kv_str("ema_decay=1.5").is_err());
        assert!(TrainConfig::from_kv_str("lr=abc").is_err());
    }
}
