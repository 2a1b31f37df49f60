//! Flat text config format: one `section.key = value` per line, `#`
//! comments. Typed readers build the cohort, model, and training configs,
//! rejecting unknown keys so typos surface as validation errors.

use std::collections::{BTreeMap, BTreeSet};

use crate::cohort::CohortConfig;
use crate::model::{Fusion, ModelConfig, PriorMode};
use crate::ori::OriStrategy;
use crate::tensor::{Result, TensorError};
use crate::trainer::{LossMode, TrainConfig};

fn bad(msg: String) -> TensorError {
    TensorError::Invalid { op: "config", msg }
}

/// Parsed key/value pairs plus a consumption log for unknown-key checks.
#[derive(Debug, Default, Clone)]
pub struct ConfigMap {
    entries: BTreeMap<String, String>,
    used: std::cell::RefCell<BTreeSet<String>>,
}

impl ConfigMap {
    pub fn parse(text: &str) -> Result<ConfigMap> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("line {}: expected key = value", lineno + 1)))?;
            let key = key.trim();
            let value = value.trim();
            if key.is_empty() {
                return Err(bad(format!("line {}: empty key", lineno + 1)));
            }
            if entries.insert(key.to_string(), value.to_string()).is_some() {
                return Err(bad(format!("duplicate key {key}")));
            }
        }
        Ok(ConfigMap {
            entries,
            used: Default::default(),
        })
    }

    /// All key/value pairs, e.g. for a run manifest snapshot.
    pub fn snapshot(&self) -> BTreeMap<String, String> {
        self.entries.clone()
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.used.borrow_mut().insert(key.to_string());
        self.entries.get(key).map(|s| s.as_str())
    }

    fn parse_as<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| bad(format!("key {key}: cannot parse `{v}`"))),
        }
    }

    pub fn f64(&self, key: &str, default: f64) -> Result<f64> {
        self.parse_as(key, default)
    }

    pub fn usize(&self, key: &str, default: usize) -> Result<usize> {
        self.parse_as(key, default)
    }

    pub fn u64(&self, key: &str, default: u64) -> Result<u64> {
        self.parse_as(key, default)
    }

    pub fn bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            None => Ok(default),
            Some("true") => Ok(true),
            Some("false") => Ok(false),
            Some(v) => Err(bad(format!("key {key}: expected true/false, got `{v}`"))),
        }
    }

    /// Comma-separated list.
    pub fn list<T: std::str::FromStr>(&self, key: &str, default: &[T]) -> Result<Vec<T>>
    where
        T: Clone,
    {
        match self.get(key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse()
                        .map_err(|_| bad(format!("key {key}: cannot parse `{p}`")))
                })
                .collect(),
        }
    }

    fn fixed3<T: std::str::FromStr + Clone + Copy>(&self, key: &str, default: [T; 3]) -> Result<[T; 3]> {
        let v = self.list(key, &default)?;
        v.try_into()
            .map_err(|_| bad(format!("key {key}: expected exactly 3 values")))
    }

    /// Errors if any key in `section.` was never read.
    pub fn reject_unknown(&self, sections: &[&str]) -> Result<()> {
        let used = self.used.borrow();
        for key in self.entries.keys() {
            let in_scope = sections
                .iter()
                .any(|s| key.starts_with(&format!("{s}.")));
            if in_scope && !used.contains(key) {
                return Err(bad(format!("unknown key {key}")));
            }
        }
        Ok(())
    }
}

/// Reads `cohort.*` keys over [`CohortConfig::default`].
pub fn cohort_config(map: &ConfigMap) -> Result<CohortConfig> {
    let d = CohortConfig::default();
    let mut cfg = CohortConfig {
        n_subjects: map.usize("cohort.n_subjects", d.n_subjects)?,
        seed: map.u64("cohort.seed", d.seed)?,
        noise: map.f64("cohort.noise", d.noise)?,
        train_frac: map.f64("cohort.train_frac", d.train_frac)?,
        val_frac: map.f64("cohort.val_frac", d.val_frac)?,
        ..d
    };
    let props = map.list("cohort.proportions", &cfg.proportions)?;
    cfg.proportions = props
        .try_into()
        .map_err(|_| bad("cohort.proportions: expected 4 values".into()))?;
    map.reject_unknown(&["cohort"])?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads `model.*` and `ori.*` keys over [`ModelConfig::default`].
pub fn model_config(map: &ConfigMap) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::default();
    cfg.multi_organ = map.bool("model.multi_organ", cfg.multi_organ)?;
    cfg.k = map.usize("model.k", cfg.k)?;
    cfg.adaptor_hidden = map.usize("model.adaptor_hidden", cfg.adaptor_hidden)?;
    cfg.adaptor_dim = map.usize("model.adaptor_dim", cfg.adaptor_dim)?;
    cfg.prior_mode = match map.get("model.prior").unwrap_or("onehot") {
        "none" => PriorMode::None,
        "onehot" => PriorMode::Onehot,
        v => return Err(bad(format!("model.prior: unknown mode `{v}`"))),
    };
    cfg.fusion = match map.get("model.fusion").unwrap_or("concat") {
        "concat" => Fusion::Concat,
        "pred_sum" => Fusion::PredSum,
        v => return Err(bad(format!("model.fusion: unknown strategy `{v}`"))),
    };
    let ce_head = map.bool("model.ce_head", false)?;
    let input = map.fixed3("model.input_shape", cfg.backbones[0].input_shape)?;
    let channels = map.list("model.channels", &cfg.backbones[0].channels)?;
    let attn = map.list("model.attention_stages", &cfg.backbones[0].attention_stages)?;
    for b in cfg.backbones.iter_mut() {
        b.input_shape = input;
        b.channels = channels.clone();
        b.attention_stages = attn.clone();
        b.ce_head = ce_head;
        b.logit_dim = if ce_head { cfg.k } else { cfg.k - 1 };
    }
    cfg.ori.strategy = match map.get("ori.strategy") {
        None => cfg.ori.strategy,
        Some(v) => {
            OriStrategy::parse(v).ok_or_else(|| bad(format!("ori.strategy: unknown `{v}`")))?
        }
    };
    cfg.ori.iterations = map.usize("ori.iterations", cfg.ori.iterations)?;
    cfg.ori.channels = *channels.last().unwrap_or(&cfg.ori.channels);
    // Default pooled shape: the built-in default clamped to the actual grid.
    let stage_dims = cfg.backbones[0].dims_after(cfg.backbones[0].stages());
    let clamped = [
        stage_dims[0].min(2),
        stage_dims[1].min(2),
        stage_dims[2].min(2),
    ];
    cfg.ori.pooled_shape = map.fixed3("ori.pooled_shape", clamped)?;
    map.reject_unknown(&["model", "ori"])?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads `train.*` keys over [`TrainConfig::default`].
pub fn train_config(map: &ConfigMap) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let loss = match map.get("train.loss") {
        None => d.loss,
        Some(v) => LossMode::parse(v).ok_or_else(|| bad(format!("train.loss: unknown `{v}`")))?,
    };
    let cfg = TrainConfig {
        epochs: map.usize("train.epochs", d.epochs)?,
        batch_size: map.usize("train.batch_size", d.batch_size)?,
        lr: map.f64("train.lr", d.lr)?,
        lambda: map.f64("train.lambda", d.lambda)?,
        seed: map.u64("train.seed", d.seed)?,
        dcca: map.bool("train.dcca", d.dcca)?,
        loss,
        augment: map.bool("train.augment", d.augment)?,
        dcca_hidden: map.usize("train.dcca_hidden", d.dcca_hidden)?,
        dcca_out: map.usize("train.dcca_out", d.dcca_out)?,
    };
    map.reject_unknown(&["train"])?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_key_values_and_comments() {
        let map = ConfigMap::parse(
            "# header\ncohort.n_subjects = 20  # inline\n\ncohort.noise = 0.1\n",
        )
        .unwrap();
        assert_eq!(map.get("cohort.n_subjects"), Some("20"));
        assert_eq!(map.get("cohort.noise"), Some("0.1"));
        assert_eq!(map.get("missing"), None);
    }

    #[test]
    fn rejects_malformed_and_duplicates() {
        assert!(ConfigMap::parse("no equals sign").is_err());
        assert!(ConfigMap::parse("a.b = 1\na.b = 2").is_err());
        assert!(ConfigMap::parse("= 3").is_err());
    }

    #[test]
    fn cohort_defaults_and_overrides() {
        let map = ConfigMap::parse("cohort.n_subjects = 12\ncohort.seed = 7").unwrap();
        let cfg = cohort_config(&map).unwrap();
        assert_eq!(cfg.n_subjects, 12);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.noise, CohortConfig::default().noise);
    }

    #[test]
    fn bad_proportions_reported() {
        let map = ConfigMap::parse("cohort.proportions = 0.5, 0.5, 0.5, 0.5").unwrap();
        let err = cohort_config(&map).unwrap_err().to_string();
        assert!(err.contains("grade proportions must sum to 1"), "{err}");
    }

    #[test]
    fn unknown_keys_rejected() {
        let map = ConfigMap::parse("cohort.n_subject = 12").unwrap();
        assert!(cohort_config(&map).unwrap_err().to_string().contains("unknown key"));
        let map = ConfigMap::parse("train.lrr = 0.1").unwrap();
        assert!(train_config(&map).unwrap_err().to_string().contains("unknown key"));
    }

    #[test]
    fn model_config_round_trip() {
        let text = "model.multi_organ = true\nmodel.channels = 2, 3\n\
                    model.attention_stages = 1\nmodel.input_shape = 8, 8, 12\n\
                    ori.strategy = query_swap\nori.iterations = 4";
        let map = ConfigMap::parse(text).unwrap();
        let cfg = model_config(&map).unwrap();
        assert_eq!(cfg.backbones[0].channels, vec![2, 3]);
        assert_eq!(cfg.ori.strategy, OriStrategy::QuerySwap);
        assert_eq!(cfg.ori.channels, 3);
        assert_eq!(cfg.backbones[0].input_shape, [8, 8, 12]);
        cfg.validate().unwrap();
    }

    #[test]
    fn ce_head_widens_logits() {
        let map = ConfigMap::parse("model.ce_head = true").unwrap();
        let cfg = model_config(&map).unwrap();
        assert!(cfg.ce_head());
        assert_eq!(cfg.backbones[0].logit_dim, 4);
    }

    #[test]
    fn train_config_reads_loss_mode() {
        let map = ConfigMap::parse("train.loss = hybrid\ntrain.epochs = 3").unwrap();
        let cfg = train_config(&map).unwrap();
        assert_eq!(cfg.loss, LossMode::Hybrid);
        assert_eq!(cfg.epochs, 3);
        let map = ConfigMap::parse("train.loss = focal").unwrap();
        assert!(train_config(&map).is_err());
    }

    #[test]
    fn dcca_batch_floor_enforced() {
        let map = ConfigMap::parse("train.batch_size = 2\ntrain.dcca = true").unwrap();
        assert!(train_config(&map).is_err());
    }
}
