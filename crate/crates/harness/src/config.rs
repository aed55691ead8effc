//! Flat JSON run configuration.
//!
//! Every key is optional and defaults to the desk-scale TW-BERT setup.
//! Unknown keys are rejected, all of them at once.

use std::path::Path;

use serde::{Deserialize, Serialize};
use twbert_core::attention::Variant;
use twbert_core::data::CorpusConfig;
use twbert_core::model::ModelConfig;
use twbert_core::objectives::{LossWeights, StepConfig, TrainMode};
use twbert_core::optim::AdamWConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config is not a JSON object: {0}")]
    Syntax(String),
    #[error("unknown config keys: {}", .0.join(", "))]
    UnknownKeys(Vec<String>),
    #[error("invalid config: {}", .0.join("; "))]
    Invalid(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // model
    pub d: usize,
    pub heads: usize,
    pub video_layers: usize,
    pub text_layers: usize,
    pub cross_layers: usize,
    pub d_c: usize,
    pub variant: Variant,
    pub concat_vtm: bool,
    pub fine_grained: bool,
    pub fine_normalize: bool,
    // objectives
    pub mode: TrainMode,
    pub w_c: f64,
    pub w_f: f64,
    pub w_mlm: f64,
    pub w_vtm: f64,
    pub tau: f64,
    pub p_mask: f64,
    pub neg_fraction: f64,
    pub momentum: f64,
    pub queue_capacity: usize,
    pub queue_tokens: usize,
    pub fine_queue: bool,
    // optimizer and schedule
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub checkpoint_every: usize,
    // corpus
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub corpus_seed: u64,
    pub grid: usize,
    pub frames: usize,
    pub noise: f64,
    pub contrast: bool,
    pub two_object_prob: f64,
    // run
    pub seed: u64,
    pub precision: u32,
    pub rerank_k: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            d: 32,
            heads: 4,
            video_layers: 2,
            text_layers: 2,
            cross_layers: 2,
            d_c: 32,
            variant: Variant::T2w,
            concat_vtm: true,
            fine_grained: true,
            fine_normalize: true,
            mode: TrainMode::Pretrain,
            w_c: 1.0,
            w_f: 1.0,
            w_mlm: 1.0,
            w_vtm: 1.0,
            tau: 0.05,
            p_mask: 0.15,
            neg_fraction: 0.5,
            momentum: 0.995,
            queue_capacity: 512,
            queue_tokens: 16,
            fine_queue: true,
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-8,
            weight_decay: 0.001,
            warmup_steps: 50,
            steps: 1000,
            batch_size: 16,
            checkpoint_every: 0,
            train_size: 64,
            val_size: 0,
            test_size: 64,
            corpus_seed: 0,
            grid: 4,
            frames: 4,
            noise: 0.1,
            contrast: false,
            two_object_prob: 0.5,
            seed: 0,
            precision: 32,
            rerank_k: 16,
        }
    }
}

/// The four rows of the ablation ladder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    Base,
    T2w,
    Concat,
    TwBert,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Base, Preset::T2w, Preset::Concat, Preset::TwBert];

    pub fn label(self) -> &'static str {
        match self {
            Preset::Base => "Base",
            Preset::T2w => "T2W",
            Preset::Concat => "ConCat",
            Preset::TwBert => "TW-BERT",
        }
    }

    pub fn parse(s: &str) -> Option<Preset> {
        match s.to_ascii_lowercase().as_str() {
            "base" => Some(Preset::Base),
            "t2w" => Some(Preset::T2w),
            "concat" => Some(Preset::Concat),
            "tw-bert" | "twbert" => Some(Preset::TwBert),
            _ => None,
        }
    }

    /// `cfg` with only the variant flags changed.
    pub fn apply(self, cfg: &RunConfig) -> RunConfig {
        let (variant, concat_vtm, fine_grained) = match self {
            Preset::Base => (Variant::Base, false, false),
            Preset::T2w => (Variant::T2w, false, false),
            Preset::Concat => (Variant::T2w, true, false),
            Preset::TwBert => (Variant::T2w, true, true),
        };
        RunConfig {
            variant,
            concat_vtm,
            fine_grained,
            ..cfg.clone()
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| ConfigError::Syntax("top level must be an object".into()))?;
        let known = serde_json::to_value(RunConfig::default()).expect("config serializes");
        let known = known.as_object().expect("config is an object");
        let mut unknown: Vec<String> = obj.keys().filter(|k| !known.contains_key(*k)).cloned().collect();
        if !unknown.is_empty() {
            unknown.sort();
            return Err(ConfigError::UnknownKeys(unknown));
        }
        let cfg: RunConfig =
            serde_json::from_value(value).map_err(|e| ConfigError::Invalid(vec![e.to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut p = self.model_config().problems();
        if self.batch_size < 2 {
            p.push("batch_size must be at least 2".into());
        }
        if self.batch_size > self.train_size {
            p.push(format!(
                "batch_size {} exceeds train_size {}",
                self.batch_size, self.train_size
            ));
        }
        if !(self.tau > 0.0) {
            p.push("tau must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            p.push("momentum must lie in [0, 1]".into());
        }
        if !(self.p_mask > 0.0 && self.p_mask < 1.0) {
            p.push("p_mask must lie in (0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.neg_fraction) {
            p.push("neg_fraction must lie in [0, 1]".into());
        }
        if self.precision != 32 && self.precision != 64 {
            p.push(format!("precision must be 32 or 64, got {}", self.precision));
        }
        if self.queue_tokens == 0 {
            p.push("queue_tokens must be positive".into());
        }
        if !(self.lr >= 0.0) {
            p.push("lr must be nonnegative".into());
        }
        for (k, w) in [("w_c", self.w_c), ("w_f", self.w_f), ("w_mlm", self.w_mlm), ("w_vtm", self.w_vtm)] {
            if !(w >= 0.0) || !w.is_finite() {
                p.push(format!("{k} must be finite and nonnegative"));
            }
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(p))
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d: self.d,
            heads: self.heads,
            video_layers: self.video_layers,
            text_layers: self.text_layers,
            cross_layers: self.cross_layers,
            d_c: self.d_c,
            grid: self.grid,
            frames: self.frames,
            variant: self.variant,
            concat_vtm: self.concat_vtm,
            fine_grained: self.fine_grained,
            fine_normalize: self.fine_normalize,
            ..ModelConfig::default()
        }
    }

    pub fn corpus_config(&self) -> CorpusConfig {
        CorpusConfig {
            train: self.train_size,
            val: self.val_size,
            test: self.test_size,
            seed: self.corpus_seed,
            grid: self.grid,
            frames: self.frames,
            noise: self.noise,
            contrast: self.contrast,
            two_object_prob: self.two_object_prob,
        }
    }

    pub fn step_config(&self) -> StepConfig {
        StepConfig {
            weights: LossWeights {
                c: self.w_c,
                f: self.w_f,
                mlm: self.w_mlm,
                vtm: self.w_vtm,
            },
            mode: self.mode,
            tau: self.tau,
            p_mask: self.p_mask,
            neg_fraction: self.neg_fraction,
            fine_queue: self.fine_queue,
        }
    }

    pub fn adam_config(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
            warmup_steps: self.warmup_steps,
            total_steps: self.steps,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_all_listed() {
        let err = RunConfig::from_json(r#"{"d": 16, "zeta": 1, "alpha": 2}"#).unwrap_err();
        match err {
            ConfigError::UnknownKeys(k) => assert_eq!(k, vec!["alpha", "zeta"]),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn presets_touch_only_variant_flags() {
        let base = RunConfig::default();
        let b = Preset::Base.apply(&base);
        assert_eq!(b.variant, Variant::Base);
        assert!(!b.concat_vtm && !b.fine_grained);
        let back = Preset::TwBert.apply(&b);
        assert_eq!(back, base);
    }

    #[test]
    fn round_trips_through_json() {
        let c = RunConfig {
            d: 16,
            mode: TrainMode::Finetune,
            ..Default::default()
        };
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }
}
