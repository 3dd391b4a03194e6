//! Segmentation loss, AdamW with warmup-cosine schedule, and the training
//! loop with per-epoch checkpoints and a JSON-lines log.

mod gradcheck;
mod loss;
mod optim;
mod trainer;

use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::DatasetError;
use crate::mask::MaskError;
use crate::model::{ModelConfig, ModelError};

pub use gradcheck::{check_gradients, group_grad_norms, relative_error, GroupCheck};
pub use loss::{
    loss_grad_logits, loss_grad_probs, majority_pool, seg_loss, LossKind, DICE_SMOOTH, DICE_WEIGHT, PROB_CLAMP_EPS,
};
pub use optim::{lr_at, lr_at_continuous, AdamW};
pub use trainer::{
    build_loss, example_gradients, fit, prepare_example, prepare_examples, read_log, train_step, FitOptions,
    FitOutcome, TrainExample, TrainLogEntry, TrainState, CHECKPOINT_PREFIX, LOG_FILE,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss {loss} at step {step} (samples: {samples})")]
    NonFiniteLoss { step: usize, loss: f64, samples: String },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("config line {line}: {message}")]
    ConfigParse { line: usize, message: String },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("cannot resume: {0}")]
    Resume(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Pretrain,
    Finetune,
}

impl FromStr for TrainMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pretrain" => Ok(TrainMode::Pretrain),
            "finetune" => Ok(TrainMode::Finetune),
            other => Err(format!("unknown mode `{other}` (expected pretrain or finetune)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossKind,
    /// Supervise the upsampled confidences at model input resolution
    /// instead of the patch grid.
    pub full_res_supervision: bool,
    pub model: ModelConfig,
    /// Parameter-group prefixes excluded from updates.
    pub freeze: Vec<String>,
    pub init_checkpoint: Option<PathBuf>,
    pub import_manifest: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub split: String,
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        Self {
            mode: TrainMode::Pretrain,
            learning_rate: 1e-5,
            weight_decay: 5e-4,
            warmup_epochs: 5,
            epochs: 50,
            batch_size: 128,
            seed: 0,
            loss: LossKind::BcePlusDice,
            full_res_supervision: false,
            model: ModelConfig::tiny(),
            freeze: Vec::new(),
            init_checkpoint: None,
            import_manifest: None,
            out_dir: PathBuf::from("runs"),
            split: "train".into(),
        }
    }

    pub fn finetune() -> Self {
        Self {
            mode: TrainMode::Finetune,
            warmup_epochs: 1,
            epochs: 15,
            batch_size: 64,
            ..Self::pretrain()
        }
    }

    pub fn for_mode(mode: TrainMode) -> Self {
        match mode {
            TrainMode::Pretrain => Self::pretrain(),
            TrainMode::Finetune => Self::finetune(),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return bad(format!(
                "warmup_epochs {} must be below epochs {}",
                self.warmup_epochs, self.epochs
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        self.model.validate()?;
        Ok(())
    }

    /// Warmup length in optimizer steps for a run of `total_steps`.
    pub fn warmup_steps(&self, total_steps: usize) -> usize {
        if self.epochs == 0 {
            return 0;
        }
        (total_steps as f64 * self.warmup_epochs as f64 / self.epochs as f64).round() as usize
    }

    /// Parses `key = value` lines over the defaults of `mode`. A `mode` key
    /// in the text is honoured only when no mode is passed. Blank lines and
    /// `#` comments are ignored.
    pub fn parse(text: &str, mode: Option<TrainMode>) -> Result<Self, TrainError> {
        let entries = parse_lines(text)?;
        let file_mode = entries
            .iter()
            .find(|(_, k, _)| k == "mode")
            .map(|(line, _, v)| v.parse::<TrainMode>().map_err(|message| TrainError::ConfigParse { line: *line, message }))
            .transpose()?;
        let mut cfg = Self::for_mode(mode.or(file_mode).unwrap_or(TrainMode::Pretrain));
        for (line, key, value) in &entries {
            cfg.apply(key, value).map_err(|message| TrainError::ConfigParse { line: *line, message })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T, String> {
            v.parse().map_err(|_| format!("`{key}` expects a number, got `{v}`"))
        }
        fn flag(key: &str, v: &str) -> Result<bool, String> {
            match v {
                "true" | "yes" | "1" => Ok(true),
                "false" | "no" | "0" => Ok(false),
                _ => Err(format!("`{key}` expects true or false, got `{v}`")),
            }
        }
        match key {
            "mode" => {}
            "learning_rate" | "lr" => self.learning_rate = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "warmup_epochs" => self.warmup_epochs = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "loss" => self.loss = value.parse()?,
            "full_res_supervision" => self.full_res_supervision = flag(key, value)?,
            "freeze" => {
                self.freeze = value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
            }
            "init_checkpoint" => self.init_checkpoint = Some(PathBuf::from(value)),
            "import_manifest" => self.import_manifest = Some(PathBuf::from(value)),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "split" => self.split = value.to_string(),
            "model" => {
                self.model = match value {
                    "tiny" => ModelConfig::tiny(),
                    "toy" => ModelConfig::toy(),
                    "tiny_groups" => ModelConfig::default_groups_tiny(),
                    "default" => ModelConfig::default(),
                    other => return Err(format!("unknown model preset `{other}`")),
                }
            }
            _ => {
                let Some(field) = key.strip_prefix("model.") else {
                    return Err(format!("unknown key `{key}`"));
                };
                let m = &mut self.model;
                match field {
                    "image_size" => m.image_size = num(key, value)?,
                    "patch_size" => m.patch_size = num(key, value)?,
                    "embed_dim" => m.embed_dim = num(key, value)?,
                    "num_heads" => m.num_heads = num(key, value)?,
                    "visual_layers" => m.visual_layers = num(key, value)?,
                    "text_layers" => m.text_layers = num(key, value)?,
                    "vocab_size" => m.vocab_size = num(key, value)?,
                    "max_text_len" => m.max_text_len = num(key, value)?,
                    "n_low_group" => m.n_low_group = num(key, value)?,
                    "n_high_group" => m.n_high_group = num(key, value)?,
                    "decoder_layers_stage1" => m.decoder_layers_stage1 = num(key, value)?,
                    "decoder_layers_stage2" => m.decoder_layers_stage2 = num(key, value)?,
                    "mask_threshold" => m.mask_threshold = num(key, value)?,
                    _ => return Err(format!("unknown key `{key}`")),
                }
            }
        }
        Ok(())
    }
}

fn parse_lines(text: &str) -> Result<Vec<(usize, String, String)>, TrainError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(TrainError::ConfigParse {
                line: i + 1,
                message: format!("expected `key = value`, got `{line}`"),
            });
        };
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_overrides_mode_defaults() {
        let text = "# toy run\nmode = finetune\nlr = 0.003\nmodel = toy\nmodel.embed_dim = 32\nfreeze = text., visual.embed\n";
        let cfg = TrainConfig::parse(text, None).unwrap();
        assert_eq!(cfg.mode, TrainMode::Finetune);
        assert_eq!(cfg.epochs, 15);
        assert_eq!(cfg.learning_rate, 0.003);
        assert_eq!(cfg.model.embed_dim, 32);
        assert_eq!(cfg.model.patch_size, ModelConfig::toy().patch_size);
        assert_eq!(cfg.freeze, vec!["text.".to_string(), "visual.embed".to_string()]);
        let forced = TrainConfig::parse(text, Some(TrainMode::Pretrain)).unwrap();
        assert_eq!(forced.batch_size, 128);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = TrainConfig::parse("epochs = 3\nbogus = 1\n", None).unwrap_err();
        assert!(matches!(err, TrainError::ConfigParse { line: 2, .. }));
        let err = TrainConfig::parse("epochs\n", None).unwrap_err();
        assert!(matches!(err, TrainError::ConfigParse { line: 1, .. }));
        let err = TrainConfig::parse("epochs = 5\nwarmup_epochs = 5\n", None).unwrap_err();
        assert!(matches!(err, TrainError::InvalidConfig(_)));
    }

    #[test]
    fn warmup_steps_scale_with_epochs() {
        let cfg = TrainConfig::pretrain();
        assert_eq!(cfg.warmup_steps(500), 50);
        assert_eq!(TrainConfig::finetune().warmup_steps(150), 10);
    }
}
