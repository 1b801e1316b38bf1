//! Training and accelerator configuration mirrors, plus the model-type
//! preset table. Hugging Face identifiers are honored as architecture preset
//! names only; nothing is ever fetched.

use dinomx_core::augment::{CropConfig, PolicyDomain};
use dinomx_core::peft::Target;
use dinomx_core::vit::ViTConfig;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown model_type {name:?}; known presets: {known}")]
    UnknownPreset { name: String, known: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistMode {
    Ddp,
    Fsdp,
}

impl DistMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DistMode::Ddp => "ddp",
            DistMode::Fsdp => "fsdp",
        }
    }
}

/// Parsed accelerator file: distribution type, recorded mixed-precision
/// flags, and the worker count.
#[derive(Debug, Clone, PartialEq)]
pub struct AccelConfig {
    pub dist_type: DistMode,
    pub mixed_precision: String,
    pub downcast_bf16: String,
    pub num_workers: usize,
}

impl Default for AccelConfig {
    fn default() -> Self {
        Self {
            dist_type: DistMode::Ddp,
            mixed_precision: "no".into(),
            downcast_bf16: "no".into(),
            num_workers: 1,
        }
    }
}

impl AccelConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.num_workers == 0 {
            return Err(ConfigError::Invalid("num_workers must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TeacherViews {
    Global,
    Local,
    All,
}

impl TeacherViews {
    pub fn as_str(self) -> &'static str {
        match self {
            TeacherViews::Global => "global",
            TeacherViews::Local => "local",
            TeacherViews::All => "all",
        }
    }
}

/// The objective family implied by the iBOT weight: a positive weight adds
/// the masked-patch loss on top of the CLS loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    DinoV1Style,
    DinoV2Style,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSection {
    pub model_name: String,
    pub model_type: String,
    pub global_batch_size: usize,
    pub max_iterations: usize,
    pub do_distillation: bool,
    /// Recorded only; computation stays in 32-bit float.
    pub mixed_precision: bool,
    pub use_lora: bool,
    pub freeze_last_layer: usize,
    pub warmup_teacher_temp_iterations: usize,
    pub warmup_iterations: usize,
    pub teacher_temp: f64,
    pub warmup_teacher_temp: f64,
    pub freeze_backbone_layers: usize,
    pub momentum_teacher: f64,
    pub centering: String,
    pub ibot_separate_head: bool,
    pub use_pretrained: bool,
    pub generate_samples: bool,
    pub lr: f64,
    pub min_lr: f64,
    pub saveckp_freq: usize,
    pub weight_decay: f64,
    pub weight_decay_end: f64,
    pub student_temp: f64,
    pub center_momentum: f64,
    pub clip_grad: f64,
    pub seed: u64,
    pub in_channels: Option<usize>,
    pub teacher_views: TeacherViews,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            model_name: "run".into(),
            model_type: "desk-tiny".into(),
            global_batch_size: 8,
            max_iterations: 100,
            do_distillation: false,
            mixed_precision: false,
            use_lora: false,
            freeze_last_layer: 100,
            warmup_teacher_temp_iterations: 500,
            warmup_iterations: 1000,
            teacher_temp: 0.04,
            warmup_teacher_temp: 0.04,
            freeze_backbone_layers: 0,
            momentum_teacher: 0.996,
            centering: "centering".into(),
            ibot_separate_head: false,
            use_pretrained: false,
            generate_samples: false,
            lr: 1e-4,
            min_lr: 1e-5,
            saveckp_freq: 250,
            weight_decay: 0.04,
            weight_decay_end: 0.4,
            student_temp: 0.1,
            center_momentum: 0.9,
            clip_grad: 3.0,
            seed: 0,
            in_channels: None,
            teacher_views: TeacherViews::Global,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DinoHeadSection {
    pub out_dim: usize,
    pub norm_last_layer: bool,
    pub loss_weight: f64,
    pub hidden_dim: usize,
    pub bottleneck_dim: usize,
}

impl Default for DinoHeadSection {
    fn default() -> Self {
        Self {
            out_dim: 1024,
            norm_last_layer: false,
            loss_weight: 1.0,
            hidden_dim: 256,
            bottleneck_dim: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IbotSection {
    pub loss_weight: f64,
    pub out_dim: usize,
    pub norm_last_layer: bool,
    pub mask_sample_probability: f64,
    pub mask_ratio_min: f64,
    pub mask_ratio_max: f64,
}

impl Default for IbotSection {
    fn default() -> Self {
        Self {
            loss_weight: 0.0,
            out_dim: 1024,
            norm_last_layer: true,
            mask_sample_probability: 0.5,
            mask_ratio_min: 0.1,
            mask_ratio_max: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillationSection {
    pub distilled_model_type: String,
    pub distilled_model_weights: String,
    pub load_from_disk: bool,
}

impl Default for DistillationSection {
    fn default() -> Self {
        Self {
            distilled_model_type: "tiny-giant".into(),
            distilled_model_weights: String::new(),
            load_from_disk: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraSection {
    pub lora_r: usize,
    pub lora_alpha: f64,
    pub lora_dropout: f64,
    pub target_projections: Vec<Target>,
}

impl Default for LoraSection {
    fn default() -> Self {
        Self {
            lora_r: 4,
            lora_alpha: 16.0,
            lora_dropout: 0.1,
            target_projections: vec![Target::Q, Target::V],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSection {
    pub dataset_path: String,
    pub shuffle: bool,
    pub domain: PolicyDomain,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            dataset_path: "dataset".into(),
            shuffle: true,
            domain: PolicyDomain::Medical,
        }
    }
}

/// Parsed mirror of the training YAML (all sections).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub train: TrainSection,
    pub dino_head: DinoHeadSection,
    pub ibot: IbotSection,
    pub distillation: DistillationSection,
    pub lora: LoraSection,
    pub crops: CropConfig,
    pub dataset: DatasetSection,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            train: TrainSection::default(),
            dino_head: DinoHeadSection::default(),
            ibot: IbotSection::default(),
            distillation: DistillationSection::default(),
            lora: LoraSection::default(),
            crops: CropConfig::desk(),
            dataset: DatasetSection::default(),
        }
    }
}

impl TrainConfig {
    pub fn variant(&self) -> Variant {
        if self.ibot.loss_weight > 0.0 {
            Variant::DinoV2Style
        } else {
            Variant::DinoV1Style
        }
    }

    pub fn vit_config(&self) -> Result<ViTConfig, ConfigError> {
        let mut vit = resolve_model_type(&self.train.model_type)?;
        if let Some(ch) = self.train.in_channels {
            if ch != 1 && ch != 3 {
                return Err(ConfigError::Invalid(format!("in_channels must be 1 or 3, got {ch}")));
            }
            vit.in_channels = ch;
        }
        Ok(vit)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let t = &self.train;
        if !(0.0 < t.min_lr && t.min_lr <= t.lr) {
            return Err(ConfigError::Invalid(format!(
                "learning rates must satisfy 0 < min_lr <= lr, got min_lr {} lr {}",
                t.min_lr, t.lr
            )));
        }
        if !(0.0 < t.momentum_teacher && t.momentum_teacher < 1.0) {
            return Err(ConfigError::Invalid(format!(
                "momentum_teacher must lie in (0, 1), got {}",
                t.momentum_teacher
            )));
        }
        if t.warmup_iterations >= t.max_iterations {
            return Err(ConfigError::Invalid(format!(
                "warmup_iterations {} must be < max_iterations {}",
                t.warmup_iterations, t.max_iterations
            )));
        }
        if t.centering != "centering" {
            return Err(ConfigError::Invalid(format!(
                "centering {:?} is not supported; only 'centering' is implemented",
                t.centering
            )));
        }
        if t.teacher_temp <= 0.0 || t.warmup_teacher_temp <= 0.0 || t.student_temp <= 0.0 {
            return Err(ConfigError::Invalid("temperatures must be positive".into()));
        }
        if t.saveckp_freq == 0 {
            return Err(ConfigError::Invalid("saveckp_freq must be >= 1".into()));
        }
        let vit = self.vit_config()?;
        vit.validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if t.freeze_backbone_layers > vit.depth {
            return Err(ConfigError::Invalid(format!(
                "freeze_backbone_layers {} exceeds depth {}",
                t.freeze_backbone_layers, vit.depth
            )));
        }
        self.crops
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.ibot.mask_sample_probability)
            || !(0.0 <= self.ibot.mask_ratio_min
                && self.ibot.mask_ratio_min <= self.ibot.mask_ratio_max
                && self.ibot.mask_ratio_max <= 1.0)
        {
            return Err(ConfigError::Invalid("iBOT mask settings out of range".into()));
        }
        Ok(())
    }

    /// Deterministic serialization used for resume-time config comparison.
    pub fn canonical_string(&self) -> String {
        format!("{self:?}")
    }
}

/// Known architecture presets. Paper-scale Hugging Face names resolve to
/// their published geometry; `desk-*` presets train on a CPU in minutes.
pub fn preset_table() -> Vec<(&'static str, ViTConfig)> {
    fn vit(
        patch_size: usize,
        embed_dim: usize,
        depth: usize,
        num_heads: usize,
        in_channels: usize,
        base_grid: usize,
    ) -> ViTConfig {
        ViTConfig {
            patch_size,
            embed_dim,
            depth,
            num_heads,
            mlp_ratio: 4.0,
            in_channels,
            base_grid,
        }
    }
    vec![
        ("facebook/dino-vitb16", vit(16, 768, 12, 12, 3, 14)),
        ("facebook/dino-vits16", vit(16, 384, 12, 6, 3, 14)),
        ("facebook/dinov2-base", vit(14, 768, 12, 12, 3, 16)),
        ("facebook/dinov2-small", vit(14, 384, 12, 6, 3, 16)),
        ("facebook/dinov2-giant", vit(14, 1536, 40, 24, 3, 16)),
        ("desk-tiny", ViTConfig::desk_tiny()),
        ("desk-nano", vit(4, 32, 2, 2, 1, 8)),
        // synthetic distillation teacher geometry (d_t = 128)
        ("tiny-giant", vit(4, 128, 2, 4, 1, 8)),
    ]
}

pub fn resolve_model_type(name: &str) -> Result<ViTConfig, ConfigError> {
    let table = preset_table();
    table
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, c)| c.clone())
        .ok_or_else(|| ConfigError::UnknownPreset {
            name: name.to_string(),
            known: table
                .iter()
                .map(|(n, _)| *n)
                .collect::<Vec<_>>()
                .join(", "),
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn listing_style_defaults_validate() {
        let mut cfg = TrainConfig::default();
        cfg.train.max_iterations = 2000;
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.variant(), Variant::DinoV1Style);
        cfg.ibot.loss_weight = 0.5;
        assert_eq!(cfg.variant(), Variant::DinoV2Style);
    }

    #[test]
    fn unknown_preset_lists_known_names() {
        let err = resolve_model_type("facebook/unknown").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("desk-tiny"));
        assert!(msg.contains("facebook/dinov2-base"));
    }

    #[test]
    fn paper_preset_geometry() {
        let base = resolve_model_type("facebook/dinov2-base").unwrap();
        assert_eq!(base.embed_dim, 768);
        assert_eq!(base.depth, 12);
        let giant = resolve_model_type("facebook/dinov2-giant").unwrap();
        assert_eq!(giant.embed_dim, 1536);
    }

    #[test]
    fn invalid_settings_are_rejected() {
        let mut cfg = TrainConfig::default();
        cfg.train.centering = "sinkhorn".into();
        assert!(cfg.validate().is_err());

        let mut cfg = TrainConfig::default();
        cfg.train.min_lr = 1.0;
        assert!(cfg.validate().is_err());

        let mut cfg = TrainConfig::default();
        cfg.train.warmup_iterations = 100;
        cfg.train.max_iterations = 50;
        assert!(cfg.validate().is_err());
    }
}
