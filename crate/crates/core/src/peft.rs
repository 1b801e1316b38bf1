//! Parameter-efficient fine-tuning: LoRA adapter injection/merging and
//! backbone layer freezing.
//!
//! Adapters follow `W = W_0 + (alpha/r) * B * A` with `A` Gaussian-initialized
//! and `B` zero-initialized, so a freshly injected adapter contributes
//! exactly nothing. Adapter tensors serialize under
//! `lora.<layer>.<target>.{A,B}` so they can be swapped independently of the
//! frozen base weights.

use std::collections::BTreeSet;


use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::graph::Matrix;
use crate::tensor::Tensor;
use crate::vit::{matrix_to_tensor, tensor_to_matrix, ParameterSet, ViTConfig};

#[derive(Debug, Error)]
pub enum PeftError {
    #[error("unknown LoRA target {0:?}; valid targets are Q, K, V, O")]
    UnknownTarget(String),
    #[error("LoRA rank must satisfy 1 <= r <= min(d, k); got r={r}, d={d}, k={k}")]
    BadRank { r: usize, d: usize, k: usize },
    #[error("dropout must be in [0, 1), got {0}")]
    BadDropout(f64),
    #[error("adapter already merged into the base weight")]
    AlreadyMerged,
    #[error("adapter is not merged")]
    NotMerged,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("cannot freeze {n} layers of a depth-{depth} model")]
    FreezeDepth { n: usize, depth: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Target {
    Q,
    K,
    V,
    O,
}

impl Target {
    pub fn as_str(self) -> &'static str {
        match self {
            Target::Q => "q",
            Target::K => "k",
            Target::V => "v",
            Target::O => "o",
        }
    }

    pub fn parse(s: &str) -> Result<Self, PeftError> {
        match s.to_ascii_lowercase().as_str() {
            "q" => Ok(Target::Q),
            "k" => Ok(Target::K),
            "v" => Ok(Target::V),
            "o" => Ok(Target::O),
            other => Err(PeftError::UnknownTarget(other.to_string())),
        }
    }

    pub const ALL: [Target; 4] = [Target::Q, Target::K, Target::V, Target::O];
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraConfig {
    pub r: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub target_projections: Vec<Target>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            r: 4,
            alpha: 16.0,
            dropout: 0.1,
            target_projections: vec![Target::Q, Target::V],
        }
    }
}

impl LoraConfig {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.r as f64
    }

    pub fn validate(&self, d: usize, k: usize) -> Result<(), PeftError> {
        if self.r == 0 || self.r > d.min(k) {
            return Err(PeftError::BadRank { r: self.r, d, k });
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(PeftError::BadDropout(self.dropout));
        }
        if self.target_projections.is_empty() {
            return Err(PeftError::UnknownTarget("<empty target list>".into()));
        }
        Ok(())
    }
}

/// One adapter pair: `A` is [r, k], `B` is [d, r], contribution
/// `(alpha/r) * B * A`.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pub a: Tensor,
    pub b: Tensor,
    pub scaling: f64,
    merged: bool,
}

impl LoraAdapter {
    pub fn new(a: Tensor, b: Tensor, scaling: f64) -> Result<Self, PeftError> {
        if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[0] != b.shape()[1] {
            return Err(PeftError::ShapeMismatch(format!(
                "A {:?} incompatible with B {:?}",
                a.shape(),
                b.shape()
            )));
        }
        Ok(Self {
            a,
            b,
            scaling,
            merged: false,
        })
    }

    /// Gaussian-std-0.02 `A`, zero `B`: contributes exactly 0 at creation.
    pub fn init(d: usize, k: usize, cfg: &LoraConfig, rng: &mut ChaCha8Rng) -> Result<Self, PeftError> {
        cfg.validate(d, k)?;
        let a = init_gaussian(rng, cfg.r, k);
        let b = Tensor::zeros(vec![d, cfg.r]);
        Self::new(a, b, cfg.scaling())
    }

    pub fn is_merged(&self) -> bool {
        self.merged
    }

    fn delta(&self) -> Matrix {
        let a = tensor_to_matrix(&self.a);
        let b = tensor_to_matrix(&self.b);
        b.dot(&a) * self.scaling
    }

    /// `h = W_0 x + (alpha/r) B (A x)`, computing `A x` first. Dropout is
    /// applied to the adapter-branch input only, and only in training mode.
    pub fn forward(
        &self,
        w0: &Tensor,
        x: &[f32],
        training: bool,
        rng: Option<&mut ChaCha8Rng>,
        dropout: f64,
    ) -> Result<Vec<f32>, PeftError> {
        let (d, k) = (w0.shape()[0], w0.shape()[1]);
        if x.len() != k || self.a.shape()[1] != k || self.b.shape()[0] != d {
            return Err(PeftError::ShapeMismatch(format!(
                "W0 {:?}, A {:?}, B {:?}, x len {}",
                w0.shape(),
                self.a.shape(),
                self.b.shape(),
                x.len()
            )));
        }
        let xv: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let mut branch_in = xv.clone();
        if training && dropout > 0.0 {
            let rng = rng.expect("training-mode dropout needs an rng");
            let keep = 1.0 - dropout;
            for v in &mut branch_in {
                if rand::Rng::gen::<f64>(rng) < keep {
                    *v /= keep;
                } else {
                    *v = 0.0;
                }
            }
        }
        // A x first: reduces the dimension to r before B expands it.
        let r = self.a.shape()[0];
        let mut ax = vec![0.0f64; r];
        for i in 0..r {
            for j in 0..k {
                ax[i] += self.a.at(&[i, j]) as f64 * branch_in[j];
            }
        }
        let mut h = vec![0.0f64; d];
        for i in 0..d {
            let mut acc = 0.0;
            for j in 0..k {
                acc += w0.at(&[i, j]) as f64 * xv[j];
            }
            let mut badj = 0.0;
            for j in 0..r {
                badj += self.b.at(&[i, j]) as f64 * ax[j];
            }
            h[i] = acc + self.scaling * badj;
        }
        Ok(h.into_iter().map(|v| v as f32).collect())
    }

    /// Folds the adapter into `w0`; forward with the merged weight matches
    /// the two-branch forward in eval mode.
    pub fn merge(&mut self, w0: &Tensor) -> Result<Tensor, PeftError> {
        if self.merged {
            return Err(PeftError::AlreadyMerged);
        }
        let merged = tensor_to_matrix(w0) + self.delta();
        self.merged = true;
        Ok(matrix_to_tensor(&merged, w0.shape()))
    }

    pub fn unmerge(&mut self, merged: &Tensor) -> Result<Tensor, PeftError> {
        if !self.merged {
            return Err(PeftError::NotMerged);
        }
        let restored = tensor_to_matrix(merged) - self.delta();
        self.merged = false;
        Ok(matrix_to_tensor(&restored, merged.shape()))
    }
}

fn init_gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    use rand_distr::{Distribution, Normal};
    let normal = Normal::new(0.0f32, 0.02).unwrap();
    let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

pub fn adapter_name(layer: usize, target: Target, which: char) -> String {
    format!("lora.{layer}.{}.{which}", target.as_str())
}

/// Fresh adapter tensors for every (layer, target) pair, named
/// `lora.<layer>.<target>.{A,B}`.
pub fn init_adapters(
    vit: &ViTConfig,
    cfg: &LoraConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ParameterSet, PeftError> {
    let d = vit.embed_dim;
    cfg.validate(d, d)?;
    let mut out = ParameterSet::new();
    for layer in 0..vit.depth {
        for &target in &cfg.target_projections {
            out.insert(adapter_name(layer, target, 'A'), init_gaussian(rng, cfg.r, d));
            out.insert(adapter_name(layer, target, 'B'), Tensor::zeros(vec![d, cfg.r]));
        }
    }
    Ok(out)
}

/// A backbone with injected adapters: base weights frozen, adapters (and,
/// at the training level, heads) trainable.
#[derive(Debug, Clone)]
pub struct AdaptedVit {
    pub base: ParameterSet,
    pub adapters: ParameterSet,
    pub config: LoraConfig,
    merged: bool,
}

pub fn inject_lora(
    base: ParameterSet,
    vit: &ViTConfig,
    cfg: &LoraConfig,
    rng: &mut ChaCha8Rng,
) -> Result<AdaptedVit, PeftError> {
    let adapters = init_adapters(vit, cfg, rng)?;
    Ok(AdaptedVit {
        base,
        adapters,
        config: cfg.clone(),
        merged: false,
    })
}

impl AdaptedVit {
    pub fn trainable_adapter_names(&self) -> BTreeSet<String> {
        self.adapters.keys().cloned().collect()
    }

    pub fn adapter_param_count(&self) -> usize {
        self.adapters.values().map(Tensor::numel).sum()
    }

    fn target_weight_name(layer: usize, target: Target) -> String {
        format!("blocks.{layer}.attn.{}.weight", target.as_str())
    }

    /// Folds every adapter into its base projection. Merged and unmerged
    /// forwards agree in eval mode.
    pub fn merge_all(&mut self, depth: usize) -> Result<(), PeftError> {
        if self.merged {
            return Err(PeftError::AlreadyMerged);
        }
        for layer in 0..depth {
            for &t in &self.config.target_projections {
                let wname = Self::target_weight_name(layer, t);
                let w0 = self.base.get(&wname).cloned().expect("target weight exists");
                let mut ad = LoraAdapter::new(
                    self.adapters[&adapter_name(layer, t, 'A')].clone(),
                    self.adapters[&adapter_name(layer, t, 'B')].clone(),
                    self.config.scaling(),
                )?;
                self.base.insert(wname, ad.merge(&w0)?);
            }
        }
        self.merged = true;
        Ok(())
    }

    pub fn unmerge_all(&mut self, depth: usize) -> Result<(), PeftError> {
        if !self.merged {
            return Err(PeftError::NotMerged);
        }
        for layer in 0..depth {
            for &t in &self.config.target_projections {
                let wname = Self::target_weight_name(layer, t);
                let merged = self.base.get(&wname).cloned().expect("target weight exists");
                let mut ad = LoraAdapter::new(
                    self.adapters[&adapter_name(layer, t, 'A')].clone(),
                    self.adapters[&adapter_name(layer, t, 'B')].clone(),
                    self.config.scaling(),
                )?;
                ad.merged = true;
                self.base.insert(wname, ad.unmerge(&merged)?);
            }
        }
        self.merged = false;
        Ok(())
    }
}

/// Trainable backbone tensor names after freezing the first `n` blocks.
/// `n = 0` leaves everything trainable; any `n >= 1` also freezes the stem
/// (patch embedding, positional table, CLS/mask tokens) and the final norm,
/// so `n = depth` leaves only the heads trainable.
pub fn freeze_backbone_layers(
    params: &ParameterSet,
    depth: usize,
    n: usize,
) -> Result<BTreeSet<String>, PeftError> {
    if n > depth {
        return Err(PeftError::FreezeDepth { n, depth });
    }
    if n == 0 {
        return Ok(params.keys().cloned().collect());
    }
    let mut trainable = BTreeSet::new();
    for name in params.keys() {
        if let Some(rest) = name.strip_prefix("blocks.") {
            let layer: usize = rest.split('.').next().unwrap().parse().unwrap_or(usize::MAX);
            if layer >= n && layer < depth {
                trainable.insert(name.clone());
            }
        }
    }
    Ok(trainable)
}

/// Composes layer freezing with LoRA. With adapters present the base is
/// fully frozen and the trainable set is the adapters of unfrozen layers;
/// freezing wins on conflict.
pub fn trainable_backbone_set(
    params: &ParameterSet,
    depth: usize,
    freeze_n: usize,
    lora: Option<&AdaptedVit>,
) -> Result<BTreeSet<String>, PeftError> {
    match lora {
        None => freeze_backbone_layers(params, depth, freeze_n),
        Some(adapted) => {
            if freeze_n > depth {
                return Err(PeftError::FreezeDepth { n: freeze_n, depth });
            }
            let mut out = BTreeSet::new();
            for name in adapted.adapters.keys() {
                let layer: usize = name
                    .strip_prefix("lora.")
                    .and_then(|r| r.split('.').next())
                    .and_then(|s| s.parse().ok())
                    .expect("adapter names are lora.<layer>.<target>.{A,B}");
                if layer >= freeze_n {
                    out.insert(name.clone());
                }
            }
            Ok(out)
        }
    }
}
