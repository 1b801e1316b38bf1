//! DINO cross-entropy self-distillation loss with centering and temperature
//! sharpening, plus the iBOT masked-patch loss.
//!
//! Teacher logits are centered by a running mean and sharpened by a low,
//! scheduled temperature; student logits use a fixed temperature. The
//! cross-entropy pairs every teacher global view with every student view of
//! a different crop; global-view pairs and local-view pairs are averaged
//! separately.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("temperatures must be positive")]
    BadTemperature,
    #[error("center momentum must lie in [0, 1)")]
    BadMomentum,
    #[error("logit length {actual} does not match K = {expected}")]
    DimMismatch { actual: usize, expected: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("mask index {index} out of range for {num_patches} patches")]
    MaskIndexOutOfRange { index: usize, num_patches: usize },
    #[error("iBOT config invalid: {0}")]
    BadIbotConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TeacherTempSchedule {
    pub warmup_start: f64,
    pub final_temp: f64,
    pub warmup_iterations: usize,
}

impl TeacherTempSchedule {
    pub fn constant(temp: f64) -> Self {
        Self {
            warmup_start: temp,
            final_temp: temp,
            warmup_iterations: 0,
        }
    }
}

/// Center vector plus the temperature state of the DINO loss.
#[derive(Debug, Clone)]
pub struct DinoLossState {
    pub center: Tensor,
    pub center_momentum: f64,
    pub student_temp: f64,
    pub teacher_temp: TeacherTempSchedule,
}

impl DinoLossState {
    pub fn new(
        out_dim: usize,
        center_momentum: f64,
        student_temp: f64,
        teacher_temp: TeacherTempSchedule,
    ) -> Result<Self, LossError> {
        if student_temp <= 0.0
            || teacher_temp.warmup_start <= 0.0
            || teacher_temp.final_temp <= 0.0
        {
            return Err(LossError::BadTemperature);
        }
        if !(0.0..1.0).contains(&center_momentum) {
            return Err(LossError::BadMomentum);
        }
        Ok(Self {
            center: Tensor::zeros(vec![out_dim]),
            center_momentum,
            student_temp,
            teacher_temp,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.center.numel()
    }

    pub fn center_f64(&self) -> Vec<f64> {
        self.center.data().iter().map(|&v| v as f64).collect()
    }
}

/// Linear ramp from `warmup_start` to the final temperature over the warmup
/// iterations, then constant.
pub fn teacher_temp_at(iter: usize, state: &DinoLossState) -> f64 {
    let s = &state.teacher_temp;
    if s.warmup_iterations == 0 || iter >= s.warmup_iterations {
        return s.final_temp;
    }
    let frac = iter as f64 / s.warmup_iterations as f64;
    s.warmup_start + (s.final_temp - s.warmup_start) * frac
}

/// softmax((logits - center) / temp); numerically stable, sums to 1.
pub fn softmax_centered(logits: &[f64], center: &[f64], temp: f64) -> Vec<f64> {
    debug_assert_eq!(logits.len(), center.len());
    let scaled: Vec<f64> = logits
        .iter()
        .zip(center)
        .map(|(l, c)| (l - c) / temp)
        .collect();
    let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scaled.iter().map(|v| (v - m).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// log softmax(logits / temp)
pub fn log_softmax_scaled(logits: &[f64], temp: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|v| v / temp).collect();
    let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = scaled.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
    scaled.iter().map(|v| v - lse).collect()
}

/// Sharpened, centered teacher distribution for one logit vector.
pub fn teacher_probs(logits: &Tensor, state: &DinoLossState, iter: usize) -> Result<Tensor, LossError> {
    if logits.numel() != state.out_dim() {
        return Err(LossError::DimMismatch {
            actual: logits.numel(),
            expected: state.out_dim(),
        });
    }
    let l: Vec<f64> = logits.data().iter().map(|&v| v as f64).collect();
    let probs = softmax_centered(&l, &state.center_f64(), teacher_temp_at(iter, state));
    Ok(Tensor::new(
        vec![probs.len()],
        probs.iter().map(|&v| v as f32).collect(),
    )
    .expect("probabilities are finite"))
}

/// Entropy in nats of a probability vector.
pub fn entropy(probs: &[f64]) -> f64 {
    probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum()
}

/// `c <- m_c * c + (1 - m_c) * mean(batch logits)`, the mean running over
/// every provided teacher logit vector (batch x global views).
pub fn update_center(state: &mut DinoLossState, batch_teacher_logits: &[Vec<f64>]) -> Result<(), LossError> {
    if batch_teacher_logits.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let k = state.out_dim();
    for row in batch_teacher_logits {
        if row.len() != k {
            return Err(LossError::DimMismatch {
                actual: row.len(),
                expected: k,
            });
        }
    }
    let n = batch_teacher_logits.len() as f64;
    let m = state.center_momentum;
    let data = state.center.data_mut();
    for j in 0..k {
        let mean: f64 = batch_teacher_logits.iter().map(|r| r[j]).sum::<f64>() / n;
        data[j] = (m * data[j] as f64 + (1.0 - m) * mean) as f32;
    }
    Ok(())
}

/// CLS-level DINO loss over one sample's views, with gradients w.r.t. the
/// student logits. `teacher_probs_globals[i]` pairs with every student view
/// `j != i` among globals and with every local view.
#[derive(Debug, Clone)]
pub struct DinoPairLoss {
    pub global: f64,
    pub local: f64,
    /// d(global_dino)/d(student_global_logits[j]); same shape as the input.
    pub d_student_globals: Vec<Vec<f64>>,
    /// d(local_dino)/d(student_local_logits[l])
    pub d_student_locals: Vec<Vec<f64>>,
}

pub fn dino_loss_and_grads(
    teacher_probs_globals: &[Vec<f64>],
    student_global_logits: &[Vec<f64>],
    student_local_logits: &[Vec<f64>],
    student_temp: f64,
) -> Result<DinoPairLoss, LossError> {
    let g = teacher_probs_globals.len();
    if student_global_logits.len() != g {
        return Err(LossError::EmptyBatch);
    }
    let k = teacher_probs_globals.first().map_or(0, Vec::len);
    for v in teacher_probs_globals
        .iter()
        .chain(student_global_logits)
        .chain(student_local_logits)
    {
        if v.len() != k {
            return Err(LossError::DimMismatch {
                actual: v.len(),
                expected: k,
            });
        }
    }

    let student_g_logp: Vec<Vec<f64>> = student_global_logits
        .iter()
        .map(|l| log_softmax_scaled(l, student_temp))
        .collect();
    let student_l_logp: Vec<Vec<f64>> = student_local_logits
        .iter()
        .map(|l| log_softmax_scaled(l, student_temp))
        .collect();

    let global_pairs = g.saturating_mul(g.saturating_sub(1));
    let local_pairs = g * student_local_logits.len();

    let mut global_sum = 0.0;
    let mut local_sum = 0.0;
    let mut d_globals = vec![vec![0.0; k]; student_global_logits.len()];
    let mut d_locals = vec![vec![0.0; k]; student_local_logits.len()];

    for (i, t) in teacher_probs_globals.iter().enumerate() {
        for (j, logp) in student_g_logp.iter().enumerate() {
            if i == j {
                continue;
            }
            global_sum += cross_entropy(t, logp);
            // dCE/dlogits = (softmax(logits/tau) - t) / tau, weighted 1/pairs
            let w = 1.0 / (global_pairs as f64 * student_temp);
            for x in 0..k {
                d_globals[j][x] += (logp[x].exp() - t[x]) * w;
            }
        }
        for (l, logp) in student_l_logp.iter().enumerate() {
            local_sum += cross_entropy(t, logp);
            let w = 1.0 / (local_pairs as f64 * student_temp);
            for x in 0..k {
                d_locals[l][x] += (logp[x].exp() - t[x]) * w;
            }
        }
    }

    Ok(DinoPairLoss {
        global: if global_pairs > 0 { global_sum / global_pairs as f64 } else { 0.0 },
        local: if local_pairs > 0 { local_sum / local_pairs as f64 } else { 0.0 },
        d_student_globals: d_globals,
        d_student_locals: d_locals,
    })
}

fn cross_entropy(t: &[f64], student_logp: &[f64]) -> f64 {
    -t.iter().zip(student_logp).map(|(a, b)| a * b).sum::<f64>()
}

/// Loss-only wrapper over [`dino_loss_and_grads`]: teacher logits in,
/// breakdown out, teacher distributions computed with the given state.
pub fn dino_loss(
    teacher_global_logits: &[Vec<f64>],
    student_global_logits: &[Vec<f64>],
    student_local_logits: &[Vec<f64>],
    state: &DinoLossState,
    iter: usize,
) -> Result<LossBreakdown, LossError> {
    let temp = teacher_temp_at(iter, state);
    let center = state.center_f64();
    let probs: Vec<Vec<f64>> = teacher_global_logits
        .iter()
        .map(|l| softmax_centered(l, &center, temp))
        .collect();
    let pair = dino_loss_and_grads(
        &probs,
        student_global_logits,
        student_local_logits,
        state.student_temp,
    )?;
    Ok(LossBreakdown::compose(1.0, pair.local, pair.global, 1.0, 0.0))
}

/// Component-wise loss record. `total` always recomputes from the parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub local_dino: f64,
    pub global_dino: f64,
    pub ibot: f64,
}

impl LossBreakdown {
    pub fn compose(dino_weight: f64, local: f64, global: f64, ibot_weight: f64, ibot: f64) -> Self {
        Self {
            total: dino_weight * (local + global) + ibot_weight * ibot,
            local_dino: local,
            global_dino: global,
            ibot,
        }
    }
}

/// iBOT masking configuration (per-view sampling of masked patch sets).
#[derive(Debug, Clone, PartialEq)]
pub struct IbotConfig {
    pub loss_weight: f64,
    pub mask_sample_probability: f64,
    pub mask_ratio_min: f64,
    pub mask_ratio_max: f64,
    pub separate_head: bool,
    pub out_dim: usize,
}

impl IbotConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(0.0..=1.0).contains(&self.mask_sample_probability) {
            return Err(LossError::BadIbotConfig(
                "mask_sample_probability must lie in [0, 1]".into(),
            ));
        }
        if !(0.0 <= self.mask_ratio_min
            && self.mask_ratio_min <= self.mask_ratio_max
            && self.mask_ratio_max <= 1.0)
        {
            return Err(LossError::BadIbotConfig(
                "mask ratios must satisfy 0 <= min <= max <= 1".into(),
            ));
        }
        Ok(())
    }
}

/// With probability `1 - p` returns the empty mask; otherwise masks
/// `ceil(ratio * num_patches)` distinct patches with the ratio drawn
/// uniformly from the configured range.
pub fn sample_ibot_mask(rng: &mut ChaCha8Rng, num_patches: usize, cfg: &IbotConfig) -> Vec<usize> {
    debug_assert!(num_patches >= 1);
    if rng.gen::<f64>() >= cfg.mask_sample_probability {
        return Vec::new();
    }
    let ratio = if cfg.mask_ratio_max > cfg.mask_ratio_min {
        rng.gen_range(cfg.mask_ratio_min..cfg.mask_ratio_max)
    } else {
        cfg.mask_ratio_min
    };
    let count = ((ratio * num_patches as f64).ceil() as usize).min(num_patches);
    if count == 0 {
        return Vec::new();
    }
    let mut picked = rand::seq::index::sample(rng, num_patches, count).into_vec();
    picked.sort_unstable();
    picked
}

/// Mean over masked positions of CE(teacher distribution, student log-probs);
/// zero when the mask is empty. Also returns gradients w.r.t. the student
/// patch logits at masked positions.
pub struct IbotLoss {
    pub value: f64,
    /// One gradient row per masked position, aligned with `mask`.
    pub d_student_at_mask: Vec<Vec<f64>>,
}

pub fn ibot_loss_and_grads(
    teacher_patch_logits: &[Vec<f64>],
    student_patch_logits: &[Vec<f64>],
    mask: &[usize],
    state: &DinoLossState,
    iter: usize,
) -> Result<IbotLoss, LossError> {
    let n = teacher_patch_logits.len();
    if student_patch_logits.len() != n {
        return Err(LossError::DimMismatch {
            actual: student_patch_logits.len(),
            expected: n,
        });
    }
    if mask.is_empty() {
        return Ok(IbotLoss {
            value: 0.0,
            d_student_at_mask: Vec::new(),
        });
    }
    if let Some(&bad) = mask.iter().find(|&&i| i >= n) {
        return Err(LossError::MaskIndexOutOfRange {
            index: bad,
            num_patches: n,
        });
    }
    let temp = teacher_temp_at(iter, state);
    let center = state.center_f64();
    let k = state.out_dim();
    let mut sum = 0.0;
    let mut grads = Vec::with_capacity(mask.len());
    let w = 1.0 / (mask.len() as f64 * state.student_temp);
    for &i in mask {
        if teacher_patch_logits[i].len() != k || student_patch_logits[i].len() != k {
            return Err(LossError::DimMismatch {
                actual: teacher_patch_logits[i].len(),
                expected: k,
            });
        }
        let t = softmax_centered(&teacher_patch_logits[i], &center, temp);
        let logp = log_softmax_scaled(&student_patch_logits[i], state.student_temp);
        sum += cross_entropy(&t, &logp);
        grads.push((0..k).map(|x| (logp[x].exp() - t[x]) * w).collect());
    }
    Ok(IbotLoss {
        value: sum / mask.len() as f64,
        d_student_at_mask: grads,
    })
}

pub fn ibot_loss(
    teacher_patch_logits: &[Vec<f64>],
    student_patch_logits: &[Vec<f64>],
    mask: &[usize],
    state: &DinoLossState,
    iter: usize,
) -> Result<f64, LossError> {
    Ok(ibot_loss_and_grads(teacher_patch_logits, student_patch_logits, mask, state, iter)?.value)
}
