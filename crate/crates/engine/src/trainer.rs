//! The self-distillation training loop: multi-crop views, EMA teacher,
//! DINO + iBOT losses, data-parallel execution over worker threads, and
//! checkpointing.
//!
//! Model tensors live in one flat map per side with namespaces: backbone
//! names are plain, adapters are `lora.*`, heads are `head.*` /
//! `ibot_head.*`. Every worker owns a full replica; replicas stay
//! bit-identical because they apply the same reduced gradients with the
//! same f64 arithmetic.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use dinomx_core::augment::{make_views, AugmentationPolicy, PolicyDomain};
use dinomx_core::graph::{GradMap, Graph, Matrix};
use dinomx_core::head::{build_head, DinoHead, DinoHeadConfig};
use dinomx_core::loss::{
    dino_loss_and_grads, entropy, ibot_loss_and_grads, sample_ibot_mask, softmax_centered,
    teacher_temp_at, update_center, DinoLossState, IbotConfig, LossBreakdown, TeacherTempSchedule,
};
use dinomx_core::peft::{init_adapters, trainable_backbone_set, LoraConfig};
use dinomx_core::rng::{derive_key, stream_rng, Stream};
use dinomx_core::vit::{
    build_forward, init_params, matrix_to_tensor, widen_params, DenseParams, ForwardCtx,
    ForwardOptions, LoraCtx, ParameterSet, ViTConfig,
};
use rayon::prelude::*;

use crate::checkpoint;
use crate::config::{AccelConfig, DistMode, TrainConfig, Variant};
use crate::data::{batch_indices, Dataset};
use crate::ema::ema_update;
use crate::logging::{format_log_line, system_memory_total_gb, LogSink, TrainRecord};
use crate::optim::{clip_global_norm, AdamW};
use crate::reduce::{shard_plan, ReducedStep, Reducer, StepPayload};
use crate::schedule::Schedules;
use crate::EngineError;

/// Architecture of one model side.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub vit: ViTConfig,
    pub head: DinoHeadConfig,
    pub ibot_head: Option<DinoHeadConfig>,
    pub lora: Option<LoraConfig>,
}

impl ModelSpec {
    pub fn from_config(cfg: &TrainConfig) -> Result<Self, EngineError> {
        let vit = cfg.vit_config()?;
        let head = DinoHeadConfig {
            in_dim: vit.embed_dim,
            hidden_dim: cfg.dino_head.hidden_dim,
            bottleneck_dim: cfg.dino_head.bottleneck_dim,
            out_dim: cfg.dino_head.out_dim,
            norm_last_layer: cfg.dino_head.norm_last_layer,
        };
        let ibot_head = if cfg.variant() == Variant::DinoV2Style && cfg.train.ibot_separate_head {
            Some(DinoHeadConfig {
                in_dim: vit.embed_dim,
                hidden_dim: cfg.dino_head.hidden_dim,
                bottleneck_dim: cfg.dino_head.bottleneck_dim,
                out_dim: cfg.ibot.out_dim,
                norm_last_layer: cfg.ibot.norm_last_layer,
            })
        } else {
            if cfg.variant() == Variant::DinoV2Style && cfg.ibot.out_dim != cfg.dino_head.out_dim {
                return Err(EngineError::Config(crate::config::ConfigError::Invalid(
                    format!(
                        "shared-head iBOT requires ibot.out_dim == dino_head.out_dim ({} != {})",
                        cfg.ibot.out_dim, cfg.dino_head.out_dim
                    ),
                )));
            }
            None
        };
        let lora = if cfg.train.use_lora {
            Some(LoraConfig {
                r: cfg.lora.lora_r,
                alpha: cfg.lora.lora_alpha,
                dropout: cfg.lora.lora_dropout,
                target_projections: cfg.lora.target_projections.clone(),
            })
        } else {
            None
        };
        Ok(Self {
            vit,
            head,
            ibot_head,
            lora,
        })
    }

    /// Fresh flat tensor map: backbone, optional adapters, heads.
    pub fn init_tensors(&self, seed: u64) -> Result<ParameterSet, EngineError> {
        let mut flat = init_params(&self.vit, &mut stream_rng(seed, Stream::Init, &[0]));
        if let Some(lora) = &self.lora {
            let adapters = init_adapters(&self.vit, lora, &mut stream_rng(seed, Stream::Init, &[3]))?;
            flat.extend(adapters);
        }
        let head = DinoHead::init(self.head.clone(), &mut stream_rng(seed, Stream::Init, &[1]));
        for (k, v) in head.params {
            flat.insert(format!("head.{k}"), v);
        }
        if let Some(icfg) = &self.ibot_head {
            let ih = DinoHead::init(icfg.clone(), &mut stream_rng(seed, Stream::Init, &[2]));
            for (k, v) in ih.params {
                flat.insert(format!("ibot_head.{k}"), v);
            }
        }
        Ok(flat)
    }

    /// Qualified trainable names: PEFT-composed backbone set plus the heads
    /// (heads are always trainable). With LoRA the base weights are frozen
    /// and only adapters of unfrozen layers train; freezing wins on conflict.
    pub fn trainable_names(
        &self,
        flat: &ParameterSet,
        freeze_backbone_layers: usize,
    ) -> Result<BTreeSet<String>, EngineError> {
        let mut set = match &self.lora {
            None => {
                let backbone: ParameterSet = flat
                    .iter()
                    .filter(|(k, _)| {
                        !k.starts_with("head.")
                            && !k.starts_with("ibot_head.")
                            && !k.starts_with("lora.")
                    })
                    .map(|(k, v)| (k.clone(), v.clone()))
                    .collect();
                trainable_backbone_set(&backbone, self.vit.depth, freeze_backbone_layers, None)?
            }
            Some(_) => {
                let mut adapters = BTreeSet::new();
                for name in flat.keys() {
                    if let Some(rest) = name.strip_prefix("lora.") {
                        let layer: usize = rest
                            .split('.')
                            .next()
                            .and_then(|s| s.parse().ok())
                            .expect("adapter names are lora.<layer>.<target>.{A,B}");
                        if layer >= freeze_backbone_layers {
                            adapters.insert(name.clone());
                        }
                    }
                }
                adapters
            }
        };
        for name in flat.keys() {
            if let Some(rest) = name.strip_prefix("head.") {
                if rest != "last.g" || !self.head.norm_last_layer {
                    set.insert(name.clone());
                }
            }
            if let Some(rest) = name.strip_prefix("ibot_head.") {
                let norm_last = self.ibot_head.as_ref().map(|c| c.norm_last_layer).unwrap_or(true);
                if rest != "last.g" || !norm_last {
                    set.insert(name.clone());
                }
            }
        }
        Ok(set)
    }
}

pub struct TrainState {
    pub spec: ModelSpec,
    pub student: ParameterSet,
    pub teacher: ParameterSet,
    pub cls_state: DinoLossState,
    pub patch_state: Option<DinoLossState>,
    pub optimizer: AdamW,
    pub trainable: BTreeSet<String>,
    pub iteration: usize,
}

pub struct IterationStats {
    pub iteration: usize,
    pub loss: LossBreakdown,
    pub teacher_entropy: f64,
    pub log_line: String,
}

pub struct RunOutput {
    pub records: Vec<IterationStats>,
    pub state: TrainState,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub run_dir: Option<PathBuf>,
    pub echo_logs: bool,
    pub resume_from: Option<PathBuf>,
}

fn temp_schedule(cfg: &TrainConfig) -> TeacherTempSchedule {
    TeacherTempSchedule {
        warmup_start: cfg.train.warmup_teacher_temp,
        final_temp: cfg.train.teacher_temp,
        warmup_iterations: cfg.train.warmup_teacher_temp_iterations,
    }
}

pub fn schedules(cfg: &TrainConfig) -> Schedules {
    Schedules {
        lr: cfg.train.lr,
        min_lr: cfg.train.min_lr,
        warmup_iterations: cfg.train.warmup_iterations,
        total_iterations: cfg.train.max_iterations,
        weight_decay_start: cfg.train.weight_decay,
        weight_decay_end: cfg.train.weight_decay_end,
        momentum_teacher: cfg.train.momentum_teacher,
    }
}

pub fn init_state(cfg: &TrainConfig) -> Result<TrainState, EngineError> {
    cfg.validate()?;
    let spec = ModelSpec::from_config(cfg)?;
    let student = spec.init_tensors(cfg.train.seed)?;
    let teacher = student.clone();
    let trainable = spec.trainable_names(&student, cfg.train.freeze_backbone_layers)?;
    let cls_state = DinoLossState::new(
        cfg.dino_head.out_dim,
        cfg.train.center_momentum,
        cfg.train.student_temp,
        temp_schedule(cfg),
    )?;
    let patch_state = if cfg.variant() == Variant::DinoV2Style {
        Some(DinoLossState::new(
            cfg.ibot.out_dim,
            cfg.train.center_momentum,
            cfg.train.student_temp,
            temp_schedule(cfg),
        )?)
    } else {
        None
    };
    Ok(TrainState {
        spec,
        student,
        teacher,
        cls_state,
        patch_state,
        optimizer: AdamW::new(),
        trainable,
        iteration: 0,
    })
}

/// Per-sample forward/backward outcome.
struct SampleOut {
    grads: GradMap,
    local: f64,
    global: f64,
    ibot: f64,
    cls_logit_sum: Vec<f64>,
    cls_count: usize,
    patch_logit_sum: Vec<f64>,
    patch_count: usize,
    prob_sum: Vec<f64>,
    prob_count: usize,
}

struct SampleCtx<'a> {
    cfg: &'a TrainConfig,
    spec: &'a ModelSpec,
    student_dense: &'a DenseParams,
    teacher_dense: &'a DenseParams,
    trainable: &'a BTreeSet<String>,
    cls_state: &'a DinoLossState,
    patch_state: Option<&'a DinoLossState>,
    policy: &'a AugmentationPolicy,
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.outer_iter().map(|r| r.to_vec()).collect()
}

/// Views, teacher targets, student losses, and the reverse sweep for one
/// sample of the batch.
fn sample_forward(
    ctx: &SampleCtx,
    t: usize,
    slot: usize,
    image: &dinomx_core::image::ImageSample,
    roi: Option<&dinomx_core::image::RoiMask>,
) -> Result<SampleOut, EngineError> {
    let cfg = ctx.cfg;
    let seed = cfg.train.seed;
    let view_seed = derive_key(seed, Stream::Augment, &[t as u64, slot as u64]);
    let views = make_views(image, &cfg.crops, ctx.policy, roi, view_seed)?;

    let ibot_on = cfg.variant() == Variant::DinoV2Style;
    let ibot_cfg = IbotConfig {
        loss_weight: cfg.ibot.loss_weight,
        mask_sample_probability: cfg.ibot.mask_sample_probability,
        mask_ratio_min: cfg.ibot.mask_ratio_min,
        mask_ratio_max: cfg.ibot.mask_ratio_max,
        separate_head: cfg.train.ibot_separate_head,
        out_dim: cfg.ibot.out_dim,
    };
    let patches_per_global = {
        let g = cfg.crops.global_crops_size / ctx.spec.vit.patch_size;
        g * g
    };
    let masks: Vec<Vec<usize>> = (0..views.global_views.len())
        .map(|g| {
            if ibot_on {
                let mut rng = stream_rng(seed, Stream::IbotMask, &[t as u64, slot as u64, g as u64]);
                sample_ibot_mask(&mut rng, patches_per_global, &ibot_cfg)
            } else {
                Vec::new()
            }
        })
        .collect();

    let mut graph = Graph::new();
    let empty = BTreeSet::new();

    // teacher: global views, unmasked, frozen
    let mut teacher_ctx = ForwardCtx {
        params: ctx.teacher_dense,
        trainable: &empty,
        lora: ctx.spec.lora.as_ref().map(|l| LoraCtx {
            adapters: ctx.teacher_dense,
            config: l,
        }),
        training: false,
        dropout_rng: None,
    };
    let mut teacher_cls_nodes = Vec::new();
    let mut teacher_patch_nodes = Vec::new();
    for view in &views.global_views {
        let nodes = build_forward(
            &mut graph,
            &mut teacher_ctx,
            &ctx.spec.vit,
            view,
            &ForwardOptions::default(),
        )?;
        teacher_cls_nodes.push(nodes.cls);
        teacher_patch_nodes.push(nodes.patch_tokens);
    }
    let teacher_cls_stack = graph.concat_rows(&teacher_cls_nodes);
    let teacher_logits_node = build_head(
        &mut graph,
        &ctx.spec.head,
        ctx.teacher_dense,
        "head.",
        teacher_cls_stack,
        &empty,
    )?;
    let teacher_logits = rows(graph.value(teacher_logits_node));

    // teacher targets: centered + sharpened
    let temp = teacher_temp_at(t, ctx.cls_state);
    let center = ctx.cls_state.center_f64();
    let teacher_probs: Vec<Vec<f64>> = teacher_logits
        .iter()
        .map(|l| softmax_centered(l, &center, temp))
        .collect();

    // student: globals carry the iBOT masks; locals and guided views follow
    let mut dropout_rng = stream_rng(seed, Stream::Dropout, &[t as u64, slot as u64]);
    let needs_dropout = ctx
        .spec
        .lora
        .as_ref()
        .map(|l| l.dropout > 0.0)
        .unwrap_or(false);
    let mut student_ctx = ForwardCtx {
        params: ctx.student_dense,
        trainable: ctx.trainable,
        lora: ctx.spec.lora.as_ref().map(|l| LoraCtx {
            adapters: ctx.student_dense,
            config: l,
        }),
        training: true,
        dropout_rng: if needs_dropout { Some(&mut dropout_rng) } else { None },
    };
    let mut student_cls_nodes = Vec::new();
    let mut student_patch_nodes = Vec::new();
    for (g, view) in views.global_views.iter().enumerate() {
        let nodes = build_forward(
            &mut graph,
            &mut student_ctx,
            &ctx.spec.vit,
            view,
            &ForwardOptions {
                capture_attention: false,
                mask: if masks[g].is_empty() { None } else { Some(masks[g].clone()) },
            },
        )?;
        student_cls_nodes.push(nodes.cls);
        student_patch_nodes.push(nodes.patch_tokens);
    }
    let n_locals = views.local_views.len() + views.guided_views.len();
    for view in views.local_views.iter().chain(&views.guided_views) {
        let nodes = build_forward(
            &mut graph,
            &mut student_ctx,
            &ctx.spec.vit,
            view,
            &ForwardOptions::default(),
        )?;
        student_cls_nodes.push(nodes.cls);
    }
    let student_cls_stack = graph.concat_rows(&student_cls_nodes);
    let student_logits_node = build_head(
        &mut graph,
        &ctx.spec.head,
        ctx.student_dense,
        "head.",
        student_cls_stack,
        ctx.trainable,
    )?;
    let student_logits = rows(graph.value(student_logits_node));
    let n_globals = views.global_views.len();
    let (student_globals, student_locals) = student_logits.split_at(n_globals);

    let pair = dino_loss_and_grads(
        &teacher_probs,
        &student_globals.to_vec(),
        &student_locals.to_vec(),
        cfg.train.student_temp,
    )?;

    // iBOT: per masked global view, teacher vs student patch logits
    let mut ibot_value = 0.0;
    let mut patch_logit_sum = Vec::new();
    let mut patch_count = 0usize;
    let sample_masked_total: usize = masks.iter().map(Vec::len).sum();
    let mut patch_seeds: Vec<(dinomx_core::graph::NodeId, Matrix)> = Vec::new();
    if ibot_on && sample_masked_total > 0 {
        let (head_cfg, prefix) = match &ctx.spec.ibot_head {
            Some(c) => (c, "ibot_head."),
            None => (&ctx.spec.head, "head."),
        };
        let patch_state = ctx.patch_state.expect("iBOT runs carry a patch-center state");
        for (g, mask) in masks.iter().enumerate() {
            if mask.is_empty() {
                continue;
            }
            let t_logits_node = build_head(
                &mut graph,
                head_cfg,
                ctx.teacher_dense,
                prefix,
                teacher_patch_nodes[g],
                &empty,
            )?;
            let s_logits_node = build_head(
                &mut graph,
                head_cfg,
                ctx.student_dense,
                prefix,
                student_patch_nodes[g],
                ctx.trainable,
            )?;
            let t_rows = rows(graph.value(t_logits_node));
            let s_rows = rows(graph.value(s_logits_node));
            let view_loss = ibot_loss_and_grads(&t_rows, &s_rows, mask, patch_state, t)?;
            let weight = mask.len() as f64 / sample_masked_total as f64;
            ibot_value += view_loss.value * weight;
            // seed gradient rows at masked positions, scaled to the
            // sample-level mean and the configured loss weight
            let k = head_cfg.out_dim;
            let mut seed_m = Matrix::zeros((t_rows.len(), k));
            for (mi, &pos) in mask.iter().enumerate() {
                for x in 0..k {
                    seed_m[[pos, x]] =
                        view_loss.d_student_at_mask[mi][x] * weight * cfg.ibot.loss_weight;
                }
                patch_count += 1;
                if patch_logit_sum.is_empty() {
                    patch_logit_sum = vec![0.0; k];
                }
                for x in 0..k {
                    patch_logit_sum[x] += t_rows[pos][x];
                }
            }
            patch_seeds.push((s_logits_node, seed_m));
        }
    }

    // backward: CLS seeds weighted by the DINO loss weight
    let k = ctx.spec.head.out_dim;
    let dino_w = cfg.dino_head.loss_weight;
    let mut cls_seed = Matrix::zeros((student_logits.len(), k));
    for (j, row) in pair.d_student_globals.iter().enumerate() {
        for x in 0..k {
            cls_seed[[j, x]] = row[x] * dino_w;
        }
    }
    for (l, row) in pair.d_student_locals.iter().enumerate() {
        for x in 0..k {
            cls_seed[[n_globals + l, x]] = row[x] * dino_w;
        }
    }
    let mut seeds = vec![(student_logits_node, cls_seed)];
    seeds.extend(patch_seeds);
    let grads = graph.backward(&seeds);

    // teacher statistics for the center updates and the collapse monitor
    let mut cls_logit_sum = vec![0.0; k];
    let mut prob_sum = vec![0.0; k];
    for (l, p) in teacher_logits.iter().zip(&teacher_probs) {
        for x in 0..k {
            cls_logit_sum[x] += l[x];
            prob_sum[x] += p[x];
        }
    }
    let _ = n_locals;
    Ok(SampleOut {
        grads,
        local: pair.local,
        global: pair.global,
        ibot: ibot_value,
        cls_logit_sum,
        cls_count: teacher_logits.len(),
        patch_logit_sum,
        patch_count,
        prob_sum,
        prob_count: teacher_probs.len(),
    })
}

/// Accumulates per-sample f64 gradients into a mean f32 tensor map.
fn mean_grads(samples: &[SampleOut], reference: &ParameterSet) -> ParameterSet {
    let count = samples.len().max(1) as f64;
    let mut acc: std::collections::BTreeMap<String, Matrix> = std::collections::BTreeMap::new();
    for s in samples {
        for (name, g) in &s.grads {
            match acc.get_mut(name) {
                Some(a) => *a += g,
                None => {
                    acc.insert(name.clone(), g.clone());
                }
            }
        }
    }
    acc.iter()
        .map(|(name, g)| {
            let shape = reference[name].shape().to_vec();
            let scaled = g / count;
            (name.clone(), matrix_to_tensor(&scaled, &shape))
        })
        .collect()
}

/// Everything shared by the worker threads of one run.
struct SharedRun<'a> {
    cfg: &'a TrainConfig,
    accel: &'a AccelConfig,
    dataset: &'a Dataset,
    reducer: Reducer,
    /// FSDP parameter broadcast and checkpoint-time moment gathering.
    exchange: Mutex<ParameterSet>,
    sink: Option<LogSink>,
    run_dir: Option<&'a Path>,
    shard: std::collections::BTreeMap<String, usize>,
    memory_total_gb: f64,
}

fn loss_weights(cfg: &TrainConfig) -> (f64, f64) {
    (cfg.dino_head.loss_weight, cfg.ibot.loss_weight)
}

/// One synchronized iteration on one worker. Returns the leader's stats.
#[allow(clippy::too_many_arguments)]
fn train_step(
    shared: &SharedRun,
    state: &mut TrainState,
    worker: usize,
    t: usize,
) -> Result<Option<IterationStats>, EngineError> {
    let cfg = shared.cfg;
    let workers = shared.accel.num_workers;
    let per_worker = cfg.train.global_batch_size / workers;
    let indices = batch_indices(
        cfg.train.seed,
        t,
        shared.dataset.len(),
        cfg.train.global_batch_size,
        cfg.dataset.shuffle,
    );
    let my_slice: Vec<(usize, usize)> = (worker * per_worker..(worker + 1) * per_worker)
        .map(|slot| (slot, indices[slot]))
        .collect();

    let student_dense = widen_params(&state.student);
    let teacher_dense = widen_params(&state.teacher);
    let policy = match cfg.dataset.domain {
        PolicyDomain::Rgb => AugmentationPolicy::rgb(),
        PolicyDomain::Medical => AugmentationPolicy::medical(),
    };
    let sctx = SampleCtx {
        cfg,
        spec: &state.spec,
        student_dense: &student_dense,
        teacher_dense: &teacher_dense,
        trainable: &state.trainable,
        cls_state: &state.cls_state,
        patch_state: state.patch_state.as_ref(),
        policy: &policy,
    };
    let samples: Vec<Result<SampleOut, EngineError>> = my_slice
        .par_iter()
        .map(|&(slot, idx)| {
            sample_forward(
                &sctx,
                t,
                slot,
                &shared.dataset.images[idx],
                shared.dataset.rois[idx].as_ref(),
            )
        })
        .collect();
    let mut outs = Vec::with_capacity(samples.len());
    for s in samples {
        outs.push(s?);
    }

    let k = cfg.dino_head.out_dim;
    let mut payload = StepPayload {
        grads: mean_grads(&outs, &state.student),
        sample_count: outs.len(),
        ..Default::default()
    };
    payload.cls_logit_sum = vec![0.0; k];
    payload.prob_sum = vec![0.0; k];
    for o in &outs {
        payload.loss_sums[0] += o.local;
        payload.loss_sums[1] += o.global;
        payload.loss_sums[2] += o.ibot;
        for x in 0..k {
            payload.cls_logit_sum[x] += o.cls_logit_sum[x];
            payload.prob_sum[x] += o.prob_sum[x];
        }
        payload.cls_count += o.cls_count;
        payload.prob_count += o.prob_count;
        if !o.patch_logit_sum.is_empty() {
            if payload.patch_logit_sum.is_empty() {
                payload.patch_logit_sum = vec![0.0; o.patch_logit_sum.len()];
            }
            for x in 0..o.patch_logit_sum.len() {
                payload.patch_logit_sum[x] += o.patch_logit_sum[x];
            }
        }
        payload.patch_count += o.patch_count;
    }

    let reduced = shared.reducer.reduce(worker, payload)?;
    apply_update(shared, state, worker, t, &reduced)?;

    // leader-side record
    if worker == 0 {
        let (dino_w, ibot_w) = loss_weights(cfg);
        let loss = LossBreakdown::compose(
            dino_w,
            reduced.local_dino,
            reduced.global_dino,
            ibot_w,
            reduced.ibot,
        );
        if !loss.total.is_finite() {
            return Err(EngineError::NonFiniteLoss {
                iteration: t,
                local: loss.local_dino,
                global: loss.global_dino,
                ibot: loss.ibot,
            });
        }
        let teacher_entropy = entropy(&reduced.teacher_mean_probs);
        let sched = schedules(cfg);
        let state_bytes = checkpoint::state_bytes(state);
        let record = TrainRecord {
            total: loss.total,
            local_dino: loss.local_dino,
            global_dino: loss.global_dino,
            ibot: loss.ibot,
            lr: sched.lr_at(t),
            weight_decay: sched.weight_decay_at(t),
            teacher_momentum: sched.teacher_momentum_at(t),
            batch_size: cfg.train.global_batch_size,
            iteration: t,
            max_iterations: cfg.train.max_iterations,
            worker_id: worker,
            memory_used_gb: state_bytes as f64 / 1e9,
            memory_total_gb: shared.memory_total_gb,
        };
        let line = format_log_line(&record);
        if let Some(sink) = &shared.sink {
            sink.emit(&line);
        }
        return Ok(Some(IterationStats {
            iteration: t,
            loss,
            teacher_entropy,
            log_line: line,
        }));
    }
    Ok(None)
}

/// Gate, clip, optimize, EMA, and center updates; identical on every worker.
fn apply_update(
    shared: &SharedRun,
    state: &mut TrainState,
    worker: usize,
    t: usize,
    reduced: &ReducedStep,
) -> Result<(), EngineError> {
    let cfg = shared.cfg;
    let mut grads = reduced.grads.clone();
    // freeze-last-layer gate: the head's final projection receives no
    // updates while t < freeze_last_layer
    if t < cfg.train.freeze_last_layer {
        for name in ["head.last.v", "head.last.g", "ibot_head.last.v", "ibot_head.last.g"] {
            grads.remove(name);
        }
    }
    clip_global_norm(&mut grads, cfg.train.clip_grad);

    let sched = schedules(cfg);
    let (lr, wd) = (sched.lr_at(t), sched.weight_decay_at(t));
    state.optimizer.step_count = t;
    match shared.accel.dist_type {
        DistMode::Ddp => {
            state.optimizer.step(&mut state.student, &grads, lr, wd);
        }
        DistMode::Fsdp => {
            // each worker updates only the tensors it owns, then broadcasts
            let owned: ParameterSet = grads
                .iter()
                .filter(|(name, _)| shared.shard.get(*name) == Some(&worker))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect();
            state.optimizer.step(&mut state.student, &owned, lr, wd);
            {
                let mut ex = shared.exchange.lock().expect("exchange poisoned");
                for name in owned.keys() {
                    ex.insert(name.clone(), state.student[name].clone());
                }
            }
            shared.reducer.sync();
            {
                let ex = shared.exchange.lock().expect("exchange poisoned");
                for (name, tensor) in ex.iter() {
                    state.student.insert(name.clone(), tensor.clone());
                }
            }
            shared.reducer.sync();
            if worker == 0 {
                shared.exchange.lock().expect("exchange poisoned").clear();
            }
            shared.reducer.sync();
        }
    }

    ema_update(
        &mut state.teacher,
        &state.student,
        sched.teacher_momentum_at(t),
    )?;

    if !reduced.cls_logit_mean.is_empty() {
        update_center(&mut state.cls_state, &[reduced.cls_logit_mean.clone()])?;
    }
    if let Some(ps) = &mut state.patch_state {
        if !reduced.patch_logit_mean.is_empty() && reduced.patch_logit_mean.iter().any(|&v| v != 0.0)
        {
            update_center(ps, &[reduced.patch_logit_mean.clone()])?;
        }
    }
    state.iteration = t + 1;
    Ok(())
}

/// FSDP checkpoints need all shards' optimizer moments in one place.
fn gather_moments(shared: &SharedRun, state: &TrainState, worker: usize) -> Option<AdamW> {
    if shared.accel.dist_type == DistMode::Ddp || shared.accel.num_workers == 1 {
        return if worker == 0 { Some(state.optimizer.clone()) } else { None };
    }
    {
        let mut ex = shared.exchange.lock().expect("exchange poisoned");
        for (name, t) in &state.optimizer.m {
            ex.insert(format!("gather.m.{name}"), t.clone());
        }
        for (name, t) in &state.optimizer.v {
            ex.insert(format!("gather.v.{name}"), t.clone());
        }
    }
    shared.reducer.sync();
    let merged = if worker == 0 {
        let ex = shared.exchange.lock().expect("exchange poisoned");
        let mut opt = AdamW {
            step_count: state.optimizer.step_count,
            ..AdamW::new()
        };
        for (name, t) in ex.iter() {
            if let Some(rest) = name.strip_prefix("gather.m.") {
                opt.m.insert(rest.to_string(), t.clone());
            } else if let Some(rest) = name.strip_prefix("gather.v.") {
                opt.v.insert(rest.to_string(), t.clone());
            }
        }
        Some(opt)
    } else {
        None
    };
    shared.reducer.sync();
    if worker == 0 {
        shared.exchange.lock().expect("exchange poisoned").clear();
    }
    shared.reducer.sync();
    merged
}

fn worker_loop(
    shared: &SharedRun,
    mut state: TrainState,
    worker: usize,
) -> Result<(Vec<IterationStats>, TrainState), EngineError> {
    let cfg = shared.cfg;
    let mut records = Vec::new();
    if worker == 0 && cfg.train.generate_samples && state.iteration == 0 {
        if let Some(dir) = shared.run_dir {
            write_sample_views(shared, dir)?;
        }
    }
    for t in state.iteration..cfg.train.max_iterations {
        if let Some(stats) = train_step(shared, &mut state, worker, t)? {
            records.push(stats);
        }
        let done = t + 1;
        if done % cfg.train.saveckp_freq == 0 || done == cfg.train.max_iterations {
            let opt = gather_moments(shared, &state, worker);
            if worker == 0 {
                if let Some(dir) = shared.run_dir {
                    let opt = opt.expect("leader gathered the moments");
                    let snapshot = TrainState {
                        optimizer: opt,
                        ..clone_state(&state)
                    };
                    checkpoint::save_checkpoint(
                        &snapshot,
                        cfg,
                        &dir.join("checkpoints").join(format!("iter_{done:06}")),
                    )?;
                }
            }
        }
    }
    Ok((records, state))
}

pub fn clone_state(state: &TrainState) -> TrainState {
    TrainState {
        spec: state.spec.clone(),
        student: state.student.clone(),
        teacher: state.teacher.clone(),
        cls_state: state.cls_state.clone(),
        patch_state: state.patch_state.clone(),
        optimizer: state.optimizer.clone(),
        trainable: state.trainable.clone(),
        iteration: state.iteration,
    }
}

/// First-sample augmented views written as netpbm files under `samples/`.
fn write_sample_views(shared: &SharedRun, run_dir: &Path) -> Result<(), EngineError> {
    use dinomx_core::netpbm::{write_pnm, PnmKind};
    let cfg = shared.cfg;
    let dir = run_dir.join("samples");
    std::fs::create_dir_all(&dir)?;
    let idx = batch_indices(
        cfg.train.seed,
        0,
        shared.dataset.len(),
        cfg.train.global_batch_size,
        cfg.dataset.shuffle,
    )[0];
    let image = &shared.dataset.images[idx];
    let policy = match cfg.dataset.domain {
        PolicyDomain::Rgb => AugmentationPolicy::rgb(),
        PolicyDomain::Medical => AugmentationPolicy::medical(),
    };
    let seed = derive_key(cfg.train.seed, Stream::Augment, &[0, 0]);
    let views = make_views(
        image,
        &cfg.crops,
        &policy,
        shared.dataset.rois[idx].as_ref(),
        seed,
    )?;
    for (i, v) in views
        .global_views
        .iter()
        .chain(&views.local_views)
        .chain(&views.guided_views)
        .enumerate()
    {
        let shape = v.shape();
        let kind = if shape[0] == 3 { PnmKind::Rgb } else { PnmKind::Gray };
        write_pnm(
            &dir.join(format!("view_{i:02}.{}", if shape[0] == 3 { "ppm" } else { "pgm" })),
            kind,
            shape[2],
            shape[1],
            v.data(),
        )?;
    }
    Ok(())
}

/// Runs the configured number of iterations across the configured workers
/// and returns the leader's records plus the final state.
pub fn run_training(
    cfg: &TrainConfig,
    accel: &AccelConfig,
    dataset: &Dataset,
    opts: &RunOptions,
) -> Result<RunOutput, EngineError> {
    cfg.validate()?;
    accel.validate()?;
    if dataset.is_empty() {
        return Err(EngineError::Config(crate::config::ConfigError::Invalid(
            "dataset has no samples".into(),
        )));
    }
    if cfg.train.global_batch_size % accel.num_workers != 0 {
        return Err(EngineError::Config(crate::config::ConfigError::Invalid(
            format!(
                "global_batch_size {} not divisible by {} workers",
                cfg.train.global_batch_size, accel.num_workers
            ),
        )));
    }
    let spec = ModelSpec::from_config(cfg)?;
    if dataset.images[0].channels != spec.vit.in_channels {
        return Err(EngineError::Config(crate::config::ConfigError::Invalid(
            format!(
                "dataset images have {} channels, model expects {}",
                dataset.images[0].channels, spec.vit.in_channels
            ),
        )));
    }

    let state = match &opts.resume_from {
        Some(dir) => checkpoint::resume(dir, cfg)?,
        None => init_state(cfg)?,
    };

    let sink = match &opts.run_dir {
        Some(dir) => Some(LogSink::new(Some(&dir.join("logs")), 0, opts.echo_logs)?),
        None if opts.echo_logs => Some(LogSink::new(None, 0, true)?),
        None => None,
    };
    let trainable_tensors: ParameterSet = state
        .student
        .iter()
        .filter(|(k, _)| state.trainable.contains(*k))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    let shared = SharedRun {
        cfg,
        accel,
        dataset,
        reducer: Reducer::new(accel.num_workers),
        exchange: Mutex::new(ParameterSet::new()),
        sink,
        run_dir: opts.run_dir.as_deref(),
        shard: shard_plan(&trainable_tensors, accel.num_workers),
        memory_total_gb: system_memory_total_gb(),
    };

    if accel.num_workers == 1 {
        let (records, state) = worker_loop(&shared, state, 0)?;
        return Ok(RunOutput { records, state });
    }

    let results: Vec<Result<(Vec<IterationStats>, TrainState), EngineError>> =
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for w in 0..accel.num_workers {
                let replica = clone_state(&state);
                let shared_ref = &shared;
                handles.push(scope.spawn(move || worker_loop(shared_ref, replica, w)));
            }
            handles
                .into_iter()
                .map(|h| h.join().expect("worker thread panicked"))
                .collect()
        });
    let mut leader = None;
    for (w, r) in results.into_iter().enumerate() {
        let out = r?;
        if w == 0 {
            leader = Some(out);
        }
    }
    let (records, state) = leader.expect("leader worker present");
    Ok(RunOutput { records, state })
}
