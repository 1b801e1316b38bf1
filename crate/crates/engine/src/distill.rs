//! Cross-architecture knowledge distillation: a frozen large teacher feeds
//! sharpened, centered targets through its own DINO head; the student (of a
//! possibly different width) matches them through its head. The teacher
//! backbone never changes; the teacher-side head drifts only through an EMA
//! from the student-shadow copy wherever tensor shapes match.

use std::collections::BTreeSet;
use std::path::Path;

use dinomx_core::augment::{make_views, AugmentationPolicy, PolicyDomain};
use dinomx_core::graph::{Graph, Matrix};
use dinomx_core::head::{build_head, DinoHead, DinoHeadConfig};
use dinomx_core::loss::{
    log_softmax_scaled, softmax_centered, teacher_temp_at, update_center, DinoLossState,
    TeacherTempSchedule,
};
use dinomx_core::rng::{derive_key, stream_rng, Stream};
use dinomx_core::tensor::read_tensors;
use dinomx_core::vit::{
    build_forward, init_params, matrix_to_tensor, widen_params, ForwardCtx, ForwardOptions,
    LoraCtx, ParameterSet, ViTConfig,
};

use crate::config::{resolve_model_type, TeacherViews, TrainConfig};
use crate::data::{batch_indices, Dataset};
use crate::ema::ema_update;
use crate::optim::clip_global_norm;
use crate::trainer::{init_state, schedules, TrainState};
use crate::EngineError;

/// A resolved, frozen teacher: architecture preset, parameters, and the
/// integrity hash verified after every step.
pub struct TeacherSpec {
    pub vit: ViTConfig,
    pub head: DinoHeadConfig,
    /// Flat map: backbone names plain, head under `head.`.
    pub tensors: ParameterSet,
    pub backbone_hash: u64,
    pub from_disk: bool,
}

/// FNV-1a over the f32 bit patterns of all backbone tensors.
pub fn backbone_hash(tensors: &ParameterSet) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for (name, t) in tensors {
        if name.starts_with("head.") {
            continue;
        }
        for b in name.as_bytes() {
            h = (h ^ *b as u64).wrapping_mul(0x1000_0000_01b3);
        }
        for v in t.data() {
            for b in v.to_le_bytes() {
                h = (h ^ b as u64).wrapping_mul(0x1000_0000_01b3);
            }
        }
    }
    h
}

/// Resolves the teacher from the distillation section: a synthetic frozen
/// model seeded from the run seed, or tensors loaded bit-exact from disk.
pub fn load_teacher(cfg: &TrainConfig, seed: u64) -> Result<TeacherSpec, EngineError> {
    let vit = resolve_model_type(&cfg.distillation.distilled_model_type)?;
    let head = DinoHeadConfig {
        in_dim: vit.embed_dim,
        hidden_dim: cfg.dino_head.hidden_dim,
        bottleneck_dim: cfg.dino_head.bottleneck_dim,
        out_dim: cfg.dino_head.out_dim,
        norm_last_layer: cfg.dino_head.norm_last_layer,
    };
    let mut tensors;
    let from_disk = cfg.distillation.load_from_disk;
    if from_disk {
        let path = Path::new(&cfg.distillation.distilled_model_weights);
        let file = read_tensors(path).map_err(|e| {
            EngineError::Checkpoint(format!(
                "cannot load teacher weights {}: {e}",
                path.display()
            ))
        })?;
        tensors = ParameterSet::new();
        for (k, v) in file {
            tensors.insert(k, v);
        }
        // a head may be bundled; otherwise initialize one deterministically
        if !tensors.keys().any(|k| k.starts_with("head.")) {
            let h = DinoHead::init(head.clone(), &mut stream_rng(seed, Stream::Teacher, &[1]));
            for (k, v) in h.params {
                tensors.insert(format!("head.{k}"), v);
            }
        }
    } else {
        tensors = init_params(&vit, &mut stream_rng(seed, Stream::Teacher, &[0]));
        let h = DinoHead::init(head.clone(), &mut stream_rng(seed, Stream::Teacher, &[1]));
        for (k, v) in h.params {
            tensors.insert(format!("head.{k}"), v);
        }
    }
    let backbone_hash = backbone_hash(&tensors);
    Ok(TeacherSpec {
        vit,
        head,
        tensors,
        backbone_hash,
        from_disk,
    })
}

/// Student, its shadow, the frozen teacher, and the distillation center.
pub struct DistillState {
    pub teacher: TeacherSpec,
    pub student: TrainState,
    /// EMA copy of the student; drives the teacher-side head EMA.
    pub shadow: ParameterSet,
    pub center: DinoLossState,
}

pub struct DistillRecord {
    pub iteration: usize,
    pub ce: f64,
    pub local: f64,
    pub global: f64,
}

pub struct DistillOutput {
    pub records: Vec<DistillRecord>,
    pub state: DistillState,
}

pub fn init_distillation(cfg: &TrainConfig) -> Result<DistillState, EngineError> {
    let student = init_state(cfg)?;
    let teacher = load_teacher(cfg, cfg.train.seed)?;
    if teacher.head.out_dim != student.spec.head.out_dim {
        return Err(EngineError::Config(crate::config::ConfigError::Invalid(
            format!(
                "teacher and student heads must share out_dim ({} != {})",
                teacher.head.out_dim, student.spec.head.out_dim
            ),
        )));
    }
    let shadow = student.student.clone();
    let center = DinoLossState::new(
        cfg.dino_head.out_dim,
        cfg.train.center_momentum,
        cfg.train.student_temp,
        TeacherTempSchedule {
            warmup_start: cfg.train.warmup_teacher_temp,
            final_temp: cfg.train.teacher_temp,
            warmup_iterations: cfg.train.warmup_teacher_temp_iterations,
        },
    )?;
    Ok(DistillState {
        teacher,
        student,
        shadow,
        center,
    })
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Crop {
    Global(usize),
    Local(usize),
    Guided(usize),
}

/// One distillation step over a batch: teacher targets per the configured
/// view routing, CE over routed pairs, backward into the student and its
/// head only, then the shadow/teacher-head EMA and center update.
pub fn distill_step(
    cfg: &TrainConfig,
    state: &mut DistillState,
    dataset: &Dataset,
    t: usize,
) -> Result<DistillRecord, EngineError> {
    let seed = cfg.train.seed;
    let batch = batch_indices(
        seed,
        t,
        dataset.len(),
        cfg.train.global_batch_size,
        cfg.dataset.shuffle,
    );
    let policy = match cfg.dataset.domain {
        PolicyDomain::Rgb => AugmentationPolicy::rgb(),
        PolicyDomain::Medical => AugmentationPolicy::medical(),
    };
    let teacher_dense = widen_params(&state.teacher.tensors);
    let student_dense = widen_params(&state.student.student);
    let empty = BTreeSet::new();
    let temp = teacher_temp_at(t, &state.center);
    let center = state.center.center_f64();
    let k = cfg.dino_head.out_dim;

    let mut grad_acc: std::collections::BTreeMap<String, Matrix> = Default::default();
    let mut ce_sum = 0.0;
    let mut local_sum = 0.0;
    let mut global_sum = 0.0;
    let mut teacher_logit_rows: Vec<Vec<f64>> = Vec::new();

    for (slot, &idx) in batch.iter().enumerate() {
        let image = &dataset.images[idx];
        let roi = dataset.rois[idx].as_ref();
        let view_seed = derive_key(seed, Stream::Augment, &[t as u64, slot as u64]);
        let views = make_views(image, &cfg.crops, &policy, roi, view_seed)?;

        let teacher_crops: Vec<Crop> = match cfg.train.teacher_views {
            TeacherViews::Global => (0..views.global_views.len()).map(Crop::Global).collect(),
            TeacherViews::Local => (0..views.local_views.len()).map(Crop::Local).collect(),
            TeacherViews::All => (0..views.global_views.len())
                .map(Crop::Global)
                .chain((0..views.local_views.len()).map(Crop::Local))
                .collect(),
        };
        let student_crops: Vec<Crop> = (0..views.global_views.len())
            .map(Crop::Global)
            .chain((0..views.local_views.len()).map(Crop::Local))
            .chain((0..views.guided_views.len()).map(Crop::Guided))
            .collect();
        let view_of = |c: Crop| match c {
            Crop::Global(i) => &views.global_views[i],
            Crop::Local(i) => &views.local_views[i],
            Crop::Guided(i) => &views.guided_views[i],
        };

        let mut graph = Graph::new();
        let mut tctx = ForwardCtx {
            params: &teacher_dense,
            trainable: &empty,
            lora: None,
            training: false,
            dropout_rng: None,
        };
        let mut teacher_cls = Vec::new();
        for &c in &teacher_crops {
            let nodes = build_forward(
                &mut graph,
                &mut tctx,
                &state.teacher.vit,
                view_of(c),
                &ForwardOptions::default(),
            )?;
            teacher_cls.push(nodes.cls);
        }
        let teacher_stack = graph.concat_rows(&teacher_cls);
        let teacher_logits_node = build_head(
            &mut graph,
            &state.teacher.head,
            &teacher_dense,
            "head.",
            teacher_stack,
            &empty,
        )?;
        let teacher_logits: Vec<Vec<f64>> = graph
            .value(teacher_logits_node)
            .outer_iter()
            .map(|r| r.to_vec())
            .collect();
        let targets: Vec<Vec<f64>> = teacher_logits
            .iter()
            .map(|l| softmax_centered(l, &center, temp))
            .collect();
        teacher_logit_rows.extend(teacher_logits);

        let mut dropout_rng = stream_rng(seed, Stream::Dropout, &[t as u64, slot as u64]);
        let needs_dropout = state
            .student
            .spec
            .lora
            .as_ref()
            .map(|l| l.dropout > 0.0)
            .unwrap_or(false);
        let mut sctx = ForwardCtx {
            params: &student_dense,
            trainable: &state.student.trainable,
            lora: state.student.spec.lora.as_ref().map(|l| LoraCtx {
                adapters: &student_dense,
                config: l,
            }),
            training: true,
            dropout_rng: if needs_dropout { Some(&mut dropout_rng) } else { None },
        };
        let mut student_cls = Vec::new();
        for &c in &student_crops {
            let nodes = build_forward(
                &mut graph,
                &mut sctx,
                &state.student.spec.vit,
                view_of(c),
                &ForwardOptions::default(),
            )?;
            student_cls.push(nodes.cls);
        }
        let student_stack = graph.concat_rows(&student_cls);
        let student_logits_node = build_head(
            &mut graph,
            &state.student.spec.head,
            &student_dense,
            "head.",
            student_stack,
            &state.student.trainable,
        )?;
        let student_logp: Vec<Vec<f64>> = graph
            .value(student_logits_node)
            .outer_iter()
            .map(|r| log_softmax_scaled(&r.to_vec(), cfg.train.student_temp))
            .collect();

        // routed pairs: every teacher view x every student view of a
        // different crop; per-pair mean, split global/local by student side
        let mut pairs = 0usize;
        let mut global_pairs = 0usize;
        let mut local_pairs = 0usize;
        for &tc in &teacher_crops {
            for (sj, &sc) in student_crops.iter().enumerate() {
                if tc == sc {
                    continue;
                }
                pairs += 1;
                match sc {
                    Crop::Global(_) => global_pairs += 1,
                    _ => local_pairs += 1,
                }
                let _ = sj;
            }
        }
        if pairs == 0 {
            continue;
        }
        let mut seed_m = Matrix::zeros((student_crops.len(), k));
        let mut sample_ce = 0.0;
        let mut sample_local = 0.0;
        let mut sample_global = 0.0;
        for (_ti, tc) in teacher_crops.iter().enumerate() {
            let target = &targets[_ti];
            for (sj, &sc) in student_crops.iter().enumerate() {
                if *tc == sc {
                    continue;
                }
                let logp = &student_logp[sj];
                let ce: f64 = -target.iter().zip(logp).map(|(a, b)| a * b).sum::<f64>();
                sample_ce += ce / pairs as f64;
                match sc {
                    Crop::Global(_) => sample_global += ce / global_pairs.max(1) as f64,
                    _ => sample_local += ce / local_pairs.max(1) as f64,
                }
                let w = 1.0 / (pairs as f64 * cfg.train.student_temp);
                for x in 0..k {
                    seed_m[[sj, x]] += (logp[x].exp() - target[x]) * w;
                }
            }
        }
        ce_sum += sample_ce;
        local_sum += sample_local;
        global_sum += sample_global;
        let grads = graph.backward(&[(student_logits_node, seed_m)]);
        for (name, g) in grads {
            match grad_acc.get_mut(&name) {
                Some(a) => *a += &g,
                None => {
                    grad_acc.insert(name, g);
                }
            }
        }
    }

    let n = batch.len() as f64;
    let mut grads = ParameterSet::new();
    for (name, g) in &grad_acc {
        let shape = state.student.student[name].shape().to_vec();
        grads.insert(name.clone(), matrix_to_tensor(&(g / n), &shape));
    }
    clip_global_norm(&mut grads, cfg.train.clip_grad);

    let sched = schedules(cfg);
    state.student.optimizer.step_count = t;
    state
        .student
        .optimizer
        .step(&mut state.student.student, &grads, sched.lr_at(t), sched.weight_decay_at(t));

    // shadow tracks the student; the teacher head tracks the shadow where
    // shapes allow (the first MLP layer differs when d_t != d_s)
    let momentum = sched.teacher_momentum_at(t);
    ema_update(&mut state.shadow, &state.student.student, momentum)?;
    let shadow_head: Vec<(String, &dinomx_core::tensor::Tensor)> = state
        .shadow
        .iter()
        .filter(|(k, _)| k.starts_with("head."))
        .map(|(k, v)| (k.clone(), v))
        .collect();
    for (name, shadow_t) in shadow_head {
        if let Some(teacher_t) = state.teacher.tensors.get_mut(&name) {
            if teacher_t.shape() == shadow_t.shape() {
                let td = teacher_t.data_mut();
                for (ti, &si) in td.iter_mut().zip(shadow_t.data()) {
                    let tv = *ti as f64;
                    *ti = (tv + (1.0 - momentum) * (si as f64 - tv)) as f32;
                }
            }
        }
    }

    update_center(&mut state.center, &teacher_logit_rows)?;

    // frozen contract: the teacher backbone hash must never move
    let hash_now = backbone_hash(&state.teacher.tensors);
    if hash_now != state.teacher.backbone_hash {
        return Err(EngineError::TeacherMutated { iteration: t });
    }

    state.student.iteration = t + 1;
    let record = DistillRecord {
        iteration: t,
        ce: ce_sum / n,
        local: local_sum / n,
        global: global_sum / n,
    };
    if !record.ce.is_finite() {
        return Err(EngineError::NonFiniteLoss {
            iteration: t,
            local: record.local,
            global: record.global,
            ibot: 0.0,
        });
    }
    Ok(record)
}

/// Single-worker distillation loop.
pub fn run_distillation(
    cfg: &TrainConfig,
    dataset: &Dataset,
) -> Result<DistillOutput, EngineError> {
    cfg.validate()?;
    let mut state = init_distillation(cfg)?;
    let mut records = Vec::with_capacity(cfg.train.max_iterations);
    for t in 0..cfg.train.max_iterations {
        records.push(distill_step(cfg, &mut state, dataset, t)?);
    }
    Ok(DistillOutput { records, state })
}
