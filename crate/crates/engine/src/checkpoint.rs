//! Checkpoint bundles: all training state in one tensor container plus a
//! small metadata file. RNG streams are derived statelessly from the seed
//! and iteration, so the bundle needs no separate RNG state beyond the
//! metadata already stored.

use std::path::Path;

use dinomx_core::tensor::{read_tensors, write_tensors, NamedTensors};
use dinomx_core::vit::ParameterSet;

use crate::config::TrainConfig;
use crate::optim::AdamW;
use crate::trainer::{init_state, TrainState};
use crate::EngineError;

const TENSOR_FILE: &str = "state.dmxt";
const META_FILE: &str = "meta.txt";

/// Bytes of tracked training state (both parameter sets, optimizer moments,
/// centers); the deterministic "memory used" figure in log lines.
pub fn state_bytes(state: &TrainState) -> usize {
    let tensors = |p: &ParameterSet| -> usize { p.values().map(|t| t.numel() * 4).sum() };
    tensors(&state.student)
        + tensors(&state.teacher)
        + tensors(&state.optimizer.m)
        + tensors(&state.optimizer.v)
        + state.cls_state.center.numel() * 4
        + state
            .patch_state
            .as_ref()
            .map_or(0, |s| s.center.numel() * 4)
}

pub fn save_checkpoint(state: &TrainState, cfg: &TrainConfig, dir: &Path) -> Result<(), EngineError> {
    std::fs::create_dir_all(dir)?;
    let mut tensors = NamedTensors::new();
    for (k, v) in &state.student {
        tensors.insert(format!("student.{k}"), v.clone());
    }
    for (k, v) in &state.teacher {
        tensors.insert(format!("teacher.{k}"), v.clone());
    }
    for (k, v) in &state.optimizer.m {
        tensors.insert(format!("opt.m.{k}"), v.clone());
    }
    for (k, v) in &state.optimizer.v {
        tensors.insert(format!("opt.v.{k}"), v.clone());
    }
    tensors.insert("center.cls".into(), state.cls_state.center.clone());
    if let Some(ps) = &state.patch_state {
        tensors.insert("center.patch".into(), ps.center.clone());
    }
    write_tensors(&dir.join(TENSOR_FILE), &tensors)?;
    let meta = format!(
        "iteration={}\nopt_step={}\nconfig={}\n",
        state.iteration,
        state.optimizer.step_count,
        cfg.canonical_string()
    );
    std::fs::write(dir.join(META_FILE), meta)?;
    Ok(())
}

fn meta_field<'a>(meta: &'a str, key: &str) -> Result<&'a str, EngineError> {
    meta.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .ok_or_else(|| EngineError::Checkpoint(format!("metadata field {key} missing")))
}

/// Rebuilds a [`TrainState`] from a bundle. The stored config snapshot must
/// match the provided config exactly; resumed single-worker training then
/// reproduces the next log line byte for byte.
pub fn resume(dir: &Path, cfg: &TrainConfig) -> Result<TrainState, EngineError> {
    let meta_path = dir.join(META_FILE);
    let meta = std::fs::read_to_string(&meta_path).map_err(|e| {
        EngineError::Checkpoint(format!("cannot read {}: {e}", meta_path.display()))
    })?;
    let stored_config = meta_field(&meta, "config")?;
    if stored_config != cfg.canonical_string() {
        return Err(EngineError::Checkpoint(
            "config mismatch: the checkpoint was written with a different training configuration"
                .into(),
        ));
    }
    let iteration: usize = meta_field(&meta, "iteration")?
        .parse()
        .map_err(|_| EngineError::Checkpoint("bad iteration field".into()))?;
    let opt_step: usize = meta_field(&meta, "opt_step")?
        .parse()
        .map_err(|_| EngineError::Checkpoint("bad opt_step field".into()))?;

    let tensors = read_tensors(&dir.join(TENSOR_FILE))?;
    // start from a fresh state to carry the spec and loss-state scaffolding
    let mut state = init_state(cfg)?;
    let mut student = ParameterSet::new();
    let mut teacher = ParameterSet::new();
    let mut opt = AdamW {
        step_count: opt_step,
        ..AdamW::new()
    };
    for (name, t) in tensors {
        if let Some(rest) = name.strip_prefix("student.") {
            student.insert(rest.to_string(), t);
        } else if let Some(rest) = name.strip_prefix("teacher.") {
            teacher.insert(rest.to_string(), t);
        } else if let Some(rest) = name.strip_prefix("opt.m.") {
            opt.m.insert(rest.to_string(), t);
        } else if let Some(rest) = name.strip_prefix("opt.v.") {
            opt.v.insert(rest.to_string(), t);
        } else if name == "center.cls" {
            state.cls_state.center = t;
        } else if name == "center.patch" {
            if let Some(ps) = &mut state.patch_state {
                ps.center = t;
            }
        } else {
            return Err(EngineError::Checkpoint(format!("unexpected tensor {name}")));
        }
    }
    if !student.keys().eq(state.student.keys()) || !teacher.keys().eq(state.teacher.keys()) {
        return Err(EngineError::Checkpoint(
            "partial bundle: parameter names do not match the configured model".into(),
        ));
    }
    state.student = student;
    state.teacher = teacher;
    state.optimizer = opt;
    state.iteration = iteration;
    Ok(state)
}
