//! Barrier-based gradient reduction across worker threads, and the
//! sharded-optimizer layout used by the FSDP-style mode.

use std::collections::BTreeMap;
use std::sync::{Arc, Barrier, Mutex};

use dinomx_core::tensor::Tensor;
use dinomx_core::vit::ParameterSet;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReduceError {
    #[error("worker {0} contributed no payload")]
    MissingWorker(usize),
    #[error("gradient shapes differ across workers for {0}")]
    ShapeMismatch(String),
}

/// Elementwise arithmetic mean in fixed worker-index order; every entry
/// accumulates in f64 before rounding back to f32.
pub fn all_reduce_mean(worker_grads: &[&ParameterSet]) -> Result<ParameterSet, ReduceError> {
    assert!(!worker_grads.is_empty());
    let names: Vec<&String> = worker_grads[0].keys().collect();
    let mut out = ParameterSet::new();
    let inv = 1.0 / worker_grads.len() as f64;
    for name in names {
        let first = &worker_grads[0][name];
        let mut acc = vec![0.0f64; first.numel()];
        for grads in worker_grads {
            let t = grads
                .get(name)
                .ok_or_else(|| ReduceError::ShapeMismatch(name.clone()))?;
            if t.shape() != first.shape() {
                return Err(ReduceError::ShapeMismatch(name.clone()));
            }
            for (a, &v) in acc.iter_mut().zip(t.data()) {
                *a += v as f64;
            }
        }
        let data: Vec<f32> = acc.into_iter().map(|v| (v * inv) as f32).collect();
        out.insert(name.clone(), Tensor::new(first.shape().to_vec(), data).expect("finite mean"));
    }
    Ok(out)
}

/// Per-step payload contributed by each worker and reduced at the barrier.
#[derive(Debug, Clone, Default)]
pub struct StepPayload {
    /// Mean gradients over the worker's shard.
    pub grads: ParameterSet,
    /// (local_dino, global_dino, ibot) sums over the worker's samples.
    pub loss_sums: [f64; 3],
    pub sample_count: usize,
    /// Teacher CLS logit sum over (samples x global views) and its count.
    pub cls_logit_sum: Vec<f64>,
    pub cls_count: usize,
    /// Teacher patch logit sum over masked positions and its count.
    pub patch_logit_sum: Vec<f64>,
    pub patch_count: usize,
    /// Teacher probability sum (for the collapse monitor) and its count.
    pub prob_sum: Vec<f64>,
    pub prob_count: usize,
}

/// Globally reduced view of one iteration.
#[derive(Debug, Clone, Default)]
pub struct ReducedStep {
    pub grads: ParameterSet,
    pub local_dino: f64,
    pub global_dino: f64,
    pub ibot: f64,
    pub cls_logit_mean: Vec<f64>,
    pub patch_logit_mean: Vec<f64>,
    pub teacher_mean_probs: Vec<f64>,
}

fn combine(payloads: &[StepPayload]) -> Result<ReducedStep, ReduceError> {
    let grads_refs: Vec<&ParameterSet> = payloads.iter().map(|p| &p.grads).collect();
    let grads = all_reduce_mean(&grads_refs)?;
    let total_samples: usize = payloads.iter().map(|p| p.sample_count).sum();
    let mut reduced = ReducedStep {
        grads,
        ..Default::default()
    };
    let inv = 1.0 / total_samples.max(1) as f64;
    reduced.local_dino = payloads.iter().map(|p| p.loss_sums[0]).sum::<f64>() * inv;
    reduced.global_dino = payloads.iter().map(|p| p.loss_sums[1]).sum::<f64>() * inv;
    reduced.ibot = payloads.iter().map(|p| p.loss_sums[2]).sum::<f64>() * inv;

    let mean_of = |select: fn(&StepPayload) -> (&Vec<f64>, usize)| -> Vec<f64> {
        let dim = payloads
            .iter()
            .map(|p| select(p).0.len())
            .max()
            .unwrap_or(0);
        let mut sum = vec![0.0f64; dim];
        let mut count = 0usize;
        for p in payloads {
            let (v, c) = select(p);
            if !v.is_empty() {
                for (a, b) in sum.iter_mut().zip(v) {
                    *a += b;
                }
            }
            count += c;
        }
        if count > 0 {
            for a in &mut sum {
                *a /= count as f64;
            }
        }
        sum
    };
    reduced.cls_logit_mean = mean_of(|p| (&p.cls_logit_sum, p.cls_count));
    reduced.patch_logit_mean = mean_of(|p| (&p.patch_logit_sum, p.patch_count));
    reduced.teacher_mean_probs = mean_of(|p| (&p.prob_sum, p.prob_count));
    Ok(reduced)
}

/// Synchronization point shared by all workers of a run. Workers deposit
/// their payload, one thread folds them in worker-index order, and everyone
/// receives the same reduced result.
pub struct Reducer {
    slots: Mutex<Vec<Option<StepPayload>>>,
    result: Mutex<Option<Arc<ReducedStep>>>,
    barrier: Barrier,
    workers: usize,
}

impl Reducer {
    pub fn new(workers: usize) -> Self {
        Self {
            slots: Mutex::new(vec![None; workers]),
            result: Mutex::new(None),
            barrier: Barrier::new(workers),
            workers,
        }
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn reduce(&self, worker: usize, payload: StepPayload) -> Result<Arc<ReducedStep>, ReduceError> {
        self.slots.lock().expect("reducer slots poisoned")[worker] = Some(payload);
        let wait = self.barrier.wait();
        if wait.is_leader() {
            let mut slots = self.slots.lock().expect("reducer slots poisoned");
            let mut payloads = Vec::with_capacity(self.workers);
            for (i, slot) in slots.iter_mut().enumerate() {
                payloads.push(slot.take().ok_or(ReduceError::MissingWorker(i))?);
            }
            let reduced = Arc::new(combine(&payloads)?);
            *self.result.lock().expect("reducer result poisoned") = Some(reduced);
        }
        self.barrier.wait();
        let out = self
            .result
            .lock()
            .expect("reducer result poisoned")
            .clone()
            .expect("leader always deposits a result");
        Ok(out)
    }

    /// Auxiliary barrier for phases that must not overlap (e.g. sharded
    /// parameter broadcast).
    pub fn sync(&self) {
        self.barrier.wait();
    }
}

/// Round-robin assignment of tensors to workers by descending size (ties by
/// name): each tensor's optimizer moments live with exactly one owner.
pub fn shard_plan(params: &ParameterSet, workers: usize) -> BTreeMap<String, usize> {
    let mut sized: Vec<(&String, usize)> = params.iter().map(|(k, v)| (k, v.numel())).collect();
    sized.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    sized
        .into_iter()
        .enumerate()
        .map(|(i, (name, _))| (name.clone(), i % workers))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use dinomx_core::rng::{stream_rng, Stream};
    use rand::Rng;

    fn grads(vals: &[(&str, Vec<f32>)]) -> ParameterSet {
        vals.iter()
            .map(|(k, v)| (k.to_string(), Tensor::new(vec![v.len()], v.clone()).unwrap()))
            .collect()
    }

    #[test]
    fn single_worker_is_identity() {
        let g = grads(&[("w", vec![1.0, -2.0])]);
        let out = all_reduce_mean(&[&g]).unwrap();
        assert_eq!(out["w"].data(), g["w"].data());
    }

    #[test]
    fn opposite_gradients_cancel() {
        let a = grads(&[("w", vec![3.0, -1.5])]);
        let b = grads(&[("w", vec![-3.0, 1.5])]);
        let out = all_reduce_mean(&[&a, &b]).unwrap();
        assert_eq!(out["w"].data(), &[0.0, 0.0]);
    }

    #[test]
    fn four_workers_match_serial_mean() {
        let mut rng = stream_rng(3, Stream::Eval, &[]);
        let sets: Vec<ParameterSet> = (0..4)
            .map(|_| {
                grads(&[(
                    "w",
                    (0..32).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
                )])
            })
            .collect();
        let refs: Vec<&ParameterSet> = sets.iter().collect();
        let out = all_reduce_mean(&refs).unwrap();
        for i in 0..32 {
            let serial: f64 = sets.iter().map(|s| s["w"].data()[i] as f64).sum::<f64>() / 4.0;
            assert!((out["w"].data()[i] as f64 - serial).abs() <= 1e-7);
        }
    }

    #[test]
    fn threaded_reducer_agrees_with_serial() {
        let reducer = Arc::new(Reducer::new(3));
        let mut handles = Vec::new();
        for w in 0..3 {
            let r = Arc::clone(&reducer);
            handles.push(std::thread::spawn(move || {
                let payload = StepPayload {
                    grads: grads(&[("w", vec![w as f32, 1.0])]),
                    loss_sums: [w as f64, 0.0, 0.0],
                    sample_count: 1,
                    ..Default::default()
                };
                r.reduce(w, payload).unwrap()
            }));
        }
        let results: Vec<Arc<ReducedStep>> =
            handles.into_iter().map(|h| h.join().unwrap()).collect();
        for out in &results {
            assert_eq!(out.grads["w"].data(), &[1.0, 1.0]);
            assert!((out.local_dino - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shard_plan_partitions_all_tensors() {
        let params = grads(&[
            ("a", vec![0.0; 10]),
            ("b", vec![0.0; 10]),
            ("c", vec![0.0; 4]),
            ("d", vec![0.0; 2]),
        ]);
        let plan = shard_plan(&params, 2);
        assert_eq!(plan.len(), 4);
        let w0: Vec<&String> = plan.iter().filter(|(_, &w)| w == 0).map(|(k, _)| k).collect();
        let w1: Vec<&String> = plan.iter().filter(|(_, &w)| w == 1).map(|(k, _)| k).collect();
        assert_eq!(w0.len(), 2);
        assert_eq!(w1.len(), 2);
        // size-descending round robin: a(10)->0, b(10)->1, c(4)->0, d(2)->1
        assert_eq!(plan["a"], 0);
        assert_eq!(plan["b"], 1);
        assert_eq!(plan["c"], 0);
        assert_eq!(plan["d"], 1);

        let single = shard_plan(&params, 1);
        assert!(single.values().all(|&w| w == 0));
    }
}
