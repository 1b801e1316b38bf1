//! Finite-difference oracle for the full encoder + head gradient path.
//!
//! The loss is a DINO-style cross entropy between a fixed target
//! distribution and the student head output, summed over two views (one of
//! which exercises positional interpolation and patch masking). Analytic
//! gradients from the tape must match central finite differences.

use std::collections::BTreeSet;

use dinomx_core::graph::Graph;
use dinomx_core::head::{build_head, DinoHead, DinoHeadConfig};
use dinomx_core::loss::{log_softmax_scaled, softmax_centered};
use dinomx_core::rng::{stream_rng, Stream};
use dinomx_core::tensor::Tensor;
use dinomx_core::vit::{
    build_forward, init_params, widen_params, ForwardCtx, ForwardOptions, ParameterSet, ViTConfig,
};
use rand::Rng;

const STUDENT_TEMP: f64 = 0.1;

fn toy_config() -> ViTConfig {
    ViTConfig {
        patch_size: 4,
        embed_dim: 16,
        depth: 2,
        num_heads: 2,
        mlp_ratio: 2.0,
        in_channels: 1,
        base_grid: 2,
    }
}

fn toy_views() -> Vec<(Tensor, Option<Vec<usize>>)> {
    let mut rng = stream_rng(77, Stream::Eval, &[]);
    let img = |h: usize, w: usize, rng: &mut rand_chacha::ChaCha8Rng| {
        Tensor::new(
            vec![1, h, w],
            (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap()
    };
    vec![
        // identity positional grid, one masked patch
        (img(8, 8, &mut rng), Some(vec![1])),
        // 3x3 grid: exercises bilinear positional interpolation
        (img(12, 12, &mut rng), None),
    ]
}

struct Model {
    config: ViTConfig,
    backbone: ParameterSet,
    head: DinoHead,
    targets: Vec<Vec<f64>>,
}

/// Training inits (std 0.02) leave LayerNorm inputs tiny; the resulting
/// 1/sigma amplification makes the loss too curved for an h=1e-3 central
/// difference. Gradcheck therefore probes at healthy activation scales.
fn condition(params: &mut ParameterSet, seed: u64) {
    let mut rng = stream_rng(seed, Stream::Eval, &[]);
    for (name, t) in params.iter_mut() {
        if name.contains("norm") && name.ends_with("weight") {
            for v in t.data_mut() {
                *v = 1.0 + rng.gen_range(-0.1..0.1f32);
            }
        } else if name.ends_with("last.g") {
            for v in t.data_mut() {
                *v = 1.0 + rng.gen_range(-0.2..0.2f32);
            }
        } else {
            for v in t.data_mut() {
                *v = rng.gen_range(-0.3..0.3f32);
            }
        }
    }
}

fn build_model() -> Model {
    let config = toy_config();
    let mut rng = stream_rng(101, Stream::Init, &[]);
    let mut backbone = init_params(&config, &mut rng);
    condition(&mut backbone, 1);
    let mut head = DinoHead::init(
        DinoHeadConfig {
            in_dim: 16,
            hidden_dim: 32,
            bottleneck_dim: 16,
            out_dim: 32,
            norm_last_layer: false,
        },
        &mut rng,
    );
    condition(&mut head.params, 2);
    let mut trng = stream_rng(202, Stream::Eval, &[]);
    let targets = (0..2)
        .map(|_| {
            let logits: Vec<f64> = (0..32).map(|_| trng.gen_range(-1.0..1.0)).collect();
            softmax_centered(&logits, &vec![0.0; 32], 0.5)
        })
        .collect();
    Model {
        config,
        backbone,
        head,
        targets,
    }
}

/// Loss value and (optionally) analytic gradients for the current parameters.
fn loss_and_grads(model: &Model, want_grads: bool) -> (f64, ParameterSet) {
    let dense = widen_params(&model.backbone);
    let head_dense: dinomx_core::vit::DenseParams = model
        .head
        .widen()
        .into_iter()
        .map(|(k, v)| (format!("head.{k}"), v))
        .collect();
    let trainable: BTreeSet<String> = if want_grads {
        model.backbone.keys().cloned().collect()
    } else {
        BTreeSet::new()
    };
    let head_trainable: BTreeSet<String> = if want_grads {
        model
            .head
            .trainable_names()
            .into_iter()
            .map(|k| format!("head.{k}"))
            .collect()
    } else {
        BTreeSet::new()
    };

    let mut graph = Graph::new();
    let mut loss = 0.0;
    let mut seeds = Vec::new();
    for (view_idx, (image, mask)) in toy_views().iter().enumerate() {
        let mut ctx = ForwardCtx {
            params: &dense,
            trainable: &trainable,
            lora: None,
            training: false,
            dropout_rng: None,
        };
        let nodes = build_forward(
            &mut graph,
            &mut ctx,
            &model.config,
            image,
            &ForwardOptions {
                capture_attention: false,
                mask: mask.clone(),
            },
        )
        .unwrap();
        let logits_node = build_head(
            &mut graph,
            &model.head.config,
            &head_dense,
            "head.",
            nodes.cls,
            &head_trainable,
        )
        .unwrap();
        let logits: Vec<f64> = graph.value(logits_node).iter().copied().collect();
        let logp = log_softmax_scaled(&logits, STUDENT_TEMP);
        let target = &model.targets[view_idx];
        loss += -target.iter().zip(&logp).map(|(t, l)| t * l).sum::<f64>();
        if want_grads {
            let grad: Vec<f64> = (0..32)
                .map(|k| (logp[k].exp() - target[k]) / STUDENT_TEMP)
                .collect();
            seeds.push((
                logits_node,
                ndarray::Array2::from_shape_vec((1, 32), grad).unwrap(),
            ));
        }
    }
    if !want_grads {
        return (loss, ParameterSet::new());
    }
    let grads = graph.backward(&seeds);
    // merge backbone + head.* gradients into one tensor map for probing
    let mut reference = model.backbone.clone();
    for (k, v) in &model.head.params {
        reference.insert(format!("head.{k}"), v.clone());
    }
    (loss, dinomx_core::vit::grads_to_tensors(&grads, &reference))
}

#[test]
fn analytic_gradients_match_central_finite_differences() {
    let mut model = build_model();
    let (_, grads) = loss_and_grads(&model, true);

    // every trainable tensor must have received a gradient
    assert!(grads.contains_key("patch_embed.weight"));
    assert!(grads.contains_key("pos_embed"));
    assert!(grads.contains_key("mask_token"));
    assert!(grads.contains_key("head.last.v"));
    assert!(grads.contains_key("head.last.g"));

    let names: Vec<String> = grads.keys().cloned().collect();
    let mut rng = stream_rng(303, Stream::Eval, &[]);
    let h = 1e-3f32;
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    while checked < 50 {
        let name = &names[rng.gen_range(0..names.len())];
        let numel = grads[name].numel();
        let idx = rng.gen_range(0..numel);

        let write = |model: &mut Model, value: f32| {
            if let Some(rest) = name.strip_prefix("head.") {
                model.head.params.get_mut(rest).unwrap().data_mut()[idx] = value;
            } else {
                model.backbone.get_mut(name).unwrap().data_mut()[idx] = value;
            }
        };
        let original = if let Some(rest) = name.strip_prefix("head.") {
            model.head.params[rest].data()[idx]
        } else {
            model.backbone[name].data()[idx]
        };

        let plus = original + h;
        let minus = original - h;
        write(&mut model, plus);
        let (lp, _) = loss_and_grads(&model, false);
        write(&mut model, minus);
        let (lm, _) = loss_and_grads(&model, false);
        write(&mut model, original);

        // the f32 parameters quantize the step; divide by the realized delta
        let delta = plus as f64 - minus as f64;
        let numeric = (lp - lm) / delta;
        let analytic = grads[name].data()[idx] as f64;
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
        worst = worst.max(rel);
        assert!(
            rel <= 1e-3,
            "{name}[{idx}]: analytic {analytic} vs numeric {numeric} (rel {rel})"
        );
        checked += 1;
    }
    println!("checked {checked} coordinates, worst relative error {worst:.3e}");
}

#[test]
fn frozen_tensors_receive_no_gradient_entries() {
    let model = build_model();
    let dense = widen_params(&model.backbone);
    let trainable: BTreeSet<String> = model
        .backbone
        .keys()
        .filter(|k| !k.starts_with("blocks.0."))
        .cloned()
        .collect();
    let mut graph = Graph::new();
    let mut ctx = ForwardCtx {
        params: &dense,
        trainable: &trainable,
        lora: None,
        training: false,
        dropout_rng: None,
    };
    let (image, _) = &toy_views()[0];
    let nodes = build_forward(&mut graph, &mut ctx, &model.config, image, &ForwardOptions::default())
        .unwrap();
    let seed = ndarray::Array2::ones((1, 16));
    let grads = graph.backward(&[(nodes.cls, seed)]);
    assert!(grads.keys().all(|k| !k.starts_with("blocks.0.")));
    assert!(grads.keys().any(|k| k.starts_with("blocks.1.")));
}
