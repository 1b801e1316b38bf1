//! Tiny Vision Transformer encoder with attention capture, patch masking,
//! and reverse-mode gradients via the tape in [`crate::graph`].
//!
//! Blocks are pre-norm with a GELU MLP. Per head the attention weights are
//! exactly `softmax(Q Kᵀ / sqrt(d_k))`. Positional embeddings live on the
//! patch grid and are bilinearly resized (align-corners) when the input grid
//! differs from the base grid.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::graph::{GradMap, Graph, Matrix, NodeId};
use crate::peft::{LoraConfig, Target};
use crate::tensor::{NamedTensors, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-6;
/// Guard that maps the zero vector to zero in L2 normalization.
pub const L2_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum VitError {
    #[error("embed_dim {d} not divisible by num_heads {h}")]
    HeadSplit { d: usize, h: usize },
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("image {h}x{w} not divisible by patch size {patch}")]
    NonDivisible { h: usize, w: usize, patch: usize },
    #[error("mask index {index} out of range for {num_patches} patches")]
    MaskIndexOutOfRange { index: usize, num_patches: usize },
    #[error("positional grid of {len} entries is not square")]
    NonSquareGrid { len: usize },
    #[error("parameter {0} missing")]
    MissingParam(String),
    #[error("parameter {name} has shape {actual:?}, expected {expected:?}")]
    BadShape {
        name: String,
        actual: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("feature length {actual} does not match head input dim {expected}")]
    FeatureDim { actual: usize, expected: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViTConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    pub in_channels: usize,
    /// Patches per side at the reference resolution; the positional table
    /// holds `base_grid^2` rows.
    pub base_grid: usize,
}

impl ViTConfig {
    pub fn validate(&self) -> Result<(), VitError> {
        if self.embed_dim % self.num_heads != 0 {
            return Err(VitError::HeadSplit {
                d: self.embed_dim,
                h: self.num_heads,
            });
        }
        if self.patch_size == 0 || self.depth == 0 || self.base_grid == 0 {
            return Err(VitError::BadConfig(
                "patch_size, depth and base_grid must be >= 1".into(),
            ));
        }
        if self.in_channels != 1 && self.in_channels != 3 {
            return Err(VitError::BadConfig("in_channels must be 1 or 3".into()));
        }
        if self.mlp_ratio <= 0.0 {
            return Err(VitError::BadConfig("mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    /// Desk-scale defaults: trainable on a CPU in minutes.
    pub fn desk_tiny() -> Self {
        Self {
            patch_size: 4,
            embed_dim: 64,
            depth: 4,
            num_heads: 4,
            mlp_ratio: 4.0,
            in_channels: 1,
            base_grid: 8,
        }
    }
}

/// Ordered name -> tensor map: patch-embed kernel, positional embeddings,
/// per-layer Q/K/V/O projections, MLP weights, norms, CLS and mask tokens.
pub type ParameterSet = NamedTensors;

/// Widened f64 copies shared across concurrent forward tapes.
pub type DenseParams = BTreeMap<String, Arc<Matrix>>;

fn trunc_normal(rng: &mut ChaCha8Rng, std: f32) -> f32 {
    // Truncated at two standard deviations, the usual ViT init.
    loop {
        let u1: f32 = rng.gen_range(f32::EPSILON..1.0);
        let u2: f32 = rng.gen_range(0.0..1.0);
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos();
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

fn init_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| trunc_normal(rng, std)).collect();
    Tensor::new(shape, data).expect("finite init")
}

/// Fresh backbone parameters: truncated-normal std 0.02 weights, zero
/// biases, unit norms, zero CLS and mask tokens.
pub fn init_params(config: &ViTConfig, rng: &mut ChaCha8Rng) -> ParameterSet {
    let d = config.embed_dim;
    let hidden = config.mlp_hidden();
    let patch_in = config.in_channels * config.patch_size * config.patch_size;
    let g2 = config.base_grid * config.base_grid;
    let mut p = ParameterSet::new();
    p.insert("patch_embed.weight".into(), init_tensor(rng, vec![d, patch_in], 0.02));
    p.insert("patch_embed.bias".into(), Tensor::zeros(vec![d]));
    p.insert("pos_embed".into(), init_tensor(rng, vec![g2, d], 0.02));
    p.insert("cls_token".into(), Tensor::zeros(vec![d]));
    p.insert("mask_token".into(), Tensor::zeros(vec![d]));
    for layer in 0..config.depth {
        for norm in ["norm1", "norm2"] {
            p.insert(
                format!("blocks.{layer}.{norm}.weight"),
                Tensor::filled(vec![d], 1.0).unwrap(),
            );
            p.insert(format!("blocks.{layer}.{norm}.bias"), Tensor::zeros(vec![d]));
        }
        for proj in ["q", "k", "v", "o"] {
            p.insert(
                format!("blocks.{layer}.attn.{proj}.weight"),
                init_tensor(rng, vec![d, d], 0.02),
            );
            p.insert(format!("blocks.{layer}.attn.{proj}.bias"), Tensor::zeros(vec![d]));
        }
        p.insert(
            format!("blocks.{layer}.mlp.fc1.weight"),
            init_tensor(rng, vec![hidden, d], 0.02),
        );
        p.insert(format!("blocks.{layer}.mlp.fc1.bias"), Tensor::zeros(vec![hidden]));
        p.insert(
            format!("blocks.{layer}.mlp.fc2.weight"),
            init_tensor(rng, vec![d, hidden], 0.02),
        );
        p.insert(format!("blocks.{layer}.mlp.fc2.bias"), Tensor::zeros(vec![d]));
    }
    p.insert("norm.weight".into(), Tensor::filled(vec![d], 1.0).unwrap());
    p.insert("norm.bias".into(), Tensor::zeros(vec![d]));
    p
}

pub fn count_params(params: &ParameterSet) -> usize {
    params.values().map(Tensor::numel).sum()
}

/// Tensor -> f64 matrix; 1-D tensors become row vectors.
pub fn tensor_to_matrix(t: &Tensor) -> Matrix {
    let (r, c) = match t.shape() {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        other => panic!("tensor rank {} unsupported in graph", other.len()),
    };
    Array2::from_shape_vec((r, c), t.data().iter().map(|&v| v as f64).collect()).unwrap()
}

pub fn matrix_to_tensor(m: &Matrix, shape: &[usize]) -> Tensor {
    let data: Vec<f32> = m.iter().map(|&v| v as f32).collect();
    Tensor::new(shape.to_vec(), data).expect("finite matrix")
}

pub fn widen_params(params: &ParameterSet) -> DenseParams {
    params
        .iter()
        .map(|(k, v)| (k.clone(), Arc::new(tensor_to_matrix(v))))
        .collect()
}

/// Gradient matrices back to tensors with the shapes of `reference`.
pub fn grads_to_tensors(grads: &GradMap, reference: &ParameterSet) -> ParameterSet {
    grads
        .iter()
        .map(|(k, g)| {
            let shape = reference
                .get(k)
                .unwrap_or_else(|| panic!("gradient for unknown parameter {k}"))
                .shape()
                .to_vec();
            (k.clone(), matrix_to_tensor(g, &shape))
        })
        .collect()
}

/// Per-layer, per-head token-to-token attention captured in a forward pass.
#[derive(Debug, Clone)]
pub struct AttentionStack {
    /// `layers[l][h]` is the softmax matrix of shape [n, n].
    pub layers: Vec<Vec<Tensor>>,
}

impl AttentionStack {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_heads(&self) -> usize {
        self.layers.first().map_or(0, Vec::len)
    }

    /// Max row-sum deviation from 1 plus negativity check; rows of every map
    /// must sum to 1 within 1e-5.
    pub fn max_row_sum_error(&self) -> f32 {
        let mut worst = 0.0f32;
        for layer in &self.layers {
            for map in layer {
                let n = map.shape()[0];
                for r in 0..n {
                    let row = &map.data()[r * n..(r + 1) * n];
                    if row.iter().any(|&v| v < 0.0) {
                        return f32::INFINITY;
                    }
                    worst = worst.max((row.iter().sum::<f32>() - 1.0).abs());
                }
            }
        }
        worst
    }
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub cls: Tensor,
    pub patch_tokens: Tensor,
    pub attention: Option<AttentionStack>,
}

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    pub capture_attention: bool,
    /// Patch indices whose embeddings are replaced by the mask token before
    /// the first block.
    pub mask: Option<Vec<usize>>,
}

/// LoRA wiring consulted while building projections. Adapter matrices are
/// widened alongside the backbone and addressed as `lora.<layer>.<target>.{A,B}`.
pub struct LoraCtx<'a> {
    pub adapters: &'a DenseParams,
    pub config: &'a LoraConfig,
}

/// Everything a tape-building forward needs to know.
pub struct ForwardCtx<'a> {
    pub params: &'a DenseParams,
    pub trainable: &'a BTreeSet<String>,
    pub lora: Option<LoraCtx<'a>>,
    /// Enables adapter-branch dropout.
    pub training: bool,
    pub dropout_rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> ForwardCtx<'a> {
    pub fn inference(params: &'a DenseParams) -> Self {
        static EMPTY: std::sync::OnceLock<BTreeSet<String>> = std::sync::OnceLock::new();
        Self {
            params,
            trainable: EMPTY.get_or_init(BTreeSet::new),
            lora: None,
            training: false,
            dropout_rng: None,
        }
    }
}

pub struct VitNodes {
    pub cls: NodeId,
    pub patch_tokens: NodeId,
    /// `attention[l][h]` softmax nodes; empty unless capture was requested.
    pub attention: Vec<Vec<NodeId>>,
    pub num_patches: usize,
    pub grid: (usize, usize),
}

fn get_param(
    graph: &mut Graph,
    ctx: &ForwardCtx,
    name: &str,
) -> Result<NodeId, VitError> {
    let m = ctx
        .params
        .get(name)
        .ok_or_else(|| VitError::MissingParam(name.to_string()))?;
    Ok(graph.param(name, Arc::clone(m), ctx.trainable.contains(name)))
}

/// Row-major patch extraction: patch (pr, pc) flattens channel-major as
/// `[c, dy, dx]`.
pub fn extract_patches(image: &Tensor, patch: usize) -> Result<(Matrix, usize, usize), VitError> {
    let shape = image.shape();
    assert_eq!(shape.len(), 3, "image tensor must be [C,H,W]");
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if h % patch != 0 || w % patch != 0 {
        return Err(VitError::NonDivisible { h, w, patch });
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut m = Matrix::zeros((gh * gw, c * patch * patch));
    let data = image.data();
    for pr in 0..gh {
        for pc in 0..gw {
            let row = pr * gw + pc;
            let mut col = 0;
            for ch in 0..c {
                for dy in 0..patch {
                    for dx in 0..patch {
                        let y = pr * patch + dy;
                        let x = pc * patch + dx;
                        m[[row, col]] = data[(ch * h + y) * w + x] as f64;
                        col += 1;
                    }
                }
            }
        }
    }
    Ok((m, gh, gw))
}

/// Align-corners bilinear weights from a square `src` grid onto `dst_h x dst_w`.
pub fn interp_matrix(src: usize, dst_h: usize, dst_w: usize) -> Matrix {
    let mut m = Matrix::zeros((dst_h * dst_w, src * src));
    let coord = |t: usize, dst: usize| -> f64 {
        if dst == 1 {
            (src as f64 - 1.0) / 2.0
        } else {
            t as f64 * (src as f64 - 1.0) / (dst as f64 - 1.0)
        }
    };
    for r in 0..dst_h {
        let sr = coord(r, dst_h);
        let r0 = sr.floor() as usize;
        let r1 = (r0 + 1).min(src - 1);
        let fr = sr - r0 as f64;
        for c in 0..dst_w {
            let sc = coord(c, dst_w);
            let c0 = sc.floor() as usize;
            let c1 = (c0 + 1).min(src - 1);
            let fc = sc - c0 as f64;
            let row = r * dst_w + c;
            m[[row, r0 * src + c0]] += (1.0 - fr) * (1.0 - fc);
            m[[row, r0 * src + c1]] += (1.0 - fr) * fc;
            m[[row, r1 * src + c0]] += fr * (1.0 - fc);
            m[[row, r1 * src + c1]] += fr * fc;
        }
    }
    m
}

/// Bilinear resize of a square positional grid; identity when the target
/// grid equals the source grid.
pub fn interpolate_pos_embed(pos: &Tensor, target_grid: usize) -> Result<Tensor, VitError> {
    let shape = pos.shape();
    assert_eq!(shape.len(), 2, "positional table must be [g*g, d]");
    let g2 = shape[0];
    let g = (g2 as f64).sqrt().round() as usize;
    if g * g != g2 {
        return Err(VitError::NonSquareGrid { len: g2 });
    }
    if target_grid == 0 {
        return Err(VitError::BadConfig("target grid must be >= 1".into()));
    }
    if target_grid == g {
        return Ok(pos.clone());
    }
    let m = interp_matrix(g, target_grid, target_grid);
    let src = tensor_to_matrix(pos);
    let out = m.dot(&src);
    Ok(matrix_to_tensor(&out, &[target_grid * target_grid, shape[1]]))
}

/// Linear projection with optional LoRA branch: `x W0ᵀ + (α/r) (x Aᵀ) Bᵀ + b`,
/// computing `A x` first. Dropout applies to the adapter input only, in
/// training mode only.
fn projection(
    graph: &mut Graph,
    ctx: &mut ForwardCtx,
    layer: usize,
    target: Target,
    x: NodeId,
) -> Result<NodeId, VitError> {
    let tname = target.as_str();
    let w = get_param(graph, ctx, &format!("blocks.{layer}.attn.{tname}.weight"))?;
    let b = get_param(graph, ctx, &format!("blocks.{layer}.attn.{tname}.bias"))?;
    let mut y = graph.matmul_nt(x, w);
    let mut lora_branch = None;
    if let Some(lora) = &ctx.lora {
        if lora.config.target_projections.contains(&target) {
            let scaling = lora.config.scaling();
            let a_name = format!("lora.{layer}.{tname}.A");
            let b_name = format!("lora.{layer}.{tname}.B");
            let a_mat = lora
                .adapters
                .get(&a_name)
                .ok_or_else(|| VitError::MissingParam(a_name.clone()))?;
            let b_mat = lora
                .adapters
                .get(&b_name)
                .ok_or_else(|| VitError::MissingParam(b_name.clone()))?;
            let a = graph.param(&a_name, Arc::clone(a_mat), ctx.trainable.contains(&a_name));
            let bm = graph.param(&b_name, Arc::clone(b_mat), ctx.trainable.contains(&b_name));
            lora_branch = Some((a, bm, scaling, lora.config.dropout));
        }
    }
    if let Some((a, bm, scaling, dropout)) = lora_branch {
        let mut xin = x;
        if ctx.training && dropout > 0.0 {
            let rng = ctx
                .dropout_rng
                .as_deref_mut()
                .expect("training forward with dropout needs an rng");
            let keep = 1.0 - dropout;
            let shape = graph.value(x).raw_dim();
            let mask = Matrix::from_shape_fn(shape, |_| {
                if rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            });
            xin = graph.dropout(x, mask);
        }
        let ax = graph.matmul_nt(xin, a);
        let bax = graph.matmul_nt(ax, bm);
        let scaled = graph.scale(bax, scaling);
        y = graph.add(y, scaled);
    }
    Ok(graph.add_bias_row(y, b))
}

/// Patch embedding + masking + positional encoding; returns the patch-token
/// node of shape [N, d] (before the CLS token is prepended).
pub fn build_embedding(
    graph: &mut Graph,
    ctx: &mut ForwardCtx,
    config: &ViTConfig,
    image: &Tensor,
    mask: Option<&[usize]>,
) -> Result<(NodeId, usize, (usize, usize)), VitError> {
    let (patches, gh, gw) = extract_patches(image, config.patch_size)?;
    let num_patches = gh * gw;
    if let Some(mask) = mask {
        if let Some(&bad) = mask.iter().find(|&&i| i >= num_patches) {
            return Err(VitError::MaskIndexOutOfRange {
                index: bad,
                num_patches,
            });
        }
    }
    let x_in = graph.input(patches);
    let w_pe = get_param(graph, ctx, "patch_embed.weight")?;
    let b_pe = get_param(graph, ctx, "patch_embed.bias")?;
    let mm = graph.matmul_nt(x_in, w_pe);
    let mut tokens = graph.add_bias_row(mm, b_pe);

    if let Some(mask) = mask {
        if !mask.is_empty() {
            let mask_token = get_param(graph, ctx, "mask_token")?;
            tokens = graph.replace_rows(tokens, mask_token, mask);
        }
    }

    let pos = get_param(graph, ctx, "pos_embed")?;
    let g2 = graph.value(pos).nrows();
    let g = (g2 as f64).sqrt().round() as usize;
    if g * g != g2 {
        return Err(VitError::NonSquareGrid { len: g2 });
    }
    let pos_resized = if (gh, gw) == (g, g) {
        pos
    } else {
        let m = graph.input(interp_matrix(g, gh, gw));
        graph.matmul(m, pos)
    };
    let with_pos = graph.add(tokens, pos_resized);
    Ok((with_pos, num_patches, (gh, gw)))
}

/// Builds the full encoder tape for one image view.
pub fn build_forward(
    graph: &mut Graph,
    ctx: &mut ForwardCtx,
    config: &ViTConfig,
    image: &Tensor,
    opts: &ForwardOptions,
) -> Result<VitNodes, VitError> {
    config.validate()?;
    let (patch_tokens, num_patches, grid) =
        build_embedding(graph, ctx, config, image, opts.mask.as_deref())?;

    let cls = get_param(graph, ctx, "cls_token")?;
    let mut x = graph.concat_rows(&[cls, patch_tokens]);
    let n = num_patches + 1;
    let heads = config.num_heads;
    let dk = config.head_dim();
    let attn_scale = 1.0 / (dk as f64).sqrt();

    let mut attention = Vec::new();
    for layer in 0..config.depth {
        let g1 = get_param(graph, ctx, &format!("blocks.{layer}.norm1.weight"))?;
        let b1 = get_param(graph, ctx, &format!("blocks.{layer}.norm1.bias"))?;
        let h = graph.layer_norm(x, g1, b1, LAYER_NORM_EPS);

        let q = projection(graph, ctx, layer, Target::Q, h)?;
        let k = projection(graph, ctx, layer, Target::K, h)?;
        let v = projection(graph, ctx, layer, Target::V, h)?;

        let mut head_outs = Vec::with_capacity(heads);
        let mut layer_attn = Vec::with_capacity(heads);
        for hd in 0..heads {
            let qh = graph.slice_cols(q, hd * dk, dk);
            let kh = graph.slice_cols(k, hd * dk, dk);
            let vh = graph.slice_cols(v, hd * dk, dk);
            let scores = graph.matmul_nt(qh, kh);
            let attn = graph.softmax_rows(scores, attn_scale);
            debug_assert_eq!(graph.value(attn).nrows(), n);
            if opts.capture_attention {
                layer_attn.push(attn);
            }
            head_outs.push(graph.matmul(attn, vh));
        }
        if opts.capture_attention {
            attention.push(layer_attn);
        }
        let merged = graph.concat_cols(&head_outs);
        let proj = projection(graph, ctx, layer, Target::O, merged)?;
        x = graph.add(x, proj);

        let g2n = get_param(graph, ctx, &format!("blocks.{layer}.norm2.weight"))?;
        let b2n = get_param(graph, ctx, &format!("blocks.{layer}.norm2.bias"))?;
        let h2 = graph.layer_norm(x, g2n, b2n, LAYER_NORM_EPS);
        let w1 = get_param(graph, ctx, &format!("blocks.{layer}.mlp.fc1.weight"))?;
        let bb1 = get_param(graph, ctx, &format!("blocks.{layer}.mlp.fc1.bias"))?;
        let m1 = graph.matmul_nt(h2, w1);
        let m1b = graph.add_bias_row(m1, bb1);
        let act = graph.gelu(m1b);
        let w2 = get_param(graph, ctx, &format!("blocks.{layer}.mlp.fc2.weight"))?;
        let bb2 = get_param(graph, ctx, &format!("blocks.{layer}.mlp.fc2.bias"))?;
        let m2 = graph.matmul_nt(act, w2);
        let m2b = graph.add_bias_row(m2, bb2);
        x = graph.add(x, m2b);
    }

    let gf = get_param(graph, ctx, "norm.weight")?;
    let bf = get_param(graph, ctx, "norm.bias")?;
    let x = graph.layer_norm(x, gf, bf, LAYER_NORM_EPS);
    let cls_out = graph.slice_rows(x, 0, 1);
    let patch_out = graph.slice_rows(x, 1, num_patches);
    Ok(VitNodes {
        cls: cls_out,
        patch_tokens: patch_out,
        attention,
        num_patches,
        grid,
    })
}

pub fn export_attention(graph: &Graph, nodes: &VitNodes) -> Option<AttentionStack> {
    if nodes.attention.is_empty() {
        return None;
    }
    let layers = nodes
        .attention
        .iter()
        .map(|layer| {
            layer
                .iter()
                .map(|&id| {
                    let v = graph.value(id);
                    matrix_to_tensor(v, &[v.nrows(), v.ncols()])
                })
                .collect()
        })
        .collect();
    Some(AttentionStack { layers })
}

fn export_output(graph: &Graph, nodes: &VitNodes, d: usize) -> EncoderOutput {
    let cls = matrix_to_tensor(graph.value(nodes.cls), &[d]);
    let patch_tokens =
        matrix_to_tensor(graph.value(nodes.patch_tokens), &[nodes.num_patches, d]);
    EncoderOutput {
        cls,
        patch_tokens,
        attention: export_attention(graph, nodes),
    }
}

/// Inference forward: the tape is dropped after export.
pub fn forward(
    params: &ParameterSet,
    config: &ViTConfig,
    image: &Tensor,
    opts: &ForwardOptions,
) -> Result<EncoderOutput, VitError> {
    let dense = widen_params(params);
    let mut graph = Graph::new();
    let mut ctx = ForwardCtx::inference(&dense);
    let nodes = build_forward(&mut graph, &mut ctx, config, image, opts)?;
    Ok(export_output(&graph, &nodes, config.embed_dim))
}

/// A forward pass that kept its activations; consuming it with
/// [`ForwardPass::backward`] yields gradients for every trainable tensor.
pub struct ForwardPass {
    graph: Graph,
    nodes: VitNodes,
    embed_dim: usize,
}

impl ForwardPass {
    pub fn output(&self) -> EncoderOutput {
        export_output(&self.graph, &self.nodes, self.embed_dim)
    }

    /// Seeds the reverse sweep with loss gradients at the CLS vector and the
    /// patch tokens; frozen tensors receive no entry.
    pub fn backward(self, d_cls: &Tensor, d_patches: &Tensor, reference: &ParameterSet) -> ParameterSet {
        let seeds = vec![
            (self.nodes.cls, tensor_to_matrix(d_cls)),
            (
                self.nodes.patch_tokens,
                {
                    let m = tensor_to_matrix(d_patches);
                    debug_assert_eq!(m.nrows(), self.nodes.num_patches);
                    m
                },
            ),
        ];
        let grads = self.graph.backward(&seeds);
        grads_to_tensors(&grads, reference)
    }
}

/// Forward that records activations for a later [`ForwardPass::backward`].
pub fn forward_recorded(
    params: &ParameterSet,
    config: &ViTConfig,
    image: &Tensor,
    opts: &ForwardOptions,
    trainable: &BTreeSet<String>,
) -> Result<ForwardPass, VitError> {
    let dense = widen_params(params);
    let mut graph = Graph::new();
    let mut ctx = ForwardCtx {
        params: &dense,
        trainable,
        lora: None,
        training: false,
        dropout_rng: None,
    };
    let nodes = build_forward(&mut graph, &mut ctx, config, image, opts)?;
    Ok(ForwardPass {
        graph,
        nodes,
        embed_dim: config.embed_dim,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

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

    fn toy_image(seed: u64, h: usize, w: usize) -> Tensor {
        let mut rng = stream_rng(seed, Stream::Eval, &[h as u64, w as u64]);
        let data = (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::new(vec![1, h, w], data).unwrap()
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let config = ViTConfig {
            patch_size: 4,
            embed_dim: 32,
            depth: 3,
            num_heads: 4,
            mlp_ratio: 4.0,
            in_channels: 1,
            base_grid: 8,
        };
        let mut rng = stream_rng(1, Stream::Init, &[]);
        let params = init_params(&config, &mut rng);
        let image = toy_image(9, 32, 32);
        let out = forward(
            &params,
            &config,
            &image,
            &ForwardOptions {
                capture_attention: true,
                mask: None,
            },
        )
        .unwrap();
        let stack = out.attention.unwrap();
        assert_eq!(stack.num_layers(), 3);
        assert_eq!(stack.num_heads(), 4);
        assert_eq!(stack.layers[0][0].shape(), &[65, 65]);
        assert!(stack.max_row_sum_error() < 1e-5);
    }

    #[test]
    fn forward_is_deterministic() {
        let config = toy_config();
        let mut rng = stream_rng(2, Stream::Init, &[]);
        let params = init_params(&config, &mut rng);
        let image = toy_image(3, 8, 8);
        let a = forward(&params, &config, &image, &ForwardOptions::default()).unwrap();
        let b = forward(&params, &config, &image, &ForwardOptions::default()).unwrap();
        assert_eq!(a.cls.data(), b.cls.data());
        assert_eq!(a.patch_tokens.data(), b.patch_tokens.data());
    }

    #[test]
    fn unmasked_forward_ignores_mask_token() {
        let config = toy_config();
        let mut rng = stream_rng(4, Stream::Init, &[]);
        let mut params = init_params(&config, &mut rng);
        let image = toy_image(5, 8, 8);
        let a = forward(&params, &config, &image, &ForwardOptions::default()).unwrap();
        params.insert("mask_token".into(), Tensor::filled(vec![16], 7.5).unwrap());
        let b = forward(&params, &config, &image, &ForwardOptions::default()).unwrap();
        assert_eq!(a.cls.data(), b.cls.data());
    }

    #[test]
    fn full_mask_with_zero_token_equals_pos_embedding() {
        let config = toy_config();
        let mut rng = stream_rng(6, Stream::Init, &[]);
        let params = init_params(&config, &mut rng);
        let image = toy_image(7, 8, 8);
        let dense = widen_params(&params);
        let mut graph = Graph::new();
        let mut ctx = ForwardCtx::inference(&dense);
        let (tokens, n, _) =
            build_embedding(&mut graph, &mut ctx, &config, &image, Some(&[0, 1, 2, 3])).unwrap();
        assert_eq!(n, 4);
        let toks = graph.value(tokens);
        let pos = tensor_to_matrix(&params["pos_embed"]);
        let bias = tensor_to_matrix(&params["patch_embed.bias"]);
        // every token row = mask(0) + patch bias + pos row
        for i in 0..n {
            for j in 0..config.embed_dim {
                let expect = pos[[i, j]] + bias[[0, j]];
                assert!((toks[[i, j]] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mask_out_of_range_is_an_error() {
        let config = toy_config();
        let mut rng = stream_rng(8, Stream::Init, &[]);
        let params = init_params(&config, &mut rng);
        let image = toy_image(9, 8, 8);
        let err = forward(
            &params,
            &config,
            &image,
            &ForwardOptions {
                capture_attention: false,
                mask: Some(vec![4]),
            },
        )
        .unwrap_err();
        assert!(matches!(err, VitError::MaskIndexOutOfRange { .. }));
    }

    #[test]
    fn non_divisible_image_is_an_error() {
        let config = toy_config();
        let mut rng = stream_rng(10, Stream::Init, &[]);
        let params = init_params(&config, &mut rng);
        let image = toy_image(11, 9, 8);
        assert!(matches!(
            forward(&params, &config, &image, &ForwardOptions::default()),
            Err(VitError::NonDivisible { .. })
        ));
    }

    #[test]
    fn pos_interpolation_identity_and_constant() {
        let pos = Tensor::new(vec![4, 2], vec![0.0, 0.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0]).unwrap();
        let same = interpolate_pos_embed(&pos, 2).unwrap();
        assert_eq!(same.data(), pos.data());

        let constant = Tensor::filled(vec![64, 3], 0.25).unwrap();
        let out = interpolate_pos_embed(&constant, 5).unwrap();
        assert_eq!(out.shape(), &[25, 3]);
        for v in out.data() {
            assert!((v - 0.25).abs() < 1e-6);
        }
    }

    #[test]
    fn pos_interpolation_center_value() {
        // per-dim grid {0,1;2,3}: the 3x3 center lands on the mean 1.5
        let pos = Tensor::new(vec![4, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let out = interpolate_pos_embed(&pos, 3).unwrap();
        assert_eq!(out.shape(), &[9, 1]);
        assert!((out.data()[4] - 1.5).abs() < 1e-6);
    }

    #[test]
    fn non_square_pos_grid_is_an_error() {
        let pos = Tensor::zeros(vec![6, 4]);
        assert!(matches!(
            interpolate_pos_embed(&pos, 3),
            Err(VitError::NonSquareGrid { .. })
        ));
    }

    #[test]
    fn patch_count_matches_grid() {
        // 512/16 = 32 per side => 1024 patches, 1025 attention rows
        let (m, gh, gw) = extract_patches(&Tensor::zeros(vec![1, 512, 512]), 16).unwrap();
        assert_eq!((gh, gw), (32, 32));
        assert_eq!(m.nrows(), 1024);
    }

    #[test]
    fn single_linear_layer_gradient_identity() {
        // y = W x with upstream g: dW = g xᵀ
        let mut graph = Graph::new();
        let w = Matrix::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f64 * 0.1);
        let x = Matrix::from_shape_fn((1, 4), |(_, j)| j as f64 + 1.0);
        let wid = graph.param("w", Arc::new(w.clone()), true);
        let xid = graph.input(x.clone());
        let y = graph.matmul_nt(xid, wid);
        let g = Matrix::from_shape_fn((1, 3), |(_, j)| (j as f64) - 1.0);
        let grads = graph.backward(&[(y, g.clone())]);
        let expect = g.t().dot(&x); // [3,1]x[1,4]
        let diff = (&grads["w"] - &expect).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }

    #[test]
    fn frozen_layer_gets_no_gradient_entries() {
        let config = toy_config();
        let mut rng = stream_rng(12, Stream::Init, &[]);
        let params = init_params(&config, &mut rng);
        let image = toy_image(13, 8, 8);
        let trainable: BTreeSet<String> = params
            .keys()
            .filter(|k| !k.starts_with("blocks.0."))
            .cloned()
            .collect();
        let pass =
            forward_recorded(&params, &config, &image, &ForwardOptions::default(), &trainable)
                .unwrap();
        let d_cls = Tensor::filled(vec![16], 1.0).unwrap();
        let d_patches = Tensor::zeros(vec![4, 16]);
        let grads = pass.backward(&d_cls, &d_patches, &params);
        assert!(!grads.is_empty());
        assert!(grads.keys().all(|k| !k.starts_with("blocks.0.")));
        assert!(grads.keys().any(|k| k.starts_with("blocks.1.")));
    }
}
