//! DINO projection head: 3-layer MLP, L2-normalized bottleneck, and a
//! weight-normalized final projection to the prototype logits.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;
use crate::vit::{
    matrix_to_tensor, tensor_to_matrix, DenseParams, ParameterSet, VitError, L2_EPS,
};

/// Guard for the rowwise weight normalization of the final projection.
const WEIGHT_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct DinoHeadConfig {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub bottleneck_dim: usize,
    pub out_dim: usize,
    /// When true the final-layer weight-norm gain is fixed at 1; when false
    /// the gain is trainable.
    pub norm_last_layer: bool,
}

impl DinoHeadConfig {
    pub fn desk(in_dim: usize, out_dim: usize, norm_last_layer: bool) -> Self {
        Self {
            in_dim,
            hidden_dim: 256,
            bottleneck_dim: 64,
            out_dim,
            norm_last_layer,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DinoHead {
    pub config: DinoHeadConfig,
    pub params: ParameterSet,
}

impl DinoHead {
    pub fn init(config: DinoHeadConfig, rng: &mut ChaCha8Rng) -> Self {
        use rand_distr::{Distribution, Normal};
        let normal = Normal::new(0.0f32, 0.02).unwrap();
        let mut sample = |shape: Vec<usize>| {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| normal.sample(rng)).collect();
            Tensor::new(shape, data).unwrap()
        };
        let mut p = ParameterSet::new();
        p.insert("mlp1.weight".into(), sample(vec![config.hidden_dim, config.in_dim]));
        p.insert("mlp1.bias".into(), Tensor::zeros(vec![config.hidden_dim]));
        p.insert("mlp2.weight".into(), sample(vec![config.hidden_dim, config.hidden_dim]));
        p.insert("mlp2.bias".into(), Tensor::zeros(vec![config.hidden_dim]));
        p.insert(
            "mlp3.weight".into(),
            sample(vec![config.bottleneck_dim, config.hidden_dim]),
        );
        p.insert("mlp3.bias".into(), Tensor::zeros(vec![config.bottleneck_dim]));
        p.insert("last.v".into(), sample(vec![config.out_dim, config.bottleneck_dim]));
        // gain column vector; fixed at 1 under norm_last_layer
        p.insert(
            "last.g".into(),
            Tensor::filled(vec![config.out_dim, 1], 1.0).unwrap(),
        );
        Self { config, params: p }
    }

    pub fn widen(&self) -> DenseParams {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), Arc::new(tensor_to_matrix(v))))
            .collect()
    }

    /// Trainable tensor names (unprefixed). The weight-norm gain trains only
    /// when `norm_last_layer` is false.
    pub fn trainable_names(&self) -> BTreeSet<String> {
        self.params
            .keys()
            .filter(|k| k.as_str() != "last.g" || !self.config.norm_last_layer)
            .cloned()
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }
}

/// Builds the head on top of a [B, in_dim] feature node. Parameter names are
/// looked up and registered as `{prefix}{name}`, so several heads can share
/// one tape and one flat tensor map.
pub fn build_head(
    graph: &mut Graph,
    config: &DinoHeadConfig,
    dense: &DenseParams,
    prefix: &str,
    features: NodeId,
    trainable: &BTreeSet<String>,
) -> Result<NodeId, VitError> {
    if graph.value(features).ncols() != config.in_dim {
        return Err(VitError::FeatureDim {
            actual: graph.value(features).ncols(),
            expected: config.in_dim,
        });
    }
    let get = |graph: &mut Graph, name: &str| -> Result<NodeId, VitError> {
        let qualified = format!("{prefix}{name}");
        let m = dense
            .get(&qualified)
            .ok_or_else(|| VitError::MissingParam(qualified.clone()))?;
        Ok(graph.param(&qualified, Arc::clone(m), trainable.contains(&qualified)))
    };
    let w1 = get(graph, "mlp1.weight")?;
    let b1 = get(graph, "mlp1.bias")?;
    let w2 = get(graph, "mlp2.weight")?;
    let b2 = get(graph, "mlp2.bias")?;
    let w3 = get(graph, "mlp3.weight")?;
    let b3 = get(graph, "mlp3.bias")?;
    let v = get(graph, "last.v")?;
    let g = get(graph, "last.g")?;

    let h1 = graph.matmul_nt(features, w1);
    let h1 = graph.add_bias_row(h1, b1);
    let h1 = graph.gelu(h1);
    let h2 = graph.matmul_nt(h1, w2);
    let h2 = graph.add_bias_row(h2, b2);
    let h2 = graph.gelu(h2);
    let z = graph.matmul_nt(h2, w3);
    let z = graph.add_bias_row(z, b3);
    let zn = graph.l2_normalize_rows(z, L2_EPS);
    // weight-normalized projection: logits = zn (g ⊙ v/||v||)ᵀ
    let v_hat = graph.l2_normalize_rows(v, WEIGHT_NORM_EPS);
    let w_last = graph.scale_rows_by(v_hat, g);
    Ok(graph.matmul_nt(zn, w_last))
}

/// Single-feature convenience wrapper: MLP, L2-normalized bottleneck,
/// weight-normalized projection to `out_dim` logits.
pub fn head_forward(head: &DinoHead, feature: &Tensor) -> Result<Tensor, VitError> {
    if feature.shape() != [head.config.in_dim] {
        return Err(VitError::FeatureDim {
            actual: feature.numel(),
            expected: head.config.in_dim,
        });
    }
    let dense = head.widen();
    let mut graph = Graph::new();
    let f = graph.input(tensor_to_matrix(feature));
    let logits = build_head(&mut graph, &head.config, &dense, "", f, &BTreeSet::new())?;
    Ok(matrix_to_tensor(graph.value(logits), &[head.config.out_dim]))
}

/// Last two stages only (L2 normalize + weight-normalized projection); used
/// to probe normalization invariance of the bottleneck.
pub fn project_bottleneck(head: &DinoHead, z: &[f32]) -> Vec<f32> {
    let mut graph = Graph::new();
    let dense = head.widen();
    let zin = graph.input(
        crate::graph::Matrix::from_shape_vec(
            (1, z.len()),
            z.iter().map(|&v| v as f64).collect(),
        )
        .unwrap(),
    );
    let zn = graph.l2_normalize_rows(zin, L2_EPS);
    let v = graph.param("last.v", Arc::clone(&dense["last.v"]), false);
    let g = graph.param("last.g", Arc::clone(&dense["last.g"]), false);
    let v_hat = graph.l2_normalize_rows(v, WEIGHT_NORM_EPS);
    let w_last = graph.scale_rows_by(v_hat, g);
    let out = graph.matmul_nt(zn, w_last);
    graph.value(out).iter().map(|&v| v as f32).collect()
}
