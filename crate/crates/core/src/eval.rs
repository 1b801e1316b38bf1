//! Embedding extraction, k-nearest-neighbor classification, linear probing,
//! and classification metrics.

use thiserror::Error;

use crate::tensor::Tensor;
use crate::vit::{forward, ForwardOptions, ParameterSet, ViTConfig, VitError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty training set")]
    EmptyTrain,
    #[error("k = {k} exceeds the {n} usable training points")]
    KTooLarge { k: usize, n: usize },
    #[error("linear probe needs at least two classes in the training set")]
    SingleClass,
    #[error("embedding dims differ: train {train}, test {test}")]
    DimMismatch { train: usize, test: usize },
    #[error("empty confusion matrix")]
    EmptyMatrix,
    #[error("encoder error: {0}")]
    Vit(#[from] VitError),
}

/// CLS embeddings with labels and stable sample ids.
#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    /// [N, d]
    pub vectors: Tensor,
    pub labels: Vec<usize>,
    pub ids: Vec<String>,
}

impl EmbeddingSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.dim();
        &self.vectors.data()[i * d..(i + 1) * d]
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().copied().max().map_or(0, |m| m + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub method: String,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
}

/// One CLS vector per sample, in input order. Inputs are already-normalized
/// image tensors.
pub fn extract_embeddings(
    params: &ParameterSet,
    config: &ViTConfig,
    images: &[(Tensor, usize, String)],
) -> Result<EmbeddingSet, EvalError> {
    let d = config.embed_dim;
    let mut data = Vec::with_capacity(images.len() * d);
    let mut labels = Vec::with_capacity(images.len());
    let mut ids = Vec::with_capacity(images.len());
    for (img, label, id) in images {
        let out = forward(params, config, img, &ForwardOptions::default())?;
        data.extend_from_slice(out.cls.data());
        labels.push(*label);
        ids.push(id.clone());
    }
    Ok(EmbeddingSet {
        vectors: Tensor::new(vec![images.len(), d], data).expect("finite embeddings"),
        labels,
        ids,
    })
}

fn cosine_distance(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        dot += *x as f64 * *y as f64;
        na += (*x as f64) * (*x as f64);
        nb += (*y as f64) * (*y as f64);
    }
    let denom = (na.sqrt() * nb.sqrt()).max(1e-12);
    1.0 - dot / denom
}

/// Majority vote among the k nearest neighbors under cosine distance.
/// Vote ties break by smaller summed distance, then lower class index;
/// queries never see train rows that share their id.
pub fn knn_classify(
    train: &EmbeddingSet,
    test: &EmbeddingSet,
    k: usize,
) -> Result<EvalReport, EvalError> {
    if train.is_empty() {
        return Err(EvalError::EmptyTrain);
    }
    if train.dim() != test.dim() {
        return Err(EvalError::DimMismatch {
            train: train.dim(),
            test: test.dim(),
        });
    }
    let classes = train.num_classes().max(test.num_classes());
    let mut confusion = vec![vec![0usize; classes]; classes];
    for qi in 0..test.len() {
        let q = test.row(qi);
        let mut dists: Vec<(f64, usize)> = (0..train.len())
            .filter(|&ti| train.ids[ti] != test.ids[qi])
            .map(|ti| (cosine_distance(q, train.row(ti)), ti))
            .collect();
        if k == 0 || k > dists.len() {
            return Err(EvalError::KTooLarge { k, n: dists.len() });
        }
        dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let mut votes = vec![0usize; classes];
        let mut summed = vec![0.0f64; classes];
        for &(d, ti) in dists.iter().take(k) {
            let c = train.labels[ti];
            votes[c] += 1;
            summed[c] += d;
        }
        let best = (0..classes)
            .filter(|&c| votes[c] > 0)
            .min_by(|&a, &b| {
                votes[b]
                    .cmp(&votes[a])
                    .then(summed[a].partial_cmp(&summed[b]).unwrap())
                    .then(a.cmp(&b))
            })
            .expect("k >= 1 neighbor voted");
        confusion[test.labels[qi]][best] += 1;
    }
    classification_metrics("knn", confusion)
}

#[derive(Debug, Clone, Copy)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            lr: 0.1,
            weight_decay: 1e-4,
        }
    }
}

/// Multinomial logistic regression on frozen embeddings: softmax
/// cross-entropy, full-batch gradient descent with a cosine-decayed step.
pub fn linear_probe(
    train: &EmbeddingSet,
    test: &EmbeddingSet,
    cfg: &ProbeConfig,
) -> Result<EvalReport, EvalError> {
    if train.is_empty() {
        return Err(EvalError::EmptyTrain);
    }
    if train.dim() != test.dim() {
        return Err(EvalError::DimMismatch {
            train: train.dim(),
            test: test.dim(),
        });
    }
    let classes = train.num_classes().max(test.num_classes());
    {
        let distinct: std::collections::BTreeSet<usize> = train.labels.iter().copied().collect();
        if distinct.len() < 2 {
            return Err(EvalError::SingleClass);
        }
    }
    let d = train.dim();
    let n = train.len();
    let mut w = vec![0.0f64; classes * d];
    let mut b = vec![0.0f64; classes];

    let logits_of = |w: &[f64], b: &[f64], x: &[f32]| -> Vec<f64> {
        (0..classes)
            .map(|c| {
                b[c] + x
                    .iter()
                    .enumerate()
                    .map(|(j, &v)| w[c * d + j] * v as f64)
                    .sum::<f64>()
            })
            .collect()
    };

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr * (1.0 + (std::f64::consts::PI * epoch as f64 / cfg.epochs as f64).cos())
            / 2.0;
        let mut gw = vec![0.0f64; classes * d];
        let mut gb = vec![0.0f64; classes];
        for i in 0..n {
            let x = train.row(i);
            let logits = logits_of(&w, &b, x);
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for c in 0..classes {
                let p = exps[c] / sum;
                let err = p - if c == train.labels[i] { 1.0 } else { 0.0 };
                gb[c] += err;
                for (j, &v) in x.iter().enumerate() {
                    gw[c * d + j] += err * v as f64;
                }
            }
        }
        let inv_n = 1.0 / n as f64;
        for c in 0..classes {
            b[c] -= lr * gb[c] * inv_n;
            for j in 0..d {
                let g = gw[c * d + j] * inv_n + cfg.weight_decay * w[c * d + j];
                w[c * d + j] -= lr * g;
            }
        }
    }

    let mut confusion = vec![vec![0usize; classes]; classes];
    for i in 0..test.len() {
        let logits = logits_of(&w, &b, test.row(i));
        let pred = logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
            .unwrap()
            .0;
        confusion[test.labels[i]][pred] += 1;
    }
    classification_metrics("linear", confusion)
}

/// Accuracy, macro precision and macro F1 from a confusion matrix
/// (`confusion[true][predicted]`); 0/0 ratios count as 0.
pub fn classification_metrics(
    method: &str,
    confusion: Vec<Vec<usize>>,
) -> Result<EvalReport, EvalError> {
    let classes = confusion.len();
    let total: usize = confusion.iter().flatten().sum();
    if classes == 0 || total == 0 {
        return Err(EvalError::EmptyMatrix);
    }
    let trace: usize = (0..classes).map(|c| confusion[c][c]).sum();
    let mut per_class = Vec::with_capacity(classes);
    for c in 0..classes {
        let tp = confusion[c][c];
        let predicted: usize = (0..classes).map(|i| confusion[i][c]).sum();
        let actual: usize = confusion[c].iter().sum();
        let precision = if predicted > 0 { tp as f64 / predicted as f64 } else { 0.0 };
        let recall = if actual > 0 { tp as f64 / actual as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        per_class.push(ClassMetrics {
            precision,
            recall,
            f1,
            support: actual,
        });
    }
    Ok(EvalReport {
        method: method.to_string(),
        accuracy: trace as f64 / total as f64,
        macro_precision: per_class.iter().map(|m| m.precision).sum::<f64>() / classes as f64,
        macro_f1: per_class.iter().map(|m| m.f1).sum::<f64>() / classes as f64,
        per_class,
        confusion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn embed(vectors: Vec<Vec<f32>>, labels: Vec<usize>) -> EmbeddingSet {
        let n = vectors.len();
        let d = vectors[0].len();
        let data: Vec<f32> = vectors.into_iter().flatten().collect();
        EmbeddingSet {
            vectors: Tensor::new(vec![n, d], data).unwrap(),
            labels,
            ids: (0..n).map(|i| format!("s{i}")).collect(),
        }
    }

    /// Two Gaussian blobs, sigma 0.1, centers `sep` sigma apart.
    fn blobs_sep(n_per: usize, seed: u64, sep: f32) -> (EmbeddingSet, EmbeddingSet) {
        let mut rng = stream_rng(seed, Stream::Eval, &[]);
        let normal = Normal::new(0.0f32, 0.1).unwrap();
        let mut make = |offset: f32, label: usize, start: usize| {
            (0..n_per)
                .map(|i| {
                    let v = vec![
                        offset + normal.sample(&mut rng),
                        1.0 + normal.sample(&mut rng),
                    ];
                    (v, label, format!("b{}", start + i))
                })
                .collect::<Vec<_>>()
        };
        let mut all = make(0.0, 0, 0);
        all.extend(make(0.1 * sep, 1, n_per));
        let (mut tr_v, mut tr_l, mut tr_i) = (Vec::new(), Vec::new(), Vec::new());
        let (mut te_v, mut te_l, mut te_i) = (Vec::new(), Vec::new(), Vec::new());
        for (i, (v, l, id)) in all.into_iter().enumerate() {
            if i % 2 == 0 {
                tr_v.push(v);
                tr_l.push(l);
                tr_i.push(id);
            } else {
                te_v.push(v);
                te_l.push(l);
                te_i.push(id);
            }
        }
        let mut train = embed(tr_v, tr_l);
        train.ids = tr_i;
        let mut test = embed(te_v, te_l);
        test.ids = te_i;
        (train, test)
    }

    /// Centers 4 sigma apart (the kNN oracle geometry).
    fn blobs(n_per: usize, seed: u64) -> (EmbeddingSet, EmbeddingSet) {
        blobs_sep(n_per, seed, 4.0)
    }

    #[test]
    fn knn_separates_blobs_perfectly() {
        let (train, test) = blobs(40, 1);
        let report = knn_classify(&train, &test, 5).unwrap();
        assert_eq!(report.accuracy, 1.0);
    }

    #[test]
    fn knn_nearest_identity() {
        let train = embed(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0, 1]);
        let test = {
            let mut t = embed(vec![vec![0.0, 1.0]], vec![1]);
            t.ids = vec!["query".into()];
            t
        };
        let report = knn_classify(&train, &test, 1).unwrap();
        assert_eq!(report.accuracy, 1.0);
    }

    #[test]
    fn knn_tie_breaks_by_summed_distance() {
        // three neighbors with distinct labels at distances 0.1 < 0.2 < 0.3:
        // every class has one vote; the 0.1 neighbor's class wins
        let unit = |angle: f64| vec![angle.cos() as f32, angle.sin() as f32];
        let train = embed(
            vec![
                unit(0.9f64.acos()), // distance 0.1
                unit(0.8f64.acos()), // distance 0.2
                unit(0.7f64.acos()), // distance 0.3
            ],
            vec![2, 1, 0],
        );
        let test = {
            let mut t = embed(vec![vec![1.0, 0.0]], vec![2]);
            t.ids = vec!["q".into()];
            t
        };
        let report = knn_classify(&train, &test, 3).unwrap();
        // predicted class 2 == true label: on-diagonal
        assert_eq!(report.confusion[2][2], 1);
    }

    #[test]
    fn knn_excludes_self_when_sets_share_ids() {
        // two points; self-match would be distance 0, exclusion forces the
        // other point's label
        let a = embed(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0, 1]);
        let report = knn_classify(&a, &a, 1).unwrap();
        // every query picks the other class: accuracy 0
        assert_eq!(report.accuracy, 0.0);
    }

    #[test]
    fn knn_is_invariant_to_train_order() {
        let (train, test) = blobs(20, 3);
        let report_a = knn_classify(&train, &test, 5).unwrap();
        // reverse the training rows
        let d = train.dim();
        let mut rev_data = Vec::new();
        for i in (0..train.len()).rev() {
            rev_data.extend_from_slice(&train.vectors.data()[i * d..(i + 1) * d]);
        }
        let reversed = EmbeddingSet {
            vectors: Tensor::new(vec![train.len(), d], rev_data).unwrap(),
            labels: train.labels.iter().rev().copied().collect(),
            ids: train.ids.iter().rev().cloned().collect(),
        };
        let report_b = knn_classify(&reversed, &test, 5).unwrap();
        assert_eq!(report_a.confusion, report_b.confusion);
    }

    #[test]
    fn linear_probe_separable_and_memorization() {
        // wider separation keeps the sampled blobs linearly separable
        let (train, test) = blobs_sep(30, 4, 8.0);
        let cfg = ProbeConfig::default();
        let report = linear_probe(&train, &test, &cfg).unwrap();
        assert_eq!(report.accuracy, 1.0);
        let self_report = linear_probe(&train, &train, &cfg).unwrap();
        assert_eq!(self_report.accuracy, 1.0);
    }

    #[test]
    fn linear_probe_chance_level_on_shuffled_labels() {
        let mut rng = stream_rng(5, Stream::Eval, &[]);
        let d = 16;
        let make = |rng: &mut rand_chacha::ChaCha8Rng, n: usize, start: usize| {
            let vectors: Vec<Vec<f32>> = (0..n)
                .map(|_| (0..d).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
                .collect();
            let labels: Vec<usize> = (0..n).map(|i| i % 10).collect();
            let mut e = embed(vectors, labels);
            e.ids = (0..n).map(|i| format!("r{}", start + i)).collect();
            e
        };
        let train = make(&mut rng, 500, 0);
        let test = make(&mut rng, 500, 500);
        let report = linear_probe(&train, &test, &ProbeConfig::default()).unwrap();
        assert!(
            (report.accuracy - 0.1).abs() <= 0.05,
            "accuracy {}",
            report.accuracy
        );
    }

    #[test]
    fn linear_probe_rejects_single_class() {
        let train = embed(vec![vec![1.0], vec![2.0]], vec![0, 0]);
        assert!(matches!(
            linear_probe(&train, &train, &ProbeConfig::default()),
            Err(EvalError::SingleClass)
        ));
    }

    #[test]
    fn metrics_identity_and_symmetric() {
        let id = classification_metrics("knn", vec![vec![3, 0], vec![0, 2]]).unwrap();
        assert_eq!(id.accuracy, 1.0);
        assert_eq!(id.macro_f1, 1.0);

        let sym = classification_metrics("knn", vec![vec![1, 1], vec![1, 1]]).unwrap();
        assert_eq!(sym.accuracy, 0.5);
        assert_eq!(sym.per_class[0].precision, 0.5);
        assert_eq!(sym.per_class[1].precision, 0.5);
    }

    #[test]
    fn metrics_hand_arithmetic() {
        let r = classification_metrics("knn", vec![vec![5, 0], vec![2, 3]]).unwrap();
        assert!((r.accuracy - 0.8).abs() < 1e-12);
        assert!((r.per_class[0].precision - 5.0 / 7.0).abs() < 1e-12);
        assert!((r.per_class[1].precision - 1.0).abs() < 1e-12);
        assert!((r.macro_precision - (5.0 / 7.0 + 1.0) / 2.0).abs() < 1e-12);
        // macro precision ~ 0.857
        assert!((r.macro_precision - 0.857).abs() < 1e-3);
    }

    #[test]
    fn metrics_zero_over_zero_is_zero() {
        // class 1 never predicted and never present
        let r = classification_metrics("knn", vec![vec![2, 0], vec![0, 0]]).unwrap();
        assert_eq!(r.per_class[1].precision, 0.0);
        assert_eq!(r.per_class[1].f1, 0.0);
    }

    #[test]
    fn metrics_monotonic_in_correct_predictions() {
        let base = classification_metrics("knn", vec![vec![5, 5], vec![0, 10]]).unwrap();
        let more = classification_metrics("knn", vec![vec![6, 5], vec![0, 10]]).unwrap();
        assert!(more.accuracy > base.accuracy);
    }

    #[test]
    fn embeddings_deterministic_and_ordered() {
        use crate::vit::{init_params, ViTConfig};
        let config = ViTConfig {
            patch_size: 4,
            embed_dim: 16,
            depth: 1,
            num_heads: 2,
            mlp_ratio: 2.0,
            in_channels: 1,
            base_grid: 2,
        };
        let mut rng = stream_rng(6, Stream::Init, &[]);
        let params = init_params(&config, &mut rng);
        let img = Tensor::filled(vec![1, 8, 8], 0.3).unwrap();
        let inputs = vec![
            (img.clone(), 0, "a".to_string()),
            (img.clone(), 1, "b".to_string()),
        ];
        let e = extract_embeddings(&params, &config, &inputs).unwrap();
        assert_eq!(e.vectors.shape(), &[2, 16]);
        // duplicate image: identical rows
        assert_eq!(e.row(0), e.row(1));
        assert_eq!(e.ids, vec!["a", "b"]);
    }
}
