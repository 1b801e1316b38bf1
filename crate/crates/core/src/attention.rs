//! CLS-attention extraction, PCA reduction over heads, dual-threshold
//! cluster detection, and detection metrics.

use thiserror::Error;

use crate::image::RoiMask;
use crate::tensor::Tensor;
use crate::vit::AttentionStack;

#[derive(Debug, Error)]
pub enum AttentionError {
    #[error("layer index {layer} out of range for {layers} layers")]
    BadLayer { layer: usize, layers: usize },
    #[error("{tokens} patch tokens do not form a square grid")]
    NonSquare { tokens: usize },
    #[error("n_components {n} must lie in 1..={h}")]
    BadComponents { n: usize, h: usize },
    #[error("thresholds must satisfy 0 <= t_low <= t_high <= 1, got ({0}, {1})")]
    BadThresholds(f32, f32),
    #[error("detection grid {dg}x{dg} does not match ground-truth grid {gg}x{gg}")]
    GridMismatch { dg: usize, gg: usize },
}

/// One map per head (final or chosen layer): attention from the CLS token to
/// every image patch, reshaped to the patch grid.
#[derive(Debug, Clone)]
pub struct ClsAttentionMaps {
    /// Each map has shape [P, P].
    pub maps: Vec<Tensor>,
    pub grid: usize,
}

/// Per head, row 0 of the attention matrix with the CLS column dropped,
/// reshaped to P x P.
pub fn cls_attention(stack: &AttentionStack, layer: usize) -> Result<ClsAttentionMaps, AttentionError> {
    if layer >= stack.num_layers() {
        return Err(AttentionError::BadLayer {
            layer,
            layers: stack.num_layers(),
        });
    }
    let heads = &stack.layers[layer];
    let n = heads[0].shape()[0];
    let tokens = n - 1;
    let p = (tokens as f64).sqrt().round() as usize;
    if p * p != tokens {
        return Err(AttentionError::NonSquare { tokens });
    }
    let maps = heads
        .iter()
        .map(|a| {
            // row 0, columns 1..n
            let row: Vec<f32> = a.data()[1..n].to_vec();
            Tensor::new(vec![p, p], row).expect("attention weights are finite")
        })
        .collect();
    Ok(ClsAttentionMaps { maps, grid: p })
}

/// PCA over heads: each patch is a point with H features.
#[derive(Debug, Clone)]
pub struct PcaReduced {
    /// `n_components` maps of shape [P, P], each min-max normalized to [0, 1].
    pub components: Vec<Tensor>,
    pub explained_variance_ratio: Vec<f64>,
    /// Set when the input maps had zero variance; components are all zeros.
    pub degenerate: bool,
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// (eigenvalues, eigenvectors as columns), descending by eigenvalue.
fn symmetric_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v = vec![vec![0.0; n]; n];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += a[i][j] * a[i][j];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k][p];
                    let vkq = v[k][q];
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut pairs: Vec<(f64, Vec<f64>)> = (0..n)
        .map(|j| (a[j][j], (0..n).map(|i| v[i][j]).collect()))
        .collect();
    pairs.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap());
    let values = pairs.iter().map(|p| p.0).collect();
    let vectors = pairs.into_iter().map(|p| p.1).collect();
    (values, vectors)
}

/// Reduces H per-head maps to `n_components` principal-component maps.
/// Component signs are fixed so the largest-magnitude loading coefficient is
/// positive; outputs are min-max normalized per component.
pub fn pca_reduce(maps: &ClsAttentionMaps, n_components: usize) -> Result<PcaReduced, AttentionError> {
    let h = maps.maps.len();
    if n_components == 0 || n_components > h {
        return Err(AttentionError::BadComponents { n: n_components, h });
    }
    let p = maps.grid;
    let npoints = p * p;
    // center each head's map
    let mut centered = vec![vec![0.0f64; h]; npoints];
    let mut total_var = 0.0;
    for (hi, map) in maps.maps.iter().enumerate() {
        let mean: f64 = map.data().iter().map(|&v| v as f64).sum::<f64>() / npoints as f64;
        for (pi, &v) in map.data().iter().enumerate() {
            centered[pi][hi] = v as f64 - mean;
        }
    }
    // covariance over heads
    let denom = (npoints.max(2) - 1) as f64;
    let mut cov = vec![vec![0.0f64; h]; h];
    for row in &centered {
        for i in 0..h {
            for j in i..h {
                cov[i][j] += row[i] * row[j] / denom;
            }
        }
    }
    for i in 0..h {
        for j in 0..i {
            cov[i][j] = cov[j][i];
        }
        total_var += cov[i][i];
    }

    if total_var <= 1e-30 {
        return Ok(PcaReduced {
            components: vec![Tensor::zeros(vec![p, p]); n_components],
            explained_variance_ratio: vec![0.0; n_components],
            degenerate: true,
        });
    }

    let (values, vectors) = symmetric_eigen(cov);
    let mut components = Vec::with_capacity(n_components);
    let mut evr = Vec::with_capacity(n_components);
    for c in 0..n_components {
        let mut loading = vectors[c].clone();
        // sign convention: largest-magnitude coefficient positive
        let lead = loading
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap().then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap();
        if loading[lead] < 0.0 {
            for w in &mut loading {
                *w = -*w;
            }
        }
        let scores: Vec<f64> = centered
            .iter()
            .map(|row| row.iter().zip(&loading).map(|(a, b)| a * b).sum())
            .collect();
        let lo = scores.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = (hi - lo).max(1e-30);
        let data: Vec<f32> = scores.iter().map(|&s| ((s - lo) / span) as f32).collect();
        components.push(Tensor::new(vec![p, p], data).expect("finite scores"));
        evr.push(values[c].max(0.0) / total_var);
    }
    Ok(PcaReduced {
        components,
        explained_variance_ratio: evr,
        degenerate: false,
    })
}

#[derive(Debug, Clone)]
pub struct Cluster {
    /// Patch indices (row-major) in the cluster.
    pub patches: Vec<usize>,
    /// Value-weighted mean (row, col).
    pub centroid: (f64, f64),
    pub peak: f32,
}

#[derive(Debug, Clone)]
pub struct DetectionResult {
    pub clusters: Vec<Cluster>,
    pub grid: usize,
    pub t_low: f32,
    pub t_high: f32,
}

/// Hysteresis clustering: seeds are patches >= t_high, clusters grow by
/// 4-connectivity over patches >= t_low, and clusters without a seed are
/// discarded.
pub fn detect_regions(map: &Tensor, t_low: f32, t_high: f32) -> Result<DetectionResult, AttentionError> {
    if !(0.0..=1.0).contains(&t_low) || t_low > t_high || t_high > 1.0 {
        return Err(AttentionError::BadThresholds(t_low, t_high));
    }
    let p = map.shape()[0];
    assert_eq!(map.shape(), &[p, p], "attention map must be square");
    let data = map.data();
    let mut visited = vec![false; p * p];
    let mut clusters = Vec::new();
    for start in 0..p * p {
        if visited[start] || data[start] < t_low {
            continue;
        }
        // flood the >= t_low component
        let mut queue = vec![start];
        visited[start] = true;
        let mut patches = Vec::new();
        let mut has_seed = false;
        while let Some(i) = queue.pop() {
            patches.push(i);
            if data[i] >= t_high {
                has_seed = true;
            }
            let (r, c) = (i / p, i % p);
            let mut push = |rr: usize, cc: usize, queue: &mut Vec<usize>| {
                let j = rr * p + cc;
                if !visited[j] && data[j] >= t_low {
                    visited[j] = true;
                    queue.push(j);
                }
            };
            if r > 0 {
                push(r - 1, c, &mut queue);
            }
            if r + 1 < p {
                push(r + 1, c, &mut queue);
            }
            if c > 0 {
                push(r, c - 1, &mut queue);
            }
            if c + 1 < p {
                push(r, c + 1, &mut queue);
            }
        }
        if !has_seed {
            continue;
        }
        patches.sort_unstable();
        let mut wsum = 0.0f64;
        let mut rsum = 0.0f64;
        let mut csum = 0.0f64;
        let mut peak = 0.0f32;
        for &i in &patches {
            let w = data[i] as f64;
            wsum += w;
            rsum += w * (i / p) as f64;
            csum += w * (i % p) as f64;
            peak = peak.max(data[i]);
        }
        clusters.push(Cluster {
            patches,
            centroid: (rsum / wsum, csum / wsum),
            peak,
        });
    }
    Ok(DetectionResult {
        clusters,
        grid: p,
        t_low,
        t_high,
    })
}

/// Any nonzero source pixel marks its patch positive.
pub fn downsample_roi_to_patches(roi: &RoiMask, patch: usize) -> RoiMask {
    let ph = roi.height / patch;
    let pw = roi.width / patch;
    let mut out = RoiMask::empty(ph, pw);
    for r in 0..roi.height.min(ph * patch) {
        for c in 0..roi.width.min(pw * patch) {
            if roi.get(r, c) {
                out.set(r / patch, c / patch, true);
            }
        }
    }
    out
}

/// 4-connected components of a patch-resolution ground-truth mask.
fn mask_components(mask: &RoiMask) -> Vec<Vec<usize>> {
    let (h, w) = (mask.height, mask.width);
    let mut visited = vec![false; h * w];
    let mut comps = Vec::new();
    for start in 0..h * w {
        if visited[start] || !mask.get(start / w, start % w) {
            continue;
        }
        let mut queue = vec![start];
        visited[start] = true;
        let mut comp = Vec::new();
        while let Some(i) = queue.pop() {
            comp.push(i);
            let (r, c) = (i / w, i % w);
            let mut push = |rr: usize, cc: usize, queue: &mut Vec<usize>| {
                let j = rr * w + cc;
                if !visited[j] && mask.get(rr, cc) {
                    visited[j] = true;
                    queue.push(j);
                }
            };
            if r > 0 {
                push(r - 1, c, &mut queue);
            }
            if r + 1 < h {
                push(r + 1, c, &mut queue);
            }
            if c > 0 {
                push(r, c - 1, &mut queue);
            }
            if c + 1 < w {
                push(r, c + 1, &mut queue);
            }
        }
        comp.sort_unstable();
        comps.push(comp);
    }
    comps
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionScore {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub micro_precision: f64,
    pub micro_recall: f64,
    pub micro_f1: f64,
    /// Per-image means.
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// Mean over true positives of |cluster ∩ component| / |cluster|.
    pub localization: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den > 0 {
        num as f64 / den as f64
    } else {
        0.0
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Greedy overlap matching per image: a cluster is a true positive when it
/// overlaps a not-yet-matched ground-truth component; one cluster per
/// component. Unmatched clusters are false positives, unmatched components
/// false negatives.
pub fn score_detections(
    per_image: &[(DetectionResult, RoiMask)],
) -> Result<DetectionScore, AttentionError> {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    let mut loc_sum = 0.0f64;
    let mut macro_p = 0.0f64;
    let mut macro_r = 0.0f64;
    let mut macro_f = 0.0f64;
    for (det, mask) in per_image {
        if mask.height != det.grid || mask.width != det.grid {
            return Err(AttentionError::GridMismatch {
                dg: det.grid,
                gg: mask.height,
            });
        }
        let comps = mask_components(mask);
        // overlap counts for every (cluster, component) pair
        let mut overlaps: Vec<(usize, usize, usize)> = Vec::new();
        for (ci, cluster) in det.clusters.iter().enumerate() {
            for (gi, comp) in comps.iter().enumerate() {
                let inter = cluster
                    .patches
                    .iter()
                    .filter(|p| comp.binary_search(p).is_ok())
                    .count();
                if inter > 0 {
                    overlaps.push((ci, gi, inter));
                }
            }
        }
        // greedy by overlap, ties broken by cluster index then component index
        overlaps.sort_by(|a, b| b.2.cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
        let mut cluster_used = vec![false; det.clusters.len()];
        let mut comp_used = vec![false; comps.len()];
        let mut img_tp = 0usize;
        for (ci, gi, inter) in overlaps {
            if cluster_used[ci] || comp_used[gi] {
                continue;
            }
            cluster_used[ci] = true;
            comp_used[gi] = true;
            img_tp += 1;
            loc_sum += inter as f64 / det.clusters[ci].patches.len() as f64;
        }
        let img_fp = cluster_used.iter().filter(|&&u| !u).count();
        let img_fn = comp_used.iter().filter(|&&u| !u).count();
        tp += img_tp;
        fp += img_fp;
        fn_ += img_fn;
        let p = ratio(img_tp, img_tp + img_fp);
        let r = ratio(img_tp, img_tp + img_fn);
        macro_p += p;
        macro_r += r;
        macro_f += f1(p, r);
    }
    let n_images = per_image.len().max(1) as f64;
    let micro_p = ratio(tp, tp + fp);
    let micro_r = ratio(tp, tp + fn_);
    Ok(DetectionScore {
        tp,
        fp,
        fn_,
        micro_precision: micro_p,
        micro_recall: micro_r,
        micro_f1: f1(micro_p, micro_r),
        macro_precision: macro_p / n_images,
        macro_recall: macro_r / n_images,
        macro_f1: macro_f / n_images,
        localization: if tp > 0 { loc_sum / tp as f64 } else { 0.0 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stack_with_cls_row(heads: Vec<Vec<f32>>, n: usize) -> AttentionStack {
        // build layer 0 attention matrices with the given CLS row; other rows
        // uniform
        let maps = heads
            .into_iter()
            .map(|cls_row| {
                assert_eq!(cls_row.len(), n);
                let mut data = vec![1.0 / n as f32; n * n];
                data[..n].copy_from_slice(&cls_row);
                Tensor::new(vec![n, n], data).unwrap()
            })
            .collect();
        AttentionStack { layers: vec![maps] }
    }

    #[test]
    fn cls_maps_have_patch_grid_shape() {
        // 4 patch tokens + CLS: 2x2 grid
        let n = 5;
        let mut cls = vec![0.0f32; n];
        cls[0] = 0.2;
        for (i, v) in cls.iter_mut().enumerate().skip(1) {
            *v = i as f32 * 0.05;
        }
        let stack = stack_with_cls_row(vec![cls; 3], n);
        let maps = cls_attention(&stack, 0).unwrap();
        assert_eq!(maps.maps.len(), 3);
        assert_eq!(maps.grid, 2);
        assert_eq!(maps.maps[0].shape(), &[2, 2]);
        // CLS column dropped: first entry is attention to patch 1
        assert!((maps.maps[0].data()[0] - 0.05).abs() < 1e-7);

        assert!(matches!(
            cls_attention(&stack, 1),
            Err(AttentionError::BadLayer { .. })
        ));
    }

    #[test]
    fn uniform_attention_gives_uniform_maps() {
        let n = 17; // 16 patches
        let stack = stack_with_cls_row(vec![vec![1.0 / n as f32; n]; 2], n);
        let maps = cls_attention(&stack, 0).unwrap();
        for v in maps.maps[0].data() {
            assert!((v - 1.0 / n as f32).abs() < 1e-7);
        }
    }

    #[test]
    fn pca_collinear_case() {
        // map2 = 2 * map1: one component explains all variance
        let m1: Vec<f32> = (0..16).map(|i| i as f32 / 16.0).collect();
        let m2: Vec<f32> = m1.iter().map(|v| v * 2.0).collect();
        let maps = ClsAttentionMaps {
            maps: vec![
                Tensor::new(vec![4, 4], m1.clone()).unwrap(),
                Tensor::new(vec![4, 4], m2).unwrap(),
            ],
            grid: 4,
        };
        let red = pca_reduce(&maps, 1).unwrap();
        assert!(!red.degenerate);
        assert!((red.explained_variance_ratio[0] - 1.0).abs() < 1e-9);
        // min-max normalized rescale of map1
        let mm: Vec<f32> = m1.iter().map(|v| v / m1[15]).collect();
        for (a, b) in red.components[0].data().iter().zip(&mm) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn pca_reconstruction_with_all_components() {
        let mut maps = Vec::new();
        for h in 0..4u32 {
            let data: Vec<f32> = (0..64)
                .map(|i| ((i as f32 * 0.37 + h as f32).sin() * 0.5 + 0.5) / 10.0)
                .collect();
            maps.push(Tensor::new(vec![8, 8], data).unwrap());
        }
        let maps = ClsAttentionMaps { maps, grid: 8 };
        let h = 4;
        let npoints = 64;
        // recompute centered data and raw (un-normalized) scores with the
        // same eigenvectors: reconstruction must match within 1e-5
        let mut centered = vec![vec![0.0f64; h]; npoints];
        for (hi, map) in maps.maps.iter().enumerate() {
            let mean: f64 = map.data().iter().map(|&v| v as f64).sum::<f64>() / npoints as f64;
            for (pi, &v) in map.data().iter().enumerate() {
                centered[pi][hi] = v as f64 - mean;
            }
        }
        let denom = (npoints - 1) as f64;
        let mut cov = vec![vec![0.0f64; h]; h];
        for row in &centered {
            for i in 0..h {
                for j in 0..h {
                    cov[i][j] += row[i] * row[j] / denom;
                }
            }
        }
        let (_vals, vecs) = super::symmetric_eigen(cov);
        for row in &centered {
            let mut recon = vec![0.0f64; h];
            for v in vecs.iter().take(h) {
                let score: f64 = row.iter().zip(v).map(|(a, b)| a * b).sum();
                for (i, r) in recon.iter_mut().enumerate() {
                    *r += score * v[i];
                }
            }
            for (a, b) in row.iter().zip(&recon) {
                assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn pca_random_maps_properties() {
        use crate::rng::{stream_rng, Stream};
        use rand::Rng;
        let mut rng = stream_rng(9, Stream::Eval, &[]);
        for trial in 0..10 {
            let maps: Vec<Tensor> = (0..6)
                .map(|_| {
                    let data: Vec<f32> = (0..25).map(|_| rng.gen_range(0.0..0.04)).collect();
                    Tensor::new(vec![5, 5], data).unwrap()
                })
                .collect();
            let maps = ClsAttentionMaps { maps, grid: 5 };
            let red = pca_reduce(&maps, 1).unwrap();
            let evr = red.explained_variance_ratio[0];
            assert!(evr > 0.0 && evr <= 1.0 + 1e-12, "trial {trial}: evr {evr}");
            for v in red.components[0].data() {
                assert!((0.0..=1.0).contains(v));
            }
        }
    }

    #[test]
    fn pca_constant_maps_are_degenerate() {
        let maps = ClsAttentionMaps {
            maps: vec![Tensor::filled(vec![4, 4], 0.01).unwrap(); 3],
            grid: 4,
        };
        let red = pca_reduce(&maps, 2).unwrap();
        assert!(red.degenerate);
        for c in &red.components {
            assert!(c.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn pca_is_stable_under_head_permutation() {
        let m1: Vec<f32> = (0..16).map(|i| (i as f32 * 0.3).sin().abs() / 20.0).collect();
        let m2: Vec<f32> = (0..16).map(|i| (i as f32 * 0.7).cos().abs() / 20.0).collect();
        let m3: Vec<f32> = (0..16).map(|i| i as f32 / 300.0).collect();
        let build = |order: [&Vec<f32>; 3]| ClsAttentionMaps {
            maps: order
                .iter()
                .map(|d| Tensor::new(vec![4, 4], (*d).clone()).unwrap())
                .collect(),
            grid: 4,
        };
        let a = pca_reduce(&build([&m1, &m2, &m3]), 1).unwrap();
        let b = pca_reduce(&build([&m3, &m1, &m2]), 1).unwrap();
        for (x, y) in a.components[0].data().iter().zip(b.components[0].data()) {
            assert!((x - y).abs() < 1e-4, "{x} vs {y}");
        }
    }

    fn map_from(p: usize, entries: &[(usize, usize, f32)]) -> Tensor {
        let mut data = vec![0.0f32; p * p];
        for &(r, c, v) in entries {
            data[r * p + c] = v;
        }
        Tensor::new(vec![p, p], data).unwrap()
    }

    #[test]
    fn detect_below_low_threshold_finds_nothing() {
        let map = Tensor::filled(vec![4, 4], 0.2).unwrap();
        let det = detect_regions(&map, 0.3, 0.7).unwrap();
        assert!(det.clusters.is_empty());
    }

    #[test]
    fn detect_singleton_seed() {
        let map = map_from(4, &[(2, 1, 0.9)]);
        let det = detect_regions(&map, 0.3, 0.7).unwrap();
        assert_eq!(det.clusters.len(), 1);
        assert_eq!(det.clusters[0].patches, vec![2 * 4 + 1]);
        assert_eq!(det.clusters[0].centroid, (2.0, 1.0));
        assert_eq!(det.clusters[0].peak, 0.9);
    }

    #[test]
    fn detect_hysteresis_joins_plus_shape() {
        // plus of 0.5s with a 0.8 center: one five-patch cluster
        let map = map_from(
            5,
            &[(2, 2, 0.8), (1, 2, 0.5), (3, 2, 0.5), (2, 1, 0.5), (2, 3, 0.5)],
        );
        let det = detect_regions(&map, 0.3, 0.7).unwrap();
        assert_eq!(det.clusters.len(), 1);
        assert_eq!(det.clusters[0].patches.len(), 5);

        // without a seed the same support vanishes
        let weak = map_from(
            5,
            &[(2, 2, 0.6), (1, 2, 0.5), (3, 2, 0.5), (2, 1, 0.5), (2, 3, 0.5)],
        );
        let none = detect_regions(&weak, 0.3, 0.7).unwrap();
        assert!(none.clusters.is_empty());
    }

    #[test]
    fn detect_clusters_are_disjoint_and_seeded() {
        let map = map_from(
            6,
            &[
                (0, 0, 0.9),
                (0, 1, 0.4),
                (3, 3, 0.75),
                (3, 4, 0.35),
                (5, 0, 0.5), // support without seed: dropped
            ],
        );
        let det = detect_regions(&map, 0.3, 0.7).unwrap();
        assert_eq!(det.clusters.len(), 2);
        let mut seen = std::collections::BTreeSet::new();
        for cl in &det.clusters {
            assert!(cl.peak >= 0.7);
            for &p in &cl.patches {
                assert!(seen.insert(p), "clusters overlap at {p}");
            }
        }
    }

    #[test]
    fn raising_t_high_never_adds_clusters() {
        let map = map_from(6, &[(0, 0, 0.72), (3, 3, 0.9), (5, 5, 0.75)]);
        let mut prev = usize::MAX;
        for th in [0.7f32, 0.74, 0.8, 0.95] {
            let det = detect_regions(&map, 0.3, th).unwrap();
            assert!(det.clusters.len() <= prev);
            prev = det.clusters.len();
        }
    }

    #[test]
    fn score_counts_and_localization() {
        // one cluster exactly covering one of two components: TP=1, FN=1
        let map = map_from(4, &[(0, 0, 0.9), (0, 1, 0.8)]);
        let det = detect_regions(&map, 0.3, 0.7).unwrap();
        let mut mask = RoiMask::empty(4, 4);
        mask.set(0, 0, true);
        mask.set(0, 1, true);
        mask.set(3, 3, true); // second, unmatched component
        let score = score_detections(&[(det, mask)]).unwrap();
        assert_eq!((score.tp, score.fp, score.fn_), (1, 0, 1));
        assert_eq!(score.localization, 1.0);

        // zero-overlap cluster is a false positive
        let det2 = detect_regions(&map_from(4, &[(2, 2, 0.9)]), 0.3, 0.7).unwrap();
        let empty = RoiMask::empty(4, 4);
        let s2 = score_detections(&[(det2, empty)]).unwrap();
        assert_eq!((s2.tp, s2.fp, s2.fn_), (0, 1, 0));
    }

    #[test]
    fn score_conservation_identities() {
        let map = map_from(5, &[(0, 0, 0.9), (2, 2, 0.8), (4, 4, 0.85)]);
        let det = detect_regions(&map, 0.3, 0.7).unwrap();
        let n_clusters = det.clusters.len();
        let mut mask = RoiMask::empty(5, 5);
        mask.set(0, 0, true);
        mask.set(0, 1, true);
        mask.set(4, 4, true);
        let n_components = 2;
        let score = score_detections(&[(det, mask)]).unwrap();
        assert_eq!(score.tp + score.fn_, n_components);
        assert_eq!(score.tp + score.fp, n_clusters);
    }

    #[test]
    fn roi_downsampling_marks_any_hit_patch() {
        let mut roi = RoiMask::empty(8, 8);
        roi.set(5, 1, true);
        let ds = downsample_roi_to_patches(&roi, 4);
        assert_eq!((ds.height, ds.width), (2, 2));
        assert!(ds.get(1, 0));
        assert!(!ds.get(0, 0));
    }
}
