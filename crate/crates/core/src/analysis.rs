//! Feature-space k-means, channel sparsity statistics and style-element
//! reconstruction.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::net::{apply_bank, RegionMaskSet, StyleBankModel};
use crate::tensor::Tensor;

pub const KMEANS_RESTARTS: u64 = 10;
pub const KMEANS_MAX_ROUNDS: usize = 100;

/// One Lloyd run.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansRun {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    /// Objective after each assignment round.
    pub history: Vec<f64>,
    pub converged: bool,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn count_distinct(points: &[Vec<f64>]) -> usize {
    let mut keys: Vec<Vec<u64>> = points.iter().map(|p| p.iter().map(|v| v.to_bits()).collect()).collect();
    keys.sort_unstable();
    keys.dedup();
    keys.len()
}

fn check_points(points: &[Vec<f64>], k: usize) -> Result<()> {
    let dim = points.first().map(Vec::len).ok_or_else(|| Error::KMeans("no points".into()))?;
    if points.iter().any(|p| p.len() != dim || p.iter().any(|v| !v.is_finite())) {
        return Err(Error::KMeans("points must be finite and of equal length".into()));
    }
    if k == 0 {
        return Err(Error::KMeans("k must be at least 1".into()));
    }
    let distinct = count_distinct(points);
    if k > distinct {
        return Err(Error::KMeans(format!("k = {k} exceeds the {distinct} distinct points")));
    }
    Ok(())
}

/// k-means++ seeding: first centre uniform, then proportional to squared
/// distance from the nearest chosen centre.
fn seed_centroids(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.gen_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let mut target = rng.gen_range(0.0..total);
        let mut pick = d2.iter().rposition(|&d| d > 0.0).expect("k <= distinct points");
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 && target < d {
                pick = i;
                break;
            }
            target -= d;
        }
        centroids.push(points[pick].clone());
        for (p, d) in points.iter().zip(d2.iter_mut()) {
            *d = d.min(dist2(p, &centroids[centroids.len() - 1]));
        }
    }
    centroids
}

fn assign(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
    points
        .iter()
        .map(|p| {
            let mut best = (0, f64::INFINITY);
            for (j, c) in centroids.iter().enumerate() {
                let d = dist2(p, c);
                if d < best.1 {
                    best = (j, d);
                }
            }
            best
        })
        .unzip()
}

fn means(points: &[Vec<f64>], labels: &[usize], k: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut sums = vec![vec![0.0; points[0].len()]; k];
    let mut counts = vec![0usize; k];
    for (p, &l) in points.iter().zip(labels) {
        counts[l] += 1;
        for (s, v) in sums[l].iter_mut().zip(p) {
            *s += v;
        }
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        s.iter_mut().for_each(|v| *v /= n.max(1) as f64);
    }
    (sums, counts)
}

/// Single-point moves (Hartigan) from a Lloyd fixed point. A point leaves its
/// cluster when the exact change in inertia is negative; the result is still
/// a Lloyd fixed point. Returns whether anything moved.
fn refine(points: &[Vec<f64>], labels: &mut [usize], centroids: &mut Vec<Vec<f64>>) -> bool {
    let k = centroids.len();
    let (mut cs, mut counts) = means(points, labels, k);
    let mut moved = false;
    for _ in 0..KMEANS_MAX_ROUNDS {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let a = labels[i];
            if counts[a] < 2 {
                continue;
            }
            let na = counts[a] as f64;
            let leave = na / (na - 1.0) * dist2(p, &cs[a]);
            let mut best = (a, 0.0);
            for b in (0..k).filter(|&b| b != a) {
                let nb = counts[b] as f64;
                let delta = nb / (nb + 1.0) * dist2(p, &cs[b]) - leave;
                if delta < best.1 - 1e-12 * leave.max(1e-300) {
                    best = (b, delta);
                }
            }
            let b = best.0;
            if b == a {
                continue;
            }
            let nb = counts[b] as f64;
            for (d, v) in p.iter().enumerate() {
                cs[a][d] = (cs[a][d] * na - v) / (na - 1.0);
                cs[b][d] = (cs[b][d] * nb + v) / (nb + 1.0);
            }
            counts[a] -= 1;
            counts[b] += 1;
            labels[i] = b;
            changed = true;
        }
        if !changed {
            break;
        }
        moved = true;
    }
    if moved {
        *centroids = means(points, labels, k).0;
    }
    moved
}

/// Lloyd's algorithm from one k-means++ seeding, finished with single-point
/// refinement. Empty clusters are re-seeded
/// at the point farthest from its centre.
pub fn kmeans_once(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Result<KMeansRun> {
    check_points(points, k)?;
    let dim = points[0].len();
    let mut centroids = seed_centroids(points, k, rng);
    let mut labels: Vec<usize> = Vec::new();
    let mut history = Vec::new();
    let mut converged = false;
    for _ in 0..KMEANS_MAX_ROUNDS {
        let (next, d2) = assign(points, &centroids);
        history.push(d2.iter().sum());
        if next == labels {
            converged = true;
            break;
        }
        labels = next;

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut d2 = d2;
        for j in 0..k {
            if counts[j] == 0 {
                let far = d2
                    .iter()
                    .enumerate()
                    .fold(0, |best, (i, &d)| if d > d2[best] { i } else { best });
                centroids[j] = points[far].clone();
                d2[far] = 0.0;
            } else {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
    }
    if converged && refine(points, &mut labels, &mut centroids) {
        let (_, d2) = assign(points, &centroids);
        history.push(d2.iter().sum());
    }
    let inertia = *history.last().expect("at least one round");
    Ok(KMeansRun {
        labels,
        centroids,
        inertia,
        history,
        converged,
    })
}

/// Best of [`KMEANS_RESTARTS`] runs; restart `r` is seeded with `seed + r`.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeansRun> {
    let mut best: Option<KMeansRun> = None;
    for r in 0..KMEANS_RESTARTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(r));
        let run = kmeans_once(points, k, &mut rng)?;
        if best.as_ref().map_or(true, |b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult {
    /// Row-major `height x width` labels in `0..k`.
    pub labels: Vec<usize>,
    pub height: usize,
    pub width: usize,
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    pub history: Vec<f64>,
}

/// Clusters the L2-normalised channel vectors of every spatial position.
pub fn kmeans_segment(features: &Tensor<f32>, k: usize, seed: u64) -> Result<ClusterResult> {
    let [n, c, h, w] = features.dims();
    if n != 1 {
        return Err(Error::KMeans(format!("expected one feature map, got batch {n}")));
    }
    if k > h * w {
        return Err(Error::KMeans(format!("k = {k} exceeds {} positions", h * w)));
    }
    let points: Vec<Vec<f64>> = (0..h * w)
        .map(|i| {
            let v: Vec<f64> = (0..c).map(|ch| features.at(0, ch, i / w, i % w) as f64).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                v.iter().map(|x| x / norm).collect()
            } else {
                v
            }
        })
        .collect();
    let run = kmeans(&points, k, seed)?;
    Ok(ClusterResult {
        labels: run.labels,
        height: h,
        width: w,
        k,
        centroids: run.centroids,
        inertia: run.inertia,
        history: run.history,
    })
}

/// Mask set from a label map; every label that occurs must be assigned.
pub fn masks_from_labels(
    labels: &[usize],
    height: usize,
    width: usize,
    assignment: &BTreeMap<usize, String>,
) -> Result<RegionMaskSet<f32>> {
    let max = labels.iter().copied().max().ok_or_else(|| Error::Mask("empty label map".into()))?;
    let mut styles = vec![String::new(); max + 1];
    for &l in labels {
        match assignment.get(&l) {
            Some(s) => styles[l] = s.clone(),
            None => return Err(Error::Mask(format!("label {l} has no assigned style"))),
        }
    }
    RegionMaskSet::from_labels(labels, height, width, &styles)
}

/// Every cluster `0..k` must be assigned a style, used or not.
pub fn masks_from_clusters(result: &ClusterResult, assignment: &BTreeMap<usize, String>) -> Result<RegionMaskSet<f32>> {
    if let Some(missing) = (0..result.k).find(|l| !assignment.contains_key(l)) {
        return Err(Error::Mask(format!("cluster {missing} has no assigned style")));
    }
    masks_from_labels(&result.labels, result.height, result.width, assignment)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparsityReport {
    /// Per-channel average, over images, of the mean nonzero response.
    pub mean: Vec<f64>,
    /// Population standard deviation of the same quantity across images.
    pub stddev: Vec<f64>,
    /// `mean` sorted in non-increasing order.
    pub sorted_mean: Vec<f64>,
}

impl SparsityReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("channel,mean,stddev\n");
        for (c, (m, d)) in self.mean.iter().zip(&self.stddev).enumerate() {
            s.push_str(&format!("{c},{m},{d}\n"));
        }
        s
    }
}

/// Mean of the nonzero values of each channel; 0 for a channel that is zero everywhere.
pub fn nonzero_channel_means(features: &Tensor<f32>) -> Vec<f64> {
    let [n, c, h, w] = features.dims();
    (0..c)
        .map(|ch| {
            let (mut sum, mut count) = (0.0f64, 0usize);
            for b in 0..n {
                for y in 0..h {
                    for x in 0..w {
                        let v = features.at(b, ch, y, x);
                        if v != 0.0 {
                            sum += v as f64;
                            count += 1;
                        }
                    }
                }
            }
            if count == 0 {
                0.0
            } else {
                sum / count as f64
            }
        })
        .collect()
}

/// Statistics over per-image feature maps. Per-channel values are sorted
/// before reduction so the result does not depend on image order.
pub fn sparsity_from_features(maps: &[Tensor<f32>]) -> Result<SparsityReport> {
    let first = maps.first().ok_or_else(|| Error::invalid("sparsity_stats", "no images"))?;
    let c = first.dims()[1];
    let per_image: Vec<Vec<f64>> = maps
        .iter()
        .map(|m| {
            if m.dims()[1] != c {
                return Err(Error::shape("sparsity_stats", format!("{c} vs {} channels", m.dims()[1])));
            }
            Ok(nonzero_channel_means(m))
        })
        .collect::<Result<_>>()?;
    let count = maps.len() as f64;
    let mut mean = Vec::with_capacity(c);
    let mut stddev = Vec::with_capacity(c);
    for ch in 0..c {
        let mut vals: Vec<f64> = per_image.iter().map(|v| v[ch]).collect();
        vals.sort_by(f64::total_cmp);
        let m = vals.iter().sum::<f64>() / count;
        let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / count;
        mean.push(m);
        stddev.push(var.sqrt());
    }
    let mut sorted_mean = mean.clone();
    sorted_mean.sort_by(|a, b| b.total_cmp(a));
    Ok(SparsityReport { mean, stddev, sorted_mean })
}

/// Encodes each image and reports its channel sparsity.
pub fn sparsity_stats(model: &StyleBankModel<f32>, images: &[Tensor<f32>]) -> Result<SparsityReport> {
    let maps = images.iter().map(|im| model.encode(im)).collect::<Result<Vec<_>>>()?;
    sparsity_from_features(&maps)
}

fn check_mask(features: &Tensor<f32>, mask: &Tensor<f32>) -> Result<()> {
    let [n, _, h, w] = features.dims();
    if n != 1 || mask.dims() != [1, 1, h, w] {
        return Err(Error::Mask(format!("mask {:?} does not match features {:?}", mask.dims(), features.dims())));
    }
    if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Mask("mask values must be 0 or 1".into()));
    }
    if mask.data().iter().all(|&v| v == 0.0) {
        return Err(Error::Mask("mask is empty".into()));
    }
    Ok(())
}

/// Mean absolute response of every channel inside the mask.
pub fn in_mask_channel_response(features: &Tensor<f32>, mask: &Tensor<f32>) -> Result<Vec<f64>> {
    check_mask(features, mask)?;
    let [_, c, h, w] = features.dims();
    let inside = mask.data().iter().filter(|&&v| v == 1.0).count() as f64;
    Ok((0..c)
        .map(|ch| {
            let mut sum = 0.0f64;
            for i in 0..h * w {
                if mask.data()[i] == 1.0 {
                    sum += features.at(0, ch, i / w, i % w).abs() as f64;
                }
            }
            sum / inside
        })
        .collect())
}

/// 1e-3 of the strongest in-mask channel response.
pub fn default_channel_threshold(features: &Tensor<f32>, mask: &Tensor<f32>) -> Result<f64> {
    let r = in_mask_channel_response(features, mask)?;
    Ok(1e-3 * r.into_iter().fold(0.0, f64::max))
}

/// Decodes what one style's bank makes of a masked subset of features:
/// positions outside `mask` and channels whose in-mask mean absolute
/// response is at most `threshold` are zeroed first.
pub fn reconstruct_style_element(
    model: &StyleBankModel<f32>,
    features: &Tensor<f32>,
    style: &str,
    mask: &Tensor<f32>,
    threshold: f64,
) -> Result<Tensor<f32>> {
    if !(threshold >= 0.0) {
        return Err(Error::invalid("reconstruct_style_element", format!("threshold {threshold} must be >= 0")));
    }
    let bank = model.bank(style)?;
    let response = in_mask_channel_response(features, mask)?;
    let [_, c, h, w] = features.dims();
    let plane = h * w;
    let mut kept = features.clone();
    for ch in 0..c {
        let slice = &mut kept.data_mut()[ch * plane..(ch + 1) * plane];
        if response[ch] <= threshold {
            slice.iter_mut().for_each(|v| *v = 0.0);
        } else {
            for (v, &m) in slice.iter_mut().zip(mask.data()) {
                *v *= m;
            }
        }
    }
    model.decode(&apply_bank(bank, &kept)?)
}
