//! Embedding-based anomaly detection: discriminator taps → PCA whitening →
//! one-class SVM or local outlier factor → threshold-free and thresholded
//! evaluation.
//!
//! Score orientation is unified across detectors: higher always means more
//! inlier. ROC AUC comes from the rank (Mann–Whitney) statistic with
//! half-credit for ties; accuracy and F1 use a threshold that maximizes
//! balanced accuracy on a calibration split disjoint from the reported one;
//! confidence intervals are seeded percentile bootstraps.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::path::Path;
use thiserror::Error;

use crate::imageio::{self, GrayImage};
use crate::metrics::{FeatureSet, Provenance};
use crate::models::{self, GanArch};
use crate::optim::ParameterStore;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum AnomalyError {
    #[error("invalid parameter: {0}")]
    BadParam(String),
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("solver did not converge after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("empty score set")]
    EmptyScores,
    #[error(transparent)]
    Model(#[from] models::ModelError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image encode error: {0}")]
    Png(#[from] image::ImageError),
}

/// Which discriminator tap provides the embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingSource {
    /// Raw posterior parameter vector from the auxiliary head.
    Q,
    /// Flattened last conv activations (64·4·4).
    Conv,
    /// Last dense activations (64).
    Dense,
}

impl EmbeddingSource {
    pub fn code_letter(self) -> char {
        match self {
            EmbeddingSource::Q => 'Q',
            EmbeddingSource::Conv => 'C',
            EmbeddingSource::Dense => 'D',
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "q" => Some(EmbeddingSource::Q),
            "conv" => Some(EmbeddingSource::Conv),
            "dense" => Some(EmbeddingSource::Dense),
            _ => None,
        }
    }
}

/// One embedding vector per image from the requested tap.
pub fn extract_embeddings(
    store: &ParameterStore,
    arch: &GanArch,
    images: &[Tensor],
    source: EmbeddingSource,
) -> Result<FeatureSet, AnomalyError> {
    let rows: Vec<Vec<f64>> = images
        .par_iter()
        .map(|img| -> Result<Vec<f64>, models::ModelError> {
            match source {
                EmbeddingSource::Q => Ok(models::q_infer(store, arch, img)?.param_vector()),
                EmbeddingSource::Conv => {
                    let (_, conv, _) = models::discriminate(store, arch, img)?;
                    Ok(conv)
                }
                EmbeddingSource::Dense => {
                    let (_, _, dense) = models::discriminate(store, arch, img)?;
                    Ok(dense)
                }
            }
        })
        .collect::<Result<_, _>>()?;
    Ok(FeatureSet::from_rows(rows, Provenance::DiscriminatorTap))
}

// ── PCA whitening ─────────────────────────────────────────────────────────

/// Mean plus eigenvector projection scaled by 1/√eigenvalue.
#[derive(Debug, Clone)]
pub struct WhiteningTransform {
    pub mean: DVector<f64>,
    /// kept × d projection.
    pub proj: DMatrix<f64>,
    pub kept: usize,
}

/// Fit whitening on training features, keeping all components above the rank
/// floor (eigenvalue > 1e-10 × the largest) or at most `n_components`.
pub fn fit_whitening(
    train: &FeatureSet,
    n_components: Option<usize>,
) -> Result<WhiteningTransform, AnomalyError> {
    if train.n < 2 {
        return Err(AnomalyError::TooFewSamples {
            need: 2,
            got: train.n,
        });
    }
    let stats = crate::metrics::gaussian_fit(train).expect("n >= 2 checked");
    let eig = stats.cov.clone().symmetric_eigen();
    let d = train.d;
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let max_ev = eig.eigenvalues[order[0]].max(0.0);
    let floor = 1e-10 * max_ev;
    let mut kept_idx = Vec::new();
    for &i in &order {
        if eig.eigenvalues[i] > floor && eig.eigenvalues[i] > 0.0 {
            kept_idx.push(i);
        }
    }
    if let Some(cap) = n_components {
        kept_idx.truncate(cap);
    }
    if kept_idx.is_empty() {
        return Err(AnomalyError::BadParam(
            "no components above the eigenvalue floor".to_string(),
        ));
    }
    let kept = kept_idx.len();
    let mut proj = DMatrix::zeros(kept, d);
    for (row, &i) in kept_idx.iter().enumerate() {
        let scale = 1.0 / eig.eigenvalues[i].sqrt();
        for c in 0..d {
            proj[(row, c)] = eig.eigenvectors[(c, i)] * scale;
        }
    }
    Ok(WhiteningTransform {
        mean: stats.mean,
        proj,
        kept,
    })
}

impl WhiteningTransform {
    pub fn apply(&self, features: &FeatureSet) -> FeatureSet {
        let rows: Vec<Vec<f64>> = (0..features.n)
            .map(|i| {
                let x = DVector::from_column_slice(features.row(i)) - &self.mean;
                (&self.proj * x).as_slice().to_vec()
            })
            .collect();
        FeatureSet::from_rows(rows, features.provenance)
    }
}

// ── one-class SVM ─────────────────────────────────────────────────────────

/// The common "scale" bandwidth heuristic: γ = 1 / (d · mean variance).
pub fn gamma_scale_heuristic(features: &FeatureSet) -> f64 {
    let stats = crate::metrics::gaussian_fit(features).expect("n >= 2");
    let mean_var = stats.cov.trace() / features.d as f64;
    1.0 / (features.d as f64 * mean_var.max(1e-12))
}

/// ν-one-class SVM with RBF kernel, solved in the dual by pairwise
/// (SMO-style) updates.
#[derive(Debug, Clone)]
pub struct OcsvmModel {
    support: Vec<Vec<f64>>,
    alpha: Vec<f64>,
    rho: f64,
    pub gamma: f64,
    pub nu: f64,
}

fn rbf(gamma: f64, a: &[f64], b: &[f64]) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-gamma * d2).exp()
}

pub const OCSVM_TOL: f64 = 1e-6;

/// Minimize ½ αᵀKα subject to 0 ≤ αᵢ ≤ 1/(νn), Σαᵢ = 1, to KKT tolerance
/// 1e-6 on the maximal violating pair.
pub fn ocsvm_fit(train: &FeatureSet, nu: f64, gamma: f64) -> Result<OcsvmModel, AnomalyError> {
    if !(nu > 0.0 && nu <= 1.0) {
        return Err(AnomalyError::BadParam(format!("nu = {nu}, need 0 < nu <= 1")));
    }
    if gamma <= 0.0 {
        return Err(AnomalyError::BadParam(format!("gamma = {gamma}, need > 0")));
    }
    let n = train.n;
    if n < 2 {
        return Err(AnomalyError::TooFewSamples { need: 2, got: n });
    }
    let c = 1.0 / (nu * n as f64);

    let kernel: Vec<f64> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            let row: Vec<f64> = (0..n)
                .map(|j| rbf(gamma, train.row(i), train.row(j)))
                .collect();
            row
        })
        .collect();

    // feasible start: fill the box until the simplex constraint is met
    let mut alpha = vec![0.0f64; n];
    let mut remaining = 1.0f64;
    for a in alpha.iter_mut() {
        let take = remaining.min(c);
        *a = take;
        remaining -= take;
        if remaining <= 0.0 {
            break;
        }
    }

    // gradient of the objective: g = Kα
    let mut grad = vec![0.0f64; n];
    for i in 0..n {
        let mut acc = 0.0;
        for j in 0..n {
            if alpha[j] > 0.0 {
                acc += kernel[i * n + j] * alpha[j];
            }
        }
        grad[i] = acc;
    }

    let bound_eps = c * 1e-12;
    let max_iter = 200_000 + 100 * n;
    let mut residual = f64::INFINITY;
    let mut converged = false;
    for _ in 0..max_iter {
        // maximal violating pair
        let mut up: Option<usize> = None;
        let mut down: Option<usize> = None;
        for i in 0..n {
            if alpha[i] < c - bound_eps && up.map_or(true, |u| grad[i] < grad[u]) {
                up = Some(i);
            }
            if alpha[i] > bound_eps && down.map_or(true, |d| grad[i] > grad[d]) {
                down = Some(i);
            }
        }
        let (Some(u), Some(dn)) = (up, down) else {
            converged = true;
            residual = 0.0;
            break;
        };
        residual = grad[dn] - grad[u];
        if residual <= OCSVM_TOL {
            converged = true;
            break;
        }
        let eta = kernel[u * n + u] + kernel[dn * n + dn] - 2.0 * kernel[u * n + dn];
        let room = (c - alpha[u]).min(alpha[dn]);
        let step = if eta > 1e-15 {
            (residual / eta).min(room)
        } else {
            room
        };
        alpha[u] += step;
        alpha[dn] -= step;
        for i in 0..n {
            grad[i] += step * (kernel[i * n + u] - kernel[i * n + dn]);
        }
    }
    if !converged {
        return Err(AnomalyError::NonConvergence {
            iterations: max_iter,
            residual,
        });
    }

    // offset from free support vectors, falling back to all support vectors
    let free: Vec<usize> = (0..n)
        .filter(|&i| alpha[i] > bound_eps && alpha[i] < c - bound_eps)
        .collect();
    let rho = if !free.is_empty() {
        free.iter().map(|&i| grad[i]).sum::<f64>() / free.len() as f64
    } else {
        let sv: Vec<usize> = (0..n).filter(|&i| alpha[i] > bound_eps).collect();
        sv.iter().map(|&i| grad[i]).sum::<f64>() / sv.len() as f64
    };

    let mut support = Vec::new();
    let mut sv_alpha = Vec::new();
    for i in 0..n {
        if alpha[i] > bound_eps {
            support.push(train.row(i).to_vec());
            sv_alpha.push(alpha[i]);
        }
    }
    Ok(OcsvmModel {
        support,
        alpha: sv_alpha,
        rho,
        gamma,
        nu,
    })
}

/// Decision value f(x) = Σ αᵢ k(xᵢ, x) − ρ; higher means more inlier.
pub fn ocsvm_score(model: &OcsvmModel, x: &[f64]) -> f64 {
    let acc: f64 = model
        .support
        .iter()
        .zip(&model.alpha)
        .map(|(s, a)| a * rbf(model.gamma, s, x))
        .sum();
    acc - model.rho
}

impl OcsvmModel {
    pub fn support_count(&self) -> usize {
        self.support.len()
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }
}

// ── local outlier factor ──────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct LofModel {
    points: Vec<Vec<f64>>,
    pub k: usize,
    k_dist: Vec<f64>,
    lrd: Vec<f64>,
}

const DIST_FLOOR: f64 = 1e-12;

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// k nearest training indices to `x`, excluding `skip` (for training rows).
fn knn_of(points: &[Vec<f64>], x: &[f64], k: usize, skip: Option<usize>) -> Vec<(usize, f64)> {
    let mut dists: Vec<(usize, f64)> = points
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != skip)
        .map(|(i, p)| (i, euclid(p, x)))
        .collect();
    dists.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    dists.truncate(k);
    dists
}

/// Standard LOF fit: k-distances and local reachability densities for every
/// training point. Distances are floored at 1e-12 so duplicated points keep
/// densities finite.
pub fn lof_fit(train: &FeatureSet, k: usize) -> Result<LofModel, AnomalyError> {
    let n = train.n;
    if k == 0 || k >= n {
        return Err(AnomalyError::BadParam(format!(
            "k = {k} must satisfy 0 < k < n = {n}"
        )));
    }
    let points: Vec<Vec<f64>> = (0..n).map(|i| train.row(i).to_vec()).collect();
    let neighbor_lists: Vec<Vec<(usize, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| knn_of(&points, &points[i], k, Some(i)))
        .collect();
    let k_dist: Vec<f64> = neighbor_lists
        .iter()
        .map(|nb| nb.last().unwrap().1)
        .collect();
    let lrd: Vec<f64> = (0..n)
        .map(|i| {
            let mean_reach: f64 = neighbor_lists[i]
                .iter()
                .map(|&(j, d)| k_dist[j].max(d).max(DIST_FLOOR))
                .sum::<f64>()
                / k as f64;
            1.0 / mean_reach
        })
        .collect();
    Ok(LofModel {
        points,
        k,
        k_dist,
        lrd,
    })
}

/// Score of a query point: −LOF(x), so higher means more inlier.
pub fn lof_score(model: &LofModel, x: &[f64]) -> f64 {
    let neighbors = knn_of(&model.points, x, model.k, None);
    let mean_reach: f64 = neighbors
        .iter()
        .map(|&(j, d)| model.k_dist[j].max(d).max(DIST_FLOOR))
        .sum::<f64>()
        / model.k as f64;
    let lrd_x = 1.0 / mean_reach;
    let mean_neighbor_lrd: f64 =
        neighbors.iter().map(|&(j, _)| model.lrd[j]).sum::<f64>() / model.k as f64;
    -(mean_neighbor_lrd / lrd_x)
}

// ── evaluation ────────────────────────────────────────────────────────────

/// Rank-statistic (Mann–Whitney) AUC with half-credit ties: the probability
/// that a random inlier scores above a random outlier.
pub fn auc_rank(inlier_scores: &[f64], outlier_scores: &[f64]) -> f64 {
    let n_in = inlier_scores.len();
    let n_out = outlier_scores.len();
    assert!(n_in > 0 && n_out > 0);
    let mut all: Vec<(f64, bool)> = inlier_scores
        .iter()
        .map(|&s| (s, true))
        .chain(outlier_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut rank_sum_inlier = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // average rank for the tie group, ranks are 1-based
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for item in &all[i..j] {
            if item.1 {
                rank_sum_inlier += avg_rank;
            }
        }
        i = j;
    }
    let u = rank_sum_inlier - (n_in * (n_in + 1)) as f64 / 2.0;
    u / (n_in as f64 * n_out as f64)
}

/// How the report's accuracy/F1 threshold is chosen.
#[derive(Debug, Clone, Copy)]
pub enum ThresholdRule {
    /// Maximize balanced accuracy on a stratified calibration fraction of
    /// the test pool, disjoint from the reported split.
    MaxBalancedAccuracy { calibration_fraction: f64, seed: u64 },
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    /// Method code, e.g. IDO = InfoStyleGAN → Dense → OCSVM.
    pub method: String,
    pub auc: f64,
    pub auc_ci: (f64, f64),
    pub accuracy: f64,
    pub accuracy_ci: (f64, f64),
    pub f1: f64,
    pub threshold: f64,
    pub threshold_rule: String,
    pub n_eval_inliers: usize,
    pub n_eval_outliers: usize,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

fn balanced_accuracy(threshold: f64, inliers: &[f64], outliers: &[f64]) -> f64 {
    let tnr = inliers.iter().filter(|s| **s >= threshold).count() as f64 / inliers.len() as f64;
    let tpr = outliers.iter().filter(|s| **s < threshold).count() as f64 / outliers.len() as f64;
    0.5 * (tpr + tnr)
}

/// Accuracy and outlier-positive F1 at a fixed threshold
/// (score < threshold → predicted outlier).
pub fn accuracy_f1_at(threshold: f64, inliers: &[f64], outliers: &[f64]) -> (f64, f64) {
    let tp = outliers.iter().filter(|s| **s < threshold).count() as f64;
    let fn_ = outliers.len() as f64 - tp;
    let fp = inliers.iter().filter(|s| **s < threshold).count() as f64;
    let tn = inliers.len() as f64 - fp;
    let accuracy = (tp + tn) / (inliers.len() + outliers.len()) as f64;
    let f1 = if 2.0 * tp + fp + fn_ > 0.0 {
        2.0 * tp / (2.0 * tp + fp + fn_)
    } else {
        0.0
    };
    (accuracy, f1)
}

/// Threshold-free AUC with bootstrap CI on the reported split, plus
/// accuracy/F1 at a threshold calibrated on the held-out fraction.
pub fn evaluate(
    method: &str,
    scores_inlier: &[f64],
    scores_outlier: &[f64],
    rule: ThresholdRule,
) -> Result<EvalReport, AnomalyError> {
    if scores_inlier.is_empty() || scores_outlier.is_empty() {
        return Err(AnomalyError::EmptyScores);
    }
    let ThresholdRule::MaxBalancedAccuracy {
        calibration_fraction,
        seed,
    } = rule;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let split = |scores: &[f64], rng: &mut ChaCha8Rng| -> (Vec<f64>, Vec<f64>) {
        let mut idx: Vec<usize> = (0..scores.len()).collect();
        idx.shuffle(rng);
        let n_cal = ((scores.len() as f64 * calibration_fraction).round() as usize)
            .clamp(1, scores.len() - 1);
        let calib = idx[..n_cal].iter().map(|&i| scores[i]).collect();
        let eval = idx[n_cal..].iter().map(|&i| scores[i]).collect();
        (calib, eval)
    };
    let (calib_in, eval_in) = split(scores_inlier, &mut rng);
    let (calib_out, eval_out) = split(scores_outlier, &mut rng);

    // candidate thresholds: midpoints of adjacent distinct calibration scores
    let mut pool: Vec<f64> = calib_in.iter().chain(&calib_out).copied().collect();
    pool.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pool.dedup();
    let mut candidates = vec![pool[0] - 1.0];
    for w in pool.windows(2) {
        candidates.push(0.5 * (w[0] + w[1]));
    }
    candidates.push(pool[pool.len() - 1] + 1.0);
    let threshold = candidates
        .iter()
        .copied()
        .max_by(|a, b| {
            balanced_accuracy(*a, &calib_in, &calib_out)
                .partial_cmp(&balanced_accuracy(*b, &calib_in, &calib_out))
                .unwrap()
        })
        .unwrap();

    let auc = auc_rank(&eval_in, &eval_out);
    let (accuracy, f1) = accuracy_f1_at(threshold, &eval_in, &eval_out);

    // percentile bootstrap over the reported split
    let resamples = 1000;
    let mut auc_samples = Vec::with_capacity(resamples);
    let mut acc_samples = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let draw = |src: &[f64], rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..src.len()).map(|_| src[rng.gen_range(0..src.len())]).collect()
        };
        let bi = draw(&eval_in, &mut rng);
        let bo = draw(&eval_out, &mut rng);
        auc_samples.push(auc_rank(&bi, &bo));
        acc_samples.push(accuracy_f1_at(threshold, &bi, &bo).0);
    }
    auc_samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    acc_samples.sort_by(|a, b| a.partial_cmp(b).unwrap());

    Ok(EvalReport {
        method: method.to_string(),
        auc,
        auc_ci: (percentile(&auc_samples, 0.025), percentile(&auc_samples, 0.975)),
        accuracy,
        accuracy_ci: (percentile(&acc_samples, 0.025), percentile(&acc_samples, 0.975)),
        f1,
        threshold,
        threshold_rule: format!(
            "max balanced accuracy on a {:.0}% calibration split (seed {seed})",
            calibration_fraction * 100.0
        ),
        n_eval_inliers: eval_in.len(),
        n_eval_outliers: eval_out.len(),
    })
}

/// 2×2 confusion montage: rows are ground truth (inlier, outlier), columns
/// predictions, up to 9 seeded example tiles per quadrant.
pub fn confusion_grid(
    images: &[Tensor],
    truth_outlier: &[bool],
    pred_outlier: &[bool],
    pgm_path: &Path,
    png_path: Option<&Path>,
    seed: u64,
) -> Result<(), AnomalyError> {
    assert_eq!(images.len(), truth_outlier.len());
    assert_eq!(images.len(), pred_outlier.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut quadrants = Vec::with_capacity(4);
    for truth in [false, true] {
        for pred in [false, true] {
            let mut idx: Vec<usize> = (0..images.len())
                .filter(|&i| truth_outlier[i] == truth && pred_outlier[i] == pred)
                .collect();
            idx.shuffle(&mut rng);
            idx.truncate(9);
            let tiles: Vec<GrayImage> = if idx.is_empty() {
                vec![GrayImage::new(32, 32)]
            } else {
                idx.iter()
                    .map(|&i| GrayImage::from_tensor(&images[i]))
                    .collect()
            };
            quadrants.push(imageio::montage(&tiles, 3, 2, 0.25));
        }
    }
    // normalize quadrant sizes (montage size depends on tile count)
    let w = quadrants.iter().map(|q| q.width).max().unwrap();
    let h = quadrants.iter().map(|q| q.height).max().unwrap();
    let padded: Vec<GrayImage> = quadrants
        .into_iter()
        .map(|q| {
            let mut out = GrayImage::new(w, h);
            for y in 0..q.height {
                out.data[y * w..y * w + q.width]
                    .copy_from_slice(&q.data[y * q.width..(y + 1) * q.width]);
            }
            out
        })
        .collect();
    let grid = imageio::montage(&padded, 2, 2, 0.5);
    imageio::write_pgm(&grid, pgm_path)?;
    if let Some(p) = png_path {
        imageio::write_png(&grid, p)?;
    }
    Ok(())
}
