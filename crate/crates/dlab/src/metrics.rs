//! Generative-quality and disentanglement metrics.
//!
//! * Fréchet distance between Gaussians fitted to feature sets, with the
//!   covariance square root taken through the symmetrized eigendecomposition
//!   of Σr^{1/2} Σg Σr^{1/2} (tiny negative eigenvalues clamped to zero).
//! * Desk-scale features from a frozen, seed-pinned random conv trunk with
//!   the same topology as the discriminator — the Fréchet formula is
//!   extractor-agnostic, and the provenance tag records that these values
//!   are not comparable across extractors.
//! * k-NN-manifold precision/recall: a set's manifold is the union of balls
//!   centered at its points with radius equal to each point's k-th
//!   nearest-neighbor distance.
//! * Mutual information gap: Monte Carlo per (attribute, factor) mutual
//!   information with the inner expectation over images sharing a label
//!   capped at `inner_cap` uniformly drawn representatives.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::latent::{FactorPosterior, LatentSpec, QPosterior};
use crate::models::{self, GanArch};
use crate::tensor::{log_sum_exp, Tensor};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("feature dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("k = {k} must be positive and smaller than the set size {n}")]
    BadNeighborCount { k: usize, n: usize },
    #[error("attribute '{0}' has a single observed value")]
    SingleValuedAttribute(String),
    #[error(transparent)]
    Model(#[from] crate::models::ModelError),
}

/// Where a feature set came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    PixelPca,
    FixedRandomConv,
    DiscriminatorTap,
    External,
}

/// n×d matrix of feature vectors, row-major.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    pub n: usize,
    pub d: usize,
    pub data: Vec<f64>,
    pub provenance: Provenance,
}

impl FeatureSet {
    pub fn from_rows(rows: Vec<Vec<f64>>, provenance: Provenance) -> Self {
        let n = rows.len();
        let d = rows.first().map(|r| r.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(n * d);
        for r in &rows {
            assert_eq!(r.len(), d, "ragged feature rows");
            data.extend_from_slice(r);
        }
        FeatureSet {
            n,
            d,
            data,
            provenance,
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }
}

/// Mean vector and unbiased covariance of a feature set.
#[derive(Debug, Clone)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

pub fn gaussian_fit(features: &FeatureSet) -> Result<GaussianStats, MetricError> {
    if features.n < 2 {
        return Err(MetricError::TooFewSamples {
            need: 2,
            got: features.n,
        });
    }
    let (n, d) = (features.n, features.d);
    let mut mean = DVector::zeros(d);
    for i in 0..n {
        for (j, v) in features.row(i).iter().enumerate() {
            mean[j] += v;
        }
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for i in 0..n {
        let row = features.row(i);
        for a in 0..d {
            let da = row[a] - mean[a];
            for b in a..d {
                cov[(a, b)] += da * (row[b] - mean[b]);
            }
        }
    }
    cov /= (n - 1) as f64;
    for a in 0..d {
        for b in 0..a {
            cov[(a, b)] = cov[(b, a)];
        }
    }
    Ok(GaussianStats { mean, cov })
}

/// Symmetric PSD square root via eigendecomposition, clamping small negative
/// eigenvalues to zero.
fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        *v = v.max(0.0).sqrt();
    }
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Fréchet distance between two Gaussians:
/// ‖μr − μg‖² + Tr(Σr + Σg − 2(ΣrΣg)^{1/2}),
/// with the cross term evaluated through Σr^{1/2} Σg Σr^{1/2}.
pub fn fid(stats_r: &GaussianStats, stats_g: &GaussianStats) -> Result<f64, MetricError> {
    let d = stats_r.mean.len();
    if stats_g.mean.len() != d {
        return Err(MetricError::DimensionMismatch(d, stats_g.mean.len()));
    }
    let mean_term = (&stats_r.mean - &stats_g.mean).norm_squared();
    let root_r = sqrt_psd(&stats_r.cov);
    let inner = &root_r * &stats_g.cov * &root_r;
    let sym = (&inner + inner.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let trace_sqrt: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    Ok(mean_term + stats_r.cov.trace() + stats_g.cov.trace() - 2.0 * trace_sqrt)
}

/// Seed of the frozen feature extractor.
pub const DESK_FEATURE_SEED: u64 = 0xF1D;

/// Deterministic 64-dim features from a frozen random conv trunk with the
/// discriminator topology.
pub fn desk_features(images: &[Tensor]) -> Result<FeatureSet, MetricError> {
    let arch = GanArch::new(LatentSpec::default_spec(), true);
    let mut rng = ChaCha8Rng::seed_from_u64(DESK_FEATURE_SEED);
    let store = models::init_params(&arch, &mut rng);
    let rows: Vec<Vec<f64>> = images
        .par_iter()
        .map(|img| {
            let (_, _, dense) = models::discriminate(&store, &arch, img)?;
            Ok(dense)
        })
        .collect::<Result<_, crate::models::ModelError>>()?;
    Ok(FeatureSet::from_rows(rows, Provenance::FixedRandomConv))
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Squared radius to each point's k-th nearest neighbor within its own set.
fn knn_radii2(set: &FeatureSet, k: usize) -> Vec<f64> {
    (0..set.n)
        .into_par_iter()
        .map(|i| {
            let mut dists: Vec<f64> = (0..set.n)
                .filter(|&j| j != i)
                .map(|j| dist2(set.row(i), set.row(j)))
                .collect();
            dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
            dists[k - 1]
        })
        .collect()
}

fn fraction_in_manifold(points: &FeatureSet, set: &FeatureSet, radii2: &[f64]) -> f64 {
    let hits = (0..points.n)
        .into_par_iter()
        .filter(|&i| {
            let p = points.row(i);
            (0..set.n).any(|j| dist2(p, set.row(j)) <= radii2[j])
        })
        .count();
    hits as f64 / points.n as f64
}

/// k-NN-manifold precision (fake inside real manifold) and recall (real
/// inside fake manifold).
pub fn precision_recall(
    real: &FeatureSet,
    fake: &FeatureSet,
    k: usize,
) -> Result<(f64, f64), MetricError> {
    if real.d != fake.d {
        return Err(MetricError::DimensionMismatch(real.d, fake.d));
    }
    for set in [real, fake] {
        if k == 0 || k >= set.n {
            return Err(MetricError::BadNeighborCount { k, n: set.n });
        }
    }
    let real_radii = knn_radii2(real, k);
    let fake_radii = knn_radii2(fake, k);
    let precision = fraction_in_manifold(fake, real, &real_radii);
    let recall = fraction_in_manifold(real, fake, &fake_radii);
    Ok((precision, recall))
}

// ── mutual information gap ────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct MigOptions {
    pub mc_samples: usize,
    pub inner_cap: usize,
    pub seed: u64,
}

impl Default for MigOptions {
    fn default() -> Self {
        MigOptions {
            mc_samples: 5000,
            inner_cap: 256,
            seed: 0,
        }
    }
}

/// One Monte Carlo mutual-information estimate.
#[derive(Debug, Clone, Copy)]
pub struct MiEstimate {
    pub raw: f64,
    /// Reported value: raw clamped at zero from below.
    pub clamped: f64,
    pub se: f64,
}

#[derive(Debug, Clone)]
pub struct MigAttributeRow {
    pub name: String,
    pub entropy: f64,
    pub mi: Vec<MiEstimate>,
    pub argmax: usize,
    pub runner_up: usize,
    /// (I_max − I_runner-up) / H(V_k), from raw estimates.
    pub gap_term: f64,
    pub gap_term_se: f64,
}

#[derive(Debug, Clone)]
pub struct MigReport {
    pub rows: Vec<MigAttributeRow>,
    pub mig: f64,
    pub mig_se: f64,
    pub max_mi: f64,
    pub excluded: Vec<String>,
    pub mc_samples: usize,
    pub inner_cap: usize,
}

fn sample_factor_value(post: &FactorPosterior, rng: &mut impl Rng) -> FactorDraw {
    match post {
        FactorPosterior::Discrete { logits } => {
            let lse = log_sum_exp(logits);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            for (j, l) in logits.iter().enumerate() {
                acc += (l - lse).exp();
                if u < acc {
                    return FactorDraw::Class(j);
                }
            }
            FactorDraw::Class(logits.len() - 1)
        }
        FactorPosterior::Gaussian { mean, log_var } => {
            let z: f64 = rng.sample(StandardNormal);
            FactorDraw::Real(mean + (0.5 * log_var).exp() * z)
        }
    }
}

#[derive(Clone, Copy)]
enum FactorDraw {
    Class(usize),
    Real(f64),
}

fn factor_prob(post: &FactorPosterior, draw: FactorDraw) -> f64 {
    match (post, draw) {
        (FactorPosterior::Discrete { logits }, FactorDraw::Class(j)) => {
            (logits[j] - log_sum_exp(logits)).exp()
        }
        (FactorPosterior::Gaussian { mean, log_var }, FactorDraw::Real(x)) => {
            crate::latent::gaussian_log_density(x, *mean, *log_var).exp()
        }
        _ => unreachable!("draw kind matches posterior kind"),
    }
}

/// MIG from precomputed per-image posteriors and per-attribute label columns.
///
/// I(V_k; Cᵢ) is estimated by drawing v from the empirical label marginal,
/// an image x uniformly from those labeled v, and cᵢ' from Q(Cᵢ | x); the
/// inner expectation Σ Q(cᵢ' | x̃) p(x̃ | v) runs over a fixed uniform
/// subsample of at most `inner_cap` images per label value. Attributes with a
/// single observed value are excluded (their entropy normalizer is zero).
pub fn mig_from_posteriors(
    posteriors: &[QPosterior],
    labels: &[Vec<usize>],
    attr_names: &[String],
    spec: &LatentSpec,
    opts: &MigOptions,
) -> Result<MigReport, MetricError> {
    let n = posteriors.len();
    if n == 0 {
        return Err(MetricError::TooFewSamples { need: 1, got: 0 });
    }
    let num_factors = spec.factors.len();

    let mut rows = Vec::new();
    let mut excluded = Vec::new();
    for (k, column) in labels.iter().enumerate() {
        assert_eq!(column.len(), n, "label column length");
        let num_values = column.iter().max().map(|m| m + 1).unwrap_or(0);
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); num_values];
        for (i, &v) in column.iter().enumerate() {
            groups[v].push(i);
        }
        let observed: Vec<usize> = (0..num_values).filter(|&v| !groups[v].is_empty()).collect();
        if observed.len() < 2 {
            excluded.push(attr_names[k].clone());
            continue;
        }
        let h_v: f64 = observed
            .iter()
            .map(|&v| {
                let p = groups[v].len() as f64 / n as f64;
                -p * p.ln()
            })
            .sum();

        // fixed capped subsample per label value
        let mut cap_rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (k as u64).wrapping_mul(0x9E37));
        let subsamples: Vec<Vec<usize>> = groups
            .iter()
            .map(|g| {
                if g.len() <= opts.inner_cap {
                    g.clone()
                } else {
                    use rand::seq::SliceRandom;
                    let mut shuffled = g.clone();
                    shuffled.shuffle(&mut cap_rng);
                    shuffled.truncate(opts.inner_cap);
                    shuffled
                }
            })
            .collect();

        let estimates: Vec<MiEstimate> = (0..num_factors)
            .into_par_iter()
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(
                    opts.seed
                        .wrapping_add((k as u64) << 32)
                        .wrapping_add(i as u64 + 1),
                );
                let mut sum = 0.0;
                let mut sumsq = 0.0;
                for _ in 0..opts.mc_samples {
                    let j = rng.gen_range(0..n);
                    let v = column[j];
                    let x = groups[v][rng.gen_range(0..groups[v].len())];
                    let draw = sample_factor_value(&posteriors[x].factors[i], &mut rng);
                    let sub = &subsamples[v];
                    let inner: f64 = sub
                        .iter()
                        .map(|&xt| factor_prob(&posteriors[xt].factors[i], draw))
                        .sum::<f64>()
                        / sub.len() as f64;
                    let term = inner.max(1e-300).ln();
                    sum += term;
                    sumsq += term * term;
                }
                let m = opts.mc_samples as f64;
                let mean = sum / m;
                let var = ((sumsq - sum * sum / m) / (m - 1.0)).max(0.0);
                let raw = mean + spec.factors[i].entropy();
                MiEstimate {
                    raw,
                    clamped: raw.max(0.0),
                    se: (var / m).sqrt(),
                }
            })
            .collect();

        let argmax = (0..num_factors)
            .max_by(|&a, &b| estimates[a].raw.partial_cmp(&estimates[b].raw).unwrap())
            .unwrap();
        let runner_up = (0..num_factors)
            .filter(|&i| i != argmax)
            .max_by(|&a, &b| estimates[a].raw.partial_cmp(&estimates[b].raw).unwrap())
            .unwrap_or(argmax);
        let gap_term = (estimates[argmax].raw - estimates[runner_up].raw) / h_v;
        let gap_term_se = (estimates[argmax].se.powi(2) + estimates[runner_up].se.powi(2))
            .sqrt()
            / h_v;
        rows.push(MigAttributeRow {
            name: attr_names[k].clone(),
            entropy: h_v,
            mi: estimates,
            argmax,
            runner_up,
            gap_term,
            gap_term_se,
        });
    }

    if rows.is_empty() {
        return Err(MetricError::SingleValuedAttribute(
            "all attributes".to_string(),
        ));
    }
    let kk = rows.len() as f64;
    let mig = rows.iter().map(|r| r.gap_term).sum::<f64>() / kk;
    let mig_se = rows
        .iter()
        .map(|r| r.gap_term_se.powi(2))
        .sum::<f64>()
        .sqrt()
        / kk;
    let max_mi = rows
        .iter()
        .flat_map(|r| r.mi.iter().map(|e| e.clamped))
        .fold(0.0f64, f64::max);
    Ok(MigReport {
        rows,
        mig,
        mig_se,
        max_mi,
        excluded,
        mc_samples: opts.mc_samples,
        inner_cap: opts.inner_cap,
    })
}

/// MIG of a trained model's posterior head over a labeled dataset.
pub fn mig_with_model(
    store: &crate::optim::ParameterStore,
    arch: &GanArch,
    dataset: &crate::data::LabeledDataset,
    opts: &MigOptions,
) -> Result<MigReport, MetricError> {
    let posteriors: Vec<QPosterior> = dataset
        .images
        .par_iter()
        .map(|img| models::q_infer(store, arch, img))
        .collect::<Result<_, _>>()?;
    let labels: Vec<Vec<usize>> = (0..5).map(|a| dataset.label_column(a)).collect();
    let names: Vec<String> = crate::data::ShapeFactors::NAMES
        .iter()
        .map(|s| s.to_string())
        .collect();
    mig_from_posteriors(&posteriors, &labels, &names, &arch.latent, opts)
}

pub fn write_mig_csv(report: &MigReport, path: &std::path::Path) -> std::io::Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let num_factors = report.rows.first().map(|r| r.mi.len()).unwrap_or(0);
    let cols: Vec<String> = (0..num_factors).map(|i| format!("c{i}")).collect();
    writeln!(f, "attribute,{},argmax,gap", cols.join(","))?;
    for r in &report.rows {
        let vals: Vec<String> = r.mi.iter().map(|e| format!("{}", e.clamped)).collect();
        writeln!(
            f,
            "{},{},c{},{}",
            r.name,
            vals.join(","),
            r.argmax,
            r.gap_term
        )?;
    }
    writeln!(f, "# mig,{}", report.mig)?;
    writeln!(f, "# max_mi,{}", report.max_mi)?;
    writeln!(f, "# mc_samples,{}", report.mc_samples)?;
    writeln!(f, "# inner_cap,{}", report.inner_cap)?;
    f.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::FactorSpec;
    use proptest::prelude::*;
    use rand::Rng;

    fn fs(rows: Vec<Vec<f64>>) -> FeatureSet {
        FeatureSet::from_rows(rows, Provenance::External)
    }

    #[test]
    fn gaussian_fit_two_points() {
        let stats = gaussian_fit(&fs(vec![vec![0.0, 0.0], vec![2.0, 0.0]])).unwrap();
        assert_eq!(stats.mean.as_slice(), &[1.0, 0.0]);
        assert_eq!(stats.cov[(0, 0)], 2.0);
        assert_eq!(stats.cov[(0, 1)], 0.0);
        assert_eq!(stats.cov[(1, 1)], 0.0);
    }

    #[test]
    fn gaussian_fit_identical_points_and_permutation() {
        let stats = gaussian_fit(&fs(vec![vec![1.5, -2.0]; 5])).unwrap();
        assert!(stats.cov.iter().all(|v| *v == 0.0));

        let a = gaussian_fit(&fs(vec![vec![1.0, 2.0], vec![3.0, -1.0], vec![0.5, 0.0]]))
            .unwrap();
        let b = gaussian_fit(&fs(vec![vec![0.5, 0.0], vec![1.0, 2.0], vec![3.0, -1.0]]))
            .unwrap();
        assert!((a.mean - b.mean).norm() < 1e-15);
        assert!((a.cov - b.cov).norm() < 1e-15);
    }

    #[test]
    fn gaussian_fit_needs_two() {
        assert!(matches!(
            gaussian_fit(&fs(vec![vec![1.0]])),
            Err(MetricError::TooFewSamples { .. })
        ));
    }

    #[test]
    fn fid_identical_stats_is_zero() {
        let stats = gaussian_fit(&fs(vec![
            vec![0.1, 0.4, -0.2],
            vec![1.0, 0.0, 0.3],
            vec![-0.5, 0.8, 0.0],
            vec![0.2, -0.3, 1.1],
        ]))
        .unwrap();
        let v = fid(&stats, &stats).unwrap();
        assert!(v.abs() < 1e-8, "{v}");
    }

    #[test]
    fn fid_mean_shift_with_identity_covariance() {
        let eye = DMatrix::identity(2, 2);
        let a = GaussianStats {
            mean: DVector::from_vec(vec![0.0, 0.0]),
            cov: eye.clone(),
        };
        let b = GaussianStats {
            mean: DVector::from_vec(vec![1.0, 0.0]),
            cov: eye,
        };
        assert!((fid(&a, &b).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fid_commuting_diagonal_closed_form() {
        // Tr(Σr + Σg − 2(ΣrΣg)^{1/2}) = (4+1) + (1+1) − 2(2+1) = 1
        let a = GaussianStats {
            mean: DVector::from_vec(vec![0.0, 0.0]),
            cov: DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0])),
        };
        let b = GaussianStats {
            mean: DVector::from_vec(vec![0.0, 0.0]),
            cov: DMatrix::identity(2, 2),
        };
        assert!((fid(&a, &b).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn fid_dimension_mismatch() {
        let a = GaussianStats {
            mean: DVector::from_vec(vec![0.0, 0.0]),
            cov: DMatrix::identity(2, 2),
        };
        let b = GaussianStats {
            mean: DVector::from_vec(vec![0.0]),
            cov: DMatrix::identity(1, 1),
        };
        assert!(matches!(
            fid(&a, &b),
            Err(MetricError::DimensionMismatch(2, 1))
        ));
    }

    #[test]
    fn fid_symmetric_numerically() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rows_a: Vec<Vec<f64>> = (0..40)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let rows_b: Vec<Vec<f64>> = (0..40)
            .map(|_| (0..4).map(|_| rng.gen_range(-0.5..1.5)).collect())
            .collect();
        let a = gaussian_fit(&fs(rows_a)).unwrap();
        let b = gaussian_fit(&fs(rows_b)).unwrap();
        let ab = fid(&a, &b).unwrap();
        let ba = fid(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-8, "{ab} vs {ba}");
    }

    #[test]
    fn desk_features_are_deterministic_and_64d() {
        let ds = crate::data::generate(6, 88);
        let f1 = desk_features(&ds.images).unwrap();
        let f2 = desk_features(&ds.images).unwrap();
        assert_eq!(f1.d, 64);
        assert_eq!(f1.data, f2.data);
        assert_eq!(f1.provenance, Provenance::FixedRandomConv);
    }

    #[test]
    fn precision_recall_identical_sets() {
        let set = fs(vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 0.5]]);
        let (p, r) = precision_recall(&set, &set.clone(), 1).unwrap();
        assert_eq!((p, r), (1.0, 1.0));
    }

    #[test]
    fn precision_recall_separated_clusters() {
        let real = fs(vec![vec![0.0], vec![0.1], vec![0.2]]);
        let fake = fs(vec![vec![100.0], vec![100.1], vec![100.2]]);
        let (p, r) = precision_recall(&real, &fake, 1).unwrap();
        assert_eq!((p, r), (0.0, 0.0));
    }

    #[test]
    fn precision_recall_hand_case() {
        // real {0,1,2} radii 1; fake {0.5, 10} radii 9.5 each
        let real = fs(vec![vec![0.0], vec![1.0], vec![2.0]]);
        let fake = fs(vec![vec![0.5], vec![10.0]]);
        let (p, r) = precision_recall(&real, &fake, 1).unwrap();
        assert_eq!(p, 0.5);
        assert_eq!(r, 1.0);
    }

    #[test]
    fn precision_recall_rejects_large_k() {
        let set = fs(vec![vec![0.0], vec![1.0]]);
        assert!(matches!(
            precision_recall(&set, &set.clone(), 2),
            Err(MetricError::BadNeighborCount { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn precision_recall_in_unit_range_and_permutation_invariant(
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows = |rng: &mut ChaCha8Rng, n: usize| -> Vec<Vec<f64>> {
                (0..n).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
            };
            let real_rows = rows(&mut rng, 12);
            let fake_rows = rows(&mut rng, 10);
            let (p, r) = precision_recall(&fs(real_rows.clone()), &fs(fake_rows.clone()), 2).unwrap();
            prop_assert!((0.0..=1.0).contains(&p) && (0.0..=1.0).contains(&r));
            let mut shuffled = real_rows;
            shuffled.reverse();
            let (p2, r2) = precision_recall(&fs(shuffled), &fs(fake_rows), 2).unwrap();
            prop_assert_eq!(p, p2);
            prop_assert_eq!(r, r2);
        }
    }

    // ── MIG ──────────────────────────────────────────────────────────────

    /// Label-determined encoder: Q(Cᵢ | x) depends on x only through one
    /// label column, via a per-value probability table.
    fn table_encoder(
        labels: &[Vec<usize>],
        source_attr: Vec<usize>,
        tables: Vec<Vec<Vec<f64>>>,
        n: usize,
    ) -> Vec<QPosterior> {
        (0..n)
            .map(|x| QPosterior {
                factors: source_attr
                    .iter()
                    .zip(&tables)
                    .map(|(&src, table)| {
                        let v = labels[src][x];
                        FactorPosterior::Discrete {
                            logits: table[v].iter().map(|p| p.max(1e-12).ln()).collect(),
                        }
                    })
                    .collect(),
            })
            .collect()
    }

    /// Exact Eq.-style mutual information for a label-determined encoder by
    /// enumeration over (v, source value, class), assuming the inner
    /// expectation runs over the full label group (no capping).
    fn exact_mi_label_encoder(
        labels: &[Vec<usize>],
        attr: usize,
        source: usize,
        table: &[Vec<f64>],
        h_ci: f64,
    ) -> f64 {
        let n = labels[0].len();
        let vmax = labels[attr].iter().max().unwrap() + 1;
        let umax = labels[source].iter().max().unwrap() + 1;
        // joint counts of (attr value, source value)
        let mut joint = vec![vec![0usize; umax]; vmax];
        for x in 0..n {
            joint[labels[attr][x]][labels[source][x]] += 1;
        }
        let k = table[0].len();
        let mut total = 0.0;
        for v in 0..vmax {
            let nv: usize = joint[v].iter().sum();
            if nv == 0 {
                continue;
            }
            let pv = nv as f64 / n as f64;
            for u in 0..umax {
                let pu_given_v = joint[v][u] as f64 / nv as f64;
                if pu_given_v == 0.0 {
                    continue;
                }
                for c in 0..k {
                    let q = table[u][c];
                    if q == 0.0 {
                        continue;
                    }
                    // inner expectation over x̃ ~ uniform(X_v)
                    let inner: f64 = (0..umax)
                        .map(|u2| (joint[v][u2] as f64 / nv as f64) * table[u2][c])
                        .sum();
                    total += pv * pu_given_v * q * inner.max(1e-300).ln();
                }
            }
        }
        total + h_ci
    }

    fn small_label_set(n: usize, seed: u64) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        let b: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        vec![a, b]
    }

    #[test]
    fn mig_oracle_copy_encoder_matches_enumeration() {
        let n = 900;
        let labels = small_label_set(n, 5);
        // factor 0 copies attribute 0 as a near point mass; factor 1 is
        // uniform regardless of the image
        let copy: Vec<Vec<f64>> = (0..3)
            .map(|v| {
                (0..3)
                    .map(|c| if c == v { 0.999998 } else { 1e-6 })
                    .collect()
            })
            .collect();
        let uniform = vec![vec![1.0 / 3.0; 3]; 3];
        let posteriors = table_encoder(
            &labels,
            vec![0, 0],
            vec![copy.clone(), uniform.clone()],
            n,
        );
        let spec = LatentSpec::new(
            0,
            vec![FactorSpec::Categorical { k: 3 }, FactorSpec::Categorical { k: 3 }],
        )
        .unwrap();
        let opts = MigOptions {
            mc_samples: 20000,
            inner_cap: 1024,
            seed: 7,
        };
        let report = mig_from_posteriors(
            &posteriors,
            &labels,
            &["a".to_string(), "b".to_string()],
            &spec,
            &opts,
        )
        .unwrap();

        let h = 3.0f64.ln();
        let exact_copy = exact_mi_label_encoder(&labels, 0, 0, &copy, h);
        let row = &report.rows[0];
        let est = &row.mi[0];
        assert!(
            (est.raw - exact_copy).abs() < 5.0 * est.se.max(1e-4),
            "MC {} vs exact {} (se {})",
            est.raw,
            exact_copy,
            est.se
        );
        // copied factor concentrates the information
        assert_eq!(row.argmax, 0);
        assert!(row.gap_term > 0.9, "gap {}", row.gap_term);
    }

    #[test]
    fn mig_constant_posterior_is_near_zero() {
        let n = 600;
        let labels = small_label_set(n, 6);
        let uniform = vec![vec![1.0 / 3.0; 3]; 3];
        let posteriors = table_encoder(
            &labels,
            vec![0, 1],
            vec![uniform.clone(), uniform],
            n,
        );
        let spec = LatentSpec::new(
            0,
            vec![FactorSpec::Categorical { k: 3 }, FactorSpec::Categorical { k: 3 }],
        )
        .unwrap();
        let report = mig_from_posteriors(
            &posteriors,
            &labels,
            &["a".to_string(), "b".to_string()],
            &spec,
            &MigOptions {
                mc_samples: 8000,
                inner_cap: 256,
                seed: 3,
            },
        )
        .unwrap();
        assert!(report.mig.abs() <= 0.02, "mig {}", report.mig);
        for row in &report.rows {
            for e in &row.mi {
                assert!(e.raw.abs() < 0.05);
                assert!(e.clamped >= 0.0);
            }
        }
    }

    #[test]
    fn mig_excludes_single_valued_attributes() {
        let n = 100;
        let labels = vec![vec![0usize; n], (0..n).map(|i| i % 2).collect()];
        let uniform = vec![vec![0.5, 0.5]; 2];
        let posteriors = table_encoder(&labels, vec![1], vec![uniform], n);
        let spec = LatentSpec::new(0, vec![FactorSpec::Categorical { k: 2 }]).unwrap();
        let report = mig_from_posteriors(
            &posteriors,
            &labels,
            &["const".to_string(), "bit".to_string()],
            &spec,
            &MigOptions {
                mc_samples: 500,
                inner_cap: 64,
                seed: 1,
            },
        )
        .unwrap();
        assert_eq!(report.excluded, vec!["const".to_string()]);
        assert_eq!(report.rows.len(), 1);
    }

    #[test]
    fn mig_seeds_agree_within_combined_error() {
        let n = 700;
        let labels = small_label_set(n, 8);
        let copy: Vec<Vec<f64>> = (0..3)
            .map(|v| {
                (0..3)
                    .map(|c| if c == v { 0.98 } else { 0.01 })
                    .collect()
            })
            .collect();
        let uniform = vec![vec![1.0 / 3.0; 3]; 3];
        let posteriors = table_encoder(&labels, vec![0, 1], vec![copy, uniform], n);
        let spec = LatentSpec::new(
            0,
            vec![FactorSpec::Categorical { k: 3 }, FactorSpec::Categorical { k: 3 }],
        )
        .unwrap();
        let run = |seed: u64| {
            mig_from_posteriors(
                &posteriors,
                &labels,
                &["a".to_string(), "b".to_string()],
                &spec,
                &MigOptions {
                    mc_samples: 20000,
                    inner_cap: 512,
                    seed,
                },
            )
            .unwrap()
        };
        let r1 = run(100);
        let r2 = run(200);
        let combined = (r1.mig_se.powi(2) + r2.mig_se.powi(2)).sqrt();
        assert!(
            (r1.mig - r2.mig).abs() <= 3.0 * combined.max(1e-6),
            "{} vs {} (combined se {})",
            r1.mig,
            r2.mig,
            combined
        );
    }
}
