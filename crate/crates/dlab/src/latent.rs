//! The decomposed latent code `z = (z', c)`.
//!
//! `z'` is standard Gaussian noise; `c` is an ordered list of semantic
//! factors, each with an independent prior: Bernoulli bits, a categorical
//! class, or a continuous uniform value. The flattened encoding feeds the
//! mapping network: bits as ±1 scalars, categories one-hot, uniforms raw.

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::tensor::log_sum_exp;

#[derive(Debug, Error)]
pub enum LatentError {
    #[error("invalid factor: {0}")]
    InvalidFactor(String),
    #[error("factor {index}: value {value} outside support {support}")]
    OutsideSupport {
        index: usize,
        value: f64,
        support: String,
    },
    #[error("sample has {got} factors, spec has {expected}")]
    FactorCount { expected: usize, got: usize },
}

/// Prior family of one latent factor.
#[derive(Debug, Clone, PartialEq)]
pub enum FactorSpec {
    /// P(bit = 1) = p, with 0 < p < 1.
    Bernoulli { p: f64 },
    /// Uniform over k ≥ 2 classes.
    Categorical { k: usize },
    /// Uniform density on (a, b), a < b.
    Uniform { a: f64, b: f64 },
}

impl FactorSpec {
    pub fn validate(&self) -> Result<(), LatentError> {
        match self {
            FactorSpec::Bernoulli { p } => {
                if !(p.is_finite() && *p > 0.0 && *p < 1.0) {
                    return Err(LatentError::InvalidFactor(format!("bernoulli p = {p}")));
                }
            }
            FactorSpec::Categorical { k } => {
                if *k < 2 {
                    return Err(LatentError::InvalidFactor(format!("categorical k = {k}")));
                }
            }
            FactorSpec::Uniform { a, b } => {
                if !(a.is_finite() && b.is_finite() && a < b) {
                    return Err(LatentError::InvalidFactor(format!("uniform ({a}, {b})")));
                }
            }
        }
        Ok(())
    }

    /// Width this factor occupies in the flattened network encoding.
    pub fn encoding_width(&self) -> usize {
        match self {
            FactorSpec::Bernoulli { .. } => 1,
            FactorSpec::Categorical { k } => *k,
            FactorSpec::Uniform { .. } => 1,
        }
    }

    /// Number of posterior parameters the Q head emits for this factor:
    /// logits for discrete factors, (mean, log-variance) for continuous.
    pub fn posterior_param_count(&self) -> usize {
        match self {
            FactorSpec::Bernoulli { .. } => 2,
            FactorSpec::Categorical { k } => *k,
            FactorSpec::Uniform { .. } => 2,
        }
    }

    pub fn is_discrete(&self) -> bool {
        !matches!(self, FactorSpec::Uniform { .. })
    }

    /// Prior entropy in nats (differential entropy for uniform factors).
    pub fn entropy(&self) -> f64 {
        match self {
            FactorSpec::Bernoulli { p } => -(p * p.ln() + (1.0 - p) * (1.0 - p).ln()),
            FactorSpec::Categorical { k } => (*k as f64).ln(),
            FactorSpec::Uniform { a, b } => (b - a).ln(),
        }
    }
}

/// The full latent layout: noise width plus the ordered factor list.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSpec {
    pub noise_dim: usize,
    pub factors: Vec<FactorSpec>,
}

impl LatentSpec {
    pub fn new(noise_dim: usize, factors: Vec<FactorSpec>) -> Result<Self, LatentError> {
        if factors.is_empty() {
            return Err(LatentError::InvalidFactor("no factors".into()));
        }
        for f in &factors {
            f.validate()?;
        }
        Ok(LatentSpec { noise_dim, factors })
    }

    /// Desk-scale default: 32 noise dims, two Bernoulli bits, one 3-way
    /// categorical, three uniform(−1, 1) factors.
    pub fn default_spec() -> Self {
        LatentSpec::new(
            32,
            vec![
                FactorSpec::Bernoulli { p: 0.5 },
                FactorSpec::Bernoulli { p: 0.5 },
                FactorSpec::Categorical { k: 3 },
                FactorSpec::Uniform { a: -1.0, b: 1.0 },
                FactorSpec::Uniform { a: -1.0, b: 1.0 },
                FactorSpec::Uniform { a: -1.0, b: 1.0 },
            ],
        )
        .expect("valid default")
    }

    /// Discrete-only variant of the default layout.
    pub fn default_discrete_spec() -> Self {
        LatentSpec::new(
            32,
            vec![
                FactorSpec::Bernoulli { p: 0.5 },
                FactorSpec::Bernoulli { p: 0.5 },
                FactorSpec::Categorical { k: 3 },
            ],
        )
        .expect("valid default")
    }

    pub fn encoding_dim(&self) -> usize {
        self.noise_dim + self.factors.iter().map(|f| f.encoding_width()).sum::<usize>()
    }

    pub fn posterior_param_count(&self) -> usize {
        self.factors.iter().map(|f| f.posterior_param_count()).sum()
    }

    pub fn is_discrete_only(&self) -> bool {
        self.factors.iter().all(|f| f.is_discrete())
    }

    /// Prior entropy H(C) = Σᵢ H(Cᵢ) in nats.
    pub fn factor_entropy(&self) -> f64 {
        self.factors.iter().map(|f| f.entropy()).sum()
    }
}

/// Value of one sampled factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FactorValue {
    Bit(bool),
    Class(usize),
    Real(f64),
}

/// One draw of the full latent code with its flattened network encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSample {
    pub z_prime: Vec<f64>,
    pub c: Vec<FactorValue>,
    pub encoding: Vec<f64>,
}

/// Draw z' from a standard normal and each factor from its prior.
pub fn sample(spec: &LatentSpec, rng: &mut impl Rng) -> LatentSample {
    let z_prime: Vec<f64> = (0..spec.noise_dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let c: Vec<FactorValue> = spec
        .factors
        .iter()
        .map(|f| match f {
            FactorSpec::Bernoulli { p } => FactorValue::Bit(rng.gen::<f64>() < *p),
            FactorSpec::Categorical { k } => FactorValue::Class(rng.gen_range(0..*k)),
            FactorSpec::Uniform { a, b } => FactorValue::Real(rng.gen_range(*a..*b)),
        })
        .collect();
    let encoding = encode(spec, &z_prime, &c);
    LatentSample { z_prime, c, encoding }
}

/// Flatten (z', c) for the network input: bits as −1/+1, classes one-hot,
/// uniform values raw.
pub fn encode(spec: &LatentSpec, z_prime: &[f64], c: &[FactorValue]) -> Vec<f64> {
    let mut enc = Vec::with_capacity(spec.encoding_dim());
    enc.extend_from_slice(z_prime);
    for (f, v) in spec.factors.iter().zip(c) {
        match (f, v) {
            (FactorSpec::Bernoulli { .. }, FactorValue::Bit(b)) => {
                enc.push(if *b { 1.0 } else { -1.0 });
            }
            (FactorSpec::Categorical { k }, FactorValue::Class(j)) => {
                for i in 0..*k {
                    enc.push(if i == *j { 1.0 } else { 0.0 });
                }
            }
            (FactorSpec::Uniform { .. }, FactorValue::Real(x)) => enc.push(*x),
            _ => panic!("factor value kind does not match spec"),
        }
    }
    enc
}

/// Σᵢ log p(cᵢ); uniform factors contribute the density −log(b−a).
pub fn log_prior(spec: &LatentSpec, c: &[FactorValue]) -> Result<f64, LatentError> {
    if c.len() != spec.factors.len() {
        return Err(LatentError::FactorCount {
            expected: spec.factors.len(),
            got: c.len(),
        });
    }
    let mut total = 0.0;
    for (index, (f, v)) in spec.factors.iter().zip(c).enumerate() {
        total += match (f, v) {
            (FactorSpec::Bernoulli { p }, FactorValue::Bit(b)) => {
                if *b {
                    p.ln()
                } else {
                    (1.0 - p).ln()
                }
            }
            (FactorSpec::Categorical { k }, FactorValue::Class(j)) => {
                if *j >= *k {
                    return Err(LatentError::OutsideSupport {
                        index,
                        value: *j as f64,
                        support: format!("classes 0..{k}"),
                    });
                }
                -(*k as f64).ln()
            }
            (FactorSpec::Uniform { a, b }, FactorValue::Real(x)) => {
                if x < a || x > b {
                    return Err(LatentError::OutsideSupport {
                        index,
                        value: *x,
                        support: format!("[{a}, {b}]"),
                    });
                }
                -(b - a).ln()
            }
            _ => {
                return Err(LatentError::InvalidFactor(format!(
                    "factor {index}: value kind does not match spec"
                )))
            }
        };
    }
    Ok(total)
}

/// Per-factor approximate posterior parameters emitted by the Q head:
/// unnormalized logits for discrete factors, (mean, log-variance) for
/// continuous ones.
#[derive(Debug, Clone, PartialEq)]
pub enum FactorPosterior {
    Discrete { logits: Vec<f64> },
    Gaussian { mean: f64, log_var: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct QPosterior {
    pub factors: Vec<FactorPosterior>,
}

impl QPosterior {
    /// Flat parameter vector: logits in order, then (μ, log σ²) pairs, in
    /// factor order. This is the anomaly pipeline's "Q" embedding.
    pub fn param_vector(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for f in &self.factors {
            match f {
                FactorPosterior::Discrete { logits } => out.extend_from_slice(logits),
                FactorPosterior::Gaussian { mean, log_var } => {
                    out.push(*mean);
                    out.push(*log_var);
                }
            }
        }
        out
    }
}

/// Σᵢ log Q(cᵢ | x̂): softmax log-probability for discrete factors, Gaussian
/// log-density for continuous ones (mean-field product across factors).
pub fn q_log_prob(posterior: &QPosterior, c: &[FactorValue]) -> Result<f64, LatentError> {
    if c.len() != posterior.factors.len() {
        return Err(LatentError::FactorCount {
            expected: posterior.factors.len(),
            got: c.len(),
        });
    }
    let mut total = 0.0;
    for (index, (f, v)) in posterior.factors.iter().zip(c).enumerate() {
        total += match (f, v) {
            (FactorPosterior::Discrete { logits }, FactorValue::Bit(b)) => {
                let j = usize::from(*b);
                logits[j] - log_sum_exp(logits)
            }
            (FactorPosterior::Discrete { logits }, FactorValue::Class(j)) => {
                if *j >= logits.len() {
                    return Err(LatentError::OutsideSupport {
                        index,
                        value: *j as f64,
                        support: format!("classes 0..{}", logits.len()),
                    });
                }
                logits[*j] - log_sum_exp(logits)
            }
            (FactorPosterior::Gaussian { mean, log_var }, FactorValue::Real(x)) => {
                gaussian_log_density(*x, *mean, *log_var)
            }
            _ => {
                return Err(LatentError::InvalidFactor(format!(
                    "factor {index}: posterior kind does not match value"
                )))
            }
        };
    }
    Ok(total)
}

pub fn gaussian_log_density(x: f64, mean: f64, log_var: f64) -> f64 {
    const LN_2PI: f64 = 1.8378770664093453;
    let d = x - mean;
    -0.5 * (LN_2PI + log_var + d * d * (-log_var).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bernoulli_mean_over_many_draws() {
        let spec = LatentSpec::new(0, vec![FactorSpec::Bernoulli { p: 0.5 }]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let ones = (0..n)
            .filter(|_| matches!(sample(&spec, &mut rng).c[0], FactorValue::Bit(true)))
            .count();
        let mean = ones as f64 / n as f64;
        assert!((0.49..=0.51).contains(&mean), "mean {mean}");
    }

    #[test]
    fn uniform_draws_stay_in_support() {
        let spec = LatentSpec::new(0, vec![FactorSpec::Uniform { a: -1.0, b: 1.0 }]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            match sample(&spec, &mut rng).c[0] {
                FactorValue::Real(x) => assert!((-1.0..=1.0).contains(&x)),
                _ => unreachable!(),
            }
        }
    }

    #[test]
    fn same_seed_gives_identical_samples() {
        let spec = LatentSpec::default_spec();
        let a = sample(&spec, &mut ChaCha8Rng::seed_from_u64(9));
        let b = sample(&spec, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn encoding_width_matches_spec() {
        let spec = LatentSpec::default_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = sample(&spec, &mut rng);
        assert_eq!(s.encoding.len(), spec.encoding_dim());
        assert_eq!(spec.encoding_dim(), 32 + 1 + 1 + 3 + 3);
    }

    #[test]
    fn log_prior_known_values() {
        let spec = LatentSpec::new(0, vec![FactorSpec::Bernoulli { p: 0.5 }]).unwrap();
        let lp = log_prior(&spec, &[FactorValue::Bit(true)]).unwrap();
        assert!((lp - 0.5f64.ln()).abs() < 1e-15);

        let spec = LatentSpec::new(0, vec![FactorSpec::Categorical { k: 3 }]).unwrap();
        let lp = log_prior(&spec, &[FactorValue::Class(2)]).unwrap();
        assert!((lp - (1.0f64 / 3.0).ln()).abs() < 1e-15);

        let spec = LatentSpec::new(
            0,
            vec![
                FactorSpec::Uniform { a: -1.0, b: 1.0 },
                FactorSpec::Uniform { a: -1.0, b: 1.0 },
            ],
        )
        .unwrap();
        let lp = log_prior(&spec, &[FactorValue::Real(0.2), FactorValue::Real(-0.7)]).unwrap();
        assert!((lp - 2.0 * -(2.0f64.ln())).abs() < 1e-15);
    }

    #[test]
    fn log_prior_rejects_out_of_support() {
        let spec = LatentSpec::new(0, vec![FactorSpec::Uniform { a: -1.0, b: 1.0 }]).unwrap();
        assert!(matches!(
            log_prior(&spec, &[FactorValue::Real(1.5)]),
            Err(LatentError::OutsideSupport { .. })
        ));
    }

    #[test]
    fn q_log_prob_symmetric_logits_is_log_half() {
        let post = QPosterior {
            factors: vec![FactorPosterior::Discrete {
                logits: vec![0.0, 0.0],
            }],
        };
        let lp = q_log_prob(&post, &[FactorValue::Bit(true)]).unwrap();
        assert!((lp - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn q_log_prob_standard_normal_mode() {
        let post = QPosterior {
            factors: vec![FactorPosterior::Gaussian {
                mean: 0.0,
                log_var: 0.0,
            }],
        };
        let lp = q_log_prob(&post, &[FactorValue::Real(0.0)]).unwrap();
        let expected = -0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((lp - expected).abs() < 1e-15);
    }

    proptest! {
        /// Mean-field additivity: joint log-prob is the sum of single-factor
        /// log-probs.
        #[test]
        fn mean_field_additivity(
            l0 in proptest::collection::vec(-3.0f64..3.0, 2),
            l1 in proptest::collection::vec(-3.0f64..3.0, 4),
            mean in -2.0f64..2.0,
            log_var in -2.0f64..2.0,
            x in -2.0f64..2.0,
            bit in any::<bool>(),
            class in 0usize..4,
        ) {
            let joint = QPosterior { factors: vec![
                FactorPosterior::Discrete { logits: l0.clone() },
                FactorPosterior::Discrete { logits: l1.clone() },
                FactorPosterior::Gaussian { mean, log_var },
            ]};
            let c = [FactorValue::Bit(bit), FactorValue::Class(class), FactorValue::Real(x)];
            let total = q_log_prob(&joint, &c).unwrap();
            let mut parts = 0.0;
            for (f, v) in joint.factors.iter().zip(&c) {
                let single = QPosterior { factors: vec![f.clone()] };
                parts += q_log_prob(&single, &[*v]).unwrap();
            }
            prop_assert!((total - parts).abs() < 1e-12);
        }

        /// Exponentiated softmax probabilities sum to one.
        #[test]
        fn softmax_normalizes(logits in proptest::collection::vec(-30.0f64..30.0, 2..8)) {
            let post = QPosterior { factors: vec![FactorPosterior::Discrete { logits: logits.clone() }] };
            let total: f64 = (0..logits.len())
                .map(|j| q_log_prob(&post, &[FactorValue::Class(j)]).unwrap().exp())
                .sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }

        /// log_prior is constant in the class for uniform categorical priors.
        #[test]
        fn categorical_prior_constant(k in 2usize..6, j in 0usize..6) {
            prop_assume!(j < k);
            let spec = LatentSpec::new(0, vec![FactorSpec::Categorical { k }]).unwrap();
            let lp = log_prior(&spec, &[FactorValue::Class(j)]).unwrap();
            let lp0 = log_prior(&spec, &[FactorValue::Class(0)]).unwrap();
            prop_assert_eq!(lp, lp0);
        }
    }
}
