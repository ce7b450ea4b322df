//! Exact information quantities on finite discrete channels.
//!
//! Everything is computed by exhaustive summation in natural-log units:
//! mutual information I(C; X̂), per-factor I(Cᵢ; X̂), conditional total
//! correlation TC(C | x̂) and its expectation, entropies, and the
//! mutual-information lower bound L_info attained by a mean-field encoder
//! Q(C | x̂) = Πᵢ Q(Cᵢ | x̂).
//!
//! The quantitative centerpiece is the chain
//!
//! ```text
//! H(C) ≥ I(C; X̂) ≥ Σᵢ I(Cᵢ; X̂) ≥ L_info(Q)
//! ```
//!
//! together with the decomposition I = E[TC] + Σᵢ Iᵢ and the gap identity
//! I − L_info(optimal mean-field Q) = E[TC(C | X̂)]: driving the bound to its
//! maximum forces the conditional total correlation to zero. Symbols x̂ with
//! zero marginal probability are excluded from all conditional quantities.

use rand::Rng;
use thiserror::Error;

const TOL_DIST: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum InfoError {
    #[error("invalid distribution ({what}): sums to {sum}")]
    InvalidDistribution { what: String, sum: f64 },
    #[error("negative probability in {0}")]
    NegativeProbability(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Factorized prior over L finite factors: p(C) = Πᵢ p(Cᵢ).
#[derive(Debug, Clone)]
pub struct FactoredPrior {
    factors: Vec<Vec<f64>>,
}

impl FactoredPrior {
    pub fn new(factors: Vec<Vec<f64>>) -> Result<Self, InfoError> {
        for (i, f) in factors.iter().enumerate() {
            if f.iter().any(|p| *p < 0.0) {
                return Err(InfoError::NegativeProbability(format!("factor {i}")));
            }
            let sum: f64 = f.iter().sum();
            if (sum - 1.0).abs() > TOL_DIST {
                return Err(InfoError::InvalidDistribution {
                    what: format!("factor {i}"),
                    sum,
                });
            }
        }
        Ok(FactoredPrior { factors })
    }

    pub fn uniform_binary_pair() -> Self {
        FactoredPrior::new(vec![vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap()
    }

    pub fn num_factors(&self) -> usize {
        self.factors.len()
    }

    pub fn factor_sizes(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.len()).collect()
    }

    pub fn factor(&self, i: usize) -> &[f64] {
        &self.factors[i]
    }

    /// Size of the joint support Πᵢ |Cᵢ|.
    pub fn joint_size(&self) -> usize {
        self.factors.iter().map(|f| f.len()).product()
    }

    /// Mixed-radix decode of a joint index (first factor most significant).
    pub fn decode(&self, mut idx: usize) -> Vec<usize> {
        let mut out = vec![0; self.factors.len()];
        for i in (0..self.factors.len()).rev() {
            let k = self.factors[i].len();
            out[i] = idx % k;
            idx /= k;
        }
        out
    }

    pub fn joint_prob(&self, idx: usize) -> f64 {
        let digits = self.decode(idx);
        self.factors
            .iter()
            .zip(&digits)
            .map(|(f, &d)| f[d])
            .product()
    }

    /// H(C) = Σᵢ H(Cᵢ) in nats.
    pub fn entropy(&self) -> f64 {
        self.factors.iter().map(|f| entropy(f)).sum()
    }

    pub fn factor_entropy(&self, i: usize) -> f64 {
        entropy(&self.factors[i])
    }
}

/// Finite conditional table p(x̂ | c), one row per joint factor value.
#[derive(Debug, Clone)]
pub struct DiscreteChannel {
    rows: Vec<Vec<f64>>,
    num_symbols: usize,
}

impl DiscreteChannel {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self, InfoError> {
        let num_symbols = rows.first().map(|r| r.len()).unwrap_or(0);
        for (c, row) in rows.iter().enumerate() {
            if row.len() != num_symbols {
                return Err(InfoError::DimensionMismatch(format!(
                    "row {c} has {} symbols, expected {num_symbols}",
                    row.len()
                )));
            }
            if row.iter().any(|p| *p < 0.0) {
                return Err(InfoError::NegativeProbability(format!("row {c}")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > TOL_DIST {
                return Err(InfoError::InvalidDistribution {
                    what: format!("channel row {c}"),
                    sum,
                });
            }
        }
        Ok(DiscreteChannel { rows, num_symbols })
    }

    pub fn num_symbols(&self) -> usize {
        self.num_symbols
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn prob(&self, c: usize, x: usize) -> f64 {
        self.rows[c][x]
    }

    /// Relabel the output alphabet by a permutation (column shuffle).
    pub fn permute_symbols(&self, perm: &[usize]) -> DiscreteChannel {
        let rows = self
            .rows
            .iter()
            .map(|row| {
                let mut out = vec![0.0; row.len()];
                for (src, &dst) in perm.iter().enumerate() {
                    out[dst] = row[src];
                }
                out
            })
            .collect();
        DiscreteChannel {
            rows,
            num_symbols: self.num_symbols,
        }
    }
}

/// Per-factor conditional tables Q(cᵢ | x̂).
#[derive(Debug, Clone)]
pub struct MeanFieldEncoder {
    /// tables[i][x][v] = Q(Cᵢ = v | x̂ = x)
    tables: Vec<Vec<Vec<f64>>>,
}

impl MeanFieldEncoder {
    pub fn new(tables: Vec<Vec<Vec<f64>>>) -> Result<Self, InfoError> {
        for (i, per_x) in tables.iter().enumerate() {
            for (x, row) in per_x.iter().enumerate() {
                if row.iter().any(|p| *p < 0.0) {
                    return Err(InfoError::NegativeProbability(format!(
                        "encoder factor {i}, symbol {x}"
                    )));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > TOL_DIST {
                    return Err(InfoError::InvalidDistribution {
                        what: format!("encoder factor {i}, symbol {x}"),
                        sum,
                    });
                }
            }
        }
        Ok(MeanFieldEncoder { tables })
    }

    /// Encoder that ignores x̂ and answers with the prior marginals.
    pub fn from_prior(prior: &FactoredPrior, num_symbols: usize) -> Self {
        let tables = (0..prior.num_factors())
            .map(|i| vec![prior.factor(i).to_vec(); num_symbols])
            .collect();
        MeanFieldEncoder { tables }
    }

    pub fn prob(&self, factor: usize, x: usize, v: usize) -> f64 {
        self.tables[factor][x][v]
    }

    /// Q(c | x̂) = Πᵢ Q(cᵢ | x̂) for a joint factor assignment.
    pub fn joint_prob(&self, digits: &[usize], x: usize) -> f64 {
        self.tables
            .iter()
            .zip(digits)
            .map(|(t, &d)| t[x][d])
            .product()
    }
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|v| **v > 0.0)
        .map(|v| v * v.ln())
        .sum::<f64>()
}

/// Exact I, per-factor I, conditional TC, and entropies for one channel.
#[derive(Debug, Clone)]
pub struct InfoReport {
    pub mi: f64,
    pub factor_mi: Vec<f64>,
    pub expected_tc: f64,
    pub tc_per_symbol: Vec<f64>,
    pub symbol_marginal: Vec<f64>,
    pub prior_entropy: f64,
    pub factor_entropies: Vec<f64>,
}

impl InfoReport {
    pub fn factor_mi_sum(&self) -> f64 {
        self.factor_mi.iter().sum()
    }
}

fn check_dims(prior: &FactoredPrior, channel: &DiscreteChannel) -> Result<(), InfoError> {
    if channel.num_rows() != prior.joint_size() {
        return Err(InfoError::DimensionMismatch(format!(
            "channel has {} rows, prior joint support is {}",
            channel.num_rows(),
            prior.joint_size()
        )));
    }
    Ok(())
}

/// All quantities by exact summation; x̂ symbols with zero marginal are
/// excluded from conditional terms.
pub fn exact_information_report(
    prior: &FactoredPrior,
    channel: &DiscreteChannel,
) -> Result<InfoReport, InfoError> {
    check_dims(prior, channel)?;
    let nc = prior.joint_size();
    let m = channel.num_symbols();
    let sizes = prior.factor_sizes();
    let nf = sizes.len();

    let pc: Vec<f64> = (0..nc).map(|c| prior.joint_prob(c)).collect();
    let digits: Vec<Vec<usize>> = (0..nc).map(|c| prior.decode(c)).collect();

    // marginal p(x̂)
    let mut px = vec![0.0; m];
    for c in 0..nc {
        for x in 0..m {
            px[x] += pc[c] * channel.prob(c, x);
        }
    }

    // I(C; X̂)
    let mut mi = 0.0;
    for c in 0..nc {
        if pc[c] == 0.0 {
            continue;
        }
        for x in 0..m {
            let pxc = channel.prob(c, x);
            if pxc > 0.0 {
                mi += pc[c] * pxc * (pxc / px[x]).ln();
            }
        }
    }

    // per-factor joints p(cᵢ, x̂) and marginals
    let mut factor_mi = vec![0.0; nf];
    for i in 0..nf {
        let k = sizes[i];
        let mut joint = vec![0.0; k * m];
        for c in 0..nc {
            if pc[c] == 0.0 {
                continue;
            }
            let v = digits[c][i];
            for x in 0..m {
                joint[v * m + x] += pc[c] * channel.prob(c, x);
            }
        }
        let pi = prior.factor(i);
        let mut acc = 0.0;
        for v in 0..k {
            for x in 0..m {
                let j = joint[v * m + x];
                if j > 0.0 {
                    acc += j * (j / (pi[v] * px[x])).ln();
                }
            }
        }
        factor_mi[i] = acc;
    }

    // conditional total correlation per symbol
    let mut tc_per_symbol = vec![0.0; m];
    let mut expected_tc = 0.0;
    for x in 0..m {
        if px[x] == 0.0 {
            continue;
        }
        let posterior: Vec<f64> = (0..nc)
            .map(|c| pc[c] * channel.prob(c, x) / px[x])
            .collect();
        let mut marginals: Vec<Vec<f64>> = sizes.iter().map(|&k| vec![0.0; k]).collect();
        for c in 0..nc {
            if posterior[c] > 0.0 {
                for i in 0..nf {
                    marginals[i][digits[c][i]] += posterior[c];
                }
            }
        }
        let mut tc = 0.0;
        for c in 0..nc {
            if posterior[c] > 0.0 {
                let prod: f64 = (0..nf).map(|i| marginals[i][digits[c][i]]).product();
                tc += posterior[c] * (posterior[c] / prod).ln();
            }
        }
        tc_per_symbol[x] = tc;
        expected_tc += px[x] * tc;
    }

    Ok(InfoReport {
        mi,
        factor_mi,
        expected_tc,
        tc_per_symbol,
        symbol_marginal: px,
        prior_entropy: prior.entropy(),
        factor_entropies: (0..nf).map(|i| prior.factor_entropy(i)).collect(),
    })
}

/// Exact L_info(G, Q) = E[log Q(C | X̂)] + H(C). Returns −∞ when the encoder
/// assigns zero mass to a reachable (c, x̂) pair.
pub fn l_info_exact(
    prior: &FactoredPrior,
    channel: &DiscreteChannel,
    encoder: &MeanFieldEncoder,
) -> Result<f64, InfoError> {
    check_dims(prior, channel)?;
    let nc = prior.joint_size();
    let m = channel.num_symbols();
    let mut expectation = 0.0;
    for c in 0..nc {
        let pc = prior.joint_prob(c);
        if pc == 0.0 {
            continue;
        }
        let digits = prior.decode(c);
        for x in 0..m {
            let w = pc * channel.prob(c, x);
            if w == 0.0 {
                continue;
            }
            let q = encoder.joint_prob(&digits, x);
            if q == 0.0 {
                return Ok(f64::NEG_INFINITY);
            }
            expectation += w * q.ln();
        }
    }
    Ok(expectation + prior.entropy())
}

/// The bound-maximizing mean-field encoder: Q(cᵢ | x̂) = p(cᵢ | x̂), the
/// per-factor posterior marginals. Symbols with zero marginal get a uniform
/// row (they contribute nothing).
pub fn optimal_mean_field_encoder(
    prior: &FactoredPrior,
    channel: &DiscreteChannel,
) -> Result<MeanFieldEncoder, InfoError> {
    check_dims(prior, channel)?;
    let nc = prior.joint_size();
    let m = channel.num_symbols();
    let sizes = prior.factor_sizes();
    let nf = sizes.len();

    let pc: Vec<f64> = (0..nc).map(|c| prior.joint_prob(c)).collect();
    let digits: Vec<Vec<usize>> = (0..nc).map(|c| prior.decode(c)).collect();
    let mut px = vec![0.0; m];
    for c in 0..nc {
        for x in 0..m {
            px[x] += pc[c] * channel.prob(c, x);
        }
    }

    let mut tables: Vec<Vec<Vec<f64>>> = (0..nf)
        .map(|i| vec![vec![0.0; sizes[i]]; m])
        .collect();
    for x in 0..m {
        if px[x] == 0.0 {
            for (i, t) in tables.iter_mut().enumerate() {
                t[x] = vec![1.0 / sizes[i] as f64; sizes[i]];
            }
            continue;
        }
        for c in 0..nc {
            let post = pc[c] * channel.prob(c, x) / px[x];
            if post > 0.0 {
                for i in 0..nf {
                    tables[i][x][digits[c][i]] += post;
                }
            }
        }
        // renormalize away summation noise
        for t in tables.iter_mut() {
            let s: f64 = t[x].iter().sum();
            for v in t[x].iter_mut() {
                *v /= s;
            }
        }
    }
    MeanFieldEncoder::new(tables)
}

/// One named (in)equality with its measured slack.
#[derive(Debug, Clone)]
pub struct IdentityCheck {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    /// lhs − rhs; identities want |slack| small, inequalities want slack ≥ −tol.
    pub slack: f64,
    pub ok: bool,
}

/// Outcome of checking the decomposition, the bound chain, and the gap
/// identity on one channel.
#[derive(Debug, Clone)]
pub struct IdentityReport {
    pub checks: Vec<IdentityCheck>,
    pub report: InfoReport,
    pub l_info_optimal: f64,
    pub pass: bool,
}

impl IdentityReport {
    pub fn violations(&self) -> Vec<&IdentityCheck> {
        self.checks.iter().filter(|c| !c.ok).collect()
    }
}

pub const IDENTITY_TOL: f64 = 1e-10;

/// Assert, within 1e-10: (i) I = Σᵢ Iᵢ + E[TC]; (ii) the chain
/// H(C) ≥ I ≥ Σᵢ Iᵢ ≥ L_info for the optimal and the prior encoder;
/// (iii) I − L_info(optimal) = E[TC].
pub fn verify_identities(
    prior: &FactoredPrior,
    channel: &DiscreteChannel,
) -> Result<IdentityReport, InfoError> {
    let report = exact_information_report(prior, channel)?;
    let optimal = optimal_mean_field_encoder(prior, channel)?;
    let l_opt = l_info_exact(prior, channel, &optimal)?;
    let prior_enc = MeanFieldEncoder::from_prior(prior, channel.num_symbols());
    let l_prior = l_info_exact(prior, channel, &prior_enc)?;

    let eq = |name: &str, lhs: f64, rhs: f64| IdentityCheck {
        name: name.to_string(),
        lhs,
        rhs,
        slack: lhs - rhs,
        ok: (lhs - rhs).abs() < IDENTITY_TOL,
    };
    let ge = |name: &str, lhs: f64, rhs: f64| IdentityCheck {
        name: name.to_string(),
        lhs,
        rhs,
        slack: lhs - rhs,
        ok: lhs - rhs > -IDENTITY_TOL,
    };

    let sum_fmi = report.factor_mi_sum();
    let checks = vec![
        eq(
            "decomposition I = sum_i I_i + E[TC]",
            report.mi,
            sum_fmi + report.expected_tc,
        ),
        ge("H(C) >= I", report.prior_entropy, report.mi),
        ge("I >= sum_i I_i", report.mi, sum_fmi),
        ge("sum_i I_i >= L_info(optimal)", sum_fmi, l_opt),
        ge("sum_i I_i >= L_info(prior)", sum_fmi, l_prior),
        eq(
            "gap identity I - L_info(optimal) = E[TC]",
            report.mi - l_opt,
            report.expected_tc,
        ),
        ge("E[TC] >= 0", report.expected_tc, 0.0),
    ];
    let pass = checks.iter().all(|c| c.ok);
    Ok(IdentityReport {
        checks,
        report,
        l_info_optimal: l_opt,
        pass,
    })
}

// ── reference channels ────────────────────────────────────────────────────

/// X̂ = C₁ ⊕ C₂ over two uniform bits; two output symbols.
pub fn xor_channel() -> (FactoredPrior, DiscreteChannel) {
    let prior = FactoredPrior::uniform_binary_pair();
    let rows = vec![
        vec![1.0, 0.0], // (0,0) → 0
        vec![0.0, 1.0], // (0,1) → 1
        vec![0.0, 1.0], // (1,0) → 1
        vec![1.0, 0.0], // (1,1) → 0
    ];
    (prior, DiscreteChannel::new(rows).unwrap())
}

/// X̂ = (C₁, C₂) as four symbols: invertible, factorized posteriors.
pub fn identity_channel() -> (FactoredPrior, DiscreteChannel) {
    let prior = FactoredPrior::uniform_binary_pair();
    let rows = (0..4)
        .map(|c| {
            let mut row = vec![0.0; 4];
            row[c] = 1.0;
            row
        })
        .collect();
    (prior, DiscreteChannel::new(rows).unwrap())
}

/// X̂ = (X₁, X₂) with Xᵢ depending only on Cᵢ through a binary symmetric
/// channel with flip probability `flip`.
pub fn product_channel(flip: f64) -> (FactoredPrior, DiscreteChannel) {
    let prior = FactoredPrior::uniform_binary_pair();
    let bsc = |c: usize, x: usize| if c == x { 1.0 - flip } else { flip };
    let rows = (0..4)
        .map(|c| {
            let (c1, c2) = (c / 2, c % 2);
            (0..4)
                .map(|x| {
                    let (x1, x2) = (x / 2, x % 2);
                    bsc(c1, x1) * bsc(c2, x2)
                })
                .collect()
        })
        .collect();
    (prior, DiscreteChannel::new(rows).unwrap())
}

/// Linear interpolation from the 4-symbol identity/product channel (ε = 0)
/// to the XOR channel embedded in the same alphabet (ε = 1).
pub fn product_to_xor_channel(eps: f64) -> (FactoredPrior, DiscreteChannel) {
    let prior = FactoredPrior::uniform_binary_pair();
    let rows = (0..4usize)
        .map(|c| {
            let (c1, c2) = (c / 2, c % 2);
            let xor_sym = (c1 ^ c2) * 2;
            let mut row = vec![0.0; 4];
            row[c] += 1.0 - eps;
            row[xor_sym] += eps;
            row
        })
        .collect();
    (prior, DiscreteChannel::new(rows).unwrap())
}

/// Random channel over two uniform bits: each row Dirichlet(1, …, 1) over
/// `num_symbols` outputs.
pub fn random_binary_pair_channel(
    rng: &mut impl Rng,
    num_symbols: usize,
) -> (FactoredPrior, DiscreteChannel) {
    let prior = FactoredPrior::uniform_binary_pair();
    let rows = (0..4)
        .map(|_| {
            // Dirichlet(1,...,1) = normalized unit exponentials
            let draws: Vec<f64> = (0..num_symbols)
                .map(|_| -(1.0 - rng.gen::<f64>()).ln())
                .collect();
            let sum: f64 = draws.iter().sum();
            draws.into_iter().map(|d| d / sum).collect()
        })
        .collect();
    (prior, DiscreteChannel::new(rows).unwrap())
}

/// One point of the limit experiment curve.
#[derive(Debug, Clone)]
pub struct LimitPoint {
    pub eps: f64,
    pub mi: f64,
    pub l_info_optimal: f64,
    pub gap: f64,
    pub expected_tc: f64,
}

/// Evaluate the product→XOR family at the given interpolation points.
pub fn limit_experiment(epsilons: &[f64]) -> Result<Vec<LimitPoint>, InfoError> {
    epsilons
        .iter()
        .map(|&eps| {
            let (prior, channel) = product_to_xor_channel(eps);
            let report = exact_information_report(&prior, &channel)?;
            let enc = optimal_mean_field_encoder(&prior, &channel)?;
            let l_opt = l_info_exact(&prior, &channel, &enc)?;
            Ok(LimitPoint {
                eps,
                mi: report.mi,
                l_info_optimal: l_opt,
                gap: report.mi - l_opt,
                expected_tc: report.expected_tc,
            })
        })
        .collect()
}
