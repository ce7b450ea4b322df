//! Adversarial value function, mutual-information lower bound, their Monte
//! Carlo estimators, and the alternating (D, G+Q) training step.
//!
//! Per step: one discriminator update ascends the batch estimate of
//!
//! ```text
//! V = (1/B) Σ [log(1 − D(x̂)) + log D(x)]
//! ```
//!
//! then one generator+posterior update descends the non-saturating surrogate
//! minus β times the bound estimate
//!
//! ```text
//! L_info = (1/B) Σ [log Q(c | x̂) − log p(c)].
//! ```
//!
//! The reported `v` is always the plain value-function estimate; the
//! surrogate only shapes generator gradients. In the G+Q phase the surrogate
//! term updates generator parameters only, while the −β·L_info term updates
//! the generator, the posterior heads, and the shared discriminator trunk —
//! the adversarial head moves only in the D phase.
//!
//! Batches evaluate per-sample graphs in parallel and reduce gradients in
//! sample order, so results are bit-identical for a fixed seed at any thread
//! count.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::graph::{Graph, GraphError, NodeId};
use crate::latent::{self, FactorValue, LatentSample, LatentSpec, QPosterior};
use crate::models::{self, GanArch, ModelError, QHeadNodes};
use crate::optim::{self, AdamHyper, OptimError, ParameterStore};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("batch sizes differ: {fake} fake vs {real} real")]
    BatchSizeMismatch { fake: usize, real: usize },
    #[error("discriminator output {value} outside (0, 1) (missing sigmoid?)")]
    ProbabilityRange { value: f64 },
    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize },
    #[error("{what} has {got} entries, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Latent(#[from] latent::LatentError),
}

/// Training hyper-parameters plus the architecture switches that name the
/// variant: styles off with β > 0 recovers InfoGAN, styles on with β = 0 is
/// plain StyleGAN, styles on with β > 0 is InfoStyleGAN (with a `-Discrete`
/// suffix when the latent factors are all discrete).
#[derive(Debug, Clone)]
pub struct TrainingConfig {
    pub beta: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub styles_enabled: bool,
    /// Zero disables the optional gradient-penalty stabilizer.
    pub r1_gamma: f64,
    pub sample_every: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            beta: 1.0,
            batch_size: 8,
            steps: 2000,
            lr: 1e-3,
            seed: 0,
            styles_enabled: true,
            r1_gamma: 0.0,
            sample_every: 500,
        }
    }
}

impl TrainingConfig {
    pub fn variant_name(&self, spec: &LatentSpec) -> String {
        let mut name = match (self.styles_enabled, self.beta > 0.0) {
            (false, true) => "InfoGAN",
            (true, false) => "StyleGAN",
            (true, true) => "InfoStyleGAN",
            (false, false) => "GAN",
        }
        .to_string();
        if self.beta > 0.0 && spec.is_discrete_only() {
            name.push_str("-Discrete");
        }
        name
    }
}

/// Per-step losses.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub v: f64,
    pub l_info: f64,
    pub d_loss: f64,
    pub g_loss: f64,
}

/// Full training trace with running-average helpers.
#[derive(Debug, Clone, Default)]
pub struct LossReport {
    pub records: Vec<LossRecord>,
}

impl LossReport {
    /// Cumulative mean of L̃_info up to and including each step.
    pub fn l_info_running_mean(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.records.len());
        let mut acc = 0.0;
        for (i, r) in self.records.iter().enumerate() {
            acc += r.l_info;
            out.push(acc / (i + 1) as f64);
        }
        out
    }

    /// Sample standard deviation of per-step L̃_info up to each step
    /// (zero while fewer than two steps are available).
    pub fn l_info_running_std(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.records.len());
        let (mut sum, mut sumsq) = (0.0, 0.0);
        for (i, r) in self.records.iter().enumerate() {
            sum += r.l_info;
            sumsq += r.l_info * r.l_info;
            let n = (i + 1) as f64;
            if i == 0 {
                out.push(0.0);
            } else {
                let var = (sumsq - sum * sum / n) / (n - 1.0);
                out.push(var.max(0.0).sqrt());
            }
        }
        out
    }

    /// Append records as `step,v,linfo,d_loss,g_loss`.
    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        use std::io::Write;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "step,v,linfo,d_loss,g_loss")?;
        for r in &self.records {
            writeln!(
                f,
                "{},{},{},{},{}",
                r.step, r.v, r.l_info, r.d_loss, r.g_loss
            )?;
        }
        f.flush()
    }
}

/// Eq.-style batch value function from discriminator probabilities, with the
/// open-interval range check.
pub fn adv_value_from_probs(fake_probs: &[f64], real_probs: &[f64]) -> Result<f64, LossError> {
    if fake_probs.is_empty() || real_probs.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    if fake_probs.len() != real_probs.len() {
        return Err(LossError::BatchSizeMismatch {
            fake: fake_probs.len(),
            real: real_probs.len(),
        });
    }
    for &p in fake_probs.iter().chain(real_probs) {
        if !(p > 0.0 && p < 1.0) {
            return Err(LossError::ProbabilityRange { value: p });
        }
    }
    let b = fake_probs.len() as f64;
    let total: f64 = fake_probs
        .iter()
        .zip(real_probs)
        .map(|(pf, pr)| (1.0 - pf).ln() + pr.ln())
        .sum();
    Ok(total / b)
}

/// Run the discriminator over both batches and evaluate the value function.
pub fn adv_value_estimate(
    store: &ParameterStore,
    arch: &GanArch,
    fake_batch: &[Tensor],
    real_batch: &[Tensor],
) -> Result<f64, LossError> {
    let probs = |batch: &[Tensor]| -> Result<Vec<f64>, LossError> {
        batch
            .iter()
            .map(|img| {
                let (logit, _, _) = models::discriminate(store, arch, img)?;
                Ok(sigmoid(logit))
            })
            .collect()
    };
    adv_value_from_probs(&probs(fake_batch)?, &probs(real_batch)?)
}

/// Monte Carlo estimate of the information lower bound:
/// (1/B) Σ [log Q(c | x̂) − log p(c)].
pub fn info_lower_bound_estimate(
    posteriors: &[QPosterior],
    samples: &[LatentSample],
    spec: &LatentSpec,
) -> Result<f64, LossError> {
    if posteriors.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    if posteriors.len() != samples.len() {
        return Err(LossError::LengthMismatch {
            what: "posteriors",
            expected: samples.len(),
            got: posteriors.len(),
        });
    }
    let mut total = 0.0;
    for (post, s) in posteriors.iter().zip(samples) {
        total += latent::q_log_prob(post, &s.c)? - latent::log_prior(spec, &s.c)?;
    }
    Ok(total / posteriors.len() as f64)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// relu(x) composed from leaky-relu and scalar affines:
/// relu(x) = (leaky(x) − 0.2 x) / 0.8 = 1.25·leaky(x) − 0.25·x.
fn relu_node(g: &mut Graph, x: NodeId) -> Result<NodeId, GraphError> {
    let l = g.leaky_relu(x);
    let a = g.affine_scalar(l, 1.25, 0.0);
    let b = g.affine_scalar(x, -0.25, 0.0);
    g.add(a, b)
}

/// softplus(x) = relu(x) + log(1 + exp(−|x|)) on a one-element node,
/// saturation-free for any finite logit: the exponent is never positive.
fn softplus_node(g: &mut Graph, x: NodeId) -> Result<NodeId, GraphError> {
    let xs = g.sum(x);
    let r = relu_node(g, xs)?;
    // −|x| = x − 2·relu(x)
    let m2r = g.affine_scalar(r, -2.0, 0.0);
    let neg_abs = g.add(xs, m2r)?;
    let e = g.exp(neg_abs)?;
    let onep = g.affine_scalar(e, 1.0, 1.0);
    let lp = g.log(onep)?;
    g.add(r, lp)
}

/// log D = −softplus(−z) from a logit node (any one-element shape).
fn log_sigmoid_node(g: &mut Graph, logit: NodeId) -> Result<NodeId, GraphError> {
    let neg = g.affine_scalar(logit, -1.0, 0.0);
    let sp = softplus_node(g, neg)?;
    Ok(g.affine_scalar(sp, -1.0, 0.0))
}

/// log (1 − D) = −softplus(z) from a logit node.
fn log_one_minus_sigmoid_node(g: &mut Graph, logit: NodeId) -> Result<NodeId, GraphError> {
    let sp = softplus_node(g, logit)?;
    Ok(g.affine_scalar(sp, -1.0, 0.0))
}

/// In-graph log Q(c | x̂) for one sample, plus the constant −log p(c).
fn l_info_sample_node(
    g: &mut Graph,
    heads: &[QHeadNodes],
    sample: &LatentSample,
    spec: &LatentSpec,
) -> Result<NodeId, LossError> {
    let mut acc: Option<NodeId> = None;
    for (head, value) in heads.iter().zip(&sample.c) {
        let term = match (head, value) {
            (QHeadNodes::Discrete { logits }, v) => {
                let k = g.value(*logits).numel();
                let j = match v {
                    FactorValue::Bit(b) => usize::from(*b),
                    FactorValue::Class(c) => *c,
                    FactorValue::Real(_) => unreachable!("discrete head, continuous value"),
                };
                let mut onehot = vec![0.0; k];
                onehot[j] = 1.0;
                let oh = g.input(Tensor::from_vec(onehot));
                let picked = g.mul(*logits, oh)?;
                let picked = g.sum(picked);
                // max-shifted log-sum-exp; the shift is an exact constant
                // offset so gradients are unchanged
                let m = g
                    .value(*logits)
                    .data()
                    .iter()
                    .cloned()
                    .fold(f64::NEG_INFINITY, f64::max);
                let shifted = g.affine_scalar(*logits, 1.0, -m);
                let e = g.exp(shifted)?;
                let z = g.sum(e);
                let log_z = g.log(z)?;
                let neg_log_z = g.affine_scalar(log_z, -1.0, -m);
                g.add(picked, neg_log_z)?
            }
            (QHeadNodes::Gaussian { mean, log_var }, FactorValue::Real(x)) => {
                let c = g.input(Tensor::from_vec(vec![*x]));
                let d = g.gaussian_log_density(c, *mean, *log_var)?;
                g.sum(d)
            }
            _ => unreachable!("gaussian head, discrete value"),
        };
        acc = Some(match acc {
            None => term,
            Some(prev) => g.add(prev, term)?,
        });
    }
    let log_q = acc.expect("at least one factor");
    let log_p = latent::log_prior(spec, &sample.c)?;
    Ok(g.affine_scalar(log_q, 1.0, -log_p))
}

/// Alternating trainer owning the parameter store and the rng stream.
pub struct Trainer {
    pub arch: GanArch,
    pub cfg: TrainingConfig,
    store: ParameterStore,
    hyper: AdamHyper,
    rng: ChaCha8Rng,
    step_idx: usize,
}

struct PhaseOutcome {
    grads: BTreeMap<String, Tensor>,
    values: Vec<f64>,
    aux: Vec<f64>,
}

impl Trainer {
    pub fn new(arch: GanArch, cfg: TrainingConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let store = models::init_params(&arch, &mut rng);
        Trainer::with_store(arch, cfg, store)
    }

    /// Resume from an existing parameter store (e.g. a loaded checkpoint).
    pub fn with_store(arch: GanArch, cfg: TrainingConfig, store: ParameterStore) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9E3779B97F4A7C15));
        let hyper = AdamHyper {
            lr: cfg.lr,
            ..AdamHyper::default()
        };
        Trainer {
            arch,
            cfg,
            store,
            hyper,
            rng,
            step_idx: 0,
        }
    }

    pub fn store(&self) -> &ParameterStore {
        &self.store
    }

    pub fn into_store(self) -> ParameterStore {
        self.store
    }

    pub fn steps_done(&self) -> usize {
        self.step_idx
    }

    fn draw_batch(&mut self, data: &[Tensor]) -> (Vec<LatentSample>, Vec<Vec<Tensor>>, Vec<usize>) {
        let b = self.cfg.batch_size;
        let samples: Vec<LatentSample> = (0..b)
            .map(|_| latent::sample(&self.arch.latent, &mut self.rng))
            .collect();
        let noise: Vec<Vec<Tensor>> = (0..b)
            .map(|_| models::sample_noise_maps(&mut self.rng))
            .collect();
        let reals: Vec<usize> = (0..b)
            .map(|_| self.rng.gen_range(0..data.len()))
            .collect();
        (samples, noise, reals)
    }

    /// Fake images without building gradient state for the generator.
    fn generate_batch(
        &self,
        samples: &[LatentSample],
        noise: &[Vec<Tensor>],
    ) -> Result<Vec<Tensor>, LossError> {
        samples
            .par_iter()
            .zip(noise)
            .map(|(s, n)| Ok(models::synthesize(&self.store, &self.arch, s, n)?))
            .collect()
    }

    fn d_phase(
        &mut self,
        data: &[Tensor],
        samples: &[LatentSample],
        noise: &[Vec<Tensor>],
        real_idx: &[usize],
    ) -> Result<PhaseOutcome, LossError> {
        let fakes = self.generate_batch(samples, noise)?;
        let r1 = self.cfg.r1_gamma;
        let r1_dirs: Vec<Option<Tensor>> = if r1 > 0.0 {
            real_idx
                .iter()
                .map(|_| {
                    let mut v = models::sample_noise_maps(&mut self.rng)
                        .pop()
                        .unwrap();
                    let norm = v.data().iter().map(|x| x * x).sum::<f64>().sqrt();
                    v.scale_assign(1.0 / norm.max(1e-12));
                    Some(v)
                })
                .collect()
        } else {
            real_idx.iter().map(|_| None).collect()
        };

        let per_sample: Vec<Result<(BTreeMap<String, Tensor>, f64), LossError>> = fakes
            .par_iter()
            .zip(real_idx.par_iter())
            .zip(r1_dirs.par_iter())
            .map(|((fake, &ri), dir)| {
                let real = &data[ri];
                let mut g = Graph::new();
                let fake_in = g.input(fake.clone());
                let real_in = g.input(real.clone());
                let df = models::discriminator_forward(&mut g, &self.store, &self.arch, fake_in)?;
                let dr = models::discriminator_forward(&mut g, &self.store, &self.arch, real_in)?;
                let term_fake = log_one_minus_sigmoid_node(&mut g, df.logit)?;
                let term_real = log_sigmoid_node(&mut g, dr.logit)?;
                let v = g.add(term_fake, term_real)?;
                // descend −V
                let mut d_target = g.affine_scalar(v, -1.0, 0.0);
                if let Some(u) = dir {
                    // directional finite-difference estimate of ‖∇ₓ logit‖²
                    let h = 1e-3;
                    let dim = real.numel() as f64;
                    let mut plus = real.clone();
                    let mut minus = real.clone();
                    for ((p, m), uv) in plus
                        .data_mut()
                        .iter_mut()
                        .zip(minus.data_mut())
                        .zip(u.data())
                    {
                        *p += h * uv;
                        *m -= h * uv;
                    }
                    let pin = g.input(plus);
                    let min = g.input(minus);
                    let dp = models::discriminator_forward(&mut g, &self.store, &self.arch, pin)?;
                    let dm = models::discriminator_forward(&mut g, &self.store, &self.arch, min)?;
                    let zp = g.sum(dp.logit);
                    let zm_neg = g.affine_scalar(dm.logit, -1.0, 0.0);
                    let zm_neg = g.sum(zm_neg);
                    let diff = g.add(zp, zm_neg)?;
                    let slope = g.affine_scalar(diff, 1.0 / (2.0 * h), 0.0);
                    let sq = g.mul(slope, slope)?;
                    let penalty = g.affine_scalar(sq, 0.5 * r1 * dim, 0.0);
                    d_target = g.add(d_target, penalty)?;
                }
                let grads = g.backward(d_target)?.into_param_map();
                Ok((grads, g.value(v).item()))
            })
            .collect();

        let mut grads = BTreeMap::new();
        let mut values = Vec::with_capacity(per_sample.len());
        for r in per_sample {
            let (g, v) = r?;
            // only discriminator-side parameters move in this phase
            let filtered: BTreeMap<String, Tensor> = g
                .into_iter()
                .filter(|(name, _)| name.starts_with("d."))
                .collect();
            optim::accumulate_grads(&mut grads, filtered);
            values.push(v);
        }
        optim::scale_grads(&mut grads, 1.0 / values.len() as f64);
        Ok(PhaseOutcome {
            grads,
            values,
            aux: Vec::new(),
        })
    }

    fn g_phase(
        &mut self,
        samples: &[LatentSample],
        noise: &[Vec<Tensor>],
    ) -> Result<PhaseOutcome, LossError> {
        let beta = self.cfg.beta;
        let per_sample: Vec<Result<(BTreeMap<String, Tensor>, f64, f64), LossError>> = samples
            .par_iter()
            .zip(noise.par_iter())
            .map(|(s, n)| {
                let mut g = Graph::new();
                let img = models::generator_forward(&mut g, &self.store, &self.arch, s, n)?;
                let df = models::discriminator_forward(&mut g, &self.store, &self.arch, img)?;
                // non-saturating surrogate: descend −log D(x̂)
                let log_d = log_sigmoid_node(&mut g, df.logit)?;
                let surrogate = g.affine_scalar(log_d, -1.0, 0.0);
                let l_info = l_info_sample_node(&mut g, &df.q_heads, s, &self.arch.latent)?;

                let mut grads: BTreeMap<String, Tensor> = g
                    .backward(surrogate)?
                    .into_param_map()
                    .into_iter()
                    .filter(|(name, _)| name.starts_with("g."))
                    .collect();
                if beta != 0.0 {
                    let info_target = g.affine_scalar(l_info, -beta, 0.0);
                    let info_grads: BTreeMap<String, Tensor> = g
                        .backward(info_target)?
                        .into_param_map()
                        .into_iter()
                        .filter(|(name, _)| {
                            name.starts_with("g.")
                                || name.starts_with("q.")
                                || name.starts_with("d.conv")
                                || name.starts_with("d.dense")
                        })
                        .collect();
                    optim::accumulate_grads(&mut grads, info_grads);
                }
                let g_loss =
                    g.value(surrogate).item() - beta * g.value(l_info).item();
                Ok((grads, g_loss, g.value(l_info).item()))
            })
            .collect();

        let mut grads = BTreeMap::new();
        let mut values = Vec::with_capacity(per_sample.len());
        let mut aux = Vec::with_capacity(per_sample.len());
        for r in per_sample {
            let (g, loss, li) = r?;
            optim::accumulate_grads(&mut grads, g);
            values.push(loss);
            aux.push(li);
        }
        optim::scale_grads(&mut grads, 1.0 / values.len() as f64);
        Ok(PhaseOutcome { grads, values, aux })
    }

    /// One alternating step: D update, then G+Q update, on fresh batches.
    pub fn step(&mut self, data: &[Tensor]) -> Result<LossRecord, LossError> {
        if data.is_empty() {
            return Err(LossError::EmptyBatch);
        }
        let step = self.step_idx;

        let (samples, noise, real_idx) = self.draw_batch(data);
        let d_out = self.d_phase(data, &samples, &noise, &real_idx)?;
        self.store.adam_step(&d_out.grads, &self.hyper)?;
        let v = mean(&d_out.values);

        let (samples, noise, _) = self.draw_batch(data);
        let g_out = self.g_phase(&samples, &noise)?;
        self.store.adam_step(&g_out.grads, &self.hyper)?;
        let g_loss = mean(&g_out.values);
        let l_info = mean(&g_out.aux);

        let record = LossRecord {
            step,
            v,
            l_info,
            d_loss: -v,
            g_loss,
        };
        if !(record.v.is_finite() && record.l_info.is_finite() && record.g_loss.is_finite()) {
            return Err(LossError::NonFinite { step });
        }
        self.step_idx += 1;
        Ok(record)
    }

    /// Run `cfg.steps` steps, invoking the hook after each one.
    pub fn train(
        &mut self,
        data: &[Tensor],
        mut hook: impl FnMut(&LossRecord, &ParameterStore),
    ) -> Result<LossReport, LossError> {
        let mut report = LossReport::default();
        for _ in 0..self.cfg.steps {
            let record = self.step(data)?;
            hook(&record, &self.store);
            report.records.push(record);
        }
        Ok(report)
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data;
    use crate::latent::{FactorPosterior, FactorSpec};

    fn tiny_data(n: usize) -> Vec<Tensor> {
        data::generate(n, 42).images
    }

    #[test]
    fn constant_half_discriminator_value() {
        // zero-initialized adversarial head gives D ≡ 0.5
        let arch = GanArch::new(LatentSpec::default_spec(), true);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let store = models::init_params(&arch, &mut rng);
        let imgs = tiny_data(4);
        let v = adv_value_estimate(&store, &arch, &imgs[..2].to_vec(), &imgs[2..].to_vec())
            .unwrap();
        assert!((v - 2.0 * 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn hand_batch_value() {
        // Eq.-style hand arithmetic on the stated probabilities
        let v = adv_value_from_probs(&[0.3, 0.1], &[0.8, 0.6]).unwrap();
        let expected = 0.5 * (0.7f64.ln() + 0.8f64.ln() + 0.9f64.ln() + 0.6f64.ln());
        assert!((v - expected).abs() < 1e-12);
        assert!((v - -0.5980023173383795).abs() < 1e-12);
    }

    #[test]
    fn discriminator_optimum_approaches_zero_from_below() {
        let v = adv_value_from_probs(&[1e-9], &[1.0 - 1e-9]).unwrap();
        assert!(v < 0.0 && v > -1e-8);
    }

    #[test]
    fn out_of_range_probability_is_rejected() {
        assert!(matches!(
            adv_value_from_probs(&[0.5], &[1.0]),
            Err(LossError::ProbabilityRange { .. })
        ));
        assert!(matches!(
            adv_value_from_probs(&[0.0], &[0.5]),
            Err(LossError::ProbabilityRange { .. })
        ));
    }

    #[test]
    fn info_bound_zero_when_posterior_equals_prior() {
        let spec = LatentSpec::new(
            0,
            vec![FactorSpec::Bernoulli { p: 0.5 }, FactorSpec::Categorical { k: 3 }],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let samples: Vec<LatentSample> =
            (0..16).map(|_| latent::sample(&spec, &mut rng)).collect();
        let posteriors: Vec<QPosterior> = samples
            .iter()
            .map(|_| QPosterior {
                factors: vec![
                    FactorPosterior::Discrete {
                        logits: vec![0.0, 0.0],
                    },
                    FactorPosterior::Discrete {
                        logits: vec![0.0, 0.0, 0.0],
                    },
                ],
            })
            .collect();
        let l = info_lower_bound_estimate(&posteriors, &samples, &spec).unwrap();
        assert!(l.abs() < 1e-12);
    }

    #[test]
    fn info_bound_confident_bernoulli() {
        // Q places 0.9 on the true bit of a fair coin for every sample
        let spec = LatentSpec::new(0, vec![FactorSpec::Bernoulli { p: 0.5 }]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples: Vec<LatentSample> =
            (0..32).map(|_| latent::sample(&spec, &mut rng)).collect();
        let posteriors: Vec<QPosterior> = samples
            .iter()
            .map(|s| {
                let truth = matches!(s.c[0], FactorValue::Bit(true));
                let logits = if truth {
                    vec![0.1f64.ln(), 0.9f64.ln()]
                } else {
                    vec![0.9f64.ln(), 0.1f64.ln()]
                };
                QPosterior {
                    factors: vec![FactorPosterior::Discrete { logits }],
                }
            })
            .collect();
        let l = info_lower_bound_estimate(&posteriors, &samples, &spec).unwrap();
        assert!((l - (0.9f64.ln() - 0.5f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn info_bound_perfect_recovery_reaches_entropy() {
        let spec = LatentSpec::new(
            0,
            vec![FactorSpec::Bernoulli { p: 0.5 }, FactorSpec::Categorical { k: 3 }],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let samples: Vec<LatentSample> =
            (0..32).map(|_| latent::sample(&spec, &mut rng)).collect();
        let posteriors: Vec<QPosterior> = samples
            .iter()
            .map(|s| {
                let bit = matches!(s.c[0], FactorValue::Bit(true));
                let class = match s.c[1] {
                    FactorValue::Class(c) => c,
                    _ => unreachable!(),
                };
                let mut cat = vec![-40.0; 3];
                cat[class] = 40.0;
                QPosterior {
                    factors: vec![
                        FactorPosterior::Discrete {
                            logits: if bit { vec![-40.0, 40.0] } else { vec![40.0, -40.0] },
                        },
                        FactorPosterior::Discrete { logits: cat },
                    ],
                }
            })
            .collect();
        let l = info_lower_bound_estimate(&posteriors, &samples, &spec).unwrap();
        assert!((l - spec.factor_entropy()).abs() < 1e-6);
    }

    #[test]
    fn variant_nomenclature() {
        let spec = LatentSpec::default_spec();
        let discrete = LatentSpec::default_discrete_spec();
        let mk = |styles: bool, beta: f64| TrainingConfig {
            styles_enabled: styles,
            beta,
            ..TrainingConfig::default()
        };
        assert_eq!(mk(false, 1.0).variant_name(&spec), "InfoGAN");
        assert_eq!(mk(true, 0.0).variant_name(&spec), "StyleGAN");
        assert_eq!(mk(true, 1.0).variant_name(&spec), "InfoStyleGAN");
        assert_eq!(mk(true, 1.0).variant_name(&discrete), "InfoStyleGAN-Discrete");
    }

    #[test]
    fn fixed_seed_training_is_bit_identical() {
        let data = tiny_data(32);
        let cfg = TrainingConfig {
            steps: 3,
            batch_size: 4,
            ..TrainingConfig::default()
        };
        let arch = GanArch::new(LatentSpec::default_discrete_spec(), true);
        let run = || {
            let mut t = Trainer::new(arch.clone(), cfg.clone());
            let report = t.train(&data, |_, _| {}).unwrap();
            (report, t.into_store())
        };
        let (r1, s1) = run();
        let (r2, s2) = run();
        assert_eq!(r1.records, r2.records);
        assert!(s1.bit_identical(&s2));
    }

    #[test]
    fn beta_zero_leaves_q_heads_untouched() {
        let data = tiny_data(32);
        let cfg = TrainingConfig {
            steps: 2,
            batch_size: 4,
            beta: 0.0,
            ..TrainingConfig::default()
        };
        let arch = GanArch::new(LatentSpec::default_spec(), true);
        let mut t = Trainer::new(arch.clone(), cfg);
        let before = t.store().get("q.f0.w").unwrap().clone();
        t.train(&data, |_, _| {}).unwrap();
        assert_eq!(t.store().get("q.f0.w").unwrap(), &before);
    }

    #[test]
    fn styles_disabled_never_updates_mapping() {
        let data = tiny_data(32);
        let cfg = TrainingConfig {
            steps: 2,
            batch_size: 4,
            styles_enabled: false,
            ..TrainingConfig::default()
        };
        let arch = GanArch::new(LatentSpec::default_spec(), false);
        let mut t = Trainer::new(arch.clone(), cfg);
        let before = t.store().get("g.map.w0").unwrap().clone();
        t.train(&data, |_, _| {}).unwrap();
        assert_eq!(t.store().get("g.map.w0").unwrap(), &before);
        // while the projection path does move
        assert_ne!(
            t.store().get("g.proj.w").unwrap(),
            &models::init_params(&arch, &mut ChaCha8Rng::seed_from_u64(t.cfg.seed))
                .get("g.proj.w")
                .unwrap()
                .clone()
        );
    }

    #[test]
    fn r1_penalty_changes_discriminator_updates() {
        let data = tiny_data(16);
        let arch = GanArch::new(LatentSpec::default_discrete_spec(), true);
        // a non-zero adversarial head so the logit depends on the input and
        // the penalty's directional slope is non-trivial
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let mut base = models::init_params(&arch, &mut rng);
        let w = Tensor::new(
            vec![64, 1],
            (0..64).map(|i| ((i % 5) as f64 - 2.0) * 0.1).collect(),
        )
        .unwrap();
        base.set_value("d.adv.w", w).unwrap();
        let run = |r1_gamma: f64| {
            let cfg = TrainingConfig {
                steps: 1,
                batch_size: 2,
                r1_gamma,
                ..TrainingConfig::default()
            };
            let mut t = Trainer::with_store(arch.clone(), cfg, base.clone());
            t.train(&data, |_, _| {}).unwrap();
            // d.adv.w only moves in the D phase, whose batch is identical
            // across the two runs; any difference comes from the penalty
            t.into_store().get("d.adv.w").unwrap().clone()
        };
        assert_ne!(run(0.0), run(10.0));
    }

    /// Gradient of the combined G+Q objective against central differences on
    /// a handful of parameters, B = 2.
    #[test]
    fn combined_objective_gradient_check() {
        let arch = GanArch::new(LatentSpec::default_spec(), true);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = models::init_params(&arch, &mut rng);
        // non-zero heads so every path carries gradient
        for name in ["d.adv.w", "q.f0.w", "q.f3.mu.w", "q.f3.lv.w"] {
            let t = store.get(name).unwrap().clone();
            let fresh = Tensor::new(
                t.shape().to_vec(),
                (0..t.numel()).map(|i| ((i % 7) as f64 - 3.0) * 0.03).collect(),
            )
            .unwrap();
            store.set_value(name, fresh).unwrap();
        }
        let samples: Vec<LatentSample> = (0..2)
            .map(|_| latent::sample(&arch.latent, &mut rng))
            .collect();
        let noise: Vec<Vec<Tensor>> = (0..2)
            .map(|_| models::sample_noise_maps(&mut rng))
            .collect();
        let beta = 1.0;

        let objective = |st: &ParameterStore| {
            let mut total = 0.0;
            for (s, n) in samples.iter().zip(&noise) {
                let mut g = Graph::new();
                let img = models::generator_forward(&mut g, st, &arch, s, n).unwrap();
                let df = models::discriminator_forward(&mut g, st, &arch, img).unwrap();
                let log_d = log_sigmoid_node(&mut g, df.logit).unwrap();
                let l_info = l_info_sample_node(&mut g, &df.q_heads, s, &arch.latent).unwrap();
                total += -g.value(log_d).item() - beta * g.value(l_info).item();
            }
            total / 2.0
        };

        // analytic gradients via the same path the trainer takes, but
        // unfiltered so every parameter can be compared
        let mut analytic: BTreeMap<String, Tensor> = BTreeMap::new();
        for (s, n) in samples.iter().zip(&noise) {
            let mut g = Graph::new();
            let img = models::generator_forward(&mut g, &store, &arch, s, n).unwrap();
            let df = models::discriminator_forward(&mut g, &store, &arch, img).unwrap();
            let log_d = log_sigmoid_node(&mut g, df.logit).unwrap();
            let surrogate = g.affine_scalar(log_d, -1.0, 0.0);
            let l_info = l_info_sample_node(&mut g, &df.q_heads, s, &arch.latent).unwrap();
            let info_target = g.affine_scalar(l_info, -beta, 0.0);
            let both = g.add(surrogate, info_target).unwrap();
            optim::accumulate_grads(&mut analytic, g.backward(both).unwrap().into_param_map());
        }
        for t in analytic.values_mut() {
            t.scale_assign(0.5);
        }

        for name in ["g.map.w1", "g.blk2.conv.w", "d.conv3.w", "q.f0.w", "q.f3.lv.w"] {
            let grad = analytic.get(name).unwrap();
            let base = store.get(name).unwrap().clone();
            let mut worst = 0.0f64;
            for probe in 0..4 {
                let j = (probe * 13) % base.numel();
                let mut probe_store = store.clone();
                let mut t = base.clone();
                t.data_mut()[j] += 1e-5;
                probe_store.set_value(name, t).unwrap();
                let up = objective(&probe_store);
                let mut t = base.clone();
                t.data_mut()[j] -= 1e-5;
                probe_store.set_value(name, t).unwrap();
                let down = objective(&probe_store);
                let numeric = (up - down) / 2e-5;
                worst = worst.max(crate::gradcheck::rel_err(grad.data()[j], numeric));
            }
            assert!(worst < 1e-4, "{name}: rel err {worst:.3e}");
        }
    }

    #[test]
    fn short_training_run_improves_info_bound() {
        let data = tiny_data(128);
        let cfg = TrainingConfig {
            steps: 120,
            batch_size: 8,
            ..TrainingConfig::default()
        };
        let arch = GanArch::new(LatentSpec::default_discrete_spec(), true);
        let mut t = Trainer::new(arch, cfg);
        let report = t.train(&data, |_, _| {}).unwrap();
        let head = mean(
            &report.records[..5]
                .iter()
                .map(|r| r.l_info)
                .collect::<Vec<_>>(),
        );
        let tail = mean(
            &report.records[100..]
                .iter()
                .map(|r| r.l_info)
                .collect::<Vec<_>>(),
        );
        assert!(
            tail > head,
            "L_info should grow: head mean {head}, tail mean {tail}"
        );
    }
}
