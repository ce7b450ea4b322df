//! Toy-scale style-based generator and shared-trunk discriminator.
//!
//! Generator: a 4-layer fully connected mapping network turns the latent
//! encoding into a single style vector `w` (no mixing); synthesis starts from
//! a learned 4×4 constant and runs blocks at 4, 8, 16, 32 px, each block
//! doing upsample (except the base) → conv → noise injection → channel-wise
//! affine modulation from `w` → leaky-relu, then a 1×1-equivalent projection
//! and sigmoid to a 1×32×32 image in [0, 1].
//!
//! With styles disabled the mapping network is bypassed: the encoding feeds a
//! learned linear projection to the base block and no modulation is applied.
//!
//! Discriminator: conv trunk at 32→16→8→4 px whose last activations are the
//! `conv` feature tap (64×4×4), a dense layer giving the 64-wide `dense` tap,
//! a scalar adversarial head, and per-factor posterior heads — all off the
//! same trunk.

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::graph::{Graph, GraphError, NodeId};
use crate::latent::{FactorPosterior, FactorSpec, LatentSample, LatentSpec, QPosterior};
use crate::optim::{OptimError, ParameterStore};
use crate::tensor::{Tensor, TensorError};

pub const IMG_RES: usize = 32;
pub const STYLE_DIM: usize = 64;
pub const DENSE_DIM: usize = 64;
pub const CONV_FEAT_CHANNELS: usize = 64;
const MAPPING_LAYERS: usize = 4;
/// Synthesis channel widths at 4, 8, 16, 32 px.
const G_CHANNELS: [usize; 4] = [48, 32, 16, 8];
/// Discriminator conv widths at 32, 16, 8, 4 px.
const D_CHANNELS: [usize; 4] = [16, 24, 48, CONV_FEAT_CHANNELS];

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Store(#[from] OptimError),
    #[error("expected image shape [1, {IMG_RES}, {IMG_RES}], got {0:?}")]
    BadImageShape(Vec<usize>),
    #[error("encoding width {got} does not match mapping input {expected}")]
    BadEncodingWidth { expected: usize, got: usize },
    #[error("expected {expected} noise maps, got {got}")]
    BadNoiseMaps { expected: usize, got: usize },
    #[error("checkpoint mismatch for tensor '{name}': expected shape {expected:?}, found {found}")]
    CheckpointShape {
        name: String,
        expected: Vec<usize>,
        found: String,
    },
}

/// Architecture description: the latent layout plus the style switch.
/// Network widths are fixed toy-scale constants.
#[derive(Debug, Clone)]
pub struct GanArch {
    pub latent: LatentSpec,
    pub styles_enabled: bool,
}

impl GanArch {
    pub fn new(latent: LatentSpec, styles_enabled: bool) -> Self {
        GanArch {
            latent,
            styles_enabled,
        }
    }

    pub fn num_blocks(&self) -> usize {
        G_CHANNELS.len()
    }

    /// Resolution of synthesis block `i`.
    fn block_res(i: usize) -> usize {
        4 << i
    }
}

fn he_tensor(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    normal_tensor(rng, shape, std)
}

fn normal_tensor(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * std)
            .collect(),
    )
    .unwrap()
}

/// Kaiming-style initialization of every generator, discriminator, and
/// posterior-head parameter. The adversarial head starts at zero, so
/// D(x) = 0.5 out of the box.
pub fn init_params(arch: &GanArch, rng: &mut impl Rng) -> ParameterStore {
    let mut store = ParameterStore::new();
    let enc = arch.latent.encoding_dim();

    let mut widths = vec![enc];
    widths.extend([STYLE_DIM; MAPPING_LAYERS]);
    for i in 0..MAPPING_LAYERS {
        let (fin, fout) = (widths[i], widths[i + 1]);
        store
            .insert(&format!("g.map.w{i}"), he_tensor(rng, &[fin, fout], fin))
            .unwrap();
        store
            .insert(&format!("g.map.b{i}"), Tensor::zeros(&[1, fout]))
            .unwrap();
    }

    store
        .insert("g.base", normal_tensor(rng, &[G_CHANNELS[0], 4, 4], 1.0))
        .unwrap();
    store
        .insert("g.proj.w", he_tensor(rng, &[enc, G_CHANNELS[0] * 16], enc))
        .unwrap();
    store
        .insert("g.proj.b", Tensor::zeros(&[1, G_CHANNELS[0] * 16]))
        .unwrap();

    for i in 0..G_CHANNELS.len() {
        let cin = if i == 0 { G_CHANNELS[0] } else { G_CHANNELS[i - 1] };
        let cout = G_CHANNELS[i];
        store
            .insert(
                &format!("g.blk{i}.conv.w"),
                he_tensor(rng, &[cout, cin, 3, 3], cin * 9),
            )
            .unwrap();
        store
            .insert(&format!("g.blk{i}.conv.b"), Tensor::zeros(&[cout]))
            .unwrap();
        store
            .insert(&format!("g.blk{i}.noise"), Tensor::filled(&[cout], 0.1))
            .unwrap();
        store
            .insert(
                &format!("g.blk{i}.style_s.w"),
                normal_tensor(rng, &[STYLE_DIM, cout], 0.05),
            )
            .unwrap();
        store
            .insert(&format!("g.blk{i}.style_s.b"), Tensor::filled(&[cout], 1.0))
            .unwrap();
        store
            .insert(
                &format!("g.blk{i}.style_b.w"),
                normal_tensor(rng, &[STYLE_DIM, cout], 0.05),
            )
            .unwrap();
        store
            .insert(&format!("g.blk{i}.style_b.b"), Tensor::zeros(&[cout]))
            .unwrap();
    }

    let c_last = *G_CHANNELS.last().unwrap();
    store
        .insert("g.img.w", he_tensor(rng, &[1, c_last], c_last))
        .unwrap();
    store.insert("g.img.b", Tensor::zeros(&[1])).unwrap();

    for i in 0..D_CHANNELS.len() {
        let cin = if i == 0 { 1 } else { D_CHANNELS[i - 1] };
        let cout = D_CHANNELS[i];
        store
            .insert(
                &format!("d.conv{i}.w"),
                he_tensor(rng, &[cout, cin, 3, 3], cin * 9),
            )
            .unwrap();
        store
            .insert(&format!("d.conv{i}.b"), Tensor::zeros(&[cout]))
            .unwrap();
    }
    let conv_flat = CONV_FEAT_CHANNELS * 16;
    store
        .insert(
            "d.dense.w",
            he_tensor(rng, &[conv_flat, DENSE_DIM], conv_flat),
        )
        .unwrap();
    store
        .insert("d.dense.b", Tensor::zeros(&[1, DENSE_DIM]))
        .unwrap();

    store
        .insert("d.adv.w", Tensor::zeros(&[DENSE_DIM, 1]))
        .unwrap();
    store.insert("d.adv.b", Tensor::zeros(&[1, 1])).unwrap();

    // posterior heads carry gradient into the generator and the shared
    // trunk from the first step, so they get a live initialization
    for (i, f) in arch.latent.factors.iter().enumerate() {
        match f {
            FactorSpec::Bernoulli { .. } | FactorSpec::Categorical { .. } => {
                let k = f.posterior_param_count();
                store
                    .insert(
                        &format!("q.f{i}.w"),
                        he_tensor(rng, &[DENSE_DIM, k], DENSE_DIM),
                    )
                    .unwrap();
                store
                    .insert(&format!("q.f{i}.b"), Tensor::zeros(&[1, k]))
                    .unwrap();
            }
            FactorSpec::Uniform { .. } => {
                store
                    .insert(
                        &format!("q.f{i}.mu.w"),
                        he_tensor(rng, &[DENSE_DIM, 1], DENSE_DIM),
                    )
                    .unwrap();
                store
                    .insert(&format!("q.f{i}.mu.b"), Tensor::zeros(&[1, 1]))
                    .unwrap();
                store
                    .insert(
                        &format!("q.f{i}.lv.w"),
                        he_tensor(rng, &[DENSE_DIM, 1], DENSE_DIM),
                    )
                    .unwrap();
                store
                    .insert(&format!("q.f{i}.lv.b"), Tensor::zeros(&[1, 1]))
                    .unwrap();
            }
        }
    }

    store
}

/// Every (name, shape) pair the architecture expects in a parameter store.
pub fn expected_shapes(arch: &GanArch) -> Vec<(String, Vec<usize>)> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let template = init_params(arch, &mut rng);
    template
        .names()
        .map(|n| (n.to_string(), template.get(n).unwrap().shape().to_vec()))
        .collect()
}

/// Check that a loaded store matches the architecture, naming the first
/// offending tensor.
pub fn validate_store(arch: &GanArch, store: &ParameterStore) -> Result<(), ModelError> {
    for (name, shape) in expected_shapes(arch) {
        match store.get(&name) {
            None => {
                return Err(ModelError::CheckpointShape {
                    name,
                    expected: shape,
                    found: "missing".to_string(),
                })
            }
            Some(t) if t.shape() != shape => {
                return Err(ModelError::CheckpointShape {
                    name,
                    expected: shape,
                    found: format!("{:?}", t.shape()),
                })
            }
            _ => {}
        }
    }
    Ok(())
}

fn linear(
    g: &mut Graph,
    store: &ParameterStore,
    x: NodeId,
    w_name: &str,
    b_name: &str,
) -> Result<NodeId, GraphError> {
    let w = g.param(store, w_name)?;
    let b = g.param(store, b_name)?;
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

/// Style affine from `w`: a [1, STYLE_DIM] matmul reshaped to [C] plus a [C]
/// bias, ready for channel-wise modulation.
fn style_affine(
    g: &mut Graph,
    store: &ParameterStore,
    style: NodeId,
    w_name: &str,
    b_name: &str,
    cout: usize,
) -> Result<NodeId, GraphError> {
    let w = g.param(store, w_name)?;
    let b = g.param(store, b_name)?;
    let y = g.matmul(style, w)?;
    let y = g.reshape(y, vec![cout])?;
    g.add(y, b)
}

/// Mapping network: encoding [1, enc] → style vector [1, STYLE_DIM].
pub fn mapping_forward(
    g: &mut Graph,
    store: &ParameterStore,
    enc: NodeId,
) -> Result<NodeId, GraphError> {
    let mut x = enc;
    for i in 0..MAPPING_LAYERS {
        x = linear(g, store, x, &format!("g.map.w{i}"), &format!("g.map.b{i}"))?;
        if i + 1 < MAPPING_LAYERS {
            x = g.leaky_relu(x);
        }
    }
    Ok(x)
}

/// Draw one standard-normal noise map per synthesis block.
pub fn sample_noise_maps(rng: &mut impl Rng) -> Vec<Tensor> {
    (0..G_CHANNELS.len())
        .map(|i| {
            let r = GanArch::block_res(i);
            normal_tensor(rng, &[1, r, r], 1.0)
        })
        .collect()
}

fn check_noise(arch: &GanArch, noise: &[Tensor]) -> Result<(), ModelError> {
    if noise.len() != arch.num_blocks() {
        return Err(ModelError::BadNoiseMaps {
            expected: arch.num_blocks(),
            got: noise.len(),
        });
    }
    Ok(())
}

/// Synthesis network. `style` drives per-block modulation when styles are
/// enabled; `enc` feeds the base projection when they are not.
pub fn synthesis_forward(
    g: &mut Graph,
    store: &ParameterStore,
    arch: &GanArch,
    style: Option<NodeId>,
    enc: Option<NodeId>,
    noise: &[NodeId],
) -> Result<NodeId, ModelError> {
    let mut x = if arch.styles_enabled {
        g.param(store, "g.base")?
    } else {
        let enc = enc.expect("styles disabled requires the encoding");
        let p = linear(g, store, enc, "g.proj.w", "g.proj.b")?;
        g.reshape(p, vec![G_CHANNELS[0], 4, 4])?
    };

    for i in 0..G_CHANNELS.len() {
        let cout = G_CHANNELS[i];
        if i > 0 {
            x = g.upsample_nearest2(x)?;
        }
        let w = g.param(store, &format!("g.blk{i}.conv.w"))?;
        let b = g.param(store, &format!("g.blk{i}.conv.b"))?;
        x = g.conv2d(x, w, b)?;

        // per-channel scaled unit-Gaussian noise map
        let scale = g.param(store, &format!("g.blk{i}.noise"))?;
        let zero = g.input(Tensor::zeros(&[cout]));
        let bcast = g.concat(&vec![noise[i]; cout])?;
        let scaled = g.channel_affine(bcast, scale, zero)?;
        x = g.add(x, scaled)?;

        if arch.styles_enabled {
            let style = style.expect("styles enabled requires a style vector");
            let s = style_affine(
                g,
                store,
                style,
                &format!("g.blk{i}.style_s.w"),
                &format!("g.blk{i}.style_s.b"),
                cout,
            )?;
            let sb = style_affine(
                g,
                store,
                style,
                &format!("g.blk{i}.style_b.w"),
                &format!("g.blk{i}.style_b.b"),
                cout,
            )?;
            x = g.channel_affine(x, s, sb)?;
        }
        x = g.leaky_relu(x);
    }

    // 1×1-equivalent projection to one channel, then sigmoid into [0, 1]
    let c_last = *G_CHANNELS.last().unwrap();
    let flat = g.reshape(x, vec![c_last, IMG_RES * IMG_RES])?;
    let pw = g.param(store, "g.img.w")?;
    let y = g.matmul(pw, flat)?;
    let y = g.reshape(y, vec![1, IMG_RES, IMG_RES])?;
    let pb = g.param(store, "g.img.b")?;
    let one = g.input(Tensor::filled(&[1], 1.0));
    let y = g.channel_affine(y, one, pb)?;
    Ok(g.sigmoid(y))
}

/// Full generator pass for one latent sample.
pub fn generator_forward(
    g: &mut Graph,
    store: &ParameterStore,
    arch: &GanArch,
    sample: &LatentSample,
    noise: &[Tensor],
) -> Result<NodeId, ModelError> {
    check_noise(arch, noise)?;
    if sample.encoding.len() != arch.latent.encoding_dim() {
        return Err(ModelError::BadEncodingWidth {
            expected: arch.latent.encoding_dim(),
            got: sample.encoding.len(),
        });
    }
    let enc = g.input(Tensor::new(
        vec![1, sample.encoding.len()],
        sample.encoding.clone(),
    )?);
    let noise_nodes: Vec<NodeId> = noise.iter().map(|n| g.input(n.clone())).collect();
    if arch.styles_enabled {
        let w = mapping_forward(g, store, enc)?;
        synthesis_forward(g, store, arch, Some(w), None, &noise_nodes)
    } else {
        synthesis_forward(g, store, arch, None, Some(enc), &noise_nodes)
    }
}

/// Handles to every output of one discriminator pass.
pub struct DiscForward {
    pub logit: NodeId,
    pub conv_feat: NodeId,
    pub dense_feat: NodeId,
    pub q_heads: Vec<QHeadNodes>,
}

pub enum QHeadNodes {
    Discrete { logits: NodeId },
    Gaussian { mean: NodeId, log_var: NodeId },
}

/// Shared-trunk discriminator pass: adversarial logit, the two feature taps,
/// and the per-factor posterior heads, all from one forward evaluation.
pub fn discriminator_forward(
    g: &mut Graph,
    store: &ParameterStore,
    arch: &GanArch,
    img: NodeId,
) -> Result<DiscForward, ModelError> {
    let shape = g.value(img).shape().to_vec();
    if shape != [1, IMG_RES, IMG_RES] {
        return Err(ModelError::BadImageShape(shape));
    }
    let mut x = img;
    for i in 0..D_CHANNELS.len() {
        if i > 0 {
            x = g.downsample_avg2(x)?;
        }
        let w = g.param(store, &format!("d.conv{i}.w"))?;
        let b = g.param(store, &format!("d.conv{i}.b"))?;
        x = g.conv2d(x, w, b)?;
        x = g.leaky_relu(x);
    }
    let conv_feat = x;

    let flat = g.reshape(conv_feat, vec![1, CONV_FEAT_CHANNELS * 16])?;
    let dense = linear(g, store, flat, "d.dense.w", "d.dense.b")?;
    let dense_feat = g.leaky_relu(dense);

    let logit = linear(g, store, dense_feat, "d.adv.w", "d.adv.b")?;

    let mut q_heads = Vec::with_capacity(arch.latent.factors.len());
    for (i, f) in arch.latent.factors.iter().enumerate() {
        match f {
            FactorSpec::Bernoulli { .. } | FactorSpec::Categorical { .. } => {
                let k = f.posterior_param_count();
                let l = linear(
                    g,
                    store,
                    dense_feat,
                    &format!("q.f{i}.w"),
                    &format!("q.f{i}.b"),
                )?;
                let logits = g.reshape(l, vec![k])?;
                q_heads.push(QHeadNodes::Discrete { logits });
            }
            FactorSpec::Uniform { .. } => {
                let mu = linear(
                    g,
                    store,
                    dense_feat,
                    &format!("q.f{i}.mu.w"),
                    &format!("q.f{i}.mu.b"),
                )?;
                let mean = g.reshape(mu, vec![1])?;
                let lv = linear(
                    g,
                    store,
                    dense_feat,
                    &format!("q.f{i}.lv.w"),
                    &format!("q.f{i}.lv.b"),
                )?;
                let log_var = g.reshape(lv, vec![1])?;
                q_heads.push(QHeadNodes::Gaussian { mean, log_var });
            }
        }
    }

    Ok(DiscForward {
        logit,
        conv_feat,
        dense_feat,
        q_heads,
    })
}

/// Read a `QPosterior` out of evaluated head nodes.
pub fn read_posterior(g: &Graph, heads: &[QHeadNodes]) -> QPosterior {
    let factors = heads
        .iter()
        .map(|h| match h {
            QHeadNodes::Discrete { logits } => FactorPosterior::Discrete {
                logits: g.value(*logits).data().to_vec(),
            },
            QHeadNodes::Gaussian { mean, log_var } => FactorPosterior::Gaussian {
                mean: g.value(*mean).item(),
                log_var: g.value(*log_var).item(),
            },
        })
        .collect();
    QPosterior { factors }
}

// ── value-level convenience wrappers ─────────────────────────────────────

/// Deterministic style vector for a latent sample.
pub fn map_latent(
    store: &ParameterStore,
    arch: &GanArch,
    sample: &LatentSample,
) -> Result<Vec<f64>, ModelError> {
    if sample.encoding.len() != arch.latent.encoding_dim() {
        return Err(ModelError::BadEncodingWidth {
            expected: arch.latent.encoding_dim(),
            got: sample.encoding.len(),
        });
    }
    let mut g = Graph::new();
    let enc = g.input(Tensor::new(
        vec![1, sample.encoding.len()],
        sample.encoding.clone(),
    )?);
    let w = mapping_forward(&mut g, store, enc)?;
    Ok(g.value(w).data().to_vec())
}

/// Generate one image from a latent sample with the given noise maps.
pub fn synthesize(
    store: &ParameterStore,
    arch: &GanArch,
    sample: &LatentSample,
    noise: &[Tensor],
) -> Result<Tensor, ModelError> {
    let mut g = Graph::new();
    let img = generator_forward(&mut g, store, arch, sample, noise)?;
    Ok(g.value(img).clone())
}

/// One discriminator evaluation: (logit, conv features, dense features).
pub fn discriminate(
    store: &ParameterStore,
    arch: &GanArch,
    image: &Tensor,
) -> Result<(f64, Vec<f64>, Vec<f64>), ModelError> {
    let mut g = Graph::new();
    let img = g.input(image.clone());
    let out = discriminator_forward(&mut g, store, arch, img)?;
    Ok((
        g.value(out.logit).item(),
        g.value(out.conv_feat).data().to_vec(),
        g.value(out.dense_feat).data().to_vec(),
    ))
}

/// The approximate posterior Q(C | image).
pub fn q_infer(
    store: &ParameterStore,
    arch: &GanArch,
    image: &Tensor,
) -> Result<QPosterior, ModelError> {
    let mut g = Graph::new();
    let img = g.input(image.clone());
    let out = discriminator_forward(&mut g, store, arch, img)?;
    Ok(read_posterior(&g, &out.q_heads))
}

/// Write all parameters and optimizer state to a checkpoint file.
pub fn save_checkpoint(store: &ParameterStore, path: &std::path::Path) -> Result<(), ModelError> {
    store.save(path)?;
    Ok(())
}

/// Load a checkpoint and validate it against the architecture.
pub fn load_checkpoint(
    path: &std::path::Path,
    arch: &GanArch,
) -> Result<ParameterStore, ModelError> {
    let store = ParameterStore::load(path)?;
    validate_store(arch, &store)?;
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (GanArch, ParameterStore, ChaCha8Rng) {
        let arch = GanArch::new(LatentSpec::default_spec(), true);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let store = init_params(&arch, &mut rng);
        (arch, store, rng)
    }

    #[test]
    fn mapping_is_deterministic() {
        let (arch, store, mut rng) = setup();
        let s = latent::sample(&arch.latent, &mut rng);
        let w1 = map_latent(&store, &arch, &s).unwrap();
        let w2 = map_latent(&store, &arch, &s).unwrap();
        assert_eq!(w1, w2);
        assert_eq!(w1.len(), STYLE_DIM);
    }

    #[test]
    fn zero_final_mapping_layer_returns_bias() {
        let (arch, mut store, mut rng) = setup();
        let last = MAPPING_LAYERS - 1;
        store
            .set_value(
                &format!("g.map.w{last}"),
                Tensor::zeros(&[STYLE_DIM, STYLE_DIM]),
            )
            .unwrap();
        let bias: Vec<f64> = (0..STYLE_DIM).map(|i| i as f64 * 0.01 - 0.3).collect();
        store
            .set_value(
                &format!("g.map.b{last}"),
                Tensor::new(vec![1, STYLE_DIM], bias.clone()).unwrap(),
            )
            .unwrap();
        let s = latent::sample(&arch.latent, &mut rng);
        let w = map_latent(&store, &arch, &s).unwrap();
        assert_eq!(w, bias);
    }

    #[test]
    fn perturbing_encoding_changes_style() {
        let (arch, store, mut rng) = setup();
        let s = latent::sample(&arch.latent, &mut rng);
        let w1 = map_latent(&store, &arch, &s).unwrap();
        let mut s2 = s.clone();
        s2.encoding[0] += 0.25;
        let w2 = map_latent(&store, &arch, &s2).unwrap();
        assert_ne!(w1, w2);
    }

    #[test]
    fn fixed_noise_same_sample_is_deterministic() {
        let (arch, store, mut rng) = setup();
        let s = latent::sample(&arch.latent, &mut rng);
        let noise = sample_noise_maps(&mut rng);
        let a = synthesize(&store, &arch, &s, &noise).unwrap();
        let b = synthesize(&store, &arch, &s, &noise).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fresh_noise_changes_image() {
        let (arch, store, mut rng) = setup();
        let s = latent::sample(&arch.latent, &mut rng);
        let n1 = sample_noise_maps(&mut rng);
        let n2 = sample_noise_maps(&mut rng);
        let a = synthesize(&store, &arch, &s, &n1).unwrap();
        let b = synthesize(&store, &arch, &s, &n2).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn outputs_stay_in_unit_interval() {
        let (arch, store, mut rng) = setup();
        for _ in 0..3 {
            let s = latent::sample(&arch.latent, &mut rng);
            let noise = sample_noise_maps(&mut rng);
            let img = synthesize(&store, &arch, &s, &noise).unwrap();
            assert_eq!(img.shape(), &[1, IMG_RES, IMG_RES]);
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn discriminator_outputs_consistent() {
        let (arch, store, mut rng) = setup();
        let s = latent::sample(&arch.latent, &mut rng);
        let noise = sample_noise_maps(&mut rng);
        let img = synthesize(&store, &arch, &s, &noise).unwrap();
        let (logit, conv, dense) = discriminate(&store, &arch, &img).unwrap();
        let p = 1.0 / (1.0 + (-logit).exp());
        assert!(p > 0.0 && p < 1.0);
        assert_eq!(conv.len(), CONV_FEAT_CHANNELS * 16);
        assert_eq!(dense.len(), DENSE_DIM);
        let (logit2, conv2, dense2) = discriminate(&store, &arch, &img).unwrap();
        assert_eq!(logit, logit2);
        assert_eq!(conv, conv2);
        assert_eq!(dense, dense2);
    }

    #[test]
    fn discriminator_rejects_bad_shape() {
        let (arch, store, _) = setup();
        let img = Tensor::zeros(&[1, 16, 16]);
        assert!(matches!(
            discriminate(&store, &arch, &img),
            Err(ModelError::BadImageShape(_))
        ));
    }

    #[test]
    fn zero_initialized_q_head_is_uniform() {
        let (arch, mut store, mut rng) = setup();
        // zero map: uniform logits, μ = 0, unit variance
        for (i, f) in arch.latent.factors.iter().enumerate() {
            match f {
                FactorSpec::Uniform { .. } => {
                    for part in ["mu", "lv"] {
                        let name = format!("q.f{i}.{part}.w");
                        let shape = store.get(&name).unwrap().shape().to_vec();
                        store.set_value(&name, Tensor::zeros(&shape)).unwrap();
                    }
                }
                _ => {
                    let name = format!("q.f{i}.w");
                    let shape = store.get(&name).unwrap().shape().to_vec();
                    store.set_value(&name, Tensor::zeros(&shape)).unwrap();
                }
            }
        }
        let s = latent::sample(&arch.latent, &mut rng);
        let noise = sample_noise_maps(&mut rng);
        let img = synthesize(&store, &arch, &s, &noise).unwrap();
        let post = q_infer(&store, &arch, &img).unwrap();
        assert_eq!(post.factors.len(), arch.latent.factors.len());
        for f in &post.factors {
            match f {
                FactorPosterior::Discrete { logits } => {
                    assert!(logits.iter().all(|l| *l == 0.0));
                }
                FactorPosterior::Gaussian { mean, log_var } => {
                    assert_eq!(*mean, 0.0);
                    assert!(log_var.exp() > 0.0);
                }
            }
        }
        // 2 + 2 bernoulli logits, 3 categorical logits, 3 × (μ, log σ²)
        assert_eq!(post.param_vector().len(), 13);
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let (arch, store, _) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.isgn");
        save_checkpoint(&store, &path).unwrap();
        let back = load_checkpoint(&path, &arch).unwrap();
        assert!(store.bit_identical(&back));

        // a wider categorical also widens the encoding, so the first
        // mismatching tensor (alphabetically) is the mapping input layer
        let other = GanArch::new(
            LatentSpec::new(
                32,
                vec![
                    FactorSpec::Bernoulli { p: 0.5 },
                    FactorSpec::Bernoulli { p: 0.5 },
                    FactorSpec::Categorical { k: 4 },
                    FactorSpec::Uniform { a: -1.0, b: 1.0 },
                    FactorSpec::Uniform { a: -1.0, b: 1.0 },
                    FactorSpec::Uniform { a: -1.0, b: 1.0 },
                ],
            )
            .unwrap(),
            true,
        );
        let err = load_checkpoint(&path, &other).unwrap_err();
        match err {
            ModelError::CheckpointShape { name, .. } => assert_eq!(name, "g.map.w0"),
            other => panic!("unexpected error {other}"),
        }

        // swapping a uniform factor for a bernoulli keeps the encoding width
        // but changes the posterior head layout
        let other = GanArch::new(
            LatentSpec::new(
                32,
                vec![
                    FactorSpec::Bernoulli { p: 0.5 },
                    FactorSpec::Bernoulli { p: 0.5 },
                    FactorSpec::Categorical { k: 3 },
                    FactorSpec::Bernoulli { p: 0.5 },
                    FactorSpec::Uniform { a: -1.0, b: 1.0 },
                    FactorSpec::Uniform { a: -1.0, b: 1.0 },
                ],
            )
            .unwrap(),
            true,
        );
        let err = load_checkpoint(&path, &other).unwrap_err();
        match err {
            ModelError::CheckpointShape { name, .. } => assert!(name.starts_with("q.f3")),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn corrupted_checkpoint_magic_fails() {
        let (arch, store, _) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.isgn");
        save_checkpoint(&store, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'Z';
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint(&path, &arch).is_err());
    }

    #[test]
    fn trunk_is_shared_between_heads() {
        let (arch, mut store, mut rng) = setup();
        // non-zero heads so both outputs move with the trunk
        store
            .set_value("d.adv.w", he_tensor(&mut rng, &[DENSE_DIM, 1], DENSE_DIM))
            .unwrap();
        store
            .set_value("q.f0.w", he_tensor(&mut rng, &[DENSE_DIM, 2], DENSE_DIM))
            .unwrap();
        let s = latent::sample(&arch.latent, &mut rng);
        let noise = sample_noise_maps(&mut rng);
        let img = synthesize(&store, &arch, &s, &noise).unwrap();
        let (logit1, _, _) = discriminate(&store, &arch, &img).unwrap();
        let q1 = q_infer(&store, &arch, &img).unwrap();

        let mut w = store.get("d.conv0.w").unwrap().clone();
        w.data_mut()[0] += 0.5;
        store.set_value("d.conv0.w", w).unwrap();
        let (logit2, _, _) = discriminate(&store, &arch, &img).unwrap();
        let q2 = q_infer(&store, &arch, &img).unwrap();
        assert_ne!(logit1, logit2);
        assert_ne!(q1, q2);
    }

    #[test]
    fn styles_disabled_uses_projection() {
        let arch = GanArch::new(LatentSpec::default_spec(), false);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let store = init_params(&arch, &mut rng);
        let s = latent::sample(&arch.latent, &mut rng);
        let noise = sample_noise_maps(&mut rng);
        let img = synthesize(&store, &arch, &s, &noise).unwrap();
        assert_eq!(img.shape(), &[1, IMG_RES, IMG_RES]);
        // different encodings produce different images through the projection
        let s2 = latent::sample(&arch.latent, &mut rng);
        let img2 = synthesize(&store, &arch, &s2, &noise).unwrap();
        assert_ne!(img, img2);
    }

    /// End-to-end: d(mean pixel)/d(mapping weight) against central
    /// differences on a random subset of entries.
    #[test]
    fn generator_gradient_matches_finite_differences() {
        let (arch, store, mut rng) = setup();
        let s = latent::sample(&arch.latent, &mut rng);
        let noise = sample_noise_maps(&mut rng);

        let mut g = Graph::new();
        let img = generator_forward(&mut g, &store, &arch, &s, &noise).unwrap();
        let m = g.mean(img);
        let grads = g.backward(m).unwrap();
        let analytic = grads.param("g.map.w0").unwrap().clone();

        let eval = |st: &ParameterStore| {
            let mut g = Graph::new();
            let img = generator_forward(&mut g, st, &arch, &s, &noise).unwrap();
            let m = g.mean(img);
            g.value(m).item()
        };
        let numel = analytic.numel();
        let mut worst = 0.0f64;
        for _ in 0..12 {
            let j = rng.gen_range(0..numel);
            let base = store.get("g.map.w0").unwrap().clone();
            let mut up = store.clone();
            let mut t = base.clone();
            t.data_mut()[j] += 1e-5;
            up.set_value("g.map.w0", t).unwrap();
            let mut dn = store.clone();
            let mut t = base.clone();
            t.data_mut()[j] -= 1e-5;
            dn.set_value("g.map.w0", t).unwrap();
            let numeric = (eval(&up) - eval(&dn)) / 2e-5;
            worst = worst.max(crate::gradcheck::rel_err(analytic.data()[j], numeric));
        }
        assert!(worst < 1e-4, "rel err {worst:.3e}");
    }
}
