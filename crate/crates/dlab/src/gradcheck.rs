//! Central finite-difference oracles for gradient verification.
//!
//! Everything here recomputes values by forward evaluation only, so the
//! checks stay independent of the backward implementation they validate.

use rand::Rng;

use crate::graph::{Graph, GraphError, NodeId};
use crate::optim::ParameterStore;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Relative error with an absolute floor so near-zero gradient pairs compare
/// on absolute terms instead of blowing up the ratio.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Max relative error between analytic input gradients and central
/// differences for a scalar-valued graph builder over `inputs`.
pub fn check_scalar_fn(
    inputs: &[Tensor],
    h: f64,
    build: impl Fn(&mut Graph, &[NodeId]) -> Result<NodeId, GraphError>,
) -> f64 {
    let eval = |tensors: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &ids).expect("graph build failed");
        g.value(out).item()
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &ids).expect("graph build failed");
    let grads = g.backward(out).expect("backward failed");

    let mut worst = 0.0f64;
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let analytic = grads.node(ids[i]).map_or(0.0, |g| g.data()[j]);
            worst = worst.max(rel_err(analytic, numeric));
        }
    }
    worst
}

/// Central-difference gradient of `eval` with respect to every entry of the
/// named parameter, leaving the store untouched.
pub fn finite_diff_param(
    store: &ParameterStore,
    name: &str,
    h: f64,
    eval: impl Fn(&ParameterStore) -> f64,
) -> Tensor {
    let base = store.get(name).expect("unknown parameter").clone();
    let mut grad = Tensor::zeros(base.shape());
    let mut probe = store.clone();
    for j in 0..base.numel() {
        let mut t = base.clone();
        t.data_mut()[j] += h;
        probe.set_value(name, t).unwrap();
        let up = eval(&probe);
        let mut t = base.clone();
        t.data_mut()[j] -= h;
        probe.set_value(name, t).unwrap();
        let down = eval(&probe);
        grad.data_mut()[j] = (up - down) / (2.0 * h);
    }
    probe.set_value(name, base).unwrap();
    grad
}

fn rand_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// One finite-difference check per differentiable op, on random inputs in
/// [−1, 1] (shifted positive where the op's domain requires it). Returns
/// `(op name, max relative error)` pairs.
pub fn standard_op_checks(rng: &mut impl Rng) -> Vec<(&'static str, f64)> {
    let h = DEFAULT_STEP;
    let mut out = Vec::new();

    let a = rand_tensor(rng, &[3, 4], -1.0, 1.0);
    let b = rand_tensor(rng, &[3, 4], -1.0, 1.0);
    out.push((
        "add",
        check_scalar_fn(&[a, b], h, |g, ids| {
            let s = g.add(ids[0], ids[1])?;
            let y = g.sigmoid(s);
            Ok(g.sum(y))
        }),
    ));

    let a = rand_tensor(rng, &[3, 4], -1.0, 1.0);
    let b = rand_tensor(rng, &[3, 4], -1.0, 1.0);
    out.push((
        "multiply",
        check_scalar_fn(&[a, b], h, |g, ids| {
            let s = g.mul(ids[0], ids[1])?;
            Ok(g.sum(s))
        }),
    ));

    let a = rand_tensor(rng, &[3, 4], -1.0, 1.0);
    let b = rand_tensor(rng, &[4, 2], -1.0, 1.0);
    out.push((
        "matmul",
        check_scalar_fn(&[a, b], h, |g, ids| {
            let s = g.matmul(ids[0], ids[1])?;
            let y = g.sigmoid(s);
            Ok(g.mean(y))
        }),
    ));

    let x = rand_tensor(rng, &[2, 5, 5], -1.0, 1.0);
    let w = rand_tensor(rng, &[3, 2, 3, 3], -1.0, 1.0);
    let bias = rand_tensor(rng, &[3], -1.0, 1.0);
    out.push((
        "conv2d",
        check_scalar_fn(&[x, w, bias], h, |g, ids| {
            let s = g.conv2d(ids[0], ids[1], ids[2])?;
            let y = g.sigmoid(s);
            Ok(g.mean(y))
        }),
    ));

    let x = rand_tensor(rng, &[2, 4, 4], -1.0, 1.0);
    out.push((
        "downsample-avg",
        check_scalar_fn(&[x], h, |g, ids| {
            let s = g.downsample_avg2(ids[0])?;
            let y = g.sigmoid(s);
            Ok(g.mean(y))
        }),
    ));

    let x = rand_tensor(rng, &[2, 3, 3], -1.0, 1.0);
    out.push((
        "upsample-nearest",
        check_scalar_fn(&[x], h, |g, ids| {
            let s = g.upsample_nearest2(ids[0])?;
            let y = g.sigmoid(s);
            Ok(g.mean(y))
        }),
    ));

    // keep sample points away from the kink at zero
    let mut x = rand_tensor(rng, &[10], -1.0, 1.0);
    for v in x.data_mut() {
        if v.abs() < 0.01 {
            *v += 0.05;
        }
    }
    out.push((
        "leaky-relu",
        check_scalar_fn(&[x], h, |g, ids| {
            let s = g.leaky_relu(ids[0]);
            Ok(g.mean(s))
        }),
    ));

    let x = rand_tensor(rng, &[10], -1.0, 1.0);
    out.push((
        "sigmoid",
        check_scalar_fn(&[x], h, |g, ids| {
            let s = g.sigmoid(ids[0]);
            Ok(g.mean(s))
        }),
    ));

    let x = rand_tensor(rng, &[10], 0.5, 1.5);
    out.push((
        "log",
        check_scalar_fn(&[x], h, |g, ids| {
            let s = g.log(ids[0])?;
            Ok(g.mean(s))
        }),
    ));

    let x = rand_tensor(rng, &[10], -1.0, 1.0);
    out.push((
        "exp",
        check_scalar_fn(&[x], h, |g, ids| {
            let s = g.exp(ids[0])?;
            Ok(g.mean(s))
        }),
    ));

    let x = rand_tensor(rng, &[7], -1.0, 1.0);
    out.push((
        "sum",
        check_scalar_fn(&[x], h, |g, ids| {
            let s = g.mul(ids[0], ids[0])?;
            Ok(g.sum(s))
        }),
    ));

    let x = rand_tensor(rng, &[7], -1.0, 1.0);
    out.push((
        "mean",
        check_scalar_fn(&[x], h, |g, ids| {
            let s = g.mul(ids[0], ids[0])?;
            Ok(g.mean(s))
        }),
    ));

    let x = rand_tensor(rng, &[3, 4, 4], -1.0, 1.0);
    let s = rand_tensor(rng, &[3], -1.0, 1.0);
    let bias = rand_tensor(rng, &[3], -1.0, 1.0);
    out.push((
        "channel-affine",
        check_scalar_fn(&[x, s, bias], h, |g, ids| {
            let a = g.channel_affine(ids[0], ids[1], ids[2])?;
            let y = g.sigmoid(a);
            Ok(g.mean(y))
        }),
    ));

    let c = rand_tensor(rng, &[4], -1.0, 1.0);
    let mu = rand_tensor(rng, &[4], -1.0, 1.0);
    let lv = rand_tensor(rng, &[4], -1.0, 1.0);
    out.push((
        "gaussian-log-density",
        check_scalar_fn(&[c, mu, lv], h, |g, ids| {
            let d = g.gaussian_log_density(ids[0], ids[1], ids[2])?;
            Ok(g.mean(d))
        }),
    ));

    let a = rand_tensor(rng, &[2], -1.0, 1.0);
    let b = rand_tensor(rng, &[3], -1.0, 1.0);
    out.push((
        "concat",
        check_scalar_fn(&[a, b], h, |g, ids| {
            let c = g.concat(&[ids[0], ids[1]])?;
            let y = g.sigmoid(c);
            Ok(g.mean(y))
        }),
    ));

    let x = rand_tensor(rng, &[2, 6], -1.0, 1.0);
    out.push((
        "reshape",
        check_scalar_fn(&[x], h, |g, ids| {
            let r = g.reshape(ids[0], vec![3, 4])?;
            let y = g.sigmoid(r);
            Ok(g.mean(y))
        }),
    ));

    let x = rand_tensor(rng, &[6], -1.0, 1.0);
    out.push((
        "affine-scalar",
        check_scalar_fn(&[x], h, |g, ids| {
            let a = g.affine_scalar(ids[0], 1.7, -0.3);
            let y = g.sigmoid(a);
            Ok(g.mean(y))
        }),
    ));

    out
}
