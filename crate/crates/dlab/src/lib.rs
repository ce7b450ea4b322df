//! Desk-scale lab for style-modulated GANs whose latent code carries
//! explicit semantic factors trained with a mutual-information lower bound.
//!
//! The crate bundles everything needed to run the full workflow on a CPU in
//! minutes:
//!
//! * [`tensor`] / [`graph`] / [`optim`] — a small dense f64 tensor engine with
//!   reverse-mode differentiation and Adam, sized for the toy networks here.
//! * [`latent`] — the decomposed latent code `(z', c)` with mixed
//!   discrete/continuous factors, priors, and posterior log-probabilities.
//! * [`models`] — toy style-based generator (mapping + multiscale synthesis
//!   with noise injection) and a discriminator with a shared trunk feeding the
//!   adversarial head and the auxiliary posterior head.
//! * [`losses`] — the adversarial value function, the mutual-information
//!   lower bound, their Monte Carlo estimators, and the alternating trainer.
//! * [`infotheory`] — exact information quantities on finite discrete
//!   channels (mutual information, total correlation, the bound chain), used
//!   to machine-check the control-implies-disentanglement argument.
//! * [`metrics`] — Fréchet distance between fitted Gaussians, k-NN manifold
//!   precision/recall, and the mutual information gap.
//! * [`anomaly`] — PCA whitening, one-class SVM, local outlier factor, and
//!   score evaluation with bootstrap confidence intervals.
//! * [`data`] — a procedural 32×32 shapes dataset with exact ground-truth
//!   factors and inlier/outlier splits.
//!
//! The `dlab` binary exposes the workflow as subcommands; the `examples/`
//! directory has one runnable example per capability.

pub mod anomaly;
pub mod archive;
pub mod cli;
pub mod config;
pub mod data;
pub mod gradcheck;
pub mod graph;
pub mod imageio;
pub mod infotheory;
pub mod latent;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod tensor;

/// Builds the global rayon pool honoring the `DLAB_THREADS` cap (0 = auto).
/// Harmless to call more than once; only the first call takes effect.
pub fn init_threads() {
    let cap = std::env::var("DLAB_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(0);
    if cap > 0 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cap)
            .build_global();
    }
}
