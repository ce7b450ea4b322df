//! The `dlab` command-line workflow: data generation, training, metric
//! evaluation, exact channel verification, and anomaly detection.
//!
//! Every subcommand writes into a run directory: the fully resolved config,
//! CSV reports, checkpoints, and image grids. Exit codes: 0 success, 1
//! usage/config errors, 2 runtime/numeric errors; messages go to stderr.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::anomaly::{self, EmbeddingSource, ThresholdRule};
use crate::config::RunConfig;
use crate::data::{self, LabeledDataset};
use crate::imageio::{self, GrayImage};
use crate::infotheory;
use crate::latent::{self, FactorSpec, FactorValue, LatentSample};
use crate::losses::{LossReport, Trainer};
use crate::metrics;
use crate::models::{self, GanArch};
use crate::optim::ParameterStore;
use crate::tensor::Tensor;

#[derive(Parser)]
#[command(
    name = "dlab",
    about = "Desk-scale style-GAN lab: shapes data, info-maximized training, metrics, exact channel checks, anomaly detection",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic shapes dataset (dataset.bin + factors.csv).
    GenerateData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Train the configured variant on a dataset.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Restrict training to the inlier split (ellipses held out).
        #[arg(long)]
        inliers_only: bool,
    },
    /// Fréchet distance, precision/recall, and the mutual information gap.
    EvalMetrics {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Exact decomposition / bound-chain / gap checks on finite channels.
    VerifyLemma {
        #[arg(long, default_value_t = 50)]
        channels: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Embedding → whitening → detector evaluation on the anomaly split.
    Anomaly {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// q | conv | dense
        #[arg(long, default_value = "dense")]
        source: String,
        /// ocsvm | lof
        #[arg(long, default_value = "lof")]
        detector: String,
        #[arg(long)]
        nu: Option<f64>,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Also write PNG versions of image grids.
        #[arg(long)]
        png: bool,
    },
}

enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }
}

fn usage(msg: impl ToString) -> CliError {
    CliError::Usage(msg.to_string())
}

fn runtime(msg: impl ToString) -> CliError {
    CliError::Runtime(msg.to_string())
}

/// Parse arguments and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    crate::init_threads();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            eprintln!("{e}");
            return 1;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::GenerateData { config, out } => generate_data(config.as_deref(), &out),
        Command::Train {
            config,
            data,
            out,
            inliers_only,
        } => train(config.as_deref(), &data, &out, inliers_only),
        Command::EvalMetrics {
            config,
            data,
            checkpoint,
            out,
        } => eval_metrics(config.as_deref(), &data, &checkpoint, &out),
        Command::VerifyLemma {
            channels,
            seed,
            out,
        } => verify_lemma(channels, seed, &out),
        Command::Anomaly {
            config,
            data,
            checkpoint,
            source,
            detector,
            nu,
            gamma,
            k,
            seed,
            out,
            png,
        } => run_anomaly(
            config.as_deref(),
            &data,
            &checkpoint,
            &source,
            &detector,
            nu,
            gamma,
            k,
            seed,
            &out,
            png,
        ),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    match path {
        Some(p) => RunConfig::load(p).map_err(usage),
        None => Ok(RunConfig::default()),
    }
}

fn prepare_out(out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out)
        .map_err(|e| usage(format!("cannot create output directory {}: {e}", out.display())))
}

fn load_data(path: &Path) -> Result<LabeledDataset, CliError> {
    if !path.exists() {
        return Err(usage(format!("dataset file not found: {}", path.display())));
    }
    data::load_dataset(path).map_err(usage)
}

fn load_checkpoint(path: &Path, arch: &GanArch) -> Result<ParameterStore, CliError> {
    if !path.exists() {
        return Err(usage(format!(
            "checkpoint file not found: {}",
            path.display()
        )));
    }
    models::load_checkpoint(path, arch).map_err(usage)
}

fn generate_data(config: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    prepare_out(out)?;
    let ds = data::generate(cfg.data_n, cfg.training.seed);
    data::save_dataset(&ds, &out.join("dataset.bin")).map_err(runtime)?;
    data::write_factors_csv(&ds, &out.join("factors.csv")).map_err(runtime)?;
    cfg.write_resolved(&out.join("resolved.cfg")).map_err(runtime)?;
    println!(
        "wrote {} images to {}",
        ds.len(),
        out.join("dataset.bin").display()
    );
    Ok(())
}

/// Fixed latents (and noise) for periodic sample grids.
fn eval_latents(
    arch: &GanArch,
    n: usize,
    seed: u64,
) -> (Vec<LatentSample>, Vec<Vec<Tensor>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_6E1D);
    let samples = (0..n).map(|_| latent::sample(&arch.latent, &mut rng)).collect();
    let noise = (0..n).map(|_| models::sample_noise_maps(&mut rng)).collect();
    (samples, noise)
}

fn sample_grid(
    store: &ParameterStore,
    arch: &GanArch,
    samples: &[LatentSample],
    noise: &[Vec<Tensor>],
) -> Result<GrayImage, CliError> {
    let tiles: Vec<GrayImage> = samples
        .iter()
        .zip(noise)
        .map(|(s, n)| {
            models::synthesize(store, arch, s, n)
                .map(|img| GrayImage::from_tensor(&img))
                .map_err(runtime)
        })
        .collect::<Result<_, _>>()?;
    Ok(imageio::montage(&tiles, 8, 2, 0.25))
}

/// Rows of base samples with factor `index` swept across its support:
/// all values for discrete factors, 7 evenly spaced points for continuous.
pub fn factor_sweep_grid(
    store: &ParameterStore,
    arch: &GanArch,
    index: usize,
    rows: usize,
    seed: u64,
) -> Result<GrayImage, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x57EE_9000 ^ index as u64);
    let values: Vec<FactorValue> = match &arch.latent.factors[index] {
        FactorSpec::Bernoulli { .. } => vec![FactorValue::Bit(false), FactorValue::Bit(true)],
        FactorSpec::Categorical { k } => (0..*k).map(FactorValue::Class).collect(),
        FactorSpec::Uniform { a, b } => (0..7)
            .map(|i| FactorValue::Real(a + (b - a) * i as f64 / 6.0))
            .collect(),
    };
    let mut tiles = Vec::with_capacity(rows * values.len());
    for _ in 0..rows {
        let base = latent::sample(&arch.latent, &mut rng);
        let noise = models::sample_noise_maps(&mut rng);
        for v in &values {
            let mut c = base.c.clone();
            c[index] = *v;
            let encoding = latent::encode(&arch.latent, &base.z_prime, &c);
            let sample = LatentSample {
                z_prime: base.z_prime.clone(),
                c,
                encoding,
            };
            let img = models::synthesize(store, arch, &sample, &noise)
                .map_err(|e| e.to_string())?;
            tiles.push(GrayImage::from_tensor(&img));
        }
    }
    Ok(imageio::montage(&tiles, values.len(), 2, 0.25))
}

fn train(
    config: Option<&Path>,
    data_path: &Path,
    out: &Path,
    inliers_only: bool,
) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    prepare_out(out)?;
    cfg.write_resolved(&out.join("resolved.cfg")).map_err(runtime)?;
    let dataset = load_data(data_path)?;
    let spec = cfg.latent_spec().map_err(usage)?;
    let arch = GanArch::new(spec, cfg.training.styles_enabled);

    let images: Vec<Tensor> = if inliers_only {
        let split = data::anomaly_split(
            &dataset,
            data::default_inlier_rule,
            data::default_outlier_rule,
            cfg.training.seed,
        )
        .map_err(usage)?;
        split
            .train_inliers
            .iter()
            .map(|&i| dataset.images[i].clone())
            .collect()
    } else {
        dataset.images.clone()
    };
    if images.is_empty() {
        return Err(usage("training set is empty"));
    }

    let (grid_samples, grid_noise) = eval_latents(&arch, 64, cfg.training.seed);
    let mut trainer = Trainer::new(arch.clone(), cfg.training.clone());
    let sample_every = cfg.training.sample_every.max(1);
    let mut report = LossReport::default();
    let total = cfg.training.steps;
    for step in 0..total {
        let record = trainer
            .step(&images)
            .map_err(|e| runtime(format!("training failed: {e}")))?;
        if (step + 1) % sample_every == 0 || step + 1 == total {
            let grid = sample_grid(trainer.store(), &arch, &grid_samples, &grid_noise)?;
            imageio::write_pgm(&grid, &out.join(format!("samples_{:06}.pgm", step + 1)))
                .map_err(runtime)?;
            eprintln!(
                "step {:>6}/{total}  v {:+.4}  l_info {:+.4}",
                step + 1,
                record.v,
                record.l_info
            );
        }
        report.records.push(record);
    }
    report.write_csv(&out.join("losses.csv")).map_err(runtime)?;
    models::save_checkpoint(trainer.store(), &out.join("checkpoint.isgn")).map_err(runtime)?;

    for i in 0..arch.latent.factors.len() {
        let grid = factor_sweep_grid(trainer.store(), &arch, i, 8, cfg.training.seed)
            .map_err(runtime)?;
        imageio::write_pgm(&grid, &out.join(format!("sweep_c{i}.pgm"))).map_err(runtime)?;
    }
    println!(
        "trained {} for {} steps; checkpoint at {}",
        cfg.training.variant_name(&arch.latent),
        total,
        out.join("checkpoint.isgn").display()
    );
    Ok(())
}

fn eval_metrics(
    config: Option<&Path>,
    data_path: &Path,
    checkpoint: &Path,
    out: &Path,
) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    prepare_out(out)?;
    cfg.write_resolved(&out.join("resolved.cfg")).map_err(runtime)?;
    let dataset = load_data(data_path)?;
    let spec = cfg.latent_spec().map_err(usage)?;
    let arch = GanArch::new(spec, cfg.training.styles_enabled);
    let store = load_checkpoint(checkpoint, &arch)?;
    let seed = cfg.training.seed;

    let n = cfg.eval_n.min(dataset.len()).max(2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xE7A1);
    let fakes: Vec<Tensor> = (0..n)
        .map(|_| {
            let s = latent::sample(&arch.latent, &mut rng);
            let noise = models::sample_noise_maps(&mut rng);
            models::synthesize(&store, &arch, &s, &noise).map_err(runtime)
        })
        .collect::<Result<_, _>>()?;
    let reals: Vec<Tensor> = {
        let mut idx: Vec<usize> = (0..dataset.len()).collect();
        use rand::seq::SliceRandom;
        idx.shuffle(&mut rng);
        idx[..n].iter().map(|&i| dataset.images[i].clone()).collect()
    };

    let real_feat = metrics::desk_features(&reals).map_err(runtime)?;
    let fake_feat = metrics::desk_features(&fakes).map_err(runtime)?;
    let stats_r = metrics::gaussian_fit(&real_feat).map_err(runtime)?;
    let stats_g = metrics::gaussian_fit(&fake_feat).map_err(runtime)?;
    let fid = metrics::fid(&stats_r, &stats_g).map_err(runtime)?;
    let (precision, recall) =
        metrics::precision_recall(&real_feat, &fake_feat, cfg.pr_k).map_err(runtime)?;

    let mig_opts = metrics::MigOptions {
        mc_samples: cfg.mig_mc_samples,
        inner_cap: cfg.mig_inner_cap,
        seed,
    };
    let mig = metrics::mig_with_model(&store, &arch, &dataset, &mig_opts).map_err(runtime)?;
    metrics::write_mig_csv(&mig, &out.join("mig.csv")).map_err(runtime)?;

    let path = out.join("metrics.csv");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&path).map_err(runtime)?);
    writeln!(f, "metric,value,k,seed,n_real,n_fake").map_err(runtime)?;
    let mut row = |name: &str, value: f64, k: String| {
        writeln!(f, "{name},{value},{k},{seed},{n},{n}").map_err(runtime)
    };
    row("desk_fid", fid, String::new())?;
    row("precision", precision, cfg.pr_k.to_string())?;
    row("recall", recall, cfg.pr_k.to_string())?;
    row("mig", mig.mig, String::new())?;
    row("max_mi", mig.max_mi, String::new())?;
    f.flush().map_err(runtime)?;
    println!(
        "desk_fid {fid:.4}  precision {precision:.3}  recall {recall:.3}  mig {:.4}  max_mi {:.4}",
        mig.mig, mig.max_mi
    );
    Ok(())
}

fn verify_lemma(channels: usize, seed: u64, out: &Path) -> Result<(), CliError> {
    prepare_out(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases: Vec<(String, infotheory::FactoredPrior, infotheory::DiscreteChannel)> = vec![
        ("xor".into(), infotheory::xor_channel().0, infotheory::xor_channel().1),
        (
            "identity".into(),
            infotheory::identity_channel().0,
            infotheory::identity_channel().1,
        ),
        (
            "product-bsc-0.1".into(),
            infotheory::product_channel(0.1).0,
            infotheory::product_channel(0.1).1,
        ),
    ];
    for i in 0..channels {
        let (prior, channel) = infotheory::random_binary_pair_channel(&mut rng, 8);
        cases.push((format!("random-{i:03}"), prior, channel));
    }

    let mut all_pass = true;
    let report_path = out.join("lemma_checks.csv");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&report_path).map_err(runtime)?);
    writeln!(f, "channel,check,lhs,rhs,slack,pass").map_err(runtime)?;
    println!("{:<14} {:<42} {:>7}", "channel", "check", "status");
    for (name, prior, channel) in &cases {
        let rep = infotheory::verify_identities(prior, channel)
            .map_err(|e| runtime(format!("channel {name}: {e}")))?;
        for c in &rep.checks {
            writeln!(
                f,
                "{name},{},{},{},{},{}",
                c.name.replace(',', ";"),
                c.lhs,
                c.rhs,
                c.slack,
                c.ok
            )
            .map_err(runtime)?;
            if !c.ok {
                all_pass = false;
            }
        }
        let status = if rep.pass { "pass" } else { "FAIL" };
        println!("{name:<14} {:<42} {status:>7}", "all identities");
    }
    f.flush().map_err(runtime)?;

    let eps: Vec<f64> = (0..11).map(|i| i as f64 / 10.0).collect();
    let curve = infotheory::limit_experiment(&eps).map_err(runtime)?;
    let curve_path = out.join("tc_curve.csv");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&curve_path).map_err(runtime)?);
    writeln!(f, "eps,mi,l_info_optimal,gap,expected_tc").map_err(runtime)?;
    for p in &curve {
        writeln!(
            f,
            "{},{},{},{},{}",
            p.eps, p.mi, p.l_info_optimal, p.gap, p.expected_tc
        )
        .map_err(runtime)?;
    }
    f.flush().map_err(runtime)?;

    println!(
        "checked {} channels; limit curve at {}",
        cases.len(),
        curve_path.display()
    );
    if all_pass {
        Ok(())
    } else {
        Err(runtime("identity checks failed; see lemma_checks.csv"))
    }
}

#[allow(clippy::too_many_arguments)]
fn run_anomaly(
    config: Option<&Path>,
    data_path: &Path,
    checkpoint: &Path,
    source: &str,
    detector: &str,
    nu: Option<f64>,
    gamma: Option<f64>,
    k: Option<usize>,
    seed: Option<u64>,
    out: &Path,
    png: bool,
) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    prepare_out(out)?;
    cfg.write_resolved(&out.join("resolved.cfg")).map_err(runtime)?;
    let source = EmbeddingSource::parse(source)
        .ok_or_else(|| usage(format!("unknown source '{source}' (q | conv | dense)")))?;
    if detector != "ocsvm" && detector != "lof" {
        return Err(usage(format!("unknown detector '{detector}' (ocsvm | lof)")));
    }
    let dataset = load_data(data_path)?;
    let spec = cfg.latent_spec().map_err(usage)?;
    let arch = GanArch::new(spec, cfg.training.styles_enabled);
    let store = load_checkpoint(checkpoint, &arch)?;
    let seed = seed.unwrap_or(cfg.training.seed);
    let nu = nu.unwrap_or(cfg.nu);
    let lof_k = k.unwrap_or(cfg.lof_k);

    let split = data::anomaly_split(
        &dataset,
        data::default_inlier_rule,
        data::default_outlier_rule,
        seed,
    )
    .map_err(usage)?;

    let collect = |idx: &[usize]| -> Vec<Tensor> {
        idx.iter().map(|&i| dataset.images[i].clone()).collect()
    };
    let mut train_idx = split.train_inliers.clone();
    train_idx.truncate(cfg.detector_max_train.max(2));
    let train_images = collect(&train_idx);
    let test_in_images = collect(&split.test_inliers);
    let test_out_images = collect(&split.test_outliers);

    let train_raw =
        anomaly::extract_embeddings(&store, &arch, &train_images, source).map_err(runtime)?;
    let test_in_raw =
        anomaly::extract_embeddings(&store, &arch, &test_in_images, source).map_err(runtime)?;
    let test_out_raw =
        anomaly::extract_embeddings(&store, &arch, &test_out_images, source).map_err(runtime)?;

    let whitening = anomaly::fit_whitening(&train_raw, None).map_err(runtime)?;
    let train_feat = whitening.apply(&train_raw);
    let test_in = whitening.apply(&test_in_raw);
    let test_out = whitening.apply(&test_out_raw);

    let score_all = |scorer: &dyn Fn(&[f64]) -> f64, set: &metrics::FeatureSet| -> Vec<f64> {
        (0..set.n).map(|i| scorer(set.row(i))).collect()
    };
    let (scores_in, scores_out, detector_letter) = match detector {
        "ocsvm" => {
            let gamma = match gamma.or(if cfg.gamma > 0.0 { Some(cfg.gamma) } else { None }) {
                Some(g) => g,
                None => anomaly::gamma_scale_heuristic(&train_feat),
            };
            let model = anomaly::ocsvm_fit(&train_feat, nu, gamma).map_err(runtime)?;
            (
                score_all(&|x| anomaly::ocsvm_score(&model, x), &test_in),
                score_all(&|x| anomaly::ocsvm_score(&model, x), &test_out),
                'O',
            )
        }
        _ => {
            let model = anomaly::lof_fit(&train_feat, lof_k).map_err(runtime)?;
            (
                score_all(&|x| anomaly::lof_score(&model, x), &test_in),
                score_all(&|x| anomaly::lof_score(&model, x), &test_out),
                'L',
            )
        }
    };

    let variant_letter = cfg
        .training
        .variant_name(&arch.latent)
        .chars()
        .next()
        .unwrap_or('I');
    let method = format!("{variant_letter}{}{detector_letter}", source.code_letter());
    let report = anomaly::evaluate(
        &method,
        &scores_in,
        &scores_out,
        ThresholdRule::MaxBalancedAccuracy {
            calibration_fraction: 0.2,
            seed,
        },
    )
    .map_err(runtime)?;

    let report_path = out.join("anomaly_report.csv");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&report_path).map_err(runtime)?);
    writeln!(f, "method,auc,auc_lo,auc_hi,acc,acc_lo,acc_hi,f1").map_err(runtime)?;
    writeln!(
        f,
        "{},{},{},{},{},{},{},{}",
        report.method,
        report.auc,
        report.auc_ci.0,
        report.auc_ci.1,
        report.accuracy,
        report.accuracy_ci.0,
        report.accuracy_ci.1,
        report.f1
    )
    .map_err(runtime)?;
    f.flush().map_err(runtime)?;

    // ROC curve over all test scores (outlier-positive, score < θ)
    let roc_path = out.join("roc.csv");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&roc_path).map_err(runtime)?);
    writeln!(f, "fpr,tpr").map_err(runtime)?;
    let mut thresholds: Vec<f64> = scores_in.iter().chain(&scores_out).copied().collect();
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    thresholds.dedup();
    writeln!(f, "0,0").map_err(runtime)?;
    for t in thresholds {
        let fpr =
            scores_in.iter().filter(|s| **s <= t).count() as f64 / scores_in.len() as f64;
        let tpr =
            scores_out.iter().filter(|s| **s <= t).count() as f64 / scores_out.len() as f64;
        writeln!(f, "{fpr},{tpr}").map_err(runtime)?;
    }
    f.flush().map_err(runtime)?;

    // confusion grid on the evaluated pool at the calibrated threshold
    let all_images: Vec<Tensor> = test_in_images
        .iter()
        .chain(test_out_images.iter())
        .cloned()
        .collect();
    let truth: Vec<bool> = std::iter::repeat(false)
        .take(test_in_images.len())
        .chain(std::iter::repeat(true).take(test_out_images.len()))
        .collect();
    let pred: Vec<bool> = scores_in
        .iter()
        .chain(&scores_out)
        .map(|s| *s < report.threshold)
        .collect();
    let pgm = out.join("confusion.pgm");
    let png_path = out.join("confusion.png");
    anomaly::confusion_grid(
        &all_images,
        &truth,
        &pred,
        &pgm,
        if png { Some(png_path.as_path()) } else { None },
        seed,
    )
    .map_err(runtime)?;

    println!(
        "{}: auc {:.3} [{:.3}, {:.3}]  acc {:.3}  f1 {:.3}  (threshold {:.4})",
        report.method,
        report.auc,
        report.auc_ci.0,
        report.auc_ci.1,
        report.accuracy,
        report.f1,
        report.threshold
    );
    Ok(())
}
