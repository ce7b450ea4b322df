use dlab::data;
use dlab::latent::LatentSpec;
use dlab::losses::{Trainer, TrainingConfig};
use dlab::models::GanArch;
use std::time::Instant;

fn main() {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let ds = data::generate(2000, 7);
    let split = data::anomaly_split(&ds, data::default_inlier_rule, data::default_outlier_rule, 7).unwrap();
    let images: Vec<_> = split.train_inliers.iter().map(|&i| ds.images[i].clone()).collect();
    println!("train inliers: {}", images.len());

    let cfg = TrainingConfig { steps, ..TrainingConfig::default() };
    let arch = GanArch::new(LatentSpec::default_discrete_spec(), true);
    let mut t = Trainer::new(arch, cfg);
    let start = Instant::now();
    let mut last_print = Instant::now();
    let report = t.train(&images, |r, _| {
        if r.step % 50 == 0 || last_print.elapsed().as_secs() > 20 {
            println!("step {:4}  v {:+.4}  l_info {:+.4}  g_loss {:+.4}", r.step, r.v, r.l_info, r.g_loss);
            last_print = Instant::now();
        }
    }).unwrap();
    let dt = start.elapsed().as_secs_f64();
    println!("=== {} steps in {:.1}s  ({:.3} s/step)", steps, dt, dt / steps as f64);
    let n = report.records.len();
    let tail: f64 = report.records[n-20..].iter().map(|r| r.l_info).sum::<f64>() / 20.0;
    println!("l_info step0 {:.4}  tail20 {:.4}  H(C) = {:.4}", report.records[0].l_info, tail, 2.0*(2f64).ln()+3f64.ln());
}
