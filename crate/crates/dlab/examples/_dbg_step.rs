use dlab::data;
use dlab::latent::LatentSpec;
use dlab::losses::{Trainer, TrainingConfig};
use dlab::models::GanArch;
use std::time::Instant;

fn main() {
    let ds = data::generate(300, 7);
    let images = ds.images;
    let cfg = TrainingConfig { steps: 10, ..TrainingConfig::default() };
    let arch = GanArch::new(LatentSpec::default_discrete_spec(), true);
    let mut t = Trainer::new(arch, cfg);
    for i in 0..10 {
        let t0 = Instant::now();
        let _ = t.step(&images).unwrap();
        println!("step {i}: {:.0} ms", t0.elapsed().as_secs_f64()*1000.0);
    }
}
