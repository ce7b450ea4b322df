use dlab::graph::Graph;
use dlab::latent::{self, LatentSpec};
use dlab::models::{self, GanArch};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let arch = GanArch::new(LatentSpec::default_discrete_spec(), true);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let store = models::init_params(&arch, &mut rng);
    let s = latent::sample(&arch.latent, &mut rng);
    let noise = models::sample_noise_maps(&mut rng);
    let img = models::synthesize(&store, &arch, &s, &noise).unwrap();

    let n = 50;
    let t0 = Instant::now();
    for _ in 0..n {
        let mut g = Graph::new();
        let _ = models::generator_forward(&mut g, &store, &arch, &s, &noise).unwrap();
    }
    println!("G fwd: {:.2} ms", t0.elapsed().as_secs_f64()*1000.0/n as f64);

    let t0 = Instant::now();
    for _ in 0..n {
        let mut g = Graph::new();
        let i = g.input(img.clone());
        let _ = models::discriminator_forward(&mut g, &store, &arch, i).unwrap();
    }
    println!("D fwd: {:.2} ms", t0.elapsed().as_secs_f64()*1000.0/n as f64);

    let t0 = Instant::now();
    for _ in 0..n {
        let mut g = Graph::new();
        let gi = models::generator_forward(&mut g, &store, &arch, &s, &noise).unwrap();
        let df = models::discriminator_forward(&mut g, &store, &arch, gi).unwrap();
        let sc = g.sum(df.logit);
        let _ = g.backward(sc).unwrap();
    }
    println!("G+D fwd + 1 bwd: {:.2} ms", t0.elapsed().as_secs_f64()*1000.0/n as f64);
}
