//! Backbone forward/backward throughput at the default image size.

use std::time::Instant;

use outfitrank::autodiff::{Graph, ParamStore, Tensor};
use outfitrank::layers::BackboneConfig;
use outfitrank::rng;

fn main() -> outfitrank::Result<()> {
    let batch: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(180);
    let cfg = BackboneConfig::default();
    let mut store = ParamStore::<f32>::new();
    let mut r = rng::stream(0, "bench", 0);
    let net = cfg.build("backbone", &mut store, &mut r)?;
    let x = Tensor::<f32>::randn(vec![batch, 3, cfg.image_side, cfg.image_side], 1.0, &mut r);
    let reps = 5;
    let start = Instant::now();
    for _ in 0..reps {
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let y = net.forward(&mut g, &store, xi, true)?;
        let s = g.sum(y)?;
        let grads = g.backward(s)?;
        assert!(!grads.is_empty());
    }
    let per_image = start.elapsed().as_secs_f64() / (reps * batch) as f64;
    println!("{:.1} us per image (forward + backward)", per_image * 1e6);
    Ok(())
}
