mod common;

use common::oracle;
use xmodal::model::{elbo_loss, ModelParams, NoiseSource};
use xmodal::train::tiny_fixture;

#[test]
fn objective_matches_straight_line_recomputation() {
    for seed in 0..3 {
        let (mut config, frames, audio) = tiny_fixture(seed).unwrap();
        config.beta = 0.7;
        config.lambda = 1.3;
        let params = ModelParams::<f64>::init(&config, seed + 10).unwrap();
        let eps = NoiseSource::new(seed).standard_normal::<f64>(frames.len() * config.latent_dim);
        let want = oracle::objective(&params, &config, &frames, &audio, &eps);
        let got = elbo_loss(&frames, &audio, &params, &config, &mut NoiseSource::new(seed)).unwrap();
        assert!((got.total - want.total).abs() < 1e-10, "{} vs {}", got.total, want.total);
        for t in 0..frames.len() {
            assert!((got.recon_per_t[t] - want.recon_per_t[t]).abs() < 1e-10);
            assert!((got.kl_per_t[t] - want.kl_per_t[t]).abs() < 1e-10);
        }
    }
}
