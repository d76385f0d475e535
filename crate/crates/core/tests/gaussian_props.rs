use proptest::prelude::*;
use xmodal::gaussian::{kl_divergence, log_density, reparameterized_sample, DiagonalGaussian, LOG_VAR_MAX, LOG_VAR_MIN};

fn gaussian(dim: usize) -> impl Strategy<Value = DiagonalGaussian> {
    (prop::collection::vec(-5.0..5.0f64, dim), prop::collection::vec(-4.0..4.0f64, dim))
        .prop_map(|(m, lv)| DiagonalGaussian::new(m, lv).unwrap())
}

fn pair() -> impl Strategy<Value = (DiagonalGaussian, DiagonalGaussian)> {
    (1usize..12).prop_flat_map(|d| (gaussian(d), gaussian(d)))
}

/// Per-dimension KL from variances, without logs of ratios.
fn kl_reference(q: &DiagonalGaussian, p: &DiagonalGaussian) -> f64 {
    q.mean()
        .iter()
        .zip(q.variance())
        .zip(p.mean().iter().zip(p.variance()))
        .map(|((&mq, vq), (&mp, vp))| 0.5 * ((vp / vq).ln() + (vq + (mq - mp).powi(2)) / vp - 1.0))
        .sum()
}

proptest! {
    #[test]
    fn kl_is_non_negative((q, p) in pair()) {
        prop_assert!(kl_divergence(&q, &p).unwrap() >= -1e-12);
    }

    #[test]
    fn kl_of_identical_is_zero(q in (1usize..12).prop_flat_map(gaussian)) {
        prop_assert!(kl_divergence(&q, &q).unwrap().abs() < 1e-12);
    }

    #[test]
    fn kl_matches_variance_form((q, p) in pair()) {
        let a = kl_divergence(&q, &p).unwrap();
        let b = kl_reference(&q, &p);
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()), "{a} vs {b}");
    }

    #[test]
    fn kl_to_standard_normal_has_textbook_form(q in (1usize..12).prop_flat_map(gaussian)) {
        let p = DiagonalGaussian::standard(q.dim()).unwrap();
        let want: f64 = q.mean().iter().zip(q.log_var()).map(|(&m, &lv)| 0.5 * (lv.exp() + m * m - 1.0 - lv)).sum();
        let got = kl_divergence(&q, &p).unwrap();
        prop_assert!((got - want).abs() <= 1e-10 * (1.0 + want));
    }

    #[test]
    fn kl_adds_over_dimensions((q, p) in pair()) {
        let total = kl_divergence(&q, &p).unwrap();
        let parts: f64 = (0..q.dim())
            .map(|d| {
                let one = |g: &DiagonalGaussian| DiagonalGaussian::new(vec![g.mean()[d]], vec![g.log_var()[d]]).unwrap();
                kl_divergence(&one(&q), &one(&p)).unwrap()
            })
            .sum();
        prop_assert!((total - parts).abs() <= 1e-9 * (1.0 + total));
    }

    #[test]
    fn sample_is_affine_in_noise(q in (1usize..12).prop_flat_map(gaussian), scale in -3.0..3.0f64) {
        let d = q.dim();
        let eps: Vec<f64> = (0..d).map(|i| scale * (i as f64 + 1.0) / d as f64).collect();
        let z = reparameterized_sample(&q, &eps).unwrap();
        let zero = reparameterized_sample(&q, &vec![0.0; d]).unwrap();
        prop_assert_eq!(&zero, &q.mean().to_vec());
        for i in 0..d {
            let sigma = (0.5 * q.log_var()[i]).exp();
            prop_assert!((z[i] - (q.mean()[i] + sigma * eps[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn log_var_is_clamped(m in -1.0..1.0f64, lv in -50.0..50.0f64) {
        let g = DiagonalGaussian::new(vec![m], vec![lv]).unwrap();
        prop_assert!(g.log_var()[0] >= LOG_VAR_MIN && g.log_var()[0] <= LOG_VAR_MAX);
        prop_assert!(kl_divergence(&g, &DiagonalGaussian::standard(1).unwrap()).unwrap().is_finite());
    }

    #[test]
    fn density_peaks_at_mean(q in (1usize..6).prop_flat_map(gaussian), shift in 0.01..2.0f64) {
        let at_mean = log_density(q.mean(), &q).unwrap();
        let off: Vec<f64> = q.mean().iter().map(|m| m + shift).collect();
        prop_assert!(log_density(&off, &q).unwrap() < at_mean);
    }
}

#[test]
fn rejects_malformed_gaussians() {
    assert!(DiagonalGaussian::<f64>::new(vec![], vec![]).is_err());
    assert!(DiagonalGaussian::new(vec![0.0], vec![0.0, 1.0]).is_err());
    assert!(DiagonalGaussian::new(vec![f64::NAN], vec![0.0]).is_err());
    let a = DiagonalGaussian::standard(2).unwrap();
    let b = DiagonalGaussian::standard(3).unwrap();
    assert!(kl_divergence(&a, &b).is_err());
    assert!(reparameterized_sample(&a, &[0.0]).is_err());
}
