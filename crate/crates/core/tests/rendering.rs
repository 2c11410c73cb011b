use nerfcast::field::{
    frame_weight_mass, sample_coarse, sample_fine, volume_render, Model, ModelSpec, Ray, RenderSettings,
};
use nerfcast::numerics::Rng;
use nerfcast::HeadPose;
use proptest::prelude::*;

fn homogeneous_error(samples: usize, sigma: f64, near: f64, far: f64) -> f64 {
    let ray = Ray::new([0.0; 3], [0.0, 0.0, 1.0], near, far).unwrap();
    let t = sample_coarse(&ray, samples, None);
    let colors = vec![[1.0, 0.0, 0.0]; samples];
    let sigmas = vec![sigma; samples];
    let (c, s) = volume_render(&t, &colors, &sigmas, far, [0.0; 3]).unwrap();
    let exact = 1.0 - (-sigma * (far - near)).exp();
    assert!((c[0] - s.weights.iter().sum::<f64>()).abs() < 1e-12);
    (s.weights.iter().sum::<f64>() - exact).abs()
}

#[test]
fn homogeneous_medium_converges_at_first_order() {
    for sigma in [0.5, 2.0, 6.0] {
        let e256 = homogeneous_error(256, sigma, 0.3, 1.3);
        assert!(e256 < 1e-3, "sigma {sigma}: error {e256}");
        for n in [32, 64, 128, 256] {
            let ratio = homogeneous_error(n, sigma, 0.3, 1.3) / homogeneous_error(2 * n, sigma, 0.3, 1.3);
            assert!((1.5..=2.5).contains(&ratio), "sigma {sigma}, n {n}: ratio {ratio}");
        }
    }
}

fn bin_probabilities(weights: &[f64]) -> Vec<f64> {
    let floor = nerfcast::field::sampling::WEIGHT_FLOOR;
    let total: f64 = weights.iter().map(|w| w + floor).sum();
    weights.iter().map(|w| (w + floor) / total).collect()
}

fn bin_of(depths: &[f64], t: f64) -> usize {
    depths.iter().rposition(|d| *d <= t).unwrap()
}

#[test]
fn stratified_fine_counts_track_bin_mass() {
    let depths: Vec<f64> = (0..8).map(|i| 0.1 * i as f64).collect();
    let weights = [0.0, 0.05, 0.4, 0.3, 0.1, 0.0, 0.15, 0.0];
    let probs = bin_probabilities(&weights);
    let count = 1000;
    let mut rng = Rng::seeded(3);
    let merged = sample_fine(&depths, &weights, 0.8, count, Some(&mut rng));
    assert_eq!(merged.len(), depths.len() + count);
    let mut counts = [0usize; 8];
    for t in &merged {
        counts[bin_of(&depths, *t)] += 1;
    }
    for i in 0..8 {
        let fine = counts[i] as f64 - 1.0;
        assert!((fine - probs[i] * count as f64).abs() <= 1.0 + 1e-9, "bin {i}: {fine} vs {}", probs[i] * count as f64);
    }
}

/// Single draws across many seeds follow the bin distribution (chi-square,
/// 7 degrees of freedom, 0.1% critical value 24.32).
#[test]
fn single_fine_draws_follow_weights() {
    let depths: Vec<f64> = (0..8).map(|i| 0.25 * i as f64).collect();
    let weights = [0.02, 0.1, 0.3, 0.25, 0.15, 0.1, 0.05, 0.03];
    let probs = bin_probabilities(&weights);
    let n = 20_000;
    let mut counts = [0f64; 8];
    let mut within = [0f64; 8];
    for seed in 0..n {
        let mut rng = Rng::stream(seed, 77);
        let merged = sample_fine(&depths, &weights, 2.0, 1, Some(&mut rng));
        let fine = merged.iter().find(|t| !depths.contains(t)).copied().unwrap();
        let b = bin_of(&depths, fine);
        counts[b] += 1.0;
        within[b] += (fine - depths[b]) / 0.25;
    }
    let chi2: f64 = (0..8).map(|i| (counts[i] - n as f64 * probs[i]).powi(2) / (n as f64 * probs[i])).sum();
    assert!(chi2 < 24.32, "chi-square {chi2}");
    for i in 0..8 {
        if counts[i] > 1000.0 {
            let mean = within[i] / counts[i];
            assert!((mean - 0.5).abs() < 0.05, "bin {i}: mean offset {mean}");
        }
    }
}

proptest! {
    #[test]
    fn fine_samples_are_sorted_and_in_range(
        weights in proptest::collection::vec(0.0f64..1.0, 2..20),
        count in 0usize..40,
        seed in any::<u64>(),
    ) {
        let n = weights.len();
        let depths: Vec<f64> = (0..n).map(|i| 1.0 + i as f64 / n as f64).collect();
        let mut rng = Rng::seeded(seed);
        let merged = sample_fine(&depths, &weights, 2.0, count, Some(&mut rng));
        prop_assert_eq!(merged.len(), n + count);
        prop_assert!(merged.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(merged.iter().all(|t| (1.0..=2.0).contains(t)));
    }

    #[test]
    fn weights_and_transmittance_partition_unity(
        sigmas in proptest::collection::vec(0.0f64..50.0, 1..64),
    ) {
        let n = sigmas.len();
        let depths: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
        let colors = vec![[0.5; 3]; n];
        let (_, s) = volume_render(&depths, &colors, &sigmas, 1.0, [1.0; 3]).unwrap();
        prop_assert!((s.total_mass() - 1.0).abs() < 1e-12);
        prop_assert!(s.weights.iter().all(|w| *w >= 0.0));
    }
}

#[test]
fn every_ray_of_a_frame_normalizes() {
    let spec = ModelSpec {
        head_layers: 2,
        head_width: 16,
        torso_layers: 2,
        torso_width: 16,
        density_shift: 1.0,
        ..ModelSpec::default()
    };
    let model = Model::<f32>::init(spec, 5).unwrap();
    let settings = RenderSettings::for_model(&model.spec, 16, 32, 32, 32);
    let cond = vec![0.1f32; 79];
    let masses = frame_weight_mass(&model, &cond, &HeadPose::orbit(0.2, -0.1, 1.4), &settings).unwrap();
    assert!(masses.len() > 32 * 32 / 4);
    for m in masses {
        assert!((m - 1.0).abs() < 1e-5, "mass {m}");
    }
}
