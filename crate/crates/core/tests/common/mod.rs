use camtrap_core::classifier::LabeledExample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Two Gaussian classes (d = 2, 50 points each) with means 6σ apart on the
/// first axis. Noise that would carry a point past the midpoint is redrawn,
/// so the set is separable by x = 0 by construction.
pub fn separable_fixture() -> Vec<LabeledExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut out = Vec::new();
    for label in 0..2usize {
        let centre = if label == 0 { -3.0 } else { 3.0 };
        for _ in 0..50 {
            let x = loop {
                let noise: f64 = StandardNormal.sample(&mut rng);
                let x = centre + noise;
                if (x > 0.0) == (label == 1) && x != 0.0 {
                    break x;
                }
            };
            let y: f64 = StandardNormal.sample(&mut rng);
            out.push(LabeledExample::new(vec![x, y], label));
        }
    }
    out
}
