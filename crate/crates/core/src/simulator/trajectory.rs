use rand::Rng;
use rand_distr::StandardNormal;

/// One simulated survival outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Event or censoring time, `1..=t_max`.
    pub observed: usize,
    pub event: bool,
    /// Noiseless `S(t) = ∏(1 − h)`.
    pub survival: Vec<f64>,
    /// `S(t)` after logit-scale noise; the Bernoulli probabilities actually used.
    pub noisy_survival: Vec<f64>,
}

fn perturb(s: f64, sigma: f64, rng: &mut impl Rng) -> f64 {
    if sigma == 0.0 || s <= 0.0 || s >= 1.0 {
        return s;
    }
    let noise: f64 = rng.sample(StandardNormal);
    let logit = (s / (1.0 - s)).ln() + sigma * noise;
    1.0 / (1.0 + (-logit).exp())
}

/// Draws an outcome from per-step hazards.
///
/// `S(t)` is perturbed on the logit scale with fresh `N(0, σ²)` noise at
/// every step. Step `t` yields a Bernoulli(`S̃(t)`) draw and the first zero
/// is the event time; no zero through `t_max` censors at `t_max`. All draws
/// of one patient share a single uniform, so with `σ = 0` the event time
/// has exactly the law `P(T > t) = S(t)`.
pub fn sample_trajectory(hazards: &[f64], noise_sigma: f64, rng: &mut impl Rng) -> Trajectory {
    let mut s = 1.0;
    let survival: Vec<f64> = hazards
        .iter()
        .map(|h| {
            s *= 1.0 - h;
            s
        })
        .collect();
    let u: f64 = rng.random();
    let noisy_survival: Vec<f64> = survival.iter().map(|&s| perturb(s, noise_sigma, rng)).collect();
    let first_zero = noisy_survival.iter().position(|&p| u >= p);
    let (observed, event) = match first_zero {
        Some(k) => (k + 1, true),
        None => (hazards.len(), false),
    };
    Trajectory {
        observed,
        event,
        survival,
        noisy_survival,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn negligible_risk_is_almost_always_censored() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let hazards = vec![1e-7; 128];
        let censored = (0..10_000)
            .filter(|_| !sample_trajectory(&hazards, 0.0, &mut rng).event)
            .count();
        // P(event) = 1 − (1 − 1e-7)^128 ≈ 1.3e-5
        assert!(censored >= 9_998, "{censored}");
    }

    #[test]
    fn observed_time_is_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..2000 {
            let tr = sample_trajectory(&[0.05; 20], 0.5, &mut rng);
            assert!((1..=20).contains(&tr.observed));
            if !tr.event {
                assert_eq!(tr.observed, 20);
            }
        }
    }

    #[test]
    fn certain_event_at_first_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tr = sample_trajectory(&[1.0, 0.0, 0.0], 0.5, &mut rng);
        assert_eq!((tr.observed, tr.event), (1, true));
    }
}
