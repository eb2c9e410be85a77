//! Central finite differences as an oracle for analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const DEFAULT_STEP: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_error(a, n))
        .fold(0.0, f64::max)
}

/// Numeric gradient of `f` at every coordinate of `theta`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, theta: &[f64], h: f64) -> Vec<f64> {
    let mut work = theta.to_vec();
    (0..theta.len())
        .map(|i| partial(&mut f, &mut work, i, h))
        .collect()
}

fn partial(f: &mut impl FnMut(&[f64]) -> f64, work: &mut [f64], i: usize, h: f64) -> f64 {
    let orig = work[i];
    work[i] = orig + h;
    let plus = f(work);
    work[i] = orig - h;
    let minus = f(work);
    work[i] = orig;
    (plus - minus) / (2.0 * h)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub step: f64,
    /// Coordinates to probe; all of them when `None`.
    pub max_checks: Option<usize>,
    pub seed: u64,
    /// Coordinates whose analytic and numeric values are both at most this
    /// large count as agreeing. Finite differences cannot resolve gradients
    /// below roughly `eps·|f|/h`, and some parameters (an affine bias feeding
    /// train-mode batch norm) have a gradient that is exactly zero.
    pub noise_floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            max_checks: None,
            seed: 0,
            noise_floor: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate with the largest error, with its analytic and numeric values.
    pub worst: Option<(usize, f64, f64)>,
    pub checked: usize,
    /// Coordinates that fell under the noise floor.
    pub below_floor: usize,
}

impl GradCheckReport {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_error < rel_tol
    }
}

impl GradCheck {
    pub fn run(
        &self,
        mut f: impl FnMut(&[f64]) -> f64,
        theta: &[f64],
        analytic: &[f64],
    ) -> GradCheckReport {
        assert_eq!(theta.len(), analytic.len(), "gradient length must match parameters");
        let indices: Vec<usize> = match self.max_checks {
            Some(k) if k < theta.len() => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                let mut idx = sample(&mut rng, theta.len(), k).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..theta.len()).collect(),
        };
        let mut work = theta.to_vec();
        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            worst: None,
            checked: indices.len(),
            below_floor: 0,
        };
        for i in indices {
            let numeric = partial(&mut f, &mut work, i, self.step);
            if analytic[i].abs() <= self.noise_floor && numeric.abs() <= self.noise_floor {
                report.below_floor += 1;
                continue;
            }
            let err = rel_error(analytic[i], numeric);
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((i, analytic[i], numeric));
            }
        }
        report
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let r = GradCheck::default().run(|t| t[0] * t[0], &[3.0], &[6.0]);
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        let f = |t: &[f64]| t.iter().map(|x| x.powi(3)).sum::<f64>();
        let theta = [0.5, -1.0, 2.0];
        let doubled: Vec<f64> = theta.iter().map(|x| 2.0 * 3.0 * x * x).collect();
        let r = GradCheck::default().run(f, &theta, &doubled);
        assert!((r.max_rel_error - 0.5).abs() < 1e-6, "{r:?}");
        assert!(!r.passes(1e-4));
    }

    #[test]
    fn subsampling_is_seeded() {
        let theta: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let grad: Vec<f64> = theta.iter().map(|x| 2.0 * x).collect();
        let gc = GradCheck {
            max_checks: Some(10),
            seed: 4,
            ..GradCheck::default()
        };
        let f = |t: &[f64]| t.iter().map(|x| x * x).sum::<f64>();
        let a = gc.run(f, &theta, &grad);
        let b = gc.run(f, &theta, &grad);
        assert_eq!(a, b);
        assert_eq!(a.checked, 10);
    }

    #[test]
    fn noise_floor_only_skips_tiny_pairs() {
        let gc = GradCheck {
            noise_floor: 1e-8,
            ..GradCheck::default()
        };
        // constant in t[1]: analytic 1e-12 vs numeric 0 is skipped
        let r = gc.run(|t| 2.0 * t[0], &[1.0, 1.0], &[2.0, 1e-12]);
        assert_eq!(r.below_floor, 1);
        assert!(r.passes(1e-9));
        // a wrong but non-tiny gradient is still caught
        let r = gc.run(|t| 2.0 * t[0], &[1.0, 1.0], &[2.0, 1e-6]);
        assert!(!r.passes(1e-4));
    }
}
