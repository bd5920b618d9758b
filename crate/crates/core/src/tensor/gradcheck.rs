//! Central finite-difference verification of analytic gradients.
//!
//! This is test support: unit and acceptance suites drive every layer's
//! backward pass through [`check_gradient`] against a 64-bit numerical
//! derivative of the corresponding forward pass.

use rand_chacha::ChaCha8Rng;

/// Knobs for a finite-difference run.
#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Maximum number of coordinates probed per check; if the parameter
    /// vector is shorter, every coordinate is probed.
    pub max_probes: usize,
    /// Relative-error denominator floor. Gradients are O(0.1..1) in these
    /// suites; the floor keeps near-zero coordinates from amplifying
    /// roundoff while still exposing genuinely wrong values.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_probes: 25,
            floor: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinate of the worst relative error, for pinpointing a bad layer.
    pub worst_index: usize,
}

/// Compare `analytic` against central finite differences of `loss` around
/// `x0`, probing up to `cfg.max_probes` randomly chosen coordinates.
/// Relative error per coordinate is `|fd - analytic| / max(|fd|, |analytic|,
/// floor)`.
pub fn check_gradient(
    x0: &[f64],
    analytic: &[f64],
    loss: impl Fn(&[f64]) -> f64,
    cfg: &GradCheckConfig,
    rng: &mut ChaCha8Rng,
) -> GradCheckReport {
    assert_eq!(
        x0.len(),
        analytic.len(),
        "parameter and gradient vectors must align"
    );
    let coords: Vec<usize> = if x0.len() <= cfg.max_probes {
        (0..x0.len()).collect()
    } else {
        rand::seq::index::sample(rng, x0.len(), cfg.max_probes).into_vec()
    };
    let mut work = x0.to_vec();
    let mut max_rel_err = 0.0f64;
    let mut worst_index = 0usize;
    for &i in &coords {
        let orig = work[i];
        work[i] = orig + cfg.step;
        let up = loss(&work);
        work[i] = orig - cfg.step;
        let down = loss(&work);
        work[i] = orig;
        let fd = (up - down) / (2.0 * cfg.step);
        let an = analytic[i];
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(cfg.floor);
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_index = i;
        }
    }
    GradCheckReport {
        max_rel_err,
        checked: coords.len(),
        worst_index,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn quadratic_gradient_verifies() {
        let x0 = vec![0.3, -0.7, 1.1];
        // f(x) = sum x_i^2, grad = 2x
        let grad: Vec<f64> = x0.iter().map(|v| 2.0 * v).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = check_gradient(
            &x0,
            &grad,
            |x| x.iter().map(|v| v * v).sum(),
            &GradCheckConfig::default(),
            &mut rng,
        );
        assert_eq!(r.checked, 3);
        assert!(r.max_rel_err < 1e-8);
    }

    #[test]
    fn wrong_gradient_is_flagged() {
        let x0 = vec![0.5, 0.25];
        let wrong = vec![1.3, 0.1]; // true gradient is 2x = [1.0, 0.5]
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = check_gradient(
            &x0,
            &wrong,
            |x| x.iter().map(|v| v * v).sum(),
            &GradCheckConfig::default(),
            &mut rng,
        );
        assert!(r.max_rel_err > 0.1);
    }
}
