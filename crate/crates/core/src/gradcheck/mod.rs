//! Finite-difference gradient checks.
//!
//! The helpers here only evaluate the forward function; they never call an
//! analytic adjoint, so they can check any of them.

mod suite;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::gaussian::{Branch, CameraPose, GaussianCloud, GaussianPrimitive};
use crate::raster::RasterConfig;

pub use suite::{run_suite, FamilyResult, SuiteOptions, NN_RTOL, RASTER_RTOL, TAPE_OPS};

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn central_difference(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let fp = f(&p);
            p[i] = orig - h;
            let fm = f(&p);
            p[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Like [`compare_gradients`] with a per-component absolute floor.
pub fn compare_gradients_floored(analytic: &[f64], numeric: &[(f64, f64)], rtol: f64, atol: f64) -> GradReport {
    assert_eq!(analytic.len(), numeric.len());
    let mut rep = GradReport::empty(rtol);
    for (&a, &(n, floor)) in analytic.iter().zip(numeric) {
        let r = compare_gradients(&[a], &[n], rtol, atol.max(floor));
        rep.merge(&r);
    }
    rep
}

/// Central difference of a scalar function at `x0` that steps around kinks.
/// When the forward and backward quotients disagree by more than 0.1% (and by
/// more than the round-off floor) the interval straddles a relu corner, an L1
/// crossing or a depth-order swap, and the step is shrunk tenfold (at most twice).
/// Returns the estimate and its round-off floor at the final step.
pub fn kink_aware_partial(mut f: impl FnMut(f64) -> f64, x0: f64, h: f64) -> (f64, f64) {
    let f0 = f(x0);
    let mut h = h;
    let mut central = 0.0;
    let mut floor = 0.0;
    for attempt in 0..3 {
        let fp = f(x0 + h);
        let fm = f(x0 - h);
        central = (fp - fm) / (2.0 * h);
        let fwd = (fp - f0) / h;
        let bwd = (f0 - fm) / h;
        floor = 64.0 * f64::EPSILON * f0.abs() / h;
        if attempt == 2 || (fwd - bwd).abs() <= (1e-3 * fwd.abs().max(bwd.abs())).max(floor) {
            break;
        }
        h /= 10.0;
    }
    (central, floor)
}

/// Outcome of comparing an analytic gradient against a numeric one.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    /// Largest relative error among components well above the absolute floor.
    pub max_rel_err: f64,
    /// Components compared.
    pub checked: usize,
    /// Components failing both the relative and the absolute test.
    pub failures: usize,
    pub rtol: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }

    pub fn merge(&mut self, other: &GradReport) {
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.checked += other.checked;
        self.failures += other.failures;
    }

    pub fn empty(rtol: f64) -> Self {
        Self {
            max_rel_err: 0.0,
            checked: 0,
            failures: 0,
            rtol,
        }
    }
}

/// Component `i` passes when `|a - n| <= rtol * max(|a|, |n|)` or `|a - n| <= atol`.
/// `atol` sits at the finite-difference round-off floor.
pub fn compare_gradients(analytic: &[f64], numeric: &[f64], rtol: f64, atol: f64) -> GradReport {
    assert_eq!(analytic.len(), numeric.len());
    let mut rep = GradReport::empty(rtol);
    for (&a, &n) in analytic.iter().zip(numeric) {
        rep.checked += 1;
        let diff = (a - n).abs();
        let scale = a.abs().max(n.abs());
        let rel = diff / scale;
        if scale > 1e3 * atol || diff > atol {
            rep.max_rel_err = rep.max_rel_err.max(rel);
        }
        if diff <= atol {
            continue;
        }
        if rel > rtol || !rel.is_finite() {
            rep.failures += 1;
        }
    }
    rep
}

/// Compositing thresholds for finite-difference checks. The alpha skip and the
/// transmittance stop are step functions, so a perturbation crossing either one
/// produces a jump no difference quotient can follow; both are disabled here.
pub fn smooth_raster_config() -> RasterConfig {
    RasterConfig {
        alpha_min: 0.0,
        t_min: 0.0,
        ..RasterConfig::default()
    }
}

/// Random scene for gradient checks: `n` primitives at well separated depths
/// (so the sort order survives perturbation), opacity logits in `[-2, 2]` (so
/// the 0.99 clamp never engages), frontal camera, `size × size` pixels.
pub fn random_raster_scene(seed: u64, n: usize, z: usize, size: usize) -> (GaussianCloud, CameraPose) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cloud = GaussianCloud::new(z);
    for i in 0..n {
        let depth = -0.8 + 1.6 * (i as f64 + 0.5) / n as f64;
        let prim = GaussianPrimitive {
            mu: [rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6), depth],
            scale_log: [
                rng.gen_range(-2.5f64..-1.4),
                rng.gen_range(-2.5f64..-1.4),
                rng.gen_range(-2.5f64..-1.4),
            ],
            rot: [
                rng.gen_range(0.3..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ],
            opacity_logit: rng.gen_range(-2.0..2.0),
            feat: (0..z).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        };
        cloud.push(&prim, Branch::Visible).expect("matching feature dim");
    }
    let f = 1.35 * size as f64;
    let cam = CameraPose::look_at(
        Vector3::new(0.0, 0.0, -4.0),
        Vector3::zeros(),
        Vector3::new(0.0, 1.0, 0.0),
        f,
        f,
        size,
        size,
    );
    (cloud, cam)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reduced_suite_passes() {
        let res = run_suite(&SuiteOptions { instances: 3, seed: 1 }).unwrap();
        assert_eq!(res.len(), 7 + TAPE_OPS.len());
        for r in &res {
            assert!(r.passed(), "{}", r.summary());
            assert!(r.report.checked > 0, "{}", r.name);
        }
    }

    #[test]
    fn floored_comparison_uses_the_larger_floor() {
        let r = compare_gradients_floored(&[1.0, 0.0], &[(1.5, 0.6), (1e-12, 0.0)], 1e-3, 1e-9);
        assert!(r.passed());
        let r = compare_gradients_floored(&[1.0], &[(1.5, 0.1)], 1e-3, 1e-9);
        assert_eq!(r.failures, 1);
    }
}
