//! Central finite-difference gradient checks for `f64` code paths.

use crate::tensor::Tensor4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Perturbation used by [`gradient_error`].
pub const FD_STEP: f64 = 1e-4;

/// Standard-normal tensor from a seeded generator.
pub fn random_tensor(dims: [usize; 4], rng: &mut impl Rng) -> Tensor4<f64> {
    let normal = rand_distr::StandardNormal;
    Tensor4::from_fn(dims, |_| rng.sample::<f64, _>(normal))
}

/// Relative error `|a - n| / max(|a|, |n|)` with a small floor on the
/// denominator so exact zeros compare cleanly.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7)
}

/// Largest relative error between `analytic` and central differences of `f`
/// at `x`, over `samples` seeded coordinates (all of them if fewer).
pub fn gradient_error(
    x: &Tensor4<f64>,
    analytic: &Tensor4<f64>,
    f: impl FnMut(&Tensor4<f64>) -> f64,
    samples: usize,
    seed: u64,
) -> f64 {
    gradient_error_with_step(x, analytic, f, samples, seed, FD_STEP)
}

/// [`gradient_error`] with an explicit perturbation.
pub fn gradient_error_with_step(
    x: &Tensor4<f64>,
    analytic: &Tensor4<f64>,
    mut f: impl FnMut(&Tensor4<f64>) -> f64,
    samples: usize,
    seed: u64,
    step: f64,
) -> f64 {
    assert_eq!(x.dims(), analytic.dims(), "gradient shape");
    let n = x.len();
    let idx: Vec<usize> = if n <= samples {
        (0..n).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..samples).map(|_| rng.random_range(0..n)).collect()
    };
    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for i in idx {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe);
        probe.data_mut()[i] = orig - step;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    worst
}

#[cfg(test)]
pub(crate) fn check_gradient(
    x: &Tensor4<f64>,
    analytic: &Tensor4<f64>,
    f: impl FnMut(&Tensor4<f64>) -> f64,
    samples: usize,
    seed: u64,
) {
    let err = gradient_error(x, analytic, f, samples, seed);
    assert!(err < 1e-4, "relative gradient error {err:e}");
}
