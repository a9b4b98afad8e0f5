//! Forward noising, the variance-preserving schedule, per-token implicit
//! reverse steps, and the masked training loss.
//!
//! Unlike a uniform-step sampler, every token carries its own (t, s) level
//! pair taken from the schedule matrix; conditioning falls out of the same
//! mechanism because a token held at level 0 never changes.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rand::SeedableRng;

use crate::scene::{SceneTensor, CHANNELS};
use crate::{Error, Result};

/// Below this magnitude of alpha(t) the clean-state inversion is replaced by
/// the carried estimate.
pub const ALPHA_SINGULARITY: f64 = 1e-6;

/// Cosine variance-preserving noise schedule: alpha(t) = cos(pi t / 2),
/// sigma(t) = sin(pi t / 2), with the endpoints pinned exactly so that
/// alpha(0) = 1, sigma(0) = 0, alpha(1) = 0, sigma(1) = 1.
///
/// `grid` is the number of discretization steps M; the full level lattice is
/// `{1, (M-1)/M, ..., 1/M, 0}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSchedule {
    grid: usize,
}

impl NoiseSchedule {
    pub const DEFAULT_GRID: usize = 32;

    pub fn new(grid: usize) -> Result<Self> {
        if grid == 0 {
            return Err(Error::invalid("noise schedule grid must be >= 1"));
        }
        Ok(NoiseSchedule { grid })
    }

    pub fn standard() -> Self {
        NoiseSchedule {
            grid: Self::DEFAULT_GRID,
        }
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn alpha(&self, t: f64) -> f64 {
        if t <= 0.0 {
            1.0
        } else if t >= 1.0 {
            0.0
        } else {
            (std::f64::consts::FRAC_PI_2 * t).cos()
        }
    }

    pub fn sigma(&self, t: f64) -> f64 {
        if t <= 0.0 {
            0.0
        } else if t >= 1.0 {
            1.0
        } else {
            (std::f64::consts::FRAC_PI_2 * t).sin()
        }
    }

    /// Full descending lattice `{1, (M-1)/M, ..., 0}` of length M + 1.
    pub fn full_grid(&self) -> Vec<f64> {
        (0..=self.grid)
            .map(|j| (self.grid - j) as f64 / self.grid as f64)
            .collect()
    }
}

/// Per-(agent, timestep) noise levels in `[0, 1]`. Level 0 marks a clean /
/// conditioned token, level 1 pure noise.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseMatrix(Array2<f64>);

impl NoiseMatrix {
    pub fn new(levels: Array2<f64>) -> Result<Self> {
        for &v in levels.iter() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!(
                    "noise level {v} outside [0, 1]"
                )));
            }
        }
        Ok(NoiseMatrix(levels))
    }

    pub fn filled(agents: usize, frames: usize, level: f64) -> Result<Self> {
        NoiseMatrix::new(Array2::from_elem((agents, frames), level))
    }

    pub fn levels(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn get(&self, agent: usize, frame: usize) -> f64 {
        self.0[[agent, frame]]
    }
}

/// Applies the forward process per token: `alpha(k) x0 + sigma(k) eps` with
/// `eps ~ N(0, I)` drawn per channel. Invalid tokens stay untouched (zero).
/// The drawn noise is returned for loss computation; it is drawn for every
/// token (including conditioned and invalid ones) so the draw sequence is
/// independent of the mask.
pub fn add_noise_with_rng(
    scene0: &SceneTensor,
    k: &NoiseMatrix,
    rng: &mut impl Rng,
) -> Result<(SceneTensor, Array3<f64>)> {
    let (a, t) = scene0.valid.dim();
    if k.dim() != (a, t) {
        return Err(Error::invalid(format!(
            "noise matrix shape {:?} does not match scene ({a}, {t})",
            k.dim()
        )));
    }
    let schedule = NoiseSchedule::standard();
    let mut eps = Array3::zeros((a, t, CHANNELS));
    for v in eps.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
    let mut noisy = scene0.clone();
    for ai in 0..a {
        for ti in 0..t {
            if !scene0.valid[[ai, ti]] {
                continue;
            }
            let level = k.get(ai, ti);
            let alpha = schedule.alpha(level);
            let sigma = schedule.sigma(level);
            for c in 0..CHANNELS {
                noisy.states[[ai, ti, c]] =
                    alpha * scene0.states[[ai, ti, c]] + sigma * eps[[ai, ti, c]];
            }
        }
    }
    Ok((noisy, eps))
}

/// Seeded convenience wrapper around [`add_noise_with_rng`]; identical seeds
/// yield bit-identical noise.
pub fn add_noise(
    scene0: &SceneTensor,
    k: &NoiseMatrix,
    seed: u64,
) -> Result<(SceneTensor, Array3<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    add_noise_with_rng(scene0, k, &mut rng)
}

/// Masked-loss result; `empty_support` is raised when no token carried
/// weight (the loss is then defined as 0).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub empty_support: bool,
}

/// Mean squared error over tokens where `valid && weight` holds, averaging
/// per channel first: each weighted token contributes `|e|^2 / CHANNELS`.
/// Callers pass `weight = (k > 0)` so pure-conditioning tokens carry zero
/// weight.
pub fn masked_mse_loss(
    eps_pred: &Array3<f64>,
    eps_true: &Array3<f64>,
    valid: &Array2<bool>,
    weight: &Array2<bool>,
) -> Result<LossValue> {
    if eps_pred.dim() != eps_true.dim() {
        return Err(Error::invalid("eps_pred and eps_true shapes differ"));
    }
    let (a, t, d) = eps_pred.dim();
    if valid.dim() != (a, t) || weight.dim() != (a, t) {
        return Err(Error::invalid("mask shape does not match eps"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for ai in 0..a {
        for ti in 0..t {
            if !(valid[[ai, ti]] && weight[[ai, ti]]) {
                continue;
            }
            count += 1;
            let mut sq = 0.0;
            for c in 0..d {
                let e = eps_pred[[ai, ti, c]] - eps_true[[ai, ti, c]];
                sq += e * e;
            }
            total += sq / d as f64;
        }
    }
    if count == 0 {
        return Ok(LossValue {
            value: 0.0,
            empty_support: true,
        });
    }
    Ok(LossValue {
        value: total / count as f64,
        empty_support: false,
    })
}

/// Result of one reverse step: the advanced scene plus the clean-state
/// estimate to carry into the next step (needed at the alpha = 0
/// singularity, where the inversion is undefined).
#[derive(Clone, Debug)]
pub struct ReverseOutcome {
    pub scene: SceneTensor,
    pub x0_estimate: Array3<f64>,
}

/// Per-token clean-state estimate: `(x_t - sigma(t) eps_hat) / alpha(t)`
/// where `alpha(t)` is non-singular, otherwise the carried estimate.
pub fn estimate_clean(
    noisy: &SceneTensor,
    k_now: &NoiseMatrix,
    eps_hat: &Array3<f64>,
    carry: &Array3<f64>,
    schedule: &NoiseSchedule,
) -> Array3<f64> {
    let (a, t) = noisy.valid.dim();
    let mut x0 = carry.clone();
    for ai in 0..a {
        for ti in 0..t {
            if !noisy.valid[[ai, ti]] {
                continue;
            }
            let level = k_now.get(ai, ti);
            let alpha = schedule.alpha(level);
            if alpha > ALPHA_SINGULARITY {
                let sigma = schedule.sigma(level);
                for c in 0..CHANNELS {
                    x0[[ai, ti, c]] =
                        (noisy.states[[ai, ti, c]] - sigma * eps_hat[[ai, ti, c]]) / alpha;
                }
            }
        }
    }
    x0
}

/// Recombines a clean-state estimate with the predicted noise at the target
/// levels: `x_s = alpha(s) x0 + sigma(s) eps_hat`.
fn recombine(
    x0: &Array3<f64>,
    eps_hat: &Array3<f64>,
    k_next: &NoiseMatrix,
    valid: &Array2<bool>,
    schedule: &NoiseSchedule,
) -> Array3<f64> {
    let (a, t) = valid.dim();
    let mut out = Array3::zeros((a, t, CHANNELS));
    for ai in 0..a {
        for ti in 0..t {
            if !valid[[ai, ti]] {
                continue;
            }
            let s = k_next.get(ai, ti);
            let alpha = schedule.alpha(s);
            let sigma = schedule.sigma(s);
            for c in 0..CHANNELS {
                out[[ai, ti, c]] = alpha * x0[[ai, ti, c]] + sigma * eps_hat[[ai, ti, c]];
            }
        }
    }
    out
}

/// One deterministic implicit reverse step from per-token levels `k_now` to
/// `k_next` (elementwise `k_next <= k_now` required; noise never increases).
///
/// Tokens with `k_now == k_next` are returned bit-identically, which is what
/// keeps conditioned tokens (level 0 throughout) exact. `transform_clean`,
/// when given, is applied to the clean-state estimate before recombination —
/// this is the hook behavior guidance plugs into.
pub fn reverse_step(
    noisy: &SceneTensor,
    k_now: &NoiseMatrix,
    k_next: &NoiseMatrix,
    eps_hat: &Array3<f64>,
    carry: &Array3<f64>,
    schedule: &NoiseSchedule,
    transform_clean: Option<&mut dyn FnMut(&mut Array3<f64>)>,
) -> Result<ReverseOutcome> {
    let (a, t) = noisy.valid.dim();
    if k_now.dim() != (a, t) || k_next.dim() != (a, t) {
        return Err(Error::invalid("noise matrix shape mismatch"));
    }
    for ai in 0..a {
        for ti in 0..t {
            if k_next.get(ai, ti) > k_now.get(ai, ti) {
                return Err(Error::invalid(format!(
                    "noise increases at token ({ai}, {ti}): {} -> {}",
                    k_now.get(ai, ti),
                    k_next.get(ai, ti)
                )));
            }
        }
    }

    let mut x0 = estimate_clean(noisy, k_now, eps_hat, carry, schedule);
    if let Some(f) = transform_clean {
        f(&mut x0);
    }
    let advanced = recombine(&x0, eps_hat, k_next, &noisy.valid, schedule);

    let mut scene = noisy.clone();
    for ai in 0..a {
        for ti in 0..t {
            if !noisy.valid[[ai, ti]] {
                continue;
            }
            // Bit-exact keep for tokens whose level does not move.
            if k_now.get(ai, ti) != k_next.get(ai, ti) {
                for c in 0..CHANNELS {
                    scene.states[[ai, ti, c]] = advanced[[ai, ti, c]];
                }
            }
        }
    }
    Ok(ReverseOutcome {
        scene,
        x0_estimate: x0,
    })
}

/// Uniformly subsamples the descending level grid: `m_reduced + 1` levels
/// from 1 to 0 inclusive, taken at evenly spaced (rounded) indices of the
/// full `m_full` lattice.
pub fn subsample_grid(m_full: usize, m_reduced: usize) -> Result<Vec<f64>> {
    if m_reduced < 1 || m_reduced > m_full {
        return Err(Error::invalid(format!(
            "reduced step count must be in [1, {m_full}], got {m_reduced}"
        )));
    }
    let levels = (0..=m_reduced)
        .map(|j| {
            let idx = (m_full as f64 * (1.0 - j as f64 / m_reduced as f64)).round();
            idx / m_full as f64
        })
        .collect();
    Ok(levels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn unit_scene(a: usize, t: usize) -> SceneTensor {
        let mut scene = SceneTensor::zeros(a, t);
        scene.valid.fill(true);
        let mut v = 0.1;
        for x in scene.states.iter_mut() {
            *x = v;
            v = (v * 1.7 + 0.3) % 2.0 - 1.0;
        }
        scene
    }

    #[test]
    fn schedule_endpoints_exact() {
        let s = NoiseSchedule::standard();
        assert_eq!(s.alpha(0.0), 1.0);
        assert_eq!(s.sigma(0.0), 0.0);
        assert_eq!(s.alpha(1.0), 0.0);
        assert_eq!(s.sigma(1.0), 1.0);
    }

    #[test]
    fn schedule_variance_preserving() {
        let s = NoiseSchedule::standard();
        for i in 0..=1000 {
            let t = i as f64 / 1000.0;
            let vp = s.alpha(t).powi(2) + s.sigma(t).powi(2);
            assert!((vp - 1.0).abs() < 1e-12, "t={t}: {vp}");
        }
    }

    #[test]
    fn schedule_alpha_strictly_decreasing() {
        let s = NoiseSchedule::standard();
        let mut prev = s.alpha(0.0);
        for i in 1..=100 {
            let a = s.alpha(i as f64 / 100.0);
            assert!(a < prev);
            prev = a;
        }
    }

    #[test]
    fn zero_levels_leave_scene_exact() {
        let scene = unit_scene(2, 3);
        let k = NoiseMatrix::filled(2, 3, 0.0).unwrap();
        let (noisy, eps) = add_noise(&scene, &k, 7).unwrap();
        assert_eq!(noisy.states, scene.states);
        assert!(eps.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn unit_levels_return_pure_noise() {
        let scene = unit_scene(2, 3);
        let k = NoiseMatrix::filled(2, 3, 1.0).unwrap();
        let (noisy, eps) = add_noise(&scene, &k, 7).unwrap();
        assert_eq!(noisy.states, eps);
    }

    #[test]
    fn add_noise_is_seed_deterministic() {
        let scene = unit_scene(3, 4);
        let k = NoiseMatrix::filled(3, 4, 0.5).unwrap();
        let (n1, e1) = add_noise(&scene, &k, 42).unwrap();
        let (n2, e2) = add_noise(&scene, &k, 42).unwrap();
        assert_eq!(n1.states, n2.states);
        assert_eq!(e1, e2);
    }

    #[test]
    fn level_outside_range_rejected() {
        assert!(NoiseMatrix::filled(1, 1, 1.2).is_err());
        assert!(NoiseMatrix::filled(1, 1, -0.1).is_err());
    }

    #[test]
    fn half_level_monte_carlo_variance() {
        // At k = 0.5 the output of a unit-variance input stays unit-variance.
        let mut scene = SceneTensor::zeros(1, 1);
        scene.valid.fill(true);
        let k = NoiseMatrix::filled(1, 1, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let draws = 100_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..draws {
            for c in 0..CHANNELS {
                scene.states[[0, 0, c]] = StandardNormal.sample(&mut rng);
            }
            let (noisy, _) = add_noise_with_rng(&scene, &k, &mut rng).unwrap();
            let v = noisy.states[[0, 0, 0]];
            sum += v;
            sumsq += v * v;
        }
        let n = draws as f64;
        let var = sumsq / n - (sum / n).powi(2);
        assert!((var - 1.0).abs() < 0.02, "variance {var}");
        // And the deterministic part matches cos(pi/4).
        let s = NoiseSchedule::standard();
        assert!((s.alpha(0.5) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn loss_zero_for_exact_prediction() {
        let eps = Array3::from_elem((2, 3, CHANNELS), 0.7);
        let valid = Array2::from_elem((2, 3), true);
        let loss = masked_mse_loss(&eps, &eps, &valid, &valid).unwrap();
        assert_eq!(loss.value, 0.0);
        assert!(!loss.empty_support);
    }

    #[test]
    fn loss_single_token_hand_value() {
        // error (3, 4, 0, ...) -> 25 / 8
        let mut pred = Array3::zeros((1, 1, CHANNELS));
        let truth = Array3::zeros((1, 1, CHANNELS));
        pred[[0, 0, 0]] = 3.0;
        pred[[0, 0, 1]] = 4.0;
        let valid = Array2::from_elem((1, 1), true);
        let loss = masked_mse_loss(&pred, &truth, &valid, &valid).unwrap();
        assert!((loss.value - 25.0 / 8.0).abs() < 1e-12);
    }

    #[test]
    fn loss_empty_support_flagged() {
        let eps = Array3::zeros((1, 2, CHANNELS));
        let valid = Array2::from_elem((1, 2), false);
        let weight = Array2::from_elem((1, 2), true);
        let loss = masked_mse_loss(&eps, &eps, &valid, &weight).unwrap();
        assert_eq!(loss.value, 0.0);
        assert!(loss.empty_support);
    }

    #[test]
    fn reverse_step_inverts_forward_exactly() {
        // Noise at level t, oracle eps, one step to 0 recovers x0.
        let scene = unit_scene(2, 3);
        let schedule = NoiseSchedule::standard();
        for &level in &[0.25, 0.5, 0.9] {
            let k = NoiseMatrix::filled(2, 3, level).unwrap();
            let (noisy, eps) = add_noise(&scene, &k, 11).unwrap();
            let zero = NoiseMatrix::filled(2, 3, 0.0).unwrap();
            let carry = Array3::zeros((2, 3, CHANNELS));
            let out =
                reverse_step(&noisy, &k, &zero, &eps, &carry, &schedule, None).unwrap();
            for (got, want) in out.scene.states.iter().zip(scene.states.iter()) {
                assert!((got - want).abs() < 1e-9, "level {level}");
            }
        }
    }

    #[test]
    fn degenerate_step_is_bit_exact() {
        let scene = unit_scene(2, 3);
        let k = NoiseMatrix::filled(2, 3, 0.5).unwrap();
        let (noisy, eps) = add_noise(&scene, &k, 3).unwrap();
        let carry = Array3::zeros((2, 3, CHANNELS));
        let out = reverse_step(
            &noisy,
            &k,
            &k,
            &eps,
            &carry,
            &NoiseSchedule::standard(),
            None,
        )
        .unwrap();
        assert_eq!(out.scene.states, noisy.states);
    }

    #[test]
    fn alpha_singularity_uses_carry_and_eps_path() {
        let mut noisy = SceneTensor::zeros(1, 1);
        noisy.valid.fill(true);
        noisy.states[[0, 0, 0]] = 0.8;
        let ones = NoiseMatrix::filled(1, 1, 1.0).unwrap();
        let half = NoiseMatrix::filled(1, 1, 0.5).unwrap();
        let eps = Array3::from_elem((1, 1, CHANNELS), 0.8);
        let carry = Array3::zeros((1, 1, CHANNELS));
        let schedule = NoiseSchedule::standard();
        let out = reverse_step(&noisy, &ones, &half, &eps, &carry, &schedule, None).unwrap();
        // x0 falls back to carry (zero), so x_s = sigma(0.5) * eps.
        let want = schedule.sigma(0.5) * 0.8;
        assert!((out.scene.states[[0, 0, 0]] - want).abs() < 1e-12);
        assert_eq!(out.x0_estimate[[0, 0, 0]], 0.0);
    }

    #[test]
    fn increasing_noise_rejected() {
        let scene = unit_scene(1, 1);
        let low = NoiseMatrix::filled(1, 1, 0.2).unwrap();
        let high = NoiseMatrix::filled(1, 1, 0.3).unwrap();
        let eps = Array3::zeros((1, 1, CHANNELS));
        let carry = Array3::zeros((1, 1, CHANNELS));
        assert!(reverse_step(
            &scene,
            &low,
            &high,
            &eps,
            &carry,
            &NoiseSchedule::standard(),
            None
        )
        .is_err());
    }

    #[test]
    fn subsample_full_grid_is_identity() {
        let levels = subsample_grid(32, 32).unwrap();
        assert_eq!(levels.len(), 33);
        assert_eq!(levels[0], 1.0);
        assert_eq!(levels[32], 0.0);
        for (j, l) in levels.iter().enumerate() {
            assert!((l - (32 - j) as f64 / 32.0).abs() < 1e-15);
        }
    }

    #[test]
    fn subsample_18_of_32() {
        let levels = subsample_grid(32, 18).unwrap();
        assert_eq!(levels.len(), 19);
        assert_eq!(levels[0], 1.0);
        assert_eq!(levels[18], 0.0);
        // Strictly descending on the 1/32 lattice.
        for w in levels.windows(2) {
            assert!(w[1] < w[0]);
            assert!((w[0] * 32.0 - (w[0] * 32.0).round()).abs() < 1e-9);
        }
    }

    #[test]
    fn subsample_single_step() {
        assert_eq!(subsample_grid(32, 1).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn subsample_rejects_zero() {
        assert!(subsample_grid(32, 0).is_err());
    }
}
