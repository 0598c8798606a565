//! Closed-form corruption, drift, and integration math.
//!
//! Embeddings are plain slices here; the functions are generic over
//! [`Scalar`] because training corrupts f32 batches while tests and the
//! gradcheck path run the identical formulas in f64.
//!
//! Two corruption conventions coexist. The flow head uses the convex form
//! `sigma*eps + (1-sigma)*x` with drift target `x - eps`, integrated from
//! sigma=1 down to 0 by `y <- y + v*dt`; on the straight paths this pairing
//! is exact for any step count. The diffusion baseline uses the variance-
//! preserving form `sqrt(abar)*x + sqrt(1-abar)*eps` under a linear beta
//! schedule with a deterministic DDIM reverse pass.

use rand::Rng;

use crate::error::{CamError, Result};
use crate::rng::normal;
use crate::tensor::{sigmoid, Scalar};

/// Corruption time in [0, 1]: 0 is clean data, 1 is pure noise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseLevel(f64);

impl NoiseLevel {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&sigma) || !sigma.is_finite() {
            return Err(CamError::InvalidConfig(format!(
                "noise level must be in [0,1], got {sigma}"
            )));
        }
        Ok(NoiseLevel(sigma))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Error level k in [0, 1]: weight of the noise component when simulating or
/// injecting feedback error.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct ErrorLevel(f64);

impl TryFrom<f64> for ErrorLevel {
    type Error = CamError;

    fn try_from(k: f64) -> Result<Self> {
        ErrorLevel::new(k)
    }
}

impl From<ErrorLevel> for f64 {
    fn from(k: ErrorLevel) -> f64 {
        k.0
    }
}

impl ErrorLevel {
    pub fn new(k: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&k) || !k.is_finite() {
            return Err(CamError::InvalidConfig(format!(
                "error level must be in [0,1], got {k}"
            )));
        }
        Ok(ErrorLevel(k))
    }

    pub const ZERO: ErrorLevel = ErrorLevel(0.0);

    pub fn value(self) -> f64 {
        self.0
    }
}

fn check_dims(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(CamError::DimensionMismatch {
            context,
            expected,
            got,
        });
    }
    Ok(())
}

/// `k*eps + (1-k)*x` elementwise. Written in the literal convex form so both
/// endpoints are exact: k=0 returns x bit-for-bit, k=1 returns eps.
pub fn noise_augment<T: Scalar>(x: &[T], eps: &[T], k: ErrorLevel) -> Result<Vec<T>> {
    check_dims("noise_augment", x.len(), eps.len())?;
    let kk = T::from_f64(k.value());
    let ck = T::from_f64(1.0 - k.value());
    Ok(x.iter()
        .zip(eps.iter())
        .map(|(&xi, &ei)| kk * ei + ck * xi)
        .collect())
}

/// `sigma*eps + (1-sigma)*x`: the flow-path corruption. Same affine map as
/// [`noise_augment`], kept separate because the two levels mean different
/// things (simulated feedback error vs corruption time).
pub fn rf_corrupt<T: Scalar>(x: &[T], eps: &[T], sigma: NoiseLevel) -> Result<Vec<T>> {
    check_dims("rf_corrupt", x.len(), eps.len())?;
    let s = T::from_f64(sigma.value());
    let cs = T::from_f64(1.0 - sigma.value());
    Ok(x.iter()
        .zip(eps.iter())
        .map(|(&xi, &ei)| s * ei + cs * xi)
        .collect())
}

/// Drift target `x - eps` (data minus noise). Integrating this from sigma=1
/// with [`integrate_rf_ode`] transports eps back to x.
pub fn rf_target_drift<T: Scalar>(x: &[T], eps: &[T]) -> Result<Vec<T>> {
    check_dims("rf_target_drift", x.len(), eps.len())?;
    Ok(x.iter().zip(eps.iter()).map(|(&xi, &ei)| xi - ei).collect())
}

/// Mean of squared elementwise differences.
pub fn mse_loss<T: Scalar>(pred: &[T], target: &[T]) -> Result<f64> {
    check_dims("mse_loss", pred.len(), target.len())?;
    let mut acc = 0.0f64;
    for (&p, &t) in pred.iter().zip(target.iter()) {
        let d = (p - t).to_f64();
        acc += d * d;
    }
    Ok(acc / pred.len() as f64)
}

/// How corruption times are drawn during flow training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
#[derive(Default)]
pub enum SigmaDistribution {
    /// sigmoid(n), n ~ N(0,1). Default: bounded in (0,1) by construction.
    #[default]
    LogitNormal,
    /// min(exp(n), 1), n ~ N(0,1). The literal lognormal reading, clamped to
    /// the valid range; kept only for comparison runs.
    ClampedLognormal,
}


/// Deterministic part of the logit-normal draw, split out for testability.
pub fn sigma_from_unit_normal(n: f64) -> NoiseLevel {
    NoiseLevel(sigmoid(n))
}

/// Draw a corruption time from the configured distribution.
pub fn sample_sigma_from(dist: SigmaDistribution, rng: &mut impl Rng) -> NoiseLevel {
    let n = normal(rng);
    match dist {
        SigmaDistribution::LogitNormal => sigma_from_unit_normal(n),
        SigmaDistribution::ClampedLognormal => NoiseLevel(n.exp().min(1.0)),
    }
}

/// Draw a corruption time from the default logit-normal.
pub fn sample_sigma(rng: &mut impl Rng) -> NoiseLevel {
    sample_sigma_from(SigmaDistribution::LogitNormal, rng)
}

/// Draw a feedback error level k ~ U(0,1).
pub fn sample_error_level(rng: &mut impl Rng) -> ErrorLevel {
    ErrorLevel(rng.gen::<f64>())
}

/// Euler-integrate a drift field from sigma=1 to sigma=0 over `steps`
/// uniform sub-intervals: `y <- y + v(y, sigma) * (1/steps)`. Exact whenever
/// the drift is constant along the path, which is the straight-path case the
/// flow objective trains toward.
pub fn integrate_rf_ode<T, F>(mut drift_fn: F, y_init: &[T], steps: usize) -> Result<Vec<T>>
where
    T: Scalar,
    F: FnMut(&[T], NoiseLevel) -> Vec<T>,
{
    assert!(steps >= 1, "integrate_rf_ode needs at least one step");
    let mut y = y_init.to_vec();
    let dt = T::from_f64(1.0 / steps as f64);
    for i in 0..steps {
        let sigma = NoiseLevel(1.0 - i as f64 / steps as f64);
        let v = drift_fn(&y, sigma);
        check_dims("integrate_rf_ode drift", y.len(), v.len())?;
        if !v.iter().all(|x| x.is_finite()) {
            return Err(CamError::NonFinite {
                what: "drift",
                step: i as u64,
                detail: format!("sigma={}", sigma.value()),
            });
        }
        for (yi, vi) in y.iter_mut().zip(v.iter()) {
            *yi = *yi + *vi * dt;
        }
    }
    Ok(y)
}

/// Linear-beta diffusion schedule over `total_steps` training timesteps.
#[derive(Clone, Debug)]
pub struct DdpmSchedule {
    alpha_bars: Vec<f64>,
}

/// Training timestep count the baseline schedule is defined over.
pub const DDPM_TRAIN_STEPS: usize = 1000;

impl DdpmSchedule {
    /// beta linear from 1e-4 to 0.02 inclusive.
    pub fn linear(total_steps: usize) -> Self {
        assert!(total_steps >= 1);
        let (beta_start, beta_end) = (1e-4, 0.02);
        let mut alpha_bars = Vec::with_capacity(total_steps);
        let mut acc = 1.0f64;
        for i in 0..total_steps {
            let frac = if total_steps == 1 {
                0.0
            } else {
                i as f64 / (total_steps - 1) as f64
            };
            let beta = beta_start + frac * (beta_end - beta_start);
            acc *= 1.0 - beta;
            alpha_bars.push(acc);
        }
        DdpmSchedule { alpha_bars }
    }

    pub fn total_steps(&self) -> usize {
        self.alpha_bars.len()
    }

    pub fn alpha_bar(&self, step_index: usize) -> f64 {
        self.alpha_bars[step_index]
    }

    /// Signal-to-noise ratio `abar / (1-abar)` at a timestep.
    pub fn snr(&self, step_index: usize) -> f64 {
        let ab = self.alpha_bars[step_index];
        ab / (1.0 - ab)
    }

    pub fn corrupt<T: Scalar>(&self, x: &[T], eps: &[T], step_index: usize) -> Result<Vec<T>> {
        check_dims("ddpm corrupt", x.len(), eps.len())?;
        if step_index >= self.alpha_bars.len() {
            return Err(CamError::InvalidConfig(format!(
                "timestep {step_index} out of range 0..{}",
                self.alpha_bars.len()
            )));
        }
        let ab = self.alpha_bars[step_index];
        let sx = T::from_f64(ab.sqrt());
        let se = T::from_f64((1.0 - ab).sqrt());
        Ok(x.iter()
            .zip(eps.iter())
            .map(|(&xi, &ei)| sx * xi + se * ei)
            .collect())
    }
}

/// `sqrt(abar_t)*x + sqrt(1-abar_t)*eps` under the standard linear schedule.
pub fn ddpm_linear_corrupt<T: Scalar>(
    x: &[T],
    eps: &[T],
    step_index: usize,
    total_steps: usize,
) -> Result<Vec<T>> {
    DdpmSchedule::linear(total_steps).corrupt(x, eps, step_index)
}

/// The timesteps a `steps`-step DDIM pass visits, descending. Evenly spread
/// over the training schedule; a single step visits only the last timestep.
pub fn ddim_timesteps(steps: usize, total_steps: usize) -> Vec<usize> {
    assert!(steps >= 1 && total_steps >= 1);
    if steps == 1 {
        return vec![total_steps - 1];
    }
    let mut ts: Vec<usize> = (0..steps)
        .map(|i| {
            ((total_steps - 1) as f64 * i as f64 / (steps - 1) as f64).round() as usize
        })
        .collect();
    ts.dedup();
    ts.reverse();
    ts
}

/// Deterministic DDIM reverse pass from `y_init` (taken as a sample at the
/// last timestep). `eps_pred_fn(y, t)` predicts the noise at training
/// timestep t. With the exact corruption noise as the prediction this
/// inverts [`DdpmSchedule::corrupt`]; with a zero prediction it reduces to
/// the scaling `y_init / sqrt(abar_last)`.
pub fn ddpm_sample<T, F>(
    mut eps_pred_fn: F,
    y_init: &[T],
    steps: usize,
    schedule: &DdpmSchedule,
) -> Result<Vec<T>>
where
    T: Scalar,
    F: FnMut(&[T], usize) -> Vec<T>,
{
    let ts = ddim_timesteps(steps, schedule.total_steps());
    let mut y = y_init.to_vec();
    for (i, &t) in ts.iter().enumerate() {
        let eps = eps_pred_fn(&y, t);
        check_dims("ddpm_sample prediction", y.len(), eps.len())?;
        if !eps.iter().all(|x| x.is_finite()) {
            return Err(CamError::NonFinite {
                what: "epsilon prediction",
                step: i as u64,
                detail: format!("timestep {t}"),
            });
        }
        let ab = schedule.alpha_bar(t);
        let ab_prev = if i + 1 < ts.len() {
            schedule.alpha_bar(ts[i + 1])
        } else {
            1.0
        };
        let inv_sx = T::from_f64(1.0 / ab.sqrt());
        let se = T::from_f64((1.0 - ab).sqrt());
        let sx_prev = T::from_f64(ab_prev.sqrt());
        let se_prev = T::from_f64((1.0 - ab_prev).sqrt());
        for (yi, ei) in y.iter_mut().zip(eps.iter()) {
            let x0 = (*yi - se * *ei) * inv_sx;
            *yi = sx_prev * x0 + se_prev * *ei;
        }
    }
    Ok(y)
}
