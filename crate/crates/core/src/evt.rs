//! Extreme-value utilities: two-parameter Weibull fits on distance tails.
//!
//! The fit maximizes the Weibull likelihood on the largest `tail_size`
//! samples. The shape solves the profile equation
//! `n/k + Σln t − n·Σ(t^k ln t)/Σt^k = 0` by Newton iteration inside a
//! maintained bisection bracket (the profile score is strictly decreasing in
//! the shape), and the scale follows in closed form
//! `λ = (Σt^k / n)^(1/k)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape cap past which a tail is treated as numerically constant.
const MAX_SHAPE: f64 = 1e6;

/// Convergence threshold on successive shape iterates.
const SHAPE_TOL: f64 = 1e-10;

const MAX_ITERS: usize = 200;

/// A fitted two-parameter Weibull model over `x > translation`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeibullModel {
    /// Shape parameter, `> 0`.
    pub shape: f64,
    /// Scale parameter, `> 0`.
    pub scale: f64,
    /// Number of largest samples the fit used.
    pub tail_size: usize,
    /// Lower support bound; fits produced here always use 0.
    pub translation: f64,
}

impl WeibullModel {
    /// CDF value in `[0, 1]`; 0 at or below the translation point.
    pub fn cdf(&self, x: f64) -> f64 {
        weibull_cdf(self, x)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.shape > 0.0 && self.shape.is_finite()) {
            return Err(Error::InvalidModel(format!(
                "weibull shape {} must be positive",
                self.shape
            )));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::InvalidModel(format!(
                "weibull scale {} must be positive",
                self.scale
            )));
        }
        if self.translation < 0.0 {
            return Err(Error::InvalidModel("negative weibull translation".into()));
        }
        Ok(())
    }
}

/// Fits a Weibull model to the `tail_size` largest of `samples`.
pub fn fit_weibull_tail(samples: &[f64], tail_size: usize) -> Result<WeibullModel> {
    if tail_size < 2 {
        return Err(Error::InsufficientData(
            "weibull tail needs at least 2 samples".into(),
        ));
    }
    if samples.len() < tail_size {
        return Err(Error::InsufficientData(format!(
            "tail size {} exceeds {} samples",
            tail_size,
            samples.len()
        )));
    }
    if samples.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::NonFinite("weibull samples".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let tail = &sorted[..tail_size];
    let lo = tail[tail_size - 1];
    let hi = tail[0];
    if lo == hi {
        return Err(Error::DegenerateTail(format!(
            "all {tail_size} tail samples equal {hi}"
        )));
    }
    if lo <= 0.0 {
        return Err(Error::DegenerateTail(
            "tail contains non-positive distances".into(),
        ));
    }

    // Work on samples scaled by the tail max: shape is scale-invariant and
    // the fitted scale multiplies back out.
    let scaled: Vec<f64> = tail.iter().map(|t| t / hi).collect();
    let shape = solve_profile_shape(&scaled)?;
    let scale = weibull_scale_for_shape(&scaled, shape) * hi;
    let model = WeibullModel {
        shape,
        scale,
        tail_size,
        translation: 0.0,
    };
    model.validate()?;
    Ok(model)
}

/// Closed-form maximum-likelihood scale for a fixed shape:
/// `(Σ tᵏ / n)^(1/k)`. At shape 1 this is the sample mean.
pub fn weibull_scale_for_shape(samples: &[f64], shape: f64) -> f64 {
    let n = samples.len() as f64;
    let s0: f64 = samples.iter().map(|t| t.powf(shape)).sum();
    (s0 / n).powf(1.0 / shape)
}

fn profile_score(samples: &[f64], ln_t: &[f64], sum_ln: f64, shape: f64) -> (f64, f64) {
    let n = samples.len() as f64;
    let mut s0 = 0.0;
    let mut s1 = 0.0;
    let mut s2 = 0.0;
    for (&t, &lt) in samples.iter().zip(ln_t) {
        let tk = t.powf(shape);
        s0 += tk;
        s1 += tk * lt;
        s2 += tk * lt * lt;
    }
    let f = n / shape + sum_ln - n * s1 / s0;
    let fp = -n / (shape * shape) - n * (s2 * s0 - s1 * s1) / (s0 * s0);
    (f, fp)
}

fn solve_profile_shape(samples: &[f64]) -> Result<f64> {
    let ln_t: Vec<f64> = samples.iter().map(|t| t.ln()).collect();
    let sum_ln: f64 = ln_t.iter().sum();

    // Bracket the root: the score is strictly decreasing, positive near 0.
    let mut lo = 1e-3;
    let mut hi = 1.0;
    while profile_score(samples, &ln_t, sum_ln, hi).0 > 0.0 {
        hi *= 2.0;
        if hi > MAX_SHAPE {
            return Err(Error::DegenerateTail(
                "tail nearly constant: shape diverges".into(),
            ));
        }
    }
    while profile_score(samples, &ln_t, sum_ln, lo).0 < 0.0 {
        lo /= 2.0;
        if lo < 1e-12 {
            return Err(Error::DegenerateTail("profile score has no root".into()));
        }
    }

    let mut shape = 1.0_f64.clamp(lo, hi);
    for _ in 0..MAX_ITERS {
        let (f, fp) = profile_score(samples, &ln_t, sum_ln, shape);
        if f > 0.0 {
            lo = shape;
        } else {
            hi = shape;
        }
        let newton = if fp.abs() > 1e-300 {
            shape - f / fp
        } else {
            f64::NAN
        };
        let next = if newton.is_finite() && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        let delta = (next - shape).abs();
        shape = next;
        if delta < SHAPE_TOL {
            break;
        }
    }
    Ok(shape)
}

/// `1 − exp(−((x−τ)/λ)^k)` above the translation point, 0 at or below it.
pub fn weibull_cdf(model: &WeibullModel, x: f64) -> f64 {
    if x <= model.translation {
        return 0.0;
    }
    let y = (x - model.translation) / model.scale;
    1.0 - (-y.powf(model.shape)).exp()
}

/// Sum of log densities of `samples` under `model`. Empty input scores 0.
pub fn weibull_log_likelihood(model: &WeibullModel, samples: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for &x in samples {
        if x <= model.translation {
            return Err(Error::SampleBelowTranslation {
                sample: x,
                translation: model.translation,
            });
        }
        let y = (x - model.translation) / model.scale;
        total += model.shape.ln() - model.scale.ln() + (model.shape - 1.0) * y.ln()
            - y.powf(model.shape);
    }
    Ok(total)
}
