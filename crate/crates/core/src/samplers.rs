//! Reverse-process transitions: the DDPM posterior step, the predicted
//! denoised observation φ, the (possibly timestep-skipping) DDIM step, and
//! the unified sampler operator `sample_S` that dispatches on `SamplerKind`
//! while drawing noise from a named deterministic stream.

use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::models::DenoiserModel;
use crate::rng::NoiseStream;
use crate::schedule::{sigma_sq, Schedule};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SamplerKind {
    Ddpm,
    Ddim { eta: f64 },
}

impl SamplerKind {
    pub fn validate(&self) -> Result<()> {
        if let SamplerKind::Ddim { eta } = self {
            if !(0.0..=1.0).contains(eta) {
                return Err(Error::Range(format!("eta {} outside [0, 1]", eta)));
            }
        }
        Ok(())
    }
}

/// φ(x_t, t) = (x_t − √(1−α_t)·ε_θ(x_t,t)) / √α_t — the one-shot prediction
/// of x₀ that synchronization losses are evaluated on.
pub fn predict_denoised(
    model: &dyn DenoiserModel,
    x_t: &ImageGrid,
    t: u32,
    sched: &Schedule,
) -> Result<ImageGrid> {
    sched.check_t(t)?;
    let a = sched.alpha(t);
    let eps = model.predict_eps(x_t, t, sched)?;
    let (se, inv_sa) = ((1.0 - a).sqrt(), 1.0 / a.sqrt());
    x_t.zip_map(&eps, |x, e| (x - se * e) * inv_sa)
}

/// One DDPM ancestral step t → t−1:
/// mean = √(α_{t−1}/α_t)·(x_t − (1/√(1−α_t))·(1−α_t/α_{t−1})·ε̂), plus
/// σ_t·noise. At t = 1 the variance is zero and the output ignores `noise`.
pub fn ddpm_step(
    model: &dyn DenoiserModel,
    x_t: &ImageGrid,
    t: u32,
    noise: &ImageGrid,
    sched: &Schedule,
) -> Result<ImageGrid> {
    sched.check_t(t)?;
    x_t.check_same_shape(noise)?;
    let (a_t, a_prev) = (sched.alpha(t), sched.alpha(t - 1));
    let eps = model.predict_eps(x_t, t, sched)?;
    let scale = (a_prev / a_t).sqrt();
    let eps_coeff = (1.0 - a_t / a_prev) / (1.0 - a_t).sqrt();
    let mut out = x_t.zip_map(&eps, |x, e| scale * (x - eps_coeff * e))?;
    let sig = sigma_sq(t, sched)?.sqrt();
    if sig > 0.0 {
        out.add_scaled(sig, noise)?;
    }
    Ok(out)
}

/// DDIM noise level σ̃ for a transition t → s at a given η:
/// σ̃ = η·√((1−α_s)/(1−α_t))·√(1−α_t/α_s). Zero when s = 0 (α_0 = 1) and
/// equal to the DDPM σ_t for η = 1 on adjacent steps.
pub fn ddim_sigma(t: u32, s: u32, eta: f64, sched: &Schedule) -> Result<f64> {
    sched.check_t(t)?;
    if s >= t {
        return Err(Error::Range(format!("ddim needs s < t, got s={} t={}", s, t)));
    }
    let (a_t, a_s) = (sched.alpha(t), sched.alpha(s));
    Ok(eta * ((1.0 - a_s) / (1.0 - a_t)).sqrt() * (1.0 - a_t / a_s).sqrt())
}

/// One DDIM step t → s (s = 0 emits the predicted x₀):
/// x_s = √α_s·x̂₀ + √(1−α_s−σ̃²)·(x_t−√α_t·x̂₀)/√(1−α_t) + σ̃·noise.
/// `noise` is ignored whenever σ̃ = 0, so η = 0 is fully deterministic.
pub fn ddim_step(
    model: &dyn DenoiserModel,
    x_t: &ImageGrid,
    t: u32,
    s: u32,
    noise: &ImageGrid,
    sched: &Schedule,
    eta: f64,
) -> Result<ImageGrid> {
    SamplerKind::Ddim { eta }.validate()?;
    sched.check_t(t)?;
    if s >= t {
        return Err(Error::Range(format!("ddim needs s < t, got s={} t={}", s, t)));
    }
    x_t.check_same_shape(noise)?;
    let (a_t, a_s) = (sched.alpha(t), sched.alpha(s));
    let x0_hat = predict_denoised(model, x_t, t, sched)?;
    let sigma = if eta == 0.0 { 0.0 } else { ddim_sigma(t, s, eta, sched)? };
    let dir_var = 1.0 - a_s - sigma * sigma;
    if dir_var < 0.0 {
        return Err(Error::Variance(format!(
            "1 - alpha_s - sigma^2 = {} < 0 for t={} s={} eta={}",
            dir_var, t, s, eta
        )));
    }
    let sa_s = a_s.sqrt();
    let dir_coeff = dir_var.sqrt() / (1.0 - a_t).sqrt();
    let sa_t = a_t.sqrt();

    let mut out = x0_hat.map(|v| sa_s * v);
    if dir_coeff != 0.0 {
        let dir = x_t.zip_map(&x0_hat, |x, x0| x - sa_t * x0)?;
        out.add_scaled(dir_coeff, &dir)?;
    }
    if sigma > 0.0 {
        out.add_scaled(sigma, noise)?;
    }
    Ok(out)
}

/// The sampler operator S: dispatches to the DDPM or DDIM transition,
/// drawing any required noise from the caller's deterministic stream. DDPM
/// only supports adjacent transitions; deterministic DDIM (η = 0) draws
/// nothing, leaving the stream position untouched.
pub fn sample_s(
    model: &dyn DenoiserModel,
    x_t: &ImageGrid,
    t: u32,
    s: u32,
    stream: &mut NoiseStream,
    kind: SamplerKind,
    sched: &Schedule,
) -> Result<ImageGrid> {
    kind.validate()?;
    let (h, w, d) = x_t.shape();
    match kind {
        SamplerKind::Ddpm => {
            if s + 1 != t {
                return Err(Error::UnsupportedTransition(format!(
                    "ddpm steps must be adjacent; got t={} s={}",
                    t, s
                )));
            }
            let noise = stream.normal_grid(h, w, d);
            ddpm_step(model, x_t, t, &noise, sched)
        }
        SamplerKind::Ddim { eta } => {
            let noise = if eta > 0.0 {
                stream.normal_grid(h, w, d)
            } else {
                ImageGrid::zeros(h, w, d)
            };
            ddim_step(model, x_t, t, s, &noise, sched, eta)
        }
    }
}
