//! Noise schedules for variance-preserving diffusion.
//!
//! `alpha(t)` is the cumulative signal coefficient ᾱ_t (product convention):
//! x_t = √α_t·x₀ + √(1−α_t)·ε. The per-step rate is recovered as
//! β_t = 1 − α_t/α_{t−1}, and α_0 := 1 so boundary cases at t = 1 are
//! well-defined. Also houses the reverse-process posterior variance σ_t² and
//! the timestep-subset plans used by skipping samplers.

use crate::error::{Error, Result};
use crate::grid::ImageGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    /// β linearly interpolated between the two params (β_min, β_max).
    LinearBeta,
    /// Squared-cosine cumulative schedule; params are (offset s, β clip).
    Cosine,
}

#[derive(Debug, Clone)]
pub struct Schedule {
    /// alphas[t-1] = ᾱ_t for t in 1..=T; strictly decreasing, each in (0, 1].
    alphas: Vec<f64>,
}

impl Schedule {
    /// Validating constructor; the public builders funnel through here so the
    /// strict-decrease and range invariants hold for every live `Schedule`.
    pub fn from_alphas(alphas: Vec<f64>) -> Result<Schedule> {
        if alphas.is_empty() {
            return Err(Error::Schedule("schedule must have at least one step".into()));
        }
        let mut prev = 1.0_f64 + 1e-15; // allow alpha_1 = 1 exactly
        for (i, &a) in alphas.iter().enumerate() {
            if !a.is_finite() || a <= 0.0 || a > 1.0 {
                return Err(Error::Schedule(format!("alpha_{} = {} outside (0, 1]", i + 1, a)));
            }
            if a >= prev {
                return Err(Error::Schedule(format!(
                    "alphas must be strictly decreasing; alpha_{} = {} >= alpha_{} = {}",
                    i + 1,
                    a,
                    i,
                    prev
                )));
            }
            prev = a;
        }
        Ok(Schedule { alphas })
    }

    pub fn t_max(&self) -> u32 {
        self.alphas.len() as u32
    }

    /// ᾱ_t with the α_0 := 1 convention. Panics on t > T (callers validate
    /// ranges at the API boundary).
    #[inline]
    pub fn alpha(&self, t: u32) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alphas[(t - 1) as usize]
        }
    }

    pub fn check_t(&self, t: u32) -> Result<()> {
        if t == 0 || t > self.t_max() {
            return Err(Error::Range(format!("timestep {} outside 1..={}", t, self.t_max())));
        }
        Ok(())
    }

    /// Generation-quality advisory: a terminal alpha above 0.01 means x_T
    /// retains visible signal and samples will not come from the prior.
    /// Advisory only — short schedules are legitimate in tests.
    pub fn quality_warning(&self) -> Option<String> {
        let a_t = self.alpha(self.t_max());
        if a_t > 0.01 {
            Some(format!(
                "terminal alpha {:.6} > 0.01: x_T keeps residual signal; expect biased samples",
                a_t
            ))
        } else {
            None
        }
    }
}

pub fn build_schedule(t_max: u32, kind: ScheduleKind, params: (f64, f64)) -> Result<Schedule> {
    if t_max == 0 {
        return Err(Error::Schedule("T must be >= 1".into()));
    }
    let alphas = match kind {
        ScheduleKind::LinearBeta => {
            let (beta_min, beta_max) = params;
            if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
                return Err(Error::Schedule(format!(
                    "linear-beta needs 0 < beta_min <= beta_max < 1, got ({}, {})",
                    beta_min, beta_max
                )));
            }
            let denom = (t_max - 1).max(1) as f64;
            let mut acc = 1.0;
            (1..=t_max)
                .map(|t| {
                    let beta = beta_min + (beta_max - beta_min) * (t - 1) as f64 / denom;
                    acc *= 1.0 - beta;
                    acc
                })
                .collect()
        }
        ScheduleKind::Cosine => {
            let (offset, beta_clip) = params;
            if !(offset >= 0.0 && offset.is_finite() && beta_clip > 0.0 && beta_clip < 1.0) {
                return Err(Error::Schedule(format!(
                    "cosine needs offset >= 0 and 0 < beta_clip < 1, got ({}, {})",
                    offset, beta_clip
                )));
            }
            // Squared-cosine cumulative curve f(u) = cos²((u/T + s)/(1+s)·π/2),
            // accumulated through per-step ratios so the β clip can bound the
            // collapse near u = T.
            let f = |u: f64| {
                let angle = ((u / t_max as f64 + offset) / (1.0 + offset)) * std::f64::consts::FRAC_PI_2;
                angle.cos().powi(2)
            };
            let mut acc = 1.0;
            let mut prev_f = f(0.0);
            (1..=t_max)
                .map(|t| {
                    let cur_f = f(t as f64);
                    let raw = if prev_f > 0.0 { cur_f / prev_f } else { 0.0 };
                    prev_f = cur_f;
                    acc *= raw.max(1.0 - beta_clip);
                    acc
                })
                .collect()
        }
    };
    Schedule::from_alphas(alphas)
}

/// x_t = √α_t·x₀ + √(1−α_t)·ε, elementwise (forward process marginal).
pub fn add_noise(x0: &ImageGrid, t: u32, eps: &ImageGrid, sched: &Schedule) -> Result<ImageGrid> {
    sched.check_t(t)?;
    let a = sched.alpha(t);
    let (sa, se) = (a.sqrt(), (1.0 - a).sqrt());
    x0.zip_map(eps, |x, e| sa * x + se * e)
}

/// DDPM posterior variance σ_t² = ((1−α_{t−1})/(1−α_t))·(1−α_t/α_{t−1}).
/// Zero at t = 1 because α_0 = 1.
pub fn sigma_sq(t: u32, sched: &Schedule) -> Result<f64> {
    sched.check_t(t)?;
    let (a_t, a_prev) = (sched.alpha(t), sched.alpha(t - 1));
    Ok((1.0 - a_prev) / (1.0 - a_t) * (1.0 - a_t / a_prev))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimestepPlan {
    steps: Vec<u32>,
}

impl TimestepPlan {
    pub fn from_steps(steps: Vec<u32>, t_max: u32) -> Result<TimestepPlan> {
        if steps.is_empty() {
            return Err(Error::Range("timestep plan must be nonempty".into()));
        }
        if *steps.last().unwrap() != 1 {
            return Err(Error::Range("timestep plan must end at 1".into()));
        }
        let mut prev = t_max + 1;
        for &t in &steps {
            if t == 0 || t > t_max {
                return Err(Error::Range(format!("plan step {} outside 1..={}", t, t_max)));
            }
            if t >= prev {
                return Err(Error::Range(format!("plan must be strictly decreasing at {}", t)));
            }
            prev = t;
        }
        Ok(TimestepPlan { steps })
    }

    pub fn steps(&self) -> &[u32] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        false // constructor rejects empty plans
    }

    /// The (t, s) pairs visited by reverse sampling; the final pair is
    /// (1, 0), i.e. the step that emits the sample.
    pub fn transitions(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        (0..self.steps.len()).map(move |i| {
            let t = self.steps[i];
            let s = if i + 1 < self.steps.len() { self.steps[i + 1] } else { 0 };
            (t, s)
        })
    }
}

/// Evenly spaced n-step plan over [T..1]: step i = round(T·(1 − i/n)), last
/// forced to 1. For n ≤ T the rounded points are ≥ 1 apart, so the result is
/// strictly decreasing with length exactly n.
pub fn make_plan(sched: &Schedule, n_steps: u32) -> Result<TimestepPlan> {
    let t_max = sched.t_max();
    if n_steps == 0 || n_steps > t_max {
        return Err(Error::Range(format!("n_steps {} outside 1..={}", n_steps, t_max)));
    }
    let mut steps: Vec<u32> = (0..n_steps)
        .map(|i| (t_max as f64 * (1.0 - i as f64 / n_steps as f64)).round() as u32)
        .collect();
    *steps.last_mut().unwrap() = 1;
    steps.dedup();
    let plan = TimestepPlan::from_steps(steps, t_max)?;
    if plan.len() != n_steps as usize {
        // Unreachable for n_steps <= T by the spacing argument above; kept as
        // a hard check rather than a silent shorter plan.
        return Err(Error::Range(format!(
            "plan spacing collapsed to {} steps, wanted {}",
            plan.len(),
            n_steps
        )));
    }
    Ok(plan)
}
