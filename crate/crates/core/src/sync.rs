//! Cross-window synchronization and the full panorama reverse loop.
//!
//! Each reverse step runs three stages in order:
//!
//! 1. **Synchronize** — gradient-descend every window toward the anchor
//!    window on a perceptual loss, computed either between predicted
//!    denoised observations (guidance through the model, the default) or
//!    directly between the noisy window latents.
//! 2. **Denoise** — advance every window one sampler transition with its
//!    own counter-based noise stream.
//! 3. **Fuse** — average overlapping windows into the panorama and scatter
//!    the result back so all windows agree before the next step.
//!
//! The synchronization weight starts at `w0` and is multiplied by `decay`
//! after every step, whether or not synchronization ran at that step.

use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::losses::PerceptualLoss;
use crate::models::DenoiserModel;
use crate::panorama::{fuse_average, scatter, WindowLayout, WindowSet};
use crate::par::par_map;
use crate::rng::{NoiseStream, StreamDomain};
use crate::samplers::{predict_denoised, sample_s, SamplerKind};
use crate::schedule::{Schedule, TimestepPlan};

/// When synchronization runs within the reverse plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyncSchedule {
    /// At every reverse step.
    EveryStep,
    /// Exactly `f` times, spread evenly across the plan (always includes
    /// the first step).
    Interval(u32),
    /// At the first `k` steps only.
    Initial(u32),
}

impl SyncSchedule {
    /// Does synchronization run at 0-based plan position `pos` of a
    /// `plan_len`-step plan?
    pub fn applies(&self, pos: usize, plan_len: usize) -> bool {
        match *self {
            SyncSchedule::EveryStep => true,
            SyncSchedule::Interval(f) => {
                let f = f as usize;
                // Fires wherever floor(pos*f/len) increments: f evenly
                // spaced events starting at pos 0.
                pos == 0 || (pos * f) / plan_len > ((pos - 1) * f) / plan_len
            }
            SyncSchedule::Initial(k) => pos < k as usize,
        }
    }

    pub fn validate(&self, plan_len: usize) -> Result<()> {
        match *self {
            SyncSchedule::EveryStep => Ok(()),
            SyncSchedule::Interval(f) => {
                if f == 0 || f as usize > plan_len {
                    Err(Error::config(
                        "sync.schedule",
                        format!("interval count {f} must be in 1..={plan_len}"),
                    ))
                } else {
                    Ok(())
                }
            }
            SyncSchedule::Initial(k) => {
                if k == 0 || k as usize > plan_len {
                    Err(Error::config(
                        "sync.schedule",
                        format!("initial count {k} must be in 1..={plan_len}"),
                    ))
                } else {
                    Ok(())
                }
            }
        }
    }
}

/// What the perceptual loss compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuidanceTarget {
    /// Predicted denoised observations; the gradient flows back through
    /// the denoiser (the default, and the stronger variant).
    Denoised,
    /// The noisy window latents themselves; no model evaluation.
    Noisy,
}

/// Synchronization configuration for a panorama run.
pub struct SyncPolicy {
    /// Initial gradient-descent weight.
    pub w0: f64,
    /// Per-step multiplicative weight decay, in (0, 1].
    pub decay: f64,
    pub schedule: SyncSchedule,
    pub guidance_target: GuidanceTarget,
    pub loss: Box<dyn PerceptualLoss>,
}

impl SyncPolicy {
    pub fn validate(&self, plan_len: usize) -> Result<()> {
        if !self.w0.is_finite() || self.w0 < 0.0 {
            return Err(Error::config("sync.w0", "must be finite and >= 0"));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::config("sync.decay", "must be in (0, 1]"));
        }
        self.schedule.validate(plan_len)
    }
}

/// One gradient-descent synchronization pass toward the anchor window,
/// with the loss taken between predicted denoised observations.
///
/// The anchor's observation is computed once and treated as a constant:
/// the anchor window itself is returned unchanged. With `w_t == 0` all
/// windows are returned bitwise unchanged and no model work is done.
///
/// Returns the updated windows and the per-window loss values (0 for the
/// anchor).
pub fn sync_update(
    ws: &[ImageGrid],
    t: u32,
    w_t: f64,
    model: &dyn DenoiserModel,
    sched: &Schedule,
    policy: &SyncPolicy,
    layout: &WindowLayout,
) -> Result<(WindowSet, Vec<f64>)> {
    check_windows(ws, layout)?;
    sched.check_t(t)?;
    let anchor = layout.anchor_index();
    if w_t == 0.0 {
        return Ok((ws.to_vec(), vec![0.0; ws.len()]));
    }
    let alpha = sched.alpha(t);
    let sqrt_alpha = alpha.sqrt();
    let sqrt_om = (1.0 - alpha).sqrt();
    let phi_anchor = predict_denoised(model, &ws[anchor], t, sched)?;
    let results: Vec<Result<(ImageGrid, f64)>> = par_map(ws, |i, x| {
        if i == anchor {
            return Ok((x.clone(), 0.0));
        }
        let phi = predict_denoised(model, x, t, sched)?;
        let loss = policy.loss.value(&phi, &phi_anchor)?;
        let g = policy.loss.grad_a(&phi, &phi_anchor)?;
        // d loss / d x through phi = (x - sqrt(1-a) eps(x)) / sqrt(a).
        let vjp = model.vjp_eps(x, t, &g, sched)?;
        let mut grad = g;
        grad.add_scaled(-sqrt_om, &vjp)?;
        grad.scale_in_place(1.0 / sqrt_alpha);
        let mut out = x.clone();
        out.add_scaled(-w_t, &grad)?;
        Ok((out, loss))
    });
    collect_window_results(results)
}

/// Synchronization pass with the loss taken directly between the noisy
/// window latents; no model evaluation is involved.
pub fn sync_update_noisy(
    ws: &[ImageGrid],
    t: u32,
    w_t: f64,
    policy: &SyncPolicy,
    layout: &WindowLayout,
) -> Result<(WindowSet, Vec<f64>)> {
    check_windows(ws, layout)?;
    let _ = t; // kept for signature parity with sync_update
    let anchor = layout.anchor_index();
    if w_t == 0.0 {
        return Ok((ws.to_vec(), vec![0.0; ws.len()]));
    }
    let x_anchor = &ws[anchor];
    let results: Vec<Result<(ImageGrid, f64)>> = par_map(ws, |i, x| {
        if i == anchor {
            return Ok((x.clone(), 0.0));
        }
        let loss = policy.loss.value(x, x_anchor)?;
        let grad = policy.loss.grad_a(x, x_anchor)?;
        let mut out = x.clone();
        out.add_scaled(-w_t, &grad)?;
        Ok((out, loss))
    });
    collect_window_results(results)
}

fn check_windows(ws: &[ImageGrid], layout: &WindowLayout) -> Result<()> {
    if ws.len() != layout.n_windows() {
        return Err(Error::Shape {
            expected: format!("{} windows", layout.n_windows()),
            got: format!("{} windows", ws.len()),
        });
    }
    let (h, w, d) = layout.window_shape();
    for (i, g) in ws.iter().enumerate() {
        if g.shape() != (h, w, d) {
            return Err(Error::Shape {
                expected: format!("window shape ({h}, {w}, {d})"),
                got: format!("window {i} has shape {:?}", g.shape()),
            });
        }
    }
    Ok(())
}

fn collect_window_results(
    results: Vec<Result<(ImageGrid, f64)>>,
) -> Result<(WindowSet, Vec<f64>)> {
    let mut windows = Vec::with_capacity(results.len());
    let mut losses = Vec::with_capacity(results.len());
    for r in results {
        let (g, l) = r?;
        windows.push(g);
        losses.push(l);
    }
    Ok((windows, losses))
}

/// Mutable state threaded through the reverse loop.
#[derive(Debug, Clone)]
pub struct RunState {
    pub windows: WindowSet,
    /// 0-based position in the reverse plan (number of steps taken).
    pub plan_pos: usize,
    /// Current synchronization weight.
    pub weight: f64,
    pub seed: u64,
}

/// Per-step diagnostics captured by the reverse loop.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub index: usize,
    pub t: u32,
    pub s: u32,
    /// Synchronization weight in effect at this step.
    pub weight: f64,
    /// Whether a synchronization update actually ran.
    pub sync_applied: bool,
    /// Per-window loss values from the sync pass (all zero when it did
    /// not run; the anchor entry is always zero).
    pub window_losses: Vec<f64>,
}

/// Diagnostics for a full panorama run.
#[derive(Debug, Clone, Default)]
pub struct RunTrace {
    pub n_windows: usize,
    pub anchor_index: usize,
    pub plan_len: usize,
    pub steps: Vec<StepRecord>,
}

impl RunTrace {
    pub fn sync_count(&self) -> usize {
        self.steps.iter().filter(|s| s.sync_applied).count()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.weight).collect()
    }

    /// Plain-text rendering: one header line, then one line per step.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "windows={} anchor={} plan_len={}\n",
            self.n_windows, self.anchor_index, self.plan_len
        );
        for s in &self.steps {
            let losses: Vec<String> = s.window_losses.iter().map(|v| format!("{v}")).collect();
            out.push_str(&format!(
                "step={} t={} s={} w={} sync={} losses={}\n",
                s.index,
                s.t,
                s.s,
                s.weight,
                u8::from(s.sync_applied),
                losses.join(",")
            ));
        }
        out
    }
}

/// Advance the reverse loop by one step: synchronize (if scheduled),
/// denoise every window, fuse and scatter, then decay the weight.
pub fn denoising_one_step(
    state: &RunState,
    plan: &TimestepPlan,
    model: &dyn DenoiserModel,
    sched: &Schedule,
    policy: Option<&SyncPolicy>,
    layout: &WindowLayout,
    kind: SamplerKind,
) -> Result<(RunState, StepRecord)> {
    let pos = state.plan_pos;
    let steps = plan.steps();
    if pos >= steps.len() {
        return Err(Error::Range(format!(
            "plan position {pos} out of range for a {}-step plan",
            steps.len()
        )));
    }
    let t = steps[pos];
    let s = if pos + 1 < steps.len() { steps[pos + 1] } else { 0 };
    let w_t = state.weight;
    let scheduled = policy.map_or(false, |p| p.schedule.applies(pos, steps.len()));
    let applied = scheduled && w_t != 0.0;
    let (ws, losses) = if applied {
        let p = policy.expect("applied implies policy");
        match p.guidance_target {
            GuidanceTarget::Denoised => sync_update(&state.windows, t, w_t, model, sched, p, layout)?,
            GuidanceTarget::Noisy => sync_update_noisy(&state.windows, t, w_t, p, layout)?,
        }
    } else {
        check_windows(&state.windows, layout)?;
        (state.windows.clone(), vec![0.0; state.windows.len()])
    };
    let seed = state.seed;
    let sampled: Vec<Result<ImageGrid>> = par_map(&ws, |i, x| {
        let mut stream = NoiseStream::new(seed, StreamDomain::Sample, i as u32, t);
        sample_s(model, x, t, s, &mut stream, kind, sched)
    });
    let sampled: WindowSet = sampled.into_iter().collect::<Result<_>>()?;
    let fused = fuse_average(&sampled, layout)?;
    let windows = scatter(&fused, layout)?;
    let record = StepRecord {
        index: pos,
        t,
        s,
        weight: w_t,
        sync_applied: applied,
        window_losses: losses,
    };
    let next = RunState {
        windows,
        plan_pos: pos + 1,
        weight: state.weight * policy.map_or(1.0, |p| p.decay),
        seed,
    };
    Ok((next, record))
}

/// Run the full reverse loop and return the fused panorama plus a trace.
///
/// With `policy == None` the loop is plain multi-window denoising with
/// average fusion and no synchronization work at all.
pub fn run_panorama(
    model: &dyn DenoiserModel,
    sched: &Schedule,
    plan: &TimestepPlan,
    layout: &WindowLayout,
    policy: Option<&SyncPolicy>,
    kind: SamplerKind,
    seed: u64,
) -> Result<(ImageGrid, RunTrace)> {
    kind.validate()?;
    if let Some(p) = policy {
        p.validate(plan.len())?;
    }
    let (h, w, d) = layout.panorama_shape();
    let mut init_stream = NoiseStream::new(seed, StreamDomain::PanoramaInit, 0, 0);
    let z_init = init_stream.normal_grid(h, w, d);
    let windows = scatter(&z_init, layout)?;
    let mut state = RunState {
        windows,
        plan_pos: 0,
        weight: policy.map_or(0.0, |p| p.w0),
        seed,
    };
    let mut trace = RunTrace {
        n_windows: layout.n_windows(),
        anchor_index: layout.anchor_index(),
        plan_len: plan.len(),
        steps: Vec::with_capacity(plan.len()),
    };
    for _ in 0..plan.len() {
        let (next, record) = denoising_one_step(&state, plan, model, sched, policy, layout, kind)?;
        state = next;
        trace.steps.push(record);
    }
    let z = fuse_average(&state.windows, layout)?;
    Ok((z, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::bits_eq;
    use crate::losses::{FeatureLoss, FilterBank, StyleLoss};
    use crate::models::GaussianMixturePrior;
    use crate::rng::{NoiseStream, StreamDomain};
    use crate::samplers::ddpm_step;
    use crate::schedule::{build_schedule, make_plan, ScheduleKind};

    fn sched100() -> Schedule {
        build_schedule(100, ScheduleKind::LinearBeta, (1e-4, 2e-2)).unwrap()
    }

    fn layout_1x1(n: usize) -> WindowLayout {
        // n scalar windows tiling a 1 x n panorama with stride 1.
        crate::panorama::make_layout(1, n, 1, 1, 1, 1, crate::panorama::Anchor::Center).unwrap()
    }

    fn layout_rect(n_windows: usize, h: usize, w_x: usize, stride: usize, d: usize) -> WindowLayout {
        let w_z = w_x + stride * (n_windows - 1);
        crate::panorama::make_layout(h, w_z, d, h, w_x, stride, crate::panorama::Anchor::Center)
            .unwrap()
    }

    fn random_windows(layout: &WindowLayout, seed: u64) -> WindowSet {
        let (h, w, d) = layout.window_shape();
        (0..layout.n_windows())
            .map(|i| {
                NoiseStream::new(seed, StreamDomain::Sample, i as u32, 9999).normal_grid(h, w, d)
            })
            .collect()
    }

    fn mse_policy(w0: f64) -> SyncPolicy {
        SyncPolicy {
            w0,
            decay: 0.95,
            schedule: SyncSchedule::EveryStep,
            guidance_target: GuidanceTarget::Denoised,
            loss: Box::new(FeatureLoss::mse(1)),
        }
    }

    fn style_policy(w0: f64, target: GuidanceTarget) -> SyncPolicy {
        SyncPolicy {
            w0,
            decay: 0.95,
            schedule: SyncSchedule::EveryStep,
            guidance_target: target,
            loss: Box::new(StyleLoss { scale: 1.0 }),
        }
    }

    fn std_normal_model() -> GaussianMixturePrior {
        GaussianMixturePrior::new(vec![1.0], vec![vec![0.0]], vec![1.0]).unwrap()
    }

    #[test]
    fn zero_weight_returns_windows_bitwise_unchanged() {
        let sched = sched100();
        let layout = layout_1x1(5);
        let ws = random_windows(&layout, 7);
        let model = std_normal_model();
        let policy = mse_policy(3.0);
        let (out, losses) = sync_update(&ws, 60, 0.0, &model, &sched, &policy, &layout).unwrap();
        for (a, b) in ws.iter().zip(&out) {
            assert!(bits_eq(a, b));
        }
        assert!(losses.iter().all(|&l| l == 0.0));
        let (out, _) = sync_update_noisy(&ws, 60, 0.0, &policy, &layout).unwrap();
        for (a, b) in ws.iter().zip(&out) {
            assert!(bits_eq(a, b));
        }
    }

    #[test]
    fn identical_windows_are_a_fixed_point() {
        let sched = sched100();
        let layout = layout_rect(3, 2, 3, 2, 1);
        let (h, w, d) = layout.window_shape();
        let base = NoiseStream::new(11, StreamDomain::Sample, 0, 1).normal_grid(h, w, d);
        let ws: WindowSet = vec![base.clone(); 3];
        let model = GaussianMixturePrior::new(vec![1.0], vec![vec![0.0; h * w * d]], vec![1.0])
            .unwrap();
        let policy = style_policy(5.0, GuidanceTarget::Denoised);
        let (out, losses) = sync_update(&ws, 40, 5.0, &model, &sched, &policy, &layout).unwrap();
        for g in &out {
            assert!(bits_eq(g, &base));
        }
        assert!(losses.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn anchor_window_is_never_modified() {
        let sched = sched100();
        let layout = layout_rect(5, 2, 4, 2, 2);
        let ws = random_windows(&layout, 3);
        let (h, w, d) = layout.window_shape();
        let model = GaussianMixturePrior::new(vec![1.0], vec![vec![0.1; h * w * d]], vec![0.7])
            .unwrap();
        for policy in [
            style_policy(10.0, GuidanceTarget::Denoised),
            style_policy(10.0, GuidanceTarget::Noisy),
        ] {
            let (out, losses) = match policy.guidance_target {
                GuidanceTarget::Denoised => {
                    sync_update(&ws, 55, 10.0, &model, &sched, &policy, &layout).unwrap()
                }
                GuidanceTarget::Noisy => {
                    sync_update_noisy(&ws, 55, 10.0, &policy, &layout).unwrap()
                }
            };
            let anchor = layout.anchor_index();
            assert!(bits_eq(&out[anchor], &ws[anchor]));
            assert_eq!(losses[anchor], 0.0);
            // Non-anchor windows did move.
            for i in 0..ws.len() {
                if i != anchor {
                    assert!(!bits_eq(&out[i], &ws[i]), "window {i} should change");
                    assert!(losses[i] > 0.0);
                }
            }
        }
    }

    #[test]
    fn linear_model_mse_matches_closed_form_update() {
        // Standard-normal prior: eps(x) = sqrt(1-a) x, so phi(x) = sqrt(a) x.
        // With squared-difference loss the end-to-end objective for window i
        // is (sqrt(a) x_i - sqrt(a) x_anchor)^2, whose gradient is
        // 2 a (x_i - x_anchor).
        let sched = sched100();
        let layout = layout_1x1(3);
        let anchor = layout.anchor_index();
        assert_eq!(anchor, 1);
        let ws: WindowSet = [0.7, -0.2, 1.3].iter().map(|&v| ImageGrid::scalar(v)).collect();
        let model = std_normal_model();
        let policy = mse_policy(0.3);
        let t = 70;
        let a = sched.alpha(t);
        let w_t = 0.3;
        let (out, losses) = sync_update(&ws, t, w_t, &model, &sched, &policy, &layout).unwrap();
        for i in [0usize, 2] {
            let x = ws[i].get(0, 0, 0);
            let xa = ws[anchor].get(0, 0, 0);
            let expect = x - w_t * 2.0 * a * (x - xa);
            assert!((out[i].get(0, 0, 0) - expect).abs() < 1e-12, "window {i}");
            let expect_loss = a * (x - xa) * (x - xa);
            assert!((losses[i] - expect_loss).abs() < 1e-12);
        }
    }

    /// Extract the gradient implied by a sync update: (x - x_new) / w.
    fn implied_grad(before: &ImageGrid, after: &ImageGrid, w: f64) -> Vec<f64> {
        before
            .data()
            .iter()
            .zip(after.data())
            .map(|(b, a)| (b - a) / w)
            .collect()
    }

    #[test]
    fn denoised_guidance_gradient_matches_finite_differences() {
        // End-to-end objective for window i with the anchor's observation
        // frozen: e(x) = loss(phi(x), phi_anchor).
        let sched = sched100();
        let layout = layout_rect(3, 2, 3, 2, 1);
        let (h, w, d) = layout.window_shape();
        let dim = h * w * d;
        let means = vec![vec![0.4; dim], {
            let mut m = vec![-0.6; dim];
            m[2] = 0.9;
            m
        }];
        let model =
            GaussianMixturePrior::new(vec![0.4, 0.6], means, vec![0.5, 0.8]).unwrap();
        let ws = random_windows(&layout, 21);
        let t = 45;
        let w_t = 1e-3;
        for loss_box in [
            Box::new(StyleLoss { scale: 1.0 }) as Box<dyn PerceptualLoss>,
            Box::new(FeatureLoss::new(FilterBank::seeded(5, d, &[3, 2], &[1.0, 0.5]), 1.0)),
        ] {
            let policy = SyncPolicy {
                w0: w_t,
                decay: 1.0,
                schedule: SyncSchedule::EveryStep,
                guidance_target: GuidanceTarget::Denoised,
                loss: loss_box,
            };
            let (out, _) = sync_update(&ws, t, w_t, &model, &sched, &policy, &layout).unwrap();
            let anchor = layout.anchor_index();
            let phi_anchor = predict_denoised(&model, &ws[anchor], t, &sched).unwrap();
            let eps_fd = 1e-5;
            for i in 0..ws.len() {
                if i == anchor {
                    continue;
                }
                let grad = implied_grad(&ws[i], &out[i], w_t);
                for j in (0..dim).step_by(3) {
                    let mut xp = ws[i].clone();
                    xp.data_mut()[j] += eps_fd;
                    let mut xm = ws[i].clone();
                    xm.data_mut()[j] -= eps_fd;
                    let fp = policy
                        .loss
                        .value(&predict_denoised(&model, &xp, t, &sched).unwrap(), &phi_anchor)
                        .unwrap();
                    let fm = policy
                        .loss
                        .value(&predict_denoised(&model, &xm, t, &sched).unwrap(), &phi_anchor)
                        .unwrap();
                    let fd = (fp - fm) / (2.0 * eps_fd);
                    assert!(
                        (grad[j] - fd).abs() < 1e-6,
                        "loss={} window={i} coord={j}: analytic {} vs fd {}",
                        policy.loss.name(),
                        grad[j],
                        fd
                    );
                }
            }
        }
    }

    #[test]
    fn noisy_guidance_gradient_matches_finite_differences() {
        let layout = layout_rect(3, 2, 4, 2, 2);
        let ws = random_windows(&layout, 8);
        let w_t = 1e-3;
        let policy = style_policy(w_t, GuidanceTarget::Noisy);
        let (out, _) = sync_update_noisy(&ws, 30, w_t, &policy, &layout).unwrap();
        let anchor = layout.anchor_index();
        let eps_fd = 1e-5;
        let dim = ws[0].numel();
        for i in 0..ws.len() {
            if i == anchor {
                continue;
            }
            let grad = implied_grad(&ws[i], &out[i], w_t);
            for j in (0..dim).step_by(5) {
                let mut xp = ws[i].clone();
                xp.data_mut()[j] += eps_fd;
                let mut xm = ws[i].clone();
                xm.data_mut()[j] -= eps_fd;
                let fp = policy.loss.value(&xp, &ws[anchor]).unwrap();
                let fm = policy.loss.value(&xm, &ws[anchor]).unwrap();
                let fd = (fp - fm) / (2.0 * eps_fd);
                assert!((grad[j] - fd).abs() < 1e-6, "window {i} coord {j}");
            }
        }
    }

    #[test]
    fn small_step_decreases_the_composed_objective() {
        let sched = sched100();
        let layout = layout_rect(3, 2, 3, 2, 1);
        let (h, w, d) = layout.window_shape();
        let dim = h * w * d;
        let model =
            GaussianMixturePrior::new(vec![1.0], vec![vec![0.2; dim]], vec![0.6]).unwrap();
        let policy = style_policy(1e-4, GuidanceTarget::Denoised);
        let t = 50;
        for probe in 0..10u64 {
            let ws = random_windows(&layout, 100 + probe);
            let anchor = layout.anchor_index();
            let phi_anchor = predict_denoised(&model, &ws[anchor], t, &sched).unwrap();
            let before: f64 = ws
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != anchor)
                .map(|(_, x)| {
                    let phi = predict_denoised(&model, x, t, &sched).unwrap();
                    policy.loss.value(&phi, &phi_anchor).unwrap()
                })
                .sum();
            let (out, _) = sync_update(&ws, t, 1e-4, &model, &sched, &policy, &layout).unwrap();
            let after: f64 = out
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != anchor)
                .map(|(_, x)| {
                    let phi = predict_denoised(&model, x, t, &sched).unwrap();
                    policy.loss.value(&phi, &phi_anchor).unwrap()
                })
                .sum();
            assert!(after <= before, "probe {probe}: {before} -> {after}");
        }
    }

    #[test]
    fn interval_schedule_fires_evenly_and_initial_fires_first_k() {
        let n = 50;
        let fired: Vec<usize> = (0..n)
            .filter(|&i| SyncSchedule::Interval(10).applies(i, n))
            .collect();
        assert_eq!(fired, vec![0, 5, 10, 15, 20, 25, 30, 35, 40, 45]);
        for f in 1..=n as u32 {
            let count = (0..n).filter(|&i| SyncSchedule::Interval(f).applies(i, n)).count();
            assert_eq!(count, f as usize, "interval {f}");
        }
        let fired: Vec<usize> = (0..n)
            .filter(|&i| SyncSchedule::Initial(3).applies(i, n))
            .collect();
        assert_eq!(fired, vec![0, 1, 2]);
        assert!((0..n).all(|i| SyncSchedule::EveryStep.applies(i, n)));
    }

    #[test]
    fn schedule_validation_rejects_out_of_range_counts() {
        assert!(SyncSchedule::Interval(0).validate(50).is_err());
        assert!(SyncSchedule::Interval(51).validate(50).is_err());
        assert!(SyncSchedule::Interval(50).validate(50).is_ok());
        assert!(SyncSchedule::Initial(0).validate(50).is_err());
        assert!(SyncSchedule::Initial(51).validate(50).is_err());
        assert!(SyncSchedule::Initial(1).validate(50).is_ok());
    }

    #[test]
    fn policy_validation_rejects_bad_weight_and_decay() {
        let mut p = mse_policy(1.0);
        assert!(p.validate(50).is_ok());
        p.w0 = -0.5;
        assert!(p.validate(50).is_err());
        p.w0 = f64::NAN;
        assert!(p.validate(50).is_err());
        p.w0 = 1.0;
        p.decay = 0.0;
        assert!(p.validate(50).is_err());
        p.decay = 1.5;
        assert!(p.validate(50).is_err());
        p.decay = 1.0;
        assert!(p.validate(50).is_ok());
    }

    #[test]
    fn weight_decays_every_step_regardless_of_sync_schedule() {
        let sched = sched100();
        let layout = layout_1x1(3);
        let model = std_normal_model();
        let plan = make_plan(&sched, 20).unwrap();
        let mut policy = mse_policy(5.0);
        policy.schedule = SyncSchedule::Interval(4);
        let (_, trace) = run_panorama(
            &model,
            &sched,
            &plan,
            &layout,
            Some(&policy),
            SamplerKind::Ddim { eta: 0.0 },
            42,
        )
        .unwrap();
        assert_eq!(trace.steps.len(), 20);
        for (n, rec) in trace.steps.iter().enumerate() {
            let expect = 5.0 * 0.95f64.powi(n as i32);
            assert!(
                (rec.weight - expect).abs() <= 1e-12,
                "step {n}: {} vs {expect}",
                rec.weight
            );
        }
        assert_eq!(trace.sync_count(), 4);
        let fired: Vec<usize> =
            trace.steps.iter().filter(|r| r.sync_applied).map(|r| r.index).collect();
        assert_eq!(fired, vec![0, 5, 10, 15]);
    }

    #[test]
    fn zero_weight_run_matches_disabled_policy_bitwise() {
        let sched = sched100();
        let layout = layout_rect(4, 2, 3, 1, 1);
        let (h, w, d) = layout.window_shape();
        let model = GaussianMixturePrior::new(
            vec![0.5, 0.5],
            vec![vec![0.8; h * w * d], vec![-0.8; h * w * d]],
            vec![0.3, 0.3],
        )
        .unwrap();
        let policy = style_policy(0.0, GuidanceTarget::Denoised);
        // DDPM needs adjacent timesteps, so it gets the dense plan.
        for (kind, n_steps) in [
            (SamplerKind::Ddpm, 100),
            (SamplerKind::Ddim { eta: 0.0 }, 10),
            (SamplerKind::Ddim { eta: 1.0 }, 10),
        ] {
            let plan = make_plan(&sched, n_steps).unwrap();
            let (z_off, trace_off) =
                run_panorama(&model, &sched, &plan, &layout, None, kind, 99).unwrap();
            let (z_zero, trace_zero) =
                run_panorama(&model, &sched, &plan, &layout, Some(&policy), kind, 99).unwrap();
            assert!(bits_eq(&z_off, &z_zero), "kind {kind:?}");
            assert_eq!(trace_off.sync_count(), 0);
            assert_eq!(trace_zero.sync_count(), 0);
        }
    }

    #[test]
    fn single_window_panorama_equals_plain_sampling_chain() {
        // One window covering the whole panorama: the loop must reduce to
        // an ordinary reverse chain driven by the same streams.
        let sched = sched100();
        let layout = crate::panorama::make_layout(2, 3, 1, 2, 3, 3, crate::panorama::Anchor::Center)
            .unwrap();
        assert_eq!(layout.n_windows(), 1);
        let model =
            GaussianMixturePrior::new(vec![1.0], vec![vec![0.0; 6]], vec![1.0]).unwrap();
        let plan = make_plan(&sched, 100).unwrap(); // dense: adjacent steps
        let seed = 1234;
        let (z, trace) = run_panorama(
            &model,
            &sched,
            &plan,
            &layout,
            None,
            SamplerKind::Ddpm,
            seed,
        )
        .unwrap();
        assert_eq!(trace.n_windows, 1);
        // Manual chain with the same stream keys.
        let mut x = NoiseStream::new(seed, StreamDomain::PanoramaInit, 0, 0).normal_grid(2, 3, 1);
        for (t, _s) in plan.transitions() {
            let mut stream = NoiseStream::new(seed, StreamDomain::Sample, 0, t);
            let noise = stream.normal_grid(2, 3, 1);
            x = ddpm_step(&model, &x, t, &noise, &sched).unwrap();
        }
        assert!(bits_eq(&z, &x));
    }

    #[test]
    fn runs_are_bitwise_reproducible_and_seeds_differ() {
        let sched = sched100();
        let layout = layout_rect(3, 2, 4, 2, 1);
        let (h, w, d) = layout.window_shape();
        let model =
            GaussianMixturePrior::new(vec![1.0], vec![vec![0.0; h * w * d]], vec![1.0]).unwrap();
        let plan = make_plan(&sched, 10).unwrap();
        let policy = style_policy(2.0, GuidanceTarget::Denoised);
        let kind = SamplerKind::Ddim { eta: 1.0 };
        let (z1, _) =
            run_panorama(&model, &sched, &plan, &layout, Some(&policy), kind, 7).unwrap();
        let (z2, _) =
            run_panorama(&model, &sched, &plan, &layout, Some(&policy), kind, 7).unwrap();
        assert!(bits_eq(&z1, &z2));
        let (z3, _) =
            run_panorama(&model, &sched, &plan, &layout, Some(&policy), kind, 8).unwrap();
        assert!(!bits_eq(&z1, &z3));
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let sched = sched100();
        let layout = layout_rect(5, 2, 4, 2, 1);
        let (h, w, d) = layout.window_shape();
        let model =
            GaussianMixturePrior::new(vec![1.0], vec![vec![0.3; h * w * d]], vec![0.8]).unwrap();
        let plan = make_plan(&sched, 8).unwrap();
        let policy = style_policy(1.0, GuidanceTarget::Denoised);
        let kind = SamplerKind::Ddim { eta: 1.0 };
        let _guard = crate::par::test_env_lock();
        std::env::set_var(crate::par::THREADS_ENV, "1");
        let (z1, _) =
            run_panorama(&model, &sched, &plan, &layout, Some(&policy), kind, 5).unwrap();
        std::env::set_var(crate::par::THREADS_ENV, "4");
        let (z4, _) =
            run_panorama(&model, &sched, &plan, &layout, Some(&policy), kind, 5).unwrap();
        std::env::remove_var(crate::par::THREADS_ENV);
        assert!(bits_eq(&z1, &z4));
    }

    #[test]
    fn mismatched_window_sets_are_rejected() {
        let sched = sched100();
        let layout = layout_1x1(3);
        let model = std_normal_model();
        let policy = mse_policy(1.0);
        let ws = vec![ImageGrid::scalar(0.0); 2];
        assert!(matches!(
            sync_update(&ws, 10, 1.0, &model, &sched, &policy, &layout),
            Err(Error::Shape { .. })
        ));
        let ws = vec![ImageGrid::zeros(2, 2, 1), ImageGrid::zeros(1, 1, 1), ImageGrid::zeros(1, 1, 1)];
        assert!(matches!(
            sync_update_noisy(&ws, 10, 1.0, &policy, &layout),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn trace_text_has_stable_layout() {
        let sched = sched100();
        let layout = layout_1x1(3);
        let model = std_normal_model();
        let plan = make_plan(&sched, 5).unwrap();
        let policy = mse_policy(1.0);
        let (_, trace) = run_panorama(
            &model,
            &sched,
            &plan,
            &layout,
            Some(&policy),
            SamplerKind::Ddim { eta: 0.0 },
            3,
        )
        .unwrap();
        let text = trace.to_text();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "windows=3 anchor=1 plan_len=5");
        let first = lines.next().unwrap();
        assert!(first.starts_with("step=0 t=100 s="), "{first}");
        assert!(first.contains(" sync=1 "));
        assert_eq!(text.lines().count(), 6);
    }
}
