//! Browser front end for the panorama engine.
//!
//! Three operations are exported to JavaScript: one-shot `generate`, a
//! `StepSession` that walks the reverse process one denoising step at a
//! time with a live fused preview, and `sweep` over synchronization
//! weights. All take the same flat JSON configuration as the CLI. The
//! engine logic lives in plain functions so it also compiles and tests on
//! native targets; the `wasm_bindgen` layer is conversion only.

use syncdiff::config::{parse_seed_list, parse_w0_list, RunConfig};
use syncdiff::metrics::{intra_metric, weight_sweep};
use syncdiff::models::DenoiserModel;
use syncdiff::panorama::{fuse_average, scatter, WindowLayout};
use syncdiff::render::to_rgba8;
use syncdiff::rng::{NoiseStream, StreamDomain};
use syncdiff::samplers::{predict_denoised, SamplerKind};
use syncdiff::schedule::{Schedule, TimestepPlan};
use syncdiff::sync::{denoising_one_step, run_panorama, RunState, StepRecord, SyncPolicy};
use syncdiff::Result as CoreResult;
use syncdiff::{Error, ImageGrid};

use wasm_bindgen::prelude::*;

/// Everything `generate` hands to the page.
pub struct GenerateOutcome {
    pub rgba: Vec<u8>,
    pub width: u32,
    pub height: u32,
    pub intra_mean: f64,
    pub n_windows: u32,
    pub sync_steps: u32,
    pub trace_text: String,
}

/// Run the full reverse process for `config_json` and package the result
/// for display: RGBA pixels, the intra-panorama coherence metric, and the
/// per-step trace.
pub fn generate_outcome(config_json: &str) -> CoreResult<GenerateOutcome> {
    let cfg = RunConfig::from_json_str(config_json)?;
    let sched = cfg.build_schedule()?;
    let plan = cfg.build_plan(&sched)?;
    let layout = cfg.build_layout()?;
    let model = cfg.build_model()?;
    let policy = cfg.build_policy()?;
    let (z, trace) = run_panorama(
        model.as_ref(),
        &sched,
        &plan,
        &layout,
        policy.as_ref(),
        cfg.sampler.kind,
        cfg.seed,
    )?;
    let loss = cfg.evaluate.loss.build(cfg.layout.channels);
    let intra_mean = intra_metric(&z, loss.as_ref(), cfg.n_crops()?)?.mean;
    let (rgba, width, height) = to_rgba8(&z)?;
    Ok(GenerateOutcome {
        rgba,
        width: width as u32,
        height: height as u32,
        intra_mean,
        n_windows: layout.n_windows() as u32,
        sync_steps: trace.sync_count() as u32,
        trace_text: trace.to_text(),
    })
}

/// Incremental reverse process over the windows of one panorama.
///
/// `step` advances one plan position; `preview_grid` fuses the predicted
/// denoised observations of the current windows (the model's current best
/// guess at the final panorama), which is what makes stepping watchable.
pub struct Session {
    sched: Schedule,
    plan: TimestepPlan,
    layout: WindowLayout,
    model: Box<dyn DenoiserModel>,
    policy: Option<SyncPolicy>,
    kind: SamplerKind,
    state: RunState,
    records: Vec<StepRecord>,
    metric_loss: Box<dyn syncdiff::losses::PerceptualLoss>,
    n_crops: usize,
}

impl Session {
    pub fn from_config(config_json: &str) -> CoreResult<Session> {
        let cfg = RunConfig::from_json_str(config_json)?;
        let sched = cfg.build_schedule()?;
        let plan = cfg.build_plan(&sched)?;
        let layout = cfg.build_layout()?;
        let model = cfg.build_model()?;
        let policy = cfg.build_policy()?;
        cfg.sampler.kind.validate()?;
        if let Some(p) = &policy {
            p.validate(plan.len())?;
        }
        // Identical initialization to the one-shot path, so a session
        // stepped to the end reproduces `generate` bit for bit.
        let (h, w, d) = layout.panorama_shape();
        let z_init =
            NoiseStream::new(cfg.seed, StreamDomain::PanoramaInit, 0, 0).normal_grid(h, w, d);
        let windows = scatter(&z_init, &layout)?;
        let state = RunState {
            windows,
            plan_pos: 0,
            weight: policy.as_ref().map_or(0.0, |p| p.w0),
            seed: cfg.seed,
        };
        let metric_loss = cfg.evaluate.loss.build(cfg.layout.channels);
        let n_crops = cfg.n_crops()?;
        Ok(Session {
            sched,
            plan,
            layout,
            model,
            policy,
            kind: cfg.sampler.kind,
            state,
            records: Vec::new(),
            metric_loss,
            n_crops,
        })
    }

    pub fn done(&self) -> bool {
        self.state.plan_pos >= self.plan.len()
    }

    pub fn step_index(&self) -> usize {
        self.state.plan_pos
    }

    pub fn n_steps(&self) -> usize {
        self.plan.len()
    }

    /// Timestep the next step will denoise from (0 once finished).
    pub fn current_t(&self) -> u32 {
        if self.done() {
            0
        } else {
            self.plan.steps()[self.state.plan_pos]
        }
    }

    pub fn weight(&self) -> f64 {
        self.state.weight
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    /// Advance one denoising step. Returns true while more steps remain.
    pub fn step(&mut self) -> CoreResult<bool> {
        if self.done() {
            return Ok(false);
        }
        let (next, record) = denoising_one_step(
            &self.state,
            &self.plan,
            self.model.as_ref(),
            &self.sched,
            self.policy.as_ref(),
            &self.layout,
            self.kind,
        )?;
        self.state = next;
        self.records.push(record);
        Ok(!self.done())
    }

    /// Fused view of the run: the final panorama once done, otherwise the
    /// fused predicted denoised observations at the current timestep.
    pub fn preview_grid(&self) -> CoreResult<ImageGrid> {
        if self.done() {
            return fuse_average(&self.state.windows, &self.layout);
        }
        let t = self.current_t();
        let phis: Vec<ImageGrid> = self
            .state
            .windows
            .iter()
            .map(|w| predict_denoised(self.model.as_ref(), w, t, &self.sched))
            .collect::<CoreResult<_>>()?;
        fuse_average(&phis, &self.layout)
    }

    /// Intra metric of the current preview — watching it fall (or not) is
    /// the point of the step-through demo.
    pub fn preview_intra(&self) -> CoreResult<f64> {
        Ok(intra_metric(&self.preview_grid()?, self.metric_loss.as_ref(), self.n_crops)?.mean)
    }
}

/// Weight-sweep rows as a JSON string (same cell values as the CLI sweep).
pub fn sweep_json(config_json: &str, w0_list: &str, seeds: &str) -> CoreResult<String> {
    let cfg = RunConfig::from_json_str(config_json)?;
    let w0_list = parse_w0_list(w0_list)?;
    let seeds = parse_seed_list(seeds)?;
    let rows = weight_sweep(&cfg, &w0_list, &seeds)?;
    let value = serde_json::json!({
        "seeds": seeds,
        "rows": rows.iter().map(|r| serde_json::json!({
            "w0": r.w0,
            "intra_mean": r.mean,
            "intra_std": r.std,
            "values": r.values,
        })).collect::<Vec<_>>(),
    });
    Ok(value.to_string())
}

/// Configuration preloaded into the demo page: small enough to be instant
/// in a browser, synchronization on.
pub fn demo_config() -> String {
    let value = serde_json::json!({
        "sampler.steps": 25,
        "layout.height": 16,
        "layout.width": 64,
        "layout.channels": 3,
        "layout.window": 16,
        "layout.stride": 8,
        "model.count": 6,
        "sync.w0": 10.0,
        "sync.decay": 0.95,
        "seed": 0
    });
    serde_json::to_string_pretty(&value).expect("static config serializes")
}

fn js_err(e: Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

/// One-shot panorama result exposed to JavaScript.
#[wasm_bindgen]
pub struct Panorama {
    inner: GenerateOutcome,
}

#[wasm_bindgen]
impl Panorama {
    #[wasm_bindgen(getter)]
    pub fn rgba(&self) -> Vec<u8> {
        self.inner.rgba.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn width(&self) -> u32 {
        self.inner.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> u32 {
        self.inner.height
    }

    #[wasm_bindgen(getter)]
    pub fn intra_mean(&self) -> f64 {
        self.inner.intra_mean
    }

    #[wasm_bindgen(getter)]
    pub fn n_windows(&self) -> u32 {
        self.inner.n_windows
    }

    #[wasm_bindgen(getter)]
    pub fn sync_steps(&self) -> u32 {
        self.inner.sync_steps
    }

    #[wasm_bindgen(getter)]
    pub fn trace_text(&self) -> String {
        self.inner.trace_text.clone()
    }
}

/// Generate a panorama from a flat JSON configuration string.
#[wasm_bindgen]
pub fn generate(config_json: &str) -> Result<Panorama, JsValue> {
    Ok(Panorama { inner: generate_outcome(config_json).map_err(js_err)? })
}

/// Step-through session exposed to JavaScript.
#[wasm_bindgen]
pub struct StepSession {
    inner: Session,
}

#[wasm_bindgen]
impl StepSession {
    #[wasm_bindgen(constructor)]
    pub fn new(config_json: &str) -> Result<StepSession, JsValue> {
        Ok(StepSession { inner: Session::from_config(config_json).map_err(js_err)? })
    }

    /// Advance one step; returns true while more steps remain.
    pub fn step(&mut self) -> Result<bool, JsValue> {
        self.inner.step().map_err(js_err)
    }

    /// RGBA preview of the current fused denoised estimate.
    pub fn preview(&self) -> Result<Vec<u8>, JsValue> {
        let grid = self.inner.preview_grid().map_err(js_err)?;
        let (rgba, _, _) = to_rgba8(&grid).map_err(js_err)?;
        Ok(rgba)
    }

    pub fn preview_intra(&self) -> Result<f64, JsValue> {
        self.inner.preview_intra().map_err(js_err)
    }

    #[wasm_bindgen(getter)]
    pub fn width(&self) -> u32 {
        self.inner.layout.panorama_shape().1 as u32
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> u32 {
        self.inner.layout.panorama_shape().0 as u32
    }

    #[wasm_bindgen(getter)]
    pub fn step_index(&self) -> u32 {
        self.inner.step_index() as u32
    }

    #[wasm_bindgen(getter)]
    pub fn n_steps(&self) -> u32 {
        self.inner.n_steps() as u32
    }

    #[wasm_bindgen(getter)]
    pub fn current_t(&self) -> u32 {
        self.inner.current_t()
    }

    #[wasm_bindgen(getter)]
    pub fn weight(&self) -> f64 {
        self.inner.weight()
    }

    #[wasm_bindgen(getter)]
    pub fn done(&self) -> bool {
        self.inner.done()
    }

    /// Per-window losses of the last synchronization pass, as JSON.
    pub fn last_losses(&self) -> String {
        let losses: &[f64] = self
            .inner
            .records()
            .last()
            .map(|r| r.window_losses.as_slice())
            .unwrap_or(&[]);
        serde_json::to_string(losses).expect("f64 slice serializes")
    }
}

/// Weight sweep: JSON rows of (w0, intra mean, intra std, per-seed values).
#[wasm_bindgen]
pub fn sweep(config_json: &str, w0_list: &str, seeds: &str) -> Result<String, JsValue> {
    sweep_json(config_json, w0_list, seeds).map_err(js_err)
}

/// The configuration the page starts with.
#[wasm_bindgen]
pub fn default_config() -> String {
    demo_config()
}

#[cfg(test)]
mod tests {
    use super::*;
    use syncdiff::grid::bits_eq;

    #[test]
    fn generate_outcome_is_deterministic_and_sized() {
        let cfg = demo_config();
        let a = generate_outcome(&cfg).unwrap();
        let b = generate_outcome(&cfg).unwrap();
        assert_eq!(a.rgba, b.rgba);
        assert_eq!((a.width, a.height), (64, 16));
        assert_eq!(a.rgba.len(), 64 * 16 * 4);
        assert_eq!(a.n_windows, 7);
        assert_eq!(a.sync_steps, 25);
        assert_eq!(a.intra_mean.to_bits(), b.intra_mean.to_bits());
        assert!(a.trace_text.starts_with("windows=7 anchor=3 plan_len=25"));
    }

    #[test]
    fn session_stepped_to_the_end_matches_one_shot_generation() {
        let cfg = demo_config();
        let mut session = Session::from_config(&cfg).unwrap();
        assert_eq!(session.n_steps(), 25);
        assert_eq!(session.current_t(), 1000);
        let mut steps = 0;
        while session.step().unwrap() {
            steps += 1;
        }
        assert_eq!(steps + 1, 25);
        assert!(session.done());
        assert!(!session.step().unwrap(), "stepping past the end is a no-op");

        let parsed = RunConfig::from_json_str(&cfg).unwrap();
        let sched = parsed.build_schedule().unwrap();
        let plan = parsed.build_plan(&sched).unwrap();
        let layout = parsed.build_layout().unwrap();
        let model = parsed.build_model().unwrap();
        let policy = parsed.build_policy().unwrap();
        let (z, trace) = run_panorama(
            model.as_ref(),
            &sched,
            &plan,
            &layout,
            policy.as_ref(),
            parsed.sampler.kind,
            parsed.seed,
        )
        .unwrap();
        assert!(bits_eq(&session.preview_grid().unwrap(), &z));
        assert_eq!(session.records(), trace.steps.as_slice());
    }

    #[test]
    fn session_preview_has_panorama_shape_at_every_step() {
        let mut session = Session::from_config(&demo_config()).unwrap();
        for _ in 0..3 {
            let g = session.preview_grid().unwrap();
            assert_eq!(g.shape(), (16, 64, 3));
            assert!(session.preview_intra().unwrap().is_finite());
            session.step().unwrap();
        }
    }

    #[test]
    fn session_weight_decays_by_the_configured_factor() {
        let mut session = Session::from_config(&demo_config()).unwrap();
        assert_eq!(session.weight(), 10.0);
        session.step().unwrap();
        assert!((session.weight() - 9.5).abs() < 1e-12);
        session.step().unwrap();
        assert!((session.weight() - 9.025).abs() < 1e-12);
    }

    #[test]
    fn sweep_json_rows_parse_and_aggregate() {
        let cfg = demo_config();
        let text = sweep_json(&cfg, "0,10", "0..3").unwrap();
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(value["seeds"], serde_json::json!([0, 1, 2]));
        let rows = value["rows"].as_array().unwrap();
        assert_eq!(rows.len(), 2);
        for row in rows {
            assert_eq!(row["values"].as_array().unwrap().len(), 3);
            let values: Vec<f64> =
                row["values"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            assert!((row["intra_mean"].as_f64().unwrap() - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn bad_configs_are_reported_not_panicked() {
        assert!(generate_outcome("not json").is_err());
        assert!(generate_outcome(r#"{"no.such.key": 1}"#).is_err());
        assert!(Session::from_config(r#"{"layout.channels": 0}"#).is_err());
        assert!(sweep_json(&demo_config(), "", "0..2").is_err());
        assert!(sweep_json(&demo_config(), "0,5", "7..7").is_err());
    }

    #[test]
    fn default_config_round_trips_through_the_parser() {
        let cfg = RunConfig::from_json_str(&demo_config()).unwrap();
        assert_eq!(cfg.sampler.n_steps, 25);
        assert_eq!(cfg.layout.channels, 3);
        assert!(cfg.sync.is_some());
    }
}
