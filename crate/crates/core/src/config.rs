//! Run configuration: a flat JSON document with dotted keys.
//!
//! Example:
//!
//! ```json
//! {
//!   "schedule.t": 1000,
//!   "sampler.steps": 50,
//!   "layout.width": 64,
//!   "model.kind": "texture-gmm",
//!   "sync.w0": 10.0,
//!   "seed": 3
//! }
//! ```
//!
//! Every key is optional and has a default; unknown keys are rejected so
//! typos fail loudly, and every validation error names the offending key.
//! Relative paths are resolved against the process working directory.

use crate::error::{Error, Result};
use crate::losses::{FeatureLoss, FilterBank, PerceptualLoss, StyleLoss};
use crate::models::{load_checkpoint, DenoiserModel, MlpDenoiser, TrainOpt};
use crate::panorama::{make_layout, Anchor, WindowLayout};
use crate::samplers::SamplerKind;
use crate::schedule::{build_schedule, make_plan, Schedule, ScheduleKind, TimestepPlan};
use crate::sync::{GuidanceTarget, SyncPolicy, SyncSchedule};
use crate::texture::{make_texture_dataset, texture_prior, TextureDatasetSpec};
use serde_json::Value;
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub t_max: u32,
    pub params: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub n_steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayoutConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub window: usize,
    pub stride: usize,
    pub anchor: Anchor,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelConfig {
    Gmm { weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<f64> },
    TextureGmm { count: usize, variance: f64, seed: u64, orientation: (f64, f64), frequency: (f64, f64) },
    Mlp { checkpoint: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Style,
    Feature,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub kind: LossKind,
    pub scale: f64,
    pub feature_channels: Vec<usize>,
    pub feature_lambdas: Vec<f64>,
    pub feature_seed: u64,
}

impl LossConfig {
    pub fn build(&self, in_channels: usize) -> Box<dyn PerceptualLoss> {
        match self.kind {
            LossKind::Style => Box::new(StyleLoss::new(self.scale)),
            LossKind::Feature => Box::new(FeatureLoss::new(
                FilterBank::seeded(
                    self.feature_seed,
                    in_channels,
                    &self.feature_channels,
                    &self.feature_lambdas,
                ),
                self.scale,
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyncConfig {
    pub w0: f64,
    pub decay: f64,
    pub schedule: SyncSchedule,
    pub target: GuidanceTarget,
    pub loss: LossConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    pub hidden: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// Number of intra-metric crops; default panorama width / window width.
    pub crops: Option<usize>,
    pub loss: LossConfig,
    /// Single-window reference samples for the baseline; 0 skips it.
    pub reference_samples: usize,
    pub reference_pairs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub schedule: ScheduleConfig,
    pub sampler: SamplerConfig,
    pub layout: LayoutConfig,
    pub model: ModelConfig,
    pub sync: Option<SyncConfig>,
    pub seed: u64,
    pub train: TrainConfig,
    pub dataset: TextureDatasetSpec,
    pub evaluate: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schedule: ScheduleConfig {
                kind: ScheduleKind::LinearBeta,
                t_max: 1000,
                params: (1e-4, 2e-2),
            },
            sampler: SamplerConfig { kind: SamplerKind::Ddim { eta: 0.0 }, n_steps: 50 },
            layout: LayoutConfig {
                height: 16,
                width: 64,
                channels: 3,
                window: 16,
                stride: 8,
                anchor: Anchor::Center,
            },
            model: ModelConfig::TextureGmm {
                count: 6,
                variance: 0.25,
                seed: 7,
                orientation: (0.0, std::f64::consts::PI),
                frequency: (0.05, 0.25),
            },
            sync: None,
            seed: 0,
            train: TrainConfig {
                learning_rate: 0.5,
                batch_size: 8,
                iterations: 8000,
                seed: 0,
                hidden: vec![128],
            },
            // Training defaults use a small grid the toy MLP can actually
            // fit in seconds; set dataset dims to the window shape when the
            // checkpoint is meant to drive generation.
            dataset: TextureDatasetSpec {
                count: 6,
                h: 8,
                w: 8,
                d: 1,
                orientation_range: (0.0, std::f64::consts::PI),
                frequency_range: (0.05, 0.25),
                seed: 7,
            },
            evaluate: EvalConfig {
                crops: None,
                loss: default_loss(),
                reference_samples: 0,
                reference_pairs: 15,
            },
        }
    }
}

fn default_loss() -> LossConfig {
    LossConfig::default_style()
}

impl LossConfig {
    pub fn default_style() -> Self {
        LossConfig {
            kind: LossKind::Style,
            scale: 1.0,
            feature_channels: vec![8, 8],
            feature_lambdas: vec![1.0, 1.0],
            feature_seed: 0,
        }
    }
}

/// Typed access to the flat key/value map with field-naming errors and
/// unknown-key detection.
struct KeyBag {
    map: BTreeMap<String, Value>,
}

impl KeyBag {
    fn from_value(v: Value) -> Result<KeyBag> {
        match v {
            Value::Object(m) => Ok(KeyBag { map: m.into_iter().collect() }),
            other => Err(Error::config(
                "<root>",
                format!("configuration must be a JSON object, got {other}"),
            )),
        }
    }

    fn take(&mut self, key: &str) -> Option<Value> {
        self.map.remove(key)
    }

    fn has_prefix(&self, prefix: &str) -> bool {
        self.map.keys().any(|k| k == prefix || k.starts_with(&format!("{prefix}.")))
    }

    fn take_str(&mut self, key: &str) -> Result<Option<String>> {
        match self.take(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s)),
            Some(other) => Err(Error::config(key, format!("expected a string, got {other}"))),
        }
    }

    fn take_f64(&mut self, key: &str) -> Result<Option<f64>> {
        match self.take(key) {
            None => Ok(None),
            Some(Value::Number(n)) => n
                .as_f64()
                .ok_or_else(|| Error::config(key, "expected a finite number"))
                .map(Some),
            Some(other) => Err(Error::config(key, format!("expected a number, got {other}"))),
        }
    }

    fn take_u64(&mut self, key: &str) -> Result<Option<u64>> {
        match self.take(key) {
            None => Ok(None),
            Some(Value::Number(n)) => n
                .as_u64()
                .ok_or_else(|| Error::config(key, "expected a nonnegative integer"))
                .map(Some),
            Some(other) => Err(Error::config(key, format!("expected an integer, got {other}"))),
        }
    }

    fn take_usize(&mut self, key: &str) -> Result<Option<usize>> {
        Ok(self.take_u64(key)?.map(|v| v as usize))
    }

    fn take_pair(&mut self, key: &str) -> Result<Option<(f64, f64)>> {
        match self.take(key) {
            None => Ok(None),
            Some(v) => {
                let arr = as_f64_array(key, &v)?;
                if arr.len() != 2 {
                    return Err(Error::config(key, format!("expected 2 numbers, got {}", arr.len())));
                }
                Ok(Some((arr[0], arr[1])))
            }
        }
    }

    fn take_f64_vec(&mut self, key: &str) -> Result<Option<Vec<f64>>> {
        match self.take(key) {
            None => Ok(None),
            Some(v) => Ok(Some(as_f64_array(key, &v)?)),
        }
    }

    fn take_usize_vec(&mut self, key: &str) -> Result<Option<Vec<usize>>> {
        match self.take(key) {
            None => Ok(None),
            Some(Value::Array(items)) => {
                let mut out = Vec::with_capacity(items.len());
                for it in &items {
                    let n = it
                        .as_u64()
                        .ok_or_else(|| Error::config(key, "expected nonnegative integers"))?;
                    out.push(n as usize);
                }
                Ok(Some(out))
            }
            Some(other) => Err(Error::config(key, format!("expected an array, got {other}"))),
        }
    }

    fn take_nested_f64_vec(&mut self, key: &str) -> Result<Option<Vec<Vec<f64>>>> {
        match self.take(key) {
            None => Ok(None),
            Some(Value::Array(items)) => {
                let mut out = Vec::with_capacity(items.len());
                for it in &items {
                    out.push(as_f64_array(key, it)?);
                }
                Ok(Some(out))
            }
            Some(other) => Err(Error::config(key, format!("expected an array of arrays, got {other}"))),
        }
    }

    fn finish(self) -> Result<()> {
        if let Some(key) = self.map.keys().next() {
            return Err(Error::config(key, "unknown configuration key"));
        }
        Ok(())
    }
}

fn as_f64_array(key: &str, v: &Value) -> Result<Vec<f64>> {
    let items = v
        .as_array()
        .ok_or_else(|| Error::config(key, format!("expected an array, got {v}")))?;
    let mut out = Vec::with_capacity(items.len());
    for it in items {
        let n = it
            .as_f64()
            .ok_or_else(|| Error::config(key, format!("expected numbers, got {it}")))?;
        out.push(n);
    }
    Ok(out)
}

pub fn parse_sync_schedule(key: &str, s: &str) -> Result<SyncSchedule> {
    if s == "every" {
        return Ok(SyncSchedule::EveryStep);
    }
    if let Some(rest) = s.strip_prefix("interval:") {
        let f: u32 = rest
            .parse()
            .map_err(|_| Error::config(key, format!("bad interval count in {s:?}")))?;
        return Ok(SyncSchedule::Interval(f));
    }
    if let Some(rest) = s.strip_prefix("initial:") {
        let k: u32 = rest
            .parse()
            .map_err(|_| Error::config(key, format!("bad initial count in {s:?}")))?;
        return Ok(SyncSchedule::Initial(k));
    }
    Err(Error::config(
        key,
        format!("expected one of every | interval:f | initial:k, got {s:?}"),
    ))
}

pub fn parse_loss_kind(key: &str, s: &str) -> Result<LossKind> {
    match s {
        "style" => Ok(LossKind::Style),
        "feature" => Ok(LossKind::Feature),
        other => Err(Error::config(key, format!("expected style | feature, got {other:?}"))),
    }
}

/// Comma-separated list of nonnegative synchronization weights.
pub fn parse_w0_list(s: &str) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim) {
        if part.is_empty() {
            continue;
        }
        let v: f64 = part
            .parse()
            .map_err(|_| Error::config("w0", format!("bad weight {part:?}")))?;
        if !v.is_finite() || v < 0.0 {
            return Err(Error::config("w0", "weights must be finite and >= 0"));
        }
        out.push(v);
    }
    if out.is_empty() {
        return Err(Error::config("w0", "empty weight list"));
    }
    Ok(out)
}

/// Seed list: either a half-open range "a..b" or comma-separated values.
pub fn parse_seed_list(s: &str) -> Result<Vec<u64>> {
    let s = s.trim();
    if let Some((a, b)) = s.split_once("..") {
        let lo: u64 =
            a.trim().parse().map_err(|_| Error::config("seeds", format!("bad range start {a:?}")))?;
        let hi: u64 =
            b.trim().parse().map_err(|_| Error::config("seeds", format!("bad range end {b:?}")))?;
        if hi <= lo {
            return Err(Error::config("seeds", format!("empty range {s:?}")));
        }
        return Ok((lo..hi).collect());
    }
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim) {
        if part.is_empty() {
            continue;
        }
        let v: u64 =
            part.parse().map_err(|_| Error::config("seeds", format!("bad seed {part:?}")))?;
        out.push(v);
    }
    if out.is_empty() {
        return Err(Error::config("seeds", "empty seed list"));
    }
    Ok(out)
}

fn take_loss(bag: &mut KeyBag, prefix: &str) -> Result<LossConfig> {
    let mut loss = default_loss();
    let key = |k: &str| format!("{prefix}.{k}");
    if let Some(s) = bag.take_str(&key("loss"))? {
        loss.kind = parse_loss_kind(&key("loss"), &s)?;
    }
    if let Some(v) = bag.take_f64(&key("loss_scale"))? {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::config(&key("loss_scale"), "must be positive and finite"));
        }
        loss.scale = v;
    }
    if let Some(v) = bag.take_usize_vec(&key("feature_channels"))? {
        if v.is_empty() || v.iter().any(|&c| c == 0) {
            return Err(Error::config(&key("feature_channels"), "must be nonempty positive counts"));
        }
        loss.feature_channels = v;
    }
    if let Some(v) = bag.take_f64_vec(&key("feature_lambdas"))? {
        loss.feature_lambdas = v;
    }
    if let Some(v) = bag.take_u64(&key("feature_seed"))? {
        loss.feature_seed = v;
    }
    if loss.feature_lambdas.len() != loss.feature_channels.len() {
        return Err(Error::config(
            &key("feature_lambdas"),
            format!(
                "need one weight per layer: {} layers vs {} weights",
                loss.feature_channels.len(),
                loss.feature_lambdas.len()
            ),
        ));
    }
    Ok(loss)
}

impl RunConfig {
    pub fn from_json_str(text: &str) -> Result<RunConfig> {
        let value: Value = serde_json::from_str(text)
            .map_err(|e| Error::config("<root>", format!("invalid JSON: {e}")))?;
        Self::from_value(value)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_json_str(&text)
    }

    pub fn from_value(value: Value) -> Result<RunConfig> {
        let mut bag = KeyBag::from_value(value)?;
        let mut cfg = RunConfig::default();

        if let Some(kind) = bag.take_str("schedule.kind")? {
            cfg.schedule.kind = match kind.as_str() {
                "linear-beta" => ScheduleKind::LinearBeta,
                "cosine" => ScheduleKind::Cosine,
                other => {
                    return Err(Error::config(
                        "schedule.kind",
                        format!("expected linear-beta | cosine, got {other:?}"),
                    ))
                }
            };
            // The two-parameter default belongs to linear-beta; switch the
            // cosine default unless overridden below.
            if cfg.schedule.kind == ScheduleKind::Cosine {
                cfg.schedule.params = (0.008, 0.999);
            }
        }
        if let Some(t) = bag.take_u64("schedule.t")? {
            if t == 0 || t > u32::MAX as u64 {
                return Err(Error::config("schedule.t", "must be in 1..=u32::MAX"));
            }
            cfg.schedule.t_max = t as u32;
        }
        if let Some(p) = bag.take_pair("schedule.params")? {
            cfg.schedule.params = p;
        }

        let eta = bag.take_f64("sampler.eta")?;
        if let Some(kind) = bag.take_str("sampler.kind")? {
            cfg.sampler.kind = match kind.as_str() {
                "ddpm" => SamplerKind::Ddpm,
                "ddim" => SamplerKind::Ddim { eta: eta.unwrap_or(0.0) },
                other => {
                    return Err(Error::config(
                        "sampler.kind",
                        format!("expected ddpm | ddim, got {other:?}"),
                    ))
                }
            };
        } else if let Some(eta) = eta {
            cfg.sampler.kind = SamplerKind::Ddim { eta };
        }
        if let SamplerKind::Ddim { eta } = cfg.sampler.kind {
            if !(0.0..=1.0).contains(&eta) {
                return Err(Error::config("sampler.eta", "must be in [0, 1]"));
            }
        }
        if let Some(n) = bag.take_usize("sampler.steps")? {
            if n == 0 {
                return Err(Error::config("sampler.steps", "must be at least 1"));
            }
            cfg.sampler.n_steps = n;
        }
        if cfg.sampler.kind == SamplerKind::Ddpm && cfg.sampler.n_steps != cfg.schedule.t_max as usize
        {
            // DDPM can only walk adjacent timesteps, so its plan is dense.
            cfg.sampler.n_steps = cfg.schedule.t_max as usize;
        }

        if let Some(v) = bag.take_usize("layout.height")? {
            cfg.layout.height = v;
        }
        if let Some(v) = bag.take_usize("layout.width")? {
            cfg.layout.width = v;
        }
        if let Some(v) = bag.take_usize("layout.channels")? {
            cfg.layout.channels = v;
        }
        if let Some(v) = bag.take_usize("layout.window")? {
            cfg.layout.window = v;
        }
        if let Some(v) = bag.take_usize("layout.stride")? {
            cfg.layout.stride = v;
        }
        if let Some(v) = bag.take("layout.anchor") {
            cfg.layout.anchor = match v {
                Value::String(s) if s == "center" => Anchor::Center,
                Value::Number(n) => {
                    let i = n.as_u64().ok_or_else(|| {
                        Error::config("layout.anchor", "expected \"center\" or a window index")
                    })?;
                    Anchor::Index(i as usize)
                }
                other => {
                    return Err(Error::config(
                        "layout.anchor",
                        format!("expected \"center\" or a window index, got {other}"),
                    ))
                }
            };
        }

        let model_kind =
            bag.take_str("model.kind")?.unwrap_or_else(|| "texture-gmm".to_string());
        cfg.model = match model_kind.as_str() {
            "gmm" => {
                let weights = bag.take_f64_vec("model.weights")?.ok_or_else(|| {
                    Error::config("model.weights", "required for model.kind = gmm")
                })?;
                let means = bag.take_nested_f64_vec("model.means")?.ok_or_else(|| {
                    Error::config("model.means", "required for model.kind = gmm")
                })?;
                let variances = bag.take_f64_vec("model.variances")?.ok_or_else(|| {
                    Error::config("model.variances", "required for model.kind = gmm")
                })?;
                ModelConfig::Gmm { weights, means, variances }
            }
            "texture-gmm" => {
                let mut count = 6;
                let mut variance = 0.25;
                let mut seed = 7;
                let mut orientation = (0.0, std::f64::consts::PI);
                let mut frequency = (0.05, 0.25);
                if let Some(v) = bag.take_usize("model.count")? {
                    count = v;
                }
                if let Some(v) = bag.take_f64("model.variance")? {
                    if !(v > 0.0 && v.is_finite()) {
                        return Err(Error::config("model.variance", "must be positive and finite"));
                    }
                    variance = v;
                }
                if let Some(v) = bag.take_u64("model.seed")? {
                    seed = v;
                }
                if let Some(v) = bag.take_pair("model.orientation")? {
                    orientation = v;
                }
                if let Some(v) = bag.take_pair("model.frequency")? {
                    frequency = v;
                }
                ModelConfig::TextureGmm { count, variance, seed, orientation, frequency }
            }
            "mlp" => {
                let checkpoint = bag.take_str("model.checkpoint")?.ok_or_else(|| {
                    Error::config("model.checkpoint", "required for model.kind = mlp")
                })?;
                if !Path::new(&checkpoint).exists() {
                    return Err(Error::config(
                        "model.checkpoint",
                        format!("referenced file does not exist: {checkpoint}"),
                    ));
                }
                ModelConfig::Mlp { checkpoint }
            }
            other => {
                return Err(Error::config(
                    "model.kind",
                    format!("expected gmm | texture-gmm | mlp, got {other:?}"),
                ))
            }
        };

        if bag.has_prefix("sync") {
            let mut sync = SyncConfig {
                w0: 0.0,
                decay: 0.95,
                schedule: SyncSchedule::EveryStep,
                target: GuidanceTarget::Denoised,
                loss: default_loss(),
            };
            if let Some(v) = bag.take_f64("sync.w0")? {
                sync.w0 = v;
            }
            if let Some(v) = bag.take_f64("sync.decay")? {
                sync.decay = v;
            }
            if let Some(s) = bag.take_str("sync.schedule")? {
                sync.schedule = parse_sync_schedule("sync.schedule", &s)?;
            }
            if let Some(s) = bag.take_str("sync.target")? {
                sync.target = match s.as_str() {
                    "denoised" => GuidanceTarget::Denoised,
                    "noisy" => GuidanceTarget::Noisy,
                    other => {
                        return Err(Error::config(
                            "sync.target",
                            format!("expected denoised | noisy, got {other:?}"),
                        ))
                    }
                };
            }
            sync.loss = take_loss(&mut bag, "sync")?;
            cfg.sync = Some(sync);
        }

        if let Some(v) = bag.take_u64("seed")? {
            cfg.seed = v;
        }

        if let Some(v) = bag.take_f64("train.learning_rate")? {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config("train.learning_rate", "must be positive and finite"));
            }
            cfg.train.learning_rate = v;
        }
        if let Some(v) = bag.take_usize("train.batch")? {
            if v == 0 {
                return Err(Error::config("train.batch", "must be at least 1"));
            }
            cfg.train.batch_size = v;
        }
        if let Some(v) = bag.take_usize("train.iterations")? {
            cfg.train.iterations = v;
        }
        if let Some(v) = bag.take_u64("train.seed")? {
            cfg.train.seed = v;
        }
        if let Some(v) = bag.take_usize_vec("train.hidden")? {
            if v.iter().any(|&h| h == 0) {
                return Err(Error::config("train.hidden", "layer widths must be positive"));
            }
            cfg.train.hidden = v;
        }

        if let Some(v) = bag.take_usize("dataset.count")? {
            cfg.dataset.count = v;
        }
        if let Some(v) = bag.take_usize("dataset.height")? {
            cfg.dataset.h = v;
        }
        if let Some(v) = bag.take_usize("dataset.width")? {
            cfg.dataset.w = v;
        }
        if let Some(v) = bag.take_usize("dataset.channels")? {
            cfg.dataset.d = v;
        }
        if let Some(v) = bag.take_pair("dataset.orientation")? {
            cfg.dataset.orientation_range = v;
        }
        if let Some(v) = bag.take_pair("dataset.frequency")? {
            cfg.dataset.frequency_range = v;
        }
        if let Some(v) = bag.take_u64("dataset.seed")? {
            cfg.dataset.seed = v;
        }

        if let Some(v) = bag.take_usize("evaluate.crops")? {
            cfg.evaluate.crops = Some(v);
        }
        cfg.evaluate.loss = take_loss(&mut bag, "evaluate")?;
        if let Some(v) = bag.take_usize("evaluate.reference_samples")? {
            cfg.evaluate.reference_samples = v;
        }
        if let Some(v) = bag.take_usize("evaluate.reference_pairs")? {
            cfg.evaluate.reference_pairs = v;
        }

        bag.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Cross-field checks that don't require building anything.
    pub fn validate(&self) -> Result<()> {
        if let Some(sync) = &self.sync {
            if !sync.w0.is_finite() || sync.w0 < 0.0 {
                return Err(Error::config("sync.w0", "must be finite and >= 0"));
            }
            if !(sync.decay > 0.0 && sync.decay <= 1.0) {
                return Err(Error::config("sync.decay", "must be in (0, 1]"));
            }
            sync.schedule.validate(self.sampler.n_steps)?;
        }
        if self.layout.channels == 0 {
            return Err(Error::config("layout.channels", "must be at least 1"));
        }
        // Surface impossible window geometry as a config error (exit 2)
        // rather than letting it fail at run time.
        if let Err(e) = self.build_layout() {
            return Err(Error::config("layout", e.to_string()));
        }
        Ok(())
    }

    pub fn build_schedule(&self) -> Result<Schedule> {
        build_schedule(self.schedule.t_max, self.schedule.kind, self.schedule.params)
    }

    pub fn build_plan(&self, sched: &Schedule) -> Result<TimestepPlan> {
        if self.sampler.n_steps > u32::MAX as usize {
            return Err(Error::config("sampler.steps", "implausibly large"));
        }
        make_plan(sched, self.sampler.n_steps as u32)
    }

    pub fn build_layout(&self) -> Result<WindowLayout> {
        make_layout(
            self.layout.height,
            self.layout.width,
            self.layout.channels,
            self.layout.height,
            self.layout.window,
            self.layout.stride,
            self.layout.anchor,
        )
    }

    /// Window-shaped denoiser described by the model section.
    pub fn build_model(&self) -> Result<Box<dyn DenoiserModel>> {
        let (h, w, d) = (self.layout.height, self.layout.window, self.layout.channels);
        match &self.model {
            ModelConfig::Gmm { weights, means, variances } => {
                let n = h * w * d;
                for (k, m) in means.iter().enumerate() {
                    if m.len() != n {
                        return Err(Error::config(
                            "model.means",
                            format!("component {k} has {} values, window needs {n}", m.len()),
                        ));
                    }
                }
                let prior = crate::models::GaussianMixturePrior::new(
                    weights.clone(),
                    means.clone(),
                    variances.clone(),
                )?;
                Ok(Box::new(prior))
            }
            ModelConfig::TextureGmm { count, variance, seed, orientation, frequency } => {
                let spec = TextureDatasetSpec {
                    count: *count,
                    h,
                    w,
                    d,
                    orientation_range: *orientation,
                    frequency_range: *frequency,
                    seed: *seed,
                };
                let dataset = make_texture_dataset(&spec)?;
                Ok(Box::new(texture_prior(&dataset, *variance)?))
            }
            ModelConfig::Mlp { checkpoint } => {
                let model: MlpDenoiser = load_checkpoint(Path::new(checkpoint), h, w, d)?;
                Ok(Box::new(model))
            }
        }
    }

    pub fn build_policy(&self) -> Result<Option<SyncPolicy>> {
        let Some(sync) = &self.sync else { return Ok(None) };
        let policy = SyncPolicy {
            w0: sync.w0,
            decay: sync.decay,
            schedule: sync.schedule,
            guidance_target: sync.target,
            loss: sync.loss.build(self.layout.channels),
        };
        policy.validate(self.sampler.n_steps)?;
        Ok(Some(policy))
    }

    pub fn train_opt(&self) -> TrainOpt {
        TrainOpt {
            learning_rate: self.train.learning_rate,
            batch_size: self.train.batch_size,
            iterations: self.train.iterations,
            seed: self.train.seed,
        }
    }

    /// The sync section, created with defaults (w0 = 0, decay 0.95,
    /// every-step, denoised target, style loss) if absent. Used by
    /// weight-override paths that must work on sync-free configs.
    pub fn ensure_sync(&mut self) -> &mut SyncConfig {
        if self.sync.is_none() {
            self.sync = Some(SyncConfig {
                w0: 0.0,
                decay: 0.95,
                schedule: SyncSchedule::EveryStep,
                target: GuidanceTarget::Denoised,
                loss: default_loss(),
            });
        }
        self.sync.as_mut().expect("just set")
    }

    /// Intra-metric crop count: explicit override or panorama width divided
    /// by window width (the generation crop convention).
    pub fn n_crops(&self) -> Result<usize> {
        if let Some(n) = self.evaluate.crops {
            return Ok(n);
        }
        if self.layout.window == 0 || self.layout.width % self.layout.window != 0 {
            return Err(Error::config(
                "evaluate.crops",
                format!(
                    "panorama width {} is not divisible by window width {}; set evaluate.crops",
                    self.layout.width, self.layout.window
                ),
            ));
        }
        Ok(self.layout.width / self.layout.window)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_uses_defaults_and_builds() {
        let cfg = RunConfig::from_json_str("{}").unwrap();
        assert_eq!(cfg.schedule.t_max, 1000);
        assert_eq!(cfg.sampler.n_steps, 50);
        assert_eq!(cfg.sampler.kind, SamplerKind::Ddim { eta: 0.0 });
        assert!(cfg.sync.is_none());
        let sched = cfg.build_schedule().unwrap();
        assert_eq!(sched.t_max(), 1000);
        let plan = cfg.build_plan(&sched).unwrap();
        assert_eq!(plan.len(), 50);
        let layout = cfg.build_layout().unwrap();
        assert_eq!(layout.n_windows(), 7);
        cfg.build_model().unwrap();
        assert_eq!(cfg.n_crops().unwrap(), 4);
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let err = RunConfig::from_json_str(r#"{"schdeule.t": 10}"#).unwrap_err();
        match err {
            Error::Config { field, .. } => assert_eq!(field, "schdeule.t"),
            other => panic!("expected Config error, got {other:?}"),
        }
    }

    #[test]
    fn type_errors_name_the_field() {
        let err = RunConfig::from_json_str(r#"{"schedule.t": "many"}"#).unwrap_err();
        match err {
            Error::Config { field, .. } => assert_eq!(field, "schedule.t"),
            other => panic!("expected Config error, got {other:?}"),
        }
        let err = RunConfig::from_json_str(r#"{"sync.w0": -2}"#).unwrap_err();
        match err {
            Error::Config { field, .. } => assert_eq!(field, "sync.w0"),
            other => panic!("expected Config error, got {other:?}"),
        }
    }

    #[test]
    fn sync_section_parses_fully() {
        let cfg = RunConfig::from_json_str(
            r#"{
                "sync.w0": 10.0,
                "sync.decay": 0.9,
                "sync.schedule": "interval:10",
                "sync.target": "noisy",
                "sync.loss": "feature",
                "sync.loss_scale": 2.5,
                "sync.feature_channels": [4, 4],
                "sync.feature_lambdas": [1.0, 0.5],
                "sync.feature_seed": 3
            }"#,
        )
        .unwrap();
        let sync = cfg.sync.as_ref().unwrap();
        assert_eq!(sync.w0, 10.0);
        assert_eq!(sync.decay, 0.9);
        assert_eq!(sync.schedule, SyncSchedule::Interval(10));
        assert_eq!(sync.target, GuidanceTarget::Noisy);
        assert_eq!(sync.loss.kind, LossKind::Feature);
        assert_eq!(sync.loss.scale, 2.5);
        let policy = cfg.build_policy().unwrap().unwrap();
        assert_eq!(policy.loss.name(), "feature");
    }

    #[test]
    fn sync_schedule_strings_parse_and_bad_ones_do_not() {
        assert_eq!(parse_sync_schedule("k", "every").unwrap(), SyncSchedule::EveryStep);
        assert_eq!(parse_sync_schedule("k", "interval:7").unwrap(), SyncSchedule::Interval(7));
        assert_eq!(parse_sync_schedule("k", "initial:3").unwrap(), SyncSchedule::Initial(3));
        assert!(parse_sync_schedule("k", "sometimes").is_err());
        assert!(parse_sync_schedule("k", "interval:x").is_err());
        assert!(parse_sync_schedule("k", "initial:").is_err());
    }

    #[test]
    fn ddpm_forces_a_dense_plan() {
        let cfg =
            RunConfig::from_json_str(r#"{"sampler.kind": "ddpm", "schedule.t": 80}"#).unwrap();
        assert_eq!(cfg.sampler.n_steps, 80);
    }

    #[test]
    fn missing_checkpoint_file_is_a_config_error() {
        let err = RunConfig::from_json_str(
            r#"{"model.kind": "mlp", "model.checkpoint": "/nonexistent/m.sdm"}"#,
        )
        .unwrap_err();
        match err {
            Error::Config { field, message } => {
                assert_eq!(field, "model.checkpoint");
                assert!(message.contains("does not exist"));
            }
            other => panic!("expected Config error, got {other:?}"),
        }
    }

    #[test]
    fn gmm_model_requires_its_arrays() {
        let err = RunConfig::from_json_str(r#"{"model.kind": "gmm"}"#).unwrap_err();
        match err {
            Error::Config { field, .. } => assert_eq!(field, "model.weights"),
            other => panic!("expected Config error, got {other:?}"),
        }
        // Full definition for a 1x1x1 window layout.
        let cfg = RunConfig::from_json_str(
            r#"{
                "layout.height": 1, "layout.width": 3, "layout.channels": 1,
                "layout.window": 1, "layout.stride": 1,
                "model.kind": "gmm",
                "model.weights": [1.0],
                "model.means": [[0.0]],
                "model.variances": [1.0]
            }"#,
        )
        .unwrap();
        cfg.build_model().unwrap();
    }

    #[test]
    fn gmm_dimension_mismatch_names_the_means_field() {
        let cfg = RunConfig::from_json_str(
            r#"{
                "model.kind": "gmm",
                "model.weights": [1.0],
                "model.means": [[0.0, 0.0]],
                "model.variances": [1.0]
            }"#,
        )
        .unwrap();
        let err = match cfg.build_model() {
            Err(e) => e,
            Ok(_) => panic!("expected a dimension mismatch"),
        };
        match err {
            Error::Config { field, .. } => assert_eq!(field, "model.means"),
            other => panic!("expected Config error, got {other:?}"),
        }
    }

    #[test]
    fn interval_beyond_plan_length_is_rejected() {
        let err = RunConfig::from_json_str(
            r#"{"sampler.steps": 10, "sync.w0": 1.0, "sync.schedule": "interval:20"}"#,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
    }

    #[test]
    fn dataset_section_overrides_its_small_grid_defaults() {
        let cfg = RunConfig::from_json_str("{}").unwrap();
        assert_eq!((cfg.dataset.h, cfg.dataset.w, cfg.dataset.d), (8, 8, 1));
        let cfg2 = RunConfig::from_json_str(
            r#"{"dataset.height": 16, "dataset.width": 16, "dataset.channels": 3, "dataset.count": 4}"#,
        )
        .unwrap();
        assert_eq!((cfg2.dataset.h, cfg2.dataset.w, cfg2.dataset.d), (16, 16, 3));
        assert_eq!(cfg2.dataset.count, 4);
    }

    #[test]
    fn anchor_parses_center_and_index() {
        let cfg = RunConfig::from_json_str(r#"{"layout.anchor": "center"}"#).unwrap();
        assert_eq!(cfg.layout.anchor, Anchor::Center);
        let cfg = RunConfig::from_json_str(r#"{"layout.anchor": 2}"#).unwrap();
        assert_eq!(cfg.layout.anchor, Anchor::Index(2));
        assert!(RunConfig::from_json_str(r#"{"layout.anchor": "left"}"#).is_err());
    }

    #[test]
    fn evaluate_loss_section_is_independent_of_sync_loss() {
        let cfg = RunConfig::from_json_str(
            r#"{"sync.w0": 1.0, "sync.loss": "style", "evaluate.loss": "feature"}"#,
        )
        .unwrap();
        assert_eq!(cfg.sync.as_ref().unwrap().loss.kind, LossKind::Style);
        assert_eq!(cfg.evaluate.loss.kind, LossKind::Feature);
    }
}
