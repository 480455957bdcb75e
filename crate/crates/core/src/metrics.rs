//! Coherence metrics over generated panoramas.
//!
//! `intra_metric` quantifies how stylistically consistent a single panorama
//! is with itself: it cuts the panorama into equal-width vertical crops and
//! averages a perceptual loss over all unordered crop pairs. Lower is more
//! coherent. `reference_baseline` calibrates that number by measuring the
//! same loss between random pairs of independent single-window samples —
//! the incoherence level of images that share nothing but the model.

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::losses::PerceptualLoss;
use crate::rng::{NoiseStream, StreamDomain};
use crate::sync::run_panorama;

/// Result of `intra_metric`: the mean pairwise loss and every pair's value.
#[derive(Debug, Clone)]
pub struct IntraResult {
    pub mean: f64,
    /// (crop index a, crop index b, loss) for every unordered pair a < b.
    pub pairs: Vec<(usize, usize, f64)>,
}

/// Full-height vertical strip `[x0, x0 + w)` of a panorama.
fn strip(z: &ImageGrid, x0: usize, w: usize) -> ImageGrid {
    let (h, _, d) = z.shape();
    ImageGrid::from_fn(h, w, d, |y, x, c| z.get(y, x0 + x, c))
}

/// Mean perceptual loss over all unordered pairs of `n_crops` equal-width
/// vertical crops of `z`. The panorama width must divide evenly into
/// `n_crops` strips and at least two crops are required.
pub fn intra_metric(
    z: &ImageGrid,
    loss: &dyn PerceptualLoss,
    n_crops: usize,
) -> Result<IntraResult> {
    let (_, w, _) = z.shape();
    if n_crops < 2 {
        return Err(Error::Geometry(format!(
            "intra metric needs at least 2 crops, got {n_crops}"
        )));
    }
    if w % n_crops != 0 {
        return Err(Error::Geometry(format!(
            "panorama width {w} is not divisible by n_crops {n_crops}"
        )));
    }
    let cw = w / n_crops;
    let crops: Vec<ImageGrid> = (0..n_crops).map(|i| strip(z, i * cw, cw)).collect();
    let mut pairs = Vec::with_capacity(n_crops * (n_crops - 1) / 2);
    let mut sum = 0.0;
    for a in 0..n_crops {
        for b in (a + 1)..n_crops {
            let v = loss.value(&crops[a], &crops[b])?;
            sum += v;
            pairs.push((a, b, v));
        }
    }
    let mean = sum / pairs.len() as f64;
    Ok(IntraResult { mean, pairs })
}

/// Mean and sample standard deviation of the loss over `n_pairs` random
/// pairs of distinct samples. Pair indices come from a dedicated
/// counter-based stream, so the same seed always picks the same pairs.
pub fn reference_baseline(
    samples: &[ImageGrid],
    loss: &dyn PerceptualLoss,
    n_pairs: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::Range(format!(
            "reference baseline needs at least 2 samples, got {n}"
        )));
    }
    if n_pairs < 2 {
        return Err(Error::Range(format!(
            "reference baseline needs at least 2 pairs, got {n_pairs}"
        )));
    }
    let mut stream = NoiseStream::new(seed, StreamDomain::Pairs, 0, 0);
    let mut values = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let i = stream.next_below(n as u64) as usize;
        // Draw j from the remaining n-1 indices so i != j always.
        let mut j = stream.next_below(n as u64 - 1) as usize;
        if j >= i {
            j += 1;
        }
        values.push(loss.value(&samples[i], &samples[j])?);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
        / (values.len() - 1) as f64;
    Ok((mean, var.sqrt()))
}

/// One row of a synchronization-weight sweep.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub w0: f64,
    pub mean: f64,
    pub std: f64,
    /// Intra metric per seed, in seed order.
    pub values: Vec<f64>,
}

/// Generate a panorama for every (w0, seed) cell of the grid and aggregate
/// the intra metric per weight. Shared by the CLI sweep and the browser
/// demo; all cells reuse the same schedule, layout and model.
pub fn weight_sweep(cfg: &RunConfig, w0_list: &[f64], seeds: &[u64]) -> Result<Vec<SweepRow>> {
    if w0_list.is_empty() {
        return Err(Error::config("w0", "empty weight list"));
    }
    if seeds.is_empty() {
        return Err(Error::config("seeds", "empty seed list"));
    }
    let sched = cfg.build_schedule()?;
    let plan = cfg.build_plan(&sched)?;
    let layout = cfg.build_layout()?;
    let model = cfg.build_model()?;
    let n_crops = cfg.n_crops()?;
    let metric_loss = cfg.evaluate.loss.build(cfg.layout.channels);
    let mut rows = Vec::with_capacity(w0_list.len());
    for &w0 in w0_list {
        let mut run_cfg = cfg.clone();
        run_cfg.ensure_sync().w0 = w0;
        run_cfg.validate()?;
        let policy = run_cfg.build_policy()?;
        let mut values = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let (z, _) = run_panorama(
                model.as_ref(),
                &sched,
                &plan,
                &layout,
                policy.as_ref(),
                run_cfg.sampler.kind,
                seed,
            )?;
            values.push(intra_metric(&z, metric_loss.as_ref(), n_crops)?.mean);
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / (values.len() - 1) as f64)
                .sqrt()
        } else {
            0.0
        };
        rows.push(SweepRow { w0, mean, std, values });
    }
    Ok(rows)
}
