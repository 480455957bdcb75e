//! ε-prediction denoisers.
//!
//! Three families: an analytic Gaussian-mixture oracle (closed-form score of
//! the diffused mixture, with exact Jacobian), a point-mass ideal denoiser
//! (the v→0 limit, for which deterministic DDIM is exactly plan-independent),
//! and a small trainable MLP over flattened grids. All models expose explicit
//! vector-Jacobian products; no autodiff anywhere.

use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::rng::{NoiseStream, StreamDomain};
use crate::schedule::{add_noise, Schedule};

pub trait DenoiserModel: Send + Sync {
    fn predict_eps(&self, x_t: &ImageGrid, t: u32, sched: &Schedule) -> Result<ImageGrid>;
    /// cotangentᵀ · ∂ε/∂x_t — linear in the cotangent.
    fn vjp_eps(
        &self,
        x_t: &ImageGrid,
        t: u32,
        cotangent: &ImageGrid,
        sched: &Schedule,
    ) -> Result<ImageGrid>;
}

// ---------------------------------------------------------------------------
// Gaussian mixture oracle
// ---------------------------------------------------------------------------

/// Isotropic Gaussian mixture prior over flattened grids.
///
/// Under the forward process the marginal at time t stays a mixture with
/// means √α_t·μ_k and variances s_k = α_t·v_k + (1−α_t), so the exact
/// ε*(x,t) = −√(1−α_t)·∇log p_t(x) is available in closed form. This is the
/// verification oracle the samplers and guidance gradients are tested
/// against.
#[derive(Debug, Clone)]
pub struct GaussianMixturePrior {
    weights: Vec<f64>,
    /// means[k] is a flattened H·W·D vector (row-major grid order)
    means: Vec<Vec<f64>>,
    variances: Vec<f64>,
}

impl GaussianMixturePrior {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<f64>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || variances.len() != k {
            return Err(Error::Range(format!(
                "mixture needs matching component counts, got {} weights / {} means / {} variances",
                k,
                means.len(),
                variances.len()
            )));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Range(format!("mixture weights sum to {}, need 1 within 1e-12", sum)));
        }
        if weights.iter().any(|&w| w <= 0.0) {
            return Err(Error::Range("mixture weights must be positive".into()));
        }
        if variances.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::Range("mixture variances must be positive".into()));
        }
        let dim = means[0].len();
        if means.iter().any(|m| m.len() != dim) {
            return Err(Error::Range("mixture means must share one dimension".into()));
        }
        Ok(GaussianMixturePrior { weights, means, variances })
    }

    /// Uniform-weight mixture whose means are the given grids (flattened);
    /// one isotropic variance shared by all components.
    pub fn from_grids(grids: &[ImageGrid], variance: f64) -> Result<Self> {
        if grids.is_empty() {
            return Err(Error::Range("mixture needs at least one component grid".into()));
        }
        let k = grids.len();
        let weights = vec![1.0 / k as f64; k];
        let means = grids.iter().map(|g| g.data().to_vec()).collect();
        GaussianMixturePrior::new(weights, means, vec![variance; k])
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    fn check_dim(&self, x: &ImageGrid) -> Result<()> {
        if x.numel() != self.dim() {
            return Err(Error::Shape {
                expected: format!("{} elements", self.dim()),
                got: format!("{} elements ({:?})", x.numel(), x.shape()),
            });
        }
        Ok(())
    }

    /// Per-component diffused moments and responsibilities at (x, t):
    /// returns (responsibilities r_k, scaled residuals u_k = (x−m_k)/s_k).
    fn responsibilities(&self, x: &[f64], t: u32, sched: &Schedule) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let a = sched.alpha(t);
        let sqrt_a = a.sqrt();
        let dim = self.dim() as f64;
        let k = self.n_components();
        let mut logits = vec![0.0; k];
        let mut us = Vec::with_capacity(k);
        for i in 0..k {
            let s = a * self.variances[i] + (1.0 - a);
            let mut sq = 0.0;
            let mut u = Vec::with_capacity(x.len());
            for (j, &xv) in x.iter().enumerate() {
                let r = xv - sqrt_a * self.means[i][j];
                sq += r * r;
                u.push(r / s);
            }
            logits[i] = self.weights[i].ln() - 0.5 * dim * s.ln() - 0.5 * sq / s;
            us.push(u);
        }
        // log-sum-exp stabilization: the max logit always survives as exp(0)=1
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::Numeric("mixture responsibilities are non-finite".into()));
        }
        let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        if !(z > 0.0) {
            return Err(Error::Numeric("all mixture responsibilities underflowed".into()));
        }
        Ok((exps.iter().map(|&e| e / z).collect(), us))
    }

    /// Exact log-density of the diffused mixture (up to the additive
    /// constant −(dim/2)·ln 2π). Exposed for finite-difference oracles.
    pub fn log_marginal(&self, x: &ImageGrid, t: u32, sched: &Schedule) -> Result<f64> {
        self.check_dim(x)?;
        sched.check_t(t)?;
        let a = sched.alpha(t);
        let sqrt_a = a.sqrt();
        let dim = self.dim() as f64;
        let logits: Vec<f64> = (0..self.n_components())
            .map(|i| {
                let s = a * self.variances[i] + (1.0 - a);
                let sq: f64 = x
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(j, &xv)| {
                        let r = xv - sqrt_a * self.means[i][j];
                        r * r
                    })
                    .sum();
                self.weights[i].ln() - 0.5 * dim * s.ln() - 0.5 * sq / s
            })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
        Ok(max + z.ln())
    }
}

impl DenoiserModel for GaussianMixturePrior {
    /// ε*(x,t) = √(1−α_t)·Σ_k r_k·(x−m_k)/s_k (the negative scaled score).
    fn predict_eps(&self, x_t: &ImageGrid, t: u32, sched: &Schedule) -> Result<ImageGrid> {
        self.check_dim(x_t)?;
        sched.check_t(t)?;
        let c = (1.0 - sched.alpha(t)).sqrt();
        let (r, us) = self.responsibilities(x_t.data(), t, sched)?;
        let mut out = vec![0.0; x_t.numel()];
        for i in 0..self.n_components() {
            for (o, &u) in out.iter_mut().zip(&us[i]) {
                *o += r[i] * u;
            }
        }
        for o in &mut out {
            *o *= c;
        }
        let (h, w, d) = x_t.shape();
        ImageGrid::from_vec(h, w, d, out)
    }

    /// Exact Jacobian-vector product. With ū = Σ_k r_k·u_k the Jacobian is
    /// √(1−α_t)·[(Σ_k r_k/s_k)·I + ū·ūᵀ − Σ_k r_k·u_k·u_kᵀ] (symmetric), so
    /// the vjp is the same product.
    fn vjp_eps(
        &self,
        x_t: &ImageGrid,
        t: u32,
        cotangent: &ImageGrid,
        sched: &Schedule,
    ) -> Result<ImageGrid> {
        self.check_dim(x_t)?;
        x_t.check_same_shape(cotangent)?;
        sched.check_t(t)?;
        let a = sched.alpha(t);
        let c = (1.0 - a).sqrt();
        let (r, us) = self.responsibilities(x_t.data(), t, sched)?;
        let g = cotangent.data();
        let kcomp = self.n_components();

        let mut ubar = vec![0.0; g.len()];
        for i in 0..kcomp {
            for (ub, &u) in ubar.iter_mut().zip(&us[i]) {
                *ub += r[i] * u;
            }
        }
        let diag: f64 = (0..kcomp)
            .map(|i| {
                let s = a * self.variances[i] + (1.0 - a);
                r[i] / s
            })
            .sum();
        let ubar_dot_g: f64 = ubar.iter().zip(g).map(|(u, gg)| u * gg).sum();
        let u_dot_g: Vec<f64> = us
            .iter()
            .map(|u| u.iter().zip(g).map(|(uu, gg)| uu * gg).sum())
            .collect();

        let mut out = vec![0.0; g.len()];
        for j in 0..g.len() {
            let mut acc = diag * g[j] + ubar[j] * ubar_dot_g;
            for i in 0..kcomp {
                acc -= r[i] * us[i][j] * u_dot_g[i];
            }
            out[j] = c * acc;
        }
        let (h, w, d) = x_t.shape();
        ImageGrid::from_vec(h, w, d, out)
    }
}

// ---------------------------------------------------------------------------
// Point-mass ideal denoiser
// ---------------------------------------------------------------------------

/// Ideal denoiser for a dataset concentrated at a single point c:
/// ε̂(x,t) = (x − √α_t·c)/√(1−α_t), the v→0 limit of a one-component
/// mixture. Its predicted denoised observation is exactly c at every t, which
/// makes deterministic DDIM trajectories exactly independent of the timestep
/// plan — the reference model for plan-consistency checks.
#[derive(Debug, Clone)]
pub struct PointMassDenoiser {
    center: Vec<f64>,
}

impl PointMassDenoiser {
    pub fn new(center: Vec<f64>) -> Self {
        assert!(!center.is_empty());
        PointMassDenoiser { center }
    }

    pub fn from_grid(g: &ImageGrid) -> Self {
        PointMassDenoiser { center: g.data().to_vec() }
    }

    fn check(&self, x: &ImageGrid, t: u32, sched: &Schedule) -> Result<f64> {
        if x.numel() != self.center.len() {
            return Err(Error::Shape {
                expected: format!("{} elements", self.center.len()),
                got: format!("{}", x.numel()),
            });
        }
        sched.check_t(t)?;
        let a = sched.alpha(t);
        if a >= 1.0 {
            return Err(Error::Numeric("point-mass denoiser undefined at alpha = 1".into()));
        }
        Ok(a)
    }
}

impl DenoiserModel for PointMassDenoiser {
    fn predict_eps(&self, x_t: &ImageGrid, t: u32, sched: &Schedule) -> Result<ImageGrid> {
        let a = self.check(x_t, t, sched)?;
        let (sa, inv) = (a.sqrt(), 1.0 / (1.0 - a).sqrt());
        let (h, w, d) = x_t.shape();
        let data = x_t
            .data()
            .iter()
            .zip(&self.center)
            .map(|(&x, &c)| (x - sa * c) * inv)
            .collect();
        ImageGrid::from_vec(h, w, d, data)
    }

    fn vjp_eps(
        &self,
        x_t: &ImageGrid,
        t: u32,
        cotangent: &ImageGrid,
        sched: &Schedule,
    ) -> Result<ImageGrid> {
        let a = self.check(x_t, t, sched)?;
        x_t.check_same_shape(cotangent)?;
        let inv = 1.0 / (1.0 - a).sqrt();
        Ok(cotangent.map(|g| g * inv))
    }
}

// ---------------------------------------------------------------------------
// Trainable MLP denoiser
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct MlpLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    /// row-major out_dim × in_dim
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

/// Fully-connected ε-predictor over flattened windows. Input is the
/// flattened grid plus one scalar time feature t/T; hidden layers use tanh,
/// the output layer is linear (so predictions are unbounded like ε).
#[derive(Debug, Clone)]
pub struct MlpDenoiser {
    h: usize,
    w: usize,
    d: usize,
    layers: Vec<MlpLayer>,
}

impl MlpDenoiser {
    /// Seeded random init: weights N(0, 1/in_dim), zero biases.
    pub fn new(h: usize, w: usize, d: usize, hidden: &[usize], seed: u64) -> Self {
        let n = h * w * d;
        let mut dims = vec![n + 1];
        dims.extend_from_slice(hidden);
        dims.push(n);
        let mut layers = Vec::new();
        for li in 0..dims.len() - 1 {
            let (in_dim, out_dim) = (dims[li], dims[li + 1]);
            let mut stream = NoiseStream::new(seed, StreamDomain::ModelInit, li as u32, 0);
            let std = 1.0 / (in_dim as f64).sqrt();
            let w = (0..out_dim * in_dim).map(|_| std * stream.next_normal()).collect();
            layers.push(MlpLayer { in_dim, out_dim, w, b: vec![0.0; out_dim] });
        }
        MlpDenoiser { h, w, d, layers }
    }

    pub fn grid_shape(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.d)
    }

    pub fn layers(&self) -> &[MlpLayer] {
        &self.layers
    }

    pub(crate) fn from_parts(h: usize, w: usize, d: usize, layers: Vec<MlpLayer>) -> Self {
        MlpDenoiser { h, w, d, layers }
    }

    fn check_shape(&self, x: &ImageGrid) -> Result<()> {
        if x.shape() != (self.h, self.w, self.d) {
            return Err(Error::Shape {
                expected: format!("{:?}", (self.h, self.w, self.d)),
                got: format!("{:?}", x.shape()),
            });
        }
        Ok(())
    }

    fn input_vec(&self, x: &ImageGrid, t: u32, sched: &Schedule) -> Vec<f64> {
        let mut v = Vec::with_capacity(x.numel() + 1);
        v.extend_from_slice(x.data());
        v.push(t as f64 / sched.t_max() as f64);
        v
    }

    /// Forward pass keeping every post-activation (acts[0] is the input);
    /// hidden layers tanh, final layer linear.
    fn forward_acts(&self, input: Vec<f64>) -> Vec<Vec<f64>> {
        let mut acts = vec![input];
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            let a = &acts[li];
            let mut out = vec![0.0; layer.out_dim];
            for o in 0..layer.out_dim {
                let row = &layer.w[o * layer.in_dim..(o + 1) * layer.in_dim];
                let mut acc = layer.b[o];
                for (wv, av) in row.iter().zip(a) {
                    acc += wv * av;
                }
                out[o] = if li == last { acc } else { acc.tanh() };
            }
            acts.push(out);
        }
        acts
    }

    /// Backward pass from an output cotangent to the input gradient; when
    /// `grads` is given, also accumulates weight/bias gradients into it.
    fn backward(
        &self,
        acts: &[Vec<f64>],
        output_cot: &[f64],
        mut grads: Option<&mut Vec<(Vec<f64>, Vec<f64>)>>,
    ) -> Vec<f64> {
        let last = self.layers.len() - 1;
        let mut g_out = output_cot.to_vec();
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            // through the activation: tanh'(pre) = 1 - post² (hidden only)
            let g_pre: Vec<f64> = if li == last {
                g_out
            } else {
                g_out
                    .iter()
                    .zip(&acts[li + 1])
                    .map(|(&g, &post)| g * (1.0 - post * post))
                    .collect()
            };
            if let Some(gs) = grads.as_deref_mut() {
                let (gw, gb) = &mut gs[li];
                for o in 0..layer.out_dim {
                    let gp = g_pre[o];
                    gb[o] += gp;
                    let row = &mut gw[o * layer.in_dim..(o + 1) * layer.in_dim];
                    for (rw, av) in row.iter_mut().zip(&acts[li]) {
                        *rw += gp * av;
                    }
                }
            }
            let mut g_in = vec![0.0; layer.in_dim];
            for o in 0..layer.out_dim {
                let gp = g_pre[o];
                let row = &layer.w[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (gi, wv) in g_in.iter_mut().zip(row) {
                    *gi += gp * wv;
                }
            }
            g_out = g_in;
        }
        g_out
    }
}

impl DenoiserModel for MlpDenoiser {
    fn predict_eps(&self, x_t: &ImageGrid, t: u32, sched: &Schedule) -> Result<ImageGrid> {
        self.check_shape(x_t)?;
        sched.check_t(t)?;
        let acts = self.forward_acts(self.input_vec(x_t, t, sched));
        ImageGrid::from_vec(self.h, self.w, self.d, acts.last().unwrap().clone())
    }

    fn vjp_eps(
        &self,
        x_t: &ImageGrid,
        t: u32,
        cotangent: &ImageGrid,
        sched: &Schedule,
    ) -> Result<ImageGrid> {
        self.check_shape(x_t)?;
        self.check_shape(cotangent)?;
        sched.check_t(t)?;
        let acts = self.forward_acts(self.input_vec(x_t, t, sched));
        let mut g_in = self.backward(&acts, cotangent.data(), None);
        g_in.pop(); // drop the time-feature slot: gradient is w.r.t. x only
        ImageGrid::from_vec(self.h, self.w, self.d, g_in)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOpt {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
}

/// SGD on the simplified loss E‖ε_θ(√α_t·x₀ + √(1−α_t)·ε, t) − ε‖² with t
/// uniform in [1, T]. Per-iteration batch-mean losses (per element) are
/// returned as the trace. Same seed + config reruns bitwise identically.
pub fn mlp_train(
    model: MlpDenoiser,
    dataset: &[ImageGrid],
    sched: &Schedule,
    opt: &TrainOpt,
) -> Result<(MlpDenoiser, Vec<f64>)> {
    if dataset.is_empty() {
        return Err(Error::Range("training dataset must be nonempty".into()));
    }
    if opt.batch_size == 0 {
        return Err(Error::Range("batch size must be >= 1".into()));
    }
    for g in dataset {
        model.check_shape(g)?;
    }
    let mut model = model;
    let (h, w, d) = model.grid_shape();
    let n = (h * w * d) as f64;
    let t_max = sched.t_max() as u64;
    let mut stream = NoiseStream::new(opt.seed, StreamDomain::Train, 0, 0);
    let mut trace = Vec::with_capacity(opt.iterations);

    for iter in 0..opt.iterations {
        let mut grads: Vec<(Vec<f64>, Vec<f64>)> = model
            .layers
            .iter()
            .map(|l| (vec![0.0; l.w.len()], vec![0.0; l.b.len()]))
            .collect();
        let mut batch_loss = 0.0;
        for _ in 0..opt.batch_size {
            let idx = stream.next_below(dataset.len() as u64) as usize;
            let t = 1 + stream.next_below(t_max) as u32;
            let eps = stream.normal_grid(h, w, d);
            let x_t = add_noise(&dataset[idx], t, &eps, sched)?;
            let acts = model.forward_acts(model.input_vec(&x_t, t, sched));
            let out = acts.last().unwrap();
            let mut cot = vec![0.0; out.len()];
            let mut loss = 0.0;
            for (j, (&o, &e)) in out.iter().zip(eps.data()).enumerate() {
                let r = o - e;
                loss += r * r;
                cot[j] = 2.0 * r / n; // gradient of the per-element mean
            }
            batch_loss += loss / n;
            model.backward(&acts, &cot, Some(&mut grads));
        }
        let loss = batch_loss / opt.batch_size as f64;
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged {
                iteration: iter,
                message: format!("batch loss is {}", loss),
            });
        }
        let step = opt.learning_rate / opt.batch_size as f64;
        for (layer, (gw, gb)) in model.layers.iter_mut().zip(&grads) {
            for (wv, g) in layer.w.iter_mut().zip(gw) {
                *wv -= step * g;
            }
            for (bv, g) in layer.b.iter_mut().zip(gb) {
                *bv -= step * g;
            }
        }
        trace.push(loss);
    }
    Ok((model, trace))
}

// ---------------------------------------------------------------------------
// Checkpoint format (SDM1)
// ---------------------------------------------------------------------------

/// Serialize: magic "SDM1", u32 layer count, then per-layer (in_dim, out_dim)
/// as u32, then per-layer payload of f32 weights row-major followed by f32
/// biases. All little-endian.
pub fn checkpoint_bytes(model: &MlpDenoiser) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(b"SDM1");
    out.extend_from_slice(&(model.layers.len() as u32).to_le_bytes());
    for l in &model.layers {
        out.extend_from_slice(&(l.in_dim as u32).to_le_bytes());
        out.extend_from_slice(&(l.out_dim as u32).to_le_bytes());
    }
    for l in &model.layers {
        for &v in &l.w {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        for &v in &l.b {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// Deserialize against a target grid shape (the format stores only layer
/// dims; the grid factorization comes from the run config).
pub fn checkpoint_from_bytes(bytes: &[u8], h: usize, w: usize, d: usize) -> Result<MlpDenoiser> {
    let fail = |msg: &str| Error::Format { path: "<bytes>".into(), message: msg.into() };
    let take = |off: usize, len: usize| -> Result<&[u8]> {
        bytes.get(off..off + len).ok_or_else(|| fail("truncated checkpoint"))
    };
    if take(0, 4)? != b"SDM1" {
        return Err(fail("bad magic, expected SDM1"));
    }
    let read_u32 = |off: usize| -> Result<u32> {
        Ok(u32::from_le_bytes(take(off, 4)?.try_into().unwrap()))
    };
    let n_layers = read_u32(4)? as usize;
    if n_layers == 0 || n_layers > 64 {
        return Err(fail("implausible layer count"));
    }
    let mut dims = Vec::with_capacity(n_layers);
    let mut off = 8;
    for _ in 0..n_layers {
        let in_dim = read_u32(off)? as usize;
        let out_dim = read_u32(off + 4)? as usize;
        dims.push((in_dim, out_dim));
        off += 8;
    }
    let n = h * w * d;
    if dims[0].0 != n + 1 || dims[n_layers - 1].1 != n {
        return Err(fail(&format!(
            "layer dims {}→{} do not fit grid {}x{}x{} (+1 time feature)",
            dims[0].0,
            dims[n_layers - 1].1,
            h, w, d
        )));
    }
    for i in 1..n_layers {
        if dims[i].0 != dims[i - 1].1 {
            return Err(fail("layer dims do not chain"));
        }
    }
    let mut layers = Vec::with_capacity(n_layers);
    for &(in_dim, out_dim) in &dims {
        let mut read_f32s = |count: usize| -> Result<Vec<f64>> {
            let mut v = Vec::with_capacity(count);
            for _ in 0..count {
                let b: [u8; 4] = take(off, 4)?.try_into().unwrap();
                v.push(f32::from_le_bytes(b) as f64);
                off += 4;
            }
            Ok(v)
        };
        let w_vals = read_f32s(out_dim * in_dim)?;
        let b_vals = read_f32s(out_dim)?;
        layers.push(MlpLayer { in_dim, out_dim, w: w_vals, b: b_vals });
    }
    if off != bytes.len() {
        return Err(fail("trailing bytes after payload"));
    }
    Ok(MlpDenoiser::from_parts(h, w, d, layers))
}

pub fn save_checkpoint(path: &std::path::Path, model: &MlpDenoiser) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(model))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_checkpoint(path: &std::path::Path, h: usize, w: usize, d: usize) -> Result<MlpDenoiser> {
    let bytes =
        std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    checkpoint_from_bytes(&bytes, h, w, d).map_err(|e| match e {
        Error::Format { message, .. } => Error::Format { path: path.display().to_string(), message },
        other => other,
    })
}
