//! Differentiable perceptual losses used by the synchronization step.
//!
//! Two interchangeable losses are provided behind one trait: a Gram-matrix
//! style loss over raw channels, and a feature distance through a frozen
//! seeded random filter bank (same layered-distance structure as LPIPS, but
//! with no pretrained backbone — a semantic stand-in, not a numeric one).
//! Both expose closed-form input gradients; nothing here relies on autodiff.

use crate::error::Result;
use crate::grid::ImageGrid;
use crate::rng::{NoiseStream, StreamDomain};

pub trait PerceptualLoss: Send + Sync {
    fn value(&self, a: &ImageGrid, b: &ImageGrid) -> Result<f64>;
    /// ∂value/∂a. The gradient w.r.t. b is `grad_a(b, a)` by symmetry.
    fn grad_a(&self, a: &ImageGrid, b: &ImageGrid) -> Result<ImageGrid>;
    fn scale(&self) -> f64;
    fn name(&self) -> &'static str;
}

/// Gram-matrix style loss on raw channels.
///
/// Features are the D×N channel matrix F (N = H·W pixels), G = F·Fᵀ/N, and
/// value = scale · mean over the D² Gram entries of (G_a − G_b)². The input
/// gradient is the hand-derived chain rule scale·(4/(N·D²))·(G_a − G_b)·F_a.
#[derive(Debug, Clone)]
pub struct StyleLoss {
    pub scale: f64,
}

impl StyleLoss {
    pub fn new(scale: f64) -> Self {
        assert!(scale > 0.0, "loss scale must be positive");
        StyleLoss { scale }
    }

    /// D×D Gram matrix, row-major.
    fn gram(g: &ImageGrid) -> Vec<f64> {
        let (h, w, d) = g.shape();
        let n = (h * w) as f64;
        let mut gram = vec![0.0; d * d];
        for y in 0..h {
            for x in 0..w {
                for c0 in 0..d {
                    let v0 = g.get(y, x, c0);
                    for c1 in 0..d {
                        gram[c0 * d + c1] += v0 * g.get(y, x, c1);
                    }
                }
            }
        }
        for v in &mut gram {
            *v /= n;
        }
        gram
    }
}

impl PerceptualLoss for StyleLoss {
    fn value(&self, a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
        a.check_same_shape(b)?;
        let d = a.channels();
        let (ga, gb) = (Self::gram(a), Self::gram(b));
        let sum: f64 = ga.iter().zip(&gb).map(|(x, y)| (x - y) * (x - y)).sum();
        // scale applied last so value(scale=c) is exactly c·value(scale=1)
        Ok(self.scale * (sum / (d * d) as f64))
    }

    fn grad_a(&self, a: &ImageGrid, b: &ImageGrid) -> Result<ImageGrid> {
        a.check_same_shape(b)?;
        let (h, w, d) = a.shape();
        let n = (h * w) as f64;
        let ga = Self::gram(a);
        let gb = Self::gram(b);
        let diff: Vec<f64> = ga.iter().zip(&gb).map(|(x, y)| x - y).collect();
        let coeff = self.scale * 4.0 / (n * (d * d) as f64);
        // grad[c][p] = coeff · Σ_c' diff[c][c'] · F_a[c'][p]
        let mut out = ImageGrid::zeros(h, w, d);
        for y in 0..h {
            for x in 0..w {
                for c0 in 0..d {
                    let mut acc = 0.0;
                    for c1 in 0..d {
                        acc += diff[c0 * d + c1] * a.get(y, x, c1);
                    }
                    out.set(y, x, c0, coeff * acc);
                }
            }
        }
        Ok(out)
    }

    fn scale(&self) -> f64 {
        self.scale
    }

    fn name(&self) -> &'static str {
        "style"
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Linear => v,
            Activation::Tanh => v.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation value.
    #[inline]
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
        }
    }
}

#[derive(Debug, Clone)]
struct BankLayer {
    c_in: usize,
    c_out: usize,
    /// odd kernel side length; same-padded correlation
    k: usize,
    /// kernels[((co*c_in + ci)*k + dy)*k + dx]
    kernels: Vec<f64>,
    activation: Activation,
    pool: bool,
}

impl BankLayer {
    #[inline]
    fn weight(&self, co: usize, ci: usize, dy: usize, dx: usize) -> f64 {
        self.kernels[((co * self.c_in + ci) * self.k + dy) * self.k + dx]
    }

    /// Same-padded correlation: pre[y][x][co] = Σ w·input[y+dy-off][x+dx-off][ci].
    fn convolve(&self, input: &ImageGrid) -> ImageGrid {
        let (h, w, _) = input.shape();
        let off = self.k / 2;
        let mut pre = ImageGrid::zeros(h, w, self.c_out);
        for y in 0..h {
            for x in 0..w {
                for co in 0..self.c_out {
                    let mut acc = 0.0;
                    for dy in 0..self.k {
                        let iy = y as isize + dy as isize - off as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for dx in 0..self.k {
                            let ix = x as isize + dx as isize - off as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            for ci in 0..self.c_in {
                                acc += self.weight(co, ci, dy, dx)
                                    * input.get(iy as usize, ix as usize, ci);
                            }
                        }
                    }
                    pre.set(y, x, co, acc);
                }
            }
        }
        pre
    }

    /// Transpose of `convolve` w.r.t. the input.
    fn convolve_backward(&self, input_shape: (usize, usize, usize), g_pre: &ImageGrid) -> ImageGrid {
        let (h, w, _) = input_shape;
        let off = self.k / 2;
        let mut g_in = ImageGrid::zeros(h, w, self.c_in);
        let (ph, pw, _) = g_pre.shape();
        for y in 0..ph {
            for x in 0..pw {
                for co in 0..self.c_out {
                    let g = g_pre.get(y, x, co);
                    if g == 0.0 {
                        continue;
                    }
                    for dy in 0..self.k {
                        let iy = y as isize + dy as isize - off as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for dx in 0..self.k {
                            let ix = x as isize + dx as isize - off as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            for ci in 0..self.c_in {
                                let idx = g_in.idx(iy as usize, ix as usize, ci);
                                g_in.data_mut()[idx] += g * self.weight(co, ci, dy, dx);
                            }
                        }
                    }
                }
            }
        }
        g_in
    }
}

/// 2× mean pooling with ragged edges: odd trailing rows/columns form smaller
/// blocks instead of being dropped, so every input cell contributes.
fn pool2(input: &ImageGrid) -> ImageGrid {
    let (h, w, d) = input.shape();
    let (ph, pw) = (h.div_ceil(2), w.div_ceil(2));
    ImageGrid::from_fn(ph, pw, d, |y, x, c| {
        let (y0, x0) = (2 * y, 2 * x);
        let (y1, x1) = ((y0 + 2).min(h), (x0 + 2).min(w));
        let mut acc = 0.0;
        for yy in y0..y1 {
            for xx in x0..x1 {
                acc += input.get(yy, xx, c);
            }
        }
        acc / ((y1 - y0) * (x1 - x0)) as f64
    })
}

fn pool2_backward(input_shape: (usize, usize, usize), g_out: &ImageGrid) -> ImageGrid {
    let (h, w, d) = input_shape;
    let mut g_in = ImageGrid::zeros(h, w, d);
    let (ph, pw, _) = g_out.shape();
    for y in 0..ph {
        for x in 0..pw {
            let (y0, x0) = (2 * y, 2 * x);
            let (y1, x1) = ((y0 + 2).min(h), (x0 + 2).min(w));
            let inv = 1.0 / ((y1 - y0) * (x1 - x0)) as f64;
            for c in 0..d {
                let g = g_out.get(y, x, c) * inv;
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        let idx = g_in.idx(yy, xx, c);
                        g_in.data_mut()[idx] += g;
                    }
                }
            }
        }
    }
    g_in
}

struct LayerTape {
    input_shape: (usize, usize, usize),
    pre: ImageGrid,
    /// features of this layer (after activation and pooling)
    post: ImageGrid,
}

/// A frozen stack of seeded random convolution layers. Layer l's features are
/// compared between the two inputs with weight λ_l; layers feed forward into
/// each other like a small backbone.
#[derive(Debug, Clone)]
pub struct FilterBank {
    layers: Vec<BankLayer>,
    lambdas: Vec<f64>,
}

impl FilterBank {
    /// Random bank: one layer per entry of `channels`, 3×3 kernels drawn
    /// N(0, 1/(c_in·9)) from the seed, tanh activations, 2× pooling.
    pub fn seeded(seed: u64, in_channels: usize, channels: &[usize], lambdas: &[f64]) -> Self {
        assert!(!channels.is_empty(), "bank needs at least one layer");
        assert_eq!(channels.len(), lambdas.len(), "one lambda per layer");
        assert!(lambdas.iter().all(|&l| l >= 0.0));
        let k = 3;
        let mut layers = Vec::new();
        let mut c_in = in_channels;
        for (li, &c_out) in channels.iter().enumerate() {
            let mut stream = NoiseStream::new(seed, StreamDomain::FilterBank, li as u32, 0);
            let std = 1.0 / ((c_in * k * k) as f64).sqrt();
            let kernels = (0..c_out * c_in * k * k).map(|_| std * stream.next_normal()).collect();
            layers.push(BankLayer { c_in, c_out, k, kernels, activation: Activation::Tanh, pool: true });
            c_in = c_out;
        }
        FilterBank { layers, lambdas: lambdas.to_vec() }
    }

    /// Single 1×1 unit-kernel layer, linear, no pooling: the resulting
    /// feature distance is plain per-pixel MSE.
    pub fn identity(d: usize) -> Self {
        let mut kernels = vec![0.0; d * d];
        for c in 0..d {
            kernels[c * d + c] = 1.0;
        }
        FilterBank {
            layers: vec![BankLayer {
                c_in: d,
                c_out: d,
                k: 1,
                kernels,
                activation: Activation::Linear,
                pool: false,
            }],
            lambdas: vec![1.0],
        }
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    fn forward_tape(&self, x: &ImageGrid) -> Vec<LayerTape> {
        let mut tapes = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            let input_shape = cur.shape();
            let pre = layer.convolve(&cur);
            let act = pre.map(|v| layer.activation.apply(v));
            let post = if layer.pool { pool2(&act) } else { act };
            cur = post.clone();
            tapes.push(LayerTape { input_shape, pre, post });
        }
        tapes
    }

    /// Σ_l λ_l · mean‖bank_l(a) − bank_l(b)‖² (unscaled).
    fn distance(&self, a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
        a.check_same_shape(b)?;
        let ta = self.forward_tape(a);
        let tb = self.forward_tape(b);
        let mut total = 0.0;
        for (l, (fa, fb)) in ta.iter().zip(&tb).enumerate() {
            let sum: f64 = fa
                .post
                .data()
                .iter()
                .zip(fb.post.data())
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            total += self.lambdas[l] * sum / fa.post.numel() as f64;
        }
        Ok(total)
    }

    /// Reverse pass of `distance` w.r.t. a: each layer's direct term plus
    /// whatever flows back from deeper layers.
    fn distance_grad_a(&self, a: &ImageGrid, b: &ImageGrid) -> Result<ImageGrid> {
        a.check_same_shape(b)?;
        let ta = self.forward_tape(a);
        let tb = self.forward_tape(b);
        let mut g_next: Option<ImageGrid> = None;
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let tape = &ta[l];
            // direct gradient of this layer's distance term w.r.t. post_l
            let coeff = 2.0 * self.lambdas[l] / tape.post.numel() as f64;
            let mut g_post = tape.post.zip_map(&tb[l].post, |x, y| coeff * (x - y))?;
            if let Some(g) = g_next {
                g_post.add_scaled(1.0, &g)?;
            }
            let g_act = if layer.pool {
                pool2_backward(tape.pre.shape(), &g_post)
            } else {
                g_post
            };
            let g_pre = g_act.zip_map(&tape.pre, |g, pre| g * layer.activation.derivative(pre))?;
            g_next = Some(layer.convolve_backward(tape.input_shape, &g_pre));
        }
        Ok(g_next.expect("bank has at least one layer"))
    }
}

/// Feature distance through a frozen filter bank, with an overall scale.
pub struct FeatureLoss {
    pub bank: FilterBank,
    pub scale: f64,
}

impl FeatureLoss {
    pub fn new(bank: FilterBank, scale: f64) -> Self {
        assert!(scale > 0.0, "loss scale must be positive");
        FeatureLoss { bank, scale }
    }

    /// Plain per-pixel MSE via the identity bank.
    pub fn mse(d: usize) -> Self {
        FeatureLoss { bank: FilterBank::identity(d), scale: 1.0 }
    }
}

impl PerceptualLoss for FeatureLoss {
    fn value(&self, a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
        Ok(self.scale * self.bank.distance(a, b)?)
    }

    fn grad_a(&self, a: &ImageGrid, b: &ImageGrid) -> Result<ImageGrid> {
        let mut g = self.bank.distance_grad_a(a, b)?;
        g.scale_in_place(self.scale);
        Ok(g)
    }

    fn scale(&self) -> f64 {
        self.scale
    }

    fn name(&self) -> &'static str {
        "feature"
    }
}
