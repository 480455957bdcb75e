//! Window geometry over the panorama and the latent-average fusion step.
//!
//! Windows are full-height slices placed at multiples of `stride` along the
//! width; `crop` and `paste` are the panorama↔window maps, and
//! `fuse_average` averages pasted windows by per-cell overlap count. Fusion
//! runs once per denoising step and is the synchronization barrier of the
//! whole engine.

use crate::error::{Error, Result};
use crate::grid::ImageGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Anchor {
    /// floor(n_windows / 2)
    Center,
    Index(usize),
}

#[derive(Debug, Clone)]
pub struct WindowLayout {
    h_z: usize,
    w_z: usize,
    d: usize,
    w_x: usize,
    stride: usize,
    n_windows: usize,
    anchor_index: usize,
    /// Overlap counts per panorama column. Windows span the full height, so
    /// the H_z×W_z count grid is constant down each column; this is that
    /// grid stored once per column.
    col_counts: Vec<u32>,
}

impl WindowLayout {
    pub fn panorama_shape(&self) -> (usize, usize, usize) {
        (self.h_z, self.w_z, self.d)
    }

    pub fn window_shape(&self) -> (usize, usize, usize) {
        (self.h_z, self.w_x, self.d)
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn n_windows(&self) -> usize {
        self.n_windows
    }

    pub fn anchor_index(&self) -> usize {
        self.anchor_index
    }

    /// Leftmost panorama column of window i.
    pub fn window_start(&self, i: usize) -> usize {
        i * self.stride
    }

    pub fn overlap_count(&self, x: usize) -> u32 {
        self.col_counts[x]
    }

    /// The full H_z×W_z×1 overlap-count grid (handy for brute-force checks).
    pub fn overlap_grid(&self) -> ImageGrid {
        ImageGrid::from_fn(self.h_z, self.w_z, 1, |_, x, _| self.col_counts[x] as f64)
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.n_windows {
            return Err(Error::Range(format!("window index {} outside 0..{}", i, self.n_windows)));
        }
        Ok(())
    }

    fn check_panorama(&self, z: &ImageGrid) -> Result<()> {
        if z.shape() != self.panorama_shape() {
            return Err(Error::Shape {
                expected: format!("panorama {:?}", self.panorama_shape()),
                got: format!("{:?}", z.shape()),
            });
        }
        Ok(())
    }

    fn check_window(&self, x: &ImageGrid) -> Result<()> {
        if x.shape() != self.window_shape() {
            return Err(Error::Shape {
                expected: format!("window {:?}", self.window_shape()),
                got: format!("{:?}", x.shape()),
            });
        }
        Ok(())
    }
}

/// A run's windows, in layout order.
pub type WindowSet = Vec<ImageGrid>;

pub fn make_layout(
    h_z: usize,
    w_z: usize,
    d: usize,
    h_x: usize,
    w_x: usize,
    stride: usize,
    anchor: Anchor,
) -> Result<WindowLayout> {
    if h_z == 0 || w_z == 0 || d == 0 || h_x == 0 || w_x == 0 {
        return Err(Error::Geometry("all layout dimensions must be positive".into()));
    }
    if h_x != h_z {
        return Err(Error::Geometry(format!(
            "windows must span the panorama height (H_x = {} vs H_z = {}); transpose for vertical panoramas",
            h_x, h_z
        )));
    }
    if w_x > w_z {
        return Err(Error::Geometry(format!("window width {} exceeds panorama width {}", w_x, w_z)));
    }
    if stride == 0 {
        return Err(Error::Geometry("stride must be >= 1".into()));
    }
    if (w_z - w_x) % stride != 0 {
        return Err(Error::Geometry(format!(
            "(W_z - W_x) = {} is not a multiple of stride {}; ragged last windows are not supported",
            w_z - w_x,
            stride
        )));
    }
    let n_windows = (w_z - w_x) / stride + 1;
    let anchor_index = match anchor {
        Anchor::Center => n_windows / 2,
        Anchor::Index(k) => {
            if k >= n_windows {
                return Err(Error::Geometry(format!(
                    "anchor index {} outside 0..{}",
                    k, n_windows
                )));
            }
            k
        }
    };
    let mut col_counts = vec![0u32; w_z];
    for i in 0..n_windows {
        for x in i * stride..i * stride + w_x {
            col_counts[x] += 1;
        }
    }
    if col_counts.iter().any(|&c| c == 0) {
        return Err(Error::Geometry(format!(
            "stride {} leaves panorama columns uncovered (window width {})",
            stride, w_x
        )));
    }
    Ok(WindowLayout { h_z, w_z, d, w_x, stride, n_windows, anchor_index, col_counts })
}

/// T_{z→i}: the W_x-wide slice of the panorama starting at column i·stride.
pub fn crop(z: &ImageGrid, layout: &WindowLayout, i: usize) -> Result<ImageGrid> {
    layout.check_index(i)?;
    layout.check_panorama(z)?;
    let (h, w_x, d) = layout.window_shape();
    let x0 = layout.window_start(i);
    Ok(ImageGrid::from_fn(h, w_x, d, |y, x, c| z.get(y, x0 + x, c)))
}

/// T_{i→z}: embed a window at its panorama position, zero elsewhere.
pub fn paste(x: &ImageGrid, layout: &WindowLayout, i: usize) -> Result<ImageGrid> {
    layout.check_index(i)?;
    layout.check_window(x)?;
    let (h_z, w_z, d) = layout.panorama_shape();
    let mut z = ImageGrid::zeros(h_z, w_z, d);
    let x0 = layout.window_start(i);
    for y in 0..h_z {
        for xx in 0..layout.w_x {
            for c in 0..d {
                z.set(y, x0 + xx, c, x.get(y, xx, c));
            }
        }
    }
    Ok(z)
}

/// Latent-average fusion: z = Σ_i T_{i→z}(x^(i)) / overlap_count.
///
/// Accumulation visits windows in ascending index order, so every panorama
/// cell sums its contributions in a fixed order — results are bitwise
/// reproducible and independent of any outer parallelism.
pub fn fuse_average(ws: &[ImageGrid], layout: &WindowLayout) -> Result<ImageGrid> {
    let order: Vec<usize> = (0..layout.n_windows).collect();
    fuse_average_ordered(ws, layout, &order)
}

/// Fusion with an explicit accumulation order over windows. The mean is
/// mathematically order-independent; the canonical entry point pins
/// ascending order for bitwise stability.
fn fuse_average_ordered(ws: &[ImageGrid], layout: &WindowLayout, order: &[usize]) -> Result<ImageGrid> {
    if ws.len() != layout.n_windows {
        return Err(Error::Shape {
            expected: format!("{} windows", layout.n_windows),
            got: format!("{}", ws.len()),
        });
    }
    for w in ws {
        layout.check_window(w)?;
    }
    let (h_z, w_z, d) = layout.panorama_shape();
    let mut acc = ImageGrid::zeros(h_z, w_z, d);
    for &i in order {
        let win = &ws[i];
        let x0 = layout.window_start(i);
        for y in 0..h_z {
            for xx in 0..layout.w_x {
                for c in 0..d {
                    let idx = acc.idx(y, x0 + xx, c);
                    acc.data_mut()[idx] += win.get(y, xx, c);
                }
            }
        }
    }
    for y in 0..h_z {
        for x in 0..w_z {
            let count = layout.col_counts[x] as f64;
            for c in 0..d {
                let idx = acc.idx(y, x, c);
                acc.data_mut()[idx] /= count;
            }
        }
    }
    Ok(acc)
}

/// Crop every window back out of the panorama.
pub fn scatter(z: &ImageGrid, layout: &WindowLayout) -> Result<WindowSet> {
    (0..layout.n_windows).map(|i| crop(z, layout, i)).collect()
}
