//! Layer primitives with explicit forward caches and exact backward passes.

use ndarray::{Array1, Array2, Array4};
use rand::Rng;

/// Strided 2D convolution with TensorFlow-style "same" zero padding.
///
/// Weights are stored flattened as `(out_c, in_c * kh * kw)` so both the
/// forward pass and the weight gradient are single GEMM calls against the
/// im2col matrix.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub in_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
}

pub struct ConvCache {
    col: Array2<f64>,
    in_shape: (usize, usize, usize, usize),
    out_hw: (usize, usize),
}

fn same_pad(in_dim: usize, out_dim: usize, k: usize, stride: usize) -> usize {
    let needed = (out_dim - 1) * stride + k;
    needed.saturating_sub(in_dim) / 2
}

impl Conv2d {
    pub fn out_c(&self) -> usize {
        self.weight.nrows()
    }

    /// Output spatial size under "same" padding: `ceil(in / stride)`.
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(self.stride), w.div_ceil(self.stride))
    }

    fn im2col(&self, x: &Array4<f64>) -> (Array2<f64>, (usize, usize)) {
        let (b, c, h, w) = x.dim();
        let (oh, ow) = self.out_hw(h, w);
        let (kh, kw, s) = (self.kh, self.kw, self.stride);
        let pad_y = same_pad(h, oh, kh, s) as isize;
        let pad_x = same_pad(w, ow, kw, s) as isize;
        let k = c * kh * kw;
        let mut col = Array2::<f64>::zeros((b * oh * ow, k));
        let xs = x.as_slice().expect("standard layout");
        let cs = col.as_slice_mut().expect("standard layout");
        for bi in 0..b {
            for oy in 0..oh {
                let iy0 = (oy * s) as isize - pad_y;
                for ox in 0..ow {
                    let ix0 = (ox * s) as isize - pad_x;
                    let row = ((bi * oh + oy) * ow + ox) * k;
                    for ci in 0..c {
                        let xbase = (bi * c + ci) * h * w;
                        let rbase = row + ci * kh * kw;
                        for ky in 0..kh {
                            let iy = iy0 + ky as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = xbase + iy as usize * w;
                            let rrow = rbase + ky * kw;
                            for kx in 0..kw {
                                let ix = ix0 + kx as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                cs[rrow + kx] = xs[xrow + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        (col, (oh, ow))
    }

    pub fn forward(&self, x: &Array4<f64>) -> (Array4<f64>, ConvCache) {
        let (b, _, _, _) = x.dim();
        let (col, (oh, ow)) = self.im2col(x);
        let mut flat = col.dot(&self.weight.t()); // (b*oh*ow, out_c)
        for mut row in flat.rows_mut() {
            row += &self.bias;
        }
        let oc = self.out_c();
        let y = flat
            .into_shape_with_order((b, oh, ow, oc))
            .expect("shape agrees")
            .permuted_axes([0, 3, 1, 2])
            .as_standard_layout()
            .to_owned();
        (y, ConvCache { col, in_shape: x.dim(), out_hw: (oh, ow) })
    }

    /// Returns `(dx, dw, db)`.
    pub fn backward(
        &self,
        cache: &ConvCache,
        dy: &Array4<f64>,
    ) -> (Array4<f64>, Array2<f64>, Array1<f64>) {
        let (b, c, h, w) = cache.in_shape;
        let (oh, ow) = cache.out_hw;
        let oc = self.out_c();
        let dy_flat = dy
            .view()
            .permuted_axes([0, 2, 3, 1])
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order((b * oh * ow, oc))
            .expect("shape agrees");
        let dw = dy_flat.t().dot(&cache.col);
        let db = dy_flat.sum_axis(ndarray::Axis(0));
        let dcol = dy_flat.dot(&self.weight); // (b*oh*ow, k)

        let (kh, kw, s) = (self.kh, self.kw, self.stride);
        let pad_y = same_pad(h, oh, kh, s) as isize;
        let pad_x = same_pad(w, ow, kw, s) as isize;
        let k = c * kh * kw;
        let mut dx = Array4::<f64>::zeros((b, c, h, w));
        let dxs = dx.as_slice_mut().expect("standard layout");
        let dcs = dcol.as_slice().expect("standard layout");
        for bi in 0..b {
            for oy in 0..oh {
                let iy0 = (oy * s) as isize - pad_y;
                for ox in 0..ow {
                    let ix0 = (ox * s) as isize - pad_x;
                    let row = ((bi * oh + oy) * ow + ox) * k;
                    for ci in 0..c {
                        let xbase = (bi * c + ci) * h * w;
                        let rbase = row + ci * kh * kw;
                        for ky in 0..kh {
                            let iy = iy0 + ky as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = xbase + iy as usize * w;
                            let rrow = rbase + ky * kw;
                            for kx in 0..kw {
                                let ix = ix0 + kx as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                dxs[xrow + ix as usize] += dcs[rrow + kx];
                            }
                        }
                    }
                }
            }
        }
        (dx, dw, db)
    }
}

/// 2x2 max pooling with stride 2 and ceil-mode edges, so odd dimensions pool
/// their trailing partial window instead of erroring.
#[derive(Debug, Clone, Default)]
pub struct MaxPool2;

pub struct PoolCache {
    argmax: Vec<u32>,
    in_shape: (usize, usize, usize, usize),
    out_hw: (usize, usize),
}

impl MaxPool2 {
    pub fn out_hw(h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(2), w.div_ceil(2))
    }

    pub fn forward(&self, x: &Array4<f64>) -> (Array4<f64>, PoolCache) {
        let (b, c, h, w) = x.dim();
        let (oh, ow) = Self::out_hw(h, w);
        let mut y = Array4::<f64>::zeros((b, c, oh, ow));
        let mut argmax = vec![0u32; b * c * oh * ow];
        let xs = x.as_slice().expect("standard layout");
        let ys = y.as_slice_mut().expect("standard layout");
        for bc in 0..b * c {
            let xbase = bc * h * w;
            let ybase = bc * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for y_in in (2 * oy)..(2 * oy + 2).min(h) {
                        for x_in in (2 * ox)..(2 * ox + 2).min(w) {
                            let idx = y_in * w + x_in;
                            let v = xs[xbase + idx];
                            if v > best {
                                best = v;
                                best_idx = idx;
                            }
                        }
                    }
                    ys[ybase + oy * ow + ox] = best;
                    argmax[ybase + oy * ow + ox] = best_idx as u32;
                }
            }
        }
        (y, PoolCache { argmax, in_shape: (b, c, h, w), out_hw: (oh, ow) })
    }

    pub fn backward(&self, cache: &PoolCache, dy: &Array4<f64>) -> Array4<f64> {
        let (b, c, h, w) = cache.in_shape;
        let (oh, ow) = cache.out_hw;
        let mut dx = Array4::<f64>::zeros((b, c, h, w));
        let dxs = dx.as_slice_mut().expect("standard layout");
        let dys = dy.as_slice().expect("standard layout");
        for bc in 0..b * c {
            let xbase = bc * h * w;
            let ybase = bc * oh * ow;
            for i in 0..oh * ow {
                dxs[xbase + cache.argmax[ybase + i] as usize] += dys[ybase + i];
            }
        }
        dx
    }
}

/// Fully connected layer, `y = x W^T + b`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

pub struct DenseCache {
    x: Array2<f64>,
}

impl Dense {
    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, DenseCache) {
        let mut y = x.dot(&self.weight.t());
        // dot's k = 1 fast path yields column-major output
        if y.as_slice().is_none() {
            y = y.as_standard_layout().to_owned();
        }
        for mut row in y.rows_mut() {
            row += &self.bias;
        }
        (y, DenseCache { x: x.clone() })
    }

    /// Returns `(dx, dw, db)`.
    pub fn backward(
        &self,
        cache: &DenseCache,
        dy: &Array2<f64>,
    ) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
        let dw = dy.t().dot(&cache.x);
        let db = dy.sum_axis(ndarray::Axis(0));
        let dx = dy.dot(&self.weight);
        (dx, dw, db)
    }
}

/// ReLU over a 2D activation; the cache is the positive mask.
pub fn relu2(x: &mut Array2<f64>) -> Vec<bool> {
    let xs = x.as_slice_mut().expect("standard layout");
    let mut mask = vec![false; xs.len()];
    for (v, m) in xs.iter_mut().zip(&mut mask) {
        if *v > 0.0 {
            *m = true;
        } else {
            *v = 0.0;
        }
    }
    mask
}

pub fn relu2_backward(dy: &mut Array2<f64>, mask: &[bool]) {
    for (d, m) in dy.as_slice_mut().expect("standard layout").iter_mut().zip(mask) {
        if !*m {
            *d = 0.0;
        }
    }
}

pub fn relu4(x: &mut Array4<f64>) -> Vec<bool> {
    let xs = x.as_slice_mut().expect("standard layout");
    let mut mask = vec![false; xs.len()];
    for (v, m) in xs.iter_mut().zip(&mut mask) {
        if *v > 0.0 {
            *m = true;
        } else {
            *v = 0.0;
        }
    }
    mask
}

pub fn relu4_backward(dy: &mut Array4<f64>, mask: &[bool]) {
    for (d, m) in dy.as_slice_mut().expect("standard layout").iter_mut().zip(mask) {
        if !*m {
            *d = 0.0;
        }
    }
}

/// Inverted dropout: kept units are scaled by `1/(1-rate)` during training
/// so evaluation needs no rescaling.
#[derive(Debug, Clone)]
pub struct Dropout {
    pub rate: f64,
}

impl Dropout {
    /// Train-mode forward. Returns the applied mask for the backward pass.
    pub fn forward_train(&self, x: &mut Array2<f64>, rng: &mut impl Rng) -> Vec<bool> {
        let keep = 1.0 - self.rate;
        let scale = 1.0 / keep;
        let xs = x.as_slice_mut().expect("standard layout");
        let mut mask = vec![false; xs.len()];
        for (v, m) in xs.iter_mut().zip(&mut mask) {
            if rng.random::<f64>() < keep {
                *m = true;
                *v *= scale;
            } else {
                *v = 0.0;
            }
        }
        mask
    }

    pub fn backward(&self, dy: &mut Array2<f64>, mask: &[bool]) {
        let scale = 1.0 / (1.0 - self.rate);
        for (d, m) in dy.as_slice_mut().expect("standard layout").iter_mut().zip(mask) {
            if *m {
                *d *= scale;
            } else {
                *d = 0.0;
            }
        }
    }
}
