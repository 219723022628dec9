//! Layer kinds used by the two branches: batch normalization, "same" padded
//! 2D convolution, non-overlapping average pooling, tanh, and a reset-after
//! GRU that returns its final hidden state.
//!
//! Per-sample layouts are channels-last: `[H, W, C]` for image-like input,
//! `[T, F]` for sequences. Forward passes are pure; batch-norm statistics
//! gathered in training mode come back as [`BatchStats`] and are applied
//! to the running averages only through [`BatchNorm::update_running`].

use nalgebra::{DMatrixView, DMatrixViewMut};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{Param, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    BatchNorm,
    Conv2d { filters: usize, kernel: [usize; 2] },
    AvgPool2d { pool: [usize; 2] },
    Tanh,
    Gru { units: usize },
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::BatchNorm => "batch_norm",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::AvgPool2d { .. } => "avg_pool2d",
            LayerSpec::Tanh => "tanh",
            LayerSpec::Gru { .. } => "gru",
        }
    }
}

/// Per-channel batch statistics from a training-mode pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BatchNormConfig {
    pub momentum: f64,
    pub eps: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        BatchNormConfig {
            momentum: 0.9,
            eps: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub cfg: BatchNormConfig,
}

pub struct BatchNormCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    mode: Mode,
}

impl BatchNorm {
    pub fn new(prefix: &str, channels: usize, cfg: BatchNormConfig) -> Self {
        BatchNorm {
            gamma: Param::filled(format!("{prefix}.gamma"), vec![channels], 1.0),
            beta: Param::zeros(format!("{prefix}.beta"), vec![channels]),
            running_mean: Param::zeros(format!("{prefix}.running_mean"), vec![channels]),
            running_var: Param::filled(format!("{prefix}.running_var"), vec![channels], 1.0),
            cfg,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> (Tensor, BatchNormCache, Option<BatchStats>) {
        let c = self.channels();
        let m = x.data.len() / c;
        let (mean, var_biased, stats) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; c];
                for row in x.data.chunks_exact(c) {
                    for (s, v) in mean.iter_mut().zip(row) {
                        *s += v;
                    }
                }
                mean.iter_mut().for_each(|s| *s /= m as f64);
                let mut var = vec![0.0; c];
                for row in x.data.chunks_exact(c) {
                    for ((s, v), mu) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (v - mu) * (v - mu);
                    }
                }
                let unbiased = var
                    .iter()
                    .map(|s| if m > 1 { s / (m - 1) as f64 } else { 0.0 })
                    .collect();
                var.iter_mut().for_each(|s| *s /= m as f64);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            Mode::Eval => (
                self.running_mean.value.clone(),
                self.running_var.value.clone(),
                None,
            ),
        };
        let inv_std: Vec<f64> = var_biased
            .iter()
            .map(|v| 1.0 / (v + self.cfg.eps).sqrt())
            .collect();
        let mut xhat = vec![0.0; x.data.len()];
        let mut out = vec![0.0; x.data.len()];
        for ((row, xh), o) in x
            .data
            .chunks_exact(c)
            .zip(xhat.chunks_exact_mut(c))
            .zip(out.chunks_exact_mut(c))
        {
            for j in 0..c {
                xh[j] = (row[j] - mean[j]) * inv_std[j];
                o[j] = self.gamma.value[j] * xh[j] + self.beta.value[j];
            }
        }
        (
            Tensor::new(x.shape.clone(), out),
            BatchNormCache {
                xhat,
                inv_std,
                mode,
            },
            stats,
        )
    }

    /// Returns the input gradient and `[dgamma, dbeta]`.
    pub fn backward(&self, cache: &BatchNormCache, grad: &Tensor) -> (Tensor, Vec<Vec<f64>>) {
        let c = self.channels();
        let m = grad.data.len() / c;
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for (g, xh) in grad.data.chunks_exact(c).zip(cache.xhat.chunks_exact(c)) {
            for j in 0..c {
                dgamma[j] += g[j] * xh[j];
                dbeta[j] += g[j];
            }
        }
        let mut dx = vec![0.0; grad.data.len()];
        match cache.mode {
            Mode::Eval => {
                for (d, g) in dx.chunks_exact_mut(c).zip(grad.data.chunks_exact(c)) {
                    for j in 0..c {
                        d[j] = g[j] * self.gamma.value[j] * cache.inv_std[j];
                    }
                }
            }
            Mode::Train => {
                // dxhat = g * gamma; sums of dxhat and dxhat * xhat are
                // dbeta * gamma and dgamma * gamma.
                let mf = m as f64;
                for ((d, g), xh) in dx
                    .chunks_exact_mut(c)
                    .zip(grad.data.chunks_exact(c))
                    .zip(cache.xhat.chunks_exact(c))
                {
                    for j in 0..c {
                        let gam = self.gamma.value[j];
                        d[j] = cache.inv_std[j] / mf
                            * (mf * g[j] * gam - dbeta[j] * gam - xh[j] * dgamma[j] * gam);
                    }
                }
            }
        }
        (Tensor::new(grad.shape.clone(), dx), vec![dgamma, dbeta])
    }

    /// Replaces the running averages outright.
    pub fn set_running(&mut self, stats: &BatchStats) {
        self.running_mean.value.copy_from_slice(&stats.mean);
        self.running_var.value.copy_from_slice(&stats.var);
    }

    pub fn update_running(&mut self, stats: &BatchStats) {
        let mom = self.cfg.momentum;
        for (r, s) in self.running_mean.value.iter_mut().zip(&stats.mean) {
            *r = mom * *r + (1.0 - mom) * s;
        }
        for (r, s) in self.running_var.value.iter_mut().zip(&stats.var) {
            *r = mom * *r + (1.0 - mom) * s;
        }
    }
}

fn glorot_uniform<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize, p: &mut Param) {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    for v in &mut p.value {
        *v = rng.random_range(-limit..limit);
    }
}

/// 2D convolution with "same" zero padding (extra padding at the bottom and
/// right for even kernels) and a bias per output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `[kh, kw, c_in, c_out]`
    pub kernel: Param,
    pub bias: Param,
}

pub struct Conv2dCache {
    input: Tensor,
}

impl Conv2d {
    pub fn new<R: Rng>(prefix: &str, kernel: [usize; 2], c_in: usize, filters: usize, rng: &mut R) -> Self {
        let [kh, kw] = kernel;
        let mut k = Param::zeros(format!("{prefix}.kernel"), vec![kh, kw, c_in, filters]);
        glorot_uniform(rng, kh * kw * c_in, kh * kw * filters, &mut k);
        Conv2d {
            kernel: k,
            bias: Param::zeros(format!("{prefix}.bias"), vec![filters]),
        }
    }

    fn dims(&self) -> (usize, usize, usize, usize) {
        let s = &self.kernel.shape;
        (s[0], s[1], s[2], s[3])
    }

    /// Output columns `ox` whose input column `ox + kx − pad` is in range.
    fn valid_cols(w: usize, kx: usize, pl: usize) -> (usize, usize) {
        let lo = pl.saturating_sub(kx);
        let hi = (w + pl).saturating_sub(kx).min(w);
        (lo, hi.max(lo))
    }

    fn forward_direct(&self, inp: &[f64], h: usize, w: usize, out: &mut [f64]) {
        let (kh, kw, cin, cout) = self.dims();
        let (pt, pl) = ((kh - 1) / 2, (kw - 1) / 2);
        for px in out.chunks_exact_mut(cout) {
            px.copy_from_slice(&self.bias.value);
        }
        let kern = &self.kernel.value;
        for oy in 0..h {
            let out_row = &mut out[oy * w * cout..(oy + 1) * w * cout];
            for ky in 0..kh {
                let Some(iy) = (oy + ky).checked_sub(pt).filter(|&iy| iy < h) else {
                    continue;
                };
                for kx in 0..kw {
                    let (lo, hi) = Self::valid_cols(w, kx, pl);
                    if lo == hi {
                        continue;
                    }
                    let wk = &kern[(ky * kw + kx) * cin * cout..(ky * kw + kx + 1) * cin * cout];
                    let ix0 = lo + kx - pl;
                    let src = &inp[(iy * w + ix0) * cin..(iy * w + ix0 + hi - lo) * cin];
                    let dst = &mut out_row[lo * cout..hi * cout];
                    for (o, x) in dst.chunks_exact_mut(cout).zip(src.chunks_exact(cin)) {
                        for (&v, wrow) in x.iter().zip(wk.chunks_exact(cout)) {
                            for (acc, &wv) in o.iter_mut().zip(wrow) {
                                *acc += v * wv;
                            }
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_direct(
        &self,
        inp: &[f64],
        grad: &[f64],
        h: usize,
        w: usize,
        dk: &mut [f64],
        db: &mut [f64],
        dx: &mut [f64],
    ) {
        let (kh, kw, cin, cout) = self.dims();
        let (pt, pl) = ((kh - 1) / 2, (kw - 1) / 2);
        for px in grad.chunks_exact(cout) {
            for (d, g) in db.iter_mut().zip(px) {
                *d += g;
            }
        }
        let kern = &self.kernel.value;
        for oy in 0..h {
            let g_row = &grad[oy * w * cout..(oy + 1) * w * cout];
            for ky in 0..kh {
                let Some(iy) = (oy + ky).checked_sub(pt).filter(|&iy| iy < h) else {
                    continue;
                };
                for kx in 0..kw {
                    let (lo, hi) = Self::valid_cols(w, kx, pl);
                    if lo == hi {
                        continue;
                    }
                    let off = (ky * kw + kx) * cin * cout;
                    let wk = &kern[off..off + cin * cout];
                    let dwk = &mut dk[off..off + cin * cout];
                    let ix0 = lo + kx - pl;
                    let range = (iy * w + ix0) * cin..(iy * w + ix0 + hi - lo) * cin;
                    let src = &inp[range.clone()];
                    let dsrc = &mut dx[range];
                    let g = &g_row[lo * cout..hi * cout];
                    for ((gp, x), dxp) in g.chunks_exact(cout).zip(src.chunks_exact(cin)).zip(dsrc.chunks_exact_mut(cin)) {
                        for ci in 0..cin {
                            let v = x[ci];
                            let wrow = &wk[ci * cout..(ci + 1) * cout];
                            let drow = &mut dwk[ci * cout..(ci + 1) * cout];
                            let mut acc = 0.0;
                            for co in 0..cout {
                                drow[co] += v * gp[co];
                                acc += wrow[co] * gp[co];
                            }
                            dxp[ci] += acc;
                        }
                    }
                }
            }
        }
    }

    /// Single input channel: each output pixel accumulates all `C` filters in
    /// registers over its in-range taps.
    fn forward_c1<const C: usize>(&self, inp: &[f64], h: usize, w: usize, out: &mut [f64]) {
        let (kh, kw, _, _) = self.dims();
        let (pt, pl) = ((kh - 1) / 2, (kw - 1) / 2);
        let kern = &self.kernel.value;
        let bias: [f64; C] = self.bias.value[..].try_into().expect("bias length");
        for oy in 0..h {
            let (ky0, ky1) = (pt.saturating_sub(oy), kh.min(h + pt - oy));
            for ox in 0..w {
                let (kx0, kx1) = (pl.saturating_sub(ox), kw.min(w + pl - ox));
                let mut acc = bias;
                for ky in ky0..ky1 {
                    let iy = oy + ky - pt;
                    for kx in kx0..kx1 {
                        let v = inp[iy * w + ox + kx - pl];
                        let wk: &[f64; C] = kern[(ky * kw + kx) * C..][..C].try_into().unwrap();
                        for c in 0..C {
                            acc[c] += v * wk[c];
                        }
                    }
                }
                out[(oy * w + ox) * C..][..C].copy_from_slice(&acc);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_c1<const C: usize>(
        &self,
        inp: &[f64],
        grad: &[f64],
        h: usize,
        w: usize,
        dk: &mut [f64],
        db: &mut [f64],
        dx: &mut [f64],
    ) {
        let (kh, kw, _, _) = self.dims();
        let (pt, pl) = ((kh - 1) / 2, (kw - 1) / 2);
        let kern = &self.kernel.value;
        let mut dbias = [0.0; C];
        for oy in 0..h {
            let (ky0, ky1) = (pt.saturating_sub(oy), kh.min(h + pt - oy));
            for ox in 0..w {
                let (kx0, kx1) = (pl.saturating_sub(ox), kw.min(w + pl - ox));
                let g: &[f64; C] = grad[(oy * w + ox) * C..][..C].try_into().unwrap();
                for c in 0..C {
                    dbias[c] += g[c];
                }
                for ky in ky0..ky1 {
                    let iy = oy + ky - pt;
                    for kx in kx0..kx1 {
                        let ix = iy * w + ox + kx - pl;
                        let v = inp[ix];
                        let tap = (ky * kw + kx) * C;
                        let wk: &[f64; C] = kern[tap..][..C].try_into().unwrap();
                        let dwk: &mut [f64; C] = (&mut dk[tap..][..C]).try_into().unwrap();
                        let mut acc = 0.0;
                        for c in 0..C {
                            dwk[c] += v * g[c];
                            acc += wk[c] * g[c];
                        }
                        dx[ix] += acc;
                    }
                }
            }
        }
        for (d, v) in db.iter_mut().zip(dbias) {
            *d += v;
        }
    }

    /// Unrolls the receptive fields of one sample into `[h·w, kh·kw·c_in]`,
    /// zero where the window hangs over the border.
    fn im2col(&self, inp: &[f64], h: usize, w: usize, cols: &mut [f64]) {
        let (kh, kw, cin, _) = self.dims();
        let (pt, pl) = ((kh - 1) / 2, (kw - 1) / 2);
        let k = kh * kw * cin;
        cols.fill(0.0);
        for oy in 0..h {
            for ky in 0..kh {
                let Some(iy) = (oy + ky).checked_sub(pt).filter(|&iy| iy < h) else {
                    continue;
                };
                for kx in 0..kw {
                    let (lo, hi) = Self::valid_cols(w, kx, pl);
                    let off = (ky * kw + kx) * cin;
                    for ox in lo..hi {
                        let ix = ox + kx - pl;
                        let row = (oy * w + ox) * k + off;
                        cols[row..row + cin].copy_from_slice(&inp[(iy * w + ix) * cin..(iy * w + ix + 1) * cin]);
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], h: usize, w: usize, dx: &mut [f64]) {
        let (kh, kw, cin, _) = self.dims();
        let (pt, pl) = ((kh - 1) / 2, (kw - 1) / 2);
        let k = kh * kw * cin;
        for oy in 0..h {
            for ky in 0..kh {
                let Some(iy) = (oy + ky).checked_sub(pt).filter(|&iy| iy < h) else {
                    continue;
                };
                for kx in 0..kw {
                    let (lo, hi) = Self::valid_cols(w, kx, pl);
                    let off = (ky * kw + kx) * cin;
                    for ox in lo..hi {
                        let ix = ox + kx - pl;
                        let row = (oy * w + ox) * k + off;
                        let d = &mut dx[(iy * w + ix) * cin..(iy * w + ix + 1) * cin];
                        for (a, b) in d.iter_mut().zip(&cols[row..row + cin]) {
                            *a += b;
                        }
                    }
                }
            }
        }
    }

    // Row-major `[K, c_out]` kernels and `[P, c]` images read as column-major
    // `c_out × K` and `c × P` matrices, so both products need no transposes.
    fn forward_gemm(&self, inp: &[f64], h: usize, w: usize, out: &mut [f64]) {
        let (kh, kw, cin, cout) = self.dims();
        let (k, p) = (kh * kw * cin, h * w);
        let mut cols = vec![0.0; p * k];
        self.im2col(inp, h, w, &mut cols);
        for px in out.chunks_exact_mut(cout) {
            px.copy_from_slice(&self.bias.value);
        }
        let wm = DMatrixView::from_slice(&self.kernel.value, cout, k);
        let cm = DMatrixView::from_slice(&cols, k, p);
        DMatrixViewMut::from_slice(out, cout, p).gemm(1.0, &wm, &cm, 1.0);
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_gemm(
        &self,
        inp: &[f64],
        grad: &[f64],
        h: usize,
        w: usize,
        dk: &mut [f64],
        db: &mut [f64],
        dx: &mut [f64],
    ) {
        let (kh, kw, cin, cout) = self.dims();
        let (k, p) = (kh * kw * cin, h * w);
        let mut cols = vec![0.0; p * k];
        self.im2col(inp, h, w, &mut cols);
        for px in grad.chunks_exact(cout) {
            for (d, g) in db.iter_mut().zip(px) {
                *d += g;
            }
        }
        let gm = DMatrixView::from_slice(grad, cout, p);
        let cols_t = DMatrixView::from_slice_with_strides(&cols, p, k, k, 1);
        DMatrixViewMut::from_slice(dk, cout, k).gemm(1.0, &gm, &cols_t, 1.0);
        let wm = DMatrixView::from_slice(&self.kernel.value, cout, k);
        DMatrixViewMut::from_slice(&mut cols, k, p).gemm_tr(1.0, &wm, &gm, 0.0);
        self.col2im(&cols, h, w, dx);
    }

    /// One sample: `inp` is `[h, w, c_in]`, `out` is `[h, w, c_out]`.
    pub fn forward_sample(&self, inp: &[f64], h: usize, w: usize, out: &mut [f64]) {
        if self.dims().2 == 1 && self.dims().3 == 8 {
            self.forward_c1::<8>(inp, h, w, out)
        } else if self.dims().2 == 1 {
            self.forward_direct(inp, h, w, out)
        } else {
            self.forward_gemm(inp, h, w, out)
        }
    }

    /// One sample's backward pass; accumulates into `dk`, `db` and `dx`.
    #[allow(clippy::too_many_arguments)]
    pub fn backward_sample(
        &self,
        inp: &[f64],
        grad: &[f64],
        h: usize,
        w: usize,
        dk: &mut [f64],
        db: &mut [f64],
        dx: &mut [f64],
    ) {
        if self.dims().2 == 1 && self.dims().3 == 8 {
            self.backward_c1::<8>(inp, grad, h, w, dk, db, dx)
        } else if self.dims().2 == 1 {
            self.backward_direct(inp, grad, h, w, dk, db, dx)
        } else {
            self.backward_gemm(inp, grad, h, w, dk, db, dx)
        }
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, Conv2dCache) {
        let cout = self.dims().3;
        let (n, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
        let mut out = vec![0.0; n * h * w * cout];
        for (s, o) in out.chunks_exact_mut(h * w * cout).enumerate() {
            self.forward_sample(x.sample(s), h, w, o);
        }
        (
            Tensor::new(vec![n, h, w, cout], out),
            Conv2dCache { input: x.clone() },
        )
    }

    /// Returns the input gradient and `[dkernel, dbias]`.
    pub fn backward(&self, cache: &Conv2dCache, grad: &Tensor) -> (Tensor, Vec<Vec<f64>>) {
        let cout = self.dims().3;
        let x = &cache.input;
        let (n, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
        let mut dk = vec![0.0; self.kernel.len()];
        let mut db = vec![0.0; cout];
        let mut dx = vec![0.0; x.data.len()];
        let per = x.sample_len();
        for s in 0..n {
            self.backward_sample(x.sample(s), grad.sample(s), h, w, &mut dk, &mut db, &mut dx[s * per..(s + 1) * per]);
        }
        (Tensor::new(x.shape.clone(), dx), vec![dk, db])
    }
}

/// Average over non-overlapping `ph × pw` windows; trailing rows or columns
/// that do not fill a window are dropped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AvgPool2d {
    pub pool: [usize; 2],
}

impl AvgPool2d {
    pub fn output_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (h / self.pool[0], w / self.pool[1])
    }

    /// One sample: `[h, w, c]` to `[h / ph, w / pw, c]`.
    pub fn forward_sample(&self, inp: &[f64], h: usize, w: usize, c: usize, out: &mut [f64]) {
        let [ph, pw] = self.pool;
        let (oh, ow) = self.output_dims(h, w);
        let scale = 1.0 / (ph * pw) as f64;
        out.fill(0.0);
        for iy in 0..oh * ph {
            let o_row = &mut out[(iy / ph) * ow * c..(iy / ph + 1) * ow * c];
            let i_row = &inp[iy * w * c..(iy * w + ow * pw) * c];
            for (o, block) in o_row.chunks_exact_mut(c).zip(i_row.chunks_exact(pw * c)) {
                for pix in block.chunks_exact(c) {
                    for (acc, v) in o.iter_mut().zip(pix) {
                        *acc += v;
                    }
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= scale);
    }

    /// One sample's input gradient; cells outside every window get zero.
    pub fn backward_sample(&self, grad: &[f64], h: usize, w: usize, c: usize, dx: &mut [f64]) {
        let [ph, pw] = self.pool;
        let (oh, ow) = self.output_dims(h, w);
        let scale = 1.0 / (ph * pw) as f64;
        dx.fill(0.0);
        for iy in 0..oh * ph {
            let g_row = &grad[(iy / ph) * ow * c..(iy / ph + 1) * ow * c];
            let d_row = &mut dx[iy * w * c..(iy * w + ow * pw) * c];
            for (g, block) in g_row.chunks_exact(c).zip(d_row.chunks_exact_mut(pw * c)) {
                for pix in block.chunks_exact_mut(c) {
                    for (d, gv) in pix.iter_mut().zip(g) {
                        *d = gv * scale;
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let (n, h, w, c) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
        let (oh, ow) = self.output_dims(h, w);
        let mut out = vec![0.0; n * oh * ow * c];
        for (s, o) in out.chunks_exact_mut(oh * ow * c).enumerate() {
            self.forward_sample(x.sample(s), h, w, c, o);
        }
        Tensor::new(vec![n, oh, ow, c], out)
    }

    pub fn backward(&self, input_shape: &[usize], grad: &Tensor) -> Tensor {
        let (n, h, w, c) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
        let mut dx = vec![0.0; n * h * w * c];
        for (s, d) in dx.chunks_exact_mut(h * w * c).enumerate() {
            self.backward_sample(grad.sample(s), h, w, c, d);
        }
        Tensor::new(input_shape.to_vec(), dx)
    }
}

/// `exp(x)` for `x ≤ 0`: Cody–Waite reduction by ln 2 and a degree-13
/// Taylor polynomial on `|r| ≤ ln2/2`, accurate to a few ulp. Written
/// without libm calls or float-to-int casts so the compiler can vectorize it.
#[inline]
fn exp_nonpositive(x: f64) -> f64 {
    const LN2_HI: f64 = 6.931_471_803_691_238e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    // Adding 1.5·2⁵² rounds to an integer held in the low mantissa bits.
    const ROUND: f64 = 6_755_399_441_055_744.0;
    let x = x.max(-700.0);
    let t = x * std::f64::consts::LOG2_E + ROUND;
    let k = t - ROUND;
    let r = (x - k * LN2_HI) - k * LN2_LO;
    let mut p = 1.0 / 6_227_020_800.0;
    for c in [
        1.0 / 479_001_600.0,
        1.0 / 39_916_800.0,
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
        1.0,
    ] {
        p = p * r + c;
    }
    p * f64::from_bits(t.to_bits().wrapping_add(1023) << 52)
}

/// Hyperbolic tangent within 1e-15 of libm's.
#[inline]
pub fn tanh(x: f64) -> f64 {
    let e = exp_nonpositive(-2.0 * x.abs());
    ((1.0 - e) / (1.0 + e)).copysign(x)
}

pub fn tanh_forward(x: &Tensor) -> Tensor {
    Tensor::new(x.shape.clone(), x.data.iter().map(|&v| tanh(v)).collect())
}

pub fn tanh_backward(output: &Tensor, grad: &Tensor) -> Tensor {
    Tensor::new(
        grad.shape.clone(),
        grad.data
            .iter()
            .zip(&output.data)
            .map(|(g, y)| g * (1.0 - y * y))
            .collect(),
    )
}

fn sigmoid(x: f64) -> f64 {
    let e = exp_nonpositive(-x.abs());
    if x >= 0.0 {
        1.0 / (1.0 + e)
    } else {
        e / (1.0 + e)
    }
}

/// Gated recurrent unit with the reset gate applied after the recurrent
/// matmul and separate input/recurrent biases:
///
/// ```text
/// z = σ(x·Wz + bz + h·Uz + b'z)
/// r = σ(x·Wr + br + h·Ur + b'r)
/// n = tanh(x·Wn + bn + r ⊙ (h·Un + b'n))
/// h ← z ⊙ h + (1 − z) ⊙ n
/// ```
///
/// Gate blocks are ordered (z, r, n) along the last axis of each weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Gru {
    /// `[features, 3·units]`
    pub kernel: Param,
    /// `[units, 3·units]`
    pub recurrent: Param,
    /// `[2, 3·units]`: input bias row, then recurrent bias row.
    pub bias: Param,
}

pub struct GruCache {
    input: Tensor,
    /// Per sample and step: h_prev, z, r, n, hh (recurrent n-block before reset).
    h_prev: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    n: Vec<f64>,
    hh: Vec<f64>,
}

impl Gru {
    pub fn new<R: Rng>(prefix: &str, features: usize, units: usize, rng: &mut R) -> Self {
        let mut kernel = Param::zeros(format!("{prefix}.kernel"), vec![features, 3 * units]);
        glorot_uniform(rng, features, 3 * units, &mut kernel);
        let mut recurrent = Param::zeros(format!("{prefix}.recurrent_kernel"), vec![units, 3 * units]);
        glorot_uniform(rng, units, 3 * units, &mut recurrent);
        Gru {
            kernel,
            recurrent,
            bias: Param::zeros(format!("{prefix}.bias"), vec![2, 3 * units]),
        }
    }

    pub fn units(&self) -> usize {
        self.recurrent.shape[0]
    }

    pub fn features(&self) -> usize {
        self.kernel.shape[0]
    }

    /// One recurrence step for a single sample; returns (h, z, r, n, hh).
    pub fn step(&self, x: &[f64], h: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let u = self.units();
        let f = self.features();
        let g3 = 3 * u;
        let mut xw = self.bias.value[..g3].to_vec();
        for (i, &xi) in x.iter().enumerate().take(f) {
            if xi == 0.0 {
                continue;
            }
            let row = &self.kernel.value[i * g3..(i + 1) * g3];
            for (a, wv) in xw.iter_mut().zip(row) {
                *a += xi * wv;
            }
        }
        let mut hu = self.bias.value[g3..].to_vec();
        for (i, &hi) in h.iter().enumerate() {
            let row = &self.recurrent.value[i * g3..(i + 1) * g3];
            for (a, wv) in hu.iter_mut().zip(row) {
                *a += hi * wv;
            }
        }
        let mut z = vec![0.0; u];
        let mut r = vec![0.0; u];
        let mut n = vec![0.0; u];
        let mut out = vec![0.0; u];
        for j in 0..u {
            z[j] = sigmoid(xw[j] + hu[j]);
            r[j] = sigmoid(xw[u + j] + hu[u + j]);
            n[j] = tanh(xw[2 * u + j] + r[j] * hu[2 * u + j]);
            out[j] = z[j] * h[j] + (1.0 - z[j]) * n[j];
        }
        let hh = hu[2 * u..].to_vec();
        (out, z, r, n, hh)
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, GruCache)> {
        let (batch, steps) = (x.shape[0], x.shape[1]);
        if steps == 0 {
            return Err(Error::Shape("GRU input has zero time steps".into()));
        }
        let u = self.units();
        let f = self.features();
        let total = batch * steps * u;
        let mut cache = GruCache {
            input: x.clone(),
            h_prev: Vec::with_capacity(total),
            z: Vec::with_capacity(total),
            r: Vec::with_capacity(total),
            n: Vec::with_capacity(total),
            hh: Vec::with_capacity(total),
        };
        let mut out = Vec::with_capacity(batch * u);
        for s in 0..batch {
            let seq = x.sample(s);
            let mut h = vec![0.0; u];
            for t in 0..steps {
                let (hn, z, r, n, hh) = self.step(&seq[t * f..(t + 1) * f], &h);
                cache.h_prev.extend_from_slice(&h);
                cache.z.extend(z);
                cache.r.extend(r);
                cache.n.extend(n);
                cache.hh.extend(hh);
                h = hn;
            }
            out.extend(h);
        }
        Ok((Tensor::new(vec![batch, u], out), cache))
    }

    /// Backpropagation through time. Returns the input gradient and
    /// `[dkernel, drecurrent, dbias]`.
    pub fn backward(&self, cache: &GruCache, grad: &Tensor) -> (Tensor, Vec<Vec<f64>>) {
        let x = &cache.input;
        let (batch, steps) = (x.shape[0], x.shape[1]);
        let u = self.units();
        let f = self.features();
        let g3 = 3 * u;
        let mut dk = vec![0.0; self.kernel.len()];
        let mut dr_k = vec![0.0; self.recurrent.len()];
        let mut dbias = vec![0.0; self.bias.len()];
        let mut dx = vec![0.0; x.data.len()];
        let mut gx = vec![0.0; g3];
        let mut gh = vec![0.0; g3];
        for s in 0..batch {
            let seq = x.sample(s);
            let mut dh = grad.sample(s).to_vec();
            for t in (0..steps).rev() {
                let off = (s * steps + t) * u;
                let h_prev = &cache.h_prev[off..off + u];
                let z = &cache.z[off..off + u];
                let r = &cache.r[off..off + u];
                let n = &cache.n[off..off + u];
                let hh = &cache.hh[off..off + u];
                let mut dh_prev = vec![0.0; u];
                for j in 0..u {
                    let dz = dh[j] * (h_prev[j] - n[j]);
                    let dn = dh[j] * (1.0 - z[j]);
                    dh_prev[j] = dh[j] * z[j];
                    let da_n = dn * (1.0 - n[j] * n[j]);
                    let da_r = da_n * hh[j] * r[j] * (1.0 - r[j]);
                    let da_z = dz * z[j] * (1.0 - z[j]);
                    gx[j] = da_z;
                    gx[u + j] = da_r;
                    gx[2 * u + j] = da_n;
                    gh[j] = da_z;
                    gh[u + j] = da_r;
                    gh[2 * u + j] = da_n * r[j];
                }
                let xt = &seq[t * f..(t + 1) * f];
                let dxt = &mut dx[(s * steps + t) * f..(s * steps + t + 1) * f];
                for i in 0..f {
                    let row = &self.kernel.value[i * g3..(i + 1) * g3];
                    let drow = &mut dk[i * g3..(i + 1) * g3];
                    let xi = xt[i];
                    let mut acc = 0.0;
                    for k in 0..g3 {
                        drow[k] += xi * gx[k];
                        acc += row[k] * gx[k];
                    }
                    dxt[i] = acc;
                }
                for i in 0..u {
                    let row = &self.recurrent.value[i * g3..(i + 1) * g3];
                    let drow = &mut dr_k[i * g3..(i + 1) * g3];
                    let hi = h_prev[i];
                    let mut acc = 0.0;
                    for k in 0..g3 {
                        drow[k] += hi * gh[k];
                        acc += row[k] * gh[k];
                    }
                    dh_prev[i] += acc;
                }
                for k in 0..g3 {
                    dbias[k] += gx[k];
                    dbias[g3 + k] += gh[k];
                }
                dh = dh_prev;
            }
        }
        (Tensor::new(x.shape.clone(), dx), vec![dk, dr_k, dbias])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn conv_kernels_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (h, w) = (7, 9);
        for (cin, cout, kernel) in [(1, 8, [6, 4]), (3, 5, [3, 2]), (1, 8, [1, 1])] {
            let mut conv = Conv2d::new("c", kernel, cin, cout, &mut rng);
            conv.bias.value = random(cout, &mut rng);
            let inp = random(h * w * cin, &mut rng);
            let grad = random(h * w * cout, &mut rng);
            let mut a = vec![0.0; h * w * cout];
            let mut b = a.clone();
            conv.forward_direct(&inp, h, w, &mut a);
            conv.forward_gemm(&inp, h, w, &mut b);
            assert!(max_diff(&a, &b) < 1e-12);

            let k = conv.kernel.len();
            let run = |f: &dyn Fn(&mut [f64], &mut [f64], &mut [f64])| {
                let (mut dk, mut db, mut dx) = (vec![0.0; k], vec![0.0; cout], vec![0.0; h * w * cin]);
                f(&mut dk, &mut db, &mut dx);
                [dk, db, dx].concat()
            };
            let direct = run(&|dk, db, dx| conv.backward_direct(&inp, &grad, h, w, dk, db, dx));
            let gemm = run(&|dk, db, dx| conv.backward_gemm(&inp, &grad, h, w, dk, db, dx));
            assert!(max_diff(&direct, &gemm) < 1e-12);
            if cin == 1 && cout == 8 {
                conv.forward_c1::<8>(&inp, h, w, &mut b);
                assert!(max_diff(&a, &b) < 1e-12);
                let c1 = run(&|dk, db, dx| conv.backward_c1::<8>(&inp, &grad, h, w, dk, db, dx));
                assert!(max_diff(&direct, &c1) < 1e-12);
            }
        }
    }

    #[test]
    fn fast_tanh_matches_libm() {
        let mut worst: f64 = 0.0;
        for i in -400_000..=400_000 {
            let x = i as f64 * 5e-5;
            worst = worst.max((tanh(x) - x.tanh()).abs());
        }
        assert!(worst < 1e-15, "{worst}");
        assert_eq!(tanh(0.0), 0.0);
        assert_eq!(tanh(1e3), 1.0);
        assert_eq!(tanh(-1e3), -1.0);
        assert!((sigmoid(-800.0)).abs() < 1e-300 && sigmoid(800.0) == 1.0);
    }
}
