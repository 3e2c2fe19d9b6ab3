//! A small dilated residual convolutional noise predictor with hand-written
//! backpropagation.
//!
//! Activations are planar `C x H x W` `f32` buffers. Convolutions are 3x3,
//! zero padded, lowered to matrix products through im2col.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub(crate) const EMBED_DIM: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyArch {
    pub in_channels: usize,
    pub hidden: usize,
    /// Dilation of each hidden residual block.
    pub dilations: Vec<usize>,
    pub height: usize,
    pub width: usize,
}

impl ToyArch {
    pub fn new(size: usize, in_channels: usize) -> Self {
        Self {
            in_channels,
            hidden: 32,
            dilations: vec![1, 2, 4, 8, 1],
            height: size,
            width: size,
        }
    }

    pub(crate) fn layout(&self) -> Layout {
        let mut l = Layout::default();
        let (c, ci) = (self.hidden, self.in_channels);
        l.push("conv_in.w", vec![c, ci * 9]);
        l.push("conv_in.b", vec![c]);
        l.push("time_in.w", vec![c, EMBED_DIM]);
        l.push("global.w", vec![c, c]);
        l.push("global.b", vec![c]);
        for k in 0..self.dilations.len() {
            l.push(&format!("block{k}.w"), vec![c, c * 9]);
            l.push(&format!("block{k}.b"), vec![c]);
            l.push(&format!("block{k}.time"), vec![c, EMBED_DIM]);
        }
        l.push("conv_out.w", vec![ci, c * 9]);
        l.push("conv_out.b", vec![ci]);
        l
    }

    pub fn param_count(&self) -> usize {
        self.layout().total
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct Layout {
    pub tensors: Vec<TensorInfo>,
    pub total: usize,
}

impl Layout {
    fn push(&mut self, name: &str, shape: Vec<usize>) {
        let len = shape.iter().product();
        self.tensors.push(TensorInfo {
            name: name.to_string(),
            shape,
            offset: self.total,
            len,
        });
        self.total += len;
    }

    fn range(&self, name: &str) -> std::ops::Range<usize> {
        let t = self
            .tensors
            .iter()
            .find(|t| t.name == name)
            .unwrap_or_else(|| panic!("unknown tensor {name}"));
        t.offset..t.offset + t.len
    }
}

/// Sinusoidal embedding of a timestep normalised to a 1000-step scale.
pub(crate) fn time_embedding(t: usize, total: usize) -> [f32; EMBED_DIM] {
    let pos = t as f64 * 1000.0 / total.max(1) as f64;
    let half = EMBED_DIM / 2;
    let mut e = [0f32; EMBED_DIM];
    for k in 0..half {
        let freq = (-(1000f64.ln()) * k as f64 / half as f64).exp();
        e[k] = (pos * freq).sin() as f32;
        e[k + half] = (pos * freq).cos() as f32;
    }
    e
}

// ---------------------------------------------------------------- gemm ----

/// `c = a (m x k) * b (k x n) + beta * c`, all row-major.
fn gemm_nn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], beta: f32, c: &mut [f32]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: slice lengths are checked above; strides describe row-major
    // matrices inside those slices.
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c += a (m x k) * b^T` where `b` is stored `n x k`.
fn gemm_nt_acc(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    debug_assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    // SAFETY: as above; `b` is read transposed through its strides.
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), 1, k as isize,
            1.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c = a^T * b` where `a` is stored `k x m` and `b` is `k x n`.
fn gemm_tn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    debug_assert!(a.len() >= k * m && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: as above; `a` is read transposed through its strides.
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, 1.0,
            a.as_ptr(), 1, m as isize,
            b.as_ptr(), n as isize, 1,
            0.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

// -------------------------------------------------------------- im2col ----

fn im2col(input: &[f32], cin: usize, h: usize, w: usize, dil: usize, cols: &mut [f32]) {
    let hw = h * w;
    let d = dil as isize;
    for ci in 0..cin {
        let plane = &input[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                let dy = (ky as isize - 1) * d;
                let dx = (kx as isize - 1) * d;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x, o) in dst.iter_mut().enumerate() {
                        let sx = x as isize + dx;
                        *o = if sx < 0 || sx >= w as isize { 0.0 } else { src[sx as usize] };
                    }
                }
            }
        }
    }
}

fn col2im_acc(cols: &[f32], cin: usize, h: usize, w: usize, dil: usize, out: &mut [f32]) {
    let hw = h * w;
    let d = dil as isize;
    for ci in 0..cin {
        let plane = &mut out[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                let dy = (ky as isize - 1) * d;
                let dx = (kx as isize - 1) * d;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x, &g) in src.iter().enumerate() {
                        let sx = x as isize + dx;
                        if sx >= 0 && sx < w as isize {
                            dst[sx as usize] += g;
                        }
                    }
                }
            }
        }
    }
}

// ----------------------------------------------------------------- net ----

/// Network weights plus their layout.
#[derive(Debug, Clone)]
pub struct ToyNet {
    pub arch: ToyArch,
    pub(crate) layout: Layout,
    pub(crate) params: Vec<f32>,
}

struct Cache {
    emb: [f32; EMBED_DIM],
    cols: Vec<Vec<f32>>,
    pre: Vec<Vec<f32>>,
    pooled: Vec<f32>,
}

impl ToyNet {
    pub fn init(arch: ToyArch, rng: &mut impl rand::Rng) -> Self {
        use rand_distr::{Distribution, StandardNormal};
        let layout = arch.layout();
        let mut params = vec![0f32; layout.total];
        for t in &layout.tensors {
            let fan_in = t.shape.get(1).copied().unwrap_or(1) as f64;
            let std = if t.name.ends_with(".b") {
                0.0
            } else if t.name.starts_with("conv_out") {
                1e-2
            } else if t.name.starts_with("block") && t.name.ends_with(".w") {
                0.5 * (2.0 / fan_in).sqrt()
            } else if t.name.contains("time") || t.name.starts_with("global") {
                (1.0 / fan_in).sqrt()
            } else {
                (2.0 / fan_in).sqrt()
            };
            for p in &mut params[t.offset..t.offset + t.len] {
                let z: f64 = StandardNormal.sample(rng);
                *p = (z * std) as f32;
            }
        }
        Self { arch, layout, params }
    }

    pub(crate) fn from_params(arch: ToyArch, params: Vec<f32>) -> Result<Self> {
        let layout = arch.layout();
        if params.len() != layout.total {
            return Err(Error::Config(format!(
                "parameter count {} does not match architecture ({})",
                params.len(),
                layout.total
            )));
        }
        Ok(Self { arch, layout, params })
    }

    fn p(&self, name: &str) -> &[f32] {
        &self.params[self.layout.range(name)]
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_forward(&self, wname: &str, bname: &str, input: &[f32], cin: usize, cout: usize, dil: usize, bias_extra: Option<&[f32]>) -> (Vec<f32>, Vec<f32>) {
        let (h, w) = (self.arch.height, self.arch.width);
        let hw = h * w;
        let mut cols = vec![0f32; cin * 9 * hw];
        im2col(input, cin, h, w, dil, &mut cols);
        let mut out = vec![0f32; cout * hw];
        let bias = self.p(bname);
        for (o, chunk) in out.chunks_exact_mut(hw).enumerate() {
            let b = bias[o] + bias_extra.map_or(0.0, |e| e[o]);
            chunk.fill(b);
        }
        gemm_nn(cout, cin * 9, hw, self.p(wname), &cols, 1.0, &mut out);
        (out, cols)
    }

    fn time_bias(&self, name: &str, emb: &[f32; EMBED_DIM]) -> Vec<f32> {
        let w = self.p(name);
        w.chunks_exact(EMBED_DIM)
            .map(|row| row.iter().zip(emb).map(|(a, b)| a * b).sum())
            .collect()
    }

    fn forward_impl(&self, x: &[f32], t: usize, total_t: usize, keep: bool) -> (Vec<f32>, Option<Cache>) {
        let a = &self.arch;
        let (c, ci, hw) = (a.hidden, a.in_channels, a.height * a.width);
        let emb = time_embedding(t, total_t);
        let mut cache = Cache {
            emb,
            cols: Vec::new(),
            pre: Vec::new(),
            pooled: Vec::new(),
        };

        let tb = self.time_bias("time_in.w", &emb);
        let (z0, cols0) = self.conv_forward("conv_in.w", "conv_in.b", x, ci, c, 1, Some(&tb));
        let mut h: Vec<f32> = z0.iter().map(|v| v.max(0.0)).collect();
        let pooled: Vec<f32> = h.chunks_exact(hw).map(|p| p.iter().sum::<f32>() / hw as f32).collect();
        let gw = self.p("global.w");
        let gb = self.p("global.b");
        let global: Vec<f32> = gw
            .chunks_exact(c)
            .zip(gb)
            .map(|(row, b)| b + row.iter().zip(&pooled).map(|(p, q)| p * q).sum::<f32>())
            .collect();
        if keep {
            cache.cols.push(cols0);
            cache.pre.push(z0);
            cache.pooled = pooled;
        }

        for (k, &dil) in a.dilations.iter().enumerate() {
            let mut extra = self.time_bias(&format!("block{k}.time"), &emb);
            if k == 0 {
                extra.iter_mut().zip(&global).for_each(|(e, g)| *e += g);
            }
            let (z, cols) = self.conv_forward(&format!("block{k}.w"), &format!("block{k}.b"), &h, c, c, dil, Some(&extra));
            h.iter_mut().zip(&z).for_each(|(hv, zv)| *hv += zv.max(0.0));
            if keep {
                cache.cols.push(cols);
                cache.pre.push(z);
            }
        }

        let (out, cols) = self.conv_forward("conv_out.w", "conv_out.b", &h, c, ci, 1, None);
        if keep {
            cache.cols.push(cols);
        }
        (out, keep.then_some(cache))
    }

    /// Predicts the noise for one planar input at schedule index `t` of a
    /// `total_t`-step schedule.
    pub fn forward(&self, x: &[f32], t: usize, total_t: usize) -> Vec<f32> {
        self.forward_impl(x, t, total_t, false).0
    }

    /// Mean squared error against `target` and its parameter gradient.
    pub fn loss_and_grad(&self, x: &[f32], t: usize, total_t: usize, target: &[f32]) -> (f32, Vec<f32>) {
        let a = &self.arch;
        let (c, ci, hw) = (a.hidden, a.in_channels, a.height * a.width);
        let (out, cache) = self.forward_impl(x, t, total_t, true);
        let cache = cache.expect("cache kept");
        let n = out.len() as f32;
        let loss = out.iter().zip(target).map(|(o, t)| (o - t) * (o - t)).sum::<f32>() / n;
        let dout: Vec<f32> = out.iter().zip(target).map(|(o, t)| 2.0 * (o - t) / n).collect();

        let mut grad = vec![0f32; self.params.len()];
        let nblocks = a.dilations.len();

        // output conv
        let mut dh = self.conv_backward("conv_out.w", "conv_out.b", &cache.cols[nblocks + 1], &dout, c, ci, 1, &mut grad, true)
            .expect("input gradient requested");

        for k in (0..nblocks).rev() {
            let z = &cache.pre[k + 1];
            let dz: Vec<f32> = dh.iter().zip(z).map(|(g, zv)| if *zv > 0.0 { *g } else { 0.0 }).collect();
            let dz_sum: Vec<f32> = dz.chunks_exact(hw).map(|p| p.iter().sum()).collect();
            outer_acc(&mut grad[self.layout.range(&format!("block{k}.time"))], &dz_sum, &cache.emb);
            let din = self
                .conv_backward(&format!("block{k}.w"), &format!("block{k}.b"), &cache.cols[k + 1], &dz, c, c, a.dilations[k], &mut grad, true)
                .expect("input gradient requested");
            dh.iter_mut().zip(&din).for_each(|(g, d)| *g += d);
            if k == 0 {
                outer_acc(&mut grad[self.layout.range("global.w")], &dz_sum, &cache.pooled);
                grad[self.layout.range("global.b")]
                    .iter_mut()
                    .zip(&dz_sum)
                    .for_each(|(g, d)| *g += d);
                let gw = self.p("global.w");
                for j in 0..c {
                    let dpool: f32 = (0..c).map(|o| gw[o * c + j] * dz_sum[o]).sum::<f32>() / hw as f32;
                    dh[j * hw..(j + 1) * hw].iter_mut().for_each(|g| *g += dpool);
                }
            }
        }

        let z0 = &cache.pre[0];
        let dz0: Vec<f32> = dh.iter().zip(z0).map(|(g, zv)| if *zv > 0.0 { *g } else { 0.0 }).collect();
        let dz0_sum: Vec<f32> = dz0.chunks_exact(hw).map(|p| p.iter().sum()).collect();
        outer_acc(&mut grad[self.layout.range("time_in.w")], &dz0_sum, &cache.emb);
        self.conv_backward("conv_in.w", "conv_in.b", &cache.cols[0], &dz0, ci, c, 1, &mut grad, false);
        (loss, grad)
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        wname: &str,
        bname: &str,
        cols: &[f32],
        dz: &[f32],
        cin: usize,
        cout: usize,
        dil: usize,
        grad: &mut [f32],
        want_input: bool,
    ) -> Option<Vec<f32>> {
        let (h, w) = (self.arch.height, self.arch.width);
        let hw = h * w;
        let k = cin * 9;
        gemm_nt_acc(cout, hw, k, dz, cols, &mut grad[self.layout.range(wname)]);
        grad[self.layout.range(bname)]
            .iter_mut()
            .zip(dz.chunks_exact(hw))
            .for_each(|(g, plane)| *g += plane.iter().sum::<f32>());
        if !want_input {
            return None;
        }
        let mut dcols = vec![0f32; k * hw];
        gemm_tn(k, cout, hw, self.p(wname), dz, &mut dcols);
        let mut din = vec![0f32; cin * hw];
        col2im_acc(&dcols, cin, h, w, dil, &mut din);
        Some(din)
    }
}

fn outer_acc(dst: &mut [f32], rows: &[f32], cols: &[f32]) {
    for (i, r) in rows.iter().enumerate() {
        for (j, c) in cols.iter().enumerate() {
            dst[i * cols.len() + j] += r * c;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ToyNet {
        let arch = ToyArch {
            in_channels: 2,
            hidden: 4,
            dilations: vec![1, 2],
            height: 5,
            width: 6,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = ToyNet::init(arch, &mut rng);
        // non-trivial output layer so every gradient path is exercised
        let r = net.layout.range("conv_out.w");
        for (i, p) in net.params[r].iter_mut().enumerate() {
            *p = ((i * 7 % 13) as f32 - 6.0) * 0.05;
        }
        net
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut net = tiny();
        let n = 2 * 5 * 6;
        let x: Vec<f32> = (0..n).map(|i| ((i * 37 % 23) as f32 / 11.0) - 1.0).collect();
        let target: Vec<f32> = (0..n).map(|i| ((i * 17 % 19) as f32 / 9.0) - 1.0).collect();
        let (_, grad) = net.loss_and_grad(&x, 17, 100, &target);
        let mut checked = 0;
        for idx in (0..net.params.len()).step_by(7) {
            let orig = net.params[idx];
            let h = 1e-3f32;
            net.params[idx] = orig + h;
            let lp = net.loss_and_grad(&x, 17, 100, &target).0 as f64;
            net.params[idx] = orig - h;
            let lm = net.loss_and_grad(&x, 17, 100, &target).0 as f64;
            net.params[idx] = orig;
            let fd = (lp - lm) / (2.0 * h as f64);
            let g = grad[idx] as f64;
            // f32 forward pass: the tolerance covers rounding in the difference quotient
            assert!(
                (fd - g).abs() <= 1e-2 * fd.abs().max(g.abs()) + 3e-4,
                "param {idx}: analytic {g} vs numeric {fd}"
            );
            checked += 1;
        }
        assert!(checked > 20);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let (cin, h, w, dil) = (2, 4, 5, 2);
        let input: Vec<f32> = (0..cin * h * w).map(|i| i as f32 * 0.1).collect();
        let mut cols = vec![0f32; cin * 9 * h * w];
        im2col(&input, cin, h, w, dil, &mut cols);
        let weights: Vec<f32> = (0..cin * 9).map(|i| (i as f32 - 8.0) * 0.01).collect();
        let mut out = vec![0f32; h * w];
        gemm_nn(1, cin * 9, h * w, &weights, &cols, 0.0, &mut out);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0f32;
                for ci in 0..cin {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let sy = y as isize + (ky as isize - 1) * dil as isize;
                            let sx = x as isize + (kx as isize - 1) * dil as isize;
                            if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                                acc += weights[ci * 9 + ky * 3 + kx] * input[ci * h * w + sy as usize * w + sx as usize];
                            }
                        }
                    }
                }
                assert!((acc - out[y * w + x]).abs() < 1e-5);
            }
        }
    }
}
