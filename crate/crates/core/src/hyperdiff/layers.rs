//! Building blocks of the denoiser with explicit backward passes.
//!
//! Parameters live in a flat [`ParamStore`]; layers only hold indices into
//! it, so the optimiser, the checkpoint writer and the gradient checks all
//! see the same list. Feature maps are `[channels, height, width]` tensors.

use crate::numkit::{RngStream, Tensor};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn add(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn zeros_like(&self) -> Vec<Tensor> {
        self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect()
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }
}

fn normal(rng: &mut RngStream, shape: &[usize], std: f64) -> Tensor {
    rng.gaussian(shape).scaled(std)
}

/// `C = A·B + beta·C` with optional transposes; row-major operands.
/// `a` is (m x k) after transposition, `b` is (k x n).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserted lengths cover every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

pub(crate) fn silu_grad(v: f64) -> f64 {
    let s = 1.0 / (1.0 + (-v).exp());
    s * (1.0 + v * (1.0 - s))
}

pub(crate) fn silu_map(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = silu(*v));
    y
}

/// `dx = dy * silu'(x)`
pub(crate) fn silu_back(x: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (d, v) in dx.data_mut().iter_mut().zip(x.data()) {
        *d *= silu_grad(*v);
    }
    dx
}

/// Same-padded 2-D convolution with odd kernel size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conv {
    pub w: usize,
    pub b: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

#[derive(Debug, Clone)]
pub struct ConvCache {
    cols: Vec<f64>,
    h: usize,
    w: usize,
}

impl Conv {
    pub fn new(ps: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, gain: f64, rng: &mut RngStream) -> Self {
        let fan_in = (cin * k * k) as f64;
        let w = ps.add(format!("{name}.w"), normal(rng, &[cout, cin, k, k], gain / fan_in.sqrt()));
        let b = ps.add(format!("{name}.b"), Tensor::zeros(&[cout]));
        Self { w, b, cin, cout, k }
    }

    fn im2col(&self, x: &Tensor) -> Vec<f64> {
        let (h, w) = (x.shape()[1], x.shape()[2]);
        let k = self.k;
        if k == 1 {
            return x.data().to_vec();
        }
        let pad = (k / 2) as isize;
        let hw = h * w;
        let mut cols = vec![0.0; self.cin * k * k * hw];
        let xd = x.data();
        for c in 0..self.cin {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + ky) * k + kx) * hw;
                    let dy = ky as isize - pad;
                    let dx = kx as isize - pad;
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src = c * hw + sy as usize * w;
                        let dst = row + y * w;
                        let x0 = (-dx).max(0) as usize;
                        let x1 = (w as isize - dx).min(w as isize) as usize;
                        for xx in x0..x1 {
                            cols[dst + xx] = xd[src + (xx as isize + dx) as usize];
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], h: usize, w: usize) -> Tensor {
        let k = self.k;
        if k == 1 {
            return Tensor::new(vec![self.cin, h, w], cols.to_vec()).expect("shape");
        }
        let pad = (k / 2) as isize;
        let hw = h * w;
        let mut out = Tensor::zeros(&[self.cin, h, w]);
        let od = out.data_mut();
        for c in 0..self.cin {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + ky) * k + kx) * hw;
                    let dy = ky as isize - pad;
                    let dx = kx as isize - pad;
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let dst = c * hw + sy as usize * w;
                        let src = row + y * w;
                        let x0 = (-dx).max(0) as usize;
                        let x1 = (w as isize - dx).min(w as isize) as usize;
                        for xx in x0..x1 {
                            od[dst + (xx as isize + dx) as usize] += cols[src + xx];
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward(&self, ps: &[Tensor], x: &Tensor) -> (Tensor, ConvCache) {
        let (h, w) = (x.shape()[1], x.shape()[2]);
        let hw = h * w;
        let cols = self.im2col(x);
        let kk = self.cin * self.k * self.k;
        let mut y = vec![0.0; self.cout * hw];
        for (o, bias) in ps[self.b].data().iter().enumerate() {
            y[o * hw..(o + 1) * hw].fill(*bias);
        }
        gemm(self.cout, kk, hw, ps[self.w].data(), false, &cols, false, 1.0, &mut y);
        (
            Tensor::new(vec![self.cout, h, w], y).expect("shape"),
            ConvCache { cols, h, w },
        )
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&self, ps: &[Tensor], grads: &mut [Tensor], cache: &ConvCache, dy: &Tensor) -> Tensor {
        let hw = cache.h * cache.w;
        let kk = self.cin * self.k * self.k;
        let dyd = dy.data();
        gemm(self.cout, hw, kk, dyd, false, &cache.cols, true, 1.0, grads[self.w].data_mut());
        for (o, gb) in grads[self.b].data_mut().iter_mut().enumerate() {
            *gb += dyd[o * hw..(o + 1) * hw].iter().sum::<f64>();
        }
        let mut dcols = vec![0.0; kk * hw];
        gemm(kk, self.cout, hw, ps[self.w].data(), true, dyd, false, 0.0, &mut dcols);
        self.col2im(&dcols, cache.h, cache.w)
    }
}

/// Fully connected map on a vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, din: usize, dout: usize, std: f64, rng: &mut RngStream) -> Self {
        let w = ps.add(format!("{name}.w"), normal(rng, &[dout, din], std));
        let b = ps.add(format!("{name}.b"), Tensor::zeros(&[dout]));
        Self { w, b, din, dout }
    }

    pub fn forward(&self, ps: &[Tensor], x: &[f64]) -> Vec<f64> {
        crate::numkit::affine(&ps[self.w], ps[self.b].data(), x)
    }

    /// Accumulates parameter gradients and adds the input gradient to `dx`.
    pub fn backward(&self, ps: &[Tensor], grads: &mut [Tensor], x: &[f64], dy: &[f64], dx: &mut [f64]) {
        let w = ps[self.w].data();
        let gw = grads[self.w].data_mut();
        for (o, d) in dy.iter().enumerate() {
            if *d == 0.0 {
                continue;
            }
            let row = &mut gw[o * self.din..(o + 1) * self.din];
            for (g, xv) in row.iter_mut().zip(x) {
                *g += d * xv;
            }
            for (dxv, wv) in dx.iter_mut().zip(&w[o * self.din..(o + 1) * self.din]) {
                *dxv += d * wv;
            }
        }
        for (g, d) in grads[self.b].data_mut().iter_mut().zip(dy) {
            *g += d;
        }
    }
}

pub(crate) fn avg_pool2(x: &Tensor) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let xd = x.data();
    let od = out.data_mut();
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let base = ch * h * w + 2 * y * w + 2 * xx;
                od[(ch * oh + y) * ow + xx] = 0.25 * (xd[base] + xd[base + 1] + xd[base + w] + xd[base + w + 1]);
            }
        }
    }
    out
}

pub(crate) fn avg_pool2_back(dy: &Tensor, h: usize, w: usize) -> Tensor {
    let c = dy.shape()[0];
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = Tensor::zeros(&[c, h, w]);
    let dd = dx.data_mut();
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let g = 0.25 * dy.data()[(ch * oh + y) * ow + xx];
                let base = ch * h * w + 2 * y * w + 2 * xx;
                dd[base] += g;
                dd[base + 1] += g;
                dd[base + w] += g;
                dd[base + w + 1] += g;
            }
        }
    }
    dx
}

pub(crate) fn upsample2(x: &Tensor) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let od = out.data_mut();
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                od[(ch * oh + y) * ow + xx] = x.data()[(ch * h + y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2_back(dy: &Tensor) -> Tensor {
    let (c, oh, ow) = (dy.shape()[0], dy.shape()[1], dy.shape()[2]);
    let (h, w) = (oh / 2, ow / 2);
    let mut dx = Tensor::zeros(&[c, h, w]);
    let dd = dx.data_mut();
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                dd[(ch * h + y / 2) * w + xx / 2] += dy.data()[(ch * oh + y) * ow + xx];
            }
        }
    }
    dx
}

pub(crate) fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    let (ca, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let cb = b.shape()[0];
    let mut data = Vec::with_capacity((ca + cb) * h * w);
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(vec![ca + cb, h, w], data).expect("shape")
}

pub(crate) fn split_channels(x: &Tensor, ca: usize) -> (Tensor, Tensor) {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let cut = ca * h * w;
    (
        Tensor::new(vec![ca, h, w], x.data()[..cut].to_vec()).expect("shape"),
        Tensor::new(vec![c - ca, h, w], x.data()[cut..].to_vec()).expect("shape"),
    )
}

/// Residual block: `skip(x) + conv2(silu(film(conv1(silu(x)), e)))`, where
/// the conditioning modulates each channel as `h * (1 + γ) + β`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock {
    pub conv1: Conv,
    pub conv2: Conv,
    pub film: Linear,
    pub skip: Option<Conv>,
    pub cout: usize,
}

pub struct ResCache {
    x: Tensor,
    c1: ConvCache,
    h1: Tensor,
    film_out: Vec<f64>,
    h1f: Tensor,
    c2: ConvCache,
    cs: Option<ConvCache>,
}

impl ResBlock {
    pub fn new(ps: &mut ParamStore, name: &str, cin: usize, cout: usize, d_cond: usize, rng: &mut RngStream) -> Self {
        let conv1 = Conv::new(ps, &format!("{name}.conv1"), cin, cout, 3, 1.0, rng);
        let film = Linear::new(ps, &format!("{name}.film"), d_cond, 2 * cout, 0.1 / (d_cond as f64).sqrt(), rng);
        let conv2 = Conv::new(ps, &format!("{name}.conv2"), cout, cout, 3, 0.5, rng);
        let skip = (cin != cout).then(|| Conv::new(ps, &format!("{name}.skip"), cin, cout, 1, 1.0, rng));
        Self { conv1, conv2, film, skip, cout }
    }

    /// `cond` is the already-activated conditioning vector.
    pub fn forward(&self, ps: &[Tensor], x: &Tensor, cond: &[f64]) -> (Tensor, ResCache) {
        let (h1, c1) = self.conv1.forward(ps, &silu_map(x));
        let film_out = self.film.forward(ps, cond);
        let hw = h1.shape()[1] * h1.shape()[2];
        let mut h1f = h1.clone();
        for (c, chunk) in h1f.data_mut().chunks_mut(hw).enumerate() {
            let (g, b) = (film_out[c], film_out[self.cout + c]);
            chunk.iter_mut().for_each(|v| *v = *v * (1.0 + g) + b);
        }
        let (h2, c2) = self.conv2.forward(ps, &silu_map(&h1f));
        let (mut out, cs) = match &self.skip {
            Some(s) => {
                let (o, c) = s.forward(ps, x);
                (o, Some(c))
            }
            None => (x.clone(), None),
        };
        out.axpy(1.0, &h2);
        (
            out,
            ResCache {
                x: x.clone(),
                c1,
                h1,
                film_out,
                h1f,
                c2,
                cs,
            },
        )
    }

    /// Returns the input gradient; adds the conditioning gradient to `dcond`.
    pub fn backward(&self, ps: &[Tensor], grads: &mut [Tensor], cache: &ResCache, cond: &[f64], dy: &Tensor, dcond: &mut [f64]) -> Tensor {
        let dh2_in = self.conv2.backward(ps, grads, &cache.c2, dy);
        let dh1f = silu_back(&cache.h1f, &dh2_in);
        let hw = cache.h1.shape()[1] * cache.h1.shape()[2];
        let mut dfilm = vec![0.0; 2 * self.cout];
        let mut dh1 = dh1f.clone();
        for c in 0..self.cout {
            let g = cache.film_out[c];
            let d = &dh1f.data()[c * hw..(c + 1) * hw];
            let h = &cache.h1.data()[c * hw..(c + 1) * hw];
            dfilm[c] = d.iter().zip(h).map(|(a, b)| a * b).sum();
            dfilm[self.cout + c] = d.iter().sum();
            dh1.data_mut()[c * hw..(c + 1) * hw].iter_mut().for_each(|v| *v *= 1.0 + g);
        }
        self.film.backward(ps, grads, cond, &dfilm, dcond);
        let da1 = self.conv1.backward(ps, grads, &cache.c1, &dh1);
        let mut dx = silu_back(&cache.x, &da1);
        match (&self.skip, &cache.cs) {
            (Some(s), Some(cs)) => {
                let ds = s.backward(ps, grads, cs, dy);
                dx.axpy(1.0, &ds);
            }
            _ => dx.axpy(1.0, dy),
        }
        dx
    }
}

/// Single-head self-attention over spatial positions with a residual path.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub q: Conv,
    pub k: Conv,
    pub v: Conv,
    pub o: Conv,
    pub channels: usize,
}

pub struct AttnCache {
    x: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    a: Vec<f64>,
    o_in: ConvCache,
    qkv_in: ConvCache,
}

impl Attention {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize, rng: &mut RngStream) -> Self {
        Self {
            q: Conv::new(ps, &format!("{name}.q"), channels, channels, 1, 1.0, rng),
            k: Conv::new(ps, &format!("{name}.k"), channels, channels, 1, 1.0, rng),
            v: Conv::new(ps, &format!("{name}.v"), channels, channels, 1, 1.0, rng),
            o: Conv::new(ps, &format!("{name}.o"), channels, channels, 1, 0.5, rng),
            channels,
        }
    }

    pub fn forward(&self, ps: &[Tensor], x: &Tensor) -> (Tensor, AttnCache) {
        let c = self.channels;
        let n = x.shape()[1] * x.shape()[2];
        let (q, qkv_in) = self.q.forward(ps, x);
        let (k, _) = self.k.forward(ps, x);
        let (v, _) = self.v.forward(ps, x);
        let scale = 1.0 / (c as f64).sqrt();
        // scores[i, j] = q[:, i] · k[:, j] / sqrt(c)
        let mut a = vec![0.0; n * n];
        gemm(n, c, n, q.data(), true, k.data(), false, 0.0, &mut a);
        for row in a.chunks_mut(n) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max) * scale;
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v * scale - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        // o[:, i] = Σ_j a[i, j] v[:, j]
        let mut o = vec![0.0; c * n];
        gemm(c, n, n, v.data(), false, &a, true, 0.0, &mut o);
        let o = Tensor::new(x.shape().to_vec(), o).expect("shape");
        let (mut y, o_in) = self.o.forward(ps, &o);
        y.axpy(1.0, x);
        (
            y,
            AttnCache {
                x: x.clone(),
                q,
                k,
                v,
                a,
                o_in,
                qkv_in,
            },
        )
    }

    pub fn backward(&self, ps: &[Tensor], grads: &mut [Tensor], cache: &AttnCache, dy: &Tensor) -> Tensor {
        let c = self.channels;
        let shape = cache.x.shape().to_vec();
        let n = shape[1] * shape[2];
        let scale = 1.0 / (c as f64).sqrt();
        let d_o = self.o.backward(ps, grads, &cache.o_in, dy);
        // dA[i, j] = Σ_c dO[c, i] v[c, j]
        let mut da = vec![0.0; n * n];
        gemm(n, c, n, d_o.data(), true, cache.v.data(), false, 0.0, &mut da);
        // dV[c, j] = Σ_i dO[c, i] a[i, j]
        let mut dv = vec![0.0; c * n];
        gemm(c, n, n, d_o.data(), false, &cache.a, false, 0.0, &mut dv);
        // softmax backward, then the 1/sqrt(c) scale
        let mut ds = vec![0.0; n * n];
        for i in 0..n {
            let ar = &cache.a[i * n..(i + 1) * n];
            let dr = &da[i * n..(i + 1) * n];
            let dot: f64 = ar.iter().zip(dr).map(|(p, g)| p * g).sum();
            for j in 0..n {
                ds[i * n + j] = ar[j] * (dr[j] - dot) * scale;
            }
        }
        // dQ[c, i] = Σ_j ds[i, j] k[c, j];  dK[c, j] = Σ_i ds[i, j] q[c, i]
        let mut dq = vec![0.0; c * n];
        gemm(c, n, n, cache.k.data(), false, &ds, true, 0.0, &mut dq);
        let mut dk = vec![0.0; c * n];
        gemm(c, n, n, cache.q.data(), false, &ds, false, 0.0, &mut dk);
        let mut dx = dy.clone();
        for (conv, g) in [(&self.q, dq), (&self.k, dk), (&self.v, dv)] {
            let g = Tensor::new(shape.clone(), g).expect("shape");
            dx.axpy(1.0, &conv.backward(ps, grads, &cache.qkv_in, &g));
        }
        dx
    }
}
