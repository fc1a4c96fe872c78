use serde::{Deserialize, Serialize};

use super::layers::{
    avg_pool2, avg_pool2_back, concat_channels, silu, silu_back, silu_grad, silu_map, split_channels, upsample2,
    upsample2_back, AttnCache, Attention, Conv, ConvCache, ParamStore, ResBlock, ResCache,
};
use crate::numkit::{RngStream, Tensor};
use crate::{Error, Result};

/// How the raw network output is turned into a noise estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputParam {
    /// The network predicts the noise directly.
    Epsilon,
    /// The network predicts the clean matrix `D`; the noise estimate is
    /// `(Ω_t − √ᾱ_t·mask⊙D) / √(1−ᾱ_t)`.
    CleanEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub channels: usize,
    pub levels: usize,
    pub attention: bool,
    pub output: OutputParam,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            levels: 2,
            attention: true,
            output: OutputParam::CleanEstimate,
        }
    }
}

/// U-Net over a single-channel `side × side` grid. Every residual block is
/// modulated by its own affine map of the conditioning vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    pub cfg: DenoiserConfig,
    pub side: usize,
    pub d_cond: usize,
    pub store: ParamStore,
    conv_in: Conv,
    pos: usize,
    down: Vec<ResBlock>,
    mid1: ResBlock,
    attn: Option<Attention>,
    mid2: ResBlock,
    up: Vec<ResBlock>,
    conv_out: Conv,
}

pub struct UnetCache {
    e: Vec<f64>,
    cond: Vec<f64>,
    c_in: ConvCache,
    down: Vec<ResCache>,
    sizes: Vec<usize>,
    mid1: ResCache,
    attn: Option<AttnCache>,
    mid2: ResCache,
    up: Vec<ResCache>,
    last: Tensor,
    c_out: ConvCache,
}

impl Denoiser {
    pub fn new(cfg: DenoiserConfig, side: usize, d_cond: usize, rng: &mut RngStream) -> Result<Self> {
        if cfg.channels == 0 || cfg.levels == 0 {
            return Err(Error::InvalidArgument("denoiser needs at least one channel and one level".into()));
        }
        if side == 0 || !side.is_multiple_of(1 << cfg.levels) {
            return Err(Error::InvalidArgument(format!(
                "side {side} is not a positive multiple of 2^{}",
                cfg.levels
            )));
        }
        let c = cfg.channels;
        let mut ps = ParamStore::default();
        let conv_in = Conv::new(&mut ps, "in", 1, c, 3, 1.0, rng);
        let pos = ps.add("pos".into(), rng.gaussian(&[c, side, side]).scaled(0.1));
        let down = (0..cfg.levels)
            .map(|l| ResBlock::new(&mut ps, &format!("down{l}"), c, c, d_cond, rng))
            .collect();
        let mid1 = ResBlock::new(&mut ps, "mid1", c, c, d_cond, rng);
        let attn = cfg.attention.then(|| Attention::new(&mut ps, "attn", c, rng));
        let mid2 = ResBlock::new(&mut ps, "mid2", c, c, d_cond, rng);
        let up = (0..cfg.levels)
            .map(|l| ResBlock::new(&mut ps, &format!("up{l}"), 2 * c, c, d_cond, rng))
            .collect();
        let conv_out = Conv::new(&mut ps, "out", c, 1, 3, 0.1, rng);
        Ok(Self {
            cfg,
            side,
            d_cond,
            store: ps,
            conv_in,
            pos,
            down,
            mid1,
            attn,
            mid2,
            up,
            conv_out,
        })
    }

    /// Raw network output for a `side × side` input and conditioning `e`.
    pub fn forward(&self, omega: &Tensor, e: &[f64]) -> Result<(Tensor, UnetCache)> {
        omega.ensure_shape(&[self.side, self.side])?;
        if e.len() != self.d_cond {
            return Err(Error::shape(&[self.d_cond], &[e.len()]));
        }
        let ps = &self.store.tensors;
        let cond: Vec<f64> = e.iter().map(|v| silu(*v)).collect();
        let x = omega.clone().reshape(vec![1, self.side, self.side])?;
        let (mut h, c_in) = self.conv_in.forward(ps, &x);
        h.axpy(1.0, &ps[self.pos]);

        let mut skips = Vec::with_capacity(self.cfg.levels);
        let mut down = Vec::with_capacity(self.cfg.levels);
        let mut sizes = Vec::with_capacity(self.cfg.levels);
        for block in &self.down {
            let (o, c) = block.forward(ps, &h, &cond);
            down.push(c);
            sizes.push(o.shape()[1]);
            h = avg_pool2(&o);
            skips.push(o);
        }
        let (o, mid1) = self.mid1.forward(ps, &h, &cond);
        let (o, attn) = match &self.attn {
            Some(a) => {
                let (y, c) = a.forward(ps, &o);
                (y, Some(c))
            }
            None => (o, None),
        };
        let (mut h, mid2) = self.mid2.forward(ps, &o, &cond);
        let mut up = Vec::with_capacity(self.cfg.levels);
        for l in (0..self.cfg.levels).rev() {
            let joined = concat_channels(&upsample2(&h), &skips[l]);
            let (o, c) = self.up[l].forward(ps, &joined, &cond);
            up.push(c);
            h = o;
        }
        let (out, c_out) = self.conv_out.forward(ps, &silu_map(&h));
        let out = out.reshape(vec![self.side, self.side])?;
        Ok((
            out,
            UnetCache {
                e: e.to_vec(),
                cond,
                c_in,
                down,
                sizes,
                mid1,
                attn,
                mid2,
                up,
                last: h,
                c_out,
            },
        ))
    }

    /// Accumulates parameter gradients and returns `∂loss/∂e`.
    pub fn backward(&self, grads: &mut [Tensor], cache: &UnetCache, d_out: &Tensor) -> Result<Vec<f64>> {
        let ps = &self.store.tensors;
        let c = self.cfg.channels;
        let mut dcond = vec![0.0; self.d_cond];
        let d_out = d_out.clone().reshape(vec![1, self.side, self.side])?;
        let da = self.conv_out.backward(ps, grads, &cache.c_out, &d_out);
        let mut dh = silu_back(&cache.last, &da);

        let mut dskips: Vec<Option<Tensor>> = vec![None; self.cfg.levels];
        // up blocks ran from the deepest level outwards, so cache.up is in reverse level order
        for l in 0..self.cfg.levels {
            let k = self.cfg.levels - 1 - l;
            let dj = self.up[l].backward(ps, grads, &cache.up[k], &cache.cond, &dh, &mut dcond);
            let (dup, dskip) = split_channels(&dj, c);
            dskips[l] = Some(dskip);
            dh = upsample2_back(&dup);
        }
        let mut dh = self.mid2.backward(ps, grads, &cache.mid2, &cache.cond, &dh, &mut dcond);
        if let (Some(a), Some(ac)) = (&self.attn, &cache.attn) {
            dh = a.backward(ps, grads, ac, &dh);
        }
        let mut dh = self.mid1.backward(ps, grads, &cache.mid1, &cache.cond, &dh, &mut dcond);
        for l in (0..self.cfg.levels).rev() {
            let n = cache.sizes[l];
            let mut dl = avg_pool2_back(&dh, n, n);
            dl.axpy(1.0, dskips[l].as_ref().expect("filled above"));
            dh = self.down[l].backward(ps, grads, &cache.down[l], &cache.cond, &dl, &mut dcond);
        }
        grads[self.pos].axpy(1.0, &dh);
        self.conv_in.backward(ps, grads, &cache.c_in, &dh);
        Ok(dcond.iter().zip(&cache.e).map(|(d, v)| d * silu_grad(*v)).collect())
    }

    pub fn parameter_count(&self) -> usize {
        self.store.count()
    }
}
