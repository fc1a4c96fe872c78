use serde::{Deserialize, Serialize};

use super::layers::{Linear, ParamStore};
use super::schedule::pos_encode;
use crate::numkit::{RngStream, Tensor};
use crate::overfit::ConditioningTuple;
use crate::{Error, Result};

/// Affine encoders for the layer input, layer activation and network
/// output. Their sum plus the step encoding forms the conditioning vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEncoders {
    pub d_cond: usize,
    pub dims: [usize; 3],
    pub store: ParamStore,
    maps: [Linear; 3],
}

/// Cached data part of the conditioning vector; constant across steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedCondition(pub Vec<f64>);

impl ConditionEncoders {
    pub fn new(dims: [usize; 3], d_cond: usize, rng: &mut RngStream) -> Result<Self> {
        pos_encode(1, d_cond)?;
        let mut store = ParamStore::default();
        let names = ["enc_input", "enc_activation", "enc_output"];
        let maps = [0, 1, 2].map(|k| {
            let std = 1.0 / (dims[k].max(1) as f64).sqrt();
            Linear::new(&mut store, names[k], dims[k], d_cond, std, rng)
        });
        Ok(Self { d_cond, dims, store, maps })
    }

    fn parts<'a>(&self, cond: &'a ConditioningTuple) -> Result<[&'a [f64]; 3]> {
        let got = cond.dims();
        if got != self.dims {
            return Err(Error::shape(&self.dims, &got));
        }
        Ok([&cond.input, &cond.activation, &cond.output])
    }

    /// `E_i(i) + E_a(a) + E_o(o)`.
    pub fn encode_data(&self, cond: &ConditioningTuple) -> Result<EncodedCondition> {
        let parts = self.parts(cond)?;
        let mut e = vec![0.0; self.d_cond];
        for (map, x) in self.maps.iter().zip(parts) {
            for (acc, v) in e.iter_mut().zip(map.forward(&self.store.tensors, x)) {
                *acc += v;
            }
        }
        Ok(EncodedCondition(e))
    }

    /// Full conditioning vector for step `t` from a cached data part.
    pub fn at_step(&self, data: &EncodedCondition, t: usize) -> Vec<f64> {
        let mut e = pos_encode(t, self.d_cond).expect("width validated at construction");
        for (a, b) in e.iter_mut().zip(&data.0) {
            *a += b;
        }
        e
    }

    pub fn encode(&self, cond: &ConditioningTuple, t: usize) -> Result<Vec<f64>> {
        Ok(self.at_step(&self.encode_data(cond)?, t))
    }

    /// Accumulates encoder gradients given `∂loss/∂e`.
    pub fn backward(&self, cond: &ConditioningTuple, de: &[f64], grads: &mut [Tensor]) -> Result<()> {
        let parts = self.parts(cond)?;
        for (map, x) in self.maps.iter().zip(parts) {
            let mut sink = vec![0.0; x.len()];
            map.backward(&self.store.tensors, grads, x, de, &mut sink);
        }
        Ok(())
    }
}
