//! Scale estimator: an MLP from `(x, i_L, a_L, out)` to the magnitude of the
//! per-sample delta, trained on a decibel log-relative-error objective.
//!
//! The network predicts `log ρ`; the exponential head keeps `ρ̂ > 0`. Inputs
//! are standardised with statistics fitted on the training records. The
//! first layer plays the role of the scale model's own condition encoders.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::datasets::Standardizer;
use crate::numkit::checkpoint::{push_mlp, read_mlp, Checkpoint};
use crate::numkit::{Activation, AdamState, Head, MlpModel, MlpSpec, RngStream, Tensor};
use crate::overfit::{ConditioningTuple, OverfitRecord, RecordStore};
use crate::{Error, Result};

/// Lower clamp of [`scale_loss`], reached at relative error 1e-6.
pub const LOSS_FLOOR_DB: f64 = -120.0;
const KIND: &str = "scale_model";

/// `10·log10((ρ̂ − ρ_s)² / ρ_s²)`, clamped below at −120 dB.
pub fn scale_loss(rho_hat: f64, rho_s: f64) -> Result<f64> {
    if !(rho_s > 0.0) || !rho_s.is_finite() {
        return Err(Error::InvalidArgument(format!("target scale must be positive, got {rho_s}")));
    }
    if !rho_hat.is_finite() {
        return Err(Error::NonFinite("predicted scale".into()));
    }
    let ratio = (rho_hat - rho_s) / rho_s;
    Ok((10.0 * (ratio * ratio).log10()).max(LOSS_FLOOR_DB))
}

/// Derivative of [`scale_loss`] with respect to `log ρ̂`; zero on the clamp.
pub fn scale_loss_grad_log(rho_hat: f64, rho_s: f64) -> Result<f64> {
    clipped_grad_log(rho_hat, rho_s, 0.0)
}

/// As [`scale_loss_grad_log`], but relative errors below `tau` are treated
/// as `tau` in the denominator, bounding the gradient near the target.
pub fn clipped_grad_log(rho_hat: f64, rho_s: f64, tau: f64) -> Result<f64> {
    if scale_loss(rho_hat, rho_s)? <= LOSS_FLOOR_DB {
        return Ok(0.0);
    }
    let err = rho_hat - rho_s;
    let floor = tau * rho_s;
    let denom = if err.abs() < floor { floor.copysign(err) } else { err };
    Ok(20.0 / std::f64::consts::LN_10 * rho_hat / denom)
}

/// The ablation's fixed scale: mean `ρ_s` over the store.
pub fn global_scale(store: &RecordStore) -> f64 {
    store.mean_rho()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScaleConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Relative error below which the training gradient stops growing;
    /// 0 follows the raw objective.
    pub grad_floor: f64,
}

impl Default for ScaleConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            lr: 1e-4,
            epochs: 100,
            batch: 32,
            grad_floor: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleModel {
    pub mlp: MlpModel,
    pub features: Standardizer,
    /// `[x, input, activation, output]` lengths.
    pub dims: [usize; 4],
    pub rho_bar: f64,
    pub history: Vec<f64>,
}

fn concat(x: &[f64], cond: &ConditioningTuple) -> Vec<f64> {
    let mut v = Vec::with_capacity(x.len() + cond.input.len() + cond.activation.len() + cond.output.len());
    v.extend_from_slice(x);
    v.extend_from_slice(&cond.input);
    v.extend_from_slice(&cond.activation);
    v.extend_from_slice(&cond.output);
    v
}

impl ScaleModel {
    /// Untrained model for the given feature lengths; the output bias is
    /// set to `log_init`.
    pub fn new(dims: [usize; 4], hidden: &[usize], log_init: f64, rng: &mut RngStream) -> Result<Self> {
        let total: usize = dims.iter().sum();
        let mut sizes = vec![total];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let spec = MlpSpec::new(sizes, Activation::Tanh, Head::LinearRegressor)?;
        let mut mlp = MlpModel::init(spec, rng)?;
        mlp.layers.last_mut().expect("at least one layer").b.data_mut()[0] = log_init;
        Ok(Self {
            mlp,
            features: Standardizer {
                mean: vec![0.0; total],
                std: vec![1.0; total],
            },
            dims,
            rho_bar: log_init.exp(),
            history: Vec::new(),
        })
    }

    pub fn features(&self, x: &[f64], cond: &ConditioningTuple) -> Result<Vec<f64>> {
        let [di, da, dout] = cond.dims();
        let got = [x.len(), di, da, dout];
        if got != self.dims {
            return Err(Error::shape(&self.dims, &got));
        }
        Ok(self.features.transform_row(&concat(x, cond)))
    }

    /// Predicted `log ρ̂` from standardised features.
    fn log_rho(&self, feats: &[f64]) -> Result<f64> {
        Ok(self.mlp.output(feats)?[0])
    }
}

/// `ρ̂(x, I(x)) > 0`.
pub fn scale_forward(model: &ScaleModel, x: &[f64], cond: &ConditioningTuple) -> Result<f64> {
    let f = model.features(x, cond)?;
    let rho = model.log_rho(&f)?.exp();
    if !rho.is_finite() || rho <= 0.0 {
        return Err(Error::NonFinite("scale prediction".into()));
    }
    Ok(rho)
}

/// Loss of one record and its exact gradient for every tensor of the MLP.
pub fn record_loss_and_gradients(model: &ScaleModel, rec: &OverfitRecord) -> Result<(f64, Vec<Tensor>)> {
    loss_and_gradients_floored(model, rec, 0.0)
}

fn loss_and_gradients_floored(model: &ScaleModel, rec: &OverfitRecord, tau: f64) -> Result<(f64, Vec<Tensor>)> {
    let f = model.features(&rec.x, &rec.cond)?;
    let trace = model.mlp.forward(&f)?;
    let rho_hat = trace.output()[0].exp();
    let loss = scale_loss(rho_hat, rec.rho)?;
    let g = clipped_grad_log(rho_hat, rec.rho, tau)?;
    let grads = model.mlp.backward(&trace, &[g], None)?.flatten(&model.mlp);
    Ok((loss, grads))
}

pub fn record_loss(model: &ScaleModel, rec: &OverfitRecord) -> Result<f64> {
    scale_loss(scale_forward(model, &rec.x, &rec.cond)?, rec.rho)
}

/// Mean decibel loss over a set of records.
pub fn mean_loss(model: &ScaleModel, records: &[OverfitRecord]) -> Result<f64> {
    let mut s = 0.0;
    for r in records {
        s += record_loss(model, r)?;
    }
    Ok(s / records.len().max(1) as f64)
}

/// Adam on minibatch means of the per-record objective. The output bias
/// starts at the mean `log ρ_s`; the epoch-mean loss is kept in `history`.
pub fn train_scale(store: &RecordStore, cfg: &ScaleConfig, rng: &mut RngStream) -> Result<ScaleModel> {
    let first = store
        .records
        .first()
        .ok_or_else(|| Error::InvalidArgument("scale training needs at least one record".into()))?;
    if cfg.batch == 0 || !(cfg.lr > 0.0) || !(cfg.grad_floor >= 0.0) {
        return Err(Error::InvalidArgument("scale batch and lr must be positive".into()));
    }
    let [di, da, dout] = first.cond.dims();
    let dims = [first.x.len(), di, da, dout];
    let n = store.len();
    let mean_log = store.records.iter().map(|r| r.rho.ln()).sum::<f64>() / n as f64;
    let mut model = ScaleModel::new(dims, &cfg.hidden, mean_log, rng)?;
    let mut raw = Tensor::zeros(&[n, dims.iter().sum()]);
    for (i, r) in store.records.iter().enumerate() {
        if [r.x.len(), r.cond.input.len(), r.cond.activation.len(), r.cond.output.len()] != dims {
            return Err(Error::InvalidArgument(format!("record {i} has inconsistent feature lengths")));
        }
        raw.row_mut(i).copy_from_slice(&concat(&r.x, &r.cond));
    }
    model.features = Standardizer::fit(&raw);
    model.rho_bar = global_scale(store);

    let mut adam = AdamState::new(model.mlp.param_names(), model.mlp.params().iter().map(|t| t.shape()));
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let mut acc: Option<Vec<Tensor>> = None;
            for &i in chunk {
                let (loss, g) = loss_and_gradients_floored(&model, &store.records[i], cfg.grad_floor)?;
                total += loss;
                match acc.as_mut() {
                    None => acc = Some(g),
                    Some(a) => a.iter_mut().zip(&g).for_each(|(x, y)| x.axpy(1.0, y)),
                }
            }
            let mut grads = acc.expect("chunks are non-empty");
            grads.iter_mut().for_each(|g| g.scale(1.0 / chunk.len() as f64));
            adam.step(&mut model.mlp.params_mut(), &grads, cfg.lr)?;
        }
        let mean = total / n as f64;
        log::debug!("scale epoch {epoch}: {mean:.3} dB");
        model.history.push(mean);
    }
    Ok(model)
}

pub fn save_scale(dir: &Path, model: &ScaleModel, seed: u64) -> Result<()> {
    let meta = json!({
        "spec": model.mlp.spec,
        "features": model.features,
        "dims": model.dims,
        "rho_bar": model.rho_bar,
        "history": model.history,
    });
    let mut ck = Checkpoint::new(KIND, "train-scale", seed, meta);
    push_mlp(&mut ck, "", &model.mlp);
    ck.save(dir)
}

pub fn load_scale(dir: &Path) -> Result<ScaleModel> {
    let ck = Checkpoint::load(dir)?;
    ck.expect_kind(KIND, dir)?;
    Ok(ScaleModel {
        mlp: read_mlp(&ck, "", ck.meta_field("spec")?)?,
        features: ck.meta_field("features")?,
        dims: ck.meta_field("dims")?,
        rho_bar: ck.meta_field("rho_bar")?,
        history: ck.meta_field("history")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decibel_values() {
        assert_eq!(scale_loss(2.0, 1.0).unwrap(), 0.0);
        assert_eq!(scale_loss(6.0, 3.0).unwrap(), 0.0);
        assert!((scale_loss(1.1, 1.0).unwrap() + 20.0).abs() < 1e-12);
        assert_eq!(scale_loss(0.7, 0.7).unwrap(), LOSS_FLOOR_DB);
        assert!(scale_loss(1.0, 0.0).is_err());
        assert!(scale_loss(1.0, -2.0).is_err());
    }

    #[test]
    fn minimised_at_target() {
        let rho = 0.37;
        let at = scale_loss(rho, rho).unwrap();
        for k in 1..200 {
            let r = rho * k as f64 / 100.0;
            if k != 100 {
                assert!(scale_loss(r, rho).unwrap() > at);
            }
        }
    }

    #[test]
    fn log_gradient_matches_difference_quotient() {
        for (rh, rs) in [(1.3, 1.0), (0.2, 0.5), (4.0, 1.1)] {
            let u: f64 = f64::ln(rh);
            let h = 1e-6;
            let fd = (scale_loss((u + h).exp(), rs).unwrap() - scale_loss((u - h).exp(), rs).unwrap()) / (2.0 * h);
            let an = scale_loss_grad_log(rh, rs).unwrap();
            assert!((fd - an).abs() / an.abs() < 1e-7);
        }
        assert_eq!(scale_loss_grad_log(1.0, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn zero_network_predicts_one() {
        let mut rng = RngStream::new(1, 0);
        let mut m = ScaleModel::new([2, 3, 3, 2], &[4], 0.0, &mut rng).unwrap();
        m.mlp.params_mut().into_iter().for_each(|t| t.fill(0.0));
        let cond = ConditioningTuple {
            input: vec![1.0; 3],
            activation: vec![2.0; 3],
            output: vec![0.5; 2],
        };
        assert_eq!(scale_forward(&m, &[1.0, 2.0], &cond).unwrap(), 1.0);
        assert!(scale_forward(&m, &[1.0], &cond).is_err());
    }
}
