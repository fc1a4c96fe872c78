//! Conditional diffusion hypernetwork over the selected layer's weight
//! matrix: noise schedule, condition encoders, U-Net denoiser, training and
//! ancestral sampling of weight deltas.
//!
//! Layer matrices use the `(inputs + 1) × outputs` layout of
//! [`Dense::to_matrix`](crate::numkit::Dense::to_matrix): the transposed
//! weights with the bias appended as the last row. They are zero-padded to a
//! square grid whose side is divisible by `2^levels`.

mod encoders;
pub mod layers;
mod schedule;
mod unet;

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

pub use encoders::{ConditionEncoders, EncodedCondition};
pub use schedule::{pos_encode, NoiseSchedule};
pub use unet::{Denoiser, DenoiserConfig, OutputParam};

use crate::numkit::checkpoint::Checkpoint;
use crate::numkit::{AdamState, MlpModel, RngStream, Tensor};
use crate::overfit::{ConditioningTuple, OverfitRecord, RecordStore, StoreManifest};
use crate::{Error, Result};

const KIND: &str = "diffusion_bundle";

/// Shape bookkeeping between a layer matrix and its padded square.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PadGeometry {
    pub rows: usize,
    pub cols: usize,
    pub side: usize,
    pub levels: usize,
}

impl PadGeometry {
    pub fn new(rows: usize, cols: usize, levels: usize) -> Self {
        let unit = 1usize << levels;
        let side = rows.max(cols).max(1).div_ceil(unit) * unit;
        Self { rows, cols, side, levels }
    }

    pub fn pad(&self, w: &Tensor) -> Result<Tensor> {
        w.ensure_shape(&[self.rows, self.cols])?;
        let mut m = Tensor::zeros(&[self.side, self.side]);
        for r in 0..self.rows {
            m.row_mut(r)[..self.cols].copy_from_slice(w.row(r));
        }
        Ok(m)
    }

    pub fn crop(&self, m: &Tensor) -> Result<Tensor> {
        m.ensure_shape(&[self.side, self.side])?;
        let mut w = Tensor::zeros(&[self.rows, self.cols]);
        for r in 0..self.rows {
            w.row_mut(r).copy_from_slice(&m.row(r)[..self.cols]);
        }
        Ok(w)
    }

    pub fn is_valid(&self, r: usize, c: usize) -> bool {
        r < self.rows && c < self.cols
    }
}

/// Zero-pads `w` to the smallest square whose side is a multiple of `2^levels`.
pub fn pad_square(w: &Tensor, levels: usize) -> Result<Tensor> {
    if w.shape().len() != 2 {
        return Err(Error::InvalidArgument(format!("expected a matrix, got shape {:?}", w.shape())));
    }
    PadGeometry::new(w.rows(), w.cols(), levels).pad(w)
}

/// Top-left `rows × cols` block of a padded square.
pub fn crop(m: &Tensor, rows: usize, cols: usize) -> Result<Tensor> {
    if m.shape().len() != 2 || m.rows() < rows || m.cols() < cols {
        return Err(Error::shape(&[rows, cols], m.shape()));
    }
    let mut w = Tensor::zeros(&[rows, cols]);
    for r in 0..rows {
        w.row_mut(r).copy_from_slice(&m.row(r)[..cols]);
    }
    Ok(w)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub d_cond: usize,
    pub denoiser: DenoiserConfig,
    pub batch: usize,
    pub lr: f64,
    pub epochs: usize,
    /// Stop after this many epochs without a relative improvement of
    /// `min_improvement` in the mean objective.
    pub patience: usize,
    pub min_improvement: f64,
    /// Fraction of training draws whose noisy input follows the sampler's
    /// own marginals instead of the forward process.
    pub sampler_matched: f64,
    /// Per-step loss weight `min(SNR_t, γ) / SNR_t` with `SNR_t = ᾱ_t/(1-ᾱ_t)`;
    /// `None` keeps the plain objective.
    pub snr_clamp: Option<f64>,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 10,
            d_cond: 32,
            denoiser: DenoiserConfig::default(),
            batch: 32,
            lr: 1e-4,
            epochs: 50,
            patience: 5,
            min_improvement: 1e-3,
            sampler_matched: 0.0,
            snr_clamp: Some(5.0),
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        NoiseSchedule::new(self.steps)?;
        pos_encode(1, self.d_cond)?;
        if self.batch == 0 || !(self.lr > 0.0) {
            return Err(Error::InvalidArgument("diffusion batch and lr must be positive".into()));
        }
        if self.snr_clamp.is_some_and(|g| !(g > 0.0)) {
            return Err(Error::InvalidArgument("snr_clamp must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.sampler_matched) {
            return Err(Error::InvalidArgument("sampler_matched must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Noise predictor used by the ancestral sampler.
pub trait NoiseModel {
    fn predict(&self, omega_t: &Tensor, t: usize) -> Result<Tensor>;
}

/// Ancestral sampling from `Ω_T` down to `Ω_0`. With `z = None` the
/// stochastic term is dropped and the result is a pure function of `Ω_T`.
pub fn ancestral_sample(
    model: &dyn NoiseModel,
    schedule: &NoiseSchedule,
    omega_t: Tensor,
    mut z: Option<&mut RngStream>,
) -> Result<Tensor> {
    let mut omega = omega_t;
    for t in (1..=schedule.steps()).rev() {
        let eps = model.predict(&omega, t)?;
        eps.ensure_shape(omega.shape())?;
        let coef = (1.0 - schedule.alpha(t)) / (1.0 - schedule.alpha_bar(t)).sqrt();
        let inv = 1.0 / schedule.alpha(t).sqrt();
        let sigma = schedule.beta_tilde(t).sqrt();
        for (o, e) in omega.data_mut().iter_mut().zip(eps.data()) {
            *o = (*o - coef * e) * inv;
        }
        if t > 1 {
            if let Some(rng) = z.as_deref_mut() {
                for o in omega.data_mut() {
                    *o += sigma * rng.normal();
                }
            }
        }
        if !omega.is_finite() {
            return Err(Error::NonFinite(format!("sampler state at step {t}")));
        }
    }
    Ok(omega)
}

/// The bundle's noise estimate with the data encodings computed once.
pub struct Conditioned<'a> {
    bundle: &'a DiffusionBundle,
    data: EncodedCondition,
}

impl NoiseModel for Conditioned<'_> {
    fn predict(&self, omega_t: &Tensor, t: usize) -> Result<Tensor> {
        self.bundle.noise_estimate(omega_t, t, &self.data)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epoch_losses: Vec<f64>,
    pub stopped_early: bool,
}

/// Everything needed to generate deltas for one selected layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionBundle {
    pub config: DiffusionConfig,
    pub schedule: NoiseSchedule,
    pub encoders: ConditionEncoders,
    pub denoiser: Denoiser,
    pub geometry: PadGeometry,
    pub layer: usize,
    pub base_checksum: String,
    pub history: Vec<f64>,
    adam: AdamState,
    marginals: Vec<(f64, f64)>,
}

impl DiffusionBundle {
    pub fn new(config: DiffusionConfig, manifest: &StoreManifest, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = RngStream::new(seed, 0x0D1F);
        let [rows, cols] = manifest.matrix_shape;
        let geometry = PadGeometry::new(rows, cols, config.denoiser.levels);
        let encoders = ConditionEncoders::new(manifest.cond_dims, config.d_cond, &mut rng)?;
        let denoiser = Denoiser::new(config.denoiser.clone(), geometry.side, config.d_cond, &mut rng)?;
        let names: Vec<String> = encoders
            .store
            .names
            .iter()
            .chain(&denoiser.store.names)
            .cloned()
            .collect();
        let adam = AdamState::new(
            names,
            encoders
                .store
                .tensors
                .iter()
                .chain(&denoiser.store.tensors)
                .map(|t| t.shape()),
        );
        let schedule = NoiseSchedule::new(config.steps)?;
        Ok(Self {
            marginals: schedule.sampler_marginals(),
            schedule,
            config,
            encoders,
            denoiser,
            geometry,
            layer: manifest.layer,
            base_checksum: manifest.base_checksum.clone(),
            history: Vec::new(),
            adam,
        })
    }

    pub fn param_names(&self) -> &[String] {
        self.adam.names()
    }

    /// Encoder tensors followed by denoiser tensors.
    pub fn params(&self) -> Vec<&Tensor> {
        self.encoders.store.tensors.iter().chain(&self.denoiser.store.tensors).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.encoders
            .store
            .tensors
            .iter_mut()
            .chain(self.denoiser.store.tensors.iter_mut())
            .collect()
    }

    pub fn check_manifest(&self, manifest: &StoreManifest) -> Result<()> {
        let [rows, cols] = manifest.matrix_shape;
        if rows != self.geometry.rows || cols != self.geometry.cols || manifest.layer != self.layer {
            return Err(Error::shape(&[self.geometry.rows, self.geometry.cols], &[rows, cols]));
        }
        if manifest.cond_dims != self.encoders.dims {
            return Err(Error::shape(&self.encoders.dims, &manifest.cond_dims));
        }
        Ok(())
    }

    pub fn encode(&self, cond: &ConditioningTuple) -> Result<EncodedCondition> {
        self.encoders.encode_data(cond)
    }

    /// `ε̂(Ω_t, e)` on the padded square.
    pub fn noise_estimate(&self, omega: &Tensor, t: usize, data: &EncodedCondition) -> Result<Tensor> {
        let e = self.encoders.at_step(data, t);
        let (raw, _) = self.denoiser.forward(omega, &e)?;
        Ok(self.to_noise(omega, t, raw))
    }

    fn to_noise(&self, omega: &Tensor, t: usize, raw: Tensor) -> Tensor {
        match self.config.denoiser.output {
            OutputParam::Epsilon => raw,
            OutputParam::CleanEstimate => {
                let (a, b) = self.schedule.mix(t);
                let s = self.geometry.side;
                let mut eps = omega.scaled(1.0 / b);
                for r in 0..self.geometry.rows {
                    for c in 0..self.geometry.cols {
                        eps.data_mut()[r * s + c] -= a / b * raw.data()[r * s + c];
                    }
                }
                eps
            }
        }
    }

    /// Objective `mean((ε̂ − ε)²)` for a fixed step and noise draw; when
    /// `grads` is given, parameter gradients are accumulated into it.
    fn objective_impl(
        &self,
        cond: &ConditioningTuple,
        delta: &Tensor,
        t: usize,
        eps: &Tensor,
        matched: bool,
        grads: Option<&mut [Tensor]>,
    ) -> Result<f64> {
        if t == 0 || t > self.schedule.steps() {
            return Err(Error::InvalidArgument(format!("step {t} outside 1..={}", self.schedule.steps())));
        }
        let target = self.geometry.pad(delta)?;
        let (a, b) = self.schedule.mix(t);
        let (omega, matched_eps);
        let eps = if matched {
            let (g, s) = self.marginals[t];
            let mut o = target.scaled(g);
            o.axpy(s, eps);
            // noise the forward process would have needed to produce this input
            let mut e = o.clone();
            e.axpy(-a, &target);
            matched_eps = e.scaled(1.0 / b);
            omega = o;
            &matched_eps
        } else {
            omega = self.schedule.q_sample(&target, t, eps)?;
            eps
        };
        let data = self.encoders.encode_data(cond)?;
        let e = self.encoders.at_step(&data, t);
        let (raw, cache) = self.denoiser.forward(&omega, &e)?;
        let pred = self.to_noise(&omega, t, raw);
        let n = pred.len() as f64 / self.step_weight(t);
        let resid = pred.sub(eps)?;
        let loss = resid.dot(&resid) / n;
        if !loss.is_finite() {
            return Err(Error::NonFinite("diffusion objective".into()));
        }
        if let Some(grads) = grads {
            let d_pred = resid.scaled(2.0 / n);
            let d_raw = match self.config.denoiser.output {
                OutputParam::Epsilon => d_pred,
                OutputParam::CleanEstimate => {
                    let s = self.geometry.side;
                    let mut d = Tensor::zeros(&[s, s]);
                    for r in 0..self.geometry.rows {
                        for c in 0..self.geometry.cols {
                            d.data_mut()[r * s + c] = -a / b * d_pred.data()[r * s + c];
                        }
                    }
                    d
                }
            };
            let n_enc = self.encoders.store.tensors.len();
            let (g_enc, g_den) = grads.split_at_mut(n_enc);
            let de = self.denoiser.backward(g_den, &cache, &d_raw)?;
            self.encoders.backward(cond, &de, g_enc)?;
        }
        Ok(loss)
    }

    pub fn objective(&self, cond: &ConditioningTuple, delta: &Tensor, t: usize, eps: &Tensor) -> Result<f64> {
        self.objective_impl(cond, delta, t, eps, false, None)
    }

    /// Objective on an input drawn from the sampler's marginals at step `t`.
    pub fn objective_matched(&self, cond: &ConditioningTuple, delta: &Tensor, t: usize, xi: &Tensor) -> Result<f64> {
        self.objective_impl(cond, delta, t, xi, true, None)
    }

    /// Objective and its gradient for every tensor in [`Self::params`].
    pub fn objective_and_gradients(
        &self,
        cond: &ConditioningTuple,
        delta: &Tensor,
        t: usize,
        eps: &Tensor,
    ) -> Result<(f64, Vec<Tensor>)> {
        let mut grads = self.zero_grads();
        let loss = self.objective_impl(cond, delta, t, eps, false, Some(&mut grads))?;
        Ok((loss, grads))
    }

    pub fn step_weight(&self, t: usize) -> f64 {
        match self.config.snr_clamp {
            Some(gamma) => {
                let ab = self.schedule.alpha_bar(t);
                let snr = ab / (1.0 - ab);
                snr.min(gamma) / snr
            }
            None => 1.0,
        }
    }

    fn zero_grads(&self) -> Vec<Tensor> {
        self.params().iter().map(|t| Tensor::zeros(t.shape())).collect()
    }

    /// One Adam step on a minibatch; returns the mean pre-step objective.
    pub fn train_batch(&mut self, records: &[&OverfitRecord], rng: &mut RngStream) -> Result<f64> {
        if records.is_empty() {
            return Err(Error::InvalidArgument("empty diffusion batch".into()));
        }
        let mut grads = self.zero_grads();
        let mut total = 0.0;
        let side = self.geometry.side;
        for rec in records {
            let t = 1 + rng.below(self.schedule.steps());
            let eps = rng.gaussian(&[side, side]);
            let matched = self.config.sampler_matched > 0.0 && rng.uniform() < self.config.sampler_matched;
            total += self.objective_impl(&rec.cond, &rec.delta, t, &eps, matched, Some(&mut grads))?;
        }
        let k = records.len() as f64;
        grads.iter_mut().for_each(|g| g.scale(1.0 / k));
        let lr = self.config.lr;
        let mut adam = std::mem::replace(&mut self.adam, AdamState::new(vec![], std::iter::empty()));
        let res = adam.step(&mut self.params_mut(), &grads, lr);
        self.adam = adam;
        res?;
        Ok(total / k)
    }

    /// Single-record training step.
    pub fn train_step(&mut self, record: &OverfitRecord, rng: &mut RngStream) -> Result<f64> {
        self.train_batch(&[record], rng)
    }

    /// Full passes over the corpus in shuffled minibatches with early
    /// stopping on the epoch-mean objective.
    pub fn train(&mut self, store: &RecordStore, rng: &mut RngStream) -> Result<TrainSummary> {
        self.check_manifest(&store.manifest)?;
        if store.is_empty() {
            return Err(Error::InvalidArgument("empty record store".into()));
        }
        let mut order: Vec<usize> = (0..store.len()).collect();
        let mut best = f64::INFINITY;
        let mut stale = 0;
        let mut losses = Vec::new();
        let mut stopped_early = false;
        for epoch in 0..self.config.epochs {
            rng.shuffle(&mut order);
            let mut sum = 0.0;
            for chunk in order.chunks(self.config.batch) {
                let batch: Vec<&OverfitRecord> = chunk.iter().map(|&i| &store.records[i]).collect();
                sum += self.train_batch(&batch, rng)? * batch.len() as f64;
            }
            let mean = sum / store.len() as f64;
            log::debug!("diffusion epoch {epoch}: objective {mean:.6}");
            losses.push(mean);
            self.history.push(mean);
            if mean < best * (1.0 - self.config.min_improvement) {
                best = mean;
                stale = 0;
            } else {
                stale += 1;
                if stale >= self.config.patience {
                    stopped_early = true;
                    break;
                }
            }
        }
        Ok(TrainSummary {
            epoch_losses: losses,
            stopped_early,
        })
    }

    pub fn conditioned(&self, cond: &ConditioningTuple) -> Result<Conditioned<'_>> {
        Ok(Conditioned {
            bundle: self,
            data: self.encode(cond)?,
        })
    }

    /// Standard-normal starting point on the padded square.
    pub fn initial_noise(&self, rng: &mut RngStream) -> Tensor {
        rng.gaussian(&[self.geometry.side, self.geometry.side])
    }

    /// Runs the sampler from a given `Ω_T` and crops to the layer shape.
    pub fn sample_from(&self, cond: &ConditioningTuple, omega_t: Tensor, z: Option<&mut RngStream>) -> Result<Tensor> {
        let model = self.conditioned(cond)?;
        let omega0 = ancestral_sample(&model, &self.schedule, omega_t, z)?;
        self.geometry.crop(&omega0)
    }

    /// Draws `Ω_T` from `rng`, then denoises (fresh `z` from the same
    /// stream unless `deterministic_z`).
    pub fn sample_delta(&self, cond: &ConditioningTuple, rng: &mut RngStream, deterministic_z: bool) -> Result<Tensor> {
        let start = self.initial_noise(rng);
        if deterministic_z {
            self.sample_from(cond, start, None)
        } else {
            self.sample_from(cond, start, Some(rng))
        }
    }

    pub fn save(&self, dir: &Path, seed: u64) -> Result<()> {
        let meta = json!({
            "config": self.config,
            "geometry": self.geometry,
            "layer": self.layer,
            "base_checksum": self.base_checksum,
            "cond_dims": self.encoders.dims,
            "alpha_bar": (0..=self.schedule.steps()).map(|t| self.schedule.alpha_bar(t)).collect::<Vec<_>>(),
            "adam_t": self.adam.t,
            "history": self.history,
        });
        let mut ck = Checkpoint::new(KIND, "train-diffusion", seed, meta);
        for (name, t) in self.param_names().iter().zip(self.params()) {
            ck.push(format!("p.{name}"), t.clone());
        }
        for (i, (m, v)) in self.adam.first_moments().iter().zip(self.adam.second_moments()).enumerate() {
            ck.push(format!("m.{i}"), m.clone());
            ck.push(format!("v.{i}"), v.clone());
        }
        ck.save(dir)
    }

    /// Loads a bundle; refuses it when it was trained against a different
    /// base model than `expected_checksum`.
    pub fn load(dir: &Path, expected_checksum: Option<&str>) -> Result<Self> {
        let ck = Checkpoint::load(dir)?;
        ck.expect_kind(KIND, dir)?;
        let base_checksum: String = ck.meta_field("base_checksum")?;
        if let Some(want) = expected_checksum {
            if want != base_checksum {
                return Err(Error::ChecksumMismatch {
                    expected: want.to_string(),
                    got: base_checksum,
                });
            }
        }
        let config: DiffusionConfig = ck.meta_field("config")?;
        let geometry: PadGeometry = ck.meta_field("geometry")?;
        let manifest = StoreManifest {
            layer: ck.meta_field("layer")?,
            matrix_shape: [geometry.rows, geometry.cols],
            input_dim: 0,
            cond_dims: ck.meta_field("cond_dims")?,
            records: 0,
            excluded: vec![],
            base_checksum,
            finetune: Default::default(),
        };
        let mut bundle = Self::new(config, &manifest, 0)?;
        let names = bundle.param_names().to_vec();
        for (name, p) in names.iter().zip(bundle.params_mut()) {
            let t = ck.get(&format!("p.{name}"))?;
            t.ensure_shape(p.shape())?;
            *p = t.clone();
        }
        let n = names.len();
        let m = (0..n).map(|i| ck.get(&format!("m.{i}")).cloned()).collect::<Result<Vec<_>>>()?;
        let v = (0..n).map(|i| ck.get(&format!("v.{i}")).cloned()).collect::<Result<Vec<_>>>()?;
        bundle.adam.restore(ck.meta_field("adam_t")?, m, v)?;
        bundle.history = ck.meta_field("history")?;
        Ok(bundle)
    }
}

/// `θ_OCD[L] = θ[L] + ρ̂·Ω_0`; every other layer is untouched.
pub fn apply_weights(model: &MlpModel, layer: usize, omega0: &Tensor, rho: f64) -> Result<MlpModel> {
    model.check_layer(layer)?;
    let mut out = model.clone();
    out.layers[layer].add_matrix(omega0, rho)?;
    Ok(out)
}
