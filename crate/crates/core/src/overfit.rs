//! Training corpus for the hypernetwork: each training sample is "overfit"
//! by a few gradient-descent steps on the selected layer only, and the
//! resulting weight delta is stored as a unit direction plus its norm,
//! together with the conditioning tuple the base model produces for it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::numkit::checkpoint::Checkpoint;
use crate::numkit::{loss_eval, LossKind, MlpModel, Target, Tensor};

/// Deltas at or below this norm carry no direction and are excluded.
pub const EPS_RHO: f64 = 1e-12;

/// What the base model sees of `x` around the selected layer: the layer's
/// input, its activation and the network output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditioningTuple {
    pub input: Vec<f64>,
    pub activation: Vec<f64>,
    pub output: Vec<f64>,
}

impl ConditioningTuple {
    pub fn dims(&self) -> [usize; 3] {
        [self.input.len(), self.activation.len(), self.output.len()]
    }
}

/// Conditioning tuple from the base model's forward trace at `layer`.
pub fn make_conditioning(model: &MlpModel, layer: usize, x: &[f64]) -> Result<ConditioningTuple> {
    model.check_layer(layer)?;
    let trace = model.forward(x)?;
    Ok(ConditioningTuple {
        input: trace.inputs[layer].clone(),
        activation: trace.post[layer].clone(),
        output: trace.output().to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerScope {
    One(usize),
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceCap {
    /// Stop once the relative loss change of a step falls below this.
    pub rel_tol: f64,
    pub max_steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub lr: f64,
    /// Keep stepping after `steps` until converged, up to the cap.
    #[serde(default)]
    pub until_converged: Option<ConvergenceCap>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 3,
            lr: 1e-2,
            until_converged: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneOutcome {
    pub model: MlpModel,
    pub loss_before: f64,
    pub loss_after: f64,
    pub steps_taken: usize,
}

fn sample_loss(model: &MlpModel, x: &[f64], target: Target<'_>, kind: LossKind) -> Result<(f64, Vec<f64>, crate::numkit::ForwardTrace)> {
    let trace = model.forward(x)?;
    let (loss, grad) = loss_eval(kind, trace.logits(), target)?;
    Ok((loss, grad, trace))
}

/// Plain gradient descent on a single `(x, target)` pair. Layers outside
/// `scope` are left bit-identical.
pub fn finetune_sample(
    model: &MlpModel,
    scope: LayerScope,
    x: &[f64],
    target: Target<'_>,
    cfg: &FinetuneConfig,
    sample_index: usize,
) -> Result<FinetuneOutcome> {
    if cfg.steps == 0 {
        return Err(Error::InvalidArgument("finetuning needs at least one step".into()));
    }
    let only = match scope {
        LayerScope::One(l) => {
            model.check_layer(l)?;
            Some(l)
        }
        LayerScope::All => None,
    };
    let kind = LossKind::for_head(model.spec.output_head);
    let mut current = model.clone();
    let (loss_before, mut grad, mut trace) = sample_loss(&current, x, target, kind)?;
    if !loss_before.is_finite() {
        return Err(Error::FinetuneDiverged { sample: sample_index });
    }
    let max_steps = cfg.until_converged.map_or(cfg.steps, |c| c.max_steps.max(cfg.steps));
    let mut loss = loss_before;
    let mut taken = 0;
    while taken < max_steps {
        let g = current.backward(&trace, &grad, only)?;
        for (l, lg) in g.layers.iter().enumerate() {
            if let Some(lg) = lg {
                current.layers[l].w.axpy(-cfg.lr, &lg.w);
                current.layers[l].b.axpy(-cfg.lr, &lg.b);
            }
        }
        taken += 1;
        let (next, ng, nt) = sample_loss(&current, x, target, kind)?;
        if !next.is_finite() {
            return Err(Error::FinetuneDiverged { sample: sample_index });
        }
        let change = (loss - next).abs() / loss.abs().max(1e-300);
        loss = next;
        grad = ng;
        trace = nt;
        if taken >= cfg.steps {
            match cfg.until_converged {
                None => break,
                Some(cap) if change < cap.rel_tol => break,
                Some(_) => {}
            }
        }
    }
    Ok(FinetuneOutcome {
        model: current,
        loss_before,
        loss_after: loss,
        steps_taken: taken,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum NormalizedDelta {
    /// Unit-norm direction in the layer's matrix layout and its original norm.
    Normalized { direction: Tensor, rho: f64 },
    Excluded { rho: f64 },
}

/// `(θ_s - θ) / ‖θ_s - θ‖` and `‖θ_s - θ‖` for `layer`, in the
/// `(in + 1) x out` matrix layout of [`crate::numkit::Dense::to_matrix`].
pub fn normalize_delta(tuned: &MlpModel, base: &MlpModel, layer: usize) -> Result<NormalizedDelta> {
    base.check_layer(layer)?;
    tuned.check_layer(layer)?;
    let diff = tuned.layers[layer].to_matrix().sub(&base.layers[layer].to_matrix())?;
    Ok(normalize_matrix(diff))
}

pub fn normalize_matrix(diff: Tensor) -> NormalizedDelta {
    let rho = diff.norm();
    if rho > EPS_RHO {
        let mut direction = diff;
        direction.data_mut().iter_mut().for_each(|v| *v /= rho);
        NormalizedDelta::Normalized { direction, rho }
    } else {
        NormalizedDelta::Excluded { rho }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverfitRecord {
    pub sample_index: usize,
    pub x: Vec<f64>,
    pub cond: ConditioningTuple,
    /// Unit-norm delta, `(in + 1) x out`.
    pub delta: Tensor,
    pub rho: f64,
    pub loss_before: f64,
    pub loss_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub layer: usize,
    pub matrix_shape: [usize; 2],
    pub input_dim: usize,
    pub cond_dims: [usize; 3],
    pub records: usize,
    pub excluded: Vec<usize>,
    pub base_checksum: String,
    pub finetune: FinetuneConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordStore {
    pub manifest: StoreManifest,
    pub records: Vec<OverfitRecord>,
}

pub const CHUNK: usize = 1000;

impl RecordStore {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Mean of `rho` over the store.
    pub fn mean_rho(&self) -> f64 {
        self.records.iter().map(|r| r.rho).sum::<f64>() / self.records.len().max(1) as f64
    }

    /// Record whose `x` is closest in L2; ties go to the lowest index.
    pub fn nearest(&self, x: &[f64]) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, r) in self.records.iter().enumerate() {
            let d: f64 = r.x.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        best.map(|(i, _)| i)
    }

    pub fn save(&self, dir: &Path, seed: u64) -> Result<()> {
        let meta = serde_json::to_value(&self.manifest)?;
        let mut ck = Checkpoint::new("record-store", "collect", seed, meta);
        let [rows, cols] = self.manifest.matrix_shape;
        let [di, da, dout] = self.manifest.cond_dims;
        let dx = self.manifest.input_dim;
        for (c, chunk) in self.records.chunks(CHUNK).enumerate() {
            let n = chunk.len();
            let gather = |f: &dyn Fn(&OverfitRecord) -> &[f64], width: usize| -> Result<Tensor> {
                let mut v = Vec::with_capacity(n * width);
                for r in chunk {
                    v.extend_from_slice(f(r));
                }
                Tensor::new(vec![n, width], v)
            };
            ck.push(format!("x.{c}"), gather(&|r| &r.x, dx)?);
            ck.push(format!("input.{c}"), gather(&|r| &r.cond.input, di)?);
            ck.push(format!("activation.{c}"), gather(&|r| &r.cond.activation, da)?);
            ck.push(format!("output.{c}"), gather(&|r| &r.cond.output, dout)?);
            ck.push(
                format!("delta.{c}"),
                gather(&|r| r.delta.data(), rows * cols)?.reshape(vec![n, rows, cols])?,
            );
            let scalars = |f: &dyn Fn(&OverfitRecord) -> f64| Tensor::from_vec(chunk.iter().map(f).collect());
            ck.push(format!("rho.{c}"), scalars(&|r| r.rho));
            ck.push(format!("loss_before.{c}"), scalars(&|r| r.loss_before));
            ck.push(format!("loss_after.{c}"), scalars(&|r| r.loss_after));
            ck.push(format!("sample_index.{c}"), scalars(&|r| r.sample_index as f64));
        }
        ck.save(dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let ck = Checkpoint::load(dir)?;
        ck.expect_kind("record-store", dir)?;
        let manifest: StoreManifest = serde_json::from_value(ck.meta.clone())?;
        let [rows, cols] = manifest.matrix_shape;
        let mut records = Vec::with_capacity(manifest.records);
        let chunks = manifest.records.div_ceil(CHUNK);
        for c in 0..chunks {
            let x = ck.get(&format!("x.{c}"))?;
            let inp = ck.get(&format!("input.{c}"))?;
            let act = ck.get(&format!("activation.{c}"))?;
            let out = ck.get(&format!("output.{c}"))?;
            let delta = ck.get(&format!("delta.{c}"))?;
            let rho = ck.get(&format!("rho.{c}"))?;
            let lb = ck.get(&format!("loss_before.{c}"))?;
            let la = ck.get(&format!("loss_after.{c}"))?;
            let idx = ck.get(&format!("sample_index.{c}"))?;
            let n = rho.len();
            if delta.shape() != [n, rows, cols] {
                return Err(Error::checkpoint(dir, format!("delta chunk {c} has shape {:?}", delta.shape())));
            }
            for i in 0..n {
                let d = delta.data()[i * rows * cols..(i + 1) * rows * cols].to_vec();
                records.push(OverfitRecord {
                    sample_index: idx.data()[i] as usize,
                    x: x.row(i).to_vec(),
                    cond: ConditioningTuple {
                        input: inp.row(i).to_vec(),
                        activation: act.row(i).to_vec(),
                        output: out.row(i).to_vec(),
                    },
                    delta: Tensor::new(vec![rows, cols], d)?,
                    rho: rho.data()[i],
                    loss_before: lb.data()[i],
                    loss_after: la.data()[i],
                });
            }
        }
        if records.len() != manifest.records {
            return Err(Error::checkpoint(dir, "record count differs from manifest"));
        }
        Ok(Self { manifest, records })
    }
}

/// Overfit every sample of `trainset` on `layer` and gather the records.
pub fn collect(model: &MlpModel, layer: usize, trainset: &Dataset, cfg: &FinetuneConfig) -> Result<RecordStore> {
    model.check_layer(layer)?;
    if trainset.is_empty() {
        return Err(Error::InvalidArgument("cannot collect from an empty training set".into()));
    }
    let shape = model.layers[layer].matrix_shape();
    let mut records = Vec::with_capacity(trainset.len());
    let mut excluded = Vec::new();
    for i in 0..trainset.len() {
        let x = trainset.x(i);
        let tuned = finetune_sample(model, LayerScope::One(layer), x, trainset.target(i), cfg, i)?;
        match normalize_delta(&tuned.model, model, layer)? {
            NormalizedDelta::Normalized { direction, rho } => records.push(OverfitRecord {
                sample_index: i,
                x: x.to_vec(),
                cond: make_conditioning(model, layer, x)?,
                delta: direction,
                rho,
                loss_before: tuned.loss_before,
                loss_after: tuned.loss_after,
            }),
            NormalizedDelta::Excluded { .. } => excluded.push(i),
        }
    }
    let l = &model.layers[layer];
    let manifest = StoreManifest {
        layer,
        matrix_shape: shape,
        input_dim: trainset.dim(),
        cond_dims: [l.inputs(), l.outputs(), model.spec.output_dim()],
        records: records.len(),
        excluded,
        base_checksum: model.checksum(),
        finetune: *cfg,
    };
    Ok(RecordStore { manifest, records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{Activation, Dense, Head, MlpSpec, RngStream};

    fn model(sizes: &[usize], head: Head, seed: u64) -> MlpModel {
        let spec = MlpSpec::new(sizes.to_vec(), Activation::Tanh, head).unwrap();
        MlpModel::init(spec, &mut RngStream::new(seed, 0)).unwrap()
    }

    #[test]
    fn exact_fit_gives_zero_delta() {
        let m = model(&[3, 4, 2], Head::LinearRegressor, 1);
        let x = [0.1, 0.5, -0.3];
        let y = m.output(&x).unwrap();
        let out = finetune_sample(&m, LayerScope::One(1), &x, Target::Values(&y), &FinetuneConfig::default(), 0).unwrap();
        assert_eq!(out.model, m);
        assert!(matches!(normalize_delta(&out.model, &m, 1).unwrap(), NormalizedDelta::Excluded { .. }));
    }

    #[test]
    fn single_step_matches_closed_form_linear_regression() {
        let m = model(&[3, 1], Head::LinearRegressor, 2);
        let x = [0.2, -1.0, 0.7];
        let y = [1.5];
        let cfg = FinetuneConfig { steps: 1, lr: 0.01, until_converged: None };
        let out = finetune_sample(&m, LayerScope::One(0), &x, Target::Values(&y), &cfg, 0).unwrap();
        let w = &m.layers[0].w;
        let pred: f64 = (0..3).map(|c| w.get2(0, c) * x[c]).sum::<f64>() + m.layers[0].b.data()[0];
        let r = pred - y[0];
        for c in 0..3 {
            let expect = w.get2(0, c) - 0.01 * 2.0 * r * x[c];
            assert!((out.model.layers[0].w.get2(0, c) - expect).abs() < 1e-15);
        }
        let eb = m.layers[0].b.data()[0] - 0.01 * 2.0 * r;
        assert!((out.model.layers[0].b.data()[0] - eb).abs() < 1e-15);
    }

    #[test]
    fn finetune_touches_only_selected_layer() {
        let m = model(&[2, 5, 5, 3], Head::SoftmaxClassifier, 3);
        let out = finetune_sample(&m, LayerScope::One(1), &[0.3, 0.9], Target::Class(2), &FinetuneConfig::default(), 0).unwrap();
        assert_eq!(out.model.layers[0], m.layers[0]);
        assert_eq!(out.model.layers[2], m.layers[2]);
        assert_ne!(out.model.layers[1], m.layers[1]);
        assert!(out.loss_after < out.loss_before);
        assert_eq!(out.steps_taken, 3);
    }

    #[test]
    fn convergence_cap_runs_longer() {
        let m = model(&[2, 5, 3], Head::SoftmaxClassifier, 3);
        let cfg = FinetuneConfig {
            steps: 3,
            lr: 0.1,
            until_converged: Some(ConvergenceCap { rel_tol: 1e-3, max_steps: 200 }),
        };
        let out = finetune_sample(&m, LayerScope::One(1), &[0.3, 0.9], Target::Class(2), &cfg, 0).unwrap();
        assert!(out.steps_taken > 3 && out.steps_taken <= 200);
        assert!(finetune_sample(&m, LayerScope::One(1), &[0.3, 0.9], Target::Class(2), &FinetuneConfig { steps: 0, ..cfg }, 0).is_err());
    }

    #[test]
    fn divergence_reports_sample() {
        let m = model(&[2, 3, 1], Head::LinearRegressor, 4);
        let cfg = FinetuneConfig { steps: 3, lr: 1e300, until_converged: None };
        let r = finetune_sample(&m, LayerScope::One(1), &[1.0, 1.0], Target::Values(&[1e10]), &cfg, 17);
        assert!(matches!(r, Err(Error::FinetuneDiverged { sample: 17 })), "{r:?}");
    }

    #[test]
    fn normalize_three_four_five() {
        let base = MlpModel::zeros(MlpSpec::new(vec![1, 1], Activation::Tanh, Head::LinearRegressor).unwrap()).unwrap();
        let mut tuned = base.clone();
        tuned.layers[0] = Dense::from_matrix(&Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap()).unwrap();
        match normalize_delta(&tuned, &base, 0).unwrap() {
            NormalizedDelta::Normalized { direction, rho } => {
                assert_eq!(rho, 5.0);
                assert_eq!(direction.data(), &[0.6, 0.8]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unit_norm_for_random_deltas() {
        let mut rng = RngStream::new(5, 0);
        for _ in 0..1000 {
            let scale = (rng.normal() * 5.0).exp();
            let d = rng.gaussian(&[4, 3]).scaled(scale);
            if let NormalizedDelta::Normalized { direction, .. } = normalize_matrix(d) {
                assert!((direction.norm() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn conditioning_for_first_layer_is_raw_input() {
        let m = model(&[3, 4, 2], Head::SoftmaxClassifier, 6);
        let x = [0.1, 0.2, 0.3];
        let c = make_conditioning(&m, 0, &x).unwrap();
        assert_eq!(c.input, x.to_vec());
        assert_eq!(c.output, m.output(&x).unwrap());
        let mut later = m.clone();
        later.layers[1].w.fill(0.7);
        let c2 = make_conditioning(&later, 0, &x).unwrap();
        assert_eq!(c.input, c2.input);
        assert_eq!(c.activation, c2.activation);
    }

    #[test]
    fn store_roundtrip_and_counts() {
        let m = model(&[2, 4, 3], Head::SoftmaxClassifier, 7);
        let d = crate::datasets::gen_blobs(8, 2100, 3, 1.0, 2).unwrap();
        let store = collect(&m, 1, &d, &FinetuneConfig::default()).unwrap();
        assert_eq!(store.len() + store.manifest.excluded.len(), d.len());
        let dir = tempfile::tempdir().unwrap();
        store.save(dir.path(), 1).unwrap();
        let back = RecordStore::load(dir.path()).unwrap();
        assert_eq!(back, store);
        for r in store.records.iter().take(50) {
            assert_eq!(make_conditioning(&m, 1, &r.x).unwrap(), r.cond);
        }
        let dup = store.records[123].x.clone();
        assert_eq!(store.records[store.nearest(&dup).unwrap()].sample_index, store.records[123].sample_index);
    }
}
