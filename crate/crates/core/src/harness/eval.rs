//! Test-time variants and their metrics.
//!
//! Variants see test inputs through [`TestSet`] and can reach labels only
//! through [`AuditedLabels::read`], which records the reader. Scoring reads
//! labels through a separate, unlogged path.

use std::cell::RefCell;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datasets::{Dataset, Targets, Task};
use crate::error::{Error, Result};
use crate::hyperdiff::{apply_weights, DiffusionBundle};
use crate::numkit::{Head, MlpModel, RngStream, Target, Tensor};
use crate::overfit::{finetune_sample, make_conditioning, FinetuneConfig, LayerScope, RecordStore};
use crate::scale::{scale_forward, ScaleModel};

use super::config::Variant;

/// Test labels behind an access log.
#[derive(Debug)]
pub struct AuditedLabels {
    targets: Targets,
    log: RefCell<BTreeMap<Variant, usize>>,
}

impl AuditedLabels {
    /// Label of test sample `i`, charged to `reader`.
    pub fn read(&self, reader: Variant, i: usize) -> Target<'_> {
        *self.log.borrow_mut().entry(reader).or_insert(0) += 1;
        target_of(&self.targets, i)
    }

    /// Reads per variant so far.
    pub fn reads(&self) -> BTreeMap<Variant, usize> {
        self.log.borrow().clone()
    }
}

fn target_of(targets: &Targets, i: usize) -> Target<'_> {
    match targets {
        Targets::Labels(l) => Target::Class(l[i]),
        Targets::Values(v) => Target::Values(v.row(i)),
    }
}

/// Test inputs with audited labels.
#[derive(Debug)]
pub struct TestSet {
    pub task: Task,
    inputs: Tensor,
    pub labels: AuditedLabels,
}

impl TestSet {
    pub fn new(data: Dataset) -> Self {
        Self {
            task: data.task,
            inputs: data.inputs,
            labels: AuditedLabels {
                targets: data.targets,
                log: RefCell::new(BTreeMap::new()),
            },
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn x(&self, i: usize) -> &[f64] {
        self.inputs.row(i)
    }
}

/// Per-sample model output in the form the metrics need.
#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    /// Log class probabilities.
    LogProbs(Vec<f64>),
    Values(Vec<f64>),
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

pub fn predict(model: &MlpModel, x: &[f64]) -> Result<Prediction> {
    let trace = model.forward(x)?;
    Ok(match model.spec.output_head {
        Head::SoftmaxClassifier => Prediction::LogProbs(log_softmax(trace.logits())),
        Head::LinearRegressor => Prediction::Values(trace.output().to_vec()),
    })
}

/// Average of predictions: probabilities for classifiers (computed in log
/// space), values for regressors.
pub fn average_predictions(preds: &[Prediction]) -> Result<Prediction> {
    let first = preds
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot average zero predictions".into()))?;
    let k = preds.len() as f64;
    match first {
        Prediction::LogProbs(p0) => {
            let mut out = Vec::with_capacity(p0.len());
            for c in 0..p0.len() {
                let col: Vec<f64> = preds
                    .iter()
                    .map(|p| match p {
                        Prediction::LogProbs(v) => v[c],
                        Prediction::Values(_) => f64::NAN,
                    })
                    .collect();
                let m = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = col.iter().map(|v| (v - m).exp()).sum();
                out.push(m + s.ln() - k.ln());
            }
            Ok(Prediction::LogProbs(out))
        }
        Prediction::Values(v0) => {
            let mut out = vec![0.0; v0.len()];
            for p in preds {
                match p {
                    Prediction::Values(v) => out.iter_mut().zip(v).for_each(|(o, x)| *o += x),
                    Prediction::LogProbs(_) => return Err(Error::InvalidArgument("mixed prediction kinds".into())),
                }
            }
            out.iter_mut().for_each(|o| *o /= k);
            Ok(Prediction::Values(out))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleMode {
    /// Average the k networks' output probabilities.
    LogitAvg,
    /// Average the k generated weights, predict once.
    WeightAvg,
}

/// Artifacts of one trained OCD branch: the selected layer's corpus,
/// diffusion model and scale estimator.
#[derive(Debug, Clone)]
pub struct OcdArtifacts {
    pub layer: usize,
    pub store: RecordStore,
    pub bundle: DiffusionBundle,
    pub scale: ScaleModel,
}

/// Generated weights for one input: `k` unit-norm draws and the predicted
/// magnitude.
#[derive(Debug, Clone, PartialEq)]
pub struct DrawSet {
    pub rho_hat: f64,
    pub omegas: Vec<Tensor>,
}

/// `k` diffusion draws for `x`, draw `j` from `streams(j)`.
pub fn ocd_draws(
    arts: &OcdArtifacts,
    base: &MlpModel,
    x: &[f64],
    k: usize,
    streams: impl Fn(usize) -> RngStream,
) -> Result<DrawSet> {
    let cond = make_conditioning(base, arts.layer, x)?;
    let rho_hat = scale_forward(&arts.scale, x, &cond)?;
    let omegas = (0..k)
        .map(|j| arts.bundle.sample_delta(&cond, &mut streams(j), false))
        .collect::<Result<Vec<_>>>()?;
    Ok(DrawSet { rho_hat, omegas })
}

/// Prediction of the first `k` draws combined by `mode`.
pub fn ensemble_predict(base: &MlpModel, layer: usize, draws: &DrawSet, k: usize, mode: EnsembleMode, x: &[f64]) -> Result<Prediction> {
    if k == 0 || k > draws.omegas.len() {
        return Err(Error::InvalidArgument(format!(
            "ensemble of {k} from {} draws",
            draws.omegas.len()
        )));
    }
    let omegas = &draws.omegas[..k];
    match mode {
        EnsembleMode::LogitAvg => {
            let preds = omegas
                .iter()
                .map(|o| predict(&apply_weights(base, layer, o, draws.rho_hat)?, x))
                .collect::<Result<Vec<_>>>()?;
            average_predictions(&preds)
        }
        EnsembleMode::WeightAvg => {
            let mut mean = omegas[0].clone();
            for o in &omegas[1..] {
                mean.axpy(1.0, o);
            }
            mean.scale(1.0 / k as f64);
            predict(&apply_weights(base, layer, &mean, draws.rho_hat)?, x)
        }
    }
}

/// Number of bitwise-distinct tensors.
pub fn distinct_count(ts: &[Tensor]) -> usize {
    let mut seen: Vec<&Tensor> = Vec::new();
    for t in ts {
        let dup = seen
            .iter()
            .any(|s| s.shape() == t.shape() && s.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        if !dup {
            seen.push(t);
        }
    }
    seen.len()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Cross-entropy for classification, squared error for regression.
    pub loss: f64,
    pub accuracy: Option<f64>,
}

/// Scores predictions against the test labels without touching the audit
/// log.
pub fn score(test: &TestSet, preds: &[Prediction]) -> Result<Metrics> {
    if preds.len() != test.len() || preds.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} test samples",
            preds.len(),
            test.len()
        )));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    let mut classification = false;
    for (i, p) in preds.iter().enumerate() {
        match (p, target_of(&test.labels.targets, i)) {
            (Prediction::LogProbs(lp), Target::Class(y)) => {
                classification = true;
                loss -= lp[y];
                let arg = (0..lp.len()).fold(0, |b, c| if lp[c] > lp[b] { c } else { b });
                correct += usize::from(arg == y);
            }
            (Prediction::Values(v), Target::Values(t)) => {
                loss += v.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            }
            _ => return Err(Error::InvalidArgument("prediction kind does not match the task".into())),
        }
    }
    let n = preds.len() as f64;
    Ok(Metrics {
        loss: loss / n,
        accuracy: classification.then(|| correct as f64 / n),
    })
}

/// Everything a variant may use: read-only artifacts and the per-seed
/// draw streams.
#[derive(Debug, Clone, Copy)]
pub struct EvalContext<'a> {
    pub seed: u64,
    pub base: &'a MlpModel,
    pub primary: Option<&'a OcdArtifacts>,
    pub alt: Option<&'a OcdArtifacts>,
    pub bound_finetune: FinetuneConfig,
    pub ensemble_k: usize,
}

const STREAM_DRAWS: u64 = 0xD4A0;
const STREAM_DRAWS_ALT: u64 = 0xD4A1;

/// Stream for draw `j` of test sample `i`; the single-draw variants use
/// draw 0.
pub fn draw_stream(seed: u64, alt: bool, i: usize, j: usize) -> RngStream {
    let id = if alt { STREAM_DRAWS_ALT } else { STREAM_DRAWS };
    RngStream::new(seed, id).fork(((i as u64) << 20) | j as u64)
}

fn missing(v: Variant, what: &str) -> Error {
    Error::MissingArtifact {
        variant: v.name().to_string(),
        artifact: what.to_string(),
    }
}

impl<'a> EvalContext<'a> {
    fn primary(&self, v: Variant) -> Result<&'a OcdArtifacts> {
        self.primary.ok_or_else(|| missing(v, "selected-layer pipeline"))
    }

    fn draws(&self, v: Variant, alt: bool, test: &TestSet, k: usize) -> Result<Vec<DrawSet>> {
        let arts = if alt {
            self.alt.ok_or_else(|| missing(v, "runner-up layer pipeline"))?
        } else {
            self.primary(v)?
        };
        (0..test.len())
            .map(|i| ocd_draws(arts, self.base, test.x(i), k, |j| draw_stream(self.seed, alt, i, j)))
            .collect()
    }
}

/// Draws shared by the diffusion-based variants of one evaluation.
#[derive(Debug, Clone)]
pub struct SharedDraws {
    pub sets: Vec<DrawSet>,
}

impl SharedDraws {
    /// `k` primary draws per test sample; errors are charged to `requester`.
    pub fn generate(ctx: &EvalContext<'_>, test: &TestSet, k: usize, requester: Variant) -> Result<Self> {
        Ok(Self {
            sets: ctx.draws(requester, false, test, k)?,
        })
    }
}

/// Predictions of one variant on every test sample. `shared` must hold at
/// least `ensemble_k` draws for the ensemble variants; it is generated on
/// demand when absent.
pub fn variant_predictions(
    v: Variant,
    ctx: &EvalContext<'_>,
    test: &TestSet,
    shared: Option<&SharedDraws>,
) -> Result<Vec<Prediction>> {
    let n = test.len();
    let needed = match v {
        Variant::EnsembleLogitAvg | Variant::EnsembleWeightAvg => ctx.ensemble_k,
        _ => 1,
    };
    let owned;
    let draws = if v.needs_diffusion() {
        match shared {
            Some(s) if s.sets.first().is_none_or(|d| d.omegas.len() >= needed) => Some(s),
            _ => {
                owned = SharedDraws::generate(ctx, test, needed, v)?;
                Some(&owned)
            }
        }
    } else {
        None
    };
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let x = test.x(i);
        let p = match v {
            Variant::Base => predict(ctx.base, x)?,
            Variant::Ocd | Variant::OcdNoScale => {
                let arts = ctx.primary(v)?;
                let d = &draws.expect("diffusion variant").sets[i];
                let rho = if v == Variant::Ocd { d.rho_hat } else { arts.scale.rho_bar };
                predict(&apply_weights(ctx.base, arts.layer, &d.omegas[0], rho)?, x)?
            }
            Variant::EnsembleLogitAvg | Variant::EnsembleWeightAvg => {
                let arts = ctx.primary(v)?;
                let mode = if v == Variant::EnsembleLogitAvg {
                    EnsembleMode::LogitAvg
                } else {
                    EnsembleMode::WeightAvg
                };
                let d = &draws.expect("diffusion variant").sets[i];
                ensemble_predict(ctx.base, arts.layer, d, ctx.ensemble_k, mode, x)?
            }
            Variant::NearestNeighbor => {
                let arts = ctx.primary(v)?;
                let r = arts
                    .store
                    .nearest(x)
                    .ok_or_else(|| missing(v, "non-empty record store"))?;
                let rec = &arts.store.records[r];
                predict(&apply_weights(ctx.base, arts.layer, &rec.delta, rec.rho)?, x)?
            }
            Variant::AltLayer => {
                let arts = ctx.alt.ok_or_else(|| missing(v, "runner-up layer pipeline"))?;
                let d = ocd_draws(arts, ctx.base, x, 1, |j| draw_stream(ctx.seed, true, i, j))?;
                predict(&apply_weights(ctx.base, arts.layer, &d.omegas[0], d.rho_hat)?, x)?
            }
            Variant::OverfitOnTest | Variant::OverfitOnTestAll => {
                let scope = if v == Variant::OverfitOnTest {
                    LayerScope::One(ctx.primary(v)?.layer)
                } else {
                    LayerScope::All
                };
                let y = test.labels.read(v, i);
                let tuned = finetune_sample(ctx.base, scope, x, y, &ctx.bound_finetune, i)?;
                predict(&tuned.model, x)?
            }
        };
        out.push(p);
    }
    Ok(out)
}

pub fn eval_variant(v: Variant, ctx: &EvalContext<'_>, test: &TestSet, shared: Option<&SharedDraws>) -> Result<Metrics> {
    score(test, &variant_predictions(v, ctx, test, shared)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantMetrics {
    pub variant: Variant,
    #[serde(flatten)]
    pub metrics: Metrics,
}

/// Ensemble diagnostics over the primary draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleStats {
    pub k: usize,
    /// Fewest distinct generated layer deltas among any test sample's draws.
    pub distinct_min: usize,
    /// Metric of each single draw `j` used alone.
    pub single_draw: Vec<Metrics>,
    pub single_draw_mean_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedEval {
    pub seed: u64,
    pub metrics: Vec<VariantMetrics>,
    pub ensemble: Option<EnsembleStats>,
    /// Test-label reads charged to each evaluated variant.
    pub label_reads: BTreeMap<Variant, usize>,
}

impl SeedEval {
    pub fn get(&self, v: Variant) -> Option<&Metrics> {
        self.metrics.iter().find(|m| m.variant == v).map(|m| &m.metrics)
    }
}

/// Evaluates `variants` (in the given order) sharing one set of draws.
pub fn evaluate(ctx: &EvalContext<'_>, test: &TestSet, variants: &[Variant]) -> Result<SeedEval> {
    let ensembles = variants
        .iter()
        .any(|v| matches!(v, Variant::EnsembleLogitAvg | Variant::EnsembleWeightAvg));
    let k = if ensembles { ctx.ensemble_k } else { 1 };
    let shared = match variants.iter().find(|v| v.needs_diffusion()) {
        Some(&v) => Some(SharedDraws::generate(ctx, test, k, v)?),
        None => None,
    };
    let mut metrics = Vec::with_capacity(variants.len());
    for &v in variants {
        let m = eval_variant(v, ctx, test, shared.as_ref())?;
        log::info!("seed {}: {v} loss {:.5}", ctx.seed, m.loss);
        metrics.push(VariantMetrics { variant: v, metrics: m });
    }
    let ensemble = match (&shared, ensembles) {
        (Some(s), true) => {
            let arts = ctx.primary(Variant::EnsembleLogitAvg)?;
            let mut single_draw = Vec::with_capacity(k);
            for j in 0..k {
                let preds = (0..test.len())
                    .map(|i| {
                        let d = &s.sets[i];
                        predict(&apply_weights(ctx.base, arts.layer, &d.omegas[j], d.rho_hat)?, test.x(i))
                    })
                    .collect::<Result<Vec<_>>>()?;
                single_draw.push(score(test, &preds)?);
            }
            let distinct_min = s.sets.iter().map(|d| distinct_count(&d.omegas)).min().unwrap_or(0);
            let single_draw_mean_loss = single_draw.iter().map(|m| m.loss).sum::<f64>() / k as f64;
            Some(EnsembleStats {
                k,
                distinct_min,
                single_draw,
                single_draw_mean_loss,
            })
        }
        _ => None,
    };
    let mut label_reads = test.labels.reads();
    for &v in variants {
        label_reads.entry(v).or_insert(0);
    }
    Ok(SeedEval {
        seed: ctx.seed,
        metrics,
        ensemble,
        label_reads,
    })
}
