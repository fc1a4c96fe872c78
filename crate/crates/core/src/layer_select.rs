//! Layer selection by the entropy of the loss under random perturbation of
//! one layer's parameters.
//!
//! For each candidate layer the parameters of that layer alone are jittered
//! with i.i.d. Gaussian noise, the per-sample loss is recorded for many
//! draws, and the differential entropy of that loss distribution is
//! estimated with a Gaussian KDE. The layer with the highest mean entropy
//! over a subset of training samples is selected.

use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::numkit::{loss_eval, Dense, LossKind, MlpModel, RngStream, Target};

/// Silverman's rule of thumb: `0.9 · min(σ̂, IQR/1.34) · m^(-1/5)`.
///
/// Falls back to `σ̂` when the IQR collapses to zero (more than half the
/// samples tied) but the sample is not constant.
pub fn silverman_bandwidth(xs: &[f64]) -> Result<f64> {
    let m = xs.len();
    if m < 2 {
        return Err(Error::InvalidArgument("KDE needs at least two samples".into()));
    }
    let mean = xs.iter().sum::<f64>() / m as f64;
    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m as f64 - 1.0);
    if !var.is_finite() {
        return Err(Error::NonFinite("loss samples".into()));
    }
    if var <= 0.0 {
        return Err(Error::Degenerate("all samples are equal".into()));
    }
    let sd = var.sqrt();
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    Ok(0.9 * spread * (m as f64).powf(-0.2))
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let f = pos - lo as f64;
    sorted[lo] * (1.0 - f) + sorted[hi] * f
}

/// Grid points per bandwidth in the binned density evaluation.
const GRID_PER_BANDWIDTH: f64 = 16.0;
/// Kernel truncation in bandwidths; the Gaussian tail beyond is below 1e-10.
const KERNEL_REACH: f64 = 7.0;
const MAX_GRID: usize = 1 << 16;

/// Plug-in entropy `-(1/m) Σ_i ln p̂(ℓ_i)` in nats, where `p̂` is a Gaussian
/// KDE with Silverman bandwidth evaluated at the samples themselves.
///
/// The density is computed on a linearly binned grid (spacing `h/16`) and
/// interpolated back to the samples, which makes the cost linear in `m`.
pub fn kde_entropy(losses: &[f64]) -> Result<f64> {
    // sorted order fixes every floating-point summation, so the result is
    // exactly invariant to permutations of the input
    let mut losses = losses.to_vec();
    losses.sort_by(f64::total_cmp);
    let h = silverman_bandwidth(&losses)?;
    let m = losses.len() as f64;
    let (lo, hi) = (losses[0], losses[losses.len() - 1]);
    let range = hi - lo;
    let cells = ((range / h) * GRID_PER_BANDWIDTH).ceil().max(1.0) as usize;
    let grid = (cells + 1).min(MAX_GRID);
    let step = if grid > 1 { range / (grid - 1) as f64 } else { h };

    let mut counts = vec![0.0; grid + 1];
    let mut positions = Vec::with_capacity(losses.len());
    for &x in &losses {
        let pos = ((x - lo) / step).min((grid - 1) as f64);
        let i = pos.floor() as usize;
        let f = pos - i as f64;
        counts[i] += 1.0 - f;
        counts[i + 1] += f;
        positions.push((i, f));
    }

    let reach = ((KERNEL_REACH * h) / step).ceil() as usize;
    let norm = 1.0 / (m * h * (2.0 * std::f64::consts::PI).sqrt());
    let kernel: Vec<f64> = (0..=reach)
        .map(|k| {
            let u = k as f64 * step / h;
            norm * (-0.5 * u * u).exp()
        })
        .collect();

    let mut density = vec![0.0; grid + 1];
    for (g, d) in density.iter_mut().enumerate() {
        let a = g.saturating_sub(reach);
        let b = (g + reach).min(grid);
        let mut s = 0.0;
        for (j, c) in counts[a..=b].iter().enumerate() {
            if *c != 0.0 {
                s += c * kernel[(a + j).abs_diff(g)];
            }
        }
        *d = s;
    }

    let mut total = 0.0;
    for (i, f) in positions {
        let p = density[i] * (1.0 - f) + density[i + 1] * f;
        total += p.ln();
    }
    Ok(-total / m)
}

/// Copy of `model` with layer `layer` (weights and bias) jittered by
/// i.i.d. `N(0, sigma²)` noise.
pub fn perturb_layer(model: &MlpModel, layer: usize, sigma: f64, rng: &mut RngStream) -> Result<MlpModel> {
    model.check_layer(layer)?;
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("perturbation sigma must be positive, got {sigma}")));
    }
    let mut out = model.clone();
    jitter(&model.layers[layer], &mut out.layers[layer], sigma, rng);
    Ok(out)
}

fn jitter(base: &Dense, into: &mut Dense, sigma: f64, rng: &mut RngStream) {
    rng.fill_normal(into.w.data_mut());
    for (v, b) in into.w.data_mut().iter_mut().zip(base.w.data()) {
        *v = b + sigma * *v;
    }
    rng.fill_normal(into.b.data_mut());
    for (v, b) in into.b.data_mut().iter_mut().zip(base.b.data()) {
        *v = b + sigma * *v;
    }
}

/// `m` losses of `(x, target)`, each under a fresh perturbation of `layer`.
pub fn loss_samples(
    model: &MlpModel,
    x: &[f64],
    target: Target<'_>,
    layer: usize,
    m: usize,
    sigma: f64,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    model.check_layer(layer)?;
    if m < 2 {
        return Err(Error::InvalidArgument("need at least two loss draws".into()));
    }
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("perturbation sigma must be positive, got {sigma}")));
    }
    let kind = LossKind::for_head(model.spec.output_head);
    let trace = model.forward(x)?;
    let input = &trace.inputs[layer];
    let mut scratch = model.clone();
    let mut out = Vec::with_capacity(m);
    for _ in 0..m {
        jitter(&model.layers[layer], &mut scratch.layers[layer], sigma, rng);
        let logits = scratch.logits_from(layer, input);
        let (loss, _) = loss_eval(kind, &logits, target)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("perturbed loss".into()));
        }
        out.push(loss);
    }
    Ok(out)
}

/// Mean per-sample entropy over `subset`. A degenerate sample makes the
/// whole score `-∞`.
pub fn layer_score(
    model: &MlpModel,
    subset: &Dataset,
    layer: usize,
    m: usize,
    sigma: f64,
    rng: &RngStream,
) -> Result<f64> {
    if subset.is_empty() {
        return Err(Error::InvalidArgument("layer score needs a non-empty subset".into()));
    }
    let mut total = 0.0;
    for i in 0..subset.len() {
        let mut stream = rng.fork(((layer as u64) << 32) | i as u64);
        let losses = loss_samples(model, subset.x(i), subset.target(i), layer, m, sigma, &mut stream)?;
        match kde_entropy(&losses) {
            Ok(h) => total += h,
            Err(Error::Degenerate(_)) => return Ok(f64::NEG_INFINITY),
            Err(e) => return Err(e),
        }
    }
    Ok(total / subset.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    /// Loss draws per sample.
    pub draws: usize,
    /// Perturbation std relative to the layer's parameter RMS.
    pub sigma_rel: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            draws: 10_000,
            sigma_rel: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerScore {
    pub layer: usize,
    /// Mean entropy in nats; `None` when some sample's losses were constant.
    pub mean_entropy: Option<f64>,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerScoreReport {
    pub scores: Vec<LayerScore>,
    pub subset_size: usize,
    pub draws: usize,
    pub ranking: Vec<usize>,
    pub selected: usize,
    pub runner_up: Option<usize>,
    pub bandwidth_rule: String,
}

impl LayerScoreReport {
    /// Plain-text table: layer, score, sigma, draws.
    pub fn to_table(&self) -> String {
        let mut s = format!("{:>5}  {:>12}  {:>12}  {:>6}\n", "layer", "entropy", "sigma", "m");
        for &l in &self.ranking {
            let sc = &self.scores[l];
            let e = sc.mean_entropy.map_or("-inf".to_string(), |v| format!("{v:.6}"));
            s.push_str(&format!("{:>5}  {:>12}  {:>12.6e}  {:>6}\n", l, e, sc.sigma, self.draws));
        }
        s.push_str(&format!(
            "selected layer {}, runner-up {}\n",
            self.selected,
            self.runner_up.map_or("none".into(), |r| r.to_string())
        ));
        s
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["layer", "mean_entropy", "sigma", "draws", "subset_size", "rank"])?;
        for (rank, &l) in self.ranking.iter().enumerate() {
            let sc = &self.scores[l];
            w.write_record([
                l.to_string(),
                sc.mean_entropy.map_or("-inf".into(), |v| format!("{v:?}")),
                format!("{:?}", sc.sigma),
                self.draws.to_string(),
                self.subset_size.to_string(),
                rank.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }
}

/// Rank by descending score, ties and `-∞` resolved towards lower indices.
pub fn rank_layers(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

pub fn select_layer(
    model: &MlpModel,
    subset: &Dataset,
    cfg: &SelectionConfig,
    rng: &RngStream,
) -> Result<LayerScoreReport> {
    let mut scores = Vec::with_capacity(model.depth());
    let mut raw = Vec::with_capacity(model.depth());
    for (l, layer) in model.layers.iter().enumerate() {
        let sigma = cfg.sigma_rel * layer.rms();
        let sigma = if sigma > 0.0 { sigma } else { cfg.sigma_rel };
        let s = layer_score(model, subset, l, cfg.draws, sigma, rng)?;
        log::info!("layer {l}: mean loss entropy {s:.5} nats (sigma {sigma:.3e})");
        raw.push(s);
        scores.push(LayerScore {
            layer: l,
            mean_entropy: s.is_finite().then_some(s),
            sigma,
        });
    }
    let ranking = rank_layers(&raw);
    Ok(LayerScoreReport {
        scores,
        subset_size: subset.len(),
        draws: cfg.draws,
        selected: ranking[0],
        runner_up: ranking.get(1).copied(),
        ranking,
        bandwidth_rule: "silverman: 0.9*min(sd, iqr/1.34)*m^-0.2, gaussian kernel, plug-in".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{Activation, Head, MlpSpec};

    fn model(sizes: &[usize]) -> MlpModel {
        let spec = MlpSpec::new(sizes.to_vec(), Activation::Tanh, Head::SoftmaxClassifier).unwrap();
        MlpModel::init(spec, &mut RngStream::new(4, 0)).unwrap()
    }

    #[test]
    fn perturb_touches_one_layer() {
        let m = model(&[2, 5, 5, 3]);
        let p = perturb_layer(&m, 1, 0.5, &mut RngStream::new(1, 1)).unwrap();
        assert_eq!(p.layers[0], m.layers[0]);
        assert_eq!(p.layers[2], m.layers[2]);
        assert_ne!(p.layers[1], m.layers[1]);
        assert!(perturb_layer(&m, 3, 0.5, &mut RngStream::new(1, 1)).is_err());
    }

    #[test]
    fn perturbation_std_matches_sigma() {
        let m = model(&[500, 200, 3]);
        let p = perturb_layer(&m, 0, 0.3, &mut RngStream::new(2, 2)).unwrap();
        let diffs: Vec<f64> = p.layers[0]
            .w
            .data()
            .iter()
            .zip(m.layers[0].w.data())
            .map(|(a, b)| a - b)
            .chain(p.layers[0].b.data().iter().zip(m.layers[0].b.data()).map(|(a, b)| a - b))
            .collect();
        assert!(diffs.len() >= 100_000);
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((sd / 0.3 - 1.0).abs() < 0.01, "sd {sd}");
    }

    #[test]
    fn tiny_sigma_reproduces_base_loss() {
        let m = model(&[2, 4, 3]);
        let x = [0.3, -0.8];
        let base = loss_eval(LossKind::SoftmaxCe, m.forward(&x).unwrap().logits(), Target::Class(1))
            .unwrap()
            .0;
        let ls = loss_samples(&m, &x, Target::Class(1), 0, 50, 1e-12, &mut RngStream::new(3, 3)).unwrap();
        assert!(ls.iter().all(|l| (l - base).abs() < 1e-6 && l.is_finite()));
        let again = loss_samples(&m, &x, Target::Class(1), 0, 2, 0.1, &mut RngStream::new(5, 5)).unwrap();
        let twice = loss_samples(&m, &x, Target::Class(1), 0, 2, 0.1, &mut RngStream::new(5, 5)).unwrap();
        assert_eq!(again, twice);
        assert!(loss_samples(&m, &x, Target::Class(1), 0, 1, 0.1, &mut RngStream::new(5, 5)).is_err());
    }

    #[test]
    fn degenerate_losses_rejected() {
        assert!(matches!(kde_entropy(&[1.0; 10]), Err(Error::Degenerate(_))));
        assert!(kde_entropy(&[1.0]).is_err());
    }

    #[test]
    fn ranking_ties_go_to_lower_index() {
        assert_eq!(rank_layers(&[1.0, 2.0, 2.0, f64::NEG_INFINITY]), vec![1, 2, 0, 3]);
        assert_eq!(rank_layers(&[f64::NEG_INFINITY, f64::NEG_INFINITY]), vec![0, 1]);
    }

    #[test]
    fn single_sample_score_is_its_entropy() {
        let m = model(&[2, 4, 3]);
        let d = crate::datasets::gen_blobs(1, 4, 2, 1.0, 2).unwrap().subset(&[0]);
        let rng = RngStream::new(6, 0);
        let s = layer_score(&m, &d, 1, 500, 0.2, &rng).unwrap();
        let mut stream = rng.fork(1 << 32);
        let ls = loss_samples(&m, d.x(0), d.target(0), 1, 500, 0.2, &mut stream).unwrap();
        assert_eq!(s, kde_entropy(&ls).unwrap());
    }

    #[test]
    fn two_layer_runner_up_and_report_roundtrip() {
        let m = model(&[2, 4, 3]);
        let d = crate::datasets::gen_blobs(1, 8, 2, 1.0, 2).unwrap();
        let cfg = SelectionConfig { draws: 300, sigma_rel: 0.1 };
        let r = select_layer(&m, &d, &cfg, &RngStream::new(1, 0)).unwrap();
        assert_eq!(r.runner_up, Some(1 - r.selected));
        let json = serde_json::to_string(&r).unwrap();
        let back: LayerScoreReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
        assert_eq!(select_layer(&m, &d, &cfg, &RngStream::new(1, 0)).unwrap(), r);
        assert!(r.to_table().contains("selected layer"));
        assert_eq!(r.to_csv().unwrap().lines().count(), 3);

        let single = model(&[2, 3]);
        let r1 = select_layer(&single, &d, &cfg, &RngStream::new(1, 0)).unwrap();
        assert_eq!((r1.selected, r1.runner_up), (0, None));
    }
}
