//! Gradient, sampler and geometry checks for the diffusion hypernetwork.

use ocd::hyperdiff::{
    ancestral_sample, apply_weights, crop, pad_square, DenoiserConfig, DiffusionBundle, DiffusionConfig, NoiseModel,
    NoiseSchedule, OutputParam, PadGeometry,
};
use ocd::numkit::{Activation, Head, MlpModel, MlpSpec, RngStream, Tensor};
use ocd::overfit::{ConditioningTuple, FinetuneConfig, OverfitRecord, StoreManifest};
use ocd::Error;

fn manifest(rows: usize, cols: usize, dims: [usize; 3]) -> StoreManifest {
    StoreManifest {
        layer: 1,
        matrix_shape: [rows, cols],
        input_dim: dims[0],
        cond_dims: dims,
        records: 0,
        excluded: vec![],
        base_checksum: "abc".into(),
        finetune: FinetuneConfig::default(),
    }
}

fn small_config(output: OutputParam, attention: bool) -> DiffusionConfig {
    DiffusionConfig {
        d_cond: 8,
        denoiser: DenoiserConfig {
            channels: 4,
            levels: 2,
            attention,
            output,
        },
        ..DiffusionConfig::default()
    }
}

fn random_cond(rng: &mut RngStream, dims: [usize; 3]) -> ConditioningTuple {
    ConditioningTuple {
        input: rng.gaussian(&[dims[0]]).into_data(),
        activation: rng.gaussian(&[dims[1]]).into_data(),
        output: rng.gaussian(&[dims[2]]).into_data(),
    }
}

/// Central differences at sampled coordinates of every parameter tensor.
fn fd_check_bundle(output: OutputParam, seed: u64) {
    let dims = [3, 5, 2];
    let m = manifest(6, 5, dims);
    let mut bundle = DiffusionBundle::new(small_config(output, true), &m, seed).unwrap();
    let mut rng = RngStream::new(seed, 1);
    // move every tensor away from its structured init so no gradient is trivially zero
    for p in bundle.params_mut() {
        let noise = rng.gaussian(p.shape()).scaled(0.05);
        p.axpy(1.0, &noise);
    }
    let cond = random_cond(&mut rng, dims);
    let delta = rng.gaussian(&[6, 5]).scaled(0.2);
    let side = bundle.geometry.side;
    for t in [1, 4, 10] {
        let eps = rng.gaussian(&[side, side]);
        let (_, grads) = bundle.objective_and_gradients(&cond, &delta, t, &eps).unwrap();
        let n = grads.len();
        let mut worst: f64 = 0.0;
        for k in 0..n {
            // two coordinates in every tensor: well over twenty per family
            for _ in 0..2 {
                let i = rng.below(grads[k].len());
                // fourth-order stencil keeps truncation and roundoff both far below the tolerance
                let h = 1e-3;
                let at = |off: f64| {
                    let mut b = bundle.clone();
                    b.params_mut()[k].data_mut()[i] += off;
                    b.objective(&cond, &delta, t, &eps).unwrap()
                };
                let fd = (-at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h)) / (12.0 * h);
                let an = grads[k].data()[i];
                let denom = fd.abs().max(an.abs());
                let name = &bundle.param_names()[k];
                if denom < 1e-8 {
                    assert!((fd - an).abs() < 1e-9, "{name}[{i}] t={t}: fd {fd} analytic {an}");
                    continue;
                }
                let rel = (fd - an).abs() / denom;
                let tol = if name.starts_with("enc_") { 1e-6 } else { 1e-4 };
                assert!(rel < tol, "{name}[{i}] t={t}: fd {fd} analytic {an} rel {rel}");
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-4);
    }
}

#[test]
fn bundle_gradients_match_finite_differences() {
    fd_check_bundle(OutputParam::CleanEstimate, 3);
    fd_check_bundle(OutputParam::Epsilon, 4);
}

#[test]
fn denoiser_is_deterministic_and_shape_preserving() {
    let dims = [2, 4, 3];
    let b = DiffusionBundle::new(small_config(OutputParam::Epsilon, true), &manifest(5, 3, dims), 9).unwrap();
    let mut rng = RngStream::new(1, 0);
    let cond = random_cond(&mut rng, dims);
    let data = b.encode(&cond).unwrap();
    let omega = rng.gaussian(&[8, 8]);
    let a = b.noise_estimate(&omega, 3, &data).unwrap();
    let c = b.noise_estimate(&omega, 3, &data).unwrap();
    assert_eq!(a.shape(), &[8, 8]);
    assert_eq!(a, c);
    assert!(a.is_finite());
    // cached data part vs full evaluation
    assert_eq!(b.encoders.at_step(&data, 3), b.encoders.encode(&cond, 3).unwrap());
}

#[test]
fn zero_encoders_give_positional_encoding() {
    let dims = [2, 4, 3];
    let mut b = DiffusionBundle::new(small_config(OutputParam::Epsilon, false), &manifest(5, 3, dims), 9).unwrap();
    b.encoders.store.tensors.iter_mut().for_each(|t| t.fill(0.0));
    let cond = random_cond(&mut RngStream::new(2, 0), dims);
    assert_eq!(b.encoders.encode(&cond, 7).unwrap(), ocd::hyperdiff::pos_encode(7, 8).unwrap());
    let bad = ConditioningTuple {
        input: vec![0.0; 3],
        ..cond
    };
    assert!(b.encoders.encode(&bad, 1).is_err());
}

struct Rigged;

impl NoiseModel for Rigged {
    fn predict(&self, omega_t: &Tensor, _t: usize) -> ocd::Result<Tensor> {
        Ok(Tensor::zeros(omega_t.shape()))
    }
}

#[test]
fn zero_noise_sampler_is_closed_form() {
    let s = NoiseSchedule::new(10).unwrap();
    let start = RngStream::new(5, 0).gaussian(&[8, 8]);
    let out = ancestral_sample(&Rigged, &s, start.clone(), None).unwrap();
    let want = start.scaled(1.0 / s.alpha_bar(10).sqrt());
    assert!(out.max_abs_diff(&want) < 1e-9);
}

#[test]
fn rigged_exact_noise_gives_zero_objective() {
    // a clean-estimate network that outputs exactly Δ reproduces ε
    let dims = [1, 1, 1];
    let mut b = DiffusionBundle::new(small_config(OutputParam::CleanEstimate, false), &manifest(2, 2, dims), 1).unwrap();
    b.denoiser.store.tensors.iter_mut().for_each(|t| t.fill(0.0));
    let cond = ConditioningTuple {
        input: vec![0.0],
        activation: vec![0.0],
        output: vec![0.0],
    };
    let eps = RngStream::new(3, 0).gaussian(&[4, 4]);
    // zero network output equals a zero delta
    let loss = b.objective(&cond, &Tensor::zeros(&[2, 2]), 5, &eps).unwrap();
    assert!(loss < 1e-24);
}

#[test]
fn forward_process_moments() {
    let s = NoiseSchedule::new(10).unwrap();
    let t = 6;
    let (a, _) = s.mix(t);
    let delta = Tensor::new(vec![2], vec![0.8, -0.6]).unwrap();
    let n = 100_000;
    let mut rng = RngStream::new(77, 0);
    let draws: Vec<Tensor> = (0..n).map(|_| s.q_sample(&delta, t, &rng.gaussian(&[2])).unwrap()).collect();
    for k in 0..2 {
        let mean = draws.iter().map(|d| d.data()[k]).sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d.data()[k] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let band = 3.0 * (1.0 - s.alpha_bar(t)).sqrt() / (n as f64).sqrt();
        assert!((mean - a * delta.data()[k]).abs() < band, "coordinate {k}");
        assert!((var / (1.0 - s.alpha_bar(t)) - 1.0).abs() < 0.02);
    }
}

#[test]
fn padding_geometry() {
    let w = RngStream::new(1, 0).gaussian(&[3, 5]);
    let m = pad_square(&w, 2).unwrap();
    assert_eq!(m.shape(), &[8, 8]);
    assert_eq!(m.norm(), w.norm());
    assert_eq!(crop(&m, 3, 5).unwrap(), w);
    let sq = RngStream::new(2, 0).gaussian(&[8, 8]);
    assert_eq!(pad_square(&sq, 2).unwrap(), sq);
    assert_eq!(PadGeometry::new(17, 16, 2).side, 20);
    assert_eq!(PadGeometry::new(9, 1, 3).side, 16);
}

#[test]
fn stochastic_sampling_differs_across_streams() {
    let dims = [2, 4, 3];
    let b = DiffusionBundle::new(small_config(OutputParam::CleanEstimate, true), &manifest(5, 3, dims), 9).unwrap();
    let cond = random_cond(&mut RngStream::new(3, 0), dims);
    let x = b.sample_delta(&cond, &mut RngStream::new(10, 1), false).unwrap();
    let y = b.sample_delta(&cond, &mut RngStream::new(10, 2), false).unwrap();
    assert_eq!(x.shape(), &[5, 3]);
    assert!(x.max_abs_diff(&y) > 0.0);
    let start = b.initial_noise(&mut RngStream::new(4, 0));
    let p = b.sample_from(&cond, start.clone(), None).unwrap();
    let q = b.sample_from(&cond, start, None).unwrap();
    assert_eq!(p, q);
}

#[test]
fn apply_weights_contract() {
    let mut rng = RngStream::new(8, 0);
    let spec = MlpSpec::new(vec![3, 4, 2], Activation::Tanh, Head::SoftmaxClassifier).unwrap();
    let model = MlpModel::init(spec, &mut rng).unwrap();
    let omega = rng.gaussian(&[5, 2]);
    assert_eq!(apply_weights(&model, 1, &omega, 0.0).unwrap(), model);
    let rho = 0.37;
    let tuned = apply_weights(&model, 1, &omega, rho).unwrap();
    assert_eq!(tuned.layers[0], model.layers[0]);
    let diff = tuned.layers[1].to_matrix().sub(&model.layers[1].to_matrix()).unwrap();
    assert!((diff.norm() - rho * omega.norm()).abs() < 1e-12);
    let back = apply_weights(&tuned, 1, &omega, -rho).unwrap();
    assert!(back.layers[1].to_matrix().max_abs_diff(&model.layers[1].to_matrix()) < 1e-12);
    assert!(apply_weights(&model, 1, &Tensor::zeros(&[4, 2]), 1.0).is_err());
}

#[test]
fn bundle_roundtrip_and_checksum_refusal() {
    let dims = [2, 4, 3];
    let m = manifest(5, 3, dims);
    let mut b = DiffusionBundle::new(small_config(OutputParam::CleanEstimate, true), &m, 9).unwrap();
    let mut rng = RngStream::new(1, 0);
    let rec = OverfitRecord {
        sample_index: 0,
        x: vec![0.0, 1.0],
        cond: random_cond(&mut rng, dims),
        delta: rng.gaussian(&[5, 3]),
        rho: 1.0,
        loss_before: 1.0,
        loss_after: 0.5,
    };
    b.train_step(&rec, &mut rng).unwrap();
    let dir = tempfile::tempdir().unwrap();
    b.save(dir.path(), 9).unwrap();
    let back = DiffusionBundle::load(dir.path(), Some("abc")).unwrap();
    assert_eq!(back, b);
    match DiffusionBundle::load(dir.path(), Some("other")) {
        Err(Error::ChecksumMismatch { .. }) => {}
        other => panic!("expected checksum refusal, got {other:?}"),
    }
}
