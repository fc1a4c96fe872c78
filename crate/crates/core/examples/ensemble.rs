//! Trains a small OCD branch in memory, then compares single diffusion
//! draws with k-draw ensembles on the test set.
//!
//! cargo run --example ensemble -- [k]

use ocd::harness::{
    ensemble_predict, model_spec, ocd_draws, predict, prepare_data, score, train_base, EnsembleMode, OcdArtifacts,
    PipelineConfig, TestSet,
};
use ocd::hyperdiff::{apply_weights, DenoiserConfig, DiffusionBundle, DiffusionConfig};
use ocd::numkit::RngStream;
use ocd::overfit::{collect, FinetuneConfig};
use ocd::scale::{train_scale, ScaleConfig};

fn main() -> ocd::Result<()> {
    let k: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(5);
    let cfg = PipelineConfig::default().with_overrides(&["dataset.n=1000"])?;
    let data = prepare_data(&cfg, 7)?;
    let spec = model_spec(&cfg.model, &data.train)?;
    let (base, _) = train_base(spec, &data.train, &cfg.base, &mut RngStream::new(7, 1), &mut RngStream::new(7, 2))?;
    let layer = base.depth() - 1;
    let store = collect(&base, layer, &data.train, &FinetuneConfig { lr: 0.1, ..FinetuneConfig::default() })?;
    let dcfg = DiffusionConfig {
        d_cond: 16,
        denoiser: DenoiserConfig {
            channels: 8,
            ..DenoiserConfig::default()
        },
        lr: 1e-3,
        epochs: 8,
        ..DiffusionConfig::default()
    };
    let mut bundle = DiffusionBundle::new(dcfg, &store.manifest, 7)?;
    bundle.train(&store, &mut RngStream::new(7, 5))?;
    let scale = train_scale(&store, &ScaleConfig { lr: 1e-3, epochs: 30, ..ScaleConfig::default() }, &mut RngStream::new(7, 6))?;
    let arts = OcdArtifacts { layer, store, bundle, scale };

    let test = TestSet::new(data.test.clone());
    let draws = (0..test.len())
        .map(|i| ocd_draws(&arts, &base, test.x(i), k, |j| RngStream::new(7, 9).fork((i * 64 + j) as u64)))
        .collect::<ocd::Result<Vec<_>>>()?;
    let base_preds = (0..test.len()).map(|i| predict(&base, test.x(i))).collect::<ocd::Result<Vec<_>>>()?;
    println!("base:               CE {:.4}", score(&test, &base_preds)?.loss);
    let mut singles = 0.0;
    for j in 0..k {
        let preds = (0..test.len())
            .map(|i| predict(&apply_weights(&base, layer, &draws[i].omegas[j], draws[i].rho_hat)?, test.x(i)))
            .collect::<ocd::Result<Vec<_>>>()?;
        let m = score(&test, &preds)?;
        println!("draw {j}:             CE {:.4}", m.loss);
        singles += m.loss / k as f64;
    }
    println!("mean single draw:   CE {singles:.4}");
    for mode in [EnsembleMode::LogitAvg, EnsembleMode::WeightAvg] {
        let preds = (0..test.len())
            .map(|i| ensemble_predict(&base, layer, &draws[i], k, mode, test.x(i)))
            .collect::<ocd::Result<Vec<_>>>()?;
        println!("{mode:?} k={k}: CE {:.4}", score(&test, &preds)?.loss);
    }
    Ok(())
}
