//! Overfits each training sample on the last layer for three gradient
//! steps and summarises the resulting delta corpus.
//!
//! cargo run --example collect -- [lr]

use ocd::harness::{model_spec, prepare_data, train_base, PipelineConfig};
use ocd::numkit::RngStream;
use ocd::overfit::{collect, FinetuneConfig};

fn main() -> ocd::Result<()> {
    let lr = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(0.1);
    let cfg = PipelineConfig::default();
    let data = prepare_data(&cfg, 42)?;
    let spec = model_spec(&cfg.model, &data.train)?;
    let (model, _) = train_base(spec, &data.train, &cfg.base, &mut RngStream::new(42, 1), &mut RngStream::new(42, 2))?;
    let layer = model.depth() - 1;
    let ft = FinetuneConfig { lr, ..FinetuneConfig::default() };
    let store = collect(&model, layer, &data.train, &ft)?;
    let improved = store.records.iter().filter(|r| r.loss_after < r.loss_before).count();
    let mut rhos: Vec<f64> = store.records.iter().map(|r| r.rho).collect();
    rhos.sort_by(f64::total_cmp);
    let q = |p: f64| rhos[((rhos.len() - 1) as f64 * p) as usize];
    println!(
        "layer {layer} ({:?}): {} records, {} excluded",
        store.manifest.matrix_shape,
        store.len(),
        store.manifest.excluded.len()
    );
    println!(
        "loss reduced on {:.1}% of samples; rho quartiles {:.3e} {:.3e} {:.3e}",
        100.0 * improved as f64 / store.len() as f64,
        q(0.25),
        q(0.5),
        q(0.75)
    );
    let worst = store.records.iter().map(|r| (r.delta.norm() - 1.0).abs()).fold(0.0, f64::max);
    println!("max | ||delta_norm|| - 1 | = {worst:.1e}");
    Ok(())
}
