//! Scores each layer of a trained base model by the mean entropy of its
//! perturbed-loss distribution and prints the ranking.
//!
//! cargo run --example select_layer -- [draws]

use ocd::harness::{model_spec, prepare_data, train_base, PipelineConfig};
use ocd::layer_select::{select_layer, SelectionConfig};
use ocd::numkit::RngStream;

fn main() -> ocd::Result<()> {
    let draws = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(2000);
    let cfg = PipelineConfig::default();
    let data = prepare_data(&cfg, 42)?;
    let spec = model_spec(&cfg.model, &data.train)?;
    let (model, _) = train_base(spec, &data.train, &cfg.base, &mut RngStream::new(42, 1), &mut RngStream::new(42, 2))?;
    let subset = data.train.subset(&(0..64).collect::<Vec<_>>());
    let report = select_layer(
        &model,
        &subset,
        &SelectionConfig { draws, sigma_rel: 0.1 },
        &RngStream::new(42, 4),
    )?;
    print!("{}", report.to_table());
    println!("selected layer {} (runner-up {:?})", report.selected, report.runner_up);
    Ok(())
}
