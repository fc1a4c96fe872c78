//! Trains the base classifier on blobs and reports train/test loss and
//! accuracy.
//!
//! cargo run --example train_base -- [epochs]

use ocd::harness::{mean_loss, model_spec, predict, prepare_data, score, train_base, BaseTrainConfig, PipelineConfig, TestSet};
use ocd::numkit::RngStream;

fn main() -> ocd::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(20);
    let cfg = PipelineConfig::default();
    let data = prepare_data(&cfg, 42)?;
    let spec = model_spec(&cfg.model, &data.train)?;
    println!("layer sizes {:?}", spec.layer_sizes);
    let base_cfg = BaseTrainConfig { epochs, ..cfg.base };
    let (model, history) = train_base(spec, &data.train, &base_cfg, &mut RngStream::new(42, 1), &mut RngStream::new(42, 2))?;
    for (e, l) in history.iter().enumerate().step_by((epochs / 5).max(1)) {
        println!("epoch {e:>3}: train CE {l:.4}");
    }
    let test = TestSet::new(data.test.clone());
    let preds = (0..test.len()).map(|i| predict(&model, test.x(i))).collect::<ocd::Result<Vec<_>>>()?;
    let m = score(&test, &preds)?;
    println!(
        "train CE {:.4}; test CE {:.4}, accuracy {:.2}%",
        mean_loss(&model, &data.train)?,
        m.loss,
        100.0 * m.accuracy.unwrap_or(f64::NAN)
    );
    println!("checksum {}", &model.checksum()[..16]);
    Ok(())
}
